#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation.
// Each op records a node holding its inputs and a backward closure; calling
// backward() on a scalar loss walks the recorded graph in reverse topological
// order and accumulates gradients into every requires_grad tensor it reaches.
//
// Layout rules: row-major, explicit shapes, no implicit broadcasting except
// the leading batch dims of matmul. Scalars are shape {1}.
//
// Tensors are immutable after creation except for their grad buffers, and a
// recorded graph must not be shared across concurrent evaluations. Distinct
// graphs are independent.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace xm {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

inline std::vector<std::size_t> row_major_strides(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

[[noreturn]] inline void fail(const std::string& op, const std::string& what) {
    throw std::invalid_argument(op + ": " + what);
}

namespace detail {

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;    // empty until backward touches this node
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    // Pulls from this node's grad and accumulates into the parents' grads.
    std::function<void(const Node&)> backward_fn;

    void ensure_grad() {
        if (grad.empty()) grad.assign(values.size(), T(0));
    }
};

} // namespace detail

template <typename T>
class Tensor {
public:
    Tensor() = default;

    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
        if (values.size() != numel(shape))
            fail("Tensor::from", "data length " + std::to_string(values.size()) +
                                     " does not match shape " + shape_str(shape));
        Tensor t;
        t.n_ = std::make_shared<detail::Node<T>>();
        t.n_->shape = std::move(shape);
        t.n_->values = std::move(values);
        t.n_->requires_grad = requires_grad;
        return t;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<T> v(numel(shape), T(0));
        return from(std::move(shape), std::move(v), requires_grad);
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        std::vector<T> v(numel(shape), value);
        return from(std::move(shape), std::move(v), requires_grad);
    }

    static Tensor scalar(T value, bool requires_grad = false) {
        return from({1}, {value}, requires_grad);
    }

    bool valid() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    std::size_t rank() const { return n_->shape.size(); }
    std::size_t size() const { return n_->values.size(); }
    std::size_t extent(std::size_t axis) const { return n_->shape[axis]; }

    std::span<const T> data() const { return n_->values; }
    std::span<T> mutable_data() { return n_->values; }
    T item() const {
        if (size() != 1) fail("Tensor::item", "tensor has " + std::to_string(size()) + " elements");
        return n_->values[0];
    }

    bool requires_grad() const { return n_->requires_grad; }
    Tensor& set_requires_grad(bool b) {
        n_->requires_grad = b;
        return *this;
    }

    // Zeros if backward never reached this tensor.
    std::vector<T> grad() const {
        if (n_->grad.empty()) return std::vector<T>(size(), T(0));
        return n_->grad;
    }
    void zero_grad() { n_->grad.assign(size(), T(0)); }

    std::shared_ptr<detail::Node<T>> node() const { return n_; }

private:
    std::shared_ptr<detail::Node<T>> n_;
};

namespace detail {

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values, const char* op,
                      std::vector<std::shared_ptr<Node<T>>> parents,
                      std::function<void(const Node<T>&)> backward_fn) {
    bool needs = false;
    for (const auto& p : parents) needs = needs || p->requires_grad;
    Tensor<T> out = Tensor<T>::from(std::move(shape), std::move(values));
    auto n = out.node();
    n->op = op;
    if (needs) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward_fn = std::move(backward_fn);
    }
    return out;
}

} // namespace detail

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

template <typename T>
void backward(const Tensor<T>& loss) {
    if (loss.size() != 1) fail("backward", "loss must be scalar, got shape " + shape_str(loss.shape()));
    auto root = loss.node();
    if (!root->requires_grad && root->parents.empty() && !root->backward_fn) {
        // Constant loss: nothing reachable.
        return;
    }

    // Iterative DFS post-order: children after all parents, then reversed.
    std::vector<detail::Node<T>*> order;
    std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
    std::vector<detail::Node<T>*> seen;
    auto visited = [&](detail::Node<T>* n) {
        return std::find(seen.begin(), seen.end(), n) != seen.end();
    };
    stack.emplace_back(root.get(), 0);
    seen.push_back(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node<T>* p = node->parents[next++].get();
            if (p->requires_grad && !visited(p)) {
                seen.push_back(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node<T>* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        fail("add", "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> v(a.size());
    auto da = a.data(), db = b.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = da[i] + db[i];
    auto pa = a.node(), pb = b.node();
    return detail::make_result<T>(
        a.shape(), std::move(v), "add", {pa, pb}, [pa, pb](const detail::Node<T>& out) {
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (std::size_t i = 0; i < out.grad.size(); ++i) pa->grad[i] += out.grad[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (std::size_t i = 0; i < out.grad.size(); ++i) pb->grad[i] += out.grad[i];
            }
        });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        fail("mul", "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> v(a.size());
    auto da = a.data(), db = b.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = da[i] * db[i];
    auto pa = a.node(), pb = b.node();
    return detail::make_result<T>(
        a.shape(), std::move(v), "mul", {pa, pb}, [pa, pb](const detail::Node<T>& out) {
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (std::size_t i = 0; i < out.grad.size(); ++i)
                    pa->grad[i] += out.grad[i] * pb->values[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (std::size_t i = 0; i < out.grad.size(); ++i)
                    pb->grad[i] += out.grad[i] * pa->values[i];
            }
        });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        fail("div", "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> v(a.size());
    auto da = a.data(), db = b.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = da[i] / db[i];
    auto pa = a.node(), pb = b.node();
    return detail::make_result<T>(
        a.shape(), std::move(v), "div", {pa, pb}, [pa, pb](const detail::Node<T>& out) {
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (std::size_t i = 0; i < out.grad.size(); ++i)
                    pa->grad[i] += out.grad[i] / pb->values[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (std::size_t i = 0; i < out.grad.size(); ++i) {
                    const T bi = pb->values[i];
                    pb->grad[i] -= out.grad[i] * pa->values[i] / (bi * bi);
                }
            }
        });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    std::vector<T> v(a.size());
    auto da = a.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = da[i] * c;
    auto pa = a.node();
    return detail::make_result<T>(
        a.shape(), std::move(v), "scale", {pa}, [pa, c](const detail::Node<T>& out) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < out.grad.size(); ++i) pa->grad[i] += out.grad[i] * c;
        });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return add(a, scale(b, T(-1)));
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    // Exact erf form: x * Phi(x).
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    std::vector<T> v(x.size());
    auto dx = x.data();
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double xv = static_cast<double>(dx[i]);
        v[i] = static_cast<T>(xv * 0.5 * (1.0 + std::erf(xv * inv_sqrt2)));
    }
    auto px = x.node();
    return detail::make_result<T>(
        x.shape(), std::move(v), "gelu", {px}, [px](const detail::Node<T>& out) {
            px->ensure_grad();
            for (std::size_t i = 0; i < out.grad.size(); ++i) {
                const double xv = static_cast<double>(px->values[i]);
                const double cdf = 0.5 * (1.0 + std::erf(xv * inv_sqrt2));
                const double pdf = inv_sqrt2pi * std::exp(-0.5 * xv * xv);
                px->grad[i] += out.grad[i] * static_cast<T>(cdf + xv * pdf);
            }
        });
}

// ---------------------------------------------------------------------------
// matmul, batched over leading dims with broadcasting
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() < 2 || sb.size() < 2)
        fail("matmul", "operands must have rank >= 2, got " + shape_str(sa) + " and " + shape_str(sb));
    const std::size_t m = sa[sa.size() - 2], k = sa[sa.size() - 1];
    const std::size_t kb = sb[sb.size() - 2], n = sb[sb.size() - 1];
    if (k != kb)
        fail("matmul", "inner extents differ: " + shape_str(sa) + " x " + shape_str(sb));

    // Broadcast batch dims.
    const std::size_t ra = sa.size() - 2, rb = sb.size() - 2;
    const std::size_t rc = std::max(ra, rb);
    Shape batch(rc);
    for (std::size_t i = 0; i < rc; ++i) {
        const std::size_t ea = i < rc - ra ? 1 : sa[i - (rc - ra)];
        const std::size_t eb = i < rc - rb ? 1 : sb[i - (rc - rb)];
        if (ea != eb && ea != 1 && eb != 1)
            fail("matmul", "batch dims not broadcast-compatible: " + shape_str(sa) + " x " + shape_str(sb));
        batch[i] = std::max(ea, eb);
    }
    const std::size_t nb = numel(batch);

    // Per-batch element offsets for a and b (0-stride on broadcast dims).
    auto batch_offsets = [&](const Shape& s, std::size_t r) {
        std::vector<std::size_t> offs(nb, 0);
        if (nb == 0) return offs;
        std::vector<std::size_t> stride(rc, 0);
        std::size_t run = s[s.size() - 2] * s[s.size() - 1];
        for (std::size_t i = r; i-- > 0;) {
            const std::size_t dim = rc - r + i;
            stride[dim] = (s[i] == 1) ? 0 : run;
            run *= s[i];
        }
        std::vector<std::size_t> idx(rc, 0);
        for (std::size_t bi = 0; bi < nb; ++bi) {
            std::size_t off = 0;
            for (std::size_t d = 0; d < rc; ++d) off += idx[d] * stride[d];
            offs[bi] = off;
            for (std::size_t d = rc; d-- > 0;) {
                if (++idx[d] < batch[d]) break;
                idx[d] = 0;
            }
        }
        return offs;
    };
    const std::vector<std::size_t> offs_a = batch_offsets(sa, ra);
    const std::vector<std::size_t> offs_b = batch_offsets(sb, rb);

    Shape out_shape = batch;
    out_shape.push_back(m);
    out_shape.push_back(n);
    std::vector<T> v(numel(out_shape), T(0));
    auto da = a.data(), db = b.data();
    for (std::size_t bi = 0; bi < nb; ++bi) {
        const T* pa = da.data() + offs_a[bi];
        const T* pb = db.data() + offs_b[bi];
        T* pc = v.data() + bi * m * n;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t l = 0; l < k; ++l) {
                const T av = pa[i * k + l];
                const T* brow = pb + l * n;
                T* crow = pc + i * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
    }

    auto na = a.node(), nbn = b.node();
    return detail::make_result<T>(
        std::move(out_shape), std::move(v), "matmul", {na, nbn},
        [na, nbn, offs_a, offs_b, m, n, k, nb](const detail::Node<T>& out) {
            const T* g = out.grad.data();
            if (na->requires_grad) {
                na->ensure_grad();
                for (std::size_t bi = 0; bi < nb; ++bi) {
                    T* ga = na->grad.data() + offs_a[bi];
                    const T* pb = nbn->values.data() + offs_b[bi];
                    const T* pg = g + bi * m * n;
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t l = 0; l < k; ++l) {
                            T acc = T(0);
                            const T* grow = pg + i * n;
                            const T* brow = pb + l * n;
                            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                            ga[i * k + l] += acc;
                        }
                }
            }
            if (nbn->requires_grad) {
                nbn->ensure_grad();
                for (std::size_t bi = 0; bi < nb; ++bi) {
                    const T* pa = na->values.data() + offs_a[bi];
                    T* gb = nbn->grad.data() + offs_b[bi];
                    const T* pg = g + bi * m * n;
                    for (std::size_t l = 0; l < k; ++l)
                        for (std::size_t i = 0; i < m; ++i) {
                            const T av = pa[i * k + l];
                            const T* grow = pg + i * n;
                            T* brow = gb + l * n;
                            for (std::size_t j = 0; j < n; ++j) brow[j] += av * grow[j];
                        }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// softmax along an axis (max-subtracted)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
    if (axis >= x.rank()) fail("softmax", "axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
    const Shape& s = x.shape();
    const std::size_t len = s[axis];
    std::size_t inner = 1, outer = 1;
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];

    std::vector<T> v(x.size());
    auto dx = x.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, dx[base + j * inner]);
            T sum = T(0);
            for (std::size_t j = 0; j < len; ++j) {
                const T e = std::exp(dx[base + j * inner] - mx);
                v[base + j * inner] = e;
                sum += e;
            }
            const T inv = T(1) / sum;
            for (std::size_t j = 0; j < len; ++j) v[base + j * inner] *= inv;
        }

    auto px = x.node();
    auto out_vals = std::make_shared<std::vector<T>>(v);
    return detail::make_result<T>(
        x.shape(), std::move(v), "softmax", {px},
        [px, out_vals, len, inner, outer](const detail::Node<T>& out) {
            px->ensure_grad();
            const std::vector<T>& y = *out_vals;
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * len * inner + in;
                    T dot = T(0);
                    for (std::size_t j = 0; j < len; ++j)
                        dot += out.grad[base + j * inner] * y[base + j * inner];
                    for (std::size_t j = 0; j < len; ++j) {
                        const std::size_t idx = base + j * inner;
                        px->grad[idx] += y[idx] * (out.grad[idx] - dot);
                    }
                }
        });
}

// ---------------------------------------------------------------------------
// layer norm over the last axis
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
    if (x.rank() < 1) fail("layer_norm", "input must have rank >= 1");
    const std::size_t c = x.shape().back();
    if (gain.size() != c || bias.size() != c)
        fail("layer_norm", "gain/bias length must match last axis extent " + std::to_string(c));
    const std::size_t rows = x.size() / c;

    std::vector<T> v(x.size());
    std::vector<T> xhat(x.size());
    std::vector<T> inv_std(rows);
    auto dx = x.data();
    auto dg = gain.data();
    auto db = bias.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = dx.data() + r * c;
        T mean = T(0);
        for (std::size_t j = 0; j < c; ++j) mean += row[j];
        mean /= T(c);
        T var = T(0);
        for (std::size_t j = 0; j < c; ++j) {
            const T d = row[j] - mean;
            var += d * d;
        }
        var /= T(c);
        const T istd = T(1) / std::sqrt(var + eps);
        inv_std[r] = istd;
        for (std::size_t j = 0; j < c; ++j) {
            const T h = (row[j] - mean) * istd;
            xhat[r * c + j] = h;
            v[r * c + j] = h * dg[j] + db[j];
        }
    }

    auto px = x.node(), pg = gain.node(), pb = bias.node();
    auto saved_xhat = std::make_shared<std::vector<T>>(std::move(xhat));
    auto saved_istd = std::make_shared<std::vector<T>>(std::move(inv_std));
    return detail::make_result<T>(
        x.shape(), std::move(v), "layer_norm", {px, pg, pb},
        [px, pg, pb, saved_xhat, saved_istd, rows, c](const detail::Node<T>& out) {
            const std::vector<T>& h = *saved_xhat;
            const std::vector<T>& istd = *saved_istd;
            if (pg->requires_grad) pg->ensure_grad();
            if (pb->requires_grad) pb->ensure_grad();
            if (px->requires_grad) px->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* g = out.grad.data() + r * c;
                const T* hr = h.data() + r * c;
                if (pg->requires_grad)
                    for (std::size_t j = 0; j < c; ++j) pg->grad[j] += g[j] * hr[j];
                if (pb->requires_grad)
                    for (std::size_t j = 0; j < c; ++j) pb->grad[j] += g[j];
                if (px->requires_grad) {
                    T sum_dh = T(0), sum_dh_h = T(0);
                    for (std::size_t j = 0; j < c; ++j) {
                        const T dh = g[j] * pg->values[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                    }
                    const T invc = T(1) / T(c);
                    for (std::size_t j = 0; j < c; ++j) {
                        const T dh = g[j] * pg->values[j];
                        px->grad[r * c + j] +=
                            istd[r] * (dh - sum_dh * invc - hr[j] * sum_dh_h * invc);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// linear map over the last axis: y = x W + b, W: {in, out}, b: {out}
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    if (weight.rank() != 2) fail("linear", "weight must be rank 2, got " + shape_str(weight.shape()));
    const std::size_t cin = weight.extent(0), cout = weight.extent(1);
    if (x.shape().back() != cin)
        fail("linear", "input last axis " + shape_str(x.shape()) + " does not match weight " + shape_str(weight.shape()));
    if (bias.size() != cout)
        fail("linear", "bias length " + std::to_string(bias.size()) + " does not match out width " + std::to_string(cout));
    const std::size_t rows = x.size() / cin;

    Shape out_shape = x.shape();
    out_shape.back() = cout;
    std::vector<T> v(rows * cout);
    auto dx = x.data();
    auto dw = weight.data();
    auto db = bias.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = dx.data() + r * cin;
        T* orow = v.data() + r * cout;
        for (std::size_t j = 0; j < cout; ++j) orow[j] = db[j];
        for (std::size_t i = 0; i < cin; ++i) {
            const T xv = row[i];
            const T* wrow = dw.data() + i * cout;
            for (std::size_t j = 0; j < cout; ++j) orow[j] += xv * wrow[j];
        }
    }

    auto px = x.node(), pw = weight.node(), pb = bias.node();
    return detail::make_result<T>(
        std::move(out_shape), std::move(v), "linear", {px, pw, pb},
        [px, pw, pb, rows, cin, cout](const detail::Node<T>& out) {
            if (px->requires_grad) {
                px->ensure_grad();
                for (std::size_t r = 0; r < rows; ++r) {
                    const T* g = out.grad.data() + r * cout;
                    T* gx = px->grad.data() + r * cin;
                    for (std::size_t i = 0; i < cin; ++i) {
                        const T* wrow = pw->values.data() + i * cout;
                        T acc = T(0);
                        for (std::size_t j = 0; j < cout; ++j) acc += g[j] * wrow[j];
                        gx[i] += acc;
                    }
                }
            }
            if (pw->requires_grad) {
                pw->ensure_grad();
                for (std::size_t r = 0; r < rows; ++r) {
                    const T* g = out.grad.data() + r * cout;
                    const T* row = px->values.data() + r * cin;
                    for (std::size_t i = 0; i < cin; ++i) {
                        T* gw = pw->grad.data() + i * cout;
                        const T xv = row[i];
                        for (std::size_t j = 0; j < cout; ++j) gw[j] += xv * g[j];
                    }
                }
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (std::size_t r = 0; r < rows; ++r) {
                    const T* g = out.grad.data() + r * cout;
                    for (std::size_t j = 0; j < cout; ++j) pb->grad[j] += g[j];
                }
            }
        });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (numel(shape) != x.size())
        fail("reshape", "cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
    std::vector<T> v(x.data().begin(), x.data().end());
    auto px = x.node();
    return detail::make_result<T>(
        std::move(shape), std::move(v), "reshape", {px}, [px](const detail::Node<T>& out) {
            px->ensure_grad();
            for (std::size_t i = 0; i < out.grad.size(); ++i) px->grad[i] += out.grad[i];
        });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
    const Shape& s = x.shape();
    if (perm.size() != s.size()) fail("permute", "perm rank mismatch for " + shape_str(s));
    std::vector<bool> used(s.size(), false);
    Shape out_shape(s.size());
    for (std::size_t i = 0; i < perm.size(); ++i) {
        if (perm[i] >= s.size() || used[perm[i]]) fail("permute", "invalid permutation");
        used[perm[i]] = true;
        out_shape[i] = s[perm[i]];
    }
    const auto in_strides = row_major_strides(s);
    // Stride of the output walk expressed in input flat offsets.
    std::vector<std::size_t> walk(s.size());
    for (std::size_t i = 0; i < perm.size(); ++i) walk[i] = in_strides[perm[i]];

    std::vector<T> v(x.size());
    auto dx = x.data();
    std::vector<std::size_t> idx(s.size(), 0);
    std::size_t src = 0;
    for (std::size_t o = 0; o < v.size(); ++o) {
        v[o] = dx[src];
        for (std::size_t d = out_shape.size(); d-- > 0;) {
            src += walk[d];
            if (++idx[d] < out_shape[d]) break;
            src -= walk[d] * out_shape[d];
            idx[d] = 0;
        }
    }

    auto px = x.node();
    return detail::make_result<T>(
        std::move(out_shape), std::move(v), "permute", {px},
        [px, walk, shape = Shape(out_shape)](const detail::Node<T>& out) {
            px->ensure_grad();
            std::vector<std::size_t> idx(shape.size(), 0);
            std::size_t src = 0;
            for (std::size_t o = 0; o < out.grad.size(); ++o) {
                px->grad[src] += out.grad[o];
                for (std::size_t d = shape.size(); d-- > 0;) {
                    src += walk[d];
                    if (++idx[d] < shape[d]) break;
                    src -= walk[d] * shape[d];
                    idx[d] = 0;
                }
            }
        });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::size_t axis) {
    if (xs.empty()) fail("concat", "no inputs");
    const Shape& s0 = xs[0].shape();
    if (axis >= s0.size()) fail("concat", "axis out of range");
    Shape out_shape = s0;
    std::size_t total = 0;
    for (const auto& x : xs) {
        const Shape& s = x.shape();
        if (s.size() != s0.size()) fail("concat", "rank mismatch");
        for (std::size_t d = 0; d < s.size(); ++d)
            if (d != axis && s[d] != s0[d])
                fail("concat", "shape mismatch " + shape_str(s) + " vs " + shape_str(s0));
        total += s[axis];
    }
    out_shape[axis] = total;

    std::size_t inner = 1, outer = 1;
    for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
    for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];

    std::vector<T> v(numel(out_shape));
    std::vector<std::size_t> lens;
    std::size_t off = 0;
    for (const auto& x : xs) {
        const std::size_t len = x.extent(axis) * inner;
        auto dx = x.data();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy(dx.begin() + o * len, dx.begin() + (o + 1) * len,
                      v.begin() + o * total * inner + off);
        lens.push_back(len);
        off += len;
    }

    std::vector<std::shared_ptr<detail::Node<T>>> parents;
    for (const auto& x : xs) parents.push_back(x.node());
    return detail::make_result<T>(
        std::move(out_shape), std::move(v), "concat", parents,
        [parents, lens, inner, outer, total](const detail::Node<T>& out) {
            std::size_t off = 0;
            for (std::size_t pi = 0; pi < parents.size(); ++pi) {
                auto& p = parents[pi];
                const std::size_t len = lens[pi];
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (std::size_t o = 0; o < outer; ++o) {
                        const T* g = out.grad.data() + o * total * inner + off;
                        T* gp = p->grad.data() + o * len;
                        for (std::size_t i = 0; i < len; ++i) gp[i] += g[i];
                    }
                }
                off += len;
            }
        });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t len) {
    const Shape& s = x.shape();
    if (axis >= s.size()) fail("slice", "axis out of range");
    if (start + len > s[axis]) fail("slice", "slice out of bounds on " + shape_str(s));
    Shape out_shape = s;
    out_shape[axis] = len;
    std::size_t inner = 1, outer = 1;
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];

    std::vector<T> v(numel(out_shape));
    auto dx = x.data();
    for (std::size_t o = 0; o < outer; ++o)
        std::copy(dx.begin() + (o * s[axis] + start) * inner,
                  dx.begin() + (o * s[axis] + start + len) * inner, v.begin() + o * len * inner);

    auto px = x.node();
    const std::size_t full = s[axis];
    return detail::make_result<T>(
        std::move(out_shape), std::move(v), "slice", {px},
        [px, axis, start, len, inner, outer, full](const detail::Node<T>& out) {
            (void)axis;
            px->ensure_grad();
            for (std::size_t o = 0; o < outer; ++o) {
                const T* g = out.grad.data() + o * len * inner;
                T* gp = px->grad.data() + (o * full + start) * inner;
                for (std::size_t i = 0; i < len * inner; ++i) gp[i] += g[i];
            }
        });
}

template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& x, std::size_t axis, const std::vector<std::size_t>& sizes) {
    std::size_t total = 0;
    for (std::size_t n : sizes) total += n;
    if (axis >= x.rank() || total != x.extent(axis))
        fail("split", "sizes do not cover axis extent of " + shape_str(x.shape()));
    std::vector<Tensor<T>> parts;
    std::size_t off = 0;
    for (std::size_t n : sizes) {
        parts.push_back(slice(x, axis, off, n));
        off += n;
    }
    return parts;
}

// ---------------------------------------------------------------------------
// gather / scatter by flat index (-1 gathers zero / drops the value)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> gather(const Tensor<T>& x, const std::vector<std::int64_t>& indices, Shape out_shape) {
    if (indices.size() != numel(out_shape))
        fail("gather", "index count does not match output shape " + shape_str(out_shape));
    const std::int64_t n = static_cast<std::int64_t>(x.size());
    std::vector<T> v(indices.size());
    auto dx = x.data();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const std::int64_t idx = indices[i];
        if (idx >= n) fail("gather", "index " + std::to_string(idx) + " out of range");
        v[i] = idx < 0 ? T(0) : dx[static_cast<std::size_t>(idx)];
    }
    auto px = x.node();
    auto shared_idx = std::make_shared<std::vector<std::int64_t>>(indices);
    return detail::make_result<T>(
        std::move(out_shape), std::move(v), "gather", {px},
        [px, shared_idx](const detail::Node<T>& out) {
            px->ensure_grad();
            const auto& idx = *shared_idx;
            for (std::size_t i = 0; i < idx.size(); ++i)
                if (idx[i] >= 0) px->grad[static_cast<std::size_t>(idx[i])] += out.grad[i];
        });
}

template <typename T>
Tensor<T> scatter_add(const Tensor<T>& values, const std::vector<std::int64_t>& indices, Shape out_shape) {
    if (indices.size() != values.size())
        fail("scatter_add", "index count does not match value count");
    const std::int64_t n = static_cast<std::int64_t>(numel(out_shape));
    std::vector<T> v(numel(out_shape), T(0));
    auto dv = values.data();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const std::int64_t idx = indices[i];
        if (idx >= n) fail("scatter_add", "index " + std::to_string(idx) + " out of range");
        if (idx >= 0) v[static_cast<std::size_t>(idx)] += dv[i];
    }
    auto pv = values.node();
    auto shared_idx = std::make_shared<std::vector<std::int64_t>>(indices);
    return detail::make_result<T>(
        std::move(out_shape), std::move(v), "scatter_add", {pv},
        [pv, shared_idx](const detail::Node<T>& out) {
            pv->ensure_grad();
            const auto& idx = *shared_idx;
            for (std::size_t i = 0; i < idx.size(); ++i)
                if (idx[i] >= 0) pv->grad[i] += out.grad[static_cast<std::size_t>(idx[i])];
        });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc = T(0);
    for (T v : x.data()) acc += v;
    auto px = x.node();
    return detail::make_result<T>(
        {1}, {acc}, "sum", {px}, [px](const detail::Node<T>& out) {
            px->ensure_grad();
            const T g = out.grad[0];
            for (std::size_t i = 0; i < px->grad.size(); ++i) px->grad[i] += g;
        });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    return scale(sum(x), T(1) / T(x.size()));
}

template <typename T>
Tensor<T> sum_axis(const Tensor<T>& x, std::size_t axis) {
    const Shape& s = x.shape();
    if (axis >= s.size()) fail("sum_axis", "axis out of range");
    const std::size_t len = s[axis];
    std::size_t inner = 1, outer = 1;
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    Shape out_shape;
    for (std::size_t i = 0; i < s.size(); ++i)
        if (i != axis) out_shape.push_back(s[i]);
    if (out_shape.empty()) out_shape = {1};

    std::vector<T> v(outer * inner, T(0));
    auto dx = x.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < len; ++j)
            for (std::size_t in = 0; in < inner; ++in)
                v[o * inner + in] += dx[(o * len + j) * inner + in];

    auto px = x.node();
    return detail::make_result<T>(
        std::move(out_shape), std::move(v), "sum_axis", {px},
        [px, len, inner, outer](const detail::Node<T>& out) {
            px->ensure_grad();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t j = 0; j < len; ++j)
                    for (std::size_t in = 0; in < inner; ++in)
                        px->grad[(o * len + j) * inner + in] += out.grad[o * inner + in];
        });
}

// ---------------------------------------------------------------------------
// box_sum: per-voxel sum over a cubic neighborhood of radius r, zero padding.
// Self-adjoint, so the backward pass is the same filter applied to the grad.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void box_sum_axis(std::vector<T>& data, const Shape& s, std::size_t axis, std::size_t r) {
    const std::size_t len = s[axis];
    std::size_t inner = 1, outer = 1;
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    std::vector<T> line(len);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            for (std::size_t j = 0; j < len; ++j) line[j] = data[base + j * inner];
            for (std::size_t j = 0; j < len; ++j) {
                const std::size_t lo = j >= r ? j - r : 0;
                const std::size_t hi = std::min(len - 1, j + r);
                T acc = T(0);
                for (std::size_t l = lo; l <= hi; ++l) acc += line[l];
                data[base + j * inner] = acc;
            }
        }
}

} // namespace detail

template <typename T>
Tensor<T> box_sum(const Tensor<T>& x, std::size_t radius) {
    if (x.rank() != 3) fail("box_sum", "expected a rank-3 volume, got " + shape_str(x.shape()));
    std::vector<T> v(x.data().begin(), x.data().end());
    for (std::size_t axis = 0; axis < 3; ++axis) detail::box_sum_axis(v, x.shape(), axis, radius);
    auto px = x.node();
    const Shape s = x.shape();
    return detail::make_result<T>(
        x.shape(), std::move(v), "box_sum", {px}, [px, s, radius](const detail::Node<T>& out) {
            px->ensure_grad();
            std::vector<T> g(out.grad);
            for (std::size_t axis = 0; axis < 3; ++axis) detail::box_sum_axis(g, s, axis, radius);
            for (std::size_t i = 0; i < g.size(); ++i) px->grad[i] += g[i];
        });
}

// ---------------------------------------------------------------------------
// trilinear grid sample. image: {D,H,W}; coords: {3, M0, M1, M2} holding the
// absolute sample position (depth, height, width) per output voxel in voxel
// units. Out-of-bounds coordinates clamp to the border. Differentiable in
// both image values and coordinates.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> grid_sample(const Tensor<T>& image, const Tensor<T>& coords) {
    if (image.rank() != 3) fail("grid_sample", "image must be rank 3, got " + shape_str(image.shape()));
    if (coords.rank() != 4 || coords.extent(0) != 3)
        fail("grid_sample", "coords must be {3, M0, M1, M2}, got " + shape_str(coords.shape()));
    const std::size_t D = image.extent(0), H = image.extent(1), W = image.extent(2);
    const std::size_t M = coords.size() / 3;
    Shape out_shape{coords.extent(1), coords.extent(2), coords.extent(3)};

    auto img = image.data();
    auto crd = coords.data();
    std::vector<T> v(M);

    auto sample_axis = [](T c, std::size_t n, std::size_t& i0, std::size_t& i1, T& f, bool& interior) {
        const T hi = static_cast<T>(n - 1);
        interior = c > T(0) && c < hi;
        const T cc = std::clamp(c, T(0), hi);
        const T fl = std::floor(cc);
        i0 = static_cast<std::size_t>(fl);
        i1 = std::min(i0 + 1, n - 1);
        f = cc - fl;
    };

    for (std::size_t m = 0; m < M; ++m) {
        std::size_t d0, d1, h0, h1, w0, w1;
        T fd, fh, fw;
        bool ind, inh, inw;
        sample_axis(crd[m], D, d0, d1, fd, ind);
        sample_axis(crd[M + m], H, h0, h1, fh, inh);
        sample_axis(crd[2 * M + m], W, w0, w1, fw, inw);
        const T c00 = img[(d0 * H + h0) * W + w0] * (T(1) - fw) + img[(d0 * H + h0) * W + w1] * fw;
        const T c01 = img[(d0 * H + h1) * W + w0] * (T(1) - fw) + img[(d0 * H + h1) * W + w1] * fw;
        const T c10 = img[(d1 * H + h0) * W + w0] * (T(1) - fw) + img[(d1 * H + h0) * W + w1] * fw;
        const T c11 = img[(d1 * H + h1) * W + w0] * (T(1) - fw) + img[(d1 * H + h1) * W + w1] * fw;
        const T c0 = c00 * (T(1) - fh) + c01 * fh;
        const T c1 = c10 * (T(1) - fh) + c11 * fh;
        v[m] = c0 * (T(1) - fd) + c1 * fd;
    }

    auto pimg = image.node(), pcrd = coords.node();
    return detail::make_result<T>(
        std::move(out_shape), std::move(v), "grid_sample", {pimg, pcrd},
        [pimg, pcrd, D, H, W, M, sample_axis](const detail::Node<T>& out) {
            if (pimg->requires_grad) pimg->ensure_grad();
            if (pcrd->requires_grad) pcrd->ensure_grad();
            const T* img = pimg->values.data();
            const T* crd = pcrd->values.data();
            for (std::size_t m = 0; m < M; ++m) {
                const T g = out.grad[m];
                if (g == T(0)) continue;
                std::size_t d0, d1, h0, h1, w0, w1;
                T fd, fh, fw;
                bool ind, inh, inw;
                sample_axis(crd[m], D, d0, d1, fd, ind);
                sample_axis(crd[M + m], H, h0, h1, fh, inh);
                sample_axis(crd[2 * M + m], W, w0, w1, fw, inw);
                const T wd[2] = {T(1) - fd, fd};
                const T wh[2] = {T(1) - fh, fh};
                const T ww[2] = {T(1) - fw, fw};
                const std::size_t di[2] = {d0, d1}, hi[2] = {h0, h1}, wi[2] = {w0, w1};
                if (pimg->requires_grad) {
                    for (int a = 0; a < 2; ++a)
                        for (int b = 0; b < 2; ++b)
                            for (int c = 0; c < 2; ++c)
                                pimg->grad[(di[a] * H + hi[b]) * W + wi[c]] += g * wd[a] * wh[b] * ww[c];
                }
                if (pcrd->requires_grad) {
                    auto corner = [&](int a, int b, int c) {
                        return img[(di[a] * H + hi[b]) * W + wi[c]];
                    };
                    T dd = T(0), dh = T(0), dw = T(0);
                    for (int b = 0; b < 2; ++b)
                        for (int c = 0; c < 2; ++c)
                            dd += (corner(1, b, c) - corner(0, b, c)) * wh[b] * ww[c];
                    for (int a = 0; a < 2; ++a)
                        for (int c = 0; c < 2; ++c)
                            dh += (corner(a, 1, c) - corner(a, 0, c)) * wd[a] * ww[c];
                    for (int a = 0; a < 2; ++a)
                        for (int b = 0; b < 2; ++b)
                            dw += (corner(a, b, 1) - corner(a, b, 0)) * wd[a] * wh[b];
                    if (ind) pcrd->grad[m] += g * dd;
                    if (inh) pcrd->grad[M + m] += g * dh;
                    if (inw) pcrd->grad[2 * M + m] += g * dw;
                }
            }
        });
}

} // namespace xm
