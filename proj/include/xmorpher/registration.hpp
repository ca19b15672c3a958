#pragma once

// Unsupervised registration around the backbone: spatial transform, losses,
// evaluation metrics, synthetic pair generation and the Adam training loop.

#include <array>
#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "xmorpher/architecture.hpp"
#include "xmorpher/rng.hpp"
#include "xmorpher/tensor.hpp"

namespace xm {

using Extent3 = std::array<std::size_t, 3>;

template <typename T>
struct Volume {
    Extent3 extent{};
    std::vector<T> intensities;         // D*H*W, row-major
    std::vector<std::uint16_t> labels;  // empty or D*H*W

    std::size_t voxels() const { return extent[0] * extent[1] * extent[2]; }
};

enum class Similarity { mse, ncc };

struct TrainConfig {
    double lr = 1e-2;
    std::size_t iterations = 200;
    double smoothness_weight = 1.0;
    Similarity similarity = Similarity::mse;
    std::size_t ncc_radius = 2;
    // Auxiliary soft-Dice term on warped label maps; 0 disables it. Pairs
    // without labels are unaffected.
    double dice_weight = 0.0;
    std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// spatial transform
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> identity_coords(const Extent3& e) {
    const std::size_t M = e[0] * e[1] * e[2];
    std::vector<T> v(3 * M);
    std::size_t o = 0;
    for (std::size_t d = 0; d < e[0]; ++d)
        for (std::size_t h = 0; h < e[1]; ++h)
            for (std::size_t w = 0; w < e[2]; ++w, ++o) {
                v[o] = T(d);
                v[M + o] = T(h);
                v[2 * M + o] = T(w);
            }
    return Tensor<T>::from({3, e[0], e[1], e[2]}, std::move(v));
}

// output(x) = moving(x + phi(x)), trilinear with border clamp.
template <typename T>
Tensor<T> spatial_transform(const Tensor<T>& moving, const Tensor<T>& phi) {
    if (moving.rank() != 3) fail("spatial_transform", "moving volume must be {D, H, W}");
    if (phi.rank() != 4 || phi.extent(0) != 3 || phi.extent(1) != moving.extent(0) ||
        phi.extent(2) != moving.extent(1) || phi.extent(3) != moving.extent(2))
        fail("spatial_transform", "field shape " + shape_str(phi.shape()) +
                                      " does not match volume " + shape_str(moving.shape()));
    const Extent3 e{moving.extent(0), moving.extent(1), moving.extent(2)};
    return grid_sample(moving, add(identity_coords<T>(e), phi));
}

// Nearest-neighbor label warp (evaluation utility, not differentiable).
inline std::vector<std::uint16_t> warp_labels_nearest(const std::vector<std::uint16_t>& labels,
                                                      const Extent3& e,
                                                      const std::vector<float>& phi) {
    const std::size_t M = e[0] * e[1] * e[2];
    if (labels.size() != M || phi.size() != 3 * M)
        fail("warp_labels_nearest", "label map or field size mismatch");
    std::vector<std::uint16_t> out(M);
    std::size_t o = 0;
    for (std::size_t d = 0; d < e[0]; ++d)
        for (std::size_t h = 0; h < e[1]; ++h)
            for (std::size_t w = 0; w < e[2]; ++w, ++o) {
                auto snap = [](double c, std::size_t n) {
                    const double cc = std::clamp(c, 0.0, static_cast<double>(n - 1));
                    return static_cast<std::size_t>(std::llround(cc));
                };
                const std::size_t sd = snap(double(d) + double(phi[o]), e[0]);
                const std::size_t sh = snap(double(h) + double(phi[M + o]), e[1]);
                const std::size_t sw = snap(double(w) + double(phi[2 * M + o]), e[2]);
                out[o] = labels[(sd * e[1] + sh) * e[2] + sw];
            }
    return out;
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> mse_loss(const Tensor<T>& warped, const Tensor<T>& fixed) {
    if (warped.shape() != fixed.shape()) fail("mse_loss", "shape mismatch");
    auto d = sub(warped, fixed);
    return mean(mul(d, d));
}

// Negative mean local normalized cross-correlation over (2r+1)^3 windows,
// zero-padded at the border.
template <typename T>
Tensor<T> ncc_loss(const Tensor<T>& warped, const Tensor<T>& fixed, std::size_t radius,
                   T eps = T(1e-5)) {
    if (warped.shape() != fixed.shape()) fail("ncc_loss", "shape mismatch");
    if (warped.rank() != 3) fail("ncc_loss", "volumes must be {D, H, W}");
    const std::size_t side = 2 * radius + 1;
    const T win = T(side * side * side);
    auto sa = box_sum(warped, radius);
    auto sb = box_sum(fixed, radius);
    auto saa = box_sum(mul(warped, warped), radius);
    auto sbb = box_sum(mul(fixed, fixed), radius);
    auto sab = box_sum(mul(warped, fixed), radius);
    auto inv_win = T(1) / win;
    auto cross = sub(sab, scale(mul(sa, sb), inv_win));
    auto var_a = sub(saa, scale(mul(sa, sa), inv_win));
    auto var_b = sub(sbb, scale(mul(sb, sb), inv_win));
    auto denom = add(mul(var_a, var_b), Tensor<T>::full(var_a.shape(), eps));
    auto cc = div(mul(cross, cross), denom);
    return scale(mean(cc), T(-1));
}

template <typename T>
Tensor<T> similarity_loss(const Tensor<T>& warped, const Tensor<T>& fixed, Similarity kind,
                          std::size_t ncc_radius) {
    return kind == Similarity::mse ? mse_loss(warped, fixed)
                                   : ncc_loss(warped, fixed, ncc_radius);
}

// One binary channel per label in `label_set`, {K, D, H, W}.
template <typename T>
Tensor<T> one_hot_labels(const std::vector<std::uint16_t>& labels, const Extent3& e,
                         const std::set<std::uint16_t>& label_set) {
    const std::size_t M = e[0] * e[1] * e[2];
    if (labels.size() != M) fail("one_hot_labels", "label map size mismatch");
    if (label_set.empty()) fail("one_hot_labels", "label set is empty");
    std::vector<T> v(label_set.size() * M, T(0));
    std::size_t k = 0;
    for (std::uint16_t lab : label_set) {
        for (std::size_t i = 0; i < M; ++i)
            if (labels[i] == lab) v[k * M + i] = T(1);
        ++k;
    }
    return Tensor<T>::from({label_set.size(), e[0], e[1], e[2]}, std::move(v));
}

// 1 - mean soft Dice over label channels after warping the moving one-hot
// maps by phi. Differentiable in phi; the auxiliary term behind the
// semi-supervised hook.
template <typename T>
Tensor<T> soft_dice_loss(const Tensor<T>& moving_one_hot, const Tensor<T>& fixed_one_hot,
                         const Tensor<T>& phi, T eps = T(1e-6)) {
    if (moving_one_hot.shape() != fixed_one_hot.shape())
        fail("soft_dice_loss", "one-hot shapes differ");
    if (moving_one_hot.rank() != 4) fail("soft_dice_loss", "expected {K, D, H, W}");
    const std::size_t K = moving_one_hot.extent(0);
    const Extent3 e{moving_one_hot.extent(1), moving_one_hot.extent(2), moving_one_hot.extent(3)};
    auto coords = add(identity_coords<T>(e), phi);
    Tensor<T> acc = Tensor<T>::scalar(T(0));
    for (std::size_t k = 0; k < K; ++k) {
        auto mk = reshape(slice(moving_one_hot, 0, k, 1), {e[0], e[1], e[2]});
        auto fk = reshape(slice(fixed_one_hot, 0, k, 1), {e[0], e[1], e[2]});
        auto wk = grid_sample(mk, coords);
        auto overlap = scale(sum(mul(wk, fk)), T(2));
        auto denom = add(add(sum(wk), sum(fk)), Tensor<T>::scalar(eps));
        acc = add(acc, div(overlap, denom));
    }
    return sub(Tensor<T>::scalar(T(1)), scale(acc, T(1) / T(K)));
}

// weight * mean squared forward-difference gradient of phi, averaged over the
// three axes.
template <typename T>
Tensor<T> smoothness_loss(const Tensor<T>& phi, T weight) {
    if (phi.rank() != 4 || phi.extent(0) != 3)
        fail("smoothness_loss", "field must be {3, D, H, W}");
    Tensor<T> total = Tensor<T>::scalar(T(0));
    for (std::size_t axis = 1; axis <= 3; ++axis) {
        const std::size_t n = phi.extent(axis);
        if (n < 2) fail("smoothness_loss", "extents must be >= 2");
        auto d = sub(slice(phi, axis, 1, n - 1), slice(phi, axis, 0, n - 1));
        total = add(total, mean(mul(d, d)));
    }
    return scale(total, weight / T(3));
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

// Mean over labels of 2|A n B| / (|A| + |B|); labels absent from both maps
// are excluded from the mean.
inline double dsc(const std::vector<std::uint16_t>& a, const std::vector<std::uint16_t>& b,
                  const std::set<std::uint16_t>& label_set) {
    if (a.size() != b.size()) fail("dsc", "label map sizes differ");
    if (label_set.empty()) fail("dsc", "label set is empty");
    double acc = 0.0;
    std::size_t used = 0;
    for (std::uint16_t lab : label_set) {
        std::size_t na = 0, nb = 0, ni = 0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            const bool ia = a[i] == lab, ib = b[i] == lab;
            na += ia;
            nb += ib;
            ni += ia && ib;
        }
        if (na + nb == 0) continue;
        acc += 2.0 * double(ni) / double(na + nb);
        ++used;
    }
    if (used == 0) fail("dsc", "no label from the set occurs in either map");
    return acc / double(used);
}

inline std::set<std::uint16_t> nonzero_labels(const std::vector<std::uint16_t>& a,
                                              const std::vector<std::uint16_t>& b) {
    std::set<std::uint16_t> s(a.begin(), a.end());
    s.insert(b.begin(), b.end());
    s.erase(std::uint16_t(0));
    return s;
}

// Percentage of interior voxels where det(I + grad phi) <= 0, with the
// gradient taken by central differences.
inline double jacobian_nonpositive_fraction(const std::vector<float>& phi, const Extent3& e) {
    for (std::size_t ext : e)
        if (ext < 3) fail("jacobian_nonpositive_fraction", "all extents must be >= 3");
    const std::size_t M = e[0] * e[1] * e[2];
    if (phi.size() != 3 * M) fail("jacobian_nonpositive_fraction", "field size mismatch");
    const std::size_t plane = e[1] * e[2];
    auto at = [&](std::size_t comp, std::size_t d, std::size_t h, std::size_t w) {
        return double(phi[comp * M + d * plane + h * e[2] + w]);
    };
    std::size_t bad = 0, count = 0;
    for (std::size_t d = 1; d + 1 < e[0]; ++d)
        for (std::size_t h = 1; h + 1 < e[1]; ++h)
            for (std::size_t w = 1; w + 1 < e[2]; ++w) {
                double J[3][3];
                for (std::size_t comp = 0; comp < 3; ++comp) {
                    J[comp][0] = 0.5 * (at(comp, d + 1, h, w) - at(comp, d - 1, h, w));
                    J[comp][1] = 0.5 * (at(comp, d, h + 1, w) - at(comp, d, h - 1, w));
                    J[comp][2] = 0.5 * (at(comp, d, h, w + 1) - at(comp, d, h, w - 1));
                    J[comp][comp] += 1.0;
                }
                const double det = J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1]) -
                                   J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0]) +
                                   J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0]);
                bad += det <= 0.0;
                ++count;
            }
    return 100.0 * double(bad) / double(count);
}

// ---------------------------------------------------------------------------
// synthetic pairs
// ---------------------------------------------------------------------------

template <typename T>
struct SynthPair {
    Volume<T> moving;
    Volume<T> fixed;
    std::vector<float> phi_gt; // 3*D*H*W, the field used to generate `moving`
    Extent3 extent{};
};

namespace detail {

inline void gaussian_smooth_inplace(std::vector<double>& v, const Extent3& e, double sigma) {
    const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(2 * r + 1);
    double ksum = 0.0;
    for (int i = -r; i <= r; ++i) {
        kernel[i + r] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        ksum += kernel[i + r];
    }
    for (double& k : kernel) k /= ksum;
    std::vector<double> tmp(v.size());
    const std::array<std::size_t, 3> dims = e;
    for (std::size_t axis = 0; axis < 3; ++axis) {
        const std::size_t len = dims[axis];
        std::size_t inner = 1, outer = 1;
        for (std::size_t i = axis + 1; i < 3; ++i) inner *= dims[i];
        for (std::size_t i = 0; i < axis; ++i) outer *= dims[i];
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * len * inner + in;
                for (std::size_t j = 0; j < len; ++j) {
                    double acc = 0.0;
                    for (int t = -r; t <= r; ++t) {
                        const std::int64_t src = static_cast<std::int64_t>(j) + t;
                        if (src >= 0 && src < static_cast<std::int64_t>(len))
                            acc += kernel[t + r] * v[base + static_cast<std::size_t>(src) * inner];
                    }
                    tmp[base + j * inner] = acc;
                }
            }
        v = tmp;
    }
}

inline double max_abs_gradient(const std::vector<double>& phi, const Extent3& e) {
    const std::size_t M = e[0] * e[1] * e[2];
    const std::size_t plane = e[1] * e[2];
    double mx = 0.0;
    auto at = [&](std::size_t comp, std::size_t d, std::size_t h, std::size_t w) {
        return phi[comp * M + d * plane + h * e[2] + w];
    };
    for (std::size_t comp = 0; comp < 3; ++comp)
        for (std::size_t d = 1; d + 1 < e[0]; ++d)
            for (std::size_t h = 1; h + 1 < e[1]; ++h)
                for (std::size_t w = 1; w + 1 < e[2]; ++w) {
                    mx = std::max(mx, std::abs(0.5 * (at(comp, d + 1, h, w) - at(comp, d - 1, h, w))));
                    mx = std::max(mx, std::abs(0.5 * (at(comp, d, h + 1, w) - at(comp, d, h - 1, w))));
                    mx = std::max(mx, std::abs(0.5 * (at(comp, d, h, w + 1) - at(comp, d, h, w - 1))));
                }
    return mx;
}

} // namespace detail

// Deterministic multi-structure phantom pair: three nested ellipsoid labels
// with distinct intensities plus noise on a dark background, deformed by a
// random Gaussian-smoothed field scaled so max |grad phi| < 0.4 and verified
// fold-free.
template <typename T>
SynthPair<T> synth_pair(std::uint64_t seed, const Extent3& extent) {
    for (std::size_t e : extent)
        if (e < 8) fail("synth_pair", "extents must be >= 8");
    Rng rng(seed);
    const std::size_t M = extent[0] * extent[1] * extent[2];

    SynthPair<T> out;
    out.extent = extent;
    out.fixed.extent = extent;
    out.moving.extent = extent;

    // Fixed phantom.
    std::array<double, 3> center;
    for (int i = 0; i < 3; ++i)
        center[i] = 0.5 * double(extent[i] - 1) + rng.uniform(-double(extent[i]) / 12.0,
                                                              double(extent[i]) / 12.0);
    const double fractions[3] = {0.42, 0.28, 0.14};
    std::array<std::array<double, 3>, 3> radii;
    for (int s = 0; s < 3; ++s)
        for (int i = 0; i < 3; ++i)
            radii[s][i] = fractions[s] * double(extent[i]) * (1.0 + rng.uniform(-0.12, 0.12));
    const double shell_intensity[3] = {0.45, 0.70, 0.95};

    std::vector<double> clean(M, 0.08);
    out.fixed.labels.assign(M, 0);
    std::size_t o = 0;
    for (std::size_t d = 0; d < extent[0]; ++d)
        for (std::size_t h = 0; h < extent[1]; ++h)
            for (std::size_t w = 0; w < extent[2]; ++w, ++o) {
                const double pd = double(d) - center[0];
                const double ph = double(h) - center[1];
                const double pw = double(w) - center[2];
                for (int s = 0; s < 3; ++s) {
                    const double q = (pd * pd) / (radii[s][0] * radii[s][0]) +
                                     (ph * ph) / (radii[s][1] * radii[s][1]) +
                                     (pw * pw) / (radii[s][2] * radii[s][2]);
                    if (q <= 1.0) {
                        clean[o] = shell_intensity[s];
                        out.fixed.labels[o] = static_cast<std::uint16_t>(s + 1);
                    }
                }
            }

    // Ground-truth field: a global translation plus smoothed white noise with
    // a capped gradient. The translation carries most of the displacement and
    // contributes nothing to the Jacobian.
    std::array<double, 3> shift;
    for (auto& s : shift) s = rng.uniform(-1.6, 1.6);
    std::vector<double> phi(3 * M);
    for (double& v : phi) v = rng.normal();
    for (std::size_t comp = 0; comp < 3; ++comp) {
        std::vector<double> comp_v(phi.begin() + comp * M, phi.begin() + (comp + 1) * M);
        detail::gaussian_smooth_inplace(comp_v, extent, 2.0);
        std::copy(comp_v.begin(), comp_v.end(), phi.begin() + comp * M);
    }
    double target = 0.35;
    for (int attempt = 0; attempt < 10; ++attempt) {
        const double mx = detail::max_abs_gradient(phi, extent);
        const double s = mx > 0 ? target / mx : 0.0;
        std::vector<float> scaled(3 * M);
        for (std::size_t comp = 0; comp < 3; ++comp)
            for (std::size_t i = 0; i < M; ++i)
                scaled[comp * M + i] = static_cast<float>(phi[comp * M + i] * s + shift[comp]);
        if (jacobian_nonpositive_fraction(scaled, extent) == 0.0) {
            out.phi_gt = std::move(scaled);
            break;
        }
        target *= 0.7;
    }
    if (out.phi_gt.empty()) fail("synth_pair", "could not produce a fold-free field");

    // moving(x) = clean(x + phi_gt(x)), then independent noise on both images.
    {
        std::vector<T> img(M);
        for (std::size_t i = 0; i < M; ++i) img[i] = static_cast<T>(clean[i]);
        std::vector<T> coords(3 * M);
        auto ident = identity_coords<T>(extent);
        for (std::size_t i = 0; i < 3 * M; ++i)
            coords[i] = ident.data()[i] + static_cast<T>(out.phi_gt[i]);
        auto sampled = grid_sample(Tensor<T>::from({extent[0], extent[1], extent[2]}, img),
                                   Tensor<T>::from({3, extent[0], extent[1], extent[2]}, coords));
        out.moving.intensities.assign(sampled.data().begin(), sampled.data().end());
    }
    out.moving.labels = warp_labels_nearest(out.fixed.labels, extent, out.phi_gt);

    out.fixed.intensities.resize(M);
    for (std::size_t i = 0; i < M; ++i)
        out.fixed.intensities[i] = static_cast<T>(clean[i] + rng.normal(0.0, 0.02));
    for (std::size_t i = 0; i < M; ++i)
        out.moving.intensities[i] = static_cast<T>(double(out.moving.intensities[i]) + rng.normal(0.0, 0.02));

    return out;
}

// ---------------------------------------------------------------------------
// optimizer and training loop
// ---------------------------------------------------------------------------

template <typename T>
class Adam {
public:
    Adam(const ParamStore<T>& store, double lr)
        : lr_(lr) {
        for (const auto& it : store.items()) {
            m_.emplace_back(it.value.size(), 0.0);
            v_.emplace_back(it.value.size(), 0.0);
        }
    }

    void step(ParamStore<T>& store) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, double(t_));
        const double bc2 = 1.0 - std::pow(beta2_, double(t_));
        for (std::size_t pi = 0; pi < store.items().size(); ++pi) {
            auto& tensor = store.items()[pi].value;
            const auto grad = tensor.grad();
            auto data = tensor.mutable_data();
            for (std::size_t i = 0; i < grad.size(); ++i) {
                const double g = double(grad[i]);
                m_[pi][i] = beta1_ * m_[pi][i] + (1.0 - beta1_) * g;
                v_[pi][i] = beta2_ * v_[pi][i] + (1.0 - beta2_) * g * g;
                const double mhat = m_[pi][i] / bc1;
                const double vhat = v_[pi][i] / bc2;
                data[i] = static_cast<T>(double(data[i]) - lr_ * mhat / (std::sqrt(vhat) + eps_));
            }
        }
    }

private:
    double lr_;
    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
    std::uint64_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

struct LossRow {
    std::size_t iteration;
    double total;
    double similarity;
    double smoothness;
};

template <typename T>
struct TrainResult {
    ModelParams<T> params;
    std::vector<LossRow> log;
};

template <typename T>
struct TrainPair {
    Tensor<T> moving; // {D, H, W}
    Tensor<T> fixed;
    // Optional {K, D, H, W} one-hot label maps feeding the auxiliary Dice
    // term; leave invalid for unlabeled pairs.
    Tensor<T> moving_one_hot;
    Tensor<T> fixed_one_hot;

    TrainPair() = default;
    TrainPair(Tensor<T> m, Tensor<T> f) : moving(std::move(m)), fixed(std::move(f)) {}
    TrainPair(Tensor<T> m, Tensor<T> f, Tensor<T> moh, Tensor<T> foh)
        : moving(std::move(m)), fixed(std::move(f)), moving_one_hot(std::move(moh)),
          fixed_one_hot(std::move(foh)) {}

    bool labeled() const { return moving_one_hot.valid() && fixed_one_hot.valid(); }
};

// Adam updates minimizing similarity + smoothness; one pair per iteration in
// round-robin order. Deterministic for a given seed.
template <typename T>
TrainResult<T> train(const std::vector<TrainPair<T>>& pairs, const ArchConfig& arch,
                     const TrainConfig& tc) {
    if (pairs.empty()) fail("train", "at least one pair is required");
    if (tc.lr < 0) fail("train", "learning rate must be >= 0");
    if (tc.smoothness_weight < 0) fail("train", "smoothness weight must be >= 0");

    TrainResult<T> result{ModelParams<T>::init(arch, tc.seed), {}};
    Adam<T> opt(result.params.store, tc.lr);

    for (std::size_t it = 0; it < tc.iterations; ++it) {
        const auto& pair = pairs[it % pairs.size()];
        result.params.store.zero_grads();

        auto phi = forward_displacement(pair.moving, pair.fixed, result.params);
        auto warped = spatial_transform(pair.moving, phi);
        auto sim = similarity_loss(warped, pair.fixed, tc.similarity, tc.ncc_radius);
        auto smooth = smoothness_loss(phi, static_cast<T>(tc.smoothness_weight));
        auto total = add(sim, smooth);
        if (tc.dice_weight > 0 && pair.labeled())
            total = add(total, scale(soft_dice_loss(pair.moving_one_hot, pair.fixed_one_hot, phi),
                                     static_cast<T>(tc.dice_weight)));

        const double total_v = double(total.item());
        if (!std::isfinite(total_v))
            fail("train", "non-finite loss " + std::to_string(total_v) + " at iteration " +
                              std::to_string(it));
        result.log.push_back({it, total_v, double(sim.item()), double(smooth.item())});

        backward(total);
        opt.step(result.params.store);
    }
    return result;
}

} // namespace xm
