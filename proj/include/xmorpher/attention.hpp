#pragma once

// Window-based multi-head cross attention and the cross-attention transformer
// block built on it. Queries come from base windows, keys/values from the
// paired searching windows; invalid (out-of-grid) keys are masked to -inf
// before the softmax so they receive exactly zero weight.

#include <array>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "xmorpher/params.hpp"
#include "xmorpher/tensor.hpp"
#include "xmorpher/windowing.hpp"

namespace xm {

template <typename T>
struct AttentionParams {
    std::size_t channels = 0;
    std::size_t heads = 1;
    Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo; // projections, all {c,c}/{c}
    Tensor<T> ln_attn_g, ln_attn_b;           // norm before attention
    Tensor<T> ln_mlp_g, ln_mlp_b;             // norm before the MLP
    Tensor<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2; // c -> ratio*c -> c

    static constexpr std::size_t mlp_ratio = 4;

    static AttentionParams init(ParamStore<T>& store, const std::string& prefix, std::size_t c,
                                std::size_t heads, Rng& rng) {
        if (c == 0 || heads == 0 || c % heads != 0)
            fail("AttentionParams", "channel width " + std::to_string(c) +
                                        " not divisible by head count " + std::to_string(heads));
        AttentionParams p;
        p.channels = c;
        p.heads = heads;
        p.wq = store.add_uniform(prefix + ".q.w", {c, c}, c, rng);
        p.bq = store.add_uniform(prefix + ".q.b", {c}, c, rng);
        p.wk = store.add_uniform(prefix + ".k.w", {c, c}, c, rng);
        p.bk = store.add_uniform(prefix + ".k.b", {c}, c, rng);
        p.wv = store.add_uniform(prefix + ".v.w", {c, c}, c, rng);
        p.bv = store.add_uniform(prefix + ".v.b", {c}, c, rng);
        p.wo = store.add_uniform(prefix + ".o.w", {c, c}, c, rng);
        p.bo = store.add_uniform(prefix + ".o.b", {c}, c, rng);
        p.ln_attn_g = store.add_ones(prefix + ".ln1.g", {c});
        p.ln_attn_b = store.add_zeros(prefix + ".ln1.b", {c});
        p.ln_mlp_g = store.add_ones(prefix + ".ln2.g", {c});
        p.ln_mlp_b = store.add_zeros(prefix + ".ln2.b", {c});
        const std::size_t hidden = mlp_ratio * c;
        p.mlp_w1 = store.add_uniform(prefix + ".mlp.w1", {c, hidden}, c, rng);
        p.mlp_b1 = store.add_uniform(prefix + ".mlp.b1", {hidden}, c, rng);
        p.mlp_w2 = store.add_uniform(prefix + ".mlp.w2", {hidden, c}, hidden, rng);
        p.mlp_b2 = store.add_uniform(prefix + ".mlp.b2", {c}, hidden, rng);
        return p;
    }

    // Parameter elements one block contributes: 12c^2 + 13c (with mlp_ratio 4).
    static std::size_t element_count(std::size_t c) {
        return 4 * (c * c + c) + 4 * c + 2 * (c * mlp_ratio * c) + mlp_ratio * c + c;
    }
};

// Captured attention weights for one window cross attention evaluation.
template <typename T>
struct AttentionDump {
    std::size_t heads = 0;
    std::size_t queries = 0; // s
    std::size_t keys = 0;    // mu * s
    std::vector<std::array<std::int64_t, 3>> base_origins;
    std::vector<std::array<std::int64_t, 3>> searching_origins;
    std::vector<std::uint8_t> key_valid; // n * keys
    std::vector<T> weights;              // n * heads * queries * keys, row-major

    std::size_t window_count() const { return base_origins.size(); }
};

// softmax(Q_ba K_se^T / sqrt(d_head) + mask) V_se per window and head, heads
// concatenated and output-projected. Output token shape equals the base set.
template <typename T>
Tensor<T> window_cross_attention(const WindowSet<T>& base, const WindowSet<T>& searching,
                                 const AttentionParams<T>& p,
                                 AttentionDump<T>* dump = nullptr) {
    if (base.kind != WindowKind::base || searching.kind != WindowKind::searching)
        fail("window_cross_attention", "expected (base, searching) window sets");
    if (base.count != searching.count)
        fail("window_cross_attention", "window counts differ: " + std::to_string(base.count) +
                                           " vs " + std::to_string(searching.count));
    if (base.channels != p.channels || searching.channels != p.channels)
        fail("window_cross_attention", "channel width does not match parameters");

    const std::size_t n = base.count;
    const std::size_t s = base.tokens_per_window();
    const std::size_t m = searching.tokens_per_window();
    const std::size_t c = p.channels;
    const std::size_t heads = p.heads;
    const std::size_t dh = c / heads;

    auto q = linear(base.tokens, p.wq, p.bq);       // {n, s, c}
    auto k = linear(searching.tokens, p.wk, p.bk);  // {n, m, c}
    auto v = linear(searching.tokens, p.wv, p.bv);  // {n, m, c}

    auto qh = permute(reshape(q, {n, s, heads, dh}), {0, 2, 1, 3});  // {n, heads, s, dh}
    auto kt = permute(reshape(k, {n, m, heads, dh}), {0, 2, 3, 1});  // {n, heads, dh, m}
    auto vh = permute(reshape(v, {n, m, heads, dh}), {0, 2, 1, 3});  // {n, heads, m, dh}

    auto logits = scale(matmul(qh, kt), T(1) / std::sqrt(T(dh)));    // {n, heads, s, m}

    // -inf on keys outside the grid; exact zero weight after softmax.
    std::vector<T> mask_data(n * heads * s * m, T(0));
    const T neg_inf = -std::numeric_limits<T>::infinity();
    for (std::size_t wi = 0; wi < n; ++wi)
        for (std::size_t j = 0; j < m; ++j)
            if (!searching.valid[wi * m + j])
                for (std::size_t h = 0; h < heads; ++h)
                    for (std::size_t i = 0; i < s; ++i)
                        mask_data[((wi * heads + h) * s + i) * m + j] = neg_inf;
    auto mask = Tensor<T>::from({n, heads, s, m}, std::move(mask_data));

    auto weights = softmax(add(logits, mask), 3);                    // {n, heads, s, m}

    if (dump) {
        dump->heads = heads;
        dump->queries = s;
        dump->keys = m;
        dump->base_origins = base.origins;
        dump->searching_origins = searching.origins;
        dump->key_valid = searching.valid;
        dump->weights.assign(weights.data().begin(), weights.data().end());
    }

    auto ctx = matmul(weights, vh);                                  // {n, heads, s, dh}
    auto merged = reshape(permute(ctx, {0, 2, 1, 3}), {n, s, c});
    return linear(merged, p.wo, p.bo);
}

namespace detail {

// Layer norm per token of a {c, D, H, W} grid.
template <typename T>
Tensor<T> grid_layer_norm(const Tensor<T>& grid, const Tensor<T>& gain, const Tensor<T>& bias) {
    auto tokens_last = permute(grid, {1, 2, 3, 0});
    return permute(layer_norm(tokens_last, gain, bias), {3, 0, 1, 2});
}

template <typename T>
WindowSet<T> with_tokens(const WindowSet<T>& ws, Tensor<T> tokens) {
    WindowSet<T> out = ws;
    out.tokens = std::move(tokens);
    return out;
}

} // namespace detail

// Pre-norm transformer block whose attention queries come from `base_grid`
// and keys/values from `search_grid`:
//   x   = base + merge(attention(WP(LN(base)), WAP(LN(search))))
//   out = x + MLP(LN(x))
template <typename T>
Tensor<T> cross_attention_block(const Tensor<T>& base_grid, const Tensor<T>& search_grid,
                                const AttentionParams<T>& p, const WindowConfig& cfg,
                                AttentionDump<T>* dump = nullptr) {
    if (base_grid.shape() != search_grid.shape())
        fail("cross_attention_block", "grid shapes differ: " + shape_str(base_grid.shape()) +
                                          " vs " + shape_str(search_grid.shape()));

    auto normed_base = detail::grid_layer_norm(base_grid, p.ln_attn_g, p.ln_attn_b);
    auto normed_search = detail::grid_layer_norm(search_grid, p.ln_attn_g, p.ln_attn_b);
    auto base_windows = window_partition(normed_base, cfg);
    auto search_windows = window_area_partition(normed_search, cfg);
    auto attended = window_cross_attention(base_windows, search_windows, p, dump);
    auto merged = window_merge(detail::with_tokens(base_windows, attended), base_grid.shape());
    auto x = add(base_grid, merged);

    auto h = permute(x, {1, 2, 3, 0});
    h = layer_norm(h, p.ln_mlp_g, p.ln_mlp_b);
    h = linear(h, p.mlp_w1, p.mlp_b1);
    h = gelu(h);
    h = linear(h, p.mlp_w2, p.mlp_b2);
    return add(x, permute(h, {3, 0, 1, 2}));
}

// Self-attention variant used by the no-cross model: queries and keys/values
// both come from the one (concatenated) stream.
template <typename T>
Tensor<T> self_attention_block(const Tensor<T>& grid, const AttentionParams<T>& p,
                               const WindowConfig& cfg, AttentionDump<T>* dump = nullptr) {
    return cross_attention_block(grid, grid, p, cfg, dump);
}

template <typename T>
struct FusionParams {
    std::vector<AttentionParams<T>> rounds; // one shared block pair per round

    static FusionParams init(ParamStore<T>& store, const std::string& prefix, std::size_t c,
                             std::size_t heads, std::size_t k, Rng& rng) {
        FusionParams f;
        for (std::size_t r = 0; r < k; ++r)
            f.rounds.push_back(
                AttentionParams<T>::init(store, prefix + ".r" + std::to_string(r), c, heads, rng));
        return f;
    }
};

// k rounds of two cross-attention blocks with swapped inputs. Both directions
// of a round share one parameter set and read the pre-round features, so
// swapping the inputs swaps the outputs exactly.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> fusion_module(const Tensor<T>& t_a, const Tensor<T>& t_b,
                                              const FusionParams<T>& p, const WindowConfig& cfg,
                                              AttentionDump<T>* round0_dump = nullptr) {
    if (p.rounds.empty()) fail("fusion_module", "at least one round is required");
    Tensor<T> a = t_a, b = t_b;
    for (std::size_t r = 0; r < p.rounds.size(); ++r) {
        auto next_a = cross_attention_block(a, b, p.rounds[r], cfg, r == 0 ? round0_dump : nullptr);
        auto next_b = cross_attention_block(b, a, p.rounds[r], cfg);
        a = next_a;
        b = next_b;
    }
    return {a, b};
}

} // namespace xm
