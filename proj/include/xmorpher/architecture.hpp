#pragma once

// The full X-shape network: two U-shape streams over the moving and fixed
// volumes that exchange information through fusion modules at every encoder
// level, the bottleneck, and every decoder level, ending in a displacement
// head. Stream weights are shared between the two streams, so swapping the
// input volumes swaps the per-level features exactly.

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "xmorpher/attention.hpp"
#include "xmorpher/params.hpp"
#include "xmorpher/tensor.hpp"
#include "xmorpher/windowing.hpp"

namespace xm {

struct ArchConfig {
    std::array<std::size_t, 3> input_extent{16, 16, 16}; // (D, H, W)
    std::size_t embed_channels = 8;                      // C
    std::size_t levels = 2;                              // encoder/decoder levels L
    std::size_t rounds = 1;                              // fusion rounds k per level
    WindowConfig window;
    std::vector<std::size_t> heads_per_level{2, 2, 2}; // levels 0..L (incl. bottleneck)
    bool no_cross = false;

    static constexpr std::size_t patch = 2;

    std::size_t channels_at(std::size_t level) const { return embed_channels << level; }

    std::array<std::size_t, 3> grid_extent(std::size_t level) const {
        const std::size_t f = patch << level;
        return {input_extent[0] / f, input_extent[1] / f, input_extent[2] / f};
    }

    void validate() const {
        window.validate();
        if (levels < 1) fail("ArchConfig", "at least one level is required");
        if (rounds < 1) fail("ArchConfig", "at least one fusion round is required");
        if (embed_channels < 2) fail("ArchConfig", "embed channels must be >= 2");
        if (heads_per_level.size() != levels + 1)
            fail("ArchConfig", "expected " + std::to_string(levels + 1) + " head counts, got " +
                                   std::to_string(heads_per_level.size()));
        for (std::size_t l = 0; l <= levels; ++l)
            if (heads_per_level[l] == 0 || channels_at(l) % heads_per_level[l] != 0)
                fail("ArchConfig", "channel width " + std::to_string(channels_at(l)) +
                                       " at level " + std::to_string(l) +
                                       " not divisible by head count");
        const std::size_t div = std::size_t(1) << levels;
        for (std::size_t e : input_extent) {
            if (e == 0 || e % patch != 0)
                fail("ArchConfig", "input extent " + std::to_string(e) +
                                       " not divisible by patch size " + std::to_string(patch));
            if ((e / patch) % div != 0)
                fail("ArchConfig", "input extent " + std::to_string(e) + " incompatible with " +
                                       std::to_string(levels) + " levels (needs " +
                                       std::to_string(patch * div) + "-divisible extents)");
        }
    }
};

// Closed-form parameter element count for a configuration.
//
// With c_l = C * 2^l, an attention block holds 12c^2 + 13c elements (q/k/v/o
// projections 4(c^2+c), two norms 4c, MLP 4c^2+4c + 4c^2+c). The total is
//   embed:      (8*in_ch)C + C            in_ch = 1 (cross) or 2 (no-cross)
//   fusions:    k * sum over levels 0..L of blocks(c_l), applied twice for
//               encoder+decoder at levels < L and once at the bottleneck
//   merges:     sum_{l<L} 16 c_l^2 + 2 c_l
//   expands:    sum_{l<L} 4 c_{l+1}^2 + 4 c_{l+1}
//   skips:      sum_{l<L} 2 c_l^2 + c_l
//   head:       3 * head_in + 3           head_in = 2C (cross) or C (no-cross)
inline std::size_t expected_param_count(const ArchConfig& cfg) {
    const std::size_t C = cfg.embed_channels;
    const std::size_t L = cfg.levels;
    const std::size_t in_ch = cfg.no_cross ? 2 : 1;
    std::size_t total = (8 * in_ch) * C + C;
    for (std::size_t l = 0; l <= L; ++l) {
        const std::size_t c = C << l;
        const std::size_t per_round = AttentionParams<float>::element_count(c);
        const std::size_t fusions = (l == L) ? 1 : 2; // encoder + decoder share the level
        total += fusions * cfg.rounds * per_round;
    }
    for (std::size_t l = 0; l < L; ++l) {
        const std::size_t c = C << l;
        const std::size_t cn = c * 2;
        total += 16 * c * c + 2 * c;  // merge
        total += 4 * cn * cn + 4 * cn; // expand
        total += 2 * c * c + c;        // skip projection
    }
    const std::size_t head_in = cfg.no_cross ? C : 2 * C;
    total += 3 * head_in + 3;
    return total;
}

template <typename T>
struct ModelParams {
    ArchConfig cfg;
    ParamStore<T> store;

    Tensor<T> embed_w, embed_b;
    std::vector<FusionParams<T>> encoder;  // per level 0..L-1
    std::vector<Tensor<T>> merge_w, merge_b;
    FusionParams<T> bottleneck;
    std::vector<Tensor<T>> expand_w, expand_b; // indexed by destination level
    std::vector<Tensor<T>> skip_w, skip_b;
    std::vector<FusionParams<T>> decoder;
    Tensor<T> head_w, head_b;

    static ModelParams init(const ArchConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        ModelParams mp;
        mp.cfg = cfg;
        Rng rng(seed);
        const std::size_t C = cfg.embed_channels;
        const std::size_t L = cfg.levels;
        const std::size_t in_ch = cfg.no_cross ? 2 : 1;

        const std::size_t patch_len = 8 * in_ch;
        mp.embed_w = mp.store.add_uniform("embed.w", {patch_len, C}, patch_len, rng);
        mp.embed_b = mp.store.add_uniform("embed.b", {C}, patch_len, rng);

        for (std::size_t l = 0; l < L; ++l) {
            const std::size_t c = cfg.channels_at(l);
            mp.encoder.push_back(FusionParams<T>::init(mp.store, "enc" + std::to_string(l), c,
                                                       cfg.heads_per_level[l], cfg.rounds, rng));
            mp.merge_w.push_back(
                mp.store.add_uniform("merge" + std::to_string(l) + ".w", {8 * c, 2 * c}, 8 * c, rng));
            mp.merge_b.push_back(
                mp.store.add_uniform("merge" + std::to_string(l) + ".b", {2 * c}, 8 * c, rng));
        }

        mp.bottleneck = FusionParams<T>::init(mp.store, "bottleneck", cfg.channels_at(L),
                                              cfg.heads_per_level[L], cfg.rounds, rng);

        mp.expand_w.resize(L);
        mp.expand_b.resize(L);
        mp.skip_w.resize(L);
        mp.skip_b.resize(L);
        mp.decoder.resize(L);
        for (std::size_t l = L; l-- > 0;) {
            const std::size_t c = cfg.channels_at(l);
            const std::size_t cn = 2 * c; // channels one level deeper
            mp.expand_w[l] =
                mp.store.add_uniform("expand" + std::to_string(l) + ".w", {cn, 4 * cn}, cn, rng);
            mp.expand_b[l] =
                mp.store.add_uniform("expand" + std::to_string(l) + ".b", {4 * cn}, cn, rng);
            mp.skip_w[l] =
                mp.store.add_uniform("skip" + std::to_string(l) + ".w", {2 * c, c}, 2 * c, rng);
            mp.skip_b[l] = mp.store.add_uniform("skip" + std::to_string(l) + ".b", {c}, 2 * c, rng);
            mp.decoder[l] = FusionParams<T>::init(mp.store, "dec" + std::to_string(l), c,
                                                  cfg.heads_per_level[l], cfg.rounds, rng);
        }

        // Zero-initialized head: the model starts at the identity warp.
        const std::size_t head_in = cfg.no_cross ? C : 2 * C;
        mp.head_w = mp.store.add_zeros("head.w", {head_in, 3});
        mp.head_b = mp.store.add_zeros("head.b", {3});
        return mp;
    }
};

// ---------------------------------------------------------------------------
// patch embedding / merging / expanding
// ---------------------------------------------------------------------------

namespace detail {

// Index map collecting each 2^3 patch (neighbor-major, then channel) of a
// {ch, D, H, W} tensor into rows of {n_patches, 8*ch}.
inline std::vector<std::int64_t> patch_rows_indices(std::size_t ch,
                                                    const std::array<std::size_t, 3>& dims) {
    const std::size_t pd = dims[0] / 2, ph = dims[1] / 2, pw = dims[2] / 2;
    const std::size_t plane = dims[1] * dims[2];
    const std::size_t vol = dims[0] * plane;
    std::vector<std::int64_t> idx;
    idx.reserve(pd * ph * pw * 8 * ch);
    for (std::size_t d = 0; d < pd; ++d)
        for (std::size_t h = 0; h < ph; ++h)
            for (std::size_t w = 0; w < pw; ++w)
                for (std::size_t nd = 0; nd < 2; ++nd)
                    for (std::size_t nh = 0; nh < 2; ++nh)
                        for (std::size_t nw = 0; nw < 2; ++nw)
                            for (std::size_t c = 0; c < ch; ++c)
                                idx.push_back(static_cast<std::int64_t>(
                                    c * vol + (2 * d + nd) * plane + (2 * h + nh) * dims[2] +
                                    (2 * w + nw)));
    return idx;
}

// Tokens {n, c} laid out lexicographically -> grid {c, dims}.
template <typename T>
Tensor<T> tokens_to_grid(const Tensor<T>& tokens, std::size_t c,
                         const std::array<std::size_t, 3>& dims) {
    auto g = reshape(tokens, {dims[0], dims[1], dims[2], c});
    return permute(g, {3, 0, 1, 2});
}

template <typename T>
Tensor<T> grid_to_tokens(const Tensor<T>& grid) {
    const Shape& s = grid.shape();
    auto t = permute(grid, {1, 2, 3, 0});
    return reshape(t, {s[1] * s[2] * s[3], s[0]});
}

} // namespace detail

// Non-overlapping 2^3 patches linearly projected to the embed width.
// Input {ch, D, H, W}, output {C, D/2, H/2, W/2}.
template <typename T>
Tensor<T> patch_embed(const Tensor<T>& volume, const Tensor<T>& weight, const Tensor<T>& bias) {
    if (volume.rank() != 4)
        fail("patch_embed", "expected {ch, D, H, W}, got " + shape_str(volume.shape()));
    const std::size_t ch = volume.extent(0);
    const std::array<std::size_t, 3> dims{volume.extent(1), volume.extent(2), volume.extent(3)};
    for (std::size_t e : dims)
        if (e == 0 || e % 2 != 0)
            fail("patch_embed", "extents must be even, got " + shape_str(volume.shape()));
    if (weight.extent(0) != 8 * ch)
        fail("patch_embed", "weight expects " + std::to_string(weight.extent(0) / 8) + " channels");
    const std::size_t n = (dims[0] / 2) * (dims[1] / 2) * (dims[2] / 2);
    auto rows = gather(volume, detail::patch_rows_indices(ch, dims), {n, 8 * ch});
    auto tokens = linear(rows, weight, bias);
    return detail::tokens_to_grid(tokens, weight.extent(1), {dims[0] / 2, dims[1] / 2, dims[2] / 2});
}

// Concatenates each 2^3 neighborhood (8c) and projects to 2c, halving extents.
template <typename T>
Tensor<T> patch_merge(const Tensor<T>& grid, const Tensor<T>& weight, const Tensor<T>& bias) {
    const std::size_t c = grid.extent(0);
    const std::array<std::size_t, 3> dims{grid.extent(1), grid.extent(2), grid.extent(3)};
    for (std::size_t e : dims)
        if (e % 2 != 0) fail("patch_merge", "extents must be even, got " + shape_str(grid.shape()));
    const std::size_t n = (dims[0] / 2) * (dims[1] / 2) * (dims[2] / 2);
    auto rows = gather(grid, detail::patch_rows_indices(c, dims), {n, 8 * c});
    auto tokens = linear(rows, weight, bias);
    return detail::tokens_to_grid(tokens, weight.extent(1), {dims[0] / 2, dims[1] / 2, dims[2] / 2});
}

// Projects c -> 8*(c/2) and rearranges into a doubled grid; inverse of the
// merge shapes.
template <typename T>
Tensor<T> patch_expand(const Tensor<T>& grid, const Tensor<T>& weight, const Tensor<T>& bias) {
    const std::size_t c = grid.extent(0);
    if (c % 2 != 0) fail("patch_expand", "channel width must be even");
    const std::size_t cf = c / 2;
    const std::array<std::size_t, 3> dims{grid.extent(1), grid.extent(2), grid.extent(3)};
    auto tokens = detail::grid_to_tokens(grid);        // {n, c}
    auto expanded = linear(tokens, weight, bias);      // {n, 8*cf}, neighbor-major
    const std::array<std::size_t, 3> out{2 * dims[0], 2 * dims[1], 2 * dims[2]};
    const std::size_t plane_in = dims[1] * dims[2];
    // Gather from {n, 8*cf} rows into the fine grid {cf, 2D, 2H, 2W}.
    std::vector<std::int64_t> idx(cf * out[0] * out[1] * out[2]);
    std::size_t o = 0;
    for (std::size_t ch = 0; ch < cf; ++ch)
        for (std::size_t d = 0; d < out[0]; ++d)
            for (std::size_t h = 0; h < out[1]; ++h)
                for (std::size_t w = 0; w < out[2]; ++w, ++o) {
                    const std::size_t token =
                        (d / 2) * plane_in + (h / 2) * dims[2] + (w / 2);
                    const std::size_t nb = (d % 2) * 4 + (h % 2) * 2 + (w % 2);
                    idx[o] = static_cast<std::int64_t>(token * (8 * cf) + nb * cf + ch);
                }
    return gather(expanded, idx, {cf, out[0], out[1], out[2]});
}

// ---------------------------------------------------------------------------
// forward passes
// ---------------------------------------------------------------------------

template <typename T>
struct LevelTrace {
    std::string tag;
    std::vector<T> stream_a;
    std::vector<T> stream_b;
};

// Which fusion module to capture attention weights from: stages 0..L-1 are
// encoder levels, stage L is the bottleneck, stages L+1..2L are decoder
// levels L-1..0. Round 0, direction a->b (queries from the first stream).
struct DumpRequest {
    std::size_t stage = 0;
};

template <typename T>
struct ForwardArtifacts {
    std::vector<LevelTrace<T>> trace;
    AttentionDump<T> dump;
    bool has_dump = false;
};

namespace detail {

template <typename T>
Tensor<T> channel_linear(const Tensor<T>& grid, const Tensor<T>& w, const Tensor<T>& b) {
    auto t = permute(grid, {1, 2, 3, 0});
    t = linear(t, w, b);
    return permute(t, {3, 0, 1, 2});
}

// Trilinear x2 upsample of every channel of {c, d, h, w}.
template <typename T>
Tensor<T> upsample2x(const Tensor<T>& grid) {
    const std::size_t c = grid.extent(0);
    const std::array<std::size_t, 3> in{grid.extent(1), grid.extent(2), grid.extent(3)};
    const std::array<std::size_t, 3> out{2 * in[0], 2 * in[1], 2 * in[2]};
    std::vector<T> coords(3 * out[0] * out[1] * out[2]);
    const std::size_t M = out[0] * out[1] * out[2];
    std::size_t o = 0;
    for (std::size_t d = 0; d < out[0]; ++d)
        for (std::size_t h = 0; h < out[1]; ++h)
            for (std::size_t w = 0; w < out[2]; ++w, ++o) {
                coords[o] = T(d) * T(0.5) - T(0.25);
                coords[M + o] = T(h) * T(0.5) - T(0.25);
                coords[2 * M + o] = T(w) * T(0.5) - T(0.25);
            }
    auto coord_t = Tensor<T>::from({3, out[0], out[1], out[2]}, std::move(coords));
    std::vector<Tensor<T>> channels;
    for (std::size_t ch = 0; ch < c; ++ch) {
        auto img = reshape(slice(grid, 0, ch, 1), {in[0], in[1], in[2]});
        auto up = grid_sample(img, coord_t);
        channels.push_back(reshape(up, {1, out[0], out[1], out[2]}));
    }
    return concat(channels, 0);
}

template <typename T>
void record_trace(ForwardArtifacts<T>* art, const std::string& tag, const Tensor<T>& a,
                  const Tensor<T>& b) {
    if (!art) return;
    LevelTrace<T> t;
    t.tag = tag;
    t.stream_a.assign(a.data().begin(), a.data().end());
    t.stream_b.assign(b.data().begin(), b.data().end());
    art->trace.push_back(std::move(t));
}

} // namespace detail

// Predicts the displacement field {3, D, H, W} (voxel units, channel order
// depth/height/width) aligning `moving` to `fixed`. Volumes are {D, H, W}.
template <typename T>
Tensor<T> xmorpher_forward(const Tensor<T>& moving, const Tensor<T>& fixed,
                           const ModelParams<T>& params, const DumpRequest* dump_req = nullptr,
                           ForwardArtifacts<T>* art = nullptr) {
    const ArchConfig& cfg = params.cfg;
    cfg.validate();
    if (cfg.no_cross) fail("xmorpher_forward", "configuration requests the no-cross variant");
    const Shape expect{cfg.input_extent[0], cfg.input_extent[1], cfg.input_extent[2]};
    if (moving.shape() != expect || fixed.shape() != expect)
        fail("xmorpher_forward", "volume extent mismatch: " + shape_str(moving.shape()) + " and " +
                                     shape_str(fixed.shape()) + " vs configured " +
                                     shape_str(expect));
    const std::size_t L = cfg.levels;
    auto dump_for = [&](std::size_t stage) -> AttentionDump<T>* {
        if (!dump_req || !art || dump_req->stage != stage) return nullptr;
        art->has_dump = true;
        return &art->dump;
    };

    auto a = patch_embed(reshape(moving, {1, expect[0], expect[1], expect[2]}), params.embed_w,
                         params.embed_b);
    auto b = patch_embed(reshape(fixed, {1, expect[0], expect[1], expect[2]}), params.embed_w,
                         params.embed_b);

    std::vector<Tensor<T>> skips_a, skips_b;
    for (std::size_t l = 0; l < L; ++l) {
        std::tie(a, b) = fusion_module(a, b, params.encoder[l], cfg.window, dump_for(l));
        detail::record_trace(art, "enc" + std::to_string(l), a, b);
        skips_a.push_back(a);
        skips_b.push_back(b);
        a = patch_merge(a, params.merge_w[l], params.merge_b[l]);
        b = patch_merge(b, params.merge_w[l], params.merge_b[l]);
    }

    std::tie(a, b) = fusion_module(a, b, params.bottleneck, cfg.window, dump_for(L));
    detail::record_trace(art, "bottleneck", a, b);

    for (std::size_t l = L; l-- > 0;) {
        a = patch_expand(a, params.expand_w[l], params.expand_b[l]);
        b = patch_expand(b, params.expand_w[l], params.expand_b[l]);
        a = detail::channel_linear(concat<T>({a, skips_a[l]}, 0), params.skip_w[l], params.skip_b[l]);
        b = detail::channel_linear(concat<T>({b, skips_b[l]}, 0), params.skip_w[l], params.skip_b[l]);
        std::tie(a, b) = fusion_module(a, b, params.decoder[l], cfg.window, dump_for(2 * L - l));
        detail::record_trace(art, "dec" + std::to_string(l), a, b);
    }

    auto field = detail::channel_linear(concat<T>({a, b}, 0), params.head_w, params.head_b);
    return detail::upsample2x(field);
}

// Ablation variant: one stream over the channel-concatenated pair, window
// self-attention in place of every cross-attention block.
template <typename T>
Tensor<T> no_cross_forward(const Tensor<T>& moving, const Tensor<T>& fixed,
                           const ModelParams<T>& params, const DumpRequest* dump_req = nullptr,
                           ForwardArtifacts<T>* art = nullptr) {
    const ArchConfig& cfg = params.cfg;
    cfg.validate();
    if (!cfg.no_cross) fail("no_cross_forward", "configuration requests the cross variant");
    const Shape expect{cfg.input_extent[0], cfg.input_extent[1], cfg.input_extent[2]};
    if (moving.shape() != expect || fixed.shape() != expect)
        fail("no_cross_forward", "volume extent mismatch vs configured " + shape_str(expect));
    const std::size_t L = cfg.levels;
    auto dump_for = [&](std::size_t stage) -> AttentionDump<T>* {
        if (!dump_req || !art || dump_req->stage != stage) return nullptr;
        art->has_dump = true;
        return &art->dump;
    };
    auto run_level = [&](Tensor<T> x, const FusionParams<T>& fp, std::size_t stage) {
        for (std::size_t r = 0; r < fp.rounds.size(); ++r)
            x = self_attention_block(x, fp.rounds[r], cfg.window,
                                     r == 0 ? dump_for(stage) : nullptr);
        return x;
    };

    auto m3 = reshape(moving, {1, expect[0], expect[1], expect[2]});
    auto f3 = reshape(fixed, {1, expect[0], expect[1], expect[2]});
    auto x = patch_embed(concat<T>({m3, f3}, 0), params.embed_w, params.embed_b);

    std::vector<Tensor<T>> skips;
    for (std::size_t l = 0; l < L; ++l) {
        x = run_level(x, params.encoder[l], l);
        detail::record_trace(art, "enc" + std::to_string(l), x, x);
        skips.push_back(x);
        x = patch_merge(x, params.merge_w[l], params.merge_b[l]);
    }
    x = run_level(x, params.bottleneck, L);
    detail::record_trace(art, "bottleneck", x, x);
    for (std::size_t l = L; l-- > 0;) {
        x = patch_expand(x, params.expand_w[l], params.expand_b[l]);
        x = detail::channel_linear(concat<T>({x, skips[l]}, 0), params.skip_w[l], params.skip_b[l]);
        x = run_level(x, params.decoder[l], 2 * L - l);
        detail::record_trace(art, "dec" + std::to_string(l), x, x);
    }
    auto field = detail::channel_linear(x, params.head_w, params.head_b);
    return detail::upsample2x(field);
}

// Dispatches on the configured variant.
template <typename T>
Tensor<T> forward_displacement(const Tensor<T>& moving, const Tensor<T>& fixed,
                               const ModelParams<T>& params,
                               const DumpRequest* dump_req = nullptr,
                               ForwardArtifacts<T>* art = nullptr) {
    return params.cfg.no_cross ? no_cross_forward(moving, fixed, params, dump_req, art)
                               : xmorpher_forward(moving, fixed, params, dump_req, art);
}

} // namespace xm
