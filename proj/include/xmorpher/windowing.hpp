#pragma once

// Window partition (WP), window area partition (WAP) and the inverse merge.
//
// A feature grid is a tensor {c, D, H, W}. WP tiles it into non-overlapping
// base windows of extent (h, w, d) along (depth, height, width); WAP produces
// one enlarged searching window per base window, magnified by (alpha, beta,
// gamma) and centered on the base tile, so that both sets have the same
// window count. Windows and tokens are ordered lexicographically,
// depth-major. Grids that do not divide evenly are zero-padded up to window
// multiples; padded tokens and tokens that fall outside the grid are flagged
// invalid so attention can mask them.

#include <array>
#include <cstdint>
#include <vector>

#include "xmorpher/tensor.hpp"

namespace xm {

struct WindowConfig {
    std::array<std::size_t, 3> base{2, 2, 2};          // (h, w, d) along depth/height/width
    std::array<std::size_t, 3> magnification{3, 3, 3}; // (alpha, beta, gamma), odd

    void validate() const {
        for (int i = 0; i < 3; ++i) {
            if (base[i] < 1) fail("WindowConfig", "base window extents must be >= 1");
            if (magnification[i] < 1 || magnification[i] % 2 == 0)
                fail("WindowConfig", "magnifications must be positive odd integers");
        }
    }

    std::size_t base_volume() const { return base[0] * base[1] * base[2]; }
    std::size_t magnification_volume() const {
        return magnification[0] * magnification[1] * magnification[2];
    }
    std::array<std::size_t, 3> searching_extent() const {
        return {base[0] * magnification[0], base[1] * magnification[1], base[2] * magnification[2]};
    }
};

enum class WindowKind { base, searching };

template <typename T>
struct WindowSet {
    WindowKind kind = WindowKind::base;
    std::size_t count = 0;                        // n
    std::array<std::size_t, 3> window_extent{};   // (h', w', d')
    std::size_t channels = 0;
    Tensor<T> tokens;                             // {n, h'*w'*d', c}
    std::vector<std::array<std::int64_t, 3>> origins; // per-window lattice offset
    std::vector<std::uint8_t> valid;              // n * tokens-per-window, 1 = inside grid
    std::array<std::size_t, 3> grid_extent{};     // original (D, H, W)

    std::size_t tokens_per_window() const {
        return window_extent[0] * window_extent[1] * window_extent[2];
    }
};

namespace detail {

inline std::array<std::size_t, 3> grid_dims(const Shape& s) {
    if (s.size() != 4) fail("windowing", "feature grid must be {c, D, H, W}, got " + shape_str(s));
    if (s[0] == 0 || s[1] == 0 || s[2] == 0 || s[3] == 0)
        fail("windowing", "zero-sized grid " + shape_str(s));
    return {s[1], s[2], s[3]};
}

inline std::array<std::size_t, 3> window_counts(const std::array<std::size_t, 3>& dims,
                                                const std::array<std::size_t, 3>& base) {
    return {(dims[0] + base[0] - 1) / base[0], (dims[1] + base[1] - 1) / base[1],
            (dims[2] + base[2] - 1) / base[2]};
}

} // namespace detail

// Number of base (and searching) windows WP/WAP produce for a grid.
inline std::size_t window_count(const std::array<std::size_t, 3>& dims, const WindowConfig& cfg) {
    const auto counts = detail::window_counts(dims, cfg.base);
    return counts[0] * counts[1] * counts[2];
}

template <typename T>
WindowSet<T> window_partition(const Tensor<T>& grid, const WindowConfig& cfg) {
    cfg.validate();
    const auto dims = detail::grid_dims(grid.shape());
    const std::size_t c = grid.extent(0);
    const auto counts = detail::window_counts(dims, cfg.base);
    const std::size_t n = counts[0] * counts[1] * counts[2];
    const std::size_t s = cfg.base_volume();

    WindowSet<T> ws;
    ws.kind = WindowKind::base;
    ws.count = n;
    ws.window_extent = cfg.base;
    ws.channels = c;
    ws.grid_extent = dims;
    ws.origins.resize(n);
    ws.valid.assign(n * s, 0);

    std::vector<std::int64_t> idx(n * s * c);
    const std::size_t plane = dims[1] * dims[2];
    const std::size_t vol = dims[0] * plane;
    std::size_t wi = 0;
    for (std::size_t wd = 0; wd < counts[0]; ++wd)
        for (std::size_t wh = 0; wh < counts[1]; ++wh)
            for (std::size_t ww = 0; ww < counts[2]; ++ww, ++wi) {
                const std::int64_t od = static_cast<std::int64_t>(wd * cfg.base[0]);
                const std::int64_t oh = static_cast<std::int64_t>(wh * cfg.base[1]);
                const std::int64_t ow = static_cast<std::int64_t>(ww * cfg.base[2]);
                ws.origins[wi] = {od, oh, ow};
                std::size_t ti = 0;
                for (std::size_t td = 0; td < cfg.base[0]; ++td)
                    for (std::size_t th = 0; th < cfg.base[1]; ++th)
                        for (std::size_t tw = 0; tw < cfg.base[2]; ++tw, ++ti) {
                            const std::size_t d = wd * cfg.base[0] + td;
                            const std::size_t h = wh * cfg.base[1] + th;
                            const std::size_t w = ww * cfg.base[2] + tw;
                            const bool inside = d < dims[0] && h < dims[1] && w < dims[2];
                            ws.valid[wi * s + ti] = inside ? 1 : 0;
                            const std::size_t base_out = (wi * s + ti) * c;
                            for (std::size_t ch = 0; ch < c; ++ch)
                                idx[base_out + ch] =
                                    inside ? static_cast<std::int64_t>(ch * vol + d * plane +
                                                                       h * dims[2] + w)
                                           : -1;
                        }
            }

    ws.tokens = gather(grid, idx, {n, s, c});
    return ws;
}

template <typename T>
WindowSet<T> window_area_partition(const Tensor<T>& grid, const WindowConfig& cfg) {
    cfg.validate();
    const auto dims = detail::grid_dims(grid.shape());
    const std::size_t c = grid.extent(0);
    const auto counts = detail::window_counts(dims, cfg.base);
    const std::size_t n = counts[0] * counts[1] * counts[2];
    const auto ext = cfg.searching_extent();
    const std::size_t s = ext[0] * ext[1] * ext[2];

    // Searching windows are centered on their base tile.
    const std::array<std::int64_t, 3> back{
        static_cast<std::int64_t>((cfg.magnification[0] - 1) * cfg.base[0] / 2),
        static_cast<std::int64_t>((cfg.magnification[1] - 1) * cfg.base[1] / 2),
        static_cast<std::int64_t>((cfg.magnification[2] - 1) * cfg.base[2] / 2)};

    WindowSet<T> ws;
    ws.kind = WindowKind::searching;
    ws.count = n;
    ws.window_extent = ext;
    ws.channels = c;
    ws.grid_extent = dims;
    ws.origins.resize(n);
    ws.valid.assign(n * s, 0);

    std::vector<std::int64_t> idx(n * s * c);
    const std::size_t plane = dims[1] * dims[2];
    const std::size_t vol = dims[0] * plane;
    std::size_t wi = 0;
    for (std::size_t wd = 0; wd < counts[0]; ++wd)
        for (std::size_t wh = 0; wh < counts[1]; ++wh)
            for (std::size_t ww = 0; ww < counts[2]; ++ww, ++wi) {
                const std::int64_t od = static_cast<std::int64_t>(wd * cfg.base[0]) - back[0];
                const std::int64_t oh = static_cast<std::int64_t>(wh * cfg.base[1]) - back[1];
                const std::int64_t ow = static_cast<std::int64_t>(ww * cfg.base[2]) - back[2];
                ws.origins[wi] = {od, oh, ow};
                std::size_t ti = 0;
                for (std::size_t td = 0; td < ext[0]; ++td)
                    for (std::size_t th = 0; th < ext[1]; ++th)
                        for (std::size_t tw = 0; tw < ext[2]; ++tw, ++ti) {
                            const std::int64_t d = od + static_cast<std::int64_t>(td);
                            const std::int64_t h = oh + static_cast<std::int64_t>(th);
                            const std::int64_t w = ow + static_cast<std::int64_t>(tw);
                            const bool inside = d >= 0 && h >= 0 && w >= 0 &&
                                                d < static_cast<std::int64_t>(dims[0]) &&
                                                h < static_cast<std::int64_t>(dims[1]) &&
                                                w < static_cast<std::int64_t>(dims[2]);
                            ws.valid[wi * s + ti] = inside ? 1 : 0;
                            const std::size_t base_out = (wi * s + ti) * c;
                            for (std::size_t ch = 0; ch < c; ++ch)
                                idx[base_out + ch] =
                                    inside ? static_cast<std::int64_t>(
                                                 ch * vol + static_cast<std::size_t>(d) * plane +
                                                 static_cast<std::size_t>(h) * dims[2] +
                                                 static_cast<std::size_t>(w))
                                           : -1;
                        }
            }

    ws.tokens = gather(grid, idx, {n, s, c});
    return ws;
}

// Exact inverse of window_partition: scatters base tokens back onto the grid
// and strips padding. Implemented as a gather from the token array, since the
// base tiling is a bijection onto the padded grid.
template <typename T>
Tensor<T> window_merge(const WindowSet<T>& ws, const Shape& grid_shape) {
    if (ws.kind != WindowKind::base) fail("window_merge", "expected a base window set");
    const auto dims = detail::grid_dims(grid_shape);
    const std::size_t c = grid_shape[0];
    if (c != ws.channels || dims != ws.grid_extent)
        fail("window_merge", "grid shape " + shape_str(grid_shape) + " inconsistent with window set");
    const auto base = ws.window_extent;
    const auto counts = detail::window_counts(dims, base);
    if (counts[0] * counts[1] * counts[2] != ws.count)
        fail("window_merge", "window count inconsistent with grid shape");

    const std::size_t s = ws.tokens_per_window();
    std::vector<std::int64_t> idx(numel(grid_shape));
    const std::size_t plane = dims[1] * dims[2];
    const std::size_t vol = dims[0] * plane;
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t d = 0; d < dims[0]; ++d)
            for (std::size_t h = 0; h < dims[1]; ++h)
                for (std::size_t w = 0; w < dims[2]; ++w) {
                    const std::size_t wi =
                        (d / base[0] * counts[1] + h / base[1]) * counts[2] + w / base[2];
                    const std::size_t ti =
                        (d % base[0] * base[1] + h % base[1]) * base[2] + w % base[2];
                    idx[ch * vol + d * plane + h * dims[2] + w] =
                        static_cast<std::int64_t>((wi * s + ti) * c + ch);
                }

    return gather(ws.tokens, idx, grid_shape);
}

} // namespace xm
