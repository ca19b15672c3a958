#include "doctest.h"

#include "gradcheck.hpp"
#include "xmorpher/rng.hpp"
#include "xmorpher/windowing.hpp"

using namespace xm;
using testutil::random_vec;
using testutil::weighted_loss;

using DT = Tensor<double>;

namespace {

DT random_grid(std::size_t c, std::size_t d, std::size_t h, std::size_t w, std::uint64_t seed) {
    Rng rng(seed);
    return DT::from({c, d, h, w}, random_vec(c * d * h * w, rng));
}

WindowConfig make_cfg(std::size_t base, std::size_t mag) {
    WindowConfig cfg;
    cfg.base = {base, base, base};
    cfg.magnification = {mag, mag, mag};
    return cfg;
}

} // namespace

TEST_CASE("window_partition tiles a divisible grid") {
    auto g = random_grid(3, 4, 4, 4, 21);
    auto ws = window_partition(g, make_cfg(2, 3));
    CHECK(ws.count == 8);
    CHECK(ws.tokens.shape() == Shape{8, 8, 3});
    for (std::uint8_t v : ws.valid) CHECK(v == 1);

    // Window 0 token 0 is grid voxel (0,0,0); token order is lexicographic.
    for (std::size_t ch = 0; ch < 3; ++ch)
        CHECK(ws.tokens.data()[ch] == g.data()[ch * 64]);
    // Window 0, token (0,0,1) -> voxel (0,0,1).
    for (std::size_t ch = 0; ch < 3; ++ch)
        CHECK(ws.tokens.data()[3 + ch] == g.data()[ch * 64 + 1]);
    // Last window origin.
    CHECK(ws.origins.back() == std::array<std::int64_t, 3>{2, 2, 2});
}

TEST_CASE("window_partition single-window grid keeps grid order") {
    auto g = random_grid(2, 2, 2, 2, 22);
    auto ws = window_partition(g, make_cfg(2, 1));
    CHECK(ws.count == 1);
    for (std::size_t t = 0; t < 8; ++t)
        for (std::size_t ch = 0; ch < 2; ++ch)
            CHECK(ws.tokens.data()[t * 2 + ch] == g.data()[ch * 8 + t]);
}

TEST_CASE("window_partition pads non-divisible grids and flags pad tokens") {
    auto g = random_grid(1, 5, 4, 4, 23);
    auto ws = window_partition(g, make_cfg(2, 3));
    CHECK(ws.count == 12); // padded depth 6
    std::size_t invalid = 0;
    for (std::size_t wi = 0; wi < ws.count; ++wi)
        for (std::size_t t = 0; t < 8; ++t) {
            const bool valid = ws.valid[wi * 8 + t];
            const double v = ws.tokens.data()[wi * 8 + t];
            if (!valid) {
                ++invalid;
                CHECK(v == 0.0); // zero fill
            }
        }
    // Depth padded from 5 to 6: one pad plane of 4x4 voxels.
    CHECK(invalid == 16);
}

TEST_CASE("window_partition rejects zero-sized grids") {
    CHECK_THROWS_AS(window_partition(DT::zeros({1, 0, 4, 4}), make_cfg(2, 3)),
                    std::invalid_argument);
}

TEST_CASE("window_area_partition with unit magnification equals the base set") {
    auto g = random_grid(2, 4, 4, 4, 24);
    auto cfg = make_cfg(2, 1);
    auto base = window_partition(g, cfg);
    auto search = window_area_partition(g, cfg);
    CHECK(search.count == base.count);
    CHECK(search.window_extent == base.window_extent);
    REQUIRE(search.tokens.size() == base.tokens.size());
    for (std::size_t i = 0; i < base.tokens.size(); ++i)
        CHECK(search.tokens.data()[i] == base.tokens.data()[i]);
    for (std::size_t i = 0; i < base.valid.size(); ++i)
        CHECK(search.valid[i] == base.valid[i]);
    for (std::size_t i = 0; i < base.count; ++i) CHECK(search.origins[i] == base.origins[i]);
}

TEST_CASE("window_area_partition interior window covers the full neighborhood") {
    auto g = random_grid(1, 6, 6, 6, 25);
    auto search = window_area_partition(g, make_cfg(2, 3));
    CHECK(search.count == 27);
    CHECK(search.window_extent == std::array<std::size_t, 3>{6, 6, 6});

    // Center window (1,1,1): searching origin (0,0,0), covers the whole grid.
    const std::size_t wi = (1 * 3 + 1) * 3 + 1;
    CHECK(search.origins[wi] == std::array<std::int64_t, 3>{0, 0, 0});
    for (std::size_t t = 0; t < 216; ++t) {
        CHECK(search.valid[wi * 216 + t] == 1);
        CHECK(search.tokens.data()[(wi * 216 + t)] == g.data()[t]);
    }
}

TEST_CASE("window_area_partition masks out-of-volume corners") {
    auto g = random_grid(1, 6, 6, 6, 26);
    auto search = window_area_partition(g, make_cfg(2, 3));
    const std::size_t wi = 0; // corner base window at (0,0,0)
    CHECK(search.origins[wi] == std::array<std::int64_t, 3>{-2, -2, -2});
    for (std::size_t td = 0; td < 6; ++td)
        for (std::size_t th = 0; th < 6; ++th)
            for (std::size_t tw = 0; tw < 6; ++tw) {
                const std::size_t t = (td * 6 + th) * 6 + tw;
                const bool inside = td >= 2 && th >= 2 && tw >= 2;
                CHECK(search.valid[wi * 216 + t] == (inside ? 1 : 0));
                if (!inside) CHECK(search.tokens.data()[wi * 216 + t] == 0.0);
            }
}

TEST_CASE("window_merge inverts window_partition bit-exactly") {
    for (auto dims : {std::array<std::size_t, 3>{4, 4, 4}, std::array<std::size_t, 3>{2, 2, 2},
                      std::array<std::size_t, 3>{5, 4, 4}, std::array<std::size_t, 3>{3, 5, 7}}) {
        auto g = random_grid(2, dims[0], dims[1], dims[2], 27 + dims[0]);
        auto cfg = make_cfg(2, 3);
        auto merged = window_merge(window_partition(g, cfg), g.shape());
        REQUIRE(merged.shape() == g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) CHECK(merged.data()[i] == g.data()[i]);
    }
}

TEST_CASE("window_merge validates shape consistency") {
    auto g = random_grid(2, 4, 4, 4, 31);
    auto ws = window_partition(g, make_cfg(2, 3));
    CHECK_THROWS_AS(window_merge(ws, Shape{2, 4, 4, 6}), std::invalid_argument);
    auto search = window_area_partition(g, make_cfg(2, 3));
    CHECK_THROWS_AS(window_merge(search, g.shape()), std::invalid_argument);
}

TEST_CASE("window set invariants across random shapes") {
    Rng rng(32);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t c = 1 + rng.below(3);
        const std::size_t d = 2 + rng.below(6);
        const std::size_t h = 2 + rng.below(6);
        const std::size_t w = 2 + rng.below(6);
        WindowConfig cfg;
        cfg.base = {1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(3)};
        const std::size_t mags[] = {1, 3, 5};
        cfg.magnification = {mags[rng.below(3)], mags[rng.below(3)], mags[rng.below(3)]};

        auto g = random_grid(c, d, h, w, 100 + trial);
        auto base = window_partition(g, cfg);
        auto search = window_area_partition(g, cfg);

        // Equal window counts and the searching token count mu*s.
        CHECK(base.count == search.count);
        CHECK(search.tokens_per_window() == cfg.magnification_volume() * cfg.base_volume());

        // Every base token lies inside its paired searching window.
        for (std::size_t wi = 0; wi < base.count; ++wi)
            for (int axis = 0; axis < 3; ++axis) {
                const auto lo = search.origins[wi][axis];
                const auto hi = lo + static_cast<std::int64_t>(search.window_extent[axis]);
                CHECK(base.origins[wi][axis] >= lo);
                CHECK(base.origins[wi][axis] + static_cast<std::int64_t>(base.window_extent[axis]) <=
                      hi);
            }

        // Merge inverts partition.
        auto merged = window_merge(base, g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) CHECK(merged.data()[i] == g.data()[i]);
    }
}

TEST_CASE("windowing ops differentiate") {
    auto g = random_grid(2, 4, 4, 4, 33);
    auto cfg = make_cfg(2, 3);
    CHECK(testutil::max_grad_rel_err(g, [&] {
              return weighted_loss(window_partition(g, cfg).tokens);
          }) < 1e-6);
    CHECK(testutil::max_grad_rel_err(g, [&] {
              return weighted_loss(window_area_partition(g, cfg).tokens);
          }) < 1e-6);
}

TEST_CASE("window config validation") {
    WindowConfig cfg;
    cfg.base = {0, 2, 2};
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg.base = {2, 2, 2};
    cfg.magnification = {2, 3, 3}; // even
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}
