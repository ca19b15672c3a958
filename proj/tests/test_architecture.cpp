#include "doctest.h"

#include <chrono>
#include <cmath>

#include "gradcheck.hpp"
#include "xmorpher/architecture.hpp"

using namespace xm;
using testutil::random_vec;
using testutil::weighted_loss;

using DT = Tensor<double>;

namespace {

ArchConfig tiny_config() {
    ArchConfig cfg;
    cfg.input_extent = {8, 8, 8};
    cfg.embed_channels = 2;
    cfg.levels = 1;
    cfg.rounds = 1;
    cfg.heads_per_level = {1, 1};
    return cfg;
}

ArchConfig desk_config() {
    ArchConfig cfg;
    cfg.input_extent = {16, 16, 16};
    cfg.embed_channels = 4;
    cfg.levels = 2;
    cfg.rounds = 1;
    cfg.heads_per_level = {2, 2, 2};
    return cfg;
}

DT random_volume(const std::array<std::size_t, 3>& e, std::uint64_t seed) {
    Rng rng(seed);
    return DT::from({e[0], e[1], e[2]}, random_vec(e[0] * e[1] * e[2], rng, 0.0, 1.0));
}

} // namespace

TEST_CASE("patch_embed shapes, zero input, gradients") {
    Rng rng(80);
    auto w = DT::from({8, 8}, random_vec(64, rng));
    auto b = DT::from({8}, random_vec(8, rng));

    auto vol = DT::from({1, 16, 16, 16}, random_vec(16 * 16 * 16, rng));
    auto g = patch_embed(vol, w, b);
    CHECK(g.shape() == Shape{8, 8, 8, 8});

    // Zero volume: every token equals the bias.
    auto zero = patch_embed(DT::zeros({1, 4, 4, 4}), w, b);
    for (std::size_t ch = 0; ch < 8; ++ch)
        for (std::size_t t = 0; t < 8; ++t)
            CHECK(zero.data()[ch * 8 + t] == doctest::Approx(b.data()[ch]).epsilon(1e-12));

    CHECK_THROWS_AS(patch_embed(DT::zeros({1, 5, 4, 4}), w, b), std::invalid_argument);

    auto small = DT::from({1, 4, 4, 4}, random_vec(64, rng));
    auto loss = [&] { return weighted_loss(patch_embed(small, w, b)); };
    CHECK(testutil::max_grad_rel_err(small, loss) < 1e-6);
    CHECK(testutil::max_grad_rel_err(w, loss) < 1e-6);
    CHECK(testutil::max_grad_rel_err(b, loss) < 1e-6);
}

TEST_CASE("patch_merge and patch_expand shape arithmetic") {
    Rng rng(81);
    auto g = DT::from({8, 8, 8, 8}, random_vec(8 * 512, rng));
    auto mw = DT::from({64, 16}, random_vec(64 * 16, rng));
    auto mb = DT::from({16}, random_vec(16, rng));
    auto merged = patch_merge(g, mw, mb);
    CHECK(merged.shape() == Shape{16, 4, 4, 4});

    auto ew = DT::from({16, 64}, random_vec(16 * 64, rng));
    auto eb = DT::from({64}, random_vec(64, rng));
    auto expanded = patch_expand(merged, ew, eb);
    CHECK(expanded.shape() == Shape{8, 8, 8, 8});

    CHECK_THROWS_AS(patch_merge(DT::zeros({4, 3, 4, 4}), mw, mb), std::invalid_argument);

    // Gradients through merge and expand.
    auto small = DT::from({2, 2, 2, 2}, random_vec(16, rng));
    auto mw2 = DT::from({16, 4}, random_vec(64, rng));
    auto mb2 = DT::from({4}, random_vec(4, rng));
    CHECK(testutil::max_grad_rel_err(small, [&] {
              return weighted_loss(patch_merge(small, mw2, mb2));
          }) < 1e-6);
    auto g4 = DT::from({4, 2, 2, 2}, random_vec(32, rng));
    auto ew2 = DT::from({4, 16}, random_vec(64, rng));
    auto eb2 = DT::from({16}, random_vec(16, rng));
    CHECK(testutil::max_grad_rel_err(g4, [&] {
              return weighted_loss(patch_expand(g4, ew2, eb2));
          }) < 1e-6);
}

TEST_CASE("patch_expand rearranges neighbor-major the way patch_merge reads") {
    // A single coarse cell expanded then re-merged with identity-ish maps
    // keeps extents; value-level checks pin the neighbor ordering.
    auto g = DT::from({2, 1, 1, 1}, {1.0, 2.0});
    // Expand 2ch -> 8*(1ch): weight picks out channel 0 for even slots and
    // channel 1 for odd slots.
    std::vector<double> w(2 * 8, 0.0);
    for (std::size_t nb = 0; nb < 8; ++nb) w[(nb % 2) * 8 + nb] = 1.0;
    auto expanded = patch_expand(g, DT::from({2, 8}, w), DT::zeros({8}));
    CHECK(expanded.shape() == Shape{1, 2, 2, 2});
    // Neighbor nb = (d%2)*4 + (h%2)*2 + (w%2); even nb got channel0 = 1.
    for (std::size_t t = 0; t < 8; ++t)
        CHECK(expanded.data()[t] == (t % 2 == 0 ? 1.0 : 2.0));
}

TEST_CASE("parameter count matches the closed form") {
    for (ArchConfig cfg : {tiny_config(), desk_config()}) {
        for (bool no_cross : {false, true}) {
            cfg.no_cross = no_cross;
            auto params = ModelParams<double>::init(cfg, 7);
            CHECK(params.store.total_elements() == expected_param_count(cfg));
        }
    }
    ArchConfig multi = desk_config();
    multi.rounds = 2;
    auto params = ModelParams<double>::init(multi, 7);
    CHECK(params.store.total_elements() == expected_param_count(multi));
}

TEST_CASE("zero-initialized head gives the zero field") {
    auto cfg = tiny_config();
    auto params = ModelParams<double>::init(cfg, 3);
    auto moving = random_volume(cfg.input_extent, 90);
    auto fixed = random_volume(cfg.input_extent, 91);
    auto phi = xmorpher_forward(moving, fixed, params);
    CHECK(phi.shape() == Shape{3, 8, 8, 8});
    for (double v : phi.data()) CHECK(v == 0.0);
}

TEST_CASE("forward output shape and determinism") {
    auto cfg = desk_config();
    auto params = ModelParams<double>::init(cfg, 4);
    // Break the zero head so the output is generic.
    Rng rng(92);
    for (auto& v : params.head_w.mutable_data()) v = rng.uniform(-0.1, 0.1);
    auto moving = random_volume(cfg.input_extent, 93);
    auto fixed = random_volume(cfg.input_extent, 94);
    auto phi1 = xmorpher_forward(moving, fixed, params);
    auto phi2 = xmorpher_forward(moving, fixed, params);
    CHECK(phi1.shape() == Shape{3, 16, 16, 16});
    for (std::size_t i = 0; i < phi1.size(); ++i) CHECK(phi1.data()[i] == phi2.data()[i]);
    CHECK_THROWS_AS(xmorpher_forward(random_volume({8, 8, 8}, 1), fixed, params),
                    std::invalid_argument);
}

TEST_CASE("every parameter receives gradient from a generic loss") {
    auto cfg = tiny_config();
    auto params = ModelParams<double>::init(cfg, 5);
    Rng rng(95);
    for (auto& v : params.head_w.mutable_data()) v = rng.uniform(-0.2, 0.2);
    for (auto& v : params.head_b.mutable_data()) v = rng.uniform(-0.2, 0.2);

    auto moving = random_volume(cfg.input_extent, 96);
    auto fixed = random_volume(cfg.input_extent, 97);
    params.store.zero_grads();
    auto loss = weighted_loss(xmorpher_forward(moving, fixed, params));
    backward(loss);
    for (const auto& item : params.store.items()) {
        double norm = 0;
        for (double g : item.value.grad()) norm += std::abs(g);
        INFO("parameter ", item.name);
        CHECK(norm > 0.0);
    }
}

TEST_CASE("swapping inputs swaps stream features at every level") {
    auto cfg = desk_config();
    auto params = ModelParams<double>::init(cfg, 6);
    auto moving = random_volume(cfg.input_extent, 98);
    auto fixed = random_volume(cfg.input_extent, 99);

    ForwardArtifacts<double> fwd, swapped;
    (void)xmorpher_forward(moving, fixed, params, nullptr, &fwd);
    (void)xmorpher_forward(fixed, moving, params, nullptr, &swapped);
    REQUIRE(fwd.trace.size() == swapped.trace.size());
    REQUIRE(fwd.trace.size() == 2 * cfg.levels + 1);
    for (std::size_t i = 0; i < fwd.trace.size(); ++i) {
        CHECK(fwd.trace[i].tag == swapped.trace[i].tag);
        REQUIRE(fwd.trace[i].stream_a.size() == swapped.trace[i].stream_b.size());
        for (std::size_t j = 0; j < fwd.trace[i].stream_a.size(); ++j) {
            CHECK(fwd.trace[i].stream_a[j] == swapped.trace[i].stream_b[j]);
            CHECK(fwd.trace[i].stream_b[j] == swapped.trace[i].stream_a[j]);
        }
    }
}

TEST_CASE("no-cross forward honors the same contracts") {
    auto cfg = tiny_config();
    cfg.no_cross = true;
    auto params = ModelParams<double>::init(cfg, 8);
    auto moving = random_volume(cfg.input_extent, 100);
    auto fixed = random_volume(cfg.input_extent, 101);

    auto phi = no_cross_forward(moving, fixed, params);
    CHECK(phi.shape() == Shape{3, 8, 8, 8});
    for (double v : phi.data()) CHECK(v == 0.0);

    Rng rng(102);
    for (auto& v : params.head_w.mutable_data()) v = rng.uniform(-0.2, 0.2);
    params.store.zero_grads();
    backward(weighted_loss(no_cross_forward(moving, fixed, params)));
    for (const auto& item : params.store.items()) {
        double norm = 0;
        for (double g : item.value.grad()) norm += std::abs(g);
        INFO("parameter ", item.name);
        CHECK(norm > 0.0);
    }

    CHECK_THROWS_AS(xmorpher_forward(moving, fixed, params), std::invalid_argument);
}

TEST_CASE("attention dump request captures the requested stage") {
    auto cfg = tiny_config();
    auto params = ModelParams<double>::init(cfg, 9);
    auto moving = random_volume(cfg.input_extent, 103);
    auto fixed = random_volume(cfg.input_extent, 104);

    for (std::size_t stage = 0; stage <= 2 * cfg.levels; ++stage) {
        DumpRequest req{stage};
        ForwardArtifacts<double> art;
        (void)xmorpher_forward(moving, fixed, params, &req, &art);
        REQUIRE(art.has_dump);
        const std::size_t level = stage <= cfg.levels ? stage : 2 * cfg.levels - stage;
        const auto grid = cfg.grid_extent(level);
        const std::size_t expect_n = window_count(grid, cfg.window);
        CHECK(art.dump.window_count() == expect_n);
        // Rows sum to one over valid keys.
        const auto& d = art.dump;
        for (std::size_t wi = 0; wi < expect_n; ++wi)
            for (std::size_t h = 0; h < d.heads; ++h)
                for (std::size_t q = 0; q < d.queries; ++q) {
                    double row = 0;
                    for (std::size_t k = 0; k < d.keys; ++k)
                        row += d.weights[((wi * d.heads + h) * d.queries + q) * d.keys + k];
                    CHECK(std::abs(row - 1.0) < 1e-6);
                }
    }
}

TEST_CASE("arch config validation rejects incompatible extents") {
    auto cfg = desk_config();
    cfg.input_extent = {15, 16, 16};
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg.input_extent = {12, 12, 12}; // 6 not divisible by 4
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = desk_config();
    cfg.heads_per_level = {3, 2, 2}; // 4 % 3 != 0
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = desk_config();
    cfg.rounds = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("forward and backward fit the desk-scale time budget") {
    using Clock = std::chrono::steady_clock;
    ArchConfig cfg = desk_config(); // L=2, C=4, 16^3
    auto params = ModelParams<float>::init(cfg, 10);
    Rng rng(105);
    for (auto& v : params.head_w.mutable_data()) v = static_cast<float>(rng.uniform(-0.1, 0.1));

    std::vector<float> mv(16 * 16 * 16), fv(16 * 16 * 16);
    for (auto& v : mv) v = static_cast<float>(rng.uniform(0, 1));
    for (auto& v : fv) v = static_cast<float>(rng.uniform(0, 1));
    auto moving = Tensor<float>::from({16, 16, 16}, mv);
    auto fixed = Tensor<float>::from({16, 16, 16}, fv);

    const auto start = Clock::now();
    params.store.zero_grads();
    auto phi = xmorpher_forward(moving, fixed, params);
    backward(sum(mul(phi, phi)));
    const std::chrono::duration<double> elapsed = Clock::now() - start;
    CHECK(elapsed.count() < 10.0);
}
