#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "oracles.hpp"
#include "xmorpher/commands.hpp"
#include "xmorpher/io.hpp"

using namespace xm;
namespace fs = std::filesystem;

namespace {

fs::path test_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("xmorpher_tests_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void corrupt_tail(const fs::path& src, const fs::path& dst, std::size_t drop) {
    const std::string data = slurp(src);
    std::ofstream out(dst, std::ios::binary);
    out.write(data.data(), static_cast<std::streamsize>(data.size() - drop));
}

std::string default_config_text(std::size_t iters, std::uint64_t seed, bool no_cross = false) {
    AppConfig cfg;
    cfg.iters = iters;
    cfg.seed = seed;
    cfg.no_cross = no_cross;
    return cfg.to_text();
}

} // namespace

TEST_CASE("volume files roundtrip bit-exactly") {
    const auto dir = test_dir("volio");
    const Extent3 e{3, 4, 5};

    VolumeFile scalar = VolumeFile::from_scalar(e, std::vector<float>(60, 0.0f));
    for (std::size_t i = 0; i < 60; ++i) scalar.scalars[i] = float(i) * 0.25f - 3.0f;
    write_volume_file((dir / "s.xmvol").string(), scalar);
    auto rs = read_volume_file((dir / "s.xmvol").string());
    CHECK(rs.kind == VolumeFile::Kind::scalar);
    CHECK(rs.dims == e);
    CHECK(rs.scalars == scalar.scalars);

    VolumeFile labels = VolumeFile::from_labels(e, std::vector<std::uint16_t>(60, 2));
    labels.labels[7] = 9;
    write_volume_file((dir / "l.xmvol").string(), labels);
    auto rl = read_volume_file((dir / "l.xmvol").string());
    CHECK(rl.labels == labels.labels);

    VolumeFile dvf = VolumeFile::from_dvf(e, std::vector<float>(180, 0.5f));
    write_volume_file((dir / "d.xmvol").string(), dvf);
    auto rd = read_volume_file((dir / "d.xmvol").string());
    CHECK(rd.scalars == dvf.scalars);
}

TEST_CASE("volume files reject malformed content") {
    const auto dir = test_dir("volbad");
    const Extent3 e{2, 2, 2};
    write_volume_file((dir / "ok.xmvol").string(),
                      VolumeFile::from_scalar(e, std::vector<float>(8, 1.0f)));

    corrupt_tail(dir / "ok.xmvol", dir / "short.xmvol", 4);
    CHECK_THROWS_WITH_AS(read_volume_file((dir / "short.xmvol").string()),
                         doctest::Contains("payload size"), std::runtime_error);

    {
        std::ofstream out(dir / "magic.xmvol", std::ios::binary);
        out << "NOTMAGIC\n";
    }
    CHECK_THROWS_WITH_AS(read_volume_file((dir / "magic.xmvol").string()),
                         doctest::Contains("magic"), std::runtime_error);

    {
        std::ofstream out(dir / "kind.xmvol", std::ios::binary);
        out << "XMVOL1\ndims 2 2 2\nkind voxels\nspacing 1 1 1\ndata\n";
    }
    CHECK_THROWS_WITH_AS(read_volume_file((dir / "kind.xmvol").string()),
                         doctest::Contains("unknown kind"), std::runtime_error);

    // Trailing garbage after the payload.
    {
        const std::string good = slurp(dir / "ok.xmvol");
        std::ofstream out(dir / "long.xmvol", std::ios::binary);
        out << good << "xx";
    }
    CHECK_THROWS_AS(read_volume_file((dir / "long.xmvol").string()), std::runtime_error);

    CHECK_THROWS_AS(read_volume_file((dir / "missing.xmvol").string()), std::runtime_error);
}

TEST_CASE("checkpoints roundtrip and validate") {
    const auto dir = test_dir("ckpt");
    ArchConfig cfg;
    cfg.input_extent = {8, 8, 8};
    cfg.embed_channels = 2;
    cfg.levels = 1;
    cfg.heads_per_level = {1, 1};
    auto params = ModelParams<float>::init(cfg, 77);

    save_checkpoint((dir / "a.ckpt").string(), params);
    auto loaded = load_checkpoint((dir / "a.ckpt").string());
    CHECK(loaded.cfg.input_extent == cfg.input_extent);
    CHECK(loaded.cfg.embed_channels == cfg.embed_channels);
    REQUIRE(loaded.store.count() == params.store.count());
    for (std::size_t i = 0; i < params.store.count(); ++i) {
        const auto& a = params.store.items()[i];
        const auto& b = loaded.store.items()[i];
        CHECK(a.name == b.name);
        REQUIRE(a.value.shape() == b.value.shape());
        for (std::size_t j = 0; j < a.value.size(); ++j)
            CHECK(a.value.data()[j] == b.value.data()[j]);
    }

    // save(load(x)) is byte-identical.
    save_checkpoint((dir / "b.ckpt").string(), loaded);
    CHECK(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"));

    {
        std::ofstream out(dir / "bad.ckpt", std::ios::binary);
        out << "XXCKPT9";
    }
    CHECK_THROWS_WITH_AS(load_checkpoint((dir / "bad.ckpt").string()), doctest::Contains("magic"),
                         std::runtime_error);

    corrupt_tail(dir / "a.ckpt", dir / "trunc.ckpt", 10);
    CHECK_THROWS_WITH_AS(load_checkpoint((dir / "trunc.ckpt").string()),
                         doctest::Contains("truncated"), std::runtime_error);
}

TEST_CASE("config parsing enforces the schema") {
    const AppConfig defaults;
    auto cfg = parse_config_text(defaults.to_text());
    CHECK(cfg.embed_channels == defaults.embed_channels);
    CHECK(cfg.iters == defaults.iters);

    // Comments and spacing are tolerated.
    auto text = defaults.to_text() + "\n# trailing comment\n\n";
    CHECK_NOTHROW(parse_config_text(text));

    // Missing key is named.
    std::string missing;
    std::istringstream in(defaults.to_text());
    std::string line;
    while (std::getline(in, line))
        if (line.rfind("lr =", 0) != 0) missing += line + "\n";
    CHECK_THROWS_WITH_AS(parse_config_text(missing), doctest::Contains("missing key 'lr'"),
                         std::runtime_error);

    CHECK_THROWS_WITH_AS(parse_config_text(defaults.to_text() + "bogus = 3\n"),
                         doctest::Contains("unknown key"), std::runtime_error);
    CHECK_THROWS_WITH_AS(parse_config_text(defaults.to_text() + "lr = 0.1\n"),
                         doctest::Contains("duplicate key"), std::runtime_error);
    CHECK_THROWS_WITH_AS(parse_config_text(missing + "lr = fast\n"),
                         doctest::Contains("invalid value"), std::runtime_error);
}

TEST_CASE("synth command is deterministic and validates extents") {
    const auto dir = test_dir("synth");
    std::ostringstream log;
    cmd_synth({7, 16, (dir / "a").string()}, log);
    cmd_synth({7, 16, (dir / "b").string()}, log);
    for (const char* name : {"moving.xmvol", "fixed.xmvol", "moving_labels.xmvol",
                             "fixed_labels.xmvol", "dvf_gt.xmvol"}) {
        CHECK(slurp(dir / "a" / name) == slurp(dir / "b" / name));
    }

    auto gt = read_volume_file((dir / "a" / "dvf_gt.xmvol").string());
    CHECK(gt.kind == VolumeFile::Kind::dvf);
    CHECK(jacobian_nonpositive_fraction(gt.scalars, gt.dims) == 0.0);

    CHECK_THROWS_AS(cmd_synth({7, 15, (dir / "c").string()}, log), std::invalid_argument);
}

TEST_CASE("train, register and eval pipeline on a small pair") {
    const auto dir = test_dir("pipeline");
    std::ostringstream log;
    cmd_synth({3, 8, (dir / "pair").string()}, log);

    {
        std::ofstream cfg(dir / "run.cfg");
        cfg << default_config_text(0, 3); // zero iterations: checkpoint == init
    }

    std::ostringstream train_out;
    cmd_train({{(dir / "pair").string()}, (dir / "run.cfg").string(), (dir / "init.ckpt").string(),
               (dir / "loss.csv").string()},
              train_out);
    CHECK(train_out.str().rfind("iteration,total,similarity,smoothness\n", 0) == 0);

    // Zero-iteration checkpoint equals a fresh initialization.
    auto trained = load_checkpoint((dir / "init.ckpt").string());
    auto fresh = ModelParams<float>::init(trained.cfg, 3);
    for (std::size_t i = 0; i < fresh.store.count(); ++i)
        for (std::size_t j = 0; j < fresh.store.items()[i].value.size(); ++j)
            CHECK(trained.store.items()[i].value.data()[j] ==
                  fresh.store.items()[i].value.data()[j]);

    // Registering with the zero-head checkpoint keeps the moving volume.
    std::ostringstream reg_out;
    cmd_register({(dir / "pair" / "moving.xmvol").string(), (dir / "pair" / "fixed.xmvol").string(),
                  (dir / "init.ckpt").string(), (dir / "dvf.xmvol").string(),
                  (dir / "warped.xmvol").string(), (dir / "pair" / "moving_labels.xmvol").string(),
                  (dir / "warped_labels.xmvol").string()},
                 reg_out);
    auto dvf = read_volume_file((dir / "dvf.xmvol").string());
    CHECK(dvf.dims == Extent3{8, 8, 8});
    for (float v : dvf.scalars) CHECK(v == 0.0f);
    auto warped = read_volume_file((dir / "warped.xmvol").string());
    auto moving = read_volume_file((dir / "pair" / "moving.xmvol").string());
    CHECK(warped.scalars == moving.scalars);
    auto wl = read_volume_file((dir / "warped_labels.xmvol").string());
    auto ml = read_volume_file((dir / "pair" / "moving_labels.xmvol").string());
    CHECK(wl.labels == ml.labels);

    // eval: identical labels -> dsc 1; zero field -> 0 percent folding.
    std::ostringstream eval_out;
    cmd_eval({(dir / "warped_labels.xmvol").string(),
              (dir / "pair" / "moving_labels.xmvol").string(), (dir / "dvf.xmvol").string()},
             eval_out);
    CHECK(eval_out.str() == "dsc 1\njacobian_nonpositive_pct 0\n");

    // A short real training run: log rows present, loss finite, checkpoint loads.
    {
        std::ofstream cfg(dir / "run2.cfg");
        cfg << default_config_text(3, 3);
    }
    std::ostringstream train2;
    cmd_train({{(dir / "pair").string()}, (dir / "run2.cfg").string(),
               (dir / "short.ckpt").string(), ""},
              train2);
    const std::string csv = slurp(dir / "loss.csv");
    CHECK(csv.rfind("iteration,total,similarity,smoothness\n", 0) == 0);
    std::istringstream rows(train2.str());
    std::string header;
    std::getline(rows, header);
    std::size_t row_count = 0;
    std::string row;
    while (std::getline(rows, row))
        if (!row.empty()) ++row_count;
    CHECK(row_count == 3);
}

TEST_CASE("train rejects a config missing keys") {
    const auto dir = test_dir("trainbad");
    std::ostringstream log;
    cmd_synth({3, 8, (dir / "pair").string()}, log);
    {
        std::ofstream cfg(dir / "bad.cfg");
        cfg << "lr = 0.01\n";
    }
    CHECK_THROWS_WITH_AS(cmd_train({{(dir / "pair").string()}, (dir / "bad.cfg").string(),
                                    (dir / "x.ckpt").string(), ""},
                                   log),
                         doctest::Contains("missing key"), std::runtime_error);
}

TEST_CASE("dump-attention writes a recomputable dump") {
    const auto dir = test_dir("dump");
    std::ostringstream log;
    cmd_synth({5, 8, (dir / "pair").string()}, log);
    {
        std::ofstream cfg(dir / "run.cfg");
        cfg << default_config_text(2, 5);
    }
    cmd_train({{(dir / "pair").string()}, (dir / "run.cfg").string(), (dir / "m.ckpt").string(), ""},
              log);

    cmd_dump_attention({(dir / "m.ckpt").string(), (dir / "pair").string(), 0,
                        (dir / "attn.bin").string()},
                       log);

    auto adf = read_attention_dump((dir / "attn.bin").string());
    const auto params = load_checkpoint((dir / "m.ckpt").string());
    const auto grid = params.cfg.grid_extent(0);
    CHECK(adf.dump.window_count() == window_count(grid, params.cfg.window));
    CHECK(adf.stage == 0);

    // Rows sum to one over valid keys; masked keys exactly zero.
    const auto& d = adf.dump;
    for (std::size_t wi = 0; wi < d.window_count(); ++wi)
        for (std::size_t h = 0; h < d.heads; ++h)
            for (std::size_t q = 0; q < d.queries; ++q) {
                double row = 0;
                for (std::size_t k = 0; k < d.keys; ++k) {
                    const float w = d.weights[((wi * d.heads + h) * d.queries + q) * d.keys + k];
                    if (!d.key_valid[wi * d.keys + k]) CHECK(w == 0.0f);
                    row += w;
                }
                CHECK(row == doctest::Approx(1.0).epsilon(1e-5));
            }

    // Independent recomputation: embed both volumes with the checkpoint
    // weights, window them, and run the dense oracle on stage-0 parameters.
    {
        auto pair_m = read_volume_file((dir / "pair" / "moving.xmvol").string());
        auto pair_f = read_volume_file((dir / "pair" / "fixed.xmvol").string());
        auto to_double = [](const std::vector<float>& v) {
            return std::vector<double>(v.begin(), v.end());
        };
        auto copy_param = [&](const std::string& name) {
            const auto& t = params.store.at(name);
            return std::vector<double>(t.data().begin(), t.data().end());
        };
        auto embed = [&](const VolumeFile& vf) {
            auto vol = Tensor<double>::from({1, vf.dims[0], vf.dims[1], vf.dims[2]},
                                            to_double(vf.scalars));
            auto w = Tensor<double>::from({8, params.cfg.embed_channels}, copy_param("embed.w"));
            auto b = Tensor<double>::from({params.cfg.embed_channels}, copy_param("embed.b"));
            return patch_embed(vol, w, b);
        };
        auto ga = embed(pair_m);
        auto gb = embed(pair_f);
        auto g1 = Tensor<double>::from({params.cfg.embed_channels}, copy_param("enc0.r0.ln1.g"));
        auto b1 = Tensor<double>::from({params.cfg.embed_channels}, copy_param("enc0.r0.ln1.b"));
        auto base = window_partition(xm::detail::grid_layer_norm(ga, g1, b1), params.cfg.window);
        auto search =
            window_area_partition(xm::detail::grid_layer_norm(gb, g1, b1), params.cfg.window);

        const std::size_t c = params.cfg.embed_channels;
        testutil::BruteForceAttention oracle{
            base.count,        base.tokens_per_window(),  search.tokens_per_window(),
            c,                 params.cfg.heads_per_level[0],
            copy_param("enc0.r0.q.w"), copy_param("enc0.r0.q.b"),
            copy_param("enc0.r0.k.w"), copy_param("enc0.r0.k.b"),
            copy_param("enc0.r0.v.w"), copy_param("enc0.r0.v.b"),
            copy_param("enc0.r0.o.w"), copy_param("enc0.r0.o.b")};
        std::vector<double> weights;
        (void)oracle.run({base.tokens.data().begin(), base.tokens.data().end()},
                         {search.tokens.data().begin(), search.tokens.data().end()}, search.valid,
                         &weights);
        REQUIRE(weights.size() == d.weights.size());
        for (std::size_t i = 0; i < weights.size(); ++i)
            CHECK(std::abs(weights[i] - double(d.weights[i])) < 1e-5);
    }

    // Axis projections exist and are valid graymaps.
    for (const char* suffix : {".d.pgm", ".h.pgm", ".w.pgm"}) {
        const std::string pgm = slurp(dir / ("attn.bin" + std::string(suffix)));
        CHECK(pgm.rfind("P5\n", 0) == 0);
    }

    CHECK_THROWS_WITH_AS(cmd_dump_attention({(dir / "m.ckpt").string(), (dir / "pair").string(),
                                             9, (dir / "attn2.bin").string()},
                                            log),
                         doctest::Contains("out of range"), std::runtime_error);
}

TEST_CASE("bench writes one row per window size") {
    const auto dir = test_dir("bench");
    std::ostringstream log;
    BenchArgs args;
    args.sizes = {1, 2};
    args.out_csv = (dir / "bench.csv").string();
    args.volume_size = 8;
    args.iters = 1;
    args.seed = 4;
    cmd_bench(args, log);

    std::istringstream csv(slurp(dir / "bench.csv"));
    std::string line;
    std::getline(csv, line);
    CHECK(line == "window_size,dsc,jacobian_nonpositive_pct,forward_seconds");
    std::size_t rows = 0;
    while (std::getline(csv, line)) {
        if (line.empty()) continue;
        ++rows;
        CHECK(std::count(line.begin(), line.end(), ',') == 3);
    }
    CHECK(rows == 2);
}
