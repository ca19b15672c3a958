#include "xmorpher/commands.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "xmorpher/io.hpp"

namespace fs = std::filesystem;

namespace xm {

namespace {

std::string fmt(double v) {
    std::ostringstream ss;
    ss << std::setprecision(9) << v;
    return ss.str();
}

Tensor<float> volume_tensor(const VolumeFile& vf) {
    if (vf.kind != VolumeFile::Kind::scalar)
        throw std::runtime_error("expected a scalar volume");
    return Tensor<float>::from({vf.dims[0], vf.dims[1], vf.dims[2]}, vf.scalars);
}

struct LoadedPair {
    VolumeFile moving, fixed;
};

LoadedPair load_pair_dir(const std::string& dir) {
    LoadedPair p;
    p.moving = read_volume_file((fs::path(dir) / "moving.xmvol").string());
    p.fixed = read_volume_file((fs::path(dir) / "fixed.xmvol").string());
    if (p.moving.kind != VolumeFile::Kind::scalar || p.fixed.kind != VolumeFile::Kind::scalar)
        throw std::runtime_error(dir + ": pair volumes must be scalar kind");
    if (p.moving.dims != p.fixed.dims)
        throw std::runtime_error(dir + ": moving and fixed extents differ");
    return p;
}

void write_loss_log(std::ostream& out, const std::vector<LossRow>& log) {
    out << "iteration,total,similarity,smoothness\n";
    for (const auto& row : log)
        out << row.iteration << "," << fmt(row.total) << "," << fmt(row.similarity) << ","
            << fmt(row.smoothness) << "\n";
}

// Validates a cubic volume extent against the default two-level architecture.
void check_synth_extent(std::size_t size) {
    AppConfig defaults;
    defaults.arch_for({size, size, size});
}

} // namespace

void cmd_synth(const SynthArgs& args, std::ostream& out) {
    check_synth_extent(args.size);
    const Extent3 extent{args.size, args.size, args.size};
    auto pair = synth_pair<float>(args.seed, extent);

    fs::create_directories(args.out_dir);
    const fs::path dir(args.out_dir);
    write_volume_file((dir / "moving.xmvol").string(),
                      VolumeFile::from_scalar(extent, pair.moving.intensities));
    write_volume_file((dir / "fixed.xmvol").string(),
                      VolumeFile::from_scalar(extent, pair.fixed.intensities));
    write_volume_file((dir / "moving_labels.xmvol").string(),
                      VolumeFile::from_labels(extent, pair.moving.labels));
    write_volume_file((dir / "fixed_labels.xmvol").string(),
                      VolumeFile::from_labels(extent, pair.fixed.labels));
    write_volume_file((dir / "dvf_gt.xmvol").string(), VolumeFile::from_dvf(extent, pair.phi_gt));
    out << "wrote pair to " << args.out_dir << "\n";
}

void cmd_train(const TrainArgs& args, std::ostream& out) {
    const AppConfig cfg = parse_config_file(args.config_path);
    if (args.pair_dirs.empty()) throw std::runtime_error("at least one pair directory is required");

    std::vector<TrainPair<float>> pairs;
    Extent3 extent{};
    for (std::size_t i = 0; i < args.pair_dirs.size(); ++i) {
        auto loaded = load_pair_dir(args.pair_dirs[i]);
        if (i == 0) extent = loaded.moving.dims;
        else if (loaded.moving.dims != extent)
            throw std::runtime_error(args.pair_dirs[i] + ": extent differs from the first pair");
        TrainPair<float> pair(volume_tensor(loaded.moving), volume_tensor(loaded.fixed));
        if (cfg.dice_weight > 0) {
            const fs::path dir(args.pair_dirs[i]);
            const auto ml_path = dir / "moving_labels.xmvol";
            const auto fl_path = dir / "fixed_labels.xmvol";
            if (fs::exists(ml_path) && fs::exists(fl_path)) {
                const VolumeFile ml = read_volume_file(ml_path.string());
                const VolumeFile fl = read_volume_file(fl_path.string());
                if (ml.kind != VolumeFile::Kind::label || fl.kind != VolumeFile::Kind::label)
                    throw std::runtime_error(args.pair_dirs[i] + ": label files must be label kind");
                const auto label_set = nonzero_labels(ml.labels, fl.labels);
                if (!label_set.empty()) {
                    pair.moving_one_hot = one_hot_labels<float>(ml.labels, extent, label_set);
                    pair.fixed_one_hot = one_hot_labels<float>(fl.labels, extent, label_set);
                }
            }
        }
        pairs.push_back(std::move(pair));
    }

    const ArchConfig arch = cfg.arch_for(extent);
    auto result = train(pairs, arch, cfg.train_config());
    save_checkpoint(args.out_checkpoint, result.params);

    write_loss_log(out, result.log);
    if (!args.log_path.empty()) {
        std::ofstream f(args.log_path, std::ios::trunc);
        if (!f) throw std::runtime_error(args.log_path + ": cannot open for writing");
        write_loss_log(f, result.log);
    }
}

void cmd_register(const RegisterArgs& args, std::ostream& out) {
    auto params = load_checkpoint(args.checkpoint);
    const VolumeFile moving_f = read_volume_file(args.moving);
    const VolumeFile fixed_f = read_volume_file(args.fixed);
    if (moving_f.dims != fixed_f.dims)
        throw std::runtime_error("moving and fixed extents differ");
    if (moving_f.dims != params.cfg.input_extent)
        throw std::runtime_error("volume extent does not match the checkpoint configuration");

    auto moving = volume_tensor(moving_f);
    auto fixed = volume_tensor(fixed_f);
    auto phi = forward_displacement(moving, fixed, params);
    auto warped = spatial_transform(moving, phi);

    std::vector<float> phi_v(phi.data().begin(), phi.data().end());
    write_volume_file(args.out_dvf, VolumeFile::from_dvf(moving_f.dims, phi_v));
    write_volume_file(args.out_warped,
                      VolumeFile::from_scalar(moving_f.dims,
                                              {warped.data().begin(), warped.data().end()}));

    if (!args.moving_labels.empty()) {
        if (args.out_warped_labels.empty())
            throw std::runtime_error("--moving-labels requires --out-warped-labels");
        const VolumeFile labels = read_volume_file(args.moving_labels);
        if (labels.kind != VolumeFile::Kind::label)
            throw std::runtime_error(args.moving_labels + ": expected a label volume");
        if (labels.dims != moving_f.dims)
            throw std::runtime_error(args.moving_labels + ": extent differs from moving volume");
        auto warped_labels = warp_labels_nearest(labels.labels, labels.dims, phi_v);
        write_volume_file(args.out_warped_labels,
                          VolumeFile::from_labels(labels.dims, warped_labels));
    }
    out << "wrote " << args.out_dvf << " and " << args.out_warped << "\n";
}

void cmd_eval(const EvalArgs& args, std::ostream& out) {
    const VolumeFile a = read_volume_file(args.warped_labels);
    const VolumeFile b = read_volume_file(args.fixed_labels);
    if (a.kind != VolumeFile::Kind::label || b.kind != VolumeFile::Kind::label)
        throw std::runtime_error("eval expects label volumes");
    if (a.dims != b.dims) throw std::runtime_error("label volume extents differ");
    const VolumeFile dvf = read_volume_file(args.dvf);
    if (dvf.kind != VolumeFile::Kind::dvf) throw std::runtime_error(args.dvf + ": expected a dvf volume");

    const double dice = dsc(a.labels, b.labels, nonzero_labels(a.labels, b.labels));
    const double jac = jacobian_nonpositive_fraction(dvf.scalars, dvf.dims);
    out << "dsc " << fmt(dice) << "\n";
    out << "jacobian_nonpositive_pct " << fmt(jac) << "\n";
}

void cmd_bench(const BenchArgs& args, std::ostream& out) {
    if (args.sizes.empty()) throw std::runtime_error("at least one window size is required");
    const Extent3 extent{args.volume_size, args.volume_size, args.volume_size};
    auto pair = synth_pair<float>(args.seed, extent);
    auto moving = Tensor<float>::from({extent[0], extent[1], extent[2]}, pair.moving.intensities);
    auto fixed = Tensor<float>::from({extent[0], extent[1], extent[2]}, pair.fixed.intensities);

    std::ostringstream csv;
    csv << "window_size,dsc,jacobian_nonpositive_pct,forward_seconds\n";
    for (std::size_t ws : args.sizes) {
        AppConfig cfg;
        cfg.window = {ws, ws, ws};
        cfg.iters = args.iters;
        cfg.seed = args.seed;
        const ArchConfig arch = cfg.arch_for(extent);

        auto result = train(std::vector<TrainPair<float>>{{moving, fixed}}, arch, cfg.train_config());

        auto phi = forward_displacement(moving, fixed, result.params);
        std::vector<float> phi_v(phi.data().begin(), phi.data().end());
        auto warped_labels = warp_labels_nearest(pair.moving.labels, extent, phi_v);
        const double dice =
            dsc(warped_labels, pair.fixed.labels, nonzero_labels(warped_labels, pair.fixed.labels));
        const double jac = jacobian_nonpositive_fraction(phi_v, extent);

        const int reps = 3;
        const auto start = std::chrono::steady_clock::now();
        for (int i = 0; i < reps; ++i)
            (void)forward_displacement(moving, fixed, result.params);
        const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start;
        const double per_forward = elapsed.count() / reps;

        csv << ws << "," << fmt(dice) << "," << fmt(jac) << "," << fmt(per_forward) << "\n";
        out << "window " << ws << ": dsc " << fmt(dice) << ", jacobian_nonpositive_pct "
            << fmt(jac) << ", forward_seconds " << fmt(per_forward) << "\n";
    }
    std::ofstream f(args.out_csv, std::ios::trunc);
    if (!f) throw std::runtime_error(args.out_csv + ": cannot open for writing");
    f << csv.str();
}

void cmd_dump_attention(const DumpAttentionArgs& args, std::ostream& out) {
    auto params = load_checkpoint(args.checkpoint);
    const std::size_t max_stage = 2 * params.cfg.levels;
    if (args.stage > max_stage)
        throw std::runtime_error("stage " + std::to_string(args.stage) + " out of range (max " +
                                 std::to_string(max_stage) + ")");
    auto loaded = load_pair_dir(args.pair_dir);
    if (loaded.moving.dims != params.cfg.input_extent)
        throw std::runtime_error("pair extent does not match the checkpoint configuration");

    DumpRequest req{args.stage};
    ForwardArtifacts<float> art;
    (void)forward_displacement(volume_tensor(loaded.moving), volume_tensor(loaded.fixed), params,
                               &req, &art);
    if (!art.has_dump) throw std::runtime_error("no attention captured for the requested stage");

    AttentionDumpFile adf;
    adf.stage = static_cast<std::uint32_t>(args.stage);
    adf.window = params.cfg.window;
    adf.dump = art.dump;
    write_attention_dump(args.out, adf);

    // Mean attention weight per window (over heads, queries and valid keys),
    // arranged on the window lattice and max-projected along each axis.
    const std::size_t level = args.stage <= params.cfg.levels ? args.stage
                                                              : 2 * params.cfg.levels - args.stage;
    const auto grid = params.cfg.grid_extent(level);
    const auto& base = params.cfg.window.base;
    const std::array<std::size_t, 3> counts{(grid[0] + base[0] - 1) / base[0],
                                            (grid[1] + base[1] - 1) / base[1],
                                            (grid[2] + base[2] - 1) / base[2]};
    const AttentionDump<float>& d = art.dump;
    const std::size_t n = d.window_count();
    if (counts[0] * counts[1] * counts[2] != n)
        throw std::runtime_error("window lattice inconsistent with dump");

    std::vector<double> per_window(n, 0.0);
    for (std::size_t wi = 0; wi < n; ++wi) {
        double acc = 0.0;
        std::size_t cnt = 0;
        for (std::size_t h = 0; h < d.heads; ++h)
            for (std::size_t q = 0; q < d.queries; ++q)
                for (std::size_t kk = 0; kk < d.keys; ++kk)
                    if (d.key_valid[wi * d.keys + kk]) {
                        acc += d.weights[((wi * d.heads + h) * d.queries + q) * d.keys + kk];
                        ++cnt;
                    }
        per_window[wi] = cnt ? acc / double(cnt) : 0.0;
    }
    const double mx = *std::max_element(per_window.begin(), per_window.end());

    auto project = [&](std::size_t axis, std::size_t rows, std::size_t cols,
                       auto&& index_of) {
        std::vector<std::uint8_t> img(rows * cols, 0);
        for (std::size_t a = 0; a < counts[0]; ++a)
            for (std::size_t b = 0; b < counts[1]; ++b)
                for (std::size_t c = 0; c < counts[2]; ++c) {
                    const double v = per_window[(a * counts[1] + b) * counts[2] + c];
                    const auto [row, col] = index_of(a, b, c);
                    const std::uint8_t px =
                        mx > 0 ? static_cast<std::uint8_t>(std::llround(255.0 * v / mx)) : 0;
                    img[row * cols + col] = std::max(img[row * cols + col], px);
                }
        write_pgm(args.out + (axis == 0 ? ".d.pgm" : axis == 1 ? ".h.pgm" : ".w.pgm"), cols, rows,
                  img);
    };
    project(0, counts[1], counts[2],
            [](std::size_t, std::size_t b, std::size_t c) { return std::pair{b, c}; });
    project(1, counts[0], counts[2],
            [](std::size_t a, std::size_t, std::size_t c) { return std::pair{a, c}; });
    project(2, counts[0], counts[1],
            [](std::size_t a, std::size_t b, std::size_t) { return std::pair{a, b}; });

    out << "wrote " << args.out << " and axis projections (" << n << " windows)\n";
}

} // namespace xm
