// xmorpher command line: synthetic data, training, inference, evaluation,
// window-size benchmarking and attention inspection for the dual-stream
// cross-attention registration model.

#include <iostream>

#include "CLI11.hpp"
#include "xmorpher/commands.hpp"

int main(int argc, char** argv) {
    CLI::App app{"deformable 3D registration with windowed cross attention"};
    app.require_subcommand(1);

    xm::SynthArgs synth;
    auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic registration pair");
    synth_cmd->add_option("--seed", synth.seed, "generation seed");
    synth_cmd->add_option("--size", synth.size, "cubic volume extent");
    synth_cmd->add_option("--out-dir", synth.out_dir, "output directory")->required();

    xm::TrainArgs train;
    auto* train_cmd = app.add_subcommand("train", "train a model on volume pairs");
    train_cmd->add_option("--pairs", train.pair_dirs, "pair directories (moving/fixed .xmvol)")
        ->required()
        ->delimiter(',');
    train_cmd->add_option("--config", train.config_path, "run configuration file")->required();
    train_cmd->add_option("--out", train.out_checkpoint, "output checkpoint path")->required();
    train_cmd->add_option("--log", train.log_path, "also write the loss log CSV here");

    xm::RegisterArgs reg;
    auto* reg_cmd = app.add_subcommand("register", "predict a displacement field and warp");
    reg_cmd->add_option("--moving", reg.moving, "moving volume")->required();
    reg_cmd->add_option("--fixed", reg.fixed, "fixed volume")->required();
    reg_cmd->add_option("--checkpoint", reg.checkpoint, "trained checkpoint")->required();
    reg_cmd->add_option("--out-dvf", reg.out_dvf, "output displacement field")->required();
    reg_cmd->add_option("--out-warped", reg.out_warped, "output warped volume")->required();
    reg_cmd->add_option("--moving-labels", reg.moving_labels, "optional moving label map");
    reg_cmd->add_option("--out-warped-labels", reg.out_warped_labels,
                        "output for the warped label map");

    xm::EvalArgs eval;
    auto* eval_cmd = app.add_subcommand("eval", "report DSC and folding metrics");
    eval_cmd->add_option("--warped-labels", eval.warped_labels, "warped label map")->required();
    eval_cmd->add_option("--fixed-labels", eval.fixed_labels, "fixed label map")->required();
    eval_cmd->add_option("--dvf", eval.dvf, "displacement field")->required();

    xm::BenchArgs bench;
    auto* bench_cmd = app.add_subcommand("bench", "window-size sweep");
    bench_cmd->add_option("--sizes", bench.sizes, "window sizes to sweep")
        ->required()
        ->delimiter(',');
    bench_cmd->add_option("--out", bench.out_csv, "output CSV path")->required();
    bench_cmd->add_option("--size", bench.volume_size, "cubic volume extent");
    bench_cmd->add_option("--iters", bench.iters, "training iterations per size");
    bench_cmd->add_option("--seed", bench.seed, "pair and training seed");

    xm::DumpAttentionArgs dump;
    auto* dump_cmd = app.add_subcommand("dump-attention", "capture attention weights");
    dump_cmd->add_option("--checkpoint", dump.checkpoint, "trained checkpoint")->required();
    dump_cmd->add_option("--pair", dump.pair_dir, "pair directory")->required();
    dump_cmd->add_option("--level", dump.stage,
                         "fusion stage: 0..L-1 encoder, L bottleneck, L+1..2L decoder");
    dump_cmd->add_option("--out", dump.out, "output dump path")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*synth_cmd) xm::cmd_synth(synth, std::cout);
        else if (*train_cmd) xm::cmd_train(train, std::cout);
        else if (*reg_cmd) xm::cmd_register(reg, std::cout);
        else if (*eval_cmd) xm::cmd_eval(eval, std::cout);
        else if (*bench_cmd) xm::cmd_bench(bench, std::cout);
        else if (*dump_cmd) xm::cmd_dump_attention(dump, std::cout);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    }
    return 0;
}
