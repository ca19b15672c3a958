#pragma once

// Command implementations backing the CLI. Each throws on failure; the CLI
// wrapper turns exceptions into a single-line error and a nonzero exit code.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace xm {

struct SynthArgs {
    std::uint64_t seed = 7;
    std::size_t size = 16;
    std::string out_dir;
};

struct TrainArgs {
    std::vector<std::string> pair_dirs;
    std::string config_path;
    std::string out_checkpoint;
    std::string log_path; // optional
};

struct RegisterArgs {
    std::string moving;
    std::string fixed;
    std::string checkpoint;
    std::string out_dvf;
    std::string out_warped;
    std::string moving_labels;     // optional
    std::string out_warped_labels; // optional, requires moving_labels
};

struct EvalArgs {
    std::string warped_labels;
    std::string fixed_labels;
    std::string dvf;
};

struct BenchArgs {
    std::vector<std::size_t> sizes;
    std::string out_csv;
    std::size_t volume_size = 16;
    std::size_t iters = 40;
    std::uint64_t seed = 7;
};

struct DumpAttentionArgs {
    std::string checkpoint;
    std::string pair_dir;
    std::size_t stage = 0;
    std::string out;
};

void cmd_synth(const SynthArgs& args, std::ostream& out);
void cmd_train(const TrainArgs& args, std::ostream& out);
void cmd_register(const RegisterArgs& args, std::ostream& out);
void cmd_eval(const EvalArgs& args, std::ostream& out);
void cmd_bench(const BenchArgs& args, std::ostream& out);
void cmd_dump_attention(const DumpAttentionArgs& args, std::ostream& out);

} // namespace xm
