#pragma once

// On-disk formats and the flat key-value run configuration.
//
// Volume files: text header (magic XMVOL1, dims, kind, spacing) followed by a
// raw little-endian payload -- float32 for scalar/dvf data, uint16 for label
// maps. Checkpoints: magic XMCKPT1, binary-serialized configuration, then the
// named parameter arrays with shape headers. Parsers are strict: anything
// unexpected or truncated is rejected with a diagnostic.

#include <array>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "xmorpher/architecture.hpp"
#include "xmorpher/registration.hpp"

namespace xm {

struct VolumeFile {
    enum class Kind { scalar, label, dvf };

    Extent3 dims{};
    Kind kind = Kind::scalar;
    std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};
    std::vector<float> scalars;         // scalar: D*H*W, dvf: 3*D*H*W
    std::vector<std::uint16_t> labels;  // label: D*H*W

    std::size_t voxels() const { return dims[0] * dims[1] * dims[2]; }

    static VolumeFile from_scalar(const Extent3& dims, std::vector<float> data);
    static VolumeFile from_labels(const Extent3& dims, std::vector<std::uint16_t> data);
    static VolumeFile from_dvf(const Extent3& dims, std::vector<float> data);
};

void write_volume_file(const std::string& path, const VolumeFile& vf);
VolumeFile read_volume_file(const std::string& path);

void save_checkpoint(const std::string& path, const ModelParams<float>& params);
ModelParams<float> load_checkpoint(const std::string& path);

// Serialized attention-weight capture plus the capture location.
struct AttentionDumpFile {
    std::uint32_t stage = 0;
    WindowConfig window;
    AttentionDump<float> dump;
};

void write_attention_dump(const std::string& path, const AttentionDumpFile& adf);
AttentionDumpFile read_attention_dump(const std::string& path);

void write_pgm(const std::string& path, std::size_t width, std::size_t height,
               const std::vector<std::uint8_t>& pixels);

// Flat `key = value` configuration with a fixed schema: every key below is
// required exactly once and unknown keys are rejected.
//
//   embed_channels levels rounds window_h window_w window_d
//   alpha beta gamma heads no_cross
//   similarity ncc_radius lambda dice_weight lr iters seed
struct AppConfig {
    std::size_t embed_channels = 8;
    std::size_t levels = 2;
    std::size_t rounds = 1;
    std::array<std::size_t, 3> window{2, 2, 2};
    std::array<std::size_t, 3> magnification{3, 3, 3};
    std::size_t heads = 2;
    bool no_cross = false;
    Similarity similarity = Similarity::mse;
    std::size_t ncc_radius = 2;
    double lambda = 1.0;
    double dice_weight = 0.0;
    double lr = 1e-2;
    std::size_t iters = 200;
    std::uint64_t seed = 0;

    ArchConfig arch_for(const Extent3& extent) const;
    TrainConfig train_config() const;
    std::string to_text() const;
};

AppConfig parse_config_text(const std::string& text);
AppConfig parse_config_file(const std::string& path);

} // namespace xm
