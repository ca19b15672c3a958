#include "xmorpher/io.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace xm {

namespace {

[[noreturn]] void io_fail(const std::string& path, const std::string& what) {
    throw std::runtime_error(path + ": " + what);
}

// --- little-endian primitives ----------------------------------------------

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

struct Reader {
    const std::string& path;
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t n, const char* what) {
        if (pos + n > buf.size()) io_fail(path, std::string("truncated while reading ") + what);
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    std::uint16_t u16(const char* what) {
        need(2, what);
        const auto lo = static_cast<unsigned char>(buf[pos]);
        const auto hi = static_cast<unsigned char>(buf[pos + 1]);
        pos += 2;
        return static_cast<std::uint16_t>(lo | (hi << 8));
    }
    float f32(const char* what) {
        const std::uint32_t bits = u32(what);
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    std::string bytes(std::size_t n, const char* what) {
        need(n, what);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
    void expect_end() {
        if (pos != buf.size())
            io_fail(path, "trailing bytes after payload (" + std::to_string(buf.size() - pos) + ")");
    }
};

std::string read_all(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) io_fail(path, "cannot open for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_all(const std::string& path, const std::string& data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) io_fail(path, "cannot open for writing");
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) io_fail(path, "write failed");
}

const char* kind_name(VolumeFile::Kind k) {
    switch (k) {
        case VolumeFile::Kind::scalar: return "scalar";
        case VolumeFile::Kind::label: return "label";
        case VolumeFile::Kind::dvf: return "dvf";
    }
    return "?";
}

std::string format_spacing(float v) {
    std::ostringstream ss;
    ss << v;
    return ss.str();
}

} // namespace

// --- volume files ------------------------------------------------------------

VolumeFile VolumeFile::from_scalar(const Extent3& dims, std::vector<float> data) {
    VolumeFile vf;
    vf.dims = dims;
    vf.kind = Kind::scalar;
    vf.scalars = std::move(data);
    return vf;
}

VolumeFile VolumeFile::from_labels(const Extent3& dims, std::vector<std::uint16_t> data) {
    VolumeFile vf;
    vf.dims = dims;
    vf.kind = Kind::label;
    vf.labels = std::move(data);
    return vf;
}

VolumeFile VolumeFile::from_dvf(const Extent3& dims, std::vector<float> data) {
    VolumeFile vf;
    vf.dims = dims;
    vf.kind = Kind::dvf;
    vf.scalars = std::move(data);
    return vf;
}

void write_volume_file(const std::string& path, const VolumeFile& vf) {
    const std::size_t M = vf.voxels();
    const std::size_t expect =
        vf.kind == VolumeFile::Kind::dvf ? 3 * M : M;
    if (vf.kind == VolumeFile::Kind::label) {
        if (vf.labels.size() != expect) io_fail(path, "label payload size mismatch");
    } else if (vf.scalars.size() != expect) {
        io_fail(path, "scalar payload size mismatch");
    }

    std::string out;
    out += "XMVOL1\n";
    out += "dims " + std::to_string(vf.dims[0]) + " " + std::to_string(vf.dims[1]) + " " +
           std::to_string(vf.dims[2]) + "\n";
    out += std::string("kind ") + kind_name(vf.kind) + "\n";
    out += "spacing " + format_spacing(vf.spacing[0]) + " " + format_spacing(vf.spacing[1]) + " " +
           format_spacing(vf.spacing[2]) + "\n";
    out += "data\n";
    if (vf.kind == VolumeFile::Kind::label)
        for (std::uint16_t v : vf.labels) put_u16(out, v);
    else
        for (float v : vf.scalars) put_f32(out, v);
    write_all(path, out);
}

VolumeFile read_volume_file(const std::string& path) {
    const std::string buf = read_all(path);
    std::size_t pos = 0;
    auto next_line = [&](const char* what) {
        const std::size_t nl = buf.find('\n', pos);
        if (nl == std::string::npos) io_fail(path, std::string("missing header line: ") + what);
        std::string line = buf.substr(pos, nl - pos);
        pos = nl + 1;
        return line;
    };

    if (next_line("magic") != "XMVOL1") io_fail(path, "bad magic, expected XMVOL1");

    VolumeFile vf;
    {
        std::istringstream ss(next_line("dims"));
        std::string tag;
        long long d = -1, h = -1, w = -1;
        ss >> tag >> d >> h >> w;
        std::string rest;
        if (tag != "dims" || ss.fail() || (ss >> rest) || d <= 0 || h <= 0 || w <= 0)
            io_fail(path, "malformed dims line");
        vf.dims = {static_cast<std::size_t>(d), static_cast<std::size_t>(h),
                   static_cast<std::size_t>(w)};
    }
    {
        std::istringstream ss(next_line("kind"));
        std::string tag, kind;
        ss >> tag >> kind;
        std::string rest;
        if (tag != "kind" || ss.fail() || (ss >> rest)) io_fail(path, "malformed kind line");
        if (kind == "scalar") vf.kind = VolumeFile::Kind::scalar;
        else if (kind == "label") vf.kind = VolumeFile::Kind::label;
        else if (kind == "dvf") vf.kind = VolumeFile::Kind::dvf;
        else io_fail(path, "unknown kind '" + kind + "'");
    }
    {
        std::istringstream ss(next_line("spacing"));
        std::string tag;
        ss >> tag >> vf.spacing[0] >> vf.spacing[1] >> vf.spacing[2];
        std::string rest;
        if (tag != "spacing" || ss.fail() || (ss >> rest)) io_fail(path, "malformed spacing line");
    }
    if (next_line("data") != "data") io_fail(path, "missing data marker");

    const std::size_t M = vf.voxels();
    const std::size_t count = vf.kind == VolumeFile::Kind::dvf ? 3 * M : M;
    const std::size_t elem = vf.kind == VolumeFile::Kind::label ? 2 : 4;
    if (buf.size() - pos != count * elem)
        io_fail(path, "payload size " + std::to_string(buf.size() - pos) + " does not match header (" +
                          std::to_string(count * elem) + " bytes expected)");

    Reader r{path, buf, pos};
    if (vf.kind == VolumeFile::Kind::label) {
        vf.labels.resize(count);
        for (std::size_t i = 0; i < count; ++i) vf.labels[i] = r.u16("labels");
    } else {
        vf.scalars.resize(count);
        for (std::size_t i = 0; i < count; ++i) vf.scalars[i] = r.f32("values");
    }
    r.expect_end();
    return vf;
}

// --- checkpoints --------------------------------------------------------------

namespace {

void put_arch_config(std::string& out, const ArchConfig& cfg) {
    for (std::size_t e : cfg.input_extent) put_u32(out, static_cast<std::uint32_t>(e));
    put_u32(out, static_cast<std::uint32_t>(cfg.embed_channels));
    put_u32(out, static_cast<std::uint32_t>(cfg.levels));
    put_u32(out, static_cast<std::uint32_t>(cfg.rounds));
    for (std::size_t e : cfg.window.base) put_u32(out, static_cast<std::uint32_t>(e));
    for (std::size_t e : cfg.window.magnification) put_u32(out, static_cast<std::uint32_t>(e));
    put_u32(out, static_cast<std::uint32_t>(cfg.heads_per_level.size()));
    for (std::size_t h : cfg.heads_per_level) put_u32(out, static_cast<std::uint32_t>(h));
    out.push_back(cfg.no_cross ? 1 : 0);
}

ArchConfig get_arch_config(Reader& r) {
    ArchConfig cfg;
    for (auto& e : cfg.input_extent) e = r.u32("input extent");
    cfg.embed_channels = r.u32("embed channels");
    cfg.levels = r.u32("levels");
    cfg.rounds = r.u32("rounds");
    for (auto& e : cfg.window.base) e = r.u32("window base");
    for (auto& e : cfg.window.magnification) e = r.u32("window magnification");
    cfg.heads_per_level.resize(r.u32("head count list length"));
    for (auto& h : cfg.heads_per_level) h = r.u32("head count");
    cfg.no_cross = r.bytes(1, "no-cross flag")[0] != 0;
    return cfg;
}

} // namespace

void save_checkpoint(const std::string& path, const ModelParams<float>& params) {
    std::string out;
    out += "XMCKPT1";
    put_arch_config(out, params.cfg);
    put_u32(out, static_cast<std::uint32_t>(params.store.count()));
    for (const auto& item : params.store.items()) {
        put_u32(out, static_cast<std::uint32_t>(item.name.size()));
        out += item.name;
        put_u32(out, static_cast<std::uint32_t>(item.value.rank()));
        for (std::size_t e : item.value.shape()) put_u64(out, e);
        for (float v : item.value.data()) put_f32(out, v);
    }
    write_all(path, out);
}

ModelParams<float> load_checkpoint(const std::string& path) {
    const std::string buf = read_all(path);
    Reader r{path, buf, 0};
    if (r.bytes(7, "magic") != "XMCKPT1") io_fail(path, "bad magic, expected XMCKPT1");
    const ArchConfig cfg = get_arch_config(r);
    cfg.validate();

    auto params = ModelParams<float>::init(cfg, 0);
    const std::uint32_t count = r.u32("array count");
    if (count != params.store.count())
        io_fail(path, "array count " + std::to_string(count) + " does not match configuration (" +
                          std::to_string(params.store.count()) + " expected)");
    std::set<std::string> seen;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = r.bytes(r.u32("name length"), "name");
        if (!params.store.has(name)) io_fail(path, "unknown parameter '" + name + "'");
        if (!seen.insert(name).second) io_fail(path, "duplicate parameter '" + name + "'");
        auto& tensor = params.store.at(name);
        const std::uint32_t rank = r.u32("rank");
        if (rank != tensor.rank()) io_fail(path, "rank mismatch for '" + name + "'");
        Shape shape(rank);
        for (auto& e : shape) e = static_cast<std::size_t>(r.u64("extent"));
        if (shape != tensor.shape()) io_fail(path, "shape mismatch for '" + name + "'");
        auto data = tensor.mutable_data();
        for (std::size_t j = 0; j < data.size(); ++j) data[j] = r.f32("parameter data");
    }
    r.expect_end();
    return params;
}

// --- attention dumps -----------------------------------------------------------

void write_attention_dump(const std::string& path, const AttentionDumpFile& adf) {
    const AttentionDump<float>& d = adf.dump;
    const std::size_t n = d.window_count();
    if (d.searching_origins.size() != n || d.key_valid.size() != n * d.keys ||
        d.weights.size() != n * d.heads * d.queries * d.keys)
        io_fail(path, "inconsistent attention dump");

    std::string out;
    out += "XMATTN1";
    put_u32(out, adf.stage);
    for (std::size_t e : adf.window.base) put_u32(out, static_cast<std::uint32_t>(e));
    for (std::size_t e : adf.window.magnification) put_u32(out, static_cast<std::uint32_t>(e));
    put_u32(out, static_cast<std::uint32_t>(d.heads));
    put_u32(out, static_cast<std::uint32_t>(n));
    put_u32(out, static_cast<std::uint32_t>(d.queries));
    put_u32(out, static_cast<std::uint32_t>(d.keys));
    for (std::size_t wi = 0; wi < n; ++wi) {
        for (int i = 0; i < 3; ++i)
            put_u64(out, static_cast<std::uint64_t>(d.base_origins[wi][i]));
        for (int i = 0; i < 3; ++i)
            put_u64(out, static_cast<std::uint64_t>(d.searching_origins[wi][i]));
    }
    for (std::uint8_t v : d.key_valid) out.push_back(static_cast<char>(v));
    for (float v : d.weights) put_f32(out, v);
    write_all(path, out);
}

AttentionDumpFile read_attention_dump(const std::string& path) {
    const std::string buf = read_all(path);
    Reader r{path, buf, 0};
    if (r.bytes(7, "magic") != "XMATTN1") io_fail(path, "bad magic, expected XMATTN1");
    AttentionDumpFile adf;
    adf.stage = r.u32("stage");
    for (auto& e : adf.window.base) e = r.u32("window base");
    for (auto& e : adf.window.magnification) e = r.u32("window magnification");
    AttentionDump<float>& d = adf.dump;
    d.heads = r.u32("heads");
    const std::size_t n = r.u32("window count");
    d.queries = r.u32("queries");
    d.keys = r.u32("keys");
    d.base_origins.resize(n);
    d.searching_origins.resize(n);
    for (std::size_t wi = 0; wi < n; ++wi) {
        for (int i = 0; i < 3; ++i)
            d.base_origins[wi][i] = static_cast<std::int64_t>(r.u64("origin"));
        for (int i = 0; i < 3; ++i)
            d.searching_origins[wi][i] = static_cast<std::int64_t>(r.u64("origin"));
    }
    const std::string valid = r.bytes(n * d.keys, "key validity");
    d.key_valid.assign(valid.begin(), valid.end());
    d.weights.resize(n * d.heads * d.queries * d.keys);
    for (auto& v : d.weights) v = r.f32("weights");
    r.expect_end();
    return adf;
}

// --- portable graymap ------------------------------------------------------------

void write_pgm(const std::string& path, std::size_t width, std::size_t height,
               const std::vector<std::uint8_t>& pixels) {
    if (pixels.size() != width * height) io_fail(path, "pixel count mismatch");
    std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    out.append(reinterpret_cast<const char*>(pixels.data()), pixels.size());
    write_all(path, out);
}

// --- run configuration --------------------------------------------------------------

namespace {

const std::vector<std::string>& config_keys() {
    static const std::vector<std::string> keys = {
        "embed_channels", "levels",      "rounds", "window_h", "window_w", "window_d",
        "alpha",          "beta",        "gamma",  "heads",    "no_cross", "similarity",
        "ncc_radius",     "dice_weight", "lambda", "lr",       "iters",    "seed"};
    return keys;
}

std::size_t parse_size(const std::string& key, const std::string& value) {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
        v = std::stoull(value, &pos);
    } catch (const std::exception&) {
        throw std::runtime_error("config: invalid value for " + key + ": '" + value + "'");
    }
    if (pos != value.size())
        throw std::runtime_error("config: invalid value for " + key + ": '" + value + "'");
    return static_cast<std::size_t>(v);
}

double parse_double(const std::string& key, const std::string& value) {
    std::size_t pos = 0;
    double v = 0;
    try {
        v = std::stod(value, &pos);
    } catch (const std::exception&) {
        throw std::runtime_error("config: invalid value for " + key + ": '" + value + "'");
    }
    if (pos != value.size())
        throw std::runtime_error("config: invalid value for " + key + ": '" + value + "'");
    return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true") return true;
    if (value == "false") return false;
    throw std::runtime_error("config: invalid value for " + key + ": expected true|false");
}

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    std::size_t e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

} // namespace

AppConfig parse_config_text(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::set<std::string> seen;
    AppConfig cfg;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("config: line " + std::to_string(lineno) +
                                     " is not of the form key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        const auto& keys = config_keys();
        if (std::find(keys.begin(), keys.end(), key) == keys.end())
            throw std::runtime_error("config: unknown key '" + key + "'");
        if (!seen.insert(key).second)
            throw std::runtime_error("config: duplicate key '" + key + "'");

        if (key == "embed_channels") cfg.embed_channels = parse_size(key, value);
        else if (key == "levels") cfg.levels = parse_size(key, value);
        else if (key == "rounds") cfg.rounds = parse_size(key, value);
        else if (key == "window_h") cfg.window[0] = parse_size(key, value);
        else if (key == "window_w") cfg.window[1] = parse_size(key, value);
        else if (key == "window_d") cfg.window[2] = parse_size(key, value);
        else if (key == "alpha") cfg.magnification[0] = parse_size(key, value);
        else if (key == "beta") cfg.magnification[1] = parse_size(key, value);
        else if (key == "gamma") cfg.magnification[2] = parse_size(key, value);
        else if (key == "heads") cfg.heads = parse_size(key, value);
        else if (key == "no_cross") cfg.no_cross = parse_bool(key, value);
        else if (key == "similarity") {
            if (value == "mse") cfg.similarity = Similarity::mse;
            else if (value == "ncc") cfg.similarity = Similarity::ncc;
            else throw std::runtime_error("config: similarity must be mse|ncc");
        } else if (key == "ncc_radius") cfg.ncc_radius = parse_size(key, value);
        else if (key == "lambda") cfg.lambda = parse_double(key, value);
        else if (key == "dice_weight") cfg.dice_weight = parse_double(key, value);
        else if (key == "lr") cfg.lr = parse_double(key, value);
        else if (key == "iters") cfg.iters = parse_size(key, value);
        else if (key == "seed") cfg.seed = parse_size(key, value);
    }
    for (const auto& key : config_keys())
        if (!seen.count(key)) throw std::runtime_error("config: missing key '" + key + "'");
    return cfg;
}

AppConfig parse_config_file(const std::string& path) {
    return parse_config_text(read_all(path));
}

ArchConfig AppConfig::arch_for(const Extent3& extent) const {
    ArchConfig arch;
    arch.input_extent = extent;
    arch.embed_channels = embed_channels;
    arch.levels = levels;
    arch.rounds = rounds;
    arch.window.base = window;
    arch.window.magnification = magnification;
    arch.heads_per_level.assign(levels + 1, heads);
    arch.no_cross = no_cross;
    arch.validate();
    return arch;
}

TrainConfig AppConfig::train_config() const {
    TrainConfig tc;
    tc.lr = lr;
    tc.iterations = iters;
    tc.smoothness_weight = lambda;
    tc.similarity = similarity;
    tc.ncc_radius = ncc_radius;
    tc.dice_weight = dice_weight;
    tc.seed = seed;
    return tc;
}

std::string AppConfig::to_text() const {
    std::ostringstream ss;
    ss << "embed_channels = " << embed_channels << "\n";
    ss << "levels = " << levels << "\n";
    ss << "rounds = " << rounds << "\n";
    ss << "window_h = " << window[0] << "\n";
    ss << "window_w = " << window[1] << "\n";
    ss << "window_d = " << window[2] << "\n";
    ss << "alpha = " << magnification[0] << "\n";
    ss << "beta = " << magnification[1] << "\n";
    ss << "gamma = " << magnification[2] << "\n";
    ss << "heads = " << heads << "\n";
    ss << "no_cross = " << (no_cross ? "true" : "false") << "\n";
    ss << "similarity = " << (similarity == Similarity::mse ? "mse" : "ncc") << "\n";
    ss << "ncc_radius = " << ncc_radius << "\n";
    ss << "lambda = " << lambda << "\n";
    ss << "dice_weight = " << dice_weight << "\n";
    ss << "lr = " << lr << "\n";
    ss << "iters = " << iters << "\n";
    ss << "seed = " << seed << "\n";
    return ss.str();
}

} // namespace xm
