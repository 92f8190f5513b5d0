#include "efem/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "efem/error.hpp"
#include "efem/io.hpp"

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace efem {

namespace {

constexpr char kMagic[8] = {'E', 'F', 'E', 'M', 'C', 'K', 'P', 'T'};

void put_u32(std::string& out, std::uint32_t v) {
    char b[4];
    std::memcpy(b, &v, 4);
    out.append(b, 4);
}

void put_f32(std::string& out, double v) {
    const float f = static_cast<float>(v);
    char b[4];
    std::memcpy(b, &f, 4);
    out.append(b, 4);
}

std::string make_container(const nlohmann::json& header, const std::string& payload) {
    const std::string text = header.dump();
    std::string out(kMagic, 8);
    put_u32(out, kCheckpointVersion);
    put_u32(out, static_cast<std::uint32_t>(text.size()));
    out += text;
    out += payload;
    return out;
}

struct Container {
    nlohmann::json header;
    std::string payload;
};

Container parse_container(const std::filesystem::path& path) {
    const std::string bytes = read_file(path);
    auto bad = [&](const std::string& why) {
        return Error(ErrorCode::Io, path.string() + ": " + why);
    };
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0) throw bad("not an EFEMCKPT file");
    std::uint32_t version = 0;
    std::uint32_t len = 0;
    std::memcpy(&version, bytes.data() + 8, 4);
    std::memcpy(&len, bytes.data() + 12, 4);
    if (version != kCheckpointVersion) throw bad("unsupported format version " + std::to_string(version));
    if (bytes.size() < 16 + static_cast<std::size_t>(len)) throw bad("truncated header");
    Container c;
    try {
        c.header = nlohmann::json::parse(bytes.substr(16, len));
    } catch (const nlohmann::json::exception& e) {
        throw bad(std::string("corrupt header: ") + e.what());
    }
    c.payload = bytes.substr(16 + len);
    return c;
}

class FloatReader {
public:
    FloatReader(const std::string& payload, const std::filesystem::path& path) : data_(payload), path_(path) {}

    double next() {
        if (pos_ + 4 > data_.size()) throw Error(ErrorCode::Io, path_.string() + ": payload truncated");
        float f = 0.0f;
        std::memcpy(&f, data_.data() + pos_, 4);
        pos_ += 4;
        return f;
    }
    void expect_end() const {
        if (pos_ != data_.size()) throw Error(ErrorCode::Io, path_.string() + ": trailing payload bytes");
    }

private:
    const std::string& data_;
    std::filesystem::path path_;
    std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const LearnedPrior& prior) {
    nlohmann::json header;
    header["section"] = "NETWORK";
    header["topology"] = prior.topology().to_json();
    const auto params = prior.parameters();
    const auto names = prior.parameter_names();
    nlohmann::json layers = nlohmann::json::array();
    std::string payload;
    for (std::size_t i = 0; i < params.size(); ++i) {
        layers.push_back({{"name", names[i]}, {"rows", params[i].rows()}, {"cols", params[i].cols()}});
        // row-major
        for (Eigen::Index r = 0; r < params[i].rows(); ++r)
            for (Eigen::Index c = 0; c < params[i].cols(); ++c) put_f32(payload, params[i](r, c));
    }
    header["layers"] = layers;
    write_file_atomic(path, make_container(header, payload));
}

std::unique_ptr<LearnedPrior> load_checkpoint(const std::filesystem::path& path) {
    const Container c = parse_container(path);
    if (c.header.value("section", "") != "NETWORK") {
        throw Error(ErrorCode::Io, path.string() + ": not a network checkpoint");
    }
    NetTopology topology;
    try {
        topology = NetTopology::from_json(c.header.at("topology"));
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::Io, path.string() + ": bad topology: " + e.what());
    }
    const auto shapes = LearnedPrior::parameter_shapes(topology);
    FloatReader reader(c.payload, path);
    std::vector<vecnet::Matrix> params;
    for (const auto& [rows, cols] : shapes) {
        vecnet::Matrix m(rows, cols);
        for (Eigen::Index r = 0; r < rows; ++r)
            for (Eigen::Index k = 0; k < cols; ++k) m(r, k) = reader.next();
        params.push_back(std::move(m));
    }
    reader.expect_end();
    return std::make_unique<LearnedPrior>(std::move(topology), std::move(params));
}

void save_library(const std::filesystem::path& path, const LatentLibrary& library) {
    nlohmann::json header;
    header["section"] = "LIBRARY";
    header["count"] = library.size();
    const Eigen::Index k = library.empty() ? 0 : library.entries.front().code.theta_r.rows();
    const Eigen::Index ni = library.empty() ? 0 : library.entries.front().code.theta_inv.size();
    header["theta_r_channels"] = k;
    header["theta_inv_dim"] = ni;
    nlohmann::json shapes = nlohmann::json::array();
    std::string payload;
    for (const auto& e : library.entries) {
        if (e.code.theta_r.rows() != k || e.code.theta_inv.size() != ni) {
            throw Error(ErrorCode::ShapeMismatch, "library entries have inconsistent code sizes");
        }
        for (Eigen::Index r = 0; r < k; ++r)
            for (int c = 0; c < 3; ++c) put_f32(payload, e.code.theta_r(r, c));
        for (Eigen::Index i = 0; i < ni; ++i) put_f32(payload, e.code.theta_inv(i));
        for (int c = 0; c < 3; ++c) put_f32(payload, e.code.theta_c(c));
        put_f32(payload, e.code.theta_s);
        shapes.push_back(e.shape);
    }
    header["shapes"] = shapes;
    write_file_atomic(path, make_container(header, payload));
}

LatentLibrary load_library(const std::filesystem::path& path) {
    const Container c = parse_container(path);
    if (c.header.value("section", "") != "LIBRARY") {
        throw Error(ErrorCode::Io, path.string() + ": not a latent library");
    }
    LatentLibrary lib;
    try {
        const auto count = c.header.at("count").get<std::size_t>();
        const auto k = c.header.at("theta_r_channels").get<Eigen::Index>();
        const auto ni = c.header.at("theta_inv_dim").get<Eigen::Index>();
        const auto& shapes = c.header.at("shapes");
        FloatReader reader(c.payload, path);
        for (std::size_t n = 0; n < count; ++n) {
            LatentLibrary::Entry e;
            e.code.theta_r.resize(k, 3);
            for (Eigen::Index r = 0; r < k; ++r)
                for (int col = 0; col < 3; ++col) e.code.theta_r(r, col) = reader.next();
            e.code.theta_inv.resize(ni);
            for (Eigen::Index i = 0; i < ni; ++i) e.code.theta_inv(i) = reader.next();
            for (int col = 0; col < 3; ++col) e.code.theta_c(col) = reader.next();
            e.code.theta_s = reader.next();
            e.shape = n < shapes.size() ? shapes.at(n) : nlohmann::json();
            lib.entries.push_back(std::move(e));
        }
        reader.expect_end();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::Io, path.string() + ": bad library header: " + e.what());
    }
    return lib;
}

nlohmann::json inspect_container(const std::filesystem::path& path) {
    Container c = parse_container(path);
    nlohmann::json out = std::move(c.header);
    out["payload_bytes"] = c.payload.size();
    return out;
}

std::unique_ptr<PriorModel> load_prior(const std::string& spec) {
    if (spec == "oracle:sphere") return std::make_unique<SphereOracle>();
    if (spec.rfind("oracle:", 0) == 0) throw Error(ErrorCode::Config, "unknown oracle prior '" + spec + "'");
    if (!std::filesystem::exists(spec)) throw Error(ErrorCode::Io, "prior checkpoint not found: " + spec);
    return load_checkpoint(spec);
}

}  // namespace efem
