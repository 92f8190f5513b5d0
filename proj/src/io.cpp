#include "efem/io.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "efem/error.hpp"

namespace efem {

namespace {

static_assert(std::endian::native == std::endian::little, "PLY I/O assumes a little-endian host");

struct PlyProperty {
    std::string name;
    std::string type;
    bool is_list = false;
    std::string count_type;
};

struct PlyElement {
    std::string name;
    std::size_t count = 0;
    std::vector<PlyProperty> properties;
};

std::size_t type_size(const std::string& t) {
    if (t == "char" || t == "uchar" || t == "int8" || t == "uint8") return 1;
    if (t == "short" || t == "ushort" || t == "int16" || t == "uint16") return 2;
    if (t == "int" || t == "uint" || t == "float" || t == "int32" || t == "uint32" || t == "float32")
        return 4;
    if (t == "double" || t == "float64") return 8;
    throw Error(ErrorCode::Io, "unsupported PLY property type '" + t + "'");
}

double read_binary_value(const char* p, const std::string& t) {
    auto load = [p](auto v) {
        std::memcpy(&v, p, sizeof(v));
        return static_cast<double>(v);
    };
    if (t == "char" || t == "int8") return load(std::int8_t{});
    if (t == "uchar" || t == "uint8") return load(std::uint8_t{});
    if (t == "short" || t == "int16") return load(std::int16_t{});
    if (t == "ushort" || t == "uint16") return load(std::uint16_t{});
    if (t == "int" || t == "int32") return load(std::int32_t{});
    if (t == "uint" || t == "uint32") return load(std::uint32_t{});
    if (t == "float" || t == "float32") return load(float{});
    return load(double{});
}

int field_slot(const std::string& name) {
    static const std::array<const char*, 6> names = {"x", "y", "z", "nx", "ny", "nz"};
    for (int i = 0; i < 6; ++i) {
        if (name == names[static_cast<std::size_t>(i)]) return i;
    }
    return -1;
}

}  // namespace

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

PlyPoints read_ply_points(const std::filesystem::path& path) {
    const std::string data = read_file(path);
    std::size_t pos = 0;
    auto next_line = [&]() -> std::string {
        const std::size_t end = data.find('\n', pos);
        if (end == std::string::npos) throw Error(ErrorCode::Io, "truncated PLY header in " + path.string());
        std::string line = data.substr(pos, end - pos);
        pos = end + 1;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        return line;
    };

    if (next_line() != "ply") throw Error(ErrorCode::Io, path.string() + " is not a PLY file");
    std::string format;
    std::vector<PlyElement> elements;
    for (;;) {
        const std::string line = next_line();
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "end_header") break;
        if (key == "format") {
            ls >> format;
        } else if (key == "element") {
            PlyElement e;
            ls >> e.name >> e.count;
            elements.push_back(e);
        } else if (key == "property") {
            if (elements.empty()) throw Error(ErrorCode::Io, "PLY property before element");
            PlyProperty p;
            std::string t;
            ls >> t;
            if (t == "list") {
                p.is_list = true;
                ls >> p.count_type >> p.type >> p.name;
            } else {
                p.type = t;
                ls >> p.name;
            }
            elements.back().properties.push_back(p);
        }
    }
    if (format != "ascii" && format != "binary_little_endian") {
        throw Error(ErrorCode::Io, "unsupported PLY format '" + format + "'");
    }
    const bool ascii = format == "ascii";

    PlyPoints out;
    std::istringstream text(ascii ? data.substr(pos) : std::string());
    for (const auto& e : elements) {
        const bool is_vertex = e.name == "vertex";
        std::array<bool, 6> present{};
        if (is_vertex) {
            for (std::size_t k = 0; k < e.properties.size(); ++k) {
                const int s = e.properties[k].is_list ? -1 : field_slot(e.properties[k].name);
                if (s >= 0) present[static_cast<std::size_t>(s)] = true;
            }
            if (!present[0] || !present[1] || !present[2]) {
                throw Error(ErrorCode::Io, "PLY vertex element lacks x/y/z");
            }
            out.positions.reserve(e.count);
        }
        const bool has_normals = is_vertex && present[3] && present[4] && present[5];
        for (std::size_t r = 0; r < e.count; ++r) {
            std::array<double, 6> v{};
            for (std::size_t k = 0; k < e.properties.size(); ++k) {
                const auto& p = e.properties[k];
                if (p.is_list) {
                    std::size_t n = 0;
                    if (ascii) {
                        double c = 0;
                        text >> c;
                        n = static_cast<std::size_t>(c);
                        for (std::size_t q = 0; q < n; ++q) text >> c;
                    } else {
                        const std::size_t cs = type_size(p.count_type);
                        if (pos + cs > data.size()) throw Error(ErrorCode::Io, "truncated PLY body");
                        n = static_cast<std::size_t>(read_binary_value(data.data() + pos, p.count_type));
                        pos += cs + n * type_size(p.type);
                    }
                    continue;
                }
                double value = 0.0;
                if (ascii) {
                    if (!(text >> value)) throw Error(ErrorCode::Io, "truncated PLY body");
                } else {
                    const std::size_t sz = type_size(p.type);
                    if (pos + sz > data.size()) throw Error(ErrorCode::Io, "truncated PLY body");
                    value = read_binary_value(data.data() + pos, p.type);
                    pos += sz;
                }
                if (is_vertex) {
                    const int s = field_slot(p.name);
                    if (s >= 0) v[static_cast<std::size_t>(s)] = value;
                }
            }
            if (is_vertex) {
                out.positions.emplace_back(v[0], v[1], v[2]);
                if (has_normals) out.normals.emplace_back(v[3], v[4], v[5]);
            }
        }
        if (is_vertex) break;
    }
    return out;
}

ScenePointCloud read_ply(const std::filesystem::path& path) {
    PlyPoints pts = read_ply_points(path);
    if (pts.positions.empty()) throw Error(ErrorCode::EmptyCloud, path.string() + " has no points");
    if (pts.normals.size() != pts.positions.size()) {
        throw Error(ErrorCode::MissingNormals,
                    path.string() + ": positions and normals (nx, ny, nz) are both required");
    }
    ScenePointCloud cloud;
    cloud.positions = std::move(pts.positions);
    cloud.normals.reserve(pts.normals.size());
    for (std::size_t i = 0; i < pts.normals.size(); ++i) {
        const double n = pts.normals[i].norm();
        if (!(n > 1e-12)) {
            throw Error(ErrorCode::InvalidArgument,
                        path.string() + ": zero normal at vertex " + std::to_string(i));
        }
        cloud.normals.push_back(pts.normals[i] / n);
    }
    cloud.validate();
    return cloud;
}

void write_ply(const std::filesystem::path& path, const ScenePointCloud& cloud, PlyFormat format) {
    std::ostringstream out;
    out << "ply\n"
        << "format " << (format == PlyFormat::Ascii ? "ascii" : "binary_little_endian") << " 1.0\n"
        << "element vertex " << cloud.positions.size() << "\n"
        << "property float x\nproperty float y\nproperty float z\n"
        << "property float nx\nproperty float ny\nproperty float nz\n"
        << "end_header\n";
    const bool normals = cloud.normals.size() == cloud.positions.size();
    for (std::size_t i = 0; i < cloud.positions.size(); ++i) {
        std::array<float, 6> v{};
        for (int a = 0; a < 3; ++a) {
            v[static_cast<std::size_t>(a)] = static_cast<float>(cloud.positions[i][a]);
            v[static_cast<std::size_t>(a + 3)] = normals ? static_cast<float>(cloud.normals[i][a]) : 0.0f;
        }
        if (format == PlyFormat::Ascii) {
            out << std::setprecision(9);
            for (std::size_t a = 0; a < 6; ++a) out << v[a] << (a == 5 ? '\n' : ' ');
        } else {
            out.write(reinterpret_cast<const char*>(v.data()), sizeof(v));
        }
    }
    write_file_atomic(path, out.str());
}

void write_obj(const std::filesystem::path& path, const TriangleMesh& mesh) {
    std::ostringstream out;
    out << std::setprecision(9);
    for (const auto& v : mesh.vertices) out << "v " << v.x() << ' ' << v.y() << ' ' << v.z() << '\n';
    for (const auto& n : mesh.vertex_normals) out << "vn " << n.x() << ' ' << n.y() << ' ' << n.z() << '\n';
    for (const auto& t : mesh.triangles) {
        out << "f";
        for (auto i : t) out << ' ' << i + 1 << "//" << i + 1;
        out << '\n';
    }
    write_file_atomic(path, out.str());
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error(ErrorCode::Io, "cannot write " + tmp.string());
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        if (!out) throw Error(ErrorCode::Io, "write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace efem
