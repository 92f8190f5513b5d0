#include "efem/marching_cubes.hpp"

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "efem/error.hpp"
#include "marching_cubes_tables.hpp"

namespace efem {

namespace {

constexpr std::array<std::array<int, 3>, 8> kCornerOffset = {{
    {0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0},
    {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1},
}};

constexpr std::array<std::array<int, 2>, 12> kEdgeCorners = {{
    {0, 1}, {1, 2}, {2, 3}, {3, 0},
    {4, 5}, {5, 6}, {6, 7}, {7, 4},
    {0, 4}, {1, 5}, {2, 6}, {3, 7},
}};

}  // namespace

TriangleMesh marching_cubes(const BatchField& field, const Box& domain,
                            std::array<int, 3> resolution) {
    for (int r : resolution) {
        if (r < 2) throw Error(ErrorCode::InvalidArgument, "marching_cubes needs resolution >= 2");
    }
    const long nx = resolution[0], ny = resolution[1], nz = resolution[2];
    Vec3 step;
    for (int a = 0; a < 3; ++a) step[a] = domain.extent()[a] / static_cast<double>(resolution[a] - 1);

    auto sample_pos = [&](long i, long j, long k) {
        return Vec3(domain.lo.x() + static_cast<double>(i) * step.x(),
                    domain.lo.y() + static_cast<double>(j) * step.y(),
                    domain.lo.z() + static_cast<double>(k) * step.z());
    };
    auto sample_id = [&](long i, long j, long k) {
        return static_cast<std::size_t>((k * ny + j) * nx + i);
    };

    const std::size_t nsamples = static_cast<std::size_t>(nx * ny * nz);
    std::vector<Vec3> grid(nsamples);
    for (long k = 0; k < nz; ++k)
        for (long j = 0; j < ny; ++j)
            for (long i = 0; i < nx; ++i) grid[sample_id(i, j, k)] = sample_pos(i, j, k);
    std::vector<double> values(nsamples);
    field(grid, values);
    for (double v : values) {
        if (!std::isfinite(v)) throw Error(ErrorCode::Numeric, "marching_cubes: non-finite field value");
    }

    TriangleMesh mesh;
    // Vertex id per (sample, axis) edge; -1 when not yet created.
    std::vector<std::int32_t> edge_vertex(nsamples * 3, -1);

    auto edge_vertex_id = [&](long i, long j, long k, int axis) -> std::uint32_t {
        const std::size_t key = sample_id(i, j, k) * 3 + static_cast<std::size_t>(axis);
        if (edge_vertex[key] >= 0) return static_cast<std::uint32_t>(edge_vertex[key]);
        long i2 = i, j2 = j, k2 = k;
        (axis == 0 ? i2 : axis == 1 ? j2 : k2) += 1;
        const double va = values[sample_id(i, j, k)];
        const double vb = values[sample_id(i2, j2, k2)];
        const Vec3& pa = grid[sample_id(i, j, k)];
        const Vec3& pb = grid[sample_id(i2, j2, k2)];
        const double t = va / (va - vb);
        mesh.vertices.push_back(pa + t * (pb - pa));
        edge_vertex[key] = static_cast<std::int32_t>(mesh.vertices.size() - 1);
        return static_cast<std::uint32_t>(edge_vertex[key]);
    };

    for (long k = 0; k + 1 < nz; ++k) {
        for (long j = 0; j + 1 < ny; ++j) {
            for (long i = 0; i + 1 < nx; ++i) {
                unsigned cube = 0;
                for (int c = 0; c < 8; ++c) {
                    const auto& o = kCornerOffset[c];
                    if (values[sample_id(i + o[0], j + o[1], k + o[2])] < 0.0) cube |= 1u << c;
                }
                if (detail::kEdgeTable[cube] == 0) continue;
                std::array<std::uint32_t, 12> ids{};
                for (int e = 0; e < 12; ++e) {
                    if (!(detail::kEdgeTable[cube] & (1u << e))) continue;
                    const auto& a = kCornerOffset[kEdgeCorners[e][0]];
                    const auto& b = kCornerOffset[kEdgeCorners[e][1]];
                    int axis = 0;
                    while (a[axis] == b[axis]) ++axis;
                    ids[e] = edge_vertex_id(i + std::min(a[0], b[0]), j + std::min(a[1], b[1]),
                                            k + std::min(a[2], b[2]), axis);
                }
                for (int t = 0; detail::kTriTable[cube][t] != -1; t += 3) {
                    Triangle tri{ids[detail::kTriTable[cube][t]], ids[detail::kTriTable[cube][t + 1]],
                                 ids[detail::kTriTable[cube][t + 2]]};
                    if (tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2]) continue;
                    mesh.triangles.push_back(tri);
                }
            }
        }
    }
    if (mesh.vertices.empty()) return mesh;

    // Central differences at each vertex, evaluated in one batch.
    const double h = 0.1 * step.minCoeff();
    const std::size_t nv = mesh.vertices.size();
    std::vector<Vec3> probes;
    probes.reserve(nv * 6);
    for (const auto& v : mesh.vertices) {
        for (int a = 0; a < 3; ++a) {
            Vec3 d = Vec3::Zero();
            d[a] = h;
            probes.push_back(v + d);
            probes.push_back(v - d);
        }
    }
    std::vector<double> pv(probes.size());
    field(probes, pv);
    mesh.vertex_normals.resize(nv);
    for (std::size_t v = 0; v < nv; ++v) {
        Vec3 g;
        for (int a = 0; a < 3; ++a) g[a] = (pv[v * 6 + 2 * a] - pv[v * 6 + 2 * a + 1]) / (2.0 * h);
        mesh.vertex_normals[v] = safe_normalized(g);
    }
    // Fall back to the area-weighted face normal where the gradient vanishes.
    std::vector<Vec3> face_accum;
    for (std::size_t v = 0; v < nv; ++v) {
        if (mesh.vertex_normals[v].squaredNorm() > 0.0) continue;
        if (face_accum.empty()) {
            face_accum.assign(nv, Vec3::Zero());
            for (const auto& t : mesh.triangles) {
                const Vec3 n = (mesh.vertices[t[1]] - mesh.vertices[t[0]])
                                   .cross(mesh.vertices[t[2]] - mesh.vertices[t[0]]);
                for (auto idx : t) face_accum[idx] += n;
            }
        }
        const Vec3 n = safe_normalized(face_accum[v]);
        mesh.vertex_normals[v] = n.squaredNorm() > 0.0 ? n : Vec3::UnitZ();
    }
    return mesh;
}

TriangleMesh marching_cubes(const PointField& field, const Box& domain, int resolution) {
    BatchField batch = [&field](std::span<const Vec3> pts, std::span<double> out) {
        for (std::size_t i = 0; i < pts.size(); ++i) out[i] = field(pts[i]);
    };
    return marching_cubes(batch, domain, {resolution, resolution, resolution});
}

}  // namespace efem
