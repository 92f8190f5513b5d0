#pragma once

#include <array>
#include <functional>
#include <span>

#include "efem/geometry.hpp"

namespace efem {

/// Evaluates a scalar field at many points at once: out[i] = f(points[i]).
using BatchField = std::function<void(std::span<const Vec3> points, std::span<double> out)>;
using PointField = std::function<double(const Vec3&)>;

/// Extracts the zero level set of `field` sampled on a regular grid spanning
/// `domain` with `resolution[a]` samples along axis a (so cell width is
/// extent / (resolution - 1)). Vertices are shared between neighbouring cells
/// and placed by linear interpolation along grid edges; vertex normals are the
/// normalized central-difference gradient of the field. A field that does not
/// change sign on the grid yields an empty mesh.
TriangleMesh marching_cubes(const BatchField& field, const Box& domain,
                            std::array<int, 3> resolution);

TriangleMesh marching_cubes(const PointField& field, const Box& domain, int resolution);

}  // namespace efem
