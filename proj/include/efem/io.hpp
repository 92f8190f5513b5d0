#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "efem/geometry.hpp"

namespace efem {

enum class PlyFormat { BinaryLittleEndian, Ascii };

struct PlyPoints {
    std::vector<Vec3> positions;
    std::vector<Vec3> normals;  // empty when the file carries no nx/ny/nz
};

/// Reads the `vertex` element of a PLY file (ascii or binary_little_endian).
/// Only x, y, z and nx, ny, nz are kept; other properties are skipped.
PlyPoints read_ply_points(const std::filesystem::path& path);

/// Like read_ply_points but requires normals (throws MissingNormals) and
/// re-normalizes them to unit length.
ScenePointCloud read_ply(const std::filesystem::path& path);

/// Writes x, y, z, nx, ny, nz as 32-bit floats.
void write_ply(const std::filesystem::path& path, const ScenePointCloud& cloud,
               PlyFormat format = PlyFormat::BinaryLittleEndian);

/// Writes v / vn / f records; face indices are 1-based with matching normals.
void write_obj(const std::filesystem::path& path, const TriangleMesh& mesh);

/// Writes `contents` to a temporary sibling and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

std::string read_file(const std::filesystem::path& path);

}  // namespace efem
