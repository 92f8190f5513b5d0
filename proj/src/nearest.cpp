#include "efem/nearest.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "efem/error.hpp"

namespace efem {

namespace {

constexpr long kMaxCellsPerAxis = 256;

}  // namespace

PointIndex::PointIndex(std::span<const Vec3> points, double cell_size)
    : points_(points.begin(), points.end()) {
    if (points_.empty()) {
        throw Error(ErrorCode::EmptyCloud, "cannot index an empty point set");
    }
    const Box box = bounding_box(points_);
    const Vec3 ext = box.extent();
    const double max_ext = std::max(ext.maxCoeff(), 1e-9);
    if (cell_size <= 0.0) {
        // Scene points live on surfaces, so aim for ~N^(1/2) cells per face.
        const double per_axis = std::max(1.0, std::sqrt(static_cast<double>(points_.size()) / 4.0));
        cell_size = max_ext / per_axis;
    }
    cell_ = std::max(cell_size, max_ext / static_cast<double>(kMaxCellsPerAxis));
    origin_ = box.lo;
    for (int a = 0; a < 3; ++a) {
        dims_[a] = std::clamp(static_cast<long>(std::floor(ext[a] / cell_)) + 1, 1L, kMaxCellsPerAxis + 1);
    }

    const std::size_t ncells = static_cast<std::size_t>(dims_[0] * dims_[1] * dims_[2]);
    std::vector<std::size_t> cell_of(points_.size());
    start_.assign(ncells + 1, 0);
    for (std::size_t i = 0; i < points_.size(); ++i) {
        std::array<long, 3> c{};
        for (int a = 0; a < 3; ++a) {
            c[a] = std::clamp(static_cast<long>(std::floor((points_[i][a] - origin_[a]) / cell_)), 0L,
                              dims_[a] - 1);
        }
        cell_of[i] = cell_id(c[0], c[1], c[2]);
        ++start_[cell_of[i] + 1];
    }
    for (std::size_t c = 0; c < ncells; ++c) start_[c + 1] += start_[c];
    order_.resize(points_.size());
    std::vector<std::size_t> fill(start_.begin(), start_.end() - 1);
    // Ascending i keeps each cell's list sorted by index.
    for (std::size_t i = 0; i < points_.size(); ++i) order_[fill[cell_of[i]]++] = i;
}

Neighbor PointIndex::nearest(const Vec3& query) const {
    std::array<long, 3> c{};
    for (int a = 0; a < 3; ++a) {
        const double f = std::floor((query[a] - origin_[a]) / cell_);
        c[a] = static_cast<long>(std::clamp(f, -1e9, 1e9));
    }
    // First ring that can intersect the grid.
    long k0 = 0;
    long kmax = 0;
    for (int a = 0; a < 3; ++a) {
        k0 = std::max(k0, std::max(-c[a], c[a] - (dims_[a] - 1)));
        kmax = std::max(kmax, std::max(c[a], dims_[a] - 1 - c[a]));
    }

    double best_d2 = std::numeric_limits<double>::infinity();
    std::size_t best = 0;
    auto visit = [&](long x, long y, long z) {
        const std::size_t id = cell_id(x, y, z);
        for (std::size_t j = start_[id]; j < start_[id + 1]; ++j) {
            const std::size_t i = order_[j];
            const double d2 = (points_[i] - query).squaredNorm();
            if (d2 < best_d2 || (d2 == best_d2 && i < best)) {
                best_d2 = d2;
                best = i;
            }
        }
    };

    for (long k = k0; k <= kmax; ++k) {
        const long xlo = std::max(c[0] - k, 0L), xhi = std::min(c[0] + k, dims_[0] - 1);
        const long ylo = std::max(c[1] - k, 0L), yhi = std::min(c[1] + k, dims_[1] - 1);
        const long zlo = std::max(c[2] - k, 0L), zhi = std::min(c[2] + k, dims_[2] - 1);
        for (long z = zlo; z <= zhi; ++z) {
            const bool zface = (z == c[2] - k || z == c[2] + k);
            for (long y = ylo; y <= yhi; ++y) {
                const bool yface = zface || (y == c[1] - k || y == c[1] + k);
                if (yface) {
                    for (long x = xlo; x <= xhi; ++x) visit(x, y, z);
                } else {
                    if (c[0] - k >= 0 && c[0] - k < dims_[0]) visit(c[0] - k, y, z);
                    if (k > 0 && c[0] + k >= 0 && c[0] + k < dims_[0]) visit(c[0] + k, y, z);
                }
            }
        }
        // Everything outside the examined cube is at least this far away.
        double bound = std::numeric_limits<double>::infinity();
        for (int a = 0; a < 3; ++a) {
            const double lo = origin_[a] + static_cast<double>(c[a] - k) * cell_;
            const double hi = origin_[a] + static_cast<double>(c[a] + k + 1) * cell_;
            bound = std::min(bound, std::min(query[a] - lo, hi - query[a]));
        }
        if (best_d2 < std::numeric_limits<double>::infinity() && bound > 0.0 &&
            best_d2 < bound * bound) {
            break;
        }
    }
    return {best, std::sqrt(best_d2)};
}

Neighbor nearest_neighbor(const Vec3& query, const ScenePointCloud& cloud) {
    if (cloud.positions.empty()) {
        throw Error(ErrorCode::EmptyCloud, "nearest_neighbor on an empty cloud");
    }
    return PointIndex(cloud.positions).nearest(query);
}

}  // namespace efem
