#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "efem/geometry.hpp"

namespace efem {

struct Neighbor {
    std::size_t index = 0;
    double distance = 0.0;
};

/// Uniform grid over a fixed point set answering exact nearest-neighbor
/// queries. Ties resolve to the smallest point index.
class PointIndex {
public:
    /// `cell_size` <= 0 picks a size giving a few points per occupied cell.
    explicit PointIndex(std::span<const Vec3> points, double cell_size = 0.0);

    Neighbor nearest(const Vec3& query) const;

    std::size_t size() const { return points_.size(); }
    double cell_size() const { return cell_; }

private:
    std::size_t cell_id(long x, long y, long z) const {
        return (static_cast<std::size_t>(z) * dims_[1] + static_cast<std::size_t>(y)) * dims_[0] +
               static_cast<std::size_t>(x);
    }

    std::vector<Vec3> points_;
    Vec3 origin_ = Vec3::Zero();
    double cell_ = 1.0;
    std::array<long, 3> dims_{1, 1, 1};
    // CSR layout: cell c holds order_[start_[c] .. start_[c+1]).
    std::vector<std::size_t> start_;
    std::vector<std::size_t> order_;
};

/// One-off query; throws EmptyCloud when the cloud has no points.
Neighbor nearest_neighbor(const Vec3& query, const ScenePointCloud& cloud);

}  // namespace efem
