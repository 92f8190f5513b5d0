#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>

#include <Eigen/Dense>

#include "efem/geometry.hpp"
#include "efem/sampling.hpp"

namespace efem::test {

inline Sim3 random_sim3(Rng& rng, double s_lo = 0.25, double s_hi = 4.0) {
    Sim3 g;
    g.scale = std::exp(uniform(rng, std::log(s_lo), std::log(s_hi)));
    g.rotation = random_rotation(rng);
    g.translation = Vec3(uniform(rng, -2, 2), uniform(rng, -2, 2), uniform(rng, -2, 2));
    return g;
}

inline Vec3 random_point(Rng& rng, double extent = 1.0) {
    return Vec3(uniform(rng, -extent, extent), uniform(rng, -extent, extent), uniform(rng, -extent, extent));
}

struct GradStats {
    int probed = 0;
    int passed = 0;
    double worst = 0.0;
    double fraction() const { return probed ? static_cast<double>(passed) / probed : 1.0; }
};

// Central differences of `loss` (which reads `x`) at up to `probes` random
// coordinates of `x`, compared with `analytic`. A coordinate passes when the
// relative error is below `tol` or both values are below 1e-7 apart.
template <class Loss>
GradStats gradcheck(Eigen::MatrixXd& x, const Eigen::MatrixXd& analytic, Loss&& loss, Rng& rng, int probes,
                    double h = 1e-4, double tol = 1e-3) {
    GradStats st;
    const Eigen::Index n = x.size();
    std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
    const int count = static_cast<int>(std::min<Eigen::Index>(probes, n));
    for (int p = 0; p < count; ++p) {
        const Eigen::Index i = count == n ? p : pick(rng);
        const double saved = x.data()[i];
        x.data()[i] = saved + h;
        const double up = loss();
        x.data()[i] = saved - h;
        const double down = loss();
        x.data()[i] = saved;
        const double numeric = (up - down) / (2 * h);
        const double a = analytic.data()[i];
        const double err = std::abs(a - numeric);
        const double rel = err / std::max({std::abs(a), std::abs(numeric), 1e-300});
        ++st.probed;
        if (rel < tol || err < 1e-7) ++st.passed;
        st.worst = std::max(st.worst, err < 1e-7 ? 0.0 : rel);
    }
    return st;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / ("efem_" + tag + "_" + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

}  // namespace efem::test
