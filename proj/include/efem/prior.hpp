#pragma once

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "efem/geometry.hpp"
#include "efem/vecnet.hpp"

namespace efem {

/// Shape embedding (theta_R, theta_inv, theta_c, theta_s).
struct LatentCode {
    vecnet::Matrix theta_r;   // K x 3, rotates with the object
    vecnet::Vector theta_inv;  // SIM(3)-invariant part
    Vec3 theta_c = Vec3::Zero();  // object center, scene units
    double theta_s = 1.0;         // object scale, scene units

    void validate() const;
};

/// g o code = (theta_R R, theta_inv, s theta_c R + t, s theta_s).
LatentCode act(const Sim3& g, const LatentCode& code);

/// Euclidean distance between the invariant parts; 0 when both are empty.
double latent_distance(const LatentCode& a, const LatentCode& b);

/// Encoder/decoder pair with the SIM(3) contract
///   encode(s P R + t) = act(g, encode(P)).
/// Implementations are immutable once constructed and safe to share across threads.
class PriorModel {
public:
    virtual ~PriorModel() = default;

    virtual std::string name() const = 0;

    /// Number of points the encoder expects (N_O).
    virtual std::size_t input_points() const = 0;

    virtual LatentCode encode(std::span<const Vec3> points) const = 0;

    /// Native SDF value at each query; gradients (d value / d x) are written
    /// when `gradients` is non-empty.
    virtual void decode_batch(std::span<const Vec3> queries, const LatentCode& code,
                              std::span<double> values, std::span<Vec3> gradients) const = 0;

    /// Factor turning decode() output into a scene-unit distance.
    virtual double metric_scale(const LatentCode& code) const = 0;

    double decode(const Vec3& x, const LatentCode& code) const;

    /// std::nullopt is the ZERO_GRADIENT signal (norm < 1e-9).
    std::optional<Vec3> decode_gradient(const Vec3& x, const LatentCode& code) const;
};

/// Closed-form sphere prior: center = centroid, radius = mean distance to
/// the centroid. decode() is the metric sphere SDF. theta_R is the identity
/// and theta_inv is empty, so every oracle code shares the same shape class.
class SphereOracle final : public PriorModel {
public:
    explicit SphereOracle(std::size_t input_points = 1024) : input_points_(input_points) {}

    std::string name() const override { return "oracle:sphere"; }
    std::size_t input_points() const override { return input_points_; }
    LatentCode encode(std::span<const Vec3> points) const override;
    void decode_batch(std::span<const Vec3> queries, const LatentCode& code, std::span<double> values,
                      std::span<Vec3> gradients) const override;
    double metric_scale(const LatentCode&) const override { return 1.0; }

    static LatentCode make_code(const Vec3& center, double radius);

private:
    std::size_t input_points_;
};

/// Canonical encodings of known shapes, used for pose registration.
struct LatentLibrary {
    struct Entry {
        LatentCode code;
        nlohmann::json shape;  // generating shape metadata
    };
    std::vector<Entry> entries;

    bool empty() const { return entries.empty(); }
    std::size_t size() const { return entries.size(); }
};

/// "oracle:sphere" or a checkpoint path.
std::unique_ptr<PriorModel> load_prior(const std::string& spec);

}  // namespace efem
