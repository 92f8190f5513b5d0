#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "efem/prior.hpp"
#include "efem/vecnet.hpp"

namespace efem {

/// Layer widths of the vector-neuron encoder and the SDF decoder.
struct NetTopology {
    int n_o = 1024;                         // encoder input points
    std::vector<int> hidden = {64, 64, 64, 64};  // VN blocks after the 3-channel lift
    int theta_r_channels = 16;
    int inv_channels = 4;  // theta_inv has inv_channels * theta_r_channels entries
    std::vector<int> decoder_hidden = {64, 64, 64};
    double softplus_beta = 10.0;

    int theta_inv_dim() const { return inv_channels * theta_r_channels; }
    // theta_inv, <theta_R, x~>, |x~|^2
    int decoder_input() const { return theta_inv_dim() + theta_r_channels + 1; }
    void validate() const;

    nlohmann::json to_json() const;
    static NetTopology from_json(const nlohmann::json& j);
};

/// Number of lifted input channels per point: q, M q / r^2, M^2 q / r^4 where
/// M is the second-moment matrix of the centered cloud and r its mean radius.
inline constexpr int kLiftChannels = 3;

/// Gradient of a scalar loss with respect to each latent component.
struct CodeGrad {
    vecnet::Matrix theta_r;
    vecnet::Vector theta_inv;
    Vec3 theta_c = Vec3::Zero();
    double theta_s = 0.0;

    static CodeGrad zeros_like(const LatentCode& code);
    CodeGrad& operator+=(const CodeGrad& o);
};

/// Per-point lift of a centered cloud into kLiftChannels x 3N vector channels.
/// Throws DegenerateFeature when all points coincide.
vecnet::VecFeature lift_points(std::span<const Vec3> centered);

/// Vector-neuron point encoder (Phi) and SDF decoder (Psi).
///
/// Encoder: centroid removal, lift, VN-linear + VN-ReLU blocks, VN max
/// pooling to the global feature F. theta_s = mean channel norm of F; theta_R and
/// the auxiliary invariant channels come from VN-linear heads on F / theta_s;
/// theta_inv holds their inner products with theta_R; theta_c is a
/// one-channel VN-linear head on F plus the centroid.
///
/// Decoder: Psi(theta_inv, theta_R x~, |x~|^2) with x~ = (x - theta_c) / theta_s,
/// returning the SDF in the canonical frame; metric_scale() is theta_s.
class LearnedPrior final : public PriorModel {
public:
    LearnedPrior(NetTopology topology, Rng& init_rng);
    LearnedPrior(NetTopology topology, std::vector<vecnet::Matrix> parameters);

    std::string name() const override { return "learned"; }
    std::size_t input_points() const override { return static_cast<std::size_t>(topology_.n_o); }
    LatentCode encode(std::span<const Vec3> points) const override;
    void decode_batch(std::span<const Vec3> queries, const LatentCode& code, std::span<double> values,
                      std::span<Vec3> gradients) const override;
    double metric_scale(const LatentCode& code) const override { return code.theta_s; }

    using PriorModel::decode;

    const NetTopology& topology() const { return topology_; }

    // Training interface -------------------------------------------------

    /// Encode while recording onto `tape` (which must be fresh).
    LatentCode encode(std::span<const Vec3> points, vecnet::Tape& tape) const;

    /// Canonical SDF at each query (1 x M), recording onto `tape`.
    vecnet::Matrix decode(std::span<const Vec3> queries, const LatentCode& code, vecnet::Tape& tape) const;

    /// Reverses decode(): accumulates parameter gradients into `grads` and
    /// returns the gradient with respect to the code.
    CodeGrad decode_backward(vecnet::Tape& tape, const LatentCode& code, const vecnet::Matrix& grad_sdf,
                             std::vector<vecnet::Matrix>& grads) const;

    /// Reverses encode(): accumulates parameter gradients into `grads`.
    void encode_backward(vecnet::Tape& tape, const CodeGrad& grad, std::vector<vecnet::Matrix>& grads) const;

    vecnet::Tape new_tape() const { return vecnet::Tape(graph_id_); }

    /// Flat parameter list in declared order (encoder blocks, heads, decoder
    /// weight/bias pairs); gradients use the same layout.
    std::vector<vecnet::Matrix> parameters() const;
    std::vector<vecnet::Matrix*> mutable_parameters();
    std::vector<std::string> parameter_names() const;
    std::vector<vecnet::Matrix> zero_grads() const;

    /// Expected shape of every parameter for `topology`.
    static std::vector<std::pair<Eigen::Index, Eigen::Index>> parameter_shapes(const NetTopology& topology);

private:
    // Encoder layout in enc_: per block (linear, direction), then the heads.
    std::size_t block_linear(std::size_t l) const { return 2 * l; }
    std::size_t block_direction(std::size_t l) const { return 2 * l + 1; }
    std::size_t pool_direction() const { return 2 * topology_.hidden.size(); }
    std::size_t head_rot() const { return pool_direction() + 1; }
    std::size_t head_inv() const { return head_rot() + 1; }
    std::size_t head_center() const { return head_rot() + 2; }
    std::size_t decoder_offset() const { return head_rot() + 3; }

    LatentCode encode_impl(std::span<const Vec3> points, vecnet::Tape* tape) const;
    vecnet::Matrix decoder_input(std::span<const Vec3> queries, const LatentCode& code,
                                 vecnet::Matrix& canonical) const;

    NetTopology topology_;
    std::vector<vecnet::Matrix> enc_;
    vecnet::MlpParams dec_;
    std::uint64_t graph_id_;
};

}  // namespace efem
