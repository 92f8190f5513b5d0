#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "efem/sampling.hpp"

namespace efem::vecnet {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Vector-channel feature: C rows of 3-vectors (C x 3). A batch of N point
/// features is stored side by side as C x 3N, point n in columns 3n..3n+2.
/// Rotation acts from the right on every 3-column block.
using VecFeature = Matrix;

inline Eigen::Index batch_points(const VecFeature& f) { return f.cols() / 3; }

/// Right-multiplies every 3-column block of `f` by `r`.
VecFeature rotate(const VecFeature& f, const Eigen::Matrix3d& r);

// ---------------------------------------------------------------------------
// Forward kernels

/// out = W F: channel mixing only, so out(F R) = out(F) R.
VecFeature vn_linear(const Matrix& weight, const VecFeature& f);

/// VN-ReLU. Each channel F_c gets a learned direction d_c = (W_d F)_c; when
/// <F_c, d_c> < 0 the component along d_c is removed. Channels whose
/// direction has norm < 1e-12 pass through.
VecFeature vn_nonlinear(const VecFeature& f, const Matrix& direction_weight);

struct NormalizedFeature {
    VecFeature feature;
    double scale = 0.0;
};

/// scale = mean channel norm; feature = F / scale. Throws DegenerateFeature
/// when every channel is numerically zero. Only meaningful for single (C x 3)
/// features.
NormalizedFeature channel_normalize(const VecFeature& f);

/// VN max pooling over a batch (C x 3N -> C x 3). Channel c takes the point
/// feature maximizing <X_nc, (W_p X_n)_c>; ties go to the lowest point index.
/// `selected`, when given, receives the chosen point per channel.
VecFeature vn_max_pool(const VecFeature& batch, const Matrix& direction_weight,
                       std::vector<Eigen::Index>* selected = nullptr);

/// All channel-pair inner products: out[i * Cb + j] = <a_i, b_j>.
Vector invariant_head(const VecFeature& a, const VecFeature& b);

/// Softplus-activated multilayer perceptron. weights[l] is out x in and
/// biases[l] is out x 1; the last layer is affine only.
struct MlpParams {
    std::vector<Matrix> weights;
    std::vector<Matrix> biases;
    double beta = 10.0;

    Eigen::Index input_width() const { return weights.empty() ? 0 : weights.front().cols(); }
    Eigen::Index output_width() const { return weights.empty() ? 0 : weights.back().rows(); }
};

class Tape;

/// x is input_width x batch; returns output_width x batch.
Matrix scalar_mlp(const Matrix& x, const MlpParams& params, Tape* tape = nullptr);

// ---------------------------------------------------------------------------
// Reverse-mode kernels. Each returns gradients of a scalar loss given the
// gradient with respect to the layer output.

struct LinearGrad {
    Matrix weight;
    VecFeature input;
};
LinearGrad vn_linear_backward(const Matrix& weight, const VecFeature& input, const VecFeature& grad_out);

struct NonlinearGrad {
    VecFeature input;
    Matrix direction_weight;
};
NonlinearGrad vn_nonlinear_backward(const VecFeature& input, const Matrix& direction_weight,
                                    const VecFeature& grad_out);

VecFeature channel_normalize_backward(const VecFeature& input, const NormalizedFeature& forward,
                                      const VecFeature& grad_feature, double grad_scale);

struct InvariantGrad {
    VecFeature a;
    VecFeature b;
};
InvariantGrad invariant_head_backward(const VecFeature& a, const VecFeature& b, const Vector& grad_out);

/// Routes the pooled gradient back to the selected point features. The
/// selection is piecewise constant, so the pooling direction gets no gradient.
struct MaxPoolRecord;
VecFeature vn_max_pool_backward(const MaxPoolRecord& record, const VecFeature& grad_out);

struct MlpGrad {
    Matrix input;
    std::vector<Matrix> weights;
    std::vector<Matrix> biases;
};

// ---------------------------------------------------------------------------
// Tape

struct LinearRecord {
    VecFeature input;
};
struct NonlinearRecord {
    VecFeature input;
};
struct NormalizeRecord {
    VecFeature input;
    NormalizedFeature output;
};
struct InvariantRecord {
    VecFeature a;
    VecFeature b;
};
struct AffineRecord {
    Matrix input;
};
struct SoftplusRecord {
    Matrix preactivation;
};
struct MaxPoolRecord {
    std::vector<Eigen::Index> selected;
    Eigen::Index points = 0;
};

/// Forward intermediates, popped in reverse order by the matching backward.
/// A tape serves one backward pass; reusing it throws TapeMismatch.
class Tape {
public:
    using Record = std::variant<LinearRecord, NonlinearRecord, NormalizeRecord, InvariantRecord,
                                AffineRecord, SoftplusRecord, MaxPoolRecord>;

    explicit Tape(std::uint64_t graph_id = 0) : graph_id_(graph_id) {}

    std::uint64_t graph_id() const { return graph_id_; }
    bool consumed() const { return consumed_; }
    std::size_t size() const { return records_.size(); }

    template <class R>
    void push(R record) {
        if (consumed_) throw_consumed();
        records_.emplace_back(std::move(record));
    }

    template <class R>
    R pop() {
        if (consumed_) throw_consumed();
        if (records_.empty()) throw_mismatch("tape exhausted");
        R* r = std::get_if<R>(&records_.back());
        if (r == nullptr) throw_mismatch("record type does not match the layer being reversed");
        R out = std::move(*r);
        records_.pop_back();
        return out;
    }

    /// Called by backward once all records are popped.
    void finish();
    /// Throws TapeMismatch unless the tape was recorded by `graph_id`.
    void expect_graph(std::uint64_t graph_id) const;

private:
    [[noreturn]] static void throw_mismatch(const std::string& why);
    [[noreturn]] static void throw_consumed();

    std::uint64_t graph_id_;
    bool consumed_ = false;
    std::vector<Record> records_;
};

/// Pops the records pushed by scalar_mlp and returns the input gradient and,
/// when `param_grads` is set, the parameter gradients.
MlpGrad scalar_mlp_backward(Tape& tape, const MlpParams& params, const Matrix& grad_out,
                            bool param_grads = true);

/// Kaiming fan-in Gaussian initialization: N(0, 2 / cols).
Matrix kaiming(Eigen::Index rows, Eigen::Index cols, Rng& rng);

MlpParams make_mlp(std::span<const int> widths, double beta, Rng& rng);

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::vector<Matrix> m;
    std::vector<Matrix> v;
    long step = 0;
};

/// One bias-corrected Adam update of `params` in place.
void adam_step(std::span<Matrix* const> params, std::span<const Matrix> grads, AdamState& state,
               const AdamConfig& config);

}  // namespace efem::vecnet
