#include "efem/vecnet.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "efem/error.hpp"

namespace efem::vecnet {

namespace {

void require(bool ok, const std::string& what) {
    if (!ok) throw Error(ErrorCode::ShapeMismatch, what);
}

constexpr double kDirectionEps2 = 1e-24;  // (1e-12)^2

double softplus(double z, double beta) {
    const double bz = beta * z;
    if (bz > 30.0) return z;
    return std::log1p(std::exp(bz)) / beta;
}

double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

}  // namespace

VecFeature rotate(const VecFeature& f, const Eigen::Matrix3d& r) {
    require(f.cols() % 3 == 0, "rotate: feature width must be a multiple of 3");
    VecFeature out(f.rows(), f.cols());
    for (Eigen::Index n = 0; n < batch_points(f); ++n) {
        out.middleCols(3 * n, 3).noalias() = f.middleCols(3 * n, 3) * r;
    }
    return out;
}

VecFeature vn_linear(const Matrix& weight, const VecFeature& f) {
    require(weight.cols() == f.rows(), "vn_linear: weight has " + std::to_string(weight.cols()) +
                                           " input channels, feature has " + std::to_string(f.rows()));
    require(f.cols() % 3 == 0, "vn_linear: feature width must be a multiple of 3");
    return weight * f;
}

VecFeature vn_nonlinear(const VecFeature& f, const Matrix& direction_weight) {
    require(direction_weight.cols() == f.rows() && direction_weight.rows() == f.rows(),
            "vn_nonlinear: direction weights must be C x C");
    require(f.cols() % 3 == 0, "vn_nonlinear: feature width must be a multiple of 3");
    const Matrix d = direction_weight * f;
    VecFeature out = f;
    const Eigen::Index channels = f.rows();
    for (Eigen::Index n = 0; n < batch_points(f); ++n) {
        const Eigen::Index c0 = 3 * n;
        for (Eigen::Index c = 0; c < channels; ++c) {
            const double qx = f(c, c0), qy = f(c, c0 + 1), qz = f(c, c0 + 2);
            const double dx = d(c, c0), dy = d(c, c0 + 1), dz = d(c, c0 + 2);
            const double dot = qx * dx + qy * dy + qz * dz;
            const double dd = dx * dx + dy * dy + dz * dz;
            if (dot >= 0.0 || dd < kDirectionEps2) continue;
            const double k = dot / dd;
            out(c, c0) = qx - k * dx;
            out(c, c0 + 1) = qy - k * dy;
            out(c, c0 + 2) = qz - k * dz;
        }
    }
    return out;
}

NormalizedFeature channel_normalize(const VecFeature& f) {
    require(f.cols() == 3, "channel_normalize expects a single C x 3 feature");
    require(f.rows() > 0, "channel_normalize: no channels");
    double total = 0.0;
    bool any = false;
    for (Eigen::Index c = 0; c < f.rows(); ++c) {
        const double n = f.row(c).norm();
        total += n;
        any = any || n > 1e-12;
    }
    if (!any) throw Error(ErrorCode::DegenerateFeature, "channel_normalize: all channels are zero");
    NormalizedFeature out;
    out.scale = total / static_cast<double>(f.rows());
    out.feature = f / out.scale;
    return out;
}

VecFeature vn_max_pool(const VecFeature& batch, const Matrix& direction_weight,
                       std::vector<Eigen::Index>* selected) {
    require(batch.cols() % 3 == 0 && batch.cols() > 0, "vn_max_pool: empty or malformed batch");
    require(direction_weight.rows() == batch.rows() && direction_weight.cols() == batch.rows(),
            "vn_max_pool: direction weights must be C x C");
    const Matrix k = direction_weight * batch;
    const Eigen::Index channels = batch.rows();
    std::vector<Eigen::Index> best(static_cast<std::size_t>(channels), 0);
    std::vector<double> best_score(static_cast<std::size_t>(channels),
                                   -std::numeric_limits<double>::infinity());
    for (Eigen::Index n = 0; n < batch_points(batch); ++n) {
        const Eigen::Index c0 = 3 * n;
        for (Eigen::Index c = 0; c < channels; ++c) {
            const double score = batch(c, c0) * k(c, c0) + batch(c, c0 + 1) * k(c, c0 + 1) +
                                 batch(c, c0 + 2) * k(c, c0 + 2);
            auto& bs = best_score[static_cast<std::size_t>(c)];
            if (score > bs) {
                bs = score;
                best[static_cast<std::size_t>(c)] = n;
            }
        }
    }
    VecFeature out(channels, 3);
    for (Eigen::Index c = 0; c < channels; ++c) {
        out.row(c) = batch.block(c, 3 * best[static_cast<std::size_t>(c)], 1, 3);
    }
    if (selected) *selected = std::move(best);
    return out;
}

VecFeature vn_max_pool_backward(const MaxPoolRecord& record, const VecFeature& grad_out) {
    require(grad_out.cols() == 3 && static_cast<std::size_t>(grad_out.rows()) == record.selected.size(),
            "vn_max_pool_backward: gradient shape mismatch");
    VecFeature out = VecFeature::Zero(grad_out.rows(), 3 * record.points);
    for (Eigen::Index c = 0; c < grad_out.rows(); ++c) {
        out.block(c, 3 * record.selected[static_cast<std::size_t>(c)], 1, 3) = grad_out.row(c);
    }
    return out;
}

Vector invariant_head(const VecFeature& a, const VecFeature& b) {
    require(a.cols() == 3 && b.cols() == 3, "invariant_head expects C x 3 features");
    const Matrix g = a * b.transpose();  // Ca x Cb
    Vector out(g.size());
    for (Eigen::Index i = 0; i < g.rows(); ++i)
        for (Eigen::Index j = 0; j < g.cols(); ++j) out[i * g.cols() + j] = g(i, j);
    return out;
}

Matrix scalar_mlp(const Matrix& x, const MlpParams& params, Tape* tape) {
    require(!params.weights.empty() && params.weights.size() == params.biases.size(),
            "scalar_mlp: malformed parameters");
    require(x.rows() == params.input_width(), "scalar_mlp: input width " + std::to_string(x.rows()) +
                                                  " != " + std::to_string(params.input_width()));
    Matrix h = x;
    const std::size_t layers = params.weights.size();
    for (std::size_t l = 0; l < layers; ++l) {
        const Matrix& w = params.weights[l];
        require(w.cols() == h.rows() && params.biases[l].rows() == w.rows() && params.biases[l].cols() == 1,
                "scalar_mlp: layer " + std::to_string(l) + " shape mismatch");
        if (tape) tape->push(AffineRecord{h});
        Matrix z = w * h;
        z.colwise() += params.biases[l].col(0);
        if (l + 1 == layers) return z;
        if (tape) tape->push(SoftplusRecord{z});
        h = z.unaryExpr([beta = params.beta](double v) { return softplus(v, beta); });
    }
    return h;
}

LinearGrad vn_linear_backward(const Matrix& weight, const VecFeature& input, const VecFeature& grad_out) {
    require(grad_out.rows() == weight.rows() && grad_out.cols() == input.cols() &&
                input.rows() == weight.cols(),
            "vn_linear_backward: shape mismatch");
    return {grad_out * input.transpose(), weight.transpose() * grad_out};
}

NonlinearGrad vn_nonlinear_backward(const VecFeature& input, const Matrix& direction_weight,
                                    const VecFeature& grad_out) {
    require(grad_out.rows() == input.rows() && grad_out.cols() == input.cols(),
            "vn_nonlinear_backward: gradient shape mismatch");
    require(direction_weight.rows() == input.rows() && direction_weight.cols() == input.rows(),
            "vn_nonlinear_backward: direction weights must be C x C");
    const Matrix d = direction_weight * input;
    VecFeature grad_q = grad_out;
    Matrix grad_d = Matrix::Zero(input.rows(), input.cols());
    for (Eigen::Index n = 0; n < batch_points(input); ++n) {
        const Eigen::Index c0 = 3 * n;
        for (Eigen::Index c = 0; c < input.rows(); ++c) {
            const Eigen::Vector3d q(input(c, c0), input(c, c0 + 1), input(c, c0 + 2));
            const Eigen::Vector3d dv(d(c, c0), d(c, c0 + 1), d(c, c0 + 2));
            const double dot = q.dot(dv);
            const double dd = dv.squaredNorm();
            if (dot >= 0.0 || dd < kDirectionEps2) continue;
            const Eigen::Vector3d g(grad_out(c, c0), grad_out(c, c0 + 1), grad_out(c, c0 + 2));
            const double gd = g.dot(dv);
            // out = q - (q.d / d.d) d
            const Eigen::Vector3d gq = g - (gd / dd) * dv;
            const Eigen::Vector3d gdir = -(gd * q + dot * g) / dd + (2.0 * dot * gd / (dd * dd)) * dv;
            for (int a = 0; a < 3; ++a) {
                grad_q(c, c0 + a) = gq[a];
                grad_d(c, c0 + a) = gdir[a];
            }
        }
    }
    NonlinearGrad out;
    out.direction_weight = grad_d * input.transpose();
    out.input = grad_q;
    out.input.noalias() += direction_weight.transpose() * grad_d;
    return out;
}

VecFeature channel_normalize_backward(const VecFeature& input, const NormalizedFeature& forward,
                                      const VecFeature& grad_feature, double grad_scale) {
    require(input.cols() == 3 && grad_feature.rows() == input.rows() && grad_feature.cols() == 3,
            "channel_normalize_backward: shape mismatch");
    const double s = forward.scale;
    // d/dF of F/s with s = mean_c |F_c|.
    const double total_scale_grad = grad_scale - (grad_feature.cwiseProduct(input)).sum() / (s * s);
    VecFeature out = grad_feature / s;
    const double inv_c = 1.0 / static_cast<double>(input.rows());
    for (Eigen::Index c = 0; c < input.rows(); ++c) {
        const double n = input.row(c).norm();
        if (n > 0.0) out.row(c) += total_scale_grad * inv_c * input.row(c) / n;
    }
    return out;
}

InvariantGrad invariant_head_backward(const VecFeature& a, const VecFeature& b, const Vector& grad_out) {
    require(grad_out.size() == a.rows() * b.rows(), "invariant_head_backward: gradient size mismatch");
    Matrix g(a.rows(), b.rows());
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = 0; j < b.rows(); ++j) g(i, j) = grad_out[i * b.rows() + j];
    return {g * b, g.transpose() * a};
}

MlpGrad scalar_mlp_backward(Tape& tape, const MlpParams& params, const Matrix& grad_out,
                            bool param_grads) {
    const std::size_t layers = params.weights.size();
    MlpGrad out;
    out.weights.resize(layers);
    out.biases.resize(layers);
    Matrix g = grad_out;
    for (std::size_t k = layers; k-- > 0;) {
        if (k + 1 < layers) {
            const SoftplusRecord sp = tape.pop<SoftplusRecord>();
            require(sp.preactivation.rows() == g.rows() && sp.preactivation.cols() == g.cols(),
                    "scalar_mlp_backward: tape does not match gradient shape");
            const double beta = params.beta;
            g = g.cwiseProduct(sp.preactivation.unaryExpr([beta](double z) { return sigmoid(beta * z); }));
        }
        const AffineRecord af = tape.pop<AffineRecord>();
        require(af.input.rows() == params.weights[k].cols() && g.rows() == params.weights[k].rows() &&
                    af.input.cols() == g.cols(),
                "scalar_mlp_backward: tape does not match parameters");
        if (param_grads) {
            out.weights[k] = g * af.input.transpose();
            out.biases[k] = g.rowwise().sum();
        }
        g = params.weights[k].transpose() * g;
    }
    out.input = std::move(g);
    return out;
}

void Tape::finish() {
    if (consumed_) throw_consumed();
    if (!records_.empty()) throw_mismatch(std::to_string(records_.size()) + " unconsumed records");
    consumed_ = true;
}

void Tape::expect_graph(std::uint64_t graph_id) const {
    if (graph_id != graph_id_) throw_mismatch("tape was recorded by a different network");
}

void Tape::throw_mismatch(const std::string& why) {
    throw Error(ErrorCode::TapeMismatch, "tape/graph mismatch: " + why);
}

void Tape::throw_consumed() {
    throw Error(ErrorCode::TapeMismatch, "tape already consumed by a backward pass");
}

Matrix kaiming(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
    const double sigma = std::sqrt(2.0 / static_cast<double>(cols));
    Matrix m(rows, cols);
    // Fill row by row so the draw order is independent of storage order.
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = gaussian(rng, sigma);
    return m;
}

MlpParams make_mlp(std::span<const int> widths, double beta, Rng& rng) {
    if (widths.size() < 2) throw Error(ErrorCode::InvalidArgument, "make_mlp needs at least two widths");
    MlpParams p;
    p.beta = beta;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
        p.weights.push_back(kaiming(widths[l + 1], widths[l], rng));
        p.biases.push_back(Matrix::Zero(widths[l + 1], 1));
    }
    return p;
}

void adam_step(std::span<Matrix* const> params, std::span<const Matrix> grads, AdamState& state,
               const AdamConfig& config) {
    require(params.size() == grads.size(), "adam_step: parameter/gradient count mismatch");
    if (state.m.empty()) {
        for (const Matrix* p : params) {
            state.m.push_back(Matrix::Zero(p->rows(), p->cols()));
            state.v.push_back(Matrix::Zero(p->rows(), p->cols()));
        }
    }
    require(state.m.size() == params.size(), "adam_step: optimizer state does not match parameters");
    ++state.step;
    const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Matrix& p = *params[i];
        const Matrix& g = grads[i];
        require(g.rows() == p.rows() && g.cols() == p.cols(), "adam_step: gradient shape mismatch");
        state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
        state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g.cwiseProduct(g);
        p.array() -= config.lr * (state.m[i].array() / bc1) /
                     ((state.v[i].array() / bc2).sqrt() + config.eps);
    }
}

}  // namespace efem::vecnet
