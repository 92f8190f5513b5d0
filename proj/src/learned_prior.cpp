#include "efem/learned_prior.hpp"

#include <atomic>
#include <cmath>

#include "efem/error.hpp"

namespace efem {

using vecnet::Matrix;
using vecnet::Tape;
using vecnet::Vector;
using vecnet::VecFeature;

namespace {

std::uint64_t next_graph_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1);
}

constexpr Eigen::Index kDecodeChunk = 4096;

}  // namespace

void NetTopology::validate() const {
    auto fail = [](const std::string& what) { throw Error(ErrorCode::Config, "net topology: " + what); };
    if (n_o < 1) fail("n_o must be >= 1");
    if (hidden.empty()) fail("at least one encoder block is required");
    for (int w : hidden)
        if (w < 1) fail("encoder widths must be >= 1");
    if (theta_r_channels < 3) fail("theta_r_channels must be >= 3");
    if (inv_channels < 1) fail("inv_channels must be >= 1");
    for (int w : decoder_hidden)
        if (w < 1) fail("decoder widths must be >= 1");
    if (!(softplus_beta > 0.0)) fail("softplus_beta must be positive");
}

nlohmann::json NetTopology::to_json() const {
    return {{"n_o", n_o},
            {"lift_channels", kLiftChannels},
            {"hidden", hidden},
            {"theta_r_channels", theta_r_channels},
            {"inv_channels", inv_channels},
            {"decoder_hidden", decoder_hidden},
            {"softplus_beta", softplus_beta}};
}

NetTopology NetTopology::from_json(const nlohmann::json& j) {
    NetTopology t;
    t.n_o = j.value("n_o", t.n_o);
    t.hidden = j.value("hidden", t.hidden);
    t.theta_r_channels = j.value("theta_r_channels", t.theta_r_channels);
    t.inv_channels = j.value("inv_channels", t.inv_channels);
    t.decoder_hidden = j.value("decoder_hidden", t.decoder_hidden);
    t.softplus_beta = j.value("softplus_beta", t.softplus_beta);
    if (j.contains("lift_channels") && j.at("lift_channels").get<int>() != kLiftChannels) {
        throw Error(ErrorCode::Config, "unsupported lift_channels");
    }
    t.validate();
    return t;
}

CodeGrad CodeGrad::zeros_like(const LatentCode& code) {
    CodeGrad g;
    g.theta_r = Matrix::Zero(code.theta_r.rows(), code.theta_r.cols());
    g.theta_inv = Vector::Zero(code.theta_inv.size());
    return g;
}

CodeGrad& CodeGrad::operator+=(const CodeGrad& o) {
    theta_r += o.theta_r;
    theta_inv += o.theta_inv;
    theta_c += o.theta_c;
    theta_s += o.theta_s;
    return *this;
}

VecFeature lift_points(std::span<const Vec3> centered) {
    const auto n = static_cast<Eigen::Index>(centered.size());
    if (n == 0) throw Error(ErrorCode::EmptyCloud, "lift_points: no points");
    Mat3 moment = Mat3::Zero();
    double radius = 0.0;
    for (const auto& q : centered) {
        moment.noalias() += q * q.transpose();
        radius += q.norm();
    }
    moment /= static_cast<double>(n);
    radius /= static_cast<double>(n);
    if (!(radius > 1e-12)) throw Error(ErrorCode::DegenerateFeature, "encoder input points all coincide");
    const Mat3 m1 = moment / (radius * radius);
    const Mat3 m2 = m1 * m1;
    VecFeature out(kLiftChannels, 3 * n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const Vec3& q = centered[static_cast<std::size_t>(i)];
        out.block<1, 3>(0, 3 * i) = q.transpose();
        out.block<1, 3>(1, 3 * i) = (m1 * q).transpose();
        out.block<1, 3>(2, 3 * i) = (m2 * q).transpose();
    }
    return out;
}

std::vector<std::pair<Eigen::Index, Eigen::Index>> LearnedPrior::parameter_shapes(const NetTopology& t) {
    std::vector<std::pair<Eigen::Index, Eigen::Index>> shapes;
    Eigen::Index in = kLiftChannels;
    for (int w : t.hidden) {
        shapes.emplace_back(w, in);
        shapes.emplace_back(w, w);
        in = w;
    }
    shapes.emplace_back(in, in);                  // pool direction
    shapes.emplace_back(t.theta_r_channels, in);  // theta_R head
    shapes.emplace_back(t.inv_channels, in);      // invariant head
    shapes.emplace_back(1, in);                   // center head
    std::vector<int> widths{t.decoder_input()};
    widths.insert(widths.end(), t.decoder_hidden.begin(), t.decoder_hidden.end());
    widths.push_back(1);
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
        shapes.emplace_back(widths[l + 1], widths[l]);
        shapes.emplace_back(widths[l + 1], 1);
    }
    return shapes;
}

LearnedPrior::LearnedPrior(NetTopology topology, Rng& init_rng)
    : topology_(std::move(topology)), graph_id_(next_graph_id()) {
    topology_.validate();
    const auto shapes = parameter_shapes(topology_);
    const std::size_t enc_count = decoder_offset();
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        const auto [r, c] = shapes[i];
        const bool bias = i >= enc_count && (i - enc_count) % 2 == 1;
        Matrix m = bias ? Matrix::Zero(r, c) : vecnet::kaiming(r, c, init_rng);
        if (i < enc_count) {
            enc_.push_back(std::move(m));
        } else if (bias) {
            dec_.biases.push_back(std::move(m));
        } else {
            dec_.weights.push_back(std::move(m));
        }
    }
    dec_.beta = topology_.softplus_beta;
}

LearnedPrior::LearnedPrior(NetTopology topology, std::vector<Matrix> parameters)
    : topology_(std::move(topology)), graph_id_(next_graph_id()) {
    topology_.validate();
    const auto shapes = parameter_shapes(topology_);
    if (parameters.size() != shapes.size()) {
        throw Error(ErrorCode::ShapeMismatch, "expected " + std::to_string(shapes.size()) +
                                                  " parameter blocks, got " + std::to_string(parameters.size()));
    }
    const std::size_t enc_count = decoder_offset();
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        if (parameters[i].rows() != shapes[i].first || parameters[i].cols() != shapes[i].second) {
            throw Error(ErrorCode::ShapeMismatch, "parameter block " + std::to_string(i) + " has wrong shape");
        }
        if (!parameters[i].allFinite()) {
            throw Error(ErrorCode::Numeric, "parameter block " + std::to_string(i) + " is not finite");
        }
        if (i < enc_count) {
            enc_.push_back(std::move(parameters[i]));
        } else if ((i - enc_count) % 2 == 1) {
            dec_.biases.push_back(std::move(parameters[i]));
        } else {
            dec_.weights.push_back(std::move(parameters[i]));
        }
    }
    dec_.beta = topology_.softplus_beta;
}

std::vector<Matrix> LearnedPrior::parameters() const {
    std::vector<Matrix> out = enc_;
    for (std::size_t l = 0; l < dec_.weights.size(); ++l) {
        out.push_back(dec_.weights[l]);
        out.push_back(dec_.biases[l]);
    }
    return out;
}

std::vector<Matrix*> LearnedPrior::mutable_parameters() {
    std::vector<Matrix*> out;
    for (auto& m : enc_) out.push_back(&m);
    for (std::size_t l = 0; l < dec_.weights.size(); ++l) {
        out.push_back(&dec_.weights[l]);
        out.push_back(&dec_.biases[l]);
    }
    return out;
}

std::vector<std::string> LearnedPrior::parameter_names() const {
    std::vector<std::string> names;
    for (std::size_t l = 0; l < topology_.hidden.size(); ++l) {
        names.push_back("encoder.block" + std::to_string(l) + ".linear");
        names.push_back("encoder.block" + std::to_string(l) + ".direction");
    }
    names.push_back("encoder.pool.direction");
    names.push_back("head.rotation");
    names.push_back("head.invariant");
    names.push_back("head.center");
    for (std::size_t l = 0; l < dec_.weights.size(); ++l) {
        names.push_back("decoder.layer" + std::to_string(l) + ".weight");
        names.push_back("decoder.layer" + std::to_string(l) + ".bias");
    }
    return names;
}

std::vector<Matrix> LearnedPrior::zero_grads() const {
    std::vector<Matrix> out;
    for (const auto& [r, c] : parameter_shapes(topology_)) out.push_back(Matrix::Zero(r, c));
    return out;
}

LatentCode LearnedPrior::encode(std::span<const Vec3> points) const { return encode_impl(points, nullptr); }

LatentCode LearnedPrior::encode(std::span<const Vec3> points, Tape& tape) const {
    tape.expect_graph(graph_id_);
    if (tape.size() != 0 || tape.consumed()) {
        throw Error(ErrorCode::TapeMismatch, "encode needs a fresh tape");
    }
    return encode_impl(points, &tape);
}

LatentCode LearnedPrior::encode_impl(std::span<const Vec3> points, Tape* tape) const {
    if (points.empty()) throw Error(ErrorCode::EmptyCloud, "encode: no points");
    Vec3 centroid = Vec3::Zero();
    for (const auto& p : points) centroid += p;
    centroid /= static_cast<double>(points.size());
    std::vector<Vec3> centered(points.begin(), points.end());
    for (auto& q : centered) q -= centroid;

    VecFeature x = lift_points(centered);
    for (std::size_t l = 0; l < topology_.hidden.size(); ++l) {
        if (tape) tape->push(vecnet::LinearRecord{x});
        VecFeature y = vecnet::vn_linear(enc_[block_linear(l)], x);
        if (tape) tape->push(vecnet::NonlinearRecord{y});
        x = vecnet::vn_nonlinear(y, enc_[block_direction(l)]);
    }
    vecnet::MaxPoolRecord pool;
    pool.points = vecnet::batch_points(x);
    const VecFeature f = vecnet::vn_max_pool(x, enc_[pool_direction()], &pool.selected);
    if (tape) tape->push(std::move(pool));

    vecnet::NormalizedFeature norm = vecnet::channel_normalize(f);
    LatentCode code;
    code.theta_s = norm.scale;
    code.theta_r = vecnet::vn_linear(enc_[head_rot()], norm.feature);
    const VecFeature aux = vecnet::vn_linear(enc_[head_inv()], norm.feature);
    code.theta_inv = vecnet::invariant_head(aux, code.theta_r);
    const VecFeature offset = vecnet::vn_linear(enc_[head_center()], f);
    code.theta_c = offset.row(0).transpose() + centroid;
    if (tape) {
        tape->push(vecnet::NormalizeRecord{f, norm});
        tape->push(vecnet::LinearRecord{norm.feature});  // theta_R head
        tape->push(vecnet::LinearRecord{norm.feature});  // invariant head
        tape->push(vecnet::InvariantRecord{aux, code.theta_r});
        tape->push(vecnet::LinearRecord{f});  // center head
    }
    return code;
}

void LearnedPrior::encode_backward(Tape& tape, const CodeGrad& grad, std::vector<Matrix>& grads) const {
    tape.expect_graph(graph_id_);
    if (grads.size() != enc_.size() + 2 * dec_.weights.size()) {
        throw Error(ErrorCode::ShapeMismatch, "encode_backward: gradient list does not match parameters");
    }
    const auto center = tape.pop<vecnet::LinearRecord>();
    Matrix grad_c(1, 3);
    grad_c.row(0) = grad.theta_c.transpose();
    auto gc = vecnet::vn_linear_backward(enc_[head_center()], center.input, grad_c);
    grads[head_center()] += gc.weight;
    VecFeature grad_f = std::move(gc.input);

    const auto inv = tape.pop<vecnet::InvariantRecord>();
    auto gi = vecnet::invariant_head_backward(inv.a, inv.b, grad.theta_inv);
    const auto aux_in = tape.pop<vecnet::LinearRecord>();
    auto ga = vecnet::vn_linear_backward(enc_[head_inv()], aux_in.input, gi.a);
    grads[head_inv()] += ga.weight;
    const auto rot_in = tape.pop<vecnet::LinearRecord>();
    auto gr = vecnet::vn_linear_backward(enc_[head_rot()], rot_in.input, grad.theta_r + gi.b);
    grads[head_rot()] += gr.weight;

    const auto norm = tape.pop<vecnet::NormalizeRecord>();
    grad_f += vecnet::channel_normalize_backward(norm.input, norm.output, ga.input + gr.input, grad.theta_s);

    const auto pool = tape.pop<vecnet::MaxPoolRecord>();
    VecFeature grad_x = vecnet::vn_max_pool_backward(pool, grad_f);
    for (std::size_t l = topology_.hidden.size(); l-- > 0;) {
        const auto nl = tape.pop<vecnet::NonlinearRecord>();
        auto gn = vecnet::vn_nonlinear_backward(nl.input, enc_[block_direction(l)], grad_x);
        grads[block_direction(l)] += gn.direction_weight;
        const auto lin = tape.pop<vecnet::LinearRecord>();
        auto gl = vecnet::vn_linear_backward(enc_[block_linear(l)], lin.input, gn.input);
        grads[block_linear(l)] += gl.weight;
        grad_x = std::move(gl.input);
    }
    tape.finish();
}

Matrix LearnedPrior::decoder_input(std::span<const Vec3> queries, const LatentCode& code, Matrix& canonical) const {
    if (!(code.theta_s > 1e-9)) throw Error(ErrorCode::DegenerateScale, "decode: theta_s must exceed 1e-9");
    if (code.theta_r.rows() != topology_.theta_r_channels || code.theta_r.cols() != 3 ||
        code.theta_inv.size() != topology_.theta_inv_dim()) {
        throw Error(ErrorCode::ShapeMismatch, "decode: latent code does not match the network topology");
    }
    const auto m = static_cast<Eigen::Index>(queries.size());
    canonical.resize(3, m);
    for (Eigen::Index i = 0; i < m; ++i) {
        canonical.col(i) = (queries[static_cast<std::size_t>(i)] - code.theta_c) / code.theta_s;
    }
    const Eigen::Index ni = code.theta_inv.size();
    const Eigen::Index k = code.theta_r.rows();
    Matrix z(ni + k + 1, m);
    z.topRows(ni).colwise() = code.theta_inv;
    z.middleRows(ni, k).noalias() = code.theta_r * canonical;
    z.bottomRows(1) = canonical.colwise().squaredNorm();
    return z;
}

Matrix LearnedPrior::decode(std::span<const Vec3> queries, const LatentCode& code, Tape& tape) const {
    tape.expect_graph(graph_id_);
    Matrix canonical;
    const Matrix z = decoder_input(queries, code, canonical);
    tape.push(vecnet::AffineRecord{canonical});
    return vecnet::scalar_mlp(z, dec_, &tape);
}

CodeGrad LearnedPrior::decode_backward(Tape& tape, const LatentCode& code, const Matrix& grad_sdf,
                                       std::vector<Matrix>& grads) const {
    tape.expect_graph(graph_id_);
    auto mg = vecnet::scalar_mlp_backward(tape, dec_, grad_sdf, true);
    const std::size_t off = decoder_offset();
    for (std::size_t l = 0; l < dec_.weights.size(); ++l) {
        grads[off + 2 * l] += mg.weights[l];
        grads[off + 2 * l + 1] += mg.biases[l];
    }
    const Matrix canonical = tape.pop<vecnet::AffineRecord>().input;
    tape.finish();

    const Eigen::Index ni = code.theta_inv.size();
    const Eigen::Index k = code.theta_r.rows();
    CodeGrad g;
    g.theta_inv = mg.input.topRows(ni).rowwise().sum();
    const Matrix du = mg.input.middleRows(ni, k);
    g.theta_r = du * canonical.transpose();
    Matrix dcanon = code.theta_r.transpose() * du;
    dcanon += 2.0 * (canonical.array().rowwise() * mg.input.row(mg.input.rows() - 1).array()).matrix();
    g.theta_c = -dcanon.rowwise().sum() / code.theta_s;
    g.theta_s = -(dcanon.cwiseProduct(canonical)).sum() / code.theta_s;
    return g;
}

void LearnedPrior::decode_batch(std::span<const Vec3> queries, const LatentCode& code, std::span<double> values,
                                std::span<Vec3> gradients) const {
    if (values.size() != queries.size() || (!gradients.empty() && gradients.size() != queries.size())) {
        throw Error(ErrorCode::ShapeMismatch, "decode_batch: output size mismatch");
    }
    const auto total = static_cast<Eigen::Index>(queries.size());
    const Eigen::Index ni = code.theta_inv.size();
    const Eigen::Index k = code.theta_r.rows();
    for (Eigen::Index start = 0; start < total; start += kDecodeChunk) {
        const Eigen::Index m = std::min(kDecodeChunk, total - start);
        const auto chunk = queries.subspan(static_cast<std::size_t>(start), static_cast<std::size_t>(m));
        Matrix canonical;
        const Matrix z = decoder_input(chunk, code, canonical);
        if (gradients.empty()) {
            const Matrix out = vecnet::scalar_mlp(z, dec_, nullptr);
            for (Eigen::Index i = 0; i < m; ++i) values[static_cast<std::size_t>(start + i)] = out(0, i);
            continue;
        }
        Tape tape(graph_id_);
        const Matrix out = vecnet::scalar_mlp(z, dec_, &tape);
        auto mg = vecnet::scalar_mlp_backward(tape, dec_, Matrix::Ones(1, m), false);
        tape.finish();
        // d/dx = (theta_R^T du + 2 x~ d|x~|^2) / theta_s
        Matrix dx = code.theta_r.transpose() * mg.input.middleRows(ni, k);
        dx += 2.0 * (canonical.array().rowwise() * mg.input.row(mg.input.rows() - 1).array()).matrix();
        dx /= code.theta_s;
        for (Eigen::Index i = 0; i < m; ++i) {
            values[static_cast<std::size_t>(start + i)] = out(0, i);
            gradients[static_cast<std::size_t>(start + i)] = dx.col(i);
        }
    }
}

}  // namespace efem
