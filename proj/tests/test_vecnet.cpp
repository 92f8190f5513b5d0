#include <doctest.h>

#include "efem/error.hpp"
#include "efem/vecnet.hpp"
#include "helpers.hpp"

using namespace efem;
using namespace efem::vecnet;
using efem::test::gradcheck;

namespace {

Matrix randn(Eigen::Index r, Eigen::Index c, Rng& rng) {
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = gaussian(rng, 1.0);
    return m;
}

double relative_residual(const Matrix& a, const Matrix& b) { return (a - b).norm() / std::max(b.norm(), 1e-300); }

}  // namespace

TEST_CASE("vn_linear examples") {
    Rng rng = make_rng(1, 0);
    const VecFeature f = randn(5, 3, rng);
    CHECK(vn_linear(Matrix::Identity(5, 5), f) == f);
    CHECK(vn_linear(Matrix::Zero(4, 5), f).norm() == 0.0);
    CHECK_THROWS_AS(vn_linear(Matrix::Zero(4, 6), f), Error);
}

TEST_CASE("vector layers are rotation equivariant") {
    Rng rng = make_rng(2, 0);
    for (int trial = 0; trial < 100; ++trial) {
        const Eigen::Matrix3d r = random_rotation(rng);
        const VecFeature f = randn(6, 3 * 4, rng);
        const Matrix w = randn(7, 6, rng);
        const Matrix d = randn(6, 6, rng);

        const VecFeature lin = vn_linear(w, f);
        CHECK((vn_linear(w, rotate(f, r)) - rotate(lin, r)).norm() <= 1e-5 * lin.norm());

        const VecFeature nl = vn_nonlinear(f, d);
        CHECK((vn_nonlinear(rotate(f, r), d) - rotate(nl, r)).norm() <= 1e-5 * nl.norm());

        const VecFeature pooled = vn_max_pool(f, d);
        CHECK((vn_max_pool(rotate(f, r), d) - rotate(pooled, r)).norm() <= 1e-5 * pooled.norm());

        const VecFeature single = randn(6, 3, rng);
        const auto norm = channel_normalize(single);
        const auto norm_r = channel_normalize(rotate(single, r));
        CHECK(relative_residual(norm_r.feature, rotate(norm.feature, r)) < 1e-5);
        CHECK(norm_r.scale == doctest::Approx(norm.scale).epsilon(1e-9));
    }
}

TEST_CASE("vn_nonlinear examples") {
    Rng rng = make_rng(3, 0);
    // Identity direction weights: d_c = F_c, always aligned.
    const VecFeature f = randn(4, 3, rng);
    CHECK(relative_residual(vn_nonlinear(f, Matrix::Identity(4, 4)), f) < 1e-12);
    // Negated direction: F_c = -d_c projects to zero.
    const VecFeature zeroed = vn_nonlinear(f, -Matrix::Identity(4, 4));
    CHECK(zeroed.norm() < 1e-12);
    // Degenerate directions pass through.
    CHECK(vn_nonlinear(f, Matrix::Zero(4, 4)) == f);
}

TEST_CASE("channel_normalize examples") {
    Rng rng = make_rng(4, 0);
    VecFeature unit = randn(5, 3, rng);
    unit.rowwise().normalize();
    const auto a = channel_normalize(unit);
    CHECK(a.scale == doctest::Approx(1.0));
    CHECK(relative_residual(a.feature, unit) < 1e-12);

    const VecFeature f = randn(5, 3, rng);
    const auto n1 = channel_normalize(f);
    const auto n3 = channel_normalize(3.0 * f);
    CHECK(relative_residual(n3.feature, n1.feature) < 1e-12);
    CHECK(n3.scale == doctest::Approx(3.0 * n1.scale));
    CHECK(relative_residual(n1.feature * n1.scale, f) < 1e-6);

    for (double s : {0.1, 0.5, 2.0, 10.0}) {
        const auto ns = channel_normalize(s * f);
        CHECK(relative_residual(ns.feature, n1.feature) < 1e-5);
        CHECK(ns.scale == doctest::Approx(s * n1.scale).epsilon(1e-9));
    }

    try {
        channel_normalize(Matrix::Zero(3, 3));
        FAIL("expected DegenerateFeature");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::DegenerateFeature);
    }
}

TEST_CASE("invariant_head examples") {
    Rng rng = make_rng(5, 0);
    const VecFeature a = randn(3, 3, rng);
    const VecFeature b = randn(4, 3, rng);
    const Eigen::Matrix3d r = random_rotation(rng);
    const Vector v = invariant_head(a, b);
    CHECK(v.size() == 12);
    CHECK((invariant_head(rotate(a, r), rotate(b, r)) - v).norm() < 1e-6 * std::max(1.0, v.norm()));
    CHECK(v(1 * 4 + 2) == doctest::Approx(a.row(1).dot(b.row(2))));

    Matrix x(2, 3), y(2, 3);
    x << 1, 0, 0, 1, 0, 0;
    y << 0, 1, 0, 0, 0, 1;
    CHECK(invariant_head(x, y).norm() == 0.0);

    VecFeature u = randn(3, 3, rng);
    u.rowwise().normalize();
    const Vector self = invariant_head(u, u);
    for (int i = 0; i < 3; ++i) CHECK(self(i * 3 + i) == doctest::Approx(1.0));
    CHECK_THROWS_AS(invariant_head(randn(2, 6, rng), randn(2, 3, rng)), Error);
}

TEST_CASE("scalar_mlp examples") {
    Rng rng = make_rng(6, 0);
    MlpParams id;
    id.weights = {Matrix::Identity(4, 4)};
    id.biases = {Matrix::Zero(4, 1)};
    const Matrix x = randn(4, 7, rng);
    CHECK(scalar_mlp(x, id) == x);

    const std::vector<int> widths = {5, 16, 16, 1};
    const MlpParams p = make_mlp(widths, 10.0, rng);
    const Matrix in = randn(5, 9, rng);
    const Matrix y1 = scalar_mlp(in, p);
    const Matrix y2 = scalar_mlp(in, p);
    CHECK(y1 == y2);
    CHECK(y1.rows() == 1);
    CHECK(y1.cols() == 9);
}

TEST_CASE("gradcheck: vn_linear") {
    Rng rng = make_rng(7, 0);
    Matrix w = randn(5, 4, rng);
    VecFeature f = randn(4, 3 * 3, rng);
    const Matrix g = randn(5, 9, rng);
    auto loss = [&] { return (vn_linear(w, f).array() * g.array()).sum(); };
    const LinearGrad grad = vn_linear_backward(w, f, g);
    CHECK(gradcheck(w, grad.weight, loss, rng, 100).fraction() == 1.0);
    CHECK(gradcheck(f, grad.input, loss, rng, 100).fraction() == 1.0);
}

TEST_CASE("gradcheck: closed form linear gradient") {
    Rng rng = make_rng(8, 0);
    const Matrix w = randn(3, 4, rng);
    const VecFeature x = randn(4, 3, rng);
    // L = |W x|^2 / 2, so dL/dW = (W x) x^T.
    const VecFeature out = vn_linear(w, x);
    const LinearGrad grad = vn_linear_backward(w, x, out);
    CHECK((grad.weight - out * x.transpose()).norm() < 1e-12);

    const LinearGrad zero = vn_linear_backward(w, x, Matrix::Zero(3, 3));
    CHECK(zero.weight.norm() == 0.0);
    CHECK(zero.input.norm() == 0.0);
}

TEST_CASE("gradcheck: vn_nonlinear") {
    Rng rng = make_rng(9, 0);
    VecFeature f = randn(6, 3 * 5, rng);
    Matrix d = randn(6, 6, rng);
    const Matrix g = randn(6, 15, rng);
    auto loss = [&] { return (vn_nonlinear(f, d).array() * g.array()).sum(); };
    const NonlinearGrad grad = vn_nonlinear_backward(f, d, g);
    CHECK(gradcheck(f, grad.input, loss, rng, 90).fraction() >= 0.95);
    CHECK(gradcheck(d, grad.direction_weight, loss, rng, 36).fraction() >= 0.95);

    const NonlinearGrad zero = vn_nonlinear_backward(f, d, Matrix::Zero(6, 15));
    CHECK(zero.input.norm() == 0.0);
    CHECK(zero.direction_weight.norm() == 0.0);
}

TEST_CASE("gradcheck: channel_normalize") {
    Rng rng = make_rng(10, 0);
    VecFeature f = randn(5, 3, rng);
    const Matrix gf = randn(5, 3, rng);
    const double gs = 0.7;
    auto loss = [&] {
        const auto n = channel_normalize(f);
        return (n.feature.array() * gf.array()).sum() + gs * n.scale;
    };
    const auto fwd = channel_normalize(f);
    const VecFeature grad = channel_normalize_backward(f, fwd, gf, gs);
    CHECK(gradcheck(f, grad, loss, rng, 15).fraction() == 1.0);
}

TEST_CASE("gradcheck: invariant_head") {
    Rng rng = make_rng(11, 0);
    VecFeature a = randn(3, 3, rng);
    VecFeature b = randn(4, 3, rng);
    const Vector g = randn(12, 1, rng);
    auto loss = [&] { return invariant_head(a, b).dot(g); };
    const InvariantGrad grad = invariant_head_backward(a, b, g);
    CHECK(gradcheck(a, grad.a, loss, rng, 9).fraction() == 1.0);
    CHECK(gradcheck(b, grad.b, loss, rng, 12).fraction() == 1.0);
}

TEST_CASE("gradcheck: vn_max_pool") {
    Rng rng = make_rng(12, 0);
    VecFeature f = randn(4, 3 * 6, rng);
    const Matrix d = randn(4, 4, rng);
    const Matrix g = randn(4, 3, rng);
    std::vector<Eigen::Index> selected;
    vn_max_pool(f, d, &selected);
    const MaxPoolRecord record{selected, 6};
    const VecFeature grad = vn_max_pool_backward(record, g);
    auto loss = [&] { return (vn_max_pool(f, d).array() * g.array()).sum(); };
    CHECK(gradcheck(f, grad, loss, rng, 72, 1e-6).fraction() >= 0.95);
}

TEST_CASE("gradcheck: scalar_mlp parameters and input") {
    Rng rng = make_rng(13, 0);
    const std::vector<int> widths = {6, 12, 12, 2};
    MlpParams p = make_mlp(widths, 10.0, rng);
    for (auto& b : p.biases) b = randn(b.rows(), 1, rng) * 0.3;
    Matrix x = randn(6, 5, rng);
    const Matrix g = randn(2, 5, rng);
    auto loss = [&] { return (scalar_mlp(x, p).array() * g.array()).sum(); };

    Tape tape;
    scalar_mlp(x, p, &tape);
    const MlpGrad grad = scalar_mlp_backward(tape, p, g);
    tape.finish();
    CHECK(gradcheck(x, grad.input, loss, rng, 30).fraction() == 1.0);
    for (std::size_t l = 0; l < p.weights.size(); ++l) {
        CHECK(gradcheck(p.weights[l], grad.weights[l], loss, rng, 60).fraction() == 1.0);
        CHECK(gradcheck(p.biases[l], grad.biases[l], loss, rng, 12).fraction() == 1.0);
    }

    Tape zero_tape;
    scalar_mlp(x, p, &zero_tape);
    const MlpGrad zero = scalar_mlp_backward(zero_tape, p, Matrix::Zero(2, 5));
    CHECK(zero.input.norm() == 0.0);
    for (const auto& w : zero.weights) CHECK(w.norm() == 0.0);
}

TEST_CASE("tape misuse is detected") {
    Rng rng = make_rng(14, 0);
    const std::vector<int> widths = {3, 4, 1};
    const MlpParams p = make_mlp(widths, 10.0, rng);
    const Matrix x = randn(3, 2, rng);

    Tape tape;
    scalar_mlp(x, p, &tape);
    scalar_mlp_backward(tape, p, Matrix::Ones(1, 2));
    tape.finish();
    CHECK(tape.consumed());
    try {
        scalar_mlp_backward(tape, p, Matrix::Ones(1, 2));
        FAIL("expected TapeMismatch");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::TapeMismatch);
    }

    Tape wrong;
    wrong.push(LinearRecord{x});
    CHECK_THROWS_AS(scalar_mlp_backward(wrong, p, Matrix::Ones(1, 2)), Error);

    Tape partial;
    scalar_mlp(x, p, &partial);
    CHECK_THROWS_AS(partial.finish(), Error);

    Tape owned(42);
    CHECK_NOTHROW(owned.expect_graph(42));
    CHECK_THROWS_AS(owned.expect_graph(43), Error);
}

TEST_CASE("adam: zero gradient leaves parameters") {
    Matrix w = Matrix::Constant(2, 2, 0.5);
    const Matrix before = w;
    std::vector<Matrix*> params = {&w};
    std::vector<Matrix> grads = {Matrix::Zero(2, 2)};
    AdamState state;
    adam_step(params, grads, state, AdamConfig{});
    CHECK(w == before);

    // Moments decay geometrically once the gradient vanishes.
    grads[0].setConstant(1.0);
    adam_step(params, grads, state, AdamConfig{});
    const Matrix m = state.m[0];
    const Matrix v = state.v[0];
    grads[0].setZero();
    adam_step(params, grads, state, AdamConfig{});
    CHECK((state.m[0] - 0.9 * m).norm() < 1e-15);
    CHECK((state.v[0] - 0.999 * v).norm() < 1e-15);
}

TEST_CASE("adam: constant gradient moves by about lr per step") {
    Matrix w = Matrix::Zero(1, 3);
    std::vector<Matrix*> params = {&w};
    const std::vector<Matrix> grads = {(Matrix(1, 3) << 0.01, 5.0, -300.0).finished()};
    AdamState state;
    AdamConfig cfg;
    cfg.lr = 1e-2;
    for (int i = 0; i < 200; ++i) {
        const Matrix prev = w;
        adam_step(params, grads, state, cfg);
        const Matrix step = w - prev;
        if (i > 100) {
            CHECK(std::abs(step(0)) == doctest::Approx(cfg.lr).epsilon(1e-3));
            CHECK(step(0) < 0);
            CHECK(step(2) > 0);
        }
    }
}

TEST_CASE("adam: quadratic bowl decreases") {
    Rng rng = make_rng(15, 0);
    Matrix w = randn(4, 4, rng);
    std::vector<Matrix*> params = {&w};
    AdamState state;
    AdamConfig cfg;
    cfg.lr = 1e-2;
    double prev = w.squaredNorm();
    for (int i = 0; i < 100; ++i) {
        const std::vector<Matrix> grads = {2.0 * w};
        adam_step(params, grads, state, cfg);
        const double now = w.squaredNorm();
        CHECK(now < prev);
        prev = now;
    }
}

TEST_CASE("kaiming init statistics") {
    Rng rng = make_rng(16, 0);
    const Matrix w = kaiming(200, 50, rng);
    const double var = w.array().square().mean();
    CHECK(var == doctest::Approx(2.0 / 50).epsilon(0.05));
}
