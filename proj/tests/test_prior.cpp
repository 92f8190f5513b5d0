#include <doctest.h>

#include <numbers>

#include "efem/checkpoint.hpp"
#include "efem/error.hpp"
#include "efem/io.hpp"
#include "efem/learned_prior.hpp"
#include "efem/prior.hpp"
#include "efem/shapes.hpp"
#include "helpers.hpp"

using namespace efem;
using efem::test::gradcheck;
using efem::test::random_point;
using efem::test::random_sim3;

namespace {

NetTopology small_topology() {
    NetTopology t;
    t.n_o = 96;
    t.hidden = {12, 12};
    t.theta_r_channels = 4;
    t.inv_channels = 2;
    t.decoder_hidden = {24, 24};
    return t;
}

std::vector<Vec3> capsule_points(std::size_t n, Rng& rng) {
    return sample_surface(ProceduralShape::capsule(0.3, 0.4), n, rng).points;
}

std::vector<Vec3> sphere_points(const Vec3& c, double r, std::size_t n, Rng& rng) {
    std::vector<Vec3> pts;
    for (std::size_t i = 0; i < n; ++i) pts.push_back(c + r * random_unit_vector(rng));
    return pts;
}

double rel(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-12); }

double rel(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    return (a - b).norm() / std::max(b.norm(), 1e-12);
}

}  // namespace

TEST_CASE("act examples and group property") {
    Rng rng = make_rng(1, 0);
    LatentCode code;
    code.theta_r = Eigen::MatrixXd::Random(4, 3);
    code.theta_inv = Eigen::VectorXd::Random(5);
    code.theta_c = Vec3(0.3, -0.2, 0.1);
    code.theta_s = 0.7;

    const LatentCode same = act(Sim3::identity(), code);
    CHECK(same.theta_r == code.theta_r);
    CHECK(same.theta_inv == code.theta_inv);
    CHECK(same.theta_c == code.theta_c);
    CHECK(same.theta_s == code.theta_s);

    Sim3 s2;
    s2.scale = 2.0;
    const LatentCode doubled = act(s2, code);
    CHECK(doubled.theta_s == doctest::Approx(1.4));
    CHECK((doubled.theta_c - 2.0 * code.theta_c).norm() < 1e-15);
    CHECK(doubled.theta_r == code.theta_r);
    CHECK(doubled.theta_inv == code.theta_inv);

    for (int i = 0; i < 20; ++i) {
        const Sim3 g1 = random_sim3(rng);
        const Sim3 g2 = random_sim3(rng);
        const LatentCode a = act(g1, act(g2, code));
        const LatentCode b = act(compose(g1, g2), code);
        CHECK((a.theta_r - b.theta_r).norm() < 1e-6);
        CHECK((a.theta_c - b.theta_c).norm() < 1e-6);
        CHECK(a.theta_s == doctest::Approx(b.theta_s).epsilon(1e-9));
    }
}

TEST_CASE("latent distance") {
    LatentCode a;
    a.theta_inv = Eigen::VectorXd::LinSpaced(4, 0, 1);
    CHECK(latent_distance(a, a) == 0.0);
    LatentCode b = a;
    b.theta_inv(0) += 3.0;
    CHECK(latent_distance(a, b) == doctest::Approx(3.0));
    LatentCode c;
    c.theta_inv = Eigen::VectorXd::Zero(2);
    CHECK_THROWS_AS(latent_distance(a, c), Error);

    const LatentCode r1 = SphereOracle::make_code(Vec3::Zero(), 1.0);
    const LatentCode r2 = SphereOracle::make_code(Vec3::Zero(), 2.0);
    CHECK(latent_distance(r1, r2) == 0.0);
}

TEST_CASE("sphere oracle encode and decode") {
    Rng rng = make_rng(2, 0);
    SphereOracle oracle;
    const Vec3 c(0.4, -1.0, 2.0);
    const double r = 0.7;
    const LatentCode code = oracle.encode(sphere_points(c, r, 1024, rng));
    CHECK((code.theta_c - c).norm() < 0.05 * r);
    CHECK(rel(code.theta_s, r) < 0.02);
    CHECK(code.theta_inv.size() == 0);

    const LatentCode exact = SphereOracle::make_code(c, r);
    CHECK(oracle.decode(c, exact) == doctest::Approx(-r));
    for (int i = 0; i < 20; ++i) {
        const Vec3 dir = random_unit_vector(rng);
        CHECK(std::abs(oracle.decode(c + r * dir, exact)) < 1e-9);
        const Vec3 x = c + uniform(rng, 0.1, 3.0) * dir;
        const auto grad = oracle.decode_gradient(x, exact);
        REQUIRE(grad);
        CHECK((*grad - dir).norm() < 1e-12);
    }
    CHECK_FALSE(oracle.decode_gradient(c, exact));

    // Mean radius is unbiased on exact samples as N_O grows.
    Rng big = make_rng(3, 0);
    const LatentCode many = oracle.encode(sphere_points(c, r, 200000, big));
    CHECK(rel(many.theta_s, r) < 2e-3);
    CHECK((many.theta_c - c).norm() < 5e-3);
}

TEST_CASE("sphere oracle is exactly equivariant") {
    Rng rng = make_rng(4, 0);
    SphereOracle oracle;
    const auto pts = sphere_points(Vec3(0.1, 0.2, 0.3), 0.5, 256, rng);
    for (int i = 0; i < 10; ++i) {
        const Sim3 g = random_sim3(rng);
        std::vector<Vec3> moved;
        for (const auto& p : pts) moved.push_back(g.apply_point(p));
        const LatentCode a = oracle.encode(moved);
        const LatentCode b = act(g, oracle.encode(pts));
        CHECK((a.theta_c - b.theta_c).norm() < 1e-9 * std::max(1.0, b.theta_c.norm()));
        CHECK(rel(a.theta_s, b.theta_s) < 1e-9);
    }
}

TEST_CASE("degenerate inputs") {
    SphereOracle oracle;
    std::vector<Vec3> same(16, Vec3(1, 1, 1));
    CHECK_THROWS_AS(oracle.encode(same), Error);
    Rng rng = make_rng(5, 0);
    LearnedPrior net(small_topology(), rng);
    std::vector<Vec3> coincident(96, Vec3(0.5, 0, 0));
    try {
        net.encode(coincident);
        FAIL("expected DegenerateFeature");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::DegenerateFeature);
    }
    LatentCode bad = SphereOracle::make_code(Vec3::Zero(), 1.0);
    bad.theta_s = 0.0;
    CHECK_THROWS_AS(bad.validate(), Error);
    CHECK_THROWS_AS(oracle.decode(Vec3::Zero(), bad), Error);
}

TEST_CASE("learned prior: encode is SIM(3) equivariant") {
    Rng rng = make_rng(6, 0);
    LearnedPrior net(small_topology(), rng);
    const auto pts = capsule_points(96, rng);
    const LatentCode base = net.encode(pts);
    CHECK(base.theta_r.rows() == 4);
    CHECK(base.theta_inv.size() == 8);

    const LatentCode again = net.encode(pts);
    CHECK(again.theta_r == base.theta_r);
    CHECK(again.theta_inv == base.theta_inv);

    for (int i = 0; i < 20; ++i) {
        const Sim3 g = random_sim3(rng);
        std::vector<Vec3> moved;
        for (const auto& p : pts) moved.push_back(g.apply_point(p));
        const LatentCode a = net.encode(moved);
        const LatentCode b = act(g, base);
        CHECK(rel(a.theta_inv, b.theta_inv) < 1e-4);
        CHECK(rel(a.theta_r, b.theta_r) < 1e-4);
        CHECK(rel(a.theta_s, b.theta_s) < 1e-4);
        CHECK((a.theta_c - b.theta_c).norm() < 1e-4 * std::max(1.0, b.theta_c.norm()));
        CHECK(latent_distance(a, base) < 1e-4 * std::max(1.0, base.theta_inv.norm()));
    }
}

TEST_CASE("learned prior: decode invariance and gradient") {
    Rng rng = make_rng(7, 0);
    LearnedPrior net(small_topology(), rng);
    const LatentCode code = net.encode(capsule_points(96, rng));
    for (int i = 0; i < 20; ++i) {
        const Sim3 g = random_sim3(rng);
        const Vec3 x = code.theta_c + code.theta_s * random_point(rng);
        const double v = net.decode(x, code);
        CHECK(std::abs(net.decode(g.apply_point(x), act(g, code)) - v) < 1e-4 * std::max(1.0, std::abs(v)));

        const auto grad = net.decode_gradient(x, code);
        REQUIRE(grad);
        const double h = 1e-4 * code.theta_s;
        for (int a = 0; a < 3; ++a) {
            Vec3 e = Vec3::Zero();
            e(a) = h;
            const double fd = (net.decode(x + e, code) - net.decode(x - e, code)) / (2 * h);
            CHECK(std::abs(fd - (*grad)(a)) <= 1e-3 * std::max(std::abs(fd), 1e-4));
        }

        // Rotated query with rotated code: gradient rotates and scales by 1/s.
        const auto moved = net.decode_gradient(g.apply_point(x), act(g, code));
        REQUIRE(moved);
        CHECK((*moved - g.apply_direction(*grad) / g.scale).norm() < 1e-4 * std::max(1.0, grad->norm()));
    }
}

TEST_CASE("learned prior: batch decode agrees with single queries") {
    Rng rng = make_rng(8, 0);
    LearnedPrior net(small_topology(), rng);
    const LatentCode code = net.encode(capsule_points(96, rng));
    std::vector<Vec3> q;
    for (int i = 0; i < 5000; ++i) q.push_back(random_point(rng));
    std::vector<double> values(q.size());
    std::vector<Vec3> grads(q.size());
    net.decode_batch(q, code, values, grads);
    for (std::size_t i = 0; i < q.size(); i += 499) {
        CHECK(values[i] == doctest::Approx(net.decode(q[i], code)).epsilon(1e-12));
        CHECK((grads[i] - *net.decode_gradient(q[i], code)).norm() < 1e-12);
    }
}

TEST_CASE("learned prior: parameter gradients match finite differences") {
    Rng rng = make_rng(9, 0);
    LearnedPrior net(small_topology(), rng);
    // Non-zero biases exercise every path.
    for (auto* p : net.mutable_parameters())
        if (p->cols() == 1) p->setRandom();
    const auto pts = capsule_points(96, rng);
    std::vector<Vec3> queries;
    for (int i = 0; i < 24; ++i) queries.push_back(0.8 * random_point(rng));
    Eigen::MatrixXd weight(1, queries.size());
    for (Eigen::Index i = 0; i < weight.size(); ++i) weight(i) = gaussian(rng, 1.0);

    auto loss = [&] {
        const LatentCode code = net.encode(pts);
        std::vector<double> v(queries.size());
        net.decode_batch(queries, code, v, {});
        double l = 0.0;
        for (std::size_t i = 0; i < v.size(); ++i) l += weight(static_cast<Eigen::Index>(i)) * v[i];
        return l;
    };

    std::vector<vecnet::Matrix> grads = net.zero_grads();
    vecnet::Tape enc = net.new_tape();
    const LatentCode code = net.encode(pts, enc);
    vecnet::Tape dec = net.new_tape();
    const vecnet::Matrix psi = net.decode(queries, code, dec);
    CHECK(psi.cols() == static_cast<Eigen::Index>(queries.size()));
    const CodeGrad cg = net.decode_backward(dec, code, weight, grads);
    net.encode_backward(enc, cg, grads);
    CHECK(enc.consumed());

    const auto params = net.mutable_parameters();
    const auto names = net.parameter_names();
    REQUIRE(params.size() == grads.size());
    for (std::size_t k = 0; k < params.size(); ++k) {
        const auto st = gradcheck(*params[k], grads[k], loss, rng, 24);
        INFO(names[k], " worst ", st.worst);
        CHECK(st.fraction() >= 0.95);
    }
}

TEST_CASE("learned prior: tapes from another network are rejected") {
    Rng rng = make_rng(10, 0);
    LearnedPrior a(small_topology(), rng);
    LearnedPrior b(small_topology(), rng);
    const auto pts = capsule_points(96, rng);
    vecnet::Tape tape = a.new_tape();
    const LatentCode code = a.encode(pts, tape);
    auto grads = b.zero_grads();
    CHECK_THROWS_AS(b.encode_backward(tape, CodeGrad::zeros_like(code), grads), Error);
}

TEST_CASE("topology validation and parameter shapes") {
    NetTopology t = small_topology();
    CHECK_NOTHROW(t.validate());
    const auto shapes = LearnedPrior::parameter_shapes(t);
    Rng rng = make_rng(11, 0);
    LearnedPrior net(t, rng);
    const auto params = net.parameters();
    REQUIRE(shapes.size() == params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        CHECK(params[i].rows() == shapes[i].first);
        CHECK(params[i].cols() == shapes[i].second);
    }
    CHECK(NetTopology::from_json(t.to_json()).to_json() == t.to_json());
    t.hidden.clear();
    CHECK_THROWS_AS(t.validate(), Error);
    auto wrong = net.parameters();
    wrong.pop_back();
    CHECK_THROWS_AS(LearnedPrior(small_topology(), wrong), Error);
}

TEST_CASE("checkpoint round trip") {
    efem::test::TempDir dir("ckpt");
    Rng rng = make_rng(12, 0);
    LearnedPrior net(small_topology(), rng);
    const auto path = dir.path() / "prior.ckpt";
    save_checkpoint(path, net);
    const auto back = load_checkpoint(path);
    const auto a = net.parameters();
    const auto b = back->parameters();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        // Stored as float32.
        CHECK((a[i] - b[i]).cwiseAbs().maxCoeff() <= 1e-6 * std::max(1.0, a[i].cwiseAbs().maxCoeff()));
    }
    CHECK(back->topology().to_json() == net.topology().to_json());

    // Saving a loaded checkpoint reproduces the file byte for byte.
    const auto again = dir.path() / "again.ckpt";
    save_checkpoint(again, *back);
    CHECK(read_file(path) == read_file(again));

    const auto header = inspect_container(path);
    CHECK(header.at("section") == "NETWORK");
    CHECK(header.at("payload_bytes").get<std::size_t>() % 4 == 0);

    const auto prior = load_prior(path.string());
    CHECK(prior->name() == "learned");
    CHECK(load_prior("oracle:sphere")->name() == "oracle:sphere");
    CHECK_THROWS_AS(load_prior((dir.path() / "nope.ckpt").string()), Error);
    CHECK_THROWS_AS(load_prior("oracle:cube"), Error);
}

TEST_CASE("corrupt containers are rejected") {
    efem::test::TempDir dir("corrupt");
    const auto bad = dir.path() / "bad.ckpt";
    write_file_atomic(bad, "NOTACKPT\x01\x00\x00\x00");
    CHECK_THROWS_AS(load_checkpoint(bad), Error);

    Rng rng = make_rng(13, 0);
    LearnedPrior net(small_topology(), rng);
    const auto good = dir.path() / "good.ckpt";
    save_checkpoint(good, net);
    std::string bytes = read_file(good);
    write_file_atomic(dir.path() / "short.ckpt", bytes.substr(0, bytes.size() - 8));
    CHECK_THROWS_AS(load_checkpoint(dir.path() / "short.ckpt"), Error);
    CHECK_THROWS_AS(load_library(good), Error);
}

TEST_CASE("library round trip") {
    efem::test::TempDir dir("lib");
    Rng rng = make_rng(14, 0);
    LearnedPrior net(small_topology(), rng);
    LatentLibrary lib;
    for (int i = 0; i < 3; ++i) {
        const auto shape = ProceduralShape::capsule(0.2 + 0.05 * i, 0.3);
        lib.entries.push_back({net.encode(sample_surface(shape, 96, rng).points), shape.to_json()});
    }
    const auto path = dir.path() / "lib.ckpt";
    save_library(path, lib);
    const LatentLibrary back = load_library(path);
    REQUIRE(back.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK((back.entries[i].code.theta_r - lib.entries[i].code.theta_r).norm() < 1e-5);
        CHECK((back.entries[i].code.theta_inv - lib.entries[i].code.theta_inv).norm() < 1e-5);
        CHECK((back.entries[i].code.theta_c - lib.entries[i].code.theta_c).norm() < 1e-5);
        CHECK(back.entries[i].code.theta_s == doctest::Approx(lib.entries[i].code.theta_s).epsilon(1e-6));
        CHECK(back.entries[i].shape == lib.entries[i].shape);
    }
    CHECK(inspect_container(path).at("count") == 3);
    CHECK_THROWS_AS(load_checkpoint(path), Error);
}
