#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "acsindy/circuit.hpp"
#include "support.hpp"

using namespace acsindy;
using namespace acsindy_test;

namespace {

// (x+1)(y+2) as a one-layer circuit: rows [1,0,1] and [0,1,2], head [1 | 0].
CircuitModel product_model() {
    LayerSpec spec;
    spec.in_dim = 2;
    spec.linear_out_dim = 2;
    spec.group_size = 2;
    CircuitModel m = init_model({spec}, 1, 0);
    m.norm_enabled = false;
    m.layers[0].weights << 1, 0, 1, 0, 1, 2;
    m.head_weights << 1, 0;
    return m;
}

}  // namespace

TEST_CASE("init_model shapes and determinism") {
    LayerSpec spec;
    spec.in_dim = 2;
    spec.linear_out_dim = 4;
    spec.group_size = 2;
    const CircuitModel m = init_model({spec}, 1, 42);
    REQUIRE(m.layers.size() == 1);
    REQUIRE(m.layers[0].weights.rows() == 4);
    REQUIRE(m.layers[0].weights.cols() == 3);
    REQUIRE(m.head_weights.rows() == 1);
    REQUIRE(m.head_weights.cols() == 3);  // 2 products + constant
    REQUIRE(m.layers[0].mask.minCoeff() == 1.0);

    const CircuitModel m2 = init_model({spec}, 1, 42);
    REQUIRE((m.layers[0].weights - m2.layers[0].weights).norm() == 0.0);
    REQUIRE((m.head_weights - m2.head_weights).norm() == 0.0);

    const CircuitModel m3 = init_model({spec}, 1, 43);
    REQUIRE((m.layers[0].weights - m3.layers[0].weights).norm() > 0.0);

    LayerSpec bad = spec;
    bad.group_size = 3;
    REQUIRE_THROWS_AS(init_model({bad}, 1, 0), ArgumentError);

    LayerSpec second;
    second.in_dim = 5;  // previous layer emits 2 groups
    second.linear_out_dim = 2;
    second.group_size = 2;
    REQUIRE_THROWS_AS(init_model({spec, second}, 1, 0), ArgumentError);
}

TEST_CASE("forward evaluates a hand-built product circuit") {
    CircuitModel m = product_model();
    VectorXd x(2);
    x << 3.0, 4.0;
    auto [y, tr] = forward(m, x, NormMode::Off);
    REQUIRE(y(0) == Catch::Approx(24.0).margin(1e-12));

    // All-zero circuit outputs zero everywhere.
    CircuitModel z = m;
    z.layers[0].weights.setZero();
    z.head_weights.setZero();
    for (double v : {-2.0, 0.0, 1.7}) {
        VectorXd p(2);
        p << v, -v;
        REQUIRE(forward(z, p, NormMode::Off).first(0) == 0.0);
    }
}

TEST_CASE("frozen normalization divides features by sigma+eps") {
    CircuitModel m = product_model();
    m.layers[0].norm.sigma << 2.0, 3.0;
    m.layers[0].norm.frozen = true;
    m.head_norm.frozen = true;  // sigma stays 1
    VectorXd x(2);
    x << 3.0, 4.0;
    const auto [y, tr] = forward(m, x, NormMode::Frozen);
    REQUIRE(y(0) == Catch::Approx(4.0).margin(1e-6));
    // htil recorded in the trace matches the definition
    REQUIRE(tr.layers[0].htil(0, 0) == Catch::Approx(4.0 / (2.0 + 1e-8)).margin(1e-12));
    REQUIRE(tr.layers[0].htil(0, 1) == Catch::Approx(6.0 / (3.0 + 1e-8)).margin(1e-12));
}

TEST_CASE("backward: hand chain rule through the product node") {
    CircuitModel m = product_model();
    VectorXd x(2);
    x << 3.0, 4.0;
    const auto [y, tr] = forward(m, x, NormMode::Off);
    VectorXd g(1);
    g << 1.0;
    const BackwardResult br = backward(m, tr, g);
    // d[(x+1)(y+2)]/d(bias of first row) = (y+2) = 6
    REQUIRE(br.grads.layers[0](0, 2) == Catch::Approx(6.0).margin(1e-12));
    // d/d(bias of second row) = (x+1) = 4
    REQUIRE(br.grads.layers[0](1, 2) == Catch::Approx(4.0).margin(1e-12));
    // input gradient: d/dx = (y+2), d/dy = (x+1)
    REQUIRE(br.input_grad(0, 0) == Catch::Approx(6.0).margin(1e-12));
    REQUIRE(br.input_grad(0, 1) == Catch::Approx(4.0).margin(1e-12));
}

TEST_CASE("masked entries report zero gradient and stay inert") {
    CircuitModel m = product_model();
    m.layers[0].mask(0, 0) = 0.0;
    VectorXd x(2);
    x << 3.0, 4.0;
    const auto [y, tr] = forward(m, x, NormMode::Off);
    VectorXd g(1);
    g << 1.0;
    const BackwardResult br = backward(m, tr, g);
    REQUIRE(br.grads.layers[0](0, 0) == 0.0);

    // Mask soundness: masking is observationally identical to zeroing.
    CircuitModel zeroed = product_model();
    zeroed.layers[0].weights(0, 0) = 0.0;
    CircuitModel masked = product_model();
    masked.layers[0].mask(0, 0) = 0.0;
    std::mt19937_64 rng(5);
    std::normal_distribution<double> dist(0.0, 2.0);
    for (int i = 0; i < 20; ++i) {
        VectorXd p(2);
        p << dist(rng), dist(rng);
        const double a = forward(zeroed, p, NormMode::Off).first(0);
        const double b = forward(masked, p, NormMode::Off).first(0);
        REQUIRE(a == b);
    }
}

TEST_CASE("gradients match central finite differences on random circuits") {
    std::mt19937_64 rng(11);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (int trial = 0; trial < 8; ++trial) {
        const int d = 2 + static_cast<int>(rng() % 3);
        const int depth = 1 + static_cast<int>(rng() % 2);
        CircuitModel m = random_circuit(rng, d, depth, 3, 2, trial % 2 == 0, d,
                                        /*allow_sin=*/trial % 3 == 0);
        const bool frozen = trial % 2 == 1;
        if (frozen) randomize_norm(m, rng);
        const NormMode mode = frozen ? NormMode::Frozen : NormMode::Off;

        VectorXd x(d);
        for (int i = 0; i < d; ++i) x(i) = dist(rng);
        VectorXd g(d);
        for (int i = 0; i < d; ++i) g(i) = dist(rng);

        const auto [y, tr] = forward(m, x, mode);
        const BackwardResult br = backward(m, tr, g);
        const std::vector<double> analytic = flatten_grads(m, br.grads);
        const std::vector<double> fd = fd_gradient(
            m, [&]() { return g.dot(forward(m, x, mode).first); });
        REQUIRE(max_rel_error(analytic, fd) < 1e-5);
    }
}

TEST_CASE("freeze, reset and degenerate accumulation") {
    LayerSpec spec;
    spec.in_dim = 2;
    spec.linear_out_dim = 4;
    spec.group_size = 2;
    CircuitModel m = init_model({spec}, 2, 3);

    // Accumulate over constant-zero features: zero the weights first.
    m.layers[0].weights.setZero();
    MatrixXd rows = MatrixXd::Random(16, 2);
    accumulate_norm(m, rows);
    REQUIRE(m.layers[0].norm.count == 16);
    REQUIRE(m.layers[0].norm.sigma.maxCoeff() == 0.0);
    VectorXd x(2);
    x << 1.0, 2.0;
    // 0/(0+eps) = 0 for the degenerate features
    const auto [y, tr] = forward(m, x, NormMode::Frozen);
    REQUIRE(tr.layers[0].htil.cwiseAbs().maxCoeff() == 0.0);

    CircuitModel frozen = freeze_norm(m);
    const VectorXd sigma_before = frozen.layers[0].norm.sigma;
    accumulate_norm(frozen, rows);
    REQUIRE((frozen.layers[0].norm.sigma - sigma_before).norm() == 0.0);

    CircuitModel fresh = reset_norm(frozen);
    REQUIRE(fresh.layers[0].norm.sigma.minCoeff() == 1.0);
    REQUIRE(fresh.layers[0].norm.sigma.maxCoeff() == 1.0);
    REQUIRE(fresh.layers[0].norm.count == 0);
    REQUIRE(!fresh.layers[0].norm.frozen);
}

TEST_CASE("count_active_params tracks the masks") {
    LayerSpec spec;
    spec.in_dim = 2;
    spec.linear_out_dim = 4;
    spec.group_size = 2;
    CircuitModel m = init_model({spec}, 1, 9);
    const long total = 4 * 3 + 1 * 3;
    REQUIRE(count_active_params(m) == total);
    m.layers[0].mask(1, 1) = 0.0;
    m.head_mask(0, 0) = 0.0;
    REQUIRE(count_active_params(m) == total - 2);

    for (auto& l : m.layers) l.mask.setZero();
    m.head_mask.setZero();
    REQUIRE(count_active_params(m) == 0);
    VectorXd x(2);
    x << 0.3, -0.7;
    REQUIRE(forward(m, x, NormMode::Off).first.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("low-rank quadratic representation") {
    std::mt19937_64 rng(21);
    std::normal_distribution<double> dist(0.0, 1.0);

    // Full-rank identity: f = x^2 + y^2.
    const CircuitModel id2 = fit_low_rank_quadratic(MatrixXd::Identity(2, 2), 2);
    for (int i = 0; i < 100; ++i) {
        VectorXd x(2);
        x << dist(rng), dist(rng);
        REQUIRE(forward(id2, x, NormMode::Off).first(0) ==
                Catch::Approx(x.squaredNorm()).margin(1e-9));
    }

    // Rank-1 outer product: f = (v.x)^2.
    VectorXd v(3);
    v << 0.6, -1.2, 0.4;
    const CircuitModel r1 = fit_low_rank_quadratic(v * v.transpose(), 1);
    for (int i = 0; i < 100; ++i) {
        VectorXd x(3);
        x << dist(rng), dist(rng), dist(rng);
        const double want = std::pow(v.dot(x), 2);
        REQUIRE(forward(r1, x, NormMode::Off).first(0) == Catch::Approx(want).margin(1e-9));
    }

    // Random symmetric 4x4 truncated to rank 2 equals the Eckart-Young
    // truncation evaluated as a quadratic form (independent route).
    MatrixXd A = MatrixXd::NullaryExpr(4, 4, [&]() { return dist(rng); });
    MatrixXd Q = 0.5 * (A + A.transpose());
    const CircuitModel m = fit_low_rank_quadratic(Q, 2);
    Eigen::SelfAdjointEigenSolver<MatrixXd> eig(Q);
    std::vector<int> order = {0, 1, 2, 3};
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        return std::abs(eig.eigenvalues()(a)) > std::abs(eig.eigenvalues()(b));
    });
    MatrixXd Q2 = MatrixXd::Zero(4, 4);
    for (int k = 0; k < 2; ++k) {
        const VectorXd u = eig.eigenvectors().col(order[static_cast<size_t>(k)]);
        Q2 += eig.eigenvalues()(order[static_cast<size_t>(k)]) * u * u.transpose();
    }
    for (int i = 0; i < 100; ++i) {
        VectorXd x(4);
        for (int j = 0; j < 4; ++j) x(j) = dist(rng);
        REQUIRE(forward(m, x, NormMode::Off).first(0) ==
                Catch::Approx(x.dot(Q2 * x)).margin(1e-8));
    }

    REQUIRE_THROWS_AS(fit_low_rank_quadratic(MatrixXd::Identity(3, 3), 0), ArgumentError);
    MatrixXd asym(2, 2);
    asym << 0, 1, 2, 0;
    REQUIRE_THROWS_AS(fit_low_rank_quadratic(asym, 1), ArgumentError);
}

TEST_CASE("normalization is scale invariant over a dataset") {
    LayerSpec spec;
    spec.in_dim = 2;
    spec.linear_out_dim = 4;
    spec.group_size = 2;
    CircuitModel base = init_model({spec}, 2, 77);

    // Feature scales large enough that the epsilon guard is negligible.
    std::mt19937_64 rng(31);
    std::normal_distribution<double> dist(0.0, 300.0);
    MatrixXd data(64, 2);
    for (long i = 0; i < data.rows(); ++i)
        for (long j = 0; j < 2; ++j) data(i, j) = dist(rng);

    CircuitModel a = reset_norm(base);
    accumulate_norm(a, data);
    a = freeze_norm(std::move(a));

    CircuitModel b = base;
    const double c = 2.0;
    b.layers[0].weights.row(1) *= c;
    b = reset_norm(std::move(b));
    accumulate_norm(b, data);
    b = freeze_norm(std::move(b));

    // sigma scales by exactly c (c is a power of two, so bitwise).
    REQUIRE(b.layers[0].norm.sigma(1) == c * a.layers[0].norm.sigma(1));

    for (long i = 0; i < data.rows(); ++i) {
        const auto ta = forward_batch(a, data.row(i), NormMode::Frozen);
        const auto tb = forward_batch(b, data.row(i), NormMode::Frozen);
        REQUIRE(std::abs(ta.layers[0].htil(0, 1) - tb.layers[0].htil(0, 1)) < 1e-10);
    }
}

TEST_CASE("sigma is a stop-gradient: count and history never enter backward") {
    CircuitModel m = product_model();
    m.layers[0].norm.sigma << 2.0, 3.0;
    m.layers[0].norm.frozen = true;
    m.head_norm.frozen = true;
    CircuitModel other = m;
    other.layers[0].norm.count = 999;  // different accumulation history
    other.layers[0].norm.mean.setConstant(5.0);
    other.layers[0].norm.m2.setConstant(7.0);

    VectorXd x(2);
    x << 3.0, 4.0;
    VectorXd g(1);
    g << 1.0;
    const auto ra = backward(m, forward(m, x, NormMode::Frozen).second, g);
    const auto rb = backward(other, forward(other, x, NormMode::Frozen).second, g);
    REQUIRE((ra.grads.layers[0] - rb.grads.layers[0]).norm() == 0.0);
    REQUIRE((ra.grads.head - rb.grads.head).norm() == 0.0);
}

TEST_CASE("non-finite weights are reported with the layer") {
    CircuitModel m = product_model();
    m.layers[0].weights(0, 0) = std::numeric_limits<double>::infinity();
    VectorXd x(2);
    x << 1.0, 1.0;
    REQUIRE_THROWS_AS(forward(m, x, NormMode::Off), NumericError);
}
