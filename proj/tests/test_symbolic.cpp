#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "acsindy/symbolic.hpp"
#include "support.hpp"

using namespace acsindy;
using namespace acsindy_test;

namespace {

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

Monomial mono(std::vector<int> e) { return {std::move(e)}; }

}  // namespace

TEST_CASE("graded-lex ordering") {
    GradedLexLess less;
    REQUIRE(less(mono({0, 0}), mono({1, 0})));
    REQUIRE(less(mono({1, 0}), mono({0, 1})));
    REQUIRE(less(mono({0, 1}), mono({2, 0})));
    REQUIRE(less(mono({2, 0}), mono({1, 1})));
    REQUIRE(less(mono({1, 1}), mono({0, 2})));
    REQUIRE(!less(mono({0, 2}), mono({1, 1})));
}

TEST_CASE("expand the hand-built (x+1)(y+2) circuit") {
    const SymbolicSystem sys = expand(product_model(), NormMode::Off);
    const auto& p = sys.components[0].poly;
    REQUIRE(p.terms.size() == 4);
    REQUIRE(p.coefficient(mono({1, 1})) == Catch::Approx(1.0).margin(1e-15));
    REQUIRE(p.coefficient(mono({1, 0})) == Catch::Approx(2.0).margin(1e-15));
    REQUIRE(p.coefficient(mono({0, 1})) == Catch::Approx(1.0).margin(1e-15));
    REQUIRE(p.coefficient(mono({0, 0})) == Catch::Approx(2.0).margin(1e-15));
}

TEST_CASE("fully masked model expands to the zero polynomial") {
    CircuitModel m = product_model();
    m.layers[0].mask.setZero();
    m.head_mask.setZero();
    const SymbolicSystem sys = expand(m, NormMode::Off);
    REQUIRE(sys.components[0].poly.terms.empty());
}

TEST_CASE("expansion soundness: random circuits match forward") {
    std::mt19937_64 rng(101);
    std::uniform_real_distribution<double> point(-2.0, 2.0);
    for (int trial = 0; trial < 50; ++trial) {
        const int d = 2 + static_cast<int>(rng() % 3);  // up to 4 vars
        const int depth = 1 + static_cast<int>(rng() % 2);
        CircuitModel m = random_circuit(rng, d, depth, 2, 2, trial % 2 == 0, 2);
        const SymbolicSystem sys = expand(m, NormMode::Off);
        for (int i = 0; i < 100; ++i) {
            VectorXd x(d);
            for (int j = 0; j < d; ++j) x(j) = point(rng);
            const VectorXd y = forward(m, x, NormMode::Off).first;
            for (int c = 0; c < 2; ++c)
                REQUIRE(sys.components[static_cast<size_t>(c)].evaluate(x) ==
                        Catch::Approx(y(c)).margin(1e-9));
        }
        // Degree bound: product of interaction arities across layers.
        int bound = 1;
        for (const auto& l : m.layers) bound *= l.spec.group_size;
        for (const auto& comp : sys.components)
            REQUIRE(comp.poly.total_degree() <= bound);
    }
}

TEST_CASE("frozen-sigma folding matches Frozen forward") {
    std::mt19937_64 rng(55);
    std::uniform_real_distribution<double> point(-2.0, 2.0);
    for (int trial = 0; trial < 10; ++trial) {
        const int d = 2 + static_cast<int>(rng() % 2);
        CircuitModel m = random_circuit(rng, d, 1, 3, 2, true, d);
        randomize_norm(m, rng);
        const SymbolicSystem sys = expand(m, NormMode::Frozen);
        for (int i = 0; i < 100; ++i) {
            VectorXd x(d);
            for (int j = 0; j < d; ++j) x(j) = point(rng);
            const VectorXd y = forward(m, x, NormMode::Frozen).first;
            for (int c = 0; c < d; ++c)
                REQUIRE(sys.components[static_cast<size_t>(c)].evaluate(x) ==
                        Catch::Approx(y(c)).margin(1e-9));
        }
    }
}

TEST_CASE("expansion requires frozen statistics in Frozen mode") {
    CircuitModel m = product_model();
    m.norm_enabled = true;  // sigma present but never frozen
    REQUIRE_THROWS_AS(expand(m, NormMode::Frozen), StateError);
    m = freeze_norm(std::move(m));
    REQUIRE_NOTHROW(expand(m, NormMode::Frozen));
}

TEST_CASE("sin circuits expand to opaque affine-argument terms") {
    LayerSpec spec;
    spec.in_dim = 2;
    spec.linear_out_dim = 3;  // one product pair + one sin unit
    spec.group_size = 2;
    spec.primitives = {Primitive::Product, Primitive::Sin};
    CircuitModel m = init_model({spec}, 1, 1);
    m.norm_enabled = false;
    m.layers[0].weights << 1, 0, 0, 0, 1, 0, 2, -1, 0.5;
    m.head_weights << 0.0, 3.0, 0.0;  // output = 3*sin(2x - y + 0.5)

    const SymbolicSystem sys = expand(m, NormMode::Off);
    REQUIRE(sys.components[0].poly.terms.empty());
    REQUIRE(sys.components[0].sins.size() == 1);
    const auto& st = sys.components[0].sins[0];
    REQUIRE(st.coef == Catch::Approx(3.0).margin(1e-15));
    REQUIRE(st.argument.coefficient(mono({1, 0})) == Catch::Approx(2.0).margin(1e-15));
    REQUIRE(st.argument.coefficient(mono({0, 1})) == Catch::Approx(-1.0).margin(1e-15));
    REQUIRE(st.argument.coefficient(mono({0, 0})) == Catch::Approx(0.5).margin(1e-15));

    VectorXd x(2);
    x << 0.3, -0.8;
    REQUIRE(sys.components[0].evaluate(x) ==
            Catch::Approx(forward(m, x, NormMode::Off).first(0)).margin(1e-12));

    const std::string text = render(sys, 3, 0.0);
    REQUIRE(text.find("sin(") != std::string::npos);
}

TEST_CASE("render formatting contract") {
    SymbolicSystem sys;
    sys.state_dim = 2;
    sys.components.resize(2);
    sys.components[0].poly = Polynomial::zero(2);
    sys.components[0].poly.add(mono({1, 0}), -0.1);
    sys.components[0].poly.add(mono({0, 1}), 1.0);
    sys.components[1].poly = Polynomial::zero(2);

    std::string text = render(sys, 3);
    REQUIRE(text.find("dx/dt = −0.100·x + 1.000·y") != std::string::npos);
    REQUIRE(text.find("dy/dt = 0") != std::string::npos);

    // Ground-truth 2D second component, graded-lex order.
    sys.components[1].poly.add(mono({1, 1}), -0.5);
    sys.components[1].poly.add(mono({0, 2}), -0.025);
    sys.components[1].poly.add(mono({1, 0}), -2.0);
    sys.components[1].poly.add(mono({0, 1}), -0.1);
    text = render(sys, 3);
    REQUIRE(text.find("dy/dt = −2.000·x − 0.100·y − "
                      "0.500·x·y − 0.025·y²") != std::string::npos);
}

TEST_CASE("render suppresses tiny terms with a footer") {
    SymbolicSystem sys;
    sys.state_dim = 2;
    sys.components.resize(2);
    sys.components[0].poly = Polynomial::zero(2);
    sys.components[0].poly.add(mono({1, 0}), 0.5);
    sys.components[0].poly.add(mono({0, 1}), 1e-5);
    sys.components[1].poly = Polynomial::zero(2);
    const std::string text = render(sys, 3);
    REQUIRE(text.find("suppressed 1 terms") != std::string::npos);
    REQUIRE(text.find("·y") == std::string::npos);
}

TEST_CASE("render-parse round trip") {
    std::mt19937_64 rng(77);
    std::uniform_real_distribution<double> coef(-3.0, 3.0);
    SymbolicSystem sys;
    sys.state_dim = 2;
    sys.components.resize(2);
    for (auto& c : sys.components) c.poly = Polynomial::zero(2);
    sys.components[0].poly.add(mono({1, 0}), coef(rng));
    sys.components[0].poly.add(mono({0, 1}), coef(rng));
    sys.components[0].poly.add(mono({2, 0}), coef(rng));
    sys.components[1].poly.add(mono({1, 1}), coef(rng));
    sys.components[1].poly.add(mono({0, 2}), coef(rng));
    sys.components[1].poly.add(mono({0, 0}), coef(rng));

    const std::string text = render(sys, 6, 0.0);
    std::stringstream ss(text);
    std::string line;
    int comp = 0;
    while (std::getline(ss, line)) {
        if (line.rfind("d", 0) != 0) continue;
        const auto parsed = parse_rendered_line(line);
        const auto& poly = sys.components[static_cast<size_t>(comp)].poly;
        REQUIRE(parsed.size() == poly.terms.size());
        for (const auto& [m, c] : poly.terms) {
            std::string key;
            for (size_t v = 0; v < m.exponents.size(); ++v)
                for (int e = 0; e < m.exponents[v]; ++e) key += (v == 0 ? "x" : "y");
            REQUIRE(parsed.count(key) == 1);
            REQUIRE(parsed.at(key) == Catch::Approx(c).margin(1e-6));
        }
        ++comp;
    }
    REQUIRE(comp == 2);
}

TEST_CASE("compare reports matched, missing and spurious terms") {
    SymbolicSystem a;
    a.state_dim = 2;
    a.components.resize(2);
    for (auto& c : a.components) c.poly = Polynomial::zero(2);
    a.components[0].poly.add(mono({1, 0}), -0.1);
    a.components[0].poly.add(mono({0, 1}), 1.0);
    a.components[1].poly.add(mono({0, 2}), -0.025);

    // identical systems -> zero error
    const RecoveryReport same = compare(a, a);
    REQUIRE(same.max_abs_error == 0.0);
    REQUIRE(same.missing_count == 0);
    REQUIRE(same.spurious_count == 0);

    // paper-style recovered 2D first component
    SymbolicSystem b = a;
    b.components[0].poly = Polynomial::zero(2);
    b.components[0].poly.add(mono({1, 0}), -0.11);
    b.components[0].poly.add(mono({0, 1}), 1.00);
    b.components[1].poly = Polynomial::zero(2);
    b.components[1].poly.add(mono({2, 0}), 0.04);  // spurious x^2, missing y^2
    const RecoveryReport rep = compare(b, a);
    REQUIRE(rep.max_abs_error == Catch::Approx(0.01).margin(1e-12));
    REQUIRE(rep.missing_count == 1);
    REQUIRE(rep.spurious_count == 1);
    REQUIRE(rep.components[0].matched.size() == 2);

    SymbolicSystem wrong_dim;
    wrong_dim.state_dim = 3;
    wrong_dim.components.resize(3);
    REQUIRE_THROWS_AS(compare(wrong_dim, a), ArgumentError);
}
