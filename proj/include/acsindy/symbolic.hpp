#pragma once

// Expansion of a product circuit into canonical sparse polynomials, text
// rendering of governing equations, and recovery scoring against a known
// ground-truth system.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "acsindy/circuit.hpp"
#include "acsindy/errors.hpp"

namespace acsindy {

/// Exponent multi-index over the state variables.
struct Monomial {
    std::vector<int> exponents;

    int degree() const {
        int d = 0;
        for (int e : exponents) d += e;
        return d;
    }
    bool is_constant() const { return degree() == 0; }
    bool operator==(const Monomial& o) const { return exponents == o.exponents; }

    static Monomial constant(int num_vars) { return {std::vector<int>(num_vars, 0)}; }
    static Monomial variable(int num_vars, int idx) {
        Monomial m = constant(num_vars);
        m.exponents[static_cast<size_t>(idx)] = 1;
        return m;
    }
};

/// Graded lexicographic: lower total degree first; within a degree, larger
/// leading exponents first (1, x, y, x^2, xy, y^2, ...).
struct GradedLexLess {
    bool operator()(const Monomial& a, const Monomial& b) const {
        const int da = a.degree(), db = b.degree();
        if (da != db) return da < db;
        for (size_t i = 0; i < a.exponents.size(); ++i)
            if (a.exponents[i] != b.exponents[i]) return a.exponents[i] > b.exponents[i];
        return false;
    }
};

using CoefMap = std::map<Monomial, double, GradedLexLess>;

/// Sparse multivariate polynomial; coefficients exactly 0 are never stored.
struct Polynomial {
    int num_vars = 0;
    CoefMap terms;

    static Polynomial zero(int num_vars) { return {num_vars, {}}; }
    static Polynomial constant(int num_vars, double c) {
        Polynomial p = zero(num_vars);
        p.add(Monomial::constant(num_vars), c);
        return p;
    }
    static Polynomial variable(int num_vars, int idx) {
        Polynomial p = zero(num_vars);
        p.add(Monomial::variable(num_vars, idx), 1.0);
        return p;
    }

    void add(const Monomial& m, double c) {
        if (c == 0.0) return;
        auto it = terms.find(m);
        if (it == terms.end()) {
            terms.emplace(m, c);
        } else {
            it->second += c;
            if (it->second == 0.0) terms.erase(it);
        }
    }

    Polynomial& add_scaled(const Polynomial& o, double s) {
        if (s == 0.0) return *this;
        for (const auto& [m, c] : o.terms) add(m, s * c);
        return *this;
    }

    Polynomial operator*(const Polynomial& o) const {
        Polynomial r = zero(num_vars);
        for (const auto& [ma, ca] : terms)
            for (const auto& [mb, cb] : o.terms) {
                Monomial m = ma;
                for (size_t i = 0; i < m.exponents.size(); ++i) m.exponents[i] += mb.exponents[i];
                r.add(m, ca * cb);
            }
        return r;
    }

    double evaluate(const VectorXd& x) const {
        double v = 0.0;
        for (const auto& [m, c] : terms) {
            double t = c;
            for (size_t i = 0; i < m.exponents.size(); ++i)
                for (int e = 0; e < m.exponents[i]; ++e) t *= x(static_cast<long>(i));
            v += t;
        }
        return v;
    }

    int total_degree() const {
        int d = 0;
        for (const auto& [m, c] : terms) d = std::max(d, m.degree());
        return d;
    }

    void drop_below(double tol) {
        for (auto it = terms.begin(); it != terms.end();)
            it = std::abs(it->second) < tol ? terms.erase(it) : std::next(it);
    }

    double coefficient(const Monomial& m) const {
        auto it = terms.find(m);
        return it == terms.end() ? 0.0 : it->second;
    }
};

/// Opaque non-polynomial term: coef * sin(affine argument).
struct SinTerm {
    double coef = 0.0;
    Polynomial argument;  // total degree <= 1
};

struct ComponentExpr {
    Polynomial poly;
    std::vector<SinTerm> sins;

    double evaluate(const VectorXd& x) const {
        double v = poly.evaluate(x);
        for (const auto& s : sins) v += s.coef * std::sin(s.argument.evaluate(x));
        return v;
    }
};

/// One expression per state derivative component.
struct SymbolicSystem {
    int state_dim = 0;
    std::vector<ComponentExpr> components;
};

// Coefficients below this are suppressed when rendering recovered systems.
inline constexpr double kReportDropTol = 1e-3;

// ---------------------------------------------------------------------------
// Expansion

namespace detail {

struct SymValue {
    Polynomial poly;
    std::vector<SinTerm> sins;

    static SymValue zero(int nv) { return {Polynomial::zero(nv), {}}; }

    void add_scaled(const SymValue& o, double s) {
        if (s == 0.0) return;
        poly.add_scaled(o.poly, s);
        for (const auto& st : o.sins) add_sin(s * st.coef, st.argument);
    }
    void add_sin(double coef, const Polynomial& arg) {
        if (coef == 0.0) return;
        for (auto& st : sins)
            if (st.argument.terms == arg.terms) {
                st.coef += coef;
                return;
            }
        sins.push_back({coef, arg});
    }
};

inline std::vector<SymValue> affine_map(const MatrixXd& w_eff,
                                        const std::vector<SymValue>& in, int nv) {
    std::vector<SymValue> out;
    out.reserve(static_cast<size_t>(w_eff.rows()));
    for (long r = 0; r < w_eff.rows(); ++r) {
        SymValue v = SymValue::zero(nv);
        for (long c = 0; c < w_eff.cols() - 1; ++c)
            v.add_scaled(in[static_cast<size_t>(c)], w_eff(r, c));
        v.poly.add(Monomial::constant(nv), w_eff(r, w_eff.cols() - 1));
        out.push_back(std::move(v));
    }
    return out;
}

}  // namespace detail

/// Propagates algebraic structure through the circuit: affine maps act on
/// coefficient maps, product nodes convolve exponent vectors, and (with
/// mode Frozen) the per-feature divisors 1/(sigma+eps) fold into the
/// coefficients. Sin nodes stay opaque and must have affine arguments.
inline SymbolicSystem expand(const CircuitModel& m, NormMode mode, double drop_tol = 0.0) {
    if (mode == NormMode::Accumulate) throw ArgumentError("expand supports Off or Frozen only");
    const int nv = m.input_dim;

    auto fold_norm = [&](std::vector<detail::SymValue>& feats, const FeatureNormState& norm) {
        if (mode != NormMode::Frozen) return;
        if (!norm.frozen)
            throw StateError("normalization statistics must be frozen before expansion");
        const VectorXd div = norm_divisors(norm);
        for (size_t i = 0; i < feats.size(); ++i) {
            const double s = 1.0 / div(static_cast<long>(i));
            detail::SymValue scaled = detail::SymValue::zero(nv);
            scaled.add_scaled(feats[i], s);
            feats[i] = std::move(scaled);
        }
    };

    std::vector<detail::SymValue> cur;
    std::vector<detail::SymValue> raw_inputs;
    for (int i = 0; i < nv; ++i) {
        detail::SymValue v = detail::SymValue::zero(nv);
        v.poly = Polynomial::variable(nv, i);
        raw_inputs.push_back(v);
    }
    cur = raw_inputs;

    for (const auto& layer : m.layers) {
        auto feats = detail::affine_map(layer.effective(), cur, nv);
        fold_norm(feats, layer.norm);
        std::vector<detail::SymValue> outs;
        for (const auto& g : layer_groups(layer.spec)) {
            if (g.primitive == Primitive::Sin) {
                const auto& a = feats[static_cast<size_t>(g.start)];
                if (!a.sins.empty())
                    throw ArgumentError("sin of a sin-bearing feature is not expandable");
                if (a.poly.total_degree() > 1)
                    throw ArgumentError("sin argument must be affine for expansion");
                detail::SymValue v = detail::SymValue::zero(nv);
                v.add_sin(1.0, a.poly);
                outs.push_back(std::move(v));
                continue;
            }
            detail::SymValue v = detail::SymValue::zero(nv);
            v.poly = Polynomial::constant(nv, 1.0);
            for (int j = 0; j < g.size; ++j) {
                const auto& f = feats[static_cast<size_t>(g.start + j)];
                if (!f.sins.empty())
                    throw ArgumentError("sin feature feeding a product group is not expandable");
                v.poly = v.poly * f.poly;
            }
            outs.push_back(std::move(v));
        }
        cur = std::move(outs);
    }

    std::vector<detail::SymValue> head_in = cur;
    if (m.head_skip)
        head_in.insert(head_in.end(), raw_inputs.begin(), raw_inputs.end());
    fold_norm(head_in, m.head_norm);

    auto outs = detail::affine_map(m.head_effective(), head_in, nv);
    SymbolicSystem sys;
    sys.state_dim = nv;
    for (auto& v : outs) {
        ComponentExpr e;
        e.poly = std::move(v.poly);
        e.sins = std::move(v.sins);
        if (drop_tol > 0.0) {
            e.poly.drop_below(drop_tol);
            std::erase_if(e.sins, [&](const SinTerm& s) { return std::abs(s.coef) < drop_tol; });
        }
        sys.components.push_back(std::move(e));
    }
    return sys;
}

/// Expands using the model's own evaluation mode (Frozen when normalization
/// is enabled, Off otherwise).
inline SymbolicSystem expand(const CircuitModel& m, double drop_tol = 0.0) {
    return expand(m, m.eval_mode(), drop_tol);
}

// ---------------------------------------------------------------------------
// Rendering

namespace detail {

inline std::string superscript(int e) {
    static const char* digits[10] = {"⁰", "¹", "²", "³", "⁴",
                                     "⁵", "⁶", "⁷", "⁸", "⁹"};
    std::string s;
    for (char c : std::to_string(e)) s += digits[c - '0'];
    return s;
}

inline std::string format_coef(double c, int precision) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", precision, std::abs(c));
    return buf;
}

inline std::vector<std::string> variable_names(int n) {
    if (n <= 3) {
        std::vector<std::string> names = {"x", "y", "z"};
        names.resize(static_cast<size_t>(n));
        return names;
    }
    std::vector<std::string> names;
    for (int i = 1; i <= n; ++i) names.push_back("x" + std::to_string(i));
    return names;
}

inline std::string monomial_text(const Monomial& mono, const std::vector<std::string>& names) {
    std::string s;
    for (size_t i = 0; i < mono.exponents.size(); ++i) {
        const int e = mono.exponents[i];
        if (e == 0) continue;
        if (!s.empty()) s += "·";
        s += names[i];
        if (e > 1) s += superscript(e);
    }
    return s;
}

inline std::string polynomial_text(const Polynomial& p, const std::vector<SinTerm>& sins,
                                   const std::vector<std::string>& names, int precision,
                                   double drop_tol, long& suppressed) {
    const std::string minus = "−";
    std::string s;
    auto push_term = [&](double coef, const std::string& body) {
        const bool neg = coef < 0.0;
        if (s.empty()) {
            if (neg) s += minus;
        } else {
            s += neg ? " " + minus + " " : " + ";
        }
        s += format_coef(coef, precision);
        if (!body.empty()) s += "·" + body;
    };
    for (const auto& [mono, coef] : p.terms) {
        if (std::abs(coef) < drop_tol) {
            ++suppressed;
            continue;
        }
        push_term(coef, monomial_text(mono, names));
    }
    for (const auto& st : sins) {
        if (std::abs(st.coef) < drop_tol) {
            ++suppressed;
            continue;
        }
        long dummy = 0;
        push_term(st.coef, "sin(" + polynomial_text(st.argument, {}, names, precision, 0.0, dummy) + ")");
    }
    if (s.empty()) s = "0";
    return s;
}

}  // namespace detail

/// One line per component, graded-lex term order, coefficients rounded to
/// `precision` decimals. Terms below drop_tol are omitted and counted in a
/// trailing footer.
inline std::string render(const SymbolicSystem& sys, int precision = 3,
                          double drop_tol = kReportDropTol) {
    const auto names = detail::variable_names(sys.state_dim);
    long suppressed = 0;
    std::string out;
    for (size_t i = 0; i < sys.components.size(); ++i) {
        const auto& comp = sys.components[i];
        const std::string label =
            i < names.size() ? names[i] : "x" + std::to_string(i + 1);
        out += "d" + label + "/dt = " +
               detail::polynomial_text(comp.poly, comp.sins, names, precision, drop_tol,
                                       suppressed) +
               "\n";
    }
    if (suppressed > 0) {
        char buf[96];
        std::snprintf(buf, sizeof(buf), "# suppressed %ld terms with |coef| < %g\n", suppressed,
                      drop_tol);
        out += buf;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Recovery scoring

struct TermDiff {
    Monomial monomial;
    double truth = 0.0;
    double recovered = 0.0;
};

struct ComponentReport {
    std::vector<TermDiff> matched;
    std::vector<TermDiff> missing;   // in truth, absent from recovered
    std::vector<TermDiff> spurious;  // in recovered, absent from truth
    double max_abs_error = 0.0;      // over matched terms
};

struct RecoveryReport {
    std::vector<ComponentReport> components;
    double max_abs_error = 0.0;
    long missing_count = 0;
    long spurious_count = 0;
};

/// Per-component term diff between a recovered system and ground truth.
/// Operates on the maps as given; any suppression is the caller's choice.
inline RecoveryReport compare(const SymbolicSystem& recovered, const SymbolicSystem& truth) {
    if (recovered.state_dim != truth.state_dim ||
        recovered.components.size() != truth.components.size())
        throw ArgumentError("state dimension mismatch in compare");
    RecoveryReport rep;
    for (size_t i = 0; i < truth.components.size(); ++i) {
        const auto& rec = recovered.components[i].poly;
        const auto& tru = truth.components[i].poly;
        ComponentReport cr;
        for (const auto& [m, tc] : tru.terms) {
            auto it = rec.terms.find(m);
            if (it == rec.terms.end()) {
                cr.missing.push_back({m, tc, 0.0});
            } else {
                cr.matched.push_back({m, tc, it->second});
                cr.max_abs_error = std::max(cr.max_abs_error, std::abs(it->second - tc));
            }
        }
        for (const auto& [m, rc] : rec.terms)
            if (tru.terms.find(m) == tru.terms.end()) cr.spurious.push_back({m, 0.0, rc});
        rep.max_abs_error = std::max(rep.max_abs_error, cr.max_abs_error);
        rep.missing_count += static_cast<long>(cr.missing.size());
        rep.spurious_count += static_cast<long>(cr.spurious.size());
        rep.components.push_back(std::move(cr));
    }
    return rep;
}

}  // namespace acsindy
