#pragma once

// Classic SINDy baseline: explicit polynomial library, finite-difference
// derivative targets, sequentially thresholded least squares, and the
// parameter-count scaling formulas for both methods.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "acsindy/dynamics.hpp"
#include "acsindy/errors.hpp"
#include "acsindy/symbolic.hpp"

namespace acsindy {

/// Candidate-feature matrix: one column per monomial of total degree <= p,
/// graded-lex order, constant first.
struct SindyLibrary {
    MatrixXd theta;  // samples x features
    std::vector<Monomial> labels;
};

/// All exponent vectors over d variables with total degree <= p, graded-lex.
inline std::vector<Monomial> enumerate_monomials(int d, int p) {
    if (d < 1) throw ArgumentError("need at least one variable");
    if (p < 0) throw ArgumentError("degree must be >= 0");
    std::vector<Monomial> out;
    std::vector<int> exp(static_cast<size_t>(d), 0);
    // Within a degree, recurse with the leading exponent largest-first.
    auto rec = [&](auto&& self, int var, int remaining) -> void {
        if (var == d - 1) {
            exp[static_cast<size_t>(var)] = remaining;
            out.push_back({exp});
            return;
        }
        for (int e = remaining; e >= 0; --e) {
            exp[static_cast<size_t>(var)] = e;
            self(self, var + 1, remaining - e);
        }
        exp[static_cast<size_t>(var)] = 0;
    };
    for (int deg = 0; deg <= p; ++deg) rec(rec, 0, deg);
    return out;
}

inline SindyLibrary build_library(const MatrixXd& states, int degree) {
    if (degree < 1) throw ArgumentError("library degree must be >= 1");
    const int d = static_cast<int>(states.cols());
    SindyLibrary lib;
    lib.labels = enumerate_monomials(d, degree);
    lib.theta.resize(states.rows(), static_cast<long>(lib.labels.size()));
    for (size_t j = 0; j < lib.labels.size(); ++j) {
        Eigen::VectorXd col = Eigen::VectorXd::Ones(states.rows());
        for (int v = 0; v < d; ++v)
            for (int e = 0; e < lib.labels[j].exponents[static_cast<size_t>(v)]; ++e)
                col.array() *= states.col(v).array();
        lib.theta.col(static_cast<long>(j)) = col;
    }
    return lib;
}

/// Second-order finite differences: central in the interior, one-sided at
/// the endpoints.
inline MatrixXd finite_diff_derivatives(const Trajectory& traj) {
    const long n = traj.rows();
    if (n < 3) throw ArgumentError("need at least 3 rows for finite differences");
    const double dt = traj.dt();
    MatrixXd d(n, traj.dim());
    d.row(0) = (-3.0 * traj.states.row(0) + 4.0 * traj.states.row(1) - traj.states.row(2)) /
               (2.0 * dt);
    for (long i = 1; i + 1 < n; ++i)
        d.row(i) = (traj.states.row(i + 1) - traj.states.row(i - 1)) / (2.0 * dt);
    d.row(n - 1) =
        (3.0 * traj.states.row(n - 1) - 4.0 * traj.states.row(n - 2) + traj.states.row(n - 3)) /
        (2.0 * dt);
    return d;
}

struct StlsqResult {
    MatrixXd coefficients;  // features x components
    std::vector<bool> ridge_warning;
    int iterations = 0;
};

namespace detail {

inline VectorXd solve_active(const MatrixXd& A, const VectorXd& b, bool& ridge_used) {
    Eigen::ColPivHouseholderQR<MatrixXd> qr(A);
    if (qr.rank() == A.cols()) return qr.solve(b);
    ridge_used = true;
    const MatrixXd gram =
        A.transpose() * A + 1e-10 * MatrixXd::Identity(A.cols(), A.cols());
    return gram.ldlt().solve(A.transpose() * b);
}

}  // namespace detail

/// Sequentially thresholded least squares: solve on the active columns,
/// zero coefficients with |c| < threshold, repeat to a fixed point.
inline StlsqResult stlsq(const SindyLibrary& lib, const MatrixXd& targets, double threshold,
                         int max_iters = 20) {
    if (threshold < 0.0) throw ArgumentError("threshold must be >= 0");
    if (max_iters < 1) throw ArgumentError("max_iters must be >= 1");
    if (targets.rows() != lib.theta.rows())
        throw ArgumentError("targets row count must match library");

    const long nf = lib.theta.cols();
    const long nc = targets.cols();
    StlsqResult res;
    res.coefficients = MatrixXd::Zero(nf, nc);
    res.ridge_warning.assign(static_cast<size_t>(nc), false);

    for (long c = 0; c < nc; ++c) {
        std::vector<long> active(static_cast<size_t>(nf));
        for (long j = 0; j < nf; ++j) active[static_cast<size_t>(j)] = j;
        VectorXd coef = VectorXd::Zero(nf);
        bool ridge = false;
        int it = 0;
        for (; it < max_iters; ++it) {
            MatrixXd A(lib.theta.rows(), static_cast<long>(active.size()));
            for (size_t j = 0; j < active.size(); ++j)
                A.col(static_cast<long>(j)) = lib.theta.col(active[j]);
            const VectorXd sol = detail::solve_active(A, targets.col(c), ridge);
            coef.setZero();
            for (size_t j = 0; j < active.size(); ++j) coef(active[j]) = sol(static_cast<long>(j));

            std::vector<long> next;
            for (long j : active)
                if (std::abs(coef(j)) >= threshold) next.push_back(j);
            for (long j = 0; j < nf; ++j)
                if (std::abs(coef(j)) < threshold) coef(j) = 0.0;
            if (next == active || next.empty()) {
                active = std::move(next);
                break;
            }
            active = std::move(next);
        }
        res.coefficients.col(c) = coef;
        res.ridge_warning[static_cast<size_t>(c)] = ridge;
        res.iterations = std::max(res.iterations, it + 1);
    }
    return res;
}

/// Library coefficients as a symbolic system (for side-by-side rendering).
inline SymbolicSystem stlsq_to_system(const SindyLibrary& lib, const MatrixXd& coefficients) {
    SymbolicSystem sys;
    sys.state_dim = static_cast<int>(coefficients.cols());
    for (long c = 0; c < coefficients.cols(); ++c) {
        ComponentExpr e;
        e.poly = Polynomial::zero(static_cast<int>(lib.labels.empty()
                                                       ? coefficients.cols()
                                                       : lib.labels[0].exponents.size()));
        for (size_t j = 0; j < lib.labels.size(); ++j)
            e.poly.add(lib.labels[j], coefficients(static_cast<long>(j), c));
        sys.components.push_back(std::move(e));
    }
    return sys;
}

// ---------------------------------------------------------------------------
// Parameter-count formulas

namespace detail {

inline std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b) {
    std::uint64_t r;
    if (__builtin_mul_overflow(a, b, &r)) throw RangeError("parameter count overflow");
    return r;
}

inline std::uint64_t checked_add(std::uint64_t a, std::uint64_t b) {
    std::uint64_t r;
    if (__builtin_add_overflow(a, b, &r)) throw RangeError("parameter count overflow");
    return r;
}

// C(n, k) with overflow checking.
inline std::uint64_t binomial(std::uint64_t n, std::uint64_t k) {
    if (k > n) return 0;
    k = std::min(k, n - k);
    std::uint64_t r = 1;
    for (std::uint64_t i = 1; i <= k; ++i) {
        r = checked_mul(r, n - k + i);
        r /= i;
    }
    return r;
}

}  // namespace detail

/// Number of monomials of total degree <= p in d variables:
/// sum_{k=0..p} C(d+k-1, k).
inline std::uint64_t sindy_library_size(int d, int p) {
    if (d < 1 || p < 0) throw ArgumentError("require d >= 1, p >= 0");
    std::uint64_t total = 0;
    for (int k = 0; k <= p; ++k)
        total = detail::checked_add(
            total, detail::binomial(static_cast<std::uint64_t>(d + k - 1),
                                    static_cast<std::uint64_t>(k)));
    return total;
}

/// Compositional parameter count: m terms, each a product of p affine forms
/// over d inputs plus constant -> m * p * (d+1).
inline std::uint64_t ac_param_count(int d, int p, int m) {
    if (d < 1 || p < 1 || m < 1) throw ArgumentError("require d, p, m >= 1");
    return detail::checked_mul(
        detail::checked_mul(static_cast<std::uint64_t>(m), static_cast<std::uint64_t>(p)),
        static_cast<std::uint64_t>(d) + 1);
}

/// The m = d regime used for the scaling curves.
inline std::uint64_t ac_param_count_linear_terms(int d, int p) {
    return ac_param_count(d, p, d);
}

}  // namespace acsindy
