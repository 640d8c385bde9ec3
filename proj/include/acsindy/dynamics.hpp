#pragma once

// Benchmark dynamical systems and trajectory generation: fixed-step RK4
// integration, Gaussian observation noise, temporal splits, CSV round-trip.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Dense>

#include "acsindy/errors.hpp"

namespace acsindy {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// A uniformly sampled trajectory: times(i) goes with states.row(i).
struct Trajectory {
    VectorXd times;
    MatrixXd states;  // rows x state_dim

    long rows() const { return states.rows(); }
    int dim() const { return static_cast<int>(states.cols()); }

    /// Uniform step size. Validates spacing is constant to 1e-12 relative.
    double dt() const {
        if (times.size() < 2) throw ArgumentError("trajectory needs at least 2 rows for dt");
        const double step = times(1) - times(0);
        if (!(step > 0.0)) throw ArgumentError("trajectory times must be strictly increasing");
        for (long i = 1; i + 1 < times.size(); ++i) {
            const double s = times(i + 1) - times(i);
            if (std::abs(s - step) > 1e-12 * std::max(1.0, std::abs(step)))
                throw ArgumentError("trajectory time grid is not uniform");
        }
        return step;
    }

    void validate() const {
        if (times.size() != states.rows())
            throw ArgumentError("trajectory times/states row mismatch");
        if (states.rows() >= 2) (void)dt();
    }
};

enum class SystemKind { Nonlinear2D, Lorenz, LorenzForced };

/// One of the benchmark systems. Lorenz params default to (10, 28, 8/3);
/// the forced variant adds amplitude*sin(x) to the first component.
struct BenchmarkSystem {
    SystemKind kind = SystemKind::Nonlinear2D;
    std::vector<double> params;

    static BenchmarkSystem nonlinear2d() { return {SystemKind::Nonlinear2D, {}}; }
    static BenchmarkSystem lorenz(double sigma = 10.0, double rho = 28.0, double beta = 8.0 / 3.0) {
        return {SystemKind::Lorenz, {sigma, rho, beta}};
    }
    static BenchmarkSystem lorenz_forced(double sigma = 10.0, double rho = 28.0,
                                         double beta = 8.0 / 3.0, double amplitude = 0.1) {
        return {SystemKind::LorenzForced, {sigma, rho, beta, amplitude}};
    }

    int dim() const { return kind == SystemKind::Nonlinear2D ? 2 : 3; }
};

inline VectorXd eval_vector_field(const BenchmarkSystem& system, const VectorXd& x) {
    if (x.size() != system.dim())
        throw ArgumentError("state dimension does not match system dimension");
    VectorXd f(x.size());
    switch (system.kind) {
        case SystemKind::Nonlinear2D: {
            const double u = x(0), v = x(1);
            f(0) = -0.1 * u + v;
            f(1) = -2.0 * u - 0.1 * v - 0.5 * u * v - 0.025 * v * v;
            break;
        }
        case SystemKind::Lorenz:
        case SystemKind::LorenzForced: {
            const double sigma = system.params.at(0);
            const double rho = system.params.at(1);
            const double beta = system.params.at(2);
            const double u = x(0), v = x(1), w = x(2);
            f(0) = sigma * (v - u);
            f(1) = u * (rho - w) - v;
            f(2) = u * v - beta * w;
            if (system.kind == SystemKind::LorenzForced) f(0) += system.params.at(3) * std::sin(u);
            break;
        }
    }
    return f;
}

/// Classical fixed-step RK4 over an arbitrary vector field. The trajectory
/// has steps+1 rows starting at x0.
template <class Field>
    requires std::invocable<Field&, const VectorXd&>
Trajectory integrate_rk4(Field&& field, const VectorXd& x0, double dt, long steps,
                         double t0 = 0.0) {
    if (!(dt > 0.0)) throw ArgumentError("dt must be positive");
    if (steps < 1) throw ArgumentError("steps must be >= 1");
    if (!x0.allFinite()) throw ArgumentError("x0 must be finite");

    Trajectory traj;
    traj.times.resize(steps + 1);
    traj.states.resize(steps + 1, x0.size());
    traj.states.row(0) = x0;
    VectorXd s = x0;
    for (long i = 0; i < steps; ++i) {
        traj.times(i) = t0 + static_cast<double>(i) * dt;
        const VectorXd k1 = field(s);
        const VectorXd k2 = field(VectorXd(s + 0.5 * dt * k1));
        const VectorXd k3 = field(VectorXd(s + 0.5 * dt * k2));
        const VectorXd k4 = field(VectorXd(s + dt * k3));
        s += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if (!s.allFinite())
            throw NumericError("integration diverged at step " + std::to_string(i + 1));
        traj.states.row(i + 1) = s;
    }
    traj.times(steps) = t0 + static_cast<double>(steps) * dt;
    return traj;
}

inline Trajectory integrate_rk4(const BenchmarkSystem& system, const VectorXd& x0, double dt,
                                long steps, double t0 = 0.0) {
    return integrate_rk4([&](const VectorXd& s) { return eval_vector_field(system, s); }, x0, dt,
                         steps, t0);
}

/// Perturbs every state entry by i.i.d. N(0, sigma^2). Times are untouched.
/// Deterministic for a fixed seed.
inline Trajectory add_gaussian_noise(const Trajectory& traj, double sigma, std::uint64_t seed) {
    if (sigma < 0.0) throw ArgumentError("noise sigma must be >= 0");
    Trajectory out = traj;
    if (sigma == 0.0) return out;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, sigma);
    for (long i = 0; i < out.states.rows(); ++i)
        for (long j = 0; j < out.states.cols(); ++j) out.states(i, j) += dist(rng);
    return out;
}

/// Contiguous temporal split train -> val -> test. Val and test lengths are
/// floored; the remainder goes to train.
inline std::tuple<Trajectory, Trajectory, Trajectory> split_trajectory(
    const Trajectory& traj, double train_frac, double val_frac, double test_frac) {
    if (!(train_frac > 0.0 && val_frac > 0.0 && test_frac > 0.0))
        throw ArgumentError("split fractions must be positive");
    if (std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-9)
        throw ArgumentError("split fractions must sum to 1");
    const long n = traj.rows();
    const long n_val = static_cast<long>(std::floor(val_frac * static_cast<double>(n)));
    const long n_test = static_cast<long>(std::floor(test_frac * static_cast<double>(n)));
    const long n_train = n - n_val - n_test;
    if (n_train < 1 || n_val < 1 || n_test < 1)
        throw ArgumentError("split would produce an empty segment");

    auto slice = [&](long start, long len) {
        Trajectory t;
        t.times = traj.times.segment(start, len);
        t.states = traj.states.middleRows(start, len);
        return t;
    };
    return {slice(0, n_train), slice(n_train, n_val), slice(n_train + n_val, n_test)};
}

// ---------------------------------------------------------------------------
// CSV round-trip. Header "t,x1,...,xn", 17 significant digits per value.

inline std::string format_g17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline void save_trajectory_csv(const std::string& path, const Trajectory& traj) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << "t";
    for (int j = 0; j < traj.dim(); ++j) out << ",x" << (j + 1);
    out << "\n";
    for (long i = 0; i < traj.rows(); ++i) {
        out << format_g17(traj.times(i));
        for (int j = 0; j < traj.dim(); ++j) out << ',' << format_g17(traj.states(i, j));
        out << "\n";
    }
    if (!out) throw IoError("write failed: " + path);
}

inline Trajectory load_trajectory_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open for reading: " + path);
    std::string line;
    if (!std::getline(in, line)) throw IoError("empty trajectory file: " + path);
    long cols = static_cast<long>(std::count(line.begin(), line.end(), ',')) + 1;
    if (cols < 2) throw IoError("malformed trajectory header: " + path);

    std::vector<double> values;
    long rows = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        long c = 0;
        while (std::getline(ss, cell, ',')) {
            values.push_back(std::stod(cell));
            ++c;
        }
        if (c != cols) throw IoError("ragged trajectory row in " + path);
        ++rows;
    }
    Trajectory traj;
    traj.times.resize(rows);
    traj.states.resize(rows, cols - 1);
    for (long i = 0; i < rows; ++i) {
        traj.times(i) = values[static_cast<size_t>(i * cols)];
        for (long j = 1; j < cols; ++j)
            traj.states(i, j - 1) = values[static_cast<size_t>(i * cols + j)];
    }
    traj.validate();
    return traj;
}

}  // namespace acsindy
