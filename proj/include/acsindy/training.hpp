#pragma once

// Multi-step Euler-rollout training: forward-Euler composition of a shared
// dynamics model, squared-error supervision over horizons 1..K, exact
// backpropagation through the rollout, Adam, and plateau detection.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "acsindy/circuit.hpp"
#include "acsindy/dynamics.hpp"
#include "acsindy/errors.hpp"

namespace acsindy {

struct TrainConfig {
    double learning_rate = 1e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    int horizon = 10;  // K
    int batch_size = 128;
    int max_epochs = 400;
    int plateau_window = 20;
    double plateau_rel_tol = 1e-3;
    std::uint64_t seed = 0;
    double dt = 0.01;
    bool use_norm = true;
    bool warmup_norm = true;
    bool stop_on_plateau = true;

    void validate() const {
        if (horizon < 1) throw ArgumentError("horizon K must be >= 1");
        if (!(learning_rate > 0.0)) throw ArgumentError("learning_rate must be positive");
        if (plateau_window < 2) throw ArgumentError("plateau_window must be >= 2");
        if (batch_size < 1) throw ArgumentError("batch_size must be >= 1");
        if (max_epochs < 1) throw ArgumentError("max_epochs must be >= 1");
        if (!(dt > 0.0)) throw ArgumentError("dt must be positive");
    }
    NormMode mode() const { return use_norm ? NormMode::Frozen : NormMode::Off; }
};

struct AdamState {
    ParamBlocks m;
    ParamBlocks v;
    long step = 0;

    static AdamState zeros_like(const CircuitModel& model) {
        return {ParamBlocks::zeros_like(model), ParamBlocks::zeros_like(model), 0};
    }
};

struct TrainReport {
    enum class Status { Completed, Plateaued, Diverged };
    std::vector<double> train_loss;
    std::vector<double> val_loss;
    std::vector<long> plateau_epochs;  // 1-based epoch indices
    double wall_seconds = 0.0;
    Status status = Status::Completed;
};

inline const char* to_string(TrainReport::Status s) {
    switch (s) {
        case TrainReport::Status::Completed: return "completed";
        case TrainReport::Status::Plateaued: return "plateaued";
        case TrainReport::Status::Diverged: return "diverged";
    }
    return "unknown";
}

// ---------------------------------------------------------------------------
// Rollout and multi-step loss

/// K forward-Euler applications of the same model; returns the K predicted
/// states after s0.
inline MatrixXd rollout(const CircuitModel& model, const VectorXd& s0, int K, double dt,
                        NormMode mode) {
    if (K < 1) throw ArgumentError("rollout horizon must be >= 1");
    if (s0.size() != model.input_dim || model.input_dim != model.output_dim)
        throw ArgumentError("rollout requires matching state/model dims");
    MatrixXd out(K, s0.size());
    VectorXd s = s0;
    for (int k = 0; k < K; ++k) {
        const ForwardTrace tr = forward_batch(model, s.transpose(), mode);
        s += dt * tr.output.row(0).transpose();
        if (!s.allFinite())
            throw NumericError("rollout diverged at step " + std::to_string(k + 1));
        out.row(k) = s;
    }
    return out;
}

inline MatrixXd rollout(const CircuitModel& model, const VectorXd& s0, int K, double dt) {
    return rollout(model, s0, K, dt, model.eval_mode());
}

struct BatchLoss {
    double loss = 0.0;
    ParamGrads grads;
    MatrixXd input_grad;  // d loss / d s0, one row per sample
};

/// Mean over the batch of the K-step squared-error sum, with exact gradients
/// through the K-fold Euler composition (parameters shared across steps).
inline BatchLoss multi_step_loss_batch(const CircuitModel& model, const MatrixXd& X0,
                                       const std::vector<MatrixXd>& targets, double dt,
                                       NormMode mode, bool want_grads) {
    const int K = static_cast<int>(targets.size());
    if (K < 1) throw ArgumentError("need at least one target step");
    const long B = X0.rows();

    std::vector<ForwardTrace> traces;
    std::vector<MatrixXd> preds(static_cast<size_t>(K));
    traces.reserve(static_cast<size_t>(K));
    MatrixXd S = X0;
    double loss = 0.0;
    for (int k = 0; k < K; ++k) {
        traces.push_back(forward_batch(model, S, mode));
        S += dt * traces.back().output;
        if (!S.allFinite())
            throw NumericError("rollout diverged at step " + std::to_string(k + 1));
        preds[static_cast<size_t>(k)] = S;
        loss += (S - targets[static_cast<size_t>(k)]).squaredNorm();
    }
    loss /= static_cast<double>(B);

    BatchLoss res;
    res.loss = loss;
    if (!want_grads) return res;

    res.grads = ParamBlocks::zeros_like(model);
    MatrixXd lambda = MatrixXd::Zero(B, model.output_dim);
    for (int k = K - 1; k >= 0; --k) {
        lambda += (2.0 / static_cast<double>(B)) *
                  (preds[static_cast<size_t>(k)] - targets[static_cast<size_t>(k)]);
        const BackwardResult br =
            backward_batch(model, traces[static_cast<size_t>(k)], MatrixXd(dt * lambda));
        res.grads += br.grads;
        lambda += br.input_grad;
    }
    res.input_grad = std::move(lambda);
    return res;
}

inline void gather_plain(const Trajectory& traj, const std::vector<long>& starts, int K,
                         MatrixXd& X0, std::vector<MatrixXd>& targets) {
    const long B = static_cast<long>(starts.size());
    X0.resize(B, traj.dim());
    targets.assign(static_cast<size_t>(K), MatrixXd(B, traj.dim()));
    for (long b = 0; b < B; ++b) {
        const long t = starts[static_cast<size_t>(b)];
        if (t < 0 || t + K >= traj.rows())
            throw ArgumentError("start index " + std::to_string(t) + " out of range");
        X0.row(b) = traj.states.row(t);
        for (int k = 0; k < K; ++k)
            targets[static_cast<size_t>(k)].row(b) = traj.states.row(t + k + 1);
    }
}

/// Spec-facing wrapper over a trajectory and explicit start indices.
inline std::pair<double, ParamGrads> multi_step_loss(const CircuitModel& model,
                                                     const Trajectory& traj,
                                                     const std::vector<long>& starts, int K,
                                                     double dt, NormMode mode) {
    MatrixXd X0;
    std::vector<MatrixXd> targets;
    gather_plain(traj, starts, K, X0, targets);
    BatchLoss r = multi_step_loss_batch(model, X0, targets, dt, mode, /*want_grads=*/true);
    return {r.loss, std::move(r.grads)};
}

// ---------------------------------------------------------------------------
// Adam

namespace detail {

inline void adam_update_matrix(MatrixXd& w, const MatrixXd* mask, const MatrixXd& g, MatrixXd& m,
                               MatrixXd& v, long step, const TrainConfig& cfg) {
    m = cfg.adam_beta1 * m + (1.0 - cfg.adam_beta1) * g;
    v = cfg.adam_beta2 * v + (1.0 - cfg.adam_beta2) * g.cwiseProduct(g);
    const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(step));
    MatrixXd update =
        (m / bc1).array() / ((v / bc2).array().sqrt() + cfg.adam_eps) * cfg.learning_rate;
    if (mask) update = update.cwiseProduct(*mask);
    w -= update;
}

}  // namespace detail

/// Standard bias-corrected Adam. Masked entries never move, whatever their
/// incoming gradient.
inline void adam_step(CircuitModel& model, const ParamGrads& grads, AdamState& st,
                      const TrainConfig& cfg) {
    st.step += 1;
    for (size_t l = 0; l < model.layers.size(); ++l)
        detail::adam_update_matrix(model.layers[l].weights, &model.layers[l].mask, grads.layers[l],
                                   st.m.layers[l], st.v.layers[l], st.step, cfg);
    detail::adam_update_matrix(model.head_weights, &model.head_mask, grads.head, st.m.head,
                               st.v.head, st.step, cfg);
}

// ---------------------------------------------------------------------------
// Plateau detection

/// True iff the moving average of the last `window` entries improved on the
/// preceding window's average by less than rel_tol (relative). Needs at
/// least 2*window entries.
inline bool detect_plateau(const std::vector<double>& history, int window, double rel_tol) {
    if (window < 2) throw ArgumentError("plateau window must be >= 2");
    const long n = static_cast<long>(history.size());
    if (n < 2L * window) return false;
    double recent = 0.0, prev = 0.0;
    for (long i = n - window; i < n; ++i) recent += history[static_cast<size_t>(i)];
    for (long i = n - 2L * window; i < n - window; ++i) prev += history[static_cast<size_t>(i)];
    recent /= window;
    prev /= window;
    if (prev <= 0.0) return true;  // already at the floor; no improvement possible
    return (prev - recent) / prev < rel_tol;
}

// ---------------------------------------------------------------------------
// Epoch engine, shared by plain and filtered training

namespace detail {

// Problem interface: window_indices(), warmup(), batch_step(batch)->loss,
// val_loss(), snapshot(), restore(), halve_lr(), plus a TrainConfig& cfg.
template <class Problem>
TrainReport run_epochs(Problem& p) {
    TrainConfig& cfg = p.cfg;
    cfg.validate();
    TrainReport rep;
    std::vector<long> idx = p.window_indices();
    if (idx.empty()) throw ArgumentError("trajectory too short for the configured horizon");

    p.warmup();
    p.snapshot();
    double best_val = std::numeric_limits<double>::infinity();
    std::mt19937_64 rng(cfg.seed);
    bool halved = false;

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        std::shuffle(idx.begin(), idx.end(), rng);
        double total = 0.0;
        long seen = 0;
        bool diverged = false;
        for (size_t off = 0; off < idx.size(); off += static_cast<size_t>(cfg.batch_size)) {
            const size_t len = std::min(static_cast<size_t>(cfg.batch_size), idx.size() - off);
            std::vector<long> batch(idx.begin() + static_cast<long>(off),
                                    idx.begin() + static_cast<long>(off + len));
            double l;
            try {
                l = p.batch_step(batch);
            } catch (const NumericError&) {
                diverged = true;
                break;
            }
            if (!std::isfinite(l)) {
                diverged = true;
                break;
            }
            total += l * static_cast<double>(len);
            seen += static_cast<long>(len);
        }
        if (diverged) {
            p.restore();
            if (!halved) {
                p.halve_lr();
                halved = true;
                continue;
            }
            rep.status = TrainReport::Status::Diverged;
            return rep;
        }
        rep.train_loss.push_back(total / static_cast<double>(seen));
        const double vl = p.val_loss();
        rep.val_loss.push_back(vl);
        if (vl < best_val) {
            best_val = vl;
            p.snapshot();
        }
        if (detect_plateau(rep.train_loss, cfg.plateau_window, cfg.plateau_rel_tol)) {
            rep.plateau_epochs.push_back(epoch);
            if (cfg.stop_on_plateau) {
                rep.status = TrainReport::Status::Plateaued;
                return rep;
            }
        }
    }
    rep.status = TrainReport::Status::Completed;
    return rep;
}

struct PlainProblem {
    CircuitModel& model;
    const Trajectory& train_traj;
    const Trajectory& val_traj;
    TrainConfig cfg;
    AdamState adam;

    CircuitModel snap_model;
    AdamState snap_adam;

    std::vector<long> window_indices() const {
        std::vector<long> idx;
        for (long t = 0; t + cfg.horizon < train_traj.rows(); ++t) idx.push_back(t);
        return idx;
    }
    void warmup() {
        if (!cfg.use_norm || !cfg.warmup_norm) return;
        model = reset_norm(std::move(model));
        calibrate_norm(model, train_traj.states);
        model = freeze_norm(std::move(model));
    }
    double batch_step(const std::vector<long>& batch) {
        MatrixXd X0;
        std::vector<MatrixXd> targets;
        gather_plain(train_traj, batch, cfg.horizon, X0, targets);
        BatchLoss r = multi_step_loss_batch(model, X0, targets, cfg.dt, cfg.mode(), true);
        if (!std::isfinite(r.loss) || !r.grads.allFinite())
            return std::numeric_limits<double>::quiet_NaN();
        adam_step(model, r.grads, adam, cfg);
        return r.loss;
    }
    double val_loss() {
        std::vector<long> idx;
        for (long t = 0; t + cfg.horizon < val_traj.rows(); ++t) idx.push_back(t);
        MatrixXd X0;
        std::vector<MatrixXd> targets;
        gather_plain(val_traj, idx, cfg.horizon, X0, targets);
        return multi_step_loss_batch(model, X0, targets, cfg.dt, cfg.mode(), false).loss;
    }
    void snapshot() {
        snap_model = model;
        snap_adam = adam;
    }
    void restore() {
        model = snap_model;
        adam = snap_adam;
    }
    void halve_lr() { cfg.learning_rate *= 0.5; }
};

}  // namespace detail

struct TrainResult {
    CircuitModel model;
    AdamState adam;
    TrainReport report;
};

/// Epochs of shuffled mini-batches with an initial normalization warm-up
/// (Accumulate over the training states, then freeze). Stops at max_epochs
/// or, when configured, on a training-loss plateau. On divergence the best
/// validation snapshot is restored and the learning rate halved once.
inline TrainResult train(CircuitModel model, const Trajectory& train_traj,
                         const Trajectory& val_traj, const TrainConfig& cfg,
                         const AdamState* resume = nullptr) {
    if (train_traj.rows() < 2 || val_traj.rows() < 2)
        throw ArgumentError("training and validation trajectories must be nonempty");
    if (std::abs(train_traj.dt() - cfg.dt) > 1e-9 * cfg.dt)
        throw ArgumentError("config dt does not match trajectory dt");

    detail::PlainProblem prob{model, train_traj, val_traj, cfg,
                              resume ? *resume : AdamState::zeros_like(model)};
    TrainReport rep = detail::run_epochs(prob);
    return {std::move(model), std::move(prob.adam), std::move(rep)};
}

}  // namespace acsindy
