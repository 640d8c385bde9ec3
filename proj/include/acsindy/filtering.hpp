#pragma once

// Separation of state estimation and dynamics for noisy observations: an
// affine encoder maps a window of past observations to a latent state, the
// shared circuit dynamics evolve it, and both are trained jointly against
// multi-step noisy targets.

#include <cmath>
#include <limits>
#include <optional>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "acsindy/circuit.hpp"
#include "acsindy/dynamics.hpp"
#include "acsindy/errors.hpp"
#include "acsindy/training.hpp"

namespace acsindy {

/// Affine map from a flattened window of W past observations (oldest first)
/// to a latent state of the same dimension as the observations.
struct EncoderModel {
    int state_dim = 0;
    int window = 1;
    MatrixXd weights;  // state_dim x (window*state_dim + 1)

    /// Newest-frame passthrough: the last frame block is the identity,
    /// everything else zero, so training starts at the no-filter baseline.
    static EncoderModel identity_last_frame(int state_dim, int window) {
        if (state_dim < 1 || window < 1) throw ArgumentError("encoder dims must be positive");
        EncoderModel e;
        e.state_dim = state_dim;
        e.window = window;
        e.weights = MatrixXd::Zero(state_dim, window * state_dim + 1);
        e.weights.block(0, (window - 1) * state_dim, state_dim, state_dim).setIdentity();
        return e;
    }
};

inline VectorXd encode(const EncoderModel& enc, const MatrixXd& window_block) {
    if (window_block.rows() != enc.window || window_block.cols() != enc.state_dim)
        throw ArgumentError("observation window must be W x n");
    VectorXd flat(enc.window * enc.state_dim + 1);
    for (int w = 0; w < enc.window; ++w)
        flat.segment(static_cast<long>(w) * enc.state_dim, enc.state_dim) =
            window_block.row(w).transpose();
    flat(enc.window * enc.state_dim) = 1.0;
    return enc.weights * flat;
}

/// Batched encode over rows of already-flattened windows (B x W*n).
inline MatrixXd encode_batch(const EncoderModel& enc, const MatrixXd& flat_windows) {
    if (flat_windows.cols() != static_cast<long>(enc.window) * enc.state_dim)
        throw ArgumentError("flattened window width mismatch");
    return detail::augment_ones(flat_windows) * enc.weights.transpose();
}

/// Observation windows plus the K noisy supervision targets that follow
/// each window.
struct FilteredBatch {
    MatrixXd flat_windows;          // B x (W*n), oldest frame first
    std::vector<MatrixXd> targets;  // K entries of B x n
};

/// Valid window-end indices t: the window covers t-W+1..t and the targets
/// t+1..t+K must exist.
inline std::vector<long> window_end_indices(const Trajectory& traj, int W, int K) {
    std::vector<long> idx;
    for (long t = W - 1; t + K < traj.rows(); ++t) idx.push_back(t);
    return idx;
}

inline FilteredBatch gather_windows(const Trajectory& traj, const std::vector<long>& ends, int W,
                                    int K) {
    const int n = traj.dim();
    FilteredBatch batch;
    batch.flat_windows.resize(static_cast<long>(ends.size()), static_cast<long>(W) * n);
    batch.targets.assign(static_cast<size_t>(K),
                         MatrixXd(static_cast<long>(ends.size()), n));
    for (size_t b = 0; b < ends.size(); ++b) {
        const long t = ends[b];
        if (t < W - 1 || t + K >= traj.rows())
            throw ArgumentError("window end index out of range");
        for (int w = 0; w < W; ++w)
            batch.flat_windows.row(static_cast<long>(b))
                .segment(static_cast<long>(w) * n, n) = traj.states.row(t - W + 1 + w);
        for (int k = 0; k < K; ++k)
            batch.targets[static_cast<size_t>(k)].row(static_cast<long>(b)) =
                traj.states.row(t + k + 1);
    }
    return batch;
}

struct FilteredLoss {
    double loss = 0.0;
    ParamGrads dyn_grads;
    MatrixXd enc_grad;  // same shape as encoder weights
};

/// Encode each window, roll the shared dynamics K steps, and score against
/// the noisy targets. Gradients flow into both models.
inline FilteredLoss filtered_multi_step_loss(const EncoderModel& enc, const CircuitModel& dyn,
                                             const FilteredBatch& batch, int K, double dt,
                                             NormMode mode, bool want_grads = true) {
    if (static_cast<int>(batch.targets.size()) != K)
        throw ArgumentError("K does not match batch target depth");
    const MatrixXd S0 = encode_batch(enc, batch.flat_windows);
    BatchLoss r = multi_step_loss_batch(dyn, S0, batch.targets, dt, mode, want_grads);
    FilteredLoss out;
    out.loss = r.loss;
    if (!want_grads) return out;
    out.dyn_grads = std::move(r.grads);
    out.enc_grad.noalias() =
        r.input_grad.transpose() * detail::augment_ones(batch.flat_windows);
    return out;
}

struct EncoderAdam {
    MatrixXd m;
    MatrixXd v;
    long step = 0;

    static EncoderAdam zeros_like(const EncoderModel& e) {
        return {MatrixXd::Zero(e.weights.rows(), e.weights.cols()),
                MatrixXd::Zero(e.weights.rows(), e.weights.cols()), 0};
    }
};

namespace detail {

struct FilteredProblem {
    EncoderModel& encoder;
    CircuitModel& model;
    const Trajectory& train_traj;
    const Trajectory& val_traj;
    TrainConfig cfg;
    AdamState adam;
    EncoderAdam enc_adam;

    EncoderModel snap_encoder;
    CircuitModel snap_model;
    AdamState snap_adam;
    EncoderAdam snap_enc_adam;

    std::vector<long> window_indices() const {
        return window_end_indices(train_traj, encoder.window, cfg.horizon);
    }
    void warmup() {
        if (!cfg.use_norm || !cfg.warmup_norm) return;
        // Dynamics statistics are estimated on the encoder's latents.
        model = reset_norm(std::move(model));
        const auto ends = window_end_indices(train_traj, encoder.window, cfg.horizon);
        MatrixXd latents(static_cast<long>(ends.size()), train_traj.dim());
        for (size_t i = 0; i < ends.size(); ++i) {
            const MatrixXd block = train_traj.states.middleRows(
                ends[i] - encoder.window + 1, encoder.window);
            latents.row(static_cast<long>(i)) = encode(encoder, block);
        }
        calibrate_norm(model, latents);
        model = freeze_norm(std::move(model));
    }
    double batch_step(const std::vector<long>& batch) {
        const FilteredBatch fb = gather_windows(train_traj, batch, encoder.window, cfg.horizon);
        FilteredLoss r =
            filtered_multi_step_loss(encoder, model, fb, cfg.horizon, cfg.dt, cfg.mode(), true);
        if (!std::isfinite(r.loss) || !r.dyn_grads.allFinite() || !r.enc_grad.allFinite())
            return std::numeric_limits<double>::quiet_NaN();
        adam_step(model, r.dyn_grads, adam, cfg);
        enc_adam.step += 1;
        TrainConfig enc_cfg = cfg;
        enc_cfg.learning_rate *= 5.0;  // HACK under test
        adam_update_matrix(encoder.weights, nullptr, r.enc_grad, enc_adam.m, enc_adam.v,
                           enc_adam.step, enc_cfg);
        return r.loss;
    }
    double val_loss() {
        const auto ends = window_end_indices(val_traj, encoder.window, cfg.horizon);
        const FilteredBatch fb = gather_windows(val_traj, ends, encoder.window, cfg.horizon);
        return filtered_multi_step_loss(encoder, model, fb, cfg.horizon, cfg.dt, cfg.mode(), false)
            .loss;
    }
    void snapshot() {
        snap_encoder = encoder;
        snap_model = model;
        snap_adam = adam;
        snap_enc_adam = enc_adam;
    }
    void restore() {
        encoder = snap_encoder;
        model = snap_model;
        adam = snap_adam;
        enc_adam = snap_enc_adam;
    }
    void halve_lr() { cfg.learning_rate *= 0.5; }
};

}  // namespace detail

struct FilteredTrainResult {
    EncoderModel encoder;
    CircuitModel model;
    AdamState adam;
    EncoderAdam enc_adam;
    TrainReport report;
};

/// Joint Adam optimization of encoder and dynamics under the multi-step
/// loss. Supervision targets are the raw noisy observations.
inline FilteredTrainResult train_filtered(EncoderModel encoder, CircuitModel model,
                                          const Trajectory& train_traj,
                                          const Trajectory& val_traj, const TrainConfig& cfg,
                                          const AdamState* resume = nullptr,
                                          const EncoderAdam* enc_resume = nullptr) {
    if (train_traj.rows() < encoder.window + cfg.horizon + 1)
        throw ArgumentError("trajectory too short for window + horizon");
    if (std::abs(train_traj.dt() - cfg.dt) > 1e-9 * cfg.dt)
        throw ArgumentError("config dt does not match trajectory dt");

    detail::FilteredProblem prob{encoder,
                                 model,
                                 train_traj,
                                 val_traj,
                                 cfg,
                                 resume ? *resume : AdamState::zeros_like(model),
                                 enc_resume ? *enc_resume : EncoderAdam::zeros_like(encoder)};
    TrainReport rep = detail::run_epochs(prob);
    return {std::move(encoder), std::move(model), std::move(prob.adam), std::move(prob.enc_adam),
            std::move(rep)};
}

}  // namespace acsindy
