#pragma once

// First-order importance scoring |w_i * dL/dw_i|, plateau-triggered
// prune-finetune cycles, and validation-based selection of the final
// sparse model.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Dense>

#include "acsindy/circuit.hpp"
#include "acsindy/dynamics.hpp"
#include "acsindy/errors.hpp"
#include "acsindy/filtering.hpp"
#include "acsindy/training.hpp"

namespace acsindy {

struct PruneConfig {
    bool enabled = true;
    double fraction = 0.1;            // of remaining active entries per event
    long floor_active = 4;            // stop below this many active params
    int patience = 3;                 // consecutive degraded rounds before stop
    double degradation_factor = 5.0;  // vs best validation loss
    long scoring_windows = 1024;      // fixed held-in scoring batch size
    int max_rounds = 60;
    int finetune_max_epochs = 0;  // 0: reuse TrainConfig::max_epochs
};

/// Per-edge first-order importance scores, aligned with the weights.
struct ImportanceMap {
    ParamBlocks scores;
    long epoch_stamp = 0;
};

/// Evenly spaced subset of [lo, hi] used as the deterministic scoring batch.
inline std::vector<long> evenly_spaced(long lo, long hi, long count) {
    const long navail = hi - lo + 1;
    if (navail <= 0) return {};
    count = std::min(count, navail);
    std::vector<long> idx;
    idx.reserve(static_cast<size_t>(count));
    for (long i = 0; i < count; ++i) idx.push_back(lo + (i * navail) / count);
    return idx;
}

namespace detail {

inline ImportanceMap importance_from_grads(const CircuitModel& model, const ParamGrads& grads,
                                           long stamp) {
    if (!grads.allFinite()) throw NumericError("non-finite gradients in importance scoring");
    ImportanceMap imp;
    imp.epoch_stamp = stamp;
    imp.scores = ParamBlocks::zeros_like(model);
    for (size_t l = 0; l < model.layers.size(); ++l)
        imp.scores.layers[l] = model.layers[l]
                                   .weights.cwiseProduct(grads.layers[l])
                                   .cwiseAbs()
                                   .cwiseProduct(model.layers[l].mask);
    imp.scores.head =
        model.head_weights.cwiseProduct(grads.head).cwiseAbs().cwiseProduct(model.head_mask);
    return imp;
}

}  // namespace detail

/// score_i = |w_i * g_i| where g is the gradient of the mean multi-step loss
/// over the given scoring batch; masked entries score 0.
inline ImportanceMap importance(const CircuitModel& model, const Trajectory& traj,
                                const std::vector<long>& starts, const TrainConfig& cfg,
                                long epoch_stamp = 0) {
    auto [loss, grads] = multi_step_loss(model, traj, starts, cfg.horizon, cfg.dt, cfg.mode());
    (void)loss;
    return detail::importance_from_grads(model, grads, epoch_stamp);
}

/// Filtered variant: windows are encoded first; only dynamics edges are
/// scored (the encoder is never pruned).
inline ImportanceMap importance(const CircuitModel& model, const EncoderModel& encoder,
                                const Trajectory& traj, const std::vector<long>& ends,
                                const TrainConfig& cfg, long epoch_stamp = 0) {
    const FilteredBatch fb = gather_windows(traj, ends, encoder.window, cfg.horizon);
    const FilteredLoss fl =
        filtered_multi_step_loss(encoder, model, fb, cfg.horizon, cfg.dt, cfg.mode(), true);
    return detail::importance_from_grads(model, fl.dyn_grads, epoch_stamp);
}

/// Masks the ceil(fraction * active) unmasked entries with the smallest
/// scores; ties break by (layer, row, column) ascending, head last. Newly
/// masked weights and their Adam moments are zeroed.
inline CircuitModel prune_lowest(CircuitModel model, const ImportanceMap& imp, double fraction,
                                 AdamState* adam = nullptr) {
    if (!(fraction > 0.0 && fraction < 1.0)) throw ArgumentError("fraction must be in (0, 1)");
    const long active = count_active_params(model);
    if (active == 0) throw StateError("all entries already masked");

    struct Entry {
        double score;
        int layer;  // layer count == head
        long row, col;
    };
    std::vector<Entry> entries;
    entries.reserve(static_cast<size_t>(active));
    const int head_index = static_cast<int>(model.layers.size());
    for (int l = 0; l < head_index; ++l) {
        const auto& mask = model.layers[static_cast<size_t>(l)].mask;
        for (long r = 0; r < mask.rows(); ++r)
            for (long c = 0; c < mask.cols(); ++c)
                if (mask(r, c) != 0.0)
                    entries.push_back({imp.scores.layers[static_cast<size_t>(l)](r, c), l, r, c});
    }
    for (long r = 0; r < model.head_mask.rows(); ++r)
        for (long c = 0; c < model.head_mask.cols(); ++c)
            if (model.head_mask(r, c) != 0.0)
                entries.push_back({imp.scores.head(r, c), head_index, r, c});

    const long n_prune = static_cast<long>(
        std::ceil(fraction * static_cast<double>(entries.size())));
    std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
        return std::tie(a.score, a.layer, a.row, a.col) < std::tie(b.score, b.layer, b.row, b.col);
    });

    for (long i = 0; i < n_prune; ++i) {
        const Entry& e = entries[static_cast<size_t>(i)];
        if (e.layer == head_index) {
            model.head_mask(e.row, e.col) = 0.0;
            model.head_weights(e.row, e.col) = 0.0;
            if (adam) {
                adam->m.head(e.row, e.col) = 0.0;
                adam->v.head(e.row, e.col) = 0.0;
            }
        } else {
            auto& layer = model.layers[static_cast<size_t>(e.layer)];
            layer.mask(e.row, e.col) = 0.0;
            layer.weights(e.row, e.col) = 0.0;
            if (adam) {
                adam->m.layers[static_cast<size_t>(e.layer)](e.row, e.col) = 0.0;
                adam->v.layers[static_cast<size_t>(e.layer)](e.row, e.col) = 0.0;
            }
        }
    }
    return model;
}

struct PruneCheckpoint {
    CircuitModel model;
    std::optional<EncoderModel> encoder;
    long active_params = 0;
    double val_loss = 0.0;
    int round = 0;
};

struct PruneRunResult {
    CircuitModel best_model;
    std::optional<EncoderModel> best_encoder;
    int best_round = 0;
    std::vector<PruneCheckpoint> checkpoints;
    TrainReport history;             // concatenated over all phases
    std::vector<long> prune_epochs;  // epochs completed before each prune event
    TrainReport::Status status = TrainReport::Status::Completed;
};

namespace detail {

inline void append_history(TrainReport& hist, const TrainReport& phase) {
    const long base = static_cast<long>(hist.train_loss.size());
    hist.train_loss.insert(hist.train_loss.end(), phase.train_loss.begin(),
                           phase.train_loss.end());
    hist.val_loss.insert(hist.val_loss.end(), phase.val_loss.begin(), phase.val_loss.end());
    for (long e : phase.plateau_epochs) hist.plateau_epochs.push_back(base + e);
}

inline PruneRunResult prune_train_loop(CircuitModel model, std::optional<EncoderModel> encoder,
                                       const Trajectory& train_traj, const Trajectory& val_traj,
                                       const TrainConfig& tcfg, const PruneConfig& pcfg) {
    PruneRunResult result;
    TrainConfig phase_cfg = tcfg;
    AdamState adam = AdamState::zeros_like(model);
    EncoderAdam enc_adam;
    if (encoder) enc_adam = EncoderAdam::zeros_like(*encoder);

    auto run_phase = [&](int max_epochs) -> TrainReport {
        TrainConfig cfg = phase_cfg;
        if (max_epochs > 0) cfg.max_epochs = max_epochs;
        if (encoder) {
            FilteredTrainResult r =
                train_filtered(*encoder, std::move(model), train_traj, val_traj, cfg, &adam,
                               &enc_adam);
            *encoder = std::move(r.encoder);
            model = std::move(r.model);
            adam = std::move(r.adam);
            enc_adam = std::move(r.enc_adam);
            return r.report;
        }
        TrainResult r = train(std::move(model), train_traj, val_traj, cfg, &adam);
        model = std::move(r.model);
        adam = std::move(r.adam);
        return r.report;
    };

    auto record_checkpoint = [&](int round) {
        PruneCheckpoint cp;
        cp.model = model;
        cp.encoder = encoder;
        cp.active_params = count_active_params(model);
        cp.val_loss = result.history.val_loss.empty() ? 0.0 : result.history.val_loss.back();
        cp.round = round;
        result.checkpoints.push_back(std::move(cp));
    };

    const std::vector<long> scoring_batch =
        encoder ? evenly_spaced(encoder->window - 1, train_traj.rows() - 1 - tcfg.horizon,
                                pcfg.scoring_windows)
                : evenly_spaced(0, train_traj.rows() - 1 - tcfg.horizon, pcfg.scoring_windows);

    // Initial training to plateau, then the prune ladder.
    TrainReport phase = run_phase(0);
    append_history(result.history, phase);
    record_checkpoint(0);
    if (phase.status == TrainReport::Status::Diverged) {
        result.status = TrainReport::Status::Diverged;
    } else if (pcfg.enabled) {
        double best_val = result.checkpoints.back().val_loss;
        int bad_rounds = 0;
        for (int round = 1; round <= pcfg.max_rounds; ++round) {
            if (count_active_params(model) < pcfg.floor_active) break;
            if (bad_rounds >= pcfg.patience) break;

            const ImportanceMap imp =
                encoder ? importance(model, *encoder, train_traj, scoring_batch, phase_cfg,
                                     static_cast<long>(result.history.train_loss.size()))
                        : importance(model, train_traj, scoring_batch, phase_cfg,
                                     static_cast<long>(result.history.train_loss.size()));
            result.prune_epochs.push_back(static_cast<long>(result.history.train_loss.size()));
            model = prune_lowest(std::move(model), imp, pcfg.fraction, &adam);

            phase = run_phase(pcfg.finetune_max_epochs);
            append_history(result.history, phase);
            record_checkpoint(round);
            if (phase.status == TrainReport::Status::Diverged) {
                result.status = TrainReport::Status::Diverged;
                break;
            }

            const double vl = result.checkpoints.back().val_loss;
            if (vl < best_val) best_val = vl;
            if (vl > best_val * pcfg.degradation_factor)
                ++bad_rounds;
            else
                bad_rounds = 0;
        }
    }

    // Validation argmin over the checkpoint ladder.
    size_t best = 0;
    for (size_t i = 1; i < result.checkpoints.size(); ++i)
        if (result.checkpoints[i].val_loss < result.checkpoints[best].val_loss) best = i;
    result.best_round = result.checkpoints[best].round;
    result.best_model = result.checkpoints[best].model;
    result.best_encoder = result.checkpoints[best].encoder;
    return result;
}

}  // namespace detail

/// Train to plateau, then repeat: score importance on a fixed held-in batch,
/// prune the lowest-importance edges, re-estimate normalization, finetune to
/// plateau, checkpoint. Stops at the active-parameter floor or after
/// `patience` consecutive rounds above degradation_factor times the best
/// validation loss. Returns the validation-loss argmin checkpoint.
inline PruneRunResult iterative_prune_train(CircuitModel model, const Trajectory& train_traj,
                                            const Trajectory& val_traj, const TrainConfig& tcfg,
                                            const PruneConfig& pcfg) {
    return detail::prune_train_loop(std::move(model), std::nullopt, train_traj, val_traj, tcfg,
                                    pcfg);
}

/// Filtered variant: the encoder trains jointly with the dynamics but is
/// never pruned.
inline PruneRunResult iterative_prune_train(EncoderModel encoder, CircuitModel model,
                                            const Trajectory& train_traj,
                                            const Trajectory& val_traj, const TrainConfig& tcfg,
                                            const PruneConfig& pcfg) {
    return detail::prune_train_loop(std::move(model), std::move(encoder), train_traj, val_traj,
                                    tcfg, pcfg);
}

}  // namespace acsindy
