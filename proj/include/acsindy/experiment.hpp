#pragma once

// Experiment configuration (flat JSON + overrides), benchmark ground-truth
// systems, and the simulate/train/extract/eval/paramscaling pipelines that
// back the CLI.

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "acsindy/baseline.hpp"
#include "acsindy/circuit.hpp"
#include "acsindy/dynamics.hpp"
#include "acsindy/errors.hpp"
#include "acsindy/filtering.hpp"
#include "acsindy/pruning.hpp"
#include "acsindy/serialize.hpp"
#include "acsindy/symbolic.hpp"
#include "acsindy/training.hpp"

namespace acsindy {

namespace fs = std::filesystem;

struct ExperimentConfig {
    std::string system = "nonlinear2d";
    std::vector<double> system_params;
    std::vector<double> x0;
    double dt = 0.01;
    long steps = 5000;
    double noise_sigma = 0.0;
    std::uint64_t seed = 42;
    double train_frac = 0.8, val_frac = 0.1, test_frac = 0.1;

    int terms_per_state = 4;
    int group_size = 2;
    int sin_units = 0;
    bool head_skip = true;
    bool use_norm = true;

    double learning_rate = 1e-3;
    double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
    int horizon = 10;
    int batch_size = 128;
    int max_epochs = 400;
    int plateau_window = 20;
    double plateau_rel_tol = 1e-3;
    int finetune_max_epochs = 150;

    bool prune_enabled = true;
    double prune_fraction = 0.1;
    long prune_floor = 4;
    int prune_patience = 3;
    double prune_degradation_factor = 5.0;
    long prune_scoring_windows = 1024;
    int prune_max_rounds = 60;

    bool filter_enabled = false;
    int filter_window = 5;

    std::string out_dir = "out";

    BenchmarkSystem benchmark() const {
        if (system == "nonlinear2d") return BenchmarkSystem::nonlinear2d();
        auto p = [&](size_t i, double dflt) {
            return i < system_params.size() ? system_params[i] : dflt;
        };
        if (system == "lorenz")
            return BenchmarkSystem::lorenz(p(0, 10.0), p(1, 28.0), p(2, 8.0 / 3.0));
        if (system == "lorenz_forced")
            return BenchmarkSystem::lorenz_forced(p(0, 10.0), p(1, 28.0), p(2, 8.0 / 3.0),
                                                  p(3, 0.1));
        throw ArgumentError("unknown system: " + system);
    }

    TrainConfig train_config() const {
        TrainConfig tc;
        tc.learning_rate = learning_rate;
        tc.adam_beta1 = adam_beta1;
        tc.adam_beta2 = adam_beta2;
        tc.adam_eps = adam_eps;
        tc.horizon = horizon;
        tc.batch_size = batch_size;
        tc.max_epochs = max_epochs;
        tc.plateau_window = plateau_window;
        tc.plateau_rel_tol = plateau_rel_tol;
        tc.seed = seed;
        tc.dt = dt;
        tc.use_norm = use_norm;
        return tc;
    }

    PruneConfig prune_config() const {
        PruneConfig pc;
        pc.enabled = prune_enabled;
        pc.fraction = prune_fraction;
        pc.floor_active = prune_floor;
        pc.patience = prune_patience;
        pc.degradation_factor = prune_degradation_factor;
        pc.scoring_windows = prune_scoring_windows;
        pc.max_rounds = prune_max_rounds;
        pc.finetune_max_epochs = finetune_max_epochs;
        return pc;
    }

    void validate() const {
        (void)benchmark();
        if (static_cast<long>(x0.size()) != benchmark().dim())
            throw ArgumentError("x0 dimension does not match system");
        if (!(dt > 0.0) || steps < 1) throw ArgumentError("dt must be > 0 and steps >= 1");
        if (noise_sigma < 0.0) throw ArgumentError("noise_sigma must be >= 0");
        if (terms_per_state < 1 || group_size < 1 || sin_units < 0)
            throw ArgumentError("invalid architecture settings");
        if (filter_window < 1) throw ArgumentError("filter_window must be >= 1");
        train_config().validate();
    }
};

// ---------------------------------------------------------------------------
// Flat-JSON resolution: defaults (per system) < config file < CLI overrides.

namespace detail {

inline const std::set<std::string>& known_config_keys() {
    static const std::set<std::string> keys = {
        "system", "system_params", "x0", "dt", "steps", "noise_sigma", "seed",
        "train_frac", "val_frac", "test_frac",
        "terms_per_state", "group_size", "sin_units", "head_skip", "use_norm",
        "learning_rate", "adam_beta1", "adam_beta2", "adam_eps", "horizon", "batch_size",
        "max_epochs", "plateau_window", "plateau_rel_tol", "finetune_max_epochs",
        "prune_enabled", "prune_fraction", "prune_floor", "prune_patience",
        "prune_degradation_factor", "prune_scoring_windows", "prune_max_rounds",
        "filter_enabled", "filter_window", "out_dir"};
    return keys;
}

}  // namespace detail

inline json config_to_json(const ExperimentConfig& c) {
    return {{"system", c.system},
            {"system_params", c.system_params},
            {"x0", c.x0},
            {"dt", c.dt},
            {"steps", c.steps},
            {"noise_sigma", c.noise_sigma},
            {"seed", c.seed},
            {"train_frac", c.train_frac},
            {"val_frac", c.val_frac},
            {"test_frac", c.test_frac},
            {"terms_per_state", c.terms_per_state},
            {"group_size", c.group_size},
            {"sin_units", c.sin_units},
            {"head_skip", c.head_skip},
            {"use_norm", c.use_norm},
            {"learning_rate", c.learning_rate},
            {"adam_beta1", c.adam_beta1},
            {"adam_beta2", c.adam_beta2},
            {"adam_eps", c.adam_eps},
            {"horizon", c.horizon},
            {"batch_size", c.batch_size},
            {"max_epochs", c.max_epochs},
            {"plateau_window", c.plateau_window},
            {"plateau_rel_tol", c.plateau_rel_tol},
            {"finetune_max_epochs", c.finetune_max_epochs},
            {"prune_enabled", c.prune_enabled},
            {"prune_fraction", c.prune_fraction},
            {"prune_floor", c.prune_floor},
            {"prune_patience", c.prune_patience},
            {"prune_degradation_factor", c.prune_degradation_factor},
            {"prune_scoring_windows", c.prune_scoring_windows},
            {"prune_max_rounds", c.prune_max_rounds},
            {"filter_enabled", c.filter_enabled},
            {"filter_window", c.filter_window},
            {"out_dir", c.out_dir}};
}

/// Baseline defaults specialized per benchmark system. The generation
/// settings and Lorenz learning rate live here, not in code paths.
inline ExperimentConfig default_config(const std::string& system) {
    ExperimentConfig c;
    c.system = system;
    if (const char* env_seed = std::getenv("ACS_SEED")) c.seed = std::stoull(env_seed);
    if (system == "nonlinear2d") {
        c.system_params = {};
        c.x0 = {2.0, 0.0};
        c.dt = 0.01;
        c.steps = 5000;
        c.learning_rate = 2e-3;
    } else if (system == "lorenz" || system == "lorenz_forced") {
        c.system_params = {10.0, 28.0, 8.0 / 3.0};
        if (system == "lorenz_forced") c.system_params.push_back(0.1);
        c.x0 = {1.0, 1.0, 1.0};
        c.dt = 0.002;
        c.steps = 25000;
        c.learning_rate = 1e-2;
        c.max_epochs = 300;
        c.finetune_max_epochs = 100;
    } else {
        throw ArgumentError("unknown system: " + system);
    }
    return c;
}

/// Merges file and CLI override objects onto the per-system defaults.
/// Unknown keys are rejected.
inline ExperimentConfig resolve_config(const json& file_overrides, const json& cli_overrides) {
    auto check_keys = [](const json& j, const std::string& origin) {
        if (j.is_null()) return;
        if (!j.is_object()) throw ArgumentError(origin + " must be a JSON object");
        for (const auto& [k, v] : j.items())
            if (!detail::known_config_keys().count(k))
                throw ArgumentError("unknown config key '" + k + "' in " + origin);
    };
    check_keys(file_overrides, "config file");
    check_keys(cli_overrides, "command line");

    std::string system = "nonlinear2d";
    if (!file_overrides.is_null() && file_overrides.contains("system"))
        system = file_overrides.at("system").get<std::string>();
    if (!cli_overrides.is_null() && cli_overrides.contains("system"))
        system = cli_overrides.at("system").get<std::string>();

    json merged = config_to_json(default_config(system));
    auto apply = [&merged](const json& j) {
        if (j.is_null()) return;
        for (const auto& [k, v] : j.items()) merged[k] = v;
    };
    apply(file_overrides);
    apply(cli_overrides);

    ExperimentConfig c;
    try {
        c.system = merged.at("system").get<std::string>();
        c.system_params = merged.at("system_params").get<std::vector<double>>();
        c.x0 = merged.at("x0").get<std::vector<double>>();
        c.dt = merged.at("dt").get<double>();
        c.steps = merged.at("steps").get<long>();
        c.noise_sigma = merged.at("noise_sigma").get<double>();
        c.seed = merged.at("seed").get<std::uint64_t>();
        c.train_frac = merged.at("train_frac").get<double>();
        c.val_frac = merged.at("val_frac").get<double>();
        c.test_frac = merged.at("test_frac").get<double>();
        c.terms_per_state = merged.at("terms_per_state").get<int>();
        c.group_size = merged.at("group_size").get<int>();
        c.sin_units = merged.at("sin_units").get<int>();
        c.head_skip = merged.at("head_skip").get<bool>();
        c.use_norm = merged.at("use_norm").get<bool>();
        c.learning_rate = merged.at("learning_rate").get<double>();
        c.adam_beta1 = merged.at("adam_beta1").get<double>();
        c.adam_beta2 = merged.at("adam_beta2").get<double>();
        c.adam_eps = merged.at("adam_eps").get<double>();
        c.horizon = merged.at("horizon").get<int>();
        c.batch_size = merged.at("batch_size").get<int>();
        c.max_epochs = merged.at("max_epochs").get<int>();
        c.plateau_window = merged.at("plateau_window").get<int>();
        c.plateau_rel_tol = merged.at("plateau_rel_tol").get<double>();
        c.finetune_max_epochs = merged.at("finetune_max_epochs").get<int>();
        c.prune_enabled = merged.at("prune_enabled").get<bool>();
        c.prune_fraction = merged.at("prune_fraction").get<double>();
        c.prune_floor = merged.at("prune_floor").get<long>();
        c.prune_patience = merged.at("prune_patience").get<int>();
        c.prune_degradation_factor = merged.at("prune_degradation_factor").get<double>();
        c.prune_scoring_windows = merged.at("prune_scoring_windows").get<long>();
        c.prune_max_rounds = merged.at("prune_max_rounds").get<int>();
        c.filter_enabled = merged.at("filter_enabled").get<bool>();
        c.filter_window = merged.at("filter_window").get<int>();
        c.out_dir = merged.at("out_dir").get<std::string>();
    } catch (const json::exception& e) {
        throw ArgumentError(std::string("invalid config value: ") + e.what());
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Ground-truth systems

inline SymbolicSystem truth_system(const BenchmarkSystem& sys) {
    SymbolicSystem out;
    out.state_dim = sys.dim();
    out.components.resize(static_cast<size_t>(sys.dim()));
    for (auto& c : out.components) c.poly = Polynomial::zero(sys.dim());
    auto add = [&](int comp, std::vector<int> exps, double coef) {
        out.components[static_cast<size_t>(comp)].poly.add({std::move(exps)}, coef);
    };
    switch (sys.kind) {
        case SystemKind::Nonlinear2D:
            add(0, {1, 0}, -0.1);
            add(0, {0, 1}, 1.0);
            add(1, {1, 0}, -2.0);
            add(1, {0, 1}, -0.1);
            add(1, {1, 1}, -0.5);
            add(1, {0, 2}, -0.025);
            break;
        case SystemKind::Lorenz:
        case SystemKind::LorenzForced: {
            const double sigma = sys.params.at(0), rho = sys.params.at(1),
                         beta = sys.params.at(2);
            add(0, {1, 0, 0}, -sigma);
            add(0, {0, 1, 0}, sigma);
            add(1, {1, 0, 0}, rho);
            add(1, {0, 1, 0}, -1.0);
            add(1, {1, 0, 1}, -1.0);
            add(2, {1, 1, 0}, 1.0);
            add(2, {0, 0, 1}, -beta);
            if (sys.kind == SystemKind::LorenzForced)
                out.components[0].sins.push_back(
                    {sys.params.at(3), Polynomial::variable(3, 0)});
            break;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Output-directory lock (single writer per directory)

class DirLock {
  public:
    explicit DirLock(const fs::path& dir) : path_(dir / ".lock") {
        const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd < 0)
            throw IoError("output directory is locked by another run: " + path_.string());
        const std::string pid = std::to_string(::getpid()) + "\n";
        (void)!::write(fd, pid.c_str(), pid.size());
        ::close(fd);
    }
    ~DirLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

  private:
    fs::path path_;
};

// ---------------------------------------------------------------------------
// Pipelines

inline CircuitModel build_experiment_model(const ExperimentConfig& cfg) {
    const int d = cfg.benchmark().dim();
    const int m = cfg.terms_per_state * d;
    LayerSpec spec;
    spec.in_dim = d;
    spec.linear_out_dim = m * cfg.group_size + cfg.sin_units;
    spec.group_size = cfg.group_size;
    if (cfg.sin_units > 0) {
        spec.primitives.assign(static_cast<size_t>(m), Primitive::Product);
        for (int i = 0; i < cfg.sin_units; ++i) spec.primitives.push_back(Primitive::Sin);
    }
    CircuitModel model = init_model({spec}, d, cfg.seed, cfg.head_skip);
    model.norm_enabled = cfg.use_norm;
    return model;
}

inline void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
}

/// simulate: clean (and optionally noisy) trajectory CSVs plus the resolved
/// config, all under cfg.out_dir.
inline void run_simulate(const ExperimentConfig& cfg) {
    ensure_dir(cfg.out_dir);
    DirLock lock(cfg.out_dir);
    VectorXd x0 = Eigen::Map<const VectorXd>(cfg.x0.data(), static_cast<long>(cfg.x0.size()));
    const Trajectory clean = integrate_rk4(cfg.benchmark(), x0, cfg.dt, cfg.steps);
    save_trajectory_csv((fs::path(cfg.out_dir) / "clean.csv").string(), clean);
    if (cfg.noise_sigma > 0.0) {
        const Trajectory noisy = add_gaussian_noise(clean, cfg.noise_sigma, cfg.seed);
        save_trajectory_csv((fs::path(cfg.out_dir) / "noisy.csv").string(), noisy);
    }
    write_json((fs::path(cfg.out_dir) / "config.json").string(), config_to_json(cfg));
}

struct TrainOutputs {
    PruneRunResult run;
    fs::path best_path;
};

/// train: iterative prune-train (filtered when configured), writing round
/// checkpoints, best.json, train_report.json, loss_curve.csv, prune_log.csv
/// and the resolved config.
inline TrainOutputs run_train(const ExperimentConfig& cfg) {
    const fs::path dir(cfg.out_dir);
    const fs::path data =
        cfg.noise_sigma > 0.0 ? dir / "noisy.csv" : dir / "clean.csv";
    if (!fs::exists(data)) throw IoError("trajectory file missing, run simulate first: " +
                                         data.string());
    const Trajectory traj = load_trajectory_csv(data.string());
    auto [train_traj, val_traj, test_traj] =
        split_trajectory(traj, cfg.train_frac, cfg.val_frac, cfg.test_frac);
    (void)test_traj;

    DirLock lock(dir);
    TrainConfig tc = cfg.train_config();
    tc.dt = traj.dt();
    const PruneConfig pc = cfg.prune_config();
    CircuitModel model = build_experiment_model(cfg);

    PruneRunResult run;
    const auto t_start = std::chrono::steady_clock::now();
    if (cfg.filter_enabled) {
        EncoderModel enc = EncoderModel::identity_last_frame(traj.dim(), cfg.filter_window);
        run = iterative_prune_train(std::move(enc), std::move(model), train_traj, val_traj, tc,
                                    pc);
    } else {
        run = iterative_prune_train(std::move(model), train_traj, val_traj, tc, pc);
    }
    run.history.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();

    for (const auto& cp : run.checkpoints)
        save_checkpoint((dir / ("round_" + std::to_string(cp.round) + ".json")).string(),
                        cp.model, cp.encoder ? &*cp.encoder : nullptr);
    TrainOutputs out;
    out.best_path = dir / "best.json";
    save_checkpoint(out.best_path.string(), run.best_model,
                    run.best_encoder ? &*run.best_encoder : nullptr);
    write_json((dir / "train_report.json").string(), prune_run_to_json(run));
    write_loss_csv((dir / "loss_curve.csv").string(), run.history);
    write_prune_log_csv((dir / "prune_log.csv").string(), run);
    write_json((dir / "config.json").string(), config_to_json(cfg));
    out.run = std::move(run);
    return out;
}

struct ExtractOutputs {
    SymbolicSystem recovered;
    std::string rendered;
    std::optional<RecoveryReport> report;
};

/// extract: expand the checkpoint into equations; when the adjacent config
/// names a benchmark system, also score recovery against ground truth.
inline ExtractOutputs run_extract(const std::string& checkpoint_path,
                                  double drop_tol = kReportDropTol, int precision = 3) {
    const Checkpoint cp = load_checkpoint(checkpoint_path);
    if (cp.model.norm_enabled) {
        for (const auto& l : cp.model.layers)
            if (!l.norm.frozen)
                throw StateError("checkpoint has unfrozen normalization; freeze before extract");
        if (!cp.model.head_norm.frozen)
            throw StateError("checkpoint has unfrozen normalization; freeze before extract");
    }
    ExtractOutputs out;
    out.recovered = expand(cp.model, cp.model.eval_mode(), drop_tol);
    out.rendered = render(out.recovered, precision, drop_tol);

    const fs::path dir = fs::path(checkpoint_path).parent_path();
    const fs::path cfg_path = dir / "config.json";
    if (fs::exists(cfg_path)) {
        const ExperimentConfig cfg = resolve_config(read_json(cfg_path.string()), json());
        const RecoveryReport rep = compare(out.recovered, truth_system(cfg.benchmark()));
        write_json((dir / "recovery_report.json").string(),
                   recovery_report_to_json(rep, out.recovered.state_dim));
        out.report = rep;
    }
    std::ofstream eq((dir / "equations.txt").string());
    if (!eq) throw IoError("cannot write equations.txt");
    eq << out.rendered;
    return out;
}

struct EvalOutputs {
    std::vector<double> rmse_vs_horizon;
    std::optional<double> vf_rmse;
    std::optional<double> vf_rms_true;
};

/// eval: K-step rollout RMSE per horizon, one-step vector-field RMSE against
/// the true field (benchmark systems), and a full-horizon rollout CSV.
inline EvalOutputs run_eval(const std::string& checkpoint_path, const std::string& traj_path,
                            int k_eval = 50) {
    const Checkpoint cp = load_checkpoint(checkpoint_path);
    const Trajectory traj = load_trajectory_csv(traj_path);
    if (traj.dim() != cp.model.input_dim)
        throw ArgumentError("trajectory dimension does not match checkpoint");
    const double dt = traj.dt();
    const NormMode mode = cp.model.eval_mode();

    EvalOutputs out;
    // Batched rollout over every valid start; RMSE accumulated per horizon.
    std::vector<long> starts;
    for (long t = 0; t + k_eval < traj.rows(); ++t) starts.push_back(t);
    if (starts.empty()) throw ArgumentError("trajectory too short for eval horizon");
    MatrixXd S(static_cast<long>(starts.size()), traj.dim());
    for (size_t b = 0; b < starts.size(); ++b)
        S.row(static_cast<long>(b)) = traj.states.row(starts[b]);
    out.rmse_vs_horizon.reserve(static_cast<size_t>(k_eval));
    for (int k = 1; k <= k_eval; ++k) {
        const ForwardTrace tr = forward_batch(cp.model, S, mode);
        S += dt * tr.output;
        double sq = 0.0;
        for (size_t b = 0; b < starts.size(); ++b)
            sq += (S.row(static_cast<long>(b)) - traj.states.row(starts[b] + k)).squaredNorm();
        out.rmse_vs_horizon.push_back(std::sqrt(
            sq / (static_cast<double>(starts.size()) * traj.dim())));
    }

    const fs::path dir = fs::path(checkpoint_path).parent_path();
    const fs::path cfg_path = dir / "config.json";
    std::optional<BenchmarkSystem> bench;
    if (fs::exists(cfg_path))
        bench = resolve_config(read_json(cfg_path.string()), json()).benchmark();
    if (bench && bench->dim() == traj.dim()) {
        const auto idx = evenly_spaced(0, traj.rows() - 1, 1000);
        double sq = 0.0, sq_true = 0.0;
        for (long t : idx) {
            const VectorXd s = traj.states.row(t);
            const VectorXd fhat = forward(cp.model, s, mode).first;
            const VectorXd f = eval_vector_field(*bench, s);
            sq += (fhat - f).squaredNorm();
            sq_true += f.squaredNorm();
        }
        const double denom = static_cast<double>(idx.size()) * traj.dim();
        out.vf_rmse = std::sqrt(sq / denom);
        out.vf_rms_true = std::sqrt(sq_true / denom);
    }

    // Free rollout from the first state for phase plots; truncate on blowup.
    Trajectory roll;
    roll.states.resize(traj.rows(), traj.dim());
    roll.states.row(0) = traj.states.row(0);
    {
        VectorXd s = traj.states.row(0);
        long filled = 1;
        try {
            for (long i = 1; i < traj.rows(); ++i) {
                s += dt * forward(cp.model, s, mode).first;
                if (!s.allFinite()) break;
                roll.states.row(i) = s;
                filled = i + 1;
            }
        } catch (const NumericError&) {
        }
        roll.times = traj.times.head(filled);
        roll.states.conservativeResize(filled, traj.dim());
    }
    save_trajectory_csv((dir / "rollout.csv").string(), roll);

    json metrics;
    metrics["rmse_vs_horizon"] = out.rmse_vs_horizon;
    if (out.vf_rmse) {
        metrics["vf_rmse"] = *out.vf_rmse;
        metrics["vf_rms_true"] = *out.vf_rms_true;
        metrics["vf_rmse_ratio"] = *out.vf_rmse / *out.vf_rms_true;
    }
    write_json((dir / "metrics.json").string(), metrics);
    return out;
}

/// paramscaling: tabulates both parameter-count formulas over p and d.
/// Overflowing rows are flagged, not fatal.
inline void run_paramscaling(const std::vector<int>& p_values, int d_min, int d_max,
                             const std::string& out_path) {
    if (p_values.empty()) throw ArgumentError("need at least one polynomial order p");
    std::ofstream out(out_path);
    if (!out) throw IoError("cannot open for writing: " + out_path);
    out << "d,p,sindy_params,ac_params\n";
    for (int p : p_values)
        for (int d = d_min; d <= d_max; ++d) {
            out << d << ',' << p << ',';
            try {
                out << sindy_library_size(d, p);
            } catch (const RangeError&) {
                out << "overflow";
            }
            out << ',';
            try {
                out << ac_param_count_linear_terms(d, p);
            } catch (const RangeError&) {
                out << "overflow";
            }
            out << "\n";
        }
    if (!out) throw IoError("write failed: " + out_path);
}

}  // namespace acsindy
