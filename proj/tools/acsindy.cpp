// acsindy command-line interface: simulate | train | extract | eval |
// paramscaling. Configuration comes from a JSON file with flat CLI
// overrides; precedence is CLI > file > defaults. Every command writes its
// fully resolved config next to its outputs.

#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "acsindy/experiment.hpp"

namespace {

using acsindy::json;

std::vector<double> parse_csv_doubles(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(std::stod(cell));
    return out;
}

// Flat override flags shared by simulate/train. Only values the user
// actually passed enter the override object.
struct Overrides {
    std::optional<std::string> system, out_dir, x0, system_params;
    std::optional<double> dt, noise_sigma, learning_rate, plateau_rel_tol, prune_fraction,
        prune_degradation_factor, train_frac, val_frac, test_frac, adam_beta1, adam_beta2,
        adam_eps;
    std::optional<long> steps, prune_floor, prune_scoring_windows;
    std::optional<std::uint64_t> seed;
    std::optional<int> horizon, batch_size, max_epochs, plateau_window, finetune_max_epochs,
        terms_per_state, group_size, sin_units, prune_patience, prune_max_rounds, filter_window;
    std::optional<bool> head_skip, use_norm, prune_enabled, filter_enabled;

    void attach(CLI::App* cmd) {
        cmd->add_option("--system", system, "benchmark system: nonlinear2d | lorenz | lorenz_forced");
        cmd->add_option("--out", out_dir, "output directory");
        cmd->add_option("--x0", x0, "initial state, comma separated");
        cmd->add_option("--system-params", system_params, "system parameters, comma separated");
        cmd->add_option("--dt", dt, "integration step");
        cmd->add_option("--steps", steps, "integration steps");
        cmd->add_option("--noise", noise_sigma, "observation noise std");
        cmd->add_option("--seed", seed, "rng seed");
        cmd->add_option("--train-frac", train_frac);
        cmd->add_option("--val-frac", val_frac);
        cmd->add_option("--test-frac", test_frac);
        cmd->add_option("--terms-per-state", terms_per_state, "product terms per state dim");
        cmd->add_option("--group-size", group_size, "product arity");
        cmd->add_option("--sin-units", sin_units, "number of sin interaction units");
        cmd->add_option("--head-skip", head_skip, "head sees the raw input too");
        cmd->add_option("--use-norm", use_norm, "enable feature normalization");
        cmd->add_option("--lr", learning_rate, "Adam learning rate");
        cmd->add_option("--adam-beta1", adam_beta1);
        cmd->add_option("--adam-beta2", adam_beta2);
        cmd->add_option("--adam-eps", adam_eps);
        cmd->add_option("--horizon", horizon, "multi-step horizon K");
        cmd->add_option("--batch-size", batch_size);
        cmd->add_option("--max-epochs", max_epochs);
        cmd->add_option("--plateau-window", plateau_window);
        cmd->add_option("--plateau-rel-tol", plateau_rel_tol);
        cmd->add_option("--finetune-max-epochs", finetune_max_epochs);
        cmd->add_flag("--no-prune", "disable the pruning ladder");
        cmd->add_option("--prune-fraction", prune_fraction);
        cmd->add_option("--prune-floor", prune_floor);
        cmd->add_option("--prune-patience", prune_patience);
        cmd->add_option("--prune-degradation-factor", prune_degradation_factor);
        cmd->add_option("--prune-scoring-windows", prune_scoring_windows);
        cmd->add_option("--prune-max-rounds", prune_max_rounds);
        cmd->add_option("--filter", filter_enabled, "enable the observation-window encoder");
        cmd->add_option("--filter-window", filter_window, "encoder window length W");
    }

    json to_json(const CLI::App* cmd) const {
        json j = json::object();
        auto put = [&j](const char* key, const auto& opt) {
            if (opt) j[key] = *opt;
        };
        put("system", system);
        put("out_dir", out_dir);
        if (x0) j["x0"] = parse_csv_doubles(*x0);
        if (system_params) j["system_params"] = parse_csv_doubles(*system_params);
        put("dt", dt);
        put("steps", steps);
        put("noise_sigma", noise_sigma);
        put("seed", seed);
        put("train_frac", train_frac);
        put("val_frac", val_frac);
        put("test_frac", test_frac);
        put("terms_per_state", terms_per_state);
        put("group_size", group_size);
        put("sin_units", sin_units);
        put("head_skip", head_skip);
        put("use_norm", use_norm);
        put("learning_rate", learning_rate);
        put("adam_beta1", adam_beta1);
        put("adam_beta2", adam_beta2);
        put("adam_eps", adam_eps);
        put("horizon", horizon);
        put("batch_size", batch_size);
        put("max_epochs", max_epochs);
        put("plateau_window", plateau_window);
        put("plateau_rel_tol", plateau_rel_tol);
        put("finetune_max_epochs", finetune_max_epochs);
        if (cmd->count("--no-prune") > 0) j["prune_enabled"] = false;
        put("prune_fraction", prune_fraction);
        put("prune_floor", prune_floor);
        put("prune_patience", prune_patience);
        put("prune_degradation_factor", prune_degradation_factor);
        put("prune_scoring_windows", prune_scoring_windows);
        put("prune_max_rounds", prune_max_rounds);
        put("filter_enabled", filter_enabled);
        put("filter_window", filter_window);
        return j;
    }
};

acsindy::ExperimentConfig make_config(const std::string& config_path, const Overrides& ov,
                                      const CLI::App* cmd) {
    json file = json();
    if (!config_path.empty()) file = acsindy::read_json(config_path);
    return acsindy::resolve_config(file, ov.to_json(cmd));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acsindy: sparse identification of nonlinear dynamics with arithmetic circuits"};
    app.require_subcommand(1);

    std::string config_path;
    app.add_option("--config", config_path, "JSON config file")->expected(1);

    auto* sim = app.add_subcommand("simulate", "generate benchmark trajectories");
    Overrides sim_ov;
    sim_ov.attach(sim);

    auto* trn = app.add_subcommand("train", "train, prune and select a circuit model");
    Overrides trn_ov;
    trn_ov.attach(trn);

    auto* ext = app.add_subcommand("extract", "expand a checkpoint into equations");
    std::string ext_checkpoint;
    int ext_precision = 3;
    double ext_drop_tol = acsindy::kReportDropTol;
    ext->add_option("checkpoint", ext_checkpoint, "model checkpoint JSON")->required();
    ext->add_option("--precision", ext_precision, "rendered decimals");
    ext->add_option("--drop-tol", ext_drop_tol, "coefficient suppression threshold");

    auto* evl = app.add_subcommand("eval", "rollout and vector-field metrics");
    std::string evl_checkpoint, evl_traj;
    int evl_k = 50;
    evl->add_option("checkpoint", evl_checkpoint, "model checkpoint JSON")->required();
    evl->add_option("trajectory", evl_traj, "trajectory CSV")->required();
    evl->add_option("--k-eval", evl_k, "evaluation horizon");

    auto* scl = app.add_subcommand("paramscaling", "tabulate parameter-count scaling");
    std::vector<int> scl_p = {2, 3, 4};
    int scl_dmin = 1, scl_dmax = 50;
    std::string scl_out = "scaling.csv";
    scl->add_option("--p", scl_p, "polynomial orders");
    scl->add_option("--d-min", scl_dmin);
    scl->add_option("--d-max", scl_dmax);
    scl->add_option("--out", scl_out, "output CSV path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (sim->parsed()) {
            const auto cfg = make_config(config_path, sim_ov, sim);
            acsindy::run_simulate(cfg);
            std::cout << "wrote trajectories to " << cfg.out_dir << "\n";
        } else if (trn->parsed()) {
            const auto cfg = make_config(config_path, trn_ov, trn);
            const auto out = acsindy::run_train(cfg);
            const auto& run = out.run;
            std::cout << "rounds: " << run.checkpoints.size() << ", best round "
                      << run.best_round << ", active params "
                      << acsindy::count_active_params(run.best_model) << ", status "
                      << acsindy::to_string(run.status) << "\n";
            std::cout << "best checkpoint: " << out.best_path.string() << "\n";
            std::cout << "wall time: " << run.history.wall_seconds << " s\n";
        } else if (ext->parsed()) {
            const auto out = acsindy::run_extract(ext_checkpoint, ext_drop_tol, ext_precision);
            std::cout << out.rendered;
            if (out.report)
                std::cout << "recovery: max |coef error| " << out.report->max_abs_error << ", "
                          << out.report->missing_count << " missing, "
                          << out.report->spurious_count << " spurious\n";
        } else if (evl->parsed()) {
            const auto out = acsindy::run_eval(evl_checkpoint, evl_traj, evl_k);
            std::cout << "rmse@1 " << out.rmse_vs_horizon.front() << ", rmse@"
                      << out.rmse_vs_horizon.size() << " " << out.rmse_vs_horizon.back() << "\n";
            if (out.vf_rmse)
                std::cout << "vector-field rmse " << *out.vf_rmse << " (field rms "
                          << *out.vf_rms_true << ")\n";
        } else if (scl->parsed()) {
            acsindy::run_paramscaling(scl_p, scl_dmin, scl_dmax, scl_out);
            std::cout << "wrote " << scl_out << "\n";
        }
    } catch (const acsindy::ArgumentError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const acsindy::StateError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const acsindy::RangeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const acsindy::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const acsindy::IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
