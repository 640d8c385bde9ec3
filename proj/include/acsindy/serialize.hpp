#pragma once

// JSON checkpoint format for models (and an embedded encoder), plus report
// and log writers. Floats survive save/load bit-exactly.

#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "acsindy/circuit.hpp"
#include "acsindy/errors.hpp"
#include "acsindy/filtering.hpp"
#include "acsindy/pruning.hpp"
#include "acsindy/symbolic.hpp"
#include "acsindy/training.hpp"

namespace acsindy {

using nlohmann::json;

inline constexpr int kCheckpointFormatVersion = 1;

namespace detail {

inline json matrix_to_json(const MatrixXd& m) {
    json rows = json::array();
    for (long r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (long c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline MatrixXd matrix_from_json(const json& j) {
    if (!j.is_array() || j.empty()) throw IoError("expected a non-empty matrix array");
    const long rows = static_cast<long>(j.size());
    const long cols = static_cast<long>(j.at(0).size());
    MatrixXd m(rows, cols);
    for (long r = 0; r < rows; ++r) {
        const auto& row = j.at(static_cast<size_t>(r));
        if (static_cast<long>(row.size()) != cols) throw IoError("ragged matrix in checkpoint");
        for (long c = 0; c < cols; ++c) m(r, c) = row.at(static_cast<size_t>(c)).get<double>();
    }
    return m;
}

inline json vector_to_json(const VectorXd& v) {
    json arr = json::array();
    for (long i = 0; i < v.size(); ++i) arr.push_back(v(i));
    return arr;
}

inline VectorXd vector_from_json(const json& j) {
    VectorXd v(static_cast<long>(j.size()));
    for (long i = 0; i < v.size(); ++i) v(i) = j.at(static_cast<size_t>(i)).get<double>();
    return v;
}

inline json norm_to_json(const FeatureNormState& st) {
    return {{"sigma", vector_to_json(st.sigma)},
            {"epsilon", st.epsilon},
            {"count", st.count},
            {"frozen", st.frozen}};
}

inline FeatureNormState norm_from_json(const json& j, int n) {
    FeatureNormState st = FeatureNormState::identity(n);
    st.sigma = vector_from_json(j.at("sigma"));
    if (st.sigma.size() != n) throw IoError("sigma length mismatch in checkpoint");
    st.epsilon = j.at("epsilon").get<double>();
    st.count = j.at("count").get<long>();
    st.frozen = j.at("frozen").get<bool>();
    return st;
}

}  // namespace detail

inline json model_to_json(const CircuitModel& m) {
    json j;
    j["format_version"] = kCheckpointFormatVersion;
    j["seed"] = m.seed;
    j["input_dim"] = m.input_dim;
    j["output_dim"] = m.output_dim;
    j["head_skip"] = m.head_skip;
    j["norm_enabled"] = m.norm_enabled;
    json layers = json::array();
    for (const auto& l : m.layers) {
        json jl;
        jl["in_dim"] = l.spec.in_dim;
        jl["linear_out_dim"] = l.spec.linear_out_dim;
        jl["group_size"] = l.spec.group_size;
        json prims = json::array();
        for (Primitive p : l.spec.primitives)
            prims.push_back(p == Primitive::Sin ? "sin" : "product");
        jl["primitives"] = std::move(prims);
        jl["weights"] = detail::matrix_to_json(l.weights);
        jl["mask"] = detail::matrix_to_json(l.mask);
        jl["norm"] = detail::norm_to_json(l.norm);
        layers.push_back(std::move(jl));
    }
    j["layers"] = std::move(layers);
    j["head"] = {{"weights", detail::matrix_to_json(m.head_weights)},
                 {"mask", detail::matrix_to_json(m.head_mask)},
                 {"norm", detail::norm_to_json(m.head_norm)}};
    return j;
}

inline CircuitModel model_from_json(const json& j) {
    if (j.at("format_version").get<int>() != kCheckpointFormatVersion)
        throw IoError("unsupported checkpoint format_version");
    CircuitModel m;
    m.seed = j.at("seed").get<std::uint64_t>();
    m.input_dim = j.at("input_dim").get<int>();
    m.output_dim = j.at("output_dim").get<int>();
    m.head_skip = j.at("head_skip").get<bool>();
    m.norm_enabled = j.at("norm_enabled").get<bool>();
    for (const auto& jl : j.at("layers")) {
        CircuitLayer l;
        l.spec.in_dim = jl.at("in_dim").get<int>();
        l.spec.linear_out_dim = jl.at("linear_out_dim").get<int>();
        l.spec.group_size = jl.at("group_size").get<int>();
        for (const auto& p : jl.at("primitives"))
            l.spec.primitives.push_back(p.get<std::string>() == "sin" ? Primitive::Sin
                                                                      : Primitive::Product);
        l.weights = detail::matrix_from_json(jl.at("weights"));
        l.mask = detail::matrix_from_json(jl.at("mask"));
        l.norm = detail::norm_from_json(jl.at("norm"), l.spec.linear_out_dim);
        if (l.weights.rows() != l.spec.linear_out_dim ||
            l.weights.cols() != l.spec.in_dim + 1 || l.mask.rows() != l.weights.rows() ||
            l.mask.cols() != l.weights.cols())
            throw IoError("layer shape mismatch in checkpoint");
        m.layers.push_back(std::move(l));
    }
    m.head_weights = detail::matrix_from_json(j.at("head").at("weights"));
    m.head_mask = detail::matrix_from_json(j.at("head").at("mask"));
    m.head_norm = detail::norm_from_json(j.at("head").at("norm"), m.head_in());
    if (m.head_weights.rows() != m.output_dim || m.head_weights.cols() != m.head_in() + 1)
        throw IoError("head shape mismatch in checkpoint");
    validate_chain([&] {
        std::vector<LayerSpec> specs;
        for (const auto& l : m.layers) specs.push_back(l.spec);
        return specs;
    }());
    return m;
}

inline json encoder_to_json(const EncoderModel& e) {
    return {{"state_dim", e.state_dim},
            {"window", e.window},
            {"weights", detail::matrix_to_json(e.weights)}};
}

inline EncoderModel encoder_from_json(const json& j) {
    EncoderModel e;
    e.state_dim = j.at("state_dim").get<int>();
    e.window = j.at("window").get<int>();
    e.weights = detail::matrix_from_json(j.at("weights"));
    if (e.weights.rows() != e.state_dim ||
        e.weights.cols() != static_cast<long>(e.window) * e.state_dim + 1)
        throw IoError("encoder shape mismatch in checkpoint");
    return e;
}

struct Checkpoint {
    CircuitModel model;
    std::optional<EncoderModel> encoder;
};

inline void save_checkpoint(const std::string& path, const CircuitModel& model,
                            const EncoderModel* encoder = nullptr) {
    json j = model_to_json(model);
    if (encoder) j["encoder"] = encoder_to_json(*encoder);
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << j.dump(2) << "\n";
    if (!out) throw IoError("write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open for reading: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw IoError("malformed checkpoint " + path + ": " + e.what());
    }
    Checkpoint cp;
    cp.model = model_from_json(j);
    if (j.contains("encoder")) cp.encoder = encoder_from_json(j.at("encoder"));
    return cp;
}

// ---------------------------------------------------------------------------
// Reports and logs

inline json report_to_json(const TrainReport& rep) {
    return {{"train_loss", rep.train_loss},
            {"val_loss", rep.val_loss},
            {"plateau_epochs", rep.plateau_epochs},
            {"status", to_string(rep.status)}};
}

inline json prune_run_to_json(const PruneRunResult& run) {
    json j = report_to_json(run.history);
    j["prune_epochs"] = run.prune_epochs;
    j["best_round"] = run.best_round;
    json rounds = json::array();
    for (const auto& cp : run.checkpoints)
        rounds.push_back({{"round", cp.round},
                          {"active_params", cp.active_params},
                          {"val_loss", cp.val_loss}});
    j["rounds"] = std::move(rounds);
    return j;
}

inline void write_json(const std::string& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << j.dump(2) << "\n";
    if (!out) throw IoError("write failed: " + path);
}

inline json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open for reading: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw IoError("malformed JSON " + path + ": " + e.what());
    }
    return j;
}

/// epoch,train_loss,val_loss rows for loss-curve plotting.
inline void write_loss_csv(const std::string& path, const TrainReport& rep) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << "epoch,train_loss,val_loss\n";
    for (size_t i = 0; i < rep.train_loss.size(); ++i)
        out << (i + 1) << ',' << format_g17(rep.train_loss[i]) << ','
            << format_g17(i < rep.val_loss.size() ? rep.val_loss[i] : 0.0) << "\n";
    if (!out) throw IoError("write failed: " + path);
}

inline void write_prune_log_csv(const std::string& path, const PruneRunResult& run) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << "round,active_params,val_loss\n";
    for (const auto& cp : run.checkpoints)
        out << cp.round << ',' << cp.active_params << ',' << format_g17(cp.val_loss) << "\n";
    if (!out) throw IoError("write failed: " + path);
}

inline json polynomial_to_json(const Polynomial& p) {
    json terms = json::array();
    for (const auto& [m, c] : p.terms)
        terms.push_back({{"exponents", m.exponents}, {"coefficient", c}});
    return {{"num_vars", p.num_vars}, {"terms", std::move(terms)}};
}

inline json system_to_json(const SymbolicSystem& sys) {
    json comps = json::array();
    for (const auto& comp : sys.components) {
        json sins = json::array();
        for (const auto& s : comp.sins)
            sins.push_back({{"coefficient", s.coef}, {"argument", polynomial_to_json(s.argument)}});
        comps.push_back({{"polynomial", polynomial_to_json(comp.poly)}, {"sins", std::move(sins)}});
    }
    return {{"state_dim", sys.state_dim}, {"components", std::move(comps)}};
}

inline json recovery_report_to_json(const RecoveryReport& rep, int state_dim) {
    const auto names = detail::variable_names(state_dim);
    auto term = [&](const TermDiff& t) {
        json j;
        j["monomial"] = t.monomial.exponents;
        std::string name = detail::monomial_text(t.monomial, names);
        j["name"] = name.empty() ? "1" : name;
        j["truth"] = t.truth;
        j["recovered"] = t.recovered;
        return j;
    };
    json comps = json::array();
    for (const auto& c : rep.components) {
        json jc;
        jc["matched"] = json::array();
        for (const auto& t : c.matched) jc["matched"].push_back(term(t));
        jc["missing"] = json::array();
        for (const auto& t : c.missing) jc["missing"].push_back(term(t));
        jc["spurious"] = json::array();
        for (const auto& t : c.spurious) jc["spurious"].push_back(term(t));
        jc["max_abs_error"] = c.max_abs_error;
        comps.push_back(std::move(jc));
    }
    return {{"components", std::move(comps)},
            {"max_abs_error", rep.max_abs_error},
            {"missing_count", rep.missing_count},
            {"spurious_count", rep.spurious_count}};
}

}  // namespace acsindy
