#pragma once

// Shared test helpers: random circuit generation, finite-difference gradient
// oracles over the multi-step rollout loss, and a parser for rendered
// equations (inverse of symbolic render, for round-trip checks).

#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "acsindy/circuit.hpp"
#include "acsindy/filtering.hpp"
#include "acsindy/symbolic.hpp"
#include "acsindy/training.hpp"

namespace acsindy_test {

using namespace acsindy;

/// Random product-only circuit of the given depth; widths chosen so every
/// layer chains. With allow_sin, some groups in the first layer become Sin.
inline CircuitModel random_circuit(std::mt19937_64& rng, int input_dim, int depth,
                                   int groups_per_layer, int group_size, bool head_skip,
                                   int output_dim, bool allow_sin = false) {
    std::vector<LayerSpec> specs;
    int in = input_dim;
    std::uniform_int_distribution<int> coin(0, 3);
    for (int l = 0; l < depth; ++l) {
        LayerSpec spec;
        spec.in_dim = in;
        spec.group_size = group_size;
        int width = 0;
        for (int g = 0; g < groups_per_layer; ++g) {
            const bool sin_group = allow_sin && l == depth - 1 && coin(rng) == 0;
            spec.primitives.push_back(sin_group ? Primitive::Sin : Primitive::Product);
            width += sin_group ? 1 : group_size;
        }
        spec.linear_out_dim = width;
        specs.push_back(spec);
        in = groups_per_layer;
    }
    return init_model(specs, output_dim, rng(), head_skip);
}

/// Accumulates normalization statistics over random data and freezes, so
/// Frozen-mode evaluation exercises nontrivial divisors.
inline void randomize_norm(CircuitModel& m, std::mt19937_64& rng, double scale = 1.5) {
    std::normal_distribution<double> dist(0.0, scale);
    MatrixXd rows(32, m.input_dim);
    for (long i = 0; i < rows.rows(); ++i)
        for (long j = 0; j < rows.cols(); ++j) rows(i, j) = dist(rng);
    m = reset_norm(std::move(m));
    accumulate_norm(m, rows);
    m = freeze_norm(std::move(m));
}

struct FlatParams {
    std::vector<double*> entries;  // only unmasked weights
};

inline FlatParams flat_unmasked(CircuitModel& m) {
    FlatParams fp;
    for (auto& l : m.layers)
        for (long r = 0; r < l.weights.rows(); ++r)
            for (long c = 0; c < l.weights.cols(); ++c)
                if (l.mask(r, c) != 0.0) fp.entries.push_back(&l.weights(r, c));
    for (long r = 0; r < m.head_weights.rows(); ++r)
        for (long c = 0; c < m.head_weights.cols(); ++c)
            if (m.head_mask(r, c) != 0.0) fp.entries.push_back(&m.head_weights(r, c));
    return fp;
}

inline std::vector<double> flatten_grads(const CircuitModel& m, const ParamGrads& g) {
    std::vector<double> out;
    for (size_t l = 0; l < m.layers.size(); ++l)
        for (long r = 0; r < m.layers[l].weights.rows(); ++r)
            for (long c = 0; c < m.layers[l].weights.cols(); ++c)
                if (m.layers[l].mask(r, c) != 0.0) out.push_back(g.layers[l](r, c));
    for (long r = 0; r < m.head_weights.rows(); ++r)
        for (long c = 0; c < m.head_weights.cols(); ++c)
            if (m.head_mask(r, c) != 0.0) out.push_back(g.head(r, c));
    return out;
}

/// Central finite differences of an arbitrary scalar function of the model
/// weights, taken over every unmasked entry.
inline std::vector<double> fd_gradient(CircuitModel& m,
                                       const std::function<double()>& scalar_fn,
                                       double step = 1e-5) {
    FlatParams fp = flat_unmasked(m);
    std::vector<double> grad;
    grad.reserve(fp.entries.size());
    for (double* w : fp.entries) {
        const double saved = *w;
        *w = saved + step;
        const double fp_val = scalar_fn();
        *w = saved - step;
        const double fm_val = scalar_fn();
        *w = saved;
        grad.push_back((fp_val - fm_val) / (2.0 * step));
    }
    return grad;
}

/// max over entries of |a-b| / max(floor, |a|, |b|), the spec's
/// relative-with-absolute-floor comparison.
inline double max_rel_error(const std::vector<double>& a, const std::vector<double>& b,
                            double floor = 1e-8) {
    double worst = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double denom = std::max({floor, std::abs(a[i]), std::abs(b[i])});
        worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
    }
    return worst;
}

// ---------------------------------------------------------------------------
// Parser for rendered equations (test-only inverse of render()).

inline std::map<std::string, double> parse_rendered_line(const std::string& line) {
    // Strips the "d?/dt = " prefix, splits on " + " / " − ", and reads
    // "coef", "coef·x", "coef·x·y", "coef·y²" term shapes.
    std::map<std::string, double> terms;
    const std::string minus = "−";
    const std::string dot = "·";
    auto pos = line.find("= ");
    if (pos == std::string::npos) return terms;
    std::string body = line.substr(pos + 2);
    if (body == "0") return terms;

    std::vector<std::pair<double, std::string>> raw;  // (sign, text)
    double sign = 1.0;
    if (body.rfind(minus, 0) == 0) {
        sign = -1.0;
        body = body.substr(minus.size());
    }
    size_t start = 0;
    while (true) {
        const size_t plus = body.find(" + ", start);
        const size_t neg = body.find(" " + minus + " ", start);
        const size_t cut = std::min(plus, neg);
        raw.push_back({sign, body.substr(start, cut - start)});
        if (cut == std::string::npos) break;
        if (cut == plus) {
            sign = 1.0;
            start = cut + 3;
        } else {
            sign = -1.0;
            start = cut + 2 + minus.size();
        }
    }

    auto superscript_value = [&](const std::string& s, size_t& i) {
        static const std::vector<std::string> sup = {"⁰", "¹", "²", "³",
                                                     "⁴", "⁵", "⁶", "⁷",
                                                     "⁸", "⁹"};
        int value = 0;
        bool found = true;
        while (found && i < s.size()) {
            found = false;
            for (int d = 0; d < 10; ++d)
                if (s.compare(i, sup[static_cast<size_t>(d)].size(),
                              sup[static_cast<size_t>(d)]) == 0) {
                    value = value * 10 + d;
                    i += sup[static_cast<size_t>(d)].size();
                    found = true;
                    break;
                }
        }
        return value == 0 ? 1 : value;
    };

    for (auto& [sgn, text] : raw) {
        const size_t first_dot = text.find(dot);
        const double coef = sgn * std::stod(text.substr(0, first_dot));
        std::string key;  // canonical "x^a y^b" style: sorted variable letters expanded
        if (first_dot != std::string::npos) {
            std::map<std::string, int> vars;
            size_t i = first_dot + dot.size();
            while (i < text.size()) {
                // variable name: letters and digits up to superscript or dot
                std::string name;
                while (i < text.size() && ((text[i] >= 'a' && text[i] <= 'z') ||
                                           (text[i] >= '0' && text[i] <= '9')))
                    name += text[i++];
                int exp = 1;
                if (i < text.size() && text.compare(i, dot.size(), dot) != 0)
                    exp = superscript_value(text, i);
                vars[name] += exp;
                if (i < text.size() && text.compare(i, dot.size(), dot) == 0) i += dot.size();
            }
            for (const auto& [n, e] : vars)
                for (int k = 0; k < e; ++k) key += n;
        }
        terms[key] += coef;
    }
    return terms;
}

}  // namespace acsindy_test
