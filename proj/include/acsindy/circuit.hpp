#pragma once

// The compositional arithmetic-circuit model: masked linear layers feeding
// groupwise product (or sin) interaction nodes, with per-feature running-std
// normalization, an optional raw-input skip into the head, and exact
// reverse-mode gradients through the whole stack.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "acsindy/errors.hpp"

namespace acsindy {

using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class Primitive { Product, Sin };
enum class NormMode { Off, Frozen, Accumulate };

/// Shape of one layer: a d x (in+1) masked linear map whose outputs are
/// consumed by interaction groups. Product groups take group_size features,
/// Sin groups take one. An empty primitives list means all-Product.
struct LayerSpec {
    int in_dim = 0;
    int linear_out_dim = 0;
    int group_size = 2;
    std::vector<Primitive> primitives;
};

struct GroupRef {
    int start = 0;
    int size = 0;
    Primitive primitive = Primitive::Product;
};

inline std::vector<GroupRef> layer_groups(const LayerSpec& spec) {
    if (spec.in_dim < 1 || spec.linear_out_dim < 1)
        throw ArgumentError("layer dims must be positive");
    std::vector<GroupRef> groups;
    if (spec.primitives.empty()) {
        if (spec.group_size < 1) throw ArgumentError("group_size must be >= 1");
        if (spec.linear_out_dim % spec.group_size != 0)
            throw ArgumentError("linear_out_dim not divisible by group_size");
        for (int s = 0; s < spec.linear_out_dim; s += spec.group_size)
            groups.push_back({s, spec.group_size, Primitive::Product});
        return groups;
    }
    int s = 0;
    for (Primitive p : spec.primitives) {
        const int width = p == Primitive::Product ? spec.group_size : 1;
        groups.push_back({s, width, p});
        s += width;
    }
    if (s != spec.linear_out_dim)
        throw ArgumentError("primitive groups do not cover linear_out_dim exactly");
    return groups;
}

inline int layer_out_dim(const LayerSpec& spec) {
    return static_cast<int>(layer_groups(spec).size());
}

/// Running per-feature standard deviation used as a frozen, gradient-free
/// divisor. Welford accumulators; sigma is the population std.
struct FeatureNormState {
    VectorXd sigma;
    double epsilon = 1e-8;
    long count = 0;
    bool frozen = false;
    // Welford accumulators (reset together with sigma).
    VectorXd mean;
    VectorXd m2;

    static FeatureNormState identity(int n, double eps = 1e-8) {
        FeatureNormState st;
        st.sigma = VectorXd::Ones(n);
        st.epsilon = eps;
        st.mean = VectorXd::Zero(n);
        st.m2 = VectorXd::Zero(n);
        return st;
    }
};

// Features with sigma below this are treated as near-constant: the divisor
// collapses to epsilon and their scale lives in downstream weights.
inline constexpr double kNearConstantSigma = 1e-6;

inline double norm_divisor(double sigma, double epsilon) {
    return sigma < kNearConstantSigma ? epsilon : sigma + epsilon;
}

inline VectorXd norm_divisors(const FeatureNormState& st) {
    VectorXd div(st.sigma.size());
    for (long i = 0; i < div.size(); ++i) div(i) = norm_divisor(st.sigma(i), st.epsilon);
    return div;
}

struct CircuitLayer {
    LayerSpec spec;
    MatrixXd weights;  // linear_out_dim x (in_dim + 1); last column is the bias
    MatrixXd mask;     // 0/1, same shape
    FeatureNormState norm;

    MatrixXd effective() const { return weights.cwiseProduct(mask); }
};

/// The learned hypothesis: a stack of circuit layers plus a masked linear
/// head. With head_skip the head also sees the raw input, so linear and
/// constant dynamics terms need no product path.
struct CircuitModel {
    int input_dim = 0;
    int output_dim = 0;
    bool head_skip = false;
    bool norm_enabled = true;  // which NormMode pipelines evaluate this model with
    std::uint64_t seed = 0;
    std::vector<CircuitLayer> layers;
    MatrixXd head_weights;  // output_dim x (head_in + 1)
    MatrixXd head_mask;
    FeatureNormState head_norm;

    int head_in() const {
        int n = layers.empty() ? input_dim : layer_out_dim(layers.back().spec);
        if (head_skip) n += input_dim;
        return n;
    }
    MatrixXd head_effective() const { return head_weights.cwiseProduct(head_mask); }
    NormMode eval_mode() const { return norm_enabled ? NormMode::Frozen : NormMode::Off; }
};

/// Gradients (or any per-edge quantity) shape-matched to the model weights.
struct ParamBlocks {
    std::vector<MatrixXd> layers;
    MatrixXd head;

    static ParamBlocks zeros_like(const CircuitModel& m) {
        ParamBlocks b;
        b.layers.reserve(m.layers.size());
        for (const auto& l : m.layers) b.layers.push_back(MatrixXd::Zero(l.weights.rows(), l.weights.cols()));
        b.head = MatrixXd::Zero(m.head_weights.rows(), m.head_weights.cols());
        return b;
    }
    ParamBlocks& operator+=(const ParamBlocks& o) {
        for (size_t i = 0; i < layers.size(); ++i) layers[i] += o.layers[i];
        head += o.head;
        return *this;
    }
    ParamBlocks& operator*=(double s) {
        for (auto& l : layers) l *= s;
        head *= s;
        return *this;
    }
    bool allFinite() const {
        for (const auto& l : layers)
            if (!l.allFinite()) return false;
        return head.allFinite();
    }
};

using ParamGrads = ParamBlocks;

/// Activation cache from one (batched) forward pass; rows index samples.
struct ForwardTrace {
    struct Layer {
        MatrixXd xaug;  // B x (in+1)
        MatrixXd h;     // B x d, pre-normalization
        MatrixXd htil;  // B x d, normalized (== h when norm off)
        VectorXd div;   // divisors applied per feature
        MatrixXd out;   // B x groups
    };
    std::vector<Layer> layers;
    MatrixXd head_u;     // B x head_in, pre-normalization
    MatrixXd head_util;  // B x head_in
    VectorXd head_div;
    MatrixXd output;  // B x output_dim
    NormMode mode = NormMode::Off;
    long batch() const { return output.rows(); }
};

// ---------------------------------------------------------------------------
// Construction

inline void validate_chain(const std::vector<LayerSpec>& specs) {
    if (specs.empty()) throw ArgumentError("at least one layer spec required");
    for (size_t l = 0; l < specs.size(); ++l) {
        (void)layer_groups(specs[l]);
        if (l > 0 && specs[l].in_dim != layer_out_dim(specs[l - 1]))
            throw ArgumentError("layer " + std::to_string(l) + " input dim does not chain");
    }
}

/// Fresh model: weights i.i.d. N(0, 1/(fan_in+1)), all mask entries 1,
/// sigma 1 and unfrozen. Deterministic for a fixed seed.
inline CircuitModel init_model(const std::vector<LayerSpec>& specs, int output_dim,
                               std::uint64_t seed, bool head_skip = false) {
    validate_chain(specs);
    if (output_dim < 1) throw ArgumentError("output_dim must be >= 1");

    CircuitModel m;
    m.input_dim = specs.front().in_dim;
    m.output_dim = output_dim;
    m.head_skip = head_skip;
    m.seed = seed;

    std::mt19937_64 rng(seed);
    auto fill_gaussian = [&rng](MatrixXd& w, int fan_in) {
        std::normal_distribution<double> dist(0.0, std::sqrt(1.0 / (fan_in + 1)));
        for (long i = 0; i < w.rows(); ++i)
            for (long j = 0; j < w.cols(); ++j) w(i, j) = dist(rng);
    };

    for (const auto& spec : specs) {
        CircuitLayer layer;
        layer.spec = spec;
        layer.weights.resize(spec.linear_out_dim, spec.in_dim + 1);
        fill_gaussian(layer.weights, spec.in_dim);
        layer.mask = MatrixXd::Ones(spec.linear_out_dim, spec.in_dim + 1);
        layer.norm = FeatureNormState::identity(spec.linear_out_dim);
        m.layers.push_back(std::move(layer));
    }
    const int hin = m.head_in();
    m.head_weights.resize(output_dim, hin + 1);
    fill_gaussian(m.head_weights, hin);
    m.head_mask = MatrixXd::Ones(output_dim, hin + 1);
    m.head_norm = FeatureNormState::identity(hin);
    return m;
}

inline long count_active_params(const CircuitModel& m) {
    long n = 0;
    for (const auto& l : m.layers) n += static_cast<long>(l.mask.sum() + 0.5);
    n += static_cast<long>(m.head_mask.sum() + 0.5);
    return n;
}

inline CircuitModel freeze_norm(CircuitModel m) {
    for (auto& l : m.layers) l.norm.frozen = true;
    m.head_norm.frozen = true;
    return m;
}

inline CircuitModel reset_norm(CircuitModel m) {
    for (auto& l : m.layers) l.norm = FeatureNormState::identity(l.spec.linear_out_dim, l.norm.epsilon);
    m.head_norm = FeatureNormState::identity(m.head_in(), m.head_norm.epsilon);
    return m;
}

// ---------------------------------------------------------------------------
// Forward

namespace detail {

inline void welford_update(FeatureNormState& st, const VectorXd& sample) {
    if (st.frozen) return;
    st.count += 1;
    for (long i = 0; i < sample.size(); ++i) {
        const double delta = sample(i) - st.mean(i);
        st.mean(i) += delta / static_cast<double>(st.count);
        st.m2(i) += delta * (sample(i) - st.mean(i));
    }
    for (long i = 0; i < sample.size(); ++i)
        st.sigma(i) = std::sqrt(st.m2(i) / static_cast<double>(st.count));
}

inline MatrixXd augment_ones(const MatrixXd& x) {
    MatrixXd xa(x.rows(), x.cols() + 1);
    xa.leftCols(x.cols()) = x;
    xa.col(x.cols()).setOnes();
    return xa;
}

// Groupwise interaction outputs for a batch of normalized features.
inline MatrixXd interact(const std::vector<GroupRef>& groups, const MatrixXd& htil) {
    MatrixXd out(htil.rows(), static_cast<long>(groups.size()));
    for (size_t k = 0; k < groups.size(); ++k) {
        const auto& g = groups[k];
        if (g.primitive == Primitive::Sin) {
            out.col(static_cast<long>(k)) = htil.col(g.start).array().sin();
        } else {
            out.col(static_cast<long>(k)) = htil.col(g.start);
            for (int j = 1; j < g.size; ++j)
                out.col(static_cast<long>(k)).array() *= htil.col(g.start + j).array();
        }
    }
    return out;
}

}  // namespace detail

/// Batched forward pass (rows = samples). Off and Frozen only; the model is
/// untouched. Throws NumericError naming the layer on a non-finite value.
inline ForwardTrace forward_batch(const CircuitModel& m, const MatrixXd& X, NormMode mode) {
    if (mode == NormMode::Accumulate)
        throw ArgumentError("forward_batch cannot accumulate; use accumulate_norm/forward");
    if (X.cols() != m.input_dim) throw ArgumentError("input dim mismatch in forward");
    if (!X.allFinite()) throw NumericError("non-finite input to forward");

    ForwardTrace tr;
    tr.mode = mode;
    tr.layers.resize(m.layers.size());
    MatrixXd cur = X;
    for (size_t l = 0; l < m.layers.size(); ++l) {
        const auto& layer = m.layers[l];
        auto& t = tr.layers[l];
        t.xaug = detail::augment_ones(cur);
        t.h.noalias() = t.xaug * layer.effective().transpose();
        if (!t.h.allFinite())
            throw NumericError("non-finite features in layer " + std::to_string(l));
        if (mode == NormMode::Frozen) {
            t.div = norm_divisors(layer.norm);
            t.htil = t.h.array().rowwise() / t.div.transpose().array();
        } else {
            t.div = VectorXd::Ones(t.h.cols());
            t.htil = t.h;
        }
        t.out = detail::interact(layer_groups(layer.spec), t.htil);
        if (!t.out.allFinite())
            throw NumericError("non-finite interaction output in layer " + std::to_string(l));
        cur = t.out;
    }

    if (m.head_skip) {
        MatrixXd u(cur.rows(), cur.cols() + X.cols());
        u.leftCols(cur.cols()) = cur;
        u.rightCols(X.cols()) = X;
        tr.head_u = std::move(u);
    } else {
        tr.head_u = cur;
    }
    if (mode == NormMode::Frozen) {
        tr.head_div = norm_divisors(m.head_norm);
        tr.head_util = tr.head_u.array().rowwise() / tr.head_div.transpose().array();
    } else {
        tr.head_div = VectorXd::Ones(tr.head_u.cols());
        tr.head_util = tr.head_u;
    }
    tr.output.noalias() = detail::augment_ones(tr.head_util) * m.head_effective().transpose();
    if (!tr.output.allFinite()) throw NumericError("non-finite output in head");
    return tr;
}

/// One-sample Welford pass through the model: updates every unfrozen norm
/// state with this sample's features, using the running sigma as it evolves.
inline VectorXd accumulate_norm_sample(CircuitModel& m, const VectorXd& x) {
    if (x.size() != m.input_dim) throw ArgumentError("input dim mismatch in forward");
    VectorXd cur = x;
    for (auto& layer : m.layers) {
        VectorXd xaug(cur.size() + 1);
        xaug << cur, 1.0;
        VectorXd h = layer.effective() * xaug;
        detail::welford_update(layer.norm, h);
        const VectorXd div = norm_divisors(layer.norm);
        VectorXd htil = h.array() / div.array();
        MatrixXd row = htil.transpose();
        cur = detail::interact(layer_groups(layer.spec), row).row(0);
    }
    VectorXd u;
    if (m.head_skip) {
        u.resize(cur.size() + x.size());
        u << cur, x;
    } else {
        u = cur;
    }
    detail::welford_update(m.head_norm, u);
    const VectorXd div = norm_divisors(m.head_norm);
    VectorXd util = u.array() / div.array();
    VectorXd uaug(util.size() + 1);
    uaug << util, 1.0;
    return m.head_effective() * uaug;
}

/// Sequential Welford accumulation over a set of rows (e.g. a training
/// trajectory's states).
inline void accumulate_norm(CircuitModel& m, const MatrixXd& rows) {
    for (long i = 0; i < rows.rows(); ++i) (void)accumulate_norm_sample(m, rows.row(i));
}

namespace detail {

inline void set_norm_from_columns(FeatureNormState& st, const MatrixXd& H) {
    if (st.frozen) return;
    const long n = H.rows();
    st.count = n;
    for (long j = 0; j < H.cols(); ++j) {
        const double mean = H.col(j).mean();
        const double m2 = (H.col(j).array() - mean).square().sum();
        st.mean(j) = mean;
        st.m2(j) = m2;
        st.sigma(j) = std::sqrt(m2 / static_cast<double>(n));
    }
}

}  // namespace detail

/// Stage-wise warm-up: each layer's sigma is estimated over the whole
/// dataset before the next layer's statistics are touched, so downstream
/// features never see a half-estimated divisor.
inline void calibrate_norm(CircuitModel& m, const MatrixXd& rows) {
    MatrixXd cur = rows;
    for (auto& layer : m.layers) {
        const MatrixXd h = detail::augment_ones(cur) * layer.effective().transpose();
        detail::set_norm_from_columns(layer.norm, h);
        const VectorXd div = norm_divisors(layer.norm);
        const MatrixXd htil = h.array().rowwise() / div.transpose().array();
        cur = detail::interact(layer_groups(layer.spec), htil);
    }
    if (m.head_skip) {
        MatrixXd u(cur.rows(), cur.cols() + rows.cols());
        u.leftCols(cur.cols()) = cur;
        u.rightCols(rows.cols()) = rows;
        detail::set_norm_from_columns(m.head_norm, u);
    } else {
        detail::set_norm_from_columns(m.head_norm, cur);
    }
}

/// Single-sample forward. Accumulate mode updates the running sigma with
/// this sample and uses the updated value in the same pass.
inline std::pair<VectorXd, ForwardTrace> forward(CircuitModel& m, const VectorXd& x,
                                                 NormMode mode) {
    if (mode == NormMode::Accumulate) {
        VectorXd y = accumulate_norm_sample(m, x);
        ForwardTrace tr = forward_batch(m, x.transpose(), NormMode::Frozen);
        return {std::move(y), std::move(tr)};
    }
    ForwardTrace tr = forward_batch(m, x.transpose(), mode);
    VectorXd y = tr.output.row(0);
    return {std::move(y), std::move(tr)};
}

inline std::pair<VectorXd, ForwardTrace> forward(const CircuitModel& m, const VectorXd& x,
                                                 NormMode mode) {
    if (mode == NormMode::Accumulate)
        throw ArgumentError("Accumulate mode requires a mutable model");
    ForwardTrace tr = forward_batch(m, x.transpose(), mode);
    VectorXd y = tr.output.row(0);
    return {std::move(y), std::move(tr)};
}

// ---------------------------------------------------------------------------
// Backward

struct BackwardResult {
    ParamGrads grads;
    MatrixXd input_grad;  // B x input_dim
};

/// Exact reverse-mode gradients of sum_b output_grad_b . output_b with
/// respect to every unmasked weight, plus the gradient w.r.t. the inputs.
/// Sigma is a constant divisor (stop-gradient); masked entries report zero.
inline BackwardResult backward_batch(const CircuitModel& m, const ForwardTrace& tr,
                                     const MatrixXd& output_grad) {
    if (output_grad.rows() != tr.output.rows() || output_grad.cols() != tr.output.cols())
        throw ArgumentError("output_grad shape does not match trace");
    if (tr.layers.size() != m.layers.size())
        throw ArgumentError("trace does not match model");

    BackwardResult res;
    res.grads = ParamBlocks::zeros_like(m);
    const long B = tr.batch();

    // Head: out = [util, 1] * Wh^T
    MatrixXd uaug = detail::augment_ones(tr.head_util);
    res.grads.head.noalias() = output_grad.transpose() * uaug;
    res.grads.head = res.grads.head.cwiseProduct(m.head_mask);

    MatrixXd dutil_aug = output_grad * m.head_effective();  // B x (head_in+1)
    MatrixXd du = dutil_aug.leftCols(tr.head_util.cols());
    du = du.array().rowwise() / tr.head_div.transpose().array();

    MatrixXd dskip;
    const int last_out = m.layers.empty() ? m.input_dim : layer_out_dim(m.layers.back().spec);
    MatrixXd dcur;  // gradient w.r.t. the last interaction output
    if (m.head_skip) {
        dcur = du.leftCols(last_out);
        dskip = du.rightCols(m.input_dim);
    } else {
        dcur = du;
    }

    for (long l = static_cast<long>(m.layers.size()) - 1; l >= 0; --l) {
        const auto& layer = m.layers[static_cast<size_t>(l)];
        const auto& t = tr.layers[static_cast<size_t>(l)];
        const auto groups = layer_groups(layer.spec);

        MatrixXd dhtil = MatrixXd::Zero(B, t.htil.cols());
        for (size_t k = 0; k < groups.size(); ++k) {
            const auto& g = groups[k];
            const auto dout_k = dcur.col(static_cast<long>(k));
            if (g.primitive == Primitive::Sin) {
                dhtil.col(g.start) =
                    dout_k.array() * t.htil.col(g.start).array().cos();
                continue;
            }
            // Leave-one-out products via prefix/suffix scans, robust to zeros.
            MatrixXd prefix = MatrixXd::Ones(B, g.size);
            for (int j = 1; j < g.size; ++j)
                prefix.col(j) = prefix.col(j - 1).array() * t.htil.col(g.start + j - 1).array();
            VectorXd suffix = VectorXd::Ones(B);
            for (int j = g.size - 1; j >= 0; --j) {
                dhtil.col(g.start + j) =
                    dout_k.array() * prefix.col(j).array() * suffix.array();
                suffix.array() *= t.htil.col(g.start + j).array();
            }
        }

        MatrixXd dh = dhtil.array().rowwise() / t.div.transpose().array();
        res.grads.layers[static_cast<size_t>(l)].noalias() = dh.transpose() * t.xaug;
        res.grads.layers[static_cast<size_t>(l)] =
            res.grads.layers[static_cast<size_t>(l)].cwiseProduct(layer.mask);

        MatrixXd dxaug = dh * layer.effective();  // B x (in+1)
        dcur = dxaug.leftCols(layer.spec.in_dim);
    }

    res.input_grad = dcur;
    if (m.head_skip) res.input_grad += dskip;
    return res;
}

/// Per-sample wrapper matching the trace produced by forward().
inline BackwardResult backward(const CircuitModel& m, const ForwardTrace& tr,
                               const VectorXd& output_grad) {
    return backward_batch(m, tr, output_grad.transpose());
}

// ---------------------------------------------------------------------------
// Representability: quadratic forms as rank-r product circuits

/// Builds a one-interaction-layer circuit computing the rank-r eigenvalue
/// truncation of x^T Q x (exact when rank(Q) <= r).
inline CircuitModel fit_low_rank_quadratic(const MatrixXd& Q, int r) {
    const int d = static_cast<int>(Q.rows());
    if (Q.cols() != d) throw ArgumentError("Q must be square");
    if (!Q.isApprox(Q.transpose(), 1e-10)) throw ArgumentError("Q must be symmetric");
    if (r < 1 || r > d) throw ArgumentError("rank must satisfy 1 <= r <= d");

    Eigen::SelfAdjointEigenSolver<MatrixXd> eig(Q);
    if (eig.info() != Eigen::Success) throw NumericError("eigendecomposition failed");
    std::vector<int> order(static_cast<size_t>(d));
    for (int i = 0; i < d; ++i) order[static_cast<size_t>(i)] = i;
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        return std::abs(eig.eigenvalues()(a)) > std::abs(eig.eigenvalues()(b));
    });

    LayerSpec spec;
    spec.in_dim = d;
    spec.linear_out_dim = 2 * r;
    spec.group_size = 2;
    CircuitModel m = init_model({spec}, 1, /*seed=*/0, /*head_skip=*/false);
    m.norm_enabled = false;
    m.layers[0].weights.setZero();
    for (int k = 0; k < r; ++k) {
        const int idx = order[static_cast<size_t>(k)];
        const double lambda = eig.eigenvalues()(idx);
        const VectorXd v = eig.eigenvectors().col(idx);
        m.layers[0].weights.block(2 * k, 0, 1, d) = v.transpose();
        m.layers[0].weights.block(2 * k + 1, 0, 1, d) = (lambda * v).transpose();
    }
    m.head_weights.setZero();
    m.head_weights.block(0, 0, 1, r).setOnes();
    return m;
}

}  // namespace acsindy
