// model.hpp - the CDRNN regression function: windowed input assembly,
// optional input-processing net, neural IRF blocks, temporal convolution
// with the rate pseudo-predictor, mixed effects, and the penalized
// negative-log-likelihood objective with exact reverse-mode gradients.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ctirf/common.hpp"
#include "ctirf/data.hpp"
#include "ctirf/nn.hpp"
#include "ctirf/spec.hpp"

namespace ctirf {

constexpr double kSigmaEps = 1e-5;       // floor added to bounded parameters
constexpr double kHalfLog2Pi = 0.918938533204672742;

// ---------------------------------------------------------------------------
// Standardization record and level registry
// ---------------------------------------------------------------------------

// All numeric network inputs and the response are rescaled by training-set
// SDs (no centering); the record inverts the transform exactly at reporting
// time. Timestamps and offsets keep raw units in AssembledData and are
// scaled where they enter the networks, so queries and exports stay in
// seconds.
struct TrainingStats {
    std::vector<double> pred_sd;    // per predictor, from the event stream
    std::vector<double> pred_mean;  // raw units (reference configurations)
    std::vector<double> pred_min;   // observed ranges, for query warnings
    std::vector<double> pred_max;
    double y_sd = 1.0;              // training-partition response SD
    double y_mean = 0.0;            // raw units (diagnostics only)
    double mean_time = 0.0;         // mean event timestamp
    double time_min = 0.0;
    double time_max = 0.0;
    double time_sd = 1.0;           // timestamp scale for network inputs
    double offset_sd = 1.0;         // tau - t_n scale, from training windows
    std::size_t train_count = 0;    // M, training responses
};

inline TrainingStats compute_stats(const EventStream& events,
                                   const ResponseTable& train_responses,
                                   const ModelSpec& spec) {
    TrainingStats stats;
    const std::size_t K = spec.n_predictors();
    stats.pred_sd.assign(K, 1.0);
    stats.pred_mean.assign(K, 0.0);
    stats.pred_min.assign(K, std::numeric_limits<double>::infinity());
    stats.pred_max.assign(K, -std::numeric_limits<double>::infinity());
    stats.time_min = std::numeric_limits<double>::infinity();
    stats.time_max = -std::numeric_limits<double>::infinity();

    // Map model predictors onto event columns by name.
    std::vector<int> col(K, -1);
    for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t c = 0; c < events.predictor_names.size(); ++c)
            if (events.predictor_names[c] == spec.predictors[k]) {
                col[k] = static_cast<int>(c);
                break;
            }
        if (col[k] < 0)
            throw DataError("predictor '" + spec.predictors[k] +
                            "' not found in the events table");
    }

    std::vector<double> sums(K, 0.0), sq(K, 0.0);
    double t_sum = 0.0, t_sq = 0.0;
    std::size_t n = 0;
    for (const auto& series : events.series)
        for (std::size_t i = 0; i < series.times.size(); ++i) {
            for (std::size_t k = 0; k < K; ++k) {
                const double v = series.x[i][static_cast<std::size_t>(col[k])];
                sums[k] += v;
                sq[k] += v * v;
                stats.pred_min[k] = std::min(stats.pred_min[k], v);
                stats.pred_max[k] = std::max(stats.pred_max[k], v);
            }
            stats.time_min = std::min(stats.time_min, series.times[i]);
            stats.time_max = std::max(stats.time_max, series.times[i]);
            t_sum += series.times[i];
            t_sq += series.times[i] * series.times[i];
            ++n;
        }
    if (n == 0) throw DataError("event stream is empty");
    for (std::size_t k = 0; k < K; ++k) {
        stats.pred_mean[k] = sums[k] / static_cast<double>(n);
        if (n > 1) {
            const double var =
                (sq[k] - sums[k] * sums[k] / static_cast<double>(n)) /
                static_cast<double>(n - 1);
            stats.pred_sd[k] = var > 0.0 ? std::sqrt(var) : 1.0;
        }
    }
    stats.mean_time = t_sum / static_cast<double>(n);
    if (n > 1) {
        const double var = (t_sq - t_sum * t_sum / static_cast<double>(n)) /
                           static_cast<double>(n - 1);
        stats.time_sd = var > 0.0 ? std::sqrt(var) : 1.0;
    }

    // Offset scale from the same windows the trainer will assemble; raw
    // timestamps can sit anywhere on the clock, so both time inputs need
    // their own scales to keep the networks near their init regime.
    double d_sum = 0.0, d_sq = 0.0;
    std::size_t d_n = 0;
    for (const auto& row : train_responses.rows) {
        const auto* series = events.find_series(row.series);
        if (!series) continue;
        const auto& times = series->times;
        auto it = std::upper_bound(times.begin(), times.end(), row.time);
        std::size_t avail = static_cast<std::size_t>(it - times.begin());
        std::size_t taken = 0;
        while (avail > 0 && taken < spec.history_length) {
            const double delay = row.time - times[avail - 1];
            if (delay > spec.max_lookback) break;
            d_sum += delay;
            d_sq += delay * delay;
            ++d_n;
            ++taken;
            --avail;
        }
    }
    if (d_n > 1) {
        const double var = (d_sq - d_sum * d_sum / static_cast<double>(d_n)) /
                           static_cast<double>(d_n - 1);
        stats.offset_sd = var > 0.0 ? std::sqrt(var) : 1.0;
    }

    std::vector<double> ys;
    ys.reserve(train_responses.rows.size());
    for (const auto& row : train_responses.rows) ys.push_back(row.y);
    stats.train_count = ys.size();
    stats.y_mean = mean_of(ys);
    const double sd = sd_of(ys);
    stats.y_sd = sd > 0.0 ? sd : 1.0;
    return stats;
}

// Random-factor levels discovered from data; offsets are indexed by level.
struct LevelRegistry {
    std::vector<std::vector<std::string>> levels;  // aligned with spec factors

    std::size_t index_of(std::size_t factor, const std::string& level) const {
        const auto& ls = levels[factor];
        for (std::size_t i = 0; i < ls.size(); ++i)
            if (ls[i] == level) return i;
        throw DataError("unknown level '" + level + "' for random factor " +
                        std::to_string(factor));
    }
};

inline LevelRegistry discover_levels(const ResponseTable& responses,
                                     const ModelSpec& spec) {
    LevelRegistry reg;
    reg.levels.resize(spec.random_factors.size());
    std::vector<int> col(spec.random_factors.size(), -1);
    for (std::size_t f = 0; f < spec.random_factors.size(); ++f) {
        for (std::size_t c = 0; c < responses.factor_names.size(); ++c)
            if (responses.factor_names[c] == spec.random_factors[f].name) {
                col[f] = static_cast<int>(c);
                break;
            }
        if (col[f] < 0)
            throw DataError("random factor '" + spec.random_factors[f].name +
                            "' not found in the responses table");
    }
    for (const auto& row : responses.rows)
        for (std::size_t f = 0; f < col.size(); ++f) {
            const auto& level = row.levels[static_cast<std::size_t>(col[f])];
            auto& ls = reg.levels[f];
            if (std::find(ls.begin(), ls.end(), level) == ls.end())
                ls.push_back(level);
        }
    return reg;
}

// ---------------------------------------------------------------------------
// Assembled windows
// ---------------------------------------------------------------------------

// Flattened response windows: row (m, n) lives at m * t_hist + n, newest
// event last; shorter histories are mask-padded at the front. Predictor
// values are already standardized.
struct AssembledData {
    std::size_t t_hist = 0;
    std::size_t n_pred = 0;
    std::size_t n_responses = 0;
    std::vector<double> x;             // [m][n][k]
    std::vector<double> t;             // [m][n] raw event timestamps
    std::vector<double> d;             // [m][n] delays tau - t_n
    std::vector<std::uint8_t> valid;   // [m][n]
    std::vector<double> y_std;
    std::vector<double> y_raw;
    std::vector<double> tau;
    std::vector<std::vector<std::size_t>> z;  // [m] level index per factor
    TrainingStats stats;
    LevelRegistry registry;

    std::size_t row(std::size_t m, std::size_t n) const { return m * t_hist + n; }
};

inline AssembledData assemble_inputs(const EventStream& events,
                                     const ResponseTable& responses,
                                     const ModelSpec& spec,
                                     const TrainingStats& stats,
                                     const LevelRegistry& registry) {
    const std::size_t T = spec.history_length;
    const std::size_t K = spec.n_predictors();
    AssembledData data;
    data.t_hist = T;
    data.n_pred = K;
    data.n_responses = responses.rows.size();
    data.stats = stats;
    data.registry = registry;
    const std::size_t M = data.n_responses;
    data.x.assign(M * T * K, 0.0);
    data.t.assign(M * T, 0.0);
    data.d.assign(M * T, 0.0);
    data.valid.assign(M * T, 0);
    data.y_std.resize(M);
    data.y_raw.resize(M);
    data.tau.resize(M);
    data.z.resize(M);

    std::vector<int> pred_col(K, -1);
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t c = 0; c < events.predictor_names.size(); ++c)
            if (events.predictor_names[c] == spec.predictors[k]) {
                pred_col[k] = static_cast<int>(c);
                break;
            }
    for (std::size_t k = 0; k < K; ++k)
        if (pred_col[k] < 0)
            throw DataError("predictor '" + spec.predictors[k] +
                            "' not found in the events table");

    std::vector<int> factor_col(spec.random_factors.size(), -1);
    for (std::size_t f = 0; f < spec.random_factors.size(); ++f)
        for (std::size_t c = 0; c < responses.factor_names.size(); ++c)
            if (responses.factor_names[c] == spec.random_factors[f].name) {
                factor_col[f] = static_cast<int>(c);
                break;
            }
    for (std::size_t f = 0; f < factor_col.size(); ++f)
        if (factor_col[f] < 0)
            throw DataError("random factor '" + spec.random_factors[f].name +
                            "' not found in the responses table");

    for (std::size_t m = 0; m < M; ++m) {
        const auto& resp = responses.rows[m];
        data.y_raw[m] = resp.y;
        data.y_std[m] = resp.y / stats.y_sd;
        data.tau[m] = resp.time;
        data.z[m].resize(spec.random_factors.size());
        for (std::size_t f = 0; f < factor_col.size(); ++f)
            data.z[m][f] = registry.index_of(
                f, resp.levels[static_cast<std::size_t>(factor_col[f])]);

        const auto* series = events.find_series(resp.series);
        if (!series) continue;  // zero preceding events: all-masked window

        // Last event with t_n <= tau, then walk back up to T rows.
        const auto& times = series->times;
        auto it = std::upper_bound(times.begin(), times.end(), resp.time);
        std::size_t avail = static_cast<std::size_t>(it - times.begin());
        std::vector<std::size_t> chosen;
        while (avail > 0 && chosen.size() < T) {
            const std::size_t n = avail - 1;
            const double delay = resp.time - times[n];
            if (delay > spec.max_lookback) break;  // older rows only get further
            chosen.push_back(n);
            --avail;
        }
        // chosen is newest-first; place newest last.
        const std::size_t pad = T - chosen.size();
        for (std::size_t i = 0; i < chosen.size(); ++i) {
            const std::size_t n = chosen[chosen.size() - 1 - i];
            const std::size_t r = data.row(m, pad + i);
            data.valid[r] = 1;
            data.t[r] = times[n];
            data.d[r] = resp.time - times[n];
            for (std::size_t k = 0; k < K; ++k)
                data.x[r * K + k] =
                    series->x[n][static_cast<std::size_t>(pred_col[k])] /
                    stats.pred_sd[k];
        }
    }
    return data;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

// All trainable quantities. The fixed part holds the population networks,
// convolution coefficients b (feature 0 = rate), and distribution bias s0
// (mu channel, then the unbounded sigma channel). Random-effect offsets are
// stored raw and centered at materialization (rows-sum-zero).
struct ParameterStore {
    Ffn f_in;                 // empty when the input stage is identity
    std::vector<Ffn> blocks;  // one net per IRF block
    std::vector<double> b;    // n_features
    std::vector<double> s0;   // 2

    // Variational posteriors (log scales) for b and s0; empty in MLE mode.
    // In variational mode b/s0 above act as the posterior means.
    std::vector<double> b_log_scale;
    std::vector<double> s0_log_scale;

    struct FactorOffsets {
        // hidden_bias[level][block] is flat over the block's hidden units.
        std::vector<std::vector<std::vector<double>>> hidden_bias;
        std::vector<std::vector<double>> b;    // [level][n_features]
        std::vector<std::vector<double>> s0;   // [level][2]
    };
    std::vector<FactorOffsets> factors;
    LevelRegistry registry;
};

inline std::size_t block_hidden_units(const Ffn& net) {
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < net.size(); ++l) n += net[l].out;
    return n;
}

inline ParameterStore init_parameter_store(const ModelSpec& spec,
                                           const LevelRegistry& registry,
                                           Rng& rng) {
    ParameterStore ps;
    ps.registry = registry;
    const std::size_t K = spec.n_predictors();
    if (!spec.f_in_identity()) {
        ps.f_in = make_ffn(1 + K, spec.f_in_hidden, K);
        glorot_init(ps.f_in, rng);
    }
    for (const auto& blk : spec.blocks) {
        std::size_t in_dim = blk.conditioning.size();
        if (blk.include_offset_d) ++in_dim;
        if (blk.include_timestamp_t) ++in_dim;
        if (in_dim == 0) in_dim = 1;  // constant-input block (fed 1.0)
        const std::size_t out_dim = blk.targets.size() * blk.convolved.size();
        Ffn net = make_ffn(in_dim, spec.hp.hidden, out_dim);
        glorot_init(net, rng);
        ps.blocks.push_back(std::move(net));
    }
    ps.b.assign(spec.n_features(), 1.0);
    // Sigma channel starts at exactly 1 in standardized units.
    ps.s0 = {0.0, softplus_inverse(1.0 - kSigmaEps)};
    if (spec.hp.inference == InferenceMode::variational) {
        ps.b_log_scale.assign(ps.b.size(), std::log(0.1));
        ps.s0_log_scale.assign(ps.s0.size(), std::log(0.1));
    }
    ps.factors.resize(spec.random_factors.size());
    for (std::size_t f = 0; f < spec.random_factors.size(); ++f) {
        const auto& rf = spec.random_factors[f];
        const std::size_t Z = registry.levels[f].size();
        auto& fo = ps.factors[f];
        if (rf.offsets_hidden_bias) {
            fo.hidden_bias.resize(Z);
            for (auto& per_block : fo.hidden_bias) {
                per_block.resize(ps.blocks.size());
                for (std::size_t bk = 0; bk < ps.blocks.size(); ++bk)
                    per_block[bk].assign(block_hidden_units(ps.blocks[bk]), 0.0);
            }
        }
        if (rf.offsets_b) fo.b.assign(Z, std::vector<double>(ps.b.size(), 0.0));
        if (rf.offsets_s0) fo.s0.assign(Z, std::vector<double>(2, 0.0));
    }
    return ps;
}

// Stable enumeration of every trainable scalar; the optimizer, the iterate
// average, and the checkpoint all rely on this exact order.
template <typename Store, typename Fn>
void visit_params(Store& ps, Fn&& fn) {
    for (auto& layer : ps.f_in) {
        for (auto& v : layer.w) fn(v);
        for (auto& v : layer.b) fn(v);
    }
    for (auto& net : ps.blocks)
        for (auto& layer : net) {
            for (auto& v : layer.w) fn(v);
            for (auto& v : layer.b) fn(v);
        }
    for (auto& v : ps.b) fn(v);
    for (auto& v : ps.s0) fn(v);
    for (auto& v : ps.b_log_scale) fn(v);
    for (auto& v : ps.s0_log_scale) fn(v);
    for (auto& factor : ps.factors) {
        for (auto& level : factor.hidden_bias)
            for (auto& block : level)
                for (auto& v : block) fn(v);
        for (auto& level : factor.b)
            for (auto& v : level) fn(v);
        for (auto& level : factor.s0)
            for (auto& v : level) fn(v);
    }
}

inline std::size_t param_count(const ParameterStore& ps) {
    std::size_t n = 0;
    visit_params(ps, [&n](const double&) { ++n; });
    return n;
}

inline std::vector<double*> param_ptrs(ParameterStore& ps) {
    std::vector<double*> ptrs;
    ptrs.reserve(param_count(ps));
    visit_params(ps, [&ptrs](double& v) { ptrs.push_back(&v); });
    return ptrs;
}

inline ParameterStore zeros_like(const ParameterStore& ps) {
    ParameterStore z = ps;
    visit_params(z, [](double& v) { v = 0.0; });
    return z;
}

// ---------------------------------------------------------------------------
// Materialization (mixed effects + variational draws)
// ---------------------------------------------------------------------------

struct VariationalDraw {
    std::vector<double> xi_b;
    std::vector<double> xi_s0;
};

inline VariationalDraw sample_variational(const ParameterStore& ps, Rng& rng) {
    VariationalDraw draw;
    draw.xi_b.resize(ps.b.size());
    draw.xi_s0.resize(ps.s0.size());
    for (auto& v : draw.xi_b) v = rng.normal();
    for (auto& v : draw.xi_s0) v = rng.normal();
    return draw;
}

// Effective parameter snapshot for one combination of random-factor levels.
struct MaterializedParams {
    const Ffn* f_in = nullptr;  // offsets never touch the input stage
    std::vector<Ffn> blocks;
    std::vector<double> b;
    std::vector<double> s0;
};

// v = v0 + centered offsets (+ reparameterized draw on b/s0 when given).
// Centering subtracts the per-factor mean column, so materialized offsets
// sum to zero across levels no matter what the raw entries hold.
inline MaterializedParams materialize_params(const ModelSpec& spec,
                                             const ParameterStore& ps,
                                             const std::vector<std::size_t>& z,
                                             const VariationalDraw* draw) {
    if (z.size() != spec.random_factors.size())
        throw DataError("level indicators do not match declared random factors");
    MaterializedParams mp;
    mp.f_in = &ps.f_in;
    mp.blocks = ps.blocks;
    mp.b = ps.b;
    mp.s0 = ps.s0;
    if (draw) {
        for (std::size_t i = 0; i < mp.b.size(); ++i)
            mp.b[i] += std::exp(ps.b_log_scale[i]) * draw->xi_b[i];
        for (std::size_t i = 0; i < mp.s0.size(); ++i)
            mp.s0[i] += std::exp(ps.s0_log_scale[i]) * draw->xi_s0[i];
    }
    for (std::size_t f = 0; f < ps.factors.size(); ++f) {
        const auto& fo = ps.factors[f];
        const std::size_t c = z[f];
        const std::size_t Z = ps.registry.levels[f].size();
        if (c >= Z) throw DataError("level index out of range");
        const double invZ = 1.0 / static_cast<double>(Z);
        if (!fo.hidden_bias.empty()) {
            for (std::size_t bk = 0; bk < mp.blocks.size(); ++bk) {
                std::size_t u = 0;
                auto& net = mp.blocks[bk];
                for (std::size_t l = 0; l + 1 < net.size(); ++l)
                    for (std::size_t o = 0; o < net[l].out; ++o, ++u) {
                        double mean = 0.0;
                        for (std::size_t cc = 0; cc < Z; ++cc)
                            mean += fo.hidden_bias[cc][bk][u];
                        net[l].b[o] += fo.hidden_bias[c][bk][u] - mean * invZ;
                    }
            }
        }
        if (!fo.b.empty())
            for (std::size_t i = 0; i < mp.b.size(); ++i) {
                double mean = 0.0;
                for (std::size_t cc = 0; cc < Z; ++cc) mean += fo.b[cc][i];
                mp.b[i] += fo.b[c][i] - mean * invZ;
            }
        if (!fo.s0.empty())
            for (std::size_t i = 0; i < 2; ++i) {
                double mean = 0.0;
                for (std::size_t cc = 0; cc < Z; ++cc) mean += fo.s0[cc][i];
                mp.s0[i] += fo.s0[c][i] - mean * invZ;
            }
    }
    return mp;
}

// ---------------------------------------------------------------------------
// Execution plan (index precomputation)
// ---------------------------------------------------------------------------

struct BlockPlan {
    std::vector<int> cond;       // predictor indices feeding the net
    std::vector<int> conv;       // feature indices (0 = rate) it convolves
    std::vector<int> targets;    // 0 = mu, 1 = sigma
    bool use_d = true;
    bool use_t = true;
    bool dirac = false;
    std::size_t in_dim = 0;
    std::size_t out_dim = 0;
};

struct ModelPlan {
    std::vector<BlockPlan> blocks;
    double rescale = 1.0;  // 1 / (T_hist * n_features), rate counted
    std::size_t n_pred = 0;
    bool f_in_identity = true;
};

inline ModelPlan make_plan(const ModelSpec& spec) {
    ModelPlan plan;
    plan.n_pred = spec.n_predictors();
    plan.f_in_identity = spec.f_in_identity();
    plan.rescale = 1.0 / (static_cast<double>(spec.history_length) *
                          static_cast<double>(spec.n_features()));
    for (const auto& blk : spec.blocks) {
        BlockPlan bp;
        bp.use_d = blk.include_offset_d;
        bp.use_t = blk.include_timestamp_t;
        bp.dirac = blk.dirac_delta;
        for (const auto& name : blk.conditioning)
            bp.cond.push_back(spec.predictor_index(name));
        for (const auto& name : blk.convolved)
            bp.conv.push_back(spec.feature_index(name));
        for (auto t : blk.targets) bp.targets.push_back(static_cast<int>(t));
        bp.in_dim = bp.cond.size() + (bp.use_d ? 1 : 0) + (bp.use_t ? 1 : 0);
        if (bp.in_dim == 0) bp.in_dim = 1;
        bp.out_dim = bp.targets.size() * bp.conv.size();
        plan.blocks.push_back(std::move(bp));
    }
    return plan;
}

// One dropout mask set: a mask per network, shared across a minibatch.
struct MaskSet {
    DropoutMask f_in;
    std::vector<DropoutMask> blocks;
};

inline MaskSet sample_masks(const ParameterStore& ps, double rate, Rng& rng) {
    MaskSet ms;
    if (!ps.f_in.empty())
        ms.f_in = sample_dropout_mask(rate, hidden_widths(ps.f_in), rng);
    ms.blocks.reserve(ps.blocks.size());
    for (const auto& net : ps.blocks)
        ms.blocks.push_back(sample_dropout_mask(rate, hidden_widths(net), rng));
    return ms;
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

struct PredictiveParams {
    double mu = 0.0;     // response units (de-standardized)
    double sigma = 1.0;  // response units, >= eps * y_sd
};

namespace detail {

// Scratch space reused across responses within a batch.
struct ForwardScratch {
    std::vector<double> xprime;                    // [n][K]
    std::vector<double> dxprime;                   // [n][K]
    std::vector<FfnTrace> fin_traces;              // [n]
    std::vector<std::vector<FfnTrace>> blk_traces; // [block][n]
    std::vector<std::uint8_t> row_used;            // [n]
    std::vector<double> in_buf, up_buf, fin_in, fin_out;
};

// Computes raw (standardized-space) channels s = (mu_raw, sigma_raw_channel)
// for response m, filling traces for the backward pass when keep_traces.
inline void forward_channels(const ModelPlan& plan, const MaterializedParams& mp,
                             const AssembledData& data, std::size_t m,
                             const MaskSet* masks, bool keep_traces,
                             double s_out[2], ForwardScratch& ws) {
    const std::size_t T = data.t_hist;
    const std::size_t K = data.n_pred;
    s_out[0] = mp.s0[0];
    s_out[1] = mp.s0[1];

    if (keep_traces) {
        ws.xprime.assign(T * K, 0.0);
        ws.row_used.assign(T, 0);
        if (!plan.f_in_identity) ws.fin_traces.resize(T);
        ws.blk_traces.resize(plan.blocks.size());
        for (auto& v : ws.blk_traces) v.resize(T);
    }

    // Newest valid row (dirac blocks fire only there).
    int newest = -1;
    for (std::size_t n = T; n-- > 0;)
        if (data.valid[data.row(m, n)]) {
            newest = static_cast<int>(n);
            break;
        }

    for (std::size_t n = 0; n < T; ++n) {
        const std::size_t r = data.row(m, n);
        if (!data.valid[r]) continue;
        if (keep_traces) ws.row_used[n] = 1;

        // Input stage: x' = f_in([t; x]), identity by default.
        const double* xp;
        if (plan.f_in_identity) {
            xp = data.x.data() + r * K;
        } else {
            ws.fin_in.resize(1 + K);
            ws.fin_in[0] = data.t[r] / data.stats.time_sd;
            for (std::size_t k = 0; k < K; ++k) ws.fin_in[1 + k] = data.x[r * K + k];
            FfnTrace trace = ffn_forward(*mp.f_in, ws.fin_in,
                                         masks ? &masks->f_in : nullptr);
            if (keep_traces) {
                ws.fin_traces[n] = std::move(trace);
                xp = ws.fin_traces[n].output().data();
            } else {
                ws.fin_out = trace.output();
                xp = ws.fin_out.data();
            }
        }
        if (keep_traces)
            for (std::size_t k = 0; k < K; ++k) ws.xprime[n * K + k] = xp[k];

        for (std::size_t bi = 0; bi < plan.blocks.size(); ++bi) {
            const auto& bp = plan.blocks[bi];
            if (bp.dirac && static_cast<int>(n) != newest) continue;

            ws.in_buf.clear();
            if (bp.use_d) ws.in_buf.push_back(data.d[r] / data.stats.offset_sd);
            if (bp.use_t) ws.in_buf.push_back(data.t[r] / data.stats.time_sd);
            for (int k : bp.cond) ws.in_buf.push_back(xp[k]);
            if (ws.in_buf.empty()) ws.in_buf.push_back(1.0);

            FfnTrace trace = ffn_forward(mp.blocks[bi], ws.in_buf,
                                         masks ? &masks->blocks[bi] : nullptr);
            const auto& g = trace.output();
            for (std::size_t ti = 0; ti < bp.targets.size(); ++ti)
                for (std::size_t fj = 0; fj < bp.conv.size(); ++fj) {
                    const int feature = bp.conv[fj];
                    const double feat_val = feature == 0 ? 1.0 : xp[feature - 1];
                    s_out[bp.targets[ti]] += plan.rescale *
                                             g[ti * bp.conv.size() + fj] *
                                             mp.b[feature] * feat_val;
                }
            if (keep_traces) ws.blk_traces[bi][n] = std::move(trace);
        }
    }
}

}  // namespace detail

// Per-response predictive parameters in raw response units (eval mode by
// default; pass masks for a frozen dropout draw).
inline std::vector<PredictiveParams> forward(const ModelSpec& spec,
                                             const ModelPlan& plan,
                                             const ParameterStore& ps,
                                             const AssembledData& data,
                                             const MaskSet* masks = nullptr,
                                             const VariationalDraw* draw = nullptr) {
    std::vector<PredictiveParams> out(data.n_responses);
    detail::ForwardScratch ws;
    // Group responses sharing a level combination: one materialization each.
    std::map<std::vector<std::size_t>, std::vector<std::size_t>> groups;
    for (std::size_t m = 0; m < data.n_responses; ++m)
        groups[data.z[m]].push_back(m);
    for (const auto& [z, members] : groups) {
        const MaterializedParams mp = materialize_params(spec, ps, z, draw);
        for (std::size_t m : members) {
            double s[2];
            detail::forward_channels(plan, mp, data, m, masks, false, s, ws);
            if (!std::isfinite(s[0]) || !std::isfinite(s[1]))
                throw NumericError("non-finite model output at response " +
                                   std::to_string(m));
            out[m].mu = s[0] * data.stats.y_sd;
            out[m].sigma = (softplus(s[1]) + kSigmaEps) * data.stats.y_sd;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Penalized NLL with exact gradients
// ---------------------------------------------------------------------------

struct LossContext {
    const MaskSet* masks = nullptr;          // frozen dropout draw (train)
    const VariationalDraw* draw = nullptr;   // frozen reparameterized draw
    std::size_t train_size = 0;              // M, scales the KL term
};

// Mean NLL over the index set (standardized space) + weight L2 + random-
// effects L2 + KL/M in variational mode. When `grads` is non-null it
// accumulates exact gradients for every parameter, treating masks and
// variational draws as constants.
inline double nll_loss(const ModelSpec& spec, const ModelPlan& plan,
                       const ParameterStore& ps, const AssembledData& data,
                       const std::vector<std::size_t>& indices,
                       const LossContext& ctx, ParameterStore* grads) {
    if (indices.empty()) throw ConfigError("nll_loss: empty batch");
    const double inv_batch = 1.0 / static_cast<double>(indices.size());
    const std::size_t K = data.n_pred;
    const std::size_t T = data.t_hist;
    double loss = 0.0;

    std::map<std::vector<std::size_t>, std::vector<std::size_t>> groups;
    for (std::size_t m : indices) groups[data.z[m]].push_back(m);

    detail::ForwardScratch ws;
    for (const auto& [z, members] : groups) {
        const MaterializedParams mp = materialize_params(spec, ps, z, ctx.draw);

        // Group-level gradient accumulators in effective-parameter space.
        std::vector<GradientBuffer> blk_grads;
        GradientBuffer fin_grads;
        std::vector<double> db, ds0;
        if (grads) {
            blk_grads.reserve(mp.blocks.size());
            for (const auto& net : mp.blocks) blk_grads.push_back(zeros_like(net));
            if (!ps.f_in.empty()) fin_grads = zeros_like(ps.f_in);
            db.assign(mp.b.size(), 0.0);
            ds0.assign(2, 0.0);
        }

        for (std::size_t m : members) {
            double s[2];
            detail::forward_channels(plan, mp, data, m, ctx.masks, grads != nullptr,
                                     s, ws);
            if (!std::isfinite(s[0]) || !std::isfinite(s[1]))
                throw NumericError("non-finite model output at response " +
                                   std::to_string(m));
            const double mu = s[0];
            const double sig = softplus(s[1]) + kSigmaEps;
            const double resid = data.y_std[m] - mu;
            loss += (kHalfLog2Pi + std::log(sig) + resid * resid / (2.0 * sig * sig)) *
                    inv_batch;
            if (!grads) continue;

            double ds[2];
            ds[0] = -resid / (sig * sig) * inv_batch;
            ds[1] = (1.0 / sig - resid * resid / (sig * sig * sig)) *
                    softplus_grad(s[1]) * inv_batch;
            ds0[0] += ds[0];
            ds0[1] += ds[1];

            // Backprop through the convolution sum, block nets, then f_in.
            ws.dxprime.assign(T * K, 0.0);
            int newest = -1;
            for (std::size_t n = T; n-- > 0;)
                if (ws.row_used[n]) {
                    newest = static_cast<int>(n);
                    break;
                }
            for (std::size_t n = 0; n < T; ++n) {
                if (!ws.row_used[n]) continue;
                const double* xp = ws.xprime.data() + n * K;
                for (std::size_t bi = 0; bi < plan.blocks.size(); ++bi) {
                    const auto& bp = plan.blocks[bi];
                    if (bp.dirac && static_cast<int>(n) != newest) continue;
                    const auto& trace = ws.blk_traces[bi][n];
                    const auto& g = trace.output();
                    ws.up_buf.assign(bp.out_dim, 0.0);
                    for (std::size_t ti = 0; ti < bp.targets.size(); ++ti)
                        for (std::size_t fj = 0; fj < bp.conv.size(); ++fj) {
                            const int feature = bp.conv[fj];
                            const double feat_val =
                                feature == 0 ? 1.0 : xp[feature - 1];
                            const double dch = ds[bp.targets[ti]] * plan.rescale;
                            const std::size_t o = ti * bp.conv.size() + fj;
                            ws.up_buf[o] = dch * mp.b[feature] * feat_val;
                            db[feature] += dch * g[o] * feat_val;
                            if (feature != 0)
                                ws.dxprime[n * K + static_cast<std::size_t>(feature - 1)] +=
                                    dch * g[o] * mp.b[feature];
                        }
                    const DropoutMask* mask =
                        ctx.masks ? &ctx.masks->blocks[bi] : nullptr;
                    ffn_backward(mp.blocks[bi], trace, ws.up_buf, blk_grads[bi], mask);
                    // Conditioning inputs feed back into x'.
                    std::size_t slot = (bp.use_d ? 1u : 0u) + (bp.use_t ? 1u : 0u);
                    auto& gin = blk_grads[bi].input;
                    for (std::size_t ci = 0; ci < bp.cond.size(); ++ci, ++slot) {
                        ws.dxprime[n * K + static_cast<std::size_t>(bp.cond[ci])] +=
                            gin[slot];
                        gin[slot] = 0.0;  // consumed; keep buffer reusable
                    }
                    if (bp.use_d) gin[0] = 0.0;
                    if (bp.use_t) gin[bp.use_d ? 1 : 0] = 0.0;
                }
                if (!plan.f_in_identity) {
                    std::vector<double> up(ws.dxprime.begin() + static_cast<long>(n * K),
                                           ws.dxprime.begin() + static_cast<long>((n + 1) * K));
                    const DropoutMask* mask = ctx.masks ? &ctx.masks->f_in : nullptr;
                    ffn_backward(ps.f_in, ws.fin_traces[n], up, fin_grads, mask);
                }
            }
        }

        if (!grads) continue;

        // Route effective-parameter gradients to the fixed part, the
        // variational posteriors, and the raw offsets (centering projection:
        // d effective / d raw[c'] = [c' == c] - 1/Z).
        for (std::size_t bi = 0; bi < ps.blocks.size(); ++bi)
            for (std::size_t l = 0; l < ps.blocks[bi].size(); ++l) {
                auto& dst = grads->blocks[bi];
                for (std::size_t i = 0; i < dst[l].w.size(); ++i)
                    dst[l].w[i] += blk_grads[bi].layers[l].w[i];
                for (std::size_t i = 0; i < dst[l].b.size(); ++i)
                    dst[l].b[i] += blk_grads[bi].layers[l].b[i];
            }
        if (!ps.f_in.empty())
            for (std::size_t l = 0; l < ps.f_in.size(); ++l) {
                for (std::size_t i = 0; i < grads->f_in[l].w.size(); ++i)
                    grads->f_in[l].w[i] += fin_grads.layers[l].w[i];
                for (std::size_t i = 0; i < grads->f_in[l].b.size(); ++i)
                    grads->f_in[l].b[i] += fin_grads.layers[l].b[i];
            }
        for (std::size_t i = 0; i < ps.b.size(); ++i) grads->b[i] += db[i];
        for (std::size_t i = 0; i < 2; ++i) grads->s0[i] += ds0[i];
        if (ctx.draw) {
            for (std::size_t i = 0; i < ps.b.size(); ++i)
                grads->b_log_scale[i] +=
                    db[i] * std::exp(ps.b_log_scale[i]) * ctx.draw->xi_b[i];
            for (std::size_t i = 0; i < 2; ++i)
                grads->s0_log_scale[i] +=
                    ds0[i] * std::exp(ps.s0_log_scale[i]) * ctx.draw->xi_s0[i];
        }
        for (std::size_t f = 0; f < ps.factors.size(); ++f) {
            const auto& fo = ps.factors[f];
            auto& go = grads->factors[f];
            const std::size_t c = z[f];
            const std::size_t Z = ps.registry.levels[f].size();
            const double invZ = 1.0 / static_cast<double>(Z);
            if (!fo.hidden_bias.empty())
                for (std::size_t bi = 0; bi < ps.blocks.size(); ++bi) {
                    std::size_t u = 0;
                    for (std::size_t l = 0; l + 1 < ps.blocks[bi].size(); ++l)
                        for (std::size_t o = 0; o < ps.blocks[bi][l].out; ++o, ++u) {
                            const double g = blk_grads[bi].layers[l].b[o];
                            for (std::size_t cc = 0; cc < Z; ++cc)
                                go.hidden_bias[cc][bi][u] -= g * invZ;
                            go.hidden_bias[c][bi][u] += g;
                        }
                }
            if (!fo.b.empty())
                for (std::size_t i = 0; i < ps.b.size(); ++i) {
                    for (std::size_t cc = 0; cc < Z; ++cc)
                        go.b[cc][i] -= db[i] * invZ;
                    go.b[c][i] += db[i];
                }
            if (!fo.s0.empty())
                for (std::size_t i = 0; i < 2; ++i) {
                    for (std::size_t cc = 0; cc < Z; ++cc)
                        go.s0[cc][i] -= ds0[i] * invZ;
                    go.s0[c][i] += ds0[i];
                }
        }
    }

    // Weight L2: strength * mean over all network weight entries.
    if (spec.hp.weight_l2 > 0.0) {
        double sum_sq = 0.0;
        std::size_t count = 0;
        auto fold = [&](const Ffn& net) {
            for (const auto& layer : net) {
                for (double w : layer.w) sum_sq += w * w;
                count += layer.w.size();
            }
        };
        fold(ps.f_in);
        for (const auto& net : ps.blocks) fold(net);
        if (count > 0) {
            loss += spec.hp.weight_l2 * sum_sq / static_cast<double>(count);
            if (grads) {
                const double cgrad = 2.0 * spec.hp.weight_l2 / static_cast<double>(count);
                for (std::size_t l = 0; l < ps.f_in.size(); ++l)
                    for (std::size_t i = 0; i < ps.f_in[l].w.size(); ++i)
                        grads->f_in[l].w[i] += cgrad * ps.f_in[l].w[i];
                for (std::size_t bi = 0; bi < ps.blocks.size(); ++bi)
                    for (std::size_t l = 0; l < ps.blocks[bi].size(); ++l)
                        for (std::size_t i = 0; i < ps.blocks[bi][l].w.size(); ++i)
                            grads->blocks[bi][l].w[i] += cgrad * ps.blocks[bi][l].w[i];
            }
        }
    }

    // Random-effects L2 over the raw offsets.
    if (spec.hp.ranef_l2 > 0.0 && !ps.factors.empty()) {
        double sum_sq = 0.0;
        std::size_t count = 0;
        for (const auto& fo : ps.factors) {
            for (const auto& level : fo.hidden_bias)
                for (const auto& block : level)
                    for (double v : block) {
                        sum_sq += v * v;
                        ++count;
                    }
            for (const auto& level : fo.b)
                for (double v : level) {
                    sum_sq += v * v;
                    ++count;
                }
            for (const auto& level : fo.s0)
                for (double v : level) {
                    sum_sq += v * v;
                    ++count;
                }
        }
        if (count > 0) {
            loss += spec.hp.ranef_l2 * sum_sq / static_cast<double>(count);
            if (grads) {
                const double cgrad = 2.0 * spec.hp.ranef_l2 / static_cast<double>(count);
                for (std::size_t f = 0; f < ps.factors.size(); ++f) {
                    const auto& fo = ps.factors[f];
                    auto& go = grads->factors[f];
                    for (std::size_t lv = 0; lv < fo.hidden_bias.size(); ++lv)
                        for (std::size_t bk = 0; bk < fo.hidden_bias[lv].size(); ++bk)
                            for (std::size_t i = 0; i < fo.hidden_bias[lv][bk].size(); ++i)
                                go.hidden_bias[lv][bk][i] += cgrad * fo.hidden_bias[lv][bk][i];
                    for (std::size_t lv = 0; lv < fo.b.size(); ++lv)
                        for (std::size_t i = 0; i < fo.b[lv].size(); ++i)
                            go.b[lv][i] += cgrad * fo.b[lv][i];
                    for (std::size_t lv = 0; lv < fo.s0.size(); ++lv)
                        for (std::size_t i = 0; i < fo.s0[lv].size(); ++i)
                            go.s0[lv][i] += cgrad * fo.s0[lv][i];
                }
            }
        }
    }

    // Variational mode: KL(q || N(0, 1)) / M for the b and s0 posteriors
    // (standardized space, so the response-SD prior has unit scale).
    if (spec.hp.inference == InferenceMode::variational) {
        if (ctx.train_size == 0)
            throw ConfigError("variational loss needs the training-set size");
        const double invM = 1.0 / static_cast<double>(ctx.train_size);
        auto fold_kl = [&](const std::vector<double>& mean,
                           const std::vector<double>& log_scale,
                           std::vector<double>* gmean, std::vector<double>* gls) {
            for (std::size_t i = 0; i < mean.size(); ++i) {
                const double s2 = std::exp(2.0 * log_scale[i]);
                loss += (-log_scale[i] + (s2 + mean[i] * mean[i]) * 0.5 - 0.5) * invM;
                if (gmean) (*gmean)[i] += mean[i] * invM;
                if (gls) (*gls)[i] += (s2 - 1.0) * invM;
            }
        };
        fold_kl(ps.b, ps.b_log_scale, grads ? &grads->b : nullptr,
                grads ? &grads->b_log_scale : nullptr);
        fold_kl(ps.s0, ps.s0_log_scale, grads ? &grads->s0 : nullptr,
                grads ? &grads->s0_log_scale : nullptr);
    }

    return loss;
}

// Per-item log-likelihood in RAW response units: the standardized-space
// density minus the log response SD (change-of-variables term).
inline std::vector<double> eval_loglik(const ModelSpec& spec, const ModelPlan& plan,
                                       const ParameterStore& ps,
                                       const AssembledData& data) {
    const auto params = forward(spec, plan, ps, data);
    std::vector<double> ll(data.n_responses);
    for (std::size_t m = 0; m < data.n_responses; ++m) {
        const double resid = data.y_raw[m] - params[m].mu;
        ll[m] = -kHalfLog2Pi - std::log(params[m].sigma) -
                resid * resid / (2.0 * params[m].sigma * params[m].sigma);
    }
    return ll;
}

}  // namespace ctirf
