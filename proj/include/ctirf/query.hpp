// query.hpp - perturbation-based effect estimation on fitted models. Every
// query compares the model's prediction for a single perturbed impulse
// against the training-mean reference impulse, on otherwise empty history;
// uncertainty comes from resampling ensemble components, dropout masks, and
// variational draws, one frozen draw per full grid pass.
#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctirf/model.hpp"

namespace ctirf {

enum class QueryStatistic { mu, sigma };

inline std::string statistic_name(QueryStatistic s) {
    return s == QueryStatistic::mu ? "mu" : "sigma";
}

inline QueryStatistic parse_statistic(const std::string& name) {
    if (name == "mu") return QueryStatistic::mu;
    if (name == "sigma") return QueryStatistic::sigma;
    throw ConfigError("unknown statistic '" + name +
                      "': the predictive distribution has mu and sigma");
}

struct ReferenceConfig {
    std::vector<double> predictors;  // raw units, one per model predictor
    double timestamp = 0.0;          // event onset used in queries
    std::vector<double> delay_grid;
    QueryStatistic statistic = QueryStatistic::mu;
};

// Training means define the reference impulse; the delay grid spans
// [0, horizon] with `points` even steps.
inline ReferenceConfig reference_config(const TrainingStats& stats,
                                        double horizon = 5.0,
                                        std::size_t points = 101) {
    if (points < 2) throw ConfigError("delay grid needs at least 2 points");
    if (!(horizon > 0.0)) throw ConfigError("plot horizon must be positive");
    ReferenceConfig ref;
    ref.predictors = stats.pred_mean;
    ref.timestamp = stats.mean_time;
    ref.delay_grid.resize(points);
    for (std::size_t i = 0; i < points; ++i)
        ref.delay_grid[i] =
            horizon * static_cast<double>(i) / static_cast<double>(points - 1);
    return ref;
}

inline void validate_delay_grid(const std::vector<double>& grid) {
    if (grid.empty()) throw ConfigError("empty delay grid");
    if (grid[0] < 0.0) throw ConfigError("delay grid must be nonnegative");
    for (std::size_t i = 1; i < grid.size(); ++i)
        if (grid[i] <= grid[i - 1])
            throw ConfigError("delay grid must be strictly increasing");
}

// A fitted model prepared for queries: random factors are stripped, so all
// effects are population-level (centered offsets average out by design).
struct QueryModel {
    ModelSpec spec;
    TrainingStats stats;
    ParameterStore params;
    ModelPlan plan;
};

inline QueryModel make_query_model(const ModelSpec& spec,
                                   const TrainingStats& stats,
                                   const ParameterStore& params) {
    QueryModel qm;
    qm.spec = spec;
    qm.spec.random_factors.clear();
    qm.stats = stats;
    qm.params = params;
    qm.params.factors.clear();
    qm.params.registry = LevelRegistry{};
    qm.plan = make_plan(qm.spec);
    return qm;
}

// Prediction for one impulse carrying `raw_x`, observed `delay` seconds
// after an event at `event_time`, with no other history.
inline PredictiveParams eval_impulse(const QueryModel& qm,
                                     const std::vector<double>& raw_x,
                                     double event_time, double delay,
                                     const MaskSet* masks = nullptr,
                                     const VariationalDraw* draw = nullptr) {
    if (raw_x.size() != qm.spec.n_predictors())
        throw ConfigError("query impulse has wrong predictor count");
    EventStream events;
    events.predictor_names = qm.spec.predictors;
    events.series.push_back({"q", {event_time}, {raw_x}});
    ResponseTable responses;
    responses.rows.push_back({"q", event_time + delay, 0.0, {}});
    const auto data =
        assemble_inputs(events, responses, qm.spec, qm.stats, {});
    return forward(qm.spec, qm.plan, qm.params, data, masks, draw)[0];
}

inline double pick_statistic(const PredictiveParams& p, QueryStatistic s) {
    return s == QueryStatistic::mu ? p.mu : p.sigma;
}

// statistic(alt) - statistic(ref) at one delay.
inline double effect_query(const QueryModel& qm, const ReferenceConfig& ref,
                           const std::vector<double>& alt_predictors,
                           double delay, const MaskSet* masks = nullptr,
                           const VariationalDraw* draw = nullptr) {
    const auto a =
        eval_impulse(qm, alt_predictors, ref.timestamp, delay, masks, draw);
    const auto r =
        eval_impulse(qm, ref.predictors, ref.timestamp, delay, masks, draw);
    return pick_statistic(a, ref.statistic) - pick_statistic(r, ref.statistic);
}

struct IrfQueryResult {
    std::vector<double> axis;      // delay / value / timestamp grid
    std::vector<double> estimate;  // point value, or median across samples
    std::vector<double> lower;
    std::vector<double> upper;
    std::string axis_name = "delay";
    std::string statistic = "mu";
    std::size_t n_samples = 1;
    bool out_of_range = false;  // grid leaves the training data's support
};

namespace detail {

inline IrfQueryResult point_result(std::vector<double> axis,
                                   std::vector<double> values,
                                   const std::string& axis_name,
                                   QueryStatistic stat) {
    IrfQueryResult res;
    res.axis = std::move(axis);
    res.estimate = std::move(values);
    res.lower = res.estimate;
    res.upper = res.estimate;
    res.axis_name = axis_name;
    res.statistic = statistic_name(stat);
    return res;
}

}  // namespace detail

// Change in the statistic per +step raw units of predictor k (default one
// training SD), as a function of delay.
inline IrfQueryResult irf_curve(
    const QueryModel& qm, std::size_t k, const ReferenceConfig& ref,
    double step = std::numeric_limits<double>::quiet_NaN(),
    const MaskSet* masks = nullptr, const VariationalDraw* draw = nullptr) {
    if (k >= qm.spec.n_predictors())
        throw ConfigError("irf_curve: no such predictor");
    validate_delay_grid(ref.delay_grid);
    if (std::isnan(step)) step = qm.stats.pred_sd[k];
    auto alt = ref.predictors;
    alt[k] += step;
    std::vector<double> values(ref.delay_grid.size());
    for (std::size_t i = 0; i < ref.delay_grid.size(); ++i)
        values[i] = effect_query(qm, ref, alt, ref.delay_grid[i], masks, draw);
    return detail::point_result(ref.delay_grid, std::move(values), "delay",
                                ref.statistic);
}

// Effect of pinning predictor k to each grid value (absolute, raw units),
// across the delay grid. delta[i][j] = value i, delay j.
struct SurfaceResult {
    std::vector<double> values;
    std::vector<double> delays;
    std::vector<std::vector<double>> delta;
    std::string statistic = "mu";
    bool out_of_range = false;
};

inline SurfaceResult irf_surface(const QueryModel& qm, std::size_t k,
                                 const std::vector<double>& value_grid,
                                 const ReferenceConfig& ref) {
    if (k >= qm.spec.n_predictors())
        throw ConfigError("irf_surface: no such predictor");
    validate_delay_grid(ref.delay_grid);
    SurfaceResult res;
    res.values = value_grid;
    res.delays = ref.delay_grid;
    res.statistic = statistic_name(ref.statistic);
    for (double v : value_grid)
        res.out_of_range = res.out_of_range || v < qm.stats.pred_min[k] ||
                           v > qm.stats.pred_max[k];
    auto alt = ref.predictors;
    for (double v : value_grid) {
        alt[k] = v;
        std::vector<double> row(ref.delay_grid.size());
        for (std::size_t j = 0; j < ref.delay_grid.size(); ++j)
            row[j] = effect_query(qm, ref, alt, ref.delay_grid[j]);
        res.delta.push_back(std::move(row));
    }
    return res;
}

// Joint effect of pinning two predictors, at one fixed delay.
inline SurfaceResult interaction_surface(const QueryModel& qm, std::size_t k1,
                                         std::size_t k2, double delay,
                                         const std::vector<double>& grid1,
                                         const std::vector<double>& grid2,
                                         const ReferenceConfig& ref) {
    if (k1 >= qm.spec.n_predictors() || k2 >= qm.spec.n_predictors())
        throw ConfigError("interaction_surface: no such predictor");
    SurfaceResult res;
    res.values = grid1;
    res.delays = grid2;  // second predictor's grid, not delays
    res.statistic = statistic_name(ref.statistic);
    for (double v : grid1)
        res.out_of_range = res.out_of_range || v < qm.stats.pred_min[k1] ||
                           v > qm.stats.pred_max[k1];
    for (double v : grid2)
        res.out_of_range = res.out_of_range || v < qm.stats.pred_min[k2] ||
                           v > qm.stats.pred_max[k2];
    auto alt = ref.predictors;
    for (double v1 : grid1) {
        alt[k1] = v1;
        std::vector<double> row(grid2.size());
        for (std::size_t j = 0; j < grid2.size(); ++j) {
            alt[k2] = grid2[j];
            row[j] = effect_query(qm, ref, alt, delay);
        }
        res.delta.push_back(std::move(row));
    }
    return res;
}

// Effect of predictor k at a fixed delay as a function of event onset time:
// flat unless some block conditions on the timestamp.
inline IrfQueryResult nonstationarity_slice(
    const QueryModel& qm, std::size_t k, double delay,
    const std::vector<double>& timestamp_grid, const ReferenceConfig& ref,
    double step = std::numeric_limits<double>::quiet_NaN()) {
    if (k >= qm.spec.n_predictors())
        throw ConfigError("nonstationarity_slice: no such predictor");
    if (std::isnan(step)) step = qm.stats.pred_sd[k];
    auto alt = ref.predictors;
    alt[k] += step;
    std::vector<double> values(timestamp_grid.size());
    for (std::size_t i = 0; i < timestamp_grid.size(); ++i) {
        const double t0 = timestamp_grid[i];
        const auto a = eval_impulse(qm, alt, t0, delay);
        const auto r = eval_impulse(qm, ref.predictors, t0, delay);
        values[i] =
            pick_statistic(a, ref.statistic) - pick_statistic(r, ref.statistic);
    }
    auto res = detail::point_result(timestamp_grid, std::move(values),
                                    "timestamp", ref.statistic);
    for (double t0 : timestamp_grid)
        res.out_of_range = res.out_of_range || t0 < qm.stats.time_min ||
                           t0 > qm.stats.time_max;
    return res;
}

// One uncertainty sample = one uniformly drawn ensemble component + one
// frozen dropout mask set (+ one variational draw), evaluated over a whole
// grid. The closure receives the frozen draw and returns the grid values.
using GridQuery = std::function<std::vector<double>(
    const QueryModel&, const MaskSet*, const VariationalDraw*)>;

inline IrfQueryResult uncertainty_band(
    const std::vector<const QueryModel*>& ensemble, const GridQuery& query,
    std::size_t n_samples, Rng& rng,
    std::array<double, 3> quantiles = {0.025, 0.5, 0.975}) {
    if (ensemble.empty()) throw ConfigError("uncertainty_band: empty ensemble");
    if (n_samples < 2) throw ConfigError("uncertainty_band needs >= 2 samples");

    std::vector<std::vector<double>> samples;
    samples.reserve(n_samples);
    for (std::size_t s = 0; s < n_samples; ++s) {
        const QueryModel& qm = *ensemble[rng.below(ensemble.size())];
        MaskSet masks = sample_masks(qm.params, qm.spec.hp.dropout, rng);
        VariationalDraw draw;
        const bool variational =
            qm.spec.hp.inference == InferenceMode::variational;
        if (variational) draw = sample_variational(qm.params, rng);
        samples.push_back(query(qm, &masks, variational ? &draw : nullptr));
        if (samples.back().size() != samples.front().size())
            throw ConfigError("query returned grids of different sizes");
    }

    const std::size_t G = samples.front().size();
    IrfQueryResult res;
    res.n_samples = n_samples;
    res.estimate.resize(G);
    res.lower.resize(G);
    res.upper.resize(G);
    std::vector<double> column(n_samples);
    for (std::size_t g = 0; g < G; ++g) {
        for (std::size_t s = 0; s < n_samples; ++s) column[s] = samples[s][g];
        res.lower[g] = quantile(column, quantiles[0]);
        res.estimate[g] = quantile(column, quantiles[1]);
        res.upper[g] = quantile(column, quantiles[2]);
    }
    return res;
}

// Banded IRF curve for predictor k across an ensemble.
inline IrfQueryResult irf_curve_band(
    const std::vector<const QueryModel*>& ensemble, std::size_t k,
    const ReferenceConfig& ref, std::size_t n_samples, Rng& rng,
    double step = std::numeric_limits<double>::quiet_NaN()) {
    auto res = uncertainty_band(
        ensemble,
        [&](const QueryModel& qm, const MaskSet* masks,
            const VariationalDraw* draw) {
            return irf_curve(qm, k, ref, step, masks, draw).estimate;
        },
        n_samples, rng);
    res.axis = ref.delay_grid;
    res.axis_name = "delay";
    res.statistic = statistic_name(ref.statistic);
    return res;
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

inline void write_query_csv(std::ostream& out, const IrfQueryResult& res) {
    out << res.axis_name << ",statistic,estimate,lower,upper\n";
    out.precision(17);
    for (std::size_t i = 0; i < res.axis.size(); ++i)
        out << res.axis[i] << ',' << res.statistic << ',' << res.estimate[i]
            << ',' << res.lower[i] << ',' << res.upper[i] << '\n';
}

inline nlohmann::json query_json(const IrfQueryResult& res) {
    nlohmann::json j;
    j["axis_name"] = res.axis_name;
    j["axis"] = res.axis;
    j["statistic"] = res.statistic;
    j["estimate"] = res.estimate;
    j["lower"] = res.lower;
    j["upper"] = res.upper;
    j["n_samples"] = res.n_samples;
    j["out_of_range"] = res.out_of_range;
    return j;
}

inline void write_surface_csv(std::ostream& out, const SurfaceResult& res,
                              const std::string& row_name = "value",
                              const std::string& col_name = "delay") {
    out << row_name << ',' << col_name << ",statistic,delta\n";
    out.precision(17);
    for (std::size_t i = 0; i < res.values.size(); ++i)
        for (std::size_t j = 0; j < res.delays.size(); ++j)
            out << res.values[i] << ',' << res.delays[j] << ','
                << res.statistic << ',' << res.delta[i][j] << '\n';
}

}  // namespace ctirf
