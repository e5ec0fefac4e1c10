// spec.hpp - declarative model description: predictors, IRF blocks with
// per-block feature sets, distribution targets, random factors, and the
// training hyperparameters. Encodes both full and constrained (null) models.
#pragma once

#include <algorithm>
#include <cstddef>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "ctirf/common.hpp"

namespace ctirf {

// The convolved-feature universe is {rate} + predictors; rate is the
// constant-1 pseudo-predictor capturing the response to event timing itself.
inline const std::string kRateName = "rate";

enum class TargetParam { mu, sigma };

inline std::string target_name(TargetParam p) {
    return p == TargetParam::mu ? "mu" : "sigma";
}

// One neural IRF block: maps [d?; t?; conditioning features of x'] to
// convolution weights for its convolved features x target params.
struct IrfBlockSpec {
    std::vector<std::string> convolved;      // subset of {rate} + predictors
    std::vector<std::string> conditioning;   // subset of predictors
    bool include_offset_d = true;
    bool include_timestamp_t = true;
    std::vector<TargetParam> targets = {TargetParam::mu, TargetParam::sigma};
    bool dirac_delta = false;                // no temporal spread

    bool targets_param(TargetParam p) const {
        return std::find(targets.begin(), targets.end(), p) != targets.end();
    }
};

enum class InferenceMode { mle, variational };

struct Hyperparams {
    std::vector<std::size_t> hidden = {32, 32};  // per-block hidden sizes
    double weight_l2 = 5.0;
    double ranef_l2 = 10.0;
    double dropout = 0.2;
    double learning_rate = 0.003;
    std::size_t batch_size = 1024;
    InferenceMode inference = InferenceMode::mle;
};

// Which parameter groups a random factor perturbs.
struct RandomFactorSpec {
    std::string name;                // column in the responses table
    bool offsets_hidden_bias = true; // block-network hidden biases
    bool offsets_b = true;           // convolution coefficients
    bool offsets_s0 = true;          // distribution bias
};

struct ModelSpec {
    std::vector<std::string> predictors;    // K labels
    std::vector<std::size_t> f_in_hidden;   // empty = identity input stage
    std::vector<IrfBlockSpec> blocks;
    std::size_t history_length = 32;        // T_hist
    double max_lookback = std::numeric_limits<double>::infinity();  // seconds
    std::vector<RandomFactorSpec> random_factors;
    Hyperparams hp;

    bool f_in_identity() const { return f_in_hidden.empty(); }
    std::size_t n_predictors() const { return predictors.size(); }
    // Features = rate + predictors; feature 0 is rate.
    std::size_t n_features() const { return predictors.size() + 1; }

    // Feature index: 0 = rate, 1 + k = predictor k. -1 if unknown.
    int feature_index(const std::string& name) const {
        if (name == kRateName) return 0;
        for (std::size_t k = 0; k < predictors.size(); ++k)
            if (predictors[k] == name) return static_cast<int>(k) + 1;
        return -1;
    }

    int predictor_index(const std::string& name) const {
        for (std::size_t k = 0; k < predictors.size(); ++k)
            if (predictors[k] == name) return static_cast<int>(k);
        return -1;
    }
};

struct SpecViolation {
    enum class Severity { error, warning };
    Severity severity;
    std::string message;
};

// Structural checks on a ModelSpec. Coverage gaps are warnings (constrained
// models deliberately leave (feature, target) pairs unmodeled, pinning them
// to the intercept); duplicates and unknown names are errors. Never throws.
inline std::vector<SpecViolation> validate_spec(const ModelSpec& spec) {
    std::vector<SpecViolation> out;
    auto error = [&out](std::string msg) {
        out.push_back({SpecViolation::Severity::error, std::move(msg)});
    };
    auto warn = [&out](std::string msg) {
        out.push_back({SpecViolation::Severity::warning, std::move(msg)});
    };

    if (spec.history_length < 1) error("history_length must be >= 1");
    if (spec.blocks.empty()) error("model needs at least one IRF block");
    if (spec.hp.dropout < 0.0 || spec.hp.dropout >= 1.0)
        error("dropout must lie in [0, 1)");
    if (spec.hp.batch_size < 1) error("batch_size must be >= 1");
    if (spec.hp.learning_rate <= 0.0) error("learning_rate must be positive");
    if (spec.hp.weight_l2 < 0.0) error("weight_l2 must be nonnegative");
    if (spec.hp.ranef_l2 < 0.0) error("ranef_l2 must be nonnegative");

    {
        std::set<std::string> seen;
        for (const auto& p : spec.predictors) {
            if (p == kRateName) error("'rate' is reserved and cannot be a predictor name");
            if (!seen.insert(p).second) error("duplicate predictor name '" + p + "'");
        }
    }
    {
        std::set<std::string> seen;
        for (const auto& f : spec.random_factors)
            if (!seen.insert(f.name).second)
                error("duplicate random factor '" + f.name + "'");
    }

    // (feature, target) -> how many blocks convolve it.
    std::set<std::pair<int, int>> covered;
    for (std::size_t bi = 0; bi < spec.blocks.size(); ++bi) {
        const auto& blk = spec.blocks[bi];
        const std::string tag = "block " + std::to_string(bi);
        if (blk.convolved.empty()) error(tag + ": empty convolved set");
        if (blk.targets.empty()) error(tag + ": empty target set");
        if (blk.dirac_delta && blk.include_offset_d)
            error(tag + ": dirac_delta blocks cannot take the delay input");

        std::set<std::string> conv_seen;
        for (const auto& f : blk.convolved) {
            if (spec.feature_index(f) < 0)
                error(tag + ": unknown convolved feature '" + f + "'");
            if (!conv_seen.insert(f).second)
                error(tag + ": feature '" + f + "' convolved twice");
        }
        std::set<std::string> cond_seen;
        for (const auto& f : blk.conditioning) {
            if (f == kRateName)
                error(tag + ": rate is convolved-only and cannot condition a block");
            else if (spec.predictor_index(f) < 0)
                error(tag + ": unknown conditioning feature '" + f + "'");
            if (!cond_seen.insert(f).second)
                error(tag + ": feature '" + f + "' conditions twice");
        }
        {
            std::set<TargetParam> tgt_seen;
            for (auto t : blk.targets)
                if (!tgt_seen.insert(t).second)
                    error(tag + ": duplicate target parameter");
        }

        for (const auto& f : blk.convolved) {
            const int fi = spec.feature_index(f);
            if (fi < 0) continue;
            for (auto t : blk.targets) {
                const auto key = std::make_pair(fi, static_cast<int>(t));
                if (!covered.insert(key).second)
                    error("feature '" + f + "' is convolved for " + target_name(t) +
                          " by more than one block");
            }
        }
    }

    for (std::size_t fi = 0; fi < spec.n_features(); ++fi) {
        const std::string fname = fi == 0 ? kRateName : spec.predictors[fi - 1];
        for (int t : {0, 1}) {
            if (!covered.count({static_cast<int>(fi), t}))
                warn("pair (" + fname + ", " +
                     target_name(static_cast<TargetParam>(t)) +
                     ") is not convolved by any block");
        }
    }
    return out;
}

inline bool spec_has_errors(const std::vector<SpecViolation>& v) {
    for (const auto& x : v)
        if (x.severity == SpecViolation::Severity::error) return true;
    return false;
}

inline std::string violations_to_string(const std::vector<SpecViolation>& v) {
    std::string s;
    for (const auto& x : v) {
        s += x.severity == SpecViolation::Severity::error ? "error: " : "warning: ";
        s += x.message;
        s += '\n';
    }
    return s;
}

// The fully-covering one-block default: every feature convolved for both
// distribution parameters, all predictors conditioning.
inline ModelSpec default_spec(const std::vector<std::string>& predictors) {
    ModelSpec spec;
    spec.predictors = predictors;
    IrfBlockSpec blk;
    blk.convolved.push_back(kRateName);
    for (const auto& p : predictors) blk.convolved.push_back(p);
    blk.conditioning = predictors;
    spec.blocks.push_back(std::move(blk));
    return spec;
}

}  // namespace ctirf
