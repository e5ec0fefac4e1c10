// stats.hpp - data partitioning, ensemble fitting, and the ensemble paired
// permutation test on out-of-sample log-likelihoods. The test repartitions
// the pooled 2E per-item statistics, never mixing values across items, and
// reports p = max(count, 1)/B so zero exceedances stay an upper bound.
#pragma once

#include <array>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctirf/model.hpp"
#include "ctirf/trainer.hpp"

namespace ctirf {

struct SplitResult {
    ResponseTable train;
    ResponseTable exploratory;
    ResponseTable test;
};

// Deterministic partition: rows are ordered by a seeded hash of their index
// and dealt into splits whose sizes come from largest-remainder rounding, so
// small tables still match the ratios exactly.
inline SplitResult split_data(const ResponseTable& responses,
                              std::array<double, 3> ratios = {0.5, 0.25, 0.25},
                              std::uint64_t seed = 0) {
    double sum = 0.0;
    for (double r : ratios) {
        if (r < 0.0) throw ConfigError("split ratios must be nonnegative");
        sum += r;
    }
    if (std::fabs(sum - 1.0) > 1e-9)
        throw ConfigError("split ratios must sum to 1");

    const std::size_t N = responses.rows.size();
    std::array<std::size_t, 3> counts{};
    std::array<double, 3> frac{};
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < 3; ++i) {
        const double exact = ratios[i] * static_cast<double>(N);
        counts[i] = static_cast<std::size_t>(exact);
        frac[i] = exact - static_cast<double>(counts[i]);
        assigned += counts[i];
    }
    while (assigned < N) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < 3; ++i)
            if (frac[i] > frac[best]) best = i;
        ++counts[best];
        frac[best] = -1.0;
        ++assigned;
    }

    std::vector<std::size_t> order(N);
    for (std::size_t i = 0; i < N; ++i) order[i] = i;
    std::vector<std::uint64_t> key(N);
    for (std::size_t i = 0; i < N; ++i) key[i] = derive_seed(seed, i);
    std::sort(order.begin(), order.end(), [&key](std::size_t a, std::size_t b) {
        return key[a] != key[b] ? key[a] < key[b] : a < b;
    });

    SplitResult split;
    split.train.factor_names = responses.factor_names;
    split.exploratory.factor_names = responses.factor_names;
    split.test.factor_names = responses.factor_names;
    for (std::size_t i = 0; i < N; ++i) {
        const auto& row = responses.rows[order[i]];
        if (i < counts[0])
            split.train.rows.push_back(row);
        else if (i < counts[0] + counts[1])
            split.exploratory.rows.push_back(row);
        else
            split.test.rows.push_back(row);
    }
    return split;
}

// N items x E models of per-item log-likelihoods. Comparisons require both
// matrices to carry identical item identifiers in identical order.
struct LikelihoodMatrix {
    std::vector<std::string> items;
    std::vector<std::vector<double>> ll;  // [model][item]

    std::size_t n_items() const { return items.size(); }
    std::size_t n_models() const { return ll.size(); }
};

// Out-of-sample log-likelihoods for every ensemble component on one dataset.
inline LikelihoodMatrix ensemble_loglik(
    const ModelSpec& spec, const std::vector<ParameterStore>& components,
    const AssembledData& data) {
    const ModelPlan plan = make_plan(spec);
    LikelihoodMatrix L;
    L.items.resize(data.n_responses);
    for (std::size_t n = 0; n < data.n_responses; ++n)
        L.items[n] = std::to_string(n);
    for (const auto& ps : components)
        L.ll.push_back(eval_loglik(spec, plan, ps, data));
    return L;
}

struct TestResult {
    double observed = 0.0;  // |sum_n mean_e L1 - sum_n mean_e L0|
    double p = 1.0;
    std::size_t iterations = 0;
    double total0 = 0.0;    // sum_n mean_e of each ensemble
    double total1 = 0.0;
};

// Paired permutation test over ensembles: per iteration and per item, the
// pooled 2E statistics are reshuffled into two size-E halves.
inline TestResult permutation_test(const LikelihoodMatrix& L0,
                                   const LikelihoodMatrix& L1,
                                   std::size_t B, Rng& rng) {
    if (B < 1) throw ConfigError("permutation test needs B >= 1");
    if (L0.n_models() == 0 || L0.n_models() != L1.n_models())
        throw DataError("ensembles must have the same nonzero size E");
    if (L0.items != L1.items)
        throw DataError("likelihood matrices cover different items");
    const std::size_t E = L0.n_models();
    const std::size_t N = L0.n_items();
    if (N == 0) throw DataError("no items to compare");
    for (const auto& row : L0.ll)
        if (row.size() != N) throw DataError("ragged likelihood matrix");
    for (const auto& row : L1.ll)
        if (row.size() != N) throw DataError("ragged likelihood matrix");

    TestResult res;
    res.iterations = B;
    const double invE = 1.0 / static_cast<double>(E);
    for (std::size_t n = 0; n < N; ++n) {
        double m0 = 0.0, m1 = 0.0;
        for (std::size_t e = 0; e < E; ++e) {
            m0 += L0.ll[e][n];
            m1 += L1.ll[e][n];
        }
        res.total0 += m0 * invE;
        res.total1 += m1 * invE;
    }
    res.observed = std::fabs(res.total1 - res.total0);

    std::vector<double> pool(2 * E);
    std::size_t count = 0;
    for (std::size_t b = 0; b < B; ++b) {
        double sum_a = 0.0, sum_b = 0.0;
        for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t e = 0; e < E; ++e) {
                pool[e] = L0.ll[e][n];
                pool[E + e] = L1.ll[e][n];
            }
            rng.shuffle(pool);
            double a = 0.0, bsum = 0.0;
            for (std::size_t e = 0; e < E; ++e) {
                a += pool[e];
                bsum += pool[E + e];
            }
            sum_a += a * invE;
            sum_b += bsum * invE;
        }
        if (std::fabs(sum_a - sum_b) >= res.observed) ++count;
    }
    res.p = static_cast<double>(std::max<std::size_t>(count, 1)) /
            static_cast<double>(B);
    return res;
}

struct EnsembleManifest {
    std::uint64_t root_seed = 0;
    std::vector<std::uint64_t> seeds;
    std::vector<double> final_losses;
    std::vector<std::size_t> epochs;
    std::vector<std::uint8_t> converged;
};

struct EnsembleResult {
    std::vector<FitResult> components;
    EnsembleManifest manifest;
};

// E independent fits that differ only in derived seeds. A component that
// diverges is retried on fresh seeds; persistent failures abort the ensemble
// with every failure listed.
inline EnsembleResult ensemble_fit(const ModelSpec& spec,
                                   const AssembledData& train, std::size_t E,
                                   std::uint64_t root_seed,
                                   const FitOptions& base = {},
                                   std::size_t retries = 2) {
    if (E < 1) throw ConfigError("ensemble size must be >= 1");
    EnsembleResult out;
    out.manifest.root_seed = root_seed;
    std::vector<std::string> failures;
    for (std::size_t e = 0; e < E; ++e) {
        bool done = false;
        std::string last_error;
        for (std::size_t attempt = 0; attempt <= retries && !done; ++attempt) {
            FitOptions opt = base;
            opt.seed = attempt == 0
                           ? derive_seed(root_seed, e)
                           : derive_seed(root_seed, 1000000 + e * 16 + attempt);
            try {
                auto result = fit(spec, train, opt);
                out.manifest.seeds.push_back(opt.seed);
                out.manifest.final_losses.push_back(result.final_loss);
                out.manifest.epochs.push_back(result.epochs);
                out.manifest.converged.push_back(result.converged ? 1 : 0);
                out.components.push_back(std::move(result));
                done = true;
            } catch (const TrainError& err) {
                last_error = err.what();
            }
        }
        if (!done)
            failures.push_back("component " + std::to_string(e) + ": " +
                               last_error);
    }
    if (!failures.empty()) {
        std::string msg = "ensemble fit failed:";
        for (const auto& f : failures) msg += "\n  " + f;
        throw TrainError(msg);
    }
    return out;
}

inline nlohmann::json manifest_json(const EnsembleManifest& m) {
    nlohmann::json j;
    j["root_seed"] = m.root_seed;
    j["seeds"] = m.seeds;
    j["final_losses"] = m.final_losses;
    j["epochs"] = m.epochs;
    j["converged"] = nlohmann::json::array();
    for (auto c : m.converged) j["converged"].push_back(c != 0);
    return j;
}

inline std::string manifest_hash(const EnsembleManifest& m) {
    return hex64(fnv1a(manifest_json(m).dump()));
}

inline nlohmann::json test_report_json(const TestResult& res,
                                       const std::string& hash0,
                                       const std::string& hash1) {
    nlohmann::json j;
    j["observed"] = res.observed;
    j["p"] = res.p;
    j["iterations"] = res.iterations;
    j["ensemble0_total"] = res.total0;
    j["ensemble1_total"] = res.total1;
    j["ensemble0_hash"] = hash0;
    j["ensemble1_hash"] = hash1;
    return j;
}

}  // namespace ctirf
