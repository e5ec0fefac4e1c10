// synth.hpp - ground-truth generators: event streams with controlled timing,
// equicorrelated Gaussian predictors, known continuous-time kernels, and
// exact-convolution responses with injected noise. Everything is seed-
// deterministic so recovery experiments are reproducible.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctirf/common.hpp"
#include "ctirf/data.hpp"

namespace ctirf {

enum class KernelFamily { exponential, normal, shifted_gamma };

inline std::string family_name(KernelFamily f) {
    switch (f) {
        case KernelFamily::exponential: return "exponential";
        case KernelFamily::normal: return "normal";
        default: return "shifted_gamma";
    }
}

// A scaled probability density: the true IRF is coefficient x density(delay).
struct KernelSpec {
    KernelFamily family = KernelFamily::exponential;
    double coef = 1.0;
    double rate = 1.0;    // exponential / shifted-gamma beta
    double mean = 1.0;    // normal location
    double sd = 0.5;      // normal scale
    double alpha = 2.0;   // shifted-gamma shape
    double shift = -0.5;  // shifted-gamma delta
};

inline KernelSpec exponential_kernel(double coef, double beta = 1.0) {
    KernelSpec k;
    k.family = KernelFamily::exponential;
    k.coef = coef;
    k.rate = beta;
    return k;
}

inline KernelSpec normal_kernel(double coef, double m = 1.0, double sd = 0.5) {
    KernelSpec k;
    k.family = KernelFamily::normal;
    k.coef = coef;
    k.mean = m;
    k.sd = sd;
    return k;
}

inline KernelSpec shifted_gamma_kernel(double coef, double alpha = 2.0,
                                       double beta = 2.0, double delta = -0.5) {
    KernelSpec k;
    k.family = KernelFamily::shifted_gamma;
    k.coef = coef;
    k.alpha = alpha;
    k.rate = beta;
    k.shift = delta;
    return k;
}

inline void validate_kernel(const KernelSpec& k) {
    switch (k.family) {
        case KernelFamily::exponential:
            if (!(k.rate > 0.0)) throw ConfigError("exponential kernel needs beta > 0");
            break;
        case KernelFamily::normal:
            if (!(k.sd > 0.0)) throw ConfigError("normal kernel needs sd > 0");
            break;
        case KernelFamily::shifted_gamma:
            if (!(k.alpha > 0.0) || !(k.rate > 0.0))
                throw ConfigError("shifted-gamma kernel needs alpha > 0 and beta > 0");
            break;
    }
}

inline double gamma_pdf(double u, double alpha, double beta) {
    if (u <= 0.0) return 0.0;
    return std::exp(alpha * std::log(beta) + (alpha - 1.0) * std::log(u) -
                    beta * u - std::lgamma(alpha));
}

// Delays outside a kernel's support evaluate to 0, not an error.
inline double kernel_eval(const KernelSpec& k, double d) {
    switch (k.family) {
        case KernelFamily::exponential:
            return d < 0.0 ? 0.0 : k.coef * k.rate * std::exp(-k.rate * d);
        case KernelFamily::normal: {
            const double z = (d - k.mean) / k.sd;
            return k.coef * std::exp(-0.5 * z * z) /
                   (k.sd * std::sqrt(2.0 * 3.14159265358979323846));
        }
        default:
            return k.coef * gamma_pdf(d - k.shift, k.alpha, k.rate);
    }
}

enum class Timing { fixed, random_intervals, async };

inline std::string timing_name(Timing t) {
    switch (t) {
        case Timing::fixed: return "fixed";
        case Timing::random_intervals: return "random";
        default: return "async";
    }
}

struct SynthConfig {
    std::size_t n_predictors = 1;
    double correlation = 0.0;  // pairwise r of the equicorrelation matrix
    double noise_sd = 0.1;
    Timing timing = Timing::random_intervals;
    double delta = 0.2;        // fixed spacing, or mean inter-arrival
    std::size_t n_events = 1000;
    std::size_t n_responses = 0;  // async only; 0 = same as n_events
    std::uint64_t seed = 0;
};

namespace detail {

// One renewal stream: a regular grid for fixed timing, exponential
// inter-arrivals otherwise. Fixed grids start at 0.
inline std::vector<double> renewal_times(std::size_t n, double delta,
                                         bool fixed, Rng& rng) {
    std::vector<double> t(n);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (fixed)
            t[i] = static_cast<double>(i) * delta;
        else
            t[i] = (acc += rng.exponential(delta));
    }
    return t;
}

}  // namespace detail

inline std::vector<double> gen_event_times(const SynthConfig& cfg, Rng& rng) {
    if (cfg.n_events == 0) throw ConfigError("n_events must be positive");
    if (!(cfg.delta > 0.0)) throw ConfigError("delta must be positive");
    return detail::renewal_times(cfg.n_events, cfg.delta,
                                 cfg.timing == Timing::fixed, rng);
}

// count x K matrix with standard-normal marginals and every pairwise
// correlation equal to r, via the Cholesky factor of (1-r)I + rJ.
inline std::vector<std::vector<double>> gen_predictors(std::size_t K, double r,
                                                       std::size_t count,
                                                       Rng& rng) {
    if (K == 0) throw ConfigError("need at least one predictor");
    // In-place Cholesky; a nonpositive pivot means the matrix is not PD.
    std::vector<std::vector<double>> L(K, std::vector<double>(K, 0.0));
    for (std::size_t i = 0; i < K; ++i)
        for (std::size_t j = 0; j <= i; ++j) {
            double sum = i == j ? 1.0 : r;
            for (std::size_t k = 0; k < j; ++k) sum -= L[i][k] * L[j][k];
            if (i == j) {
                if (sum <= 0.0)
                    throw ConfigError("equicorrelation matrix with r = " +
                                      std::to_string(r) + " is not positive definite");
                L[i][j] = std::sqrt(sum);
            } else {
                L[i][j] = sum / L[j][j];
            }
        }

    std::vector<std::vector<double>> x(count, std::vector<double>(K));
    std::vector<double> g(K);
    for (auto& row : x) {
        for (auto& v : g) v = rng.normal();
        for (std::size_t i = 0; i < K; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j <= i; ++j) s += L[i][j] * g[j];
            row[i] = s;
        }
    }
    return x;
}

inline EventStream gen_events(const SynthConfig& cfg, Rng& rng) {
    EventStream events;
    events.predictor_names.resize(cfg.n_predictors);
    for (std::size_t k = 0; k < cfg.n_predictors; ++k)
        events.predictor_names[k] = "x" + std::to_string(k + 1);
    EventStream::Series series;
    series.id = "s";
    series.times = gen_event_times(cfg, rng);
    series.x = gen_predictors(cfg.n_predictors, cfg.correlation,
                              cfg.n_events, rng);
    events.series.push_back(std::move(series));
    return events;
}

// Exact convolution: every event before tau contributes, no windowing.
inline ResponseTable synth_response(const EventStream& events,
                                    const std::vector<KernelSpec>& kernels,
                                    double noise_sd,
                                    const std::vector<double>& response_times,
                                    Rng& rng) {
    if (noise_sd < 0.0) throw ConfigError("noise_sd must be nonnegative");
    for (const auto& k : kernels) validate_kernel(k);
    ResponseTable out;
    for (const auto& series : events.series) {
        if (!series.x.empty() && series.x[0].size() != kernels.size())
            throw ConfigError("need exactly one kernel per predictor");
        for (const double tau : response_times) {
            double y = 0.0;
            for (std::size_t n = 0; n < series.times.size(); ++n) {
                const double d = tau - series.times[n];
                if (d < 0.0) continue;
                for (std::size_t k = 0; k < kernels.size(); ++k)
                    y += series.x[n][k] * kernel_eval(kernels[k], d);
            }
            if (noise_sd > 0.0) y += rng.normal(0.0, noise_sd);
            out.rows.push_back({series.id, tau, y, {}});
        }
    }
    return out;
}

struct SynthData {
    EventStream events;
    ResponseTable responses;
    std::vector<double> response_times;
};

// Full pipeline with per-purpose derived RNG streams so that, e.g., changing
// the noise SD leaves event times and predictors untouched.
inline SynthData gen_dataset(const SynthConfig& cfg,
                             const std::vector<KernelSpec>& kernels) {
    if (kernels.size() != cfg.n_predictors)
        throw ConfigError("need exactly one kernel per predictor");
    Rng time_rng(derive_seed(cfg.seed, 100));
    Rng pred_rng(derive_seed(cfg.seed, 101));
    Rng resp_rng(derive_seed(cfg.seed, 102));
    Rng noise_rng(derive_seed(cfg.seed, 103));

    SynthData data;
    data.events.predictor_names.resize(cfg.n_predictors);
    for (std::size_t k = 0; k < cfg.n_predictors; ++k)
        data.events.predictor_names[k] = "x" + std::to_string(k + 1);
    EventStream::Series series;
    series.id = "s";
    series.times = gen_event_times(cfg, time_rng);
    series.x = gen_predictors(cfg.n_predictors, cfg.correlation,
                              cfg.n_events, pred_rng);
    data.events.series.push_back(std::move(series));

    if (cfg.timing == Timing::async) {
        const std::size_t n =
            cfg.n_responses == 0 ? cfg.n_events : cfg.n_responses;
        data.response_times = detail::renewal_times(n, cfg.delta, false, resp_rng);
    } else {
        data.response_times = data.events.series[0].times;
    }
    data.responses = synth_response(data.events, kernels, cfg.noise_sd,
                                    data.response_times, noise_rng);
    return data;
}

// Sidecar describing exactly how a synthetic dataset was produced.
inline nlohmann::json ground_truth_json(const SynthConfig& cfg,
                                        const std::vector<KernelSpec>& kernels) {
    nlohmann::json j;
    j["n_predictors"] = cfg.n_predictors;
    j["correlation"] = cfg.correlation;
    j["noise_sd"] = cfg.noise_sd;
    j["timing"] = timing_name(cfg.timing);
    j["delta"] = cfg.delta;
    j["n_events"] = cfg.n_events;
    j["n_responses"] = cfg.n_responses;
    j["seed"] = cfg.seed;
    j["kernels"] = nlohmann::json::array();
    for (const auto& k : kernels) {
        nlohmann::json kj;
        kj["family"] = family_name(k.family);
        kj["coef"] = k.coef;
        switch (k.family) {
            case KernelFamily::exponential:
                kj["beta"] = k.rate;
                break;
            case KernelFamily::normal:
                kj["mean"] = k.mean;
                kj["sd"] = k.sd;
                break;
            case KernelFamily::shifted_gamma:
                kj["alpha"] = k.alpha;
                kj["beta"] = k.rate;
                kj["delta"] = k.shift;
                break;
        }
        j["kernels"].push_back(kj);
    }
    return j;
}

}  // namespace ctirf
