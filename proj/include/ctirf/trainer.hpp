// trainer.hpp - the full stabilization recipe: Adam, global-norm clipping,
// loss-spike checkpoint restore, iterate averaging, and the time-loss
// convergence criterion.
#pragma once

#include <boost/math/distributions/students_t.hpp>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "ctirf/common.hpp"
#include "ctirf/model.hpp"

namespace ctirf {

// ---------------------------------------------------------------------------
// Optimizer pieces
// ---------------------------------------------------------------------------

struct AdamState {
    std::vector<double> m;  // first moments
    std::vector<double> v;  // second moments
    std::uint64_t step = 0;
    double lr = 0.003;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

inline AdamState make_adam(std::size_t n, double lr) {
    AdamState st;
    st.m.assign(n, 0.0);
    st.v.assign(n, 0.0);
    st.lr = lr;
    return st;
}

// Scales all gradients so their joint Euclidean norm is at most max_norm.
// Returns the pre-clip norm. Non-finite gradients are a numerical error
// (the caller's spike path).
inline double clip_global_norm(const std::vector<double*>& grads,
                               double max_norm = 1.0) {
    double sq = 0.0;
    for (double* g : grads) sq += *g * *g;
    if (!std::isfinite(sq)) throw NumericError("non-finite gradient norm");
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double scale = max_norm / norm;
        for (double* g : grads) *g *= scale;
    }
    return norm;
}

inline void adam_step(AdamState& st, const std::vector<double*>& params,
                      const std::vector<double*>& grads) {
    ++st.step;
    const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = *grads[i];
        st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * g;
        st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * g * g;
        const double mhat = st.m[i] / bc1;
        const double vhat = st.v[i] / bc2;
        *params[i] -= st.lr * mhat / (std::sqrt(vhat) + st.eps);
    }
}

// ---------------------------------------------------------------------------
// Loss-spike guard
// ---------------------------------------------------------------------------

// De-biased EMAs of the loss and its square; a batch loss more than 1000
// moving SDs above the moving mean is a spike. The guard only updates on ok
// batches and never fires before two updates have warmed it.
struct LossGuardState {
    double ema_loss = 0.0;
    double ema_sq = 0.0;
    std::uint64_t count = 0;
    double decay = 0.999;
};

inline bool loss_guard(LossGuardState& g, double loss) {
    if (!std::isfinite(loss)) return true;
    if (g.count >= 2) {
        const double debias = 1.0 - std::pow(g.decay, static_cast<double>(g.count));
        const double mean = g.ema_loss / debias;
        const double var = g.ema_sq / debias - mean * mean;
        // Floor keeps a perfectly constant stream from spiking on itself.
        const double sd = std::sqrt(var > 0.0 ? var : 0.0) + 1e-12;
        if (loss > mean + 1000.0 * sd) return true;
    }
    g.ema_loss = g.decay * g.ema_loss + (1.0 - g.decay) * loss;
    g.ema_sq = g.decay * g.ema_sq + (1.0 - g.decay) * loss * loss;
    ++g.count;
    return false;
}

// ---------------------------------------------------------------------------
// Iterate averaging
// ---------------------------------------------------------------------------

struct AveragedParams {
    std::vector<double> values;
    std::uint64_t count = 0;
    double decay = 0.999;
};

inline void iterate_average(AveragedParams& avg,
                            const std::vector<double*>& params) {
    if (avg.values.empty()) avg.values.assign(params.size(), 0.0);
    ++avg.count;
    for (std::size_t i = 0; i < params.size(); ++i)
        avg.values[i] = avg.decay * avg.values[i] + (1.0 - avg.decay) * *params[i];
}

// Standard EMA de-biasing: divide by 1 - decay^count.
inline std::vector<double> debiased(const AveragedParams& avg) {
    std::vector<double> out = avg.values;
    if (avg.count == 0) return out;
    const double c = 1.0 - std::pow(avg.decay, static_cast<double>(avg.count));
    for (double& v : out) v /= c;
    return out;
}

// ---------------------------------------------------------------------------
// Convergence: correlation of loss with time
// ---------------------------------------------------------------------------

// Verdict for the trailing window ending at the last history entry:
// fail-to-reject iff the loss/epoch Pearson correlation is >= 0 (not
// improving) or its two-sided t-test p-value exceeds alpha.
inline bool epoch_fails_to_reject(const std::vector<double>& history,
                                  std::size_t end, std::size_t window,
                                  double alpha) {
    const std::size_t n = window;
    const std::size_t start = end + 1 - n;
    double mean_x = 0.0, mean_y = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mean_x += static_cast<double>(i);
        mean_y += history[start + i];
    }
    mean_x /= static_cast<double>(n);
    mean_y /= static_cast<double>(n);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dx = static_cast<double>(i) - mean_x;
        const double dy = history[start + i] - mean_y;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (syy <= 0.0) return true;  // zero-variance window
    const double r = sxy / std::sqrt(sxx * syy);
    if (r >= 0.0) return true;
    const double r2 = std::min(r * r, 1.0 - 1e-15);
    const double t = std::fabs(r) * std::sqrt(static_cast<double>(n - 2) / (1.0 - r2));
    boost::math::students_t_distribution<double> dist(static_cast<double>(n - 2));
    const double p = 2.0 * boost::math::cdf(boost::math::complement(dist, t));
    return p > alpha;
}

// Converged when at least 50 of the last 100 epoch verdicts fail to reject.
inline bool convergence_check(const std::vector<double>& loss_history,
                              std::size_t window = 100, double alpha = 0.5) {
    if (loss_history.size() < window) return false;
    const std::size_t n_verdicts = loss_history.size() - window + 1;
    const std::size_t lookback = std::min<std::size_t>(n_verdicts, 100);
    std::size_t fails = 0;
    for (std::size_t i = 0; i < lookback; ++i) {
        const std::size_t end = loss_history.size() - 1 - i;
        if (epoch_fails_to_reject(loss_history, end, window, alpha)) ++fails;
    }
    return fails >= 50;
}

// ---------------------------------------------------------------------------
// The training loop
// ---------------------------------------------------------------------------

struct FitOptions {
    std::uint64_t seed = 0;
    std::size_t max_epochs = 5000;
    std::size_t checkpoint_every = 10;  // epochs
    std::size_t convergence_window = 100;
    double convergence_alpha = 0.5;
    double clip_norm = 1.0;
    bool guard_enabled = true;
    std::ostream* log = nullptr;        // JSONL, one record per epoch
    // Fault-injection hook: pretend the first batch of this 1-based epoch
    // produced a huge loss (0 disables).
    std::size_t inject_spike_epoch = 0;
    double inject_spike_value = 1e6;
};

struct FitResult {
    ParameterStore params;     // last iterate
    ParameterStore averaged;   // de-biased EMA iterate (the estimate)
    std::size_t epochs = 0;
    std::size_t spikes = 0;
    std::size_t restores = 0;
    bool converged = false;
    double final_loss = 0.0;
    std::vector<double> epoch_losses;
    double max_postclip_norm = 0.0;
    AdamState adam;        // optimizer state at the final step
    LossGuardState guard;  // spike-guard moments at the final step
};

namespace detail {

// Everything a restart needs, snapshotted at checkpoint cadence.
struct TrainCheckpoint {
    ParameterStore params;
    AdamState adam;
    AveragedParams avg;
    LossGuardState guard;
    std::size_t epoch = 0;
    std::size_t history_len = 0;
};

inline void log_epoch(std::ostream* log, std::size_t epoch, std::size_t batches,
                      double loss, double grad_norm, double postclip,
                      std::size_t spikes, std::size_t restores, bool converged) {
    if (!log) return;
    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "{\"epoch\":%zu,\"batches\":%zu,\"loss\":%.17g,"
                  "\"grad_norm\":%.17g,\"postclip_norm\":%.17g,"
                  "\"spikes\":%zu,\"restores\":%zu,\"converged\":%s}\n",
                  epoch, batches, loss, grad_norm, postclip, spikes, restores,
                  converged ? "true" : "false");
    *log << buf;
}

}  // namespace detail

// Shuffled minibatch SGD with the full safeguard stack. Deterministic for a
// fixed seed: restores rewind the parameters and optimizer but not the RNG
// streams, so training continues on fresh batches.
inline FitResult fit(const ModelSpec& spec, const AssembledData& train,
                     const FitOptions& opt = {}) {
    const auto violations = validate_spec(spec);
    if (spec_has_errors(violations))
        throw ConfigError("invalid model spec:\n" + violations_to_string(violations));
    if (train.n_responses == 0) throw DataError("training set is empty");

    Rng init_rng(derive_seed(opt.seed, 0));
    Rng shuffle_rng(derive_seed(opt.seed, 1));
    Rng mask_rng(derive_seed(opt.seed, 2));
    Rng draw_rng(derive_seed(opt.seed, 3));

    const ModelPlan plan = make_plan(spec);
    ParameterStore ps = init_parameter_store(spec, train.registry, init_rng);
    ParameterStore grads = zeros_like(ps);
    auto pptr = param_ptrs(ps);
    const auto gptr = param_ptrs(grads);

    AdamState adam = make_adam(pptr.size(), spec.hp.learning_rate);
    AveragedParams avg;
    LossGuardState guard;
    const bool use_masks = spec.hp.dropout > 0.0;
    const bool variational = spec.hp.inference == InferenceMode::variational;

    FitResult result;
    std::vector<double> history;

    detail::TrainCheckpoint ckpt{ps, adam, avg, guard, 0, 0};
    std::size_t consecutive_restores = 0;
    bool spike_injected = false;

    std::vector<std::size_t> order(train.n_responses);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::size_t epoch = 0;
    while (epoch < opt.max_epochs) {
        ++epoch;
        shuffle_rng.shuffle(order);
        const std::size_t B = spec.hp.batch_size;
        const std::size_t n_batches = (order.size() + B - 1) / B;

        double epoch_loss = 0.0;
        double epoch_norm = 0.0;
        double epoch_postclip = 0.0;
        bool restored = false;

        for (std::size_t bi = 0; bi < n_batches; ++bi) {
            const std::size_t lo = bi * B;
            const std::size_t hi = std::min(order.size(), lo + B);
            std::vector<std::size_t> batch(order.begin() + static_cast<long>(lo),
                                           order.begin() + static_cast<long>(hi));

            MaskSet masks;
            VariationalDraw draw;
            LossContext ctx;
            if (use_masks) {
                masks = sample_masks(ps, spec.hp.dropout, mask_rng);
                ctx.masks = &masks;
            }
            if (variational) {
                draw = sample_variational(ps, draw_rng);
                ctx.draw = &draw;
                ctx.train_size = train.n_responses;
            }

            double loss;
            bool numeric_failure = false;
            try {
                visit_params(grads, [](double& v) { v = 0.0; });
                loss = nll_loss(spec, plan, ps, train, batch, ctx, &grads);
            } catch (const NumericError&) {
                loss = std::numeric_limits<double>::quiet_NaN();
                numeric_failure = true;
            }
            if (opt.inject_spike_epoch != 0 && epoch == opt.inject_spike_epoch &&
                bi == 0 && !spike_injected) {
                loss = opt.inject_spike_value;
                spike_injected = true;
            }

            const bool spike =
                numeric_failure ||
                (opt.guard_enabled ? loss_guard(guard, loss) : !std::isfinite(loss));
            if (spike) {
                ++result.spikes;
                if (consecutive_restores >= 3)
                    throw TrainError("training diverged: loss spiked after 3 "
                                     "consecutive checkpoint restores");
                // Rewind to the last checkpoint; RNG streams keep advancing
                // so the retried segment sees fresh batches and masks.
                ps = ckpt.params;
                adam = ckpt.adam;
                avg = ckpt.avg;
                guard = ckpt.guard;
                history.resize(ckpt.history_len);
                // Vector buffers may have moved during the copy assignment.
                pptr = param_ptrs(ps);
                epoch = ckpt.epoch;
                ++result.restores;
                ++consecutive_restores;
                restored = true;
                break;
            }

            double norm = 0.0;
            try {
                norm = clip_global_norm(gptr, opt.clip_norm);
            } catch (const NumericError&) {
                ps = ckpt.params;
                adam = ckpt.adam;
                avg = ckpt.avg;
                guard = ckpt.guard;
                history.resize(ckpt.history_len);
                pptr = param_ptrs(ps);
                epoch = ckpt.epoch;
                ++result.spikes;
                ++result.restores;
                ++consecutive_restores;
                restored = true;
                break;
            }
            double postclip = std::min(norm, opt.clip_norm);
            adam_step(adam, pptr, gptr);
            iterate_average(avg, pptr);

            epoch_loss += loss;
            epoch_norm = std::max(epoch_norm, norm);
            epoch_postclip = std::max(epoch_postclip, postclip);
            result.max_postclip_norm = std::max(result.max_postclip_norm, postclip);
        }
        if (restored) continue;

        epoch_loss /= static_cast<double>(n_batches);
        history.push_back(epoch_loss);
        result.final_loss = epoch_loss;

        const bool converged =
            convergence_check(history, opt.convergence_window, opt.convergence_alpha);
        detail::log_epoch(opt.log, epoch, n_batches, epoch_loss, epoch_norm,
                          epoch_postclip, result.spikes, result.restores, converged);

        if (epoch % opt.checkpoint_every == 0) {
            ckpt = {ps, adam, avg, guard, epoch, history.size()};
            consecutive_restores = 0;
        }
        if (converged) {
            result.converged = true;
            break;
        }
    }

    result.epochs = epoch;
    result.epoch_losses = std::move(history);
    result.adam = adam;
    result.guard = guard;
    result.params = ps;
    result.averaged = ps;
    const auto deb = debiased(avg);
    if (!deb.empty()) {
        auto aptr = param_ptrs(result.averaged);
        for (std::size_t i = 0; i < aptr.size(); ++i) *aptr[i] = deb[i];
    }
    return result;
}

}  // namespace ctirf
