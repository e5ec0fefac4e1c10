// config.hpp - flat INI-style run configuration: sections of key = value
// lines that declare data paths, the model spec, training hyperparameters,
// synthesis recipes, query grids, and ensemble settings.
#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ctirf/query.hpp"
#include "ctirf/spec.hpp"
#include "ctirf/synth.hpp"

namespace ctirf {

inline const std::string kVersion = "0.1.0";

struct IniSection {
    std::string name;
    std::vector<std::pair<std::string, std::string>> entries;

    const std::string* find(const std::string& key) const {
        for (const auto& [k, v] : entries)
            if (k == key) return &v;
        return nullptr;
    }
};

struct IniFile {
    std::vector<IniSection> sections;

    const IniSection* find(const std::string& name) const {
        for (const auto& s : sections)
            if (s.name == name) return &s;
        return nullptr;
    }
    std::vector<const IniSection*> find_all(const std::string& name) const {
        std::vector<const IniSection*> out;
        for (const auto& s : sections)
            if (s.name == name) out.push_back(&s);
        return out;
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

inline std::vector<std::string> split_list(const std::string& s, char sep = ',') {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(s);
    while (std::getline(in, item, sep)) {
        const auto t = trim(item);
        if (!t.empty()) out.push_back(t);
    }
    return out;
}

}  // namespace detail

inline IniFile parse_ini(std::istream& in, const std::string& origin) {
    IniFile file;
    std::string line;
    std::size_t lineno = 0;
    IniSection* current = nullptr;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = detail::trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            if (t.back() != ']')
                throw ConfigError(origin + ":" + std::to_string(lineno) +
                                  ": unterminated section header");
            file.sections.push_back({detail::trim(t.substr(1, t.size() - 2)), {}});
            current = &file.sections.back();
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(lineno) +
                              ": expected key = value");
        if (!current)
            throw ConfigError(origin + ":" + std::to_string(lineno) +
                              ": key outside any [section]");
        current->entries.emplace_back(detail::trim(t.substr(0, eq)),
                                      detail::trim(t.substr(eq + 1)));
    }
    return file;
}

inline IniFile load_ini(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    return parse_ini(in, path);
}

namespace detail {

inline double to_double(const std::string& v, const std::string& key) {
    if (v == "inf" || v == "infinity")
        return std::numeric_limits<double>::infinity();
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': '" + v + "' is not a number");
    }
}

inline std::uint64_t to_u64(const std::string& v, const std::string& key) {
    try {
        std::size_t used = 0;
        const unsigned long long u = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return u;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': '" + v +
                          "' is not a nonnegative integer");
    }
}

inline bool to_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "yes" || v == "1") return true;
    if (v == "false" || v == "no" || v == "0") return false;
    throw ConfigError("config key '" + key + "': '" + v + "' is not a boolean");
}

// Section-scoped typed getters with defaults.
struct SectionView {
    const IniSection* section;
    std::string prefix;

    const std::string* raw(const std::string& key) const {
        return section ? section->find(key) : nullptr;
    }
    std::string str(const std::string& key, const std::string& fallback) const {
        const auto* v = raw(key);
        return v ? *v : fallback;
    }
    double num(const std::string& key, double fallback) const {
        const auto* v = raw(key);
        return v ? to_double(*v, prefix + key) : fallback;
    }
    std::uint64_t u64(const std::string& key, std::uint64_t fallback) const {
        const auto* v = raw(key);
        return v ? to_u64(*v, prefix + key) : fallback;
    }
    bool flag(const std::string& key, bool fallback) const {
        const auto* v = raw(key);
        return v ? to_bool(*v, prefix + key) : fallback;
    }
    std::vector<std::string> list(const std::string& key) const {
        const auto* v = raw(key);
        return v ? split_list(*v) : std::vector<std::string>{};
    }
};

}  // namespace detail

// family:coef[:family-specific params...], e.g. "exponential:1:1",
// "normal:0.5:1:0.5", "shifted_gamma:1:2:2:-0.5".
inline KernelSpec parse_kernel(const std::string& text) {
    const auto parts = detail::split_list(text, ':');
    if (parts.empty()) throw ConfigError("empty kernel description");
    const std::string& family = parts[0];
    auto part = [&](std::size_t i, double fallback) {
        return i < parts.size() ? detail::to_double(parts[i], "kernel") : fallback;
    };
    KernelSpec k;
    if (family == "exponential") {
        k = exponential_kernel(part(1, 1.0), part(2, 1.0));
        if (parts.size() > 3) throw ConfigError("exponential kernel takes coef:beta");
    } else if (family == "normal") {
        k = normal_kernel(part(1, 1.0), part(2, 1.0), part(3, 0.5));
        if (parts.size() > 4) throw ConfigError("normal kernel takes coef:mean:sd");
    } else if (family == "shifted_gamma") {
        k = shifted_gamma_kernel(part(1, 1.0), part(2, 2.0), part(3, 2.0),
                                 part(4, -0.5));
        if (parts.size() > 5)
            throw ConfigError("shifted_gamma kernel takes coef:alpha:beta:delta");
    } else {
        throw ConfigError("unknown kernel family '" + family + "'");
    }
    validate_kernel(k);
    return k;
}

// "name" (all offset groups) or "name:group+group" with groups from
// {hidden_bias, b, s0}.
inline RandomFactorSpec parse_random_factor(const std::string& text) {
    RandomFactorSpec rf;
    const auto colon = text.find(':');
    if (colon == std::string::npos) {
        rf.name = detail::trim(text);
        return rf;
    }
    rf.name = detail::trim(text.substr(0, colon));
    rf.offsets_hidden_bias = rf.offsets_b = rf.offsets_s0 = false;
    for (const auto& g : detail::split_list(text.substr(colon + 1), '+')) {
        if (g == "hidden_bias")
            rf.offsets_hidden_bias = true;
        else if (g == "b")
            rf.offsets_b = true;
        else if (g == "s0")
            rf.offsets_s0 = true;
        else
            throw ConfigError("unknown random-effect group '" + g + "'");
    }
    return rf;
}

struct RunConfig {
    // [data]
    std::string events_path;
    std::string responses_path;
    std::string output_dir = ".";
    std::uint64_t split_seed = 0;
    std::array<double, 3> split_ratios = {0.5, 0.25, 0.25};

    // [model] + [block]* + [train]
    ModelSpec spec;
    bool has_model = false;
    std::uint64_t train_seed = 0;
    std::size_t max_epochs = 5000;
    std::size_t checkpoint_every = 10;

    // [synth]
    SynthConfig synth;
    std::vector<KernelSpec> kernels;
    bool has_synth = false;

    // [query]
    std::string query_predictor;
    std::string query_predictor2;  // second axis for interaction surfaces
    double horizon = 5.0;
    std::size_t points = 101;
    QueryStatistic statistic = QueryStatistic::mu;
    std::size_t n_samples = 200;
    std::uint64_t query_seed = 0;
    double delay = 1.0;
    double value_span = 2.0;   // surface grid half-width in training SDs
    std::size_t value_points = 21;

    // [ensemble]
    std::size_t ensemble_size = 10;
    std::uint64_t ensemble_seed = 0;
    std::size_t permutation_iterations = 10000;
    std::uint64_t permutation_seed = 0;
};

inline RunConfig build_run_config(const IniFile& ini) {
    RunConfig cfg;

    detail::SectionView data{ini.find("data"), "data."};
    cfg.events_path = data.str("events", "");
    cfg.responses_path = data.str("responses", "");
    cfg.output_dir = data.str("output_dir", ".");
    cfg.split_seed = data.u64("split_seed", 0);
    cfg.split_ratios = {data.num("train_ratio", 0.5),
                        data.num("exploratory_ratio", 0.25),
                        data.num("test_ratio", 0.25)};

    if (const auto* model = ini.find("model")) {
        cfg.has_model = true;
        detail::SectionView mv{model, "model."};
        cfg.spec.predictors = mv.list("predictors");
        for (const auto& h : mv.list("f_in_hidden"))
            cfg.spec.f_in_hidden.push_back(detail::to_u64(h, "model.f_in_hidden"));
        cfg.spec.history_length = mv.u64("history_length", 32);
        cfg.spec.max_lookback =
            mv.num("max_lookback", std::numeric_limits<double>::infinity());
        for (const auto& rf : mv.list("random_factors"))
            cfg.spec.random_factors.push_back(parse_random_factor(rf));

        const auto blocks = ini.find_all("block");
        for (const auto* b : blocks) {
            detail::SectionView bv{b, "block."};
            IrfBlockSpec blk;
            blk.convolved = bv.list("convolved");
            blk.conditioning = bv.list("conditioning");
            blk.include_offset_d = bv.flag("offset_d", true);
            blk.include_timestamp_t = bv.flag("timestamp_t", true);
            blk.dirac_delta = bv.flag("dirac", false);
            if (bv.raw("targets")) {
                blk.targets.clear();
                for (const auto& t : bv.list("targets")) {
                    if (t == "mu")
                        blk.targets.push_back(TargetParam::mu);
                    else if (t == "sigma")
                        blk.targets.push_back(TargetParam::sigma);
                    else
                        throw ConfigError("unknown target '" + t + "'");
                }
            }
            cfg.spec.blocks.push_back(std::move(blk));
        }
        if (blocks.empty() && !cfg.spec.predictors.empty())
            cfg.spec.blocks = default_spec(cfg.spec.predictors).blocks;
    }

    if (const auto* train = ini.find("train")) {
        detail::SectionView tv{train, "train."};
        auto& hp = cfg.spec.hp;
        if (tv.raw("hidden")) {
            hp.hidden.clear();
            for (const auto& h : tv.list("hidden"))
                hp.hidden.push_back(detail::to_u64(h, "train.hidden"));
        }
        hp.dropout = tv.num("dropout", hp.dropout);
        hp.learning_rate = tv.num("learning_rate", hp.learning_rate);
        hp.batch_size = tv.u64("batch_size", hp.batch_size);
        hp.weight_l2 = tv.num("weight_l2", hp.weight_l2);
        hp.ranef_l2 = tv.num("ranef_l2", hp.ranef_l2);
        const std::string inference = tv.str("inference", "mle");
        if (inference == "mle")
            hp.inference = InferenceMode::mle;
        else if (inference == "variational")
            hp.inference = InferenceMode::variational;
        else
            throw ConfigError("unknown inference mode '" + inference + "'");
        cfg.train_seed = tv.u64("seed", 0);
        cfg.max_epochs = tv.u64("max_epochs", 5000);
        cfg.checkpoint_every = tv.u64("checkpoint_every", 10);
    }

    if (const auto* synth = ini.find("synth")) {
        cfg.has_synth = true;
        detail::SectionView sv{synth, "synth."};
        cfg.synth.n_predictors = sv.u64("n_predictors", 1);
        cfg.synth.correlation = sv.num("correlation", 0.0);
        cfg.synth.noise_sd = sv.num("noise_sd", 0.1);
        const std::string timing = sv.str("timing", "random");
        if (timing == "fixed")
            cfg.synth.timing = Timing::fixed;
        else if (timing == "random")
            cfg.synth.timing = Timing::random_intervals;
        else if (timing == "async")
            cfg.synth.timing = Timing::async;
        else
            throw ConfigError("unknown timing mode '" + timing + "'");
        cfg.synth.delta = sv.num("delta", 0.2);
        cfg.synth.n_events = sv.u64("n_events", 1000);
        cfg.synth.n_responses = sv.u64("n_responses", 0);
        cfg.synth.seed = sv.u64("seed", 0);
        for (const auto& k : sv.list("kernels"))
            cfg.kernels.push_back(parse_kernel(k));
        if (cfg.kernels.empty())
            for (std::size_t i = 0; i < cfg.synth.n_predictors; ++i)
                cfg.kernels.push_back(exponential_kernel(1.0));
        if (cfg.kernels.size() != cfg.synth.n_predictors)
            throw ConfigError("synth.kernels must list one kernel per predictor");
    }

    if (const auto* query = ini.find("query")) {
        detail::SectionView qv{query, "query."};
        cfg.query_predictor = qv.str("predictor", "");
        cfg.query_predictor2 = qv.str("predictor2", "");
        cfg.horizon = qv.num("horizon", 5.0);
        cfg.points = qv.u64("points", 101);
        cfg.statistic = parse_statistic(qv.str("statistic", "mu"));
        cfg.n_samples = qv.u64("n_samples", 200);
        cfg.query_seed = qv.u64("seed", 0);
        cfg.delay = qv.num("delay", 1.0);
        cfg.value_span = qv.num("value_span", 2.0);
        cfg.value_points = qv.u64("value_points", 21);
    }

    if (const auto* ens = ini.find("ensemble")) {
        detail::SectionView ev{ens, "ensemble."};
        cfg.ensemble_size = ev.u64("size", 10);
        cfg.ensemble_seed = ev.u64("seed", 0);
        cfg.permutation_iterations = ev.u64("permutation_iterations", 10000);
        cfg.permutation_seed = ev.u64("permutation_seed", 0);
    }

    return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
    return build_run_config(load_ini(path));
}

}  // namespace ctirf
