// commands.hpp - the work behind each CLI subcommand: load config, run the
// pipeline stage, write artifacts plus an atomically-replaced run manifest.
#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>

#include "ctirf/checkpoint.hpp"
#include "ctirf/config.hpp"
#include "ctirf/query.hpp"
#include "ctirf/stats.hpp"
#include "ctirf/synth.hpp"
#include "ctirf/trainer.hpp"

namespace ctirf {

namespace detail {

inline std::string iso_timestamp() {
    const std::time_t now =
        std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

inline std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// tmp + rename so readers never observe a half-written file.
inline void write_text_atomic(const std::string& path,
                              const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write '" + tmp + "'");
        out << content;
        if (!out) throw DataError("write failed for '" + tmp + "'");
    }
    std::filesystem::rename(tmp, path);
}

inline void require_file(const std::string& path, const std::string& role) {
    if (path.empty())
        throw ConfigError("config does not name a " + role + " file");
    if (!std::filesystem::exists(path))
        throw ConfigError(role + " file '" + path + "' does not exist");
}

}  // namespace detail

// Provenance record emitted by every subcommand.
struct RunManifest {
    std::string command;
    std::string config_path;
    std::string config_hash;
    std::string version = kVersion;
    std::string timestamp;
    nlohmann::json seeds = nlohmann::json::object();
    std::vector<std::string> artifacts;
};

inline nlohmann::json run_manifest_json(const RunManifest& m) {
    nlohmann::json j;
    j["command"] = m.command;
    j["config"] = m.config_path;
    j["config_hash"] = m.config_hash;
    j["version"] = m.version;
    j["timestamp"] = m.timestamp;
    j["seeds"] = m.seeds;
    j["artifacts"] = m.artifacts;
    return j;
}

inline RunManifest start_manifest(const std::string& command,
                                  const std::string& config_path) {
    RunManifest m;
    m.command = command;
    m.config_path = config_path;
    m.config_hash = hex64(fnv1a(detail::slurp(config_path)));
    m.timestamp = detail::iso_timestamp();
    return m;
}

inline std::string finish_manifest(const RunManifest& m,
                                   const std::string& output_dir) {
    const std::string path =
        (std::filesystem::path(output_dir) / (m.command + "_manifest.json"))
            .string();
    detail::write_text_atomic(path, run_manifest_json(m).dump(2) + "\n");
    return path;
}

namespace detail {

inline std::string out_path(const RunConfig& cfg, const std::string& name) {
    std::filesystem::create_directories(cfg.output_dir);
    return (std::filesystem::path(cfg.output_dir) / name).string();
}

struct LoadedData {
    EventStream events;
    ResponseTable responses;
};

inline LoadedData load_dataset(const RunConfig& cfg) {
    require_file(cfg.events_path, "events");
    require_file(cfg.responses_path, "responses");
    return {read_events_csv(cfg.events_path),
            read_responses_csv(cfg.responses_path)};
}

inline ModelSpec validated_spec(const RunConfig& cfg) {
    if (!cfg.has_model) throw ConfigError("config has no [model] section");
    const auto report = validate_spec(cfg.spec);
    if (spec_has_errors(report))
        throw ConfigError(violations_to_string(report));
    return cfg.spec;
}

// Split, stats, registry, and the assembled training partition.
struct TrainingSetup {
    ModelSpec spec;
    SplitResult split;
    TrainingStats stats;
    LevelRegistry registry;
    AssembledData train;
};

inline TrainingSetup prepare_training(const RunConfig& cfg,
                                      const LoadedData& data) {
    TrainingSetup setup;
    setup.spec = validated_spec(cfg);
    setup.split = split_data(data.responses, cfg.split_ratios, cfg.split_seed);
    setup.stats = compute_stats(data.events, setup.split.train, setup.spec);
    // Levels come from the full table so held-out partitions resolve too.
    setup.registry = discover_levels(data.responses, setup.spec);
    setup.train = assemble_inputs(data.events, setup.split.train, setup.spec,
                                  setup.stats, setup.registry);
    return setup;
}

inline const ResponseTable& pick_partition(const SplitResult& split,
                                           const ResponseTable& all,
                                           const std::string& name) {
    if (name == "train") return split.train;
    if (name == "exploratory") return split.exploratory;
    if (name == "test") return split.test;
    if (name == "all") return all;
    throw ConfigError("unknown partition '" + name +
                      "' (train|exploratory|test|all)");
}

inline std::uint64_t hash_files(const std::vector<std::string>& paths) {
    std::uint64_t h = fnv1a("", 0);
    for (const auto& p : paths) {
        const std::string bytes = slurp(p);
        h = fnv1a(bytes.data(), bytes.size(), h);
    }
    return h;
}

}  // namespace detail

// synth: draw a dataset from the configured generator and write the CSV pair
// plus the ground-truth sidecar.
inline int cmd_synth(const RunConfig& cfg, const std::string& config_path) {
    if (!cfg.has_synth) throw ConfigError("config has no [synth] section");
    const SynthData data = gen_dataset(cfg.synth, cfg.kernels);

    const std::string events_path = detail::out_path(cfg, "events.csv");
    const std::string responses_path = detail::out_path(cfg, "responses.csv");
    const std::string truth_path = detail::out_path(cfg, "ground_truth.json");
    write_events_csv(data.events, events_path);
    write_responses_csv(data.responses, responses_path);
    detail::write_text_atomic(
        truth_path, ground_truth_json(cfg.synth, cfg.kernels).dump(2) + "\n");

    auto m = start_manifest("synth", config_path);
    m.seeds["synth"] = cfg.synth.seed;
    m.artifacts = {events_path, responses_path, truth_path};
    finish_manifest(m, cfg.output_dir);
    return 0;
}

// fit: train one model on the training partition; emit a checkpoint and the
// per-epoch JSONL log.
inline int cmd_fit(const RunConfig& cfg, const std::string& config_path) {
    const auto data = detail::load_dataset(cfg);
    auto setup = detail::prepare_training(cfg, data);

    const std::string log_path = detail::out_path(cfg, "train.log");
    const std::string model_path = detail::out_path(cfg, "model.ckpt");
    std::ofstream log(log_path, std::ios::binary | std::ios::trunc);
    if (!log) throw DataError("cannot write '" + log_path + "'");

    FitOptions opt;
    opt.seed = cfg.train_seed;
    opt.max_epochs = cfg.max_epochs;
    opt.checkpoint_every = cfg.checkpoint_every;
    opt.log = &log;
    const FitResult result = fit(setup.spec, setup.train, opt);
    log.close();

    Checkpoint ck = checkpoint_from_fit(setup.spec, setup.stats, result);
    ck.params.registry = setup.registry;
    ck.averaged.registry = setup.registry;
    save_checkpoint(ck, model_path);

    auto m = start_manifest("fit", config_path);
    m.seeds["train"] = cfg.train_seed;
    m.seeds["split"] = cfg.split_seed;
    m.artifacts = {model_path, log_path};
    finish_manifest(m, cfg.output_dir);
    return 0;
}

// eval: per-response log-likelihood of a saved model on one partition.
inline int cmd_eval(const RunConfig& cfg, const std::string& config_path,
                    const std::string& model_path,
                    const std::string& partition) {
    detail::require_file(model_path, "model");
    const Checkpoint ck = load_checkpoint(model_path);
    const auto data = detail::load_dataset(cfg);
    const auto split = split_data(data.responses, cfg.split_ratios,
                                  cfg.split_seed);
    const ResponseTable& rows =
        detail::pick_partition(split, data.responses, partition);

    const AssembledData assembled = assemble_inputs(
        data.events, rows, ck.spec, ck.stats, ck.averaged.registry);
    const ModelPlan plan = make_plan(ck.spec);
    const std::vector<double> ll =
        eval_loglik(ck.spec, plan, ck.averaged, assembled);

    const std::string csv_path =
        detail::out_path(cfg, "eval_" + partition + ".csv");
    {
        std::ofstream out(csv_path, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write '" + csv_path + "'");
        out << "item,series_id,time,loglik\n";
        out.precision(17);
        for (std::size_t i = 0; i < rows.rows.size(); ++i)
            out << i << ',' << rows.rows[i].series << ',' << rows.rows[i].time
                << ',' << ll[i] << '\n';
    }

    double total = 0.0;
    for (double v : ll) total += v;
    nlohmann::json summary;
    summary["partition"] = partition;
    summary["n"] = ll.size();
    summary["total_loglik"] = total;
    summary["mean_loglik"] = ll.empty() ? 0.0 : total / ll.size();
    const std::string summary_path =
        detail::out_path(cfg, "eval_" + partition + "_summary.json");
    detail::write_text_atomic(summary_path, summary.dump(2) + "\n");

    auto m = start_manifest("eval", config_path);
    m.seeds["split"] = cfg.split_seed;
    m.artifacts = {csv_path, summary_path};
    finish_manifest(m, cfg.output_dir);
    return 0;
}

namespace detail {

inline nlohmann::json surface_json(const SurfaceResult& res,
                                   const std::string& row_name,
                                   const std::string& col_name) {
    nlohmann::json j;
    j[row_name] = res.values;
    j[col_name] = res.delays;
    j["statistic"] = res.statistic;
    j["delta"] = res.delta;
    j["out_of_range"] = res.out_of_range;
    return j;
}

inline std::vector<double> linspace(double lo, double hi, std::size_t n) {
    if (n < 2) throw ConfigError("grid needs at least 2 points");
    std::vector<double> g(n);
    for (std::size_t i = 0; i < n; ++i)
        g[i] = lo + (hi - lo) * static_cast<double>(i) /
                        static_cast<double>(n - 1);
    return g;
}

inline std::size_t predictor_or_throw(const ModelSpec& spec,
                                      const std::string& name,
                                      const std::string& key) {
    if (name.empty())
        throw ConfigError("config key '" + key + "' is required for this query");
    const int k = spec.predictor_index(name);
    if (k < 0)
        throw ConfigError("query predictor '" + name +
                          "' is not a model predictor");
    return static_cast<std::size_t>(k);
}

}  // namespace detail

// irf: effect-query exports from one checkpoint or an ensemble of them.
// Kinds: curve (delay sweep), surface (value x delay), interaction
// (value x value at one delay), slice (timestamp sweep at one delay).
inline int cmd_irf(const RunConfig& cfg, const std::string& config_path,
                   const std::vector<std::string>& model_paths,
                   const std::string& kind) {
    if (model_paths.empty()) throw ConfigError("irf needs at least one model");
    std::vector<Checkpoint> cks;
    for (const auto& p : model_paths) {
        detail::require_file(p, "model");
        cks.push_back(load_checkpoint(p));
    }
    std::vector<QueryModel> models;
    for (const auto& ck : cks)
        models.push_back(make_query_model(ck.spec, ck.stats, ck.averaged));

    ReferenceConfig ref =
        reference_config(models[0].stats, cfg.horizon, cfg.points);
    ref.statistic = cfg.statistic;
    const std::size_t k = detail::predictor_or_throw(
        models[0].spec, cfg.query_predictor, "query.predictor");

    auto m = start_manifest("irf", config_path);
    m.seeds["query"] = cfg.query_seed;

    if (kind == "curve") {
        IrfQueryResult res;
        if (models.size() > 1 || cfg.n_samples > 1) {
            std::vector<const QueryModel*> ptrs;
            for (const auto& qm : models) ptrs.push_back(&qm);
            Rng rng(cfg.query_seed);
            res = irf_curve_band(ptrs, k, ref, cfg.n_samples, rng);
        } else {
            res = irf_curve(models[0], k, ref);
        }
        const std::string csv_path = detail::out_path(cfg, "irf_curve.csv");
        std::ofstream out(csv_path, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write '" + csv_path + "'");
        write_query_csv(out, res);
        const std::string json_path = detail::out_path(cfg, "irf_curve.json");
        detail::write_text_atomic(json_path, query_json(res).dump(2) + "\n");
        m.artifacts = {csv_path, json_path};
    } else if (kind == "surface") {
        const auto& st = models[0].stats;
        const auto grid = detail::linspace(
            st.pred_mean[k] - cfg.value_span * st.pred_sd[k],
            st.pred_mean[k] + cfg.value_span * st.pred_sd[k],
            cfg.value_points);
        const SurfaceResult res = irf_surface(models[0], k, grid, ref);
        const std::string csv_path = detail::out_path(cfg, "irf_surface.csv");
        std::ofstream out(csv_path, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write '" + csv_path + "'");
        write_surface_csv(out, res);
        const std::string json_path = detail::out_path(cfg, "irf_surface.json");
        detail::write_text_atomic(
            json_path, detail::surface_json(res, "value", "delay").dump(2) + "\n");
        m.artifacts = {csv_path, json_path};
    } else if (kind == "interaction") {
        const std::size_t k2 = detail::predictor_or_throw(
            models[0].spec, cfg.query_predictor2, "query.predictor2");
        const auto& st = models[0].stats;
        auto span = [&](std::size_t kk) {
            return detail::linspace(
                st.pred_mean[kk] - cfg.value_span * st.pred_sd[kk],
                st.pred_mean[kk] + cfg.value_span * st.pred_sd[kk],
                cfg.value_points);
        };
        const SurfaceResult res = interaction_surface(
            models[0], k, k2, cfg.delay, span(k), span(k2), ref);
        const std::string csv_path =
            detail::out_path(cfg, "irf_interaction.csv");
        std::ofstream out(csv_path, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write '" + csv_path + "'");
        write_surface_csv(out, res, cfg.query_predictor, cfg.query_predictor2);
        const std::string json_path =
            detail::out_path(cfg, "irf_interaction.json");
        detail::write_text_atomic(
            json_path,
            detail::surface_json(res, cfg.query_predictor, cfg.query_predictor2)
                    .dump(2) +
                "\n");
        m.artifacts = {csv_path, json_path};
    } else if (kind == "slice") {
        const auto& st = models[0].stats;
        const auto tgrid =
            detail::linspace(st.time_min, st.time_max, cfg.points);
        const IrfQueryResult res =
            nonstationarity_slice(models[0], k, cfg.delay, tgrid, ref);
        const std::string csv_path = detail::out_path(cfg, "irf_slice.csv");
        std::ofstream out(csv_path, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write '" + csv_path + "'");
        write_query_csv(out, res);
        const std::string json_path = detail::out_path(cfg, "irf_slice.json");
        detail::write_text_atomic(json_path, query_json(res).dump(2) + "\n");
        m.artifacts = {csv_path, json_path};
    } else {
        throw ConfigError("unknown irf kind '" + kind +
                          "' (curve|surface|interaction|slice)");
    }

    finish_manifest(m, cfg.output_dir);
    return 0;
}

// test: paired permutation test of ensemble A against ensemble B on the test
// partition.
inline int cmd_test(const RunConfig& cfg, const std::string& config_path,
                    const std::vector<std::string>& ensemble_a,
                    const std::vector<std::string>& ensemble_b) {
    if (ensemble_a.empty() || ensemble_b.empty())
        throw ConfigError("test needs at least one model per ensemble");
    const auto data = detail::load_dataset(cfg);
    const auto split =
        split_data(data.responses, cfg.split_ratios, cfg.split_seed);

    auto loglik_matrix = [&](const std::vector<std::string>& paths) {
        std::vector<Checkpoint> cks;
        for (const auto& p : paths) {
            detail::require_file(p, "model");
            cks.push_back(load_checkpoint(p));
        }
        const AssembledData assembled =
            assemble_inputs(data.events, split.test, cks[0].spec, cks[0].stats,
                            cks[0].averaged.registry);
        std::vector<ParameterStore> components;
        for (const auto& ck : cks) components.push_back(ck.averaged);
        return ensemble_loglik(cks[0].spec, components, assembled);
    };
    const LikelihoodMatrix L0 = loglik_matrix(ensemble_a);
    const LikelihoodMatrix L1 = loglik_matrix(ensemble_b);

    Rng perm_rng(cfg.permutation_seed);
    const TestResult res =
        permutation_test(L0, L1, cfg.permutation_iterations, perm_rng);
    const std::string hash0 = hex64(detail::hash_files(ensemble_a));
    const std::string hash1 = hex64(detail::hash_files(ensemble_b));

    const std::string report_path = detail::out_path(cfg, "test_report.json");
    detail::write_text_atomic(
        report_path, test_report_json(res, hash0, hash1).dump(2) + "\n");

    auto m = start_manifest("test", config_path);
    m.seeds["split"] = cfg.split_seed;
    m.seeds["permutation"] = cfg.permutation_seed;
    m.artifacts = {report_path};
    finish_manifest(m, cfg.output_dir);
    return 0;
}

// ensemble-fit: E seed-derived fits; one checkpoint per component plus the
// ensemble manifest.
inline int cmd_ensemble_fit(const RunConfig& cfg,
                            const std::string& config_path) {
    const auto data = detail::load_dataset(cfg);
    auto setup = detail::prepare_training(cfg, data);

    FitOptions base;
    base.max_epochs = cfg.max_epochs;
    base.checkpoint_every = cfg.checkpoint_every;
    const EnsembleResult ens = ensemble_fit(
        setup.spec, setup.train, cfg.ensemble_size, cfg.ensemble_seed, base);

    std::vector<std::string> artifacts;
    for (std::size_t e = 0; e < ens.components.size(); ++e) {
        Checkpoint ck = checkpoint_from_fit(setup.spec, setup.stats,
                                            ens.components[e]);
        ck.params.registry = setup.registry;
        ck.averaged.registry = setup.registry;
        const std::string path =
            detail::out_path(cfg, "model_" + std::to_string(e) + ".ckpt");
        save_checkpoint(ck, path);
        artifacts.push_back(path);
    }
    const std::string manifest_path =
        detail::out_path(cfg, "ensemble_manifest.json");
    detail::write_text_atomic(manifest_path,
                              manifest_json(ens.manifest).dump(2) + "\n");
    artifacts.push_back(manifest_path);

    auto m = start_manifest("ensemble-fit", config_path);
    m.seeds["ensemble"] = cfg.ensemble_seed;
    m.seeds["split"] = cfg.split_seed;
    m.seeds["components"] = ens.manifest.seeds;
    m.artifacts = artifacts;
    finish_manifest(m, cfg.output_dir);
    return 0;
}

}  // namespace ctirf
