#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ctirf/commands.hpp"

using namespace ctirf;
namespace fs = std::filesystem;

namespace {

void write_file(const std::string& path, const std::string& content) {
    fs::create_directories(fs::path(path).parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    REQUIRE(out.good());
    out << content;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::size_t line_count(const std::string& text) {
    std::size_t n = 0;
    for (char c : text)
        if (c == '\n') ++n;
    return n;
}

// Fresh per-case scratch directory under the test runner's cwd.
std::string scratch(const std::string& name) {
    const std::string dir = "cli_scratch/" + name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// Small single-predictor run: 160 synthetic events, an 80-row training
// partition, one batch per epoch.
std::string base_config(const std::string& dir, std::size_t max_epochs = 40,
                        std::uint64_t train_seed = 7) {
    std::ostringstream ss;
    ss << "[data]\n"
       << "events = " << dir << "/events.csv\n"
       << "responses = " << dir << "/responses.csv\n"
       << "output_dir = " << dir << "\n"
       << "split_seed = 3\n"
       << "\n[model]\n"
       << "predictors = x1\n"
       << "history_length = 8\n"
       << "\n[train]\n"
       << "hidden = 4\n"
       << "dropout = 0\n"
       << "learning_rate = 0.01\n"
       << "batch_size = 80\n"
       << "weight_l2 = 0\n"
       << "ranef_l2 = 0\n"
       << "seed = " << train_seed << "\n"
       << "max_epochs = " << max_epochs << "\n"
       << "\n[synth]\n"
       << "n_predictors = 1\n"
       << "noise_sd = 0.05\n"
       << "timing = random\n"
       << "delta = 0.2\n"
       << "n_events = 160\n"
       << "seed = 11\n"
       << "kernels = exponential:1:1\n"
       << "\n[query]\n"
       << "predictor = x1\n"
       << "horizon = 4\n"
       << "points = 101\n"
       << "n_samples = 1\n"
       << "\n[ensemble]\n"
       << "size = 2\n"
       << "seed = 21\n"
       << "permutation_iterations = 200\n"
       << "permutation_seed = 5\n";
    return ss.str();
}

}  // namespace

TEST_CASE("ini parser handles sections, comments, and trimming") {
    std::istringstream in(
        "# leading comment\n"
        "[data]\n"
        "  events =  a.csv  \n"
        "; another comment\n"
        "\n"
        "[block]\n"
        "convolved = rate, x1\n"
        "[block]\n"
        "convolved = x2\n");
    const IniFile ini = parse_ini(in, "mem.ini");
    REQUIRE(ini.sections.size() == 3);
    CHECK(*ini.find("data")->find("events") == "a.csv");
    const auto blocks = ini.find_all("block");
    REQUIRE(blocks.size() == 2);
    CHECK(*blocks[0]->find("convolved") == "rate, x1");
    CHECK(*blocks[1]->find("convolved") == "x2");
    CHECK(ini.find("nope") == nullptr);
    CHECK(ini.find("data")->find("nope") == nullptr);
}

TEST_CASE("ini parser reports malformed lines with file and line number") {
    auto parse = [](const std::string& text) {
        std::istringstream in(text);
        return parse_ini(in, "bad.ini");
    };
    CHECK_THROWS_MATCHES(parse("[data\nk = v\n"), ConfigError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("bad.ini:1")));
    CHECK_THROWS_MATCHES(parse("k = v\n"), ConfigError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("[section]")));
    CHECK_THROWS_MATCHES(
        parse("[data]\nno equals sign\n"), ConfigError,
        Catch::Matchers::MessageMatches(
            Catch::Matchers::ContainsSubstring("bad.ini:2")));
}

TEST_CASE("kernel descriptions parse with per-family defaults") {
    const KernelSpec e = parse_kernel("exponential:2:0.5");
    CHECK(e.family == KernelFamily::exponential);
    CHECK(e.coef == 2.0);
    CHECK(e.rate == 0.5);

    const KernelSpec n = parse_kernel("normal:1.5");
    CHECK(n.family == KernelFamily::normal);
    CHECK(n.coef == 1.5);
    CHECK(n.mean == 1.0);
    CHECK(n.sd == 0.5);

    const KernelSpec g = parse_kernel("shifted_gamma:1:3:2:-0.25");
    CHECK(g.family == KernelFamily::shifted_gamma);
    CHECK(g.alpha == 3.0);
    CHECK(g.rate == 2.0);
    CHECK(g.shift == -0.25);

    CHECK_THROWS_AS(parse_kernel("triangle:1"), ConfigError);
    CHECK_THROWS_AS(parse_kernel("exponential:1:1:9"), ConfigError);
    CHECK_THROWS_AS(parse_kernel("exponential:1:-2"), ConfigError);
    CHECK_THROWS_AS(parse_kernel(""), ConfigError);
}

TEST_CASE("random factor descriptions select offset groups") {
    const RandomFactorSpec all = parse_random_factor("subject");
    CHECK(all.name == "subject");
    CHECK(all.offsets_hidden_bias);
    CHECK(all.offsets_b);
    CHECK(all.offsets_s0);

    const RandomFactorSpec some = parse_random_factor("item:b+s0");
    CHECK(some.name == "item");
    CHECK_FALSE(some.offsets_hidden_bias);
    CHECK(some.offsets_b);
    CHECK(some.offsets_s0);

    CHECK_THROWS_AS(parse_random_factor("item:weights"), ConfigError);
}

TEST_CASE("run config maps every section onto typed settings") {
    std::istringstream in(
        "[data]\n"
        "events = e.csv\nresponses = r.csv\noutput_dir = out\n"
        "split_seed = 9\ntrain_ratio = 0.6\nexploratory_ratio = 0.2\n"
        "test_ratio = 0.2\n"
        "[model]\n"
        "predictors = a, b\nf_in_hidden = 4\nhistory_length = 16\n"
        "max_lookback = inf\nrandom_factors = subject, item:b\n"
        "[block]\n"
        "convolved = rate, a\nconditioning = b\ntargets = mu\n"
        "[block]\n"
        "convolved = b\noffset_d = false\ntimestamp_t = false\n"
        "targets = mu, sigma\ndirac = true\n"
        "[train]\n"
        "hidden = 8, 8\ndropout = 0.1\nlearning_rate = 0.005\n"
        "batch_size = 256\nweight_l2 = 2\nranef_l2 = 4\n"
        "inference = variational\nseed = 13\nmax_epochs = 77\n"
        "checkpoint_every = 5\n"
        "[synth]\n"
        "n_predictors = 2\ncorrelation = 0.5\nnoise_sd = 0.2\n"
        "timing = async\ndelta = 0.3\nn_events = 50\nn_responses = 30\n"
        "seed = 4\nkernels = exponential:1:1, normal:1:1:0.5\n"
        "[query]\n"
        "predictor = a\npredictor2 = b\nhorizon = 3\npoints = 11\n"
        "statistic = sigma\nn_samples = 8\nseed = 2\ndelay = 0.7\n"
        "value_span = 1.5\nvalue_points = 5\n"
        "[ensemble]\n"
        "size = 3\nseed = 6\npermutation_iterations = 500\n"
        "permutation_seed = 1\n");
    const RunConfig cfg = build_run_config(parse_ini(in, "full.ini"));

    CHECK(cfg.events_path == "e.csv");
    CHECK(cfg.responses_path == "r.csv");
    CHECK(cfg.output_dir == "out");
    CHECK(cfg.split_seed == 9);
    CHECK(cfg.split_ratios == std::array<double, 3>{0.6, 0.2, 0.2});

    REQUIRE(cfg.has_model);
    CHECK(cfg.spec.predictors == std::vector<std::string>{"a", "b"});
    CHECK(cfg.spec.f_in_hidden == std::vector<std::size_t>{4});
    CHECK(cfg.spec.history_length == 16);
    CHECK(std::isinf(cfg.spec.max_lookback));
    REQUIRE(cfg.spec.random_factors.size() == 2);
    CHECK(cfg.spec.random_factors[0].offsets_hidden_bias);
    CHECK_FALSE(cfg.spec.random_factors[1].offsets_s0);
    REQUIRE(cfg.spec.blocks.size() == 2);
    CHECK(cfg.spec.blocks[0].convolved ==
          std::vector<std::string>{"rate", "a"});
    CHECK(cfg.spec.blocks[0].targets == std::vector{TargetParam::mu});
    CHECK_FALSE(cfg.spec.blocks[1].include_offset_d);
    CHECK_FALSE(cfg.spec.blocks[1].include_timestamp_t);
    CHECK(cfg.spec.blocks[1].dirac_delta);
    CHECK(cfg.spec.hp.hidden == std::vector<std::size_t>{8, 8});
    CHECK(cfg.spec.hp.dropout == 0.1);
    CHECK(cfg.spec.hp.learning_rate == 0.005);
    CHECK(cfg.spec.hp.batch_size == 256);
    CHECK(cfg.spec.hp.inference == InferenceMode::variational);
    CHECK(cfg.train_seed == 13);
    CHECK(cfg.max_epochs == 77);
    CHECK(cfg.checkpoint_every == 5);

    REQUIRE(cfg.has_synth);
    CHECK(cfg.synth.n_predictors == 2);
    CHECK(cfg.synth.correlation == 0.5);
    CHECK(cfg.synth.timing == Timing::async);
    CHECK(cfg.synth.n_responses == 30);
    REQUIRE(cfg.kernels.size() == 2);
    CHECK(cfg.kernels[1].family == KernelFamily::normal);

    CHECK(cfg.query_predictor == "a");
    CHECK(cfg.query_predictor2 == "b");
    CHECK(cfg.horizon == 3.0);
    CHECK(cfg.points == 11);
    CHECK(cfg.statistic == QueryStatistic::sigma);
    CHECK(cfg.n_samples == 8);
    CHECK(cfg.query_seed == 2);
    CHECK(cfg.delay == 0.7);
    CHECK(cfg.value_span == 1.5);
    CHECK(cfg.value_points == 5);

    CHECK(cfg.ensemble_size == 3);
    CHECK(cfg.ensemble_seed == 6);
    CHECK(cfg.permutation_iterations == 500);
    CHECK(cfg.permutation_seed == 1);
}

TEST_CASE("run config rejects bad values with the offending key") {
    auto build = [](const std::string& text) {
        std::istringstream in(text);
        return build_run_config(parse_ini(in, "mem.ini"));
    };
    CHECK_THROWS_MATCHES(build("[data]\nsplit_seed = soon\n"), ConfigError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring(
                                 "data.split_seed")));
    CHECK_THROWS_AS(build("[train]\ninference = map\n"), ConfigError);
    CHECK_THROWS_AS(build("[synth]\ntiming = sometimes\n"), ConfigError);
    CHECK_THROWS_AS(build("[query]\nstatistic = mode\n"), ConfigError);
    CHECK_THROWS_AS(
        build("[synth]\nn_predictors = 2\nkernels = exponential:1:1\n"),
        ConfigError);
    CHECK_THROWS_AS(
        build("[model]\npredictors = a\n[block]\ntargets = nu\n"),
        ConfigError);
    CHECK_THROWS_AS(build("[model]\npredictors = a\n[block]\ndirac = maybe\n"),
                    ConfigError);
}

TEST_CASE("spec violations from the config surface verbatim") {
    const std::string dir = scratch("badspec");
    write_file(dir + "/events.csv", "series_id,time,x1\ns,0,1\n");
    write_file(dir + "/responses.csv", "series_id,time,y\ns,0,1\n");
    std::ostringstream ss;
    ss << "[data]\nevents = " << dir << "/events.csv\nresponses = " << dir
       << "/responses.csv\noutput_dir = " << dir << "\n"
       << "[model]\npredictors = x1, x1\n";
    const std::string path = dir + "/run.ini";
    write_file(path, ss.str());
    const RunConfig cfg = load_run_config(path);
    CHECK_THROWS_MATCHES(cmd_fit(cfg, path), ConfigError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("duplicate")));
}

TEST_CASE("missing input files are config errors") {
    const std::string dir = scratch("missing");
    const std::string path = dir + "/run.ini";
    write_file(path, base_config(dir));
    const RunConfig cfg = load_run_config(path);
    CHECK_THROWS_MATCHES(
        cmd_fit(cfg, path), ConfigError,
        Catch::Matchers::MessageMatches(
            Catch::Matchers::ContainsSubstring("does not exist")));
    CHECK_THROWS_AS(load_run_config(dir + "/absent.ini"), ConfigError);
}

TEST_CASE("synth, fit, and irf produce the full artifact chain") {
    const std::string dir = scratch("pipeline");
    const std::string path = dir + "/run.ini";
    write_file(path, base_config(dir));
    const RunConfig cfg = load_run_config(path);

    REQUIRE(cmd_synth(cfg, path) == 0);
    const std::string events = slurp(dir + "/events.csv");
    const std::string responses = slurp(dir + "/responses.csv");
    CHECK(line_count(events) == 161);    // header + 160 events
    CHECK(line_count(responses) == 161);
    const auto truth = nlohmann::json::parse(slurp(dir + "/ground_truth.json"));
    CHECK(truth["kernels"].size() == 1);
    const auto synth_manifest =
        nlohmann::json::parse(slurp(dir + "/synth_manifest.json"));
    CHECK(synth_manifest["command"] == "synth");
    CHECK(synth_manifest["config_hash"].get<std::string>().size() == 16);
    CHECK(synth_manifest["artifacts"].size() == 3);

    REQUIRE(cmd_fit(cfg, path) == 0);
    REQUIRE(fs::exists(dir + "/model.ckpt"));
    const std::string log = slurp(dir + "/train.log");
    CHECK(line_count(log) >= 1);
    CHECK(log.find("\"loss\":") != std::string::npos);

    REQUIRE(cmd_irf(cfg, path, {dir + "/model.ckpt"}, "curve") == 0);
    const std::string curve = slurp(dir + "/irf_curve.csv");
    CHECK(line_count(curve) == 102);     // header + 101 grid points
    CHECK(curve.rfind("delay,statistic,estimate,lower,upper\n", 0) == 0);
    const auto curve_json = nlohmann::json::parse(slurp(dir + "/irf_curve.json"));
    REQUIRE(curve_json["axis"].size() == 101);
    CHECK(curve_json["axis"][0].get<double>() == 0.0);
    CHECK(curve_json["axis"][100].get<double>() == 4.0);
    for (const auto& v : curve_json["estimate"])
        CHECK(std::isfinite(v.get<double>()));

    REQUIRE(cmd_eval(cfg, path, dir + "/model.ckpt", "test") == 0);
    CHECK(line_count(slurp(dir + "/eval_test.csv")) == 41);  // header + 40 rows
    const auto summary =
        nlohmann::json::parse(slurp(dir + "/eval_test_summary.json"));
    CHECK(summary["n"] == 40);
    CHECK(std::isfinite(summary["mean_loglik"].get<double>()));
}

TEST_CASE("fitting twice yields byte-identical logs and checkpoints") {
    const std::string dir1 = scratch("repeat1");
    const std::string dir2 = scratch("repeat2");
    for (const auto& dir : {dir1, dir2}) {
        const std::string path = dir + "/run.ini";
        write_file(path, base_config(dir, 25));
        const RunConfig cfg = load_run_config(path);
        REQUIRE(cmd_synth(cfg, path) == 0);
        REQUIRE(cmd_fit(cfg, path) == 0);
    }
    CHECK(slurp(dir1 + "/train.log") == slurp(dir2 + "/train.log"));
    CHECK(slurp(dir1 + "/model.ckpt") == slurp(dir2 + "/model.ckpt"));
}

TEST_CASE("an ensemble tested against itself reports p = 1") {
    const std::string dir = scratch("selftest");
    const std::string path = dir + "/run.ini";
    write_file(path, base_config(dir, 20));
    const RunConfig cfg = load_run_config(path);
    REQUIRE(cmd_synth(cfg, path) == 0);
    REQUIRE(cmd_ensemble_fit(cfg, path) == 0);
    REQUIRE(fs::exists(dir + "/model_0.ckpt"));
    REQUIRE(fs::exists(dir + "/model_1.ckpt"));
    const auto ens_manifest =
        nlohmann::json::parse(slurp(dir + "/ensemble_manifest.json"));
    REQUIRE(ens_manifest["seeds"].size() == 2);
    CHECK(ens_manifest["final_losses"].size() == 2);

    const std::vector<std::string> models = {dir + "/model_0.ckpt",
                                             dir + "/model_1.ckpt"};
    REQUIRE(cmd_test(cfg, path, models, models) == 0);
    const auto report = nlohmann::json::parse(slurp(dir + "/test_report.json"));
    CHECK(report["p"].get<double>() == 1.0);
    CHECK(report["observed"].get<double>() == 0.0);
    CHECK(report["iterations"] == 200);
    CHECK(report["ensemble0_hash"] == report["ensemble1_hash"]);

    // Band query across the two components exercises the ensemble irf path.
    RunConfig band_cfg = cfg;
    band_cfg.n_samples = 16;
    band_cfg.points = 21;
    band_cfg.query_seed = 9;
    REQUIRE(cmd_irf(band_cfg, path, models, "curve") == 0);
    const auto bj = nlohmann::json::parse(slurp(dir + "/irf_curve.json"));
    CHECK(bj["n_samples"] == 16);
    for (std::size_t i = 0; i < 21; ++i) {
        CHECK(bj["lower"][i].get<double>() <= bj["estimate"][i].get<double>());
        CHECK(bj["estimate"][i].get<double>() <= bj["upper"][i].get<double>());
    }
}

TEST_CASE("surface, interaction, and slice queries export grids") {
    const std::string dir = scratch("kinds");
    std::ostringstream ss;
    ss << "[data]\nevents = " << dir << "/events.csv\nresponses = " << dir
       << "/responses.csv\noutput_dir = " << dir << "\nsplit_seed = 3\n"
       << "[model]\npredictors = x1, x2\nhistory_length = 8\n"
       << "[train]\nhidden = 4\ndropout = 0\nlearning_rate = 0.01\n"
       << "batch_size = 60\nweight_l2 = 0\nranef_l2 = 0\nseed = 7\n"
       << "max_epochs = 15\n"
       << "[synth]\nn_predictors = 2\nnoise_sd = 0.05\nn_events = 120\n"
       << "seed = 12\nkernels = exponential:1:1, exponential:0.5:2\n"
       << "[query]\npredictor = x1\npredictor2 = x2\nhorizon = 2\n"
       << "points = 11\nn_samples = 1\ndelay = 0.5\nvalue_span = 1\n"
       << "value_points = 5\n";
    const std::string path = dir + "/run.ini";
    write_file(path, ss.str());
    const RunConfig cfg = load_run_config(path);
    REQUIRE(cmd_synth(cfg, path) == 0);
    REQUIRE(cmd_fit(cfg, path) == 0);
    const std::vector<std::string> model = {dir + "/model.ckpt"};

    REQUIRE(cmd_irf(cfg, path, model, "surface") == 0);
    const std::string surface = slurp(dir + "/irf_surface.csv");
    CHECK(line_count(surface) == 1 + 5 * 11);
    CHECK(surface.rfind("value,delay,statistic,delta\n", 0) == 0);

    REQUIRE(cmd_irf(cfg, path, model, "interaction") == 0);
    const std::string inter = slurp(dir + "/irf_interaction.csv");
    CHECK(line_count(inter) == 1 + 5 * 5);
    CHECK(inter.rfind("x1,x2,statistic,delta\n", 0) == 0);

    REQUIRE(cmd_irf(cfg, path, model, "slice") == 0);
    const std::string slice = slurp(dir + "/irf_slice.csv");
    CHECK(line_count(slice) == 1 + 11);
    CHECK(slice.rfind("timestamp,statistic,estimate,lower,upper\n", 0) == 0);

    CHECK_THROWS_AS(cmd_irf(cfg, path, model, "contour"), ConfigError);
    RunConfig nop = cfg;
    nop.query_predictor = "x9";
    CHECK_THROWS_AS(cmd_irf(nop, path, model, "curve"), ConfigError);
}

TEST_CASE("corrupt checkpoints are data errors") {
    const std::string dir = scratch("corrupt");
    const std::string path = dir + "/run.ini";
    write_file(path, base_config(dir));
    const RunConfig cfg = load_run_config(path);
    REQUIRE(cmd_synth(cfg, path) == 0);
    write_file(dir + "/junk.ckpt", "not a checkpoint");
    CHECK_THROWS_AS(cmd_eval(cfg, path, dir + "/junk.ckpt", "test"),
                    DataError);
    CHECK_THROWS_AS(cmd_eval(cfg, path, dir + "/model.ckpt", "nowhere"),
                    ConfigError);
}

// ---------------------------------------------------------------------------
// Subprocess checks against the installed binary (CTIRF_BIN from ctest).
// ---------------------------------------------------------------------------

namespace {

int run_cli(const std::string& args) {
    const char* bin = std::getenv("CTIRF_BIN");
    REQUIRE(bin != nullptr);
    const int status =
        std::system((std::string(bin) + " " + args + " >/dev/null 2>&1").c_str());
    REQUIRE(status != -1);
    return WEXITSTATUS(status);
}

}  // namespace

TEST_CASE("binary exit codes follow the error taxonomy") {
    if (!std::getenv("CTIRF_BIN")) {
        SUCCEED("CTIRF_BIN not set; binary checks skipped");
        return;
    }
    const std::string dir = scratch("exitcodes");
    const std::string path = dir + "/run.ini";
    write_file(path, base_config(dir, 15));

    CHECK(run_cli("--help") == 0);
    CHECK(run_cli("") == 2);                         // no subcommand
    CHECK(run_cli("fit") == 2);                      // missing --config
    CHECK(run_cli("synth -c " + dir + "/absent.ini") == 2);
    CHECK(run_cli("fit -c " + path) == 2);           // inputs not created yet

    CHECK(run_cli("synth -c " + path) == 0);
    CHECK(run_cli("fit -c " + path) == 0);
    CHECK(run_cli("irf -c " + path + " -m " + dir + "/model.ckpt") == 0);
    CHECK(line_count(slurp(dir + "/irf_curve.csv")) == 102);
    CHECK(run_cli("eval -c " + path + " -m " + dir + "/model.ckpt") == 0);

    // malformed CSV cell -> data error
    write_file(dir + "/events.csv",
               "series_id,time,x1\ns,0,1\ns,0.5,oops\n");
    CHECK(run_cli("fit -c " + path) == 3);

    // NaN responses spike every batch until the trainer gives up
    CHECK(run_cli("synth -c " + path) == 0);  // restore clean events
    std::string nan_rows = "series_id,time,y\n";
    for (int i = 0; i < 40; ++i)
        nan_rows += "s," + std::to_string(0.2 * i) + ",nan\n";
    write_file(dir + "/responses.csv", nan_rows);
    CHECK(run_cli("fit -c " + path) == 4);
}
