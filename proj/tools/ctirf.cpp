// ctirf - command-line driver for the continuous-time impulse response
// toolkit: synthesize data, fit models, evaluate likelihoods, export effect
// queries, and run ensemble comparisons.
#include <CLI11.hpp>
#include <iostream>

#include "ctirf/commands.hpp"

namespace {

struct Args {
    std::string config;
    std::string model;
    std::vector<std::string> models;
    std::vector<std::string> ensemble_a;
    std::vector<std::string> ensemble_b;
    std::string partition = "test";
    std::string kind = "curve";
};

int dispatch(const CLI::App& app, const Args& args) {
    using namespace ctirf;
    const RunConfig cfg = load_run_config(args.config);
    if (app.got_subcommand("synth")) return cmd_synth(cfg, args.config);
    if (app.got_subcommand("fit")) return cmd_fit(cfg, args.config);
    if (app.got_subcommand("eval"))
        return cmd_eval(cfg, args.config, args.model, args.partition);
    if (app.got_subcommand("irf"))
        return cmd_irf(cfg, args.config, args.models, args.kind);
    if (app.got_subcommand("test"))
        return cmd_test(cfg, args.config, args.ensemble_a, args.ensemble_b);
    if (app.got_subcommand("ensemble-fit"))
        return cmd_ensemble_fit(cfg, args.config);
    throw ctirf::ConfigError("no subcommand given");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"continuous-time impulse response fitting"};
    app.require_subcommand(1);
    Args args;

    auto add_config = [&](CLI::App* sub) {
        sub->add_option("-c,--config", args.config, "run configuration file")
            ->required();
    };

    add_config(app.add_subcommand("synth", "generate a synthetic dataset"));
    add_config(app.add_subcommand("fit", "fit one model"));

    auto* eval = app.add_subcommand("eval", "per-response log-likelihoods");
    add_config(eval);
    eval->add_option("-m,--model", args.model, "checkpoint file")->required();
    eval->add_option("-p,--partition", args.partition,
                     "train|exploratory|test|all");

    auto* irf = app.add_subcommand("irf", "export effect-query plot data");
    add_config(irf);
    irf->add_option("-m,--model", args.models, "checkpoint file(s)")
        ->required();
    irf->add_option("-k,--kind", args.kind,
                    "curve|surface|interaction|slice");

    auto* test = app.add_subcommand("test", "paired permutation test");
    add_config(test);
    test->add_option("--ensemble-a", args.ensemble_a,
                     "checkpoints of ensemble A")
        ->required();
    test->add_option("--ensemble-b", args.ensemble_b,
                     "checkpoints of ensemble B")
        ->required();

    add_config(app.add_subcommand("ensemble-fit", "fit an ensemble"));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        // usage problems are config errors; --help stays exit 0
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        return dispatch(app, args);
    } catch (const ctirf::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const ctirf::DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 3;
    } catch (const ctirf::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << '\n';
        return 4;
    } catch (const ctirf::TrainError& e) {
        std::cerr << "training error: " << e.what() << '\n';
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
