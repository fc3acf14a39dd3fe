#include <exception>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "probekit/config.hpp"
#include "probekit/kernels.hpp"
#include "probekit/pipeline.hpp"

// exit codes: 0 success, 2 config error, 3 dependency error, 4 numeric failure
int main(int argc, char** argv) {
    probekit::kernels::init_from_env();

    CLI::App app{"probekit: detector-guided generative-boundary exploration pipeline"};
    std::string config_path, stage = "run-all", out_dir, precision;
    long long seed = -1;
    int rounds = 0;
    bool explain = false;
    app.add_option("--config", config_path, "configuration file (key = value with [section] headers)");
    app.add_option("--stage", stage, "pipeline stage to run")
        ->check(CLI::IsMember({"gen-data", "pretrain-generator", "pretrain-variant-generator",
                               "pretrain-detector", "probe", "export-samples", "finetune-detector",
                               "evaluate", "sweep-robustness", "analyze-spectrum", "run-all"}));
    app.add_option("--seed", seed, "override io.seed");
    app.add_option("--out", out_dir, "override io.out_dir");
    app.add_option("--rounds", rounds, "override probe.rounds");
    app.add_option("--precision", precision, "override io.precision")->check(CLI::IsMember({"f32", "f64"}));
    app.add_flag("--explain", explain, "print the stage dependency graph and exit");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    if (explain) {
        std::cout << probekit::pipeline::explain();
        return 0;
    }

    try {
        probekit::config::RunConfig cfg =
            config_path.empty() ? probekit::config::RunConfig{} : probekit::config::parse_file(config_path);
        if (seed >= 0) cfg.io.seed = static_cast<uint64_t>(seed);
        if (!out_dir.empty()) cfg.io.out_dir = out_dir;
        if (rounds > 0) cfg.probe.rounds = rounds;
        if (!precision.empty()) cfg.io.precision = precision;
        cfg.validate();

        std::cout << "run_id: " << cfg.resolved_run_id() << "\n";
        probekit::pipeline::run_stage(cfg, stage);
        std::cout << "stage '" << stage << "' complete; artifacts under "
                  << probekit::pipeline::run_dir(cfg) << "\n";
        return 0;
    } catch (const probekit::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const probekit::DependencyError& e) {
        std::cerr << "dependency error: " << e.what() << "\n";
        return 3;
    } catch (const probekit::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
