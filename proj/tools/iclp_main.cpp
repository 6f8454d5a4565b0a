// iclp: single entry point for the latent-plan pipeline.
//
//   iclp <command> [--config PATH] [--set key=value ...] [--out DIR] [--seed N]
//
// Commands: gen-corpus, distill, train-codec, latentize, finetune, evaluate,
// analyze, ablate, all. Stages are idempotent: re-running with unchanged
// inputs skips the work. Failures leave a machine-readable error.json in the
// output directory and exit nonzero.

#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "iclp/pipeline.hpp"

int main(int argc, char** argv) {
    CLI::App app{"latent-plan reasoning pipeline"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_dir;
    int64_t seed = -1;

    std::string chosen;
    for (const auto& name : iclp::all_commands()) {
        auto* sub = app.add_subcommand(name, "run the '" + name + "' stage");
        sub->add_option("--config", config_path, "pipeline config JSON (defaults used if absent)")
            ->check(CLI::ExistingFile);
        sub->add_option("--set", overrides, "dotted-path override, e.g. codec.K=64")
            ->take_all();
        sub->add_option("--out", out_dir, "output directory (overrides config out_dir)");
        sub->add_option("--seed", seed, "global seed (overrides config seed)");
        sub->callback([&chosen, name] { chosen = name; });
    }

    CLI11_PARSE(app, argc, argv);

    try {
        nlohmann::json j = iclp::PipelineConfig::desk_defaults().to_json();
        if (!config_path.empty()) {
            nlohmann::json user = nlohmann::json::parse(iclp::read_file(config_path));
            iclp::detail::canonicalize_codec_aliases(user);
            iclp::detail::deep_merge(j, user);
        }
        for (const auto& kv : overrides) iclp::apply_override(j, kv);
        if (!out_dir.empty()) j["out_dir"] = out_dir;
        if (seed >= 0) j["seed"] = uint64_t(seed);

        auto cfg = iclp::PipelineConfig::from_json(j);
        iclp::Pipeline pipeline(cfg);
        auto reports = pipeline.run(chosen);
        for (const auto& r : reports)
            std::cerr << "[" << r.stage << "] " << (r.skipped ? "skipped" : "done") << "\n";
        return 0;
    } catch (const iclp::ConfigError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
