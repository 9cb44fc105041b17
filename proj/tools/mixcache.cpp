// mixcache command-line tool: offline profiling, cached generation, the
// ablation harness, and trace reporting.

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "mixcache/cli.hpp"

namespace {

struct CommonArgs {
    std::string config_path;
    std::string preset;
    std::string output_dir;
    std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "run configuration JSON file");
    cmd->add_option("--preset", args.preset,
                    "built-in preset (toy-default, paper-wan, paper-hunyuan, paper-cogvideox)");
    cmd->add_option("--output", args.output_dir, "output directory override");
    cmd->add_option("--seed", args.seed, "noise seed override");
}

mixcache::RunConfig resolve_config(const CommonArgs& args) {
    mixcache::RunConfig config;
    if (!args.config_path.empty()) {
        config = mixcache::load_run_config(args.config_path);
    } else if (!args.preset.empty()) {
        config = mixcache::preset_config(args.preset);
    } else {
        throw std::invalid_argument("either --config or --preset is required");
    }
    if (!args.output_dir.empty()) {
        config.output_dir = args.output_dir;
    }
    if (args.seed.has_value()) {
        config.noise_seed = *args.seed;
    }
    return config;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"training-free multi-granularity cache controller for a toy diffusion transformer"};
    app.require_subcommand(1);

    CommonArgs profile_args, generate_args, ablate_args;
    bool with_baseline = false;
    std::string trace_path, report_output;

    CLI::App* profile_cmd = app.add_subcommand("profile", "run offline profiling and write the profile artifact");
    add_common(profile_cmd, profile_args);

    CLI::App* generate_cmd = app.add_subcommand("generate", "run one generation with the configured controller");
    add_common(generate_cmd, generate_args);
    generate_cmd->add_flag("--baseline", with_baseline, "also run uncached with identical seeds and report quality");

    CLI::App* ablate_cmd = app.add_subcommand("ablate", "run the ablation arms and write the comparison table");
    add_common(ablate_cmd, ablate_args);

    CLI::App* report_cmd = app.add_subcommand("report", "summarize a trace file and emit plot data");
    report_cmd->add_option("trace", trace_path, "trace.jsonl produced by generate")->required();
    report_cmd->add_option("--output", report_output, "directory for the columnar files");

    CLI11_PARSE(app, argc, argv);

    try {
        if (profile_cmd->parsed()) {
            mixcache::cmd_profile(resolve_config(profile_args), std::cout);
        } else if (generate_cmd->parsed()) {
            mixcache::cmd_generate(resolve_config(generate_args), with_baseline, std::cout);
        } else if (ablate_cmd->parsed()) {
            mixcache::cmd_ablate(resolve_config(ablate_args), std::cout);
        } else if (report_cmd->parsed()) {
            mixcache::cmd_report(trace_path, report_output, std::cout);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
