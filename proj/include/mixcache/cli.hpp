#pragma once

// Run configuration (JSON), named presets, report building, and the four
// command entry points used by the mixcache binary: profile, generate,
// ablate, report. Commands throw on error; the binary maps that to a
// nonzero exit status.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "mixcache/controller.hpp"
#include "mixcache/model.hpp"
#include "mixcache/profiler.hpp"
#include "mixcache/sampler.hpp"
#include "mixcache/serialization.hpp"
#include "mixcache/tensor.hpp"

namespace mixcache {

struct ScheduleConfig {
    int total_steps = 50;
    double beta_min = 1e-4;
    double beta_max = 2e-2;
};

struct RunConfig {
    ModelConfig model;
    ScheduleConfig schedule;
    double guidance_scale = 3.0;
    bool controller_enabled = true;
    ControllerConfig controller;
    std::string profile = "builtin:toy-default";  // artifact path or "builtin:<preset>"
    std::uint64_t noise_seed = 2024;
    std::uint64_t prompt_seed = 7;
    std::string output_dir = "out";
    ProfilingConfig profiling;

    void validate() const {
        model.validate();
        if (schedule.total_steps < 2) {
            throw std::invalid_argument("RunConfig: schedule.steps must be >= 2");
        }
        if (guidance_scale < 0.0) {
            throw std::invalid_argument("RunConfig: guidance_scale must be >= 0");
        }
        if (controller_enabled) {
            controller.validate();
            for (int c : controller.block_candidates) {
                if (c >= model.num_blocks - 1) {
                    throw std::invalid_argument("RunConfig: block candidate " + std::to_string(c) +
                                                " invalid for num_blocks=" + std::to_string(model.num_blocks));
                }
            }
        }
        profiling.validate();
    }
};

inline nlohmann::json run_config_to_json(const RunConfig& config) {
    nlohmann::json doc;
    doc["model"] = {
        {"num_blocks", config.model.num_blocks},
        {"hidden_dim", config.model.hidden_dim},
        {"seq_len", config.model.seq_len},
        {"cond_dim", config.model.cond_dim},
        {"init_seed", config.model.init_seed},
    };
    doc["schedule"] = {
        {"steps", config.schedule.total_steps},
        {"beta_min", config.schedule.beta_min},
        {"beta_max", config.schedule.beta_max},
    };
    doc["guidance_scale"] = config.guidance_scale;
    if (config.controller_enabled) {
        std::vector<std::string> allowed;
        if (config.controller.allow_step) allowed.push_back("step");
        if (config.controller.allow_cfg) allowed.push_back("cfg");
        if (config.controller.allow_block) allowed.push_back("block");
        doc["controller"] = {
            {"interval_mode", interval_mode_name(config.controller.interval_mode)},
            {"theta", config.controller.theta},
            {"delta1", config.controller.delta1},
            {"delta2", config.controller.delta2},
            {"penalty", config.controller.penalty},
            {"block_candidates", config.controller.block_candidates},
            {"fixed_interval", config.controller.fixed_interval},
            {"allowed", allowed},
        };
    } else {
        doc["controller"] = "none";
    }
    doc["profile"] = config.profile;
    doc["seeds"] = {{"noise", config.noise_seed}, {"prompt", config.prompt_seed}};
    doc["output_dir"] = config.output_dir;
    doc["profiling"] = {
        {"num_prompts", config.profiling.num_prompts},
        {"prompt_seeds", config.profiling.prompt_seeds},
        {"warmup_exclude_fraction", config.profiling.warmup_exclude_fraction},
        {"sigma_window_fraction", config.profiling.sigma_window_fraction},
        {"perturbation_seed", config.profiling.perturbation_seed},
        {"threshold_percentiles", config.profiling.threshold_percentiles},
    };
    return doc;
}

inline RunConfig run_config_from_json(const nlohmann::json& doc) {
    RunConfig config;
    const auto& model = doc.at("model");
    config.model.num_blocks = model.at("num_blocks").get<int>();
    config.model.hidden_dim = model.at("hidden_dim").get<int>();
    config.model.seq_len = model.at("seq_len").get<int>();
    config.model.cond_dim = model.at("cond_dim").get<int>();
    config.model.init_seed = model.at("init_seed").get<std::uint64_t>();

    const auto& schedule = doc.at("schedule");
    config.schedule.total_steps = schedule.at("steps").get<int>();
    config.schedule.beta_min = schedule.at("beta_min").get<double>();
    config.schedule.beta_max = schedule.at("beta_max").get<double>();

    config.guidance_scale = doc.at("guidance_scale").get<double>();

    const auto& controller = doc.at("controller");
    if (controller.is_string()) {
        if (controller.get<std::string>() != "none") {
            throw std::invalid_argument("RunConfig: controller must be an object or \"none\"");
        }
        config.controller_enabled = false;
    } else {
        config.controller_enabled = true;
        config.controller.interval_mode = parse_interval_mode(controller.at("interval_mode").get<std::string>());
        config.controller.theta = controller.at("theta").get<double>();
        config.controller.delta1 = controller.at("delta1").get<double>();
        config.controller.delta2 = controller.at("delta2").get<double>();
        config.controller.penalty = controller.value("penalty", 5.0);
        config.controller.block_candidates = controller.at("block_candidates").get<std::vector<int>>();
        config.controller.fixed_interval = controller.value("fixed_interval", 0);
        if (controller.contains("allowed")) {
            config.controller.allow_step = false;
            config.controller.allow_cfg = false;
            config.controller.allow_block = false;
            for (const auto& kind : controller.at("allowed")) {
                const std::string name = kind.get<std::string>();
                if (name == "step") config.controller.allow_step = true;
                else if (name == "cfg") config.controller.allow_cfg = true;
                else if (name == "block") config.controller.allow_block = true;
                else throw std::invalid_argument("RunConfig: unknown cache kind " + name);
            }
        }
    }
    // The controller's guidance mirror always follows the sampler setting.
    config.controller.guidance_scale = config.guidance_scale;

    config.profile = doc.value("profile", std::string("builtin:toy-default"));
    if (doc.contains("seeds")) {
        config.noise_seed = doc.at("seeds").value("noise", config.noise_seed);
        config.prompt_seed = doc.at("seeds").value("prompt", config.prompt_seed);
    }
    config.output_dir = doc.value("output_dir", std::string("out"));

    if (doc.contains("profiling")) {
        const auto& prof = doc.at("profiling");
        config.profiling.num_prompts = prof.value("num_prompts", config.profiling.num_prompts);
        if (prof.contains("prompt_seeds")) {
            config.profiling.prompt_seeds = prof.at("prompt_seeds").get<std::vector<std::uint64_t>>();
        }
        config.profiling.warmup_exclude_fraction =
            prof.value("warmup_exclude_fraction", config.profiling.warmup_exclude_fraction);
        config.profiling.sigma_window_fraction =
            prof.value("sigma_window_fraction", config.profiling.sigma_window_fraction);
        config.profiling.perturbation_seed = prof.value("perturbation_seed", config.profiling.perturbation_seed);
        if (prof.contains("threshold_percentiles")) {
            const auto percentiles = prof.at("threshold_percentiles").get<std::vector<double>>();
            if (percentiles.size() != 3) {
                throw std::invalid_argument("RunConfig: threshold_percentiles must have 3 entries");
            }
            config.profiling.threshold_percentiles = {percentiles[0], percentiles[1], percentiles[2]};
        }
    }
    config.profiling.block_candidates = config.controller.block_candidates;
    config.validate();
    return config;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) {
        throw std::runtime_error("cannot open config " + path);
    }
    nlohmann::json doc;
    try {
        is >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("malformed config " + path + ": " + e.what());
    }
    return run_config_from_json(doc);
}

// Named presets. The desk-scale model is shared; the paper-* presets pin
// the published (theta, delta1, delta2) triples of the base models they
// are named after.
inline RunConfig preset_config(const std::string& name) {
    RunConfig config;
    config.model = ModelConfig{12, 64, 64, 32, 0};
    config.schedule = ScheduleConfig{50, 1e-4, 2e-2};
    config.guidance_scale = 3.0;
    config.controller.interval_mode = IntervalMode::Efficiency;
    config.controller.theta = 0.1;
    config.controller.delta1 = 0.05;
    config.controller.delta2 = 0.1;
    config.controller.penalty = 5.0;
    config.controller.block_candidates = {3, 6, 9};
    config.controller.guidance_scale = config.guidance_scale;
    config.profile = "builtin:" + name;
    config.profiling.num_prompts = 4;
    config.profiling.block_candidates = config.controller.block_candidates;
    config.output_dir = "out";

    if (name == "toy-default" || name == "paper-wan" || name == "paper-hunyuan") {
        // (0.1, 0.05, 0.1): the Wan/HunyuanVideo triple, also the toy default.
        return config;
    }
    if (name == "paper-cogvideox") {
        config.controller.theta = 0.1;
        config.controller.delta1 = 0.3;
        config.controller.delta2 = 0.4;
        return config;
    }
    throw std::invalid_argument("unknown preset: " + name);
}

struct Report {
    double skip_fraction = 0.0;
    long long executed = 0;
    long long baseline = 0;
    std::map<std::string, int> mode_counts;
    std::vector<std::string> mode_timeline;
    bool has_quality = false;
    double psnr_value = 0.0;
    double ssim_value = 0.0;
};

inline Report build_report(const GenerationResult& run, const GenerationResult* baseline_run) {
    Report report;
    report.executed = run.compute_ledger.executed;
    report.baseline = run.compute_ledger.baseline;
    report.skip_fraction =
        1.0 - static_cast<double>(report.executed) / static_cast<double>(report.baseline);
    for (const TimestepTrace& rec : run.trace) {
        report.mode_counts[rec.mode.key()] += 1;
        report.mode_timeline.push_back(rec.mode.key());
    }
    if (baseline_run != nullptr) {
        double peak = 0.0;
        for (double v : run.final_latent.data) {
            peak = std::max(peak, std::fabs(v));
        }
        for (double v : baseline_run->final_latent.data) {
            peak = std::max(peak, std::fabs(v));
        }
        report.has_quality = true;
        if (peak == 0.0) {
            report.psnr_value = std::numeric_limits<double>::infinity();
            report.ssim_value = 1.0;
        } else {
            report.psnr_value = psnr(run.final_latent, baseline_run->final_latent, peak);
            report.ssim_value = ssim(run.final_latent, baseline_run->final_latent, peak);
        }
    }
    return report;
}

inline nlohmann::json report_to_json(const Report& report) {
    nlohmann::json doc{
        {"skip_fraction", report.skip_fraction},
        {"executed_block_forwards", report.executed},
        {"baseline_block_forwards", report.baseline},
        {"mode_counts", report.mode_counts},
        {"mode_timeline", report.mode_timeline},
    };
    if (report.has_quality) {
        if (std::isfinite(report.psnr_value)) {
            doc["psnr_vs_baseline"] = report.psnr_value;
        } else {
            doc["psnr_vs_baseline"] = "inf";
        }
        doc["ssim_vs_baseline"] = report.ssim_value;
    }
    return doc;
}

// Resolve the profile artifact for a run: either a file on disk or a
// deterministic on-the-fly profiling pass using the named preset's
// profiling settings against this run's model and schedule.
inline ProfileArtifact resolve_profile(const RunConfig& config) {
    if (config.profile.rfind("builtin:", 0) == 0) {
        const std::string name = config.profile.substr(8);
        ProfilingConfig profiling = preset_config(name).profiling;
        profiling.block_candidates = config.controller.block_candidates;
        const ToyDiT model = build_model(config.model);
        const DiffusionSchedule schedule =
            build_schedule(config.schedule.total_steps, config.schedule.beta_min, config.schedule.beta_max);
        const GuidanceConfig guidance =
            make_guidance(config.guidance_scale, null_conditioning(config.model.cond_dim), config.model.cond_dim);
        return run_profiling(model, schedule, guidance, profiling).artifact;
    }
    return load_profile(config.profile);
}

namespace detail {

inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace detail

// profile: write the profile artifact and raw redundancy trace, print the
// estimated parameters, suggested thresholds, and impact summary.
inline void cmd_profile(const RunConfig& config, std::ostream& log) {
    config.validate();
    namespace fs = std::filesystem;
    const ToyDiT model = build_model(config.model);
    const DiffusionSchedule schedule =
        build_schedule(config.schedule.total_steps, config.schedule.beta_min, config.schedule.beta_max);
    const GuidanceConfig guidance =
        make_guidance(config.guidance_scale, null_conditioning(config.model.cond_dim), config.model.cond_dim);
    ProfilingConfig profiling = config.profiling;
    profiling.block_candidates = config.controller.block_candidates;

    const auto started = std::chrono::steady_clock::now();
    const ProfilingOutcome outcome = run_profiling(model, schedule, guidance, profiling);
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

    fs::create_directories(config.output_dir);
    save_profile(outcome.artifact, (fs::path(config.output_dir) / "profile.json").string());
    save_redundancy_jsonl(outcome.trace, (fs::path(config.output_dir) / "redundancy.jsonl").string());

    log << "mu_hat=" << detail::format_double(outcome.artifact.mu_hat)
        << " sigma_hat=" << detail::format_double(outcome.artifact.sigma_hat) << "\n";
    log << "suggested theta=" << detail::format_double(outcome.thresholds.theta)
        << " delta1=" << detail::format_double(outcome.thresholds.delta1)
        << " delta2=" << detail::format_double(outcome.thresholds.delta2) << "\n";
    log << "impact_step=" << detail::format_double(outcome.artifact.impact_step)
        << " impact_cfg=" << detail::format_double(outcome.artifact.impact_cfg) << "\n";
    for (const auto& [candidate, row] : outcome.artifact.impact_block) {
        double mean = 0.0;
        for (double v : row) {
            mean += v;
        }
        mean /= static_cast<double>(row.size());
        log << "impact_block[" << candidate << "] mean=" << detail::format_double(mean) << "\n";
    }
    log << "wall_seconds=" << wall << "\n";
}

// generate: one controlled run (plus an uncached paired run when requested),
// writing the final latent, the per-step trace, and the report.
inline void cmd_generate(const RunConfig& config, bool with_baseline, std::ostream& log) {
    config.validate();
    namespace fs = std::filesystem;
    const ToyDiT model = build_model(config.model);
    const DiffusionSchedule schedule =
        build_schedule(config.schedule.total_steps, config.schedule.beta_min, config.schedule.beta_max);
    const GuidanceConfig guidance = make_guidance(
        config.guidance_scale, prompt_conditioning(config.model.cond_dim, config.prompt_seed),
        config.model.cond_dim);

    const auto started = std::chrono::steady_clock::now();
    GenerationResult run;
    if (config.controller_enabled) {
        ControllerConfig controller_config = config.controller;
        controller_config.guidance_scale = config.guidance_scale;
        CacheController controller(controller_config, resolve_profile(config));
        run = generate(model, schedule, guidance, &controller, config.noise_seed);
    } else {
        run = generate(model, schedule, guidance, config.noise_seed);
    }

    GenerationResult baseline_run;
    const GenerationResult* baseline_ptr = nullptr;
    if (with_baseline && config.controller_enabled) {
        baseline_run = generate(model, schedule, guidance, config.noise_seed);
        baseline_ptr = &baseline_run;
    }
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

    const Report report = build_report(run, baseline_ptr);

    fs::create_directories(config.output_dir);
    save_tensor(run.final_latent, (fs::path(config.output_dir) / "latent.mxt").string());
    save_trace_jsonl(run.trace, (fs::path(config.output_dir) / "trace.jsonl").string());
    if (baseline_ptr != nullptr) {
        save_tensor(baseline_ptr->final_latent, (fs::path(config.output_dir) / "baseline_latent.mxt").string());
    }
    {
        std::ofstream os(fs::path(config.output_dir) / "report.json");
        if (!os) {
            throw std::runtime_error("cannot write report.json");
        }
        os << report_to_json(report).dump(2) << "\n";
    }

    log << "skip_fraction=" << detail::format_double(report.skip_fraction) << " executed=" << report.executed
        << " baseline=" << report.baseline << "\n";
    if (report.has_quality) {
        log << "psnr_vs_baseline=" << detail::format_double(report.psnr_value)
            << " ssim_vs_baseline=" << detail::format_double(report.ssim_value) << "\n";
    }
    log << "wall_seconds=" << wall << "\n";
}

// ablate: the five arms (fixed-N hybrid, the three single-kind arms with
// interval scaling, and the full controller) against one shared uncached
// baseline, same seeds throughout.
inline void cmd_ablate(const RunConfig& config, std::ostream& log) {
    config.validate();
    if (!config.controller_enabled) {
        throw std::invalid_argument("cmd_ablate: controller must be enabled");
    }
    namespace fs = std::filesystem;
    const ToyDiT model = build_model(config.model);
    const DiffusionSchedule schedule =
        build_schedule(config.schedule.total_steps, config.schedule.beta_min, config.schedule.beta_max);
    const GuidanceConfig guidance = make_guidance(
        config.guidance_scale, prompt_conditioning(config.model.cond_dim, config.prompt_seed),
        config.model.cond_dim);
    const ProfileArtifact profile = resolve_profile(config);

    const GenerationResult baseline_run = generate(model, schedule, guidance, config.noise_seed);

    struct Arm {
        std::string name;
        ControllerConfig config;
    };
    std::vector<Arm> arms;
    {
        ControllerConfig base = config.controller;
        base.guidance_scale = config.guidance_scale;

        Arm hybrid_n4{"hybrid_n4", base};
        hybrid_n4.config.fixed_interval = 4;
        arms.push_back(hybrid_n4);

        Arm step_only{"step_only", base};
        step_only.config.allow_cfg = false;
        step_only.config.allow_block = false;
        arms.push_back(step_only);

        Arm cfg_only{"cfg_only", base};
        cfg_only.config.allow_step = false;
        cfg_only.config.allow_block = false;
        arms.push_back(cfg_only);

        Arm block_only{"block_only", base};
        block_only.config.allow_step = false;
        block_only.config.allow_cfg = false;
        arms.push_back(block_only);

        arms.push_back(Arm{"mixcache", base});
    }

    fs::create_directories(config.output_dir);
    nlohmann::json table = nlohmann::json::array();
    std::string tsv = "arm\tskip_fraction\tpsnr\tssim\texecuted\tbaseline\n";
    for (const Arm& arm : arms) {
        CacheController controller(arm.config, profile);
        const GenerationResult run = generate(model, schedule, guidance, &controller, config.noise_seed);
        const Report report = build_report(run, &baseline_run);
        save_trace_jsonl(run.trace, (fs::path(config.output_dir) / ("trace_" + arm.name + ".jsonl")).string());

        nlohmann::json row = report_to_json(report);
        row["arm"] = arm.name;
        table.push_back(row);
        tsv += arm.name + "\t" + detail::format_double(report.skip_fraction) + "\t" +
               detail::format_double(report.psnr_value) + "\t" + detail::format_double(report.ssim_value) +
               "\t" + std::to_string(report.executed) + "\t" + std::to_string(report.baseline) + "\n";
        log << arm.name << ": skip=" << detail::format_double(report.skip_fraction)
            << " psnr=" << detail::format_double(report.psnr_value)
            << " ssim=" << detail::format_double(report.ssim_value) << "\n";
    }
    {
        std::ofstream os(fs::path(config.output_dir) / "ablation.json");
        if (!os) {
            throw std::runtime_error("cannot write ablation.json");
        }
        os << table.dump(2) << "\n";
    }
    {
        std::ofstream os(fs::path(config.output_dir) / "ablation.tsv");
        if (!os) {
            throw std::runtime_error("cannot write ablation.tsv");
        }
        os << tsv;
    }
}

// report: summarize a trace file and emit columnar series for plotting.
inline void cmd_report(const std::string& trace_path, const std::string& output_dir, std::ostream& log) {
    namespace fs = std::filesystem;
    const std::vector<TimestepTrace> trace = load_trace_jsonl(trace_path);
    if (trace.empty()) {
        throw std::runtime_error("cmd_report: trace is empty");
    }
    const std::string out_dir =
        output_dir.empty() ? fs::path(trace_path).parent_path().string() : output_dir;
    fs::create_directories(out_dir.empty() ? "." : out_dir);
    const fs::path out(out_dir.empty() ? "." : out_dir);

    std::map<std::string, int> mode_counts;
    std::vector<std::string> d_keys, p_keys;
    for (const TimestepTrace& rec : trace) {
        mode_counts[rec.mode.key()] += 1;
        for (const auto& [key, _] : rec.d_values) {
            if (std::find(d_keys.begin(), d_keys.end(), key) == d_keys.end()) {
                d_keys.push_back(key);
            }
        }
        for (const auto& [key, _] : rec.p_values) {
            if (std::find(p_keys.begin(), p_keys.end(), key) == p_keys.end()) {
                p_keys.push_back(key);
            }
        }
    }
    std::sort(d_keys.begin(), d_keys.end());
    std::sort(p_keys.begin(), p_keys.end());

    log << "steps=" << trace.size() << "\n";
    log << "mode distribution:\n";
    for (const auto& [key, count] : mode_counts) {
        log << "  " << key << " " << count << "\n";
    }
    log << "interval timeline:";
    for (const TimestepTrace& rec : trace) {
        log << " " << rec.interval_after;
    }
    log << "\n";

    auto series_tsv = [&](const std::vector<std::string>& keys, bool p_values) {
        std::string text = "step";
        for (const std::string& key : keys) {
            text += "\t" + std::string(p_values ? "p_" : "d_") + key;
        }
        if (!p_values) {
            text += "\td_full";
        }
        text += "\n";
        for (const TimestepTrace& rec : trace) {
            text += std::to_string(rec.step_index);
            const auto& values = p_values ? rec.p_values : rec.d_values;
            for (const std::string& key : keys) {
                auto it = values.find(key);
                text += "\t" + (it == values.end() ? std::string("nan") : detail::format_double(it->second));
            }
            if (!p_values) {
                text += "\t" + (rec.d_full ? detail::format_double(*rec.d_full) : std::string("nan"));
            }
            text += "\n";
        }
        return text;
    };

    auto write_file = [&](const std::string& name, const std::string& text) {
        std::ofstream os(out / name);
        if (!os) {
            throw std::runtime_error("cmd_report: cannot write " + name);
        }
        os << text;
    };
    write_file("d_series.tsv", series_tsv(d_keys, false));
    write_file("p_series.tsv", series_tsv(p_keys, true));

    std::string modes = "step\tmode\tn_after\tcnt_after\tblock_forwards\n";
    for (const TimestepTrace& rec : trace) {
        modes += std::to_string(rec.step_index) + "\t" + rec.mode.key() + "\t" +
                 std::to_string(rec.interval_after) + "\t" + std::to_string(rec.cnt_after) + "\t" +
                 std::to_string(rec.block_forwards) + "\n";
    }
    write_file("mode_timeline.tsv", modes);
}

}  // namespace mixcache
