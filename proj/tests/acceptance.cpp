// Acceptance suite: one test per criterion, one printed PASS/FAIL line each.
// Run directly or via ctest (-R acceptance).

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "mixcache/cli.hpp"
#include "mixcache/controller.hpp"
#include "mixcache/model.hpp"
#include "mixcache/profiler.hpp"
#include "mixcache/sampler.hpp"
#include "mixcache/serialization.hpp"
#include "mixcache/tensor.hpp"
#include "reference_mixcache.hpp"
#include "test_support.hpp"

using namespace mixcache;
namespace fs = std::filesystem;
using testsupport::make_flat_profile;
using testsupport::make_synthetic_profile;
using testsupport::run_harness;

namespace {

// Quality floor for the desk-scale end-to-end check, derived once from the
// paired-seed calibration recorded in tests/data/calibration_e2e.json.
constexpr double kPsnrFloorDb = 25.0;
constexpr double kMinEfficiencySkip = 0.30;

// Independent per-mode cost recount: Full = 2L, Step = 0, Cfg = L,
// Block(i) = L - i - 1.
long long recount_block_forwards(const GenerationResult& run, int num_blocks) {
    long long total = 0;
    for (const TimestepTrace& rec : run.trace) {
        switch (rec.mode.kind) {
            case CacheMode::Kind::Full: total += 2 * num_blocks; break;
            case CacheMode::Kind::Step: break;
            case CacheMode::Kind::Cfg: total += num_blocks; break;
            case CacheMode::Kind::Block: total += num_blocks - rec.mode.block_index - 1; break;
        }
    }
    return total;
}

int g_ledger_checked_runs = 0;

// Every end-to-end run in this suite goes through here, so ledger
// conservation is enforced globally, not just in criterion 4.
template <typename Model, typename Controller>
GenerationResult checked_generate(const Model& model, const DiffusionSchedule& schedule,
                                  const GuidanceConfig& guidance, Controller* controller,
                                  std::uint64_t noise_seed) {
    GenerationResult run = generate(model, schedule, guidance, controller, noise_seed);
    EXPECT_EQ(run.compute_ledger.executed, recount_block_forwards(run, model.num_blocks()));
    EXPECT_LE(run.compute_ledger.executed, run.compute_ledger.baseline);
    ++g_ledger_checked_runs;
    return run;
}

template <typename Model>
GenerationResult checked_generate(const Model& model, const DiffusionSchedule& schedule,
                                  const GuidanceConfig& guidance, std::uint64_t noise_seed) {
    detail::NoControllerTag* none = nullptr;
    return checked_generate(model, schedule, guidance, none, noise_seed);
}

struct ToyBundle {
    RunConfig preset;
    ToyDiT model;
    DiffusionSchedule schedule;
    ProfileArtifact profile;
};

const ToyBundle& toy_bundle() {
    static const ToyBundle bundle = [] {
        RunConfig preset = preset_config("toy-default");
        ToyDiT model = build_model(preset.model);
        DiffusionSchedule schedule =
            build_schedule(preset.schedule.total_steps, preset.schedule.beta_min, preset.schedule.beta_max);
        ProfileArtifact profile = resolve_profile(preset);
        return ToyBundle{std::move(preset), std::move(model), std::move(schedule), std::move(profile)};
    }();
    return bundle;
}

GuidanceConfig toy_guidance(std::uint64_t prompt_seed) {
    const ToyBundle& toy = toy_bundle();
    return make_guidance(toy.preset.guidance_scale,
                         prompt_conditioning(toy.preset.model.cond_dim, prompt_seed),
                         toy.preset.model.cond_dim);
}

std::string read_file(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    EXPECT_TRUE(is) << "missing " << path;
    std::ostringstream buf;
    buf << is.rdbuf();
    return buf.str();
}

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

}  // namespace

// Criterion 1: the interval policy reproduces the band table exactly on a
// 9-point grid straddling both thresholds, in both modes.
TEST(Acceptance, Criterion01_PolicyTableExactness) {
    ControllerConfig cfg;
    cfg.delta1 = 0.05;
    cfg.delta2 = 0.1;
    cfg.block_candidates = {3, 6, 9};
    const std::vector<double> grid{0.02, 0.049, 0.05, 0.051, 0.07, 0.099, 0.1, 0.11, 0.2};
    const std::vector<int> acc{4, 4, 3, 3, 3, 3, 2, 2, 2};
    const std::vector<int> effi{5, 5, 4, 4, 4, 4, 3, 3, 3};
    for (std::size_t i = 0; i < grid.size(); ++i) {
        cfg.interval_mode = IntervalMode::Accuracy;
        EXPECT_EQ(scale_interval(grid[i], cfg), acc[i]) << "accuracy d_full=" << grid[i];
        cfg.interval_mode = IntervalMode::Efficiency;
        EXPECT_EQ(scale_interval(grid[i], cfg), effi[i]) << "efficiency d_full=" << grid[i];
    }
}

// Criterion 2: for 25 random configurations on the desk-scale model, the
// controller's mode/N/cnt sequence matches the independent straight-line
// transcription of the policy, step for step.
TEST(Acceptance, Criterion02_AlgorithmOracleEquivalence) {
    std::uint64_t state = 424242;
    auto uniform = [&state]() {
        state = detail::splitmix64(state);
        return detail::u64_to_unit(state);
    };

    for (int i = 0; i < 25; ++i) {
        ModelConfig model_config{12, 64, 64, 32, 1000 + static_cast<std::uint64_t>(i)};
        const ToyDiT model = build_model(model_config);
        const DiffusionSchedule schedule = build_schedule(50);
        const GuidanceConfig guidance =
            make_guidance(3.0, prompt_conditioning(32, 300 + i), 32);

        ControllerConfig cfg;
        cfg.theta = 0.02 + 0.23 * uniform();
        cfg.delta1 = 0.02 + 0.07 * uniform();
        cfg.delta2 = cfg.delta1 + 0.01 + 0.07 * uniform();
        cfg.interval_mode = i % 2 == 0 ? IntervalMode::Efficiency : IntervalMode::Accuracy;
        cfg.penalty = 5.0;
        cfg.block_candidates = {3, 6, 9};
        cfg.guidance_scale = 3.0;
        const ProfileArtifact profile = make_synthetic_profile(cfg.block_candidates, 50, 7000 + i);
        const std::uint64_t noise_seed = 5000 + i;

        CacheController controller(cfg, profile);
        const GenerationResult run = checked_generate(model, schedule, guidance, &controller, noise_seed);
        const auto reference = testsupport::reference_run(model, schedule, guidance, cfg, profile, noise_seed);

        ASSERT_EQ(run.trace.size(), reference.size());
        for (std::size_t k = 0; k < reference.size(); ++k) {
            ASSERT_EQ(run.trace[k].mode.key(), reference[k].mode) << "config " << i << " step " << k;
            ASSERT_EQ(run.trace[k].interval_after, reference[k].n_after) << "config " << i << " step " << k;
            ASSERT_EQ(run.trace[k].cnt_after, reference[k].cnt_after) << "config " << i << " step " << k;
            ASSERT_EQ(run.trace[k].block_forwards, reference[k].block_forwards)
                << "config " << i << " step " << k;
        }
    }
}

// Criterion 3: the three cache application paths are exact — bitwise reuse
// for step caching, bitwise conditional output at g=0 for cfg caching, and
// bitwise full-conditional equality for block caching fed the true
// activation.
TEST(Acceptance, Criterion03_CacheApplicationExactness) {
    const ToyBundle& toy = toy_bundle();
    const int L = toy.model.num_blocks();

    // (a) Step cache: bitwise-previous output, zero block forwards.
    {
        ControllerConfig cfg = toy.preset.controller;
        cfg.theta = 1e9;
        CacheController controller(cfg, make_flat_profile(cfg.block_candidates, 50, 1e-6, 1e3, 1e3));
        const GuidanceConfig guidance = toy_guidance(41);
        const auto steps = run_harness(toy.model, toy.schedule, guidance, controller, 601);
        int checked = 0;
        for (std::size_t k = 1; k < steps.size() && checked < 10; ++k) {
            if (steps[k].rec.mode == CacheMode::step()) {
                EXPECT_TRUE(bitwise_equal(steps[k].eps, steps[k - 1].eps));
                EXPECT_EQ(steps[k].rec.block_forwards, 0);
                ++checked;
            }
        }
        EXPECT_EQ(checked, 10);
    }

    // (b) Cfg cache at g = 0 equals the pure conditional output.
    {
        ControllerConfig cfg = toy.preset.controller;
        cfg.theta = 1e9;
        cfg.guidance_scale = 0.0;
        CacheController controller(cfg, make_flat_profile(cfg.block_candidates, 50, 1e3, 1e-6, 1e3));
        const GuidanceConfig guidance =
            make_guidance(0.0, prompt_conditioning(toy.preset.model.cond_dim, 42), toy.preset.model.cond_dim);
        const auto steps = run_harness(toy.model, toy.schedule, guidance, controller, 602);
        int checked = 0;
        for (std::size_t k = 0; k < steps.size() && checked < 10; ++k) {
            if (steps[k].rec.mode == CacheMode::cfg()) {
                const int t = toy.schedule.total_steps - static_cast<int>(k);
                const Tensor cond_only = toy.model.forward(steps[k].x_before, t, guidance.cond).output;
                EXPECT_TRUE(bitwise_equal(steps[k].eps, cond_only));
                EXPECT_EQ(steps[k].rec.block_forwards, L);
                ++checked;
            }
        }
        EXPECT_EQ(checked, 10);
    }

    // (c) Block cache fed the true block-i activation reproduces the full
    // conditional forward bitwise.
    {
        const GuidanceConfig guidance = toy_guidance(43);
        int checked = 0;
        for (std::uint64_t seed = 701; checked < 10; ++seed) {
            for (int candidate : toy.preset.controller.block_candidates) {
                if (checked >= 10) {
                    break;
                }
                ControllerConfig cfg = toy.preset.controller;
                cfg.theta = 1e9;
                CacheController controller(cfg, make_synthetic_profile(cfg.block_candidates, 50, seed));
                Tensor x = gaussian_like(toy.model.latent_shape(), 0.0, 1.0, seed);
                const int T = toy.schedule.total_steps;
                for (int idx = 0; idx < 2; ++idx) {
                    auto stepped = controller.step(toy.model, toy.schedule, guidance, x, idx);
                    x = phi_step(toy.schedule, x, T - idx, stepped.first);
                }
                ASSERT_EQ(controller.state().phase, Phase::CacheEnabled);
                const int t = T - 2;
                const ForwardResult truth = toy.model.forward(x, t, guidance.cond, 0, {candidate});
                controller.state().block_cache[candidate] = truth.captured.at(candidate);
                controller.state().next_mode = CacheMode::block(candidate);
                const Tensor delta_before = controller.state().delta_cfg;
                auto stepped = controller.step(toy.model, toy.schedule, guidance, x, 2);
                ASSERT_EQ(stepped.second.mode, CacheMode::block(candidate));
                const Tensor expected =
                    cfg_combine(truth.output, add(truth.output, delta_before), guidance.scale);
                EXPECT_TRUE(bitwise_equal(stepped.first, expected)) << "candidate " << candidate;
                EXPECT_EQ(stepped.second.block_forwards, L - candidate - 1);
                ++checked;
            }
        }
    }
}

// Criterion 4: executed block-forwards equal the per-mode cost sum recounted
// independently from the trace. (checked_generate applies the same recount
// to every run this suite makes; here a dedicated sweep over modes.)
TEST(Acceptance, Criterion04_ComputeLedgerConservation) {
    const ToyBundle& toy = toy_bundle();
    const GuidanceConfig guidance = toy_guidance(44);

    for (IntervalMode mode : {IntervalMode::Efficiency, IntervalMode::Accuracy}) {
        ControllerConfig cfg = toy.preset.controller;
        cfg.interval_mode = mode;
        CacheController controller(cfg, toy.profile);
        const GenerationResult run = checked_generate(toy.model, toy.schedule, guidance, &controller, 888);
        EXPECT_EQ(run.compute_ledger.baseline,
                  static_cast<long long>(toy.schedule.total_steps) * 2 * toy.model.num_blocks());
        EXPECT_LT(run.compute_ledger.executed, run.compute_ledger.baseline);
    }
    const GenerationResult plain = checked_generate(toy.model, toy.schedule, guidance, 888);
    EXPECT_EQ(plain.compute_ledger.executed, plain.compute_ledger.baseline);
    EXPECT_GE(g_ledger_checked_runs, 3);
}

// Criterion 5: on the desk-scale preset with paired seeds, efficiency mode
// reaches the skip floor at acceptable quality, and accuracy mode trades
// skip for quality on at least 4 of 5 seeds.
TEST(Acceptance, Criterion05_DeskScaleQualityEfficiency) {
    // The pinned floor must match the calibration record shipped in-repo.
    const nlohmann::json calibration =
        nlohmann::json::parse(read_file(fs::path(MIXCACHE_TEST_DATA_DIR) / "calibration_e2e.json"));
    ASSERT_DOUBLE_EQ(calibration.at("psnr_floor_db").get<double>(), kPsnrFloorDb);

    const ToyBundle& toy = toy_bundle();
    const auto noise_seeds = calibration.at("noise_seeds").get<std::vector<std::uint64_t>>();
    const auto prompt_seeds = calibration.at("prompt_seeds").get<std::vector<std::uint64_t>>();
    ASSERT_EQ(noise_seeds.size(), 5u);

    int accuracy_wins = 0;
    for (std::size_t k = 0; k < noise_seeds.size(); ++k) {
        const GuidanceConfig guidance = toy_guidance(prompt_seeds[k]);
        const GenerationResult baseline =
            checked_generate(toy.model, toy.schedule, guidance, noise_seeds[k]);

        ControllerConfig eff_cfg = toy.preset.controller;
        eff_cfg.interval_mode = IntervalMode::Efficiency;
        CacheController eff(eff_cfg, toy.profile);
        const GenerationResult eff_run =
            checked_generate(toy.model, toy.schedule, guidance, &eff, noise_seeds[k]);
        const Report eff_report = build_report(eff_run, &baseline);

        ControllerConfig acc_cfg = toy.preset.controller;
        acc_cfg.interval_mode = IntervalMode::Accuracy;
        CacheController acc(acc_cfg, toy.profile);
        const GenerationResult acc_run =
            checked_generate(toy.model, toy.schedule, guidance, &acc, noise_seeds[k]);
        const Report acc_report = build_report(acc_run, &baseline);

        EXPECT_GE(eff_report.skip_fraction, kMinEfficiencySkip) << "seed " << noise_seeds[k];
        EXPECT_GE(eff_report.psnr_value, kPsnrFloorDb) << "seed " << noise_seeds[k];
        if (acc_report.skip_fraction <= eff_report.skip_fraction &&
            acc_report.psnr_value >= eff_report.psnr_value) {
            ++accuracy_wins;
        }
    }
    EXPECT_GE(accuracy_wins, 4);
}

// Criterion 6: the hybrid controller out-skips the cfg-only arm on identical
// seeds, and single-mode arms emit only their own mode.
TEST(Acceptance, Criterion06_AblationOrdering) {
    const ToyBundle& toy = toy_bundle();
    const GuidanceConfig guidance = toy_guidance(toy.preset.prompt_seed);
    const std::uint64_t noise_seed = toy.preset.noise_seed;

    auto run_arm = [&](bool step, bool cfg_allowed, bool block) {
        ControllerConfig cfg = toy.preset.controller;
        cfg.allow_step = step;
        cfg.allow_cfg = cfg_allowed;
        cfg.allow_block = block;
        CacheController controller(cfg, toy.profile);
        return checked_generate(toy.model, toy.schedule, guidance, &controller, noise_seed);
    };

    const GenerationResult hybrid = run_arm(true, true, true);
    const GenerationResult step_only = run_arm(true, false, false);
    const GenerationResult cfg_only = run_arm(false, true, false);
    const GenerationResult block_only = run_arm(false, false, true);

    auto skip_of = [](const GenerationResult& run) {
        return 1.0 - static_cast<double>(run.compute_ledger.executed) /
                         static_cast<double>(run.compute_ledger.baseline);
    };
    EXPECT_GT(skip_of(hybrid), skip_of(cfg_only));
    // cfg caching still runs the whole conditional stack, so its skip
    // ceiling sits below the block arm's.
    EXPECT_LT(skip_of(cfg_only), skip_of(block_only));

    auto assert_pure = [](const GenerationResult& run, CacheMode::Kind kind) {
        for (const TimestepTrace& rec : run.trace) {
            if (!rec.mode.is_full()) {
                EXPECT_EQ(rec.mode.kind, kind);
            }
        }
    };
    assert_pure(step_only, CacheMode::Kind::Step);
    assert_pure(cfg_only, CacheMode::Kind::Cfg);
    assert_pure(block_only, CacheMode::Kind::Block);
}

// Criterion 7: profiling statistics match hand-computable fixtures exactly,
// and impacts vanish where the method says they must.
TEST(Acceptance, Criterion07_ProfilingStatistics) {
    ProfilingConfig pc;
    pc.num_prompts = 1;
    pc.block_candidates = {3};

    // Constant-mu fixture.
    {
        RedundancyTrace trace;
        trace.total_steps = 10;
        trace.block_candidates = {3};
        for (int s = 0; s < 10; ++s) {
            RedundancyRecord rec;
            rec.prompt_id = 0;
            rec.step = s;
            rec.d_cfg = 0.1;
            if (s > 0) {
                rec.d_step = 0.05;
                rec.mu = 0.37;
                rec.sigma = 1.0;
            }
            trace.records.push_back(rec);
        }
        EXPECT_DOUBLE_EQ(estimate_noise_params(trace, pc).mu_hat, 0.37);
    }

    // Arithmetic-sigma fixture: mean of 10..49 is 29.5.
    {
        RedundancyTrace trace;
        trace.total_steps = 50;
        trace.block_candidates = {3};
        for (int s = 0; s < 50; ++s) {
            RedundancyRecord rec;
            rec.prompt_id = 0;
            rec.step = s;
            rec.d_cfg = 0.1;
            if (s > 0) {
                rec.d_step = 0.05;
                rec.mu = 0.0;
                rec.sigma = static_cast<double>(s);
            }
            trace.records.push_back(rec);
        }
        EXPECT_DOUBLE_EQ(estimate_noise_params(trace, pc).sigma_hat, 29.5);
    }

    // Zero perturbation gives zero impacts at every level; zero guidance
    // cancels the cfg site.
    const ModelConfig small{6, 24, 16, 8, 5};
    const ToyDiT model = build_model(small);
    const DiffusionSchedule schedule = build_schedule(10);
    ProfilingConfig impacts_cfg;
    impacts_cfg.num_prompts = 1;
    impacts_cfg.block_candidates = {1, 3};

    const ImpactTables zeros = measure_impacts(
        model, schedule, make_guidance(2.0, null_conditioning(8), 8), 0.0, 0.0, impacts_cfg);
    EXPECT_EQ(zeros.impact_step, 0.0);
    EXPECT_EQ(zeros.impact_cfg, 0.0);
    for (const auto& [c, row] : zeros.impact_block) {
        for (double v : row) {
            EXPECT_EQ(v, 0.0);
        }
    }

    const ImpactTables no_guidance = measure_impacts(
        model, schedule, make_guidance(0.0, null_conditioning(8), 8), 0.01, 0.05, impacts_cfg);
    EXPECT_EQ(no_guidance.impact_cfg, 0.0);
    EXPECT_GT(no_guidance.impact_step, 0.0);

    // On the desk-scale preset (g = 3) the cfg site outweighs the step site.
    EXPECT_GT(toy_bundle().profile.impact_cfg, toy_bundle().profile.impact_step);
}

// Criterion 8: pooled step-level redundancy decreases then stabilizes —
// trailing-half mean below leading-quarter mean over 5 prompt seeds.
TEST(Acceptance, Criterion08_RedundancyShape) {
    const ToyBundle& toy = toy_bundle();
    ProfilingConfig pc;
    pc.num_prompts = 5;
    pc.block_candidates = toy.preset.controller.block_candidates;
    const GuidanceConfig guidance =
        make_guidance(toy.preset.guidance_scale, null_conditioning(toy.preset.model.cond_dim),
                      toy.preset.model.cond_dim);
    const RedundancyTrace trace = collect_redundancy(toy.model, toy.schedule, guidance, pc);

    const int T = trace.total_steps;
    std::map<int, std::vector<double>> pooled;
    for (const RedundancyRecord& rec : trace.records) {
        if (rec.d_step.has_value()) {
            EXPECT_TRUE(std::isfinite(*rec.d_step));
            EXPECT_GE(*rec.d_step, 0.0);
            pooled[rec.step].push_back(*rec.d_step);
        }
    }
    auto mean_over = [&pooled](int lo, int hi) {
        double sum = 0.0;
        long count = 0;
        for (const auto& [step, values] : pooled) {
            if (step >= lo && step < hi) {
                for (double v : values) {
                    sum += v;
                    ++count;
                }
            }
        }
        return sum / static_cast<double>(count);
    };
    const double leading_quarter = mean_over(0, T / 4);
    const double trailing_half = mean_over(T / 2, T);
    EXPECT_LT(trailing_half, leading_quarter);
}

// Criterion 9: rerunning every command with identical configuration yields
// byte-identical artifacts and traces.
TEST(Acceptance, Criterion09_CommandDeterminism) {
    RunConfig config = preset_config("toy-default");
    std::ostringstream log;

    const fs::path prof_a = fresh_dir("mixcache_accept_prof_a");
    const fs::path prof_b = fresh_dir("mixcache_accept_prof_b");
    config.output_dir = prof_a.string();
    cmd_profile(config, log);
    config.output_dir = prof_b.string();
    cmd_profile(config, log);
    EXPECT_EQ(read_file(prof_a / "profile.json"), read_file(prof_b / "profile.json"));
    EXPECT_EQ(read_file(prof_a / "redundancy.jsonl"), read_file(prof_b / "redundancy.jsonl"));

    // generate / ablate consume the profile artifact from disk.
    config.profile = (prof_a / "profile.json").string();

    const fs::path gen_a = fresh_dir("mixcache_accept_gen_a");
    const fs::path gen_b = fresh_dir("mixcache_accept_gen_b");
    config.output_dir = gen_a.string();
    cmd_generate(config, true, log);
    config.output_dir = gen_b.string();
    cmd_generate(config, true, log);
    for (const std::string name : {"latent.mxt", "baseline_latent.mxt", "trace.jsonl", "report.json"}) {
        EXPECT_EQ(read_file(gen_a / name), read_file(gen_b / name)) << name;
    }

    const fs::path abl_a = fresh_dir("mixcache_accept_abl_a");
    const fs::path abl_b = fresh_dir("mixcache_accept_abl_b");
    config.output_dir = abl_a.string();
    cmd_ablate(config, log);
    config.output_dir = abl_b.string();
    cmd_ablate(config, log);
    EXPECT_EQ(read_file(abl_a / "ablation.json"), read_file(abl_b / "ablation.json"));
    EXPECT_EQ(read_file(abl_a / "ablation.tsv"), read_file(abl_b / "ablation.tsv"));
    for (const std::string arm : {"hybrid_n4", "step_only", "cfg_only", "block_only", "mixcache"}) {
        EXPECT_EQ(read_file(abl_a / ("trace_" + arm + ".jsonl")),
                  read_file(abl_b / ("trace_" + arm + ".jsonl")))
            << arm;
    }

    const fs::path rep_a = fresh_dir("mixcache_accept_rep_a");
    const fs::path rep_b = fresh_dir("mixcache_accept_rep_b");
    std::ostringstream rep_log_a, rep_log_b;
    cmd_report((gen_a / "trace.jsonl").string(), rep_a.string(), rep_log_a);
    cmd_report((gen_a / "trace.jsonl").string(), rep_b.string(), rep_log_b);
    EXPECT_EQ(rep_log_a.str(), rep_log_b.str());
    for (const std::string name : {"d_series.tsv", "p_series.tsv", "mode_timeline.tsv"}) {
        EXPECT_EQ(read_file(rep_a / name), read_file(rep_b / name)) << name;
    }

    for (const fs::path& dir : {prof_a, prof_b, gen_a, gen_b, abl_a, abl_b, rep_a, rep_b}) {
        fs::remove_all(dir);
    }
}

// Criterion 10: condensed re-verification of every module's invariant and
// property section (the full-depth versions run in the per-module suites).
TEST(Acceptance, Criterion10_PropertySuites) {
    // tensor-core: scale invariance, self distance, antisymmetric stats,
    // reproducible sampling, symmetric quality metrics.
    {
        const Tensor a = gaussian_like(Shape{64}, 0.0, 1.0, 1);
        const Tensor b = gaussian_like(Shape{64}, 0.0, 1.0, 2);
        EXPECT_NEAR(relative_l1(scaled(a, -2.5), scaled(b, -2.5)), relative_l1(a, b), 1e-12);
        EXPECT_EQ(relative_l1(b, b), 0.0);
        EXPECT_DOUBLE_EQ(diff_stats(a, b).mu, -diff_stats(b, a).mu);
        EXPECT_DOUBLE_EQ(diff_stats(a, b).sigma, diff_stats(b, a).sigma);
        EXPECT_TRUE(bitwise_equal(gaussian_like(Shape{32}, 0.1, 0.2, 9), gaussian_like(Shape{32}, 0.1, 0.2, 9)));
        EXPECT_DOUBLE_EQ(psnr(a, b, 1.0), psnr(b, a, 1.0));
        EXPECT_DOUBLE_EQ(ssim(a, b), ssim(b, a));
    }

    // toy-dit: composition splitting on the desk-scale model plus
    // conditioning and timestep sensitivity.
    {
        const ToyBundle& toy = toy_bundle();
        const Tensor x = gaussian_like(toy.model.latent_shape(), 0.0, 1.0, 33);
        const Conditioning cond = prompt_conditioning(32, 34);
        std::vector<int> all_blocks;
        for (int i = 0; i < toy.model.num_blocks(); ++i) {
            all_blocks.push_back(i);
        }
        const ForwardResult full = toy.model.forward(x, 20, cond, 0, all_blocks);
        for (int i = 0; i < toy.model.num_blocks(); ++i) {
            EXPECT_TRUE(bitwise_equal(toy.model.forward(full.captured.at(i), 20, cond, i + 1).output,
                                      full.output));
        }
        EXPECT_GT(relative_l1(full.output, toy.model.forward(x, 20, null_conditioning(32)).output), 0.0);
        EXPECT_GT(relative_l1(full.output, toy.model.forward(x, 21, cond).output), 0.0);
    }

    // sampler: determinism, schedule consistency, oracle-noise recovery.
    {
        const DiffusionSchedule schedule = build_schedule(50);
        long double product = 1.0L;
        for (int t = 1; t <= 50; ++t) {
            product *= (1.0L - (1e-4L + (2e-2L - 1e-4L) * (t - 1) / 49.0L));
            EXPECT_NEAR(schedule.alpha_bar[t], static_cast<double>(product), 1e-12);
        }

        const ModelConfig small{4, 12, 8, 4, 1};
        const ToyDiT model = build_model(small);
        const GuidanceConfig guidance = make_guidance(1.5, prompt_conditioning(4, 2), 4);
        const DiffusionSchedule short_schedule = build_schedule(8);
        const GenerationResult r1 = checked_generate(model, short_schedule, guidance, 5);
        const GenerationResult r2 = checked_generate(model, short_schedule, guidance, 5);
        EXPECT_TRUE(bitwise_equal(r1.final_latent, r2.final_latent));
    }

    // cache-controller: warm-up purity, interval discipline, penalty
    // localization, and full-step refresh on a short controlled run.
    {
        const ModelConfig small{6, 24, 16, 8, 5};
        const ToyDiT model = build_model(small);
        const DiffusionSchedule schedule = build_schedule(25);
        ControllerConfig cfg;
        cfg.theta = 1e9;
        cfg.block_candidates = {1, 3};
        cfg.guidance_scale = 2.0;
        const ProfileArtifact profile = make_flat_profile(cfg.block_candidates, 25, 0.4, 0.6, 0.5);
        CacheController controller(cfg, profile);
        const GuidanceConfig guidance = make_guidance(2.0, prompt_conditioning(8, 3), 8);
        const auto steps = run_harness(model, schedule, guidance, controller, 12);

        std::size_t anchor = 0;
        while (anchor < steps.size() && steps[anchor].rec.p_values.empty()) {
            EXPECT_TRUE(steps[anchor].rec.mode.is_full());  // warm-up purity
            ++anchor;
        }
        ASSERT_LT(anchor, steps.size());
        int expected_gap = steps[anchor].rec.interval_after - 1;
        int cached_seen = 0;
        std::map<std::string, double> merged;
        for (std::size_t k = 0; k <= anchor; ++k) {
            for (const auto& [key, value] : steps[k].rec.d_values) {
                merged[key] = value;
            }
        }
        for (std::size_t k = anchor + 1; k < steps.size(); ++k) {
            const TimestepTrace& rec = steps[k].rec;
            for (const auto& [key, value] : rec.d_values) {
                merged[key] = value;
            }
            if (rec.mode.is_full()) {
                EXPECT_EQ(cached_seen, expected_gap);  // interval discipline
                EXPECT_EQ(rec.d_values.size(), 2 + cfg.block_candidates.size());  // full refresh
                expected_gap = rec.interval_after - 1;
                cached_seen = 0;
            } else {
                ++cached_seen;
            }
            for (const auto& [key, p] : rec.p_values) {  // penalty localization
                const double impact = key == "step" ? 0.4 : (key == "cfg" ? 0.6 : 0.5);
                const double base = merged.at(key) * impact;
                EXPECT_DOUBLE_EQ(p, key == rec.mode.key() ? base * cfg.penalty : base);
            }
        }
    }

    // profiler: perturbation-site isolation and profile determinism.
    {
        const ModelConfig small{6, 24, 16, 8, 5};
        const ToyDiT model = build_model(small);
        const DiffusionSchedule schedule = build_schedule(6);
        const GuidanceConfig guidance = make_guidance(2.0, null_conditioning(8), 8);
        ProfilingConfig pc;
        pc.num_prompts = 2;
        pc.block_candidates = {1, 3};

        const ImpactTables plain = measure_impacts(model, schedule, guidance, 0.01, 0.05, pc);
        const EtaSource base_eta = gaussian_eta_source(0.01, 0.05, pc.perturbation_seed);
        const EtaSource muted = [&base_eta](PerturbSite site, int candidate, int prompt, int step,
                                            const Shape& shape) {
            if (site == PerturbSite::Cfg) {
                return Tensor{Shape(shape)};
            }
            return base_eta(site, candidate, prompt, step, shape);
        };
        const ImpactTables isolated = measure_impacts(model, schedule, guidance, 0.01, 0.05, pc, &muted);
        EXPECT_EQ(isolated.impact_cfg, 0.0);
        EXPECT_EQ(isolated.impact_step, plain.impact_step);

        const ProfilingOutcome o1 = run_profiling(model, schedule, guidance, pc);
        const ProfilingOutcome o2 = run_profiling(model, schedule, guidance, pc);
        EXPECT_EQ(profile_to_json(o1.artifact).dump(), profile_to_json(o2.artifact).dump());
    }

    // cli: config round-trip equivalence.
    {
        const RunConfig preset = preset_config("toy-default");
        const nlohmann::json doc = run_config_to_json(preset);
        EXPECT_EQ(run_config_to_json(run_config_from_json(doc)), doc);
    }
}

namespace {

class AcceptancePrinter : public ::testing::EmptyTestEventListener {
    void OnTestEnd(const ::testing::TestInfo& info) override {
        std::printf("[ACCEPTANCE] %s: %s\n", info.name(), info.result()->Passed() ? "PASS" : "FAIL");
        std::fflush(stdout);
    }
};

}  // namespace

int main(int argc, char** argv) {
    ::testing::InitGoogleTest(&argc, argv);
    ::testing::UnitTest::GetInstance()->listeners().Append(new AcceptancePrinter);
    return RUN_ALL_TESTS();
}
