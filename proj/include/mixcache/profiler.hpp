#pragma once

// Offline profiling: run a prompt set with full computation, collect the
// three-level redundancy series and difference statistics, estimate the
// Gaussian perturbation parameters, measure per-level accuracy impacts, and
// derive threshold suggestions.

#include <array>
#include <cstdint>
#include <functional>
#include <future>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "mixcache/controller.hpp"
#include "mixcache/model.hpp"
#include "mixcache/sampler.hpp"
#include "mixcache/tensor.hpp"

namespace mixcache {

struct ProfilingConfig {
    int num_prompts = 8;
    std::vector<std::uint64_t> prompt_seeds;  // derived from num_prompts when empty
    double warmup_exclude_fraction = 0.2;     // initial steps left out of sigma-hat and impact means
    double sigma_window_fraction = 0.8;       // trailing steps averaged for sigma-hat
    std::uint64_t perturbation_seed = 12345;
    std::array<double, 3> threshold_percentiles = {60.0, 30.0, 70.0};  // theta, delta1, delta2
    std::vector<int> block_candidates = {3, 6, 9};

    void validate() const {
        if (num_prompts < 1) {
            throw std::invalid_argument("ProfilingConfig: num_prompts must be >= 1");
        }
        if (!(warmup_exclude_fraction > 0.0) || warmup_exclude_fraction > 1.0 ||
            !(sigma_window_fraction > 0.0) || sigma_window_fraction > 1.0) {
            throw std::invalid_argument("ProfilingConfig: fractions must be in (0, 1]");
        }
        for (double p : threshold_percentiles) {
            if (p < 0.0 || p > 100.0) {
                throw std::invalid_argument("ProfilingConfig: percentiles must be in [0, 100]");
            }
        }
        if (block_candidates.empty()) {
            throw std::invalid_argument("ProfilingConfig: block_candidates must be nonempty");
        }
    }

    std::vector<std::uint64_t> resolved_prompt_seeds() const {
        if (!prompt_seeds.empty()) {
            return prompt_seeds;
        }
        std::vector<std::uint64_t> seeds(num_prompts);
        for (int i = 0; i < num_prompts; ++i) {
            seeds[i] = detail::mix_seed(0x70726f6d70ULL, static_cast<std::uint64_t>(i));
        }
        return seeds;
    }
};

struct RedundancyRecord {
    int prompt_id = 0;
    int step = 0;
    std::optional<double> d_step;       // undefined at step 0
    double d_cfg = 0.0;
    std::map<int, double> d_block;      // empty at step 0
    std::optional<double> mu;           // stats of the step-level difference tensor
    std::optional<double> sigma;
};

struct RedundancyTrace {
    int total_steps = 0;
    std::vector<int> block_candidates;
    std::vector<RedundancyRecord> records;  // prompt-major, step-minor
};

namespace detail {

template <typename Fn>
void for_each_prompt_parallel(int num_prompts, Fn&& worker) {
    const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    int next = 0;
    while (next < num_prompts) {
        const int batch = std::min<int>(static_cast<int>(hw), num_prompts - next);
        std::vector<std::future<void>> futures;
        futures.reserve(batch);
        for (int i = 0; i < batch; ++i) {
            futures.push_back(std::async(std::launch::async, worker, next + i));
        }
        for (auto& f : futures) {
            f.get();
        }
        next += batch;
    }
}

inline std::uint64_t prompt_noise_seed(std::uint64_t prompt_seed) {
    return mix_seed(prompt_seed, 0x6e6f697365ULL);
}

}  // namespace detail

// Fully-computed generations over the prompt set, recording the step, cfg,
// and per-candidate block redundancy plus the step-difference statistics.
template <typename Model>
RedundancyTrace collect_redundancy(const Model& model, const DiffusionSchedule& schedule,
                                   const GuidanceConfig& guidance, const ProfilingConfig& config) {
    config.validate();
    guidance.validate();
    for (int c : config.block_candidates) {
        if (c < 0 || c >= model.num_blocks() - 1) {
            throw std::invalid_argument("collect_redundancy: block candidate out of range for model");
        }
    }
    const int T = schedule.total_steps;
    const auto seeds = config.resolved_prompt_seeds();
    const int cond_dim = static_cast<int>(guidance.uncond.embedding.numel());

    RedundancyTrace trace;
    trace.total_steps = T;
    trace.block_candidates = config.block_candidates;
    trace.records.resize(static_cast<std::size_t>(seeds.size()) * T);

    detail::for_each_prompt_parallel(static_cast<int>(seeds.size()), [&](int p) {
        const GuidanceConfig g = make_guidance(guidance.scale, prompt_conditioning(cond_dim, seeds[p]), cond_dim);
        Tensor x = gaussian_like(model.latent_shape(), 0.0, 1.0, detail::prompt_noise_seed(seeds[p]));
        Tensor prev_eps;
        std::map<int, Tensor> prev_acts;
        for (int t = T; t >= 1; --t) {
            const int step = T - t;
            ForwardResult cond_res = model.forward(x, t, g.cond, 0, config.block_candidates);
            ForwardResult uncond_res = model.forward(x, t, g.uncond);
            Tensor eps = cfg_combine(cond_res.output, uncond_res.output, g.scale);

            RedundancyRecord& rec = trace.records[static_cast<std::size_t>(p) * T + step];
            rec.prompt_id = p;
            rec.step = step;
            rec.d_cfg = relative_l1(uncond_res.output, cond_res.output);
            if (step > 0) {
                rec.d_step = relative_l1(eps, prev_eps);
                const DiffStats stats = diff_stats(eps, prev_eps);
                rec.mu = stats.mu;
                rec.sigma = stats.sigma;
                for (int c : config.block_candidates) {
                    rec.d_block[c] = relative_l1(cond_res.captured.at(c), prev_acts.at(c));
                }
            }
            prev_eps = std::move(eps);
            prev_acts = std::move(cond_res.captured);
            x = phi_step(schedule, x, t, prev_eps);
        }
    });
    return trace;
}

struct NoiseParams {
    double mu_hat = 0.0;
    double sigma_hat = 0.0;
};

// mu-hat pools the per-step difference means over all prompts and steps;
// sigma-hat averages the trailing window of per-step sigmas, skipping the
// warm-up prefix.
inline NoiseParams estimate_noise_params(const RedundancyTrace& trace, const ProfilingConfig& config) {
    config.validate();
    if (trace.records.empty() || trace.total_steps <= 0) {
        throw std::invalid_argument("estimate_noise_params: empty trace");
    }
    const int T = trace.total_steps;
    const int exclude = static_cast<int>(config.warmup_exclude_fraction * T);
    const int window = static_cast<int>(std::lround(config.sigma_window_fraction * T));
    const int sigma_start = std::max(exclude, T - window);

    double mu_sum = 0.0;
    long mu_count = 0;
    double sigma_sum = 0.0;
    long sigma_count = 0;
    for (const RedundancyRecord& rec : trace.records) {
        if (rec.mu.has_value()) {
            mu_sum += *rec.mu;
            ++mu_count;
        }
        if (rec.sigma.has_value() && rec.step >= sigma_start) {
            sigma_sum += *rec.sigma;
            ++sigma_count;
        }
    }
    if (mu_count == 0 || sigma_count == 0) {
        throw std::invalid_argument("estimate_noise_params: trace has no usable difference statistics");
    }
    return NoiseParams{mu_sum / static_cast<double>(mu_count), sigma_sum / static_cast<double>(sigma_count)};
}

// Perturbation injection sites for impact measurement.
enum class PerturbSite { Step, Cfg, Block };

// Test seam: impacts are measured against whatever eta source is supplied;
// the default draws N(mu_hat, sigma_hat) deterministically per
// (site, candidate, prompt, step).
using EtaSource = std::function<Tensor(PerturbSite site, int candidate, int prompt, int step, const Shape& shape)>;

inline EtaSource gaussian_eta_source(double mu_hat, double sigma_hat, std::uint64_t perturbation_seed) {
    return [mu_hat, sigma_hat, perturbation_seed](PerturbSite site, int candidate, int prompt, int step,
                                                  const Shape& shape) {
        std::uint64_t salt = 0;
        switch (site) {
            case PerturbSite::Step: salt = 1; break;
            case PerturbSite::Cfg: salt = 2; break;
            case PerturbSite::Block: salt = 100 + static_cast<std::uint64_t>(candidate); break;
        }
        std::uint64_t seed = detail::mix_seed(perturbation_seed, salt);
        seed = detail::mix_seed(seed, static_cast<std::uint64_t>(prompt));
        seed = detail::mix_seed(seed, static_cast<std::uint64_t>(step));
        return gaussian_like(shape, mu_hat, sigma_hat, seed);
    };
}

struct ImpactTables {
    double impact_step = 0.0;
    double impact_cfg = 0.0;
    std::map<int, std::vector<double>> impact_block;  // candidate -> per-step, smoothed
};

namespace detail {

inline std::vector<double> moving_average(const std::vector<double>& raw, int window) {
    const int n = static_cast<int>(raw.size());
    std::vector<double> out(raw.size());
    const int half = window / 2;
    for (int i = 0; i < n; ++i) {
        const int lo = std::max(0, i - half);
        const int hi = std::min(n - 1, i + half);
        double sum = 0.0;
        for (int j = lo; j <= hi; ++j) {
            sum += raw[j];
        }
        out[i] = sum / static_cast<double>(hi - lo + 1);
    }
    return out;
}

}  // namespace detail

// For every prompt and step, compare the solver output of the unperturbed
// step against the output with eta injected at each cache site: the combined
// noise prediction (step), the unconditional branch before guidance (cfg),
// and each candidate's conditional activation with the block suffix re-run
// (block). The trajectory itself always continues unperturbed.
template <typename Model>
ImpactTables measure_impacts(const Model& model, const DiffusionSchedule& schedule,
                             const GuidanceConfig& guidance, double mu_hat, double sigma_hat,
                             const ProfilingConfig& config, const EtaSource* eta_override = nullptr) {
    config.validate();
    guidance.validate();
    if (sigma_hat < 0.0) {
        throw std::invalid_argument("measure_impacts: sigma_hat must be >= 0");
    }
    const int T = schedule.total_steps;
    const auto seeds = config.resolved_prompt_seeds();
    const int num_prompts = static_cast<int>(seeds.size());
    const int cond_dim = static_cast<int>(guidance.uncond.embedding.numel());
    const EtaSource eta =
        eta_override != nullptr ? *eta_override : gaussian_eta_source(mu_hat, sigma_hat, config.perturbation_seed);

    std::vector<std::vector<double>> step_samples(num_prompts, std::vector<double>(T, 0.0));
    std::vector<std::vector<double>> cfg_samples(num_prompts, std::vector<double>(T, 0.0));
    std::map<int, std::vector<std::vector<double>>> block_samples;
    for (int c : config.block_candidates) {
        block_samples[c].assign(num_prompts, std::vector<double>(T, 0.0));
    }

    detail::for_each_prompt_parallel(num_prompts, [&](int p) {
        const GuidanceConfig g = make_guidance(guidance.scale, prompt_conditioning(cond_dim, seeds[p]), cond_dim);
        Tensor x = gaussian_like(model.latent_shape(), 0.0, 1.0, detail::prompt_noise_seed(seeds[p]));
        for (int t = T; t >= 1; --t) {
            const int step = T - t;
            ForwardResult cond_res = model.forward(x, t, g.cond, 0, config.block_candidates);
            ForwardResult uncond_res = model.forward(x, t, g.uncond);
            const Tensor eps = cfg_combine(cond_res.output, uncond_res.output, g.scale);
            const Tensor x_ref = phi_step(schedule, x, t, eps);

            {
                const Tensor noise = eta(PerturbSite::Step, -1, p, step, eps.shape);
                const Tensor x_pert = phi_step(schedule, x, t, add(eps, noise));
                step_samples[p][step] = relative_l1(x_pert, x_ref);
            }
            {
                const Tensor noise = eta(PerturbSite::Cfg, -1, p, step, uncond_res.output.shape);
                const Tensor eps_pert = cfg_combine(cond_res.output, add(uncond_res.output, noise), g.scale);
                const Tensor x_pert = phi_step(schedule, x, t, eps_pert);
                cfg_samples[p][step] = relative_l1(x_pert, x_ref);
            }
            for (int c : config.block_candidates) {
                const Tensor& act = cond_res.captured.at(c);
                const Tensor noise = eta(PerturbSite::Block, c, p, step, act.shape);
                const ForwardResult tail = model.forward(add(act, noise), t, g.cond, c + 1);
                const Tensor eps_pert = cfg_combine(tail.output, uncond_res.output, g.scale);
                const Tensor x_pert = phi_step(schedule, x, t, eps_pert);
                block_samples[c][p][step] = relative_l1(x_pert, x_ref);
            }
            x = x_ref;
        }
    });

    const int exclude = static_cast<int>(config.warmup_exclude_fraction * T);
    auto post_warmup_mean = [&](const std::vector<std::vector<double>>& samples) {
        double sum = 0.0;
        long count = 0;
        for (int p = 0; p < num_prompts; ++p) {
            for (int s = exclude; s < T; ++s) {
                sum += samples[p][s];
                ++count;
            }
        }
        return count > 0 ? sum / static_cast<double>(count) : 0.0;
    };

    ImpactTables tables;
    tables.impact_step = post_warmup_mean(step_samples);
    tables.impact_cfg = post_warmup_mean(cfg_samples);
    for (int c : config.block_candidates) {
        std::vector<double> per_step(T, 0.0);
        for (int s = 0; s < T; ++s) {
            double sum = 0.0;
            for (int p = 0; p < num_prompts; ++p) {
                sum += block_samples[c][p][s];
            }
            per_step[s] = sum / static_cast<double>(num_prompts);
        }
        tables.impact_block[c] = detail::moving_average(per_step, 5);
    }
    return tables;
}

struct ThresholdSuggestion {
    double theta = 0.0;
    double delta1 = 0.0;
    double delta2 = 0.0;
};

namespace detail {

// Nearest-rank percentile on a sorted copy: index = ceil(p/100 * n) - 1.
inline double percentile(std::vector<double> values, double p) {
    if (values.empty()) {
        throw std::invalid_argument("percentile: empty sample");
    }
    std::sort(values.begin(), values.end());
    const double n = static_cast<double>(values.size());
    long rank = static_cast<long>(std::ceil(p / 100.0 * n));
    rank = std::clamp<long>(rank, 1, static_cast<long>(values.size()));
    return values[static_cast<std::size_t>(rank - 1)];
}

}  // namespace detail

// Percentile-based suggestions from the profiled step redundancy; during
// profiling every step is fully computed, so the consecutive-full-step
// distance pool is the step-level D pool.
inline ThresholdSuggestion suggest_thresholds(const RedundancyTrace& trace, const ProfilingConfig& config) {
    config.validate();
    std::vector<double> d_step_pool;
    for (const RedundancyRecord& rec : trace.records) {
        if (rec.d_step.has_value()) {
            d_step_pool.push_back(*rec.d_step);
        }
    }
    if (d_step_pool.empty()) {
        throw std::invalid_argument("suggest_thresholds: trace has no step distances");
    }
    ThresholdSuggestion out;
    out.theta = detail::percentile(d_step_pool, config.threshold_percentiles[0]);
    out.delta1 = detail::percentile(d_step_pool, config.threshold_percentiles[1]);
    out.delta2 = detail::percentile(d_step_pool, config.threshold_percentiles[2]);
    if (out.delta2 <= out.delta1) {
        out.delta2 = std::nextafter(out.delta1, std::numeric_limits<double>::infinity());
    }
    return out;
}

struct ProfilingOutcome {
    ProfileArtifact artifact;
    RedundancyTrace trace;
    ThresholdSuggestion thresholds;
};

namespace detail {

inline std::uint64_t fnv1a(const std::string& text) {
    std::uint64_t hash = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        hash ^= ch;
        hash *= 0x100000001b3ULL;
    }
    return hash;
}

}  // namespace detail

// The whole offline pipeline: redundancy collection, noise-parameter
// estimation, impact measurement, threshold suggestion, artifact assembly.
template <typename Model>
ProfilingOutcome run_profiling(const Model& model, const DiffusionSchedule& schedule,
                               const GuidanceConfig& guidance, const ProfilingConfig& config) {
    ProfilingOutcome outcome;
    outcome.trace = collect_redundancy(model, schedule, guidance, config);
    const NoiseParams params = estimate_noise_params(outcome.trace, config);
    const ImpactTables impacts =
        measure_impacts(model, schedule, guidance, params.mu_hat, params.sigma_hat, config);
    outcome.thresholds = suggest_thresholds(outcome.trace, config);

    outcome.artifact.mu_hat = params.mu_hat;
    outcome.artifact.sigma_hat = params.sigma_hat;
    outcome.artifact.impact_step = impacts.impact_step;
    outcome.artifact.impact_cfg = impacts.impact_cfg;
    outcome.artifact.impact_block = impacts.impact_block;

    std::string provenance = "prompts=" + std::to_string(config.num_prompts);
    for (std::uint64_t s : config.resolved_prompt_seeds()) {
        provenance += "," + std::to_string(s);
    }
    provenance += ";perturb=" + std::to_string(config.perturbation_seed);
    provenance += ";steps=" + std::to_string(schedule.total_steps);
    provenance += ";g=" + std::to_string(guidance.scale);
    outcome.artifact.provenance = "fnv1a:" + std::to_string(detail::fnv1a(provenance));
    return outcome;
}

}  // namespace mixcache
