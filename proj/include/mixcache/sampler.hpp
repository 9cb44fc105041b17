#pragma once

// Diffusion schedule, the deterministic DDIM reverse update, classifier-free
// guidance combination, and the generation loop that optionally hosts a
// cache controller.

#include <cstdint>
#include <stdexcept>
#include <type_traits>
#include <utility>
#include <vector>

#include "mixcache/model.hpp"
#include "mixcache/tensor.hpp"
#include "mixcache/trace.hpp"

namespace mixcache {

struct DiffusionSchedule {
    int total_steps = 0;            // T
    std::vector<double> beta;       // [T+1], beta[0] unused
    std::vector<double> alpha_bar;  // [T+1], alpha_bar[0] == 1
};

// Linear-beta schedule; signal keep-rate per step is 1 - beta_t.
inline DiffusionSchedule build_schedule(int total_steps, double beta_min = 1e-4, double beta_max = 2e-2) {
    if (total_steps < 2) {
        throw std::invalid_argument("build_schedule: total_steps must be >= 2");
    }
    if (!(beta_min > 0.0) || !(beta_min <= beta_max) || !(beta_max < 1.0)) {
        throw std::invalid_argument("build_schedule: need 0 < beta_min <= beta_max < 1");
    }
    DiffusionSchedule schedule;
    schedule.total_steps = total_steps;
    schedule.beta.resize(total_steps + 1, 0.0);
    schedule.alpha_bar.resize(total_steps + 1, 1.0);
    for (int t = 1; t <= total_steps; ++t) {
        schedule.beta[t] = beta_min + (beta_max - beta_min) * static_cast<double>(t - 1) /
                                          static_cast<double>(total_steps - 1);
        schedule.alpha_bar[t] = schedule.alpha_bar[t - 1] * (1.0 - schedule.beta[t]);
    }
    return schedule;
}

// One deterministic DDIM update: estimate x0 from the noise prediction, then
// re-noise to level t-1. At t == 1 this returns the x0 estimate itself.
inline Tensor phi_step(const DiffusionSchedule& schedule, const Tensor& x_t, int t, const Tensor& eps) {
    if (t < 1 || t > schedule.total_steps) {
        throw std::out_of_range("phi_step: t out of range");
    }
    require_same_shape(x_t, eps, "phi_step");
    const double a_t = schedule.alpha_bar[t];
    const double a_prev = schedule.alpha_bar[t - 1];
    const double sqrt_a_t = std::sqrt(a_t);
    const double sqrt_one_minus_a_t = std::sqrt(1.0 - a_t);
    const double sqrt_a_prev = std::sqrt(a_prev);
    const double sqrt_one_minus_a_prev = std::sqrt(1.0 - a_prev);

    Tensor out{Shape(x_t.shape)};
    for (std::size_t i = 0; i < x_t.data.size(); ++i) {
        const double x0 = (x_t.data[i] - sqrt_one_minus_a_t * eps.data[i]) / sqrt_a_t;
        out.data[i] = sqrt_a_prev * x0 + sqrt_one_minus_a_prev * eps.data[i];
    }
    return out;
}

struct GuidanceConfig {
    double scale = 0.0;  // g
    Conditioning cond;
    Conditioning uncond;

    void validate() const {
        if (scale < 0.0) {
            throw std::invalid_argument("GuidanceConfig: scale must be >= 0");
        }
        if (!uncond.is_null) {
            throw std::invalid_argument("GuidanceConfig: uncond must be the null conditioning");
        }
    }
};

inline GuidanceConfig make_guidance(double scale, const Conditioning& cond, int cond_dim) {
    GuidanceConfig g{scale, cond, null_conditioning(cond_dim)};
    g.validate();
    return g;
}

// (1+g)*cond - g*uncond, evaluated as cond + g*(cond - uncond) so that
// g == 0 and cond == uncond reproduce cond bit-for-bit.
inline Tensor cfg_combine(const Tensor& cond_out, const Tensor& uncond_out, double g) {
    require_same_shape(cond_out, uncond_out, "cfg_combine");
    Tensor out{Shape(cond_out.shape)};
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] = cond_out.data[i] + g * (cond_out.data[i] - uncond_out.data[i]);
    }
    return out;
}

struct ComputeLedger {
    long long executed = 0;  // block-forwards actually run
    long long baseline = 0;  // block-forwards of the uncached dual-branch run
};

struct GenerationResult {
    Tensor final_latent;
    std::vector<TimestepTrace> trace;
    ComputeLedger compute_ledger;
};

namespace detail {

struct NoControllerTag {};

}  // namespace detail

// Reverse process from pure noise, t = T down to 1. With a controller each
// step's noise estimate comes from the controller; otherwise every step is a
// full dual (cond + uncond) forward.
template <typename Model, typename Controller>
GenerationResult generate(const Model& model, const DiffusionSchedule& schedule,
                          const GuidanceConfig& guidance, Controller* controller,
                          std::uint64_t noise_seed) {
    guidance.validate();
    const int T = schedule.total_steps;
    const int L = model.num_blocks();

    GenerationResult result;
    result.trace.reserve(T);
    Tensor x = gaussian_like(model.latent_shape(), 0.0, 1.0, noise_seed);

    long long executed = 0;
    for (int t = T; t >= 1; --t) {
        const int step_index = T - t;
        Tensor eps;
        TimestepTrace record;
        bool handled = false;
        if constexpr (!std::is_same_v<Controller, detail::NoControllerTag>) {
            if (controller != nullptr) {
                auto stepped = controller->step(model, schedule, guidance, x, step_index);
                eps = std::move(stepped.first);
                record = std::move(stepped.second);
                handled = true;
            }
        }
        if (!handled) {
            const Tensor cond_out = model.forward(x, t, guidance.cond).output;
            const Tensor uncond_out = model.forward(x, t, guidance.uncond).output;
            eps = cfg_combine(cond_out, uncond_out, guidance.scale);
            record.step_index = step_index;
            record.mode = CacheMode::full();
            record.block_forwards = 2 * L;
        }
        executed += record.block_forwards;
        x = phi_step(schedule, x, t, eps);
        result.trace.push_back(std::move(record));
    }

    result.final_latent = std::move(x);
    result.compute_ledger.executed = executed;
    result.compute_ledger.baseline = static_cast<long long>(T) * 2 * L;
    return result;
}

template <typename Model>
GenerationResult generate(const Model& model, const DiffusionSchedule& schedule,
                          const GuidanceConfig& guidance, std::uint64_t noise_seed) {
    detail::NoControllerTag* none = nullptr;
    return generate(model, schedule, guidance, none, noise_seed);
}

}  // namespace mixcache
