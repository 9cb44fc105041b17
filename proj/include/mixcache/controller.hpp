#pragma once

// The hybrid cache state machine: warm-up detection on step-level redundancy,
// adaptive cache-interval scaling from full-step drift, impact-weighted mode
// selection with a repeat penalty, and the three cache application paths
// (step reuse, cfg shortcut, partial block execution).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mixcache/model.hpp"
#include "mixcache/sampler.hpp"
#include "mixcache/tensor.hpp"
#include "mixcache/trace.hpp"

namespace mixcache {

enum class IntervalMode { Accuracy, Efficiency };

inline std::string interval_mode_name(IntervalMode mode) {
    return mode == IntervalMode::Accuracy ? "accuracy" : "efficiency";
}

inline IntervalMode parse_interval_mode(const std::string& name) {
    if (name == "accuracy") return IntervalMode::Accuracy;
    if (name == "efficiency") return IntervalMode::Efficiency;
    throw std::invalid_argument("unknown interval mode: " + name);
}

struct ControllerConfig {
    double theta = 0.1;   // warm-up exit threshold
    double delta1 = 0.05;
    double delta2 = 0.1;
    IntervalMode interval_mode = IntervalMode::Efficiency;
    double penalty = 5.0;
    std::vector<int> block_candidates = {3, 6, 9};  // strictly ascending
    double guidance_scale = 3.0;                    // mirror of the sampler's g

    // Ablation knobs. `fixed_interval` pins N and disables rescaling; the
    // allow_* flags restrict which cache kinds the selector may pick.
    int fixed_interval = 0;  // 0 = adaptive
    bool allow_step = true;
    bool allow_cfg = true;
    bool allow_block = true;

    void validate() const {
        if (!(delta1 > 0.0) || !(delta1 < delta2)) {
            throw std::invalid_argument("ControllerConfig: need 0 < delta1 < delta2");
        }
        if (penalty < 1.0) {
            throw std::invalid_argument("ControllerConfig: penalty must be >= 1");
        }
        if (block_candidates.empty()) {
            throw std::invalid_argument("ControllerConfig: block_candidates must be nonempty");
        }
        for (std::size_t i = 0; i < block_candidates.size(); ++i) {
            if (block_candidates[i] < 0) {
                throw std::invalid_argument("ControllerConfig: negative block candidate");
            }
            if (i > 0 && block_candidates[i] <= block_candidates[i - 1]) {
                throw std::invalid_argument("ControllerConfig: block_candidates must be strictly ascending");
            }
        }
        if (guidance_scale < 0.0) {
            throw std::invalid_argument("ControllerConfig: guidance_scale must be >= 0");
        }
        if (fixed_interval < 0) {
            throw std::invalid_argument("ControllerConfig: fixed_interval must be >= 0");
        }
        if (!allow_step && !allow_cfg && !allow_block) {
            throw std::invalid_argument("ControllerConfig: at least one cache kind must be allowed");
        }
    }

    int initial_interval() const {
        if (fixed_interval > 0) {
            return fixed_interval;
        }
        return interval_mode == IntervalMode::Accuracy ? 4 : 5;
    }
};

struct ProfileArtifact {
    double mu_hat = 0.0;
    double sigma_hat = 0.0;
    double impact_step = 0.0;
    double impact_cfg = 0.0;
    std::map<int, std::vector<double>> impact_block;  // candidate -> per-step impact
    std::string provenance;

    int profiled_steps() const {
        return impact_block.empty() ? 0 : static_cast<int>(impact_block.begin()->second.size());
    }

    // Per-step block impact at the current sampling index; profiles built for
    // a different step count are rescaled linearly and looked up nearest.
    double block_impact_at(int candidate, int step_index, int run_total_steps) const {
        auto it = impact_block.find(candidate);
        if (it == impact_block.end() || it->second.empty()) {
            throw std::invalid_argument("profile: missing block impact for candidate " + std::to_string(candidate));
        }
        const auto& row = it->second;
        const int profiled = static_cast<int>(row.size());
        long idx = 0;
        if (run_total_steps == profiled) {
            idx = step_index;
        } else if (run_total_steps > 1) {
            idx = std::lround(static_cast<double>(step_index) * static_cast<double>(profiled - 1) /
                              static_cast<double>(run_total_steps - 1));
        }
        idx = std::clamp<long>(idx, 0, profiled - 1);
        return row[static_cast<std::size_t>(idx)];
    }

    void validate(const std::vector<int>& candidates) const {
        if (sigma_hat < 0.0) {
            throw std::invalid_argument("profile: sigma_hat must be >= 0");
        }
        if (impact_step < 0.0 || impact_cfg < 0.0) {
            throw std::invalid_argument("profile: impacts must be >= 0");
        }
        std::size_t steps = 0;
        for (int c : candidates) {
            auto it = impact_block.find(c);
            if (it == impact_block.end() || it->second.empty()) {
                throw std::invalid_argument("profile: no block impact row for candidate " + std::to_string(c));
            }
            if (steps == 0) {
                steps = it->second.size();
            } else if (it->second.size() != steps) {
                throw std::invalid_argument("profile: block impact rows have mismatched lengths");
            }
            for (double v : it->second) {
                if (v < 0.0) {
                    throw std::invalid_argument("profile: impacts must be >= 0");
                }
            }
        }
    }
};

enum class Phase { WarmUp, CacheEnabled };

struct CacheState {
    Phase phase = Phase::WarmUp;
    int cnt = 0;
    int interval = 5;  // N
    Tensor last_full_output;  // combined noise prediction at the last full step
    Tensor prev_step_output;  // combined noise prediction at the previous step, any mode
    Tensor delta_cfg;         // uncond - cond at the last step computing both
    std::map<int, Tensor> block_cache;      // candidate -> conditional activation
    std::map<std::string, double> last_d;   // freshest D per mode key
    CacheMode last_mode = CacheMode::full();
    CacheMode next_mode = CacheMode::full();
    int steps_taken = 0;
};

// Eq-style interval bands: accuracy maps the D-full bands to 4/3/2, the
// efficiency variant to 5/4/3. Upper band uses >= at delta2.
inline int scale_interval(double d_full, const ControllerConfig& config) {
    if (d_full < 0.0) {
        throw std::invalid_argument("scale_interval: d_full must be >= 0");
    }
    const bool acc = config.interval_mode == IntervalMode::Accuracy;
    if (d_full < config.delta1) {
        return acc ? 4 : 5;
    }
    if (d_full < config.delta2) {
        return acc ? 3 : 4;
    }
    return acc ? 2 : 3;
}

inline double compute_p(double d, double impact, bool penalized, double penalty) {
    const double base = d * impact;
    return penalized ? base * penalty : base;
}

// Greedy argmin over the allowed cache kinds; the entry matching the mode
// used this step carries the penalty. Ties resolve step < cfg < block
// (ascending candidate index).
inline CacheMode select_mode(const std::map<std::string, double>& last_d, const ProfileArtifact& profile,
                             int step_index, const CacheMode& last_mode, const ControllerConfig& config,
                             int run_total_steps, std::map<std::string, double>* p_values_out = nullptr) {
    auto d_of = [&last_d](const std::string& key) {
        auto it = last_d.find(key);
        if (it == last_d.end()) {
            throw std::invalid_argument("select_mode: missing D entry for " + key);
        }
        return it->second;
    };

    bool have_best = false;
    CacheMode best = CacheMode::step();
    double best_p = 0.0;
    auto consider = [&](const CacheMode& mode, double impact) {
        const double p = compute_p(d_of(mode.key()), impact, mode == last_mode, config.penalty);
        if (p_values_out != nullptr) {
            (*p_values_out)[mode.key()] = p;
        }
        if (!have_best || p < best_p) {
            have_best = true;
            best = mode;
            best_p = p;
        }
    };

    if (config.allow_step) {
        consider(CacheMode::step(), profile.impact_step);
    }
    if (config.allow_cfg) {
        consider(CacheMode::cfg(), profile.impact_cfg);
    }
    if (config.allow_block) {
        for (int c : config.block_candidates) {
            consider(CacheMode::block(c), profile.block_impact_at(c, step_index, run_total_steps));
        }
    }
    if (!have_best) {
        throw std::logic_error("select_mode: no cache mode allowed");
    }
    return best;
}

inline CacheState init_state(const ControllerConfig& config, const ProfileArtifact& profile) {
    config.validate();
    profile.validate(config.block_candidates);
    CacheState state;
    state.phase = Phase::WarmUp;
    state.cnt = 0;
    state.interval = config.initial_interval();
    return state;
}

// One controller-driven timestep. Returns the combined noise prediction the
// solver should use plus the trace record for this step.
template <typename Model>
std::pair<Tensor, TimestepTrace> controller_step(CacheState& state, const Model& model,
                                                 const DiffusionSchedule& schedule,
                                                 const GuidanceConfig& guidance, const Tensor& x_t,
                                                 int step_index, const ProfileArtifact& profile,
                                                 const ControllerConfig& config) {
    const int T = schedule.total_steps;
    const int L = model.num_blocks();
    if (step_index != state.steps_taken) {
        throw std::logic_error("controller_step: step_index must advance by exactly 1 from 0");
    }
    if (step_index < 0 || step_index >= T) {
        throw std::out_of_range("controller_step: step_index beyond schedule");
    }
    for (int c : config.block_candidates) {
        if (c >= L - 1) {
            throw std::invalid_argument("controller_step: block candidate " + std::to_string(c) +
                                        " not below num_blocks-1");
        }
    }
    if (guidance.scale != config.guidance_scale) {
        throw std::invalid_argument("controller_step: guidance scale does not match controller config");
    }
    const int t = T - step_index;  // diffusion timestep for the model

    TimestepTrace rec;
    rec.step_index = step_index;
    Tensor eps_tilde;

    const std::string kStep = "step";
    const std::string kCfg = "cfg";
    auto block_key = [](int c) { return "block_" + std::to_string(c); };

    auto run_full_dual = [&](std::map<int, Tensor>& captures, Tensor& cond_out, Tensor& uncond_out) {
        ForwardResult cond_res = model.forward(x_t, t, guidance.cond, 0, config.block_candidates);
        ForwardResult uncond_res = model.forward(x_t, t, guidance.uncond);
        captures = std::move(cond_res.captured);
        cond_out = std::move(cond_res.output);
        uncond_out = std::move(uncond_res.output);
    };

    if (state.phase == Phase::WarmUp) {
        std::map<int, Tensor> captures;
        Tensor cond_out, uncond_out;
        run_full_dual(captures, cond_out, uncond_out);
        eps_tilde = cfg_combine(cond_out, uncond_out, guidance.scale);
        rec.mode = CacheMode::full();
        rec.block_forwards = 2 * L;

        rec.d_values[kCfg] = relative_l1(uncond_out, cond_out);
        if (step_index > 0) {
            rec.d_values[kStep] = relative_l1(eps_tilde, state.prev_step_output);
            for (int c : config.block_candidates) {
                rec.d_values[block_key(c)] = relative_l1(captures.at(c), state.block_cache.at(c));
            }
        }
        for (const auto& [key, value] : rec.d_values) {
            state.last_d[key] = value;
        }

        state.delta_cfg = sub(uncond_out, cond_out);
        for (int c : config.block_candidates) {
            state.block_cache[c] = std::move(captures.at(c));
        }
        state.last_full_output = eps_tilde;
        state.last_mode = CacheMode::full();

        if (step_index > 0 && rec.d_values.at(kStep) < config.theta) {
            state.phase = Phase::CacheEnabled;
            state.cnt = 0;
            state.interval = config.initial_interval();
            state.next_mode = select_mode(state.last_d, profile, step_index, CacheMode::full(), config, T,
                                          &rec.p_values);
        }
    } else {
        state.cnt = (state.cnt + 1) % state.interval;
        if (state.cnt == 0) {
            // Periodic full computation: refresh every cache and rescale N.
            std::map<int, Tensor> captures;
            Tensor cond_out, uncond_out;
            run_full_dual(captures, cond_out, uncond_out);
            eps_tilde = cfg_combine(cond_out, uncond_out, guidance.scale);
            rec.mode = CacheMode::full();
            rec.block_forwards = 2 * L;

            const double d_full = relative_l1(eps_tilde, state.last_full_output);
            rec.d_full = d_full;
            if (config.fixed_interval == 0) {
                state.interval = scale_interval(d_full, config);
            }

            rec.d_values[kStep] = relative_l1(eps_tilde, state.prev_step_output);
            rec.d_values[kCfg] = relative_l1(uncond_out, cond_out);
            for (int c : config.block_candidates) {
                rec.d_values[block_key(c)] = relative_l1(captures.at(c), state.block_cache.at(c));
            }

            state.delta_cfg = sub(uncond_out, cond_out);
            for (int c : config.block_candidates) {
                state.block_cache[c] = std::move(captures.at(c));
            }
            state.last_full_output = eps_tilde;
        } else {
            const CacheMode mode = state.next_mode;
            rec.mode = mode;
            switch (mode.kind) {
                case CacheMode::Kind::Step: {
                    // Reuse the previous combined output wholesale.
                    eps_tilde = state.prev_step_output;
                    rec.block_forwards = 0;
                    break;
                }
                case CacheMode::Kind::Cfg: {
                    // Conditional branch only; unconditional approximated as
                    // cond + cached residual.
                    ForwardResult cond_res = model.forward(x_t, t, guidance.cond, 0, config.block_candidates);
                    const Tensor uncond_approx = add(cond_res.output, state.delta_cfg);
                    eps_tilde = cfg_combine(cond_res.output, uncond_approx, guidance.scale);
                    rec.block_forwards = L;

                    rec.d_values[kStep] = relative_l1(eps_tilde, state.prev_step_output);
                    for (int c : config.block_candidates) {
                        rec.d_values[block_key(c)] = relative_l1(cond_res.captured.at(c), state.block_cache.at(c));
                    }
                    for (int c : config.block_candidates) {
                        state.block_cache[c] = std::move(cond_res.captured.at(c));
                    }
                    break;
                }
                case CacheMode::Kind::Block: {
                    // Resume the conditional forward after the cached block.
                    const int i = mode.block_index;
                    std::vector<int> wanted;
                    for (int c : config.block_candidates) {
                        if (c > i) {
                            wanted.push_back(c);
                        }
                    }
                    ForwardResult cond_res = model.forward(state.block_cache.at(i), t, guidance.cond, i + 1, wanted);
                    const Tensor uncond_approx = add(cond_res.output, state.delta_cfg);
                    eps_tilde = cfg_combine(cond_res.output, uncond_approx, guidance.scale);
                    rec.block_forwards = L - (i + 1);

                    rec.d_values[kStep] = relative_l1(eps_tilde, state.prev_step_output);
                    for (int c : wanted) {
                        rec.d_values[block_key(c)] = relative_l1(cond_res.captured.at(c), state.block_cache.at(c));
                    }
                    for (int c : wanted) {
                        state.block_cache[c] = std::move(cond_res.captured.at(c));
                    }
                    break;
                }
                case CacheMode::Kind::Full:
                    throw std::logic_error("controller_step: next_mode must not be Full");
            }
        }
        for (const auto& [key, value] : rec.d_values) {
            state.last_d[key] = value;
        }
        state.last_mode = rec.mode;
        state.next_mode = select_mode(state.last_d, profile, step_index, rec.mode, config, T, &rec.p_values);
    }

    rec.interval_after = state.interval;
    rec.cnt_after = state.cnt;
    state.prev_step_output = eps_tilde;
    state.steps_taken += 1;
    return {std::move(eps_tilde), std::move(rec)};
}

// Bundles config, profile, and mutable state so it can ride through
// generate() as the per-run stepper.
class CacheController {
public:
    CacheController(ControllerConfig config, ProfileArtifact profile)
        : config_(std::move(config)), profile_(std::move(profile)), state_(init_state(config_, profile_)) {}

    template <typename Model>
    std::pair<Tensor, TimestepTrace> step(const Model& model, const DiffusionSchedule& schedule,
                                          const GuidanceConfig& guidance, const Tensor& x_t, int step_index) {
        return controller_step(state_, model, schedule, guidance, x_t, step_index, profile_, config_);
    }

    void reset() { state_ = init_state(config_, profile_); }

    const ControllerConfig& config() const { return config_; }
    const ProfileArtifact& profile() const { return profile_; }
    const CacheState& state() const { return state_; }
    CacheState& state() { return state_; }

private:
    ControllerConfig config_;
    ProfileArtifact profile_;
    CacheState state_;
};

}  // namespace mixcache
