#pragma once

// Per-timestep records shared by the sampler and the cache controller.

#include <map>
#include <optional>
#include <stdexcept>
#include <string>

namespace mixcache {

struct CacheMode {
    enum class Kind { Full, Step, Cfg, Block };

    Kind kind = Kind::Full;
    int block_index = -1;  // only meaningful for Kind::Block

    static CacheMode full() { return {Kind::Full, -1}; }
    static CacheMode step() { return {Kind::Step, -1}; }
    static CacheMode cfg() { return {Kind::Cfg, -1}; }
    static CacheMode block(int index) { return {Kind::Block, index}; }

    bool operator==(const CacheMode& other) const {
        return kind == other.kind && (kind != Kind::Block || block_index == other.block_index);
    }
    bool operator!=(const CacheMode& other) const { return !(*this == other); }

    bool is_full() const { return kind == Kind::Full; }

    std::string key() const {
        switch (kind) {
            case Kind::Full: return "full";
            case Kind::Step: return "step";
            case Kind::Cfg: return "cfg";
            case Kind::Block: return "block_" + std::to_string(block_index);
        }
        return "full";
    }
};

inline CacheMode parse_mode(const std::string& key) {
    if (key == "full") return CacheMode::full();
    if (key == "step") return CacheMode::step();
    if (key == "cfg") return CacheMode::cfg();
    if (key.rfind("block_", 0) == 0) {
        return CacheMode::block(std::stoi(key.substr(6)));
    }
    throw std::invalid_argument("unknown cache mode key: " + key);
}

struct TimestepTrace {
    int step_index = 0;
    CacheMode mode = CacheMode::full();
    // D values freshly computed this step; stale-carried entries are absent.
    std::map<std::string, double> d_values;
    // P values from the mode selection run at the end of this step.
    std::map<std::string, double> p_values;
    std::optional<double> d_full;
    int interval_after = 0;  // N after any rescale at this step
    int cnt_after = 0;
    int block_forwards = 0;
};

}  // namespace mixcache
