#pragma once

// JSON forms of the profile artifact, run traces, and redundancy traces.
// Traces are line-delimited JSON, one record per line.

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "mixcache/controller.hpp"
#include "mixcache/profiler.hpp"
#include "mixcache/trace.hpp"

namespace mixcache {

inline nlohmann::json profile_to_json(const ProfileArtifact& artifact) {
    nlohmann::json impact_block = nlohmann::json::object();
    for (const auto& [candidate, row] : artifact.impact_block) {
        impact_block[std::to_string(candidate)] = row;
    }
    return nlohmann::json{
        {"mu_hat", artifact.mu_hat},
        {"sigma_hat", artifact.sigma_hat},
        {"impact_step", artifact.impact_step},
        {"impact_cfg", artifact.impact_cfg},
        {"impact_block", impact_block},
        {"provenance", artifact.provenance},
    };
}

inline ProfileArtifact profile_from_json(const nlohmann::json& doc) {
    ProfileArtifact artifact;
    artifact.mu_hat = doc.at("mu_hat").get<double>();
    artifact.sigma_hat = doc.at("sigma_hat").get<double>();
    artifact.impact_step = doc.at("impact_step").get<double>();
    artifact.impact_cfg = doc.at("impact_cfg").get<double>();
    for (const auto& [key, row] : doc.at("impact_block").items()) {
        artifact.impact_block[std::stoi(key)] = row.get<std::vector<double>>();
    }
    artifact.provenance = doc.value("provenance", "");
    return artifact;
}

inline void save_profile(const ProfileArtifact& artifact, const std::string& path) {
    std::ofstream os(path);
    if (!os) {
        throw std::runtime_error("cannot open " + path + " for writing");
    }
    os << profile_to_json(artifact).dump(2) << "\n";
}

inline ProfileArtifact load_profile(const std::string& path) {
    std::ifstream is(path);
    if (!is) {
        throw std::runtime_error("cannot open profile " + path);
    }
    nlohmann::json doc;
    try {
        is >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("malformed profile " + path + ": " + e.what());
    }
    return profile_from_json(doc);
}

inline nlohmann::json trace_record_to_json(const TimestepTrace& rec) {
    nlohmann::json doc{
        {"step", rec.step_index},
        {"mode", rec.mode.key()},
        {"d", rec.d_values},
        {"p", rec.p_values},
        {"n_after", rec.interval_after},
        {"cnt_after", rec.cnt_after},
        {"block_forwards", rec.block_forwards},
    };
    if (rec.d_full.has_value()) {
        doc["d_full"] = *rec.d_full;
    }
    return doc;
}

inline TimestepTrace trace_record_from_json(const nlohmann::json& doc) {
    TimestepTrace rec;
    rec.step_index = doc.at("step").get<int>();
    rec.mode = parse_mode(doc.at("mode").get<std::string>());
    if (doc.contains("d")) {
        rec.d_values = doc.at("d").get<std::map<std::string, double>>();
    }
    if (doc.contains("p")) {
        rec.p_values = doc.at("p").get<std::map<std::string, double>>();
    }
    if (doc.contains("d_full")) {
        rec.d_full = doc.at("d_full").get<double>();
    }
    rec.interval_after = doc.at("n_after").get<int>();
    rec.cnt_after = doc.at("cnt_after").get<int>();
    rec.block_forwards = doc.at("block_forwards").get<int>();
    return rec;
}

inline void save_trace_jsonl(const std::vector<TimestepTrace>& trace, const std::string& path) {
    std::ofstream os(path);
    if (!os) {
        throw std::runtime_error("cannot open " + path + " for writing");
    }
    for (const TimestepTrace& rec : trace) {
        os << trace_record_to_json(rec).dump() << "\n";
    }
}

inline std::vector<TimestepTrace> load_trace_jsonl(const std::string& path) {
    std::ifstream is(path);
    if (!is) {
        throw std::runtime_error("cannot open trace " + path);
    }
    std::vector<TimestepTrace> trace;
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        try {
            trace.push_back(trace_record_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error("malformed trace " + path + " line " + std::to_string(line_no) + ": " +
                                     e.what());
        }
    }
    return trace;
}

inline void save_redundancy_jsonl(const RedundancyTrace& trace, const std::string& path) {
    std::ofstream os(path);
    if (!os) {
        throw std::runtime_error("cannot open " + path + " for writing");
    }
    for (const RedundancyRecord& rec : trace.records) {
        nlohmann::json doc{
            {"prompt_id", rec.prompt_id},
            {"step", rec.step},
            {"d_cfg", rec.d_cfg},
        };
        if (rec.d_step.has_value()) {
            doc["d_step"] = *rec.d_step;
        }
        if (!rec.d_block.empty()) {
            nlohmann::json block = nlohmann::json::object();
            for (const auto& [candidate, value] : rec.d_block) {
                block[std::to_string(candidate)] = value;
            }
            doc["d_block"] = block;
        }
        if (rec.mu.has_value()) {
            doc["mu"] = *rec.mu;
        }
        if (rec.sigma.has_value()) {
            doc["sigma"] = *rec.sigma;
        }
        os << doc.dump() << "\n";
    }
}

}  // namespace mixcache
