#pragma once

#include <string>
#include <vector>

#include "probekit/config.hpp"
#include "probekit/toydata.hpp"

namespace probekit::pipeline {

struct StageInfo {
    std::string name;
    std::vector<std::string> deps;
};

const std::vector<StageInfo>& stage_graph();
bool is_stage_name(const std::string& name);
std::string explain();

// Runs one stage (or "run-all"), writing artifacts under out_dir/run_id/
// and updating the run manifest. Throws DependencyError when upstream
// artifacts are missing and ConfigError on run-id/config-hash mismatches.
void run_stage(const config::RunConfig& cfg, const std::string& stage);

// Equal-share draw across sample archives (remainder to earlier sources),
// seeded shuffle, provenance tags preserved.
toydata::SplitDataset aggregate_samples(const std::vector<toydata::SplitDataset>& sources, int n_total,
                                        uint64_t seed);

std::string run_dir(const config::RunConfig& cfg);

}  // namespace probekit::pipeline
