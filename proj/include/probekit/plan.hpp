#pragma once

#include <vector>

#include "probekit/common.hpp"
#include "probekit/rng.hpp"

namespace probekit::probe {

// Which sampling steps receive gradient: {t_s, t_s + floor(T/K), ...} clipped
// to [1, T]. Listing K+1 offsets and clipping yields K or K+1 steps; the
// alternate convention truncates at exactly K entries.
enum class StepCount { KPlusOne, K };

struct TrainStepPlan {
    int T = 0;
    int K = 0;
    int t_s = 0;
    std::vector<int> steps;

    bool contains(int t) const {
        for (const int s : steps)
            if (s == t) return true;
        return false;
    }
};

TrainStepPlan make_train_steps(int T, int K, int t_s, StepCount convention = StepCount::KPlusOne);
TrainStepPlan make_train_steps(int T, int K, Rng& rng, StepCount convention = StepCount::KPlusOne);
// A plan that routes gradient through no step at all (testing hook).
TrainStepPlan empty_plan(int T);

}  // namespace probekit::probe
