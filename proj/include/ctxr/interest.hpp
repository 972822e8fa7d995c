#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "ctxr/datagen.hpp"

namespace ctxr::interest {

// Per-category time-weighted engagement. A category is present iff the user
// has at least one event in it, so score(c) == 0 never appears explicitly.
struct InterestScoreTable {
    std::map<int, double> scores;
    std::int64_t reference_time = 0;

    double score(int category) const {
        auto it = scores.find(category);
        return it == scores.end() ? 0.0 : it->second;
    }
};

struct SelectionConfig {
    int top_m = 20;
    int pick_n = 5;
    std::uint64_t seed = 0;
};

// Score(c) = sum over events in c of 1 / max(now - t, 1); same-day events
// clamp to weight 1. Throws on events newer than `now`.
InterestScoreTable engagement_score(const datagen::BehaviorLog& log, std::int64_t now);

// Categories with positive score, ordered by (score desc, id asc).
std::vector<int> ranked_categories(const InterestScoreTable& scores);

// Top-M by engagement, then pick_n sampled uniformly without replacement.
// Fewer than pick_n positive-score categories returns them all.
std::vector<int> random_in_top(const InterestScoreTable& scores, const SelectionConfig& config);

// Deterministic top-N by (score desc, id asc); the "Top-N" ablation arm.
std::vector<int> top_n(const InterestScoreTable& scores, int n);

}  // namespace ctxr::interest
