#include "ctxr/interest.hpp"

#include <algorithm>

#include "ctxr/common.hpp"
#include "ctxr/rng.hpp"

namespace ctxr::interest {

InterestScoreTable engagement_score(const datagen::BehaviorLog& log, std::int64_t now) {
    InterestScoreTable table;
    table.reference_time = now;
    for (const auto& ev : log.events) {
        if (ev.timestamp > now) {
            throw ConfigError("engagement_score: event at day " + std::to_string(ev.timestamp) +
                              " is newer than now=" + std::to_string(now));
        }
        const std::int64_t delta = std::max<std::int64_t>(now - ev.timestamp, 1);
        table.scores[ev.category_id] += 1.0 / static_cast<double>(delta);
    }
    return table;
}

std::vector<int> ranked_categories(const InterestScoreTable& scores) {
    std::vector<int> cats;
    cats.reserve(scores.scores.size());
    for (const auto& [cat, s] : scores.scores) {
        if (s > 0.0) {
            cats.push_back(cat);
        }
    }
    std::sort(cats.begin(), cats.end(), [&](int a, int b) {
        const double sa = scores.score(a);
        const double sb = scores.score(b);
        if (sa != sb) {
            return sa > sb;
        }
        return a < b;
    });
    return cats;
}

std::vector<int> random_in_top(const InterestScoreTable& scores, const SelectionConfig& config) {
    if (config.pick_n < 1 || config.pick_n > config.top_m) {
        throw ConfigError("selection: need 1 <= pick_n <= top_m");
    }
    std::vector<int> ranked = ranked_categories(scores);
    if (static_cast<int>(ranked.size()) > config.top_m) {
        ranked.resize(static_cast<std::size_t>(config.top_m));
    }
    Rng rng(config.seed);
    return rng.sample_without_replacement(std::move(ranked),
                                          static_cast<std::size_t>(config.pick_n));
}

std::vector<int> top_n(const InterestScoreTable& scores, int n) {
    if (n < 1) {
        throw ConfigError("top_n: n must be >= 1");
    }
    std::vector<int> ranked = ranked_categories(scores);
    if (static_cast<int>(ranked.size()) > n) {
        ranked.resize(static_cast<std::size_t>(n));
    }
    return ranked;
}

}  // namespace ctxr::interest
