#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "ctxr/common.hpp"
#include "ctxr/interest.hpp"
#include "ctxr/rng.hpp"

using namespace ctxr;
using datagen::BehaviorLog;
using interest::SelectionConfig;

namespace {

BehaviorLog log_at(std::initializer_list<std::pair<int, std::int64_t>> events) {
    BehaviorLog log;
    log.user_id = 0;
    for (const auto& [cat, ts] : events) {
        log.events.push_back({0, cat, ts});
    }
    std::sort(log.events.begin(), log.events.end(),
              [](const auto& a, const auto& b) { return a.timestamp < b.timestamp; });
    return log;
}

// independent one-line restatement of the time-weighted sum
std::map<int, double> oracle_scores(const BehaviorLog& log, std::int64_t now) {
    std::map<int, double> out;
    for (const auto& ev : log.events) {
        out[ev.category_id] += 1.0 / std::max<std::int64_t>(now - ev.timestamp, 1);
    }
    return out;
}

}  // namespace

TEST_CASE("events one and two days old score exactly 1.5") {
    const auto log = log_at({{3, 8}, {3, 9}});
    const auto table = interest::engagement_score(log, 10);
    CHECK(table.score(3) == 1.5);
    CHECK(table.score(0) == 0.0);
}

TEST_CASE("same-day events clamp to weight 1") {
    const auto log = log_at({{2, 10}});
    const auto table = interest::engagement_score(log, 10);
    CHECK(table.score(2) == 1.0);
}

TEST_CASE("events newer than now are an input error") {
    const auto log = log_at({{2, 11}});
    CHECK_THROWS_AS(interest::engagement_score(log, 10), ConfigError);
}

TEST_CASE("scores match the independent oracle on random logs") {
    Rng rng(77);
    for (int rep = 0; rep < 1000; ++rep) {
        BehaviorLog log;
        log.user_id = 0;
        const int len = static_cast<int>(rng.below(40));
        std::int64_t t = 0;
        for (int i = 0; i < len; ++i) {
            t += static_cast<std::int64_t>(rng.below(5));
            log.events.push_back({0, static_cast<int>(rng.below(8)), t});
        }
        const std::int64_t now = t + static_cast<std::int64_t>(rng.below(10));
        const auto table = interest::engagement_score(log, now);
        const auto expected = oracle_scores(log, now);
        CHECK(table.scores.size() == expected.size());
        for (const auto& [cat, s] : expected) {
            CHECK(std::abs(table.score(cat) - s) <= 1e-12);
        }
    }
}

TEST_CASE("one more event strictly increases that category only") {
    auto log = log_at({{1, 5}, {2, 8}});
    const auto before = interest::engagement_score(log, 10);
    log.events.push_back({0, 1, 9});
    const auto after = interest::engagement_score(log, 10);
    CHECK(after.score(1) > before.score(1));
    CHECK(after.score(2) == before.score(2));
}

TEST_CASE("defaults follow the random-5-in-top-20 serving strategy") {
    SelectionConfig cfg;
    CHECK(cfg.top_m == 20);
    CHECK(cfg.pick_n == 5);
}

TEST_CASE("fewer positive categories than pick_n returns them all") {
    const auto log = log_at({{1, 9}, {2, 8}, {3, 7}});
    const auto table = interest::engagement_score(log, 10);
    SelectionConfig cfg;
    cfg.seed = 5;
    const auto picked = interest::random_in_top(table, cfg);
    CHECK(picked.size() == 3);
    CHECK(std::set<int>(picked.begin(), picked.end()) == std::set<int>{1, 2, 3});
}

TEST_CASE("selection is a subset of the top-M set and seed-deterministic") {
    Rng rng(13);
    for (int rep = 0; rep < 100; ++rep) {
        BehaviorLog log;
        log.user_id = 0;
        for (int i = 0; i < 60; ++i) {
            log.events.push_back({0, static_cast<int>(rng.below(30)), static_cast<std::int64_t>(rng.below(50))});
        }
        std::sort(log.events.begin(), log.events.end(),
                  [](const auto& a, const auto& b) { return a.timestamp < b.timestamp; });
        const auto table = interest::engagement_score(log, 60);

        SelectionConfig cfg;
        cfg.top_m = 8;
        cfg.pick_n = 3;
        cfg.seed = static_cast<std::uint64_t>(rep);
        const auto picked = interest::random_in_top(table, cfg);
        const auto top = interest::top_n(table, cfg.top_m);
        for (int c : picked) {
            CHECK(std::find(top.begin(), top.end(), c) != top.end());
        }
        CHECK(picked == interest::random_in_top(table, cfg));
    }
}

TEST_CASE("equal-score categories are selected uniformly over seeded draws") {
    BehaviorLog log;
    log.user_id = 0;
    for (int c = 0; c < 20; ++c) {
        log.events.push_back({0, c, 9});  // one event per category, same day
    }
    const auto table = interest::engagement_score(log, 10);

    std::array<int, 20> counts{};
    const int draws = 10000;
    SelectionConfig cfg;
    for (int d = 0; d < draws; ++d) {
        cfg.seed = 1000 + static_cast<std::uint64_t>(d);
        for (int c : interest::random_in_top(table, cfg)) {
            ++counts[static_cast<std::size_t>(c)];
        }
    }
    // each category is Binomial(10000, 0.25): sd = sqrt(n p (1-p)) ~ 43.3
    const double expected = draws * 0.25;
    const double sigma = std::sqrt(draws * 0.25 * 0.75);
    for (int c = 0; c < 20; ++c) {
        CHECK(std::abs(counts[static_cast<std::size_t>(c)] - expected) <= 3.0 * sigma);
    }
}

TEST_CASE("top_n is deterministic with id tie-breaks") {
    interest::InterestScoreTable table;
    table.scores = {{5, 2.0}, {9, 1.0}};
    CHECK(interest::top_n(table, 1) == std::vector<int>{5});

    table.scores = {{9, 1.0}, {5, 1.0}};
    CHECK(interest::top_n(table, 2) == std::vector<int>{5, 9});
}

TEST_CASE("top_n equals the first N of the sorted positive-score list") {
    Rng rng(3);
    for (int rep = 0; rep < 100; ++rep) {
        interest::InterestScoreTable table;
        for (int c = 0; c < 15; ++c) {
            if (rng.uniform() < 0.7) {
                table.scores[c] = rng.uniform();
            }
        }
        std::vector<std::pair<double, int>> sorted;
        for (const auto& [c, s] : table.scores) {
            sorted.emplace_back(-s, c);
        }
        std::sort(sorted.begin(), sorted.end());
        const int n = 1 + static_cast<int>(rng.below(6));
        const auto got = interest::top_n(table, n);
        REQUIRE(got.size() == std::min<std::size_t>(static_cast<std::size_t>(n), sorted.size()));
        for (std::size_t i = 0; i < got.size(); ++i) {
            CHECK(got[i] == sorted[i].second);
        }
    }
}

TEST_CASE("selection config is validated") {
    interest::InterestScoreTable table;
    SelectionConfig cfg;
    cfg.pick_n = 0;
    CHECK_THROWS_AS(interest::random_in_top(table, cfg), ConfigError);
    cfg.pick_n = 30;
    cfg.top_m = 20;
    CHECK_THROWS_AS(interest::random_in_top(table, cfg), ConfigError);
}
