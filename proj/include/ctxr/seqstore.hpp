#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "ctxr/datagen.hpp"

namespace ctxr::seqstore {

using datagen::BehaviorEvent;
using datagen::BehaviorLog;
using datagen::Catalog;

// Category-filtered slice of a behavior log: the most recent <= l_sub events
// matching `context_category`, kept chronological. `reference_time` is the
// day deltas are measured against when the encoder buckets recency.
// pad_mask[i] is true for slots beyond the real entries (length l_sub).
struct SubSequence {
    std::vector<BehaviorEvent> entries;
    int context_category = -1;
    int l_sub = 0;
    std::int64_t reference_time = 0;
    std::vector<bool> pad_mask;

    int size() const { return static_cast<int>(entries.size()); }
    bool empty() const { return entries.empty(); }
};

// Most recent <= l_sub events of `log` in `context_category`, chronological.
// `as_of` becomes the recency reference; events are not filtered by it.
SubSequence hard_search(const BehaviorLog& log, int context_category, int l_sub, std::int64_t as_of);

// Reference time defaults to the log's last timestamp (0 for an empty log).
SubSequence hard_search(const BehaviorLog& log, int context_category, int l_sub);

// Same search restricted to events strictly before `cutoff`; used when
// building training samples so the positive and anything after it stay out.
SubSequence hard_search_before(const BehaviorLog& log, int context_category, int l_sub,
                               std::int64_t cutoff);

// Most recent <= l_sub events of any category (the short-sequence ablation
// arm). The result still carries `context_category` for encoding.
SubSequence recent_any_category(const BehaviorLog& log, int context_category, int l_sub,
                                std::int64_t as_of);
SubSequence recent_any_category_before(const BehaviorLog& log, int context_category, int l_sub,
                                       std::int64_t cutoff);

// Exact multiset partition of the log's timestamps by category.
std::map<int, std::vector<std::int64_t>> engagement_counts(const BehaviorLog& log);

struct UserProfile {
    int user_id = 0;
    std::vector<int> profile_tokens;
};

// In-memory dataset store: catalog plus one log and profile per user.
// Mutation happens only while loading; reads afterwards are concurrent-safe.
class BehaviorStore {
public:
    void load_jsonl(const std::string& path);
    void load_dataset(const datagen::Dataset& dataset);

    const Catalog& catalog() const { return catalog_; }
    const std::vector<BehaviorLog>& logs() const { return logs_; }
    const std::vector<UserProfile>& profiles() const { return profiles_; }

    bool has_user(int user_id) const { return index_.count(user_id) > 0; }
    const BehaviorLog& log_of(int user_id) const;
    const UserProfile& profile_of(int user_id) const;

    // Replaces all logs (e.g. with the train side of a split), keeping
    // catalog and profiles.
    void set_logs(std::vector<BehaviorLog> logs);

private:
    void rebuild_index();

    Catalog catalog_;
    std::vector<BehaviorLog> logs_;
    std::vector<UserProfile> profiles_;
    std::unordered_map<int, std::size_t> index_;
};

}  // namespace ctxr::seqstore
