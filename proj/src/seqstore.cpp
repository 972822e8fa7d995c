#include "ctxr/seqstore.hpp"

#include <algorithm>

#include <nlohmann/json.hpp>

#include "ctxr/common.hpp"
#include "ctxr/gzio.hpp"

namespace ctxr::seqstore {

using nlohmann::json;

namespace {

SubSequence take_recent(const BehaviorLog& log, int context_category, int l_sub,
                        std::int64_t cutoff, bool has_cutoff, bool filter_category,
                        std::int64_t reference_time) {
    if (l_sub < 1) {
        throw ConfigError("hard_search: l_sub must be >= 1");
    }
    SubSequence seq;
    seq.context_category = context_category;
    seq.l_sub = l_sub;
    seq.reference_time = reference_time;

    // walk backwards collecting matches, then restore chronological order
    for (auto it = log.events.rbegin(); it != log.events.rend(); ++it) {
        if (has_cutoff && it->timestamp >= cutoff) {
            continue;
        }
        if (filter_category && it->category_id != context_category) {
            continue;
        }
        seq.entries.push_back(*it);
        if (seq.size() == l_sub) {
            break;
        }
    }
    std::reverse(seq.entries.begin(), seq.entries.end());

    seq.pad_mask.assign(static_cast<std::size_t>(l_sub), true);
    for (int i = 0; i < seq.size(); ++i) {
        seq.pad_mask[static_cast<std::size_t>(i)] = false;
    }
    return seq;
}

std::int64_t last_timestamp(const BehaviorLog& log) {
    return log.events.empty() ? 0 : log.events.back().timestamp;
}

}  // namespace

SubSequence hard_search(const BehaviorLog& log, int context_category, int l_sub, std::int64_t as_of) {
    return take_recent(log, context_category, l_sub, 0, false, true, as_of);
}

SubSequence hard_search(const BehaviorLog& log, int context_category, int l_sub) {
    return hard_search(log, context_category, l_sub, last_timestamp(log));
}

SubSequence hard_search_before(const BehaviorLog& log, int context_category, int l_sub,
                               std::int64_t cutoff) {
    return take_recent(log, context_category, l_sub, cutoff, true, true, cutoff);
}

SubSequence recent_any_category(const BehaviorLog& log, int context_category, int l_sub,
                                std::int64_t as_of) {
    return take_recent(log, context_category, l_sub, 0, false, false, as_of);
}

SubSequence recent_any_category_before(const BehaviorLog& log, int context_category, int l_sub,
                                       std::int64_t cutoff) {
    return take_recent(log, context_category, l_sub, cutoff, true, false, cutoff);
}

std::map<int, std::vector<std::int64_t>> engagement_counts(const BehaviorLog& log) {
    std::map<int, std::vector<std::int64_t>> counts;
    for (const auto& ev : log.events) {
        counts[ev.category_id].push_back(ev.timestamp);
    }
    return counts;
}

void BehaviorStore::load_jsonl(const std::string& path) {
    const auto lines = read_lines(path);
    if (lines.empty()) {
        throw IoError("dataset file is empty: " + path);
    }
    catalog_ = Catalog{};
    logs_.clear();
    profiles_.clear();

    bool have_catalog = false;
    for (const auto& line : lines) {
        json rec = json::parse(line);
        const std::string type = rec.at("type").get<std::string>();
        if (type == "catalog") {
            catalog_.num_categories = rec.at("num_categories").get<int>();
            const auto& items = rec.at("items");
            catalog_.items.reserve(items.size());
            for (const auto& it : items) {
                catalog_.items.push_back({it.at(0).get<int>(), it.at(1).get<int>()});
            }
            catalog_.popularity = rec.at("popularity").get<std::vector<double>>();
            have_catalog = true;
        } else if (type == "user") {
            UserProfile profile;
            profile.user_id = rec.at("user_id").get<int>();
            profile.profile_tokens = rec.at("profile").get<std::vector<int>>();
            BehaviorLog log;
            log.user_id = profile.user_id;
            for (const auto& ev : rec.at("events")) {
                log.events.push_back(
                    {ev.at(0).get<int>(), ev.at(1).get<int>(), ev.at(2).get<std::int64_t>()});
            }
            profiles_.push_back(std::move(profile));
            logs_.push_back(std::move(log));
        } else {
            throw IoError("unknown record type '" + type + "' in " + path);
        }
    }
    if (!have_catalog) {
        throw IoError("dataset has no catalog record: " + path);
    }
    rebuild_index();
}

void BehaviorStore::load_dataset(const datagen::Dataset& dataset) {
    catalog_ = dataset.catalog;
    logs_ = dataset.logs;
    profiles_.clear();
    profiles_.reserve(dataset.users.size());
    for (const auto& u : dataset.users) {
        profiles_.push_back({u.user_id, u.profile_tokens});
    }
    rebuild_index();
}

const BehaviorLog& BehaviorStore::log_of(int user_id) const {
    auto it = index_.find(user_id);
    if (it == index_.end()) {
        throw std::out_of_range("unknown user_id " + std::to_string(user_id));
    }
    return logs_[it->second];
}

const UserProfile& BehaviorStore::profile_of(int user_id) const {
    auto it = index_.find(user_id);
    if (it == index_.end()) {
        throw std::out_of_range("unknown user_id " + std::to_string(user_id));
    }
    return profiles_[it->second];
}

void BehaviorStore::set_logs(std::vector<BehaviorLog> logs) {
    logs_ = std::move(logs);
    rebuild_index();
}

void BehaviorStore::rebuild_index() {
    index_.clear();
    for (std::size_t i = 0; i < logs_.size(); ++i) {
        index_[logs_[i].user_id] = i;
    }
}

}  // namespace ctxr::seqstore
