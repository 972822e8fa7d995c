#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ctxr::datagen {

struct CatalogItem {
    int item_id = 0;
    int category_id = 0;
};

// Item universe. item_ids are dense in [0, num_items) and each item carries
// exactly one category. `popularity` is a per-item Zipf weight; `factors`
// are the low-dimensional latent item features the generator samples
// preferences against (not serialized, regeneratable from the seed).
struct Catalog {
    std::vector<CatalogItem> items;
    int num_categories = 0;
    std::vector<double> popularity;
    std::vector<std::vector<double>> factors;

    int num_items() const { return static_cast<int>(items.size()); }
    int category_of(int item_id) const;
};

struct SyntheticUser {
    int user_id = 0;
    std::vector<int> profile_tokens;
    std::vector<double> category_mixture;          // sums to 1
    std::vector<std::vector<double>> latent_taste; // per category, taste_dim each
};

struct BehaviorEvent {
    int item_id = 0;
    int category_id = 0;
    std::int64_t timestamp = 0;  // integer days since epoch
};

struct BehaviorLog {
    int user_id = 0;
    std::vector<BehaviorEvent> events;  // chronological
};

struct GenConfig {
    int num_users = 5000;
    int num_items = 20000;
    int num_categories = 50;
    int mean_log_len = 60;
    std::uint64_t seed = 7;

    int profile_tokens = 4;       // tokens per user
    int profile_vocab = 64;
    int taste_dim = 4;
    int horizon_days = 400;
    double dirichlet_alpha = 0.3; // sparse per-user interest mixtures
    double zipf_exponent = 1.1;   // item popularity
    double affinity_scale = 3.0;  // sharpness of within-category preference
};

struct Dataset {
    Catalog catalog;
    std::vector<SyntheticUser> users;
    std::vector<BehaviorLog> logs;
};

// Deterministic for a fixed config. Each event is drawn by first sampling a
// category from the user's mixture, then an item within that category with
// probability proportional to popularity * exp(affinity_scale * <taste, factors>).
Dataset generate(const GenConfig& config);

struct EvalPair {
    int user_id = 0;
    int item_id = 0;
    int category_id = 0;
    std::int64_t timestamp = 0;
};

struct Split {
    std::vector<BehaviorLog> train_logs;
    std::vector<EvalPair> eval_pairs;
};

// Holds out the last `holdout_per_user` events of each log long enough to
// spare them; shorter logs stay fully in train and contribute no pairs.
Split train_eval_split(const std::vector<BehaviorLog>& logs, int holdout_per_user);

// JSON Lines: one catalog record, then one record per user (profile, events).
// A ".gz" suffix on `path` selects gzip framing.
void write_jsonl(const Dataset& dataset, const std::string& path);

}  // namespace ctxr::datagen
