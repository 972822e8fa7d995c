#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctxr/datagen.hpp"
#include "ctxr/encoder.hpp"
#include "ctxr/eval.hpp"
#include "ctxr/retrieval.hpp"
#include "ctxr/training.hpp"

namespace ctxr::config {

// Whole-run configuration: `key = value` sections in a single file, every
// key overridable with --set section.key=value. Unknown keys are rejected
// with the offending name.
struct RunConfig {
    datagen::GenConfig gen;
    int holdout_per_user = 2;
    bool gzip = false;

    encoder::ModelConfig model;  // table sizes resolved against the dataset
    training::TrainConfig train;

    interest::SelectionConfig selection;
    retrieval::SelectionMode selection_mode = retrieval::SelectionMode::kRandomInTop;
    retrieval::Backend backend = retrieval::Backend::kExact;
    retrieval::GraphParams graph;
    int per_category_k = 100;
    int k_total = 200;
    retrieval::MergeStrategy merge_strategy = retrieval::MergeStrategy::kInterleave;
    int quota = 1;
    std::int64_t now = -1;  // -1 resolves to the data horizon

    std::vector<int> recall_ks = {10, 50, 100};
    int leakage_negatives = 64;

    std::uint64_t seed = 7;
    std::optional<std::uint64_t> data_seed, train_seed, selection_seed;
    std::string out_dir = "runs/default";

    void set(const std::string& section, const std::string& key, const std::string& value);

    // Per-stage seeds default to the master seed.
    std::uint64_t resolved_data_seed() const { return data_seed.value_or(seed); }
    std::uint64_t resolved_train_seed() const { return train_seed.value_or(seed); }
    std::uint64_t resolved_selection_seed() const { return selection_seed.value_or(seed); }
    std::int64_t resolved_now() const { return now >= 0 ? now : gen.horizon_days; }

    retrieval::RetrievalConfig retrieval_config() const;
    eval::EvalOptions eval_options() const;

    nlohmann::json echo() const;
};

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides);

// Applies "section.key=value" strings on top of a config.
void apply_overrides(RunConfig& config, const std::vector<std::string>& overrides);

// Fills model table sizes from a loaded dataset and checks the profile
// shape against it.
void resolve_model(RunConfig& config, const seqstore::BehaviorStore& store);

}  // namespace ctxr::config
