#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctxr/encoder.hpp"
#include "ctxr/retrieval.hpp"
#include "ctxr/seqstore.hpp"
#include "ctxr/training.hpp"

namespace ctxr::eval {

using datagen::EvalPair;

// All item vectors in one matrix, item id == row.
struct ItemVectors {
    int dim = 0;
    std::vector<double> data;
    const double* row(int item_id) const {
        return data.data() + static_cast<std::size_t>(item_id) * static_cast<std::size_t>(dim);
    }
};
ItemVectors encode_all_items(const encoder::ModelParams& params, const datagen::Catalog& catalog);

enum class Pool { kGlobal, kWithinCategory };

// Two-tower scoring surface for the leakage probe; tests inject synthetic
// scorers, production wraps a trained model.
class Scorer {
public:
    virtual ~Scorer() = default;
    virtual std::vector<double> user_vector(int user_id, int context_category,
                                            std::int64_t as_of) const = 0;
    virtual std::vector<double> item_vector(int item_id) const = 0;
    virtual double temperature() const = 0;
};

class ModelScorer : public Scorer {
public:
    ModelScorer(const encoder::ModelParams& params, const seqstore::BehaviorStore& store,
                training::SeqMode seq_mode);
    std::vector<double> user_vector(int user_id, int context_category,
                                    std::int64_t as_of) const override;
    std::vector<double> item_vector(int item_id) const override;
    double temperature() const override;

private:
    const encoder::ModelParams& params_;
    const seqstore::BehaviorStore& store_;
    training::SeqMode seq_mode_;
};

struct LeakageStats {
    double gap = 0.0;  // mean same-category score minus mean cross-category score
    double mean_same = 0.0;
    double mean_cross = 0.0;
    int pairs_used = 0;
};

// For each pair: score `negatives_per_side` random same-category and
// cross-category negatives against the user vector encoded with the
// positive's context. A large positive gap means the model scores by
// category match rather than within-category preference.
LeakageStats leakage_probe(const Scorer& scorer, const datagen::Catalog& catalog,
                           const std::vector<EvalPair>& pairs, int negatives_per_side,
                           std::uint64_t seed);

struct EvalOptions {
    std::vector<int> recall_ks = {10, 50, 100};
    int leakage_negatives = 64;
    std::uint64_t seed = 0;
    training::SeqMode seq_mode = training::SeqMode::kHardSearch;
};

struct EvalReport {
    std::string name;
    std::uint64_t seed = 0;
    std::map<std::string, double> recalls;  // "recall@10:global", "recall@50:within", ...
    std::optional<LeakageStats> leakage;
    std::optional<double> uniqueness_vs_baseline;
    std::string baseline_name;
    std::optional<int> category_coverage;   // distinct categories served across requests
    std::optional<double> merged_hit_rate;  // positives found in merged retrieval
    nlohmann::json config_echo;
};

// Recall at every configured k (global and within-category pools) plus the
// leakage probe, one user-encoder pass per pair.
EvalReport evaluate_model(const encoder::ModelParams& params,
                          const seqstore::BehaviorStore& train_store,
                          const std::vector<EvalPair>& pairs, const EvalOptions& options);

// Fraction of pairs whose positive lands in the model's top-k of the pool.
double recall_at_k(const encoder::ModelParams& params, const seqstore::BehaviorStore& train_store,
                   const std::vector<EvalPair>& pairs, int k, Pool pool,
                   training::SeqMode seq_mode = training::SeqMode::kHardSearch);

// Fraction of run_a's merged items absent from run_b's, averaged over
// requests (requests with an empty run_a list are skipped).
double uniqueness_ratio(const std::vector<std::vector<int>>& run_a,
                        const std::vector<std::vector<int>>& run_b);

// Per-request merged retrieval lists, for uniqueness and coverage metrics.
struct RetrievalRun {
    std::vector<int> request_users;
    std::vector<std::vector<int>> merged_items;
    std::vector<std::vector<int>> selected_categories;

    int category_coverage() const;
};

// Runs multi_retrieve for each user; the per-request selection seed is
// derived from base_config.selection.seed and the user id.
RetrievalRun run_retrieval(const encoder::ModelParams& params,
                           const seqstore::BehaviorStore& store,
                           const std::map<int, retrieval::CategoryIndex>& indexes,
                           const std::vector<int>& users,
                           const retrieval::RetrievalConfig& base_config);

// Single-vector baseline: one user encoding over recent events of any
// category, scored against the whole catalog.
RetrievalRun run_single_vector_retrieval(const encoder::ModelParams& params,
                                         const seqstore::BehaviorStore& store,
                                         const std::vector<int>& users, int k_total,
                                         std::int64_t now);

enum class Suite { kRandomVsTop, kLongSeq, kBatchMixing };
Suite suite_from_name(const std::string& name);
std::string suite_name(Suite suite);

struct SuiteConfig {
    datagen::GenConfig gen;
    encoder::ModelConfig model;  // table sizes filled from the generated data
    training::TrainConfig train;
    retrieval::RetrievalConfig retr;
    int holdout_per_user = 2;
    EvalOptions eval;
};

struct SuiteOutcome {
    std::string suite;
    EvalReport arm_a;  // the full method
    EvalReport arm_b;  // the ablated arm
};

// Trains/evaluates the paired configurations with a shared seed:
//   random_vs_top: one model, random-in-top vs deterministic top-N serving
//   long_seq:      hard-searched subsequences vs recent-any-category
//   batch_mixing:  single-category batches vs naive mixed batches
SuiteOutcome run_ablation(Suite suite, const SuiteConfig& config);

std::string to_json_string(const EvalReport& report);
std::string to_text_table(const std::vector<EvalReport>& reports);

}  // namespace ctxr::eval
