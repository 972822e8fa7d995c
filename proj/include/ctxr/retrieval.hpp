#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ctxr/encoder.hpp"
#include "ctxr/interest.hpp"
#include "ctxr/seqstore.hpp"
#include "ctxr/training.hpp"

namespace ctxr::retrieval {

enum class Backend { kExact, kGraph };

struct GraphParams {
    int max_degree = 16;
    int ef_construction = 200;
    int ef_search = 128;
};

struct ScoredItem {
    int item_id = 0;
    double score = 0.0;  // cosine / temperature
};

// Item-vector index for one category. The exact backend is a linear scan
// and bit-matches a brute-force oracle; the graph backend is a single-layer
// bounded-degree proximity graph searched greedy best-first.
class CategoryIndex {
public:
    CategoryIndex() = default;

    static CategoryIndex build(int category_id, std::vector<int> item_ids,
                               std::vector<double> vectors, int dim, Backend backend,
                               const GraphParams& graph_params);

    // Top-k by cosine score; ties break toward the lower item id. k beyond
    // the index size returns everything.
    std::vector<ScoredItem> query(std::span<const double> user_vec, int k,
                                  double temperature) const;

    int category_id() const { return category_id_; }
    Backend backend() const { return backend_; }
    int size() const { return static_cast<int>(item_ids_.size()); }
    int dim() const { return dim_; }
    const std::vector<int>& item_ids() const { return item_ids_; }
    const std::vector<double>& vectors() const { return vectors_; }
    const GraphParams& graph_params() const { return graph_params_; }
    const std::vector<int>& adjacency() const { return adjacency_; }

private:
    void build_graph();
    std::vector<std::pair<double, int>> graph_search(std::span<const double> query, int ef) const;
    std::vector<std::pair<double, int>> graph_search_partial(
        const std::vector<std::vector<int>>& adj, int target) const;

    int category_id_ = -1;
    Backend backend_ = Backend::kExact;
    int dim_ = 0;
    std::vector<int> item_ids_;
    std::vector<double> vectors_;  // size x dim, unit rows
    GraphParams graph_params_;
    std::vector<int> adjacency_;   // size x max_degree, -1 padded

    friend std::map<int, CategoryIndex> load_indexes(const std::string& path);
};

// Encodes every catalog item and partitions the vectors by category.
// Empty categories get empty, queryable indexes.
std::map<int, CategoryIndex> build_indexes(const encoder::ModelParams& params,
                                           const datagen::Catalog& catalog, Backend backend,
                                           const GraphParams& graph_params);

enum class MergeStrategy { kInterleave, kGlobalScore, kQuota };

struct MergedItem {
    int item_id = 0;
    double score = 0.0;
    int source_category = -1;
};

// Merges per-category ranked lists (given in selection order). Duplicates
// keep their highest-scored occurrence before the strategy applies.
std::vector<MergedItem> merge(const std::vector<std::pair<int, std::vector<ScoredItem>>>& lists,
                              MergeStrategy strategy, int quota, int k_total);

enum class SelectionMode { kRandomInTop, kTopN };

struct RetrievalConfig {
    interest::SelectionConfig selection;
    SelectionMode selection_mode = SelectionMode::kRandomInTop;
    int per_category_k = 100;
    int k_total = 200;
    MergeStrategy merge_strategy = MergeStrategy::kInterleave;
    int quota = 0;  // used by the quota strategy
    std::int64_t now = 0;
    training::SeqMode seq_mode = training::SeqMode::kHardSearch;
};

struct RetrievalResult {
    std::vector<int> selected_categories;
    std::map<int, std::vector<ScoredItem>> per_category;
    std::map<int, int> subseq_lengths;
    std::vector<MergedItem> merged;
    std::vector<std::string> diagnostics;
};

// One user-encoder pass and one sub-index query per selected interest,
// then merge. Selected categories without an index are skipped and noted
// in diagnostics.
RetrievalResult multi_retrieve(const encoder::ModelParams& params,
                               const datagen::BehaviorLog& log, std::span<const int> profile,
                               const std::map<int, CategoryIndex>& indexes,
                               const RetrievalConfig& config);

// Whole-map snapshot: header (backend, params) + per-index ids, vectors and
// graph adjacency. Exact-backend queries reproduce bit-identically on reload.
void save_indexes(const std::map<int, CategoryIndex>& indexes, const std::string& path);
std::map<int, CategoryIndex> load_indexes(const std::string& path);

}  // namespace ctxr::retrieval
