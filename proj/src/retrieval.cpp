#include "ctxr/retrieval.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <queue>
#include <unordered_map>

#include "ctxr/common.hpp"

namespace ctxr::retrieval {

namespace {

constexpr char kMagic[8] = {'C', 'T', 'X', 'R', 'I', 'D', 'X', '1'};
constexpr std::uint32_t kVersion = 1;

double dot(const double* a, const double* b, int n) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
        s += a[i] * b[i];
    }
    return s;
}

// (score, node) ordering used everywhere: higher score first, lower node
// index on ties, so every heap and sort below is fully deterministic.
struct BetterFirst {
    bool operator()(const std::pair<double, int>& a, const std::pair<double, int>& b) const {
        if (a.first != b.first) {
            return a.first > b.first;
        }
        return a.second < b.second;
    }
};

}  // namespace

CategoryIndex CategoryIndex::build(int category_id, std::vector<int> item_ids,
                                   std::vector<double> vectors, int dim, Backend backend,
                                   const GraphParams& graph_params) {
    if (dim < 1) {
        throw ConfigError("index: dim must be >= 1");
    }
    if (vectors.size() != item_ids.size() * static_cast<std::size_t>(dim)) {
        throw ConfigError("index: vector payload does not match item count");
    }
    CategoryIndex idx;
    idx.category_id_ = category_id;
    idx.backend_ = backend;
    idx.dim_ = dim;
    idx.item_ids_ = std::move(item_ids);
    idx.vectors_ = std::move(vectors);
    idx.graph_params_ = graph_params;
    if (backend == Backend::kGraph) {
        if (graph_params.max_degree < 1 || graph_params.ef_construction < 1 ||
            graph_params.ef_search < 1) {
            throw ConfigError("index: graph params must be >= 1");
        }
        idx.build_graph();
    }
    return idx;
}

void CategoryIndex::build_graph() {
    const int n = size();
    const int deg = graph_params_.max_degree;
    std::vector<std::vector<int>> adj(static_cast<std::size_t>(n));

    auto node_score = [&](int a, int b) {
        return dot(vectors_.data() + static_cast<std::size_t>(a) * dim_,
                   vectors_.data() + static_cast<std::size_t>(b) * dim_, dim_);
    };
    auto prune = [&](int node) {
        auto& lst = adj[static_cast<std::size_t>(node)];
        if (static_cast<int>(lst.size()) <= deg) {
            return;
        }
        std::vector<std::pair<double, int>> scored;
        scored.reserve(lst.size());
        for (int nb : lst) {
            scored.emplace_back(node_score(node, nb), nb);
        }
        std::sort(scored.begin(), scored.end(), BetterFirst{});
        lst.clear();
        for (int i = 0; i < deg; ++i) {
            lst.push_back(scored[static_cast<std::size_t>(i)].second);
        }
    };

    // incremental insertion in storage order; node 0 is the entry point
    adjacency_.assign(static_cast<std::size_t>(n) * deg, -1);
    for (int node = 1; node < n; ++node) {
        // flatten current adjacency view for search
        auto candidates = graph_search_partial(adj, node);
        std::sort(candidates.begin(), candidates.end(), BetterFirst{});
        const int take = std::min<int>(deg, static_cast<int>(candidates.size()));
        for (int i = 0; i < take; ++i) {
            const int nb = candidates[static_cast<std::size_t>(i)].second;
            adj[static_cast<std::size_t>(node)].push_back(nb);
            adj[static_cast<std::size_t>(nb)].push_back(node);
            prune(nb);
        }
        prune(node);
    }
    for (int node = 0; node < n; ++node) {
        const auto& lst = adj[static_cast<std::size_t>(node)];
        for (std::size_t i = 0; i < lst.size(); ++i) {
            adjacency_[static_cast<std::size_t>(node) * deg + i] = lst[i];
        }
    }
}

// Greedy best-first search over the partially built graph, querying with
// node `target`'s own vector. Only nodes < target exist yet.
std::vector<std::pair<double, int>> CategoryIndex::graph_search_partial(
    const std::vector<std::vector<int>>& adj, int target) const {
    const double* q = vectors_.data() + static_cast<std::size_t>(target) * dim_;
    const int ef = graph_params_.ef_construction;
    std::vector<char> visited(static_cast<std::size_t>(target), 0);

    std::priority_queue<std::pair<double, int>, std::vector<std::pair<double, int>>, BetterFirst>
        results;  // top() = worst kept
    auto cmp_explore = [](const std::pair<double, int>& a, const std::pair<double, int>& b) {
        if (a.first != b.first) {
            return a.first < b.first;
        }
        return a.second > b.second;
    };
    std::priority_queue<std::pair<double, int>, std::vector<std::pair<double, int>>,
                        decltype(cmp_explore)>
        frontier(cmp_explore);  // top() = best unexplored

    const int entry = 0;
    const double es = dot(q, vectors_.data(), dim_);
    visited[static_cast<std::size_t>(entry)] = 1;
    results.emplace(es, entry);
    frontier.emplace(es, entry);

    while (!frontier.empty()) {
        const auto [cs, cn] = frontier.top();
        if (static_cast<int>(results.size()) >= ef && cs < results.top().first) {
            break;
        }
        frontier.pop();
        for (int nb : adj[static_cast<std::size_t>(cn)]) {
            if (nb >= target || visited[static_cast<std::size_t>(nb)]) {
                continue;
            }
            visited[static_cast<std::size_t>(nb)] = 1;
            const double s = dot(q, vectors_.data() + static_cast<std::size_t>(nb) * dim_, dim_);
            if (static_cast<int>(results.size()) < ef || s > results.top().first) {
                results.emplace(s, nb);
                frontier.emplace(s, nb);
                if (static_cast<int>(results.size()) > ef) {
                    results.pop();
                }
            }
        }
    }
    std::vector<std::pair<double, int>> out;
    out.reserve(results.size());
    while (!results.empty()) {
        out.push_back(results.top());
        results.pop();
    }
    return out;
}

std::vector<std::pair<double, int>> CategoryIndex::graph_search(std::span<const double> query,
                                                                int ef) const {
    const int n = size();
    std::vector<char> visited(static_cast<std::size_t>(n), 0);
    const int deg = graph_params_.max_degree;

    std::priority_queue<std::pair<double, int>, std::vector<std::pair<double, int>>, BetterFirst>
        results;
    auto cmp_explore = [](const std::pair<double, int>& a, const std::pair<double, int>& b) {
        if (a.first != b.first) {
            return a.first < b.first;
        }
        return a.second > b.second;
    };
    std::priority_queue<std::pair<double, int>, std::vector<std::pair<double, int>>,
                        decltype(cmp_explore)>
        frontier(cmp_explore);

    const int entry = 0;
    const double es = dot(query.data(), vectors_.data(), dim_);
    visited[0] = 1;
    results.emplace(es, entry);
    frontier.emplace(es, entry);

    while (!frontier.empty()) {
        const auto [cs, cn] = frontier.top();
        if (static_cast<int>(results.size()) >= ef && cs < results.top().first) {
            break;
        }
        frontier.pop();
        const int* nbs = adjacency_.data() + static_cast<std::size_t>(cn) * deg;
        for (int e = 0; e < deg; ++e) {
            const int nb = nbs[e];
            if (nb < 0) {
                break;
            }
            if (visited[static_cast<std::size_t>(nb)]) {
                continue;
            }
            visited[static_cast<std::size_t>(nb)] = 1;
            const double s = dot(query.data(), vectors_.data() + static_cast<std::size_t>(nb) * dim_, dim_);
            if (static_cast<int>(results.size()) < ef || s > results.top().first) {
                results.emplace(s, nb);
                frontier.emplace(s, nb);
                if (static_cast<int>(results.size()) > ef) {
                    results.pop();
                }
            }
        }
    }
    std::vector<std::pair<double, int>> out;
    out.reserve(results.size());
    while (!results.empty()) {
        out.push_back(results.top());
        results.pop();
    }
    return out;
}

std::vector<ScoredItem> CategoryIndex::query(std::span<const double> user_vec, int k,
                                             double temperature) const {
    if (k < 1) {
        throw ConfigError("query: k must be >= 1");
    }
    if (static_cast<int>(user_vec.size()) != dim_) {
        throw ConfigError("query: vector dimension mismatch");
    }
    const int n = size();
    if (n == 0) {
        return {};
    }
    std::vector<std::pair<double, int>> scored;  // (raw cosine, row)
    if (backend_ == Backend::kExact) {
        scored.reserve(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            scored.emplace_back(dot(user_vec.data(), vectors_.data() + static_cast<std::size_t>(i) * dim_, dim_), i);
        }
    } else {
        scored = graph_search(user_vec, std::max(graph_params_.ef_search, k));
    }
    auto by_score_then_id = [&](const std::pair<double, int>& a, const std::pair<double, int>& b) {
        if (a.first != b.first) {
            return a.first > b.first;
        }
        return item_ids_[static_cast<std::size_t>(a.second)] <
               item_ids_[static_cast<std::size_t>(b.second)];
    };
    const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(k), scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take),
                      scored.end(), by_score_then_id);
    std::vector<ScoredItem> out;
    out.reserve(take);
    for (std::size_t i = 0; i < take; ++i) {
        out.push_back({item_ids_[static_cast<std::size_t>(scored[i].second)],
                       scored[i].first / temperature});
    }
    return out;
}

std::map<int, CategoryIndex> build_indexes(const encoder::ModelParams& params,
                                           const datagen::Catalog& catalog, Backend backend,
                                           const GraphParams& graph_params) {
    const int dim = params.config.dim;
    std::map<int, std::pair<std::vector<int>, std::vector<double>>> parts;
    for (int c = 0; c < catalog.num_categories; ++c) {
        parts[c];  // empty categories still get an index
    }
    for (const auto& item : catalog.items) {
        const auto vec = encoder::encode_item(params, item.item_id, item.category_id);
        auto& [ids, vecs] = parts[item.category_id];
        ids.push_back(item.item_id);
        vecs.insert(vecs.end(), vec.begin(), vec.end());
    }
    std::map<int, CategoryIndex> out;
    for (auto& [cat, part] : parts) {
        out.emplace(cat, CategoryIndex::build(cat, std::move(part.first), std::move(part.second),
                                              dim, backend, graph_params));
    }
    return out;
}

std::vector<MergedItem> merge(const std::vector<std::pair<int, std::vector<ScoredItem>>>& lists,
                              MergeStrategy strategy, int quota, int k_total) {
    if (k_total < 1) {
        throw ConfigError("merge: k_total must be >= 1");
    }
    if (strategy == MergeStrategy::kQuota && quota < 1) {
        throw ConfigError("merge: quota strategy needs quota >= 1");
    }

    // keep only the highest-scored occurrence of each item
    std::unordered_map<int, std::pair<std::size_t, std::size_t>> best;  // item -> (list, rank)
    for (std::size_t li = 0; li < lists.size(); ++li) {
        const auto& items = lists[li].second;
        for (std::size_t r = 0; r < items.size(); ++r) {
            auto it = best.find(items[r].item_id);
            if (it == best.end()) {
                best.emplace(items[r].item_id, std::make_pair(li, r));
            } else {
                const auto& cur = lists[it->second.first].second[it->second.second];
                if (items[r].score > cur.score) {
                    it->second = {li, r};
                }
            }
        }
    }
    std::vector<std::vector<MergedItem>> cleaned(lists.size());
    for (std::size_t li = 0; li < lists.size(); ++li) {
        const auto& items = lists[li].second;
        for (std::size_t r = 0; r < items.size(); ++r) {
            const auto& b = best.at(items[r].item_id);
            if (b.first == li && b.second == r) {
                cleaned[li].push_back({items[r].item_id, items[r].score, lists[li].first});
            }
        }
    }

    auto by_score_then_id = [](const MergedItem& a, const MergedItem& b) {
        if (a.score != b.score) {
            return a.score > b.score;
        }
        return a.item_id < b.item_id;
    };

    std::vector<MergedItem> out;
    switch (strategy) {
        case MergeStrategy::kInterleave: {
            std::size_t rank = 0;
            bool any = true;
            while (any && static_cast<int>(out.size()) < k_total) {
                any = false;
                for (const auto& lst : cleaned) {
                    if (rank < lst.size()) {
                        any = true;
                        out.push_back(lst[rank]);
                        if (static_cast<int>(out.size()) == k_total) {
                            break;
                        }
                    }
                }
                ++rank;
            }
            break;
        }
        case MergeStrategy::kGlobalScore: {
            for (const auto& lst : cleaned) {
                out.insert(out.end(), lst.begin(), lst.end());
            }
            std::sort(out.begin(), out.end(), by_score_then_id);
            if (static_cast<int>(out.size()) > k_total) {
                out.resize(static_cast<std::size_t>(k_total));
            }
            break;
        }
        case MergeStrategy::kQuota: {
            std::vector<MergedItem> picks, rest;
            for (const auto& lst : cleaned) {
                for (std::size_t r = 0; r < lst.size(); ++r) {
                    (r < static_cast<std::size_t>(quota) ? picks : rest).push_back(lst[r]);
                }
            }
            std::sort(picks.begin(), picks.end(), by_score_then_id);
            std::sort(rest.begin(), rest.end(), by_score_then_id);
            out = std::move(picks);
            out.insert(out.end(), rest.begin(), rest.end());
            if (static_cast<int>(out.size()) > k_total) {
                out.resize(static_cast<std::size_t>(k_total));
            }
            break;
        }
    }
    return out;
}

RetrievalResult multi_retrieve(const encoder::ModelParams& params,
                               const datagen::BehaviorLog& log, std::span<const int> profile,
                               const std::map<int, CategoryIndex>& indexes,
                               const RetrievalConfig& config) {
    RetrievalResult result;
    const auto scores = interest::engagement_score(log, config.now);
    result.selected_categories = config.selection_mode == SelectionMode::kRandomInTop
                                     ? interest::random_in_top(scores, config.selection)
                                     : interest::top_n(scores, config.selection.pick_n);
    if (result.selected_categories.empty()) {
        result.diagnostics.push_back("no positive-score interests; nothing retrieved");
        return result;
    }

    std::vector<std::pair<int, std::vector<ScoredItem>>> lists;
    for (int cat : result.selected_categories) {
        auto it = indexes.find(cat);
        if (it == indexes.end()) {
            result.diagnostics.push_back("skipped category " + std::to_string(cat) +
                                         ": no index");
            continue;
        }
        const auto seq =
            config.seq_mode == training::SeqMode::kHardSearch
                ? seqstore::hard_search(log, cat, params.config.subseq_len, config.now)
                : seqstore::recent_any_category(log, cat, params.config.subseq_len, config.now);
        result.subseq_lengths[cat] = seq.size();
        const auto user_vec = encoder::encode_user(params, profile, seq);
        auto ranked = it->second.query(user_vec, config.per_category_k, params.config.temperature);
        result.per_category[cat] = ranked;
        lists.emplace_back(cat, std::move(ranked));
    }
    result.merged = merge(lists, config.merge_strategy, config.quota, config.k_total);
    return result;
}

void save_indexes(const std::map<int, CategoryIndex>& indexes, const std::string& path) {
    std::vector<unsigned char> out;
    out.insert(out.end(), kMagic, kMagic + 8);
    put_u32_le(out, kVersion);
    int dim = 0;
    Backend backend = Backend::kExact;
    GraphParams gp;
    if (!indexes.empty()) {
        dim = indexes.begin()->second.dim();
        backend = indexes.begin()->second.backend();
        gp = indexes.begin()->second.graph_params();
    }
    put_u32_le(out, static_cast<std::uint32_t>(dim));
    put_u32_le(out, backend == Backend::kExact ? 0u : 1u);
    put_u32_le(out, static_cast<std::uint32_t>(gp.max_degree));
    put_u32_le(out, static_cast<std::uint32_t>(gp.ef_construction));
    put_u32_le(out, static_cast<std::uint32_t>(gp.ef_search));
    put_u32_le(out, static_cast<std::uint32_t>(indexes.size()));
    for (const auto& [cat, idx] : indexes) {
        put_u32_le(out, static_cast<std::uint32_t>(cat));
        put_u64_le(out, static_cast<std::uint64_t>(idx.size()));
        for (int id : idx.item_ids()) {
            put_u64_le(out, static_cast<std::uint64_t>(id));
        }
        for (double v : idx.vectors()) {
            put_u64_le(out, std::bit_cast<std::uint64_t>(v));
        }
        if (idx.backend() == Backend::kGraph) {
            for (int a : idx.adjacency()) {
                put_u64_le(out, static_cast<std::uint64_t>(static_cast<std::int64_t>(a)));
            }
        }
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open index snapshot for writing: " + path);
    }
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) {
        throw IoError("index snapshot write failed: " + path);
    }
}

std::map<int, CategoryIndex> load_indexes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open index snapshot: " + path);
    }
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    std::size_t pos = 0;
    auto need = [&](std::size_t k) {
        if (pos + k > buf.size()) {
            throw IoError("index snapshot truncated: " + path);
        }
    };
    need(8);
    if (std::memcmp(buf.data(), kMagic, 8) != 0) {
        throw IoError("bad index snapshot magic: " + path);
    }
    pos = 8;
    auto read_u32 = [&]() {
        need(4);
        const std::uint32_t v = get_u32_le(buf.data() + pos);
        pos += 4;
        return v;
    };
    auto read_u64 = [&]() {
        need(8);
        const std::uint64_t v = get_u64_le(buf.data() + pos);
        pos += 8;
        return v;
    };
    if (read_u32() != kVersion) {
        throw IoError("unsupported index snapshot version");
    }
    const int dim = static_cast<int>(read_u32());
    const Backend backend = read_u32() == 0 ? Backend::kExact : Backend::kGraph;
    GraphParams gp;
    gp.max_degree = static_cast<int>(read_u32());
    gp.ef_construction = static_cast<int>(read_u32());
    gp.ef_search = static_cast<int>(read_u32());
    const std::uint32_t count = read_u32();

    std::map<int, CategoryIndex> out;
    for (std::uint32_t i = 0; i < count; ++i) {
        const int cat = static_cast<int>(read_u32());
        const std::size_t n = static_cast<std::size_t>(read_u64());
        CategoryIndex idx;
        idx.category_id_ = cat;
        idx.backend_ = backend;
        idx.dim_ = dim;
        idx.graph_params_ = gp;
        idx.item_ids_.resize(n);
        for (auto& id : idx.item_ids_) {
            id = static_cast<int>(read_u64());
        }
        idx.vectors_.resize(n * static_cast<std::size_t>(dim));
        for (auto& v : idx.vectors_) {
            v = std::bit_cast<double>(read_u64());
        }
        if (backend == Backend::kGraph) {
            idx.adjacency_.resize(n * static_cast<std::size_t>(gp.max_degree));
            for (auto& a : idx.adjacency_) {
                a = static_cast<int>(static_cast<std::int64_t>(read_u64()));
            }
        }
        out.emplace(cat, std::move(idx));
    }
    if (pos != buf.size()) {
        throw IoError("trailing bytes in index snapshot: " + path);
    }
    return out;
}

}  // namespace ctxr::retrieval
