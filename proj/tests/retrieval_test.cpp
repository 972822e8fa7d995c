#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "ctxr/common.hpp"
#include "ctxr/datagen.hpp"
#include "ctxr/retrieval.hpp"
#include "ctxr/rng.hpp"

using namespace ctxr;
using retrieval::Backend;
using retrieval::CategoryIndex;
using retrieval::GraphParams;
using retrieval::MergeStrategy;
using retrieval::ScoredItem;

namespace {

std::vector<double> random_unit(Rng& rng, int dim) {
    std::vector<double> v(static_cast<std::size_t>(dim));
    double norm = 0.0;
    for (auto& x : v) {
        x = rng.normal();
        norm += x * x;
    }
    norm = std::sqrt(norm);
    for (auto& x : v) {
        x /= norm;
    }
    return v;
}

CategoryIndex random_index(Rng& rng, int n, int dim, Backend backend, GraphParams gp = {},
                           int id_stride = 1) {
    std::vector<int> ids;
    std::vector<double> vecs;
    for (int i = 0; i < n; ++i) {
        ids.push_back(i * id_stride);
        const auto v = random_unit(rng, dim);
        vecs.insert(vecs.end(), v.begin(), v.end());
    }
    return CategoryIndex::build(0, std::move(ids), std::move(vecs), dim, backend, gp);
}

// brute-force oracle: full sort of every (score, id)
std::vector<ScoredItem> linear_scan(const CategoryIndex& idx, const std::vector<double>& q, int k,
                                    double tau) {
    std::vector<ScoredItem> all;
    for (int i = 0; i < idx.size(); ++i) {
        double s = 0.0;
        for (int d = 0; d < idx.dim(); ++d) {
            s += q[static_cast<std::size_t>(d)] *
                 idx.vectors()[static_cast<std::size_t>(i) * idx.dim() + d];
        }
        all.push_back({idx.item_ids()[static_cast<std::size_t>(i)], s / tau});
    }
    std::sort(all.begin(), all.end(), [](const ScoredItem& a, const ScoredItem& b) {
        if (a.score != b.score) {
            return a.score > b.score;
        }
        return a.item_id < b.item_id;
    });
    if (static_cast<int>(all.size()) > k) {
        all.resize(static_cast<std::size_t>(k));
    }
    return all;
}

bool same_results(const std::vector<ScoredItem>& a, const std::vector<ScoredItem>& b) {
    if (a.size() != b.size()) {
        return false;
    }
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].item_id != b[i].item_id || a[i].score != b[i].score) {
            return false;
        }
    }
    return true;
}

std::vector<ScoredItem> list_of(std::initializer_list<std::pair<int, double>> items) {
    std::vector<ScoredItem> out;
    for (const auto& [id, s] : items) {
        out.push_back({id, s});
    }
    return out;
}

}  // namespace

TEST_CASE("exact backend bit-matches the linear-scan oracle") {
    Rng rng(42);
    const auto idx = random_index(rng, 200, 16, Backend::kExact, {}, 3);
    for (int rep = 0; rep < 200; ++rep) {
        const auto q = random_unit(rng, 16);
        const int k = 1 + static_cast<int>(rng.below(20));
        CHECK(same_results(idx.query(q, k, 0.05), linear_scan(idx, q, k, 0.05)));
    }
}

TEST_CASE("k beyond the index size returns the whole category sorted") {
    Rng rng(1);
    const auto idx = random_index(rng, 17, 8, Backend::kExact);
    const auto q = random_unit(rng, 8);
    const auto got = idx.query(q, 100, 1.0);
    CHECK(got.size() == 17);
    CHECK(std::is_sorted(got.begin(), got.end(),
                         [](const ScoredItem& a, const ScoredItem& b) { return a.score > b.score; }));
}

TEST_CASE("empty index returns an empty list") {
    const auto idx = CategoryIndex::build(3, {}, {}, 8, Backend::kExact, {});
    std::vector<double> q(8, 0.0);
    q[0] = 1.0;
    CHECK(idx.query(q, 10, 1.0).empty());
}

TEST_CASE("an indexed item queried with its own vector ranks first at score 1/tau") {
    Rng rng(7);
    const auto idx = random_index(rng, 50, 16, Backend::kExact);
    for (int i : {0, 13, 49}) {
        std::vector<double> q(idx.vectors().begin() + static_cast<std::ptrdiff_t>(i) * 16,
                              idx.vectors().begin() + static_cast<std::ptrdiff_t>(i + 1) * 16);
        const auto got = idx.query(q, 3, 0.05);
        REQUIRE(!got.empty());
        CHECK(got[0].item_id == idx.item_ids()[static_cast<std::size_t>(i)]);
        CHECK(got[0].score == doctest::Approx(20.0).epsilon(1e-9));
    }
}

TEST_CASE("graph backend reaches 0.95 recall against the exact oracle") {
    Rng rng(11);
    const int n = 2000, dim = 16;
    std::vector<int> ids(static_cast<std::size_t>(n));
    std::vector<double> vecs;
    for (int i = 0; i < n; ++i) {
        ids[static_cast<std::size_t>(i)] = i;
        const auto v = random_unit(rng, dim);
        vecs.insert(vecs.end(), v.begin(), v.end());
    }
    GraphParams gp;
    const auto exact = CategoryIndex::build(0, ids, vecs, dim, Backend::kExact, {});
    const auto graph = CategoryIndex::build(0, ids, vecs, dim, Backend::kGraph, gp);

    double hits = 0, total = 0;
    for (int rep = 0; rep < 100; ++rep) {
        const auto q = random_unit(rng, dim);
        const auto truth = exact.query(q, 10, 1.0);
        const auto approx = graph.query(q, 10, 1.0);
        std::set<int> truth_ids;
        for (const auto& r : truth) {
            truth_ids.insert(r.item_id);
        }
        for (const auto& r : approx) {
            hits += truth_ids.count(r.item_id) ? 1 : 0;
        }
        total += static_cast<double>(truth.size());
    }
    CHECK(hits / total >= 0.95);
}

TEST_CASE("merge keeps a single list unchanged under every strategy") {
    const auto lst = list_of({{4, 0.9}, {7, 0.5}, {1, 0.2}});
    for (auto strategy : {MergeStrategy::kInterleave, MergeStrategy::kGlobalScore, MergeStrategy::kQuota}) {
        const auto merged = retrieval::merge({{2, lst}}, strategy, 1, 10);
        REQUIRE(merged.size() == 3);
        for (std::size_t i = 0; i < 3; ++i) {
            CHECK(merged[i].item_id == lst[i].item_id);
            CHECK(merged[i].score == lst[i].score);
            CHECK(merged[i].source_category == 2);
        }
    }
}

TEST_CASE("global_score merge sorts the union by score") {
    const auto merged = retrieval::merge({{0, list_of({{1, 0.9}, {2, 0.5}})},
                                          {1, list_of({{3, 0.7}})}},
                                         MergeStrategy::kGlobalScore, 0, 3);
    REQUIRE(merged.size() == 3);
    CHECK(merged[0].score == 0.9);
    CHECK(merged[1].score == 0.7);
    CHECK(merged[2].score == 0.5);
}

TEST_CASE("quota merge takes per-list heads before backfilling") {
    const auto merged = retrieval::merge({{0, list_of({{1, 0.9}, {2, 0.5}})},
                                          {1, list_of({{3, 0.7}})}},
                                         MergeStrategy::kQuota, 1, 3);
    REQUIRE(merged.size() == 3);
    CHECK(merged[0].item_id == 1);  // 0.9, quota pick
    CHECK(merged[1].item_id == 3);  // 0.7, quota pick
    CHECK(merged[2].item_id == 2);  // 0.5, remainder
}

TEST_CASE("interleave merge alternates ranks while lists last") {
    const auto merged = retrieval::merge({{0, list_of({{1, 0.9}, {2, 0.8}, {3, 0.7}})},
                                          {1, list_of({{4, 0.6}, {5, 0.5}})}},
                                         MergeStrategy::kInterleave, 0, 10);
    std::vector<int> got;
    for (const auto& m : merged) {
        got.push_back(m.item_id);
    }
    CHECK(got == std::vector<int>{1, 4, 2, 5, 3});
}

TEST_CASE("merge dedupes to the highest-scored occurrence") {
    const auto merged = retrieval::merge({{0, list_of({{9, 0.4}, {2, 0.3}})},
                                          {1, list_of({{9, 0.8}, {5, 0.1}})}},
                                         MergeStrategy::kGlobalScore, 0, 10);
    REQUIRE(merged.size() == 3);
    CHECK(merged[0].item_id == 9);
    CHECK(merged[0].score == 0.8);
    CHECK(merged[0].source_category == 1);
}

TEST_CASE("interleave truncates at k_total") {
    const auto merged = retrieval::merge({{0, list_of({{1, 0.9}, {2, 0.8}})},
                                          {1, list_of({{3, 0.7}, {4, 0.6}})}},
                                         MergeStrategy::kInterleave, 0, 3);
    REQUIRE(merged.size() == 3);
}

TEST_CASE("index snapshots reload to identical query results") {
    Rng rng(23);
    datagen::GenConfig gcfg;
    gcfg.num_users = 5;
    gcfg.num_items = 120;
    gcfg.num_categories = 6;
    gcfg.mean_log_len = 10;
    gcfg.seed = 9;
    const auto d = datagen::generate(gcfg);

    encoder::ModelConfig mcfg;
    mcfg.dim = 16;
    mcfg.layers = 1;
    mcfg.heads = 2;
    mcfg.profile_tokens = 4;
    mcfg.subseq_len = 6;
    mcfg.num_items = d.catalog.num_items();
    mcfg.num_categories = d.catalog.num_categories;
    mcfg.profile_vocab = 64;
    const auto params = encoder::init_params(mcfg, 3);

    for (auto backend : {Backend::kExact, Backend::kGraph}) {
        GraphParams gp;
        gp.ef_construction = 40;
        gp.ef_search = 24;
        const auto built = retrieval::build_indexes(params, d.catalog, backend, gp);

        std::size_t total = 0;
        for (const auto& [cat, idx] : built) {
            total += static_cast<std::size_t>(idx.size());
        }
        CHECK(total == static_cast<std::size_t>(d.catalog.num_items()));

        const auto dir = std::filesystem::temp_directory_path() / "ctxr_retr_test";
        std::filesystem::create_directories(dir);
        const std::string path = (dir / "index.bin").string();
        retrieval::save_indexes(built, path);
        const auto loaded = retrieval::load_indexes(path);
        REQUIRE(loaded.size() == built.size());

        for (int rep = 0; rep < 20; ++rep) {
            const auto q = random_unit(rng, mcfg.dim);
            for (const auto& [cat, idx] : built) {
                CHECK(same_results(idx.query(q, 10, mcfg.temperature),
                                   loaded.at(cat).query(q, 10, mcfg.temperature)));
            }
        }
        std::filesystem::remove_all(dir);
    }
}

TEST_CASE("multi_retrieve honors selected interests and skips missing indexes") {
    datagen::GenConfig gcfg;
    gcfg.num_users = 10;
    gcfg.num_items = 90;
    gcfg.num_categories = 4;
    gcfg.mean_log_len = 30;
    gcfg.seed = 15;
    const auto d = datagen::generate(gcfg);

    encoder::ModelConfig mcfg;
    mcfg.dim = 16;
    mcfg.layers = 1;
    mcfg.heads = 2;
    mcfg.profile_tokens = 4;
    mcfg.subseq_len = 8;
    mcfg.num_items = d.catalog.num_items();
    mcfg.num_categories = d.catalog.num_categories;
    mcfg.profile_vocab = 64;
    const auto params = encoder::init_params(mcfg, 5);

    auto indexes = retrieval::build_indexes(params, d.catalog, Backend::kExact, {});

    retrieval::RetrievalConfig rc;
    rc.selection.top_m = 4;
    rc.selection.pick_n = 2;
    rc.selection.seed = 8;
    rc.per_category_k = 5;
    rc.k_total = 10;
    rc.now = gcfg.horizon_days;

    const auto& log = d.logs[0];
    const auto& profile = d.users[0].profile_tokens;

    const auto result = retrieval::multi_retrieve(params, log, profile, indexes, rc);
    CHECK(!result.selected_categories.empty());
    const std::set<int> selected(result.selected_categories.begin(),
                                 result.selected_categories.end());
    for (const auto& m : result.merged) {
        CHECK(selected.count(d.catalog.category_of(m.item_id)) == 1);
        CHECK(selected.count(m.source_category) == 1);
    }
    // scores can be recomputed from the towers
    for (const auto& [cat, ranked] : result.per_category) {
        const auto seq = seqstore::hard_search(log, cat, mcfg.subseq_len, rc.now);
        const auto u = encoder::encode_user(params, profile, seq);
        for (const auto& item : ranked) {
            const auto v = encoder::encode_item(params, d.catalog, item.item_id);
            CHECK(std::abs(item.score - encoder::score(u, v, mcfg.temperature)) <= 1e-6);
        }
    }

    // removing a selected category's index downgrades it to a diagnostic
    const int removed = result.selected_categories.front();
    indexes.erase(removed);
    const auto degraded = retrieval::multi_retrieve(params, log, profile, indexes, rc);
    bool noted = false;
    for (const auto& n : degraded.diagnostics) {
        noted = noted || n.find("skipped category " + std::to_string(removed)) != std::string::npos;
    }
    CHECK(noted);
    for (const auto& m : degraded.merged) {
        CHECK(d.catalog.category_of(m.item_id) != removed);
    }
}

TEST_CASE("empty log selects nothing and retrieves nothing") {
    datagen::BehaviorLog log;
    log.user_id = 0;
    encoder::ModelConfig mcfg;
    mcfg.dim = 8;
    mcfg.layers = 1;
    mcfg.heads = 2;
    mcfg.profile_tokens = 2;
    mcfg.subseq_len = 4;
    mcfg.num_items = 10;
    mcfg.num_categories = 2;
    mcfg.profile_vocab = 4;
    const auto params = encoder::init_params(mcfg, 1);
    datagen::Catalog catalog;
    catalog.num_categories = 2;
    for (int i = 0; i < 10; ++i) {
        catalog.items.push_back({i, i % 2});
    }
    const auto indexes = retrieval::build_indexes(params, catalog, Backend::kExact, {});
    retrieval::RetrievalConfig rc;
    rc.now = 10;
    const std::vector<int> profile{0, 1};
    const auto result = retrieval::multi_retrieve(params, log, profile, indexes, rc);
    CHECK(result.selected_categories.empty());
    CHECK(result.merged.empty());
    CHECK(!result.diagnostics.empty());
}
