#include "ctxr/eval.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <unordered_map>

#include "ctxr/common.hpp"
#include "ctxr/rng.hpp"

namespace ctxr::eval {

using encoder::ModelParams;
using nlohmann::json;
using seqstore::BehaviorStore;

namespace {

double dot(const double* a, const double* b, int n) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
        s += a[i] * b[i];
    }
    return s;
}

std::vector<std::vector<int>> items_by_category(const datagen::Catalog& catalog) {
    std::vector<std::vector<int>> by_cat(static_cast<std::size_t>(catalog.num_categories));
    for (const auto& item : catalog.items) {
        by_cat[static_cast<std::size_t>(item.category_id)].push_back(item.item_id);
    }
    return by_cat;
}

seqstore::SubSequence build_context_seq(const datagen::BehaviorLog& log, int category, int l_sub,
                                        std::int64_t as_of, training::SeqMode mode) {
    return mode == training::SeqMode::kHardSearch
               ? seqstore::hard_search(log, category, l_sub, as_of)
               : seqstore::recent_any_category(log, category, l_sub, as_of);
}

std::uint64_t per_user_seed(std::uint64_t base, int user_id) {
    std::uint64_t s = base ^ (0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(user_id) + 1));
    return splitmix64(s);
}

}  // namespace

ItemVectors encode_all_items(const ModelParams& params, const datagen::Catalog& catalog) {
    ItemVectors iv;
    iv.dim = params.config.dim;
    iv.data.resize(static_cast<std::size_t>(catalog.num_items()) * iv.dim);
    for (const auto& item : catalog.items) {
        const auto v = encoder::encode_item(params, item.item_id, item.category_id);
        std::copy(v.begin(), v.end(),
                  iv.data.begin() + static_cast<std::ptrdiff_t>(item.item_id) * iv.dim);
    }
    return iv;
}

ModelScorer::ModelScorer(const ModelParams& params, const BehaviorStore& store,
                         training::SeqMode seq_mode)
    : params_(params), store_(store), seq_mode_(seq_mode) {}

std::vector<double> ModelScorer::user_vector(int user_id, int context_category,
                                             std::int64_t as_of) const {
    const auto& log = store_.log_of(user_id);
    const auto& profile = store_.profile_of(user_id);
    const auto seq =
        build_context_seq(log, context_category, params_.config.subseq_len, as_of, seq_mode_);
    return encoder::encode_user(params_, profile.profile_tokens, seq);
}

std::vector<double> ModelScorer::item_vector(int item_id) const {
    return encoder::encode_item(params_, store_.catalog(), item_id);
}

double ModelScorer::temperature() const { return params_.config.temperature; }

LeakageStats leakage_probe(const Scorer& scorer, const datagen::Catalog& catalog,
                           const std::vector<EvalPair>& pairs, int negatives_per_side,
                           std::uint64_t seed) {
    if (negatives_per_side < 1) {
        throw ConfigError("leakage_probe: negatives_per_side must be >= 1");
    }
    const auto by_cat = items_by_category(catalog);
    const double tau = scorer.temperature();
    Rng master(seed);
    LeakageStats stats;
    double gap_sum = 0.0, same_sum = 0.0, cross_sum = 0.0;

    for (std::size_t p = 0; p < pairs.size(); ++p) {
        const auto& pair = pairs[p];
        const auto& same_pool = by_cat[static_cast<std::size_t>(pair.category_id)];
        if (static_cast<int>(same_pool.size()) < 2 || catalog.num_categories < 2) {
            continue;  // no negatives to draw on one side
        }
        Rng rng = master.fork(p);
        const auto u = scorer.user_vector(pair.user_id, pair.category_id, pair.timestamp);

        double same_mean = 0.0;
        for (int i = 0; i < negatives_per_side; ++i) {
            int id;
            do {
                id = same_pool[static_cast<std::size_t>(rng.below(same_pool.size()))];
            } while (id == pair.item_id);
            const auto v = scorer.item_vector(id);
            same_mean += dot(u.data(), v.data(), static_cast<int>(u.size())) / tau;
        }
        same_mean /= negatives_per_side;

        double cross_mean = 0.0;
        for (int i = 0; i < negatives_per_side; ++i) {
            int id;
            do {
                id = static_cast<int>(rng.below(static_cast<std::uint64_t>(catalog.num_items())));
            } while (catalog.category_of(id) == pair.category_id);
            const auto v = scorer.item_vector(id);
            cross_mean += dot(u.data(), v.data(), static_cast<int>(u.size())) / tau;
        }
        cross_mean /= negatives_per_side;

        gap_sum += same_mean - cross_mean;
        same_sum += same_mean;
        cross_sum += cross_mean;
        ++stats.pairs_used;
    }
    if (stats.pairs_used > 0) {
        stats.gap = gap_sum / stats.pairs_used;
        stats.mean_same = same_sum / stats.pairs_used;
        stats.mean_cross = cross_sum / stats.pairs_used;
    }
    return stats;
}

EvalReport evaluate_model(const ModelParams& params, const BehaviorStore& train_store,
                          const std::vector<EvalPair>& pairs, const EvalOptions& options) {
    const auto& catalog = train_store.catalog();
    const int dim = params.config.dim;
    const double tau = params.config.temperature;
    const ItemVectors iv = encode_all_items(params, catalog);
    const auto by_cat = items_by_category(catalog);

    std::vector<int> rank_global, rank_within;
    rank_global.reserve(pairs.size());
    rank_within.reserve(pairs.size());

    Rng master(options.seed);
    double gap_sum = 0.0, same_sum = 0.0, cross_sum = 0.0;
    int probe_pairs = 0;

    for (std::size_t p = 0; p < pairs.size(); ++p) {
        const auto& pair = pairs[p];
        const auto& log = train_store.log_of(pair.user_id);
        const auto& profile = train_store.profile_of(pair.user_id);
        const auto seq = build_context_seq(log, pair.category_id, params.config.subseq_len,
                                           pair.timestamp, options.seq_mode);
        const auto u = encoder::encode_user(params, profile.profile_tokens, seq);

        const double s_pos = dot(u.data(), iv.row(pair.item_id), dim);
        int rg = 0;
        for (int id = 0; id < catalog.num_items(); ++id) {
            const double s = dot(u.data(), iv.row(id), dim);
            if (s > s_pos || (s == s_pos && id < pair.item_id)) {
                ++rg;
            }
        }
        int rw = 0;
        const auto& same_pool = by_cat[static_cast<std::size_t>(pair.category_id)];
        for (int id : same_pool) {
            const double s = dot(u.data(), iv.row(id), dim);
            if (s > s_pos || (s == s_pos && id < pair.item_id)) {
                ++rw;
            }
        }
        rank_global.push_back(rg);
        rank_within.push_back(rw);

        // leakage probe on the same user vector
        if (static_cast<int>(same_pool.size()) >= 2 && catalog.num_categories >= 2) {
            Rng rng = master.fork(p);
            double same_mean = 0.0;
            for (int i = 0; i < options.leakage_negatives; ++i) {
                int id;
                do {
                    id = same_pool[static_cast<std::size_t>(rng.below(same_pool.size()))];
                } while (id == pair.item_id);
                same_mean += dot(u.data(), iv.row(id), dim) / tau;
            }
            same_mean /= options.leakage_negatives;
            double cross_mean = 0.0;
            for (int i = 0; i < options.leakage_negatives; ++i) {
                int id;
                do {
                    id = static_cast<int>(rng.below(static_cast<std::uint64_t>(catalog.num_items())));
                } while (catalog.category_of(id) == pair.category_id);
                cross_mean += dot(u.data(), iv.row(id), dim) / tau;
            }
            cross_mean /= options.leakage_negatives;
            gap_sum += same_mean - cross_mean;
            same_sum += same_mean;
            cross_sum += cross_mean;
            ++probe_pairs;
        }
    }

    EvalReport report;
    report.seed = options.seed;
    const double n = pairs.empty() ? 1.0 : static_cast<double>(pairs.size());
    for (int k : options.recall_ks) {
        int hits_g = 0, hits_w = 0;
        for (std::size_t i = 0; i < pairs.size(); ++i) {
            hits_g += rank_global[i] < k ? 1 : 0;
            hits_w += rank_within[i] < k ? 1 : 0;
        }
        report.recalls["recall@" + std::to_string(k) + ":global"] = hits_g / n;
        report.recalls["recall@" + std::to_string(k) + ":within"] = hits_w / n;
    }
    LeakageStats stats;
    stats.pairs_used = probe_pairs;
    if (probe_pairs > 0) {
        stats.gap = gap_sum / probe_pairs;
        stats.mean_same = same_sum / probe_pairs;
        stats.mean_cross = cross_sum / probe_pairs;
    }
    report.leakage = stats;
    return report;
}

double recall_at_k(const ModelParams& params, const BehaviorStore& train_store,
                   const std::vector<EvalPair>& pairs, int k, Pool pool,
                   training::SeqMode seq_mode) {
    EvalOptions options;
    options.recall_ks = {k};
    options.leakage_negatives = 1;
    options.seq_mode = seq_mode;
    const auto report = evaluate_model(params, train_store, pairs, options);
    const std::string key =
        "recall@" + std::to_string(k) + (pool == Pool::kGlobal ? ":global" : ":within");
    return report.recalls.at(key);
}

double uniqueness_ratio(const std::vector<std::vector<int>>& run_a,
                        const std::vector<std::vector<int>>& run_b) {
    if (run_a.size() != run_b.size()) {
        throw ConfigError("uniqueness_ratio: runs must cover identical requests");
    }
    double total = 0.0;
    int used = 0;
    for (std::size_t r = 0; r < run_a.size(); ++r) {
        if (run_a[r].empty()) {
            continue;
        }
        const std::set<int> other(run_b[r].begin(), run_b[r].end());
        int missing = 0;
        for (int id : run_a[r]) {
            if (!other.count(id)) {
                ++missing;
            }
        }
        total += static_cast<double>(missing) / static_cast<double>(run_a[r].size());
        ++used;
    }
    return used == 0 ? 0.0 : total / used;
}

int RetrievalRun::category_coverage() const {
    std::set<int> cats;
    for (const auto& sel : selected_categories) {
        cats.insert(sel.begin(), sel.end());
    }
    return static_cast<int>(cats.size());
}

RetrievalRun run_retrieval(const ModelParams& params, const BehaviorStore& store,
                           const std::map<int, retrieval::CategoryIndex>& indexes,
                           const std::vector<int>& users,
                           const retrieval::RetrievalConfig& base_config) {
    RetrievalRun run;
    run.request_users = users;
    for (int user : users) {
        auto cfg = base_config;
        cfg.selection.seed = per_user_seed(base_config.selection.seed, user);
        const auto res = retrieval::multi_retrieve(params, store.log_of(user),
                                                   store.profile_of(user).profile_tokens, indexes, cfg);
        std::vector<int> merged;
        merged.reserve(res.merged.size());
        for (const auto& m : res.merged) {
            merged.push_back(m.item_id);
        }
        run.merged_items.push_back(std::move(merged));
        run.selected_categories.push_back(res.selected_categories);
    }
    return run;
}

RetrievalRun run_single_vector_retrieval(const ModelParams& params, const BehaviorStore& store,
                                         const std::vector<int>& users, int k_total,
                                         std::int64_t now) {
    const auto& catalog = store.catalog();
    const ItemVectors iv = encode_all_items(params, catalog);
    const int dim = params.config.dim;
    RetrievalRun run;
    run.request_users = users;
    for (int user : users) {
        const auto& log = store.log_of(user);
        const auto seq = seqstore::recent_any_category(log, -1, params.config.subseq_len, now);
        const auto u = encoder::encode_user(params, store.profile_of(user).profile_tokens, seq);
        std::vector<std::pair<double, int>> scored;
        scored.reserve(static_cast<std::size_t>(catalog.num_items()));
        for (int id = 0; id < catalog.num_items(); ++id) {
            scored.emplace_back(dot(u.data(), iv.row(id), dim), id);
        }
        const std::size_t take =
            std::min<std::size_t>(static_cast<std::size_t>(k_total), scored.size());
        std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take),
                          scored.end(), [](const auto& a, const auto& b) {
                              if (a.first != b.first) {
                                  return a.first > b.first;
                              }
                              return a.second < b.second;
                          });
        std::vector<int> merged;
        merged.reserve(take);
        for (std::size_t i = 0; i < take; ++i) {
            merged.push_back(scored[i].second);
        }
        run.merged_items.push_back(std::move(merged));
        run.selected_categories.emplace_back();
    }
    return run;
}

Suite suite_from_name(const std::string& name) {
    if (name == "random_vs_top") {
        return Suite::kRandomVsTop;
    }
    if (name == "long_seq") {
        return Suite::kLongSeq;
    }
    if (name == "batch_mixing") {
        return Suite::kBatchMixing;
    }
    throw ConfigError("unknown ablation suite '" + name +
                      "' (expected random_vs_top, long_seq or batch_mixing)");
}

std::string suite_name(Suite suite) {
    switch (suite) {
        case Suite::kRandomVsTop: return "random_vs_top";
        case Suite::kLongSeq: return "long_seq";
        case Suite::kBatchMixing: return "batch_mixing";
    }
    return "?";
}

namespace {

double merged_hit_rate(const RetrievalRun& run, const std::vector<EvalPair>& pairs) {
    std::unordered_map<int, std::size_t> request_of;
    for (std::size_t r = 0; r < run.request_users.size(); ++r) {
        request_of[run.request_users[r]] = r;
    }
    int hits = 0, used = 0;
    for (const auto& pair : pairs) {
        auto it = request_of.find(pair.user_id);
        if (it == request_of.end()) {
            continue;
        }
        const auto& merged = run.merged_items[it->second];
        ++used;
        if (std::find(merged.begin(), merged.end(), pair.item_id) != merged.end()) {
            ++hits;
        }
    }
    return used == 0 ? 0.0 : static_cast<double>(hits) / used;
}

json suite_config_echo(const SuiteConfig& config) {
    json j;
    j["gen"] = {{"num_users", config.gen.num_users},
                {"num_items", config.gen.num_items},
                {"num_categories", config.gen.num_categories},
                {"mean_log_len", config.gen.mean_log_len},
                {"seed", config.gen.seed}};
    j["train"] = {{"batch_size", config.train.batch_size},
                  {"epochs", config.train.epochs},
                  {"max_steps_per_epoch", config.train.max_steps_per_epoch},
                  {"seed", config.train.seed}};
    j["holdout_per_user"] = config.holdout_per_user;
    return j;
}

}  // namespace

SuiteOutcome run_ablation(Suite suite, const SuiteConfig& config) {
    const auto dataset = datagen::generate(config.gen);
    const auto split = datagen::train_eval_split(dataset.logs, config.holdout_per_user);

    BehaviorStore store;
    store.load_dataset(dataset);
    store.set_logs(split.train_logs);

    encoder::ModelConfig model = config.model;
    model.num_items = dataset.catalog.num_items();
    model.num_categories = dataset.catalog.num_categories;
    model.profile_vocab = config.gen.profile_vocab;

    SuiteOutcome outcome;
    outcome.suite = suite_name(suite);
    const json echo = suite_config_echo(config);

    auto eval_arm = [&](const encoder::ModelParams& params, training::SeqMode seq_mode,
                        const std::string& name) {
        EvalOptions opts = config.eval;
        opts.seq_mode = seq_mode;
        EvalReport r = evaluate_model(params, store, split.eval_pairs, opts);
        r.name = name;
        r.config_echo = echo;
        return r;
    };

    switch (suite) {
        case Suite::kBatchMixing: {
            auto cfg_a = config.train;
            cfg_a.batch_mode = training::BatchMode::kSingleCategory;
            auto cfg_b = config.train;
            cfg_b.batch_mode = training::BatchMode::kMixed;
            const auto trained_a = training::train(model, store, cfg_a);
            const auto trained_b = training::train(model, store, cfg_b);
            outcome.arm_a = eval_arm(trained_a.params, training::SeqMode::kHardSearch,
                                     "single_category_batches");
            outcome.arm_b = eval_arm(trained_b.params, training::SeqMode::kHardSearch,
                                     "mixed_batches");
            break;
        }
        case Suite::kLongSeq: {
            auto cfg_a = config.train;
            cfg_a.seq_mode = training::SeqMode::kHardSearch;
            auto cfg_b = config.train;
            cfg_b.seq_mode = training::SeqMode::kRecentAny;
            const auto trained_a = training::train(model, store, cfg_a);
            const auto trained_b = training::train(model, store, cfg_b);
            outcome.arm_a =
                eval_arm(trained_a.params, training::SeqMode::kHardSearch, "hard_search_seq");
            outcome.arm_b =
                eval_arm(trained_b.params, training::SeqMode::kRecentAny, "recent_any_seq");
            break;
        }
        case Suite::kRandomVsTop: {
            const auto trained = training::train(model, store, config.train);
            const auto indexes = retrieval::build_indexes(trained.params, dataset.catalog,
                                                          retrieval::Backend::kExact, {});
            std::set<int> user_set;
            for (const auto& pair : split.eval_pairs) {
                user_set.insert(pair.user_id);
            }
            const std::vector<int> users(user_set.begin(), user_set.end());

            auto cfg_a = config.retr;
            cfg_a.selection_mode = retrieval::SelectionMode::kRandomInTop;
            auto cfg_b = config.retr;
            cfg_b.selection_mode = retrieval::SelectionMode::kTopN;
            const auto run_a = run_retrieval(trained.params, store, indexes, users, cfg_a);
            const auto run_b = run_retrieval(trained.params, store, indexes, users, cfg_b);

            outcome.arm_a =
                eval_arm(trained.params, training::SeqMode::kHardSearch, "random_in_top");
            outcome.arm_b = outcome.arm_a;
            outcome.arm_b.name = "top_n";
            outcome.arm_a.category_coverage = run_a.category_coverage();
            outcome.arm_b.category_coverage = run_b.category_coverage();
            outcome.arm_a.uniqueness_vs_baseline = uniqueness_ratio(run_a.merged_items, run_b.merged_items);
            outcome.arm_a.baseline_name = "top_n";
            outcome.arm_b.uniqueness_vs_baseline = uniqueness_ratio(run_b.merged_items, run_a.merged_items);
            outcome.arm_b.baseline_name = "random_in_top";
            outcome.arm_a.merged_hit_rate = merged_hit_rate(run_a, split.eval_pairs);
            outcome.arm_b.merged_hit_rate = merged_hit_rate(run_b, split.eval_pairs);
            break;
        }
    }
    return outcome;
}

std::string to_json_string(const EvalReport& report) {
    json j;
    j["name"] = report.name;
    j["seed"] = report.seed;
    j["recalls"] = report.recalls;
    if (report.leakage) {
        j["leakage"] = {{"gap", report.leakage->gap},
                        {"mean_same_category", report.leakage->mean_same},
                        {"mean_cross_category", report.leakage->mean_cross},
                        {"pairs_used", report.leakage->pairs_used}};
    }
    if (report.uniqueness_vs_baseline) {
        j["uniqueness_vs_baseline"] = *report.uniqueness_vs_baseline;
        j["baseline_name"] = report.baseline_name;
    }
    if (report.category_coverage) {
        j["category_coverage"] = *report.category_coverage;
    }
    if (report.merged_hit_rate) {
        j["merged_hit_rate"] = *report.merged_hit_rate;
    }
    if (!report.config_echo.is_null()) {
        j["config"] = report.config_echo;
    }
    return j.dump(2);
}

std::string to_text_table(const std::vector<EvalReport>& reports) {
    std::vector<std::string> metric_names;
    auto add_metric = [&](const std::string& m) {
        if (std::find(metric_names.begin(), metric_names.end(), m) == metric_names.end()) {
            metric_names.push_back(m);
        }
    };
    for (const auto& r : reports) {
        for (const auto& [k, v] : r.recalls) {
            add_metric(k);
        }
        if (r.leakage) {
            add_metric("leakage_gap");
        }
        if (r.uniqueness_vs_baseline) {
            add_metric("uniqueness");
        }
        if (r.category_coverage) {
            add_metric("category_coverage");
        }
        if (r.merged_hit_rate) {
            add_metric("merged_hit_rate");
        }
    }

    auto cell = [](const EvalReport& r, const std::string& m) -> std::string {
        char buf[64];
        auto fmt = [&](double v) {
            std::snprintf(buf, sizeof(buf), "%.4f", v);
            return std::string(buf);
        };
        if (auto it = r.recalls.find(m); it != r.recalls.end()) {
            return fmt(it->second);
        }
        if (m == "leakage_gap" && r.leakage) {
            return fmt(r.leakage->gap);
        }
        if (m == "uniqueness" && r.uniqueness_vs_baseline) {
            return fmt(*r.uniqueness_vs_baseline);
        }
        if (m == "category_coverage" && r.category_coverage) {
            return std::to_string(*r.category_coverage);
        }
        if (m == "merged_hit_rate" && r.merged_hit_rate) {
            return fmt(*r.merged_hit_rate);
        }
        return "-";
    };

    std::vector<std::size_t> widths;
    widths.push_back(std::string("metric").size());
    for (const auto& m : metric_names) {
        widths[0] = std::max(widths[0], m.size());
    }
    for (const auto& r : reports) {
        std::size_t w = r.name.size();
        for (const auto& m : metric_names) {
            w = std::max(w, cell(r, m).size());
        }
        widths.push_back(w);
    }

    std::ostringstream out;
    auto pad = [&](const std::string& s, std::size_t w) {
        out << s;
        for (std::size_t i = s.size(); i < w + 2; ++i) {
            out << ' ';
        }
    };
    pad("metric", widths[0]);
    for (std::size_t c = 0; c < reports.size(); ++c) {
        pad(reports[c].name, widths[c + 1]);
    }
    out << '\n';
    for (const auto& m : metric_names) {
        pad(m, widths[0]);
        for (std::size_t c = 0; c < reports.size(); ++c) {
            pad(cell(reports[c], m), widths[c + 1]);
        }
        out << '\n';
    }
    return out.str();
}

}  // namespace ctxr::eval
