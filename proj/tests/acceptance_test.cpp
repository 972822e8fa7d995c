// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. argv[1] must point at the ctxr binary (used by the determinism
// criterion). Criteria 5 and 6 train on the reference desk-scale dataset
// and dominate the runtime.

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "ctxr/datagen.hpp"
#include "ctxr/encoder.hpp"
#include "ctxr/eval.hpp"
#include "ctxr/gzio.hpp"
#include "ctxr/interest.hpp"
#include "ctxr/retrieval.hpp"
#include "ctxr/rng.hpp"
#include "ctxr/seqstore.hpp"
#include "ctxr/training.hpp"
#include "gradcheck_util.hpp"

using namespace ctxr;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
    std::printf("%s  criterion %d: %s%s%s\n", pass ? "PASS" : "FAIL", id, name.c_str(),
                detail.empty() ? "" : " -- ", detail.c_str());
    std::fflush(stdout);
    if (!pass) {
        ++failures;
    }
}

double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::string fmt(const char* format, ...) {
    char buf[512];
    va_list args;
    va_start(args, format);
    std::vsnprintf(buf, sizeof(buf), format, args);
    va_end(args);
    return buf;
}

// ---- reference desk-scale configuration (mirrors configs/reference.ini) ----

datagen::GenConfig reference_gen() {
    datagen::GenConfig g;
    g.num_users = 5000;
    g.num_items = 20000;
    g.num_categories = 50;
    g.mean_log_len = 150;
    g.seed = 7;
    return g;
}

encoder::ModelConfig reference_model(const datagen::Catalog& catalog, int profile_vocab) {
    encoder::ModelConfig m;
    m.dim = 32;
    m.layers = 2;
    m.heads = 2;
    m.profile_tokens = 4;
    m.subseq_len = 50;
    m.ffn_mult = 4;
    m.temperature = 0.05;
    m.num_items = catalog.num_items();
    m.num_categories = catalog.num_categories;
    m.profile_vocab = profile_vocab;
    m.recency_buckets = 12;
    return m;
}

training::TrainConfig reference_train() {
    training::TrainConfig t;
    t.batch_size = 256;
    t.epochs = 3;
    t.max_steps_per_epoch = 150;
    t.seed = 7;
    return t;
}

constexpr int kHoldout = 2;

// ---- criteria ----

void criterion_1_gradients() {
    const auto start = std::chrono::steady_clock::now();
    testutil::GradCheckFixture fixture;
    const auto errors = testutil::gradcheck_group_errors(fixture, 1e-4);
    double worst = 0.0;
    std::string worst_name;
    for (const auto& e : errors) {
        if (e.relative > worst) {
            worst = e.relative;
            worst_name = e.name;
        }
    }
    const double elapsed = seconds_since(start);
    const bool pass = worst <= 1e-4 && elapsed < 60.0;
    report(1, "gradient correctness vs central finite differences", pass,
           fmt("%zu parameter groups, worst %.2e (%s), %.1fs", errors.size(), worst,
               worst_name.c_str(), elapsed));
}

void criterion_2_batch_purity(const seqstore::BehaviorStore& train_store) {
    const auto refs = training::build_sample_refs(train_store, 1);
    std::vector<training::SampleRef> stream = refs;
    Rng rng(7);
    rng.shuffle(stream);

    training::BatchCache cache(256, training::FlushPolicy::kDrop);
    long batches = 0, impure = 0;
    for (const auto& ref : stream) {
        if (auto b = cache.push(ref)) {
            ++batches;
            for (const auto& r : b->refs) {
                if (r.category != b->context_category) {
                    ++impure;
                }
            }
            if (b->refs.size() != 256) {
                ++impure;
            }
        }
    }
    const bool pass = batches > 0 && impure == 0;
    report(2, "batch purity over a full epoch", pass,
           fmt("%ld batches from %zu samples, %ld impure", batches, stream.size(), impure));
}

void criterion_3_retrieval_oracle() {
    Rng rng(2025);
    auto random_unit = [&](int dim) {
        std::vector<double> v(static_cast<std::size_t>(dim));
        double n = 0;
        for (auto& x : v) {
            x = rng.normal();
            n += x * x;
        }
        n = std::sqrt(n);
        for (auto& x : v) {
            x /= n;
        }
        return v;
    };

    // exact backend vs independent linear scan, 1000 queries
    const int dim = 32;
    {
        const int n = 4000;
        std::vector<int> ids(static_cast<std::size_t>(n));
        std::vector<double> vecs;
        for (int i = 0; i < n; ++i) {
            ids[static_cast<std::size_t>(i)] = i * 2 + 1;
            const auto v = random_unit(dim);
            vecs.insert(vecs.end(), v.begin(), v.end());
        }
        const auto index = retrieval::CategoryIndex::build(0, ids, vecs, dim,
                                                           retrieval::Backend::kExact, {});
        long mismatches = 0;
        for (int q = 0; q < 1000; ++q) {
            const auto query = random_unit(dim);
            const int k = 1 + static_cast<int>(rng.below(30));
            const auto got = index.query(query, k, 0.05);

            std::vector<std::pair<double, int>> oracle;
            for (int i = 0; i < n; ++i) {
                double s = 0;
                for (int d = 0; d < dim; ++d) {
                    s += query[static_cast<std::size_t>(d)] * vecs[static_cast<std::size_t>(i) * dim + d];
                }
                oracle.emplace_back(s / 0.05, ids[static_cast<std::size_t>(i)]);
            }
            std::sort(oracle.begin(), oracle.end(), [](const auto& a, const auto& b) {
                if (a.first != b.first) {
                    return a.first > b.first;
                }
                return a.second < b.second;
            });
            bool ok = static_cast<int>(got.size()) == k;
            for (std::size_t i = 0; ok && i < got.size(); ++i) {
                ok = got[i].item_id == oracle[i].second && got[i].score == oracle[i].first;
            }
            if (!ok) {
                ++mismatches;
            }
        }
        if (mismatches != 0) {
            report(3, "exact-retrieval oracle", false, fmt("%ld/1000 queries mismatched", mismatches));
            return;
        }
    }

    // approximate backend recall@10 on 10k items
    const int n = 10000;
    std::vector<int> ids(static_cast<std::size_t>(n));
    std::vector<double> vecs;
    for (int i = 0; i < n; ++i) {
        ids[static_cast<std::size_t>(i)] = i;
        const auto v = random_unit(dim);
        vecs.insert(vecs.end(), v.begin(), v.end());
    }
    const auto exact =
        retrieval::CategoryIndex::build(0, ids, vecs, dim, retrieval::Backend::kExact, {});
    const auto graph =
        retrieval::CategoryIndex::build(0, ids, vecs, dim, retrieval::Backend::kGraph, {});
    double hits = 0, total = 0;
    for (int q = 0; q < 200; ++q) {
        const auto query = random_unit(dim);
        const auto truth = exact.query(query, 10, 1.0);
        const auto approx = graph.query(query, 10, 1.0);
        std::set<int> truth_ids;
        for (const auto& r : truth) {
            truth_ids.insert(r.item_id);
        }
        for (const auto& r : approx) {
            hits += truth_ids.count(r.item_id) ? 1 : 0;
        }
        total += static_cast<double>(truth.size());
    }
    const double recall = hits / total;
    report(3, "exact-retrieval oracle and approximate recall", recall >= 0.95,
           fmt("1000/1000 exact queries identical; graph recall@10 = %.4f on 10k items", recall));
}

void criterion_4_engagement_arithmetic() {
    Rng rng(555);
    double worst = 0.0;
    for (int rep = 0; rep < 1000; ++rep) {
        datagen::BehaviorLog log;
        log.user_id = 0;
        const int len = static_cast<int>(rng.below(60));
        std::int64_t t = 0;
        for (int i = 0; i < len; ++i) {
            t += static_cast<std::int64_t>(rng.below(6));
            log.events.push_back({0, static_cast<int>(rng.below(10)), t});
        }
        const std::int64_t now = t + static_cast<std::int64_t>(rng.below(5));

        // independent one-line restatement, day-0 clamp included
        std::map<int, double> oracle;
        for (const auto& ev : log.events) {
            oracle[ev.category_id] += 1.0 / std::max<std::int64_t>(now - ev.timestamp, 1);
        }
        const auto table = interest::engagement_score(log, now);
        for (const auto& [cat, expected] : oracle) {
            worst = std::max(worst, std::abs(table.score(cat) - expected));
        }
        if (table.scores.size() != oracle.size()) {
            worst = 1.0;
        }
    }

    datagen::BehaviorLog two_day;
    two_day.user_id = 0;
    two_day.events.push_back({0, 3, 8});
    two_day.events.push_back({0, 3, 9});
    const bool exact_half = interest::engagement_score(two_day, 10).score(3) == 1.5;

    report(4, "time-weighted engagement arithmetic", worst <= 1e-12 && exact_half,
           fmt("1000 random logs, worst abs error %.2e; 1/1 + 1/2 == 1.5: %s", worst,
               exact_half ? "yes" : "no"));
}

struct LeakageArms {
    eval::EvalReport pure;
    eval::EvalReport mixed;
    eval::EvalReport recent_any;
    double pure_mixed_seconds = 0.0;
};

LeakageArms run_reference_arms(const seqstore::BehaviorStore& train_store,
                               const std::vector<datagen::EvalPair>& pairs,
                               const encoder::ModelConfig& model) {
    LeakageArms arms;
    eval::EvalOptions opts;
    opts.recall_ks = {10, 50, 100};
    opts.leakage_negatives = 64;
    opts.seed = 7;

    const auto start = std::chrono::steady_clock::now();
    {
        auto tc = reference_train();
        tc.batch_mode = training::BatchMode::kSingleCategory;
        const auto trained = training::train(model, train_store, tc);
        std::printf("  [arm single_category] steps %d loss %.4f -> %.4f\n", trained.steps,
                    trained.first_loss, trained.final_loss);
        opts.seq_mode = training::SeqMode::kHardSearch;
        arms.pure = eval::evaluate_model(trained.params, train_store, pairs, opts);
        arms.pure.name = "single_category_batches";
    }
    {
        auto tc = reference_train();
        tc.batch_mode = training::BatchMode::kMixed;
        const auto trained = training::train(model, train_store, tc);
        std::printf("  [arm mixed] steps %d loss %.4f -> %.4f\n", trained.steps,
                    trained.first_loss, trained.final_loss);
        opts.seq_mode = training::SeqMode::kHardSearch;
        arms.mixed = eval::evaluate_model(trained.params, train_store, pairs, opts);
        arms.mixed.name = "mixed_batches";
    }
    arms.pure_mixed_seconds = seconds_since(start);
    {
        auto tc = reference_train();
        tc.seq_mode = training::SeqMode::kRecentAny;
        const auto trained = training::train(model, train_store, tc);
        std::printf("  [arm recent_any] steps %d loss %.4f -> %.4f\n", trained.steps,
                    trained.first_loss, trained.final_loss);
        opts.seq_mode = training::SeqMode::kRecentAny;
        arms.recent_any = eval::evaluate_model(trained.params, train_store, pairs, opts);
        arms.recent_any.name = "recent_any_seq";
    }
    return arms;
}

void criterion_5_leakage(const LeakageArms& arms) {
    const double gap_pure = arms.pure.leakage->gap;
    const double gap_mixed = arms.mixed.leakage->gap;
    const double recall_pure = arms.pure.recalls.at("recall@50:within");
    const double recall_mixed = arms.mixed.recalls.at("recall@50:within");
    const bool pass = gap_mixed > gap_pure && recall_pure > recall_mixed &&
                      arms.pure_mixed_seconds < 1800.0;
    report(5, "leakage reproduction (mixed vs single-category batches)", pass,
           fmt("gap %.4f > %.4f, within-recall@50 %.4f > %.4f, %.0fs", gap_mixed, gap_pure,
               recall_pure, recall_mixed, arms.pure_mixed_seconds));
}

void criterion_6_long_seq(const LeakageArms& arms) {
    const double recall_hard = arms.pure.recalls.at("recall@50:within");
    const double recall_recent = arms.recent_any.recalls.at("recall@50:within");
    report(6, "long-sequence ablation (hard search vs recent-any)",
           recall_hard > recall_recent,
           fmt("within-recall@50 %.4f > %.4f", recall_hard, recall_recent));
}

void criterion_7_selection_statistics() {
    datagen::BehaviorLog log;
    log.user_id = 0;
    for (int c = 0; c < 20; ++c) {
        log.events.push_back({0, c, 9});
    }
    const auto table = interest::engagement_score(log, 10);

    std::array<int, 20> counts{};
    interest::SelectionConfig cfg;
    bool subset_ok = true;
    const auto top = interest::top_n(table, cfg.top_m);
    for (int d = 0; d < 10000; ++d) {
        cfg.seed = 40000 + static_cast<std::uint64_t>(d);
        const auto picked = interest::random_in_top(table, cfg);
        for (int c : picked) {
            ++counts[static_cast<std::size_t>(c)];
            subset_ok = subset_ok && std::find(top.begin(), top.end(), c) != top.end();
        }
    }
    const double sigma = std::sqrt(10000 * 0.25 * 0.75);
    double worst = 0.0;
    for (int c = 0; c < 20; ++c) {
        worst = std::max(worst, std::abs(counts[static_cast<std::size_t>(c)] - 2500.0));
    }
    report(7, "random-in-top selection statistics", worst <= 3.0 * sigma && subset_ok,
           fmt("worst count deviation %.0f of 3-sigma %.0f; subset always: %s", worst, 3.0 * sigma,
               subset_ok ? "yes" : "no"));
}

bool files_equal(const std::string& a, const std::string& b) {
    return fs::exists(a) && fs::exists(b) && read_text_file(a) == read_text_file(b);
}

void criterion_8_determinism(const std::string& ctxr_bin) {
    if (ctxr_bin.empty()) {
        report(8, "pipeline determinism", false, "path to the ctxr binary was not provided");
        return;
    }
    const fs::path base = fs::temp_directory_path() / "ctxr_acceptance_det";
    fs::remove_all(base);
    fs::create_directories(base);

    const std::string overrides =
        " --set data.num_users=400 --set data.num_items=2000 --set data.num_categories=10"
        " --set data.mean_log_len=30 --set model.dim=16 --set model.subseq_len=10"
        " --set training.batch_size=32 --set training.epochs=1"
        " --set training.max_steps_per_epoch=25 --set run.seed=11";

    auto run_pipeline = [&](const std::string& dir) {
        const std::string log = " >> " + dir + "/console.log 2>&1";
        fs::create_directories(dir);
        std::vector<std::string> cmds = {
            ctxr_bin + " gen-data --out-dir " + dir + overrides + log,
            ctxr_bin + " train --data " + dir + "/dataset.jsonl --out-dir " + dir + overrides + log,
            ctxr_bin + " build-index --data " + dir + "/dataset.jsonl --checkpoint " + dir +
                "/checkpoint.bin --out-dir " + dir + overrides + log,
            ctxr_bin + " retrieve --data " + dir + "/dataset.jsonl --checkpoint " + dir +
                "/checkpoint.bin --index " + dir + "/index.bin --user 3 --out-dir " + dir +
                overrides + log,
            ctxr_bin + " evaluate --data " + dir + "/dataset.jsonl --checkpoint " + dir +
                "/checkpoint.bin --out-dir " + dir + overrides + log,
        };
        for (const auto& cmd : cmds) {
            if (std::system(cmd.c_str()) != 0) {
                return false;
            }
        }
        return true;
    };

    const std::string d1 = (base / "run1").string();
    const std::string d2 = (base / "run2").string();
    if (!run_pipeline(d1) || !run_pipeline(d2)) {
        report(8, "pipeline determinism", false, "a subcommand exited nonzero (see console.log)");
        return;
    }
    std::string bad;
    for (const char* name :
         {"dataset.jsonl", "checkpoint.bin", "index.bin", "retrieval.json", "report.json",
          "retrieval_run.json"}) {
        if (!files_equal(d1 + "/" + name, d2 + "/" + name)) {
            bad += std::string(name) + " ";
        }
    }
    report(8, "pipeline determinism (gen/train/index/retrieve/evaluate, two runs)", bad.empty(),
           bad.empty() ? "all artifacts byte-identical" : "differs: " + bad);
}

void criterion_9_roundtrip() {
    datagen::GenConfig g;
    g.num_users = 50;
    g.num_items = 600;
    g.num_categories = 8;
    g.mean_log_len = 25;
    g.seed = 3;
    const auto dataset = datagen::generate(g);
    seqstore::BehaviorStore store;
    store.load_dataset(dataset);

    auto model = reference_model(dataset.catalog, g.profile_vocab);
    model.dim = 16;
    const auto params = encoder::init_params(model, 13);

    const fs::path dir = fs::temp_directory_path() / "ctxr_acceptance_rt";
    fs::create_directories(dir);
    const std::string ckpt1 = (dir / "m1.ckpt").string();
    const std::string ckpt2 = (dir / "m2.ckpt").string();
    encoder::save_checkpoint(params, ckpt1);
    const auto loaded = encoder::load_checkpoint(ckpt1);
    encoder::save_checkpoint(loaded, ckpt2);

    bool ok = files_equal(ckpt1, ckpt2);
    // vectors from the reloaded model are bitwise identical
    for (int user = 0; user < 10 && ok; ++user) {
        const auto seq = seqstore::hard_search(store.log_of(user), 1, model.subseq_len, 400);
        ok = encoder::encode_user(params, store.profile_of(user).profile_tokens, seq) ==
             encoder::encode_user(loaded, store.profile_of(user).profile_tokens, seq);
    }
    for (int item = 0; item < 50 && ok; ++item) {
        ok = encoder::encode_item(params, dataset.catalog, item) ==
             encoder::encode_item(loaded, dataset.catalog, item);
    }

    const auto indexes =
        retrieval::build_indexes(params, dataset.catalog, retrieval::Backend::kExact, {});
    const std::string idx_path = (dir / "index.bin").string();
    retrieval::save_indexes(indexes, idx_path);
    const auto reloaded = retrieval::load_indexes(idx_path);
    Rng rng(77);
    for (int rep = 0; rep < 50 && ok; ++rep) {
        std::vector<double> q(static_cast<std::size_t>(model.dim));
        double n = 0;
        for (auto& x : q) {
            x = rng.normal();
            n += x * x;
        }
        n = std::sqrt(n);
        for (auto& x : q) {
            x /= n;
        }
        for (const auto& [cat, idx] : indexes) {
            const auto a = idx.query(q, 10, model.temperature);
            const auto b = reloaded.at(cat).query(q, 10, model.temperature);
            ok = ok && a.size() == b.size();
            for (std::size_t i = 0; ok && i < a.size(); ++i) {
                ok = a[i].item_id == b[i].item_id && a[i].score == b[i].score;
            }
        }
    }
    fs::remove_all(dir);
    report(9, "checkpoint and index round-trip", ok,
           ok ? "bytes stable, vectors and query results bit-identical" : "mismatch detected");
}

}  // namespace

int main(int argc, char** argv) {
    const std::string ctxr_bin = argc > 1 ? argv[1] : "";
    std::printf("reference dataset: 5000 users, 20000 items, 50 categories\n");

    criterion_1_gradients();

    // shared reference dataset for criteria 2, 5, 6
    const auto gen = reference_gen();
    const auto dataset = datagen::generate(gen);
    const auto split = datagen::train_eval_split(dataset.logs, kHoldout);
    seqstore::BehaviorStore train_store;
    train_store.load_dataset(dataset);
    train_store.set_logs(split.train_logs);
    const auto model = reference_model(dataset.catalog, gen.profile_vocab);

    criterion_2_batch_purity(train_store);
    criterion_3_retrieval_oracle();
    criterion_4_engagement_arithmetic();

    std::printf("training reference arms (three runs)...\n");
    const auto arms = run_reference_arms(train_store, split.eval_pairs, model);
    std::printf("%s\n", eval::to_text_table({arms.pure, arms.mixed, arms.recent_any}).c_str());
    criterion_5_leakage(arms);
    criterion_6_long_seq(arms);

    criterion_7_selection_statistics();
    criterion_8_determinism(ctxr_bin);
    criterion_9_roundtrip();

    std::printf("%d criterion(s) failed\n", failures);
    return failures == 0 ? 0 : 1;
}
