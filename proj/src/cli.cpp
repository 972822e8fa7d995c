#include "ctxr/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ctxr/common.hpp"
#include "ctxr/config.hpp"
#include "ctxr/datagen.hpp"
#include "ctxr/encoder.hpp"
#include "ctxr/eval.hpp"
#include "ctxr/gzio.hpp"
#include "ctxr/retrieval.hpp"
#include "ctxr/seqstore.hpp"
#include "ctxr/training.hpp"

namespace ctxr::cli {

namespace fs = std::filesystem;
using config::RunConfig;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_dir;
    std::int64_t seed = -1;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "run config file (key = value sections)");
    cmd->add_option("--set", args.overrides, "override a key: section.key=value")
        ->take_all()
        ->expected(-1);
    cmd->add_option("--out-dir", args.out_dir, "run directory for artifacts");
    cmd->add_option("--seed", args.seed, "master seed (overrides run.seed)");
}

RunConfig make_config(const CommonArgs& args) {
    RunConfig cfg = config::load_config(args.config_path, args.overrides);
    if (!args.out_dir.empty()) {
        cfg.out_dir = args.out_dir;
    }
    if (args.seed >= 0) {
        cfg.seed = static_cast<std::uint64_t>(args.seed);
    }
    fs::create_directories(cfg.out_dir);
    return cfg;
}

char hex_digit(unsigned v) { return v < 10 ? static_cast<char>('0' + v) : static_cast<char>('a' + v - 10); }

std::string hex64(std::uint64_t h) {
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = hex_digit(static_cast<unsigned>(h & 0xf));
        h >>= 4;
    }
    return s;
}

void write_manifest(const RunConfig& cfg, const std::string& command,
                    const std::vector<std::string>& artifact_paths) {
    json m;
    m["command"] = command;
    m["version"] = kVersion;
    m["config"] = cfg.echo();
    json arts = json::object();
    for (const auto& path : artifact_paths) {
        json a;
        a["fnv1a64"] = hex64(fnv1a64_file(path));
        a["bytes"] = static_cast<std::uint64_t>(fs::file_size(path));
        arts[fs::path(path).filename().string()] = std::move(a);
    }
    m["artifacts"] = std::move(arts);
    write_text_file(cfg.out_dir + "/manifest.json", m.dump(2) + "\n");
}

void require_file(const std::string& path, const char* what) {
    if (path.empty()) {
        throw ConfigError(std::string("missing required --") + what);
    }
    if (!fs::exists(path)) {
        throw IoError(std::string(what) + " not found: " + path);
    }
}

// Shared load path for commands that consume a dataset file.
seqstore::BehaviorStore load_store(const std::string& data_path) {
    seqstore::BehaviorStore store;
    store.load_jsonl(data_path);
    return store;
}

eval::SuiteConfig make_suite_config(const RunConfig& cfg) {
    eval::SuiteConfig sc;
    sc.gen = cfg.gen;
    sc.gen.seed = cfg.resolved_data_seed();
    sc.model = cfg.model;
    sc.train = cfg.train;
    sc.train.seed = cfg.resolved_train_seed();
    sc.retr = cfg.retrieval_config();
    sc.holdout_per_user = cfg.holdout_per_user;
    sc.eval = cfg.eval_options();
    return sc;
}

int cmd_gen_data(const CommonArgs& args, bool gzip_flag) {
    RunConfig cfg = make_config(args);
    if (gzip_flag) {
        cfg.gzip = true;
    }
    cfg.gen.seed = cfg.resolved_data_seed();
    const auto dataset = datagen::generate(cfg.gen);
    const std::string path = cfg.out_dir + "/dataset.jsonl" + (cfg.gzip ? ".gz" : "");
    datagen::write_jsonl(dataset, path);
    write_manifest(cfg, "gen-data", {path});
    std::size_t events = 0;
    for (const auto& log : dataset.logs) {
        events += log.events.size();
    }
    std::printf("wrote %s: %d users, %d items, %d categories, %zu events\n", path.c_str(),
                cfg.gen.num_users, cfg.gen.num_items, cfg.gen.num_categories, events);
    return 0;
}

int cmd_train(const CommonArgs& args, const std::string& data_path) {
    RunConfig cfg = make_config(args);
    require_file(data_path, "data");
    auto store = load_store(data_path);
    const auto split = datagen::train_eval_split(store.logs(), cfg.holdout_per_user);
    store.set_logs(split.train_logs);
    config::resolve_model(cfg, store);

    auto tc = cfg.train;
    tc.seed = cfg.resolved_train_seed();
    tc.metrics_path = cfg.out_dir + "/metrics.jsonl";
    tc.checkpoint_path = cfg.out_dir + "/checkpoint.bin";
    tc.verbose = true;

    const auto result = training::train(cfg.model, store, tc);
    if (result.aborted) {
        std::fprintf(stderr, "training aborted: %s (last good checkpoint kept)\n",
                     result.abort_reason.c_str());
        write_manifest(cfg, "train", {tc.checkpoint_path, tc.metrics_path});
        return 1;
    }
    write_manifest(cfg, "train", {tc.checkpoint_path, tc.metrics_path});
    std::printf("trained %d steps: loss %.4f -> %.4f, checkpoint %s\n", result.steps,
                result.first_loss, result.final_loss, tc.checkpoint_path.c_str());
    return 0;
}

int cmd_build_index(const CommonArgs& args, const std::string& data_path,
                    const std::string& checkpoint_path) {
    RunConfig cfg = make_config(args);
    require_file(data_path, "data");
    require_file(checkpoint_path, "checkpoint");
    const auto store = load_store(data_path);
    const auto params = encoder::load_checkpoint(checkpoint_path);
    const auto indexes = retrieval::build_indexes(params, store.catalog(), cfg.backend, cfg.graph);
    const std::string path = cfg.out_dir + "/index.bin";
    retrieval::save_indexes(indexes, path);
    write_manifest(cfg, "build-index", {path});
    std::printf("built %zu category indexes (%s backend) -> %s\n", indexes.size(),
                cfg.backend == retrieval::Backend::kExact ? "exact" : "graph", path.c_str());
    return 0;
}

int cmd_retrieve(const CommonArgs& args, const std::string& data_path,
                 const std::string& checkpoint_path, const std::string& index_path, int user_id,
                 std::int64_t now_flag, int top_m_flag, int pick_n_flag) {
    RunConfig cfg = make_config(args);
    require_file(data_path, "data");
    require_file(checkpoint_path, "checkpoint");
    require_file(index_path, "index");
    const auto store = load_store(data_path);
    const auto params = encoder::load_checkpoint(checkpoint_path);
    const auto indexes = retrieval::load_indexes(index_path);
    if (!store.has_user(user_id)) {
        throw ConfigError("user " + std::to_string(user_id) + " not in dataset");
    }
    auto rc = cfg.retrieval_config();
    if (now_flag >= 0) {
        rc.now = now_flag;
    }
    if (top_m_flag > 0) {
        rc.selection.top_m = top_m_flag;
    }
    if (pick_n_flag > 0) {
        rc.selection.pick_n = pick_n_flag;
    }
    const auto result = retrieval::multi_retrieve(params, store.log_of(user_id),
                                                  store.profile_of(user_id).profile_tokens,
                                                  indexes, rc);

    for (const auto& note : result.diagnostics) {
        std::printf("note: %s\n", note.c_str());
    }
    std::printf("user %d: %zu interests selected\n", user_id, result.selected_categories.size());
    for (int cat : result.selected_categories) {
        const auto it = result.subseq_lengths.find(cat);
        std::printf("  interest %d: subsequence length %d\n", cat,
                    it == result.subseq_lengths.end() ? 0 : it->second);
    }
    std::printf("merged top-%zu:\n", result.merged.size());
    for (const auto& m : result.merged) {
        std::printf("  item %-8d score %10.4f category %d\n", m.item_id, m.score,
                    m.source_category);
    }

    json out;
    out["user"] = user_id;
    out["selected_categories"] = result.selected_categories;
    out["subseq_lengths"] = result.subseq_lengths;
    json merged = json::array();
    for (const auto& m : result.merged) {
        merged.push_back({{"item", m.item_id}, {"score", m.score}, {"category", m.source_category}});
    }
    out["merged"] = std::move(merged);
    out["diagnostics"] = result.diagnostics;
    const std::string path = cfg.out_dir + "/retrieval.json";
    write_text_file(path, out.dump(2) + "\n");
    write_manifest(cfg, "retrieve", {path});
    return 0;
}

json retrieval_run_to_json(const eval::RetrievalRun& run) {
    json j;
    j["users"] = run.request_users;
    j["merged"] = run.merged_items;
    j["selected"] = run.selected_categories;
    return j;
}

eval::RetrievalRun retrieval_run_from_json(const json& j) {
    eval::RetrievalRun run;
    run.request_users = j.at("users").get<std::vector<int>>();
    run.merged_items = j.at("merged").get<std::vector<std::vector<int>>>();
    run.selected_categories = j.at("selected").get<std::vector<std::vector<int>>>();
    return run;
}

int cmd_evaluate(const CommonArgs& args, const std::string& data_path,
                 const std::string& checkpoint_path, const std::string& baseline_run_path) {
    RunConfig cfg = make_config(args);
    require_file(data_path, "data");
    require_file(checkpoint_path, "checkpoint");
    auto store = load_store(data_path);
    const auto split = datagen::train_eval_split(store.logs(), cfg.holdout_per_user);
    store.set_logs(split.train_logs);
    const auto params = encoder::load_checkpoint(checkpoint_path);

    eval::EvalReport report = eval::evaluate_model(params, store, split.eval_pairs, cfg.eval_options());
    report.name = "model";
    report.config_echo = cfg.echo();

    // retrieval run over the eval users, for coverage and uniqueness
    std::set<int> user_set;
    for (const auto& pair : split.eval_pairs) {
        user_set.insert(pair.user_id);
    }
    const std::vector<int> users(user_set.begin(), user_set.end());
    const auto indexes = retrieval::build_indexes(params, store.catalog(), cfg.backend, cfg.graph);
    const auto run = eval::run_retrieval(params, store, indexes, users, cfg.retrieval_config());
    report.category_coverage = run.category_coverage();

    if (!baseline_run_path.empty()) {
        require_file(baseline_run_path, "baseline-run");
        const auto baseline =
            retrieval_run_from_json(json::parse(read_text_file(baseline_run_path)));
        if (baseline.request_users != run.request_users) {
            throw ConfigError("baseline run covers different requests; evaluate both runs on the "
                              "same dataset and holdout");
        }
        report.uniqueness_vs_baseline =
            eval::uniqueness_ratio(run.merged_items, baseline.merged_items);
        report.baseline_name = baseline_run_path;
    }

    const std::string report_json = cfg.out_dir + "/report.json";
    const std::string report_txt = cfg.out_dir + "/report.txt";
    const std::string run_path = cfg.out_dir + "/retrieval_run.json";
    write_text_file(report_json, eval::to_json_string(report) + "\n");
    const std::string table = eval::to_text_table({report});
    write_text_file(report_txt, table);
    write_text_file(run_path, retrieval_run_to_json(run).dump() + "\n");
    write_manifest(cfg, "evaluate", {report_json, report_txt, run_path});
    std::fputs(table.c_str(), stdout);
    return 0;
}

int cmd_ablation(const CommonArgs& args, const std::string& suite_name) {
    RunConfig cfg = make_config(args);
    const auto suite = eval::suite_from_name(suite_name);
    const auto sc = make_suite_config(cfg);
    const auto outcome = eval::run_ablation(suite, sc);

    const std::string a_path = cfg.out_dir + "/report_" + outcome.arm_a.name + ".json";
    const std::string b_path = cfg.out_dir + "/report_" + outcome.arm_b.name + ".json";
    const std::string table_path = cfg.out_dir + "/report.txt";
    write_text_file(a_path, eval::to_json_string(outcome.arm_a) + "\n");
    write_text_file(b_path, eval::to_json_string(outcome.arm_b) + "\n");
    const std::string table = eval::to_text_table({outcome.arm_a, outcome.arm_b});
    write_text_file(table_path, table);
    write_manifest(cfg, "ablation:" + suite_name, {a_path, b_path, table_path});
    std::printf("suite %s\n%s", outcome.suite.c_str(), table.c_str());
    return 0;
}

int cmd_leakage_experiment(const CommonArgs& args) {
    RunConfig cfg = make_config(args);
    const auto sc = make_suite_config(cfg);
    const auto outcome = eval::run_ablation(eval::Suite::kBatchMixing, sc);

    const std::string a_path = cfg.out_dir + "/report_" + outcome.arm_a.name + ".json";
    const std::string b_path = cfg.out_dir + "/report_" + outcome.arm_b.name + ".json";
    const std::string table_path = cfg.out_dir + "/report.txt";
    write_text_file(a_path, eval::to_json_string(outcome.arm_a) + "\n");
    write_text_file(b_path, eval::to_json_string(outcome.arm_b) + "\n");
    const std::string table = eval::to_text_table({outcome.arm_a, outcome.arm_b});
    write_text_file(table_path, table);
    write_manifest(cfg, "leakage-experiment", {a_path, b_path, table_path});

    std::fputs(table.c_str(), stdout);
    const double gap_pure = outcome.arm_a.leakage ? outcome.arm_a.leakage->gap : 0.0;
    const double gap_mixed = outcome.arm_b.leakage ? outcome.arm_b.leakage->gap : 0.0;
    std::printf("\nleakage gap: mixed batches %.4f vs single-category batches %.4f (%s)\n",
                gap_mixed, gap_pure,
                gap_mixed > gap_pure ? "mixed-batch model leans harder on category match"
                                     : "no category-shortcut advantage detected");
    return 0;
}

}  // namespace

int run(int argc, const char* const* argv) {
    CLI::App app{"dual-tower retrieval over lifelong behavior sequences: synthetic data, "
                 "single-category contrastive training, per-interest retrieval, evaluation"};
    app.require_subcommand(1);

    CommonArgs gen_args;
    bool gzip_flag = false;
    auto* gen = app.add_subcommand("gen-data", "generate a seeded synthetic dataset");
    add_common(gen, gen_args);
    gen->add_flag("--gzip", gzip_flag, "gzip the dataset file");

    CommonArgs train_args;
    std::string train_data;
    auto* train = app.add_subcommand("train", "train the dual-tower model");
    add_common(train, train_args);
    train->add_option("--data", train_data, "dataset JSONL path")->required();

    CommonArgs index_args;
    std::string index_data, index_ckpt;
    auto* build_index = app.add_subcommand("build-index", "encode items and build category indexes");
    add_common(build_index, index_args);
    build_index->add_option("--data", index_data, "dataset JSONL path")->required();
    build_index->add_option("--checkpoint", index_ckpt, "model checkpoint path")->required();

    CommonArgs retr_args;
    std::string retr_data, retr_ckpt, retr_index;
    int retr_user = -1;
    std::int64_t retr_now = -1;
    int retr_top_m = 0, retr_pick_n = 0;
    auto* retrieve = app.add_subcommand("retrieve", "multi-interest retrieval for one user");
    add_common(retrieve, retr_args);
    retrieve->add_option("--data", retr_data, "dataset JSONL path")->required();
    retrieve->add_option("--checkpoint", retr_ckpt, "model checkpoint path")->required();
    retrieve->add_option("--index", retr_index, "index snapshot path")->required();
    retrieve->add_option("--user", retr_user, "user id")->required();
    retrieve->add_option("--now", retr_now, "request day (defaults to the data horizon)");
    retrieve->add_option("--top-m", retr_top_m, "engagement ranking cut (selection.top_m)");
    retrieve->add_option("--pick-n", retr_pick_n, "interests sampled per request (selection.pick_n)");

    CommonArgs eval_args;
    std::string eval_data, eval_ckpt, eval_baseline;
    auto* evaluate = app.add_subcommand("evaluate", "recall, leakage probe and retrieval report");
    add_common(evaluate, eval_args);
    evaluate->add_option("--data", eval_data, "dataset JSONL path")->required();
    evaluate->add_option("--checkpoint", eval_ckpt, "model checkpoint path")->required();
    evaluate->add_option("--baseline-run", eval_baseline,
                         "retrieval_run.json of another run, for the uniqueness ratio");

    CommonArgs abl_args;
    std::string abl_suite;
    auto* ablation = app.add_subcommand("ablation", "paired-configuration experiment");
    add_common(ablation, abl_args);
    ablation->add_option("--suite", abl_suite, "random_vs_top | long_seq | batch_mixing")
        ->required();

    CommonArgs leak_args;
    auto* leakage = app.add_subcommand("leakage-experiment",
                                       "end-to-end batch-mixing ablation with gap comparison");
    add_common(leakage, leak_args);

    try {
        app.parse(argc, argv);
        if (gen->parsed()) {
            return cmd_gen_data(gen_args, gzip_flag);
        }
        if (train->parsed()) {
            return cmd_train(train_args, train_data);
        }
        if (build_index->parsed()) {
            return cmd_build_index(index_args, index_data, index_ckpt);
        }
        if (retrieve->parsed()) {
            return cmd_retrieve(retr_args, retr_data, retr_ckpt, retr_index, retr_user, retr_now,
                                retr_top_m, retr_pick_n);
        }
        if (evaluate->parsed()) {
            return cmd_evaluate(eval_args, eval_data, eval_ckpt, eval_baseline);
        }
        if (ablation->parsed()) {
            return cmd_ablation(abl_args, abl_suite);
        }
        if (leakage->parsed()) {
            return cmd_leakage_experiment(leak_args);
        }
        return 1;
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}

}  // namespace ctxr::cli
