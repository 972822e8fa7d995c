#include "ctxr/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "ctxr/common.hpp"

namespace ctxr::config {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) {
        ++b;
    }
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) {
        --e;
    }
    return s.substr(b, e - b);
}

int to_int(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const int x = std::stoi(v, &used);
        if (used != v.size()) {
            throw std::invalid_argument(v);
        }
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected integer, got '" + v + "'");
    }
}

std::int64_t to_i64(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const std::int64_t x = std::stoll(v, &used);
        if (used != v.size()) {
            throw std::invalid_argument(v);
        }
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected integer, got '" + v + "'");
    }
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const std::uint64_t x = std::stoull(v, &used);
        if (used != v.size()) {
            throw std::invalid_argument(v);
        }
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected unsigned integer, got '" + v + "'");
    }
}

double to_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double x = std::stod(v, &used);
        if (used != v.size()) {
            throw std::invalid_argument(v);
        }
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected number, got '" + v + "'");
    }
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") {
        return true;
    }
    if (v == "false" || v == "0" || v == "no") {
        return false;
    }
    throw ConfigError("config key '" + key + "': expected boolean, got '" + v + "'");
}

std::vector<int> to_int_list(const std::string& key, const std::string& v) {
    std::vector<int> out;
    std::stringstream ss(v);
    std::string part;
    while (std::getline(ss, part, ',')) {
        part = trim(part);
        if (!part.empty()) {
            out.push_back(to_int(key, part));
        }
    }
    if (out.empty()) {
        throw ConfigError("config key '" + key + "': expected a comma-separated integer list");
    }
    return out;
}

}  // namespace

void RunConfig::set(const std::string& section, const std::string& key, const std::string& value) {
    const std::string full = section + "." + key;
    if (section == "data") {
        if (key == "num_users") gen.num_users = to_int(full, value);
        else if (key == "num_items") gen.num_items = to_int(full, value);
        else if (key == "num_categories") gen.num_categories = to_int(full, value);
        else if (key == "mean_log_len") gen.mean_log_len = to_int(full, value);
        else if (key == "profile_tokens") gen.profile_tokens = to_int(full, value);
        else if (key == "profile_vocab") gen.profile_vocab = to_int(full, value);
        else if (key == "taste_dim") gen.taste_dim = to_int(full, value);
        else if (key == "horizon_days") gen.horizon_days = to_int(full, value);
        else if (key == "dirichlet_alpha") gen.dirichlet_alpha = to_double(full, value);
        else if (key == "zipf_exponent") gen.zipf_exponent = to_double(full, value);
        else if (key == "affinity_scale") gen.affinity_scale = to_double(full, value);
        else if (key == "holdout_per_user") holdout_per_user = to_int(full, value);
        else if (key == "gzip") gzip = to_bool(full, value);
        else if (key == "seed") data_seed = to_u64(full, value);
        else throw ConfigError("unknown config key '" + full + "'");
    } else if (section == "model") {
        if (key == "dim") model.dim = to_int(full, value);
        else if (key == "layers") model.layers = to_int(full, value);
        else if (key == "heads") model.heads = to_int(full, value);
        else if (key == "subseq_len") model.subseq_len = to_int(full, value);
        else if (key == "ffn_mult") model.ffn_mult = to_int(full, value);
        else if (key == "temperature") model.temperature = to_double(full, value);
        else if (key == "recency_buckets") model.recency_buckets = to_int(full, value);
        else throw ConfigError("unknown config key '" + full + "'");
    } else if (section == "training") {
        if (key == "batch_size") train.batch_size = to_int(full, value);
        else if (key == "epochs") train.epochs = to_int(full, value);
        else if (key == "min_history") train.min_history = to_int(full, value);
        else if (key == "max_steps_per_epoch") train.max_steps_per_epoch = to_int(full, value);
        else if (key == "samples_per_epoch") train.samples_per_epoch = to_int(full, value);
        else if (key == "log_every") train.log_every = to_int(full, value);
        else if (key == "lr") train.adam.lr = to_double(full, value);
        else if (key == "beta1") train.adam.beta1 = to_double(full, value);
        else if (key == "beta2") train.adam.beta2 = to_double(full, value);
        else if (key == "eps") train.adam.eps = to_double(full, value);
        else if (key == "seed") train_seed = to_u64(full, value);
        else if (key == "batch_mode") {
            if (value == "single_category") train.batch_mode = training::BatchMode::kSingleCategory;
            else if (value == "mixed") train.batch_mode = training::BatchMode::kMixed;
            else throw ConfigError("config key '" + full + "': expected single_category or mixed");
        } else if (key == "seq_mode") {
            if (value == "hard_search") train.seq_mode = training::SeqMode::kHardSearch;
            else if (value == "recent_any") train.seq_mode = training::SeqMode::kRecentAny;
            else throw ConfigError("config key '" + full + "': expected hard_search or recent_any");
        } else if (key == "flush_policy") {
            if (value == "drop") train.flush = training::FlushPolicy::kDrop;
            else if (value == "emit_short") train.flush = training::FlushPolicy::kEmitShort;
            else throw ConfigError("config key '" + full + "': expected drop or emit_short");
        } else throw ConfigError("unknown config key '" + full + "'");
    } else if (section == "selection") {
        if (key == "top_m") selection.top_m = to_int(full, value);
        else if (key == "pick_n") selection.pick_n = to_int(full, value);
        else if (key == "seed") selection_seed = to_u64(full, value);
        else if (key == "mode") {
            if (value == "random_in_top") selection_mode = retrieval::SelectionMode::kRandomInTop;
            else if (value == "top_n") selection_mode = retrieval::SelectionMode::kTopN;
            else throw ConfigError("config key '" + full + "': expected random_in_top or top_n");
        } else throw ConfigError("unknown config key '" + full + "'");
    } else if (section == "retrieval") {
        if (key == "per_category_k") per_category_k = to_int(full, value);
        else if (key == "k_total") k_total = to_int(full, value);
        else if (key == "quota") quota = to_int(full, value);
        else if (key == "now") now = to_i64(full, value);
        else if (key == "max_degree") graph.max_degree = to_int(full, value);
        else if (key == "ef_construction") graph.ef_construction = to_int(full, value);
        else if (key == "ef_search") graph.ef_search = to_int(full, value);
        else if (key == "merge") {
            if (value == "interleave") merge_strategy = retrieval::MergeStrategy::kInterleave;
            else if (value == "global_score") merge_strategy = retrieval::MergeStrategy::kGlobalScore;
            else if (value == "quota") merge_strategy = retrieval::MergeStrategy::kQuota;
            else throw ConfigError("config key '" + full +
                                   "': expected interleave, global_score or quota");
        } else if (key == "backend") {
            if (value == "exact") backend = retrieval::Backend::kExact;
            else if (value == "graph") backend = retrieval::Backend::kGraph;
            else throw ConfigError("config key '" + full + "': expected exact or graph");
        } else throw ConfigError("unknown config key '" + full + "'");
    } else if (section == "eval") {
        if (key == "recall_ks") recall_ks = to_int_list(full, value);
        else if (key == "leakage_negatives") leakage_negatives = to_int(full, value);
        else throw ConfigError("unknown config key '" + full + "'");
    } else if (section == "run") {
        if (key == "seed") seed = to_u64(full, value);
        else if (key == "out_dir") out_dir = value;
        else throw ConfigError("unknown config key '" + full + "'");
    } else {
        throw ConfigError("unknown config section '" + section + "'");
    }
}

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
    RunConfig cfg;
    if (!path.empty()) {
        std::ifstream f(path);
        if (!f) {
            throw IoError("cannot open config: " + path);
        }
        std::string line, section;
        int line_no = 0;
        while (std::getline(f, line)) {
            ++line_no;
            const std::size_t comment = line.find_first_of("#;");
            if (comment != std::string::npos) {
                line = line.substr(0, comment);
            }
            line = trim(line);
            if (line.empty()) {
                continue;
            }
            if (line.front() == '[') {
                if (line.back() != ']') {
                    throw ConfigError(path + ":" + std::to_string(line_no) + ": malformed section");
                }
                section = trim(line.substr(1, line.size() - 2));
                continue;
            }
            const std::size_t eq = line.find('=');
            if (eq == std::string::npos) {
                throw ConfigError(path + ":" + std::to_string(line_no) + ": expected key = value");
            }
            const std::string key = trim(line.substr(0, eq));
            const std::string value = trim(line.substr(eq + 1));
            if (section.empty()) {
                throw ConfigError(path + ":" + std::to_string(line_no) + ": key '" + key +
                                  "' outside any [section]");
            }
            cfg.set(section, key, value);
        }
    }
    apply_overrides(cfg, overrides);
    return cfg;
}

void apply_overrides(RunConfig& config, const std::vector<std::string>& overrides) {
    for (const auto& ov : overrides) {
        const std::size_t eq = ov.find('=');
        const std::size_t dot = ov.find('.');
        if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
            throw ConfigError("--set expects section.key=value, got '" + ov + "'");
        }
        config.set(trim(ov.substr(0, dot)), trim(ov.substr(dot + 1, eq - dot - 1)),
                   trim(ov.substr(eq + 1)));
    }
}

retrieval::RetrievalConfig RunConfig::retrieval_config() const {
    retrieval::RetrievalConfig rc;
    rc.selection = selection;
    rc.selection.seed = resolved_selection_seed();
    rc.selection_mode = selection_mode;
    rc.per_category_k = per_category_k;
    rc.k_total = k_total;
    rc.merge_strategy = merge_strategy;
    rc.quota = quota;
    rc.now = resolved_now();
    rc.seq_mode = train.seq_mode;
    return rc;
}

eval::EvalOptions RunConfig::eval_options() const {
    eval::EvalOptions opts;
    opts.recall_ks = recall_ks;
    opts.leakage_negatives = leakage_negatives;
    opts.seed = seed;
    opts.seq_mode = train.seq_mode;
    return opts;
}

void resolve_model(RunConfig& config, const seqstore::BehaviorStore& store) {
    const auto& catalog = store.catalog();
    config.model.num_items = catalog.num_items();
    config.model.num_categories = catalog.num_categories;
    config.model.profile_tokens = config.gen.profile_tokens;

    int max_token = -1;
    for (const auto& p : store.profiles()) {
        if (static_cast<int>(p.profile_tokens.size()) != config.gen.profile_tokens) {
            throw ConfigError("data.profile_tokens=" + std::to_string(config.gen.profile_tokens) +
                              " does not match the dataset (user " + std::to_string(p.user_id) +
                              " has " + std::to_string(p.profile_tokens.size()) + ")");
        }
        for (int t : p.profile_tokens) {
            max_token = std::max(max_token, t);
        }
    }
    config.model.profile_vocab = std::max(config.gen.profile_vocab, max_token + 1);
}

nlohmann::json RunConfig::echo() const {
    nlohmann::json j;
    j["data"] = {{"num_users", gen.num_users},
                 {"num_items", gen.num_items},
                 {"num_categories", gen.num_categories},
                 {"mean_log_len", gen.mean_log_len},
                 {"profile_tokens", gen.profile_tokens},
                 {"profile_vocab", gen.profile_vocab},
                 {"taste_dim", gen.taste_dim},
                 {"horizon_days", gen.horizon_days},
                 {"dirichlet_alpha", gen.dirichlet_alpha},
                 {"zipf_exponent", gen.zipf_exponent},
                 {"affinity_scale", gen.affinity_scale},
                 {"holdout_per_user", holdout_per_user},
                 {"gzip", gzip},
                 {"seed", resolved_data_seed()}};
    j["model"] = {{"dim", model.dim},
                  {"layers", model.layers},
                  {"heads", model.heads},
                  {"subseq_len", model.subseq_len},
                  {"ffn_mult", model.ffn_mult},
                  {"temperature", model.temperature},
                  {"recency_buckets", model.recency_buckets}};
    j["training"] = {
        {"batch_size", train.batch_size},
        {"epochs", train.epochs},
        {"min_history", train.min_history},
        {"max_steps_per_epoch", train.max_steps_per_epoch},
        {"samples_per_epoch", train.samples_per_epoch},
        {"batch_mode",
         train.batch_mode == training::BatchMode::kSingleCategory ? "single_category" : "mixed"},
        {"seq_mode",
         train.seq_mode == training::SeqMode::kHardSearch ? "hard_search" : "recent_any"},
        {"flush_policy", train.flush == training::FlushPolicy::kDrop ? "drop" : "emit_short"},
        {"lr", train.adam.lr},
        {"beta1", train.adam.beta1},
        {"beta2", train.adam.beta2},
        {"eps", train.adam.eps},
        {"seed", resolved_train_seed()}};
    j["selection"] = {
        {"top_m", selection.top_m},
        {"pick_n", selection.pick_n},
        {"mode", selection_mode == retrieval::SelectionMode::kRandomInTop ? "random_in_top" : "top_n"},
        {"seed", resolved_selection_seed()}};
    const char* merge_name = merge_strategy == retrieval::MergeStrategy::kInterleave ? "interleave"
                             : merge_strategy == retrieval::MergeStrategy::kGlobalScore
                                 ? "global_score"
                                 : "quota";
    j["retrieval"] = {{"per_category_k", per_category_k},
                      {"k_total", k_total},
                      {"merge", merge_name},
                      {"quota", quota},
                      {"backend", backend == retrieval::Backend::kExact ? "exact" : "graph"},
                      {"max_degree", graph.max_degree},
                      {"ef_construction", graph.ef_construction},
                      {"ef_search", graph.ef_search},
                      {"now", resolved_now()}};
    j["eval"] = {{"recall_ks", recall_ks}, {"leakage_negatives", leakage_negatives}};
    j["run"] = {{"seed", seed}, {"out_dir", out_dir}};
    return j;
}

}  // namespace ctxr::config
