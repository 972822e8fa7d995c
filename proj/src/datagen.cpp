#include "ctxr/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "ctxr/common.hpp"
#include "ctxr/gzio.hpp"
#include "ctxr/rng.hpp"

namespace ctxr::datagen {

using nlohmann::json;

int Catalog::category_of(int item_id) const {
    if (item_id < 0 || item_id >= num_items()) {
        throw std::out_of_range("unknown item_id " + std::to_string(item_id));
    }
    return items[static_cast<std::size_t>(item_id)].category_id;
}

namespace {

void validate(const GenConfig& c) {
    if (c.num_users < 1 || c.num_items < 1 || c.num_categories < 1 || c.mean_log_len < 1) {
        throw ConfigError("datagen: all counts must be >= 1");
    }
    if (c.num_items < c.num_categories) {
        throw ConfigError("datagen: num_items must be >= num_categories");
    }
    if (c.profile_tokens < 1 || c.profile_vocab < 1 || c.taste_dim < 1 || c.horizon_days < 1) {
        throw ConfigError("datagen: profile/taste/horizon fields must be >= 1");
    }
}

Catalog make_catalog(const GenConfig& c, Rng& rng) {
    Catalog cat;
    cat.num_categories = c.num_categories;
    cat.items.resize(static_cast<std::size_t>(c.num_items));

    // Mildly uneven category sizes; the first item of each category is pinned
    // so no category is empty.
    std::vector<double> cat_cum(static_cast<std::size_t>(c.num_categories));
    double running = 0.0;
    for (int k = 0; k < c.num_categories; ++k) {
        running += std::pow(static_cast<double>(k + 1), -0.7);
        cat_cum[static_cast<std::size_t>(k)] = running;
    }
    for (int i = 0; i < c.num_items; ++i) {
        auto& item = cat.items[static_cast<std::size_t>(i)];
        item.item_id = i;
        item.category_id = i < c.num_categories ? i : rng.discrete_from_cumulative(cat_cum);
    }

    cat.popularity.resize(static_cast<std::size_t>(c.num_items));
    for (int i = 0; i < c.num_items; ++i) {
        cat.popularity[static_cast<std::size_t>(i)] = std::pow(static_cast<double>(i + 1), -c.zipf_exponent);
    }

    const double factor_sd = 1.0 / std::sqrt(static_cast<double>(c.taste_dim));
    cat.factors.resize(static_cast<std::size_t>(c.num_items));
    for (auto& f : cat.factors) {
        f.resize(static_cast<std::size_t>(c.taste_dim));
        for (auto& x : f) {
            x = rng.normal(0.0, factor_sd);
        }
    }
    return cat;
}

}  // namespace

Dataset generate(const GenConfig& config) {
    validate(config);
    Dataset out;
    Rng master(config.seed);
    Rng catalog_rng = master.fork(0);
    out.catalog = make_catalog(config, catalog_rng);

    // item ids grouped by category, ascending
    std::vector<std::vector<int>> by_category(static_cast<std::size_t>(config.num_categories));
    for (const auto& item : out.catalog.items) {
        by_category[static_cast<std::size_t>(item.category_id)].push_back(item.item_id);
    }

    out.users.reserve(static_cast<std::size_t>(config.num_users));
    out.logs.reserve(static_cast<std::size_t>(config.num_users));

    for (int u = 0; u < config.num_users; ++u) {
        Rng rng = master.fork(static_cast<std::uint64_t>(u) + 1);

        SyntheticUser user;
        user.user_id = u;
        user.profile_tokens.resize(static_cast<std::size_t>(config.profile_tokens));
        for (auto& t : user.profile_tokens) {
            t = rng.below_int(config.profile_vocab);
        }
        user.category_mixture = rng.dirichlet(config.dirichlet_alpha, config.num_categories);
        user.latent_taste.resize(static_cast<std::size_t>(config.num_categories));
        for (auto& taste : user.latent_taste) {
            taste.resize(static_cast<std::size_t>(config.taste_dim));
            for (auto& x : taste) {
                x = rng.normal();
            }
        }

        std::vector<double> mix_cum(user.category_mixture.size());
        double acc = 0.0;
        for (std::size_t k = 0; k < mix_cum.size(); ++k) {
            acc += user.category_mixture[k];
            mix_cum[k] = acc;
        }

        const double mean = static_cast<double>(config.mean_log_len);
        const int len = std::max(
            0, static_cast<int>(std::llround(mean + std::sqrt(mean) * rng.normal())));

        std::vector<std::int64_t> days(static_cast<std::size_t>(len));
        for (auto& d : days) {
            d = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(config.horizon_days)));
        }
        std::sort(days.begin(), days.end());

        // within-category item weights, computed once per category the user touches
        std::unordered_map<int, std::vector<double>> item_cum_by_cat;

        BehaviorLog log;
        log.user_id = u;
        log.events.reserve(static_cast<std::size_t>(len));
        for (int e = 0; e < len; ++e) {
            const int c = rng.discrete_from_cumulative(mix_cum);
            auto it = item_cum_by_cat.find(c);
            if (it == item_cum_by_cat.end()) {
                const auto& ids = by_category[static_cast<std::size_t>(c)];
                std::vector<double> cum(ids.size());
                double s = 0.0;
                for (std::size_t j = 0; j < ids.size(); ++j) {
                    const int id = ids[j];
                    double dot = 0.0;
                    for (int d = 0; d < config.taste_dim; ++d) {
                        dot += user.latent_taste[static_cast<std::size_t>(c)][static_cast<std::size_t>(d)] *
                               out.catalog.factors[static_cast<std::size_t>(id)][static_cast<std::size_t>(d)];
                    }
                    s += out.catalog.popularity[static_cast<std::size_t>(id)] *
                         std::exp(config.affinity_scale * dot);
                    cum[j] = s;
                }
                it = item_cum_by_cat.emplace(c, std::move(cum)).first;
            }
            const auto& ids = by_category[static_cast<std::size_t>(c)];
            const int pick = rng.discrete_from_cumulative(it->second);
            log.events.push_back({ids[static_cast<std::size_t>(pick)], c, days[static_cast<std::size_t>(e)]});
        }

        out.users.push_back(std::move(user));
        out.logs.push_back(std::move(log));
    }
    return out;
}

Split train_eval_split(const std::vector<BehaviorLog>& logs, int holdout_per_user) {
    if (holdout_per_user < 1) {
        throw ConfigError("train_eval_split: holdout_per_user must be >= 1");
    }
    Split split;
    split.train_logs.reserve(logs.size());
    for (const auto& log : logs) {
        const int n = static_cast<int>(log.events.size());
        BehaviorLog train;
        train.user_id = log.user_id;
        if (n > holdout_per_user) {
            train.events.assign(log.events.begin(), log.events.end() - holdout_per_user);
            for (int i = n - holdout_per_user; i < n; ++i) {
                const auto& ev = log.events[static_cast<std::size_t>(i)];
                split.eval_pairs.push_back({log.user_id, ev.item_id, ev.category_id, ev.timestamp});
            }
        } else {
            train.events = log.events;
        }
        split.train_logs.push_back(std::move(train));
    }
    return split;
}

void write_jsonl(const Dataset& dataset, const std::string& path) {
    std::string out;
    {
        json rec;
        rec["type"] = "catalog";
        rec["num_items"] = dataset.catalog.num_items();
        rec["num_categories"] = dataset.catalog.num_categories;
        json items = json::array();
        for (const auto& item : dataset.catalog.items) {
            items.push_back(json::array({item.item_id, item.category_id}));
        }
        rec["items"] = std::move(items);
        rec["popularity"] = dataset.catalog.popularity;
        out += rec.dump();
        out += '\n';
    }
    for (std::size_t u = 0; u < dataset.users.size(); ++u) {
        json rec;
        rec["type"] = "user";
        rec["user_id"] = dataset.users[u].user_id;
        rec["profile"] = dataset.users[u].profile_tokens;
        json events = json::array();
        for (const auto& ev : dataset.logs[u].events) {
            events.push_back(json::array({ev.item_id, ev.category_id, ev.timestamp}));
        }
        rec["events"] = std::move(events);
        out += rec.dump();
        out += '\n';
    }
    write_text_file(path, out);
}

}  // namespace ctxr::datagen
