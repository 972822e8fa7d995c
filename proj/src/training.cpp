#include "ctxr/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "ctxr/common.hpp"
#include "ctxr/rng.hpp"

namespace ctxr::training {

using encoder::GradBuffer;
using encoder::ModelParams;
using nlohmann::json;

std::vector<SampleRef> build_sample_refs(const seqstore::BehaviorStore& store, int min_history) {
    if (min_history < 0) {
        throw ConfigError("train: min_history must be >= 0");
    }
    std::vector<SampleRef> refs;
    const auto& logs = store.logs();
    std::unordered_map<int, int> prior;  // category -> strictly-earlier event count
    for (std::size_t u = 0; u < logs.size(); ++u) {
        const auto& events = logs[u].events;
        prior.clear();
        // events sharing a timestamp must not count each other as history
        std::size_t i = 0;
        while (i < events.size()) {
            std::size_t j = i;
            while (j < events.size() && events[j].timestamp == events[i].timestamp) {
                ++j;
            }
            for (std::size_t e = i; e < j; ++e) {
                auto it = prior.find(events[e].category_id);
                const int seen = it == prior.end() ? 0 : it->second;
                if (seen >= min_history) {
                    refs.push_back({static_cast<int>(u), static_cast<int>(e), events[e].category_id});
                }
            }
            for (std::size_t e = i; e < j; ++e) {
                ++prior[events[e].category_id];
            }
            i = j;
        }
    }
    return refs;
}

TrainSample materialize_sample(const seqstore::BehaviorStore& store, const SampleRef& ref,
                               int l_sub, SeqMode seq_mode) {
    const auto& log = store.logs()[static_cast<std::size_t>(ref.user_idx)];
    const auto& ev = log.events[static_cast<std::size_t>(ref.event_idx)];
    TrainSample s;
    s.user_id = log.user_id;
    s.profile_tokens = store.profiles()[static_cast<std::size_t>(ref.user_idx)].profile_tokens;
    s.positive_item_id = ev.item_id;
    s.context_category = ev.category_id;
    s.timestamp = ev.timestamp;
    s.subseq = seq_mode == SeqMode::kHardSearch
                   ? seqstore::hard_search_before(log, ev.category_id, l_sub, ev.timestamp)
                   : seqstore::recent_any_category_before(log, ev.category_id, l_sub, ev.timestamp);
    if (!s.subseq.empty() && s.subseq.entries.back().timestamp >= ev.timestamp) {
        throw std::logic_error("sample subsequence leaks events at or after the positive");
    }
    return s;
}

BatchCache::BatchCache(int batch_size, FlushPolicy policy, int cap_multiplier)
    : batch_size_(batch_size), policy_(policy),
      cap_(static_cast<std::size_t>(batch_size) * static_cast<std::size_t>(cap_multiplier)) {
    if (batch_size < 1) {
        throw ConfigError("batch cache: batch_size must be >= 1");
    }
}

std::optional<Batch> BatchCache::push(const SampleRef& ref) {
    auto& q = queues_[ref.category];
    q.push_back(ref);
    while (q.size() > cap_) {
        q.pop_front();
    }
    if (static_cast<int>(q.size()) == batch_size_) {
        Batch b;
        b.context_category = ref.category;
        b.refs.assign(q.begin(), q.end());
        q.clear();
        return b;
    }
    return std::nullopt;
}

std::vector<Batch> BatchCache::flush() {
    std::vector<Batch> out;
    if (policy_ == FlushPolicy::kEmitShort) {
        for (auto& [category, q] : queues_) {
            if (!q.empty()) {
                Batch b;
                b.context_category = category;
                b.refs.assign(q.begin(), q.end());
                b.is_short = true;
                out.push_back(std::move(b));
            }
        }
    }
    queues_.clear();
    return out;
}

std::vector<Batch> naive_batches(std::span<const SampleRef> stream, int batch_size,
                                 FlushPolicy policy) {
    if (batch_size < 1) {
        throw ConfigError("naive_batches: batch_size must be >= 1");
    }
    std::vector<Batch> out;
    std::size_t i = 0;
    while (i < stream.size()) {
        const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(batch_size),
                                                       stream.size() - i);
        if (take < static_cast<std::size_t>(batch_size) && policy == FlushPolicy::kDrop) {
            break;
        }
        Batch b;
        b.refs.assign(stream.begin() + static_cast<std::ptrdiff_t>(i),
                      stream.begin() + static_cast<std::ptrdiff_t>(i + take));
        b.is_short = take < static_cast<std::size_t>(batch_size);
        out.push_back(std::move(b));
        i += take;
    }
    return out;
}

ScoreLoss in_batch_loss_from_scores(std::span<const double> scores, int b) {
    ScoreLoss out;
    out.d_scores.assign(static_cast<std::size_t>(b) * b, 0.0);
    double total = 0.0;
    for (int i = 0; i < b; ++i) {
        const double* row = scores.data() + static_cast<std::size_t>(i) * b;
        double mx = -1e300;
        for (int j = 0; j < b; ++j) {
            if (!std::isfinite(row[j])) {
                throw NumericError("in_batch_loss: non-finite score at (" + std::to_string(i) +
                                   ", " + std::to_string(j) + ")");
            }
            mx = std::max(mx, row[j]);
        }
        double z = 0.0;
        for (int j = 0; j < b; ++j) {
            z += std::exp(row[j] - mx);
        }
        const double log_z = std::log(z) + mx;
        total += log_z - row[i];
        double* drow = out.d_scores.data() + static_cast<std::size_t>(i) * b;
        for (int j = 0; j < b; ++j) {
            drow[j] = std::exp(row[j] - log_z) / b;  // softmax / b
        }
        drow[i] -= 1.0 / b;
    }
    out.loss = total / b;
    return out;
}

LossResult in_batch_loss(std::span<const double> user_vecs, std::span<const double> item_vecs,
                         int b, int dim, double temperature) {
    std::vector<double> scores(static_cast<std::size_t>(b) * b);
    for (int i = 0; i < b; ++i) {
        const double* u = user_vecs.data() + static_cast<std::size_t>(i) * dim;
        for (int j = 0; j < b; ++j) {
            const double* v = item_vecs.data() + static_cast<std::size_t>(j) * dim;
            double s = 0.0;
            for (int k = 0; k < dim; ++k) {
                s += u[k] * v[k];
            }
            scores[static_cast<std::size_t>(i) * b + j] = s / temperature;
        }
    }
    ScoreLoss core = in_batch_loss_from_scores(scores, b);

    LossResult out;
    out.loss = core.loss;
    out.d_user.assign(static_cast<std::size_t>(b) * dim, 0.0);
    out.d_item.assign(static_cast<std::size_t>(b) * dim, 0.0);
    for (int i = 0; i < b; ++i) {
        const double* ds = core.d_scores.data() + static_cast<std::size_t>(i) * b;
        const double* u = user_vecs.data() + static_cast<std::size_t>(i) * dim;
        double* du = out.d_user.data() + static_cast<std::size_t>(i) * dim;
        for (int j = 0; j < b; ++j) {
            const double g = ds[j] / temperature;
            const double* v = item_vecs.data() + static_cast<std::size_t>(j) * dim;
            double* dv = out.d_item.data() + static_cast<std::size_t>(j) * dim;
            for (int k = 0; k < dim; ++k) {
                du[k] += g * v[k];
                dv[k] += g * u[k];
            }
        }
    }
    return out;
}

Adam::Adam(const ModelParams& params, const AdamConfig& config) : config_(config) {
    m_.reserve(params.tensors.size());
    v_.reserve(params.tensors.size());
    for (const auto& t : params.tensors) {
        m_.emplace_back(t.data.size(), 0.0);
        v_.emplace_back(t.data.size(), 0.0);
    }
}

void Adam::step(ModelParams& params, const GradBuffer& grads) {
    ++t_;
    const double bias1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double bias2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t t = 0; t < params.tensors.size(); ++t) {
        auto& data = params.tensors[t].data;
        const auto& g = grads.g[t];
        auto& m = m_[t];
        auto& v = v_[t];
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double gi = g[i];
            m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * gi;
            v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi;
            const double mhat = m[i] / bias1;
            const double vhat = v[i] / bias2;
            data[i] = static_cast<float>(static_cast<double>(data[i]) -
                                         config_.lr * mhat / (std::sqrt(vhat) + config_.eps));
        }
    }
}

namespace {

std::vector<Batch> make_epoch_batches(std::vector<SampleRef> stream, const TrainConfig& cfg,
                                      Rng& epoch_rng) {
    epoch_rng.shuffle(stream);
    if (cfg.samples_per_epoch > 0 &&
        static_cast<int>(stream.size()) > cfg.samples_per_epoch) {
        stream.resize(static_cast<std::size_t>(cfg.samples_per_epoch));
    }
    std::vector<Batch> batches;
    if (cfg.batch_mode == BatchMode::kMixed) {
        batches = naive_batches(stream, cfg.batch_size, cfg.flush);
    } else {
        BatchCache cache(cfg.batch_size, cfg.flush);
        for (const auto& ref : stream) {
            if (auto b = cache.push(ref)) {
                batches.push_back(std::move(*b));
            }
        }
        for (auto& b : cache.flush()) {
            batches.push_back(std::move(b));
        }
    }
    if (cfg.max_steps_per_epoch > 0 &&
        static_cast<int>(batches.size()) > cfg.max_steps_per_epoch) {
        batches.resize(static_cast<std::size_t>(cfg.max_steps_per_epoch));
    }
    return batches;
}

}  // namespace

TrainResult train(const encoder::ModelConfig& model_config, const seqstore::BehaviorStore& store,
                  const TrainConfig& config, const encoder::ModelParams* initial_params) {
    model_config.validate();
    if (config.epochs < 1) {
        throw ConfigError("train: epochs must be >= 1");
    }
    const int dim = model_config.dim;

    TrainResult result;
    result.params = initial_params ? *initial_params
                                   : encoder::init_params(model_config, config.seed);
    encoder::ModelParams last_good = result.params;

    Adam adam(result.params, config.adam);
    GradBuffer grads;
    grads.init(result.params);

    const std::vector<SampleRef> refs = build_sample_refs(store, config.min_history);
    Rng rng(config.seed ^ 0x5eedf00dULL);

    std::ofstream metrics;
    if (!config.metrics_path.empty()) {
        metrics.open(config.metrics_path, std::ios::binary);
        if (!metrics) {
            throw IoError("cannot open metrics log: " + config.metrics_path);
        }
    }
    const auto run_start = std::chrono::steady_clock::now();
    auto wall_ms = [&] {
        return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - run_start)
            .count();
    };

    std::vector<encoder::UserCache> caches(static_cast<std::size_t>(config.batch_size));
    bool first = true;
    int step = 0;

    for (int epoch = 0; epoch < config.epochs && !result.aborted; ++epoch) {
        Rng epoch_rng = rng.fork(static_cast<std::uint64_t>(epoch));
        const std::vector<Batch> batches = make_epoch_batches(refs, config, epoch_rng);

        for (const auto& batch : batches) {
            const int b = static_cast<int>(batch.refs.size());
            std::vector<TrainSample> samples;
            samples.reserve(static_cast<std::size_t>(b));
            for (const auto& ref : batch.refs) {
                samples.push_back(
                    materialize_sample(store, ref, model_config.subseq_len, config.seq_mode));
            }

            std::vector<double> user_vecs(static_cast<std::size_t>(b) * dim);
            std::vector<double> item_vecs(static_cast<std::size_t>(b) * dim);
            if (caches.size() < static_cast<std::size_t>(b)) {
                caches.resize(static_cast<std::size_t>(b));
            }
            for (int i = 0; i < b; ++i) {
                const auto& s = samples[static_cast<std::size_t>(i)];
                encoder::encode_user_forward(result.params, s.profile_tokens, s.subseq,
                                             caches[static_cast<std::size_t>(i)]);
                const auto& e_u = caches[static_cast<std::size_t>(i)].e_u;
                std::copy(e_u.begin(), e_u.end(), user_vecs.begin() + static_cast<std::ptrdiff_t>(i) * dim);
                const auto e_v =
                    encoder::encode_item(result.params, s.positive_item_id, s.context_category);
                std::copy(e_v.begin(), e_v.end(), item_vecs.begin() + static_cast<std::ptrdiff_t>(i) * dim);
            }

            LossResult loss;
            try {
                loss = in_batch_loss(user_vecs, item_vecs, b, dim, model_config.temperature);
            } catch (const NumericError& e) {
                result.aborted = true;
                result.abort_reason = std::string(e.what()) + " at step " + std::to_string(step);
                result.params = last_good;
                break;
            }
            if (first) {
                result.first_loss = loss.loss;
                first = false;
            }
            result.final_loss = loss.loss;

            grads.zero();
            for (int i = 0; i < b; ++i) {
                const auto& s = samples[static_cast<std::size_t>(i)];
                encoder::encode_user_backward(
                    result.params, caches[static_cast<std::size_t>(i)],
                    std::span<const double>(loss.d_user.data() + static_cast<std::size_t>(i) * dim,
                                            static_cast<std::size_t>(dim)),
                    grads);
                encoder::encode_item_backward(
                    result.params, s.positive_item_id, s.context_category,
                    std::span<const double>(loss.d_item.data() + static_cast<std::size_t>(i) * dim,
                                            static_cast<std::size_t>(dim)),
                    grads);
            }
            adam.step(result.params, grads);

            if (metrics.is_open() && (step % config.log_every == 0)) {
                json rec;
                rec["step"] = step;
                rec["loss"] = loss.loss;
                rec["category"] = batch.context_category;
                rec["wall_ms"] = wall_ms();
                metrics << rec.dump() << "\n";
            }
            if (config.verbose && step % config.log_every == 0) {
                std::printf("epoch %d step %d loss %.4f\n", epoch, step, loss.loss);
                std::fflush(stdout);
            }
            ++step;
        }

        if (!result.aborted) {
            last_good = result.params;
            if (!config.checkpoint_path.empty()) {
                encoder::save_checkpoint(result.params, config.checkpoint_path);
            }
        }
    }

    result.steps = step;
    return result;
}

}  // namespace ctxr::training
