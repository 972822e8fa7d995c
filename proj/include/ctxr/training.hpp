#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctxr/encoder.hpp"
#include "ctxr/seqstore.hpp"

namespace ctxr::training {

// Which subsequence the user tower sees for a sample.
enum class SeqMode {
    kHardSearch,  // category-matched history (default)
    kRecentAny,   // most recent events of any category (short-sequence ablation)
};

enum class BatchMode {
    kSingleCategory,  // category-keyed caching; every batch shares one category
    kMixed,           // plain sequential chunks of the shuffled stream
};

enum class FlushPolicy { kDrop, kEmitShort };

// One training instance: a (user, positive item) interaction plus the
// subsequence observed strictly before it.
struct TrainSample {
    int user_id = 0;
    std::vector<int> profile_tokens;
    int positive_item_id = 0;
    int context_category = 0;
    std::int64_t timestamp = 0;
    seqstore::SubSequence subseq;
};

// Lightweight handle into the store; samples are materialized per batch so
// large runs do not hold every subsequence in memory.
struct SampleRef {
    int user_idx = 0;
    int event_idx = 0;
    int category = 0;
};

// One ref per event with at least `min_history` strictly-earlier events in
// the same category. Order: by user index, then event index.
std::vector<SampleRef> build_sample_refs(const seqstore::BehaviorStore& store, int min_history);

TrainSample materialize_sample(const seqstore::BehaviorStore& store, const SampleRef& ref,
                               int l_sub, SeqMode seq_mode);

struct Batch {
    std::vector<SampleRef> refs;
    int context_category = -1;  // -1 for mixed batches
    bool is_short = false;
};

// Category-keyed sample cache. push() returns a batch whenever some
// category's queue fills; flush() drains leftovers per policy.
class BatchCache {
public:
    BatchCache(int batch_size, FlushPolicy policy, int cap_multiplier = 64);

    std::optional<Batch> push(const SampleRef& ref);
    std::vector<Batch> flush();

private:
    int batch_size_;
    FlushPolicy policy_;
    std::size_t cap_;
    std::map<int, std::deque<SampleRef>> queues_;
};

// Sequential chunking of an already-shuffled stream; mixed categories allowed.
std::vector<Batch> naive_batches(std::span<const SampleRef> stream, int batch_size,
                                 FlushPolicy policy);

// Softmax cross-entropy over score rows with diagonal targets:
// loss = mean_i -log(exp(s_ii) / sum_j exp(s_ij)). d_scores is the
// (softmax - one-hot)/B form. Throws NumericError on non-finite scores.
struct ScoreLoss {
    double loss = 0.0;
    std::vector<double> d_scores;  // b x b
};
ScoreLoss in_batch_loss_from_scores(std::span<const double> scores, int b);

// Full loss on encoder outputs. Row i of item_vecs is the positive for row
// i of user_vecs; every other row serves as an in-batch negative.
struct LossResult {
    double loss = 0.0;
    std::vector<double> d_user;  // b x dim
    std::vector<double> d_item;  // b x dim
};
LossResult in_batch_loss(std::span<const double> user_vecs, std::span<const double> item_vecs,
                         int b, int dim, double temperature);

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
public:
    Adam(const encoder::ModelParams& params, const AdamConfig& config);
    void step(encoder::ModelParams& params, const encoder::GradBuffer& grads);

private:
    AdamConfig config_;
    std::int64_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

struct TrainConfig {
    int batch_size = 256;
    int epochs = 3;
    int min_history = 1;
    int samples_per_epoch = 0;    // 0 = full stream; else first N of the epoch shuffle
    int max_steps_per_epoch = 0;  // 0 = no cap
    BatchMode batch_mode = BatchMode::kSingleCategory;
    SeqMode seq_mode = SeqMode::kHardSearch;
    FlushPolicy flush = FlushPolicy::kDrop;
    AdamConfig adam;
    std::uint64_t seed = 7;
    std::string metrics_path;     // JSON Lines (step, loss, category, wall time); empty = off
    std::string checkpoint_path;  // saved after every epoch; empty = off
    int log_every = 50;           // metrics cadence in steps
    bool verbose = false;
};

struct TrainResult {
    encoder::ModelParams params;
    int steps = 0;
    double first_loss = 0.0;
    double final_loss = 0.0;
    bool aborted = false;
    std::string abort_reason;
};

// Deterministic for (model seed via config, train seed, data): shuffles the
// sample stream per epoch, batches per `batch_mode`, and runs
// forward / in-batch loss / backward / Adam. On a non-finite loss the run
// stops and the result carries the last epoch-end parameters.
// `initial_params` warm-starts instead of seeding fresh parameters.
TrainResult train(const encoder::ModelConfig& model_config, const seqstore::BehaviorStore& store,
                  const TrainConfig& config,
                  const encoder::ModelParams* initial_params = nullptr);

}  // namespace ctxr::training
