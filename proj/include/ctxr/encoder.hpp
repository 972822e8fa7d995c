#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ctxr/datagen.hpp"
#include "ctxr/seqstore.hpp"

namespace ctxr::encoder {

using seqstore::SubSequence;

struct ModelConfig {
    int dim = 32;
    int layers = 2;
    int heads = 2;
    int profile_tokens = 4;  // K
    int subseq_len = 50;     // L_sub
    int ffn_mult = 4;
    double temperature = 0.05;

    // embedding table sizes, taken from the dataset
    int num_items = 0;
    int num_categories = 0;
    int profile_vocab = 0;
    int recency_buckets = 12;

    int hidden() const { return ffn_mult * dim; }
    int head_dim() const { return dim / heads; }
    int max_tokens() const { return 1 + profile_tokens + subseq_len; }
    void validate() const;
};

// One named parameter block. Storage is float32 (the checkpoint payload
// type); all arithmetic widens to double.
struct Tensor {
    std::string name;
    std::vector<int> shape;
    std::vector<float> data;

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
};

// Per-layer tensor offsets within ModelParams::tensors.
enum LayerTensor : int {
    kLn1Gain = 0, kLn1Bias, kWq, kBq, kWk, kBk, kWv, kBv, kWo, kBo,
    kLn2Gain, kLn2Bias, kFfnW1, kFfnB1, kFfnW2, kFfnB2,
    kLayerTensorCount
};

struct ModelParams {
    ModelConfig config;
    std::vector<Tensor> tensors;

    // fixed tensor indices
    static constexpr int kItemTable = 0;
    static constexpr int kCategoryTable = 1;
    static constexpr int kProfileTable = 2;
    static constexpr int kRecencyTable = 3;
    static constexpr int kCls = 4;
    static constexpr int kPositional = 5;
    static constexpr int kTokenType = 6;
    static constexpr int kFirstLayer = 7;

    int layer_tensor(int layer, LayerTensor t) const {
        return kFirstLayer + layer * kLayerTensorCount + t;
    }
    int final_ln_gain() const { return kFirstLayer + config.layers * kLayerTensorCount; }
    int final_ln_bias() const { return final_ln_gain() + 1; }

    const float* row(int tensor, int r) const {
        return tensors[static_cast<std::size_t>(tensor)].data.data() +
               static_cast<std::size_t>(r) * static_cast<std::size_t>(config.dim);
    }
    const float* flat(int tensor) const { return tensors[static_cast<std::size_t>(tensor)].data.data(); }
};

ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

// Gradient accumulator, one double block per tensor.
struct GradBuffer {
    std::vector<std::vector<double>> g;

    void init(const ModelParams& params);
    void zero();
    double* grad(int tensor) { return g[static_cast<std::size_t>(tensor)].data(); }
    double* grad_row(int tensor, int r, int dim) {
        return g[static_cast<std::size_t>(tensor)].data() +
               static_cast<std::size_t>(r) * static_cast<std::size_t>(dim);
    }
};

// Forward activations kept for the backward pass.
struct LayerCache {
    std::vector<double> a;        // post-LN1, n x dim
    std::vector<double> ln1_mu, ln1_inv;
    std::vector<double> q, k, v;  // n x dim
    std::vector<double> probs;    // heads x n x n
    std::vector<double> ctx;      // n x dim
    std::vector<double> h1;       // post-attention residual
    std::vector<double> b;        // post-LN2
    std::vector<double> ln2_mu, ln2_inv;
    std::vector<double> ffn_pre;  // n x hidden
    std::vector<double> ffn_act;
    std::vector<double> h2;       // layer output
};

struct UserCache {
    int n_tokens = 0;
    std::vector<int> profile_rows;           // K entries
    std::vector<int> item_rows, cat_rows, rec_rows;  // one per real behavior slot
    std::vector<double> x0;                  // embedded input
    std::vector<LayerCache> layers;
    double final_mu = 0.0, final_inv = 0.0;  // final LN stats, CLS token only
    std::vector<double> f_out;               // final LN output of CLS
    double l2norm = 0.0;
    std::vector<double> e_u;                 // unit user vector
};

// User tower. [CLS, profile tokens, behavior tokens] with positional and
// token-type embeddings, pre-LN transformer, final layer norm, CLS readout,
// L2 normalization. Only real behavior slots are assembled, so padded slots
// cannot influence the output. Candidate-item features never enter here.
void encode_user_forward(const ModelParams& params, std::span<const int> profile_tokens,
                         const SubSequence& seq, UserCache& cache);
std::vector<double> encode_user(const ModelParams& params, std::span<const int> profile_tokens,
                                const SubSequence& seq);

// Accumulates exact gradients for d(loss)/d(e_u) into `grads`.
void encode_user_backward(const ModelParams& params, const UserCache& cache,
                          std::span<const double> d_user, GradBuffer& grads);

// Item tower: item embedding + category embedding, L2-normalized.
std::vector<double> encode_item(const ModelParams& params, int item_id, int category_id);
std::vector<double> encode_item(const ModelParams& params, const datagen::Catalog& catalog,
                                int item_id);
void encode_item_backward(const ModelParams& params, int item_id, int category_id,
                          std::span<const double> d_item, GradBuffer& grads);

// (u . v) / temperature for unit-norm inputs.
double score(std::span<const double> u, std::span<const double> v, double temperature);

// Recency bucket for a day delta: 0 for same-day, then log2-spaced.
int recency_bucket(std::int64_t day_delta, int buckets);

// Self-describing binary checkpoint: magic + version + config header, then
// named tensors with shape and row-major little-endian float32 payloads.
void save_checkpoint(const ModelParams& params, const std::string& path);
ModelParams load_checkpoint(const std::string& path);

}  // namespace ctxr::encoder
