#include "ctxr/encoder.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "ctxr/common.hpp"
#include "ctxr/rng.hpp"

namespace ctxr::encoder {

namespace {

constexpr double kLnEps = 1e-5;
constexpr char kMagic[8] = {'C', 'T', 'X', 'R', 'C', 'K', 'P', '1'};
constexpr std::uint32_t kVersion = 1;

double dot_fd(const float* w, const double* x, int n) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
        s += static_cast<double>(w[i]) * x[i];
    }
    return s;
}

double dot_dd(const double* a, const double* b, int n) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
        s += a[i] * b[i];
    }
    return s;
}

// y = W x + b, W row-major [nout][nin]
void linear(const float* w, const float* bias, const double* x, double* y, int nout, int nin) {
    for (int o = 0; o < nout; ++o) {
        y[o] = static_cast<double>(bias[o]) + dot_fd(w + static_cast<std::size_t>(o) * nin, x, nin);
    }
}

// dW += dy (x) x,  db += dy,  dx += W^T dy
void linear_backward(const float* w, const double* x, const double* dy, double* dw, double* db,
                     double* dx, int nout, int nin) {
    for (int o = 0; o < nout; ++o) {
        const double d = dy[o];
        db[o] += d;
        const float* row = w + static_cast<std::size_t>(o) * nin;
        double* drow = dw + static_cast<std::size_t>(o) * nin;
        for (int i = 0; i < nin; ++i) {
            drow[i] += d * x[i];
            dx[i] += static_cast<double>(row[i]) * d;
        }
    }
}

void layer_norm(const double* x, const float* gain, const float* bias, double* y, int dim,
                double& mu_out, double& inv_out) {
    double mu = 0.0;
    for (int i = 0; i < dim; ++i) {
        mu += x[i];
    }
    mu /= dim;
    double var = 0.0;
    for (int i = 0; i < dim; ++i) {
        const double c = x[i] - mu;
        var += c * c;
    }
    var /= dim;
    const double inv = 1.0 / std::sqrt(var + kLnEps);
    for (int i = 0; i < dim; ++i) {
        y[i] = (x[i] - mu) * inv * static_cast<double>(gain[i]) + static_cast<double>(bias[i]);
    }
    mu_out = mu;
    inv_out = inv;
}

// dgain += dy * xhat, dbias += dy, dx += standard layer-norm backward
void layer_norm_backward(const double* dy, const double* x, double mu, double inv,
                         const float* gain, double* dgain, double* dbias, double* dx, int dim) {
    double m1 = 0.0;  // mean of dxhat
    double m2 = 0.0;  // mean of dxhat * xhat
    for (int i = 0; i < dim; ++i) {
        const double xhat = (x[i] - mu) * inv;
        const double dxhat = dy[i] * static_cast<double>(gain[i]);
        dgain[i] += dy[i] * xhat;
        dbias[i] += dy[i];
        m1 += dxhat;
        m2 += dxhat * xhat;
    }
    m1 /= dim;
    m2 /= dim;
    for (int i = 0; i < dim; ++i) {
        const double xhat = (x[i] - mu) * inv;
        const double dxhat = dy[i] * static_cast<double>(gain[i]);
        dx[i] += inv * (dxhat - m1 - xhat * m2);
    }
}

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_prime(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
    const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
    return cdf + x * pdf;
}

void l2_normalize(const double* x, double* y, int dim, double& norm_out) {
    double norm = std::sqrt(dot_dd(x, x, dim));
    if (norm < 1e-12) {
        norm = 1e-12;
    }
    for (int i = 0; i < dim; ++i) {
        y[i] = x[i] / norm;
    }
    norm_out = norm;
}

// d(normalize(x))/dx applied to upstream dy: (dy - y (y . dy)) / norm
void l2_normalize_backward(const double* dy, const double* y, double norm, double* dx, int dim) {
    const double proj = dot_dd(dy, y, dim);
    for (int i = 0; i < dim; ++i) {
        dx[i] = (dy[i] - y[i] * proj) / norm;
    }
}

void check_row(int r, int count, const char* table) {
    if (r < 0 || r >= count) {
        throw std::out_of_range(std::string(table) + " row " + std::to_string(r) +
                                " out of range [0, " + std::to_string(count) + ")");
    }
}

Tensor make_tensor(std::string name, std::vector<int> shape) {
    Tensor t;
    t.name = std::move(name);
    t.shape = std::move(shape);
    std::size_t n = 1;
    for (int s : t.shape) {
        n *= static_cast<std::size_t>(s);
    }
    t.data.assign(n, 0.0f);
    return t;
}

ModelParams build_shells(const ModelConfig& config) {
    config.validate();
    ModelParams p;
    p.config = config;
    const int d = config.dim;
    p.tensors.push_back(make_tensor("item_table", {config.num_items, d}));
    p.tensors.push_back(make_tensor("category_table", {config.num_categories, d}));
    p.tensors.push_back(make_tensor("profile_table", {config.profile_vocab, d}));
    p.tensors.push_back(make_tensor("recency_table", {config.recency_buckets, d}));
    p.tensors.push_back(make_tensor("cls", {d}));
    p.tensors.push_back(make_tensor("positional", {config.max_tokens(), d}));
    p.tensors.push_back(make_tensor("token_type", {3, d}));
    for (int l = 0; l < config.layers; ++l) {
        const std::string base = "layers." + std::to_string(l) + ".";
        p.tensors.push_back(make_tensor(base + "ln1.gain", {d}));
        p.tensors.push_back(make_tensor(base + "ln1.bias", {d}));
        p.tensors.push_back(make_tensor(base + "attn.wq", {d, d}));
        p.tensors.push_back(make_tensor(base + "attn.bq", {d}));
        p.tensors.push_back(make_tensor(base + "attn.wk", {d, d}));
        p.tensors.push_back(make_tensor(base + "attn.bk", {d}));
        p.tensors.push_back(make_tensor(base + "attn.wv", {d, d}));
        p.tensors.push_back(make_tensor(base + "attn.bv", {d}));
        p.tensors.push_back(make_tensor(base + "attn.wo", {d, d}));
        p.tensors.push_back(make_tensor(base + "attn.bo", {d}));
        p.tensors.push_back(make_tensor(base + "ln2.gain", {d}));
        p.tensors.push_back(make_tensor(base + "ln2.bias", {d}));
        p.tensors.push_back(make_tensor(base + "ffn.w1", {config.hidden(), d}));
        p.tensors.push_back(make_tensor(base + "ffn.b1", {config.hidden()}));
        p.tensors.push_back(make_tensor(base + "ffn.w2", {d, config.hidden()}));
        p.tensors.push_back(make_tensor(base + "ffn.b2", {d}));
    }
    p.tensors.push_back(make_tensor("final_ln.gain", {d}));
    p.tensors.push_back(make_tensor("final_ln.bias", {d}));
    return p;
}

void fill_normal(Tensor& t, Rng& rng, double sd) {
    for (auto& x : t.data) {
        x = static_cast<float>(rng.normal(0.0, sd));
    }
}

void fill_xavier(Tensor& t, Rng& rng, int fan_in, int fan_out) {
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    for (auto& x : t.data) {
        x = static_cast<float>(rng.uniform(-a, a));
    }
}

void fill_const(Tensor& t, float v) { std::fill(t.data.begin(), t.data.end(), v); }

}  // namespace

void ModelConfig::validate() const {
    if (dim < 1 || layers < 1 || heads < 1 || profile_tokens < 1 || subseq_len < 1 || ffn_mult < 1) {
        throw ConfigError("model: dim/layers/heads/profile_tokens/subseq_len/ffn_mult must be >= 1");
    }
    if (dim % heads != 0) {
        throw ConfigError("model: dim must be divisible by heads");
    }
    if (!(temperature > 0.0)) {
        throw ConfigError("model: temperature must be > 0");
    }
    if (num_items < 1 || num_categories < 1 || profile_vocab < 1 || recency_buckets < 1) {
        throw ConfigError("model: table sizes must be >= 1");
    }
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
    ModelParams p = build_shells(config);
    Rng rng(seed);
    const int d = config.dim;
    for (int t = 0; t <= ModelParams::kTokenType; ++t) {
        fill_normal(p.tensors[static_cast<std::size_t>(t)], rng, 0.02);
    }
    for (int l = 0; l < config.layers; ++l) {
        auto at = [&](LayerTensor lt) -> Tensor& {
            return p.tensors[static_cast<std::size_t>(p.layer_tensor(l, lt))];
        };
        fill_const(at(kLn1Gain), 1.0f);
        fill_xavier(at(kWq), rng, d, d);
        fill_xavier(at(kWk), rng, d, d);
        fill_xavier(at(kWv), rng, d, d);
        fill_xavier(at(kWo), rng, d, d);
        fill_const(at(kLn2Gain), 1.0f);
        fill_xavier(at(kFfnW1), rng, d, config.hidden());
        fill_xavier(at(kFfnW2), rng, config.hidden(), d);
    }
    fill_const(p.tensors[static_cast<std::size_t>(p.final_ln_gain())], 1.0f);
    return p;
}

void GradBuffer::init(const ModelParams& params) {
    g.clear();
    g.reserve(params.tensors.size());
    for (const auto& t : params.tensors) {
        g.emplace_back(t.data.size(), 0.0);
    }
}

void GradBuffer::zero() {
    for (auto& v : g) {
        std::fill(v.begin(), v.end(), 0.0);
    }
}

int recency_bucket(std::int64_t day_delta, int buckets) {
    if (day_delta < 0) {
        day_delta = 0;
    }
    const int b = std::bit_width(static_cast<std::uint64_t>(day_delta));
    return std::min(b, buckets - 1);
}

void encode_user_forward(const ModelParams& params, std::span<const int> profile_tokens,
                         const SubSequence& seq, UserCache& cache) {
    const ModelConfig& cfg = params.config;
    const int d = cfg.dim;
    const int K = cfg.profile_tokens;
    if (static_cast<int>(profile_tokens.size()) != K) {
        throw ConfigError("encode_user: expected " + std::to_string(K) + " profile tokens, got " +
                          std::to_string(profile_tokens.size()));
    }
    const int m = seq.size();
    if (m > cfg.subseq_len) {
        throw ConfigError("encode_user: subsequence longer than subseq_len");
    }
    const int n = 1 + K + m;
    cache.n_tokens = n;

    // token assembly: [CLS, p_1..p_K, s_1..s_m]; padded slots are never built
    cache.profile_rows.assign(profile_tokens.begin(), profile_tokens.end());
    cache.item_rows.resize(static_cast<std::size_t>(m));
    cache.cat_rows.resize(static_cast<std::size_t>(m));
    cache.rec_rows.resize(static_cast<std::size_t>(m));
    cache.x0.assign(static_cast<std::size_t>(n) * d, 0.0);

    const float* pos = params.flat(ModelParams::kPositional);
    const float* tt = params.flat(ModelParams::kTokenType);
    {
        const float* cls = params.flat(ModelParams::kCls);
        double* x = cache.x0.data();
        for (int i = 0; i < d; ++i) {
            x[i] = static_cast<double>(cls[i]) + pos[i] + tt[i];
        }
    }
    for (int j = 0; j < K; ++j) {
        const int row = cache.profile_rows[static_cast<std::size_t>(j)];
        check_row(row, cfg.profile_vocab, "profile_table");
        const float* e = params.row(ModelParams::kProfileTable, row);
        const float* pr = pos + static_cast<std::size_t>(1 + j) * d;
        double* x = cache.x0.data() + static_cast<std::size_t>(1 + j) * d;
        for (int i = 0; i < d; ++i) {
            x[i] = static_cast<double>(e[i]) + pr[i] + tt[d + i];
        }
    }
    for (int j = 0; j < m; ++j) {
        const auto& ev = seq.entries[static_cast<std::size_t>(j)];
        check_row(ev.item_id, cfg.num_items, "item_table");
        check_row(ev.category_id, cfg.num_categories, "category_table");
        const int bucket = recency_bucket(seq.reference_time - ev.timestamp, cfg.recency_buckets);
        cache.item_rows[static_cast<std::size_t>(j)] = ev.item_id;
        cache.cat_rows[static_cast<std::size_t>(j)] = ev.category_id;
        cache.rec_rows[static_cast<std::size_t>(j)] = bucket;
        const float* ie = params.row(ModelParams::kItemTable, ev.item_id);
        const float* ce = params.row(ModelParams::kCategoryTable, ev.category_id);
        const float* re = params.row(ModelParams::kRecencyTable, bucket);
        const float* pr = pos + static_cast<std::size_t>(1 + K + j) * d;
        double* x = cache.x0.data() + static_cast<std::size_t>(1 + K + j) * d;
        for (int i = 0; i < d; ++i) {
            x[i] = static_cast<double>(ie[i]) + ce[i] + re[i] + pr[i] + tt[2 * d + i];
        }
    }

    const int H = cfg.heads;
    const int dh = cfg.head_dim();
    const int hidden = cfg.hidden();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    const std::size_t nd = static_cast<std::size_t>(n) * d;

    cache.layers.resize(static_cast<std::size_t>(cfg.layers));
    for (int l = 0; l < cfg.layers; ++l) {
        LayerCache& L = cache.layers[static_cast<std::size_t>(l)];
        const double* x = l == 0 ? cache.x0.data() : cache.layers[static_cast<std::size_t>(l - 1)].h2.data();
        auto wp = [&](LayerTensor t) { return params.flat(params.layer_tensor(l, t)); };

        L.a.resize(nd);
        L.ln1_mu.resize(static_cast<std::size_t>(n));
        L.ln1_inv.resize(static_cast<std::size_t>(n));
        for (int t = 0; t < n; ++t) {
            layer_norm(x + static_cast<std::size_t>(t) * d, wp(kLn1Gain), wp(kLn1Bias),
                       L.a.data() + static_cast<std::size_t>(t) * d, d,
                       L.ln1_mu[static_cast<std::size_t>(t)], L.ln1_inv[static_cast<std::size_t>(t)]);
        }

        L.q.resize(nd);
        L.k.resize(nd);
        L.v.resize(nd);
        for (int t = 0; t < n; ++t) {
            const double* at = L.a.data() + static_cast<std::size_t>(t) * d;
            linear(wp(kWq), wp(kBq), at, L.q.data() + static_cast<std::size_t>(t) * d, d, d);
            linear(wp(kWk), wp(kBk), at, L.k.data() + static_cast<std::size_t>(t) * d, d, d);
            linear(wp(kWv), wp(kBv), at, L.v.data() + static_cast<std::size_t>(t) * d, d, d);
        }

        L.probs.assign(static_cast<std::size_t>(H) * n * n, 0.0);
        L.ctx.assign(nd, 0.0);
        for (int h = 0; h < H; ++h) {
            const int off = h * dh;
            for (int i = 0; i < n; ++i) {
                const double* qi = L.q.data() + static_cast<std::size_t>(i) * d + off;
                double* prow =
                    L.probs.data() + (static_cast<std::size_t>(h) * n + static_cast<std::size_t>(i)) * n;
                double mx = -1e300;
                for (int j = 0; j < n; ++j) {
                    const double s =
                        dot_dd(qi, L.k.data() + static_cast<std::size_t>(j) * d + off, dh) * inv_sqrt_dh;
                    prow[j] = s;
                    mx = std::max(mx, s);
                }
                double z = 0.0;
                for (int j = 0; j < n; ++j) {
                    prow[j] = std::exp(prow[j] - mx);
                    z += prow[j];
                }
                double* ci = L.ctx.data() + static_cast<std::size_t>(i) * d + off;
                for (int j = 0; j < n; ++j) {
                    prow[j] /= z;
                    const double p = prow[j];
                    const double* vj = L.v.data() + static_cast<std::size_t>(j) * d + off;
                    for (int u = 0; u < dh; ++u) {
                        ci[u] += p * vj[u];
                    }
                }
            }
        }

        L.h1.resize(nd);
        {
            std::vector<double> tmp(static_cast<std::size_t>(d));
            for (int t = 0; t < n; ++t) {
                linear(wp(kWo), wp(kBo), L.ctx.data() + static_cast<std::size_t>(t) * d, tmp.data(), d, d);
                const double* xt = x + static_cast<std::size_t>(t) * d;
                double* h1t = L.h1.data() + static_cast<std::size_t>(t) * d;
                for (int i = 0; i < d; ++i) {
                    h1t[i] = xt[i] + tmp[i];
                }
            }
        }

        L.b.resize(nd);
        L.ln2_mu.resize(static_cast<std::size_t>(n));
        L.ln2_inv.resize(static_cast<std::size_t>(n));
        for (int t = 0; t < n; ++t) {
            layer_norm(L.h1.data() + static_cast<std::size_t>(t) * d, wp(kLn2Gain), wp(kLn2Bias),
                       L.b.data() + static_cast<std::size_t>(t) * d, d,
                       L.ln2_mu[static_cast<std::size_t>(t)], L.ln2_inv[static_cast<std::size_t>(t)]);
        }

        L.ffn_pre.resize(static_cast<std::size_t>(n) * hidden);
        L.ffn_act.resize(static_cast<std::size_t>(n) * hidden);
        L.h2.resize(nd);
        {
            std::vector<double> tmp(static_cast<std::size_t>(d));
            for (int t = 0; t < n; ++t) {
                double* pre = L.ffn_pre.data() + static_cast<std::size_t>(t) * hidden;
                double* act = L.ffn_act.data() + static_cast<std::size_t>(t) * hidden;
                linear(wp(kFfnW1), wp(kFfnB1), L.b.data() + static_cast<std::size_t>(t) * d, pre, hidden, d);
                for (int u = 0; u < hidden; ++u) {
                    act[u] = gelu(pre[u]);
                }
                linear(wp(kFfnW2), wp(kFfnB2), act, tmp.data(), d, hidden);
                const double* h1t = L.h1.data() + static_cast<std::size_t>(t) * d;
                double* h2t = L.h2.data() + static_cast<std::size_t>(t) * d;
                for (int i = 0; i < d; ++i) {
                    h2t[i] = h1t[i] + tmp[i];
                }
            }
        }
    }

    // final layer norm and normalization on the CLS state only
    const double* last = cache.layers.back().h2.data();
    cache.f_out.resize(static_cast<std::size_t>(d));
    layer_norm(last, params.flat(params.final_ln_gain()), params.flat(params.final_ln_bias()),
               cache.f_out.data(), d, cache.final_mu, cache.final_inv);
    cache.e_u.resize(static_cast<std::size_t>(d));
    l2_normalize(cache.f_out.data(), cache.e_u.data(), d, cache.l2norm);
}

std::vector<double> encode_user(const ModelParams& params, std::span<const int> profile_tokens,
                                const SubSequence& seq) {
    UserCache cache;
    encode_user_forward(params, profile_tokens, seq, cache);
    return cache.e_u;
}

void encode_user_backward(const ModelParams& params, const UserCache& cache,
                          std::span<const double> d_user, GradBuffer& grads) {
    const ModelConfig& cfg = params.config;
    const int d = cfg.dim;
    const int K = cfg.profile_tokens;
    const int n = cache.n_tokens;
    const int H = cfg.heads;
    const int dh = cfg.head_dim();
    const int hidden = cfg.hidden();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    const std::size_t nd = static_cast<std::size_t>(n) * d;

    // unit-norm and final layer norm, CLS token only
    std::vector<double> d_fout(static_cast<std::size_t>(d));
    l2_normalize_backward(d_user.data(), cache.e_u.data(), cache.l2norm, d_fout.data(), d);

    std::vector<double> dh_buf(nd, 0.0);
    {
        const double* last = cache.layers.back().h2.data();
        layer_norm_backward(d_fout.data(), last, cache.final_mu, cache.final_inv,
                            params.flat(params.final_ln_gain()), grads.grad(params.final_ln_gain()),
                            grads.grad(params.final_ln_bias()), dh_buf.data(), d);
    }

    std::vector<double> dh1(nd), dq(nd), dk(nd), dv(nd), dctx(nd), da(nd), dx(nd);
    std::vector<double> dffn_act(static_cast<std::size_t>(hidden));
    std::vector<double> dp_row(static_cast<std::size_t>(n));

    for (int l = cfg.layers - 1; l >= 0; --l) {
        const LayerCache& L = cache.layers[static_cast<std::size_t>(l)];
        const double* x = l == 0 ? cache.x0.data() : cache.layers[static_cast<std::size_t>(l - 1)].h2.data();
        auto wp = [&](LayerTensor t) { return params.flat(params.layer_tensor(l, t)); };
        auto gp = [&](LayerTensor t) { return grads.grad(params.layer_tensor(l, t)); };

        // h2 = h1 + ffn(ln2(h1)): residual plus FFN path into dh1
        std::copy(dh_buf.begin(), dh_buf.end(), dh1.begin());
        for (int t = 0; t < n; ++t) {
            const double* dy = dh_buf.data() + static_cast<std::size_t>(t) * d;
            std::fill(dffn_act.begin(), dffn_act.end(), 0.0);
            linear_backward(wp(kFfnW2), L.ffn_act.data() + static_cast<std::size_t>(t) * hidden, dy,
                            gp(kFfnW2), gp(kFfnB2), dffn_act.data(), d, hidden);
            const double* pre = L.ffn_pre.data() + static_cast<std::size_t>(t) * hidden;
            for (int u = 0; u < hidden; ++u) {
                dffn_act[static_cast<std::size_t>(u)] *= gelu_prime(pre[u]);
            }
            std::vector<double> db_t(static_cast<std::size_t>(d), 0.0);
            linear_backward(wp(kFfnW1), L.b.data() + static_cast<std::size_t>(t) * d, dffn_act.data(),
                            gp(kFfnW1), gp(kFfnB1), db_t.data(), hidden, d);
            layer_norm_backward(db_t.data(), L.h1.data() + static_cast<std::size_t>(t) * d,
                                L.ln2_mu[static_cast<std::size_t>(t)], L.ln2_inv[static_cast<std::size_t>(t)],
                                wp(kLn2Gain), gp(kLn2Gain), gp(kLn2Bias),
                                dh1.data() + static_cast<std::size_t>(t) * d, d);
        }

        // h1 = x + wo(attention(ln1(x)))
        std::fill(dctx.begin(), dctx.end(), 0.0);
        for (int t = 0; t < n; ++t) {
            linear_backward(wp(kWo), L.ctx.data() + static_cast<std::size_t>(t) * d,
                            dh1.data() + static_cast<std::size_t>(t) * d, gp(kWo), gp(kBo),
                            dctx.data() + static_cast<std::size_t>(t) * d, d, d);
        }

        std::fill(dq.begin(), dq.end(), 0.0);
        std::fill(dk.begin(), dk.end(), 0.0);
        std::fill(dv.begin(), dv.end(), 0.0);
        for (int h = 0; h < H; ++h) {
            const int off = h * dh;
            for (int i = 0; i < n; ++i) {
                const double* dci = dctx.data() + static_cast<std::size_t>(i) * d + off;
                const double* prow =
                    L.probs.data() + (static_cast<std::size_t>(h) * n + static_cast<std::size_t>(i)) * n;
                double row_dot = 0.0;
                for (int j = 0; j < n; ++j) {
                    const double* vj = L.v.data() + static_cast<std::size_t>(j) * d + off;
                    const double dp = dot_dd(dci, vj, dh);
                    dp_row[static_cast<std::size_t>(j)] = dp;
                    row_dot += prow[j] * dp;
                    double* dvj = dv.data() + static_cast<std::size_t>(j) * d + off;
                    const double p = prow[j];
                    for (int u = 0; u < dh; ++u) {
                        dvj[u] += p * dci[u];
                    }
                }
                double* dqi = dq.data() + static_cast<std::size_t>(i) * d + off;
                const double* qi = L.q.data() + static_cast<std::size_t>(i) * d + off;
                for (int j = 0; j < n; ++j) {
                    const double ds = prow[j] * (dp_row[static_cast<std::size_t>(j)] - row_dot) * inv_sqrt_dh;
                    const double* kj = L.k.data() + static_cast<std::size_t>(j) * d + off;
                    double* dkj = dk.data() + static_cast<std::size_t>(j) * d + off;
                    for (int u = 0; u < dh; ++u) {
                        dqi[u] += ds * kj[u];
                        dkj[u] += ds * qi[u];
                    }
                }
            }
        }

        std::fill(da.begin(), da.end(), 0.0);
        for (int t = 0; t < n; ++t) {
            const double* at = L.a.data() + static_cast<std::size_t>(t) * d;
            double* dat = da.data() + static_cast<std::size_t>(t) * d;
            linear_backward(wp(kWq), at, dq.data() + static_cast<std::size_t>(t) * d, gp(kWq), gp(kBq), dat, d, d);
            linear_backward(wp(kWk), at, dk.data() + static_cast<std::size_t>(t) * d, gp(kWk), gp(kBk), dat, d, d);
            linear_backward(wp(kWv), at, dv.data() + static_cast<std::size_t>(t) * d, gp(kWv), gp(kBv), dat, d, d);
        }

        std::copy(dh1.begin(), dh1.end(), dx.begin());
        for (int t = 0; t < n; ++t) {
            layer_norm_backward(da.data() + static_cast<std::size_t>(t) * d,
                                x + static_cast<std::size_t>(t) * d, L.ln1_mu[static_cast<std::size_t>(t)],
                                L.ln1_inv[static_cast<std::size_t>(t)], wp(kLn1Gain), gp(kLn1Gain),
                                gp(kLn1Bias), dx.data() + static_cast<std::size_t>(t) * d, d);
        }
        std::swap(dh_buf, dx);
    }

    // scatter into the embedding tables
    {
        double* g_cls = grads.grad(ModelParams::kCls);
        double* g_pos = grads.grad(ModelParams::kPositional);
        double* g_tt = grads.grad(ModelParams::kTokenType);
        const double* d0 = dh_buf.data();
        for (int i = 0; i < d; ++i) {
            g_cls[i] += d0[i];
            g_pos[i] += d0[i];
            g_tt[i] += d0[i];
        }
        for (int j = 0; j < K; ++j) {
            const double* dt = dh_buf.data() + static_cast<std::size_t>(1 + j) * d;
            double* g_prof = grads.grad_row(ModelParams::kProfileTable,
                                            cache.profile_rows[static_cast<std::size_t>(j)], d);
            double* g_p = g_pos + static_cast<std::size_t>(1 + j) * d;
            for (int i = 0; i < d; ++i) {
                g_prof[i] += dt[i];
                g_p[i] += dt[i];
                g_tt[d + i] += dt[i];
            }
        }
        const int m = n - 1 - K;
        for (int j = 0; j < m; ++j) {
            const double* dt = dh_buf.data() + static_cast<std::size_t>(1 + K + j) * d;
            double* g_item =
                grads.grad_row(ModelParams::kItemTable, cache.item_rows[static_cast<std::size_t>(j)], d);
            double* g_cat =
                grads.grad_row(ModelParams::kCategoryTable, cache.cat_rows[static_cast<std::size_t>(j)], d);
            double* g_rec =
                grads.grad_row(ModelParams::kRecencyTable, cache.rec_rows[static_cast<std::size_t>(j)], d);
            double* g_p = g_pos + static_cast<std::size_t>(1 + K + j) * d;
            for (int i = 0; i < d; ++i) {
                g_item[i] += dt[i];
                g_cat[i] += dt[i];
                g_rec[i] += dt[i];
                g_p[i] += dt[i];
                g_tt[2 * d + i] += dt[i];
            }
        }
    }
}

std::vector<double> encode_item(const ModelParams& params, int item_id, int category_id) {
    const int d = params.config.dim;
    check_row(item_id, params.config.num_items, "item_table");
    check_row(category_id, params.config.num_categories, "category_table");
    const float* ie = params.row(ModelParams::kItemTable, item_id);
    const float* ce = params.row(ModelParams::kCategoryTable, category_id);
    std::vector<double> pre(static_cast<std::size_t>(d));
    for (int i = 0; i < d; ++i) {
        pre[static_cast<std::size_t>(i)] = static_cast<double>(ie[i]) + ce[i];
    }
    std::vector<double> out(static_cast<std::size_t>(d));
    double norm = 0.0;
    l2_normalize(pre.data(), out.data(), d, norm);
    return out;
}

std::vector<double> encode_item(const ModelParams& params, const datagen::Catalog& catalog,
                                int item_id) {
    return encode_item(params, item_id, catalog.category_of(item_id));
}

void encode_item_backward(const ModelParams& params, int item_id, int category_id,
                          std::span<const double> d_item, GradBuffer& grads) {
    const int d = params.config.dim;
    const float* ie = params.row(ModelParams::kItemTable, item_id);
    const float* ce = params.row(ModelParams::kCategoryTable, category_id);
    std::vector<double> pre(static_cast<std::size_t>(d));
    for (int i = 0; i < d; ++i) {
        pre[static_cast<std::size_t>(i)] = static_cast<double>(ie[i]) + ce[i];
    }
    std::vector<double> e(static_cast<std::size_t>(d));
    double norm = 0.0;
    l2_normalize(pre.data(), e.data(), d, norm);
    std::vector<double> dpre(static_cast<std::size_t>(d));
    l2_normalize_backward(d_item.data(), e.data(), norm, dpre.data(), d);
    double* g_item = grads.grad_row(ModelParams::kItemTable, item_id, d);
    double* g_cat = grads.grad_row(ModelParams::kCategoryTable, category_id, d);
    for (int i = 0; i < d; ++i) {
        g_item[i] += dpre[static_cast<std::size_t>(i)];
        g_cat[i] += dpre[static_cast<std::size_t>(i)];
    }
}

double score(std::span<const double> u, std::span<const double> v, double temperature) {
    return dot_dd(u.data(), v.data(), static_cast<int>(u.size())) / temperature;
}

void save_checkpoint(const ModelParams& params, const std::string& path) {
    std::vector<unsigned char> out;
    out.insert(out.end(), kMagic, kMagic + 8);
    put_u32_le(out, kVersion);
    const ModelConfig& c = params.config;
    for (int v : {c.dim, c.layers, c.heads, c.profile_tokens, c.subseq_len, c.ffn_mult, c.num_items,
                  c.num_categories, c.profile_vocab, c.recency_buckets}) {
        put_u32_le(out, static_cast<std::uint32_t>(v));
    }
    put_u64_le(out, std::bit_cast<std::uint64_t>(c.temperature));
    put_u32_le(out, static_cast<std::uint32_t>(params.tensors.size()));
    for (const auto& t : params.tensors) {
        put_u32_le(out, static_cast<std::uint32_t>(t.name.size()));
        out.insert(out.end(), t.name.begin(), t.name.end());
        put_u32_le(out, static_cast<std::uint32_t>(t.shape.size()));
        for (int s : t.shape) {
            put_u64_le(out, static_cast<std::uint64_t>(s));
        }
        for (float f : t.data) {
            put_u32_le(out, std::bit_cast<std::uint32_t>(f));
        }
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open checkpoint for writing: " + path);
    }
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) {
        throw IoError("checkpoint write failed: " + path);
    }
}

ModelParams load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open checkpoint: " + path);
    }
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    std::size_t pos = 0;
    auto need = [&](std::size_t k) {
        if (pos + k > buf.size()) {
            throw IoError("checkpoint truncated: " + path);
        }
    };
    need(8);
    if (std::memcmp(buf.data(), kMagic, 8) != 0) {
        throw IoError("bad checkpoint magic: " + path);
    }
    pos = 8;
    need(4);
    const std::uint32_t version = get_u32_le(buf.data() + pos);
    pos += 4;
    if (version != kVersion) {
        throw IoError("unsupported checkpoint version " + std::to_string(version));
    }
    auto read_i32 = [&]() {
        need(4);
        const auto v = static_cast<int>(get_u32_le(buf.data() + pos));
        pos += 4;
        return v;
    };
    ModelConfig c;
    c.dim = read_i32();
    c.layers = read_i32();
    c.heads = read_i32();
    c.profile_tokens = read_i32();
    c.subseq_len = read_i32();
    c.ffn_mult = read_i32();
    c.num_items = read_i32();
    c.num_categories = read_i32();
    c.profile_vocab = read_i32();
    c.recency_buckets = read_i32();
    need(8);
    c.temperature = std::bit_cast<double>(get_u64_le(buf.data() + pos));
    pos += 8;

    ModelParams params = build_shells(c);
    const std::uint32_t count = static_cast<std::uint32_t>(read_i32());
    if (count != params.tensors.size()) {
        throw IoError("checkpoint tensor count mismatch");
    }
    for (auto& t : params.tensors) {
        const std::uint32_t name_len = static_cast<std::uint32_t>(read_i32());
        need(name_len);
        const std::string name(reinterpret_cast<const char*>(buf.data() + pos), name_len);
        pos += name_len;
        if (name != t.name) {
            throw IoError("checkpoint tensor order mismatch: expected " + t.name + ", got " + name);
        }
        const std::uint32_t ndim = static_cast<std::uint32_t>(read_i32());
        if (ndim != t.shape.size()) {
            throw IoError("checkpoint tensor rank mismatch for " + name);
        }
        for (std::size_t i = 0; i < ndim; ++i) {
            need(8);
            const auto s = static_cast<std::int64_t>(get_u64_le(buf.data() + pos));
            pos += 8;
            if (s != t.shape[i]) {
                throw IoError("checkpoint tensor shape mismatch for " + name);
            }
        }
        for (auto& x : t.data) {
            need(4);
            x = std::bit_cast<float>(get_u32_le(buf.data() + pos));
            pos += 4;
        }
    }
    if (pos != buf.size()) {
        throw IoError("trailing bytes in checkpoint: " + path);
    }
    return params;
}

}  // namespace ctxr::encoder
