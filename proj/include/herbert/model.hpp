#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "herbert/checkpoint.hpp"
#include "herbert/error.hpp"
#include "herbert/objectives.hpp"
#include "herbert/rng.hpp"
#include "herbert/tensor.hpp"
#include "herbert/tokenizer.hpp"

// Bidirectional transformer encoder in the original BERT layout: summed
// word/position/type embeddings, post-norm residual blocks with GELU
// feed-forward, a tied-decoder MLM head and a tanh pooler feeding a
// three-way SSO classifier.
//
// Parameter naming:
//   embeddings.{word,position,token_type}, embeddings.ln.{gamma,beta}
//   layer.N.attn.{q,k,v,o}.{weight,bias}, layer.N.attn.ln.{gamma,beta}
//   layer.N.ffn.{in,out}.{weight,bias}, layer.N.ffn.ln.{gamma,beta}
//   mlm.transform.{weight,bias}, mlm.ln.{gamma,beta}, mlm.decoder.bias
//   pooler.{weight,bias}, sso.{weight,bias}
// Weight matrices are stored [in, out]; the MLM decoder reuses
// embeddings.word transposed.

namespace herbert {

struct ModelConfig {
    std::size_t layers = 2;
    std::size_t heads = 2;
    std::size_t hidden = 64;
    std::size_t ff_dim = 256;
    std::size_t vocab_size = 0;
    std::size_t max_positions = 128;
    std::size_t type_vocab_size = 2;
    double dropout_rate = 0.1;
    std::size_t max_seq_len = 128;

    void validate() const {
        if (layers == 0 || heads == 0 || hidden == 0 || ff_dim == 0 || vocab_size == 0 || max_positions == 0 ||
            type_vocab_size == 0 || max_seq_len == 0) {
            throw ConfigError("model config sizes must all be positive");
        }
        if (hidden % heads != 0) {
            throw ConfigError("hidden size " + std::to_string(hidden) + " is not divisible by " +
                              std::to_string(heads) + " heads");
        }
        if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
            throw ConfigError("dropout rate must lie in [0, 1)");
        }
        if (max_seq_len > max_positions) {
            throw ConfigError("max_seq_len exceeds max_positions");
        }
    }

    std::size_t head_dim() const { return hidden / heads; }

    /// BERT-base dimensions.
    static ModelConfig base(std::size_t vocab) { return {12, 12, 768, 3072, vocab, 512, 2, 0.1, 512}; }
    /// BERT-large dimensions.
    static ModelConfig large(std::size_t vocab) { return {24, 16, 1024, 4096, vocab, 512, 2, 0.1, 512}; }

    bool operator==(const ModelConfig&) const = default;
};

inline std::string layer_prefix(std::size_t l) { return "layer." + std::to_string(l) + "."; }

/// Expected name -> shape map for a configuration.
inline std::map<std::string, Shape> parameter_shapes(const ModelConfig& c) {
    const std::size_t H = c.hidden;
    std::map<std::string, Shape> shapes{
        {"embeddings.word", {c.vocab_size, H}},
        {"embeddings.position", {c.max_positions, H}},
        {"embeddings.token_type", {c.type_vocab_size, H}},
        {"embeddings.ln.gamma", {H}},
        {"embeddings.ln.beta", {H}},
        {"mlm.transform.weight", {H, H}},
        {"mlm.transform.bias", {H}},
        {"mlm.ln.gamma", {H}},
        {"mlm.ln.beta", {H}},
        {"mlm.decoder.bias", {c.vocab_size}},
        {"pooler.weight", {H, H}},
        {"pooler.bias", {H}},
        {"sso.weight", {H, kSsoClasses}},
        {"sso.bias", {kSsoClasses}},
    };
    for (std::size_t l = 0; l < c.layers; ++l) {
        const std::string p = layer_prefix(l);
        for (const char* m : {"q", "k", "v", "o"}) {
            shapes[p + "attn." + m + ".weight"] = {H, H};
            shapes[p + "attn." + m + ".bias"] = {H};
        }
        shapes[p + "attn.ln.gamma"] = {H};
        shapes[p + "attn.ln.beta"] = {H};
        shapes[p + "ffn.in.weight"] = {H, c.ff_dim};
        shapes[p + "ffn.in.bias"] = {c.ff_dim};
        shapes[p + "ffn.out.weight"] = {c.ff_dim, H};
        shapes[p + "ffn.out.bias"] = {H};
        shapes[p + "ffn.ln.gamma"] = {H};
        shapes[p + "ffn.ln.beta"] = {H};
    }
    return shapes;
}

inline std::size_t param_count(const ModelConfig& c) {
    std::size_t n = 0;
    for (const auto& [name, shape] : parameter_shapes(c)) {
        n += element_count(shape);
    }
    return n;
}

inline bool is_bias_like(const std::string& name) {
    const auto ends_with = [&](std::string_view s) {
        return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    return ends_with(".bias") || ends_with(".beta");
}

inline bool is_gain(const std::string& name) {
    return name.size() >= 6 && name.compare(name.size() - 6, 6, ".gamma") == 0;
}

/// Gaussian(0, 0.02) weights, zero biases, unit layer-norm gains. Every
/// tensor draws from its own named stream.
template <class T>
TensorMap<T> init_params(const ModelConfig& config, std::uint64_t seed, double stddev = 0.02) {
    config.validate();
    TensorMap<T> params;
    for (const auto& [name, shape] : parameter_shapes(config)) {
        Tensor<T> t(shape);
        if (is_gain(name)) {
            std::fill(t.data.begin(), t.data.end(), T{1});
        } else if (!is_bias_like(name)) {
            Rng rng = Rng::stream(seed, "init", fnv1a(name));
            for (auto& x : t.data) {
                x = static_cast<T>(rng.normal(0.0, stddev));
            }
        }
        params.emplace(name, std::move(t));
    }
    return params;
}

/// Throws ShapeError naming the first missing or mis-shaped tensor.
template <class T>
void validate_params(const ModelConfig& config, const TensorMap<T>& params) {
    for (const auto& [name, shape] : parameter_shapes(config)) {
        const auto it = params.find(name);
        if (it == params.end()) {
            throw ShapeError("parameter " + name + " missing; expected shape " + shape_string(shape));
        }
        if (it->second.shape != shape) {
            throw ShapeError("parameter " + name + " has shape " + shape_string(it->second.shape) + ", expected " +
                             shape_string(shape));
        }
    }
}

/// Flat packed batch: every array is batch x seq_len, row-major.
struct Batch {
    std::size_t size = 0;
    std::size_t seq_len = 0;
    std::vector<TokenId> input_ids;
    std::vector<TokenId> token_type_ids;
    std::vector<std::uint8_t> attention_mask;
    std::vector<TokenId> mlm_labels; ///< kIgnore where unlabelled
    std::vector<TokenId> sso_labels; ///< one per sequence

    std::size_t labelled_positions() const {
        return static_cast<std::size_t>(
            std::count_if(mlm_labels.begin(), mlm_labels.end(), [](TokenId y) { return y != kIgnore; }));
    }
};

struct ForwardOptions {
    bool train = false;        ///< eval mode never applies dropout
    double dropout_rate = 0.0; ///< only used in train mode
    std::uint64_t seed = 0;    ///< dropout stream root; sequence b uses stream (seed, b)
};

namespace detail {

// ---- dense kernels (row-major) ---------------------------------------------

/// C[m x n] (+)= A[m x k] * B[k x n]
template <class T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* A, const T* B, T* C, bool accumulate) {
    if (!accumulate) {
        std::fill(C, C + m * n, T{0});
    }
    for (std::size_t i = 0; i < m; ++i) {
        T* c = C + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T a = A[i * k + p];
            const T* b = B + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                c[j] += a * b[j];
            }
        }
    }
}

/// C[k x n] += A[m x k]^T * G[m x n]
template <class T>
void gemm_tn_acc(std::size_t m, std::size_t n, std::size_t k, const T* A, const T* G, T* C) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* g = G + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T a = A[i * k + p];
            if (a == T{0}) {
                continue;
            }
            T* c = C + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                c[j] += a * g[j];
            }
        }
    }
}

/// C[m x k] (+)= G[m x n] * B[k x n]^T
template <class T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* G, const T* B, T* C, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* g = G + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T* b = B + p * n;
            T s{0};
            for (std::size_t j = 0; j < n; ++j) {
                s += g[j] * b[j];
            }
            C[i * k + p] = accumulate ? C[i * k + p] + s : s;
        }
    }
}

template <class T>
void add_bias(std::size_t m, std::size_t n, const T* bias, T* X) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            X[i * n + j] += bias[j];
        }
    }
}

template <class T>
void bias_grad_acc(std::size_t m, std::size_t n, const T* G, T* db) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            db[j] += G[i * n + j];
        }
    }
}

template <class T>
T gelu(T x) {
    return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <class T>
T gelu_grad(T x) {
    const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
    const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    return cdf + x * pdf;
}

template <class T>
struct LayerNormCache {
    std::vector<T> xhat;
    std::vector<T> rstd;
};

inline constexpr double kLayerNormEps = 1e-12;

template <class T>
void layer_norm(std::size_t m, std::size_t n, const T* x, const T* gamma, const T* beta, T* y,
                LayerNormCache<T>& cache) {
    cache.xhat.resize(m * n);
    cache.rstd.resize(m);
    for (std::size_t i = 0; i < m; ++i) {
        const T* row = x + i * n;
        T mean{0};
        for (std::size_t j = 0; j < n; ++j) {
            mean += row[j];
        }
        mean /= static_cast<T>(n);
        T var{0};
        for (std::size_t j = 0; j < n; ++j) {
            const T d = row[j] - mean;
            var += d * d;
        }
        var /= static_cast<T>(n);
        const T rstd = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
        cache.rstd[i] = rstd;
        for (std::size_t j = 0; j < n; ++j) {
            const T xh = (row[j] - mean) * rstd;
            cache.xhat[i * n + j] = xh;
            y[i * n + j] = gamma[j] * xh + beta[j];
        }
    }
}

/// dx = LN'(dy); accumulates dgamma, dbeta.
template <class T>
void layer_norm_backward(std::size_t m, std::size_t n, const T* dy, const T* gamma, const LayerNormCache<T>& cache,
                         T* dx, T* dgamma, T* dbeta) {
    std::vector<T> dxhat(n);
    for (std::size_t i = 0; i < m; ++i) {
        const T* g = dy + i * n;
        const T* xh = cache.xhat.data() + i * n;
        T mean_d{0};
        T mean_dx{0};
        for (std::size_t j = 0; j < n; ++j) {
            dgamma[j] += g[j] * xh[j];
            dbeta[j] += g[j];
            dxhat[j] = g[j] * gamma[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xh[j];
        }
        mean_d /= static_cast<T>(n);
        mean_dx /= static_cast<T>(n);
        for (std::size_t j = 0; j < n; ++j) {
            dx[i * n + j] = cache.rstd[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
}

/// Inverted dropout; an empty mask means identity.
template <class T>
std::vector<T> dropout_mask(std::size_t n, double rate, Rng* rng) {
    if (rng == nullptr || rate <= 0.0) {
        return {};
    }
    std::vector<T> mask(n);
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    for (auto& m : mask) {
        m = rng->bernoulli(rate) ? T{0} : keep_scale;
    }
    return mask;
}

template <class T>
void apply_mask(std::vector<T>& x, const std::vector<T>& mask) {
    if (mask.empty()) {
        return;
    }
    for (std::size_t i = 0; i < x.size(); ++i) {
        x[i] *= mask[i];
    }
}

template <class T>
void check_finite(const std::vector<T>& x, const std::string& where) {
    for (const T v : x) {
        if (!std::isfinite(v)) {
            throw NumericError("non-finite activation in " + where);
        }
    }
}

// ---- activation caches -------------------------------------------------------

template <class T>
struct LayerCache {
    std::vector<T> input;        // S x H
    std::vector<T> q, k, v;      // S x H
    std::vector<T> probs;        // heads x S x S, softmax output
    std::vector<T> probs_mask;   // dropout on probs
    std::vector<T> ctx;          // S x H
    std::vector<T> attn_mask;    // dropout on attention output
    LayerNormCache<T> ln1;
    std::vector<T> x1;           // S x H
    std::vector<T> h_pre;        // S x F
    std::vector<T> ffn_mask;     // dropout on FFN output
    LayerNormCache<T> ln2;
};

template <class T>
struct SequenceCache {
    std::vector<T> emb_mask;
    LayerNormCache<T> emb_ln;
    std::vector<LayerCache<T>> layers;
    std::vector<T> final_x; // S x H
    std::vector<T> t_pre;   // S x H
    LayerNormCache<T> mlm_ln;
    std::vector<T> t_norm;  // S x H
};

template <class T>
struct ForwardCache {
    std::vector<SequenceCache<T>> sequences;
    bool consumed = false;
};

} // namespace detail

template <class T>
struct ForwardOutput {
    std::size_t batch = 0;
    std::size_t seq_len = 0;
    std::size_t vocab = 0;
    std::size_t hidden = 0;
    std::vector<T> mlm_logits; ///< (batch * seq_len) x vocab
    std::vector<T> sso_logits; ///< batch x 3
    std::vector<T> pooled;     ///< batch x hidden, pooler output at [CLS]
    std::shared_ptr<detail::ForwardCache<T>> cache;
    Batch inputs; ///< copy kept for backward

    /// heads x S x S softmax probabilities of sequence `b` in `layer`.
    const std::vector<T>& attention_probs(std::size_t b, std::size_t layer) const {
        if (!cache) {
            throw Error("activation cache already released");
        }
        return cache->sequences.at(b).layers.at(layer).probs;
    }
};

namespace detail {

template <class T>
const T* tensor_ptr(const TensorMap<T>& m, const std::string& name) {
    return m.at(name).data.data();
}

template <class T>
T* tensor_ptr(TensorMap<T>& m, const std::string& name) {
    return m.at(name).data.data();
}

} // namespace detail

/// Runs the encoder and both heads. Keys with attention_mask == 0 get zero
/// attention weight. The returned cache is consumed by exactly one
/// `backward` call.
template <class T>
ForwardOutput<T> forward(const ModelConfig& config, const TensorMap<T>& params, const Batch& batch,
                         const ForwardOptions& opts = {}) {
    using namespace detail;
    config.validate();
    validate_params(config, params);
    const std::size_t B = batch.size;
    const std::size_t S = batch.seq_len;
    const std::size_t H = config.hidden;
    const std::size_t F = config.ff_dim;
    const std::size_t V = config.vocab_size;
    const std::size_t NH = config.heads;
    const std::size_t DH = config.head_dim();
    if (S > config.max_seq_len) {
        throw ShapeError("sequence length " + std::to_string(S) + " exceeds max_seq_len " +
                         std::to_string(config.max_seq_len));
    }
    if (batch.input_ids.size() != B * S || batch.token_type_ids.size() != B * S ||
        batch.attention_mask.size() != B * S) {
        throw ShapeError("batch arrays do not match batch x seq_len");
    }
    const bool dropout_on = opts.train && opts.dropout_rate > 0.0;
    const T scale = T(1) / std::sqrt(static_cast<T>(DH));

    ForwardOutput<T> out;
    out.batch = B;
    out.seq_len = S;
    out.vocab = V;
    out.hidden = H;
    out.mlm_logits.assign(B * S * V, T{0});
    out.sso_logits.assign(B * kSsoClasses, T{0});
    out.pooled.assign(B * H, T{0});
    out.cache = std::make_shared<ForwardCache<T>>();
    out.cache->sequences.resize(B);
    out.inputs = batch;

    const T* word = tensor_ptr(params, "embeddings.word");
    const T* pos = tensor_ptr(params, "embeddings.position");
    const T* type = tensor_ptr(params, "embeddings.token_type");

    for (std::size_t b = 0; b < B; ++b) {
        SequenceCache<T>& sc = out.cache->sequences[b];
        Rng rng = Rng::stream(opts.seed, "dropout", b);
        Rng* drop_rng = dropout_on ? &rng : nullptr;
        const TokenId* ids = batch.input_ids.data() + b * S;
        const TokenId* types = batch.token_type_ids.data() + b * S;
        const std::uint8_t* amask = batch.attention_mask.data() + b * S;

        std::vector<T> e(S * H);
        for (std::size_t i = 0; i < S; ++i) {
            if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= V) {
                throw ConfigError("embeddings.word: token id " + std::to_string(ids[i]) + " out of range at batch " +
                                  std::to_string(b) + ", position " + std::to_string(i));
            }
            if (types[i] < 0 || static_cast<std::size_t>(types[i]) >= config.type_vocab_size) {
                throw ConfigError("embeddings.token_type: type id " + std::to_string(types[i]) + " out of range");
            }
            const T* w = word + static_cast<std::size_t>(ids[i]) * H;
            const T* p = pos + i * H;
            const T* t = type + static_cast<std::size_t>(types[i]) * H;
            for (std::size_t j = 0; j < H; ++j) {
                e[i * H + j] = w[j] + p[j] + t[j];
            }
        }
        std::vector<T> x(S * H);
        layer_norm(S, H, e.data(), tensor_ptr(params, "embeddings.ln.gamma"), tensor_ptr(params, "embeddings.ln.beta"),
                   x.data(), sc.emb_ln);
        sc.emb_mask = dropout_mask<T>(S * H, opts.dropout_rate, drop_rng);
        apply_mask(x, sc.emb_mask);
        check_finite(x, "embeddings");

        sc.layers.resize(config.layers);
        for (std::size_t l = 0; l < config.layers; ++l) {
            LayerCache<T>& lc = sc.layers[l];
            const std::string p = layer_prefix(l);
            lc.input = x;
            lc.q.resize(S * H);
            lc.k.resize(S * H);
            lc.v.resize(S * H);
            gemm_nn(S, H, H, x.data(), tensor_ptr(params, p + "attn.q.weight"), lc.q.data(), false);
            add_bias(S, H, tensor_ptr(params, p + "attn.q.bias"), lc.q.data());
            gemm_nn(S, H, H, x.data(), tensor_ptr(params, p + "attn.k.weight"), lc.k.data(), false);
            add_bias(S, H, tensor_ptr(params, p + "attn.k.bias"), lc.k.data());
            gemm_nn(S, H, H, x.data(), tensor_ptr(params, p + "attn.v.weight"), lc.v.data(), false);
            add_bias(S, H, tensor_ptr(params, p + "attn.v.bias"), lc.v.data());

            lc.probs.assign(NH * S * S, T{0});
            for (std::size_t h = 0; h < NH; ++h) {
                for (std::size_t i = 0; i < S; ++i) {
                    T* row = lc.probs.data() + (h * S + i) * S;
                    T mx = -std::numeric_limits<T>::infinity();
                    for (std::size_t j = 0; j < S; ++j) {
                        if (!amask[j]) {
                            continue;
                        }
                        T s{0};
                        for (std::size_t d = 0; d < DH; ++d) {
                            s += lc.q[i * H + h * DH + d] * lc.k[j * H + h * DH + d];
                        }
                        row[j] = s * scale;
                        mx = std::max(mx, row[j]);
                    }
                    T sum{0};
                    for (std::size_t j = 0; j < S; ++j) {
                        if (amask[j]) {
                            row[j] = std::exp(row[j] - mx);
                            sum += row[j];
                        }
                    }
                    if (sum > T{0}) {
                        for (std::size_t j = 0; j < S; ++j) {
                            row[j] /= sum;
                        }
                    }
                }
            }
            lc.probs_mask = dropout_mask<T>(NH * S * S, opts.dropout_rate, drop_rng);
            std::vector<T> probs_used = lc.probs;
            apply_mask(probs_used, lc.probs_mask);

            lc.ctx.assign(S * H, T{0});
            for (std::size_t h = 0; h < NH; ++h) {
                for (std::size_t i = 0; i < S; ++i) {
                    const T* prow = probs_used.data() + (h * S + i) * S;
                    T* c = lc.ctx.data() + i * H + h * DH;
                    for (std::size_t j = 0; j < S; ++j) {
                        const T pij = prow[j];
                        if (pij == T{0}) {
                            continue;
                        }
                        const T* vj = lc.v.data() + j * H + h * DH;
                        for (std::size_t d = 0; d < DH; ++d) {
                            c[d] += pij * vj[d];
                        }
                    }
                }
            }
            std::vector<T> a(S * H);
            gemm_nn(S, H, H, lc.ctx.data(), tensor_ptr(params, p + "attn.o.weight"), a.data(), false);
            add_bias(S, H, tensor_ptr(params, p + "attn.o.bias"), a.data());
            lc.attn_mask = dropout_mask<T>(S * H, opts.dropout_rate, drop_rng);
            apply_mask(a, lc.attn_mask);
            for (std::size_t i = 0; i < S * H; ++i) {
                a[i] += x[i];
            }
            lc.x1.resize(S * H);
            layer_norm(S, H, a.data(), tensor_ptr(params, p + "attn.ln.gamma"), tensor_ptr(params, p + "attn.ln.beta"),
                       lc.x1.data(), lc.ln1);

            lc.h_pre.resize(S * F);
            gemm_nn(S, F, H, lc.x1.data(), tensor_ptr(params, p + "ffn.in.weight"), lc.h_pre.data(), false);
            add_bias(S, F, tensor_ptr(params, p + "ffn.in.bias"), lc.h_pre.data());
            std::vector<T> h_act(S * F);
            for (std::size_t i = 0; i < S * F; ++i) {
                h_act[i] = gelu(lc.h_pre[i]);
            }
            std::vector<T> f(S * H);
            gemm_nn(S, H, F, h_act.data(), tensor_ptr(params, p + "ffn.out.weight"), f.data(), false);
            add_bias(S, H, tensor_ptr(params, p + "ffn.out.bias"), f.data());
            lc.ffn_mask = dropout_mask<T>(S * H, opts.dropout_rate, drop_rng);
            apply_mask(f, lc.ffn_mask);
            for (std::size_t i = 0; i < S * H; ++i) {
                f[i] += lc.x1[i];
            }
            layer_norm(S, H, f.data(), tensor_ptr(params, p + "ffn.ln.gamma"), tensor_ptr(params, p + "ffn.ln.beta"),
                       x.data(), lc.ln2);
            check_finite(x, "layer." + std::to_string(l));
        }
        sc.final_x = x;

        // MLM head
        sc.t_pre.resize(S * H);
        gemm_nn(S, H, H, x.data(), tensor_ptr(params, "mlm.transform.weight"), sc.t_pre.data(), false);
        add_bias(S, H, tensor_ptr(params, "mlm.transform.bias"), sc.t_pre.data());
        std::vector<T> t_act(S * H);
        for (std::size_t i = 0; i < S * H; ++i) {
            t_act[i] = gelu(sc.t_pre[i]);
        }
        sc.t_norm.resize(S * H);
        layer_norm(S, H, t_act.data(), tensor_ptr(params, "mlm.ln.gamma"), tensor_ptr(params, "mlm.ln.beta"),
                   sc.t_norm.data(), sc.mlm_ln);
        T* logits = out.mlm_logits.data() + b * S * V;
        gemm_nt(S, H, V, sc.t_norm.data(), word, logits, false);
        add_bias(S, V, tensor_ptr(params, "mlm.decoder.bias"), logits);

        // Pooler + SSO head on [CLS] (position 0)
        T* pooled = out.pooled.data() + b * H;
        gemm_nn(std::size_t{1}, H, H, x.data(), tensor_ptr(params, "pooler.weight"), pooled, false);
        const T* pb = tensor_ptr(params, "pooler.bias");
        for (std::size_t j = 0; j < H; ++j) {
            pooled[j] = std::tanh(pooled[j] + pb[j]);
        }
        T* sso = out.sso_logits.data() + b * kSsoClasses;
        gemm_nn(std::size_t{1}, kSsoClasses, H, pooled, tensor_ptr(params, "sso.weight"), sso, false);
        add_bias(std::size_t{1}, kSsoClasses, tensor_ptr(params, "sso.bias"), sso);
    }
    check_finite(out.mlm_logits, "mlm head");
    check_finite(out.sso_logits, "sso head");
    return out;
}

/// Gradients of a scalar loss with respect to every parameter, given the
/// loss gradients with respect to the forward outputs. `grad_pooled` is
/// optional (used by classification probes). Releases the cache.
template <class T>
TensorMap<T> backward(ForwardOutput<T>& out, const ModelConfig& config, const TensorMap<T>& params,
                      std::span<const T> grad_mlm_logits, std::span<const T> grad_sso_logits,
                      std::span<const T> grad_pooled = {}) {
    using namespace detail;
    if (!out.cache || out.cache->consumed) {
        throw Error("backward: activation cache missing or already consumed");
    }
    out.cache->consumed = true;
    const std::shared_ptr<ForwardCache<T>> cache = std::move(out.cache);

    const std::size_t B = out.batch;
    const std::size_t S = out.seq_len;
    const std::size_t H = config.hidden;
    const std::size_t F = config.ff_dim;
    const std::size_t V = config.vocab_size;
    const std::size_t NH = config.heads;
    const std::size_t DH = config.head_dim();
    if (grad_mlm_logits.size() != B * S * V || grad_sso_logits.size() != B * kSsoClasses ||
        (!grad_pooled.empty() && grad_pooled.size() != B * H)) {
        throw ShapeError("backward: gradient seed shapes do not match forward outputs");
    }
    const T scale = T(1) / std::sqrt(static_cast<T>(DH));

    TensorMap<T> grads = zeros_like(params);
    const T* word = tensor_ptr(params, "embeddings.word");
    T* g_word = tensor_ptr(grads, "embeddings.word");

    for (std::size_t b = 0; b < B; ++b) {
        SequenceCache<T>& sc = cache->sequences[b];
        const TokenId* ids = out.inputs.input_ids.data() + b * S;
        const TokenId* types = out.inputs.token_type_ids.data() + b * S;
        const std::uint8_t* amask = out.inputs.attention_mask.data() + b * S;

        std::vector<T> dx(S * H, T{0});

        // SSO head and pooler
        {
            const T* dsso = grad_sso_logits.data() + b * kSsoClasses;
            const T* pooled = out.pooled.data() + b * H;
            gemm_tn_acc(std::size_t{1}, kSsoClasses, H, pooled, dsso, tensor_ptr(grads, "sso.weight"));
            bias_grad_acc(std::size_t{1}, kSsoClasses, dsso, tensor_ptr(grads, "sso.bias"));
            std::vector<T> dpooled(H);
            gemm_nt(std::size_t{1}, kSsoClasses, H, dsso, tensor_ptr(params, "sso.weight"), dpooled.data(), false);
            if (!grad_pooled.empty()) {
                for (std::size_t j = 0; j < H; ++j) {
                    dpooled[j] += grad_pooled[b * H + j];
                }
            }
            for (std::size_t j = 0; j < H; ++j) {
                dpooled[j] *= T(1) - pooled[j] * pooled[j];
            }
            gemm_tn_acc(std::size_t{1}, H, H, sc.final_x.data(), dpooled.data(), tensor_ptr(grads, "pooler.weight"));
            bias_grad_acc(std::size_t{1}, H, dpooled.data(), tensor_ptr(grads, "pooler.bias"));
            gemm_nt(std::size_t{1}, H, H, dpooled.data(), tensor_ptr(params, "pooler.weight"), dx.data(), true);
        }

        // MLM head
        {
            const T* dlogits = grad_mlm_logits.data() + b * S * V;
            bias_grad_acc(S, V, dlogits, tensor_ptr(grads, "mlm.decoder.bias"));
            gemm_tn_acc(S, H, V, dlogits, sc.t_norm.data(), g_word);
            std::vector<T> dt_norm(S * H);
            gemm_nn(S, H, V, dlogits, word, dt_norm.data(), false);
            std::vector<T> dt_act(S * H);
            layer_norm_backward(S, H, dt_norm.data(), tensor_ptr(params, "mlm.ln.gamma"), sc.mlm_ln, dt_act.data(),
                                tensor_ptr(grads, "mlm.ln.gamma"), tensor_ptr(grads, "mlm.ln.beta"));
            for (std::size_t i = 0; i < S * H; ++i) {
                dt_act[i] *= gelu_grad(sc.t_pre[i]);
            }
            gemm_tn_acc(S, H, H, sc.final_x.data(), dt_act.data(), tensor_ptr(grads, "mlm.transform.weight"));
            bias_grad_acc(S, H, dt_act.data(), tensor_ptr(grads, "mlm.transform.bias"));
            gemm_nt(S, H, H, dt_act.data(), tensor_ptr(params, "mlm.transform.weight"), dx.data(), true);
        }

        for (std::size_t l = config.layers; l-- > 0;) {
            LayerCache<T>& lc = sc.layers[l];
            const std::string p = layer_prefix(l);

            // FFN block: x_out = LN2(x1 + drop(gelu(x1 Wi + bi) Wo + bo))
            std::vector<T> dres(S * H);
            layer_norm_backward(S, H, dx.data(), tensor_ptr(params, p + "ffn.ln.gamma"), lc.ln2, dres.data(),
                                tensor_ptr(grads, p + "ffn.ln.gamma"), tensor_ptr(grads, p + "ffn.ln.beta"));
            std::vector<T> df = dres;
            apply_mask(df, lc.ffn_mask);
            std::vector<T> h_act(S * F);
            for (std::size_t i = 0; i < S * F; ++i) {
                h_act[i] = gelu(lc.h_pre[i]);
            }
            gemm_tn_acc(S, H, F, h_act.data(), df.data(), tensor_ptr(grads, p + "ffn.out.weight"));
            bias_grad_acc(S, H, df.data(), tensor_ptr(grads, p + "ffn.out.bias"));
            std::vector<T> dh(S * F);
            gemm_nt(S, H, F, df.data(), tensor_ptr(params, p + "ffn.out.weight"), dh.data(), false);
            for (std::size_t i = 0; i < S * F; ++i) {
                dh[i] *= gelu_grad(lc.h_pre[i]);
            }
            gemm_tn_acc(S, F, H, lc.x1.data(), dh.data(), tensor_ptr(grads, p + "ffn.in.weight"));
            bias_grad_acc(S, F, dh.data(), tensor_ptr(grads, p + "ffn.in.bias"));
            std::vector<T> dx1 = dres;
            gemm_nt(S, F, H, dh.data(), tensor_ptr(params, p + "ffn.in.weight"), dx1.data(), true);

            // Attention block: x1 = LN1(x + drop(ctx Wo + bo))
            std::vector<T> dres1(S * H);
            layer_norm_backward(S, H, dx1.data(), tensor_ptr(params, p + "attn.ln.gamma"), lc.ln1, dres1.data(),
                                tensor_ptr(grads, p + "attn.ln.gamma"), tensor_ptr(grads, p + "attn.ln.beta"));
            std::vector<T> da = dres1;
            apply_mask(da, lc.attn_mask);
            gemm_tn_acc(S, H, H, lc.ctx.data(), da.data(), tensor_ptr(grads, p + "attn.o.weight"));
            bias_grad_acc(S, H, da.data(), tensor_ptr(grads, p + "attn.o.bias"));
            std::vector<T> dctx(S * H);
            gemm_nt(S, H, H, da.data(), tensor_ptr(params, p + "attn.o.weight"), dctx.data(), false);

            std::vector<T> probs_used = lc.probs;
            apply_mask(probs_used, lc.probs_mask);
            std::vector<T> dq(S * H, T{0}), dk(S * H, T{0}), dv(S * H, T{0});
            std::vector<T> dp(S);
            for (std::size_t h = 0; h < NH; ++h) {
                for (std::size_t i = 0; i < S; ++i) {
                    const T* prow = lc.probs.data() + (h * S + i) * S;
                    const T* purow = probs_used.data() + (h * S + i) * S;
                    const T* dc = dctx.data() + i * H + h * DH;
                    // d(probs used) and dv
                    for (std::size_t j = 0; j < S; ++j) {
                        if (!amask[j]) {
                            dp[j] = T{0};
                            continue;
                        }
                        const T* vj = lc.v.data() + j * H + h * DH;
                        T s{0};
                        for (std::size_t d = 0; d < DH; ++d) {
                            s += dc[d] * vj[d];
                        }
                        dp[j] = lc.probs_mask.empty() ? s : s * lc.probs_mask[(h * S + i) * S + j];
                        const T pu = purow[j];
                        if (pu != T{0}) {
                            T* dvj = dv.data() + j * H + h * DH;
                            for (std::size_t d = 0; d < DH; ++d) {
                                dvj[d] += pu * dc[d];
                            }
                        }
                    }
                    T dot{0};
                    for (std::size_t j = 0; j < S; ++j) {
                        dot += prow[j] * dp[j];
                    }
                    const T* qi = lc.q.data() + i * H + h * DH;
                    T* dqi = dq.data() + i * H + h * DH;
                    for (std::size_t j = 0; j < S; ++j) {
                        if (!amask[j]) {
                            continue;
                        }
                        const T ds = prow[j] * (dp[j] - dot) * scale;
                        if (ds == T{0}) {
                            continue;
                        }
                        const T* kj = lc.k.data() + j * H + h * DH;
                        T* dkj = dk.data() + j * H + h * DH;
                        for (std::size_t d = 0; d < DH; ++d) {
                            dqi[d] += ds * kj[d];
                            dkj[d] += ds * qi[d];
                        }
                    }
                }
            }
            std::vector<T> dinput = dres1;
            const std::pair<const char*, std::vector<T>*> qkv[] = {{"q", &dq}, {"k", &dk}, {"v", &dv}};
            for (const auto& [m, g] : qkv) {
                gemm_tn_acc(S, H, H, lc.input.data(), g->data(), tensor_ptr(grads, p + "attn." + m + ".weight"));
                bias_grad_acc(S, H, g->data(), tensor_ptr(grads, p + "attn." + m + ".bias"));
                gemm_nt(S, H, H, g->data(), tensor_ptr(params, p + "attn." + m + ".weight"), dinput.data(), true);
            }
            dx = std::move(dinput);
        }

        // Embeddings
        apply_mask(dx, sc.emb_mask);
        std::vector<T> de(S * H);
        layer_norm_backward(S, H, dx.data(), tensor_ptr(params, "embeddings.ln.gamma"), sc.emb_ln, de.data(),
                            tensor_ptr(grads, "embeddings.ln.gamma"), tensor_ptr(grads, "embeddings.ln.beta"));
        T* g_pos = tensor_ptr(grads, "embeddings.position");
        T* g_type = tensor_ptr(grads, "embeddings.token_type");
        for (std::size_t i = 0; i < S; ++i) {
            T* gw = g_word + static_cast<std::size_t>(ids[i]) * H;
            T* gp = g_pos + i * H;
            T* gt = g_type + static_cast<std::size_t>(types[i]) * H;
            for (std::size_t j = 0; j < H; ++j) {
                const T d = de[i * H + j];
                gw[j] += d;
                gp[j] += d;
                gt[j] += d;
            }
        }
    }
    return grads;
}

/// Name of the tensor holding the model config inside a checkpoint.
inline const std::string kConfigTensor = "meta.config";

inline Tensor<float> config_tensor(const ModelConfig& c) {
    return Tensor<float>({9}, {static_cast<float>(c.layers), static_cast<float>(c.heads), static_cast<float>(c.hidden),
                               static_cast<float>(c.ff_dim), static_cast<float>(c.vocab_size),
                               static_cast<float>(c.max_positions), static_cast<float>(c.type_vocab_size),
                               static_cast<float>(c.dropout_rate), static_cast<float>(c.max_seq_len)});
}

inline ModelConfig config_from_tensor(const Tensor<float>& t) {
    if (t.shape != Shape{9}) {
        throw FormatError("meta.config has shape " + shape_string(t.shape) + ", expected [9]");
    }
    const auto at = [&](std::size_t i) { return static_cast<std::size_t>(t.data[i]); };
    ModelConfig c{at(0), at(1), at(2), at(3), at(4), at(5), at(6), static_cast<double>(t.data[7]), at(8)};
    // dropout is stored in single precision; recover the usual decimal value
    c.dropout_rate = std::round(c.dropout_rate * 1e6) / 1e6;
    return c;
}

struct ModelCheckpoint {
    ModelConfig config;
    TensorMap<float> params;
};

inline void save_model(const std::filesystem::path& path, const ModelConfig& config, const TensorMap<float>& params) {
    validate_params(config, params);
    TensorMap<float> all = params;
    all.insert_or_assign(kConfigTensor, config_tensor(config));
    save_checkpoint(path, all);
}

inline ModelCheckpoint load_model(const std::filesystem::path& path) {
    TensorMap<float> all = load_checkpoint(path);
    const auto it = all.find(kConfigTensor);
    if (it == all.end()) {
        throw FormatError(path.string() + ": checkpoint has no " + kConfigTensor + " tensor");
    }
    ModelCheckpoint ck{config_from_tensor(it->second), {}};
    all.erase(it);
    ck.config.validate();
    validate_params(ck.config, all);
    ck.params = std::move(all);
    return ck;
}

} // namespace herbert
