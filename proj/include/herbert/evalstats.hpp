#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "herbert/error.hpp"
#include "herbert/model.hpp"
#include "herbert/objectives.hpp"
#include "herbert/rng.hpp"
#include "herbert/synthetic.hpp"
#include "herbert/tokenizer.hpp"
#include "herbert/training.hpp"

namespace herbert {

using synthetic::LabeledText;

// ---------------------------------------------------------------------------
// Held-out MLM metrics
// ---------------------------------------------------------------------------

struct MlmMetrics {
    double loss = 0.0;       ///< mean cross-entropy over all labelled positions
    double perplexity = 0.0; ///< exp(loss)
    double accuracy = 0.0;   ///< argmax hits over labelled positions
    std::size_t positions = 0;
};

/// Fixed evaluation batches: no BPE-dropout, masking drawn from `seed`, so
/// every model sees identical inputs.
inline std::vector<Batch> build_eval_batches(const Tokenizer& tokenizer, const SentencePool& pool,
                                             std::size_t count, std::size_t batch_size, std::size_t max_seq_len,
                                             std::uint64_t seed) {
    const BatchBuilder builder(tokenizer, pool, max_seq_len);
    std::vector<Batch> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        out.push_back(builder.build(batch_size, derive_seed(seed, "eval"), i, 0.0));
    }
    return out;
}

template <class T>
MlmMetrics heldout_mlm_metrics(const ModelConfig& config, const TensorMap<T>& params,
                               const std::vector<Batch>& batches) {
    double total = 0.0;
    std::size_t hits = 0;
    MlmMetrics m;
    for (const auto& b : batches) {
        const auto out = forward(config, params, b, {});
        const auto res = mlm_loss<T>(out.mlm_logits, config.vocab_size, b.mlm_labels);
        total += res.loss * static_cast<double>(res.count);
        m.positions += res.count;
        for (std::size_t r = 0; r < b.mlm_labels.size(); ++r) {
            if (b.mlm_labels[r] == kIgnore) {
                continue;
            }
            const T* row = out.mlm_logits.data() + r * config.vocab_size;
            const auto best = std::max_element(row, row + config.vocab_size) - row;
            hits += best == b.mlm_labels[r] ? 1 : 0;
        }
    }
    if (m.positions == 0) {
        throw ConfigError("evaluation batches contain no labelled positions");
    }
    m.loss = total / static_cast<double>(m.positions);
    m.perplexity = std::exp(m.loss);
    m.accuracy = static_cast<double>(hits) / static_cast<double>(m.positions);
    return m;
}

// ---------------------------------------------------------------------------
// Welch's t-test
// ---------------------------------------------------------------------------

namespace detail {

/// Continued fraction for the incomplete beta function (modified Lentz).
inline double beta_cf(double a, double b, double x) {
    constexpr double kTiny = 1e-300;
    constexpr double kTol = 1e-12;
    constexpr int kMaxIter = 10000;
    const double qab = a + b;
    const double qap = a + 1.0;
    const double qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < kTiny) {
        d = kTiny;
    }
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        d = std::fabs(d) < kTiny ? kTiny : d;
        c = 1.0 + aa / c;
        c = std::fabs(c) < kTiny ? kTiny : c;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        d = std::fabs(d) < kTiny ? kTiny : d;
        c = 1.0 + aa / c;
        c = std::fabs(c) < kTiny ? kTiny : c;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < kTol) {
            return h;
        }
    }
    throw NumericError("incomplete beta continued fraction did not converge");
}

} // namespace detail

/// Regularized incomplete beta function I_x(a, b).
inline double incomplete_beta(double a, double b, double x) {
    if (!(a > 0.0) || !(b > 0.0)) {
        throw ConfigError("incomplete beta needs positive parameters");
    }
    if (!(x >= 0.0 && x <= 1.0)) {
        throw ConfigError("incomplete beta argument outside [0, 1]");
    }
    if (x == 0.0 || x == 1.0) {
        return x;
    }
    const double front =
        std::exp(std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x));
    if (x < (a + 1.0) / (a + b + 2.0)) {
        return front * detail::beta_cf(a, b, x) / a;
    }
    return 1.0 - front * detail::beta_cf(b, a, 1.0 - x) / b;
}

struct WelchResult {
    double t = 0.0;
    double dof = 0.0;
    double p = 1.0;          ///< two-sided
    bool degenerate = false; ///< both samples have zero variance
};

inline WelchResult welch_t_test(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() < 2 || b.size() < 2) {
        throw ConfigError("Welch's t-test needs at least two scores per sample");
    }
    const auto moments = [](const std::vector<double>& x) {
        double mean = 0.0;
        for (const double v : x) {
            if (!std::isfinite(v)) {
                throw NumericError("non-finite score in t-test sample");
            }
            mean += v;
        }
        mean /= static_cast<double>(x.size());
        double ss = 0.0;
        for (const double v : x) {
            ss += (v - mean) * (v - mean);
        }
        return std::pair{mean, ss / static_cast<double>(x.size() - 1)};
    };
    const auto [ma, va] = moments(a);
    const auto [mb, vb] = moments(b);
    const double na = static_cast<double>(a.size());
    const double nb = static_cast<double>(b.size());
    const double sa = va / na;
    const double sb = vb / nb;
    WelchResult r;
    if (sa + sb == 0.0) {
        r.degenerate = true;
        r.dof = na + nb - 2.0;
        if (ma == mb) {
            r.t = 0.0;
            r.p = 1.0;
        } else {
            r.t = ma > mb ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
            r.p = 0.0;
        }
        return r;
    }
    r.t = (ma - mb) / std::sqrt(sa + sb);
    r.dof = (sa + sb) * (sa + sb) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    r.p = incomplete_beta(r.dof / 2.0, 0.5, r.dof / (r.dof + r.t * r.t));
    return r;
}

// ---------------------------------------------------------------------------
// Ablation comparison
// ---------------------------------------------------------------------------

/// Scores of one variant across seeds. Names of the form "group:variant"
/// belong to `group`; others form their own group.
struct VariantRuns {
    std::string name;
    std::vector<double> scores;
};

struct VariantSummary {
    std::string name;
    std::string group;
    double median = 0.0;
    double half_range = 0.0;
    std::size_t runs = 0;
    bool best_in_group = false;
    bool best_overall = false;
};

struct PairwiseTest {
    std::string a;
    std::string b;
    WelchResult welch;
    bool significant = false;
};

struct AblationReport {
    std::vector<VariantSummary> variants; ///< sorted by name
    std::vector<PairwiseTest> tests;
    double threshold = 0.01;
    bool higher_is_better = true;

    const VariantSummary& variant(const std::string& name) const {
        for (const auto& v : variants) {
            if (v.name == name) {
                return v;
            }
        }
        throw ConfigError("no variant named " + name);
    }

    const PairwiseTest& test(const std::string& x, const std::string& y) const {
        for (const auto& t : tests) {
            if ((t.a == x && t.b == y) || (t.a == y && t.b == x)) {
                return t;
            }
        }
        throw ConfigError("no test between " + x + " and " + y);
    }

    std::string format() const {
        std::ostringstream out;
        char buf[256];
        out << "variant\tmedian\thalf_range\truns\tmark\n";
        for (const auto& v : variants) {
            const char* mark = v.best_overall ? "**" : (v.best_in_group ? "*" : "");
            std::snprintf(buf, sizeof buf, "%s\t%.6f\t%.6f\t%zu\t%s\n", v.name.c_str(), v.median, v.half_range,
                          v.runs, mark);
            out << buf;
        }
        out << "\n# pairwise Welch t-tests, significance p < " << threshold << '\n';
        out << "a\tb\tt\tdof\tp\tsignificant\n";
        for (const auto& t : tests) {
            std::snprintf(buf, sizeof buf, "%s\t%s\t%.6g\t%.6g\t%.6g\t%s%s\n", t.a.c_str(), t.b.c_str(), t.welch.t,
                          t.welch.dof, t.welch.p, t.significant ? "yes" : "no",
                          t.welch.degenerate ? "\t(zero variance)" : "");
            out << buf;
        }
        return out.str();
    }
};

inline double median_of(std::vector<double> v) {
    if (v.empty()) {
        throw ConfigError("median of an empty sample");
    }
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::string group_of(const std::string& name) {
    const auto colon = name.find(':');
    return colon == std::string::npos ? name : name.substr(0, colon);
}

/// Medians with half-range spread, best-variant marks (per group and
/// overall) and Welch tests for every pair. The result does not depend on
/// the order of `runs`.
inline AblationReport ablation_compare(std::vector<VariantRuns> runs, double threshold = 0.01,
                                       bool higher_is_better = true) {
    if (runs.empty()) {
        throw ConfigError("nothing to compare");
    }
    std::sort(runs.begin(), runs.end(), [](const auto& x, const auto& y) { return x.name < y.name; });
    for (std::size_t i = 0; i < runs.size(); ++i) {
        if (runs[i].scores.empty()) {
            throw ConfigError("variant " + runs[i].name + " has no scores");
        }
        if (i > 0 && runs[i].name == runs[i - 1].name) {
            throw ConfigError("duplicate variant " + runs[i].name);
        }
        if (runs[i].scores.size() != runs.front().scores.size()) {
            throw ConfigError("variants have different run counts: " + runs.front().name + " has " +
                              std::to_string(runs.front().scores.size()) + ", " + runs[i].name + " has " +
                              std::to_string(runs[i].scores.size()));
        }
    }
    AblationReport rep;
    rep.threshold = threshold;
    rep.higher_is_better = higher_is_better;
    for (const auto& r : runs) {
        const auto [lo, hi] = std::minmax_element(r.scores.begin(), r.scores.end());
        rep.variants.push_back({r.name, group_of(r.name), median_of(r.scores), (*hi - *lo) / 2.0, r.scores.size()});
    }
    const auto better = [&](const VariantSummary& x, const VariantSummary& y) {
        return higher_is_better ? x.median > y.median : x.median < y.median;
    };
    std::map<std::string, VariantSummary*> best_in;
    VariantSummary* best = nullptr;
    for (auto& v : rep.variants) {
        auto& slot = best_in[v.group];
        if (slot == nullptr || better(v, *slot)) {
            slot = &v;
        }
        if (best == nullptr || better(v, *best)) {
            best = &v;
        }
    }
    for (auto& [g, v] : best_in) {
        v->best_in_group = true;
    }
    best->best_overall = true;

    if (runs.front().scores.size() >= 2) {
        for (std::size_t i = 0; i < runs.size(); ++i) {
            for (std::size_t j = i + 1; j < runs.size(); ++j) {
                const WelchResult w = welch_t_test(runs[i].scores, runs[j].scores);
                rep.tests.push_back({runs[i].name, runs[j].name, w, w.p < threshold});
            }
        }
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Classification probe
// ---------------------------------------------------------------------------

struct ProbeOptions {
    bool unfreeze = false; ///< also update the encoder
    std::size_t epochs = 20;
    std::size_t batch_size = 32;
    double lr = 1e-2;          ///< head learning rate
    double encoder_lr = 1e-4;  ///< used when unfrozen
    double train_fraction = 0.8;
    std::size_t max_seq_len = 64;
    std::uint64_t seed = 0;
};

struct ProbeResult {
    double accuracy = 0.0; ///< on the held-out split
    std::size_t train_size = 0;
    std::size_t test_size = 0;
    std::set<std::string> updated; ///< parameters the probe is allowed to change
    TensorMap<float> params;       ///< encoder parameters after the probe
};

/// Tensors of the pretraining heads; a probe never touches them.
inline bool is_pretraining_head(const std::string& name) {
    return name.rfind("mlm.", 0) == 0 || name.rfind("sso.", 0) == 0;
}

namespace detail {

inline Batch probe_batch(const Tokenizer& tok, const std::vector<LabeledText>& data,
                         const std::vector<std::size_t>& idx, std::size_t begin, std::size_t end,
                         std::size_t max_len) {
    const Vocab& v = tok.vocab();
    std::vector<std::vector<TokenId>> seqs;
    std::size_t longest = 0;
    for (std::size_t i = begin; i < end; ++i) {
        std::vector<TokenId> ids{v.cls_id()};
        for (const TokenId t : tok.encode(data[idx[i]].text)) {
            if (ids.size() + 1 >= max_len) {
                break;
            }
            ids.push_back(t);
        }
        ids.push_back(v.sep_id());
        longest = std::max(longest, ids.size());
        seqs.push_back(std::move(ids));
    }
    Batch b;
    b.size = seqs.size();
    b.seq_len = longest;
    b.input_ids.assign(b.size * longest, v.pad_id());
    b.token_type_ids.assign(b.size * longest, 0);
    b.attention_mask.assign(b.size * longest, 0);
    b.mlm_labels.assign(b.size * longest, kIgnore);
    b.sso_labels.assign(b.size, kIgnore);
    for (std::size_t s = 0; s < seqs.size(); ++s) {
        for (std::size_t i = 0; i < seqs[s].size(); ++i) {
            b.input_ids[s * longest + i] = seqs[s][i];
            b.attention_mask[s * longest + i] = 1;
        }
    }
    return b;
}

} // namespace detail

/// Trains a linear classifier on the pooled [CLS] vector. Frozen: only
/// probe.weight / probe.bias change. Unfrozen: the encoder (everything except
/// the MLM and SSO heads) is updated as well.
inline ProbeResult probe_finetune(const ModelConfig& config, TensorMap<float> params, const Tokenizer& tokenizer,
                                  const std::vector<LabeledText>& data, std::size_t classes,
                                  const ProbeOptions& opt = {}) {
    if (classes < 2) {
        throw ConfigError("probe needs at least two classes");
    }
    if (data.size() < 2) {
        throw ConfigError("probe dataset is too small");
    }
    std::vector<std::size_t> idx(data.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (data[i].label >= classes) {
            throw ConfigError("probe label " + std::to_string(data[i].label) + " outside [0, " +
                              std::to_string(classes) + ")");
        }
        idx[i] = i;
    }
    Rng rng = Rng::stream(opt.seed, "probe-split");
    for (std::size_t i = idx.size(); i > 1; --i) {
        std::swap(idx[i - 1], idx[rng.below(i)]);
    }
    const auto n_train = static_cast<std::size_t>(std::llround(opt.train_fraction * static_cast<double>(idx.size())));
    if (n_train == 0 || n_train >= idx.size()) {
        throw ConfigError("probe split leaves an empty train or test set");
    }
    std::vector<bool> seen(classes, false);
    for (std::size_t i = 0; i < n_train; ++i) {
        seen[data[idx[i]].label] = true;
    }
    for (std::size_t c = 0; c < classes; ++c) {
        if (!seen[c]) {
            throw ConfigError("class " + std::to_string(c) + " has no training examples");
        }
    }

    const std::size_t H = config.hidden;
    const std::size_t max_len = std::min(opt.max_seq_len, config.max_seq_len);
    TensorMap<float> head;
    head.emplace("probe.weight", Tensor<float>({H, classes}));
    head.emplace("probe.bias", Tensor<float>({classes}));
    {
        Rng init = Rng::stream(opt.seed, "probe-init");
        for (auto& w : head.at("probe.weight").data) {
            w = static_cast<float>(init.normal(0.0, 0.02));
        }
    }
    ProbeResult res;
    res.train_size = n_train;
    res.test_size = idx.size() - n_train;
    res.updated = {"probe.weight", "probe.bias"};
    std::set<std::string> frozen_heads;
    for (const auto& [name, t] : params) {
        if (opt.unfreeze && !is_pretraining_head(name)) {
            res.updated.insert(name);
        } else {
            frozen_heads.insert(name);
        }
    }

    // head logits and gradient for pooled features of one batch
    const auto head_pass = [&](const std::vector<float>& pooled, std::size_t n, std::vector<float>& logits) {
        logits.assign(n * classes, 0.0f);
        const auto& W = head.at("probe.weight").data;
        const auto& bias = head.at("probe.bias").data;
        for (std::size_t s = 0; s < n; ++s) {
            for (std::size_t c = 0; c < classes; ++c) {
                double z = bias[c];
                for (std::size_t j = 0; j < H; ++j) {
                    z += static_cast<double>(pooled[s * H + j]) * W[j * classes + c];
                }
                logits[s * classes + c] = static_cast<float>(z);
            }
        }
    };

    // Frozen encoders see identical inputs every epoch, so pooled features are
    // computed once.
    std::vector<std::vector<float>> cached_pooled;
    std::vector<Batch> train_batches;
    for (std::size_t b = 0; b < n_train; b += opt.batch_size) {
        train_batches.push_back(
            detail::probe_batch(tokenizer, data, idx, b, std::min(n_train, b + opt.batch_size), max_len));
        if (!opt.unfreeze) {
            cached_pooled.push_back(forward(config, params, train_batches.back(), {}).pooled);
        }
    }

    AdamState<float> head_adam, enc_adam;
    std::vector<float> logits, g_logits;
    for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
        for (std::size_t bi = 0; bi < train_batches.size(); ++bi) {
            const Batch& batch = train_batches[bi];
            std::vector<TokenId> labels(batch.size);
            for (std::size_t s = 0; s < batch.size; ++s) {
                labels[s] = static_cast<TokenId>(data[idx[bi * opt.batch_size + s]].label);
            }
            std::optional<ForwardOutput<float>> out;
            const std::vector<float>* pooled = nullptr;
            if (opt.unfreeze) {
                out = forward(config, params, batch, {true, config.dropout_rate, derive_seed(opt.seed, "probe", epoch, bi)});
                pooled = &out->pooled;
            } else {
                pooled = &cached_pooled[bi];
            }
            head_pass(*pooled, batch.size, logits);
            cross_entropy<float>(logits, classes, labels, &g_logits);

            TensorMap<float> head_grads;
            head_grads.emplace("probe.weight", Tensor<float>({H, classes}));
            head_grads.emplace("probe.bias", Tensor<float>({classes}));
            auto& gW = head_grads.at("probe.weight").data;
            auto& gb = head_grads.at("probe.bias").data;
            std::vector<float> g_pooled(batch.size * H, 0.0f);
            const auto& W = head.at("probe.weight").data;
            for (std::size_t s = 0; s < batch.size; ++s) {
                for (std::size_t c = 0; c < classes; ++c) {
                    const float g = g_logits[s * classes + c];
                    gb[c] += g;
                    for (std::size_t j = 0; j < H; ++j) {
                        gW[j * classes + c] += (*pooled)[s * H + j] * g;
                        g_pooled[s * H + j] += W[j * classes + c] * g;
                    }
                }
            }
            if (opt.unfreeze) {
                const std::vector<float> zero_mlm(out->mlm_logits.size(), 0.0f);
                const std::vector<float> zero_sso(out->sso_logits.size(), 0.0f);
                auto enc_grads = backward<float>(*out, config, params, zero_mlm, zero_sso, g_pooled);
                adam_step(params, enc_grads, enc_adam, opt.encoder_lr, {}, &frozen_heads);
            }
            adam_step(head, head_grads, head_adam, opt.lr);
        }
    }

    std::size_t correct = 0;
    for (std::size_t b = n_train; b < idx.size(); b += opt.batch_size) {
        const std::size_t e = std::min(idx.size(), b + opt.batch_size);
        const Batch batch = detail::probe_batch(tokenizer, data, idx, b, e, max_len);
        const auto out = forward(config, params, batch, {});
        head_pass(out.pooled, batch.size, logits);
        for (std::size_t s = 0; s < batch.size; ++s) {
            const float* row = logits.data() + s * classes;
            const auto pred = static_cast<std::size_t>(std::max_element(row, row + classes) - row);
            correct += pred == data[idx[b + s]].label ? 1 : 0;
        }
    }
    res.accuracy = static_cast<double>(correct) / static_cast<double>(res.test_size);
    res.params = std::move(params);
    return res;
}

} // namespace herbert
