#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "herbert/corpus.hpp"
#include "herbert/error.hpp"
#include "herbert/rng.hpp"
#include "herbert/tokenizer.hpp"

namespace herbert {

/// Label value for positions that do not contribute to the MLM loss.
inline constexpr TokenId kIgnore = -1;

using WordSpan = std::pair<std::size_t, std::size_t>; ///< half-open token range

// ---------------------------------------------------------------------------
// Whole-word masking
// ---------------------------------------------------------------------------

enum class Corruption : std::uint8_t { None, Mask, Random, Keep };

struct MaskingSpec {
    double rate = 0.15;
    double p_mask = 0.8;   ///< replace with mask_id
    double p_random = 0.1; ///< replace with a random non-special id; the rest stay unchanged
    TokenId mask_id = 4;
    TokenId unk_id = 1; ///< the only special id allowed inside word spans
    std::size_t vocab_size = 0;
    std::size_t num_specials = 5; ///< ids below this are special
};

struct MaskedExample {
    std::vector<TokenId> input_ids;
    std::vector<TokenId> labels;
    std::vector<WordSpan> word_spans;
    std::vector<Corruption> corruption; ///< per position, for auditing
};

/// Selects whole words in shuffled order until the number of selected tokens
/// reaches round(rate * covered tokens); words that would overshoot the
/// budget are skipped. Each selected word draws one corruption mode that all
/// of its positions share.
inline MaskedExample whole_word_mask(std::span<const TokenId> ids, std::span<const WordSpan> word_spans, Rng& rng,
                                     const MaskingSpec& spec) {
    if (spec.rate < 0.0 || spec.rate > 1.0) {
        throw ConfigError("mask rate must lie in [0, 1]");
    }
    if (spec.mask_id < 0 || static_cast<std::size_t>(spec.mask_id) >= spec.num_specials) {
        throw ConfigError("mask id " + std::to_string(spec.mask_id) + " is not a special token");
    }
    if (spec.vocab_size <= spec.num_specials) {
        throw ConfigError("vocab has no non-special tokens to sample replacements from");
    }
    std::size_t covered = 0;
    std::size_t prev_end = 0;
    for (const auto& [b, e] : word_spans) {
        if (b < prev_end || e <= b || e > ids.size()) {
            throw ConfigError("word spans must be sorted, non-empty, non-overlapping and in range");
        }
        for (std::size_t i = b; i < e; ++i) {
            if (ids[i] >= 0 && static_cast<std::size_t>(ids[i]) < spec.num_specials &&
                ids[i] != spec.unk_id) {
                throw ConfigError("word span covers special token at position " + std::to_string(i));
            }
        }
        covered += e - b;
        prev_end = e;
    }

    MaskedExample out{{ids.begin(), ids.end()},
                      std::vector<TokenId>(ids.size(), kIgnore),
                      {word_spans.begin(), word_spans.end()},
                      std::vector<Corruption>(ids.size(), Corruption::None)};
    if (spec.rate == 0.0 || covered == 0) {
        return out;
    }
    const auto budget = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(spec.rate * static_cast<double>(covered))));

    std::vector<std::size_t> order(word_spans.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i) {
        std::swap(order[i - 1], order[rng.below(i)]);
    }
    const auto random_range = spec.vocab_size - spec.num_specials;
    std::size_t selected = 0;
    for (const std::size_t w : order) {
        if (selected == budget) {
            break;
        }
        const auto [b, e] = word_spans[w];
        if (selected + (e - b) > budget) {
            continue;
        }
        selected += e - b;
        const double u = rng.uniform();
        const Corruption mode =
            u < spec.p_mask ? Corruption::Mask : (u < spec.p_mask + spec.p_random ? Corruption::Random : Corruption::Keep);
        for (std::size_t i = b; i < e; ++i) {
            out.labels[i] = ids[i];
            out.corruption[i] = mode;
            if (mode == Corruption::Mask) {
                out.input_ids[i] = spec.mask_id;
            } else if (mode == Corruption::Random) {
                out.input_ids[i] = static_cast<TokenId>(spec.num_specials + rng.below(random_range));
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Sentence structural objective
// ---------------------------------------------------------------------------

/// Relation of the second segment to the first.
enum class SsoLabel : std::uint8_t { Previous = 0, Next = 1, Random = 2 };
inline constexpr std::size_t kSsoClasses = 3;

struct SentenceRef {
    std::size_t doc = 0;
    std::size_t sentence = 0;
    bool operator==(const SentenceRef&) const = default;
};

/// Sentences of many documents with an index for uniform draws.
class SentencePool {
public:
    SentencePool() = default;
    explicit SentencePool(std::vector<SentenceList> docs) : docs_(std::move(docs)) {
        offsets_.reserve(docs_.size() + 1);
        offsets_.push_back(0);
        for (const auto& d : docs_) {
            offsets_.push_back(offsets_.back() + d.sentences.size());
        }
    }

    template <class Range>
    static SentencePool from_documents(const Range& docs) {
        std::vector<SentenceList> lists;
        for (const auto& d : docs) {
            lists.push_back(split_sentences(d));
        }
        return SentencePool(std::move(lists));
    }

    std::size_t documents() const { return docs_.size(); }
    std::size_t total_sentences() const { return offsets_.empty() ? 0 : offsets_.back(); }
    const SentenceList& doc(std::size_t i) const { return docs_.at(i); }
    const std::string& sentence(const SentenceRef& r) const { return docs_.at(r.doc).sentences.at(r.sentence); }

    /// Uniform over all sentences outside `exclude_doc`.
    std::optional<SentenceRef> draw_outside(std::size_t exclude_doc, Rng& rng) const {
        const std::size_t own = docs_.at(exclude_doc).sentences.size();
        const std::size_t others = total_sentences() - own;
        if (others == 0) {
            return std::nullopt;
        }
        std::size_t k = rng.below(others);
        if (k >= offsets_[exclude_doc]) {
            k += own;
        }
        const auto it = std::upper_bound(offsets_.begin(), offsets_.end(), k);
        const auto d = static_cast<std::size_t>(std::distance(offsets_.begin(), it)) - 1;
        return SentenceRef{d, k - offsets_[d]};
    }

private:
    std::vector<SentenceList> docs_;
    std::vector<std::size_t> offsets_;
};

struct SsoDraw {
    SsoLabel label;
    SentenceRef first;
    SentenceRef second;
};

/// Draws a labelled sentence pair anchored in document `doc`. The class is
/// uniform over the three labels unless `forced`. Returns nullopt (the caller
/// resamples) when the drawn class cannot be built from this document.
inline std::optional<SsoDraw> sample_sso_pair(const SentencePool& pool, std::size_t doc, Rng& rng,
                                              std::optional<SsoLabel> forced = std::nullopt) {
    const std::size_t n = pool.doc(doc).sentences.size();
    if (n == 0) {
        return std::nullopt;
    }
    const SsoLabel label = forced ? *forced : static_cast<SsoLabel>(rng.below(kSsoClasses));
    switch (label) {
    case SsoLabel::Next: {
        if (n < 2) {
            return std::nullopt;
        }
        const std::size_t i = rng.below(n - 1);
        return SsoDraw{label, {doc, i}, {doc, i + 1}};
    }
    case SsoLabel::Previous: {
        if (n < 2) {
            return std::nullopt;
        }
        const std::size_t i = 1 + rng.below(n - 1);
        return SsoDraw{label, {doc, i}, {doc, i - 1}};
    }
    case SsoLabel::Random: {
        const std::size_t i = rng.below(n);
        const auto other = pool.draw_outside(doc, rng);
        if (!other) {
            return std::nullopt;
        }
        return SsoDraw{label, {doc, i}, *other};
    }
    }
    return std::nullopt;
}

/// `[CLS] a [SEP] b [SEP]` with token types 0 for the first three parts and
/// 1 for the rest.
struct SentencePairExample {
    std::vector<TokenId> tokens_a;
    std::vector<TokenId> tokens_b;
    std::vector<WordSpan> spans_a; ///< relative to tokens_a
    std::vector<WordSpan> spans_b; ///< relative to tokens_b
    SsoDraw provenance;

    SsoLabel sso_label() const { return provenance.label; }
    std::size_t length() const { return tokens_a.size() + tokens_b.size() + 3; }

    std::vector<TokenId> input_ids(const Vocab& vocab) const {
        std::vector<TokenId> ids;
        ids.reserve(length());
        ids.push_back(vocab.cls_id());
        ids.insert(ids.end(), tokens_a.begin(), tokens_a.end());
        ids.push_back(vocab.sep_id());
        ids.insert(ids.end(), tokens_b.begin(), tokens_b.end());
        ids.push_back(vocab.sep_id());
        return ids;
    }

    std::vector<TokenId> token_type_ids() const {
        std::vector<TokenId> types(length(), 0);
        std::fill(types.begin() + static_cast<std::ptrdiff_t>(tokens_a.size() + 2), types.end(), 1);
        return types;
    }

    /// Word spans in sequence coordinates.
    std::vector<WordSpan> word_spans() const {
        std::vector<WordSpan> spans;
        for (const auto& [b, e] : spans_a) {
            spans.emplace_back(b + 1, e + 1);
        }
        const std::size_t off = tokens_a.size() + 2;
        for (const auto& [b, e] : spans_b) {
            spans.emplace_back(b + off, e + off);
        }
        return spans;
    }
};

namespace detail {

inline void clip_spans(std::vector<WordSpan>& spans, std::size_t len) {
    std::vector<WordSpan> out;
    for (const auto& [b, e] : spans) {
        if (b < len) {
            out.emplace_back(b, std::min(e, len));
        }
    }
    spans = std::move(out);
}

} // namespace detail

/// Encodes both sentences of a draw and truncates the longer side, one token
/// at a time from its end, until the laid-out pair fits `max_len`.
inline SentencePairExample build_pair_example(const SsoDraw& draw, const SentencePool& pool,
                                              const Tokenizer& tokenizer, const EncodeOptions& opts,
                                              std::size_t max_len) {
    if (max_len < 5) {
        throw ConfigError("max sequence length must allow [CLS] a [SEP] b [SEP]");
    }
    auto a = tokenizer.encode_full(pool.sentence(draw.first), opts);
    auto b = tokenizer.encode_full(pool.sentence(draw.second), opts);
    SentencePairExample ex{std::move(a.ids), std::move(b.ids), std::move(a.word_spans), std::move(b.word_spans), draw};
    while (ex.length() > max_len) {
        if (ex.tokens_a.size() >= ex.tokens_b.size()) {
            ex.tokens_a.pop_back();
        } else {
            ex.tokens_b.pop_back();
        }
    }
    detail::clip_spans(ex.spans_a, ex.tokens_a.size());
    detail::clip_spans(ex.spans_b, ex.tokens_b.size());
    return ex;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

struct LossResult {
    double loss = 0.0;
    std::size_t count = 0; ///< number of contributing rows
    bool empty = false;    ///< no labelled rows; loss reported as 0
};

/// Mean softmax cross-entropy over the rows whose label is not kIgnore.
/// `logits` is rows x classes, row-major. When `grad` is given it receives
/// d(scale * loss)/d(logits), with zeros on ignored rows.
template <class T>
LossResult cross_entropy(std::span<const T> logits, std::size_t classes, std::span<const TokenId> labels,
                         std::vector<T>* grad = nullptr, double scale = 1.0) {
    if (classes == 0 || logits.size() != labels.size() * classes) {
        throw ShapeError("cross-entropy: logits have " + std::to_string(logits.size()) + " values for " +
                         std::to_string(labels.size()) + " labels of " + std::to_string(classes) + " classes");
    }
    if (grad != nullptr) {
        grad->assign(logits.size(), T{0});
    }
    LossResult res;
    for (const TokenId y : labels) {
        if (y != kIgnore) {
            if (y < 0 || static_cast<std::size_t>(y) >= classes) {
                throw ConfigError("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
            }
            ++res.count;
        }
    }
    if (res.count == 0) {
        res.empty = true;
        return res;
    }
    const double inv = 1.0 / static_cast<double>(res.count);
    double total = 0.0;
    for (std::size_t r = 0; r < labels.size(); ++r) {
        if (labels[r] == kIgnore) {
            continue;
        }
        const T* row = logits.data() + r * classes;
        double mx = -INFINITY;
        for (std::size_t c = 0; c < classes; ++c) {
            if (!std::isfinite(row[c])) {
                throw NumericError("non-finite logit at row " + std::to_string(r) + ", class " + std::to_string(c));
            }
            mx = std::max(mx, static_cast<double>(row[c]));
        }
        double sum = 0.0;
        for (std::size_t c = 0; c < classes; ++c) {
            sum += std::exp(static_cast<double>(row[c]) - mx);
        }
        const double log_z = mx + std::log(sum);
        total += log_z - static_cast<double>(row[static_cast<std::size_t>(labels[r])]);
        if (grad != nullptr) {
            T* g = grad->data() + r * classes;
            for (std::size_t c = 0; c < classes; ++c) {
                double p = std::exp(static_cast<double>(row[c]) - log_z);
                if (c == static_cast<std::size_t>(labels[r])) {
                    p -= 1.0;
                }
                g[c] = static_cast<T>(p * inv * scale);
            }
        }
    }
    res.loss = total * inv;
    return res;
}

template <class T>
LossResult mlm_loss(std::span<const T> logits, std::size_t vocab_size, std::span<const TokenId> labels,
                    std::vector<T>* grad = nullptr, double scale = 1.0) {
    return cross_entropy(logits, vocab_size, labels, grad, scale);
}

/// Batch-mean three-way cross-entropy over SSO logits (rows x 3).
template <class T>
LossResult sso_loss(std::span<const T> logits, std::span<const TokenId> labels, std::vector<T>* grad = nullptr,
                    double scale = 1.0) {
    return cross_entropy(logits, kSsoClasses, labels, grad, scale);
}

struct LossWeights {
    double alpha = 0.1; ///< SSO weight
};

inline double combined_loss(double l_mlm, double l_sso, LossWeights w) {
    return l_mlm + w.alpha * l_sso;
}

} // namespace herbert
