#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "herbert/checkpoint.hpp"
#include "herbert/error.hpp"
#include "herbert/model.hpp"
#include "herbert/objectives.hpp"
#include "herbert/rng.hpp"
#include "herbert/tensor.hpp"
#include "herbert/tokenizer.hpp"

namespace herbert {

// ---------------------------------------------------------------------------
// Learning-rate schedules
// ---------------------------------------------------------------------------

/// Linear segment over steps (start, end]. Flags toggle BPE-dropout and model
/// dropout while the segment is active.
struct ScheduleSegment {
    std::size_t start = 0;
    std::size_t end = 0;
    double lr_start = 0.0;
    double lr_end = 0.0;
    bool bpe_dropout = true;
    bool model_dropout = true;

    bool operator==(const ScheduleSegment&) const = default;
};

struct PhaseFlags {
    bool bpe_dropout = true;
    bool model_dropout = true;
};

/// Linear warmup from 0 to the first segment's start rate, then contiguous
/// linear segments. The rate at a boundary step belongs to the earlier
/// segment.
struct ScheduleSpec {
    std::size_t warmup_steps = 0;
    std::vector<ScheduleSegment> segments;

    void validate() const {
        if (segments.empty()) {
            throw ConfigError("schedule has no segments");
        }
        if (segments.front().start != warmup_steps) {
            throw ConfigError("first schedule segment must start where warmup ends (step " +
                              std::to_string(warmup_steps) + ")");
        }
        for (std::size_t i = 0; i < segments.size(); ++i) {
            const auto& s = segments[i];
            if (s.end <= s.start) {
                throw ConfigError("schedule segment " + std::to_string(i) + " is empty");
            }
            if (i > 0 && s.start != segments[i - 1].end) {
                throw ConfigError("schedule segment " + std::to_string(i) + " is not contiguous");
            }
            if (!(s.lr_start >= 0.0) || !(s.lr_end >= 0.0) || !std::isfinite(s.lr_start) ||
                !std::isfinite(s.lr_end)) {
                throw ConfigError("schedule rates must be finite and non-negative");
            }
        }
    }

    std::size_t total_steps() const { return segments.empty() ? warmup_steps : segments.back().end; }

    /// Learning rate applied at optimizer step `step` (1-based; 0 gives 0).
    double lr_at(std::size_t step) const {
        validate();
        if (step > total_steps()) {
            throw ConfigError("step " + std::to_string(step) + " beyond schedule end " +
                              std::to_string(total_steps()));
        }
        if (warmup_steps > 0 && step <= warmup_steps) {
            return segments.front().lr_start * (static_cast<double>(step) / static_cast<double>(warmup_steps));
        }
        const ScheduleSegment& s = segment_at(step);
        const double f =
            static_cast<double>(step - s.start) / static_cast<double>(s.end - s.start);
        return s.lr_start * (1.0 - f) + s.lr_end * f;
    }

    /// Active flags; warmup uses the first segment's flags.
    PhaseFlags flags_at(std::size_t step) const {
        if (step > total_steps()) {
            throw ConfigError("step " + std::to_string(step) + " beyond schedule end " +
                              std::to_string(total_steps()));
        }
        const ScheduleSegment& s = step <= warmup_steps ? segments.front() : segment_at(step);
        return {s.bpe_dropout, s.model_dropout};
    }

    bool operator==(const ScheduleSpec&) const = default;

private:
    const ScheduleSegment& segment_at(std::size_t step) const {
        for (const auto& s : segments) {
            if (step <= s.end) {
                return s;
            }
        }
        return segments.back();
    }
};

inline const std::vector<std::string>& schedule_preset_names() {
    static const std::vector<std::string> names{"ablation-10k", "ablation-50k", "herbert-base-50k",
                                                "herbert-large-60k"};
    return names;
}

inline ScheduleSpec schedule_preset(const std::string& name) {
    if (name == "ablation-10k") {
        return {500, {{500, 10000, 7e-4, 0.0, true, true}}};
    }
    if (name == "ablation-50k" || name == "herbert-base-50k") {
        return {500, {{500, 50000, 3e-4, 0.0, true, true}}};
    }
    if (name == "herbert-large-60k") {
        return {500,
                {{500, 15000, 3e-4, 2.5e-4, true, true},
                 {15000, 40000, 1e-4, 7e-5, true, true},
                 {40000, 60000, 3e-5, 0.0, false, false}}};
    }
    std::string known;
    for (const auto& n : schedule_preset_names()) {
        known += " " + n;
    }
    throw ConfigError("unknown schedule '" + name + "'; known presets:" + known);
}

/// Same shape on a shorter or longer run: every boundary is multiplied by
/// `factor` and rounded, keeping at least one step per part.
inline ScheduleSpec scale_schedule(const ScheduleSpec& spec, double factor) {
    if (!(factor > 0.0) || !std::isfinite(factor)) {
        throw ConfigError("schedule scale must be positive");
    }
    spec.validate();
    const auto scale = [&](std::size_t s) { return static_cast<std::size_t>(std::llround(s * factor)); };
    ScheduleSpec out{scale(spec.warmup_steps), spec.segments};
    std::size_t prev = out.warmup_steps;
    for (auto& seg : out.segments) {
        seg.start = prev;
        seg.end = std::max(scale(seg.end), prev + 1);
        prev = seg.end;
    }
    return out;
}

/// Rescales `spec` so that it ends exactly at `total` steps.
inline ScheduleSpec resize_schedule(const ScheduleSpec& spec, std::size_t total) {
    if (total < spec.segments.size() + (spec.warmup_steps > 0 ? 1 : 0)) {
        throw ConfigError("total_steps " + std::to_string(total) + " is too short for the schedule");
    }
    ScheduleSpec out = scale_schedule(spec, static_cast<double>(total) / static_cast<double>(spec.total_steps()));
    // boundaries: warmup end, then each segment end. Rounding may leave the
    // last one off or squeeze a part to nothing, so pin the end and repair.
    std::vector<std::size_t> bounds{out.warmup_steps};
    for (const auto& seg : out.segments) {
        bounds.push_back(seg.end);
    }
    bounds.back() = total;
    for (std::size_t i = bounds.size() - 1; i-- > 0;) {
        bounds[i] = std::min(bounds[i], bounds[i + 1] - 1);
    }
    bounds[0] = spec.warmup_steps > 0 ? std::max<std::size_t>(bounds[0], 1) : 0;
    for (std::size_t i = 1; i < bounds.size(); ++i) {
        bounds[i] = std::max(bounds[i], bounds[i - 1] + 1);
    }
    out.warmup_steps = bounds[0];
    for (std::size_t i = 0; i < out.segments.size(); ++i) {
        out.segments[i].start = bounds[i];
        out.segments[i].end = bounds[i + 1];
    }
    out.validate();
    return out;
}

namespace detail {

inline bool parse_switch(const std::string& s) {
    if (s == "on" || s == "1" || s == "true") {
        return true;
    }
    if (s == "off" || s == "0" || s == "false") {
        return false;
    }
    throw ConfigError("expected on/off, got '" + s + "'");
}

inline double parse_double(const std::string& s, const std::string& what) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != s.size() || s.empty()) {
        throw ConfigError(what + ": '" + s + "' is not a number");
    }
    return v;
}

inline std::size_t parse_size(const std::string& s, const std::string& what) {
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
        v = std::stoull(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != s.size() || s.empty() || s.front() == '-') {
        throw ConfigError(what + ": '" + s + "' is not a non-negative integer");
    }
    return static_cast<std::size_t>(v);
}

} // namespace detail

/// Preset name, or inline "warmup W | start end lr0 lr1 bpe drop | ...".
inline ScheduleSpec parse_schedule(const std::string& text) {
    if (text.find('|') == std::string::npos && text.find("warmup") == std::string::npos) {
        return schedule_preset(text);
    }
    ScheduleSpec spec;
    std::istringstream parts(text);
    bool first = true;
    for (std::string part; std::getline(parts, part, '|');) {
        std::istringstream fields(part);
        std::vector<std::string> f;
        for (std::string w; fields >> w;) {
            f.push_back(w);
        }
        if (first) {
            if (f.size() != 2 || f[0] != "warmup") {
                throw ConfigError("inline schedule must begin with 'warmup N'");
            }
            spec.warmup_steps = detail::parse_size(f[1], "warmup");
            first = false;
            continue;
        }
        if (f.size() != 6) {
            throw ConfigError("schedule segment needs 'start end lr_start lr_end bpe_dropout model_dropout'");
        }
        spec.segments.push_back({detail::parse_size(f[0], "segment start"), detail::parse_size(f[1], "segment end"),
                                 detail::parse_double(f[2], "lr_start"), detail::parse_double(f[3], "lr_end"),
                                 detail::parse_switch(f[4]), detail::parse_switch(f[5])});
    }
    spec.validate();
    return spec;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <class T>
struct AdamState {
    TensorMap<T> m;
    TensorMap<T> v;
    std::uint64_t step = 0;
};

/// One bias-corrected Adam update of every tensor that has a gradient.
/// Tensors named in `frozen` are skipped. Non-finite gradients abort before
/// any parameter changes.
template <class T>
void adam_step(TensorMap<T>& params, const TensorMap<T>& grads, AdamState<T>& state, double lr,
               const AdamHyper& hyper = {}, const std::set<std::string>* frozen = nullptr) {
    for (const auto& [name, g] : grads) {
        const auto it = params.find(name);
        if (it == params.end()) {
            throw ShapeError("gradient for unknown parameter " + name);
        }
        if (it->second.shape != g.shape) {
            throw ShapeError("gradient " + name + " has shape " + shape_string(g.shape) + ", parameter has " +
                             shape_string(it->second.shape));
        }
        if (!g.all_finite()) {
            throw NumericError("non-finite gradient in " + name);
        }
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(hyper.beta1, t);
    const double bc2 = 1.0 - std::pow(hyper.beta2, t);
    for (const auto& [name, g] : grads) {
        if (frozen != nullptr && frozen->count(name) != 0) {
            continue;
        }
        Tensor<T>& p = params.at(name);
        auto [mit, m_new] = state.m.try_emplace(name, p.shape);
        auto [vit, v_new] = state.v.try_emplace(name, p.shape);
        auto& m = mit->second.data;
        auto& v = vit->second.data;
        for (std::size_t i = 0; i < p.data.size(); ++i) {
            const double gi = static_cast<double>(g.data[i]);
            const double mi = hyper.beta1 * static_cast<double>(m[i]) + (1.0 - hyper.beta1) * gi;
            const double vi = hyper.beta2 * static_cast<double>(v[i]) + (1.0 - hyper.beta2) * gi * gi;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            const double update = lr * (mi / bc1) / (std::sqrt(vi / bc2) + hyper.eps);
            p.data[i] = static_cast<T>(static_cast<double>(p.data[i]) - update);
        }
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <class T>
double clip_grad_norm(TensorMap<T>& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& [name, g] : grads) {
        for (const T x : g.data) {
            sq += static_cast<double>(x) * static_cast<double>(x);
        }
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / norm;
        for (auto& [name, g] : grads) {
            for (T& x : g.data) {
                x = static_cast<T>(static_cast<double>(x) * s);
            }
        }
    }
    return norm;
}

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

/// Draws SSO sentence pairs, encodes them (optionally with BPE-dropout),
/// applies whole-word masking and packs them into a padded batch. Every
/// example uses its own stream keyed by (seed, step, index).
class BatchBuilder {
public:
    BatchBuilder(const Tokenizer& tokenizer, const SentencePool& pool, std::size_t max_seq_len,
                 double mask_rate = 0.15)
        : tokenizer_(&tokenizer), pool_(&pool), max_seq_len_(max_seq_len) {
        if (pool.documents() == 0 || pool.total_sentences() == 0) {
            throw ConfigError("pretraining corpus has no sentences");
        }
        const Vocab& v = tokenizer.vocab();
        mask_.rate = mask_rate;
        mask_.mask_id = v.mask_id();
        mask_.unk_id = v.unk_id();
        mask_.vocab_size = v.size();
        mask_.num_specials = v.num_specials();
    }

    const MaskingSpec& masking() const { return mask_; }

    SentencePairExample draw_pair(Rng& rng, double bpe_dropout) const {
        constexpr int kAttempts = 10000;
        for (int attempt = 0; attempt < kAttempts; ++attempt) {
            const std::size_t doc = rng.below(pool_->documents());
            const auto draw = sample_sso_pair(*pool_, doc, rng);
            if (!draw) {
                continue;
            }
            EncodeOptions enc{bpe_dropout, &rng};
            auto ex = build_pair_example(*draw, *pool_, *tokenizer_, enc, max_seq_len_);
            if (ex.tokens_a.empty() && ex.tokens_b.empty()) {
                continue;
            }
            return ex;
        }
        throw ConfigError("could not draw a usable sentence pair; the corpus needs multi-sentence documents");
    }

    Batch build(std::size_t batch_size, std::uint64_t seed, std::uint64_t step, double bpe_dropout) const {
        if (batch_size == 0) {
            throw ConfigError("batch size must be positive");
        }
        std::vector<MaskedExample> examples;
        std::vector<std::vector<TokenId>> types;
        std::vector<TokenId> sso;
        std::size_t longest = 0;
        for (std::size_t e = 0; e < batch_size; ++e) {
            Rng rng = Rng::stream(seed, "example", step, e);
            const auto pair = draw_pair(rng, bpe_dropout);
            const auto ids = pair.input_ids(tokenizer_->vocab());
            const auto spans = pair.word_spans();
            examples.push_back(whole_word_mask(ids, spans, rng, mask_));
            types.push_back(pair.token_type_ids());
            sso.push_back(static_cast<TokenId>(pair.sso_label()));
            longest = std::max(longest, ids.size());
        }
        Batch b;
        b.size = batch_size;
        b.seq_len = longest;
        b.input_ids.assign(batch_size * longest, tokenizer_->vocab().pad_id());
        b.token_type_ids.assign(batch_size * longest, 0);
        b.attention_mask.assign(batch_size * longest, 0);
        b.mlm_labels.assign(batch_size * longest, kIgnore);
        b.sso_labels = std::move(sso);
        for (std::size_t e = 0; e < batch_size; ++e) {
            const auto& ex = examples[e];
            for (std::size_t i = 0; i < ex.input_ids.size(); ++i) {
                b.input_ids[e * longest + i] = ex.input_ids[i];
                b.token_type_ids[e * longest + i] = types[e][i];
                b.attention_mask[e * longest + i] = 1;
                b.mlm_labels[e * longest + i] = ex.labels[i];
            }
        }
        return b;
    }

private:
    const Tokenizer* tokenizer_;
    const SentencePool* pool_;
    std::size_t max_seq_len_;
    MaskingSpec mask_;
};

/// Packs a batch into the checkpoint container. Integers are stored as f32,
/// exact for ids below 2^24.
inline TensorMap<float> pack_batch(const Batch& b) {
    const auto as_tensor = [](Shape shape, const auto& values) {
        Tensor<float> t(std::move(shape));
        for (std::size_t i = 0; i < values.size(); ++i) {
            t.data[i] = static_cast<float>(values[i]);
        }
        return t;
    };
    const Shape bs{b.size, b.seq_len};
    TensorMap<float> out;
    out.emplace("input_ids", as_tensor(bs, b.input_ids));
    out.emplace("token_type_ids", as_tensor(bs, b.token_type_ids));
    out.emplace("labels", as_tensor(bs, b.mlm_labels));
    out.emplace("attention_mask", as_tensor(bs, b.attention_mask));
    out.emplace("sso_labels", as_tensor({b.size}, b.sso_labels));
    return out;
}

inline Batch unpack_batch(const TensorMap<float>& t) {
    for (const char* name : {"input_ids", "token_type_ids", "labels", "attention_mask", "sso_labels"}) {
        if (t.count(name) == 0) {
            throw FormatError(std::string("packed batch lacks tensor ") + name);
        }
    }
    const auto& ids = t.at("input_ids");
    if (ids.shape.size() != 2) {
        throw FormatError("packed input_ids must be rank 2");
    }
    Batch b;
    b.size = ids.shape[0];
    b.seq_len = ids.shape[1];
    const auto take = [&](const char* name, const Shape& shape, auto& dst) {
        const auto& src = t.at(name);
        if (src.shape != shape) {
            throw FormatError(std::string("packed ") + name + " has shape " + shape_string(src.shape));
        }
        dst.resize(src.data.size());
        for (std::size_t i = 0; i < src.data.size(); ++i) {
            dst[i] = static_cast<std::remove_reference_t<decltype(dst[0])>>(src.data[i]);
        }
    };
    take("input_ids", ids.shape, b.input_ids);
    take("token_type_ids", ids.shape, b.token_type_ids);
    take("labels", ids.shape, b.mlm_labels);
    take("attention_mask", ids.shape, b.attention_mask);
    take("sso_labels", {b.size}, b.sso_labels);
    return b;
}

// ---------------------------------------------------------------------------
// Training configuration
// ---------------------------------------------------------------------------

enum class InitMode { Random, Transfer, Checkpoint };

struct TrainConfig {
    std::uint64_t seed = 0;
    std::size_t batch_size = 32;
    std::string schedule_name = "ablation-10k";
    std::size_t total_steps = 0; ///< 0: the schedule's own length; otherwise the schedule is rescaled
    double alpha = 0.1;         ///< SSO loss weight
    double bpe_dropout = 0.1;   ///< applied in phases whose flag is on
    double mask_rate = 0.15;
    double grad_clip = 0.0;     ///< 0 disables clipping
    std::size_t log_every = 1;
    std::size_t checkpoint_every = 0; ///< 0: final checkpoint only
    ModelConfig model;          ///< vocab_size comes from the tokenizer

    InitMode init = InitMode::Random;
    std::string init_checkpoint;   ///< init = checkpoint
    std::string donor_checkpoint;  ///< init = transfer
    std::string donor_tokenizer;   ///< init = transfer
    std::string token_type_donor;  ///< optional checkpoint providing embeddings.token_type
    std::string special_map;       ///< optional special-token map file

    std::string tokenizer;              ///< vocab.txt/merges.txt directory
    std::size_t vocab_size = 0;         ///< no tokenizer given: train one of this size on the corpus
    std::vector<std::string> corpora;   ///< corpus files; empty: synthetic corpus
    std::string corpus_format = "plain";
    std::string synthetic_preset = "small";
    std::size_t synthetic_docs = 400;
    std::uint64_t synthetic_seed = 1;

    ScheduleSpec schedule() const {
        ScheduleSpec s = parse_schedule(schedule_name);
        if (total_steps == 0 || total_steps == s.total_steps()) {
            return s;
        }
        return resize_schedule(s, total_steps);
    }
};

inline InitMode parse_init_mode(const std::string& s) {
    if (s == "random") {
        return InitMode::Random;
    }
    if (s == "transfer") {
        return InitMode::Transfer;
    }
    if (s == "checkpoint") {
        return InitMode::Checkpoint;
    }
    throw ConfigError("init must be random, transfer or checkpoint, got '" + s + "'");
}

/// `key = value` lines; '#' starts a comment. Relative paths are resolved
/// against `base_dir`.
inline TrainConfig parse_train_config(const std::string& text, const std::filesystem::path& base_dir = {}) {
    using detail::parse_double;
    using detail::parse_size;
    TrainConfig c;
    const auto path_of = [&](const std::string& v) {
        const std::filesystem::path p(v);
        return (p.is_relative() && !base_dir.empty() ? base_dir / p : p).string();
    };
    std::istringstream in(text);
    std::size_t line_no = 0;
    for (std::string line; std::getline(in, line);) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) {
            line.erase(hash);
        }
        const std::string trimmed = detail::trim(line);
        if (trimmed.empty()) {
            continue;
        }
        const auto eq = trimmed.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
        }
        const std::string key = detail::trim(trimmed.substr(0, eq));
        const std::string val = detail::trim(trimmed.substr(eq + 1));
        const std::string where = "config line " + std::to_string(line_no) + " (" + key + ")";
        if (key == "seed") {
            c.seed = parse_size(val, where);
        } else if (key == "batch_size") {
            c.batch_size = parse_size(val, where);
        } else if (key == "schedule") {
            c.schedule_name = val;
        } else if (key == "total_steps") {
            c.total_steps = parse_size(val, where);
        } else if (key == "alpha") {
            c.alpha = parse_double(val, where);
        } else if (key == "bpe_dropout") {
            c.bpe_dropout = parse_double(val, where);
        } else if (key == "mask_rate") {
            c.mask_rate = parse_double(val, where);
        } else if (key == "grad_clip") {
            c.grad_clip = parse_double(val, where);
        } else if (key == "log_every") {
            c.log_every = parse_size(val, where);
        } else if (key == "checkpoint_every") {
            c.checkpoint_every = parse_size(val, where);
        } else if (key == "layers") {
            c.model.layers = parse_size(val, where);
        } else if (key == "heads") {
            c.model.heads = parse_size(val, where);
        } else if (key == "hidden") {
            c.model.hidden = parse_size(val, where);
        } else if (key == "ff_dim") {
            c.model.ff_dim = parse_size(val, where);
        } else if (key == "max_positions") {
            c.model.max_positions = parse_size(val, where);
        } else if (key == "max_seq_len") {
            c.model.max_seq_len = parse_size(val, where);
        } else if (key == "dropout") {
            c.model.dropout_rate = parse_double(val, where);
        } else if (key == "init") {
            c.init = parse_init_mode(val);
        } else if (key == "init_checkpoint") {
            c.init_checkpoint = path_of(val);
        } else if (key == "donor_checkpoint") {
            c.donor_checkpoint = path_of(val);
        } else if (key == "donor_tokenizer") {
            c.donor_tokenizer = path_of(val);
        } else if (key == "token_type_donor") {
            c.token_type_donor = path_of(val);
        } else if (key == "special_map") {
            c.special_map = path_of(val);
        } else if (key == "tokenizer") {
            c.tokenizer = path_of(val);
        } else if (key == "vocab_size") {
            c.vocab_size = parse_size(val, where);
        } else if (key == "corpus") {
            c.corpora.push_back(path_of(val));
        } else if (key == "corpus_format") {
            c.corpus_format = val;
        } else if (key == "synthetic_preset") {
            c.synthetic_preset = val;
        } else if (key == "synthetic_docs") {
            c.synthetic_docs = parse_size(val, where);
        } else if (key == "synthetic_seed") {
            c.synthetic_seed = parse_size(val, where);
        } else {
            throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
        }
    }
    if (c.batch_size == 0) {
        throw ConfigError("batch_size must be positive");
    }
    if (c.log_every == 0) {
        throw ConfigError("log_every must be positive");
    }
    if (!(c.bpe_dropout >= 0.0 && c.bpe_dropout < 1.0)) {
        throw ConfigError("bpe_dropout must lie in [0, 1)");
    }
    c.schedule(); // validates
    return c;
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot read config " + path.string());
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_train_config(ss.str(), path.parent_path());
}

// ---------------------------------------------------------------------------
// Pretraining loop
// ---------------------------------------------------------------------------

struct MetricsRow {
    std::size_t step = 0;
    double lr = 0.0;
    double mlm_loss = 0.0;
    double sso_loss = 0.0;
    double combined_loss = 0.0;
};

inline const char* kMetricsHeader = "step,lr,mlm_loss,sso_loss,combined_loss";

inline std::string format_metrics_row(const MetricsRow& r) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g", r.step, r.lr, r.mlm_loss, r.sso_loss,
                  r.combined_loss);
    return buf;
}

struct StepResult {
    MetricsRow metrics;
    double grad_norm = 0.0;
};

/// Forward, losses, backward and one Adam update for a single batch.
inline StepResult train_step(const ModelConfig& config, TensorMap<float>& params, AdamState<float>& adam,
                             const Batch& batch, double lr, double alpha, bool model_dropout,
                             std::uint64_t dropout_seed, double grad_clip = 0.0) {
    ForwardOptions fo{true, model_dropout ? config.dropout_rate : 0.0, dropout_seed};
    auto out = forward(config, params, batch, fo);
    std::vector<float> g_mlm, g_sso;
    const auto mlm = mlm_loss<float>(out.mlm_logits, config.vocab_size, batch.mlm_labels, &g_mlm, 1.0);
    const auto sso = sso_loss<float>(out.sso_logits, batch.sso_labels, &g_sso, alpha);
    const double combined = combined_loss(mlm.loss, sso.loss, {alpha});
    if (!std::isfinite(combined)) {
        throw NumericError("non-finite loss");
    }
    auto grads = backward<float>(out, config, params, g_mlm, g_sso);
    StepResult r;
    r.grad_norm = clip_grad_norm(grads, grad_clip);
    adam_step(params, grads, adam, lr);
    r.metrics = {adam.step, lr, mlm.loss, sso.loss, combined};
    return r;
}

struct PretrainResult {
    TensorMap<float> params;
    std::vector<MetricsRow> metrics;
    std::size_t steps = 0;
};

struct PretrainOutput {
    std::filesystem::path dir;          ///< empty: keep everything in memory
    std::function<void(const MetricsRow&)> on_log; ///< optional progress hook
};

/// Runs the whole schedule. With an output directory, metrics.csv is written
/// as training proceeds, periodic checkpoints go to step-N.ckpt and the final
/// weights to model.ckpt. On a non-finite loss or gradient the last good
/// weights are saved to last-good.ckpt before the error propagates.
inline PretrainResult pretrain(const ModelConfig& config, TensorMap<float> params, const Tokenizer& tokenizer,
                               const SentencePool& pool, const TrainConfig& tc, const PretrainOutput& output = {}) {
    config.validate();
    validate_params(config, params);
    if (config.vocab_size != tokenizer.vocab().size()) {
        throw ConfigError("model vocab size " + std::to_string(config.vocab_size) + " differs from tokenizer vocab " +
                          std::to_string(tokenizer.vocab().size()));
    }
    const ScheduleSpec schedule = tc.schedule();
    const BatchBuilder builder(tokenizer, pool, config.max_seq_len, tc.mask_rate);

    std::ofstream csv;
    if (!output.dir.empty()) {
        std::filesystem::create_directories(output.dir);
        csv.open(output.dir / "metrics.csv");
        if (!csv) {
            throw IoError("cannot write " + (output.dir / "metrics.csv").string());
        }
        csv << kMetricsHeader << '\n';
    }

    PretrainResult result;
    AdamState<float> adam;
    const std::size_t total = schedule.total_steps();
    for (std::size_t step = 1; step <= total; ++step) {
        const PhaseFlags flags = schedule.flags_at(step);
        const double lr = schedule.lr_at(step);
        const Batch batch = builder.build(tc.batch_size, tc.seed, step, flags.bpe_dropout ? tc.bpe_dropout : 0.0);
        StepResult sr;
        try {
            TensorMap<float> before;
            if (!output.dir.empty()) {
                before = params;
            }
            try {
                sr = train_step(config, params, adam, batch, lr, tc.alpha, flags.model_dropout,
                                derive_seed(tc.seed, "dropout", step), tc.grad_clip);
            } catch (const NumericError&) {
                if (!output.dir.empty()) {
                    save_model(output.dir / "last-good.ckpt", config, before);
                }
                throw;
            }
        } catch (const NumericError& e) {
            throw NumericError("step " + std::to_string(step) + ": " + e.what());
        }
        if (step % tc.log_every == 0 || step == total) {
            result.metrics.push_back(sr.metrics);
            if (csv.is_open()) {
                csv << format_metrics_row(sr.metrics) << '\n';
                csv.flush();
            }
            if (output.on_log) {
                output.on_log(sr.metrics);
            }
        }
        if (!output.dir.empty() && tc.checkpoint_every > 0 && step % tc.checkpoint_every == 0 && step != total) {
            save_model(output.dir / ("step-" + std::to_string(step) + ".ckpt"), config, params);
        }
    }
    if (!output.dir.empty()) {
        save_model(output.dir / "model.ckpt", config, params);
    }
    result.steps = total;
    result.params = std::move(params);
    return result;
}

} // namespace herbert
