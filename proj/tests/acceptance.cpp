// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <sys/wait.h>

#include "oracles.hpp"
#include "support.hpp"

using namespace herbert;
using herbert::fixtures::read_file;
using herbert::fixtures::TempDir;

namespace {

const std::string B = kBoundary;

/// Failed checks are collected rather than thrown so one line can list them.
class Checker {
public:
    void expect(bool ok, const std::string& what) {
        if (!ok) {
            failures_.push_back(what);
        }
    }
    void note(const std::string& s) { notes_.push_back(s); }
    bool ok() const { return failures_.empty(); }
    std::string summary() const {
        std::string s;
        for (const auto& f : failures_) {
            s += (s.empty() ? "" : "; ") + f;
        }
        for (const auto& n : notes_) {
            s += (s.empty() ? "" : "; ") + n;
        }
        return s;
    }

private:
    std::vector<std::string> failures_;
    std::vector<std::string> notes_;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<std::string> piece_strings(const Tokenizer& tok, const std::vector<TokenId>& ids) {
    std::vector<std::string> out;
    for (const TokenId id : ids) {
        out.push_back(tok.vocab().token(id));
    }
    return out;
}

/// Marker-prefixed symbol sequence of a fixture word, built from raw bytes.
std::vector<std::string> word_symbols(const std::string& word) {
    const bool initial = word.rfind(B, 0) == 0;
    auto s = oracle::utf8_chars(initial ? word.substr(B.size()) : word);
    if (initial) {
        s.front() = B + s.front();
    }
    return s;
}

/// 100 distinct words in encounter order from documents the tokenizer never saw.
std::vector<std::string> fixture_words() {
    std::vector<std::string> words;
    std::set<std::string> seen;
    for (const auto& d : fixtures::toy_documents(200, 1234)) {
        for (const auto& w : pretokenize(d.text)) {
            const std::string key = (w.word_initial ? B : "") + w.text;
            if (seen.insert(key).second) {
                words.push_back(key);
                if (words.size() == 100) {
                    return words;
                }
            }
        }
    }
    return words;
}

// ---------------------------------------------------------------------------

void tokenizer_fidelity(Checker& c) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto docs = fixtures::toy_documents(1000, 11);
    const Tokenizer tok =
        train_bpe(DocumentStream::from_vector(std::vector<Document>(docs.begin(), docs.begin() + 300)), 500).tokenizer;
    const auto words = fixture_words();
    c.expect(words.size() == 100, "fixture has " + std::to_string(words.size()) + " words");
    std::size_t mismatches = 0;
    for (const auto& w : words) {
        const auto symbols = word_symbols(w);
        if (piece_strings(tok, tok.encode_word(symbols)) != oracle::bpe_segment(symbols, tok.merges().merges)) {
            ++mismatches;
        }
    }
    c.expect(mismatches == 0, std::to_string(mismatches) + " fixture words differ from the greedy-merge oracle");
    std::size_t round_trip_failures = 0;
    for (const auto& d : docs) {
        round_trip_failures += tok.decode(tok.encode(d.text)) == d.text ? 0 : 1;
    }
    c.expect(round_trip_failures == 0, std::to_string(round_trip_failures) + " of 1000 documents fail decode(encode)");
    const double secs = seconds_since(t0);
    c.expect(secs < 5.0, "runtime " + fmt("%.2f", secs) + " s exceeds 5 s");
    c.note("100 words, 1000 docs, " + fmt("%.2f", secs) + " s");
}

void bpe_dropout_limits(Checker& c) {
    const Tokenizer tok = fixtures::toy_tokenizer(500, 11, 300);
    Rng rng(77);
    std::size_t non_base = 0;
    for (const auto& w : fixture_words()) {
        for (const auto& piece : piece_strings(tok, tok.encode_word(word_symbols(w), {1.0, &rng}))) {
            const std::string body = piece.rfind(B, 0) == 0 ? piece.substr(B.size()) : piece;
            non_base += utf8::length(body) == 1 ? 0 : 1;
        }
    }
    c.expect(non_base == 0, std::to_string(non_base) + " merged pieces at p=1");

    const Tokenizer one = fixtures::make_tokenizer({B + "a", "b", B + "ab"}, {{B + "a", "b"}});
    Rng mc(2024);
    const int trials = 100000;
    int dropped = 0;
    for (int i = 0; i < trials; ++i) {
        dropped += one.encode("ab", {0.1, &mc}).size() == 2 ? 1 : 0;
    }
    const double freq = dropped / static_cast<double>(trials);
    c.expect(std::fabs(freq - 0.1) <= 0.01, "drop frequency " + fmt("%.4f", freq));
    c.note("drop frequency " + fmt("%.4f", freq));
}

DonorModel gaussian_donor(Tokenizer tok, std::uint64_t seed) {
    ModelConfig cfg = fixtures::tiny_config(tok.vocab().size());
    cfg.hidden = 8;
    cfg.ff_dim = 16;
    auto params = init_params<float>(cfg, seed);
    Rng rng(seed);
    for (auto& x : params.at("embeddings.word").data) {
        x = static_cast<float>(rng.normal(0.0, 1.0));
    }
    return DonorModel{std::move(tok), cfg, std::move(params)};
}

void transfer_correctness(Checker& c) {
    const DonorModel donor = gaussian_donor(fixtures::toy_tokenizer(320, 21, 200, "large"), 5);
    {
        const auto [emb, report] = transfer_embeddings(donor, donor.tokenizer, 3);
        c.expect(emb.shape == donor.embeddings().shape &&
                     std::memcmp(emb.data.data(), donor.embeddings().data.data(), emb.data.size() * sizeof(float)) == 0,
                 "identity transfer is not bit-identical");
        c.expect(report.direct_copies == donor.tokenizer.vocab().size(), "identity transfer not all direct");
    }
    auto docs = fixtures::toy_documents(120, 22, "small");
    docs.push_back({"x1", "odd", "Ωmega жук Ωмега жжж жук Ωmega"});
    const Tokenizer target = train_bpe(DocumentStream::from_vector(docs), 200).tokenizer;
    c.expect(target.vocab().size() == 200, "target vocab has " + std::to_string(target.vocab().size()) + " tokens");
    const auto [emb, report] = transfer_embeddings(donor, target, 77);
    double max_diff = 0.0;
    std::size_t kind_mismatch = 0;
    std::size_t kinds[3] = {0, 0, 0};
    for (std::size_t r = 0; r < target.vocab().size(); ++r) {
        const auto id = static_cast<TokenId>(r);
        const auto want = oracle::transfer_row(donor, target.vocab().token(id), target.vocab().is_special(id));
        ++kinds[want.kind];
        kind_mismatch += static_cast<int>(report.tokens.at(r).kind) == want.kind ? 0 : 1;
        for (std::size_t j = 0; j < want.row.size(); ++j) {
            max_diff = std::max(max_diff, std::fabs(static_cast<double>(emb.row(r)[j]) - want.row[j]));
        }
    }
    c.expect(kind_mismatch == 0, std::to_string(kind_mismatch) + " tokens in the wrong category");
    c.expect(max_diff <= 1e-7, "max abs diff " + fmt("%.3g", max_diff));
    std::set<TokenId> ids;
    for (const auto& t : report.tokens) {
        ids.insert(t.id);
    }
    c.expect(ids.size() == target.vocab().size() && report.tokens.size() == target.vocab().size(),
             "report does not list every token exactly once");
    c.expect(report.direct_copies + report.averaged + report.fallback_random == target.vocab().size() &&
                 report.direct_copies == kinds[0] && report.averaged == kinds[1] &&
                 report.fallback_random == kinds[2],
             "category counts do not partition the vocabulary");
    c.note("direct " + std::to_string(kinds[0]) + ", averaged " + std::to_string(kinds[1]) + ", fallback " +
           std::to_string(kinds[2]) + ", max diff " + fmt("%.2g", max_diff));
}

void gradient_exactness(Checker& c) {
    const auto t0 = std::chrono::steady_clock::now();
    ModelConfig cfg;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.hidden = 8;
    cfg.ff_dim = 32;
    cfg.vocab_size = 50;
    cfg.max_positions = 6;
    cfg.max_seq_len = 6;
    auto p = init_params<double>(cfg, 3, 0.3);
    Rng rng(9);
    for (auto& [name, t] : p) {
        if (is_gain(name) || is_bias_like(name)) {
            for (auto& x : t.data) {
                x += rng.normal(0.0, 0.2);
            }
        }
    }
    Batch b;
    b.size = 2;
    b.seq_len = 6;
    b.input_ids = {2, 17, 4, 33, 3, 9, 2, 41, 12, 3, 0, 0};
    b.token_type_ids = {0, 0, 0, 0, 1, 1, 0, 0, 0, 1, 0, 0};
    b.attention_mask = {1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0};
    b.mlm_labels = {kIgnore, 8, 21, kIgnore, kIgnore, 9, kIgnore, 41, 30, kIgnore, kIgnore, kIgnore};
    b.sso_labels = {1, 2};
    const double alpha = 0.5;
    const auto objective = [&](const TensorMap<double>& params) {
        const auto out = forward(cfg, params, b, {});
        return mlm_loss<double>(out.mlm_logits, cfg.vocab_size, b.mlm_labels).loss +
               alpha * sso_loss<double>(out.sso_logits, b.sso_labels).loss;
    };
    auto out = forward(cfg, p, b, {});
    std::vector<double> gm, gs;
    mlm_loss<double>(out.mlm_logits, cfg.vocab_size, b.mlm_labels, &gm);
    sso_loss<double>(out.sso_logits, b.sso_labels, &gs, alpha);
    const auto g = backward<double>(out, cfg, p, gm, gs);
    const double h = 1e-5;
    double worst = 0.0;
    std::string worst_name;
    std::size_t zero_grad = 0;
    for (auto& [name, t] : p) {
        const auto& ga = g.at(name).data;
        double diff2 = 0, a2 = 0, n2 = 0;
        for (std::size_t i = 0; i < t.data.size(); ++i) {
            const double saved = t.data[i];
            t.data[i] = saved + h;
            const double up = objective(p);
            t.data[i] = saved - h;
            const double down = objective(p);
            t.data[i] = saved;
            const double fd = (up - down) / (2 * h);
            diff2 += (fd - ga[i]) * (fd - ga[i]);
            a2 += ga[i] * ga[i];
            n2 += fd * fd;
        }
        const double scale = std::sqrt(std::max(a2, n2));
        if (scale < 1e-7) {
            // zero true gradient (attention key biases): absolute noise floor
            ++zero_grad;
            c.expect(std::sqrt(diff2) <= 1e-8, name + " absolute error " + fmt("%.3g", std::sqrt(diff2)));
            continue;
        }
        const double rel = std::sqrt(diff2) / scale;
        if (rel > worst) {
            worst = rel;
            worst_name = name;
        }
        c.expect(rel <= 1e-4, name + " relative error " + fmt("%.3g", rel));
    }
    const double secs = seconds_since(t0);
    c.expect(secs < 60.0, "runtime " + fmt("%.1f", secs) + " s exceeds 60 s");
    c.note(std::to_string(p.size()) + " tensors (" + std::to_string(zero_grad) + " with zero gradient), worst " + worst_name + " " + fmt("%.2g", worst) + ", " +
           fmt("%.1f", secs) + " s");
}

void loss_weight_contract(Checker& c) {
    const Tokenizer tok = fixtures::toy_tokenizer(300, 21);
    const SentencePool pool = SentencePool::from_documents(fixtures::toy_documents(80, 22));
    const ModelConfig cfg = fixtures::tiny_config(tok.vocab().size());
    const auto params = init_params<double>(cfg, 4);
    const Batch b = BatchBuilder(tok, pool, cfg.max_seq_len).build(8, 1, 1, 0.1);
    const auto out = forward(cfg, params, b, {});
    const double mlm = mlm_loss<double>(out.mlm_logits, cfg.vocab_size, b.mlm_labels).loss;
    const double sso = sso_loss<double>(out.sso_logits, b.sso_labels).loss;
    const double c0 = combined_loss(mlm, sso, {0.0});
    const double c01 = combined_loss(mlm, sso, {0.1});
    const double c1 = combined_loss(mlm, sso, {1.0});
    c.expect(std::memcmp(&c0, &mlm, sizeof(double)) == 0, "alpha=0 differs from the MLM loss");
    c.expect(std::fabs(c1 - (mlm + sso)) <= 1e-12, "alpha=1 differs from the sum");
    c.expect(std::fabs((c01 - c0) - 0.1 * (c1 - c0)) <= 1e-12, "combined loss not linear in alpha");
    // the SSO gradient scales with alpha as well
    std::vector<double> g01, g1;
    sso_loss<double>(out.sso_logits, b.sso_labels, &g01, 0.1);
    sso_loss<double>(out.sso_logits, b.sso_labels, &g1, 1.0);
    double worst = 0.0;
    for (std::size_t i = 0; i < g1.size(); ++i) {
        worst = std::max(worst, std::fabs(g01[i] - 0.1 * g1[i]));
    }
    c.expect(worst <= 1e-12, "SSO gradient not linear in alpha");
    c.note("mlm " + fmt("%.6f", mlm) + ", sso " + fmt("%.6f", sso));
}

void masking_statistics(Checker& c) {
    const Tokenizer tok = fixtures::toy_tokenizer(400, 31);
    const SentencePool pool = SentencePool::from_documents(fixtures::toy_documents(200, 32));
    MaskingSpec spec;
    spec.vocab_size = tok.vocab().size();
    spec.mask_id = tok.vocab().mask_id();
    spec.unk_id = tok.vocab().unk_id();
    spec.num_specials = tok.vocab().num_specials();
    Rng rng(5);
    std::size_t covered = 0, selected = 0, words = 0, partial = 0, outside = 0;
    std::size_t modes[4] = {0, 0, 0, 0};
    while (covered < 100000) {
        const auto draw = sample_sso_pair(pool, rng.below(pool.documents()), rng);
        if (!draw) {
            continue;
        }
        const auto ex = build_pair_example(*draw, pool, tok, {0.1, &rng}, 128);
        const auto ids = ex.input_ids(tok.vocab());
        const auto spans = ex.word_spans();
        const auto m = whole_word_mask(ids, spans, rng, spec);
        std::vector<bool> in_span(ids.size(), false);
        for (const auto& [b, e] : spans) {
            covered += e - b;
            const bool chosen = m.labels[b] != kIgnore;
            for (std::size_t i = b; i < e; ++i) {
                in_span[i] = true;
                partial += (m.labels[i] != kIgnore) != chosen || m.corruption[i] != m.corruption[b] ? 1 : 0;
            }
            if (chosen) {
                ++words;
                selected += e - b;
                ++modes[static_cast<int>(m.corruption[b])];
            }
        }
        for (std::size_t i = 0; i < ids.size(); ++i) {
            outside += !in_span[i] && m.labels[i] != kIgnore ? 1 : 0;
        }
    }
    const double frac = static_cast<double>(selected) / static_cast<double>(covered);
    const double w = static_cast<double>(words);
    c.expect(std::fabs(frac - 0.15) <= 0.01, "masked fraction " + fmt("%.4f", frac));
    c.expect(std::fabs(modes[1] / w - 0.8) <= 0.02, "mask share " + fmt("%.4f", modes[1] / w));
    c.expect(std::fabs(modes[2] / w - 0.1) <= 0.02, "random share " + fmt("%.4f", modes[2] / w));
    c.expect(std::fabs(modes[3] / w - 0.1) <= 0.02, "keep share " + fmt("%.4f", modes[3] / w));
    c.expect(partial == 0 && outside == 0, "selection is not a union of whole words");
    c.note(std::to_string(covered) + " tokens, fraction " + fmt("%.4f", frac) + ", modes " + fmt("%.3f", modes[1] / w) +
           "/" + fmt("%.3f", modes[2] / w) + "/" + fmt("%.3f", modes[3] / w));
}

void sso_sampling(Checker& c) {
    const SentencePool pool = SentencePool::from_documents(fixtures::toy_documents(100, 41));
    Rng rng(8);
    std::size_t counts[3] = {0, 0, 0};
    std::size_t bad = 0;
    const std::size_t n = 30000;
    for (std::size_t draws = 0; draws < n;) {
        const auto d = sample_sso_pair(pool, rng.below(pool.documents()), rng);
        if (!d) {
            continue;
        }
        ++draws;
        ++counts[static_cast<int>(d->label)];
        switch (d->label) {
        case SsoLabel::Next:
            bad += d->first.doc == d->second.doc && d->second.sentence == d->first.sentence + 1 ? 0 : 1;
            break;
        case SsoLabel::Previous:
            bad += d->first.doc == d->second.doc && d->second.sentence + 1 == d->first.sentence ? 0 : 1;
            break;
        case SsoLabel::Random:
            bad += d->first.doc != d->second.doc ? 0 : 1;
            break;
        }
    }
    for (int k = 0; k < 3; ++k) {
        const double f = counts[k] / static_cast<double>(n);
        c.expect(std::fabs(f - 1.0 / 3.0) <= 0.02, "class " + std::to_string(k) + " frequency " + fmt("%.4f", f));
    }
    c.expect(bad == 0, std::to_string(bad) + " pairs fail the provenance audit");
    c.note(std::to_string(counts[0]) + "/" + std::to_string(counts[1]) + "/" + std::to_string(counts[2]));
}

void warm_start_benefit(Checker& c) {
    const auto t0 = std::chrono::steady_clock::now();
    ModelConfig dims;
    dims.layers = 2;
    dims.heads = 2;
    dims.hidden = 32;
    dims.ff_dim = 64;
    dims.max_positions = 32;
    dims.max_seq_len = 32;
    dims.dropout_rate = 0.1;

    // donor: corpus A with its own vocabulary
    const auto corpus_a = synthetic::preset_corpus("large", 400, 101).collect();
    const Tokenizer tok_a = train_bpe(DocumentStream::from_vector(corpus_a), 400).tokenizer;
    const SentencePool pool_a = SentencePool::from_documents(corpus_a);
    ModelConfig donor_cfg = dims;
    donor_cfg.vocab_size = tok_a.vocab().size();
    TrainConfig donor_tc;
    donor_tc.seed = 1000;
    donor_tc.batch_size = 32;
    donor_tc.schedule_name = "ablation-10k";
    donor_tc.total_steps = 600;
    donor_tc.model = donor_cfg;
    const auto donor_run = pretrain(donor_cfg, init_params<float>(donor_cfg, 1000), tok_a, pool_a, donor_tc);
    const DonorModel donor{tok_a, donor_cfg, donor_run.params};

    // target: corpus B, overlapping but different vocabulary
    const auto corpus_b = synthetic::preset_corpus("small", 400, 202).collect();
    const Tokenizer tok_b = train_bpe(DocumentStream::from_vector(corpus_b), 360).tokenizer;
    std::size_t shared = 0;
    for (const auto& t : tok_b.vocab().tokens()) {
        shared += tok_a.vocab().find(t) ? 1 : 0;
    }
    c.expect(shared > tok_b.vocab().num_specials() && shared < tok_b.vocab().size(),
             "vocabularies must overlap without being equal");
    const SentencePool pool_b = SentencePool::from_documents(corpus_b);
    const SentencePool heldout = SentencePool::from_documents(synthetic::preset_corpus("small", 80, 303).collect());
    const auto eval = build_eval_batches(tok_b, heldout, 8, 32, dims.max_seq_len, 404);

    VariantRuns warm{"init:transfer", {}}, random{"init:random", {}};
    int wins = 0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        TrainConfig tc;
        tc.seed = seed;
        tc.batch_size = 32;
        tc.schedule_name = "ablation-10k";
        tc.total_steps = 300;
        auto tr = transfer_model(donor, tok_b, derive_seed(seed, "transfer"));
        tr.config.dropout_rate = dims.dropout_rate;
        const auto w = pretrain(tr.config, std::move(tr.params), tok_b, pool_b, tc);
        ModelConfig rcfg = dims;
        rcfg.vocab_size = tok_b.vocab().size();
        const auto r = pretrain(rcfg, init_params<float>(rcfg, derive_seed(seed, "init")), tok_b, pool_b, tc);
        const double lw = heldout_mlm_metrics(tr.config, w.params, eval).loss;
        const double lr = heldout_mlm_metrics(rcfg, r.params, eval).loss;
        warm.scores.push_back(lw);
        random.scores.push_back(lr);
        wins += lw <= lr ? 1 : 0;
    }
    const auto rep = ablation_compare({warm, random}, 0.01, false);
    const auto& test = rep.test("init:transfer", "init:random");
    c.expect(wins >= 4, "warm start won only " + std::to_string(wins) + " of 5 seeds");
    c.expect(test.significant, "difference not significant, p = " + fmt("%.3g", test.welch.p));
    c.expect(rep.variant("init:transfer").best_overall, "warm start is not the best variant");
    const double secs = seconds_since(t0);
    c.expect(secs < 900.0, "runtime " + fmt("%.0f", secs) + " s exceeds 15 min");
    c.note("median loss warm " + fmt("%.4f", rep.variant("init:transfer").median) + " vs random " +
           fmt("%.4f", rep.variant("init:random").median) + ", wins " + std::to_string(wins) + "/5, p " +
           fmt("%.2g", test.welch.p) + ", " + fmt("%.0f", secs) + " s");
}

void schedule_anchors(Checker& c) {
    const auto ab = schedule_preset("ablation-10k");
    c.expect(ab.lr_at(500) == 7e-4, "ablation lr(500) = " + fmt("%.17g", ab.lr_at(500)));
    c.expect(ab.lr_at(10000) == 0.0, "ablation lr(10000) = " + fmt("%.17g", ab.lr_at(10000)));
    const auto lg = schedule_preset("herbert-large-60k");
    c.expect(lg.lr_at(15000) == 2.5e-4, "large lr(15000) = " + fmt("%.17g", lg.lr_at(15000)));
    c.expect(lg.lr_at(40000) == 7e-5, "large lr(40000) = " + fmt("%.17g", lg.lr_at(40000)));
    c.expect(lg.lr_at(60000) == 0.0, "large lr(60000) = " + fmt("%.17g", lg.lr_at(60000)));
    // the drops: the next phase starts from 1e-4 and 3e-5 respectively
    c.expect(lg.segments.size() == 3 && lg.segments[1].lr_start == 1e-4 && lg.segments[2].lr_start == 3e-5,
             "phase start rates");
    c.expect(std::fabs(lg.lr_at(15001) - (1e-4 - 3e-5 / 25000)) <= 1e-18, "large lr(15001)");
    c.expect(std::fabs(lg.lr_at(40001) - 3e-5 * (1 - 1.0 / 20000)) <= 1e-18, "large lr(40001)");
    std::size_t off_outside_final = 0, reenabled = 0;
    bool off = false;
    for (std::size_t s = 1; s <= 60000; ++s) {
        const auto f = lg.flags_at(s);
        const bool final_phase = s > 40000;
        if (!f.bpe_dropout || !f.model_dropout) {
            off = true;
            off_outside_final += final_phase ? 0 : 1;
        } else if (off) {
            ++reenabled;
        }
        if (final_phase && (f.bpe_dropout || f.model_dropout)) {
            ++off_outside_final;
        }
    }
    c.expect(off && off_outside_final == 0 && reenabled == 0, "dropout flags not off exactly in the final phase");
    for (std::size_t s = 1; s <= 10000; ++s) {
        const auto f = ab.flags_at(s);
        if (!f.bpe_dropout || !f.model_dropout) {
            c.expect(false, "ablation preset disables dropout at step " + std::to_string(s));
            break;
        }
    }
}

void welch_reference(Checker& c) {
    Rng rng(31337);
    double worst_t = 0.0, worst_p = 0.0;
    for (int k = 0; k < 20; ++k) {
        const std::size_t na = 2 + rng.below(9), nb = 2 + rng.below(9);
        const double ma = rng.normal(0.0, 2.0), mb = rng.normal(0.0, 2.0);
        const double sa = 0.1 + 3.0 * rng.uniform(), sb = 0.1 + 3.0 * rng.uniform();
        std::vector<double> a(na), b(nb);
        for (auto& x : a) {
            x = rng.normal(ma, sa);
        }
        for (auto& x : b) {
            x = rng.normal(mb, sb);
        }
        const auto got = welch_t_test(a, b);
        const auto ref = oracle::welch(a, b);
        worst_t = std::max(worst_t, std::fabs(got.t - ref.t));
        worst_p = std::max(worst_p, std::fabs(got.p - ref.p));
    }
    c.expect(worst_t <= 1e-10, "max |t diff| " + fmt("%.3g", worst_t));
    c.expect(worst_p <= 1e-10, "max |p diff| " + fmt("%.3g", worst_p));
    const double p_same = welch_t_test({1, 2, 3}, {1, 2, 3}).p;
    c.expect(p_same == 1.0, "identical samples give p = " + fmt("%.17g", p_same));
    const double p_same2 = welch_t_test({0.3, 7.1, 2.2, 5.0}, {0.3, 7.1, 2.2, 5.0}).p;
    c.expect(p_same2 == 1.0, "identical samples give p = " + fmt("%.17g", p_same2));
    c.note("20 pairs, max diff t " + fmt("%.2g", worst_t) + ", p " + fmt("%.2g", worst_p));
}

int run_cli(const std::string& args) {
#ifndef HERBERT_CLI
    throw Error("built without the command-line tool");
#endif
    const std::string cmd = std::string("'") + HERBERT_CLI + "' " + args + " >/dev/null 2>&1 </dev/null";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void determinism(Checker& c) {
    TempDir d;
    fixtures::write_file(d / "train.conf",
                        "seed = 17\nbatch_size = 8\nschedule = ablation-10k\ntotal_steps = 40\ncheckpoint_every = 20\n"
                        "layers = 2\nheads = 2\nhidden = 32\nff_dim = 64\nmax_positions = 32\nmax_seq_len = 32\n"
                        "vocab_size = 300\nsynthetic_docs = 150\nalpha = 0.1\nbpe_dropout = 0.1\n");
    const std::string conf = "'" + (d / "train.conf").string() + "'";
    const int ra = run_cli("pretrain --config " + conf + " --out '" + (d / "a").string() + "'");
    const int rb = run_cli("pretrain --config " + conf + " --out '" + (d / "b").string() + "'");
    c.expect(ra == 0 && rb == 0, "pretrain exited with " + std::to_string(ra) + "/" + std::to_string(rb));
    for (const char* f : {"model.ckpt", "step-20.ckpt", "metrics.csv"}) {
        const auto x = read_file(d / "a" / f);
        c.expect(!x.empty(), std::string(f) + " missing");
        c.expect(x == read_file(d / "b" / f), std::string(f) + " differs between runs");
    }
}

void overfit_sanity(Checker& c) {
    const Tokenizer tok = fixtures::toy_tokenizer(300, 51);
    const SentencePool pool = SentencePool::from_documents(fixtures::toy_documents(60, 52));
    ModelConfig cfg = fixtures::tiny_config(tok.vocab().size());
    cfg.hidden = 32;
    cfg.ff_dim = 64;
    const Batch batch = BatchBuilder(tok, pool, cfg.max_seq_len).build(8, 3, 1, 0.0);
    auto params = init_params<float>(cfg, 7);
    AdamState<float> adam;
    double first = 0.0, last = 0.0;
    for (std::size_t step = 1; step <= 200; ++step) {
        const auto r = train_step(cfg, params, adam, batch, 1e-3, 0.1, false, step);
        if (step == 1) {
            first = r.metrics.combined_loss;
        }
    }
    const auto out = forward(cfg, params, batch, {});
    last = combined_loss(mlm_loss<float>(out.mlm_logits, cfg.vocab_size, batch.mlm_labels).loss,
                         sso_loss<float>(out.sso_logits, batch.sso_labels).loss, {0.1});
    c.expect(last <= 0.5 * first, "combined loss " + fmt("%.4f", first) + " -> " + fmt("%.4f", last));
    c.note(fmt("%.4f", first) + " -> " + fmt("%.4f", last));
}

} // namespace

int main() {
    const std::vector<std::pair<std::string, std::function<void(Checker&)>>> criteria{
        {"tokenizer fidelity", tokenizer_fidelity},
        {"BPE-dropout limits", bpe_dropout_limits},
        {"embedding transfer correctness", transfer_correctness},
        {"gradient exactness", gradient_exactness},
        {"SSO weight contract", loss_weight_contract},
        {"masking statistics", masking_statistics},
        {"SSO sampling", sso_sampling},
        {"warm-start benefit", warm_start_benefit},
        {"schedule anchors", schedule_anchors},
        {"Welch t-test", welch_reference},
        {"determinism", determinism},
        {"overfit sanity", overfit_sanity},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Checker c;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            criteria[i].second(c);
        } catch (const std::exception& e) {
            c.expect(false, std::string("exception: ") + e.what());
        }
        const bool ok = c.ok();
        failed += ok ? 0 : 1;
        std::printf("%s %2zu %s (%.1f s): %s\n", ok ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(),
                    seconds_since(t0), c.summary().c_str());
        std::fflush(stdout);
    }
    std::printf("%zu/%zu criteria passed\n", criteria.size() - failed, criteria.size());
    return failed == 0 ? 0 : 1;
}
