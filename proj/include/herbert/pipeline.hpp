#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "herbert/corpus.hpp"
#include "herbert/error.hpp"
#include "herbert/evalstats.hpp"
#include "herbert/model.hpp"
#include "herbert/rng.hpp"
#include "herbert/synthetic.hpp"
#include "herbert/tokenizer.hpp"
#include "herbert/training.hpp"
#include "herbert/transfer.hpp"

namespace herbert {

/// Reads a corpus argument. Besides file paths this accepts
/// "synthetic:<preset>[:<docs>[:<seed>]]" for the built-in generator.
inline std::vector<Document> read_corpus(const std::string& spec, CorpusFormat format) {
    if (spec.rfind("synthetic:", 0) == 0) {
        std::vector<std::string> parts;
        std::istringstream in(spec.substr(10));
        for (std::string p; std::getline(in, p, ':');) {
            parts.push_back(p);
        }
        if (parts.empty() || parts.size() > 3) {
            throw ConfigError("expected synthetic:<preset>[:<docs>[:<seed>]], got '" + spec + "'");
        }
        const std::size_t docs = parts.size() > 1 ? detail::parse_size(parts[1], "synthetic docs") : 400;
        const std::uint64_t seed = parts.size() > 2 ? detail::parse_size(parts[2], "synthetic seed") : 1;
        return synthetic::preset_corpus(parts[0], docs, seed).collect();
    }
    return ingest(spec, format).collect();
}

/// Training documents named by a config: its corpus files in order, or the
/// synthetic preset when none are listed.
inline std::vector<Document> training_documents(const TrainConfig& tc) {
    if (tc.corpora.empty()) {
        return synthetic::preset_corpus(tc.synthetic_preset, tc.synthetic_docs, tc.synthetic_seed).collect();
    }
    const CorpusFormat fmt = parse_corpus_format(tc.corpus_format);
    std::vector<std::pair<std::string, DocumentStream>> sources;
    for (std::size_t i = 0; i < tc.corpora.size(); ++i) {
        const std::string name = std::to_string(i) + ":" + std::filesystem::path(tc.corpora[i]).stem().string();
        sources.emplace_back(name, DocumentStream::from_vector(read_corpus(tc.corpora[i], fmt)));
    }
    return mix_corpora(std::move(sources)).collect();
}

inline Tokenizer training_tokenizer(const TrainConfig& tc, const std::vector<Document>& docs) {
    if (!tc.tokenizer.empty()) {
        return Tokenizer::load(tc.tokenizer);
    }
    if (tc.vocab_size == 0) {
        throw ConfigError("config needs either tokenizer = <dir> or vocab_size = N");
    }
    return train_bpe(DocumentStream::from_vector(docs), tc.vocab_size).tokenizer;
}

struct PreparedRun {
    Tokenizer tokenizer;
    SentencePool pool;
    ModelConfig config;
    TensorMap<float> params;
    std::optional<TransferReport> transfer_report;
};

/// Resolves corpus, tokenizer and initial weights for a pretraining run.
/// Random init draws from the "init" stream of the run seed; transfer uses
/// the "transfer" stream.
inline PreparedRun prepare_run(const TrainConfig& tc) {
    const auto docs = training_documents(tc);
    PreparedRun run{training_tokenizer(tc, docs), SentencePool::from_documents(docs), tc.model, {}, std::nullopt};
    run.config.vocab_size = run.tokenizer.vocab().size();
    switch (tc.init) {
    case InitMode::Random:
        run.config.validate();
        run.params = init_params<float>(run.config, derive_seed(tc.seed, "init"));
        break;
    case InitMode::Checkpoint: {
        if (tc.init_checkpoint.empty()) {
            throw ConfigError("init = checkpoint needs init_checkpoint");
        }
        auto ck = load_model(tc.init_checkpoint);
        if (ck.config.vocab_size != run.config.vocab_size) {
            throw ConfigError("checkpoint vocab size " + std::to_string(ck.config.vocab_size) +
                              " differs from tokenizer vocab " + std::to_string(run.config.vocab_size));
        }
        ck.config.dropout_rate = tc.model.dropout_rate;
        run.config = ck.config;
        run.params = std::move(ck.params);
        break;
    }
    case InitMode::Transfer: {
        if (tc.donor_checkpoint.empty() || tc.donor_tokenizer.empty()) {
            throw ConfigError("init = transfer needs donor_checkpoint and donor_tokenizer");
        }
        auto ck = load_model(tc.donor_checkpoint);
        const DonorModel donor{Tokenizer::load(tc.donor_tokenizer), ck.config, std::move(ck.params)};
        std::optional<EmbeddingMatrix> token_type;
        if (!tc.token_type_donor.empty()) {
            token_type = load_checkpoint(tc.token_type_donor).at("embeddings.token_type");
        }
        const SpecialTokenMap specials = tc.special_map.empty() ? SpecialTokenMap{} : load_special_map(tc.special_map);
        auto res = transfer_model(donor, run.tokenizer, derive_seed(tc.seed, "transfer"), token_type, specials);
        res.config.dropout_rate = tc.model.dropout_rate;
        res.config.max_seq_len = std::min(tc.model.max_seq_len, res.config.max_positions);
        run.config = res.config;
        run.params = std::move(res.params);
        run.transfer_report = std::move(res.report);
        break;
    }
    }
    return run;
}

/// Full pretraining run. With an output directory this writes model.ckpt,
/// metrics.csv, the tokenizer (tokenizer/) and, for transfer runs,
/// transfer-report.txt.
inline PretrainResult run_pretrain(const TrainConfig& tc, const std::filesystem::path& out,
                                   std::function<void(const MetricsRow&)> on_log = {}) {
    PreparedRun run = prepare_run(tc);
    if (!out.empty()) {
        std::filesystem::create_directories(out / "tokenizer");
        run.tokenizer.save(out / "tokenizer");
        if (run.transfer_report) {
            std::ofstream rep(out / "transfer-report.txt");
            run.transfer_report->write(rep);
        }
    }
    return pretrain(run.config, std::move(run.params), run.tokenizer, run.pool, tc, {out, std::move(on_log)});
}

} // namespace herbert
