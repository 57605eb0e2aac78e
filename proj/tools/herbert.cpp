#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "herbert/herbert.hpp"

namespace fs = std::filesystem;
using namespace herbert;

namespace {

struct Global {
    std::uint64_t seed = 0;
    bool seed_given = false;
};

std::string read_text(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) {
        throw IoError("cannot read " + p.string());
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (const char c : s) {
        if (c == sep) {
            out.push_back(detail::trim(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(detail::trim(cur));
    return out;
}

// ---------------------------------------------------------------------------

struct CorpusStatsArgs {
    std::vector<std::string> inputs;
    std::string format = "plain";
    std::string tokenizer;
};

int corpus_stats_cmd(const CorpusStatsArgs& a) {
    const Tokenizer tok = Tokenizer::load(a.tokenizer);
    const CorpusFormat fmt = parse_corpus_format(a.format);
    std::vector<std::pair<std::string, CorpusStats>> rows;
    CorpusStats total;
    for (const auto& in : a.inputs) {
        const auto s = corpus_stats(DocumentStream::from_vector(read_corpus(in, fmt)), tok);
        rows.emplace_back(in, s);
        total.token_count += s.token_count;
        total.document_count += s.document_count;
    }
    if (rows.size() > 1) {
        total.avg_len = total.document_count == 0
                            ? 0.0
                            : static_cast<double>(total.token_count) / static_cast<double>(total.document_count);
        rows.emplace_back("Total", total);
    }
    std::size_t width = 6;
    for (const auto& [name, s] : rows) {
        width = std::max(width, name.size());
    }
    std::printf("%-*s  %12s  %10s  %9s\n", static_cast<int>(width), "Corpus", "Tokens", "Documents", "Avg len");
    for (const auto& [name, s] : rows) {
        std::printf("%-*s  %12llu  %10llu  %9.2f\n", static_cast<int>(width), name.c_str(),
                    static_cast<unsigned long long>(s.token_count), static_cast<unsigned long long>(s.document_count),
                    s.avg_len);
    }
    return 0;
}

struct TrainTokenizerArgs {
    std::vector<std::string> inputs;
    std::string format = "plain";
    std::size_t vocab_size = 0;
    std::string out;
};

int train_tokenizer_cmd(const TrainTokenizerArgs& a) {
    const CorpusFormat fmt = parse_corpus_format(a.format);
    std::vector<Document> docs;
    for (const auto& in : a.inputs) {
        auto part = read_corpus(in, fmt);
        docs.insert(docs.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
    }
    const auto res = train_bpe(DocumentStream::from_vector(std::move(docs)), a.vocab_size);
    res.tokenizer.save(a.out);
    std::printf("vocab %zu\nmerges %zu\n", res.tokenizer.vocab().size(), res.tokenizer.merges().size());
    return 0;
}

struct EncodeArgs {
    std::string tokenizer;
    double dropout = 0.0;
    std::string input;
    bool pieces = false;
};

int encode_cmd(const EncodeArgs& a, const Global& g) {
    const Tokenizer tok = Tokenizer::load(a.tokenizer);
    std::ifstream file;
    if (!a.input.empty()) {
        file.open(a.input, std::ios::binary);
        if (!file) {
            throw IoError("cannot read " + a.input);
        }
    }
    std::istream& in = a.input.empty() ? std::cin : file;
    Rng rng = Rng::stream(g.seed, "encode");
    std::string out;
    for (std::string line; std::getline(in, line);) {
        const auto ids = tok.encode(line, {a.dropout, &rng});
        out.clear();
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (i > 0) {
                out += ' ';
            }
            out += a.pieces ? tok.vocab().token(ids[i]) : std::to_string(ids[i]);
        }
        std::cout << out << '\n';
    }
    return 0;
}

struct TransferArgs {
    std::string donor;
    std::string donor_tokenizer;
    std::string target_tokenizer;
    std::string out;
    std::string report;
    std::string special_map;
    std::string token_type_donor;
};

int transfer_cmd(const TransferArgs& a, const Global& g) {
    auto ck = load_model(a.donor);
    const DonorModel donor{Tokenizer::load(a.donor_tokenizer), ck.config, std::move(ck.params)};
    const Tokenizer target = Tokenizer::load(a.target_tokenizer);
    std::optional<EmbeddingMatrix> token_type;
    if (!a.token_type_donor.empty()) {
        token_type = load_checkpoint(a.token_type_donor).at("embeddings.token_type");
    }
    const SpecialTokenMap specials = a.special_map.empty() ? SpecialTokenMap{} : load_special_map(a.special_map);
    const auto res = transfer_model(donor, target, derive_seed(g.seed, "transfer"), token_type, specials);
    save_model(a.out, res.config, res.params);
    if (!a.report.empty()) {
        std::ofstream rep(a.report, std::ios::binary);
        if (!rep) {
            throw IoError("cannot write " + a.report);
        }
        res.report.write(rep);
    }
    std::printf("direct %zu\naveraged %zu\nfallback_random %zu\n", res.report.direct_copies, res.report.averaged,
                res.report.fallback_random);
    return 0;
}

struct PretrainArgs {
    std::string config;
    std::string out;
    bool verbose = false;
};

int pretrain_cmd(const PretrainArgs& a, const Global& g) {
    TrainConfig tc = load_train_config(a.config);
    if (g.seed_given) {
        tc.seed = g.seed;
    }
    std::function<void(const MetricsRow&)> log;
    if (a.verbose) {
        log = [](const MetricsRow& r) { std::cerr << format_metrics_row(r) << '\n'; };
    }
    const auto res = run_pretrain(tc, a.out, log);
    if (!res.metrics.empty()) {
        std::printf("steps %zu\nfinal %s\n", res.steps, format_metrics_row(res.metrics.back()).c_str());
    }
    std::printf("checkpoint %s\n", (fs::path(a.out) / "model.ckpt").string().c_str());
    return 0;
}

struct EvalArgs {
    std::string checkpoint;
    std::string tokenizer;
    std::string data;
    std::string format = "plain";
    std::size_t batches = 8;
    std::size_t batch_size = 16;
};

MlmMetrics evaluate(const ModelCheckpoint& ck, const Tokenizer& tok, const std::vector<Document>& docs,
                    std::size_t batches, std::size_t batch_size, std::uint64_t seed) {
    if (ck.config.vocab_size != tok.vocab().size()) {
        throw ConfigError("checkpoint vocab size " + std::to_string(ck.config.vocab_size) +
                          " differs from tokenizer vocab " + std::to_string(tok.vocab().size()));
    }
    const auto pool = SentencePool::from_documents(docs);
    const auto eval = build_eval_batches(tok, pool, batches, batch_size, ck.config.max_seq_len, seed);
    return heldout_mlm_metrics(ck.config, ck.params, eval);
}

int eval_cmd(const EvalArgs& a, const Global& g) {
    const auto ck = load_model(a.checkpoint);
    const Tokenizer tok = Tokenizer::load(a.tokenizer);
    const auto m = evaluate(ck, tok, read_corpus(a.data, parse_corpus_format(a.format)), a.batches, a.batch_size,
                            g.seed);
    std::printf("loss\t%.6f\nperplexity\t%.6f\naccuracy\t%.6f\npositions\t%zu\n", m.loss, m.perplexity, m.accuracy,
                m.positions);
    return 0;
}

// ---------------------------------------------------------------------------

/// variant,seed,score rows; an optional header line is skipped.
std::vector<VariantRuns> read_runs_csv(const fs::path& path) {
    std::istringstream in(read_text(path));
    std::map<std::string, std::vector<std::pair<std::uint64_t, double>>> by_variant;
    std::size_t line_no = 0;
    for (std::string line; std::getline(in, line);) {
        ++line_no;
        if (detail::trim(line).empty()) {
            continue;
        }
        const auto f = split(line, ',');
        if (line_no == 1 && f.size() == 3 && f[0] == "variant") {
            continue;
        }
        if (f.size() != 3 || f[0].empty()) {
            throw FormatError(path.string() + " line " + std::to_string(line_no) + ": expected variant,seed,score");
        }
        const std::string where = path.string() + " line " + std::to_string(line_no);
        by_variant[f[0]].emplace_back(detail::parse_size(f[1], where), detail::parse_double(f[2], where));
    }
    std::vector<VariantRuns> runs;
    for (auto& [name, rows] : by_variant) {
        std::sort(rows.begin(), rows.end());
        VariantRuns r{name, {}};
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (i > 0 && rows[i].first == rows[i - 1].first) {
                throw FormatError("variant " + name + " lists seed " + std::to_string(rows[i].first) + " twice");
            }
            r.scores.push_back(rows[i].second);
        }
        runs.push_back(std::move(r));
    }
    return runs;
}

struct CompareArgs {
    std::string runs;
    double threshold = 0.01;
    bool lower_is_better = false;
};

int compare_cmd(const CompareArgs& a) {
    const auto rep = ablation_compare(read_runs_csv(a.runs), a.threshold, !a.lower_is_better);
    std::cout << rep.format();
    return 0;
}

// ---------------------------------------------------------------------------

struct Manifest {
    struct Variant {
        std::string name;
        std::string config_text;
    };
    std::vector<std::uint64_t> seeds;
    std::vector<Variant> variants;
    std::string eval_data = "synthetic:small:60:9001";
    std::string eval_format = "plain";
    std::size_t eval_batches = 4;
    std::size_t eval_batch_size = 16;
    std::uint64_t eval_seed = 0;
    double threshold = 0.01;
};

/// manifest.txt lines: "seeds = 1 2 3", "variant <name> = <config> [key=value ...]"
/// and eval_* / threshold settings.
Manifest load_manifest(const fs::path& dir) {
    const fs::path path = dir / "manifest.txt";
    std::istringstream in(read_text(path));
    Manifest m;
    std::size_t line_no = 0;
    for (std::string line; std::getline(in, line);) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) {
            line.erase(hash);
        }
        const std::string t = detail::trim(line);
        if (t.empty()) {
            continue;
        }
        const std::string where = path.string() + " line " + std::to_string(line_no);
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(where + ": expected key = value");
        }
        const std::string key = detail::trim(t.substr(0, eq));
        const std::string val = detail::trim(t.substr(eq + 1));
        if (key.rfind("variant ", 0) == 0) {
            Manifest::Variant v;
            v.name = detail::trim(key.substr(8));
            std::istringstream words(val);
            std::string file;
            if (v.name.empty() || !(words >> file)) {
                throw ConfigError(where + ": expected variant <name> = <config> [key=value ...]");
            }
            v.config_text = read_text(dir / file) + "\n";
            for (std::string kv; words >> kv;) {
                v.config_text += kv + "\n";
            }
            m.variants.push_back(std::move(v));
        } else if (key == "seeds") {
            std::istringstream words(val);
            for (std::string s; words >> s;) {
                m.seeds.push_back(detail::parse_size(s, where));
            }
        } else if (key == "eval_data") {
            m.eval_data = val.rfind("synthetic:", 0) == 0 || fs::path(val).is_absolute() ? val : (dir / val).string();
        } else if (key == "eval_format") {
            m.eval_format = val;
        } else if (key == "eval_batches") {
            m.eval_batches = detail::parse_size(val, where);
        } else if (key == "eval_batch_size") {
            m.eval_batch_size = detail::parse_size(val, where);
        } else if (key == "eval_seed") {
            m.eval_seed = detail::parse_size(val, where);
        } else if (key == "threshold") {
            m.threshold = detail::parse_double(val, where);
        } else {
            throw ConfigError(where + ": unknown key '" + key + "'");
        }
    }
    if (m.seeds.empty() || m.variants.empty()) {
        throw ConfigError(path.string() + " needs at least one seed and one variant");
    }
    return m;
}

std::string path_safe(std::string name) {
    for (char& c : name) {
        if (c == ':' || c == '/' || c == ' ') {
            c = '_';
        }
    }
    return name;
}

struct AblateArgs {
    std::string dir;
    std::string out;
};

/// Pretrains every variant under every seed, scores each run by held-out
/// MLM loss (lower is better) and compares the variants. Run seeds come from
/// the manifest; --seed only fixes the evaluation masking.
int ablate_cmd(const AblateArgs& a, const Global& g) {
    Manifest m = load_manifest(a.dir);
    if (g.seed_given) {
        m.eval_seed = g.seed;
    }
    const auto eval_docs = read_corpus(m.eval_data, parse_corpus_format(m.eval_format));
    fs::create_directories(a.out);
    std::ofstream csv(fs::path(a.out) / "runs.csv", std::ios::binary);
    csv << "variant,seed,score\n";
    std::vector<VariantRuns> runs;
    for (const auto& v : m.variants) {
        VariantRuns r{v.name, {}};
        for (const std::uint64_t seed : m.seeds) {
            TrainConfig tc = parse_train_config(v.config_text, a.dir);
            tc.seed = seed;
            const fs::path run_dir = fs::path(a.out) / path_safe(v.name) / ("seed-" + std::to_string(seed));
            run_pretrain(tc, run_dir);
            const auto ck = load_model(run_dir / "model.ckpt");
            const Tokenizer tok = Tokenizer::load(run_dir / "tokenizer");
            const double score = evaluate(ck, tok, eval_docs, m.eval_batches, m.eval_batch_size, m.eval_seed).loss;
            r.scores.push_back(score);
            char buf[64];
            std::snprintf(buf, sizeof buf, "%.9g", score);
            csv << v.name << ',' << seed << ',' << buf << '\n';
            std::cerr << v.name << " seed " << seed << ": held-out MLM loss " << buf << '\n';
        }
        runs.push_back(std::move(r));
    }
    csv.close();
    const std::string report = ablation_compare(runs, m.threshold, false).format();
    std::ofstream(fs::path(a.out) / "report.txt", std::ios::binary) << report;
    std::cout << report;
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Polish BERT pretraining toolkit", "herbert"};
    app.require_subcommand(1);
    app.fallthrough();
    Global g;
    auto* seed_opt = app.add_option("--seed", g.seed, "Root seed for every random stream")->capture_default_str();

    CorpusStatsArgs cs;
    auto* c_stats = app.add_subcommand("corpus-stats", "Token, document and average-length counts");
    c_stats->add_option("--input", cs.inputs, "Corpus file or synthetic:<preset>[:docs[:seed]]")->required();
    c_stats->add_option("--format", cs.format, "plain or jsonl")->capture_default_str();
    c_stats->add_option("--tokenizer", cs.tokenizer, "Tokenizer directory")->required();

    TrainTokenizerArgs tt;
    auto* c_tok = app.add_subcommand("train-tokenizer", "Train a BPE tokenizer");
    c_tok->add_option("--input", tt.inputs, "Corpus file or synthetic:<preset>[:docs[:seed]]")->required();
    c_tok->add_option("--format", tt.format, "plain or jsonl")->capture_default_str();
    c_tok->add_option("--vocab-size", tt.vocab_size, "Target vocabulary size")->required();
    c_tok->add_option("--out", tt.out, "Output directory")->required();

    EncodeArgs en;
    auto* c_enc = app.add_subcommand("encode", "Encode text, one line per sequence");
    c_enc->add_option("--tokenizer", en.tokenizer, "Tokenizer directory")->required();
    c_enc->add_option("--dropout", en.dropout, "BPE-dropout probability")->capture_default_str();
    c_enc->add_option("--input", en.input, "Input file (default: stdin)");
    c_enc->add_flag("--pieces", en.pieces, "Print token strings instead of ids");

    TransferArgs tr;
    auto* c_tr = app.add_subcommand("transfer", "Initialize a model from a donor with another vocabulary");
    c_tr->add_option("--donor", tr.donor, "Donor checkpoint")->required();
    c_tr->add_option("--donor-tokenizer", tr.donor_tokenizer, "Donor tokenizer directory")->required();
    c_tr->add_option("--target-tokenizer", tr.target_tokenizer, "Target tokenizer directory")->required();
    c_tr->add_option("--out", tr.out, "Output checkpoint")->required();
    c_tr->add_option("--report", tr.report, "Provenance report path");
    c_tr->add_option("--special-map", tr.special_map, "Special-token map: lines 'target donor'");
    c_tr->add_option("--token-type-donor", tr.token_type_donor, "Checkpoint providing embeddings.token_type");

    PretrainArgs pt;
    auto* c_pt = app.add_subcommand("pretrain", "Run MLM + SSO pretraining");
    c_pt->add_option("--config", pt.config, "Training config file")->required();
    c_pt->add_option("--out", pt.out, "Output directory")->required();
    c_pt->add_flag("--verbose", pt.verbose, "Print every logged step to stderr");

    EvalArgs ev;
    auto* c_ev = app.add_subcommand("eval", "Held-out MLM loss, perplexity and accuracy");
    c_ev->add_option("--checkpoint", ev.checkpoint, "Model checkpoint")->required();
    c_ev->add_option("--tokenizer", ev.tokenizer, "Tokenizer directory")->required();
    c_ev->add_option("--data", ev.data, "Corpus file or synthetic:<preset>[:docs[:seed]]")->required();
    c_ev->add_option("--format", ev.format, "plain or jsonl")->capture_default_str();
    c_ev->add_option("--batches", ev.batches, "Number of evaluation batches")->capture_default_str();
    c_ev->add_option("--batch-size", ev.batch_size, "Sequences per batch")->capture_default_str();

    CompareArgs cp;
    auto* c_cmp = app.add_subcommand("compare", "Compare variants across seeds");
    c_cmp->add_option("--runs", cp.runs, "CSV with rows variant,seed,score")->required();
    c_cmp->add_option("--threshold", cp.threshold, "Significance level")->capture_default_str();
    c_cmp->add_flag("--lower-is-better", cp.lower_is_better, "Scores are losses");

    AblateArgs ab;
    auto* c_ab = app.add_subcommand("ablate", "Pretrain a variant matrix over seeds and compare");
    c_ab->add_option("--dir", ab.dir, "Directory with manifest.txt and variant configs")->required();
    c_ab->add_option("--out", ab.out, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 1;
    }
    g.seed_given = seed_opt->count() > 0;

    try {
        if (*c_stats) {
            return corpus_stats_cmd(cs);
        }
        if (*c_tok) {
            return train_tokenizer_cmd(tt);
        }
        if (*c_enc) {
            return encode_cmd(en, g);
        }
        if (*c_tr) {
            return transfer_cmd(tr, g);
        }
        if (*c_pt) {
            return pretrain_cmd(pt, g);
        }
        if (*c_ev) {
            return eval_cmd(ev, g);
        }
        if (*c_cmp) {
            return compare_cmd(cp);
        }
        if (*c_ab) {
            return ablate_cmd(ab, g);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    std::cerr << app.help();
    return 1;
}
