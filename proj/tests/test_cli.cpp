#include <gtest/gtest.h>

#include <cstdlib>
#include <sys/wait.h>

#include "support.hpp"

using namespace herbert;
using herbert::fixtures::read_file;
using herbert::fixtures::TempDir;
using herbert::fixtures::write_file;

namespace {

struct Run {
    int code = -1;
    std::string out;
    std::string err;
};

Run cli(const std::string& args, const TempDir& scratch, const std::string& stdin_text = {}) {
    const auto out = scratch / "stdout.txt";
    const auto err = scratch / "stderr.txt";
    std::string cmd = std::string("'") + HERBERT_CLI + "' " + args + " >'" + out.string() + "' 2>'" + err.string() + "'";
    if (!stdin_text.empty()) {
        write_file(scratch / "stdin.txt", stdin_text);
        cmd += " <'" + (scratch / "stdin.txt").string() + "'";
    } else {
        cmd += " </dev/null";
    }
    const int status = std::system(cmd.c_str());
    Run r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = read_file(out);
    r.err = read_file(err);
    return r;
}

const char* kTinyConfig =
    "schedule = warmup 2 | 2 6 1e-3 0 on on\n"
    "batch_size = 4\n"
    "layers = 1\nheads = 2\nhidden = 16\nff_dim = 32\nmax_positions = 32\nmax_seq_len = 32\n"
    "vocab_size = 200\nsynthetic_docs = 60\n";

} // namespace

TEST(Cli, UsageErrorsExitOne) {
    TempDir d;
    const auto none = cli("", d);
    EXPECT_EQ(none.code, 1);
    EXPECT_NE(none.err.find("pretrain"), std::string::npos);
    EXPECT_EQ(cli("frobnicate", d).code, 1);
    EXPECT_EQ(cli("encode", d).code, 1); // missing --tokenizer
    EXPECT_EQ(cli("--help", d).code, 0);
}

TEST(Cli, RuntimeErrorsExitTwo) {
    TempDir d;
    const auto r = cli("encode --tokenizer '" + (d / "missing").string() + "'", d);
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("error:"), std::string::npos);
}

TEST(Cli, TokenizerStatsAndEncode) {
    TempDir d;
    write_file(d / "corpus.txt", "Ala ma kota. Kot ma Alę.\n\nPies śpi na trawie.\n");
    const auto tok_dir = (d / "tok").string();
    const auto t = cli("train-tokenizer --input synthetic:small:80:2 --input '" + (d / "corpus.txt").string() +
                           "' --vocab-size 200 --out '" + tok_dir + "'",
                       d);
    ASSERT_EQ(t.code, 0) << t.err;
    EXPECT_NE(t.out.find("vocab 200"), std::string::npos) << t.out;

    const auto s = cli("corpus-stats --input '" + (d / "corpus.txt").string() + "' --tokenizer '" + tok_dir + "'", d);
    ASSERT_EQ(s.code, 0) << s.err;
    EXPECT_NE(s.out.find("Tokens"), std::string::npos);
    EXPECT_NE(s.out.find("Avg len"), std::string::npos);
    const Tokenizer tok = Tokenizer::load(tok_dir);
    const auto expect = corpus_stats(ingest(d / "corpus.txt", CorpusFormat::PlainBlankline), tok);
    EXPECT_NE(s.out.find(" " + std::to_string(expect.token_count) + " "), std::string::npos) << s.out;

    const auto e = cli("encode --tokenizer '" + tok_dir + "'", d, "Ala ma kota.\n");
    ASSERT_EQ(e.code, 0) << e.err;
    std::string ids;
    for (const TokenId id : tok.encode("Ala ma kota.")) {
        ids += (ids.empty() ? "" : " ") + std::to_string(id);
    }
    EXPECT_EQ(e.out, ids + "\n");
    const auto e1 = cli("encode --seed 4 --dropout 0.5 --tokenizer '" + tok_dir + "'", d, "Ala ma kota.\n");
    const auto e2 = cli("encode --tokenizer '" + tok_dir + "' --dropout 0.5 --seed 4", d, "Ala ma kota.\n");
    EXPECT_EQ(e1.out, e2.out);
}

TEST(Cli, PretrainEvalRoundTripIsDeterministic) {
    TempDir d;
    write_file(d / "train.conf", kTinyConfig);
    const auto a = cli("pretrain --seed 5 --config '" + (d / "train.conf").string() + "' --out '" + (d / "a").string() + "'", d);
    ASSERT_EQ(a.code, 0) << a.err;
    const auto b = cli("pretrain --config '" + (d / "train.conf").string() + "' --out '" + (d / "b").string() + "' --seed 5", d);
    ASSERT_EQ(b.code, 0) << b.err;
    for (const char* f : {"model.ckpt", "metrics.csv", "tokenizer/vocab.txt", "tokenizer/merges.txt"}) {
        EXPECT_EQ(read_file(d / "a" / f), read_file(d / "b" / f)) << f;
    }
    const auto c = cli("pretrain --seed 6 --config '" + (d / "train.conf").string() + "' --out '" + (d / "c").string() + "'", d);
    ASSERT_EQ(c.code, 0) << c.err;
    EXPECT_NE(read_file(d / "a" / "model.ckpt"), read_file(d / "c" / "model.ckpt"));

    const std::string eval_args = "eval --checkpoint '" + (d / "a" / "model.ckpt").string() + "' --tokenizer '" +
                                  (d / "a" / "tokenizer").string() + "' --data synthetic:small:20:77 --batches 2";
    const auto ev = cli(eval_args, d);
    ASSERT_EQ(ev.code, 0) << ev.err;
    EXPECT_EQ(ev.out.rfind("loss\t", 0), 0u) << ev.out;
    EXPECT_NE(ev.out.find("perplexity\t"), std::string::npos);
    EXPECT_EQ(cli(eval_args, d).out, ev.out);
}

TEST(Cli, TransferFromPretrainedDonor) {
    TempDir d;
    write_file(d / "donor.conf", kTinyConfig);
    ASSERT_EQ(cli("pretrain --config '" + (d / "donor.conf").string() + "' --out '" + (d / "donor").string() + "'", d).code, 0);
    ASSERT_EQ(cli("train-tokenizer --input synthetic:large:80:3 --vocab-size 180 --out '" + (d / "target").string() + "'", d).code, 0);
    const auto r = cli("transfer --donor '" + (d / "donor" / "model.ckpt").string() + "' --donor-tokenizer '" +
                           (d / "donor" / "tokenizer").string() + "' --target-tokenizer '" + (d / "target").string() +
                           "' --out '" + (d / "warm.ckpt").string() + "' --report '" + (d / "report.txt").string() + "'",
                       d);
    ASSERT_EQ(r.code, 0) << r.err;
    const auto ck = load_model(d / "warm.ckpt");
    EXPECT_EQ(ck.config.vocab_size, Tokenizer::load(d / "target").vocab().size());
    const std::string report = read_file(d / "report.txt");
    EXPECT_NE(report.find("\"kind\""), std::string::npos);
    EXPECT_NE(r.out.find("direct "), std::string::npos);
}

TEST(Cli, CompareTable) {
    TempDir d;
    write_file(d / "runs.csv",
               "variant,seed,score\nrandom,1,85.1\nrandom,2,85.65\nrandom,3,86.0\n"
               "warm,1,88.8\nwarm,2,88.2\nwarm,3,89.1\n");
    const auto r = cli("compare --runs '" + (d / "runs.csv").string() + "'", d);
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("warm\t88.800000"), std::string::npos) << r.out;
    EXPECT_NE(r.out.find("**"), std::string::npos);
    EXPECT_NE(r.out.find("random\twarm"), std::string::npos);

    write_file(d / "bad.csv", "random,1,85.1\nrandom,2\n");
    EXPECT_EQ(cli("compare --runs '" + (d / "bad.csv").string() + "'", d).code, 2);
}

TEST(Cli, AblateSmoke) {
    TempDir d;
    const auto dir = d / "matrix";
    std::filesystem::create_directories(dir);
    write_file(dir / "base.conf", kTinyConfig);
    write_file(dir / "manifest.txt",
               "seeds = 1 2\neval_data = synthetic:small:20:50\neval_batches = 1\neval_batch_size = 4\n"
               "variant alpha:0.1 = base.conf alpha=0.1\nvariant alpha:1.0 = base.conf alpha=1.0\n");
    const auto r = cli("ablate --dir '" + dir.string() + "' --out '" + (d / "out").string() + "'", d);
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("alpha:0.1"), std::string::npos) << r.out;
    EXPECT_NE(r.out.find("pairwise"), std::string::npos);
    const std::string csv = read_file(d / "out" / "runs.csv");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
    EXPECT_TRUE(std::filesystem::exists(d / "out" / "alpha_1.0" / "seed-2" / "model.ckpt"));
}
