#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "support.hpp"

using namespace herbert;
using herbert::fixtures::make_tokenizer;

namespace {

const std::string B = kBoundary;

DonorModel random_donor(Tokenizer tok, std::uint64_t seed, std::size_t hidden = 8) {
    ModelConfig c = fixtures::tiny_config(tok.vocab().size());
    c.hidden = hidden;
    c.ff_dim = 2 * hidden;
    auto params = init_params<float>(c, seed);
    // spread rows out so averaging is visible
    Rng rng(seed);
    for (auto& x : params.at("embeddings.word").data) {
        x = static_cast<float>(rng.normal(0.0, 1.0));
    }
    return DonorModel{std::move(tok), c, std::move(params)};
}

} // namespace

TEST(TransferEmbeddings, IdentityVocabIsBitIdentical) {
    const DonorModel donor = random_donor(fixtures::toy_tokenizer(300, 1), 4);
    const auto [emb, report] = transfer_embeddings(donor, donor.tokenizer, 9);
    EXPECT_EQ(emb.data, donor.embeddings().data);
    EXPECT_EQ(report.direct_copies, donor.tokenizer.vocab().size());
    EXPECT_EQ(report.averaged, 0u);
    EXPECT_EQ(report.fallback_random, 0u);
}

TEST(TransferEmbeddings, AveragesSubTokens) {
    DonorModel donor{make_tokenizer({"x", "y"}, {}), {}, {}};
    Tensor<float> emb({7, 2});
    emb.row(5)[0] = 1.0f;
    emb.row(6)[1] = 1.0f;
    donor.params.emplace("embeddings.word", emb);
    const Tokenizer target = make_tokenizer({"x", "y", "xy"}, {{"x", "y"}});
    const auto [out, report] = transfer_embeddings(donor, target, 0);
    const auto row = out.row(7);
    EXPECT_EQ(row[0], 0.5f);
    EXPECT_EQ(row[1], 0.5f);
    EXPECT_EQ(report.averaged, 1u);
    EXPECT_EQ(report.tokens[7].donor_tokens, (std::vector<std::string>{"x", "y"}));
}

TEST(TransferEmbeddings, UnsegmentableTokensFallBackDeterministically) {
    DonorModel donor{make_tokenizer({"x"}, {}), {}, {}};
    donor.params.emplace("embeddings.word", Tensor<float>({6, 4}, std::vector<float>(24, 1.0f)));
    const Tokenizer target = make_tokenizer({"q", "x"}, {});
    const auto a = transfer_embeddings(donor, target, 17);
    const auto b = transfer_embeddings(donor, target, 17);
    const auto c = transfer_embeddings(donor, target, 18);
    EXPECT_EQ(a.first.data, b.first.data);
    EXPECT_NE(a.first.row(5)[0], c.first.row(5)[0]);
    EXPECT_EQ(a.second.tokens[5].kind, TransferKind::Fallback);
    EXPECT_EQ(a.second.tokens[6].kind, TransferKind::Direct);
}

TEST(TransferEmbeddings, FallbackRowsFollowInitStd) {
    DonorModel donor{make_tokenizer({"x"}, {}), {}, {}};
    donor.params.emplace("embeddings.word", Tensor<float>({6, 500}));
    std::vector<std::string> body;
    for (int i = 0; i < 40; ++i) {
        body.push_back("t" + std::to_string(i));
    }
    const auto [out, report] = transfer_embeddings(donor, make_tokenizer(body, {}), 3);
    double s = 0, s2 = 0;
    std::size_t n = 0;
    for (std::size_t r = 5; r < out.rows(); ++r) {
        for (const float x : out.row(r)) {
            s += x;
            s2 += static_cast<double>(x) * x;
            ++n;
        }
    }
    const double mean = s / n;
    EXPECT_NEAR(mean, 0.0, 0.002);
    EXPECT_NEAR(std::sqrt(s2 / n - mean * mean), 0.02, 0.001);
    EXPECT_EQ(report.fallback_random, 40u);
}

TEST(TransferEmbeddings, MatchesBruteForceOracle) {
    const DonorModel donor = random_donor(fixtures::toy_tokenizer(320, 21, 200, "large"), 5);
    // target corpus with characters the donor never saw
    auto docs = fixtures::toy_documents(120, 22, "small");
    docs.push_back({"x1", "odd", "Ωmega жук Ωмега жжж жук Ωmega"});
    const Tokenizer target = train_bpe(DocumentStream::from_vector(docs), 205).tokenizer;
    ASSERT_EQ(target.vocab().size(), 205u);
    const auto [emb, report] = transfer_embeddings(donor, target, 77);
    ASSERT_EQ(report.tokens.size(), 205u);
    std::size_t kinds[3] = {0, 0, 0};
    double max_diff = 0.0;
    for (std::size_t r = 0; r < 205; ++r) {
        const auto id = static_cast<TokenId>(r);
        const auto want = oracle::transfer_row(donor, target.vocab().token(id), target.vocab().is_special(id));
        ++kinds[want.kind];
        ASSERT_EQ(static_cast<int>(report.tokens[r].kind), want.kind) << target.vocab().token(id);
        if (want.kind == 2) {
            continue;
        }
        for (std::size_t j = 0; j < want.row.size(); ++j) {
            max_diff = std::max(max_diff, std::fabs(static_cast<double>(emb.row(r)[j]) - want.row[j]));
        }
    }
    EXPECT_LE(max_diff, 1e-7);
    EXPECT_GT(kinds[0], 0u);
    EXPECT_GT(kinds[1], 0u);
    EXPECT_GT(kinds[2], 0u);
    EXPECT_EQ(report.direct_copies, kinds[0]);
    EXPECT_EQ(report.averaged, kinds[1]);
    EXPECT_EQ(report.fallback_random, kinds[2]);
    EXPECT_EQ(report.total(), 205u);
}

TEST(TransferEmbeddings, AveragedRowsRespectNormBound) {
    const DonorModel donor = random_donor(fixtures::toy_tokenizer(260, 1, 150, "large"), 2);
    const Tokenizer target = fixtures::toy_tokenizer(400, 2, 150, "small");
    const auto [emb, report] = transfer_embeddings(donor, target, 1);
    double max_norm = 0.0;
    for (std::size_t r = 0; r < donor.embeddings().rows(); ++r) {
        double n = 0;
        for (const float x : donor.embeddings().row(r)) {
            n += static_cast<double>(x) * x;
        }
        max_norm = std::max(max_norm, std::sqrt(n));
    }
    for (const auto& t : report.tokens) {
        if (t.kind != TransferKind::Averaged) {
            continue;
        }
        double n = 0;
        for (const float x : emb.row(static_cast<std::size_t>(t.id))) {
            n += static_cast<double>(x) * x;
        }
        EXPECT_LE(std::sqrt(n), max_norm * (1 + 1e-6));
    }
    EXPECT_GT(report.averaged, 0u);
}

TEST(TransferEmbeddings, ForeignBoundaryMarkerIsCanonicalized) {
    // donor written with a 'Ġ'-style marker
    DonorModel donor{make_tokenizer({"Ġab", "c"}, {}), {}, {}, "Ġ"};
    Tensor<float> emb({7, 1});
    emb.row(5)[0] = 3.0f;
    donor.params.emplace("embeddings.word", emb);
    const auto [out, report] = transfer_embeddings(donor, make_tokenizer({B + "ab"}, {}), 0);
    EXPECT_EQ(out.row(5)[0], 3.0f);
    EXPECT_EQ(report.tokens[5].kind, TransferKind::Direct);
}

TEST(TransferEmbeddings, SpecialTokenMap) {
    auto toks = default_specials();
    toks.push_back("<s>");
    DonorModel donor{Tokenizer(Vocab(toks, 6), {}), {}, {}};
    Tensor<float> emb({6, 1}, {0, 1, 2, 3, 4, 5});
    donor.params.emplace("embeddings.word", emb);
    const Tokenizer target = make_tokenizer({}, {});
    const auto [plain, r1] = transfer_embeddings(donor, target, 0);
    EXPECT_EQ(plain.row(2)[0], 2.0f);
    const auto [mapped, r2] = transfer_embeddings(donor, target, 0, {{"[CLS]", "<s>"}});
    EXPECT_EQ(mapped.row(2)[0], 5.0f);
    EXPECT_EQ(r2.tokens[2].donor_tokens, (std::vector<std::string>{"<s>"}));

    fixtures::TempDir dir;
    fixtures::write_file(dir / "map.txt", "# comment\n[CLS] <s>\n\n[SEP] </s>  # trailing\n");
    EXPECT_EQ(load_special_map(dir / "map.txt"), (SpecialTokenMap{{"[CLS]", "<s>"}, {"[SEP]", "</s>"}}));
    fixtures::write_file(dir / "bad.txt", "[CLS]\n");
    EXPECT_THROW(load_special_map(dir / "bad.txt"), FormatError);
}

TEST(TransferEmbeddings, Errors) {
    DonorModel donor{make_tokenizer({"x"}, {}), {}, {}};
    donor.params.emplace("embeddings.word", Tensor<float>({6, 0}));
    EXPECT_THROW(transfer_embeddings(donor, donor.tokenizer, 0), ConfigError);
    donor.params.at("embeddings.word") = Tensor<float>({5, 2});
    EXPECT_THROW(transfer_embeddings(donor, donor.tokenizer, 0), ShapeError);
    donor.params.at("embeddings.word") = Tensor<float>({6, 2});
    donor.params.at("embeddings.word").data[3] = NAN;
    EXPECT_THROW(transfer_embeddings(donor, donor.tokenizer, 0), NumericError);
}

TEST(GraftEncoder, IdentityConfigCopiesEveryEncoderTensor) {
    const DonorModel donor = random_donor(fixtures::toy_tokenizer(280, 3), 11);
    const auto grafted = graft_encoder(donor, donor.config, 0);
    for (const auto& [name, shape] : parameter_shapes(donor.config)) {
        if (is_vocab_tensor(name)) {
            EXPECT_EQ(grafted.count(name), 0u) << name;
        } else {
            EXPECT_EQ(grafted.at(name), donor.params.at(name)) << name;
        }
    }
}

TEST(GraftEncoder, LayerMismatchNamesTensor) {
    const DonorModel donor = random_donor(fixtures::toy_tokenizer(280, 3), 11);
    ModelConfig target = donor.config;
    target.layers = 4;
    try {
        graft_encoder(donor, target, 0);
        FAIL();
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("layer.2"), std::string::npos) << msg;
        EXPECT_NE(msg.find("missing"), std::string::npos) << msg;
    }
    target = donor.config;
    target.ff_dim *= 2;
    try {
        graft_encoder(donor, target, 0);
        FAIL();
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("layer.0.ffn.in.weight: donor [8, 16], target [8, 32]"), std::string::npos) << msg;
    }
}

TEST(GraftEncoder, LongerPositionTableIsPaddedWithSeededGaussian) {
    DonorModel donor = random_donor(fixtures::toy_tokenizer(280, 3), 11, 32);
    donor.config.max_positions = 128;
    donor.config.max_seq_len = 128;
    donor.params = init_params<float>(donor.config, 4);
    ModelConfig target = donor.config;
    target.max_positions = 256;
    const auto g = graft_encoder(donor, target, 5);
    const auto& pos = g.at("embeddings.position");
    ASSERT_EQ(pos.shape, (Shape{256, 32}));
    const auto& src = donor.params.at("embeddings.position");
    for (std::size_t r = 0; r < 128; ++r) {
        for (std::size_t j = 0; j < 32; ++j) {
            ASSERT_EQ(pos.row(r)[j], src.row(r)[j]);
        }
    }
    double s = 0, s2 = 0;
    for (std::size_t r = 128; r < 256; ++r) {
        for (const float x : pos.row(r)) {
            s += x;
            s2 += static_cast<double>(x) * x;
        }
    }
    const double n = 128.0 * 32.0;
    EXPECT_NEAR(s / n, 0.0, 0.002);
    EXPECT_NEAR(std::sqrt(s2 / n - (s / n) * (s / n)), 0.02, 0.002);
    EXPECT_EQ(graft_encoder(donor, target, 5).at("embeddings.position"), pos);

    target.max_positions = 64;
    target.max_seq_len = 64;
    const auto shorter = graft_encoder(donor, target, 5).at("embeddings.position");
    EXPECT_EQ(shorter.data, std::vector<float>(src.data.begin(), src.data.begin() + 64 * 32));
}

TEST(TokenType, CopyOrZeros) {
    EXPECT_EQ(init_token_type(std::nullopt, 8), Tensor<float>({2, 8}));
    const Tensor<float> donor({2, 3}, {1, 2, 3, 4, 5, 6});
    EXPECT_EQ(init_token_type(donor, 3), donor);
    EXPECT_THROW(init_token_type(donor, 4), ShapeError);
}

TEST(TransferModel, BuildsValidTrainableModel) {
    const DonorModel donor = random_donor(fixtures::toy_tokenizer(300, 1, 200, "large"), 6, 16);
    const Tokenizer target = fixtures::toy_tokenizer(280, 2);
    const auto res = transfer_model(donor, target, 3);
    EXPECT_EQ(res.config.vocab_size, 280u);
    EXPECT_NO_THROW(validate_params(res.config, res.params));
    EXPECT_EQ(res.params.at("embeddings.token_type"), Tensor<float>({2, 16}));
    EXPECT_EQ(res.params.at("layer.1.ffn.out.weight"), donor.params.at("layer.1.ffn.out.weight"));

    std::ostringstream report;
    res.report.write(report);
    EXPECT_NE(report.str().find("# direct_copies "), std::string::npos);
    EXPECT_NE(report.str().find("\"kind\":\"averaged\""), std::string::npos);
}
