#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "herbert/error.hpp"
#include "herbert/model.hpp"
#include "herbert/rng.hpp"
#include "herbert/tensor.hpp"
#include "herbert/tokenizer.hpp"
#include "herbert/utf8.hpp"

namespace herbert {

/// Rows are token embeddings, one per vocab id.
using EmbeddingMatrix = Tensor<float>;

inline constexpr double kTransferInitStd = 0.02;

struct DonorModel {
    Tokenizer tokenizer;
    ModelConfig config;
    TensorMap<float> params;
    /// Word-boundary marker used by the donor's vocabulary strings.
    std::string boundary_marker = kBoundary;

    const EmbeddingMatrix& embeddings() const { return params.at("embeddings.word"); }
};

enum class TransferKind { Direct, Averaged, Fallback };

inline const char* to_string(TransferKind k) {
    switch (k) {
    case TransferKind::Direct:
        return "direct";
    case TransferKind::Averaged:
        return "averaged";
    case TransferKind::Fallback:
        return "fallback_random";
    }
    return "?";
}

struct TokenProvenance {
    TokenId id = 0;
    std::string token;
    TransferKind kind = TransferKind::Fallback;
    std::vector<std::string> donor_tokens; ///< the copied token, or the averaged pieces
};

struct TransferReport {
    std::size_t direct_copies = 0;
    std::size_t averaged = 0;
    std::size_t fallback_random = 0;
    std::vector<TokenProvenance> tokens;

    std::size_t total() const { return direct_copies + averaged + fallback_random; }

    /// Summary lines prefixed with '#', then one JSON object per token.
    void write(std::ostream& out) const {
        out << "# direct_copies " << direct_copies << '\n';
        out << "# averaged " << averaged << '\n';
        out << "# fallback_random " << fallback_random << '\n';
        out << "# segmentation donor-tokenizer (p=0); unknown characters dropped; all-unknown -> N(0, 0.02)\n";
        for (const auto& t : tokens) {
            nlohmann::json j{{"id", t.id}, {"token", t.token}, {"kind", to_string(t.kind)}, {"donor", t.donor_tokens}};
            out << j.dump() << '\n';
        }
    }
};

/// Target special token -> donor token. Unlisted specials map to themselves.
using SpecialTokenMap = std::map<std::string, std::string>;

/// Reads "target donor" pairs, one per line; '#' starts a comment.
inline SpecialTokenMap load_special_map(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot read special-token map " + path.string());
    }
    SpecialTokenMap map;
    std::size_t line_no = 0;
    for (std::string line; std::getline(in, line);) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) {
            line.erase(hash);
        }
        std::istringstream fields(line);
        std::string target, donor, extra;
        if (!(fields >> target)) {
            continue;
        }
        if (!(fields >> donor) || (fields >> extra)) {
            throw FormatError(path.string() + ": line " + std::to_string(line_no) + " must be 'target donor'");
        }
        map[target] = donor;
    }
    return map;
}

/// Rewrites a leading boundary marker to the shared marker.
inline std::string canonical_token(std::string_view token, std::string_view marker) {
    if (!marker.empty() && token.substr(0, marker.size()) == marker) {
        return kBoundary + std::string(token.substr(marker.size()));
    }
    return std::string(token);
}

/// Base symbols of a canonical surface string, as the donor tokenizer sees
/// them.
inline std::vector<std::string> surface_symbols(const std::string& canonical) {
    const bool initial = canonical.rfind(kBoundary, 0) == 0;
    const std::string body = initial ? canonical.substr(kBoundary.size()) : canonical;
    return word_symbols(PreToken{body, initial});
}

/// Builds one embedding row per target token:
///   1. the canonical token exists in the donor vocab -> copy its row;
///   2. otherwise segment the surface with the donor tokenizer (no dropout)
///      and average the rows of the known pieces (accumulated in double);
///   3. if no piece is known -> N(0, 0.02) from a stream keyed by token id.
inline std::pair<EmbeddingMatrix, TransferReport> transfer_embeddings(const DonorModel& donor,
                                                                      const Tokenizer& target, std::uint64_t seed,
                                                                      const SpecialTokenMap& specials = {}) {
    const Vocab& dvocab = donor.tokenizer.vocab();
    if (dvocab.empty()) {
        throw ConfigError("donor vocab is empty");
    }
    const EmbeddingMatrix& demb = donor.embeddings();
    if (demb.shape.size() != 2 || demb.rows() != dvocab.size()) {
        throw ShapeError("donor embeddings " + shape_string(demb.shape) + " do not match donor vocab size " +
                         std::to_string(dvocab.size()));
    }
    const std::size_t dim = demb.cols();
    if (dim == 0) {
        throw ConfigError("donor embedding dimension is 0");
    }
    if (!demb.all_finite()) {
        throw NumericError("donor embeddings contain non-finite values");
    }

    std::unordered_map<std::string, TokenId> donor_index;
    for (std::size_t i = 0; i < dvocab.size(); ++i) {
        donor_index.emplace(canonical_token(dvocab.token(static_cast<TokenId>(i)), donor.boundary_marker),
                            static_cast<TokenId>(i));
    }

    const Vocab& tvocab = target.vocab();
    EmbeddingMatrix out({tvocab.size(), dim});
    TransferReport report;
    report.tokens.reserve(tvocab.size());
    for (std::size_t r = 0; r < tvocab.size(); ++r) {
        const auto id = static_cast<TokenId>(r);
        TokenProvenance prov{id, tvocab.token(id), TransferKind::Fallback, {}};
        auto row = out.row(r);

        std::string key = canonical_token(prov.token, kBoundary);
        if (tvocab.is_special(id)) {
            if (const auto it = specials.find(prov.token); it != specials.end()) {
                key = it->second;
            }
        }
        if (const auto hit = donor_index.find(key); hit != donor_index.end()) {
            const auto src = demb.row(static_cast<std::size_t>(hit->second));
            std::copy(src.begin(), src.end(), row.begin());
            prov.kind = TransferKind::Direct;
            prov.donor_tokens.push_back(dvocab.token(hit->second));
            ++report.direct_copies;
        } else {
            std::vector<TokenId> pieces;
            if (!tvocab.is_special(id)) {
                pieces = donor.tokenizer.encode_word(surface_symbols(key));
            }
            std::vector<double> acc(dim, 0.0);
            std::size_t used = 0;
            for (const TokenId p : pieces) {
                if (p == dvocab.unk_id()) {
                    continue;
                }
                const auto src = demb.row(static_cast<std::size_t>(p));
                for (std::size_t j = 0; j < dim; ++j) {
                    acc[j] += static_cast<double>(src[j]);
                }
                prov.donor_tokens.push_back(dvocab.token(p));
                ++used;
            }
            if (used > 0) {
                for (std::size_t j = 0; j < dim; ++j) {
                    row[j] = static_cast<float>(acc[j] / static_cast<double>(used));
                }
                prov.kind = TransferKind::Averaged;
                ++report.averaged;
            } else {
                Rng rng = Rng::stream(seed, "transfer-fallback", r);
                for (auto& x : row) {
                    x = static_cast<float>(rng.normal(0.0, kTransferInitStd));
                }
                ++report.fallback_random;
            }
        }
        report.tokens.push_back(std::move(prov));
    }
    return {std::move(out), std::move(report)};
}

/// Tensors that depend on the vocabulary and are not grafted.
inline bool is_vocab_tensor(const std::string& name) {
    return name == "embeddings.word" || name == "embeddings.token_type" || name == "mlm.decoder.bias";
}

/// Deep copy of every non-vocabulary tensor of the donor. Position
/// embeddings are copied up to the shorter table; extra target rows are
/// drawn from N(0, 0.02). Any other shape disagreement is an error listing
/// every offending tensor.
inline TensorMap<float> graft_encoder(const DonorModel& donor, const ModelConfig& target, std::uint64_t seed) {
    target.validate();
    TensorMap<float> out;
    std::string mismatches;
    for (const auto& [name, shape] : parameter_shapes(target)) {
        if (is_vocab_tensor(name)) {
            continue;
        }
        const auto it = donor.params.find(name);
        if (name == "embeddings.position") {
            if (it == donor.params.end() || it->second.shape.size() != 2 || it->second.cols() != shape[1]) {
                mismatches += "\n  " + name + ": donor " +
                              (it == donor.params.end() ? std::string("missing") : shape_string(it->second.shape)) +
                              ", target " + shape_string(shape);
                continue;
            }
            Tensor<float> pos(shape);
            const std::size_t copied = std::min(shape[0], it->second.rows());
            for (std::size_t r = 0; r < shape[0]; ++r) {
                auto dst = pos.row(r);
                if (r < copied) {
                    const auto src = it->second.row(r);
                    std::copy(src.begin(), src.end(), dst.begin());
                } else {
                    Rng rng = Rng::stream(seed, "graft-position", r);
                    for (auto& x : dst) {
                        x = static_cast<float>(rng.normal(0.0, kTransferInitStd));
                    }
                }
            }
            out.emplace(name, std::move(pos));
            continue;
        }
        if (it == donor.params.end() || it->second.shape != shape) {
            mismatches += "\n  " + name + ": donor " +
                          (it == donor.params.end() ? std::string("missing") : shape_string(it->second.shape)) +
                          ", target " + shape_string(shape);
            continue;
        }
        out.emplace(name, it->second);
    }
    if (!mismatches.empty()) {
        throw ShapeError("donor encoder does not match target config:" + mismatches);
    }
    return out;
}

/// Two-row token-type table: a copy of the secondary donor's rows, or zeros.
inline EmbeddingMatrix init_token_type(const std::optional<EmbeddingMatrix>& secondary, std::size_t dim) {
    if (!secondary) {
        return EmbeddingMatrix({2, dim});
    }
    if (secondary->shape.size() != 2 || secondary->rows() < 2 || secondary->cols() != dim) {
        throw ShapeError("token-type donor " + shape_string(secondary->shape) + " does not provide 2 rows of dim " +
                         std::to_string(dim));
    }
    EmbeddingMatrix out({2, dim});
    std::copy(secondary->data.begin(), secondary->data.begin() + static_cast<std::ptrdiff_t>(2 * dim),
              out.data.begin());
    return out;
}

struct TransferResult {
    ModelConfig config;
    TensorMap<float> params;
    TransferReport report;
};

/// Full warm start: donor encoder and heads, transferred word embeddings,
/// token types from `token_type_donor` (zeros when absent) and a zero MLM
/// decoder bias.
inline TransferResult transfer_model(const DonorModel& donor, const Tokenizer& target, std::uint64_t seed,
                                     const std::optional<EmbeddingMatrix>& token_type_donor = std::nullopt,
                                     const SpecialTokenMap& specials = {}) {
    ModelConfig config = donor.config;
    config.vocab_size = target.vocab().size();
    config.type_vocab_size = 2;
    auto [word, report] = transfer_embeddings(donor, target, seed, specials);
    TensorMap<float> params = graft_encoder(donor, config, seed);
    params.emplace("embeddings.word", std::move(word));
    params.emplace("embeddings.token_type", init_token_type(token_type_donor, config.hidden));
    params.emplace("mlm.decoder.bias", Tensor<float>({config.vocab_size}));
    validate_params(config, params);
    return {config, std::move(params), std::move(report)};
}

} // namespace herbert
