#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "herbert/corpus.hpp"
#include "herbert/error.hpp"
#include "herbert/rng.hpp"
#include "herbert/utf8.hpp"

namespace herbert {

using TokenId = std::int32_t;

/// Word-boundary marker (U+2581) prefixed to the first symbol of every word
/// that follows whitespace.
inline constexpr char32_t kBoundaryCodepoint = U'▁';
inline const std::string kBoundary = utf8::encode(kBoundaryCodepoint);

inline const std::vector<std::string>& default_specials() {
    static const std::vector<std::string> specials{"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
    return specials;
}

/// Bijection between token strings and dense ids. Specials occupy the lowest
/// ids and must include the five core names.
class Vocab {
public:
    Vocab() = default;

    Vocab(std::vector<std::string> tokens, std::size_t num_specials)
        : tokens_(std::move(tokens)), num_specials_(num_specials) {
        if (num_specials_ > tokens_.size()) {
            throw ConfigError("vocab declares more specials than tokens");
        }
        index_.reserve(tokens_.size());
        for (std::size_t i = 0; i < tokens_.size(); ++i) {
            if (tokens_[i].empty()) {
                throw FormatError("empty token at id " + std::to_string(i));
            }
            if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
                throw FormatError("duplicate token '" + tokens_[i] + "' at id " + std::to_string(i));
            }
        }
        for (const auto& name : default_specials()) {
            const auto id = find(name);
            if (!id || static_cast<std::size_t>(*id) >= num_specials_) {
                throw FormatError("vocab lacks special token " + name);
            }
        }
        pad_ = *find("[PAD]");
        unk_ = *find("[UNK]");
        cls_ = *find("[CLS]");
        sep_ = *find("[SEP]");
        mask_ = *find("[MASK]");
    }

    std::size_t size() const { return tokens_.size(); }
    bool empty() const { return tokens_.empty(); }
    std::size_t num_specials() const { return num_specials_; }

    std::optional<TokenId> find(std::string_view token) const {
        const auto it = index_.find(std::string(token));
        if (it == index_.end()) {
            return std::nullopt;
        }
        return it->second;
    }

    const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
    const std::vector<std::string>& tokens() const { return tokens_; }

    bool is_special(TokenId id) const { return id >= 0 && static_cast<std::size_t>(id) < num_specials_; }

    TokenId pad_id() const { return pad_; }
    TokenId unk_id() const { return unk_; }
    TokenId cls_id() const { return cls_; }
    TokenId sep_id() const { return sep_; }
    TokenId mask_id() const { return mask_; }

    bool operator==(const Vocab& other) const {
        return tokens_ == other.tokens_ && num_specials_ == other.num_specials_;
    }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> index_;
    std::size_t num_specials_ = 0;
    TokenId pad_ = 0, unk_ = 0, cls_ = 0, sep_ = 0, mask_ = 0;
};

/// Ranked merge rules; rank is the position in the list.
struct MergeTable {
    std::vector<std::pair<std::string, std::string>> merges;

    std::size_t size() const { return merges.size(); }
    bool operator==(const MergeTable&) const = default;
};

struct PreToken {
    std::string text;
    bool word_initial = false;
};

/// Whitespace split, then punctuation isolation inside each chunk. Only the
/// first piece of a chunk is word-initial, so "kota." yields "kota"
/// (initial) and "." (attached).
inline std::vector<PreToken> pretokenize(std::string_view text) {
    std::vector<PreToken> out;
    std::string current;
    bool chunk_start = true;
    auto emit = [&] {
        if (!current.empty()) {
            out.push_back({std::move(current), chunk_start});
            current.clear();
            chunk_start = false;
        }
    };
    for (std::size_t pos = 0; pos < text.size();) {
        const std::size_t start = pos;
        const char32_t cp = utf8::next(text, pos);
        if (utf8::is_space(cp)) {
            emit();
            chunk_start = true;
            continue;
        }
        if (utf8::is_punct(cp)) {
            emit();
            current.assign(text.substr(start, pos - start));
            emit();
            continue;
        }
        current.append(text.substr(start, pos - start));
    }
    emit();
    return out;
}

/// Base symbols of a pre-token: one per codepoint, the first carrying the
/// boundary marker when the word is initial.
inline std::vector<std::string> word_symbols(const PreToken& word) {
    auto symbols = utf8::chars(word.text);
    if (word.word_initial && !symbols.empty()) {
        symbols.front() = kBoundary + symbols.front();
    }
    return symbols;
}

/// Codepoint-wise ordering in which the boundary marker sorts before every
/// other character. Used for deterministic tie-breaking during training.
inline bool symbol_less(std::string_view a, std::string_view b) {
    std::size_t i = 0;
    std::size_t j = 0;
    while (i < a.size() && j < b.size()) {
        char32_t ca = utf8::next(a, i);
        char32_t cb = utf8::next(b, j);
        const auto key = [](char32_t c) -> std::int64_t {
            return c == kBoundaryCodepoint ? std::int64_t{-1} : static_cast<std::int64_t>(c);
        };
        if (key(ca) != key(cb)) {
            return key(ca) < key(cb);
        }
    }
    return (a.size() - i) < (b.size() - j);
}

inline bool pair_less(const std::pair<std::string, std::string>& a, const std::pair<std::string, std::string>& b) {
    if (a.first != b.first) {
        return symbol_less(a.first, b.first);
    }
    return symbol_less(a.second, b.second);
}

struct EncodeOptions {
    double dropout_p = 0.0;
    Rng* rng = nullptr; ///< Required when dropout_p > 0; never touched otherwise.
};

struct Encoding {
    std::vector<TokenId> ids;
    /// Half-open [begin, end) token ranges, one per pre-token word.
    std::vector<std::pair<std::size_t, std::size_t>> word_spans;
};

/// Trained vocabulary plus merge table, with an id-level merge index for
/// encoding. Immutable after construction; safe for concurrent encodes.
class Tokenizer {
public:
    Tokenizer() = default;

    Tokenizer(Vocab vocab, MergeTable merges) : vocab_(std::move(vocab)), merges_(std::move(merges)) {
        if (vocab_.empty()) {
            throw ConfigError("tokenizer vocab is empty");
        }
        merge_index_.reserve(merges_.size());
        for (std::size_t rank = 0; rank < merges_.size(); ++rank) {
            const auto& [left, right] = merges_.merges[rank];
            const auto l = vocab_.find(left);
            const auto r = vocab_.find(right);
            const auto out = vocab_.find(left + right);
            if (!l || !r || !out) {
                throw FormatError("merge " + std::to_string(rank) + " (" + left + " " + right +
                                  ") references a token missing from the vocab");
            }
            if (!merge_index_.emplace(pair_key(*l, *r), MergeRule{static_cast<std::uint32_t>(rank), *out}).second) {
                throw FormatError("duplicate merge pair at rank " + std::to_string(rank));
            }
        }
    }

    const Vocab& vocab() const { return vocab_; }
    const MergeTable& merges() const { return merges_; }

    /// Deterministic (dropout-free) encoding.
    std::vector<TokenId> encode(std::string_view text) const { return encode_full(text, {}).ids; }

    std::vector<TokenId> encode(std::string_view text, const EncodeOptions& opts) const {
        return encode_full(text, opts).ids;
    }

    Encoding encode_full(std::string_view text, const EncodeOptions& opts) const {
        Encoding enc;
        for (const auto& word : pretokenize(text)) {
            const std::size_t begin = enc.ids.size();
            encode_symbols(word_symbols(word), opts, enc.ids);
            enc.word_spans.emplace_back(begin, enc.ids.size());
        }
        return enc;
    }

    /// Segments one word given as already split base symbols.
    std::vector<TokenId> encode_word(const std::vector<std::string>& symbols, const EncodeOptions& opts = {}) const {
        std::vector<TokenId> out;
        encode_symbols(symbols, opts, out);
        return out;
    }

    std::string decode(const std::vector<TokenId>& ids) const {
        std::string out;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab_.size()) {
                throw FormatError("token id " + std::to_string(ids[i]) + " out of range at position " +
                                  std::to_string(i));
            }
            const std::string& tok = vocab_.token(ids[i]);
            if (tok.rfind(kBoundary, 0) == 0) {
                out += ' ';
                out.append(tok, kBoundary.size());
            } else {
                out += tok;
            }
        }
        if (!out.empty() && out.front() == ' ') {
            out.erase(0, 1);
        }
        return out;
    }

    void save(const std::filesystem::path& dir) const {
        std::filesystem::create_directories(dir);
        std::ofstream vocab_out(dir / "vocab.txt", std::ios::binary | std::ios::trunc);
        std::ofstream merges_out(dir / "merges.txt", std::ios::binary | std::ios::trunc);
        if (!vocab_out || !merges_out) {
            throw IoError("cannot write tokenizer files under " + dir.string());
        }
        for (const auto& tok : vocab_.tokens()) {
            vocab_out << tok << '\n';
        }
        for (const auto& [l, r] : merges_.merges) {
            merges_out << l << ' ' << r << '\n';
        }
    }

    static Tokenizer load(const std::filesystem::path& dir) {
        std::ifstream vocab_in(dir / "vocab.txt", std::ios::binary);
        std::ifstream merges_in(dir / "merges.txt", std::ios::binary);
        if (!vocab_in || !merges_in) {
            throw IoError("cannot read tokenizer files (vocab.txt, merges.txt) under " + dir.string());
        }
        std::vector<std::string> tokens;
        std::size_t num_specials = 0;
        bool in_specials = true;
        for (std::string line; std::getline(vocab_in, line);) {
            if (in_specials && is_special_name(line)) {
                ++num_specials;
            } else {
                in_specials = false;
            }
            tokens.push_back(std::move(line));
        }
        MergeTable merges;
        std::size_t line_no = 0;
        for (std::string line; std::getline(merges_in, line);) {
            ++line_no;
            const auto space = line.find(' ');
            if (space == std::string::npos || space == 0 || space + 1 >= line.size() ||
                line.find(' ', space + 1) != std::string::npos) {
                throw FormatError("merges.txt line " + std::to_string(line_no) + " is not 'left right'");
            }
            merges.merges.emplace_back(line.substr(0, space), line.substr(space + 1));
        }
        return Tokenizer(Vocab(std::move(tokens), num_specials), std::move(merges));
    }

private:
    struct MergeRule {
        std::uint32_t rank;
        TokenId result;
    };

    static std::uint64_t pair_key(TokenId l, TokenId r) {
        return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(l)) << 32) | static_cast<std::uint32_t>(r);
    }

    static bool is_special_name(std::string_view s) {
        if (s.size() < 3 || s.front() != '[' || s.back() != ']') {
            return false;
        }
        return std::all_of(s.begin() + 1, s.end() - 1, [](char c) { return (c >= 'A' && c <= 'Z') || c == '_'; });
    }

    // Each pass: every applicable pair occurrence survives with probability
    // 1 - p; the lowest-ranked survivor (leftmost on ties) is merged. The word
    // is done when a pass has no survivors.
    void encode_symbols(const std::vector<std::string>& symbols, const EncodeOptions& opts,
                        std::vector<TokenId>& out) const {
        std::vector<TokenId> ids;
        ids.reserve(symbols.size());
        for (const auto& s : symbols) {
            ids.push_back(vocab_.find(s).value_or(vocab_.unk_id()));
        }
        const bool dropout = opts.dropout_p > 0.0;
        if (dropout && opts.rng == nullptr) {
            throw ConfigError("BPE dropout requested without an RNG");
        }
        while (ids.size() > 1) {
            std::uint32_t best_rank = std::numeric_limits<std::uint32_t>::max();
            std::size_t best_pos = 0;
            TokenId best_result = 0;
            for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
                const auto it = merge_index_.find(pair_key(ids[i], ids[i + 1]));
                if (it == merge_index_.end()) {
                    continue;
                }
                if (dropout && opts.rng->bernoulli(opts.dropout_p)) {
                    continue;
                }
                if (it->second.rank < best_rank) {
                    best_rank = it->second.rank;
                    best_pos = i;
                    best_result = it->second.result;
                }
            }
            if (best_rank == std::numeric_limits<std::uint32_t>::max()) {
                break;
            }
            ids[best_pos] = best_result;
            ids.erase(ids.begin() + static_cast<std::ptrdiff_t>(best_pos) + 1);
        }
        out.insert(out.end(), ids.begin(), ids.end());
    }

    Vocab vocab_;
    MergeTable merges_;
    std::unordered_map<std::uint64_t, MergeRule> merge_index_;
};

struct BpeTrainResult {
    Tokenizer tokenizer;
    /// Final segmentation of every distinct training word, keyed by the
    /// word's symbol string joined with spaces.
    std::map<std::string, std::vector<std::string>> segmentations;
};

/// Greedy BPE training. Repeatedly merges the most frequent adjacent pair
/// (ties broken by `pair_less`) until the vocab reaches `vocab_size` or no
/// pair occurs at least twice.
inline BpeTrainResult train_bpe(DocumentStream corpus, std::size_t vocab_size,
                                const std::vector<std::string>& specials = default_specials()) {
    std::map<std::vector<std::string>, std::uint64_t> word_counts;
    std::size_t docs = 0;
    while (auto doc = corpus.next()) {
        ++docs;
        for (const auto& word : pretokenize(doc->text)) {
            ++word_counts[word_symbols(word)];
        }
    }
    if (docs == 0) {
        throw ConfigError("cannot train a tokenizer on an empty corpus");
    }

    std::vector<std::string> alphabet;
    {
        std::vector<std::string> all;
        for (const auto& [symbols, count] : word_counts) {
            all.insert(all.end(), symbols.begin(), symbols.end());
        }
        std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return symbol_less(a, b); });
        all.erase(std::unique(all.begin(), all.end()), all.end());
        alphabet = std::move(all);
    }
    if (vocab_size < alphabet.size() + specials.size()) {
        throw ConfigError("vocab size " + std::to_string(vocab_size) + " is smaller than alphabet (" +
                          std::to_string(alphabet.size()) + ") plus specials (" + std::to_string(specials.size()) +
                          ")");
    }

    std::vector<std::string> tokens = specials;
    std::unordered_map<std::string, TokenId> index;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (!index.emplace(tokens[i], static_cast<TokenId>(i)).second) {
            throw ConfigError("duplicate special token " + tokens[i]);
        }
    }
    for (const auto& a : alphabet) {
        if (index.emplace(a, static_cast<TokenId>(tokens.size())).second) {
            tokens.push_back(a);
        }
    }

    struct Word {
        std::vector<TokenId> ids;
        std::uint64_t count;
        std::string key;
    };
    std::vector<Word> words;
    words.reserve(word_counts.size());
    for (const auto& [symbols, count] : word_counts) {
        Word w{{}, count, {}};
        for (const auto& s : symbols) {
            w.ids.push_back(index.at(s));
            if (!w.key.empty()) {
                w.key += ' ';
            }
            w.key += s;
        }
        words.push_back(std::move(w));
    }

    MergeTable merges;
    auto key_of = [](TokenId l, TokenId r) {
        return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(l)) << 32) | static_cast<std::uint32_t>(r);
    };
    while (tokens.size() < vocab_size) {
        std::unordered_map<std::uint64_t, std::uint64_t> pair_counts;
        for (const auto& w : words) {
            for (std::size_t i = 0; i + 1 < w.ids.size(); ++i) {
                pair_counts[key_of(w.ids[i], w.ids[i + 1])] += w.count;
            }
        }
        std::uint64_t best_count = 0;
        std::pair<std::string, std::string> best;
        std::uint64_t best_key = 0;
        for (const auto& [key, count] : pair_counts) {
            if (count < best_count) {
                continue;
            }
            std::pair<std::string, std::string> candidate{tokens[key >> 32], tokens[key & 0xFFFFFFFFULL]};
            if (count > best_count || pair_less(candidate, best)) {
                best_count = count;
                best = std::move(candidate);
                best_key = key;
            }
        }
        if (best_count < 2) {
            break;
        }
        const auto left = static_cast<TokenId>(best_key >> 32);
        const auto right = static_cast<TokenId>(best_key & 0xFFFFFFFFULL);
        std::string merged = best.first + best.second;
        TokenId result;
        if (const auto it = index.find(merged); it != index.end()) {
            result = it->second;
        } else {
            result = static_cast<TokenId>(tokens.size());
            index.emplace(merged, result);
            tokens.push_back(merged);
        }
        merges.merges.push_back(std::move(best));
        for (auto& w : words) {
            std::vector<TokenId> next;
            next.reserve(w.ids.size());
            for (std::size_t i = 0; i < w.ids.size(); ++i) {
                if (i + 1 < w.ids.size() && w.ids[i] == left && w.ids[i + 1] == right) {
                    next.push_back(result);
                    ++i;
                } else {
                    next.push_back(w.ids[i]);
                }
            }
            w.ids = std::move(next);
        }
    }

    BpeTrainResult result{Tokenizer(Vocab(tokens, specials.size()), std::move(merges)), {}};
    for (const auto& w : words) {
        std::vector<std::string> pieces;
        for (const TokenId id : w.ids) {
            pieces.push_back(tokens[static_cast<std::size_t>(id)]);
        }
        result.segmentations.emplace(w.key, std::move(pieces));
    }
    return result;
}

} // namespace herbert
