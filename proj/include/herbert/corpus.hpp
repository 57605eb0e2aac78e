#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "herbert/error.hpp"
#include "herbert/rng.hpp"
#include "herbert/utf8.hpp"

namespace herbert {

struct Document {
    std::string id;
    std::string source;
    std::string text;

    bool operator==(const Document&) const = default;
};

/// Lazy, single-pass sequence of documents.
class DocumentStream {
public:
    using Producer = std::function<std::optional<Document>()>;

    DocumentStream() = default;
    explicit DocumentStream(Producer next) : next_(std::move(next)) {}

    static DocumentStream from_vector(std::vector<Document> docs) {
        auto shared = std::make_shared<std::vector<Document>>(std::move(docs));
        return DocumentStream([shared, i = std::size_t{0}]() mutable -> std::optional<Document> {
            if (i >= shared->size()) {
                return std::nullopt;
            }
            return (*shared)[i++];
        });
    }

    std::optional<Document> next() { return next_ ? next_() : std::nullopt; }

    std::vector<Document> collect() {
        std::vector<Document> out;
        while (auto doc = next()) {
            out.push_back(std::move(*doc));
        }
        return out;
    }

private:
    Producer next_;
};

enum class CorpusFormat { PlainBlankline, JsonLines };

inline CorpusFormat parse_corpus_format(const std::string& name) {
    if (name == "plain" || name == "plain-blankline") {
        return CorpusFormat::PlainBlankline;
    }
    if (name == "jsonl" || name == "jsonlines") {
        return CorpusFormat::JsonLines;
    }
    throw ConfigError("unknown corpus format '" + name + "' (expected plain-blankline or jsonlines)");
}

namespace detail {

inline std::string trim(std::string_view s) {
    std::size_t b = 0;
    std::size_t e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) {
        ++b;
    }
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) {
        --e;
    }
    return std::string(s.substr(b, e - b));
}

struct IngestState {
    std::ifstream in;
    CorpusFormat format;
    std::string source;
    std::size_t line_no = 0;
    std::size_t doc_no = 0;
    std::unordered_set<std::string> seen_ids;

    std::string fresh_id() { return source + ":" + std::to_string(doc_no); }

    void claim(const std::string& id) {
        if (!seen_ids.insert(id).second) {
            throw FormatError(source + ": duplicate document id '" + id + "' at line " + std::to_string(line_no));
        }
    }

    std::optional<Document> next_plain() {
        std::string block;
        std::string line;
        while (std::getline(in, line)) {
            ++line_no;
            if (!line.empty() && line.back() == '\r') {
                line.pop_back();
            }
            if (trim(line).empty()) {
                if (!block.empty()) {
                    break;
                }
                continue;
            }
            if (!block.empty()) {
                block += '\n';
            }
            block += line;
        }
        if (block.empty()) {
            return std::nullopt;
        }
        Document doc{fresh_id(), source, utf8::to_nfc(block)};
        claim(doc.id);
        ++doc_no;
        return doc;
    }

    std::optional<Document> next_jsonl() {
        std::string line;
        while (std::getline(in, line)) {
            ++line_no;
            if (trim(line).empty()) {
                continue;
            }
            nlohmann::json record;
            try {
                record = nlohmann::json::parse(line);
            } catch (const nlohmann::json::parse_error& e) {
                throw FormatError(source + ": malformed JSON at line " + std::to_string(line_no) + ": " + e.what());
            }
            if (!record.is_object() || !record.contains("text") || !record["text"].is_string()) {
                throw FormatError(source + ": line " + std::to_string(line_no) + " lacks a string \"text\" field");
            }
            std::string text = utf8::to_nfc(record["text"].get<std::string>());
            if (trim(text).empty()) {
                throw FormatError(source + ": empty document text at line " + std::to_string(line_no));
            }
            std::string id;
            if (record.contains("id")) {
                const auto& raw = record["id"];
                id = raw.is_string() ? raw.get<std::string>() : raw.dump();
            } else {
                id = fresh_id();
            }
            claim(id);
            ++doc_no;
            return Document{std::move(id), source, std::move(text)};
        }
        return std::nullopt;
    }
};

} // namespace detail

/// Opens `path` and streams its documents in file order. Text is normalized
/// to NFC. The source name defaults to the file stem.
inline DocumentStream ingest(const std::filesystem::path& path, CorpusFormat format, std::string source = {}) {
    auto state = std::make_shared<detail::IngestState>();
    state->in.open(path);
    if (!state->in) {
        throw IoError("cannot read corpus file " + path.string());
    }
    state->format = format;
    state->source = source.empty() ? path.stem().string() : std::move(source);
    return DocumentStream([state]() -> std::optional<Document> {
        return state->format == CorpusFormat::PlainBlankline ? state->next_plain() : state->next_jsonl();
    });
}

/// Concatenates named sources in the given order, tagging each document with
/// its source. Names must be unique.
inline DocumentStream mix_corpora(std::vector<std::pair<std::string, DocumentStream>> sources) {
    std::set<std::string> names;
    for (const auto& [name, stream] : sources) {
        if (!names.insert(name).second) {
            throw ConfigError("duplicate corpus source name '" + name + "'");
        }
    }
    auto shared = std::make_shared<std::vector<std::pair<std::string, DocumentStream>>>(std::move(sources));
    return DocumentStream([shared, current = std::size_t{0}]() mutable -> std::optional<Document> {
        while (current < shared->size()) {
            auto& [name, stream] = (*shared)[current];
            if (auto doc = stream.next()) {
                doc->source = name;
                return doc;
            }
            ++current;
        }
        return std::nullopt;
    });
}

/// Materializes and permutes a stream with a seeded Fisher-Yates shuffle.
/// Mixture weighting between sources is not modelled; this only decorrelates
/// document order.
inline DocumentStream shuffled(DocumentStream stream, std::uint64_t seed) {
    auto docs = stream.collect();
    Rng rng = Rng::stream(seed, "corpus-shuffle");
    for (std::size_t i = docs.size(); i > 1; --i) {
        std::swap(docs[i - 1], docs[rng.below(i)]);
    }
    return DocumentStream::from_vector(std::move(docs));
}

struct CorpusStats {
    std::uint64_t token_count = 0;
    std::uint64_t document_count = 0;
    double avg_len = 0.0;

    bool operator==(const CorpusStats&) const = default;
};

/// Single pass over the stream. `Tok` is anything with
/// `encode(std::string_view) -> range of ids` (dropout-free).
template <class Tok>
CorpusStats corpus_stats(DocumentStream docs, const Tok& tokenizer) {
    CorpusStats stats;
    while (auto doc = docs.next()) {
        stats.token_count += tokenizer.encode(doc->text).size();
        ++stats.document_count;
    }
    stats.avg_len = stats.document_count == 0
                        ? 0.0
                        : static_cast<double>(stats.token_count) / static_cast<double>(stats.document_count);
    return stats;
}

struct SentenceList {
    std::string document_id;
    std::vector<std::string> sentences;
};

/// Rule-based segmentation: a boundary follows `.`, `!` or `?` when the next
/// non-space character is uppercase or a digit, and every newline is a
/// boundary. Inter-sentence whitespace is dropped; nothing else is.
inline SentenceList split_sentences(const Document& doc) {
    SentenceList out{doc.id, {}};
    const std::string_view text = doc.text;

    auto flush = [&](std::size_t begin, std::size_t end) {
        std::string s = detail::trim(text.substr(begin, end - begin));
        if (!s.empty()) {
            out.sentences.push_back(std::move(s));
        }
    };

    std::size_t start = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t cp_end = pos;
        const char32_t cp = utf8::next(text, cp_end);
        if (cp == U'\n') {
            flush(start, pos);
            start = cp_end;
        } else if (cp == U'.' || cp == U'!' || cp == U'?') {
            // Look past horizontal whitespace for the start of the next sentence.
            std::size_t look = cp_end;
            bool saw_space = false;
            char32_t following = 0;
            while (look < text.size()) {
                std::size_t probe = look;
                const char32_t c = utf8::next(text, probe);
                if (c != U'\n' && utf8::is_space(c)) {
                    saw_space = true;
                    look = probe;
                    continue;
                }
                following = c;
                break;
            }
            if (saw_space && following != 0 && (utf8::is_upper(following) || utf8::is_digit(following))) {
                flush(start, cp_end);
                start = cp_end;
            }
        }
        pos = cp_end;
    }
    flush(start, text.size());
    return out;
}

} // namespace herbert
