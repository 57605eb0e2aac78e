#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <unicode/uchar.h>

#include "herbert/corpus.hpp"
#include "herbert/error.hpp"
#include "herbert/rng.hpp"
#include "herbert/utf8.hpp"

// Seeded generator for a small synthetic fusional language: gendered nouns
// with case endings, agreeing adjectives, person-marked verbs and
// prepositions that govern case. Every corpus drawn from it shares one
// lexicon, so models trained on different draws share structure.

namespace herbert::synthetic {

enum class Case { Nom, Acc, Gen, Loc, Ins };
inline constexpr std::size_t kTopics = 8;

struct Lexicon {
    struct Noun {
        std::string stem;
        bool feminine;
        std::size_t topic;
    };
    std::vector<Noun> nouns;
    std::vector<std::string> adjectives;
    std::vector<std::string> verbs;

    static const Lexicon& standard() {
        static const Lexicon lex = build(0x4845524245525400ULL);
        return lex;
    }

    static Lexicon build(std::uint64_t seed) {
        static constexpr std::array<std::string_view, 17> onsets{"k", "d", "m", "l", "r", "p", "s", "t", "w",
                                                                 "z", "b", "g", "n", "ch", "sz", "rz", "ł"};
        static constexpr std::array<std::string_view, 7> vowels{"a", "o", "e", "i", "u", "y", "ó"};
        static constexpr std::array<std::string_view, 8> codas{"", "", "n", "k", "r", "s", "m", "t"};
        Rng rng = Rng::stream(seed, "lexicon");
        std::vector<std::string> seen;
        auto make_stem = [&](bool consonant_final) {
            for (;;) {
                std::string stem;
                const std::size_t syllables = 1 + rng.below(2);
                for (std::size_t s = 0; s < syllables; ++s) {
                    stem += onsets[rng.below(onsets.size())];
                    stem += vowels[rng.below(vowels.size())];
                    if (s + 1 == syllables || rng.bernoulli(0.3)) {
                        stem += codas[rng.below(codas.size())];
                    }
                }
                if (consonant_final) {
                    stem += std::array<std::string_view, 5>{"k", "t", "r", "n", "s"}[rng.below(5)];
                }
                if (std::find(seen.begin(), seen.end(), stem) == seen.end()) {
                    seen.push_back(stem);
                    return stem;
                }
            }
        };
        Lexicon lex;
        for (std::size_t i = 0; i < 96; ++i) {
            lex.nouns.push_back({make_stem(true), rng.bernoulli(0.5), i % kTopics});
        }
        for (std::size_t i = 0; i < 32; ++i) {
            lex.adjectives.push_back(make_stem(true));
        }
        for (std::size_t i = 0; i < 40; ++i) {
            lex.verbs.push_back(make_stem(true));
        }
        return lex;
    }
};

inline std::string noun_form(const Lexicon::Noun& n, Case c) {
    static constexpr std::array<std::string_view, 5> fem{"a", "ę", "y", "e", "ą"};
    static constexpr std::array<std::string_view, 5> masc{"", "a", "u", "ie", "em"};
    return n.stem + std::string((n.feminine ? fem : masc)[static_cast<std::size_t>(c)]);
}

inline std::string adjective_form(const std::string& stem, bool feminine, Case c) {
    static constexpr std::array<std::string_view, 5> fem{"a", "ą", "ej", "ej", "ą"};
    static constexpr std::array<std::string_view, 5> masc{"y", "ego", "ego", "ym", "ym"};
    return stem + std::string((feminine ? fem : masc)[static_cast<std::size_t>(c)]);
}

inline std::string capitalize(const std::string& s) {
    if (s.empty()) {
        return s;
    }
    std::size_t pos = 0;
    const char32_t first = utf8::next(s, pos);
    std::string out = utf8::encode(static_cast<char32_t>(u_toupper(static_cast<UChar32>(first))));
    out.append(s, pos);
    return out;
}

struct SourceStyle {
    std::size_t min_sentences;
    std::size_t max_sentences;
    double adjective_rate;
    double pronoun_rate;
    double question_rate;
    double year_rate;   ///< chance of appending "w roku NNNN"
    double typo_rate;   ///< per-word chance of a swapped letter pair
    double lowercase_rate;
};

inline const std::vector<std::pair<std::string, SourceStyle>>& source_styles() {
    static const std::vector<std::pair<std::string, SourceStyle>> styles{
        {"nkjp", {4, 8, 0.35, 0.25, 0.1, 0.05, 0.0, 0.0}},
        {"wikipedia", {3, 6, 0.3, 0.05, 0.02, 0.4, 0.0, 0.0}},
        {"wolne-lektury", {10, 20, 0.6, 0.2, 0.15, 0.0, 0.0, 0.0}},
        {"ccnet-head", {4, 10, 0.3, 0.2, 0.1, 0.1, 0.02, 0.02}},
        {"ccnet-middle", {4, 10, 0.3, 0.2, 0.1, 0.1, 0.05, 0.08}},
        {"open-subtitles", {5, 12, 0.1, 0.7, 0.35, 0.0, 0.01, 0.05}},
    };
    return styles;
}

inline const SourceStyle& style_of(const std::string& source) {
    for (const auto& [name, style] : source_styles()) {
        if (name == source) {
            return style;
        }
    }
    throw ConfigError("unknown synthetic source '" + source + "'");
}

class Generator {
public:
    Generator(std::uint64_t seed, const Lexicon& lexicon = Lexicon::standard()) : rng_(seed), lex_(lexicon) {}

    /// One sentence, with nouns drawn mostly from `topic`.
    std::string sentence(const SourceStyle& style, std::size_t topic) {
        static constexpr std::array<std::pair<std::string_view, std::size_t>, 6> pronouns{
            {{"ja", 0}, {"ty", 1}, {"ona", 2}, {"on", 2}, {"my", 3}, {"oni", 4}}};
        static constexpr std::array<std::string_view, 5> person{"am", "asz", "a", "amy", "ają"};
        static constexpr std::array<std::pair<std::string_view, Case>, 6> preps{
            {{"w", Case::Loc}, {"z", Case::Ins}, {"do", Case::Gen}, {"na", Case::Acc}, {"o", Case::Loc},
             {"bez", Case::Gen}}};

        std::vector<std::string> words;
        std::size_t subject_person = 2;
        if (rng_.bernoulli(style.pronoun_rate)) {
            const auto& [p, idx] = pronouns[rng_.below(pronouns.size())];
            words.emplace_back(p);
            subject_person = idx;
        } else {
            noun_phrase(words, style, topic, Case::Nom);
        }
        words.push_back(lex_.verbs[rng_.below(lex_.verbs.size())] + std::string(person[subject_person]));
        noun_phrase(words, style, topic, Case::Acc);
        if (rng_.bernoulli(0.5)) {
            const auto& [prep, c] = preps[rng_.below(preps.size())];
            words.emplace_back(prep);
            noun_phrase(words, style, topic, c);
        }
        if (rng_.bernoulli(style.year_rate)) {
            words.emplace_back("w");
            words.emplace_back("roku");
            words.push_back(std::to_string(1800 + rng_.below(220)));
        }
        for (auto& w : words) {
            if (rng_.bernoulli(style.typo_rate)) {
                w = typo(w);
            }
        }
        std::string out;
        for (const auto& w : words) {
            if (!out.empty()) {
                out += ' ';
            }
            out += w;
        }
        if (!rng_.bernoulli(style.lowercase_rate)) {
            out = capitalize(out);
        }
        const double r = rng_.uniform();
        out += r < style.question_rate ? "?" : (r < style.question_rate * 1.3 ? "!" : ".");
        return out;
    }

    Document document(const std::string& source, std::size_t index) {
        const SourceStyle& style = style_of(source);
        const std::size_t topic = rng_.below(kTopics);
        const std::size_t n = style.min_sentences + rng_.below(style.max_sentences - style.min_sentences + 1);
        std::string text;
        for (std::size_t i = 0; i < n; ++i) {
            if (!text.empty()) {
                text += ' ';
            }
            text += sentence(style, topic);
        }
        return Document{source + ":" + std::to_string(index), source, std::move(text)};
    }

    Rng& rng() { return rng_; }

private:
    void noun_phrase(std::vector<std::string>& words, const SourceStyle& style, std::size_t topic, Case c) {
        const Lexicon::Noun& noun = pick_noun(topic);
        if (rng_.bernoulli(style.adjective_rate)) {
            words.push_back(adjective_form(lex_.adjectives[rng_.below(lex_.adjectives.size())], noun.feminine, c));
        }
        words.push_back(noun_form(noun, c));
    }

    const Lexicon::Noun& pick_noun(std::size_t topic) {
        if (rng_.bernoulli(0.8)) {
            const std::size_t per_topic = lex_.nouns.size() / kTopics;
            return lex_.nouns[topic + kTopics * rng_.below(per_topic)];
        }
        return lex_.nouns[rng_.below(lex_.nouns.size())];
    }

    std::string typo(const std::string& w) {
        auto cps = utf8::codepoints(w);
        if (cps.size() < 2) {
            return w;
        }
        const std::size_t i = rng_.below(cps.size() - 1);
        std::swap(cps[i], cps[i + 1]);
        std::string out;
        for (const char32_t c : cps) {
            utf8::append(out, c);
        }
        return out;
    }

    Rng rng_;
    const Lexicon& lex_;
};

/// Documents from one named source.
inline std::vector<Document> source_documents(const std::string& source, std::size_t count, std::uint64_t seed) {
    Generator gen(derive_seed(seed, "synthetic-source", fnv1a(source)));
    std::vector<Document> docs;
    docs.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        docs.push_back(gen.document(source, i));
    }
    return docs;
}

/// Relative document counts of the six source corpora (millions of
/// documents), used to apportion toy-scale presets.
inline const std::vector<std::pair<std::string, double>>& source_document_shares() {
    static const std::vector<std::pair<std::string, double>> shares{
        {"nkjp", 3.9},       {"wikipedia", 1.4},    {"wolne-lektury", 0.0055},
        {"ccnet-head", 7.0}, {"ccnet-middle", 7.9}, {"open-subtitles", 1.1},
    };
    return shares;
}

inline std::vector<std::string> preset_sources(const std::string& preset) {
    if (preset == "small") {
        return {"nkjp", "wikipedia", "wolne-lektury"};
    }
    if (preset == "large") {
        return {"nkjp", "wikipedia", "wolne-lektury", "ccnet-head", "ccnet-middle", "open-subtitles"};
    }
    throw ConfigError("unknown corpus preset '" + preset + "' (expected small or large)");
}

/// Named sources for a preset, with `total_docs` split proportionally to the
/// source shares (at least one document per source).
inline std::vector<std::pair<std::string, DocumentStream>> preset_streams(const std::string& preset,
                                                                          std::size_t total_docs,
                                                                          std::uint64_t seed) {
    const auto names = preset_sources(preset);
    double total_share = 0.0;
    for (const auto& [name, share] : source_document_shares()) {
        if (std::find(names.begin(), names.end(), name) != names.end()) {
            total_share += share;
        }
    }
    std::vector<std::pair<std::string, DocumentStream>> out;
    for (const auto& [name, share] : source_document_shares()) {
        if (std::find(names.begin(), names.end(), name) == names.end()) {
            continue;
        }
        const auto n = std::max<std::size_t>(
            1, static_cast<std::size_t>(std::llround(static_cast<double>(total_docs) * share / total_share)));
        out.emplace_back(name, DocumentStream::from_vector(source_documents(name, n, seed)));
    }
    return out;
}

inline DocumentStream preset_corpus(const std::string& preset, std::size_t total_docs, std::uint64_t seed) {
    return mix_corpora(preset_streams(preset, total_docs, seed));
}

struct LabeledText {
    std::string text;
    std::size_t label;
};

/// Single-sentence classification task whose label is the topic group of
/// the sentence's nouns. `classes` must divide the topic count.
inline std::vector<LabeledText> probe_dataset(std::size_t count, std::size_t classes, std::uint64_t seed) {
    if (classes < 2 || classes > kTopics || kTopics % classes != 0) {
        throw ConfigError("probe classes must be 2, 4 or 8");
    }
    Generator gen(derive_seed(seed, "probe-dataset"));
    SourceStyle style = style_of("nkjp");
    style.pronoun_rate = 0.0;
    style.year_rate = 0.0;
    std::vector<LabeledText> out;
    out.reserve(count);
    const std::size_t per_class = kTopics / classes;
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t label = i % classes;
        const std::size_t topic = label * per_class + gen.rng().below(per_class);
        out.push_back({gen.sentence(style, topic), label});
    }
    return out;
}

} // namespace herbert::synthetic
