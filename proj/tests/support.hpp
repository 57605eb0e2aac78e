#pragma once

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "herbert/herbert.hpp"

namespace herbert::fixtures {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("herbert-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline void write_file(const std::filesystem::path& p, const std::string& content) {
    std::ofstream out(p, std::ios::binary);
    out << content;
}

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline std::vector<Document> toy_documents(std::size_t n, std::uint64_t seed, const std::string& preset = "small") {
    return synthetic::preset_corpus(preset, n, seed).collect();
}

inline Tokenizer toy_tokenizer(std::size_t vocab_size, std::uint64_t seed, std::size_t docs = 200,
                               const std::string& preset = "small") {
    return train_bpe(DocumentStream::from_vector(toy_documents(docs, seed, preset)), vocab_size).tokenizer;
}

/// Tokenizer over an explicit vocabulary and merge list.
inline Tokenizer make_tokenizer(std::vector<std::string> body, std::vector<std::pair<std::string, std::string>> merges) {
    std::vector<std::string> tokens = default_specials();
    tokens.insert(tokens.end(), body.begin(), body.end());
    return Tokenizer(Vocab(std::move(tokens), default_specials().size()), MergeTable{std::move(merges)});
}

inline ModelConfig tiny_config(std::size_t vocab) {
    ModelConfig c;
    c.layers = 2;
    c.heads = 2;
    c.hidden = 16;
    c.ff_dim = 32;
    c.vocab_size = vocab;
    c.max_positions = 48;
    c.max_seq_len = 48;
    c.dropout_rate = 0.1;
    return c;
}

} // namespace herbert::fixtures
