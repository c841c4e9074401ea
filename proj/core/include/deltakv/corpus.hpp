#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "deltakv/model.hpp"

namespace deltakv {

// A finite list of training sequences consumed in order.
struct Corpus {
    std::vector<std::vector<Token>> sequences;

    std::size_t size() const { return sequences.size(); }
    // Throws InputError once the corpus runs out.
    const std::vector<Token>& at(std::size_t i) const;
};

struct MarkovCorpusConfig {
    std::size_t vocab = 256;
    std::size_t n_sequences = 64;
    std::size_t seq_len = 64;
    std::size_t branching = 4;  // successors per token
    std::uint64_t seed = 0;
};

// Seeded first-order Markov streams: every token has `branching` fixed
// successors with fixed random weights, so sequences are learnable.
Corpus make_markov_corpus(const MarkovCorpusConfig& config);

// One sequence per line, whitespace-separated token ids.
Corpus read_corpus_text(const std::filesystem::path& path, std::size_t vocab);
void write_corpus_text(const Corpus& corpus, const std::filesystem::path& path);

}  // namespace deltakv
