#include "deltakv/corpus.hpp"

#include <fstream>
#include <sstream>
#include <string>

#include "deltakv/rng.hpp"

namespace deltakv {

const std::vector<Token>& Corpus::at(std::size_t i) const {
    if (i >= sequences.size()) {
        throw InputError("corpus exhausted: requested sequence " + std::to_string(i) + " of " +
                         std::to_string(sequences.size()));
    }
    return sequences[i];
}

Corpus make_markov_corpus(const MarkovCorpusConfig& config) {
    if (config.vocab == 0 || config.seq_len == 0 || config.branching == 0) {
        throw ConfigError("make_markov_corpus: vocab, seq_len and branching must be >= 1");
    }
    Rng rng(config.seed);
    std::vector<std::vector<Token>> next(config.vocab, std::vector<Token>(config.branching));
    std::vector<std::vector<double>> cdf(config.vocab, std::vector<double>(config.branching));
    for (std::size_t t = 0; t < config.vocab; ++t) {
        double acc = 0.0;
        for (std::size_t b = 0; b < config.branching; ++b) {
            next[t][b] = static_cast<Token>(rng.below(config.vocab));
            acc += 0.1 + rng.uniform();
            cdf[t][b] = acc;
        }
        for (double& c : cdf[t]) c /= acc;
    }
    Corpus corpus;
    corpus.sequences.reserve(config.n_sequences);
    for (std::size_t s = 0; s < config.n_sequences; ++s) {
        std::vector<Token> seq;
        seq.reserve(config.seq_len);
        Token cur = static_cast<Token>(rng.below(config.vocab));
        seq.push_back(cur);
        while (seq.size() < config.seq_len) {
            const double u = rng.uniform();
            std::size_t b = 0;
            while (b + 1 < config.branching && u >= cdf[cur][b]) ++b;
            cur = next[cur][b];
            seq.push_back(cur);
        }
        corpus.sequences.push_back(std::move(seq));
    }
    return corpus;
}

Corpus read_corpus_text(const std::filesystem::path& path, std::size_t vocab) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open corpus file " + path.string());
    Corpus corpus;
    std::string line;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::vector<Token> seq;
        long long v = 0;
        while (ls >> v) {
            if (v < 0 || static_cast<unsigned long long>(v) >= vocab) {
                throw InputError("corpus token " + std::to_string(v) + " out of vocabulary");
            }
            seq.push_back(static_cast<Token>(v));
        }
        if (!ls.eof()) throw InputError("corpus line is not a list of integers");
        if (!seq.empty()) corpus.sequences.push_back(std::move(seq));
    }
    return corpus;
}

void write_corpus_text(const Corpus& corpus, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write corpus file " + path.string());
    for (const auto& seq : corpus.sequences) {
        for (std::size_t i = 0; i < seq.size(); ++i) out << (i ? " " : "") << seq[i];
        out << '\n';
    }
}

}  // namespace deltakv
