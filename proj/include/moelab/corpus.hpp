// SPDX-License-Identifier: Apache-2.0
//
// Synthetic corpora. The markov kind draws from a seeded order-n chain whose
// transition mass is Zipfian over token identity and modulated per state, so
// the stream has a long-tail unigram distribution plus learnable conditional
// structure. The bytes kind tokenizes a text file at the byte level.

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "moelab/io.hpp"
#include "moelab/rng.hpp"

namespace moelab {

enum class CorpusKind { Markov, Bytes };

inline CorpusKind parse_corpus_kind(const std::string& s) {
    if (s == "markov") return CorpusKind::Markov;
    if (s == "bytes") return CorpusKind::Bytes;
    throw ArgError("unknown corpus kind '" + s + "' (want markov|bytes)");
}

struct CorpusSpec {
    CorpusKind kind = CorpusKind::Markov;
    int vocab = 64;
    int64_t length = 1 << 20;
    uint64_t seed = 0;
    int order = 1;
    float zipf_alpha = 1.0f;   // token-identity mass ~ 1/(id+1)^alpha
    float gain = 2.0f;         // per-state modulation strength
    bool deterministic = false;  // each state maps to a single next token
    std::string text_path;     // bytes kind input
};

// P(next = v | state) proportional to zipf(v) * exp(gain * u(state, v)); the
// hash-derived factor gives every state its own distribution while keeping
// the marginal close to the Zipf law.
inline std::vector<int> gen_corpus(const CorpusSpec& spec) {
    if (spec.kind == CorpusKind::Bytes) {
        if (spec.text_path.empty()) throw ArgError("bytes corpus needs a text file path");
        std::string raw = detail::read_file(spec.text_path);
        std::vector<int> tokens;
        tokens.reserve(raw.size());
        for (unsigned char b : raw) {
            if (static_cast<int>(b) >= spec.vocab)
                throw ArgError("vocab overflow: byte " + std::to_string(static_cast<int>(b)) +
                               " >= vocab " + std::to_string(spec.vocab));
            tokens.push_back(static_cast<int>(b));
        }
        if (spec.length > 0 && static_cast<int64_t>(tokens.size()) > spec.length)
            tokens.resize(static_cast<size_t>(spec.length));
        return tokens;
    }

    if (spec.vocab < 2) throw ArgError("markov corpus needs vocab >= 2");
    if (spec.order < 1) throw ArgError("markov corpus needs order >= 1");
    if (spec.length < 1) throw ArgError("markov corpus needs positive length");

    const int V = spec.vocab;
    std::vector<double> zipf(static_cast<size_t>(V));
    for (int v = 0; v < V; ++v)
        zipf[static_cast<size_t>(v)] = 1.0 / std::pow(static_cast<double>(v + 1), static_cast<double>(spec.zipf_alpha));

    Rng rng(spec.seed, "corpus");
    std::vector<int> tokens;
    tokens.reserve(static_cast<size_t>(spec.length));
    std::vector<int> state(static_cast<size_t>(spec.order), 0);
    std::vector<double> weights(static_cast<size_t>(V));
    for (int64_t i = 0; i < spec.length; ++i) {
        uint64_t h = spec.seed ^ 0x5bf03635ull;
        for (int s : state) h = Rng::mix(h, static_cast<uint64_t>(s) + 1);
        double total = 0.0;
        int best = 0;
        for (int v = 0; v < V; ++v) {
            const uint64_t hv = Rng::mix(h, static_cast<uint64_t>(v) + 0x9e37ull);
            const double u = static_cast<double>(hv >> 11) * 0x1.0p-53;
            weights[static_cast<size_t>(v)] =
                zipf[static_cast<size_t>(v)] * std::exp(static_cast<double>(spec.gain) * u);
            total += weights[static_cast<size_t>(v)];
            if (weights[static_cast<size_t>(v)] > weights[static_cast<size_t>(best)]) best = v;
        }
        int next = best;
        if (!spec.deterministic) {
            double r = rng.next_double() * total;
            next = V - 1;
            for (int v = 0; v < V; ++v) {
                r -= weights[static_cast<size_t>(v)];
                if (r <= 0.0) {
                    next = v;
                    break;
                }
            }
        }
        tokens.push_back(next);
        for (size_t s = 0; s + 1 < state.size(); ++s) state[s] = state[s + 1];
        state.back() = next;
    }
    return tokens;
}

}  // namespace moelab
