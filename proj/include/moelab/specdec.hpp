// SPDX-License-Identifier: Apache-2.0
//
// MTP-draft speculative decoding acceptance: the MTP module drafts k tokens
// greedily, the backbone is the greedy verifier, and acc_k is the fraction of
// contexts whose first k+1 drafted tokens all match the verifier.

#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "moelab/model.hpp"

namespace moelab {

struct AcceptanceReport {
    std::vector<float> acc;   // acc[k] = P(first k+1 drafts all accepted)
    int64_t n_contexts = 0;
    std::string corpus_id;

    std::string to_table() const {
        std::string head, row;
        char buf[64];
        for (size_t k = 0; k < acc.size(); ++k) {
            std::snprintf(buf, sizeof buf, "%-8s", ("acc_" + std::to_string(k)).c_str());
            head += buf;
            std::snprintf(buf, sizeof buf, "%-8.4f", static_cast<double>(acc[k]));
            row += buf;
        }
        return head + "\n" + row + "\n";
    }
};

// Draft k tokens beyond the context. The depth-j step combines the previous
// hidden stream with embeddings of the sequence extended by the drafts so far
// and reads the last position greedily; with one MTP module the same block is
// applied at every step (self-feeding), mirroring training semantics when the
// drafts coincide with real tokens.
inline std::vector<int> draft(const HybridModel& m, const std::vector<int>& context, int k) {
    if (context.empty()) throw ArgError("draft: empty context");
    if (context.size() < 2) throw ArgError("draft: context must hold at least 2 tokens");
    if (k < 1) throw ArgError("draft: k must be >= 1");
    if (m.mtp.empty()) throw ArgError("draft: model has no MTP module");

    ForwardTrace tr;
    backbone_forward(context, m, nullptr, &tr);
    Tensor stream = tr.final_hidden;
    std::vector<int> extended = context;
    std::vector<int> drafts;
    const int D = static_cast<int>(m.mtp.size());
    for (int j = 1; j <= k; ++j) {
        const auto& module = m.mtp[static_cast<size_t>(std::min(j, D) - 1)];
        std::vector<int> ahead(extended.begin() + j, extended.end());
        Tensor hk;
        Tensor logits = mtp_depth_forward(m, module, stream, ahead, nullptr, &hk);
        const int next = argmax_row(logits, logits.dim(0) - 1);
        drafts.push_back(next);
        extended.push_back(next);
        stream = hk;
    }
    return drafts;
}

// Counting core: acc_k over contexts given per-context draft and verifier
// continuations. Separated so simulated drafts can drive it directly.
inline AcceptanceReport acceptance_from_drafts(const std::vector<std::vector<int>>& drafts,
                                               const std::vector<std::vector<int>>& verifier, int k_max) {
    if (drafts.size() != verifier.size() || drafts.empty())
        throw ArgError("acceptance: draft/verifier context counts disagree");
    std::vector<int64_t> counts(static_cast<size_t>(k_max), 0);
    for (size_t c = 0; c < drafts.size(); ++c) {
        if (static_cast<int>(drafts[c].size()) < k_max || static_cast<int>(verifier[c].size()) < k_max)
            throw ArgError("acceptance: continuation shorter than k_max");
        int matched = 0;
        while (matched < k_max && drafts[c][static_cast<size_t>(matched)] == verifier[c][static_cast<size_t>(matched)])
            ++matched;
        for (int k = 0; k < matched; ++k) counts[static_cast<size_t>(k)] += 1;
    }
    AcceptanceReport rep;
    rep.n_contexts = static_cast<int64_t>(drafts.size());
    for (int k = 0; k < k_max; ++k)
        rep.acc.push_back(static_cast<float>(static_cast<double>(counts[static_cast<size_t>(k)]) /
                                             static_cast<double>(drafts.size())));
    for (size_t k = 1; k < rep.acc.size(); ++k)
        if (rep.acc[k] > rep.acc[k - 1]) throw EvalError("acceptance chain not monotone");
    return rep;
}

// Sample fresh context windows from the corpus, draft k_max tokens per
// context, verify against the backbone's greedy continuation.
inline AcceptanceReport measure_acceptance(const HybridModel& m, const std::vector<int>& corpus,
                                           int k_max, int n_contexts, int context_len, uint64_t seed) {
    if (k_max < 1 || n_contexts < 1 || context_len < 2) throw ArgError("measure_acceptance: bad arguments");
    if (static_cast<int>(corpus.size()) < context_len + 1)
        throw ArgError("measure_acceptance: corpus shorter than one context window");
    Rng rng(seed, "sampling");
    std::vector<std::vector<int>> drafts, verifier;
    for (int c = 0; c < n_contexts; ++c) {
        const uint64_t start = rng.next_below(corpus.size() - static_cast<size_t>(context_len));
        std::vector<int> ctx(corpus.begin() + static_cast<int64_t>(start),
                             corpus.begin() + static_cast<int64_t>(start) + context_len);
        drafts.push_back(draft(m, ctx, k_max));
        auto full = generate_greedy(m, ctx, k_max);
        verifier.emplace_back(full.begin() + context_len, full.end());
    }
    AcceptanceReport rep = acceptance_from_drafts(drafts, verifier, k_max);
    rep.n_contexts = n_contexts;
    return rep;
}

}  // namespace moelab
