// SPDX-License-Identifier: Apache-2.0
//
// Calibration pass: one trace-capturing sweep over a token corpus, reduced to
// running sums. Produces hidden-dimension importance, per-layer expert
// importance (frequency / soft / REAP), inter-expert similarity matrices, and
// adjacent-layer cosine similarities for depth pruning. MTP blocks carry their
// own MoE, so their routing statistics are gathered in the same pass.

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "moelab/model.hpp"

namespace moelab {

enum class ImportanceMetric { Freq, Soft, Reap };
enum class SimilarityMethod { RouterWeights, RouterLogits, ExpertVector };

inline ImportanceMetric parse_importance_metric(const std::string& s) {
    if (s == "freq") return ImportanceMetric::Freq;
    if (s == "soft") return ImportanceMetric::Soft;
    if (s == "reap") return ImportanceMetric::Reap;
    throw ArgError("unknown importance metric '" + s + "' (want freq|soft|reap)");
}

inline SimilarityMethod parse_similarity_method(const std::string& s) {
    if (s == "router_weights") return SimilarityMethod::RouterWeights;
    if (s == "router_logits") return SimilarityMethod::RouterLogits;
    if (s == "expert_vector") return SimilarityMethod::ExpertVector;
    throw ArgError("unknown similarity method '" + s + "' (want router_weights|router_logits|expert_vector)");
}

inline std::string importance_metric_name(ImportanceMetric m) {
    switch (m) {
        case ImportanceMetric::Freq: return "freq";
        case ImportanceMetric::Soft: return "soft";
        default: return "reap";
    }
}

inline std::string similarity_method_name(SimilarityMethod m) {
    switch (m) {
        case SimilarityMethod::RouterWeights: return "router_weights";
        case SimilarityMethod::RouterLogits: return "router_logits";
        default: return "expert_vector";
    }
}

struct LayerExpertStats {
    std::vector<float> freq;                  // activation frequency; sums to top_k
    std::vector<float> soft;                  // mean normalized gate weight; sums to 1
    std::vector<float> reap;                  // gate-weighted mean output norm over routed tokens
    std::vector<int64_t> routed_token_counts;
};

struct CalibrationReport {
    int64_t n_tokens = 0;
    int n_layers = 0;
    int n_experts = 0;
    int d_model = 0;
    int top_k = 0;
    int n_mtp = 0;
    bool raw_router_logits = false;  // Eq-literal raw-logit weighting instead of gate weights

    std::vector<float> width_importance;                  // [d], mean |RMSNorm output| over all sites
    std::vector<LayerExpertStats> expert_stats;           // [L]
    std::vector<std::vector<float>> sim_router_weights;   // [L][N*N]
    std::vector<std::vector<float>> sim_router_logits;    // [L][N*N]
    std::vector<std::vector<float>> sim_expert_vector;    // [L][N*N]
    std::vector<float> adjacent_layer_cosine;             // [L-1], entry j = boundary l=j+2 (1-based)

    // MTP blocks, one row per depth.
    std::vector<LayerExpertStats> mtp_expert_stats;
    std::vector<std::vector<float>> mtp_sim_router_weights;
    std::vector<std::vector<float>> mtp_sim_router_logits;
    std::vector<std::vector<float>> mtp_sim_expert_vector;
};

struct CollectOptions {
    bool raw_router_logits = false;
};

namespace detail {

inline std::vector<float> cosine_matrix(const std::vector<double>& feat, int n, int dim) {
    // Rows of `feat` are per-expert feature vectors; zero vectors get
    // similarity 0 off-diagonal and 1 on the diagonal by convention.
    std::vector<double> norms(static_cast<size_t>(n), 0.0);
    for (int i = 0; i < n; ++i) {
        double ss = 0.0;
        for (int j = 0; j < dim; ++j) {
            const double v = feat[static_cast<size_t>(i) * dim + j];
            ss += v * v;
        }
        norms[static_cast<size_t>(i)] = std::sqrt(ss);
    }
    std::vector<float> sim(static_cast<size_t>(n) * n, 0.0f);
    for (int i = 0; i < n; ++i) {
        sim[static_cast<size_t>(i) * n + i] = 1.0f;
        for (int j = i + 1; j < n; ++j) {
            float c = 0.0f;
            if (norms[static_cast<size_t>(i)] > 0.0 && norms[static_cast<size_t>(j)] > 0.0) {
                double dot = 0.0;
                for (int l = 0; l < dim; ++l)
                    dot += feat[static_cast<size_t>(i) * dim + l] * feat[static_cast<size_t>(j) * dim + l];
                c = static_cast<float>(dot / (norms[static_cast<size_t>(i)] * norms[static_cast<size_t>(j)]));
            }
            sim[static_cast<size_t>(i) * n + j] = c;
            sim[static_cast<size_t>(j) * n + i] = c;
        }
    }
    return sim;
}

// Gram-accumulated cosine: cos(u_i, u_j) over token-indexed vectors needs only
// sum_t u_i(t) u_j(t).
inline std::vector<float> cosine_from_gram(const std::vector<double>& gram, int n) {
    std::vector<float> sim(static_cast<size_t>(n) * n, 0.0f);
    for (int i = 0; i < n; ++i) {
        sim[static_cast<size_t>(i) * n + i] = 1.0f;
        for (int j = i + 1; j < n; ++j) {
            const double gii = gram[static_cast<size_t>(i) * n + i];
            const double gjj = gram[static_cast<size_t>(j) * n + j];
            float c = 0.0f;
            if (gii > 0.0 && gjj > 0.0)
                c = static_cast<float>(gram[static_cast<size_t>(i) * n + j] / std::sqrt(gii * gjj));
            sim[static_cast<size_t>(i) * n + j] = c;
            sim[static_cast<size_t>(j) * n + i] = c;
        }
    }
    return sim;
}

// Running sums for one MoE site.
struct MoeAccum {
    std::vector<double> freq, soft, reap;
    std::vector<int64_t> routed;
    std::vector<double> gram;      // [N*N] token-logit Gram
    std::vector<double> out_sum;   // [N*d] selected-expert output sums
    int64_t tokens = 0;

    void init(int N, int d) {
        freq.assign(static_cast<size_t>(N), 0.0);
        soft.assign(static_cast<size_t>(N), 0.0);
        reap.assign(static_cast<size_t>(N), 0.0);
        routed.assign(static_cast<size_t>(N), 0);
        gram.assign(static_cast<size_t>(N) * N, 0.0);
        out_sum.assign(static_cast<size_t>(N) * d, 0.0);
    }

    void add(const RoutingRecord& rec, int N, int d, int k, bool raw) {
        const int n = rec.logits.dim(0);
        tokens += n;
        for (int r = 0; r < n; ++r) {
            double raw_denom = 0.0;
            if (raw)
                for (int j = 0; j < k; ++j)
                    raw_denom += rec.logits.at(r, rec.indices[static_cast<size_t>(r) * k + j]);
            for (int j = 0; j < k; ++j) {
                const int e = rec.indices[static_cast<size_t>(r) * k + j];
                const float w = rec.weights[static_cast<size_t>(r) * k + j];
                const float z = rec.logits.at(r, e);
                const double soft_w = raw ? (raw_denom != 0.0 ? z / raw_denom : 0.0)
                                          : static_cast<double>(w);
                const double reap_w = raw ? static_cast<double>(z) : static_cast<double>(w);
                freq[static_cast<size_t>(e)] += 1.0;
                soft[static_cast<size_t>(e)] += soft_w;
                reap[static_cast<size_t>(e)] += reap_w * rec.expert_out_norm[static_cast<size_t>(r) * k + j];
                routed[static_cast<size_t>(e)] += 1;
                for (int x = 0; x < d; ++x)
                    out_sum[static_cast<size_t>(e) * d + x] +=
                        rec.expert_outputs[(static_cast<size_t>(r) * k + j) * d + x];
            }
            for (int i = 0; i < N; ++i) {
                const double zi = rec.logits.at(r, i);
                for (int j = i; j < N; ++j) {
                    const double v = zi * rec.logits.at(r, j);
                    gram[static_cast<size_t>(i) * N + j] += v;
                    if (j != i) gram[static_cast<size_t>(j) * N + i] += v;
                }
            }
        }
    }

    LayerExpertStats finalize(int N) const {
        LayerExpertStats st;
        st.freq.resize(static_cast<size_t>(N));
        st.soft.resize(static_cast<size_t>(N));
        st.reap.resize(static_cast<size_t>(N));
        st.routed_token_counts = routed;
        for (int e = 0; e < N; ++e) {
            st.freq[static_cast<size_t>(e)] = tokens ? static_cast<float>(freq[static_cast<size_t>(e)] / tokens) : 0.0f;
            st.soft[static_cast<size_t>(e)] = tokens ? static_cast<float>(soft[static_cast<size_t>(e)] / tokens) : 0.0f;
            st.reap[static_cast<size_t>(e)] =
                routed[static_cast<size_t>(e)] > 0
                    ? static_cast<float>(reap[static_cast<size_t>(e)] / routed[static_cast<size_t>(e)])
                    : 0.0f;
        }
        return st;
    }

    std::vector<float> mean_output_cosines(int N, int d) const {
        std::vector<double> means(static_cast<size_t>(N) * d, 0.0);
        for (int e = 0; e < N; ++e)
            if (routed[static_cast<size_t>(e)] > 0)
                for (int x = 0; x < d; ++x)
                    means[static_cast<size_t>(e) * d + x] =
                        out_sum[static_cast<size_t>(e) * d + x] / routed[static_cast<size_t>(e)];
        return cosine_matrix(means, N, d);
    }
};

inline std::vector<float> router_column_cosines(const Tensor& router, int N, int d) {
    std::vector<double> cols(static_cast<size_t>(N) * d);
    for (int e = 0; e < N; ++e)
        for (int x = 0; x < d; ++x) cols[static_cast<size_t>(e) * d + x] = router.at(x, e);
    return cosine_matrix(cols, N, d);
}

}  // namespace detail

// Single pass over the calibration batches; every statistic is an exact token
// mean reduced in a fixed batch order.
inline CalibrationReport collect(const HybridModel& m, const std::vector<std::vector<int>>& batches,
                                 const CollectOptions& opts = {}) {
    if (batches.empty()) throw ArgError("collect: empty calibration corpus");
    const auto& c = m.config;
    const int L = c.n_layers, N = c.n_experts, d = c.d_model, k = c.top_k;
    const int D = c.n_mtp_depths;
    if (L < 1) throw ArgError("collect: model has no layers");

    CalibrationReport rep;
    rep.n_layers = L;
    rep.n_experts = N;
    rep.d_model = d;
    rep.top_k = k;
    rep.n_mtp = D;
    rep.raw_router_logits = opts.raw_router_logits;

    std::vector<double> width_sum(static_cast<size_t>(d), 0.0);
    std::vector<detail::MoeAccum> acc(static_cast<size_t>(L));
    std::vector<detail::MoeAccum> mtp_acc(static_cast<size_t>(D));
    for (auto& a : acc) a.init(N, d);
    for (auto& a : mtp_acc) a.init(N, d);
    std::vector<std::vector<double>> block_pool(L, std::vector<double>(static_cast<size_t>(d), 0.0));

    int64_t n_tokens = 0;
    for (const auto& seq : batches) {
        if (seq.empty()) throw ArgError("collect: empty calibration sequence");
        ForwardTrace tr;
        tr.capture_activations = true;
        tr.capture_expert_outputs = true;
        backbone_forward(seq, m, nullptr, &tr);
        if (D > 0) mtp_forward(m, tr.final_hidden, seq, nullptr, &tr);
        const int n = static_cast<int>(seq.size());
        n_tokens += n;

        for (const auto& site : tr.norm_outputs)
            for (int r = 0; r < site.dim(0); ++r)
                for (int j = 0; j < d; ++j) width_sum[static_cast<size_t>(j)] += std::abs(site.at(r, j));

        for (int l = 0; l < L; ++l) {
            acc[static_cast<size_t>(l)].add(tr.routing[static_cast<size_t>(l)], N, d, k, opts.raw_router_logits);
            const auto& blk = tr.block_outputs[static_cast<size_t>(l)];
            for (int r = 0; r < n; ++r)
                for (int j = 0; j < d; ++j)
                    block_pool[static_cast<size_t>(l)][static_cast<size_t>(j)] += blk.at(r, j);
        }
        for (size_t depth = 0; depth < tr.mtp_routing.size(); ++depth)
            mtp_acc[depth].add(tr.mtp_routing[depth], N, d, k, opts.raw_router_logits);
    }

    rep.n_tokens = n_tokens;
    const double n_sites = static_cast<double>(2 * L + 1) * n_tokens;
    rep.width_importance.resize(static_cast<size_t>(d));
    for (int j = 0; j < d; ++j)
        rep.width_importance[static_cast<size_t>(j)] = static_cast<float>(width_sum[static_cast<size_t>(j)] / n_sites);

    for (int l = 0; l < L; ++l) {
        rep.expert_stats.push_back(acc[static_cast<size_t>(l)].finalize(N));
        rep.sim_router_weights.push_back(
            detail::router_column_cosines(m.layers[static_cast<size_t>(l)].moe.router, N, d));
        rep.sim_router_logits.push_back(detail::cosine_from_gram(acc[static_cast<size_t>(l)].gram, N));
        rep.sim_expert_vector.push_back(acc[static_cast<size_t>(l)].mean_output_cosines(N, d));
    }
    for (int depth = 0; depth < D; ++depth) {
        rep.mtp_expert_stats.push_back(mtp_acc[static_cast<size_t>(depth)].finalize(N));
        rep.mtp_sim_router_weights.push_back(
            detail::router_column_cosines(m.mtp[static_cast<size_t>(depth)].block.moe.router, N, d));
        rep.mtp_sim_router_logits.push_back(
            detail::cosine_from_gram(mtp_acc[static_cast<size_t>(depth)].gram, N));
        rep.mtp_sim_expert_vector.push_back(mtp_acc[static_cast<size_t>(depth)].mean_output_cosines(N, d));
    }

    rep.adjacent_layer_cosine.resize(static_cast<size_t>(L - 1));
    std::vector<std::vector<double>> pooled(L, std::vector<double>(static_cast<size_t>(d)));
    for (int l = 0; l < L; ++l)
        for (int j = 0; j < d; ++j)
            pooled[static_cast<size_t>(l)][static_cast<size_t>(j)] =
                block_pool[static_cast<size_t>(l)][static_cast<size_t>(j)] / n_tokens;
    for (int l = 0; l + 1 < L; ++l) {
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (int j = 0; j < d; ++j) {
            dot += pooled[static_cast<size_t>(l)][static_cast<size_t>(j)] *
                   pooled[static_cast<size_t>(l) + 1][static_cast<size_t>(j)];
            na += pooled[static_cast<size_t>(l)][static_cast<size_t>(j)] *
                  pooled[static_cast<size_t>(l)][static_cast<size_t>(j)];
            nb += pooled[static_cast<size_t>(l) + 1][static_cast<size_t>(j)] *
                  pooled[static_cast<size_t>(l) + 1][static_cast<size_t>(j)];
        }
        rep.adjacent_layer_cosine[static_cast<size_t>(l)] =
            (na > 0.0 && nb > 0.0) ? static_cast<float>(dot / std::sqrt(na * nb)) : 0.0f;
    }
    return rep;
}

inline const std::vector<float>& width_importance(const CalibrationReport& rep) {
    if (rep.width_importance.empty()) throw ArgError("report not populated");
    return rep.width_importance;
}

// Dimension indices ranked by descending importance; ties resolved toward the
// lower index.
inline std::vector<int> width_ranking(const CalibrationReport& rep) {
    return topk_indices(std::span<const float>(rep.width_importance.data(), rep.width_importance.size()),
                        static_cast<int>(rep.width_importance.size()));
}

inline const std::vector<float>& expert_importance(const CalibrationReport& rep, int layer,
                                                   ImportanceMetric metric) {
    if (layer < 0 || layer >= rep.n_layers) throw ArgError("expert_importance: bad layer");
    const auto& st = rep.expert_stats[static_cast<size_t>(layer)];
    switch (metric) {
        case ImportanceMetric::Freq: return st.freq;
        case ImportanceMetric::Soft: return st.soft;
        default: return st.reap;
    }
}

inline const std::vector<float>& mtp_expert_importance(const CalibrationReport& rep, int depth,
                                                       ImportanceMetric metric) {
    if (depth < 0 || depth >= rep.n_mtp) throw ArgError("mtp_expert_importance: bad depth");
    const auto& st = rep.mtp_expert_stats[static_cast<size_t>(depth)];
    switch (metric) {
        case ImportanceMetric::Freq: return st.freq;
        case ImportanceMetric::Soft: return st.soft;
        default: return st.reap;
    }
}

inline const std::vector<float>& expert_similarity(const CalibrationReport& rep, int layer,
                                                   SimilarityMethod method) {
    if (layer < 0 || layer >= rep.n_layers) throw ArgError("expert_similarity: bad layer");
    switch (method) {
        case SimilarityMethod::RouterWeights: return rep.sim_router_weights[static_cast<size_t>(layer)];
        case SimilarityMethod::RouterLogits: return rep.sim_router_logits[static_cast<size_t>(layer)];
        default: return rep.sim_expert_vector[static_cast<size_t>(layer)];
    }
}

inline const std::vector<float>& mtp_expert_similarity(const CalibrationReport& rep, int depth,
                                                       SimilarityMethod method) {
    if (depth < 0 || depth >= rep.n_mtp) throw ArgError("mtp_expert_similarity: bad depth");
    switch (method) {
        case SimilarityMethod::RouterWeights: return rep.mtp_sim_router_weights[static_cast<size_t>(depth)];
        case SimilarityMethod::RouterLogits: return rep.mtp_sim_router_logits[static_cast<size_t>(depth)];
        default: return rep.mtp_sim_expert_vector[static_cast<size_t>(depth)];
    }
}

struct AdjacentSimilarity {
    std::vector<float> cosine;  // [L-1]
    int start_layer = 0;        // 1-based index l* = argmax c_l, l in 2..L
};

// c_l = cos(a_{l-1}, a_l) of token-mean pooled block outputs; l* marks the
// first layer of the contiguous chunk to prune.
inline AdjacentSimilarity adjacent_layer_similarity(const CalibrationReport& rep) {
    if (rep.n_layers < 2) throw ArgError("adjacent_layer_similarity needs L >= 2");
    AdjacentSimilarity out;
    out.cosine = rep.adjacent_layer_cosine;
    int best = 0;
    for (size_t j = 1; j < out.cosine.size(); ++j)
        if (out.cosine[j] > out.cosine[static_cast<size_t>(best)]) best = static_cast<int>(j);
    out.start_layer = best + 2;  // c entry j corresponds to boundary l = j+2 (1-based)
    return out;
}

}  // namespace moelab
