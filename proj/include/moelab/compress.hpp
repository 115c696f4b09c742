// SPDX-License-Identifier: Apache-2.0
//
// Structured weight surgery: depth pruning (last-N or similarity chunk),
// global hidden-dimension pruning, expert pruning, and full / partial-
// preservation expert merging. Every transform is a pure function of
// (model, calibration report, plan); optimizer moment buffers can ride along
// through the same index maps so multi-stage training can keep its state.

#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "moelab/calib.hpp"
#include "moelab/model.hpp"

namespace moelab {

// Adam first/second moments keyed by parameter name; compress transforms
// these alongside the weights (sliced on kept axes, dropped with removed
// layers/experts).
struct ParamMoments {
    std::vector<float> m, v;
};
using OptimizerMoments = std::map<std::string, ParamMoments>;

enum class DepthPruneMode { LastN, SimilarityChunk };
enum class ExpertAction { Prune, MergeFull, MergePartialPreserve };

inline ExpertAction parse_expert_action(const std::string& s) {
    if (s == "prune") return ExpertAction::Prune;
    if (s == "merge_full") return ExpertAction::MergeFull;
    if (s == "merge_partial_preserve") return ExpertAction::MergePartialPreserve;
    throw ArgError("unknown expert action '" + s + "'");
}

inline std::string expert_action_name(ExpertAction a) {
    switch (a) {
        case ExpertAction::Prune: return "prune";
        case ExpertAction::MergeFull: return "merge_full";
        default: return "merge_partial_preserve";
    }
}

struct DepthSpec {
    DepthPruneMode mode = DepthPruneMode::LastN;
    int n_layers = 0;  // how many to remove
};

struct WidthSpec {
    int target_d = 0;
    bool reinit_mtp = false;  // re-initialize MTP modules instead of slicing them
};

struct ExpertSpec {
    int target_n = 0;
    int target_top_k = 0;
    ImportanceMetric metric = ImportanceMetric::Soft;
    ExpertAction action = ExpertAction::MergePartialPreserve;
    SimilarityMethod similarity = SimilarityMethod::RouterWeights;
};

struct CompressionPlan {
    std::optional<DepthSpec> depth;
    std::optional<WidthSpec> width;
    std::optional<ExpertSpec> experts;

    void validate(const ModelConfig& c) const {
        if (depth) {
            if (depth->n_layers < 1 || depth->n_layers >= c.n_layers)
                throw ArgError("plan: depth n_layers must be in [1, L-1]; no-op plans must omit depth");
        }
        if (width) {
            if (width->target_d < 1 || width->target_d > c.d_model)
                throw ArgError("plan: width target_d must be in [1, d_model]");
        }
        if (experts) {
            if (experts->target_n < 1 || experts->target_n > c.n_experts)
                throw ArgError("plan: experts target_n out of range");
            if (experts->target_top_k < 1 || experts->target_top_k > experts->target_n)
                throw ArgError("plan: experts target_top_k out of range");
            if (experts->action != ExpertAction::Prune && experts->target_n >= c.n_experts)
                throw ArgError("plan: merging requires target_n < n_experts");
        }
        if (!depth && !width && !experts) throw ArgError("plan: empty compression plan");
    }
};

enum class ExpertDisposition { Kept, Base, MergedInto, Pruned };

struct ExpertOutcome {
    ExpertDisposition kind = ExpertDisposition::Kept;
    int merged_into = -1;  // original index of the base expert, for MergedInto
};

struct PruneReport {
    std::vector<int> kept_layers;  // original layer indices, ascending
    std::vector<int> kept_dims;    // original hidden dims, ascending
    std::vector<std::vector<ExpertOutcome>> expert_disposition;  // [new layer][orig expert]
    std::vector<std::vector<int>> expert_source;      // [new layer][new expert] -> orig expert
    std::vector<std::vector<int>> mtp_expert_source;  // [depth][new expert] -> orig expert
    size_t params_before = 0;
    size_t params_after = 0;
    bool depth_clamped = false;
    int depth_chunk_start = -1;  // 0-based first removed layer (similarity mode)
};

namespace detail {

// Slice a 2-D tensor (or 1-D when cols==nullptr and rows act on the flat
// axis). nullptr keeps an axis intact.
inline std::vector<float> slice_values(const std::vector<float>& src, int r, int c,
                                       const std::vector<int>* rows, const std::vector<int>* cols) {
    const int nr = rows ? static_cast<int>(rows->size()) : r;
    const int nc = cols ? static_cast<int>(cols->size()) : c;
    std::vector<float> out(static_cast<size_t>(nr) * nc);
    for (int i = 0; i < nr; ++i) {
        const int si = rows ? (*rows)[static_cast<size_t>(i)] : i;
        for (int j = 0; j < nc; ++j) {
            const int sj = cols ? (*cols)[static_cast<size_t>(j)] : j;
            out[static_cast<size_t>(i) * nc + j] = src[static_cast<size_t>(si) * c + sj];
        }
    }
    return out;
}

// Carries optimizer moments through renames/slices/blends.
struct Rewriter {
    const OptimizerMoments* old_opt = nullptr;
    OptimizerMoments next;

    Tensor take(const Tensor& src, const std::string& new_name, const std::vector<int>* rows,
                const std::vector<int>* cols) {
        const int r = src.ndim() == 2 ? src.dim(0) : static_cast<int>(src.numel());
        const int c = src.ndim() == 2 ? src.dim(1) : 1;
        Shape shape;
        if (src.ndim() == 2)
            shape = {rows ? static_cast<int>(rows->size()) : r, cols ? static_cast<int>(cols->size()) : c};
        else
            shape = {rows ? static_cast<int>(rows->size()) : r};
        Tensor out = Tensor::from(shape, slice_values(src.values(), r, c, rows, cols));
        out.set_name(new_name).set_requires_grad(src.requires_grad());
        if (old_opt) {
            auto it = old_opt->find(src.name());
            if (it != old_opt->end()) {
                ParamMoments pm;
                pm.m = slice_values(it->second.m, r, c, rows, cols);
                pm.v = slice_values(it->second.v, r, c, rows, cols);
                next.insert_or_assign(new_name, std::move(pm));
            }
        }
        return out;
    }

    // Importance-weighted blend of same-shaped tensors; moments follow the
    // base expert (blended weights have no meaningful history of their own).
    Tensor take_blend(const std::vector<const Tensor*>& srcs, const std::vector<double>& weights,
                      const Tensor& moment_source, const std::string& new_name) {
        Tensor out = Tensor::zeros(srcs[0]->shape());
        for (size_t s = 0; s < srcs.size(); ++s) {
            const float w = static_cast<float>(weights[s]);
            const float* sv = srcs[s]->data();
            for (size_t i = 0; i < out.numel(); ++i) out.data()[i] += w * sv[i];
        }
        out.set_name(new_name).set_requires_grad(moment_source.requires_grad());
        if (old_opt) {
            auto it = old_opt->find(moment_source.name());
            if (it != old_opt->end()) next.insert_or_assign(new_name, it->second);
        }
        return out;
    }

    void commit(OptimizerMoments* opt) {
        if (opt) *opt = std::move(next);
    }
};

struct SliceSpec {
    const std::vector<int>* rows = nullptr;
    const std::vector<int>* cols = nullptr;
};

// Copy one block's parameters under a new name prefix with per-role slicing
// of the hidden dimension. `dims` is the kept-dimension set (nullptr = keep).
// with_routed=false leaves the router and routed expert set for the caller
// (expert compression rebuilds them itself).
inline LayerParams rewrite_layer(Rewriter& rw, const LayerParams& l, const std::string& prefix,
                                 const std::vector<int>* dims, bool with_routed = true) {
    LayerParams out;
    out.kind = l.kind;
    out.norm1 = rw.take(l.norm1, prefix + ".norm1.gamma", dims, nullptr);
    out.norm2 = rw.take(l.norm2, prefix + ".norm2.gamma", dims, nullptr);
    if (l.kind == LayerKind::Full) {
        out.attn.wq = rw.take(l.attn.wq, prefix + ".attn.wq", dims, nullptr);
        out.attn.wk = rw.take(l.attn.wk, prefix + ".attn.wk", dims, nullptr);
        out.attn.wv = rw.take(l.attn.wv, prefix + ".attn.wv", dims, nullptr);
        out.attn.wo = rw.take(l.attn.wo, prefix + ".attn.wo", nullptr, dims);
        out.attn.wgate = rw.take(l.attn.wgate, prefix + ".attn.wgate", dims, nullptr);
    } else {
        out.delta.wq = rw.take(l.delta.wq, prefix + ".delta.wq", dims, nullptr);
        out.delta.wk = rw.take(l.delta.wk, prefix + ".delta.wk", dims, nullptr);
        out.delta.wv = rw.take(l.delta.wv, prefix + ".delta.wv", dims, nullptr);
        out.delta.wout = rw.take(l.delta.wout, prefix + ".delta.wout", nullptr, dims);
        out.delta.walpha = rw.take(l.delta.walpha, prefix + ".delta.walpha", dims, nullptr);
        out.delta.wbeta = rw.take(l.delta.wbeta, prefix + ".delta.wbeta", dims, nullptr);
        out.delta.conv_q = rw.take(l.delta.conv_q, prefix + ".delta.conv_q", nullptr, nullptr);
        out.delta.conv_k = rw.take(l.delta.conv_k, prefix + ".delta.conv_k", nullptr, nullptr);
        out.delta.conv_v = rw.take(l.delta.conv_v, prefix + ".delta.conv_v", nullptr, nullptr);
    }
    if (with_routed) {
        out.moe.router = rw.take(l.moe.router, prefix + ".moe.router", dims, nullptr);
        for (size_t e = 0; e < l.moe.experts.size(); ++e) {
            const std::string ep = prefix + ".moe.experts." + std::to_string(e);
            ExpertParams ne;
            ne.w1 = rw.take(l.moe.experts[e].w1, ep + ".w1", dims, nullptr);
            ne.w2 = rw.take(l.moe.experts[e].w2, ep + ".w2", dims, nullptr);
            ne.w3 = rw.take(l.moe.experts[e].w3, ep + ".w3", nullptr, dims);
            out.moe.experts.push_back(std::move(ne));
        }
    }
    if (l.moe.shared_gate.defined())
        out.moe.shared_gate = rw.take(l.moe.shared_gate, prefix + ".moe.shared_gate", dims, nullptr);
    for (size_t s = 0; s < l.moe.shared.size(); ++s) {
        const std::string sp = prefix + ".moe.shared." + std::to_string(s);
        ExpertParams ns;
        ns.w1 = rw.take(l.moe.shared[s].w1, sp + ".w1", dims, nullptr);
        ns.w2 = rw.take(l.moe.shared[s].w2, sp + ".w2", dims, nullptr);
        ns.w3 = rw.take(l.moe.shared[s].w3, sp + ".w3", nullptr, dims);
        out.moe.shared.push_back(std::move(ns));
    }
    return out;
}

// Whole-model rewrite: select layers, optionally slice hidden dims.
inline HybridModel rewrite_model(const HybridModel& m, const std::vector<int>& kept_layers,
                                 const std::vector<int>* dims, bool reinit_mtp, OptimizerMoments* opt) {
    Rewriter rw;
    rw.old_opt = opt;
    HybridModel out;
    out.config = m.config;
    out.config.n_layers = static_cast<int>(kept_layers.size());
    out.config.layer_pattern.clear();
    for (int src : kept_layers) out.config.layer_pattern.push_back(m.layers[static_cast<size_t>(src)].kind);
    if (out.config.layer_pattern.empty()) out.config.layer_pattern.push_back(LayerKind::Full);
    if (dims) out.config.d_model = static_cast<int>(dims->size());

    out.embed = rw.take(m.embed, "embed.weight", nullptr, dims);
    out.head = rw.take(m.head, "head.weight", dims, nullptr);
    out.final_norm = rw.take(m.final_norm, "final_norm.gamma", dims, nullptr);
    for (size_t i = 0; i < kept_layers.size(); ++i)
        out.layers.push_back(rewrite_layer(rw, m.layers[static_cast<size_t>(kept_layers[i])],
                                           "layers." + std::to_string(i), dims));
    for (size_t k = 0; k < m.mtp.size(); ++k) {
        const std::string p = "mtp." + std::to_string(k);
        if (dims && reinit_mtp) {
            MtpParams fresh;
            Rng rng(out.config.seed, "init/" + p + ".proj");
            fresh.proj = Tensor::randn({2 * out.config.d_model, out.config.d_model}, 0.02f, rng);
            fresh.proj.set_name(p + ".proj").set_requires_grad();
            fresh.norm_h = Tensor::full({out.config.d_model}, 1.0f);
            fresh.norm_h.set_name(p + ".norm_h.gamma").set_requires_grad();
            fresh.norm_e = Tensor::full({out.config.d_model}, 1.0f);
            fresh.norm_e.set_name(p + ".norm_e.gamma").set_requires_grad();
            fresh.block = out.make_layer(p + ".block", LayerKind::Full);
            out.mtp.push_back(std::move(fresh));
            continue;
        }
        MtpParams mp;
        if (dims) {
            // Both halves of the concatenated [h; emb] input axis share the
            // global kept set.
            std::vector<int> both;
            both.reserve(dims->size() * 2);
            for (int v : *dims) both.push_back(v);
            for (int v : *dims) both.push_back(m.config.d_model + v);
            mp.proj = rw.take(m.mtp[k].proj, p + ".proj", &both, dims);
        } else {
            mp.proj = rw.take(m.mtp[k].proj, p + ".proj", nullptr, nullptr);
        }
        mp.norm_h = rw.take(m.mtp[k].norm_h, p + ".norm_h.gamma", dims, nullptr);
        mp.norm_e = rw.take(m.mtp[k].norm_e, p + ".norm_e.gamma", dims, nullptr);
        mp.block = rewrite_layer(rw, m.mtp[k].block, p + ".block", dims);
        out.mtp.push_back(std::move(mp));
    }
    rw.commit(opt);
    return out;
}

}  // namespace detail

// Descending-importance ranking with lower-index tie-break.
inline std::vector<int> importance_ranking(const std::vector<float>& imp) {
    return topk_indices(std::span<const float>(imp.data(), imp.size()), static_cast<int>(imp.size()));
}

inline HybridModel prune_depth_last(const HybridModel& m, int n, PruneReport* report = nullptr,
                                    OptimizerMoments* opt = nullptr) {
    const int L = m.config.n_layers;
    if (n < 1 || n >= L)
        throw ArgError("prune_depth_last: n=" + std::to_string(n) + " outside [1, " + std::to_string(L - 1) + "]");
    std::vector<int> kept;
    for (int i = 0; i < L - n; ++i) kept.push_back(i);
    HybridModel out = detail::rewrite_model(m, kept, nullptr, false, opt);
    if (report) report->kept_layers = kept;
    return out;
}

inline HybridModel prune_depth_similarity(const HybridModel& m, const CalibrationReport& rep, int n,
                                          PruneReport* report = nullptr, OptimizerMoments* opt = nullptr) {
    const int L = m.config.n_layers;
    if (n < 1 || n >= L) throw ArgError("prune_depth_similarity: n outside [1, L-1]");
    if (rep.n_layers != L) throw ArgError("prune_depth_similarity: report layer count mismatch");
    auto adj = adjacent_layer_similarity(rep);
    int start = adj.start_layer - 1;  // 0-based first pruned layer
    bool clamped = false;
    if (start + n > L) {
        start = L - n;  // clamp the chunk backward so it fits
        clamped = true;
    }
    std::vector<int> kept;
    for (int i = 0; i < L; ++i)
        if (i < start || i >= start + n) kept.push_back(i);
    HybridModel out = detail::rewrite_model(m, kept, nullptr, false, opt);
    if (report) {
        report->kept_layers = kept;
        report->depth_clamped = clamped;
        report->depth_chunk_start = start;
    }
    return out;
}

// Global hidden-dimension pruning: one kept-index set, ascending, sliced into
// every d-sized axis of the model (head dims and expert d_ff untouched).
inline HybridModel prune_width(const HybridModel& m, const CalibrationReport& rep, int target_d,
                               bool reinit_mtp = false, PruneReport* report = nullptr,
                               OptimizerMoments* opt = nullptr) {
    const int d = m.config.d_model;
    if (target_d > d || target_d < 1) throw ArgError("prune_width: target_d outside [1, d]");
    if (static_cast<int>(rep.width_importance.size()) != d)
        throw ArgError("prune_width: report dimension mismatch");
    std::vector<int> kept = topk_indices(
        std::span<const float>(rep.width_importance.data(), rep.width_importance.size()), target_d);
    std::sort(kept.begin(), kept.end());
    std::vector<int> all_layers;
    for (int i = 0; i < m.config.n_layers; ++i) all_layers.push_back(i);
    HybridModel out = detail::rewrite_model(m, all_layers, &kept, reinit_mtp, opt);
    if (report) report->kept_dims = kept;
    return out;
}

// Expert survivor selection and merge assignment for one layer; exposed so
// the straight-line reference in the tests can check dispositions directly.
struct MergeLayout {
    std::vector<int> keep;                        // original indices, kept verbatim
    std::vector<int> base;                        // original indices, merge targets
    std::vector<std::pair<int, int>> merged;      // (discarded expert, base it joins)
    std::vector<int> survivors;                   // keep ∪ base, ascending original index
};

inline MergeLayout plan_merge_layout(const std::vector<float>& importance, const std::vector<float>& sim,
                                     int n_experts, int target_n, bool preserve) {
    if (target_n >= n_experts) throw ArgError("merge layout: target_n must be < n_experts");
    MergeLayout lay;
    auto order = importance_ranking(importance);
    const int keep_count = preserve ? target_n / 2 : 0;
    const int base_count = target_n - keep_count;
    lay.keep.assign(order.begin(), order.begin() + keep_count);
    lay.base.assign(order.begin() + keep_count, order.begin() + keep_count + base_count);
    for (size_t i = static_cast<size_t>(target_n); i < order.size(); ++i) {
        const int disc = order[i];
        int best = lay.base[0];
        float best_sim = sim[static_cast<size_t>(disc) * n_experts + lay.base[0]];
        for (int b : lay.base) {
            const float s = sim[static_cast<size_t>(disc) * n_experts + b];
            if (s > best_sim || (s == best_sim && b < best)) {
                best_sim = s;
                best = b;
            }
        }
        lay.merged.push_back({disc, best});
    }
    lay.survivors = lay.keep;
    lay.survivors.insert(lay.survivors.end(), lay.base.begin(), lay.base.end());
    std::sort(lay.survivors.begin(), lay.survivors.end());
    return lay;
}

// Survivor sets and merge layouts for every MoE site (backbone layers plus
// MTP blocks).
struct ExpertSelections {
    std::vector<std::vector<int>> survivors;             // [L]
    std::vector<MergeLayout> layouts;                    // [L] when merging
    std::vector<const std::vector<float>*> importances;  // [L] when merging
    std::vector<std::vector<int>> mtp_survivors;         // [D]
    std::vector<MergeLayout> mtp_layouts;
    std::vector<const std::vector<float>*> mtp_importances;
    bool merging = false;
};

namespace detail {

inline LayerParams rebuild_layer_experts(Rewriter& rw, const LayerParams& l, const std::string& prefix,
                                         const std::vector<int>& survivors, const MergeLayout* lay,
                                         const std::vector<float>* imp) {
    LayerParams nl = rewrite_layer(rw, l, prefix, nullptr, /*with_routed=*/false);
    nl.moe.router = rw.take(l.moe.router, prefix + ".moe.router", nullptr, &survivors);
    for (size_t ne = 0; ne < survivors.size(); ++ne) {
        const int src = survivors[ne];
        const std::string ep = prefix + ".moe.experts." + std::to_string(ne);
        bool is_base = false;
        if (lay) is_base = std::find(lay->base.begin(), lay->base.end(), src) != lay->base.end();
        if (!is_base) {
            ExpertParams kept;
            kept.w1 = rw.take(l.moe.experts[static_cast<size_t>(src)].w1, ep + ".w1", nullptr, nullptr);
            kept.w2 = rw.take(l.moe.experts[static_cast<size_t>(src)].w2, ep + ".w2", nullptr, nullptr);
            kept.w3 = rw.take(l.moe.experts[static_cast<size_t>(src)].w3, ep + ".w3", nullptr, nullptr);
            nl.moe.experts.push_back(std::move(kept));
            continue;
        }
        // Merge group: the base plus everything assigned to it, blended by
        // normalized importance (uniform when the group importance is 0).
        std::vector<int> group{src};
        for (const auto& [disc, base] : lay->merged)
            if (base == src) group.push_back(disc);
        double total = 0.0;
        for (int g : group) total += (*imp)[static_cast<size_t>(g)];
        std::vector<double> weights(group.size());
        for (size_t g = 0; g < group.size(); ++g)
            weights[g] = total > 0.0 ? (*imp)[static_cast<size_t>(group[g])] / total
                                     : 1.0 / static_cast<double>(group.size());
        auto blend = [&](Tensor ExpertParams::* member, const std::string& name) {
            std::vector<const Tensor*> srcs;
            for (int g : group) srcs.push_back(&(l.moe.experts[static_cast<size_t>(g)].*member));
            return rw.take_blend(srcs, weights, l.moe.experts[static_cast<size_t>(src)].*member, name);
        };
        ExpertParams merged;
        merged.w1 = blend(&ExpertParams::w1, ep + ".w1");
        merged.w2 = blend(&ExpertParams::w2, ep + ".w2");
        merged.w3 = blend(&ExpertParams::w3, ep + ".w3");
        nl.moe.experts.push_back(std::move(merged));
    }
    return nl;
}

inline HybridModel rebuild_with_experts(const HybridModel& m, int target_top_k,
                                        const ExpertSelections& sel, PruneReport* report,
                                        OptimizerMoments* opt) {
    Rewriter rw;
    rw.old_opt = opt;
    HybridModel out;
    out.config = m.config;
    out.config.n_experts = static_cast<int>(sel.survivors[0].size());
    out.config.top_k = target_top_k;
    out.config.layer_pattern = m.config.layer_pattern;

    out.embed = rw.take(m.embed, "embed.weight", nullptr, nullptr);
    out.head = rw.take(m.head, "head.weight", nullptr, nullptr);
    out.final_norm = rw.take(m.final_norm, "final_norm.gamma", nullptr, nullptr);

    for (size_t i = 0; i < m.layers.size(); ++i)
        out.layers.push_back(rebuild_layer_experts(rw, m.layers[i], "layers." + std::to_string(i),
                                                   sel.survivors[i],
                                                   sel.merging ? &sel.layouts[i] : nullptr,
                                                   sel.merging ? sel.importances[i] : nullptr));
    for (size_t k = 0; k < m.mtp.size(); ++k) {
        const std::string p = "mtp." + std::to_string(k);
        MtpParams mp;
        mp.proj = rw.take(m.mtp[k].proj, p + ".proj", nullptr, nullptr);
        mp.norm_h = rw.take(m.mtp[k].norm_h, p + ".norm_h.gamma", nullptr, nullptr);
        mp.norm_e = rw.take(m.mtp[k].norm_e, p + ".norm_e.gamma", nullptr, nullptr);
        mp.block = rebuild_layer_experts(rw, m.mtp[k].block, p + ".block", sel.mtp_survivors[k],
                                         sel.merging ? &sel.mtp_layouts[k] : nullptr,
                                         sel.merging ? sel.mtp_importances[k] : nullptr);
        out.mtp.push_back(std::move(mp));
    }
    rw.commit(opt);
    if (report) {
        report->expert_source = sel.survivors;
        report->mtp_expert_source = sel.mtp_survivors;
    }
    return out;
}

}  // namespace detail

namespace detail {

inline void check_mtp_stats(const HybridModel& m, const CalibrationReport& rep) {
    if (!m.mtp.empty() && rep.n_mtp < static_cast<int>(m.mtp.size()))
        throw ArgError("expert compression: report lacks MTP routing statistics");
}

}  // namespace detail

// Keep the top target_n experts per layer by the chosen importance metric;
// delete the complementary router columns; set top_k.
inline HybridModel prune_experts(const HybridModel& m, const CalibrationReport& rep, int target_n,
                                 int target_top_k, ImportanceMetric metric,
                                 const std::vector<int>* layer_map = nullptr,
                                 PruneReport* report = nullptr, OptimizerMoments* opt = nullptr) {
    const int N = m.config.n_experts, L = m.config.n_layers;
    if (target_n < 1 || target_n > N) throw ArgError("prune_experts: target_n out of range");
    if (target_top_k < 1 || target_top_k > target_n) throw ArgError("prune_experts: target_top_k out of range");
    detail::check_mtp_stats(m, rep);
    ExpertSelections sel;
    std::vector<std::vector<ExpertOutcome>> disp(static_cast<size_t>(L));
    auto select = [&](const std::vector<float>& imp, std::vector<ExpertOutcome>* d) {
        if (static_cast<int>(imp.size()) != N) throw ArgError("prune_experts: report expert count mismatch");
        auto kept = topk_indices(std::span<const float>(imp.data(), imp.size()), target_n);
        std::sort(kept.begin(), kept.end());
        if (d) {
            d->assign(static_cast<size_t>(N), {ExpertDisposition::Pruned, -1});
            for (int e : kept) (*d)[static_cast<size_t>(e)] = {ExpertDisposition::Kept, -1};
        }
        return kept;
    };
    for (int l = 0; l < L; ++l) {
        const int rep_layer = layer_map ? (*layer_map)[static_cast<size_t>(l)] : l;
        sel.survivors.push_back(select(expert_importance(rep, rep_layer, metric),
                                       &disp[static_cast<size_t>(l)]));
    }
    for (size_t depth = 0; depth < m.mtp.size(); ++depth)
        sel.mtp_survivors.push_back(
            select(mtp_expert_importance(rep, static_cast<int>(depth), metric), nullptr));
    HybridModel out = detail::rebuild_with_experts(m, target_top_k, sel, report, opt);
    if (report) report->expert_disposition = std::move(disp);
    return out;
}

// Partial-preservation (or full) expert merging. With preserve=true, the top
// floor(target_n/2) experts by importance are kept verbatim, the next
// target_n - floor(target_n/2) become merge bases, and every remaining expert
// joins its most similar base; groups blend by normalized importance. With
// preserve=false all target_n survivors are bases.
inline HybridModel merge_experts(const HybridModel& m, const CalibrationReport& rep, int target_n,
                                 int target_top_k, ImportanceMetric metric, SimilarityMethod similarity,
                                 bool preserve, const std::vector<int>* layer_map = nullptr,
                                 PruneReport* report = nullptr, OptimizerMoments* opt = nullptr) {
    const int N = m.config.n_experts, L = m.config.n_layers;
    if (target_n < 1 || target_n >= N) throw ArgError("merge_experts: need target_n < n_experts");
    if (target_top_k < 1 || target_top_k > target_n) throw ArgError("merge_experts: target_top_k out of range");
    if (similarity != SimilarityMethod::RouterWeights && rep.n_tokens == 0)
        throw ArgError("merge_experts: similarity method '" + similarity_method_name(similarity) +
                       "' needs calibration statistics");
    detail::check_mtp_stats(m, rep);

    ExpertSelections sel;
    sel.merging = true;
    std::vector<std::vector<float>> fresh_sims;
    std::vector<std::vector<ExpertOutcome>> disp(static_cast<size_t>(L));

    auto lay_out = [&](const std::vector<float>& imp, const std::vector<float>* sim,
                       const Tensor& router, std::vector<ExpertOutcome>* d) {
        if (static_cast<int>(imp.size()) != N) throw ArgError("merge_experts: report expert count mismatch");
        if (similarity == SimilarityMethod::RouterWeights) {
            // Router columns of the model being compressed (stats-free).
            fresh_sims.push_back(detail::router_column_cosines(router, N, m.config.d_model));
            sim = &fresh_sims.back();
        }
        MergeLayout lay = plan_merge_layout(imp, *sim, N, target_n, preserve);
        if (d) {
            d->assign(static_cast<size_t>(N), {ExpertDisposition::Kept, -1});
            for (int b : lay.base) (*d)[static_cast<size_t>(b)] = {ExpertDisposition::Base, -1};
            for (const auto& [dsc, bse] : lay.merged)
                (*d)[static_cast<size_t>(dsc)] = {ExpertDisposition::MergedInto, bse};
        }
        return lay;
    };
    fresh_sims.reserve(static_cast<size_t>(L) + m.mtp.size());

    for (int l = 0; l < L; ++l) {
        const int rep_layer = layer_map ? (*layer_map)[static_cast<size_t>(l)] : l;
        const auto& imp = expert_importance(rep, rep_layer, metric);
        const std::vector<float>* sim = similarity == SimilarityMethod::RouterWeights
                                            ? nullptr
                                            : &expert_similarity(rep, rep_layer, similarity);
        MergeLayout lay = lay_out(imp, sim, m.layers[static_cast<size_t>(l)].moe.router,
                                  &disp[static_cast<size_t>(l)]);
        sel.survivors.push_back(lay.survivors);
        sel.layouts.push_back(std::move(lay));
        sel.importances.push_back(&imp);
    }
    for (size_t depth = 0; depth < m.mtp.size(); ++depth) {
        const auto& imp = mtp_expert_importance(rep, static_cast<int>(depth), metric);
        const std::vector<float>* sim =
            similarity == SimilarityMethod::RouterWeights
                ? nullptr
                : &mtp_expert_similarity(rep, static_cast<int>(depth), similarity);
        MergeLayout lay = lay_out(imp, sim, m.mtp[depth].block.moe.router, nullptr);
        sel.mtp_survivors.push_back(lay.survivors);
        sel.mtp_layouts.push_back(std::move(lay));
        sel.mtp_importances.push_back(&imp);
    }
    HybridModel out = detail::rebuild_with_experts(m, target_top_k, sel, report, opt);
    if (report) report->expert_disposition = std::move(disp);
    return out;
}

// Fixed pipeline order: depth, then width, then experts.
inline std::pair<HybridModel, PruneReport> apply_plan(const HybridModel& m, const CalibrationReport& rep,
                                                      const CompressionPlan& plan,
                                                      OptimizerMoments* opt = nullptr) {
    plan.validate(m.config);
    PruneReport report;
    report.params_before = m.param_count();
    HybridModel cur = m.clone();
    std::vector<int> layer_map;
    for (int i = 0; i < m.config.n_layers; ++i) layer_map.push_back(i);

    if (plan.depth) {
        PruneReport sub;
        cur = plan.depth->mode == DepthPruneMode::LastN
                  ? prune_depth_last(cur, plan.depth->n_layers, &sub, opt)
                  : prune_depth_similarity(cur, rep, plan.depth->n_layers, &sub, opt);
        report.kept_layers = sub.kept_layers;
        report.depth_clamped = sub.depth_clamped;
        report.depth_chunk_start = sub.depth_chunk_start;
        layer_map = sub.kept_layers;
    } else {
        report.kept_layers = layer_map;
    }
    if (plan.width) {
        PruneReport sub;
        cur = prune_width(cur, rep, plan.width->target_d, plan.width->reinit_mtp, &sub, opt);
        report.kept_dims = sub.kept_dims;
    } else {
        for (int i = 0; i < m.config.d_model; ++i) report.kept_dims.push_back(i);
    }
    if (plan.experts) {
        PruneReport sub;
        const auto& e = *plan.experts;
        if (e.action == ExpertAction::Prune)
            cur = prune_experts(cur, rep, e.target_n, e.target_top_k, e.metric, &layer_map, &sub, opt);
        else
            cur = merge_experts(cur, rep, e.target_n, e.target_top_k, e.metric, e.similarity,
                                e.action == ExpertAction::MergePartialPreserve, &layer_map, &sub, opt);
        report.expert_disposition = sub.expert_disposition;
        report.expert_source = sub.expert_source;
    } else {
        report.expert_disposition.assign(report.kept_layers.size(),
                                         std::vector<ExpertOutcome>(static_cast<size_t>(m.config.n_experts),
                                                                    {ExpertDisposition::Kept, -1}));
        std::vector<int> identity;
        for (int i = 0; i < m.config.n_experts; ++i) identity.push_back(i);
        report.expert_source.assign(report.kept_layers.size(), identity);
    }
    validate_model(cur);
    report.params_after = cur.param_count();
    return {std::move(cur), std::move(report)};
}

}  // namespace moelab
