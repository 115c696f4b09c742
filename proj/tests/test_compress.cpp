// SPDX-License-Identifier: Apache-2.0
//
// Compression tests: truncated-forward oracle for depth pruning, shape-table
// oracle for width pruning, routing-log oracle for expert pruning, and a
// straight-line reference implementation of the partial-preservation merge.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>
#include <vector>

#include "moelab/compress.hpp"

using namespace moelab;

namespace {

ModelConfig small_config(uint64_t seed = 51) {
    ModelConfig c;
    c.d_model = 16;
    c.n_layers = 4;
    c.layer_pattern = {LayerKind::Linear, LayerKind::Full, LayerKind::Linear, LayerKind::Full};
    c.n_q_heads = 2;
    c.n_kv_heads = 1;
    c.d_head = 8;
    c.d_k = 4;
    c.d_v = 4;
    c.n_qk_heads = 2;
    c.n_v_heads = 2;
    c.d_conv = 2;
    c.n_experts = 8;
    c.n_shared = 1;
    c.top_k = 3;
    c.d_ff = 8;
    c.vocab_size = 19;
    c.n_mtp_depths = 1;
    c.seed = seed;
    return c;
}

std::vector<std::vector<int>> corpus(int n_seqs, int len, int vocab, uint64_t seed) {
    Rng rng(seed, "compress_corpus");
    std::vector<std::vector<int>> out;
    for (int s = 0; s < n_seqs; ++s) {
        std::vector<int> seq(static_cast<size_t>(len));
        for (auto& t : seq) t = static_cast<int>(rng.next_below(static_cast<uint64_t>(vocab)));
        out.push_back(std::move(seq));
    }
    return out;
}

void make_layer_noop(HybridModel& m, int layer) {
    auto& l = m.layers[static_cast<size_t>(layer)];
    auto zero = [](Tensor t) { std::fill(t.values().begin(), t.values().end(), 0.0f); };
    if (l.kind == LayerKind::Full)
        zero(l.attn.wo);
    else
        zero(l.delta.wout);
    for (auto& e : l.moe.experts) zero(e.w3);
    for (auto& s : l.moe.shared) zero(s.w3);
}

// Straight-line reference of the partial-preservation merge bookkeeping.
struct RefLayout {
    std::vector<int> keep, base;
    std::vector<std::pair<int, int>> assigned;
};

RefLayout reference_merge(const std::vector<float>& imp, const std::vector<float>& sim, int n, int target,
                          bool preserve) {
    // rank experts by importance, descending, lower index first on ties
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (imp[static_cast<size_t>(a)] != imp[static_cast<size_t>(b)])
            return imp[static_cast<size_t>(a)] > imp[static_cast<size_t>(b)];
        return a < b;
    });
    RefLayout ref;
    const int keep_count = preserve ? target / 2 : 0;
    for (int i = 0; i < keep_count; ++i) ref.keep.push_back(order[static_cast<size_t>(i)]);
    for (int i = keep_count; i < target; ++i) ref.base.push_back(order[static_cast<size_t>(i)]);
    for (int i = target; i < n; ++i) {
        const int disc = order[static_cast<size_t>(i)];
        int best = -1;
        float best_s = -2.0f;
        for (int b : ref.base) {
            const float s = sim[static_cast<size_t>(disc) * n + b];
            if (s > best_s || (s == best_s && b < best)) {
                best_s = s;
                best = b;
            }
        }
        ref.assigned.push_back({disc, best});
    }
    return ref;
}

bool models_equal(const HybridModel& a, const HybridModel& b) {
    auto pa = a.parameters(), pb = b.parameters();
    if (pa.size() != pb.size()) return false;
    for (size_t i = 0; i < pa.size(); ++i) {
        if (pa[i].name != pb[i].name) return false;
        if (pa[i].tensor.values() != pb[i].tensor.values()) return false;
    }
    return true;
}

size_t expected_param_count(const ModelConfig& c) {
    auto layer_params = [&](LayerKind kind) {
        size_t n = 2u * c.d_model;  // norms
        if (kind == LayerKind::Full) {
            n += static_cast<size_t>(c.d_model) * c.n_q_heads * c.d_head;        // wq
            n += 2u * static_cast<size_t>(c.d_model) * c.n_kv_heads * c.d_head;  // wk, wv
            n += static_cast<size_t>(c.n_q_heads) * c.d_head * c.d_model;        // wo
            n += static_cast<size_t>(c.d_model) * c.n_q_heads;                   // gates
        } else {
            const size_t qk = static_cast<size_t>(c.n_qk_heads) * c.d_k;
            const size_t vd = static_cast<size_t>(c.n_v_heads) * c.d_v;
            n += 2u * c.d_model * qk + c.d_model * vd + vd * c.d_model;
            n += 2u * static_cast<size_t>(c.d_model) * c.n_v_heads;  // alpha, beta
            n += static_cast<size_t>(c.d_conv) * (2u * qk + vd);     // convs
        }
        n += static_cast<size_t>(c.d_model) * c.n_experts;  // router
        n += static_cast<size_t>(c.d_model) * c.n_shared;   // shared gate
        const size_t expert = 2u * c.d_model * c.d_ff + static_cast<size_t>(c.d_ff) * c.d_model;
        n += expert * (static_cast<size_t>(c.n_experts) + c.n_shared);
        return n;
    };
    size_t total = 2u * static_cast<size_t>(c.vocab_size) * c.d_model + c.d_model;
    for (int i = 0; i < c.n_layers; ++i) total += layer_params(c.kind(i));
    for (int k = 0; k < c.n_mtp_depths; ++k)
        total += 2u * static_cast<size_t>(c.d_model) * c.d_model + 2u * c.d_model + layer_params(LayerKind::Full);
    return total;
}

}  // namespace

TEST_CASE("depth prune keeps the leading 75% and matches truncated forward") {
    ModelConfig c = small_config();
    c.n_layers = 8;
    c.layer_pattern = {LayerKind::Linear, LayerKind::Linear, LayerKind::Linear, LayerKind::Full};
    HybridModel m = HybridModel::init(c);
    PruneReport rep;
    HybridModel pruned = prune_depth_last(m, 2, &rep);
    validate_model(pruned);
    CHECK(pruned.config.n_layers == 6);
    CHECK(rep.kept_layers == std::vector<int>{0, 1, 2, 3, 4, 5});

    // Truncated-forward oracle: run the original stack through layer 6 only.
    auto toks = corpus(1, 7, c.vocab_size, 1)[0];
    Tensor x = gather_rows(m.embed, toks, nullptr);
    for (int l = 0; l < 6; ++l) x = block_forward(x, m.layers[static_cast<size_t>(l)], c, nullptr, nullptr, nullptr);
    Tensor want = matmul(rmsnorm(x, m.final_norm, c.rms_eps, nullptr), m.head, nullptr);
    Tensor got = backbone_forward(toks, pruned, nullptr, nullptr);
    REQUIRE(got.values() == want.values());
}

TEST_CASE("depth prune rejects n=0 and n>=L") {
    HybridModel m = HybridModel::init(small_config());
    CHECK_THROWS_AS(prune_depth_last(m, 0, nullptr), ArgError);
    CHECK_THROWS_AS(prune_depth_last(m, 4, nullptr), ArgError);
}

TEST_CASE("similarity depth prune removes a constructed no-op layer") {
    ModelConfig c = small_config();
    HybridModel m = HybridModel::init(c);
    make_layer_noop(m, 2);
    auto rep = collect(m, corpus(3, 8, c.vocab_size, 2));
    PruneReport pr;
    HybridModel pruned = prune_depth_similarity(m, rep, 1, &pr);
    CHECK(pr.kept_layers == std::vector<int>{0, 1, 3});

    // Removing a functional no-op leaves outputs unchanged.
    auto toks = corpus(1, 6, c.vocab_size, 3)[0];
    Tensor a = backbone_forward(toks, m, nullptr, nullptr);
    Tensor b = backbone_forward(toks, pruned, nullptr, nullptr);
    for (size_t i = 0; i < a.numel(); ++i) CHECK(std::abs(a.data()[i] - b.data()[i]) < 1e-5);
}

TEST_CASE("similarity depth prune on L=2 removes the second layer") {
    ModelConfig c = small_config();
    c.n_layers = 2;
    c.layer_pattern = {LayerKind::Linear, LayerKind::Full};
    HybridModel m = HybridModel::init(c);
    auto rep = collect(m, corpus(2, 6, c.vocab_size, 4));
    PruneReport pr;
    HybridModel pruned = prune_depth_similarity(m, rep, 1, &pr);
    CHECK(pr.kept_layers == std::vector<int>{0});
}

TEST_CASE("similarity depth prune clamps an overflowing chunk backward") {
    ModelConfig c = small_config();
    HybridModel m = HybridModel::init(c);
    make_layer_noop(m, 3);  // argmax at the last boundary
    auto rep = collect(m, corpus(2, 6, c.vocab_size, 5));
    PruneReport pr;
    HybridModel pruned = prune_depth_similarity(m, rep, 2, &pr);
    CHECK(pr.depth_clamped);
    CHECK(pr.kept_layers == std::vector<int>{0, 1});
    validate_model(pruned);
}

TEST_CASE("width prune at target_d = d is the exact identity on logits") {
    ModelConfig c = small_config();
    HybridModel m = HybridModel::init(c);
    auto rep = collect(m, corpus(2, 8, c.vocab_size, 6));
    HybridModel same = prune_width(m, rep, c.d_model);
    auto toks = corpus(1, 7, c.vocab_size, 7)[0];
    Tensor a = backbone_forward(toks, m, nullptr, nullptr);
    Tensor b = backbone_forward(toks, same, nullptr, nullptr);
    REQUIRE(a.values() == b.values());
}

TEST_CASE("width prune 16 -> 12 satisfies the shape table and runs") {
    ModelConfig c = small_config();
    HybridModel m = HybridModel::init(c);
    auto rep = collect(m, corpus(2, 8, c.vocab_size, 8));
    PruneReport pr;
    HybridModel pruned = prune_width(m, rep, 12, false, &pr);
    validate_model(pruned);
    REQUIRE(pr.kept_dims.size() == 12);
    CHECK(std::is_sorted(pr.kept_dims.begin(), pr.kept_dims.end()));

    ModelConfig want = c;
    want.d_model = 12;
    CHECK(pruned.param_count() == expected_param_count(want));

    // Spot-check the slicing itself on the embedding and head.
    for (int v = 0; v < 3; ++v)
        for (int j = 0; j < 12; ++j) {
            CHECK(pruned.embed.at(v, j) == m.embed.at(v, pr.kept_dims[static_cast<size_t>(j)]));
            CHECK(pruned.head.at(j, v) == m.head.at(pr.kept_dims[static_cast<size_t>(j)], v));
        }
    // MTP projection: both concatenated halves use the same kept set.
    for (int j = 0; j < 12; ++j)
        for (int o = 0; o < 12; ++o) {
            CHECK(pruned.mtp[0].proj.at(j, o) ==
                  m.mtp[0].proj.at(pr.kept_dims[static_cast<size_t>(j)], pr.kept_dims[static_cast<size_t>(o)]));
            CHECK(pruned.mtp[0].proj.at(12 + j, o) ==
                  m.mtp[0].proj.at(c.d_model + pr.kept_dims[static_cast<size_t>(j)],
                                   pr.kept_dims[static_cast<size_t>(o)]));
        }
    auto toks = corpus(1, 6, c.vocab_size, 9)[0];
    Tensor logits = backbone_forward(toks, pruned, nullptr, nullptr);
    CHECK(logits.dim(1) == c.vocab_size);
    CHECK_THROWS_AS(prune_width(m, rep, 17), ArgError);
}

TEST_CASE("expert prune with target_n = N only changes top_k") {
    ModelConfig c = small_config();
    HybridModel m = HybridModel::init(c);
    auto rep = collect(m, corpus(2, 8, c.vocab_size, 10));
    PruneReport pr;
    HybridModel out =
        prune_experts(m, rep, c.n_experts, 2, ImportanceMetric::Soft, nullptr, &pr);
    CHECK(out.config.top_k == 2);
    CHECK(out.config.n_experts == c.n_experts);
    // weights unchanged
    for (int l = 0; l < c.n_layers; ++l)
        REQUIRE(out.layers[static_cast<size_t>(l)].moe.experts[0].w1.values() ==
                m.layers[static_cast<size_t>(l)].moe.experts[0].w1.values());
}

TEST_CASE("pruning never-routed experts preserves calibration outputs") {
    ModelConfig c = small_config();
    HybridModel m = HybridModel::init(c);
    // Two tokens at top_k=3 can touch at most 6 of the 8 experts per layer, so
    // pruning to the 6 most frequent removes only never-routed experts.
    auto cal = corpus(1, 2, c.vocab_size, 11);
    auto rep = collect(m, cal);
    for (const auto& st : rep.expert_stats) {
        int routed = 0;
        for (auto cnt : st.routed_token_counts)
            if (cnt > 0) ++routed;
        REQUIRE(routed <= 6);
    }

    PruneReport pr;
    HybridModel pruned = prune_experts(m, rep, 6, c.top_k, ImportanceMetric::Freq, nullptr, &pr);
    for (const auto& seq : cal) {
        Tensor a = backbone_forward(seq, m, nullptr, nullptr);
        Tensor b = backbone_forward(seq, pruned, nullptr, nullptr);
        for (size_t i = 0; i < a.numel(); ++i) REQUIRE(std::abs(a.data()[i] - b.data()[i]) < 1e-6);
    }
    // Everything pruned away was never routed.
    for (int l = 0; l < c.n_layers; ++l)
        for (int e = 0; e < c.n_experts; ++e)
            if (pr.expert_disposition[static_cast<size_t>(l)][static_cast<size_t>(e)].kind ==
                ExpertDisposition::Pruned)
                CHECK(rep.expert_stats[static_cast<size_t>(l)].routed_token_counts[static_cast<size_t>(e)] == 0);
}

TEST_CASE("pairwise merge with equal importance is the arithmetic mean") {
    ModelConfig c = small_config();
    c.n_experts = 2;
    c.top_k = 1;
    HybridModel m = HybridModel::init(c);
    CalibrationReport rep = collect(m, corpus(2, 6, c.vocab_size, 12));
    for (auto& st : rep.expert_stats) st.soft = {0.5f, 0.5f};
    HybridModel merged = merge_experts(m, rep, 1, 1, ImportanceMetric::Soft,
                                       SimilarityMethod::RouterWeights, false);
    REQUIRE(merged.config.n_experts == 1);
    for (int l = 0; l < c.n_layers; ++l) {
        const auto& a = m.layers[static_cast<size_t>(l)].moe.experts[0].w1;
        const auto& b = m.layers[static_cast<size_t>(l)].moe.experts[1].w1;
        const auto& g = merged.layers[static_cast<size_t>(l)].moe.experts[0].w1;
        for (size_t i = 0; i < g.numel(); ++i)
            REQUIRE(g.data()[i] == Catch::Approx(0.5f * (a.data()[i] + b.data()[i])).margin(1e-7));
    }
}

TEST_CASE("zero-importance partner leaves the base expert unchanged") {
    ModelConfig c = small_config();
    c.n_experts = 2;
    c.top_k = 1;
    HybridModel m = HybridModel::init(c);
    CalibrationReport rep = collect(m, corpus(2, 6, c.vocab_size, 13));
    for (auto& st : rep.expert_stats) st.soft = {1.0f, 0.0f};
    HybridModel merged = merge_experts(m, rep, 1, 1, ImportanceMetric::Soft,
                                       SimilarityMethod::RouterWeights, false);
    for (int l = 0; l < c.n_layers; ++l)
        REQUIRE(merged.layers[static_cast<size_t>(l)].moe.experts[0].w2.values() ==
                m.layers[static_cast<size_t>(l)].moe.experts[0].w2.values());
}

TEST_CASE("merge layout matches the straight-line reference on random cases") {
    Rng rng(14, "layout");
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 4 + static_cast<int>(rng.next_below(8));       // 4..11
        const int target = 2 + static_cast<int>(rng.next_below(static_cast<uint64_t>(n - 2)));
        const bool preserve = rng.next_below(2) == 0;
        std::vector<float> imp(static_cast<size_t>(n));
        for (auto& v : imp) v = std::floor(rng.uniform(0.0f, 8.0f)) / 4.0f;  // ties likely
        std::vector<float> sim(static_cast<size_t>(n) * n, 0.0f);
        for (int i = 0; i < n; ++i) {
            sim[static_cast<size_t>(i) * n + i] = 1.0f;
            for (int j = i + 1; j < n; ++j) {
                const float s = std::floor(rng.uniform(-4.0f, 4.0f)) / 4.0f;
                sim[static_cast<size_t>(i) * n + j] = s;
                sim[static_cast<size_t>(j) * n + i] = s;
            }
        }
        auto got = plan_merge_layout(imp, sim, n, target, preserve);
        auto ref = reference_merge(imp, sim, n, target, preserve);
        REQUIRE(got.keep == ref.keep);
        REQUIRE(got.base == ref.base);
        REQUIRE(got.merged == ref.assigned);
        CHECK(got.keep.size() + got.base.size() == static_cast<size_t>(target));
        CHECK(got.keep.size() == static_cast<size_t>(preserve ? target / 2 : 0));
        // dispositions partition the expert set
        std::vector<int> seen(static_cast<size_t>(n), 0);
        for (int e : got.keep) seen[static_cast<size_t>(e)]++;
        for (int e : got.base) seen[static_cast<size_t>(e)]++;
        for (auto& [d2, b2] : got.merged) seen[static_cast<size_t>(d2)]++;
        for (int s2 : seen) REQUIRE(s2 == 1);
    }
}

TEST_CASE("partial preservation: 8 -> 4 keeps 2 verbatim and merges into 2 bases") {
    ModelConfig c = small_config();
    HybridModel m = HybridModel::init(c);
    auto rep = collect(m, corpus(3, 8, c.vocab_size, 15));
    PruneReport pr;
    HybridModel merged = merge_experts(m, rep, 4, 3, ImportanceMetric::Soft,
                                       SimilarityMethod::ExpertVector, true, nullptr, &pr);
    validate_model(merged);
    CHECK(merged.config.n_experts == 4);
    CHECK(merged.config.top_k == 3);
    for (int l = 0; l < c.n_layers; ++l) {
        const auto& disp = pr.expert_disposition[static_cast<size_t>(l)];
        int keeps = 0, bases = 0, merged_n = 0;
        for (const auto& d2 : disp) {
            if (d2.kind == ExpertDisposition::Kept) ++keeps;
            if (d2.kind == ExpertDisposition::Base) ++bases;
            if (d2.kind == ExpertDisposition::MergedInto) ++merged_n;
        }
        CHECK(keeps == 2);
        CHECK(bases == 2);
        CHECK(merged_n == 4);
        // Kept experts are bit-identical to their originals.
        const auto& src = pr.expert_source[static_cast<size_t>(l)];
        for (size_t ne = 0; ne < src.size(); ++ne) {
            if (disp[static_cast<size_t>(src[ne])].kind != ExpertDisposition::Kept) continue;
            REQUIRE(merged.layers[static_cast<size_t>(l)].moe.experts[ne].w1.values() ==
                    m.layers[static_cast<size_t>(l)].moe.experts[static_cast<size_t>(src[ne])].w1.values());
            REQUIRE(merged.layers[static_cast<size_t>(l)].moe.experts[ne].w3.values() ==
                    m.layers[static_cast<size_t>(l)].moe.experts[static_cast<size_t>(src[ne])].w3.values());
        }
        // Router columns of survivors are unchanged.
        for (size_t ne = 0; ne < src.size(); ++ne)
            for (int r = 0; r < c.d_model; ++r)
                REQUIRE(merged.layers[static_cast<size_t>(l)].moe.router.at(r, static_cast<int>(ne)) ==
                        m.layers[static_cast<size_t>(l)].moe.router.at(r, src[ne]));
    }
}

TEST_CASE("importance scaling by a power of two leaves merge output bit-identical") {
    ModelConfig c = small_config();
    HybridModel m = HybridModel::init(c);
    auto rep = collect(m, corpus(3, 8, c.vocab_size, 16));
    auto scaled = rep;
    for (auto& st : scaled.expert_stats)
        for (auto& v : st.soft) v *= 4.0f;
    HybridModel a = merge_experts(m, rep, 4, 3, ImportanceMetric::Soft, SimilarityMethod::RouterWeights, true);
    HybridModel b = merge_experts(m, scaled, 4, 3, ImportanceMetric::Soft, SimilarityMethod::RouterWeights, true);
    REQUIRE(models_equal(a, b));
}

TEST_CASE("merge without calibration stats requires router-weight similarity") {
    ModelConfig c = small_config();
    HybridModel m = HybridModel::init(c);
    auto rep = collect(m, corpus(2, 6, c.vocab_size, 17));
    rep.n_tokens = 0;  // report without statistics
    CHECK_THROWS_AS(
        merge_experts(m, rep, 4, 3, ImportanceMetric::Soft, SimilarityMethod::ExpertVector, true),
        ArgError);
}

TEST_CASE("apply_plan with only depth equals prune_depth_last") {
    ModelConfig c = small_config();
    HybridModel m = HybridModel::init(c);
    auto rep = collect(m, corpus(2, 8, c.vocab_size, 18));
    CompressionPlan plan;
    plan.depth = DepthSpec{DepthPruneMode::LastN, 1};
    auto [out, pr] = apply_plan(m, rep, plan);
    HybridModel direct = prune_depth_last(m, 1);
    REQUIRE(models_equal(out, direct));
}

TEST_CASE("apply_plan full desk plan matches the shape table and is replayable") {
    ModelConfig c = small_config();
    c.n_layers = 8;
    c.layer_pattern = {LayerKind::Linear, LayerKind::Linear, LayerKind::Linear, LayerKind::Full};
    HybridModel m = HybridModel::init(c);
    auto rep = collect(m, corpus(3, 8, c.vocab_size, 19));
    CompressionPlan plan;
    plan.depth = DepthSpec{DepthPruneMode::LastN, 2};
    plan.width = WidthSpec{12, false};
    plan.experts = ExpertSpec{4, 3, ImportanceMetric::Soft, ExpertAction::MergePartialPreserve,
                              SimilarityMethod::RouterWeights};
    auto [student, pr] = apply_plan(m, rep, plan);
    validate_model(student);
    CHECK(student.config.n_layers == 6);
    CHECK(student.config.d_model == 12);
    CHECK(student.config.n_experts == 4);
    CHECK(student.config.top_k == 3);

    ModelConfig want = student.config;
    CHECK(pr.params_after == expected_param_count(want));
    CHECK(pr.params_after < pr.params_before);
    CHECK(pr.params_before == m.param_count());

    auto [student2, pr2] = apply_plan(m, rep, plan);
    REQUIRE(models_equal(student, student2));

    auto toks = corpus(1, 6, c.vocab_size, 20)[0];
    Tensor logits = backbone_forward(toks, student, nullptr, nullptr);
    CHECK(logits.dim(1) == c.vocab_size);
}

TEST_CASE("empty and invalid plans are rejected") {
    ModelConfig c = small_config();
    HybridModel m = HybridModel::init(c);
    auto rep = collect(m, corpus(2, 6, c.vocab_size, 21));
    CompressionPlan empty;
    CHECK_THROWS_AS(apply_plan(m, rep, empty), ArgError);
    CompressionPlan bad;
    bad.width = WidthSpec{32, false};
    CHECK_THROWS_AS(apply_plan(m, rep, bad), ArgError);
    CompressionPlan bad2;
    bad2.experts = ExpertSpec{4, 5, ImportanceMetric::Soft, ExpertAction::Prune, SimilarityMethod::RouterWeights};
    CHECK_THROWS_AS(apply_plan(m, rep, bad2), ArgError);
}

TEST_CASE("optimizer moments ride through depth, width and expert transforms") {
    ModelConfig c = small_config();
    HybridModel m = HybridModel::init(c);
    auto rep = collect(m, corpus(2, 8, c.vocab_size, 22));

    // Distinct recognizable moments: m = flat index, v = 1000 + flat index.
    OptimizerMoments opt;
    for (const auto& p : m.parameters()) {
        ParamMoments pm;
        pm.m.resize(p.tensor.numel());
        pm.v.resize(p.tensor.numel());
        for (size_t i = 0; i < pm.m.size(); ++i) {
            pm.m[i] = static_cast<float>(i);
            pm.v[i] = 1000.0f + static_cast<float>(i);
        }
        opt.emplace(p.name, std::move(pm));
    }

    CompressionPlan plan;
    plan.depth = DepthSpec{DepthPruneMode::LastN, 1};
    plan.width = WidthSpec{12, false};
    plan.experts = ExpertSpec{4, 3, ImportanceMetric::Soft, ExpertAction::MergePartialPreserve,
                              SimilarityMethod::RouterWeights};
    auto [student, pr] = apply_plan(m, rep, plan, &opt);

    // Every student parameter has a matching moment buffer of the same size.
    for (const auto& p : student.parameters()) {
        REQUIRE(opt.count(p.name) == 1);
        REQUIRE(opt[p.name].m.size() == p.tensor.numel());
    }
    REQUIRE(opt.size() == student.parameters().size());

    // Spot-check: embedding moments sliced by the kept dims.
    const auto& kept = pr.kept_dims;
    for (int v = 0; v < 2; ++v)
        for (int j = 0; j < 12; ++j)
            CHECK(opt["embed.weight"].m[static_cast<size_t>(v) * 12 + j] ==
                  static_cast<float>(v * c.d_model + kept[static_cast<size_t>(j)]));
}
