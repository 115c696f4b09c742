// SPDX-License-Identifier: Apache-2.0
//
// Distillation tests: closed-form loss values, direct-summation oracles,
// unrolled MTP loss oracle, schedule endpoints and monotonicity, optimizer
// determinism/ablation equality, and the progressive stage arithmetic.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "moelab/distill.hpp"
#include "moelab/grad_check.hpp"

using namespace moelab;

namespace {

ModelConfig tiny_config(uint64_t seed = 91) {
    ModelConfig c;
    c.d_model = 16;
    c.n_layers = 2;
    c.layer_pattern = {LayerKind::Linear, LayerKind::Full};
    c.n_q_heads = 2;
    c.n_kv_heads = 1;
    c.d_head = 8;
    c.d_k = 4;
    c.d_v = 4;
    c.n_qk_heads = 2;
    c.n_v_heads = 2;
    c.d_conv = 2;
    c.n_experts = 4;
    c.n_shared = 1;
    c.top_k = 2;
    c.d_ff = 8;
    c.vocab_size = 17;
    c.n_mtp_depths = 1;
    c.seed = seed;
    return c;
}

Tensor random_logits(int n, int v, uint64_t seed) {
    Rng rng(seed, "logits");
    Tensor t = Tensor::zeros({n, v});
    for (auto& x : t.values()) x = rng.uniform(-2.0f, 2.0f);
    return t;
}

std::vector<int> periodic_corpus(int len, int period, int vocab) {
    std::vector<int> t(static_cast<size_t>(len));
    for (int i = 0; i < len; ++i) t[static_cast<size_t>(i)] = (i % period) % vocab;
    return t;
}

TrainPlan tiny_plan(int64_t steps = 4) {
    TrainPlan p;
    p.batch_size = 2;
    p.seq_len = 8;
    p.total_tokens = steps * p.tokens_per_step();
    p.warmup_steps = 2;
    p.lr_peak = 1e-3f;
    p.lr_min = 1e-4f;
    p.lb_weight = 1e-3f;
    p.seed = 7;
    return p;
}

}  // namespace

TEST_CASE("lm_loss closed forms and oracle") {
    Tensor uniform = Tensor::full({3, 4}, 1.25f);
    Tensor l = lm_loss(uniform, {0, 3, 2}, nullptr);
    CHECK(l.item() == Catch::Approx(std::log(4.0)).margin(1e-6));

    // One-hot-ish logits with growing margin drive the loss to zero.
    float prev = 1e9f;
    for (float margin : {2.0f, 5.0f, 10.0f}) {
        Tensor z = Tensor::zeros({2, 5});
        z.at(0, 1) = margin;
        z.at(1, 4) = margin;
        const float cur = lm_loss(z, {1, 4}, nullptr).item();
        CHECK(cur < prev);
        prev = cur;
    }
    CHECK(prev < 1e-3f);

    // direct -log p oracle
    Tensor z = random_logits(5, 9, 1);
    std::vector<int> targets{3, 0, 8, 1, 1};
    Tensor got = lm_loss(z, targets, nullptr);
    double want = 0.0;
    for (int r = 0; r < 5; ++r) {
        double mx = z.at(r, 0);
        for (int v = 1; v < 9; ++v) mx = std::max(mx, static_cast<double>(z.at(r, v)));
        double sum = 0.0;
        for (int v = 0; v < 9; ++v) sum += std::exp(z.at(r, v) - mx);
        want += -(z.at(r, targets[static_cast<size_t>(r)]) - mx - std::log(sum));
    }
    want /= 5.0;
    CHECK(got.item() == Catch::Approx(want).epsilon(1e-6));
}

TEST_CASE("kd_loss self-distillation and one-hot reduction") {
    Tensor t = random_logits(4, 7, 2);
    KdLoss self = kd_loss(t, t, nullptr);
    CHECK(std::abs(self.kl) < 1e-6);
    Tensor q = softmax_rows(t, nullptr);
    CHECK(self.loss.item() == Catch::Approx(entropy_rows(q)).margin(1e-6));

    // near-one-hot teacher reduces to lm loss on its argmax
    Tensor hot = Tensor::zeros({3, 6});
    std::vector<int> arg{2, 5, 0};
    for (int r = 0; r < 3; ++r) hot.at(r, arg[static_cast<size_t>(r)]) = 60.0f;
    Tensor s = random_logits(3, 6, 3);
    KdLoss kd = kd_loss(s, hot, nullptr);
    CHECK(kd.loss.item() == Catch::Approx(lm_loss(s, arg, nullptr).item()).margin(1e-5));

    // direct-summation oracle
    Tensor s2 = random_logits(4, 7, 4);
    KdLoss kd2 = kd_loss(s2, t, nullptr);
    Tensor p = softmax_rows(s2, nullptr);
    double want = 0.0;
    for (int r = 0; r < 4; ++r)
        for (int v = 0; v < 7; ++v) want -= static_cast<double>(q.at(r, v)) * std::log(static_cast<double>(p.at(r, v)));
    CHECK(kd2.loss.item() == Catch::Approx(want / 4.0).epsilon(1e-5));
}

TEST_CASE("mtp loss: D=1 equals the depth-1 stream shifted by two") {
    const int T = 9, V = 11;
    std::vector<int> tokens{1, 4, 2, 8, 0, 10, 3, 5, 7};
    // depth-1 stream has T-1 positions; targets exist for the first T-2
    Tensor depth1 = random_logits(T - 1, V, 5);
    MtpLosses ml = mtp_losses({depth1}, tokens, Tensor(), true, false, nullptr);
    REQUIRE(ml.depths_used == 1);
    std::vector<int> shifted(tokens.begin() + 2, tokens.end());
    Tensor want = lm_loss(row_slice(depth1, 0, T - 2, nullptr), shifted, nullptr);
    CHECK(ml.lm.item() == Catch::Approx(want.item()).margin(1e-7));
}

TEST_CASE("mtp kd: student matching teacher rows gives zero KL") {
    const int T = 8, V = 9;
    std::vector<int> tokens{0, 1, 2, 3, 4, 5, 6, 7};
    Tensor teacher = random_logits(T, V, 6);
    // student depth-1 logits at position i copy teacher position i+1
    Tensor depth1 = Tensor::zeros({T - 1, V});
    for (int i = 0; i < T - 1; ++i)
        for (int v = 0; v < V; ++v) depth1.at(i, v) = teacher.at(i + 1, v);
    MtpLosses ml = mtp_losses({depth1}, tokens, teacher, false, true, nullptr);
    CHECK(std::abs(ml.kd_kl) < 1e-6);
}

TEST_CASE("mtp losses match a fully unrolled oracle at D=2, T=5") {
    const int T = 5, V = 7;
    std::vector<int> tokens{2, 6, 1, 0, 4};
    Tensor teacher = random_logits(T, V, 7);
    Tensor d1 = random_logits(T - 1, V, 8);
    Tensor d2 = random_logits(T - 2, V, 9);
    MtpLosses ml = mtp_losses({d1, d2}, tokens, teacher, true, true, nullptr);
    REQUIRE(ml.depths_used == 2);

    Tensor q = softmax_rows(teacher, nullptr);
    auto logp = [&](const Tensor& z, int r, int v) {
        double mx = z.at(r, 0);
        for (int j = 1; j < V; ++j) mx = std::max(mx, static_cast<double>(z.at(r, j)));
        double sum = 0.0;
        for (int j = 0; j < V; ++j) sum += std::exp(z.at(r, j) - mx);
        return static_cast<double>(z.at(r, v)) - mx - std::log(sum);
    };
    double lm = 0.0, kd = 0.0;
    for (int k = 1; k <= 2; ++k) {
        const Tensor& z = k == 1 ? d1 : d2;
        const int n_pos = T - k - 1;
        double lm_k = 0.0, kd_k = 0.0;
        for (int i = 0; i < n_pos; ++i) {
            lm_k -= logp(z, i, tokens[static_cast<size_t>(i + k + 1)]);
            for (int v = 0; v < V; ++v) kd_k -= static_cast<double>(q.at(i + k, v)) * logp(z, i, v);
        }
        lm += lm_k / n_pos;
        kd += kd_k / n_pos;
    }
    CHECK(ml.lm.item() == Catch::Approx(lm / 2.0).epsilon(1e-6));
    CHECK(ml.kd.item() == Catch::Approx(kd / 2.0).epsilon(1e-6));
}

TEST_CASE("mtp losses skip depths without targets") {
    const int V = 6;
    std::vector<int> tokens{1, 2, 3};  // T=3: depth 1 has 1 target, depth 2 none
    Tensor d1 = random_logits(2, V, 10);
    Tensor d2 = random_logits(1, V, 11);
    MtpLosses ml = mtp_losses({d1, d2}, tokens, Tensor(), true, false, nullptr);
    CHECK(ml.depths_used == 1);
}

TEST_CASE("total loss degenerate weightings") {
    Tensor lm = Tensor::from({1}, {1.7f});
    Tensor kd = Tensor::from({1}, {0.9f});
    Tensor mlm = Tensor::from({1}, {2.3f});
    Tensor mkd = Tensor::from({1}, {0.4f});
    LossFlags flags;
    CHECK(total_loss(lm, kd, mlm, mkd, 1.0f, 0.0f, flags, nullptr).item() == 0.9f);
    CHECK(total_loss(lm, kd, mlm, mkd, 0.0f, 0.0f, flags, nullptr).item() == 1.7f);
    const float want = 0.25f * 1.7f + 0.75f * 0.9f + 0.1f * (0.25f * 2.3f + 0.75f * 0.4f);
    CHECK(total_loss(lm, kd, mlm, mkd, 0.75f, 0.1f, flags, nullptr).item() ==
          Catch::Approx(want).margin(1e-7));
}

TEST_CASE("load balance: uniform routing scores exactly one") {
    ForwardTrace tr;
    RoutingRecord rec;
    rec.logits = Tensor::zeros({2, 4});
    rec.top_k = 2;
    rec.indices = {0, 1, 2, 3};  // token 0 -> experts {0,1}, token 1 -> {2,3}
    rec.weights = {0.5f, 0.5f, 0.5f, 0.5f};
    tr.routing.push_back(rec);
    Tensor lb = load_balance_loss({&tr}, 4, 2, nullptr);
    CHECK(lb.item() == Catch::Approx(1.0).margin(1e-6));

    // concentrated routing scores higher
    ForwardTrace bad;
    RoutingRecord brec;
    brec.logits = Tensor::zeros({2, 4});
    for (int r = 0; r < 2; ++r) brec.logits.at(r, 0) = 4.0f;
    brec.top_k = 2;
    brec.indices = {0, 1, 0, 1};
    brec.weights = {0.9f, 0.1f, 0.9f, 0.1f};
    bad.routing.push_back(brec);
    CHECK(load_balance_loss({&bad}, 4, 2, nullptr).item() > 1.0f);
}

TEST_CASE("load balance matches an event-log recount on real traces") {
    ModelConfig c = tiny_config();
    HybridModel m = HybridModel::init(c);
    std::vector<std::vector<int>> batch{{1, 2, 3, 4, 5, 6}, {7, 8, 9, 10, 11, 12}};
    std::vector<ForwardTrace> traces(2);
    std::vector<const ForwardTrace*> ptrs;
    for (size_t s = 0; s < 2; ++s) {
        backbone_forward(batch[s], m, nullptr, &traces[s]);
        ptrs.push_back(&traces[s]);
    }
    Tensor lb = load_balance_loss(ptrs, c.n_experts, c.top_k, nullptr);

    double want = 0.0;
    const int N = c.n_experts;
    for (int l = 0; l < c.n_layers; ++l) {
        std::vector<double> counts(static_cast<size_t>(N), 0.0), psum(static_cast<size_t>(N), 0.0);
        int64_t tokens = 0;
        for (const auto& tr : traces) {
            const auto& rec = tr.routing[static_cast<size_t>(l)];
            tokens += rec.logits.dim(0);
            for (int idx : rec.indices) counts[static_cast<size_t>(idx)] += 1.0;
            Tensor probs = softmax_rows(rec.logits, nullptr);
            for (int r = 0; r < probs.dim(0); ++r)
                for (int e = 0; e < N; ++e) psum[static_cast<size_t>(e)] += probs.at(r, e);
        }
        double term = 0.0;
        for (int e = 0; e < N; ++e)
            term += counts[static_cast<size_t>(e)] / (static_cast<double>(tokens) * c.top_k) *
                    (psum[static_cast<size_t>(e)] / static_cast<double>(tokens));
        want += term * N;
    }
    want /= c.n_layers;
    CHECK(lb.item() == Catch::Approx(want).epsilon(1e-6));
}

TEST_CASE("schedule endpoints and interpolation") {
    TrainPlan p = tiny_plan(100);
    p.warmup_steps = 10;
    const int64_t total = p.steps();
    REQUIRE(total == 100);

    CHECK(schedules(0, total, p).lambda == Catch::Approx(1.0).margin(1e-7));
    CHECK(schedules(total, total, p).lambda == Catch::Approx(0.75).margin(1e-7));
    CHECK(schedules(total / 2, total, p).lambda == Catch::Approx(0.875).margin(1e-6));
    CHECK(schedules(total / 2, total, p).beta == Catch::Approx(0.2).margin(1e-6));
    CHECK(schedules(0, total, p).beta == Catch::Approx(0.3).margin(1e-6));
    CHECK(schedules(total, total, p).beta == Catch::Approx(0.1).margin(1e-6));
    CHECK(schedules(10, total, p).lr == Catch::Approx(p.lr_peak).margin(1e-9));
    CHECK(schedules(total, total, p).lr == Catch::Approx(p.lr_min).margin(1e-9));
    CHECK(schedules(0, total, p).lr == 0.0f);

    // monotonicity on a step grid
    float prev_lambda = 2.0f, prev_beta = 2.0f, prev_lr = -1.0f;
    bool lr_rising = true;
    for (int64_t s = 0; s <= total; ++s) {
        auto sc = schedules(s, total, p);
        CHECK(sc.lambda <= prev_lambda + 1e-7f);
        CHECK(sc.beta <= prev_beta + 1e-7f);
        if (lr_rising && sc.lr < prev_lr - 1e-9f) lr_rising = false;
        if (!lr_rising) CHECK(sc.lr <= prev_lr + 1e-9f);
        prev_lambda = sc.lambda;
        prev_beta = sc.beta;
        prev_lr = sc.lr;
    }
}

TEST_CASE("train plan rejects non-divisible token budgets") {
    TrainPlan p = tiny_plan();
    p.total_tokens += 1;
    CHECK_THROWS_AS(p.steps(), ArgError);
}

TEST_CASE("train_step is deterministic and leaves the teacher untouched") {
    ModelConfig c = tiny_config();
    HybridModel teacher = HybridModel::init(c);
    auto teacher_snapshot = teacher.clone();
    TrainPlan plan = tiny_plan();
    std::vector<std::vector<int>> batch{{1, 2, 3, 4, 5, 6, 7, 8}, {9, 10, 11, 12, 13, 14, 15, 16}};

    auto run = [&] {
        ModelConfig sc = tiny_config(123);
        HybridModel student = HybridModel::init(sc);
        AdamW opt;
        StepMetrics m1 = train_step(student, teacher, batch, plan, schedules(0, 4, plan), opt);
        StepMetrics m2 = train_step(student, teacher, batch, plan, schedules(1, 4, plan), opt);
        return std::tuple<float, float, std::vector<float>>(m1.loss_total, m2.loss_total,
                                                            student.embed.values());
    };
    auto [a1, a2, aw] = run();
    auto [b1, b2, bw] = run();
    REQUIRE(a1 == b1);
    REQUIRE(a2 == b2);
    REQUIRE(aw == bw);

    auto before = teacher_snapshot.parameters();
    auto after = teacher.parameters();
    for (size_t i = 0; i < before.size(); ++i) REQUIRE(before[i].tensor.values() == after[i].tensor.values());
}

TEST_CASE("lambda=1 with zero balance weight matches a KD-only run exactly") {
    ModelConfig c = tiny_config();
    HybridModel teacher = HybridModel::init(c);
    std::vector<std::vector<int>> batch{{3, 1, 4, 1, 5, 9, 2, 6}, {2, 7, 1, 8, 2, 8, 1, 8}};

    TrainPlan both = tiny_plan();
    both.lambda_start = both.lambda_end = 1.0f;
    both.lb_weight = 0.0f;
    both.loss_flags = {true, true, false, false};  // LM computed, weight 0

    TrainPlan kd_only = both;
    kd_only.loss_flags = {false, true, false, false};

    auto run = [&](const TrainPlan& plan) {
        HybridModel student = HybridModel::init(tiny_config(321));
        AdamW opt;
        for (int s = 0; s < 3; ++s)
            train_step(student, teacher, batch, plan, schedules(s, 4, plan), opt);
        return student;
    };
    HybridModel a = run(both), b = run(kd_only);
    auto pa = a.parameters(), pb = b.parameters();
    for (size_t i = 0; i < pa.size(); ++i) REQUIRE(pa[i].tensor.values() == pb[i].tensor.values());

    // the LM value is still reported
    HybridModel probe = HybridModel::init(tiny_config(321));
    AdamW opt;
    StepMetrics mt = train_step(probe, teacher, batch, both, schedules(0, 4, both), opt);
    CHECK(mt.loss_lm > 0.0f);
}

TEST_CASE("full objective gradient passes grad_check on the tiny config") {
    ModelConfig c = tiny_config();
    HybridModel teacher = HybridModel::init(tiny_config(777));
    HybridModel student = HybridModel::init(c);
    TrainPlan plan = tiny_plan();
    std::vector<std::vector<int>> batch{{1, 2, 3, 4, 5, 6, 7, 8}};

    auto f = [&](Tape* tape) {
        return build_objective(student, teacher, batch, plan, 0.6f, 0.2f, tape, nullptr);
    };
    std::vector<Tensor> params;
    for (auto& p : student.parameters()) params.push_back(p.tensor);
    GradCheckOptions opt;
    opt.max_coords = 256;
    opt.seed = 9;
    auto rep = grad_check(f, params, opt);
    INFO(rep.summary());
    CHECK(rep.pass);
}

TEST_CASE("loss decreases over 200 steps on a memorizable corpus") {
    ModelConfig c = tiny_config();
    c.n_mtp_depths = 1;
    HybridModel teacher = HybridModel::init(tiny_config(555));
    HybridModel student = HybridModel::init(c);
    auto corpus = periodic_corpus(512, 6, c.vocab_size);

    TrainPlan plan = tiny_plan(200);
    plan.loss_flags = {true, false, true, false};  // pure LM objective
    plan.lr_peak = 3e-3f;
    plan.lr_min = 1e-3f;
    plan.warmup_steps = 20;
    plan.lb_weight = 1e-3f;

    BatchSampler sampler(corpus, plan.seq_len, plan.seed);
    AdamW opt;
    float first = -1.0f, last = 0.0f;
    run_distill(student, teacher, sampler, plan, opt, 0, plan.steps(), plan.steps(),
                [&](const StepMetrics& mt) {
                    if (first < 0.0f) first = mt.loss_lm;
                    last = mt.loss_lm;
                });
    INFO("first=" << first << " last=" << last);
    CHECK(last < 0.5f * first);
}

TEST_CASE("adamw drives a quadratic to its minimum") {
    Tensor w = Tensor::from({1}, {10.0f}).set_name("w").set_requires_grad();
    TrainPlan plan = tiny_plan();
    plan.weight_decay = 0.0f;
    AdamW opt;
    for (int s = 0; s < 400; ++s) {
        w.zero_grad();
        w.grad()[0] = 2.0f * (w.values()[0] - 3.0f);
        opt.apply({{"w", w}}, plan, 0.05f);
    }
    CHECK(w.values()[0] == Catch::Approx(3.0).margin(1e-2));
}

TEST_CASE("one_stage progressive equals apply_plan plus a single distill run") {
    ModelConfig c = tiny_config();
    c.n_layers = 4;
    c.layer_pattern = {LayerKind::Linear, LayerKind::Full, LayerKind::Linear, LayerKind::Full};
    HybridModel teacher = HybridModel::init(c);
    auto corpus = periodic_corpus(600, 7, c.vocab_size);
    std::vector<std::vector<int>> calib{{1, 2, 3, 4, 5, 6, 0, 1}, {2, 3, 4, 5, 6, 0, 1, 2}};

    CompressionPlan target;
    target.depth = DepthSpec{DepthPruneMode::LastN, 1};
    target.width = WidthSpec{12, false};
    target.experts = ExpertSpec{2, 2, ImportanceMetric::Soft, ExpertAction::MergePartialPreserve,
                                SimilarityMethod::RouterWeights};

    TrainPlan plan = tiny_plan(4);
    ProgressiveOptions opts;
    opts.calib_batches = calib;
    auto res = run_progressive(teacher, target, ScheduleMode::OneStage, plan, corpus, opts, nullptr);

    // manual path with identical seeds
    auto cal = collect(teacher, calib);
    AdamW opt;
    auto [student, pr] = apply_plan(teacher, cal, target, &opt.moments);
    BatchSampler sampler(corpus, plan.seq_len, plan.seed);
    run_distill(student, teacher, sampler, plan, opt, 0, plan.steps(), plan.steps(), nullptr);

    auto pa = res.student.parameters(), pb = student.parameters();
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i) REQUIRE(pa[i].tensor.values() == pb[i].tensor.values());
}

TEST_CASE("progressive stage arithmetic: halves round down, experts last") {
    ModelConfig c = tiny_config();
    c.n_layers = 8;
    c.layer_pattern = {LayerKind::Linear, LayerKind::Linear, LayerKind::Linear, LayerKind::Full};
    c.d_model = 16;
    CompressionPlan target;
    target.depth = DepthSpec{DepthPruneMode::LastN, 4};  // L 8 -> 4
    target.width = WidthSpec{8, false};                  // d 16 -> 8
    target.experts = ExpertSpec{2, 2, ImportanceMetric::Soft, ExpertAction::Prune,
                                SimilarityMethod::RouterWeights};

    auto depth_first = stage_specs(c, target, ScheduleMode::DepthFirst, nullptr);
    REQUIRE(depth_first.size() == 2);
    CHECK(depth_first[0].plan.depth->n_layers == 2);   // stage 1: L 8 -> 6
    CHECK(!depth_first[0].plan.width.has_value());
    CHECK(!depth_first[0].plan.experts.has_value());
    CHECK(depth_first[1].plan.depth->n_layers == 2);   // stage 2: L 6 -> 4
    CHECK(depth_first[1].plan.width->target_d == 8);
    CHECK(depth_first[1].plan.experts.has_value());

    auto joint = stage_specs(c, target, ScheduleMode::Joint, nullptr);
    CHECK(joint[0].plan.depth->n_layers == 2);
    CHECK(joint[0].plan.width->target_d == 12);  // half of the width reduction
    CHECK(!joint[0].plan.experts.has_value());

    auto width_first = stage_specs(c, target, ScheduleMode::WidthFirst, nullptr);
    CHECK(!width_first[0].plan.depth.has_value());
    CHECK(width_first[0].plan.width->target_d == 12);

    auto d3 = stage_specs(c, target, ScheduleMode::DepthFirst3, nullptr);
    REQUIRE(d3.size() == 3);
    CHECK(d3[0].plan.depth->n_layers == 2);
    CHECK(d3[1].plan.depth->n_layers == 2);
    CHECK(!d3[0].plan.width.has_value());
    CHECK(!d3[1].plan.width.has_value());
    CHECK(d3[2].plan.width->target_d == 8);
    CHECK(d3[2].plan.experts.has_value());
}

TEST_CASE("two-stage run keeps the global LR schedule continuous") {
    ModelConfig c = tiny_config();
    c.n_layers = 4;
    c.layer_pattern = {LayerKind::Linear, LayerKind::Full, LayerKind::Linear, LayerKind::Full};
    HybridModel teacher = HybridModel::init(c);
    auto corpus = periodic_corpus(600, 5, c.vocab_size);

    CompressionPlan target;
    target.depth = DepthSpec{DepthPruneMode::LastN, 2};
    target.width = WidthSpec{12, false};

    TrainPlan plan = tiny_plan(10);
    plan.warmup_steps = 2;
    ProgressiveOptions opts;
    opts.calib_batches = {{1, 2, 3, 4, 0, 1, 2, 3}};
    std::vector<StepMetrics> log;
    auto res = run_progressive(teacher, target, ScheduleMode::DepthFirst, plan, corpus, opts,
                               [&](const StepMetrics& mt) { log.push_back(mt); });
    REQUIRE(res.stages.size() == 2);
    REQUIRE(log.size() == 10);
    const int64_t boundary = res.stages[0].end_step;
    // every logged LR equals the global schedule value at its step index
    for (const auto& mt : log)
        CHECK(mt.lr == Catch::Approx(schedules(mt.step, 10, plan).lr).margin(1e-9));
    CHECK(res.stages[1].start_step == boundary);
    CHECK(res.stages[0].arch.n_layers == 3);
    CHECK(res.stages[0].arch.d_model == 16);
    CHECK(res.stages[1].arch.n_layers == 2);
    CHECK(res.stages[1].arch.d_model == 12);
    CHECK(res.stages[0].tokens + res.stages[1].tokens == plan.total_tokens);
}

TEST_CASE("evaluate reports loss, perplexity and accuracy") {
    ModelConfig c = tiny_config();
    HybridModel m = HybridModel::init(c);
    auto corpus = periodic_corpus(200, 4, c.vocab_size);
    auto r = evaluate(m, corpus, 8, 10);
    CHECK(r.positions == 80);
    CHECK(r.loss > 0.0f);
    CHECK(r.perplexity == Catch::Approx(std::exp(r.loss)).epsilon(1e-5));
    CHECK(r.accuracy >= 0.0f);
    CHECK(r.accuracy <= 1.0f);
}
