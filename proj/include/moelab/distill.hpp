// SPDX-License-Identifier: Apache-2.0
//
// Training objectives (LM, next-token KD, MTP-LM, MTP-KD, load balance),
// hyperparameter schedules, AdamW, the distillation step, and the one-stage /
// progressive multi-stage pipelines.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "moelab/compress.hpp"
#include "moelab/model.hpp"

namespace moelab {

struct LossFlags {
    bool use_lm = true;
    bool use_ntp_kd = true;
    bool use_mtp_lm = true;
    bool use_mtp_kd = true;
};

struct TrainPlan {
    int64_t total_tokens = 0;
    int batch_size = 8;   // sequences per step
    int seq_len = 32;
    float lr_peak = 4e-4f;
    float lr_min = 3e-5f;
    int warmup_steps = 2000;
    float lambda_start = 1.0f;
    float lambda_end = 0.75f;
    float beta_start = 0.3f;
    float beta_end = 0.1f;
    float lb_weight = 1e-3f;
    LossFlags loss_flags;
    uint64_t seed = 0;
    // AdamW
    float adam_beta1 = 0.9f;
    float adam_beta2 = 0.999f;
    float adam_eps = 1e-8f;
    float weight_decay = 0.01f;
    float grad_clip = 1.0f;

    int64_t tokens_per_step() const { return static_cast<int64_t>(batch_size) * seq_len; }

    int64_t steps() const {
        if (total_tokens <= 0 || batch_size < 1 || seq_len < 2)
            throw ArgError("train plan: need total_tokens > 0, batch_size >= 1, seq_len >= 2");
        if (total_tokens % tokens_per_step() != 0)
            throw ArgError("train plan: total_tokens (" + std::to_string(total_tokens) +
                           ") not divisible by batch_size*seq_len (" + std::to_string(tokens_per_step()) + ")");
        return total_tokens / tokens_per_step();
    }

    void validate() const {
        (void)steps();
        if (lambda_start < 0.0f || lambda_start > 1.0f || lambda_end < 0.0f || lambda_end > 1.0f)
            throw ArgError("train plan: lambda must stay in [0,1]");
        if (beta_start < 0.0f || beta_end < 0.0f) throw ArgError("train plan: beta must be >= 0");
        if (lr_peak <= 0.0f || lr_min < 0.0f || warmup_steps < 0) throw ArgError("train plan: bad LR spec");
    }
};

struct Schedules {
    float lr, lambda, beta;
};

// lr: linear warmup 0 -> peak, then cosine to lr_min; lambda: linear over the
// full run; beta: cosine over the full run.
inline Schedules schedules(int64_t step, int64_t total_steps, const TrainPlan& plan) {
    if (step < 0 || step > total_steps) throw ArgError("schedules: step outside [0, total]");
    Schedules s{};
    const double t = total_steps > 0 ? static_cast<double>(step) / static_cast<double>(total_steps) : 1.0;
    s.lambda = static_cast<float>(plan.lambda_start + (plan.lambda_end - plan.lambda_start) * t);
    s.beta = static_cast<float>(plan.beta_end +
                                (plan.beta_start - plan.beta_end) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t)));
    const int64_t w = std::min<int64_t>(plan.warmup_steps, total_steps);
    if (step < w) {
        s.lr = plan.lr_peak * static_cast<float>(step) / static_cast<float>(w);
    } else if (total_steps == w) {
        s.lr = plan.lr_peak;
    } else {
        const double p = static_cast<double>(step - w) / static_cast<double>(total_steps - w);
        s.lr = static_cast<float>(plan.lr_min + (plan.lr_peak - plan.lr_min) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * p)));
    }
    return s;
}

// Mean next-token cross-entropy; caller aligns the shift.
inline Tensor lm_loss(Tensor logits, const std::vector<int>& targets, Tape* tape) {
    return cross_entropy_rows(logits, targets, tape);
}

struct KdLoss {
    Tensor loss;        // soft-target cross-entropy (the training term)
    float kl = 0.0f;    // CE - H(q), for monitoring
};

// Distillation against detached teacher logits.
inline KdLoss kd_loss(Tensor student_logits, Tensor teacher_logits, Tape* tape) {
    if (student_logits.shape() != teacher_logits.shape())
        throw DimError("kd_loss: student " + shape_str(student_logits.shape()) + " vs teacher " +
                       shape_str(teacher_logits.shape()));
    Tensor q = softmax_rows(teacher_logits, nullptr);
    KdLoss out;
    out.loss = soft_cross_entropy_rows(student_logits, q, tape);
    out.kl = out.loss.item() - entropy_rows(q);
    return out;
}

struct MtpLosses {
    Tensor lm;       // defined when any depth contributed
    Tensor kd;
    float kd_kl = 0.0f;
    int depths_used = 0;
};

// Per-depth position means, averaged over the depths that have in-corpus
// targets. Depth-k logits at stream position i predict t_{i+k+1}; teacher soft
// targets are the backbone's next-token distribution at position i+k.
inline MtpLosses mtp_losses(const std::vector<Tensor>& student_mtp_logits, const std::vector<int>& tokens,
                            Tensor teacher_logits, bool want_lm, bool want_kd, Tape* tape) {
    const int T = static_cast<int>(tokens.size());
    MtpLosses out;
    Tensor q_all;
    if (want_kd) q_all = softmax_rows(teacher_logits, nullptr);
    std::vector<Tensor> lm_terms, kd_terms;
    std::vector<float> kls;
    for (size_t d = 0; d < student_mtp_logits.size(); ++d) {
        const int k = static_cast<int>(d) + 1;
        const int n_pos = T - k - 1;  // positions with targets inside the sequence
        if (n_pos < 1) continue;      // depth skipped, excluded from the average
        Tensor lg = row_slice(student_mtp_logits[d], 0, n_pos, tape);
        if (want_lm) {
            std::vector<int> targets(tokens.begin() + k + 1, tokens.end());
            lm_terms.push_back(cross_entropy_rows(lg, targets, tape));
        }
        if (want_kd) {
            std::vector<int> q_rows;
            for (int i = 0; i < n_pos; ++i) q_rows.push_back(i + k);
            Tensor q = gather_rows(q_all, q_rows, nullptr);
            Tensor ce = soft_cross_entropy_rows(lg, q, tape);
            kls.push_back(ce.item() - entropy_rows(q));
            kd_terms.push_back(ce);
        }
        ++out.depths_used;
    }
    auto average = [&](std::vector<Tensor>& terms) {
        Tensor acc = terms[0];
        for (size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i], tape);
        return scale(acc, 1.0f / static_cast<float>(terms.size()), tape);
    };
    if (!lm_terms.empty()) out.lm = average(lm_terms);
    if (!kd_terms.empty()) {
        out.kd = average(kd_terms);
        float s = 0.0f;
        for (float v : kls) s += v;
        out.kd_kl = s / static_cast<float>(kls.size());
    }
    return out;
}

// L = (1-lambda) L_LM + lambda L_KD + beta ((1-lambda) L_MTP-LM + lambda L_MTP-KD).
// Disabled flags contribute nothing; undefined tensors are treated as absent.
inline Tensor total_loss(Tensor lm, Tensor kd, Tensor mtp_lm, Tensor mtp_kd, float lambda, float beta,
                         const LossFlags& flags, Tape* tape) {
    if (lambda < 0.0f || lambda > 1.0f) throw ArgError("total_loss: lambda outside [0,1]");
    if (beta < 0.0f) throw ArgError("total_loss: beta must be >= 0");
    Tensor total;
    auto accumulate = [&](Tensor term, float w) {
        if (!term.defined()) return;
        Tensor scaled = scale(term, w, tape);
        total = total.defined() ? add(total, scaled, tape) : scaled;
    };
    accumulate(flags.use_lm ? lm : Tensor(), 1.0f - lambda);
    accumulate(flags.use_ntp_kd ? kd : Tensor(), lambda);
    accumulate(flags.use_mtp_lm ? mtp_lm : Tensor(), beta * (1.0f - lambda));
    accumulate(flags.use_mtp_kd ? mtp_kd : Tensor(), beta * lambda);
    if (!total.defined()) throw ArgError("total_loss: every term disabled or missing");
    return total;
}

// Switch-style auxiliary balance loss over a batch of traces:
// N * sum_i f_i P_i with f_i the fraction of routed assignments and P_i the
// mean full-softmax router probability; uniform routing gives exactly 1.
// Averaged over MoE layers; gradient flows through P only.
inline Tensor load_balance_loss(const std::vector<const ForwardTrace*>& traces, int n_experts, int top_k,
                                Tape* tape) {
    if (traces.empty() || traces[0]->routing.empty()) throw ArgError("load_balance_loss: no routing records");
    const size_t L = traces[0]->routing.size();
    int64_t total_tokens = 0;
    for (const auto* tr : traces) {
        if (tr->routing.size() != L) throw ArgError("load_balance_loss: ragged traces");
        total_tokens += tr->routing[0].logits.dim(0);
    }
    Tensor lb;
    for (size_t l = 0; l < L; ++l) {
        // f: assignment fractions over the whole batch (constants).
        std::vector<double> counts(static_cast<size_t>(n_experts), 0.0);
        for (const auto* tr : traces)
            for (int idx : tr->routing[l].indices) counts[static_cast<size_t>(idx)] += 1.0;
        Tensor f = Tensor::zeros({n_experts, 1});
        const double total_assign = static_cast<double>(total_tokens) * top_k;
        for (int e = 0; e < n_experts; ++e)
            f.at(e, 0) = static_cast<float>(counts[static_cast<size_t>(e)] / total_assign);
        // P: token-mean router probabilities, graph-connected.
        Tensor p_mean;
        for (const auto* tr : traces) {
            const Tensor& logits = tr->routing[l].logits;
            const int n = logits.dim(0);
            Tensor ones = Tensor::full({1, n}, 1.0f / static_cast<float>(total_tokens));
            Tensor part = matmul(ones, softmax_rows(logits, tape), tape);  // [1 x N]
            p_mean = p_mean.defined() ? add(p_mean, part, tape) : part;
        }
        Tensor term = scale(matmul(p_mean, f, tape), static_cast<float>(n_experts), tape);
        lb = lb.defined() ? add(lb, term, tape) : term;
    }
    // collapse [1x1] to a scalar so it can join the loss sum
    return sum_all(scale(lb, 1.0f / static_cast<float>(L), tape), tape);
}

// ---- AdamW ----------------------------------------------------------------

struct AdamW {
    OptimizerMoments moments;
    int64_t step_count = 0;

    void reset() {
        moments.clear();
        step_count = 0;
    }

    // Global-norm clip then decoupled-weight-decay Adam update.
    void apply(const std::vector<NamedParam>& params, const TrainPlan& plan, float lr) {
        double sq = 0.0;
        for (const auto& p : params)
            for (float g : p.tensor.grad()) sq += static_cast<double>(g) * g;
        const double norm = std::sqrt(sq);
        const float clip =
            plan.grad_clip > 0.0f && norm > plan.grad_clip ? static_cast<float>(plan.grad_clip / norm) : 1.0f;

        ++step_count;
        const double bc1 = 1.0 - std::pow(static_cast<double>(plan.adam_beta1), static_cast<double>(step_count));
        const double bc2 = 1.0 - std::pow(static_cast<double>(plan.adam_beta2), static_cast<double>(step_count));
        for (const auto& p : params) {
            auto& pm = moments[p.name];
            if (pm.m.empty()) {
                pm.m.assign(p.tensor.numel(), 0.0f);
                pm.v.assign(p.tensor.numel(), 0.0f);
            }
            if (pm.m.size() != p.tensor.numel())
                throw EvalError("optimizer: stale moment shape for " + p.name);
            auto& w = const_cast<Tensor&>(p.tensor).values();
            const auto& g = p.tensor.grad();
            for (size_t i = 0; i < w.size(); ++i) {
                const float gi = g[i] * clip;
                pm.m[i] = plan.adam_beta1 * pm.m[i] + (1.0f - plan.adam_beta1) * gi;
                pm.v[i] = plan.adam_beta2 * pm.v[i] + (1.0f - plan.adam_beta2) * gi * gi;
                const float mhat = pm.m[i] / static_cast<float>(bc1);
                const float vhat = pm.v[i] / static_cast<float>(bc2);
                w[i] -= lr * (mhat / (std::sqrt(vhat) + plan.adam_eps) + plan.weight_decay * w[i]);
            }
        }
    }

    // Drop moment buffers whose parameter no longer exists (after surgery the
    // rewriter has already renamed/sliced the surviving ones).
    void prune_to(const std::vector<NamedParam>& params) {
        std::map<std::string, bool> live;
        for (const auto& p : params) live[p.name] = true;
        for (auto it = moments.begin(); it != moments.end();)
            it = live.count(it->first) ? std::next(it) : moments.erase(it);
    }
};

// ---- train step + driver ---------------------------------------------------

struct StepMetrics {
    int64_t step = 0;
    float lr = 0.0f, lambda = 0.0f, beta = 0.0f;
    float loss_total = 0.0f, loss_lm = 0.0f, loss_kd = 0.0f;
    float loss_mtp_lm = 0.0f, loss_mtp_kd = 0.0f, loss_lb = 0.0f;
    float kd_kl = 0.0f, mtp_kd_kl = 0.0f;
    int64_t tokens_seen = 0;
};

using MetricsSink = std::function<void(const StepMetrics&)>;

namespace detail {

inline void check_component(const Tensor& t, const char* name) {
    if (t.defined() && !t.all_finite())
        throw EvalError(std::string("non-finite loss component: ") + name);
}

}  // namespace detail

// Builds the full distillation objective graph for one batch and fills the
// per-component metrics. Exposed separately from train_step so gradient checks
// can drive the identical loss path.
inline Tensor build_objective(const HybridModel& student, const HybridModel& teacher,
                              const std::vector<std::vector<int>>& batch, const TrainPlan& plan,
                              float lambda, float beta, Tape* tape, StepMetrics* mt) {
    if (batch.empty()) throw ArgError("train_step: empty batch");
    const bool need_teacher = plan.loss_flags.use_ntp_kd || plan.loss_flags.use_mtp_kd;
    const bool need_mtp = (plan.loss_flags.use_mtp_lm || plan.loss_flags.use_mtp_kd) && !student.mtp.empty();
    if (need_teacher && teacher.config.vocab_size != student.config.vocab_size)
        throw ArgError("train_step: teacher/student vocab mismatch");

    const float inv_b = 1.0f / static_cast<float>(batch.size());
    Tensor lm_acc, kd_acc, mtp_lm_acc, mtp_kd_acc;
    float kd_kl = 0.0f, mtp_kl = 0.0f;
    std::vector<ForwardTrace> traces(batch.size());
    std::vector<const ForwardTrace*> trace_ptrs;

    auto accumulate = [&](Tensor& acc, Tensor term) {
        term = scale(term, inv_b, tape);
        acc = acc.defined() ? add(acc, term, tape) : term;
    };

    for (size_t s = 0; s < batch.size(); ++s) {
        const auto& seq = batch[s];
        if (static_cast<int>(seq.size()) < 2) throw ArgError("train_step: sequence shorter than 2");
        const int T = static_cast<int>(seq.size());
        ForwardTrace& tr = traces[s];
        Tensor logits = backbone_forward(seq, student, tape, &tr);
        trace_ptrs.push_back(&tr);

        Tensor teacher_logits;
        if (need_teacher) teacher_logits = backbone_forward(seq, teacher, nullptr, nullptr);

        Tensor next = row_slice(logits, 0, T - 1, tape);
        std::vector<int> targets(seq.begin() + 1, seq.end());
        if (plan.loss_flags.use_lm) accumulate(lm_acc, lm_loss(next, targets, tape));
        if (plan.loss_flags.use_ntp_kd) {
            KdLoss kl = kd_loss(next, row_slice(teacher_logits, 0, T - 1, nullptr), tape);
            accumulate(kd_acc, kl.loss);
            kd_kl += kl.kl * inv_b;
        }
        if (need_mtp) {
            auto mtp_logits = mtp_forward(student, tr.final_hidden, seq, tape, &tr);
            MtpLosses ml = mtp_losses(mtp_logits, seq, teacher_logits, plan.loss_flags.use_mtp_lm,
                                      plan.loss_flags.use_mtp_kd, tape);
            if (ml.lm.defined()) accumulate(mtp_lm_acc, ml.lm);
            if (ml.kd.defined()) {
                accumulate(mtp_kd_acc, ml.kd);
                mtp_kl += ml.kd_kl * inv_b;
            }
        }
    }

    detail::check_component(lm_acc, "loss_lm");
    detail::check_component(kd_acc, "loss_kd");
    detail::check_component(mtp_lm_acc, "loss_mtp_lm");
    detail::check_component(mtp_kd_acc, "loss_mtp_kd");

    Tensor total =
        total_loss(lm_acc, kd_acc, mtp_lm_acc, mtp_kd_acc, lambda, beta, plan.loss_flags, tape);
    Tensor lb;
    if (plan.lb_weight != 0.0f) {
        lb = load_balance_loss(trace_ptrs, student.config.n_experts, student.config.top_k, tape);
        detail::check_component(lb, "loss_lb");
        total = add(total, scale(lb, plan.lb_weight, tape), tape);
    }
    if (!total.all_finite()) throw EvalError("non-finite total loss");

    if (mt) {
        mt->lambda = lambda;
        mt->beta = beta;
        mt->loss_total = total.item();
        mt->loss_lm = lm_acc.defined() ? lm_acc.item() : 0.0f;
        mt->loss_kd = kd_acc.defined() ? kd_acc.item() : 0.0f;
        mt->loss_mtp_lm = mtp_lm_acc.defined() ? mtp_lm_acc.item() : 0.0f;
        mt->loss_mtp_kd = mtp_kd_acc.defined() ? mtp_kd_acc.item() : 0.0f;
        mt->loss_lb = lb.defined() ? lb.item() : 0.0f;
        mt->kd_kl = kd_kl;
        mt->mtp_kd_kl = mtp_kl;
    }
    return total;
}

// One optimization step of distillation: forward teacher (frozen) and student
// over every sequence in the batch, combine the enabled losses under the
// scheduled lambda/beta, add the balance term, backprop, AdamW update.
inline StepMetrics train_step(HybridModel& student, const HybridModel& teacher,
                              const std::vector<std::vector<int>>& batch, const TrainPlan& plan,
                              const Schedules& sched, AdamW& opt) {
    Tape tape;
    StepMetrics mt;
    Tensor total = build_objective(student, teacher, batch, plan, sched.lambda, sched.beta, &tape, &mt);
    mt.lr = sched.lr;
    student.zero_grad();
    backward(total, tape);
    opt.apply(student.parameters(), plan, sched.lr);
    return mt;
}

// Deterministic batch sampling: every sequence is a random window of the
// token stream drawn from the "data" sub-stream.
struct BatchSampler {
    const std::vector<int>* tokens = nullptr;
    int seq_len = 0;
    Rng rng{0};

    BatchSampler(const std::vector<int>& toks, int seq, uint64_t seed)
        : tokens(&toks), seq_len(seq), rng(seed, "data") {
        if (static_cast<int>(toks.size()) <= seq) throw ArgError("corpus shorter than seq_len");
    }

    std::vector<std::vector<int>> next(int batch_size) {
        std::vector<std::vector<int>> out;
        for (int b = 0; b < batch_size; ++b) {
            const uint64_t start = rng.next_below(tokens->size() - static_cast<size_t>(seq_len));
            out.emplace_back(tokens->begin() + static_cast<int64_t>(start),
                             tokens->begin() + static_cast<int64_t>(start) + seq_len);
        }
        return out;
    }
};

// Runs `n_steps` steps starting at global step index `step0` under a schedule
// spanning `total_steps` (LR continuity across stages falls out of this).
inline void run_distill(HybridModel& student, const HybridModel& teacher, BatchSampler& sampler,
                        const TrainPlan& plan, AdamW& opt, int64_t step0, int64_t n_steps,
                        int64_t total_steps, const MetricsSink& sink) {
    for (int64_t s = 0; s < n_steps; ++s) {
        const int64_t step = step0 + s;
        Schedules sched = schedules(step, total_steps, plan);
        auto batch = sampler.next(plan.batch_size);
        StepMetrics mt = train_step(student, teacher, batch, plan, sched, opt);
        mt.step = step;
        mt.tokens_seen = (step + 1) * plan.tokens_per_step();
        if (sink) sink(mt);
    }
}

// ---- progressive pipelines --------------------------------------------------

enum class ScheduleMode { OneStage, DepthFirst, WidthFirst, Joint, DepthFirst3, WidthFirst3 };

inline ScheduleMode parse_schedule_mode(const std::string& s) {
    if (s == "one_stage") return ScheduleMode::OneStage;
    if (s == "depth_first") return ScheduleMode::DepthFirst;
    if (s == "width_first") return ScheduleMode::WidthFirst;
    if (s == "joint") return ScheduleMode::Joint;
    if (s == "depth_first_3") return ScheduleMode::DepthFirst3;
    if (s == "width_first_3") return ScheduleMode::WidthFirst3;
    throw ArgError("unknown schedule mode '" + s + "'");
}

inline std::string schedule_mode_name(ScheduleMode m) {
    switch (m) {
        case ScheduleMode::OneStage: return "one_stage";
        case ScheduleMode::DepthFirst: return "depth_first";
        case ScheduleMode::WidthFirst: return "width_first";
        case ScheduleMode::Joint: return "joint";
        case ScheduleMode::DepthFirst3: return "depth_first_3";
        default: return "width_first_3";
    }
}

struct StageSpec {
    CompressionPlan plan;  // may be empty: train without further surgery
    bool has_plan = false;
    double token_fraction = 0.0;
};

// Derive the per-stage compression deltas for a mode. Halves round down;
// expert reduction happens entirely in the final stage.
inline std::vector<StageSpec> stage_specs(const ModelConfig& base, const CompressionPlan& target,
                                          ScheduleMode mode, const std::vector<double>* fractions) {
    target.validate(base);
    const int dl = target.depth ? target.depth->n_layers : 0;
    const DepthPruneMode dmode = target.depth ? target.depth->mode : DepthPruneMode::LastN;
    const int d0 = base.d_model;
    const int dt = target.width ? target.width->target_d : d0;
    const int dw = d0 - dt;

    auto depth_spec = [&](int n) { return DepthSpec{dmode, n}; };
    auto width_to = [&](int d) { return WidthSpec{d, target.width ? target.width->reinit_mtp : false}; };

    std::vector<StageSpec> stages;
    auto push = [&](std::optional<DepthSpec> dep, std::optional<WidthSpec> wid, bool experts, double frac) {
        StageSpec st;
        st.token_fraction = frac;
        if (dep && dep->n_layers > 0) {
            st.plan.depth = dep;
            st.has_plan = true;
        }
        if (wid) {
            st.plan.width = wid;
            st.has_plan = true;
        }
        if (experts && target.experts) {
            st.plan.experts = target.experts;
            st.has_plan = true;
        }
        stages.push_back(std::move(st));
    };

    std::vector<double> frac;
    switch (mode) {
        case ScheduleMode::OneStage:
            frac = {1.0};
            push(target.depth ? std::optional<DepthSpec>(depth_spec(dl)) : std::nullopt,
                 target.width ? std::optional<WidthSpec>(width_to(dt)) : std::nullopt, true, frac[0]);
            break;
        case ScheduleMode::DepthFirst:
            frac = {0.1, 0.9};
            push(depth_spec(dl / 2), std::nullopt, false, frac[0]);
            push(depth_spec(dl - dl / 2), target.width ? std::optional<WidthSpec>(width_to(dt)) : std::nullopt,
                 true, frac[1]);
            break;
        case ScheduleMode::WidthFirst:
            frac = {0.1, 0.9};
            push(std::nullopt, dw > 0 ? std::optional<WidthSpec>(width_to(d0 - dw / 2)) : std::nullopt, false,
                 frac[0]);
            push(target.depth ? std::optional<DepthSpec>(depth_spec(dl)) : std::nullopt,
                 target.width ? std::optional<WidthSpec>(width_to(dt)) : std::nullopt, true, frac[1]);
            break;
        case ScheduleMode::Joint:
            frac = {0.1, 0.9};
            push(depth_spec(dl / 2), dw > 0 ? std::optional<WidthSpec>(width_to(d0 - dw / 2)) : std::nullopt,
                 false, frac[0]);
            push(depth_spec(dl - dl / 2),
                 target.width ? std::optional<WidthSpec>(width_to(dt)) : std::nullopt, true, frac[1]);
            break;
        case ScheduleMode::DepthFirst3:
            frac = {0.05, 0.05, 0.9};
            push(depth_spec(dl / 2), std::nullopt, false, frac[0]);
            push(depth_spec(dl - dl / 2), std::nullopt, false, frac[1]);
            push(std::nullopt, target.width ? std::optional<WidthSpec>(width_to(dt)) : std::nullopt, true,
                 frac[2]);
            break;
        case ScheduleMode::WidthFirst3:
            frac = {0.05, 0.05, 0.9};
            push(std::nullopt, dw > 0 ? std::optional<WidthSpec>(width_to(d0 - dw / 2)) : std::nullopt, false,
                 frac[0]);
            push(std::nullopt, target.width ? std::optional<WidthSpec>(width_to(dt)) : std::nullopt, false,
                 frac[1]);
            push(target.depth ? std::optional<DepthSpec>(depth_spec(dl)) : std::nullopt, std::nullopt, true,
                 frac[2]);
            break;
    }
    if (fractions) {
        if (fractions->size() != stages.size())
            throw ArgError("stage token fractions do not match the stage count");
        for (size_t i = 0; i < stages.size(); ++i) stages[i].token_fraction = (*fractions)[i];
    }
    double total = 0.0;
    for (const auto& st : stages) total += st.token_fraction;
    if (std::abs(total - 1.0) > 1e-9) throw ArgError("stage token fractions must sum to 1");
    return stages;
}

struct StageReport {
    ModelConfig arch;
    int64_t tokens = 0;
    int64_t start_step = 0;
    int64_t end_step = 0;  // exclusive
    PruneReport prune;
    bool pruned = false;
};

struct ProgressiveResult {
    HybridModel student;
    std::vector<StageReport> stages;
};

struct ProgressiveOptions {
    bool reset_moments = false;                 // reset optimizer state at stage boundaries
    std::vector<double> token_fractions;        // override per-mode defaults when non-empty
    std::vector<std::vector<int>> calib_batches;  // calibration corpus (required when compressing)
};

// Staged compress+distill under one global LR/lambda/beta schedule. Stage
// boundaries re-calibrate on the current model, apply the stage's plan delta
// (carrying sliced optimizer moments unless reset), and keep training.
inline ProgressiveResult run_progressive(const HybridModel& teacher, const CompressionPlan& target,
                                         ScheduleMode mode, const TrainPlan& plan,
                                         const std::vector<int>& corpus, const ProgressiveOptions& opts,
                                         const MetricsSink& sink) {
    plan.validate();
    auto stages = stage_specs(teacher.config, target, mode,
                              opts.token_fractions.empty() ? nullptr : &opts.token_fractions);
    const int64_t total_steps = plan.steps();

    // Preflight: every intermediate architecture must be feasible before any
    // training happens.
    {
        ModelConfig cfg = teacher.config;
        for (const auto& st : stages) {
            if (!st.has_plan) continue;
            st.plan.validate(cfg);
            if (st.plan.depth) cfg.n_layers -= st.plan.depth->n_layers;
            if (st.plan.width) cfg.d_model = st.plan.width->target_d;
            if (st.plan.experts) {
                cfg.n_experts = st.plan.experts->target_n;
                cfg.top_k = st.plan.experts->target_top_k;
            }
        }
    }

    // Integer step split: earlier stages take floor, the last absorbs the rest.
    std::vector<int64_t> stage_steps(stages.size());
    int64_t used = 0;
    for (size_t i = 0; i + 1 < stages.size(); ++i) {
        stage_steps[i] = static_cast<int64_t>(static_cast<double>(total_steps) * stages[i].token_fraction);
        used += stage_steps[i];
    }
    stage_steps.back() = total_steps - used;

    ProgressiveResult res;
    res.student = teacher.clone();
    AdamW opt;
    BatchSampler sampler(corpus, plan.seq_len, plan.seed);
    int64_t step_cursor = 0;
    for (size_t i = 0; i < stages.size(); ++i) {
        StageReport sr;
        sr.start_step = step_cursor;
        if (stages[i].has_plan) {
            if (opts.calib_batches.empty())
                throw ArgError("run_progressive: compression stages need calibration batches");
            CalibrationReport cal = collect(res.student, opts.calib_batches);
            auto [next, prune] =
                apply_plan(res.student, cal, stages[i].plan, opts.reset_moments ? nullptr : &opt.moments);
            res.student = std::move(next);
            sr.prune = std::move(prune);
            sr.pruned = true;
            if (opts.reset_moments) opt.reset();
            opt.prune_to(res.student.parameters());
        }
        run_distill(res.student, teacher, sampler, plan, opt, step_cursor, stage_steps[i], total_steps, sink);
        step_cursor += stage_steps[i];
        sr.end_step = step_cursor;
        sr.tokens = stage_steps[i] * plan.tokens_per_step();
        sr.arch = res.student.config;
        res.stages.push_back(std::move(sr));
    }
    return res;
}

// ---- evaluation helpers ------------------------------------------------------

struct EvalResult {
    float loss = 0.0f;       // mean next-token cross-entropy
    float perplexity = 0.0f;
    float accuracy = 0.0f;   // greedy next-token hit rate
    int64_t positions = 0;
};

// Sequential non-overlapping windows over the corpus; deterministic.
inline EvalResult evaluate(const HybridModel& m, const std::vector<int>& corpus, int seq_len,
                           int max_windows) {
    if (static_cast<int>(corpus.size()) <= seq_len) throw ArgError("evaluate: corpus shorter than seq_len");
    EvalResult out;
    double loss_sum = 0.0;
    int64_t hits = 0;
    int windows = 0;
    for (size_t start = 0; start + static_cast<size_t>(seq_len) < corpus.size() && windows < max_windows;
         start += static_cast<size_t>(seq_len), ++windows) {
        std::vector<int> seq(corpus.begin() + static_cast<int64_t>(start),
                             corpus.begin() + static_cast<int64_t>(start) + seq_len + 1);
        std::vector<int> inputs(seq.begin(), seq.end() - 1);
        Tensor logits = backbone_forward(inputs, m, nullptr, nullptr);
        for (int i = 0; i < seq_len; ++i) {
            const int target = seq[static_cast<size_t>(i) + 1];
            // log-softmax at position i
            float mx = logits.at(i, 0);
            for (int v = 1; v < logits.dim(1); ++v) mx = std::max(mx, logits.at(i, v));
            double sum = 0.0;
            for (int v = 0; v < logits.dim(1); ++v) sum += std::exp(static_cast<double>(logits.at(i, v)) - mx);
            loss_sum += mx + std::log(sum) - logits.at(i, target);
            if (argmax_row(logits, i) == target) ++hits;
            ++out.positions;
        }
    }
    if (out.positions == 0) throw ArgError("evaluate: no positions evaluated");
    out.loss = static_cast<float>(loss_sum / static_cast<double>(out.positions));
    out.perplexity = std::exp(out.loss);
    out.accuracy = static_cast<float>(static_cast<double>(hits) / static_cast<double>(out.positions));
    return out;
}

}  // namespace moelab
