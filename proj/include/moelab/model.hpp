// SPDX-License-Identifier: Apache-2.0
//
// Hybrid MoE transformer: interleaved gated-deltanet / gated-attention blocks,
// routed experts with a shared expert, RMSNorm everywhere, and MTP modules that
// share the embedding and output head with the backbone.

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "moelab/tensor.hpp"

namespace moelab {

enum class LayerKind : uint8_t { Linear, Full };

inline char layer_kind_char(LayerKind k) { return k == LayerKind::Linear ? 'L' : 'F'; }

inline std::vector<LayerKind> parse_layer_pattern(const std::string& s) {
    std::vector<LayerKind> out;
    for (char c : s) {
        if (c == 'L' || c == 'l')
            out.push_back(LayerKind::Linear);
        else if (c == 'F' || c == 'f')
            out.push_back(LayerKind::Full);
        else
            throw ArgError(std::string("layer pattern char '") + c + "' (want L or F)");
    }
    if (out.empty()) throw ArgError("empty layer pattern");
    return out;
}

struct ModelConfig {
    int d_model = 64;
    int n_layers = 8;
    std::vector<LayerKind> layer_pattern = {LayerKind::Linear, LayerKind::Linear, LayerKind::Linear,
                                            LayerKind::Full};
    // full attention
    int n_q_heads = 4;
    int n_kv_heads = 2;
    int d_head = 16;
    // linear attention
    int d_k = 16;
    int d_v = 16;
    int n_qk_heads = 2;
    int n_v_heads = 4;
    int d_conv = 4;
    // MoE
    int n_experts = 16;
    int n_shared = 1;
    int top_k = 4;
    int d_ff = 128;
    // embedding / heads
    int vocab_size = 256;
    int n_mtp_depths = 1;
    float rms_eps = 1e-6f;
    uint64_t seed = 0;
    float rope_base = 10000.0f;

    LayerKind kind(int layer) const { return layer_pattern[static_cast<size_t>(layer) % layer_pattern.size()]; }

    std::string pattern_string() const {
        std::string s;
        for (auto k : layer_pattern) s += layer_kind_char(k);
        return s;
    }

    void validate() const {
        if (d_model < 1 || n_layers < 0 || vocab_size < 2) throw ArgError("config: bad core sizes");
        if (n_q_heads < 1 || n_kv_heads < 1 || n_q_heads % n_kv_heads != 0)
            throw ArgError("config: n_q_heads must be a positive multiple of n_kv_heads");
        if (d_head < 2 || d_head % 2 != 0) throw ArgError("config: d_head must be even (rotary pairs)");
        if (n_qk_heads < 1 || n_v_heads < 1 || n_v_heads % n_qk_heads != 0)
            throw ArgError("config: n_v_heads must be a positive multiple of n_qk_heads");
        if (d_k < 1 || d_v < 1 || d_conv < 1) throw ArgError("config: bad linear-attention dims");
        if (top_k < 1 || top_k > n_experts) throw ArgError("config: need 1 <= top_k <= n_experts");
        if (n_shared < 0 || d_ff < 1) throw ArgError("config: bad MoE sizes");
        if (n_mtp_depths < 0) throw ArgError("config: n_mtp_depths must be >= 0");
        if (rms_eps <= 0.0f) throw ArgError("config: rms_eps must be > 0");
        if (layer_pattern.empty()) throw ArgError("config: empty layer pattern");
    }
};

struct AttentionParams {
    Tensor wq, wk, wv, wo, wgate;
};

struct DeltaNetParams {
    Tensor wq, wk, wv, wout, walpha, wbeta, conv_q, conv_k, conv_v;
};

struct ExpertParams {
    Tensor w1, w2, w3;  // SwiGLU: (silu(x W1) ⊙ (x W2)) W3
};

struct MoeParams {
    Tensor router;       // [d × n_experts]
    Tensor shared_gate;  // [d × n_shared]
    std::vector<ExpertParams> experts;
    std::vector<ExpertParams> shared;
};

struct LayerParams {
    LayerKind kind = LayerKind::Linear;
    Tensor norm1, norm2;  // gammas
    AttentionParams attn;
    DeltaNetParams delta;
    MoeParams moe;
};

struct MtpParams {
    Tensor proj;            // [2d × d]
    Tensor norm_h, norm_e;  // combine-side gammas
    LayerParams block;      // one full-attention + MoE transformer block
};

struct NamedParam {
    std::string name;
    Tensor tensor;
};

// Per-MoE-layer routing observations for one forward pass.
struct RoutingRecord {
    Tensor logits;                       // [n × N]; tape-connected when training
    int top_k = 0;
    std::vector<int> indices;            // n*top_k, per-row descending logit order
    std::vector<float> weights;          // n*top_k normalized gate weights (as used)
    std::vector<float> expert_out_norm;  // n*top_k L2 norms of selected expert outputs
    bool want_expert_outputs = false;
    std::vector<float> expert_outputs;   // n*top_k*d raw selected-expert outputs when requested
};

struct ForwardTrace {
    bool capture_activations = false;     // keep raw norm/block outputs (calibration)
    bool capture_expert_outputs = false;  // keep raw selected-expert outputs (calibration)
    std::vector<Tensor> norm_outputs;     // 2L+1 RMSNorm outputs in forward order
    std::vector<Tensor> block_outputs;    // residual stream after each block
    std::vector<RoutingRecord> routing;   // one per backbone MoE layer
    Tensor final_hidden;                  // h^0 (post final norm)
    std::vector<Tensor> mtp_hidden;       // h^k streams per depth
    std::vector<RoutingRecord> mtp_routing;  // one per MTP depth that ran
};

class HybridModel {
public:
    ModelConfig config;
    Tensor embed;       // [V × d]
    Tensor head;        // [d × V], shared with MTP
    Tensor final_norm;  // [d]
    std::vector<LayerParams> layers;
    std::vector<MtpParams> mtp;

    static HybridModel init(const ModelConfig& cfg) {
        cfg.validate();
        HybridModel m;
        m.config = cfg;
        // Explicit per-layer pattern so structural edits stay expressible.
        m.config.layer_pattern.clear();
        for (int i = 0; i < cfg.n_layers; ++i) m.config.layer_pattern.push_back(cfg.kind(i));
        if (m.config.layer_pattern.empty()) m.config.layer_pattern.push_back(LayerKind::Full);

        m.embed = m.make_param("embed.weight", {cfg.vocab_size, cfg.d_model}, 0.02f);
        m.head = m.make_param("head.weight", {cfg.d_model, cfg.vocab_size}, 0.02f);
        m.final_norm = m.make_gamma("final_norm.gamma", cfg.d_model);
        for (int i = 0; i < cfg.n_layers; ++i)
            m.layers.push_back(m.make_layer("layers." + std::to_string(i), m.config.kind(i)));
        for (int k = 0; k < cfg.n_mtp_depths; ++k) {
            MtpParams mp;
            const std::string p = "mtp." + std::to_string(k);
            mp.proj = m.make_param(p + ".proj", {2 * cfg.d_model, cfg.d_model}, 0.02f);
            mp.norm_h = m.make_gamma(p + ".norm_h.gamma", cfg.d_model);
            mp.norm_e = m.make_gamma(p + ".norm_e.gamma", cfg.d_model);
            mp.block = m.make_layer(p + ".block", LayerKind::Full);
            m.mtp.push_back(std::move(mp));
        }
        return m;
    }

    // Stable enumeration; checkpointing, optimizer state and gradient walks
    // all key off these names.
    std::vector<NamedParam> parameters() const {
        std::vector<NamedParam> out;
        out.push_back({"embed.weight", embed});
        out.push_back({"head.weight", head});
        out.push_back({"final_norm.gamma", final_norm});
        for (size_t i = 0; i < layers.size(); ++i)
            collect_layer("layers." + std::to_string(i), layers[i], out);
        for (size_t k = 0; k < mtp.size(); ++k) {
            const std::string p = "mtp." + std::to_string(k);
            out.push_back({p + ".proj", mtp[k].proj});
            out.push_back({p + ".norm_h.gamma", mtp[k].norm_h});
            out.push_back({p + ".norm_e.gamma", mtp[k].norm_e});
            collect_layer(p + ".block", mtp[k].block, out);
        }
        return out;
    }

    size_t param_count() const {
        size_t n = 0;
        for (const auto& p : parameters()) n += p.tensor.numel();
        return n;
    }

    HybridModel clone() const {
        HybridModel m;
        m.config = config;
        m.embed = embed.clone();
        m.head = head.clone();
        m.final_norm = final_norm.clone();
        for (const auto& l : layers) m.layers.push_back(clone_layer(l));
        for (const auto& mp : mtp) {
            MtpParams c;
            c.proj = mp.proj.clone();
            c.norm_h = mp.norm_h.clone();
            c.norm_e = mp.norm_e.clone();
            c.block = clone_layer(mp.block);
            m.mtp.push_back(std::move(c));
        }
        return m;
    }

    void set_requires_grad(bool rg) {
        for (auto& p : parameters()) p.tensor.set_requires_grad(rg);
    }
    void zero_grad() {
        for (auto& p : parameters()) p.tensor.zero_grad();
    }

    LayerParams make_layer(const std::string& prefix, LayerKind kind) const {
        const auto& c = config;
        LayerParams l;
        l.kind = kind;
        l.norm1 = make_gamma(prefix + ".norm1.gamma", c.d_model);
        l.norm2 = make_gamma(prefix + ".norm2.gamma", c.d_model);
        const float out_std = 0.02f / std::sqrt(2.0f * std::max(1, c.n_layers));
        if (kind == LayerKind::Full) {
            l.attn.wq = make_param(prefix + ".attn.wq", {c.d_model, c.n_q_heads * c.d_head}, 0.02f);
            l.attn.wk = make_param(prefix + ".attn.wk", {c.d_model, c.n_kv_heads * c.d_head}, 0.02f);
            l.attn.wv = make_param(prefix + ".attn.wv", {c.d_model, c.n_kv_heads * c.d_head}, 0.02f);
            l.attn.wo = make_param(prefix + ".attn.wo", {c.n_q_heads * c.d_head, c.d_model}, out_std);
            l.attn.wgate = make_param(prefix + ".attn.wgate", {c.d_model, c.n_q_heads}, 0.02f);
        } else {
            const int qk = c.n_qk_heads * c.d_k, vd = c.n_v_heads * c.d_v;
            l.delta.wq = make_param(prefix + ".delta.wq", {c.d_model, qk}, 0.02f);
            l.delta.wk = make_param(prefix + ".delta.wk", {c.d_model, qk}, 0.02f);
            l.delta.wv = make_param(prefix + ".delta.wv", {c.d_model, vd}, 0.02f);
            l.delta.wout = make_param(prefix + ".delta.wout", {vd, c.d_model}, out_std);
            l.delta.walpha = make_param(prefix + ".delta.walpha", {c.d_model, c.n_v_heads}, 0.02f);
            l.delta.wbeta = make_param(prefix + ".delta.wbeta", {c.d_model, c.n_v_heads}, 0.02f);
            l.delta.conv_q = make_param(prefix + ".delta.conv_q", {c.d_conv, qk}, 0.02f);
            l.delta.conv_k = make_param(prefix + ".delta.conv_k", {c.d_conv, qk}, 0.02f);
            l.delta.conv_v = make_param(prefix + ".delta.conv_v", {c.d_conv, vd}, 0.02f);
        }
        l.moe.router = make_param(prefix + ".moe.router", {c.d_model, c.n_experts}, 0.02f);
        if (c.n_shared > 0)
            l.moe.shared_gate = make_param(prefix + ".moe.shared_gate", {c.d_model, c.n_shared}, 0.02f);
        for (int e = 0; e < c.n_experts; ++e)
            l.moe.experts.push_back(make_expert(prefix + ".moe.experts." + std::to_string(e), out_std));
        for (int s = 0; s < c.n_shared; ++s)
            l.moe.shared.push_back(make_expert(prefix + ".moe.shared." + std::to_string(s), out_std));
        return l;
    }

private:
    Tensor make_param(const std::string& name, Shape shape, float stddev) const {
        Rng rng(config.seed, "init/" + name);
        Tensor t = Tensor::randn(std::move(shape), stddev, rng);
        t.set_name(name).set_requires_grad();
        return t;
    }
    Tensor make_gamma(const std::string& name, int d) const {
        Tensor t = Tensor::full({d}, 1.0f);
        t.set_name(name).set_requires_grad();
        return t;
    }
    ExpertParams make_expert(const std::string& prefix, float out_std) const {
        ExpertParams e;
        e.w1 = make_param(prefix + ".w1", {config.d_model, config.d_ff}, 0.02f);
        e.w2 = make_param(prefix + ".w2", {config.d_model, config.d_ff}, 0.02f);
        e.w3 = make_param(prefix + ".w3", {config.d_ff, config.d_model}, out_std);
        return e;
    }

    static void collect_layer(const std::string& p, const LayerParams& l, std::vector<NamedParam>& out) {
        out.push_back({p + ".norm1.gamma", l.norm1});
        out.push_back({p + ".norm2.gamma", l.norm2});
        if (l.kind == LayerKind::Full) {
            out.push_back({p + ".attn.wq", l.attn.wq});
            out.push_back({p + ".attn.wk", l.attn.wk});
            out.push_back({p + ".attn.wv", l.attn.wv});
            out.push_back({p + ".attn.wo", l.attn.wo});
            out.push_back({p + ".attn.wgate", l.attn.wgate});
        } else {
            out.push_back({p + ".delta.wq", l.delta.wq});
            out.push_back({p + ".delta.wk", l.delta.wk});
            out.push_back({p + ".delta.wv", l.delta.wv});
            out.push_back({p + ".delta.wout", l.delta.wout});
            out.push_back({p + ".delta.walpha", l.delta.walpha});
            out.push_back({p + ".delta.wbeta", l.delta.wbeta});
            out.push_back({p + ".delta.conv_q", l.delta.conv_q});
            out.push_back({p + ".delta.conv_k", l.delta.conv_k});
            out.push_back({p + ".delta.conv_v", l.delta.conv_v});
        }
        out.push_back({p + ".moe.router", l.moe.router});
        if (l.moe.shared_gate.defined()) out.push_back({p + ".moe.shared_gate", l.moe.shared_gate});
        for (size_t e = 0; e < l.moe.experts.size(); ++e) {
            const std::string ep = p + ".moe.experts." + std::to_string(e);
            out.push_back({ep + ".w1", l.moe.experts[e].w1});
            out.push_back({ep + ".w2", l.moe.experts[e].w2});
            out.push_back({ep + ".w3", l.moe.experts[e].w3});
        }
        for (size_t s = 0; s < l.moe.shared.size(); ++s) {
            const std::string sp = p + ".moe.shared." + std::to_string(s);
            out.push_back({sp + ".w1", l.moe.shared[s].w1});
            out.push_back({sp + ".w2", l.moe.shared[s].w2});
            out.push_back({sp + ".w3", l.moe.shared[s].w3});
        }
    }

    static LayerParams clone_layer(const LayerParams& l) {
        LayerParams c;
        c.kind = l.kind;
        c.norm1 = l.norm1.clone();
        c.norm2 = l.norm2.clone();
        if (l.kind == LayerKind::Full) {
            c.attn.wq = l.attn.wq.clone();
            c.attn.wk = l.attn.wk.clone();
            c.attn.wv = l.attn.wv.clone();
            c.attn.wo = l.attn.wo.clone();
            c.attn.wgate = l.attn.wgate.clone();
        } else {
            c.delta.wq = l.delta.wq.clone();
            c.delta.wk = l.delta.wk.clone();
            c.delta.wv = l.delta.wv.clone();
            c.delta.wout = l.delta.wout.clone();
            c.delta.walpha = l.delta.walpha.clone();
            c.delta.wbeta = l.delta.wbeta.clone();
            c.delta.conv_q = l.delta.conv_q.clone();
            c.delta.conv_k = l.delta.conv_k.clone();
            c.delta.conv_v = l.delta.conv_v.clone();
        }
        c.moe.router = l.moe.router.clone();
        if (l.moe.shared_gate.defined()) c.moe.shared_gate = l.moe.shared_gate.clone();
        for (const auto& e : l.moe.experts) c.moe.experts.push_back({e.w1.clone(), e.w2.clone(), e.w3.clone()});
        for (const auto& s : l.moe.shared) c.moe.shared.push_back({s.w1.clone(), s.w2.clone(), s.w3.clone()});
        return c;
    }
};

// SwiGLU expert MLP.
inline Tensor expert_forward(Tensor x, const ExpertParams& e, Tape* tape) {
    Tensor h = mul(silu(matmul(x, e.w1, tape), tape), matmul(x, e.w2, tape), tape);
    return matmul(h, e.w3, tape);
}

// Routed + shared expert mixture. Gate weights are the softmax over exactly
// the selected top-k router logits.
inline Tensor moe_forward(Tensor x, const MoeParams& p, int top_k, Tape* tape, RoutingRecord* rec) {
    const int n = x.dim(0), n_experts = static_cast<int>(p.experts.size());
    Tensor logits = matmul(x, p.router, tape);
    TopkSoftmax ts = topk_softmax(logits, top_k, tape);

    if (rec) {
        rec->logits = logits;
        rec->top_k = top_k;
        rec->indices = ts.indices;
        rec->weights = ts.weights.values();
        rec->expert_out_norm.assign(static_cast<size_t>(n) * top_k, 0.0f);
        if (rec->want_expert_outputs)
            rec->expert_outputs.assign(static_cast<size_t>(n) * top_k * x.dim(1), 0.0f);
    }

    Tensor out = Tensor::zeros({n, x.dim(1)});
    // Group tokens by expert so each expert runs one batched MLP.
    std::vector<std::vector<int>> expert_rows(static_cast<size_t>(n_experts));
    std::vector<std::vector<int>> expert_slots(static_cast<size_t>(n_experts));
    for (int r = 0; r < n; ++r)
        for (int j = 0; j < top_k; ++j) {
            const int e = ts.indices[static_cast<size_t>(r) * top_k + j];
            expert_rows[static_cast<size_t>(e)].push_back(r);
            expert_slots[static_cast<size_t>(e)].push_back(j);
        }
    for (int e = 0; e < n_experts; ++e) {
        const auto& rows = expert_rows[static_cast<size_t>(e)];
        if (rows.empty()) continue;
        Tensor xs = gather_rows(x, rows, tape);
        Tensor ye = expert_forward(xs, p.experts[static_cast<size_t>(e)], tape);
        if (rec) {
            for (size_t i = 0; i < rows.size(); ++i) {
                const size_t slot = static_cast<size_t>(rows[i]) * top_k +
                                    static_cast<size_t>(expert_slots[static_cast<size_t>(e)][i]);
                double ss = 0.0;
                for (int j = 0; j < ye.dim(1); ++j)
                    ss += static_cast<double>(ye.at(static_cast<int>(i), j)) * ye.at(static_cast<int>(i), j);
                rec->expert_out_norm[slot] = static_cast<float>(std::sqrt(ss));
                if (rec->want_expert_outputs)
                    for (int j = 0; j < ye.dim(1); ++j)
                        rec->expert_outputs[slot * static_cast<size_t>(ye.dim(1)) + static_cast<size_t>(j)] =
                            ye.at(static_cast<int>(i), j);
            }
        }
        Tensor w = gather_elems(ts.weights, expert_rows[static_cast<size_t>(e)] /*row in weights*/,
                                expert_slots[static_cast<size_t>(e)], tape);
        // gather_elems wants weight-matrix rows = token rows
        out = add(out, scatter_rows(row_scale(ye, w, tape), rows, n, tape), tape);
    }
    for (size_t s = 0; s < p.shared.size(); ++s) {
        Tensor g = sigmoid(col_slice(matmul(x, p.shared_gate, tape), static_cast<int>(s), 1, tape), tape);
        Tensor ys = expert_forward(x, p.shared[s], tape);
        out = add(out, row_scale(ys, g, tape), tape);
    }
    return out;
}

// Grouped-query causal attention with per-head sigmoid output gates and
// rotary position embedding on q/k.
inline Tensor gated_attention_forward(Tensor x, const AttentionParams& p, const ModelConfig& cfg,
                                      Tape* tape) {
    const int dh = cfg.d_head, hq = cfg.n_q_heads, hkv = cfg.n_kv_heads;
    const int group = hq / hkv;
    Tensor qf = matmul(x, p.wq, tape);
    Tensor kf = matmul(x, p.wk, tape);
    Tensor vf = matmul(x, p.wv, tape);
    Tensor gates = sigmoid(matmul(x, p.wgate, tape), tape);
    std::vector<Tensor> heads;
    heads.reserve(static_cast<size_t>(hq));
    for (int i = 0; i < hq; ++i) {
        const int kv = i / group;
        Tensor qi = rope_rows(col_slice(qf, i * dh, dh, tape), cfg.rope_base, tape);
        Tensor ki = rope_rows(col_slice(kf, kv * dh, dh, tape), cfg.rope_base, tape);
        Tensor vi = col_slice(vf, kv * dh, dh, tape);
        Tensor scores = scale(matmul_nt(qi, ki, tape), 1.0f / std::sqrt(static_cast<float>(dh)), tape);
        Tensor probs = causal_softmax_rows(scores, tape);
        Tensor oi = matmul(probs, vi, tape);
        heads.push_back(row_scale(oi, col_slice(gates, i, 1, tape), tape));
    }
    return matmul(concat_cols(heads, tape), p.wo, tape);
}

// Gated DeltaNet mixer: depthwise causal conv + SiLU on the q/k/v streams,
// per-head L2-normalized keys, sigmoid alpha/beta gates, delta-rule state
// recurrence, output projection.
inline Tensor deltanet_forward(Tensor x, const DeltaNetParams& p, const ModelConfig& cfg, Tape* tape) {
    const int dk = cfg.d_k, dv = cfg.d_v, nqk = cfg.n_qk_heads, nv = cfg.n_v_heads;
    const int group = nv / nqk;
    Tensor qf = silu(causal_depthwise_conv(matmul(x, p.wq, tape), p.conv_q, tape), tape);
    Tensor kf = silu(causal_depthwise_conv(matmul(x, p.wk, tape), p.conv_k, tape), tape);
    Tensor vf = silu(causal_depthwise_conv(matmul(x, p.wv, tape), p.conv_v, tape), tape);
    Tensor alpha = sigmoid(matmul(x, p.walpha, tape), tape);
    Tensor beta = sigmoid(matmul(x, p.wbeta, tape), tape);

    std::vector<Tensor> qh(static_cast<size_t>(nqk)), kh(static_cast<size_t>(nqk));
    for (int g = 0; g < nqk; ++g) {
        qh[static_cast<size_t>(g)] = col_slice(qf, g * dk, dk, tape);
        kh[static_cast<size_t>(g)] = l2_normalize_rows(col_slice(kf, g * dk, dk, tape), 1e-6f, tape);
    }
    std::vector<Tensor> ys;
    ys.reserve(static_cast<size_t>(nv));
    for (int i = 0; i < nv; ++i) {
        const int g = i / group;
        Tensor vi = col_slice(vf, i * dv, dv, tape);
        Tensor ai = col_slice(alpha, i, 1, tape);
        Tensor bi = col_slice(beta, i, 1, tape);
        ys.push_back(delta_rule(qh[static_cast<size_t>(g)], kh[static_cast<size_t>(g)], vi, ai, bi, tape));
    }
    return matmul(concat_cols(ys, tape), p.wout, tape);
}

inline Tensor block_forward(Tensor x, const LayerParams& l, const ModelConfig& cfg, Tape* tape,
                            ForwardTrace* trace, RoutingRecord* rec) {
    Tensor h1 = rmsnorm(x, l.norm1, cfg.rms_eps, tape);
    if (trace && trace->capture_activations) trace->norm_outputs.push_back(h1);
    Tensor mix = l.kind == LayerKind::Full ? gated_attention_forward(h1, l.attn, cfg, tape)
                                           : deltanet_forward(h1, l.delta, cfg, tape);
    x = add(x, mix, tape);
    Tensor h2 = rmsnorm(x, l.norm2, cfg.rms_eps, tape);
    if (trace && trace->capture_activations) trace->norm_outputs.push_back(h2);
    Tensor moe_out = moe_forward(h2, l.moe, cfg.top_k, tape, rec);
    return add(x, moe_out, tape);
}

// Pre-norm residual stack over token ids; returns next-token logits.
inline Tensor backbone_forward(const std::vector<int>& tokens, const HybridModel& m, Tape* tape,
                               ForwardTrace* trace) {
    if (tokens.empty()) throw ArgError("backbone_forward: empty token sequence");
    for (int t : tokens)
        if (t < 0 || t >= m.config.vocab_size)
            throw ArgError("token id " + std::to_string(t) + " out of range (vocab " +
                           std::to_string(m.config.vocab_size) + ")");
    Tensor x = gather_rows(m.embed, tokens, tape);
    for (size_t i = 0; i < m.layers.size(); ++i) {
        RoutingRecord rec;
        if (trace) rec.want_expert_outputs = trace->capture_expert_outputs;
        x = block_forward(x, m.layers[i], m.config, tape, trace, trace ? &rec : nullptr);
        if (trace) {
            trace->routing.push_back(std::move(rec));
            if (trace->capture_activations) trace->block_outputs.push_back(x);
        }
    }
    Tensor h0 = rmsnorm(x, m.final_norm, m.config.rms_eps, tape);
    if (trace) {
        trace->final_hidden = h0;
        if (trace->capture_activations) trace->norm_outputs.push_back(h0);
    }
    return matmul(h0, m.head, tape);
}

// One MTP depth: combine the previous depth's hidden stream with the
// embeddings of tokens k steps ahead, run the depth's transformer block, and
// read logits through the shared head. Stream position i at depth k carries
// information about tokens <= i+k and predicts t_{i+k+1}.
inline Tensor mtp_depth_forward(const HybridModel& m, const MtpParams& mp, Tensor h_prev,
                                const std::vector<int>& ahead_tokens, Tape* tape, Tensor* h_out,
                                RoutingRecord* rec = nullptr) {
    const int len = static_cast<int>(ahead_tokens.size());
    if (h_prev.dim(0) < len + 1 && h_prev.dim(0) != len)
        throw ArgError("mtp_depth_forward: hidden stream shorter than token stream");
    Tensor h_in = h_prev.dim(0) == len ? h_prev : row_slice(h_prev, 0, len, tape);
    Tensor emb = gather_rows(m.embed, ahead_tokens, tape);
    Tensor combined = concat_cols({rmsnorm(h_in, mp.norm_h, m.config.rms_eps, tape),
                                   rmsnorm(emb, mp.norm_e, m.config.rms_eps, tape)},
                                  tape);
    Tensor hp = matmul(combined, mp.proj, tape);
    Tensor hk = block_forward(hp, mp.block, m.config, tape, nullptr, rec);
    if (h_out) *h_out = hk;
    return matmul(rmsnorm(hk, m.final_norm, m.config.rms_eps, tape), m.head, tape);
}

// All-depth MTP forward over a training sequence. Depth k has T-k stream
// positions (it consumes Emb(t_{i+k})); depths with no positions are skipped.
inline std::vector<Tensor> mtp_forward(const HybridModel& m, Tensor h0, const std::vector<int>& tokens,
                                       Tape* tape, ForwardTrace* trace) {
    const int T = static_cast<int>(tokens.size());
    std::vector<Tensor> logits;
    Tensor h_prev = h0;
    for (int k = 1; k <= static_cast<int>(m.mtp.size()); ++k) {
        if (T - k < 1) break;  // depth skipped: no stream positions
        std::vector<int> ahead(tokens.begin() + k, tokens.end());
        Tensor hk;
        RoutingRecord rec;
        if (trace) rec.want_expert_outputs = trace->capture_expert_outputs;
        logits.push_back(mtp_depth_forward(m, m.mtp[static_cast<size_t>(k - 1)], h_prev, ahead, tape, &hk,
                                           trace ? &rec : nullptr));
        if (trace) {
            trace->mtp_hidden.push_back(hk);
            trace->mtp_routing.push_back(std::move(rec));
        }
        h_prev = hk;
    }
    return logits;
}

inline int argmax_row(const Tensor& t, int row) {
    const int m = t.dim(1);
    int best = 0;
    float bv = t.at(row, 0);
    for (int j = 1; j < m; ++j)
        if (t.at(row, j) > bv) {
            bv = t.at(row, j);
            best = j;
        }
    return best;
}

// Greedy decoding; recomputes the full forward per step (no KV cache at this
// scale), so it is trivially deterministic.
inline std::vector<int> generate_greedy(const HybridModel& m, const std::vector<int>& prompt, int n_new) {
    if (prompt.empty()) throw ArgError("generate_greedy: empty prompt");
    std::vector<int> toks = prompt;
    for (int s = 0; s < n_new; ++s) {
        Tensor logits = backbone_forward(toks, m, nullptr, nullptr);
        toks.push_back(argmax_row(logits, logits.dim(0) - 1));
    }
    return toks;
}

// Structural checker: every invariant a compression output must satisfy.
inline void validate_model(const HybridModel& m) {
    const auto& c = m.config;
    c.validate();
    if (static_cast<int>(m.layers.size()) != c.n_layers) throw EvalError("model: layer count mismatch");
    auto want = [](const Tensor& t, int r, int col, const std::string& what) {
        if (!t.defined() || t.ndim() != 2 || t.dim(0) != r || t.dim(1) != col)
            throw EvalError("model: " + what + " has shape " +
                            (t.defined() ? shape_str(t.shape()) : "<undefined>") + ", want [" +
                            std::to_string(r) + "x" + std::to_string(col) + "]");
    };
    auto want_vec = [](const Tensor& t, int n, const std::string& what) {
        if (!t.defined() || t.numel() != static_cast<size_t>(n))
            throw EvalError("model: " + what + " length mismatch");
    };
    want(m.embed, c.vocab_size, c.d_model, "embedding");
    want(m.head, c.d_model, c.vocab_size, "output head");
    want_vec(m.final_norm, c.d_model, "final norm");
    auto check_layer = [&](const LayerParams& l, const std::string& what) {
        want_vec(l.norm1, c.d_model, what + " norm1");
        want_vec(l.norm2, c.d_model, what + " norm2");
        if (l.kind == LayerKind::Full) {
            want(l.attn.wq, c.d_model, c.n_q_heads * c.d_head, what + " wq");
            want(l.attn.wk, c.d_model, c.n_kv_heads * c.d_head, what + " wk");
            want(l.attn.wv, c.d_model, c.n_kv_heads * c.d_head, what + " wv");
            want(l.attn.wo, c.n_q_heads * c.d_head, c.d_model, what + " wo");
            want(l.attn.wgate, c.d_model, c.n_q_heads, what + " wgate");
        } else {
            want(l.delta.wq, c.d_model, c.n_qk_heads * c.d_k, what + " delta wq");
            want(l.delta.wk, c.d_model, c.n_qk_heads * c.d_k, what + " delta wk");
            want(l.delta.wv, c.d_model, c.n_v_heads * c.d_v, what + " delta wv");
            want(l.delta.wout, c.n_v_heads * c.d_v, c.d_model, what + " delta wout");
            want(l.delta.walpha, c.d_model, c.n_v_heads, what + " walpha");
            want(l.delta.wbeta, c.d_model, c.n_v_heads, what + " wbeta");
            want(l.delta.conv_q, c.d_conv, c.n_qk_heads * c.d_k, what + " conv_q");
            want(l.delta.conv_k, c.d_conv, c.n_qk_heads * c.d_k, what + " conv_k");
            want(l.delta.conv_v, c.d_conv, c.n_v_heads * c.d_v, what + " conv_v");
        }
        if (static_cast<int>(l.moe.experts.size()) != c.n_experts)
            throw EvalError("model: " + what + " expert count mismatch");
        if (static_cast<int>(l.moe.shared.size()) != c.n_shared)
            throw EvalError("model: " + what + " shared expert count mismatch");
        want(l.moe.router, c.d_model, c.n_experts, what + " router");
        if (c.n_shared > 0) want(l.moe.shared_gate, c.d_model, c.n_shared, what + " shared gate");
        for (const auto& e : l.moe.experts) {
            want(e.w1, c.d_model, c.d_ff, what + " expert w1");
            want(e.w2, c.d_model, c.d_ff, what + " expert w2");
            want(e.w3, c.d_ff, c.d_model, what + " expert w3");
        }
        for (const auto& s : l.moe.shared) {
            want(s.w1, c.d_model, c.d_ff, what + " shared w1");
            want(s.w2, c.d_model, c.d_ff, what + " shared w2");
            want(s.w3, c.d_ff, c.d_model, what + " shared w3");
        }
    };
    for (size_t i = 0; i < m.layers.size(); ++i) {
        if (m.layers[i].kind != c.kind(static_cast<int>(i)))
            throw EvalError("model: layer " + std::to_string(i) + " kind disagrees with pattern");
        check_layer(m.layers[i], "layer " + std::to_string(i));
    }
    if (static_cast<int>(m.mtp.size()) != c.n_mtp_depths) throw EvalError("model: MTP depth count mismatch");
    for (size_t k = 0; k < m.mtp.size(); ++k) {
        const auto& mp = m.mtp[k];
        want(mp.proj, 2 * c.d_model, c.d_model, "mtp proj");
        want_vec(mp.norm_h, c.d_model, "mtp norm_h");
        want_vec(mp.norm_e, c.d_model, "mtp norm_e");
        if (mp.block.kind != LayerKind::Full) throw EvalError("model: MTP block must be full attention");
        check_layer(mp.block, "mtp block " + std::to_string(k));
    }
}

}  // namespace moelab
