// SPDX-License-Identifier: Apache-2.0
//
// Textual run configuration: dotted key = value lines. Every key the program
// reads lands in the resolved snapshot (with defaults filled in); keys nobody
// reads are hard errors.

#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "moelab/compress.hpp"
#include "moelab/corpus.hpp"
#include "moelab/distill.hpp"
#include "moelab/io.hpp"
#include "moelab/model.hpp"

namespace moelab {

class RunConfig {
public:
    RunConfig() = default;

    static RunConfig from_file(const std::filesystem::path& path) {
        RunConfig cfg;
        cfg.raw_ = detail::parse_kv(detail::read_file(path), path.string());
        return cfg;
    }

    // CLI override: "key=value".
    void set(const std::string& assignment) {
        const auto eq = assignment.find('=');
        if (eq == std::string::npos || eq == 0)
            throw ArgError("override '" + assignment + "' must look like key=value");
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t");
            const auto e = s.find_last_not_of(" \t");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        raw_[trim(assignment.substr(0, eq))] = trim(assignment.substr(eq + 1));
    }

    bool has(const std::string& key) const { return raw_.count(key) != 0; }

    std::string get_string(const std::string& key, const std::string& def) {
        auto it = raw_.find(key);
        const std::string v = it == raw_.end() ? def : it->second;
        touch(key, v);
        return v;
    }

    std::string require_string(const std::string& key) {
        auto it = raw_.find(key);
        if (it == raw_.end() || it->second.empty())
            throw ArgError("config key '" + key + "' is required");
        touch(key, it->second);
        return it->second;
    }

    int64_t get_i64(const std::string& key, int64_t def) {
        return parse_i64(key, get_string(key, std::to_string(def)));
    }
    int get_int(const std::string& key, int def) {
        return static_cast<int>(get_i64(key, def));
    }
    uint64_t get_u64(const std::string& key, uint64_t def) {
        const std::string v = get_string(key, std::to_string(def));
        try {
            return std::stoull(v);
        } catch (...) {
            throw ArgError("config key '" + key + "': '" + v + "' is not an unsigned integer");
        }
    }
    float get_float(const std::string& key, float def) {
        const std::string v = get_string(key, detail::fmt_float(def));
        try {
            return std::stof(v);
        } catch (...) {
            throw ArgError("config key '" + key + "': '" + v + "' is not a number");
        }
    }
    bool get_bool(const std::string& key, bool def) {
        const std::string v = get_string(key, def ? "true" : "false");
        if (v == "true" || v == "1") return true;
        if (v == "false" || v == "0") return false;
        throw ArgError("config key '" + key + "': '" + v + "' is not a boolean");
    }

    // Unknown keys are never silently ignored.
    void reject_unknown() const {
        std::string bad;
        for (const auto& [k, v] : raw_)
            if (!resolved_.count(k)) bad += (bad.empty() ? "" : ", ") + k;
        if (!bad.empty()) throw ArgError("unknown config key(s): " + bad);
    }

    std::string resolved_text() const {
        std::string out;
        for (const auto& [k, v] : resolved_) out += k + " = " + v + "\n";
        return out;
    }

private:
    int64_t parse_i64(const std::string& key, const std::string& v) {
        try {
            size_t pos = 0;
            int64_t r = std::stoll(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return r;
        } catch (...) {
            throw ArgError("config key '" + key + "': '" + v + "' is not an integer");
        }
    }

    void touch(const std::string& key, const std::string& value) { resolved_[key] = value; }

    std::map<std::string, std::string> raw_;
    std::map<std::string, std::string> resolved_;
};

// ---- typed bindings ------------------------------------------------------------

inline ModelConfig model_from_config(RunConfig& cfg, uint64_t default_seed,
                                     const std::string& prefix = "model.") {
    ModelConfig d;  // compiled defaults
    ModelConfig c;
    c.d_model = cfg.get_int(prefix + "d_model", d.d_model);
    c.n_layers = cfg.get_int(prefix + "n_layers", d.n_layers);
    c.layer_pattern = parse_layer_pattern(cfg.get_string(prefix + "layer_pattern", "LLLF"));
    c.n_q_heads = cfg.get_int(prefix + "n_q_heads", d.n_q_heads);
    c.n_kv_heads = cfg.get_int(prefix + "n_kv_heads", d.n_kv_heads);
    c.d_head = cfg.get_int(prefix + "d_head", d.d_head);
    c.d_k = cfg.get_int(prefix + "d_k", d.d_k);
    c.d_v = cfg.get_int(prefix + "d_v", d.d_v);
    c.n_qk_heads = cfg.get_int(prefix + "n_qk_heads", d.n_qk_heads);
    c.n_v_heads = cfg.get_int(prefix + "n_v_heads", d.n_v_heads);
    c.d_conv = cfg.get_int(prefix + "d_conv", d.d_conv);
    c.n_experts = cfg.get_int(prefix + "n_experts", d.n_experts);
    c.n_shared = cfg.get_int(prefix + "n_shared", d.n_shared);
    c.top_k = cfg.get_int(prefix + "top_k", d.top_k);
    c.d_ff = cfg.get_int(prefix + "d_ff", d.d_ff);
    c.vocab_size = cfg.get_int(prefix + "vocab_size", d.vocab_size);
    c.n_mtp_depths = cfg.get_int(prefix + "n_mtp_depths", d.n_mtp_depths);
    c.rms_eps = cfg.get_float(prefix + "rms_eps", d.rms_eps);
    c.rope_base = cfg.get_float(prefix + "rope_base", d.rope_base);
    c.seed = cfg.get_u64(prefix + "seed", default_seed);
    c.validate();
    return c;
}

inline TrainPlan train_from_config(RunConfig& cfg, uint64_t default_seed,
                                   const std::string& prefix = "train.") {
    TrainPlan d;
    TrainPlan p;
    p.total_tokens = cfg.get_i64(prefix + "total_tokens", 1 << 20);
    p.batch_size = cfg.get_int(prefix + "batch_size", d.batch_size);
    p.seq_len = cfg.get_int(prefix + "seq_len", d.seq_len);
    p.lr_peak = cfg.get_float(prefix + "lr_peak", d.lr_peak);
    p.lr_min = cfg.get_float(prefix + "lr_min", d.lr_min);
    p.warmup_steps = cfg.get_int(prefix + "warmup_steps", 200);
    p.lambda_start = cfg.get_float(prefix + "lambda_start", d.lambda_start);
    p.lambda_end = cfg.get_float(prefix + "lambda_end", d.lambda_end);
    p.beta_start = cfg.get_float(prefix + "beta_start", d.beta_start);
    p.beta_end = cfg.get_float(prefix + "beta_end", d.beta_end);
    p.lb_weight = cfg.get_float(prefix + "lb_weight", d.lb_weight);
    p.loss_flags.use_lm = cfg.get_bool(prefix + "use_lm", true);
    p.loss_flags.use_ntp_kd = cfg.get_bool(prefix + "use_ntp_kd", true);
    p.loss_flags.use_mtp_lm = cfg.get_bool(prefix + "use_mtp_lm", true);
    p.loss_flags.use_mtp_kd = cfg.get_bool(prefix + "use_mtp_kd", true);
    p.adam_beta1 = cfg.get_float(prefix + "adam_beta1", d.adam_beta1);
    p.adam_beta2 = cfg.get_float(prefix + "adam_beta2", d.adam_beta2);
    p.adam_eps = cfg.get_float(prefix + "adam_eps", d.adam_eps);
    p.weight_decay = cfg.get_float(prefix + "weight_decay", d.weight_decay);
    p.grad_clip = cfg.get_float(prefix + "grad_clip", d.grad_clip);
    p.seed = cfg.get_u64(prefix + "seed", default_seed);
    p.validate();
    return p;
}

inline CorpusSpec corpus_from_config(RunConfig& cfg, uint64_t default_seed, int default_vocab,
                                     const std::string& prefix = "corpus.") {
    CorpusSpec s;
    s.kind = parse_corpus_kind(cfg.get_string(prefix + "kind", "markov"));
    s.vocab = cfg.get_int(prefix + "vocab", default_vocab);
    s.length = cfg.get_i64(prefix + "length", s.length);
    s.seed = cfg.get_u64(prefix + "seed", default_seed);
    s.order = cfg.get_int(prefix + "order", s.order);
    s.zipf_alpha = cfg.get_float(prefix + "zipf_alpha", s.zipf_alpha);
    s.gain = cfg.get_float(prefix + "gain", s.gain);
    s.deterministic = cfg.get_bool(prefix + "deterministic", false);
    s.text_path = cfg.get_string(prefix + "text_path", "");
    return s;
}

// plan.* keys; a zero target disables that dimension.
inline CompressionPlan plan_from_config(RunConfig& cfg, const std::string& prefix = "plan.") {
    CompressionPlan plan;
    const int depth_n = cfg.get_int(prefix + "depth_n", 0);
    const std::string depth_mode = cfg.get_string(prefix + "depth_mode", "last_n");
    if (depth_n > 0) {
        DepthSpec dsp;
        dsp.n_layers = depth_n;
        if (depth_mode == "last_n")
            dsp.mode = DepthPruneMode::LastN;
        else if (depth_mode == "similarity_chunk")
            dsp.mode = DepthPruneMode::SimilarityChunk;
        else
            throw ArgError("config key '" + prefix + "depth_mode': unknown mode '" + depth_mode + "'");
        plan.depth = dsp;
    }
    const int width_d = cfg.get_int(prefix + "width_d", 0);
    const bool reinit = cfg.get_bool(prefix + "width_reinit_mtp", false);
    if (width_d > 0) plan.width = WidthSpec{width_d, reinit};
    const int experts_n = cfg.get_int(prefix + "experts_n", 0);
    const int experts_k = cfg.get_int(prefix + "experts_top_k", 0);
    const std::string metric = cfg.get_string(prefix + "experts_metric", "soft");
    const std::string action = cfg.get_string(prefix + "experts_action", "merge_partial_preserve");
    const std::string simm = cfg.get_string(prefix + "experts_similarity", "router_weights");
    if (experts_n > 0) {
        ExpertSpec es;
        es.target_n = experts_n;
        es.target_top_k = experts_k > 0 ? experts_k : experts_n;
        es.metric = parse_importance_metric(metric);
        es.action = parse_expert_action(action);
        es.similarity = parse_similarity_method(simm);
        plan.experts = es;
    }
    return plan;
}

inline std::vector<double> fractions_from_config(RunConfig& cfg, const std::string& key) {
    const std::string v = cfg.get_string(key, "");
    std::vector<double> out;
    if (v.empty()) return out;
    std::istringstream ss(v);
    std::string part;
    while (std::getline(ss, part, ',')) out.push_back(std::stod(part));
    return out;
}

}  // namespace moelab
