// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint format: a directory holding a textual key/value config
// descriptor, a tensor manifest (name, shape, byte offset, byte length per
// line), and one binary blob of little-endian fp32 in row-major order.
// The config descriptor alone reconstructs every shape; loads are bit-exact.
// Calibration reports reuse the same manifest+blob layout.

#pragma once

#include <bit>
#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "moelab/calib.hpp"
#include "moelab/compress.hpp"
#include "moelab/model.hpp"

namespace moelab {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs are little-endian");

constexpr const char* kCheckpointMagic = "moelab-checkpoint-v1";
constexpr const char* kReportMagic = "moelab-calib-report-v1";

struct IoError : std::runtime_error {
    explicit IoError(const std::string& m) : std::runtime_error("io error: " + m) {}
};

namespace detail {

inline void write_file(const std::filesystem::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw IoError("cannot write " + p.string());
    f << text;
    if (!f) throw IoError("short write to " + p.string());
}

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw IoError("cannot read " + p.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

inline std::string fmt_float(float v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
    return buf;
}

// Minimal key=value text: one pair per line, '#' comments, duplicates rejected.
inline std::map<std::string, std::string> parse_kv(const std::string& text, const std::string& what) {
    std::map<std::string, std::string> out;
    std::istringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw IoError(what + ":" + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (key.empty()) throw IoError(what + ":" + std::to_string(lineno) + ": empty key");
        if (!out.emplace(key, val).second)
            throw IoError(what + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }
    return out;
}

struct ManifestEntry {
    std::string name;
    Shape shape;
    uint64_t offset = 0;
    uint64_t length = 0;
};

inline std::vector<ManifestEntry> parse_manifest(const std::string& text, const char* magic,
                                                 uint64_t blob_len) {
    std::istringstream ss(text);
    std::string line;
    if (!std::getline(ss, line) || line != magic) throw IoError("bad manifest header");
    std::vector<ManifestEntry> entries;
    uint64_t cursor = 0;
    while (std::getline(ss, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        ManifestEntry e;
        std::string shape_s;
        if (!(ls >> e.name >> shape_s >> e.offset >> e.length)) throw IoError("bad manifest line: " + line);
        size_t pos = 0;
        while (pos < shape_s.size()) {
            size_t comma = shape_s.find(',', pos);
            if (comma == std::string::npos) comma = shape_s.size();
            e.shape.push_back(std::stoi(shape_s.substr(pos, comma - pos)));
            pos = comma + 1;
        }
        if (e.length != shape_numel(e.shape) * sizeof(float))
            throw IoError("manifest length disagrees with shape for " + e.name);
        if (e.offset != cursor) throw IoError("manifest offsets must be contiguous (tensor " + e.name + ")");
        cursor = e.offset + e.length;
        if (cursor > blob_len) throw IoError("manifest overruns blob at " + e.name);
        entries.push_back(std::move(e));
    }
    if (cursor != blob_len) throw IoError("blob has trailing bytes beyond the manifest");
    return entries;
}

struct BlobWriter {
    std::string manifest;
    std::string blob;

    explicit BlobWriter(const char* magic) { manifest = std::string(magic) + "\n"; }

    void add(const std::string& name, const Shape& shape, const float* data) {
        const uint64_t length = shape_numel(shape) * sizeof(float);
        std::string shape_s;
        for (size_t i = 0; i < shape.size(); ++i) {
            if (i) shape_s += ",";
            shape_s += std::to_string(shape[i]);
        }
        manifest += name + " " + shape_s + " " + std::to_string(blob.size()) + " " + std::to_string(length) + "\n";
        blob.append(reinterpret_cast<const char*>(data), length);
    }

    void add(const std::string& name, const std::vector<float>& v) {
        add(name, Shape{static_cast<int>(v.size())}, v.data());
    }

    void write(const std::filesystem::path& dir, const char* manifest_name, const char* blob_name) const {
        write_file(dir / manifest_name, manifest);
        write_file(dir / blob_name, blob);
    }
};

struct BlobReader {
    std::string blob;
    std::map<std::string, ManifestEntry> entries;

    BlobReader(const std::filesystem::path& dir, const char* magic, const char* manifest_name,
               const char* blob_name) {
        blob = read_file(dir / blob_name);
        for (auto& e : parse_manifest(read_file(dir / manifest_name), magic, blob.size()))
            entries.emplace(e.name, std::move(e));
    }

    bool has(const std::string& name) const { return entries.count(name) != 0; }

    void read_into(const std::string& name, float* dst, size_t count, const Shape* expect = nullptr) const {
        auto it = entries.find(name);
        if (it == entries.end()) throw IoError("tensor '" + name + "' missing from manifest");
        if (expect && it->second.shape != *expect)
            throw IoError("tensor '" + name + "' has shape " + shape_str(it->second.shape) + ", expected " +
                          shape_str(*expect));
        if (it->second.length != count * sizeof(float))
            throw IoError("tensor '" + name + "' size mismatch");
        std::memcpy(dst, blob.data() + it->second.offset, it->second.length);
    }

    std::vector<float> read_vec(const std::string& name) const {
        auto it = entries.find(name);
        if (it == entries.end()) throw IoError("tensor '" + name + "' missing from manifest");
        std::vector<float> v(it->second.length / sizeof(float));
        std::memcpy(v.data(), blob.data() + it->second.offset, it->second.length);
        return v;
    }
};

}  // namespace detail

// ---- ModelConfig text form ---------------------------------------------------

inline std::string model_config_text(const ModelConfig& c) {
    std::ostringstream ss;
    ss << "format_version = 1\n";
    ss << "d_model = " << c.d_model << "\n";
    ss << "n_layers = " << c.n_layers << "\n";
    ss << "layer_pattern = " << c.pattern_string() << "\n";
    ss << "n_q_heads = " << c.n_q_heads << "\n";
    ss << "n_kv_heads = " << c.n_kv_heads << "\n";
    ss << "d_head = " << c.d_head << "\n";
    ss << "d_k = " << c.d_k << "\n";
    ss << "d_v = " << c.d_v << "\n";
    ss << "n_qk_heads = " << c.n_qk_heads << "\n";
    ss << "n_v_heads = " << c.n_v_heads << "\n";
    ss << "d_conv = " << c.d_conv << "\n";
    ss << "n_experts = " << c.n_experts << "\n";
    ss << "n_shared = " << c.n_shared << "\n";
    ss << "top_k = " << c.top_k << "\n";
    ss << "d_ff = " << c.d_ff << "\n";
    ss << "vocab_size = " << c.vocab_size << "\n";
    ss << "n_mtp_depths = " << c.n_mtp_depths << "\n";
    ss << "rms_eps = " << detail::fmt_float(c.rms_eps) << "\n";
    ss << "rope_base = " << detail::fmt_float(c.rope_base) << "\n";
    ss << "seed = " << c.seed << "\n";
    return ss.str();
}

inline ModelConfig model_config_from_kv(const std::map<std::string, std::string>& kv) {
    auto need = [&](const std::string& k) -> const std::string& {
        auto it = kv.find(k);
        if (it == kv.end()) throw IoError("checkpoint config missing key '" + k + "'");
        return it->second;
    };
    if (need("format_version") != "1") throw IoError("unsupported checkpoint format version");
    ModelConfig c;
    c.d_model = std::stoi(need("d_model"));
    c.n_layers = std::stoi(need("n_layers"));
    c.layer_pattern = parse_layer_pattern(need("layer_pattern"));
    c.n_q_heads = std::stoi(need("n_q_heads"));
    c.n_kv_heads = std::stoi(need("n_kv_heads"));
    c.d_head = std::stoi(need("d_head"));
    c.d_k = std::stoi(need("d_k"));
    c.d_v = std::stoi(need("d_v"));
    c.n_qk_heads = std::stoi(need("n_qk_heads"));
    c.n_v_heads = std::stoi(need("n_v_heads"));
    c.d_conv = std::stoi(need("d_conv"));
    c.n_experts = std::stoi(need("n_experts"));
    c.n_shared = std::stoi(need("n_shared"));
    c.top_k = std::stoi(need("top_k"));
    c.d_ff = std::stoi(need("d_ff"));
    c.vocab_size = std::stoi(need("vocab_size"));
    c.n_mtp_depths = std::stoi(need("n_mtp_depths"));
    c.rms_eps = std::stof(need("rms_eps"));
    c.rope_base = std::stof(need("rope_base"));
    c.seed = std::stoull(need("seed"));
    return c;
}

// ---- checkpoints ---------------------------------------------------------------

struct TrainState {
    OptimizerMoments moments;
    int64_t opt_step = 0;
    int64_t global_step = 0;
    bool present = false;
};

inline void save_checkpoint(const std::filesystem::path& dir, const HybridModel& m,
                            const TrainState* train = nullptr) {
    std::filesystem::create_directories(dir);
    std::string cfg = model_config_text(m.config);
    detail::BlobWriter w(kCheckpointMagic);
    for (const auto& p : m.parameters()) w.add(p.name, p.tensor.shape(), p.tensor.data());
    if (train && train->present) {
        cfg += "opt_step = " + std::to_string(train->opt_step) + "\n";
        cfg += "global_step = " + std::to_string(train->global_step) + "\n";
        for (const auto& [name, pm] : train->moments) {
            w.add("opt.m." + name, pm.m);
            w.add("opt.v." + name, pm.v);
        }
    }
    detail::write_file(dir / "config.txt", cfg);
    w.write(dir, "manifest.txt", "weights.bin");
}

inline HybridModel load_checkpoint(const std::filesystem::path& dir, TrainState* train = nullptr) {
    auto kv = detail::parse_kv(detail::read_file(dir / "config.txt"), (dir / "config.txt").string());
    ModelConfig cfg = model_config_from_kv(kv);
    // Shapes come from the config alone; the manifest must agree.
    HybridModel m = HybridModel::init(cfg);
    detail::BlobReader r(dir, kCheckpointMagic, "manifest.txt", "weights.bin");
    for (auto& p : m.parameters()) {
        Shape expect = p.tensor.shape();
        r.read_into(p.name, p.tensor.data(), p.tensor.numel(), &expect);
    }
    if (train) {
        train->present = kv.count("opt_step") != 0;
        if (train->present) {
            train->opt_step = std::stoll(kv.at("opt_step"));
            train->global_step = kv.count("global_step") ? std::stoll(kv.at("global_step")) : 0;
            train->moments.clear();
            for (const auto& p : m.parameters()) {
                if (!r.has("opt.m." + p.name)) continue;
                ParamMoments pm;
                pm.m = r.read_vec("opt.m." + p.name);
                pm.v = r.read_vec("opt.v." + p.name);
                train->moments.emplace(p.name, std::move(pm));
            }
        }
    }
    return m;
}

// ---- calibration reports ---------------------------------------------------------

inline void save_report(const std::filesystem::path& dir, const CalibrationReport& rep) {
    std::filesystem::create_directories(dir);
    std::ostringstream cfg;
    cfg << "format_version = 1\n";
    cfg << "n_tokens = " << rep.n_tokens << "\n";
    cfg << "n_layers = " << rep.n_layers << "\n";
    cfg << "n_experts = " << rep.n_experts << "\n";
    cfg << "d_model = " << rep.d_model << "\n";
    cfg << "top_k = " << rep.top_k << "\n";
    cfg << "n_mtp = " << rep.n_mtp << "\n";
    cfg << "raw_router_logits = " << (rep.raw_router_logits ? 1 : 0) << "\n";
    detail::write_file(dir / "report.txt", cfg.str());

    detail::BlobWriter w(kReportMagic);
    w.add("width_importance", rep.width_importance);
    w.add("adjacent_layer_cosine", rep.adjacent_layer_cosine);
    auto add_stats = [&](const std::string& prefix, const LayerExpertStats& st) {
        w.add(prefix + ".freq", st.freq);
        w.add(prefix + ".soft", st.soft);
        w.add(prefix + ".reap", st.reap);
        std::vector<float> counts(st.routed_token_counts.begin(), st.routed_token_counts.end());
        w.add(prefix + ".routed", counts);
    };
    for (int l = 0; l < rep.n_layers; ++l) {
        const std::string p = "layer." + std::to_string(l);
        add_stats(p, rep.expert_stats[static_cast<size_t>(l)]);
        w.add(p + ".sim_router_weights", rep.sim_router_weights[static_cast<size_t>(l)]);
        w.add(p + ".sim_router_logits", rep.sim_router_logits[static_cast<size_t>(l)]);
        w.add(p + ".sim_expert_vector", rep.sim_expert_vector[static_cast<size_t>(l)]);
    }
    for (int d = 0; d < rep.n_mtp; ++d) {
        const std::string p = "mtp." + std::to_string(d);
        add_stats(p, rep.mtp_expert_stats[static_cast<size_t>(d)]);
        w.add(p + ".sim_router_weights", rep.mtp_sim_router_weights[static_cast<size_t>(d)]);
        w.add(p + ".sim_router_logits", rep.mtp_sim_router_logits[static_cast<size_t>(d)]);
        w.add(p + ".sim_expert_vector", rep.mtp_sim_expert_vector[static_cast<size_t>(d)]);
    }
    w.write(dir, "report_manifest.txt", "report.bin");
}

inline CalibrationReport load_report(const std::filesystem::path& dir) {
    auto kv = detail::parse_kv(detail::read_file(dir / "report.txt"), (dir / "report.txt").string());
    CalibrationReport rep;
    rep.n_tokens = std::stoll(kv.at("n_tokens"));
    rep.n_layers = std::stoi(kv.at("n_layers"));
    rep.n_experts = std::stoi(kv.at("n_experts"));
    rep.d_model = std::stoi(kv.at("d_model"));
    rep.top_k = std::stoi(kv.at("top_k"));
    rep.n_mtp = kv.count("n_mtp") ? std::stoi(kv.at("n_mtp")) : 0;
    rep.raw_router_logits = kv.at("raw_router_logits") == "1";

    detail::BlobReader r(dir, kReportMagic, "report_manifest.txt", "report.bin");
    rep.width_importance = r.read_vec("width_importance");
    rep.adjacent_layer_cosine = r.read_vec("adjacent_layer_cosine");
    auto read_stats = [&](const std::string& prefix) {
        LayerExpertStats st;
        st.freq = r.read_vec(prefix + ".freq");
        st.soft = r.read_vec(prefix + ".soft");
        st.reap = r.read_vec(prefix + ".reap");
        auto counts = r.read_vec(prefix + ".routed");
        st.routed_token_counts.assign(counts.begin(), counts.end());
        return st;
    };
    for (int l = 0; l < rep.n_layers; ++l) {
        const std::string p = "layer." + std::to_string(l);
        rep.expert_stats.push_back(read_stats(p));
        rep.sim_router_weights.push_back(r.read_vec(p + ".sim_router_weights"));
        rep.sim_router_logits.push_back(r.read_vec(p + ".sim_router_logits"));
        rep.sim_expert_vector.push_back(r.read_vec(p + ".sim_expert_vector"));
    }
    for (int d = 0; d < rep.n_mtp; ++d) {
        const std::string p = "mtp." + std::to_string(d);
        rep.mtp_expert_stats.push_back(read_stats(p));
        rep.mtp_sim_router_weights.push_back(r.read_vec(p + ".sim_router_weights"));
        rep.mtp_sim_router_logits.push_back(r.read_vec(p + ".sim_router_logits"));
        rep.mtp_sim_expert_vector.push_back(r.read_vec(p + ".sim_expert_vector"));
    }
    return rep;
}

// ---- token files (little-endian u32 ids) ------------------------------------------

inline void save_tokens(const std::filesystem::path& path, const std::vector<int>& tokens) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path.string());
    for (int t : tokens) {
        const uint32_t v = static_cast<uint32_t>(t);
        f.write(reinterpret_cast<const char*>(&v), sizeof v);
    }
    if (!f) throw IoError("short write to " + path.string());
}

inline std::vector<int> load_tokens(const std::filesystem::path& path) {
    std::string raw = detail::read_file(path);
    if (raw.size() % sizeof(uint32_t) != 0) throw IoError("token file size not a multiple of 4");
    std::vector<int> tokens(raw.size() / sizeof(uint32_t));
    std::memcpy(tokens.data(), raw.data(), raw.size());
    return tokens;
}

}  // namespace moelab
