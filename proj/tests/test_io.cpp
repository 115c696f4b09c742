// SPDX-License-Identifier: Apache-2.0
//
// I/O tests: bit-exact checkpoint round trips, manifest validation, report
// round trips, token files, config parsing, and corpus statistics.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "moelab/corpus.hpp"
#include "moelab/distill.hpp"
#include "moelab/io.hpp"
#include "moelab/runconfig.hpp"

using namespace moelab;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("moelab_test_" + std::to_string(Rng(reinterpret_cast<uint64_t>(this)).next_u64()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

ModelConfig io_config() {
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
    c.vocab_size = 13;
    c.n_mtp_depths = 1;
    c.seed = 41;
    return c;
}

}  // namespace

TEST_CASE("checkpoint round trip is bit-exact") {
    TempDir tmp;
    HybridModel m = HybridModel::init(io_config());
    save_checkpoint(tmp.path / "ckpt", m);
    HybridModel r = load_checkpoint(tmp.path / "ckpt");
    auto pa = m.parameters(), pb = r.parameters();
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i) {
        REQUIRE(pa[i].name == pb[i].name);
        REQUIRE(pa[i].tensor.values() == pb[i].tensor.values());
    }
    REQUIRE(r.config.pattern_string() == m.config.pattern_string());

    // logits agree bitwise
    std::vector<int> toks{1, 5, 3, 7};
    Tensor a = backbone_forward(toks, m, nullptr, nullptr);
    Tensor b = backbone_forward(toks, r, nullptr, nullptr);
    REQUIRE(a.values() == b.values());
}

TEST_CASE("checkpoint with optimizer state resumes bit-exactly") {
    TempDir tmp;
    HybridModel m = HybridModel::init(io_config());
    TrainState ts;
    ts.present = true;
    ts.opt_step = 17;
    ts.global_step = 29;
    for (const auto& p : m.parameters()) {
        ParamMoments pm;
        pm.m.assign(p.tensor.numel(), 0.25f);
        pm.v.assign(p.tensor.numel(), 0.5f);
        ts.moments.emplace(p.name, std::move(pm));
    }
    save_checkpoint(tmp.path / "ckpt", m, &ts);
    TrainState back;
    HybridModel r = load_checkpoint(tmp.path / "ckpt", &back);
    REQUIRE(back.present);
    REQUIRE(back.opt_step == 17);
    REQUIRE(back.global_step == 29);
    REQUIRE(back.moments.size() == ts.moments.size());
    for (const auto& [name, pm] : ts.moments) {
        REQUIRE(back.moments.at(name).m == pm.m);
        REQUIRE(back.moments.at(name).v == pm.v);
    }
}

TEST_CASE("corrupted manifests are rejected") {
    TempDir tmp;
    HybridModel m = HybridModel::init(io_config());
    save_checkpoint(tmp.path / "ckpt", m);

    // truncate the blob: manifest now overruns
    auto blob_path = tmp.path / "ckpt" / "weights.bin";
    auto size = fs::file_size(blob_path);
    fs::resize_file(blob_path, size - 4);
    CHECK_THROWS_AS(load_checkpoint(tmp.path / "ckpt"), IoError);

    // bad header
    save_checkpoint(tmp.path / "ckpt2", m);
    std::ofstream f(tmp.path / "ckpt2" / "manifest.txt", std::ios::trunc);
    f << "not-a-checkpoint\n";
    f.close();
    CHECK_THROWS_AS(load_checkpoint(tmp.path / "ckpt2"), IoError);
}

TEST_CASE("calibration report round trip") {
    TempDir tmp;
    HybridModel m = HybridModel::init(io_config());
    std::vector<std::vector<int>> batches{{1, 2, 3, 4, 5, 6}, {7, 8, 9, 10, 11, 12}};
    auto rep = collect(m, batches);
    save_report(tmp.path / "cal", rep);
    auto r = load_report(tmp.path / "cal");
    REQUIRE(r.n_tokens == rep.n_tokens);
    REQUIRE(r.width_importance == rep.width_importance);
    REQUIRE(r.adjacent_layer_cosine == rep.adjacent_layer_cosine);
    REQUIRE(r.n_mtp == rep.n_mtp);
    for (int l = 0; l < rep.n_layers; ++l) {
        REQUIRE(r.expert_stats[static_cast<size_t>(l)].freq == rep.expert_stats[static_cast<size_t>(l)].freq);
        REQUIRE(r.expert_stats[static_cast<size_t>(l)].soft == rep.expert_stats[static_cast<size_t>(l)].soft);
        REQUIRE(r.expert_stats[static_cast<size_t>(l)].reap == rep.expert_stats[static_cast<size_t>(l)].reap);
        REQUIRE(r.expert_stats[static_cast<size_t>(l)].routed_token_counts ==
                rep.expert_stats[static_cast<size_t>(l)].routed_token_counts);
        REQUIRE(r.sim_router_logits[static_cast<size_t>(l)] == rep.sim_router_logits[static_cast<size_t>(l)]);
        REQUIRE(r.sim_expert_vector[static_cast<size_t>(l)] == rep.sim_expert_vector[static_cast<size_t>(l)]);
    }
    REQUIRE(r.mtp_expert_stats[0].freq == rep.mtp_expert_stats[0].freq);

    // a loaded report drives compression identically
    CompressionPlan plan;
    plan.experts = ExpertSpec{2, 2, ImportanceMetric::Soft, ExpertAction::MergePartialPreserve,
                              SimilarityMethod::ExpertVector};
    auto [a, ra] = apply_plan(m, rep, plan);
    auto [b, rb] = apply_plan(m, r, plan);
    auto pa = a.parameters(), pb = b.parameters();
    for (size_t i = 0; i < pa.size(); ++i) REQUIRE(pa[i].tensor.values() == pb[i].tensor.values());
}

TEST_CASE("token file round trip and layout") {
    TempDir tmp;
    std::vector<int> toks{0, 1, 255, 65535, 7};
    save_tokens(tmp.path / "t.bin", toks);
    REQUIRE(load_tokens(tmp.path / "t.bin") == toks);
    REQUIRE(fs::file_size(tmp.path / "t.bin") == toks.size() * 4);
    // little-endian check on the third token (255 = 0xFF,0,0,0)
    std::ifstream f(tmp.path / "t.bin", std::ios::binary);
    f.seekg(8);
    unsigned char bytes[4];
    f.read(reinterpret_cast<char*>(bytes), 4);
    CHECK(bytes[0] == 0xFF);
    CHECK(bytes[1] == 0x00);
}

TEST_CASE("markov corpus is deterministic and in range") {
    CorpusSpec spec;
    spec.vocab = 32;
    spec.length = 4096;
    spec.seed = 9;
    auto a = gen_corpus(spec);
    auto b = gen_corpus(spec);
    REQUIRE(a == b);
    REQUIRE(a.size() == 4096);
    for (int t : a) {
        REQUIRE(t >= 0);
        REQUIRE(t < 32);
    }
    spec.seed = 10;
    CHECK(gen_corpus(spec) != a);
}

TEST_CASE("zipf corpus rank-frequency slope is about -1") {
    CorpusSpec spec;
    spec.vocab = 64;
    spec.length = 200000;
    spec.seed = 4;
    spec.zipf_alpha = 1.0f;
    auto toks = gen_corpus(spec);
    std::vector<double> freq(64, 0.0);
    for (int t : toks) freq[static_cast<size_t>(t)] += 1.0;
    std::sort(freq.begin(), freq.end(), std::greater<>());
    // least-squares slope of log f vs log rank over the top 32 ranks
    const int n = 32;
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (int r = 0; r < n; ++r) {
        const double x = std::log(static_cast<double>(r + 1));
        const double y = std::log(freq[static_cast<size_t>(r)]);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    INFO("slope=" << slope);
    CHECK(std::abs(slope + 1.0) < 0.15);
}

TEST_CASE("deterministic order-1 chain is learnable to near-zero loss") {
    CorpusSpec spec;
    spec.vocab = 11;
    spec.length = 2000;
    spec.seed = 21;
    spec.deterministic = true;
    auto corpus = gen_corpus(spec);

    ModelConfig c = io_config();
    c.vocab_size = 11;
    c.n_mtp_depths = 0;
    c.seed = 77;
    HybridModel m = HybridModel::init(c);
    TrainPlan plan;
    plan.batch_size = 2;
    plan.seq_len = 10;
    plan.total_tokens = 250 * plan.tokens_per_step();
    plan.loss_flags = {true, false, false, false};
    plan.lambda_start = plan.lambda_end = 0.0f;
    plan.lr_peak = 4e-3f;
    plan.lr_min = 1e-3f;
    plan.warmup_steps = 20;
    plan.seed = 5;
    BatchSampler sampler(corpus, plan.seq_len, plan.seed);
    AdamW opt;
    float last = 1e9f;
    run_distill(m, m, sampler, plan, opt, 0, plan.steps(), plan.steps(),
                [&](const StepMetrics& mt) { last = mt.loss_lm; });
    INFO("final lm loss " << last);
    CHECK(last < 0.15f);
}

TEST_CASE("bytes corpus tokenizes and enforces the vocab bound") {
    TempDir tmp;
    {
        std::ofstream f(tmp.path / "text.txt", std::ios::binary);
        f << "abcabc";
    }
    CorpusSpec spec;
    spec.kind = CorpusKind::Bytes;
    spec.vocab = 256;
    spec.length = 0;
    spec.text_path = (tmp.path / "text.txt").string();
    auto toks = gen_corpus(spec);
    REQUIRE(toks == std::vector<int>{97, 98, 99, 97, 98, 99});
    spec.vocab = 64;
    CHECK_THROWS_AS(gen_corpus(spec), ArgError);
}

TEST_CASE("run config: defaults, overrides, unknown keys") {
    TempDir tmp;
    {
        std::ofstream f(tmp.path / "run.cfg");
        f << "# comment line\n";
        f << "seed = 3\n";
        f << "model.d_model = 32\n";
        f << "train.total_tokens = 4096\n";
    }
    RunConfig cfg = RunConfig::from_file(tmp.path / "run.cfg");
    cfg.set("model.d_model=48");
    const uint64_t seed = cfg.get_u64("seed", 0);
    ModelConfig mc = model_from_config(cfg, seed);
    CHECK(mc.d_model == 48);    // override wins
    CHECK(mc.seed == 3);        // flows from the root seed
    TrainPlan tp = train_from_config(cfg, seed);
    CHECK(tp.total_tokens == 4096);
    CHECK(tp.seed == 3);
    cfg.reject_unknown();  // everything consumed

    // resolved snapshot carries defaults
    const std::string resolved = cfg.resolved_text();
    CHECK(resolved.find("model.n_experts = 16") != std::string::npos);
    CHECK(resolved.find("train.lambda_end = 0.75") != std::string::npos);

    RunConfig bad = RunConfig::from_file(tmp.path / "run.cfg");
    bad.set("model.typo_key=1");
    bad.get_u64("seed", 0);
    model_from_config(bad, 0);
    train_from_config(bad, 0);
    CHECK_THROWS_AS(bad.reject_unknown(), ArgError);
}

TEST_CASE("config descriptor alone reconstructs all shapes") {
    TempDir tmp;
    HybridModel m = HybridModel::init(io_config());
    save_checkpoint(tmp.path / "ckpt", m);
    auto kv = detail::parse_kv(detail::read_file(tmp.path / "ckpt" / "config.txt"), "config");
    ModelConfig c = model_config_from_kv(kv);
    HybridModel shell = HybridModel::init(c);
    auto pa = m.parameters(), pb = shell.parameters();
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i) {
        REQUIRE(pa[i].name == pb[i].name);
        REQUIRE(pa[i].tensor.shape() == pb[i].tensor.shape());
    }
}
