#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "trm/scaffold.hpp"

using namespace trm;

namespace {

ModelConfig tiny_config(const std::string& preset = "tr_mamba2attn") {
    ModelConfig cfg;
    cfg.preset = preset;
    cfg.d = 8;
    cfg.heads = 2;
    cfg.seq_len = 4;
    cfg.vocab_size = 5;
    cfg.h_cycles = 1;
    cfg.l_cycles = 1;
    cfg.d_state = 4;
    cfg.headdim = 8;
    cfg.deep_supervision_steps = 2;
    return cfg;
}

Batch tiny_batch(int64_t b, int64_t s, uint64_t seed, int64_t vocab) {
    Batch batch;
    batch.b = b;
    batch.s = s;
    std::mt19937_64 rng(seed);
    batch.tokens.resize(b * s);
    batch.targets.resize(b * s);
    batch.loss_mask.assign(b * s, 1.0);
    for (auto& t : batch.tokens) t = static_cast<int>(rng() % vocab);
    for (auto& t : batch.targets) t = static_cast<int>(rng() % vocab);
    return batch;
}

double rms_of(const std::vector<double>& v) {
    double ms = 0.0;
    for (double x : v) ms += x * x;
    return std::sqrt(ms / static_cast<double>(v.size()));
}

}  // namespace

TEST_CASE("embed_input: shape, determinism, zero tables") {
    Model m(tiny_config(), 1);
    std::vector<int> toks = {0, 1, 2, 3, 4, 0, 1, 2};
    Tape t;
    auto e1 = m.embed_input(t, toks, 2);
    CHECK(t.shape(e1) == Shape{2, 4, 8});
    Tape t2;
    auto e2 = m.embed_input(t2, toks, 2);
    CHECK(t.val(e1).v == t2.val(e2).v);

    std::fill(m.tok_emb.value.v.begin(), m.tok_emb.value.v.end(), 0.0);
    std::fill(m.pos_emb.value.v.begin(), m.pos_emb.value.v.end(), 0.0);
    Tape t3;
    auto e3 = m.embed_input(t3, toks, 2);
    for (double v : t3.val(e3).v) CHECK(v == 0.0);
}

TEST_CASE("embed_input rejects out-of-range tokens, naming the position") {
    Model m(tiny_config(), 1);
    std::vector<int> toks = {0, 1, 9, 3};
    Tape t;
    CHECK_THROWS_WITH_AS(m.embed_input(t, toks, 1), doctest::Contains("position 2"),
                         std::invalid_argument);
}

TEST_CASE("recursion_step rejects H=0 and runs the minimal schedule") {
    Model m(tiny_config(), 2);
    Tape t;
    auto x_emb = m.embed_input(t, {0, 1, 2, 3}, 1);
    auto st = m.initial_state(1);
    auto z_h = t.leaf(st.z_h, false);
    auto z_l = t.leaf(st.z_l, false);
    CHECK_THROWS_AS(m.recursion_step(t, z_h, z_l, x_emb, 0, 1), std::invalid_argument);
    auto [h1, l1] = m.recursion_step(t, z_h, z_l, x_emb, 1, 1);
    CHECK(t.shape(h1) == Shape{1, 4, 8});
    CHECK(t.shape(l1) == Shape{1, 4, 8});
}

TEST_CASE("input injection is live: different inputs change z_L in one inner step") {
    Model m(tiny_config(), 3);
    auto run = [&](const std::vector<int>& toks) {
        Tape t;
        t.set_grad_enabled(false);
        auto x_emb = m.embed_input(t, toks, 1);
        auto st = m.initial_state(1);
        auto z_h = t.leaf(st.z_h, false);
        auto z_l = t.leaf(st.z_l, false);
        auto [h, l] = m.recursion_step(t, z_h, z_l, x_emb, 1, 1);
        (void)h;
        return t.val(l).v;
    };
    auto a = run({0, 1, 2, 3});
    auto b = run({4, 3, 2, 1});
    CHECK(a != b);
}

TEST_CASE("latent RMS stays in [0.8, 1.2] after H=3, L=6 with random params") {
    for (const std::string preset : {"trm_attn", "tr_mamba2attn"}) {
        auto cfg = tiny_config(preset);
        cfg.h_cycles = 3;
        cfg.l_cycles = 6;
        Model m(cfg, 4);
        Tape t;
        t.set_grad_enabled(false);
        auto x_emb = m.embed_input(t, {0, 1, 2, 3, 4, 0, 1, 2}, 2);
        auto st = m.initial_state(2);
        auto [z_h, z_l] = m.recursion_step(t, t.leaf(st.z_h, false), t.leaf(st.z_l, false), x_emb);
        CHECK(rms_of(t.val(z_h).v) > 0.8);
        CHECK(rms_of(t.val(z_h).v) < 1.2);
        CHECK(rms_of(t.val(z_l).v) > 0.8);
        CHECK(rms_of(t.val(z_l).v) < 1.2);
    }
}

TEST_CASE("output heads: shapes, and zero z_H gives uniform vocab softmax") {
    Model m(tiny_config(), 5);
    Tape t;
    auto z_h = t.input(DArray({3, 4, 8}));
    auto [logits, halt] = m.output_heads(t, z_h);
    CHECK(t.shape(logits) == Shape{3, 4, 5});
    CHECK(t.shape(halt) == Shape{3});
    auto probs = t.softmax_lastdim(logits);
    for (double p : t.val(probs).v) CHECK(p == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("halt_decision boundary thresholds") {
    CHECK(halt_decision(0.3, 0.0, 1, 10));        // always halts early
    CHECK_FALSE(halt_decision(50.0, 1.0, 1, 10)); // sigmoid < 1: never early
    CHECK(halt_decision(50.0, 1.0, 10, 10));      // but max_steps forces it
    CHECK_THROWS_AS(halt_decision(0.0, 0.5, 1, 0), std::invalid_argument);
}

TEST_CASE("deep supervision: detach contract between steps") {
    Model m(tiny_config(), 6);
    auto batch = tiny_batch(2, 4, 7, 5);

    m.zero_grad();
    deep_supervision_step(m, batch, 1, 0.5, true);
    std::vector<std::vector<double>> grads_one;
    for (auto* p : m.params()) grads_one.push_back(p->grad.v);

    // per-step grads of step 0 in a 2-step run must equal the 1-step run
    m.zero_grad();
    std::vector<std::vector<double>> grads_step0;
    deep_supervision_step(m, batch, 2, 0.5, true, [&](int k) {
        if (k == 0)
            for (auto* p : m.params()) grads_step0.push_back(p->grad.v);
    });
    REQUIRE(grads_step0.size() == grads_one.size());
    for (size_t i = 0; i < grads_one.size(); ++i) CHECK(grads_step0[i] == grads_one[i]);
}

TEST_CASE("deep supervision: n_steps=1 equals plain recursion + loss") {
    Model m(tiny_config(), 8);
    auto batch = tiny_batch(2, 4, 9, 5);
    auto results = deep_supervision_step(m, batch, 1, 0.5, false);
    REQUIRE(results.size() == 1);

    Tape t;
    t.set_grad_enabled(false);
    auto x_emb = m.embed_input(t, batch.tokens, batch.b);
    auto st = m.initial_state(batch.b);
    auto [z_h, z_l] =
        m.recursion_step(t, t.leaf(st.z_h, false), t.leaf(st.z_l, false), x_emb);
    (void)z_l;
    auto [logits, halt] = m.output_heads(t, z_h);
    (void)halt;
    auto lm = t.cross_entropy_masked(logits, batch.targets, batch.loss_mask);
    CHECK(results[0].lm_loss == doctest::Approx(t.val(lm).v[0]).epsilon(1e-12));
}

TEST_CASE("weight sharing: one parameter set regardless of H, L") {
    auto cfg = tiny_config();
    cfg.h_cycles = 1;
    cfg.l_cycles = 1;
    Model m1(cfg, 10);
    cfg.h_cycles = 3;
    cfg.l_cycles = 6;
    Model m2(cfg, 10);
    CHECK(m1.param_count() == m2.param_count());
    // the stack is traversed H*(L+1) times but contributes its params once
    int64_t expected = m1.stack().param_count() + m1.tok_emb.value.size() +
                       m1.pos_emb.value.size() + m1.lm_w.value.size() + m1.lm_b.value.size() +
                       m1.halt_w.value.size() + m1.halt_b.value.size();
    CHECK(m1.param_count() == expected);
}

TEST_CASE("determinism: same seed and config give bit-identical losses over 3 steps") {
    auto batch = tiny_batch(2, 4, 11, 5);
    std::vector<double> losses_a, losses_b;
    {
        Model m(tiny_config(), 12);
        for (const auto& r : deep_supervision_step(m, batch, 3, 0.5, false))
            losses_a.push_back(r.loss);
    }
    {
        Model m(tiny_config(), 12);
        for (const auto& r : deep_supervision_step(m, batch, 3, 0.5, false))
            losses_b.push_back(r.loss);
    }
    CHECK(losses_a == losses_b);
}

TEST_CASE("swapping presets changes only the stack; contracts are identical") {
    auto batch = tiny_batch(2, 4, 13, 5);
    for (const std::string preset : {"trm_attn", "tr_mamba2attn", "tr_mamba2mlpt", "trm_mlpt"}) {
        Model m(tiny_config(preset), 14);
        auto results = deep_supervision_step(m, batch, 2, 0.5, false);
        CHECK(results.size() == 2);
        CHECK(results[0].exact.size() == 2);
        CHECK(results[0].halt_logits.size() == 2);
        auto inf = infer(m, batch, 2);
        CHECK(inf.logits.shape == Shape{2, 4, 5});
        CHECK(inf.argmax.size() == 8);
    }
}

TEST_CASE("infer: halting thresholds control steps used") {
    auto cfg = tiny_config();
    cfg.halt_threshold = 1.0;  // sigmoid can never exceed 1
    Model m(cfg, 15);
    auto batch = tiny_batch(2, 4, 16, 5);
    auto never = infer(m, batch, 3);
    for (int s : never.steps_used) CHECK(s == 3);

    cfg.halt_threshold = 0.0;
    Model m2(cfg, 15);
    auto always = infer(m2, batch, 3);
    for (int s : always.steps_used) CHECK(s == 1);
}

TEST_CASE("full recursion step gradient check (H=1, L=1, tiny dims)") {
    for (const std::string preset : {"trm_attn", "tr_mamba2attn"}) {
        Model m(tiny_config(preset), 17);
        std::vector<int> toks = {0, 1, 2, 3};
        std::mt19937_64 seed(18);
        std::vector<double> wv(4 * 8 * 5);
        for (auto& x : wv) x = 0.5 + ((seed() >> 11) * 0x1.0p-53);

        auto loss_of = [&](const DArray& z0, std::vector<double>* grad_out) {
            Tape t;
            t.set_grad_enabled(grad_out != nullptr);
            auto x_emb = m.embed_input(t, toks, 1);
            auto z_h = t.leaf(z0, true);
            auto z_l = t.leaf(m.initial_state(1).z_l, false);
            auto [h, l] = m.recursion_step(t, z_h, z_l, x_emb);
            (void)l;
            auto [logits, halt] = m.output_heads(t, h);
            (void)halt;
            auto w = t.input(DArray({1, 4, 5}, std::vector<double>(wv.begin(), wv.begin() + 20)));
            auto loss = t.mean_all(t.mul(logits, w));
            const double lv = t.val(loss).v[0];
            if (grad_out) {
                t.backward(loss);
                *grad_out = t.grad(z_h);
            }
            return lv;
        };
        DArray z0({1, 4, 8});
        std::mt19937_64 rr(19);
        for (auto& x : z0.v) x = ((rr() >> 11) * 0x1.0p-53) * 2.0 - 1.0;
        std::vector<double> analytic;
        loss_of(z0, &analytic);
        CHECK(check_gradients([&](const DArray& a) { return loss_of(a, nullptr); }, z0,
                              analytic) < 1e-4);
    }
}

TEST_CASE("config json round-trip and hash stability") {
    auto cfg = tiny_config("trm_mlpt");
    auto cfg2 = ModelConfig::from_json(cfg.to_json());
    CHECK(cfg2.preset == cfg.preset);
    CHECK(cfg2.d == cfg.d);
    CHECK(cfg2.config_hash() == cfg.config_hash());
    cfg2.l_cycles += 1;
    CHECK(cfg2.config_hash() != cfg.config_hash());
}
