#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "trm/augeval.hpp"
#include "trm/trainer.hpp"

using namespace trm;

namespace {

ModelConfig sudoku4_config(const std::string& preset = "tr_mamba2attn") {
    ModelConfig cfg;
    cfg.preset = preset;
    cfg.d = 32;
    cfg.heads = 4;
    cfg.seq_len = 16;
    cfg.vocab_size = sudoku_vocab(4).size();
    cfg.h_cycles = 2;
    cfg.l_cycles = 2;
    cfg.deep_supervision_steps = 2;
    cfg.d_state = 8;
    cfg.headdim = 16;
    return cfg;
}

TrainConfig fast_train(uint64_t seed) {
    TrainConfig tc;
    tc.seed = seed;
    tc.weight_decay = 0.0;
    tc.warmup_steps = 20;
    tc.batch_size = 8;
    return tc;
}

}  // namespace

TEST_CASE("compute_loss: uniform baseline, perfect logits, weighting, all-PAD error") {
    const int64_t b = 2, s = 3, vocab = 12;
    std::vector<int> targets = {0, 5, 11, 3, 2, 1};
    std::vector<double> mask(b * s, 1.0);
    std::vector<double> halt_target = {1.0, 0.0};

    Tape t;
    auto logits = t.input(DArray({b, s, vocab}));  // all-zero = uniform
    auto halt = t.input(DArray({b}));
    auto parts = compute_loss(t, logits, halt, targets, mask, halt_target, 1.0, 0.5);
    CHECK(t.val(parts.lm).v[0] == doctest::Approx(std::log(12.0)).epsilon(1e-12));
    // BCE at logit 0 is ln 2 for either target
    CHECK(t.val(parts.halt).v[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(t.val(parts.total).v[0] ==
          doctest::Approx(std::log(12.0) + 0.5 * std::log(2.0)).epsilon(1e-12));

    // near-one-hot logits drive CE to ~0
    DArray sharp({b, s, vocab});
    for (int64_t i = 0; i < b * s; ++i) sharp.v[i * vocab + targets[i]] = 50.0;
    Tape t2;
    auto parts2 = compute_loss(t2, t2.input(sharp), t2.input(DArray({b})), targets, mask,
                               halt_target, 1.0, 0.5);
    CHECK(t2.val(parts2.lm).v[0] < 1e-12);

    std::vector<double> zero_mask(b * s, 0.0);
    Tape t3;
    CHECK_THROWS_AS(compute_loss(t3, t3.input(DArray({b, s, vocab})), t3.input(DArray({b})),
                                 targets, zero_mask, halt_target, 1.0, 0.5),
                    std::invalid_argument);
}

TEST_CASE("compute_loss gradient matches finite differences") {
    const int64_t b = 2, s = 2, vocab = 4;
    std::vector<int> targets = {1, 3, 0, 2};
    std::vector<double> mask = {1, 1, 1, 0};
    std::vector<double> halt_target = {1.0, 0.0};
    DArray x({b, s, vocab});
    Rng rng(5);
    for (auto& v : x.v) v = rng.uniform(-1.0, 1.0);

    auto f = [&](const DArray& a, std::vector<double>* grad) {
        Tape t;
        t.set_grad_enabled(grad != nullptr);
        auto logits = t.leaf(a, true);
        auto halt = t.input(DArray({b}, {0.3, -0.7}));
        auto parts = compute_loss(t, logits, halt, targets, mask, halt_target, 1.0, 0.5);
        const double v = t.val(parts.total).v[0];
        if (grad) {
            t.backward(parts.total);
            *grad = t.grad(logits);
        }
        return v;
    };
    std::vector<double> analytic;
    f(x, &analytic);
    CHECK(check_gradients([&](const DArray& a) { return f(a, nullptr); }, x, analytic) < 1e-4);
}

TEST_CASE("adamw: warmup scales the first step; decay is decoupled") {
    Param p("w", Shape{2});
    p.value.v = {1.0, -1.0};
    p.grad.v = {0.5, 0.5};
    TrainConfig tc;
    tc.lr = 1e-3;
    tc.warmup_steps = 10;
    tc.weight_decay = 0.0;
    OptimizerState opt;
    opt.m.emplace_back(Shape{2});
    opt.v.emplace_back(Shape{2});
    std::vector<Param*> params = {&p};
    adamw_step(params, opt, tc);
    // step 1: lr/10, bias-corrected mhat/sqrt(vhat) = sign(g)
    CHECK(p.value.v[0] == doctest::Approx(1.0 - 1e-4 * 0.5 / (0.5 + tc.adam_eps)).epsilon(1e-9));

    // pure decay: zero grads, wd > 0 shrinks weights toward zero
    Param q("w2", Shape{1});
    q.value.v = {2.0};
    q.grad.v = {0.0};
    TrainConfig tcd;
    tcd.warmup_steps = 1;
    tcd.weight_decay = 0.1;
    OptimizerState opt2;
    opt2.m.emplace_back(Shape{1});
    opt2.v.emplace_back(Shape{1});
    std::vector<Param*> qs = {&q};
    adamw_step(qs, opt2, tcd);
    CHECK(q.value.v[0] == doctest::Approx(2.0 * (1.0 - tcd.lr * 0.1)).epsilon(1e-12));
}

TEST_CASE("ema_update: boundary decays and geometric convergence") {
    Param p("w", Shape{3});
    p.value.v = {1.0, 2.0, 3.0};
    std::vector<Param*> params = {&p};

    std::vector<DArray> ema = {DArray(Shape{3})};
    ema_update(params, ema, 0.0);  // decay 0: ema == params
    CHECK(ema[0].v == p.value.v);

    std::vector<DArray> frozen = {DArray(Shape{3}, {9.0, 9.0, 9.0})};
    ema_update(params, frozen, 1.0 - 1e-15);  // decay -> 1: essentially unchanged
    CHECK(frozen[0].v[0] == doctest::Approx(9.0).epsilon(1e-12));

    // constant params: error shrinks as decay^t exactly
    std::vector<DArray> e = {DArray(Shape{3})};
    const double decay = 0.9;
    for (int t = 1; t <= 30; ++t) {
        ema_update(params, e, decay);
        for (int i = 0; i < 3; ++i)
            CHECK(p.value.v[i] - e[0].v[i] ==
                  doctest::Approx(p.value.v[i] * std::pow(decay, t)).epsilon(1e-10));
    }
}

TEST_CASE("initial loss sits near the uniform CE baseline") {
    auto cfg = sudoku4_config();
    Model model(cfg, 11);
    auto data = gen_sudoku(4, 8, 8, 12);
    std::vector<size_t> idx = {0, 1, 2, 3, 4, 5, 6, 7};
    const Batch batch = make_batch(data, idx, sudoku_vocab(4), cfg.seq_len);
    auto res = deep_supervision_step(model, batch, 1, 0.5, false);
    const double baseline = std::log(static_cast<double>(cfg.vocab_size));
    CHECK(res[0].lm_loss > 0.9 * baseline);
    CHECK(res[0].lm_loss < 1.1 * baseline);
}

TEST_CASE("overfits a single batch of 8 sudoku-4x4 to 100% exact match in 500 steps") {
    auto cfg = sudoku4_config();
    Model model(cfg, 21);
    auto data = gen_sudoku(4, 10, 8, 31);
    const Vocab vocab = sudoku_vocab(4);
    TrainConfig tc = fast_train(41);
    auto opt = init_optimizer(model);
    auto ema = clone_params(model);

    std::vector<size_t> idx(data.size());
    std::iota(idx.begin(), idx.end(), 0);
    const Batch batch = make_batch(data, idx, vocab, cfg.seq_len);

    double em = 0.0;
    int steps = 0;
    bool refined = false;  // second supervision step beats the first mid-run
    for (int round = 0; round < 500 / 1 && steps < 500; ++round) {
        train_epoch(model, data, vocab, tc, opt, ema, round);  // 1 batch per epoch
        steps = static_cast<int>(opt.step);
        em = exact_match_accuracy(model, data, vocab);
        const auto per_step =
            deep_supervision_step(model, batch, cfg.deep_supervision_steps, 0.5, false);
        if (per_step[0].lm_loss < 1.0 && per_step[1].lm_loss < per_step[0].lm_loss)
            refined = true;
        if (em == 1.0) break;
    }
    INFO("steps used: ", steps);
    CHECK(em == 1.0);
    CHECK(steps <= 500);
    // Once partially trained, the carried latents make the second supervision
    // step strictly better than the first on the memorized batch.
    CHECK(refined);

    // The trained halt head stops early without losing accuracy: mean halt
    // step below max_steps, accuracy within 1% of always running max_steps.
    const auto halted = infer(model, batch, cfg.deep_supervision_steps);
    ModelConfig never_cfg = cfg;
    never_cfg.halt_threshold = 1.0;
    Model never(never_cfg, 21);
    assign_params(never, clone_params(model));
    const auto full = infer(never, batch, cfg.deep_supervision_steps);
    const double mean_steps =
        std::accumulate(halted.steps_used.begin(), halted.steps_used.end(), 0.0) /
        halted.steps_used.size();
    CHECK(mean_steps < cfg.deep_supervision_steps);
    double agree = 0;
    for (size_t i = 0; i < data.size(); ++i) {
        bool ok = true;
        for (int64_t j = 0; j < cfg.seq_len && ok; ++j)
            ok = halted.argmax[i * cfg.seq_len + j] == full.argmax[i * cfg.seq_len + j];
        agree += ok;
    }
    CHECK(agree / data.size() >= 0.99);
}

TEST_CASE("training is deterministic: identical loss trajectories across runs") {
    auto run = [&] {
        Model model(sudoku4_config("trm_attn"), 7);
        auto data = gen_sudoku(4, 10, 16, 77);
        TrainConfig tc = fast_train(9);
        auto opt = init_optimizer(model);
        auto ema = clone_params(model);
        std::ostringstream csv;
        for (int e = 0; e < 3; ++e)
            train_epoch(model, data, sudoku_vocab(4), tc, opt, ema, e, &csv);
        return csv.str();
    };
    CHECK(run() == run());
}

TEST_CASE("checkpoint round-trip is bit-exact and refuses bad inputs") {
    auto cfg = sudoku4_config();
    Model model(cfg, 51);
    auto data = gen_sudoku(4, 10, 8, 52);
    const Vocab vocab = sudoku_vocab(4);
    TrainConfig tc = fast_train(53);
    auto opt = init_optimizer(model);
    auto ema = clone_params(model);
    train_epoch(model, data, vocab, tc, opt, ema, 0);

    const std::string path = "/tmp/trm_test_ckpt.bin";
    save_checkpoint(path, model, ema, &opt);

    // eval before/after reload is bit-identical
    EvalOptions eo;
    eo.n_aug = 8;
    eo.first_permutable = 1;  // blank token is structural
    auto rep_before = evaluate(model, data, vocab, eo);
    Model model2(checkpoint_config(path), 999);
    std::vector<DArray> ema2;
    OptimizerState opt2;
    load_checkpoint(path, model2, &ema2, &opt2);
    auto rep_after = evaluate(model2, data, vocab, eo);
    CHECK(report_to_json(rep_before) == report_to_json(rep_after));
    CHECK(opt2.step == opt.step);
    REQUIRE(ema2.size() == ema.size());
    for (size_t i = 0; i < ema.size(); ++i) CHECK(ema2[i].v == ema[i].v);

    // config mismatch is refused
    Model other(sudoku4_config("trm_attn"), 1);
    CHECK_THROWS_WITH_AS(load_checkpoint(path, other), doctest::Contains("does not match"),
                         std::runtime_error);

    // corruption is caught by the checksum; nothing is loaded
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(200);
        f.put('\x5a');
    }
    const auto before = clone_params(model2);
    CHECK_THROWS_WITH_AS(load_checkpoint(path, model2), doctest::Contains("checksum"),
                         std::runtime_error);
    const auto after = clone_params(model2);
    for (size_t i = 0; i < before.size(); ++i) CHECK(before[i].v == after[i].v);
    std::remove(path.c_str());
}

TEST_CASE("train config validation") {
    TrainConfig tc;
    CHECK_NOTHROW(tc.validate());
    tc.ema_decay = 1.0;
    CHECK_THROWS_AS(tc.validate(), std::invalid_argument);
    tc.ema_decay = 0.999;
    tc.lr = 0;
    CHECK_THROWS_AS(tc.validate(), std::invalid_argument);
}
