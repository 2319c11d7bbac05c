#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "trm/darray.hpp"

using namespace trm;

namespace {

std::vector<double> randvec(size_t n, uint64_t seed, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::vector<double> v(n);
    for (auto& x : v) {
        const double u = (rng() >> 11) * 0x1.0p-53;
        x = lo + (hi - lo) * u;
    }
    return v;
}

}  // namespace

TEST_CASE("matmul identity and projector") {
    Tape t;
    auto id = t.input(DArray({2, 2}, {1, 0, 0, 1}));
    auto a = t.input(DArray({2, 2}, {1, 2, 3, 4}));
    auto r = t.matmul(id, a);
    CHECK(t.val(r).v == std::vector<double>{1, 2, 3, 4});

    auto proj = t.input(DArray({2, 2}, {1, 0, 0, 0}));
    auto b = t.input(DArray({2, 2}, {5, 6, 7, 8}));
    auto r2 = t.matmul(proj, b);
    CHECK(t.val(r2).v == std::vector<double>{5, 6, 0, 0});
}

TEST_CASE("matmul vs naive triple loop oracle") {
    const int m = 3, k = 4, n = 2;
    auto av = randvec(m * k, 1);
    auto bv = randvec(k * n, 2);
    std::vector<double> ref(m * n, 0.0);
    for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p)
            for (int j = 0; j < n; ++j) ref[i * n + j] += av[i * k + p] * bv[p * n + j];
    Tape t;
    auto r = t.matmul(t.input(DArray({m, k}, av)), t.input(DArray({k, n}, bv)));
    for (int i = 0; i < m * n; ++i) CHECK(t.val(r).v[i] == doctest::Approx(ref[i]).epsilon(1e-12));
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tape t;
    auto a = t.input(DArray({2, 3}));
    auto b = t.input(DArray({2, 2}));
    CHECK_THROWS_WITH_AS(t.matmul(a, b), doctest::Contains("[2,3]"), std::invalid_argument);
}

TEST_CASE("matmul associativity on random triples") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        Tape t;
        auto a = t.input(DArray({3, 4}, randvec(12, rng())));
        auto b = t.input(DArray({4, 5}, randvec(20, rng())));
        auto c = t.input(DArray({5, 2}, randvec(10, rng())));
        auto l = t.matmul(t.matmul(a, b), c);
        auto r = t.matmul(a, t.matmul(b, c));
        for (size_t i = 0; i < t.val(l).v.size(); ++i)
            CHECK(std::abs(t.val(l).v[i] - t.val(r).v[i]) < 1e-10);
    }
}

TEST_CASE("rmsnorm hand cases") {
    Tape t;
    auto gain = t.input(DArray({2}, {1, 1}));
    // constant vector normalizes to unit RMS
    auto c = t.rmsnorm(t.input(DArray({2}, {3, 3})), gain, 0.0);
    CHECK(t.val(c).v[0] == doctest::Approx(1.0));
    CHECK(t.val(c).v[1] == doctest::Approx(1.0));
    // x=[3,4]: rms = sqrt(12.5)
    auto r = t.rmsnorm(t.input(DArray({2}, {3, 4})), gain, 0.0);
    CHECK(t.val(r).v[0] == doctest::Approx(3.0 / std::sqrt(12.5)).epsilon(1e-4));
    CHECK(t.val(r).v[1] == doctest::Approx(4.0 / std::sqrt(12.5)).epsilon(1e-4));
    // zero input with eps stays zero
    auto z = t.rmsnorm(t.input(DArray({2}, {0, 0})), gain, 1e-6);
    CHECK(t.val(z).v[0] == 0.0);
    CHECK(t.val(z).v[1] == 0.0);
}

TEST_CASE("rmsnorm unit RMS property") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        const int d = 1 + static_cast<int>(rng() % 16);
        Tape t;
        auto gain = t.input(DArray({d}, std::vector<double>(d, 1.0)));
        auto x = t.input(DArray({d}, randvec(d, rng(), -5, 5)));
        auto y = t.rmsnorm(x, gain, 1e-15);
        double ms = 0.0;
        for (double v : t.val(y).v) ms += v * v;
        CHECK(std::sqrt(ms / d) == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("softmax hand cases and stability") {
    Tape t;
    auto s0 = t.softmax_lastdim(t.input(DArray({2}, {0, 0})));
    CHECK(t.val(s0).v[0] == doctest::Approx(0.5));
    auto s1 = t.softmax_lastdim(t.input(DArray({2}, {1000, 0})));
    CHECK(t.val(s1).v[0] == doctest::Approx(1.0));
    CHECK(std::isfinite(t.val(s1).v[1]));
    auto s2 = t.softmax_lastdim(t.input(DArray({3}, {1, 2, 3})));
    CHECK(t.val(s2).v[0] == doctest::Approx(0.0900).epsilon(1e-2));
    CHECK(t.val(s2).v[1] == doctest::Approx(0.2447).epsilon(1e-2));
    CHECK(t.val(s2).v[2] == doctest::Approx(0.6652).epsilon(1e-2));
}

TEST_CASE("softmax rows sum to one for wide-range inputs") {
    std::mt19937_64 rng(13);
    for (int trial = 0; trial < 50; ++trial) {
        Tape t;
        auto x = t.input(DArray({4, 6}, randvec(24, rng(), -50, 50)));
        auto y = t.softmax_lastdim(x);
        for (int r = 0; r < 4; ++r) {
            double sum = 0.0;
            for (int j = 0; j < 6; ++j) sum += t.val(y).v[r * 6 + j];
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
        }
    }
}

TEST_CASE("backward product rule on scalars") {
    Tape t;
    auto x = t.leaf(DArray({1}, {3.0}), true);
    auto y = t.leaf(DArray({1}, {5.0}), true);
    auto loss = t.mul(x, y);
    t.backward(loss);
    CHECK(t.grad(x)[0] == doctest::Approx(5.0));
    CHECK(t.grad(y)[0] == doctest::Approx(3.0));
}

TEST_CASE("backward rejects non-scalar loss") {
    Tape t;
    auto x = t.leaf(DArray({2}, {1, 2}), true);
    CHECK_THROWS_AS(t.backward(x), std::invalid_argument);
}

TEST_CASE("rmsnorm gradient orthogonal to input direction") {
    Tape t;
    const int d = 6;
    auto xv = randvec(d, 17);
    auto x = t.leaf(DArray({d}, xv), true);
    auto gain = t.input(DArray({d}, std::vector<double>(d, 1.0)));
    auto loss = t.sum_all(t.rmsnorm(x, gain, 0.0));
    t.backward(loss);
    double dot = 0.0;
    for (int i = 0; i < d; ++i) dot += t.grad(x)[i] * xv[i];
    CHECK(std::abs(dot) < 1e-10);
}

TEST_CASE("check_gradients sum of squares") {
    auto xv = randvec(10, 23);
    DArray x({10}, xv);
    auto f = [](const DArray& a) {
        double s = 0.0;
        for (double v : a.v) s += v * v;
        return s;
    };
    std::vector<double> analytic(10);
    for (int i = 0; i < 10; ++i) analytic[i] = 2 * xv[i];
    CHECK(check_gradients(f, x, analytic) < 1e-7);
}

TEST_CASE("finite-difference audit of composite ops") {
    // sum(softmax(rmsnorm(x W) + b) * x2-ish chain) exercises most backward paths
    const int m = 3, d = 5, dout = 4;
    auto xv = randvec(m * d, 31);
    auto wv = randvec(d * dout, 32);
    auto bv = randvec(dout, 33);
    auto gv = randvec(dout, 34, 0.5, 1.5);

    auto run = [&](const DArray& x, std::vector<double>* grad_out) {
        Tape t;
        t.set_grad_enabled(grad_out != nullptr);
        auto xi = t.leaf(x, true);
        auto w = t.input(DArray({d, dout}, wv));
        auto b = t.input(DArray({dout}, bv));
        auto gain = t.input(DArray({dout}, gv));
        auto h = t.linear_bias(xi, w, b);
        auto n = t.rmsnorm(h, gain, 1e-6);
        auto s = t.softmax_lastdim(n);
        auto sp = t.softplus(t.silu(s));
        auto loss = t.mean_all(t.mul(sp, t.exp(t.scale(n, 0.1))));
        const double lv = t.val(loss).v[0];
        if (grad_out) {
            t.backward(loss);
            *grad_out = t.grad(xi);
        }
        return lv;
    };
    DArray x({m, d}, xv);
    std::vector<double> analytic;
    run(x, &analytic);
    auto f = [&](const DArray& a) { return run(a, nullptr); };
    CHECK(check_gradients(f, x, analytic) < 1e-6);
}

TEST_CASE("finite-difference audit of bmm, permute, slice, conv, scan") {
    const int b = 2, s = 5, c = 4;
    auto xv = randvec(b * s * c, 41);
    auto wv = randvec(c * 3, 42);
    auto biasv = randvec(c, 43);
    auto Bv = randvec(b * s * 3, 44);
    auto Cv = randvec(b * s * 3, 45);
    auto av = randvec(b * s * 2, 46, 0.1, 0.9);

    auto run = [&](const DArray& x, std::vector<double>* grad_out) {
        Tape t;
        t.set_grad_enabled(grad_out != nullptr);
        auto xi = t.leaf(x, true);
        auto w = t.leaf(DArray({c, 3}, wv), true);
        auto bias = t.leaf(DArray({c}, biasv), true);
        auto conv = t.conv1d_causal_depthwise(xi, w, bias);
        auto u = t.reshape(conv, {b, s, 2, 2});
        auto a = t.leaf(DArray({b, s, 2}, av), true);
        auto B = t.leaf(DArray({b, s, 3}, Bv), true);
        auto C = t.leaf(DArray({b, s, 3}, Cv), true);
        auto y = t.selective_scan(u, a, B, C);
        auto p = t.permute(y, {0, 2, 1, 3});  // [b,2,s,2]
        auto sc = t.bmm_nt(p, p);
        auto sl = t.slice_lastdim(sc, 1, 3);
        auto loss = t.mean_all(t.mul(sl, sl));
        const double lv = t.val(loss).v[0];
        if (grad_out) {
            t.backward(loss);
            *grad_out = t.grad(xi);
        }
        return lv;
    };
    DArray x({b, s, c}, xv);
    std::vector<double> analytic;
    run(x, &analytic);
    auto f = [&](const DArray& a) { return run(a, nullptr); };
    CHECK(check_gradients(f, x, analytic) < 1e-5);
}

TEST_CASE("cross entropy uniform baseline and gradient") {
    const int b = 2, s = 3, V = 12;
    Tape t;
    auto logits = t.leaf(DArray({b, s, V}), true);  // zeros -> uniform
    std::vector<int> targets(b * s, 5);
    std::vector<double> mask(b * s, 1.0);
    mask[4] = 0.0;
    auto loss = t.cross_entropy_masked(logits, targets, mask);
    CHECK(t.val(loss).v[0] == doctest::Approx(std::log(12.0)).epsilon(1e-9));

    auto lv = randvec(b * s * V, 51);
    auto run = [&](const DArray& x, std::vector<double>* grad_out) {
        Tape tt;
        tt.set_grad_enabled(grad_out != nullptr);
        auto li = tt.leaf(x, true);
        auto l = tt.cross_entropy_masked(li, targets, mask);
        const double out = tt.val(l).v[0];
        if (grad_out) {
            tt.backward(l);
            *grad_out = tt.grad(li);
        }
        return out;
    };
    DArray x({b, s, V}, lv);
    std::vector<double> analytic;
    run(x, &analytic);
    CHECK(check_gradients([&](const DArray& a) { return run(a, nullptr); }, x, analytic) < 1e-6);
}

TEST_CASE("bce with logits gradient") {
    auto lv = randvec(6, 61, -3, 3);
    std::vector<double> targets = {0, 1, 1, 0, 1, 0};
    auto run = [&](const DArray& x, std::vector<double>* grad_out) {
        Tape tt;
        tt.set_grad_enabled(grad_out != nullptr);
        auto li = tt.leaf(x, true);
        auto l = tt.bce_with_logits(li, targets);
        const double out = tt.val(l).v[0];
        if (grad_out) {
            tt.backward(l);
            *grad_out = tt.grad(li);
        }
        return out;
    };
    DArray x({6}, lv);
    std::vector<double> analytic;
    run(x, &analytic);
    CHECK(check_gradients([&](const DArray& a) { return run(a, nullptr); }, x, analytic) < 1e-7);
}

TEST_CASE("param binding accumulates gradients and detach stops flow") {
    Param p("w", {2, 2});
    p.value.v = {1, 2, 3, 4};
    Tape t;
    auto w = t.param(p);
    auto x = t.input(DArray({2, 2}, {1, 1, 1, 1}));
    auto y = t.matmul(x, w);
    auto d = t.detach(y);
    auto loss = t.mean_all(t.add(y, t.mul(d, d)));
    t.backward(loss);
    // only the non-detached path contributes: d(mean(y))/dw
    for (double gv : p.grad.v) CHECK(gv == doctest::Approx(0.5));
}

TEST_CASE("gemm is deterministic across thread counts") {
    const int m = 64, k = 48, n = 32;
    auto av = randvec(m * k, 71);
    auto bv = randvec(k * n, 72);
    std::vector<double> c1(m * n), c4(m * n);
    set_num_threads(1);
    gemm(av.data(), bv.data(), c1.data(), m, k, n, false, false, false);
    set_num_threads(4);
    gemm(av.data(), bv.data(), c4.data(), m, k, n, false, false, false);
    set_num_threads(1);
    CHECK(c1 == c4);
}
