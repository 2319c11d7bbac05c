#include "trm/mixers.hpp"

#include <cmath>
#include <stdexcept>

namespace trm {

std::string to_string(MixerKind k) {
    switch (k) {
        case MixerKind::attention: return "attention";
        case MixerKind::mamba2: return "mamba2";
        case MixerKind::mlp: return "mlp";
        case MixerKind::mlp_t: return "mlp_t";
    }
    return "?";
}

MixerKind mixer_kind_from_string(const std::string& s) {
    if (s == "attention") return MixerKind::attention;
    if (s == "mamba2") return MixerKind::mamba2;
    if (s == "mlp") return MixerKind::mlp;
    if (s == "mlp_t") return MixerKind::mlp_t;
    throw std::invalid_argument("unknown mixer kind: " + s);
}

void MixerConfig::validate() const {
    if (d < 1) throw std::invalid_argument("mixer config: d must be positive");
    if (kind == MixerKind::attention && d % heads != 0)
        throw std::invalid_argument("mixer config: d=" + std::to_string(d) +
                                    " not divisible by heads=" + std::to_string(heads));
    if (kind == MixerKind::mamba2) {
        if (d_inner() % headdim != 0)
            throw std::invalid_argument("mixer config: d*expand=" + std::to_string(d_inner()) +
                                        " not divisible by headdim=" + std::to_string(headdim));
        if (conv_width < 1 || d_state < 1)
            throw std::invalid_argument("mixer config: bad mamba2 dims");
    }
    if (kind == MixerKind::mlp_t && seq_len < 1)
        throw std::invalid_argument("mixer config: mlp_t requires an explicit fixed seq_len");
}

int64_t mlp_hidden_width(int64_t d, int mlp_expansion) {
    return static_cast<int64_t>(std::llround(2.0 * mlp_expansion * static_cast<double>(d) / 3.0));
}

namespace {
void init_trunc_normal(Param& p, Rng& rng, double scale = 1.0) {
    for (auto& v : p.value.v) v = rng.trunc_normal(0.02) * scale;
}
}  // namespace

// ---------------------------------------------------------------- attention

AttentionBlock::AttentionBlock(const MixerConfig& c, const std::string& prefix, Rng& rng,
                               double out_scale)
    : cfg(c),
      wq(prefix + ".wq", {c.d, c.d}),
      wk(prefix + ".wk", {c.d, c.d}),
      wv(prefix + ".wv", {c.d, c.d}),
      wo(prefix + ".wo", {c.d, c.d}) {
    cfg.validate();
    init_trunc_normal(wq, rng);
    init_trunc_normal(wk, rng);
    init_trunc_normal(wv, rng);
    init_trunc_normal(wo, rng, out_scale);
}

Tape::Var AttentionBlock::forward(Tape& t, Tape::Var x) {
    const Shape& sx = t.shape(x);
    if (sx.size() != 3 || sx[2] != cfg.d)
        throw std::invalid_argument("attention: expected [b,s," + std::to_string(cfg.d) +
                                    "], got " + shape_str(sx));
    const int64_t b = sx[0], s = sx[1], h = cfg.heads, dh = cfg.d / cfg.heads;
    auto split_heads = [&](Tape::Var v) {
        return t.permute(t.reshape(v, {b, s, h, dh}), {0, 2, 1, 3});  // [b,h,s,dh]
    };
    auto q = split_heads(t.linear(x, t.param(wq)));
    auto k = split_heads(t.linear(x, t.param(wk)));
    auto v = split_heads(t.linear(x, t.param(wv)));
    auto scores = t.scale(t.bmm_nt(q, k), 1.0 / std::sqrt(static_cast<double>(dh)));
    auto probs = t.softmax_lastdim(scores);  // bidirectional: no mask
    auto ctx = t.bmm(probs, v);
    auto merged = t.reshape(t.permute(ctx, {0, 2, 1, 3}), {b, s, cfg.d});
    return t.linear(merged, t.param(wo));
}

int64_t AttentionBlock::param_count() const { return 4 * cfg.d * cfg.d; }

void AttentionBlock::collect(std::vector<Param*>& out) {
    out.push_back(&wq);
    out.push_back(&wk);
    out.push_back(&wv);
    out.push_back(&wo);
}

// ------------------------------------------------------------------ mamba2

Mamba2Block::Mamba2Block(const MixerConfig& c, const std::string& prefix, Rng& rng,
                         double out_scale)
    : cfg(c),
      in_proj(prefix + ".in_proj", {c.d, 2 * c.d_inner() + 2 * c.d_state + c.scan_heads()}),
      conv_w(prefix + ".conv_w", {c.d_inner() + 2 * c.d_state, c.conv_width}),
      conv_b(prefix + ".conv_b", {c.d_inner() + 2 * c.d_state}),
      a_log(prefix + ".a_log", {c.scan_heads()}),
      dt_bias(prefix + ".dt_bias", {c.scan_heads()}),
      out_proj(prefix + ".out_proj", {c.d_inner(), c.d}) {
    cfg.validate();
    init_trunc_normal(in_proj, rng);
    init_trunc_normal(conv_w, rng);
    // decay rate a_t = exp(-softplus(dt + dt_bias) * exp(a_log)) in (0,1)
    for (auto& v : a_log.value.v) v = std::log(rng.uniform(1.0, 16.0));
    for (auto& v : dt_bias.value.v) {
        const double dt0 = rng.uniform(1e-3, 0.1);
        v = std::log(std::expm1(dt0));  // inverse softplus
    }
    init_trunc_normal(out_proj, rng, out_scale);
}

Tape::Var Mamba2Block::forward(Tape& t, Tape::Var x) {
    const Shape& sx = t.shape(x);
    if (sx.size() != 3 || sx[2] != cfg.d)
        throw std::invalid_argument("mamba2: expected [b,s," + std::to_string(cfg.d) + "], got " +
                                    shape_str(sx));
    const int64_t b = sx[0], s = sx[1];
    const int64_t di = cfg.d_inner(), N = cfg.d_state, H = cfg.scan_heads(), P = cfg.headdim;

    auto zxbcdt = t.linear(x, t.param(in_proj));
    auto z = t.slice_lastdim(zxbcdt, 0, di);
    auto xbc = t.slice_lastdim(zxbcdt, di, di + 2 * N);
    auto dt_raw = t.slice_lastdim(zxbcdt, 2 * di + 2 * N, H);

    auto conv = t.silu(t.conv1d_causal_depthwise(xbc, t.param(conv_w), t.param(conv_b)));
    auto xc = t.slice_lastdim(conv, 0, di);
    auto B = t.slice_lastdim(conv, di, N);
    auto C = t.slice_lastdim(conv, di + N, N);

    auto dt = t.softplus(t.add_lastdim(dt_raw, t.param(dt_bias)));      // [b,s,H]
    auto decay = t.exp(t.neg(t.mul_lastdim(dt, t.exp(t.param(a_log)))));  // a_t in (0,1)
    auto u = t.mul_expand_last(t.reshape(xc, {b, s, H, P}), dt);

    auto y = t.reshape(t.selective_scan(u, decay, B, C), {b, s, di});
    auto gated = t.mul(y, t.silu(z));
    return t.linear(gated, t.param(out_proj));
}

int64_t Mamba2Block::param_count() const {
    const int64_t di = cfg.d_inner(), N = cfg.d_state, H = cfg.scan_heads();
    return cfg.d * (2 * di + 2 * N + H)       // in_proj
           + (di + 2 * N) * cfg.conv_width    // conv weight
           + (di + 2 * N)                     // conv bias
           + 2 * H                            // a_log + dt_bias
           + di * cfg.d;                      // out_proj
}

void Mamba2Block::collect(std::vector<Param*>& out) {
    out.push_back(&in_proj);
    out.push_back(&conv_w);
    out.push_back(&conv_b);
    out.push_back(&a_log);
    out.push_back(&dt_bias);
    out.push_back(&out_proj);
}

// --------------------------------------------------------------------- mlp

MlpBlock::MlpBlock(const MixerConfig& c, const std::string& prefix, Rng& rng, double out_scale)
    : cfg(c),
      w_gate(prefix + ".w_gate", {c.d, mlp_hidden_width(c.d, c.mlp_expansion)}),
      w_up(prefix + ".w_up", {c.d, mlp_hidden_width(c.d, c.mlp_expansion)}),
      w_down(prefix + ".w_down", {mlp_hidden_width(c.d, c.mlp_expansion), c.d}) {
    cfg.validate();
    init_trunc_normal(w_gate, rng);
    init_trunc_normal(w_up, rng);
    init_trunc_normal(w_down, rng, out_scale);
}

Tape::Var MlpBlock::forward(Tape& t, Tape::Var x) {
    auto gate = t.silu(t.linear(x, t.param(w_gate)));
    auto up = t.linear(x, t.param(w_up));
    return t.linear(t.mul(gate, up), t.param(w_down));
}

int64_t MlpBlock::param_count() const {
    return 3 * cfg.d * mlp_hidden_width(cfg.d, cfg.mlp_expansion);
}

void MlpBlock::collect(std::vector<Param*>& out) {
    out.push_back(&w_gate);
    out.push_back(&w_up);
    out.push_back(&w_down);
}

// ------------------------------------------------------------------- mlp_t

MlpTBlock::MlpTBlock(const MixerConfig& c, const std::string& prefix, Rng& rng, double out_scale)
    : cfg(c),
      mix(prefix + ".mix", {c.seq_len, c.seq_len}),
      bias(prefix + ".bias", {c.seq_len}) {
    cfg.validate();
    init_trunc_normal(mix, rng, out_scale);
}

Tape::Var MlpTBlock::forward(Tape& t, Tape::Var x) {
    const Shape& sx = t.shape(x);
    if (sx.size() != 3)
        throw std::invalid_argument("mlp_t: expected rank-3 input, got " + shape_str(sx));
    if (sx[1] != cfg.seq_len)
        throw std::invalid_argument("mlp_t: runtime seq_len " + std::to_string(sx[1]) +
                                    " != configured " + std::to_string(cfg.seq_len));
    auto xt = t.permute(x, {0, 2, 1});  // [b, d, s]
    auto mixed = t.linear_bias(xt, t.param(mix), t.param(bias));
    return t.permute(mixed, {0, 2, 1});
}

int64_t MlpTBlock::param_count() const { return cfg.seq_len * cfg.seq_len + cfg.seq_len; }

void MlpTBlock::collect(std::vector<Param*>& out) {
    out.push_back(&mix);
    out.push_back(&bias);
}

// ------------------------------------------------------------------- stack

Tape::Var mixer_forward(Mixer& m, Tape& t, Tape::Var x) {
    return std::visit([&](auto& blk) { return blk.forward(t, x); }, m);
}

int64_t mixer_param_count(const Mixer& m) {
    return std::visit([](const auto& blk) { return blk.param_count(); }, m);
}

void mixer_collect(Mixer& m, std::vector<Param*>& out) {
    std::visit([&](auto& blk) { blk.collect(out); }, m);
}

Tape::Var BlockStack::forward(Tape& t, Tape::Var h) {
    for (size_t i = 0; i < mixers.size(); ++i) {
        auto gain = t.param(*gains[i]);
        if (placement == NormPlacement::post) {
            h = t.rmsnorm(t.add(h, mixer_forward(mixers[i], t, h)), gain, eps);
        } else {
            h = t.add(h, mixer_forward(mixers[i], t, t.rmsnorm(h, gain, eps)));
        }
    }
    return h;
}

int64_t BlockStack::param_count() const {
    int64_t total = 0;
    for (const auto& m : mixers) total += mixer_param_count(m);
    for (const auto& g : gains) total += g->value.size();
    return total;
}

void BlockStack::collect(std::vector<Param*>& out) {
    for (auto& m : mixers) mixer_collect(m, out);
    for (auto& g : gains) out.push_back(g.get());
}

std::vector<MixerKind> preset_layout(const std::string& preset) {
    using K = MixerKind;
    if (preset == "trm_attn") return {K::attention, K::mlp, K::attention, K::mlp};
    if (preset == "tr_mamba2attn") return {K::mamba2, K::mamba2, K::attention, K::mlp};
    if (preset == "tr_mamba2mlpt") return {K::mamba2, K::mamba2, K::mlp_t, K::mlp};
    if (preset == "trm_mlpt") return {K::mlp_t, K::mlp, K::mlp_t, K::mlp};
    throw std::invalid_argument("unknown preset: " + preset);
}

BlockStack build_block_stack(const std::vector<MixerConfig>& configs, Rng& rng,
                             NormPlacement placement) {
    if (configs.empty()) throw std::invalid_argument("build_block_stack: empty config list");
    BlockStack stack;
    stack.placement = placement;
    const double out_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(configs.size()));
    for (size_t i = 0; i < configs.size(); ++i) {
        const auto& c = configs[i];
        c.validate();
        const std::string prefix = "stack." + std::to_string(i) + "." + to_string(c.kind);
        switch (c.kind) {
            case MixerKind::attention:
                stack.mixers.emplace_back(AttentionBlock(c, prefix, rng, out_scale));
                break;
            case MixerKind::mamba2:
                stack.mixers.emplace_back(Mamba2Block(c, prefix, rng, out_scale));
                break;
            case MixerKind::mlp:
                stack.mixers.emplace_back(MlpBlock(c, prefix, rng, out_scale));
                break;
            case MixerKind::mlp_t:
                stack.mixers.emplace_back(MlpTBlock(c, prefix, rng, out_scale));
                break;
        }
        auto gain = std::make_unique<Param>("stack." + std::to_string(i) + ".norm_gain",
                                            Shape{c.d});
        std::fill(gain->value.v.begin(), gain->value.v.end(), 1.0);
        stack.gains.push_back(std::move(gain));
    }
    return stack;
}

BlockStack build_block_stack_preset(const std::string& preset, const MixerConfig& base, Rng& rng,
                                    NormPlacement placement) {
    std::vector<MixerConfig> configs;
    for (MixerKind k : preset_layout(preset)) {
        MixerConfig c = base;
        c.kind = k;
        configs.push_back(c);
    }
    return build_block_stack(configs, rng, placement);
}

std::vector<ParamAuditRow> audit_block_stack(const std::string& preset, const MixerConfig& base) {
    std::vector<ParamAuditRow> rows;
    const auto layout = preset_layout(preset);
    for (size_t i = 0; i < layout.size(); ++i) {
        MixerConfig c = base;
        c.kind = layout[i];
        int64_t n = 0;
        switch (c.kind) {
            case MixerKind::attention:
                n = 4 * c.d * c.d;
                break;
            case MixerKind::mamba2:
                n = c.d * (2 * c.d_inner() + 2 * c.d_state + c.scan_heads()) +
                    (c.d_inner() + 2 * c.d_state) * (c.conv_width + 1) + 2 * c.scan_heads() +
                    c.d_inner() * c.d;
                break;
            case MixerKind::mlp:
                n = 3 * c.d * mlp_hidden_width(c.d, c.mlp_expansion);
                break;
            case MixerKind::mlp_t:
                n = c.seq_len * c.seq_len + c.seq_len;
                break;
        }
        rows.push_back({std::to_string(i) + ":" + to_string(c.kind), n});
        rows.push_back({std::to_string(i) + ":norm_gain", c.d});
    }
    return rows;
}

// -------------------------------------------------------------- plain scans

namespace {
void scan_shapes_check(size_t u, size_t a, size_t B, size_t C, int64_t s, int64_t H, int64_t P,
                       int64_t N) {
    if (static_cast<int64_t>(u) != s * H * P || static_cast<int64_t>(a) != s * H ||
        static_cast<int64_t>(B) != s * N || static_cast<int64_t>(C) != s * N)
        throw std::invalid_argument("scan: input sizes inconsistent with dims");
}
}  // namespace

std::vector<double> mamba2_scan_sequential(const std::vector<double>& u,
                                           const std::vector<double>& a,
                                           const std::vector<double>& B,
                                           const std::vector<double>& C,
                                           int64_t s, int64_t H, int64_t P, int64_t N) {
    scan_shapes_check(u.size(), a.size(), B.size(), C.size(), s, H, P, N);
    std::vector<double> y(s * H * P, 0.0);
    std::vector<double> h(H * P * N, 0.0);
    for (int64_t t = 0; t < s; ++t) {
        const double* Bt = B.data() + t * N;
        const double* Ct = C.data() + t * N;
        for (int64_t hd = 0; hd < H; ++hd) {
            const double at = a[t * H + hd];
            for (int64_t p = 0; p < P; ++p) {
                double* hp = h.data() + (hd * P + p) * N;
                const double ut = u[(t * H + hd) * P + p];
                double acc = 0.0;
                for (int64_t n = 0; n < N; ++n) {
                    hp[n] = at * hp[n] + Bt[n] * ut;
                    acc += hp[n] * Ct[n];
                }
                y[(t * H + hd) * P + p] = acc;
            }
        }
    }
    return y;
}

std::vector<double> mamba2_scan_chunked(const std::vector<double>& u,
                                        const std::vector<double>& a,
                                        const std::vector<double>& B,
                                        const std::vector<double>& C,
                                        int64_t s, int64_t H, int64_t P, int64_t N,
                                        int64_t chunk) {
    scan_shapes_check(u.size(), a.size(), B.size(), C.size(), s, H, P, N);
    if (chunk <= 0) throw std::invalid_argument("scan: chunk must be positive");
    std::vector<double> y(s * H * P, 0.0);
    std::vector<double> h_in(H * P * N, 0.0);   // inter-chunk state carry
    std::vector<double> h_out(H * P * N, 0.0);

    for (int64_t t0 = 0; t0 < s; t0 += chunk) {
        const int64_t t1 = std::min(s, t0 + chunk);
        const int64_t cl = t1 - t0;

        // intra-chunk kernel G[t][r] = C_t . B_r (shared across heads)
        std::vector<double> G(cl * cl, 0.0);
        for (int64_t t = 0; t < cl; ++t)
            for (int64_t r = 0; r <= t; ++r) {
                double dot = 0.0;
                for (int64_t n = 0; n < N; ++n) dot += C[(t0 + t) * N + n] * B[(t0 + r) * N + n];
                G[t * cl + r] = dot;
            }

        for (int64_t hd = 0; hd < H; ++hd) {
            // cum[t] = prod_{i=t0..t0+t} a_i for this head
            std::vector<double> cum(cl);
            double run = 1.0;
            for (int64_t t = 0; t < cl; ++t) {
                run *= a[(t0 + t) * H + hd];
                cum[t] = run;
            }
            for (int64_t t = 0; t < cl; ++t) {
                // decay-weighted intra-chunk mix: w(r,t) = prod_{i=r+1..t} a_i
                std::vector<double> w(t + 1);
                w[t] = 1.0;
                for (int64_t r = t; r > 0; --r) w[r - 1] = w[r] * a[(t0 + r) * H + hd];
                for (int64_t p = 0; p < P; ++p) {
                    double acc = 0.0;
                    for (int64_t r = 0; r <= t; ++r)
                        acc += w[r] * G[t * cl + r] * u[((t0 + r) * H + hd) * P + p];
                    // inter-chunk contribution from carried state
                    const double* hp = h_in.data() + (hd * P + p) * N;
                    double carry = 0.0;
                    for (int64_t n = 0; n < N; ++n) carry += hp[n] * C[(t0 + t) * N + n];
                    y[((t0 + t) * H + hd) * P + p] = acc + cum[t] * carry;
                }
            }
            // state carry to the next chunk
            for (int64_t p = 0; p < P; ++p) {
                double* ho = h_out.data() + (hd * P + p) * N;
                const double* hi = h_in.data() + (hd * P + p) * N;
                for (int64_t n = 0; n < N; ++n) ho[n] = cum[cl - 1] * hi[n];
                // tail decays accumulated multiplicatively, no division by cum
                double tail = 1.0;
                for (int64_t r = cl - 1; r >= 0; --r) {
                    const double ur = u[((t0 + r) * H + hd) * P + p];
                    for (int64_t n = 0; n < N; ++n) ho[n] += tail * B[(t0 + r) * N + n] * ur;
                    tail *= a[(t0 + r) * H + hd];
                }
            }
        }
        std::swap(h_in, h_out);
    }
    return y;
}

}  // namespace trm
