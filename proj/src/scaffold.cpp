#include "trm/scaffold.hpp"

#include <cmath>
#include <stdexcept>

#include <json.hpp>

namespace trm {

void ModelConfig::validate() const {
    if (h_cycles < 1 || l_cycles < 1)
        throw std::invalid_argument("model config: H_cycles and L_cycles must be >= 1");
    if (seq_len < 1 || vocab_size < 2 || d < 1)
        throw std::invalid_argument("model config: bad dims");
    if (deep_supervision_steps < 1)
        throw std::invalid_argument("model config: deep_supervision_steps must be >= 1");
    mixer_base().validate();
    preset_layout(preset);
}

MixerConfig ModelConfig::mixer_base() const {
    MixerConfig c;
    c.d = d;
    c.heads = heads;
    c.d_state = d_state;
    c.headdim = headdim;
    c.expand = expand;
    c.conv_width = conv_width;
    c.mlp_expansion = mlp_expansion;
    c.seq_len = seq_len;
    return c;
}

std::string ModelConfig::to_json() const {
    nlohmann::json j;
    j["preset"] = preset;
    j["d"] = d;
    j["heads"] = heads;
    j["seq_len"] = seq_len;
    j["vocab_size"] = vocab_size;
    j["h_cycles"] = h_cycles;
    j["l_cycles"] = l_cycles;
    j["deep_supervision_steps"] = deep_supervision_steps;
    j["halt_enabled"] = halt_enabled;
    j["halt_threshold"] = halt_threshold;
    j["use_pos_emb"] = use_pos_emb;
    j["norm_placement"] = norm_placement == NormPlacement::post ? "post" : "pre";
    j["d_state"] = d_state;
    j["headdim"] = headdim;
    j["expand"] = expand;
    j["conv_width"] = conv_width;
    j["mlp_expansion"] = mlp_expansion;
    return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& s) {
    const auto j = nlohmann::json::parse(s);
    ModelConfig c;
    c.preset = j.at("preset").get<std::string>();
    c.d = j.at("d").get<int64_t>();
    c.heads = j.at("heads").get<int>();
    c.seq_len = j.at("seq_len").get<int64_t>();
    c.vocab_size = j.at("vocab_size").get<int64_t>();
    c.h_cycles = j.at("h_cycles").get<int>();
    c.l_cycles = j.at("l_cycles").get<int>();
    c.deep_supervision_steps = j.at("deep_supervision_steps").get<int>();
    c.halt_enabled = j.at("halt_enabled").get<bool>();
    c.halt_threshold = j.at("halt_threshold").get<double>();
    c.use_pos_emb = j.at("use_pos_emb").get<bool>();
    c.norm_placement = j.at("norm_placement").get<std::string>() == "pre" ? NormPlacement::pre
                                                                          : NormPlacement::post;
    c.d_state = j.at("d_state").get<int64_t>();
    c.headdim = j.at("headdim").get<int64_t>();
    c.expand = j.at("expand").get<int64_t>();
    c.conv_width = j.at("conv_width").get<int>();
    c.mlp_expansion = j.at("mlp_expansion").get<int>();
    return c;
}

uint64_t ModelConfig::config_hash() const {
    const std::string s = to_json();
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

namespace {
Rng make_init_rng(uint64_t seed) { return Rng(seed ^ 0x9e3779b97f4a7c15ULL); }
}  // namespace

Model::Model(ModelConfig cfg, uint64_t seed)
    : tok_emb("tok_emb", {cfg.vocab_size, cfg.d}),
      pos_emb("pos_emb", {cfg.seq_len, cfg.d}),
      lm_w("lm_w", {cfg.d, cfg.vocab_size}),
      lm_b("lm_b", {cfg.vocab_size}),
      halt_w("halt_w", {cfg.d, 1}),
      halt_b("halt_b", {1}),
      cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng = make_init_rng(seed);
    for (auto& v : tok_emb.value.v) v = rng.trunc_normal(0.02);
    for (auto& v : pos_emb.value.v) v = rng.trunc_normal(0.02);
    stack_ = build_block_stack_preset(cfg_.preset, cfg_.mixer_base(), rng, cfg_.norm_placement);
    for (auto& v : lm_w.value.v) v = rng.trunc_normal(0.02);
    for (auto& v : halt_w.value.v) v = rng.trunc_normal(0.02);
}

std::vector<Param*> Model::params() {
    std::vector<Param*> out;
    out.push_back(&tok_emb);
    out.push_back(&pos_emb);
    stack_.collect(out);
    out.push_back(&lm_w);
    out.push_back(&lm_b);
    out.push_back(&halt_w);
    out.push_back(&halt_b);
    return out;
}

int64_t Model::param_count() {
    int64_t n = 0;
    for (auto* p : params()) n += p->value.size();
    return n;
}

void Model::zero_grad() {
    for (auto* p : params()) p->zero_grad();
}

Tape::Var Model::embed_input(Tape& t, const std::vector<int>& tokens, int64_t b) {
    const int64_t s = cfg_.seq_len;
    if (static_cast<int64_t>(tokens.size()) != b * s)
        throw std::invalid_argument("embed_input: expected " + std::to_string(b * s) +
                                    " tokens, got " + std::to_string(tokens.size()));
    // One-hot matmul keeps the embedding gather differentiable with the
    // existing ops; the vocab is tiny so the cost is negligible.
    DArray tok_onehot({b * s, cfg_.vocab_size});
    for (int64_t i = 0; i < b * s; ++i) {
        const int tok = tokens[i];
        if (tok < 0 || tok >= cfg_.vocab_size)
            throw std::invalid_argument("embed_input: token id " + std::to_string(tok) +
                                        " out of range at position " + std::to_string(i));
        tok_onehot.v[i * cfg_.vocab_size + tok] = 1.0;
    }
    auto emb = t.linear(t.input(tok_onehot), t.param(tok_emb));
    // keep the injected input at O(1) RMS relative to normalized latents
    emb = t.scale(emb, std::sqrt(static_cast<double>(cfg_.d)));
    if (cfg_.use_pos_emb) {
        DArray pos_onehot({b * s, s});
        for (int64_t i = 0; i < b * s; ++i) pos_onehot.v[i * s + (i % s)] = 1.0;
        auto pos = t.scale(t.linear(t.input(pos_onehot), t.param(pos_emb)),
                           std::sqrt(static_cast<double>(cfg_.d)));
        emb = t.add(emb, pos);
    }
    return t.reshape(emb, {b, s, cfg_.d});
}

std::pair<Tape::Var, Tape::Var> Model::recursion_step(Tape& t, Tape::Var z_h, Tape::Var z_l,
                                                      Tape::Var x_emb) {
    return recursion_step(t, z_h, z_l, x_emb, cfg_.h_cycles, cfg_.l_cycles);
}

std::pair<Tape::Var, Tape::Var> Model::recursion_step(Tape& t, Tape::Var z_h, Tape::Var z_l,
                                                      Tape::Var x_emb, int h_cycles,
                                                      int l_cycles) {
    if (h_cycles < 1 || l_cycles < 1)
        throw std::invalid_argument("recursion_step: cycles must be >= 1");
    for (int h = 0; h < h_cycles; ++h) {
        const auto inject = t.add(z_h, x_emb);
        for (int l = 0; l < l_cycles; ++l) z_l = stack_.forward(t, t.add(z_l, inject));
        z_h = stack_.forward(t, t.add(z_h, z_l));
    }
    return {z_h, z_l};
}

std::pair<Tape::Var, Tape::Var> Model::output_heads(Tape& t, Tape::Var z_h) {
    auto logits = t.linear_bias(z_h, t.param(lm_w), t.param(lm_b));
    auto pooled = t.mean_axis(z_h, 1);  // [b, d]
    auto halt = t.reshape(t.linear_bias(pooled, t.param(halt_w), t.param(halt_b)),
                          {t.shape(z_h)[0]});
    return {logits, halt};
}

LatentState Model::initial_state(int64_t b) const {
    LatentState st;
    st.z_h = DArray({b, cfg_.seq_len, cfg_.d});
    st.z_l = DArray({b, cfg_.seq_len, cfg_.d});
    return st;
}

bool halt_decision(double halt_logit, double threshold, int step, int max_steps) {
    if (max_steps < 1) throw std::invalid_argument("halt_decision: max_steps must be >= 1");
    if (step >= max_steps) return true;
    const double p = 1.0 / (1.0 + std::exp(-halt_logit));
    return p > threshold;
}

namespace {

// argmax per position plus per-item stats used by both train and infer
struct HeadReadout {
    std::vector<int> argmax;
    std::vector<uint8_t> exact;
    std::vector<double> mean_logprob;
    double token_acc = 0.0;
};

HeadReadout read_heads(const DArray& logits, const Batch& batch) {
    const int64_t b = batch.b, s = batch.s;
    const int64_t V = logits.shape[2];
    HeadReadout r;
    r.argmax.assign(b * s, 0);
    r.exact.assign(b, 1);
    r.mean_logprob.assign(b, 0.0);
    double correct = 0.0, total = 0.0;
    for (int64_t bi = 0; bi < b; ++bi) {
        double lp_sum = 0.0;
        double lp_count = 0.0;
        for (int64_t si = 0; si < s; ++si) {
            const int64_t row = bi * s + si;
            const double* l = logits.v.data() + row * V;
            int best = 0;
            for (int64_t j = 1; j < V; ++j)
                if (l[j] > l[best]) best = static_cast<int>(j);
            r.argmax[row] = best;
            if (batch.loss_mask[row] != 0.0) {
                total += 1.0;
                if (best == batch.targets[row]) correct += 1.0;
                else r.exact[bi] = 0;
                double mx = l[0];
                for (int64_t j = 1; j < V; ++j) mx = std::max(mx, l[j]);
                double z = 0.0;
                for (int64_t j = 0; j < V; ++j) z += std::exp(l[j] - mx);
                lp_sum += (l[best] - mx) - std::log(z);
                lp_count += 1.0;
            }
        }
        r.mean_logprob[bi] = lp_count > 0 ? lp_sum / lp_count : 0.0;
    }
    r.token_acc = total > 0 ? correct / total : 0.0;
    return r;
}

}  // namespace

std::vector<SupervisionStepResult> deep_supervision_step(
    Model& model, const Batch& batch, int n_steps, double halt_loss_weight, bool compute_grads,
    const std::function<void(int)>& per_step) {
    if (n_steps < 1) throw std::invalid_argument("deep_supervision_step: n_steps must be >= 1");
    const auto& cfg = model.config();
    LatentState carry = model.initial_state(batch.b);
    std::vector<SupervisionStepResult> results;
    for (int k = 0; k < n_steps; ++k) {
        Tape t;
        t.set_grad_enabled(compute_grads);
        auto x_emb = model.embed_input(t, batch.tokens, batch.b);
        // latents enter each supervision step detached
        auto z_h = t.leaf(carry.z_h, false);
        auto z_l = t.leaf(carry.z_l, false);
        std::tie(z_h, z_l) = model.recursion_step(t, z_h, z_l, x_emb);
        auto [logits, halt_logit] = model.output_heads(t, z_h);

        SupervisionStepResult res;
        const auto readout = read_heads(t.val(logits), batch);
        res.token_acc = readout.token_acc;
        res.exact = readout.exact;
        res.halt_logits = t.val(halt_logit).v;

        auto lm_loss = t.cross_entropy_masked(logits, batch.targets, batch.loss_mask);
        res.lm_loss = t.val(lm_loss).v[0];
        Tape::Var total = lm_loss;
        if (cfg.halt_enabled) {
            std::vector<double> halt_targets(readout.exact.begin(), readout.exact.end());
            auto halt_loss = t.bce_with_logits(halt_logit, halt_targets);
            res.halt_loss = t.val(halt_loss).v[0];
            total = t.add(total, t.scale(halt_loss, halt_loss_weight));
        }
        res.loss = t.val(total).v[0];
        if (compute_grads) {
            t.backward(total);
            if (per_step) per_step(k);
        }
        carry.z_h = t.val(z_h);
        carry.z_l = t.val(z_l);
        results.push_back(std::move(res));
    }
    return results;
}

InferResult infer(Model& model, const Batch& batch, int max_steps) {
    if (max_steps < 1) throw std::invalid_argument("infer: max_steps must be >= 1");
    const auto& cfg = model.config();
    const int64_t b = batch.b, s = batch.s;
    LatentState carry = model.initial_state(b);
    InferResult out;
    out.logits = DArray({b, s, cfg.vocab_size});
    out.argmax.assign(b * s, 0);
    out.mean_logprob.assign(b, 0.0);
    out.steps_used.assign(b, max_steps);
    std::vector<uint8_t> done(b, 0);

    for (int step = 1; step <= max_steps; ++step) {
        Tape t;
        t.set_grad_enabled(false);
        auto x_emb = model.embed_input(t, batch.tokens, b);
        auto z_h = t.leaf(carry.z_h, false);
        auto z_l = t.leaf(carry.z_l, false);
        std::tie(z_h, z_l) = model.recursion_step(t, z_h, z_l, x_emb);
        auto [logits, halt_logit] = model.output_heads(t, z_h);
        const auto& lv = t.val(logits);
        const auto& hv = t.val(halt_logit).v;
        for (int64_t bi = 0; bi < b; ++bi) {
            if (done[bi]) continue;
            const bool halts = !cfg.halt_enabled
                                   ? (step == max_steps)
                                   : halt_decision(hv[bi], cfg.halt_threshold, step, max_steps);
            if (halts || step == max_steps) {
                std::copy(lv.v.begin() + bi * s * cfg.vocab_size,
                          lv.v.begin() + (bi + 1) * s * cfg.vocab_size,
                          out.logits.v.begin() + bi * s * cfg.vocab_size);
                out.steps_used[bi] = step;
                done[bi] = 1;
            }
        }
        carry.z_h = t.val(z_h);
        carry.z_l = t.val(z_l);
        if (std::all_of(done.begin(), done.end(), [](uint8_t d) { return d != 0; })) break;
    }
    const auto readout = read_heads(out.logits, batch);
    out.argmax = readout.argmax;
    out.mean_logprob = readout.mean_logprob;
    return out;
}

}  // namespace trm
