#include "trm/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <unordered_map>

#include "trm/rng.hpp"

namespace trm {

void TrainConfig::validate() const {
    if (lr <= 0 || warmup_steps <= 0 || weight_decay < 0 || batch_size <= 0 || epochs <= 0 ||
        lm_weight <= 0 || halt_weight < 0)
        throw std::invalid_argument("train config fields must be positive");
    if (ema_decay < 0 || ema_decay >= 1)
        throw std::invalid_argument("ema_decay must be in [0, 1)");
    if (beta1 <= 0 || beta1 >= 1 || beta2 <= 0 || beta2 >= 1)
        throw std::invalid_argument("adam betas must be in (0, 1)");
}

OptimizerState init_optimizer(Model& model) {
    OptimizerState opt;
    for (auto* p : model.params()) {
        opt.m.emplace_back(p->value.shape);
        opt.v.emplace_back(p->value.shape);
    }
    return opt;
}

LossParts compute_loss(Tape& t, Tape::Var logits, Tape::Var halt_logit,
                       const std::vector<int>& targets, const std::vector<double>& pad_mask,
                       const std::vector<double>& halt_target, double lm_weight,
                       double halt_weight) {
    if (std::accumulate(pad_mask.begin(), pad_mask.end(), 0.0) == 0.0)
        throw std::invalid_argument("all-PAD batch: the loss mask selects no tokens");
    LossParts parts;
    parts.lm = t.cross_entropy_masked(logits, targets, pad_mask);
    parts.halt = t.bce_with_logits(halt_logit, halt_target);
    parts.total = t.add(t.scale(parts.lm, lm_weight), t.scale(parts.halt, halt_weight));
    return parts;
}

void adamw_step(const std::vector<Param*>& params, OptimizerState& opt, const TrainConfig& cfg) {
    if (params.size() != opt.m.size())
        throw std::invalid_argument("optimizer state does not mirror the parameter list");
    opt.step += 1;
    const double t = static_cast<double>(opt.step);
    const double lr =
        cfg.lr * std::min(1.0, t / static_cast<double>(cfg.warmup_steps));
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i]->value.v;
        const auto& g = params[i]->grad.v;
        auto& m = opt.m[i].v;
        auto& v = opt.v[i].v;
        for (size_t j = 0; j < p.size(); ++j) {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            const double mhat = m[j] / bc1, vhat = v[j] / bc2;
            p[j] -= lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps) + cfg.weight_decay * p[j]);
        }
    }
}

void ema_update(const std::vector<Param*>& params, std::vector<DArray>& ema, double decay) {
    if (params.size() != ema.size())
        throw std::invalid_argument("ema state does not mirror the parameter list");
    for (size_t i = 0; i < params.size(); ++i)
        for (size_t j = 0; j < ema[i].v.size(); ++j)
            ema[i].v[j] = decay * ema[i].v[j] + (1.0 - decay) * params[i]->value.v[j];
}

std::vector<DArray> clone_params(Model& model) {
    std::vector<DArray> out;
    for (auto* p : model.params()) out.push_back(p->value);
    return out;
}

void assign_params(Model& model, const std::vector<DArray>& values) {
    auto params = model.params();
    if (params.size() != values.size())
        throw std::invalid_argument("parameter count mismatch in assign_params");
    for (size_t i = 0; i < params.size(); ++i) {
        if (params[i]->value.shape != values[i].shape)
            throw std::invalid_argument("parameter shape mismatch for " + params[i]->name);
        params[i]->value = values[i];
    }
}

Batch make_batch(const std::vector<PuzzleInstance>& data, const std::vector<size_t>& indices,
                 const Vocab& vocab, int64_t seq_len) {
    Batch b;
    b.b = static_cast<int64_t>(indices.size());
    b.s = seq_len;
    for (size_t idx : indices) {
        const auto& p = data[idx];
        const auto in = tokenize_grid(p.input, vocab, seq_len);
        const auto tg = tokenize_grid(p.target, vocab, seq_len);
        const auto mask = loss_mask_for(p.input, seq_len);
        b.tokens.insert(b.tokens.end(), in.begin(), in.end());
        b.targets.insert(b.targets.end(), tg.begin(), tg.end());
        b.loss_mask.insert(b.loss_mask.end(), mask.begin(), mask.end());
    }
    return b;
}

namespace {

// One training batch: deep supervision with detached latent carry, gradient
// accumulation across supervision steps, metrics from the final step.
StepMetrics train_batch(Model& model, const Batch& batch, const TrainConfig& cfg) {
    const auto& mc = model.config();
    const int n_steps = mc.deep_supervision_steps;
    model.zero_grad();

    auto st = model.initial_state(batch.b);
    DArray carry_h = st.z_h, carry_l = st.z_l;
    StepMetrics metrics;
    for (int step = 0; step < n_steps; ++step) {
        Tape t;
        auto x_emb = model.embed_input(t, batch.tokens, batch.b);
        auto z_h = t.leaf(carry_h, false);
        auto z_l = t.leaf(carry_l, false);
        auto [nh, nl] = model.recursion_step(t, z_h, z_l, x_emb);
        auto [logits, halt] = model.output_heads(t, nh);

        // halt target: is the current argmax prediction exactly right?
        const auto& lv = t.val(logits);
        const int64_t vocab = lv.shape[2];
        std::vector<double> halt_target(batch.b, 1.0);
        double correct = 0, masked = 0;
        for (int64_t i = 0; i < batch.b; ++i)
            for (int64_t j = 0; j < batch.s; ++j) {
                const int64_t pos = i * batch.s + j;
                if (batch.loss_mask[pos] == 0.0) continue;
                const double* row = lv.v.data() + pos * vocab;
                int arg = 0;
                for (int64_t k = 1; k < vocab; ++k)
                    if (row[k] > row[arg]) arg = static_cast<int>(k);
                masked += 1;
                if (arg == batch.targets[pos]) correct += 1;
                else halt_target[i] = 0.0;
            }

        auto parts = compute_loss(t, logits, halt, batch.targets, batch.loss_mask, halt_target,
                                  cfg.lm_weight, cfg.halt_weight);
        t.backward(parts.total);  // accumulates into param grads across steps

        carry_h = t.val(nh);  // value copy = detached carry
        carry_l = t.val(nl);
        if (step == n_steps - 1) {
            metrics.loss = t.val(parts.total).v[0];
            metrics.lm_loss = t.val(parts.lm).v[0];
            metrics.halt_loss = t.val(parts.halt).v[0];
            metrics.token_acc = masked > 0 ? correct / masked : 0.0;
            metrics.exact_acc =
                std::accumulate(halt_target.begin(), halt_target.end(), 0.0) / batch.b;
        }
    }
    return metrics;
}

}  // namespace

EpochMetrics train_epoch(Model& model, const std::vector<PuzzleInstance>& data,
                         const Vocab& vocab, const TrainConfig& cfg, OptimizerState& opt,
                         std::vector<DArray>& ema, int epoch_index, std::ostream* metrics_out) {
    cfg.validate();
    if (data.empty()) throw std::invalid_argument("train_epoch: empty dataset");

    std::vector<size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(cfg.seed + 0x51ed2701u * static_cast<uint64_t>(epoch_index + 1));
    shuffle_rng.shuffle(order);

    auto params = model.params();
    EpochMetrics em;
    for (size_t base = 0; base < order.size(); base += cfg.batch_size) {
        const size_t n = std::min<size_t>(cfg.batch_size, order.size() - base);
        std::vector<size_t> idx(order.begin() + base, order.begin() + base + n);
        const Batch batch = make_batch(data, idx, vocab, model.config().seq_len);

        StepMetrics sm = train_batch(model, batch, cfg);
        adamw_step(params, opt, cfg);
        ema_update(params, ema, cfg.ema_decay);
        sm.step = opt.step;

        if (metrics_out)
            *metrics_out << sm.step << "," << sm.loss << "," << sm.lm_loss << "," << sm.halt_loss
                         << "," << sm.token_acc << "," << sm.exact_acc << "\n";
        em.loss += sm.loss;
        em.lm_loss += sm.lm_loss;
        em.halt_loss += sm.halt_loss;
        em.token_acc += sm.token_acc;
        em.exact_acc += sm.exact_acc;
        em.steps += 1;
    }
    em.loss /= em.steps;
    em.lm_loss /= em.steps;
    em.halt_loss /= em.steps;
    em.token_acc /= em.steps;
    em.exact_acc /= em.steps;
    return em;
}

double exact_match_accuracy(Model& model, const std::vector<PuzzleInstance>& data,
                            const Vocab& vocab, int batch_size) {
    if (data.empty()) return 0.0;
    const int64_t s = model.config().seq_len;
    double solved = 0;
    for (size_t base = 0; base < data.size(); base += batch_size) {
        const size_t n = std::min<size_t>(batch_size, data.size() - base);
        std::vector<size_t> idx(n);
        std::iota(idx.begin(), idx.end(), base);
        const Batch batch = make_batch(data, idx, vocab, s);
        const auto res = infer(model, batch, model.config().deep_supervision_steps);
        for (size_t i = 0; i < n; ++i) {
            bool ok = true;
            for (int64_t j = 0; j < s && ok; ++j) {
                const int64_t pos = static_cast<int64_t>(i) * s + j;
                if (batch.loss_mask[pos] != 0.0 && res.argmax[pos] != batch.targets[pos])
                    ok = false;
            }
            solved += ok;
        }
    }
    return solved / static_cast<double>(data.size());
}

// --- checkpoints -------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'T', 'R', 'M', 'C', 'K', 'P', 'T', '1'};
constexpr uint32_t kVersion = 1;

void put_bytes(std::string& buf, const void* p, size_t n) {
    buf.append(static_cast<const char*>(p), n);
}
void put_u32(std::string& buf, uint32_t x) { put_bytes(buf, &x, 4); }
void put_u64(std::string& buf, uint64_t x) { put_bytes(buf, &x, 8); }
void put_array(std::string& buf, const DArray& a) {
    put_u32(buf, static_cast<uint32_t>(a.shape.size()));
    for (int64_t d : a.shape) put_u64(buf, static_cast<uint64_t>(d));
    put_bytes(buf, a.v.data(), a.v.size() * sizeof(double));
}

uint64_t fnv64(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;
    const std::string& path;

    void need(size_t n) const {
        if (pos + n > buf.size())
            throw std::runtime_error(path + ": truncated checkpoint payload");
    }
    void get_bytes(void* p, size_t n) {
        need(n);
        std::memcpy(p, buf.data() + pos, n);
        pos += n;
    }
    uint32_t get_u32() {
        uint32_t x;
        get_bytes(&x, 4);
        return x;
    }
    uint64_t get_u64() {
        uint64_t x;
        get_bytes(&x, 8);
        return x;
    }
    std::string get_str(size_t n) {
        need(n);
        std::string s(buf.data() + pos, n);
        pos += n;
        return s;
    }
    DArray get_array() {
        const uint32_t nd = get_u32();
        if (nd > 8) throw std::runtime_error(path + ": implausible array rank");
        Shape shape(nd);
        for (auto& d : shape) d = static_cast<int64_t>(get_u64());
        DArray a(shape);
        get_bytes(a.v.data(), a.v.size() * sizeof(double));
        return a;
    }
};

// Verifies checksum/magic/version and returns the payload (without the
// trailing checksum) positioned after the header.
void read_verified(const std::string& path, Reader** out_reader, std::string& storage) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint " + path);
    std::string all((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (all.size() < 8 + 4 + 8) throw std::runtime_error(path + ": not a checkpoint file");
    const uint64_t stored_sum = [&] {
        uint64_t x;
        std::memcpy(&x, all.data() + all.size() - 8, 8);
        return x;
    }();
    storage = all.substr(0, all.size() - 8);
    if (fnv64(storage) != stored_sum)
        throw std::runtime_error(path + ": checksum mismatch (corrupt checkpoint)");
    *out_reader = new Reader{storage, 0, path};
    if ((*out_reader)->get_str(8) != std::string(kMagic, 8))
        throw std::runtime_error(path + ": bad magic");
    if ((*out_reader)->get_u32() != kVersion)
        throw std::runtime_error(path + ": unsupported checkpoint version");
}

}  // namespace

void save_checkpoint(const std::string& path, Model& model, const std::vector<DArray>& ema,
                     const OptimizerState* opt) {
    std::string buf;
    put_bytes(buf, kMagic, 8);
    put_u32(buf, kVersion);
    const std::string cfg_json = model.config().to_json();
    put_u64(buf, model.config().config_hash());
    put_u32(buf, static_cast<uint32_t>(cfg_json.size()));
    put_bytes(buf, cfg_json.data(), cfg_json.size());

    auto params = model.params();
    put_u64(buf, params.size());
    for (auto* p : params) {
        put_u32(buf, static_cast<uint32_t>(p->name.size()));
        put_bytes(buf, p->name.data(), p->name.size());
        put_array(buf, p->value);
    }
    buf.push_back(ema.empty() ? 0 : 1);
    if (!ema.empty()) {
        if (ema.size() != params.size())
            throw std::invalid_argument("ema state does not mirror the parameter list");
        for (const auto& a : ema) put_array(buf, a);
    }
    buf.push_back(opt ? 1 : 0);
    if (opt) {
        put_u64(buf, static_cast<uint64_t>(opt->step));
        for (const auto& a : opt->m) put_array(buf, a);
        for (const auto& a : opt->v) put_array(buf, a);
    }
    put_u64(buf, fnv64(buf));

    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("cannot open " + tmp + " for writing");
        f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (!f) throw std::runtime_error("write to " + tmp + " failed");
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw std::runtime_error("cannot move " + tmp + " into place");
}

void load_checkpoint(const std::string& path, Model& model, std::vector<DArray>* ema,
                     OptimizerState* opt) {
    std::string storage;
    Reader* r = nullptr;
    read_verified(path, &r, storage);
    std::unique_ptr<Reader> reader(r);

    const uint64_t hash = reader->get_u64();
    const std::string cfg_json = reader->get_str(reader->get_u32());
    (void)cfg_json;
    if (hash != model.config().config_hash())
        throw std::runtime_error(path + ": checkpoint config does not match the model (hash " +
                                 std::to_string(hash) + " vs " +
                                 std::to_string(model.config().config_hash()) + ")");

    auto params = model.params();
    const uint64_t n = reader->get_u64();
    if (n != params.size())
        throw std::runtime_error(path + ": parameter count mismatch");
    // stage everything first so a late failure loads nothing partially
    std::vector<DArray> staged(n);
    for (uint64_t i = 0; i < n; ++i) {
        const std::string name = reader->get_str(reader->get_u32());
        if (name != params[i]->name)
            throw std::runtime_error(path + ": parameter order mismatch at " + name);
        staged[i] = reader->get_array();
        if (staged[i].shape != params[i]->value.shape)
            throw std::runtime_error(path + ": shape mismatch for " + name);
    }
    std::vector<DArray> staged_ema;
    uint8_t flag = 0;
    reader->get_bytes(&flag, 1);
    if (flag)
        for (uint64_t i = 0; i < n; ++i) staged_ema.push_back(reader->get_array());
    OptimizerState staged_opt;
    uint8_t opt_flag = 0;
    reader->get_bytes(&opt_flag, 1);
    if (opt_flag) {
        staged_opt.step = static_cast<int64_t>(reader->get_u64());
        for (uint64_t i = 0; i < n; ++i) staged_opt.m.push_back(reader->get_array());
        for (uint64_t i = 0; i < n; ++i) staged_opt.v.push_back(reader->get_array());
    }

    for (uint64_t i = 0; i < n; ++i) params[i]->value = std::move(staged[i]);
    if (ema) {
        if (!flag) throw std::runtime_error(path + ": checkpoint carries no EMA state");
        *ema = std::move(staged_ema);
    }
    if (opt) {
        if (!opt_flag)
            throw std::runtime_error(path + ": checkpoint carries no optimizer state");
        *opt = std::move(staged_opt);
    }
}

ModelConfig checkpoint_config(const std::string& path) {
    std::string storage;
    Reader* r = nullptr;
    read_verified(path, &r, storage);
    std::unique_ptr<Reader> reader(r);
    reader->get_u64();  // hash; re-derived from the json below
    return ModelConfig::from_json(reader->get_str(reader->get_u32()));
}

}  // namespace trm
