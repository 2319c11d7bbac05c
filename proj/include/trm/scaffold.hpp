#pragma once

// The recursion scaffold: a latent pair (z_H, z_L) refined by one shared
// block stack over H outer x L inner cycles, with LM and halt heads and
// deep-supervision training steps.

#include <functional>
#include <string>
#include <vector>

#include "trm/mixers.hpp"

namespace trm {

struct ModelConfig {
    std::string preset = "tr_mamba2attn";
    int64_t d = 64;
    int heads = 4;
    int64_t seq_len = 16;
    int64_t vocab_size = 6;
    int h_cycles = 3;
    int l_cycles = 4;
    int deep_supervision_steps = 4;
    bool halt_enabled = true;
    double halt_threshold = 0.5;
    bool use_pos_emb = true;
    NormPlacement norm_placement = NormPlacement::post;
    // mamba2 / mlp details
    int64_t d_state = 16;
    int64_t headdim = 32;
    int64_t expand = 2;
    int conv_width = 4;
    int mlp_expansion = 4;

    void validate() const;
    MixerConfig mixer_base() const;
    std::string to_json() const;
    static ModelConfig from_json(const std::string& j);
    uint64_t config_hash() const;  // checkpoint compatibility stamp
};

struct LatentState {
    DArray z_h;    // [b, s, d]
    DArray z_l;    // [b, s, d]
    DArray x_emb;  // embedded input, fixed across the recursion
};

// A tokenized training/eval batch. tokens/targets are [b, s] row-major;
// loss_mask is 1 for supervised (non-PAD) positions.
struct Batch {
    int64_t b = 0;
    int64_t s = 0;
    std::vector<int> tokens;
    std::vector<int> targets;
    std::vector<double> loss_mask;
};

class Model {
public:
    Model(ModelConfig cfg, uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    BlockStack& stack() { return stack_; }

    // Stable-ordered view of every learnable parameter.
    std::vector<Param*> params();
    int64_t param_count();
    void zero_grad();

    // tokens: [b, s] ints -> [b, s, d]. Token + learned position embedding.
    Tape::Var embed_input(Tape& t, const std::vector<int>& tokens, int64_t b);

    // Full H x L schedule; conditioning is additive injection into f's input.
    std::pair<Tape::Var, Tape::Var> recursion_step(Tape& t, Tape::Var z_h, Tape::Var z_l,
                                                   Tape::Var x_emb);
    std::pair<Tape::Var, Tape::Var> recursion_step(Tape& t, Tape::Var z_h, Tape::Var z_l,
                                                   Tape::Var x_emb, int h_cycles, int l_cycles);

    // -> (logits [b, s, vocab], halt_logit [b])
    std::pair<Tape::Var, Tape::Var> output_heads(Tape& t, Tape::Var z_h);

    LatentState initial_state(int64_t b) const;  // zero latents, empty x_emb

    Param tok_emb, pos_emb, lm_w, lm_b, halt_w, halt_b;

private:
    ModelConfig cfg_;
    BlockStack stack_;
};

bool halt_decision(double halt_logit, double threshold, int step, int max_steps);

struct SupervisionStepResult {
    double loss = 0.0;
    double lm_loss = 0.0;
    double halt_loss = 0.0;
    double token_acc = 0.0;
    std::vector<uint8_t> exact;       // per batch item, current argmax == target
    std::vector<double> halt_logits;  // per batch item
};

// Repeats {recursion -> heads -> loss [-> backward]} n_steps times. Latents
// carry over detached between steps, so gradients of step k never reach
// parameters through step k-1. per_step runs after each step's backward
// (optimizer hook); pass nullptr when training updates are external.
std::vector<SupervisionStepResult> deep_supervision_step(
    Model& model, const Batch& batch, int n_steps, double halt_loss_weight, bool compute_grads,
    const std::function<void(int)>& per_step = nullptr);

// Inference: runs recursion steps with the halt rule until halt or
// max_steps, grad-free. Returns final logits and per-item mean log-prob of
// the argmax tokens over masked positions.
struct InferResult {
    DArray logits;                    // [b, s, vocab]
    std::vector<int> argmax;          // [b, s]
    std::vector<double> mean_logprob; // [b], over loss_mask positions
    std::vector<int> steps_used;      // [b]
};
InferResult infer(Model& model, const Batch& batch, int max_steps);

}  // namespace trm
