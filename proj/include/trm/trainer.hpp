#pragma once

// Optimization loop: loss assembly, decoupled-weight-decay adaptive-moment
// optimizer with linear warmup, EMA of weights, checkpointing, CSV metrics.

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "trm/puzzles.hpp"
#include "trm/scaffold.hpp"

namespace trm {

struct TrainConfig {
    double lr = 1e-3;
    int warmup_steps = 100;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    int batch_size = 32;
    int epochs = 10;
    double ema_decay = 0.999;
    uint64_t seed = 0;
    double lm_weight = 1.0;
    double halt_weight = 0.5;

    void validate() const;
};

struct OptimizerState {
    std::vector<DArray> m, v;  // first/second moments, mirroring params
    int64_t step = 0;
};

OptimizerState init_optimizer(Model& model);

// loss = lm_weight * CE(logits, targets | mask) + halt_weight * BCE(halt, halt_target).
// Throws if the mask is all zero (an all-PAD batch supervises nothing).
struct LossParts {
    Tape::Var total, lm, halt;
};
LossParts compute_loss(Tape& t, Tape::Var logits, Tape::Var halt_logit,
                       const std::vector<int>& targets, const std::vector<double>& pad_mask,
                       const std::vector<double>& halt_target, double lm_weight,
                       double halt_weight);

// One decoupled-weight-decay Adam step on accumulated gradients, with linear
// warmup of the learning rate over cfg.warmup_steps.
void adamw_step(const std::vector<Param*>& params, OptimizerState& opt, const TrainConfig& cfg);

// ema <- decay * ema + (1 - decay) * params
void ema_update(const std::vector<Param*>& params, std::vector<DArray>& ema, double decay);
std::vector<DArray> clone_params(Model& model);
void assign_params(Model& model, const std::vector<DArray>& values);

Batch make_batch(const std::vector<PuzzleInstance>& data, const std::vector<size_t>& indices,
                 const Vocab& vocab, int64_t seq_len);

struct StepMetrics {
    int64_t step = 0;
    double loss = 0, lm_loss = 0, halt_loss = 0, token_acc = 0, exact_acc = 0;
};
struct EpochMetrics {
    double loss = 0, lm_loss = 0, halt_loss = 0, token_acc = 0, exact_acc = 0;
    int64_t steps = 0;
};

inline const char* kMetricsCsvHeader = "step,loss,lm_loss,halt_loss,token_acc,exact_acc";

// One seeded-shuffle pass over the data; per-batch deep supervision with
// gradient accumulation over supervision steps and one optimizer step per
// batch. Appends one CSV row per optimizer step when metrics_out is given.
EpochMetrics train_epoch(Model& model, const std::vector<PuzzleInstance>& data,
                         const Vocab& vocab, const TrainConfig& cfg, OptimizerState& opt,
                         std::vector<DArray>& ema, int epoch_index,
                         std::ostream* metrics_out = nullptr);

// Plain exact-match accuracy (argmax equals target on every grid cell).
double exact_match_accuracy(Model& model, const std::vector<PuzzleInstance>& data,
                            const Vocab& vocab, int batch_size = 32);

// Binary checkpoint: magic + version + config (json + hash) + named
// parameter blobs + EMA + optional optimizer state + trailing checksum.
// Written atomically (temp file + rename).
void save_checkpoint(const std::string& path, Model& model, const std::vector<DArray>& ema,
                     const OptimizerState* opt = nullptr);
// Refuses version/config-hash mismatches and corrupt payloads; loads nothing
// partially. ema/opt may be null when the caller does not need them.
void load_checkpoint(const std::string& path, Model& model, std::vector<DArray>* ema = nullptr,
                     OptimizerState* opt = nullptr);
// Reads just the embedded ModelConfig (to construct a Model to load into).
ModelConfig checkpoint_config(const std::string& path);

}  // namespace trm
