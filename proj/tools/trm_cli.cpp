// Command-line entry point: train / eval / compare / paramcount / gen-data.

#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "trm/run.hpp"

using namespace trm;

namespace {

void add_task_options(CLI::App* cmd, TaskConfig& task, bool required) {
    auto* t = cmd->add_option("--task", task.name,
                              "task: sudoku4 | sudoku9 | maze9 | maze15 | arclike");
    if (required) t->required();
    cmd->add_option("--givens", task.sudoku_givens, "sudoku: number of given cells");
    cmd->add_option("--arc-rule", task.arc_rule,
                    "arclike rule: mirror_h | mirror_v | rot180 | colour_cycle");
    cmd->add_option("--arc-rows", task.arc_rows, "arclike grid rows");
    cmd->add_option("--arc-cols", task.arc_cols, "arclike grid cols");
    cmd->add_option("--arc-colours", task.arc_colours, "arclike colour count");
}

void add_model_options(CLI::App* cmd, ModelConfig& m) {
    cmd->add_option("--preset", m.preset,
                    "mixer preset: trm_attn | tr_mamba2attn | tr_mamba2mlpt | trm_mlpt");
    cmd->add_option("--d", m.d, "model width");
    cmd->add_option("--heads", m.heads, "attention heads");
    cmd->add_option("--h-cycles", m.h_cycles, "outer recursion cycles");
    cmd->add_option("--l-cycles", m.l_cycles, "inner recursion cycles");
    cmd->add_option("--sup-steps", m.deep_supervision_steps, "deep supervision steps");
    cmd->add_option("--halt-threshold", m.halt_threshold, "halting probability threshold");
    cmd->add_option("--d-state", m.d_state, "mamba2 state size");
    cmd->add_option("--headdim", m.headdim, "mamba2 head dim");
    cmd->add_option("--expand", m.expand, "mamba2 expansion");
    cmd->add_option("--mlp-expansion", m.mlp_expansion, "mlp nominal expansion");
}

void add_eval_options(CLI::App* cmd, RunConfig& cfg) {
    cmd->add_option("--n-aug", cfg.n_aug, "augmentations per input");
    cmd->add_option("--aug-seed", cfg.aug_seed, "augmentation enumeration seed");
    cmd->add_option("--ks", cfg.ks, "pass@K values");
    cmd->add_option("--eval-threads", cfg.eval_threads, "eval worker threads");
    cmd->add_option("--eval-batch", cfg.eval_batch, "eval inference batch size");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Recursive latent-reasoning models with swappable mixers"};
    app.require_subcommand(1);
    app.set_config("--config", "", "TOML-style config file (flags override it)");

    RunConfig cfg;

    auto* train = app.add_subcommand("train", "train a model into a run directory");
    add_task_options(train, cfg.task, /*required=*/true);
    add_model_options(train, cfg.model);
    train->add_option("--run-dir", cfg.run_dir, "run directory")->required();
    train->add_option("--lr", cfg.train.lr, "learning rate");
    train->add_option("--warmup-steps", cfg.train.warmup_steps, "lr warmup steps");
    train->add_option("--weight-decay", cfg.train.weight_decay, "decoupled weight decay");
    train->add_option("--batch-size", cfg.train.batch_size, "batch size");
    train->add_option("--epochs", cfg.train.epochs, "epochs");
    train->add_option("--ema-decay", cfg.train.ema_decay, "weight EMA decay");
    train->add_option("--halt-weight", cfg.train.halt_weight, "halt loss weight");
    train->add_option("--seed", cfg.train.seed, "training seed");
    train->add_option("--data-seed", cfg.data_seed, "dataset generation seed");
    train->add_option("--n-train", cfg.n_train, "training instances");
    train->add_option("--n-held-out", cfg.n_held_out, "held-out instances");

    std::string checkpoint, dataset, out_dir, dump_a, dump_b;
    auto* eval = app.add_subcommand("eval", "augmented evaluation of a checkpoint");
    add_task_options(eval, cfg.task, /*required=*/true);
    eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    eval->add_option("--dataset", dataset, "ndjson dataset")->required();
    eval->add_option("--out-dir", out_dir, "where report.json/report.csv/dump.ndjson go");
    add_eval_options(eval, cfg);

    auto* compare = app.add_subcommand("compare", "stratified comparison of two dumps");
    add_task_options(compare, cfg.task, /*required=*/true);
    compare->add_option("--dump-a", dump_a, "prediction dump of model A")->required();
    compare->add_option("--dump-b", dump_b, "prediction dump of model B")->required();
    compare->add_option("--dataset", dataset, "ndjson dataset")->required();
    compare->add_option("--threshold", cfg.compare_threshold,
                        "correct-vote-share stratification threshold");
    compare->add_option("--out-dir", out_dir, "where compare.json/compare.csv go");
    add_eval_options(compare, cfg);

    auto* paramcount = app.add_subcommand("paramcount", "parameter audit table");
    add_model_options(paramcount, cfg.model);
    paramcount->add_option("--seq-len", cfg.model.seq_len, "sequence length");
    paramcount->add_option("--vocab-size", cfg.model.vocab_size, "vocabulary size");
    // paper-scale defaults so the reference comparison appears out of the box
    cfg.model.d = 512;
    cfg.model.heads = 8;
    cfg.model.d_state = 128;
    cfg.model.headdim = 64;
    cfg.model.seq_len = 900;
    cfg.model.vocab_size = 12;

    int count = 1000;
    auto* gen = app.add_subcommand("gen-data", "generate a dataset file");
    add_task_options(gen, cfg.task, /*required=*/true);
    gen->add_option("--count", count, "instances to generate");
    gen->add_option("--seed", cfg.data_seed, "generation seed");
    gen->add_option("--out", dataset, "output ndjson path")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) {
            const auto out = cmd_train(cfg);
            std::printf("trained %lld steps, final loss %.4f, held-out exact match %.4f\n",
                        static_cast<long long>(out.steps), out.final_loss, out.held_out_exact);
            std::printf("checkpoint: %s\n", out.checkpoint_path.c_str());
        } else if (eval->parsed()) {
            const auto rep = cmd_eval(checkpoint, dataset, cfg, out_dir);
            for (const auto& [k, v] : rep.pass_at_k) std::printf("pass@%d %.4f\n", k, v);
            std::printf("mean unique %.2f, entropy %.3f bits, top1 share %.3f, margin %.3f\n",
                        rep.mean_unique, rep.mean_entropy, rep.mean_top1_share,
                        rep.mean_top1_margin);
            if (rep.decode_errors)
                std::printf("decode errors: %d augmentations skipped\n", rep.decode_errors);
        } else if (compare->parsed()) {
            const auto strat = cmd_compare(dump_a, dump_b, dataset, cfg, out_dir);
            std::printf("threshold %.2f: hard n=%d, easy n=%d\n", strat.threshold, strat.hard.n,
                        strat.easy.n);
            for (const auto& [k, d] : strat.solved)
                std::printf("K=%d solved: both %d, A-only %d, B-only %d\n", k, d.both, d.a_only,
                            d.b_only);
        } else if (paramcount->parsed()) {
            std::fputs(paramcount_table(cfg.model).c_str(), stdout);
        } else if (gen->parsed()) {
            cmd_gen_data(cfg.task, count, cfg.data_seed, dataset);
            std::printf("wrote %d instances to %s\n", count, dataset.c_str());
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
