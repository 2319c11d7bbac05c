#pragma once

// Run-level plumbing behind the CLI verbs: task setup, the train loop with
// run directories / resume, end-to-end eval with report + dump emission,
// report comparison, and the parameter-count audit.

#include <string>
#include <vector>

#include "trm/augeval.hpp"
#include "trm/trainer.hpp"

namespace trm {

struct TaskConfig {
    std::string name = "sudoku4";  // sudoku4 | sudoku9 | maze9 | maze15 | arclike
    int sudoku_givens = 10;
    std::string arc_rule = "mirror_h";
    int arc_rows = 5, arc_cols = 5, arc_colours = 6;

    void validate() const;
};

// Seq len / vocab / structural-token prefix implied by the task.
struct TaskInfo {
    int64_t seq_len = 0;
    Vocab vocab;
    int first_permutable = 0;
};
TaskInfo task_info(const TaskConfig& task);
std::vector<PuzzleInstance> generate_task_data(const TaskConfig& task, int count, uint64_t seed);

struct RunConfig {
    TaskConfig task;
    ModelConfig model;
    TrainConfig train;
    int n_train = 2000;
    int n_held_out = 200;
    uint64_t data_seed = 1;

    // eval settings
    int n_aug = 64;
    uint64_t aug_seed = 0;
    std::vector<int> ks = {1, 2, 5, 10, 100, 1000};
    double compare_threshold = 0.15;
    int eval_threads = 1;
    int eval_batch = 16;

    std::string run_dir;

    // Resolves seq_len / vocab from the task and validates everything.
    void finalize();
    std::string to_text() const;  // the `config` file written into run dirs
};

struct TrainOutcome {
    double final_loss = 0;
    double held_out_exact = 0;
    int64_t steps = 0;
    std::string checkpoint_path;
};
// Creates run_dir/{config, checkpoints/, metrics.csv}; resumes from
// checkpoints/latest.bin when present.
TrainOutcome cmd_train(RunConfig cfg);

// Loads the checkpoint (EMA weights), evaluates the dataset, and writes
// report.json / report.csv / dump.ndjson into out_dir (written atomically).
EvalReport cmd_eval(const std::string& checkpoint_path, const std::string& dataset_path,
                    const RunConfig& cfg, const std::string& out_dir);

// Re-aggregates two prediction dumps over one dataset and stratifies.
// Writes comparison JSON + CSV into out_dir.
StratifiedReport cmd_compare(const std::string& dump_a, const std::string& dump_b,
                             const std::string& dataset_path, const RunConfig& cfg,
                             const std::string& out_dir);

// Per-tensor and per-block parameter table; at the paper-scale configuration
// it appends deltas against the reference totals.
std::string paramcount_table(const ModelConfig& cfg);

inline constexpr double kRefParamsTrmAttn = 6.83e6;
inline constexpr double kRefParamsTrMamba2Attn = 6.86e6;

void cmd_gen_data(const TaskConfig& task, int count, uint64_t seed, const std::string& path);

// Tiny TOML-style (key = value) round-trip used for run configs.
void write_text_file_atomic(const std::string& path, const std::string& content);

}  // namespace trm
