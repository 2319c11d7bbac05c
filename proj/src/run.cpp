#include "trm/run.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace fs = std::filesystem;

namespace trm {

void TaskConfig::validate() const {
    if (name != "sudoku4" && name != "sudoku9" && name != "maze9" && name != "maze15" &&
        name != "arclike")
        throw std::invalid_argument("task: unknown task '" + name +
                                    "' (expected sudoku4|sudoku9|maze9|maze15|arclike)");
    if (name == "sudoku4" && (sudoku_givens < 0 || sudoku_givens > 16))
        throw std::invalid_argument("task.sudoku_givens: out of range for 4x4");
    if (name == "sudoku9" && (sudoku_givens < 0 || sudoku_givens > 81))
        throw std::invalid_argument("task.sudoku_givens: out of range for 9x9");
    if (name == "arclike") {
        arc_rule_from_string(arc_rule);  // throws with the bad value
        if (arc_rows < 1 || arc_rows > 10 || arc_cols < 1 || arc_cols > 10)
            throw std::invalid_argument("task.arc_rows/arc_cols: must be in [1,10]");
        if (arc_colours < 2 || arc_colours > 12)
            throw std::invalid_argument("task.arc_colours: must be in [2,12]");
    }
}

TaskInfo task_info(const TaskConfig& task) {
    task.validate();
    if (task.name == "sudoku4") return {16, sudoku_vocab(4), 1};
    if (task.name == "sudoku9") return {81, sudoku_vocab(9), 1};
    if (task.name == "maze9") return {81, maze_vocab(), maze_vocab().n_values};
    if (task.name == "maze15") return {225, maze_vocab(), maze_vocab().n_values};
    return {static_cast<int64_t>(task.arc_rows) * task.arc_cols, arclike_vocab(task.arc_colours),
            0};
}

std::vector<PuzzleInstance> generate_task_data(const TaskConfig& task, int count, uint64_t seed) {
    task.validate();
    if (task.name == "sudoku4") return gen_sudoku(4, task.sudoku_givens, count, seed);
    if (task.name == "sudoku9") return gen_sudoku(9, task.sudoku_givens, count, seed);
    if (task.name == "maze9") return gen_maze(9, count, seed);
    if (task.name == "maze15") return gen_maze(15, count, seed);
    return gen_arclike(arc_rule_from_string(task.arc_rule), task.arc_rows, task.arc_cols,
                       task.arc_colours, count, seed);
}

void RunConfig::finalize() {
    task.validate();
    train.validate();
    const TaskInfo info = task_info(task);
    model.seq_len = info.seq_len;
    model.vocab_size = info.vocab.size();
    model.validate();
    if (n_train < 1 || n_held_out < 0)
        throw std::invalid_argument("n_train must be >= 1 and n_held_out >= 0");
    if (n_aug < 1) throw std::invalid_argument("n_aug must be >= 1");
    if (ks.empty()) throw std::invalid_argument("ks must be non-empty");
    if (compare_threshold < 0 || compare_threshold > 1)
        throw std::invalid_argument("compare_threshold must be in [0,1]");
}

std::string RunConfig::to_text() const {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "# resolved run configuration\n";
    os << "format_version = 1\n";
    os << "model_hash = \"" << std::hex << model.config_hash() << std::dec << "\"\n";
    os << "task = \"" << task.name << "\"\n";
    os << "sudoku_givens = " << task.sudoku_givens << "\n";
    os << "arc_rule = \"" << task.arc_rule << "\"\n";
    os << "arc_rows = " << task.arc_rows << "\n";
    os << "arc_cols = " << task.arc_cols << "\n";
    os << "arc_colours = " << task.arc_colours << "\n";
    os << "preset = \"" << model.preset << "\"\n";
    os << "d = " << model.d << "\n";
    os << "heads = " << model.heads << "\n";
    os << "seq_len = " << model.seq_len << "\n";
    os << "vocab_size = " << model.vocab_size << "\n";
    os << "h_cycles = " << model.h_cycles << "\n";
    os << "l_cycles = " << model.l_cycles << "\n";
    os << "deep_supervision_steps = " << model.deep_supervision_steps << "\n";
    os << "halt_threshold = " << model.halt_threshold << "\n";
    os << "d_state = " << model.d_state << "\n";
    os << "headdim = " << model.headdim << "\n";
    os << "expand = " << model.expand << "\n";
    os << "conv_width = " << model.conv_width << "\n";
    os << "mlp_expansion = " << model.mlp_expansion << "\n";
    os << "lr = " << train.lr << "\n";
    os << "warmup_steps = " << train.warmup_steps << "\n";
    os << "weight_decay = " << train.weight_decay << "\n";
    os << "batch_size = " << train.batch_size << "\n";
    os << "epochs = " << train.epochs << "\n";
    os << "ema_decay = " << train.ema_decay << "\n";
    os << "halt_weight = " << train.halt_weight << "\n";
    os << "seed = " << train.seed << "\n";
    os << "data_seed = " << data_seed << "\n";
    os << "n_train = " << n_train << "\n";
    os << "n_held_out = " << n_held_out << "\n";
    os << "n_aug = " << n_aug << "\n";
    os << "aug_seed = " << aug_seed << "\n";
    os << "compare_threshold = " << compare_threshold << "\n";
    return os.str();
}

void write_text_file_atomic(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::trunc);
        if (!f) throw std::runtime_error("cannot open " + tmp + " for writing");
        f << content;
        if (!f) throw std::runtime_error("write to " + tmp + " failed");
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw std::runtime_error("cannot move " + tmp + " into place");
}

TrainOutcome cmd_train(RunConfig cfg) {
    cfg.finalize();
    if (cfg.run_dir.empty()) throw std::invalid_argument("run_dir must be set for train");
    fs::create_directories(cfg.run_dir + "/checkpoints");
    write_text_file_atomic(cfg.run_dir + "/config", cfg.to_text());

    const TaskInfo info = task_info(cfg.task);
    const auto train_data = generate_task_data(cfg.task, cfg.n_train, cfg.data_seed);
    const auto held_out =
        generate_task_data(cfg.task, cfg.n_held_out, cfg.data_seed + 0x5eed);

    Model model(cfg.model, cfg.train.seed);
    auto opt = init_optimizer(model);
    auto ema = clone_params(model);

    const std::string latest = cfg.run_dir + "/checkpoints/latest.bin";
    const std::string metrics_path = cfg.run_dir + "/metrics.csv";
    const bool resuming = fs::exists(latest);
    if (resuming) load_checkpoint(latest, model, &ema, &opt);

    std::ofstream metrics(metrics_path, std::ios::app);
    if (!metrics) throw std::runtime_error("cannot open " + metrics_path);
    if (!resuming || fs::file_size(metrics_path) == 0)
        metrics << kMetricsCsvHeader << "\n";

    const int64_t steps_per_epoch =
        (static_cast<int64_t>(train_data.size()) + cfg.train.batch_size - 1) /
        cfg.train.batch_size;
    const int start_epoch = static_cast<int>(opt.step / steps_per_epoch);

    TrainOutcome out;
    for (int epoch = start_epoch; epoch < cfg.train.epochs; ++epoch) {
        const auto em = train_epoch(model, train_data, info.vocab, cfg.train, opt, ema, epoch,
                                    &metrics);
        metrics.flush();
        out.final_loss = em.loss;
        save_checkpoint(latest, model, ema, &opt);
    }
    out.steps = opt.step;
    out.held_out_exact = held_out.empty()
                             ? 0.0
                             : exact_match_accuracy(model, held_out, info.vocab,
                                                    cfg.train.batch_size);
    out.checkpoint_path = cfg.run_dir + "/checkpoints/final.bin";
    save_checkpoint(out.checkpoint_path, model, ema, &opt);
    return out;
}

EvalReport cmd_eval(const std::string& checkpoint_path, const std::string& dataset_path,
                    const RunConfig& cfg, const std::string& out_dir) {
    const TaskInfo info = task_info(cfg.task);
    const auto data = read_dataset(dataset_path);
    if (data.empty()) throw std::invalid_argument(dataset_path + " holds no instances");

    Model model(checkpoint_config(checkpoint_path), 0);
    load_checkpoint(checkpoint_path, model);
    for (const auto& p : data)
        if (static_cast<int64_t>(p.input.cells.size()) > model.config().seq_len)
            throw std::invalid_argument("instance " + p.id + " does not fit the model's seq_len");

    EvalOptions opt;
    opt.n_aug = cfg.n_aug;
    opt.aug_seed = cfg.aug_seed;
    opt.first_permutable = info.first_permutable;
    opt.batch_size = cfg.eval_batch;
    opt.threads = cfg.eval_threads;
    opt.ks = cfg.ks;

    std::vector<DumpRecord> dump;
    const EvalReport rep = evaluate(model, data, info.vocab, opt, &dump);

    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        const std::string dump_tmp = out_dir + "/dump.ndjson.tmp";
        write_dump(dump_tmp, dump);
        if (std::rename(dump_tmp.c_str(), (out_dir + "/dump.ndjson").c_str()) != 0)
            throw std::runtime_error("cannot move " + dump_tmp + " into place");
        write_text_file_atomic(out_dir + "/report.json", report_to_json(rep));
        write_text_file_atomic(out_dir + "/report.csv", report_to_csv(rep));
    }
    return rep;
}

namespace {

nlohmann::json stratum_json(const StratumResult& s) {
    nlohmann::json j;
    j["n"] = s.n;
    for (const auto& [k, v] : s.pass_a) {
        j["pass_a"][std::to_string(k)] = v;
        j["pass_b"][std::to_string(k)] = s.pass_b.at(k);
        j["delta_b_minus_a"][std::to_string(k)] = s.pass_b.at(k) - v;
    }
    return j;
}

}  // namespace

StratifiedReport cmd_compare(const std::string& dump_a, const std::string& dump_b,
                             const std::string& dataset_path, const RunConfig& cfg,
                             const std::string& out_dir) {
    const TaskInfo info = task_info(cfg.task);
    const auto data = read_dataset(dataset_path);
    EvalOptions opt;
    opt.n_aug = cfg.n_aug;
    opt.aug_seed = cfg.aug_seed;
    opt.first_permutable = info.first_permutable;
    opt.ks = cfg.ks;
    const auto rep_a = reaggregate(read_dump(dump_a), data, info.vocab, opt);
    const auto rep_b = reaggregate(read_dump(dump_b), data, info.vocab, opt);
    const auto strat = stratify_by_difficulty(rep_a.tables, rep_b.tables,
                                              cfg.compare_threshold, cfg.ks);
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        nlohmann::json j;
        j["threshold"] = strat.threshold;
        j["hard"] = stratum_json(strat.hard);
        j["easy"] = stratum_json(strat.easy);
        for (const auto& [k, d] : strat.solved) {
            auto& e = j["solved_sets"][std::to_string(k)];
            e["both"] = d.both;
            e["a_only"] = d.a_only;
            e["b_only"] = d.b_only;
        }
        write_text_file_atomic(out_dir + "/compare.json", j.dump(2));

        std::ostringstream csv;
        csv << "input_id,difficulty,stratum,rank_a,rank_b\n";
        for (size_t i = 0; i < rep_a.tables.size(); ++i)
            csv << rep_a.tables[i].input_id << "," << strat.difficulty[i] << ","
                << (strat.difficulty[i] < strat.threshold ? "hard" : "easy") << ","
                << correct_rank(rep_a.tables[i]) << "," << correct_rank(rep_b.tables[i]) << "\n";
        write_text_file_atomic(out_dir + "/compare.csv", csv.str());
    }
    return strat;
}

std::string paramcount_table(const ModelConfig& cfg) {
    cfg.validate();
    Model model(cfg, 0);
    std::ostringstream os;
    os << "parameter audit: preset " << cfg.preset << ", d=" << cfg.d
       << ", d_state=" << cfg.d_state << ", headdim=" << cfg.headdim
       << ", expand=" << cfg.expand << ", seq_len=" << cfg.seq_len << "\n";
    int64_t audit_total = 0;
    for (const auto& row : audit_block_stack(cfg.preset, cfg.mixer_base())) {
        os << "  " << std::left << std::setw(28) << row.label << std::right << std::setw(12)
           << row.count << "\n";
        audit_total += row.count;
    }
    const int64_t extras[] = {model.tok_emb.value.size(), model.pos_emb.value.size(),
                              model.lm_w.value.size() + model.lm_b.value.size(),
                              model.halt_w.value.size() + model.halt_b.value.size()};
    const char* labels[] = {"tok_emb", "pos_emb", "lm_head", "halt_head"};
    for (int i = 0; i < 4; ++i) {
        os << "  " << std::left << std::setw(28) << labels[i] << std::right << std::setw(12)
           << extras[i] << "\n";
        audit_total += extras[i];
    }
    const int64_t counted = model.param_count();
    os << "  " << std::left << std::setw(28) << "TOTAL (audit)" << std::right << std::setw(12)
       << audit_total << "\n";
    os << "  " << std::left << std::setw(28) << "TOTAL (counted)" << std::right << std::setw(12)
       << counted << "\n";
    if (audit_total != counted)
        throw std::logic_error("parameter audit disagrees with counted parameters");

    // reference comparison at the paper-scale configuration
    if (cfg.d == 512 && cfg.d_state == 128 && cfg.headdim == 64 && cfg.expand == 2) {
        const double ref = cfg.preset == "trm_attn" ? kRefParamsTrmAttn
                           : cfg.preset == "tr_mamba2attn" ? kRefParamsTrMamba2Attn
                                                           : 0.0;
        if (ref > 0) {
            const double delta = 100.0 * (static_cast<double>(counted) - ref) / ref;
            os << "  reference total " << static_cast<int64_t>(ref) << ", delta "
               << std::fixed << std::setprecision(2) << delta << "%\n";
        }
    }
    return os.str();
}

void cmd_gen_data(const TaskConfig& task, int count, uint64_t seed, const std::string& path) {
    const auto data = generate_task_data(task, count, seed);
    const std::string tmp = path + ".tmp";
    write_dataset(tmp, data);
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw std::runtime_error("cannot move " + tmp + " into place");
}

}  // namespace trm
