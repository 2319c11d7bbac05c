#include "trm/augeval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>
#include <unordered_map>

#include <json.hpp>

#include "trm/rng.hpp"

namespace trm {

namespace {

Grid rot90_cw(const Grid& g) {
    Grid out{g.cols, g.rows, std::vector<int>(g.cells.size())};
    for (int r = 0; r < out.rows; ++r)
        for (int c = 0; c < out.cols; ++c) out.at(r, c) = g.at(g.rows - 1 - c, r);
    return out;
}

Grid reflect_h(const Grid& g) {  // flip columns
    Grid out = g;
    for (int r = 0; r < g.rows; ++r)
        for (int c = 0; c < g.cols; ++c) out.at(r, c) = g.at(r, g.cols - 1 - c);
    return out;
}

Grid map_colours(const Grid& g, const std::vector<int>& perm) {
    if (perm.empty()) return g;
    Grid out = g;
    for (auto& v : out.cells) {
        if (v < 0 || v >= static_cast<int>(perm.size()))
            throw std::invalid_argument("cell value " + std::to_string(v) +
                                        " outside the colour permutation domain of size " +
                                        std::to_string(perm.size()));
        v = perm[v];
    }
    return out;
}

std::vector<int> invert_perm(const std::vector<int>& perm) {
    std::vector<int> inv(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = static_cast<int>(i);
    return inv;
}

}  // namespace

std::pair<int, int> transformed_shape(int rows, int cols, const AugmentationSpec& spec) {
    return (spec.d8 % 4) % 2 == 1 ? std::pair{cols, rows} : std::pair{rows, cols};
}

Grid apply_transform(const Grid& g, const AugmentationSpec& spec) {
    Grid out = (spec.d8 >= 4) ? reflect_h(g) : g;
    for (int k = 0; k < spec.d8 % 4; ++k) out = rot90_cw(out);
    return map_colours(out, spec.colour_perm);
}

Grid invert_transform(const Grid& g, const AugmentationSpec& spec) {
    Grid out = spec.colour_perm.empty() ? g : map_colours(g, invert_perm(spec.colour_perm));
    for (int k = 0; k < (4 - spec.d8 % 4) % 4; ++k) out = rot90_cw(out);
    return (spec.d8 >= 4) ? reflect_h(out) : out;
}

std::vector<AugmentationSpec> enumerate_augmentations(int n_aug, int colours, uint64_t seed,
                                                      int first_permutable) {
    if (n_aug < 1) throw std::invalid_argument("n_aug must be >= 1");
    if (colours < 1 || first_permutable < 0 || first_permutable > colours)
        throw std::invalid_argument("bad colour alphabet / first_permutable");

    // distinct spec space: 8 dihedral elements x permutations of the
    // permutable colours (saturating factorial to avoid overflow)
    uint64_t perms = 1;
    for (int i = 2; i <= colours - first_permutable && perms < (1ull << 40); ++i) perms *= i;
    if (static_cast<uint64_t>(n_aug) > 8 * perms)
        throw std::invalid_argument("n_aug=" + std::to_string(n_aug) + " exceeds the " +
                                    std::to_string(8 * perms) + " distinct augmentation specs");

    std::vector<int> identity(colours);
    for (int i = 0; i < colours; ++i) identity[i] = i;

    std::vector<AugmentationSpec> specs;
    specs.reserve(n_aug);
    for (int i = 0; i < std::min(n_aug, 8); ++i)
        specs.push_back({i, identity, first_permutable});

    Rng rng(seed);
    std::vector<std::set<std::vector<int>>> seen(8);
    for (int d = 0; d < 8; ++d) seen[d].insert(identity);
    for (int i = 8; i < n_aug; ++i) {
        const int d8 = i % 8;
        std::vector<int> perm;
        do {
            std::vector<int> tail(identity.begin() + first_permutable, identity.end());
            rng.shuffle(tail);
            perm = identity;
            std::copy(tail.begin(), tail.end(), perm.begin() + first_permutable);
        } while (!seen[d8].insert(perm).second);
        specs.push_back({d8, std::move(perm), first_permutable});
    }
    return specs;
}

uint64_t grid_hash(const Grid& g) {
    uint64_t h = 1469598103934665603ull;
    auto mix = [&h](uint64_t x) {
        for (int i = 0; i < 8; ++i) {
            h ^= (x >> (8 * i)) & 0xff;
            h *= 1099511628211ull;
        }
    };
    mix(static_cast<uint64_t>(g.rows));
    mix(static_cast<uint64_t>(g.cols));
    for (int c : g.cells) mix(static_cast<uint64_t>(c));
    return h;
}

VoteTable aggregate_votes(const std::vector<std::pair<Grid, double>>& predictions,
                          const std::vector<AugmentationSpec>& specs, bool invert,
                          const Grid& correct, const std::string& input_id) {
    if (predictions.size() != specs.size())
        throw std::invalid_argument("aggregate_votes: " + std::to_string(predictions.size()) +
                                    " predictions for " + std::to_string(specs.size()) +
                                    " specs");
    VoteTable t;
    t.input_id = input_id;
    t.correct = correct;

    std::unordered_map<uint64_t, std::vector<size_t>> by_hash;
    for (size_t i = 0; i < predictions.size(); ++i) {
        Grid g = invert ? invert_transform(predictions[i].first, specs[i])
                        : predictions[i].first;
        const uint64_t h = grid_hash(g);
        auto& bucket = by_hash[h];
        size_t idx = t.ranked.size();
        for (size_t j : bucket)
            if (t.ranked[j].grid == g) {
                idx = j;
                break;
            }
        if (idx == t.ranked.size()) {
            t.ranked.push_back({std::move(g), 0, 0.0, h});
            bucket.push_back(idx);
        }
        t.ranked[idx].votes += 1;
        t.ranked[idx].conf_sum += predictions[i].second;
        t.total_votes += 1;
    }
    std::sort(t.ranked.begin(), t.ranked.end(),
              [](const CandidateRecord& a, const CandidateRecord& b) {
                  if (a.votes != b.votes) return a.votes > b.votes;
                  const double ca = a.avg_conf(), cb = b.avg_conf();
                  if (ca != cb) return ca > cb;
                  if (a.hash != b.hash) return a.hash < b.hash;
                  return a.grid.cells < b.grid.cells;  // hash-collision fallback
              });
    return t;
}

int correct_rank(const VoteTable& t) {
    for (size_t i = 0; i < t.ranked.size(); ++i)
        if (t.ranked[i].grid == t.correct) return static_cast<int>(i) + 1;
    return 0;
}

std::map<int, double> pass_at_k(const std::vector<VoteTable>& tables,
                                const std::vector<int>& ks) {
    std::map<int, double> out;
    for (int k : ks) out[k] = 0.0;
    if (tables.empty()) return out;
    for (const auto& t : tables) {
        const int rank = correct_rank(t);
        for (int k : ks)
            if (rank > 0 && rank <= k) out[k] += 1.0;
    }
    for (auto& [k, v] : out) v /= static_cast<double>(tables.size());
    return out;
}

CandidateStats candidate_stats(const VoteTable& t) {
    CandidateStats s;
    s.unique_candidates = static_cast<int>(t.ranked.size());
    if (t.ranked.empty() || t.total_votes == 0) return s;
    for (const auto& c : t.ranked) {
        const double p = static_cast<double>(c.votes) / t.total_votes;
        s.vote_entropy_bits -= p * std::log2(p);
    }
    s.top1_vote_share = static_cast<double>(t.ranked[0].votes) / t.total_votes;
    s.top1_margin = (t.ranked.size() == 1)
                        ? s.top1_vote_share  // share(rank1) - 0
                        : s.top1_vote_share -
                              static_cast<double>(t.ranked[1].votes) / t.total_votes;
    return s;
}

double correct_vote_share(const VoteTable& t) {
    if (t.total_votes == 0) return 0.0;
    const int r = correct_rank(t);
    return r == 0 ? 0.0
                  : static_cast<double>(t.ranked[r - 1].votes) / t.total_votes;
}

StratifiedReport stratify_by_difficulty(const std::vector<VoteTable>& a,
                                        const std::vector<VoteTable>& b, double threshold,
                                        const std::vector<int>& ks) {
    if (a.size() != b.size())
        throw std::invalid_argument("stratify: table counts differ");
    for (size_t i = 0; i < a.size(); ++i)
        if (a[i].input_id != b[i].input_id)
            throw std::invalid_argument("stratify: input id mismatch at index " +
                                        std::to_string(i) + " (" + a[i].input_id + " vs " +
                                        b[i].input_id + ")");
    StratifiedReport rep;
    rep.threshold = threshold;
    for (int k : ks) {
        rep.hard.pass_a[k] = rep.hard.pass_b[k] = 0.0;
        rep.easy.pass_a[k] = rep.easy.pass_b[k] = 0.0;
        rep.solved[k] = {};
    }
    for (size_t i = 0; i < a.size(); ++i) {
        const double diff = 0.5 * (correct_vote_share(a[i]) + correct_vote_share(b[i]));
        rep.difficulty.push_back(diff);
        auto& stratum = (diff < threshold) ? rep.hard : rep.easy;
        stratum.n += 1;
        const int ra = correct_rank(a[i]), rb = correct_rank(b[i]);
        for (int k : ks) {
            const bool sa = ra > 0 && ra <= k, sb = rb > 0 && rb <= k;
            stratum.pass_a[k] += sa;
            stratum.pass_b[k] += sb;
            if (sa && sb) rep.solved[k].both += 1;
            else if (sa) rep.solved[k].a_only += 1;
            else if (sb) rep.solved[k].b_only += 1;
        }
    }
    for (auto* s : {&rep.hard, &rep.easy})
        if (s->n > 0)
            for (int k : ks) {
                s->pass_a[k] /= s->n;
                s->pass_b[k] /= s->n;
            }
    return rep;
}

// --- end-to-end driver -------------------------------------------------

namespace {

struct SlotPred {
    std::vector<int> cells;  // transformed-space prediction; empty = decode failure
    double mean_logprob = 0;
};

// Per-instance inference over all specs, batched. Read-only on the model.
std::vector<SlotPred> infer_instance(Model& model, const PuzzleInstance& inst,
                                     const std::vector<AugmentationSpec>& specs,
                                     const Vocab& vocab, int batch_size, int max_steps) {
    const int64_t s = model.config().seq_len;
    std::vector<SlotPred> preds(specs.size());
    for (size_t base = 0; base < specs.size(); base += batch_size) {
        const int64_t bsz = std::min<size_t>(batch_size, specs.size() - base);
        Batch batch;
        batch.b = bsz;
        batch.s = s;
        batch.tokens.reserve(bsz * s);
        batch.targets.assign(bsz * s, 0);
        batch.loss_mask.reserve(bsz * s);
        for (int64_t j = 0; j < bsz; ++j) {
            const Grid tg = apply_transform(inst.input, specs[base + j]);
            const auto toks = tokenize_grid(tg, vocab, s);
            batch.tokens.insert(batch.tokens.end(), toks.begin(), toks.end());
            const auto mask = loss_mask_for(tg, s);
            batch.loss_mask.insert(batch.loss_mask.end(), mask.begin(), mask.end());
        }
        const auto res = infer(model, batch, max_steps);
        for (int64_t j = 0; j < bsz; ++j) {
            const auto [tr, tc] =
                transformed_shape(inst.input.rows, inst.input.cols, specs[base + j]);
            std::vector<int> toks(res.argmax.begin() + j * s, res.argmax.begin() + (j + 1) * s);
            auto& slot = preds[base + j];
            slot.mean_logprob = res.mean_logprob[j];
            try {
                slot.cells = detokenize_grid(toks, tr, tc, vocab).cells;
            } catch (const std::invalid_argument&) {
                slot.cells.clear();  // counted as a decode error downstream
            }
        }
    }
    return preds;
}

EvalReport build_report(std::vector<VoteTable> tables, int decode_errors,
                        const std::vector<int>& ks) {
    EvalReport rep;
    rep.decode_errors = decode_errors;
    rep.pass_at_k = pass_at_k(tables, ks);
    for (const auto& t : tables) {
        const auto s = candidate_stats(t);
        rep.mean_unique += s.unique_candidates;
        rep.mean_entropy += s.vote_entropy_bits;
        rep.mean_top1_share += s.top1_vote_share;
        rep.mean_top1_margin += s.top1_margin;
        rep.stats.push_back(s);
    }
    if (!tables.empty()) {
        const double n = static_cast<double>(tables.size());
        rep.mean_unique /= n;
        rep.mean_entropy /= n;
        rep.mean_top1_share /= n;
        rep.mean_top1_margin /= n;
    }
    rep.tables = std::move(tables);
    return rep;
}

VoteTable table_from_preds(const std::vector<SlotPred>& preds,
                           const std::vector<AugmentationSpec>& specs,
                           const PuzzleInstance& inst, int* decode_errors) {
    std::vector<std::pair<Grid, double>> ok;
    std::vector<AugmentationSpec> ok_specs;
    for (size_t j = 0; j < preds.size(); ++j) {
        if (preds[j].cells.empty()) {
            ++*decode_errors;
            continue;
        }
        const auto [tr, tc] = transformed_shape(inst.input.rows, inst.input.cols, specs[j]);
        ok.push_back({Grid{tr, tc, preds[j].cells}, preds[j].mean_logprob});
        ok_specs.push_back(specs[j]);
    }
    return aggregate_votes(ok, ok_specs, /*invert=*/true, inst.target, inst.id);
}

}  // namespace

EvalReport evaluate(Model& model, const std::vector<PuzzleInstance>& data, const Vocab& vocab,
                    const EvalOptions& opt, std::vector<DumpRecord>* dump) {
    const auto specs =
        enumerate_augmentations(opt.n_aug, vocab.n_values, opt.aug_seed, opt.first_permutable);
    const int max_steps =
        opt.max_steps > 0 ? opt.max_steps : model.config().deep_supervision_steps;

    // one slot per (instance, spec); threads never share a slot, and the
    // reduction below walks slots in fixed order
    std::vector<std::vector<SlotPred>> slots(data.size());
    const int n_threads = std::max(1, opt.threads);
    auto worker = [&](size_t t0) {
        for (size_t i = t0; i < data.size(); i += n_threads)
            slots[i] = infer_instance(model, data[i], specs, vocab, opt.batch_size, max_steps);
    };
    if (n_threads == 1) {
        worker(0);
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker, t);
        for (auto& th : pool) th.join();
    }

    int decode_errors = 0;
    std::vector<VoteTable> tables;
    tables.reserve(data.size());
    for (size_t i = 0; i < data.size(); ++i) {
        if (dump)
            for (size_t j = 0; j < specs.size(); ++j)
                dump->push_back({data[i].id, static_cast<int>(j), slots[i][j].cells,
                                 slots[i][j].mean_logprob});
        tables.push_back(table_from_preds(slots[i], specs, data[i], &decode_errors));
    }
    return build_report(std::move(tables), decode_errors, opt.ks);
}

EvalReport reaggregate(const std::vector<DumpRecord>& dump,
                       const std::vector<PuzzleInstance>& data, const Vocab& vocab,
                       const EvalOptions& opt) {
    const auto specs =
        enumerate_augmentations(opt.n_aug, vocab.n_values, opt.aug_seed, opt.first_permutable);
    std::unordered_map<std::string, std::vector<const DumpRecord*>> by_id;
    for (const auto& r : dump) {
        auto& v = by_id[r.input_id];
        if (v.empty()) v.resize(specs.size(), nullptr);
        if (r.spec_index < 0 || r.spec_index >= static_cast<int>(specs.size()))
            throw std::invalid_argument("dump spec_index " + std::to_string(r.spec_index) +
                                        " out of range for n_aug=" +
                                        std::to_string(specs.size()));
        v[r.spec_index] = &r;
    }
    int decode_errors = 0;
    std::vector<VoteTable> tables;
    for (const auto& inst : data) {
        auto it = by_id.find(inst.id);
        if (it == by_id.end())
            throw std::invalid_argument("dump has no predictions for input " + inst.id);
        std::vector<SlotPred> preds(specs.size());
        for (size_t j = 0; j < specs.size(); ++j) {
            if (!it->second[j])
                throw std::invalid_argument("dump missing spec " + std::to_string(j) +
                                            " for input " + inst.id);
            preds[j] = {it->second[j]->pred_cells, it->second[j]->mean_logprob};
        }
        tables.push_back(table_from_preds(preds, specs, inst, &decode_errors));
    }
    return build_report(std::move(tables), decode_errors, opt.ks);
}

void write_dump(const std::string& path, const std::vector<DumpRecord>& dump) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    for (const auto& r : dump) {
        nlohmann::json j;
        j["input_id"] = r.input_id;
        j["spec_index"] = r.spec_index;
        j["pred_cells"] = r.pred_cells;
        j["mean_logprob"] = r.mean_logprob;
        f << j.dump() << "\n";
    }
    if (!f) throw std::runtime_error("write to " + path + " failed");
}

std::vector<DumpRecord> read_dump(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    std::vector<DumpRecord> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        out.push_back({j.at("input_id").get<std::string>(), j.at("spec_index").get<int>(),
                       j.at("pred_cells").get<std::vector<int>>(),
                       j.at("mean_logprob").get<double>()});
    }
    return out;
}

std::string report_to_json(const EvalReport& r) {
    nlohmann::json j;
    for (const auto& [k, v] : r.pass_at_k) j["pass_at_k"][std::to_string(k)] = v;
    j["decode_errors"] = r.decode_errors;
    j["mean_unique_candidates"] = r.mean_unique;
    j["mean_vote_entropy_bits"] = r.mean_entropy;
    j["mean_top1_vote_share"] = r.mean_top1_share;
    j["mean_top1_margin"] = r.mean_top1_margin;
    j["per_input"] = nlohmann::json::array();
    for (size_t i = 0; i < r.tables.size(); ++i) {
        nlohmann::json e;
        e["id"] = r.tables[i].input_id;
        e["correct_rank"] = correct_rank(r.tables[i]);
        e["correct_vote_share"] = correct_vote_share(r.tables[i]);
        e["unique_candidates"] = r.stats[i].unique_candidates;
        e["vote_entropy_bits"] = r.stats[i].vote_entropy_bits;
        e["top1_vote_share"] = r.stats[i].top1_vote_share;
        e["top1_margin"] = r.stats[i].top1_margin;
        j["per_input"].push_back(std::move(e));
    }
    return j.dump(2);
}

std::string report_to_csv(const EvalReport& r) {
    std::ostringstream os;
    os << "id,correct_rank,correct_vote_share,unique_candidates,vote_entropy_bits,"
          "top1_vote_share,top1_margin\n";
    for (size_t i = 0; i < r.tables.size(); ++i)
        os << r.tables[i].input_id << "," << correct_rank(r.tables[i]) << ","
           << correct_vote_share(r.tables[i]) << "," << r.stats[i].unique_candidates << ","
           << r.stats[i].vote_entropy_bits << "," << r.stats[i].top1_vote_share << ","
           << r.stats[i].top1_margin << "\n";
    return os.str();
}

}  // namespace trm
