#pragma once

// Test-time augmentation protocol: dihedral x colour-permutation expansion,
// per-augmentation inference, inverse transform, vote aggregation, pass@K,
// candidate statistics, and difficulty stratification.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "trm/puzzles.hpp"
#include "trm/scaffold.hpp"

namespace trm {

// d8 in [0,8): optional horizontal reflection (d8 >= 4) followed by d8 % 4
// clockwise quarter turns. colour_perm maps every cell value; entries below
// first_permutable are always fixed points (structural tokens).
struct AugmentationSpec {
    int d8 = 0;
    std::vector<int> colour_perm;  // size = colour alphabet
    int first_permutable = 0;

    bool operator==(const AugmentationSpec& o) const {
        return d8 == o.d8 && colour_perm == o.colour_perm;
    }
};

// First 8 specs are the pure dihedral elements with identity colours; the
// rest pair dihedral elements with seeded random permutations, no duplicates.
std::vector<AugmentationSpec> enumerate_augmentations(int n_aug, int colours, uint64_t seed,
                                                      int first_permutable = 0);

Grid apply_transform(const Grid& g, const AugmentationSpec& spec);
Grid invert_transform(const Grid& g, const AugmentationSpec& spec);
// Shape of apply_transform output for an input of the given shape.
std::pair<int, int> transformed_shape(int rows, int cols, const AugmentationSpec& spec);

uint64_t grid_hash(const Grid& g);  // canonical-bytes FNV-1a

struct CandidateRecord {
    Grid grid;            // canonical (original-space) prediction
    int votes = 0;
    double conf_sum = 0;  // total of per-augmentation mean token log-probs
    uint64_t hash = 0;

    double avg_conf() const { return conf_sum / votes; }
};

struct VoteTable {
    std::string input_id;
    Grid correct;
    std::vector<CandidateRecord> ranked;  // votes desc, avg conf desc, hash asc
    int total_votes = 0;
};

// One (prediction grid, mean token log-prob) per augmentation spec. When
// invert is true the predictions are still in transformed space and are
// inverse-transformed here.
VoteTable aggregate_votes(const std::vector<std::pair<Grid, double>>& predictions,
                          const std::vector<AugmentationSpec>& specs, bool invert,
                          const Grid& correct, const std::string& input_id);

// 1-based rank of the correct grid, or 0 if absent.
int correct_rank(const VoteTable& t);
// Per-input 0/1 at each K, averaged over inputs. Fewer than K candidates:
// the whole list is searched.
std::map<int, double> pass_at_k(const std::vector<VoteTable>& tables, const std::vector<int>& ks);

struct CandidateStats {
    int unique_candidates = 0;
    double vote_entropy_bits = 0;
    double top1_vote_share = 0;
    double top1_margin = 0;  // share(rank1) - share(rank2); 1.0 for a single candidate
};
CandidateStats candidate_stats(const VoteTable& t);

// Fraction of votes on the correct candidate.
double correct_vote_share(const VoteTable& t);

struct StratumResult {
    int n = 0;
    std::map<int, double> pass_a, pass_b;
};
struct SolvedSetDiff {
    int both = 0, a_only = 0, b_only = 0;
};
struct StratifiedReport {
    double threshold = 0;
    StratumResult hard, easy;              // difficulty < threshold vs >= threshold
    std::map<int, SolvedSetDiff> solved;   // per K, over all inputs
    std::vector<double> difficulty;        // per input, mean correct-vote share
};
// Both tables must cover identical input ids in the same order.
StratifiedReport stratify_by_difficulty(const std::vector<VoteTable>& a,
                                        const std::vector<VoteTable>& b, double threshold,
                                        const std::vector<int>& ks);

// --- end-to-end driver -------------------------------------------------

struct DumpRecord {
    std::string input_id;
    int spec_index = 0;
    std::vector<int> pred_cells;  // transformed-space prediction
    double mean_logprob = 0;
};

struct EvalOptions {
    int n_aug = 64;
    uint64_t aug_seed = 0;
    int first_permutable = 0;
    int max_steps = 0;   // 0: model's deep_supervision_steps
    int batch_size = 16;
    int threads = 1;
    std::vector<int> ks = {1, 2, 5, 10, 100, 1000};
};

struct EvalReport {
    std::map<int, double> pass_at_k;
    std::vector<VoteTable> tables;
    std::vector<CandidateStats> stats;
    double mean_unique = 0, mean_entropy = 0, mean_top1_share = 0, mean_top1_margin = 0;
    int decode_errors = 0;  // augmentations whose prediction failed to decode
};

// Augment -> infer -> invert -> aggregate. Deterministic for any thread
// count: every (input, spec) pair writes one preallocated slot and the
// reduction order is fixed. Decode failures are counted, not fatal.
EvalReport evaluate(Model& model, const std::vector<PuzzleInstance>& data, const Vocab& vocab,
                    const EvalOptions& opt, std::vector<DumpRecord>* dump = nullptr);

// Rebuild vote tables from a prediction dump (no inference); bit-identical
// to the original aggregation.
EvalReport reaggregate(const std::vector<DumpRecord>& dump,
                       const std::vector<PuzzleInstance>& data, const Vocab& vocab,
                       const EvalOptions& opt);

// ndjson {input_id, spec_index, pred_cells, mean_logprob}
void write_dump(const std::string& path, const std::vector<DumpRecord>& dump);
std::vector<DumpRecord> read_dump(const std::string& path);

std::string report_to_json(const EvalReport& r);
// CSV companion: per-input id, rank of correct, unique, entropy, share, margin.
std::string report_to_csv(const EvalReport& r);

}  // namespace trm
