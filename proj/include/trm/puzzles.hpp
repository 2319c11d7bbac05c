#pragma once

// Toy puzzle generators (small Sudoku, mazes, synthetic ARC-like mappings)
// plus grid tokenization and the ndjson dataset format.

#include <cstdint>
#include <string>
#include <vector>

namespace trm {

struct Grid {
    int rows = 0;
    int cols = 0;
    std::vector<int> cells;  // row-major, values in [0, n_values)

    int at(int r, int c) const { return cells[static_cast<size_t>(r) * cols + c]; }
    int& at(int r, int c) { return cells[static_cast<size_t>(r) * cols + c]; }
    bool operator==(const Grid&) const = default;
};

void validate_grid(const Grid& g, int n_values);

struct PuzzleInstance {
    Grid input;
    Grid target;
    std::string task;  // "sudoku" | "maze" | "arclike"
    std::string id;    // stable content hash
};

// Token layout: PAD = 0, cell value v -> token v + 1.
struct Vocab {
    int pad = 0;
    int offset = 1;
    int n_values = 0;  // distinct cell values

    int size() const { return n_values + 1; }
    int token(int cell) const { return cell + offset; }
    int cell(int tok) const { return tok - offset; }
};

// Distinct cell values each task uses (so vocab(task).size() covers them).
Vocab sudoku_vocab(int size);  // values 0 (blank) .. size
Vocab maze_vocab();            // open, wall, start, goal, path
Vocab arclike_vocab(int colours);

std::string instance_id(const std::string& task, const Grid& input, const Grid& target);

// --- generators -----------------------------------------------------------

// Complete valid grids built from a permuted base pattern; inputs blank all
// but n_givens cells (blank = 0).
std::vector<PuzzleInstance> gen_sudoku(int size, int n_givens, int count, uint64_t seed);

bool sudoku_valid(const Grid& g);  // complete grid: rows/cols/boxes each a permutation

// Maze cell codes.
inline constexpr int kMazeOpen = 0, kMazeWall = 1, kMazeStart = 2, kMazeGoal = 3, kMazePath = 4;

// Odd n in [5, 30]. Input: walls/open/start/goal; target additionally marks
// the unique shortest path (spanning-tree maze) with kMazePath.
std::vector<PuzzleInstance> gen_maze(int n, int count, uint64_t seed);

enum class ArcRule { mirror_h, mirror_v, rot180, colour_cycle };
ArcRule arc_rule_from_string(const std::string& s);
std::string to_string(ArcRule r);

std::vector<PuzzleInstance> gen_arclike(ArcRule rule, int rows, int cols, int colours, int count,
                                        uint64_t seed);

// --- tokenization ----------------------------------------------------------

// Row-major flattening, PAD-filled to seq_len. Throws if the grid overflows.
std::vector<int> tokenize_grid(const Grid& g, const Vocab& vocab, int64_t seq_len);
// 1.0 on grid positions, 0.0 on PAD.
std::vector<double> loss_mask_for(const Grid& g, int64_t seq_len);
// Inverse; throws on out-of-range tokens in the non-PAD region.
Grid detokenize_grid(const std::vector<int>& tokens, int rows, int cols, const Vocab& vocab);

// --- dataset files ---------------------------------------------------------

// Newline-delimited JSON: {id, task, rows, cols, input_cells, target_cells}.
void write_dataset(const std::string& path, const std::vector<PuzzleInstance>& data);
std::vector<PuzzleInstance> read_dataset(const std::string& path);

}  // namespace trm
