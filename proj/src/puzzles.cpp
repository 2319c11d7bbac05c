#include "trm/puzzles.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "trm/rng.hpp"

namespace trm {

void validate_grid(const Grid& g, int n_values) {
    if (g.rows <= 0 || g.cols <= 0 || g.rows > 30 || g.cols > 30)
        throw std::invalid_argument("grid dims must be in [1,30], got " + std::to_string(g.rows) +
                                    "x" + std::to_string(g.cols));
    if (static_cast<int64_t>(g.cells.size()) != static_cast<int64_t>(g.rows) * g.cols)
        throw std::invalid_argument("grid cell count does not match rows*cols");
    for (size_t i = 0; i < g.cells.size(); ++i)
        if (g.cells[i] < 0 || g.cells[i] >= n_values)
            throw std::invalid_argument("grid cell " + std::to_string(i) + " = " +
                                        std::to_string(g.cells[i]) + " outside [0, " +
                                        std::to_string(n_values) + ")");
}

Vocab sudoku_vocab(int size) { return Vocab{0, 1, size + 1}; }
Vocab maze_vocab() { return Vocab{0, 1, 5}; }
Vocab arclike_vocab(int colours) { return Vocab{0, 1, colours}; }

std::string instance_id(const std::string& task, const Grid& input, const Grid& target) {
    uint64_t h = 1469598103934665603ull;  // FNV-1a over the record content
    auto mix = [&h](uint64_t x) {
        for (int i = 0; i < 8; ++i) {
            h ^= (x >> (8 * i)) & 0xff;
            h *= 1099511628211ull;
        }
    };
    for (char c : task) mix(static_cast<uint64_t>(static_cast<unsigned char>(c)));
    mix(static_cast<uint64_t>(input.rows));
    mix(static_cast<uint64_t>(input.cols));
    for (int c : input.cells) mix(static_cast<uint64_t>(c));
    for (int c : target.cells) mix(static_cast<uint64_t>(c));
    std::ostringstream os;
    os << task << "-" << std::hex << h;
    return os.str();
}

// --- sudoku ----------------------------------------------------------------

bool sudoku_valid(const Grid& g) {
    const int n = g.rows;
    if (g.cols != n) return false;
    const int b = (n == 4) ? 2 : (n == 9) ? 3 : 0;
    if (b == 0) return false;
    auto is_perm = [n](std::vector<int>& seen) {
        bool ok = std::all_of(seen.begin(), seen.end(), [](int c) { return c == 1; });
        std::fill(seen.begin(), seen.end(), 0);
        return ok;
    };
    std::vector<int> seen(n, 0);
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < n; ++c) {
            const int v = g.at(r, c);
            if (v < 1 || v > n) return false;
            seen[v - 1]++;
        }
        if (!is_perm(seen)) return false;
    }
    for (int c = 0; c < n; ++c) {
        for (int r = 0; r < n; ++r) seen[g.at(r, c) - 1]++;
        if (!is_perm(seen)) return false;
    }
    for (int br = 0; br < n; br += b)
        for (int bc = 0; bc < n; bc += b) {
            for (int r = 0; r < b; ++r)
                for (int c = 0; c < b; ++c) seen[g.at(br + r, bc + c) - 1]++;
            if (!is_perm(seen)) return false;
        }
    return true;
}

std::vector<PuzzleInstance> gen_sudoku(int size, int n_givens, int count, uint64_t seed) {
    if (size != 4 && size != 9) throw std::invalid_argument("sudoku size must be 4 or 9");
    if (n_givens < 0 || n_givens > size * size)
        throw std::invalid_argument("n_givens must be in [0, " + std::to_string(size * size) +
                                    "], got " + std::to_string(n_givens));
    if (count < 0) throw std::invalid_argument("count must be >= 0");
    const int n = size;
    const int b = (n == 4) ? 2 : 3;

    std::vector<PuzzleInstance> out;
    out.reserve(count);
    for (int inst = 0; inst < count; ++inst) {
        Rng rng(seed + 0x9e3779b97f4a7c15ull * static_cast<uint64_t>(inst + 1));

        // valid base: cell(r,c) = (b*(r%b) + r/b + c) % n + 1, then relabel
        // digits and permute rows/cols within bands/stacks plus whole
        // bands/stacks — all validity-preserving.
        std::vector<int> digits(n), band(b), stack(b);
        std::vector<std::vector<int>> row_in_band(b, std::vector<int>(b)),
            col_in_stack(b, std::vector<int>(b));
        std::iota(digits.begin(), digits.end(), 1);
        rng.shuffle(digits);
        std::iota(band.begin(), band.end(), 0);
        rng.shuffle(band);
        std::iota(stack.begin(), stack.end(), 0);
        rng.shuffle(stack);
        for (int i = 0; i < b; ++i) {
            std::iota(row_in_band[i].begin(), row_in_band[i].end(), 0);
            rng.shuffle(row_in_band[i]);
            std::iota(col_in_stack[i].begin(), col_in_stack[i].end(), 0);
            rng.shuffle(col_in_stack[i]);
        }
        auto src_row = [&](int r) { return band[r / b] * b + row_in_band[r / b][r % b]; };
        auto src_col = [&](int c) { return stack[c / b] * b + col_in_stack[c / b][c % b]; };

        Grid target{n, n, std::vector<int>(static_cast<size_t>(n) * n)};
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < n; ++c) {
                const int sr = src_row(r), sc = src_col(c);
                target.at(r, c) = digits[(b * (sr % b) + sr / b + sc) % n];
            }

        std::vector<int> order(n * n);
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(order);
        Grid input = target;
        for (int i = 0; i < n * n - n_givens; ++i) input.cells[order[i]] = 0;

        PuzzleInstance p{std::move(input), std::move(target), "sudoku", ""};
        p.id = instance_id(p.task, p.input, p.target);
        out.push_back(std::move(p));
    }
    return out;
}

// --- maze ------------------------------------------------------------------

std::vector<PuzzleInstance> gen_maze(int n, int count, uint64_t seed) {
    if (n < 5 || n > 30 || n % 2 == 0)
        throw std::invalid_argument("maze side must be odd and in [5, 30], got " +
                                    std::to_string(n));
    if (count < 0) throw std::invalid_argument("count must be >= 0");

    std::vector<PuzzleInstance> out;
    out.reserve(count);
    const int m = (n - 1) / 2;  // carving lattice: cells at odd coordinates
    for (int inst = 0; inst < count; ++inst) {
        Rng rng(seed + 0x9e3779b97f4a7c15ull * static_cast<uint64_t>(inst + 1));
        Grid g{n, n, std::vector<int>(static_cast<size_t>(n) * n, kMazeWall)};

        // iterative DFS backtracker over lattice cells; knocking the wall
        // between visited neighbours yields a spanning tree of open cells
        std::vector<uint8_t> visited(static_cast<size_t>(m) * m, 0);
        std::vector<std::pair<int, int>> stk;
        int cr = static_cast<int>(rng.uniform_int(m)), cc = static_cast<int>(rng.uniform_int(m));
        visited[static_cast<size_t>(cr) * m + cc] = 1;
        g.at(2 * cr + 1, 2 * cc + 1) = kMazeOpen;
        stk.emplace_back(cr, cc);
        const int dr[4] = {-1, 1, 0, 0}, dc[4] = {0, 0, -1, 1};
        while (!stk.empty()) {
            auto [r, c] = stk.back();
            int dirs[4], nd = 0;
            for (int k = 0; k < 4; ++k) {
                const int nr = r + dr[k], nc = c + dc[k];
                if (nr >= 0 && nr < m && nc >= 0 && nc < m &&
                    !visited[static_cast<size_t>(nr) * m + nc])
                    dirs[nd++] = k;
            }
            if (nd == 0) {
                stk.pop_back();
                continue;
            }
            const int k = dirs[rng.uniform_int(nd)];
            const int nr = r + dr[k], nc = c + dc[k];
            visited[static_cast<size_t>(nr) * m + nc] = 1;
            g.at(2 * r + 1 + dr[k], 2 * c + 1 + dc[k]) = kMazeOpen;  // wall between
            g.at(2 * nr + 1, 2 * nc + 1) = kMazeOpen;
            stk.emplace_back(nr, nc);
        }

        // distinct random start/goal lattice cells
        int sr = static_cast<int>(rng.uniform_int(m)), sc = static_cast<int>(rng.uniform_int(m));
        int gr, gc;
        do {
            gr = static_cast<int>(rng.uniform_int(m));
            gc = static_cast<int>(rng.uniform_int(m));
        } while (gr == sr && gc == sc);
        const int start = (2 * sr + 1) * n + (2 * sc + 1);
        const int goal = (2 * gr + 1) * n + (2 * gc + 1);

        // BFS over open cells; the tree structure makes the path unique
        std::vector<int> prev(static_cast<size_t>(n) * n, -1);
        std::deque<int> q{start};
        prev[start] = start;
        while (!q.empty()) {
            const int cur = q.front();
            q.pop_front();
            if (cur == goal) break;
            const int r = cur / n, c = cur % n;
            for (int k = 0; k < 4; ++k) {
                const int nr = r + dr[k], nc = c + dc[k];
                if (nr < 0 || nr >= n || nc < 0 || nc >= n) continue;
                const int nxt = nr * n + nc;
                if (g.cells[nxt] == kMazeOpen && prev[nxt] < 0) {
                    prev[nxt] = cur;
                    q.push_back(nxt);
                }
            }
        }

        Grid input = g;
        input.cells[start] = kMazeStart;
        input.cells[goal] = kMazeGoal;
        Grid target = input;
        for (int cur = prev[goal]; cur != start; cur = prev[cur]) target.cells[cur] = kMazePath;

        PuzzleInstance p{std::move(input), std::move(target), "maze", ""};
        p.id = instance_id(p.task, p.input, p.target);
        out.push_back(std::move(p));
    }
    return out;
}

// --- arc-like --------------------------------------------------------------

ArcRule arc_rule_from_string(const std::string& s) {
    if (s == "mirror_h") return ArcRule::mirror_h;
    if (s == "mirror_v") return ArcRule::mirror_v;
    if (s == "rot180") return ArcRule::rot180;
    if (s == "colour_cycle") return ArcRule::colour_cycle;
    throw std::invalid_argument("unknown arclike rule: " + s);
}

std::string to_string(ArcRule r) {
    switch (r) {
        case ArcRule::mirror_h: return "mirror_h";
        case ArcRule::mirror_v: return "mirror_v";
        case ArcRule::rot180: return "rot180";
        case ArcRule::colour_cycle: return "colour_cycle";
    }
    throw std::logic_error("bad ArcRule");
}

std::vector<PuzzleInstance> gen_arclike(ArcRule rule, int rows, int cols, int colours, int count,
                                        uint64_t seed) {
    if (rows < 1 || rows > 10 || cols < 1 || cols > 10)
        throw std::invalid_argument("arclike grids are at most 10x10");
    if (colours < 2 || colours > 12)
        throw std::invalid_argument("arclike colours must be in [2, 12]");
    if (count < 0) throw std::invalid_argument("count must be >= 0");

    std::vector<PuzzleInstance> out;
    out.reserve(count);
    for (int inst = 0; inst < count; ++inst) {
        Rng rng(seed + 0x9e3779b97f4a7c15ull * static_cast<uint64_t>(inst + 1));
        Grid input{rows, cols, std::vector<int>(static_cast<size_t>(rows) * cols)};
        for (auto& c : input.cells) c = static_cast<int>(rng.uniform_int(colours));
        Grid target{rows, cols, std::vector<int>(input.cells.size())};
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) {
                switch (rule) {
                    case ArcRule::mirror_h: target.at(r, c) = input.at(r, cols - 1 - c); break;
                    case ArcRule::mirror_v: target.at(r, c) = input.at(rows - 1 - r, c); break;
                    case ArcRule::rot180:
                        target.at(r, c) = input.at(rows - 1 - r, cols - 1 - c);
                        break;
                    case ArcRule::colour_cycle:
                        target.at(r, c) = (input.at(r, c) + 1) % colours;
                        break;
                }
            }
        PuzzleInstance p{std::move(input), std::move(target), "arclike", ""};
        p.id = instance_id(p.task, p.input, p.target);
        out.push_back(std::move(p));
    }
    return out;
}

// --- tokenization ----------------------------------------------------------

std::vector<int> tokenize_grid(const Grid& g, const Vocab& vocab, int64_t seq_len) {
    const int64_t n = static_cast<int64_t>(g.cells.size());
    if (n > seq_len)
        throw std::invalid_argument("grid of " + std::to_string(n) +
                                    " cells does not fit seq_len " + std::to_string(seq_len));
    validate_grid(g, vocab.n_values);
    std::vector<int> toks(seq_len, vocab.pad);
    for (int64_t i = 0; i < n; ++i) toks[i] = vocab.token(g.cells[i]);
    return toks;
}

std::vector<double> loss_mask_for(const Grid& g, int64_t seq_len) {
    std::vector<double> mask(seq_len, 0.0);
    std::fill(mask.begin(), mask.begin() + static_cast<int64_t>(g.cells.size()), 1.0);
    return mask;
}

Grid detokenize_grid(const std::vector<int>& tokens, int rows, int cols, const Vocab& vocab) {
    const int64_t n = static_cast<int64_t>(rows) * cols;
    if (static_cast<int64_t>(tokens.size()) < n)
        throw std::invalid_argument("token sequence shorter than rows*cols");
    Grid g{rows, cols, std::vector<int>(n)};
    for (int64_t i = 0; i < n; ++i) {
        const int c = vocab.cell(tokens[i]);
        if (c < 0 || c >= vocab.n_values)
            throw std::invalid_argument("token " + std::to_string(tokens[i]) + " at position " +
                                        std::to_string(i) + " does not decode to a cell value");
        g.cells[i] = c;
    }
    return g;
}

// --- dataset files ---------------------------------------------------------

void write_dataset(const std::string& path, const std::vector<PuzzleInstance>& data) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    for (const auto& p : data) {
        nlohmann::json j;
        j["id"] = p.id;
        j["task"] = p.task;
        j["rows"] = p.input.rows;
        j["cols"] = p.input.cols;
        j["input_cells"] = p.input.cells;
        j["target_cells"] = p.target.cells;
        f << j.dump() << "\n";
    }
    if (!f) throw std::runtime_error("write to " + path + " failed");
}

std::vector<PuzzleInstance> read_dataset(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    std::vector<PuzzleInstance> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const std::exception& e) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": bad json: " +
                                     e.what());
        }
        PuzzleInstance p;
        p.id = j.at("id").get<std::string>();
        p.task = j.at("task").get<std::string>();
        const int rows = j.at("rows").get<int>(), cols = j.at("cols").get<int>();
        p.input = Grid{rows, cols, j.at("input_cells").get<std::vector<int>>()};
        p.target = Grid{rows, cols, j.at("target_cells").get<std::vector<int>>()};
        if (p.input.cells.size() != static_cast<size_t>(rows) * cols ||
            p.target.cells.size() != static_cast<size_t>(rows) * cols)
            throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                     ": cell counts do not match rows*cols");
        out.push_back(std::move(p));
    }
    return out;
}

}  // namespace trm
