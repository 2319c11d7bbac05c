#pragma once

// The per-step operator design space: attention, Mamba-2, MLP, and the
// transposed-sequence MLP, composed into residual block stacks.

#include <memory>
#include <string>
#include <variant>
#include <vector>

#include "trm/darray.hpp"
#include "trm/rng.hpp"

namespace trm {

enum class MixerKind { attention, mamba2, mlp, mlp_t };
enum class NormPlacement { post, pre };

std::string to_string(MixerKind k);
MixerKind mixer_kind_from_string(const std::string& s);

struct MixerConfig {
    MixerKind kind = MixerKind::attention;
    int64_t d = 64;
    int heads = 4;            // attention
    int64_t d_state = 16;     // mamba2
    int64_t headdim = 32;
    int64_t expand = 2;
    int conv_width = 4;
    int mlp_expansion = 4;    // mlp
    int64_t seq_len = 0;      // mlp_t only; runtime length must match

    void validate() const;
    int64_t d_inner() const { return d * expand; }
    int64_t scan_heads() const { return d_inner() / headdim; }
};

// SwiGLU-style hidden width for nominal expansion e: round(2/3 * e * d).
int64_t mlp_hidden_width(int64_t d, int mlp_expansion);

struct AttentionBlock {
    MixerConfig cfg;
    Param wq, wk, wv, wo;
    AttentionBlock(const MixerConfig& c, const std::string& prefix, Rng& rng, double out_scale);
    Tape::Var forward(Tape& t, Tape::Var x);
    int64_t param_count() const;
    void collect(std::vector<Param*>& out);
};

struct Mamba2Block {
    MixerConfig cfg;
    // in_proj columns: [gate z (d_inner) | x (d_inner) | B (d_state) | C (d_state) | dt (heads)]
    Param in_proj, conv_w, conv_b, a_log, dt_bias, out_proj;
    Mamba2Block(const MixerConfig& c, const std::string& prefix, Rng& rng, double out_scale);
    Tape::Var forward(Tape& t, Tape::Var x);
    int64_t param_count() const;
    void collect(std::vector<Param*>& out);
};

struct MlpBlock {
    MixerConfig cfg;
    Param w_gate, w_up, w_down;
    MlpBlock(const MixerConfig& c, const std::string& prefix, Rng& rng, double out_scale);
    Tape::Var forward(Tape& t, Tape::Var x);
    int64_t param_count() const;
    void collect(std::vector<Param*>& out);
};

// Linear mixing along the sequence axis, per channel. Requires the runtime
// sequence length to equal the configured one, which is why this mixer
// cannot generalize across grid sizes.
struct MlpTBlock {
    MixerConfig cfg;
    Param mix, bias;
    MlpTBlock(const MixerConfig& c, const std::string& prefix, Rng& rng, double out_scale);
    Tape::Var forward(Tape& t, Tape::Var x);
    int64_t param_count() const;
    void collect(std::vector<Param*>& out);
};

using Mixer = std::variant<AttentionBlock, Mamba2Block, MlpBlock, MlpTBlock>;

Tape::Var mixer_forward(Mixer& m, Tape& t, Tape::Var x);
int64_t mixer_param_count(const Mixer& m);
void mixer_collect(Mixer& m, std::vector<Param*>& out);

// One sub-block application: post-norm computes Norm(h + F(h)); the pre-norm
// mode (h + F(Norm(h))) exists for the instability demonstration.
struct BlockStack {
    std::vector<Mixer> mixers;
    std::vector<std::unique_ptr<Param>> gains;
    NormPlacement placement = NormPlacement::post;
    double eps = 1e-6;

    Tape::Var forward(Tape& t, Tape::Var h);
    int64_t param_count() const;
    void collect(std::vector<Param*>& out);
};

// Presets from the CLI/config contract.
// trm_attn:      [attention, mlp, attention, mlp]
// tr_mamba2attn: [mamba2, mamba2, attention, mlp]
// tr_mamba2mlpt: [mamba2, mamba2, mlp_t, mlp]
// trm_mlpt:      [mlp_t, mlp, mlp_t, mlp]
std::vector<MixerKind> preset_layout(const std::string& preset);

BlockStack build_block_stack(const std::vector<MixerConfig>& configs, Rng& rng,
                             NormPlacement placement = NormPlacement::post);
BlockStack build_block_stack_preset(const std::string& preset, const MixerConfig& base, Rng& rng,
                                    NormPlacement placement = NormPlacement::post);

// Closed-form per-block parameter audit; matches counted params exactly.
struct ParamAuditRow {
    std::string label;
    int64_t count;
};
std::vector<ParamAuditRow> audit_block_stack(const std::string& preset, const MixerConfig& base);

// Plain (non-autodiff) scalar-decay scans, single sequence.
// u: [s, heads, headdim], a: [s, heads], B/C: [s, d_state]. Returns y like u.
std::vector<double> mamba2_scan_sequential(const std::vector<double>& u,
                                           const std::vector<double>& a,
                                           const std::vector<double>& B,
                                           const std::vector<double>& C,
                                           int64_t s, int64_t heads, int64_t headdim,
                                           int64_t d_state);
std::vector<double> mamba2_scan_chunked(const std::vector<double>& u,
                                        const std::vector<double>& a,
                                        const std::vector<double>& B,
                                        const std::vector<double>& C,
                                        int64_t s, int64_t heads, int64_t headdim,
                                        int64_t d_state, int64_t chunk);

}  // namespace trm
