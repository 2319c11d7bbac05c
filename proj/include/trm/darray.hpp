#pragma once

// Dense arrays plus a tape-based reverse-mode autodiff engine.
// All math is 64-bit. Arrays are row-major; no implicit broadcasting
// except the explicitly named *_lastdim ops.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace trm {

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

struct DArray {
    Shape shape;
    std::vector<double> v;

    DArray() = default;
    explicit DArray(Shape s) : shape(std::move(s)), v(numel(shape), 0.0) {}
    DArray(Shape s, std::vector<double> vals);

    int64_t size() const { return static_cast<int64_t>(v.size()); }
    double& at(int64_t i) { return v[i]; }
    double at(int64_t i) const { return v[i]; }
};

// A named learnable parameter. Gradients accumulate into `grad` when a
// tape that bound this parameter runs backward().
struct Param {
    std::string name;
    DArray value;
    DArray grad;

    explicit Param(std::string n, Shape s) : name(std::move(n)), value(std::move(s)) {
        grad = DArray(value.shape);
    }
    void zero_grad() { std::fill(grad.v.begin(), grad.v.end(), 0.0); }
};

// Number of rows below which matmuls stay single-threaded.
void set_num_threads(int n);
int num_threads();

// C[m,n] (+)= op(A) * op(B). Deterministic row-partitioned threading:
// every C element is written by exactly one thread, so results are
// bit-identical for any thread count.
void gemm(const double* a, const double* b, double* c,
          int64_t m, int64_t k, int64_t n,
          bool trans_a, bool trans_b, bool accumulate);

class Tape {
public:
    using Var = int32_t;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // When false, ops compute values but record no backward closures.
    void set_grad_enabled(bool on) { grad_enabled_ = on; }
    bool grad_enabled() const { return grad_enabled_; }
    // Debug-mode finite check after every op.
    void set_check_finite(bool on) { check_finite_ = on; }

    // Leaves.
    Var input(const DArray& x);                   // constant, no grad
    Var leaf(const DArray& x, bool needs_grad);   // grad kept on tape
    Var param(Param& p);                          // grad flows into p.grad

    const DArray& val(Var v) const { return nodes_[v].val; }
    const Shape& shape(Var v) const { return nodes_[v].val.shape; }
    const std::vector<double>& grad(Var v) const { return nodes_[v].grad; }

    // Elementwise (same shape).
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, double c);
    Var neg(Var a) { return scale(a, -1.0); }
    Var silu(Var a);
    Var sigmoid(Var a);
    Var softplus(Var a);
    Var exp(Var a);
    Var square(Var a) { return mul(a, a); }

    // Trailing-dimension broadcasts: b has shape [d] == last extent of a.
    Var add_lastdim(Var a, Var b);
    Var mul_lastdim(Var a, Var b);
    // a: [..., H, P], b: [..., H] — multiply each length-P slice by b.
    Var mul_expand_last(Var a, Var b);

    // Structure.
    Var reshape(Var a, Shape s);
    Var permute(Var a, const std::vector<int>& axes);
    Var slice_lastdim(Var a, int64_t start, int64_t len);
    Var mean_axis(Var a, int axis);
    Var sum_all(Var a);
    Var mean_all(Var a);

    // Linear algebra.
    Var matmul(Var a, Var b);                        // [m,k] x [k,n]
    Var linear(Var x, Var w);                        // [..., din] x [din, dout]
    Var linear_bias(Var x, Var w, Var b);
    Var bmm(Var a, Var b);                           // [..., m, k] x [..., k, n]
    Var bmm_nt(Var a, Var b);                        // [..., m, k] x [..., n, k]^T

    Var rmsnorm(Var x, Var gain, double eps);        // per trailing vector
    Var softmax_lastdim(Var x);

    // Depthwise causal conv over the sequence axis.
    // x: [b, s, c], w: [c, k], bias: [c].
    Var conv1d_causal_depthwise(Var x, Var w, Var bias);

    // Selective scan: h_t = a_t h_{t-1} + B_t (outer) u_t, y_t = h_t . C_t.
    // u: [b, s, H, P], a: [b, s, H], B: [b, s, N], C: [b, s, N] -> [b, s, H, P].
    Var selective_scan(Var u, Var a, Var B, Var C);

    // Masked mean token cross-entropy from logits [b, s, vocab].
    // mask entries in {0,1}; targets are token ids. Returns scalar.
    Var cross_entropy_masked(Var logits, const std::vector<int>& targets,
                             const std::vector<double>& mask);
    // Binary cross-entropy from logits [b] vs targets in {0,1}. Scalar mean.
    Var bce_with_logits(Var logits, const std::vector<double>& targets);

    Var detach(Var a);

    void backward(Var loss_scalar);
    void clear();
    size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        DArray val;
        std::vector<double> grad;
        std::function<void()> back;  // empty for leaves/constants
        Param* bound = nullptr;
        bool needs_grad = false;
    };

    Var push(DArray val, bool needs_grad, std::function<void()> back);
    std::vector<double>& g(Var v);
    void ensure_grad(Var v);
    void check(Var v) const;

    std::vector<Node> nodes_;
    bool grad_enabled_ = true;
    bool check_finite_ =
#ifdef NDEBUG
        false;
#else
        true;
#endif
};

// Max relative error between analytic and central finite-difference
// gradients of a scalar-valued function of one DArray.
double check_gradients(const std::function<double(const DArray&)>& f,
                       const DArray& x, const std::vector<double>& analytic_grad,
                       double h = 1e-5);

}  // namespace trm
