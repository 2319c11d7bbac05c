#include "trm/darray.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace trm {

int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t e : s) n *= e;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

DArray::DArray(Shape s, std::vector<double> vals) : shape(std::move(s)), v(std::move(vals)) {
    if (numel(shape) != static_cast<int64_t>(v.size()))
        throw std::invalid_argument("DArray: shape " + shape_str(shape) + " does not match " +
                                    std::to_string(v.size()) + " values");
}

namespace {
int g_threads = 1;

void check_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (a != b)
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) +
                                    " vs " + shape_str(b));
}
}  // namespace

void set_num_threads(int n) { g_threads = std::max(1, n); }
int num_threads() { return g_threads; }

namespace {

void gemm_rows(const double* a, const double* b, double* c,
               int64_t m0, int64_t m1, int64_t m, int64_t k, int64_t n,
               bool trans_a, bool trans_b, bool accumulate) {
    (void)m;
    if (!accumulate)
        std::fill(c + m0 * n, c + m1 * n, 0.0);
    if (!trans_a && !trans_b) {
        for (int64_t i = m0; i < m1; ++i) {
            const double* ai = a + i * k;
            double* ci = c + i * n;
            for (int64_t p = 0; p < k; ++p) {
                const double av = ai[p];
                const double* bp = b + p * n;
                for (int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
            }
        }
    } else if (!trans_a && trans_b) {
        for (int64_t i = m0; i < m1; ++i) {
            const double* ai = a + i * k;
            double* ci = c + i * n;
            for (int64_t j = 0; j < n; ++j) {
                const double* bj = b + j * k;
                double acc = 0.0;
                for (int64_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
                ci[j] += acc;
            }
        }
    } else if (trans_a && !trans_b) {
        // a is [k, m]; c[i,:] += sum_p a[p,i] * b[p,:]
        for (int64_t p = 0; p < k; ++p) {
            const double* ap = a + p * m;
            const double* bp = b + p * n;
            for (int64_t i = m0; i < m1; ++i) {
                const double av = ap[i];
                if (av == 0.0) continue;
                double* ci = c + i * n;
                for (int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
            }
        }
    } else {
        for (int64_t i = m0; i < m1; ++i) {
            double* ci = c + i * n;
            for (int64_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (int64_t p = 0; p < k; ++p) acc += a[p * m + i] * b[j * k + p];
                ci[j] += acc;
            }
        }
    }
}

}  // namespace

void gemm(const double* a, const double* b, double* c,
          int64_t m, int64_t k, int64_t n,
          bool trans_a, bool trans_b, bool accumulate) {
    // The trans_b kernels reduce along the contiguous axis and vectorize
    // poorly; transposing b up front (O(kn) vs O(mkn) work) lets every case
    // run the row-streaming kernels.
    thread_local std::vector<double> b_t;
    if (trans_b && m > 1) {
        b_t.resize(static_cast<size_t>(k) * n);
        for (int64_t j = 0; j < n; ++j)
            for (int64_t p = 0; p < k; ++p) b_t[p * n + j] = b[j * k + p];
        b = b_t.data();
        trans_b = false;
    }
    const int nt = g_threads;
    if (nt <= 1 || m < 2 * nt || m * k * n < 262144) {
        gemm_rows(a, b, c, 0, m, m, k, n, trans_a, trans_b, accumulate);
        return;
    }
    std::vector<std::thread> workers;
    const int64_t per = (m + nt - 1) / nt;
    for (int t = 0; t < nt; ++t) {
        const int64_t m0 = t * per;
        const int64_t m1 = std::min(m, m0 + per);
        if (m0 >= m1) break;
        workers.emplace_back([=] { gemm_rows(a, b, c, m0, m1, m, k, n, trans_a, trans_b, accumulate); });
    }
    for (auto& w : workers) w.join();
}

Tape::Var Tape::push(DArray val, bool needs_grad, std::function<void()> back) {
    Node n;
    n.val = std::move(val);
    n.needs_grad = needs_grad && grad_enabled_;
    if (n.needs_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    Var v = static_cast<Var>(nodes_.size() - 1);
    if (check_finite_) check(v);
    return v;
}

void Tape::check(Var v) const {
    for (double x : nodes_[v].val.v)
        if (!std::isfinite(x))
            throw std::runtime_error("non-finite value produced at tape node " + std::to_string(v));
}

std::vector<double>& Tape::g(Var v) {
    ensure_grad(v);
    return nodes_[v].grad;
}

void Tape::ensure_grad(Var v) {
    if (nodes_[v].grad.empty()) nodes_[v].grad.assign(nodes_[v].val.v.size(), 0.0);
}

Tape::Var Tape::input(const DArray& x) { return push(x, false, {}); }

Tape::Var Tape::leaf(const DArray& x, bool needs_grad) { return push(x, needs_grad, {}); }

Tape::Var Tape::param(Param& p) {
    Var v = push(p.value, true, {});
    nodes_[v].bound = &p;
    return v;
}

Tape::Var Tape::add(Var a, Var b) {
    check_same_shape(shape(a), shape(b), "add");
    DArray out(shape(a));
    const auto& av = val(a).v;
    const auto& bv = val(b).v;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = av[i] + bv[i];
    Var o = push(std::move(out), nodes_[a].needs_grad || nodes_[b].needs_grad, {});
    if (nodes_[o].needs_grad)
        nodes_[o].back = [this, a, b, o] {
            const auto& go = nodes_[o].grad;
            if (nodes_[a].needs_grad) {
                auto& ga = g(a);
                for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
            }
            if (nodes_[b].needs_grad) {
                auto& gb = g(b);
                for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
            }
        };
    return o;
}

Tape::Var Tape::sub(Var a, Var b) {
    check_same_shape(shape(a), shape(b), "sub");
    DArray out(shape(a));
    const auto& av = val(a).v;
    const auto& bv = val(b).v;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = av[i] - bv[i];
    Var o = push(std::move(out), nodes_[a].needs_grad || nodes_[b].needs_grad, {});
    if (nodes_[o].needs_grad)
        nodes_[o].back = [this, a, b, o] {
            const auto& go = nodes_[o].grad;
            if (nodes_[a].needs_grad) {
                auto& ga = g(a);
                for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
            }
            if (nodes_[b].needs_grad) {
                auto& gb = g(b);
                for (size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
            }
        };
    return o;
}

Tape::Var Tape::mul(Var a, Var b) {
    check_same_shape(shape(a), shape(b), "mul");
    DArray out(shape(a));
    const auto& av = val(a).v;
    const auto& bv = val(b).v;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = av[i] * bv[i];
    Var o = push(std::move(out), nodes_[a].needs_grad || nodes_[b].needs_grad, {});
    if (nodes_[o].needs_grad)
        nodes_[o].back = [this, a, b, o] {
            const auto& go = nodes_[o].grad;
            const auto& av2 = nodes_[a].val.v;
            const auto& bv2 = nodes_[b].val.v;
            if (nodes_[a].needs_grad) {
                auto& ga = g(a);
                for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv2[i];
            }
            if (nodes_[b].needs_grad) {
                auto& gb = g(b);
                for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av2[i];
            }
        };
    return o;
}

Tape::Var Tape::scale(Var a, double c) {
    DArray out(shape(a));
    const auto& av = val(a).v;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = av[i] * c;
    Var o = push(std::move(out), nodes_[a].needs_grad, {});
    if (nodes_[o].needs_grad)
        nodes_[o].back = [this, a, c, o] {
            const auto& go = nodes_[o].grad;
            auto& ga = g(a);
            for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * c;
        };
    return o;
}

Tape::Var Tape::silu(Var a) {
    DArray out(shape(a));
    const auto& av = val(a).v;
    for (size_t i = 0; i < out.v.size(); ++i) {
        const double s = 1.0 / (1.0 + std::exp(-av[i]));
        out.v[i] = av[i] * s;
    }
    Var o = push(std::move(out), nodes_[a].needs_grad, {});
    if (nodes_[o].needs_grad)
        nodes_[o].back = [this, a, o] {
            const auto& go = nodes_[o].grad;
            const auto& av2 = nodes_[a].val.v;
            auto& ga = g(a);
            for (size_t i = 0; i < go.size(); ++i) {
                const double s = 1.0 / (1.0 + std::exp(-av2[i]));
                ga[i] += go[i] * s * (1.0 + av2[i] * (1.0 - s));
            }
        };
    return o;
}

Tape::Var Tape::sigmoid(Var a) {
    DArray out(shape(a));
    const auto& av = val(a).v;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = 1.0 / (1.0 + std::exp(-av[i]));
    Var o = push(std::move(out), nodes_[a].needs_grad, {});
    if (nodes_[o].needs_grad)
        nodes_[o].back = [this, a, o] {
            const auto& go = nodes_[o].grad;
            const auto& ov = nodes_[o].val.v;
            auto& ga = g(a);
            for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * ov[i] * (1.0 - ov[i]);
        };
    return o;
}

Tape::Var Tape::softplus(Var a) {
    DArray out(shape(a));
    const auto& av = val(a).v;
    for (size_t i = 0; i < out.v.size(); ++i) {
        const double x = av[i];
        out.v[i] = x > 30.0 ? x : std::log1p(std::exp(x));
    }
    Var o = push(std::move(out), nodes_[a].needs_grad, {});
    if (nodes_[o].needs_grad)
        nodes_[o].back = [this, a, o] {
            const auto& go = nodes_[o].grad;
            const auto& av2 = nodes_[a].val.v;
            auto& ga = g(a);
            for (size_t i = 0; i < go.size(); ++i)
                ga[i] += go[i] / (1.0 + std::exp(-av2[i]));
        };
    return o;
}

Tape::Var Tape::exp(Var a) {
    DArray out(shape(a));
    const auto& av = val(a).v;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = std::exp(av[i]);
    Var o = push(std::move(out), nodes_[a].needs_grad, {});
    if (nodes_[o].needs_grad)
        nodes_[o].back = [this, a, o] {
            const auto& go = nodes_[o].grad;
            const auto& ov = nodes_[o].val.v;
            auto& ga = g(a);
            for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * ov[i];
        };
    return o;
}

Tape::Var Tape::add_lastdim(Var a, Var b) {
    const Shape& sa = shape(a);
    const Shape& sb = shape(b);
    if (sb.size() != 1 || sa.empty() || sa.back() != sb[0])
        throw std::invalid_argument("add_lastdim: " + shape_str(sa) + " vs " + shape_str(sb));
    const int64_t d = sb[0];
    DArray out(sa);
    const auto& av = val(a).v;
    const auto& bv = val(b).v;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = av[i] + bv[i % d];
    Var o = push(std::move(out), nodes_[a].needs_grad || nodes_[b].needs_grad, {});
    if (nodes_[o].needs_grad)
        nodes_[o].back = [this, a, b, d, o] {
            const auto& go = nodes_[o].grad;
            if (nodes_[a].needs_grad) {
                auto& ga = g(a);
                for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
            }
            if (nodes_[b].needs_grad) {
                auto& gb = g(b);
                for (size_t i = 0; i < go.size(); ++i) gb[i % d] += go[i];
            }
        };
    return o;
}

Tape::Var Tape::mul_lastdim(Var a, Var b) {
    const Shape& sa = shape(a);
    const Shape& sb = shape(b);
    if (sb.size() != 1 || sa.empty() || sa.back() != sb[0])
        throw std::invalid_argument("mul_lastdim: " + shape_str(sa) + " vs " + shape_str(sb));
    const int64_t d = sb[0];
    DArray out(sa);
    const auto& av = val(a).v;
    const auto& bv = val(b).v;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = av[i] * bv[i % d];
    Var o = push(std::move(out), nodes_[a].needs_grad || nodes_[b].needs_grad, {});
    if (nodes_[o].needs_grad)
        nodes_[o].back = [this, a, b, d, o] {
            const auto& go = nodes_[o].grad;
            const auto& av2 = nodes_[a].val.v;
            const auto& bv2 = nodes_[b].val.v;
            if (nodes_[a].needs_grad) {
                auto& ga = g(a);
                for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv2[i % d];
            }
            if (nodes_[b].needs_grad) {
                auto& gb = g(b);
                for (size_t i = 0; i < go.size(); ++i) gb[i % d] += go[i] * av2[i];
            }
        };
    return o;
}

Tape::Var Tape::mul_expand_last(Var a, Var b) {
    const Shape& sa = shape(a);
    const Shape& sb = shape(b);
    if (sa.size() != sb.size() + 1 ||
        !std::equal(sb.begin(), sb.end(), sa.begin()))
        throw std::invalid_argument("mul_expand_last: " + shape_str(sa) + " vs " + shape_str(sb));
    const int64_t p = sa.back();
    DArray out(sa);
    const auto& av = val(a).v;
    const auto& bv = val(b).v;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = av[i] * bv[i / p];
    Var o = push(std::move(out), nodes_[a].needs_grad || nodes_[b].needs_grad, {});
    if (nodes_[o].needs_grad)
        nodes_[o].back = [this, a, b, p, o] {
            const auto& go = nodes_[o].grad;
            const auto& av2 = nodes_[a].val.v;
            const auto& bv2 = nodes_[b].val.v;
            if (nodes_[a].needs_grad) {
                auto& ga = g(a);
                for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv2[i / p];
            }
            if (nodes_[b].needs_grad) {
                auto& gb = g(b);
                for (size_t i = 0; i < go.size(); ++i) gb[i / p] += go[i] * av2[i];
            }
        };
    return o;
}

Tape::Var Tape::reshape(Var a, Shape s) {
    if (numel(s) != numel(shape(a)))
        throw std::invalid_argument("reshape: element count mismatch " + shape_str(shape(a)) +
                                    " -> " + shape_str(s));
    DArray out(std::move(s), val(a).v);
    Var o = push(std::move(out), nodes_[a].needs_grad, {});
    if (nodes_[o].needs_grad)
        nodes_[o].back = [this, a, o] {
            const auto& go = nodes_[o].grad;
            auto& ga = g(a);
            for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
        };
    return o;
}

namespace {
std::vector<int64_t> strides_of(const Shape& s) {
    std::vector<int64_t> st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
    return st;
}

// out[idx] = in[perm_src(idx)] index map for permute(axes).
void permute_copy(const std::vector<double>& in, std::vector<double>& out,
                  const Shape& in_shape, const std::vector<int>& axes, bool add_to_out) {
    const size_t r = in_shape.size();
    Shape out_shape(r);
    for (size_t i = 0; i < r; ++i) out_shape[i] = in_shape[axes[i]];
    const auto in_st = strides_of(in_shape);
    const auto out_st = strides_of(out_shape);
    const int64_t n = numel(in_shape);
    std::vector<int64_t> src_stride_for_out(r);
    for (size_t i = 0; i < r; ++i) src_stride_for_out[i] = in_st[axes[i]];
    for (int64_t oi = 0; oi < n; ++oi) {
        int64_t rem = oi, si = 0;
        for (size_t i = 0; i < r; ++i) {
            const int64_t c = rem / out_st[i];
            rem -= c * out_st[i];
            si += c * src_stride_for_out[i];
        }
        if (add_to_out)
            out[si] += in[oi];  // used in backward with roles swapped
        else
            out[oi] = in[si];
    }
}
}  // namespace

Tape::Var Tape::permute(Var a, const std::vector<int>& axes) {
    const Shape& sa = shape(a);
    if (axes.size() != sa.size())
        throw std::invalid_argument("permute: rank mismatch");
    Shape so(sa.size());
    for (size_t i = 0; i < axes.size(); ++i) so[i] = sa[axes[i]];
    DArray out(so);
    permute_copy(val(a).v, out.v, sa, axes, false);
    Var o = push(std::move(out), nodes_[a].needs_grad, {});
    if (nodes_[o].needs_grad)
        nodes_[o].back = [this, a, axes, o] {
            // grad wrt input: scatter output grad back through the same map
            auto& ga = g(a);
            permute_copy(nodes_[o].grad, ga, nodes_[a].val.shape, axes, true);
        };
    return o;
}

Tape::Var Tape::slice_lastdim(Var a, int64_t start, int64_t len) {
    const Shape& sa = shape(a);
    const int64_t d = sa.back();
    if (start < 0 || len <= 0 || start + len > d)
        throw std::invalid_argument("slice_lastdim: out of range");
    Shape so = sa;
    so.back() = len;
    DArray out(so);
    const auto& av = val(a).v;
    const int64_t rows = numel(sa) / d;
    for (int64_t r = 0; r < rows; ++r)
        std::copy(av.begin() + r * d + start, av.begin() + r * d + start + len,
                  out.v.begin() + r * len);
    Var o = push(std::move(out), nodes_[a].needs_grad, {});
    if (nodes_[o].needs_grad)
        nodes_[o].back = [this, a, start, len, d, rows, o] {
            const auto& go = nodes_[o].grad;
            auto& ga = g(a);
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < len; ++j) ga[r * d + start + j] += go[r * len + j];
        };
    return o;
}

Tape::Var Tape::mean_axis(Var a, int axis) {
    const Shape& sa = shape(a);
    if (axis < 0 || axis >= static_cast<int>(sa.size()))
        throw std::invalid_argument("mean_axis: bad axis");
    Shape so;
    for (size_t i = 0; i < sa.size(); ++i)
        if (static_cast<int>(i) != axis) so.push_back(sa[i]);
    if (so.empty()) so.push_back(1);
    const int64_t n_ax = sa[axis];
    const auto st = strides_of(sa);
    const int64_t outer = numel(Shape(sa.begin(), sa.begin() + axis));
    const int64_t inner = st[axis];
    DArray out(so);
    const auto& av = val(a).v;
    for (int64_t ou = 0; ou < outer; ++ou)
        for (int64_t in = 0; in < inner; ++in) {
            double acc = 0.0;
            for (int64_t x = 0; x < n_ax; ++x) acc += av[ou * n_ax * inner + x * inner + in];
            out.v[ou * inner + in] = acc / static_cast<double>(n_ax);
        }
    Var o = push(std::move(out), nodes_[a].needs_grad, {});
    if (nodes_[o].needs_grad)
        nodes_[o].back = [this, a, n_ax, inner, outer, o] {
            const auto& go = nodes_[o].grad;
            auto& ga = g(a);
            for (int64_t ou = 0; ou < outer; ++ou)
                for (int64_t in = 0; in < inner; ++in) {
                    const double gg = go[ou * inner + in] / static_cast<double>(n_ax);
                    for (int64_t x = 0; x < n_ax; ++x)
                        ga[ou * n_ax * inner + x * inner + in] += gg;
                }
        };
    return o;
}

Tape::Var Tape::sum_all(Var a) {
    double acc = 0.0;
    for (double x : val(a).v) acc += x;
    DArray out(Shape{1});
    out.v[0] = acc;
    Var o = push(std::move(out), nodes_[a].needs_grad, {});
    if (nodes_[o].needs_grad)
        nodes_[o].back = [this, a, o] {
            const double gg = nodes_[o].grad[0];
            auto& ga = g(a);
            for (auto& x : ga) x += gg;
        };
    return o;
}

Tape::Var Tape::mean_all(Var a) {
    return scale(sum_all(a), 1.0 / static_cast<double>(val(a).size()));
}

Tape::Var Tape::matmul(Var a, Var b) {
    const Shape& sa = shape(a);
    const Shape& sb = shape(b);
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(sa) + " x " +
                                    shape_str(sb));
    const int64_t m = sa[0], k = sa[1], n = sb[1];
    DArray out(Shape{m, n});
    gemm(val(a).v.data(), val(b).v.data(), out.v.data(), m, k, n, false, false, false);
    Var o = push(std::move(out), nodes_[a].needs_grad || nodes_[b].needs_grad, {});
    if (nodes_[o].needs_grad)
        nodes_[o].back = [this, a, b, m, k, n, o] {
            const auto& go = nodes_[o].grad;
            if (nodes_[a].needs_grad)
                gemm(go.data(), nodes_[b].val.v.data(), g(a).data(), m, n, k, false, true, true);
            if (nodes_[b].needs_grad)
                gemm(nodes_[a].val.v.data(), go.data(), g(b).data(), k, m, n, true, false, true);
        };
    return o;
}

Tape::Var Tape::linear(Var x, Var w) {
    const Shape& sx = shape(x);
    const Shape& sw = shape(w);
    if (sw.size() != 2 || sx.empty() || sx.back() != sw[0])
        throw std::invalid_argument("linear: incompatible shapes " + shape_str(sx) + " x " +
                                    shape_str(sw));
    const int64_t din = sw[0], dout = sw[1];
    const int64_t rows = numel(sx) / din;
    Shape so = sx;
    so.back() = dout;
    DArray out(so);
    gemm(val(x).v.data(), val(w).v.data(), out.v.data(), rows, din, dout, false, false, false);
    Var o = push(std::move(out), nodes_[x].needs_grad || nodes_[w].needs_grad, {});
    if (nodes_[o].needs_grad)
        nodes_[o].back = [this, x, w, rows, din, dout, o] {
            const auto& go = nodes_[o].grad;
            if (nodes_[x].needs_grad)
                gemm(go.data(), nodes_[w].val.v.data(), g(x).data(), rows, dout, din, false, true, true);
            if (nodes_[w].needs_grad)
                gemm(nodes_[x].val.v.data(), go.data(), g(w).data(), din, rows, dout, true, false, true);
        };
    return o;
}

Tape::Var Tape::linear_bias(Var x, Var w, Var b) { return add_lastdim(linear(x, w), b); }

Tape::Var Tape::bmm(Var a, Var b) {
    const Shape& sa = shape(a);
    const Shape& sb = shape(b);
    if (sa.size() < 2 || sa.size() != sb.size() ||
        !std::equal(sa.begin(), sa.end() - 2, sb.begin()) || sa.back() != sb[sb.size() - 2])
        throw std::invalid_argument("bmm: incompatible shapes " + shape_str(sa) + " x " +
                                    shape_str(sb));
    const int64_t m = sa[sa.size() - 2], k = sa.back(), n = sb.back();
    const int64_t batch = numel(sa) / (m * k);
    Shape so = sa;
    so.back() = n;
    DArray out(so);
    const auto& av = val(a).v;
    const auto& bv = val(b).v;
    for (int64_t i = 0; i < batch; ++i)
        gemm(av.data() + i * m * k, bv.data() + i * k * n, out.v.data() + i * m * n,
             m, k, n, false, false, false);
    Var o = push(std::move(out), nodes_[a].needs_grad || nodes_[b].needs_grad, {});
    if (nodes_[o].needs_grad)
        nodes_[o].back = [this, a, b, m, k, n, batch, o] {
            const auto& go = nodes_[o].grad;
            const auto& av2 = nodes_[a].val.v;
            const auto& bv2 = nodes_[b].val.v;
            for (int64_t i = 0; i < batch; ++i) {
                if (nodes_[a].needs_grad)
                    gemm(go.data() + i * m * n, bv2.data() + i * k * n, g(a).data() + i * m * k,
                         m, n, k, false, true, true);
                if (nodes_[b].needs_grad)
                    gemm(av2.data() + i * m * k, go.data() + i * m * n, g(b).data() + i * k * n,
                         k, m, n, true, false, true);
            }
        };
    return o;
}

Tape::Var Tape::bmm_nt(Var a, Var b) {
    const Shape& sa = shape(a);
    const Shape& sb = shape(b);
    if (sa.size() < 2 || sa.size() != sb.size() ||
        !std::equal(sa.begin(), sa.end() - 2, sb.begin()) || sa.back() != sb.back())
        throw std::invalid_argument("bmm_nt: incompatible shapes " + shape_str(sa) + " x " +
                                    shape_str(sb));
    const int64_t m = sa[sa.size() - 2], k = sa.back(), n = sb[sb.size() - 2];
    const int64_t batch = numel(sa) / (m * k);
    Shape so = sa;
    so.back() = n;
    DArray out(so);
    const auto& av = val(a).v;
    const auto& bv = val(b).v;
    for (int64_t i = 0; i < batch; ++i)
        gemm(av.data() + i * m * k, bv.data() + i * n * k, out.v.data() + i * m * n,
             m, k, n, false, true, false);
    Var o = push(std::move(out), nodes_[a].needs_grad || nodes_[b].needs_grad, {});
    if (nodes_[o].needs_grad)
        nodes_[o].back = [this, a, b, m, k, n, batch, o] {
            const auto& go = nodes_[o].grad;
            const auto& av2 = nodes_[a].val.v;
            const auto& bv2 = nodes_[b].val.v;
            for (int64_t i = 0; i < batch; ++i) {
                // out = A B^T  =>  dA = dOut B ; dB = dOut^T A
                if (nodes_[a].needs_grad)
                    gemm(go.data() + i * m * n, bv2.data() + i * n * k, g(a).data() + i * m * k,
                         m, n, k, false, false, true);
                if (nodes_[b].needs_grad)
                    gemm(go.data() + i * m * n, av2.data() + i * m * k, g(b).data() + i * n * k,
                         n, m, k, true, false, true);
            }
        };
    return o;
}

Tape::Var Tape::rmsnorm(Var x, Var gain, double eps) {
    const Shape& sx = shape(x);
    const Shape& sg = shape(gain);
    if (sg.size() != 1 || sx.empty() || sx.back() != sg[0])
        throw std::invalid_argument("rmsnorm: " + shape_str(sx) + " with gain " + shape_str(sg));
    if (sg[0] < 1 || eps < 0.0) throw std::invalid_argument("rmsnorm: bad config");
    const int64_t d = sg[0];
    const int64_t rows = numel(sx) / d;
    DArray out(sx);
    const auto& xv = val(x).v;
    const auto& gv = val(gain).v;
    std::vector<double> inv_rms(rows);
    for (int64_t r = 0; r < rows; ++r) {
        double ms = 0.0;
        for (int64_t j = 0; j < d; ++j) ms += xv[r * d + j] * xv[r * d + j];
        ms = ms / static_cast<double>(d) + eps;
        const double ir = 1.0 / std::sqrt(ms);
        inv_rms[r] = ir;
        for (int64_t j = 0; j < d; ++j) out.v[r * d + j] = gv[j] * xv[r * d + j] * ir;
    }
    Var o = push(std::move(out), nodes_[x].needs_grad || nodes_[gain].needs_grad, {});
    if (nodes_[o].needs_grad)
        nodes_[o].back = [this, x, gain, d, rows, inv_rms = std::move(inv_rms), o] {
            const auto& go = nodes_[o].grad;
            const auto& xv2 = nodes_[x].val.v;
            const auto& gv2 = nodes_[gain].val.v;
            for (int64_t r = 0; r < rows; ++r) {
                const double ir = inv_rms[r];
                if (nodes_[x].needs_grad) {
                    double dot = 0.0;  // sum_i go_i g_i x_i
                    for (int64_t j = 0; j < d; ++j)
                        dot += go[r * d + j] * gv2[j] * xv2[r * d + j];
                    auto& gx = g(x);
                    const double c = dot * ir * ir * ir / static_cast<double>(d);
                    for (int64_t j = 0; j < d; ++j)
                        gx[r * d + j] += go[r * d + j] * gv2[j] * ir - xv2[r * d + j] * c;
                }
                if (nodes_[gain].needs_grad) {
                    auto& gg = g(gain);
                    for (int64_t j = 0; j < d; ++j)
                        gg[j] += go[r * d + j] * xv2[r * d + j] * ir;
                }
            }
        };
    return o;
}

Tape::Var Tape::softmax_lastdim(Var x) {
    const Shape& sx = shape(x);
    if (sx.empty() || sx.back() < 1) throw std::invalid_argument("softmax_lastdim: bad shape");
    const int64_t d = sx.back();
    const int64_t rows = numel(sx) / d;
    DArray out(sx);
    const auto& xv = val(x).v;
    for (int64_t r = 0; r < rows; ++r) {
        double mx = xv[r * d];
        for (int64_t j = 1; j < d; ++j) mx = std::max(mx, xv[r * d + j]);
        double z = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            out.v[r * d + j] = std::exp(xv[r * d + j] - mx);
            z += out.v[r * d + j];
        }
        for (int64_t j = 0; j < d; ++j) out.v[r * d + j] /= z;
    }
    Var o = push(std::move(out), nodes_[x].needs_grad, {});
    if (nodes_[o].needs_grad)
        nodes_[o].back = [this, x, d, rows, o] {
            const auto& go = nodes_[o].grad;
            const auto& ov = nodes_[o].val.v;
            auto& gx = g(x);
            for (int64_t r = 0; r < rows; ++r) {
                double dot = 0.0;
                for (int64_t j = 0; j < d; ++j) dot += go[r * d + j] * ov[r * d + j];
                for (int64_t j = 0; j < d; ++j)
                    gx[r * d + j] += ov[r * d + j] * (go[r * d + j] - dot);
            }
        };
    return o;
}

Tape::Var Tape::conv1d_causal_depthwise(Var x, Var w, Var bias) {
    const Shape& sx = shape(x);
    const Shape& sw = shape(w);
    if (sx.size() != 3 || sw.size() != 2 || sx[2] != sw[0])
        throw std::invalid_argument("conv1d: x " + shape_str(sx) + " w " + shape_str(sw));
    const int64_t b = sx[0], s = sx[1], c = sx[2], k = sw[1];
    DArray out(sx);
    const auto& xv = val(x).v;
    const auto& wv = val(w).v;
    const auto& biasv = val(bias).v;
    for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t t = 0; t < s; ++t)
            for (int64_t ci = 0; ci < c; ++ci) {
                double acc = biasv[ci];
                for (int64_t i = 0; i < k; ++i) {
                    const int64_t tau = t - (k - 1) + i;
                    if (tau < 0) continue;
                    acc += wv[ci * k + i] * xv[(bi * s + tau) * c + ci];
                }
                out.v[(bi * s + t) * c + ci] = acc;
            }
    const bool ng = nodes_[x].needs_grad || nodes_[w].needs_grad || nodes_[bias].needs_grad;
    Var o = push(std::move(out), ng, {});
    if (nodes_[o].needs_grad)
        nodes_[o].back = [this, x, w, bias, b, s, c, k, o] {
            const auto& go = nodes_[o].grad;
            const auto& xv2 = nodes_[x].val.v;
            const auto& wv2 = nodes_[w].val.v;
            for (int64_t bi = 0; bi < b; ++bi)
                for (int64_t t = 0; t < s; ++t)
                    for (int64_t ci = 0; ci < c; ++ci) {
                        const double gg = go[(bi * s + t) * c + ci];
                        if (gg == 0.0) continue;
                        for (int64_t i = 0; i < k; ++i) {
                            const int64_t tau = t - (k - 1) + i;
                            if (tau < 0) continue;
                            if (nodes_[x].needs_grad)
                                g(x)[(bi * s + tau) * c + ci] += gg * wv2[ci * k + i];
                            if (nodes_[w].needs_grad)
                                g(w)[ci * k + i] += gg * xv2[(bi * s + tau) * c + ci];
                        }
                        if (nodes_[bias].needs_grad) g(bias)[ci] += gg;
                    }
        };
    return o;
}

namespace {
// Shared forward core for the scalar-decay selective scan, single batch
// element. h buffer is [H, P, N]; states optionally recorded per step.
void scan_forward_one(const double* u, const double* a, const double* B, const double* C,
                      double* y, int64_t s, int64_t H, int64_t P, int64_t N,
                      std::vector<double>* states /* [s,H,P,N] or null */) {
    std::vector<double> h(H * P * N, 0.0);
    for (int64_t t = 0; t < s; ++t) {
        for (int64_t hd = 0; hd < H; ++hd) {
            const double at = a[t * H + hd];
            for (int64_t p = 0; p < P; ++p) {
                double* hp = h.data() + (hd * P + p) * N;
                const double ut = u[(t * H + hd) * P + p];
                double acc = 0.0;
                const double* Bt = B + t * N;
                const double* Ct = C + t * N;
                for (int64_t n = 0; n < N; ++n) {
                    hp[n] = at * hp[n] + Bt[n] * ut;
                    acc += hp[n] * Ct[n];
                }
                y[(t * H + hd) * P + p] = acc;
            }
        }
        if (states)
            std::copy(h.begin(), h.end(), states->begin() + t * H * P * N);
    }
}
}  // namespace

Tape::Var Tape::selective_scan(Var u, Var a, Var B, Var C) {
    const Shape& su = shape(u);
    const Shape& sa = shape(a);
    const Shape& sB = shape(B);
    const Shape& sC = shape(C);
    if (su.size() != 4 || sa.size() != 3 || sB.size() != 3 || sC.size() != 3 ||
        su[0] != sa[0] || su[1] != sa[1] || su[2] != sa[2] ||
        sB[0] != su[0] || sB[1] != su[1] || sC != sB)
        throw std::invalid_argument("selective_scan: bad shapes u=" + shape_str(su) +
                                    " a=" + shape_str(sa) + " B=" + shape_str(sB) +
                                    " C=" + shape_str(sC));
    const int64_t b = su[0], s = su[1], H = su[2], P = su[3], N = sB[2];
    DArray out(su);
    const auto& uv = val(u).v;
    const auto& av = val(a).v;
    const auto& Bv = val(B).v;
    const auto& Cv = val(C).v;
    for (int64_t bi = 0; bi < b; ++bi)
        scan_forward_one(uv.data() + bi * s * H * P, av.data() + bi * s * H,
                         Bv.data() + bi * s * N, Cv.data() + bi * s * N,
                         out.v.data() + bi * s * H * P, s, H, P, N, nullptr);
    const bool ng = nodes_[u].needs_grad || nodes_[a].needs_grad || nodes_[B].needs_grad ||
                    nodes_[C].needs_grad;
    Var o = push(std::move(out), ng, {});
    if (nodes_[o].needs_grad)
        nodes_[o].back = [this, u, a, B, C, b, s, H, P, N, o] {
            const auto& go = nodes_[o].grad;
            const auto& uv2 = nodes_[u].val.v;
            const auto& av2 = nodes_[a].val.v;
            const auto& Bv2 = nodes_[B].val.v;
            const auto& Cv2 = nodes_[C].val.v;
            // States are recomputed per batch element to bound memory.
            std::vector<double> states(s * H * P * N);
            std::vector<double> dh(H * P * N);
            std::vector<double> ytmp(s * H * P);
            for (int64_t bi = 0; bi < b; ++bi) {
                const double* ub = uv2.data() + bi * s * H * P;
                const double* ab = av2.data() + bi * s * H;
                const double* Bb = Bv2.data() + bi * s * N;
                const double* Cb = Cv2.data() + bi * s * N;
                const double* gob = go.data() + bi * s * H * P;
                scan_forward_one(ub, ab, Bb, Cb, ytmp.data(), s, H, P, N, &states);
                std::fill(dh.begin(), dh.end(), 0.0);
                for (int64_t t = s - 1; t >= 0; --t) {
                    const double* Bt = Bb + t * N;
                    const double* Ct = Cb + t * N;
                    const double* ht = states.data() + t * H * P * N;
                    const double* hprev = t > 0 ? states.data() + (t - 1) * H * P * N : nullptr;
                    for (int64_t hd = 0; hd < H; ++hd) {
                        double da_acc = 0.0;
                        for (int64_t p = 0; p < P; ++p) {
                            const double gy = gob[(t * H + hd) * P + p];
                            double* dhp = dh.data() + (hd * P + p) * N;
                            const double* htp = ht + (hd * P + p) * N;
                            // dC_t[n] += gy * h_t[n]
                            if (nodes_[C].needs_grad) {
                                auto& gC = g(C);
                                for (int64_t n = 0; n < N; ++n)
                                    gC[(bi * s + t) * N + n] += gy * htp[n];
                            }
                            double du_acc = 0.0, dB_dot_u = uv2[(bi * s * H + t * H + hd) * P + p];
                            for (int64_t n = 0; n < N; ++n) {
                                dhp[n] += gy * Ct[n];
                                du_acc += dhp[n] * Bt[n];
                                if (hprev) da_acc += dhp[n] * hprev[(hd * P + p) * N + n];
                            }
                            if (nodes_[u].needs_grad)
                                g(u)[(bi * s * H + t * H + hd) * P + p] += du_acc;
                            if (nodes_[B].needs_grad) {
                                auto& gB = g(B);
                                for (int64_t n = 0; n < N; ++n)
                                    gB[(bi * s + t) * N + n] += dhp[n] * dB_dot_u;
                            }
                            // carry: dh_{t-1} = a_t * dh_t
                            const double at = ab[t * H + hd];
                            for (int64_t n = 0; n < N; ++n) dhp[n] *= at;
                        }
                        if (nodes_[a].needs_grad) g(a)[(bi * s + t) * H + hd] += da_acc;
                    }
                }
            }
        };
    return o;
}

Tape::Var Tape::cross_entropy_masked(Var logits, const std::vector<int>& targets,
                                     const std::vector<double>& mask) {
    const Shape& sl = shape(logits);
    if (sl.size() != 3) throw std::invalid_argument("cross_entropy_masked: logits must be rank 3");
    const int64_t rows = sl[0] * sl[1], V = sl[2];
    if (static_cast<int64_t>(targets.size()) != rows || targets.size() != mask.size())
        throw std::invalid_argument("cross_entropy_masked: target/mask size mismatch");
    double mask_total = 0.0;
    for (double m : mask) mask_total += m;
    if (mask_total <= 0.0) throw std::invalid_argument("cross_entropy_masked: all positions masked");
    const auto& lv = val(logits).v;
    std::vector<double> probs(rows * V);
    double loss = 0.0;
    for (int64_t r = 0; r < rows; ++r) {
        double mx = lv[r * V];
        for (int64_t j = 1; j < V; ++j) mx = std::max(mx, lv[r * V + j]);
        double z = 0.0;
        for (int64_t j = 0; j < V; ++j) {
            probs[r * V + j] = std::exp(lv[r * V + j] - mx);
            z += probs[r * V + j];
        }
        for (int64_t j = 0; j < V; ++j) probs[r * V + j] /= z;
        if (mask[r] != 0.0) {
            const int t = targets[r];
            if (t < 0 || t >= V) throw std::invalid_argument("cross_entropy_masked: target out of range");
            loss -= mask[r] * std::log(std::max(probs[r * V + t], 1e-300));
        }
    }
    DArray out(Shape{1});
    out.v[0] = loss / mask_total;
    Var o = push(std::move(out), nodes_[logits].needs_grad, {});
    if (nodes_[o].needs_grad)
        nodes_[o].back = [this, logits, targets, mask, mask_total, rows, V,
                          probs = std::move(probs), o] {
            const double gl = nodes_[o].grad[0] / mask_total;
            auto& gx = g(logits);
            for (int64_t r = 0; r < rows; ++r) {
                if (mask[r] == 0.0) continue;
                const double w = gl * mask[r];
                for (int64_t j = 0; j < V; ++j) gx[r * V + j] += w * probs[r * V + j];
                gx[r * V + targets[r]] -= w;
            }
        };
    return o;
}

Tape::Var Tape::bce_with_logits(Var logits, const std::vector<double>& targets) {
    const int64_t n = val(logits).size();
    if (static_cast<int64_t>(targets.size()) != n)
        throw std::invalid_argument("bce_with_logits: target size mismatch");
    const auto& lv = val(logits).v;
    double loss = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double x = lv[i], t = targets[i];
        loss += std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
    }
    DArray out(Shape{1});
    out.v[0] = loss / static_cast<double>(n);
    Var o = push(std::move(out), nodes_[logits].needs_grad, {});
    if (nodes_[o].needs_grad)
        nodes_[o].back = [this, logits, targets, n, o] {
            const double gl = nodes_[o].grad[0] / static_cast<double>(n);
            const auto& lv2 = nodes_[logits].val.v;
            auto& gx = g(logits);
            for (int64_t i = 0; i < n; ++i) {
                const double s = 1.0 / (1.0 + std::exp(-lv2[i]));
                gx[i] += gl * (s - targets[i]);
            }
        };
    return o;
}

Tape::Var Tape::detach(Var a) { return push(val(a), false, {}); }

void Tape::backward(Var loss_scalar) {
    if (val(loss_scalar).size() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got " +
                                    shape_str(shape(loss_scalar)));
    if (!nodes_[loss_scalar].needs_grad)
        throw std::invalid_argument("backward: loss does not require grad");
    ensure_grad(loss_scalar);
    nodes_[loss_scalar].grad[0] = 1.0;
    for (Var v = loss_scalar; v >= 0; --v) {
        Node& n = nodes_[v];
        if (!n.needs_grad || n.grad.empty()) continue;
        if (n.back) n.back();
        if (n.bound)
            for (size_t i = 0; i < n.grad.size(); ++i) n.bound->grad.v[i] += n.grad[i];
    }
}

void Tape::clear() { nodes_.clear(); }

double check_gradients(const std::function<double(const DArray&)>& f,
                       const DArray& x, const std::vector<double>& analytic_grad,
                       double h) {
    if (analytic_grad.size() != x.v.size())
        throw std::invalid_argument("check_gradients: gradient size mismatch");
    DArray xp = x;
    double max_rel = 0.0;
    for (size_t i = 0; i < x.v.size(); ++i) {
        const double orig = xp.v[i];
        xp.v[i] = orig + h;
        const double fp = f(xp);
        xp.v[i] = orig - h;
        const double fm = f(xp);
        xp.v[i] = orig;
        const double num = (fp - fm) / (2.0 * h);
        const double rel = std::abs(analytic_grad[i] - num) / std::max(1e-8, std::abs(num));
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

}  // namespace trm
