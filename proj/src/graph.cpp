#include "uovn/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace uovn {

namespace {

void check_same_graph(const Value& a, const Value& b) {
    if (a.graph != b.graph) throw DimensionError("values belong to different graphs");
}

void check_same_shape(const Value& a, const Value& b, const char* op) {
    if (!a.val().same_shape(b.val())) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.val().shape()) + " vs " +
                             shape_str(b.val().shape()));
    }
}

// Splits a shape around `axis` into [outer, extent, inner].
struct AxisSplit {
    std::int64_t outer = 1;
    std::int64_t extent = 1;
    std::int64_t inner = 1;
};

AxisSplit split_axis(const std::vector<int>& shape, int axis) {
    if (axis < 0) axis += static_cast<int>(shape.size());
    if (axis < 0 || axis >= static_cast<int>(shape.size())) throw DimensionError("axis out of range");
    AxisSplit s;
    for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
    s.extent = shape[static_cast<std::size_t>(axis)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// Keeps sigmoid outputs strictly inside (0,1) in f32.
float clamped_sigmoid(double x) {
    double v = stable_sigmoid(x);
    const double lo = 1.1754943508222875e-38;  // 2^-126
    const double hi = 1.0 - 5.960464477539063e-08;  // 1 - 2^-24
    if (v < lo) v = lo;
    if (v > hi) v = hi;
    return static_cast<float>(v);
}

// C (+)= op(A) op(B), double accumulation.
void mm_acc(const float* a, const float* b, float* c, int m, int k, int n, bool ta, bool tb) {
    auto A = [&](int i, int j) { return static_cast<double>(ta ? a[static_cast<std::size_t>(j) * m + i]
                                                               : a[static_cast<std::size_t>(i) * k + j]); };
    auto B = [&](int i, int j) { return static_cast<double>(tb ? b[static_cast<std::size_t>(j) * k + i]
                                                               : b[static_cast<std::size_t>(i) * n + j]); };
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += A(i, p) * B(p, j);
            c[static_cast<std::size_t>(i) * n + j] += static_cast<float>(acc);
        }
    }
}

}  // namespace

const Tensor& Value::val() const { return graph->value(*this); }
const std::vector<int>& Value::shape() const { return val().shape(); }

Value Graph::leaf(Tensor t, bool requires_grad) {
    Node n;
    n.value = std::move(t);
    n.requires_grad = requires_grad;
    if (n.value.numel() == 1) n.dval = static_cast<double>(n.value[0]);
    nodes_.push_back(std::move(n));
    return Value{this, static_cast<int>(nodes_.size()) - 1};
}

double Graph::scalar(const Value& v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (n.value.numel() != 1) throw DimensionError("scalar() on non-scalar value");
    if (!std::isnan(n.dval)) return n.dval;
    return static_cast<double>(n.value[0]);
}

std::vector<float> Graph::grad(const Value& v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (!n.grad.empty()) return n.grad;
    return std::vector<float>(static_cast<std::size_t>(n.value.numel()), 0.0f);
}

void Graph::backward(const Value& out) {
    if (out.graph != this) throw DimensionError("backward on foreign value");
    Node& o = nodes_[static_cast<std::size_t>(out.id)];
    if (o.value.numel() != 1) throw DimensionError("backward expects a scalar output");
    if (!o.requires_grad) return;
    grad_buf(out.id)[0] = 1.0f;
    for (int id = out.id; id >= 0; --id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.requires_grad && !n.grad.empty() && n.backward) n.backward(*this);
    }
}

int Graph::add_node(Tensor value, std::vector<int> parents, std::function<void(Graph&)> back, double dval) {
    Node n;
    n.value = std::move(value);
    n.parents = std::move(parents);
    n.requires_grad = any_requires_grad(n.parents);
    if (n.requires_grad) n.backward = std::move(back);
    n.dval = dval;
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

bool Graph::any_requires_grad(const std::vector<int>& ids) const {
    for (int id : ids) {
        if (id >= 0 && nodes_[static_cast<std::size_t>(id)].requires_grad) return true;
    }
    return false;
}

float* Graph::grad_buf(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) n.grad.assign(static_cast<std::size_t>(n.value.numel()), 0.0f);
    return n.grad.data();
}

#define UOVN_EW_BINARY(NAME, FWD_EXPR, DA_EXPR, DB_EXPR)                                                       \
    Value NAME(Value a, Value b) {                                                                             \
        check_same_graph(a, b);                                                                                \
        check_same_shape(a, b, #NAME);                                                                         \
        Graph& g = *a.graph;                                                                                   \
        const Tensor& av = a.val();                                                                            \
        const Tensor& bv = b.val();                                                                            \
        Tensor outt(av.shape());                                                                               \
        const std::int64_t n = av.numel();                                                                     \
        for (std::int64_t i = 0; i < n; ++i) {                                                                 \
            const double x = av[i], y = bv[i];                                                                 \
            outt[i] = static_cast<float>(FWD_EXPR);                                                            \
        }                                                                                                      \
        double dv = std::numeric_limits<double>::quiet_NaN();                                                  \
        if (n == 1) {                                                                                          \
            const double x = g.scalar(a), y = g.scalar(b);                                                     \
            dv = (FWD_EXPR);                                                                                   \
        }                                                                                                      \
        const int ia = a.id, ib = b.id;                                                                        \
        const int out_id = g.size();                                                                           \
        g.add_node(std::move(outt), {ia, ib},                                                                  \
                   [ia, ib, out_id, n](Graph& gg) {                                                            \
                       const float* go = gg.grad_buf(out_id);                                                  \
                       const Tensor& xa = gg.node_value(ia);                                                   \
                       const Tensor& xb = gg.node_value(ib);                                                   \
                       (void)xa;                                                                               \
                       (void)xb;                                                                               \
                       if (gg.node_requires_grad(ia)) {                                                        \
                           float* ga = gg.grad_buf(ia);                                                        \
                           for (std::int64_t i = 0; i < n; ++i) {                                              \
                               const double x = xa[i], y = xb[i], gv = go[i];                                  \
                               (void)x;                                                                        \
                               (void)y;                                                                        \
                               ga[i] += static_cast<float>(DA_EXPR);                                           \
                           }                                                                                   \
                       }                                                                                       \
                       if (gg.node_requires_grad(ib)) {                                                        \
                           float* gb = gg.grad_buf(ib);                                                        \
                           for (std::int64_t i = 0; i < n; ++i) {                                              \
                               const double x = xa[i], y = xb[i], gv = go[i];                                  \
                               (void)x;                                                                        \
                               (void)y;                                                                        \
                               gb[i] += static_cast<float>(DB_EXPR);                                           \
                           }                                                                                   \
                       }                                                                                       \
                   },                                                                                          \
                   dv);                                                                                        \
        return Value{&g, out_id};                                                                              \
    }

UOVN_EW_BINARY(add, x + y, gv, gv)
UOVN_EW_BINARY(sub, x - y, gv, -gv)
UOVN_EW_BINARY(mul, x* y, gv* y, gv* x)
UOVN_EW_BINARY(div, x / y, gv / y, -gv* x / (y * y))
UOVN_EW_BINARY(min_ew, x <= y ? x : y, x <= y ? gv : 0.0, x <= y ? 0.0 : gv)
UOVN_EW_BINARY(max_ew, x >= y ? x : y, x >= y ? gv : 0.0, x >= y ? 0.0 : gv)

#undef UOVN_EW_BINARY

#define UOVN_EW_UNARY(NAME, FWD_EXPR, DX_EXPR)                                                      \
    Value NAME(Value a) {                                                                           \
        Graph& g = *a.graph;                                                                        \
        const Tensor& av = a.val();                                                                 \
        Tensor outt(av.shape());                                                                    \
        const std::int64_t n = av.numel();                                                          \
        for (std::int64_t i = 0; i < n; ++i) {                                                      \
            const double x = av[i];                                                                 \
            outt[i] = static_cast<float>(FWD_EXPR);                                                 \
        }                                                                                           \
        double dv = std::numeric_limits<double>::quiet_NaN();                                       \
        if (n == 1) {                                                                               \
            const double x = g.scalar(a);                                                           \
            dv = (FWD_EXPR);                                                                        \
        }                                                                                           \
        const int ia = a.id;                                                                        \
        const int out_id = g.size();                                                                \
        g.add_node(std::move(outt), {ia},                                                           \
                   [ia, out_id, n](Graph& gg) {                                                     \
                       if (!gg.node_requires_grad(ia)) return;                                      \
                       const float* go = gg.grad_buf(out_id);                                       \
                       const Tensor& xa = gg.node_value(ia);                                        \
                       float* ga = gg.grad_buf(ia);                                                 \
                       for (std::int64_t i = 0; i < n; ++i) {                                       \
                           const double x = xa[i], gv = go[i];                                      \
                           (void)x;                                                                 \
                           ga[i] += static_cast<float>(DX_EXPR);                                    \
                       }                                                                            \
                   },                                                                               \
                   dv);                                                                             \
        return Value{&g, out_id};                                                                   \
    }

UOVN_EW_UNARY(abs_ew, std::fabs(x), x > 0.0 ? gv : (x < 0.0 ? -gv : 0.0))

#undef UOVN_EW_UNARY

Value scale(Value a, double s, double c) {
    Graph& g = *a.graph;
    const Tensor& av = a.val();
    Tensor outt(av.shape());
    const std::int64_t n = av.numel();
    for (std::int64_t i = 0; i < n; ++i) outt[i] = static_cast<float>(s * static_cast<double>(av[i]) + c);
    double dv = std::numeric_limits<double>::quiet_NaN();
    if (n == 1) dv = s * g.scalar(a) + c;
    const int ia = a.id;
    const int out_id = g.size();
    g.add_node(std::move(outt), {ia},
               [ia, out_id, n, s](Graph& gg) {
                   if (!gg.node_requires_grad(ia)) return;
                   const float* go = gg.grad_buf(out_id);
                   float* ga = gg.grad_buf(ia);
                   for (std::int64_t i = 0; i < n; ++i) ga[i] += static_cast<float>(s * go[i]);
               },
               dv);
    return Value{&g, out_id};
}

Value sigmoid(Value x) {
    Graph& g = *x.graph;
    const Tensor& xv = x.val();
    Tensor outt(xv.shape());
    const std::int64_t n = xv.numel();
    for (std::int64_t i = 0; i < n; ++i) outt[i] = clamped_sigmoid(xv[i]);
    const int ix = x.id;
    const int out_id = g.size();
    g.add_node(std::move(outt), {ix}, [ix, out_id, n](Graph& gg) {
        if (!gg.node_requires_grad(ix)) return;
        const float* go = gg.grad_buf(out_id);
        const Tensor& y = gg.node_value(out_id);
        float* gx = gg.grad_buf(ix);
        for (std::int64_t i = 0; i < n; ++i) {
            const double v = y[i];
            gx[i] += static_cast<float>(go[i] * v * (1.0 - v));
        }
    });
    return Value{&g, out_id};
}

Value gelu(Value x) {
    Graph& g = *x.graph;
    const Tensor& xv = x.val();
    Tensor outt(xv.shape());
    const std::int64_t n = xv.numel();
    const double inv_sqrt2 = 0.7071067811865475244;
    for (std::int64_t i = 0; i < n; ++i) {
        const double v = xv[i];
        outt[i] = static_cast<float>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
    }
    const int ix = x.id;
    const int out_id = g.size();
    g.add_node(std::move(outt), {ix}, [ix, out_id, n, inv_sqrt2](Graph& gg) {
        if (!gg.node_requires_grad(ix)) return;
        const float* go = gg.grad_buf(out_id);
        const Tensor& xa = gg.node_value(ix);
        float* gx = gg.grad_buf(ix);
        const double inv_sqrt2pi = 0.3989422804014326779;
        for (std::int64_t i = 0; i < n; ++i) {
            const double v = xa[i];
            const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
            gx[i] += static_cast<float>(go[i] * (cdf + v * pdf));
        }
    });
    return Value{&g, out_id};
}

Value matmul(Value a, Value b, bool trans_a, bool trans_b) {
    check_same_graph(a, b);
    const Tensor& av = a.val();
    const Tensor& bv = b.val();
    if (av.rank() != 2 || bv.rank() != 2) throw DimensionError("matmul expects rank-2 operands");
    const int m = trans_a ? av.dim(1) : av.dim(0);
    const int k = trans_a ? av.dim(0) : av.dim(1);
    const int kb = trans_b ? bv.dim(1) : bv.dim(0);
    const int n = trans_b ? bv.dim(0) : bv.dim(1);
    if (k != kb) {
        throw DimensionError("matmul: inner extents differ: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
    }
    Graph& g = *a.graph;
    Tensor outt({m, n});
    {
        // Recompute op(A)op(B) with the flags folded into index maps.
        const float* ap = av.data();
        const float* bp = bv.data();
        float* cp = outt.data();
        const int lda = av.dim(1);
        const int ldb = bv.dim(1);
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < n; ++j) {
                double acc = 0.0;
                for (int p = 0; p < k; ++p) {
                    const double x = trans_a ? ap[static_cast<std::size_t>(p) * lda + i]
                                             : ap[static_cast<std::size_t>(i) * lda + p];
                    const double y = trans_b ? bp[static_cast<std::size_t>(j) * ldb + p]
                                             : bp[static_cast<std::size_t>(p) * ldb + j];
                    acc += x * y;
                }
                cp[static_cast<std::size_t>(i) * n + j] = static_cast<float>(acc);
            }
        }
    }
    const int ia = a.id, ib = b.id;
    const int out_id = g.size();
    g.add_node(std::move(outt), {ia, ib}, [ia, ib, out_id, m, k, n, trans_a, trans_b](Graph& gg) {
        const float* go = gg.grad_buf(out_id);  // [m,n]
        const Tensor& A = gg.node_value(ia);
        const Tensor& B = gg.node_value(ib);
        if (gg.node_requires_grad(ia)) {
            float* ga = gg.grad_buf(ia);
            if (!trans_a) {
                // dA[m,k] = G op(B)^T
                if (!trans_b) mm_acc(go, B.data(), ga, m, n, k, false, true);
                else mm_acc(go, B.data(), ga, m, n, k, false, false);
            } else {
                // A is [k,m] stored; dA[k,m] = op(B) G^T
                if (!trans_b) mm_acc(B.data(), go, ga, k, n, m, false, true);
                else mm_acc(B.data(), go, ga, k, n, m, true, true);
            }
        }
        if (gg.node_requires_grad(ib)) {
            float* gb = gg.grad_buf(ib);
            if (!trans_b) {
                // dB[k,n] = op(A)^T G
                if (!trans_a) mm_acc(A.data(), go, gb, k, m, n, true, false);
                else mm_acc(A.data(), go, gb, k, m, n, false, false);
            } else {
                // B is [n,k] stored; dB[n,k] = G^T op(A)
                if (!trans_a) mm_acc(go, A.data(), gb, n, m, k, true, false);
                else mm_acc(go, A.data(), gb, n, m, k, true, true);
            }
        }
    });
    return Value{&g, out_id};
}

Value linear_map(Value x, Value w, Value b) {
    check_same_graph(x, w);
    const Tensor& xv = x.val();
    const Tensor& wv = w.val();
    if (wv.rank() != 2) throw DimensionError("linear_map: weight must be rank-2");
    if (xv.rank() < 1) throw DimensionError("linear_map: input must have rank >= 1");
    const int din = xv.shape().back();
    if (din != wv.dim(0)) {
        throw DimensionError("linear_map: input width " + std::to_string(din) + " != weight rows " +
                             std::to_string(wv.dim(0)));
    }
    const int dout = wv.dim(1);
    const bool has_bias = b.valid();
    if (has_bias) {
        check_same_graph(x, b);
        if (b.val().rank() != 1 || b.val().dim(0) != dout) throw DimensionError("linear_map: bias width mismatch");
    }
    const std::int64_t rows = xv.numel() / din;
    Graph& g = *x.graph;
    std::vector<int> out_shape = xv.shape();
    out_shape.back() = dout;
    Tensor outt(out_shape);
    {
        const float* xp = xv.data();
        const float* wp = wv.data();
        const float* bp = has_bias ? b.val().data() : nullptr;
        float* op = outt.data();
        for (std::int64_t r = 0; r < rows; ++r) {
            for (int j = 0; j < dout; ++j) {
                double acc = bp ? static_cast<double>(bp[j]) : 0.0;
                for (int i = 0; i < din; ++i) {
                    acc += static_cast<double>(xp[r * din + i]) * static_cast<double>(wp[static_cast<std::size_t>(i) * dout + j]);
                }
                op[r * dout + j] = static_cast<float>(acc);
            }
        }
    }
    const int ix = x.id, iw = w.id, ib = has_bias ? b.id : -1;
    const int out_id = g.size();
    g.add_node(std::move(outt), has_bias ? std::vector<int>{ix, iw, ib} : std::vector<int>{ix, iw},
               [ix, iw, ib, out_id, rows, din, dout](Graph& gg) {
                   const float* go = gg.grad_buf(out_id);
                   const Tensor& X = gg.node_value(ix);
                   const Tensor& W = gg.node_value(iw);
                   if (gg.node_requires_grad(ix)) {
                       float* gx = gg.grad_buf(ix);
                       for (std::int64_t r = 0; r < rows; ++r) {
                           for (int i = 0; i < din; ++i) {
                               double acc = 0.0;
                               for (int j = 0; j < dout; ++j) {
                                   acc += static_cast<double>(go[r * dout + j]) *
                                          static_cast<double>(W.data()[static_cast<std::size_t>(i) * dout + j]);
                               }
                               gx[r * din + i] += static_cast<float>(acc);
                           }
                       }
                   }
                   if (gg.node_requires_grad(iw)) {
                       float* gw = gg.grad_buf(iw);
                       for (int i = 0; i < din; ++i) {
                           for (int j = 0; j < dout; ++j) {
                               double acc = 0.0;
                               for (std::int64_t r = 0; r < rows; ++r) {
                                   acc += static_cast<double>(X.data()[r * din + i]) * static_cast<double>(go[r * dout + j]);
                               }
                               gw[static_cast<std::size_t>(i) * dout + j] += static_cast<float>(acc);
                           }
                       }
                   }
                   if (ib >= 0 && gg.node_requires_grad(ib)) {
                       float* gb = gg.grad_buf(ib);
                       for (int j = 0; j < dout; ++j) {
                           double acc = 0.0;
                           for (std::int64_t r = 0; r < rows; ++r) acc += static_cast<double>(go[r * dout + j]);
                           gb[j] += static_cast<float>(acc);
                       }
                   }
               });
    return Value{&g, out_id};
}

Value softmax(Value x, int axis) {
    Graph& g = *x.graph;
    const Tensor& xv = x.val();
    const AxisSplit s = split_axis(xv.shape(), axis);
    Tensor outt(xv.shape());
    const float* xp = xv.data();
    float* op = outt.data();
    for (std::int64_t o = 0; o < s.outer; ++o) {
        for (std::int64_t in = 0; in < s.inner; ++in) {
            const std::int64_t base = o * s.extent * s.inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::int64_t e = 0; e < s.extent; ++e) mx = std::max(mx, static_cast<double>(xp[base + e * s.inner]));
            double z = 0.0;
            for (std::int64_t e = 0; e < s.extent; ++e) z += std::exp(static_cast<double>(xp[base + e * s.inner]) - mx);
            for (std::int64_t e = 0; e < s.extent; ++e) {
                op[base + e * s.inner] = static_cast<float>(std::exp(static_cast<double>(xp[base + e * s.inner]) - mx) / z);
            }
        }
    }
    const int ix = x.id;
    const int out_id = g.size();
    g.add_node(std::move(outt), {ix}, [ix, out_id, s](Graph& gg) {
        if (!gg.node_requires_grad(ix)) return;
        const float* go = gg.grad_buf(out_id);
        const Tensor& y = gg.node_value(out_id);
        float* gx = gg.grad_buf(ix);
        for (std::int64_t o = 0; o < s.outer; ++o) {
            for (std::int64_t in = 0; in < s.inner; ++in) {
                const std::int64_t base = o * s.extent * s.inner + in;
                double dotgy = 0.0;
                for (std::int64_t e = 0; e < s.extent; ++e) {
                    dotgy += static_cast<double>(go[base + e * s.inner]) * static_cast<double>(y[base + e * s.inner]);
                }
                for (std::int64_t e = 0; e < s.extent; ++e) {
                    const double yv = y[base + e * s.inner];
                    gx[base + e * s.inner] += static_cast<float>(yv * (static_cast<double>(go[base + e * s.inner]) - dotgy));
                }
            }
        }
    });
    return Value{&g, out_id};
}

Value layer_norm(Value x, Value gain, Value bias, double eps) {
    check_same_graph(x, gain);
    check_same_graph(x, bias);
    const Tensor& xv = x.val();
    const int d = xv.shape().back();
    if (d < 1) throw DimensionError("layer_norm: empty last axis");
    if (gain.val().numel() != d || bias.val().numel() != d) throw DimensionError("layer_norm: affine width mismatch");
    const std::int64_t rows = xv.numel() / d;
    Graph& g = *x.graph;
    Tensor outt(xv.shape());
    std::vector<double> inv_std(static_cast<std::size_t>(rows));
    std::vector<double> means(static_cast<std::size_t>(rows));
    {
        const float* xp = xv.data();
        const float* gp = gain.val().data();
        const float* bp = bias.val().data();
        float* op = outt.data();
        for (std::int64_t r = 0; r < rows; ++r) {
            double mu = 0.0;
            for (int i = 0; i < d; ++i) mu += xp[r * d + i];
            mu /= d;
            double var = 0.0;
            for (int i = 0; i < d; ++i) {
                const double c = xp[r * d + i] - mu;
                var += c * c;
            }
            var /= d;
            const double inv = 1.0 / std::sqrt(var + eps);
            means[static_cast<std::size_t>(r)] = mu;
            inv_std[static_cast<std::size_t>(r)] = inv;
            for (int i = 0; i < d; ++i) {
                const double xhat = (xp[r * d + i] - mu) * inv;
                op[r * d + i] = static_cast<float>(xhat * gp[i] + bp[i]);
            }
        }
    }
    const int ix = x.id, ig = gain.id, ib = bias.id;
    const int out_id = g.size();
    g.add_node(std::move(outt), {ix, ig, ib},
               [ix, ig, ib, out_id, rows, d, means, inv_std](Graph& gg) {
                   const float* go = gg.grad_buf(out_id);
                   const Tensor& X = gg.node_value(ix);
                   const Tensor& G = gg.node_value(ig);
                   const bool need_x = gg.node_requires_grad(ix);
                   const bool need_g = gg.node_requires_grad(ig);
                   const bool need_b = gg.node_requires_grad(ib);
                   float* gx = need_x ? gg.grad_buf(ix) : nullptr;
                   float* ggain = need_g ? gg.grad_buf(ig) : nullptr;
                   float* gbias = need_b ? gg.grad_buf(ib) : nullptr;
                   for (std::int64_t r = 0; r < rows; ++r) {
                       const double mu = means[static_cast<std::size_t>(r)];
                       const double inv = inv_std[static_cast<std::size_t>(r)];
                       double m1 = 0.0, m2 = 0.0;
                       for (int i = 0; i < d; ++i) {
                           const double xhat = (X[r * d + i] - mu) * inv;
                           const double dxh = static_cast<double>(go[r * d + i]) * G[i];
                           m1 += dxh;
                           m2 += dxh * xhat;
                           if (need_g) ggain[i] += static_cast<float>(go[r * d + i] * xhat);
                           if (need_b) gbias[i] += go[r * d + i];
                       }
                       if (need_x) {
                           m1 /= d;
                           m2 /= d;
                           for (int i = 0; i < d; ++i) {
                               const double xhat = (X[r * d + i] - mu) * inv;
                               const double dxh = static_cast<double>(go[r * d + i]) * G[i];
                               gx[r * d + i] += static_cast<float>(inv * (dxh - m1 - xhat * m2));
                           }
                       }
                   }
               });
    return Value{&g, out_id};
}

Value l2_normalize_rows(Value x) {
    Graph& g = *x.graph;
    const Tensor& xv = x.val();
    if (xv.rank() != 2) throw DimensionError("l2_normalize_rows expects rank-2");
    const int r = xv.dim(0), d = xv.dim(1);
    Tensor outt(xv.shape());
    std::vector<double> norms(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) {
        double s = 1e-12;
        for (int j = 0; j < d; ++j) {
            const double v = xv.at(i, j);
            s += v * v;
        }
        const double n = std::sqrt(s);
        norms[static_cast<std::size_t>(i)] = n;
        for (int j = 0; j < d; ++j) outt.at(i, j) = static_cast<float>(xv.at(i, j) / n);
    }
    const int ix = x.id;
    const int out_id = g.size();
    g.add_node(std::move(outt), {ix}, [ix, out_id, r, d, norms](Graph& gg) {
        if (!gg.node_requires_grad(ix)) return;
        const float* go = gg.grad_buf(out_id);
        const Tensor& X = gg.node_value(ix);
        float* gx = gg.grad_buf(ix);
        for (int i = 0; i < r; ++i) {
            const double n = norms[static_cast<std::size_t>(i)];
            double xg = 0.0;
            for (int j = 0; j < d; ++j) xg += static_cast<double>(X.at(i, j)) * go[static_cast<std::size_t>(i) * d + j];
            for (int j = 0; j < d; ++j) {
                const double gv = go[static_cast<std::size_t>(i) * d + j];
                gx[static_cast<std::size_t>(i) * d + j] +=
                    static_cast<float>(gv / n - static_cast<double>(X.at(i, j)) * xg / (n * n * n));
            }
        }
    });
    return Value{&g, out_id};
}

Value reshape(Value x, std::vector<int> shape) {
    Graph& g = *x.graph;
    const Tensor& xv = x.val();
    if (shape_numel(shape) != xv.numel()) {
        throw DimensionError("reshape: element count mismatch " + shape_str(xv.shape()) + " -> " + shape_str(shape));
    }
    Tensor outt(std::move(shape), xv.vec());
    const int ix = x.id;
    const int out_id = g.size();
    const std::int64_t n = xv.numel();
    g.add_node(std::move(outt), {ix}, [ix, out_id, n](Graph& gg) {
        if (!gg.node_requires_grad(ix)) return;
        const float* go = gg.grad_buf(out_id);
        float* gx = gg.grad_buf(ix);
        for (std::int64_t i = 0; i < n; ++i) gx[i] += go[i];
    });
    return Value{&g, out_id};
}

Value slice(Value x, int axis, int begin, int end) {
    Graph& g = *x.graph;
    const Tensor& xv = x.val();
    const AxisSplit s = split_axis(xv.shape(), axis);
    if (axis < 0) axis += xv.rank();
    if (begin < 0 || end > s.extent || begin >= end) throw DimensionError("slice: bad range");
    std::vector<int> out_shape = xv.shape();
    out_shape[static_cast<std::size_t>(axis)] = end - begin;
    Tensor outt(out_shape);
    const std::int64_t span = static_cast<std::int64_t>(end - begin) * s.inner;
    for (std::int64_t o = 0; o < s.outer; ++o) {
        std::memcpy(outt.data() + o * span, xv.data() + (o * s.extent + begin) * s.inner,
                    static_cast<std::size_t>(span) * sizeof(float));
    }
    const int ix = x.id;
    const int out_id = g.size();
    g.add_node(std::move(outt), {ix}, [ix, out_id, s, begin, span](Graph& gg) {
        if (!gg.node_requires_grad(ix)) return;
        const float* go = gg.grad_buf(out_id);
        float* gx = gg.grad_buf(ix);
        for (std::int64_t o = 0; o < s.outer; ++o) {
            float* dst = gx + (o * s.extent + begin) * s.inner;
            const float* src = go + o * span;
            for (std::int64_t i = 0; i < span; ++i) dst[i] += src[i];
        }
    });
    return Value{&g, out_id};
}

Value concat(int axis, const std::vector<Value>& parts) {
    if (parts.empty()) throw DimensionError("concat: no parts");
    Graph& g = *parts[0].graph;
    const int rank = parts[0].val().rank();
    if (axis < 0) axis += rank;
    std::vector<int> out_shape = parts[0].val().shape();
    int total = 0;
    for (const Value& p : parts) {
        check_same_graph(parts[0], p);
        const auto& sh = p.val().shape();
        if (static_cast<int>(sh.size()) != rank) throw DimensionError("concat: rank mismatch");
        for (int i = 0; i < rank; ++i) {
            if (i != axis && sh[static_cast<std::size_t>(i)] != out_shape[static_cast<std::size_t>(i)]) {
                throw DimensionError("concat: incompatible shapes");
            }
        }
        total += sh[static_cast<std::size_t>(axis)];
    }
    out_shape[static_cast<std::size_t>(axis)] = total;
    const AxisSplit so = split_axis(out_shape, axis);
    Tensor outt(out_shape);
    std::vector<int> ids;
    std::vector<std::int64_t> spans;
    std::int64_t off = 0;
    for (const Value& p : parts) {
        const AxisSplit sp = split_axis(p.val().shape(), axis);
        const std::int64_t span = sp.extent * sp.inner;
        for (std::int64_t o = 0; o < sp.outer; ++o) {
            std::memcpy(outt.data() + o * so.extent * so.inner + off, p.val().data() + o * span,
                        static_cast<std::size_t>(span) * sizeof(float));
        }
        ids.push_back(p.id);
        spans.push_back(span);
        off += span;
    }
    const int out_id = g.size();
    g.add_node(std::move(outt), ids, [ids, spans, so, out_id](Graph& gg) {
        const float* go = gg.grad_buf(out_id);
        std::int64_t off2 = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            const std::int64_t span = spans[k];
            if (gg.node_requires_grad(ids[k])) {
                float* gp = gg.grad_buf(ids[k]);
                for (std::int64_t o = 0; o < so.outer; ++o) {
                    const float* src = go + o * so.extent * so.inner + off2;
                    float* dst = gp + o * span;
                    for (std::int64_t i = 0; i < span; ++i) dst[i] += src[i];
                }
            }
            off2 += span;
        }
    });
    return Value{&g, out_id};
}

Value gather_rows(Value x, std::vector<int> rows) {
    Graph& g = *x.graph;
    const Tensor& xv = x.val();
    if (xv.rank() != 2) throw DimensionError("gather_rows expects rank-2");
    const int d = xv.dim(1);
    for (int r : rows) {
        if (r < 0 || r >= xv.dim(0)) throw DimensionError("gather_rows: index out of range");
    }
    Tensor outt({static_cast<int>(rows.size()), d});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::memcpy(outt.data() + i * static_cast<std::size_t>(d), xv.data() + static_cast<std::size_t>(rows[i]) * d,
                    static_cast<std::size_t>(d) * sizeof(float));
    }
    const int ix = x.id;
    const int out_id = g.size();
    g.add_node(std::move(outt), {ix}, [ix, out_id, rows, d](Graph& gg) {
        if (!gg.node_requires_grad(ix)) return;
        const float* go = gg.grad_buf(out_id);
        float* gx = gg.grad_buf(ix);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            float* dst = gx + static_cast<std::size_t>(rows[i]) * d;
            const float* src = go + i * static_cast<std::size_t>(d);
            for (int j = 0; j < d; ++j) dst[j] += src[j];
        }
    });
    return Value{&g, out_id};
}

Value sum(Value x) {
    Graph& g = *x.graph;
    const Tensor& xv = x.val();
    double acc = 0.0;
    for (std::int64_t i = 0; i < xv.numel(); ++i) acc += xv[i];
    const int ix = x.id;
    const int out_id = g.size();
    const std::int64_t n = xv.numel();
    g.add_node(Tensor::scalar(static_cast<float>(acc)), {ix},
               [ix, out_id, n](Graph& gg) {
                   if (!gg.node_requires_grad(ix)) return;
                   const float gv = gg.grad_buf(out_id)[0];
                   float* gx = gg.grad_buf(ix);
                   for (std::int64_t i = 0; i < n; ++i) gx[i] += gv;
               },
               acc);
    return Value{&g, out_id};
}

Value mean(Value x) {
    const std::int64_t n = x.val().numel();
    return scale(sum(x), 1.0 / static_cast<double>(n));
}

Value mean_rows(Value x) {
    Graph& g = *x.graph;
    const Tensor& xv = x.val();
    if (xv.rank() != 2) throw DimensionError("mean_rows expects rank-2");
    const int r = xv.dim(0), d = xv.dim(1);
    if (r < 1) throw DimensionError("mean_rows: no rows");
    Tensor outt({d});
    for (int j = 0; j < d; ++j) {
        double acc = 0.0;
        for (int i = 0; i < r; ++i) acc += xv.at(i, j);
        outt[j] = static_cast<float>(acc / r);
    }
    const int ix = x.id;
    const int out_id = g.size();
    g.add_node(std::move(outt), {ix}, [ix, out_id, r, d](Graph& gg) {
        if (!gg.node_requires_grad(ix)) return;
        const float* go = gg.grad_buf(out_id);
        float* gx = gg.grad_buf(ix);
        for (int i = 0; i < r; ++i) {
            for (int j = 0; j < d; ++j) gx[static_cast<std::size_t>(i) * d + j] += static_cast<float>(go[j] / static_cast<double>(r));
        }
    });
    return Value{&g, out_id};
}

Value dot(Value a, Value b) {
    check_same_graph(a, b);
    check_same_shape(a, b, "dot");
    Graph& g = *a.graph;
    const Tensor& av = a.val();
    const Tensor& bv = b.val();
    double acc = 0.0;
    for (std::int64_t i = 0; i < av.numel(); ++i) acc += static_cast<double>(av[i]) * static_cast<double>(bv[i]);
    const int ia = a.id, ib = b.id;
    const int out_id = g.size();
    const std::int64_t n = av.numel();
    g.add_node(Tensor::scalar(static_cast<float>(acc)), {ia, ib},
               [ia, ib, out_id, n](Graph& gg) {
                   const float gv = gg.grad_buf(out_id)[0];
                   const Tensor& A = gg.node_value(ia);
                   const Tensor& B = gg.node_value(ib);
                   if (gg.node_requires_grad(ia)) {
                       float* ga = gg.grad_buf(ia);
                       for (std::int64_t i = 0; i < n; ++i) ga[i] += gv * B[i];
                   }
                   if (gg.node_requires_grad(ib)) {
                       float* gb = gg.grad_buf(ib);
                       for (std::int64_t i = 0; i < n; ++i) gb[i] += gv * A[i];
                   }
               },
               acc);
    return Value{&g, out_id};
}

Value cosine(Value a, Value b) {
    check_same_graph(a, b);
    check_same_shape(a, b, "cosine");
    Graph& g = *a.graph;
    const Tensor& av = a.val();
    const Tensor& bv = b.val();
    const std::int64_t n = av.numel();
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        sab += static_cast<double>(av[i]) * bv[i];
        saa += static_cast<double>(av[i]) * av[i];
        sbb += static_cast<double>(bv[i]) * bv[i];
    }
    const double na = std::sqrt(saa), nb = std::sqrt(sbb);
    const bool degenerate = na < 1e-20 || nb < 1e-20;
    const double c = degenerate ? 0.0 : sab / (na * nb);
    const int ia = a.id, ib = b.id;
    const int out_id = g.size();
    g.add_node(Tensor::scalar(static_cast<float>(c)), {ia, ib},
               [ia, ib, out_id, n, na, nb, c, degenerate](Graph& gg) {
                   if (degenerate) return;
                   const double gv = gg.grad_buf(out_id)[0];
                   const Tensor& A = gg.node_value(ia);
                   const Tensor& B = gg.node_value(ib);
                   if (gg.node_requires_grad(ia)) {
                       float* ga = gg.grad_buf(ia);
                       for (std::int64_t i = 0; i < n; ++i) {
                           ga[i] += static_cast<float>(gv * (B[i] / (na * nb) - c * A[i] / (na * na)));
                       }
                   }
                   if (gg.node_requires_grad(ib)) {
                       float* gb = gg.grad_buf(ib);
                       for (std::int64_t i = 0; i < n; ++i) {
                           gb[i] += static_cast<float>(gv * (A[i] / (na * nb) - c * B[i] / (nb * nb)));
                       }
                   }
               },
               c);
    return Value{&g, out_id};
}

Value bilinear_sample(Value map, Value points) {
    check_same_graph(map, points);
    const Tensor& mv = map.val();
    const Tensor& pv = points.val();
    if (mv.rank() != 3) throw DimensionError("bilinear_sample: map must be [H,W,D]");
    if (pv.rank() != 2 || pv.dim(1) != 2) throw DimensionError("bilinear_sample: points must be [P,2]");
    const int h = mv.dim(0), w = mv.dim(1), d = mv.dim(2), p = pv.dim(0);
    Tensor outt({p, d});
    // Per-point corner indices and weights, reused by the backward pass.
    struct Corner {
        int x0, x1, y0, y1;
        double fx, fy;
        bool clamped_x, clamped_y;
    };
    std::vector<Corner> corners(static_cast<std::size_t>(p));
    for (int i = 0; i < p; ++i) {
        double cx = pv.at(i, 0);
        double cy = pv.at(i, 1);
        Corner c{};
        c.clamped_x = cx < 0.0 || cx > w - 1;
        c.clamped_y = cy < 0.0 || cy > h - 1;
        cx = std::min(std::max(cx, 0.0), static_cast<double>(w - 1));
        cy = std::min(std::max(cy, 0.0), static_cast<double>(h - 1));
        c.x0 = static_cast<int>(std::floor(cx));
        c.y0 = static_cast<int>(std::floor(cy));
        c.x1 = std::min(c.x0 + 1, w - 1);
        c.y1 = std::min(c.y0 + 1, h - 1);
        c.fx = cx - c.x0;
        c.fy = cy - c.y0;
        corners[static_cast<std::size_t>(i)] = c;
        for (int ch = 0; ch < d; ++ch) {
            const double v00 = mv.at(c.y0, c.x0, ch);
            const double v01 = mv.at(c.y0, c.x1, ch);
            const double v10 = mv.at(c.y1, c.x0, ch);
            const double v11 = mv.at(c.y1, c.x1, ch);
            outt.at(i, ch) = static_cast<float>((1.0 - c.fy) * ((1.0 - c.fx) * v00 + c.fx * v01) +
                                                c.fy * ((1.0 - c.fx) * v10 + c.fx * v11));
        }
    }
    const int im = map.id, ip = points.id;
    Graph& g = *map.graph;
    const int out_id = g.size();
    g.add_node(std::move(outt), {im, ip}, [im, ip, out_id, p, d, corners](Graph& gg) {
        const float* go = gg.grad_buf(out_id);
        const Tensor& M = gg.node_value(im);
        const bool need_map = gg.node_requires_grad(im);
        const bool need_pts = gg.node_requires_grad(ip);
        float* gm = need_map ? gg.grad_buf(im) : nullptr;
        float* gp = need_pts ? gg.grad_buf(ip) : nullptr;
        const int w = M.dim(1);
        const int dd = M.dim(2);
        for (int i = 0; i < p; ++i) {
            const auto& c = corners[static_cast<std::size_t>(i)];
            double gx = 0.0, gy = 0.0;
            for (int ch = 0; ch < d; ++ch) {
                const double gv = go[static_cast<std::size_t>(i) * d + ch];
                const double v00 = M.at(c.y0, c.x0, ch);
                const double v01 = M.at(c.y0, c.x1, ch);
                const double v10 = M.at(c.y1, c.x0, ch);
                const double v11 = M.at(c.y1, c.x1, ch);
                if (need_map) {
                    gm[(static_cast<std::size_t>(c.y0) * w + c.x0) * dd + ch] += static_cast<float>(gv * (1.0 - c.fy) * (1.0 - c.fx));
                    gm[(static_cast<std::size_t>(c.y0) * w + c.x1) * dd + ch] += static_cast<float>(gv * (1.0 - c.fy) * c.fx);
                    gm[(static_cast<std::size_t>(c.y1) * w + c.x0) * dd + ch] += static_cast<float>(gv * c.fy * (1.0 - c.fx));
                    gm[(static_cast<std::size_t>(c.y1) * w + c.x1) * dd + ch] += static_cast<float>(gv * c.fy * c.fx);
                }
                if (need_pts) {
                    gx += gv * ((1.0 - c.fy) * (v01 - v00) + c.fy * (v11 - v10));
                    gy += gv * ((1.0 - c.fx) * (v10 - v00) + c.fx * (v11 - v01));
                }
            }
            if (need_pts) {
                if (!c.clamped_x) gp[static_cast<std::size_t>(i) * 2 + 0] += static_cast<float>(gx);
                if (!c.clamped_y) gp[static_cast<std::size_t>(i) * 2 + 1] += static_cast<float>(gy);
            }
        }
    });
    return Value{&g, out_id};
}

Value conv2d(Value x, Value w, Value b, int stride) {
    check_same_graph(x, w);
    check_same_graph(x, b);
    const Tensor& xv = x.val();
    const Tensor& wv = w.val();
    if (xv.rank() != 3 || wv.rank() != 4) throw DimensionError("conv2d: expects [H,W,Cin] and [kh,kw,Cin,Cout]");
    const int h = xv.dim(0), iw = xv.dim(1), cin = xv.dim(2);
    const int kh = wv.dim(0), kw = wv.dim(1), cout = wv.dim(3);
    if (wv.dim(2) != cin) throw DimensionError("conv2d: channel mismatch");
    if ((h - kh) % stride != 0 || (iw - kw) % stride != 0) throw DimensionError("conv2d: size/stride mismatch");
    const int oh = (h - kh) / stride + 1;
    const int ow = (iw - kw) / stride + 1;
    Graph& g = *x.graph;
    Tensor outt({oh, ow, cout});
    {
        const float* bp = b.val().data();
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                for (int co = 0; co < cout; ++co) {
                    double acc = bp[co];
                    for (int ky = 0; ky < kh; ++ky) {
                        for (int kx = 0; kx < kw; ++kx) {
                            for (int ci = 0; ci < cin; ++ci) {
                                const std::size_t wi = ((static_cast<std::size_t>(ky) * kw + kx) * cin + ci) * cout + co;
                                acc += static_cast<double>(xv.at(oy * stride + ky, ox * stride + kx, ci)) *
                                       static_cast<double>(wv[static_cast<std::int64_t>(wi)]);
                            }
                        }
                    }
                    outt.at(oy, ox, co) = static_cast<float>(acc);
                }
            }
        }
    }
    const int ix = x.id, iwid = w.id, ib = b.id;
    const int out_id = g.size();
    g.add_node(std::move(outt), {ix, iwid, ib}, [ix, iwid, ib, out_id, oh, ow, cout, kh, kw, cin, stride](Graph& gg) {
        const float* go = gg.grad_buf(out_id);
        const Tensor& X = gg.node_value(ix);
        const Tensor& W = gg.node_value(iwid);
        const bool nx = gg.node_requires_grad(ix);
        const bool nw = gg.node_requires_grad(iwid);
        const bool nb = gg.node_requires_grad(ib);
        float* gx = nx ? gg.grad_buf(ix) : nullptr;
        float* gw = nw ? gg.grad_buf(iwid) : nullptr;
        float* gb = nb ? gg.grad_buf(ib) : nullptr;
        const int iww = X.dim(1);
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                for (int co = 0; co < cout; ++co) {
                    const double gv = go[(static_cast<std::size_t>(oy) * ow + ox) * cout + co];
                    if (nb) gb[co] += static_cast<float>(gv);
                    for (int ky = 0; ky < kh; ++ky) {
                        for (int kx = 0; kx < kw; ++kx) {
                            for (int ci = 0; ci < cin; ++ci) {
                                const std::size_t xi =
                                    (static_cast<std::size_t>(oy * stride + ky) * iww + (ox * stride + kx)) * cin + ci;
                                const std::size_t wi =
                                    ((static_cast<std::size_t>(ky) * kw + kx) * cin + ci) * cout + co;
                                if (nx) gx[xi] += static_cast<float>(gv * W[static_cast<std::int64_t>(wi)]);
                                if (nw) gw[wi] += static_cast<float>(gv * X[static_cast<std::int64_t>(xi)]);
                            }
                        }
                    }
                }
            }
        }
    });
    return Value{&g, out_id};
}

Value group_weighted_sum(Value w, Value v) {
    check_same_graph(w, v);
    const Tensor& wv = w.val();
    const Tensor& vv = v.val();
    if (wv.rank() != 2 || vv.rank() != 3) throw DimensionError("group_weighted_sum: expects [G,K] and [G,K,D]");
    if (wv.dim(0) != vv.dim(0) || wv.dim(1) != vv.dim(1)) throw DimensionError("group_weighted_sum: shape mismatch");
    const int gsz = wv.dim(0), k = wv.dim(1), d = vv.dim(2);
    Graph& g = *w.graph;
    Tensor outt({gsz, d});
    for (int i = 0; i < gsz; ++i) {
        for (int ch = 0; ch < d; ++ch) {
            double acc = 0.0;
            for (int j = 0; j < k; ++j) acc += static_cast<double>(wv.at(i, j)) * vv.at(i, j, ch);
            outt.at(i, ch) = static_cast<float>(acc);
        }
    }
    const int iw = w.id, iv = v.id;
    const int out_id = g.size();
    g.add_node(std::move(outt), {iw, iv}, [iw, iv, out_id, gsz, k, d](Graph& gg) {
        const float* go = gg.grad_buf(out_id);
        const Tensor& W = gg.node_value(iw);
        const Tensor& V = gg.node_value(iv);
        const bool nw = gg.node_requires_grad(iw);
        const bool nv = gg.node_requires_grad(iv);
        float* gw = nw ? gg.grad_buf(iw) : nullptr;
        float* gv = nv ? gg.grad_buf(iv) : nullptr;
        for (int i = 0; i < gsz; ++i) {
            for (int j = 0; j < k; ++j) {
                double acc = 0.0;
                for (int ch = 0; ch < d; ++ch) {
                    const double gval = go[static_cast<std::size_t>(i) * d + ch];
                    if (nv) {
                        gv[(static_cast<std::size_t>(i) * k + j) * d + ch] +=
                            static_cast<float>(gval * W.at(i, j));
                    }
                    acc += gval * V.at(i, j, ch);
                }
                if (nw) gw[static_cast<std::size_t>(i) * k + j] += static_cast<float>(acc);
            }
        }
    });
    return Value{&g, out_id};
}

Value bce_with_logits_mean(Value logits, const Tensor& targets) {
    Graph& g = *logits.graph;
    const Tensor& lv = logits.val();
    if (!lv.same_shape(targets)) throw DimensionError("bce_with_logits_mean: target shape mismatch");
    const std::int64_t n = lv.numel();
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double z = lv[i];
        const double t = targets[i];
        acc += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::fabs(z)));
    }
    acc /= static_cast<double>(n);
    const int il = logits.id;
    const int out_id = g.size();
    const Tensor tcopy = targets;
    g.add_node(Tensor::scalar(static_cast<float>(acc)), {il},
               [il, out_id, n, tcopy](Graph& gg) {
                   if (!gg.node_requires_grad(il)) return;
                   const double gv = gg.grad_buf(out_id)[0];
                   const Tensor& L = gg.node_value(il);
                   float* gl = gg.grad_buf(il);
                   for (std::int64_t i = 0; i < n; ++i) {
                       gl[i] += static_cast<float>(gv * (stable_sigmoid(L[i]) - tcopy[i]) / static_cast<double>(n));
                   }
               },
               acc);
    return Value{&g, out_id};
}

Value dice_loss(Value logits, const Tensor& target, double eps) {
    Graph& g = *logits.graph;
    const Tensor& lv = logits.val();
    if (lv.numel() != target.numel()) throw DimensionError("dice_loss: target size mismatch");
    const std::int64_t n = lv.numel();
    double a = 0.0, bsum = 0.0, gsum = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double p = stable_sigmoid(lv[i]);
        a += p * target[i];
        bsum += p;
        gsum += target[i];
    }
    const double denom = bsum + gsum + eps;
    const double loss = 1.0 - 2.0 * a / denom;
    const int il = logits.id;
    const int out_id = g.size();
    const Tensor tcopy = target;
    g.add_node(Tensor::scalar(static_cast<float>(loss)), {il},
               [il, out_id, n, tcopy, a, denom](Graph& gg) {
                   if (!gg.node_requires_grad(il)) return;
                   const double gv = gg.grad_buf(out_id)[0];
                   const Tensor& L = gg.node_value(il);
                   float* gl = gg.grad_buf(il);
                   for (std::int64_t i = 0; i < n; ++i) {
                       const double p = stable_sigmoid(L[i]);
                       const double dldp = -(2.0 * tcopy[i] * denom - 2.0 * a) / (denom * denom);
                       gl[i] += static_cast<float>(gv * dldp * p * (1.0 - p));
                   }
               },
               loss);
    return Value{&g, out_id};
}

Value smooth_l1_sum(Value pred, const Tensor& target, double transition) {
    Graph& g = *pred.graph;
    const Tensor& pv = pred.val();
    if (pv.numel() != target.numel()) throw DimensionError("smooth_l1_sum: target size mismatch");
    const std::int64_t n = pv.numel();
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(pv[i]) - target[i];
        const double ad = std::fabs(d);
        acc += ad < transition ? 0.5 * d * d / transition : ad - 0.5 * transition;
    }
    const int ip = pred.id;
    const int out_id = g.size();
    const Tensor tcopy = target;
    g.add_node(Tensor::scalar(static_cast<float>(acc)), {ip},
               [ip, out_id, n, tcopy, transition](Graph& gg) {
                   if (!gg.node_requires_grad(ip)) return;
                   const double gv = gg.grad_buf(out_id)[0];
                   const Tensor& P = gg.node_value(ip);
                   float* gp = gg.grad_buf(ip);
                   for (std::int64_t i = 0; i < n; ++i) {
                       const double d = static_cast<double>(P[i]) - tcopy[i];
                       const double dd = std::fabs(d) < transition ? d / transition : (d > 0 ? 1.0 : -1.0);
                       gp[i] += static_cast<float>(gv * dd);
                   }
               },
               acc);
    return Value{&g, out_id};
}

Value kl_softmax_rows_mean(Value q_logits, const Tensor& target_logits) {
    Graph& g = *q_logits.graph;
    const Tensor& qv = q_logits.val();
    if (qv.rank() != 2 || target_logits.rank() != 2 || !qv.same_shape(target_logits)) {
        throw DimensionError("kl_softmax_rows_mean: expects matching [R,C]");
    }
    const int r = qv.dim(0), c = qv.dim(1);
    std::vector<double> p(static_cast<std::size_t>(r) * c), q(static_cast<std::size_t>(r) * c);
    auto row_softmax = [c](const auto& src, int row, std::vector<double>& dst, auto read) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < c; ++j) mx = std::max(mx, read(src, row, j));
        double z = 0.0;
        for (int j = 0; j < c; ++j) z += std::exp(read(src, row, j) - mx);
        for (int j = 0; j < c; ++j) dst[static_cast<std::size_t>(row) * c + j] = std::exp(read(src, row, j) - mx) / z;
    };
    auto read_t = [](const Tensor& t, int i, int j) { return static_cast<double>(t.at(i, j)); };
    for (int i = 0; i < r; ++i) {
        row_softmax(target_logits, i, p, read_t);
        row_softmax(qv, i, q, read_t);
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] > 0.0) acc += p[i] * (std::log(p[i]) - std::log(q[i]));
    }
    acc /= static_cast<double>(r);
    const int iq = q_logits.id;
    const int out_id = g.size();
    g.add_node(Tensor::scalar(static_cast<float>(acc)), {iq},
               [iq, out_id, r, c, p, q](Graph& gg) {
                   if (!gg.node_requires_grad(iq)) return;
                   const double gv = gg.grad_buf(out_id)[0];
                   float* gq = gg.grad_buf(iq);
                   for (int i = 0; i < r; ++i) {
                       for (int j = 0; j < c; ++j) {
                           const std::size_t idx = static_cast<std::size_t>(i) * c + j;
                           gq[idx] += static_cast<float>(gv * (q[idx] - p[idx]) / static_cast<double>(r));
                       }
                   }
               },
               acc);
    return Value{&g, out_id};
}

}  // namespace uovn
