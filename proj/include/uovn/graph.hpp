#pragma once

#include <deque>
#include <functional>
#include <limits>
#include <vector>

#include "uovn/tensor.hpp"

namespace uovn {

class Graph;

// Handle to a node on a Graph tape.
struct Value {
    Graph* graph = nullptr;
    int id = -1;

    bool valid() const { return graph != nullptr && id >= 0; }
    const Tensor& val() const;
    const std::vector<int>& shape() const;
};

// Append-only reverse-mode tape. Nodes hold f32 values; backward closures
// run in reverse creation order. Scalar ([1]-shaped) nodes additionally
// carry a float64 shadow so loss values can be read at full precision.
class Graph {
  public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Value leaf(Tensor t, bool requires_grad = false);
    Value constant(Tensor t) { return leaf(std::move(t), false); }

    int size() const { return static_cast<int>(nodes_.size()); }
    const Tensor& value(const Value& v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
    bool requires_grad(const Value& v) const { return nodes_[static_cast<std::size_t>(v.id)].requires_grad; }

    // Scalar read: float64 shadow when available, else the stored f32.
    double scalar(const Value& v) const;

    // Gradient of the last backward() w.r.t. v (zeros if untouched).
    std::vector<float> grad(const Value& v) const;

    // Seeds d(out)/d(out) = 1 and propagates. `out` must be [1]-shaped.
    void backward(const Value& out);

    // --- builder interface (used by the op constructors) ---
    int add_node(Tensor value, std::vector<int> parents, std::function<void(Graph&)> back,
                 double dval = std::numeric_limits<double>::quiet_NaN());
    const Tensor& node_value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    double node_dval(int id) const { return nodes_[static_cast<std::size_t>(id)].dval; }
    bool node_requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
    bool any_requires_grad(const std::vector<int>& ids) const;
    // Allocates (zeroed) on first touch.
    float* grad_buf(int id);
    bool grad_allocated(int id) const { return !nodes_[static_cast<std::size_t>(id)].grad.empty(); }

  private:
    struct Node {
        Tensor value;
        std::vector<float> grad;
        std::vector<int> parents;
        std::function<void(Graph&)> backward;
        double dval = std::numeric_limits<double>::quiet_NaN();
        bool requires_grad = false;
    };
    // deque: node references stay valid while later ops append
    std::deque<Node> nodes_;
};

// ---- elementwise / arithmetic ----
Value add(Value a, Value b);
Value sub(Value a, Value b);
Value mul(Value a, Value b);
Value div(Value a, Value b);
Value min_ew(Value a, Value b);
Value max_ew(Value a, Value b);
Value scale(Value a, double s, double c = 0.0);  // s*x + c
Value abs_ew(Value a);
Value sigmoid(Value x);
Value gelu(Value x);

// ---- linear algebra ----
Value matmul(Value a, Value b, bool trans_a = false, bool trans_b = false);
// y = x W + b over the last axis of x; b may be invalid (no bias).
Value linear_map(Value x, Value w, Value b);
Value softmax(Value x, int axis);
Value layer_norm(Value x, Value gain, Value bias, double eps = 1e-5);
Value l2_normalize_rows(Value x);

// ---- structure ----
Value reshape(Value x, std::vector<int> shape);
Value slice(Value x, int axis, int begin, int end);
Value concat(int axis, const std::vector<Value>& parts);
Value gather_rows(Value x, std::vector<int> rows);

// ---- reductions ----
Value sum(Value x);
Value mean(Value x);
Value mean_rows(Value x);  // [R,D] -> [D]
Value dot(Value a, Value b);
Value cosine(Value a, Value b);  // zero-norm inputs give 0

// ---- sampling / conv ----
// map [H,W,D], points [P,2] (x,y in pixel coordinates, clamped to the map).
Value bilinear_sample(Value map, Value points);
// x [H,W,Cin], w [kh,kw,Cin,Cout], b [Cout]; valid padding, square stride.
Value conv2d(Value x, Value w, Value b, int stride);
// out[g,:] = sum_k w[g,k] * v[g,k,:]
Value group_weighted_sum(Value w, Value v);

// ---- fused losses ----
Value bce_with_logits_mean(Value logits, const Tensor& targets);
Value dice_loss(Value logits, const Tensor& target, double eps = 1.0);
Value smooth_l1_sum(Value pred, const Tensor& target, double transition = 1.0);
// mean_r KL(softmax(target_logits_r) || softmax(q_logits_r)); target is constant.
Value kl_softmax_rows_mean(Value q_logits, const Tensor& target_logits);

}  // namespace uovn
