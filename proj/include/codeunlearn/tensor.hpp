#pragma once

// Dense float64 tensors with a tape-based reverse-mode autodiff graph.
//
// Parameters live outside the graph as plain `Tensor`s. Each forward pass
// builds a fresh `Graph`; `Graph::param` wraps a parameter by reference so
// that `backward` accumulates straight into `Tensor::grad`.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "codeunlearn/error.hpp"

namespace cu {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Tensor {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until first accumulation

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0, bool req_grad = false);
  Tensor(Shape s, std::vector<double> values, bool req_grad = false);

  std::size_t numel() const { return data.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  std::size_t rows() const;  // product of all but the last dimension
  std::size_t cols() const;  // last dimension

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }
  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  void zero_grad();
  bool all_finite() const;
};

class Graph;

// Handle to a node on a graph. Cheap to copy; only valid while the graph is.
struct Var {
  Graph* graph = nullptr;
  int id = -1;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  std::size_t numel() const { return value().numel(); }
  bool valid() const { return graph != nullptr && id >= 0; }
};

class Graph {
 public:
  // `grad_enabled == false` records no backward closures (inference mode).
  explicit Graph(bool grad_enabled = true);
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  // Wraps an external parameter. The graph reads `t.data` in place and
  // `backward` accumulates into `t.grad` when `t.requires_grad`.
  Var param(Tensor& t);
  // Owned constant (never receives gradient).
  Var constant(Tensor t);
  // Owned input that collects its own gradient, readable via `grad(v)`.
  Var input(Tensor t);

  const Tensor& value(Var v) const;
  // Gradient of an owned node after backward (empty if none flowed).
  const std::vector<double>& grad(Var v) const;

  void backward(Var loss);
  void reset();
  std::size_t size() const { return nodes_.size(); }

  // --- op plumbing (used by op implementations) ---
  using BackwardFn = std::function<void(Graph&, Var self)>;
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn);
  bool needs_grad(Var v) const;
  // Mutable gradient buffer for node `v` (allocated and zero-filled on demand).
  std::vector<double>& grad_buffer(Var v);
  const std::vector<double>& out_grad(Var v) const;

 private:
  struct Node {
    Tensor own;
    Tensor* external = nullptr;
    bool requires_grad = false;
    std::vector<double> grad;
    BackwardFn backward;
  };
  const Tensor& node_value(const Node& n) const {
    return n.external ? *n.external : n.own;
  }

  std::vector<Node> nodes_;
  bool grad_enabled_;
  bool consumed_ = false;
};

// ---- differentiable ops ----

Var matmul(Var a, Var b);                    // [m x k] . [k x n]
Var linear(Var x, Var w, Var b);             // x[.. x in] . w[in x out] + b[out]
Var add(Var a, Var b);                       // same shape
Var sub(Var a, Var b);
Var mul(Var a, Var b);                       // elementwise
Var scale(Var a, double s);
Var relu(Var x);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var sum(Var x);
Var mean(Var x);
Var square(Var x);
Var reshape(Var x, Shape shape);
// Rows of `table` gathered by `ids`; backward scatter-adds.
Var embedding(Var table, std::span<const int> ids);
// Mean negative log-softmax over rows whose target != ignore_index.
Var softmax_cross_entropy(Var logits, std::span<const int> targets, int ignore_index);
// Mean over selected rows of the mean squared error per element.
Var masked_mse(Var a, Var b, std::span<const std::uint8_t> row_mask);
// Inverted dropout with a fixed keep mask drawn from `seed`.
Var dropout(Var x, double rate, std::uint64_t seed);

// Multi-head scaled dot-product attention over packed batches.
// q: [B*Lq x d], k/v: [B*Lk x d]. key_valid: B*Lk flags (0 = padding).
struct AttentionShape {
  std::size_t batch = 0;
  std::size_t len_q = 0;
  std::size_t len_k = 0;
  std::size_t heads = 1;
  bool causal = false;
};
Var attention(Var q, Var k, Var v, const AttentionShape& shape,
              std::span<const std::uint8_t> key_valid);

// ---- optimizer ----

struct AdamState {
  std::uint64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double lr = 1e-3;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

// Bias-corrected Adam update, then zeroes the gradients.
void adam_step(std::span<Tensor* const> params, AdamState& state);

// Scales all gradients so their joint L2 norm is at most max_norm.
double clip_grad_norm(std::span<Tensor* const> params, double max_norm);

}  // namespace cu
