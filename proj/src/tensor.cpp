#include "codeunlearn/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

namespace cu {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using MapM = Eigen::Map<RowMat>;

MapC as_mat(const std::vector<double>& v, std::size_t r, std::size_t c) {
  return MapC(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
MapM as_mat(std::vector<double>& v, std::size_t r, std::size_t c) {
  return MapM(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                         " vs " + shape_str(b.shape));
  }
}

void accumulate(std::vector<double>& dst, const std::vector<double>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape s, double fill, bool req_grad)
    : shape(std::move(s)), data(shape_numel(shape), fill), requires_grad(req_grad) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_str(shape));
  }
}

Tensor::Tensor(Shape s, std::vector<double> values, bool req_grad)
    : shape(std::move(s)), data(std::move(values)), requires_grad(req_grad) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  }
}

std::size_t Tensor::rows() const { return shape.empty() ? 1 : numel() / shape.back(); }
std::size_t Tensor::cols() const { return shape.empty() ? 1 : shape.back(); }

void Tensor::zero_grad() { grad.assign(data.size(), 0.0); }

bool Tensor::all_finite() const {
  return std::all_of(data.begin(), data.end(), [](double x) { return std::isfinite(x); });
}

const Tensor& Var::value() const { return graph->value(*this); }

// ---------------------------------------------------------------- Graph

Graph::Graph(bool grad_enabled) : grad_enabled_(grad_enabled) { nodes_.reserve(256); }

Var Graph::param(Tensor& t) {
  Node n;
  n.external = &t;
  n.requires_grad = grad_enabled_ && t.requires_grad;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Graph::constant(Tensor t) {
  Node n;
  n.own = std::move(t);
  n.own.requires_grad = false;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Graph::input(Tensor t) {
  Node n;
  n.own = std::move(t);
  n.requires_grad = grad_enabled_;
  n.own.requires_grad = grad_enabled_;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

const Tensor& Graph::value(Var v) const { return node_value(nodes_.at(static_cast<std::size_t>(v.id))); }

const std::vector<double>& Graph::grad(Var v) const {
  const Node& n = nodes_.at(static_cast<std::size_t>(v.id));
  return n.external ? n.external->grad : n.grad;
}

Var Graph::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
}

Var Graph::record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
  if (consumed_) throw StateError("graph already consumed by backward; call reset()");
  Node n;
  n.own = std::move(value);
  if (grad_enabled_) {
    for (const Var& in : inputs) {
      if (in.graph != this) throw StateError("op inputs belong to a different graph");
      if (nodes_[static_cast<std::size_t>(in.id)].requires_grad) n.requires_grad = true;
    }
    if (n.requires_grad) n.backward = std::move(fn);
  }
  n.own.requires_grad = n.requires_grad;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

bool Graph::needs_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].requires_grad; }

std::vector<double>& Graph::grad_buffer(Var v) {
  Node& n = nodes_[static_cast<std::size_t>(v.id)];
  std::vector<double>& g = n.external ? n.external->grad : n.grad;
  const std::size_t len = node_value(n).numel();
  if (g.size() != len) g.assign(len, 0.0);
  return g;
}

const std::vector<double>& Graph::out_grad(Var v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v.id)];
  return n.external ? n.external->grad : n.grad;
}

void Graph::backward(Var loss) {
  if (consumed_) throw StateError("backward called twice on the same graph without reset()");
  if (loss.graph != this) throw StateError("loss belongs to a different graph");
  const Tensor& lv = value(loss);
  if (lv.numel() != 1) throw ContractError("backward requires a scalar loss, got " + shape_str(lv.shape));
  consumed_ = true;
  if (!nodes_[static_cast<std::size_t>(loss.id)].requires_grad) return;
  grad_buffer(loss)[0] += 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.backward || n.grad.empty()) continue;
    n.backward(*this, Var{this, id});
  }
}

void Graph::reset() {
  nodes_.clear();
  consumed_ = false;
}

// ---------------------------------------------------------------- ops

Var matmul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.shape.size() != 2 || B.shape.size() != 2 || A.shape[1] != B.shape[0]) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(A.shape) + " and " +
                         shape_str(B.shape));
  }
  const std::size_t m = A.shape[0], k = A.shape[1], n = B.shape[1];
  Tensor out({m, n});
  as_mat(out.data, m, n).noalias() = as_mat(A.data, m, k) * as_mat(B.data, k, n);
  return a.graph->record(std::move(out), {a, b}, [a, b, m, k, n](Graph& g, Var self) {
    const auto& dC = g.out_grad(self);
    if (g.needs_grad(a)) {
      as_mat(g.grad_buffer(a), m, k).noalias() +=
          as_mat(dC, m, n) * as_mat(g.value(b).data, k, n).transpose();
    }
    if (g.needs_grad(b)) {
      as_mat(g.grad_buffer(b), k, n).noalias() +=
          as_mat(g.value(a).data, m, k).transpose() * as_mat(dC, m, n);
    }
  });
}

Var linear(Var x, Var w, Var b) {
  const Tensor& X = x.value();
  const Tensor& W = w.value();
  const Tensor& Bv = b.value();
  if (W.shape.size() != 2 || X.cols() != W.shape[0] || Bv.numel() != W.shape[1]) {
    throw DimensionError("linear: incompatible shapes x" + shape_str(X.shape) + " w" +
                         shape_str(W.shape) + " b" + shape_str(Bv.shape));
  }
  const std::size_t m = X.rows(), k = W.shape[0], n = W.shape[1];
  Shape out_shape = X.shape;
  out_shape.back() = n;
  Tensor out(out_shape);
  auto O = as_mat(out.data, m, n);
  O.noalias() = as_mat(X.data, m, k) * as_mat(W.data, k, n);
  O.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(Bv.data.data(), static_cast<Eigen::Index>(n));
  return x.graph->record(std::move(out), {x, w, b}, [x, w, b, m, k, n](Graph& g, Var self) {
    const auto& dY = g.out_grad(self);
    if (g.needs_grad(x)) {
      as_mat(g.grad_buffer(x), m, k).noalias() +=
          as_mat(dY, m, n) * as_mat(g.value(w).data, k, n).transpose();
    }
    if (g.needs_grad(w)) {
      as_mat(g.grad_buffer(w), k, n).noalias() +=
          as_mat(g.value(x).data, m, k).transpose() * as_mat(dY, m, n);
    }
    if (g.needs_grad(b)) {
      auto& db = g.grad_buffer(b);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) db[c] += dY[r * n + c];
    }
  });
}

Var add(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_same_shape(A, B, "add");
  Tensor out(A.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = A.data[i] + B.data[i];
  return a.graph->record(std::move(out), {a, b}, [a, b](Graph& g, Var self) {
    const auto& d = g.out_grad(self);
    if (g.needs_grad(a)) accumulate(g.grad_buffer(a), d);
    if (g.needs_grad(b)) accumulate(g.grad_buffer(b), d);
  });
}

Var sub(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_same_shape(A, B, "sub");
  Tensor out(A.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = A.data[i] - B.data[i];
  return a.graph->record(std::move(out), {a, b}, [a, b](Graph& g, Var self) {
    const auto& d = g.out_grad(self);
    if (g.needs_grad(a)) accumulate(g.grad_buffer(a), d);
    if (g.needs_grad(b)) {
      auto& gb = g.grad_buffer(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= d[i];
    }
  });
}

Var mul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_same_shape(A, B, "mul");
  Tensor out(A.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = A.data[i] * B.data[i];
  return a.graph->record(std::move(out), {a, b}, [a, b](Graph& g, Var self) {
    const auto& d = g.out_grad(self);
    if (g.needs_grad(a)) {
      auto& ga = g.grad_buffer(a);
      const auto& bv = g.value(b).data;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += d[i] * bv[i];
    }
    if (g.needs_grad(b)) {
      auto& gb = g.grad_buffer(b);
      const auto& av = g.value(a).data;
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += d[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  const Tensor& A = a.value();
  Tensor out(A.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = A.data[i] * s;
  return a.graph->record(std::move(out), {a}, [a, s](Graph& g, Var self) {
    const auto& d = g.out_grad(self);
    auto& ga = g.grad_buffer(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += d[i] * s;
  });
}

Var relu(Var x) {
  const Tensor& X = x.value();
  Tensor out(X.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = X.data[i] > 0.0 ? X.data[i] : 0.0;
  return x.graph->record(std::move(out), {x}, [x](Graph& g, Var self) {
    const auto& d = g.out_grad(self);
    const auto& xv = g.value(x).data;
    auto& gx = g.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (xv[i] > 0.0) gx[i] += d[i];
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Tensor& X = x.value();
  const Tensor& G = gain.value();
  const Tensor& Bv = bias.value();
  const std::size_t d = X.cols();
  if (G.numel() != d || Bv.numel() != d) {
    throw DimensionError("layer_norm: last dimension " + std::to_string(d) + " vs gain " +
                         shape_str(G.shape) + " bias " + shape_str(Bv.shape));
  }
  if (!(eps >= 0.0)) throw ContractError("layer_norm: eps must be non-negative");
  const std::size_t rows = X.rows();
  Tensor out(X.shape);
  std::vector<double> xhat(X.numel());
  std::vector<double> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = X.data.data() + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += xr[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(d);
    if (var + eps <= 0.0) throw NumericError("layer_norm: zero variance with eps = 0");
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (xr[c] - mu) * rs;
      xhat[r * d + c] = h;
      out.data[r * d + c] = h * G.data[c] + Bv.data[c];
    }
  }
  return x.graph->record(
      std::move(out), {x, gain, bias},
      [x, gain, bias, d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Graph& g, Var self) {
        const auto& dy = g.out_grad(self);
        const auto& gv = g.value(gain).data;
        if (g.needs_grad(gain)) {
          auto& gg = g.grad_buffer(gain);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < d; ++c) gg[c] += dy[r * d + c] * xhat[r * d + c];
        }
        if (g.needs_grad(bias)) {
          auto& gb = g.grad_buffer(bias);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < d; ++c) gb[c] += dy[r * d + c];
        }
        if (g.needs_grad(x)) {
          auto& gx = g.grad_buffer(x);
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_g = 0.0, mean_gx = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
              const double gh = dy[r * d + c] * gv[c];
              mean_g += gh;
              mean_gx += gh * xhat[r * d + c];
            }
            mean_g *= inv_d;
            mean_gx *= inv_d;
            for (std::size_t c = 0; c < d; ++c) {
              const double gh = dy[r * d + c] * gv[c];
              gx[r * d + c] += rstd[r] * (gh - mean_g - xhat[r * d + c] * mean_gx);
            }
          }
        }
      });
}

Var sum(Var x) {
  const Tensor& X = x.value();
  Tensor out({1}, std::accumulate(X.data.begin(), X.data.end(), 0.0));
  return x.graph->record(std::move(out), {x}, [x](Graph& g, Var self) {
    const double d = g.out_grad(self)[0];
    for (auto& v : g.grad_buffer(x)) v += d;
  });
}

Var mean(Var x) {
  const Tensor& X = x.value();
  const double n = static_cast<double>(X.numel());
  Tensor out({1}, std::accumulate(X.data.begin(), X.data.end(), 0.0) / n);
  return x.graph->record(std::move(out), {x}, [x, n](Graph& g, Var self) {
    const double d = g.out_grad(self)[0] / n;
    for (auto& v : g.grad_buffer(x)) v += d;
  });
}

Var square(Var x) {
  const Tensor& X = x.value();
  Tensor out(X.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = X.data[i] * X.data[i];
  return x.graph->record(std::move(out), {x}, [x](Graph& g, Var self) {
    const auto& d = g.out_grad(self);
    const auto& xv = g.value(x).data;
    auto& gx = g.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += 2.0 * xv[i] * d[i];
  });
}

Var reshape(Var x, Shape shape) {
  const Tensor& X = x.value();
  if (shape_numel(shape) != X.numel()) {
    throw DimensionError("reshape: " + shape_str(X.shape) + " to " + shape_str(shape));
  }
  Tensor out(std::move(shape), X.data);
  return x.graph->record(std::move(out), {x}, [x](Graph& g, Var self) {
    accumulate(g.grad_buffer(x), g.out_grad(self));
  });
}

Var embedding(Var table, std::span<const int> ids) {
  const Tensor& T = table.value();
  if (T.shape.size() != 2) throw DimensionError("embedding: table must be 2-D, got " + shape_str(T.shape));
  const std::size_t vocab = T.shape[0], d = T.shape[1];
  std::vector<int> idx(ids.begin(), ids.end());
  for (int id : idx) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw IndexError("embedding: id " + std::to_string(id) + " outside [0," + std::to_string(vocab) + ")");
    }
  }
  if (idx.empty()) throw DimensionError("embedding: empty id list");
  Tensor out({idx.size(), d});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy_n(T.data.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(idx[r]) * d), d,
                out.data.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  return table.graph->record(std::move(out), {table}, [table, d, idx = std::move(idx)](Graph& g, Var self) {
    const auto& dy = g.out_grad(self);
    auto& gt = g.grad_buffer(table);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const std::size_t base = static_cast<std::size_t>(idx[r]) * d;
      for (std::size_t c = 0; c < d; ++c) gt[base + c] += dy[r * d + c];
    }
  });
}

Var softmax_cross_entropy(Var logits, std::span<const int> targets, int ignore_index) {
  const Tensor& L = logits.value();
  const std::size_t rows = L.rows(), vocab = L.cols();
  if (targets.size() != rows) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                         " targets for logits " + shape_str(L.shape));
  }
  std::vector<int> tgt(targets.begin(), targets.end());
  std::size_t count = 0;
  for (int t : tgt) {
    if (t == ignore_index) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw IndexError("softmax_cross_entropy: target " + std::to_string(t) + " outside [0," +
                       std::to_string(vocab) + ")");
    }
    ++count;
  }
  std::vector<double> probs(L.numel(), 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (tgt[r] == ignore_index) continue;
    const double* lr = L.data.data() + r * vocab;
    const double mx = *std::max_element(lr, lr + vocab);
    double z = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) {
      const double e = std::exp(lr[c] - mx);
      probs[r * vocab + c] = e;
      z += e;
    }
    for (std::size_t c = 0; c < vocab; ++c) probs[r * vocab + c] /= z;
    total -= (lr[tgt[r]] - mx) - std::log(z);
  }
  const double denom = count ? static_cast<double>(count) : 1.0;
  Tensor out({1}, count ? total / denom : 0.0);
  return logits.graph->record(
      std::move(out), {logits},
      [logits, vocab, rows, denom, tgt = std::move(tgt), probs = std::move(probs), ignore_index](
          Graph& g, Var self) {
        const double d = g.out_grad(self)[0] / denom;
        auto& gl = g.grad_buffer(logits);
        for (std::size_t r = 0; r < rows; ++r) {
          if (tgt[r] == ignore_index) continue;
          for (std::size_t c = 0; c < vocab; ++c) gl[r * vocab + c] += d * probs[r * vocab + c];
          gl[r * vocab + static_cast<std::size_t>(tgt[r])] -= d;
        }
      });
}

Var masked_mse(Var a, Var b, std::span<const std::uint8_t> row_mask) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_same_shape(A, B, "masked_mse");
  const std::size_t rows = A.rows(), d = A.cols();
  if (row_mask.size() != rows) {
    throw DimensionError("masked_mse: mask length " + std::to_string(row_mask.size()) + " vs " +
                         std::to_string(rows) + " rows");
  }
  std::vector<std::uint8_t> mask(row_mask.begin(), row_mask.end());
  const std::size_t live = static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](auto m) { return m != 0; }));
  const double denom = live ? static_cast<double>(live * d) : 1.0;
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    for (std::size_t c = 0; c < d; ++c) {
      const double diff = A.data[r * d + c] - B.data[r * d + c];
      total += diff * diff;
    }
  }
  Tensor out({1}, total / denom);
  return a.graph->record(std::move(out), {a, b}, [a, b, d, rows, denom, mask = std::move(mask)](Graph& g, Var self) {
    const double s = 2.0 * g.out_grad(self)[0] / denom;
    const auto& av = g.value(a).data;
    const auto& bv = g.value(b).data;
    const bool ga_on = g.needs_grad(a), gb_on = g.needs_grad(b);
    std::vector<double>* ga = ga_on ? &g.grad_buffer(a) : nullptr;
    std::vector<double>* gb = gb_on ? &g.grad_buffer(b) : nullptr;
    for (std::size_t r = 0; r < rows; ++r) {
      if (!mask[r]) continue;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = s * (av[r * d + c] - bv[r * d + c]);
        if (ga) (*ga)[r * d + c] += diff;
        if (gb) (*gb)[r * d + c] -= diff;
      }
    }
  });
}

Var dropout(Var x, double rate, std::uint64_t seed) {
  if (rate < 0.0 || rate >= 1.0) throw ContractError("dropout: rate must be in [0,1)");
  if (rate == 0.0) return x;
  const Tensor& X = x.value();
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution keep(1.0 - rate);
  const double inv = 1.0 / (1.0 - rate);
  std::vector<double> mask(X.numel());
  for (auto& m : mask) m = keep(rng) ? inv : 0.0;
  Tensor out(X.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = X.data[i] * mask[i];
  return x.graph->record(std::move(out), {x}, [x, mask = std::move(mask)](Graph& g, Var self) {
    const auto& d = g.out_grad(self);
    auto& gx = g.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += d[i] * mask[i];
  });
}

Var attention(Var q, Var k, Var v, const AttentionShape& sh, std::span<const std::uint8_t> key_valid) {
  const Tensor& Q = q.value();
  const Tensor& K = k.value();
  const Tensor& V = v.value();
  const std::size_t d = Q.cols();
  if (K.cols() != d || V.cols() != d || Q.rows() != sh.batch * sh.len_q ||
      K.rows() != sh.batch * sh.len_k || V.rows() != K.rows() || d % sh.heads != 0) {
    throw DimensionError("attention: q" + shape_str(Q.shape) + " k" + shape_str(K.shape) + " v" +
                         shape_str(V.shape));
  }
  if (key_valid.size() != sh.batch * sh.len_k) throw DimensionError("attention: key mask length mismatch");
  const std::size_t B = sh.batch, Lq = sh.len_q, Lk = sh.len_k, H = sh.heads, hd = d / H;
  const double sc = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<double> probs(B * H * Lq * Lk, 0.0);
  Tensor out({B * Lq, d});
  std::vector<double> row(Lk);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < Lq; ++i) {
        const double* qi = Q.data.data() + (b * Lq + i) * d + h * hd;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < Lk; ++j) {
          const bool ok = key_valid[b * Lk + j] && !(sh.causal && j > i);
          if (!ok) {
            row[j] = -std::numeric_limits<double>::infinity();
            continue;
          }
          const double* kj = K.data.data() + (b * Lk + j) * d + h * hd;
          double s = 0.0;
          for (std::size_t t = 0; t < hd; ++t) s += qi[t] * kj[t];
          row[j] = s * sc;
          mx = std::max(mx, row[j]);
        }
        double* p = probs.data() + ((b * H + h) * Lq + i) * Lk;
        if (mx == -std::numeric_limits<double>::infinity()) continue;  // fully masked row
        double z = 0.0;
        for (std::size_t j = 0; j < Lk; ++j) {
          p[j] = std::isinf(row[j]) ? 0.0 : std::exp(row[j] - mx);
          z += p[j];
        }
        double* oi = out.data.data() + (b * Lq + i) * d + h * hd;
        for (std::size_t j = 0; j < Lk; ++j) {
          p[j] /= z;
          if (p[j] == 0.0) continue;
          const double* vj = V.data.data() + (b * Lk + j) * d + h * hd;
          for (std::size_t t = 0; t < hd; ++t) oi[t] += p[j] * vj[t];
        }
      }
    }
  }
  return q.graph->record(
      std::move(out), {q, k, v},
      [q, k, v, B, Lq, Lk, H, hd, d, sc, probs = std::move(probs)](Graph& g, Var self) {
        const auto& dO = g.out_grad(self);
        const auto& Qd = g.value(q).data;
        const auto& Kd = g.value(k).data;
        const auto& Vd = g.value(v).data;
        std::vector<double> dq_local, dk_local, dv_local;
        std::vector<double>& dQ = g.needs_grad(q) ? g.grad_buffer(q) : (dq_local.assign(Qd.size(), 0.0), dq_local);
        std::vector<double>& dK = g.needs_grad(k) ? g.grad_buffer(k) : (dk_local.assign(Kd.size(), 0.0), dk_local);
        std::vector<double>& dV = g.needs_grad(v) ? g.grad_buffer(v) : (dv_local.assign(Vd.size(), 0.0), dv_local);
        std::vector<double> dp(Lk);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t i = 0; i < Lq; ++i) {
              const double* p = probs.data() + ((b * H + h) * Lq + i) * Lk;
              const double* doi = dO.data() + (b * Lq + i) * d + h * hd;
              double dot = 0.0;
              for (std::size_t j = 0; j < Lk; ++j) {
                dp[j] = 0.0;
                if (p[j] == 0.0) continue;
                const double* vj = Vd.data() + (b * Lk + j) * d + h * hd;
                double* dvj = dV.data() + (b * Lk + j) * d + h * hd;
                double s = 0.0;
                for (std::size_t t = 0; t < hd; ++t) {
                  s += doi[t] * vj[t];
                  dvj[t] += p[j] * doi[t];
                }
                dp[j] = s;
                dot += s * p[j];
              }
              const double* qi = Qd.data() + (b * Lq + i) * d + h * hd;
              double* dqi = dQ.data() + (b * Lq + i) * d + h * hd;
              for (std::size_t j = 0; j < Lk; ++j) {
                if (p[j] == 0.0) continue;
                const double ds = p[j] * (dp[j] - dot) * sc;
                const double* kj = Kd.data() + (b * Lk + j) * d + h * hd;
                double* dkj = dK.data() + (b * Lk + j) * d + h * hd;
                for (std::size_t t = 0; t < hd; ++t) {
                  dqi[t] += ds * kj[t];
                  dkj[t] += ds * qi[t];
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------- optimizer

void adam_step(std::span<Tensor* const> params, AdamState& st) {
  for (const Tensor* p : params) {
    if (p->grad.size() != p->data.size()) throw StateError("adam_step: parameter without populated gradient");
  }
  if (st.m.empty()) {
    st.m.resize(params.size());
    st.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      st.m[i].assign(params[i]->numel(), 0.0);
      st.v[i].assign(params[i]->numel(), 0.0);
    }
  }
  if (st.m.size() != params.size()) throw StateError("adam_step: parameter list changed between steps");
  ++st.step;
  const double t = static_cast<double>(st.step);
  const double bc1 = 1.0 - std::pow(st.beta1, t);
  const double bc2 = 1.0 - std::pow(st.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    auto& m = st.m[i];
    auto& v = st.v[i];
    if (m.size() != p.numel()) throw StateError("adam_step: moment length mismatch");
    for (std::size_t j = 0; j < p.numel(); ++j) {
      const double gj = p.grad[j];
      m[j] = st.beta1 * m[j] + (1.0 - st.beta1) * gj;
      v[j] = st.beta2 * v[j] + (1.0 - st.beta2) * gj * gj;
      const double mh = m[j] / bc1;
      const double vh = v[j] / bc2;
      p.data[j] -= st.lr * mh / (std::sqrt(vh) + st.eps);
    }
    std::fill(p.grad.begin(), p.grad.end(), 0.0);
  }
}

double clip_grad_norm(std::span<Tensor* const> params, double max_norm) {
  double sq = 0.0;
  for (const Tensor* p : params)
    for (double g : p->grad) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double f = max_norm / norm;
    for (Tensor* p : params)
      for (double& g : p->grad) g *= f;
  }
  return norm;
}

}  // namespace cu
