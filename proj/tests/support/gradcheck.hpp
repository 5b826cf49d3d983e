#pragma once

// Central finite-difference oracle for graph gradients (test-only).

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "codeunlearn/tensor.hpp"

namespace cu::testing {

// Builds a scalar loss on a fresh graph from the given parameters.
using LossBuilder = std::function<Var(Graph&)>;

inline double eval_loss(const LossBuilder& build) {
  Graph g(false);
  return build(g).value()[0];
}

struct GradCheck {
  double rel_error = 0.0;  // |autodiff - numeric| / max(|autodiff|, |numeric|)
  double max_abs = 0.0;
  std::size_t checked = 0;
};

// Compares autodiff gradients with central differences on every element of
// every listed parameter.
inline GradCheck grad_check(const LossBuilder& build, const std::vector<Tensor*>& params, double h = 1e-5) {
  for (Tensor* p : params) {
    p->requires_grad = true;
    p->zero_grad();
  }
  {
    Graph g;
    g.backward(build(g));
  }
  double diff_sq = 0.0, a_sq = 0.0, n_sq = 0.0;
  GradCheck r;
  for (Tensor* p : params) {
    for (std::size_t i = 0; i < p->numel(); ++i) {
      const double orig = p->data[i];
      p->data[i] = orig + h;
      const double up = eval_loss(build);
      p->data[i] = orig - h;
      const double down = eval_loss(build);
      p->data[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = p->grad[i];
      diff_sq += (numeric - analytic) * (numeric - analytic);
      a_sq += analytic * analytic;
      n_sq += numeric * numeric;
      r.max_abs = std::max(r.max_abs, std::abs(numeric - analytic));
      ++r.checked;
    }
  }
  const double denom = std::max({std::sqrt(a_sq), std::sqrt(n_sq), 1e-12});
  r.rel_error = std::sqrt(diff_sq) / denom;
  return r;
}

}  // namespace cu::testing
