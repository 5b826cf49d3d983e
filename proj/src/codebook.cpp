#include "codeunlearn/codebook.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <string>

namespace cu {

namespace {

// Fixed-order dot product; four partial sums keep it fast without
// depending on the surrounding batch layout.
double dot(const double* x, const double* y, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += x[i] * y[i];
    s1 += x[i + 1] * y[i + 1];
    s2 += x[i + 2] * y[i + 2];
    s3 += x[i + 3] * y[i + 3];
  }
  for (; i < n; ++i) s0 += x[i] * y[i];
  return (s0 + s1) + (s2 + s3);
}

struct LiveCodes {
  std::vector<int> ids;
  std::vector<double> inv_norm;
};

LiveCodes live_codes(const CodebookState& cb) {
  LiveCodes lc;
  const std::size_t K = cb.num_codes(), F = cb.code_dim();
  lc.ids.reserve(K);
  lc.inv_norm.reserve(K);
  for (std::size_t k = 0; k < K; ++k) {
    if (cb.is_deleted(k)) continue;
    const double* c = cb.codes.data.data() + k * F;
    const double n = std::sqrt(dot(c, c, F));
    if (!(n > 0.0)) throw ContractError("live code " + std::to_string(k) + " has zero norm");
    lc.ids.push_back(static_cast<int>(k));
    lc.inv_norm.push_back(1.0 / n);
  }
  return lc;
}

struct Scored {
  double sim;
  int idx;
};

bool ranks_before(const Scored& a, const Scored& b) {
  if (a.sim != b.sim) return a.sim > b.sim;
  return a.idx < b.idx;
}

void rank_row(const double* h, const CodebookState& cb, const LiveCodes& lc, std::size_t s,
              std::vector<Scored>& scratch) {
  const std::size_t F = cb.code_dim();
  const double hn = std::sqrt(dot(h, h, F));
  scratch.resize(lc.ids.size());
  for (std::size_t j = 0; j < lc.ids.size(); ++j) {
    const int k = lc.ids[j];
    double sim = 0.0;
    if (hn > 0.0) {
      sim = dot(h, cb.codes.data.data() + static_cast<std::size_t>(k) * F, F) * lc.inv_norm[j] / hn;
    }
    scratch[j] = Scored{sim, k};
  }
  std::partial_sort(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(s), scratch.end(),
                    ranks_before);
}

void check_capacity(const CodebookState& cb, std::size_t s, std::size_t live) {
  if (s == 0) throw ContractError("selection width must be at least 1");
  if (s > live) {
    throw CapacityError("selection width " + std::to_string(s) + " exceeds " + std::to_string(live) +
                        " live codes of " + std::to_string(cb.num_codes()));
  }
}

}  // namespace

CodebookState::CodebookState(std::size_t num_codes, std::size_t code_dim, std::size_t s)
    : codes({num_codes, code_dim}, 0.0, true), top_s(s), deleted(num_codes, 0) {
  if (s == 0 || s > num_codes) throw ConfigError("codebook: need 1 <= S <= K");
}

std::size_t CodebookState::live_count() const {
  return static_cast<std::size_t>(std::count(deleted.begin(), deleted.end(), std::uint8_t{0}));
}

std::vector<int> CodebookState::deleted_indices() const {
  std::vector<int> out;
  for (std::size_t k = 0; k < deleted.size(); ++k)
    if (deleted[k]) out.push_back(static_cast<int>(k));
  return out;
}

SAEParams::SAEParams(std::size_t d, std::size_t code_dim)
    : w_enc({d, code_dim}, 0.0, true),
      b_enc({code_dim}, 0.0, true),
      w_dec({code_dim, d}, 0.0, true),
      b_dec({d}, 0.0, true),
      norm_gain({code_dim}, 1.0, true),
      norm_bias({code_dim}, 0.0, true) {
  if (code_dim < d) throw ConfigError("SAE code dimension F must be >= activation dimension d");
}

std::vector<Tensor*> SAEParams::parameters() {
  return {&w_enc, &b_enc, &w_dec, &b_dec, &norm_gain, &norm_bias};
}

double cosine_similarity(std::span<const double> x, std::span<const double> c) {
  if (x.size() != c.size()) {
    throw DimensionError("cosine_similarity: lengths " + std::to_string(x.size()) + " and " +
                         std::to_string(c.size()));
  }
  const double cn = std::sqrt(dot(c.data(), c.data(), c.size()));
  if (!(cn > 0.0)) throw ContractError("cosine_similarity: code vector has zero norm");
  const double xn = std::sqrt(dot(x.data(), x.data(), x.size()));
  if (xn == 0.0) return 0.0;
  const double s = dot(x.data(), c.data(), x.size()) / (xn * cn);
  return std::clamp(s, -1.0, 1.0);
}

SelectionResult select_top_s(std::span<const double> h, const CodebookState& cb, std::size_t s) {
  const std::size_t F = cb.code_dim();
  if (h.size() != F) {
    throw DimensionError("select_top_s: activation length " + std::to_string(h.size()) +
                         " vs code dim " + std::to_string(F));
  }
  const LiveCodes lc = live_codes(cb);
  check_capacity(cb, s, lc.ids.size());
  std::vector<Scored> scratch;
  rank_row(h.data(), cb, lc, s, scratch);
  SelectionResult r;
  r.h_hat.assign(F, 0.0);
  for (std::size_t j = 0; j < s; ++j) {
    r.omega.push_back(scratch[j].idx);
    r.similarities.push_back(scratch[j].sim);
    const double* c = cb.codes.data.data() + static_cast<std::size_t>(scratch[j].idx) * F;
    for (std::size_t f = 0; f < F; ++f) r.h_hat[f] += c[f];
  }
  return r;
}

std::vector<std::vector<int>> select_top_s_batch(std::span<const double> h, std::size_t rows,
                                                 const CodebookState& cb, std::size_t s) {
  const std::size_t F = cb.code_dim();
  if (h.size() != rows * F) throw DimensionError("select_top_s_batch: block size mismatch");
  const LiveCodes lc = live_codes(cb);
  check_capacity(cb, s, lc.ids.size());
  std::vector<std::vector<int>> out(rows);
  std::vector<Scored> scratch;
  for (std::size_t r = 0; r < rows; ++r) {
    rank_row(h.data() + r * F, cb, lc, s, scratch);
    out[r].resize(s);
    for (std::size_t j = 0; j < s; ++j) out[r][j] = scratch[j].idx;
  }
  return out;
}

Var codebook_select(Var h, Var codes, const std::vector<std::vector<int>>& omega, const Tensor* st_anchor) {
  const Tensor& H = h.value();
  const Tensor& C = codes.value();
  const std::size_t rows = H.rows(), F = H.cols();
  if (C.cols() != F || omega.size() != rows) throw DimensionError("codebook_select: shape mismatch");
  if (st_anchor && st_anchor->shape != H.shape) throw DimensionError("codebook_select: anchor shape mismatch");
  Tensor out(H.shape);
  if (st_anchor)
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = H.data[i] - st_anchor->data[i];
  for (std::size_t r = 0; r < rows; ++r) {
    double* o = out.data.data() + r * F;
    for (int k : omega[r]) {
      const double* c = C.data.data() + static_cast<std::size_t>(k) * F;
      for (std::size_t f = 0; f < F; ++f) o[f] += c[f];
    }
  }
  return h.graph->record(std::move(out), {h, codes}, [h, codes, rows, F, omega](Graph& g, Var self) {
    const auto& d = g.out_grad(self);
    if (g.needs_grad(h)) {
      auto& gh = g.grad_buffer(h);
      for (std::size_t i = 0; i < gh.size(); ++i) gh[i] += d[i];
    }
    if (g.needs_grad(codes)) {
      auto& gc = g.grad_buffer(codes);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* dr = d.data() + r * F;
        for (int k : omega[r]) {
          double* c = gc.data() + static_cast<std::size_t>(k) * F;
          for (std::size_t f = 0; f < F; ++f) c[f] += dr[f];
        }
      }
    }
  });
}

Var codebook_l1(Var codes, std::span<const int> code_ids, double lambda) {
  const Tensor& C = codes.value();
  const std::size_t F = C.cols(), K = C.rows();
  std::vector<int> ids(code_ids.begin(), code_ids.end());
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  double total = 0.0;
  for (int k : ids) {
    if (k < 0 || static_cast<std::size_t>(k) >= K) throw IndexError("codebook_l1: code id out of range");
    const double* c = C.data.data() + static_cast<std::size_t>(k) * F;
    for (std::size_t f = 0; f < F; ++f) total += std::abs(c[f]);
  }
  Tensor out({1}, lambda * total);
  return codes.graph->record(std::move(out), {codes}, [codes, F, lambda, ids = std::move(ids)](Graph& g, Var self) {
    const double d = g.out_grad(self)[0] * lambda;
    const auto& cv = g.value(codes).data;
    auto& gc = g.grad_buffer(codes);
    for (int k : ids) {
      const std::size_t base = static_cast<std::size_t>(k) * F;
      for (std::size_t f = 0; f < F; ++f) {
        const double x = cv[base + f];
        gc[base + f] += d * static_cast<double>((x > 0.0) - (x < 0.0));
      }
    }
  });
}

BottleneckVars bottleneck_forward(Graph& g, Var a, SAEParams& sae, CodebookState& cb, const Tensor* st_anchor) {
  if (a.value().cols() != sae.input_dim()) {
    throw DimensionError("bottleneck: activation dim " + std::to_string(a.value().cols()) +
                         " vs SAE input dim " + std::to_string(sae.input_dim()));
  }
  if (sae.code_dim() != cb.code_dim()) throw DimensionError("bottleneck: SAE/codebook dim mismatch");
  BottleneckVars out;
  Var pre = relu(linear(a, g.param(sae.w_enc), g.param(sae.b_enc)));
  out.h_enc = sae.use_norm ? layer_norm(pre, g.param(sae.norm_gain), g.param(sae.norm_bias), 1e-5) : pre;
  const Tensor& H = out.h_enc.value();
  out.omega = select_top_s_batch(H.data, H.rows(), cb, cb.top_s);
  out.h_hat = codebook_select(out.h_enc, g.param(cb.codes), out.omega, st_anchor);
  out.a_hat = linear(out.h_hat, g.param(sae.w_dec), g.param(sae.b_dec));
  return out;
}

BottleneckResult bottleneck_forward(std::span<const double> a, SAEParams& sae, CodebookState& cb) {
  Graph g(false);
  Var av = g.constant(Tensor({1, a.size()}, std::vector<double>(a.begin(), a.end())));
  BottleneckVars v = bottleneck_forward(g, av, sae, cb);
  BottleneckResult r;
  r.a_hat = v.a_hat.value().data;
  r.selection = select_top_s(v.h_enc.value().data, cb, cb.top_s);
  return r;
}

void kaiming_init(SAEParams& sae, CodebookState& cb, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto fill_uniform = [&rng](Tensor& t, double bound) {
    std::uniform_real_distribution<double> u(-bound, bound);
    for (double& x : t.data) x = u(rng);
  };
  const double d = static_cast<double>(sae.input_dim());
  const double F = static_cast<double>(sae.code_dim());
  fill_uniform(sae.w_enc, std::sqrt(6.0 / d));
  fill_uniform(sae.w_dec, std::sqrt(6.0 / F));
  std::fill(sae.b_enc.data.begin(), sae.b_enc.data.end(), 0.0);
  std::fill(sae.b_dec.data.begin(), sae.b_dec.data.end(), 0.0);
  std::fill(sae.norm_gain.data.begin(), sae.norm_gain.data.end(), 1.0);
  std::fill(sae.norm_bias.data.begin(), sae.norm_bias.data.end(), 0.0);

  std::normal_distribution<double> n01(0.0, 1.0);
  const std::size_t K = cb.num_codes(), Fd = cb.code_dim();
  for (std::size_t k = 0; k < K; ++k) {
    double* c = cb.codes.data.data() + k * Fd;
    double norm = 0.0;
    while (!(norm > 1e-12)) {
      for (std::size_t f = 0; f < Fd; ++f) c[f] = n01(rng);
      norm = std::sqrt(dot(c, c, Fd));
    }
    for (std::size_t f = 0; f < Fd; ++f) c[f] /= norm;
  }
}

int delete_codes(CodebookState& cb, std::span<const int> indices) {
  const std::size_t K = cb.num_codes();
  std::set<int> fresh;
  for (int k : indices) {
    if (k < 0 || static_cast<std::size_t>(k) >= K) {
      throw IndexError("delete_codes: index " + std::to_string(k) + " outside [0," + std::to_string(K) + ")");
    }
    if (!cb.is_deleted(static_cast<std::size_t>(k))) fresh.insert(k);
  }
  const std::size_t live_after = cb.live_count() - fresh.size();
  if (live_after < cb.top_s) {
    throw CapacityError("delete_codes: deleting " + std::to_string(fresh.size()) + " codes would leave " +
                        std::to_string(live_after) + " live codes, fewer than S = " + std::to_string(cb.top_s));
  }
  for (int k : fresh) cb.deleted[static_cast<std::size_t>(k)] = 1;
  return static_cast<int>(fresh.size());
}

}  // namespace cu
