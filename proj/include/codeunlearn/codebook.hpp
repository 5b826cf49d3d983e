#pragma once

// Sparse-autoencoder + discrete codebook bottleneck.
//
//   h_enc = layer_norm(relu(a W_enc + b_enc))
//   omega = top-S live codes by cosine similarity to h_enc
//   h_hat = sum of codes in omega
//   a_hat = h_hat W_dec + b_dec
//
// Selection is discrete; gradients cross it with a straight-through copy
// (d h_enc += d h_hat) while every selected code receives d h_hat.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "codeunlearn/tensor.hpp"

namespace cu {

struct CodebookState {
  Tensor codes;                        // K x F
  std::size_t top_s = 8;               // S
  std::vector<std::uint8_t> deleted;   // length K, 1 = deleted

  CodebookState() = default;
  CodebookState(std::size_t num_codes, std::size_t code_dim, std::size_t s);

  std::size_t num_codes() const { return codes.shape.empty() ? 0 : codes.shape[0]; }
  std::size_t code_dim() const { return codes.shape.empty() ? 0 : codes.shape[1]; }
  std::size_t live_count() const;
  bool is_deleted(std::size_t k) const { return deleted[k] != 0; }
  std::vector<int> deleted_indices() const;
};

struct SAEParams {
  Tensor w_enc;      // d x F
  Tensor b_enc;      // F
  Tensor w_dec;      // F x d
  Tensor b_dec;      // d
  Tensor norm_gain;  // F
  Tensor norm_bias;  // F
  bool use_norm = true;

  SAEParams() = default;
  SAEParams(std::size_t d, std::size_t code_dim);

  std::size_t input_dim() const { return w_enc.shape[0]; }
  std::size_t code_dim() const { return w_enc.shape[1]; }
  std::vector<Tensor*> parameters();
};

struct SelectionResult {
  std::vector<int> omega;            // ordered by similarity, ties by index
  std::vector<double> similarities;  // aligned with omega
  std::vector<double> h_hat;         // length F
};

// x.c / (|x||c|); 0 when |x| == 0. Throws ContractError when |c| == 0.
double cosine_similarity(std::span<const double> x, std::span<const double> c);

SelectionResult select_top_s(std::span<const double> h, const CodebookState& cb, std::size_t s);

// Row-wise top-s over an [rows x F] block. Same arithmetic as select_top_s.
std::vector<std::vector<int>> select_top_s_batch(std::span<const double> h, std::size_t rows,
                                                 const CodebookState& cb, std::size_t s);

struct BottleneckResult {
  std::vector<double> a_hat;  // length d
  SelectionResult selection;
};

// Inference-only pipeline for a single activation vector.
BottleneckResult bottleneck_forward(std::span<const double> a, SAEParams& sae, CodebookState& cb);

// Graph-level pipeline over an [N x d] activation block.
struct BottleneckVars {
  Var h_enc;  // [N x F]
  Var h_hat;  // [N x F]
  Var a_hat;  // [N x d]
  std::vector<std::vector<int>> omega;  // per row
};
// `st_anchor` (finite-difference checks only): h_hat additionally carries
// h_enc - st_anchor, so the value is unchanged at the anchor and numerical
// derivatives see the straight-through gradient.
BottleneckVars bottleneck_forward(Graph& g, Var a, SAEParams& sae, CodebookState& cb,
                                  const Tensor* st_anchor = nullptr);

// Straight-through codebook op: h_hat rows = sums of selected codes.
Var codebook_select(Var h, Var codes, const std::vector<std::vector<int>>& omega,
                    const Tensor* st_anchor = nullptr);

// lambda * sum_{k in codes} sum_f |c_k^f|, each listed code counted once.
Var codebook_l1(Var codes, std::span<const int> code_ids, double lambda);

// Kaiming-uniform encoder/decoder, unit-norm codes, zero biases.
void kaiming_init(SAEParams& sae, CodebookState& cb, std::uint64_t seed);

// Masks codes out of every future selection. Returns the number newly deleted.
int delete_codes(CodebookState& cb, std::span<const int> indices);

}  // namespace cu
