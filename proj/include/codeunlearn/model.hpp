#pragma once

// Pre-norm encoder-decoder transformer with one codebook bottleneck inside
// a chosen encoder layer. In that layer the stream after self-attention and
// its residual is replaced by the bottleneck reconstruction; the
// feed-forward sublayer and everything above it only see that output.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "codeunlearn/codebook.hpp"
#include "codeunlearn/tensor.hpp"

namespace cu {

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;
inline constexpr int kNumReserved = 4;

struct ModelConfig {
  std::size_t vocab_size = 125;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_encoder_layers = 3;
  std::size_t n_decoder_layers = 2;
  std::size_t ff_dim = 128;
  std::size_t max_seq_len = 16;
  std::size_t bottleneck_layer = 2;
  double dropout = 0.0;
  // bottleneck
  bool use_bottleneck = true;
  std::size_t num_codes = 512;  // K
  std::size_t code_dim = 128;   // F
  std::size_t top_s = 8;        // S

  void validate() const;
};

// Row-major padded id matrices. Targets end with eos before padding.
struct SequenceBatch {
  std::size_t batch = 0;
  std::size_t src_len = 0;
  std::size_t tgt_len = 0;
  std::vector<int> source_ids;
  std::vector<int> target_ids;
  int pad_id = kPadId;
  int bos_id = kBosId;
  int eos_id = kEosId;

  // Pads sequences; appends eos to every source and target.
  static SequenceBatch from_sequences(const std::vector<std::vector<int>>& sources,
                                      const std::vector<std::vector<int>>& targets);
  std::vector<std::uint8_t> source_mask() const;
};

struct AttentionParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct EncoderLayer {
  Tensor ln1_g, ln1_b;
  AttentionParams attn;
  Tensor ln2_g, ln2_b;
  Tensor w1, b1, w2, b2;
};

struct DecoderLayer {
  Tensor ln1_g, ln1_b;
  AttentionParams self_attn;
  Tensor ln2_g, ln2_b;
  AttentionParams cross_attn;
  Tensor ln3_g, ln3_b;
  Tensor w1, b1, w2, b2;
};

enum class BottleneckMode { Active, Bypass };

struct EncodeOptions {
  BottleneckMode mode = BottleneckMode::Active;
  // When > 0, record the top-`trace_width` live codes for every non-pad
  // source position (analysis only; the forward pass still uses S).
  std::size_t trace_width = 0;
  // Test hooks: rewrite the activation block right before the bottleneck
  // or right after it (both [rows x d]).
  std::function<void(Tensor&)> pre_bottleneck_hook;
  std::function<void(Tensor&)> post_bottleneck_hook;
  std::optional<std::uint64_t> dropout_seed;  // training only
  // Finite-difference checks only; see bottleneck_forward.
  std::optional<Tensor> st_anchor;
};

struct EncodeOutput {
  Var memory;                       // [B*L x d]
  Var pre_bottleneck;               // invalid when no bottleneck ran
  Var h_enc;
  Var a_hat;
  std::vector<std::vector<int>> omega;  // per row, width S
  // Per sample, per non-pad position: top-trace_width code ids.
  std::vector<std::vector<std::vector<int>>> trace;
  std::vector<std::uint8_t> src_valid;
};

class Seq2SeqModel {
 public:
  Seq2SeqModel() = default;
  Seq2SeqModel(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  CodebookState& codebook() { return codebook_; }
  const CodebookState& codebook() const { return codebook_; }
  SAEParams& sae() { return sae_; }

  // Stable names; the order is the checkpoint and optimizer order.
  std::vector<std::pair<std::string, Tensor*>> named_parameters();
  std::vector<Tensor*> parameters();
  std::size_t parameter_count();

  EncodeOutput encode(Graph& g, const SequenceBatch& batch, const EncodeOptions& opt = {});
  // Decoder logits [B*Lt x V] with teacher forcing (bos-shifted targets).
  Var decode_logits(Graph& g, const SequenceBatch& batch, const EncodeOutput& enc,
                    const EncodeOptions& opt = {});
  Var forward_teacher_forced(Graph& g, const SequenceBatch& batch, const EncodeOptions& opt = {});

  // Argmax decoding until eos or max_len tokens; ties go to the lower id.
  // Output excludes eos.
  std::vector<std::vector<int>> greedy_decode(const std::vector<std::vector<int>>& sources,
                                              std::size_t max_len,
                                              BottleneckMode mode = BottleneckMode::Active) const;
  std::vector<int> greedy_decode(const std::vector<int>& source, std::size_t max_len) const;

 private:
  Var decoder_stack(Graph& g, const std::vector<int>& dec_in, std::size_t batch, std::size_t len,
                    Var memory, std::size_t src_len, const std::vector<std::uint8_t>& src_valid,
                    const EncodeOptions& opt);
  void check_lengths(std::size_t src_len, std::size_t tgt_len) const;

  ModelConfig cfg_;
  Tensor enc_embed_, enc_pos_, dec_embed_, dec_pos_;
  std::vector<EncoderLayer> enc_layers_;
  std::vector<DecoderLayer> dec_layers_;
  Tensor enc_ln_g_, enc_ln_b_, dec_ln_g_, dec_ln_b_;
  Tensor out_w_, out_b_;
  SAEParams sae_;
  CodebookState codebook_;
};

}  // namespace cu
