#include "codeunlearn/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "codeunlearn/rng.hpp"

namespace cu {

void ModelConfig::validate() const {
  if (vocab_size <= static_cast<std::size_t>(kNumReserved)) throw ConfigError("model.vocab_size too small");
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
    throw ConfigError("model.d_model must be divisible by model.n_heads");
  }
  if (n_encoder_layers == 0 || n_decoder_layers == 0) throw ConfigError("model needs encoder and decoder layers");
  if (bottleneck_layer >= n_encoder_layers) throw ConfigError("model.bottleneck_layer must be < n_encoder_layers");
  if (ff_dim == 0 || max_seq_len < 2) throw ConfigError("model.ff_dim / max_seq_len invalid");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model.dropout must be in [0,1)");
  if (use_bottleneck) {
    if (code_dim < d_model) throw ConfigError("codebook.code_dim must be >= model.d_model");
    if (top_s == 0 || top_s > num_codes) throw ConfigError("codebook.top_s must be in [1, num_codes]");
  }
}

SequenceBatch SequenceBatch::from_sequences(const std::vector<std::vector<int>>& sources,
                                            const std::vector<std::vector<int>>& targets) {
  if (sources.empty()) throw ContractError("empty batch");
  if (!targets.empty() && targets.size() != sources.size()) throw DimensionError("source/target count mismatch");
  SequenceBatch b;
  b.batch = sources.size();
  for (const auto& s : sources) b.src_len = std::max(b.src_len, s.size() + 1);
  for (const auto& t : targets) b.tgt_len = std::max(b.tgt_len, t.size() + 1);
  b.source_ids.assign(b.batch * b.src_len, kPadId);
  for (std::size_t i = 0; i < b.batch; ++i) {
    std::copy(sources[i].begin(), sources[i].end(), b.source_ids.begin() + static_cast<std::ptrdiff_t>(i * b.src_len));
    b.source_ids[i * b.src_len + sources[i].size()] = kEosId;
  }
  if (!targets.empty()) {
    b.target_ids.assign(b.batch * b.tgt_len, kPadId);
    for (std::size_t i = 0; i < b.batch; ++i) {
      std::copy(targets[i].begin(), targets[i].end(), b.target_ids.begin() + static_cast<std::ptrdiff_t>(i * b.tgt_len));
      b.target_ids[i * b.tgt_len + targets[i].size()] = kEosId;
    }
  }
  return b;
}

std::vector<std::uint8_t> SequenceBatch::source_mask() const {
  std::vector<std::uint8_t> m(source_ids.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = source_ids[i] != pad_id;
  return m;
}

namespace {

void init_uniform(Tensor& t, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  for (double& x : t.data) x = u(rng);
}

void init_normal(Tensor& t, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  for (double& x : t.data) x = n(rng);
}

Tensor weight(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  Tensor w({in, out}, 0.0, true);
  init_uniform(w, std::sqrt(6.0 / static_cast<double>(in + out)), rng);
  return w;
}

Tensor vec(std::size_t n, double fill) { return Tensor({n}, fill, true); }

AttentionParams make_attention(std::size_t d, std::mt19937_64& rng) {
  AttentionParams a;
  a.wq = weight(d, d, rng);
  a.bq = vec(d, 0.0);
  a.wk = weight(d, d, rng);
  a.bk = vec(d, 0.0);
  a.wv = weight(d, d, rng);
  a.bv = vec(d, 0.0);
  a.wo = weight(d, d, rng);
  a.bo = vec(d, 0.0);
  return a;
}

void push_attention(std::vector<std::pair<std::string, Tensor*>>& out, const std::string& p, AttentionParams& a) {
  out.emplace_back(p + ".wq", &a.wq);
  out.emplace_back(p + ".bq", &a.bq);
  out.emplace_back(p + ".wk", &a.wk);
  out.emplace_back(p + ".bk", &a.bk);
  out.emplace_back(p + ".wv", &a.wv);
  out.emplace_back(p + ".bv", &a.bv);
  out.emplace_back(p + ".wo", &a.wo);
  out.emplace_back(p + ".bo", &a.bo);
}

Var attention_block(Graph& g, AttentionParams& p, Var xq, Var xkv, const AttentionShape& shape,
                    const std::vector<std::uint8_t>& key_valid) {
  Var q = linear(xq, g.param(p.wq), g.param(p.bq));
  Var k = linear(xkv, g.param(p.wk), g.param(p.bk));
  Var v = linear(xkv, g.param(p.wv), g.param(p.bv));
  Var o = attention(q, k, v, shape, key_valid);
  return linear(o, g.param(p.wo), g.param(p.bo));
}

Var feed_forward(Graph& g, Tensor& w1, Tensor& b1, Tensor& w2, Tensor& b2, Var x) {
  return linear(relu(linear(x, g.param(w1), g.param(b1))), g.param(w2), g.param(b2));
}

Var maybe_dropout(Var x, double rate, const EncodeOptions& opt, std::uint64_t salt) {
  if (rate <= 0.0 || !opt.dropout_seed) return x;
  return dropout(x, rate, mix64(*opt.dropout_seed ^ salt));
}

Var embed_with_positions(Graph& g, Tensor& table, Tensor& pos, const std::vector<int>& ids,
                         std::size_t batch, std::size_t len) {
  std::vector<int> positions(batch * len);
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i % len);
  return add(embedding(g.param(table), ids), embedding(g.param(pos), positions));
}

}  // namespace

Seq2SeqModel::Seq2SeqModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(derive_seed(seed, "model"));
  const std::size_t d = cfg_.d_model, V = cfg_.vocab_size, L = cfg_.max_seq_len, ff = cfg_.ff_dim;
  enc_embed_ = Tensor({V, d}, 0.0, true);
  init_normal(enc_embed_, 1.0, rng);
  enc_pos_ = Tensor({L, d}, 0.0, true);
  init_normal(enc_pos_, 1.0, rng);
  dec_embed_ = Tensor({V, d}, 0.0, true);
  init_normal(dec_embed_, 1.0, rng);
  dec_pos_ = Tensor({L, d}, 0.0, true);
  init_normal(dec_pos_, 1.0, rng);
  for (std::size_t l = 0; l < cfg_.n_encoder_layers; ++l) {
    EncoderLayer e;
    e.ln1_g = vec(d, 1.0);
    e.ln1_b = vec(d, 0.0);
    e.attn = make_attention(d, rng);
    e.ln2_g = vec(d, 1.0);
    e.ln2_b = vec(d, 0.0);
    e.w1 = weight(d, ff, rng);
    e.b1 = vec(ff, 0.0);
    e.w2 = weight(ff, d, rng);
    e.b2 = vec(d, 0.0);
    enc_layers_.push_back(std::move(e));
  }
  for (std::size_t l = 0; l < cfg_.n_decoder_layers; ++l) {
    DecoderLayer dl;
    dl.ln1_g = vec(d, 1.0);
    dl.ln1_b = vec(d, 0.0);
    dl.self_attn = make_attention(d, rng);
    dl.ln2_g = vec(d, 1.0);
    dl.ln2_b = vec(d, 0.0);
    dl.cross_attn = make_attention(d, rng);
    dl.ln3_g = vec(d, 1.0);
    dl.ln3_b = vec(d, 0.0);
    dl.w1 = weight(d, ff, rng);
    dl.b1 = vec(ff, 0.0);
    dl.w2 = weight(ff, d, rng);
    dl.b2 = vec(d, 0.0);
    dec_layers_.push_back(std::move(dl));
  }
  enc_ln_g_ = vec(d, 1.0);
  enc_ln_b_ = vec(d, 0.0);
  dec_ln_g_ = vec(d, 1.0);
  dec_ln_b_ = vec(d, 0.0);
  out_w_ = weight(d, V, rng);
  out_b_ = vec(V, 0.0);
  if (cfg_.use_bottleneck) {
    sae_ = SAEParams(d, cfg_.code_dim);
    codebook_ = CodebookState(cfg_.num_codes, cfg_.code_dim, cfg_.top_s);
    kaiming_init(sae_, codebook_, derive_seed(seed, "codebook"));
  }
}

std::vector<std::pair<std::string, Tensor*>> Seq2SeqModel::named_parameters() {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.emplace_back("enc.embed", &enc_embed_);
  out.emplace_back("enc.pos", &enc_pos_);
  out.emplace_back("dec.embed", &dec_embed_);
  out.emplace_back("dec.pos", &dec_pos_);
  for (std::size_t l = 0; l < enc_layers_.size(); ++l) {
    auto& e = enc_layers_[l];
    const std::string p = "enc." + std::to_string(l);
    out.emplace_back(p + ".ln1_g", &e.ln1_g);
    out.emplace_back(p + ".ln1_b", &e.ln1_b);
    push_attention(out, p + ".attn", e.attn);
    out.emplace_back(p + ".ln2_g", &e.ln2_g);
    out.emplace_back(p + ".ln2_b", &e.ln2_b);
    out.emplace_back(p + ".w1", &e.w1);
    out.emplace_back(p + ".b1", &e.b1);
    out.emplace_back(p + ".w2", &e.w2);
    out.emplace_back(p + ".b2", &e.b2);
  }
  for (std::size_t l = 0; l < dec_layers_.size(); ++l) {
    auto& dl = dec_layers_[l];
    const std::string p = "dec." + std::to_string(l);
    out.emplace_back(p + ".ln1_g", &dl.ln1_g);
    out.emplace_back(p + ".ln1_b", &dl.ln1_b);
    push_attention(out, p + ".self", dl.self_attn);
    out.emplace_back(p + ".ln2_g", &dl.ln2_g);
    out.emplace_back(p + ".ln2_b", &dl.ln2_b);
    push_attention(out, p + ".cross", dl.cross_attn);
    out.emplace_back(p + ".ln3_g", &dl.ln3_g);
    out.emplace_back(p + ".ln3_b", &dl.ln3_b);
    out.emplace_back(p + ".w1", &dl.w1);
    out.emplace_back(p + ".b1", &dl.b1);
    out.emplace_back(p + ".w2", &dl.w2);
    out.emplace_back(p + ".b2", &dl.b2);
  }
  out.emplace_back("enc.ln_g", &enc_ln_g_);
  out.emplace_back("enc.ln_b", &enc_ln_b_);
  out.emplace_back("dec.ln_g", &dec_ln_g_);
  out.emplace_back("dec.ln_b", &dec_ln_b_);
  out.emplace_back("out.w", &out_w_);
  out.emplace_back("out.b", &out_b_);
  if (cfg_.use_bottleneck) {
    out.emplace_back("sae.w_enc", &sae_.w_enc);
    out.emplace_back("sae.b_enc", &sae_.b_enc);
    out.emplace_back("sae.w_dec", &sae_.w_dec);
    out.emplace_back("sae.b_dec", &sae_.b_dec);
    out.emplace_back("sae.norm_gain", &sae_.norm_gain);
    out.emplace_back("sae.norm_bias", &sae_.norm_bias);
    out.emplace_back("codebook.codes", &codebook_.codes);
  }
  return out;
}

std::vector<Tensor*> Seq2SeqModel::parameters() {
  std::vector<Tensor*> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

std::size_t Seq2SeqModel::parameter_count() {
  std::size_t n = 0;
  for (Tensor* t : parameters()) n += t->numel();
  return n;
}

void Seq2SeqModel::check_lengths(std::size_t src_len, std::size_t tgt_len) const {
  if (src_len > cfg_.max_seq_len || tgt_len > cfg_.max_seq_len) {
    throw LengthError("sequence length " + std::to_string(std::max(src_len, tgt_len)) +
                      " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
  }
}

EncodeOutput Seq2SeqModel::encode(Graph& g, const SequenceBatch& batch, const EncodeOptions& opt) {
  check_lengths(batch.src_len, 0);
  for (int id : batch.source_ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size) throw IndexError("source id outside vocabulary");
  }
  const std::size_t B = batch.batch, L = batch.src_len;
  EncodeOutput out;
  out.src_valid = batch.source_mask();
  const AttentionShape shape{B, L, L, cfg_.n_heads, false};
  Var x = embed_with_positions(g, enc_embed_, enc_pos_, batch.source_ids, B, L);
  for (std::size_t l = 0; l < enc_layers_.size(); ++l) {
    EncoderLayer& e = enc_layers_[l];
    Var h = layer_norm(x, g.param(e.ln1_g), g.param(e.ln1_b));
    x = add(x, maybe_dropout(attention_block(g, e.attn, h, h, shape, out.src_valid), cfg_.dropout, opt, 2 * l));
    const bool run_bottleneck =
        cfg_.use_bottleneck && l == cfg_.bottleneck_layer && opt.mode == BottleneckMode::Active;
    if (run_bottleneck) {
      if (opt.pre_bottleneck_hook) {
        Tensor t = x.value();
        opt.pre_bottleneck_hook(t);
        x = g.constant(std::move(t));
      }
      out.pre_bottleneck = x;
      BottleneckVars bn = bottleneck_forward(g, x, sae_, codebook_, opt.st_anchor ? &*opt.st_anchor : nullptr);
      out.omega = std::move(bn.omega);
      out.h_enc = bn.h_enc;
      x = bn.a_hat;
      if (opt.post_bottleneck_hook) {
        Tensor t = x.value();
        opt.post_bottleneck_hook(t);
        x = g.constant(std::move(t));
      }
      out.a_hat = x;
      if (opt.trace_width > 0) {
        const Tensor& H = bn.h_enc.value();
        auto rows = select_top_s_batch(H.data, H.rows(), codebook_, opt.trace_width);
        out.trace.resize(B);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t i = 0; i < L; ++i) {
            if (out.src_valid[b * L + i]) out.trace[b].push_back(std::move(rows[b * L + i]));
          }
        }
      }
    }
    Var h2 = layer_norm(x, g.param(e.ln2_g), g.param(e.ln2_b));
    x = add(x, maybe_dropout(feed_forward(g, e.w1, e.b1, e.w2, e.b2, h2), cfg_.dropout, opt, 2 * l + 1));
  }
  out.memory = layer_norm(x, g.param(enc_ln_g_), g.param(enc_ln_b_));
  return out;
}

Var Seq2SeqModel::decoder_stack(Graph& g, const std::vector<int>& dec_in, std::size_t B, std::size_t Lt,
                                Var memory, std::size_t Ls, const std::vector<std::uint8_t>& src_valid,
                                const EncodeOptions& opt) {
  std::vector<std::uint8_t> tgt_valid(dec_in.size());
  for (std::size_t i = 0; i < dec_in.size(); ++i) tgt_valid[i] = dec_in[i] != kPadId;
  const AttentionShape self_shape{B, Lt, Lt, cfg_.n_heads, true};
  const AttentionShape cross_shape{B, Lt, Ls, cfg_.n_heads, false};
  Var y = embed_with_positions(g, dec_embed_, dec_pos_, dec_in, B, Lt);
  for (std::size_t l = 0; l < dec_layers_.size(); ++l) {
    DecoderLayer& dl = dec_layers_[l];
    const std::uint64_t salt = 1000 + 3 * l;
    Var h = layer_norm(y, g.param(dl.ln1_g), g.param(dl.ln1_b));
    y = add(y, maybe_dropout(attention_block(g, dl.self_attn, h, h, self_shape, tgt_valid), cfg_.dropout, opt, salt));
    Var h2 = layer_norm(y, g.param(dl.ln2_g), g.param(dl.ln2_b));
    y = add(y, maybe_dropout(attention_block(g, dl.cross_attn, h2, memory, cross_shape, src_valid), cfg_.dropout,
                             opt, salt + 1));
    Var h3 = layer_norm(y, g.param(dl.ln3_g), g.param(dl.ln3_b));
    y = add(y, maybe_dropout(feed_forward(g, dl.w1, dl.b1, dl.w2, dl.b2, h3), cfg_.dropout, opt, salt + 2));
  }
  y = layer_norm(y, g.param(dec_ln_g_), g.param(dec_ln_b_));
  return linear(y, g.param(out_w_), g.param(out_b_));
}

Var Seq2SeqModel::decode_logits(Graph& g, const SequenceBatch& batch, const EncodeOutput& enc,
                                const EncodeOptions& opt) {
  if (batch.target_ids.empty()) throw ContractError("teacher forcing needs target ids");
  check_lengths(batch.src_len, batch.tgt_len);
  const std::size_t B = batch.batch, Lt = batch.tgt_len;
  std::vector<int> dec_in(B * Lt, kPadId);
  for (std::size_t b = 0; b < B; ++b) {
    dec_in[b * Lt] = batch.bos_id;
    for (std::size_t t = 1; t < Lt; ++t) {
      const int prev = batch.target_ids[b * Lt + t - 1];
      dec_in[b * Lt + t] = (prev == batch.pad_id || prev == batch.eos_id) ? kPadId : prev;
    }
  }
  for (int id : dec_in) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size) throw IndexError("target id outside vocabulary");
  }
  return decoder_stack(g, dec_in, B, Lt, enc.memory, batch.src_len, enc.src_valid, opt);
}

Var Seq2SeqModel::forward_teacher_forced(Graph& g, const SequenceBatch& batch, const EncodeOptions& opt) {
  EncodeOutput enc = encode(g, batch, opt);
  return decode_logits(g, batch, enc, opt);
}

std::vector<std::vector<int>> Seq2SeqModel::greedy_decode(const std::vector<std::vector<int>>& sources,
                                                          std::size_t max_len, BottleneckMode mode) const {
  if (sources.empty()) return {};
  if (max_len == 0) return std::vector<std::vector<int>>(sources.size());
  // Inference graphs never write through parameter references.
  auto& self = const_cast<Seq2SeqModel&>(*this);
  const SequenceBatch batch = SequenceBatch::from_sequences(sources, {});
  const std::size_t B = batch.batch, Ls = batch.src_len;
  const std::size_t steps = std::min(max_len, cfg_.max_seq_len);
  Graph enc_graph(false);
  EncodeOptions opt;
  opt.mode = mode;
  EncodeOutput enc = self.encode(enc_graph, batch, opt);
  const Tensor memory_value = enc.memory.value();

  std::vector<std::vector<int>> out(B);
  std::vector<std::uint8_t> done(B, 0);
  std::vector<std::vector<int>> prefix(B, std::vector<int>{kBosId});
  const std::size_t V = cfg_.vocab_size;
  for (std::size_t step = 0; step < steps; ++step) {
    const std::size_t Lt = step + 1;
    std::vector<int> dec_in(B * Lt, kPadId);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < Lt; ++t) dec_in[b * Lt + t] = prefix[b][t];
    Graph g(false);
    Var memory = g.constant(memory_value);
    Var logits = self.decoder_stack(g, dec_in, B, Lt, memory, Ls, enc.src_valid, opt);
    const Tensor& lv = logits.value();
    bool all_done = true;
    for (std::size_t b = 0; b < B; ++b) {
      if (!done[b]) {
        const double* row = lv.data.data() + (b * Lt + step) * V;
        std::size_t best = 0;
        for (std::size_t v = 1; v < V; ++v)
          if (row[v] > row[best]) best = v;
        const int tok = static_cast<int>(best);
        if (tok == kEosId) {
          done[b] = 1;
        } else {
          out[b].push_back(tok);
          prefix[b].push_back(tok);
          if (out[b].size() >= max_len) done[b] = 1;
        }
      }
      if (prefix[b].size() < Lt + 1) prefix[b].push_back(kPadId);
      all_done = all_done && done[b];
    }
    if (all_done) break;
  }
  return out;
}

std::vector<int> Seq2SeqModel::greedy_decode(const std::vector<int>& source, std::size_t max_len) const {
  return greedy_decode(std::vector<std::vector<int>>{source}, max_len).front();
}

}  // namespace cu
