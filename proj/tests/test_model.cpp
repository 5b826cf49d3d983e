#include "doctest.h"

#include <cmath>
#include <random>

#include "codeunlearn/corpus.hpp"
#include "codeunlearn/model.hpp"
#include "codeunlearn/training.hpp"
#include "support/gradcheck.hpp"

using namespace cu;

namespace {

ModelConfig micro_config() {
  ModelConfig c;
  c.vocab_size = 12;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_encoder_layers = 2;
  c.n_decoder_layers = 1;
  c.ff_dim = 16;
  c.max_seq_len = 8;
  c.bottleneck_layer = 1;
  c.num_codes = 16;
  c.code_dim = 8;
  c.top_s = 2;
  return c;
}

SequenceBatch toy_batch() {
  return SequenceBatch::from_sequences({{4, 5, 6}, {7, 8}}, {{9, 10, 11, 4}, {5}});
}

}  // namespace

TEST_CASE("ModelConfig validation") {
  ModelConfig c = micro_config();
  CHECK_NOTHROW(c.validate());
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = micro_config();
  c.bottleneck_layer = 2;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = micro_config();
  c.code_dim = 4;
  CHECK_THROWS_AS(Seq2SeqModel(c, 1), ConfigError);
}

TEST_CASE("SequenceBatch appends eos and pads") {
  SequenceBatch b = toy_batch();
  CHECK(b.src_len == 4);
  CHECK(b.tgt_len == 5);
  CHECK(b.source_ids == std::vector<int>{4, 5, 6, kEosId, 7, 8, kEosId, kPadId});
  CHECK(b.source_mask() == std::vector<std::uint8_t>{1, 1, 1, 1, 1, 1, 1, 0});
}

TEST_CASE("encode and teacher-forced shapes") {
  Seq2SeqModel m(micro_config(), 3);
  SequenceBatch b = toy_batch();
  Graph g(false);
  EncodeOutput e = m.encode(g, b);
  CHECK(e.memory.value().shape == Shape{8, 8});
  CHECK(e.a_hat.value().shape == e.pre_bottleneck.value().shape);
  CHECK(e.omega.size() == 8);
  Var logits = m.forward_teacher_forced(g, b);
  CHECK(logits.value().shape == Shape{10, 12});

  ModelConfig plain = micro_config();
  plain.use_bottleneck = false;
  Seq2SeqModel p(plain, 3);
  Graph g2(false);
  EncodeOutput e2 = p.encode(g2, b);
  CHECK(e2.memory.value().shape == Shape{8, 8});
  CHECK_FALSE(e2.pre_bottleneck.valid());
}

TEST_CASE("length and id errors") {
  Seq2SeqModel m(micro_config(), 3);
  Graph g(false);
  auto long_batch = SequenceBatch::from_sequences({std::vector<int>(8, 4)}, {{4}});
  CHECK_THROWS_AS(m.encode(g, long_batch), LengthError);
  auto bad = SequenceBatch::from_sequences({{40}}, {{4}});
  CHECK_THROWS_AS(m.encode(g, bad), IndexError);
}

TEST_CASE("decoder is causal") {
  Seq2SeqModel m(micro_config(), 5);
  SequenceBatch b = SequenceBatch::from_sequences({{4, 5, 6}}, {{7, 8, 9, 10}});
  Graph g(false);
  const Tensor base = m.forward_teacher_forced(g, b).value();
  for (std::size_t j = 0; j < 4; ++j) {
    SequenceBatch p = b;
    p.target_ids[j] = 11;
    Graph g2(false);
    const Tensor out = m.forward_teacher_forced(g2, p).value();
    // Target j feeds decoder input j+1, so logits at positions <= j are unchanged.
    for (std::size_t pos = 0; pos <= j; ++pos)
      for (std::size_t v = 0; v < 12; ++v) CHECK(out.at(pos, v) == base.at(pos, v));
    bool changed = false;
    for (std::size_t v = 0; v < 12; ++v) changed = changed || out.at(j + 1, v) != base.at(j + 1, v);
    CHECK(changed);
  }
}

TEST_CASE("loss at random init is close to ln(vocab)") {
  ModelConfig c;
  Seq2SeqModel m(c, 11);
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> tok(kNumReserved, static_cast<int>(c.vocab_size) - 1);
  std::vector<std::vector<int>> src(32), tgt(32);
  for (int i = 0; i < 32; ++i)
    for (int t = 0; t < 6; ++t) {
      src[i].push_back(tok(rng));
      tgt[i].push_back(tok(rng));
    }
  SequenceBatch b = SequenceBatch::from_sequences(src, tgt);
  Graph g(false);
  std::vector<int> labels = b.target_ids;
  const double ce = softmax_cross_entropy(m.forward_teacher_forced(g, b), labels, kPadId).value()[0];
  const double ln_v = std::log(static_cast<double>(c.vocab_size));
  CHECK(std::abs(ce - ln_v) <= 0.1 * ln_v);
}

TEST_CASE("bottleneck output fully determines everything above it") {
  Seq2SeqModel m(micro_config(), 7);
  SequenceBatch b = toy_batch();
  auto run = [&](const EncodeOptions& opt) {
    Graph g(false);
    return m.encode(g, b, opt).memory.value().data;
  };
  const auto base = run({});

  EncodeOptions post;
  post.post_bottleneck_hook = [](Tensor& t) { t.data[3] += 0.5; };
  CHECK(run(post) != base);

  // Perturb the pre-bottleneck stream but pin the bottleneck output to its
  // unperturbed value: nothing downstream may move.
  Tensor pinned;
  {
    Graph g(false);
    pinned = m.encode(g, b).a_hat.value();
  }
  EncodeOptions pre;
  pre.pre_bottleneck_hook = [](Tensor& t) {
    for (double& x : t.data) x *= -2.0;
  };
  pre.post_bottleneck_hook = [&](Tensor& t) { t = pinned; };
  CHECK(run(pre) == base);

  EncodeOptions only_pre;
  only_pre.pre_bottleneck_hook = pre.pre_bottleneck_hook;
  CHECK(run(only_pre) != base);
}

TEST_CASE("trace width S matches the inference selection") {
  Seq2SeqModel m(micro_config(), 7);
  SequenceBatch b = toy_batch();
  EncodeOptions opt;
  opt.trace_width = 2;
  Graph g(false);
  EncodeOutput e = m.encode(g, b, opt);
  REQUIRE(e.trace.size() == 2);
  CHECK(e.trace[0].size() == 4);
  CHECK(e.trace[1].size() == 3);
  for (std::size_t i = 0; i < 4; ++i) CHECK(e.trace[0][i] == e.omega[i]);
  for (std::size_t i = 0; i < 3; ++i) CHECK(e.trace[1][i] == e.omega[4 + i]);

  Graph g2(false);
  EncodeOutput e2 = m.encode(g2, b, opt);
  CHECK(e2.trace == e.trace);
}

TEST_CASE("greedy decode bounds and repeatability") {
  Seq2SeqModel m(micro_config(), 9);
  const std::vector<int> src{4, 5, 6};
  CHECK(m.greedy_decode(src, 1).size() <= 1);
  CHECK(m.greedy_decode(src, 0).empty());
  CHECK(m.greedy_decode(src, 6) == m.greedy_decode(src, 6));
  CHECK(m.greedy_decode(src, 100).size() <= micro_config().max_seq_len);
  for (int t : m.greedy_decode(src, 6)) CHECK(t != kEosId);
}

TEST_CASE("full micro-model joint loss passes finite differences") {
  Seq2SeqModel m(micro_config(), 21);
  SequenceBatch b = toy_batch();
  std::vector<std::vector<int>> omega0;
  EncodeOptions opt;
  {
    Graph g(false);
    EncodeOutput e = m.encode(g, b);
    omega0 = e.omega;
    opt.st_anchor = e.h_enc.value();
  }
  bool stable = true;
  auto build = [&](Graph& g) {
    EncodeOutput e = m.encode(g, b, opt);
    stable = stable && e.omega == omega0;
    Var logits = m.decode_logits(g, b, e, opt);
    std::vector<int> labels = b.target_ids;
    for (int& t : labels)
      if (t == kPadId) t = -1;
    Var ce = softmax_cross_entropy(logits, labels, -1);
    return joint_loss(ce, codebook_loss(e.pre_bottleneck, e.a_hat, e.src_valid, g.param(m.codebook().codes), e.omega,
                                        1e-3));
  };
  auto r = cu::testing::grad_check(build, m.parameters(), 1e-6);
  REQUIRE(stable);
  CHECK(r.rel_error <= 1e-4);
}

TEST_CASE("copy task trains to the identity map") {
  ModelConfig c = micro_config();
  c.vocab_size = 20;
  c.d_model = 32;
  c.n_heads = 4;
  c.ff_dim = 64;
  c.num_codes = 64;
  c.code_dim = 32;
  c.top_s = 4;
  Corpus corpus;
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> tok(kUnkId, 19);
  std::uniform_int_distribution<int> len(2, 5);
  for (std::size_t i = 0; i < 250; ++i) {
    Sentence s;
    s.id = i;
    const int n = len(rng);
    for (int t = 0; t < n; ++t) s.source.push_back(tok(rng));
    s.target = s.source;
    (i < 200 ? corpus.train : corpus.validation).push_back(s);
  }
  Seq2SeqModel m(c, 2);
  TrainConfig tc;
  tc.epochs = 30;
  tc.batch_size = 16;
  tc.lr = 5e-3;
  TrainLog log = train(m, corpus, tc);
  CHECK(log.best_val_acc >= 0.95);
  CHECK(m.greedy_decode(std::vector<int>{5, 9, 3}, 8) == std::vector<int>{5, 9, 3});
}
