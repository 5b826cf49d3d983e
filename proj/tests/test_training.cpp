#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "codeunlearn/training.hpp"

using namespace cu;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.vocab_size = 16;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_encoder_layers = 2;
  c.n_decoder_layers = 1;
  c.ff_dim = 32;
  c.max_seq_len = 8;
  c.bottleneck_layer = 1;
  c.num_codes = 32;
  c.code_dim = 16;
  c.top_s = 2;
  return c;
}

Corpus reverse_corpus(std::size_t n, std::uint64_t seed) {
  Corpus c;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> tok(4, 15), len(2, 5);
  for (std::size_t i = 0; i < n; ++i) {
    Sentence s;
    s.id = i;
    for (int t = len(rng); t > 0; --t) s.source.push_back(tok(rng));
    s.target.assign(s.source.rbegin(), s.source.rend());
    (i < n * 4 / 5 ? c.train : c.validation).push_back(s);
  }
  return c;
}

double selected_code_magnitude(Seq2SeqModel& m, const Corpus& c) {
  std::vector<std::vector<int>> src;
  for (const auto& s : c.validation) src.push_back(s.source);
  std::vector<std::vector<int>> tgt(src.size());
  Graph g(false);
  EncodeOutput e = m.encode(g, SequenceBatch::from_sequences(src, tgt));
  std::vector<char> used(m.codebook().num_codes(), 0);
  for (std::size_t r = 0; r < e.omega.size(); ++r)
    if (e.src_valid[r])
      for (int k : e.omega[r]) used[static_cast<std::size_t>(k)] = 1;
  const std::size_t F = m.codebook().code_dim();
  double total = 0.0, n = 0.0;
  for (std::size_t k = 0; k < used.size(); ++k)
    if (used[k]) {
      for (std::size_t f = 0; f < F; ++f) total += std::abs(m.codebook().codes.data[k * F + f]);
      n += 1.0;
    }
  return total / n;
}

}  // namespace

TEST_CASE("codebook loss worked examples") {
  Graph g(false);
  const std::vector<std::uint8_t> one{1};
  Var codes = g.constant(Tensor({1, 2}, {2, -2}));
  const std::vector<std::vector<int>> omega{{0}};
  Var a = g.constant(Tensor({1, 2}, {0.3, -0.7}));
  CHECK(codebook_loss(a, a, one, codes, omega, 0.0).value()[0] == 0.0);
  Var z = g.constant(Tensor({1, 2}, {0, 0}));
  Var o = g.constant(Tensor({1, 2}, {1, 1}));
  CHECK(codebook_loss(z, o, one, codes, omega, 0.0).value()[0] == doctest::Approx(1.0));
  CHECK(codebook_loss(a, a, one, codes, omega, 1e-6).value()[0] == doctest::Approx(4e-6));
  // Masked rows do not contribute.
  Var a2 = g.constant(Tensor({2, 2}, {0, 0, 5, 5}));
  Var b2 = g.constant(Tensor({2, 2}, {1, 1, 0, 0}));
  const std::vector<std::uint8_t> mask{1, 0};
  CHECK(codebook_loss(a2, b2, mask, codes, {{0}, {0}}, 0.0).value()[0] == doctest::Approx(1.0));
  CHECK_THROWS_AS(codebook_loss(a, a2, one, codes, omega, 0.0), DimensionError);
}

TEST_CASE("joint loss") {
  CHECK(joint_loss(2.5, 0.5) == 3.0);
  CHECK(joint_loss(0.0, 0.0) == 0.0);
  CHECK_THROWS_AS(joint_loss(std::numeric_limits<double>::quiet_NaN(), 1.0), NumericError);
  CHECK_THROWS_AS(joint_loss(1.0, std::numeric_limits<double>::infinity()), NumericError);
  Graph g(false);
  CHECK(joint_loss(g.constant(Tensor({1}, {1.25})), g.constant(Tensor({1}, {0.75}))).value()[0] == 2.0);
}

TEST_CASE("joint loss sends gradient to both the translation and the codebook parameters") {
  Seq2SeqModel m(small_config(), 3);
  Corpus c = reverse_corpus(20, 1);
  std::vector<std::vector<int>> s, t;
  for (const auto& x : c.train) {
    s.push_back(x.source);
    t.push_back(x.target);
  }
  Graph g;
  for (Tensor* p : m.parameters()) p->zero_grad();
  JointLossVars v = build_joint_loss(g, m, SequenceBatch::from_sequences(s, t), 1e-3);
  CHECK(v.joint.value()[0] == doctest::Approx(v.ce.value()[0] + v.mse.value()[0] + v.l1.value()[0]));
  g.backward(v.joint);
  auto norm = [](const Tensor& p) {
    double n = 0.0;
    for (double x : p.grad) n += x * x;
    return n;
  };
  CHECK(norm(m.codebook().codes) > 0.0);
  CHECK(norm(m.sae().w_enc) > 0.0);
  CHECK(norm(m.sae().w_dec) > 0.0);
  double total = 0.0;
  for (Tensor* p : m.parameters()) total += norm(*p);
  CHECK(total > norm(m.codebook().codes) + norm(m.sae().w_enc) + norm(m.sae().w_dec));
}

TEST_CASE("training config validation and zero epochs") {
  TrainConfig tc;
  tc.batch_size = 0;
  CHECK_THROWS_AS(tc.validate(), ConfigError);
  tc = TrainConfig{};
  tc.lr = -1.0;
  CHECK_THROWS_AS(tc.validate(), ConfigError);
  tc = TrainConfig{};
  tc.epochs = 0;
  Seq2SeqModel m(small_config(), 3);
  const auto before = m.codebook().codes.data;
  TrainLog log = train(m, reverse_corpus(50, 2), tc);
  CHECK(log.epochs.empty());
  CHECK(m.codebook().codes.data == before);
}

TEST_CASE("training is deterministic, decreases the loss and logs CSV") {
  Corpus c = reverse_corpus(300, 5);
  TrainConfig tc;
  tc.epochs = 4;
  tc.lr = 3e-3;
  tc.batch_size = 16;
  Seq2SeqModel a(small_config(), 8), b(small_config(), 8);
  std::size_t calls = 0;
  TrainLog la = train(a, c, tc, [&](const EpochRecord&) { ++calls; });
  TrainLog lb = train(b, c, tc);
  CHECK(calls == 4);
  REQUIRE(la.epochs.size() == 4);
  CHECK(a.codebook().codes.data == b.codebook().codes.data);
  CHECK(la.epochs.back().l_joint == lb.epochs.back().l_joint);
  CHECK(la.epochs.back().l_joint < la.epochs.front().l_joint);
  CHECK(la.epochs.back().l_ce < la.epochs.front().l_ce);
  for (const auto& e : la.epochs) CHECK(e.l_joint == doctest::Approx(e.l_ce + e.l_mse + e.l1));
  CHECK(la.best_val_acc == doctest::Approx(teacher_forced_accuracy(a, c.validation)));
  const std::string csv = la.to_csv();
  CHECK(csv.rfind("epoch,l_mse,l1,l_ce,l_joint,val_acc\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
}

TEST_CASE("a larger L1 weight yields smaller selected code magnitudes") {
  Corpus c = reverse_corpus(200, 6);
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 16;
  Seq2SeqModel base(small_config(), 12), heavy(small_config(), 12);
  train(base, c, tc);
  tc.lambda_l1 *= 1000.0;
  train(heavy, c, tc);
  CHECK(selected_code_magnitude(heavy, c) < selected_code_magnitude(base, c));
}
