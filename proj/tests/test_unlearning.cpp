#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "codeunlearn/unlearning.hpp"
#include "support/oracles.hpp"

using namespace cu;

namespace {

ActivationTrace trace_of(std::size_t id, std::vector<std::vector<int>> positions) {
  ActivationTrace t;
  t.sample_id = id;
  t.positions = std::move(positions);
  return t;
}

std::vector<ActivationTrace> random_traces(std::mt19937_64& rng, std::size_t n, std::size_t K, std::size_t sprime,
                                           int planted = -1) {
  std::uniform_int_distribution<std::size_t> len(1, 6);
  std::vector<ActivationTrace> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::vector<int>> pos(len(rng));
    for (auto& set : pos) {
      std::vector<int> all(K);
      std::iota(all.begin(), all.end(), 0);
      std::shuffle(all.begin(), all.end(), rng);
      set.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(sprime));
    }
    if (planted >= 0 && std::find(pos[0].begin(), pos[0].end(), planted) == pos[0].end()) pos[0].back() = planted;
    out.push_back(trace_of(i, pos));
  }
  return out;
}

// Chi-squared statistic from observed vs expected counts, no shortcut formula.
double chi2_expected_form(double a, double nt, double c, double nc) {
  const double O[4] = {a, nt - a, c, nc - c};
  const double n = nt + nc, col1 = a + c, col2 = n - col1;
  const double E[4] = {nt * col1 / n, nt * col2 / n, nc * col1 / n, nc * col2 / n};
  double s = 0.0;
  for (int i = 0; i < 4; ++i) s += (O[i] - E[i]) * (O[i] - E[i]) / E[i];
  return s;
}

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

std::vector<Sentence> repeated(int token, std::size_t n, std::size_t id0) {
  std::vector<Sentence> out;
  for (std::size_t i = 0; i < n; ++i) {
    Sentence s;
    s.id = id0 + i;
    s.source = std::vector<int>(1 + i % 4, token);
    s.target = s.source;
    out.push_back(s);
  }
  return out;
}

TopicDatasets toy_datasets(int topic, int other) {
  TopicDatasets ds;
  ds.topic = "t" + std::to_string(topic);
  ds.topic_id = topic;
  ds.d_topic = repeated(topic, 40, 0);
  ds.d_control = repeated(other, 40, 0);
  ds.replacement_log.resize(40);
  ds.d_topic_eval = repeated(topic, 8, 100);
  ds.d_rest = repeated(other, 8, 200);
  return ds;
}

}  // namespace

TEST_CASE("code frequency worked examples") {
  std::vector<ActivationTrace> t{trace_of(0, {{1, 2}, {1, 3}}), trace_of(1, {{2, 4}})};
  const auto fs = code_frequency(t, 5, Granularity::PerSample);
  CHECK(fs == std::vector<double>{0.0, 0.5, 1.0, 0.5, 0.5});
  const auto fp = code_frequency(t, 5, Granularity::PerPosition);
  CHECK(fp[1] == doctest::Approx(2.0 / 3.0));
  CHECK(fp[2] == doctest::Approx(2.0 / 3.0));
  CHECK(code_counts(t, 5, Granularity::PerPosition).units == 3);
  CHECK_THROWS_AS(code_frequency({}, 5), ContractError);
  CHECK_THROWS_AS(code_frequency({trace_of(0, {{7}})}, 5), IndexError);
}

TEST_CASE("code frequency matches a set-based recount") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const auto t = random_traces(rng, 30, 20, 4);
    const auto f = code_frequency(t, 20);
    std::vector<double> expect(20, 0.0);
    for (const auto& tr : t) {
      std::set<int> u;
      for (const auto& s : tr.positions) u.insert(s.begin(), s.end());
      for (int k : u) expect[static_cast<std::size_t>(k)] += 1.0 / 30.0;
    }
    for (std::size_t k = 0; k < 20; ++k) CHECK(f[k] == doctest::Approx(expect[k]).epsilon(1e-12));
  }
}

TEST_CASE("enrichment ratio") {
  CHECK(enrichment_ratio(0.5, 0.25) == doctest::Approx(1.0).epsilon(1e-8));
  CHECK(enrichment_ratio(0.3, 0.3) == 0.0);
  CHECK(enrichment_ratio(0.25, 0.5) == doctest::Approx(-1.0).epsilon(1e-8));
  CHECK(enrichment_ratio(0.0, 0.0) == 0.0);
  CHECK(std::isfinite(enrichment_ratio(0.4, 0.0)));
  CHECK(enrichment_ratio(0.4, 0.0) > 20.0);
}

TEST_CASE("chi-squared worked examples") {
  const ChiSquared same = chi_squared_pvalue(50, 100, 50, 100);
  CHECK(same.chi2 == 0.0);
  CHECK(same.p == doctest::Approx(1.0));
  const ChiSquared d = chi_squared_pvalue(50, 100, 10, 100);
  CHECK(d.chi2 == doctest::Approx(38.0952381).epsilon(1e-8));
  CHECK(d.p < 1e-8);
  // All-zero column: undefined statistic reported as chi2 = 0, p = 1.
  const ChiSquared z = chi_squared_pvalue(0, 10, 0, 10);
  CHECK(z.chi2 == 0.0);
  CHECK(z.p == 1.0);
  CHECK_THROWS_AS(chi_squared_pvalue(11, 10, 0, 10), ContractError);
  CHECK_THROWS_AS(chi_squared_pvalue(0, 0, 0, 10), ContractError);
}

TEST_CASE("chi-squared p-value agrees with numerical integration of the density") {
  CHECK(cu::testing::chi2_sf_integrated(3.841458820694124) == doctest::Approx(0.05).epsilon(1e-9));
  std::mt19937_64 rng(23);
  std::uniform_int_distribution<std::size_t> nd(5, 200);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t nt = nd(rng), nc = nd(rng);
    const std::size_t a = std::uniform_int_distribution<std::size_t>(0, nt)(rng);
    const std::size_t c = std::uniform_int_distribution<std::size_t>(0, nc)(rng);
    const ChiSquared r = chi_squared_pvalue(a, nt, c, nc);
    if (a + c == 0 || a + c == nt + nc) continue;
    const double x = chi2_expected_form(double(a), double(nt), double(c), double(nc));
    CHECK(r.chi2 == doctest::Approx(x).epsilon(1e-9));
    CHECK(r.p == doctest::Approx(cu::testing::chi2_sf_integrated(r.chi2)).epsilon(1e-8));
  }
}

TEST_CASE("chi-squared symmetry and monotonicity") {
  for (std::size_t a = 0; a <= 60; a += 7) {
    const ChiSquared x = chi_squared_pvalue(a, 60, 20, 80);
    const ChiSquared y = chi_squared_pvalue(20, 80, a, 60);
    CHECK(x.chi2 == doctest::Approx(y.chi2));
    CHECK(x.p == doctest::Approx(y.p));
  }
  double prev = -1.0;
  for (std::size_t a = 25; a <= 100; ++a) {  // f_T above f_C = 0.25
    const double chi = chi_squared_pvalue(a, 100, 25, 100).chi2;
    CHECK(chi >= prev);
    prev = chi;
  }
}

TEST_CASE("score_codes: null experiment deletes nothing, planted code is deleted") {
  std::mt19937_64 rng(31);
  UnlearnConfig cfg;
  cfg.sprime = 4;
  const auto t = random_traces(rng, 100, 32, 4);
  const EnrichmentReport null = score_codes(t, t, 32, cfg);
  CHECK(null.deleted.empty());
  for (const auto& s : null.codes) {
    CHECK(s.ratio == 0.0);
    CHECK(s.p == doctest::Approx(1.0));
  }

  const auto topic = random_traces(rng, 100, 32, 4, 9);
  const auto control = random_traces(rng, 100, 32, 4);
  const EnrichmentReport r = score_codes(topic, control, 32, cfg);
  CHECK(std::find(r.deleted.begin(), r.deleted.end(), 9) != r.deleted.end());
  CHECK(r.codes[9].f_topic == 1.0);
  for (const auto& s : r.codes) CHECK(s.remove == (s.ratio > 0.0 && s.p <= 0.05));
  CHECK(r.deleted.size() < 32 / 4);

  const std::string csv = r.to_csv();
  CHECK(csv.rfind("code_id,f_T,f_control,R,chi2,p,verdict\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 33);
  CHECK(r.to_json().find("\"deleted_count\": " + std::to_string(r.deleted.size())) != std::string::npos);

  UnlearnConfig bad;
  bad.p_threshold = 0.0;
  CHECK_THROWS_AS(score_codes(topic, control, 32, bad), ConfigError);
}

TEST_CASE("trace dump format") {
  CHECK(trace_dump({trace_of(7, {{1, 2}, {3}})}) == "7\t1,2 3\n");
}

TEST_CASE("model-level unlearning: null, capacity and sweep isolation") {
  Seq2SeqModel m(micro_config(), 4);
  CHECK_THROWS_AS(trace_activations(m, repeated(4, 2, 0), 17, "T"), CapacityError);

  const auto tr = trace_activations(m, repeated(4, 3, 0), 3, "T");
  REQUIRE(tr.size() == 3);
  CHECK(tr[2].positions.size() == 4);  // 3 tokens + eos
  CHECK(tr[0].positions[0].size() == 3);

  SUBCASE("null experiment leaves the model unchanged") {
    TopicDatasets ds = without_replacement(toy_datasets(4, 9));
    UnlearnConfig cfg;
    cfg.sprime = 4;
    const EnrichmentReport r = unlearn_topic(m, ds, cfg);
    CHECK(r.deleted.empty());
    CHECK(r.deletion_applied);
    CHECK(m.codebook().live_count() == 16);
  }

  SUBCASE("capacity error carries the verdicts") {
    // Leave exactly S live codes, then find a token pair with an enriched code.
    std::vector<int> kill;
    for (int k = 2; k < 16; ++k) kill.push_back(k);
    delete_codes(m.codebook(), kill);
    UnlearnConfig cfg;
    cfg.sprime = 1;
    bool found = false;
    for (int a = 4; a < 12 && !found; ++a)
      for (int b = 4; b < 12 && !found; ++b) {
        if (a == b) continue;
        TopicDatasets ds = toy_datasets(a, b);
        const auto t = trace_activations(m, ds.d_topic, 1, "T");
        const auto c = trace_activations(m, ds.d_control, 1, "~T");
        const EnrichmentReport expect = score_codes(t, c, 16, cfg);
        if (expect.deleted.empty()) continue;
        found = true;
        try {
          unlearn_topic(m, ds, cfg);
          FAIL("expected capacity error");
        } catch (const UnlearnCapacityError& e) {
          CHECK(e.report().deleted == expect.deleted);
          CHECK_FALSE(e.report().deletion_applied);
        }
        CHECK(m.codebook().live_count() == 2);
      }
    REQUIRE(found);
  }

  SUBCASE("sweep never mutates the pristine model and matches a direct run") {
    TopicDatasets ds = toy_datasets(4, 9);
    Seq2SeqModel zs(micro_config(), 99);
    const TopicBaselines b = measure_baselines(zs, m, ds);
    UnlearnConfig cfg;
    const auto before = m.codebook().deleted;
    const auto pts = sprime_sweep(m, ds, {2, 6}, cfg, b);
    REQUIRE(pts.size() == 2);
    CHECK(m.codebook().deleted == before);
    Seq2SeqModel direct = m;
    cfg.sprime = 6;
    const EnrichmentReport r = unlearn_topic(direct, ds, cfg);
    CHECK(r.deleted == pts[1].enrichment.deleted);
    CHECK(pts[1].reports.topic.raw.bleu == doctest::Approx(evaluate(direct, ds.d_topic_eval).bleu));
    const auto rows = sweep_rows(pts);
    CHECK(rows[0].sprime == 2);
    CHECK(rows[1].deleted_count == r.deleted.size());
  }
}
