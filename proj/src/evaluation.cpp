#include "codeunlearn/evaluation.hpp"
#include "codeunlearn/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <sstream>

#include "codeunlearn/error.hpp"

namespace cu {

namespace {

void check_parallel(std::size_t h, std::size_t r, const char* what) {
  if (h != r) {
    throw ContractError(std::string(what) + ": " + std::to_string(h) + " hypotheses vs " + std::to_string(r) +
                        " references");
  }
}

}  // namespace

double bleu(const std::vector<TokenSeq>& hypotheses, const std::vector<TokenSeq>& references, std::size_t max_n) {
  check_parallel(hypotheses.size(), references.size(), "bleu");
  if (hypotheses.empty()) throw ContractError("bleu: empty corpus");
  if (max_n < 1) throw ContractError("bleu: max_n must be >= 1");

  std::vector<double> matched(max_n, 0.0), total(max_n, 0.0);
  double hyp_len = 0.0, ref_len = 0.0;
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    const TokenSeq& h = hypotheses[s];
    const TokenSeq& r = references[s];
    hyp_len += static_cast<double>(h.size());
    ref_len += static_cast<double>(r.size());
    for (std::size_t n = 1; n <= max_n; ++n) {
      if (h.size() < n) continue;
      std::map<TokenSeq, int> ref_counts;
      if (r.size() >= n)
        for (std::size_t i = 0; i + n <= r.size(); ++i) ++ref_counts[TokenSeq(r.begin() + i, r.begin() + i + n)];
      std::map<TokenSeq, int> hyp_counts;
      for (std::size_t i = 0; i + n <= h.size(); ++i) ++hyp_counts[TokenSeq(h.begin() + i, h.begin() + i + n)];
      for (const auto& [gram, c] : hyp_counts) {
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) matched[n - 1] += std::min(c, it->second);
      }
      total[n - 1] += static_cast<double>(h.size() - n + 1);
    }
  }
  if (total[0] == 0.0 || matched[0] == 0.0) return 0.0;

  double log_sum = 0.0;
  for (std::size_t n = 0; n < max_n; ++n) {
    double m = matched[n], t = total[n];
    if (n >= 1 && m == 0.0) {
      m += 1.0;
      t += 1.0;
    }
    log_sum += std::log(m / t);
  }
  const double bp = hyp_len >= ref_len ? 1.0 : std::exp(1.0 - ref_len / hyp_len);
  return bp * std::exp(log_sum / static_cast<double>(max_n));
}

double meteor_lite(const TokenSeq& hyp, const TokenSeq& ref, const MeteorParams& p) {
  if (hyp.empty() || ref.empty()) return 0.0;
  std::vector<char> used(ref.size(), 0);
  std::vector<std::pair<std::size_t, std::size_t>> align;  // (hyp pos, ref pos)
  for (std::size_t i = 0; i < hyp.size(); ++i) {
    for (std::size_t j = 0; j < ref.size(); ++j) {
      if (!used[j] && ref[j] == hyp[i]) {
        used[j] = 1;
        align.emplace_back(i, j);
        break;
      }
    }
  }
  const double m = static_cast<double>(align.size());
  if (m == 0.0) return 0.0;
  std::size_t chunks = 1;
  for (std::size_t k = 1; k < align.size(); ++k) {
    const bool contiguous = align[k].first == align[k - 1].first + 1 && align[k].second == align[k - 1].second + 1;
    if (!contiguous) ++chunks;
  }
  const double P = m / static_cast<double>(hyp.size());
  const double R = m / static_cast<double>(ref.size());
  const double f_mean = P * R / (p.alpha * P + (1.0 - p.alpha) * R);
  const double penalty = p.gamma * std::pow(static_cast<double>(chunks) / m, p.beta);
  return f_mean * (1.0 - penalty);
}

double meteor_lite(const std::vector<TokenSeq>& hypotheses, const std::vector<TokenSeq>& references,
                   const MeteorParams& p) {
  check_parallel(hypotheses.size(), references.size(), "meteor_lite");
  if (hypotheses.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) s += meteor_lite(hypotheses[i], references[i], p);
  return s / static_cast<double>(hypotheses.size());
}

double token_accuracy(const TokenSeq& h, const TokenSeq& r) {
  const std::size_t longest = std::max(h.size(), r.size());
  if (longest == 0) return 1.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < std::min(h.size(), r.size()); ++i) hits += h[i] == r[i];
  return static_cast<double>(hits) / static_cast<double>(longest);
}

double token_accuracy(const std::vector<TokenSeq>& hypotheses, const std::vector<TokenSeq>& references) {
  check_parallel(hypotheses.size(), references.size(), "token_accuracy");
  if (hypotheses.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) s += token_accuracy(hypotheses[i], references[i]);
  return s / static_cast<double>(hypotheses.size());
}

const char* metric_name(Metric m) {
  switch (m) {
    case Metric::Bleu:
      return "bleu";
    case Metric::Meteor:
      return "meteor";
    case Metric::TokenAccuracy:
      return "token_accuracy";
  }
  return "?";
}

double MetricSet::get(Metric m) const {
  switch (m) {
    case Metric::Bleu:
      return bleu;
    case Metric::Meteor:
      return meteor;
    case Metric::TokenAccuracy:
      return token_accuracy;
  }
  return 0.0;
}

MetricSet score(const std::vector<TokenSeq>& hypotheses, const std::vector<TokenSeq>& references) {
  MetricSet m;
  m.bleu = bleu(hypotheses, references);
  m.meteor = meteor_lite(hypotheses, references);
  m.token_accuracy = token_accuracy(hypotheses, references);
  return m;
}

std::optional<double> normalized_improvement_drop(double unlearned, double zero_shot, double codebook) {
  if (codebook == zero_shot) return std::nullopt;
  if (unlearned == codebook) return 0.0;
  return 100.0 * (unlearned - codebook) / (codebook - zero_shot);
}

std::vector<TokenSeq> decode_all(const Seq2SeqModel& model, const std::vector<Sentence>& data,
                                 std::size_t batch_size) {
  std::vector<TokenSeq> out(data.size());
  const std::size_t max_len = model.config().max_seq_len;
  const std::size_t batches = (data.size() + batch_size - 1) / batch_size;
  parallel_for(batches, [&](std::size_t b) {
    const std::size_t start = b * batch_size, end = std::min(data.size(), start + batch_size);
    std::vector<TokenSeq> src;
    for (std::size_t i = start; i < end; ++i) src.push_back(data[i].source);
    auto hyps = model.greedy_decode(src, max_len);
    for (std::size_t i = start; i < end; ++i) out[i] = std::move(hyps[i - start]);
  });
  return out;
}

MetricSet evaluate(const Seq2SeqModel& model, const std::vector<Sentence>& data) {
  if (data.empty()) throw ContractError("evaluate: empty evaluation set");
  std::vector<TokenSeq> refs;
  refs.reserve(data.size());
  for (const auto& s : data) refs.push_back(s.target);
  return score(decode_all(model, data), refs);
}

std::optional<double> EvalReport::nid(Metric m) const {
  return normalized_improvement_drop(raw.get(m), baseline.zero_shot.get(m), baseline.codebook.get(m));
}

std::optional<double> EvalReport::pct_change(Metric m) const {
  const double cb = baseline.codebook.get(m);
  if (cb == 0.0) return std::nullopt;
  return 100.0 * (raw.get(m) - cb) / cb;
}

TopicBaselines measure_baselines(const Seq2SeqModel& zero_shot, const Seq2SeqModel& codebook,
                                 const TopicDatasets& ds) {
  TopicBaselines b;
  b.topic.zero_shot = evaluate(zero_shot, ds.d_topic_eval);
  b.topic.codebook = evaluate(codebook, ds.d_topic_eval);
  b.rest.zero_shot = evaluate(zero_shot, ds.d_rest);
  b.rest.codebook = evaluate(codebook, ds.d_rest);
  return b;
}

ReportPair build_report(const Seq2SeqModel& model, const TopicDatasets& ds, const TopicBaselines& baselines) {
  ReportPair r;
  r.topic.dataset = "D_T'";
  r.topic.sample_count = ds.d_topic_eval.size();
  r.topic.raw = evaluate(model, ds.d_topic_eval);
  r.topic.baseline = baselines.topic;
  r.rest.dataset = "D_R";
  r.rest.sample_count = ds.d_rest.size();
  r.rest.raw = evaluate(model, ds.d_rest);
  r.rest.baseline = baselines.rest;
  return r;
}

const char* const kReportNote =
    "zero_shot = randomly initialized model before training; BERTScore and BartScore are not computed, "
    "token_accuracy stands in for them";

namespace {

std::string opt_str(const std::optional<double>& v) {
  if (!v) return "n/a";
  std::ostringstream os;
  os << std::setprecision(17) << *v;
  return os.str();
}

}  // namespace

std::string report_csv(const std::string& topic, const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "topic,dataset,sprime,deleted_count,metric,raw,zero_shot,codebook,nid_percent\n";
  for (const auto& row : rows) {
    for (const EvalReport* r : {&row.reports.topic, &row.reports.rest}) {
      for (Metric m : kAllMetrics) {
        os << topic << ',' << r->dataset << ',' << row.sprime << ',' << row.deleted_count << ',' << metric_name(m)
           << ',' << r->raw.get(m) << ',' << r->baseline.zero_shot.get(m) << ',' << r->baseline.codebook.get(m)
           << ',' << opt_str(r->nid(m)) << '\n';
      }
    }
  }
  return os.str();
}

std::string plot_data_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "sprime,dataset,metric,pct_change,nid_percent\n";
  for (const auto& row : rows) {
    for (const EvalReport* r : {&row.reports.topic, &row.reports.rest}) {
      for (Metric m : kAllMetrics) {
        os << row.sprime << ',' << r->dataset << ',' << metric_name(m) << ',' << opt_str(r->pct_change(m)) << ','
           << opt_str(r->nid(m)) << '\n';
      }
    }
  }
  return os.str();
}

}  // namespace cu
