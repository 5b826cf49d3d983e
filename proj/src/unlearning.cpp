#include "codeunlearn/unlearning.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

#include "codeunlearn/codebook.hpp"
#include "codeunlearn/parallel.hpp"

namespace cu {

void UnlearnConfig::validate() const {
  if (sprime < 1) throw ConfigError("unlearn.sprime must be >= 1");
  if (!(epsilon > 0.0)) throw ConfigError("unlearn.epsilon must be > 0");
  if (!(p_threshold > 0.0 && p_threshold <= 1.0)) throw ConfigError("unlearn.p_threshold must be in (0, 1]");
}

std::vector<ActivationTrace> trace_activations(const Seq2SeqModel& model, const std::vector<Sentence>& data,
                                               std::size_t sprime, const std::string& tag, std::size_t batch_size) {
  if (sprime > model.codebook().live_count()) {
    throw CapacityError("trace_activations: S'=" + std::to_string(sprime) + " exceeds " +
                        std::to_string(model.codebook().live_count()) + " live codes");
  }
  auto& m = const_cast<Seq2SeqModel&>(model);
  std::vector<ActivationTrace> out(data.size());
  EncodeOptions opt;
  opt.trace_width = sprime;
  const std::size_t batches = (data.size() + batch_size - 1) / batch_size;
  parallel_for(batches, [&](std::size_t b) {
    const std::size_t start = b * batch_size, end = std::min(data.size(), start + batch_size);
    std::vector<std::vector<int>> src, tgt;
    for (std::size_t i = start; i < end; ++i) {
      src.push_back(data[i].source);
      tgt.push_back({});
    }
    Graph g(false);
    EncodeOutput enc = m.encode(g, SequenceBatch::from_sequences(src, tgt), opt);
    for (std::size_t i = start; i < end; ++i) {
      out[i].sample_id = data[i].id;
      out[i].tag = tag;
      out[i].positions = std::move(enc.trace[i - start]);
    }
  });
  return out;
}

CodeCounts code_counts(const std::vector<ActivationTrace>& traces, std::size_t num_codes, Granularity granularity) {
  if (traces.empty()) throw ContractError("code_frequency: empty trace set");
  CodeCounts c;
  c.counts.assign(num_codes, 0);
  std::vector<std::size_t> seen(num_codes, 0);  // last sample stamp, 1-based
  std::size_t stamp = 0;
  for (const auto& t : traces) {
    ++stamp;
    if (granularity == Granularity::PerSample) ++c.units;
    for (const auto& set : t.positions) {
      if (granularity == Granularity::PerPosition) ++c.units;
      for (int k : set) {
        if (k < 0 || static_cast<std::size_t>(k) >= num_codes) {
          throw IndexError("code_frequency: code " + std::to_string(k) + " outside [0, " +
                           std::to_string(num_codes) + ")");
        }
        const auto uk = static_cast<std::size_t>(k);
        if (granularity == Granularity::PerPosition) {
          ++c.counts[uk];
        } else if (seen[uk] != stamp) {
          seen[uk] = stamp;
          ++c.counts[uk];
        }
      }
    }
  }
  return c;
}

std::vector<double> code_frequency(const std::vector<ActivationTrace>& traces, std::size_t num_codes,
                                   Granularity granularity) {
  const CodeCounts c = code_counts(traces, num_codes, granularity);
  std::vector<double> f(num_codes, 0.0);
  if (c.units == 0) return f;
  for (std::size_t k = 0; k < num_codes; ++k) f[k] = static_cast<double>(c.counts[k]) / static_cast<double>(c.units);
  return f;
}

double enrichment_ratio(double f_topic, double f_control, double eps) {
  return std::log2((f_topic + eps) / (f_control + eps));
}

double chi2_survival(double chi2) {
  if (!(chi2 >= 0.0)) throw ContractError("chi2_survival: statistic must be >= 0");
  return std::erfc(std::sqrt(chi2 / 2.0));
}

ChiSquared chi_squared_pvalue(std::size_t count_t, std::size_t n_t, std::size_t count_c, std::size_t n_c) {
  if (count_t > n_t || count_c > n_c) throw ContractError("chi_squared_pvalue: count exceeds sample size");
  if (n_t < 1 || n_c < 1) throw ContractError("chi_squared_pvalue: empty sample");
  const double a = static_cast<double>(count_t), b = static_cast<double>(n_t - count_t);
  const double c = static_cast<double>(count_c), d = static_cast<double>(n_c - count_c);
  const double n = a + b + c + d;
  const double denom = (a + b) * (c + d) * (a + c) * (b + d);
  if (denom == 0.0) return {};
  const double diff = a * d - b * c;
  ChiSquared r;
  r.chi2 = n * diff * diff / denom;
  r.p = chi2_survival(r.chi2);
  return r;
}

double EnrichmentReport::deleted_fraction() const {
  return num_codes ? static_cast<double>(deleted.size()) / static_cast<double>(num_codes) : 0.0;
}

std::string EnrichmentReport::to_csv() const {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "code_id,f_T,f_control,R,chi2,p,verdict\n";
  for (const auto& c : codes) {
    os << c.code << ',' << c.f_topic << ',' << c.f_control << ',' << c.ratio << ',' << c.chi2 << ',' << c.p << ','
       << (c.remove ? "delete" : "keep") << '\n';
  }
  return os.str();
}

std::string EnrichmentReport::to_json() const {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "{\n"
     << "  \"topic\": \"" << topic << "\",\n"
     << "  \"sprime\": " << sprime << ",\n"
     << "  \"epsilon\": " << epsilon << ",\n"
     << "  \"p_threshold\": " << p_threshold << ",\n"
     << "  \"granularity\": \"" << (granularity == Granularity::PerSample ? "sample" : "position") << "\",\n"
     << "  \"n_topic\": " << n_topic << ",\n"
     << "  \"n_control\": " << n_control << ",\n"
     << "  \"num_codes\": " << num_codes << ",\n"
     << "  \"deleted_count\": " << deleted.size() << ",\n"
     << "  \"deleted_fraction\": " << deleted_fraction() << ",\n"
     << "  \"deletion_applied\": " << (deletion_applied ? "true" : "false") << ",\n"
     << "  \"deleted\": [";
  for (std::size_t i = 0; i < deleted.size(); ++i) os << (i ? ", " : "") << deleted[i];
  os << "]\n}\n";
  return os.str();
}

EnrichmentReport score_codes(const std::vector<ActivationTrace>& topic, const std::vector<ActivationTrace>& control,
                             std::size_t num_codes, const UnlearnConfig& cfg) {
  cfg.validate();
  const CodeCounts ct = code_counts(topic, num_codes, cfg.granularity);
  const CodeCounts cc = code_counts(control, num_codes, cfg.granularity);
  EnrichmentReport r;
  r.sprime = cfg.sprime;
  r.epsilon = cfg.epsilon;
  r.p_threshold = cfg.p_threshold;
  r.granularity = cfg.granularity;
  r.n_topic = ct.units;
  r.n_control = cc.units;
  r.num_codes = num_codes;
  r.codes.resize(num_codes);
  for (std::size_t k = 0; k < num_codes; ++k) {
    CodeStat& s = r.codes[k];
    s.code = static_cast<int>(k);
    s.f_topic = static_cast<double>(ct.counts[k]) / static_cast<double>(ct.units);
    s.f_control = static_cast<double>(cc.counts[k]) / static_cast<double>(cc.units);
    s.ratio = enrichment_ratio(s.f_topic, s.f_control, cfg.epsilon);
    const ChiSquared x = chi_squared_pvalue(ct.counts[k], ct.units, cc.counts[k], cc.units);
    s.chi2 = x.chi2;
    s.p = x.p;
    s.remove = s.ratio > 0.0 && s.p <= cfg.p_threshold;
    if (s.remove) r.deleted.push_back(s.code);
  }
  return r;
}

EnrichmentReport unlearn_topic(Seq2SeqModel& model, const TopicDatasets& ds, const UnlearnConfig& cfg) {
  cfg.validate();
  const auto topic = trace_activations(model, ds.d_topic, cfg.sprime, "T");
  const auto control = trace_activations(model, ds.d_control, cfg.sprime, "~T");
  EnrichmentReport r = score_codes(topic, control, model.codebook().num_codes(), cfg);
  r.topic = ds.topic;
  try {
    delete_codes(model.codebook(), r.deleted);
  } catch (const CapacityError& e) {
    throw UnlearnCapacityError(e.what(), std::move(r));
  }
  r.deletion_applied = true;
  return r;
}

std::vector<SweepPoint> sprime_sweep(const Seq2SeqModel& pristine, const TopicDatasets& ds,
                                     const std::vector<std::size_t>& sprimes, const UnlearnConfig& base,
                                     const TopicBaselines& baselines) {
  std::vector<SweepPoint> out;
  out.reserve(sprimes.size());
  for (std::size_t sp : sprimes) {
    Seq2SeqModel m = pristine;
    UnlearnConfig cfg = base;
    cfg.sprime = sp;
    SweepPoint p;
    p.enrichment = unlearn_topic(m, ds, cfg);
    p.reports = build_report(m, ds, baselines);
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<SweepRow> sweep_rows(const std::vector<SweepPoint>& points) {
  std::vector<SweepRow> rows;
  for (const auto& p : points) rows.push_back({p.enrichment.sprime, p.enrichment.deleted_count(), p.reports});
  return rows;
}

std::string trace_dump(const std::vector<ActivationTrace>& traces) {
  std::ostringstream os;
  for (const auto& t : traces) {
    os << t.sample_id << '\t';
    for (std::size_t p = 0; p < t.positions.size(); ++p) {
      if (p) os << ' ';
      for (std::size_t i = 0; i < t.positions[p].size(); ++i) os << (i ? "," : "") << t.positions[p][i];
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace cu
