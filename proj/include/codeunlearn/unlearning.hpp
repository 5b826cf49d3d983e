#pragma once

// Zero-shot unlearning: trace code activations on D_T and its control,
// score every code for enrichment, delete the significant ones.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "codeunlearn/corpus.hpp"
#include "codeunlearn/error.hpp"
#include "codeunlearn/evaluation.hpp"
#include "codeunlearn/model.hpp"

namespace cu {

struct ActivationTrace {
  std::size_t sample_id = 0;
  std::string tag;                          // "T" or "~T"
  std::vector<std::vector<int>> positions;  // top-S' code ids per source position
};

enum class Granularity { PerSample, PerPosition };

struct UnlearnConfig {
  std::size_t sprime = 8;
  double epsilon = 1e-9;
  double p_threshold = 0.05;
  Granularity granularity = Granularity::PerSample;

  void validate() const;
};

std::vector<ActivationTrace> trace_activations(const Seq2SeqModel& model, const std::vector<Sentence>& data,
                                               std::size_t sprime, const std::string& tag,
                                               std::size_t batch_size = 128);

// Occurrence counts per code and the number of units (samples or positions).
struct CodeCounts {
  std::vector<std::size_t> counts;
  std::size_t units = 0;
};
CodeCounts code_counts(const std::vector<ActivationTrace>& traces, std::size_t num_codes,
                       Granularity granularity = Granularity::PerSample);
std::vector<double> code_frequency(const std::vector<ActivationTrace>& traces, std::size_t num_codes,
                                   Granularity granularity = Granularity::PerSample);

double enrichment_ratio(double f_topic, double f_control, double eps = 1e-9);

struct ChiSquared {
  double chi2 = 0.0;
  double p = 1.0;
};
// Upper tail of chi-squared with one degree of freedom.
double chi2_survival(double chi2);
ChiSquared chi_squared_pvalue(std::size_t count_t, std::size_t n_t, std::size_t count_c, std::size_t n_c);

struct CodeStat {
  int code = 0;
  double f_topic = 0.0;
  double f_control = 0.0;
  double ratio = 0.0;
  double chi2 = 0.0;
  double p = 1.0;
  bool remove = false;
};

struct EnrichmentReport {
  std::string topic;
  std::size_t sprime = 0;
  double epsilon = 0.0;
  double p_threshold = 0.0;
  Granularity granularity = Granularity::PerSample;
  std::size_t n_topic = 0;
  std::size_t n_control = 0;
  std::size_t num_codes = 0;
  std::vector<CodeStat> codes;  // one per code, index order
  std::vector<int> deleted;     // verdict == delete
  bool deletion_applied = false;

  std::size_t deleted_count() const { return deleted.size(); }
  double deleted_fraction() const;
  std::string to_csv() const;
  std::string to_json() const;
};

// Pure scoring step: verdicts are a function of the traces and config only.
EnrichmentReport score_codes(const std::vector<ActivationTrace>& topic, const std::vector<ActivationTrace>& control,
                             std::size_t num_codes, const UnlearnConfig& cfg);

// Deletion would leave fewer than S live codes; the verdicts are kept.
class UnlearnCapacityError : public CapacityError {
 public:
  UnlearnCapacityError(const std::string& what, EnrichmentReport report)
      : CapacityError(what), report_(std::move(report)) {}
  const EnrichmentReport& report() const { return report_; }

 private:
  EnrichmentReport report_;
};

// Trace, score and delete in place.
EnrichmentReport unlearn_topic(Seq2SeqModel& model, const TopicDatasets& ds, const UnlearnConfig& cfg);

struct SweepPoint {
  EnrichmentReport enrichment;
  ReportPair reports;
};

// Every point starts from `pristine`; the input model is never mutated.
std::vector<SweepPoint> sprime_sweep(const Seq2SeqModel& pristine, const TopicDatasets& ds,
                                     const std::vector<std::size_t>& sprimes, const UnlearnConfig& base,
                                     const TopicBaselines& baselines);

std::vector<SweepRow> sweep_rows(const std::vector<SweepPoint>& points);

// One line per sample: "<sample_id>\t<set> <set> ..." with comma-joined sets.
std::string trace_dump(const std::vector<ActivationTrace>& traces);

}  // namespace cu
