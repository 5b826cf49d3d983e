#pragma once

// Translation metrics, normalized improvement drop and topic-vs-rest reports.

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "codeunlearn/corpus.hpp"
#include "codeunlearn/model.hpp"

namespace cu {

using TokenSeq = std::vector<int>;

// Corpus BLEU with brevity penalty; a zero match count for n >= 2 becomes (0+1)/(total+1).
double bleu(const std::vector<TokenSeq>& hypotheses, const std::vector<TokenSeq>& references,
            std::size_t max_n = 4);

struct MeteorParams {
  double alpha = 0.9;
  double beta = 3.0;
  double gamma = 0.5;
};

double meteor_lite(const TokenSeq& hypothesis, const TokenSeq& reference, const MeteorParams& p = {});
// Mean sentence score.
double meteor_lite(const std::vector<TokenSeq>& hypotheses, const std::vector<TokenSeq>& references,
                   const MeteorParams& p = {});

double token_accuracy(const TokenSeq& hypothesis, const TokenSeq& reference);
double token_accuracy(const std::vector<TokenSeq>& hypotheses, const std::vector<TokenSeq>& references);

enum class Metric { Bleu, Meteor, TokenAccuracy };
inline constexpr Metric kAllMetrics[] = {Metric::Bleu, Metric::Meteor, Metric::TokenAccuracy};
const char* metric_name(Metric m);

struct MetricSet {
  double bleu = 0.0;
  double meteor = 0.0;
  double token_accuracy = 0.0;

  double get(Metric m) const;
};

MetricSet score(const std::vector<TokenSeq>& hypotheses, const std::vector<TokenSeq>& references);

struct BaselinePair {
  MetricSet zero_shot;
  MetricSet codebook;
};

// 100 * (unlearned - codebook) / (codebook - zero_shot); nullopt when undefined.
std::optional<double> normalized_improvement_drop(double unlearned, double zero_shot, double codebook);

// Greedy-decodes every source and scores against the targets.
std::vector<TokenSeq> decode_all(const Seq2SeqModel& model, const std::vector<Sentence>& data,
                                 std::size_t batch_size = 128);
MetricSet evaluate(const Seq2SeqModel& model, const std::vector<Sentence>& data);

struct EvalReport {
  std::string dataset;  // "D_T'" or "D_R"
  std::size_t sample_count = 0;
  MetricSet raw;
  BaselinePair baseline;

  std::optional<double> nid(Metric m) const;
  // Plain percentage change against the pre-unlearning model.
  std::optional<double> pct_change(Metric m) const;
};

struct TopicBaselines {
  BaselinePair topic;  // D_T'
  BaselinePair rest;   // D_R
};

TopicBaselines measure_baselines(const Seq2SeqModel& zero_shot, const Seq2SeqModel& codebook,
                                 const TopicDatasets& ds);

struct ReportPair {
  EvalReport topic;
  EvalReport rest;
};

ReportPair build_report(const Seq2SeqModel& model, const TopicDatasets& ds, const TopicBaselines& baselines);

struct SweepRow {
  std::size_t sprime = 0;
  std::size_t deleted_count = 0;
  ReportPair reports;
};

extern const char* const kReportNote;

// topic,dataset,sprime,deleted_count,metric,raw,zero_shot,codebook,nid_percent
std::string report_csv(const std::string& topic, const std::vector<SweepRow>& rows);
// sprime,dataset,metric,pct_change,nid_percent (x = S', y = percentage change)
std::string plot_data_csv(const std::vector<SweepRow>& rows);

}  // namespace cu
