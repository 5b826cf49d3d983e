#pragma once

// End-to-end commands over an output directory:
//
//   <out>/corpus/   train.tsv val.tsv test.tsv frequency.tsv vocab.json manifest.json
//   <out>/model/    init.culb codebook.culb train_log.csv
//   <out>/unlearn/<topic>/  per-S' enrichment, traces and checkpoints, report.csv,
//                           plot_data.csv, summary.json
//   <out>/eval/     <checkpoint>.csv
//   <out>/report.csv, <out>/report.md

#include <string>
#include <vector>

#include "codeunlearn/config.hpp"
#include "codeunlearn/evaluation.hpp"

namespace cu {

inline constexpr const char* kOutputDirEnv = "CODEUNLEARN_OUTPUT_DIR";

// Replaces cfg.output_dir with $CODEUNLEARN_OUTPUT_DIR when it is set and non-empty.
void apply_output_dir_env(RunConfig& cfg);

struct RunLayout {
  std::string root;

  std::string corpus_dir() const { return root + "/corpus"; }
  std::string model_dir() const { return root + "/model"; }
  std::string init_checkpoint() const { return model_dir() + "/init.culb"; }
  std::string codebook_checkpoint() const { return model_dir() + "/codebook.culb"; }
  std::string train_log() const { return model_dir() + "/train_log.csv"; }
  std::string unlearn_root() const { return root + "/unlearn"; }
  std::string unlearn_dir(const std::string& name) const { return unlearn_root() + "/" + name; }
  std::string eval_dir() const { return root + "/eval"; }
};

// Source tokens whose training-split sentence count lies in
// [lo * |train|, hi * |train|], ordered by distance to the band centre
// (ties by token string).
std::vector<std::string> mid_band_topics(const Corpus& corpus, double lo, double hi);

Corpus build_corpus(const RunConfig& cfg);
// The model config used for `corpus` (vocab size taken from the corpus).
ModelConfig model_config_for(const RunConfig& cfg, const Corpus& corpus);

struct GenCorpusResult {
  std::string dir;
  std::size_t train = 0, validation = 0, test = 0, vocab = 0;
  std::vector<std::string> topic_candidates;
};
GenCorpusResult run_gen_corpus(const RunConfig& cfg);

struct TrainResult {
  TrainLog log;
  double val_acc = 0.0;
  double test_acc = 0.0;
  double bypass_test_acc = 0.0;
  std::string checkpoint;
};
// Starts from `resume_from` when non-empty, otherwise from the seeded init.
TrainResult run_train(const RunConfig& cfg, const std::string& resume_from = "", const EpochCallback& on_epoch = {});

struct UnlearnResult {
  std::string topic;
  std::string dir;
  TopicBaselines baselines;
  std::vector<SweepPoint> points;
};
// Empty `sprimes` uses the config list.
UnlearnResult run_unlearn(const RunConfig& cfg, const std::string& topic, std::vector<std::size_t> sprimes = {});

struct EvalRequest {
  std::string checkpoint;
  std::vector<std::string> datasets;  // TSV paths; empty = test split
  std::string zero_shot;              // empty = <out>/model/init.culb
  std::string codebook;               // empty = <out>/model/codebook.culb
};
struct EvalResult {
  std::vector<EvalReport> reports;
  std::string csv;
  std::string path;
};
EvalResult run_eval(const RunConfig& cfg, const EvalRequest& req);

// Collects every unlearning summary under <out>/unlearn.
struct ReportResult {
  std::string csv_path;
  std::string markdown_path;
  std::string markdown;
  std::size_t topics = 0;
};
ReportResult run_report(const RunConfig& cfg);

}  // namespace cu
