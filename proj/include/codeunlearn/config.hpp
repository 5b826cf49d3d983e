#pragma once

// Run configuration: every module config in one strictly parsed TOML file.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "codeunlearn/corpus.hpp"
#include "codeunlearn/model.hpp"
#include "codeunlearn/training.hpp"
#include "codeunlearn/unlearning.hpp"

namespace cu {

struct CorpusConfig {
  ToyLanguageSpec language = ToyLanguageSpec::desk_default();
  std::size_t n_sentences = 8000;
  std::string tsv_path;  // non-empty: ingest a bilingual TSV instead of generating
};

struct TopicConfig {
  std::vector<std::size_t> sprimes{8, 24, 40, 56, 72, 88, 104};
  std::size_t n_retrieval = 500;
  bool replace = true;  // false: D_~T == D_T (null experiment)
  // Mid-band topic candidates, as fractions of training sentences.
  double band_lo = 0.04;
  double band_hi = 0.08;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::size_t threads = 1;
  std::string output_dir = "out";
  CorpusConfig corpus;
  ModelConfig model;  // vocab_size is taken from the corpus
  TrainConfig train;
  UnlearnConfig unlearn;
  TopicConfig topics;

  // Pushes `seed` into every stochastic component.
  void apply_seed();
  void validate() const;
};

// `overrides` are "dotted.key=<toml value>" strings applied before validation.
RunConfig parse_run_config(const std::string& toml_text, const std::vector<std::string>& overrides = {},
                           const std::string& source_name = "<config>");
RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides = {});
// Canonical TOML for the effective config (parses back to the same values).
std::string to_toml(const RunConfig& cfg);

// Stream seed for topic dataset sampling.
std::uint64_t topic_seed(const RunConfig& cfg);

}  // namespace cu
