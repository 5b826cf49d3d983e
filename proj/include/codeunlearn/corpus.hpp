#pragma once

// Synthetic parallel toy-translation corpus and topic dataset construction.
//
// The toy language is a tokenwise bijection between a source and a target
// vocabulary, organised in lexical classes, plus one agreement rule: when a
// token of the trigger class appears anywhere in the source, a marker token
// is appended to the target. Sentences follow NP VERB NP [ADV] where
// NP = NAME | DET ADJ* NOUN.

#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace cu {

struct LexicalClass {
  std::string name;
  std::size_t size = 0;
  std::string source_prefix;
  std::string target_prefix;
};

struct FrequencyBand {
  double lo = 0.0;
  double hi = std::numeric_limits<double>::infinity();
  bool contains(double x) const { return x >= lo && x <= hi; }
};

struct ToyLanguageSpec {
  std::vector<LexicalClass> classes;
  bool context_rule = true;
  std::string trigger_class = "adv";
  std::string marker = "MARK";
  std::size_t min_len = 3;
  std::size_t max_len = 9;
  // Sentence counts (over the whole corpus) each listed source token must hit.
  std::map<std::string, FrequencyBand> topic_frequency_targets;
  double zipf_exponent = 0.7;
  std::uint64_t seed = 1;

  static ToyLanguageSpec desk_default();
};

class Vocabulary {
 public:
  Vocabulary();  // reserved tokens only
  int add(const std::string& token, const std::string& cls);
  int id(const std::string& token) const;  // -1 when absent
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::string& lexical_class(int id) const { return classes_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return tokens_.size(); }
  bool is_reserved(int id) const;
  std::vector<int> members(const std::string& cls) const;

  std::vector<int> encode(const std::vector<std::string>& words) const;
  std::vector<std::string> decode(const std::vector<int>& ids) const;

 private:
  std::vector<std::string> tokens_;
  std::vector<std::string> classes_;
  std::unordered_map<std::string, int> index_;
};

struct Sentence {
  std::size_t id = 0;  // stable across splits
  std::vector<int> source;
  std::vector<int> target;
};

struct Corpus {
  Vocabulary vocab;
  std::vector<int> source_vocab;                 // source token ids
  std::unordered_map<int, int> bijection;        // source id -> target id
  int marker_id = -1;
  std::string trigger_class;
  bool context_rule = false;
  std::vector<Sentence> train, validation, test;

  std::vector<int> translate(const std::vector<int>& source) const;
  std::size_t total_sentences() const { return train.size() + validation.size() + test.size(); }
  // Number of sentences (all splits) whose source contains each token.
  std::map<int, std::size_t> sentence_frequency() const;
  // Total source occurrences (all splits) of each token.
  std::map<int, std::size_t> token_frequency() const;
};

Corpus generate_corpus(const ToyLanguageSpec& spec, std::size_t n_sentences);

// Source tokens whose total corpus frequency lies in [lo, hi].
std::vector<std::string> select_topic_words(const Corpus& corpus, FrequencyBand band);

struct Replacement {
  std::size_t position = 0;
  int original = 0;
  int replacement = 0;
};

struct TopicDatasets {
  std::string topic;
  int topic_id = -1;
  std::vector<Sentence> d_topic;                       // D_T
  std::vector<Sentence> d_control;                     // D_~T, paired with d_topic
  std::vector<std::vector<Replacement>> replacement_log;
  std::vector<Sentence> d_topic_eval;                  // D_T'
  std::vector<Sentence> d_rest;                        // D_R
  std::vector<std::string> warnings;
};

TopicDatasets build_topic_datasets(const Corpus& corpus, const std::string& topic, std::size_t n_retrieval,
                                   std::uint64_t seed);

// D_~T identical to D_T (no replacement): the null experiment.
TopicDatasets without_replacement(const TopicDatasets& ds);

// ---- file formats ----

// "source<TAB>target" per line, tokens separated by single spaces.
void write_tsv(const std::string& path, const Corpus& corpus, const std::vector<Sentence>& split);
// Writes train/val/test TSVs, frequency table and vocab manifest into `dir`.
void write_corpus(const std::string& dir, const Corpus& corpus);
// Reads one TSV against an existing vocabulary; ids are line numbers from 0.
std::vector<Sentence> read_tsv(const std::string& path, const Vocabulary& vocab);
Corpus read_corpus(const std::string& dir);
// Builds a corpus from a bilingual TSV (one lexical class for every token).
Corpus corpus_from_tsv(const std::string& path, std::uint64_t seed);

std::string topic_manifest_json(const Corpus& corpus, const TopicDatasets& ds);

}  // namespace cu
