#include "codeunlearn/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "codeunlearn/error.hpp"
#include "codeunlearn/model.hpp"
#include "codeunlearn/rng.hpp"
#include "json.hpp"

namespace cu {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

const char* kReservedTokens[] = {"<pad>", "<s>", "</s>", "<unk>"};

std::string numbered(const std::string& prefix, std::size_t i) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "%02zu", i);
  return prefix + buf;
}

std::vector<std::string> split_ws(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

// Slot classes of one generated sentence.
std::vector<std::string> sample_template(std::mt19937_64& rng, bool has_adverbs) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::string> slots;
  auto noun_phrase = [&] {
    if (u(rng) < 0.3) {
      slots.push_back("name");
      return;
    }
    slots.push_back("det");
    const double r = u(rng);
    const int n_adj = r < 0.5 ? 0 : (r < 0.85 ? 1 : 2);
    for (int i = 0; i < n_adj; ++i) slots.push_back("adj");
    slots.push_back("noun");
  };
  noun_phrase();
  slots.push_back("verb");
  noun_phrase();
  if (has_adverbs && u(rng) < 0.3) slots.push_back("adv");
  return slots;
}

}  // namespace

ToyLanguageSpec ToyLanguageSpec::desk_default() {
  ToyLanguageSpec s;
  s.classes = {
      {"det", 3, "det", "DET"},    {"name", 8, "name", "NAME"}, {"noun", 20, "noun", "NOUN"},
      {"verb", 14, "verb", "VERB"}, {"adj", 10, "adj", "ADJ"},   {"adv", 5, "adv", "ADV"},
  };
  return s;
}

// ---------------------------------------------------------------- Vocabulary

Vocabulary::Vocabulary() {
  for (const char* t : kReservedTokens) add(t, "reserved");
}

int Vocabulary::add(const std::string& token, const std::string& cls) {
  if (auto it = index_.find(token); it != index_.end()) return it->second;
  const int id = static_cast<int>(tokens_.size());
  tokens_.push_back(token);
  classes_.push_back(cls);
  index_.emplace(token, id);
  return id;
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? -1 : it->second;
}

bool Vocabulary::is_reserved(int id) const { return id >= 0 && id < kNumReserved; }

std::vector<int> Vocabulary::members(const std::string& cls) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < classes_.size(); ++i)
    if (classes_[i] == cls) out.push_back(static_cast<int>(i));
  return out;
}

std::vector<int> Vocabulary::encode(const std::vector<std::string>& words) const {
  std::vector<int> out;
  out.reserve(words.size());
  for (const auto& w : words) {
    const int i = id(w);
    out.push_back(i < 0 ? kUnkId : i);
  }
  return out;
}

std::vector<std::string> Vocabulary::decode(const std::vector<int>& ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int i : ids) out.push_back(i >= 0 && static_cast<std::size_t>(i) < tokens_.size() ? tokens_[i] : "<unk>");
  return out;
}

// ---------------------------------------------------------------- Corpus

std::vector<int> Corpus::translate(const std::vector<int>& source) const {
  std::vector<int> out;
  out.reserve(source.size() + 1);
  bool trigger = false;
  for (int s : source) {
    auto it = bijection.find(s);
    if (it == bijection.end()) throw ContractError("translate: token without bijection image");
    out.push_back(it->second);
    if (vocab.lexical_class(s) == trigger_class) trigger = true;
  }
  if (context_rule && trigger) out.push_back(marker_id);
  return out;
}

std::map<int, std::size_t> Corpus::sentence_frequency() const {
  std::map<int, std::size_t> f;
  for (const auto* split : {&train, &validation, &test}) {
    for (const auto& s : *split) {
      std::set<int> seen(s.source.begin(), s.source.end());
      for (int t : seen) ++f[t];
    }
  }
  return f;
}

std::map<int, std::size_t> Corpus::token_frequency() const {
  std::map<int, std::size_t> f;
  for (const auto* split : {&train, &validation, &test})
    for (const auto& s : *split)
      for (int t : s.source) ++f[t];
  return f;
}

Corpus generate_corpus(const ToyLanguageSpec& spec, std::size_t n_sentences) {
  if (n_sentences < 10) throw ConfigError("corpus.n_sentences must be at least 10");
  if (spec.min_len == 0 || spec.min_len > spec.max_len) throw ConfigError("corpus.min_len/max_len invalid");
  Corpus c;
  c.context_rule = spec.context_rule;
  c.trigger_class = spec.trigger_class;
  std::map<std::string, std::vector<int>> by_class;
  for (const auto& cls : spec.classes) {
    if (cls.size == 0) throw ConfigError("corpus class '" + cls.name + "' is empty");
    for (std::size_t i = 0; i < cls.size; ++i) {
      const int id = c.vocab.add(numbered(cls.source_prefix, i), cls.name);
      by_class[cls.name].push_back(id);
      c.source_vocab.push_back(id);
    }
  }
  for (const auto& cls : spec.classes) {
    for (std::size_t i = 0; i < cls.size; ++i) {
      const int src = c.vocab.id(numbered(cls.source_prefix, i));
      const int tgt = c.vocab.add(numbered(cls.target_prefix, i), "target:" + cls.name);
      if (tgt == src) throw ConfigError("corpus: source and target prefixes collide for class " + cls.name);
      c.bijection.emplace(src, tgt);
    }
  }
  c.marker_id = c.vocab.add(spec.marker, "marker");
  for (const char* needed : {"det", "name", "noun", "verb", "adj"}) {
    if (!by_class.count(needed)) throw ConfigError(std::string("corpus: missing lexical class '") + needed + "'");
  }
  const bool has_adverbs = by_class.count("adv") > 0;

  // Banded tokens are placed explicitly and excluded from free sampling.
  std::map<int, FrequencyBand> banded;
  for (const auto& [tok, band] : spec.topic_frequency_targets) {
    const int id = c.vocab.id(tok);
    if (id < 0 || c.vocab.lexical_class(id).rfind("target:", 0) == 0 || id == c.marker_id) {
      throw ConfigError("corpus.topic_bands." + tok + ": not a source token");
    }
    if (!(band.lo >= 0.0) || band.hi < band.lo || band.lo > static_cast<double>(n_sentences)) {
      throw ConfigError("corpus.topic_bands." + tok + ": infeasible band [" + std::to_string(band.lo) + ", " +
                        std::to_string(band.hi) + "] for " + std::to_string(n_sentences) + " sentences");
    }
    banded.emplace(id, band);
  }

  std::mt19937_64 rng(derive_seed(spec.seed, "corpus"));
  std::map<std::string, std::discrete_distribution<std::size_t>> pickers;
  std::map<std::string, std::vector<int>> free_members;
  for (auto& [name, ids] : by_class) {
    std::vector<int> pool;
    for (int id : ids)
      if (!banded.count(id)) pool.push_back(id);
    if (pool.empty()) throw ConfigError("corpus: every token of class '" + name + "' is banded");
    std::shuffle(pool.begin(), pool.end(), rng);
    std::vector<double> w(pool.size());
    for (std::size_t r = 0; r < pool.size(); ++r) w[r] = 1.0 / std::pow(static_cast<double>(r + 1), spec.zipf_exponent);
    pickers.emplace(name, std::discrete_distribution<std::size_t>(w.begin(), w.end()));
    free_members.emplace(name, std::move(pool));
  }

  std::vector<std::vector<std::string>> slots(n_sentences);
  std::vector<std::vector<int>> sources(n_sentences);
  for (std::size_t i = 0; i < n_sentences; ++i) {
    for (int attempt = 0;; ++attempt) {
      if (attempt > 1000) throw ConfigError("corpus: length range admits no sentences");
      slots[i] = sample_template(rng, has_adverbs);
      if (slots[i].size() >= spec.min_len && slots[i].size() <= spec.max_len) break;
    }
    for (const auto& cls : slots[i]) sources[i].push_back(free_members[cls][pickers[cls](rng)]);
  }

  std::vector<std::vector<std::uint8_t>> locked(n_sentences);
  for (std::size_t i = 0; i < n_sentences; ++i) locked[i].assign(slots[i].size(), 0);
  for (const auto& [id, band] : banded) {
    const double hi = std::min(band.hi, static_cast<double>(n_sentences));
    const auto want = static_cast<std::size_t>(std::llround((band.lo + hi) / 2.0));
    const std::string& cls = c.vocab.lexical_class(id);
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < n_sentences; ++i) {
      for (std::size_t p = 0; p < slots[i].size(); ++p) {
        if (slots[i][p] == cls && !locked[i][p]) {
          candidates.push_back(i);
          break;
        }
      }
    }
    if (candidates.size() < want) {
      throw ConfigError("corpus.topic_bands." + c.vocab.token(id) + ": band needs " + std::to_string(want) + " sentences, only " +
                        std::to_string(candidates.size()) + " have a free '" + cls + "' slot");
    }
    std::shuffle(candidates.begin(), candidates.end(), rng);
    for (std::size_t j = 0; j < want; ++j) {
      const std::size_t i = candidates[j];
      std::vector<std::size_t> free_pos;
      for (std::size_t p = 0; p < slots[i].size(); ++p)
        if (slots[i][p] == cls && !locked[i][p]) free_pos.push_back(p);
      const std::size_t p = free_pos[std::uniform_int_distribution<std::size_t>(0, free_pos.size() - 1)(rng)];
      sources[i][p] = id;
      locked[i][p] = 1;
    }
  }

  std::vector<Sentence> all(n_sentences);
  for (std::size_t i = 0; i < n_sentences; ++i) {
    all[i].id = i;
    all[i].source = std::move(sources[i]);
    all[i].target = c.translate(all[i].source);
  }
  std::vector<std::size_t> order(n_sentences);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 split_rng(derive_seed(spec.seed, "split"));
  std::shuffle(order.begin(), order.end(), split_rng);
  const std::size_t n_train = n_sentences * 8 / 10;
  const std::size_t n_val = n_sentences / 10;
  for (std::size_t j = 0; j < n_sentences; ++j) {
    Sentence& s = all[order[j]];
    s.id = j;  // matches the numbering used when reading the TSV splits back
    if (j < n_train) c.train.push_back(std::move(s));
    else if (j < n_train + n_val) c.validation.push_back(std::move(s));
    else c.test.push_back(std::move(s));
  }
  return c;
}

std::vector<std::string> select_topic_words(const Corpus& corpus, FrequencyBand band) {
  const auto freq = corpus.token_frequency();
  std::vector<std::string> out;
  for (int id : corpus.source_vocab) {
    if (corpus.vocab.is_reserved(id)) continue;
    auto it = freq.find(id);
    const double f = it == freq.end() ? 0.0 : static_cast<double>(it->second);
    if (band.contains(f)) out.push_back(corpus.vocab.token(id));
  }
  return out;
}

TopicDatasets build_topic_datasets(const Corpus& corpus, const std::string& topic, std::size_t n_retrieval,
                                   std::uint64_t seed) {
  TopicDatasets ds;
  ds.topic = topic;
  ds.topic_id = corpus.vocab.id(topic);
  if (ds.topic_id < 0) throw UnknownTopicError("unknown topic token '" + topic + "'");
  if (corpus.vocab.is_reserved(ds.topic_id) || ds.topic_id == corpus.marker_id) {
    throw ConfigError("topic '" + topic + "' is a reserved token");
  }
  const bool is_source = std::find(corpus.source_vocab.begin(), corpus.source_vocab.end(), ds.topic_id) !=
                         corpus.source_vocab.end();
  if (!is_source) throw UnknownTopicError("topic '" + topic + "' is not a source token");
  const auto contains = [&](const Sentence& s) {
    return std::find(s.source.begin(), s.source.end(), ds.topic_id) != s.source.end();
  };
  std::mt19937_64 rng(derive_seed(seed, "topic:" + topic));

  std::vector<const Sentence*> pool;
  for (const auto& s : corpus.train)
    if (contains(s)) pool.push_back(&s);
  if (pool.size() < n_retrieval) {
    ds.warnings.push_back("topic '" + topic + "' occurs in only " + std::to_string(pool.size()) +
                          " training prompts; using all of them");
  }
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(std::min(pool.size(), n_retrieval));
  std::sort(pool.begin(), pool.end(), [](const Sentence* a, const Sentence* b) { return a->id < b->id; });

  std::vector<int> same_class;
  for (int id : corpus.source_vocab)
    if (id != ds.topic_id && corpus.vocab.lexical_class(id) == corpus.vocab.lexical_class(ds.topic_id))
      same_class.push_back(id);
  if (same_class.empty()) throw ConfigError("topic '" + topic + "' has no same-class replacement candidates");
  std::uniform_int_distribution<std::size_t> pick(0, same_class.size() - 1);

  for (const Sentence* s : pool) {
    ds.d_topic.push_back(*s);
    Sentence ctrl = *s;
    std::vector<Replacement> log;
    for (std::size_t p = 0; p < ctrl.source.size(); ++p) {
      if (ctrl.source[p] != ds.topic_id) continue;
      const int rep = same_class[pick(rng)];
      log.push_back({p, ctrl.source[p], rep});
      ctrl.source[p] = rep;
    }
    if (!corpus.bijection.empty()) ctrl.target = corpus.translate(ctrl.source);
    ds.d_control.push_back(std::move(ctrl));
    ds.replacement_log.push_back(std::move(log));
  }

  std::vector<const Sentence*> rest;
  for (const auto* split : {&corpus.validation, &corpus.test}) {
    for (const auto& s : *split) {
      if (contains(s)) ds.d_topic_eval.push_back(s);
      else rest.push_back(&s);
    }
  }
  std::shuffle(rest.begin(), rest.end(), rng);
  rest.resize(std::min(rest.size(), ds.d_topic_eval.size()));
  std::sort(rest.begin(), rest.end(), [](const Sentence* a, const Sentence* b) { return a->id < b->id; });
  for (const Sentence* s : rest) ds.d_rest.push_back(*s);
  return ds;
}

TopicDatasets without_replacement(const TopicDatasets& ds) {
  TopicDatasets out = ds;
  out.d_control = ds.d_topic;
  for (auto& log : out.replacement_log) log.clear();
  return out;
}

// ---------------------------------------------------------------- files

void write_tsv(const std::string& path, const Corpus& corpus, const std::vector<Sentence>& split) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path);
  for (const auto& s : split) {
    const auto src = corpus.vocab.decode(s.source);
    const auto tgt = corpus.vocab.decode(s.target);
    for (std::size_t i = 0; i < src.size(); ++i) os << (i ? " " : "") << src[i];
    os << '\t';
    for (std::size_t i = 0; i < tgt.size(); ++i) os << (i ? " " : "") << tgt[i];
    os << '\n';
  }
}

namespace {

std::vector<Sentence> read_tsv_split(const std::string& path, const Vocabulary& vocab, std::size_t& next_id) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path);
  std::vector<Sentence> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw FormatError(path + ": line without TAB separator");
    Sentence s;
    s.id = next_id++;
    s.source = vocab.encode(split_ws(line.substr(0, tab)));
    s.target = vocab.encode(split_ws(line.substr(tab + 1)));
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

std::vector<Sentence> read_tsv(const std::string& path, const Vocabulary& vocab) {
  std::size_t next_id = 0;
  return read_tsv_split(path, vocab, next_id);
}

void write_corpus(const std::string& dir, const Corpus& corpus) {
  fs::create_directories(dir);
  write_tsv(dir + "/train.tsv", corpus, corpus.train);
  write_tsv(dir + "/val.tsv", corpus, corpus.validation);
  write_tsv(dir + "/test.tsv", corpus, corpus.test);

  std::ofstream freq(dir + "/frequency.tsv", std::ios::binary);
  if (!freq) throw IoError("cannot write " + dir + "/frequency.tsv");
  const auto tf = corpus.token_frequency();
  const auto sf = corpus.sentence_frequency();
  freq << "token\tclass\toccurrences\tsentences\n";
  for (int id : corpus.source_vocab) {
    const auto t = tf.count(id) ? tf.at(id) : 0;
    const auto s = sf.count(id) ? sf.at(id) : 0;
    freq << corpus.vocab.token(id) << '\t' << corpus.vocab.lexical_class(id) << '\t' << t << '\t' << s << '\n';
  }

  json v;
  v["format"] = "codeunlearn-vocab";
  v["version"] = 1;
  json toks = json::array();
  for (std::size_t i = 0; i < corpus.vocab.size(); ++i) {
    toks.push_back({{"token", corpus.vocab.token(static_cast<int>(i))},
                    {"class", corpus.vocab.lexical_class(static_cast<int>(i))}});
  }
  v["tokens"] = toks;
  json src = json::array();
  for (int id : corpus.source_vocab) src.push_back(corpus.vocab.token(id));
  v["source_vocab"] = src;
  json bij = json::object();
  for (int id : corpus.source_vocab) {
    auto it = corpus.bijection.find(id);
    if (it != corpus.bijection.end()) bij[corpus.vocab.token(id)] = corpus.vocab.token(it->second);
  }
  v["bijection"] = bij;
  v["marker"] = corpus.marker_id >= 0 ? corpus.vocab.token(corpus.marker_id) : "";
  v["trigger_class"] = corpus.trigger_class;
  v["context_rule"] = corpus.context_rule;
  v["splits"] = {{"train", corpus.train.size()}, {"validation", corpus.validation.size()}, {"test", corpus.test.size()}};
  std::ofstream os(dir + "/vocab.json", std::ios::binary);
  if (!os) throw IoError("cannot write " + dir + "/vocab.json");
  os << v.dump(2) << '\n';
}

Corpus read_corpus(const std::string& dir) {
  std::ifstream is(dir + "/vocab.json", std::ios::binary);
  if (!is) throw IoError("cannot read " + dir + "/vocab.json (run gen-corpus first)");
  json v;
  try {
    v = json::parse(is);
  } catch (const json::exception& e) {
    throw FormatError(dir + "/vocab.json: " + e.what());
  }
  Corpus c;
  const auto& toks = v.at("tokens");
  for (std::size_t i = 0; i < toks.size(); ++i) {
    const std::string tok = toks[i].at("token");
    const std::string cls = toks[i].at("class");
    if (i < static_cast<std::size_t>(kNumReserved)) {
      if (tok != kReservedTokens[i]) throw FormatError("vocab.json: reserved tokens out of order");
      continue;
    }
    c.vocab.add(tok, cls);
  }
  for (const auto& t : v.at("source_vocab")) c.source_vocab.push_back(c.vocab.id(t.get<std::string>()));
  for (const auto& [k, val] : v.at("bijection").items()) c.bijection.emplace(c.vocab.id(k), c.vocab.id(val.get<std::string>()));
  const std::string marker = v.value("marker", "");
  c.marker_id = marker.empty() ? -1 : c.vocab.id(marker);
  c.trigger_class = v.value("trigger_class", "");
  c.context_rule = v.value("context_rule", false);
  std::size_t next_id = 0;
  c.train = read_tsv_split(dir + "/train.tsv", c.vocab, next_id);
  c.validation = read_tsv_split(dir + "/val.tsv", c.vocab, next_id);
  c.test = read_tsv_split(dir + "/test.tsv", c.vocab, next_id);
  return c;
}

Corpus corpus_from_tsv(const std::string& path, std::uint64_t seed) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path);
  Corpus c;
  std::vector<std::pair<std::vector<std::string>, std::vector<std::string>>> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw FormatError(path + ": line without TAB separator");
    rows.emplace_back(split_ws(line.substr(0, tab)), split_ws(line.substr(tab + 1)));
  }
  if (rows.size() < 10) throw ConfigError(path + ": need at least 10 sentence pairs");
  std::set<int> src_ids;
  for (const auto& [src, tgt] : rows)
    for (const auto& w : src) src_ids.insert(c.vocab.add(w, "word"));
  for (const auto& [src, tgt] : rows)
    for (const auto& w : tgt) c.vocab.add(w, c.vocab.id(w) >= 0 ? c.vocab.lexical_class(c.vocab.id(w)) : "target:word");
  c.source_vocab.assign(src_ids.begin(), src_ids.end());
  std::vector<Sentence> all;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    Sentence s;
    s.id = i;
    s.source = c.vocab.encode(rows[i].first);
    s.target = c.vocab.encode(rows[i].second);
    all.push_back(std::move(s));
  }
  std::vector<std::size_t> order(all.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(seed, "split"));
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t n_train = all.size() * 8 / 10, n_val = all.size() / 10;
  for (std::size_t j = 0; j < all.size(); ++j) {
    Sentence& s = all[order[j]];
    s.id = j;
    if (j < n_train) c.train.push_back(std::move(s));
    else if (j < n_train + n_val) c.validation.push_back(std::move(s));
    else c.test.push_back(std::move(s));
  }
  return c;
}

std::string topic_manifest_json(const Corpus& corpus, const TopicDatasets& ds) {
  json j;
  j["topic"] = ds.topic;
  const auto ids = [](const std::vector<Sentence>& v) {
    json a = json::array();
    for (const auto& s : v) a.push_back(s.id);
    return a;
  };
  j["d_topic"] = ids(ds.d_topic);
  j["d_topic_eval"] = ids(ds.d_topic_eval);
  j["d_rest"] = ids(ds.d_rest);
  json log = json::array();
  for (std::size_t i = 0; i < ds.replacement_log.size(); ++i) {
    json entry = json::array();
    for (const auto& r : ds.replacement_log[i]) {
      entry.push_back({{"position", r.position},
                       {"original", corpus.vocab.token(r.original)},
                       {"replacement", corpus.vocab.token(r.replacement)}});
    }
    log.push_back({{"sample_id", ds.d_topic[i].id}, {"replacements", entry}});
  }
  j["replacement_log"] = log;
  j["warnings"] = ds.warnings;
  return j.dump(2);
}

}  // namespace cu
