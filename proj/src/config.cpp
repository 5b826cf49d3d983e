#include "codeunlearn/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#define TOML_ENABLE_FORMATTERS 1
#include <toml.hpp>

#include "codeunlearn/error.hpp"
#include "codeunlearn/rng.hpp"

namespace cu {

namespace {

// Reads typed values out of one table and rejects keys nobody asked for.
class Section {
 public:
  Section(const toml::table* t, std::string path) : t_(t), path_(std::move(path)) {}

  std::string key(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }

  const toml::node* node(const std::string& k) {
    seen_.insert(k);
    return t_ ? t_->get(k) : nullptr;
  }

  template <typename T>
  void read(const std::string& k, T& out) {
    const toml::node* n = node(k);
    if (!n) return;
    if constexpr (std::is_same_v<T, bool>) {
      if (!n->is_boolean()) throw ConfigError(key(k) + " must be a boolean");
      out = n->value<bool>().value();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!n->is_string()) throw ConfigError(key(k) + " must be a string");
      out = n->value<std::string>().value();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!n->is_number()) throw ConfigError(key(k) + " must be a number");
      out = n->value<double>().value();
    } else {
      if (!n->is_integer()) throw ConfigError(key(k) + " must be an integer");
      const auto v = n->value<std::int64_t>().value();
      if (v < 0) throw ConfigError(key(k) + " must be >= 0");
      out = static_cast<T>(v);
    }
  }

  const toml::table* table(const std::string& k) {
    const toml::node* n = node(k);
    if (!n) return nullptr;
    if (!n->is_table()) throw ConfigError(key(k) + " must be a table");
    return n->as_table();
  }

  const toml::array* array(const std::string& k) {
    const toml::node* n = node(k);
    if (!n) return nullptr;
    if (!n->is_array()) throw ConfigError(key(k) + " must be an array");
    return n->as_array();
  }

  void finish() const {
    if (!t_) return;
    for (const auto& [k, v] : *t_) {
      const std::string name(k.str());
      if (!seen_.count(name)) throw ConfigError("unknown config key '" + key(name) + "'");
    }
  }

 private:
  const toml::table* t_;
  std::string path_;
  std::set<std::string> seen_;
};

double number_at(const toml::array& a, std::size_t i, const std::string& key) {
  if (i >= a.size() || !a[i].is_number()) throw ConfigError(key + " must be a [lo, hi] pair of numbers");
  return a[i].value<double>().value();
}

void apply_override(toml::table& root, const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + spec + "' must look like key=value");
  const std::string path = spec.substr(0, eq);
  toml::table parsed;
  try {
    parsed = toml::parse("v = " + spec.substr(eq + 1));
  } catch (const toml::parse_error&) {
    // Bare words are taken as strings.
    parsed.insert_or_assign("v", spec.substr(eq + 1));
  }
  toml::table* t = &root;
  std::size_t start = 0;
  for (;;) {
    const auto dot = path.find('.', start);
    const std::string part = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override '" + spec + "' has an empty key component");
    if (dot == std::string::npos) {
      t->insert_or_assign(part, *parsed.get("v"));
      return;
    }
    if (!t->contains(part)) t->insert(part, toml::table{});
    toml::node* n = t->get(part);
    if (!n->is_table()) throw ConfigError("override '" + spec + "': " + part + " is not a table");
    t = n->as_table();
    start = dot + 1;
  }
}

RunConfig from_table(const toml::table& root) {
  RunConfig c;
  Section top(&root, "");
  top.read("seed", c.seed);
  top.read("threads", c.threads);
  top.read("output_dir", c.output_dir);

  {
    Section s(top.table("corpus"), "corpus");
    auto& L = c.corpus.language;
    s.read("n_sentences", c.corpus.n_sentences);
    s.read("tsv_path", c.corpus.tsv_path);
    s.read("min_len", L.min_len);
    s.read("max_len", L.max_len);
    s.read("zipf_exponent", L.zipf_exponent);
    s.read("context_rule", L.context_rule);
    s.read("trigger_class", L.trigger_class);
    s.read("marker", L.marker);
    if (const toml::array* classes = s.array("classes")) {
      L.classes.clear();
      for (std::size_t i = 0; i < classes->size(); ++i) {
        const std::string k = "corpus.classes[" + std::to_string(i) + "]";
        if (!(*classes)[i].is_table()) throw ConfigError(k + " must be a table");
        Section cs((*classes)[i].as_table(), k);
        LexicalClass lc;
        cs.read("name", lc.name);
        cs.read("size", lc.size);
        cs.read("source_prefix", lc.source_prefix);
        cs.read("target_prefix", lc.target_prefix);
        cs.finish();
        if (lc.name.empty() || lc.size == 0) throw ConfigError(k + " needs a name and size >= 1");
        if (lc.source_prefix.empty()) lc.source_prefix = lc.name;
        if (lc.target_prefix.empty()) {
          lc.target_prefix = lc.name;
          for (char& ch : lc.target_prefix) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
        }
        L.classes.push_back(lc);
      }
    }
    if (const toml::table* bands = s.table("topic_bands")) {
      for (const auto& [k, v] : *bands) {
        const std::string key = "corpus.topic_bands." + std::string(k.str());
        if (!v.is_array()) throw ConfigError(key + " must be a [lo, hi] pair of numbers");
        const auto& a = *v.as_array();
        if (a.size() != 2) throw ConfigError(key + " must be a [lo, hi] pair of numbers");
        L.topic_frequency_targets[std::string(k.str())] = {number_at(a, 0, key), number_at(a, 1, key)};
      }
    }
    s.finish();
  }
  {
    Section s(top.table("model"), "model");
    auto& m = c.model;
    s.read("d_model", m.d_model);
    s.read("n_heads", m.n_heads);
    s.read("n_encoder_layers", m.n_encoder_layers);
    s.read("n_decoder_layers", m.n_decoder_layers);
    s.read("ff_dim", m.ff_dim);
    s.read("max_seq_len", m.max_seq_len);
    s.read("bottleneck_layer", m.bottleneck_layer);
    s.read("dropout", m.dropout);
    s.finish();
  }
  {
    Section s(top.table("codebook"), "codebook");
    s.read("enabled", c.model.use_bottleneck);
    s.read("num_codes", c.model.num_codes);
    s.read("code_dim", c.model.code_dim);
    s.read("top_s", c.model.top_s);
    s.finish();
  }
  {
    Section s(top.table("train"), "train");
    auto& t = c.train;
    s.read("lambda_l1", t.lambda_l1);
    s.read("lr", t.lr);
    s.read("batch_size", t.batch_size);
    s.read("epochs", t.epochs);
    double clip = 0.0;
    s.read("grad_clip", clip);
    if (clip < 0.0) throw ConfigError("train.grad_clip must be >= 0 (0 disables clipping)");
    if (clip > 0.0) t.grad_clip = clip;
    s.finish();
  }
  {
    Section s(top.table("unlearn"), "unlearn");
    auto& u = c.unlearn;
    auto& tp = c.topics;
    s.read("epsilon", u.epsilon);
    s.read("p_threshold", u.p_threshold);
    std::string gran = "sample";
    s.read("granularity", gran);
    if (gran == "sample") {
      u.granularity = Granularity::PerSample;
    } else if (gran == "position") {
      u.granularity = Granularity::PerPosition;
    } else {
      throw ConfigError("unlearn.granularity must be \"sample\" or \"position\"");
    }
    if (const toml::array* sp = s.array("sprimes")) {
      tp.sprimes.clear();
      for (const auto& v : *sp) {
        if (!v.is_integer() || v.value<std::int64_t>().value() < 1) {
          throw ConfigError("unlearn.sprimes must be positive integers");
        }
        tp.sprimes.push_back(static_cast<std::size_t>(v.value<std::int64_t>().value()));
      }
    }
    s.read("n_retrieval", tp.n_retrieval);
    s.read("replace", tp.replace);
    if (const toml::array* band = s.array("topic_band")) {
      if (band->size() != 2) throw ConfigError("unlearn.topic_band must be a [lo, hi] pair of numbers");
      tp.band_lo = number_at(*band, 0, "unlearn.topic_band");
      tp.band_hi = number_at(*band, 1, "unlearn.topic_band");
    }
    s.finish();
  }
  top.finish();
  c.apply_seed();
  c.validate();
  return c;
}

}  // namespace

void RunConfig::apply_seed() {
  corpus.language.seed = seed;
  train.seed = seed;
}

void RunConfig::validate() const {
  if (threads < 1) throw ConfigError("threads must be >= 1");
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
  if (corpus.n_sentences < 10) throw ConfigError("corpus.n_sentences must be >= 10");
  if (corpus.language.min_len < 1 || corpus.language.min_len > corpus.language.max_len) {
    throw ConfigError("corpus.min_len/max_len must satisfy 1 <= min_len <= max_len");
  }
  if (corpus.language.max_len + 2 > model.max_seq_len) {
    throw ConfigError("model.max_seq_len must be >= corpus.max_len + 2 (eos and marker)");
  }
  for (const auto& [tok, band] : corpus.language.topic_frequency_targets) {
    if (!(band.lo >= 0.0) || !(band.lo <= band.hi)) {
      throw ConfigError("corpus.topic_bands." + tok + " must satisfy 0 <= lo <= hi");
    }
  }
  ModelConfig m = model;
  m.vocab_size = std::max<std::size_t>(m.vocab_size, kNumReserved + 1);
  m.validate();
  train.validate();
  unlearn.validate();
  if (topics.sprimes.empty()) throw ConfigError("unlearn.sprimes must not be empty");
  if (topics.n_retrieval < 1) throw ConfigError("unlearn.n_retrieval must be >= 1");
  if (!(topics.band_lo >= 0.0 && topics.band_lo <= topics.band_hi)) {
    throw ConfigError("unlearn.topic_band must satisfy 0 <= lo <= hi");
  }
}

RunConfig parse_run_config(const std::string& text, const std::vector<std::string>& overrides,
                           const std::string& source_name) {
  toml::table root;
  try {
    root = toml::parse(text, source_name);
  } catch (const toml::parse_error& e) {
    std::ostringstream os;
    os << source_name << ":" << e.source().begin.line << ":" << e.source().begin.column << ": " << e.description();
    throw ConfigError(os.str());
  }
  for (const auto& o : overrides) apply_override(root, o);
  return from_table(root);
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read config " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_run_config(ss.str(), overrides, path);
}

std::string to_toml(const RunConfig& c) {
  auto i64 = [](std::size_t v) { return static_cast<std::int64_t>(v); };
  toml::table root;
  root.insert("seed", static_cast<std::int64_t>(c.seed));
  root.insert("threads", i64(c.threads));
  root.insert("output_dir", c.output_dir);

  const auto& L = c.corpus.language;
  toml::table corpus{{"n_sentences", i64(c.corpus.n_sentences)},
                     {"tsv_path", c.corpus.tsv_path},
                     {"min_len", i64(L.min_len)},
                     {"max_len", i64(L.max_len)},
                     {"zipf_exponent", L.zipf_exponent},
                     {"context_rule", L.context_rule},
                     {"trigger_class", L.trigger_class},
                     {"marker", L.marker}};
  toml::array classes;
  for (const auto& lc : L.classes) {
    classes.push_back(toml::table{{"name", lc.name},
                                  {"size", i64(lc.size)},
                                  {"source_prefix", lc.source_prefix},
                                  {"target_prefix", lc.target_prefix}});
  }
  corpus.insert("classes", classes);
  toml::table bands;
  for (const auto& [tok, b] : L.topic_frequency_targets) bands.insert(tok, toml::array{b.lo, b.hi});
  corpus.insert("topic_bands", bands);
  root.insert("corpus", corpus);

  const auto& m = c.model;
  root.insert("model", toml::table{{"d_model", i64(m.d_model)},
                                   {"n_heads", i64(m.n_heads)},
                                   {"n_encoder_layers", i64(m.n_encoder_layers)},
                                   {"n_decoder_layers", i64(m.n_decoder_layers)},
                                   {"ff_dim", i64(m.ff_dim)},
                                   {"max_seq_len", i64(m.max_seq_len)},
                                   {"bottleneck_layer", i64(m.bottleneck_layer)},
                                   {"dropout", m.dropout}});
  root.insert("codebook", toml::table{{"enabled", m.use_bottleneck},
                                      {"num_codes", i64(m.num_codes)},
                                      {"code_dim", i64(m.code_dim)},
                                      {"top_s", i64(m.top_s)}});
  root.insert("train", toml::table{{"lambda_l1", c.train.lambda_l1},
                                   {"lr", c.train.lr},
                                   {"batch_size", i64(c.train.batch_size)},
                                   {"epochs", i64(c.train.epochs)},
                                   {"grad_clip", c.train.grad_clip.value_or(0.0)}});
  toml::array sprimes;
  for (auto s : c.topics.sprimes) sprimes.push_back(i64(s));
  root.insert("unlearn",
              toml::table{{"epsilon", c.unlearn.epsilon},
                          {"p_threshold", c.unlearn.p_threshold},
                          {"granularity", c.unlearn.granularity == Granularity::PerSample ? "sample" : "position"},
                          {"sprimes", sprimes},
                          {"n_retrieval", i64(c.topics.n_retrieval)},
                          {"replace", c.topics.replace},
                          {"topic_band", toml::array{c.topics.band_lo, c.topics.band_hi}}});
  std::ostringstream os;
  os << toml::toml_formatter(root, toml::toml_formatter::default_flags & ~toml::format_flags::indentation);
  os << '\n';
  return os.str();
}

std::uint64_t topic_seed(const RunConfig& cfg) { return derive_seed(cfg.seed, "topics"); }

}  // namespace cu
