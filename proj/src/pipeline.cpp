#include "codeunlearn/pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include <json.hpp>

#include "codeunlearn/checkpoint.hpp"
#include "codeunlearn/error.hpp"
#include "codeunlearn/parallel.hpp"

namespace cu {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path);
  os << text;
  if (!os) throw IoError("failed writing " + path);
}

std::string read_text(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void make_dirs(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

Corpus load_run_corpus(const RunLayout& L) {
  if (!fs::exists(L.corpus_dir() + "/vocab.json")) {
    throw IoError("no corpus in " + L.corpus_dir() + " (run gen-corpus first)");
  }
  return read_corpus(L.corpus_dir());
}

json metric_json(const MetricSet& m) {
  return {{"bleu", m.bleu}, {"meteor", m.meteor}, {"token_accuracy", m.token_accuracy}};
}

json nid_json(const EvalReport& r) {
  json j = json::object();
  for (Metric m : kAllMetrics) {
    const auto v = r.nid(m);
    j[metric_name(m)] = v ? json(*v) : json(nullptr);
  }
  return j;
}

// Where and how fast a run executes does not change its results, so the echo omits both.
std::string config_echo(const RunConfig& cfg) {
  RunConfig echo = cfg;
  echo.output_dir = "";
  echo.threads = 1;
  return to_toml(echo);
}

std::string manifest_for(const RunConfig& cfg, const std::string& kind, const json& metrics) {
  json j;
  j["kind"] = kind;
  j["seed"] = cfg.seed;
  j["config"] = config_echo(cfg);
  j["metrics"] = metrics;
  return j.dump();
}

// Topic tokens are vocabulary strings; keep directory names tame anyway.
std::string safe_name(const std::string& s) {
  std::string out;
  for (char c : s) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_') ? c : '_';
  return out.empty() ? "_" : out;
}

}  // namespace

void apply_output_dir_env(RunConfig& cfg) {
  if (const char* v = std::getenv(kOutputDirEnv); v && *v) cfg.output_dir = v;
}

std::vector<std::string> mid_band_topics(const Corpus& corpus, double lo, double hi) {
  std::map<int, std::size_t> freq;
  for (const auto& s : corpus.train) {
    std::vector<int> u = s.source;
    std::sort(u.begin(), u.end());
    u.erase(std::unique(u.begin(), u.end()), u.end());
    for (int t : u) ++freq[t];
  }
  const double n = static_cast<double>(corpus.train.size());
  const double centre = 0.5 * (lo + hi) * n;
  std::vector<std::pair<double, std::string>> picks;
  for (int id : corpus.source_vocab) {
    const double f = freq.count(id) ? static_cast<double>(freq.at(id)) : 0.0;
    if (f >= lo * n && f <= hi * n) picks.emplace_back(std::abs(f - centre), corpus.vocab.token(id));
  }
  std::sort(picks.begin(), picks.end());
  std::vector<std::string> out;
  for (auto& p : picks) out.push_back(p.second);
  return out;
}

Corpus build_corpus(const RunConfig& cfg) {
  if (!cfg.corpus.tsv_path.empty()) return corpus_from_tsv(cfg.corpus.tsv_path, cfg.seed);
  return generate_corpus(cfg.corpus.language, cfg.corpus.n_sentences);
}

ModelConfig model_config_for(const RunConfig& cfg, const Corpus& corpus) {
  ModelConfig m = cfg.model;
  m.vocab_size = corpus.vocab.size();
  m.validate();
  return m;
}

GenCorpusResult run_gen_corpus(const RunConfig& cfg) {
  cfg.validate();
  const RunLayout L{cfg.output_dir};
  const Corpus c = build_corpus(cfg);
  make_dirs(L.corpus_dir());
  write_corpus(L.corpus_dir(), c);
  GenCorpusResult r;
  r.dir = L.corpus_dir();
  r.train = c.train.size();
  r.validation = c.validation.size();
  r.test = c.test.size();
  r.vocab = c.vocab.size();
  r.topic_candidates = mid_band_topics(c, cfg.topics.band_lo, cfg.topics.band_hi);
  json m;
  m["kind"] = "corpus";
  m["seed"] = cfg.seed;
  m["config"] = config_echo(cfg);
  m["splits"] = {{"train", r.train}, {"validation", r.validation}, {"test", r.test}};
  m["vocab_size"] = r.vocab;
  m["topic_band"] = {cfg.topics.band_lo, cfg.topics.band_hi};
  m["topic_candidates"] = r.topic_candidates;
  write_text(L.corpus_dir() + "/manifest.json", m.dump(2) + "\n");
  return r;
}

TrainResult run_train(const RunConfig& cfg, const std::string& resume_from, const EpochCallback& on_epoch) {
  cfg.validate();
  set_num_threads(cfg.threads);
  const RunLayout L{cfg.output_dir};
  const Corpus c = load_run_corpus(L);
  const ModelConfig mc = model_config_for(cfg, c);
  make_dirs(L.model_dir());

  Seq2SeqModel init(mc, cfg.seed);
  save_checkpoint(L.init_checkpoint(), init,
                  manifest_for(cfg, "init", {{"val_acc", teacher_forced_accuracy(init, c.validation)}}));

  Seq2SeqModel model = init;
  if (!resume_from.empty()) {
    LoadedCheckpoint ck = load_checkpoint(resume_from);
    if (model_config_json(ck.model.config()) != model_config_json(mc)) {
      throw ConfigError("resume checkpoint " + resume_from + " was built for a different model config");
    }
    model = std::move(ck.model);
  }

  TrainLog partial;
  auto record = [&](const EpochRecord& e) {
    partial.epochs.push_back(e);
    if (on_epoch) on_epoch(e);
  };
  TrainResult r;
  try {
    r.log = train(model, c, cfg.train, record);
  } catch (const TrainingError&) {
    write_text(L.train_log(), partial.to_csv());
    throw;
  }
  write_text(L.train_log(), r.log.to_csv());
  r.val_acc = teacher_forced_accuracy(model, c.validation);
  r.test_acc = teacher_forced_accuracy(model, c.test);
  r.bypass_test_acc = mc.use_bottleneck ? teacher_forced_accuracy(model, c.test, BottleneckMode::Bypass) : r.test_acc;
  json metrics = {{"best_epoch", r.log.best_epoch},
                  {"val_acc", r.val_acc},
                  {"test_acc", r.test_acc},
                  {"bypass_test_acc", r.bypass_test_acc}};
  if (!resume_from.empty()) metrics["resumed_from"] = resume_from;
  save_checkpoint(L.codebook_checkpoint(), model, manifest_for(cfg, "codebook", metrics));
  r.checkpoint = L.codebook_checkpoint();
  return r;
}

UnlearnResult run_unlearn(const RunConfig& cfg, const std::string& topic, std::vector<std::size_t> sprimes) {
  cfg.validate();
  set_num_threads(cfg.threads);
  if (sprimes.empty()) sprimes = cfg.topics.sprimes;
  const RunLayout L{cfg.output_dir};
  const Corpus c = load_run_corpus(L);
  if (!fs::exists(L.codebook_checkpoint())) {
    throw IoError("no trained checkpoint at " + L.codebook_checkpoint() + " (run train first)");
  }
  TopicDatasets ds = build_topic_datasets(c, topic, cfg.topics.n_retrieval, topic_seed(cfg));
  if (!cfg.topics.replace) ds = without_replacement(ds);
  if (ds.d_topic_eval.empty() || ds.d_rest.empty()) {
    throw ConfigError("topic '" + topic + "' has no held-out sentences for D_T' (pick a more frequent topic)");
  }
  if (!fs::exists(L.init_checkpoint())) {
    throw MissingBaselineError("zero-shot baseline " + L.init_checkpoint() + " is missing (rerun train)");
  }
  const Seq2SeqModel pristine = load_checkpoint(L.codebook_checkpoint()).model;
  const Seq2SeqModel zero_shot = load_checkpoint(L.init_checkpoint()).model;

  UnlearnResult r;
  r.topic = topic;
  r.dir = L.unlearn_dir(safe_name(topic) + (cfg.topics.replace ? "" : "-null"));
  make_dirs(r.dir);
  write_text(r.dir + "/datasets.json", topic_manifest_json(c, ds) + "\n");
  r.baselines = measure_baselines(zero_shot, pristine, ds);
  write_text(r.dir + "/baselines.json",
             json{{"D_T'", {{"zero_shot", metric_json(r.baselines.topic.zero_shot)},
                            {"codebook", metric_json(r.baselines.topic.codebook)}}},
                  {"D_R", {{"zero_shot", metric_json(r.baselines.rest.zero_shot)},
                           {"codebook", metric_json(r.baselines.rest.codebook)}}}}
                     .dump(2) + "\n");

  UnlearnConfig base = cfg.unlearn;
  r.points = sprime_sweep(pristine, ds, sprimes, base, r.baselines);

  json points = json::array();
  for (const auto& p : r.points) {
    const std::string tag = "s" + std::to_string(p.enrichment.sprime);
    write_text(r.dir + "/enrichment_" + tag + ".csv", p.enrichment.to_csv());
    write_text(r.dir + "/enrichment_" + tag + ".json", p.enrichment.to_json());
    const auto tt = trace_activations(pristine, ds.d_topic, p.enrichment.sprime, "T");
    const auto tc = trace_activations(pristine, ds.d_control, p.enrichment.sprime, "~T");
    write_text(r.dir + "/traces_" + tag + ".tsv", "# D_T\n" + trace_dump(tt) + "# D_~T\n" + trace_dump(tc));
    Seq2SeqModel unlearned = pristine;
    delete_codes(unlearned.codebook(), p.enrichment.deleted);
    json metrics = {{"topic", topic},
                    {"sprime", p.enrichment.sprime},
                    {"deleted_count", p.enrichment.deleted_count()},
                    {"D_T'", metric_json(p.reports.topic.raw)},
                    {"D_R", metric_json(p.reports.rest.raw)}};
    save_checkpoint(r.dir + "/unlearned_" + tag + ".culb", unlearned, manifest_for(cfg, "unlearned", metrics));
    points.push_back({{"sprime", p.enrichment.sprime},
                      {"deleted_count", p.enrichment.deleted_count()},
                      {"deleted_fraction", p.enrichment.deleted_fraction()},
                      {"nid_topic", nid_json(p.reports.topic)},
                      {"nid_rest", nid_json(p.reports.rest)},
                      {"raw_topic", metric_json(p.reports.topic.raw)},
                      {"raw_rest", metric_json(p.reports.rest.raw)}});
  }
  const auto rows = sweep_rows(r.points);
  write_text(r.dir + "/report.csv", report_csv(topic, rows));
  write_text(r.dir + "/plot_data.csv", plot_data_csv(rows));
  json summary = {{"topic", topic},
                  {"replace", cfg.topics.replace},
                  {"num_codes", pristine.codebook().num_codes()},
                  {"n_topic", ds.d_topic.size()},
                  {"n_topic_eval", ds.d_topic_eval.size()},
                  {"n_rest", ds.d_rest.size()},
                  {"granularity", cfg.unlearn.granularity == Granularity::PerSample ? "sample" : "position"},
                  {"note", kReportNote},
                  {"warnings", ds.warnings},
                  {"points", points}};
  write_text(r.dir + "/summary.json", summary.dump(2) + "\n");
  return r;
}

EvalResult run_eval(const RunConfig& cfg, const EvalRequest& req) {
  cfg.validate();
  set_num_threads(cfg.threads);
  const RunLayout L{cfg.output_dir};
  const std::string zs_path = req.zero_shot.empty() ? L.init_checkpoint() : req.zero_shot;
  const std::string cb_path = req.codebook.empty() ? L.codebook_checkpoint() : req.codebook;
  for (const auto& p : {zs_path, cb_path}) {
    if (!fs::exists(p)) throw MissingBaselineError("baseline checkpoint " + p + " is missing; NID needs both baselines");
  }
  if (req.checkpoint.empty()) throw ConfigError("eval needs a checkpoint");
  const Corpus c = load_run_corpus(L);
  const Seq2SeqModel model = load_checkpoint(req.checkpoint).model;
  const Seq2SeqModel zs = load_checkpoint(zs_path).model;
  const Seq2SeqModel cb = load_checkpoint(cb_path).model;

  std::vector<std::pair<std::string, std::vector<Sentence>>> sets;
  if (req.datasets.empty()) {
    sets.emplace_back("test", c.test);
  } else {
    for (const auto& p : req.datasets) sets.emplace_back(fs::path(p).stem().string(), read_tsv(p, c.vocab));
  }
  EvalResult r;
  std::ostringstream os;
  os << std::setprecision(17);
  os << "dataset,samples,metric,raw,zero_shot,codebook,nid_percent\n";
  for (const auto& [name, data] : sets) {
    EvalReport e;
    e.dataset = name;
    e.sample_count = data.size();
    e.raw = evaluate(model, data);
    e.baseline.zero_shot = evaluate(zs, data);
    e.baseline.codebook = evaluate(cb, data);
    for (Metric m : kAllMetrics) {
      os << name << ',' << data.size() << ',' << metric_name(m) << ',' << e.raw.get(m) << ','
         << e.baseline.zero_shot.get(m) << ',' << e.baseline.codebook.get(m) << ',';
      if (const auto v = e.nid(m)) os << *v;
      else os << "n/a";
      os << '\n';
    }
    r.reports.push_back(e);
  }
  r.csv = os.str();
  make_dirs(L.eval_dir());
  r.path = L.eval_dir() + "/" + fs::path(req.checkpoint).stem().string() + ".csv";
  write_text(r.path, r.csv);
  return r;
}

ReportResult run_report(const RunConfig& cfg) {
  const RunLayout L{cfg.output_dir};
  std::vector<fs::path> dirs;
  if (fs::exists(L.unlearn_root())) {
    for (const auto& e : fs::directory_iterator(L.unlearn_root()))
      if (e.is_directory() && fs::exists(e.path() / "summary.json")) dirs.push_back(e.path());
  }
  if (dirs.empty()) throw IoError("no unlearning results under " + L.unlearn_root() + " (run unlearn first)");
  std::sort(dirs.begin(), dirs.end());

  std::string csv;
  std::ostringstream md;
  md << std::fixed << std::setprecision(2);
  md << "# Unlearning report\n\n" << kReportNote << ".\n\n";
  md << "NID = 100 * (unlearned - codebook) / (codebook - zero_shot); 0 = no effect, -100 = back to the "
        "untrained baseline.\n\n";
  md << "| topic | S' | deleted | deleted % of K | BLEU NID D_T' | BLEU NID D_R | acc NID D_T' | acc NID D_R |\n";
  md << "|---|---|---|---|---|---|---|---|\n";
  auto cell = [](const json& v) {
    if (v.is_null()) return std::string("n/a");
    std::ostringstream o;
    o << std::fixed << std::setprecision(2) << v.get<double>();
    return o.str();
  };
  for (const auto& d : dirs) {
    const json s = json::parse(read_text((d / "summary.json").string()));
    const std::string rep = read_text((d / "report.csv").string());
    csv += csv.empty() ? rep : rep.substr(rep.find('\n') + 1);
    std::string label = s.at("topic").get<std::string>();
    if (!s.at("replace").get<bool>()) label += " (null)";
    for (const auto& p : s.at("points")) {
      md << "| " << label << " | " << p.at("sprime").get<std::size_t>() << " | "
         << p.at("deleted_count").get<std::size_t>() << " | " << 100.0 * p.at("deleted_fraction").get<double>()
         << " | " << cell(p["nid_topic"]["bleu"]) << " | " << cell(p["nid_rest"]["bleu"]) << " | "
         << cell(p["nid_topic"]["token_accuracy"]) << " | " << cell(p["nid_rest"]["token_accuracy"]) << " |\n";
    }
  }
  ReportResult r;
  r.topics = dirs.size();
  r.csv_path = L.root + "/report.csv";
  r.markdown_path = L.root + "/report.md";
  r.markdown = md.str();
  write_text(r.csv_path, csv);
  write_text(r.markdown_path, r.markdown);
  return r;
}

}  // namespace cu
