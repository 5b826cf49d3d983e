// codeunlearn command-line interface. Links only against the C API.

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "codeunlearn/codeunlearn.h"

namespace {

// Stable, documented exit codes.
enum Exit : int {
  kOk = 0,
  kFailure = 1,        // I/O, format, capacity or internal errors
  kConfig = 2,         // usage or configuration errors
  kDiverged = 3,       // training produced a non-finite loss
  kUnknownTopic = 4,   // topic token not in the source vocabulary
  kMissingBaseline = 5 // NID needs the zero-shot and codebook checkpoints
};

int exit_code(cu_status s) {
  switch (s) {
    case CU_OK: return kOk;
    case CU_ERR_CONFIG:
    case CU_ERR_INVALID_ARGUMENT: return kConfig;
    case CU_ERR_TRAINING: return kDiverged;
    case CU_ERR_UNKNOWN_TOPIC: return kUnknownTopic;
    case CU_ERR_MISSING_BASELINE: return kMissingBaseline;
    default: return kFailure;
  }
}

int report_failure(cu_status s) {
  std::fprintf(stderr, "codeunlearn: %s: %s\n", cu_status_name(s), cu_last_error());
  return exit_code(s);
}

std::string take(char* s) {
  std::string out = s ? s : "";
  cu_string_free(s);
  return out;
}

struct Options {
  std::string config;
  std::vector<std::string> overrides;
  std::string output_dir;
  std::size_t threads = 0;
  bool quiet = false;
};

class ConfigHandle {
 public:
  ~ConfigHandle() { cu_config_free(cfg_); }
  cu_status open(const Options& o) {
    std::vector<const char*> ov;
    for (const auto& s : o.overrides) ov.push_back(s.c_str());
    cu_status s = cu_config_load(o.config.empty() ? nullptr : o.config.c_str(), ov.data(), ov.size(), &cfg_);
    if (s == CU_OK && !o.output_dir.empty()) s = cu_config_set_output_dir(cfg_, o.output_dir.c_str());
    if (s == CU_OK && o.threads > 0) s = cu_config_set_threads(cfg_, o.threads);
    return s;
  }
  cu_config* get() const { return cfg_; }

 private:
  cu_config* cfg_ = nullptr;
};

void print_epoch(const cu_epoch_record* r, void*) {
  std::printf("epoch %3zu  ce %.5f  mse %.5f  l1 %.3g  joint %.5f  val_acc %.4f\n", r->epoch, r->l_ce, r->l_mse,
              r->l1, r->l_joint, r->val_acc);
  std::fflush(stdout);
}

std::string fmt_nid(double v) {
  if (std::isnan(v)) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Zero-shot topic unlearning with codebook features"};
  app.require_subcommand(1);
  Options opt;
  app.add_option("-c,--config", opt.config, "TOML run configuration (default: built-in defaults)");
  app.add_option("-s,--set", opt.overrides, "Override a config value, e.g. --set train.epochs=4")->take_all();
  app.add_option("-o,--output-dir", opt.output_dir,
                 "Output directory (overrides the config file and $CODEUNLEARN_OUTPUT_DIR)");
  app.add_option("-j,--threads", opt.threads, "Inference worker threads; 1 forces single-threaded execution")
      ->check(CLI::PositiveNumber);
  app.add_flag("-q,--quiet", opt.quiet, "Only print errors");

  auto* gen = app.add_subcommand("gen-corpus", "Generate (or ingest) the parallel corpus and splits");

  auto* tr = app.add_subcommand("train", "Train the codebook model on the corpus");
  std::string resume;
  tr->add_option("--resume", resume, "Start from this checkpoint instead of the seeded initialization");

  auto* un = app.add_subcommand("unlearn", "Trace, score and delete topic codes over an S' sweep");
  std::string topic;
  std::vector<std::size_t> sprimes;
  bool no_replacement = false;
  un->add_option("-t,--topic", topic, "Source token to unlearn")->required();
  un->add_option("--sprime", sprimes, "Comma-separated S' values (default: unlearn.sprimes)")->delimiter(',');
  un->add_flag("--no-replacement", no_replacement, "Null experiment: D_~T is an unmodified copy of D_T");

  auto* ev = app.add_subcommand("eval", "Score a checkpoint with normalized improvement drop");
  std::string checkpoint, zero_shot, codebook;
  std::vector<std::string> datasets;
  ev->add_option("--checkpoint", checkpoint, "Checkpoint to evaluate")->required();
  ev->add_option("--dataset", datasets, "TSV dataset(s) to score (default: the test split)");
  ev->add_option("--zero-shot", zero_shot, "Zero-shot baseline checkpoint (default: <out>/model/init.culb)");
  ev->add_option("--codebook", codebook, "Codebook baseline checkpoint (default: <out>/model/codebook.culb)");

  auto* rep = app.add_subcommand("report", "Collect unlearning summaries into report.csv and report.md");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  if (no_replacement) opt.overrides.push_back("unlearn.replace=false");
  ConfigHandle cfg;
  if (cu_status s = cfg.open(opt); s != CU_OK) return report_failure(s);
  auto say = [&](const char* fmt, auto... args) {
    if (!opt.quiet) std::printf(fmt, args...);
  };

  if (gen->parsed()) {
    cu_corpus_summary sum{};
    char* topics = nullptr;
    if (cu_status s = cu_run_gen_corpus(cfg.get(), &sum, &topics); s != CU_OK) return report_failure(s);
    const std::string t = take(topics);
    say("corpus: %zu train / %zu validation / %zu test sentences, vocabulary %zu\n", sum.train, sum.validation,
        sum.test, sum.vocab);
    say("mid-band topic candidates: %s\n", t.empty() ? "(none)" : t.c_str());
    return kOk;
  }
  if (tr->parsed()) {
    cu_train_summary sum{};
    const cu_status s =
        cu_run_train(cfg.get(), resume.empty() ? nullptr : resume.c_str(), opt.quiet ? nullptr : print_epoch, nullptr,
                     &sum);
    if (s != CU_OK) return report_failure(s);
    say("best epoch %zu: val_acc %.4f test_acc %.4f bypass_test_acc %.4f\n", sum.best_epoch, sum.val_acc,
        sum.test_acc, sum.bypass_test_acc);
    return kOk;
  }
  if (un->parsed()) {
    if (sprimes.empty()) {
      std::size_t n = 0;
      cu_config_sprimes(cfg.get(), nullptr, 0, &n);
      sprimes.resize(n);
      cu_config_sprimes(cfg.get(), sprimes.data(), n, &n);
    }
    std::vector<cu_unlearn_point> pts(sprimes.size());
    char* dir = nullptr;
    const cu_status s = cu_run_unlearn(cfg.get(), topic.c_str(), sprimes.data(), sprimes.size(), pts.data(), &dir);
    if (s != CU_OK) return report_failure(s);
    const std::string d = take(dir);
    say("%6s %8s %9s %12s %12s %12s %12s\n", "S'", "deleted", "% of K", "BLEU D_T'", "BLEU D_R", "acc D_T'",
        "acc D_R");
    for (const auto& p : pts) {
      say("%6zu %8zu %9.3f %12s %12s %12s %12s\n", p.sprime, p.deleted_count, 100.0 * p.deleted_fraction,
          fmt_nid(p.nid_topic_bleu).c_str(), fmt_nid(p.nid_rest_bleu).c_str(), fmt_nid(p.nid_topic_accuracy).c_str(),
          fmt_nid(p.nid_rest_accuracy).c_str());
    }
    say("(normalized improvement drop, %%) results in %s\n", d.c_str());
    return kOk;
  }
  if (ev->parsed()) {
    std::vector<const char*> ds;
    for (const auto& p : datasets) ds.push_back(p.c_str());
    char *csv = nullptr, *path = nullptr;
    const cu_status s = cu_run_eval(cfg.get(), checkpoint.c_str(), ds.data(), ds.size(),
                                    zero_shot.empty() ? nullptr : zero_shot.c_str(),
                                    codebook.empty() ? nullptr : codebook.c_str(), &csv, &path);
    if (s != CU_OK) return report_failure(s);
    const std::string c = take(csv), p = take(path);
    say("%s", c.c_str());
    say("written to %s\n", p.c_str());
    return kOk;
  }
  if (rep->parsed()) {
    char *md = nullptr, *path = nullptr;
    if (cu_status s = cu_run_report(cfg.get(), &md, &path); s != CU_OK) return report_failure(s);
    const std::string m = take(md), p = take(path);
    say("%s", m.c_str());
    say("written to %s\n", p.c_str());
    return kOk;
  }
  return kConfig;
}
