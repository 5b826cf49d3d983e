#include "codeunlearn/codeunlearn.h"

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <memory>
#include <new>
#include <string>

#include "codeunlearn/checkpoint.hpp"
#include "codeunlearn/error.hpp"
#include "codeunlearn/pipeline.hpp"

struct cu_config {
  cu::RunConfig cfg;
};

struct cu_model {
  cu::Seq2SeqModel model;
};

namespace {

thread_local std::string g_last_error;

cu_status status_of(cu::ErrorKind k) {
  switch (k) {
    case cu::ErrorKind::Dimension: return CU_ERR_DIMENSION;
    case cu::ErrorKind::Index: return CU_ERR_INDEX;
    case cu::ErrorKind::State: return CU_ERR_STATE;
    case cu::ErrorKind::Capacity: return CU_ERR_CAPACITY;
    case cu::ErrorKind::Config: return CU_ERR_CONFIG;
    case cu::ErrorKind::Numeric: return CU_ERR_NUMERIC;
    case cu::ErrorKind::Contract: return CU_ERR_CONTRACT;
    case cu::ErrorKind::Length: return CU_ERR_LENGTH;
    case cu::ErrorKind::Training: return CU_ERR_TRAINING;
    case cu::ErrorKind::Format: return CU_ERR_FORMAT;
    case cu::ErrorKind::Io: return CU_ERR_IO;
    case cu::ErrorKind::UnknownTopic: return CU_ERR_UNKNOWN_TOPIC;
    case cu::ErrorKind::MissingBaseline: return CU_ERR_MISSING_BASELINE;
  }
  return CU_ERR_INTERNAL;
}

cu_status fail(cu_status s, const std::string& msg) {
  g_last_error = msg;
  return s;
}

// Runs `fn`, translating exceptions into status codes.
template <typename F>
cu_status guard(F&& fn) {
  g_last_error.clear();
  try {
    fn();
    return CU_OK;
  } catch (const cu::TrainingError& e) {
    return fail(CU_ERR_TRAINING,
                std::string(e.what()) + " (last good epoch: " + std::to_string(e.last_good_epoch()) + ")");
  } catch (const cu::Error& e) {
    return fail(status_of(e.kind()), e.what());
  } catch (const std::bad_alloc&) {
    return fail(CU_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(CU_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(CU_ERR_INTERNAL, "unknown exception");
  }
}

char* dup_string(const std::string& s) {
  char* p = static_cast<char*>(std::malloc(s.size() + 1));
  if (!p) throw std::bad_alloc();
  std::memcpy(p, s.c_str(), s.size() + 1);
  return p;
}

void set_string(char** out, const std::string& s) {
  if (out) *out = dup_string(s);
}

#define CU_REQUIRE(cond, what) \
  if (!(cond)) return fail(CU_ERR_INVALID_ARGUMENT, what)

double nid_or_nan(const cu::EvalReport& r, cu::Metric m) {
  const auto v = r.nid(m);
  return v ? *v : NAN;
}

}  // namespace

extern "C" {

const char* cu_version(void) { return "1.0.0"; }

const char* cu_status_name(cu_status s) {
  switch (s) {
    case CU_OK: return "ok";
    case CU_ERR_DIMENSION: return "dimension error";
    case CU_ERR_INDEX: return "index error";
    case CU_ERR_STATE: return "state error";
    case CU_ERR_CAPACITY: return "capacity error";
    case CU_ERR_CONFIG: return "configuration error";
    case CU_ERR_NUMERIC: return "numeric error";
    case CU_ERR_CONTRACT: return "contract error";
    case CU_ERR_LENGTH: return "length error";
    case CU_ERR_TRAINING: return "training error";
    case CU_ERR_FORMAT: return "format error";
    case CU_ERR_IO: return "io error";
    case CU_ERR_UNKNOWN_TOPIC: return "unknown topic";
    case CU_ERR_MISSING_BASELINE: return "missing baseline";
    case CU_ERR_INVALID_ARGUMENT: return "invalid argument";
    case CU_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

const char* cu_last_error(void) { return g_last_error.c_str(); }

void cu_string_free(char* s) { std::free(s); }

cu_status cu_config_default(cu_config** out) {
  CU_REQUIRE(out, "out is NULL");
  return guard([&] {
    auto c = std::make_unique<cu_config>();
    c->cfg.apply_seed();
    cu::apply_output_dir_env(c->cfg);
    *out = c.release();
  });
}

cu_status cu_config_load(const char* path, const char* const* overrides, size_t n, cu_config** out) {
  CU_REQUIRE(out, "out is NULL");
  CU_REQUIRE(n == 0 || overrides, "overrides is NULL");
  return guard([&] {
    std::vector<std::string> ov;
    for (size_t i = 0; i < n; ++i) ov.emplace_back(overrides[i]);
    auto c = std::make_unique<cu_config>();
    c->cfg = path ? cu::load_run_config(path, ov) : cu::parse_run_config("", ov, "<defaults>");
    cu::apply_output_dir_env(c->cfg);
    *out = c.release();
  });
}

void cu_config_free(cu_config* cfg) { delete cfg; }

cu_status cu_config_set_output_dir(cu_config* cfg, const char* dir) {
  CU_REQUIRE(cfg && dir && *dir, "config/dir is NULL or empty");
  cfg->cfg.output_dir = dir;
  return CU_OK;
}

cu_status cu_config_set_threads(cu_config* cfg, size_t threads) {
  CU_REQUIRE(cfg, "config is NULL");
  CU_REQUIRE(threads >= 1, "threads must be >= 1");
  cfg->cfg.threads = threads;
  return CU_OK;
}

cu_status cu_config_output_dir(const cu_config* cfg, char** out) {
  CU_REQUIRE(cfg && out, "config/out is NULL");
  return guard([&] { set_string(out, cfg->cfg.output_dir); });
}

cu_status cu_config_to_toml(const cu_config* cfg, char** out) {
  CU_REQUIRE(cfg && out, "config/out is NULL");
  return guard([&] { set_string(out, cu::to_toml(cfg->cfg)); });
}

cu_status cu_config_sprimes(const cu_config* cfg, size_t* buf, size_t cap, size_t* count) {
  CU_REQUIRE(cfg && count, "config/count is NULL");
  CU_REQUIRE(cap == 0 || buf, "buf is NULL");
  const auto& s = cfg->cfg.topics.sprimes;
  for (size_t i = 0; i < s.size() && i < cap; ++i) buf[i] = s[i];
  *count = s.size();
  return CU_OK;
}

cu_status cu_run_gen_corpus(const cu_config* cfg, cu_corpus_summary* out, char** topic_candidates) {
  CU_REQUIRE(cfg, "config is NULL");
  return guard([&] {
    const auto r = cu::run_gen_corpus(cfg->cfg);
    if (out) *out = {r.train, r.validation, r.test, r.vocab};
    std::string joined;
    for (const auto& t : r.topic_candidates) joined += (joined.empty() ? "" : ",") + t;
    set_string(topic_candidates, joined);
  });
}

cu_status cu_run_train(const cu_config* cfg, const char* resume_from, cu_epoch_callback cb, void* user,
                       cu_train_summary* out) {
  CU_REQUIRE(cfg, "config is NULL");
  return guard([&] {
    cu::EpochCallback on_epoch;
    if (cb) {
      on_epoch = [&](const cu::EpochRecord& e) {
        const cu_epoch_record r{e.epoch, e.l_mse, e.l1, e.l_ce, e.l_joint, e.val_acc};
        cb(&r, user);
      };
    }
    const auto r = cu::run_train(cfg->cfg, resume_from ? resume_from : "", on_epoch);
    if (out) *out = {r.log.epochs.size(), r.log.best_epoch, r.val_acc, r.test_acc, r.bypass_test_acc};
  });
}

cu_status cu_run_unlearn(const cu_config* cfg, const char* topic, const size_t* sprimes, size_t n,
                         cu_unlearn_point* points, char** out_dir) {
  CU_REQUIRE(cfg && topic, "config/topic is NULL");
  CU_REQUIRE(n > 0 && sprimes && points, "need at least one S' and an output array");
  return guard([&] {
    const auto r = cu::run_unlearn(cfg->cfg, topic, std::vector<std::size_t>(sprimes, sprimes + n));
    for (size_t i = 0; i < r.points.size(); ++i) {
      const auto& p = r.points[i];
      points[i] = {p.enrichment.sprime,
                   p.enrichment.deleted_count(),
                   p.enrichment.deleted_fraction(),
                   nid_or_nan(p.reports.topic, cu::Metric::Bleu),
                   nid_or_nan(p.reports.rest, cu::Metric::Bleu),
                   nid_or_nan(p.reports.topic, cu::Metric::TokenAccuracy),
                   nid_or_nan(p.reports.rest, cu::Metric::TokenAccuracy),
                   nid_or_nan(p.reports.topic, cu::Metric::Meteor),
                   nid_or_nan(p.reports.rest, cu::Metric::Meteor)};
    }
    set_string(out_dir, r.dir);
  });
}

cu_status cu_run_eval(const cu_config* cfg, const char* checkpoint, const char* const* datasets, size_t n,
                      const char* zero_shot, const char* codebook, char** csv, char** out_path) {
  CU_REQUIRE(cfg && checkpoint, "config/checkpoint is NULL");
  CU_REQUIRE(n == 0 || datasets, "datasets is NULL");
  return guard([&] {
    cu::EvalRequest req;
    req.checkpoint = checkpoint;
    for (size_t i = 0; i < n; ++i) req.datasets.emplace_back(datasets[i]);
    if (zero_shot) req.zero_shot = zero_shot;
    if (codebook) req.codebook = codebook;
    const auto r = cu::run_eval(cfg->cfg, req);
    set_string(csv, r.csv);
    set_string(out_path, r.path);
  });
}

cu_status cu_run_report(const cu_config* cfg, char** markdown, char** out_path) {
  CU_REQUIRE(cfg, "config is NULL");
  return guard([&] {
    const auto r = cu::run_report(cfg->cfg);
    set_string(markdown, r.markdown);
    set_string(out_path, r.markdown_path);
  });
}

cu_status cu_model_load(const char* path, cu_model** out) {
  CU_REQUIRE(path && out, "path/out is NULL");
  return guard([&] {
    auto m = std::make_unique<cu_model>();
    m->model = cu::load_checkpoint(path).model;
    *out = m.release();
  });
}

cu_status cu_model_save(cu_model* model, const char* path) {
  CU_REQUIRE(model && path, "model/path is NULL");
  return guard([&] { cu::save_checkpoint(path, model->model); });
}

void cu_model_free(cu_model* model) { delete model; }

cu_status cu_model_get_info(cu_model* model, cu_model_info* out) {
  CU_REQUIRE(model && out, "model/out is NULL");
  return guard([&] {
    const auto& c = model->model.config();
    *out = {c.vocab_size,
            c.d_model,
            c.use_bottleneck ? c.num_codes : 0,
            c.use_bottleneck ? c.code_dim : 0,
            c.use_bottleneck ? c.top_s : 0,
            c.use_bottleneck ? model->model.codebook().live_count() : 0,
            model->model.parameter_count()};
  });
}

cu_status cu_model_deleted_codes(const cu_model* model, int* buf, size_t cap, size_t* count) {
  CU_REQUIRE(model && count, "model/count is NULL");
  CU_REQUIRE(cap == 0 || buf, "buf is NULL");
  return guard([&] {
    const auto ids = model->model.config().use_bottleneck ? model->model.codebook().deleted_indices()
                                                          : std::vector<int>{};
    for (size_t i = 0; i < ids.size() && i < cap; ++i) buf[i] = ids[i];
    *count = ids.size();
  });
}

cu_status cu_model_delete_codes(cu_model* model, const int* ids, size_t n) {
  CU_REQUIRE(model, "model is NULL");
  CU_REQUIRE(n == 0 || ids, "ids is NULL");
  return guard([&] {
    if (!model->model.config().use_bottleneck) throw cu::StateError("model has no codebook");
    cu::delete_codes(model->model.codebook(), std::span<const int>(ids, n));
  });
}

cu_status cu_model_translate(const cu_model* model, const int* source, size_t n, int* out, size_t cap,
                             size_t* out_len) {
  CU_REQUIRE(model && out_len, "model/out_len is NULL");
  CU_REQUIRE(n == 0 || source, "source is NULL");
  CU_REQUIRE(cap == 0 || out, "out is NULL");
  return guard([&] {
    const auto hyp =
        model->model.greedy_decode(std::vector<int>(source, source + n), model->model.config().max_seq_len);
    for (size_t i = 0; i < hyp.size() && i < cap; ++i) out[i] = hyp[i];
    *out_len = hyp.size();
  });
}

cu_status cu_bleu(const int* const* hyps, const size_t* hyp_lens, const int* const* refs, const size_t* ref_lens,
                  size_t n, double* out) {
  CU_REQUIRE(out, "out is NULL");
  CU_REQUIRE(n == 0 || (hyps && hyp_lens && refs && ref_lens), "sequence arrays are NULL");
  return guard([&] {
    std::vector<cu::TokenSeq> h, r;
    for (size_t i = 0; i < n; ++i) {
      h.emplace_back(hyps[i], hyps[i] + hyp_lens[i]);
      r.emplace_back(refs[i], refs[i] + ref_lens[i]);
    }
    *out = cu::bleu(h, r);
  });
}

}  // extern "C"
