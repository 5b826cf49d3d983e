#include "codeunlearn/training.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

#include "codeunlearn/codebook.hpp"
#include "codeunlearn/rng.hpp"

namespace cu {

void TrainConfig::validate() const {
  if (!(lambda_l1 >= 0.0)) throw ConfigError("train.lambda_l1 must be >= 0");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("train.lr must be > 0");
  if (grad_clip && !(*grad_clip > 0.0)) throw ConfigError("train.grad_clip must be > 0");
}

std::string TrainLog::to_csv() const {
  std::ostringstream os;
  os << "epoch,l_mse,l1,l_ce,l_joint,val_acc\n";
  os << std::setprecision(17);
  for (const auto& r : epochs) {
    os << r.epoch << ',' << r.l_mse << ',' << r.l1 << ',' << r.l_ce << ',' << r.l_joint << ',' << r.val_acc << '\n';
  }
  return os.str();
}

Var codebook_loss(Var a, Var a_hat, std::span<const std::uint8_t> row_mask, Var codes,
                  const std::vector<std::vector<int>>& omega, double lambda) {
  if (a.value().shape != a_hat.value().shape) {
    throw DimensionError("codebook_loss: activation " + shape_str(a.value().shape) + " vs reconstruction " +
                         shape_str(a_hat.value().shape));
  }
  std::vector<int> used;
  for (std::size_t r = 0; r < omega.size(); ++r) {
    if (r < row_mask.size() && !row_mask[r]) continue;
    used.insert(used.end(), omega[r].begin(), omega[r].end());
  }
  return add(masked_mse(a, a_hat, row_mask), codebook_l1(codes, used, lambda));
}

Var joint_loss(Var ce, Var codebook) {
  if (!std::isfinite(ce.value()[0]) || !std::isfinite(codebook.value()[0])) {
    throw NumericError("joint_loss: non-finite input");
  }
  return add(ce, codebook);
}

double joint_loss(double ce, double codebook) {
  if (!std::isfinite(ce) || !std::isfinite(codebook)) throw NumericError("joint_loss: non-finite input");
  return ce + codebook;
}

namespace {

std::vector<int> labels_of(const SequenceBatch& batch) {
  std::vector<int> labels(batch.target_ids);
  for (int& t : labels)
    if (t == batch.pad_id) t = -1;
  return labels;
}

SequenceBatch make_batch(const std::vector<Sentence>& data, std::span<const std::size_t> idx) {
  std::vector<std::vector<int>> src, tgt;
  src.reserve(idx.size());
  tgt.reserve(idx.size());
  for (std::size_t i : idx) {
    src.push_back(data[i].source);
    tgt.push_back(data[i].target);
  }
  return SequenceBatch::from_sequences(src, tgt);
}

}  // namespace

JointLossVars build_joint_loss(Graph& g, Seq2SeqModel& model, const SequenceBatch& batch, double lambda,
                               const EncodeOptions& opt) {
  EncodeOutput enc = model.encode(g, batch, opt);
  Var logits = model.decode_logits(g, batch, enc, opt);
  JointLossVars out;
  out.ce = softmax_cross_entropy(logits, labels_of(batch), -1);
  if (enc.pre_bottleneck.valid()) {
    std::vector<int> used;
    for (std::size_t r = 0; r < enc.omega.size(); ++r)
      if (enc.src_valid[r]) used.insert(used.end(), enc.omega[r].begin(), enc.omega[r].end());
    out.mse = masked_mse(enc.pre_bottleneck, enc.a_hat, enc.src_valid);
    out.l1 = codebook_l1(g.param(model.codebook().codes), used, lambda);
  } else {
    out.mse = g.constant(Tensor({1}, 0.0));
    out.l1 = g.constant(Tensor({1}, 0.0));
  }
  out.joint = joint_loss(out.ce, add(out.mse, out.l1));
  return out;
}

double teacher_forced_accuracy(Seq2SeqModel& model, const std::vector<Sentence>& data, BottleneckMode mode,
                               std::size_t batch_size) {
  if (data.empty()) return 0.0;
  std::size_t correct = 0, total = 0;
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  EncodeOptions opt;
  opt.mode = mode;
  const std::size_t V = model.config().vocab_size;
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, idx.size() - start);
    const SequenceBatch batch = make_batch(data, std::span<const std::size_t>(idx).subspan(start, n));
    Graph g(false);
    const Tensor& logits = model.forward_teacher_forced(g, batch, opt).value();
    for (std::size_t r = 0; r < batch.target_ids.size(); ++r) {
      const int t = batch.target_ids[r];
      if (t == batch.pad_id) continue;
      const double* row = logits.data.data() + r * V;
      const auto best = static_cast<int>(std::max_element(row, row + V) - row);
      correct += best == t;
      ++total;
    }
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

TrainLog train(Seq2SeqModel& model, const Corpus& corpus, const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  TrainLog log;
  if (cfg.epochs == 0) return log;
  if (corpus.train.empty()) throw ConfigError("train: empty training split");

  const std::vector<Tensor*> params = model.parameters();
  for (Tensor* p : params) p->zero_grad();
  AdamState adam;
  adam.lr = cfg.lr;
  std::mt19937_64 rng(derive_seed(cfg.seed, "train"));

  std::vector<std::vector<double>> best;
  log.best_val_acc = -1.0;
  std::vector<std::size_t> order(corpus.train.size());
  std::iota(order.begin(), order.end(), 0);
  std::uint64_t step = 0;
  const std::vector<Sentence>& val = corpus.validation.empty() ? corpus.train : corpus.validation;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochRecord rec;
    rec.epoch = epoch;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      const SequenceBatch batch = make_batch(corpus.train, std::span<const std::size_t>(order).subspan(start, n));
      EncodeOptions opt;
      opt.dropout_seed = derive_seed(cfg.seed, "dropout") ^ mix64(++step);
      Graph g;
      JointLossVars loss;
      try {
        loss = build_joint_loss(g, model, batch, cfg.lambda_l1, opt);
      } catch (const NumericError& e) {
        throw TrainingError(std::string("training diverged in epoch ") + std::to_string(epoch) + ": " + e.what(),
                            log.epochs.empty() ? 0 : log.epochs.back().epoch);
      }
      g.backward(loss.joint);
      if (cfg.grad_clip) clip_grad_norm(params, *cfg.grad_clip);
      adam_step(params, adam);
      rec.l_mse += loss.mse.value()[0];
      rec.l1 += loss.l1.value()[0];
      rec.l_ce += loss.ce.value()[0];
      rec.l_joint += loss.joint.value()[0];
      ++batches;
    }
    const double nb = static_cast<double>(batches);
    rec.l_mse /= nb;
    rec.l1 /= nb;
    rec.l_ce /= nb;
    rec.l_joint /= nb;
    if (!std::isfinite(rec.l_joint)) {
      throw TrainingError("training diverged in epoch " + std::to_string(epoch),
                          log.epochs.empty() ? 0 : log.epochs.back().epoch);
    }
    rec.val_acc = teacher_forced_accuracy(model, val);
    log.epochs.push_back(rec);
    if (rec.val_acc > log.best_val_acc) {
      log.best_val_acc = rec.val_acc;
      log.best_epoch = epoch;
      best.clear();
      for (Tensor* p : params) best.push_back(p->data);
    }
    if (on_epoch) on_epoch(rec);
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->data = best[i];
  for (Tensor* p : params) p->grad.clear();
  return log;
}

}  // namespace cu
