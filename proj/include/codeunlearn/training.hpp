#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "codeunlearn/corpus.hpp"
#include "codeunlearn/model.hpp"
#include "codeunlearn/tensor.hpp"

namespace cu {

struct TrainConfig {
  double lambda_l1 = 1e-6;
  double lr = 2e-3;
  std::size_t batch_size = 32;
  std::size_t epochs = 20;
  std::uint64_t seed = 1;
  std::optional<double> grad_clip;

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double l_mse = 0.0;
  double l1 = 0.0;
  double l_ce = 0.0;
  double l_joint = 0.0;
  double val_acc = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;  // 0 = initialization
  double best_val_acc = 0.0;

  std::string to_csv() const;
};

class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, std::size_t last_good_epoch)
      : Error(ErrorKind::Training, what), last_good_epoch_(last_good_epoch) {}
  std::size_t last_good_epoch() const { return last_good_epoch_; }

 private:
  std::size_t last_good_epoch_;
};

// Mean squared reconstruction error over the rows selected by `row_mask`
// plus lambda * L1 of every selected code (each code counted once).
Var codebook_loss(Var a, Var a_hat, std::span<const std::uint8_t> row_mask, Var codes,
                  const std::vector<std::vector<int>>& omega, double lambda);

// Unweighted sum of the two losses; throws NumericError on non-finite input.
Var joint_loss(Var ce, Var codebook);
double joint_loss(double ce, double codebook);

struct StepLosses {
  double l_mse = 0.0;
  double l1 = 0.0;
  double l_ce = 0.0;
  double l_joint = 0.0;
};

// Builds the full joint loss on `g` for one batch. Labels use pad -> ignored.
struct JointLossVars {
  Var mse;
  Var l1;
  Var ce;
  Var joint;
};
JointLossVars build_joint_loss(Graph& g, Seq2SeqModel& model, const SequenceBatch& batch, double lambda,
                               const EncodeOptions& opt = {});

// Teacher-forced argmax accuracy over all non-pad target positions (eos included).
double teacher_forced_accuracy(Seq2SeqModel& model, const std::vector<Sentence>& data,
                               BottleneckMode mode = BottleneckMode::Active, std::size_t batch_size = 64);

using EpochCallback = std::function<void(const EpochRecord&)>;

// Adam on the joint loss with teacher forcing. Leaves the model at the
// best-validation epoch (or untouched when epochs == 0).
TrainLog train(Seq2SeqModel& model, const Corpus& corpus, const TrainConfig& cfg,
               const EpochCallback& on_epoch = {});

}  // namespace cu
