#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hecomp/error.hpp"
#include "hecomp/grammar.hpp"
#include "hecomp/model.hpp"
#include "hecomp/tensor.hpp"

namespace hecomp {

struct TrainConfig {
  float lr = 1e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.98f;
  float eps = 1e-8f;
  int batch_size = 64;
  int max_epochs = 50;
  int early_stop_patience = 5;
  double early_stop_min_delta = 1e-4;
  std::uint64_t seed = 0;

  void validate() const;
  AdamConfig adam() const { return {lr, beta1, beta2, eps}; }
};

struct TrainHistory {
  std::vector<double> train_loss;
  std::vector<double> val_loss;
  int best_epoch = -1;  // 0-based index into the vectors
  double best_val_loss = 0.0;
  bool stopped_early = false;
};

// Thrown when a loss or update goes non-finite.
class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(const std::string& what, int epoch, long step)
      : NumericError(what), epoch(epoch), step(step) {}
  int epoch;
  long step;
};

// Supervised next-token targets for one example: the positions whose target
// lies in the output segment (after SEP, through EOS).
struct SupervisedSequence {
  Tokens tokens;
  std::vector<int> targets;   // next token per position (PAD at the end)
  std::vector<float> mask;    // 1 where the target is an output token
};

SupervisedSequence supervise(const Example& ex);

struct CeBatch {
  TokenBatch tokens;
  std::vector<int> targets;
  std::vector<float> mask;
};

CeBatch make_ce_batch(std::span<const Example* const> examples);

// Token-weighted mean CE over the output segments, without gradients.
double evaluate_loss(const ModelParams& params, std::span<const Example> examples, int batch_size = 64);

// Extra objective added to the CE loss each step (HE regularization).
class AuxiliaryObjective {
 public:
  virtual ~AuxiliaryObjective() = default;
  // Operator parameters trained jointly with the model.
  virtual std::vector<Tensor>& parameters() = 0;
  // Records the weighted auxiliary term on the tape. `model_vars` are the
  // model's parameter leaves; `aux_vars` the leaves for parameters().
  virtual Var build(Tape& tape, const ModelParams& params, std::span<const Var> model_vars,
                    std::span<const Var> aux_vars, long step) = 0;
  // Called after each step with the CE value and the total loss.
  virtual void after_step(long /*step*/, double /*ce*/, double /*total*/) {}
};

struct TrainResult {
  ModelParams params;  // best-epoch parameters
  TrainHistory history;
};

// Teacher-forced causal-LM training with Adam and early stopping on
// validation CE. With an auxiliary objective, its parameters are updated by
// the same Adam instance.
TrainResult train(const ModelParams& init, const Dataset& data, const TrainConfig& cfg,
                  AuxiliaryObjective* aux = nullptr);

void write_history_csv(const std::string& path, const TrainHistory& h);

}  // namespace hecomp
