#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "hecomp/grammar.hpp"
#include "hecomp/model.hpp"
#include "hecomp/rng.hpp"
#include "hecomp/tensor.hpp"
#include "hecomp/trainer.hpp"

namespace hecomp {

struct RegConfig {
  float lambda = 0.1f;
  std::vector<int> reg_layers{2, 4};
  int he_batch_size = 32;
  int mlp_hidden = 128;

  void validate(int n_layers) const;
};

struct PoolItem {
  int example = 0;  // index into the training split
  int primitive_pos = 0;
  int modifier_pos = 0;
  int modifier = 0;  // modifier local id
};

struct ModifierPool {
  std::vector<PoolItem> items;
};

// Every primitive immediately followed by a modifier (noise skipped) in the
// training split.
ModifierPool mine_modifier_pool(std::span<const Example> train, const VocabSpec& vocab);

// Weights of one in-training operator MLP_m([h_e; h_m]).
struct OperatorVars {
  Var w1, b1, w2, b2;
};

// Mean over items of ||MLP_m([h_e; h_m]) - (h_e + h_m) / 2||^2. `hidden` is
// [rows, d]; item i reads rows e_rows[i] and m_rows[i] and uses operator
// ops[modifier[i]]. Empty input gives a constant 0.
Var he_mod_loss(Var hidden, std::span<const int> e_rows, std::span<const int> m_rows,
                std::span<const int> modifier, std::span<const OperatorVars> ops);

struct RegHistory {
  std::vector<int> layers;
  std::vector<long> step;
  std::vector<double> ce;
  std::vector<std::vector<double>> he;  // he[i][j]: step i, layers[j]
  std::vector<double> total;
};

class HeRegularizer : public AuxiliaryObjective {
 public:
  HeRegularizer(const Dataset& data, const VocabSpec& vocab, const ModelConfig& model, const RegConfig& cfg,
                std::uint64_t seed);

  std::vector<Tensor>& parameters() override { return params_; }
  Var build(Tape& tape, const ModelParams& params, std::span<const Var> model_vars,
            std::span<const Var> aux_vars, long step) override;
  void after_step(long step, double ce, double total) override;

  const ModifierPool& pool() const { return pool_; }
  const RegHistory& history() const { return history_; }
  const std::vector<std::string>& warnings() const { return warnings_; }

 private:
  const Dataset& data_;
  RegConfig cfg_;
  int num_modifiers_;
  ModifierPool pool_;
  std::vector<int> order_;
  Rng rng_;
  std::vector<Tensor> params_;  // per modifier: w1, b1, w2, b2
  std::vector<double> last_he_;
  RegHistory history_;
  std::vector<std::string> warnings_;
};

struct RegTrainResult {
  ModelParams params;
  TrainHistory history;
  RegHistory reg;
  std::vector<std::string> warnings;
};

RegTrainResult train_regularized(const ModelParams& init, const Dataset& data, const TrainConfig& train_cfg,
                                 const RegConfig& reg_cfg, const VocabSpec& vocab);

void write_reg_history_csv(const std::string& path, const RegHistory& h);

}  // namespace hecomp
