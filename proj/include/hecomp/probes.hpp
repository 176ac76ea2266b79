#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hecomp/grammar.hpp"
#include "hecomp/model.hpp"

namespace hecomp {

enum class TripleKind { Modifier, Sequence };
const char* kind_name(TripleKind k);

struct ProbeTriple {
  TripleKind kind = TripleKind::Modifier;
  int layer = 0;  // 1-based block index
  int tag = 0;    // modifier or connector local id
  std::vector<float> left, right, combined;
};

// Hidden states of each prompt (input tokens only): states[i][l] is
// [len_i, d] after block l + 1.
using PromptStates = std::vector<std::vector<Tensor>>;
PromptStates prompt_hidden_states(const ModelParams& params, std::span<const Example> examples,
                                  int batch_size = 64);

// Triples from one prompt's hidden states at one layer. Noise tokens are
// skipped when looking for adjacency and never pooled.
std::vector<ProbeTriple> mine_modifier_triples(const Example& ex, const Tensor& hidden, int layer,
                                               const VocabSpec& vocab);
std::vector<ProbeTriple> mine_sequence_triples(const Example& ex, const Tensor& hidden, int layer,
                                               const VocabSpec& vocab);

std::vector<ProbeTriple> mine_modifier_triples(const ModelParams& params, std::span<const Example> examples,
                                               int layer, const VocabSpec& vocab);
std::vector<ProbeTriple> mine_sequence_triples(const ModelParams& params, std::span<const Example> examples,
                                               int layer, const VocabSpec& vocab);

enum class OperatorFamily { Linear, Bilinear, Mlp };
const char* family_name(OperatorFamily f);
inline constexpr OperatorFamily kAllFamilies[] = {OperatorFamily::Linear, OperatorFamily::Bilinear,
                                                  OperatorFamily::Mlp};

struct ProbeConfig {
  double ridge = 1e-6;
  int mlp_hidden = 128;
  int mlp_steps = 500;
  float mlp_lr = 1e-3f;
  // Stop after this many Adam steps without a new best training loss.
  int mlp_patience = 50;
  std::uint64_t seed = 0;
  // 0: MSE on the fitting triples. k >= 2: k-fold held-out MSE (capped at the
  // triple count).
  int folds = 5;
  // Modifier operators read the primitive state only; the modifier state is
  // still part of the combined target.
  bool unary_modifier = true;
  // Deterministic subsample per (layer, kind, tag); 0 keeps everything.
  int max_triples = 256;

  void validate() const;
};

// Inputs, targets and operator arity of one probe problem.
struct ProbeProblem {
  std::vector<std::vector<float>> inputs_left;
  std::vector<std::vector<float>> inputs_right;  // empty for unary operators
  std::vector<std::vector<float>> targets;

  std::size_t size() const { return targets.size(); }
  bool binary() const { return !inputs_right.empty(); }
};

ProbeProblem make_problem(std::span<const ProbeTriple> triples, bool unary);

class FittedOperator {
 public:
  virtual ~FittedOperator() = default;
  // Predicted combined vectors for the given inputs (same layout as the
  // problem the operator was fitted on).
  virtual std::vector<std::vector<float>> predict(const std::vector<std::vector<float>>& left,
                                                  const std::vector<std::vector<float>>& right) const = 0;
};

struct FitOutcome {
  std::shared_ptr<FittedOperator> op;  // fitted on the whole problem
  double mse = 0.0;                    // per-element MSE (held out when folds >= 2)
  double train_mse = 0.0;              // per-element MSE of `op` on the whole problem
};

// Throws StatisticalError on an empty problem.
FitOutcome fit_operator(const ProbeProblem& problem, OperatorFamily family, const ProbeConfig& cfg);
FitOutcome fit_operator(std::span<const ProbeTriple> triples, OperatorFamily family, const ProbeConfig& cfg);

struct FamilyScores {
  std::optional<double> linear, bilinear, mlp;
  std::optional<double> mean;
  int triples = 0;
};

struct HEReport {
  std::map<int, std::map<TripleKind, FamilyScores>> layers;
  std::optional<double> he_mod_mean;
  std::optional<double> he_seq_mean;
  // (layer, kind) cells where the MLP scored worse than the linear operator.
  std::vector<std::string> diagnostics;
};

// Probes every block of the model on the given (training) examples.
HEReport compute_he_report(const ModelParams& params, std::span<const Example> examples, const VocabSpec& vocab,
                           const ProbeConfig& cfg);

std::string he_report_json(const HEReport& r);

}  // namespace hecomp
