#include "hecomp/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "hecomp/error.hpp"
#include "hecomp/rng.hpp"

namespace hecomp {

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (early_stop_patience < 1) throw ConfigError("early_stop_patience must be >= 1");
  if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  if (!(lr > 0.0f)) throw ConfigError("lr must be positive");
  if (!(beta1 >= 0.0f && beta1 < 1.0f && beta2 >= 0.0f && beta2 < 1.0f)) throw ConfigError("Adam betas must lie in [0, 1)");
}

SupervisedSequence supervise(const Example& ex) {
  SupervisedSequence s;
  s.tokens = ex.full_sequence();
  const int n = static_cast<int>(s.tokens.size());
  const int first_output = static_cast<int>(ex.input_tokens.size());
  s.targets.assign(n, VocabSpec::kPad);
  s.mask.assign(n, 0.0f);
  for (int t = 0; t + 1 < n; ++t) {
    s.targets[t] = s.tokens[t + 1];
    if (t + 1 >= first_output) s.mask[t] = 1.0f;
  }
  return s;
}

CeBatch make_ce_batch(std::span<const Example* const> examples) {
  std::vector<SupervisedSequence> sup;
  std::vector<Tokens> seqs;
  sup.reserve(examples.size());
  for (const Example* ex : examples) {
    sup.push_back(supervise(*ex));
    seqs.push_back(sup.back().tokens);
  }
  CeBatch b;
  b.tokens = TokenBatch::from(seqs);
  const std::size_t n = std::size_t(b.tokens.batch) * b.tokens.length;
  b.targets.assign(n, VocabSpec::kPad);
  b.mask.assign(n, 0.0f);
  for (std::size_t i = 0; i < sup.size(); ++i) {
    const std::size_t off = i * b.tokens.length;
    std::copy(sup[i].targets.begin(), sup[i].targets.end(), b.targets.begin() + off);
    std::copy(sup[i].mask.begin(), sup[i].mask.end(), b.mask.begin() + off);
  }
  return b;
}

double evaluate_loss(const ModelParams& params, std::span<const Example> examples, int batch_size) {
  double total = 0.0, count = 0.0;
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    const std::size_t end = std::min(examples.size(), start + batch_size);
    std::vector<const Example*> ptrs;
    for (std::size_t i = start; i < end; ++i) ptrs.push_back(&examples[i]);
    CeBatch b = make_ce_batch(ptrs);
    Tape tape;
    TapeForward f = forward_on_tape(tape, params, b.tokens, false);
    const double n = std::accumulate(b.mask.begin(), b.mask.end(), 0.0);
    total += n * cross_entropy_with_mask(f.logits, b.targets, b.mask).value().item();
    count += n;
  }
  return count > 0.0 ? total / count : 0.0;
}

TrainResult train(const ModelParams& init, const Dataset& data, const TrainConfig& cfg, AuxiliaryObjective* aux) {
  cfg.validate();
  if (data.train.empty()) throw ConfigError("training set is empty");
  for (const auto* split : {&data.train, &data.val}) {
    for (const auto& ex : *split) {
      if (static_cast<int>(ex.full_sequence().size()) > init.config.max_len) {
        throw ConfigError("example longer than max_len");
      }
    }
  }

  ModelParams current = init;
  std::vector<Tensor*> model_ptrs;
  for (auto& [name, t] : current.tensors) model_ptrs.push_back(&t);
  const std::vector<Tensor> init_values = current.values();
  AdamState model_state = make_adam_state(init_values);
  AdamState aux_state;
  if (aux) aux_state = make_adam_state(aux->parameters());
  const AdamConfig adam = cfg.adam();

  Rng order_rng(derive_seed(cfg.seed, "order"));
  std::vector<int> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);

  TrainResult result{current, {}};
  TrainHistory& hist = result.history;
  double best = std::numeric_limits<double>::infinity();
  double best_for_patience = best;
  int bad_epochs = 0;
  long step = 0;

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    order_rng.shuffle(order);
    double loss_sum = 0.0, token_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<const Example*> batch_examples;
      for (std::size_t i = start; i < end; ++i) batch_examples.push_back(&data.train[order[i]]);
      CeBatch batch = make_ce_batch(batch_examples);

      std::vector<Tensor> model_grads, aux_grads;
      double ce_value = 0.0, total_value = 0.0;
      try {
        Tape tape;
        std::vector<Var> mvars, avars;
        for (Tensor* t : model_ptrs) mvars.push_back(tape.leaf(*t, true));
        if (aux) {
          for (const Tensor& t : aux->parameters()) avars.push_back(tape.leaf(t, true));
        }
        TapeForward fwd = forward_on_tape(tape, current, mvars, batch.tokens);
        Var ce = cross_entropy_with_mask(fwd.logits, batch.targets, batch.mask);
        Var total = ce;
        if (aux) total = add(ce, aux->build(tape, current, mvars, avars, step));
        ce_value = ce.value().item();
        total_value = total.value().item();
        tape.backward(total);
        for (Var v : mvars) model_grads.push_back(tape.grad(v));
        for (Var v : avars) aux_grads.push_back(tape.grad(v));
      } catch (const NumericError& e) {
        throw TrainingDiverged(std::string("training diverged: ") + e.what(), epoch, step);
      }

      adam_step(model_ptrs, model_grads, model_state, adam);
      if (aux) adam_step(std::span<Tensor>(aux->parameters()), aux_grads, aux_state, adam);
      if (aux) aux->after_step(step, ce_value, total_value);
      ++step;

      const double n = std::accumulate(batch.mask.begin(), batch.mask.end(), 0.0);
      loss_sum += ce_value * n;
      token_sum += n;
    }

    double val;
    try {
      val = data.val.empty() ? loss_sum / token_sum : evaluate_loss(current, data.val, cfg.batch_size);
    } catch (const NumericError& e) {
      throw TrainingDiverged(std::string("validation diverged: ") + e.what(), epoch, step);
    }
    if (!std::isfinite(val)) throw TrainingDiverged("non-finite validation loss", epoch, step);
    hist.train_loss.push_back(loss_sum / token_sum);
    hist.val_loss.push_back(val);

    if (val < best) {
      best = val;
      hist.best_epoch = epoch;
      hist.best_val_loss = val;
      result.params = current;
    }
    if (val < best_for_patience - cfg.early_stop_min_delta) {
      best_for_patience = val;
      bad_epochs = 0;
    } else if (++bad_epochs >= cfg.early_stop_patience) {
      hist.stopped_early = epoch + 1 < cfg.max_epochs;
      break;
    }
  }
  return result;
}

void write_history_csv(const std::string& path, const TrainHistory& h) {
  std::ofstream out(path);
  if (!out) throw StructuralError("cannot open " + path);
  out << "epoch,train_loss,val_loss\n";
  out.precision(9);
  for (std::size_t i = 0; i < h.train_loss.size(); ++i) {
    out << i + 1 << ',' << h.train_loss[i] << ',' << h.val_loss[i] << '\n';
  }
}

}  // namespace hecomp
