#include "hecomp/hereg.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>

#include "hecomp/error.hpp"

namespace hecomp {

void RegConfig::validate(int n_layers) const {
  if (!(lambda >= 0.0f)) throw ConfigError("lambda must be >= 0");
  if (reg_layers.empty()) throw ConfigError("reg_layers must not be empty");
  for (int l : reg_layers) {
    if (l < 1 || l > n_layers) {
      throw ConfigError("reg layer " + std::to_string(l) + " outside 1.." + std::to_string(n_layers));
    }
  }
  if (std::set<int>(reg_layers.begin(), reg_layers.end()).size() != reg_layers.size()) {
    throw ConfigError("reg_layers has duplicates");
  }
  if (he_batch_size < 1) throw ConfigError("he_batch_size must be >= 1");
  if (mlp_hidden < 1) throw ConfigError("mlp_hidden must be >= 1");
}

ModifierPool mine_modifier_pool(std::span<const Example> train, const VocabSpec& vocab) {
  ModifierPool pool;
  for (std::size_t e = 0; e < train.size(); ++e) {
    const Tokens& toks = train[e].input_tokens;
    for (std::size_t i = 0; i < toks.size(); ++i) {
      if (vocab.kind(toks[i]) != TokenKind::Primitive) continue;
      std::size_t j = i + 1;
      while (j < toks.size() && vocab.kind(toks[j]) == TokenKind::Noise) ++j;
      if (j < toks.size() && vocab.kind(toks[j]) == TokenKind::Modifier) {
        pool.items.push_back({static_cast<int>(e), static_cast<int>(i), static_cast<int>(j), vocab.local_id(toks[j])});
      }
    }
  }
  return pool;
}

Var he_mod_loss(Var hidden, std::span<const int> e_rows, std::span<const int> m_rows, std::span<const int> modifier,
                std::span<const OperatorVars> ops) {
  Tape& tape = *hidden.tape;
  if (e_rows.size() != m_rows.size() || e_rows.size() != modifier.size()) {
    throw StructuralError("he_mod_loss: item arrays differ in length");
  }
  if (e_rows.empty()) return tape.constant(Tensor({}, 0.0f));
  for (int m : modifier) {
    if (m < 0 || m >= static_cast<int>(ops.size())) throw StructuralError("he_mod_loss: modifier id out of range");
  }
  Var total;
  bool first = true;
  for (std::size_t m = 0; m < ops.size(); ++m) {
    std::vector<int> er, mr;
    for (std::size_t i = 0; i < modifier.size(); ++i) {
      if (modifier[i] == static_cast<int>(m)) {
        er.push_back(e_rows[i]);
        mr.push_back(m_rows[i]);
      }
    }
    if (er.empty()) continue;
    const Var he = gather_rows(hidden, er);
    const Var hm = gather_rows(hidden, mr);
    const Var both[] = {he, hm};
    const Var hid = relu(linear(concat(both), ops[m].w1, ops[m].b1));
    const Var pred = linear(hid, ops[m].w2, ops[m].b2);
    const Var diff = sub(pred, scale(add(he, hm), 0.5f));
    const Var sq = sum_all(multiply(diff, diff));
    total = first ? sq : add(total, sq);
    first = false;
  }
  return scale(total, 1.0f / static_cast<float>(e_rows.size()));
}

HeRegularizer::HeRegularizer(const Dataset& data, const VocabSpec& vocab, const ModelConfig& model,
                             const RegConfig& cfg, std::uint64_t seed)
    : data_(data), cfg_(cfg), num_modifiers_(vocab.num_modifiers()), rng_(derive_seed(seed, "he-batch")) {
  cfg_.validate(model.n_layers);
  pool_ = mine_modifier_pool(data.train, vocab);
  order_.resize(pool_.items.size());
  std::iota(order_.begin(), order_.end(), 0);
  if (pool_.items.empty()) warnings_.push_back("modifier pool is empty; the HE term is 0");
  history_.layers = cfg_.reg_layers;

  Rng init(derive_seed(seed, "he-operators"));
  const int d = model.d_model, h = cfg_.mlp_hidden;
  auto normal = [&](std::vector<int> shape) {
    Tensor t(std::move(shape));
    for (float& x : t.data) x = static_cast<float>(0.02 * init.normal());
    return t;
  };
  for (int m = 0; m < num_modifiers_; ++m) {
    params_.push_back(normal({2 * d, h}));
    params_.push_back(Tensor({h}, 0.0f));
    params_.push_back(normal({h, d}));
    params_.push_back(Tensor({d}, 0.0f));
  }
}

Var HeRegularizer::build(Tape& tape, const ModelParams& params, std::span<const Var> model_vars,
                         std::span<const Var> aux_vars, long /*step*/) {
  last_he_.assign(cfg_.reg_layers.size(), 0.0);
  if (pool_.items.empty()) return tape.constant(Tensor({}, 0.0f));

  // Batch without replacement (the whole pool when it is smaller).
  const std::size_t b = std::min<std::size_t>(cfg_.he_batch_size, order_.size());
  for (std::size_t i = 0; i < b; ++i) {
    std::swap(order_[i], order_[i + rng_.uniform_index(order_.size() - i)]);
  }
  std::vector<int> slot_of(data_.train.size(), -1);
  std::vector<Tokens> prompts;
  for (std::size_t i = 0; i < b; ++i) {
    const PoolItem& it = pool_.items[order_[i]];
    if (slot_of[it.example] < 0) {
      slot_of[it.example] = static_cast<int>(prompts.size());
      prompts.push_back(data_.train[it.example].input_tokens);
    }
  }
  const TokenBatch batch = TokenBatch::from(prompts);
  std::vector<int> e_rows, m_rows, mods;
  for (std::size_t i = 0; i < b; ++i) {
    const PoolItem& it = pool_.items[order_[i]];
    const int base = slot_of[it.example] * batch.length;
    e_rows.push_back(base + it.primitive_pos);
    m_rows.push_back(base + it.modifier_pos);
    mods.push_back(it.modifier);
  }

  const int top = *std::max_element(cfg_.reg_layers.begin(), cfg_.reg_layers.end());
  const TapeForward fwd = forward_on_tape(tape, params, model_vars, batch, top);
  std::vector<OperatorVars> ops;
  for (int m = 0; m < num_modifiers_; ++m) {
    ops.push_back({aux_vars[4 * m], aux_vars[4 * m + 1], aux_vars[4 * m + 2], aux_vars[4 * m + 3]});
  }
  Var sum;
  for (std::size_t j = 0; j < cfg_.reg_layers.size(); ++j) {
    const Var he = he_mod_loss(fwd.hidden[cfg_.reg_layers[j] - 1], e_rows, m_rows, mods, ops);
    last_he_[j] = he.value().item();
    sum = j == 0 ? he : add(sum, he);
  }
  return scale(sum, cfg_.lambda / static_cast<float>(cfg_.reg_layers.size()));
}

void HeRegularizer::after_step(long step, double ce, double total) {
  history_.step.push_back(step);
  history_.ce.push_back(ce);
  history_.he.push_back(last_he_);
  history_.total.push_back(total);
}

RegTrainResult train_regularized(const ModelParams& init, const Dataset& data, const TrainConfig& train_cfg,
                                 const RegConfig& reg_cfg, const VocabSpec& vocab) {
  HeRegularizer reg(data, vocab, init.config, reg_cfg, train_cfg.seed);
  TrainResult r = train(init, data, train_cfg, &reg);
  return {std::move(r.params), std::move(r.history), reg.history(), reg.warnings()};
}

void write_reg_history_csv(const std::string& path, const RegHistory& h) {
  std::ofstream out(path);
  if (!out) throw StructuralError("cannot open " + path);
  out << "step,ce_loss";
  for (int l : h.layers) out << ",he_loss_layer" << l;
  out << ",total\n";
  out.precision(9);
  for (std::size_t i = 0; i < h.step.size(); ++i) {
    out << h.step[i] << ',' << h.ce[i];
    for (double v : h.he[i]) out << ',' << v;
    out << ',' << h.total[i] << '\n';
  }
}

}  // namespace hecomp
