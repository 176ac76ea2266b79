#include "hecomp/grammar.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <ostream>
#include <set>
#include <unordered_set>

#include <json.hpp>

#include "hecomp/error.hpp"

namespace hecomp {

VocabSpec::VocabSpec(std::vector<std::string> primitives, std::vector<Modifier> modifiers,
                     std::vector<std::string> connectors, std::vector<std::string> noise_tokens)
    : primitives_(std::move(primitives)),
      modifiers_(std::move(modifiers)),
      connectors_(std::move(connectors)),
      noise_(std::move(noise_tokens)) {
  if (primitives_.empty()) throw ConfigError("vocabulary needs at least one primitive");
  if (connectors_.empty()) throw ConfigError("vocabulary needs at least one connector");
  surfaces_ = {"<pad>", "<bos>", "<sep>", "<eos>"};
  for (const auto& p : primitives_) surfaces_.push_back(p);
  for (const auto& m : modifiers_) {
    if (m.count < 2) throw ConfigError("modifier '" + m.surface + "' must repeat at least twice");
    surfaces_.push_back(m.surface);
  }
  for (const auto& c : connectors_) surfaces_.push_back(c);
  for (const auto& n : noise_) surfaces_.push_back(n);
  std::set<std::string> seen;
  for (const auto& s : surfaces_) {
    if (!seen.insert(s).second) throw ConfigError("duplicate surface string '" + s + "'");
  }
}

VocabSpec VocabSpec::standard() {
  return VocabSpec({"walk", "jump", "look", "turn"}, {{"twice", 2}, {"thrice", 3}}, {"then"},
                   {"foo", "bar", "baz", "qux", "quux", "corge", "grault", "garply", "waldo",
                    "fred", "plugh", "xyzzy", "thud", "zot", "blarg"});
}

TokenId VocabSpec::primitive_token(int id) const {
  if (id < 0 || id >= num_primitives()) throw StructuralError("unknown primitive id");
  return kNumSpecial + id;
}

TokenId VocabSpec::modifier_token(int id) const {
  if (id < 0 || id >= num_modifiers()) throw StructuralError("unknown modifier id");
  return kNumSpecial + num_primitives() + id;
}

TokenId VocabSpec::connector_token(int id) const {
  if (id < 0 || id >= num_connectors()) throw StructuralError("unknown connector id");
  return kNumSpecial + num_primitives() + num_modifiers() + id;
}

TokenId VocabSpec::noise_token(int id) const {
  if (id < 0 || id >= num_noise()) throw StructuralError("unknown noise id");
  return kNumSpecial + num_primitives() + num_modifiers() + num_connectors() + id;
}

TokenKind VocabSpec::kind(TokenId t) const {
  if (t < 0 || t >= size()) throw StructuralError("token id out of range");
  int off = t;
  if (off < kNumSpecial) return TokenKind::Special;
  off -= kNumSpecial;
  if (off < num_primitives()) return TokenKind::Primitive;
  off -= num_primitives();
  if (off < num_modifiers()) return TokenKind::Modifier;
  off -= num_modifiers();
  if (off < num_connectors()) return TokenKind::Connector;
  return TokenKind::Noise;
}

int VocabSpec::local_id(TokenId t) const {
  switch (kind(t)) {
    case TokenKind::Special: return t;
    case TokenKind::Primitive: return t - kNumSpecial;
    case TokenKind::Modifier: return t - kNumSpecial - num_primitives();
    case TokenKind::Connector: return t - kNumSpecial - num_primitives() - num_modifiers();
    case TokenKind::Noise:
      return t - kNumSpecial - num_primitives() - num_modifiers() - num_connectors();
  }
  return -1;
}

int VocabSpec::modifier_count(int modifier_id) const {
  if (modifier_id < 0 || modifier_id >= num_modifiers()) throw StructuralError("unknown modifier id");
  return modifiers_[modifier_id].count;
}

const std::string& VocabSpec::surface(TokenId t) const {
  if (t < 0 || t >= size()) throw StructuralError("token id out of range");
  return surfaces_[t];
}

std::optional<TokenId> VocabSpec::lookup(std::string_view s) const {
  for (int i = 0; i < size(); ++i) {
    if (surfaces_[i] == s) return i;
  }
  return std::nullopt;
}

std::map<std::string, TokenId> VocabSpec::to_map() const {
  std::map<std::string, TokenId> m;
  for (int i = 0; i < size(); ++i) m[surfaces_[i]] = i;
  return m;
}

Expression Expression::prim(int primitive_id) { return {Kind::Prim, primitive_id, {}}; }

Expression Expression::mod(int modifier_id, Expression child) {
  Expression e{Kind::Mod, modifier_id, {}};
  e.children.push_back(std::move(child));
  return e;
}

Expression Expression::seq(Expression left, int connector_id, Expression right) {
  Expression e{Kind::Seq, connector_id, {}};
  e.children.push_back(std::move(left));
  e.children.push_back(std::move(right));
  return e;
}

int Expression::primitive_count() const {
  switch (kind) {
    case Kind::Prim: return 1;
    case Kind::Mod: return children.at(0).primitive_count();
    case Kind::Seq: return children.at(0).primitive_count() + children.at(1).primitive_count();
  }
  return 0;
}

namespace {

void check_arity(const Expression& e) {
  const std::size_t want = e.kind == Expression::Kind::Prim ? 0 : e.kind == Expression::Kind::Mod ? 1 : 2;
  if (e.children.size() != want) throw StructuralError("malformed expression node");
}

void interpret_into(const Expression& e, const VocabSpec& vocab, Tokens& out) {
  check_arity(e);
  switch (e.kind) {
    case Expression::Kind::Prim:
      out.push_back(vocab.primitive_token(e.id));
      return;
    case Expression::Kind::Mod: {
      const int reps = vocab.modifier_count(e.id);
      Tokens inner;
      interpret_into(e.children[0], vocab, inner);
      for (int r = 0; r < reps; ++r) out.insert(out.end(), inner.begin(), inner.end());
      return;
    }
    case Expression::Kind::Seq:
      vocab.connector_token(e.id);
      interpret_into(e.children[0], vocab, out);
      interpret_into(e.children[1], vocab, out);
      return;
  }
}

void linearize_into(const Expression& e, const VocabSpec& vocab, Tokens& out) {
  check_arity(e);
  switch (e.kind) {
    case Expression::Kind::Prim:
      out.push_back(vocab.primitive_token(e.id));
      return;
    case Expression::Kind::Mod:
      linearize_into(e.children[0], vocab, out);
      out.push_back(vocab.modifier_token(e.id));
      return;
    case Expression::Kind::Seq:
      linearize_into(e.children[0], vocab, out);
      out.push_back(vocab.connector_token(e.id));
      linearize_into(e.children[1], vocab, out);
      return;
  }
}

}  // namespace

Tokens interpret(const Expression& e, const VocabSpec& vocab) {
  Tokens out;
  interpret_into(e, vocab, out);
  return out;
}

Tokens linearize(const Expression& e, const VocabSpec& vocab) {
  Tokens out;
  linearize_into(e, vocab, out);
  return out;
}

Expression parse(const Tokens& clean, const VocabSpec& vocab) {
  std::size_t i = 0;
  auto segment = [&]() {
    if (i >= clean.size() || vocab.kind(clean[i]) != TokenKind::Primitive) {
      throw StructuralError("expected a primitive at position " + std::to_string(i));
    }
    Expression e = Expression::prim(vocab.local_id(clean[i++]));
    while (i < clean.size() && vocab.kind(clean[i]) == TokenKind::Modifier) {
      e = Expression::mod(vocab.local_id(clean[i++]), std::move(e));
    }
    return e;
  };
  Expression acc = segment();
  while (i < clean.size()) {
    if (vocab.kind(clean[i]) != TokenKind::Connector) {
      throw StructuralError("expected a connector at position " + std::to_string(i));
    }
    const int c = vocab.local_id(clean[i++]);
    Expression rhs = segment();
    acc = Expression::seq(std::move(acc), c, std::move(rhs));
  }
  return acc;
}

NoisyTokens inject_noise(const Tokens& clean, int num_noise, const VocabSpec& vocab, Rng& rng) {
  if (num_noise < 0) throw ConfigError("num_noise must be non-negative");
  if (num_noise > vocab.num_noise()) {
    throw ConfigError("num_noise " + std::to_string(num_noise) + " exceeds noise vocabulary of " +
                      std::to_string(vocab.num_noise()));
  }
  // is_noise tracks which entries were inserted; each insertion picks a gap
  // uniformly among the current length + 1 gaps.
  std::vector<std::pair<TokenId, bool>> seq;
  seq.reserve(clean.size() + num_noise);
  for (TokenId t : clean) seq.emplace_back(t, false);
  for (int n = 0; n < num_noise; ++n) {
    const TokenId tok = vocab.noise_token(static_cast<int>(rng.uniform_index(vocab.num_noise())));
    const auto slot = static_cast<std::ptrdiff_t>(rng.uniform_index(seq.size() + 1));
    seq.insert(seq.begin() + slot, {tok, true});
  }
  NoisyTokens out;
  out.tokens.reserve(seq.size());
  for (std::size_t i = 0; i < seq.size(); ++i) {
    out.tokens.push_back(seq[i].first);
    if (seq[i].second) out.noise_positions.push_back(static_cast<int>(i));
  }
  return out;
}

Expression sample_expression(int k, double p_mod, Rng& rng, const VocabSpec& vocab) {
  if (k < 1) throw ConfigError("expression needs at least one primitive");
  auto leaf = [&]() {
    Expression e = Expression::prim(static_cast<int>(rng.uniform_index(vocab.num_primitives())));
    if (vocab.num_modifiers() > 0 && rng.bernoulli(p_mod)) {
      e = Expression::mod(static_cast<int>(rng.uniform_index(vocab.num_modifiers())), std::move(e));
    }
    return e;
  };
  Expression acc = leaf();
  for (int i = 1; i < k; ++i) {
    const int c = static_cast<int>(rng.uniform_index(vocab.num_connectors()));
    acc = Expression::seq(std::move(acc), c, leaf());
  }
  return acc;
}

Tokens Example::full_sequence() const {
  Tokens seq = input_tokens;
  seq.insert(seq.end(), output_tokens.begin(), output_tokens.end());
  return seq;
}

Example make_example(const Expression& e, int num_noise, const VocabSpec& vocab, Rng& rng) {
  NoisyTokens noisy = inject_noise(linearize(e, vocab), num_noise, vocab, rng);
  Example ex;
  ex.expression = e;
  ex.input_tokens.reserve(noisy.tokens.size() + 2);
  ex.input_tokens.push_back(VocabSpec::kBos);
  ex.input_tokens.insert(ex.input_tokens.end(), noisy.tokens.begin(), noisy.tokens.end());
  ex.input_tokens.push_back(VocabSpec::kSep);
  for (int p : noisy.noise_positions) ex.noise_positions.push_back(p + 1);
  ex.output_tokens = interpret(e, vocab);
  ex.output_tokens.push_back(VocabSpec::kEos);
  return ex;
}

void DatasetSpec::validate(const VocabSpec& vocab) const {
  if (max_primitives < 1) throw ConfigError("max_primitives must be >= 1");
  if (num_noise < 0 || num_noise > vocab.num_noise()) throw ConfigError("num_noise out of range");
  if (modifier_probability < 0.0 || modifier_probability > 1.0) {
    throw ConfigError("modifier_probability must lie in [0, 1]");
  }
  if (train_size_cap < 2) throw ConfigError("train_size_cap must be >= 2");
  if (!(val_fraction > 0.0 && val_fraction < 0.5)) throw ConfigError("val_fraction must lie in (0, 0.5)");
}

double expression_space_size(int k, const VocabSpec& vocab) {
  const double slot = vocab.num_primitives() * (1.0 + vocab.num_modifiers());
  return std::pow(slot, k) * std::pow(static_cast<double>(vocab.num_connectors()), k - 1);
}

namespace {

std::vector<Expression> slot_options(const VocabSpec& vocab) {
  std::vector<Expression> opts;
  for (int p = 0; p < vocab.num_primitives(); ++p) {
    opts.push_back(Expression::prim(p));
    for (int m = 0; m < vocab.num_modifiers(); ++m) opts.push_back(Expression::mod(m, Expression::prim(p)));
  }
  return opts;
}

void enumerate_k(int k, const VocabSpec& vocab, std::vector<Expression>& out) {
  const auto opts = slot_options(vocab);
  std::function<void(const Expression&, int)> rec = [&](const Expression& acc, int placed) {
    if (placed == k) {
      out.push_back(acc);
      return;
    }
    for (int c = 0; c < vocab.num_connectors(); ++c) {
      for (const auto& o : opts) rec(Expression::seq(acc, c, o), placed + 1);
    }
  };
  for (const auto& o : opts) rec(o, 1);
}

}  // namespace

Dataset build_dataset(const DatasetSpec& spec, const VocabSpec& vocab) {
  spec.validate(vocab);
  Rng expr_rng(derive_seed(spec.seed, "expressions"));
  Rng split_rng(derive_seed(spec.seed, "split"));
  Rng noise_rng(derive_seed(spec.seed, "noise"));

  double total = 0.0;
  for (int k = 1; k <= spec.max_primitives; ++k) total += expression_space_size(k, vocab);

  std::vector<Expression> exprs;
  if (total <= spec.train_size_cap) {
    for (int k = 1; k <= spec.max_primitives; ++k) enumerate_k(k, vocab, exprs);
  } else {
    std::set<Tokens> seen;
    std::vector<int> taken(spec.max_primitives + 1, 0);
    while (static_cast<int>(exprs.size()) < spec.train_size_cap) {
      std::vector<int> open;
      for (int k = 1; k <= spec.max_primitives; ++k) {
        if (taken[k] < expression_space_size(k, vocab)) open.push_back(k);
      }
      const int k = open[expr_rng.uniform_index(open.size())];
      Expression e = sample_expression(k, spec.modifier_probability, expr_rng, vocab);
      if (seen.insert(linearize(e, vocab)).second) {
        exprs.push_back(std::move(e));
        ++taken[k];
      }
    }
  }
  if (exprs.size() < 2) throw ConfigError("dataset too small to split");

  split_rng.shuffle(exprs);
  const int n = static_cast<int>(exprs.size());
  const int n_val = std::clamp(static_cast<int>(std::lround(spec.val_fraction * n)), 1, n - 1);

  Dataset ds;
  ds.val.reserve(n_val);
  ds.train.reserve(n - n_val);
  for (int i = 0; i < n; ++i) {
    Example ex = make_example(exprs[i], spec.num_noise, vocab, noise_rng);
    (i < n_val ? ds.val : ds.train).push_back(std::move(ex));
  }
  return ds;
}

OodSuite build_ood_suite(const VocabSpec& vocab, Rng& rng, double p_mod, int per_k) {
  OodSuite suite;
  Rng unused(0);
  for (int k = kOodMinK; k <= kOodMaxK; ++k) {
    std::set<Tokens> seen;
    auto& bucket = suite.by_k[k];
    while (static_cast<int>(bucket.size()) < per_k) {
      Expression e = sample_expression(k, p_mod, rng, vocab);
      if (!seen.insert(linearize(e, vocab)).second) continue;
      bucket.push_back(make_example(e, 0, vocab, unused));
    }
  }
  return suite;
}

void write_examples_jsonl(std::ostream& out, const std::vector<Example>& examples,
                          const VocabSpec& vocab) {
  for (const auto& ex : examples) {
    nlohmann::json j;
    auto& in = j["input"] = nlohmann::json::array();
    for (TokenId t : ex.input_tokens) in.push_back(vocab.surface(t));
    auto& o = j["output"] = nlohmann::json::array();
    for (TokenId t : ex.output_tokens) o.push_back(vocab.surface(t));
    j["k"] = ex.expression.primitive_count();
    j["noise_positions"] = ex.noise_positions;
    out << j.dump() << '\n';
  }
}

void write_vocab_json(std::ostream& out, const VocabSpec& vocab) {
  nlohmann::ordered_json j;
  for (int t = 0; t < vocab.size(); ++t) j[vocab.surface(t)] = t;
  out << j.dump(2) << '\n';
}

std::uint64_t dataset_hash(const Dataset& ds) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](const std::vector<Example>& xs, char tag) {
    h = fnv1a(std::string_view(&tag, 1), h);
    for (const auto& ex : xs) {
      for (TokenId t : ex.full_sequence()) {
        const auto v = static_cast<std::uint32_t>(t);
        h = fnv1a(std::string_view(reinterpret_cast<const char*>(&v), sizeof v), h);
      }
      h = fnv1a("|", h);
    }
  };
  mix(ds.train, 't');
  mix(ds.val, 'v');
  return h;
}

}  // namespace hecomp
