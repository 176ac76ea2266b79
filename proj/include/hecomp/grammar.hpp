#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "hecomp/rng.hpp"

namespace hecomp {

using TokenId = int;
using Tokens = std::vector<TokenId>;

enum class TokenKind { Special, Primitive, Modifier, Connector, Noise };

struct Modifier {
  std::string surface;
  int count = 2;
};

// Token inventory. Ids are dense: specials first (PAD=0, BOS=1, SEP=2, EOS=3),
// then primitives, modifiers, connectors and noise tokens in list order.
class VocabSpec {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kSep = 2;
  static constexpr TokenId kEos = 3;
  static constexpr int kNumSpecial = 4;

  VocabSpec(std::vector<std::string> primitives, std::vector<Modifier> modifiers,
            std::vector<std::string> connectors, std::vector<std::string> noise_tokens);

  // walk/jump/look/turn, twice/thrice, then, and 15 noise tokens.
  static VocabSpec standard();

  int size() const { return static_cast<int>(surfaces_.size()); }
  int num_primitives() const { return static_cast<int>(primitives_.size()); }
  int num_modifiers() const { return static_cast<int>(modifiers_.size()); }
  int num_connectors() const { return static_cast<int>(connectors_.size()); }
  int num_noise() const { return static_cast<int>(noise_.size()); }

  TokenId primitive_token(int id) const;
  TokenId modifier_token(int id) const;
  TokenId connector_token(int id) const;
  TokenId noise_token(int id) const;

  TokenKind kind(TokenId t) const;
  // Index within the token's own list (primitive id, modifier id, ...).
  int local_id(TokenId t) const;
  int modifier_count(int modifier_id) const;
  const std::string& modifier_name(int modifier_id) const { return modifiers_.at(modifier_id).surface; }
  const std::string& connector_name(int connector_id) const { return connectors_.at(connector_id); }

  const std::string& surface(TokenId t) const;
  std::optional<TokenId> lookup(std::string_view surface) const;

  // Surface string -> id, as written to the vocabulary file.
  std::map<std::string, TokenId> to_map() const;

 private:
  std::vector<std::string> primitives_;
  std::vector<Modifier> modifiers_;
  std::vector<std::string> connectors_;
  std::vector<std::string> noise_;
  std::vector<std::string> surfaces_;
};

// e ::= p | m(e) | e c e
struct Expression {
  enum class Kind { Prim, Mod, Seq };

  Kind kind = Kind::Prim;
  int id = 0;  // primitive, modifier or connector id depending on kind
  std::vector<Expression> children;

  static Expression prim(int primitive_id);
  static Expression mod(int modifier_id, Expression child);
  static Expression seq(Expression left, int connector_id, Expression right);

  int primitive_count() const;

  friend bool operator==(const Expression&, const Expression&) = default;
};

// Semantics: output tokens (primitive token ids), without EOS.
Tokens interpret(const Expression& e, const VocabSpec& vocab);

// Surface order: primitive before its modifier, infix connectors.
Tokens linearize(const Expression& e, const VocabSpec& vocab);

// Inverse of linearize for left-folded expressions with modifiers on primitives.
Expression parse(const Tokens& clean, const VocabSpec& vocab);

struct NoisyTokens {
  Tokens tokens;
  std::vector<int> noise_positions;
};

NoisyTokens inject_noise(const Tokens& clean, int num_noise, const VocabSpec& vocab, Rng& rng);

// k primitives, each wrapped by a random modifier with probability p_mod,
// left-folded on a random connector.
Expression sample_expression(int k, double p_mod, Rng& rng, const VocabSpec& vocab);

struct Example {
  Tokens input_tokens;   // BOS + (noisy) linearization + SEP
  Tokens output_tokens;  // semantics + EOS
  Expression expression;
  std::vector<int> noise_positions;  // indices into input_tokens

  // input_tokens ++ output_tokens, the causal LM training sequence.
  Tokens full_sequence() const;
};

Example make_example(const Expression& e, int num_noise, const VocabSpec& vocab, Rng& rng);

struct DatasetSpec {
  int max_primitives = 2;
  int num_noise = 0;
  double modifier_probability = 0.5;
  int train_size_cap = 2000;
  double val_fraction = 0.1;
  std::uint64_t seed = 0;

  void validate(const VocabSpec& vocab) const;
};

struct Dataset {
  std::vector<Example> train;
  std::vector<Example> val;
};

// Number of distinct sampler outputs with exactly k primitives.
double expression_space_size(int k, const VocabSpec& vocab);

Dataset build_dataset(const DatasetSpec& spec, const VocabSpec& vocab);

struct OodSuite {
  std::map<int, std::vector<Example>> by_k;
};

constexpr int kOodMinK = 5;
constexpr int kOodMaxK = 12;
constexpr int kOodPerK = 200;

OodSuite build_ood_suite(const VocabSpec& vocab, Rng& rng, double p_mod = 0.5,
                         int per_k = kOodPerK);

// One JSON object per line: {"input": [...], "output": [...], "k": n, "noise_positions": [...]}.
void write_examples_jsonl(std::ostream& out, const std::vector<Example>& examples,
                          const VocabSpec& vocab);
void write_vocab_json(std::ostream& out, const VocabSpec& vocab);

// Stable content hash over token sequences, used for run provenance.
std::uint64_t dataset_hash(const Dataset& ds);

}  // namespace hecomp
