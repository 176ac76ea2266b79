#include <catch_amalgamated.hpp>

#include <json.hpp>
#include <set>
#include <sstream>

#include "hecomp/error.hpp"
#include "hecomp/grammar.hpp"

using namespace hecomp;

namespace {

const VocabSpec& vocab() {
  static const VocabSpec v = VocabSpec::standard();
  return v;
}

Tokens words(std::initializer_list<const char*> surfaces) {
  Tokens t;
  for (const char* s : surfaces) t.push_back(*vocab().lookup(s));
  return t;
}

// Every expression tree with exactly k primitives: all bracketings of the
// connectors, and at most one modifier on any node.
std::vector<Expression> all_trees(int k) {
  std::vector<Expression> bare;
  if (k == 1) {
    for (int p = 0; p < vocab().num_primitives(); ++p) bare.push_back(Expression::prim(p));
  } else {
    for (int left = 1; left < k; ++left) {
      for (const auto& l : all_trees(left)) {
        for (const auto& r : all_trees(k - left)) {
          for (int c = 0; c < vocab().num_connectors(); ++c) bare.push_back(Expression::seq(l, c, r));
        }
      }
    }
  }
  std::vector<Expression> out = bare;
  for (const auto& e : bare) {
    for (int m = 0; m < vocab().num_modifiers(); ++m) out.push_back(Expression::mod(m, e));
  }
  return out;
}

Tokens repeat(const Tokens& t, int times) {
  Tokens out;
  for (int i = 0; i < times; ++i) out.insert(out.end(), t.begin(), t.end());
  return out;
}

}  // namespace

TEST_CASE("standard vocabulary layout", "[grammar]") {
  const auto& v = vocab();
  CHECK(v.size() == 26);
  CHECK(v.surface(VocabSpec::kPad) == "<pad>");
  CHECK(*v.lookup("<bos>") == 1);
  CHECK(*v.lookup("<sep>") == 2);
  CHECK(*v.lookup("<eos>") == 3);
  CHECK(v.num_primitives() == 4);
  CHECK(v.num_modifiers() == 2);
  CHECK(v.num_connectors() == 1);
  CHECK(v.num_noise() == 15);
  CHECK(v.kind(4) == TokenKind::Primitive);
  CHECK(v.kind(7) == TokenKind::Primitive);
  CHECK(v.kind(8) == TokenKind::Modifier);
  CHECK(v.kind(10) == TokenKind::Connector);
  CHECK(v.kind(11) == TokenKind::Noise);
  CHECK(v.kind(25) == TokenKind::Noise);
  CHECK(v.modifier_count(*v.lookup("twice") - 8) == 2);
  CHECK(v.modifier_count(*v.lookup("thrice") - 8) == 3);
  CHECK_THROWS_AS(v.kind(26), StructuralError);

  std::stringstream out;
  write_vocab_json(out, v);
  const auto j = nlohmann::json::parse(out.str());
  CHECK(j.size() == 26);
  CHECK(j["<pad>"] == 0);
  CHECK(j["walk"] == 4);
}

TEST_CASE("hand-worked interpretations", "[grammar]") {
  const auto& v = vocab();
  const int walk = 0, jump = 1, twice = 0, thrice = 1;
  const Expression e1 = Expression::seq(Expression::mod(twice, Expression::prim(walk)), 0, Expression::prim(jump));
  CHECK(linearize(e1, v) == words({"walk", "twice", "then", "jump"}));
  CHECK(interpret(e1, v) == words({"walk", "walk", "jump"}));
  const Expression e2 = Expression::mod(thrice, Expression::prim(jump));
  CHECK(interpret(e2, v) == words({"jump", "jump", "jump"}));
}

TEST_CASE("sequence identity holds for every expression up to 3 primitives", "[grammar][property]") {
  const auto& v = vocab();
  std::vector<Expression> small;
  for (int k = 1; k <= 2; ++k) {
    auto t = all_trees(k);
    small.insert(small.end(), t.begin(), t.end());
  }
  long checked = 0;
  for (const auto& a : small) {
    for (const auto& b : small) {
      if (a.primitive_count() + b.primitive_count() > 3) continue;
      const Expression s = Expression::seq(a, 0, b);
      Tokens expected = interpret(a, v);
      const Tokens rb = interpret(b, v);
      expected.insert(expected.end(), rb.begin(), rb.end());
      REQUIRE(interpret(s, v) == expected);
      ++checked;
    }
  }
  // Every 3-primitive tree is also checked against a bottom-up expansion.
  for (const auto& e : all_trees(3)) {
    std::function<Tokens(const Expression&)> eval = [&](const Expression& x) -> Tokens {
      switch (x.kind) {
        case Expression::Kind::Prim: return {v.primitive_token(x.id)};
        case Expression::Kind::Mod: return repeat(eval(x.children[0]), v.modifier_count(x.id));
        case Expression::Kind::Seq: {
          Tokens l = eval(x.children[0]);
          const Tokens r = eval(x.children[1]);
          l.insert(l.end(), r.begin(), r.end());
          return l;
        }
      }
      return {};
    };
    REQUIRE(interpret(e, v) == eval(e));
    ++checked;
  }
  CHECK(checked > 10000);
}

TEST_CASE("modifier identity holds for every expression up to 3 primitives", "[grammar][property]") {
  const auto& v = vocab();
  for (int k = 1; k <= 3; ++k) {
    for (const auto& e : all_trees(k)) {
      for (int m = 0; m < v.num_modifiers(); ++m) {
        REQUIRE(interpret(Expression::mod(m, e), v) == repeat(interpret(e, v), v.modifier_count(m)));
      }
    }
  }
}

TEST_CASE("expression space sizes", "[grammar]") {
  CHECK(expression_space_size(1, vocab()) == 12);
  CHECK(expression_space_size(2, vocab()) == 144);
  CHECK(expression_space_size(3, vocab()) == 1728);
}

TEST_CASE("small grammars are enumerated exhaustively", "[grammar]") {
  for (auto [prims, total] : {std::pair{1, 12}, std::pair{2, 156}, std::pair{3, 1884}}) {
    DatasetSpec spec;
    spec.max_primitives = prims;
    spec.seed = 5;
    const Dataset ds = build_dataset(spec, vocab());
    CHECK(static_cast<int>(ds.train.size() + ds.val.size()) == total);
    std::set<Tokens> distinct;
    for (const auto* split : {&ds.train, &ds.val}) {
      for (const auto& ex : *split) distinct.insert(linearize(ex.expression, vocab()));
    }
    CHECK(static_cast<int>(distinct.size()) == total);
  }
}

TEST_CASE("larger grammars are capped with distinct samples", "[grammar]") {
  DatasetSpec spec;
  spec.max_primitives = 4;
  spec.seed = 9;
  const Dataset ds = build_dataset(spec, vocab());
  CHECK(ds.train.size() + ds.val.size() == 2000);
  CHECK(ds.val.size() == 200);
  std::set<Tokens> distinct;
  for (const auto* split : {&ds.train, &ds.val}) {
    for (const auto& ex : *split) {
      distinct.insert(linearize(ex.expression, vocab()));
      CHECK(ex.expression.primitive_count() <= 4);
    }
  }
  CHECK(distinct.size() == 2000);
}

TEST_CASE("parse inverts linearize on sampled expressions", "[grammar][property]") {
  Rng rng(11);
  for (int i = 0; i < 2000; ++i) {
    const int k = 1 + static_cast<int>(rng.uniform_index(12));
    const Expression e = sample_expression(k, 0.5, rng, vocab());
    CHECK(e.primitive_count() == k);
    REQUIRE(parse(linearize(e, vocab()), vocab()) == e);
  }
  CHECK_THROWS_AS(parse(words({"twice", "walk"}), vocab()), StructuralError);
}

TEST_CASE("modifier probability zero samples bare primitives", "[grammar]") {
  Rng rng(2);
  for (int i = 0; i < 200; ++i) {
    for (TokenId t : linearize(sample_expression(4, 0.0, rng, vocab()), vocab())) {
      CHECK(vocab().kind(t) != TokenKind::Modifier);
    }
  }
}

TEST_CASE("noise never changes labels", "[grammar][property]") {
  const auto& v = vocab();
  Rng rng(4);
  for (int i = 0; i < 500; ++i) {
    const Expression e = sample_expression(1 + static_cast<int>(rng.uniform_index(4)), 0.5, rng, v);
    const int noise = static_cast<int>(rng.uniform_index(16));
    const Example clean = make_example(e, 0, v, rng);
    const Example noisy = make_example(e, noise, v, rng);
    CHECK(noisy.output_tokens == clean.output_tokens);
    REQUIRE(static_cast<int>(noisy.noise_positions.size()) == noise);
    CHECK(noisy.input_tokens.size() == clean.input_tokens.size() + noise);
    CHECK(noisy.input_tokens.front() == VocabSpec::kBos);
    CHECK(noisy.input_tokens.back() == VocabSpec::kSep);
    Tokens stripped;
    std::set<int> pos(noisy.noise_positions.begin(), noisy.noise_positions.end());
    for (int p = 0; p < static_cast<int>(noisy.input_tokens.size()); ++p) {
      if (pos.count(p)) {
        CHECK(v.kind(noisy.input_tokens[p]) == TokenKind::Noise);
      } else {
        stripped.push_back(noisy.input_tokens[p]);
      }
    }
    CHECK(stripped == clean.input_tokens);
  }
  CHECK_THROWS_AS(inject_noise(words({"walk"}), 16, v, rng), ConfigError);
}

TEST_CASE("dataset generation is deterministic", "[grammar]") {
  DatasetSpec spec;
  spec.max_primitives = 3;
  spec.num_noise = 7;
  spec.seed = 123;
  const Dataset a = build_dataset(spec, vocab());
  const Dataset b = build_dataset(spec, vocab());
  CHECK(dataset_hash(a) == dataset_hash(b));
  spec.seed = 124;
  CHECK(dataset_hash(build_dataset(spec, vocab())) != dataset_hash(a));
}

TEST_CASE("OOD suite covers 5 to 12 primitives", "[grammar]") {
  Rng rng(1);
  const OodSuite suite = build_ood_suite(vocab(), rng);
  CHECK(suite.by_k.size() == 8);
  for (const auto& [k, examples] : suite.by_k) {
    CHECK(k >= 5);
    CHECK(k <= 12);
    CHECK(examples.size() == 200);
    for (const auto& ex : examples) {
      CHECK(ex.expression.primitive_count() == k);
      CHECK(ex.noise_positions.empty());
    }
  }
}

TEST_CASE("JSONL rows carry input, output, k and noise positions", "[grammar][io]") {
  Rng rng(6);
  const Example ex = make_example(sample_expression(2, 1.0, rng, vocab()), 3, vocab(), rng);
  std::stringstream out;
  write_examples_jsonl(out, {ex}, vocab());
  const auto j = nlohmann::json::parse(out.str());
  CHECK(j["input"].size() == ex.input_tokens.size());
  CHECK(j["input"][0] == "<bos>");
  CHECK(j["output"].back() == "<eos>");
  CHECK(j["k"] == 2);
  CHECK(j["noise_positions"].get<std::vector<int>>() == ex.noise_positions);
}

TEST_CASE("dataset spec validation", "[grammar]") {
  DatasetSpec spec;
  spec.num_noise = 16;
  CHECK_THROWS_AS(spec.validate(vocab()), ConfigError);
  spec = {};
  spec.max_primitives = 0;
  CHECK_THROWS_AS(spec.validate(vocab()), ConfigError);
  spec = {};
  spec.val_fraction = 0.0;
  CHECK_THROWS_AS(spec.validate(vocab()), ConfigError);
}
