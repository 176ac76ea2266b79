#include <catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "hecomp/error.hpp"
#include "support.hpp"

using namespace hecomp;
using hecomp::test::grad_check;
using hecomp::test::projection;
using hecomp::test::random_tensor;

namespace {

constexpr int kSeeds = 20;

int dim(Rng& rng, int lo, int hi) { return lo + static_cast<int>(rng.uniform_index(hi - lo + 1)); }

// Runs the check over kSeeds random shapes; `make` returns the inputs and
// the op for one seed.
template <typename Make>
void check_op(const char* name, Make make, double h = 0x1p-6) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(derive_seed(fnv1a(name), std::to_string(seed)));
    auto [inputs, fn] = make(rng);
    std::vector<int> out_shape;
    {
      Tape tape;
      std::vector<Var> vars;
      for (const auto& t : inputs) vars.push_back(tape.constant(t));
      out_shape = fn(tape, vars).shape();
    }
    const auto r = grad_check(fn, projection(out_shape, seed + 1000), inputs, rng, h);
    INFO(name << " seed " << seed << " " << r.where << " worst " << r.worst);
    CHECK(r.ok());
  }
}

using Inputs = std::vector<Tensor>;
using Fn = hecomp::test::OutputFn;

// Keeps values at least `gap` away from zero, so relu kinks stay out of reach
// of the finite-difference stencil.
Tensor away_from_zero(Tensor t, float gap) {
  for (auto& v : t.data) v = v >= 0 ? v + gap : v - gap;
  return t;
}

}  // namespace

TEST_CASE("matmul and linear gradients", "[tensor][grad]") {
  check_op("matmul", [](Rng& rng) {
    const int m = dim(rng, 1, 5), k = dim(rng, 1, 6), n = dim(rng, 1, 5);
    return std::pair{Inputs{random_tensor({m, k}, rng), random_tensor({k, n}, rng)},
                     Fn([](Tape&, const std::vector<Var>& v) { return matmul(v[0], v[1]); })};
  });
  check_op("matmul3d", [](Rng& rng) {
    const int b = dim(rng, 1, 3), m = dim(rng, 1, 4), k = dim(rng, 1, 5), n = dim(rng, 1, 4);
    return std::pair{Inputs{random_tensor({b, m, k}, rng), random_tensor({k, n}, rng)},
                     Fn([](Tape&, const std::vector<Var>& v) { return matmul(v[0], v[1]); })};
  });
  check_op("linear", [](Rng& rng) {
    const int m = dim(rng, 1, 6), k = dim(rng, 1, 6), n = dim(rng, 1, 5);
    return std::pair{Inputs{random_tensor({m, k}, rng), random_tensor({k, n}, rng), random_tensor({n}, rng)},
                     Fn([](Tape&, const std::vector<Var>& v) { return linear(v[0], v[1], v[2]); })};
  });
}

TEST_CASE("batched matmul gradients", "[tensor][grad]") {
  for (bool transpose : {false, true}) {
    check_op(transpose ? "bmm_t" : "bmm", [transpose](Rng& rng) {
      const int b = dim(rng, 1, 3), m = dim(rng, 1, 4), k = dim(rng, 1, 4), n = dim(rng, 1, 4);
      Tensor rhs = transpose ? random_tensor({b, n, k}, rng) : random_tensor({b, k, n}, rng);
      return std::pair{Inputs{random_tensor({b, m, k}, rng), rhs},
                       Fn([transpose](Tape&, const std::vector<Var>& v) {
                         return batched_matmul(v[0], v[1], transpose);
                       })};
    });
  }
}

TEST_CASE("causal attention gradients", "[tensor][grad]") {
  check_op("attention", [](Rng& rng) {
    const int b = dim(rng, 1, 3), t = dim(rng, 1, 5), heads = dim(rng, 1, 3), hd = dim(rng, 1, 4);
    const int d = heads * hd;
    const float s = 1.0f / std::sqrt(static_cast<float>(hd));
    return std::pair{Inputs{random_tensor({b * t, 3 * d}, rng)},
                     Fn([=](Tape&, const std::vector<Var>& v) { return causal_attention(v[0], b, heads, s); })};
  });
}

TEST_CASE("elementwise gradients", "[tensor][grad]") {
  check_op("add", [](Rng& rng) {
    const int m = dim(rng, 1, 5), n = dim(rng, 1, 5);
    return std::pair{Inputs{random_tensor({m, n}, rng), random_tensor({m, n}, rng)},
                     Fn([](Tape&, const std::vector<Var>& v) { return add(v[0], v[1]); })};
  });
  check_op("add_broadcast", [](Rng& rng) {
    const int m = dim(rng, 1, 5), n = dim(rng, 1, 5);
    return std::pair{Inputs{random_tensor({m, n}, rng), random_tensor({n}, rng)},
                     Fn([](Tape&, const std::vector<Var>& v) { return add(v[0], v[1]); })};
  });
  check_op("sub", [](Rng& rng) {
    const int m = dim(rng, 1, 5), n = dim(rng, 1, 5);
    return std::pair{Inputs{random_tensor({m, n}, rng), random_tensor({m, n}, rng)},
                     Fn([](Tape&, const std::vector<Var>& v) { return sub(v[0], v[1]); })};
  });
  check_op("multiply", [](Rng& rng) {
    const int m = dim(rng, 1, 5), n = dim(rng, 1, 5);
    return std::pair{Inputs{random_tensor({m, n}, rng), random_tensor({m, n}, rng)},
                     Fn([](Tape&, const std::vector<Var>& v) { return multiply(v[0], v[1]); })};
  });
  check_op("scale", [](Rng& rng) {
    const float s = static_cast<float>(rng.normal());
    return std::pair{Inputs{random_tensor({dim(rng, 1, 4), dim(rng, 1, 4)}, rng)},
                     Fn([s](Tape&, const std::vector<Var>& v) { return scale(v[0], s); })};
  });
  check_op("relu", [](Rng& rng) {
    return std::pair{Inputs{away_from_zero(random_tensor({dim(rng, 1, 5), dim(rng, 1, 5)}, rng), 0.1f)},
                     Fn([](Tape&, const std::vector<Var>& v) { return relu(v[0]); })};
  });
}

TEST_CASE("shape op gradients", "[tensor][grad]") {
  check_op("concat", [](Rng& rng) {
    const int m = dim(rng, 1, 4);
    return std::pair{Inputs{random_tensor({m, dim(rng, 1, 3)}, rng), random_tensor({m, dim(rng, 1, 3)}, rng),
                            random_tensor({m, dim(rng, 1, 3)}, rng)},
                     Fn([](Tape&, const std::vector<Var>& v) { return concat(v); })};
  });
  check_op("slice", [](Rng& rng) {
    const int n = dim(rng, 2, 7);
    const int start = static_cast<int>(rng.uniform_index(n - 1));
    const int len = 1 + static_cast<int>(rng.uniform_index(n - start));
    return std::pair{Inputs{random_tensor({dim(rng, 1, 4), n}, rng)},
                     Fn([=](Tape&, const std::vector<Var>& v) { return slice(v[0], start, len); })};
  });
  check_op("mean", [](Rng& rng) {
    const int axis = static_cast<int>(rng.uniform_index(3));
    return std::pair{Inputs{random_tensor({dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4)}, rng)},
                     Fn([axis](Tape&, const std::vector<Var>& v) { return mean(v[0], axis); })};
  });
  check_op("sum_all", [](Rng& rng) {
    return std::pair{Inputs{random_tensor({dim(rng, 1, 4), dim(rng, 1, 4)}, rng)},
                     Fn([](Tape&, const std::vector<Var>& v) { return sum_all(v[0]); })};
  });
  check_op("reshape", [](Rng& rng) {
    const int a = dim(rng, 1, 4), b = dim(rng, 1, 4), c = dim(rng, 1, 4);
    return std::pair{Inputs{random_tensor({a, b * c}, rng)},
                     Fn([=](Tape&, const std::vector<Var>& v) { return reshape(v[0], {a * b, c}); })};
  });
  check_op("swap_middle", [](Rng& rng) {
    return std::pair{
        Inputs{random_tensor({dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)}, rng)},
        Fn([](Tape&, const std::vector<Var>& v) { return swap_middle(v[0]); })};
  });
  check_op("embedding", [](Rng& rng) {
    const int vocab = dim(rng, 2, 6), d = dim(rng, 1, 4), n = dim(rng, 1, 8);
    std::vector<int> ids(n);
    for (auto& id : ids) id = static_cast<int>(rng.uniform_index(vocab));
    return std::pair{Inputs{random_tensor({vocab, d}, rng)},
                     Fn([ids](Tape&, const std::vector<Var>& v) { return embedding_lookup(v[0], ids); })};
  });
  check_op("gather_rows", [](Rng& rng) {
    const int rows = dim(rng, 2, 6), d = dim(rng, 1, 4), n = dim(rng, 1, 8);
    std::vector<int> idx(n);
    for (auto& i : idx) i = static_cast<int>(rng.uniform_index(rows));
    return std::pair{Inputs{random_tensor({rows, d}, rng)},
                     Fn([idx](Tape&, const std::vector<Var>& v) { return gather_rows(v[0], idx); })};
  });
}

TEST_CASE("normalization and loss gradients", "[tensor][grad]") {
  check_op("softmax", [](Rng& rng) {
    return std::pair{Inputs{random_tensor({dim(rng, 1, 4), dim(rng, 1, 6)}, rng)},
                     Fn([](Tape&, const std::vector<Var>& v) { return softmax(v[0]); })};
  });
  check_op("softmax_causal", [](Rng& rng) {
    const int t = dim(rng, 1, 5);
    return std::pair{Inputs{random_tensor({dim(rng, 1, 3), t, t}, rng)},
                     Fn([](Tape&, const std::vector<Var>& v) { return softmax(v[0], true); })};
  });
  // Small rows make the normalization strongly curved, hence the finer step.
  check_op(
      "layer_norm",
      [](Rng& rng) {
        const int n = dim(rng, 2, 8);
        return std::pair{
            Inputs{random_tensor({dim(rng, 1, 4), n}, rng), random_tensor({n}, rng), random_tensor({n}, rng)},
            Fn([](Tape&, const std::vector<Var>& v) { return layer_norm(v[0], v[1], v[2]); })};
      },
      0x1p-9);
  check_op("cross_entropy", [](Rng& rng) {
    const int n = dim(rng, 1, 6), vocab = dim(rng, 2, 7);
    std::vector<int> targets(n);
    std::vector<float> mask(n);
    for (int i = 0; i < n; ++i) {
      targets[i] = static_cast<int>(rng.uniform_index(vocab));
      mask[i] = (i == 0 || rng.bernoulli(0.7)) ? 1.0f : 0.0f;
    }
    return std::pair{Inputs{random_tensor({n, vocab}, rng)}, Fn([=](Tape&, const std::vector<Var>& v) {
                       return cross_entropy_with_mask(v[0], targets, mask);
                     })};
  });
}

TEST_CASE("softmax rows sum to one", "[tensor]") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const int t = 1 + static_cast<int>(rng.uniform_index(8));
    Tape tape;
    for (bool causal : {false, true}) {
      const Tensor& p = softmax(tape.constant(random_tensor({3, t, t}, rng, 5.0f)), causal).value();
      for (int r = 0; r < 3 * t; ++r) {
        double s = 0.0;
        for (int c = 0; c < t; ++c) s += p[r * t + c];
        CHECK(std::abs(s - 1.0) < 1e-5);
        if (causal) {
          for (int c = r % t + 1; c < t; ++c) CHECK(p[r * t + c] == 0.0f);
        }
      }
    }
  }
}

TEST_CASE("cross entropy of uniform logits is log V", "[tensor]") {
  Tape tape;
  Var logits = tape.constant(Tensor({3, 4}, 0.25f));
  const std::vector<int> targets{0, 1, 3};
  const std::vector<float> mask{1, 0, 1};
  CHECK(cross_entropy_with_mask(logits, targets, mask).value().item() == Catch::Approx(std::log(4.0)).epsilon(1e-6));
}

TEST_CASE("backward runs once per tape", "[tensor]") {
  Tape tape;
  Var x = tape.leaf(Tensor({2}, {1.0f, 2.0f}));
  Var y = sum_all(multiply(x, x));
  tape.backward(y);
  CHECK(tape.grad(x)[0] == 2.0f);
  CHECK(tape.grad(x)[1] == 4.0f);
  CHECK_THROWS_AS(tape.backward(y), StructuralError);
}

TEST_CASE("shape mismatches and non-finite values are rejected", "[tensor]") {
  Tape tape;
  Var a = tape.constant(Tensor({2, 3}));
  Var b = tape.constant(Tensor({2, 3}));
  CHECK_THROWS_AS(matmul(a, b), StructuralError);
  CHECK_THROWS_AS(add(a, tape.constant(Tensor({4}))), StructuralError);
  CHECK_THROWS_AS(embedding_lookup(a, std::vector<int>{2}), StructuralError);
  Var big = tape.constant(Tensor({1}, {3e38f}));
  CHECK_THROWS_AS(scale(big, 10.0f), NumericError);
}

TEST_CASE("adam matches a hand-computed update", "[tensor][adam]") {
  // One parameter, gradients 1 then -2: the oracle is the textbook update
  // evaluated in double.
  std::vector<Tensor> params{Tensor({1}, {0.5f})};
  AdamState state = make_adam_state(params);
  const AdamConfig cfg{0.1f, 0.9f, 0.98f, 1e-8f};
  double m = 0, v = 0, x = 0.5;
  for (int step = 1; step <= 2; ++step) {
    const double g = step == 1 ? 1.0 : -2.0;
    std::vector<Tensor> grads{Tensor({1}, {static_cast<float>(g)})};
    adam_step(params, grads, state, cfg);
    m = 0.9 * m + 0.1 * g;
    v = 0.98 * v + 0.02 * g * g;
    const double mh = m / (1 - std::pow(0.9, step)), vh = v / (1 - std::pow(0.98, step));
    x -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
    CHECK(params[0][0] == Catch::Approx(x).epsilon(1e-6));
  }
  CHECK(state.step == 2);
}

TEST_CASE("adam minimizes a quadratic", "[tensor][adam]") {
  std::vector<Tensor> params{Tensor({3}, {3.0f, -2.0f, 1.0f})};
  AdamState state = make_adam_state(params);
  for (int i = 0; i < 2000; ++i) {
    Tensor g({3});
    for (int k = 0; k < 3; ++k) g[k] = 2.0f * params[0][k];
    adam_step(params, std::vector<Tensor>{g}, state, AdamConfig{0.05f, 0.9f, 0.999f, 1e-8f});
  }
  for (int k = 0; k < 3; ++k) CHECK(std::abs(params[0][k]) < 1e-2);
}

TEST_CASE("checkpoint round trip is exact", "[tensor][io]") {
  Rng rng(3);
  NamedTensors t{{"a", random_tensor({3, 4}, rng)}, {"b.c", random_tensor({5}, rng)}, {"empty", Tensor({0})}};
  std::stringstream buf;
  write_checkpoint(buf, t);
  const NamedTensors back = read_checkpoint(buf);
  REQUIRE(back.size() == t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    CHECK(back[i].first == t[i].first);
    CHECK(back[i].second.shape == t[i].second.shape);
    CHECK(std::equal(back[i].second.data.begin(), back[i].second.data.end(), t[i].second.data.begin()));
  }
  std::string bytes = buf.str();
  bytes[0] ^= 0x5a;
  std::stringstream bad(bytes);
  CHECK_THROWS_AS(read_checkpoint(bad), StructuralError);
}
