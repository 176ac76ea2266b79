#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "hecomp/error.hpp"
#include "hecomp/model.hpp"
#include "support.hpp"

using namespace hecomp;

namespace {

ModelConfig small_config(int layers) {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.n_layers = layers;
  c.vocab_size = 26;
  c.max_len = 24;
  return c;
}

Tokens random_tokens(Rng& rng, int n, int vocab) {
  Tokens t(n);
  for (auto& x : t) x = 1 + static_cast<int>(rng.uniform_index(vocab - 1));
  return t;
}

// Larger weights than the default init so every path carries gradient.
ModelParams spread_params(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParams p = init_params(cfg, seed);
  Rng rng(seed ^ 0xabcdef);
  for (auto& [name, t] : p.tensors) {
    for (auto& v : t.data) v += 0.3f * static_cast<float>(rng.normal());
  }
  return p;
}

}  // namespace

TEST_CASE("parameter count matches the closed form", "[model]") {
  for (int layers : {1, 2, 4, 10}) {
    for (auto [d, h, ff] : {std::tuple{128, 4, 256}, std::tuple{16, 2, 32}}) {
      ModelConfig c;
      c.d_model = d;
      c.n_heads = h;
      c.d_ff = ff;
      c.n_layers = layers;
      c.vocab_size = 26;
      const std::int64_t v = 26, L = layers, T = c.max_len;
      const std::int64_t per_layer = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * ff + ff) + (ff * d + d);
      const std::int64_t expected = v * d + T * d + L * per_layer + 2 * d + (d * v + v);
      CHECK(parameter_count(c) == expected);
      CHECK(init_params(c, 1).count() == expected);
    }
  }
}

TEST_CASE("config validation", "[model]") {
  ModelConfig c = small_config(1);
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config(0);
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

namespace {

using Mat = std::vector<std::vector<double>>;

// Straightforward double-precision forward pass of one sequence, written
// independently of the library kernels: embeddings, pre-norm blocks with
// causal multi-head attention and a relu MLP, final norm and output layer.
Mat reference_logits(const ModelParams& p, const Tokens& ids) {
  const ModelConfig& c = p.config;
  const int T = static_cast<int>(ids.size()), d = c.d_model, H = c.n_heads, dh = c.head_dim();
  auto w = [&](int i, int r, int col, int cols) { return static_cast<double>(p.at(i)[r * cols + col]); };
  auto affine = [&](const Mat& x, int wi, int bi, int in, int out) {
    Mat y(x.size(), std::vector<double>(out));
    for (std::size_t r = 0; r < x.size(); ++r)
      for (int o = 0; o < out; ++o) {
        double s = p.at(bi)[o];
        for (int k = 0; k < in; ++k) s += x[r][k] * w(wi, k, o, out);
        y[r][o] = s;
      }
    return y;
  };
  auto norm = [&](const Mat& x, int gi, int bi) {
    Mat y = x;
    for (auto& row : y) {
      double mu = 0, var = 0;
      for (double v : row) mu += v;
      mu /= d;
      for (double v : row) var += (v - mu) * (v - mu);
      var /= d;
      for (int j = 0; j < d; ++j) row[j] = (row[j] - mu) / std::sqrt(var + 1e-5) * p.at(gi)[j] + p.at(bi)[j];
    }
    return y;
  };
  Mat x(T, std::vector<double>(d));
  for (int t = 0; t < T; ++t)
    for (int j = 0; j < d; ++j) x[t][j] = w(ModelParams::kTokEmb, ids[t], j, d) + w(ModelParams::kPosEmb, t, j, d);
  for (int l = 0; l < c.n_layers; ++l) {
    auto at = [&](ModelParams::LayerSlot s) { return p.layer_index(l, s); };
    const Mat qkv = affine(norm(x, at(ModelParams::Ln1G), at(ModelParams::Ln1B)), at(ModelParams::Wqkv),
                           at(ModelParams::Bqkv), d, 3 * d);
    Mat ctx(T, std::vector<double>(d, 0.0));
    for (int h = 0; h < H; ++h)
      for (int t = 0; t < T; ++t) {
        std::vector<double> a(t + 1);
        double mx = -1e300, z = 0;
        for (int u = 0; u <= t; ++u) {
          double s = 0;
          for (int k = 0; k < dh; ++k) s += qkv[t][h * dh + k] * qkv[u][d + h * dh + k];
          a[u] = s / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, a[u]);
        }
        for (auto& v : a) z += (v = std::exp(v - mx));
        for (int u = 0; u <= t; ++u)
          for (int k = 0; k < dh; ++k) ctx[t][h * dh + k] += a[u] / z * qkv[u][2 * d + h * dh + k];
      }
    const Mat att = affine(ctx, at(ModelParams::Wo), at(ModelParams::Bo), d, d);
    for (int t = 0; t < T; ++t)
      for (int j = 0; j < d; ++j) x[t][j] += att[t][j];
    Mat hid = affine(norm(x, at(ModelParams::Ln2G), at(ModelParams::Ln2B)), at(ModelParams::W1), at(ModelParams::B1),
                     d, c.d_ff);
    for (auto& row : hid)
      for (auto& v : row) v = std::max(v, 0.0);
    const Mat ff = affine(hid, at(ModelParams::W2), at(ModelParams::B2), c.d_ff, d);
    for (int t = 0; t < T; ++t)
      for (int j = 0; j < d; ++j) x[t][j] += ff[t][j];
  }
  return affine(norm(x, p.final_index(0), p.final_index(1)), p.final_index(2), p.final_index(3), d, c.vocab_size);
}

double reference_ce(const ModelParams& p, const std::vector<Tokens>& seqs, const std::vector<std::vector<int>>& targets) {
  double total = 0;
  int n = 0;
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    const Mat logits = reference_logits(p, seqs[b]);
    for (std::size_t t = 0; t < seqs[b].size(); ++t) {
      double mx = -1e300, z = 0;
      for (double v : logits[t]) mx = std::max(mx, v);
      for (double v : logits[t]) z += std::exp(v - mx);
      total += mx + std::log(z) - logits[t][targets[b][t]];
      ++n;
    }
  }
  return total / n;
}

}  // namespace

TEST_CASE("reference forward agrees with the float forward", "[model]") {
  const ModelParams params = spread_params(small_config(2), 31);
  Rng rng(31);
  const Tokens ids = random_tokens(rng, 9, 26);
  const Mat ref = reference_logits(params, ids);
  const ForwardOutput f = forward(ids, params);
  for (int t = 0; t < 9; ++t)
    for (int v = 0; v < 26; ++v) CHECK(std::abs(ref[t][v] - f.logits[t * 26 + v]) < 1e-4);
}

// The finite differences run on the double reference with a step small
// enough that no relu changes sign within the stencil for these inputs;
// the analytic side is the float32 tape gradient.
TEST_CASE("full one-layer model passes finite-difference checks", "[model][grad]") {
  const ModelConfig cfg = small_config(1);
  const double h = 1e-6;
  int checked = 0;
  for (int seed = 0; seed < 20; ++seed) {
    Rng rng(derive_seed(77, std::to_string(seed)));
    ModelParams params = spread_params(cfg, seed);
    std::vector<Tokens> seqs{random_tokens(rng, 6, 26), random_tokens(rng, 4, 26)};
    const TokenBatch tb = TokenBatch::from(seqs);
    std::vector<std::vector<int>> targets;
    std::vector<int> flat_targets(tb.batch * tb.length, 0);
    std::vector<float> mask(tb.batch * tb.length, 0.0f);
    for (int b = 0; b < tb.batch; ++b) {
      targets.emplace_back();
      for (std::size_t t = 0; t < seqs[b].size(); ++t) {
        const int y = static_cast<int>(rng.uniform_index(26));
        targets.back().push_back(y);
        flat_targets[b * tb.length + t] = y;
        mask[b * tb.length + t] = 1.0f;
      }
    }
    Tape tape;
    const TapeForward f = forward_on_tape(tape, params, tb);
    tape.backward(cross_entropy_with_mask(f.logits, flat_targets, mask));

    for (std::size_t i = 0; i < params.size(); ++i) {
      const Tensor grad = tape.grad(f.params[i]);
      Tensor& value = params.at(static_cast<int>(i));
      for (int probe = 0; probe < 4; ++probe) {
        const std::size_t k = rng.uniform_index(value.numel());
        // The quotient divides by the step actually stored in float.
        const float saved = value[k];
        const float up = std::nextafter(saved + static_cast<float>(h), 1e30f);
        const float down = std::nextafter(saved - static_cast<float>(h), -1e30f);
        value[k] = up;
        const double f_up = reference_ce(params, seqs, targets);
        value[k] = down;
        const double f_down = reference_ce(params, seqs, targets);
        value[k] = saved;
        const double numeric = (f_up - f_down) / (static_cast<double>(up) - static_cast<double>(down));
        const double a = grad[k];
        INFO("seed " << seed << " " << params.tensors[i].first << "[" << k << "] analytic " << a << " numeric "
                     << numeric);
        CHECK(std::abs(a - numeric) <= 1e-3 * std::max(std::abs(a), std::abs(numeric)) + 1e-6);
        ++checked;
      }
    }
  }
  CHECK(checked == 20 * 18 * 4);
}

TEST_CASE("logits are causal", "[model][property]") {
  const ModelConfig cfg = small_config(2);
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const ModelParams params = spread_params(cfg, trial);
    const int n = 4 + static_cast<int>(rng.uniform_index(12));
    const Tokens a = random_tokens(rng, n, 26);
    Tokens b = a;
    const int t = static_cast<int>(rng.uniform_index(n - 1));
    for (int i = t + 1; i < n; ++i) b[i] = random_tokens(rng, 1, 26)[0];
    const ForwardOutput fa = forward(a, params), fb = forward(b, params);
    for (int i = 0; i <= t; ++i) {
      for (int v = 0; v < 26; ++v) REQUIRE(fa.logits[i * 26 + v] == fb.logits[i * 26 + v]);
    }
  }
}

TEST_CASE("hidden states do not depend on later layers", "[model][property]") {
  const ModelConfig cfg4 = small_config(4);
  const ModelParams p4 = spread_params(cfg4, 3);
  // Same first two blocks, embeddings and head in a 2-layer model.
  ModelParams p2 = init_params(small_config(2), 9);
  for (std::size_t i = 0; i < p2.size(); ++i) {
    const int src = static_cast<int>(i) < p2.final_index(0)
                        ? static_cast<int>(i)
                        : p4.final_index(static_cast<int>(i) - p2.final_index(0));
    p2.at(static_cast<int>(i)) = p4.at(src);
  }
  Rng rng(4);
  std::vector<Tokens> seqs{random_tokens(rng, 9, 26), random_tokens(rng, 5, 26)};
  const TokenBatch tb = TokenBatch::from(seqs);
  Tape t4, t2, tr;
  const TapeForward f4 = forward_on_tape(t4, p4, tb, false);
  const TapeForward f2 = forward_on_tape(t2, p2, tb, false);
  const TapeForward fr = forward_on_tape(tr, p4, tb, false, 2);
  REQUIRE(fr.hidden.size() == 2);
  for (int l = 0; l < 2; ++l) {
    CHECK(f4.hidden[l].value().data == f2.hidden[l].value().data);
    CHECK(f4.hidden[l].value().data == fr.hidden[l].value().data);
  }
}

TEST_CASE("batched tape forward agrees with single-sequence forward", "[model]") {
  const ModelConfig cfg = small_config(2);
  const ModelParams params = spread_params(cfg, 8);
  Rng rng(8);
  std::vector<Tokens> seqs{random_tokens(rng, 7, 26), random_tokens(rng, 3, 26), random_tokens(rng, 5, 26)};
  const TokenBatch tb = TokenBatch::from(seqs);
  Tape tape;
  const TapeForward f = forward_on_tape(tape, params, tb, false);
  for (int b = 0; b < 3; ++b) {
    const ForwardOutput one = forward(seqs[b], params);
    for (std::size_t i = 0; i < seqs[b].size(); ++i) {
      for (int v = 0; v < 26; ++v) {
        CHECK(std::abs(f.logits.value()[(b * tb.length + i) * 26 + v] - one.logits[i * 26 + v]) < 1e-4);
      }
    }
  }
}

TEST_CASE("cached greedy decoding matches full recomputation", "[model]") {
  const ModelConfig cfg = small_config(2);
  Rng rng(12);
  for (int trial = 0; trial < 5; ++trial) {
    const ModelParams params = spread_params(cfg, 100 + trial);
    Tokens prefix = random_tokens(rng, 5, 26);
    prefix.push_back(VocabSpec::kSep);
    const Decoded d = greedy_decode(prefix, params, 10);
    Tokens seq = prefix;
    for (std::size_t step = 0; step < d.tokens.size(); ++step) {
      const ForwardOutput f = forward(seq, params);
      const float* last = f.logits.data.data() + (seq.size() - 1) * 26;
      const int best = static_cast<int>(std::max_element(last, last + 26) - last);
      REQUIRE(best == d.tokens[step]);
      seq.push_back(best);
    }
    CHECK((d.terminated || d.tokens.size() == 10));
    if (d.terminated) CHECK(d.tokens.back() == VocabSpec::kEos);

    std::vector<Tokens> prefixes{prefix, prefix};
    const auto batch = greedy_decode_batch(prefixes, params, 10);
    CHECK(batch[0].tokens == d.tokens);
    CHECK(batch[1].tokens == d.tokens);
  }
}

TEST_CASE("over-long inputs and bad ids are rejected", "[model]") {
  const ModelParams params = init_params(small_config(1), 1);
  CHECK_THROWS_AS(forward(Tokens(25, 4), params), StructuralError);
  CHECK_THROWS_AS(forward(Tokens{1, 26}, params), StructuralError);
}

TEST_CASE("model checkpoints round-trip", "[model][io]") {
  const ModelParams params = spread_params(small_config(2), 21);
  const auto path = (std::filesystem::temp_directory_path() / "hecomp_test_model.bin").string();
  save_model(path, params);
  const ModelParams back = load_model(path);
  CHECK(back.config.n_layers == 2);
  CHECK(back.config.d_model == 16);
  CHECK(config_to_text(back.config) == config_to_text(params.config));
  REQUIRE(back.size() == params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    CHECK(back.tensors[i].first == params.tensors[i].first);
    CHECK(back.at(static_cast<int>(i)).data == params.at(static_cast<int>(i)).data);
  }
  std::filesystem::remove(path);
  std::filesystem::remove(path + ".json");
}

TEST_CASE("initialization is a pure function of the seed", "[model]") {
  const ModelParams a = init_params(small_config(2), 4), b = init_params(small_config(2), 4);
  const ModelParams c = init_params(small_config(2), 5);
  CHECK(a.at(0).data == b.at(0).data);
  CHECK(a.at(0).data != c.at(0).data);
}
