#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "hecomp/error.hpp"
#include "hecomp/hereg.hpp"
#include "support.hpp"

using namespace hecomp;
using hecomp::test::random_tensor;

namespace {

const VocabSpec& vocab() {
  static const VocabSpec v = VocabSpec::standard();
  return v;
}

ModelConfig small_model(int layers) {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.n_layers = layers;
  c.vocab_size = 26;
  c.max_len = 32;
  return c;
}

Dataset data(int prims, int noise, std::uint64_t seed = 3) {
  DatasetSpec spec;
  spec.max_primitives = prims;
  spec.num_noise = noise;
  spec.seed = seed;
  return build_dataset(spec, vocab());
}

}  // namespace

TEST_CASE("the modifier pool holds every primitive-modifier adjacency", "[hereg]") {
  for (int noise : {0, 4, 15}) {
    const Dataset ds = data(3, noise);
    std::size_t expected = 0;
    for (const auto& ex : ds.train) {
      const Tokens clean = linearize(ex.expression, vocab());
      for (std::size_t i = 1; i < clean.size(); ++i) {
        expected += vocab().kind(clean[i]) == TokenKind::Modifier && vocab().kind(clean[i - 1]) == TokenKind::Primitive;
      }
    }
    const ModifierPool pool = mine_modifier_pool(ds.train, vocab());
    CHECK(pool.items.size() == expected);
    for (const auto& it : pool.items) {
      const Tokens& t = ds.train[it.example].input_tokens;
      CHECK(vocab().kind(t[it.primitive_pos]) == TokenKind::Primitive);
      CHECK(vocab().kind(t[it.modifier_pos]) == TokenKind::Modifier);
      CHECK(vocab().local_id(t[it.modifier_pos]) == it.modifier);
      for (int p = it.primitive_pos + 1; p < it.modifier_pos; ++p) CHECK(vocab().kind(t[p]) == TokenKind::Noise);
    }
  }
}

TEST_CASE("HE loss with a zero operator is the mean squared target norm", "[hereg]") {
  Rng rng(1);
  const int d = 4, h = 6;
  const Tensor hidden = random_tensor({5, d}, rng);
  std::vector<OperatorVars> ops;
  Tape tape;
  const Var hv = tape.leaf(hidden);
  for (int m = 0; m < 2; ++m) {
    ops.push_back({tape.leaf(random_tensor({2 * d, h}, rng)), tape.leaf(Tensor({h}, 0.0f)),
                   tape.leaf(Tensor({h, d}, 0.0f)), tape.leaf(Tensor({d}, 0.0f))});
  }
  const std::vector<int> e{0, 2, 3}, mrows{1, 1, 4}, mods{0, 1, 0};
  const Var loss = he_mod_loss(hv, e, mrows, mods, ops);
  double expected = 0.0;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < d; ++j) {
      const double c = 0.5 * (hidden[e[i] * d + j] + hidden[mrows[i] * d + j]);
      expected += c * c;
    }
  }
  CHECK(loss.value().item() == Catch::Approx(expected / 3.0).epsilon(1e-6));
  CHECK(he_mod_loss(hv, {}, {}, {}, ops).value().item() == 0.0f);
  CHECK_THROWS_AS(he_mod_loss(hv, e, mrows, std::vector<int>{0, 1, 2}, ops), StructuralError);
}

TEST_CASE("an operator computing the mean has zero HE loss", "[hereg][property]") {
  Rng rng(2);
  const int d = 5;
  // relu(z) - relu(-z) = z with z = (h_e + h_m) / 2
  Tensor w1({2 * d, 2 * d}, 0.0f), w2({2 * d, d}, 0.0f);
  for (int j = 0; j < d; ++j) {
    for (int half : {0, d}) {
      w1[(half + j) * 2 * d + j] = 0.5f;
      w1[(half + j) * 2 * d + d + j] = -0.5f;
    }
    w2[j * d + j] = 1.0f;
    w2[(d + j) * d + j] = -1.0f;
  }
  Tape tape;
  const Var hv = tape.leaf(random_tensor({8, d}, rng));
  const OperatorVars op{tape.leaf(w1), tape.leaf(Tensor({2 * d}, 0.0f)), tape.leaf(w2), tape.leaf(Tensor({d}, 0.0f))};
  const std::vector<OperatorVars> ops{op, op};
  const std::vector<int> e{0, 2, 4, 6}, m{1, 3, 5, 7}, mods{0, 1, 1, 0};
  CHECK(he_mod_loss(hv, e, m, mods, ops).value().item() < 1e-12f);
}

TEST_CASE("HE loss gradients match finite differences", "[hereg][gradcheck]") {
  const int d = 4, h = 6;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    std::vector<Tensor> inputs{random_tensor({6, d}, rng)};
    for (int m = 0; m < 2; ++m) {
      inputs.push_back(random_tensor({2 * d, h}, rng, 0.5f));
      inputs.push_back(random_tensor({h}, rng, 0.5f));
      inputs.push_back(random_tensor({h, d}, rng, 0.5f));
      inputs.push_back(random_tensor({d}, rng, 0.5f));
    }
    const std::vector<int> e{0, 1, 3, 4}, mrows{2, 2, 5, 5}, mods{0, 0, 1, 1};
    auto fn = [&](Tape&, const std::vector<Var>& v) {
      const std::vector<OperatorVars> ops{{v[1], v[2], v[3], v[4]}, {v[5], v[6], v[7], v[8]}};
      return he_mod_loss(v[0], e, mrows, mods, ops);
    };
    const auto r = test::grad_check(fn, test::projection({}, seed), inputs, rng, 0x1p-8, 24, 1e-3, true);
    INFO("seed " << seed << " " << r.where << " skipped " << r.skipped);
    CHECK(r.ok());
  }
}

TEST_CASE("layers above the top regularized layer get no HE gradient", "[hereg][property]") {
  const Dataset ds = data(2, 0);
  const ModelParams params = init_params(small_model(6), 7);
  RegConfig cfg;
  cfg.reg_layers = {2, 4};
  HeRegularizer reg(ds, vocab(), params.config, cfg, 1);
  Tape tape;
  std::vector<Var> model_vars, aux_vars;
  for (std::size_t i = 0; i < params.size(); ++i) model_vars.push_back(tape.leaf(params.at(static_cast<int>(i))));
  for (const auto& t : reg.parameters()) aux_vars.push_back(tape.leaf(t));
  tape.backward(reg.build(tape, params, model_vars, aux_vars, 0));
  auto grad_norm = [&](int idx) {
    double s = 0.0;
    for (float g : tape.grad(model_vars[idx]).data) s += static_cast<double>(g) * g;
    return s;
  };
  for (int layer = 0; layer < 6; ++layer) {
    double s = 0.0;
    for (int slot = 0; slot < ModelParams::kPerLayer; ++slot) {
      s += grad_norm(params.layer_index(layer, static_cast<ModelParams::LayerSlot>(slot)));
    }
    INFO("layer " << layer + 1);
    if (layer < 4) {
      CHECK(s > 0.0);
    } else {
      CHECK(s == 0.0);
    }
  }
  for (int k = 0; k < 4; ++k) CHECK(grad_norm(params.final_index(k)) == 0.0);
  CHECK(grad_norm(ModelParams::kTokEmb) > 0.0);
}

TEST_CASE("lambda zero reproduces baseline training bit for bit", "[hereg][property]") {
  const Dataset ds = data(2, 2);
  const ModelParams init = init_params(small_model(2), 8);
  TrainConfig tc;
  tc.lr = 3e-3f;
  tc.batch_size = 16;
  tc.max_epochs = 3;
  tc.seed = 9;
  RegConfig rc;
  rc.lambda = 0.0f;
  rc.reg_layers = {1, 2};
  const TrainResult base = train(init, ds, tc);
  const RegTrainResult reg = train_regularized(init, ds, tc, rc, vocab());
  for (std::size_t i = 0; i < base.params.size(); ++i) {
    CHECK(base.params.at(static_cast<int>(i)).data == reg.params.at(static_cast<int>(i)).data);
  }
  CHECK(base.history.train_loss == reg.history.train_loss);
  CHECK(base.history.val_loss == reg.history.val_loss);
  CHECK(!reg.reg.step.empty());
}

TEST_CASE("regularized training lowers the HE term", "[hereg]") {
  const Dataset ds = data(2, 0);
  TrainConfig tc;
  tc.lr = 3e-3f;
  tc.batch_size = 16;
  tc.max_epochs = 6;
  tc.early_stop_patience = 100;
  tc.seed = 4;
  RegConfig rc;
  rc.lambda = 1.0f;
  rc.reg_layers = {1, 2};
  const RegTrainResult r = train_regularized(init_params(small_model(2), 9), ds, tc, rc, vocab());
  const auto& he = r.reg.he;
  REQUIRE(he.size() >= 20);
  auto window = [&](std::size_t from) {
    double s = 0.0;
    for (std::size_t i = from; i < from + 10; ++i) s += he[i][0] + he[i][1];
    return s;
  };
  CHECK(window(he.size() - 10) < window(0));
  const TrainResult base = train(init_params(small_model(2), 9), ds, tc);
  CHECK(base.params.at(ModelParams::kTokEmb).data != r.params.at(ModelParams::kTokEmb).data);
}

TEST_CASE("regularizer configuration and history output", "[hereg]") {
  RegConfig cfg;
  cfg.reg_layers = {2, 5};
  CHECK_THROWS_AS(cfg.validate(4), ConfigError);
  cfg.reg_layers = {2, 2};
  CHECK_THROWS_AS(cfg.validate(4), ConfigError);
  cfg = {};
  cfg.lambda = -0.1f;
  CHECK_THROWS_AS(cfg.validate(4), ConfigError);

  RegHistory h;
  h.layers = {2, 4};
  h.step = {0};
  h.ce = {3.2};
  h.he = {{0.1, 0.2}};
  h.total = {3.215};
  const auto path = (std::filesystem::temp_directory_path() / "hecomp_reg_history.csv").string();
  write_reg_history_csv(path, h);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "step,ce_loss,he_loss_layer2,he_loss_layer4,total");
  std::filesystem::remove(path);
}

TEST_CASE("an empty modifier pool warns and contributes nothing", "[hereg]") {
  Dataset ds;
  Rng rng(1);
  for (int i = 0; i < 10; ++i) ds.train.push_back(make_example(sample_expression(2, 0.0, rng, vocab()), 2, vocab(), rng));
  RegConfig rc;
  rc.reg_layers = {1};
  HeRegularizer reg(ds, vocab(), small_model(1), rc, 1);
  CHECK(reg.pool().items.empty());
  REQUIRE(reg.warnings().size() == 1);
}
