#include "hecomp/probes.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <Eigen/Dense>
#include <json.hpp>

#include "hecomp/error.hpp"
#include "hecomp/rng.hpp"

namespace hecomp {

namespace {

using MatD = Eigen::MatrixXd;
using MatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::vector<float> row(const Tensor& t, int r) {
  const int c = t.cols();
  return {t.data.begin() + std::size_t(r) * c, t.data.begin() + std::size_t(r + 1) * c};
}

std::vector<float> midpoint(const std::vector<float>& a, const std::vector<float>& b) {
  std::vector<float> m(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) m[i] = 0.5f * (a[i] + b[i]);
  return m;
}

MatD to_matrix(const std::vector<std::vector<float>>& rows, std::span<const int> idx) {
  if (idx.empty()) return {};
  MatD m(idx.size(), rows[idx[0]].size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto& r = rows[idx[i]];
    for (std::size_t j = 0; j < r.size(); ++j) m(i, j) = r[j];
  }
  return m;
}

std::vector<std::vector<float>> to_rows(const MatD& m) {
  std::vector<std::vector<float>> out(m.rows(), std::vector<float>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) out[i][j] = static_cast<float>(m(i, j));
  return out;
}

MatD with_bias(const MatD& x) {
  MatD a(x.rows(), x.cols() + 1);
  a << x, MatD::Ones(x.rows(), 1);
  return a;
}

// Ridge least squares on features A, in whichever of the primal or dual form
// is smaller. Returns W with A W ~ Y.
MatD ridge_solve(const MatD& a, const MatD& y, double ridge) {
  if (a.rows() >= a.cols()) {
    MatD g = a.transpose() * a;
    g.diagonal().array() += ridge;
    return g.ldlt().solve(a.transpose() * y);
  }
  MatD g = a * a.transpose();
  g.diagonal().array() += ridge;
  return a.transpose() * g.ldlt().solve(y);
}

struct Inputs {
  MatD left, right;  // right has 0 columns for unary operators
};

MatD affine_features(const Inputs& in) {
  MatD x(in.left.rows(), in.left.cols() + in.right.cols());
  if (in.right.cols() > 0) {
    x << in.left, in.right;
  } else {
    x = in.left;
  }
  return with_bias(x);
}

// Kernel of the bilinear family: features are the outer product of the two
// inputs, or of the input with itself when unary. The affine part is carried
// by a ridge skip path.
MatD bilinear_kernel(const Inputs& a, const Inputs& b) {
  const MatD ll = a.left * b.left.transpose();
  if (a.right.cols() == 0) return ll.array().square().matrix();
  const MatD rr = a.right * b.right.transpose();
  return (ll.array() * rr.array()).matrix();
}

class LinearOperator : public FittedOperator {
 public:
  explicit LinearOperator(MatD w) : w_(std::move(w)) {}
  MatD apply(const Inputs& in) const { return affine_features(in) * w_; }
  std::vector<std::vector<float>> predict(const std::vector<std::vector<float>>& left,
                                          const std::vector<std::vector<float>>& right) const override;

 private:
  MatD w_;
};

class BilinearOperator : public FittedOperator {
 public:
  BilinearOperator(LinearOperator skip, Inputs train, MatD alpha)
      : skip_(std::move(skip)), train_(std::move(train)), alpha_(std::move(alpha)) {}
  MatD apply(const Inputs& in) const { return skip_.apply(in) + bilinear_kernel(in, train_) * alpha_; }
  std::vector<std::vector<float>> predict(const std::vector<std::vector<float>>& left,
                                          const std::vector<std::vector<float>>& right) const override;

 private:
  LinearOperator skip_;
  Inputs train_;
  MatD alpha_;
};

// Two-layer relu perceptron on top of an affine skip path.
class MlpOperator : public FittedOperator {
 public:
  MlpOperator(LinearOperator skip, MatF w1, Eigen::RowVectorXf b1, MatF w2, Eigen::RowVectorXf b2)
      : skip_(std::move(skip)), w1_(std::move(w1)), b1_(std::move(b1)), w2_(std::move(w2)), b2_(std::move(b2)) {}
  MatD apply(const Inputs& in) const {
    const MatF x = affine_features(in).leftCols(w1_.rows()).cast<float>();
    MatF h = (x * w1_).rowwise() + b1_;
    h = h.cwiseMax(0.0f);
    const MatF out = (h * w2_).rowwise() + b2_;
    return skip_.apply(in) + out.cast<double>();
  }
  std::vector<std::vector<float>> predict(const std::vector<std::vector<float>>& left,
                                          const std::vector<std::vector<float>>& right) const override;

 private:
  LinearOperator skip_;
  MatF w1_;
  Eigen::RowVectorXf b1_;
  MatF w2_;
  Eigen::RowVectorXf b2_;
};

Inputs make_inputs(const std::vector<std::vector<float>>& left, const std::vector<std::vector<float>>& right,
                   std::span<const int> idx) {
  return {to_matrix(left, idx), right.empty() ? MatD(idx.size(), 0) : to_matrix(right, idx)};
}

std::vector<int> all_indices(std::size_t n) {
  std::vector<int> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

std::vector<std::vector<float>> LinearOperator::predict(const std::vector<std::vector<float>>& left,
                                                        const std::vector<std::vector<float>>& right) const {
  const auto idx = all_indices(left.size());
  return to_rows(apply(make_inputs(left, right, idx)));
}

std::vector<std::vector<float>> BilinearOperator::predict(const std::vector<std::vector<float>>& left,
                                                          const std::vector<std::vector<float>>& right) const {
  const auto idx = all_indices(left.size());
  return to_rows(apply(make_inputs(left, right, idx)));
}

std::vector<std::vector<float>> MlpOperator::predict(const std::vector<std::vector<float>>& left,
                                                     const std::vector<std::vector<float>>& right) const {
  const auto idx = all_indices(left.size());
  return to_rows(apply(make_inputs(left, right, idx)));
}

LinearOperator fit_linear(const Inputs& in, const MatD& y, double ridge) {
  return LinearOperator(ridge_solve(affine_features(in), y, ridge));
}

BilinearOperator fit_bilinear(const Inputs& in, const MatD& y, double ridge) {
  LinearOperator skip = fit_linear(in, y, ridge);
  const MatD r = y - skip.apply(in);
  MatD k = bilinear_kernel(in, in);
  k.diagonal().array() += ridge * std::max(1.0, k.diagonal().mean());
  MatD alpha = k.ldlt().solve(r);
  return BilinearOperator(std::move(skip), in, std::move(alpha));
}

// The skip path is the ridge solution and stays fixed; the perceptron is fit
// to its residual by full-batch Adam starting from a zero output layer. The
// iterate with the lowest training loss is kept, so the result never fits
// worse than the linear operator.
MlpOperator fit_mlp(const Inputs& in, const MatD& y, const ProbeConfig& cfg, std::uint64_t seed) {
  LinearOperator skip = fit_linear(in, y, cfg.ridge);
  const MatD a = affine_features(in);
  const MatF x = a.leftCols(a.cols() - 1).cast<float>();
  const MatF r = (y - skip.apply(in)).cast<float>();
  const int n = static_cast<int>(x.rows()), p = static_cast<int>(x.cols()), h = cfg.mlp_hidden,
            d = static_cast<int>(y.cols());

  Rng rng(seed);
  MatF w1(p, h);
  const float s = 1.0f / std::sqrt(static_cast<float>(p));
  for (int i = 0; i < p; ++i)
    for (int j = 0; j < h; ++j) w1(i, j) = static_cast<float>(rng.normal()) * s;
  Eigen::RowVectorXf b1 = Eigen::RowVectorXf::Zero(h);
  MatF w2 = MatF::Zero(h, d);
  Eigen::RowVectorXf b2 = Eigen::RowVectorXf::Zero(d);

  struct Moments {
    MatF m, v;
  };
  auto zeros_like = [](const auto& t) { return Moments{MatF::Zero(t.rows(), t.cols()), MatF::Zero(t.rows(), t.cols())}; };
  Moments mw1 = zeros_like(w1), mb1 = zeros_like(b1), mw2 = zeros_like(w2), mb2 = zeros_like(b2);
  const float beta1 = 0.9f, beta2 = 0.999f, eps = 1e-8f;

  MatF best_w1 = w1, best_w2 = w2;
  Eigen::RowVectorXf best_b1 = b1, best_b2 = b2;
  double best = std::numeric_limits<double>::infinity();
  const float norm = 2.0f / (static_cast<float>(n) * static_cast<float>(d));
  // Residuals this small carry no signal beyond float rounding.
  const double floor = 1e-12 * (y.squaredNorm() / (double(n) * d) + 1e-30);
  int best_step = 0;

  MatF z(n, h), hid(n, h), e(n, d), dh(n, h);
  for (int step = 0; step <= cfg.mlp_steps; ++step) {
    z.noalias() = x * w1;
    z.rowwise() += b1;
    hid = z.cwiseMax(0.0f);
    e.noalias() = hid * w2;
    e.rowwise() += b2;
    e -= r;
    const double loss = e.cast<double>().squaredNorm() / (double(n) * d);
    if (!std::isfinite(loss)) break;
    if (loss < best) {
      best = loss;
      best_step = step;
      best_w1 = w1, best_b1 = b1, best_w2 = w2, best_b2 = b2;
    }
    if (step == cfg.mlp_steps || loss <= floor || step - best_step >= cfg.mlp_patience) break;

    e *= norm;
    const MatF gw2 = hid.transpose() * e;
    const Eigen::RowVectorXf gb2 = e.colwise().sum();
    dh.noalias() = e * w2.transpose();
    dh = (z.array() > 0.0f).select(dh, 0.0f);
    const MatF gw1 = x.transpose() * dh;
    const Eigen::RowVectorXf gb1 = dh.colwise().sum();

    const float t = static_cast<float>(step + 1);
    const float c1 = 1.0f - std::pow(beta1, t), c2 = 1.0f - std::pow(beta2, t);
    auto update = [&](auto& w, const auto& g, Moments& mo) {
      mo.m = beta1 * mo.m + (1.0f - beta1) * g;
      mo.v = beta2 * mo.v + (1.0f - beta2) * g.cwiseProduct(g);
      w.array() -= cfg.mlp_lr * (mo.m.array() / c1) / ((mo.v.array() / c2).sqrt() + eps);
    };
    update(w1, gw1, mw1);
    update(b1, gb1, mb1);
    update(w2, gw2, mw2);
    update(b2, gb2, mb2);
  }
  return MlpOperator(std::move(skip), best_w1, best_b1, best_w2, best_b2);
}

MatD fit_and_apply(const Inputs& train, const MatD& y, const Inputs& test, OperatorFamily family,
                   const ProbeConfig& cfg, std::uint64_t seed) {
  switch (family) {
    case OperatorFamily::Linear: return fit_linear(train, y, cfg.ridge).apply(test);
    case OperatorFamily::Bilinear: return fit_bilinear(train, y, cfg.ridge).apply(test);
    case OperatorFamily::Mlp: return fit_mlp(train, y, cfg, seed).apply(test);
  }
  throw StructuralError("unknown operator family");
}

// Sum of squared errors of held-out predictions over k folds.
double heldout_sse(const ProbeProblem& pb, OperatorFamily family, const ProbeConfig& cfg) {
  const int n = static_cast<int>(pb.size());
  const int k = std::min(cfg.folds, n);
  std::vector<int> perm = all_indices(n);
  Rng rng(derive_seed(cfg.seed, "folds"));
  rng.shuffle(perm);
  double sse = 0.0;
  for (int f = 0; f < k; ++f) {
    std::vector<int> tr, te;
    for (int i = 0; i < n; ++i) (i % k == f ? te : tr).push_back(perm[i]);
    const Inputs in_tr = make_inputs(pb.inputs_left, pb.inputs_right, tr);
    const Inputs in_te = make_inputs(pb.inputs_left, pb.inputs_right, te);
    const MatD pred = fit_and_apply(in_tr, to_matrix(pb.targets, tr), in_te, family, cfg,
                                    derive_seed(cfg.seed, "mlp-fold-" + std::to_string(f)));
    sse += (pred - to_matrix(pb.targets, te)).squaredNorm();
  }
  return sse;
}

double problem_mse(const ProbeProblem& pb, OperatorFamily family, const ProbeConfig& cfg) {
  const double denom = double(pb.size()) * double(pb.targets[0].size());
  if (cfg.folds >= 2 && pb.size() >= 2) return heldout_sse(pb, family, cfg) / denom;
  const auto idx = all_indices(pb.size());
  const Inputs in = make_inputs(pb.inputs_left, pb.inputs_right, idx);
  const MatD y = to_matrix(pb.targets, idx);
  return (fit_and_apply(in, y, in, family, cfg, derive_seed(cfg.seed, "mlp")) - y).squaredNorm() / denom;
}

void check_problem(const ProbeProblem& pb) {
  if (pb.size() == 0) throw StatisticalError("probe fit needs at least one triple");
  if (pb.inputs_left.size() != pb.size() || (pb.binary() && pb.inputs_right.size() != pb.size())) {
    throw StructuralError("probe inputs and targets differ in length");
  }
}

}  // namespace

const char* kind_name(TripleKind k) { return k == TripleKind::Modifier ? "modifier" : "sequence"; }

const char* family_name(OperatorFamily f) {
  switch (f) {
    case OperatorFamily::Linear: return "linear";
    case OperatorFamily::Bilinear: return "bilinear";
    case OperatorFamily::Mlp: return "mlp";
  }
  return "?";
}

void ProbeConfig::validate() const {
  if (!(ridge > 0.0)) throw ConfigError("probe ridge must be positive");
  if (mlp_hidden < 1 || mlp_steps < 0 || mlp_patience < 1) throw ConfigError("bad probe MLP size");
  if (!(mlp_lr > 0.0f)) throw ConfigError("probe lr must be positive");
  if (folds == 1 || folds < 0) throw ConfigError("probe folds must be 0 or >= 2");
  if (max_triples < 0) throw ConfigError("max_triples must be >= 0");
}

PromptStates prompt_hidden_states(const ModelParams& params, std::span<const Example> examples, int batch_size) {
  PromptStates out(examples.size());
  const int d = params.config.d_model;
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    const std::size_t end = std::min(examples.size(), start + batch_size);
    std::vector<Tokens> prompts;
    for (std::size_t i = start; i < end; ++i) prompts.push_back(examples[i].input_tokens);
    const TokenBatch batch = TokenBatch::from(prompts);
    Tape tape;
    const TapeForward f = forward_on_tape(tape, params, batch, false);
    for (std::size_t i = start; i < end; ++i) {
      const int len = static_cast<int>(prompts[i - start].size());
      for (const Var& h : f.hidden) {
        const auto first = h.value().data.begin() + std::size_t(i - start) * batch.length * d;
        out[i].emplace_back(std::vector<int>{len, d}, std::vector<float>(first, first + std::size_t(len) * d));
      }
    }
  }
  return out;
}

std::vector<ProbeTriple> mine_modifier_triples(const Example& ex, const Tensor& hidden, int layer,
                                               const VocabSpec& vocab) {
  std::vector<ProbeTriple> out;
  const Tokens& toks = ex.input_tokens;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    if (vocab.kind(toks[i]) != TokenKind::Primitive) continue;
    std::size_t j = i + 1;
    while (j < toks.size() && vocab.kind(toks[j]) == TokenKind::Noise) ++j;
    if (j == toks.size() || vocab.kind(toks[j]) != TokenKind::Modifier) continue;
    ProbeTriple t;
    t.kind = TripleKind::Modifier;
    t.layer = layer;
    t.tag = vocab.local_id(toks[j]);
    t.left = row(hidden, static_cast<int>(i));
    t.right = row(hidden, static_cast<int>(j));
    t.combined = midpoint(t.left, t.right);
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<ProbeTriple> mine_sequence_triples(const Example& ex, const Tensor& hidden, int layer,
                                               const VocabSpec& vocab) {
  std::vector<std::vector<int>> segments(1);
  std::vector<int> connectors;
  for (std::size_t i = 0; i < ex.input_tokens.size(); ++i) {
    const TokenKind k = vocab.kind(ex.input_tokens[i]);
    if (k == TokenKind::Connector) {
      connectors.push_back(vocab.local_id(ex.input_tokens[i]));
      segments.emplace_back();
    } else if (k == TokenKind::Primitive || k == TokenKind::Modifier) {
      segments.back().push_back(static_cast<int>(i));
    }
  }
  const int d = hidden.cols();
  auto pool = [&](const std::vector<int>& pos) {
    std::vector<float> m(d, 0.0f);
    for (int p : pos)
      for (int j = 0; j < d; ++j) m[j] += hidden.data[std::size_t(p) * d + j];
    for (float& v : m) v /= static_cast<float>(pos.size());
    return m;
  };
  std::vector<ProbeTriple> out;
  for (std::size_t c = 0; c < connectors.size(); ++c) {
    if (segments[c].empty() || segments[c + 1].empty()) continue;
    ProbeTriple t;
    t.kind = TripleKind::Sequence;
    t.layer = layer;
    t.tag = connectors[c];
    t.left = pool(segments[c]);
    t.right = pool(segments[c + 1]);
    t.combined = midpoint(t.left, t.right);
    out.push_back(std::move(t));
  }
  return out;
}

namespace {

template <typename Miner>
std::vector<ProbeTriple> mine_all(const ModelParams& params, std::span<const Example> examples, int layer,
                                  const VocabSpec& vocab, Miner miner) {
  if (layer < 1 || layer > params.config.n_layers) throw ConfigError("probe layer out of range");
  const PromptStates states = prompt_hidden_states(params, examples);
  std::vector<ProbeTriple> out;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    auto t = miner(examples[i], states[i][layer - 1], layer, vocab);
    std::move(t.begin(), t.end(), std::back_inserter(out));
  }
  return out;
}

}  // namespace

std::vector<ProbeTriple> mine_modifier_triples(const ModelParams& params, std::span<const Example> examples,
                                               int layer, const VocabSpec& vocab) {
  return mine_all(params, examples, layer, vocab,
                  [](const Example& e, const Tensor& h, int l, const VocabSpec& v) {
                    return mine_modifier_triples(e, h, l, v);
                  });
}

std::vector<ProbeTriple> mine_sequence_triples(const ModelParams& params, std::span<const Example> examples,
                                               int layer, const VocabSpec& vocab) {
  return mine_all(params, examples, layer, vocab,
                  [](const Example& e, const Tensor& h, int l, const VocabSpec& v) {
                    return mine_sequence_triples(e, h, l, v);
                  });
}

ProbeProblem make_problem(std::span<const ProbeTriple> triples, bool unary) {
  ProbeProblem pb;
  for (const auto& t : triples) {
    pb.inputs_left.push_back(t.left);
    if (!unary) pb.inputs_right.push_back(t.right);
    pb.targets.push_back(t.combined);
  }
  return pb;
}

FitOutcome fit_operator(const ProbeProblem& pb, OperatorFamily family, const ProbeConfig& cfg) {
  cfg.validate();
  check_problem(pb);
  const auto idx = all_indices(pb.size());
  const Inputs in = make_inputs(pb.inputs_left, pb.inputs_right, idx);
  const MatD y = to_matrix(pb.targets, idx);
  FitOutcome out;
  const double denom = double(y.rows()) * double(y.cols());
  switch (family) {
    case OperatorFamily::Linear: {
      auto op = std::make_shared<LinearOperator>(fit_linear(in, y, cfg.ridge));
      out.train_mse = (op->apply(in) - y).squaredNorm() / denom;
      out.op = op;
      break;
    }
    case OperatorFamily::Bilinear: {
      auto op = std::make_shared<BilinearOperator>(fit_bilinear(in, y, cfg.ridge));
      out.train_mse = (op->apply(in) - y).squaredNorm() / denom;
      out.op = op;
      break;
    }
    case OperatorFamily::Mlp: {
      auto op = std::make_shared<MlpOperator>(fit_mlp(in, y, cfg, derive_seed(cfg.seed, "mlp")));
      out.train_mse = (op->apply(in) - y).squaredNorm() / denom;
      out.op = op;
      break;
    }
  }
  out.mse = cfg.folds >= 2 && pb.size() >= 2 ? heldout_sse(pb, family, cfg) / denom : out.train_mse;
  return out;
}

FitOutcome fit_operator(std::span<const ProbeTriple> triples, OperatorFamily family, const ProbeConfig& cfg) {
  if (triples.empty()) throw StatisticalError("probe fit needs at least one triple");
  for (const auto& t : triples) {
    if (t.kind != triples[0].kind || t.layer != triples[0].layer || t.tag != triples[0].tag) {
      throw StructuralError("probe triples must share layer, kind and tag");
    }
  }
  const bool unary = triples[0].kind == TripleKind::Modifier && cfg.unary_modifier;
  return fit_operator(make_problem(triples, unary), family, cfg);
}

HEReport compute_he_report(const ModelParams& params, std::span<const Example> examples, const VocabSpec& vocab,
                           const ProbeConfig& cfg) {
  cfg.validate();
  HEReport report;
  const PromptStates states = prompt_hidden_states(params, examples);
  const int min_triples = cfg.folds >= 2 ? 2 : 1;
  std::vector<double> mod_layers, seq_layers;
  for (int layer = 1; layer <= params.config.n_layers; ++layer) {
    std::map<std::pair<TripleKind, int>, std::vector<ProbeTriple>> groups;
    for (std::size_t i = 0; i < examples.size(); ++i) {
      const Tensor& h = states[i][layer - 1];
      for (auto& t : mine_modifier_triples(examples[i], h, layer, vocab)) groups[{t.kind, t.tag}].push_back(std::move(t));
      for (auto& t : mine_sequence_triples(examples[i], h, layer, vocab)) groups[{t.kind, t.tag}].push_back(std::move(t));
    }
    for (TripleKind kind : {TripleKind::Modifier, TripleKind::Sequence}) {
      double sums[3] = {0, 0, 0};
      int tags = 0, count = 0;
      for (auto& [key, triples] : groups) {
        if (key.first != kind || static_cast<int>(triples.size()) < min_triples) continue;
        const std::string label = std::string(kind_name(kind)) + "/" + std::to_string(key.second);
        if (cfg.max_triples > 0 && static_cast<int>(triples.size()) > cfg.max_triples) {
          // Same subset at every layer: the triple order does not depend on the layer.
          Rng rng(derive_seed(cfg.seed, "subsample/" + label));
          rng.shuffle(triples);
          triples.resize(cfg.max_triples);
        }
        ProbeConfig tag_cfg = cfg;
        tag_cfg.seed = derive_seed(cfg.seed, label + "/" + std::to_string(layer));
        const ProbeProblem pb = make_problem(triples, kind == TripleKind::Modifier && cfg.unary_modifier);
        for (int f = 0; f < 3; ++f) sums[f] += problem_mse(pb, kAllFamilies[f], tag_cfg);
        ++tags;
        count += static_cast<int>(triples.size());
      }
      if (tags == 0) continue;
      FamilyScores s;
      s.linear = sums[0] / tags;
      s.bilinear = sums[1] / tags;
      s.mlp = sums[2] / tags;
      s.mean = (*s.linear + *s.bilinear + *s.mlp) / 3.0;
      s.triples = count;
      if (*s.mlp > *s.linear + 1e-6) {
        report.diagnostics.push_back("layer " + std::to_string(layer) + " " + kind_name(kind) +
                                     ": mlp above linear");
      }
      (kind == TripleKind::Modifier ? mod_layers : seq_layers).push_back(*s.mean);
      report.layers[layer][kind] = s;
    }
  }
  auto avg = [](const std::vector<double>& v) -> std::optional<double> {
    if (v.empty()) return std::nullopt;
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  report.he_mod_mean = avg(mod_layers);
  report.he_seq_mean = avg(seq_layers);
  return report;
}

std::string he_report_json(const HEReport& r) {
  using nlohmann::ordered_json;
  auto opt = [](const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json(nullptr); };
  ordered_json j;
  ordered_json layers = ordered_json::object();
  for (const auto& [layer, kinds] : r.layers) {
    ordered_json lj = ordered_json::object();
    for (const auto& [kind, s] : kinds) {
      lj[kind_name(kind)] = {{"linear", opt(s.linear)},
                             {"bilinear", opt(s.bilinear)},
                             {"mlp", opt(s.mlp)},
                             {"mean", opt(s.mean)},
                             {"triples", s.triples}};
    }
    layers[std::to_string(layer)] = lj;
  }
  j["layers"] = layers;
  j["he_mod_mean"] = opt(r.he_mod_mean);
  j["he_seq_mean"] = opt(r.he_seq_mean);
  j["diagnostics"] = r.diagnostics;
  return j.dump(2);
}

}  // namespace hecomp
