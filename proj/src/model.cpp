#include "hecomp/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <Eigen/Dense>
#include <json.hpp>

#include "hecomp/error.hpp"
#include "hecomp/rng.hpp"

namespace hecomp {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using RowVec = Eigen::Map<const Eigen::RowVectorXf>;

ConstMap mat(const Tensor& t) { return ConstMap(t.data.data(), t.rows(), t.cols()); }
RowVec vec(const Tensor& t) { return RowVec(t.data.data(), static_cast<Eigen::Index>(t.numel())); }

void check_tokens(std::span<const int> ids, const ModelConfig& cfg) {
  for (int t : ids) {
    if (t < 0 || t >= cfg.vocab_size) {
      throw StructuralError("token id " + std::to_string(t) + " outside vocabulary of " +
                            std::to_string(cfg.vocab_size));
    }
  }
}

}  // namespace

void ModelConfig::validate() const {
  if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0) {
    throw ConfigError("d_model must be a positive multiple of n_heads");
  }
  if (d_ff <= 0 || n_layers <= 0 || vocab_size <= 0 || max_len <= 0) {
    throw ConfigError("model dimensions must be positive");
  }
}

std::int64_t parameter_count(const ModelConfig& c) {
  const std::int64_t d = c.d_model, f = c.d_ff, v = c.vocab_size;
  const std::int64_t per_layer = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
  return v * d + std::int64_t(c.max_len) * d + c.n_layers * per_layer + 2 * d + d * v + v;
}

std::int64_t ModelParams::count() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : tensors) n += static_cast<std::int64_t>(t.numel());
  return n;
}

std::vector<Tensor> ModelParams::values() const {
  std::vector<Tensor> out;
  out.reserve(tensors.size());
  for (const auto& [name, t] : tensors) out.push_back(t);
  return out;
}

void ModelParams::assign(std::span<const Tensor> values) {
  if (values.size() != tensors.size()) throw StructuralError("parameter count mismatch");
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i].shape != tensors[i].second.shape) throw StructuralError("parameter shape mismatch");
    tensors[i].second = values[i];
  }
}

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const int d = cfg.d_model, f = cfg.d_ff, v = cfg.vocab_size;
  ModelParams p;
  p.config = cfg;
  auto normal = [&](std::string name, std::vector<int> shape) {
    Tensor t(std::move(shape));
    for (float& x : t.data) x = static_cast<float>(0.02 * rng.normal());
    p.tensors.emplace_back(std::move(name), std::move(t));
  };
  auto constant = [&](std::string name, std::vector<int> shape, float value) {
    p.tensors.emplace_back(std::move(name), Tensor(std::move(shape), value));
  };
  normal("tok_emb", {v, d});
  normal("pos_emb", {cfg.max_len, d});
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string pre = "block" + std::to_string(l + 1) + ".";
    constant(pre + "ln1.g", {d}, 1.0f);
    constant(pre + "ln1.b", {d}, 0.0f);
    normal(pre + "attn.wqkv", {d, 3 * d});
    constant(pre + "attn.bqkv", {3 * d}, 0.0f);
    normal(pre + "attn.wo", {d, d});
    constant(pre + "attn.bo", {d}, 0.0f);
    constant(pre + "ln2.g", {d}, 1.0f);
    constant(pre + "ln2.b", {d}, 0.0f);
    normal(pre + "ff.w1", {d, f});
    constant(pre + "ff.b1", {f}, 0.0f);
    normal(pre + "ff.w2", {f, d});
    constant(pre + "ff.b2", {d}, 0.0f);
  }
  constant("lnf.g", {d}, 1.0f);
  constant("lnf.b", {d}, 0.0f);
  normal("out.w", {d, v});
  constant("out.b", {v}, 0.0f);
  return p;
}

std::string config_to_text(const ModelConfig& c) {
  nlohmann::ordered_json j{{"d_model", c.d_model}, {"n_heads", c.n_heads},       {"d_ff", c.d_ff},
                           {"n_layers", c.n_layers}, {"vocab_size", c.vocab_size}, {"max_len", c.max_len}};
  return j.dump(2) + "\n";
}

namespace {

ModelConfig config_from_text(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  ModelConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "d_model") c.d_model = value.get<int>();
    else if (key == "n_heads") c.n_heads = value.get<int>();
    else if (key == "d_ff") c.d_ff = value.get<int>();
    else if (key == "n_layers") c.n_layers = value.get<int>();
    else if (key == "vocab_size") c.vocab_size = value.get<int>();
    else if (key == "max_len") c.max_len = value.get<int>();
    else throw ConfigError("unknown model config key '" + key + "'");
  }
  c.validate();
  return c;
}

}  // namespace

void save_model(const std::string& path, const ModelParams& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw StructuralError("cannot open " + path);
  write_checkpoint(out, params.tensors);
  std::ofstream cfg(path + ".json");
  cfg << config_to_text(params.config);
}

ModelParams load_model(const std::string& path) {
  std::ifstream cfg_in(path + ".json");
  if (!cfg_in) throw StructuralError("missing model config " + path + ".json");
  const std::string text((std::istreambuf_iterator<char>(cfg_in)), std::istreambuf_iterator<char>());
  ModelParams p = init_params(config_from_text(text), 0);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StructuralError("cannot open " + path);
  NamedTensors loaded = read_checkpoint(in);
  if (loaded.size() != p.tensors.size()) throw StructuralError("checkpoint does not match config");
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    if (loaded[i].first != p.tensors[i].first || loaded[i].second.shape != p.tensors[i].second.shape) {
      throw StructuralError("checkpoint entry '" + loaded[i].first + "' does not match config");
    }
  }
  p.tensors = std::move(loaded);
  return p;
}

TokenBatch TokenBatch::from(std::span<const Tokens> seqs) {
  TokenBatch b;
  b.batch = static_cast<int>(seqs.size());
  for (const auto& s : seqs) b.length = std::max(b.length, static_cast<int>(s.size()));
  b.ids.assign(std::size_t(b.batch) * b.length, VocabSpec::kPad);
  for (int i = 0; i < b.batch; ++i) {
    std::copy(seqs[i].begin(), seqs[i].end(), b.ids.begin() + std::size_t(i) * b.length);
  }
  return b;
}

TapeForward forward_on_tape(Tape& tape, const ModelParams& params, const TokenBatch& batch,
                            bool requires_grad, int layers_to_run) {
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) leaves.push_back(tape.leaf(params.at(i), requires_grad));
  return forward_on_tape(tape, params, leaves, batch, layers_to_run);
}

TapeForward forward_on_tape(Tape& /*tape*/, const ModelParams& params, std::span<const Var> param_vars,
                            const TokenBatch& batch, int layers_to_run) {
  const ModelConfig& cfg = params.config;
  if (param_vars.size() != params.size()) throw StructuralError("parameter leaf count mismatch");
  if (batch.length > cfg.max_len) throw StructuralError("sequence longer than max_len");
  check_tokens(batch.ids, cfg);
  const int B = batch.batch, T = batch.length, H = cfg.n_heads, dh = cfg.head_dim();
  const int run = layers_to_run > 0 ? std::min(layers_to_run, cfg.n_layers) : cfg.n_layers;

  TapeForward out;
  out.params.assign(param_vars.begin(), param_vars.end());
  auto P = [&](int i) { return out.params[i]; };
  auto L = [&](int l, ModelParams::LayerSlot s) { return out.params[params.layer_index(l, s)]; };

  std::vector<int> positions(std::size_t(B) * T);
  for (int b = 0; b < B; ++b)
    for (int t = 0; t < T; ++t) positions[std::size_t(b) * T + t] = t;

  Var x = add(embedding_lookup(P(ModelParams::kTokEmb), batch.ids),
              gather_rows(P(ModelParams::kPosEmb), positions));
  const float att_scale = 1.0f / std::sqrt(static_cast<float>(dh));

  for (int l = 0; l < run; ++l) {
    Var h = layer_norm(x, L(l, ModelParams::Ln1G), L(l, ModelParams::Ln1B));
    Var qkv = linear(h, L(l, ModelParams::Wqkv), L(l, ModelParams::Bqkv));
    Var ctx = causal_attention(qkv, B, H, att_scale);
    x = add(x, linear(ctx, L(l, ModelParams::Wo), L(l, ModelParams::Bo)));
    Var h2 = layer_norm(x, L(l, ModelParams::Ln2G), L(l, ModelParams::Ln2B));
    Var ff = relu(linear(h2, L(l, ModelParams::W1), L(l, ModelParams::B1)));
    x = add(x, linear(ff, L(l, ModelParams::W2), L(l, ModelParams::B2)));
    out.hidden.push_back(x);
  }
  if (run == cfg.n_layers) {
    Var hf = layer_norm(x, P(params.final_index(0)), P(params.final_index(1)));
    out.logits = linear(hf, P(params.final_index(2)), P(params.final_index(3)));
  }
  return out;
}

namespace {

void layer_norm_rows(const RowMat& x, const Tensor& g, const Tensor& b, RowMat& y, float eps = 1e-5f) {
  const int r = static_cast<int>(x.rows()), c = static_cast<int>(x.cols());
  y.resize(r, c);
  for (int i = 0; i < r; ++i) {
    const float* xi = x.data() + std::size_t(i) * c;
    float mu = 0.0f;
    for (int j = 0; j < c; ++j) mu += xi[j];
    mu /= c;
    float var = 0.0f;
    for (int j = 0; j < c; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= c;
    const float rs = 1.0f / std::sqrt(var + eps);
    float* yi = y.data() + std::size_t(i) * c;
    for (int j = 0; j < c; ++j) yi[j] = (xi[j] - mu) * rs * g.data[j] + b.data[j];
  }
}

// Incremental evaluator with a key/value cache. Rows advance in lockstep.
class CachedRunner {
 public:
  CachedRunner(const ModelParams& params, int rows, int capacity)
      : p_(params), cfg_(params.config), rows_(rows), cap_(capacity) {
    const std::size_t per = std::size_t(rows) * cfg_.n_heads * cap_ * cfg_.head_dim();
    k_.assign(cfg_.n_layers, FloatBuffer(per));
    v_.assign(cfg_.n_layers, FloatBuffer(per));
  }

  // Feeds n new tokens per row (ids laid out row-major [rows, n]). Returns
  // logits [rows * n, vocab]; fills per-layer hidden states when asked.
  RowMat step(std::span<const int> ids, int n, std::vector<RowMat>* hidden = nullptr) {
    const int d = cfg_.d_model, H = cfg_.n_heads, dh = cfg_.head_dim();
    if (pos_ + n > cap_ || pos_ + n > cfg_.max_len) throw StructuralError("sequence longer than max_len");
    check_tokens(ids, cfg_);
    const int R = rows_ * n;
    const Tensor& tok = p_.at(ModelParams::kTokEmb);
    const Tensor& pos = p_.at(ModelParams::kPosEmb);
    RowMat x(R, d);
    for (int r = 0; r < rows_; ++r)
      for (int t = 0; t < n; ++t) {
        const int row = r * n + t;
        const float* te = tok.data.data() + std::size_t(ids[row]) * d;
        const float* pe = pos.data.data() + std::size_t(pos_ + t) * d;
        for (int j = 0; j < d; ++j) x(row, j) = te[j] + pe[j];
      }
    const float att_scale = 1.0f / std::sqrt(static_cast<float>(dh));
    RowMat h, qkv, ctx(R, d), scores;
    for (int l = 0; l < cfg_.n_layers; ++l) {
      auto W = [&](ModelParams::LayerSlot s) -> const Tensor& { return p_.at(p_.layer_index(l, s)); };
      layer_norm_rows(x, W(ModelParams::Ln1G), W(ModelParams::Ln1B), h);
      qkv.noalias() = h * mat(W(ModelParams::Wqkv));
      qkv.rowwise() += vec(W(ModelParams::Bqkv));
      for (int r = 0; r < rows_; ++r)
        for (int hd = 0; hd < H; ++hd) {
          float* kc = cache(k_[l], r, hd);
          float* vc = cache(v_[l], r, hd);
          for (int t = 0; t < n; ++t) {
            const float* src = qkv.data() + std::size_t(r * n + t) * 3 * d;
            std::memcpy(kc + std::size_t(pos_ + t) * dh, src + d + hd * dh, sizeof(float) * dh);
            std::memcpy(vc + std::size_t(pos_ + t) * dh, src + 2 * d + hd * dh, sizeof(float) * dh);
          }
          const int span = pos_ + n;
          Eigen::Map<const RowMat, 0, Eigen::OuterStride<>> q(qkv.data() + std::size_t(r * n) * 3 * d + hd * dh, n,
                                                               dh, Eigen::OuterStride<>(3 * d));
          ConstMap K(kc, span, dh), V(vc, span, dh);
          scores.noalias() = (q * K.transpose()) * att_scale;
          for (int t = 0; t < n; ++t) {
            const int visible = pos_ + t + 1;
            float* s = scores.data() + std::size_t(t) * span;
            float mx = s[0];
            for (int j = 1; j < visible; ++j) mx = std::max(mx, s[j]);
            float tot = 0.0f;
            for (int j = 0; j < visible; ++j) {
              s[j] = std::exp(s[j] - mx);
              tot += s[j];
            }
            const float inv = 1.0f / tot;
            for (int j = 0; j < visible; ++j) s[j] *= inv;
            for (int j = visible; j < span; ++j) s[j] = 0.0f;
          }
          ctx.block(r * n, hd * dh, n, dh).noalias() = scores * V;
        }
      x.noalias() += ctx * mat(W(ModelParams::Wo));
      x.rowwise() += vec(W(ModelParams::Bo));
      layer_norm_rows(x, W(ModelParams::Ln2G), W(ModelParams::Ln2B), h);
      RowMat f = h * mat(W(ModelParams::W1));
      f.rowwise() += vec(W(ModelParams::B1));
      f = f.cwiseMax(0.0f);
      x.noalias() += f * mat(W(ModelParams::W2));
      x.rowwise() += vec(W(ModelParams::B2));
      if (hidden) hidden->push_back(x);
    }
    pos_ += n;
    layer_norm_rows(x, p_.at(p_.final_index(0)), p_.at(p_.final_index(1)), h);
    RowMat logits = h * mat(p_.at(p_.final_index(2)));
    logits.rowwise() += vec(p_.at(p_.final_index(3)));
    if (!logits.allFinite()) throw NumericError("non-finite logits");
    return logits;
  }

  int position() const { return pos_; }

 private:
  float* cache(FloatBuffer& buf, int row, int head) {
    return buf.data() + (std::size_t(row) * cfg_.n_heads + head) * cap_ * cfg_.head_dim();
  }

  const ModelParams& p_;
  const ModelConfig& cfg_;
  int rows_;
  int cap_;
  int pos_ = 0;
  std::vector<FloatBuffer> k_, v_;
};

Tensor to_tensor(const RowMat& m) {
  Tensor t({static_cast<int>(m.rows()), static_cast<int>(m.cols())});
  std::memcpy(t.data.data(), m.data(), sizeof(float) * t.numel());
  return t;
}

}  // namespace

ForwardOutput forward(const Tokens& tokens, const ModelParams& params) {
  const int T = static_cast<int>(tokens.size());
  if (T == 0) throw StructuralError("empty token sequence");
  if (T > params.config.max_len) throw StructuralError("sequence longer than max_len");
  CachedRunner runner(params, 1, T);
  std::vector<RowMat> hidden;
  RowMat logits = runner.step(tokens, T, &hidden);
  ForwardOutput out;
  out.logits = to_tensor(logits);
  for (const auto& h : hidden) out.hidden.push_back(to_tensor(h));
  return out;
}

std::vector<Decoded> greedy_decode_batch(std::span<const Tokens> prefixes, const ModelParams& params,
                                         int max_out) {
  std::vector<Decoded> out(prefixes.size());
  if (prefixes.empty() || max_out <= 0) return out;
  const int rows = static_cast<int>(prefixes.size());
  const int Tp = static_cast<int>(prefixes[0].size());
  for (const auto& p : prefixes) {
    if (static_cast<int>(p.size()) != Tp) throw StructuralError("greedy_decode_batch needs equal-length prefixes");
    if (p.empty() || p.back() != VocabSpec::kSep) throw StructuralError("decode prefix must end with SEP");
  }
  if (Tp > params.config.max_len) throw StructuralError("prefix longer than max_len");
  // The last generated token is never fed back, so max_len - Tp + 1 tokens fit.
  max_out = std::min(max_out, params.config.max_len - Tp + 1);
  CachedRunner runner(params, rows, Tp + max_out);

  std::vector<int> ids;
  ids.reserve(std::size_t(rows) * Tp);
  for (const auto& p : prefixes) ids.insert(ids.end(), p.begin(), p.end());
  RowMat logits = runner.step(ids, Tp);
  std::vector<char> done(rows, 0);
  int live = rows;
  for (int step = 0; step < max_out && live > 0; ++step) {
    const int stride = step == 0 ? Tp : 1;
    std::vector<int> next(rows, VocabSpec::kPad);
    for (int r = 0; r < rows; ++r) {
      if (done[r]) continue;
      const float* row = logits.data() + (std::size_t(r) * stride + stride - 1) * logits.cols();
      int best = 0;
      for (int j = 1; j < logits.cols(); ++j) {
        if (row[j] > row[best]) best = j;
      }
      out[r].tokens.push_back(best);
      next[r] = best;
      if (best == VocabSpec::kEos) {
        out[r].terminated = true;
        done[r] = 1;
        --live;
      }
    }
    if (live == 0 || step + 1 == max_out) break;
    logits = runner.step(next, 1);
  }
  return out;
}

Decoded greedy_decode(const Tokens& prefix, const ModelParams& params, int max_out) {
  std::span<const Tokens> one(&prefix, 1);
  return greedy_decode_batch(one, params, max_out)[0];
}

}  // namespace hecomp
