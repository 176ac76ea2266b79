#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "hecomp/grammar.hpp"
#include "hecomp/tensor.hpp"

namespace hecomp {

struct ModelConfig {
  int d_model = 128;
  int n_heads = 4;
  int d_ff = 256;
  int n_layers = 4;
  int vocab_size = 0;
  int max_len = 128;

  void validate() const;
  int head_dim() const { return d_model / n_heads; }
};

// Closed-form parameter count for a config.
std::int64_t parameter_count(const ModelConfig& cfg);

// Parameter tensors in a fixed, named order. Index constants below address
// the per-layer block; see ModelParams::layer().
struct ModelParams {
  ModelConfig config;
  NamedTensors tensors;

  static constexpr int kTokEmb = 0;
  static constexpr int kPosEmb = 1;
  static constexpr int kPerLayer = 12;
  enum LayerSlot { Ln1G, Ln1B, Wqkv, Bqkv, Wo, Bo, Ln2G, Ln2B, W1, B1, W2, B2 };

  int layer_index(int layer, LayerSlot slot) const { return 2 + layer * kPerLayer + slot; }
  int final_index(int k) const { return 2 + config.n_layers * kPerLayer + k; }  // lnf.g, lnf.b, out.w, out.b

  const Tensor& at(int i) const { return tensors[i].second; }
  Tensor& at(int i) { return tensors[i].second; }
  std::size_t size() const { return tensors.size(); }
  std::int64_t count() const;

  std::vector<Tensor> values() const;
  void assign(std::span<const Tensor> values);
};

// Normal(0, 0.02) weights and embeddings, zero biases, unit layer-norm gains.
ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed);

void save_model(const std::string& path, const ModelParams& params);
ModelParams load_model(const std::string& path);
// Structured text snapshot of the config ("key = value" lines).
std::string config_to_text(const ModelConfig& cfg);

// A batch of right-padded token sequences.
struct TokenBatch {
  int batch = 0;
  int length = 0;
  std::vector<int> ids;  // batch * length, PAD-filled
  static TokenBatch from(std::span<const Tokens> seqs);
};

struct TapeForward {
  std::vector<Var> params;  // one leaf per parameter tensor, in order
  std::vector<Var> hidden;  // [batch * length, d_model] after each block
  Var logits;               // [batch * length, vocab]
};

// Records the forward pass on a tape. Only the first `layers_to_run` blocks
// are evaluated when it is positive (used by the auxiliary HE pass); logits
// are then left unbound.
TapeForward forward_on_tape(Tape& tape, const ModelParams& params, const TokenBatch& batch,
                            bool requires_grad = true, int layers_to_run = -1);

// Same, reusing parameter leaves already on the tape so that gradients from
// several passes accumulate into one set of nodes.
TapeForward forward_on_tape(Tape& tape, const ModelParams& params, std::span<const Var> param_vars,
                            const TokenBatch& batch, int layers_to_run = -1);

// Inference-only output for one sequence.
struct ForwardOutput {
  Tensor logits;                // [T, vocab]
  std::vector<Tensor> hidden;   // n_layers entries of [T, d_model]
};

ForwardOutput forward(const Tokens& tokens, const ModelParams& params);

struct Decoded {
  Tokens tokens;            // generated tokens, including EOS when reached
  bool terminated = false;  // EOS was produced within max_out
};

// Greedy argmax decoding (lowest id wins ties) after a prefix ending in SEP.
Decoded greedy_decode(const Tokens& prefix, const ModelParams& params, int max_out);

// Batched greedy decoding for prefixes of equal length. Matches greedy_decode
// per prefix up to float rounding in the batched products.
std::vector<Decoded> greedy_decode_batch(std::span<const Tokens> prefixes, const ModelParams& params,
                                         int max_out);

}  // namespace hecomp
