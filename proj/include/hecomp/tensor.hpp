#pragma once

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <initializer_list>
#include <new>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace hecomp {

// 64-byte aligned storage. Vectorized reductions peel unaligned heads, so
// without this the rounding of a sum would depend on where the buffer landed.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using FloatBuffer = std::vector<float, AlignedAllocator<float>>;

// Row-major float32 n-d array.
struct Tensor {
  std::vector<int> shape;
  FloatBuffer data;

  Tensor() = default;
  explicit Tensor(std::vector<int> shape, float fill = 0.0f);
  Tensor(std::vector<int> shape, std::span<const float> values);
  Tensor(std::vector<int> shape, std::initializer_list<float> values)
      : Tensor(std::move(shape), std::span<const float>(values.begin(), values.size())) {}

  std::size_t numel() const { return data.size(); }
  int ndim() const { return static_cast<int>(shape.size()); }
  // Negative indices count from the back.
  int dim(int i) const;
  // Product of all dims but the last.
  int rows() const;
  int cols() const { return shape.empty() ? 1 : shape.back(); }

  float& operator[](std::size_t i) { return data[i]; }
  float operator[](std::size_t i) const { return data[i]; }
  float item() const;

  bool all_finite() const;
};

std::size_t shape_numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

class Tape;

// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Tensor& value() const;
  const std::vector<int>& shape() const { return value().shape; }
};

// Reverse-mode record. Nodes are appended in creation order, which is a
// topological order, so backward is a single reverse sweep. A tape can be
// differentiated once.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  Var constant(Tensor value);
  Var leaf(Tensor value, bool requires_grad = true);

  // Records an op output. `backward` receives the node id and must push the
  // node's gradient into its parents via accumulate().
  Var record(Tensor value, std::vector<int> parents, BackwardFn backward, const char* op);

  // Runs the reverse sweep from a scalar node.
  void backward(Var loss);

  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  const Tensor& value(int id) const { return nodes_[id].value; }
  // Gradient of the last backward() target w.r.t. node id; zeros when the
  // node did not influence the loss.
  Tensor grad(Var v) const;
  const Tensor& grad_ref(int id) const { return nodes_[id].grad; }
  bool has_grad(int id) const { return !nodes_[id].grad.data.empty(); }

  // Adds g into the gradient buffer of node id (allocating zeros on first use).
  void accumulate(int id, std::span<const float> g);
  Tensor& grad_buffer(int id);

  std::size_t size() const { return nodes_.size(); }
  bool differentiated() const { return differentiated_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<int> parents;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  bool differentiated_ = false;
};

// Forward ops. All check shapes (StructuralError) and finiteness of their
// output (NumericError).

// a[..., k] x b[k, n] -> [..., n]
Var matmul(Var a, Var b);
// x[..., k] x w[k, n] + b[n]
Var linear(Var x, Var w, Var b);
// a[B, m, k] x b[B, k, n] -> [B, m, n]; with transpose_b, b is [B, n, k].
Var batched_matmul(Var a, Var b, bool transpose_b = false);
// Multi-head causal self-attention over packed qkv[B*T, 3d] (q, k, v blocks
// along the last axis, heads contiguous inside each block) -> [B*T, d].
Var causal_attention(Var qkv, int batch, int heads, float scale);
// Same shape, or b is a 1-d vector broadcast along the last axis.
Var add(Var a, Var b);
Var sub(Var a, Var b);
// Elementwise, same shape.
Var multiply(Var a, Var b);
Var scale(Var a, float s);
// Concatenation along the last axis.
Var concat(std::span<const Var> parts);
// Columns [start, start + len) of the last axis.
Var slice(Var a, int start, int len);
// Mean over one axis, which is removed from the shape.
Var mean(Var a, int axis);
Var sum_all(Var a);
// Softmax over the last axis. With causal, a trailing [T, T] block is
// masked so row i only sees columns <= i.
Var softmax(Var a, bool causal = false);
Var layer_norm(Var x, Var gain, Var bias, float eps = 1e-5f);
Var relu(Var a);
// Rows of table[V, d] picked by ids -> [n, d]. Out-of-range ids throw.
Var embedding_lookup(Var table, std::span<const int> ids);
// Rows of a[N, d] picked by index -> [n, d] (gather with scatter-add grad).
Var gather_rows(Var a, std::span<const int> rows);
Var reshape(Var a, std::vector<int> shape);
// [A, B, C, D] -> [A, C, B, D]; used to split and merge attention heads.
Var swap_middle(Var a);
// Mean token cross-entropy over positions with mask != 0. logits [N, V].
Var cross_entropy_with_mask(Var logits, std::span<const int> targets, std::span<const float> mask);

struct AdamConfig {
  float lr = 1e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.98f;
  float eps = 1e-8f;
};

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  long step = 0;
};

AdamState make_adam_state(std::span<const Tensor> params);

// Bias-corrected Adam update, in place.
void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state,
               const AdamConfig& cfg);
void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state,
               const AdamConfig& cfg);

// Named parameter list in a fixed order.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// Binary checkpoint: magic, version, manifest of (name, shape), then raw
// little-endian float32 buffers in manifest order.
void write_checkpoint(std::ostream& out, const NamedTensors& tensors);
NamedTensors read_checkpoint(std::istream& in);

}  // namespace hecomp
