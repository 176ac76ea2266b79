#include "hecomp/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <memory>
#include <numeric>
#include <ostream>
#include <sstream>

#include <Eigen/Dense>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "hecomp/error.hpp"

namespace hecomp {

namespace {

#if defined(__GLIBC__)
// Tape buffers are freed and reallocated every step; keep them on the heap
// instead of fresh mmap pages so the zero-fill does not page-fault each time.
const bool kMallocTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
  return true;
}();
#endif

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

MatMap as_mat(FloatBuffer& d, int r, int c) { return MatMap(d.data(), r, c); }
ConstMatMap as_mat(const FloatBuffer& d, int r, int c) { return ConstMatMap(d.data(), r, c); }
MatMap as_mat(float* p, int r, int c) { return MatMap(p, r, c); }
ConstMatMap as_mat(const float* p, int r, int c) { return ConstMatMap(p, r, c); }

void require(bool ok, const std::string& msg) {
  if (!ok) throw StructuralError(msg);
}

void same_tape(Var a, Var b) { require(a.tape != nullptr && a.tape == b.tape, "vars live on different tapes"); }

}  // namespace

std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    require(d >= 0, "negative dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(std::vector<int> s, float fill) : shape(std::move(s)), data(shape_numel(shape), fill) {}

Tensor::Tensor(std::vector<int> s, std::span<const float> d) : shape(std::move(s)), data(d.begin(), d.end()) {
  require(shape_numel(shape) == data.size(),
          "shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) + " values");
}

int Tensor::dim(int i) const {
  const int n = ndim();
  if (i < 0) i += n;
  require(i >= 0 && i < n, "dimension index out of range");
  return shape[i];
}

int Tensor::rows() const {
  if (shape.empty()) return 1;
  return static_cast<int>(numel() / std::max(1, shape.back()));
}

float Tensor::item() const {
  require(numel() == 1, "item() on non-scalar tensor " + shape_str(shape));
  return data[0];
}

bool Tensor::all_finite() const {
  return Eigen::Map<const Eigen::ArrayXf>(data.data(), static_cast<Eigen::Index>(data.size())).allFinite();
}

const Tensor& Var::value() const {
  require(tape != nullptr, "unbound Var");
  return tape->value(id);
}

Var Tape::constant(Tensor value) { return leaf(std::move(value), false); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  if (!value.all_finite()) throw NumericError("non-finite leaf value");
  nodes_.push_back(Node{std::move(value), {}, requires_grad, {}, nullptr});
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Tensor value, std::vector<int> parents, BackwardFn backward, const char* op) {
  if (!value.all_finite()) throw NumericError(std::string("non-finite output from ") + op);
  bool rg = false;
  for (int p : parents) rg = rg || nodes_[p].requires_grad;
  nodes_.push_back(Node{std::move(value), {}, rg, std::move(parents), rg ? std::move(backward) : nullptr});
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Tensor& Tape::grad_buffer(int id) {
  Node& n = nodes_[id];
  if (n.grad.data.empty()) n.grad = Tensor(n.value.shape, 0.0f);
  return n.grad;
}

void Tape::accumulate(int id, std::span<const float> g) {
  Tensor& buf = grad_buffer(id);
  require(buf.numel() == g.size(), "gradient size mismatch");
  for (std::size_t i = 0; i < g.size(); ++i) buf.data[i] += g[i];
}

void Tape::backward(Var loss) {
  require(loss.tape == this, "loss is not on this tape");
  if (differentiated_) throw StructuralError("backward already ran on this tape; record a new forward pass");
  require(nodes_[loss.id].value.numel() == 1, "backward needs a scalar loss, got " +
                                                  shape_str(nodes_[loss.id].value.shape));
  differentiated_ = true;
  grad_buffer(loss.id).data[0] = 1.0f;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.requires_grad || !n.backward || n.grad.data.empty()) continue;
    n.backward(*this, id);
  }
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.grad.data.empty()) return Tensor(n.value.shape, 0.0f);
  return n.grad;
}

Var matmul(Var a, Var b) {
  same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(bv.ndim() == 2, "matmul rhs must be 2-d, got " + shape_str(bv.shape));
  require(av.ndim() >= 1 && av.cols() == bv.dim(0),
          "matmul shape mismatch " + shape_str(av.shape) + " x " + shape_str(bv.shape));
  const int m = av.rows(), k = av.cols(), n = bv.dim(1);
  std::vector<int> shape = av.shape;
  shape.back() = n;
  Tensor out(shape);
  as_mat(out.data, m, n).noalias() = as_mat(av.data, m, k) * as_mat(bv.data, k, n);
  return a.tape->record(
      std::move(out), {a.id, b.id},
      [ia = a.id, ib = b.id, m, k, n](Tape& t, int self) {
        auto dy = as_mat(t.grad_ref(self).data, m, n);
        if (t.requires_grad(ia)) {
          as_mat(t.grad_buffer(ia).data, m, k).noalias() += dy * as_mat(t.value(ib).data, k, n).transpose();
        }
        if (t.requires_grad(ib)) {
          as_mat(t.grad_buffer(ib).data, k, n).noalias() += as_mat(t.value(ia).data, m, k).transpose() * dy;
        }
      },
      "matmul");
}

Var linear(Var x, Var w, Var b) {
  same_tape(x, w);
  same_tape(x, b);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  require(wv.ndim() == 2 && xv.ndim() >= 1 && xv.cols() == wv.dim(0) && bv.ndim() == 1 && bv.dim(0) == wv.dim(1),
          "linear shape mismatch " + shape_str(xv.shape) + " x " + shape_str(wv.shape) + " + " + shape_str(bv.shape));
  const int m = xv.rows(), k = xv.cols(), n = wv.dim(1);
  std::vector<int> shape = xv.shape;
  shape.back() = n;
  Tensor out(shape);
  auto y = as_mat(out.data, m, n);
  y.noalias() = as_mat(xv.data, m, k) * as_mat(wv.data, k, n);
  y.rowwise() += Eigen::Map<const Eigen::RowVectorXf>(bv.data.data(), n);
  return x.tape->record(
      std::move(out), {x.id, w.id, b.id},
      [ix = x.id, iw = w.id, ib = b.id, m, k, n](Tape& t, int self) {
        auto dy = as_mat(t.grad_ref(self).data, m, n);
        if (t.requires_grad(ix)) {
          as_mat(t.grad_buffer(ix).data, m, k).noalias() += dy * as_mat(t.value(iw).data, k, n).transpose();
        }
        if (t.requires_grad(iw)) {
          as_mat(t.grad_buffer(iw).data, k, n).noalias() += as_mat(t.value(ix).data, m, k).transpose() * dy;
        }
        if (t.requires_grad(ib)) {
          Eigen::Map<Eigen::RowVectorXf>(t.grad_buffer(ib).data.data(), n) += dy.colwise().sum();
        }
      },
      "linear");
}

Var causal_attention(Var qkv, int batch, int heads, float scale) {
  const Tensor& in = qkv.value();
  require(in.ndim() == 2 && in.cols() % 3 == 0 && batch > 0 && heads > 0 && in.rows() % batch == 0,
          "causal_attention expects [B*T, 3d], got " + shape_str(in.shape));
  const int d = in.cols() / 3, T = in.rows() / batch;
  require(d % heads == 0, "causal_attention: d not divisible by heads");
  const int dh = d / heads, ld = 3 * d;
  using Strided = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
  using StridedOut = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
  // Attention weights per (batch, head), kept for the backward pass.
  auto probs = std::make_shared<FloatBuffer>(std::size_t(batch) * heads * T * T, 0.0f);
  Tensor out({batch * T, d});
  RowMat s(T, T);
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      const float* base = in.data.data() + std::size_t(b) * T * ld + h * dh;
      Strided q(base, T, dh, Eigen::OuterStride<>(ld));
      Strided k(base + d, T, dh, Eigen::OuterStride<>(ld));
      Strided v(base + 2 * d, T, dh, Eigen::OuterStride<>(ld));
      s.noalias() = q * k.transpose();
      auto p = as_mat(probs->data() + (std::size_t(b) * heads + h) * T * T, T, T);
      for (int i = 0; i < T; ++i) {
        const float mx = s.row(i).head(i + 1).maxCoeff() * scale;
        float z = 0.0f;
        for (int j = 0; j <= i; ++j) z += (p(i, j) = std::exp(s(i, j) * scale - mx));
        p.row(i).head(i + 1) /= z;
      }
      StridedOut o(out.data.data() + std::size_t(b) * T * d + h * dh, T, dh, Eigen::OuterStride<>(d));
      o.noalias() = p * v;
    }
  }
  return qkv.tape->record(
      std::move(out), {qkv.id},
      [iq = qkv.id, batch, heads, T, d, dh, ld, scale, probs](Tape& t, int self) {
        if (!t.requires_grad(iq)) return;
        const FloatBuffer& in = t.value(iq).data;
        const FloatBuffer& g = t.grad_ref(self).data;
        FloatBuffer& gin = t.grad_buffer(iq).data;
        RowMat dp(T, T);
        for (int b = 0; b < batch; ++b) {
          for (int h = 0; h < heads; ++h) {
            const std::size_t off = std::size_t(b) * T * ld + h * dh;
            Strided q(in.data() + off, T, dh, Eigen::OuterStride<>(ld));
            Strided k(in.data() + off + d, T, dh, Eigen::OuterStride<>(ld));
            Strided v(in.data() + off + 2 * d, T, dh, Eigen::OuterStride<>(ld));
            StridedOut dq(gin.data() + off, T, dh, Eigen::OuterStride<>(ld));
            StridedOut dk(gin.data() + off + d, T, dh, Eigen::OuterStride<>(ld));
            StridedOut dv(gin.data() + off + 2 * d, T, dh, Eigen::OuterStride<>(ld));
            Strided go(g.data() + std::size_t(b) * T * d + h * dh, T, dh, Eigen::OuterStride<>(d));
            auto p = as_mat(probs->data() + (std::size_t(b) * heads + h) * T * T, T, T);
            dv.noalias() += p.transpose() * go;
            dp.noalias() = go * v.transpose();
            for (int i = 0; i < T; ++i) {
              const float dot = p.row(i).head(i + 1).dot(dp.row(i).head(i + 1));
              for (int j = 0; j < T; ++j) dp(i, j) = j <= i ? p(i, j) * (dp(i, j) - dot) * scale : 0.0f;
            }
            dq.noalias() += dp * k;
            dk.noalias() += dp.transpose() * q;
          }
        }
      },
      "causal_attention");
}

Var batched_matmul(Var a, Var b, bool transpose_b) {
  same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.ndim() == 3 && bv.ndim() == 3 && av.dim(0) == bv.dim(0),
          "batched_matmul needs [B,m,k] and [B,*,*], got " + shape_str(av.shape) + ", " + shape_str(bv.shape));
  const int batch = av.dim(0), m = av.dim(1), k = av.dim(2);
  const int n = transpose_b ? bv.dim(1) : bv.dim(2);
  require((transpose_b ? bv.dim(2) : bv.dim(1)) == k,
          "batched_matmul inner dims differ: " + shape_str(av.shape) + ", " + shape_str(bv.shape));
  Tensor out({batch, m, n});
  for (int i = 0; i < batch; ++i) {
    auto A = as_mat(av.data.data() + std::size_t(i) * m * k, m, k);
    auto y = as_mat(out.data.data() + std::size_t(i) * m * n, m, n);
    if (transpose_b) {
      y.noalias() = A * as_mat(bv.data.data() + std::size_t(i) * n * k, n, k).transpose();
    } else {
      y.noalias() = A * as_mat(bv.data.data() + std::size_t(i) * k * n, k, n);
    }
  }
  return a.tape->record(
      std::move(out), {a.id, b.id},
      [ia = a.id, ib = b.id, batch, m, k, n, transpose_b](Tape& t, int self) {
        const float* dyp = t.grad_ref(self).data.data();
        const float* ap = t.value(ia).data.data();
        const float* bp = t.value(ib).data.data();
        float* dap = t.requires_grad(ia) ? t.grad_buffer(ia).data.data() : nullptr;
        float* dbp = t.requires_grad(ib) ? t.grad_buffer(ib).data.data() : nullptr;
        for (int i = 0; i < batch; ++i) {
          auto dy = as_mat(dyp + std::size_t(i) * m * n, m, n);
          auto A = as_mat(ap + std::size_t(i) * m * k, m, k);
          if (transpose_b) {
            auto B = as_mat(bp + std::size_t(i) * n * k, n, k);
            if (dap) as_mat(dap + std::size_t(i) * m * k, m, k).noalias() += dy * B;
            if (dbp) as_mat(dbp + std::size_t(i) * n * k, n, k).noalias() += dy.transpose() * A;
          } else {
            auto B = as_mat(bp + std::size_t(i) * k * n, k, n);
            if (dap) as_mat(dap + std::size_t(i) * m * k, m, k).noalias() += dy * B.transpose();
            if (dbp) as_mat(dbp + std::size_t(i) * k * n, k, n).noalias() += A.transpose() * dy;
          }
        }
      },
      "batched_matmul");
}

namespace {

Var add_or_sub(Var a, Var b, float sign, const char* op) {
  same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const bool broadcast = av.shape != bv.shape;
  if (broadcast) {
    require(bv.ndim() == 1 && av.ndim() >= 1 && bv.dim(0) == av.cols(),
            std::string(op) + " shape mismatch " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
  }
  Tensor out = av;
  const int r = av.rows(), c = av.cols();
  if (broadcast) {
    as_mat(out.data, r, c).rowwise() += sign * Eigen::Map<const Eigen::RowVectorXf>(bv.data.data(), c);
  } else {
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += sign * bv.data[i];
  }
  return a.tape->record(
      std::move(out), {a.id, b.id},
      [ia = a.id, ib = b.id, broadcast, r, c, sign](Tape& t, int self) {
        const Tensor& dy = t.grad_ref(self);
        if (t.requires_grad(ia)) t.accumulate(ia, dy.data);
        if (!t.requires_grad(ib)) return;
        Tensor& db = t.grad_buffer(ib);
        if (broadcast) {
          Eigen::Map<Eigen::RowVectorXf>(db.data.data(), c) += sign * as_mat(dy.data, r, c).colwise().sum();
        } else {
          for (std::size_t i = 0; i < dy.numel(); ++i) db.data[i] += sign * dy.data[i];
        }
      },
      op);
}

}  // namespace

Var add(Var a, Var b) { return add_or_sub(a, b, 1.0f, "add"); }
Var sub(Var a, Var b) { return add_or_sub(a, b, -1.0f, "sub"); }

Var multiply(Var a, Var b) {
  same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.shape == bv.shape, "multiply shape mismatch " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
  Tensor out = av;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] *= bv.data[i];
  return a.tape->record(
      std::move(out), {a.id, b.id},
      [ia = a.id, ib = b.id](Tape& t, int self) {
        const Tensor& dy = t.grad_ref(self);
        if (t.requires_grad(ia)) {
          Tensor& da = t.grad_buffer(ia);
          const Tensor& bv = t.value(ib);
          for (std::size_t i = 0; i < dy.numel(); ++i) da.data[i] += dy.data[i] * bv.data[i];
        }
        if (t.requires_grad(ib)) {
          Tensor& db = t.grad_buffer(ib);
          const Tensor& av = t.value(ia);
          for (std::size_t i = 0; i < dy.numel(); ++i) db.data[i] += dy.data[i] * av.data[i];
        }
      },
      "multiply");
}

Var scale(Var a, float s) {
  Tensor out = a.value();
  for (float& x : out.data) x *= s;
  return a.tape->record(
      std::move(out), {a.id},
      [ia = a.id, s](Tape& t, int self) {
        const Tensor& dy = t.grad_ref(self);
        Tensor& da = t.grad_buffer(ia);
        for (std::size_t i = 0; i < dy.numel(); ++i) da.data[i] += s * dy.data[i];
      },
      "scale");
}

Var concat(std::span<const Var> parts) {
  require(!parts.empty(), "concat of nothing");
  Tape* tape = parts[0].tape;
  const Tensor& first = parts[0].value();
  const int r = first.rows();
  std::vector<int> widths;
  std::vector<int> ids;
  int total = 0;
  for (Var p : parts) {
    same_tape(parts[0], p);
    const Tensor& v = p.value();
    require(v.ndim() == first.ndim() && v.rows() == r &&
                std::equal(v.shape.begin(), v.shape.end() - 1, first.shape.begin()),
            "concat leading dims differ: " + shape_str(first.shape) + " vs " + shape_str(v.shape));
    widths.push_back(v.cols());
    ids.push_back(p.id);
    total += v.cols();
  }
  std::vector<int> shape = first.shape;
  shape.back() = total;
  Tensor out(shape);
  int off = 0;
  for (std::size_t j = 0; j < parts.size(); ++j) {
    as_mat(out.data, r, total).middleCols(off, widths[j]) = as_mat(parts[j].value().data, r, widths[j]);
    off += widths[j];
  }
  return tape->record(
      std::move(out), ids,
      [ids, widths, r, total](Tape& t, int self) {
        auto dy = as_mat(t.grad_ref(self).data, r, total);
        int o = 0;
        for (std::size_t j = 0; j < ids.size(); ++j) {
          if (t.requires_grad(ids[j])) {
            as_mat(t.grad_buffer(ids[j]).data, r, widths[j]) += dy.middleCols(o, widths[j]);
          }
          o += widths[j];
        }
      },
      "concat");
}

Var slice(Var a, int start, int len) {
  const Tensor& av = a.value();
  const int r = av.rows(), c = av.cols();
  require(start >= 0 && len >= 0 && start + len <= c, "slice out of range");
  std::vector<int> shape = av.shape;
  shape.back() = len;
  Tensor out(shape);
  as_mat(out.data, r, len) = as_mat(av.data, r, c).middleCols(start, len);
  return a.tape->record(
      std::move(out), {a.id},
      [ia = a.id, r, c, start, len](Tape& t, int self) {
        as_mat(t.grad_buffer(ia).data, r, c).middleCols(start, len) += as_mat(t.grad_ref(self).data, r, len);
      },
      "slice");
}

Var mean(Var a, int axis) {
  const Tensor& av = a.value();
  const int nd = av.ndim();
  if (axis < 0) axis += nd;
  require(axis >= 0 && axis < nd, "mean axis out of range");
  const int n = av.shape[axis];
  require(n > 0, "mean over empty axis");
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= av.shape[i];
  for (int i = axis + 1; i < nd; ++i) inner *= av.shape[i];
  std::vector<int> shape = av.shape;
  shape.erase(shape.begin() + axis);
  Tensor out(shape);
  const float inv = 1.0f / static_cast<float>(n);
  for (std::size_t o = 0; o < outer; ++o) {
    for (int j = 0; j < n; ++j) {
      const float* src = av.data.data() + (o * n + j) * inner;
      float* dst = out.data.data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i] * inv;
    }
  }
  return a.tape->record(
      std::move(out), {a.id},
      [ia = a.id, outer, inner, n, inv](Tape& t, int self) {
        const float* dy = t.grad_ref(self).data.data();
        float* da = t.grad_buffer(ia).data.data();
        for (std::size_t o = 0; o < outer; ++o) {
          for (int j = 0; j < n; ++j) {
            float* dst = da + (o * n + j) * inner;
            const float* src = dy + o * inner;
            for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i] * inv;
          }
        }
      },
      "mean");
}

Var sum_all(Var a) {
  const Tensor& av = a.value();
  double s = 0.0;
  for (float x : av.data) s += x;
  return a.tape->record(
      Tensor({}, {static_cast<float>(s)}), {a.id},
      [ia = a.id](Tape& t, int self) {
        const float g = t.grad_ref(self).data[0];
        for (float& x : t.grad_buffer(ia).data) x += g;
      },
      "sum_all");
}

Var softmax(Var a, bool causal) {
  const Tensor& av = a.value();
  const int r = av.rows(), c = av.cols();
  if (causal) require(av.ndim() >= 2 && av.dim(-2) == c, "causal softmax needs a trailing [T, T] block");
  Tensor out(av.shape);
  for (int i = 0; i < r; ++i) {
    const float* x = av.data.data() + std::size_t(i) * c;
    float* y = out.data.data() + std::size_t(i) * c;
    const int visible = causal ? (i % c) + 1 : c;
    float mx = x[0];
    for (int j = 1; j < visible; ++j) mx = std::max(mx, x[j]);
    float s = 0.0f;
    for (int j = 0; j < visible; ++j) {
      y[j] = std::exp(x[j] - mx);
      s += y[j];
    }
    const float inv = 1.0f / s;
    for (int j = 0; j < visible; ++j) y[j] *= inv;
  }
  return a.tape->record(
      std::move(out), {a.id},
      [ia = a.id, r, c](Tape& t, int self) {
        const float* dy = t.grad_ref(self).data.data();
        const float* y = t.value(self).data.data();
        float* dx = t.grad_buffer(ia).data.data();
        for (int i = 0; i < r; ++i) {
          const std::size_t off = std::size_t(i) * c;
          float dot = 0.0f;
          for (int j = 0; j < c; ++j) dot += dy[off + j] * y[off + j];
          for (int j = 0; j < c; ++j) dx[off + j] += y[off + j] * (dy[off + j] - dot);
        }
      },
      "softmax");
}

Var layer_norm(Var x, Var gain, Var bias, float eps) {
  same_tape(x, gain);
  same_tape(x, bias);
  const Tensor& xv = x.value();
  const int r = xv.rows(), c = xv.cols();
  require(gain.value().shape == std::vector<int>{c} && bias.value().shape == std::vector<int>{c},
          "layer_norm gain/bias must be [" + std::to_string(c) + "]");
  using RowArr = Eigen::Array<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  auto X = Eigen::Map<const RowArr>(xv.data.data(), r, c);
  auto g = Eigen::Map<const Eigen::RowVectorXf>(gain.value().data.data(), c).array();
  auto b = Eigen::Map<const Eigen::RowVectorXf>(bias.value().data.data(), c).array();
  auto xhat = std::make_shared<RowArr>(r, c);
  auto rstd = std::make_shared<Eigen::ArrayXf>(r);
  const Eigen::ArrayXf mu = X.rowwise().mean();
  *xhat = X.colwise() - mu;
  *rstd = ((*xhat).square().rowwise().sum() / static_cast<float>(c) + eps).rsqrt();
  (*xhat).colwise() *= *rstd;
  Tensor out(xv.shape);
  auto Y = Eigen::Map<RowArr>(out.data.data(), r, c);
  Y = ((*xhat).rowwise() * g).rowwise() + b;
  return x.tape->record(
      std::move(out), {x.id, gain.id, bias.id},
      [ix = x.id, ig = gain.id, ib = bias.id, r, c, xhat, rstd](Tape& t, int self) {
        auto dy = Eigen::Map<const RowArr>(t.grad_ref(self).data.data(), r, c);
        if (t.requires_grad(ig)) {
          Eigen::Map<Eigen::RowVectorXf>(t.grad_buffer(ig).data.data(), c).array() += (dy * *xhat).colwise().sum();
        }
        if (t.requires_grad(ib)) {
          Eigen::Map<Eigen::RowVectorXf>(t.grad_buffer(ib).data.data(), c).array() += dy.colwise().sum();
        }
        if (!t.requires_grad(ix)) return;
        auto g = Eigen::Map<const Eigen::RowVectorXf>(t.value(ig).data.data(), c).array();
        const RowArr dxh = dy.rowwise() * g;
        const Eigen::ArrayXf m1 = dxh.rowwise().mean();
        const Eigen::ArrayXf m2 = (dxh * *xhat).rowwise().mean();
        auto dx = Eigen::Map<RowArr>(t.grad_buffer(ix).data.data(), r, c);
        dx += ((dxh.colwise() - m1) - (*xhat).colwise() * m2).colwise() * *rstd;
      },
      "layer_norm");
}

Var relu(Var a) {
  Tensor out = a.value();
  const auto n = static_cast<Eigen::Index>(out.numel());
  Eigen::Map<Eigen::ArrayXf>(out.data.data(), n) = Eigen::Map<Eigen::ArrayXf>(out.data.data(), n).max(0.0f);
  return a.tape->record(
      std::move(out), {a.id},
      [ia = a.id, n](Tape& t, int self) {
        const Eigen::Map<const Eigen::ArrayXf> dy(t.grad_ref(self).data.data(), n);
        const Eigen::Map<const Eigen::ArrayXf> x(t.value(ia).data.data(), n);
        Eigen::Map<Eigen::ArrayXf> dx(t.grad_buffer(ia).data.data(), n);
        dx += (x > 0.0f).select(dy, 0.0f);
      },
      "relu");
}

Var embedding_lookup(Var table, std::span<const int> ids) {
  const Tensor& tv = table.value();
  require(tv.ndim() == 2, "embedding table must be 2-d");
  const int vocab = tv.dim(0);
  for (int id : ids) {
    require(id >= 0 && id < vocab, "token id " + std::to_string(id) + " outside vocabulary of " +
                                       std::to_string(vocab));
  }
  return gather_rows(table, ids);
}

Var gather_rows(Var a, std::span<const int> rows) {
  const Tensor& av = a.value();
  require(av.ndim() == 2, "gather_rows needs a 2-d input");
  const int n = av.dim(0), d = av.dim(1);
  std::vector<int> idx(rows.begin(), rows.end());
  Tensor out({static_cast<int>(idx.size()), d});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] >= 0 && idx[i] < n, "gather row out of range");
    std::memcpy(out.data.data() + i * d, av.data.data() + std::size_t(idx[i]) * d, sizeof(float) * d);
  }
  return a.tape->record(
      std::move(out), {a.id},
      [ia = a.id, idx = std::move(idx), d](Tape& t, int self) {
        const float* dy = t.grad_ref(self).data.data();
        float* da = t.grad_buffer(ia).data.data();
        for (std::size_t i = 0; i < idx.size(); ++i) {
          float* dst = da + std::size_t(idx[i]) * d;
          const float* src = dy + i * d;
          for (int j = 0; j < d; ++j) dst[j] += src[j];
        }
      },
      "gather_rows");
}

Var reshape(Var a, std::vector<int> shape) {
  require(shape_numel(shape) == a.value().numel(),
          "cannot reshape " + shape_str(a.value().shape) + " to " + shape_str(shape));
  Tensor out(std::move(shape), a.value().data);
  return a.tape->record(
      std::move(out), {a.id}, [ia = a.id](Tape& t, int self) { t.accumulate(ia, t.grad_ref(self).data); },
      "reshape");
}

Var swap_middle(Var a) {
  const Tensor& av = a.value();
  require(av.ndim() == 4, "swap_middle needs a 4-d input");
  const int A = av.dim(0), B = av.dim(1), C = av.dim(2), D = av.dim(3);
  Tensor out({A, C, B, D});
  auto move = [A, B, C, D](const float* src, float* dst, bool forward) {
    for (int i = 0; i < A; ++i)
      for (int j = 0; j < B; ++j)
        for (int k = 0; k < C; ++k) {
          const std::size_t s = ((std::size_t(i) * B + j) * C + k) * D;
          const std::size_t o = ((std::size_t(i) * C + k) * B + j) * D;
          if (forward) {
            std::memcpy(dst + o, src + s, sizeof(float) * D);
          } else {
            for (int l = 0; l < D; ++l) dst[s + l] += src[o + l];
          }
        }
  };
  move(av.data.data(), out.data.data(), true);
  return a.tape->record(
      std::move(out), {a.id},
      [ia = a.id, move](Tape& t, int self) {
        move(t.grad_ref(self).data.data(), t.grad_buffer(ia).data.data(), false);
      },
      "swap_middle");
}

Var cross_entropy_with_mask(Var logits, std::span<const int> targets, std::span<const float> mask) {
  const Tensor& lv = logits.value();
  require(lv.ndim() == 2, "cross_entropy expects [N, V] logits");
  const int n = lv.dim(0), v = lv.dim(1);
  require(static_cast<int>(targets.size()) == n && static_cast<int>(mask.size()) == n,
          "cross_entropy targets/mask length must equal logits rows");
  double denom = 0.0;
  for (float m : mask) denom += m;
  auto probs = std::make_shared<FloatBuffer>(lv.numel(), 0.0f);
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    if (mask[i] == 0.0f) continue;
    require(targets[i] >= 0 && targets[i] < v, "cross_entropy target out of range");
    const float* x = lv.data.data() + std::size_t(i) * v;
    float* p = probs->data() + std::size_t(i) * v;
    float mx = x[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, x[j]);
    double s = 0.0;
    for (int j = 0; j < v; ++j) s += std::exp(static_cast<double>(x[j] - mx));
    const double lse = mx + std::log(s);
    for (int j = 0; j < v; ++j) p[j] = static_cast<float>(std::exp(x[j] - lse));
    loss += mask[i] * (lse - x[targets[i]]);
  }
  const float scale_factor = denom > 0.0 ? static_cast<float>(1.0 / denom) : 0.0f;
  std::vector<int> tgt(targets.begin(), targets.end());
  std::vector<float> msk(mask.begin(), mask.end());
  return logits.tape->record(
      Tensor({}, {static_cast<float>(loss * scale_factor)}), {logits.id},
      [il = logits.id, n, v, probs, tgt = std::move(tgt), msk = std::move(msk), scale_factor](Tape& t, int self) {
        const float g = t.grad_ref(self).data[0] * scale_factor;
        float* dl = t.grad_buffer(il).data.data();
        for (int i = 0; i < n; ++i) {
          if (msk[i] == 0.0f) continue;
          const float w = g * msk[i];
          const float* p = probs->data() + std::size_t(i) * v;
          float* d = dl + std::size_t(i) * v;
          for (int j = 0; j < v; ++j) d[j] += w * p[j];
          d[tgt[i]] -= w;
        }
      },
      "cross_entropy_with_mask");
}

AdamState make_adam_state(std::span<const Tensor> params) {
  AdamState s;
  for (const auto& p : params) {
    s.m.emplace_back(p.shape, 0.0f);
    s.v.emplace_back(p.shape, 0.0f);
  }
  return s;
}

void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state,
               const AdamConfig& cfg) {
  std::vector<Tensor*> ptrs;
  for (auto& p : params) ptrs.push_back(&p);
  adam_step(ptrs, grads, state, cfg);
}

void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state,
               const AdamConfig& cfg) {
  require(params.size() == grads.size() && params.size() == state.m.size(),
          "adam_step: params, grads and state sizes differ");
  ++state.step;
  const double bc1 = 1.0 - std::pow(static_cast<double>(cfg.beta1), static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(static_cast<double>(cfg.beta2), static_cast<double>(state.step));
  const float step_size = static_cast<float>(cfg.lr / bc1);
  const float inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = grads[i];
    require(p.numel() == g.numel(), "adam_step: gradient shape mismatch");
    float* m = state.m[i].data.data();
    float* v = state.v[i].data.data();
    for (std::size_t j = 0; j < p.numel(); ++j) {
      const float gj = g.data[j];
      m[j] = cfg.beta1 * m[j] + (1.0f - cfg.beta1) * gj;
      v[j] = cfg.beta2 * v[j] + (1.0f - cfg.beta2) * gj * gj;
      p.data[j] -= step_size * m[j] / (std::sqrt(v[j]) * inv_sqrt_bc2 + cfg.eps);
    }
  }
}

namespace {

constexpr char kMagic[8] = {'H', 'E', 'C', 'K', 'P', 'T', '\0', '\x01'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw StructuralError("truncated checkpoint");
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
}

}  // namespace

void write_checkpoint(std::ostream& out, const NamedTensors& tensors) {
  out.write(kMagic, sizeof kMagic);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, static_cast<std::uint32_t>(t.ndim()));
    for (int d : t.shape) put_u32(out, static_cast<std::uint32_t>(d));
  }
  for (const auto& [name, t] : tensors) {
    for (float f : t.data) put_u32(out, std::bit_cast<std::uint32_t>(f));
  }
  if (!out) throw StructuralError("checkpoint write failed");
}

NamedTensors read_checkpoint(std::istream& in) {
  char magic[8];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw StructuralError("not a checkpoint (bad magic)");
  }
  if (get_u32(in) != kVersion) throw StructuralError("unsupported checkpoint version");
  const std::uint32_t count = get_u32(in);
  NamedTensors out;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(get_u32(in), '\0');
    if (!in.read(name.data(), static_cast<std::streamsize>(name.size()))) throw StructuralError("truncated checkpoint");
    std::vector<int> shape(get_u32(in));
    for (int& d : shape) d = static_cast<int>(get_u32(in));
    out.emplace_back(std::move(name), Tensor(std::move(shape)));
  }
  for (auto& [name, t] : out) {
    for (float& f : t.data) f = std::bit_cast<float>(get_u32(in));
  }
  return out;
}

}  // namespace hecomp
