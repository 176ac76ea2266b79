#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "hecomp/rng.hpp"
#include "hecomp/tensor.hpp"

namespace hecomp::test {

inline Tensor random_tensor(std::vector<int> shape, Rng& rng, float scale = 1.0f) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = scale * static_cast<float>(rng.normal());
  return t;
}

// Builds the op output from leaves recorded on the tape.
using OutputFn = std::function<Var(Tape&, const std::vector<Var>&)>;

// Scalar objective over the op output, once on the tape (for the analytic
// gradient) and once in double (for the finite differences).
struct Objective {
  std::function<Var(Tape&, Var)> on_tape;
  std::function<double(const Tensor&)> in_double;
  // Root-sum-square of the objective's terms; scales the float32 rounding
  // noise of the op output as seen by the objective.
  std::function<double(const Tensor&)> term_norm;
};

// sum(out * w) with fixed random weights.
inline Objective projection(const std::vector<int>& shape, std::uint64_t seed) {
  Rng rng(seed);
  auto w = std::make_shared<Tensor>(shape);
  for (auto& v : w->data) v = static_cast<float>(rng.normal());
  return {[w](Tape& tape, Var out) { return sum_all(multiply(out, tape.constant(*w))); },
          [w](const Tensor& out) {
            double s = 0.0;
            for (std::size_t i = 0; i < out.numel(); ++i) s += static_cast<double>(out[i]) * (*w)[i];
            return s;
          },
          [w](const Tensor& out) {
            double s = 0.0;
            for (std::size_t i = 0; i < out.numel(); ++i) s += std::pow(static_cast<double>(out[i]) * (*w)[i], 2);
            return std::sqrt(s);
          }};
}

struct GradCheck {
  double worst = 0.0;  // largest |a - n| / (rtol * max(|a|, |n|) + atol); <= 1 passes
  std::string where;
  int checked = 0;
  int skipped = 0;  // stencils straddling a kink (see kink_guard)
  bool ok() const { return worst <= 1.0 && skipped * 10 <= checked; }
};

// Fourth-order central differences on up to `max_coords` coordinates per
// input, compared with the tape gradient at relative tolerance `rtol`. The
// absolute floor is the rounding noise of the difference quotient: a few
// float32 ulps of the objective terms divided by h. h is a power of two so
// x +- h is exact for |x| < 2^(24) * h.
//
// With kink_guard the derivative is also estimated with step h / 2. If the
// two estimates disagree beyond the tolerance, the stencil straddles a
// non-differentiable point (a relu crossing zero) and the coordinate is
// skipped instead of compared; the skip decision never looks at the analytic
// gradient, and at most a tenth of the coordinates may be skipped.
inline GradCheck grad_check(const OutputFn& fn, const Objective& obj, std::vector<Tensor> inputs, Rng& rng,
                            double h = 0x1p-6, int max_coords = 24, double rtol = 1e-3,
                            bool kink_guard = false) {
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.leaf(t));
    tape.backward(obj.on_tape(tape, fn(tape, vars)));
    for (const auto& v : vars) analytic.push_back(tape.grad(v));
  }
  double noise = 0.0;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.constant(t));
    noise = 4.0 * 0x1p-24 * obj.term_norm(fn(tape, vars).value()) / h;
  }
  const double atol = std::max(noise, 1e-7);
  auto eval = [&]() {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.constant(t));
    return obj.in_double(fn(tape, vars).value());
  };
  GradCheck r;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const std::size_t n = inputs[i].numel();
    std::vector<std::size_t> coords;
    if (static_cast<int>(n) <= max_coords) {
      for (std::size_t k = 0; k < n; ++k) coords.push_back(k);
    } else {
      for (int k = 0; k < max_coords; ++k) coords.push_back(rng.uniform_index(n));
    }
    for (std::size_t k : coords) {
      const float saved = inputs[i][k];
      auto at = [&](double offset) {
        inputs[i][k] = static_cast<float>(saved + offset);
        return eval();
      };
      auto derivative = [&](double step) {
        const double f1 = at(step) - at(-step);
        const double f2 = at(2 * step) - at(-2 * step);
        return (8.0 * f1 - f2) / (12.0 * step);
      };
      const double numeric = derivative(h);
      const double a = analytic[i][k];
      if (kink_guard) {
        const double half = derivative(h / 2);
        // Rounding noise doubles at the half step.
        if (std::abs(half - numeric) > rtol * std::max(std::abs(half), std::abs(numeric)) + 3.0 * atol) {
          inputs[i][k] = saved;
          ++r.checked;
          ++r.skipped;
          continue;
        }
      }
      inputs[i][k] = saved;
      const double err = std::abs(a - numeric) / (rtol * std::max(std::abs(a), std::abs(numeric)) + atol);
      ++r.checked;
      if (err > r.worst) {
        r.worst = err;
        r.where = "input " + std::to_string(i) + " coord " + std::to_string(k) + ": analytic " +
                  std::to_string(a) + " numeric " + std::to_string(numeric);
      }
    }
  }
  return r;
}

}  // namespace hecomp::test
