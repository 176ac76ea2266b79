#include "hecomp/evalstats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <Eigen/Dense>

#include "hecomp/error.hpp"

namespace hecomp {

double token_accuracy(const Tokens& predicted, const Tokens& gold) {
  const std::size_t longer = std::max(predicted.size(), gold.size());
  if (longer == 0) return 1.0;
  const std::size_t shorter = std::min(predicted.size(), gold.size());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < shorter; ++i) hits += predicted[i] == gold[i];
  return static_cast<double>(hits) / static_cast<double>(longer);
}

OodResult score_ood(const OodSuite& suite, const std::map<int, std::vector<Tokens>>& decoded) {
  OodResult r;
  for (const auto& [k, examples] : suite.by_k) {
    const auto it = decoded.find(k);
    if (it == decoded.end() || it->second.size() != examples.size()) {
      throw StructuralError("decoded outputs do not match the suite at k=" + std::to_string(k));
    }
    double em = 0.0, ta = 0.0;
    for (std::size_t i = 0; i < examples.size(); ++i) {
      em += it->second[i] == examples[i].output_tokens;
      ta += token_accuracy(it->second[i], examples[i].output_tokens);
    }
    const double n = examples.empty() ? 1.0 : static_cast<double>(examples.size());
    r.exact_match[k] = em / n;
    r.token_accuracy[k] = ta / n;
    r.mean_exact_match += r.exact_match[k];
    r.mean_token_accuracy += r.token_accuracy[k];
  }
  if (!suite.by_k.empty()) {
    r.mean_exact_match /= static_cast<double>(suite.by_k.size());
    r.mean_token_accuracy /= static_cast<double>(suite.by_k.size());
  }
  return r;
}

OodResult evaluate_ood(const ModelParams& params, const OodSuite& suite, int batch_size) {
  std::map<int, std::vector<Tokens>> decoded;
  for (const auto& [k, examples] : suite.by_k) {
    std::vector<Tokens>& out = decoded[k];
    out.resize(examples.size());
    std::map<std::size_t, std::vector<std::size_t>> by_len;
    for (std::size_t i = 0; i < examples.size(); ++i) by_len[examples[i].input_tokens.size()].push_back(i);
    for (const auto& [len, idx] : by_len) {
      for (std::size_t start = 0; start < idx.size(); start += batch_size) {
        const std::size_t end = std::min(idx.size(), start + batch_size);
        std::vector<Tokens> prompts;
        std::size_t longest = 0;
        for (std::size_t j = start; j < end; ++j) {
          prompts.push_back(examples[idx[j]].input_tokens);
          longest = std::max(longest, examples[idx[j]].output_tokens.size());
        }
        const auto dec = greedy_decode_batch(prompts, params, static_cast<int>(longest) + 1);
        for (std::size_t j = start; j < end; ++j) out[idx[j]] = dec[j - start].tokens;
      }
    }
  }
  return score_ood(suite, decoded);
}

namespace {

// Continued fraction for the incomplete beta (modified Lentz).
double beta_cf(double a, double b, double x) {
  constexpr double tiny = 1e-300, eps = 1e-16;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0, d = 1.0 - qab * x / qap;
  if (std::fabs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 10000; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < eps) return h;
  }
  throw StatisticalError("incomplete beta continued fraction did not converge");
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0 && b > 0.0)) throw StatisticalError("incomplete beta needs a, b > 0");
  if (!(x >= 0.0 && x <= 1.0)) throw StatisticalError("incomplete beta needs x in [0, 1]");
  if (x == 0.0 || x == 1.0) return x;
  const double lbt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(lbt);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_cf(a, b, x) / a;
  return 1.0 - front * beta_cf(b, a, 1.0 - x) / b;
}

double student_t_cdf(double t, double df) {
  if (!(df > 0.0)) throw StatisticalError("t distribution needs df > 0");
  if (std::isinf(t)) return t > 0 ? 1.0 : 0.0;
  const double tail = 0.5 * incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
  return t > 0 ? 1.0 - tail : tail;
}

TTestResult paired_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw StatisticalError("paired t-test needs equal-length samples");
  if (a.size() < 2) throw StatisticalError("paired t-test needs at least 2 pairs");
  const std::size_t n = a.size();
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
  TTestResult r;
  r.df = static_cast<int>(n) - 1;
  r.mean_diff = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(n);
  if (std::all_of(d.begin(), d.end(), [](double v) { return v == 0.0; })) return r;
  double ss = 0.0;
  for (double v : d) ss += (v - r.mean_diff) * (v - r.mean_diff);
  const double se = std::sqrt(ss / (n - 1)) / std::sqrt(static_cast<double>(n));
  if (se == 0.0) {
    r.t = std::copysign(std::numeric_limits<double>::infinity(), r.mean_diff);
    r.p = 0.0;
    return r;
  }
  r.t = r.mean_diff / se;
  r.p = incomplete_beta(0.5 * r.df, 0.5, r.df / (r.df + r.t * r.t));
  return r;
}

PolyFit polyfit_r2(std::span<const double> x, std::span<const double> y, int degree) {
  if (degree < 1) throw StatisticalError("polyfit degree must be >= 1");
  if (x.size() != y.size()) throw StatisticalError("polyfit needs equal-length x and y");
  const int n = static_cast<int>(x.size()), m = degree + 1;
  if (n <= degree) throw StatisticalError("polyfit needs more points than the degree");
  // Fit in the standardized variable z = (x - mu) / s, then expand back to
  // powers of x.
  const double mu = std::accumulate(x.begin(), x.end(), 0.0) / n;
  double s = 0.0;
  for (double xi : x) s = std::max(s, std::abs(xi - mu));
  if (s == 0.0) throw StatisticalError("polyfit needs at least two distinct x values");
  Eigen::MatrixXd v(n, m);
  for (int i = 0; i < n; ++i) {
    const double z = (x[i] - mu) / s;
    double p = 1.0;
    for (int j = 0; j < m; ++j, p *= z) v(i, j) = p;
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(v);
  qr.setThreshold(1e-10);
  if (qr.rank() < m) {
    throw StatisticalError("polyfit design matrix is singular (degree " + std::to_string(degree) + ", rank " +
                           std::to_string(qr.rank()) + ")");
  }
  const Eigen::Map<const Eigen::VectorXd> yv(y.data(), n);
  const Eigen::VectorXd cs = qr.solve(yv);
  PolyFit out;
  out.coefficients.assign(m, 0.0);
  for (int j = 0; j < m; ++j) {
    // (x - mu)^j / s^j = sum_k C(j, k) x^k (-mu)^(j - k) / s^j
    double binom = 1.0;
    for (int k = 0; k <= j; ++k) {
      out.coefficients[k] += cs(j) * binom * std::pow(-mu, j - k) / std::pow(s, j);
      binom = binom * (j - k) / (k + 1);
    }
  }
  const Eigen::VectorXd resid = yv - v * cs;
  const double ss_res = resid.squaredNorm();
  const double ss_tot = (yv.array() - yv.mean()).square().sum();
  if (ss_tot == 0.0) {
    out.r2 = ss_res <= 1e-24 * std::max(1.0, yv.squaredNorm()) ? 1.0 : 0.0;
  } else {
    out.r2 = 1.0 - ss_res / ss_tot;
  }
  return out;
}

namespace {

std::vector<double> ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw StatisticalError("spearman needs two equal samples of size >= 2");
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

std::vector<AggregateRow> aggregate_seeds(std::span<const MetricRecord> records) {
  std::vector<AggregateRow> rows;
  std::vector<std::vector<double>> values;
  std::map<std::pair<std::string, std::string>, std::size_t> index;
  for (const auto& r : records) {
    auto [it, fresh] = index.try_emplace({r.config, r.metric}, rows.size());
    if (fresh) {
      rows.push_back({r.config, r.metric, 0.0, 0.0, 0});
      values.emplace_back();
    }
    values[it->second].push_back(r.value);
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& v = values[i];
    const double n = static_cast<double>(v.size());
    rows[i].n = static_cast<int>(v.size());
    rows[i].mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
    if (v.size() < 2) {
      rows[i].std = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    double ss = 0.0;
    for (double x : v) ss += (x - rows[i].mean) * (x - rows[i].mean);
    rows[i].std = std::sqrt(ss / (n - 1.0));
  }
  return rows;
}

std::map<int, double> per_seed_average(std::span<const MetricRecord> records, const std::string& metric) {
  std::map<int, std::pair<double, int>> acc;
  for (const auto& r : records) {
    if (r.metric != metric) continue;
    acc[r.seed].first += r.value;
    acc[r.seed].second += 1;
  }
  std::map<int, double> out;
  for (const auto& [seed, s] : acc) out[seed] = s.first / s.second;
  return out;
}

void write_summary_csv(std::ostream& out, std::span<const MetricRecord> records) {
  out << "config,seed,metric,value\n";
  out.precision(12);
  for (const auto& r : records) out << r.config << ',' << r.seed << ',' << r.metric << ',' << r.value << '\n';
}

void write_aggregate_csv(std::ostream& out, std::span<const AggregateRow> rows) {
  out << "config,metric,mean,std,n\n";
  out.precision(12);
  for (const auto& r : rows) out << r.config << ',' << r.metric << ',' << r.mean << ',' << r.std << ',' << r.n << '\n';
}

}  // namespace hecomp
