#pragma once

#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "hecomp/grammar.hpp"
#include "hecomp/model.hpp"

namespace hecomp {

// Positions that agree up to the shorter length, over the longer length.
// Both empty counts as a perfect match.
double token_accuracy(const Tokens& predicted, const Tokens& gold);

struct OodResult {
  std::map<int, double> exact_match;     // per k
  std::map<int, double> token_accuracy;  // per k
  double mean_exact_match = 0.0;
  double mean_token_accuracy = 0.0;
};

// Computes both metrics from decoded outputs, aligned with suite.by_k.
OodResult score_ood(const OodSuite& suite, const std::map<int, std::vector<Tokens>>& decoded);

// Greedy-decodes every prompt in the suite. Decoding of a batch stops once
// every row has produced EOS or one token past the longest gold output of the
// batch, whichever comes first.
OodResult evaluate_ood(const ModelParams& params, const OodSuite& suite, int batch_size = 200);

// Regularized incomplete beta I_x(a, b).
double incomplete_beta(double a, double b, double x);
// CDF of Student's t with df degrees of freedom.
double student_t_cdf(double t, double df);

struct TTestResult {
  double t = 0.0;
  int df = 0;
  double p = 1.0;  // two-sided
  double mean_diff = 0.0;
};

// Paired test on a - b. All-zero differences give t = 0, p = 1.
TTestResult paired_t_test(std::span<const double> a, std::span<const double> b);

struct PolyFit {
  std::vector<double> coefficients;  // ascending powers of x
  double r2 = 0.0;
};

// Least squares by pivoted QR on a Vandermonde matrix in standardized x.
// With zero total variance, R^2 is 1 when the residual vanishes and 0 otherwise.
PolyFit polyfit_r2(std::span<const double> x, std::span<const double> y, int degree);

// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> x, std::span<const double> y);

struct MetricRecord {
  std::string config;
  int seed = 0;
  std::string metric;
  double value = 0.0;
};

struct AggregateRow {
  std::string config;
  std::string metric;
  double mean = 0.0;
  double std = 0.0;  // n - 1 denominator; NaN for a single seed
  int n = 0;
};

// One row per (config, metric), in first-appearance order.
std::vector<AggregateRow> aggregate_seeds(std::span<const MetricRecord> records);

// Per-seed mean of one metric over all configs.
std::map<int, double> per_seed_average(std::span<const MetricRecord> records, const std::string& metric);

void write_summary_csv(std::ostream& out, std::span<const MetricRecord> records);
void write_aggregate_csv(std::ostream& out, std::span<const AggregateRow> rows);

}  // namespace hecomp
