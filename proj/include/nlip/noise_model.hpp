#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <string>
#include <unordered_map>
#include <vector>

#include "nlip/errors.hpp"
#include "nlip/param_store.hpp"

namespace nlip {

/// Most recent per-sample combined ITC loss of every pair.
struct LossLedger {
  std::map<std::int64_t, double> losses;
  int epoch = -1;

  void record(std::int64_t pair_id, double loss) { losses[pair_id] = loss; }
  std::size_t size() const { return losses.size(); }
};

inline constexpr double kVarianceFloor = 1e-8;

struct GmmFit {
  std::array<double, 2> gamma{0.5, 0.5};
  std::array<double, 2> mu{0.0, 0.0};
  std::array<double, 2> var{1.0, 1.0};
  int higher_mean_index = 1;
  double log_likelihood = 0.0;
  int iterations_run = 0;
  /// Component means too close to call: no detectable noise.
  bool unimodal = false;
  std::vector<double> log_likelihood_trace;
};

struct GmmOptions {
  int max_iters = 200;
  double tol = 1e-9;
};

namespace detail {

inline double log_normal_pdf(double x, double mu, double var) {
  const double d = x - mu;
  return -0.5 * (std::log(2.0 * std::numbers::pi * var) + d * d / var);
}

inline double log_add(double a, double b) {
  const double m = std::max(a, b);
  if (m == -INFINITY) return m;
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

inline std::array<double, 2> log_joint(const GmmFit& fit, double x) {
  return {std::log(fit.gamma[0]) + log_normal_pdf(x, fit.mu[0], fit.var[0]),
          std::log(fit.gamma[1]) + log_normal_pdf(x, fit.mu[1], fit.var[1])};
}

inline double mixture_log_likelihood(const GmmFit& fit, const std::vector<double>& xs) {
  double ll = 0.0;
  for (double x : xs) {
    auto lj = log_joint(fit, x);
    ll += log_add(lj[0], lj[1]);
  }
  return ll;
}

}  // namespace detail

namespace detail {

/// EM from the split that puts the `k` smallest samples in component 0.
inline GmmFit run_em(const std::vector<double>& losses, const std::vector<double>& sorted, std::size_t k,
                     int max_iters, double tol) {
  const auto n = losses.size();
  GmmFit fit;
  const auto stats = [](auto first, auto last) {
    const double cnt = static_cast<double>(std::distance(first, last));
    double mean = 0.0;
    for (auto it = first; it != last; ++it) mean += *it;
    mean /= cnt;
    double var = 0.0;
    for (auto it = first; it != last; ++it) var += (*it - mean) * (*it - mean);
    return std::pair<double, double>{mean, std::max(var / cnt, kVarianceFloor)};
  };
  std::tie(fit.mu[0], fit.var[0]) = stats(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k));
  std::tie(fit.mu[1], fit.var[1]) = stats(sorted.begin() + static_cast<std::ptrdiff_t>(k), sorted.end());
  fit.gamma = {static_cast<double>(k) / n, static_cast<double>(n - k) / n};

  double ll = mixture_log_likelihood(fit, losses);
  fit.log_likelihood_trace.push_back(ll);
  std::vector<double> resp(n);
  int iter = 0;
  for (; iter < max_iters; ++iter) {
    // E step: responsibility of component 1.
    for (std::size_t i = 0; i < n; ++i) {
      auto lj = log_joint(fit, losses[i]);
      resp[i] = std::exp(lj[1] - log_add(lj[0], lj[1]));
    }
    // M step.
    GmmFit next = fit;
    for (int m = 0; m < 2; ++m) {
      double nk = 0.0, sx = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double r = m == 1 ? resp[i] : 1.0 - resp[i];
        nk += r;
        sx += r * losses[i];
      }
      if (nk < 1e-12) continue;  // empty component keeps its parameters
      const double mean = sx / nk;
      double sv = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double r = m == 1 ? resp[i] : 1.0 - resp[i];
        sv += r * (losses[i] - mean) * (losses[i] - mean);
      }
      next.mu[m] = mean;
      next.var[m] = std::max(sv / nk, kVarianceFloor);
      next.gamma[m] = nk / static_cast<double>(n);
    }
    const double gsum = next.gamma[0] + next.gamma[1];
    next.gamma = {next.gamma[0] / gsum, next.gamma[1] / gsum};
    const double next_ll = mixture_log_likelihood(next, losses);
    fit.mu = next.mu;
    fit.var = next.var;
    fit.gamma = next.gamma;
    fit.log_likelihood_trace.push_back(next_ll);
    const double improvement = next_ll - ll;
    ll = next_ll;
    if (improvement < tol) {
      ++iter;
      break;
    }
  }
  fit.iterations_run = iter;
  fit.log_likelihood = ll;
  fit.higher_mean_index = fit.mu[1] > fit.mu[0] ? 1 : 0;
  return fit;
}

}  // namespace detail

/// Two-component 1-D Gaussian mixture by EM. Initialized by splitting the
/// sorted sample at its median (lower half -> component 0). A second run
/// starts from the widest gap in the sorted sample, which rescues unequal
/// cluster sizes; the higher final likelihood wins, ties going to the median
/// start. `seed` is accepted for interface stability; the fit is deterministic.
inline GmmFit fit_gmm(const std::vector<double>& losses, int max_iters, double tol, std::uint64_t /*seed*/ = 0) {
  if (losses.size() < 4) throw InsufficientDataError("a two-component mixture needs at least 4 samples");
  for (double x : losses)
    if (!std::isfinite(x)) throw ContractError("mixture input contains a non-finite loss");

  const auto n = losses.size();
  std::vector<double> sorted = losses;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t half = n / 2;

  GmmFit fit = detail::run_em(losses, sorted, half, max_iters, tol);
  // both sides keep at least 5% of the sample, so a lone outlier cannot
  // seed a collapsed component
  const std::size_t min_side = std::max<std::size_t>(2, n / 20);
  std::size_t gap = half;
  for (std::size_t k = min_side; k + min_side <= n; ++k)
    if (sorted[k] - sorted[k - 1] > sorted[gap] - sorted[gap - 1]) gap = k;
  if (gap != half) {
    GmmFit alt = detail::run_em(losses, sorted, gap, max_iters, tol);
    if (alt.log_likelihood > fit.log_likelihood) fit = std::move(alt);
  }

  double mean = 0.0;
  for (double x : losses) mean += x;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double x : losses) var += (x - mean) * (x - mean);
  const double sd = std::sqrt(var / static_cast<double>(n));
  fit.unimodal = std::abs(fit.mu[1] - fit.mu[0]) < std::max(1e-6, 0.05 * sd);
  return fit;
}

/// Posterior of each component at `loss`, computed in log space.
inline std::array<double, 2> component_posteriors(const GmmFit& fit, double loss) {
  auto lj = detail::log_joint(fit, loss);
  const double lse = detail::log_add(lj[0], lj[1]);
  return {std::exp(lj[0] - lse), std::exp(lj[1] - lse)};
}

/// Noise probability: posterior of the higher-mean component, weighted by its
/// mixing proportion. Zero everywhere for a unimodal fit.
inline double posterior_noise_prob(const GmmFit& fit, double loss) {
  if (fit.unimodal) return 0.0;
  return std::clamp(component_posteriors(fit, loss)[static_cast<std::size_t>(fit.higher_mean_index)], 0.0, 1.0);
}

struct NoiseEstimates {
  std::vector<std::int64_t> pair_ids;
  Vector epsilon;
  Vector w;
  double lambda = 0.5;
  GmmFit fit;

  std::size_t size() const { return pair_ids.size(); }

  /// Index of a pair id; pair_ids are kept sorted.
  std::ptrdiff_t find(std::int64_t pair_id) const {
    auto it = std::lower_bound(pair_ids.begin(), pair_ids.end(), pair_id);
    if (it == pair_ids.end() || *it != pair_id) return -1;
    return it - pair_ids.begin();
  }

  double epsilon_of(std::int64_t pair_id) const {
    auto i = find(pair_id);
    return i < 0 ? 0.0 : epsilon(i);
  }

  double w_of(std::int64_t pair_id) const {
    auto i = find(pair_id);
    return i < 0 ? 0.0 : w(i);
  }

  /// All-zero estimates (no smoothing) over the given ids.
  static NoiseEstimates zeros(std::vector<std::int64_t> ids, double lambda) {
    std::sort(ids.begin(), ids.end());
    NoiseEstimates e;
    e.pair_ids = std::move(ids);
    e.epsilon = Vector::Zero(static_cast<Eigen::Index>(e.pair_ids.size()));
    e.w = e.epsilon;
    e.lambda = lambda;
    e.fit.unimodal = true;
    return e;
  }
};

/// w_i = lambda * eps_i.
inline NoiseEstimates smoothing_rates(std::vector<std::int64_t> pair_ids, const Vector& epsilon, double lambda) {
  if (!(lambda >= 0.0 && lambda < 1.0)) throw RangeError("lambda must lie in [0, 1)");
  if (static_cast<Eigen::Index>(pair_ids.size()) != epsilon.size())
    throw ShapeError("pair id and epsilon counts differ");
  for (Eigen::Index i = 0; i < epsilon.size(); ++i)
    if (!(epsilon(i) >= 0.0 && epsilon(i) <= 1.0)) throw RangeError("noise probability outside [0, 1]");
  NoiseEstimates e;
  e.pair_ids = std::move(pair_ids);
  e.epsilon = epsilon;
  e.w = lambda * epsilon;
  e.lambda = lambda;
  return e;
}

/// Fit the mixture to the ledger, then eps and w for every pair.
inline NoiseEstimates refresh_epoch(const LossLedger& ledger, double lambda, const GmmOptions& options = {}) {
  std::vector<std::int64_t> ids;
  std::vector<double> xs;
  ids.reserve(ledger.size());
  xs.reserve(ledger.size());
  for (const auto& [id, loss] : ledger.losses) {
    ids.push_back(id);
    xs.push_back(loss);
  }
  GmmFit fit = fit_gmm(xs, options.max_iters, options.tol);
  Vector eps(static_cast<Eigen::Index>(xs.size()));
  for (std::size_t i = 0; i < xs.size(); ++i) eps(static_cast<Eigen::Index>(i)) = posterior_noise_prob(fit, xs[i]);
  NoiseEstimates e = smoothing_rates(std::move(ids), eps, lambda);
  e.fit = std::move(fit);
  return e;
}

/// Diagnostic dump: pair_id, loss, epsilon, w[, true_noise_flag]. The flag
/// column is filled only when evaluation passes ground truth in.
inline void write_noise_csv(const std::string& path, const LossLedger& ledger, const NoiseEstimates& estimates,
                            const std::unordered_map<std::int64_t, std::string>* true_flags = nullptr) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open noise CSV for writing: " + path);
  out << "pair_id,loss,epsilon,w" << (true_flags ? ",true_noise_flag" : "") << '\n';
  char buf[128];
  for (const auto& [id, loss] : ledger.losses) {
    std::snprintf(buf, sizeof(buf), "%lld,%.9g,%.9g,%.9g", static_cast<long long>(id), loss, estimates.epsilon_of(id),
                  estimates.w_of(id));
    out << buf;
    if (true_flags) {
      auto it = true_flags->find(id);
      out << ',' << (it == true_flags->end() ? "" : it->second);
    }
    out << '\n';
  }
}

}  // namespace nlip
