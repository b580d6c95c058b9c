#pragma once

// Uncertainty evaluation: reliability curves and calibration error over
// central Gaussian intervals, Mann-Whitney AUROC for OOD detection,
// isotonic post-hoc recalibration, predicted-vs-empirical scatter data,
// and the weighted composite benchmark score.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <vector>

#include "bam/errors.hpp"

namespace bam {

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Acklam's rational approximation, polished with one Halley step.
inline double normal_quantile(double p) {
  if (!(p > 0.0) || !(p < 1.0)) throw DomainError("quantile needs p in (0,1)");
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                             2.445134137142996e+00, 3.754408661907416e+00};
  const double plow = 0.02425;
  double x;
  if (p < plow) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - plow) {
    const double q = p - 0.5, r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  // Halley refinement against the true CDF
  const double e = normal_cdf(x) - p;
  const double u = e * std::sqrt(2.0 * 3.14159265358979323846) * std::exp(0.5 * x * x);
  return x - u / (1.0 + 0.5 * x * u);
}

// Monotone map from nominal to calibrated confidence, endpoints pinned.
struct CalibrationMap {
  std::vector<double> nominal;     // strictly within [0,1], non-decreasing
  std::vector<double> calibrated;  // same length, non-decreasing

  static CalibrationMap identity() { return {{0.0, 1.0}, {0.0, 1.0}}; }
};

inline double recalibrate_apply(const CalibrationMap& map, double p) {
  if (!(p >= 0.0) && !(p <= 1.0)) throw DomainError("confidence level outside [0,1]");
  if (map.nominal.size() < 2 || map.nominal.size() != map.calibrated.size())
    throw ShapeError("calibration map needs at least two knots");
  if (p <= map.nominal.front()) return map.calibrated.front();
  if (p >= map.nominal.back()) return map.calibrated.back();
  const auto it = std::upper_bound(map.nominal.begin(), map.nominal.end(), p);
  const std::size_t hi = static_cast<std::size_t>(it - map.nominal.begin());
  const std::size_t lo = hi - 1;
  const double span = map.nominal[hi] - map.nominal[lo];
  if (span == 0.0) return map.calibrated[lo];
  const double t = (p - map.nominal[lo]) / span;
  return map.calibrated[lo] + t * (map.calibrated[hi] - map.calibrated[lo]);
}

struct ReliabilityCurve {
  std::vector<double> levels;
  std::vector<double> observed;
};

// Empirical coverage of the central Gaussian interval at m uniform levels
// p_j = j/(m+1).  A point with standardized residual z counts as covered at
// level p when its CDF value Phi(z) lies in [(1-p)/2, (1+p)/2]; when a
// calibration map is given, Phi(z) is recalibrated first.
inline ReliabilityCurve reliability_curve(const std::vector<double>& residuals,
                                          const std::vector<double>& predicted_sd, int m = 100,
                                          const CalibrationMap* map = nullptr) {
  if (residuals.empty()) throw NoData("no residuals");
  if (residuals.size() != predicted_sd.size()) throw ShapeError("residual/sd lengths differ");
  if (m < 1) throw DomainError("need at least one confidence level");
  std::vector<double> u(residuals.size());
  for (std::size_t i = 0; i < residuals.size(); ++i) {
    if (!(predicted_sd[i] > 0.0)) throw DomainError("predicted sd must be positive");
    u[i] = normal_cdf(residuals[i] / predicted_sd[i]);
    if (map) u[i] = recalibrate_apply(*map, u[i]);
  }
  ReliabilityCurve out;
  for (int j = 1; j <= m; ++j) {
    const double p = static_cast<double>(j) / (static_cast<double>(m) + 1.0);
    const double lo = (1.0 - p) / 2.0, hi = (1.0 + p) / 2.0;
    long covered = 0;
    for (double v : u)
      if (v >= lo && v <= hi) ++covered;
    out.levels.push_back(p);
    out.observed.push_back(static_cast<double>(covered) / static_cast<double>(u.size()));
  }
  return out;
}

// mean_j (p_j - observed_j)^2
inline double calibration_error(const std::vector<double>& residuals,
                                const std::vector<double>& predicted_sd, int m = 100,
                                const CalibrationMap* map = nullptr) {
  const ReliabilityCurve rc = reliability_curve(residuals, predicted_sd, m, map);
  double ce = 0.0;
  for (std::size_t j = 0; j < rc.levels.size(); ++j) {
    const double d = rc.levels[j] - rc.observed[j];
    ce += d * d;
  }
  return ce / static_cast<double>(rc.levels.size());
}

// Probability a random OOD score exceeds a random ID score, ties half.
// Rank-based Mann-Whitney; exact, no approximation.
inline double auroc(const std::vector<double>& scores_id, const std::vector<double>& scores_ood) {
  if (scores_id.empty() || scores_ood.empty()) throw NoData("auroc needs both score lists");
  struct Tagged {
    double score;
    bool ood;
  };
  std::vector<Tagged> all;
  all.reserve(scores_id.size() + scores_ood.size());
  for (double s : scores_id) all.push_back({s, false});
  for (double s : scores_ood) all.push_back({s, true});
  std::sort(all.begin(), all.end(), [](const Tagged& a, const Tagged& b) { return a.score < b.score; });

  double rank_sum_ood = 0.0;
  std::size_t i = 0;
  while (i < all.size()) {
    std::size_t j = i;
    while (j < all.size() && all[j].score == all[i].score) ++j;
    const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (std::size_t k = i; k < j; ++k)
      if (all[k].ood) rank_sum_ood += avg_rank;
    i = j;
  }
  const double no = static_cast<double>(scores_ood.size());
  const double ni = static_cast<double>(scores_id.size());
  const double u_stat = rank_sum_ood - no * (no + 1.0) / 2.0;
  return u_stat / (ni * no);
}

// Pool-adjacent-violators isotonic regression of y against already-sorted x.
inline std::vector<double> pav_isotonic(const std::vector<double>& y) {
  struct Pool {
    double sum;
    double count;
  };
  std::vector<Pool> pools;
  for (double v : y) {
    pools.push_back({v, 1.0});
    while (pools.size() > 1) {
      const auto& b = pools.back();
      const auto& a = pools[pools.size() - 2];
      if (a.sum / a.count <= b.sum / b.count) break;
      Pool merged{a.sum + b.sum, a.count + b.count};
      pools.pop_back();
      pools.back() = merged;
    }
  }
  std::vector<double> out;
  out.reserve(y.size());
  for (const auto& p : pools) {
    const double v = p.sum / p.count;
    for (long k = 0; k < static_cast<long>(p.count + 0.5); ++k) out.push_back(v);
  }
  return out;
}

// Kuleshov-style recalibration: regress the empirical CDF of the nominal
// CDF values isotonically and keep the knots, endpoints pinned to 0 and 1.
inline CalibrationMap recalibrate_fit(const std::vector<double>& residuals,
                                      const std::vector<double>& predicted_sd) {
  if (residuals.empty()) throw NoData("no calibration data");
  if (residuals.size() != predicted_sd.size()) throw ShapeError("residual/sd lengths differ");
  if (residuals.size() < 10) throw DomainError("recalibration needs at least 10 points");
  std::vector<double> u(residuals.size());
  for (std::size_t i = 0; i < residuals.size(); ++i) {
    if (!(predicted_sd[i] > 0.0)) throw DomainError("predicted sd must be positive");
    u[i] = normal_cdf(residuals[i] / predicted_sd[i]);
  }
  std::sort(u.begin(), u.end());
  if (u.front() == u.back())
    throw DegenerateCalibration("all nominal confidence values are identical");

  const double n = static_cast<double>(u.size());
  std::vector<double> target(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) {
    std::size_t j = i;  // count of values <= u[i], handling duplicates
    while (j + 1 < u.size() && u[j + 1] == u[i]) ++j;
    target[i] = static_cast<double>(j + 1) / n;
  }
  const std::vector<double> fit = pav_isotonic(target);

  CalibrationMap map;
  map.nominal.push_back(0.0);
  map.calibrated.push_back(0.0);
  for (std::size_t i = 0; i < u.size(); ++i) {
    if (!map.nominal.empty() && u[i] == map.nominal.back()) continue;
    map.nominal.push_back(u[i]);
    map.calibrated.push_back(std::min(1.0, std::max(0.0, fit[i])));
  }
  map.nominal.push_back(1.0);
  map.calibrated.push_back(1.0);
  for (std::size_t i = 1; i < map.calibrated.size(); ++i)
    map.calibrated[i] = std::max(map.calibrated[i], map.calibrated[i - 1]);
  return map;
}

// min-max bounds of the calibration errors across the cohort of models a
// score is compared within
struct CohortNormalization {
  double e_ce_min = 0.0, e_ce_max = 0.0;
  double f_ce_min = 0.0, f_ce_max = 0.0;
};

namespace detail {
inline double minmax_scale(double x, double lo, double hi) {
  if (!(hi > lo)) throw DegenerateNormalization("min-max cohort has no spread");
  return (x - lo) / (hi - lo);
}
}  // namespace detail

// 0.25 * 23.06 * E_RMSE + 0.25 * 23.06 * F_RMSE
//   + 0.125 * minmax(E_CE) + 0.125 * minmax(F_CE) + 0.25 * (1 - AUROC)
// RMSEs arrive in eV / eV per angstrom; 23.06 converts eV to kcal/mol.
inline double composite_score(double e_rmse, double f_rmse, double e_ce, double f_ce,
                              double auroc_value, const CohortNormalization& ctx) {
  if (!(e_rmse >= 0.0) || !(f_rmse >= 0.0) || !(e_ce >= 0.0) || !(f_ce >= 0.0))
    throw DomainError("error metrics must be non-negative");
  if (!(auroc_value >= 0.0) || !(auroc_value <= 1.0)) throw DomainError("AUROC outside [0,1]");
  const double kcal = 23.06;
  return 0.25 * kcal * e_rmse + 0.25 * kcal * f_rmse +
         0.125 * detail::minmax_scale(e_ce, ctx.e_ce_min, ctx.e_ce_max) +
         0.125 * detail::minmax_scale(f_ce, ctx.f_ce_min, ctx.f_ce_max) +
         0.25 * (1.0 - auroc_value);
}

// Per-point (predicted sd, |error|) pairs plus half-normal quantile slopes
// for the reference bands |e| = sd * q_p.
struct ScatterData {
  std::vector<double> predicted_sd;
  std::vector<double> abs_error;
  std::array<double, 4> band_levels{0.25, 0.5, 0.75, 0.95};
  std::array<double, 4> band_slopes{};
};

inline ScatterData error_scatter(const std::vector<double>& residuals,
                                 const std::vector<double>& predicted_sd) {
  if (residuals.empty()) throw NoData("no residuals");
  if (residuals.size() != predicted_sd.size()) throw ShapeError("residual/sd lengths differ");
  ScatterData out;
  out.predicted_sd = predicted_sd;
  for (double r : residuals) out.abs_error.push_back(std::abs(r));
  for (std::size_t k = 0; k < out.band_levels.size(); ++k)
    out.band_slopes[k] = normal_quantile(0.5 * (1.0 + out.band_levels[k]));
  return out;
}

}  // namespace bam
