#pragma once

// Approximate posteriors over model parameters: deep ensembles, SWAG,
// IVON, and a last-layer Laplace fit, plus Gaussian moment matching of the
// per-sample predictions into one predictive distribution.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <string>
#include <vector>

#include "bam/errors.hpp"
#include "bam/geometry.hpp"
#include "bam/model.hpp"
#include "bam/random.hpp"

namespace bam {

// ---------------------------------------------------------------------------
// moment matching

struct DeMoments {
  double mean = 0.0;
  double aleatoric = 0.0;  // average member variance
  double epistemic = 0.0;  // variance of member means
  double total = 0.0;
};

// Matches the first two moments of an equal-weight Gaussian mixture.
inline DeMoments de_aggregate(const std::vector<double>& mu, const std::vector<double>& var) {
  if (mu.empty()) throw NoData("no members to aggregate");
  if (mu.size() != var.size()) throw ShapeError("mean/variance member counts differ");
  const double m = static_cast<double>(mu.size());
  DeMoments out;
  for (double x : mu) out.mean += x;
  out.mean /= m;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    if (!(var[i] > 0.0)) throw DomainError("member variance must be positive");
    out.aleatoric += var[i];
    const double d = mu[i] - out.mean;
    out.epistemic += d * d;
  }
  out.aleatoric /= m;
  out.epistemic /= m;
  out.total = out.aleatoric + out.epistemic;
  return out;
}

// Moment-matched combination of per-member predictions for one structure.
// Energies follow de_aggregate; per-atom force covariances use the
// multivariate analogue  mean(Sigma_m) + mean((mu_m - mu*)(mu_m - mu*)^T).
inline PredictiveDistribution aggregate_predictions(
    const std::vector<PredictiveDistribution>& member) {
  if (member.empty()) throw NoData("no member predictions");
  const double m = static_cast<double>(member.size());
  const std::size_t n3 = member.front().force_mean.size();
  const std::size_t n = n3 / 3;
  for (const auto& p : member) {
    if (p.force_mean.size() != n3) throw ShapeError("member atom counts differ");
    if (p.has_energy_var != member.front().has_energy_var ||
        p.has_force_cov != member.front().has_force_cov)
      throw ShapeError("member head modes differ");
  }

  PredictiveDistribution out;
  if (member.front().has_energy_var) {
    std::vector<double> mu, var;
    for (const auto& p : member) {
      mu.push_back(p.energy_mean);
      var.push_back(p.energy_var);
    }
    const DeMoments mm = de_aggregate(mu, var);
    out.energy_mean = mm.mean;
    out.energy_var = mm.total;
    out.has_energy_var = true;
  } else {
    for (const auto& p : member) out.energy_mean += p.energy_mean;
    out.energy_mean /= m;
    for (const auto& p : member) {
      const double d = p.energy_mean - out.energy_mean;
      out.energy_var += d * d / m;
    }
    out.has_energy_var = true;
  }

  out.force_mean.assign(n3, 0.0);
  for (const auto& p : member)
    for (std::size_t k = 0; k < n3; ++k) out.force_mean[k] += p.force_mean[k] / m;

  out.force_cov.assign(9 * n, 0.0);
  for (const auto& p : member)
    for (std::size_t i = 0; i < n; ++i)
      for (int a = 0; a < 3; ++a) {
        const double da = p.force_mean[3 * i + static_cast<std::size_t>(a)] -
                          out.force_mean[3 * i + static_cast<std::size_t>(a)];
        for (int b = 0; b < 3; ++b) {
          const double db = p.force_mean[3 * i + static_cast<std::size_t>(b)] -
                            out.force_mean[3 * i + static_cast<std::size_t>(b)];
          double c = da * db;
          if (p.has_force_cov)
            c += p.force_cov[9 * i + static_cast<std::size_t>(3 * a + b)];
          out.force_cov[9 * i + static_cast<std::size_t>(3 * a + b)] += c / m;
        }
      }
  out.has_force_cov = true;

  const std::size_t nl = member.front().layer_energy.size();
  out.per_atom_energy.assign(n, 0.0);
  out.layer_energy.assign(nl, 0.0);
  for (const auto& p : member) {
    for (std::size_t i = 0; i < n; ++i) out.per_atom_energy[i] += p.per_atom_energy[i] / m;
    for (std::size_t l = 0; l < nl; ++l) out.layer_energy[l] += p.layer_energy[l] / m;
  }
  return out;
}

struct PosteriorPredictions {
  PredictiveDistribution mean;
  std::vector<PredictiveDistribution> member;
};

namespace detail {

inline PosteriorPredictions predict_with_params(RaceModel& model,
                                                const std::vector<std::vector<double>>& thetas,
                                                const AtomicStructure& s) {
  const std::vector<double> saved = model.params().flatten();
  PosteriorPredictions out;
  try {
    for (const auto& th : thetas) {
      model.params().unflatten(th);
      out.member.push_back(model.predict(s));
    }
  } catch (...) {
    model.params().unflatten(saved);
    throw;
  }
  model.params().unflatten(saved);
  out.mean = aggregate_predictions(out.member);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// deep ensemble

struct EnsembleState {
  std::vector<std::vector<double>> members;  // flattened parameter vectors

  void validate() const {
    if (members.size() < 2) throw DomainError("ensemble needs at least 2 members");
    for (const auto& v : members)
      if (v.size() != members.front().size()) throw ShapeError("ensemble member sizes differ");
  }
};

inline PosteriorPredictions posterior_predict(RaceModel& model, const EnsembleState& ens,
                                              const AtomicStructure& s) {
  ens.validate();
  return detail::predict_with_params(model, ens.members, s);
}

// ---------------------------------------------------------------------------
// SWAG

struct SwagState {
  std::vector<double> mean;     // running average of snapshots
  std::vector<double> sq_mean;  // running average of squared snapshots
  std::deque<std::vector<double>> dev_buffer;
  int max_rank = 20;
  long n_collected = 0;

  explicit SwagState(std::size_t dim = 0, int rank = 20)
      : mean(dim, 0.0), sq_mean(dim, 0.0), max_rank(rank) {
    if (rank < 2) throw DomainError("SWAG rank must be at least 2");
  }

  std::vector<double> sigma_diag() const {
    std::vector<double> d(mean.size());
    for (std::size_t i = 0; i < mean.size(); ++i)
      d[i] = std::max(0.0, sq_mean[i] - mean[i] * mean[i]);
    return d;
  }
};

inline void swag_collect(SwagState& st, const std::vector<double>& theta) {
  if (theta.size() != st.mean.size()) throw ShapeError("SWAG snapshot size mismatch");
  st.n_collected += 1;
  const double n = static_cast<double>(st.n_collected);
  for (std::size_t i = 0; i < theta.size(); ++i) {
    st.mean[i] += (theta[i] - st.mean[i]) / n;
    st.sq_mean[i] += (theta[i] * theta[i] - st.sq_mean[i]) / n;
  }
  std::vector<double> dev(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) dev[i] = theta[i] - st.mean[i];
  st.dev_buffer.push_back(std::move(dev));
  while (static_cast<int>(st.dev_buffer.size()) > st.max_rank) st.dev_buffer.pop_front();
}

// theta = mean + (1/sqrt(2)) sqrt(Sigma_diag) . z1 + D z2 / sqrt(2 (K'-1))
inline std::vector<double> swag_sample(const SwagState& st, Rng& rng) {
  const std::size_t kp = st.dev_buffer.size();
  if (st.n_collected < 2 || kp < 2) throw NotReady("SWAG needs at least 2 snapshots");
  const std::vector<double> diag = st.sigma_diag();
  std::vector<double> theta = st.mean;
  const double a = 1.0 / std::sqrt(2.0);
  for (std::size_t i = 0; i < theta.size(); ++i)
    theta[i] += a * std::sqrt(diag[i]) * rng.normal();
  const double b = 1.0 / std::sqrt(2.0 * (static_cast<double>(kp) - 1.0));
  for (const auto& dev : st.dev_buffer) {
    const double z = rng.normal();
    for (std::size_t i = 0; i < theta.size(); ++i) theta[i] += b * dev[i] * z;
  }
  return theta;
}

inline PosteriorPredictions posterior_predict(RaceModel& model, const SwagState& st,
                                              const AtomicStructure& s, int samples, Rng& rng) {
  if (samples < 2) throw DomainError("sampling posteriors need at least 2 samples");
  std::vector<std::vector<double>> thetas;
  for (int k = 0; k < samples; ++k) thetas.push_back(swag_sample(st, rng));
  return detail::predict_with_params(model, thetas, s);
}

// ---------------------------------------------------------------------------
// IVON

struct IvonHyper {
  double lr = 0.1;
  double beta1 = 0.9;
  double rho = 0.01;
  double delta = 1e-4;
  double ess = 1.0;  // effective sample size (lambda)

  void validate() const {
    if (!(lr > 0.0) || !(beta1 >= 0.0) || !(beta1 < 1.0) || !(rho > 0.0) || !(rho <= 1.0) ||
        !(delta > 0.0) || !(ess > 0.0))
      throw DomainError("invalid IVON hyperparameters");
  }
};

struct IvonState {
  std::vector<double> m;  // posterior mean
  std::vector<double> h;  // Hessian-diagonal estimate
  std::vector<double> g;  // gradient momentum
  IvonHyper hyper;
  long t = 0;

  static IvonState init(std::vector<double> theta0, double h0, IvonHyper hy) {
    hy.validate();
    if (!(h0 >= 0.0)) throw DomainError("initial Hessian estimate must be non-negative");
    IvonState st;
    st.h.assign(theta0.size(), h0);
    st.g.assign(theta0.size(), 0.0);
    st.m = std::move(theta0);
    st.hyper = hy;
    return st;
  }

  double sigma(std::size_t i) const {
    return 1.0 / std::sqrt(hyper.ess * (h[i] + hyper.delta));
  }
  std::vector<double> sigma() const {
    std::vector<double> s(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) s[i] = sigma(i);
    return s;
  }
};

inline std::vector<double> ivon_sample(const IvonState& st, Rng& rng) {
  std::vector<double> theta(st.m.size());
  for (std::size_t i = 0; i < theta.size(); ++i) theta[i] = st.m[i] + st.sigma(i) * rng.normal();
  return theta;
}

// One update at an explicitly supplied sample:
//   hhat = ghat (theta - m) / sigma^2
//   g <- beta1 g + (1 - beta1) ghat
//   h <- (1 - rho) h + rho hhat + rho^2 (h - hhat)^2 / (2 (h + delta))
//   gbar = g / (1 - beta1^t);  m <- m - lr (gbar + delta m) / (h + delta)
inline void ivon_step_at(IvonState& st, const std::vector<double>& theta,
                         const std::vector<double>& grad) {
  const std::size_t p = st.m.size();
  if (theta.size() != p || grad.size() != p) throw ShapeError("IVON step size mismatch");
  for (double v : grad)
    if (!std::isfinite(v)) throw DivergedGradient("non-finite gradient in IVON step");
  const IvonHyper& hy = st.hyper;

  st.t += 1;
  const double bias = 1.0 - std::pow(hy.beta1, static_cast<double>(st.t));
  for (std::size_t i = 0; i < p; ++i) {
    const double var = 1.0 / (hy.ess * (st.h[i] + hy.delta));
    const double hhat = grad[i] * (theta[i] - st.m[i]) / var;
    st.g[i] = hy.beta1 * st.g[i] + (1.0 - hy.beta1) * grad[i];
    const double dh = st.h[i] - hhat;
    st.h[i] = (1.0 - hy.rho) * st.h[i] + hy.rho * hhat +
              0.5 * hy.rho * hy.rho * dh * dh / (st.h[i] + hy.delta);
    if (!(st.h[i] + hy.delta > 0.0))
      throw DivergedGradient("IVON curvature estimate lost positivity");
    const double gbar = st.g[i] / bias;
    st.m[i] -= hy.lr * (gbar + hy.delta * st.m[i]) / (st.h[i] + hy.delta);
  }
}

template <class GradFn>
void ivon_step(IvonState& st, GradFn&& grad_fn, Rng& rng) {
  const std::vector<double> theta = ivon_sample(st, rng);
  ivon_step_at(st, theta, grad_fn(theta));
}

inline PosteriorPredictions posterior_predict(RaceModel& model, const IvonState& st,
                                              const AtomicStructure& s, int samples, Rng& rng) {
  if (samples < 2) throw DomainError("sampling posteriors need at least 2 samples");
  if (st.m.empty() || st.t == 0) throw NotReady("IVON state has not been trained");
  std::vector<std::vector<double>> thetas;
  for (int k = 0; k < samples; ++k) thetas.push_back(ivon_sample(st, rng));
  return detail::predict_with_params(model, thetas, s);
}

// ---------------------------------------------------------------------------
// last-layer Laplace

struct LaplaceState {
  std::vector<double> theta_map;        // full flattened parameters
  std::vector<std::uint8_t> head_mask;  // 1 where the Gaussian applies
  std::vector<double> ggn_diag;         // same length, zero off the mask
  double prior_precision = 1.0;
};

// diag(G) += curvature * J .* J
inline void ggn_accumulate(std::vector<double>& ggn, const std::vector<double>& jac,
                           double curvature) {
  if (ggn.size() != jac.size()) throw ShapeError("GGN/Jacobian size mismatch");
  if (!(curvature >= 0.0)) throw DomainError("likelihood curvature must be non-negative");
  for (std::size_t i = 0; i < ggn.size(); ++i) ggn[i] += curvature * jac[i] * jac[i];
}

inline bool laplace_block(const std::string& name) {
  return name.rfind("head.", 0) == 0 || name.find(".readout.") != std::string::npos;
}

// Diagonal GGN of the energy output over readout/head parameters, with
// Gaussian likelihood curvature 1/sigma_E^2 (unit curvature for models
// without a variance head).
inline LaplaceState laplace_fit(RaceModel& model, const std::vector<AtomicStructure>& data,
                                double prior_precision) {
  if (data.empty()) throw NoData("Laplace fit needs calibration data");
  if (!(prior_precision > 0.0)) throw DomainError("prior precision must be positive");

  const ParamStore& ps = model.params();
  LaplaceState st;
  st.theta_map = ps.flatten();
  st.head_mask.assign(st.theta_map.size(), 0);
  st.ggn_diag.assign(st.theta_map.size(), 0.0);
  st.prior_precision = prior_precision;

  std::vector<std::size_t> offset(static_cast<std::size_t>(ps.count()), 0);
  std::size_t off = 0;
  std::vector<int> head_blocks;
  for (int b = 0; b < ps.count(); ++b) {
    offset[static_cast<std::size_t>(b)] = off;
    off += ps.value(b).size();
    if (laplace_block(ps.block(b).name)) {
      head_blocks.push_back(b);
      for (std::size_t k = 0; k < ps.value(b).size(); ++k)
        st.head_mask[offset[static_cast<std::size_t>(b)] + k] = 1;
    }
  }

  for (const AtomicStructure& s : data) {
    Tape t;
    ForwardResult f = model.forward(t, s);
    std::vector<Value> wrt;
    for (int b : head_blocks) wrt.push_back(f.params[static_cast<std::size_t>(b)]);
    const auto grads = t.grad(f.energy, wrt);
    double curvature = 1.0;
    if (f.has_energy_var) curvature = 1.0 / f.energy_var.item();
    for (std::size_t k = 0; k < head_blocks.size(); ++k) {
      const std::size_t o = offset[static_cast<std::size_t>(head_blocks[k])];
      const auto& g = grads[k].data();
      for (std::size_t i = 0; i < g.size(); ++i)
        st.ggn_diag[o + i] += curvature * g[i] * g[i];
    }
  }
  return st;
}

// Head parameters get N(map, 1/(ggn + prior)); everything else stays at map.
inline std::vector<double> laplace_sample(const LaplaceState& st, Rng& rng) {
  if (st.theta_map.empty()) throw NotReady("Laplace state has not been fit");
  std::vector<double> theta = st.theta_map;
  for (std::size_t i = 0; i < theta.size(); ++i)
    if (st.head_mask[i])
      theta[i] += rng.normal() / std::sqrt(st.ggn_diag[i] + st.prior_precision);
  return theta;
}

inline PosteriorPredictions posterior_predict(RaceModel& model, const LaplaceState& st,
                                              const AtomicStructure& s, int samples, Rng& rng) {
  if (samples < 2) throw DomainError("sampling posteriors need at least 2 samples");
  std::vector<std::vector<double>> thetas;
  for (int k = 0; k < samples; ++k) thetas.push_back(laplace_sample(st, rng));
  return detail::predict_with_params(model, thetas, s);
}

}  // namespace bam
