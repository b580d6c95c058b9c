#pragma once

// Training objectives: plain MSE, energy-only NLL, and the joint
// energy-force NLL.  Each comes twice: a numeric form for evaluation and a
// tape form whose gradients drive training.  The tape form is built so that
// pinning every variance input to exactly 1 turns it into the MSE graph
// node for node, which the tests assert bitwise.

#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "bam/errors.hpp"
#include "bam/geometry.hpp"
#include "bam/model.hpp"
#include "bam/tape.hpp"

namespace bam {

struct LossWeights {
  double lambda_e = 1.0;
  double lambda_f = 1.0;

  void validate() const {
    if (!(lambda_e >= 0.0) || !(lambda_f >= 0.0))
      throw DomainError("loss weights must be non-negative");
    if (lambda_e == 0.0 && lambda_f == 0.0)
      throw DomainError("loss weights must not both be zero");
  }
};

enum class LossKind { mse, nll_e, nll_jef };

inline LossKind loss_kind_from_string(const std::string& s) {
  if (s == "MSE" || s == "mse") return LossKind::mse;
  if (s == "NLL_E" || s == "nll_e") return LossKind::nll_e;
  if (s == "NLL_JEF" || s == "nll_jef") return LossKind::nll_jef;
  throw DomainError("unknown loss kind: " + s);
}

inline std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::mse: return "MSE";
    case LossKind::nll_e: return "NLL_E";
    default: return "NLL_JEF";
  }
}

// 0.5 ln sigma^2 + (y - mu)^2 / (2 sigma^2)
inline double nll_gaussian(double y, double mu, double var) {
  if (!(var > 0.0)) throw DomainError("nll_gaussian needs a positive variance");
  const double r = y - mu;
  return 0.5 * std::log(var) + r * r / (2.0 * var);
}

namespace detail {

// Lower Cholesky factor of a symmetric 3x3, row-major in/out.
// Throws on non-symmetric or non-positive-definite input.
inline std::array<double, 9> chol3(const std::array<double, 9>& m) {
  double scale = 0.0;
  for (double v : m) scale = std::max(scale, std::abs(v));
  for (int a = 0; a < 3; ++a)
    for (int b = a + 1; b < 3; ++b)
      if (std::abs(m[static_cast<std::size_t>(3 * a + b)] -
                   m[static_cast<std::size_t>(3 * b + a)]) > 1e-8 * std::max(scale, 1.0))
        throw DomainError("covariance matrix is not symmetric");
  std::array<double, 9> l{};
  for (int c = 0; c < 3; ++c) {
    double d = m[static_cast<std::size_t>(4 * c)];
    for (int k = 0; k < c; ++k) d -= l[static_cast<std::size_t>(3 * c + k)] * l[static_cast<std::size_t>(3 * c + k)];
    if (!(d > 0.0)) throw DomainError("covariance matrix is not positive definite");
    const double lc = std::sqrt(d);
    l[static_cast<std::size_t>(4 * c)] = lc;
    for (int r = c + 1; r < 3; ++r) {
      double s = m[static_cast<std::size_t>(3 * r + c)];
      for (int k = 0; k < c; ++k) s -= l[static_cast<std::size_t>(3 * r + k)] * l[static_cast<std::size_t>(3 * c + k)];
      l[static_cast<std::size_t>(3 * r + c)] = s / lc;
    }
  }
  return l;
}

// maha = (y - mu)^T Sigma^{-1} (y - mu) and logdet = log det Sigma, via Cholesky
inline std::array<double, 2> force_nll_parts(const std::array<double, 3>& y,
                                             const std::array<double, 3>& mu,
                                             const std::array<double, 9>& cov) {
  const auto l = chol3(cov);
  std::array<double, 3> z{};
  for (int r = 0; r < 3; ++r) {
    double s = y[static_cast<std::size_t>(r)] - mu[static_cast<std::size_t>(r)];
    for (int k = 0; k < r; ++k) s -= l[static_cast<std::size_t>(3 * r + k)] * z[static_cast<std::size_t>(k)];
    z[static_cast<std::size_t>(r)] = s / l[static_cast<std::size_t>(4 * r)];
  }
  double maha = 0.0, logdet = 0.0;
  for (int r = 0; r < 3; ++r) {
    maha += z[static_cast<std::size_t>(r)] * z[static_cast<std::size_t>(r)];
    logdet += 2.0 * std::log(l[static_cast<std::size_t>(4 * r)]);
  }
  return {maha, logdet};
}

}  // namespace detail

// (y - mu)^T Sigma^{-1} (y - mu) + log det Sigma, via Cholesky.
inline double force_nll(const std::array<double, 3>& y, const std::array<double, 3>& mu,
                        const std::array<double, 9>& cov) {
  const auto parts = detail::force_nll_parts(y, mu, cov);
  return parts[0] + parts[1];
}

// Per-structure joint loss on numeric predictions, mean over the batch:
//   lambda_E (y_E - mu_E)^2 / sigma_E^2 + log sigma_E^2
//   + lambda_F sum_atoms maha + sum_atoms logdet
inline double nll_jef(const std::vector<AtomicStructure>& batch,
                      const std::vector<PredictiveDistribution>& preds, LossWeights w) {
  w.validate();
  if (batch.size() != preds.size()) throw ShapeError("batch and prediction counts differ");
  if (batch.empty()) throw NoData("empty batch");
  double total = 0.0;
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const AtomicStructure& st = batch[s];
    const PredictiveDistribution& p = preds[s];
    if (!st.has_energy) throw MissingLabel("structure " + std::to_string(s) + " has no energy label");
    if (!(p.energy_var > 0.0)) throw DomainError("non-positive energy variance");
    const double re = st.energy - p.energy_mean;
    double acc = w.lambda_e * re * re / p.energy_var + std::log(p.energy_var);
    const int n = st.natoms();
    if (w.lambda_f > 0.0 && !st.has_forces())
      throw MissingLabel("structure " + std::to_string(s) + " has no force labels");
    for (int i = 0; i < n; ++i) {
      std::array<double, 9> cov;
      for (int k = 0; k < 9; ++k) cov[static_cast<std::size_t>(k)] = p.force_cov[static_cast<std::size_t>(9 * i + k)];
      std::array<double, 3> yf{}, mf{};
      if (w.lambda_f > 0.0)
        for (int c = 0; c < 3; ++c) {
          yf[static_cast<std::size_t>(c)] = st.forces[static_cast<std::size_t>(3 * i + c)];
          mf[static_cast<std::size_t>(c)] = p.force_mean[static_cast<std::size_t>(3 * i + c)];
        }
      const auto parts = detail::force_nll_parts(yf, mf, cov);
      acc += w.lambda_f * parts[0] + parts[1];
    }
    total += acc;
  }
  return total / static_cast<double>(batch.size());
}

// Taped prediction handles the loss builders consume.  cov_root holds the
// six distinct entries of the symmetric covariance root in column slots
// (order kRootSlots); the covariance is root^2 + jitter I.
struct StructureTerms {
  Value energy;
  Value forces;
  Value energy_var;
  Value cov_root;
  double cov_jitter = 0.0;
};

inline StructureTerms terms_from(const ForwardResult& f) {
  StructureTerms t;
  t.energy = f.energy;
  t.forces = f.forces;
  t.energy_var = f.energy_var;
  t.cov_root = f.cov_root;
  t.cov_jitter = f.cov_jitter;
  return t;
}

namespace detail {

// lambda_F * sum_atoms (y-mu)^T Sigma^{-1} (y-mu) + sum_atoms log det Sigma,
// vectorized over atoms: every intermediate is an N x 1 column.
inline Value force_nll_term(Tape& t, Value forces, Value cov_root, double jitter,
                            const std::vector<double>& y_f, double lambda_f) {
  const int n = forces.shape().rows;
  std::vector<double> yv = y_f;
  Value r = t.sub(t.constant(TShape{n, 3}, std::move(yv)), forces);
  Value rx = t.slice_cols(r, 0, 1), ry = t.slice_cols(r, 1, 1), rz = t.slice_cols(r, 2, 1);

  // symmetric root entries: diag m00 m11 m22, then m21 m20 m10
  Value m00 = t.slice_cols(cov_root, 0, 1), m11 = t.slice_cols(cov_root, 1, 1),
        m22 = t.slice_cols(cov_root, 2, 1), m21 = t.slice_cols(cov_root, 3, 1),
        m20 = t.slice_cols(cov_root, 4, 1), m10 = t.slice_cols(cov_root, 5, 1);

  auto dot3 = [&](Value a, Value b, Value c, Value d, Value e, Value f) {
    return t.add(t.add(t.mul(a, b), t.mul(c, d)), t.mul(e, f));
  };
  Value s00 = t.add_scalar(dot3(m00, m00, m10, m10, m20, m20), jitter);
  Value s11 = t.add_scalar(dot3(m10, m10, m11, m11, m21, m21), jitter);
  Value s22 = t.add_scalar(dot3(m20, m20, m21, m21, m22, m22), jitter);
  Value s10 = dot3(m00, m10, m10, m11, m20, m21);
  Value s20 = dot3(m00, m20, m10, m21, m20, m22);
  Value s21 = dot3(m10, m20, m11, m21, m21, m22);

  Value l00 = t.sqrt(s00);
  Value l10 = t.div(s10, l00);
  Value l20 = t.div(s20, l00);
  Value l11 = t.sqrt(t.sub(s11, t.square(l10)));
  Value l21 = t.div(t.sub(s21, t.mul(l20, l10)), l11);
  Value l22 = t.sqrt(t.sub(t.sub(s22, t.square(l20)), t.square(l21)));

  Value z0 = t.div(rx, l00);
  Value z1 = t.div(t.sub(ry, t.mul(l10, z0)), l11);
  Value z2 = t.div(t.sub(t.sub(rz, t.mul(l20, z0)), t.mul(l21, z1)), l22);

  Value maha = t.add(t.add(t.square(z0), t.square(z1)), t.square(z2));
  Value logdet = t.scale(t.add(t.add(t.log(l00), t.log(l11)), t.log(l22)), 2.0);
  return t.add(t.scale(t.sum_all(maha), lambda_f), t.sum_all(logdet));
}

inline Value sse_term(Tape& t, Value forces, const std::vector<double>& y_f, double lambda_f) {
  const int n = forces.shape().rows;
  std::vector<double> yv = y_f;
  Value r = t.sub(t.constant(TShape{n, 3}, std::move(yv)), forces);
  Value rx = t.slice_cols(r, 0, 1), ry = t.slice_cols(r, 1, 1), rz = t.slice_cols(r, 2, 1);
  Value sq = t.add(t.add(t.square(rx), t.square(ry)), t.square(rz));
  return t.scale(t.sum_all(sq), lambda_f);
}

}  // namespace detail

// Builds the per-structure loss on the tape that produced the prediction.
// MSE:      lambda_E (y_E - mu_E)^2            + lambda_F SSE_F
// NLL_E:    lambda_E (y_E - mu_E)^2 / sigma^2 + log sigma^2 + lambda_F SSE_F
// NLL_JEF:  energy part as NLL_E, force part Mahalanobis + log-determinants
inline Value structure_loss(Tape& t, const StructureTerms& p, const AtomicStructure& y,
                            LossKind kind, LossWeights w) {
  w.validate();
  if (!y.has_energy) throw MissingLabel("structure has no energy label");
  const bool need_forces = w.lambda_f > 0.0;
  if (need_forces && !y.has_forces()) throw MissingLabel("structure has no force labels");
  if (need_forces && static_cast<int>(y.forces.size()) != p.forces.shape().size())
    throw ShapeError("force label count does not match the prediction");

  Value re = t.sub(t.constant(TShape{1, 1}, {y.energy}), p.energy);
  Value se = t.square(re);
  Value eterm;
  if (kind == LossKind::mse) {
    eterm = t.scale(se, w.lambda_e);
  } else {
    eterm = t.add(t.scale(t.div(se, p.energy_var), w.lambda_e), t.log(p.energy_var));
  }

  if (kind == LossKind::nll_jef) {
    if (need_forces)
      return t.add(eterm, detail::force_nll_term(t, p.forces, p.cov_root, p.cov_jitter, y.forces,
                                                 w.lambda_f));
    std::vector<double> zeros(static_cast<std::size_t>(p.forces.shape().size()), 0.0);
    return t.add(eterm, detail::force_nll_term(t, p.forces, p.cov_root, p.cov_jitter, zeros, 0.0));
  }
  if (need_forces) return t.add(eterm, detail::sse_term(t, p.forces, y.forces, w.lambda_f));
  return eterm;
}

}  // namespace bam
