#pragma once

// Mutual-information acquisition scores from ensemble predictions and the
// budgeted selection strategies built on them.  Energy scores compare the
// moment-matched mixture entropy with the mean member entropy; force scores
// do the same with 3x3 covariance determinants per atom.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "bam/errors.hpp"
#include "bam/loss.hpp"
#include "bam/model.hpp"
#include "bam/posterior.hpp"
#include "bam/random.hpp"

namespace bam {

enum class Strategy { Random, BALD_E, BALD_F, BALD_EF };

inline Strategy strategy_from_string(const std::string& s) {
  if (s == "random") return Strategy::Random;
  if (s == "bald_e") return Strategy::BALD_E;
  if (s == "bald_f") return Strategy::BALD_F;
  if (s == "bald_ef") return Strategy::BALD_EF;
  throw DomainError("unknown selection strategy: " + s);
}

inline const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::Random: return "random";
    case Strategy::BALD_E: return "bald_e";
    case Strategy::BALD_F: return "bald_f";
    case Strategy::BALD_EF: return "bald_ef";
  }
  return "?";
}

struct AcquisitionRecord {
  std::int64_t structure_id = 0;
  double bald_energy = 0.0;  // nats
  double bald_force = 0.0;   // nats, per-structure aggregate
  Strategy selected_by = Strategy::Random;
};

// 1/2 [log sigma_total^2 - (1/M) sum_m log sigma_m^2].  The stable form of
// the entropy difference between the moment-matched mixture and the average
// member; the 2*pi*e entropy constants cancel.
inline double bald_energy(const std::vector<double>& means, const std::vector<double>& variances) {
  if (means.size() < 2) throw DomainError("acquisition needs at least two members");
  const DeMoments mm = de_aggregate(means, variances);
  double mean_log = 0.0;
  for (double v : variances) mean_log += std::log(v);
  mean_log /= static_cast<double>(variances.size());
  return 0.5 * (std::log(mm.total) - mean_log);
}

namespace detail {

inline double logdet3(const std::array<double, 9>& sigma) {
  const auto l = chol3(sigma);
  return 2.0 * (std::log(l[0]) + std::log(l[4]) + std::log(l[8]));
}

}  // namespace detail

// Multivariate analogue for one atom's force distribution: member means and
// row-major 3x3 covariances in, mutual information in nats out.
inline double bald_force_atom(const std::vector<std::array<double, 3>>& means,
                              const std::vector<std::array<double, 9>>& covs) {
  if (means.size() != covs.size()) throw ShapeError("member mean/cov counts differ");
  if (means.size() < 2) throw DomainError("acquisition needs at least two members");
  const double m = static_cast<double>(means.size());

  std::array<double, 3> mu{};
  for (const auto& v : means)
    for (int i = 0; i < 3; ++i) mu[i] += v[i];
  for (int i = 0; i < 3; ++i) mu[i] /= m;

  std::array<double, 9> total{};
  double mean_logdet = 0.0;
  for (std::size_t k = 0; k < covs.size(); ++k) {
    mean_logdet += detail::logdet3(covs[k]);
    std::array<double, 3> d{};
    for (int i = 0; i < 3; ++i) d[i] = means[k][i] - mu[i];
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) total[3 * i + j] += covs[k][3 * i + j] + d[i] * d[j];
  }
  for (double& v : total) v /= m;
  mean_logdet /= m;
  return 0.5 * (detail::logdet3(total) - mean_logdet);
}

enum class ForceAggregate { max, mean };

// Scores one structure from its per-member predictive distributions.  The
// energy side uses the structure-level variance (already the sum over atomic
// contributions); the force side reduces per-atom scores with max by default,
// targeting the single most uncertain environment.  Members without force
// covariances leave the force score at zero.
inline AcquisitionRecord score_structure(std::int64_t id,
                                         const std::vector<PredictiveDistribution>& members,
                                         ForceAggregate agg = ForceAggregate::max) {
  if (members.size() < 2) throw DomainError("acquisition needs at least two members");
  std::vector<double> e_mu, e_var;
  for (const auto& p : members) {
    if (!p.has_energy_var) throw DomainError("energy acquisition needs a variance head");
    e_mu.push_back(p.energy_mean);
    e_var.push_back(p.energy_var);
  }
  AcquisitionRecord rec;
  rec.structure_id = id;
  rec.bald_energy = bald_energy(e_mu, e_var);

  std::size_t with_cov = 0;
  for (const auto& p : members)
    if (p.has_force_cov) ++with_cov;
  if (with_cov == 0) return rec;
  if (with_cov != members.size()) throw ShapeError("some members lack force covariances");

  const std::size_t n = members.front().force_mean.size() / 3;
  for (const auto& p : members)
    if (p.force_mean.size() != 3 * n || p.force_cov.size() != 9 * n)
      throw ShapeError("member force shapes differ");

  double acc = (agg == ForceAggregate::max) ? -std::numeric_limits<double>::infinity() : 0.0;
  for (std::size_t a = 0; a < n; ++a) {
    std::vector<std::array<double, 3>> mu(members.size());
    std::vector<std::array<double, 9>> cov(members.size());
    for (std::size_t k = 0; k < members.size(); ++k) {
      for (int i = 0; i < 3; ++i) mu[k][i] = members[k].force_mean[3 * a + i];
      for (int i = 0; i < 9; ++i) cov[k][i] = members[k].force_cov[9 * a + i];
    }
    const double s = bald_force_atom(mu, cov);
    if (agg == ForceAggregate::max)
      acc = std::max(acc, s);
    else
      acc += s / static_cast<double>(n);
  }
  rec.bald_force = (n == 0) ? 0.0 : acc;
  return rec;
}

namespace detail {

inline void take_top(std::vector<AcquisitionRecord>& pool, std::size_t k,
                     double AcquisitionRecord::* score, Strategy tag,
                     std::vector<AcquisitionRecord>& out) {
  std::sort(pool.begin(), pool.end(), [score](const AcquisitionRecord& a, const AcquisitionRecord& b) {
    if (a.*score != b.*score) return a.*score > b.*score;
    return a.structure_id < b.structure_id;
  });
  for (std::size_t i = 0; i < k; ++i) {
    AcquisitionRecord rec = pool[i];
    rec.selected_by = tag;
    out.push_back(rec);
  }
  pool.erase(pool.begin(), pool.begin() + static_cast<long>(k));
}

}  // namespace detail

// Budgeted selection.  Top-k with ties broken by structure id; the mixed
// strategy takes ceil(k/2) by energy score first, then fills from the rest
// by force score.  Each returned record is tagged with the criterion that
// actually picked it.
inline std::vector<AcquisitionRecord> select(std::vector<AcquisitionRecord> pool, Strategy strategy,
                                             std::size_t k, std::uint64_t seed) {
  if (k > pool.size()) throw BudgetTooLarge("budget exceeds pool size");
  std::vector<AcquisitionRecord> out;
  out.reserve(k);
  switch (strategy) {
    case Strategy::Random: {
      Rng rng = Rng::stream(seed, "al_select");
      for (std::size_t i = 0; i < k; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
        std::swap(pool[i], pool[j]);
        pool[i].selected_by = Strategy::Random;
        out.push_back(pool[i]);
      }
      break;
    }
    case Strategy::BALD_E:
      detail::take_top(pool, k, &AcquisitionRecord::bald_energy, Strategy::BALD_E, out);
      break;
    case Strategy::BALD_F:
      detail::take_top(pool, k, &AcquisitionRecord::bald_force, Strategy::BALD_F, out);
      break;
    case Strategy::BALD_EF: {
      const std::size_t ne = (k + 1) / 2;
      detail::take_top(pool, ne, &AcquisitionRecord::bald_energy, Strategy::BALD_E, out);
      detail::take_top(pool, k - ne, &AcquisitionRecord::bald_force, Strategy::BALD_F, out);
      break;
    }
  }
  return out;
}

// CSV manifest, one line per selected structure.
inline void write_selection_manifest(std::ostream& os, const std::vector<AcquisitionRecord>& records) {
  os << "id,bald_e,bald_f,strategy\n";
  char buf[128];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g,%s\n", static_cast<long long>(r.structure_id),
                  r.bald_energy, r.bald_force, to_string(r.selected_by));
    os << buf;
  }
}

}  // namespace bam
