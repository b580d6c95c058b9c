#pragma once

#include <array>
#include <cmath>
#include <complex>
#include <map>
#include <tuple>
#include <vector>

#include "bam/errors.hpp"
#include "bam/spherical.hpp"

namespace bam {

// One nonzero coupling coefficient: out_{L,M} += c * a_{l1,m1} * b_{l2,m2}.
// m indices are signed (-l..l).
struct CGEntry {
  int m1, m2, M;
  double c;
};

namespace detail {

inline double ln_factorial(int n) {
  static const std::vector<double> cache = [] {
    std::vector<double> v(64, 0.0);
    for (std::size_t i = 2; i < v.size(); ++i) v[i] = v[i - 1] + std::log(static_cast<double>(i));
    return v;
  }();
  return cache[static_cast<std::size_t>(n)];
}

// Clebsch-Gordan coefficient <l1 m1 l2 m2 | L M> in the Condon-Shortley
// convention (Racah's closed form).
inline double cg_complex(int l1, int m1, int l2, int m2, int L, int M) {
  if (m1 + m2 != M) return 0.0;
  if (L < std::abs(l1 - l2) || L > l1 + l2) return 0.0;
  if (std::abs(m1) > l1 || std::abs(m2) > l2 || std::abs(M) > L) return 0.0;
  const double pref =
      0.5 * (std::log(2.0 * L + 1.0) + ln_factorial(l1 + l2 - L) + ln_factorial(l1 - l2 + L) +
             ln_factorial(-l1 + l2 + L) - ln_factorial(l1 + l2 + L + 1) + ln_factorial(L + M) +
             ln_factorial(L - M) + ln_factorial(l1 - m1) + ln_factorial(l1 + m1) +
             ln_factorial(l2 - m2) + ln_factorial(l2 + m2));
  double sum = 0.0;
  const int k_lo = std::max({0, l2 - L - m1, l1 - L + m2});
  const int k_hi = std::min({l1 + l2 - L, l1 - m1, l2 + m2});
  for (int k = k_lo; k <= k_hi; ++k) {
    const double ln_den = ln_factorial(k) + ln_factorial(l1 + l2 - L - k) + ln_factorial(l1 - m1 - k) +
                          ln_factorial(l2 + m2 - k) + ln_factorial(L - l2 + m1 + k) +
                          ln_factorial(L - l1 - m2 + k);
    sum += ((k % 2 == 0) ? 1.0 : -1.0) * std::exp(pref - ln_den);
  }
  return sum;
}

// Unitary change of basis from complex (Condon-Shortley) to the real
// harmonics of spherical.hpp, with an extra (-i)^l phase so that the
// transformed coupling coefficients come out purely real.  Rows are real-m,
// columns complex-mu, both offset by +l.
inline std::vector<std::complex<double>> real_basis_matrix(int l) {
  const int d = 2 * l + 1;
  std::vector<std::complex<double>> U(static_cast<std::size_t>(d * d), {0.0, 0.0});
  const double inv_sqrt2 = 0.70710678118654752440084436210485;
  const std::complex<double> i_unit(0.0, 1.0);
  U[static_cast<std::size_t>(l * d + l)] = 1.0;
  for (int m = 1; m <= l; ++m) {
    const double sgn = (m % 2 == 0) ? 1.0 : -1.0;
    U[static_cast<std::size_t>((l + m) * d + (l + m))] = sgn * inv_sqrt2;
    U[static_cast<std::size_t>((l + m) * d + (l - m))] = inv_sqrt2;
    U[static_cast<std::size_t>((l - m) * d + (l + m))] = -i_unit * sgn * inv_sqrt2;
    U[static_cast<std::size_t>((l - m) * d + (l - m))] = i_unit * inv_sqrt2;
  }
  std::complex<double> phase(1.0, 0.0);
  for (int k = 0; k < l; ++k) phase *= std::complex<double>(0.0, -1.0);
  for (auto& u : U) u *= phase;
  return U;
}

}  // namespace detail

// Table of real-basis coupling coefficients for all (l1, l2, L) triples with
// degrees <= l_max.  Coefficients satisfy sum over (m1, m2) of c^2 = 1 for
// each output M (inherited from the unitary construction), and the coupled
// output transforms with the degree-L block rotation.
class CGTable {
 public:
  explicit CGTable(int l_max = kMaxDegree) : l_max_(l_max) {
    if (l_max < 0 || l_max > kMaxDegree)
      throw UnsupportedDegree("CGTable supports l_max <= 3, got " + std::to_string(l_max));
    for (int l1 = 0; l1 <= l_max; ++l1)
      for (int l2 = 0; l2 <= l_max; ++l2)
        for (int L = std::abs(l1 - l2); L <= std::min(l1 + l2, l_max); ++L)
          table_[key(l1, l2, L)] = build(l1, l2, L);
  }

  static const CGTable& instance() {
    static const CGTable t(kMaxDegree);
    return t;
  }

  int l_max() const { return l_max_; }

  // Nonzero coefficients of one coupling path.  Throws InvalidPath when the
  // triangle inequality fails and UnsupportedDegree above the table range.
  const std::vector<CGEntry>& coefficients(int l1, int l2, int L) const {
    if (l1 < 0 || l2 < 0 || L < 0 || l1 > l_max_ || l2 > l_max_ || L > l_max_)
      throw UnsupportedDegree("coupling degree outside table range");
    if (L < std::abs(l1 - l2) || L > l1 + l2)
      throw InvalidPath("triangle rule fails for (" + std::to_string(l1) + "," + std::to_string(l2) +
                        ") -> " + std::to_string(L));
    return table_.at(key(l1, l2, L));
  }

 private:
  static long key(int l1, int l2, int L) { return (l1 * 16 + l2) * 16 + L; }

  static std::vector<CGEntry> build(int l1, int l2, int L) {
    const auto U1 = detail::real_basis_matrix(l1);
    const auto U2 = detail::real_basis_matrix(l2);
    const auto UL = detail::real_basis_matrix(L);
    const int d1 = 2 * l1 + 1, d2 = 2 * l2 + 1, dL = 2 * L + 1;
    std::vector<CGEntry> out;
    for (int M = -L; M <= L; ++M)
      for (int m1 = -l1; m1 <= l1; ++m1)
        for (int m2 = -l2; m2 <= l2; ++m2) {
          std::complex<double> acc(0.0, 0.0);
          for (int mu = -L; mu <= L; ++mu) {
            const std::complex<double> uL = UL[static_cast<std::size_t>((M + L) * dL + (mu + L))];
            if (uL == std::complex<double>(0.0, 0.0)) continue;
            for (int mu1 = -l1; mu1 <= l1; ++mu1) {
              const std::complex<double> u1 =
                  std::conj(U1[static_cast<std::size_t>((m1 + l1) * d1 + (mu1 + l1))]);
              if (u1 == std::complex<double>(0.0, 0.0)) continue;
              const int mu2 = mu - mu1;
              if (mu2 < -l2 || mu2 > l2) continue;
              const std::complex<double> u2 =
                  std::conj(U2[static_cast<std::size_t>((m2 + l2) * d2 + (mu2 + l2))]);
              if (u2 == std::complex<double>(0.0, 0.0)) continue;
              acc += uL * u1 * u2 * detail::cg_complex(l1, mu1, l2, mu2, L, mu);
            }
          }
          if (std::abs(acc.imag()) > 1e-10)
            throw DomainError("real-basis coupling came out complex; convention bug");
          if (std::abs(acc.real()) > 1e-12)
            out.push_back({m1, m2, M, acc.real()});
        }
    return out;
  }

  int l_max_;
  std::map<long, std::vector<CGEntry>> table_;
};

}  // namespace bam
