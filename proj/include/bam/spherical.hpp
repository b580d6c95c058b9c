#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "bam/errors.hpp"
#include "bam/irreps.hpp"
#include "bam/random.hpp"

namespace bam {

// Real spherical harmonics up to l = 3, Condon-Shortley phase omitted,
// components ordered m = -l..l.  On unit vectors every Y_{l,m} is a
// homogeneous degree-l polynomial in (x, y, z); the monomial tables below are
// the single source of truth shared by the plain evaluator and the autodiff
// graph builder, so both paths agree to the last bit of the same arithmetic.
struct ShTerm {
  int px, py, pz;
  double coef;
};

inline constexpr int kMaxDegree = 3;

namespace detail {

inline const std::vector<std::vector<ShTerm>>& sh_table(int l) {
  static const std::array<std::vector<std::vector<ShTerm>>, 4> tables = [] {
    const double pi = 3.14159265358979323846264338327950288;
    std::array<std::vector<std::vector<ShTerm>>, 4> t;
    // l = 0
    t[0] = {{{0, 0, 0, 0.5 / std::sqrt(pi)}}};
    // l = 1: (y, z, x)
    const double c1 = std::sqrt(3.0 / (4.0 * pi));
    t[1] = {
        {{0, 1, 0, c1}},
        {{0, 0, 1, c1}},
        {{1, 0, 0, c1}},
    };
    // l = 2
    const double c2a = std::sqrt(15.0 / (4.0 * pi));
    const double c2b = std::sqrt(5.0 / (16.0 * pi));
    const double c2c = std::sqrt(15.0 / (16.0 * pi));
    t[2] = {
        {{1, 1, 0, c2a}},
        {{0, 1, 1, c2a}},
        {{0, 0, 2, 2.0 * c2b}, {2, 0, 0, -c2b}, {0, 2, 0, -c2b}},
        {{1, 0, 1, c2a}},
        {{2, 0, 0, c2c}, {0, 2, 0, -c2c}},
    };
    // l = 3
    const double c3a = 0.25 * std::sqrt(35.0 / (2.0 * pi));
    const double c3b = 0.5 * std::sqrt(105.0 / pi);
    const double c3c = 0.25 * std::sqrt(21.0 / (2.0 * pi));
    const double c3d = 0.25 * std::sqrt(7.0 / pi);
    const double c3e = 0.25 * std::sqrt(105.0 / pi);
    t[3] = {
        {{2, 1, 0, 3.0 * c3a}, {0, 3, 0, -c3a}},
        {{1, 1, 1, c3b}},
        {{0, 1, 2, 4.0 * c3c}, {2, 1, 0, -c3c}, {0, 3, 0, -c3c}},
        {{0, 0, 3, 2.0 * c3d}, {2, 0, 1, -3.0 * c3d}, {0, 2, 1, -3.0 * c3d}},
        {{1, 0, 2, 4.0 * c3c}, {3, 0, 0, -c3c}, {1, 2, 0, -c3c}},
        {{2, 0, 1, c3e}, {0, 2, 1, -c3e}},
        {{3, 0, 0, c3a}, {1, 2, 0, -3.0 * c3a}},
    };
    return t;
  }();
  if (l < 0 || l > kMaxDegree)
    throw UnsupportedDegree("spherical harmonics implemented for l <= 3, got l = " + std::to_string(l));
  return tables[static_cast<std::size_t>(l)];
}

inline double eval_term(const ShTerm& t, double x, double y, double z) {
  double v = t.coef;
  for (int i = 0; i < t.px; ++i) v *= x;
  for (int i = 0; i < t.py; ++i) v *= y;
  for (int i = 0; i < t.pz; ++i) v *= z;
  return v;
}

}  // namespace detail

// Monomial expansion of Y_{l,m}; index the returned list with m + l.
inline const std::vector<std::vector<ShTerm>>& sh_monomials(int l) {
  return detail::sh_table(l);
}

inline double sh_value(int l, int m, double x, double y, double z) {
  const auto& terms = detail::sh_table(l)[static_cast<std::size_t>(m + l)];
  double v = 0.0;
  for (const auto& t : terms) v += detail::eval_term(t, x, y, z);
  return v;
}

// All harmonics 0..l_max of one unit direction.  Blocks have multiplicity 1
// and parity (-1)^l.
inline EquivariantFeature spherical_harmonics(const std::array<double, 3>& dir, int l_max) {
  if (l_max < 0 || l_max > kMaxDegree)
    throw UnsupportedDegree("l_max must be in [0, 3], got " + std::to_string(l_max));
  const double n2 = dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2];
  if (std::abs(n2 - 1.0) > 1e-8)
    throw NonUnitVector("spherical_harmonics expects a unit vector, |v|^2 = " + std::to_string(n2));
  IrrepsSpec spec;
  for (int l = 0; l <= l_max; ++l)
    spec.entries.push_back({l, (l % 2 == 0) ? Parity::even : Parity::odd, 1});
  EquivariantFeature f = EquivariantFeature::zeros(spec);
  for (int l = 0; l <= l_max; ++l)
    for (int m = -l; m <= l; ++m)
      f.blocks[static_cast<std::size_t>(l)][static_cast<std::size_t>(m + l)] =
          sh_value(l, m, dir[0], dir[1], dir[2]);
  return f;
}

using Mat3 = std::array<std::array<double, 3>, 3>;

inline std::array<double, 3> mat3_apply(const Mat3& R, const std::array<double, 3>& v) {
  return {R[0][0] * v[0] + R[0][1] * v[1] + R[0][2] * v[2],
          R[1][0] * v[0] + R[1][1] * v[1] + R[1][2] * v[2],
          R[2][0] * v[0] + R[2][1] * v[1] + R[2][2] * v[2]};
}

inline Mat3 rotation_from_axis_angle(std::array<double, 3> axis, double angle) {
  double n = std::sqrt(axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]);
  if (n == 0.0) throw DomainError("rotation axis must be nonzero");
  for (auto& a : axis) a /= n;
  const double c = std::cos(angle), s = std::sin(angle), t = 1.0 - c;
  const double x = axis[0], y = axis[1], z = axis[2];
  return {{{t * x * x + c, t * x * y - s * z, t * x * z + s * y},
           {t * x * y + s * z, t * y * y + c, t * y * z - s * x},
           {t * x * z - s * y, t * y * z + s * x, t * z * z + c}}};
}

inline Mat3 random_rotation(Rng& rng) {
  // Uniform quaternion -> rotation matrix.
  double u1 = rng.uniform(), u2 = rng.uniform(), u3 = rng.uniform();
  const double two_pi = 6.283185307179586476925286766559;
  double a = std::sqrt(1.0 - u1), b = std::sqrt(u1);
  double qx = a * std::sin(two_pi * u2);
  double qy = a * std::cos(two_pi * u2);
  double qz = b * std::sin(two_pi * u3);
  double qw = b * std::cos(two_pi * u3);
  Mat3 R;
  R[0][0] = 1 - 2 * (qy * qy + qz * qz);
  R[0][1] = 2 * (qx * qy - qz * qw);
  R[0][2] = 2 * (qx * qz + qy * qw);
  R[1][0] = 2 * (qx * qy + qz * qw);
  R[1][1] = 1 - 2 * (qx * qx + qz * qz);
  R[1][2] = 2 * (qy * qz - qx * qw);
  R[2][0] = 2 * (qx * qz - qy * qw);
  R[2][1] = 2 * (qy * qz + qx * qw);
  R[2][2] = 1 - 2 * (qx * qx + qy * qy);
  return R;
}

namespace detail {

// Solves A x = b in place for a small dense system (partial pivoting).
inline void solve_small(std::vector<double>& A, std::vector<double>& b, int n) {
  for (int col = 0; col < n; ++col) {
    int piv = col;
    for (int r = col + 1; r < n; ++r)
      if (std::abs(A[r * n + col]) > std::abs(A[piv * n + col])) piv = r;
    if (std::abs(A[piv * n + col]) < 1e-14) throw DomainError("singular system in solve_small");
    if (piv != col) {
      for (int c = 0; c < n; ++c) std::swap(A[piv * n + c], A[col * n + c]);
      std::swap(b[piv], b[col]);
    }
    for (int r = col + 1; r < n; ++r) {
      double f = A[r * n + col] / A[col * n + col];
      for (int c = col; c < n; ++c) A[r * n + c] -= f * A[col * n + c];
      b[r] -= f * b[col];
    }
  }
  for (int r = n - 1; r >= 0; --r) {
    double s = b[r];
    for (int c = r + 1; c < n; ++c) s -= A[r * n + c] * b[c];
    b[r] = s / A[r * n + r];
  }
}

}  // namespace detail

// Rotation matrix of the degree-l block in the real-harmonic basis:
// Y_l(R n) = D^l(R) Y_l(n).  Recovered from the harmonics themselves on a
// deterministic Fibonacci sphere (least squares), so it is consistent with
// the basis convention by construction.
inline std::vector<double> block_rotation(int l, const Mat3& R) {
  if (l < 0 || l > kMaxDegree)
    throw UnsupportedDegree("block_rotation implemented for l <= 3, got l = " + std::to_string(l));
  const int d = 2 * l + 1;
  const int K = 4 * d + 3;
  // Columns y_k = Y(n_k); want D with Yr = D Yn, i.e. Yn Ynt D^T = Yn Yrt.
  std::vector<double> Yn(static_cast<std::size_t>(d * K)), Yr(static_cast<std::size_t>(d * K));
  const double golden = 2.39996322972865332223155550663361;  // 2*pi*(2 - phi)
  for (int k = 0; k < K; ++k) {
    double zc = 1.0 - 2.0 * (k + 0.5) / K;
    double rho = std::sqrt(std::max(0.0, 1.0 - zc * zc));
    double phi = golden * k;
    std::array<double, 3> n{rho * std::cos(phi), rho * std::sin(phi), zc};
    std::array<double, 3> rn = mat3_apply(R, n);
    for (int m = -l; m <= l; ++m) {
      Yn[static_cast<std::size_t>((m + l) * K + k)] = sh_value(l, m, n[0], n[1], n[2]);
      Yr[static_cast<std::size_t>((m + l) * K + k)] = sh_value(l, m, rn[0], rn[1], rn[2]);
    }
  }
  // Normal equations: G = Yn Yn^T (d x d), H = Yn Yr^T; D = (G^-1 H)^T.
  std::vector<double> G(static_cast<std::size_t>(d * d), 0.0);
  std::vector<double> H(static_cast<std::size_t>(d * d), 0.0);
  for (int a = 0; a < d; ++a)
    for (int b = 0; b < d; ++b) {
      double g = 0.0, h = 0.0;
      for (int k = 0; k < K; ++k) {
        g += Yn[static_cast<std::size_t>(a * K + k)] * Yn[static_cast<std::size_t>(b * K + k)];
        h += Yn[static_cast<std::size_t>(a * K + k)] * Yr[static_cast<std::size_t>(b * K + k)];
      }
      G[static_cast<std::size_t>(a * d + b)] = g;
      H[static_cast<std::size_t>(a * d + b)] = h;
    }
  std::vector<double> D(static_cast<std::size_t>(d * d), 0.0);
  for (int col = 0; col < d; ++col) {
    std::vector<double> A = G;
    std::vector<double> rhs(static_cast<std::size_t>(d));
    for (int r = 0; r < d; ++r) rhs[static_cast<std::size_t>(r)] = H[static_cast<std::size_t>(r * d + col)];
    detail::solve_small(A, rhs, d);
    for (int r = 0; r < d; ++r) D[static_cast<std::size_t>(col * d + r)] = rhs[static_cast<std::size_t>(r)];
  }
  return D;
}

// Applies a rotation blockwise to an equivariant feature.
inline EquivariantFeature rotate_feature(const EquivariantFeature& f, const Mat3& R) {
  f.check();
  EquivariantFeature out = EquivariantFeature::zeros(f.spec);
  for (std::size_t i = 0; i < f.spec.entries.size(); ++i) {
    const Irrep& ir = f.spec.entries[i];
    const int d = ir.block_dim();
    std::vector<double> D = block_rotation(ir.l, R);
    for (int u = 0; u < ir.mult; ++u)
      for (int a = 0; a < d; ++a) {
        double s = 0.0;
        for (int b = 0; b < d; ++b)
          s += D[static_cast<std::size_t>(a * d + b)] * f.blocks[i][static_cast<std::size_t>(u * d + b)];
        out.blocks[i][static_cast<std::size_t>(u * d + a)] = s;
      }
  }
  return out;
}

}  // namespace bam
