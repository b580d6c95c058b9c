#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>

#include "bam/cg.hpp"
#include "bam/equivariant.hpp"
#include "bam/irreps.hpp"
#include "bam/spherical.hpp"
#include "test_helpers.hpp"

using namespace bam;
using bamtest::rel_err;
using bamtest::sphere_integral;

TEST_CASE("irreps spec parsing and canonical order") {
  IrrepsSpec s = IrrepsSpec::parse("64x1o+64x0e+8x2e");
  REQUIRE(s.to_string() == "64x0e+64x1o+8x2e");
  REQUIRE(s.total_dim() == 64 + 64 * 3 + 8 * 5);
  REQUIRE(IrrepsSpec::parse("0e+1o").entries[0].mult == 1);
  REQUIRE_THROWS_AS(IrrepsSpec::parse("4x0e+2x0e"), ShapeError);
  REQUIRE_THROWS_AS(IrrepsSpec::parse("4x0q"), ParseError);
  REQUIRE_THROWS_AS(IrrepsSpec::parse(""), ParseError);
}

TEST_CASE("spherical harmonics frozen values") {
  // Y00 is constant 1/(2 sqrt(pi)) on the sphere.
  auto f = spherical_harmonics({0.0, 0.0, 1.0}, 1);
  REQUIRE(f.blocks[0][0] == Catch::Approx(0.28209479177387814).epsilon(1e-12));
  // z-axis, l = 1: only the m = 0 component survives, sqrt(3/(4 pi)).
  REQUIRE(f.blocks[1][0] == Catch::Approx(0.0).margin(1e-15));
  REQUIRE(f.blocks[1][1] == Catch::Approx(0.48860251190291992).epsilon(1e-12));
  REQUIRE(f.blocks[1][2] == Catch::Approx(0.0).margin(1e-15));

  REQUIRE_THROWS_AS(spherical_harmonics({0.0, 0.0, 2.0}, 1), NonUnitVector);
  REQUIRE_THROWS_AS(spherical_harmonics({0.0, 0.0, 1.0}, 4), UnsupportedDegree);
}

TEST_CASE("spherical harmonics sum rule") {
  // sum_m Y_lm^2 = (2l+1)/(4 pi) for every direction.
  Rng rng(7);
  for (int rep = 0; rep < 32; ++rep) {
    auto n = bamtest::random_unit(rng);
    auto f = spherical_harmonics(n, 3);
    for (int l = 0; l <= 3; ++l) {
      double s = 0.0;
      for (double v : f.blocks[static_cast<std::size_t>(l)]) s += v * v;
      double want = (2.0 * l + 1.0) / (4.0 * 3.14159265358979323846);
      REQUIRE(rel_err(s, want) < 1e-12);
    }
  }
}

TEST_CASE("spherical harmonics orthonormality under quadrature") {
  for (int l1 = 0; l1 <= 3; ++l1)
    for (int m1 = -l1; m1 <= l1; ++m1)
      for (int l2 = l1; l2 <= 3; ++l2)
        for (int m2 = -l2; m2 <= l2; ++m2) {
          double got = sphere_integral([&](double x, double y, double z) {
            return sh_value(l1, m1, x, y, z) * sh_value(l2, m2, x, y, z);
          });
          double want = (l1 == l2 && m1 == m2) ? 1.0 : 0.0;
          REQUIRE(std::abs(got - want) < 1e-12);
        }
}

TEST_CASE("block rotation represents the group on harmonics") {
  Rng rng(11);
  for (int rep = 0; rep < 8; ++rep) {
    Mat3 R = random_rotation(rng);
    auto n = bamtest::random_unit(rng);
    auto rn = mat3_apply(R, n);
    for (int l = 0; l <= 3; ++l) {
      const int d = 2 * l + 1;
      auto D = block_rotation(l, R);
      // Y(R n) = D Y(n)
      for (int a = 0; a < d; ++a) {
        double s = 0.0;
        for (int b = 0; b < d; ++b) s += D[static_cast<std::size_t>(a * d + b)] * sh_value(l, b - l, n[0], n[1], n[2]);
        REQUIRE(std::abs(s - sh_value(l, a - l, rn[0], rn[1], rn[2])) < 1e-11);
      }
      // orthogonality
      for (int a = 0; a < d; ++a)
        for (int b = 0; b < d; ++b) {
          double s = 0.0;
          for (int k = 0; k < d; ++k)
            s += D[static_cast<std::size_t>(k * d + a)] * D[static_cast<std::size_t>(k * d + b)];
          REQUIRE(std::abs(s - (a == b ? 1.0 : 0.0)) < 1e-11);
        }
    }
  }
}

TEST_CASE("cg table frozen paths") {
  const CGTable& cg = CGTable::instance();
  // (0,0,0): a single unit coefficient.
  const auto& e000 = cg.coefficients(0, 0, 0);
  REQUIRE(e000.size() == 1);
  REQUIRE(e000[0].c == Catch::Approx(1.0).epsilon(1e-14));
  // (0,l,l) and (l,0,l) couple as the identity.
  for (int l = 1; l <= 3; ++l) {
    for (const auto& e : cg.coefficients(0, l, l)) {
      REQUIRE(e.m2 == e.M);
      REQUIRE(e.c == Catch::Approx(1.0).epsilon(1e-12));
    }
    REQUIRE(cg.coefficients(0, l, l).size() == static_cast<std::size_t>(2 * l + 1));
    for (const auto& e : cg.coefficients(l, 0, l)) {
      REQUIRE(e.m1 == e.M);
      REQUIRE(e.c == Catch::Approx(1.0).epsilon(1e-12));
    }
  }
  // (1,1,0): diagonal contraction, |c| = 1/sqrt(3), one common sign -> dot product.
  const auto& e110 = cg.coefficients(1, 1, 0);
  REQUIRE(e110.size() == 3);
  for (const auto& e : e110) {
    REQUIRE(e.m1 == e.m2);
    REQUIRE(std::abs(e.c) == Catch::Approx(1.0 / std::sqrt(3.0)).epsilon(1e-12));
    REQUIRE(e.c * e110[0].c > 0.0);
  }
  REQUIRE_THROWS_AS(cg.coefficients(1, 1, 3), InvalidPath);
  REQUIRE_THROWS_AS(CGTable(4), UnsupportedDegree);
}

TEST_CASE("cg normalization per output component") {
  const CGTable& cg = CGTable::instance();
  for (int l1 = 0; l1 <= 3; ++l1)
    for (int l2 = 0; l2 <= 3; ++l2)
      for (int L = std::abs(l1 - l2); L <= std::min(3, l1 + l2); ++L) {
        std::map<int, double> norm;
        for (const auto& e : cg.coefficients(l1, l2, L)) norm[e.M] += e.c * e.c;
        for (int M = -L; M <= L; ++M) REQUIRE(norm[M] == Catch::Approx(1.0).epsilon(1e-12));
      }
}

TEST_CASE("cg coupling is equivariant for every path") {
  const CGTable& cg = CGTable::instance();
  Rng rng(23);
  for (int l1 = 0; l1 <= 3; ++l1)
    for (int l2 = 0; l2 <= 3; ++l2)
      for (int L = std::abs(l1 - l2); L <= std::min(3, l1 + l2); ++L) {
        const int d1 = 2 * l1 + 1, d2 = 2 * l2 + 1, dL = 2 * L + 1;
        std::vector<double> a(static_cast<std::size_t>(d1)), b(static_cast<std::size_t>(d2));
        for (auto& v : a) v = rng.normal();
        for (auto& v : b) v = rng.normal();
        Mat3 R = random_rotation(rng);
        auto D1 = block_rotation(l1, R);
        auto D2 = block_rotation(l2, R);
        auto DL = block_rotation(L, R);
        auto couple = [&](const std::vector<double>& x, const std::vector<double>& y) {
          std::vector<double> o(static_cast<std::size_t>(dL), 0.0);
          for (const auto& e : cg.coefficients(l1, l2, L))
            o[static_cast<std::size_t>(e.M + L)] +=
                e.c * x[static_cast<std::size_t>(e.m1 + l1)] * y[static_cast<std::size_t>(e.m2 + l2)];
          return o;
        };
        auto rot = [](const std::vector<double>& D, const std::vector<double>& v) {
          const int d = static_cast<int>(v.size());
          std::vector<double> o(v.size(), 0.0);
          for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j)
              o[static_cast<std::size_t>(i)] += D[static_cast<std::size_t>(i * d + j)] * v[static_cast<std::size_t>(j)];
          return o;
        };
        auto lhs = couple(rot(D1, a), rot(D2, b));
        auto rhs = rot(DL, couple(a, b));
        for (int i = 0; i < dL; ++i)
          REQUIRE(std::abs(lhs[static_cast<std::size_t>(i)] - rhs[static_cast<std::size_t>(i)]) < 1e-10);
      }
}

TEST_CASE("cg table reconstructs pointwise products of harmonics") {
  // Y_l1m1 * Y_l2m2 expands in harmonics with coefficients proportional,
  // per (l1,l2,L), to the coupling table.  The proportionality constant is
  // shared across all (m1,m2,M) of a path; antisymmetric paths have zero
  // product coefficients and are covered by the equivariance test instead.
  const CGTable& cg = CGTable::instance();
  for (int l1 = 0; l1 <= 2; ++l1)
    for (int l2 = 0; l2 <= 2; ++l2)
      for (int L = std::abs(l1 - l2); L <= std::min(3, l1 + l2); ++L) {
        if ((l1 + l2 + L) % 2 != 0) continue;
        // dense coupling array for lookup
        std::map<std::tuple<int, int, int>, double> c;
        for (const auto& e : cg.coefficients(l1, l2, L)) c[{e.m1, e.m2, e.M}] = e.c;
        // quadrature projection g(m1,m2,M); fit the per-path ratio on the
        // largest coupling coefficient
        double cmax = 0.0;
        CGEntry emax{0, 0, 0, 0.0};
        for (const auto& e : cg.coefficients(l1, l2, L))
          if (std::abs(e.c) > cmax) {
            cmax = std::abs(e.c);
            emax = e;
          }
        REQUIRE(cmax > 0.0);
        double kappa = sphere_integral([&](double x, double y, double z) {
                         return sh_value(l1, emax.m1, x, y, z) * sh_value(l2, emax.m2, x, y, z) *
                                sh_value(L, emax.M, x, y, z);
                       }) /
                       emax.c;
        for (int m1 = -l1; m1 <= l1; ++m1)
          for (int m2 = -l2; m2 <= l2; ++m2)
            for (int M = -L; M <= L; ++M) {
              double g = sphere_integral([&](double x, double y, double z) {
                return sh_value(l1, m1, x, y, z) * sh_value(l2, m2, x, y, z) * sh_value(L, M, x, y, z);
              });
              auto it = c.find({m1, m2, M});
              double cv = (it == c.end()) ? 0.0 : it->second;
              REQUIRE(std::abs(g - kappa * cv) < 1e-10);
            }
      }
}

TEST_CASE("cg 1x1->1 matches the cross product") {
  const CGTable& cg = CGTable::instance();
  Rng rng(31);
  // components ordered (y, z, x); cross product in that ordering
  auto cross_yzx = [](const std::vector<double>& a, const std::vector<double>& b) {
    double ax = a[2], ay = a[0], az = a[1];
    double bx = b[2], by = b[0], bz = b[1];
    return std::vector<double>{az * bx - ax * bz, ax * by - ay * bx, ay * bz - az * by};
  };
  std::vector<double> a(3), b(3);
  for (auto& v : a) v = rng.normal();
  for (auto& v : b) v = rng.normal();
  std::vector<double> o(3, 0.0);
  for (const auto& e : cg.coefficients(1, 1, 1))
    o[static_cast<std::size_t>(e.M + 1)] += e.c * a[static_cast<std::size_t>(e.m1 + 1)] * b[static_cast<std::size_t>(e.m2 + 1)];
  auto x = cross_yzx(a, b);
  // proportional with one shared constant
  double k = 0.0;
  for (int i = 0; i < 3; ++i)
    if (std::abs(x[static_cast<std::size_t>(i)]) > 0.1) k = o[static_cast<std::size_t>(i)] / x[static_cast<std::size_t>(i)];
  REQUIRE(std::abs(k) > 0.1);
  for (int i = 0; i < 3; ++i)
    REQUIRE(std::abs(o[static_cast<std::size_t>(i)] - k * x[static_cast<std::size_t>(i)]) < 1e-12);
}

TEST_CASE("tensor product with a unit scalar rescales by the path weight") {
  Rng rng(5);
  IrrepsSpec sa = IrrepsSpec::parse("1x0e");
  IrrepsSpec sb = IrrepsSpec::parse("4x1o+4x2e");
  EquivariantFeature a = EquivariantFeature::zeros(sa);
  a.blocks[0][0] = 1.0;
  EquivariantFeature b = EquivariantFeature::zeros(sb);
  for (auto& blk : b.blocks)
    for (auto& v : blk) v = rng.normal();
  auto plan = TensorProductPlan::build(sa, sb, sb);
  std::vector<double> w(static_cast<std::size_t>(plan.weight_count));
  for (auto& v : w) v = rng.normal();
  auto out = tensor_product(plan, a, b, w);
  for (std::size_t i = 0; i < sb.entries.size(); ++i) {
    const int d = sb.entries[i].block_dim();
    for (int u = 0; u < sb.entries[i].mult; ++u) {
      const double wm = w[static_cast<std::size_t>(plan.paths[i].weight_offset + u)];
      for (int m = 0; m < d; ++m)
        REQUIRE(rel_err(out.blocks[i][static_cast<std::size_t>(u * d + m)],
                        wm * b.blocks[i][static_cast<std::size_t>(u * d + m)]) < 1e-12);
    }
  }
}

TEST_CASE("tensor product of a vector with itself gives its squared norm") {
  Rng rng(9);
  IrrepsSpec sv = IrrepsSpec::parse("1x1o");
  IrrepsSpec so = IrrepsSpec::parse("1x0e");
  EquivariantFeature a = EquivariantFeature::zeros(sv);
  for (auto& v : a.blocks[0]) v = rng.normal();
  auto plan = TensorProductPlan::build(sv, sv, so);
  auto out = tensor_product(plan, a, a, {1.0});
  double n2 = 0.0;
  for (double v : a.blocks[0]) n2 += v * v;
  const auto& e110 = CGTable::instance().coefficients(1, 1, 0);
  REQUIRE(rel_err(out.blocks[0][0], e110[0].c * n2) < 1e-12);
}

TEST_CASE("tensor product path and shape errors") {
  IrrepsSpec s0 = IrrepsSpec::parse("2x0e");
  REQUIRE_THROWS_AS(TensorProductPlan::build(s0, s0, IrrepsSpec::parse("2x1e")), InvalidPath);
  REQUIRE_THROWS_AS(TensorProductPlan::build(IrrepsSpec::parse("3x0e"), s0, IrrepsSpec::parse("2x0e")),
                    ShapeError);
}

TEST_CASE("tensor product is equivariant") {
  Rng rng(41);
  IrrepsSpec sa = IrrepsSpec::parse("1x0e+1x1o+1x2e");
  IrrepsSpec sb = IrrepsSpec::parse("3x0e+3x1o");
  IrrepsSpec so = IrrepsSpec::parse("3x0e+3x1o+3x1e+3x2e");
  auto plan = TensorProductPlan::build(sa, sb, so);
  std::vector<double> w(static_cast<std::size_t>(plan.weight_count));
  for (auto& v : w) v = rng.normal();
  for (int rep = 0; rep < 4; ++rep) {
    EquivariantFeature a = EquivariantFeature::zeros(sa);
    EquivariantFeature b = EquivariantFeature::zeros(sb);
    for (auto& blk : a.blocks)
      for (auto& v : blk) v = rng.normal();
    for (auto& blk : b.blocks)
      for (auto& v : blk) v = rng.normal();
    Mat3 R = random_rotation(rng);
    auto lhs = tensor_product(plan, rotate_feature(a, R), rotate_feature(b, R), w);
    auto rhs = rotate_feature(tensor_product(plan, a, b, w), R);
    for (std::size_t i = 0; i < lhs.blocks.size(); ++i)
      for (std::size_t k = 0; k < lhs.blocks[i].size(); ++k)
        REQUIRE(std::abs(lhs.blocks[i][k] - rhs.blocks[i][k]) < 1e-10);
  }
}

TEST_CASE("equivariant linear mixes channels within blocks") {
  Rng rng(3);
  IrrepsSpec si = IrrepsSpec::parse("2x0e+2x1o");
  IrrepsSpec so = IrrepsSpec::parse("3x0e+1x1o");
  EquivariantFeature x = EquivariantFeature::zeros(si);
  for (auto& blk : x.blocks)
    for (auto& v : blk) v = rng.normal();
  std::vector<double> W(static_cast<std::size_t>(equivariant_linear_weight_count(si, so)));
  for (auto& v : W) v = rng.normal();
  auto y = equivariant_linear(x, so, W);
  // hand computation: scalars
  for (int v = 0; v < 3; ++v)
    REQUIRE(rel_err(y.blocks[0][static_cast<std::size_t>(v)],
                    W[static_cast<std::size_t>(v * 2 + 0)] * x.blocks[0][0] +
                        W[static_cast<std::size_t>(v * 2 + 1)] * x.blocks[0][1]) < 1e-12);
  // vector block: one output channel from two inputs, same mix for each m
  for (int m = 0; m < 3; ++m)
    REQUIRE(rel_err(y.blocks[1][static_cast<std::size_t>(m)],
                    W[6] * x.blocks[1][static_cast<std::size_t>(m)] +
                        W[7] * x.blocks[1][static_cast<std::size_t>(3 + m)]) < 1e-12);
  // identity weights reproduce the input
  std::vector<double> I{1, 0, 0, 1, 1, 0, 0, 1};
  auto z = equivariant_linear(x, si, I);
  for (std::size_t i = 0; i < x.blocks.size(); ++i)
    for (std::size_t k = 0; k < x.blocks[i].size(); ++k) REQUIRE(z.blocks[i][k] == x.blocks[i][k]);
  REQUIRE_THROWS_AS(equivariant_linear(x, IrrepsSpec::parse("2x2e"), W), InvalidPath);

  // equivariance
  Mat3 R = random_rotation(rng);
  auto lhs = equivariant_linear(rotate_feature(x, R), so, W);
  auto rhs = rotate_feature(equivariant_linear(x, so, W), R);
  for (std::size_t i = 0; i < lhs.blocks.size(); ++i)
    for (std::size_t k = 0; k < lhs.blocks[i].size(); ++k)
      REQUIRE(std::abs(lhs.blocks[i][k] - rhs.blocks[i][k]) < 1e-11);
}

TEST_CASE("gate applies silu to scalars and gated scaling to vectors") {
  IrrepsSpec sx = IrrepsSpec::parse("2x0e+2x1o");
  EquivariantFeature x = EquivariantFeature::zeros(sx);
  x.blocks[0] = {1.0, -2.0};
  x.blocks[1] = {1, 2, 3, 4, 5, 6};
  EquivariantFeature g = EquivariantFeature::zeros(IrrepsSpec::parse("2x0e"));
  g.blocks[0] = {10.0, 0.5};
  auto y = gate(x, g);
  REQUIRE(rel_err(y.blocks[0][0], silu(1.0)) < 1e-14);
  REQUIRE(rel_err(y.blocks[0][1], silu(-2.0)) < 1e-14);
  // multiplier at gate 10 is within 5e-5 of 9.9995
  REQUIRE(std::abs(y.blocks[1][0] / x.blocks[1][0] - 9.9995) < 5e-5);
  for (int m = 0; m < 3; ++m) {
    REQUIRE(rel_err(y.blocks[1][static_cast<std::size_t>(m)], silu(10.0) * x.blocks[1][static_cast<std::size_t>(m)]) < 1e-14);
    REQUIRE(rel_err(y.blocks[1][static_cast<std::size_t>(3 + m)], silu(0.5) * x.blocks[1][static_cast<std::size_t>(3 + m)]) < 1e-14);
  }
  // rotation commutes with gating (gates are invariant)
  Rng rng(17);
  Mat3 R = random_rotation(rng);
  auto lhs = gate(rotate_feature(x, R), g);
  auto rhs = rotate_feature(gate(x, g), R);
  for (std::size_t i = 0; i < lhs.blocks.size(); ++i)
    for (std::size_t k = 0; k < lhs.blocks[i].size(); ++k)
      REQUIRE(std::abs(lhs.blocks[i][k] - rhs.blocks[i][k]) < 1e-11);

  EquivariantFeature bad = EquivariantFeature::zeros(IrrepsSpec::parse("2x1o"));
  REQUIRE_THROWS_AS(gate(x, bad), NotScalar);
  EquivariantFeature wrong = EquivariantFeature::zeros(IrrepsSpec::parse("3x0e"));
  REQUIRE_THROWS_AS(gate(x, wrong), ShapeError);
}
