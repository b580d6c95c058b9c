#include <algorithm>
#include <cmath>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "bam/errors.hpp"
#include "bam/random.hpp"
#include "bam/uq.hpp"
#include "test_helpers.hpp"

using namespace bam;

namespace {

// stratified standard-normal sample: exact quantile grid, no MC noise
std::vector<double> normal_grid(std::size_t n) {
  std::vector<double> z(n);
  for (std::size_t i = 0; i < n; ++i)
    z[i] = normal_quantile((static_cast<double>(i) + 0.5) / static_cast<double>(n));
  return z;
}

}  // namespace

TEST_CASE("normal quantile inverts the cdf") {
  // frozen reference: third quartile of the standard normal
  REQUIRE(normal_quantile(0.75) == Catch::Approx(0.674489750196082).epsilon(1e-12));
  REQUIRE(normal_quantile(0.5) == Catch::Approx(0.0).margin(1e-15));

  for (double p : {1e-6, 1e-3, 0.02, 0.2, 0.5, 0.8, 0.97, 0.999, 1.0 - 1e-6}) {
    const double z = normal_quantile(p);
    REQUIRE(normal_cdf(z) == Catch::Approx(p).epsilon(1e-12).margin(1e-15));
    REQUIRE(normal_quantile(1.0 - p) == Catch::Approx(-z).margin(1e-9));
  }
  REQUIRE(normal_cdf(0.0) == 0.5);
  REQUIRE_THROWS_AS(normal_quantile(0.0), DomainError);
  REQUIRE_THROWS_AS(normal_quantile(1.0), DomainError);
}

TEST_CASE("calibration error vanishes for a calibrated sample") {
  const std::size_t n = 10000;
  const auto z = normal_grid(n);
  Rng rng = Rng::stream(901, "ce_sd");
  std::vector<double> resid(n), sd(n);
  for (std::size_t i = 0; i < n; ++i) {
    sd[i] = rng.uniform(0.05, 4.0);
    resid[i] = z[i] * sd[i];
  }
  REQUIRE(calibration_error(resid, sd) < 1e-3);

  const auto rc = reliability_curve(resid, sd);
  REQUIRE(rc.levels.size() == 100);
  REQUIRE(rc.levels.front() == Catch::Approx(1.0 / 101.0).epsilon(1e-15));
  REQUIRE(rc.levels.back() == Catch::Approx(100.0 / 101.0).epsilon(1e-15));
  for (std::size_t j = 0; j < rc.levels.size(); ++j)
    REQUIRE(rc.observed[j] == Catch::Approx(rc.levels[j]).margin(2e-3));
}

TEST_CASE("calibration error of an infinitely wide predictor matches the closed form") {
  // sd -> inf means every central interval covers every point, so the
  // observed curve is identically 1 and CE = mean_j (1 - p_j)^2 over the
  // implemented level grid p_j = j/(m+1).
  std::vector<double> resid = {0.3, -1.2, 5.0, 0.07, -2.2, 9.9, -0.4, 1.1};
  std::vector<double> sd(resid.size(), 1e300);
  const int m = 100;
  double want = 0.0;
  for (int j = 1; j <= m; ++j) {
    const double p = static_cast<double>(j) / (m + 1.0);
    want += (p - 1.0) * (p - 1.0);
  }
  want /= m;
  REQUIRE(want == Catch::Approx(0.331683168).epsilon(1e-8));
  REQUIRE(calibration_error(resid, sd, m) == want);
}

TEST_CASE("calibration error is deterministic and scale invariant") {
  Rng rng = Rng::stream(902, "ce_scale");
  std::vector<double> resid(500), sd(500);
  for (std::size_t i = 0; i < resid.size(); ++i) {
    resid[i] = 1.7 * rng.normal();
    sd[i] = rng.uniform(0.2, 2.0);
  }
  const double ce = calibration_error(resid, sd);
  REQUIRE(calibration_error(resid, sd) == ce);

  // power-of-two factor keeps every standardized residual bitwise identical
  std::vector<double> r2 = resid, s2 = sd;
  for (auto& v : r2) v *= 2.0;
  for (auto& v : s2) v *= 2.0;
  REQUIRE(calibration_error(r2, s2) == ce);

  // generic positive factor perturbs z by at most one ulp; coverage counts
  // only move if a point sits exactly on an interval edge
  std::vector<double> r3 = resid, s3 = sd;
  for (auto& v : r3) v *= 3.7;
  for (auto& v : s3) v *= 3.7;
  REQUIRE(std::abs(calibration_error(r3, s3) - ce) < 1e-12);
}

TEST_CASE("calibration error rejects bad input") {
  REQUIRE_THROWS_AS(calibration_error({}, {}), NoData);
  REQUIRE_THROWS_AS(calibration_error({1.0}, {1.0, 2.0}), ShapeError);
  REQUIRE_THROWS_AS(calibration_error({1.0}, {0.0}), DomainError);
  REQUIRE_THROWS_AS(calibration_error({1.0}, {-1.0}), DomainError);
  REQUIRE_THROWS_AS(calibration_error({1.0}, {1.0}, 0), DomainError);
}

TEST_CASE("auroc matches a brute force pair count") {
  REQUIRE(auroc({1.0, 2.0}, {3.0, 4.0}) == 1.0);
  REQUIRE(auroc({3.0, 4.0}, {1.0, 2.0}) == 0.0);
  REQUIRE(auroc({1.0, 2.0}, {1.0, 2.0}) == 0.5);
  REQUIRE(auroc({5.0}, {5.0}) == 0.5);

  Rng rng = Rng::stream(903, "auroc");
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> id(60), ood(40);
    // integer-valued scores force plenty of ties across the two groups
    for (auto& v : id) v = static_cast<double>(rng.below(10));
    for (auto& v : ood) v = static_cast<double>(rng.below(10)) + 1.0;
    double pairs = 0.0;
    for (double o : ood)
      for (double i : id) {
        if (o > i) pairs += 1.0;
        else if (o == i) pairs += 0.5;
      }
    const double want = pairs / (60.0 * 40.0);
    REQUIRE(auroc(id, ood) == want);

    // any strictly increasing transform preserves the rank structure
    std::vector<double> id_t = id, ood_t = ood;
    for (auto& v : id_t) v = std::exp(v / 3.0);
    for (auto& v : ood_t) v = std::exp(v / 3.0);
    REQUIRE(auroc(id_t, ood_t) == want);
  }
  REQUIRE_THROWS_AS(auroc({}, {1.0}), NoData);
  REQUIRE_THROWS_AS(auroc({1.0}, {}), NoData);
}

TEST_CASE("recalibration map applies piecewise linear interpolation") {
  CalibrationMap map;
  map.nominal = {0.0, 0.2, 0.8, 1.0};
  map.calibrated = {0.0, 0.1, 0.9, 1.0};
  REQUIRE(recalibrate_apply(map, 0.0) == 0.0);
  REQUIRE(recalibrate_apply(map, 1.0) == 1.0);
  REQUIRE(recalibrate_apply(map, 0.2) == 0.1);
  REQUIRE(recalibrate_apply(map, 0.5) == Catch::Approx(0.5).epsilon(1e-15));
  REQUIRE(recalibrate_apply(map, 0.1) == Catch::Approx(0.05).epsilon(1e-15));
  REQUIRE(recalibrate_apply(map, 0.9) == Catch::Approx(0.95).epsilon(1e-15));

  const CalibrationMap id = CalibrationMap::identity();
  for (double p : {0.0, 0.123, 0.5, 0.77, 1.0}) REQUIRE(recalibrate_apply(id, p) == p);

  CalibrationMap bad;
  bad.nominal = {0.5};
  bad.calibrated = {0.5};
  REQUIRE_THROWS_AS(recalibrate_apply(bad, 0.5), ShapeError);
}

TEST_CASE("recalibration is near identity when the model is already calibrated") {
  const std::size_t n = 10000;
  const auto z = normal_grid(n);
  std::vector<double> sd(n, 1.3);
  std::vector<double> resid(n);
  for (std::size_t i = 0; i < n; ++i) resid[i] = z[i] * sd[i];
  const CalibrationMap map = recalibrate_fit(resid, sd);
  for (double p = 0.05; p < 1.0; p += 0.05)
    REQUIRE(recalibrate_apply(map, p) == Catch::Approx(p).margin(0.02));

  // knots must be monotone with pinned endpoints
  REQUIRE(map.nominal.front() == 0.0);
  REQUIRE(map.calibrated.front() == 0.0);
  REQUIRE(map.nominal.back() == 1.0);
  REQUIRE(map.calibrated.back() == 1.0);
  REQUIRE(std::is_sorted(map.nominal.begin(), map.nominal.end()));
  REQUIRE(std::is_sorted(map.calibrated.begin(), map.calibrated.end()));
}

TEST_CASE("recalibration repairs an overconfident predictor") {
  Rng rng = Rng::stream(904, "overconf");
  const std::size_t n = 4000;
  std::vector<double> resid(n), sd(n);
  for (std::size_t i = 0; i < n; ++i) {
    sd[i] = rng.uniform(0.3, 1.5);
    resid[i] = 2.0 * sd[i] * rng.normal();  // true spread twice the claim
  }
  const double before = calibration_error(resid, sd);
  REQUIRE(before > 0.01);
  const CalibrationMap map = recalibrate_fit(resid, sd);
  const double after = calibration_error(resid, sd, 100, &map);
  REQUIRE(after <= 0.1 * before);
}

TEST_CASE("recalibration never hurts on its own fitting set") {
  Rng rng = Rng::stream(905, "fitset");
  for (int rep = 0; rep < 5; ++rep) {
    const std::size_t n = 600;
    std::vector<double> resid(n), sd(n);
    const double warp = rng.uniform(0.4, 2.5);
    for (std::size_t i = 0; i < n; ++i) {
      sd[i] = rng.uniform(0.2, 2.0);
      resid[i] = warp * sd[i] * rng.normal() + 0.1 * rng.uniform();
    }
    const double before = calibration_error(resid, sd);
    const CalibrationMap map = recalibrate_fit(resid, sd);
    const double after = calibration_error(resid, sd, 100, &map);
    REQUIRE(after <= before + 1e-12);
  }
}

TEST_CASE("recalibration rejects degenerate input") {
  std::vector<double> zeros(20, 0.0), ones(20, 1.0);
  REQUIRE_THROWS_AS(recalibrate_fit(zeros, ones), DegenerateCalibration);
  REQUIRE_THROWS_AS(recalibrate_fit({0.1, 0.2}, {1.0, 1.0}), DomainError);
  REQUIRE_THROWS_AS(recalibrate_fit({}, {}), NoData);
  std::vector<double> r(20, 0.1), s(20, 1.0);
  r[3] = -0.4;
  s[5] = 0.0;
  REQUIRE_THROWS_AS(recalibrate_fit(r, s), DomainError);
}

TEST_CASE("composite score applies the frozen weights") {
  CohortNormalization ctx;
  ctx.e_ce_min = 0.0;
  ctx.e_ce_max = 1.0;
  ctx.f_ce_min = 0.0;
  ctx.f_ce_max = 1.0;
  REQUIRE(composite_score(0.0, 0.0, 0.0, 0.0, 1.0, ctx) == 0.0);
  REQUIRE(composite_score(1.0, 0.0, 0.0, 0.0, 1.0, ctx) == 0.25 * 23.06);
  REQUIRE(composite_score(0.0, 1.0, 0.0, 0.0, 1.0, ctx) == 0.25 * 23.06);
  REQUIRE(composite_score(0.0, 0.0, 1.0, 0.0, 1.0, ctx) == 0.125);
  REQUIRE(composite_score(0.0, 0.0, 0.0, 1.0, 1.0, ctx) == 0.125);
  REQUIRE(composite_score(0.0, 0.0, 0.0, 0.0, 0.5, ctx) == 0.125);

  // lower is better: each raw error pushed up raises the score
  const double base = composite_score(0.1, 0.3, 0.4, 0.2, 0.9, ctx);
  REQUIRE(composite_score(0.2, 0.3, 0.4, 0.2, 0.9, ctx) > base);
  REQUIRE(composite_score(0.1, 0.4, 0.4, 0.2, 0.9, ctx) > base);
  REQUIRE(composite_score(0.1, 0.3, 0.5, 0.2, 0.9, ctx) > base);
  REQUIRE(composite_score(0.1, 0.3, 0.4, 0.3, 0.9, ctx) > base);
  REQUIRE(composite_score(0.1, 0.3, 0.4, 0.2, 0.8, ctx) > base);

  CohortNormalization flat;
  flat.e_ce_min = 0.2;
  flat.e_ce_max = 0.2;
  flat.f_ce_min = 0.0;
  flat.f_ce_max = 1.0;
  REQUIRE_THROWS_AS(composite_score(0.1, 0.1, 0.2, 0.1, 0.9, flat), DegenerateNormalization);
  REQUIRE_THROWS_AS(composite_score(-0.1, 0.1, 0.2, 0.1, 0.9, ctx), DomainError);
  REQUIRE_THROWS_AS(composite_score(0.1, 0.1, 0.2, 0.1, 1.1, ctx), DomainError);
}

TEST_CASE("error scatter carries half normal reference bands") {
  std::vector<double> resid = {0.5, -1.5, 0.0, 2.5};
  std::vector<double> sd = {1.0, 2.0, 3.0, 4.0};
  const ScatterData sc = error_scatter(resid, sd);
  REQUIRE(sc.predicted_sd == sd);
  REQUIRE(sc.abs_error == std::vector<double>{0.5, 1.5, 0.0, 2.5});
  REQUIRE(sc.band_levels == std::array<double, 4>{0.25, 0.5, 0.75, 0.95});
  REQUIRE(sc.band_slopes[1] == Catch::Approx(0.674489750196082).epsilon(1e-9));
  REQUIRE(sc.band_slopes[3] == Catch::Approx(1.959963984540054).epsilon(1e-9));
  REQUIRE(std::is_sorted(sc.band_slopes.begin(), sc.band_slopes.end()));

  // for a calibrated model about half the points fall under the median band
  const std::size_t n = 1000;
  const auto z = normal_grid(n);
  std::vector<double> r2(n), s2(n, 0.7);
  for (std::size_t i = 0; i < n; ++i) r2[i] = 0.7 * z[i];
  const ScatterData sc2 = error_scatter(r2, s2);
  std::size_t below = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (sc2.abs_error[i] < sc2.band_slopes[1] * sc2.predicted_sd[i]) ++below;
  REQUIRE(std::abs(static_cast<double>(below) / n - 0.5) < 0.047);

  REQUIRE_THROWS_AS(error_scatter({}, {}), NoData);
  REQUIRE_THROWS_AS(error_scatter({1.0}, {1.0, 2.0}), ShapeError);
}
