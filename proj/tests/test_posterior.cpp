#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cmath>
#include <vector>

#include "bam/posterior.hpp"
#include "bam/random.hpp"

using bam::AtomicStructure;
using bam::DeMoments;
using bam::EnsembleState;
using bam::IvonHyper;
using bam::IvonState;
using bam::LaplaceState;
using bam::PredictiveDistribution;
using bam::Rng;
using bam::SwagState;

namespace {

bam::ModelConfig post_config() {
  bam::ModelConfig cfg;
  cfg.r_cut = 3.0;
  cfg.n_basis = 3;
  cfg.n_layers = 2;
  cfg.feature_dim = 3;
  cfg.hidden_irreps = bam::IrrepsSpec::parse("3x0e+3x1o+3x2e");
  cfg.l_max = 2;
  cfg.species_list = {1};
  return cfg;
}

std::vector<double> random_params(const bam::RaceModel& model, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(model.params().total_size());
  for (auto& x : v) x = 0.3 * rng.normal();
  return v;
}

AtomicStructure tiny_cluster(Rng& rng, int n) {
  AtomicStructure s;
  for (int i = 0; i < n; ++i) {
    s.species.push_back(1);
    for (int c = 0; c < 3; ++c) s.positions.push_back(2.5 * (rng.uniform() - 0.5));
  }
  return s;
}

}  // namespace

TEST_CASE("moment matching of gaussian mixtures") {
  SECTION("two symmetric members") {
    DeMoments m = bam::de_aggregate({0.0, 2.0}, {1.0, 1.0});
    REQUIRE(m.mean == 1.0);
    REQUIRE(m.aleatoric == 1.0);
    REQUIRE(m.epistemic == 1.0);
    REQUIRE(m.total == 2.0);
  }

  SECTION("identical members have zero epistemic part") {
    // dyadic values keep the running mean exact, so the zero is bitwise
    DeMoments m = bam::de_aggregate({0.75, 0.75, 0.75, 0.75}, {1.5, 1.5, 1.5, 1.5});
    REQUIRE(m.epistemic == 0.0);
    REQUIRE(m.total == m.aleatoric);
    // non-dyadic identical members differ from zero only by rounding dust
    DeMoments m2 = bam::de_aggregate({0.7, 0.7, 0.7}, {1.3, 1.3, 1.3});
    REQUIRE(m2.epistemic < 1e-30);
  }

  SECTION("total dominates the aleatoric part for random inputs") {
    Rng rng(5501);
    for (int rep = 0; rep < 50; ++rep) {
      const int m = 2 + static_cast<int>(rng.below(4));
      std::vector<double> mu, var;
      for (int k = 0; k < m; ++k) {
        mu.push_back(2.0 * rng.normal());
        var.push_back(0.2 + rng.uniform());
      }
      DeMoments mm = bam::de_aggregate(mu, var);
      REQUIRE(mm.total >= mm.aleatoric);
      REQUIRE(mm.total >= 0.0);
      REQUIRE(mm.total == mm.aleatoric + mm.epistemic);
    }
  }

  SECTION("closed form matches monte-carlo mixture moments") {
    Rng rng(5502);
    for (int rep = 0; rep < 3; ++rep) {
      const int m = 2 + static_cast<int>(rng.below(4));
      std::vector<double> mu, var;
      for (int k = 0; k < m; ++k) {
        mu.push_back(2.0 * (rng.uniform() - 0.5));
        const double sd = 0.5 + rng.uniform();
        var.push_back(sd * sd);
      }
      DeMoments mm = bam::de_aggregate(mu, var);

      const long draws = 1000000;
      double s1 = 0.0, s2 = 0.0;
      for (long d = 0; d < draws; ++d) {
        const auto k = static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(m)));
        const double x = mu[k] + std::sqrt(var[k]) * rng.normal();
        s1 += x;
        s2 += x * x;
      }
      const double mc_mean = s1 / static_cast<double>(draws);
      const double mc_var = s2 / static_cast<double>(draws) - mc_mean * mc_mean;
      REQUIRE(std::abs(mc_mean - mm.mean) / std::max(1.0, std::abs(mm.mean)) < 0.005);
      REQUIRE(std::abs(mc_var - mm.total) / mm.total < 0.005);
    }
  }

  SECTION("input validation") {
    REQUIRE_THROWS_AS(bam::de_aggregate({}, {}), bam::NoData);
    REQUIRE_THROWS_AS(bam::de_aggregate({0.0}, {0.0}), bam::DomainError);
    REQUIRE_THROWS_AS(bam::de_aggregate({0.0, 1.0}, {1.0}), bam::ShapeError);
  }
}

TEST_CASE("swag collection tracks running moments") {
  SECTION("constant snapshots collapse the distribution") {
    SwagState st(2, 3);
    for (int k = 0; k < 5; ++k) swag_collect(st, {4.0, -1.0});
    REQUIRE(st.mean == std::vector<double>{4.0, -1.0});
    for (double d : st.sigma_diag()) REQUIRE(d == 0.0);
    for (const auto& dev : st.dev_buffer)
      for (double v : dev) REQUIRE(v == 0.0);
    Rng rng(1);
    REQUIRE(bam::swag_sample(st, rng) == st.mean);
  }

  SECTION("two snapshots in one dimension") {
    SwagState st(1, 2);
    swag_collect(st, {0.0});
    swag_collect(st, {2.0});
    REQUIRE(st.mean[0] == 1.0);
    REQUIRE(st.sigma_diag()[0] == 1.0);  // mean(theta^2) - mean^2 = 2 - 1
    REQUIRE(st.n_collected == 2);
  }

  SECTION("statistical recovery of a known snapshot distribution") {
    Rng rng(5523);
    SwagState st(2, 10);
    for (int k = 0; k < 1000; ++k)
      swag_collect(st, {5.0 + 0.3 * rng.normal(), 5.0 + 0.3 * rng.normal()});
    const double se = 0.3 / std::sqrt(1000.0);
    for (double m : st.mean) REQUIRE(std::abs(m - 5.0) < 3.0 * se);
    for (double d : st.sigma_diag()) REQUIRE(std::abs(d - 0.09) / 0.09 < 0.10);
  }

  SECTION("buffer eviction and shape checks") {
    SwagState st(1, 2);
    for (int k = 0; k < 7; ++k) swag_collect(st, {static_cast<double>(k)});
    REQUIRE(st.dev_buffer.size() == 2);
    REQUIRE_THROWS_AS(swag_collect(st, {0.0, 1.0}), bam::ShapeError);
  }
}

TEST_CASE("swag sampling follows its gaussian law") {
  SECTION("not ready before two snapshots") {
    SwagState st(1, 2);
    Rng rng(1);
    REQUIRE_THROWS_AS(bam::swag_sample(st, rng), bam::NotReady);
    swag_collect(st, {1.0});
    REQUIRE_THROWS_AS(bam::swag_sample(st, rng), bam::NotReady);
  }

  SECTION("fixed seed gives bit-identical samples") {
    SwagState st(3, 4);
    Rng rng0(5504);
    for (int k = 0; k < 6; ++k)
      swag_collect(st, {rng0.normal(), rng0.normal(), rng0.normal()});
    Rng a(99), b(99);
    REQUIRE(bam::swag_sample(st, a) == bam::swag_sample(st, b));
  }

  SECTION("empirical covariance matches half-diag plus low-rank") {
    const std::size_t p = 5;
    Rng rng(5505);
    SwagState st(p, 6);
    for (int k = 0; k < 8; ++k) {
      std::vector<double> snap(p);
      for (auto& v : snap) v = rng.normal();
      swag_collect(st, snap);
    }
    const auto diag = st.sigma_diag();
    const auto kp = static_cast<double>(st.dev_buffer.size());
    std::vector<double> law(p * p, 0.0);
    for (std::size_t i = 0; i < p; ++i) law[p * i + i] = 0.5 * diag[i];
    for (const auto& dev : st.dev_buffer)
      for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < p; ++j)
          law[p * i + j] += dev[i] * dev[j] / (2.0 * (kp - 1.0));

    const long draws = 100000;
    std::vector<double> mean(p, 0.0);
    std::vector<double> cov(p * p, 0.0);
    std::vector<std::vector<double>> samples;
    samples.reserve(static_cast<std::size_t>(draws));
    for (long d = 0; d < draws; ++d) {
      samples.push_back(bam::swag_sample(st, rng));
      for (std::size_t i = 0; i < p; ++i) mean[i] += samples.back()[i];
    }
    for (auto& v : mean) v /= static_cast<double>(draws);
    for (const auto& s : samples)
      for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < p; ++j)
          cov[p * i + j] += (s[i] - mean[i]) * (s[j] - mean[j]) / static_cast<double>(draws);

    double num = 0.0, den = 0.0;
    for (std::size_t k = 0; k < p * p; ++k) {
      num += (cov[k] - law[k]) * (cov[k] - law[k]);
      den += law[k] * law[k];
    }
    REQUIRE(std::sqrt(num / den) < 0.05);
    for (std::size_t i = 0; i < p; ++i) REQUIRE(std::abs(mean[i] - st.mean[i]) < 0.05);
  }
}

TEST_CASE("ivon executes the cited update order") {
  SECTION("hand-executed single step") {
    IvonHyper hy{0.1, 0.9, 0.01, 1e-4, 1.0};
    IvonState st = IvonState::init({1.0}, 1.0, hy);
    // fixed sample theta = m, quadratic loss: grad = theta
    bam::ivon_step_at(st, {1.0}, {1.0});

    const double hhat = 0.0;  // ghat (theta - m) / sigma^2 with theta = m
    const double g1 = 0.9 * 0.0 + 0.1 * 1.0;
    const double dh = 1.0 - hhat;
    const double h1 = 0.99 * 1.0 + 0.01 * hhat + 0.5 * 0.01 * 0.01 * dh * dh / (1.0 + 1e-4);
    const double gbar = g1 / (1.0 - std::pow(0.9, 1.0));
    const double m1 = 1.0 - 0.1 * (gbar + 1e-4 * 1.0) / (h1 + 1e-4);

    REQUIRE(st.t == 1);
    REQUIRE(st.g[0] == Catch::Approx(g1).epsilon(1e-15));
    REQUIRE(st.h[0] == Catch::Approx(h1).epsilon(1e-15));
    REQUIRE(st.m[0] == Catch::Approx(m1).epsilon(1e-15));
    // sigma is consistent with h by construction
    REQUIRE(st.sigma(0) == 1.0 / std::sqrt(1.0 * (st.h[0] + 1e-4)));
  }

  SECTION("zero gradients shrink the mean monotonically") {
    IvonHyper hy{0.1, 0.9, 0.01, 1e-2, 1.0};
    IvonState st = IvonState::init({2.0}, 1.0, hy);
    double prev_m = std::abs(st.m[0]);
    double prev_h = st.h[0];
    for (int k = 0; k < 200; ++k) {
      bam::ivon_step_at(st, st.m, {0.0});
      REQUIRE(std::abs(st.m[0]) < prev_m);
      REQUIRE(st.h[0] < prev_h);
      prev_m = std::abs(st.m[0]);
      prev_h = st.h[0];
    }
  }

  SECTION("long run on a quadratic finds the minimum and the curvature") {
    IvonHyper hy{0.05, 0.9, 0.01, 1e-4, 100.0};
    IvonState st = IvonState::init({1.0}, 0.5, hy);
    Rng rng(5506);
    for (int k = 0; k < 5000; ++k)
      bam::ivon_step(st, [](const std::vector<double>& th) { return th; }, rng);
    REQUIRE(std::abs(st.m[0]) < 1e-2);
    REQUIRE(std::abs(st.h[0] - 1.0) < 0.2);
    REQUIRE(st.sigma(0) == 1.0 / std::sqrt(100.0 * (st.h[0] + 1e-4)));
  }

  SECTION("rejects divergence and bad shapes") {
    IvonState st = IvonState::init({0.0}, 1.0, IvonHyper{});
    REQUIRE_THROWS_AS(bam::ivon_step_at(st, {0.0}, {std::nan("")}), bam::DivergedGradient);
    REQUIRE_THROWS_AS(bam::ivon_step_at(st, {0.0, 1.0}, {0.0}), bam::ShapeError);
    IvonHyper bad;
    bad.beta1 = 1.0;
    REQUIRE_THROWS_AS(IvonState::init({0.0}, 1.0, bad), bam::DomainError);
  }

  SECTION("sampling is deterministic under a fixed seed") {
    IvonState st = IvonState::init({0.5, -0.5}, 2.0, IvonHyper{});
    Rng a(7), b(7);
    REQUIRE(bam::ivon_sample(st, a) == bam::ivon_sample(st, b));
  }
}

TEST_CASE("laplace ggn accumulation and sampling") {
  SECTION("unit-input linear model accumulates n") {
    std::vector<double> ggn{0.0};
    for (int k = 0; k < 7; ++k) bam::ggn_accumulate(ggn, {1.0}, 1.0);
    REQUIRE(ggn[0] == 7.0);
  }

  SECTION("diagonal agrees with a dense jacobian accumulation") {
    Rng rng(5507);
    std::vector<double> ggn{0.0, 0.0};
    std::vector<std::array<double, 2>> rows;
    std::vector<double> curvs;
    for (int k = 0; k < 20; ++k) {
      rows.push_back({rng.normal(), rng.normal()});
      curvs.push_back(0.1 + rng.uniform());
      bam::ggn_accumulate(ggn, {rows.back()[0], rows.back()[1]}, curvs.back());
    }
    // dense reference: G = sum_n c_n J_n J_n^T, take the diagonal
    std::array<double, 4> dense{};
    for (std::size_t k = 0; k < rows.size(); ++k)
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b)
          dense[static_cast<std::size_t>(2 * a + b)] +=
              curvs[k] * rows[k][static_cast<std::size_t>(a)] * rows[k][static_cast<std::size_t>(b)];
    REQUIRE(std::abs(ggn[0] - dense[0]) < 1e-10);
    REQUIRE(std::abs(ggn[1] - dense[3]) < 1e-10);
  }

  SECTION("fit on the real model covers exactly the readout and head blocks") {
    bam::RaceModel model(post_config());
    model.init_params(3);
    auto& ps = model.params();
    for (int b = 0; b < ps.count(); ++b) {
      Rng rng = Rng::stream(11, ps.block(b).name);
      for (auto& v : ps.value(b)) v = 0.4 * rng.normal();
    }
    Rng rng(5508);
    std::vector<AtomicStructure> data = {tiny_cluster(rng, 3), tiny_cluster(rng, 2)};
    LaplaceState st = bam::laplace_fit(model, data, 2.0);

    REQUIRE(st.theta_map == ps.flatten());
    REQUIRE(st.prior_precision == 2.0);
    std::size_t off = 0;
    bool any_positive = false;
    for (int b = 0; b < ps.count(); ++b) {
      const bool head = bam::laplace_block(ps.block(b).name);
      for (std::size_t k = 0; k < ps.value(b).size(); ++k) {
        REQUIRE(st.head_mask[off + k] == (head ? 1 : 0));
        REQUIRE(st.ggn_diag[off + k] >= 0.0);
        if (!head) REQUIRE(st.ggn_diag[off + k] == 0.0);
        if (st.ggn_diag[off + k] > 0.0) any_positive = true;
      }
      off += ps.value(b).size();
    }
    REQUIRE(any_positive);

    SECTION("samples stay at the map off the mask and near it for huge priors") {
      LaplaceState tight = st;
      tight.prior_precision = 1e16;
      Rng r2(5509);
      const auto theta = bam::laplace_sample(tight, r2);
      for (std::size_t i = 0; i < theta.size(); ++i) {
        if (tight.head_mask[i])
          REQUIRE(std::abs(theta[i] - tight.theta_map[i]) < 1e-6);
        else
          REQUIRE(theta[i] == tight.theta_map[i]);
      }
    }

    SECTION("posterior variance shrinks monotonically with the prior") {
      for (std::size_t i = 0; i < st.ggn_diag.size(); ++i)
        if (st.head_mask[i])
          REQUIRE(1.0 / (st.ggn_diag[i] + 3.0) < 1.0 / (st.ggn_diag[i] + 2.0));
    }
  }

  SECTION("input validation") {
    bam::RaceModel model(post_config());
    model.init_params(3);
    REQUIRE_THROWS_AS(bam::laplace_fit(model, {}, 1.0), bam::NoData);
    Rng rng(1);
    AtomicStructure s = tiny_cluster(rng, 2);
    REQUIRE_THROWS_AS(bam::laplace_fit(model, {s}, 0.0), bam::DomainError);
    LaplaceState empty;
    REQUIRE_THROWS_AS(bam::laplace_sample(empty, rng), bam::NotReady);
  }
}

TEST_CASE("posterior prediction aggregates member evaluations") {
  bam::RaceModel model(post_config());
  model.init_params(5);
  Rng rng(5510);
  AtomicStructure s = tiny_cluster(rng, 4);

  SECTION("an ensemble of two identical members equals the single model") {
    std::vector<double> theta = random_params(model, 21);
    model.params().unflatten(theta);
    PredictiveDistribution single = model.predict(s);

    EnsembleState ens;
    ens.members = {theta, theta};
    auto agg = bam::posterior_predict(model, ens, s);
    REQUIRE(agg.member.size() == 2);
    REQUIRE(agg.mean.energy_mean == single.energy_mean);
    REQUIRE(agg.mean.energy_var == single.energy_var);
    REQUIRE(agg.mean.force_mean == single.force_mean);
    for (std::size_t k = 0; k < single.force_cov.size(); ++k)
      REQUIRE(agg.mean.force_cov[k] == single.force_cov[k]);
    // parameters were restored afterwards
    REQUIRE(model.params().flatten() == theta);
  }

  SECTION("scalar aggregation matches the standalone moment matcher") {
    EnsembleState ens;
    ens.members = {random_params(model, 31), random_params(model, 32), random_params(model, 33),
                   random_params(model, 34)};
    auto agg = bam::posterior_predict(model, ens, s);
    std::vector<double> mu, var;
    for (const auto& p : agg.member) {
      mu.push_back(p.energy_mean);
      var.push_back(p.energy_var);
    }
    DeMoments mm = bam::de_aggregate(mu, var);
    REQUIRE(agg.mean.energy_mean == mm.mean);
    REQUIRE(agg.mean.energy_var == mm.total);
  }

  SECTION("swag with a collapsed state has zero epistemic spread") {
    std::vector<double> theta = random_params(model, 41);
    SwagState st(theta.size(), 2);
    swag_collect(st, theta);
    swag_collect(st, theta);
    Rng r2(5);
    auto agg = bam::posterior_predict(model, st, s, 2, r2);
    REQUIRE(agg.member[0].energy_mean == agg.member[1].energy_mean);
    REQUIRE(agg.mean.energy_var == agg.member[0].energy_var);
  }

  SECTION("multivariate aggregation reduces to the scalar rule on diagonals") {
    PredictiveDistribution a, b;
    a.energy_mean = 0.0;
    a.energy_var = 1.0;
    a.has_energy_var = true;
    a.force_mean = {0.0, 0.5, -0.5};
    a.force_cov = {1, 0, 0, 0, 2, 0, 0, 0, 3};
    a.has_force_cov = true;
    a.per_atom_energy = {0.0};
    b = a;
    b.energy_mean = 2.0;
    b.force_mean = {2.0, 0.5, -0.5};  // differs only along x

    PredictiveDistribution agg = bam::aggregate_predictions({a, b});
    DeMoments mm = bam::de_aggregate({0.0, 2.0}, {1.0, 1.0});
    REQUIRE(agg.force_cov[0] == mm.total);  // xx component
    REQUIRE(agg.force_cov[4] == 2.0);
    REQUIRE(agg.force_cov[8] == 3.0);
    for (std::size_t k : {1u, 2u, 3u, 5u, 6u, 7u}) REQUIRE(agg.force_cov[k] == 0.0);
    REQUIRE(agg.energy_mean == 1.0);
    REQUIRE(agg.energy_var == mm.total);
  }

  SECTION("sampling posteriors demand at least two samples and a ready state") {
    SwagState st(model.params().total_size(), 2);
    Rng r2(6);
    REQUIRE_THROWS_AS(bam::posterior_predict(model, st, s, 2, r2), bam::NotReady);
    swag_collect(st, random_params(model, 51));
    swag_collect(st, random_params(model, 52));
    REQUIRE_THROWS_AS(bam::posterior_predict(model, st, s, 1, r2), bam::DomainError);
    EnsembleState ens;
    ens.members = {random_params(model, 53)};
    REQUIRE_THROWS_AS(bam::posterior_predict(model, ens, s), bam::DomainError);
  }
}
