#include <cstdio>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "bam/errors.hpp"
#include "bam/io.hpp"
#include "bam/posterior.hpp"
#include "bam/random.hpp"
#include "test_helpers.hpp"

using namespace bam;

namespace {

Dataset parse(const std::string& text) {
  std::istringstream is(text);
  return read_extxyz_stream(is, "inline");
}

}  // namespace

TEST_CASE("minimal frame parses without labels") {
  const Dataset ds = parse("1\n\nH 0.0 0.5 -1.25\n");
  REQUIRE(ds.size() == 1);
  const auto& s = ds.frames[0];
  REQUIRE(s.natoms() == 1);
  REQUIRE(s.species == std::vector<int>{1});
  REQUIRE(s.positions == std::vector<double>{0.0, 0.5, -1.25});
  REQUIRE_FALSE(s.has_cell);
  REQUIRE_FALSE(s.has_energy);
  REQUIRE_FALSE(s.has_forces());
  REQUIRE_FALSE(ds.all_have_energy());
}

TEST_CASE("full frame round trips bitwise through text") {
  Rng rng = Rng::stream(801, "xyz");
  Dataset ds;
  ds.source = "synthetic";
  for (int f = 0; f < 5; ++f) {
    AtomicStructure s;
    s.has_cell = true;
    s.pbc = {true, true, f % 2 == 0};
    for (int i = 0; i < 9; ++i) s.cell[static_cast<std::size_t>(i)] = 4.0 * rng.normal();
    const int n = 2 + f;
    for (int a = 0; a < n; ++a) {
      s.species.push_back(a % 2 ? 6 : 1);
      for (int i = 0; i < 3; ++i) s.positions.push_back(10.0 * rng.normal());
      for (int i = 0; i < 3; ++i) s.forces.push_back(rng.normal() / 3.0);
    }
    s.has_energy = true;
    s.energy = 100.0 * rng.normal();
    ds.frames.push_back(s);
  }

  std::ostringstream os;
  write_extxyz_stream(os, ds);
  const Dataset back = parse(os.str());
  REQUIRE(back.size() == ds.size());
  for (std::size_t f = 0; f < ds.size(); ++f) {
    const auto& a = ds.frames[f];
    const auto& b = back.frames[f];
    REQUIRE(a.species == b.species);
    REQUIRE(a.positions == b.positions);  // bitwise via 17 digit decimals
    REQUIRE(a.forces == b.forces);
    REQUIRE(a.cell == b.cell);
    REQUIRE(a.energy == b.energy);
    REQUIRE(a.pbc == b.pbc);
    REQUIRE(b.has_cell);
    REQUIRE(b.has_energy);
  }
  REQUIRE(back.all_have_energy());
  REQUIRE(back.all_have_forces());

  // write -> read -> write is a fixpoint of the text form
  std::ostringstream os2;
  write_extxyz_stream(os2, back);
  REQUIRE(os2.str() == os.str());
}

TEST_CASE("parser reports the offending line") {
  auto check = [](const std::string& text, const std::string& needle) {
    try {
      parse(text);
      FAIL("expected ParseError for " + needle);
    } catch (const ParseError& e) {
      REQUIRE(std::string(e.what()).find("line") != std::string::npos);
      REQUIRE(std::string(e.what()).find(needle) != std::string::npos);
    }
  };
  check("2\n\nH 0 0 0\n", "expected 2 atoms");      // truncated frame
  check("1\n\nH 0 zero 0\n", "bad number");
  check("1\n\nQq 0 0 0\n", "unknown species");
  check("1\nLattice=\"1 0 0 0 1 0 0 0\"\nH 0 0 0\n", "Lattice wants 9 numbers");
  check("1\nLattice=\"oops\nH 0 0 0\n", "unterminated quote");
  check("banana\n", "atom count");
  check("1\nProperties=species:S:1:pos:R\nH 0 0 0\n", "triples");
  check("1\nProperties=pos:R:3\n0 0 0\n", "species:S:1");
  check("1\n\nH 0 0 0 9 9 9\n", "expected 4 columns");
  REQUIRE_THROWS_AS(parse(""), NoData);
  REQUIRE_THROWS_AS(read_extxyz("/nonexistent/path.xyz"), ParseError);
}

TEST_CASE("comment line conventions are honored") {
  const Dataset ds = parse(
      "2\n"
      "Lattice=\"10 0 0 0 10 0 0 0 10\" Properties=species:S:1:pos:R:3:forces:R:3 "
      "energy=-3.5 pbc=\"F F T\"\n"
      "C 0 0 0 0.1 0.2 0.3\n"
      "26 1 1 1 -0.1 -0.2 -0.3\n");
  const auto& s = ds.frames[0];
  REQUIRE(s.species == std::vector<int>{6, 26});
  REQUIRE(s.has_cell);
  REQUIRE(s.cell[0] == 10.0);
  REQUIRE(s.pbc == std::array<bool, 3>{false, false, true});
  REQUIRE(s.energy == -3.5);
  REQUIRE(s.forces.size() == 6);
  REQUIRE(s.forces[3] == -0.1);

  // label keys are remappable
  const ExtxyzOptions opt{"TotEnergy", "grad"};
  std::istringstream is(
      "1\nProperties=species:S:1:pos:R:3:grad:R:3 TotEnergy=7.25\nH 0 0 0 1 2 3\n");
  const Dataset remapped = read_extxyz_stream(is, "inline", opt);
  REQUIRE(remapped.frames[0].energy == 7.25);
  REQUIRE(remapped.frames[0].forces == std::vector<double>{1.0, 2.0, 3.0});

  // unknown extra columns are consumed and ignored
  const Dataset extra = parse(
      "1\nProperties=species:S:1:pos:R:3:charge:R:1\nH 0.5 0 0 -1.0\n");
  REQUIRE(extra.frames[0].positions[0] == 0.5);
  REQUIRE_FALSE(extra.frames[0].has_forces());
}

TEST_CASE("splits are deterministic disjoint and exactly sized") {
  Dataset ds;
  for (int i = 0; i < 2000; ++i) {
    AtomicStructure s;
    s.species = {1};
    s.positions = {0, 0, 0};
    s.energy = i;  // unique tag
    s.has_energy = true;
    ds.frames.push_back(s);
  }

  const auto parts = split_counts(ds, 950, 50, 1000, 17);
  REQUIRE(parts[0].size() == 950);
  REQUIRE(parts[1].size() == 50);
  REQUIRE(parts[2].size() == 1000);

  std::set<double> seen;
  for (const auto& part : parts)
    for (const auto& f : part.frames) REQUIRE(seen.insert(f.energy).second);
  REQUIRE(seen.size() == 2000);

  const auto again = split_counts(ds, 950, 50, 1000, 17);
  for (int p = 0; p < 3; ++p)
    for (std::size_t i = 0; i < parts[static_cast<std::size_t>(p)].size(); ++i)
      REQUIRE(parts[static_cast<std::size_t>(p)].frames[i].energy ==
              again[static_cast<std::size_t>(p)].frames[i].energy);

  const auto other = split_counts(ds, 950, 50, 1000, 18);
  bool differs = false;
  for (std::size_t i = 0; i < 950; ++i)
    if (other[0].frames[i].energy != parts[0].frames[i].energy) differs = true;
  REQUIRE(differs);

  REQUIRE_THROWS_AS(split_counts(ds, 1500, 400, 200, 1), SplitError);

  const auto whole = split_fractions(ds, 1.0, 0.0, 0.0, 3);
  REQUIRE(whole[0].size() == 2000);
  REQUIRE(whole[1].size() == 0);
  REQUIRE_THROWS_AS(split_fractions(ds, 0.9, 0.2, 0.0, 3), SplitError);
}

TEST_CASE("model config survives json with unknown keys rejected") {
  ModelConfig cfg;
  cfg.r_cut = 3.5;
  cfg.n_basis = 5;
  cfg.n_layers = 3;
  cfg.hidden_irreps = IrrepsSpec::parse("8x0e+4x1o");
  cfg.feature_dim = 8;
  cfg.l_max = 1;
  cfg.species_list = {1, 6, 8};
  cfg.head_mode = HeadMode::mve2;
  cfg.variance_activation = VarianceActivation::exp;
  cfg.variance_floor = 1e-5;
  cfg.cov_jitter = 1e-7;

  const nlohmann::json j = model_config_to_json(cfg);
  const ModelConfig back = model_config_from_json(j);
  REQUIRE(back.r_cut == cfg.r_cut);
  REQUIRE(back.n_basis == cfg.n_basis);
  REQUIRE(back.n_layers == cfg.n_layers);
  REQUIRE(back.hidden_irreps.to_string() == cfg.hidden_irreps.to_string());
  REQUIRE(back.feature_dim == cfg.feature_dim);
  REQUIRE(back.l_max == cfg.l_max);
  REQUIRE(back.species_list == cfg.species_list);
  REQUIRE(back.head_mode == cfg.head_mode);
  REQUIRE(back.variance_activation == cfg.variance_activation);
  REQUIRE(back.variance_floor == cfg.variance_floor);
  REQUIRE(back.cov_jitter == cfg.cov_jitter);

  nlohmann::json bad = j;
  bad["cutoff"] = 4.0;
  REQUIRE_THROWS_AS(model_config_from_json(bad), ParseError);
  nlohmann::json bad_mode = j;
  bad_mode["head_mode"] = "mve3";
  REQUIRE_THROWS_AS(model_config_from_json(bad_mode), ParseError);
}

TEST_CASE("checkpoints round trip bitwise and reject damage") {
  Rng rng = Rng::stream(802, "ckpt");
  ModelConfig cfg;
  cfg.species_list = {1};
  std::vector<double> theta(37);
  for (auto& v : theta) v = rng.normal();

  const Checkpoint ck = pack_params(cfg, theta);
  const std::string path = "/tmp/bam_test_ckpt.bin";
  save_checkpoint(path, ck);
  const Checkpoint back = load_checkpoint(path);
  REQUIRE(back.meta["posterior"] == "none");
  REQUIRE(back.require("theta").data == theta);
  REQUIRE(back.require("theta").shape == std::vector<std::size_t>{37});
  REQUIRE(checkpoint_model_config(back).species_list == cfg.species_list);
  REQUIRE_THROWS_AS(back.require("missing"), CorruptCheckpoint);

  std::string bytes = serialize_checkpoint(ck);
  SECTION("bumped container version") {
    bytes[4] = 2;
    REQUIRE_THROWS_AS(deserialize_checkpoint(bytes), IncompatibleCheckpoint);
  }
  SECTION("bad magic") {
    bytes[0] = 'X';
    REQUIRE_THROWS_AS(deserialize_checkpoint(bytes), CorruptCheckpoint);
  }
  SECTION("truncated payload") {
    bytes.resize(bytes.size() - 8);
    REQUIRE_THROWS_AS(deserialize_checkpoint(bytes), CorruptCheckpoint);
  }
  SECTION("header length past the end") {
    bytes[8] = static_cast<char>(0xff);
    bytes[9] = static_cast<char>(0xff);
    REQUIRE_THROWS_AS(deserialize_checkpoint(bytes), CorruptCheckpoint);
  }
  SECTION("garbage header") {
    // header starts at byte 16; smash its first brace
    bytes[16] = '!';
    REQUIRE_THROWS_AS(deserialize_checkpoint(bytes), CorruptCheckpoint);
  }
  std::remove(path.c_str());
}

TEST_CASE("posterior states survive checkpointing") {
  Rng rng = Rng::stream(803, "post_ckpt");
  ModelConfig cfg;
  cfg.species_list = {1};
  const std::size_t dim = 11;

  SECTION("ensemble") {
    EnsembleState ens;
    for (int m = 0; m < 3; ++m) {
      std::vector<double> th(dim);
      for (auto& v : th) v = rng.normal();
      ens.members.push_back(th);
    }
    const EnsembleState back = unpack_ensemble(pack_ensemble(cfg, ens));
    REQUIRE(back.members == ens.members);
    Checkpoint wrong = pack_params(cfg, ens.members[0]);
    REQUIRE_THROWS_AS(unpack_ensemble(wrong), IncompatibleCheckpoint);
  }

  SECTION("swag keeps buffer order so sampling reproduces") {
    SwagState st(dim, 4);
    for (int k = 0; k < 6; ++k) {
      std::vector<double> th(dim);
      for (auto& v : th) v = rng.normal() + 0.5 * k;
      swag_collect(st, th);
    }
    const SwagState back = unpack_swag(pack_swag(cfg, st));
    REQUIRE(back.mean == st.mean);
    REQUIRE(back.sq_mean == st.sq_mean);
    REQUIRE(back.n_collected == st.n_collected);
    REQUIRE(back.max_rank == st.max_rank);
    REQUIRE(back.dev_buffer.size() == st.dev_buffer.size());
    for (std::size_t i = 0; i < st.dev_buffer.size(); ++i)
      REQUIRE(back.dev_buffer[i] == st.dev_buffer[i]);

    Rng r1 = Rng::stream(99, "draw");
    Rng r2 = Rng::stream(99, "draw");
    REQUIRE(swag_sample(st, r1) == swag_sample(back, r2));
  }

  SECTION("ivon trajectory continues identically after reload") {
    std::vector<double> theta0(dim, 1.0);
    IvonState st = IvonState::init(theta0, 0.5, IvonHyper{});
    auto grad_at = [](const std::vector<double>& th) {
      std::vector<double> g(th.size());
      for (std::size_t i = 0; i < th.size(); ++i) g[i] = th[i];  // quadratic bowl
      return g;
    };
    for (int k = 0; k < 5; ++k) {
      Rng r = Rng::stream(42, "ivon" + std::to_string(k));
      const auto th = ivon_sample(st, r);
      ivon_step_at(st, th, grad_at(th));
    }
    IvonState back = unpack_ivon(pack_ivon(cfg, st));
    REQUIRE(back.m == st.m);
    REQUIRE(back.h == st.h);
    REQUIRE(back.g == st.g);
    REQUIRE(back.t == st.t);
    for (int k = 5; k < 8; ++k) {
      Rng ra = Rng::stream(42, "ivon" + std::to_string(k));
      Rng rb = Rng::stream(42, "ivon" + std::to_string(k));
      const auto tha = ivon_sample(st, ra);
      const auto thb = ivon_sample(back, rb);
      REQUIRE(tha == thb);
      ivon_step_at(st, tha, grad_at(tha));
      ivon_step_at(back, thb, grad_at(thb));
    }
    REQUIRE(back.m == st.m);
    REQUIRE(back.h == st.h);
  }

  SECTION("laplace mask and curvature round trip") {
    LaplaceState st;
    st.prior_precision = 2.5;
    for (std::size_t i = 0; i < dim; ++i) {
      st.theta_map.push_back(rng.normal());
      st.head_mask.push_back(i % 3 == 0);
      st.ggn_diag.push_back(st.head_mask.back() ? std::abs(rng.normal()) : 0.0);
    }
    const LaplaceState back = unpack_laplace(pack_laplace(cfg, st));
    REQUIRE(back.theta_map == st.theta_map);
    REQUIRE(back.head_mask == st.head_mask);
    REQUIRE(back.ggn_diag == st.ggn_diag);
    REQUIRE(back.prior_precision == st.prior_precision);
  }
}
