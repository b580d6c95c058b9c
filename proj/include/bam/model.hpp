#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "bam/cg.hpp"
#include "bam/equivariant.hpp"
#include "bam/errors.hpp"
#include "bam/geometry.hpp"
#include "bam/irreps.hpp"
#include "bam/random.hpp"
#include "bam/spherical.hpp"
#include "bam/tape.hpp"

namespace bam {

enum class HeadMode { base, mve2, mve8 };
enum class VarianceActivation { softplus, exp };

inline double softplus_value(double x) {
  return (x > 0.0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double apply_variance_activation(double x, VarianceActivation act) {
  return act == VarianceActivation::softplus ? softplus_value(x) : std::exp(x);
}

struct ModelConfig {
  double r_cut = 5.0;
  int n_basis = 8;
  int n_layers = 2;
  IrrepsSpec hidden_irreps = IrrepsSpec::parse("16x0e+16x1o+16x2e");
  int feature_dim = 16;
  int l_max = 2;
  std::vector<int> species_list;
  HeadMode head_mode = HeadMode::mve8;
  VarianceActivation variance_activation = VarianceActivation::softplus;
  double variance_floor = 1e-6;
  double cov_jitter = 1e-6;
  int max_neighbors = 0;

  void validate() const {
    if (!(r_cut > 0.0)) throw DomainError("r_cut must be positive");
    if (n_basis < 1) throw DomainError("n_basis must be at least 1");
    if (n_layers < 1) throw DomainError("n_layers must be at least 1");
    if (l_max < 0 || l_max > kMaxDegree) throw UnsupportedDegree("l_max out of supported range");
    if (feature_dim < 1) throw DomainError("feature_dim must be positive");
    if (!(variance_floor > 0.0)) throw DomainError("variance_floor must be positive");
    if (!(cov_jitter > 0.0)) throw DomainError("cov_jitter must be positive");
    if (species_list.empty()) throw DomainError("species_list must not be empty");
    for (std::size_t i = 1; i < species_list.size(); ++i)
      if (species_list[i] <= species_list[i - 1])
        throw DomainError("species_list must be sorted and unique");
    if (hidden_irreps.entries.empty()) throw ShapeError("hidden_irreps must not be empty");
    if (!hidden_irreps.has(0, Parity::even))
      throw ShapeError("hidden_irreps must include a scalar (0e) block for the readout");
    for (const auto& e : hidden_irreps.entries) {
      if (e.l > kMaxDegree) throw UnsupportedDegree("hidden irreps degree too high");
      if (e.mult != feature_dim)
        throw ShapeError("every hidden irreps block must carry feature_dim channels");
    }
  }
};

// Named parameter blocks in a fixed registration order; the flat view feeds
// optimizers and checkpoints, shapes are reproducible from the config alone.
class ParamStore {
 public:
  struct Block {
    std::string name;
    TShape shape;
  };

  int add(std::string name, TShape shape) {
    if (lookup_.count(name)) throw ShapeError("duplicate parameter block " + name);
    lookup_[name] = static_cast<int>(blocks_.size());
    blocks_.push_back({std::move(name), shape});
    values_.emplace_back(static_cast<std::size_t>(shape.size()), 0.0);
    return static_cast<int>(blocks_.size()) - 1;
  }

  int find(const std::string& name) const {
    auto it = lookup_.find(name);
    return it == lookup_.end() ? -1 : it->second;
  }

  int count() const { return static_cast<int>(blocks_.size()); }
  const Block& block(int i) const { return blocks_[static_cast<std::size_t>(i)]; }
  std::vector<double>& value(int i) { return values_[static_cast<std::size_t>(i)]; }
  const std::vector<double>& value(int i) const { return values_[static_cast<std::size_t>(i)]; }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
  }

  std::vector<double> flatten() const {
    std::vector<double> flat;
    flat.reserve(total_size());
    for (const auto& v : values_) flat.insert(flat.end(), v.begin(), v.end());
    return flat;
  }

  void unflatten(const std::vector<double>& flat) {
    if (flat.size() != total_size()) throw ShapeError("flat parameter size mismatch");
    std::size_t off = 0;
    for (auto& v : values_) {
      std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
                flat.begin() + static_cast<std::ptrdiff_t>(off + v.size()), v.begin());
      off += v.size();
    }
  }

 private:
  std::vector<Block> blocks_;
  std::vector<std::vector<double>> values_;
  std::map<std::string, int> lookup_;
};

// Numeric prediction for one structure.
struct PredictiveDistribution {
  double energy_mean = 0.0;
  double energy_var = 0.0;              // MVE modes
  bool has_energy_var = false;
  std::vector<double> force_mean;       // N x 3
  std::vector<double> force_cov;        // N x 9 row-major per atom (MVE8)
  bool has_force_cov = false;
  std::vector<double> per_atom_energy;  // N
  std::vector<double> layer_energy;     // n_layers
};

// Handles into a live tape for one structure, so losses can keep
// differentiating through everything including the force gradient.
struct ForwardResult {
  Value energy;              // 1x1
  Value per_atom_energy;     // N x 1
  std::vector<Value> layer_energy;
  Value forces;              // N x 3, set when requested
  bool has_forces = false;
  Value energy_var;          // 1x1
  Value var_col;             // N x 1 per-atom variance incl. floor
  bool has_energy_var = false;
  Value cov_root;            // N x 6 symmetric-root columns (see layout below)
  bool has_cov_root = false;
  double cov_jitter = 0.0;   // added to the diagonal when squaring the root
  Value pos;                 // leaf
  Value cell;                // leaf, valid when the structure has a cell
  bool has_cell = false;
  std::vector<Value> params; // leaves, one per ParamStore block
  int natoms = 0;
};

// Covariance-root column layout, matching the lower-triangle slot order of
// the 6 head channels: (0,0), (1,1), (2,2), (2,1), (2,0), (1,0).
inline constexpr int kRootSlots[6][2] = {{0, 0}, {1, 1}, {2, 2}, {2, 1}, {2, 0}, {1, 0}};

// Six raw channels -> lower-triangular L with activated diagonal,
// Sigma = L L^T + eps I.  Channel order s1..s6 fills
// [[s1,0,0],[s6,s2,0],[s5,s4,s3]].
inline std::array<double, 9> assemble_force_cov(const std::array<double, 6>& ch, double eps,
                                                VarianceActivation act = VarianceActivation::softplus) {
  const double s1 = apply_variance_activation(ch[0], act);
  const double s2 = apply_variance_activation(ch[1], act);
  const double s3 = apply_variance_activation(ch[2], act);
  const double s4 = ch[3], s5 = ch[4], s6 = ch[5];
  std::array<double, 9> m{};
  m[0] = s1 * s1 + eps;
  m[1] = s1 * s6;
  m[2] = s1 * s5;
  m[3] = m[1];
  m[4] = s6 * s6 + s2 * s2 + eps;
  m[5] = s6 * s5 + s2 * s4;
  m[6] = m[2];
  m[7] = m[5];
  m[8] = s5 * s5 + s4 * s4 + s3 * s3 + eps;
  return m;
}

// Total energy variance from per-atom raw head outputs.
inline double energy_variance(const std::vector<double>& raw, double floor,
                              VarianceActivation act = VarianceActivation::softplus) {
  double total = 0.0;
  for (double x : raw) {
    const double s = apply_variance_activation(x, act);
    total += s * s + floor;
  }
  return total;
}

class RaceModel {
 public:
  explicit RaceModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build_plans();
    register_params();
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  // Embedding and linear weights ~ N(0, 1/fan_in); readout and head weights
  // start at zero so the initial energy surface is identically zero.  Each
  // block draws from its own named substream, so the layout of other blocks
  // never shifts the numbers.
  void init_params(std::uint64_t seed) {
    for (int b = 0; b < params_.count(); ++b) {
      const auto& blk = params_.block(b);
      auto& v = params_.value(b);
      const std::string last = blk.name.substr(blk.name.find_last_of('.') + 1);
      const bool zero = blk.name.rfind("head.", 0) == 0 ||
                        blk.name.find(".readout.") != std::string::npos ||
                        (!last.empty() && last[0] == 'b');
      if (zero) {
        std::fill(v.begin(), v.end(), 0.0);
        continue;
      }
      Rng rng = Rng::stream(seed, blk.name);
      const double std = (blk.name == "embed") ? 1.0 : 1.0 / std::sqrt(static_cast<double>(blk.shape.cols));
      for (auto& x : v) x = std * rng.normal();
    }
  }

  ForwardResult forward(Tape& t, const AtomicStructure& s, const NeighborList* nl_in = nullptr,
                        bool need_forces = true) const {
    const int n = s.natoms();
    if (n < 1) throw NoData("structure has no atoms");
    auto sp_rows = std::make_shared<std::vector<int>>();
    sp_rows->reserve(static_cast<std::size_t>(n));
    for (int z : s.species) {
      auto it = species_index_.find(z);
      if (it == species_index_.end()) throw UnknownSpecies("species " + std::to_string(z) + " not in model");
      sp_rows->push_back(it->second);
    }

    NeighborList local_nl;
    const NeighborList* nl = nl_in;
    if (!nl) {
      local_nl = build_neighbor_list(s, cfg_.r_cut, cfg_.max_neighbors);
      nl = &local_nl;
    }
    const int ne = nl->size();

    ForwardResult out;
    out.natoms = n;
    out.params.reserve(static_cast<std::size_t>(params_.count()));
    for (int b = 0; b < params_.count(); ++b)
      out.params.push_back(t.leaf(params_.block(b).shape, params_.value(b)));
    out.pos = t.leaf({n, 3}, s.positions);
    if (s.has_cell) {
      out.cell = t.leaf({3, 3}, std::vector<double>(s.cell.begin(), s.cell.end()));
      out.has_cell = true;
    }
    auto P = [&](int block) { return out.params[static_cast<std::size_t>(block)]; };

    // ---- edge geometry ----
    std::map<int, Value> harmonics;  // l -> (ne x 2l+1)
    Value basis;                     // (ne x n_basis) enveloped Bessel values
    std::shared_ptr<std::vector<int>> src, dst;
    if (ne > 0) {
      src = std::make_shared<std::vector<int>>(nl->src);
      dst = std::make_shared<std::vector<int>>(nl->dst);
      Value vec = t.sub(t.gather_rows(out.pos, dst), t.gather_rows(out.pos, src));
      if (s.has_cell) {
        std::vector<double> sh(static_cast<std::size_t>(ne) * 3);
        for (int e = 0; e < ne; ++e)
          for (int c = 0; c < 3; ++c)
            sh[static_cast<std::size_t>(3 * e + c)] = static_cast<double>(nl->shift[static_cast<std::size_t>(e)][c]);
        vec = t.add(vec, t.matmul(t.constant({ne, 3}, std::move(sh)), out.cell));
      }
      Value r = t.sqrt(t.row_sum(t.square(vec)));
      Value rhat = t.div(vec, t.broadcast_cols(r, 3));

      // spherical harmonics from the monomial tables
      Value ones = t.constant({ne, 1}, std::vector<double>(static_cast<std::size_t>(ne), 1.0));
      std::array<std::array<Value, 4>, 3> pow;
      for (int c = 0; c < 3; ++c) {
        pow[static_cast<std::size_t>(c)][0] = ones;
        pow[static_cast<std::size_t>(c)][1] = t.slice_cols(rhat, c, 1);
        pow[static_cast<std::size_t>(c)][2] = t.square(pow[static_cast<std::size_t>(c)][1]);
        pow[static_cast<std::size_t>(c)][3] = t.mul(pow[static_cast<std::size_t>(c)][2], pow[static_cast<std::size_t>(c)][1]);
      }
      for (int l : needed_ls_) {
        Value block;
        bool first = true;
        for (int m = -l; m <= l; ++m) {
          Value col;
          bool cfirst = true;
          for (const ShTerm& term : sh_monomials(l)[static_cast<std::size_t>(l + m)]) {
            Value v = t.scale(t.mul(t.mul(pow[0][static_cast<std::size_t>(term.px)],
                                          pow[1][static_cast<std::size_t>(term.py)]),
                                    pow[2][static_cast<std::size_t>(term.pz)]),
                              term.coef);
            col = cfirst ? v : t.add(col, v);
            cfirst = false;
          }
          Value padded = t.pad_cols(col, l + m, 2 * l + 1);
          block = first ? padded : t.add(block, padded);
          first = false;
        }
        harmonics[l] = block;
      }

      // Bessel basis with polynomial envelope
      Value u = t.scale(r, 1.0 / cfg_.r_cut);
      Value u2 = t.square(u);
      Value u3 = t.mul(u2, u);
      Value u6 = t.square(u3);
      Value u7 = t.mul(u6, u);
      Value u8 = t.mul(u7, u);
      Value env = t.add(t.add(t.add_scalar(t.scale(u6, -28.0), 1.0), t.scale(u7, 48.0)),
                        t.scale(u8, -21.0));
      const double amp = std::sqrt(2.0 / cfg_.r_cut);
      for (int nb = 1; nb <= cfg_.n_basis; ++nb) {
        const double freq = nb * M_PI / cfg_.r_cut;
        Value col = t.mul(t.scale(t.div(t.sin(t.scale(r, freq)), r), amp), env);
        Value padded = t.pad_cols(col, nb - 1, cfg_.n_basis);
        basis = (nb == 1) ? padded : t.add(basis, padded);
      }
    }

    // per-species row index lists, species order fixed by the config
    std::vector<std::shared_ptr<std::vector<int>>> rows_of_species(species_index_.size());
    for (std::size_t si = 0; si < rows_of_species.size(); ++si)
      rows_of_species[si] = std::make_shared<std::vector<int>>();
    for (int i = 0; i < n; ++i)
      rows_of_species[static_cast<std::size_t>((*sp_rows)[static_cast<std::size_t>(i)])]->push_back(i);

    // ---- embedding ----
    Value a0 = t.gather_rows(P(embed_block_), sp_rows);
    Value a1 = t.mix_channels(a0, P(a1_block_), 1);

    std::map<std::pair<int, int>, Value> feats;  // (l, parity as int) -> (n x F*d)
    feats[{0, +1}] = a0;

    const int F = cfg_.feature_dim;
    Value per_atom, energy;
    Value b0e_last, b2e_last;
    bool have_b2e = false;

    for (int layer = 0; layer < cfg_.n_layers; ++layer) {
      const LayerPlan& lp = layers_[static_cast<std::size_t>(layer)];
      std::map<std::pair<int, int>, Value> next;

      // self-interaction, per species, ResNet-style base term
      for (const auto& si : lp.self) {
        auto in_it = feats.find(si.key);
        if (in_it == feats.end()) continue;
        const int d = 2 * si.key.first + 1;
        Value acc;
        bool first = true;
        for (std::size_t sp = 0; sp < rows_of_species.size(); ++sp) {
          if (rows_of_species[sp]->empty()) continue;
          Value g = t.gather_rows(in_it->second, rows_of_species[sp]);
          Value m = t.mix_channels(g, P(si.weight[sp]), d);
          Value sc = t.scatter_rows(m, rows_of_species[sp], n);
          acc = first ? sc : t.add(acc, sc);
          first = false;
        }
        if (!first) {
          auto it = next.find(si.key);
          if (it == next.end())
            next[si.key] = acc;
          else
            it->second = t.add(it->second, acc);
        }
      }
      // per-species bias on the scalar block
      if (lp.si_bias >= 0) {
        Value bias = t.gather_rows(P(lp.si_bias), sp_rows);
        auto it = next.find({0, +1});
        if (it == next.end())
          next[{0, +1}] = bias;
        else
          it->second = t.add(it->second, bias);
      }

      // convolution messages
      if (ne > 0) {
        Value radial_layer = radial_mlp(t, basis, layer, out.params);
        std::map<std::pair<int, int>, Value> gathered;
        for (const auto& path : lp.paths) {
          auto in_it = feats.find(path.in_key);
          if (in_it == feats.end()) continue;
          auto g_it = gathered.find(path.in_key);
          if (g_it == gathered.end())
            g_it = gathered.emplace(path.in_key, t.gather_rows(in_it->second, dst)).first;
          Value rp = t.slice_cols(radial_layer, path.radial_slot * F, F);
          Value msg = t.sparse_tri(path.plan, harmonics.at(path.l1), g_it->second, rp);
          Value pooled = t.scatter_rows(msg, src, n);
          Value mixed = t.mix_channels(pooled, P(path.weight), 2 * path.out_key.first + 1);
          auto it = next.find(path.out_key);
          if (it == next.end())
            next[path.out_key] = mixed;
          else
            it->second = t.add(it->second, mixed);
        }
      }

      // any block never fed stays zero
      for (const auto& e : cfg_.hidden_irreps.entries) {
        std::pair<int, int> key{e.l, e.p == Parity::even ? +1 : -1};
        if (!next.count(key)) next[key] = t.zeros({n, F * e.block_dim()});
      }
      feats = std::move(next);

      // product with the embedding scalars, then the per-layer readout
      Value b0e = t.mul(feats.at({0, +1}), a1);
      Value e_col = t.mix_channels(b0e, P(lp.readout), 1);
      Value e_layer = t.sum_all(e_col);
      out.layer_energy.push_back(e_layer);
      per_atom = (layer == 0) ? e_col : t.add(per_atom, e_col);
      energy = (layer == 0) ? e_layer : t.add(energy, e_layer);
      if (layer == cfg_.n_layers - 1) {
        b0e_last = b0e;
        if (feats.count({2, +1})) {
          b2e_last = t.mul(feats.at({2, +1}), t.expand_cols(a1, 5));
          have_b2e = true;
        }
      }
    }

    out.energy = energy;
    out.per_atom_energy = per_atom;

    // ---- heads ----
    if (cfg_.head_mode != HeadMode::base) {
      Value raw = t.add(t.mix_channels(b0e_last, P(head_evar_w_), 1),
                        t.broadcast_rows(P(head_evar_b_), n));
      Value sig = (cfg_.variance_activation == VarianceActivation::softplus) ? t.softplus(raw)
                                                                             : t.exp(raw);
      out.var_col = t.add_scalar(t.square(sig), cfg_.variance_floor);
      out.energy_var = t.sum_all(out.var_col);
      out.has_energy_var = true;
    }
    if (cfg_.head_mode == HeadMode::mve8) {
      // Per-atom symmetric root M = alpha I + sum_m tau_m Q_m, with Q_m the
      // quadratic forms of the degree-2 harmonics; the predictive covariance
      // M^2 + eps I then conjugates under rotation.
      Value alpha = t.add(t.mix_channels(b0e_last, P(head_cov_iso_w_), 1),
                          t.broadcast_rows(P(head_cov_iso_b_), n));
      Value root;
      bool first = true;
      std::array<Value, 5> tau_cols;
      bool have_tau = false;
      if (have_b2e) {
        Value tau = t.mix_channels(b2e_last, P(head_cov_aniso_w_), 5);
        for (int m = 0; m < 5; ++m) tau_cols[static_cast<std::size_t>(m)] = t.slice_cols(tau, m, 1);
        have_tau = true;
      }
      for (int slot = 0; slot < 6; ++slot) {
        const int a = kRootSlots[slot][0], b = kRootSlots[slot][1];
        Value col;
        bool has = false;
        if (a == b) {
          col = alpha;
          has = true;
        }
        if (have_tau)
          for (int m = 0; m < 5; ++m) {
            const double q = q2_[static_cast<std::size_t>(m)][static_cast<std::size_t>(3 * a + b)];
            if (q == 0.0) continue;
            Value term = t.scale(tau_cols[static_cast<std::size_t>(m)], q);
            col = has ? t.add(col, term) : term;
            has = true;
          }
        if (!has) col = t.zeros({n, 1});
        Value padded = t.pad_cols(col, slot, 6);
        root = first ? padded : t.add(root, padded);
        first = false;
      }
      out.cov_root = root;
      out.has_cov_root = true;
      out.cov_jitter = cfg_.cov_jitter;
    }

    if (need_forces) {
      out.forces = t.neg(t.grad(out.energy, {out.pos})[0]);
      out.has_forces = true;
    }
    return out;
  }

  PredictiveDistribution predict(const AtomicStructure& s, const NeighborList* nl = nullptr) const {
    Tape t;
    ForwardResult f = forward(t, s, nl, true);
    PredictiveDistribution p;
    p.energy_mean = f.energy.item();
    p.per_atom_energy = f.per_atom_energy.data();
    for (const Value& le : f.layer_energy) p.layer_energy.push_back(le.item());
    p.force_mean = f.forces.data();
    if (f.has_energy_var) {
      p.energy_var = f.energy_var.item();
      p.has_energy_var = true;
    }
    if (f.has_cov_root) {
      p.force_cov = root_to_cov(f.cov_root.data(), f.natoms, cfg_.cov_jitter);
      p.has_force_cov = true;
    }
    return p;
  }

  // Expands the 6 symmetric-root columns into per-atom 3x3 covariances
  // Sigma = M^2 + eps I (numeric mirror of the loss-side construction).
  static std::vector<double> root_to_cov(const std::vector<double>& root, int n, double eps) {
    std::vector<double> cov(static_cast<std::size_t>(n) * 9, 0.0);
    for (int i = 0; i < n; ++i) {
      double m[9];
      for (int slot = 0; slot < 6; ++slot) {
        const int a = kRootSlots[slot][0], b = kRootSlots[slot][1];
        m[3 * a + b] = root[static_cast<std::size_t>(6 * i + slot)];
        m[3 * b + a] = root[static_cast<std::size_t>(6 * i + slot)];
      }
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) {
          double acc = (a == b) ? eps : 0.0;
          for (int k = 0; k < 3; ++k) acc += m[3 * a + k] * m[3 * k + b];
          cov[static_cast<std::size_t>(9 * i + 3 * a + b)] = acc;
        }
    }
    return cov;
  }

 private:
  struct SelfPlan {
    std::pair<int, int> key;           // block acted on
    std::vector<int> weight;           // per species
  };
  struct PathPlan {
    int l1 = 0;
    std::pair<int, int> in_key;
    std::pair<int, int> out_key;
    std::shared_ptr<TriPlan> plan;
    int radial_slot = 0;
    int weight = -1;
  };
  struct LayerPlan {
    std::vector<SelfPlan> self;
    std::vector<PathPlan> paths;
    int n_paths = 0;
    int si_bias = -1;
    int readout = -1;
    int rad_w0 = -1, rad_b0 = -1, rad_w1 = -1, rad_b1 = -1, rad_w2 = -1, rad_b2 = -1;
  };

  static std::pair<int, int> key_of(const Irrep& e) {
    return {e.l, e.p == Parity::even ? +1 : -1};
  }

  void build_plans() {
    for (std::size_t i = 0; i < cfg_.species_list.size(); ++i)
      species_index_[cfg_.species_list[i]] = static_cast<int>(i);

    // quadratic forms of the five degree-2 harmonics, used by the MVE8 head
    for (int m = 0; m < 5; ++m) {
      q2_[static_cast<std::size_t>(m)].fill(0.0);
      for (const ShTerm& term : sh_monomials(2)[static_cast<std::size_t>(m)]) {
        int axes[2], k = 0;
        for (int p = 0; p < term.px; ++p) axes[k++] = 0;
        for (int p = 0; p < term.py; ++p) axes[k++] = 1;
        for (int p = 0; p < term.pz; ++p) axes[k++] = 2;
        const int a = axes[0], b = axes[1];
        if (a == b) {
          q2_[static_cast<std::size_t>(m)][static_cast<std::size_t>(3 * a + b)] += term.coef;
        } else {
          q2_[static_cast<std::size_t>(m)][static_cast<std::size_t>(3 * a + b)] += 0.5 * term.coef;
          q2_[static_cast<std::size_t>(m)][static_cast<std::size_t>(3 * b + a)] += 0.5 * term.coef;
        }
      }
    }

    IrrepsSpec in_spec;
    in_spec.entries.push_back({0, Parity::even, cfg_.feature_dim});
    const auto& cg = CGTable::instance();
    std::vector<int> used_l;
    for (int layer = 0; layer < cfg_.n_layers; ++layer) {
      LayerPlan lp;
      for (const auto& oe : cfg_.hidden_irreps.entries) {
        // self weights exist for blocks present in this layer's input
        for (const auto& ie : in_spec.entries)
          if (ie.l == oe.l && ie.p == oe.p) {
            SelfPlan sp;
            sp.key = key_of(oe);
            lp.self.push_back(sp);
          }
        // conv paths: Y_l1 (parity (-1)^l1) x input block -> output block
        for (const auto& ie : in_spec.entries) {
          for (int l1 = 0; l1 <= cfg_.l_max; ++l1) {
            const Parity p1 = (l1 % 2 == 0) ? Parity::even : Parity::odd;
            if (parity_product(p1, ie.p) != oe.p) continue;
            if (oe.l < std::abs(l1 - ie.l) || oe.l > l1 + ie.l) continue;
            PathPlan pp;
            pp.l1 = l1;
            pp.in_key = key_of(ie);
            pp.out_key = key_of(oe);
            pp.radial_slot = lp.n_paths;
            const int d1 = 2 * l1 + 1, d2 = ie.block_dim(), dL = oe.block_dim();
            auto plan = std::make_shared<TriPlan>();
            plan->c0 = d1;
            plan->c1 = cfg_.feature_dim * d2;
            plan->c2 = cfg_.feature_dim;
            plan->co = cfg_.feature_dim * dL;
            for (int u = 0; u < cfg_.feature_dim; ++u)
              for (const CGEntry& e : cg.coefficients(l1, ie.l, oe.l))
                plan->entries.push_back({l1 + e.m1, u * d2 + (ie.l + e.m2), u,
                                         u * dL + (oe.l + e.M), e.c});
            pp.plan = plan;
            lp.paths.push_back(pp);
            ++lp.n_paths;
            if (std::find(used_l.begin(), used_l.end(), l1) == used_l.end()) used_l.push_back(l1);
          }
        }
      }
      layers_.push_back(std::move(lp));
      in_spec = cfg_.hidden_irreps;
    }
    std::sort(used_l.begin(), used_l.end());
    needed_ls_ = used_l;
  }

  void register_params() {
    const int F = cfg_.feature_dim;
    const int S = static_cast<int>(cfg_.species_list.size());
    embed_block_ = params_.add("embed", {S, F});
    a1_block_ = params_.add("a1.w", {F, F});
    for (int layer = 0; layer < cfg_.n_layers; ++layer) {
      LayerPlan& lp = layers_[static_cast<std::size_t>(layer)];
      const std::string pre = "layer" + std::to_string(layer) + ".";
      lp.rad_w0 = params_.add(pre + "radial.w0", {F, cfg_.n_basis});
      lp.rad_b0 = params_.add(pre + "radial.b0", {1, F});
      lp.rad_w1 = params_.add(pre + "radial.w1", {F, F});
      lp.rad_b1 = params_.add(pre + "radial.b1", {1, F});
      lp.rad_w2 = params_.add(pre + "radial.w2", {lp.n_paths * F, F});
      lp.rad_b2 = params_.add(pre + "radial.b2", {1, lp.n_paths * F});
      for (auto& pp : lp.paths) {
        const std::string name = pre + "path." + std::to_string(pp.l1) + "x" +
                                 irrep_name(pp.in_key) + "to" + irrep_name(pp.out_key) + ".w";
        pp.weight = params_.add(name, {F, F});
      }
      for (auto& sp : lp.self) {
        sp.weight.resize(cfg_.species_list.size());
        for (std::size_t si = 0; si < cfg_.species_list.size(); ++si)
          sp.weight[si] = params_.add(pre + "si." + irrep_name(sp.key) + ".z" +
                                          std::to_string(cfg_.species_list[si]) + ".w",
                                      {F, F});
      }
      lp.si_bias = params_.add(pre + "si.0e.bias", {S, F});
      lp.readout = params_.add(pre + "readout.w", {1, F});
    }
    if (cfg_.head_mode != HeadMode::base) {
      head_evar_w_ = params_.add("head.evar.w", {1, F});
      head_evar_b_ = params_.add("head.evar.b", {1, 1});
    }
    if (cfg_.head_mode == HeadMode::mve8) {
      head_cov_iso_w_ = params_.add("head.cov.iso.w", {1, F});
      head_cov_iso_b_ = params_.add("head.cov.iso.b", {1, 1});
      if (cfg_.hidden_irreps.has(2, Parity::even))
        head_cov_aniso_w_ = params_.add("head.cov.aniso.w", {1, F});
    }
  }

  static std::string irrep_name(std::pair<int, int> key) {
    return std::to_string(key.first) + (key.second > 0 ? "e" : "o");
  }

 public:
  // two SiLU hidden layers then a linear map onto one radial weight column
  // per (path, channel); exposed for white-box tests
  Value radial_mlp(Tape& t, Value basis, int layer, const std::vector<Value>& p) const {
    const LayerPlan& lp = layers_[static_cast<std::size_t>(layer)];
    const int rows = basis.shape().rows;
    Value h = t.silu(t.add(t.mix_channels(basis, p[static_cast<std::size_t>(lp.rad_w0)], 1),
                           t.broadcast_rows(p[static_cast<std::size_t>(lp.rad_b0)], rows)));
    h = t.silu(t.add(t.mix_channels(h, p[static_cast<std::size_t>(lp.rad_w1)], 1),
                     t.broadcast_rows(p[static_cast<std::size_t>(lp.rad_b1)], rows)));
    return t.add(t.mix_channels(h, p[static_cast<std::size_t>(lp.rad_w2)], 1),
                 t.broadcast_rows(p[static_cast<std::size_t>(lp.rad_b2)], rows));
  }

 private:
  ModelConfig cfg_;
  ParamStore params_;
  std::map<int, int> species_index_;
  std::vector<LayerPlan> layers_;
  std::vector<int> needed_ls_;
  std::array<std::array<double, 9>, 5> q2_{};
  int embed_block_ = -1, a1_block_ = -1;
  int head_evar_w_ = -1, head_evar_b_ = -1;
  int head_cov_iso_w_ = -1, head_cov_iso_b_ = -1, head_cov_aniso_w_ = -1;
};

// Stress from the recorded energy graph: the cell enters through the
// shift * cell term of every edge vector, so S combines the two leaf
// gradients, S = (h^T dE/dh + sum_i r_i (x) dE/dr_i) / V.
inline std::array<double, 9> stress(const AtomicStructure& s, Tape& t, const ForwardResult& f) {
  if (!f.has_cell || !(s.pbc[0] || s.pbc[1] || s.pbc[2]))
    throw NoCell("stress needs a periodic structure");
  auto g = t.grad(f.energy, {f.pos, f.cell});
  const auto& gp = g[0].data();
  const auto& gc = g[1].data();
  const double vol = std::abs(detail::det3(s.cell));
  std::array<double, 9> out{};
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) {
      double acc = 0.0;
      for (int k = 0; k < 3; ++k) acc += s.cell[static_cast<std::size_t>(3 * k + a)] * gc[static_cast<std::size_t>(3 * k + b)];
      for (int i = 0; i < f.natoms; ++i)
        acc += s.positions[static_cast<std::size_t>(3 * i + a)] * gp[static_cast<std::size_t>(3 * i + b)];
      out[static_cast<std::size_t>(3 * a + b)] = acc / vol;
    }
  return out;
}

}  // namespace bam
