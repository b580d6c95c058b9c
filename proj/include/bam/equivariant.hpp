#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "bam/cg.hpp"
#include "bam/irreps.hpp"

namespace bam {

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

// One coupling path of a tensor product: (entry of a) x (entry of b) -> entry
// of the output spec.  A factor with multiplicity 1 broadcasts across the
// output channels; otherwise multiplicities must match the output entry.
// Each path carries one learnable weight per output channel.
struct TPPath {
  int entry_a, entry_b, entry_out;
  int l1, l2, L;
  bool broadcast_a, broadcast_b;
  int weight_offset;
};

struct TensorProductPlan {
  IrrepsSpec spec_a, spec_b, spec_out;
  std::vector<TPPath> paths;
  int weight_count = 0;

  static TensorProductPlan build(const IrrepsSpec& a, const IrrepsSpec& b, const IrrepsSpec& out) {
    TensorProductPlan plan;
    plan.spec_a = a;
    plan.spec_b = b;
    plan.spec_out = out;
    std::vector<bool> fed(out.entries.size(), false);
    for (std::size_t io = 0; io < out.entries.size(); ++io) {
      const Irrep& eo = out.entries[io];
      for (std::size_t ia = 0; ia < a.entries.size(); ++ia) {
        const Irrep& ea = a.entries[ia];
        for (std::size_t ib = 0; ib < b.entries.size(); ++ib) {
          const Irrep& eb = b.entries[ib];
          if (eo.l < std::abs(ea.l - eb.l) || eo.l > ea.l + eb.l) continue;
          if (parity_product(ea.p, eb.p) != eo.p) continue;
          const bool ba = ea.mult == 1 && eo.mult != 1;
          const bool bb = eb.mult == 1 && eo.mult != 1;
          if (!ba && ea.mult != eo.mult)
            throw ShapeError("tensor product multiplicity mismatch on path " + std::to_string(ea.l) +
                             parity_char(ea.p) + " x " + std::to_string(eb.l) + parity_char(eb.p) +
                             " -> " + std::to_string(eo.l) + parity_char(eo.p));
          if (!bb && eb.mult != eo.mult)
            throw ShapeError("tensor product multiplicity mismatch on path " + std::to_string(ea.l) +
                             parity_char(ea.p) + " x " + std::to_string(eb.l) + parity_char(eb.p) +
                             " -> " + std::to_string(eo.l) + parity_char(eo.p));
          TPPath p;
          p.entry_a = static_cast<int>(ia);
          p.entry_b = static_cast<int>(ib);
          p.entry_out = static_cast<int>(io);
          p.l1 = ea.l;
          p.l2 = eb.l;
          p.L = eo.l;
          p.broadcast_a = ba;
          p.broadcast_b = bb;
          p.weight_offset = plan.weight_count;
          plan.weight_count += eo.mult;
          plan.paths.push_back(p);
          fed[io] = true;
        }
      }
    }
    for (std::size_t io = 0; io < out.entries.size(); ++io)
      if (!fed[io])
        throw InvalidPath("no coupling path feeds output entry " +
                          std::to_string(out.entries[io].l) + parity_char(out.entries[io].p));
    return plan;
  }
};

// Weighted Clebsch-Gordan tensor product of two features.
inline EquivariantFeature tensor_product(const TensorProductPlan& plan, const EquivariantFeature& a,
                                         const EquivariantFeature& b,
                                         const std::vector<double>& weights) {
  a.check();
  b.check();
  if (!(a.spec == plan.spec_a) || !(b.spec == plan.spec_b))
    throw ShapeError("tensor product inputs do not match the plan's specs");
  if (static_cast<int>(weights.size()) != plan.weight_count)
    throw ShapeError("tensor product expects " + std::to_string(plan.weight_count) + " weights, got " +
                     std::to_string(weights.size()));
  const CGTable& cg = CGTable::instance();
  EquivariantFeature out = EquivariantFeature::zeros(plan.spec_out);
  for (const TPPath& p : plan.paths) {
    const auto& entries = cg.coefficients(p.l1, p.l2, p.L);
    const int d1 = 2 * p.l1 + 1, d2 = 2 * p.l2 + 1, dL = 2 * p.L + 1;
    const int mult = plan.spec_out.entries[static_cast<std::size_t>(p.entry_out)].mult;
    const auto& ablk = a.blocks[static_cast<std::size_t>(p.entry_a)];
    const auto& bblk = b.blocks[static_cast<std::size_t>(p.entry_b)];
    auto& oblk = out.blocks[static_cast<std::size_t>(p.entry_out)];
    for (int u = 0; u < mult; ++u) {
      const int ua = p.broadcast_a ? 0 : u;
      const int ub = p.broadcast_b ? 0 : u;
      const double w = weights[static_cast<std::size_t>(p.weight_offset + u)];
      for (const CGEntry& e : entries)
        oblk[static_cast<std::size_t>(u * dL + e.M + p.L)] +=
            w * e.c * ablk[static_cast<std::size_t>(ua * d1 + e.m1 + p.l1)] *
            bblk[static_cast<std::size_t>(ub * d2 + e.m2 + p.l2)];
    }
  }
  return out;
}

inline EquivariantFeature tensor_product(const EquivariantFeature& a, const EquivariantFeature& b,
                                         const IrrepsSpec& out_spec,
                                         const std::vector<double>& weights) {
  return tensor_product(TensorProductPlan::build(a.spec, b.spec, out_spec), a, b, weights);
}

// Number of weights of a per-block linear map (matrices stored row-major per
// output entry, output channel by input channel).
inline int equivariant_linear_weight_count(const IrrepsSpec& in, const IrrepsSpec& out) {
  int n = 0;
  for (const auto& eo : out.entries) {
    int ii = in.find(eo.l, eo.p);
    if (ii < 0)
      throw InvalidPath("linear map has no input block for " + std::to_string(eo.l) + parity_char(eo.p));
    n += eo.mult * in.entries[static_cast<std::size_t>(ii)].mult;
  }
  return n;
}

// Degree- and parity-preserving linear map: mixes channels within each (l, p)
// block and touches nothing else.
inline EquivariantFeature equivariant_linear(const EquivariantFeature& x, const IrrepsSpec& out_spec,
                                             const std::vector<double>& W) {
  x.check();
  if (static_cast<int>(W.size()) != equivariant_linear_weight_count(x.spec, out_spec))
    throw ShapeError("equivariant_linear weight vector has wrong size");
  EquivariantFeature out = EquivariantFeature::zeros(out_spec);
  std::size_t off = 0;
  for (std::size_t io = 0; io < out_spec.entries.size(); ++io) {
    const Irrep& eo = out_spec.entries[io];
    const int ii = x.spec.find(eo.l, eo.p);
    const Irrep& ei = x.spec.entries[static_cast<std::size_t>(ii)];
    const int d = eo.block_dim();
    for (int v = 0; v < eo.mult; ++v)
      for (int u = 0; u < ei.mult; ++u) {
        const double w = W[off + static_cast<std::size_t>(v * ei.mult + u)];
        for (int m = 0; m < d; ++m)
          out.blocks[io][static_cast<std::size_t>(v * d + m)] +=
              w * x.blocks[static_cast<std::size_t>(ii)][static_cast<std::size_t>(u * d + m)];
      }
    off += static_cast<std::size_t>(eo.mult * ei.mult);
  }
  return out;
}

// Nonlinearity: scalar blocks pass through SiLU elementwise; every l > 0
// channel is multiplied by SiLU of its own gate scalar.  Gates are consumed
// in spec order of the non-scalar entries.
inline EquivariantFeature gate(const EquivariantFeature& x, const EquivariantFeature& gates) {
  x.check();
  gates.check();
  int needed = 0;
  for (const auto& e : x.spec.entries)
    if (e.l > 0) needed += e.mult;
  for (const auto& e : gates.spec.entries)
    if (e.l != 0)
      throw NotScalar("gate feature must contain only l = 0 blocks, found l = " + std::to_string(e.l));
  int have = 0;
  for (const auto& e : gates.spec.entries) have += e.mult;
  if (have != needed)
    throw ShapeError("gate expects " + std::to_string(needed) + " scalars, got " + std::to_string(have));
  std::vector<double> g;
  g.reserve(static_cast<std::size_t>(have));
  for (const auto& blk : gates.blocks) g.insert(g.end(), blk.begin(), blk.end());
  EquivariantFeature out = EquivariantFeature::zeros(x.spec);
  std::size_t goff = 0;
  for (std::size_t i = 0; i < x.spec.entries.size(); ++i) {
    const Irrep& e = x.spec.entries[i];
    if (e.l == 0) {
      for (std::size_t k = 0; k < x.blocks[i].size(); ++k) out.blocks[i][k] = silu(x.blocks[i][k]);
    } else {
      const int d = e.block_dim();
      for (int u = 0; u < e.mult; ++u) {
        const double s = silu(g[goff + static_cast<std::size_t>(u)]);
        for (int m = 0; m < d; ++m)
          out.blocks[i][static_cast<std::size_t>(u * d + m)] =
              s * x.blocks[i][static_cast<std::size_t>(u * d + m)];
      }
      goff += static_cast<std::size_t>(e.mult);
    }
  }
  return out;
}

}  // namespace bam
