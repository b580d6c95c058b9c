#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <vector>

#include "bam/errors.hpp"

namespace bam {

// Atom positions are (n x 3) row major.  Cell rows are the lattice vectors,
// so a fractional coordinate f maps to cartesian r = f * cell.
struct AtomicStructure {
  std::vector<int> species;
  std::vector<double> positions;
  std::array<double, 9> cell{};
  bool has_cell = false;
  std::array<bool, 3> pbc{false, false, false};
  bool has_energy = false;
  double energy = 0.0;
  std::vector<double> forces;  // empty, or n x 3

  int natoms() const { return static_cast<int>(species.size()); }
  bool has_forces() const { return !forces.empty(); }
};

// Directed edge list.  vec[e] = r[dst] - r[src] + shift[e] * cell, so the
// same pair can appear once per periodic image inside the cutoff.
struct NeighborList {
  std::vector<int> src, dst;
  std::vector<std::array<int, 3>> shift;
  std::vector<double> vec;   // e x 3
  std::vector<double> dist;  // e

  int size() const { return static_cast<int>(src.size()); }
};

namespace detail {

inline double det3(const std::array<double, 9>& m) {
  return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
         m[2] * (m[3] * m[7] - m[4] * m[6]);
}

inline std::array<double, 9> inv3(const std::array<double, 9>& m, double det) {
  std::array<double, 9> r;
  r[0] = (m[4] * m[8] - m[5] * m[7]) / det;
  r[1] = (m[2] * m[7] - m[1] * m[8]) / det;
  r[2] = (m[1] * m[5] - m[2] * m[4]) / det;
  r[3] = (m[5] * m[6] - m[3] * m[8]) / det;
  r[4] = (m[0] * m[8] - m[2] * m[6]) / det;
  r[5] = (m[2] * m[3] - m[0] * m[5]) / det;
  r[6] = (m[3] * m[7] - m[4] * m[6]) / det;
  r[7] = (m[1] * m[6] - m[0] * m[7]) / det;
  r[8] = (m[0] * m[4] - m[1] * m[3]) / det;
  return r;
}

}  // namespace detail

// Builds all edges with |vec| <= r_cut.  Self edges appear only through
// nonzero shifts.  If max_neighbors > 0, each atom keeps only its nearest
// max_neighbors edges, ties broken by (distance, neighbor index, shift).
// Edges come out sorted by (src, dst, shift) for reproducibility.
inline NeighborList build_neighbor_list(const AtomicStructure& s, double r_cut,
                                        int max_neighbors = 0) {
  if (!(r_cut > 0.0)) throw DomainError("cutoff radius must be positive");
  const int n = s.natoms();
  const bool any_pbc = s.pbc[0] || s.pbc[1] || s.pbc[2];
  if (any_pbc && !s.has_cell) throw NoCell("periodic boundaries need a cell");

  std::array<double, 9> h = s.cell;
  std::array<double, 9> hinv{};
  if (any_pbc) {
    const double det = detail::det3(h);
    if (std::abs(det) < 1e-12) throw BadCell("cell matrix is singular");
    hinv = detail::inv3(h, det);
  }

  // Wrap atoms into the cell along periodic directions.  The integer part of
  // the fractional coordinate folds into the reported shift, so arbitrary
  // input positions give the same edge set as wrapped ones.
  std::vector<double> w(s.positions);
  std::vector<std::array<int, 3>> fold(static_cast<std::size_t>(n), {0, 0, 0});
  std::array<int, 3> range{0, 0, 0};
  if (any_pbc) {
    for (int i = 0; i < n; ++i) {
      const double* r = s.positions.data() + 3 * i;
      double f[3];
      for (int a = 0; a < 3; ++a) f[a] = r[0] * hinv[a] + r[1] * hinv[3 + a] + r[2] * hinv[6 + a];
      for (int a = 0; a < 3; ++a) {
        if (!s.pbc[a]) continue;
        fold[static_cast<std::size_t>(i)][a] = static_cast<int>(std::floor(f[a]));
        f[a] -= std::floor(f[a]);
      }
      for (int c = 0; c < 3; ++c)
        w[static_cast<std::size_t>(3 * i + c)] = f[0] * h[c] + f[1] * h[3 + c] + f[2] * h[6 + c];
    }
    for (int a = 0; a < 3; ++a) {
      if (!s.pbc[a]) continue;
      // Spacing between lattice planes normal to axis a is 1/|column a of
      // the inverse cell|; wrapped fractional offsets add at most one cell.
      const double col = std::sqrt(hinv[a] * hinv[a] + hinv[3 + a] * hinv[3 + a] +
                                   hinv[6 + a] * hinv[6 + a]);
      range[a] = static_cast<int>(std::ceil(r_cut * col - 1e-12)) + 1;
    }
  }

  struct Cand {
    int j;
    std::array<int, 3> sh;
    double d;
    std::array<double, 3> v;
  };
  std::vector<std::vector<Cand>> per_atom(static_cast<std::size_t>(n));

  const double r2 = r_cut * r_cut;
  for (int sa = -range[0]; sa <= range[0]; ++sa)
    for (int sb = -range[1]; sb <= range[1]; ++sb)
      for (int sc = -range[2]; sc <= range[2]; ++sc) {
        double sh[3] = {0.0, 0.0, 0.0};
        if (any_pbc)
          for (int c = 0; c < 3; ++c) sh[c] = sa * h[c] + sb * h[3 + c] + sc * h[6 + c];
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < n; ++j) {
            if (i == j && sa == 0 && sb == 0 && sc == 0) continue;
            std::array<double, 3> v;
            double d2 = 0.0;
            for (int c = 0; c < 3; ++c) {
              v[static_cast<std::size_t>(c)] = w[static_cast<std::size_t>(3 * j + c)] -
                                               w[static_cast<std::size_t>(3 * i + c)] + sh[c];
              d2 += v[static_cast<std::size_t>(c)] * v[static_cast<std::size_t>(c)];
            }
            if (d2 > r2) continue;
            const double d = std::sqrt(d2);
            if (d < 1e-10) throw DegenerateEdge("atoms closer than 1e-10");
            Cand cand;
            cand.j = j;
            cand.sh = {sa + fold[static_cast<std::size_t>(i)][0] - fold[static_cast<std::size_t>(j)][0],
                       sb + fold[static_cast<std::size_t>(i)][1] - fold[static_cast<std::size_t>(j)][1],
                       sc + fold[static_cast<std::size_t>(i)][2] - fold[static_cast<std::size_t>(j)][2]};
            cand.d = d;
            cand.v = v;
            per_atom[static_cast<std::size_t>(i)].push_back(cand);
          }
      }

  NeighborList out;
  for (int i = 0; i < n; ++i) {
    auto& cands = per_atom[static_cast<std::size_t>(i)];
    auto key_lt = [](const Cand& a, const Cand& b) {
      if (a.d != b.d) return a.d < b.d;
      if (a.j != b.j) return a.j < b.j;
      return a.sh < b.sh;
    };
    if (max_neighbors > 0 && static_cast<int>(cands.size()) > max_neighbors) {
      std::sort(cands.begin(), cands.end(), key_lt);
      cands.resize(static_cast<std::size_t>(max_neighbors));
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.j != b.j) return a.j < b.j;
      return a.sh < b.sh;
    });
    for (const Cand& c : cands) {
      out.src.push_back(i);
      out.dst.push_back(c.j);
      out.shift.push_back(c.sh);
      out.vec.insert(out.vec.end(), c.v.begin(), c.v.end());
      out.dist.push_back(c.d);
    }
  }
  return out;
}

// Smooth polynomial cutoff with f(0) = 1, f(1) = 0 and p-fold flatness:
// f(u) = 1 - (p+1)(p+2)/2 u^p + p(p+2) u^(p+1) - p(p+1)/2 u^(p+2).
inline double envelope(double u, int p = 6) {
  if (u >= 1.0) return 0.0;
  const double a = 0.5 * (p + 1) * (p + 2);
  const double b = static_cast<double>(p) * (p + 2);
  const double c = 0.5 * p * (p + 1);
  const double up = std::pow(u, p);
  return 1.0 - a * up + b * up * u - c * up * u * u;
}

// Spherical Bessel radial function, orthonormal on [0, r_cut] with weight
// r^2: B_n(r) = sqrt(2/r_cut) sin(n pi r / r_cut) / r, with the finite
// limit sqrt(2/r_cut^3) n pi at r = 0.
inline double bessel_basis(int n, double r, double r_cut) {
  if (n < 1) throw DomainError("radial index starts at 1");
  const double amp = std::sqrt(2.0 / r_cut);
  const double freq = n * M_PI / r_cut;
  if (r < 1e-14) return amp * freq;
  return amp * std::sin(freq * r) / r;
}

struct RadialBasisSpec {
  double r_cut = 5.0;
  int n_max = 8;
  int p = 6;

  double amplitude() const { return std::sqrt(2.0 / r_cut); }
  double frequency(int n) const { return n * M_PI / r_cut; }

  // B_n(r) * envelope(r / r_cut), the function the network consumes.
  std::vector<double> eval(double r) const {
    std::vector<double> out(static_cast<std::size_t>(n_max));
    const double env = envelope(r / r_cut, p);
    for (int n = 1; n <= n_max; ++n) out[static_cast<std::size_t>(n - 1)] = bessel_basis(n, r, r_cut) * env;
    return out;
  }
};

}  // namespace bam
