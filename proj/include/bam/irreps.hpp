#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "bam/errors.hpp"

namespace bam {

// Parity of an irrep: +1 (even, 'e') or -1 (odd, 'o').
enum class Parity : int { even = +1, odd = -1 };

inline char parity_char(Parity p) { return p == Parity::even ? 'e' : 'o'; }

inline Parity parity_product(Parity a, Parity b) {
  return (a == b) ? Parity::even : Parity::odd;
}

// One (degree, parity, multiplicity) entry of a feature specification.
struct Irrep {
  int l = 0;
  Parity p = Parity::even;
  int mult = 1;

  int block_dim() const { return 2 * l + 1; }
  int dim() const { return mult * block_dim(); }

  friend bool operator==(const Irrep& a, const Irrep& b) {
    return a.l == b.l && a.p == b.p && a.mult == b.mult;
  }
};

// Ordered list of irrep entries.  Canonical order is (l ascending, even
// before odd); duplicates of the same (l, parity) are not allowed.
struct IrrepsSpec {
  std::vector<Irrep> entries;

  IrrepsSpec() = default;
  explicit IrrepsSpec(std::vector<Irrep> e) : entries(std::move(e)) { canonicalize(); }

  void canonicalize() {
    std::stable_sort(entries.begin(), entries.end(), [](const Irrep& a, const Irrep& b) {
      if (a.l != b.l) return a.l < b.l;
      return (a.p == Parity::even) > (b.p == Parity::even);
    });
    for (std::size_t i = 1; i < entries.size(); ++i) {
      if (entries[i].l == entries[i - 1].l && entries[i].p == entries[i - 1].p)
        throw ShapeError("duplicate irrep entry " + std::to_string(entries[i].l) +
                         parity_char(entries[i].p));
    }
  }

  int total_dim() const {
    int d = 0;
    for (const auto& e : entries) d += e.dim();
    return d;
  }

  int find(int l, Parity p) const {
    for (std::size_t i = 0; i < entries.size(); ++i)
      if (entries[i].l == l && entries[i].p == p) return static_cast<int>(i);
    return -1;
  }

  bool has(int l, Parity p) const { return find(l, p) >= 0; }

  // Parses strings like "64x0e+32x1o+8x2e".  Multiplicity defaults to 1 when
  // the "Nx" prefix is absent ("0e+1o").
  static IrrepsSpec parse(const std::string& text) {
    IrrepsSpec spec;
    if (text.empty()) throw ParseError("empty irreps string");
    std::size_t pos = 0;
    while (pos < text.size()) {
      std::size_t end = text.find('+', pos);
      if (end == std::string::npos) end = text.size();
      std::string tok = text.substr(pos, end - pos);
      if (tok.empty()) throw ParseError("empty irrep token in '" + text + "'");
      int mult = 1;
      std::size_t x = tok.find('x');
      std::size_t at = 0;
      if (x != std::string::npos) {
        try {
          mult = std::stoi(tok.substr(0, x));
        } catch (const std::exception&) {
          throw ParseError("bad multiplicity in irrep token '" + tok + "'");
        }
        at = x + 1;
      }
      if (at + 2 > tok.size()) throw ParseError("bad irrep token '" + tok + "'");
      char pc = tok.back();
      Parity p;
      if (pc == 'e') p = Parity::even;
      else if (pc == 'o') p = Parity::odd;
      else throw ParseError("bad parity character in irrep token '" + tok + "'");
      int l;
      try {
        l = std::stoi(tok.substr(at, tok.size() - at - 1));
      } catch (const std::exception&) {
        throw ParseError("bad degree in irrep token '" + tok + "'");
      }
      if (l < 0 || mult <= 0) throw ParseError("bad irrep token '" + tok + "'");
      spec.entries.push_back({l, p, mult});
      pos = end + 1;
    }
    spec.canonicalize();
    return spec;
  }

  std::string to_string() const {
    std::string out;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (i) out += '+';
      out += std::to_string(entries[i].mult);
      out += 'x';
      out += std::to_string(entries[i].l);
      out += parity_char(entries[i].p);
    }
    return out;
  }

  friend bool operator==(const IrrepsSpec& a, const IrrepsSpec& b) {
    return a.entries == b.entries;
  }
};

// Dense value of a feature: one block per spec entry, each stored row-major
// as mult rows of (2l+1) components, m ordered -l..l.
struct EquivariantFeature {
  IrrepsSpec spec;
  std::vector<std::vector<double>> blocks;

  static EquivariantFeature zeros(const IrrepsSpec& s) {
    EquivariantFeature f;
    f.spec = s;
    f.blocks.reserve(s.entries.size());
    for (const auto& e : s.entries) f.blocks.emplace_back(e.dim(), 0.0);
    return f;
  }

  void check() const {
    if (blocks.size() != spec.entries.size())
      throw ShapeError("feature block count does not match spec");
    for (std::size_t i = 0; i < blocks.size(); ++i)
      if (static_cast<int>(blocks[i].size()) != spec.entries[i].dim())
        throw ShapeError("feature block " + std::to_string(i) + " has wrong size");
  }
};

}  // namespace bam
