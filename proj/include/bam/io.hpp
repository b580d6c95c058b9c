#pragma once

// Dataset ingestion (extended XYZ), deterministic splits, binary checkpoints,
// and JSON config round-trips.  Floats are written with 17 significant digits
// so text round-trips are bitwise.

#include <array>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "bam/errors.hpp"
#include "bam/geometry.hpp"
#include "bam/model.hpp"
#include "bam/posterior.hpp"
#include "bam/random.hpp"

namespace bam {

struct Dataset {
  std::vector<AtomicStructure> frames;
  std::string source;
  std::uint64_t content_hash = 0;

  std::size_t size() const { return frames.size(); }
  bool all_have_energy() const {
    for (const auto& f : frames)
      if (!f.has_energy) return false;
    return !frames.empty();
  }
  bool all_have_forces() const {
    for (const auto& f : frames)
      if (!f.has_forces()) return false;
    return !frames.empty();
  }
};

namespace detail {

inline const std::array<const char*, 87>& element_symbols() {
  static const std::array<const char*, 87> tab = {
      "X",  "H",  "He", "Li", "Be", "B",  "C",  "N",  "O",  "F",  "Ne", "Na", "Mg", "Al", "Si",
      "P",  "S",  "Cl", "Ar", "K",  "Ca", "Sc", "Ti", "V",  "Cr", "Mn", "Fe", "Co", "Ni", "Cu",
      "Zn", "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y",  "Zr", "Nb", "Mo", "Tc", "Ru",
      "Rh", "Pd", "Ag", "Cd", "In", "Sn", "Sb", "Te", "I",  "Xe", "Cs", "Ba", "La", "Ce", "Pr",
      "Nd", "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W",
      "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl", "Pb", "Bi", "Po", "At", "Rn"};
  return tab;
}

inline int species_from_token(const std::string& tok, std::size_t line_no) {
  const auto& tab = element_symbols();
  for (std::size_t z = 1; z < tab.size(); ++z)
    if (tok == tab[z]) return static_cast<int>(z);
  try {
    std::size_t used = 0;
    const int z = std::stoi(tok, &used);
    if (used == tok.size() && z > 0) return z;
  } catch (...) {
  }
  throw ParseError("line " + std::to_string(line_no) + ": unknown species '" + tok + "'");
}

inline std::string symbol_for(int z) {
  const auto& tab = element_symbols();
  if (z > 0 && z < static_cast<int>(tab.size())) return tab[static_cast<std::size_t>(z)];
  return std::to_string(z);
}

inline double parse_double(const std::string& tok, std::size_t line_no) {
  try {
    std::size_t used = 0;
    const double v = std::stod(tok, &used);
    if (used == tok.size()) return v;
  } catch (...) {
  }
  throw ParseError("line " + std::to_string(line_no) + ": bad number '" + tok + "'");
}

// key=value pairs, values optionally double-quoted with embedded spaces
inline std::map<std::string, std::string> parse_comment_line(const std::string& line,
                                                             std::size_t line_no) {
  std::map<std::string, std::string> kv;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i >= line.size()) break;
    const std::size_t eq = line.find('=', i);
    if (eq == std::string::npos) {
      // bare token without value, ignore (some writers emit flags)
      while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
      continue;
    }
    std::string key = line.substr(i, eq - i);
    if (key.empty()) throw ParseError("line " + std::to_string(line_no) + ": empty property key");
    i = eq + 1;
    std::string value;
    if (i < line.size() && line[i] == '"') {
      const std::size_t close = line.find('"', i + 1);
      if (close == std::string::npos)
        throw ParseError("line " + std::to_string(line_no) + ": unterminated quote");
      value = line.substr(i + 1, close - i - 1);
      i = close + 1;
    } else {
      std::size_t end = i;
      while (end < line.size() && !std::isspace(static_cast<unsigned char>(line[end]))) ++end;
      value = line.substr(i, end - i);
      i = end;
    }
    kv[key] = value;
  }
  return kv;
}

struct PropertyColumn {
  std::string name;
  char kind = 'R';  // S string, R real, I int, L logical
  int count = 0;
};

inline std::vector<PropertyColumn> parse_properties(const std::string& text, std::size_t line_no) {
  std::vector<PropertyColumn> cols;
  std::size_t i = 0;
  std::vector<std::string> parts;
  while (i <= text.size()) {
    const std::size_t colon = text.find(':', i);
    const std::size_t end = (colon == std::string::npos) ? text.size() : colon;
    parts.push_back(text.substr(i, end - i));
    if (colon == std::string::npos) break;
    i = colon + 1;
  }
  if (parts.size() % 3 != 0)
    throw ParseError("line " + std::to_string(line_no) + ": Properties wants name:type:count triples");
  for (std::size_t p = 0; p < parts.size(); p += 3) {
    PropertyColumn c;
    c.name = parts[p];
    if (parts[p + 1].size() != 1)
      throw ParseError("line " + std::to_string(line_no) + ": bad Properties type '" + parts[p + 1] + "'");
    c.kind = parts[p + 1][0];
    c.count = static_cast<int>(parse_double(parts[p + 2], line_no));
    if (c.count < 1) throw ParseError("line " + std::to_string(line_no) + ": bad Properties count");
    cols.push_back(c);
  }
  return cols;
}

inline std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace detail

struct ExtxyzOptions {
  std::string energy_key = "energy";
  std::string forces_key = "forces";
};

inline Dataset read_extxyz_stream(std::istream& in, const std::string& name,
                                  const ExtxyzOptions& opt = {}) {
  Dataset ds;
  ds.source = name;
  std::string raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  ds.content_hash = detail::fnv1a(raw);
  std::istringstream is(raw);

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() && is.peek() == std::char_traits<char>::eof()) break;
    int natoms = 0;
    try {
      std::size_t used = 0;
      natoms = std::stoi(line, &used);
      std::string rest = line.substr(used);
      for (char c : rest)
        if (!std::isspace(static_cast<unsigned char>(c)))
          throw ParseError("line " + std::to_string(line_no) + ": expected an atom count");
    } catch (const ParseError&) {
      throw;
    } catch (...) {
      throw ParseError("line " + std::to_string(line_no) + ": expected an atom count");
    }
    if (natoms < 1) throw ParseError("line " + std::to_string(line_no) + ": atom count must be positive");

    if (!std::getline(is, line))
      throw ParseError("line " + std::to_string(line_no) + ": frame truncated before comment line");
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto kv = detail::parse_comment_line(line, line_no);

    AtomicStructure s;
    if (auto it = kv.find("Lattice"); it != kv.end()) {
      const auto toks = detail::split_ws(it->second);
      if (toks.size() != 9)
        throw ParseError("line " + std::to_string(line_no) + ": Lattice wants 9 numbers");
      for (int i = 0; i < 9; ++i) s.cell[i] = detail::parse_double(toks[i], line_no);
      s.has_cell = true;
      s.pbc = {true, true, true};
    }
    if (auto it = kv.find("pbc"); it != kv.end()) {
      const auto toks = detail::split_ws(it->second);
      if (toks.size() != 3) throw ParseError("line " + std::to_string(line_no) + ": pbc wants 3 flags");
      for (int i = 0; i < 3; ++i) s.pbc[i] = (toks[i] == "T" || toks[i] == "true" || toks[i] == "1");
    }
    if (auto it = kv.find(opt.energy_key); it != kv.end()) {
      s.energy = detail::parse_double(it->second, line_no);
      s.has_energy = true;
    }

    std::vector<detail::PropertyColumn> cols;
    if (auto it = kv.find("Properties"); it != kv.end())
      cols = detail::parse_properties(it->second, line_no);
    else
      cols = {{"species", 'S', 1}, {"pos", 'R', 3}};

    int species_col = -1, pos_col = -1, forces_col = -1, offset = 0, total = 0;
    for (const auto& c : cols) {
      if (c.name == "species" && c.kind == 'S' && c.count == 1) species_col = offset;
      if (c.name == "pos" && c.kind == 'R' && c.count == 3) pos_col = offset;
      if (c.name == opt.forces_key && c.kind == 'R' && c.count == 3) forces_col = offset;
      offset += c.count;
    }
    total = offset;
    if (species_col < 0 || pos_col < 0)
      throw ParseError("line " + std::to_string(line_no) + ": Properties must include species:S:1 and pos:R:3");

    for (int a = 0; a < natoms; ++a) {
      if (!std::getline(is, line))
        throw ParseError("frame at line " + std::to_string(line_no) + ": expected " +
                         std::to_string(natoms) + " atoms, file ended after " + std::to_string(a));
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      const auto toks = detail::split_ws(line);
      if (static_cast<int>(toks.size()) != total)
        throw ParseError("line " + std::to_string(line_no) + ": expected " + std::to_string(total) +
                         " columns, got " + std::to_string(toks.size()));
      s.species.push_back(detail::species_from_token(toks[static_cast<std::size_t>(species_col)], line_no));
      for (int i = 0; i < 3; ++i)
        s.positions.push_back(detail::parse_double(toks[static_cast<std::size_t>(pos_col + i)], line_no));
      if (forces_col >= 0)
        for (int i = 0; i < 3; ++i)
          s.forces.push_back(detail::parse_double(toks[static_cast<std::size_t>(forces_col + i)], line_no));
    }
    ds.frames.push_back(std::move(s));
  }
  if (ds.frames.empty()) throw NoData("no frames in " + name);
  return ds;
}

inline Dataset read_extxyz(const std::string& path, const ExtxyzOptions& opt = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path);
  return read_extxyz_stream(in, path, opt);
}

inline void write_extxyz_stream(std::ostream& os, const Dataset& ds, const ExtxyzOptions& opt = {}) {
  char buf[64];
  auto fmt = [&buf](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  for (const auto& s : ds.frames) {
    os << s.natoms() << "\n";
    if (s.has_cell) {
      os << "Lattice=\"";
      for (int i = 0; i < 9; ++i) os << (i ? " " : "") << fmt(s.cell[i]);
      os << "\" ";
    }
    os << "Properties=species:S:1:pos:R:3";
    if (s.has_forces()) os << ":" << opt.forces_key << ":R:3";
    if (s.has_energy) os << " " << opt.energy_key << "=" << fmt(s.energy);
    if (s.has_cell) os << " pbc=\"" << (s.pbc[0] ? "T" : "F") << " " << (s.pbc[1] ? "T" : "F") << " "
                       << (s.pbc[2] ? "T" : "F") << "\"";
    os << "\n";
    for (int a = 0; a < s.natoms(); ++a) {
      os << detail::symbol_for(s.species[static_cast<std::size_t>(a)]);
      for (int i = 0; i < 3; ++i) os << " " << fmt(s.positions[static_cast<std::size_t>(3 * a + i)]);
      if (s.has_forces())
        for (int i = 0; i < 3; ++i) os << " " << fmt(s.forces[static_cast<std::size_t>(3 * a + i)]);
      os << "\n";
    }
  }
}

inline void write_extxyz(const std::string& path, const Dataset& ds, const ExtxyzOptions& opt = {}) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ParseError("cannot open " + path + " for writing");
  write_extxyz_stream(os, ds, opt);
}

// deterministic shuffle then contiguous slicing; parts are disjoint
inline std::array<Dataset, 3> split_counts(const Dataset& ds, std::size_t n_train, std::size_t n_val,
                                           std::size_t n_test, std::uint64_t seed) {
  if (n_train + n_val + n_test > ds.size())
    throw SplitError("split wants " + std::to_string(n_train + n_val + n_test) + " frames, dataset has " +
                     std::to_string(ds.size()));
  std::vector<std::size_t> idx(ds.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng = Rng::stream(seed, "split");
  for (std::size_t i = 0; i + 1 < idx.size(); ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(idx.size() - i));
    std::swap(idx[i], idx[j]);
  }
  std::array<Dataset, 3> out;
  const std::size_t bounds[4] = {0, n_train, n_train + n_val, n_train + n_val + n_test};
  for (int part = 0; part < 3; ++part) {
    out[static_cast<std::size_t>(part)].source = ds.source;
    out[static_cast<std::size_t>(part)].content_hash = ds.content_hash;
    for (std::size_t i = bounds[part]; i < bounds[part + 1]; ++i)
      out[static_cast<std::size_t>(part)].frames.push_back(ds.frames[idx[i]]);
  }
  return out;
}

inline std::array<Dataset, 3> split_fractions(const Dataset& ds, double f_train, double f_val,
                                              double f_test, std::uint64_t seed) {
  if (f_train < 0 || f_val < 0 || f_test < 0 || f_train + f_val + f_test > 1.0 + 1e-12)
    throw SplitError("fractions must be non-negative and sum to at most 1");
  const double n = static_cast<double>(ds.size());
  auto count = [n](double f) { return static_cast<std::size_t>(f * n + 0.5); };
  std::size_t a = count(f_train), b = count(f_val), c = count(f_test);
  while (a + b + c > ds.size()) --a;
  return split_counts(ds, a, b, c, seed);
}

// ---- model config json ----

inline nlohmann::json model_config_to_json(const ModelConfig& cfg) {
  nlohmann::json j;
  j["r_cut"] = cfg.r_cut;
  j["n_basis"] = cfg.n_basis;
  j["n_layers"] = cfg.n_layers;
  j["hidden_irreps"] = cfg.hidden_irreps.to_string();
  j["feature_dim"] = cfg.feature_dim;
  j["l_max"] = cfg.l_max;
  j["species_list"] = cfg.species_list;
  j["head_mode"] = (cfg.head_mode == HeadMode::base) ? "base"
                   : (cfg.head_mode == HeadMode::mve2) ? "mve2"
                                                       : "mve8";
  j["variance_activation"] = (cfg.variance_activation == VarianceActivation::softplus) ? "softplus" : "exp";
  j["variance_floor"] = cfg.variance_floor;
  j["cov_jitter"] = cfg.cov_jitter;
  j["max_neighbors"] = cfg.max_neighbors;
  return j;
}

inline void reject_unknown_keys(const nlohmann::json& j, const std::vector<std::string>& allowed,
                                const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const auto& k : allowed)
      if (it.key() == k) ok = true;
    if (!ok) throw ParseError("unknown key '" + it.key() + "' in " + where);
  }
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j,
                      {"r_cut", "n_basis", "n_layers", "hidden_irreps", "feature_dim", "l_max",
                       "species_list", "head_mode", "variance_activation", "variance_floor",
                       "cov_jitter", "max_neighbors"},
                      "model config");
  ModelConfig cfg;
  if (j.contains("r_cut")) cfg.r_cut = j["r_cut"].get<double>();
  if (j.contains("n_basis")) cfg.n_basis = j["n_basis"].get<int>();
  if (j.contains("n_layers")) cfg.n_layers = j["n_layers"].get<int>();
  if (j.contains("hidden_irreps")) cfg.hidden_irreps = IrrepsSpec::parse(j["hidden_irreps"].get<std::string>());
  if (j.contains("feature_dim")) cfg.feature_dim = j["feature_dim"].get<int>();
  if (j.contains("l_max")) cfg.l_max = j["l_max"].get<int>();
  if (j.contains("species_list")) cfg.species_list = j["species_list"].get<std::vector<int>>();
  if (j.contains("head_mode")) {
    const std::string m = j["head_mode"].get<std::string>();
    if (m == "base") cfg.head_mode = HeadMode::base;
    else if (m == "mve2") cfg.head_mode = HeadMode::mve2;
    else if (m == "mve8") cfg.head_mode = HeadMode::mve8;
    else throw ParseError("unknown head_mode '" + m + "'");
  }
  if (j.contains("variance_activation")) {
    const std::string a = j["variance_activation"].get<std::string>();
    if (a == "softplus") cfg.variance_activation = VarianceActivation::softplus;
    else if (a == "exp") cfg.variance_activation = VarianceActivation::exp;
    else throw ParseError("unknown variance_activation '" + a + "'");
  }
  if (j.contains("variance_floor")) cfg.variance_floor = j["variance_floor"].get<double>();
  if (j.contains("cov_jitter")) cfg.cov_jitter = j["cov_jitter"].get<double>();
  if (j.contains("max_neighbors")) cfg.max_neighbors = j["max_neighbors"].get<int>();
  return cfg;
}

// ---- checkpoints ----
// magic "BAMR", u32 version, u64 header length, UTF-8 JSON header, then a
// contiguous little-endian f64 payload indexed by the header.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointArray {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> data;
};

struct Checkpoint {
  nlohmann::json meta;  // posterior kind, model config, hyperparameters
  std::vector<CheckpointArray> arrays;

  const CheckpointArray* find(const std::string& name) const {
    for (const auto& a : arrays)
      if (a.name == name) return &a;
    return nullptr;
  }
  const CheckpointArray& require(const std::string& name) const {
    if (const auto* a = find(name)) return *a;
    throw CorruptCheckpoint("checkpoint lacks array '" + name + "'");
  }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline std::uint32_t get_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}
inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}
inline void put_f64(std::string& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  put_u64(out, bits);
}
inline double get_f64(const unsigned char* p) {
  const std::uint64_t bits = get_u64(p);
  double d;
  std::memcpy(&d, &bits, 8);
  return d;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  nlohmann::json header;
  header["format_version"] = kCheckpointVersion;
  header["meta"] = ck.meta;
  nlohmann::json index = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& a : ck.arrays) {
    nlohmann::json e;
    e["name"] = a.name;
    e["shape"] = a.shape;
    e["dtype"] = "f64";
    e["offset"] = offset;
    e["count"] = a.data.size();
    index.push_back(e);
    offset += 8 * a.data.size();
  }
  header["arrays"] = index;
  const std::string htext = header.dump();

  std::string out = "BAMR";
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, htext.size());
  out += htext;
  for (const auto& a : ck.arrays)
    for (double d : a.data) detail::put_f64(out, d);
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 16 || bytes.compare(0, 4, "BAMR") != 0)
    throw CorruptCheckpoint("bad magic bytes");
  const std::uint32_t version = detail::get_u32(p + 4);
  if (version != kCheckpointVersion)
    throw IncompatibleCheckpoint("checkpoint format version " + std::to_string(version) +
                                 ", expected " + std::to_string(kCheckpointVersion));
  const std::uint64_t hlen = detail::get_u64(p + 8);
  if (16 + hlen > bytes.size()) throw CorruptCheckpoint("header length exceeds file size");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, hlen));
  } catch (const std::exception& e) {
    throw CorruptCheckpoint(std::string("unreadable header: ") + e.what());
  }
  if (!header.contains("format_version") || header["format_version"].get<std::uint32_t>() != version)
    throw CorruptCheckpoint("header/container version disagree");

  Checkpoint ck;
  if (header.contains("meta")) ck.meta = header["meta"];
  const std::size_t payload_start = 16 + static_cast<std::size_t>(hlen);
  const std::size_t payload_size = bytes.size() - payload_start;
  for (const auto& e : header["arrays"]) {
    CheckpointArray a;
    a.name = e["name"].get<std::string>();
    a.shape = e["shape"].get<std::vector<std::size_t>>();
    if (e["dtype"].get<std::string>() != "f64")
      throw IncompatibleCheckpoint("unsupported dtype " + e["dtype"].get<std::string>());
    const std::size_t offset = e["offset"].get<std::size_t>();
    const std::size_t count = e["count"].get<std::size_t>();
    if (count > payload_size / 8 || offset > payload_size - 8 * count)
      throw CorruptCheckpoint("array '" + a.name + "' overruns the payload");
    a.data.resize(count);
    for (std::size_t i = 0; i < count; ++i)
      a.data[i] = detail::get_f64(p + payload_start + offset + 8 * i);
    ck.arrays.push_back(std::move(a));
  }
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CorruptCheckpoint("cannot open " + path + " for writing");
  const std::string bytes = serialize_checkpoint(ck);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw CorruptCheckpoint("short write to " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CorruptCheckpoint("cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

// ---- posterior packing ----
// Each posterior kind maps to a tagged checkpoint holding the model config
// and its flat state arrays; order-sensitive pieces (the deviation buffer)
// keep their order through numbered array names.

inline Checkpoint pack_params(const ModelConfig& cfg, const std::vector<double>& theta) {
  Checkpoint ck;
  ck.meta["posterior"] = "none";
  ck.meta["model"] = model_config_to_json(cfg);
  ck.arrays.push_back({"theta", {theta.size()}, theta});
  return ck;
}

inline Checkpoint pack_ensemble(const ModelConfig& cfg, const EnsembleState& ens) {
  ens.validate();
  Checkpoint ck;
  ck.meta["posterior"] = "ensemble";
  ck.meta["model"] = model_config_to_json(cfg);
  ck.meta["members"] = ens.members.size();
  for (std::size_t i = 0; i < ens.members.size(); ++i)
    ck.arrays.push_back({"member" + std::to_string(i), {ens.members[i].size()}, ens.members[i]});
  return ck;
}

inline EnsembleState unpack_ensemble(const Checkpoint& ck) {
  if (ck.meta.value("posterior", "") != "ensemble")
    throw IncompatibleCheckpoint("checkpoint does not hold an ensemble");
  EnsembleState ens;
  const std::size_t n = ck.meta["members"].get<std::size_t>();
  for (std::size_t i = 0; i < n; ++i) ens.members.push_back(ck.require("member" + std::to_string(i)).data);
  ens.validate();
  return ens;
}

inline Checkpoint pack_swag(const ModelConfig& cfg, const SwagState& st) {
  Checkpoint ck;
  ck.meta["posterior"] = "swag";
  ck.meta["model"] = model_config_to_json(cfg);
  ck.meta["max_rank"] = st.max_rank;
  ck.meta["n_collected"] = st.n_collected;
  ck.meta["rank"] = st.dev_buffer.size();
  ck.arrays.push_back({"mean", {st.mean.size()}, st.mean});
  ck.arrays.push_back({"sq_mean", {st.sq_mean.size()}, st.sq_mean});
  for (std::size_t i = 0; i < st.dev_buffer.size(); ++i)
    ck.arrays.push_back({"dev" + std::to_string(i), {st.dev_buffer[i].size()}, st.dev_buffer[i]});
  return ck;
}

inline SwagState unpack_swag(const Checkpoint& ck) {
  if (ck.meta.value("posterior", "") != "swag")
    throw IncompatibleCheckpoint("checkpoint does not hold a SWAG state");
  SwagState st(ck.require("mean").data.size(), ck.meta["max_rank"].get<int>());
  st.mean = ck.require("mean").data;
  st.sq_mean = ck.require("sq_mean").data;
  st.n_collected = ck.meta["n_collected"].get<long>();
  const std::size_t rank = ck.meta["rank"].get<std::size_t>();
  for (std::size_t i = 0; i < rank; ++i) st.dev_buffer.push_back(ck.require("dev" + std::to_string(i)).data);
  return st;
}

inline Checkpoint pack_ivon(const ModelConfig& cfg, const IvonState& st) {
  Checkpoint ck;
  ck.meta["posterior"] = "ivon";
  ck.meta["model"] = model_config_to_json(cfg);
  ck.meta["t"] = st.t;
  ck.meta["hyper"] = {{"lr", st.hyper.lr},
                      {"beta1", st.hyper.beta1},
                      {"rho", st.hyper.rho},
                      {"delta", st.hyper.delta},
                      {"ess", st.hyper.ess}};
  ck.arrays.push_back({"m", {st.m.size()}, st.m});
  ck.arrays.push_back({"h", {st.h.size()}, st.h});
  ck.arrays.push_back({"g", {st.g.size()}, st.g});
  return ck;
}

inline IvonState unpack_ivon(const Checkpoint& ck) {
  if (ck.meta.value("posterior", "") != "ivon")
    throw IncompatibleCheckpoint("checkpoint does not hold an IVON state");
  IvonState st;
  st.m = ck.require("m").data;
  st.h = ck.require("h").data;
  st.g = ck.require("g").data;
  st.t = ck.meta["t"].get<long>();
  const auto& hy = ck.meta["hyper"];
  st.hyper.lr = hy["lr"].get<double>();
  st.hyper.beta1 = hy["beta1"].get<double>();
  st.hyper.rho = hy["rho"].get<double>();
  st.hyper.delta = hy["delta"].get<double>();
  st.hyper.ess = hy["ess"].get<double>();
  st.hyper.validate();
  return st;
}

inline Checkpoint pack_laplace(const ModelConfig& cfg, const LaplaceState& st) {
  Checkpoint ck;
  ck.meta["posterior"] = "laplace";
  ck.meta["model"] = model_config_to_json(cfg);
  ck.meta["prior_precision"] = st.prior_precision;
  ck.arrays.push_back({"theta_map", {st.theta_map.size()}, st.theta_map});
  ck.arrays.push_back({"ggn_diag", {st.ggn_diag.size()}, st.ggn_diag});
  std::vector<double> mask(st.head_mask.begin(), st.head_mask.end());
  ck.arrays.push_back({"head_mask", {mask.size()}, mask});
  return ck;
}

inline LaplaceState unpack_laplace(const Checkpoint& ck) {
  if (ck.meta.value("posterior", "") != "laplace")
    throw IncompatibleCheckpoint("checkpoint does not hold a Laplace state");
  LaplaceState st;
  st.theta_map = ck.require("theta_map").data;
  st.ggn_diag = ck.require("ggn_diag").data;
  st.prior_precision = ck.meta["prior_precision"].get<double>();
  for (double v : ck.require("head_mask").data) st.head_mask.push_back(v != 0.0);
  return st;
}

inline ModelConfig checkpoint_model_config(const Checkpoint& ck) {
  if (!ck.meta.contains("model")) throw CorruptCheckpoint("checkpoint lacks a model config");
  return model_config_from_json(ck.meta["model"]);
}

}  // namespace bam
