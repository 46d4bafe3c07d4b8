#pragma once

// Molecular data model: coordinates (Angstrom), element indices and a
// canonical bond table, plus the .mol3d text format and a seeded generator of
// small synthetic molecules.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <utility>
#include <vector>

#include "gsrd/errors.hpp"
#include "gsrd/nn.hpp"
#include "gsrd/tensor.hpp"

namespace gsrd {

using Vec3 = std::array<double, 3>;

inline constexpr std::array<std::string_view, 10> kElements = {"H", "C", "N", "O", "F",
                                                               "S", "Cl", "P", "Br", "I"};
inline constexpr std::size_t kNumElements = kElements.size();

/// Bond categories. 0 ("none") is never stored; it is what featurization
/// assigns to unbonded pairs and the diagonal.
enum BondOrder : int { kNoBond = 0, kSingle = 1, kDouble = 2, kTriple = 3, kAromatic = 4 };
inline constexpr std::size_t kNumBondCategories = 5;

inline int element_index(std::string_view symbol) {
  for (std::size_t k = 0; k < kElements.size(); ++k)
    if (kElements[k] == symbol) return static_cast<int>(k);
  throw VocabularyError("unknown element symbol '" + std::string(symbol) + "'");
}

struct Bond {
  std::size_t i = 0;
  std::size_t j = 0;
  int order = kSingle;
  friend bool operator==(const Bond&, const Bond&) = default;
};

struct MolGraph {
  std::vector<Vec3> coords;
  std::vector<int> atom_types;
  std::vector<Bond> bonds;  // canonical: i < j, sorted
  std::map<std::string, double> labels;
  std::vector<Vec3> forces;  // empty, or one per atom (eV/Angstrom)

  std::size_t size() const { return coords.size(); }
  bool has_forces() const { return !forces.empty(); }

  double distance(std::size_t a, std::size_t b) const {
    double s = 0.0;
    for (int k = 0; k < 3; ++k) s += (coords[a][k] - coords[b][k]) * (coords[a][k] - coords[b][k]);
    return std::sqrt(s);
  }

  /// Bond category of an unordered pair (kNoBond when unbonded or i == j).
  int bond_order(std::size_t a, std::size_t b) const {
    if (a > b) std::swap(a, b);
    for (const auto& bd : bonds)
      if (bd.i == a && bd.j == b) return bd.order;
    return kNoBond;
  }

  /// N x N bond-category matrix, row-major.
  std::vector<int> bond_matrix() const {
    const std::size_t n = size();
    std::vector<int> m(n * n, kNoBond);
    for (const auto& bd : bonds) {
      m[bd.i * n + bd.j] = bd.order;
      m[bd.j * n + bd.i] = bd.order;
    }
    return m;
  }

  Value coords_value() const {
    std::vector<double> d;
    d.reserve(size() * 3);
    for (const auto& c : coords) d.insert(d.end(), c.begin(), c.end());
    return Value::constant(size(), 3, std::move(d));
  }
};

/// Orders every bond as i < j and sorts the table.
inline void canonicalize_bonds(MolGraph& g) {
  for (auto& b : g.bonds)
    if (b.i > b.j) std::swap(b.i, b.j);
  std::sort(g.bonds.begin(), g.bonds.end(),
            [](const Bond& a, const Bond& b) { return std::tie(a.i, a.j, a.order) < std::tie(b.i, b.j, b.order); });
}

/// Every invariant breach, as human-readable strings. Empty means valid.
inline std::vector<std::string> validate(const MolGraph& g) {
  std::vector<std::string> v;
  const std::size_t n = g.size();
  if (n == 0) v.push_back("empty molecule: at least one atom is required");
  if (g.atom_types.size() != n) v.push_back("atom type count differs from coordinate count");
  for (std::size_t a = 0; a < g.atom_types.size(); ++a)
    if (g.atom_types[a] < 0 || static_cast<std::size_t>(g.atom_types[a]) >= kNumElements)
      v.push_back("atom " + std::to_string(a) + ": element index outside vocabulary");
  for (std::size_t a = 0; a < n; ++a)
    for (double c : g.coords[a])
      if (!std::isfinite(c)) {
        v.push_back("atom " + std::to_string(a) + ": non-finite coordinate");
        break;
      }
  std::set<std::pair<std::size_t, std::size_t>> seen;
  for (const auto& b : g.bonds) {
    std::string tag = "bond (" + std::to_string(b.i) + "," + std::to_string(b.j) + ")";
    if (b.i >= n || b.j >= n) {
      v.push_back(tag + ": endpoint out of range");
      continue;
    }
    if (b.i == b.j) {
      v.push_back(tag + ": self-bond");
      continue;
    }
    if (b.i > b.j) v.push_back(tag + ": not canonical (i > j)");
    if (b.order < kSingle || b.order > kAromatic) v.push_back(tag + ": bond order outside 1..4");
    auto key = std::minmax(b.i, b.j);
    if (!seen.insert({key.first, key.second}).second) v.push_back(tag + ": duplicate bond");
  }
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = a + 1; b < n; ++b)
      if (!(g.distance(a, b) > 0.0))
        v.push_back("atoms " + std::to_string(a) + "," + std::to_string(b) + ": zero distance");
  if (!g.forces.empty() && g.forces.size() != n) v.push_back("force count differs from atom count");
  for (const auto& [name, value] : g.labels)
    if (!std::isfinite(value)) v.push_back("label " + name + ": non-finite");
  return v;
}

inline void require_valid(const MolGraph& g, const std::string& context = "") {
  auto v = validate(g);
  if (v.empty()) return;
  std::string msg = context.empty() ? "invalid molecule" : context;
  for (const auto& s : v) msg += "; " + s;
  throw ValidationError(msg);
}

/// Molecule restricted to `keep` (in the given order), with induced bonds.
inline MolGraph select_atoms(const MolGraph& g, const std::vector<std::size_t>& keep) {
  MolGraph out;
  std::vector<std::size_t> remap(g.size(), g.size());
  for (std::size_t k = 0; k < keep.size(); ++k) {
    remap[keep[k]] = k;
    out.coords.push_back(g.coords[keep[k]]);
    out.atom_types.push_back(g.atom_types[keep[k]]);
    if (g.has_forces()) out.forces.push_back(g.forces[keep[k]]);
  }
  for (const auto& b : g.bonds)
    if (remap[b.i] < g.size() && remap[b.j] < g.size()) out.bonds.push_back({remap[b.i], remap[b.j], b.order});
  canonicalize_bonds(out);
  out.labels = g.labels;
  return out;
}

/// Relabels atoms so that old atom i becomes new atom perm[i].
inline MolGraph permute_atoms(const MolGraph& g, const std::vector<std::size_t>& perm) {
  MolGraph out = g;
  for (std::size_t i = 0; i < g.size(); ++i) {
    out.coords[perm[i]] = g.coords[i];
    out.atom_types[perm[i]] = g.atom_types[i];
    if (g.has_forces()) out.forces[perm[i]] = g.forces[i];
  }
  for (auto& b : out.bonds) {
    b.i = perm[b.i];
    b.j = perm[b.j];
  }
  canonicalize_bonds(out);
  return out;
}

inline MolGraph with_coords(MolGraph g, std::vector<Vec3> coords) {
  g.coords = std::move(coords);
  return g;
}

// ---------------------------------------------------------------------------
// Masking plan (sampled by trainkit)

/// Masked atom set (sorted) plus coordinate noise for the unmasked atoms.
struct MaskPlan {
  std::vector<std::size_t> masked;
  std::vector<Vec3> noise;  // one per atom, zero at masked indices
  std::uint64_t seed = 0;

  std::vector<std::size_t> unmasked(std::size_t n) const {
    std::vector<std::size_t> out;
    std::size_t m = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (m < masked.size() && masked[m] == i) {
        ++m;
        continue;
      }
      out.push_back(i);
    }
    return out;
  }
  bool is_masked(std::size_t i) const { return std::binary_search(masked.begin(), masked.end(), i); }
};

inline std::vector<std::string> validate(const MaskPlan& plan, std::size_t n) {
  std::vector<std::string> v;
  if (plan.masked.empty()) v.push_back("mask set is empty");
  if (plan.masked.size() + 1 > n) v.push_back("mask leaves no unmasked atom");
  if (!std::is_sorted(plan.masked.begin(), plan.masked.end()) ||
      std::adjacent_find(plan.masked.begin(), plan.masked.end()) != plan.masked.end())
    v.push_back("mask indices not strictly increasing");
  for (std::size_t i : plan.masked)
    if (i >= n) v.push_back("mask index " + std::to_string(i) + " out of range");
  if (plan.noise.size() != n) v.push_back("noise length differs from atom count");
  for (std::size_t i = 0; i < plan.noise.size(); ++i) {
    for (double c : plan.noise[i])
      if (!std::isfinite(c)) v.push_back("non-finite noise at atom " + std::to_string(i));
    if (plan.is_masked(i) && (plan.noise[i][0] != 0.0 || plan.noise[i][1] != 0.0 || plan.noise[i][2] != 0.0))
      v.push_back("nonzero noise on masked atom " + std::to_string(i));
  }
  return v;
}

// ---------------------------------------------------------------------------
// .mol3d text format

namespace detail {

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

inline double parse_float(std::string_view tok, std::size_t line) {
  std::string s(tok);
  char* end = nullptr;
  double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) throw ParseError(line, "malformed number '" + s + "'");
  if (!std::isfinite(v)) throw ParseError(line, "non-finite number '" + s + "'");
  return v;
}

inline std::size_t parse_index(std::string_view tok, std::size_t line) {
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || ptr != tok.data() + tok.size())
    throw ParseError(line, "malformed index '" + std::string(tok) + "'");
  return v;
}

}  // namespace detail

/// Parses a .mol3d document. Records are separated by blank lines; the
/// "#mol3d" header and "natoms" line are optional, but a natoms line must
/// agree with the atom count.
inline std::vector<MolGraph> parse_mol3d(std::string_view text) {
  std::vector<MolGraph> out;
  MolGraph cur;
  bool open = false;
  std::optional<std::size_t> declared;
  std::size_t record_line = 0;
  std::vector<bool> force_seen;

  auto finish = [&](std::size_t line) {
    if (!open) return;
    if (declared && *declared != cur.size())
      throw ParseError(line, "natoms " + std::to_string(*declared) + " but " + std::to_string(cur.size()) +
                                 " atom lines");
    if (!cur.forces.empty()) {
      if (std::find(force_seen.begin(), force_seen.end(), false) != force_seen.end())
        throw ValidationError("record at line " + std::to_string(record_line) + ": force lines must cover every atom");
    }
    for (const auto& b : cur.bonds)
      if (b.i >= cur.size() || b.j >= cur.size())
        throw ValidationError("record at line " + std::to_string(record_line) + ": bond index out of range (" +
                              std::to_string(b.i) + "," + std::to_string(b.j) + ")");
    canonicalize_bonds(cur);
    require_valid(cur, "record at line " + std::to_string(record_line));
    out.push_back(std::move(cur));
    cur = MolGraph{};
    open = false;
    declared.reset();
    force_seen.clear();
  };

  std::size_t lineno = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = (nl == std::string_view::npos) ? text.size() + 1 : nl + 1;
    ++lineno;
    auto tok = detail::split_ws(line);
    if (tok.empty()) {
      finish(lineno);
      continue;
    }
    if (!open) {
      open = true;
      record_line = lineno;
    }
    const std::string_view key = tok[0];
    if (key == "#mol3d") {
      if (!cur.coords.empty() || declared) throw ParseError(lineno, "header inside a record (missing blank line?)");
      if (tok.size() != 2) throw ParseError(lineno, "expected '#mol3d <record-index>'");
      detail::parse_index(tok[1], lineno);
    } else if (key == "natoms") {
      if (tok.size() != 2) throw ParseError(lineno, "expected 'natoms <N>'");
      declared = detail::parse_index(tok[1], lineno);
    } else if (key == "atom") {
      if (tok.size() != 5) throw ParseError(lineno, "expected 'atom <SYMBOL> <x> <y> <z>'");
      cur.atom_types.push_back(element_index(tok[1]));
      cur.coords.push_back({detail::parse_float(tok[2], lineno), detail::parse_float(tok[3], lineno),
                            detail::parse_float(tok[4], lineno)});
    } else if (key == "bond") {
      if (tok.size() != 4) throw ParseError(lineno, "expected 'bond <i> <j> <order>'");
      Bond b{detail::parse_index(tok[1], lineno), detail::parse_index(tok[2], lineno),
             static_cast<int>(detail::parse_index(tok[3], lineno))};
      if (b.order < kSingle || b.order > kAromatic) throw ParseError(lineno, "bond order must be 1..4");
      cur.bonds.push_back(b);
    } else if (key == "label") {
      if (tok.size() != 3) throw ParseError(lineno, "expected 'label <name> <float>'");
      cur.labels[std::string(tok[1])] = detail::parse_float(tok[2], lineno);
    } else if (key == "force") {
      if (tok.size() != 5) throw ParseError(lineno, "expected 'force <i> <fx> <fy> <fz>'");
      std::size_t i = detail::parse_index(tok[1], lineno);
      const std::size_t n = declared ? *declared : cur.size();
      if (i >= n) throw ValidationError("line " + std::to_string(lineno) + ": force index out of range");
      if (cur.forces.empty()) {
        cur.forces.assign(n, Vec3{0, 0, 0});
        force_seen.assign(n, false);
      }
      if (force_seen[i]) throw ValidationError("line " + std::to_string(lineno) + ": repeated force index");
      force_seen[i] = true;
      cur.forces[i] = {detail::parse_float(tok[2], lineno), detail::parse_float(tok[3], lineno),
                       detail::parse_float(tok[4], lineno)};
    } else {
      throw ParseError(lineno, "unknown line kind '" + std::string(key) + "'");
    }
  }
  finish(lineno);
  return out;
}

inline std::string write_mol3d(const std::vector<MolGraph>& graphs) {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t r = 0; r < graphs.size(); ++r) {
    const auto& g = graphs[r];
    os << "#mol3d " << r << "\n";
    os << "natoms " << g.size() << "\n";
    for (std::size_t a = 0; a < g.size(); ++a)
      os << "atom " << kElements[static_cast<std::size_t>(g.atom_types[a])] << ' ' << g.coords[a][0] << ' '
         << g.coords[a][1] << ' ' << g.coords[a][2] << "\n";
    for (const auto& b : g.bonds) os << "bond " << b.i << ' ' << b.j << ' ' << b.order << "\n";
    for (const auto& [name, value] : g.labels) os << "label " << name << ' ' << value << "\n";
    for (std::size_t a = 0; a < g.forces.size(); ++a)
      os << "force " << a << ' ' << g.forces[a][0] << ' ' << g.forces[a][1] << ' ' << g.forces[a][2] << "\n";
    os << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Synthetic corpus

struct AtomRange {
  std::size_t min = 5;
  std::size_t max = 12;
};

namespace detail {

inline Vec3 random_unit(Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  for (;;) {
    Vec3 v{n(rng), n(rng), n(rng)};
    double s = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    if (s > 1e-9) return {v[0] / s, v[1] / s, v[2] / s};
  }
}

inline double dist3(const Vec3& a, const Vec3& b) {
  return std::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2]));
}

// Non-bonded clearance used while placing atoms; stricter than the 0.8 A floor.
inline constexpr double kPlacementClearance = 1.2;
inline constexpr int kMaxPlacementAttempts = 1000;

inline bool clear_of(const std::vector<Vec3>& placed, const Vec3& p, std::size_t skip) {
  for (std::size_t k = 0; k < placed.size(); ++k)
    if (k != skip && dist3(placed[k], p) < kPlacementClearance) return false;
  return true;
}

inline MolGraph generate_one(Rng& rng, AtomRange range) {
  std::uniform_int_distribution<std::size_t> pick_n(range.min, range.max);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const std::size_t n = pick_n(rng);
  std::uniform_int_distribution<std::size_t> pick_h(0, n / 2);
  std::size_t n_h = std::min(pick_h(rng), n - 2);
  const std::size_t heavy = n - n_h;
  const bool ring = heavy >= 5 && unif(rng) < 0.4;

  MolGraph g;
  auto heavy_element = [&] {
    double u = unif(rng);
    return u < 0.6 ? element_index("C") : (u < 0.8 ? element_index("N") : element_index("O"));
  };
  for (std::size_t k = 0; k < heavy; ++k) g.atom_types.push_back(heavy_element());

  auto chain_order = [&] {
    double u = unif(rng);
    return u < 0.7 ? kSingle : (u < 0.9 ? kDouble : kTriple);
  };

  std::vector<Vec3> pos;
  if (ring) {
    // Regular polygon in a random plane; chords of a regular polygon are all
    // longer than its side, so only the bonded neighbours sit at bond length.
    std::uniform_real_distribution<double> side(1.3, 1.55);
    const double s = side(rng);
    const double radius = s / (2.0 * std::sin(std::numbers::pi / static_cast<double>(heavy)));
    Vec3 u = random_unit(rng);
    Vec3 t = random_unit(rng);
    double dot = u[0] * t[0] + u[1] * t[1] + u[2] * t[2];
    Vec3 v{t[0] - dot * u[0], t[1] - dot * u[1], t[2] - dot * u[2]};
    double vn = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    if (vn < 1e-6) v = {u[1], -u[0], 0.0}, vn = std::sqrt(u[0] * u[0] + u[1] * u[1]);
    for (double& c : v) c /= vn;
    for (std::size_t k = 0; k < heavy; ++k) {
      double a = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(heavy);
      pos.push_back({radius * (std::cos(a) * u[0] + std::sin(a) * v[0]),
                     radius * (std::cos(a) * u[1] + std::sin(a) * v[1]),
                     radius * (std::cos(a) * u[2] + std::sin(a) * v[2])});
    }
    const bool aromatic = unif(rng) < 0.5;
    for (std::size_t k = 0; k < heavy; ++k) {
      std::size_t a = k, b = (k + 1) % heavy;
      g.bonds.push_back({std::min(a, b), std::max(a, b), aromatic ? kAromatic : (unif(rng) < 0.75 ? kSingle : kDouble)});
    }
  } else {
    std::uniform_real_distribution<double> len(1.1, 1.6);
    pos.push_back({0, 0, 0});
    Vec3 prev_dir = random_unit(rng);
    for (std::size_t k = 1; k < heavy; ++k) {
      bool placed = false;
      for (int attempt = 0; attempt < kMaxPlacementAttempts && !placed; ++attempt) {
        Vec3 d = random_unit(rng);
        double cosang = d[0] * prev_dir[0] + d[1] * prev_dir[1] + d[2] * prev_dir[2];
        if (cosang < 0.0 || cosang > 0.7) continue;  // keep the chain extended
        double l = len(rng);
        Vec3 p{pos[k - 1][0] + l * d[0], pos[k - 1][1] + l * d[1], pos[k - 1][2] + l * d[2]};
        if (!clear_of(pos, p, k - 1)) continue;
        pos.push_back(p);
        prev_dir = d;
        placed = true;
      }
      if (!placed) throw GenerationError("could not place backbone atom after 1000 attempts");
      g.bonds.push_back({k - 1, k, chain_order()});
    }
  }

  std::uniform_int_distribution<std::size_t> pick_parent(0, heavy - 1);
  std::uniform_real_distribution<double> hlen(1.0, 1.15);
  std::vector<int> h_count(heavy, 0);
  for (std::size_t k = 0; k < n_h; ++k) {
    bool placed = false;
    for (int attempt = 0; attempt < kMaxPlacementAttempts && !placed; ++attempt) {
      std::size_t parent = pick_parent(rng);
      if (h_count[parent] >= 3) continue;
      Vec3 d = random_unit(rng);
      double l = hlen(rng);
      Vec3 p{pos[parent][0] + l * d[0], pos[parent][1] + l * d[1], pos[parent][2] + l * d[2]};
      if (!clear_of(pos, p, parent)) continue;
      pos.push_back(p);
      g.atom_types.push_back(element_index("H"));
      g.bonds.push_back({parent, pos.size() - 1, kSingle});
      ++h_count[parent];
      placed = true;
    }
    if (!placed) throw GenerationError("could not place hydrogen after 1000 attempts");
  }

  Vec3 centroid{0, 0, 0};
  for (const auto& p : pos)
    for (int c = 0; c < 3; ++c) centroid[c] += p[c] / static_cast<double>(pos.size());
  for (auto& p : pos)
    for (int c = 0; c < 3; ++c) p[c] -= centroid[c];
  g.coords = std::move(pos);
  canonicalize_bonds(g);
  return g;
}

}  // namespace detail

/// Deterministic corpus of centred chain/ring molecules over {C, N, O, H}.
inline std::vector<MolGraph> generate_synthetic(std::uint64_t seed, std::size_t count, AtomRange range) {
  if (range.min < 3 || range.max > 32 || range.min > range.max)
    throw DomainError("atom range must lie within [3, 32]");
  Rng rng(seed);
  std::vector<MolGraph> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    out.push_back(detail::generate_one(rng, range));
    require_valid(out.back(), "generated molecule " + std::to_string(k));
  }
  return out;
}

/// Smallest inter-atomic distance (infinity for a single atom).
inline double min_distance(const MolGraph& g) {
  double m = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < g.size(); ++a)
    for (std::size_t b = a + 1; b < g.size(); ++b) m = std::min(m, g.distance(a, b));
  return m;
}

// ---------------------------------------------------------------------------
// Toy potential used to label synthetic corpora with energies and forces.
// E = sum_bonds 0.5 k (r - r0)^2 + sum_nonbonded A exp(-r / rho)

namespace detail {
inline double equilibrium_length(int order) {
  switch (order) {
    case kDouble: return 1.34;
    case kTriple: return 1.2;
    case kAromatic: return 1.4;
    default: return 1.45;
  }
}
inline constexpr double kBondStiffness = 2.0;
inline constexpr double kRepulsionA = 0.5;
inline constexpr double kRepulsionRho = 0.6;
}  // namespace detail

inline double toy_energy(const MolGraph& g, std::vector<Vec3>* forces = nullptr) {
  const std::size_t n = g.size();
  auto bm = g.bond_matrix();
  double e = 0.0;
  if (forces) forces->assign(n, Vec3{0, 0, 0});
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = a + 1; b < n; ++b) {
      double r = g.distance(a, b);
      int order = bm[a * n + b];
      double de_dr;
      if (order != kNoBond) {
        bool has_h = g.atom_types[a] == 0 || g.atom_types[b] == 0;
        double r0 = has_h ? 1.08 : detail::equilibrium_length(order);
        e += 0.5 * detail::kBondStiffness * (r - r0) * (r - r0);
        de_dr = detail::kBondStiffness * (r - r0);
      } else {
        double term = detail::kRepulsionA * std::exp(-r / detail::kRepulsionRho);
        e += term;
        de_dr = -term / detail::kRepulsionRho;
      }
      if (forces) {
        for (int c = 0; c < 3; ++c) {
          double u = (g.coords[a][c] - g.coords[b][c]) / r;
          (*forces)[a][c] -= de_dr * u;
          (*forces)[b][c] += de_dr * u;
        }
      }
    }
  return e;
}

/// Attaches label "energy" and per-atom forces from the toy potential.
inline void attach_toy_labels(MolGraph& g) {
  std::vector<Vec3> f;
  g.labels["energy"] = toy_energy(g, &f);
  g.forces = std::move(f);
}

}  // namespace gsrd
