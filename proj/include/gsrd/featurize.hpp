#pragma once

// Embedding layer in front of the 3D encoder: cosine-cutoff radial basis
// expansion of distances, node / neighbourhood / atomic embeddings, and bond
// category embeddings for every atom pair.

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "gsrd/molgraph.hpp"
#include "gsrd/nn.hpp"
#include "gsrd/tensor.hpp"

namespace gsrd {

/// Fixed radial basis placement. mu and beta are not trained.
struct RbfSpec {
  double d_cut = 5.0;
  std::vector<double> mu;
  std::vector<double> beta;

  std::size_t size() const { return mu.size(); }

  /// mu evenly spaced over [exp(-d_cut), 1], beta = (2 (1 - exp(-d_cut)) / k)^-2.
  static RbfSpec exp_normal(std::size_t k, double d_cut) {
    if (k == 0) throw DomainError("rbf channel count must be positive");
    if (!(d_cut > 0)) throw DomainError("cutoff distance must be positive");
    RbfSpec s;
    s.d_cut = d_cut;
    const double lo = std::exp(-d_cut);
    for (std::size_t i = 0; i < k; ++i)
      s.mu.push_back(k == 1 ? 1.0 : lo + (1.0 - lo) * static_cast<double>(i) / static_cast<double>(k - 1));
    const double width = 2.0 * (1.0 - lo) / static_cast<double>(k);
    s.beta.assign(k, 1.0 / (width * width));
    return s;
  }

  void check() const {
    if (!(d_cut > 0)) throw DomainError("cutoff distance must be positive");
    if (mu.size() != beta.size() || mu.empty()) throw DimensionError("rbf mu/beta length mismatch");
    for (std::size_t i = 0; i < mu.size(); ++i) {
      if (!(beta[i] > 0)) throw DomainError("rbf beta must be positive");
      if (mu[i] < std::exp(-d_cut) || mu[i] > 1.0) throw DomainError("rbf mu outside [exp(-d_cut), 1]");
      if (i > 0 && !(mu[i] > mu[i - 1])) throw DomainError("rbf mu must be strictly increasing");
    }
  }
};

/// Smooth cosine cutoff: 1/2 (cos(pi d / d_cut) + 1) inside the cutoff, 0 outside.
inline double cutoff(double d, double d_cut) {
  if (d < 0) throw DomainError("cutoff of negative distance " + std::to_string(d));
  if (d > d_cut) return 0.0;
  return 0.5 * (std::cos(std::numbers::pi * d / d_cut) + 1.0);
}

inline std::vector<double> rbf_expand(double d, const RbfSpec& spec) {
  const double phi = cutoff(d, spec.d_cut);
  const double e = std::exp(-d);
  std::vector<double> out(spec.size());
  for (std::size_t k = 0; k < spec.size(); ++k) {
    const double t = e - spec.mu[k];
    out[k] = phi * std::exp(-spec.beta[k] * t * t);
  }
  return out;
}

/// Differentiable radial basis of a column of distances: [P x 1] -> [P x k].
inline Value rbf_expand(const Value& dist, const RbfSpec& spec) {
  if (dist.cols() != 1) throw DimensionError("rbf_expand expects a distance column, got " + dist.shape());
  const std::size_t p = dist.rows(), k = spec.size();
  std::vector<double> out(p * k);
  auto dd = dist.data();
  for (std::size_t r = 0; r < p; ++r) {
    auto row = rbf_expand(dd[r], spec);
    std::copy(row.begin(), row.end(), out.begin() + static_cast<std::ptrdiff_t>(r * k));
  }
  return detail::make_result(p, k, std::move(out), {dist.node()}, "rbf", [p, k, spec](detail::Node& self) {
    auto& gp = self.parents[0]->grad_buffer();
    const auto& d = self.parents[0]->data;
    for (std::size_t r = 0; r < p; ++r) {
      if (d[r] > spec.d_cut) continue;
      const double phi = cutoff(d[r], spec.d_cut);
      const double dphi = -0.5 * std::sin(std::numbers::pi * d[r] / spec.d_cut) * std::numbers::pi / spec.d_cut;
      const double e = std::exp(-d[r]);
      double acc = 0.0;
      for (std::size_t c = 0; c < k; ++c) {
        const double t = e - spec.mu[c];
        const double gauss = std::exp(-spec.beta[c] * t * t);
        acc += self.grad[r * k + c] * gauss * (dphi + 2.0 * phi * spec.beta[c] * t * e);
      }
      gp[r] += acc;
    }
  });
}

// ---------------------------------------------------------------------------
// Pair bookkeeping and geometry

/// Ordered atom pairs (i, j), i-major. Atom i = src receives from j = dst.
struct PairList {
  std::size_t n = 0;
  std::vector<std::size_t> src;
  std::vector<std::size_t> dst;
  std::size_t size() const { return src.size(); }
};

inline PairList dense_pairs(std::size_t n, bool include_self = false) {
  PairList p;
  p.n = n;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (include_self || i != j) {
        p.src.push_back(i);
        p.dst.push_back(j);
      }
  return p;
}

struct Geometry {
  PairList pairs;
  Value dist;  // [P x 1], |r_i - r_j|
  Value dir;   // [P x 3], (r_i - r_j) / |r_i - r_j|
  Value rbf;   // [P x k]
  bool allow_coincident = false;
};

/// Distances, unit directions and radial basis for every ordered pair.
/// Coincident atoms raise GeometryError unless `allow_coincident`, in which
/// case the coordinates are treated as constants and such pairs get a zero
/// direction.
inline Geometry make_geometry(const Value& coords, const RbfSpec& spec, bool allow_coincident = false) {
  if (coords.cols() != 3) throw DimensionError("coordinates must be N x 3, got " + coords.shape());
  Geometry g;
  g.pairs = dense_pairs(coords.rows());
  g.allow_coincident = allow_coincident;
  const std::size_t p = g.pairs.size();
  auto cd = coords.data();
  bool coincident = false;
  for (std::size_t k = 0; k < p; ++k) {
    double s = 0.0;
    for (int c = 0; c < 3; ++c) {
      double t = cd[g.pairs.src[k] * 3 + c] - cd[g.pairs.dst[k] * 3 + c];
      s += t * t;
    }
    if (!(s > 0.0)) coincident = true;
  }
  if (coincident && !allow_coincident)
    throw GeometryError("coincident atoms: direction between them is undefined");
  if (coincident) {
    std::vector<double> dist(p), dir(p * 3, 0.0);
    for (std::size_t k = 0; k < p; ++k) {
      double s = 0.0, t[3];
      for (int c = 0; c < 3; ++c) {
        t[c] = cd[g.pairs.src[k] * 3 + c] - cd[g.pairs.dst[k] * 3 + c];
        s += t[c] * t[c];
      }
      dist[k] = std::sqrt(s);
      if (dist[k] > 0)
        for (int c = 0; c < 3; ++c) dir[k * 3 + c] = t[c] / dist[k];
    }
    g.dist = Value::constant(p, 1, std::move(dist));
    g.dir = Value::constant(p, 3, std::move(dir));
  } else {
    Value diff = sub(gather_rows(coords, g.pairs.src), gather_rows(coords, g.pairs.dst));
    g.dist = sqrt(sum_cols(square(diff)));
    g.dir = div(diff, g.dist);
  }
  g.rbf = rbf_expand(g.dist, spec);
  return g;
}

// ---------------------------------------------------------------------------
// Embeddings

inline Value one_hot_atoms(const MolGraph& g) {
  std::vector<double> d(g.size() * kNumElements, 0.0);
  for (std::size_t a = 0; a < g.size(); ++a) d[a * kNumElements + static_cast<std::size_t>(g.atom_types[a])] = 1.0;
  return Value::constant(g.size(), kNumElements, std::move(d));
}

/// Weights of the embedding layer. Embed^node and Embed^neigh are single
/// linear maps over [coords (3); one-hot element (10)].
struct FeatureParams {
  std::size_t d_model = 256;
  RbfSpec rbf;
  Value node;    // [13 x d]
  Value neigh;   // [13 x d]
  Value radial;  // W^r, [k x d]
  Value atomic;  // W^a, [2d x d]
  Value edge;    // [5 x d], rows none/single/double/triple/aromatic

  FeatureParams() = default;
  FeatureParams(ParamStore& store, const std::string& prefix, std::size_t d, RbfSpec spec, Rng& rng)
      : d_model(d), rbf(std::move(spec)) {
    rbf.check();
    const std::size_t in = 3 + kNumElements;
    node = store.add_normal(prefix + ".embed_node", in, d, rng);
    neigh = store.add_normal(prefix + ".embed_neigh", in, d, rng);
    radial = store.add_normal(prefix + ".w_radial", rbf.size(), d, rng);
    atomic = store.add_normal(prefix + ".w_atomic", 2 * d, d, rng);
    edge = store.add_normal(prefix + ".embed_edge", kNumBondCategories, d, rng, std::sqrt(5.0));
  }
};

struct AtomEmbedding {
  Value node;    // e^node [N x d]
  Value neigh;   // e^neigh [N x d]
  Value atomic;  // e^atomic [N x d]
};

inline AtomEmbedding embed_atoms_detailed(const MolGraph& g, const Value& coords, const Geometry& geom,
                                          const FeatureParams& fp) {
  Value inputs = concat_cols({coords, one_hot_atoms(g)});
  AtomEmbedding e;
  e.node = matmul(inputs, fp.node);
  Value neigh_src = matmul(inputs, fp.neigh);
  Value filt = matmul(geom.rbf, fp.radial);
  Value msg = mul(gather_rows(neigh_src, geom.pairs.dst), filt);
  e.neigh = segment_sum(msg, geom.pairs.src, g.size());
  e.atomic = matmul(concat_cols({e.node, e.neigh}), fp.atomic);
  return e;
}

/// e^atomic for every atom, using the graph's own coordinates.
inline Value embed_atoms(const MolGraph& g, const FeatureParams& fp) {
  Value coords = g.coords_value();
  Geometry geom = make_geometry(coords, fp.rbf);
  return embed_atoms_detailed(g, coords, geom, fp).atomic;
}

/// Bond category of every ordered pair.
inline std::vector<std::size_t> pair_categories(const MolGraph& g, const PairList& pairs) {
  auto bm = g.bond_matrix();
  std::vector<std::size_t> cat(pairs.size());
  for (std::size_t k = 0; k < pairs.size(); ++k)
    cat[k] = static_cast<std::size_t>(bm[pairs.src[k] * g.size() + pairs.dst[k]]);
  return cat;
}

/// Edge-table rows for the given ordered pairs.
inline Value pair_edge_features(const MolGraph& g, const PairList& pairs, const Value& table) {
  return gather_rows(table, pair_categories(g, pairs));
}

/// e^edge over all N*N ordered pairs including the diagonal; row i*N + j.
inline Value embed_edges(const MolGraph& g, const FeatureParams& fp) {
  return pair_edge_features(g, dense_pairs(g.size(), true), fp.edge);
}

}  // namespace gsrd
