#pragma once

// Scripted analyses on frozen or partially frozen models: the reconstruction
// leakage comparison, masked-coordinate probing, position-encoding
// reconstruction and position-encoding classification.

#include <algorithm>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "gsrd/train.hpp"
#include "json.hpp"

namespace gsrd {

struct ProbeReport {
  std::string experiment;
  std::vector<std::string> arms;                        // column order
  std::map<std::string, std::vector<double>> series;    // arm -> per-step (or per-window) metric
  std::map<std::string, double> summary;
  std::vector<std::string> ordering;                    // arms sorted by final-window value
  std::vector<std::pair<std::string, bool>> checks;
  std::string config;

  void add_series(const std::string& arm, std::vector<double> values) {
    if (series.count(arm) == 0) arms.push_back(arm);
    series[arm] = std::move(values);
  }

  bool passed(const std::string& check) const {
    for (const auto& [name, ok] : checks)
      if (name == check) return ok;
    throw ContractError("report " + experiment + " has no check " + check);
  }

  std::string to_csv() const {
    std::ostringstream out;
    out.precision(17);
    out << "step";
    std::size_t rows = 0;
    for (const auto& a : arms) {
      out << ',' << a;
      rows = std::max(rows, series.at(a).size());
    }
    out << '\n';
    for (std::size_t r = 0; r < rows; ++r) {
      out << r;
      for (const auto& a : arms) {
        out << ',';
        const auto& s = series.at(a);
        if (r < s.size()) out << s[r];
      }
      out << '\n';
    }
    return out.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["experiment"] = experiment;
    j["summary"] = summary;
    j["ordering"] = ordering;
    nlohmann::json c = nlohmann::json::object();
    for (const auto& [name, ok] : checks) c[name] = ok;
    j["checks"] = c;
    j["series_lengths"] = nlohmann::json::object();
    for (const auto& a : arms) j["series_lengths"][a] = series.at(a).size();
    j["config"] = config;
    return j;
  }
};

struct ProbeConfig {
  std::size_t width = 128;
  std::size_t steps = 2000;
  double lr = 1e-3;
  std::size_t neighbors = 4;        // pooling size for masked-coordinate probing
  std::size_t masks_per_molecule = 2;
  std::size_t window = 50;          // averaging window for loss curves
  double holdout = 0.2;             // fraction held out for classification accuracy
  double mask_ratio = 0.25;
  std::uint64_t seed = 0;
};

/// Means over consecutive windows of `w` entries (the last may be shorter).
inline std::vector<double> window_means(const std::vector<double>& xs, std::size_t w) {
  std::vector<double> out;
  for (std::size_t s = 0; s < xs.size(); s += w) {
    const std::size_t e = std::min(xs.size(), s + w);
    double t = 0;
    for (std::size_t k = s; k < e; ++k) t += xs[k];
    out.push_back(t / static_cast<double>(e - s));
  }
  return out;
}

inline double tail_mean(const std::vector<double>& xs, std::size_t w) {
  if (xs.empty()) throw ContractError("tail_mean of an empty series");
  const std::size_t s = xs.size() > w ? xs.size() - w : 0;
  double t = 0;
  for (std::size_t k = s; k < xs.size(); ++k) t += xs[k];
  return t / static_cast<double>(xs.size() - s);
}

inline Value rows_to_value(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw DataError("no probe samples");
  std::vector<double> flat;
  for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  return Value::constant(rows.size(), rows[0].size(), std::move(flat));
}

/// Two-layer probe. With `zero_output` the untrained probe predicts 0
/// everywhere, so its first loss is the target's mean square.
class ProbeMlp {
 public:
  ProbeMlp(std::size_t in, std::size_t out, const ProbeConfig& cfg, std::uint64_t seed, bool zero_output = false)
      : cfg_(cfg) {
    Rng rng(seed);
    net_ = FeedForward(store_, "probe", in, cfg.width, out, rng);
    if (zero_output)
      for (double& v : net_.second.weight.mutable_data()) v = 0.0;
  }

  Value operator()(const Value& x) const { return net_(x); }

  /// Full-batch training; returns the loss after each step (entry 0 is the
  /// untrained loss, so the series has steps + 1 entries).
  std::vector<double> fit(const std::function<Value(const Value&)>& loss_of_pred, const Value& x) {
    AdamW opt;
    std::vector<double> series;
    for (std::size_t step = 0; step <= cfg_.steps; ++step) {
      store_.zero_grad();
      Value loss = loss_of_pred(net_(x));
      series.push_back(loss.item());
      if (step == cfg_.steps) break;
      backward(loss);
      opt.step(store_, cfg_.lr, 0.0);
    }
    return series;
  }

 private:
  ProbeConfig cfg_;
  ParamStore store_;
  FeedForward net_;
};

inline std::string describe(const ProbeConfig& p) {
  std::ostringstream o;
  o << "probe_width=" << p.width << " probe_steps=" << p.steps << " probe_lr=" << p.lr
    << " neighbors=" << p.neighbors << " masks_per_molecule=" << p.masks_per_molecule << " window=" << p.window
    << " seed=" << p.seed;
  return o.str();
}

// ---------------------------------------------------------------------------
// Analysis 1: reconstruction under frozen/trainable encoders and
// structure-dependent/independent decoders.

inline const std::vector<std::pair<std::string, std::pair<bool, std::string>>>& leakage_arms() {
  static const std::vector<std::pair<std::string, std::pair<bool, std::string>>> arms = {
      {"trainable_independent", {false, "independent"}},
      {"trainable_dependent", {false, "dependent"}},
      {"frozen_independent", {true, "independent"}},
      {"frozen_dependent", {true, "dependent"}},
  };
  return arms;
}

/// Runs one plain re-mask pretraining per arm (no SRD, no distillation, no
/// denoising) and compares windowed MGM loss curves.
inline ProbeReport leakage_experiment(const std::vector<MolGraph>& corpus, TrainConfig base, std::size_t window = 50,
                                      const std::vector<std::string>& only = {}) {
  base.use_srd = false;
  base.use_distill = false;
  base.denoise_weight = 0.0;
  ProbeReport rep;
  rep.experiment = "analysis1";
  std::map<std::string, double> final;
  for (const auto& [name, arm] : leakage_arms()) {
    if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
    TrainConfig cfg = base;
    cfg.freeze_encoder = arm.first;
    cfg.decoder = arm.second;
    Model model(cfg);
    const auto before = model.store.snapshot("encoder.");
    std::vector<double> mgm;
    for (const auto& row : pretrain(model, corpus)) mgm.push_back(row.loss_mgm);
    if (cfg.freeze_encoder) rep.checks.emplace_back(name + "_encoder_unchanged", model.store.snapshot("encoder.") == before);
    rep.add_series(name, window_means(mgm, window));
    final[name] = tail_mean(mgm, window);
    rep.summary[name + "_final"] = final[name];
  }
  rep.ordering = rep.arms;
  std::sort(rep.ordering.begin(), rep.ordering.end(), [&](const auto& a, const auto& b) { return final[a] < final[b]; });
  auto has = [&](const char* a) { return final.count(a) != 0; };
  if (has("frozen_dependent") && has("frozen_independent")) {
    rep.checks.emplace_back("frozen_dependent_below_frozen_independent",
                            final["frozen_dependent"] < final["frozen_independent"]);
    rep.summary["dependent_over_independent_frozen"] = final["frozen_dependent"] / final["frozen_independent"];
    rep.checks.emplace_back("frozen_dependent_below_half", final["frozen_dependent"] < 0.5 * final["frozen_independent"]);
  }
  if (has("trainable_independent") && has("frozen_dependent"))
    rep.checks.emplace_back("trainable_independent_below_frozen_dependent",
                            final["trainable_independent"] < final["frozen_dependent"]);
  if (has("trainable_independent") && has("frozen_independent"))
    rep.checks.emplace_back("trainable_independent_below_frozen_independent",
                            final["trainable_independent"] < final["frozen_independent"]);
  std::ostringstream o;
  o << "steps=" << base.max_steps << " batch_size=" << base.batch_size << " d_model=" << base.d_model
    << " layers=" << base.layers << " window=" << window << " seed=" << base.seed;
  rep.config = o.str();
  return rep;
}

// ---------------------------------------------------------------------------
// Analysis 4: how much the frozen encoder's outputs reveal about masked atoms.

struct MaskedCoordSamples {
  std::vector<std::vector<double>> inputs;   // pooled encoder outputs
  std::vector<std::vector<double>> targets;  // masked coordinate minus pooled-neighbour centroid
};

/// For each masked atom: mean of the encoder outputs of its k nearest unmasked
/// atoms, and its position relative to their centroid.
inline MaskedCoordSamples masked_coord_samples(const Model& model, const std::vector<MolGraph>& corpus,
                                               const ProbeConfig& pc) {
  NoGradGuard guard;
  Rng rng(pc.seed ^ kMaskStream);
  MaskedCoordSamples out;
  const std::size_t d = model.config().d_model;
  for (const auto& g : corpus) {
    for (std::size_t rep = 0; rep < pc.masks_per_molecule; ++rep) {
      MaskPlan mask = sample_mask(g.size(), pc.mask_ratio, 0.0, rng);
      auto unmasked = mask.unmasked(g.size());
      Value h = model.encoder.encode(select_atoms(g, unmasked)).scalar;
      for (std::size_t m : mask.masked) {
        std::vector<std::pair<double, std::size_t>> near;
        for (std::size_t r = 0; r < unmasked.size(); ++r) near.emplace_back(g.distance(m, unmasked[r]), r);
        std::sort(near.begin(), near.end());
        const std::size_t k = std::min(pc.neighbors, near.size());
        std::vector<double> pooled(d, 0.0);
        Vec3 centroid{0, 0, 0};
        for (std::size_t t = 0; t < k; ++t) {
          const std::size_t r = near[t].second;
          for (std::size_t c = 0; c < d; ++c) pooled[c] += h.at(r, c) / static_cast<double>(k);
          for (int a = 0; a < 3; ++a) centroid[a] += g.coords[unmasked[r]][a] / static_cast<double>(k);
        }
        out.inputs.push_back(std::move(pooled));
        out.targets.push_back({g.coords[m][0] - centroid[0], g.coords[m][1] - centroid[1], g.coords[m][2] - centroid[2]});
      }
    }
  }
  return out;
}

/// Probe loss series (mean squared error per masked atom) for one encoder.
inline std::vector<double> masked_coord_probe_series(const Model& model, const std::vector<MolGraph>& corpus,
                                                     const ProbeConfig& pc) {
  auto samples = masked_coord_samples(model, corpus, pc);
  Value x = rows_to_value(samples.inputs), y = rows_to_value(samples.targets);
  ProbeMlp probe(x.cols(), 3, pc, pc.seed, true);
  const double inv = 3.0;
  return probe.fit([&](const Value& pred) { return scale(mean(square(sub(pred, y))), inv); }, x);
}

/// Compares probe curves over the frozen encoders of the given models.
inline ProbeReport probe_masked_coords(const std::vector<std::pair<std::string, const Model*>>& models,
                                       const std::vector<MolGraph>& corpus, const ProbeConfig& pc) {
  ProbeReport rep;
  rep.experiment = "analysis4";
  rep.config = describe(pc);
  for (const auto& [name, model] : models) {
    const auto before = model->store.snapshot();
    auto s = masked_coord_probe_series(*model, corpus, pc);
    rep.checks.emplace_back(name + "_frozen", model->store.snapshot() == before);
    rep.summary[name + "_initial"] = s.front();
    rep.summary[name + "_final"] = tail_mean(s, pc.window);
    rep.add_series(name, std::move(s));
  }
  rep.ordering = rep.arms;
  std::sort(rep.ordering.begin(), rep.ordering.end(),
            [&](const auto& a, const auto& b) { return rep.summary[a + "_final"] < rep.summary[b + "_final"]; });
  if (rep.summary.count("with_srd_final") && rep.summary.count("without_srd_final")) {
    const double ratio = rep.summary["with_srd_final"] / rep.summary["without_srd_final"];
    rep.summary["with_over_without"] = ratio;
    rep.checks.emplace_back("with_srd_at_least_1.5x", ratio >= 1.5);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Analysis 5: can the frozen 3D representation be mapped onto the 2D encoding.

/// Per-atom clean encoder outputs and position encodings over a corpus.
inline std::pair<Value, Value> encoder_and_pe_rows(const Model& enc_model, const Model& pe_model,
                                                   const std::vector<MolGraph>& corpus) {
  NoGradGuard guard;
  std::vector<Value> hs, ps;
  for (const auto& g : corpus) {
    hs.push_back(enc_model.encoder.encode(g).scalar);
    ps.push_back(pe_model.pe.encode(g));
  }
  return {concat_rows(hs), concat_rows(ps)};
}

/// Mean-cosine series of a probe h_i -> pe_i, trained to maximize cosine.
inline std::vector<double> cosine_probe_series(const Value& x, const Value& target, const ProbeConfig& pc) {
  ProbeMlp probe(x.cols(), target.cols(), pc, pc.seed);
  auto s = probe.fit([&](const Value& pred) { return neg(mean(cosine_rows(pred, target))); }, x);
  for (double& v : s) v = -v;
  return s;
}

/// Arms: "distilled" probes model's encoder -> model's PE; "control" probes
/// the same encoder -> an un-distilled PE from `control`.
inline ProbeReport probe_pe_reconstruction(const Model& model, const Model& control,
                                           const std::vector<MolGraph>& corpus, const ProbeConfig& pc) {
  ProbeReport rep;
  rep.experiment = "analysis5";
  rep.config = describe(pc);
  const auto before = model.store.snapshot();
  const auto before_c = control.store.snapshot();
  auto [h, pe] = encoder_and_pe_rows(model, model, corpus);
  auto [h2, pe_c] = encoder_and_pe_rows(model, control, corpus);
  auto s = cosine_probe_series(h, pe, pc);
  auto c = cosine_probe_series(h2, pe_c, pc);
  rep.summary["distilled_final"] = tail_mean(s, pc.window);
  rep.summary["control_final"] = tail_mean(c, pc.window);
  rep.add_series("distilled", std::move(s));
  rep.add_series("control", std::move(c));
  rep.checks.emplace_back("frozen", model.store.snapshot() == before && control.store.snapshot() == before_c);
  rep.checks.emplace_back("distilled_above_0.95", rep.summary["distilled_final"] > 0.95);
  rep.checks.emplace_back("distilled_exceeds_control_by_0.2",
                          rep.summary["distilled_final"] >= rep.summary["control_final"] + 0.2);
  rep.ordering = {"control", "distilled"};
  if (rep.summary["control_final"] > rep.summary["distilled_final"]) std::swap(rep.ordering[0], rep.ordering[1]);
  return rep;
}

// ---------------------------------------------------------------------------
// Analysis 6: atom and bond types from the position encoding.

struct Classified {
  double accuracy = 0;       // held-out accuracy of the trained probe
  double majority = 0;       // held-out majority-class rate (chance)
  double shuffled = 0;       // held-out accuracy of a probe trained on shuffled labels
  double shuffled_chance = 0;  // agreement expected if the shuffled probe's predictions ignored the input
  std::vector<double> loss;  // training cross-entropy series
  std::vector<std::vector<std::size_t>> confusion;  // held-out [truth][prediction]
};

inline std::vector<int> argmax_rows(const Value& logits) {
  std::vector<int> out(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.cols(); ++j)
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

inline double accuracy(const std::vector<int>& pred, const std::vector<int>& truth) {
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == truth[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

/// Trains on a random (1 - holdout) split and scores the rest; also trains a
/// second probe on shuffled training labels as a control.
inline Classified classify(const std::vector<std::vector<double>>& rows, const std::vector<int>& labels,
                           std::size_t classes, const ProbeConfig& pc, std::uint64_t seed) {
  std::vector<std::size_t> order(rows.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_test = std::max<std::size_t>(1, static_cast<std::size_t>(pc.holdout * static_cast<double>(rows.size())));
  if (n_test >= rows.size()) throw DataError("too few samples to hold out");
  std::vector<std::vector<double>> xtr, xte;
  std::vector<int> ytr, yte;
  for (std::size_t k = 0; k < order.size(); ++k) {
    auto& xs = k < n_test ? xte : xtr;
    auto& ys = k < n_test ? yte : ytr;
    xs.push_back(rows[order[k]]);
    ys.push_back(labels[order[k]]);
  }
  Value train = rows_to_value(xtr), test = rows_to_value(xte);
  Classified out;
  {
    ProbeMlp probe(train.cols(), classes, pc, seed + 1);
    out.loss = probe.fit([&](const Value& p) { return cross_entropy(p, ytr); }, train);
    NoGradGuard guard;
    auto pred = argmax_rows(probe(test));
    out.accuracy = accuracy(pred, yte);
    out.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
    for (std::size_t i = 0; i < pred.size(); ++i)
      ++out.confusion[static_cast<std::size_t>(yte[i])][static_cast<std::size_t>(pred[i])];
  }
  {
    std::vector<int> shuffled = ytr;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    ProbeMlp probe(train.cols(), classes, pc, seed + 2);
    probe.fit([&](const Value& p) { return cross_entropy(p, shuffled); }, train);
    NoGradGuard guard;
    auto pred = argmax_rows(probe(test));
    out.shuffled = accuracy(pred, yte);
    std::vector<double> pp(classes, 0.0), pt(classes, 0.0);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      pp[static_cast<std::size_t>(pred[i])] += 1.0 / static_cast<double>(pred.size());
      pt[static_cast<std::size_t>(yte[i])] += 1.0 / static_cast<double>(pred.size());
    }
    for (std::size_t c = 0; c < classes; ++c) out.shuffled_chance += pp[c] * pt[c];
  }
  std::vector<std::size_t> counts(classes, 0);
  for (int y : ytr) ++counts[static_cast<std::size_t>(y)];
  const int major = static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
  out.majority = accuracy(std::vector<int>(yte.size(), major), yte);
  return out;
}

/// Atom types from pe_i and bond categories from [pe_i; pe_j] over every
/// bonded pair plus an equal number of sampled non-bonded pairs.
inline ProbeReport probe_pe_classify(const Model& model, const std::vector<MolGraph>& corpus, const ProbeConfig& pc) {
  ProbeReport rep;
  rep.experiment = "analysis6";
  rep.config = describe(pc);
  const auto before = model.store.snapshot();
  std::vector<std::vector<double>> atom_rows, pair_rows;
  std::vector<int> atom_labels, pair_labels;
  Rng rng(pc.seed ^ kDataStream);
  {
    NoGradGuard guard;
    for (const auto& g : corpus) {
      Value pe = model.pe.encode(g);
      const std::size_t n = g.size(), d = pe.cols();
      auto row = [&](std::size_t i) {
        return std::vector<double>(pe.data().begin() + static_cast<std::ptrdiff_t>(i * d),
                                   pe.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
      };
      for (std::size_t i = 0; i < n; ++i) {
        atom_rows.push_back(row(i));
        atom_labels.push_back(g.atom_types[i]);
      }
      auto pair = [&](std::size_t i, std::size_t j, int order) {
        auto r = row(i);
        auto s = row(j);
        r.insert(r.end(), s.begin(), s.end());
        pair_rows.push_back(std::move(r));
        pair_labels.push_back(order);
      };
      std::vector<std::pair<std::size_t, std::size_t>> free;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
          if (g.bond_order(i, j) == kNoBond) free.emplace_back(i, j);
      std::shuffle(free.begin(), free.end(), rng);
      for (const auto& b : g.bonds) pair(b.i, b.j, b.order);
      for (std::size_t k = 0; k < std::min(free.size(), g.bonds.size()); ++k) pair(free[k].first, free[k].second, kNoBond);
    }
  }
  Classified atoms = classify(atom_rows, atom_labels, kNumElements, pc, pc.seed + 10);
  Classified bonds = classify(pair_rows, pair_labels, kNumBondCategories, pc, pc.seed + 20);
  rep.add_series("atom_loss", atoms.loss);
  rep.add_series("bond_loss", bonds.loss);
  std::size_t presence_hit = 0, presence_total = 0;
  for (std::size_t t = 0; t < kNumBondCategories; ++t)
    for (std::size_t p = 0; p < kNumBondCategories; ++p) {
      presence_total += bonds.confusion[t][p];
      if ((t == kNoBond) == (p == kNoBond)) presence_hit += bonds.confusion[t][p];
    }
  rep.summary = {{"atom_accuracy", atoms.accuracy},
                 {"atom_majority", atoms.majority},
                 {"atom_shuffled", atoms.shuffled},
                 {"atom_chance", atoms.shuffled_chance},
                 {"bond_accuracy", bonds.accuracy},
                 {"bond_majority", bonds.majority},
                 {"bond_shuffled", bonds.shuffled},
                 {"bond_chance", bonds.shuffled_chance},
                 {"bond_presence_accuracy", static_cast<double>(presence_hit) / static_cast<double>(presence_total)},
                 {"atom_samples", static_cast<double>(atom_rows.size())},
                 {"bond_samples", static_cast<double>(pair_rows.size())}};
  for (std::size_t t = 0; t < kNumBondCategories; ++t)
    for (std::size_t p = 0; p < kNumBondCategories; ++p)
      rep.summary["bond_confusion_" + std::to_string(t) + "_" + std::to_string(p)] =
          static_cast<double>(bonds.confusion[t][p]);
  rep.checks.emplace_back("frozen", model.store.snapshot() == before);
  rep.checks.emplace_back("atom_above_0.99", atoms.accuracy > 0.99);
  rep.checks.emplace_back("bond_above_0.99", bonds.accuracy > 0.99);
  rep.checks.emplace_back("atom_shuffled_near_chance", std::fabs(atoms.shuffled - atoms.shuffled_chance) <= 0.05);
  rep.checks.emplace_back("bond_shuffled_near_chance", std::fabs(bonds.shuffled - bonds.shuffled_chance) <= 0.05);
  rep.ordering = {"atom", "bond"};
  return rep;
}

}  // namespace gsrd
