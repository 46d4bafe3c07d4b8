#pragma once

// Finite-difference checks of every training loss against reverse mode, over
// small random molecules. Each parameter tensor is probed at a few evenly
// spaced entries.

#include <string>
#include <vector>

#include "gsrd/train.hpp"

namespace gsrd {

struct GradCheckRow {
  std::string loss;
  std::string param;
  std::size_t atoms = 0;
  std::uint64_t seed = 0;
  GradCheckResult result;
};

struct GradCheckOptions {
  std::vector<std::size_t> sizes = {3, 4, 5};
  std::size_t seeds = 20;
  std::size_t samples_per_tensor = 2;
  double step = 1e-3;       // five-point stencil
  double tolerance = 1e-4;
};

struct GradCheckReport {
  std::vector<GradCheckRow> rows;
  double tolerance = 1e-4;

  double worst() const {
    double w = 0;
    for (const auto& r : rows) w = std::max(w, r.result.max_rel_error);
    return w;
  }
  bool passed() const { return !rows.empty() && worst() < tolerance; }
};

namespace detail {

inline std::vector<std::size_t> spread_indices(std::size_t size, std::size_t count) {
  std::vector<std::size_t> idx;
  const std::size_t stride = std::max<std::size_t>(1, size / std::max<std::size_t>(1, count));
  for (std::size_t k = stride / 2; k < size && idx.size() < count; k += stride) idx.push_back(k);
  return idx;
}

inline bool has_prefix(const std::string& s, const char* p) { return s.rfind(p, 0) == 0; }

}  // namespace detail

/// Checks the masked-position, denoising, distillation and finetuning losses.
/// Stop-gradient paths are excluded from the probed parameter sets: the
/// position encoder is only probed through distillation (with the clean
/// target held fixed), everything else only through the other terms.
inline GradCheckReport gradient_suite(TrainConfig cfg, const GradCheckOptions& opt,
                                      const std::function<void(const GradCheckRow&)>& on_row = {}) {
  GradCheckReport rep;
  rep.tolerance = opt.tolerance;
  if (cfg.denoise_weight <= 0) cfg.denoise_weight = 0.1;
  if (cfg.noise_scale <= 0) cfg.noise_scale = 0.04;
  cfg.task = "energy_forces";
  for (std::uint64_t seed = 0; seed < opt.seeds; ++seed) {
    for (std::size_t n : opt.sizes) {
      MolGraph g = generate_synthetic(1000 + seed, 1, {n, n})[0];
      attach_toy_labels(g);
      TrainConfig c = cfg;
      c.seed = seed;
      Model model(c);
      Rng rng(seed ^ kMaskStream);
      MaskPlan mask = sample_mask(n, c.mask_ratio, c.noise_scale, rng);
      RigidMotion motion = sample_augmentation(rng);
      const double y = g.labels.at("energy");

      auto probe = [&](const std::string& loss, const std::function<Value()>& fn, auto&& include) {
        for (const auto& e : model.store.entries()) {
          if (!include(e.name)) continue;
          GradCheckRow row{loss, e.name, n, seed,
                           finite_diff_check_leaf(fn, e.value, opt.step,
                                                  detail::spread_indices(e.value.size(), opt.samples_per_tensor), true)};
          model.store.zero_grad();
          if (on_row) on_row(row);
          rep.rows.push_back(std::move(row));
        }
      };
      auto pretrain_params = [](const std::string& name) {
        return !detail::has_prefix(name, "pe.") && !detail::has_prefix(name, "label_head.");
      };
      auto pe_params = [](const std::string& name) { return detail::has_prefix(name, "pe."); };
      auto finetune_params = [](const std::string& name) {
        return detail::has_prefix(name, "encoder.") || detail::has_prefix(name, "label_head.");
      };

      probe("mgm", [&] { return pretrain_forward(model, g, mask, motion).terms.mgm; }, pretrain_params);
      probe("denoise", [&] { return pretrain_forward(model, g, mask, motion).terms.denoise; }, pretrain_params);
      Value h_clean;
      {
        NoGradGuard guard;
        h_clean = model.encoder.encode(with_coords(g, motion.apply(g.coords))).scalar;
      }
      probe("distill", [&] { return distill_loss(model.pe.encode(g), h_clean, mask); }, pe_params);
      probe("finetune", [&] {
        FinetuneTerms t = finetune_terms(model, g, y, motion);
        return add(scale(t.energy_error, c.energy_weight), scale(t.force_error, c.force_weight));
      }, finetune_params);
    }
  }
  return rep;
}

}  // namespace gsrd
