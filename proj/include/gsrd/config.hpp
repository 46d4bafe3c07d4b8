#pragma once

// Flat `key = value` run configuration. Keys mirror the hyperparameter names
// used for pretraining and finetuning; `--key=value` overrides are applied on
// top of a file.

#include <charconv>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "gsrd/errors.hpp"
#include "gsrd/probes.hpp"
#include "gsrd/train.hpp"

namespace gsrd {

struct RunConfig {
  TrainConfig train;
  ProbeConfig probe;
  std::string corpus;          // .mol3d training corpus
  std::string eval_corpus;     // optional held-out corpus
  std::string init_checkpoint; // checkpoint to start from (finetune, probes)
  std::string control_checkpoint;  // un-distilled model for probe comparisons
  std::size_t probe_molecules = 200;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError("bad value for " + key + ": '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("bad boolean for " + key + ": '" + v + "'");
}

inline std::string show(double v) {
  std::ostringstream o;
  o.precision(17);
  o << v;
  return o.str();
}

struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define GSRD_NUM(name, member, type)                                                             \
  {name,                                                                                         \
   {[](RunConfig& c, const std::string& v) { c.member = parse_number<type>(name, v); },          \
    [](const RunConfig& c) { return std::is_floating_point_v<type> ? show(static_cast<double>(c.member)) \
                                                                   : std::to_string(c.member); }}}
#define GSRD_BOOL(name, member)                                                                  \
  {name,                                                                                         \
   {[](RunConfig& c, const std::string& v) { c.member = parse_bool(name, v); },                  \
    [](const RunConfig& c) { return std::string(c.member ? "true" : "false"); }}}
#define GSRD_STR(name, member)                                                                   \
  {name, {[](RunConfig& c, const std::string& v) { c.member = v; }, [](const RunConfig& c) { return c.member; }}}

inline const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      GSRD_NUM("d_model", train.d_model, std::size_t),
      GSRD_NUM("heads", train.heads, std::size_t),
      GSRD_NUM("layers", train.layers, std::size_t),
      GSRD_NUM("k_rbf", train.k_rbf, std::size_t),
      GSRD_NUM("d_cut", train.d_cut, double),
      GSRD_BOOL("no_3d_attention", train.no_3d_attention),
      GSRD_BOOL("no_update_layer", train.no_update_layer),
      GSRD_STR("pe_kind", train.pe_kind),
      GSRD_NUM("pe_width", train.pe_width, std::size_t),
      GSRD_NUM("pe_heads", train.pe_heads, std::size_t),
      GSRD_NUM("pe_layers", train.pe_layers, std::size_t),
      GSRD_NUM("rwse_steps", train.rwse_steps, std::size_t),
      GSRD_STR("decoder", train.decoder),
      GSRD_NUM("decoder_layers", train.decoder_layers, std::size_t),
      GSRD_BOOL("use_srd", train.use_srd),
      GSRD_BOOL("use_distill", train.use_distill),
      GSRD_NUM("mask_ratio", train.mask_ratio, double),
      GSRD_NUM("noise_scale", train.noise_scale, double),
      GSRD_NUM("denoise_weight", train.denoise_weight, double),
      GSRD_BOOL("augmentation", train.augmentation),
      GSRD_BOOL("freeze_encoder", train.freeze_encoder),
      GSRD_NUM("batch_size", train.batch_size, std::size_t),
      GSRD_NUM("accumulate_grad_batches", train.accumulate_grad_batches, std::size_t),
      GSRD_NUM("lr_init", train.lr_init, double),
      GSRD_NUM("lr_min", train.lr_min, double),
      GSRD_NUM("warmup_steps", train.warmup_steps, std::size_t),
      GSRD_NUM("max_steps", train.max_steps, std::size_t),
      GSRD_NUM("weight_decay", train.weight_decay, double),
      GSRD_STR("task", train.task),
      GSRD_STR("label", train.label),
      GSRD_STR("loss_type", train.loss_type),
      GSRD_NUM("force_weight", train.force_weight, double),
      GSRD_NUM("energy_weight", train.energy_weight, double),
      GSRD_NUM("ema_alpha_y", train.ema_alpha_y, double),
      GSRD_NUM("ema_alpha_dy", train.ema_alpha_dy, double),
      GSRD_NUM("fd_step", train.fd_step, double),
      GSRD_NUM("seed", train.seed, std::uint64_t),
      GSRD_NUM("probe_width", probe.width, std::size_t),
      GSRD_NUM("probe_steps", probe.steps, std::size_t),
      GSRD_NUM("probe_lr", probe.lr, double),
      GSRD_NUM("probe_neighbors", probe.neighbors, std::size_t),
      GSRD_NUM("probe_masks_per_molecule", probe.masks_per_molecule, std::size_t),
      GSRD_NUM("probe_window", probe.window, std::size_t),
      GSRD_NUM("probe_holdout", probe.holdout, double),
      GSRD_NUM("probe_seed", probe.seed, std::uint64_t),
      GSRD_NUM("probe_molecules", probe_molecules, std::size_t),
      GSRD_STR("corpus", corpus),
      GSRD_STR("eval_corpus", eval_corpus),
      GSRD_STR("init_checkpoint", init_checkpoint),
      GSRD_STR("control_checkpoint", control_checkpoint),
  };
  return table;
}

#undef GSRD_NUM
#undef GSRD_BOOL
#undef GSRD_STR

}  // namespace detail

inline bool is_option(const std::string& key) {
  for (const auto& f : detail::fields())
    if (f.first == key) return true;
  return false;
}

inline void set_option(RunConfig& c, const std::string& key, const std::string& value) {
  for (const auto& [name, f] : detail::fields())
    if (name == key) {
      f.set(c, value);
      return;
    }
  throw ConfigError("unknown config key '" + key + "'");
}

/// Parses `key = value` lines onto `c`. Blank lines and `#` comments are skipped.
inline void apply_config_text(RunConfig& c, std::string_view text) {
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    std::string t = detail::trim(line);
    if (t.empty()) continue;
    auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    std::string key = detail::trim(std::string_view(t).substr(0, eq));
    std::string value = detail::trim(std::string_view(t).substr(eq + 1));
    try {
      set_option(c, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
    }
    if (nl == text.size()) break;
  }
}

/// Applies `--key=value` arguments.
inline void apply_overrides(RunConfig& c, const std::vector<std::string>& args) {
  for (const auto& a : args) {
    if (a.rfind("--", 0) != 0) throw ConfigError("override must look like --key=value: '" + a + "'");
    auto eq = a.find('=');
    if (eq == std::string::npos) throw ConfigError("override must look like --key=value: '" + a + "'");
    set_option(c, a.substr(2, eq - 2), a.substr(eq + 1));
  }
}

/// Full snapshot, one `key = value` line per field; re-parsing it reproduces `c`.
inline std::string dump_config(const RunConfig& c) {
  std::string out;
  for (const auto& [name, f] : detail::fields()) out += name + " = " + f.get(c) + "\n";
  return out;
}

}  // namespace gsrd
