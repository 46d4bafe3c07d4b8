#pragma once

// Command-line driver behind tools/gsrd_cli. Kept in a header so the tests can
// call run_cli directly with captured streams.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>

#include "CLI11.hpp"
#include "gsrd/checkpoint.hpp"
#include "gsrd/config.hpp"
#include "gsrd/gradcheck.hpp"
#include "gsrd/probes.hpp"

namespace gsrd {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

class UsageError : public Error {
 public:
  using Error::Error;
};

namespace cli {

inline std::vector<MolGraph> load_corpus(const std::string& path, const char* what) {
  if (path.empty()) throw ConfigError(std::string(what) + " is not set");
  return parse_mol3d(read_file(path));
}

/// Config file (if any) then --key=value extras. Unknown keys are usage errors.
inline RunConfig build_config(const std::string& config_path, const std::vector<std::string>& extras) {
  for (const auto& a : extras) {
    const auto eq = a.find('=');
    if (a.rfind("--", 0) != 0 || eq == std::string::npos || !is_option(a.substr(2, eq - 2)))
      throw UsageError("unrecognised argument '" + a + "'");
  }
  RunConfig rc;
  if (!config_path.empty()) apply_config_text(rc, read_file(config_path));
  apply_overrides(rc, extras);
  rc.train.check();
  return rc;
}

inline std::filesystem::path prepare_run_dir(const std::string& dir, const RunConfig& rc) {
  if (dir.empty()) throw ConfigError("--run-dir is required");
  std::filesystem::create_directories(dir);
  write_file((std::filesystem::path(dir) / "config.txt").string(), dump_config(rc));
  return dir;
}

inline std::unique_ptr<Model> model_from(const RunConfig& rc, const std::string& checkpoint,
                                         const std::vector<std::string>& required) {
  auto m = std::make_unique<Model>(rc.train);
  if (!checkpoint.empty()) load_into(m->store, load_checkpoint(checkpoint), required);
  return m;
}

inline std::vector<MolGraph> head(const std::vector<MolGraph>& corpus, std::size_t n) {
  return {corpus.begin(), corpus.begin() + static_cast<std::ptrdiff_t>(std::min(n, corpus.size()))};
}

inline void write_report(const std::filesystem::path& dir, const ProbeReport& rep, std::ostream& out) {
  write_file((dir / (rep.experiment + ".csv")).string(), rep.to_csv());
  write_file((dir / (rep.experiment + ".json")).string(), rep.to_json().dump(2) + "\n");
  out << rep.experiment << ":";
  for (const auto& [k, v] : rep.summary)
    if (k.rfind("bond_confusion_", 0) != 0) out << ' ' << k << '=' << v;
  out << '\n';
  for (const auto& [name, ok] : rep.checks) out << "  " << (ok ? "pass " : "fail ") << name << '\n';
}

struct Args {
  std::string config;
  std::string run_dir;
  std::vector<std::string> extras;
};

inline void add_common(CLI::App* sub, Args& a) {
  sub->add_option("-c,--config", a.config, "key = value config file");
  sub->add_option("-o,--run-dir", a.run_dir, "output directory");
  sub->allow_extras();
  sub->footer("Any config key can be overridden with --key=value.");
}

inline int cmd_gen(const std::string& out_path, std::size_t count, std::size_t min_atoms, std::size_t max_atoms,
                   std::uint64_t seed, bool labels, std::ostream& out) {
  auto corpus = generate_synthetic(seed, count, {min_atoms, max_atoms});
  if (labels)
    for (auto& g : corpus) attach_toy_labels(g);
  write_file(out_path, write_mol3d(corpus));
  out << "wrote " << corpus.size() << " molecules to " << out_path << '\n';
  return kExitOk;
}

inline int cmd_pretrain(const Args& a, std::ostream& out) {
  RunConfig rc = build_config(a.config, a.extras);
  auto corpus = load_corpus(rc.corpus, "corpus");
  auto dir = prepare_run_dir(a.run_dir, rc);
  auto model = model_from(rc, rc.init_checkpoint, {});
  std::ofstream csv(dir / "metrics.csv");
  csv << "step,lr,loss_total,loss_mgm,loss_denoise,loss_distill,distill_cosine_mean\n" << std::setprecision(10);
  const std::size_t every = std::max<std::size_t>(1, rc.train.max_steps / 10);
  pretrain(*model, corpus, [&](const PretrainLog& r) {
    csv << r.step << ',' << r.lr << ',' << r.loss_total << ',' << r.loss_mgm << ',' << r.loss_denoise << ','
        << r.loss_distill << ',' << r.distill_cosine_mean << '\n';
    if ((r.step + 1) % every == 0 || r.step + 1 == rc.train.max_steps)
      out << "step " << r.step + 1 << " loss " << r.loss_total << " mgm " << r.loss_mgm << " cos "
          << r.distill_cosine_mean << std::endl;
  });
  save_checkpoint((dir / "model.mg3d").string(), model->store);
  out << "saved " << (dir / "model.mg3d").string() << '\n';
  return kExitOk;
}

inline int cmd_finetune(const Args& a, std::ostream& out) {
  RunConfig rc = build_config(a.config, a.extras);
  auto corpus = load_corpus(rc.corpus, "corpus");
  auto dir = prepare_run_dir(a.run_dir, rc);
  auto model = model_from(rc, rc.init_checkpoint, {"encoder."});
  std::ofstream csv(dir / "metrics.csv");
  csv << "step,lr,loss_energy,loss_force,mae\n" << std::setprecision(10);
  const std::size_t every = std::max<std::size_t>(1, rc.train.max_steps / 10);
  finetune(*model, corpus, [&](const FinetuneLog& r) {
    csv << r.step << ',' << r.lr << ',' << r.loss_energy << ',' << r.loss_force << ',' << r.mae << '\n';
    if ((r.step + 1) % every == 0 || r.step + 1 == rc.train.max_steps)
      out << "step " << r.step + 1 << " energy " << r.loss_energy << " force " << r.loss_force << " mae " << r.mae
          << std::endl;
  });
  save_checkpoint((dir / "model.mg3d").string(), model->store);
  if (!rc.eval_corpus.empty())
    out << "eval mae " << evaluate_mae(*model, load_corpus(rc.eval_corpus, "eval_corpus"), rc.train.label) << '\n';
  out << "saved " << (dir / "model.mg3d").string() << '\n';
  return kExitOk;
}

inline int cmd_probe(const std::string& analysis, const Args& a, std::ostream& out) {
  RunConfig rc = build_config(a.config, a.extras);
  auto corpus = load_corpus(rc.corpus, "corpus");
  auto dir = prepare_run_dir(a.run_dir, rc);
  if (analysis == "analysis1") {
    write_report(dir, leakage_experiment(corpus, rc.train, rc.probe.window), out);
    return kExitOk;
  }
  auto probe_set = head(corpus, rc.probe_molecules);
  if (analysis == "analysis6") {
    auto m = model_from(rc, rc.init_checkpoint, {"pe."});
    write_report(dir, probe_pe_classify(*m, probe_set, rc.probe), out);
    return kExitOk;
  }
  if (rc.init_checkpoint.empty() || rc.control_checkpoint.empty())
    throw ConfigError(analysis + " needs init_checkpoint and control_checkpoint");
  auto m = model_from(rc, rc.init_checkpoint, {"encoder.", "pe."});
  auto ctrl = model_from(rc, rc.control_checkpoint, {"encoder.", "pe."});
  if (analysis == "analysis4")
    write_report(dir, probe_masked_coords({{"with_srd", m.get()}, {"without_srd", ctrl.get()}}, probe_set, rc.probe),
                 out);
  else
    write_report(dir, probe_pe_reconstruction(*m, *ctrl, probe_set, rc.probe), out);
  return kExitOk;
}

inline int cmd_gradcheck(const Args& a, const GradCheckOptions& opt, std::ostream& out) {
  RunConfig rc = build_config(a.config, a.extras);
  std::ofstream csv;
  if (!a.run_dir.empty()) {
    auto dir = prepare_run_dir(a.run_dir, rc);
    csv.open(dir / "gradcheck.csv");
    csv << "loss,param,atoms,seed,rel_error,analytic,numeric\n" << std::setprecision(10);
  }
  std::map<std::string, double> worst;
  auto rep = gradient_suite(rc.train, opt, [&](const GradCheckRow& r) {
    worst[r.loss] = std::max(worst[r.loss], r.result.max_rel_error);
    if (csv.is_open())
      csv << r.loss << ',' << r.param << ',' << r.atoms << ',' << r.seed << ',' << r.result.max_rel_error << ','
          << r.result.analytic << ',' << r.result.numeric << '\n';
  });
  for (const auto& [loss, w] : worst) out << loss << " max relative error " << w << '\n';
  out << rep.rows.size() << " checks, worst " << rep.worst() << (rep.passed() ? " (ok)" : " (above tolerance)")
      << '\n';
  return rep.passed() ? kExitOk : kExitFailure;
}

inline int cmd_eval(const Args& a, const std::string& checkpoint, std::ostream& out) {
  RunConfig rc = build_config(a.config, a.extras);
  const std::string path = rc.eval_corpus.empty() ? rc.corpus : rc.eval_corpus;
  auto corpus = load_corpus(path, "eval_corpus");
  auto model = model_from(rc, checkpoint.empty() ? rc.init_checkpoint : checkpoint, {"encoder.", "label_head."});
  nlohmann::json j;
  j["corpus"] = path;
  j["molecules"] = corpus.size();
  j["mae"] = evaluate_mae(*model, corpus, rc.train.label);
  bool forces = true;
  for (const auto& g : corpus) forces = forces && g.has_forces();
  if (forces) {
    NoGradGuard guard;
    double total = 0;
    std::size_t count = 0;
    for (const auto& g : corpus) {
      Value f = forces_fd(*model, g, rc.train.fd_step);
      for (std::size_t i = 0; i < g.size(); ++i)
        for (std::size_t c = 0; c < 3; ++c, ++count) total += std::fabs(f.at(i, c) - g.forces[i][c]);
    }
    j["force_mae"] = total / static_cast<double>(count);
  }
  out << j.dump() << '\n';
  if (!a.run_dir.empty()) {
    auto dir = prepare_run_dir(a.run_dir, rc);
    write_file((dir / "eval.json").string(), j.dump(2) + "\n");
  }
  return kExitOk;
}

inline int cmd_inspect(const std::string& path, std::ostream& out) {
  auto entries = load_checkpoint(path);
  std::uint64_t total = 0;
  for (const auto& e : entries) {
    out << e.name << " [";
    for (std::size_t k = 0; k < e.dims.size(); ++k) out << (k ? " x " : "") << e.dims[k];
    out << "]\n";
    total += e.numel();
  }
  out << entries.size() << " tensors, " << total << " values\n";
  return kExitOk;
}

}  // namespace cli

/// Parses argv and runs one command. Returns 0 on success, 1 on validation or
/// data failures, 2 on usage errors.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Masked 3D graph pretraining with structure-independent decoding"};
  app.require_subcommand(1);
  cli::Args a;

  std::string gen_out;
  std::size_t gen_count = 500, gen_min = 5, gen_max = 12;
  std::uint64_t gen_seed = 0;
  bool gen_labels = false;
  auto* gen = app.add_subcommand("gen", "write a synthetic .mol3d corpus");
  gen->add_option("--out", gen_out, "output .mol3d path")->required();
  gen->add_option("--count", gen_count, "number of molecules");
  gen->add_option("--min-atoms", gen_min, "smallest molecule");
  gen->add_option("--max-atoms", gen_max, "largest molecule");
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_flag("--labels", gen_labels, "attach toy-potential energy and forces");

  auto* pre = app.add_subcommand("pretrain", "masked graph pretraining");
  cli::add_common(pre, a);
  auto* fin = app.add_subcommand("finetune", "energy / force / property finetuning");
  cli::add_common(fin, a);

  std::string analysis;
  auto* probe = app.add_subcommand("probe", "run one of the analyses");
  probe->add_option("analysis", analysis, "analysis1 | analysis4 | analysis5 | analysis6")
      ->required()
      ->check(CLI::IsMember({"analysis1", "analysis4", "analysis5", "analysis6"}));
  cli::add_common(probe, a);

  GradCheckOptions gopt;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every loss");
  grad->add_option("--seeds", gopt.seeds, "random seeds per molecule size");
  grad->add_option("--samples", gopt.samples_per_tensor, "entries probed per parameter tensor");
  grad->add_option("--step", gopt.step, "finite-difference step");
  cli::add_common(grad, a);

  std::string ckpt;
  auto* eval = app.add_subcommand("eval", "label and force errors on a labeled corpus");
  eval->add_option("--checkpoint", ckpt, "model checkpoint (defaults to init_checkpoint)");
  cli::add_common(eval, a);

  std::string inspect_path;
  auto* inspect = app.add_subcommand("inspect-ckpt", "list tensors in a checkpoint");
  inspect->add_option("checkpoint", inspect_path, "checkpoint file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    for (auto* sub : {pre, fin, probe, grad, eval})
      if (sub->parsed()) a.extras = sub->remaining();
    if (gen->parsed()) return cli::cmd_gen(gen_out, gen_count, gen_min, gen_max, gen_seed, gen_labels, out);
    if (pre->parsed()) return cli::cmd_pretrain(a, out);
    if (fin->parsed()) return cli::cmd_finetune(a, out);
    if (probe->parsed()) return cli::cmd_probe(analysis, a, out);
    if (grad->parsed()) return cli::cmd_gradcheck(a, gopt, out);
    if (eval->parsed()) return cli::cmd_eval(a, ckpt, out);
    if (inspect->parsed()) return cli::cmd_inspect(inspect_path, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n' << app.help();
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace gsrd
