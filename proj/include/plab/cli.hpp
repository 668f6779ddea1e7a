#pragma once

// Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime error.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "plab/config.hpp"
#include "plab/report.hpp"

namespace plab::cli {

namespace detail {

struct Common {
  std::uint64_t seed = 1;
  std::string config;
};

inline void add_common(CLI::App* app, Common& c) {
  app->add_option("--seed", c.seed, "Random seed")->capture_default_str();
  app->add_option("--config", c.config, "Experiment configuration file");
}

inline ExperimentConfig base_config(const Common& c) {
  return c.config.empty() ? parse_config("", "defaults") : load_config(c.config);
}

template <typename T>
void set_if(const std::optional<T>& v, T& dst) {
  if (v) dst = *v;
}

struct TrainFlags {
  std::optional<std::size_t> epochs;
  std::optional<double> lr;
  std::optional<std::string> schedule;

  void add(CLI::App* app) {
    app->add_option("--epochs", epochs, "Training epochs");
    app->add_option("--lr", lr, "Learning rate");
    app->add_option("--schedule", schedule, "Learning-rate schedule")
        ->check(CLI::IsMember({"cosine", "constant"}));
  }
  void apply(TrainConfig& t) const {
    set_if(epochs, t.epochs);
    set_if(lr, t.lr);
    if (schedule) t.schedule = *schedule == "cosine" ? Schedule::cosine : Schedule::constant;
    t.validate();
  }
};

struct InputFlags {
  std::optional<std::string> data, test, val, encoder, head, target;

  void add(CLI::App* app, bool with_test, bool with_val, bool with_head, bool with_target) {
    app->add_option("--data", data, "Training dataset file (.bin or .csv)");
    if (with_test) app->add_option("--test", test, "Test dataset file");
    if (with_val) app->add_option("--val", val, "Validation dataset file");
    app->add_option("--encoder", encoder, "Frozen encoder model file");
    if (with_head) app->add_option("--head", head, "Clean head model file");
    if (with_target) app->add_option("--target", target, "Target head model file");
  }
  void apply(ExperimentConfig& c) const {
    set_if(data, c.data.train);
    set_if(test, c.data.test);
    set_if(val, c.data.val);
    set_if(encoder, c.encoder.path);
    set_if(head, c.head_path);
    set_if(target, c.target_path);
  }
};

inline void write_trace(const std::string& path, const Vec& trace) {
  std::string s = "step,value\n";
  for (std::size_t i = 0; i < trace.size(); ++i) {
    s += std::to_string(i) + "," + plab::detail::g17(trace[i]) + "\n";
  }
  plab::detail::write_file(path, s);
}

inline LabeledData as_dataset(const FeatureData& z) { return LabeledData{z.Z, z.y, z.classes}; }

inline AttackEntry pick_attack(const ExperimentConfig& cfg, const std::string& method,
                               const std::optional<std::string>& label) {
  for (const auto& a : cfg.attacks) {
    if (label ? a.label == *label : a.method == method) {
      if (a.method != method) {
        throw Error("attack '" + a.label + "' in the configuration uses method " + a.method +
                    ", not " + method);
      }
      return a;
    }
  }
  if (label) throw Error("no [attack." + *label + "] section in the configuration");
  AttackEntry a;
  a.label = method;
  a.method = method;
  return a;
}

}  // namespace detail

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  using namespace detail;
  CLI::App app{"Poisoning attacks on linear heads over frozen feature extractors", "plab"};
  app.require_subcommand(1);
  app.fallthrough(false);

  // gen-data
  Common gen_c;
  BlobSpec blobs;
  std::optional<double> gen_sep;
  std::size_t n_test = 600;
  std::string gen_out, gen_test_out;
  auto* gen = app.add_subcommand("gen-data", "Generate Gaussian-blob datasets");
  add_common(gen, gen_c);
  gen->add_option("--n", blobs.n, "Training points")->capture_default_str();
  gen->add_option("--d", blobs.d, "Input dimension")->capture_default_str();
  gen->add_option("--c", blobs.classes, "Classes")->capture_default_str();
  gen->add_option("--separation", gen_sep, "Distance between class means");
  gen->add_option("--std", blobs.std, "Per-coordinate standard deviation")->capture_default_str();
  gen->add_option("--lo", blobs.box.lo, "Lower clip bound")->capture_default_str();
  gen->add_option("--hi", blobs.box.hi, "Upper clip bound")->capture_default_str();
  gen->add_option("--out", gen_out, "Output dataset file")->required();
  gen->add_option("--test-out", gen_test_out, "Also write a test set drawn after the training set");
  gen->add_option("--n-test", n_test, "Test points")->capture_default_str();

  // pretrain
  Common pre_c;
  InputFlags pre_in;
  TrainFlags pre_t;
  std::optional<std::vector<std::size_t>> pre_dims;
  std::string pre_out;
  auto* pre = app.add_subcommand("pretrain", "Pretrain and freeze an MLP encoder");
  add_common(pre, pre_c);
  pre_in.add(pre, false, false, false, false);
  pre_t.add(pre);
  pre->add_option("--dims", pre_dims, "Layer sizes, input first")->delimiter(',');
  pre->add_option("--out", pre_out, "Output model file")->required();

  // train-head
  Common th_c;
  InputFlags th_in;
  TrainFlags th_t;
  std::string th_out;
  auto* th = app.add_subcommand("train-head", "Train a linear head on frozen features");
  add_common(th, th_c);
  th_in.add(th, true, false, false, false);
  th_t.add(th);
  th->add_option("--out", th_out, "Output head file")->required();

  // gradpc
  Common gp_c;
  InputFlags gp_in;
  std::optional<double> gp_eps;
  std::optional<std::size_t> gp_steps;
  std::optional<int> gp_power;
  std::string gp_out;
  auto* gp = app.add_subcommand("gradpc", "Corrupt a head by normalized gradient ascent");
  add_common(gp, gp_c);
  gp_in.add(gp, true, true, true, false);
  gp->add_option("--eps-w", gp_eps, "Corruption radius");
  gp->add_option("--steps", gp_steps, "Ascent steps");
  gp->add_option("--norm-power", gp_power, "1: radius is L2; 2: squared L2")->check(CLI::IsMember({1, 2}));
  gp->add_option("--out", gp_out, "Output target head file")->required();

  // attack
  Common at_c;
  InputFlags at_in;
  std::string at_method;
  std::optional<std::string> at_label, at_box, at_trace;
  std::optional<double> at_eps_d, at_eta, at_beta, at_gamma, at_eps_inf, at_eps_w;
  std::optional<std::size_t> at_epochs, at_t, at_k;
  bool at_constrained = false, at_refine = false;
  std::string at_out;
  auto* at = app.add_subcommand("attack", "Construct a poison set");
  add_common(at, at_c);
  at_in.add(at, true, true, true, true);
  at->add_option("--method", at_method, "Attack algorithm")
      ->required()
      ->check(CLI::IsMember(attack_methods()));
  at->add_option("--label", at_label, "Use the [attack.<label>] section of the configuration");
  at->add_option("--eps-d", at_eps_d, "Poison fraction");
  at->add_option("--eps-w", at_eps_w, "Target corruption radius");
  at->add_option("--eta", at_eta, "Step size");
  at->add_option("--epochs", at_epochs, "GC descent epochs");
  at->add_option("--beta", at_beta, "Fidelity weight");
  at->add_option("--gamma", at_gamma, "Feature matching weight");
  at->add_option("--t", at_t, "Feature matching steps per round");
  at->add_option("--k", at_k, "Feature matching rounds");
  at->add_option("--box", at_box, "none, data or lo,hi");
  at->add_option("--eps-inf", at_eps_inf, "EMN perturbation radius");
  at->add_flag("--constrained", at_constrained, "Fidelity penalty and box for gc-input and tgda");
  at->add_flag("--refine", at_refine, "Enable the optional zeta refinement of feature matching");
  at->add_option("--out", at_out, "Output poison dataset file")->required();
  at->add_option("--trace", at_trace, "Write the objective trace as CSV");

  // evaluate
  Common ev_c;
  InputFlags ev_in;
  TrainFlags ev_t;
  std::string ev_poison, ev_space = "auto", ev_label = "evaluate";
  std::optional<double> ev_eps_d;
  std::optional<std::string> ev_out, ev_csv;
  bool ev_defend = false, ev_replace = false;
  auto* ev = app.add_subcommand("evaluate", "Retrain on clean plus poison data and report");
  add_common(ev, ev_c);
  ev_in.add(ev, true, true, true, true);
  ev_t.add(ev);
  ev->add_option("--poison", ev_poison, "Poison dataset file")->required();
  ev->add_option("--space", ev_space, "Poison space")
      ->check(CLI::IsMember({"auto", "input", "feature"}))
      ->capture_default_str();
  ev->add_option("--label", ev_label, "Attack name recorded in the report")->capture_default_str();
  ev->add_option("--eps-d", ev_eps_d, "Poison fraction recorded in the report");
  ev->add_flag("--defend", ev_defend, "Drop poison rows outside the clean magnitude range");
  ev->add_flag("--replace", ev_replace, "Train on the poison set alone (perturbed training sets)");
  ev->add_option("--out", ev_out, "JSONL report file");
  ev->add_option("--csv", ev_csv, "CSV report file");

  // sweep
  Common sw_c;
  std::string sw_dir = ".";
  auto* sw = app.add_subcommand("sweep", "Run every attack, budget and seed in a configuration");
  add_common(sw, sw_c);
  sw->add_option("--out-dir", sw_dir, "Directory for report.jsonl, report.csv, summary.csv")
      ->capture_default_str();

  // report
  Common rp_c;
  bool rp_show = false;
  std::optional<std::string> rp_in, rp_out;
  auto* rp = app.add_subcommand("report", "Show the configuration or summarize a report");
  add_common(rp, rp_c);
  rp->add_flag("--show-config", rp_show, "Print the resolved configuration with defaults");
  rp->add_option("--input", rp_in, "JSONL report to summarize");
  rp->add_option("--out", rp_out, "Write the summary CSV here instead of standard output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (*gen) {
      ExperimentConfig cfg = base_config(gen_c);
      BlobSpec spec = blobs;
      spec.separation = gen_sep ? *gen_sep : cfg.data.blobs.separation;
      if (spec.classes < 2) throw Error("--c must be >= 2");
      Rng rng(gen_c.seed);
      const LabeledData train = gen_blobs(rng, spec);
      write_dataset(gen_out, train);
      out << "wrote " << gen_out << " (n=" << spec.n << ", d=" << spec.d << ", c=" << spec.classes << ")\n";
      if (!gen_test_out.empty()) {
        spec.n = n_test;
        write_dataset(gen_test_out, gen_blobs(rng, spec));
        out << "wrote " << gen_test_out << " (n=" << n_test << ")\n";
      }
    } else if (*pre) {
      ExperimentConfig cfg = base_config(pre_c);
      pre_in.apply(cfg);
      pre_t.apply(cfg.encoder.train);
      if (pre_dims) cfg.encoder.dims = *pre_dims;
      cfg.encoder.path.clear();
      const LabeledData train = load_data(cfg, pre_c.seed).train;
      const Encoder f = pretrain_encoder(train, cfg.encoder.dims, with_seed(cfg.encoder.train, pre_c.seed));
      write_model(pre_out, f);
      out << "wrote " << pre_out << " (" << f.in_dim() << " -> " << f.out_dim() << ", "
          << f.depth() << " layers)\n";
    } else if (*th) {
      ExperimentConfig cfg = base_config(th_c);
      th_in.apply(cfg);
      th_t.apply(cfg.eval);
      cfg.head_path.clear();
      const SeedContext ctx = prepare_seed(cfg, th_c.seed);
      write_head(th_out, ctx.clean_head);
      char line[160];
      std::snprintf(line, sizeof line, "wrote %s (train acc %.4f", th_out.c_str(),
                    accuracy(ctx.encoder, ctx.clean_head, ctx.train));
      out << line;
      if (ctx.clean_acc) {
        std::snprintf(line, sizeof line, ", test acc %.4f", *ctx.clean_acc);
        out << line;
      }
      out << ")\n";
    } else if (*gp) {
      ExperimentConfig cfg = base_config(gp_c);
      gp_in.apply(cfg);
      set_if(gp_eps, cfg.target.eps_w);
      set_if(gp_steps, cfg.target.steps);
      set_if(gp_power, cfg.target.norm_power);
      cfg.target_path.clear();
      const SeedContext ctx = prepare_seed(cfg, gp_c.seed);
      write_head(gp_out, ctx.target);
      const FeatureData vz = encode(ctx.encoder, ctx.val);
      char line[256];
      std::snprintf(line, sizeof line, "wrote %s (val loss %.6f -> %.6f, distance %.6g)\n",
                    gp_out.c_str(), ce_loss(ctx.clean_head, vz), ce_loss(ctx.target, vz),
                    param_distance(ctx.clean_head, ctx.target));
      out << line;
    } else if (*at) {
      ExperimentConfig cfg = base_config(at_c);
      at_in.apply(cfg);
      set_if(at_eps_w, cfg.target.eps_w);
      AttackEntry a = pick_attack(cfg, at_method, at_label);
      set_if(at_eta, a.cfg.eta);
      set_if(at_epochs, a.cfg.epochs);
      set_if(at_beta, a.cfg.beta);
      set_if(at_gamma, a.cfg.gamma);
      set_if(at_t, a.cfg.t);
      set_if(at_k, a.cfg.k);
      set_if(at_box, a.box);
      if (at_eps_inf) a.eps_inf = *at_eps_inf;
      if (at_constrained) a.cfg.constrained = true;
      if (at_refine) a.cfg.use_optional_refinement = true;
      const double eps_d = at_eps_d ? *at_eps_d : (a.eps_grid.empty() ? a.cfg.eps_d : a.eps_grid.front());
      cfg.attacks = {a};
      validate_config(cfg);
      const SeedContext ctx = prepare_seed(cfg, at_c.seed);
      const AttackOutput res = run_attack(a, ctx, cfg.eval, eps_d);
      char line[256];
      if (res.perturbed) {
        write_dataset(at_out, *res.perturbed);
        std::snprintf(line, sizeof line, "wrote %s (%s, %zu perturbed points, linf %.6g)\n",
                      at_out.c_str(), at_method.c_str(), res.perturbed->size(),
                      norms(res.perturbed->X).linf);
      } else {
        const PoisonResult& p = *res.poison;
        const bool feat = p.space == PoisonSpace::feature;
        write_dataset(at_out, feat ? as_dataset(p.zeta) : p.nu);
        if (at_trace) write_trace(*at_trace, p.residual_trace);
        std::snprintf(line, sizeof line,
                      "wrote %s (%s, %zu %s-space points, final objective %.6g, linf %.6g)\n",
                      at_out.c_str(), at_method.c_str(), feat ? p.zeta.size() : p.nu.size(),
                      feat ? "feature" : "input",
                      p.residual_trace.empty() ? 0.0 : p.residual_trace.back(), p.final_linf);
      }
      out << line;
    } else if (*ev) {
      ExperimentConfig cfg = base_config(ev_c);
      ev_in.apply(cfg);
      ev_t.apply(cfg.eval);
      const SeedContext ctx = prepare_seed(cfg, ev_c.seed);
      if (!ctx.test) throw Error("evaluate needs a test set (--test or [data] test)");
      const LabeledData poison = load_dataset(ev_poison);
      std::string space = ev_space;
      if (space == "auto") {
        space = poison.X.cols() == ctx.train.X.cols() ? "input" : "feature";
      }
      const TrainConfig ecfg = with_seed(cfg.eval, ev_c.seed);
      EvalOptions opt{&ctx.target, ctx.clean_acc, ev_defend};
      EvalReport r;
      if (ev_replace) {
        r = evaluate_replacement(ctx.encoder, ctx.train, *ctx.test, poison, ecfg, opt);
      } else if (space == "feature") {
        r = evaluate_poison(ctx.encoder, ctx.train, *ctx.test,
                            FeatureData{poison.X, poison.y, poison.classes}, ecfg, opt);
      } else {
        r = evaluate_poison(ctx.encoder, ctx.train, *ctx.test, poison, ecfg, opt);
      }
      r.attack = ev_label;
      r.seed = ev_c.seed;
      r.eps_d = ev_eps_d ? *ev_eps_d
                         : static_cast<double>(r.n_poison) / static_cast<double>(ctx.train.size());
      if (ev_out) plab::detail::write_file(*ev_out, reports_jsonl({r}));
      if (ev_csv) plab::detail::write_file(*ev_csv, reports_csv({r}));
      out << report_record(r).dump() << "\n";
    } else if (*sw) {
      ExperimentConfig cfg = base_config(sw_c);
      if (sw->count("--seed")) cfg.seeds = {sw_c.seed};
      const auto reports = run_experiment(cfg);
      const std::string dir = sw_dir.empty() ? "." : sw_dir;
      emit_report(reports, {dir + "/report.jsonl", dir + "/report.csv", dir + "/summary.csv"});
      std::size_t failed = 0;
      for (const auto& r : reports) failed += r.ok() ? 0 : 1;
      out << "wrote " << reports.size() << " cells (" << failed << " failed) to " << dir << "\n";
    } else if (*rp) {
      if (!rp_show && !rp_in) throw CLI::RequiredError("report needs --show-config or --input");
      ExperimentConfig cfg = base_config(rp_c);
      if (rp->count("--seed")) cfg.seeds = {rp_c.seed};
      if (rp_show) out << render_config(cfg);
      if (rp_in) {
        const auto reports = parse_reports_jsonl(plab::detail::read_file(*rp_in));
        const std::string table = summary_csv(summarize(reports));
        if (rp_out) {
          plab::detail::write_file(*rp_out, table);
        } else {
          out << table;
        }
      }
    }
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace plab::cli
