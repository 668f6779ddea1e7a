#pragma once

// Retraining-based evaluation of poison sets, the magnitude filter defense and
// multi-seed sweeps over attacks and poison budgets.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <tuple>
#include <utility>
#include <vector>

#include "plab/attacks.hpp"
#include "plab/io.hpp"
#include "plab/targets.hpp"
#include "plab/trainer.hpp"

namespace plab {

struct EvalReport {
  std::string attack;
  double eps_d = 0.0;
  std::uint64_t seed = 0;
  double clean_acc = 0.0;
  double poisoned_acc = 0.0;
  double drop = 0.0;
  std::optional<double> reach_gap;
  double poison_linf = 0.0;
  std::size_t n_poison = 0;
  std::size_t n_removed_by_defense = 0;
  std::string error;

  bool ok() const { return error.empty(); }
  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

template <typename Data>
struct FilterResult {
  Data kept;
  std::size_t removed = 0;
};

namespace detail {

inline const Matrix& rows_of(const LabeledData& d) { return d.X; }
inline const Matrix& rows_of(const FeatureData& d) { return d.Z; }

}  // namespace detail

// Drops every row whose largest absolute entry exceeds clean_linf.
template <typename Data>
FilterResult<Data> anomaly_filter(const Data& nu, double clean_linf) {
  if (!(clean_linf > 0.0)) throw Error("anomaly_filter: clean_linf must be > 0");
  const Matrix& m = detail::rows_of(nu);
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double mx = 0.0;
    for (double v : m.row(i)) mx = std::max(mx, std::abs(v));
    if (mx <= clean_linf) keep.push_back(i);
  }
  return {subset(nu, keep), m.rows() - keep.size()};
}

struct EvalOptions {
  const LinearHead* target = nullptr;
  std::optional<double> clean_acc;
  bool defend = false;
};

namespace detail {

inline EvalReport evaluate_features(const FeatureData& clean_train, const FeatureData& test,
                                    const FeatureData& poison, double poison_linf,
                                    std::size_t removed, const TrainConfig& cfg,
                                    const EvalOptions& opt) {
  EvalReport r;
  r.clean_acc = opt.clean_acc ? *opt.clean_acc : accuracy(train_head(clean_train, cfg), test);
  const LinearHead h = train_head(poison.size() ? concat(clean_train, poison) : clean_train, cfg);
  r.poisoned_acc = accuracy(h, test);
  r.drop = r.clean_acc - r.poisoned_acc;
  if (opt.target) r.reach_gap = param_distance(h, *opt.target);
  r.poison_linf = poison_linf;
  r.n_poison = poison.size() + removed;
  r.n_removed_by_defense = removed;
  return r;
}

}  // namespace detail

// Retrains a fresh head on f(train) plus the input-space poison and reports
// test accuracy against clean training with the same seed.
inline EvalReport evaluate_poison(const Encoder& f, const LabeledData& train,
                                  const LabeledData& test, const LabeledData& nu,
                                  const TrainConfig& cfg, const EvalOptions& opt = {}) {
  const double linf = nu.size() ? norms(nu.X).linf : 0.0;
  LabeledData kept = nu;
  std::size_t removed = 0;
  if (opt.defend && nu.size()) {
    auto fr = anomaly_filter(nu, norms(train.X).linf);
    kept = std::move(fr.kept);
    removed = fr.removed;
  }
  return detail::evaluate_features(encode(f, train), encode(f, test), encode(f, kept), linf,
                                   removed, cfg, opt);
}

// Feature-space poison: zeta rows are concatenated with f(train) directly.
inline EvalReport evaluate_poison(const Encoder& f, const LabeledData& train,
                                  const LabeledData& test, const FeatureData& zeta,
                                  const TrainConfig& cfg, const EvalOptions& opt = {}) {
  const FeatureData clean = encode(f, train);
  const double linf = zeta.size() ? norms(zeta.Z).linf : 0.0;
  FeatureData kept = zeta;
  std::size_t removed = 0;
  if (opt.defend && zeta.size()) {
    auto fr = anomaly_filter(zeta, norms(clean.Z).linf);
    kept = std::move(fr.kept);
    removed = fr.removed;
  }
  return detail::evaluate_features(clean, encode(f, test), kept, linf, removed, cfg, opt);
}

inline EvalReport evaluate_poison(const Encoder& f, const LabeledData& train,
                                  const LabeledData& test, const PoisonResult& poison,
                                  const TrainConfig& cfg, const EvalOptions& opt = {}) {
  return poison.space == PoisonSpace::feature
             ? evaluate_poison(f, train, test, poison.zeta, cfg, opt)
             : evaluate_poison(f, train, test, poison.nu, cfg, opt);
}

// The defender trains on the perturbed set in place of the clean one.
inline EvalReport evaluate_replacement(const Encoder& f, const LabeledData& train,
                                       const LabeledData& test, const LabeledData& perturbed,
                                       const TrainConfig& cfg, const EvalOptions& opt = {}) {
  EvalReport r;
  const FeatureData test_z = encode(f, test);
  r.clean_acc = opt.clean_acc ? *opt.clean_acc : accuracy(train_head(encode(f, train), cfg), test_z);
  const LinearHead h = train_head(encode(f, perturbed), cfg);
  r.poisoned_acc = accuracy(h, test_z);
  r.drop = r.clean_acc - r.poisoned_acc;
  if (opt.target) r.reach_gap = param_distance(h, *opt.target);
  r.poison_linf = norms(perturbed.X).linf;
  r.n_poison = perturbed.size();
  return r;
}

// ---------------------------------------------------------------------------
// Experiments

inline const std::vector<std::string>& attack_methods() {
  static const std::vector<std::string> m{"gc-input", "gc-feature", "tgda", "fm", "emn",
                                          "decoder-inv"};
  return m;
}

struct DataSpec {
  std::string train;  // empty: synthetic blobs
  std::string test;
  std::string val;    // empty: validate on the training set
  BlobSpec blobs{600, 8, 3, 1.5, 1.0, Box{-5.0, 5.0}};
  std::size_t n_test = 600;

  friend bool operator==(const DataSpec&, const DataSpec&) = default;
};

struct EncoderSpec {
  std::string path;  // empty: pretrain on the training set
  std::vector<std::size_t> dims{8, 16, 4};
  TrainConfig train{200, 0.1, Schedule::cosine, 0, 0};

  friend bool operator==(const EncoderSpec&, const EncoderSpec&) = default;
};

struct AttackEntry {
  std::string label;
  std::string method;
  AttackConfig cfg;
  std::string box = "none";  // none | data | "lo,hi"
  std::optional<double> eps_inf;  // default 8/255 of the data range
  bool defend = false;
  std::vector<double> eps_grid;  // empty: the experiment grid

  friend bool operator==(const AttackEntry&, const AttackEntry&) = default;
};

struct ExperimentConfig {
  DataSpec data;
  EncoderSpec encoder;
  std::string head_path;
  TrainConfig eval{100, 0.1, Schedule::cosine, 0, 0};
  std::string target_path;
  TargetSpec target;
  std::vector<AttackEntry> attacks;
  std::vector<double> eps_grid{0.03, 0.1, 0.5, 1.0};
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

inline TrainConfig with_seed(TrainConfig cfg, std::uint64_t seed) {
  cfg.seed = seed;
  return cfg;
}

inline LabeledData load_dataset(const std::string& path) {
  const bool csv = path.size() >= 4 && path.compare(path.size() - 4, 4, ".csv") == 0;
  return csv ? read_csv_dataset(path) : read_dataset(path);
}

inline Box data_range(const LabeledData& d) {
  if (d.X.empty()) throw Error("data_range: empty dataset");
  const auto [lo, hi] = std::minmax_element(d.X.values().begin(), d.X.values().end());
  return Box{*lo, *hi};
}

// Everything an attack cell needs that depends only on the seed.
struct SeedContext {
  std::uint64_t seed = 0;
  LabeledData train;
  std::optional<LabeledData> test;
  LabeledData val;
  Encoder encoder;
  LinearHead clean_head;
  std::optional<double> clean_acc;
  LinearHead target;
  Box range;
};

struct DataBundle {
  LabeledData train;
  std::optional<LabeledData> test;
  LabeledData val;
};

// Synthetic data draws the training set and then the test set from Rng(seed).
inline DataBundle load_data(const ExperimentConfig& cfg, std::uint64_t seed) {
  DataBundle b;
  if (cfg.data.train.empty()) {
    Rng rng(seed);
    b.train = gen_blobs(rng, cfg.data.blobs);
    BlobSpec ts = cfg.data.blobs;
    ts.n = cfg.data.n_test;
    b.test = gen_blobs(rng, ts);
  } else {
    b.train = load_dataset(cfg.data.train);
    if (!cfg.data.test.empty()) b.test = load_dataset(cfg.data.test);
  }
  b.val = cfg.data.val.empty() ? b.train : load_dataset(cfg.data.val);
  return b;
}

inline SeedContext prepare_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
  SeedContext ctx;
  ctx.seed = seed;
  DataBundle b = load_data(cfg, seed);
  ctx.train = std::move(b.train);
  ctx.test = std::move(b.test);
  ctx.val = std::move(b.val);
  ctx.range = data_range(ctx.train);

  ctx.encoder = cfg.encoder.path.empty()
                    ? pretrain_encoder(ctx.train, cfg.encoder.dims, with_seed(cfg.encoder.train, seed))
                    : read_model(cfg.encoder.path);
  if (ctx.encoder.in_dim() != ctx.train.X.cols()) {
    throw DimensionError("encoder input dim " + std::to_string(ctx.encoder.in_dim()) +
                         " does not match data dim " + std::to_string(ctx.train.X.cols()));
  }
  const TrainConfig eval = with_seed(cfg.eval, seed);
  ctx.clean_head = cfg.head_path.empty() ? train_head(ctx.encoder, ctx.train, eval)
                                         : read_head(cfg.head_path);
  if (ctx.test) ctx.clean_acc = accuracy(ctx.encoder, ctx.clean_head, *ctx.test);
  ctx.target = cfg.target_path.empty() ? gradpc(ctx.encoder, ctx.clean_head, ctx.val, cfg.target)
                                       : read_head(cfg.target_path);
  return ctx;
}

inline std::optional<Box> resolve_box(const AttackEntry& a, const Box& range) {
  if (a.box == "data") return range;
  if (a.box == "none") return a.cfg.constrained && a.method == "gc-input" ? std::optional{range}
                                                                          : std::nullopt;
  const auto comma = a.box.find(',');
  if (comma == std::string::npos) throw Error("box must be none, data or lo,hi: '" + a.box + "'");
  try {
    const Box b{std::stod(a.box.substr(0, comma)), std::stod(a.box.substr(comma + 1))};
    if (b.lo > b.hi) throw Error("box: lo > hi in '" + a.box + "'");
    return b;
  } catch (const std::logic_error&) {
    throw Error("box must be none, data or lo,hi: '" + a.box + "'");
  }
}

inline double resolve_eps_inf(const AttackEntry& a, const Box& range) {
  return a.eps_inf ? *a.eps_inf : 8.0 / 255.0 * range.range();
}

inline Rng cell_rng(std::uint64_t seed, std::string_view label, double eps_d) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char ch : label) h = (h ^ ch) * 0x100000001B3ULL;
  return Rng(seed, detail::mix64(h ^ std::bit_cast<std::uint64_t>(eps_d)));
}

inline AttackConfig resolve_attack(const AttackEntry& a, const SeedContext& ctx,
                                   const TrainConfig& eval, double eps_d) {
  AttackConfig c = a.cfg;
  c.eps_d = eps_d;
  c.box = resolve_box(a, ctx.range);
  c.defender = with_seed(eval, ctx.seed);
  c.decoder.seed = ctx.seed;
  return c;
}

struct AttackOutput {
  std::optional<PoisonResult> poison;
  std::optional<LabeledData> perturbed;  // EMN: replaces the training set
};

inline AttackOutput run_attack(const AttackEntry& a, const SeedContext& ctx,
                               const TrainConfig& eval, double eps_d) {
  const AttackConfig c = resolve_attack(a, ctx, eval, eps_d);
  Rng rng = cell_rng(ctx.seed, a.label, eps_d);
  const Encoder& f = ctx.encoder;
  AttackOutput out;
  if (a.method == "gc-feature") {
    out.poison = gc_feature_attack(encode(f, ctx.train), ctx.target, c, rng);
  } else if (a.method == "gc-input") {
    out.poison = gc_input_attack(ctx.train, f, ctx.target, c, rng);
  } else if (a.method == "tgda") {
    out.poison = tgda_attack(ctx.train, ctx.val, f, c, rng);
  } else if (a.method == "fm") {
    out.poison = feature_matching_attack(ctx.train, f, ctx.target, c, rng);
  } else if (a.method == "decoder-inv") {
    std::vector<std::size_t> dims{f.out_dim()};
    dims.insert(dims.end(), c.decoder_hidden.begin(), c.decoder_hidden.end());
    dims.push_back(ctx.train.X.cols());
    const Decoder g = train_decoder(f, ctx.train, dims, c.decoder);
    out.poison = decoder_inversion_attack(ctx.train, f, g, ctx.target, c, rng);
  } else if (a.method == "emn") {
    out.perturbed = emn_attack(ctx.train, f, c, resolve_eps_inf(a, ctx.range), rng).perturbed;
  } else {
    throw Error("unknown attack method '" + a.method + "'");
  }
  return out;
}

inline EvalReport run_cell(const AttackEntry& a, const SeedContext& ctx, const TrainConfig& eval,
                           double eps_d) {
  EvalReport r;
  try {
    if (!ctx.test) throw Error("no test set configured");
    const TrainConfig ecfg = with_seed(eval, ctx.seed);
    const AttackOutput out = run_attack(a, ctx, eval, eps_d);
    EvalOptions opt{&ctx.target, ctx.clean_acc, a.defend};
    r = out.perturbed ? evaluate_replacement(ctx.encoder, ctx.train, *ctx.test, *out.perturbed, ecfg, opt)
                      : evaluate_poison(ctx.encoder, ctx.train, *ctx.test, *out.poison, ecfg, opt);
    if (out.perturbed) r.reach_gap.reset();
  } catch (const std::exception& e) {
    r = EvalReport{};
    r.error = e.what();
  }
  r.attack = a.label;
  r.eps_d = eps_d;
  r.seed = ctx.seed;
  return r;
}

inline std::vector<double> cell_grid(const ExperimentConfig& cfg, const AttackEntry& a) {
  if (a.method == "emn") return {1.0};
  return a.eps_grid.empty() ? cfg.eps_grid : a.eps_grid;
}

// One report per (attack, eps_d, seed), in that order. A failing cell records
// its error and the sweep continues.
inline std::vector<EvalReport> run_experiment(const ExperimentConfig& cfg) {
  std::map<std::tuple<std::size_t, std::size_t, std::size_t>, EvalReport> cells;
  for (std::size_t si = 0; si < cfg.seeds.size(); ++si) {
    const std::uint64_t seed = cfg.seeds[si];
    std::optional<SeedContext> ctx;
    std::string setup_error;
    try {
      ctx = prepare_seed(cfg, seed);
    } catch (const std::exception& e) {
      setup_error = e.what();
    }
    for (std::size_t ai = 0; ai < cfg.attacks.size(); ++ai) {
      const auto grid = cell_grid(cfg, cfg.attacks[ai]);
      for (std::size_t ei = 0; ei < grid.size(); ++ei) {
        EvalReport r;
        if (ctx) {
          r = run_cell(cfg.attacks[ai], *ctx, cfg.eval, grid[ei]);
        } else {
          r.attack = cfg.attacks[ai].label;
          r.eps_d = grid[ei];
          r.seed = seed;
          r.error = setup_error;
        }
        cells.emplace(std::tuple{ai, ei, si}, std::move(r));
      }
    }
  }
  std::vector<EvalReport> out;
  out.reserve(cells.size());
  for (auto& [key, r] : cells) out.push_back(std::move(r));
  return out;
}

struct Stat {
  double mean = 0.0;
  double std = 0.0;
  std::size_t count = 0;
};

inline Stat stat_of(const std::vector<double>& xs) {
  Stat s;
  s.count = xs.size();
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double v = 0.0;
    for (double x : xs) v += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(v / static_cast<double>(xs.size() - 1));
  }
  return s;
}

struct CellSummary {
  std::string attack;
  double eps_d = 0.0;
  std::size_t runs = 0;
  std::size_t failed = 0;
  Stat clean_acc;
  Stat poisoned_acc;
  Stat drop;
  Stat reach_gap;
  Stat poison_linf;
};

// Mean and sample standard deviation per (attack, eps_d) over successful
// seeds, in first-appearance order.
inline std::vector<CellSummary> summarize(const std::vector<EvalReport>& reports) {
  std::vector<CellSummary> out;
  std::vector<std::vector<const EvalReport*>> groups;
  for (const auto& r : reports) {
    auto it = std::find_if(out.begin(), out.end(), [&](const CellSummary& c) {
      return c.attack == r.attack && c.eps_d == r.eps_d;
    });
    if (it == out.end()) {
      CellSummary c;
      c.attack = r.attack;
      c.eps_d = r.eps_d;
      out.push_back(std::move(c));
      groups.emplace_back();
      it = out.end() - 1;
    }
    groups[static_cast<std::size_t>(it - out.begin())].push_back(&r);
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::vector<double> clean, pois, drop, reach, linf;
    for (const EvalReport* r : groups[i]) {
      ++out[i].runs;
      if (!r->ok()) {
        ++out[i].failed;
        continue;
      }
      clean.push_back(r->clean_acc);
      pois.push_back(r->poisoned_acc);
      drop.push_back(r->drop);
      if (r->reach_gap) reach.push_back(*r->reach_gap);
      linf.push_back(r->poison_linf);
    }
    out[i].clean_acc = stat_of(clean);
    out[i].poisoned_acc = stat_of(pois);
    out[i].drop = stat_of(drop);
    out[i].reach_gap = stat_of(reach);
    out[i].poison_linf = stat_of(linf);
  }
  return out;
}

}  // namespace plab
