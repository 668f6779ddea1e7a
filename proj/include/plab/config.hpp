#pragma once

// Experiment configuration text: `key = value` lines grouped under
// [data], [encoder], [eval], [target], [sweep] and one [attack.<label>]
// section per attack. `#` starts a comment. Lists are comma separated,
// optionally bracketed. Unknown sections and keys are errors.

#include <charconv>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <type_traits>
#include <vector>

#include "plab/harness.hpp"

namespace plab {

class ConfigError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string strip_comment(std::string_view line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == '#' && !quoted) return std::string(line.substr(0, i));
  }
  return std::string(line);
}

inline std::string unquote(std::string_view v) {
  v = trim(v);
  if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return std::string(v.substr(1, v.size() - 2));
  return std::string(v);
}

inline double to_double(std::string_view v) {
  const std::string s = unquote(v);
  double out = 0.0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec != std::errc{} || p != s.data() + s.size() || s.empty()) {
    throw ConfigError("expected a number, got '" + s + "'");
  }
  return out;
}

inline std::uint64_t to_u64(std::string_view v) {
  const std::string s = unquote(v);
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec != std::errc{} || p != s.data() + s.size() || s.empty()) {
    throw ConfigError("expected a non-negative integer, got '" + s + "'");
  }
  return out;
}

inline std::size_t to_size(std::string_view v) { return static_cast<std::size_t>(to_u64(v)); }

inline bool to_bool(std::string_view v) {
  const std::string s = unquote(v);
  if (s == "true") return true;
  if (s == "false") return false;
  throw ConfigError("expected true or false, got '" + s + "'");
}

inline Schedule to_schedule(std::string_view v) {
  const std::string s = unquote(v);
  if (s == "cosine") return Schedule::cosine;
  if (s == "constant") return Schedule::constant;
  throw ConfigError("schedule must be cosine or constant, got '" + s + "'");
}

template <typename T, typename F>
std::vector<T> to_list(std::string_view v, F conv) {
  std::string s = unquote(v);
  std::string_view body = trim(s);
  if (!body.empty() && body.front() == '[') {
    if (body.back() != ']') throw ConfigError("unterminated list '" + s + "'");
    body = body.substr(1, body.size() - 2);
  }
  std::vector<T> out;
  if (trim(body).empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto comma = body.find(',', start);
    out.push_back(conv(trim(body.substr(start, comma - start))));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

inline std::string fmt(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline const char* schedule_name(Schedule s) { return s == Schedule::cosine ? "cosine" : "constant"; }

using Setter = std::function<void(std::string_view)>;
using KeyTable = std::map<std::string, Setter, std::less<>>;

inline void add_train_keys(KeyTable& t, TrainConfig& c, const std::string& prefix = "") {
  t[prefix + "epochs"] = [&c](std::string_view v) { c.epochs = to_size(v); };
  t[prefix + "lr"] = [&c](std::string_view v) { c.lr = to_double(v); };
  t[prefix + "schedule"] = [&c](std::string_view v) { c.schedule = to_schedule(v); };
  t[prefix + "batch"] = [&c](std::string_view v) { c.batch = to_size(v); };
}

inline KeyTable data_keys(DataSpec& d) {
  KeyTable t;
  t["train"] = [&d](std::string_view v) { d.train = unquote(v); };
  t["test"] = [&d](std::string_view v) { d.test = unquote(v); };
  t["val"] = [&d](std::string_view v) { d.val = unquote(v); };
  t["n"] = [&d](std::string_view v) { d.blobs.n = to_size(v); };
  t["n_test"] = [&d](std::string_view v) { d.n_test = to_size(v); };
  t["d"] = [&d](std::string_view v) { d.blobs.d = to_size(v); };
  t["classes"] = [&d](std::string_view v) { d.blobs.classes = to_size(v); };
  t["separation"] = [&d](std::string_view v) { d.blobs.separation = to_double(v); };
  t["std"] = [&d](std::string_view v) { d.blobs.std = to_double(v); };
  t["lo"] = [&d](std::string_view v) { d.blobs.box.lo = to_double(v); };
  t["hi"] = [&d](std::string_view v) { d.blobs.box.hi = to_double(v); };
  return t;
}

inline KeyTable encoder_keys(EncoderSpec& e) {
  KeyTable t;
  t["path"] = [&e](std::string_view v) { e.path = unquote(v); };
  t["dims"] = [&e](std::string_view v) { e.dims = to_list<std::size_t>(v, to_size); };
  add_train_keys(t, e.train);
  return t;
}

inline KeyTable eval_keys(ExperimentConfig& c) {
  KeyTable t;
  t["head"] = [&c](std::string_view v) { c.head_path = unquote(v); };
  add_train_keys(t, c.eval);
  return t;
}

inline KeyTable target_keys(ExperimentConfig& c) {
  KeyTable t;
  t["path"] = [&c](std::string_view v) { c.target_path = unquote(v); };
  t["eps_w"] = [&c](std::string_view v) { c.target.eps_w = to_double(v); };
  t["steps"] = [&c](std::string_view v) { c.target.steps = to_size(v); };
  t["norm_power"] = [&c](std::string_view v) { c.target.norm_power = static_cast<int>(to_u64(v)); };
  return t;
}

inline KeyTable sweep_keys(ExperimentConfig& c) {
  KeyTable t;
  t["eps_d"] = [&c](std::string_view v) { c.eps_grid = to_list<double>(v, to_double); };
  t["seeds"] = [&c](std::string_view v) { c.seeds = to_list<std::uint64_t>(v, to_u64); };
  return t;
}

inline KeyTable attack_keys(AttackEntry& a) {
  AttackConfig& c = a.cfg;
  KeyTable t;
  t["method"] = [&a](std::string_view v) { a.method = unquote(v); };
  t["eps_d"] = [&a](std::string_view v) { a.eps_grid = to_list<double>(v, to_double); };
  t["box"] = [&a](std::string_view v) { a.box = unquote(v); };
  t["eps_inf"] = [&a](std::string_view v) { a.eps_inf = to_double(v); };
  t["defend"] = [&a](std::string_view v) { a.defend = to_bool(v); };
  t["eta"] = [&c](std::string_view v) { c.eta = to_double(v); };
  t["epochs"] = [&c](std::string_view v) { c.epochs = to_size(v); };
  t["tgda_epochs"] = [&c](std::string_view v) { c.tgda_epochs = to_size(v); };
  t["gamma"] = [&c](std::string_view v) { c.gamma = to_double(v); };
  t["beta"] = [&c](std::string_view v) { c.beta = to_double(v); };
  t["stop_residual"] = [&c](std::string_view v) { c.stop_residual = to_double(v); };
  t["k"] = [&c](std::string_view v) { c.k = to_size(v); };
  t["s"] = [&c](std::string_view v) { c.s = to_size(v); };
  t["t"] = [&c](std::string_view v) { c.t = to_size(v); };
  t["use_optional_refinement"] = [&c](std::string_view v) { c.use_optional_refinement = to_bool(v); };
  t["constrained"] = [&c](std::string_view v) { c.constrained = to_bool(v); };
  t["damping"] = [&c](std::string_view v) { c.damping = to_double(v); };
  t["cg_tol"] = [&c](std::string_view v) { c.cg_tol = to_double(v); };
  t["cg_max_iter"] = [&c](std::string_view v) { c.cg_max_iter = to_size(v); };
  t["max_halvings"] = [&c](std::string_view v) { c.max_halvings = to_size(v); };
  t["emn_rounds"] = [&c](std::string_view v) { c.emn.rounds = to_size(v); };
  t["emn_head_steps"] = [&c](std::string_view v) { c.emn.head_steps = to_size(v); };
  t["emn_pgd_steps"] = [&c](std::string_view v) { c.emn.pgd_steps = to_size(v); };
  t["emn_step_fraction"] = [&c](std::string_view v) { c.emn.step_fraction = to_double(v); };
  t["emn_head_lr"] = [&c](std::string_view v) { c.emn.head_lr = to_double(v); };
  t["emn_head_init_scale"] = [&c](std::string_view v) { c.emn.head_init_scale = to_double(v); };
  t["emn_random_start"] = [&c](std::string_view v) { c.emn.random_start = to_bool(v); };
  t["emn_end_to_end"] = [&c](std::string_view v) { c.emn.end_to_end = to_bool(v); };
  t["decoder_hidden"] = [&c](std::string_view v) { c.decoder_hidden = to_list<std::size_t>(v, to_size); };
  add_train_keys(t, c.decoder, "decoder_");
  return t;
}

}  // namespace detail

inline std::vector<AttackEntry> default_attacks() {
  auto entry = [](std::string label, std::string method) {
    AttackEntry a;
    a.label = std::move(label);
    a.method = std::move(method);
    return a;
  };
  std::vector<AttackEntry> out;
  out.push_back(entry("gc-feature", "gc-feature"));
  out.push_back(entry("gc-input", "gc-input"));
  out.push_back(entry("gc-input-constrained", "gc-input"));
  out.back().cfg.constrained = true;
  out.push_back(entry("tgda", "tgda"));
  out.push_back(entry("fm", "fm"));
  out.push_back(entry("fm-r", "fm"));
  out.back().defend = true;
  out.push_back(entry("decoder-inv", "decoder-inv"));
  out.push_back(entry("emn", "emn"));
  return out;
}

inline void validate_config(const ExperimentConfig& c) {
  auto check_train = [](const TrainConfig& t, const char* where) {
    try {
      t.validate();
    } catch (const Error& e) {
      throw ConfigError(std::string(where) + " " + e.what());
    }
  };
  check_train(c.encoder.train, "[encoder]");
  check_train(c.eval, "[eval]");
  if (!(c.target.eps_w > 0.0)) throw ConfigError("[target] eps_w must be > 0");
  if (c.target.steps < 1) throw ConfigError("[target] steps must be >= 1");
  if (c.target.norm_power != 1 && c.target.norm_power != 2) {
    throw ConfigError("[target] norm_power must be 1 or 2");
  }
  if (c.seeds.empty()) throw ConfigError("[sweep] seeds must not be empty");
  if (c.data.blobs.classes < 2) throw ConfigError("[data] classes must be >= 2");
  if (c.data.blobs.box.lo > c.data.blobs.box.hi) throw ConfigError("[data] lo > hi");
  const bool synthetic = c.data.train.empty();
  auto check_grid = [&](const std::vector<double>& grid, const std::string& where) {
    for (double e : grid) {
      if (!(e > 0.0)) throw ConfigError(where + " eps_d values must be > 0");
      if (synthetic && std::floor(e * static_cast<double>(c.data.blobs.n) + 0.5) < 1.0) {
        throw ConfigError(where + " eps_d " + detail::fmt(e) + " yields no poison point for n=" +
                          std::to_string(c.data.blobs.n));
      }
    }
  };
  check_grid(c.eps_grid, "[sweep]");
  for (const auto& a : c.attacks) {
    const std::string where = "[attack." + a.label + "]";
    const auto& m = attack_methods();
    if (std::find(m.begin(), m.end(), a.method) == m.end()) {
      throw ConfigError(where + " method must be one of gc-input, gc-feature, tgda, fm, emn, "
                        "decoder-inv; got '" + a.method + "'");
    }
    check_grid(a.eps_grid, where);
    if (!(a.cfg.eta > 0.0)) throw ConfigError(where + " eta must be > 0");
    if (a.cfg.gamma < 0.0 || a.cfg.beta < 0.0) throw ConfigError(where + " gamma and beta must be >= 0");
    if (a.eps_inf && *a.eps_inf < 0.0) throw ConfigError(where + " eps_inf must be >= 0");
    try {
      resolve_box(a, Box{0.0, 0.0});
    } catch (const Error& e) {
      throw ConfigError(where + " " + e.what());
    }
  }
}

inline ExperimentConfig parse_config(std::string_view text, const std::string& source = "config") {
  ExperimentConfig cfg;
  bool any_attack = false;
  detail::KeyTable table;
  std::string section;
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& msg) -> ConfigError {
    return ConfigError(source + ":" + std::to_string(lineno) + ": " + msg);
  };
  while (std::getline(in, raw)) {
    ++lineno;
    const std::string stripped = detail::strip_comment(raw);
    const std::string_view line = detail::trim(stripped);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw fail("malformed section header '" + std::string(line) + "'");
      section = std::string(detail::trim(line.substr(1, line.size() - 2)));
      if (section == "data") {
        table = detail::data_keys(cfg.data);
      } else if (section == "encoder") {
        table = detail::encoder_keys(cfg.encoder);
      } else if (section == "eval") {
        table = detail::eval_keys(cfg);
      } else if (section == "target") {
        table = detail::target_keys(cfg);
      } else if (section == "sweep") {
        table = detail::sweep_keys(cfg);
      } else if (section.rfind("attack.", 0) == 0 && section.size() > 7) {
        const std::string label = section.substr(7);
        for (const auto& a : cfg.attacks) {
          if (a.label == label) throw fail("duplicate attack label '" + label + "'");
        }
        cfg.attacks.emplace_back();
        cfg.attacks.back().label = label;
        any_attack = true;
        table.clear();
      } else {
        throw fail("unknown section [" + section + "]");
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw fail("expected key = value, got '" + std::string(line) + "'");
    const std::string key(detail::trim(line.substr(0, eq)));
    const std::string_view value = detail::trim(line.substr(eq + 1));
    if (section.empty()) throw fail("key '" + key + "' outside any section");
    if (section.rfind("attack.", 0) == 0) table = detail::attack_keys(cfg.attacks.back());
    const auto it = table.find(key);
    if (it == table.end()) throw fail("unknown key '" + key + "' in [" + section + "]");
    try {
      it->second(value);
    } catch (const ConfigError& e) {
      throw fail("key '" + key + "': " + e.what());
    }
  }
  for (const auto& a : cfg.attacks) {
    if (a.method.empty()) throw ConfigError(source + ": [attack." + a.label + "] is missing method");
  }
  if (!any_attack) cfg.attacks = default_attacks();
  validate_config(cfg);
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  return parse_config(detail::read_file(path), path);
}

// Canonical text for a configuration; parse_config(render_config(c)) == c.
inline std::string render_config(const ExperimentConfig& c) {
  using detail::fmt;
  std::ostringstream o;
  auto q = [](const std::string& s) { return "\"" + s + "\""; };
  auto list = [](const auto& xs) {
    std::string s;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      if (i) s += ", ";
      if constexpr (std::is_floating_point_v<std::decay_t<decltype(xs[i])>>) {
        s += fmt(xs[i]);
      } else {
        s += std::to_string(xs[i]);
      }
    }
    return s;
  };
  auto train = [&](const TrainConfig& t, const std::string& prefix = "") {
    o << prefix << "epochs = " << t.epochs << "\n"
      << prefix << "lr = " << fmt(t.lr) << "\n"
      << prefix << "schedule = " << detail::schedule_name(t.schedule) << "\n"
      << prefix << "batch = " << t.batch << "\n";
  };
  o << "[data]\n";
  if (!c.data.train.empty()) o << "train = " << q(c.data.train) << "\n";
  if (!c.data.test.empty()) o << "test = " << q(c.data.test) << "\n";
  if (!c.data.val.empty()) o << "val = " << q(c.data.val) << "\n";
  o << "n = " << c.data.blobs.n << "\nn_test = " << c.data.n_test << "\nd = " << c.data.blobs.d
    << "\nclasses = " << c.data.blobs.classes << "\nseparation = " << fmt(c.data.blobs.separation)
    << "\nstd = " << fmt(c.data.blobs.std) << "\nlo = " << fmt(c.data.blobs.box.lo)
    << "\nhi = " << fmt(c.data.blobs.box.hi) << "\n\n[encoder]\n";
  if (!c.encoder.path.empty()) o << "path = " << q(c.encoder.path) << "\n";
  o << "dims = " << list(c.encoder.dims) << "\n";
  train(c.encoder.train);
  o << "\n[eval]\n";
  if (!c.head_path.empty()) o << "head = " << q(c.head_path) << "\n";
  train(c.eval);
  o << "\n[target]\n";
  if (!c.target_path.empty()) o << "path = " << q(c.target_path) << "\n";
  o << "eps_w = " << fmt(c.target.eps_w) << "\nsteps = " << c.target.steps
    << "\nnorm_power = " << c.target.norm_power << "\n\n[sweep]\neps_d = " << list(c.eps_grid)
    << "\nseeds = " << list(c.seeds) << "\n";
  for (const auto& a : c.attacks) {
    const AttackConfig& k = a.cfg;
    o << "\n[attack." << a.label << "]\nmethod = " << a.method << "\n";
    if (!a.eps_grid.empty()) o << "eps_d = " << list(a.eps_grid) << "\n";
    o << "box = " << q(a.box) << "\n";
    if (a.eps_inf) o << "eps_inf = " << fmt(*a.eps_inf) << "\n";
    o << "defend = " << (a.defend ? "true" : "false") << "\neta = " << fmt(k.eta)
      << "\nepochs = " << k.epochs << "\ntgda_epochs = " << k.tgda_epochs
      << "\ngamma = " << fmt(k.gamma) << "\nbeta = " << fmt(k.beta)
      << "\nstop_residual = " << fmt(k.stop_residual) << "\nk = " << k.k << "\ns = " << k.s
      << "\nt = " << k.t
      << "\nuse_optional_refinement = " << (k.use_optional_refinement ? "true" : "false")
      << "\nconstrained = " << (k.constrained ? "true" : "false")
      << "\ndamping = " << fmt(k.damping) << "\ncg_tol = " << fmt(k.cg_tol)
      << "\ncg_max_iter = " << k.cg_max_iter << "\nmax_halvings = " << k.max_halvings
      << "\nemn_rounds = " << k.emn.rounds << "\nemn_head_steps = " << k.emn.head_steps
      << "\nemn_pgd_steps = " << k.emn.pgd_steps
      << "\nemn_step_fraction = " << fmt(k.emn.step_fraction)
      << "\nemn_head_lr = " << fmt(k.emn.head_lr)
      << "\nemn_head_init_scale = " << fmt(k.emn.head_init_scale)
      << "\nemn_random_start = " << (k.emn.random_start ? "true" : "false")
      << "\nemn_end_to_end = " << (k.emn.end_to_end ? "true" : "false")
      << "\ndecoder_hidden = " << list(k.decoder_hidden) << "\n";
    train(k.decoder, "decoder_");
  }
  return o.str();
}

}  // namespace plab
