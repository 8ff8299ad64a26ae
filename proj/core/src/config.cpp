#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "lenc/error.hpp"
#include "lenc/harness.hpp"

namespace lenc {
namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    const std::string item = trim(s.substr(start, pos == std::string_view::npos ? pos : pos - start));
    if (!item.empty()) out.push_back(item);
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::uint64_t to_uint(const std::string& key, std::string_view v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + std::string(v) + "'");
  }
  return out;
}

double to_double(const std::string& key, std::string_view v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) {
    throw ConfigError(key + ": expected a number, got '" + std::string(v) + "'");
  }
  return out;
}

bool to_bool(const std::string& key, std::string_view v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": expected true/false, got '" + std::string(v) + "'");
}

std::vector<std::size_t> to_sizes(const std::string& key, std::string_view v) {
  std::vector<std::size_t> out;
  for (const auto& item : split(v, ',')) out.push_back(to_uint(key, item));
  return out;
}

EnvironmentConstraints to_constraints(const std::string& key, std::string_view v) {
  EnvironmentConstraints c;
  for (const auto& flag : split(v, ',')) {
    if (flag == "none") continue;
    if (flag == "dataset_privacy") c.dataset_privacy = true;
    else if (flag == "parameter_privacy") c.parameter_privacy = true;
    else if (flag == "architecture_privacy") c.architecture_privacy = true;
    else if (flag == "traffic_limited") c.traffic_limited = true;
    else if (flag == "latency_critical") c.latency_critical = true;
    else throw ConfigError(key + ": unknown constraint '" + flag + "'");
  }
  return c;
}

Availability to_availability(const std::string& key, std::string_view v) {
  if (v == "always") return Availability::Always;
  if (v == "even") return Availability::EvenCycles;
  if (v == "odd") return Availability::OddCycles;
  throw ConfigError(key + ": expected always/even/odd");
}

// "1:0*5, 2:1" -> five cycles of node 1 on task 0, then node 2 on task 1.
std::vector<ScheduledCycle> to_schedule(const std::string& key, std::string_view v) {
  std::vector<ScheduledCycle> out;
  for (const auto& item : split(v, ',')) {
    std::string_view s = item;
    std::size_t repeat = 1;
    if (const auto star = s.find('*'); star != std::string_view::npos) {
      repeat = to_uint(key, trim(s.substr(star + 1)));
      s = s.substr(0, star);
    }
    const auto colon = s.find(':');
    if (colon == std::string_view::npos) throw ConfigError(key + ": expected student:task");
    const ScheduledCycle c{static_cast<std::uint32_t>(to_uint(key, trim(s.substr(0, colon)))),
                           to_uint(key, trim(s.substr(colon + 1)))};
    out.insert(out.end(), repeat, c);
  }
  return out;
}

using Setter = std::function<void(ExperimentConfig&, const std::string& key, const std::string& v)>;

template <typename T>
Setter uint_field(T ExperimentConfig::*field) {
  return [field](ExperimentConfig& c, const std::string& k, const std::string& v) {
    c.*field = static_cast<T>(to_uint(k, v));
  };
}

Setter double_field(double ExperimentConfig::*field) {
  return [field](ExperimentConfig& c, const std::string& k, const std::string& v) {
    c.*field = to_double(k, v);
  };
}

const std::map<std::string, Setter>& setters() {
  using C = ExperimentConfig;
  using K = const std::string&;
  static const std::map<std::string, Setter> table = {
      {"seed", uint_field(&C::seed)},
      {"dataset.classes", uint_field(&C::classes)},
      {"dataset.dim", uint_field(&C::dim)},
      {"dataset.per_class", uint_field(&C::per_class)},
      {"dataset.sigma", double_field(&C::sigma)},
      {"dataset.center_spread", double_field(&C::center_spread)},
      {"tasks.count", uint_field(&C::task_count)},
      {"nodes.layers", [](C& c, K k, K v) { c.layer_sizes = to_sizes(k, v); }},
      {"schedule", [](C& c, K k, K v) { c.schedule = to_schedule(k, v); }},
      {"stream.size", uint_field(&C::stream_size)},
      {"selection", [](C& c, K, K v) { c.selection = parse_selection_policy(v); }},
      {"hp.alpha", [](C& c, K k, K v) { c.hp.alpha = to_double(k, v); }},
      {"hp.beta", [](C& c, K k, K v) { c.hp.beta = to_double(k, v); }},
      {"hp.gamma", [](C& c, K k, K v) { c.hp.gamma = to_double(k, v); }},
      {"hp.temperature", [](C& c, K k, K v) { c.hp.temperature = to_double(k, v); }},
      {"hp.scale_kl_by_t2", [](C& c, K k, K v) { c.hp.scale_kl_by_t2 = to_bool(k, v); }},
      {"transfer.lr", [](C& c, K k, K v) { c.transfer_fit.learning_rate = to_double(k, v); }},
      {"transfer.momentum", [](C& c, K k, K v) { c.transfer_fit.momentum = to_double(k, v); }},
      {"transfer.epochs", [](C& c, K k, K v) { c.transfer_fit.epochs = to_uint(k, v); }},
      {"transfer.batch_size", [](C& c, K k, K v) { c.transfer_fit.batch_size = to_uint(k, v); }},
      {"pretrain.lr", [](C& c, K k, K v) { c.pretrain_fit.learning_rate = to_double(k, v); }},
      {"pretrain.momentum", [](C& c, K k, K v) { c.pretrain_fit.momentum = to_double(k, v); }},
      {"pretrain.epochs", [](C& c, K k, K v) { c.pretrain_fit.epochs = to_uint(k, v); }},
      {"pretrain.batch_size", [](C& c, K k, K v) { c.pretrain_fit.batch_size = to_uint(k, v); }},
      {"ewc.lambda", double_field(&C::ewc_lambda)},
      {"ewc.fisher_samples", uint_field(&C::fisher_samples)},
      {"ksa.hidden", [](C& c, K k, K v) { c.ksa.vae.hidden = to_uint(k, v); }},
      {"ksa.latent", [](C& c, K k, K v) { c.ksa.vae.latent_dim = to_uint(k, v); }},
      {"ksa.epochs", [](C& c, K k, K v) { c.ksa.vae.epochs = to_uint(k, v); }},
      {"ksa.batch_size", [](C& c, K k, K v) { c.ksa.vae.batch_size = to_uint(k, v); }},
      {"ksa.lr", [](C& c, K k, K v) { c.ksa.vae.learning_rate = to_double(k, v); }},
      {"ksa.momentum", [](C& c, K k, K v) { c.ksa.vae.momentum = to_double(k, v); }},
      {"ksa.decoder_sigma", [](C& c, K k, K v) { c.ksa.vae.decoder_sigma = to_double(k, v); }},
      {"ksa.min_training_size",
       [](C& c, K k, K v) { c.ksa.vae.min_training_size = to_uint(k, v); }},
      {"regret.steps", [](C& c, K k, K v) { c.ksa.regret.opt_steps = to_uint(k, v); }},
      {"regret.lr", [](C& c, K k, K v) { c.ksa.regret.opt_lr = to_double(k, v); }},
      {"regret.draws", [](C& c, K k, K v) { c.ksa.regret.noise_draws = to_uint(k, v); }},
      {"regret.threads", [](C& c, K k, K v) { c.ksa.regret.threads = to_uint(k, v); }},
      {"calibration.epsilon_quantile",
       [](C& c, K k, K v) { c.ksa.calibration.epsilon_quantile = to_double(k, v); }},
      {"calibration.delta_quantile",
       [](C& c, K k, K v) { c.ksa.calibration.delta_quantile = to_double(k, v); }},
      {"calibration.stream_size",
       [](C& c, K k, K v) { c.ksa.calibration.stream_size = to_uint(k, v); }},
      {"calibration.resamples",
       [](C& c, K k, K v) { c.ksa.calibration.resamples = to_uint(k, v); }},
      {"calibration.holdout",
       [](C& c, K k, K v) { c.ksa.calibration.holdout_fraction = to_double(k, v); }},
      {"eval.route_points", uint_field(&C::eval_route_points)},
      {"fault.cycle", [](C& c, K k, K v) { c.fault_cycle = to_uint(k, v); }},
      {"fault.epoch", uint_field(&C::fault_epoch)},
  };
  return table;
}

void set_node_field(NodeSpec& n, const std::string& key, const std::string& field,
                    const std::string& v) {
  if (field == "layers") n.layer_sizes = to_sizes(key, v);
  else if (field == "pretrain") n.pretrain = to_sizes(key, v);
  else if (field == "constraints") n.constraints = to_constraints(key, v);
  else if (field == "availability") n.availability = to_availability(key, v);
  else if (field == "store_dataset") n.store_dataset = to_bool(key, v);
  else if (field == "store_accuracy") n.store_accuracy = to_bool(key, v);
  else throw ConfigError("unknown key '" + key + "'");
}

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::vector<std::size_t> ExperimentConfig::default_layers() const {
  return layer_sizes.empty() ? std::vector<std::size_t>{dim, 16} : layer_sizes;
}

void ExperimentConfig::validate() const {
  if (classes < 2) throw ConfigError("dataset.classes must be at least 2");
  if (per_class < 10) throw ConfigError("dataset.per_class must be at least 10");
  if (dim == 0) throw ConfigError("dataset.dim must be positive");
  if (!(sigma >= 0.0)) throw ConfigError("dataset.sigma must be non-negative");
  if (!(center_spread > 0.0)) throw ConfigError("dataset.center_spread must be positive");
  if (task_count == 0 || classes % task_count != 0) {
    throw ConfigError("tasks.count must divide dataset.classes");
  }
  if (nodes.empty()) throw ConfigError("nodes.count must be positive");
  auto check_layers = [&](const std::vector<std::size_t>& l, const std::string& key) {
    if (l.empty() || l.front() != dim) throw ConfigError(key + " must start with dataset.dim");
    for (std::size_t s : l) {
      if (s == 0) throw ConfigError(key + " has a zero-width layer");
    }
  };
  check_layers(default_layers(), "nodes.layers");
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const std::string prefix = "node." + std::to_string(i);
    if (!nodes[i].layer_sizes.empty()) check_layers(nodes[i].layer_sizes, prefix + ".layers");
    for (std::size_t t : nodes[i].pretrain) {
      if (t >= task_count) throw ConfigError(prefix + ".pretrain references unknown task");
    }
  }
  const std::size_t task_train = (per_class * 4 / 5) * (classes / task_count);
  if (stream_size == 0 || stream_size > task_train) {
    throw ConfigError("stream.size must be in [1, task training size]");
  }
  for (const auto& c : schedule) {
    if (c.student >= nodes.size()) throw ConfigError("schedule references unknown node");
    if (c.task >= task_count) throw ConfigError("schedule references unknown task");
  }
  if (nodes.size() < 2 && !schedule.empty()) throw ConfigError("a schedule needs at least 2 nodes");
  hp.validate();
  if (fault_epoch == 0) throw ConfigError("fault.epoch is 1-based");
  if (fault_cycle && *fault_cycle == 0) throw ConfigError("fault.cycle is 1-based");
}

ExperimentConfig parse_config(std::string_view text) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::map<std::string, std::size_t> seen;  // key -> line
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    }
    std::string key = trim(std::string_view(t).substr(0, eq));
    std::string value = trim(std::string_view(t).substr(eq + 1));
    if (seen.contains(key)) throw ConfigError("duplicate key '" + key + "'");
    seen[key] = lineno;
    entries.emplace_back(std::move(key), std::move(value));
  }

  ExperimentConfig cfg;
  for (const auto& [key, value] : entries) {
    if (key == "nodes.count") cfg.nodes.assign(to_uint(key, value), NodeSpec{});
  }
  for (const auto& [key, value] : entries) {
    if (key == "nodes.count") continue;
    if (key.rfind("node.", 0) == 0) {
      const auto dot = key.find('.', 5);
      if (dot == std::string::npos) throw ConfigError("unknown key '" + key + "'");
      const std::size_t index = to_uint(key, key.substr(5, dot - 5));
      if (index >= cfg.nodes.size()) throw ConfigError(key + ": node index >= nodes.count");
      set_node_field(cfg.nodes[index], key, key.substr(dot + 1), value);
      continue;
    }
    const auto& table = setters();
    auto it = table.find(key);
    if (it == table.end()) throw ConfigError("unknown key '" + key + "'");
    it->second(cfg, key, value);
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config(text.str());
}

std::string format_config(const ExperimentConfig& c) {
  std::ostringstream o;
  o << "seed = " << c.seed << '\n'
    << "dataset.classes = " << c.classes << '\n'
    << "dataset.dim = " << c.dim << '\n'
    << "dataset.per_class = " << c.per_class << '\n'
    << "dataset.sigma = " << num(c.sigma) << '\n'
    << "dataset.center_spread = " << num(c.center_spread) << '\n'
    << "tasks.count = " << c.task_count << '\n'
    << "nodes.count = " << c.nodes.size() << '\n'
    << "nodes.layers = " << join(c.default_layers()) << '\n';
  for (std::size_t i = 0; i < c.nodes.size(); ++i) {
    const NodeSpec& n = c.nodes[i];
    const std::string p = "node." + std::to_string(i) + ".";
    if (!n.layer_sizes.empty()) o << p << "layers = " << join(n.layer_sizes) << '\n';
    if (!n.pretrain.empty()) o << p << "pretrain = " << join(n.pretrain) << '\n';
    std::vector<std::string> flags;
    if (n.constraints.dataset_privacy) flags.push_back("dataset_privacy");
    if (n.constraints.parameter_privacy) flags.push_back("parameter_privacy");
    if (n.constraints.architecture_privacy) flags.push_back("architecture_privacy");
    if (n.constraints.traffic_limited) flags.push_back("traffic_limited");
    if (n.constraints.latency_critical) flags.push_back("latency_critical");
    if (!flags.empty()) {
      o << p << "constraints = ";
      for (std::size_t f = 0; f < flags.size(); ++f) o << (f ? "," : "") << flags[f];
      o << '\n';
    }
    if (n.availability != Availability::Always) {
      o << p << "availability = " << (n.availability == Availability::EvenCycles ? "even" : "odd")
        << '\n';
    }
    if (!n.store_dataset) o << p << "store_dataset = false\n";
    if (!n.store_accuracy) o << p << "store_accuracy = false\n";
  }
  if (!c.schedule.empty()) {
    o << "schedule = ";
    for (std::size_t i = 0; i < c.schedule.size(); ++i) {
      o << (i ? "," : "") << c.schedule[i].student << ':' << c.schedule[i].task;
    }
    o << '\n';
  }
  o << "stream.size = " << c.stream_size << '\n'
    << "selection = " << to_string(c.selection) << '\n'
    << "hp.alpha = " << num(c.hp.alpha) << '\n'
    << "hp.beta = " << num(c.hp.beta) << '\n'
    << "hp.gamma = " << num(c.hp.gamma) << '\n'
    << "hp.temperature = " << num(c.hp.temperature) << '\n'
    << "hp.scale_kl_by_t2 = " << (c.hp.scale_kl_by_t2 ? "true" : "false") << '\n'
    << "transfer.lr = " << num(c.transfer_fit.learning_rate) << '\n'
    << "transfer.momentum = " << num(c.transfer_fit.momentum) << '\n'
    << "transfer.epochs = " << c.transfer_fit.epochs << '\n'
    << "transfer.batch_size = " << c.transfer_fit.batch_size << '\n'
    << "pretrain.lr = " << num(c.pretrain_fit.learning_rate) << '\n'
    << "pretrain.momentum = " << num(c.pretrain_fit.momentum) << '\n'
    << "pretrain.epochs = " << c.pretrain_fit.epochs << '\n'
    << "pretrain.batch_size = " << c.pretrain_fit.batch_size << '\n'
    << "ewc.lambda = " << num(c.ewc_lambda) << '\n'
    << "ewc.fisher_samples = " << c.fisher_samples << '\n'
    << "ksa.hidden = " << c.ksa.vae.hidden << '\n'
    << "ksa.latent = " << c.ksa.vae.latent_dim << '\n'
    << "ksa.epochs = " << c.ksa.vae.epochs << '\n'
    << "ksa.batch_size = " << c.ksa.vae.batch_size << '\n'
    << "ksa.lr = " << num(c.ksa.vae.learning_rate) << '\n'
    << "ksa.momentum = " << num(c.ksa.vae.momentum) << '\n'
    << "ksa.decoder_sigma = " << num(c.ksa.vae.decoder_sigma) << '\n'
    << "ksa.min_training_size = " << c.ksa.vae.min_training_size << '\n'
    << "regret.steps = " << c.ksa.regret.opt_steps << '\n'
    << "regret.lr = " << num(c.ksa.regret.opt_lr) << '\n'
    << "regret.draws = " << c.ksa.regret.noise_draws << '\n'
    << "regret.threads = " << c.ksa.regret.threads << '\n'
    << "calibration.epsilon_quantile = " << num(c.ksa.calibration.epsilon_quantile) << '\n'
    << "calibration.delta_quantile = " << num(c.ksa.calibration.delta_quantile) << '\n'
    << "calibration.stream_size = " << c.ksa.calibration.stream_size << '\n'
    << "calibration.resamples = " << c.ksa.calibration.resamples << '\n'
    << "calibration.holdout = " << num(c.ksa.calibration.holdout_fraction) << '\n'
    << "eval.route_points = " << c.eval_route_points << '\n';
  if (c.fault_cycle) {
    o << "fault.cycle = " << *c.fault_cycle << '\n' << "fault.epoch = " << c.fault_epoch << '\n';
  }
  return o.str();
}

}  // namespace lenc
