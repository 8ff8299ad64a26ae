#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "lenc/error.hpp"
#include "lenc/harness.hpp"

namespace lenc {

SweepAxis parse_sweep_axis(std::string_view name) {
  if (name == "stream_size") return SweepAxis::StreamSize;
  if (name == "lambda") return SweepAxis::Lambda;
  if (name == "node_count") return SweepAxis::NodeCount;
  if (name == "cycle_count") return SweepAxis::CycleCount;
  throw ConfigError("unknown sweep axis '" + std::string(name) + "'");
}

std::string_view to_string(SweepAxis axis) noexcept {
  switch (axis) {
    case SweepAxis::StreamSize: return "stream_size";
    case SweepAxis::Lambda: return "lambda";
    case SweepAxis::NodeCount: return "node_count";
    case SweepAxis::CycleCount: return "cycle_count";
  }
  return "?";
}

ExperimentConfig apply_axis(ExperimentConfig config, SweepAxis axis, double value) {
  auto count = [&] {
    if (!(value >= 0.0) || value != std::floor(value)) {
      throw ConfigError(std::string(to_string(axis)) + " values must be non-negative integers");
    }
    return static_cast<std::size_t>(value);
  };
  switch (axis) {
    case SweepAxis::StreamSize: config.stream_size = count(); break;
    case SweepAxis::Lambda: config.ewc_lambda = value; break;
    case SweepAxis::NodeCount: {
      const std::size_t n = count();
      if (n < config.nodes.size()) {
        for (const auto& c : config.schedule) {
          if (c.student >= n) throw ConfigError("node_count drops a scheduled student");
        }
      }
      config.nodes.resize(n);  // extra nodes join untrained
      break;
    }
    case SweepAxis::CycleCount: {
      // Repeats or truncates the schedule.
      const std::size_t n = count();
      if (config.schedule.empty()) throw ConfigError("cycle_count sweep needs a schedule");
      std::vector<ScheduledCycle> s;
      for (std::size_t i = 0; i < n; ++i) s.push_back(config.schedule[i % config.schedule.size()]);
      config.schedule = std::move(s);
      break;
    }
  }
  config.validate();
  return config;
}

std::vector<std::uint32_t> student_nodes(const ExperimentConfig& config) {
  std::set<std::uint32_t> s;
  for (const auto& c : config.schedule) s.insert(c.student);
  return {s.begin(), s.end()};
}

namespace {

// Per task: mean final accuracy over students scheduled on it.
std::vector<std::optional<double>> student_task_accuracy(const ExperimentConfig& config,
                                                         const ExperimentResult& result) {
  std::vector<std::optional<double>> out(config.task_count);
  for (std::size_t t = 0; t < config.task_count; ++t) {
    std::set<std::uint32_t> students;
    for (const auto& c : config.schedule) {
      if (c.task == t) students.insert(c.student);
    }
    double sum = 0.0;
    std::size_t n = 0;
    for (std::uint32_t s : students) {
      sum += result.final_accuracy(s, t).value_or(0.0);
      ++n;
    }
    if (n) out[t] = sum / static_cast<double>(n);
  }
  return out;
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, v.size() > 1 ? std::sqrt(s / static_cast<double>(v.size() - 1)) : 0.0};
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string fmt_value(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

}  // namespace

std::optional<double> student_accuracy(const ExperimentConfig& config,
                                       const ExperimentResult& result) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& a : student_task_accuracy(config, result)) {
    if (a) {
      sum += *a;
      ++n;
    }
  }
  if (!n) return std::nullopt;
  return sum / static_cast<double>(n);
}

SweepResult sweep(const ExperimentConfig& config, SweepAxis axis, const std::vector<double>& values,
                  const std::vector<std::uint64_t>& seeds, std::size_t threads) {
  if (values.empty() || seeds.empty()) throw ConfigError("sweep needs values and seeds");
  struct Job {
    double value;
    std::uint64_t seed;
    ExperimentConfig config;
    ExperimentResult result;
    std::exception_ptr error;
  };
  std::vector<Job> jobs;
  for (double v : values) {
    for (std::uint64_t s : seeds) {
      ExperimentConfig c = apply_axis(config, axis, v);
      c.seed = s;
      jobs.push_back({v, s, std::move(c), {}, nullptr});
    }
  }

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        jobs[i].result = run_experiment(jobs[i].config);
      } catch (...) {
        jobs[i].error = std::current_exception();
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    const std::size_t n = std::clamp<std::size_t>(threads, 1, jobs.size());
    for (std::size_t t = 1; t < n; ++t) pool.emplace_back(worker);
    worker();
  }

  SweepResult out;
  out.axis = axis;
  std::ostringstream runs;
  runs << "value,seed," << kMetricsHeader << '\n';
  for (double v : values) {
    SweepPoint p;
    p.value = v;
    std::vector<double> overall;
    std::vector<std::vector<double>> per_task(config.task_count);
    for (auto& job : jobs) {
      if (job.value != v) continue;
      if (job.error) std::rethrow_exception(job.error);
      ++p.runs;
      if (auto a = student_accuracy(job.config, job.result)) overall.push_back(*a);
      const auto tasks = student_task_accuracy(job.config, job.result);
      for (std::size_t t = 0; t < tasks.size(); ++t) {
        if (tasks[t]) per_task[t].push_back(*tasks[t]);
      }
      std::istringstream csv(metrics_csv(job.result));
      std::string line;
      std::getline(csv, line);  // header
      while (std::getline(csv, line)) runs << fmt_value(v) << ',' << job.seed << ',' << line << '\n';
    }
    std::tie(p.mean, p.stddev) = mean_std(overall);
    for (const auto& t : per_task) {
      const auto [m, s] = mean_std(t);
      p.task_mean.push_back(m);
      p.task_std.push_back(s);
    }
    out.points.push_back(std::move(p));
  }
  out.runs_csv = runs.str();
  return out;
}

std::string sweep_csv(const SweepResult& r) {
  std::ostringstream o;
  o << "axis,value,runs,mean_accuracy,std_accuracy";
  const std::size_t tasks = r.points.empty() ? 0 : r.points.front().task_mean.size();
  for (std::size_t t = 0; t < tasks; ++t) o << ",task" << t << "_mean,task" << t << "_std";
  o << '\n';
  for (const auto& p : r.points) {
    o << to_string(r.axis) << ',' << fmt_value(p.value) << ',' << p.runs << ',' << fmt(p.mean)
      << ',' << fmt(p.stddev);
    for (std::size_t t = 0; t < tasks; ++t) o << ',' << fmt(p.task_mean[t]) << ',' << fmt(p.task_std[t]);
    o << '\n';
  }
  return o.str();
}

void write_sweep(const SweepResult& result, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "aggregated.csv", std::ios::binary) << sweep_csv(result);
  std::ofstream(dir / "runs.csv", std::ios::binary) << result.runs_csv;
}

namespace {

std::vector<std::string> fields(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

std::string percent(const std::string& v) {
  if (v.empty()) return "   -  ";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%6.2f", 100.0 * std::stod(v));
  return buf;
}

}  // namespace

std::string report(const std::filesystem::path& dir) {
  std::ostringstream o;
  bool any = false;
  if (std::ifstream agg(dir / "aggregated.csv"); agg) {
    any = true;
    std::string line;
    std::getline(agg, line);
    o << "sweep (student accuracy %, mean +- std)\n";
    while (std::getline(agg, line)) {
      const auto f = fields(line);
      if (f.size() < 5) continue;
      o << "  " << f[0] << " = " << f[1] << "  runs " << f[2] << "  " << percent(f[3]) << " +- "
        << percent(f[4]);
      for (std::size_t i = 5; i + 1 < f.size(); i += 2) {
        o << "  t" << (i - 5) / 2 << " " << percent(f[i]);
      }
      o << '\n';
    }
  }
  if (std::ifstream in(dir / "metrics.csv"); in) {
    any = true;
    std::string line;
    std::getline(in, line);
    if (line != kMetricsHeader) throw Error("unexpected metrics.csv header in " + dir.string());
    std::vector<std::vector<std::string>> rows;
    std::size_t last = 0;
    while (std::getline(in, line)) {
      auto f = fields(line);
      if (f.size() != 11) continue;
      last = std::max<std::size_t>(last, std::stoul(f[0]));
      rows.push_back(std::move(f));
    }
    std::map<std::pair<std::string, std::string>, std::string> acc;
    std::set<std::string> nodes;
    std::set<std::size_t> tasks;
    std::map<std::string, std::size_t> outcomes;
    std::map<std::string, std::size_t> policies;
    std::size_t prev_cycle = 0;
    for (const auto& f : rows) {
      const std::size_t c = std::stoul(f[0]);
      if (c != prev_cycle && c > 0) {
        ++outcomes[f[8]];
        if (!f[7].empty()) ++policies[f[7]];
        prev_cycle = c;
      }
      if (c != last) continue;
      nodes.insert(f[1]);
      tasks.insert(std::stoul(f[2]));
      acc[{f[1], f[2]}] = f[3];
    }
    o << "final test accuracy (%) after cycle " << last << "\n  node ";
    for (std::size_t t : tasks) o << "  task" << t;
    o << '\n';
    for (const auto& n : nodes) {
      char buf[16];
      std::snprintf(buf, sizeof buf, "  %4s ", n.c_str());
      o << buf;
      for (std::size_t t : tasks) o << ' ' << percent(acc[{n, std::to_string(t)}]);
      o << '\n';
    }
    o << "cycle outcomes:";
    for (const auto& [k, v] : outcomes) o << ' ' << k << '=' << v;
    o << "\npolicies:";
    for (const auto& [k, v] : policies) o << ' ' << k << '=' << v;
    o << '\n';
  }
  if (!any) throw Error("no metrics.csv or aggregated.csv in " + dir.string());
  return o.str();
}

}  // namespace lenc
