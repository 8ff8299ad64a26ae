#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "lenc/error.hpp"
#include "lenc/harness.hpp"
#include "json.hpp"

namespace lenc {

BlobSplit make_blobs(std::uint64_t seed, std::size_t class_count, std::size_t dim,
                     std::size_t per_class, double sigma, double center_spread) {
  if (class_count < 2) throw InvalidArgument("make_blobs: need at least two classes");
  if (per_class < 10) throw InvalidArgument("make_blobs: need at least ten points per class");
  if (dim == 0) throw InvalidArgument("make_blobs: zero dimension");
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw InvalidArgument("make_blobs: bad sigma");
  if (!(center_spread > 0.0)) throw InvalidArgument("make_blobs: bad center_spread");

  Rng rng(derive_seed(seed, "blobs"));
  const double half = center_spread *
                      std::max(1.0, std::pow(static_cast<double>(class_count), 1.0 / dim));
  BlobSplit out;
  constexpr std::size_t kMaxAttempts = 100000;
  for (std::size_t attempt = 0; out.centers.size() < class_count; ++attempt) {
    if (attempt == kMaxAttempts) throw InvalidArgument("make_blobs: cannot place centers");
    Vector c(dim);
    for (double& v : c) v = rng.uniform(-half, half);
    const bool far = std::all_of(out.centers.begin(), out.centers.end(), [&](const Vector& o) {
      double d2 = 0.0;
      for (std::size_t i = 0; i < dim; ++i) d2 += (c[i] - o[i]) * (c[i] - o[i]);
      return d2 >= center_spread * center_spread;
    });
    if (far) out.centers.push_back(std::move(c));
  }

  const std::size_t train_per_class = per_class * 4 / 5;
  for (auto* d : {&out.train, &out.test}) {
    d->class_count = class_count;
  }
  out.train.name = "blobs.train";
  out.test.name = "blobs.test";
  for (std::size_t k = 0; k < class_count; ++k) {
    for (std::size_t i = 0; i < per_class; ++i) {
      Vector x(dim);
      for (std::size_t j = 0; j < dim; ++j) x[j] = out.centers[k][j] + sigma * rng.normal();
      LabeledDataset& d = i < train_per_class ? out.train : out.test;
      d.inputs.push_back(std::move(x));
      d.labels.push_back(k);
    }
  }
  for (auto* d : {&out.train, &out.test}) {
    std::vector<std::size_t> order(d->size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(std::span(order));
    LabeledDataset shuffled{d->name, d->class_count, {}, {}};
    for (std::size_t i : order) {
      shuffled.inputs.push_back(std::move(d->inputs[i]));
      shuffled.labels.push_back(d->labels[i]);
    }
    *d = std::move(shuffled);
  }
  return out;
}

std::vector<LabeledDataset> split_tasks(const LabeledDataset& data, std::size_t k) {
  if (k == 0 || data.class_count % k != 0) {
    throw ConfigError("split_tasks: " + std::to_string(data.class_count) +
                      " classes are not divisible into " + std::to_string(k) + " tasks");
  }
  const std::size_t m = data.class_count / k;
  std::vector<LabeledDataset> tasks(k);
  for (std::size_t t = 0; t < k; ++t) {
    tasks[t].name = data.name + ".task" + std::to_string(t);
    tasks[t].class_count = m;
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::size_t t = data.labels[i] / m;
    tasks[t].inputs.push_back(data.inputs[i]);
    tasks[t].labels.push_back(data.labels[i] % m);
  }
  return tasks;
}

std::vector<Vector> shifted(std::span<const Vector> inputs, double offset) {
  std::vector<Vector> out(inputs.begin(), inputs.end());
  for (auto& x : out) {
    for (double& v : x) v += offset;
  }
  return out;
}

std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, Rng& rng) {
  if (k > n) throw InvalidArgument("sample_without_replacement: k > n");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.index(n - i)]);
  idx.resize(k);
  return idx;
}

std::optional<double> ExperimentResult::final_accuracy(std::uint32_t node, std::size_t task) const {
  if (accuracy.empty() || node >= accuracy.back().size() || task >= accuracy.back()[node].size()) {
    return std::nullopt;
  }
  return accuracy.back()[node][task];
}

namespace {

bool is_available(Availability a, std::size_t cycle) {
  switch (a) {
    case Availability::Always: return true;
    case Availability::EvenCycles: return cycle % 2 == 0;
    case Availability::OddCycles: return cycle % 2 == 1;
  }
  return true;
}

std::optional<double> evaluate(const Node& node, const LabeledDataset& test,
                               std::size_t route_points) {
  if (node.task_count() == 0) return std::nullopt;
  const Stream stream{test.inputs};
  std::vector<std::size_t> labels;
  if (node.task_count() == 1) {
    labels = node.predict(stream);
  } else {
    const std::size_t n = std::min(route_points == 0 ? test.size() : route_points, test.size());
    const Stream probe{std::vector<Vector>(test.inputs.begin(), test.inputs.begin() + n)};
    labels = node.predict(stream, node.assess(probe));
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += labels[i] == test.labels[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

std::string cell(const std::optional<double>& v) {
  if (!v) return {};
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", *v);
  return buf;
}

template <typename T>
std::string cell(const std::optional<T>& v) {
  return v ? std::to_string(*v) : std::string{};
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const BlobSplit blobs = make_blobs(derive_seed(cfg.seed, "dataset"), cfg.classes, cfg.dim,
                                     cfg.per_class, cfg.sigma, cfg.center_spread);
  const auto train = split_tasks(blobs.train, cfg.task_count);
  const auto test = split_tasks(blobs.test, cfg.task_count);

  Community community(CommunitySettings{cfg.selection, TransferSettings{cfg.hp, cfg.transfer_fit}});
  for (std::uint32_t i = 0; i < cfg.nodes.size(); ++i) {
    const NodeSpec& spec = cfg.nodes[i];
    NodeSettings ns{spec.layer_sizes.empty() ? cfg.default_layers() : spec.layer_sizes, cfg.ksa,
                    cfg.ewc_lambda, cfg.fisher_samples};
    Node node(NodeId{i}, std::move(ns), spec.constraints, derive_seed(cfg.seed, "node", i));
    for (std::size_t t : spec.pretrain) {
      node.pretrain_task(train[t], cfg.pretrain_fit, spec.store_dataset,
                         spec.store_accuracy ? &test[t] : nullptr);
    }
    community.add_node(std::move(node));
  }

  ExperimentResult result;
  auto record = [&](std::size_t cycle, const CycleReport* report) {
    std::vector<std::vector<std::optional<double>>> acc(cfg.nodes.size());
    for (std::uint32_t i = 0; i < cfg.nodes.size(); ++i) {
      for (std::size_t t = 0; t < cfg.task_count; ++t) {
        try {
          acc[i].push_back(evaluate(community.node(NodeId{i}), test[t], cfg.eval_route_points));
        } catch (const Error& e) {
          acc[i].push_back(std::nullopt);
          result.errors.push_back("cycle " + std::to_string(cycle) + " node " +
                                  std::to_string(i) + ": " + e.what());
        }
      }
    }
    std::optional<double> churn;
    if (report && report->teacher && report->selection == SelectionPolicy::Disagreement) {
      for (const auto& r : report->responders) {
        if (r.node == *report->teacher) churn = r.score;
      }
    }
    for (std::size_t t = 0; t < cfg.task_count; ++t) {
      double sum = 0.0;
      std::size_t n = 0;
      for (const auto& row : acc) {
        if (row[t]) {
          sum += *row[t];
          ++n;
        }
      }
      const std::optional<double> avg = n ? std::optional(sum / static_cast<double>(n)) : std::nullopt;
      for (std::uint32_t i = 0; i < cfg.nodes.size(); ++i) {
        MetricsRow row;
        row.cycle = cycle;
        row.node = i;
        row.task = t;
        row.accuracy = acc[i][t];
        row.community_accuracy = avg;
        if (report) {
          row.student = report->student.value;
          if (report->teacher) row.teacher = report->teacher->value;
          if (report->policy) row.policy = report->policy->name();
          row.outcome = std::string(to_string(report->outcome));
          row.churn = churn;
          row.bytes = report->bytes;
        } else {
          row.outcome = "pretrain";
        }
        result.rows.push_back(std::move(row));
      }
    }
    result.accuracy.push_back(std::move(acc));
  };

  record(0, nullptr);
  for (std::size_t c = 0; c < cfg.schedule.size(); ++c) {
    const ScheduledCycle& sc = cfg.schedule[c];
    for (std::uint32_t i = 0; i < cfg.nodes.size(); ++i) {
      community.set_available(NodeId{i}, i == sc.student || is_available(cfg.nodes[i].availability, c + 1));
    }
    Rng stream_rng(derive_seed(cfg.seed, "stream", c));
    Stream stream;
    for (std::size_t i : sample_without_replacement(train[sc.task].size(), cfg.stream_size, stream_rng)) {
      stream.inputs.push_back(train[sc.task].inputs[i]);
    }
    TransferHook hook;
    if (cfg.fault_cycle && *cfg.fault_cycle == c + 1) {
      const std::size_t at = cfg.fault_epoch;
      hook = [at](std::size_t epoch, double) {
        if (epoch >= at) throw DivergenceError("injected fault at epoch " + std::to_string(epoch));
      };
    }
    CycleReport report;
    try {
      report = community.run_education_cycle(NodeId{sc.student}, stream, hook);
    } catch (const Error& e) {
      report.cycle = c + 1;
      report.student = NodeId{sc.student};
      report.selection = cfg.selection;
      report.outcome = CycleOutcome::Failed;
      report.error = e.what();
    }
    if (report.error) result.errors.push_back("cycle " + std::to_string(c + 1) + ": " + *report.error);
    record(c + 1, &report);
    result.reports.push_back(std::move(report));
  }
  result.trace = community.trace_text();
  return result;
}

std::string metrics_csv(const ExperimentResult& result) {
  std::string out(kMetricsHeader);
  out += '\n';
  for (const auto& r : result.rows) {
    out += std::to_string(r.cycle) + ',' + std::to_string(r.node) + ',' + std::to_string(r.task) +
           ',' + cell(r.accuracy) + ',' + cell(r.community_accuracy) + ',' + cell(r.student) + ',' +
           cell(r.teacher) + ',' + r.policy + ',' + r.outcome + ',' + cell(r.churn) + ',' +
           std::to_string(r.bytes) + '\n';
  }
  return out;
}

std::string reports_json(const ExperimentResult& result) {
  using nlohmann::json;
  json arr = json::array();
  for (const auto& r : result.reports) {
    json j;
    j["cycle"] = r.cycle;
    j["student"] = r.student.value;
    j["teacher"] = r.teacher ? json(r.teacher->value) : json(nullptr);
    j["selection"] = std::string(to_string(r.selection));
    j["verdict"] = std::string(to_string(r.verdict));
    if (r.disposition) {
      j["disposition"] = r.disposition->kind == HeadDisposition::Kind::Reuse
                             ? "reuse:" + std::to_string(r.disposition->index)
                             : std::string("append");
    } else {
      j["disposition"] = nullptr;
    }
    json responders = json::array();
    for (const auto& s : r.responders) {
      responders.push_back({{"node", s.node.value},
                            {"aware", s.kind != QueryResponse::Kind::Unaware},
                            {"score", s.score ? json(*s.score) : json(nullptr)}});
    }
    j["responders"] = responders;
    j["policy"] = r.policy ? json(r.policy->name()) : json(nullptr);
    if (r.transfer) {
      j["transfer"] = {{"epochs_run", r.transfer->epochs_run},
                       {"final_loss", r.transfer->final_loss},
                       {"head_index", r.transfer->head_index},
                       {"head_appended", r.transfer->head_appended},
                       {"failure", r.transfer->failure ? json(*r.transfer->failure) : json(nullptr)}};
    } else {
      j["transfer"] = nullptr;
    }
    j["outcome"] = std::string(to_string(r.outcome));
    j["error"] = r.error ? json(*r.error) : json(nullptr);
    j["messages"] = r.messages;
    j["bytes"] = r.bytes;
    arr.push_back(std::move(j));
  }
  return arr.dump(2) + "\n";
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

}  // namespace

void write_outputs(const ExperimentResult& result, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text(dir / "metrics.csv", metrics_csv(result));
  write_text(dir / "trace.log", result.trace);
  write_text(dir / "reports.json", reports_json(result));
}

}  // namespace lenc
