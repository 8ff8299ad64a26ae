#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lenc/community.hpp"

namespace lenc {

// Synthetic data ---------------------------------------------------------------

struct BlobSplit {
  LabeledDataset train;
  LabeledDataset test;
  std::vector<Vector> centers;
};

// Isotropic Gaussian clusters, one per class, with seeded centers at least
// `center_spread` apart. Each class is split 80/20 into train/test.
BlobSplit make_blobs(std::uint64_t seed, std::size_t class_count, std::size_t dim,
                     std::size_t per_class, double sigma, double center_spread);

// Task t holds classes [t*m, (t+1)*m) with labels re-indexed to [0, m).
std::vector<LabeledDataset> split_tasks(const LabeledDataset& data, std::size_t k);

// Adds `offset` to every coordinate of every input.
std::vector<Vector> shifted(std::span<const Vector> inputs, double offset);

// k indices drawn uniformly without replacement from [0, n).
std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, Rng& rng);

// Configuration ----------------------------------------------------------------

enum class Availability : std::uint8_t { Always, EvenCycles, OddCycles };

struct NodeSpec {
  std::vector<std::size_t> layer_sizes;  // empty: the experiment default
  std::vector<std::size_t> pretrain;     // tasks learned before deployment
  EnvironmentConstraints constraints;
  Availability availability = Availability::Always;
  bool store_dataset = true;
  bool store_accuracy = true;
};

struct ScheduledCycle {
  std::uint32_t student = 0;
  std::size_t task = 0;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;

  std::size_t classes = 4;
  std::size_t dim = 2;
  std::size_t per_class = 500;
  double sigma = 0.1;
  double center_spread = 1.0;
  std::size_t task_count = 1;

  std::vector<std::size_t> layer_sizes;  // default: {dim, 16}
  std::vector<NodeSpec> nodes = std::vector<NodeSpec>(2);

  std::vector<ScheduledCycle> schedule;
  std::size_t stream_size = 200;
  SelectionPolicy selection = SelectionPolicy::Disagreement;

  LossHyperparams hp;
  FitOptions transfer_fit;
  FitOptions pretrain_fit;
  double ewc_lambda = 500.0;
  std::size_t fisher_samples = 200;
  KsaSettings ksa;
  std::size_t eval_route_points = 50;

  std::optional<std::size_t> fault_cycle;  // forced failure for rollback testing
  std::size_t fault_epoch = 1;

  std::vector<std::size_t> default_layers() const;
  void validate() const;
};

// Flat "key = value" text; '#' starts a comment. Unknown keys are errors.
ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string format_config(const ExperimentConfig& config);

// Runs -------------------------------------------------------------------------

struct MetricsRow {
  std::size_t cycle = 0;  // 0: after pretraining; k: after the k-th cycle
  std::uint32_t node = 0;
  std::size_t task = 0;
  std::optional<double> accuracy;  // empty for nodes that know no task
  std::optional<double> community_accuracy;
  std::optional<std::uint32_t> student;
  std::optional<std::uint32_t> teacher;
  std::string policy;
  std::string outcome;
  std::optional<double> churn;
  std::size_t bytes = 0;
};

inline constexpr std::string_view kMetricsHeader =
    "cycle,node,task,accuracy,community_avg_accuracy,student,teacher,policy,outcome,churn,bytes";

struct ExperimentResult {
  std::vector<MetricsRow> rows;
  std::vector<CycleReport> reports;
  std::string trace;
  // accuracy[c][node][task] after cycle c (index 0 = after pretraining).
  std::vector<std::vector<std::vector<std::optional<double>>>> accuracy;
  std::vector<std::string> errors;

  std::optional<double> final_accuracy(std::uint32_t node, std::size_t task) const;
};

ExperimentResult run_experiment(const ExperimentConfig& config);

std::string metrics_csv(const ExperimentResult& result);
std::string reports_json(const ExperimentResult& result);
void write_outputs(const ExperimentResult& result, const std::filesystem::path& dir);

// Sweeps -----------------------------------------------------------------------

enum class SweepAxis : std::uint8_t { StreamSize, Lambda, NodeCount, CycleCount };

SweepAxis parse_sweep_axis(std::string_view name);
std::string_view to_string(SweepAxis axis) noexcept;

ExperimentConfig apply_axis(ExperimentConfig config, SweepAxis axis, double value);

// Nodes that appear as students in the schedule.
std::vector<std::uint32_t> student_nodes(const ExperimentConfig& config);

// Mean final accuracy of the student nodes on the tasks they were scheduled on.
std::optional<double> student_accuracy(const ExperimentConfig& config,
                                       const ExperimentResult& result);

struct SweepPoint {
  double value = 0.0;
  std::size_t runs = 0;
  double mean = 0.0;
  double stddev = 0.0;
  std::vector<double> task_mean;  // final per-task accuracy of the students
  std::vector<double> task_std;
};

struct SweepResult {
  SweepAxis axis = SweepAxis::StreamSize;
  std::vector<SweepPoint> points;
  std::string runs_csv;  // every run's metrics, prefixed with value and seed
};

SweepResult sweep(const ExperimentConfig& config, SweepAxis axis, const std::vector<double>& values,
                  const std::vector<std::uint64_t>& seeds, std::size_t threads);

std::string sweep_csv(const SweepResult& result);
void write_sweep(const SweepResult& result, const std::filesystem::path& dir);

// Final-cycle accuracy table from a run or sweep output directory.
std::string report(const std::filesystem::path& dir);

}  // namespace lenc
