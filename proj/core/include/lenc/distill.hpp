#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "lenc/continual.hpp"
#include "lenc/learner.hpp"

namespace lenc {

enum class PolicyKind : std::uint8_t {
  DatasetTransfer = 1,             // P1
  SoftOutputs = 2,                 // P2
  SoftOutputsWithIntermediates = 3,  // P3
  ModelCopy = 4,                   // P4
};

enum class InputOption : std::uint8_t {
  StudentStream = 1,   // teacher outputs computed on the student's stream
  TeacherDataset = 2,  // teacher outputs computed on its stored dataset
};

struct TransferPolicy {
  PolicyKind kind = PolicyKind::SoftOutputs;
  std::optional<InputOption> input;

  void validate() const;
  std::string name() const;  // "P2/StudentStream", "P4", ...

  friend bool operator==(const TransferPolicy&, const TransferPolicy&) = default;
};

struct EnvironmentConstraints {
  bool dataset_privacy = false;
  bool parameter_privacy = false;
  bool architecture_privacy = false;
  bool traffic_limited = false;
  bool latency_critical = false;

  // A restriction held by either party applies to the exchange.
  EnvironmentConstraints merged(const EnvironmentConstraints& other) const noexcept;

  friend bool operator==(const EnvironmentConstraints&, const EnvironmentConstraints&) = default;
};

// Precedence P4 > P1 > P3 > P2. P2 with the student's own stream is the
// fallback that works under every restriction.
TransferPolicy select_policy(const EnvironmentConstraints& c, bool student_untrained,
                             bool shared_architecture, bool student_more_complex);

struct LossHyperparams {
  double alpha = 1.0;
  double beta = 1.0;
  double gamma = 1.0;
  double temperature = 4.0;
  bool scale_kl_by_t2 = false;

  void validate() const;
};

// alpha * CE, plus EWC when the student already knows at least one task.
LossSpec build_policy1_loss(const LossHyperparams& hp, std::size_t student_task_count,
                            std::span<const ConsolidatedTask> consolidated);

// TeacherDataset: CE + beta * KL. StudentStream (no labels): KL alone.
// EWC is added whenever consolidated tasks exist.
LossSpec build_policy2_loss(const LossHyperparams& hp, InputOption input,
                            std::span<const ConsolidatedTask> consolidated);

// Policy 2 loss plus gamma * sum of squared L2 distances between teacher and
// student hidden activations.
LossSpec build_policy3_loss(const LossHyperparams& hp, InputOption input,
                            std::span<const ConsolidatedTask> consolidated);

// Payloads --------------------------------------------------------------------

struct DatasetPayload {
  LabeledDataset dataset;
};

struct SoftOutputsPayload {
  InputOption input = InputOption::StudentStream;
  std::size_t class_count = 0;
  double temperature = 1.0;
  std::vector<Vector> soft_outputs;
  // Only for InputOption::TeacherDataset; for StudentStream the student
  // already holds the inputs.
  LabeledDataset dataset;
};

struct IntermediatesPayload {
  SoftOutputsPayload soft;
  std::vector<std::size_t> layer_sizes;  // teacher feature module shape
  std::vector<std::vector<Vector>> activations;  // per input, per hidden layer
};

struct ModelPayload {
  ParameterSnapshot snapshot;
};

using TransferPayload =
    std::variant<DatasetPayload, SoftOutputsPayload, IntermediatesPayload, ModelPayload>;

PolicyKind payload_kind(const TransferPayload& payload) noexcept;
Bytes serialize_payload(const TransferPayload& payload);
TransferPayload deserialize_payload(std::span<const std::byte> data);

// Teacher side: packages head `head_index`'s knowledge for `policy`.
// `teacher_dataset` is required by P1 and the TeacherDataset input option.
TransferPayload build_payload(const Learner& teacher, std::size_t head_index,
                              const TransferPolicy& policy, std::span<const Vector> student_stream,
                              const LabeledDataset* teacher_dataset, double temperature);

// Unlabeled inputs the student saw during the transfer (its stream plus any
// delivered dataset inputs).
std::vector<Vector> delivered_inputs(const TransferPayload& payload,
                                     std::span<const Vector> student_stream);

// Transfer ----------------------------------------------------------------------

struct HeadDisposition {
  enum class Kind : std::uint8_t { Reuse, Append };
  Kind kind = Kind::Append;
  std::size_t index = 0;  // meaningful for Reuse

  static HeadDisposition reuse(std::size_t i) { return {Kind::Reuse, i}; }
  static HeadDisposition append() { return {Kind::Append, 0}; }
  friend bool operator==(const HeadDisposition&, const HeadDisposition&) = default;
};

struct TransferSettings {
  LossHyperparams hp;
  FitOptions fit;
};

struct TransferReport {
  TransferPolicy policy;
  std::size_t epochs_run = 0;
  double final_loss = 0.0;
  std::size_t head_index = 0;
  bool head_appended = false;
  std::optional<std::string> failure;

  bool ok() const noexcept { return !failure.has_value(); }
};

std::vector<TrainingSample> training_samples(const TransferPayload& payload,
                                             std::span<const Vector> student_stream);

// Applies the payload to `student`. P4 replaces the learner wholesale; P1-P3
// train the reused or freshly appended head. Inapplicable combinations throw
// PolicyError; divergence returns a report with `failure` set and the student
// partially trained.
TransferReport execute_transfer(Learner& student, std::span<const ConsolidatedTask> consolidated,
                                const TransferPayload& payload, const TransferPolicy& policy,
                                HeadDisposition disposition, std::span<const Vector> student_stream,
                                const TransferSettings& settings, Rng& rng,
                                const EpochHook& hook = {});

}  // namespace lenc
