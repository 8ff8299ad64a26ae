#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lenc/continual.hpp"
#include "lenc/distill.hpp"
#include "lenc/ksa.hpp"
#include "lenc/learner.hpp"

namespace lenc {

struct NodeId {
  std::uint32_t value = 0;

  friend auto operator<=>(const NodeId&, const NodeId&) = default;
  std::string str() const { return "n" + std::to_string(value); }
};

enum class SelectionPolicy : std::uint8_t { Accuracy = 1, OodScore = 2, Disagreement = 3 };

std::string_view to_string(SelectionPolicy p) noexcept;
SelectionPolicy parse_selection_policy(std::string_view name);

// A peer's answer to a knowledge query. Unaware is its own kind rather than a
// zero score.
struct QueryResponse {
  enum class Kind : std::uint8_t { Unaware = 0, Accuracy = 1, OodScore = 2, Labels = 3 };

  Kind kind = Kind::Unaware;
  std::size_t task = 0;  // responder's best-matching task when aware
  double score = 0.0;    // Accuracy / OodScore
  std::vector<std::size_t> labels;  // Labels

  bool aware() const noexcept { return kind != Kind::Unaware; }

  Bytes serialize() const;
  static QueryResponse deserialize(std::span<const std::byte> data);

  friend bool operator==(const QueryResponse&, const QueryResponse&) = default;
};

struct TaskAssessment {
  std::size_t task = 0;
  std::optional<double> score;  // empty when scoring failed
  Verdict verdict = Verdict::Unknown;
};

struct Assessment {
  std::vector<TaskAssessment> tasks;
  std::optional<std::size_t> best;  // argmin over scored tasks
  Verdict verdict = Verdict::Unknown;
  std::size_t failures = 0;
};

struct EducationRequest {
  NodeId requester;
  Stream stream;
  HeadDisposition disposition;
};

struct IngestResult {
  Verdict verdict = Verdict::Unknown;
  std::optional<EducationRequest> request;
  Assessment assessment;
};

struct NodeSettings {
  std::vector<std::size_t> layer_sizes;
  KsaSettings ksa;
  double ewc_lambda = 500.0;
  std::size_t fisher_samples = 200;
};

class Node {
public:
  Node(NodeId id, NodeSettings settings, EnvironmentConstraints constraints, std::uint64_t seed);

  NodeId id() const noexcept { return id_; }
  const NodeSettings& settings() const noexcept { return settings_; }
  NodeSettings& settings() noexcept { return settings_; }
  const EnvironmentConstraints& constraints() const noexcept { return constraints_; }

  const Learner& learner() const noexcept { return learner_; }
  Learner& learner() noexcept { return learner_; }
  std::size_t task_count() const noexcept { return learner_.task_count(); }
  const std::vector<KsaModule>& ksa_modules() const noexcept { return ksa_; }
  const std::vector<ConsolidatedTask>& consolidated_tasks() const noexcept { return consolidated_; }
  std::optional<double> stored_accuracy(std::size_t task) const;
  const LabeledDataset* stored_dataset(std::size_t task) const;
  bool can_teach(std::size_t task) const;
  Rng& rng() noexcept { return rng_; }

  // Scores `stream` against every task's detector.
  Assessment assess(const Stream& stream) const;

  // Expert -> no request; Limited -> reuse the best head; Unknown (or no
  // tasks) -> append a head.
  IngestResult ingest_stream(const Stream& stream) const;

  QueryResponse respond_to_query(const Stream& stream, SelectionPolicy policy) const;

  // Routes the stream to a head by minimum detector score, then argmax per
  // point. Throws NoKnowledgeError when the node knows no task.
  std::vector<std::size_t> predict(const Stream& stream) const;
  std::vector<std::size_t> predict(const Stream& stream, const Assessment& assessment) const;

  // Post-transfer bookkeeping: fit or refresh the task's detector and
  // consolidate the trained head.
  void finish_education(const EducationRequest& request, const TransferReport& report,
                        std::span<const Vector> training_inputs);

  // Supervised pre-deployment training of a new task.
  void pretrain_task(const LabeledDataset& train, const FitOptions& options, bool store_dataset,
                     const LabeledDataset* accuracy_split);

  Bytes checkpoint() const;
  static Node restore(std::span<const std::byte> data, NodeSettings settings);

  // State equality via the checkpoint encoding.
  friend bool operator==(const Node& a, const Node& b) { return a.checkpoint() == b.checkpoint(); }

private:
  void check_invariants() const;
  std::uint64_t next_seed(std::string_view tag);

  NodeId id_;
  NodeSettings settings_;
  EnvironmentConstraints constraints_;
  std::uint64_t seed_ = 0;
  std::uint64_t seed_counter_ = 0;
  Rng rng_;
  Learner learner_;
  std::vector<KsaModule> ksa_;
  std::vector<ConsolidatedTask> consolidated_;
  std::vector<std::optional<LabeledDataset>> datasets_;
};

}  // namespace lenc
