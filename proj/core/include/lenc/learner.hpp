#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lenc/binary_io.hpp"
#include "lenc/dense.hpp"
#include "lenc/random.hpp"

namespace lenc {

inline constexpr double kProbabilityFloor = 1e-12;
inline constexpr double kInitScale = 0.1;

// Counters for numerically degenerate events that were absorbed rather than
// raised.
struct Diagnostics {
  std::size_t clamped_probabilities = 0;
  std::size_t scoring_failures = 0;
};

struct LabeledDataset {
  std::string name;
  std::size_t class_count = 0;
  std::vector<Vector> inputs;
  std::vector<std::size_t> labels;

  std::size_t size() const noexcept { return inputs.size(); }
  std::size_t dim() const noexcept { return inputs.empty() ? 0 : inputs.front().size(); }
  void validate() const;
};

// Unlabeled batch delivered by the environment.
struct Stream {
  std::vector<Vector> inputs;

  std::size_t size() const noexcept { return inputs.size(); }
  bool empty() const noexcept { return inputs.empty(); }
  void validate() const;

  Bytes serialize() const;
  static Stream deserialize(std::span<const std::byte> data);
};

// Shared tanh MLP. layer_sizes[0] is the input dimension; every further entry
// is a hidden layer followed by tanh. With a single entry the feature module
// is the identity.
struct FeatureModule {
  std::vector<std::size_t> layer_sizes;
  std::vector<DenseLayer> layers;

  std::size_t input_dim() const noexcept { return layer_sizes.front(); }
  std::size_t output_dim() const noexcept { return layer_sizes.back(); }
  std::size_t parameter_count() const noexcept;
};

struct DecisionHead {
  std::size_t task_index = 0;
  DenseLayer linear;
  std::optional<double> stored_accuracy;

  std::size_t class_count() const noexcept { return linear.outputs; }
};

struct ActivationTrace {
  Vector input;
  std::vector<Vector> hidden;  // post-activation, one per hidden layer
  Vector logits;

  const Vector& features() const noexcept { return hidden.empty() ? input : hidden.back(); }
};

struct ParameterSnapshot {
  std::vector<std::size_t> layer_sizes;
  std::vector<DenseLayer> feature_layers;
  std::vector<DenseLayer> heads;

  void validate() const;
  Bytes serialize() const;
  static ParameterSnapshot deserialize(std::span<const std::byte> data);
};

// Probability primitives ----------------------------------------------------

Vector softmax_with_temperature(std::span<const double> logits, double temperature);
double cross_entropy(std::span<const double> probs, std::size_t label,
                     Diagnostics* diag = nullptr);
double kl_divergence(std::span<const double> p, std::span<const double> q,
                     Diagnostics* diag = nullptr);
std::size_t argmax(std::span<const double> v);

// Composite loss ------------------------------------------------------------

struct TrainingSample {
  Vector input;
  std::optional<std::size_t> label;
  Vector soft_target;               // teacher distribution at the spec temperature
  std::vector<Vector> hint_targets;  // teacher hidden activations, one per layer
};

// Quadratic pull toward an anchor: sum_i (w_i / 2) (theta_i - anchor_i)^2 over
// the leading anchor.size() parameters. Parameters beyond the anchor are free.
struct AnchorPenalty {
  Vector anchor;
  Vector weight;
};

struct LossSpec {
  double ce_weight = 0.0;
  double kl_weight = 0.0;
  double hint_weight = 0.0;
  double temperature = 1.0;
  bool scale_kl_by_t2 = false;
  std::vector<AnchorPenalty> penalties;

  struct Terms {
    double ce = 0.0;
    double kl = 0.0;
    double hint = 0.0;
    double penalty = 0.0;
  };

  double combine(const Terms& t) const noexcept {
    return ce_weight * t.ce + kl_weight * t.kl + hint_weight * t.hint + t.penalty;
  }
};

struct LossBreakdown {
  LossSpec::Terms terms;
  double total = 0.0;
};

double anchor_penalty(std::span<const double> params, std::span<const AnchorPenalty> penalties);
void add_anchor_penalty_gradient(std::span<const double> params,
                                 std::span<const AnchorPenalty> penalties, std::span<double> grad);

// Momentum SGD: v <- mu v + g ; theta <- theta - lr v.
class SgdMomentum {
public:
  SgdMomentum(double learning_rate, double momentum);

  void apply(std::span<double> params, std::span<const double> grad);
  double learning_rate() const noexcept { return lr_; }
  double momentum() const noexcept { return momentum_; }

private:
  double lr_;
  double momentum_;
  Vector velocity_;
};

struct FitOptions {
  std::size_t epochs = 100;
  std::size_t batch_size = 128;
  double learning_rate = 1e-3;
  double momentum = 0.9;
};

// Called after each completed epoch with the 1-based epoch number. May throw to
// abort training.
using EpochHook = std::function<void(std::size_t epoch, double mean_loss)>;

struct FitResult {
  std::size_t epochs_run = 0;
  double final_loss = 0.0;
};

class Learner {
public:
  Learner() = default;

  static Learner create(std::vector<std::size_t> layer_sizes, Rng& rng);
  static Learner import_parameters(const ParameterSnapshot& snapshot);

  const FeatureModule& feature_module() const noexcept { return fm_; }
  std::size_t task_count() const noexcept { return heads_.size(); }
  const DecisionHead& head(std::size_t index) const;
  DecisionHead& head(std::size_t index);

  DecisionHead& append_decision_head(std::size_t class_count, Rng& rng);

  ActivationTrace forward(std::size_t head_index, std::span<const double> x) const;
  Vector logits(std::size_t head_index, std::span<const double> x) const;
  std::size_t predict(std::size_t head_index, std::span<const double> x) const;

  std::size_t parameter_count() const noexcept;
  std::size_t feature_parameter_count() const noexcept { return fm_.parameter_count(); }
  Vector parameters() const;
  void set_parameters(std::span<const double> flat);

  ParameterSnapshot export_parameters() const;
  ParameterSnapshot export_parameters(std::size_t head_index) const;

  // Mean loss over `batch` and, when `grad` is set, its gradient w.r.t.
  // parameters() in the same flat order.
  LossBreakdown evaluate_loss(std::size_t head_index, std::span<const TrainingSample> batch,
                              const LossSpec& spec, Vector* grad = nullptr,
                              Diagnostics* diag = nullptr) const;

  friend bool operator==(const Learner& a, const Learner& b) {
    return a.parameters() == b.parameters() && a.fm_.layer_sizes == b.fm_.layer_sizes &&
           a.task_count() == b.task_count();
  }

private:
  FeatureModule fm_;
  std::vector<DecisionHead> heads_;
};

// One SGD step on `batch`. Returns the pre-update mean loss. On a non-finite
// loss or gradient the parameters are left untouched and DivergenceError is
// thrown.
double train_step(Learner& learner, std::size_t head_index, std::span<const TrainingSample> batch,
                  const LossSpec& spec, SgdMomentum& optimizer, Diagnostics* diag = nullptr);

// Minibatch epochs over `samples`, reshuffled every epoch.
FitResult fit(Learner& learner, std::size_t head_index, std::span<const TrainingSample> samples,
              const LossSpec& spec, const FitOptions& options, Rng& rng,
              const EpochHook& hook = {}, Diagnostics* diag = nullptr);

double accuracy(const Learner& learner, std::size_t head_index, const LabeledDataset& data);

void write_dataset(ByteWriter& w, const LabeledDataset& d);
LabeledDataset read_dataset(ByteReader& r);
void write_rows(ByteWriter& w, std::span<const Vector> rows);
std::vector<Vector> read_rows(ByteReader& r, std::string_view field);

}  // namespace lenc
