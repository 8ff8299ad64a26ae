#include "lenc/continual.hpp"

#include <numeric>

#include "lenc/error.hpp"

namespace lenc {

AnchorPenalty ConsolidatedTask::as_penalty() const {
  AnchorPenalty p;
  p.anchor = anchor;
  p.weight.resize(fisher_diagonal.size());
  for (std::size_t i = 0; i < fisher_diagonal.size(); ++i) p.weight[i] = lambda * fisher_diagonal[i];
  return p;
}

std::vector<AnchorPenalty> as_penalties(std::span<const ConsolidatedTask> tasks) {
  std::vector<AnchorPenalty> out;
  out.reserve(tasks.size());
  for (const auto& t : tasks) out.push_back(t.as_penalty());
  return out;
}

Vector compute_fisher_diagonal(const Learner& learner, std::size_t head_index,
                               std::span<const Vector> inputs, std::size_t sample_count, Rng& rng) {
  if (inputs.empty()) throw InvalidArgument("fisher: empty dataset");
  std::vector<std::size_t> chosen(inputs.size());
  std::iota(chosen.begin(), chosen.end(), 0);
  if (sample_count > 0 && sample_count < inputs.size()) {
    rng.shuffle(std::span(chosen));
    chosen.resize(sample_count);
  }

  const std::size_t classes = learner.head(head_index).class_count();
  LossSpec nll;
  nll.ce_weight = 1.0;
  Vector fisher(learner.parameter_count(), 0.0);
  Vector grad;
  TrainingSample sample;
  for (std::size_t idx : chosen) {
    const Vector probs = softmax_with_temperature(learner.logits(head_index, inputs[idx]), 1.0);
    sample.input = inputs[idx];
    for (std::size_t y = 0; y < classes; ++y) {
      if (probs[y] == 0.0) continue;
      sample.label = y;
      learner.evaluate_loss(head_index, std::span(&sample, 1), nll, &grad);
      for (std::size_t i = 0; i < fisher.size(); ++i) fisher[i] += probs[y] * grad[i] * grad[i];
    }
  }
  const double inv = 1.0 / static_cast<double>(chosen.size());
  for (double& f : fisher) f *= inv;
  return fisher;
}

double ewc_penalty(std::span<const double> params, std::span<const ConsolidatedTask> tasks) {
  const auto penalties = as_penalties(tasks);
  return anchor_penalty(params, penalties);
}

Vector ewc_gradient(std::span<const double> params, std::span<const ConsolidatedTask> tasks) {
  const auto penalties = as_penalties(tasks);
  Vector grad(params.size(), 0.0);
  add_anchor_penalty_gradient(params, penalties, grad);
  return grad;
}

ConsolidatedTask consolidate(const Learner& learner, std::size_t head_index,
                             std::span<const Vector> inputs, double lambda,
                             std::size_t sample_count, Rng& rng) {
  if (!(lambda >= 0.0)) throw InvalidArgument("EWC lambda must be nonnegative");
  ConsolidatedTask task;
  task.head_index = head_index;
  task.anchor = learner.parameters();
  task.fisher_diagonal = compute_fisher_diagonal(learner, head_index, inputs, sample_count, rng);
  task.lambda = lambda;
  return task;
}

}  // namespace lenc
