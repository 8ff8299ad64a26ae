#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "lenc/learner.hpp"

namespace lenc {

// Elastic weight consolidation state for one learned task. The anchor covers
// the parameters that existed at consolidation time; parameters appended
// later (new decision heads) carry no Fisher weight.
struct ConsolidatedTask {
  std::size_t head_index = 0;
  Vector anchor;
  Vector fisher_diagonal;
  double lambda = 0.0;

  AnchorPenalty as_penalty() const;

  friend bool operator==(const ConsolidatedTask&, const ConsolidatedTask&) = default;
};

// Diagonal of the Fisher information of head `head_index`, using the model's
// own predictive distribution:  F_i = mean_x sum_y p(y|x) (d log p(y|x) / d theta_i)^2.
// Uses every input when sample_count >= inputs.size(), otherwise a seeded
// sample without replacement.
Vector compute_fisher_diagonal(const Learner& learner, std::size_t head_index,
                               std::span<const Vector> inputs, std::size_t sample_count, Rng& rng);

double ewc_penalty(std::span<const double> params, std::span<const ConsolidatedTask> tasks);
Vector ewc_gradient(std::span<const double> params, std::span<const ConsolidatedTask> tasks);

ConsolidatedTask consolidate(const Learner& learner, std::size_t head_index,
                             std::span<const Vector> inputs, double lambda,
                             std::size_t sample_count, Rng& rng);

std::vector<AnchorPenalty> as_penalties(std::span<const ConsolidatedTask> tasks);

}  // namespace lenc
