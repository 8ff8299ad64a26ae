#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "lenc/random.hpp"

namespace lenc {

using Vector = std::vector<double>;

// Affine map y = W x + b with W stored row-major (outputs x inputs).
struct DenseLayer {
  std::size_t inputs = 0;
  std::size_t outputs = 0;
  std::vector<double> weights;
  std::vector<double> bias;

  DenseLayer() = default;
  DenseLayer(std::size_t in, std::size_t out)
      : inputs(in), outputs(out), weights(in * out, 0.0), bias(out, 0.0) {}

  static DenseLayer uniform(std::size_t in, std::size_t out, double scale, Rng& rng);

  std::size_t parameter_count() const noexcept { return weights.size() + bias.size(); }

  double& weight(std::size_t row, std::size_t col) { return weights[row * inputs + col]; }
  double weight(std::size_t row, std::size_t col) const { return weights[row * inputs + col]; }

  void forward(std::span<const double> x, std::span<double> y) const;
  Vector forward(std::span<const double> x) const;

  // Accumulates dW += dy x^T and db += dy into `grad`; writes W^T dy into dx
  // when dx is non-empty.
  void backward(std::span<const double> x, std::span<const double> dy, DenseLayer& grad,
                std::span<double> dx) const;

  DenseLayer zeros_like() const { return DenseLayer(inputs, outputs); }

  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

void tanh_inplace(std::span<double> v);

// Flattening helpers: weights then bias, layer by layer.
void append_parameters(const DenseLayer& layer, std::vector<double>& out);
std::size_t load_parameters(DenseLayer& layer, std::span<const double> flat);

bool all_finite(std::span<const double> v) noexcept;

}  // namespace lenc
