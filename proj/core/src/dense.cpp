#include "lenc/dense.hpp"

#include <algorithm>
#include <cmath>

#include "lenc/error.hpp"

namespace lenc {

DenseLayer DenseLayer::uniform(std::size_t in, std::size_t out, double scale, Rng& rng) {
  DenseLayer layer(in, out);
  for (double& w : layer.weights) w = rng.uniform(-scale, scale);
  for (double& b : layer.bias) b = rng.uniform(-scale, scale);
  return layer;
}

void DenseLayer::forward(std::span<const double> x, std::span<double> y) const {
  if (x.size() != inputs || y.size() != outputs) {
    throw InvalidArgument("dense layer: expected " + std::to_string(inputs) + " inputs, got " +
                          std::to_string(x.size()));
  }
  for (std::size_t r = 0; r < outputs; ++r) {
    const double* row = weights.data() + r * inputs;
    double acc = bias[r];
    for (std::size_t c = 0; c < inputs; ++c) acc += row[c] * x[c];
    y[r] = acc;
  }
}

Vector DenseLayer::forward(std::span<const double> x) const {
  Vector y(outputs);
  forward(x, y);
  return y;
}

void DenseLayer::backward(std::span<const double> x, std::span<const double> dy,
                          DenseLayer& grad, std::span<double> dx) const {
  for (std::size_t r = 0; r < outputs; ++r) {
    const double g = dy[r];
    grad.bias[r] += g;
    if (g == 0.0) continue;
    double* grow = grad.weights.data() + r * inputs;
    for (std::size_t c = 0; c < inputs; ++c) grow[c] += g * x[c];
  }
  if (dx.empty()) return;
  std::fill(dx.begin(), dx.end(), 0.0);
  for (std::size_t r = 0; r < outputs; ++r) {
    const double g = dy[r];
    if (g == 0.0) continue;
    const double* row = weights.data() + r * inputs;
    for (std::size_t c = 0; c < inputs; ++c) dx[c] += row[c] * g;
  }
}

void tanh_inplace(std::span<double> v) {
  for (double& x : v) x = std::tanh(x);
}

void append_parameters(const DenseLayer& layer, std::vector<double>& out) {
  out.insert(out.end(), layer.weights.begin(), layer.weights.end());
  out.insert(out.end(), layer.bias.begin(), layer.bias.end());
}

std::size_t load_parameters(DenseLayer& layer, std::span<const double> flat) {
  const std::size_t n = layer.parameter_count();
  if (flat.size() < n) throw InvalidArgument("flat parameter vector too short");
  std::copy_n(flat.begin(), layer.weights.size(), layer.weights.begin());
  std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(layer.weights.size()),
              layer.bias.size(), layer.bias.begin());
  return n;
}

bool all_finite(std::span<const double> v) noexcept {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace lenc
