#pragma once

// Knowledge self-assessment: a per-task Gaussian VAE scored with likelihood
// regret, stream aggregation, the three-verdict threshold rule and
// decision-head routing.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "lenc/binary_io.hpp"
#include "lenc/dense.hpp"
#include "lenc/random.hpp"

namespace lenc {

struct VaeSettings {
  std::size_t hidden = 16;
  std::size_t latent_dim = 2;
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double momentum = 0.9;
  double decoder_sigma = 0.1;  // fixed std-dev of the Gaussian decoder
  std::size_t min_training_size = 1000;
};

struct Posterior {
  Vector mean;
  Vector log_variance;
};

class VaeModel {
public:
  VaeModel() = default;

  static VaeModel initialize(std::size_t input_dim, const VaeSettings& settings,
                             std::uint64_t seed);

  std::size_t input_dim() const noexcept { return encoder_hidden.inputs; }
  std::size_t latent_dim() const noexcept { return encoder_mean.outputs; }

  Posterior encode(std::span<const double> x) const;
  Vector decode(std::span<const double> z) const;

  // Deterministic standard-normal draw for the reparameterization trick,
  // seeded from the model seed and the bytes of x, so that a point's score
  // does not depend on its position in a stream.
  Vector noise_for(std::span<const double> x, std::size_t draw) const;

  Vector parameters() const;
  void set_parameters(std::span<const double> flat);

  // -ELBO for one input and one noise draw, with its gradient w.r.t.
  // parameters() accumulated into `grad` (scaled by `weight`).
  double negative_elbo_gradient(std::span<const double> x, std::span<const double> eps,
                                double weight, std::span<double> grad) const;

  Bytes serialize() const;
  static VaeModel deserialize(std::span<const std::byte> data);

  DenseLayer encoder_hidden;
  DenseLayer encoder_mean;
  DenseLayer encoder_log_variance;
  DenseLayer decoder_hidden;
  DenseLayer decoder_output;
  double decoder_sigma = 0.1;
  std::uint64_t seed = 0;
  std::size_t training_size = 0;
  bool trained = false;
  bool unreliable = false;

  friend bool operator==(const VaeModel&, const VaeModel&) = default;
};

// Single-sample ELBO: log N(x; decode(z), sigma^2 I) - KL(q || N(0, I)) with
// z = mean + exp(log_variance / 2) * eps.
double elbo(const VaeModel& vae, std::span<const double> x, const Posterior& q,
            std::span<const double> eps);

// ELBO averaged over inputs, using each input's own deterministic noise draw.
double mean_elbo(const VaeModel& vae, std::span<const Vector> inputs);

// Trains by minibatch SGD with momentum on -ELBO. When `history` is set it
// receives mean_elbo before training followed by one value per epoch.
VaeModel train_vae(std::span<const Vector> inputs, const VaeSettings& settings,
                   std::uint64_t seed, std::vector<double>* history = nullptr);

struct RegretSettings {
  std::size_t opt_steps = 30;
  double opt_lr = 0.05;
  std::size_t noise_draws = 1;
  std::size_t threads = 1;  // per-point scoring parallelism; never changes results
};

// ELBO gain from re-optimizing the posterior statistics of x alone (decoder
// frozen), starting from the encoder's output. The best iterate is kept, so
// the result is never negative. Throws ScoringError on divergence.
double likelihood_regret(const VaeModel& vae, std::span<const double> x,
                         const RegretSettings& settings);

struct OodScore {
  double value = 0.0;
  Vector per_point;
  std::size_t failures = 0;  // points excluded after a scoring error
};

OodScore stream_score(const VaeModel& vae, std::span<const Vector> points,
                      const RegretSettings& settings);

enum class Verdict : std::uint8_t { Expert = 0, Limited = 1, Unknown = 2 };

std::string_view to_string(Verdict v) noexcept;

struct Thresholds {
  double delta = 0.0;
  double epsilon = 0.0;

  void validate() const;
  friend bool operator==(const Thresholds&, const Thresholds&) = default;
};

// value > delta -> Unknown; epsilon < value < delta -> Limited;
// value < epsilon -> Expert. Equality resolves to the less knowledgeable side.
Verdict verdict(double score, const Thresholds& th);

// Index of the minimum score; ties go to the lowest index.
std::size_t route_head(std::span<const double> scores);

struct CalibrationSettings {
  double epsilon_quantile = 0.90;
  double delta_quantile = 0.995;
  std::size_t stream_size = 25;
  std::size_t resamples = 400;
  double holdout_fraction = 0.2;
};

// Quantiles of bootstrap stream means drawn from held-out per-point scores.
Thresholds calibrate_thresholds(std::span<const double> holdout_scores,
                                const CalibrationSettings& settings, Rng& rng);

double quantile(std::vector<double> values, double q);

struct KsaSettings {
  VaeSettings vae;
  RegretSettings regret;
  CalibrationSettings calibration;
};

// One task's detector: the VAE, its thresholds and the unlabeled data it was
// fitted on (needed when the task is later refreshed).
struct KsaModule {
  VaeModel vae;
  Thresholds thresholds;
  std::vector<Vector> data;
  bool usable = true;

  bool unreliable() const noexcept { return vae.unreliable; }
  OodScore score(std::span<const Vector> points, const RegretSettings& settings) const;

  friend bool operator==(const KsaModule&, const KsaModule&) = default;
};

// Splits `inputs` into a training part and a calibration hold-out, trains the
// VAE and calibrates thresholds.
KsaModule fit_ksa(std::vector<Vector> inputs, const KsaSettings& settings, std::uint64_t seed);

}  // namespace lenc
