#include "lenc/ksa.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <exception>
#include <numeric>
#include <thread>

#include "lenc/error.hpp"
#include "lenc/learner.hpp"

namespace lenc {
namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;
constexpr std::uint8_t kVaeArchitectureSection = 1;
constexpr std::uint8_t kVaeParameterSection = 2;
constexpr std::uint8_t kVaeMetaSection = 3;

struct DecoderPass {
  Vector pre_hidden;
  Vector hidden;
  Vector output;
};

DecoderPass run_decoder(const VaeModel& vae, std::span<const double> z) {
  DecoderPass p;
  p.hidden = vae.decoder_hidden.forward(z);
  tanh_inplace(p.hidden);
  p.output = vae.decoder_output.forward(p.hidden);
  return p;
}

Vector sample_latent(const Posterior& q, std::span<const double> eps) {
  Vector z(q.mean.size());
  for (std::size_t j = 0; j < z.size(); ++j) {
    z[j] = q.mean[j] + std::exp(0.5 * q.log_variance[j]) * eps[j];
  }
  return z;
}

double gaussian_log_density(std::span<const double> x, std::span<const double> mean,
                            double sigma) {
  const double var = sigma * sigma;
  double sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - mean[i];
    sum += d * d / var;
  }
  return -0.5 * (sum + static_cast<double>(x.size()) * (kLog2Pi + std::log(var)));
}

double kl_to_standard_normal(const Posterior& q) {
  double sum = 0.0;
  for (std::size_t j = 0; j < q.mean.size(); ++j) {
    sum += std::exp(q.log_variance[j]) + q.mean[j] * q.mean[j] - 1.0 - q.log_variance[j];
  }
  return 0.5 * sum;
}

// d ELBO / d(mean, log_variance) with the decoder frozen.
double elbo_posterior_gradient(const VaeModel& vae, std::span<const double> x, const Posterior& q,
                               std::span<const double> eps, Vector& d_mean, Vector& d_logvar) {
  const Vector z = sample_latent(q, eps);
  const DecoderPass dec = run_decoder(vae, z);
  const double value = gaussian_log_density(x, dec.output, vae.decoder_sigma) -
                       kl_to_standard_normal(q);

  const double inv_var = 1.0 / (vae.decoder_sigma * vae.decoder_sigma);
  Vector d_out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) d_out[i] = (x[i] - dec.output[i]) * inv_var;

  DenseLayer scratch_out = vae.decoder_output.zeros_like();
  Vector d_hidden(dec.hidden.size());
  vae.decoder_output.backward(dec.hidden, d_out, scratch_out, d_hidden);
  for (std::size_t k = 0; k < d_hidden.size(); ++k) {
    d_hidden[k] *= 1.0 - dec.hidden[k] * dec.hidden[k];
  }
  DenseLayer scratch_hidden = vae.decoder_hidden.zeros_like();
  Vector d_z(z.size());
  vae.decoder_hidden.backward(z, d_hidden, scratch_hidden, d_z);

  d_mean.resize(z.size());
  d_logvar.resize(z.size());
  for (std::size_t j = 0; j < z.size(); ++j) {
    const double s = std::exp(0.5 * q.log_variance[j]);
    d_mean[j] = d_z[j] - q.mean[j];
    d_logvar[j] = d_z[j] * 0.5 * s * eps[j] - 0.5 * (s * s - 1.0);
  }
  return value;
}

}  // namespace

// VaeModel ------------------------------------------------------------------

VaeModel VaeModel::initialize(std::size_t input_dim, const VaeSettings& settings,
                              std::uint64_t seed) {
  if (input_dim == 0 || settings.hidden == 0 || settings.latent_dim == 0) {
    throw InvalidArgument("VAE dimensions must be positive");
  }
  if (!(settings.decoder_sigma > 0.0)) throw InvalidArgument("decoder sigma must be positive");
  Rng rng(derive_seed(seed, "vae.init"));
  VaeModel v;
  v.encoder_hidden = DenseLayer::uniform(input_dim, settings.hidden, kInitScale, rng);
  v.encoder_mean = DenseLayer::uniform(settings.hidden, settings.latent_dim, kInitScale, rng);
  v.encoder_log_variance =
      DenseLayer::uniform(settings.hidden, settings.latent_dim, kInitScale, rng);
  v.decoder_hidden = DenseLayer::uniform(settings.latent_dim, settings.hidden, kInitScale, rng);
  v.decoder_output = DenseLayer::uniform(settings.hidden, input_dim, kInitScale, rng);
  v.decoder_sigma = settings.decoder_sigma;
  v.seed = seed;
  return v;
}

Posterior VaeModel::encode(std::span<const double> x) const {
  if (x.size() != input_dim()) throw InvalidArgument("VAE input dimension mismatch");
  Vector h = encoder_hidden.forward(x);
  tanh_inplace(h);
  return Posterior{encoder_mean.forward(h), encoder_log_variance.forward(h)};
}

Vector VaeModel::decode(std::span<const double> z) const {
  if (z.size() != latent_dim()) throw InvalidArgument("VAE latent dimension mismatch");
  return run_decoder(*this, z).output;
}

Vector VaeModel::noise_for(std::span<const double> x, std::size_t draw) const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double v : x) {
    std::uint64_t bits = 0;
    std::memcpy(&bits, &v, sizeof bits);
    for (int i = 0; i < 8; ++i) {
      h ^= (bits >> (8 * i)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  }
  Rng rng(derive_seed(derive_seed(seed, "vae.noise"), h ^ mix64(draw)));
  Vector eps(latent_dim());
  for (double& e : eps) e = rng.normal();
  return eps;
}

Vector VaeModel::parameters() const {
  Vector out;
  for (const DenseLayer* l : {&encoder_hidden, &encoder_mean, &encoder_log_variance,
                              &decoder_hidden, &decoder_output}) {
    append_parameters(*l, out);
  }
  return out;
}

void VaeModel::set_parameters(std::span<const double> flat) {
  std::size_t off = 0;
  for (DenseLayer* l : {&encoder_hidden, &encoder_mean, &encoder_log_variance, &decoder_hidden,
                        &decoder_output}) {
    off += load_parameters(*l, flat.subspan(off));
  }
  if (off != flat.size()) throw InvalidArgument("VAE parameter vector length mismatch");
}

double VaeModel::negative_elbo_gradient(std::span<const double> x, std::span<const double> eps,
                                        double weight, std::span<double> grad) const {
  // Encoder.
  Vector h = encoder_hidden.forward(x);
  tanh_inplace(h);
  const Posterior q{encoder_mean.forward(h), encoder_log_variance.forward(h)};
  const Vector z = sample_latent(q, eps);
  const DecoderPass dec = run_decoder(*this, z);
  const double value = gaussian_log_density(x, dec.output, decoder_sigma) -
                       kl_to_standard_normal(q);

  DenseLayer g_enc_h = encoder_hidden.zeros_like();
  DenseLayer g_enc_m = encoder_mean.zeros_like();
  DenseLayer g_enc_v = encoder_log_variance.zeros_like();
  DenseLayer g_dec_h = decoder_hidden.zeros_like();
  DenseLayer g_dec_o = decoder_output.zeros_like();

  // Loss is -ELBO, scaled by `weight`.
  const double inv_var = 1.0 / (decoder_sigma * decoder_sigma);
  Vector d_out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) d_out[i] = -weight * (x[i] - dec.output[i]) * inv_var;
  Vector d_hidden(dec.hidden.size());
  decoder_output.backward(dec.hidden, d_out, g_dec_o, d_hidden);
  for (std::size_t k = 0; k < d_hidden.size(); ++k) {
    d_hidden[k] *= 1.0 - dec.hidden[k] * dec.hidden[k];
  }
  Vector d_z(z.size());
  decoder_hidden.backward(z, d_hidden, g_dec_h, d_z);

  Vector d_mean(z.size());
  Vector d_logvar(z.size());
  for (std::size_t j = 0; j < z.size(); ++j) {
    const double s = std::exp(0.5 * q.log_variance[j]);
    d_mean[j] = d_z[j] + weight * q.mean[j];
    d_logvar[j] = d_z[j] * 0.5 * s * eps[j] + weight * 0.5 * (s * s - 1.0);
  }
  Vector d_h_m(h.size());
  Vector d_h_v(h.size());
  encoder_mean.backward(h, d_mean, g_enc_m, d_h_m);
  encoder_log_variance.backward(h, d_logvar, g_enc_v, d_h_v);
  Vector d_pre(h.size());
  for (std::size_t k = 0; k < h.size(); ++k) d_pre[k] = (d_h_m[k] + d_h_v[k]) * (1.0 - h[k] * h[k]);
  encoder_hidden.backward(x, d_pre, g_enc_h, {});

  Vector flat;
  flat.reserve(grad.size());
  for (const DenseLayer* l : {&g_enc_h, &g_enc_m, &g_enc_v, &g_dec_h, &g_dec_o}) {
    append_parameters(*l, flat);
  }
  for (std::size_t i = 0; i < flat.size(); ++i) grad[i] += flat[i];
  return -value;
}

Bytes VaeModel::serialize() const {
  ByteWriter arch;
  arch.u32(static_cast<std::uint32_t>(input_dim()));
  arch.u32(static_cast<std::uint32_t>(encoder_hidden.outputs));
  arch.u32(static_cast<std::uint32_t>(latent_dim()));
  arch.u32(static_cast<std::uint32_t>(decoder_hidden.outputs));
  ByteWriter params;
  params.f64s(parameters());
  ByteWriter meta;
  meta.f64(decoder_sigma);
  meta.u64(seed);
  meta.u64(training_size);
  meta.u8(trained ? 1 : 0);
  meta.u8(unreliable ? 1 : 0);
  Envelope env{EnvelopeKind::Vae, kFormatVersion, {}};
  env.sections.push_back({kVaeArchitectureSection, std::move(arch).take()});
  env.sections.push_back({kVaeParameterSection, std::move(params).take()});
  env.sections.push_back({kVaeMetaSection, std::move(meta).take()});
  return encode_envelope(env);
}

VaeModel VaeModel::deserialize(std::span<const std::byte> data) {
  const Envelope env = decode_envelope(data, EnvelopeKind::Vae);
  ByteReader a(env.section(kVaeArchitectureSection, "architecture").body, "vae.architecture");
  const std::uint32_t in = a.u32("input_dim");
  const std::uint32_t enc_hidden = a.u32("encoder_hidden");
  const std::uint32_t latent = a.u32("latent_dim");
  const std::uint32_t dec_hidden = a.u32("decoder_hidden");
  a.expect_end();
  if (in == 0 || enc_hidden == 0 || latent == 0 || dec_hidden == 0) {
    throw ValidationError("vae.architecture", "zero dimension");
  }
  VaeModel v;
  v.encoder_hidden = DenseLayer(in, enc_hidden);
  v.encoder_mean = DenseLayer(enc_hidden, latent);
  v.encoder_log_variance = DenseLayer(enc_hidden, latent);
  v.decoder_hidden = DenseLayer(latent, dec_hidden);
  v.decoder_output = DenseLayer(dec_hidden, in);
  ByteReader p(env.section(kVaeParameterSection, "parameters").body, "vae.parameters");
  const Vector flat = p.f64s("values");
  p.expect_end();
  if (flat.size() != v.parameters().size()) {
    throw ValidationError("vae.parameters.values", "count does not match architecture");
  }
  if (!all_finite(flat)) throw ValidationError("vae.parameters.values", "non-finite value");
  v.set_parameters(flat);
  ByteReader m(env.section(kVaeMetaSection, "meta").body, "vae.meta");
  v.decoder_sigma = m.f64("decoder_sigma");
  v.seed = m.u64("seed");
  v.training_size = m.u64("training_size");
  v.trained = m.u8("trained") != 0;
  v.unreliable = m.u8("unreliable") != 0;
  m.expect_end();
  if (!(v.decoder_sigma > 0.0)) throw ValidationError("vae.meta.decoder_sigma", "must be positive");
  return v;
}

// Scoring ---------------------------------------------------------------------

double elbo(const VaeModel& vae, std::span<const double> x, const Posterior& q,
            std::span<const double> eps) {
  if (x.size() != vae.input_dim()) throw InvalidArgument("elbo: input dimension mismatch");
  if (q.mean.size() != vae.latent_dim() || q.log_variance.size() != vae.latent_dim() ||
      eps.size() != vae.latent_dim()) {
    throw InvalidArgument("elbo: latent dimension mismatch");
  }
  const Vector z = sample_latent(q, eps);
  const Vector recon = vae.decode(z);
  const double value =
      gaussian_log_density(x, recon, vae.decoder_sigma) - kl_to_standard_normal(q);
  if (!std::isfinite(value)) throw ScoringError("elbo is not finite");
  return value;
}

double mean_elbo(const VaeModel& vae, std::span<const Vector> inputs) {
  if (inputs.empty()) throw InvalidArgument("mean_elbo: no inputs");
  double sum = 0.0;
  for (const auto& x : inputs) sum += elbo(vae, x, vae.encode(x), vae.noise_for(x, 0));
  return sum / static_cast<double>(inputs.size());
}

VaeModel train_vae(std::span<const Vector> inputs, const VaeSettings& settings,
                   std::uint64_t seed, std::vector<double>* history) {
  if (inputs.empty()) throw InvalidArgument("train_vae: no inputs");
  VaeModel vae = VaeModel::initialize(inputs.front().size(), settings, seed);
  vae.training_size = inputs.size();
  vae.unreliable = inputs.size() < settings.min_training_size;
  if (history) {
    history->clear();
    history->push_back(mean_elbo(vae, inputs));
  }

  Rng rng(derive_seed(seed, "vae.train"));
  SgdMomentum optimizer(settings.learning_rate, settings.momentum);
  std::vector<std::size_t> order(inputs.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t batch = std::max<std::size_t>(1, std::min(settings.batch_size, inputs.size()));
  Vector params = vae.parameters();
  Vector grad(params.size());
  Vector eps(vae.latent_dim());
  for (std::size_t epoch = 0; epoch < settings.epochs; ++epoch) {
    rng.shuffle(std::span(order));
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      const double w = 1.0 / static_cast<double>(end - start);
      std::fill(grad.begin(), grad.end(), 0.0);
      double loss = 0.0;
      for (std::size_t i = start; i < end; ++i) {
        for (double& e : eps) e = rng.normal();
        loss += w * vae.negative_elbo_gradient(inputs[order[i]], eps, w, grad);
      }
      if (!std::isfinite(loss) || !all_finite(grad)) {
        throw DivergenceError("VAE training diverged at epoch " + std::to_string(epoch));
      }
      optimizer.apply(params, grad);
      vae.set_parameters(params);
    }
    if (history) history->push_back(mean_elbo(vae, inputs));
  }
  vae.trained = true;
  return vae;
}

double likelihood_regret(const VaeModel& vae, std::span<const double> x,
                         const RegretSettings& settings) {
  if (settings.opt_steps == 0) throw InvalidArgument("likelihood_regret: opt_steps must be >= 1");
  if (x.size() != vae.input_dim()) throw InvalidArgument("likelihood_regret: dimension mismatch");
  const Posterior start = vae.encode(x);
  const std::size_t draws = std::max<std::size_t>(1, settings.noise_draws);
  std::vector<Vector> noise;
  for (std::size_t d = 0; d < draws; ++d) noise.push_back(vae.noise_for(x, d));

  auto objective = [&](const Posterior& q, Vector* d_mean, Vector* d_logvar) {
    double value = 0.0;
    Vector gm;
    Vector gv;
    if (d_mean) {
      d_mean->assign(q.mean.size(), 0.0);
      d_logvar->assign(q.mean.size(), 0.0);
    }
    for (const auto& eps : noise) {
      value += elbo_posterior_gradient(vae, x, q, eps, gm, gv);
      if (d_mean) {
        for (std::size_t j = 0; j < gm.size(); ++j) {
          (*d_mean)[j] += gm[j];
          (*d_logvar)[j] += gv[j];
        }
      }
    }
    const double inv = 1.0 / static_cast<double>(noise.size());
    if (d_mean) {
      for (std::size_t j = 0; j < gm.size(); ++j) {
        (*d_mean)[j] *= inv;
        (*d_logvar)[j] *= inv;
      }
    }
    return value * inv;
  };

  Posterior q = start;
  Vector d_mean;
  Vector d_logvar;
  const double initial = objective(q, &d_mean, &d_logvar);
  if (!std::isfinite(initial)) throw ScoringError("initial ELBO is not finite");
  double best = initial;
  for (std::size_t step = 0; step < settings.opt_steps; ++step) {
    for (std::size_t j = 0; j < q.mean.size(); ++j) {
      q.mean[j] += settings.opt_lr * d_mean[j];
      q.log_variance[j] += settings.opt_lr * d_logvar[j];
    }
    const double value = objective(q, &d_mean, &d_logvar);
    if (!std::isfinite(value) || !all_finite(d_mean) || !all_finite(d_logvar)) {
      throw ScoringError("posterior optimization diverged at step " + std::to_string(step));
    }
    best = std::max(best, value);
  }
  return best - initial;
}

OodScore stream_score(const VaeModel& vae, std::span<const Vector> points,
                      const RegretSettings& settings) {
  if (points.empty()) throw InvalidArgument("stream_score: empty stream");
  const std::size_t n = points.size();
  std::vector<double> values(n, 0.0);
  std::vector<char> failed(n, 0);
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      try {
        values[i] = likelihood_regret(vae, points[i], settings);
      } catch (const ScoringError&) {
        failed[i] = 1;
      }
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(settings.threads, 1, n);
  if (threads == 1) {
    work(0, n);
  } else {
    std::vector<std::jthread> pool;
    const std::size_t chunk = (n + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
      const std::size_t begin = t * chunk;
      const std::size_t end = std::min(n, begin + chunk);
      if (begin < end) pool.emplace_back(work, begin, end);
    }
  }

  OodScore out;
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (failed[i]) {
      ++out.failures;
      continue;
    }
    out.per_point.push_back(values[i]);
    sum += values[i];
  }
  if (out.per_point.empty()) throw ScoringError("every point in the stream failed to score");
  out.value = sum / static_cast<double>(out.per_point.size());
  return out;
}

std::string_view to_string(Verdict v) noexcept {
  switch (v) {
    case Verdict::Expert: return "Expert";
    case Verdict::Limited: return "Limited";
    case Verdict::Unknown: return "Unknown";
  }
  return "?";
}

void Thresholds::validate() const {
  if (!std::isfinite(delta) || !std::isfinite(epsilon)) {
    throw InvalidArgument("thresholds must be finite");
  }
  if (!(epsilon < delta)) throw InvalidArgument("thresholds require epsilon < delta");
}

Verdict verdict(double score, const Thresholds& th) {
  th.validate();
  if (score >= th.delta) return Verdict::Unknown;
  if (score >= th.epsilon) return Verdict::Limited;
  return Verdict::Expert;
}

std::size_t route_head(std::span<const double> scores) {
  if (scores.empty()) throw RoutingError("no tasks to route to");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] < scores[best]) best = i;
  }
  return best;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw InvalidArgument("quantile of empty sample");
  std::sort(values.begin(), values.end());
  const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(values.size() - 1, lo + 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

Thresholds calibrate_thresholds(std::span<const double> holdout_scores,
                                const CalibrationSettings& settings, Rng& rng) {
  if (holdout_scores.empty()) throw InvalidArgument("calibration needs held-out scores");
  if (!(settings.epsilon_quantile < settings.delta_quantile)) {
    throw InvalidArgument("calibration quantiles require epsilon < delta");
  }
  const std::size_t size = std::max<std::size_t>(1, settings.stream_size);
  const std::size_t resamples = std::max<std::size_t>(2, settings.resamples);
  std::vector<double> means(resamples);
  for (double& m : means) {
    double sum = 0.0;
    for (std::size_t i = 0; i < size; ++i) sum += holdout_scores[rng.index(holdout_scores.size())];
    m = sum / static_cast<double>(size);
  }
  Thresholds th;
  th.epsilon = quantile(means, settings.epsilon_quantile);
  th.delta = quantile(means, settings.delta_quantile);
  if (!(th.delta > th.epsilon)) th.delta = th.epsilon + 1e-9 * std::max(1.0, std::abs(th.epsilon));
  return th;
}

OodScore KsaModule::score(std::span<const Vector> points, const RegretSettings& settings) const {
  if (!usable) throw ScoringError("detector is not usable");
  return stream_score(vae, points, settings);
}

KsaModule fit_ksa(std::vector<Vector> inputs, const KsaSettings& settings, std::uint64_t seed) {
  if (inputs.empty()) throw InvalidArgument("fit_ksa: no inputs");
  KsaModule ksa;
  ksa.data = inputs;

  Rng rng(derive_seed(seed, "ksa.split"));
  rng.shuffle(std::span(inputs));
  std::size_t holdout = static_cast<std::size_t>(
      std::llround(settings.calibration.holdout_fraction * static_cast<double>(inputs.size())));
  holdout = std::clamp<std::size_t>(holdout, 1, inputs.size());
  std::span<const Vector> calibration(inputs.data(), holdout);
  std::span<const Vector> training(inputs.data() + holdout, inputs.size() - holdout);
  if (training.empty()) training = calibration;

  ksa.vae = train_vae(training, settings.vae, derive_seed(seed, "ksa.vae"));
  ksa.vae.unreliable = inputs.size() < settings.vae.min_training_size;
  const OodScore held = stream_score(ksa.vae, calibration, settings.regret);
  ksa.thresholds = calibrate_thresholds(held.per_point, settings.calibration, rng);
  return ksa;
}

}  // namespace lenc
