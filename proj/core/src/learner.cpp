#include "lenc/learner.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lenc/error.hpp"

namespace lenc {
namespace {

constexpr std::uint8_t kArchitectureSection = 1;
constexpr std::uint8_t kParameterSection = 2;
constexpr std::uint8_t kStreamSection = 1;

void require_distribution(std::span<const double> p, const char* what) {
  if (p.empty()) throw InvalidArgument(std::string(what) + ": empty distribution");
  double sum = 0.0;
  for (double x : p) {
    if (!std::isfinite(x) || x < 0.0) {
      throw InvalidArgument(std::string(what) + ": entries must be finite and nonnegative");
    }
    sum += x;
  }
  if (std::abs(sum - 1.0) > 1e-6) {
    throw InvalidArgument(std::string(what) + ": entries sum to " + std::to_string(sum));
  }
}

}  // namespace

void LabeledDataset::validate() const {
  if (inputs.size() != labels.size()) {
    throw InvalidArgument("dataset " + name + ": inputs and labels differ in length");
  }
  const std::size_t d = dim();
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (inputs[i].size() != d) throw InvalidArgument("dataset " + name + ": ragged inputs");
    if (labels[i] >= class_count) throw InvalidArgument("dataset " + name + ": label out of range");
  }
}

void Stream::validate() const {
  if (inputs.empty()) throw InvalidArgument("stream is empty");
  const std::size_t d = inputs.front().size();
  for (const auto& x : inputs) {
    if (x.size() != d) throw InvalidArgument("stream inputs have non-uniform dimension");
  }
}

Bytes Stream::serialize() const {
  ByteWriter body;
  const std::size_t d = inputs.empty() ? 0 : inputs.front().size();
  body.u64(inputs.size());
  body.u64(d);
  for (const auto& x : inputs) {
    for (double v : x) body.f64(v);
  }
  Envelope env{EnvelopeKind::Stream, kFormatVersion, {}};
  env.sections.push_back({kStreamSection, std::move(body).take()});
  return encode_envelope(env);
}

Stream Stream::deserialize(std::span<const std::byte> data) {
  const Envelope env = decode_envelope(data, EnvelopeKind::Stream);
  ByteReader r(env.section(kStreamSection, "stream").body, "stream");
  const std::uint64_t n = r.u64("count");
  const std::uint64_t d = r.u64("dim");
  Stream s;
  s.inputs.assign(n, Vector(d));
  for (auto& x : s.inputs) {
    for (double& v : x) v = r.f64("values");
  }
  r.expect_end();
  return s;
}

std::size_t FeatureModule::parameter_count() const noexcept {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.parameter_count();
  return n;
}

// Probability primitives ----------------------------------------------------

Vector softmax_with_temperature(std::span<const double> logits, double temperature) {
  if (!(temperature > 0.0)) throw InvalidArgument("softmax temperature must be positive");
  if (logits.empty()) throw InvalidArgument("softmax of empty vector");
  const double top = *std::max_element(logits.begin(), logits.end());
  Vector out(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp((logits[i] - top) / temperature);
    sum += out[i];
  }
  for (double& p : out) p /= sum;
  return out;
}

double cross_entropy(std::span<const double> probs, std::size_t label, Diagnostics* diag) {
  if (label >= probs.size()) throw InvalidArgument("cross_entropy: label out of range");
  double p = probs[label];
  if (p < kProbabilityFloor) {
    p = kProbabilityFloor;
    if (diag) ++diag->clamped_probabilities;
  }
  return -std::log(p);
}

double kl_divergence(std::span<const double> p, std::span<const double> q, Diagnostics* diag) {
  if (p.size() != q.size()) throw InvalidArgument("kl_divergence: length mismatch");
  require_distribution(p, "kl_divergence p");
  require_distribution(q, "kl_divergence q");
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    double qi = q[i];
    if (qi < kProbabilityFloor) {
      qi = kProbabilityFloor;
      if (diag) ++diag->clamped_probabilities;
    }
    sum += p[i] * std::log(p[i] / qi);
  }
  return sum;
}

std::size_t argmax(std::span<const double> v) {
  if (v.empty()) throw InvalidArgument("argmax of empty vector");
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

// Anchor penalty --------------------------------------------------------------

namespace {

void check_penalty(std::span<const double> params, const AnchorPenalty& p) {
  if (p.anchor.size() != p.weight.size()) {
    throw InvalidArgument("anchor penalty: anchor and weight lengths differ");
  }
  if (p.anchor.size() > params.size()) {
    throw InvalidArgument("anchor penalty: anchor longer than parameter vector");
  }
}

}  // namespace

double anchor_penalty(std::span<const double> params, std::span<const AnchorPenalty> penalties) {
  double total = 0.0;
  for (const auto& p : penalties) {
    check_penalty(params, p);
    for (std::size_t i = 0; i < p.anchor.size(); ++i) {
      const double d = params[i] - p.anchor[i];
      total += 0.5 * p.weight[i] * d * d;
    }
  }
  return total;
}

void add_anchor_penalty_gradient(std::span<const double> params,
                                 std::span<const AnchorPenalty> penalties, std::span<double> grad) {
  for (const auto& p : penalties) {
    check_penalty(params, p);
    for (std::size_t i = 0; i < p.anchor.size(); ++i) {
      grad[i] += p.weight[i] * (params[i] - p.anchor[i]);
    }
  }
}

// Optimizer -------------------------------------------------------------------

SgdMomentum::SgdMomentum(double learning_rate, double momentum)
    : lr_(learning_rate), momentum_(momentum) {
  if (!(learning_rate >= 0.0)) throw InvalidArgument("learning rate must be nonnegative");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidArgument("momentum must be in [0, 1)");
}

void SgdMomentum::apply(std::span<double> params, std::span<const double> grad) {
  if (params.size() != grad.size()) throw InvalidArgument("sgd: gradient length mismatch");
  if (velocity_.size() != params.size()) velocity_.resize(params.size(), 0.0);
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity_[i] = momentum_ * velocity_[i] + grad[i];
    params[i] -= lr_ * velocity_[i];
  }
}

// Learner ---------------------------------------------------------------------

Learner Learner::create(std::vector<std::size_t> layer_sizes, Rng& rng) {
  if (layer_sizes.empty()) throw InvalidArgument("learner needs at least an input size");
  for (std::size_t s : layer_sizes) {
    if (s == 0) throw InvalidArgument("layer sizes must be positive");
  }
  Learner l;
  l.fm_.layer_sizes = std::move(layer_sizes);
  for (std::size_t i = 1; i < l.fm_.layer_sizes.size(); ++i) {
    l.fm_.layers.push_back(
        DenseLayer::uniform(l.fm_.layer_sizes[i - 1], l.fm_.layer_sizes[i], kInitScale, rng));
  }
  return l;
}

const DecisionHead& Learner::head(std::size_t index) const {
  if (index >= heads_.size()) throw InvalidArgument("no decision head " + std::to_string(index));
  return heads_[index];
}

DecisionHead& Learner::head(std::size_t index) {
  if (index >= heads_.size()) throw InvalidArgument("no decision head " + std::to_string(index));
  return heads_[index];
}

DecisionHead& Learner::append_decision_head(std::size_t class_count, Rng& rng) {
  if (class_count < 2) throw InvalidArgument("decision head needs at least 2 classes");
  DecisionHead h;
  h.task_index = heads_.size();
  h.linear = DenseLayer::uniform(fm_.output_dim(), class_count, kInitScale, rng);
  heads_.push_back(std::move(h));
  return heads_.back();
}

ActivationTrace Learner::forward(std::size_t head_index, std::span<const double> x) const {
  const DecisionHead& h = head(head_index);
  if (x.size() != fm_.input_dim()) {
    throw InvalidArgument("input has dimension " + std::to_string(x.size()) + ", expected " +
                          std::to_string(fm_.input_dim()));
  }
  ActivationTrace t;
  t.input.assign(x.begin(), x.end());
  t.hidden.reserve(fm_.layers.size());
  const Vector* prev = &t.input;
  for (const auto& layer : fm_.layers) {
    Vector a = layer.forward(*prev);
    tanh_inplace(a);
    t.hidden.push_back(std::move(a));
    prev = &t.hidden.back();
  }
  t.logits = h.linear.forward(*prev);
  return t;
}

Vector Learner::logits(std::size_t head_index, std::span<const double> x) const {
  return forward(head_index, x).logits;
}

std::size_t Learner::predict(std::size_t head_index, std::span<const double> x) const {
  return argmax(logits(head_index, x));
}

std::size_t Learner::parameter_count() const noexcept {
  std::size_t n = fm_.parameter_count();
  for (const auto& h : heads_) n += h.linear.parameter_count();
  return n;
}

Vector Learner::parameters() const {
  Vector out;
  out.reserve(parameter_count());
  for (const auto& l : fm_.layers) append_parameters(l, out);
  for (const auto& h : heads_) append_parameters(h.linear, out);
  return out;
}

void Learner::set_parameters(std::span<const double> flat) {
  if (flat.size() != parameter_count()) {
    throw InvalidArgument("set_parameters: expected " + std::to_string(parameter_count()) +
                          " values, got " + std::to_string(flat.size()));
  }
  std::size_t off = 0;
  for (auto& l : fm_.layers) off += load_parameters(l, flat.subspan(off));
  for (auto& h : heads_) off += load_parameters(h.linear, flat.subspan(off));
}

ParameterSnapshot Learner::export_parameters() const {
  ParameterSnapshot s;
  s.layer_sizes = fm_.layer_sizes;
  s.feature_layers = fm_.layers;
  for (const auto& h : heads_) s.heads.push_back(h.linear);
  return s;
}

ParameterSnapshot Learner::export_parameters(std::size_t head_index) const {
  ParameterSnapshot s;
  s.layer_sizes = fm_.layer_sizes;
  s.feature_layers = fm_.layers;
  s.heads.push_back(head(head_index).linear);
  return s;
}

Learner Learner::import_parameters(const ParameterSnapshot& snapshot) {
  snapshot.validate();
  Learner l;
  l.fm_.layer_sizes = snapshot.layer_sizes;
  l.fm_.layers = snapshot.feature_layers;
  for (const auto& lin : snapshot.heads) {
    DecisionHead h;
    h.task_index = l.heads_.size();
    h.linear = lin;
    l.heads_.push_back(std::move(h));
  }
  return l;
}

LossBreakdown Learner::evaluate_loss(std::size_t head_index, std::span<const TrainingSample> batch,
                                     const LossSpec& spec, Vector* grad,
                                     Diagnostics* diag) const {
  if (batch.empty()) throw InvalidArgument("evaluate_loss: empty batch");
  if (!(spec.temperature > 0.0)) throw InvalidArgument("loss temperature must be positive");
  const DecisionHead& h = head(head_index);
  const std::size_t classes = h.class_count();
  const double inv_batch = 1.0 / static_cast<double>(batch.size());
  const double t = spec.temperature;
  const double kl_scale = spec.scale_kl_by_t2 ? t * t : 1.0;

  std::vector<DenseLayer> fm_grad;
  DenseLayer head_grad;
  if (grad) {
    for (const auto& l : fm_.layers) fm_grad.push_back(l.zeros_like());
    head_grad = h.linear.zeros_like();
  }

  LossBreakdown out;
  Vector dlogits(classes);
  for (const TrainingSample& s : batch) {
    const ActivationTrace trace = forward(head_index, s.input);
    std::fill(dlogits.begin(), dlogits.end(), 0.0);

    if (s.label) {
      const Vector p = softmax_with_temperature(trace.logits, 1.0);
      out.terms.ce += cross_entropy(p, *s.label, diag);
      const double w = spec.ce_weight * inv_batch;
      for (std::size_t k = 0; k < classes; ++k) {
        dlogits[k] += w * (p[k] - (k == *s.label ? 1.0 : 0.0));
      }
    }
    if (!s.soft_target.empty()) {
      if (s.soft_target.size() != classes) {
        throw InvalidArgument("soft target has " + std::to_string(s.soft_target.size()) +
                              " classes, head has " + std::to_string(classes));
      }
      const Vector q = softmax_with_temperature(trace.logits, t);
      out.terms.kl += kl_scale * kl_divergence(s.soft_target, q, diag);
      const double w = spec.kl_weight * kl_scale * inv_batch / t;
      for (std::size_t k = 0; k < classes; ++k) dlogits[k] += w * (q[k] - s.soft_target[k]);
    }

    std::vector<Vector> dhidden;
    if (!s.hint_targets.empty()) {
      if (s.hint_targets.size() != trace.hidden.size()) {
        throw InvalidArgument("hint targets do not match the hidden layer count");
      }
      dhidden.resize(trace.hidden.size());
      for (std::size_t l = 0; l < trace.hidden.size(); ++l) {
        const Vector& u = trace.hidden[l];
        const Vector& target = s.hint_targets[l];
        if (target.size() != u.size()) throw InvalidArgument("hint target dimension mismatch");
        dhidden[l].resize(u.size());
        const double w = 2.0 * spec.hint_weight * inv_batch;
        for (std::size_t k = 0; k < u.size(); ++k) {
          const double d = u[k] - target[k];
          out.terms.hint += d * d;
          dhidden[l][k] = w * d;
        }
      }
    }

    if (!grad) continue;
    Vector dfeat(fm_.output_dim());
    h.linear.backward(trace.features(), dlogits, head_grad, dfeat);
    for (std::size_t l = fm_.layers.size(); l-- > 0;) {
      const Vector& a = trace.hidden[l];
      Vector dpre(a.size());
      for (std::size_t k = 0; k < a.size(); ++k) {
        const double da = dfeat[k] + (dhidden.empty() ? 0.0 : dhidden[l][k]);
        dpre[k] = da * (1.0 - a[k] * a[k]);
      }
      const Vector& below = l == 0 ? trace.input : trace.hidden[l - 1];
      Vector dx(l == 0 ? 0 : below.size());
      fm_.layers[l].backward(below, dpre, fm_grad[l], dx);
      dfeat = std::move(dx);
    }
  }

  out.terms.ce *= inv_batch;
  out.terms.kl *= inv_batch;
  out.terms.hint *= inv_batch;

  const Vector params = parameters();
  out.terms.penalty = anchor_penalty(params, spec.penalties);
  out.total = spec.combine(out.terms);

  if (grad) {
    grad->assign(params.size(), 0.0);
    Vector flat;
    flat.reserve(params.size());
    for (const auto& g : fm_grad) append_parameters(g, flat);
    std::copy(flat.begin(), flat.end(), grad->begin());
    std::size_t off = fm_.parameter_count();
    for (std::size_t i = 0; i < head_index; ++i) off += heads_[i].linear.parameter_count();
    flat.clear();
    append_parameters(head_grad, flat);
    std::copy(flat.begin(), flat.end(), grad->begin() + static_cast<std::ptrdiff_t>(off));
    add_anchor_penalty_gradient(params, spec.penalties, *grad);
  }
  return out;
}

double train_step(Learner& learner, std::size_t head_index, std::span<const TrainingSample> batch,
                  const LossSpec& spec, SgdMomentum& optimizer, Diagnostics* diag) {
  Vector grad;
  const LossBreakdown loss = learner.evaluate_loss(head_index, batch, spec, &grad, diag);
  if (!std::isfinite(loss.total) || !all_finite(grad)) {
    throw DivergenceError("non-finite loss or gradient (loss = " + std::to_string(loss.total) +
                          ")");
  }
  Vector params = learner.parameters();
  optimizer.apply(params, grad);
  learner.set_parameters(params);
  return loss.total;
}

FitResult fit(Learner& learner, std::size_t head_index, std::span<const TrainingSample> samples,
              const LossSpec& spec, const FitOptions& options, Rng& rng, const EpochHook& hook,
              Diagnostics* diag) {
  FitResult result;
  if (samples.empty() || options.epochs == 0) return result;
  const std::size_t batch_size = std::max<std::size_t>(1, std::min(options.batch_size, samples.size()));
  SgdMomentum optimizer(options.learning_rate, options.momentum);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<TrainingSample> batch;
  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    rng.shuffle(std::span(order));
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t end = std::min(order.size(), start + batch_size);
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.push_back(samples[order[i]]);
      loss_sum += train_step(learner, head_index, batch, spec, optimizer, diag) *
                  static_cast<double>(end - start);
    }
    result.epochs_run = epoch;
    result.final_loss = loss_sum / static_cast<double>(samples.size());
    if (hook) hook(epoch, result.final_loss);
  }
  return result;
}

double accuracy(const Learner& learner, std::size_t head_index, const LabeledDataset& data) {
  if (data.size() == 0) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (learner.predict(head_index, data.inputs[i]) == data.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

void write_dataset(ByteWriter& w, const LabeledDataset& d) {
  w.str(d.name);
  w.u32(static_cast<std::uint32_t>(d.class_count));
  w.u64(d.size());
  w.u64(d.dim());
  for (const auto& x : d.inputs) {
    for (double v : x) w.f64(v);
  }
  for (std::size_t y : d.labels) w.u32(static_cast<std::uint32_t>(y));
}

LabeledDataset read_dataset(ByteReader& r) {
  LabeledDataset d;
  d.name = r.str("dataset.name");
  d.class_count = r.u32("dataset.class_count");
  const std::uint64_t n = r.u64("dataset.count");
  const std::uint64_t dim = r.u64("dataset.dim");
  if (dim > 0 && n > (1ULL << 32) / dim) throw ValidationError("dataset.count", "too large");
  d.inputs.assign(n, Vector(dim));
  for (auto& x : d.inputs) {
    for (double& v : x) v = r.f64("dataset.inputs");
  }
  d.labels.resize(n);
  for (auto& y : d.labels) y = r.u32("dataset.labels");
  try {
    d.validate();
  } catch (const InvalidArgument& e) {
    throw ValidationError("dataset", e.what());
  }
  return d;
}

void write_rows(ByteWriter& w, std::span<const Vector> rows) {
  w.u64(rows.size());
  for (const auto& r : rows) w.f64s(r);
}

std::vector<Vector> read_rows(ByteReader& r, std::string_view field) {
  const std::uint64_t n = r.u64(field);
  if (n > (1ULL << 32)) throw ValidationError(std::string(field), "too many rows");
  std::vector<Vector> rows(n);
  for (auto& row : rows) row = r.f64s(field);
  return rows;
}

// Snapshot --------------------------------------------------------------------

void ParameterSnapshot::validate() const {
  if (layer_sizes.empty()) throw ValidationError("layer_sizes", "empty");
  for (std::size_t i = 0; i < layer_sizes.size(); ++i) {
    if (layer_sizes[i] == 0) {
      throw ValidationError("layer_sizes[" + std::to_string(i) + "]", "must be positive");
    }
  }
  if (feature_layers.size() + 1 != layer_sizes.size()) {
    throw ValidationError("feature_layers", "expected " + std::to_string(layer_sizes.size() - 1) +
                                                " layers, got " +
                                                std::to_string(feature_layers.size()));
  }
  auto check_layer = [](const DenseLayer& l, const std::string& name, std::size_t in,
                        std::optional<std::size_t> out) {
    if (l.inputs != in) {
      throw ValidationError(name + ".inputs",
                            "expected " + std::to_string(in) + ", got " + std::to_string(l.inputs));
    }
    if (out && l.outputs != *out) {
      throw ValidationError(name + ".outputs", "expected " + std::to_string(*out) + ", got " +
                                                   std::to_string(l.outputs));
    }
    if (l.weights.size() != l.inputs * l.outputs) {
      throw ValidationError(name + ".weights", "size does not match shape");
    }
    if (l.bias.size() != l.outputs) throw ValidationError(name + ".bias", "size does not match shape");
    if (!all_finite(l.weights) || !all_finite(l.bias)) {
      throw ValidationError(name, "non-finite parameter");
    }
  };
  for (std::size_t i = 0; i < feature_layers.size(); ++i) {
    check_layer(feature_layers[i], "feature_layers[" + std::to_string(i) + "]", layer_sizes[i],
                layer_sizes[i + 1]);
  }
  for (std::size_t i = 0; i < heads.size(); ++i) {
    const std::string name = "heads[" + std::to_string(i) + "]";
    check_layer(heads[i], name, layer_sizes.back(), std::nullopt);
    if (heads[i].outputs < 2) throw ValidationError(name + ".outputs", "fewer than 2 classes");
  }
}

Bytes ParameterSnapshot::serialize() const {
  validate();
  ByteWriter arch;
  arch.u32(static_cast<std::uint32_t>(layer_sizes.size()));
  for (std::size_t s : layer_sizes) arch.u32(static_cast<std::uint32_t>(s));
  arch.u32(static_cast<std::uint32_t>(heads.size()));
  for (const auto& h : heads) {
    arch.u32(static_cast<std::uint32_t>(h.inputs));
    arch.u32(static_cast<std::uint32_t>(h.outputs));
  }
  Vector flat;
  for (const auto& l : feature_layers) append_parameters(l, flat);
  for (const auto& h : heads) append_parameters(h, flat);
  ByteWriter params;
  params.f64s(flat);

  Envelope env{EnvelopeKind::Learner, kFormatVersion, {}};
  env.sections.push_back({kArchitectureSection, std::move(arch).take()});
  env.sections.push_back({kParameterSection, std::move(params).take()});
  return encode_envelope(env);
}

ParameterSnapshot ParameterSnapshot::deserialize(std::span<const std::byte> data) {
  const Envelope env = decode_envelope(data, EnvelopeKind::Learner);
  ParameterSnapshot s;
  {
    ByteReader r(env.section(kArchitectureSection, "architecture").body, "architecture");
    const std::uint32_t n = r.u32("layer_count");
    if (n == 0 || n > 1024) throw ValidationError("architecture.layer_count", "out of range");
    for (std::uint32_t i = 0; i < n; ++i) s.layer_sizes.push_back(r.u32("layer_sizes"));
    for (std::size_t i = 1; i < s.layer_sizes.size(); ++i) {
      s.feature_layers.emplace_back(s.layer_sizes[i - 1], s.layer_sizes[i]);
    }
    const std::uint32_t heads = r.u32("head_count");
    if (heads > 4096) throw ValidationError("architecture.head_count", "out of range");
    for (std::uint32_t i = 0; i < heads; ++i) {
      const std::uint32_t in = r.u32("head.inputs");
      const std::uint32_t out = r.u32("head.outputs");
      s.heads.emplace_back(in, out);
    }
    r.expect_end();
  }
  ByteReader r(env.section(kParameterSection, "parameters").body, "parameters");
  const Vector flat = r.f64s("values");
  r.expect_end();
  std::size_t expected = 0;
  for (const auto& l : s.feature_layers) expected += l.parameter_count();
  for (const auto& h : s.heads) expected += h.parameter_count();
  if (flat.size() != expected) {
    throw ValidationError("parameters.values", "expected " + std::to_string(expected) +
                                                   " values, got " + std::to_string(flat.size()));
  }
  std::span<const double> rest(flat);
  for (auto& l : s.feature_layers) rest = rest.subspan(load_parameters(l, rest));
  for (auto& h : s.heads) rest = rest.subspan(load_parameters(h, rest));
  s.validate();
  return s;
}

}  // namespace lenc
