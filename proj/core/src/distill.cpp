#include "lenc/distill.hpp"

#include <cmath>

#include "lenc/error.hpp"

namespace lenc {
namespace {

constexpr std::uint8_t kKindSection = 1;
constexpr std::uint8_t kDatasetSection = 2;
constexpr std::uint8_t kSoftSection = 3;
constexpr std::uint8_t kIntermediateSection = 4;
constexpr std::uint8_t kModelSection = 5;

void write_soft(ByteWriter& w, const SoftOutputsPayload& p) {
  w.u8(static_cast<std::uint8_t>(p.input));
  w.u32(static_cast<std::uint32_t>(p.class_count));
  w.f64(p.temperature);
  write_rows(w, p.soft_outputs);
}

SoftOutputsPayload read_soft(ByteReader& r) {
  SoftOutputsPayload p;
  const std::uint8_t input = r.u8("input_option");
  if (input != 1 && input != 2) throw ValidationError("payload.soft.input_option", "unknown value");
  p.input = static_cast<InputOption>(input);
  p.class_count = r.u32("class_count");
  p.temperature = r.f64("temperature");
  p.soft_outputs = read_rows(r, "soft_outputs");
  for (const auto& row : p.soft_outputs) {
    if (row.size() != p.class_count) {
      throw ValidationError("payload.soft.soft_outputs", "row length differs from class count");
    }
  }
  return p;
}

void require(bool ok, const std::string& reason) {
  if (!ok) throw PolicyError(reason);
}

}  // namespace

void TransferPolicy::validate() const {
  const bool needs_input = kind == PolicyKind::SoftOutputs ||
                           kind == PolicyKind::SoftOutputsWithIntermediates;
  if (needs_input != input.has_value()) {
    throw InvalidArgument("input option must be set exactly for policies 2 and 3");
  }
}

std::string TransferPolicy::name() const {
  std::string s = "P" + std::to_string(static_cast<int>(kind));
  if (input) s += *input == InputOption::StudentStream ? "/StudentStream" : "/TeacherDataset";
  return s;
}

EnvironmentConstraints EnvironmentConstraints::merged(
    const EnvironmentConstraints& o) const noexcept {
  return {dataset_privacy || o.dataset_privacy, parameter_privacy || o.parameter_privacy,
          architecture_privacy || o.architecture_privacy, traffic_limited || o.traffic_limited,
          latency_critical || o.latency_critical};
}

TransferPolicy select_policy(const EnvironmentConstraints& c, bool student_untrained,
                             bool shared_architecture, bool student_more_complex) {
  if (c.latency_critical && !c.parameter_privacy && !c.architecture_privacy && student_untrained) {
    return {PolicyKind::ModelCopy, std::nullopt};
  }
  const bool dataset_shareable = !c.dataset_privacy && !c.traffic_limited;
  if (dataset_shareable && !c.architecture_privacy && student_more_complex) {
    return {PolicyKind::DatasetTransfer, std::nullopt};
  }
  const InputOption input =
      dataset_shareable ? InputOption::TeacherDataset : InputOption::StudentStream;
  if (shared_architecture && !c.architecture_privacy) {
    return {PolicyKind::SoftOutputsWithIntermediates, input};
  }
  return {PolicyKind::SoftOutputs, input};
}

void LossHyperparams::validate() const {
  if (!(alpha >= 0.0) || !(beta >= 0.0) || !(gamma >= 0.0)) {
    throw InvalidArgument("loss weights must be nonnegative");
  }
  if (!(temperature > 0.0)) throw InvalidArgument("temperature must be positive");
}

LossSpec build_policy1_loss(const LossHyperparams& hp, std::size_t student_task_count,
                            std::span<const ConsolidatedTask> consolidated) {
  hp.validate();
  LossSpec spec;
  spec.ce_weight = hp.alpha;
  if (student_task_count >= 1) spec.penalties = as_penalties(consolidated);
  return spec;
}

LossSpec build_policy2_loss(const LossHyperparams& hp, InputOption input,
                            std::span<const ConsolidatedTask> consolidated) {
  hp.validate();
  LossSpec spec;
  spec.temperature = hp.temperature;
  spec.scale_kl_by_t2 = hp.scale_kl_by_t2;
  if (input == InputOption::TeacherDataset) {
    spec.ce_weight = 1.0;
    spec.kl_weight = hp.beta;
  } else {
    spec.kl_weight = 1.0;
  }
  spec.penalties = as_penalties(consolidated);
  return spec;
}

LossSpec build_policy3_loss(const LossHyperparams& hp, InputOption input,
                            std::span<const ConsolidatedTask> consolidated) {
  LossSpec spec = build_policy2_loss(hp, input, consolidated);
  spec.hint_weight = hp.gamma;
  return spec;
}

// Payloads --------------------------------------------------------------------

PolicyKind payload_kind(const TransferPayload& payload) noexcept {
  switch (payload.index()) {
    case 0: return PolicyKind::DatasetTransfer;
    case 1: return PolicyKind::SoftOutputs;
    case 2: return PolicyKind::SoftOutputsWithIntermediates;
    default: return PolicyKind::ModelCopy;
  }
}

Bytes serialize_payload(const TransferPayload& payload) {
  Envelope env{EnvelopeKind::Payload, kFormatVersion, {}};
  ByteWriter kind;
  kind.u8(static_cast<std::uint8_t>(payload_kind(payload)));
  env.sections.push_back({kKindSection, std::move(kind).take()});

  auto add = [&](std::uint8_t tag, ByteWriter w) {
    env.sections.push_back({tag, std::move(w).take()});
  };
  auto add_soft = [&](const SoftOutputsPayload& s) {
    ByteWriter w;
    write_soft(w, s);
    add(kSoftSection, std::move(w));
    if (s.input == InputOption::TeacherDataset) {
      ByteWriter d;
      write_dataset(d, s.dataset);
      add(kDatasetSection, std::move(d));
    }
  };

  if (const auto* p = std::get_if<DatasetPayload>(&payload)) {
    ByteWriter w;
    write_dataset(w, p->dataset);
    add(kDatasetSection, std::move(w));
  } else if (const auto* p = std::get_if<SoftOutputsPayload>(&payload)) {
    add_soft(*p);
  } else if (const auto* p = std::get_if<IntermediatesPayload>(&payload)) {
    add_soft(p->soft);
    ByteWriter w;
    w.u32(static_cast<std::uint32_t>(p->layer_sizes.size()));
    for (std::size_t s : p->layer_sizes) w.u32(static_cast<std::uint32_t>(s));
    w.u64(p->activations.size());
    for (const auto& per_input : p->activations) write_rows(w, per_input);
    add(kIntermediateSection, std::move(w));
  } else {
    ByteWriter w;
    w.bytes(std::get<ModelPayload>(payload).snapshot.serialize());
    add(kModelSection, std::move(w));
  }
  return encode_envelope(env);
}

TransferPayload deserialize_payload(std::span<const std::byte> data) {
  const Envelope env = decode_envelope(data, EnvelopeKind::Payload);
  ByteReader k(env.section(kKindSection, "kind").body, "payload.kind");
  const std::uint8_t kind = k.u8("tag");
  k.expect_end();

  auto read_soft_section = [&]() {
    ByteReader r(env.section(kSoftSection, "soft").body, "payload.soft");
    SoftOutputsPayload s = read_soft(r);
    r.expect_end();
    if (s.input == InputOption::TeacherDataset) {
      ByteReader d(env.section(kDatasetSection, "dataset").body, "payload.dataset");
      s.dataset = read_dataset(d);
      d.expect_end();
      if (s.dataset.size() != s.soft_outputs.size()) {
        throw ValidationError("payload.soft.soft_outputs", "not aligned with dataset");
      }
    }
    return s;
  };

  switch (static_cast<PolicyKind>(kind)) {
    case PolicyKind::DatasetTransfer: {
      ByteReader r(env.section(kDatasetSection, "dataset").body, "payload.dataset");
      DatasetPayload p{read_dataset(r)};
      r.expect_end();
      return p;
    }
    case PolicyKind::SoftOutputs:
      return read_soft_section();
    case PolicyKind::SoftOutputsWithIntermediates: {
      IntermediatesPayload p;
      p.soft = read_soft_section();
      ByteReader r(env.section(kIntermediateSection, "intermediates").body,
                   "payload.intermediates");
      const std::uint32_t layers = r.u32("layer_count");
      for (std::uint32_t i = 0; i < layers; ++i) p.layer_sizes.push_back(r.u32("layer_sizes"));
      const std::uint64_t n = r.u64("input_count");
      if (n != p.soft.soft_outputs.size()) {
        throw ValidationError("payload.intermediates.input_count", "not aligned with soft outputs");
      }
      p.activations.resize(n);
      for (auto& per_input : p.activations) per_input = read_rows(r, "activations");
      r.expect_end();
      return p;
    }
    case PolicyKind::ModelCopy: {
      ByteReader r(env.section(kModelSection, "model").body, "payload.model");
      const Bytes inner = r.bytes("snapshot");
      r.expect_end();
      return ModelPayload{ParameterSnapshot::deserialize(inner)};
    }
  }
  throw ValidationError("payload.kind.tag", "unknown payload kind " + std::to_string(kind));
}

TransferPayload build_payload(const Learner& teacher, std::size_t head_index,
                              const TransferPolicy& policy, std::span<const Vector> student_stream,
                              const LabeledDataset* teacher_dataset, double temperature) {
  policy.validate();
  if (policy.kind == PolicyKind::ModelCopy) {
    return ModelPayload{teacher.export_parameters(head_index)};
  }
  const bool needs_dataset = policy.kind == PolicyKind::DatasetTransfer ||
                             policy.input == InputOption::TeacherDataset;
  if (needs_dataset && teacher_dataset == nullptr) {
    throw PolicyError("teacher has no stored dataset for " + policy.name());
  }
  if (policy.kind == PolicyKind::DatasetTransfer) return DatasetPayload{*teacher_dataset};

  SoftOutputsPayload soft;
  soft.input = *policy.input;
  soft.class_count = teacher.head(head_index).class_count();
  soft.temperature = temperature;
  std::span<const Vector> inputs = student_stream;
  if (soft.input == InputOption::TeacherDataset) {
    soft.dataset = *teacher_dataset;
    inputs = soft.dataset.inputs;
  }
  std::vector<std::vector<Vector>> activations;
  for (const auto& x : inputs) {
    ActivationTrace t = teacher.forward(head_index, x);
    soft.soft_outputs.push_back(softmax_with_temperature(t.logits, temperature));
    if (policy.kind == PolicyKind::SoftOutputsWithIntermediates) {
      activations.push_back(std::move(t.hidden));
    }
  }
  if (policy.kind == PolicyKind::SoftOutputs) return soft;
  IntermediatesPayload p;
  p.soft = std::move(soft);
  p.layer_sizes = teacher.feature_module().layer_sizes;
  p.activations = std::move(activations);
  return p;
}

std::vector<Vector> delivered_inputs(const TransferPayload& payload,
                                     std::span<const Vector> student_stream) {
  std::vector<Vector> out(student_stream.begin(), student_stream.end());
  const LabeledDataset* extra = nullptr;
  if (const auto* p = std::get_if<DatasetPayload>(&payload)) {
    extra = &p->dataset;
  } else if (const auto* p = std::get_if<SoftOutputsPayload>(&payload)) {
    if (p->input == InputOption::TeacherDataset) extra = &p->dataset;
  } else if (const auto* p = std::get_if<IntermediatesPayload>(&payload)) {
    if (p->soft.input == InputOption::TeacherDataset) extra = &p->soft.dataset;
  }
  if (extra) out.insert(out.end(), extra->inputs.begin(), extra->inputs.end());
  return out;
}

// Transfer ----------------------------------------------------------------------

std::vector<TrainingSample> training_samples(const TransferPayload& payload,
                                             std::span<const Vector> student_stream) {
  std::vector<TrainingSample> out;
  auto from_soft = [&](const SoftOutputsPayload& s) {
    const bool labeled = s.input == InputOption::TeacherDataset;
    const std::size_t n = labeled ? s.dataset.size() : student_stream.size();
    if (s.soft_outputs.size() != n) {
      throw InvalidArgument("payload has " + std::to_string(s.soft_outputs.size()) +
                            " soft outputs for " + std::to_string(n) + " inputs");
    }
    for (std::size_t i = 0; i < n; ++i) {
      TrainingSample t;
      t.input = labeled ? s.dataset.inputs[i] : student_stream[i];
      if (labeled) t.label = s.dataset.labels[i];
      t.soft_target = s.soft_outputs[i];
      out.push_back(std::move(t));
    }
  };

  if (const auto* p = std::get_if<DatasetPayload>(&payload)) {
    for (std::size_t i = 0; i < p->dataset.size(); ++i) {
      TrainingSample t;
      t.input = p->dataset.inputs[i];
      t.label = p->dataset.labels[i];
      out.push_back(std::move(t));
    }
  } else if (const auto* p = std::get_if<SoftOutputsPayload>(&payload)) {
    from_soft(*p);
  } else if (const auto* p = std::get_if<IntermediatesPayload>(&payload)) {
    from_soft(p->soft);
    if (p->activations.size() != out.size()) {
      throw InvalidArgument("intermediate activations not aligned with inputs");
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i].hint_targets = p->activations[i];
  }
  return out;
}

TransferReport execute_transfer(Learner& student, std::span<const ConsolidatedTask> consolidated,
                                const TransferPayload& payload, const TransferPolicy& policy,
                                HeadDisposition disposition, std::span<const Vector> student_stream,
                                const TransferSettings& settings, Rng& rng,
                                const EpochHook& hook) {
  policy.validate();
  require(payload_kind(payload) == policy.kind,
          "payload does not carry the content " + policy.name() + " needs");

  TransferReport report;
  report.policy = policy;

  if (policy.kind == PolicyKind::ModelCopy) {
    require(student.task_count() == 0, "P4 requires an untrained student");
    require(disposition.kind == HeadDisposition::Kind::Append, "P4 cannot reuse a head");
    student = Learner::import_parameters(std::get<ModelPayload>(payload).snapshot);
    report.head_index = 0;
    report.head_appended = true;
    return report;
  }

  std::size_t class_count = 0;
  if (const auto* p = std::get_if<DatasetPayload>(&payload)) {
    class_count = p->dataset.class_count;
  } else if (const auto* p = std::get_if<SoftOutputsPayload>(&payload)) {
    class_count = p->class_count;
  } else {
    const auto& ip = std::get<IntermediatesPayload>(payload);
    class_count = ip.soft.class_count;
    require(ip.layer_sizes == student.feature_module().layer_sizes,
            "P3 requires teacher and student to share a feature-module architecture");
  }

  LossSpec spec;
  switch (policy.kind) {
    case PolicyKind::DatasetTransfer:
      spec = build_policy1_loss(settings.hp, student.task_count(), consolidated);
      break;
    case PolicyKind::SoftOutputs:
      spec = build_policy2_loss(settings.hp, *policy.input, consolidated);
      break;
    default:
      spec = build_policy3_loss(settings.hp, *policy.input, consolidated);
      break;
  }
  const std::vector<TrainingSample> samples = training_samples(payload, student_stream);

  if (disposition.kind == HeadDisposition::Kind::Reuse) {
    require(disposition.index < student.task_count(), "reused head does not exist");
    require(student.head(disposition.index).class_count() == class_count,
            "reused head class count differs from the teacher's");
    report.head_index = disposition.index;
  } else {
    student.append_decision_head(class_count, rng);
    report.head_index = student.task_count() - 1;
    report.head_appended = true;
  }

  std::size_t completed = 0;
  auto counting_hook = [&](std::size_t epoch, double loss) {
    completed = epoch;
    report.final_loss = loss;
    if (hook) hook(epoch, loss);
  };
  try {
    const FitResult r =
        fit(student, report.head_index, samples, spec, settings.fit, rng, counting_hook);
    report.epochs_run = r.epochs_run;
    report.final_loss = r.final_loss;
  } catch (const DivergenceError& e) {
    report.epochs_run = completed;
    report.failure = e.what();
  }
  return report;
}

}  // namespace lenc
