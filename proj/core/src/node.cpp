#include "lenc/node.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <utility>

#include "lenc/error.hpp"

namespace lenc {

std::string_view to_string(SelectionPolicy p) noexcept {
  switch (p) {
    case SelectionPolicy::Accuracy: return "accuracy";
    case SelectionPolicy::OodScore: return "ood";
    case SelectionPolicy::Disagreement: return "disagreement";
  }
  return "?";
}

SelectionPolicy parse_selection_policy(std::string_view name) {
  if (name == "accuracy") return SelectionPolicy::Accuracy;
  if (name == "ood") return SelectionPolicy::OodScore;
  if (name == "disagreement") return SelectionPolicy::Disagreement;
  throw ConfigError("unknown selection policy '" + std::string(name) + "'");
}

// QueryResponse ---------------------------------------------------------------

Bytes QueryResponse::serialize() const {
  ByteWriter w;
  w.u8(static_cast<std::uint8_t>(kind));
  w.u64(task);
  w.f64(score);
  w.u64(labels.size());
  for (std::size_t y : labels) w.u32(static_cast<std::uint32_t>(y));
  Envelope env{EnvelopeKind::QueryResponse, kFormatVersion, {}};
  env.sections.push_back({1, std::move(w).take()});
  return encode_envelope(env);
}

QueryResponse QueryResponse::deserialize(std::span<const std::byte> data) {
  const Envelope env = decode_envelope(data, EnvelopeKind::QueryResponse);
  ByteReader r(env.section(1, "response").body, "response");
  QueryResponse q;
  const std::uint8_t kind = r.u8("kind");
  if (kind > 3) throw ValidationError("response.kind", "unknown value");
  q.kind = static_cast<Kind>(kind);
  q.task = r.u64("task");
  q.score = r.f64("score");
  const std::uint64_t n = r.u64("labels.count");
  if (n > (1ULL << 32)) throw ValidationError("response.labels.count", "too large");
  q.labels.resize(n);
  for (auto& y : q.labels) y = r.u32("labels");
  r.expect_end();
  return q;
}

// Node ------------------------------------------------------------------------

Node::Node(NodeId id, NodeSettings settings, EnvironmentConstraints constraints, std::uint64_t seed)
    : id_(id),
      settings_(std::move(settings)),
      constraints_(constraints),
      seed_(seed),
      rng_(derive_seed(seed, "node")) {
  if (settings_.layer_sizes.empty()) throw InvalidArgument("node: empty layer_sizes");
  learner_ = Learner::create(settings_.layer_sizes, rng_);
}

std::uint64_t Node::next_seed(std::string_view tag) {
  return derive_seed(seed_, tag, seed_counter_++);
}

std::optional<double> Node::stored_accuracy(std::size_t task) const {
  return learner_.head(task).stored_accuracy;
}

const LabeledDataset* Node::stored_dataset(std::size_t task) const {
  if (task >= datasets_.size() || !datasets_[task]) return nullptr;
  return &*datasets_[task];
}

bool Node::can_teach(std::size_t task) const {
  return task < ksa_.size() && ksa_[task].usable;
}

void Node::check_invariants() const {
  const std::size_t t = learner_.task_count();
  if (ksa_.size() != t || datasets_.size() != t) {
    throw ValidationError("node.task_count", "heads, detectors and datasets disagree");
  }
  for (const auto& c : consolidated_) {
    if (c.head_index >= t) throw ValidationError("node.consolidated", "head index out of range");
  }
  for (std::size_t i = 0; i < t; ++i) {
    const auto& a = learner_.head(i).stored_accuracy;
    if (a && !(*a >= 0.0 && *a <= 1.0)) throw ValidationError("node.accuracy", "outside [0, 1]");
  }
}

Assessment Node::assess(const Stream& stream) const {
  if (stream.empty()) throw InvalidArgument("assess: empty stream");
  Assessment out;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t < ksa_.size(); ++t) {
    TaskAssessment ta;
    ta.task = t;
    if (ksa_[t].usable) {
      try {
        const OodScore s = ksa_[t].score(stream.inputs, settings_.ksa.regret);
        if (std::isfinite(s.value)) ta.score = s.value;
      } catch (const Error&) {
      }
    }
    if (ta.score) {
      ta.verdict = verdict(*ta.score, ksa_[t].thresholds);
      // A detector fitted on too little data never vouches for full expertise.
      if (ksa_[t].unreliable() && ta.verdict == Verdict::Expert) ta.verdict = Verdict::Limited;
      if (*ta.score < best) {
        best = *ta.score;
        out.best = t;
      }
    } else {
      ++out.failures;
    }
    out.tasks.push_back(ta);
  }
  out.verdict = out.best ? out.tasks[*out.best].verdict : Verdict::Unknown;
  return out;
}

IngestResult Node::ingest_stream(const Stream& stream) const {
  IngestResult out;
  out.assessment = assess(stream);
  out.verdict = out.assessment.verdict;
  switch (out.verdict) {
    case Verdict::Expert: break;
    case Verdict::Limited:
      out.request = EducationRequest{id_, stream, HeadDisposition::reuse(*out.assessment.best)};
      break;
    case Verdict::Unknown:
      out.request = EducationRequest{id_, stream, HeadDisposition::append()};
      break;
  }
  return out;
}

QueryResponse Node::respond_to_query(const Stream& stream, SelectionPolicy policy) const {
  QueryResponse q;
  if (stream.empty() || task_count() == 0) return q;
  const Assessment a = assess(stream);
  if (a.verdict == Verdict::Unknown || !a.best || !can_teach(*a.best)) return q;
  const std::size_t j = *a.best;
  q.task = j;
  switch (policy) {
    case SelectionPolicy::Accuracy:
      if (const auto acc = stored_accuracy(j)) {
        q.kind = QueryResponse::Kind::Accuracy;
        q.score = *acc;
      }
      break;
    case SelectionPolicy::OodScore:
      q.kind = QueryResponse::Kind::OodScore;
      q.score = *a.tasks[j].score;
      break;
    case SelectionPolicy::Disagreement:
      q.kind = QueryResponse::Kind::Labels;
      q.labels.reserve(stream.size());
      for (const auto& x : stream.inputs) q.labels.push_back(learner_.predict(j, x));
      break;
  }
  return q;
}

std::vector<std::size_t> Node::predict(const Stream& stream) const {
  if (task_count() == 0) throw NoKnowledgeError("node " + id_.str() + " has no decision heads");
  if (task_count() == 1) return predict(stream, Assessment{});
  return predict(stream, assess(stream));
}

std::vector<std::size_t> Node::predict(const Stream& stream, const Assessment& assessment) const {
  if (task_count() == 0) throw NoKnowledgeError("node " + id_.str() + " has no decision heads");
  std::size_t head = 0;
  if (task_count() > 1 && !assessment.tasks.empty()) {
    std::vector<double> scores;
    scores.reserve(assessment.tasks.size());
    for (const auto& t : assessment.tasks) {
      scores.push_back(t.score.value_or(std::numeric_limits<double>::infinity()));
    }
    head = route_head(scores);
  }
  std::vector<std::size_t> labels;
  labels.reserve(stream.size());
  for (const auto& x : stream.inputs) labels.push_back(learner_.predict(head, x));
  return labels;
}

namespace {

std::vector<Vector> merge_unique(std::span<const Vector> a, std::span<const Vector> b) {
  std::vector<Vector> out(a.begin(), a.end());
  std::set<Vector> seen(a.begin(), a.end());
  for (const auto& x : b) {
    if (seen.insert(x).second) out.push_back(x);
  }
  return out;
}

}  // namespace

void Node::finish_education(const EducationRequest& request, const TransferReport& report,
                            std::span<const Vector> training_inputs) {
  if (!report.ok()) throw InvalidArgument("finish_education: transfer did not complete");
  if (training_inputs.empty()) throw InvalidArgument("finish_education: no training inputs");
  const std::size_t head = report.head_index;
  if (head >= task_count()) throw InvalidArgument("finish_education: head index out of range");

  std::vector<Vector> data;
  const bool fresh = report.head_appended || head >= ksa_.size();
  if (fresh) {
    data.assign(training_inputs.begin(), training_inputs.end());
  } else {
    if (request.disposition.kind != HeadDisposition::Kind::Reuse) {
      throw InvalidArgument("finish_education: disposition does not match report");
    }
    data = merge_unique(ksa_[head].data, training_inputs);
  }

  KsaModule module;
  try {
    module = fit_ksa(data, settings_.ksa, next_seed("ksa"));
  } catch (const Error&) {
    module = KsaModule{};
    module.data = data;
    module.usable = false;
  }

  if (fresh) {
    // P4 replaces the learner, so any previous per-task state is void.
    if (report.policy.kind == PolicyKind::ModelCopy) {
      ksa_.clear();
      consolidated_.clear();
      datasets_.clear();
    }
    ksa_.push_back(std::move(module));
    datasets_.emplace_back();
  } else {
    ksa_[head] = std::move(module);
  }

  ConsolidatedTask c = consolidate(learner_, head, ksa_[head].data, settings_.ewc_lambda,
                                   settings_.fisher_samples, rng_);
  auto it = std::find_if(consolidated_.begin(), consolidated_.end(),
                         [&](const ConsolidatedTask& t) { return t.head_index == head; });
  if (it != consolidated_.end()) {
    *it = std::move(c);
  } else {
    consolidated_.push_back(std::move(c));
  }
  check_invariants();
}

void Node::pretrain_task(const LabeledDataset& train, const FitOptions& options, bool store_dataset,
                         const LabeledDataset* accuracy_split) {
  train.validate();
  if (train.dim() != learner_.feature_module().input_dim()) {
    throw InvalidArgument("pretrain_task: input dimension mismatch");
  }
  learner_.append_decision_head(train.class_count, rng_);
  const std::size_t head = task_count() - 1;

  std::vector<TrainingSample> samples(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) {
    samples[i].input = train.inputs[i];
    samples[i].label = train.labels[i];
  }
  LossSpec spec;
  spec.ce_weight = 1.0;
  spec.penalties = as_penalties(consolidated_);
  fit(learner_, head, samples, spec, options, rng_);

  if (accuracy_split) learner_.head(head).stored_accuracy = accuracy(learner_, head, *accuracy_split);

  KsaModule module;
  try {
    module = fit_ksa(train.inputs, settings_.ksa, next_seed("ksa"));
  } catch (const Error&) {
    module = KsaModule{};
    module.data = train.inputs;
    module.usable = false;
  }
  ksa_.push_back(std::move(module));
  datasets_.push_back(store_dataset ? std::optional<LabeledDataset>(train) : std::nullopt);
  consolidated_.push_back(consolidate(learner_, head, train.inputs, settings_.ewc_lambda,
                                      settings_.fisher_samples, rng_));
  check_invariants();
}

// Checkpoint ------------------------------------------------------------------

namespace {

enum : std::uint8_t {
  kMeta = 1,
  kConstraints = 2,
  kLearner = 3,
  kAccuracies = 4,
  kDetectors = 5,
  kConsolidated = 6,
  kDatasets = 7,
};

}  // namespace

Bytes Node::checkpoint() const {
  Envelope env{EnvelopeKind::NodeCheckpoint, kFormatVersion, {}};
  {
    ByteWriter w;
    w.u32(id_.value);
    w.u64(seed_);
    w.u64(seed_counter_);
    w.str(rng_.save());
    env.sections.push_back({kMeta, std::move(w).take()});
  }
  {
    ByteWriter w;
    for (bool f : {constraints_.dataset_privacy, constraints_.parameter_privacy,
                   constraints_.architecture_privacy, constraints_.traffic_limited,
                   constraints_.latency_critical}) {
      w.u8(f ? 1 : 0);
    }
    env.sections.push_back({kConstraints, std::move(w).take()});
  }
  env.sections.push_back({kLearner, learner_.export_parameters().serialize()});
  {
    ByteWriter w;
    w.u64(task_count());
    for (std::size_t t = 0; t < task_count(); ++t) {
      const auto& a = learner_.head(t).stored_accuracy;
      w.u8(a ? 1 : 0);
      w.f64(a.value_or(0.0));
    }
    env.sections.push_back({kAccuracies, std::move(w).take()});
  }
  {
    ByteWriter w;
    w.u64(ksa_.size());
    for (const auto& k : ksa_) {
      w.u8(k.usable ? 1 : 0);
      w.bytes(k.usable ? k.vae.serialize() : Bytes{});
      w.f64(k.thresholds.delta);
      w.f64(k.thresholds.epsilon);
      write_rows(w, k.data);
    }
    env.sections.push_back({kDetectors, std::move(w).take()});
  }
  {
    ByteWriter w;
    w.u64(consolidated_.size());
    for (const auto& c : consolidated_) {
      w.u64(c.head_index);
      w.f64s(c.anchor);
      w.f64s(c.fisher_diagonal);
      w.f64(c.lambda);
    }
    env.sections.push_back({kConsolidated, std::move(w).take()});
  }
  {
    ByteWriter w;
    w.u64(datasets_.size());
    for (const auto& d : datasets_) {
      w.u8(d ? 1 : 0);
      if (d) write_dataset(w, *d);
    }
    env.sections.push_back({kDatasets, std::move(w).take()});
  }
  return encode_envelope(env);
}

Node Node::restore(std::span<const std::byte> data, NodeSettings settings) {
  const Envelope env = decode_envelope(data, EnvelopeKind::NodeCheckpoint);

  ByteReader meta(env.section(kMeta, "meta").body, "meta");
  const NodeId id{meta.u32("id")};
  const std::uint64_t seed = meta.u64("seed");
  const std::uint64_t counter = meta.u64("seed_counter");
  const std::string rng_state = meta.str("rng");
  meta.expect_end();

  ByteReader cr(env.section(kConstraints, "constraints").body, "constraints");
  EnvironmentConstraints c;
  c.dataset_privacy = cr.u8("dataset_privacy") != 0;
  c.parameter_privacy = cr.u8("parameter_privacy") != 0;
  c.architecture_privacy = cr.u8("architecture_privacy") != 0;
  c.traffic_limited = cr.u8("traffic_limited") != 0;
  c.latency_critical = cr.u8("latency_critical") != 0;
  cr.expect_end();

  const ParameterSnapshot snap =
      ParameterSnapshot::deserialize(env.section(kLearner, "learner").body);
  settings.layer_sizes = snap.layer_sizes;
  Node node(id, std::move(settings), c, seed);
  node.seed_counter_ = counter;
  node.rng_.load(rng_state);
  node.learner_ = Learner::import_parameters(snap);
  const std::size_t t = node.learner_.task_count();

  ByteReader ar(env.section(kAccuracies, "accuracies").body, "accuracies");
  if (ar.u64("count") != t) throw ValidationError("accuracies.count", "does not match heads");
  for (std::size_t i = 0; i < t; ++i) {
    const bool has = ar.u8("present") != 0;
    const double v = ar.f64("value");
    if (has) node.learner_.head(i).stored_accuracy = v;
  }
  ar.expect_end();

  ByteReader kr(env.section(kDetectors, "detectors").body, "detectors");
  if (kr.u64("count") != t) throw ValidationError("detectors.count", "does not match heads");
  for (std::size_t i = 0; i < t; ++i) {
    KsaModule k;
    k.usable = kr.u8("usable") != 0;
    const Bytes vae = kr.bytes("vae");
    if (k.usable) k.vae = VaeModel::deserialize(vae);
    k.thresholds.delta = kr.f64("delta");
    k.thresholds.epsilon = kr.f64("epsilon");
    k.data = read_rows(kr, "data");
    node.ksa_.push_back(std::move(k));
  }
  kr.expect_end();

  ByteReader ctr(env.section(kConsolidated, "consolidated").body, "consolidated");
  const std::uint64_t nc = ctr.u64("count");
  for (std::uint64_t i = 0; i < nc; ++i) {
    ConsolidatedTask task;
    task.head_index = ctr.u64("head_index");
    task.anchor = ctr.f64s("anchor");
    task.fisher_diagonal = ctr.f64s("fisher");
    task.lambda = ctr.f64("lambda");
    if (task.anchor.size() != task.fisher_diagonal.size() ||
        task.anchor.size() > node.learner_.parameter_count()) {
      throw ValidationError("consolidated.anchor", "size mismatch");
    }
    node.consolidated_.push_back(std::move(task));
  }
  ctr.expect_end();

  ByteReader dr(env.section(kDatasets, "datasets").body, "datasets");
  if (dr.u64("count") != t) throw ValidationError("datasets.count", "does not match heads");
  for (std::size_t i = 0; i < t; ++i) {
    if (dr.u8("present") != 0) {
      node.datasets_.emplace_back(read_dataset(dr));
    } else {
      node.datasets_.emplace_back();
    }
  }
  dr.expect_end();

  node.check_invariants();
  return node;
}

}  // namespace lenc
