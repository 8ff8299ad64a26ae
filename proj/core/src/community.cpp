#include "lenc/community.hpp"

#include <algorithm>
#include <sstream>

#include "lenc/error.hpp"

namespace lenc {

std::string_view to_string(MessageKind k) noexcept {
  switch (k) {
    case MessageKind::KnowledgeQuery: return "query";
    case MessageKind::QueryResponse: return "response";
    case MessageKind::TransferRequest: return "transfer_request";
    case MessageKind::TransferPayload: return "payload";
    case MessageKind::CycleAbort: return "abort";
  }
  return "?";
}

std::string_view to_string(CycleOutcome o) noexcept {
  switch (o) {
    case CycleOutcome::NoCycle: return "no_cycle";
    case CycleOutcome::NoTeacher: return "no_teacher";
    case CycleOutcome::Transferred: return "transferred";
    case CycleOutcome::Failed: return "failed";
  }
  return "?";
}

std::string TraceRecord::line() const {
  std::ostringstream out;
  out << cycle << '\t' << sequence << '\t' << sender.str() << '\t' << recipient.str() << '\t'
      << to_string(kind) << '\t' << bytes;
  return out.str();
}

double churn(std::span<const std::size_t> a, std::span<const std::size_t> b) {
  if (a.size() != b.size()) throw InvalidArgument("churn: label vectors differ in length");
  if (a.empty()) return 0.0;
  std::size_t differ = 0;
  for (std::size_t i = 0; i < a.size(); ++i) differ += a[i] != b[i] ? 1 : 0;
  return static_cast<double>(differ) / static_cast<double>(a.size());
}

Community::Community(CommunitySettings settings) : settings_(std::move(settings)) {
  settings_.transfer.hp.validate();
}

Node& Community::add_node(Node node) {
  const NodeId id = node.id();
  if (nodes_.contains(id)) throw InvalidArgument("duplicate node id " + id.str());
  available_[id] = true;
  next_sequence_[id] = 0;
  return nodes_.emplace(id, std::move(node)).first->second;
}

Node& Community::node(NodeId id) {
  auto it = nodes_.find(id);
  if (it == nodes_.end()) throw RoutingError("unknown node " + id.str());
  return it->second;
}

const Node& Community::node(NodeId id) const {
  auto it = nodes_.find(id);
  if (it == nodes_.end()) throw RoutingError("unknown node " + id.str());
  return it->second;
}

std::vector<NodeId> Community::ids() const {
  std::vector<NodeId> out;
  out.reserve(nodes_.size());
  for (const auto& [id, n] : nodes_) out.push_back(id);
  return out;
}

void Community::set_available(NodeId id, bool available) {
  if (!nodes_.contains(id)) throw RoutingError("unknown node " + id.str());
  available_[id] = available;
}

bool Community::available(NodeId id) const {
  auto it = available_.find(id);
  if (it == available_.end()) throw RoutingError("unknown node " + id.str());
  return it->second;
}

Receipt Community::deliver(Message& message) {
  if (!nodes_.contains(message.recipient)) {
    throw RoutingError("unknown recipient " + message.recipient.str());
  }
  if (!nodes_.contains(message.sender)) throw RoutingError("unknown sender " + message.sender.str());
  message.sequence = next_sequence_[message.sender]++;
  TraceRecord rec{cycle_, message.sequence, message.sender, message.recipient, message.kind,
                  message.body.size()};
  trace_.push_back(rec);
  return {cycle_, message.sequence, message.body.size()};
}

std::vector<std::pair<NodeId, QueryResponse>> Community::broadcast_query(NodeId student,
                                                                         const Stream& stream,
                                                                         SelectionPolicy policy) {
  if (!nodes_.contains(student)) throw RoutingError("unknown student " + student.str());
  if (nodes_.size() < 2) throw NoPeersError("community has no peers for " + student.str());
  const Bytes body = stream.serialize();
  std::vector<std::pair<NodeId, QueryResponse>> out;
  for (const auto& [id, peer] : nodes_) {
    if (id == student || !available_.at(id)) continue;
    Message query{MessageKind::KnowledgeQuery, student, id, 0, std::nullopt, body};
    deliver(query);
    const Stream received = Stream::deserialize(query.body);
    QueryResponse r = peer.respond_to_query(received, policy);
    Message reply{MessageKind::QueryResponse, id, student, 0, query.sequence, r.serialize()};
    deliver(reply);
    out.emplace_back(id, QueryResponse::deserialize(reply.body));
  }
  return out;
}

std::optional<NodeId> Community::select_teacher(
    const Node& student, std::span<const std::pair<NodeId, QueryResponse>> responses,
    SelectionPolicy policy, const Stream& stream, std::vector<ResponderScore>* scores) const {
  if (scores) scores->clear();
  std::vector<std::pair<NodeId, const QueryResponse*>> ordered;
  for (const auto& [id, r] : responses) ordered.emplace_back(id, &r);
  std::sort(ordered.begin(), ordered.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });

  std::optional<std::vector<std::size_t>> own;
  if (policy == SelectionPolicy::Disagreement && student.task_count() > 0) {
    own = student.predict(stream);
  }

  std::optional<NodeId> best;
  double best_q = 0.0;
  for (const auto& [id, r] : ordered) {
    ResponderScore rs{id, r->kind, std::nullopt};
    if (id != student.id() && r->aware()) {
      switch (policy) {
        case SelectionPolicy::Accuracy:
          if (r->kind == QueryResponse::Kind::Accuracy) rs.score = r->score;
          break;
        case SelectionPolicy::OodScore:
          if (r->kind == QueryResponse::Kind::OodScore) rs.score = r->score;
          break;
        case SelectionPolicy::Disagreement:
          if (r->kind == QueryResponse::Kind::Labels && r->labels.size() == stream.size()) {
            rs.score = own ? churn(*own, r->labels) : 1.0;
          }
          break;
      }
    }
    if (rs.score) {
      const double q = *rs.score;
      const bool better = !best || (policy == SelectionPolicy::OodScore ? q < best_q : q > best_q);
      if (better) {
        best = id;
        best_q = q;
      }
    }
    if (scores) scores->push_back(rs);
  }
  return best;
}

CycleReport Community::run_education_cycle(NodeId student, const Stream& stream,
                                           const TransferHook& hook) {
  std::scoped_lock lock(cycle_lock_);
  return run_cycle_locked(student, stream, hook);
}

CycleReport Community::run_cycle_locked(NodeId student_id, const Stream& stream,
                                        const TransferHook& hook) {
  if (stream.empty()) throw InvalidArgument("run_education_cycle: empty stream");
  Node& student = node(student_id);
  const std::size_t trace_start = trace_.size();

  CycleReport report;
  report.cycle = cycle_;
  report.student = student_id;
  report.selection = settings_.selection;

  auto finish = [&](CycleReport& r) -> CycleReport {
    for (std::size_t i = trace_start; i < trace_.size(); ++i) {
      ++r.messages;
      r.bytes += trace_[i].bytes;
    }
    ++cycle_;
    return r;
  };

  const IngestResult ingest = student.ingest_stream(stream);
  report.verdict = ingest.verdict;
  if (!ingest.request) return finish(report);
  const EducationRequest& request = *ingest.request;
  report.disposition = request.disposition;

  const auto responses = broadcast_query(student_id, stream, settings_.selection);
  const auto teacher_id =
      select_teacher(student, responses, settings_.selection, stream, &report.responders);
  if (!teacher_id) {
    report.outcome = CycleOutcome::NoTeacher;
    return finish(report);
  }
  report.teacher = teacher_id;
  const Node& teacher = node(*teacher_id);
  const auto match = std::find_if(responses.begin(), responses.end(),
                                  [&](const auto& p) { return p.first == *teacher_id; });
  const std::size_t teacher_task = match->second.task;

  EnvironmentConstraints merged = student.constraints().merged(teacher.constraints());
  if (!teacher.stored_dataset(teacher_task)) merged.dataset_privacy = true;
  const auto& s_sizes = student.learner().feature_module().layer_sizes;
  const auto& t_sizes = teacher.learner().feature_module().layer_sizes;
  const bool shared_architecture = !merged.architecture_privacy && s_sizes == t_sizes;
  const bool more_complex =
      student.learner().feature_parameter_count() >= 2 * teacher.learner().feature_parameter_count();
  TransferPolicy policy =
      select_policy(merged, student.task_count() == 0, shared_architecture, more_complex);
  report.policy = policy;

  const Bytes rollback = student.checkpoint();
  auto restore = [&] { student = Node::restore(rollback, student.settings()); };

  try {
    ByteWriter req;
    req.u8(static_cast<std::uint8_t>(policy.kind));
    req.u8(policy.input ? static_cast<std::uint8_t>(*policy.input) : 0);
    req.u64(teacher_task);
    Message request_msg{MessageKind::TransferRequest, student_id, *teacher_id, 0, std::nullopt,
                        std::move(req).take()};
    deliver(request_msg);

    const TransferPayload built =
        build_payload(teacher.learner(), teacher_task, policy, stream.inputs,
                      teacher.stored_dataset(teacher_task), settings_.transfer.hp.temperature);
    Message payload_msg{MessageKind::TransferPayload, *teacher_id, student_id, 0,
                        request_msg.sequence, serialize_payload(built)};
    deliver(payload_msg);
    const TransferPayload payload = deserialize_payload(payload_msg.body);

    std::vector<ConsolidatedTask> protect;
    for (const auto& c : student.consolidated_tasks()) {
      const bool own_head = request.disposition.kind == HeadDisposition::Kind::Reuse &&
                            c.head_index == request.disposition.index;
      if (!own_head) protect.push_back(c);
    }

    TransferReport tr = execute_transfer(student.learner(), protect, payload, policy,
                                         request.disposition, stream.inputs, settings_.transfer,
                                         student.rng(), hook);
    report.transfer = tr;
    if (!tr.ok()) throw DivergenceError(*tr.failure);
    student.finish_education(request, tr, delivered_inputs(payload, stream.inputs));
    report.outcome = CycleOutcome::Transferred;
  } catch (const Error& e) {
    restore();
    report.outcome = CycleOutcome::Failed;
    report.error = e.what();
    ByteWriter w;
    w.str(e.what());
    Message abort{MessageKind::CycleAbort, student_id, *teacher_id, 0, std::nullopt,
                  std::move(w).take()};
    deliver(abort);
  }
  return finish(report);
}

std::string Community::trace_text() const {
  std::string out;
  for (const auto& r : trace_) {
    out += r.line();
    out += '\n';
  }
  return out;
}

}  // namespace lenc
