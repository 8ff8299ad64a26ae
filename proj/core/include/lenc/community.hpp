#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lenc/distill.hpp"
#include "lenc/node.hpp"

namespace lenc {

enum class MessageKind : std::uint8_t {
  KnowledgeQuery = 1,
  QueryResponse = 2,
  TransferRequest = 3,
  TransferPayload = 4,
  CycleAbort = 5,
};

std::string_view to_string(MessageKind k) noexcept;

struct Message {
  MessageKind kind = MessageKind::KnowledgeQuery;
  NodeId sender;
  NodeId recipient;
  std::uint64_t sequence = 0;  // assigned by the community on delivery
  std::optional<std::uint64_t> reply_to;
  Bytes body;
};

struct Receipt {
  std::uint64_t cycle = 0;
  std::uint64_t sequence = 0;
  std::size_t bytes = 0;
};

struct TraceRecord {
  std::uint64_t cycle = 0;
  std::uint64_t sequence = 0;
  NodeId sender;
  NodeId recipient;
  MessageKind kind = MessageKind::KnowledgeQuery;
  std::size_t bytes = 0;

  std::string line() const;  // tab-separated, no newline
  friend bool operator==(const TraceRecord&, const TraceRecord&) = default;
};

struct ResponderScore {
  NodeId node;
  QueryResponse::Kind kind = QueryResponse::Kind::Unaware;
  std::optional<double> score;  // q_n as used for selection; empty when unaware
};

enum class CycleOutcome : std::uint8_t { NoCycle, NoTeacher, Transferred, Failed };

std::string_view to_string(CycleOutcome o) noexcept;

struct CycleReport {
  std::uint64_t cycle = 0;
  NodeId student;
  std::optional<NodeId> teacher;
  SelectionPolicy selection = SelectionPolicy::Disagreement;
  Verdict verdict = Verdict::Unknown;
  std::optional<HeadDisposition> disposition;
  std::vector<ResponderScore> responders;
  std::optional<TransferPolicy> policy;
  std::optional<TransferReport> transfer;
  CycleOutcome outcome = CycleOutcome::NoCycle;
  std::optional<std::string> error;
  std::size_t messages = 0;
  std::size_t bytes = 0;
};

struct CommunitySettings {
  SelectionPolicy selection = SelectionPolicy::Disagreement;
  TransferSettings transfer;
};

// Fault injection for a cycle's transfer; called after each training epoch.
using TransferHook = EpochHook;

class Community {
public:
  explicit Community(CommunitySettings settings);

  Community(const Community&) = delete;
  Community& operator=(const Community&) = delete;

  Node& add_node(Node node);
  Node& node(NodeId id);
  const Node& node(NodeId id) const;
  bool contains(NodeId id) const { return nodes_.contains(id); }
  std::size_t size() const noexcept { return nodes_.size(); }
  std::vector<NodeId> ids() const;

  const CommunitySettings& settings() const noexcept { return settings_; }
  CommunitySettings& settings() noexcept { return settings_; }

  // Unavailable peers neither receive queries nor teach.
  void set_available(NodeId id, bool available);
  bool available(NodeId id) const;

  Receipt deliver(Message& message);

  std::vector<std::pair<NodeId, QueryResponse>> broadcast_query(NodeId student,
                                                                const Stream& stream,
                                                                SelectionPolicy policy);

  // `scores` receives q_n for every responder in node-id order.
  std::optional<NodeId> select_teacher(const Node& student,
                                       std::span<const std::pair<NodeId, QueryResponse>> responses,
                                       SelectionPolicy policy, const Stream& stream,
                                       std::vector<ResponderScore>* scores = nullptr) const;

  CycleReport run_education_cycle(NodeId student, const Stream& stream,
                                  const TransferHook& hook = {});

  std::uint64_t cycle() const noexcept { return cycle_; }
  const std::vector<TraceRecord>& trace() const noexcept { return trace_; }
  std::string trace_text() const;

private:
  CycleReport run_cycle_locked(NodeId student_id, const Stream& stream, const TransferHook& hook);

  CommunitySettings settings_;
  std::map<NodeId, Node> nodes_;
  std::map<NodeId, bool> available_;
  std::map<NodeId, std::uint64_t> next_sequence_;
  std::uint64_t cycle_ = 1;  // number of the next cycle
  std::vector<TraceRecord> trace_;
  std::mutex cycle_lock_;
};

// Fraction of positions where the two label vectors differ.
double churn(std::span<const std::size_t> a, std::span<const std::size_t> b);

}  // namespace lenc
