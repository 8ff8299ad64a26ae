#include <algorithm>

#include "doctest.h"
#include "lenc/community.hpp"
#include "lenc/error.hpp"
#include "world.hpp"

using namespace lenc;
using fixture::world;

namespace {

Node untrained(std::uint32_t id) {
  return Node(NodeId{id}, fixture::node_settings(), {}, 1000 + id);
}

CommunitySettings quick_settings(SelectionPolicy p = SelectionPolicy::Disagreement) {
  CommunitySettings s;
  s.selection = p;
  s.transfer.fit = fixture::quick_fit();
  return s;
}

const Node& expert() {
  static const Node n = fixture::trained_node(0, {0}, 50);
  return n;
}

// Node 0 is an expert on task 0; nodes 1..3 know nothing.
void populate(Community& c) {
  c.add_node(expert());
  for (std::uint32_t i = 1; i <= 3; ++i) c.add_node(untrained(i));
}

std::size_t count_kind(const Community& c, MessageKind k) {
  return static_cast<std::size_t>(std::count_if(c.trace().begin(), c.trace().end(),
                                                [&](const TraceRecord& r) { return r.kind == k; }));
}

QueryResponse scored(QueryResponse::Kind kind, double score) {
  QueryResponse r;
  r.kind = kind;
  r.score = score;
  return r;
}

QueryResponse labels(std::vector<std::size_t> l) {
  QueryResponse r;
  r.kind = QueryResponse::Kind::Labels;
  r.labels = std::move(l);
  return r;
}

}  // namespace

TEST_SUITE("community") {
  TEST_CASE("churn") {
    const std::vector<std::size_t> a{0, 1, 1, 0};
    CHECK(churn(a, a) == 0.0);
    CHECK(churn(a, std::vector<std::size_t>{1, 0, 0, 1}) == 1.0);
    CHECK(churn(a, std::vector<std::size_t>{0, 1, 0, 0}) == 0.25);
    CHECK_THROWS(churn(a, std::vector<std::size_t>{0}));
  }

  TEST_CASE("delivery assigns per-sender sequences and records bytes") {
    Community c(quick_settings());
    c.add_node(untrained(1));
    c.add_node(untrained(2));
    Message m{MessageKind::KnowledgeQuery, NodeId{1}, NodeId{2}, 0, std::nullopt, Bytes(17)};
    const Receipt r1 = c.deliver(m);
    CHECK(r1.bytes == 17);
    Message m2 = m;
    const Receipt r2 = c.deliver(m2);
    CHECK(r2.sequence > r1.sequence);
    Message back{MessageKind::QueryResponse, NodeId{2}, NodeId{1}, 0, r1.sequence, Bytes(3)};
    c.deliver(back);
    REQUIRE(c.trace().size() == 3);
    CHECK(c.trace()[2].bytes == 3);
    CHECK(c.trace()[0].line() == "1\t0\tn1\tn2\tquery\t17");

    Message lost{MessageKind::KnowledgeQuery, NodeId{1}, NodeId{9}, 0, std::nullopt, {}};
    CHECK_THROWS_AS(c.deliver(lost), RoutingError);
  }

  TEST_CASE("broadcast fans out to every peer") {
    Community c(quick_settings());
    for (std::uint32_t i = 0; i < 4; ++i) c.add_node(untrained(i));
    const Stream s = world().stream(0, 30, 1);
    const auto responses = c.broadcast_query(NodeId{2}, s, SelectionPolicy::Disagreement);
    REQUIRE(responses.size() == 3);
    CHECK(responses[0].first == NodeId{0});
    CHECK(responses[1].first == NodeId{1});
    CHECK(responses[2].first == NodeId{3});
    for (const auto& [id, r] : responses) CHECK_FALSE(r.aware());

    std::size_t query_bytes = 0;
    for (const auto& rec : c.trace()) {
      if (rec.kind == MessageKind::KnowledgeQuery) query_bytes += rec.bytes;
    }
    CHECK(query_bytes == s.serialize().size() * 3);
    CHECK(count_kind(c, MessageKind::QueryResponse) == 3);

    c.set_available(NodeId{3}, false);
    CHECK(c.broadcast_query(NodeId{2}, s, SelectionPolicy::Disagreement).size() == 2);
  }

  TEST_CASE("a lone node has no peers") {
    Community c(quick_settings());
    c.add_node(untrained(1));
    CHECK_THROWS_AS(c.broadcast_query(NodeId{1}, world().stream(0, 5, 1), SelectionPolicy::OodScore),
                    NoPeersError);
  }

  TEST_CASE("teacher selection by stored accuracy and OOD score") {
    Community c(quick_settings());
    c.add_node(untrained(1));
    c.add_node(untrained(2));
    c.add_node(untrained(3));
    const Node& student = c.node(NodeId{3});
    const Stream s = world().stream(0, 5, 1);
    using K = QueryResponse::Kind;

    std::vector<std::pair<NodeId, QueryResponse>> acc{{NodeId{1}, scored(K::Accuracy, 0.9)},
                                                      {NodeId{2}, scored(K::Accuracy, 0.7)}};
    CHECK(c.select_teacher(student, acc, SelectionPolicy::Accuracy, s) == NodeId{1});

    std::vector<std::pair<NodeId, QueryResponse>> ood{{NodeId{1}, scored(K::OodScore, 0.4)},
                                                      {NodeId{2}, scored(K::OodScore, 0.1)}};
    CHECK(c.select_teacher(student, ood, SelectionPolicy::OodScore, s) == NodeId{2});
    std::reverse(ood.begin(), ood.end());
    CHECK(c.select_teacher(student, ood, SelectionPolicy::OodScore, s) == NodeId{2});

    std::vector<std::pair<NodeId, QueryResponse>> tie{{NodeId{2}, scored(K::OodScore, 0.3)},
                                                      {NodeId{1}, scored(K::OodScore, 0.3)}};
    CHECK(c.select_teacher(student, tie, SelectionPolicy::OodScore, s) == NodeId{1});

    std::vector<std::pair<NodeId, QueryResponse>> none{{NodeId{1}, QueryResponse{}},
                                                       {NodeId{2}, QueryResponse{}}};
    std::vector<ResponderScore> scores;
    CHECK_FALSE(c.select_teacher(student, none, SelectionPolicy::OodScore, s, &scores));
    REQUIRE(scores.size() == 2);
    CHECK_FALSE(scores[0].score);

    // The student never picks itself.
    std::vector<std::pair<NodeId, QueryResponse>> self{{NodeId{3}, scored(K::OodScore, 0.0)},
                                                       {NodeId{1}, scored(K::OodScore, 5.0)}};
    CHECK(c.select_teacher(student, self, SelectionPolicy::OodScore, s) == NodeId{1});
  }

  TEST_CASE("teacher selection by disagreement") {
    Community c(quick_settings());
    Node& student = c.add_node(fixture::trained_node(5, {0}, 8));
    c.add_node(untrained(1));
    c.add_node(untrained(2));
    const Stream s = world().stream(0, 10, 3);
    const auto own = student.predict(s);
    auto flip = [&](std::size_t k) {
      auto l = own;
      for (std::size_t i = 0; i < k; ++i) l[i] = 1 - l[i];
      return l;
    };
    // Agrees with node 1 on 90% of the stream and with node 2 on 60%.
    std::vector<std::pair<NodeId, QueryResponse>> r{{NodeId{1}, labels(flip(1))},
                                                    {NodeId{2}, labels(flip(4))}};
    std::vector<ResponderScore> scores;
    CHECK(c.select_teacher(student, r, SelectionPolicy::Disagreement, s, &scores) == NodeId{2});
    REQUIRE(scores.size() == 2);
    CHECK(*scores[0].score == doctest::Approx(0.1));
    CHECK(*scores[1].score == doctest::Approx(0.4));

    std::vector<std::pair<NodeId, QueryResponse>> same{{NodeId{2}, labels(own)},
                                                       {NodeId{1}, labels(own)}};
    CHECK(c.select_teacher(student, same, SelectionPolicy::Disagreement, s, &scores) == NodeId{1});
    CHECK(*scores[0].score == 0.0);

    // An untrained student treats every aware responder as fully disagreeing.
    const Node& blank = c.node(NodeId{1});
    std::vector<std::pair<NodeId, QueryResponse>> any{{NodeId{2}, labels(own)},
                                                      {NodeId{5}, labels(flip(3))}};
    CHECK(c.select_teacher(blank, any, SelectionPolicy::Disagreement, s, &scores) == NodeId{2});
    CHECK(*scores[0].score == 1.0);
    CHECK(*scores[1].score == 1.0);
  }

  TEST_CASE("an expert student skips the cycle") {
    Community c(quick_settings());
    populate(c);
    const Node before = c.node(NodeId{0});
    const CycleReport r = c.run_education_cycle(NodeId{0}, world().stream(0, 50, 2));
    CHECK(r.outcome == CycleOutcome::NoCycle);
    CHECK(r.verdict == Verdict::Expert);
    CHECK(r.messages == 0);
    CHECK(c.trace().empty());
    CHECK(c.node(NodeId{0}) == before);
  }

  TEST_CASE("no aware peer leaves the student unchanged") {
    Community c(quick_settings());
    for (std::uint32_t i = 1; i <= 3; ++i) c.add_node(untrained(i));
    const Node before = c.node(NodeId{1});
    const CycleReport r = c.run_education_cycle(NodeId{1}, world().stream(0, 50, 2));
    CHECK(r.outcome == CycleOutcome::NoTeacher);
    CHECK_FALSE(r.teacher);
    CHECK(r.responders.size() == 2);
    CHECK(c.node(NodeId{1}) == before);
    CHECK(count_kind(c, MessageKind::TransferRequest) == 0);
  }

  TEST_CASE("the single expert teaches an untrained student") {
    Community c(quick_settings());
    populate(c);
    const Stream s = world().stream(0, 200, 4);
    const CycleReport r = c.run_education_cycle(NodeId{2}, s);
    CHECK(r.outcome == CycleOutcome::Transferred);
    REQUIRE(r.teacher);
    CHECK(*r.teacher == NodeId{0});
    CHECK(r.verdict == Verdict::Unknown);
    REQUIRE(r.policy);
    CHECK(r.policy->kind == PolicyKind::SoftOutputsWithIntermediates);
    CHECK(r.messages == c.trace().size());
    std::size_t bytes = 0;
    for (const auto& rec : c.trace()) bytes += rec.bytes;
    CHECK(r.bytes == bytes);
    CHECK(count_kind(c, MessageKind::TransferPayload) == 1);

    const Node& student = c.node(NodeId{2});
    CHECK(student.task_count() == 1);
    CHECK(accuracy(student.learner(), 0, world().test[0]) >= 0.9);
    CHECK(student.respond_to_query(s, SelectionPolicy::Disagreement).aware());
  }

  TEST_CASE("a failed transfer rolls the student back") {
    Community c(quick_settings());
    populate(c);
    const Node before = c.node(NodeId{1});
    const CycleReport r =
        c.run_education_cycle(NodeId{1}, world().stream(0, 200, 4), [](std::size_t epoch, double) {
          if (epoch >= 3) throw DivergenceError("injected");
        });
    CHECK(r.outcome == CycleOutcome::Failed);
    REQUIRE(r.error);
    CHECK(c.node(NodeId{1}) == before);
    CHECK(c.node(NodeId{1}).task_count() == 0);
    CHECK(count_kind(c, MessageKind::CycleAbort) == 1);

    // Rolling back a trained student restores its predictions exactly.
    Community d(quick_settings());
    d.add_node(expert());
    d.add_node(fixture::trained_node(1, {1}, 9));
    const Node trained_before = d.node(NodeId{1});
    const Stream s = world().stream(0, 200, 5);
    const CycleReport f = d.run_education_cycle(NodeId{1}, s, [](std::size_t, double) {
      throw DivergenceError("injected");
    });
    CHECK(f.outcome == CycleOutcome::Failed);
    Rng rng(3);
    for (int i = 0; i < 100; ++i) {
      const Vector x{rng.uniform(-3, 3), rng.uniform(-3, 3)};
      CHECK(d.node(NodeId{1}).learner().logits(0, x) == trained_before.learner().logits(0, x));
    }
    CHECK(d.node(NodeId{1}) == trained_before);
  }

  TEST_CASE("replaying a cycle reproduces the trace") {
    auto run = [] {
      Community c(quick_settings());
      populate(c);
      c.run_education_cycle(NodeId{3}, world().stream(0, 100, 6));
      c.run_education_cycle(NodeId{1}, world().stream(0, 100, 7));
      return std::make_pair(c.trace_text(), c.node(NodeId{1}).checkpoint());
    };
    const auto a = run();
    const auto b = run();
    CHECK(a.first == b.first);
    CHECK(a.second == b.second);
    CHECK_FALSE(a.first.empty());
  }
}
