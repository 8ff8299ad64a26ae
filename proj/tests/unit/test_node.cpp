#include "doctest.h"
#include "lenc/error.hpp"
#include "lenc/harness.hpp"
#include "lenc/node.hpp"
#include "world.hpp"

using namespace lenc;

namespace {

using fixture::quick_fit;
using fixture::world;

NodeSettings settings() { return fixture::node_settings(); }

const Node& expert() {
  static const Node n = [] {
    Node node(NodeId{1}, settings(), {}, 11);
    node.pretrain_task(world().train[0], quick_fit(), true, &world().test[0]);
    return node;
  }();
  return n;
}

const Node& two_task_node() {
  static const Node n = [] {
    Node node(NodeId{2}, settings(), {}, 12);
    node.pretrain_task(world().train[0], quick_fit(), true, &world().test[0]);
    node.pretrain_task(world().train[1], quick_fit(), false, nullptr);
    return node;
  }();
  return n;
}

// Student-stream soft-output transfer from `teacher` head `head`.
TransferReport educate(Node& student, const Node& teacher, std::size_t head, const Stream& s,
                       HeadDisposition d) {
  const TransferPolicy p2{PolicyKind::SoftOutputs, InputOption::StudentStream};
  TransferSettings ts;
  ts.fit = quick_fit();
  const auto payload = build_payload(teacher.learner(), head, p2, s.inputs, nullptr, 4.0);
  auto report = execute_transfer(student.learner(), student.consolidated_tasks(), payload, p2, d,
                                 s.inputs, ts, student.rng());
  student.finish_education(EducationRequest{student.id(), s, d}, report, s.inputs);
  return report;
}

}  // namespace

TEST_SUITE("node") {
  TEST_CASE("selection policy names") {
    for (auto p : {SelectionPolicy::Accuracy, SelectionPolicy::OodScore,
                   SelectionPolicy::Disagreement}) {
      CHECK(parse_selection_policy(to_string(p)) == p);
    }
    CHECK_THROWS(parse_selection_policy("nearest"));
  }

  TEST_CASE("query responses round trip") {
    QueryResponse labels{QueryResponse::Kind::Labels, 2, 0.0, {0, 1, 1, 3}};
    CHECK(QueryResponse::deserialize(labels.serialize()) == labels);
    QueryResponse score{QueryResponse::Kind::OodScore, 1, 0.125, {}};
    CHECK(QueryResponse::deserialize(score.serialize()) == score);
    CHECK_FALSE(QueryResponse{}.aware());
    CHECK(QueryResponse::deserialize(QueryResponse{}.serialize()) == QueryResponse{});
  }

  TEST_CASE("untrained node knows nothing") {
    const Node n(NodeId{5}, settings(), {}, 3);
    const Stream s = world().stream(0, 30, 1);
    const IngestResult r = n.ingest_stream(s);
    CHECK(r.verdict == Verdict::Unknown);
    REQUIRE(r.request);
    CHECK(r.request->disposition == HeadDisposition::append());
    CHECK(r.request->requester == NodeId{5});
    CHECK_FALSE(n.respond_to_query(s, SelectionPolicy::Disagreement).aware());
    CHECK_THROWS_AS(n.predict(s), NoKnowledgeError);
  }

  TEST_CASE("expert recognizes its own task and not another") {
    const Node& n = expert();
    CHECK(n.task_count() == 1);
    CHECK_FALSE(n.ksa_modules()[0].unreliable());
    const IngestResult own = n.ingest_stream(world().stream(0, 50, 2));
    CHECK(own.verdict == Verdict::Expert);
    CHECK_FALSE(own.request);

    const IngestResult other = n.ingest_stream(world().stream(1, 50, 3));
    CHECK(other.verdict == Verdict::Unknown);
    REQUIRE(other.request);
    CHECK(other.request->disposition == HeadDisposition::append());
  }

  TEST_CASE("limited verdict asks to reuse the best head") {
    // A detector trained on too little data caps the verdict at Limited.
    NodeSettings s = settings();
    s.ksa.vae.min_training_size = 100000;
    Node n(NodeId{3}, s, {}, 21);
    n.pretrain_task(world().train[0], quick_fit(), false, nullptr);
    CHECK(n.ksa_modules()[0].unreliable());
    const IngestResult r = n.ingest_stream(world().stream(0, 50, 2));
    CHECK(r.verdict == Verdict::Limited);
    REQUIRE(r.request);
    CHECK(r.request->disposition == HeadDisposition::reuse(0));
  }

  TEST_CASE("query responses per selection policy") {
    const Node& n = expert();
    const Stream s = world().stream(0, 40, 4);
    const QueryResponse acc = n.respond_to_query(s, SelectionPolicy::Accuracy);
    CHECK(acc.kind == QueryResponse::Kind::Accuracy);
    CHECK(acc.score == *n.stored_accuracy(0));
    CHECK(acc.score == doctest::Approx(accuracy(n.learner(), 0, world().test[0])));

    const QueryResponse ood = n.respond_to_query(s, SelectionPolicy::OodScore);
    CHECK(ood.kind == QueryResponse::Kind::OodScore);
    CHECK(ood.score == *n.assess(s).tasks[0].score);

    const QueryResponse labels = n.respond_to_query(s, SelectionPolicy::Disagreement);
    CHECK(labels.kind == QueryResponse::Kind::Labels);
    CHECK(labels.labels.size() == s.size());
    CHECK(labels.labels == n.predict(s));

    CHECK_FALSE(n.respond_to_query(world().stream(1, 40, 5), SelectionPolicy::OodScore).aware());

    // Tasks without a stored accuracy answer Unaware under the accuracy policy.
    const Node& two = two_task_node();
    CHECK_FALSE(two.respond_to_query(world().stream(1, 40, 6), SelectionPolicy::Accuracy).aware());
    CHECK(two.respond_to_query(world().stream(1, 40, 6), SelectionPolicy::OodScore).task == 1);
  }

  TEST_CASE("single task predictions use head zero") {
    const Node& n = expert();
    const Stream s = world().stream(1, 30, 7);  // even off-task
    const auto labels = n.predict(s);
    for (std::size_t i = 0; i < s.size(); ++i) CHECK(labels[i] == n.learner().predict(0, s.inputs[i]));
    CHECK(n.predict(s) == labels);
  }

  TEST_CASE("routing picks the stream's task") {
    const Node& n = two_task_node();
    std::size_t hits = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const Stream s = world().stream(1, 50, 100 + seed);
      const Assessment a = n.assess(s);
      REQUIRE(a.best);
      hits += *a.best == 1;
      const auto labels = n.predict(s, a);
      for (std::size_t i = 0; i < s.size(); ++i) {
        CHECK(labels[i] == n.learner().predict(*a.best, s.inputs[i]));
      }
    }
    CHECK(hits >= 9);
  }

  TEST_CASE("education makes an unaware node aware") {
    const Stream s = world().stream(0, 200, 8);
    Node student(NodeId{9}, settings(), {}, 31);
    CHECK_FALSE(student.respond_to_query(s, SelectionPolicy::OodScore).aware());
    const auto report = educate(student, expert(), 0, s, HeadDisposition::append());
    CHECK(report.ok());
    CHECK(student.task_count() == 1);
    CHECK(student.ksa_modules().size() == 1);
    CHECK(student.consolidated_tasks().size() == 1);
    CHECK(student.ksa_modules()[0].unreliable());  // 200 points
    CHECK_FALSE(student.stored_accuracy(0));
    CHECK(student.respond_to_query(s, SelectionPolicy::OodScore).aware());
    CHECK(student.can_teach(0));

    // A reuse cycle keeps the task count and refreshes the same entries.
    const Stream more = world().stream(0, 200, 9);
    educate(student, expert(), 0, more, HeadDisposition::reuse(0));
    CHECK(student.task_count() == 1);
    CHECK(student.consolidated_tasks().size() == 1);
    CHECK(student.ksa_modules()[0].data.size() > 200);

    // A new task appends a head and one more consolidated entry.
    const Stream other = world().stream(1, 200, 10);
    educate(student, two_task_node(), 1, other, HeadDisposition::append());
    CHECK(student.task_count() == 2);
    CHECK(student.consolidated_tasks().size() == 2);
  }

  TEST_CASE("checkpoint round trip") {
    const Node& n = two_task_node();
    const Bytes bytes = n.checkpoint();
    const Node back = Node::restore(bytes, settings());
    CHECK(back == n);
    CHECK(back.id() == n.id());
    CHECK(back.constraints() == n.constraints());
    CHECK(back.consolidated_tasks() == n.consolidated_tasks());
    CHECK(back.ksa_modules() == n.ksa_modules());
    CHECK(back.stored_accuracy(0) == n.stored_accuracy(0));
    REQUIRE(back.stored_dataset(0));
    CHECK(back.stored_dataset(0)->inputs == n.stored_dataset(0)->inputs);
    CHECK_FALSE(back.stored_dataset(1));
    const Stream s = world().stream(1, 20, 11);
    CHECK(back.predict(s) == n.predict(s));

    Bytes bad = bytes;
    bad.resize(bad.size() / 2);
    CHECK_THROWS_AS(Node::restore(bad, settings()), ValidationError);
    CHECK_THROWS_AS(Node::restore(Stream{}.serialize(), settings()), ValidationError);
  }

  TEST_CASE("identical seeds give identical nodes") {
    Node a(NodeId{4}, settings(), {}, 77);
    Node b(NodeId{4}, settings(), {}, 77);
    CHECK(a == b);
    a.pretrain_task(world().train[1], quick_fit(), false, nullptr);
    b.pretrain_task(world().train[1], quick_fit(), false, nullptr);
    CHECK(a == b);
    Node c(NodeId{4}, settings(), {}, 78);
    c.pretrain_task(world().train[1], quick_fit(), false, nullptr);
    CHECK_FALSE(a == c);
  }
}
