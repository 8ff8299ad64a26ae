#include <benchmark/benchmark.h>

#include "lenc/harness.hpp"

using namespace lenc;

namespace {

FitOptions quick() {
  FitOptions f;
  f.epochs = 40;
  f.batch_size = 32;
  f.learning_rate = 0.05;
  return f;
}

const BlobSplit& blobs() {
  static const BlobSplit b = make_blobs(1, 4, 2, 500, 0.1, 1.0);
  return b;
}

const KsaModule& detector() {
  static const KsaModule m = fit_ksa(blobs().train.inputs, KsaSettings{}, 1);
  return m;
}

void BM_Forward(benchmark::State& state) {
  Rng rng(1);
  Learner l = Learner::create({2, static_cast<std::size_t>(state.range(0)), static_cast<std::size_t>(state.range(0))}, rng);
  l.append_decision_head(4, rng);
  const Vector x{0.3, -0.7};
  for (auto _ : state) benchmark::DoNotOptimize(l.forward(0, x));
}
BENCHMARK(BM_Forward)->Arg(16)->Arg(64);

void BM_TrainStep(benchmark::State& state) {
  Rng rng(2);
  Learner l = Learner::create({2, 16}, rng);
  l.append_decision_head(4, rng);
  std::vector<TrainingSample> batch(static_cast<std::size_t>(state.range(0)));
  for (std::size_t i = 0; i < batch.size(); ++i) {
    batch[i].input = blobs().train.inputs[i];
    batch[i].label = blobs().train.labels[i];
    batch[i].soft_target = {0.25, 0.25, 0.25, 0.25};
    batch[i].hint_targets = {Vector(16, 0.1)};
  }
  LossSpec spec;
  spec.ce_weight = 1.0;
  spec.kl_weight = 1.0;
  spec.hint_weight = 1.0;
  spec.temperature = 4.0;
  SgdMomentum opt(1e-3, 0.9);
  for (auto _ : state) benchmark::DoNotOptimize(train_step(l, 0, batch, spec, opt));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_TrainStep)->Arg(32)->Arg(128);

void BM_LikelihoodRegret(benchmark::State& state) {
  const RegretSettings rs;
  const Vector& x = blobs().test.inputs[0];
  detector();
  for (auto _ : state) benchmark::DoNotOptimize(likelihood_regret(detector().vae, x, rs));
}
BENCHMARK(BM_LikelihoodRegret);

void BM_StreamScore(benchmark::State& state) {
  RegretSettings rs;
  rs.threads = static_cast<std::size_t>(state.range(1));
  detector();
  const std::vector<Vector> pts(blobs().test.inputs.begin(),
                                blobs().test.inputs.begin() + state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(detector().score(pts, rs));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_StreamScore)->Args({200, 1})->Args({200, 4})->UseRealTime();

void BM_FitKsa(benchmark::State& state) {
  for (auto _ : state) benchmark::DoNotOptimize(fit_ksa(blobs().train.inputs, KsaSettings{}, 3));
}
BENCHMARK(BM_FitKsa)->Unit(benchmark::kMillisecond);

void BM_EducationCycle(benchmark::State& state) {
  NodeSettings ns;
  ns.layer_sizes = {2, 16};
  Node teacher(NodeId{0}, ns, {}, 1);
  teacher.pretrain_task(blobs().train, quick(), true, &blobs().test);
  Stream s;
  s.inputs.assign(blobs().train.inputs.begin(), blobs().train.inputs.begin() + 200);
  for (auto _ : state) {
    state.PauseTiming();
    CommunitySettings cs;
    cs.transfer.fit = quick();
    Community c(cs);
    c.add_node(teacher);
    c.add_node(Node(NodeId{1}, ns, {}, 2));
    state.ResumeTiming();
    benchmark::DoNotOptimize(c.run_education_cycle(NodeId{1}, s));
  }
}
BENCHMARK(BM_EducationCycle)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
