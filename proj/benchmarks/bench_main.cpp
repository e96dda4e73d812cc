#include <benchmark/benchmark.h>

#include <cstdint>
#include <vector>

#include "caselab/backbone.hpp"
#include "caselab/episodes.hpp"
#include "caselab/heads.hpp"
#include "caselab/rng.hpp"
#include "caselab/tape.hpp"
#include "caselab/tensor.hpp"
#include "caselab/trainer.hpp"

namespace {

using namespace caselab;

Tensor random_images(int n, int ch, int res, uint64_t seed) {
  Tensor t = Tensor::zeros({n, ch, res, res});
  RandomStream rng(seed);
  rng.fill_normal(t.data, 0.f, 1.f);
  return t;
}

Backbone desk_backbone(AdapterKind kind) {
  Backbone bb = Backbone::build(BackboneSpec::desk_default(), 11);
  bb.freeze_theta();
  if (kind != AdapterKind::kNone) bb.attach_adapters(kind, {}, 12);
  return bb;
}

void BM_GemmViaMatmul(benchmark::State& state) {
  int n = static_cast<int>(state.range(0));
  Tensor a = Tensor::zeros({n, n});
  Tensor b = Tensor::zeros({n, n});
  RandomStream rng(2);
  rng.fill_normal(a.data, 0.f, 1.f);
  rng.fill_normal(b.data, 0.f, 1.f);
  for (auto _ : state) {
    Tape tape;
    Var out = matmul(tape.input(a), tape.input(b));
    benchmark::DoNotOptimize(out.value().data.data());
  }
  state.SetItemsProcessed(state.iterations() * int64_t(n) * n * n);
}
BENCHMARK(BM_GemmViaMatmul)->Arg(64)->Arg(128)->Arg(256);

void BM_BackboneEmbed(benchmark::State& state) {
  int batch = static_cast<int>(state.range(0));
  Backbone bb = desk_backbone(AdapterKind::kNone);
  Tensor images = random_images(batch, 3, 32, 3);
  for (auto _ : state) {
    Tensor emb = bb.embed(images, AdapterUse::kDisabled);
    benchmark::DoNotOptimize(emb.data.data());
  }
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_BackboneEmbed)->Arg(1)->Arg(25);

// Adaptive recomputes the gating MLPs from the batch; inference reuses the
// cached per-task scales. The gap is the amortization the cache buys.
void BM_CaseAdaptiveEmbed(benchmark::State& state) {
  Backbone bb = desk_backbone(AdapterKind::kCase);
  Tensor images = random_images(25, 3, 32, 4);
  for (auto _ : state) {
    Tensor emb = bb.embed(images, AdapterUse::kAdaptive);
    benchmark::DoNotOptimize(emb.data.data());
  }
  state.SetItemsProcessed(state.iterations() * 25);
}
BENCHMARK(BM_CaseAdaptiveEmbed);

void BM_CaseInferenceEmbed(benchmark::State& state) {
  Backbone bb = desk_backbone(AdapterKind::kCase);
  Tensor context = random_images(25, 3, 32, 4);
  bb.embed(context, AdapterUse::kAdaptive);  // prime the caches
  Tensor target = random_images(25, 3, 32, 5);
  for (auto _ : state) {
    Tensor emb = bb.embed(target, AdapterUse::kInference);
    benchmark::DoNotOptimize(emb.data.data());
  }
  state.SetItemsProcessed(state.iterations() * 25);
}
BENCHMARK(BM_CaseInferenceEmbed);

void BM_HeadFit(benchmark::State& state) {
  int steps = static_cast<int>(state.range(0));
  EmbeddingBuffer buffer;
  buffer.embeddings = Tensor::zeros({25, 256});
  RandomStream rng(6);
  rng.fill_normal(buffer.embeddings.data, 0.f, 1.f);
  for (int i = 0; i < 25; ++i) buffer.labels.push_back(i % 5);
  HeadFitConfig cfg;
  cfg.steps = steps;
  cfg.batch_size = 128;
  for (auto _ : state) {
    LinearHead head = fit_head(buffer, cfg, 7);
    benchmark::DoNotOptimize(head.w.data.data());
  }
  state.SetItemsProcessed(state.iterations() * steps);
}
BENCHMARK(BM_HeadFit)->Arg(50)->Arg(500);

void BM_EpisodeAdaptAndPredict(benchmark::State& state) {
  Backbone bb = desk_backbone(AdapterKind::kCase);
  SyntheticDomain domain(4, 99);
  SamplerConfig cfg;
  cfg.way_min = cfg.way_max = 5;
  cfg.shot_min = cfg.shot_max = 3;
  RandomStream rng(8);
  Task task = sample_task(cfg, domain, rng);
  HeadFitConfig head;
  head.steps = 100;
  for (auto _ : state) {
    Prediction p = adapt_and_predict(bb, task, head, 9);
    benchmark::DoNotOptimize(p.logits.data.data());
  }
}
BENCHMARK(BM_EpisodeAdaptAndPredict);

void BM_SampleTask(benchmark::State& state) {
  SyntheticDomain domain(0, 42);
  SamplerConfig cfg;
  RandomStream rng(10);
  for (auto _ : state) {
    Task task = sample_task(cfg, domain, rng);
    benchmark::DoNotOptimize(task.context_images.data.data());
  }
}
BENCHMARK(BM_SampleTask);

}  // namespace

BENCHMARK_MAIN();
