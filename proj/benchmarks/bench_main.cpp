#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "tes/attacks.hpp"
#include "tes/autodiff.hpp"
#include "tes/models.hpp"

namespace {

using namespace tes;

std::vector<double> image(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> x(data::kSide * data::kSide);
  for (double& v : x) v = u(rng);
  return x;
}

void BM_Conv2dForward(benchmark::State& state) {
  const std::size_t batch = state.range(0);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor x({batch, 8, 16, 16}), k({16, 8, 3, 3}), b({16});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = n(rng);
  for (std::size_t i = 0; i < k.size(); ++i) k[i] = n(rng);
  for (auto _ : state) {
    Tape tape;
    Var y = conv2d(tape.leaf(x), tape.leaf(k), tape.leaf(b), 2, 1);
    benchmark::DoNotOptimize(y.value()[0]);
  }
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_Conv2dForward)->Arg(1)->Arg(32);

/// One black-box score query against each target architecture.
void BM_Query(benchmark::State& state) {
  const auto arch = static_cast<models::ArchId>(state.range(0));
  const models::Classifier m = models::init_classifier(arch, 5, 2);
  const auto x = image(3);
  attacks::QueryOracle oracle(m, static_cast<std::size_t>(-1));
  for (auto _ : state) benchmark::DoNotOptimize(oracle.query(x));
  state.SetLabel(arch == models::ArchId::ConvA ? "ConvA" : "ConvB");
}
BENCHMARK(BM_Query)->Arg(static_cast<int>(models::ArchId::ConvA))->Arg(static_cast<int>(models::ArchId::ConvB));

void BM_SurrogateGradient(benchmark::State& state) {
  const models::Classifier fa = models::init_classifier(models::ArchId::ConvA, 10, 1);
  const models::AdversarialGenerator g = models::init_generator(models::GeneratorSpec{}, 2);
  const auto x = image(4);
  const auto z = g.encode(x);
  const std::vector<double> s(10, 0.1);
  for (auto _ : state) benchmark::DoNotOptimize(attacks::surrogate_gradient(fa, g, x, z, s));
}
BENCHMARK(BM_SurrogateGradient);

void BM_SampleNoise(benchmark::State& state) {
  const std::size_t d = state.range(0);
  std::vector<double> grad(d, 1.0);
  const auto u = attacks::guided_subspace(grad);
  Rng rng(5);
  for (auto _ : state) benchmark::DoNotOptimize(attacks::sample_noise(u, 0.5, 1.0, d, 20, rng));
  state.SetItemsProcessed(state.iterations() * 20);
}
BENCHMARK(BM_SampleNoise)->Arg(32)->Arg(256);

/// Full TES attack on an untrained pair of models, capped at 211 queries.
void BM_TesAttack(benchmark::State& state) {
  const models::Classifier fa = models::init_classifier(models::ArchId::ConvA, 10, 1);
  const models::Classifier fb = models::init_classifier(models::ArchId::ConvA, 5, 6);
  const models::AdversarialGenerator g = models::init_generator(models::GeneratorSpec{}, 2);
  attacks::SoftLabelTable table;
  table.labels.assign(5, std::vector<double>(10, 0.1));
  table.counts.assign(5, 1);
  const auto x = image(7);
  const std::size_t y = models::predict_label(fb, x);
  attacks::AttackConfig c;
  c.budget = 211;
  std::size_t queries = 0;
  for (auto _ : state) {
    attacks::QueryOracle oracle(fb, c.budget);
    queries += attacks::tes_attack(fa, g, table, oracle, x, y, c).queries_used;
  }
  state.counters["queries"] = benchmark::Counter(double(queries), benchmark::Counter::kIsRate);
}
BENCHMARK(BM_TesAttack)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
