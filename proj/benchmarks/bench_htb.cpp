#include <benchmark/benchmark.h>

#include "htb/data.hpp"
#include "htb/defense.hpp"
#include "htb/nnet.hpp"
#include "htb/poison.hpp"
#include "htb/trigger.hpp"

using namespace htb;

namespace {

nnet::Architecture desk_arch() {
  nnet::Architecture a;
  a.conv_channels = {16, 48, 96, 64};
  return a;
}

const std::vector<ImageTensor>& images() {
  static const auto imgs = data::generate_synthetic_dataset(10, 10, 3);
  return imgs;
}

}  // namespace

static void BM_Forward(benchmark::State& state) {
  const auto model = nnet::build_model(desk_arch(), 1);
  const std::span<const ImageTensor> batch(images().data(), static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(nnet::features(model, batch, nnet::Layer::fc1));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Forward)->Arg(1)->Arg(20)->Arg(80)->Unit(benchmark::kMillisecond);

static void BM_InputGradient(benchmark::State& state) {
  const auto model = nnet::build_model(desk_arch(), 1);
  const auto prec = state.range(1) ? nnet::Precision::f64 : nnet::Precision::f32;
  const nnet::FeatureExtractor fx(model, prec);
  const std::span<const ImageTensor> batch(images().data(), static_cast<std::size_t>(state.range(0)));
  const nnet::FeatureLoss loss = [](const Eigen::MatrixXd& f, Eigen::MatrixXd& g) {
    g = 2.0 * f;
    return f.squaredNorm();
  };
  for (auto _ : state) benchmark::DoNotOptimize(fx.input_gradient(loss, batch, nnet::Layer::fc1));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_InputGradient)->Args({20, 0})->Args({80, 0})->Args({20, 1})->Unit(benchmark::kMillisecond);

static void BM_Hungarian(benchmark::State& state) {
  const auto k = state.range(0);
  const Eigen::MatrixXd d = Eigen::MatrixXd::Random(k, k).cwiseAbs();
  for (auto _ : state) benchmark::DoNotOptimize(poison::hungarian_assign(d));
  state.SetComplexityN(k);
}
BENCHMARK(BM_Hungarian)->RangeMultiplier(2)->Range(8, 512)->Complexity(benchmark::oNCubed);

static void BM_Greedy(benchmark::State& state) {
  const auto k = state.range(0);
  const Eigen::MatrixXd d = Eigen::MatrixXd::Random(k, k).cwiseAbs();
  for (auto _ : state) benchmark::DoNotOptimize(poison::greedy_assign(d));
  state.SetComplexityN(k);
}
BENCHMARK(BM_Greedy)->RangeMultiplier(2)->Range(8, 512)->Complexity(benchmark::oNSquared);

static void BM_ApplyTrigger(benchmark::State& state) {
  const auto trig = trigger::generate_trigger(static_cast<int>(state.range(0)), 11);
  const auto& img = images().front();
  const auto place = trigger::corner_placement(dims_of(img), trig.patch_size());
  for (auto _ : state) benchmark::DoNotOptimize(trigger::apply_trigger(img, trig, place));
}
BENCHMARK(BM_ApplyTrigger)->Arg(8)->Arg(16);

static void BM_SpectralScores(benchmark::State& state) {
  const Eigen::MatrixXd f = Eigen::MatrixXd::Random(state.range(0), state.range(1));
  for (auto _ : state) benchmark::DoNotOptimize(defense::spectral_scores(f));
}
BENCHMARK(BM_SpectralScores)->Args({170, 64})->Args({900, 512})->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
