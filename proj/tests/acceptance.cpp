// Acceptance harness: one PASS/FAIL line per criterion.
//
//   htb_acceptance [--out DIR] [--strict]
//
// Runs the desk profile (synthetic data, one CPU core). The CIFAR-10 arm of
// criterion 1 runs only when HTB_CIFAR_DIR points at the binary batches.
// Exit status is 0 once every criterion has been evaluated; with --strict any
// FAIL also yields 1. Results land in DIR/acceptance.json.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "htb/data.hpp"
#include "htb/defense.hpp"
#include "htb/error.hpp"
#include "htb/experiment.hpp"
#include "htb/io.hpp"
#include "htb/poison.hpp"

using namespace htb;
namespace ex = htb::experiment;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::vector<std::uint64_t> kSeeds{1, 2, 3};

// Thresholds, straight from the acceptance criteria.
constexpr double kMinClean = 0.90;
constexpr double kMaxPatched = 0.55;
constexpr double kMinGap = 0.35;
constexpr double kReducedMinGap = 0.20;
constexpr double kControlTol = 0.10;
constexpr double kBadnetsTol = 0.25;
constexpr double kBothSucceedGap = 0.20;
constexpr double kDefensePercentile = 85.0;
constexpr int kDefenseMinWins = 2;
constexpr double kOracleRelTol = 1e-6;
constexpr int kAssignTrials = 1000;
constexpr int kAssignMaxK = 6;
constexpr double kGradRelTol = 1e-3;
constexpr int kGradProbes = 20;
constexpr double kLayersTol = 0.05;

// Budget for the trend criteria (2-5, 9).
constexpr double kTrendEpsilon = 32.0;

struct Line {
  std::string id, name, detail;
  bool pass = false;
  bool skipped = false;
};

std::vector<Line> g_lines;
json g_report = json::object();

void emit(const Line& l) {
  const char* tag = l.skipped ? "SKIP" : l.pass ? "PASS" : "FAIL";
  std::printf("[%s] %s %s: %s\n", tag, l.id.c_str(), l.name.c_str(), l.detail.c_str());
  std::fflush(stdout);
  g_lines.push_back(l);
  g_report["criteria"][l.id] = {{"name", l.name}, {"status", tag}, {"detail", l.detail}};
}

void progress(const std::string& s) {
  static const auto t0 = std::chrono::steady_clock::now();
  const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::fprintf(stderr, "[%7.1fs] %s\n", t, s.c_str());
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string list(const std::vector<double>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + fmt("%.3f", v[i]);
  return s + "]";
}

// ---------------------------------------------------------------- runs

struct Harness {
  fs::path root;
  ex::PipelineCache cache;
  std::vector<std::string> soundness_failures;
  int batches_checked = 0;

  ex::ExperimentConfig desk(std::uint64_t seed, const std::string& tag, double epsilon = kTrendEpsilon) const {
    ex::ExperimentConfig c = ex::desk_profile();
    c.master_seed = seed;
    c.poison.epsilon = epsilon;
    c.badnets = true;
    c.output_dir = root / (tag + "_s" + std::to_string(seed));
    return c;
  }

  ex::RunResult run(const ex::ExperimentConfig& c) {
    progress("run " + c.output_dir.filename().string());
    auto r = ex::run(c, &cache);
    check_soundness(c, r);
    g_report["runs"][c.output_dir.filename().string()] = r.manifest.at("metrics");
    return r;
  }

  // Criterion 6 on every generated batch.
  void check_soundness(const ex::ExperimentConfig& c, const ex::RunResult& r) {
    const PoisonBatch& b = r.poisons;
    if (b.size() == 0) return;
    ++batches_checked;
    const std::string name = c.output_dir.filename().string();
    const double dev = poison::max_linf_deviation(b.poisons, b.anchors);
    const double initial = b.loss_trace.front();
    const double final_mean = std::accumulate(b.losses.begin(), b.losses.end(), 0.0) / static_cast<double>(b.size());

    // Fresh patched sources from the generation pool, rebuilt through the public data API.
    const auto all = data::generate_synthetic_dataset(c.dataset.num_classes, c.dataset.per_class, c.dataset.seed);
    const int s = c.pair.source_category;
    const auto split = data::make_split(data::filter_by_label(all, s), c.splits,
                                        derive_seed(c.dataset.seed, "split-" + std::to_string(s)), s);
    const auto trig = trigger::generate_trigger(c.patch_size, ex::stage_seeds(c).trigger, c.pair.trigger_id);
    Rng rng(derive_seed(c.master_seed, "acceptance-collision"));
    std::vector<ImageTensor> patched;
    for (std::size_t k = 0; k < b.size(); ++k) {
      const auto& img = split.poison_gen[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(split.poison_gen.size()) - 1))];
      const auto place = c.poison.placement_mode == PlacementMode::corner
                             ? trigger::corner_placement(dims_of(img), trig.patch_size())
                             : trigger::random_placement(dims_of(img), trig.patch_size(), rng);
      patched.push_back(trigger::apply_trigger(img, trig, place));
    }
    const auto base = nnet::load_checkpoint(c.output_dir / "pretrained.ckpt");
    const auto col = poison::measure_collision(base, b, patched, nnet::parse_layer(c.poison.embedding_layer));

    const bool ok = dev <= c.poison.epsilon && final_mean < initial && col.poison_to_source < col.anchor_to_source;
    g_report["soundness"][name] = {{"max_linf", dev},
                                   {"initial_mean_loss", initial},
                                   {"final_mean_loss", final_mean},
                                   {"poison_to_source", col.poison_to_source},
                                   {"anchor_to_source", col.anchor_to_source}};
    if (!ok)
      soundness_failures.push_back(fmt("%s(dev %.6g, loss %.4g->%.4g, dist %.4g vs %.4g)", name.c_str(), dev, initial,
                                       final_mean, col.poison_to_source, col.anchor_to_source));
  }
};

// ---------------------------------------------------------------- criteria

struct AttackNumbers {
  double clean, patched, control_patched, control_clean_source;
  double badnets_patched = std::numeric_limits<double>::quiet_NaN();
  double ours_flag = 0, badnets_flag = 0;
};

AttackNumbers numbers(const ex::RunResult& r) {
  AttackNumbers n{r.poisoned.clean_accuracy, r.poisoned.patched_source_accuracy, r.control.patched_source_accuracy,
                  r.clean_model_source_accuracy};
  if (r.badnets) n.badnets_patched = r.badnets->patched_source_accuracy;
  if (r.defense) n.ours_flag = defense::poison_flag_rate(*r.defense);
  if (r.badnets_defense) n.badnets_flag = defense::poison_flag_rate(*r.badnets_defense);
  return n;
}

void criterion1_cifar(Harness& h) {
  const char* dir = std::getenv("HTB_CIFAR_DIR");
  if (!dir || !*dir) {
    emit({"C1-cifar", "end-to-end attack, CIFAR-10 protocol", "HTB_CIFAR_DIR not set; CIFAR-10 batches unavailable", false, true});
    return;
  }
  std::vector<double> clean, patched, reduced_gap;
  for (auto seed : kSeeds) {
    ex::ExperimentConfig c = ex::cifar_protocol();
    c.dataset.cifar_dir = dir;
    c.master_seed = seed;
    c.output_dir = h.root / ("cifar_s" + std::to_string(seed));
    const auto r = h.run(c);
    clean.push_back(r.poisoned.clean_accuracy);
    patched.push_back(r.poisoned.patched_source_accuracy);
    c.poison.n_generate = c.poison.n_select = 200;
    c.poison.iterations = 2000;
    c.output_dir = h.root / ("cifar_reduced_s" + std::to_string(seed));
    const auto rr = h.run(c);
    reduced_gap.push_back(rr.poisoned.clean_accuracy - rr.poisoned.patched_source_accuracy);
  }
  std::vector<double> gap;
  for (std::size_t i = 0; i < clean.size(); ++i) gap.push_back(clean[i] - patched[i]);
  const bool ok = median(clean) >= kMinClean && median(patched) <= kMaxPatched && median(gap) >= kMinGap &&
                  median(reduced_gap) >= kReducedMinGap;
  emit({"C1-cifar", "end-to-end attack, CIFAR-10 protocol",
        fmt("median clean %.3f (>=%.2f) patched %.3f (<=%.2f) gap %.3f (>=%.2f); reduced gap %.3f (>=%.2f)", median(clean),
            kMinClean, median(patched), kMaxPatched, median(gap), kMinGap, median(reduced_gap), kReducedMinGap),
        ok});
}

}  // namespace

int main(int argc, char** argv) {
  fs::path root = fs::temp_directory_path() / "htb_acceptance";
  bool strict = false;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--strict") strict = true;
    else if (a == "--out" && i + 1 < argc) root = argv[++i];
    else {
      std::fprintf(stderr, "usage: %s [--out DIR] [--strict]\n", argv[0]);
      return 2;
    }
  }
  fs::remove_all(root);
  fs::create_directories(root);
  Harness h;
  h.root = root;

  try {
    // C1 at the protocol budget.
    std::vector<double> clean, patched, gap;
    for (auto s : kSeeds) {
      auto c = h.desk(s, "eps16_p8_n80", 16.0);
      c.badnets = false;
      c.defense.enabled = false;
      const auto r = h.run(c);
      clean.push_back(r.poisoned.clean_accuracy);
      patched.push_back(r.poisoned.patched_source_accuracy);
      gap.push_back(clean.back() - patched.back());
    }
    emit({"C1", "end-to-end attack, desk profile (80 poisons, eps 16, 8x8 corner trigger)",
          fmt("median clean %.3f (>=%.2f) patched %.3f (<=%.2f) gap %.3f (>=%.2f); per seed patched %s",
              median(clean), kMinClean, median(patched), kMaxPatched, median(gap), kMinGap, list(patched).c_str()),
          median(clean) >= kMinClean && median(patched) <= kMaxPatched && median(gap) >= kMinGap});
    criterion1_cifar(h);

    // Trend runs (C2-C5): eps 32, 80 poisons, BadNets arm on.
    std::vector<ex::RunResult> main_runs;
    for (auto s : kSeeds) main_runs.push_back(h.run(h.desk(s, "p8_n80")));

    // C2: trigger size 4 / 8 / 16.
    std::vector<double> by_size[3];
    for (const auto& r : main_runs) by_size[1].push_back(r.poisoned.patched_source_accuracy);
    for (auto s : kSeeds) {
      for (int k : {0, 2}) {
        const int p = k == 0 ? 4 : 16;
        auto c = h.desk(s, "p" + std::to_string(p) + "_n80");
        c.patch_size = p;
        c.badnets = false;
        c.defense.enabled = false;
        by_size[k].push_back(h.run(c).poisoned.patched_source_accuracy);
      }
    }
    const double m4 = median(by_size[0]), m8 = median(by_size[1]), m16 = median(by_size[2]);
    emit({"C2", "patch-size monotonicity (eps 32)",
          fmt("median patched P=4 %.3f, P=8 %.3f, P=16 %.3f (non-increasing required); per seed %s %s %s", m4, m8, m16,
              list(by_size[0]).c_str(), list(by_size[1]).c_str(), list(by_size[2]).c_str()),
          m8 <= m4 && m16 <= m8});

    // C3: 20 vs 80 poisons (same scale ratio as 200 vs 800) and the zero-poison control.
    std::vector<ex::RunResult> few_runs;
    std::vector<double> p20, control_dev;
    for (auto s : kSeeds) {
      auto c = h.desk(s, "p8_n20");
      c.poison.n_select = 20;
      few_runs.push_back(h.run(c));
      p20.push_back(few_runs.back().poisoned.patched_source_accuracy);
      auto z = h.desk(s, "p8_n0");
      z.poison.n_select = 0;
      z.badnets = false;
      const auto r0 = h.run(z);
      control_dev.push_back(std::abs(r0.poisoned.patched_source_accuracy - r0.clean_model_source_accuracy));
    }
    const double worst_dev = *std::max_element(control_dev.begin(), control_dev.end());
    emit({"C3", "poison-count trend and zero-poison control (eps 32)",
          fmt("median patched n=80 %.3f <= n=20 %.3f; zero-poison |patched - clean source| max %.3f (<=%.2f)", m8,
              median(p20), worst_dev, kControlTol),
          m8 <= median(p20) && worst_dev <= kControlTol});

    // C4: BadNets at matched count (80).
    std::vector<double> diff, ours_gap, bn_gap;
    for (const auto& r : main_runs) {
      const auto n = numbers(r);
      diff.push_back(std::abs(n.patched - n.badnets_patched));
      ours_gap.push_back(n.control_patched - n.patched);
      bn_gap.push_back(n.control_patched - n.badnets_patched);
    }
    emit({"C4", "BadNets comparison at matched poison count (80, eps 32)",
          fmt("median |ours - badnets| %.3f (<=%.2f); gap vs clean control ours %.3f badnets %.3f (>=%.2f)",
              median(diff), kBadnetsTol, median(ours_gap), median(bn_gap), kBothSucceedGap),
          median(diff) <= kBadnetsTol && median(ours_gap) >= kBothSucceedGap && median(bn_gap) >= kBothSucceedGap});

    // C5: spectral defense at the 85th percentile, 20 poisons among 150 clean targets.
    int wins = 0;
    std::string per;
    for (const auto& r : few_runs) {
      const auto n = numbers(r);
      wins += n.ours_flag < n.badnets_flag;
      per += fmt(" %.2f/%.2f", n.ours_flag, n.badnets_flag);
    }
    Rng rng(55);
    double worst_rel = 0.0;
    for (int t = 0; t < 200; ++t) {
      const int n = static_cast<int>(rng.uniform_int(2, 50)), d = static_cast<int>(rng.uniform_int(1, 50));
      Eigen::MatrixXd f(n, d);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) f(i, j) = rng.normal() * (1.0 + j % 4);
      const auto got = defense::spectral_scores(f);
      const Eigen::MatrixXd x = f.rowwise() - f.colwise().mean();
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(x.transpose() * x);
      const Eigen::VectorXd proj = x * es.eigenvectors().col(d - 1);
      const double top = proj.cwiseAbs2().maxCoeff();
      for (int i = 0; i < n; ++i) {
        const double want = proj[i] * proj[i];
        worst_rel = std::max(worst_rel, std::abs(got[static_cast<std::size_t>(i)] - want) / std::max(want, 1e-3 * top));
      }
    }
    emit({"C5", "spectral-signature defense asymmetry (20 poisons, eps 32) + dense oracle",
          fmt("hidden-trigger < BadNets flag rate in %d/3 runs (>=%d); rates ours/badnets%s; oracle worst rel err %.2e "
              "(<=%.0e)",
              wins, kDefenseMinWins, per.c_str(), worst_rel, kOracleRelTol),
          wins >= kDefenseMinWins && worst_rel <= kOracleRelTol});

    // C9: conv4-embedding poisons, fc2-only vs fc1+fc2 finetuning.
    std::vector<double> last_only, both, both_clean;
    for (auto s : kSeeds) {
      auto c = h.desk(s, "conv4_fc2");
      c.poison.embedding_layer = "conv4";
      c.badnets = false;
      c.defense.enabled = false;
      last_only.push_back(h.run(c).poisoned.patched_source_accuracy);
      c.output_dir = h.root / ("conv4_fc1fc2_s" + std::to_string(s));
      c.finetune.trainable_layers = {nnet::Layer::fc1, nnet::Layer::fc2};
      const auto r = h.run(c);
      both.push_back(r.poisoned.patched_source_accuracy);
      both_clean.push_back(r.poisoned.clean_accuracy);
    }
    emit({"C9", "more-layers ablation (conv4 embedding, eps 32)",
          fmt("median patched fc1+fc2 %.3f >= fc2-only %.3f - %.2f; clean (fc1+fc2) %.3f (>=%.2f)", median(both),
              median(last_only), kLayersTol, median(both_clean), kMinClean),
          median(both) >= median(last_only) - kLayersTol && median(both_clean) >= kMinClean});

    // C6 covers every batch generated above.
    emit({"C6", "optimization soundness on every generated batch",
          fmt("%d batches; %zu violations%s", h.batches_checked, h.soundness_failures.size(),
              h.soundness_failures.empty() ? "" : (": " + h.soundness_failures.front()).c_str()),
          h.batches_checked > 0 && h.soundness_failures.empty()});

    // C7: Hungarian vs exhaustive search.
    {
      Rng r(777);
      int mismatches = 0, greedy_below = 0;
      for (int t = 0; t < kAssignTrials; ++t) {
        const int k = static_cast<int>(r.uniform_int(1, kAssignMaxK));
        Eigen::MatrixXd d(k, k);
        for (int i = 0; i < k; ++i)
          for (int j = 0; j < k; ++j) d(i, j) = t % 4 == 0 ? static_cast<double>(r.uniform_int(0, 4)) : r.uniform(0, 50);
        std::vector<int> perm(static_cast<std::size_t>(k));
        std::iota(perm.begin(), perm.end(), 0);
        double best = std::numeric_limits<double>::infinity();
        do best = std::min(best, poison::Assignment{perm}.cost(d));
        while (std::next_permutation(perm.begin(), perm.end()));
        const double hc = poison::hungarian_assign(d).cost(d);
        mismatches += hc != best;
        greedy_below += poison::greedy_assign(d).cost(d) < hc;
      }
      emit({"C7", "assignment correctness",
            fmt("%d random matrices K<=%d: %d Hungarian != exhaustive, %d greedy < Hungarian", kAssignTrials, kAssignMaxK,
                mismatches, greedy_below),
            mismatches == 0 && greedy_below == 0});
    }

    // C8: f64 input gradients vs central differences on the pretrained desk network.
    {
      const auto base = nnet::load_checkpoint(h.root / "eps16_p8_n80_s1" / "pretrained.ckpt");
      const nnet::FeatureExtractor fx(base, nnet::Precision::f64);
      const auto all = data::generate_synthetic_dataset(10, 20, 99);
      const std::vector<ImageTensor> imgs(all.begin(), all.begin() + 2);
      Rng r(31);
      const Eigen::MatrixXd target = Eigen::MatrixXd::Random(2, base.arch.fc_width).cwiseAbs() * 3.0;
      const nnet::FeatureLoss loss = [&](const Eigen::MatrixXd& f, Eigen::MatrixXd& g) {
        g = 2.0 * (f - target);
        return (f - target).squaredNorm();
      };
      const auto g0 = fx.input_gradient(loss, imgs, nnet::Layer::fc1);
      const auto at = [&](std::size_t i, std::size_t px, float delta) {
        auto x = imgs;
        x[i].pixels[px] += delta;
        return std::pair{fx.input_gradient(loss, x, nnet::Layer::fc1).loss,
                         static_cast<double>(x[i].pixels[px]) - imgs[i].pixels[px]};
      };
      // A ReLU or max-pool switch inside [x-h, x+h] invalidates the central
      // difference; such probes show unequal one-sided slopes and are redrawn.
      constexpr float kStep = 1e-3f;
      double worst = 0.0;
      int checked = 0, kinked = 0;
      while (checked < kGradProbes && kinked < 10 * kGradProbes) {
        const auto i = static_cast<std::size_t>(r.uniform_int(0, 1));
        const auto px = static_cast<std::size_t>(r.uniform_int(0, static_cast<std::int64_t>(imgs[i].size()) - 1));
        const auto [fp, hp] = at(i, px, kStep);
        const auto [fm, hm] = at(i, px, -kStep);
        const double fwd = (fp - g0.loss) / hp, bwd = (g0.loss - fm) / -hm;
        const double fd = (fp - fm) / (hp - hm);
        if (std::abs(fwd - bwd) > 1e-4 * (std::abs(fd) + 1e-8)) {
          ++kinked;
          continue;
        }
        const double an = g0.gradient[i].pixels[px];
        worst = std::max(worst, std::abs(an - fd) / (std::abs(fd) + 1e-8));
        ++checked;
      }
      emit({"C8", "gradient fidelity (float64)",
            fmt("%d smooth probes (%d redrawn at kinks), worst relative error %.2e (<=%.0e)", checked, kinked, worst,
                kGradRelTol),
            checked == kGradProbes && worst <= kGradRelTol});
    }

    // C10: two from-scratch runs of a reduced config in serial mode.
    {
      auto c = ex::desk_profile();
      c.master_seed = 5;
      c.badnets = true;
      c.pretrain.epochs = 4;
      c.poison.batch_size = 20;
      c.poison.n_generate = c.poison.n_select = 20;
      c.poison.iterations = 60;
      c.threads = 1;
      c.output_dir = h.root / "determinism_a";
      progress("determinism run a");
      const auto a = ex::run(c);
      c.output_dir = h.root / "determinism_b";
      progress("determinism run b");
      const auto b = ex::run(c);
      const auto& arts = a.manifest.at("artifacts");
      int diffs = 0;
      for (const auto& [k, v] : arts.items()) diffs += !b.manifest.at("artifacts").contains(k) ||
                                                       b.manifest.at("artifacts").at(k).at("sha256") != v.at("sha256");
      const bool metrics_equal = a.manifest.at("metrics") == b.manifest.at("metrics");
      emit({"C10", "determinism (serial)",
            fmt("metrics %s; %d of %zu artifact hashes differ", metrics_equal ? "identical" : "DIFFER", diffs, arts.size()),
            metrics_equal && diffs == 0});
    }
  } catch (const std::exception& e) {
    std::printf("[FAIL] harness aborted: %s\n", e.what());
    io::write_json(root / "acceptance.json", g_report);
    return 1;
  }

  int failed = 0, passed = 0, skipped = 0;
  for (const auto& l : g_lines) (l.skipped ? skipped : l.pass ? passed : failed) += 1;
  std::printf("summary: %d passed, %d failed, %d skipped\n", passed, failed, skipped);
  g_report["summary"] = {{"passed", passed}, {"failed", failed}, {"skipped", skipped}};
  io::write_json(root / "acceptance.json", g_report);
  return strict && failed > 0 ? 1 : 0;
}
