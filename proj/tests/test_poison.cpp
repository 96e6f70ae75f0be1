#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "htb/error.hpp"
#include "htb/poison.hpp"
#include "test_support.hpp"

using namespace htb;
using namespace htb::poison;

namespace {

double exhaustive_min(const Eigen::MatrixXd& d) {
  std::vector<int> p(static_cast<std::size_t>(d.rows()));
  std::iota(p.begin(), p.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    best = std::min(best, Assignment{p}.cost(d));
  } while (std::next_permutation(p.begin(), p.end()));
  return best;
}

Eigen::MatrixXd random_dist(Rng& rng, int k, bool integer) {
  Eigen::MatrixXd d(k, k);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) d(i, j) = integer ? static_cast<double>(rng.uniform_int(0, 5)) : rng.uniform(0.0, 100.0);
  return d;
}

}  // namespace

TEST(Assignment, HungarianIsOptimalGreedyNeverBetter) {
  Rng rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    const int k = static_cast<int>(rng.uniform_int(1, 6));
    const Eigen::MatrixXd d = random_dist(rng, k, trial % 3 == 0);
    const Assignment h = hungarian_assign(d);
    const Assignment g = greedy_assign(d);
    ASSERT_TRUE(h.is_bijection());
    ASSERT_TRUE(g.is_bijection());
    ASSERT_EQ(h.cost(d), exhaustive_min(d)) << "trial " << trial;
    ASSERT_GE(g.cost(d), h.cost(d)) << "trial " << trial;
  }
}

TEST(Assignment, GreedyTiesAndKnownSuboptimalCase) {
  Eigen::MatrixXd d(2, 2);
  d << 1, 2, 1, 100;
  EXPECT_EQ(greedy_assign(d).mapping, (std::vector<int>{0, 1}));
  EXPECT_EQ(hungarian_assign(d).mapping, (std::vector<int>{1, 0}));
  Eigen::MatrixXd t = Eigen::MatrixXd::Constant(3, 3, 4.0);
  EXPECT_EQ(greedy_assign(t).mapping, (std::vector<int>{0, 1, 2}));
}

TEST(Assignment, RejectsNonSquareAndNonFinite) {
  EXPECT_THROW(greedy_assign(Eigen::MatrixXd::Zero(2, 3)), ValidationError);
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(2, 2);
  d(0, 1) = std::nan("");
  EXPECT_THROW(hungarian_assign(d), ValidationError);
  EXPECT_TRUE(hungarian_assign(Eigen::MatrixXd(0, 0)).mapping.empty());
}

TEST(Assignment, PairwiseSqDist) {
  Eigen::MatrixXd a(2, 2), b(3, 2);
  a << 0, 0, 1, 2;
  b << 0, 1, 3, 0, 1, 2;
  const auto d = pairwise_sq_dist(a, b);
  Eigen::MatrixXd want(2, 3);
  want << 1, 9, 5, 2, 8, 0;
  EXPECT_TRUE(d.isApprox(want, 1e-12));
}

TEST(Projection, BallAndRangeHoldExactly) {
  Rng rng(7);
  for (double eps : {0.0, 0.5, 1.0, 8.0, 16.0, 255.0}) {
    for (int trial = 0; trial < 50; ++trial) {
      ImageTensor t = fixture::random_image(rng, 4, 4, 3);
      if (trial % 5 == 0) t.pixels[0] = 0.0f;
      if (trial % 7 == 0) t.pixels[1] = 255.0f;
      ImageTensor z = t;
      for (float& v : z.pixels) v = static_cast<float>(v + rng.uniform(-400.0, 400.0));
      const ImageTensor p = pgd_project(z, t, eps);
      ASSERT_TRUE(p.in_range());
      for (std::size_t i = 0; i < p.size(); ++i)
        ASSERT_LE(std::abs(static_cast<double>(p.pixels[i]) - t.pixels[i]), eps) << eps;
    }
  }
  ImageTensor t(1, 1, 1, 100.0f), z(1, 1, 1, 103.0f);
  EXPECT_EQ(pgd_project(z, t, 16.0).pixels[0], 103.0f);
  EXPECT_EQ(pgd_project(z, t, 2.0).pixels[0], 102.0f);
}

TEST(Projection, NonRepresentableBoundsStayInside) {
  Rng rng(9);
  for (int trial = 0; trial < 2000; ++trial) {
    const double eps = rng.uniform(0.0, 20.0);
    ImageTensor t(1, 1, 1, static_cast<float>(rng.uniform(0.0, 255.0)));
    ImageTensor z(1, 1, 1, static_cast<float>(t.pixels[0] + (trial % 2 ? 50.0 : -50.0)));
    const ImageTensor p = pgd_project(z, t, eps);
    ASSERT_LE(std::abs(static_cast<double>(p.pixels[0]) - t.pixels[0]), eps);
    ASSERT_TRUE(p.in_range());
  }
}

TEST(PoisonConfig, ScheduleAndValidation) {
  PoisonConfig c;
  c.lr0 = 0.01;
  c.decay = 0.95;
  c.decay_every = 2000;
  EXPECT_DOUBLE_EQ(c.learning_rate(0), 0.01);
  EXPECT_DOUBLE_EQ(c.learning_rate(1999), 0.01);
  EXPECT_DOUBLE_EQ(c.learning_rate(2000), 0.0095);
  EXPECT_DOUBLE_EQ(c.learning_rate(9999), 0.01 * std::pow(0.95, 4));
  EXPECT_NO_THROW(c.validate());
  auto bad = c;
  bad.epsilon = 300;
  EXPECT_THROW(bad.validate(), ValidationError);
  bad = c;
  bad.n_select = bad.n_generate + 1;
  EXPECT_THROW(bad.validate(), ValidationError);
  bad = c;
  bad.embedding_layer = "conv9";
  EXPECT_THROW(bad.validate(), LayerError);
  bad = c;
  bad.batch_size = 0;
  EXPECT_THROW(bad.validate(), ValidationError);
  EXPECT_EQ(parse_step_mode(to_string(StepMode::sign)), StepMode::sign);
  EXPECT_EQ(parse_assign_mode("hungarian"), AssignMode::hungarian);
  EXPECT_THROW(parse_placement_mode("middle"), ValidationError);
}

namespace {

struct Fixture {
  nnet::ModelBundle model = nnet::build_model(fixture::tiny_arch(3), 17);
  std::vector<ImageTensor> sources = fixture::random_images(12, 100, 0);
  std::vector<ImageTensor> targets = fixture::random_images(10, 200, 1);
  trigger::Trigger trig = trigger::generate_trigger(8, 5);

  PoisonConfig config(PlacementMode mode) const {
    PoisonConfig c;
    c.epsilon = 16;
    c.batch_size = 3;
    c.iterations = 25;
    c.lr0 = 0.01;
    c.decay_every = 10;
    c.n_generate = 7;
    c.n_select = 5;
    c.placement_mode = mode;
    c.seed = 99;
    return c;
  }
};

}  // namespace

TEST(Generate, SoundnessForBothPlacementModes) {
  Fixture f;
  f.model.norm = {{127.5f, 127.5f, 127.5f}, {70.0f, 70.0f, 70.0f}};
  for (auto mode : {PlacementMode::corner, PlacementMode::random}) {
    const PoisonConfig c = f.config(mode);
    const PoisonBatch b = generate_poisons(f.model, f.sources, f.targets, f.trig, c, 2, 5);
    ASSERT_EQ(b.size(), 7u);
    EXPECT_LE(max_linf_deviation(b.poisons, b.anchors), c.epsilon);
    for (const auto& z : b.poisons) {
      EXPECT_TRUE(z.in_range());
      EXPECT_EQ(z.label, 5);
    }
    ASSERT_EQ(b.loss_trace.size(), 25u);
    const double final_mean = std::accumulate(b.losses.begin(), b.losses.end(), 0.0) / static_cast<double>(b.size());
    EXPECT_LT(final_mean, b.loss_trace.front());
    EXPECT_EQ(b.lr_trace[10], c.lr0 * c.decay);
    std::set<int> ids(b.anchor_ids.begin(), b.anchor_ids.end());
    EXPECT_EQ(ids.size(), 7u);
    for (std::size_t k = 0; k < b.size(); ++k) EXPECT_EQ(b.anchors[k].pixels, f.targets[static_cast<std::size_t>(b.anchor_ids[k])].pixels);

    std::vector<ImageTensor> patched;
    for (std::size_t k = 0; k < b.size(); ++k)
      patched.push_back(trigger::apply_trigger(f.sources[k], f.trig, trigger::corner_placement({32, 32, 3}, 8)));
    const auto s = measure_collision(f.model, b, patched, nnet::Layer::fc1);
    EXPECT_LT(s.poison_to_source, s.anchor_to_source);
  }
}

TEST(Generate, DeterministicAndSeedSensitive) {
  Fixture f;
  const PoisonConfig c = f.config(PlacementMode::random);
  const auto a = generate_poisons(f.model, f.sources, f.targets, f.trig, c, 0, 1);
  const auto b = generate_poisons(f.model, f.sources, f.targets, f.trig, c, 0, 1);
  EXPECT_EQ(a, b);
  PoisonConfig c2 = c;
  c2.seed = 100;
  EXPECT_NE(generate_poisons(f.model, f.sources, f.targets, f.trig, c2, 0, 1).poisons, a.poisons);
}

TEST(Generate, ZeroEpsilonKeepsAnchorsAndEarlyStopPads) {
  Fixture f;
  PoisonConfig c = f.config(PlacementMode::corner);
  c.epsilon = 0;
  const auto b = generate_poisons(f.model, f.sources, f.targets, f.trig, c, 0, 1);
  for (std::size_t k = 0; k < b.size(); ++k) EXPECT_EQ(b.poisons[k].pixels, b.anchors[k].pixels);

  c = f.config(PlacementMode::corner);
  c.early_stop_loss = 1e300;
  const auto e = generate_poisons(f.model, f.sources, f.targets, f.trig, c, 0, 1);
  EXPECT_EQ(e.loss_trace.size(), 1u);
  EXPECT_EQ(e.lr_trace.size(), 1u);
}

TEST(Generate, RejectsEmptyPools) {
  Fixture f;
  const PoisonConfig c = f.config(PlacementMode::corner);
  EXPECT_THROW(generate_poisons(f.model, {}, f.targets, f.trig, c, 0, 1), ValidationError);
  EXPECT_THROW(generate_poisons(f.model, f.sources, {}, f.trig, c, 0, 1), ValidationError);
}

TEST(Select, LowestLossStableTies) {
  PoisonBatch p;
  p.losses = {3, 1, 2, 1, 5};
  for (int i = 0; i < 5; ++i) {
    p.poisons.emplace_back(1, 1, 1, static_cast<float>(i));
    p.anchors.emplace_back(1, 1, 1, static_cast<float>(10 + i));
    p.anchor_ids.push_back(i * 2);
  }
  const auto s = select_lowest_loss(p, 3);
  EXPECT_EQ(s.losses, (std::vector<double>{1, 1, 2}));
  EXPECT_EQ(s.anchor_ids, (std::vector<int>{2, 6, 4}));
  EXPECT_EQ(s.poisons[1].pixels[0], 3.0f);
  EXPECT_EQ(s.config.n_select, 3);
  EXPECT_THROW(select_lowest_loss(p, 6), ValidationError);
}

TEST(BadNets, PatchedRelabeledWithoutReplacement) {
  const auto src = fixture::random_images(10, 3, 0);
  const auto trig = trigger::generate_trigger(8, 1);
  Rng rng(4);
  const auto bn = generate_badnets_poisons(src, trig, 10, PlacementMode::corner, 1, rng);
  ASSERT_EQ(bn.size(), 10u);
  std::set<float> firsts;
  for (const auto& img : bn) {
    EXPECT_EQ(img.label, 1);
    EXPECT_EQ(img.at(31, 31, 0), trig.patch.at(7, 7, 0));
    firsts.insert(img.at(0, 0, 0));
  }
  EXPECT_EQ(firsts.size(), 10u);
  EXPECT_THROW(generate_badnets_poisons(src, trig, 11, PlacementMode::corner, 1, rng), ValidationError);
}
