#include <gtest/gtest.h>

#include "htb/error.hpp"
#include "htb/eval.hpp"
#include "test_support.hpp"

using namespace htb;
using namespace htb::eval;

namespace {

nnet::ModelBundle random_model(int classes, std::uint64_t seed) {
  auto m = nnet::build_model(fixture::tiny_arch(classes), seed);
  m.norm = {{127.5f, 127.5f, 127.5f}, {70.0f, 70.0f, 70.0f}};
  return m;
}

}  // namespace

TEST(EvaluateBinary, MatchesDirectPrediction) {
  const auto m = random_model(2, 4);
  const auto src = fixture::random_images(9, 1);
  const auto tgt = fixture::random_images(7, 2);
  const auto trig = trigger::generate_trigger(8, 3);
  const EvalOptions opts{4, PlacementMode::random, 21};
  const AttackReport r = evaluate_binary(m, src, tgt, trig, opts);
  ASSERT_EQ(r.per_placement.size(), 36u);
  EXPECT_EQ(r.n_images, 9);
  EXPECT_EQ(r.n_placements, 4);
  EXPECT_EQ(r.n_clean, 16);

  std::size_t clean_hits = 0;
  const auto ps = nnet::predict(m, src).labels, pt = nnet::predict(m, tgt).labels;
  for (int v : ps) clean_hits += v == 0;
  for (int v : pt) clean_hits += v == 1;
  EXPECT_DOUBLE_EQ(r.clean_accuracy, clean_hits / 16.0);

  std::size_t own = 0;
  for (const auto& o : r.per_placement) {
    const auto img = trigger::apply_trigger(src[static_cast<std::size_t>(o.image)], trig, {o.top, o.left, 8});
    const int pred = nnet::predict(m, std::span(&img, 1)).labels[0];
    EXPECT_EQ(pred, o.predicted);
    own += pred == 0;
  }
  EXPECT_DOUBLE_EQ(r.patched_source_accuracy, own / 36.0);
  EXPECT_DOUBLE_EQ(r.patched_source_accuracy + r.attack_success_rate, 1.0);
  EXPECT_EQ(evaluate_binary(m, src, tgt, trig, opts), r);
  EXPECT_EQ(evaluate_binary(m, src, tgt, trig, opts, {3, 4}), r);
}

TEST(EvaluateBinary, CornerPlacementAndErrors) {
  const auto m = random_model(2, 4);
  const auto src = fixture::random_images(3, 1);
  const auto trig = trigger::generate_trigger(8, 3);
  const auto r = evaluate_binary(m, src, src, trig, {2, PlacementMode::corner, 0});
  for (const auto& o : r.per_placement) {
    EXPECT_EQ(o.top, 24);
    EXPECT_EQ(o.left, 24);
  }
  EXPECT_THROW(evaluate_binary(m, {}, src, trig, {}), ValidationError);
  EXPECT_THROW(evaluate_binary(random_model(3, 1), src, src, trig, {}), ValidationError);
  EXPECT_THROW(evaluate_binary(m, src, src, trig, {0, PlacementMode::corner, 0}), ValidationError);
}

TEST(EvaluateMulticlass, SingleAndMultiSource) {
  const auto m = random_model(4, 6);
  std::vector<std::vector<ImageTensor>> by_class;
  for (int c = 0; c < 4; ++c) by_class.push_back(fixture::random_images(3 + static_cast<std::size_t>(c), 10 + c, c));
  const auto trig = trigger::generate_trigger(8, 3);
  const EvalOptions opts{2, PlacementMode::random, 5};
  const auto single = evaluate_multiclass(m, by_class, trig, MultiMode::single_source, 2, 1, opts);
  EXPECT_EQ(single.setting, Setting::multiclass_single_source);
  EXPECT_EQ(single.n_images, 5);
  EXPECT_EQ(single.n_clean, 3 + 4 + 5 + 6);
  for (const auto& o : single.per_placement) EXPECT_EQ(o.true_label, 2);

  const auto multi = evaluate_multiclass(m, by_class, trig, MultiMode::multi_source, -1, 1, opts);
  EXPECT_EQ(multi.n_images, 9);  // 3 per non-target class, capped by the smallest
  std::map<int, int> per;
  for (const auto& o : multi.per_placement) per[o.true_label] += 1;
  EXPECT_EQ(per, (std::map<int, int>{{0, 6}, {2, 6}, {3, 6}}));
  EXPECT_LE(multi.patched_source_accuracy + multi.attack_success_rate, 1.0 + 1e-12);

  EXPECT_THROW(evaluate_multiclass(m, by_class, trig, MultiMode::single_source, 1, 1, opts), ValidationError);
  by_class.pop_back();
  EXPECT_THROW(evaluate_multiclass(m, by_class, trig, MultiMode::multi_source, 0, 1, opts), ValidationError);
}

TEST(CompareBadnets, SharedPlacementsAndArchCheck) {
  const auto a = random_model(2, 1), b = random_model(2, 2);
  const auto src = fixture::random_images(5, 1), tgt = fixture::random_images(5, 2);
  const auto trig = trigger::generate_trigger(8, 3);
  const EvalOptions opts{3, PlacementMode::random, 8};
  const auto [ra, rb] = compare_badnets(a, b, src, tgt, trig, opts);
  ASSERT_EQ(ra.per_placement.size(), rb.per_placement.size());
  for (std::size_t i = 0; i < ra.per_placement.size(); ++i) {
    EXPECT_EQ(ra.per_placement[i].top, rb.per_placement[i].top);
    EXPECT_EQ(ra.per_placement[i].left, rb.per_placement[i].left);
  }
  auto c = nnet::build_model(nnet::Architecture{}, 1);
  c.arch.num_classes = 2;
  EXPECT_THROW(compare_badnets(a, c, src, tgt, trig, opts), ValidationError);
}

TEST(Report, JsonRoundTrip) {
  const auto m = random_model(2, 4);
  const auto src = fixture::random_images(3, 1);
  const auto r = evaluate_binary(m, src, src, trigger::generate_trigger(4, 1), {2, PlacementMode::random, 3});
  EXPECT_EQ(report_from_json(to_json(r)), r);
  const auto slim = report_from_json(to_json(r, false));
  EXPECT_TRUE(slim.per_placement.empty());
  EXPECT_EQ(slim.patched_source_accuracy, r.patched_source_accuracy);
  EXPECT_EQ(parse_setting(to_string(Setting::multiclass_multi_source)), Setting::multiclass_multi_source);
}

TEST(Sweep, InjectionRateCallsInOrder) {
  std::vector<std::size_t> seen;
  const std::vector<std::size_t> counts{0, 10, 40};
  const auto out = injection_rate_sweep(counts, [&](std::size_t n) {
    seen.push_back(n);
    AttackReport r;
    r.patched_source_accuracy = 1.0 - static_cast<double>(n) / 100.0;
    return r;
  });
  EXPECT_EQ(seen, counts);
  ASSERT_EQ(out.size(), 3u);
  EXPECT_DOUBLE_EQ(out[2].report.patched_source_accuracy, 0.6);
}

TEST(Projection2D, AxesAndCoordinates) {
  Rng rng(3);
  const int d = 6;
  Eigen::VectorXd w = Eigen::VectorXd::Random(d);
  std::map<Group, Eigen::MatrixXd> f;
  f[Group::clean_target] = Eigen::MatrixXd::Random(5, d).array() + 2.0;
  f[Group::clean_source] = Eigen::MatrixXd::Random(4, d);
  f[Group::patched_source] = Eigen::MatrixXd::Random(3, d);
  const auto p = project_2d(f, w, 0.7);
  EXPECT_NEAR(p.w_hat.norm(), 1.0, 1e-12);
  EXPECT_NEAR(p.u_perp.norm(), 1.0, 1e-12);
  EXPECT_NEAR(p.w_hat.dot(p.u_perp), 0.0, 1e-12);
  EXPECT_FALSE(p.degenerate);
  EXPECT_NEAR(p.boundary_x, -0.7 / w.norm(), 1e-12);
  const Eigen::VectorXd u = f[Group::clean_target].colwise().mean().transpose() - f[Group::clean_source].colwise().mean().transpose();
  EXPECT_GT(p.u_perp.dot(u), 0.0);
  ASSERT_EQ(p.points.size(), 12u);
  // Points w.x + b > 0 lie right of the boundary.
  for (const auto& [g, m] : f)
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      const double logit = m.row(i).dot(w) + 0.7;
      bool found = false;
      for (const auto& pt : p.points)
        if (pt.group == g && std::abs(pt.x - m.row(i).dot(p.w_hat)) < 1e-12) {
          found = true;
          EXPECT_EQ(pt.x > p.boundary_x, logit > 0);
        }
      EXPECT_TRUE(found);
    }
  const std::string csv = projection_csv(p, "after");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "phase,x,y,group");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 13);
}

TEST(Projection2D, ParallelMeanDifferenceFallsBack) {
  Eigen::VectorXd w = Eigen::VectorXd::Zero(3);
  w[0] = 2.0;
  std::map<Group, Eigen::MatrixXd> f;
  Eigen::MatrixXd t(2, 3), s(2, 3);
  t << 1, 0, 0, 1, 4, 0;
  s << 0, 0, 0, 0, 4, 0;
  f[Group::clean_target] = t;
  f[Group::clean_source] = s;
  const auto p = project_2d(f, w);
  EXPECT_TRUE(p.degenerate);
  EXPECT_NEAR(p.u_perp.dot(p.w_hat), 0.0, 1e-12);
  EXPECT_NEAR(std::abs(p.u_perp[1]), 1.0, 1e-9);
  EXPECT_THROW(project_2d(f, Eigen::VectorXd::Zero(3)), ValidationError);
  EXPECT_THROW(project_2d(f, Eigen::VectorXd::Ones(4)), ValidationError);
}

TEST(Projection2D, ClassifierDirectionFromHead) {
  auto m = random_model(2, 2);
  const auto [w, b] = binary_classifier_direction(m);
  const auto imgs = fixture::random_images(4, 9);
  const Eigen::MatrixXd f = nnet::features(m, imgs, nnet::Layer::fc1).cast<double>();
  const Eigen::MatrixXd logits = nnet::predict(m, imgs).logits.cast<double>();
  for (Eigen::Index i = 0; i < 4; ++i)
    EXPECT_NEAR(f.row(i).dot(w) + b, logits(i, 1) - logits(i, 0), 1e-3 * (1 + std::abs(logits(i, 1))));
  EXPECT_THROW(binary_classifier_direction(random_model(3, 1)), ValidationError);
}
