#include "htb/eval.hpp"

#include <cmath>
#include <sstream>

#include "htb/error.hpp"
#include "htb/io.hpp"
#include "htb/rng.hpp"

namespace htb::eval {

std::string to_string(Setting s) {
  switch (s) {
    case Setting::binary: return "binary";
    case Setting::multiclass_single_source: return "multiclass_single_source";
    case Setting::multiclass_multi_source: return "multiclass_multi_source";
  }
  return "?";
}

Setting parse_setting(const std::string& s) {
  if (s == "binary") return Setting::binary;
  if (s == "multiclass_single_source") return Setting::multiclass_single_source;
  if (s == "multiclass_multi_source") return Setting::multiclass_multi_source;
  throw ValidationError("unknown evaluation setting '" + s + "'");
}

MultiMode parse_multi_mode(const std::string& s) {
  if (s == "single_source" || s == "single") return MultiMode::single_source;
  if (s == "multi_source" || s == "multi") return MultiMode::multi_source;
  throw ValidationError("unknown multiclass mode '" + s + "'");
}

std::string to_string(Group g) {
  switch (g) {
    case Group::clean_target: return "clean_target";
    case Group::clean_source: return "clean_source";
    case Group::patched_source: return "patched_source";
    case Group::poisoned_target: return "poisoned_target";
  }
  return "?";
}

nlohmann::json to_json(const AttackReport& r, bool with_placements) {
  nlohmann::json j = {{"setting", to_string(r.setting)},
                      {"clean_accuracy", r.clean_accuracy},
                      {"patched_source_accuracy", r.patched_source_accuracy},
                      {"attack_success_rate", r.attack_success_rate},
                      {"n_images", r.n_images},
                      {"n_placements", r.n_placements},
                      {"n_clean", r.n_clean},
                      {"target_label", r.target_label}};
  if (with_placements) {
    auto& arr = j["per_placement"] = nlohmann::json::array();
    for (const auto& p : r.per_placement)
      arr.push_back({{"image", p.image}, {"top", p.top}, {"left", p.left}, {"true_label", p.true_label},
                     {"predicted", p.predicted}});
  }
  return j;
}

AttackReport report_from_json(const nlohmann::json& j) {
  AttackReport r;
  r.setting = parse_setting(j.at("setting").get<std::string>());
  r.clean_accuracy = j.at("clean_accuracy").get<double>();
  r.patched_source_accuracy = j.at("patched_source_accuracy").get<double>();
  r.attack_success_rate = j.at("attack_success_rate").get<double>();
  r.n_images = j.at("n_images").get<int>();
  r.n_placements = j.at("n_placements").get<int>();
  r.n_clean = j.value("n_clean", 0);
  r.target_label = j.value("target_label", 1);
  if (j.contains("per_placement"))
    for (const auto& p : j["per_placement"])
      r.per_placement.push_back({p.at("image").get<int>(), p.at("top").get<int>(), p.at("left").get<int>(),
                                 p.at("true_label").get<int>(), p.at("predicted").get<int>()});
  return r;
}

namespace {

struct Patched {
  std::vector<ImageTensor> images;
  std::vector<PlacementOutcome> outcomes;
};

Patched patch_all(std::span<const ImageTensor> images, std::span<const int> labels, const trigger::Trigger& trig,
                  const EvalOptions& opts) {
  if (opts.n_placements < 1) throw ValidationError("n_placements must be positive");
  Rng rng(opts.seed);
  Patched p;
  for (std::size_t i = 0; i < images.size(); ++i)
    for (int k = 0; k < opts.n_placements; ++k) {
      const auto place = opts.placement_mode == PlacementMode::corner
                             ? trigger::corner_placement(dims_of(images[i]), trig.patch_size())
                             : trigger::random_placement(dims_of(images[i]), trig.patch_size(), rng);
      p.outcomes.push_back({static_cast<int>(i), place.top, place.left, labels[i], -1});
      p.images.push_back(trigger::apply_trigger(images[i], trig, place));
    }
  return p;
}

double fraction(std::size_t hits, std::size_t total) {
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

void score_patched(const nnet::ModelBundle& model, Patched& p, AttackReport& r, const nnet::ExecPolicy& exec) {
  const auto pred = nnet::predict(model, p.images, exec);
  std::size_t own = 0, target = 0;
  for (std::size_t i = 0; i < p.outcomes.size(); ++i) {
    auto& o = p.outcomes[i];
    o.predicted = pred.labels[i];
    own += o.predicted == o.true_label;
    target += o.predicted == r.target_label;
  }
  r.patched_source_accuracy = fraction(own, p.outcomes.size());
  r.attack_success_rate = fraction(target, p.outcomes.size());
  r.per_placement = std::move(p.outcomes);
}

}  // namespace

AttackReport evaluate_binary(const nnet::ModelBundle& model, std::span<const ImageTensor> source_test,
                             std::span<const ImageTensor> target_test, const trigger::Trigger& trig,
                             const EvalOptions& opts, const nnet::ExecPolicy& exec) {
  if (source_test.empty() || target_test.empty()) throw ValidationError("evaluate_binary: empty test set");
  if (model.arch.num_classes != 2) throw ValidationError("evaluate_binary needs a 2-class model");
  AttackReport r;
  r.setting = Setting::binary;
  r.target_label = 1;

  std::vector<ImageTensor> clean(source_test.begin(), source_test.end());
  for (auto& img : clean) img.label = 0;
  for (const auto& img : target_test) {
    clean.push_back(img);
    clean.back().label = 1;
  }
  const auto pred = nnet::predict(model, clean, exec);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < clean.size(); ++i) correct += pred.labels[i] == clean[i].label;
  r.clean_accuracy = fraction(correct, clean.size());
  r.n_clean = static_cast<int>(clean.size());

  const std::vector<int> labels(source_test.size(), 0);
  Patched p = patch_all(source_test, labels, trig, opts);
  r.n_images = static_cast<int>(source_test.size());
  r.n_placements = opts.n_placements;
  score_patched(model, p, r, exec);
  return r;
}

AttackReport evaluate_multiclass(const nnet::ModelBundle& model,
                                 const std::vector<std::vector<ImageTensor>>& test_by_class,
                                 const trigger::Trigger& trig, MultiMode mode, int source_label,
                                 int target_label, const EvalOptions& opts, const nnet::ExecPolicy& exec) {
  const int n_classes = static_cast<int>(test_by_class.size());
  if (n_classes != model.arch.num_classes) throw ValidationError("test classes do not match the model head");
  if (target_label < 0 || target_label >= n_classes) throw ValidationError("target label out of range");
  if (mode == MultiMode::single_source && (source_label < 0 || source_label >= n_classes || source_label == target_label))
    throw ValidationError("invalid source label");

  AttackReport r;
  r.setting = mode == MultiMode::single_source ? Setting::multiclass_single_source : Setting::multiclass_multi_source;
  r.target_label = target_label;

  std::vector<ImageTensor> clean;
  for (int c = 0; c < n_classes; ++c)
    for (const auto& img : test_by_class[static_cast<std::size_t>(c)]) {
      clean.push_back(img);
      clean.back().label = c;
    }
  if (clean.empty()) throw ValidationError("evaluate_multiclass: empty test set");
  const auto pred = nnet::predict(model, clean, exec);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < clean.size(); ++i) correct += pred.labels[i] == clean[i].label;
  r.clean_accuracy = fraction(correct, clean.size());
  r.n_clean = static_cast<int>(clean.size());

  std::vector<ImageTensor> sources;
  std::vector<int> labels;
  if (mode == MultiMode::single_source) {
    for (const auto& img : test_by_class[static_cast<std::size_t>(source_label)]) {
      sources.push_back(img);
      labels.push_back(source_label);
    }
  } else {
    std::size_t per_class = SIZE_MAX;
    for (int c = 0; c < n_classes; ++c)
      if (c != target_label) per_class = std::min(per_class, test_by_class[static_cast<std::size_t>(c)].size());
    for (int c = 0; c < n_classes; ++c) {
      if (c == target_label) continue;
      for (std::size_t i = 0; i < per_class; ++i) {
        sources.push_back(test_by_class[static_cast<std::size_t>(c)][i]);
        labels.push_back(c);
      }
    }
  }
  if (sources.empty()) throw ValidationError("evaluate_multiclass: no source images to patch");
  Patched p = patch_all(sources, labels, trig, opts);
  r.n_images = static_cast<int>(sources.size());
  r.n_placements = opts.n_placements;
  score_patched(model, p, r, exec);
  return r;
}

std::pair<AttackReport, AttackReport> compare_badnets(const nnet::ModelBundle& ours,
                                                      const nnet::ModelBundle& badnets,
                                                      std::span<const ImageTensor> source_test,
                                                      std::span<const ImageTensor> target_test,
                                                      const trigger::Trigger& trig, const EvalOptions& opts,
                                                      const nnet::ExecPolicy& exec) {
  if (!(ours.arch == badnets.arch)) throw ValidationError("compared models have different architectures");
  auto a = evaluate_binary(ours, source_test, target_test, trig, opts, exec);
  auto b = evaluate_binary(badnets, source_test, target_test, trig, opts, exec);
  return {std::move(a), std::move(b)};
}

std::vector<SweepEntry> injection_rate_sweep(std::span<const std::size_t> n_poison,
                                             const std::function<AttackReport(std::size_t)>& run_one) {
  std::vector<SweepEntry> out;
  for (auto n : n_poison) out.push_back({n, run_one(n)});
  return out;
}

std::pair<Eigen::VectorXd, double> binary_classifier_direction(const nnet::ModelBundle& model) {
  if (model.arch.num_classes != 2) throw ValidationError("projection needs a binary classifier");
  const auto& p = model.layer(nnet::Layer::fc2);
  const int d = model.arch.fc_width;
  Eigen::VectorXd w(d);
  for (int i = 0; i < d; ++i)
    w[i] = static_cast<double>(p.weight[static_cast<std::size_t>(d + i)]) - p.weight[static_cast<std::size_t>(i)];
  return {w, static_cast<double>(p.bias[1]) - p.bias[0]};
}

namespace {

Eigen::VectorXd top_variance_orthogonal(const std::map<Group, Eigen::MatrixXd>& features,
                                        const Eigen::VectorXd& w_hat) {
  Eigen::Index rows = 0;
  for (const auto& [g, f] : features) rows += f.rows();
  Eigen::MatrixXd all(rows, w_hat.size());
  Eigen::Index r = 0;
  for (const auto& [g, f] : features) {
    all.middleRows(r, f.rows()) = f;
    r += f.rows();
  }
  Eigen::MatrixXd c = all.rowwise() - all.colwise().mean();
  c -= (c * w_hat) * w_hat.transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(c.transpose() * c);
  Eigen::VectorXd v = es.eigenvectors().col(w_hat.size() - 1);
  v -= v.dot(w_hat) * w_hat;
  if (v.norm() < 1e-12) {
    // No spread at all: any unit vector orthogonal to w.
    Eigen::Index i;
    w_hat.cwiseAbs().minCoeff(&i);
    v = Eigen::VectorXd::Unit(w_hat.size(), i);
    v -= v.dot(w_hat) * w_hat;
  }
  return v.normalized();
}

}  // namespace

Projection2D project_2d(const std::map<Group, Eigen::MatrixXd>& features, const Eigen::VectorXd& w, double bias) {
  const double wn = w.norm();
  if (!(wn > 0.0) || !std::isfinite(wn)) throw ValidationError("degenerate classifier: zero weight vector");
  for (const auto& [g, f] : features)
    if (f.cols() != w.size()) throw ValidationError("feature dimension does not match the classifier");

  Projection2D p;
  p.w_hat = w / wn;
  p.boundary_x = -bias / wn;

  const auto ct = features.find(Group::clean_target);
  const auto cs = features.find(Group::clean_source);
  Eigen::VectorXd u_perp = Eigen::VectorXd::Zero(w.size());
  if (ct != features.end() && cs != features.end() && ct->second.rows() > 0 && cs->second.rows() > 0) {
    const Eigen::VectorXd u = ct->second.colwise().mean().transpose() - cs->second.colwise().mean().transpose();
    u_perp = u - u.dot(p.w_hat) * p.w_hat;
    if (u_perp.norm() <= 1e-9 * std::max(1.0, u.norm())) u_perp.setZero();
  }
  if (u_perp.isZero(0.0)) {
    p.degenerate = true;
    p.u_perp = top_variance_orthogonal(features, p.w_hat);
  } else {
    p.u_perp = u_perp.normalized();
    // One Gram-Schmidt pass again to pin orthogonality at rounding level.
    p.u_perp -= p.u_perp.dot(p.w_hat) * p.w_hat;
    p.u_perp.normalize();
  }

  for (const auto& [g, f] : features) {
    const Eigen::VectorXd xs = f * p.w_hat;
    const Eigen::VectorXd ys = f * p.u_perp;
    for (Eigen::Index i = 0; i < f.rows(); ++i) p.points.push_back({xs[i], ys[i], g});
  }
  return p;
}

std::string projection_csv(const Projection2D& p, const std::string& phase, bool header) {
  std::ostringstream os;
  os.precision(9);
  if (header) os << (phase.empty() ? "x,y,group\n" : "phase,x,y,group\n");
  for (const auto& pt : p.points) {
    if (!phase.empty()) os << phase << ',';
    os << pt.x << ',' << pt.y << ',' << to_string(pt.group) << '\n';
  }
  return os.str();
}

void write_projection_csv(const Projection2D& p, const std::filesystem::path& path, const std::string& phase) {
  io::write_text(path, projection_csv(p, phase));
}

}  // namespace htb::eval
