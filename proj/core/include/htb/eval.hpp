#pragma once

#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "htb/image.hpp"
#include "htb/nnet.hpp"
#include "htb/poison_types.hpp"
#include "htb/trigger.hpp"

namespace htb::eval {

enum class Setting { binary, multiclass_single_source, multiclass_multi_source };
std::string to_string(Setting s);
Setting parse_setting(const std::string& s);

struct PlacementOutcome {
  int image = 0;  // index into the evaluated (patched) image list
  int top = 0;
  int left = 0;
  int true_label = 0;
  int predicted = 0;

  friend bool operator==(const PlacementOutcome&, const PlacementOutcome&) = default;
};

struct AttackReport {
  Setting setting = Setting::binary;
  double clean_accuracy = 0.0;
  double patched_source_accuracy = 0.0;  // patched image still gets its own label
  double attack_success_rate = 0.0;      // patched image predicted as the target
  std::vector<PlacementOutcome> per_placement;
  int n_images = 0;      // distinct source images that were patched
  int n_placements = 0;  // placements per image
  int n_clean = 0;
  int target_label = 1;

  friend bool operator==(const AttackReport&, const AttackReport&) = default;
};

nlohmann::json to_json(const AttackReport& r, bool with_placements = true);
AttackReport report_from_json(const nlohmann::json& j);

struct EvalOptions {
  int n_placements = 10;
  PlacementMode placement_mode = PlacementMode::random;
  std::uint64_t seed = 0;

  friend bool operator==(const EvalOptions&, const EvalOptions&) = default;
};

// Binary head: source = label 0, target = label 1. Clean accuracy runs over both
// test sets; patched metrics over every source image times every placement.
// Placements are drawn serially from `opts.seed` before any inference.
AttackReport evaluate_binary(const nnet::ModelBundle& model, std::span<const ImageTensor> source_test,
                             std::span<const ImageTensor> target_test, const trigger::Trigger& trig,
                             const EvalOptions& opts, const nnet::ExecPolicy& exec = {});

enum class MultiMode { single_source, multi_source };
MultiMode parse_multi_mode(const std::string& s);

// `test_by_class[c]` holds the test images of class c, labeled c. Multi-source
// patches the same number of images from every non-target class.
AttackReport evaluate_multiclass(const nnet::ModelBundle& model,
                                 const std::vector<std::vector<ImageTensor>>& test_by_class,
                                 const trigger::Trigger& trig, MultiMode mode, int source_label,
                                 int target_label, const EvalOptions& opts,
                                 const nnet::ExecPolicy& exec = {});

// Both models are scored on one shared placement list.
std::pair<AttackReport, AttackReport> compare_badnets(const nnet::ModelBundle& ours,
                                                      const nnet::ModelBundle& badnets,
                                                      std::span<const ImageTensor> source_test,
                                                      std::span<const ImageTensor> target_test,
                                                      const trigger::Trigger& trig,
                                                      const EvalOptions& opts,
                                                      const nnet::ExecPolicy& exec = {});

struct SweepEntry {
  std::size_t n_poison = 0;
  AttackReport report;
};

// One full finetune + evaluate cycle per count, delegated to `run_one`.
std::vector<SweepEntry> injection_rate_sweep(std::span<const std::size_t> n_poison,
                                             const std::function<AttackReport(std::size_t)>& run_one);

enum class Group { clean_target, clean_source, patched_source, poisoned_target };
std::string to_string(Group g);

struct ProjectedPoint {
  double x = 0.0;
  double y = 0.0;
  Group group = Group::clean_target;
};

struct Projection2D {
  Eigen::VectorXd w_hat;   // unit classifier normal
  Eigen::VectorXd u_perp;  // unit, orthogonal to w_hat
  double boundary_x = 0.0; // decision boundary position along w_hat
  bool degenerate = false; // u was parallel to w; u_perp is the top-variance fallback
  std::vector<ProjectedPoint> points;
};

// x = f . w_hat, y = f . u_perp with u = mean(clean_target) - mean(clean_source).
// `bias` is the logit-difference bias, giving boundary_x = -bias / |w|.
// Throws ValidationError for a zero w.
Projection2D project_2d(const std::map<Group, Eigen::MatrixXd>& features, const Eigen::VectorXd& w,
                        double bias = 0.0);

// w = W[target] - W[source] and the matching bias from a binary fc2 head.
std::pair<Eigen::VectorXd, double> binary_classifier_direction(const nnet::ModelBundle& model);

void write_projection_csv(const Projection2D& p, const std::filesystem::path& path,
                          const std::string& phase = "");
std::string projection_csv(const Projection2D& p, const std::string& phase = "", bool header = true);

}  // namespace htb::eval
