#pragma once

#include <span>
#include <vector>

#include <Eigen/Dense>

#include "htb/image.hpp"
#include "htb/nnet.hpp"
#include "htb/poison_types.hpp"
#include "htb/rng.hpp"
#include "htb/trigger.hpp"

namespace htb::poison {

// One-to-one pairing of poisons (rows) with patched sources (columns):
// row k is paired with column mapping[k].
struct Assignment {
  std::vector<int> mapping;

  bool is_bijection() const;
  double cost(const Eigen::MatrixXd& dist) const;
};

// Walks rows in index order, giving each the nearest still-unused column
// (ties to the smaller column). Not optimal in general.
Assignment greedy_assign(const Eigen::MatrixXd& dist);

// Minimum-cost bijection (shortest augmenting paths with potentials, O(K^3)).
Assignment hungarian_assign(const Eigen::MatrixXd& dist);

Assignment assign(const Eigen::MatrixXd& dist, AssignMode mode);

// Squared Euclidean distances between the rows of a and b.
Eigen::MatrixXd pairwise_sq_dist(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

// clamp(z, t - eps, t + eps), then clamp to [0, 255]. The result satisfies
// |z - t| <= eps when the difference is evaluated exactly.
ImageTensor pgd_project(const ImageTensor& z, const ImageTensor& t, double epsilon);
void pgd_project_inplace(ImageTensor& z, const ImageTensor& t, double epsilon);

// Largest |z - t| over all pixels of all pairs.
double max_linf_deviation(std::span<const ImageTensor> z, std::span<const ImageTensor> t);

// Runs the joint optimization over groups of `batch_size` poisons until
// `n_generate` candidates exist. Per group and iteration: draw K source images
// with replacement, paste the trigger, pair them with the current poisons in
// feature space, take one gradient step on the summed squared feature distance
// and project back into the eps-ball around the anchors.
//
// Anchors are distinct target images whenever the pool is large enough.
// Throws ValidationError on empty pools and NumericError on non-finite losses.
PoisonBatch generate_poisons(const nnet::ModelBundle& model, std::span<const ImageTensor> source_pool,
                             std::span<const ImageTensor> target_pool, const trigger::Trigger& trig,
                             const PoisonConfig& config, int source_category, int target_category);

// The n candidates with the smallest final loss, ties to the smaller index.
PoisonBatch select_lowest_loss(const PoisonBatch& pool, std::size_t n_select);

// Patched source images relabeled as the target (explicit-trigger baseline).
// Sources are drawn without replacement.
std::vector<ImageTensor> generate_badnets_poisons(std::span<const ImageTensor> source_pool,
                                                  const trigger::Trigger& trig, std::size_t n,
                                                  PlacementMode mode, int target_label, Rng& rng);

struct CollisionStats {
  double poison_to_source = 0.0;  // mean ||f(z_k) - f(s_a(k))||^2
  double anchor_to_source = 0.0;  // mean ||f(t_k) - f(s_a(k))||^2, same pairing
  Assignment assignment;
};

// Pairs the poisons with `patched_sources` (greedy, in feature space) and
// compares them with their anchors against the same partners.
CollisionStats measure_collision(const nnet::ModelBundle& model, const PoisonBatch& batch,
                                 std::span<const ImageTensor> patched_sources, nnet::Layer layer);

}  // namespace htb::poison
