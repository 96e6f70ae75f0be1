#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "htb/image.hpp"

namespace htb {

enum class PlacementMode { random, corner };
enum class StepMode { gd, sign };
enum class AssignMode { greedy, hungarian };

std::string to_string(PlacementMode m);
std::string to_string(StepMode m);
std::string to_string(AssignMode m);
PlacementMode parse_placement_mode(const std::string& s);
StepMode parse_step_mode(const std::string& s);
AssignMode parse_assign_mode(const std::string& s);

struct PoisonConfig {
  double epsilon = 16.0;  // l-inf budget, 8-bit intensity units
  int batch_size = 100;   // K, poisons optimized jointly
  int iterations = 5000;
  double lr0 = 0.01;  // step size in unit-interval pixel coordinates
  double decay = 0.95;
  int decay_every = 2000;
  std::string embedding_layer = "fc1";
  PlacementMode placement_mode = PlacementMode::random;
  int n_generate = 400;
  int n_select = 100;
  StepMode step_mode = StepMode::gd;
  AssignMode assign_mode = AssignMode::greedy;
  double early_stop_loss = 0.0;  // mean-loss threshold; 0 disables
  std::uint64_t seed = 0;

  // Throws ValidationError.
  void validate() const;
  double learning_rate(int iteration) const;

  friend bool operator==(const PoisonConfig&, const PoisonConfig&) = default;
};

struct PoisonBatch {
  std::vector<ImageTensor> poisons;  // z_k, labeled with the target category
  std::vector<ImageTensor> anchors;  // t_k
  std::vector<double> losses;        // final squared feature distance per poison
  std::vector<double> loss_trace;      // mean over K, per iteration
  std::vector<double> loss_trace_sum;  // sum over K, per iteration
  std::vector<double> lr_trace;
  std::vector<int> anchor_ids;  // index of t_k within the target pool
  PoisonConfig config;
  int source_category = -1;
  int target_category = -1;
  int trigger_id = -1;

  std::size_t size() const noexcept { return poisons.size(); }
  friend bool operator==(const PoisonBatch&, const PoisonBatch&) = default;
};

}  // namespace htb
