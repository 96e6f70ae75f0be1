#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "htb/image.hpp"
#include "htb/nnet.hpp"

namespace htb::defense {

struct SpectralReport {
  std::vector<double> scores;
  double threshold_percentile = 85.0;
  std::vector<int> flagged;  // highest score first
  std::vector<int> poison_ids;
  int n_poison_flagged = 0;
  int n_clean_flagged = 0;
  int n_examples = 0;
  bool degenerate = false;  // centered features were all zero
  int power_iterations = 0;

  friend bool operator==(const SpectralReport&, const SpectralReport&) = default;
};

struct TopDirection {
  Eigen::VectorXd v;  // unit; zero when the input has rank 0
  int iterations = 0;
  bool converged = false;
};

// Top eigenvector of the covariance C = X^T X of centered rows X, by power
// iteration (stop when |v_t - v_{t-1}| <= tol after sign alignment). C is
// squared a few times first so small spectral gaps still converge in budget.
TopDirection top_singular_direction(const Eigen::MatrixXd& centered, double tol = 1e-9, int max_iter = 1000);

// ((f_i - mu) . v)^2 per row. Throws ValidationError for N < 2 or non-finite input.
std::vector<double> spectral_scores(const Eigen::MatrixXd& features, bool* degenerate = nullptr,
                                    int* iterations = nullptr);

// ceil((1 - percentile / 100) * n).
std::size_t flag_count(std::size_t n, double percentile);

// Flags the top flag_count() scores (ties to the smaller id) and counts the
// ground-truth poisons among them.
SpectralReport make_report(std::vector<double> scores, std::span<const int> poison_ids, double percentile);

SpectralReport run_defense(const Eigen::MatrixXd& features, std::span<const int> poison_ids, double percentile);

// Features of `images` at `layer` of `model`, then run_defense.
SpectralReport run_defense(const nnet::ModelBundle& model, std::span<const ImageTensor> images,
                           std::span<const int> poison_ids, double percentile, nnet::Layer layer,
                           const nnet::ExecPolicy& exec = {});

struct DefenseInput {
  Eigen::MatrixXd features;
  std::vector<int> poison_ids;
};

// Throws ValidationError when the sets differ in size or poison count.
std::pair<SpectralReport, SpectralReport> defense_comparison(const DefenseInput& hidden_trigger,
                                                             const DefenseInput& badnets, double percentile);

double poison_flag_rate(const SpectralReport& r);

nlohmann::json to_json(const SpectralReport& r);
SpectralReport spectral_report_from_json(const nlohmann::json& j);
// id,score,is_poison_ground_truth,flagged
void write_scores_csv(const SpectralReport& r, const std::filesystem::path& path);

}  // namespace htb::defense
