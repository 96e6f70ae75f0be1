#include "htb/defense.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "htb/error.hpp"
#include "htb/io.hpp"

namespace htb::defense {

namespace {

constexpr int kSquarings = 4;

void power(const Eigen::MatrixXd& m, Eigen::VectorXd& v, double tol, int max_iter, TopDirection& out) {
  for (int it = 1; it <= max_iter; ++it) {
    Eigen::VectorXd next = m * v;
    const double n = next.norm();
    if (!(n > 0.0)) break;
    next /= n;
    if (next.dot(v) < 0.0) next = -next;
    const double change = (next - v).norm();
    v = std::move(next);
    out.iterations += 1;
    if (change <= tol) {
      out.converged = true;
      return;
    }
  }
}

}  // namespace

TopDirection top_singular_direction(const Eigen::MatrixXd& centered, double tol, int max_iter) {
  TopDirection out;
  const auto d = centered.cols();
  out.v = Eigen::VectorXd::Zero(d);
  if (d == 0) return out;
  Eigen::MatrixXd c = centered.transpose() * centered;
  const double scale = c.diagonal().maxCoeff();
  if (!(scale > 0.0)) return out;
  c /= scale;

  // Accelerated pass on C^(2^s), then a refinement pass on C itself.
  Eigen::MatrixXd cs = c;
  for (int s = 0; s < kSquarings; ++s) {
    cs = cs * cs;
    const double m = cs.cwiseAbs().maxCoeff();
    if (!(m > 0.0)) break;
    cs /= m;
  }
  Eigen::Index j;
  c.diagonal().maxCoeff(&j);
  Eigen::VectorXd v = c.col(j);
  if (!(v.norm() > 0.0)) return out;
  v.normalize();
  power(cs, v, tol, max_iter, out);
  out.converged = false;
  power(c, v, tol, max_iter, out);
  // Canonical sign so results never depend on the start vector.
  Eigen::Index k;
  v.cwiseAbs().maxCoeff(&k);
  if (v[k] < 0.0) v = -v;
  out.v = v;
  return out;
}

std::vector<double> spectral_scores(const Eigen::MatrixXd& features, bool* degenerate, int* iterations) {
  if (features.rows() < 2) throw ValidationError("spectral_scores needs at least two examples");
  if (!features.allFinite()) throw ValidationError("spectral_scores: non-finite features");
  const Eigen::MatrixXd x = features.rowwise() - features.colwise().mean();
  const TopDirection top = top_singular_direction(x);
  const bool deg = top.v.isZero(0.0);
  if (degenerate) *degenerate = deg;
  if (iterations) *iterations = top.iterations;
  std::vector<double> scores(static_cast<std::size_t>(features.rows()), 0.0);
  if (deg) return scores;
  const Eigen::VectorXd proj = x * top.v;
  for (Eigen::Index i = 0; i < proj.size(); ++i) scores[static_cast<std::size_t>(i)] = proj[i] * proj[i];
  return scores;
}

std::size_t flag_count(std::size_t n, double percentile) {
  if (!(percentile > 0.0 && percentile < 100.0)) throw ValidationError("percentile must lie in (0, 100)");
  // Small slack keeps exact products such as 15 * 900 / 100 from rounding up.
  const double raw = (100.0 - percentile) * static_cast<double>(n) / 100.0;
  return static_cast<std::size_t>(std::ceil(raw - 1e-9));
}

SpectralReport make_report(std::vector<double> scores, std::span<const int> poison_ids, double percentile) {
  SpectralReport r;
  r.threshold_percentile = percentile;
  r.n_examples = static_cast<int>(scores.size());
  const std::size_t k = flag_count(scores.size(), percentile);
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
  });
  order.resize(k);
  const std::set<int> poison(poison_ids.begin(), poison_ids.end());
  for (int id : poison)
    if (id < 0 || id >= r.n_examples) throw ValidationError("poison id out of range");
  for (int id : order) (poison.count(id) ? r.n_poison_flagged : r.n_clean_flagged) += 1;
  r.flagged = std::move(order);
  r.poison_ids.assign(poison.begin(), poison.end());
  r.scores = std::move(scores);
  return r;
}

SpectralReport run_defense(const Eigen::MatrixXd& features, std::span<const int> poison_ids, double percentile) {
  flag_count(0, percentile);
  bool deg = false;
  int iters = 0;
  auto scores = spectral_scores(features, &deg, &iters);
  SpectralReport r = make_report(std::move(scores), poison_ids, percentile);
  r.degenerate = deg;
  r.power_iterations = iters;
  return r;
}

SpectralReport run_defense(const nnet::ModelBundle& model, std::span<const ImageTensor> images,
                           std::span<const int> poison_ids, double percentile, nnet::Layer layer,
                           const nnet::ExecPolicy& exec) {
  flag_count(0, percentile);
  const Eigen::MatrixXd f = nnet::features(model, images, layer, exec).cast<double>();
  return run_defense(f, poison_ids, percentile);
}

std::pair<SpectralReport, SpectralReport> defense_comparison(const DefenseInput& hidden_trigger,
                                                             const DefenseInput& badnets, double percentile) {
  if (hidden_trigger.features.rows() != badnets.features.rows())
    throw ValidationError("defense comparison sets differ in size");
  if (hidden_trigger.poison_ids.size() != badnets.poison_ids.size())
    throw ValidationError("defense comparison sets differ in poison count");
  return {run_defense(hidden_trigger.features, hidden_trigger.poison_ids, percentile),
          run_defense(badnets.features, badnets.poison_ids, percentile)};
}

double poison_flag_rate(const SpectralReport& r) {
  return r.poison_ids.empty() ? 0.0 : static_cast<double>(r.n_poison_flagged) / static_cast<double>(r.poison_ids.size());
}

nlohmann::json to_json(const SpectralReport& r) {
  return {{"threshold_percentile", r.threshold_percentile},
          {"n_examples", r.n_examples},
          {"n_flagged", r.flagged.size()},
          {"n_poison", r.poison_ids.size()},
          {"n_poison_flagged", r.n_poison_flagged},
          {"n_clean_flagged", r.n_clean_flagged},
          {"poison_flag_rate", poison_flag_rate(r)},
          {"degenerate", r.degenerate},
          {"power_iterations", r.power_iterations},
          {"flagged", r.flagged},
          {"poison_ids", r.poison_ids},
          {"scores", r.scores}};
}

SpectralReport spectral_report_from_json(const nlohmann::json& j) {
  SpectralReport r;
  r.threshold_percentile = j.at("threshold_percentile").get<double>();
  r.n_examples = j.at("n_examples").get<int>();
  r.n_poison_flagged = j.at("n_poison_flagged").get<int>();
  r.n_clean_flagged = j.at("n_clean_flagged").get<int>();
  r.degenerate = j.at("degenerate").get<bool>();
  r.power_iterations = j.at("power_iterations").get<int>();
  r.flagged = j.at("flagged").get<std::vector<int>>();
  r.poison_ids = j.at("poison_ids").get<std::vector<int>>();
  r.scores = j.at("scores").get<std::vector<double>>();
  return r;
}

void write_scores_csv(const SpectralReport& r, const std::filesystem::path& path) {
  const std::set<int> poison(r.poison_ids.begin(), r.poison_ids.end());
  const std::set<int> flagged(r.flagged.begin(), r.flagged.end());
  std::ostringstream os;
  os.precision(12);
  os << "id,score,is_poison_ground_truth,flagged\n";
  for (std::size_t i = 0; i < r.scores.size(); ++i) {
    const int id = static_cast<int>(i);
    os << id << ',' << r.scores[i] << ',' << poison.count(id) << ',' << flagged.count(id) << '\n';
  }
  io::write_text(path, os.str());
}

}  // namespace htb::defense
