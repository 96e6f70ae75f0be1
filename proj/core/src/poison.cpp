#include "htb/poison.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "htb/error.hpp"

namespace htb {

std::string to_string(PlacementMode m) { return m == PlacementMode::random ? "random" : "corner"; }
std::string to_string(StepMode m) { return m == StepMode::gd ? "gd" : "sign"; }
std::string to_string(AssignMode m) { return m == AssignMode::greedy ? "greedy" : "hungarian"; }

PlacementMode parse_placement_mode(const std::string& s) {
  if (s == "random") return PlacementMode::random;
  if (s == "corner") return PlacementMode::corner;
  throw ValidationError("unknown placement mode '" + s + "'");
}

StepMode parse_step_mode(const std::string& s) {
  if (s == "gd") return StepMode::gd;
  if (s == "sign") return StepMode::sign;
  throw ValidationError("unknown step mode '" + s + "'");
}

AssignMode parse_assign_mode(const std::string& s) {
  if (s == "greedy") return AssignMode::greedy;
  if (s == "hungarian") return AssignMode::hungarian;
  throw ValidationError("unknown assignment mode '" + s + "'");
}

void PoisonConfig::validate() const {
  if (!(epsilon >= 0.0 && epsilon <= 255.0)) throw ValidationError("epsilon must lie in [0, 255]");
  if (batch_size < 1) throw ValidationError("poison batch size K must be positive");
  if (iterations < 0) throw ValidationError("iterations must be non-negative");
  if (!(lr0 > 0.0)) throw ValidationError("lr0 must be positive");
  if (!(decay > 0.0 && decay <= 1.0)) throw ValidationError("decay must lie in (0, 1]");
  if (decay_every < 1) throw ValidationError("decay_every must be positive");
  if (n_generate < 1) throw ValidationError("n_generate must be positive");
  if (n_select < 0 || n_select > n_generate) throw ValidationError("n_select must lie in [0, n_generate]");
  if (batch_size > n_generate) throw ValidationError("K must not exceed n_generate");
  if (early_stop_loss < 0.0) throw ValidationError("early_stop_loss must be non-negative");
  nnet::parse_layer(embedding_layer);
}

double PoisonConfig::learning_rate(int iteration) const {
  return lr0 * std::pow(decay, iteration / decay_every);
}

}  // namespace htb

namespace htb::poison {

// -------------------------------------------------------------- assignment

bool Assignment::is_bijection() const {
  std::vector<int> sorted = mapping;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i)
    if (sorted[i] != static_cast<int>(i)) return false;
  return true;
}

double Assignment::cost(const Eigen::MatrixXd& dist) const {
  double c = 0.0;
  for (std::size_t k = 0; k < mapping.size(); ++k) c += dist(static_cast<Eigen::Index>(k), mapping[k]);
  return c;
}

namespace {

void check_square_finite(const Eigen::MatrixXd& dist) {
  if (dist.rows() != dist.cols()) throw ValidationError("assignment needs a square distance matrix");
  if (!dist.allFinite()) throw ValidationError("assignment distance matrix has non-finite entries");
}

}  // namespace

Assignment greedy_assign(const Eigen::MatrixXd& dist) {
  check_square_finite(dist);
  const auto n = dist.rows();
  Assignment a;
  a.mapping.assign(static_cast<std::size_t>(n), -1);
  std::vector<bool> used(static_cast<std::size_t>(n), false);
  for (Eigen::Index k = 0; k < n; ++k) {
    Eigen::Index best = -1;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (used[static_cast<std::size_t>(j)]) continue;
      if (best < 0 || dist(k, j) < dist(k, best)) best = j;
    }
    used[static_cast<std::size_t>(best)] = true;
    a.mapping[static_cast<std::size_t>(k)] = static_cast<int>(best);
  }
  return a;
}

Assignment hungarian_assign(const Eigen::MatrixXd& dist) {
  check_square_finite(dist);
  const int n = static_cast<int>(dist.rows());
  Assignment a;
  if (n == 0) return a;
  constexpr double inf = std::numeric_limits<double>::infinity();
  // 1-based potentials; column 0 is the virtual root of each augmenting search.
  std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0), v(u);
  std::vector<int> row_of(static_cast<std::size_t>(n) + 1, 0), way(row_of);
  for (int i = 1; i <= n; ++i) {
    row_of[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(n) + 1, inf);
    std::vector<bool> used(static_cast<std::size_t>(n) + 1, false);
    do {
      used[static_cast<std::size_t>(j0)] = true;
      const int i0 = row_of[static_cast<std::size_t>(j0)];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = dist(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(row_of[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (row_of[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      row_of[static_cast<std::size_t>(j0)] = row_of[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  a.mapping.assign(static_cast<std::size_t>(n), -1);
  for (int j = 1; j <= n; ++j) a.mapping[static_cast<std::size_t>(row_of[static_cast<std::size_t>(j)] - 1)] = j - 1;
  return a;
}

Assignment assign(const Eigen::MatrixXd& dist, AssignMode mode) {
  return mode == AssignMode::greedy ? greedy_assign(dist) : hungarian_assign(dist);
}

Eigen::MatrixXd pairwise_sq_dist(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.cols() != b.cols()) throw ValidationError("feature dimensions differ");
  Eigen::MatrixXd d(a.rows(), b.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.rows(); ++j) d(i, j) = (a.row(i) - b.row(j)).squaredNorm();
  return d;
}

// -------------------------------------------------------------- projection

void pgd_project_inplace(ImageTensor& z, const ImageTensor& t, double epsilon) {
  if (!z.same_shape(t)) throw SizeError("pgd_project: shape mismatch");
  const auto eps = static_cast<float>(epsilon);
  for (std::size_t i = 0; i < z.pixels.size(); ++i) {
    const float ti = t.pixels[i];
    float lo = ti - eps, hi = ti + eps;
    // Rounding in t +- eps may overshoot the ball by an ulp.
    while (static_cast<double>(hi) - static_cast<double>(ti) > epsilon) hi = std::nextafter(hi, ti);
    while (static_cast<double>(ti) - static_cast<double>(lo) > epsilon) lo = std::nextafter(lo, ti);
    float v = std::clamp(z.pixels[i], lo, hi);
    z.pixels[i] = std::clamp(v, 0.0f, 255.0f);
  }
}

ImageTensor pgd_project(const ImageTensor& z, const ImageTensor& t, double epsilon) {
  ImageTensor out = z;
  pgd_project_inplace(out, t, epsilon);
  return out;
}

double max_linf_deviation(std::span<const ImageTensor> z, std::span<const ImageTensor> t) {
  if (z.size() != t.size()) throw SizeError("max_linf_deviation: count mismatch");
  double m = 0.0;
  for (std::size_t k = 0; k < z.size(); ++k) {
    if (!z[k].same_shape(t[k])) throw SizeError("max_linf_deviation: shape mismatch");
    for (std::size_t i = 0; i < z[k].pixels.size(); ++i)
      m = std::max(m, std::abs(static_cast<double>(z[k].pixels[i]) - static_cast<double>(t[k].pixels[i])));
  }
  return m;
}

// ------------------------------------------------------------- generation

namespace {

// Steps are taken in unit-interval pixel coordinates (value / 255).
constexpr double kPixelScale = 255.0;

std::vector<ImageTensor> patch_sources(std::span<const ImageTensor> pool, std::span<const std::size_t> ids,
                                       const trigger::Trigger& trig, PlacementMode mode, Rng& rng) {
  std::vector<ImageTensor> out;
  out.reserve(ids.size());
  for (auto id : ids) {
    const auto& img = pool[id];
    const auto place = mode == PlacementMode::corner
                           ? trigger::corner_placement(dims_of(img), trig.patch_size())
                           : trigger::random_placement(dims_of(img), trig.patch_size(), rng);
    out.push_back(trigger::apply_trigger(img, trig, place));
  }
  return out;
}

struct GroupResult {
  std::vector<ImageTensor> poisons;
  std::vector<double> losses;
  std::vector<double> trace_sum;
};

class Sampler {
 public:
  Sampler(const nnet::FeatureExtractor& fx, std::span<const ImageTensor> pool, const trigger::Trigger& trig,
          PlacementMode mode, nnet::Layer layer)
      : fx_(fx), pool_(pool), trig_(trig), mode_(mode), layer_(layer) {
    // A corner trigger makes every patched source fixed; featurize the pool once.
    if (mode_ == PlacementMode::corner) {
      std::vector<std::size_t> all(pool.size());
      std::iota(all.begin(), all.end(), std::size_t{0});
      Rng unused(0);
      const auto patched = patch_sources(pool_, all, trig_, mode_, unused);
      cache_ = fx_.features(patched, layer_).cast<double>();
    }
  }

  Eigen::MatrixXd draw(int k, Rng& rng) const {
    std::vector<std::size_t> ids(static_cast<std::size_t>(k));
    for (auto& id : ids) id = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(pool_.size()) - 1));
    if (mode_ == PlacementMode::corner) {
      Eigen::MatrixXd f(k, cache_.cols());
      for (int i = 0; i < k; ++i) f.row(i) = cache_.row(static_cast<Eigen::Index>(ids[static_cast<std::size_t>(i)]));
      return f;
    }
    const auto patched = patch_sources(pool_, ids, trig_, mode_, rng);
    return fx_.features(patched, layer_).cast<double>();
  }

 private:
  const nnet::FeatureExtractor& fx_;
  std::span<const ImageTensor> pool_;
  const trigger::Trigger& trig_;
  PlacementMode mode_;
  nnet::Layer layer_;
  Eigen::MatrixXd cache_;
};

GroupResult optimize_group(const nnet::FeatureExtractor& fx, const Sampler& sampler,
                           std::vector<ImageTensor> anchors, const PoisonConfig& cfg, nnet::Layer layer,
                           Rng& rng) {
  const int k = static_cast<int>(anchors.size());
  GroupResult res;
  res.poisons = anchors;
  for (int it = 0; it < cfg.iterations; ++it) {
    const double lr = cfg.learning_rate(it);
    const Eigen::MatrixXd fs = sampler.draw(k, rng);
    const auto loss_fn = [&](const Eigen::MatrixXd& fz, Eigen::MatrixXd& grad) {
      const Assignment a = assign(pairwise_sq_dist(fz, fs), cfg.assign_mode);
      double total = 0.0;
      for (int i = 0; i < k; ++i) {
        const auto diff = fz.row(i) - fs.row(a.mapping[static_cast<std::size_t>(i)]);
        total += diff.squaredNorm();
        grad.row(i) = 2.0 * diff;
      }
      return total;
    };
    nnet::GradientResult g;
    try {
      g = fx.input_gradient(loss_fn, res.poisons, layer);
    } catch (const NumericError&) {
      throw NumericError("poison loss became non-finite", it);
    }
    res.trace_sum.push_back(g.loss);
    for (int i = 0; i < k; ++i) {
      auto& z = res.poisons[static_cast<std::size_t>(i)].pixels;
      const auto& gz = g.gradient[static_cast<std::size_t>(i)].pixels;
      for (std::size_t p = 0; p < z.size(); ++p) {
        const double step = cfg.step_mode == StepMode::gd
                                ? lr * kPixelScale * kPixelScale * gz[p]
                                : lr * kPixelScale * ((gz[p] > 0.0f) - (gz[p] < 0.0f));
        z[p] = static_cast<float>(z[p] - step);
        if (!std::isfinite(z[p])) throw NumericError("poison pixel became non-finite", it);
      }
      pgd_project_inplace(res.poisons[static_cast<std::size_t>(i)], anchors[static_cast<std::size_t>(i)], cfg.epsilon);
    }
    if (cfg.early_stop_loss > 0.0 && g.loss / k < cfg.early_stop_loss) break;
  }
  // Final losses against a fresh draw, paired the same way as during optimization.
  const Eigen::MatrixXd fs = sampler.draw(k, rng);
  const Eigen::MatrixXd fz = fx.features(res.poisons, layer).cast<double>();
  const Eigen::MatrixXd d = pairwise_sq_dist(fz, fs);
  const Assignment a = assign(d, cfg.assign_mode);
  for (int i = 0; i < k; ++i) res.losses.push_back(d(i, a.mapping[static_cast<std::size_t>(i)]));
  if (!std::all_of(res.losses.begin(), res.losses.end(), [](double v) { return std::isfinite(v); }))
    throw NumericError("final poison loss is non-finite", cfg.iterations);
  return res;
}

}  // namespace

PoisonBatch generate_poisons(const nnet::ModelBundle& model, std::span<const ImageTensor> source_pool,
                             std::span<const ImageTensor> target_pool, const trigger::Trigger& trig,
                             const PoisonConfig& config, int source_category, int target_category) {
  config.validate();
  if (source_pool.empty()) throw ValidationError("generate_poisons: empty source pool");
  if (target_pool.empty()) throw ValidationError("generate_poisons: empty target pool");
  const nnet::Layer layer = nnet::parse_layer(config.embedding_layer);
  Rng rng(config.seed);

  // Anchors: distinct target images when the pool allows it.
  const auto n = static_cast<std::size_t>(config.n_generate);
  std::vector<std::size_t> anchor_ids;
  if (n <= target_pool.size()) {
    std::vector<std::size_t> perm(target_pool.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(perm.begin(), perm.end());
    anchor_ids.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n));
  } else {
    for (std::size_t i = 0; i < n; ++i)
      anchor_ids.push_back(static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(target_pool.size()) - 1)));
  }

  const nnet::FeatureExtractor fx(model);
  const Sampler sampler(fx, source_pool, trig, config.placement_mode, layer);

  PoisonBatch batch;
  batch.config = config;
  batch.source_category = source_category;
  batch.target_category = target_category;
  batch.trigger_id = trig.trigger_id;
  for (int it = 0; it < config.iterations; ++it) batch.lr_trace.push_back(config.learning_rate(it));
  std::vector<double> trace_sum(static_cast<std::size_t>(config.iterations), 0.0);
  std::size_t trace_len = 0;

  for (std::size_t lo = 0; lo < n; lo += static_cast<std::size_t>(config.batch_size)) {
    const std::size_t hi = std::min(n, lo + static_cast<std::size_t>(config.batch_size));
    std::vector<ImageTensor> anchors;
    for (std::size_t i = lo; i < hi; ++i) {
      anchors.push_back(target_pool[anchor_ids[i]]);
      anchors.back().label = target_category;
    }
    GroupResult g = optimize_group(fx, sampler, anchors, config, layer, rng);
    trace_len = std::max(trace_len, g.trace_sum.size());
    // An early-stopped group contributes its last loss to the remaining steps.
    for (std::size_t it = 0; it < trace_sum.size(); ++it)
      if (!g.trace_sum.empty()) trace_sum[it] += g.trace_sum[std::min(it, g.trace_sum.size() - 1)];
    for (std::size_t i = 0; i < anchors.size(); ++i) {
      batch.poisons.push_back(std::move(g.poisons[i]));
      batch.anchors.push_back(std::move(anchors[i]));
      batch.losses.push_back(g.losses[i]);
      batch.anchor_ids.push_back(static_cast<int>(anchor_ids[lo + i]));
    }
  }
  trace_sum.resize(trace_len);
  batch.lr_trace.resize(trace_len);
  batch.loss_trace_sum = trace_sum;
  for (double s : trace_sum) batch.loss_trace.push_back(s / static_cast<double>(n));
  return batch;
}

PoisonBatch select_lowest_loss(const PoisonBatch& pool, std::size_t n_select) {
  if (n_select > pool.size())
    throw ValidationError("cannot select " + std::to_string(n_select) + " of " + std::to_string(pool.size()) + " poisons");
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return pool.losses[a] < pool.losses[b]; });
  order.resize(n_select);
  PoisonBatch out;
  out.config = pool.config;
  out.config.n_select = static_cast<int>(n_select);
  out.source_category = pool.source_category;
  out.target_category = pool.target_category;
  out.trigger_id = pool.trigger_id;
  out.loss_trace = pool.loss_trace;
  out.loss_trace_sum = pool.loss_trace_sum;
  out.lr_trace = pool.lr_trace;
  for (auto i : order) {
    out.poisons.push_back(pool.poisons[i]);
    out.anchors.push_back(pool.anchors[i]);
    out.losses.push_back(pool.losses[i]);
    if (i < pool.anchor_ids.size()) out.anchor_ids.push_back(pool.anchor_ids[i]);
  }
  return out;
}

std::vector<ImageTensor> generate_badnets_poisons(std::span<const ImageTensor> source_pool,
                                                  const trigger::Trigger& trig, std::size_t n,
                                                  PlacementMode mode, int target_label, Rng& rng) {
  if (n > source_pool.size())
    throw ValidationError("BadNets needs " + std::to_string(n) + " sources, have " + std::to_string(source_pool.size()));
  std::vector<std::size_t> perm(source_pool.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  rng.shuffle(perm.begin(), perm.end());
  perm.resize(n);
  auto out = patch_sources(source_pool, perm, trig, mode, rng);
  for (auto& img : out) img.label = target_label;
  return out;
}

CollisionStats measure_collision(const nnet::ModelBundle& model, const PoisonBatch& batch,
                                 std::span<const ImageTensor> patched_sources, nnet::Layer layer) {
  if (patched_sources.size() != batch.size())
    throw ValidationError("measure_collision needs one patched source per poison");
  const nnet::FeatureExtractor fx(model);
  const Eigen::MatrixXd fz = fx.features(batch.poisons, layer).cast<double>();
  const Eigen::MatrixXd ft = fx.features(batch.anchors, layer).cast<double>();
  const Eigen::MatrixXd fs = fx.features(patched_sources, layer).cast<double>();
  const Eigen::MatrixXd dz = pairwise_sq_dist(fz, fs);
  CollisionStats s;
  s.assignment = greedy_assign(dz);
  const auto k = static_cast<double>(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const int j = s.assignment.mapping[i];
    s.poison_to_source += dz(static_cast<Eigen::Index>(i), j) / k;
    s.anchor_to_source += (ft.row(static_cast<Eigen::Index>(i)) - fs.row(j)).squaredNorm() / k;
  }
  return s;
}

}  // namespace htb::poison
