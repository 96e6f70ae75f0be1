#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "htb/data.hpp"
#include "htb/defense.hpp"
#include "htb/eval.hpp"
#include "htb/nnet.hpp"
#include "htb/poison_types.hpp"

namespace htb::experiment {

struct DatasetSpec {
  std::string kind = "synthetic";  // synthetic | cifar
  std::filesystem::path cifar_dir;
  int num_classes = 10;
  int per_class = 500;
  std::uint64_t seed = 7;  // image synthesis and split shuffles

  friend bool operator==(const DatasetSpec&, const DatasetSpec&) = default;
};

struct DefenseSpec {
  bool enabled = true;
  double percentile = 85.0;
  std::string layer;  // empty: the poison embedding layer

  friend bool operator==(const DefenseSpec&, const DefenseSpec&) = default;
};

struct ExperimentConfig {
  DatasetSpec dataset;
  data::SplitSizes splits{1500, 1500, 1000};
  nnet::Architecture arch;
  nnet::TrainConfig pretrain;
  std::filesystem::path pretrain_cache;  // directory of reusable pretrained checkpoints
  data::PairSpec pair{2, 5, 0, 0};
  int patch_size = 8;
  PoisonConfig poison;
  nnet::FinetuneConfig finetune;
  eval::EvalOptions eval;
  DefenseSpec defense;
  bool badnets = false;  // also train and score the explicit-trigger baseline
  std::uint64_t master_seed = 0;
  std::filesystem::path output_dir = "htb_out";
  int threads = 1;

  // Throws ValidationError; called before any compute.
  void validate() const;
  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

// Field-for-field defaults of the CIFAR-10 protocol (800 poisons, eps 16,
// 8x8 corner trigger, 10k iterations).
ExperimentConfig cifar_protocol();

// Scaled-down synthetic-data profile that runs on one CPU core in minutes:
// 10 classes x 500 images, splits 150/150/100, conv widths (16, 48, 96, 64),
// 80 poisons, 500 iterations.
ExperimentConfig desk_profile();

// Ordered `section.key=value` lines.
std::vector<std::pair<std::string, std::string>> to_key_values(const ExperimentConfig& c);
std::string serialize(const ExperimentConfig& c);

// '#' starts a comment; blank lines are ignored. Unknown keys, duplicate keys
// and malformed values raise ValidationError. Keys missing from the text keep
// the values already in `base`.
ExperimentConfig parse(const std::string& text, const ExperimentConfig& base = {});
ExperimentConfig load_config(const std::filesystem::path& path, const ExperimentConfig& base = {});
void apply(ExperimentConfig& c, const std::string& key, const std::string& value);

// HTB_<SECTION>__<KEY>=value overrides, e.g. HTB_POISON__EPSILON=8.
inline constexpr const char* kEnvPrefix = "HTB_";
std::string env_name(const std::string& key);
void apply_env_overrides(ExperimentConfig& c, char** envp);

struct StageSeeds {
  std::uint64_t trigger, poison, finetune, eval, badnets, pretrain;
};
// Attack-side stages hash the master seed; pretraining hashes the dataset
// seed so one pretrained network serves every master seed.
StageSeeds stage_seeds(const ExperimentConfig& c);

// In-memory reuse of pretrained networks and poison pools across runs in one
// process. Keys hash every input the artifact depends on.
struct PipelineCache {
  std::map<std::string, nnet::ModelBundle> pretrained;
  std::map<std::string, PoisonBatch> pools;
  std::map<std::string, std::vector<ImageTensor>> datasets;
};

struct RunResult {
  nlohmann::json manifest;
  std::filesystem::path manifest_path;
  eval::AttackReport poisoned;
  eval::AttackReport control;  // same finetune, no poisons
  std::optional<eval::AttackReport> badnets;
  std::optional<defense::SpectralReport> defense;
  std::optional<defense::SpectralReport> badnets_defense;
  PoisonBatch poisons;
  double clean_model_source_accuracy = 0.0;
};

// trigger -> poisons -> finetune -> evaluate (-> defend). Owns output_dir for
// the duration through a lockfile. On failure the partial manifest names the
// stage, and the error is rethrown with the stage prefixed.
RunResult run(const ExperimentConfig& config, PipelineCache* cache = nullptr);

inline constexpr const char* kManifestName = "manifest.json";

// Checks every artifact in a manifest exists and matches its hash.
// Throws ManifestError.
void verify_manifest(const std::filesystem::path& manifest_path);

enum class SweepAxis { epsilon, patch_size, n_poison, layers };
SweepAxis parse_axis(const std::string& s);
std::string to_string(SweepAxis a);
void apply_axis(ExperimentConfig& c, SweepAxis axis, const std::string& value);

struct SweepRecord {
  std::string value;
  bool ok = false;
  std::string error;
  double clean_accuracy = 0.0;
  double patched_source_accuracy = 0.0;
  double attack_success_rate = 0.0;
  std::filesystem::path manifest_path;
};

// One run per value under output_dir/<axis>_<value>; failures are recorded.
// Writes sweep.csv and sweep.json into output_dir.
std::vector<SweepRecord> sweep(const ExperimentConfig& config, SweepAxis axis,
                               const std::vector<std::string>& values, PipelineCache* cache = nullptr);

// run() with the BadNets arm on; writes baseline_compare.json.
RunResult baseline_compare(const ExperimentConfig& config, PipelineCache* cache = nullptr);

enum class PlotKind { projection2d, loss_trace, sweep_curve };
PlotKind parse_plot_kind(const std::string& s);

// Emits CSV for a finished run (or sweep) manifest. Returns the written path.
std::filesystem::path plotdata(const std::filesystem::path& manifest_path, PlotKind kind,
                               const std::filesystem::path& out = {});

// Re-runs the spectral defense from a run manifest's artifacts.
nlohmann::json defend(const std::filesystem::path& manifest_path, std::optional<double> percentile = {});

}  // namespace htb::experiment
