#include "htb/experiment.hpp"

#include <charconv>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <unistd.h>

#include "htb/error.hpp"
#include "htb/io.hpp"
#include "htb/poison.hpp"
#include "htb/rng.hpp"
#include "htb/trigger.hpp"

#ifndef HTB_VERSION
#define HTB_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace htb::experiment {

// ------------------------------------------------------------------ config

void ExperimentConfig::validate() const {
  if (dataset.kind != "synthetic" && dataset.kind != "cifar")
    throw ValidationError("dataset.kind must be synthetic or cifar");
  if (dataset.kind == "cifar" && dataset.cifar_dir.empty()) throw ValidationError("dataset.cifar_dir is required");
  const int classes = dataset.kind == "cifar" ? 10 : dataset.num_classes;
  if (dataset.kind == "synthetic") {
    if (dataset.num_classes < 2) throw ValidationError("dataset.num_classes must be at least 2");
    if (dataset.per_class < 1) throw ValidationError("dataset.per_class must be positive");
    if (splits.n_gen + splits.n_finetune + splits.n_test > static_cast<std::size_t>(dataset.per_class))
      throw ValidationError("splits need more images per class than dataset.per_class");
  }
  if (splits.n_gen < 1 || splits.n_finetune < 1 || splits.n_test < 1)
    throw ValidationError("every split must be non-empty");
  nnet::Architecture a = arch;
  a.num_classes = classes;
  a.validate();
  pretrain.validate();
  pair.validate();
  if (pair.source_category >= classes || pair.target_category >= classes)
    throw ValidationError("pair categories exceed the dataset's classes");
  if (patch_size < trigger::kBaseGridSide || patch_size > std::min(arch.input_height, arch.input_width))
    throw ValidationError("trigger.patch_size must lie in [4, image side]");
  poison.validate();
  finetune.validate();
  if (finetune.num_outputs != 2) throw ValidationError("the pipeline finetunes a binary head (num_outputs=2)");
  if (eval.n_placements < 1) throw ValidationError("eval.n_placements must be positive");
  if (!(defense.percentile > 0.0 && defense.percentile < 100.0))
    throw ValidationError("defense.percentile must lie in (0, 100)");
  if (!defense.layer.empty()) nnet::parse_layer(defense.layer);
  if (threads < 1) throw ValidationError("exec.threads must be positive");
  if (output_dir.empty()) throw ValidationError("output_dir must be set");
}

ExperimentConfig cifar_protocol() {
  ExperimentConfig c;
  c.dataset.kind = "cifar";
  c.splits = {1500, 1500, 1000};
  c.pretrain = {200, 0.001, 0.9, 5e-4, 64, 0};
  c.pair = {2, 5, 0, 0};  // bird -> dog
  c.patch_size = 8;
  c.poison.epsilon = 16;
  c.poison.iterations = 10000;
  c.poison.lr0 = 0.01;
  c.poison.decay = 0.95;
  c.poison.decay_every = 2000;
  c.poison.n_generate = 800;
  c.poison.n_select = 800;
  c.poison.placement_mode = PlacementMode::corner;
  c.eval.placement_mode = PlacementMode::corner;
  c.eval.n_placements = 1;
  return c;
}

ExperimentConfig desk_profile() {
  ExperimentConfig c;
  c.dataset = {"synthetic", {}, 10, 500, 7};
  c.splits = {150, 150, 100};
  c.arch.conv_channels = {16, 48, 96, 64};
  c.pretrain = {30, 0.01, 0.9, 5e-4, 64, 0};
  c.pair = {2, 5, 0, 0};
  c.patch_size = 8;
  c.poison.epsilon = 16;
  c.poison.batch_size = 80;
  c.poison.iterations = 500;
  c.poison.lr0 = 0.001;
  c.poison.decay = 0.95;
  c.poison.decay_every = 100;
  c.poison.n_generate = 80;
  c.poison.n_select = 80;
  c.poison.placement_mode = PlacementMode::corner;
  c.eval.placement_mode = PlacementMode::corner;
  c.eval.n_placements = 1;
  return c;
}

namespace {

std::string fmt(double v) {
  char buf[64];
  for (int prec = 6; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

std::string fmt(bool v) { return v ? "true" : "false"; }

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_int(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  const auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ValidationError("bad integer for " + key + ": '" + v + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto* end = v.data() + v.size();
  const auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end || !std::isfinite(out))
    throw ValidationError("bad number for " + key + ": '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ValidationError("bad boolean for " + key + ": '" + v + "'");
}

std::string join_channels(const std::array<int, nnet::kNumConv>& c) {
  std::string s;
  for (int i = 0; i < nnet::kNumConv; ++i) s += (i ? "," : "") + std::to_string(c[static_cast<std::size_t>(i)]);
  return s;
}

std::array<int, nnet::kNumConv> parse_channels(const std::string& key, const std::string& v) {
  std::array<int, nnet::kNumConv> out{};
  std::stringstream ss(v);
  std::string item;
  int i = 0;
  while (std::getline(ss, item, ',')) {
    if (i >= nnet::kNumConv) throw ValidationError(key + " needs exactly 4 widths");
    out[static_cast<std::size_t>(i++)] = parse_int<int>(key, trim(item));
  }
  if (i != nnet::kNumConv) throw ValidationError(key + " needs exactly 4 widths");
  return out;
}

}  // namespace

std::vector<std::pair<std::string, std::string>> to_key_values(const ExperimentConfig& c) {
  return {
      {"dataset.kind", c.dataset.kind},
      {"dataset.cifar_dir", c.dataset.cifar_dir.string()},
      {"dataset.num_classes", std::to_string(c.dataset.num_classes)},
      {"dataset.per_class", std::to_string(c.dataset.per_class)},
      {"dataset.seed", std::to_string(c.dataset.seed)},
      {"split.n_gen", std::to_string(c.splits.n_gen)},
      {"split.n_finetune", std::to_string(c.splits.n_finetune)},
      {"split.n_test", std::to_string(c.splits.n_test)},
      {"model.conv_channels", join_channels(c.arch.conv_channels)},
      {"model.fc_width", std::to_string(c.arch.fc_width)},
      {"pretrain.epochs", std::to_string(c.pretrain.epochs)},
      {"pretrain.lr", fmt(c.pretrain.learning_rate)},
      {"pretrain.momentum", fmt(c.pretrain.momentum)},
      {"pretrain.weight_decay", fmt(c.pretrain.weight_decay)},
      {"pretrain.batch_size", std::to_string(c.pretrain.batch_size)},
      {"pretrain.cache_dir", c.pretrain_cache.string()},
      {"pair.source", std::to_string(c.pair.source_category)},
      {"pair.target", std::to_string(c.pair.target_category)},
      {"pair.trigger_id", std::to_string(c.pair.trigger_id)},
      {"trigger.patch_size", std::to_string(c.patch_size)},
      {"poison.epsilon", fmt(c.poison.epsilon)},
      {"poison.K", std::to_string(c.poison.batch_size)},
      {"poison.iterations", std::to_string(c.poison.iterations)},
      {"poison.lr0", fmt(c.poison.lr0)},
      {"poison.decay", fmt(c.poison.decay)},
      {"poison.decay_every", std::to_string(c.poison.decay_every)},
      {"poison.embedding_layer", c.poison.embedding_layer},
      {"poison.placement_mode", to_string(c.poison.placement_mode)},
      {"poison.n_generate", std::to_string(c.poison.n_generate)},
      {"poison.n_select", std::to_string(c.poison.n_select)},
      {"poison.step_mode", to_string(c.poison.step_mode)},
      {"poison.assign_mode", to_string(c.poison.assign_mode)},
      {"poison.early_stop_loss", fmt(c.poison.early_stop_loss)},
      {"finetune.layers", nnet::format_layer_set(c.finetune.trainable_layers)},
      {"finetune.epochs", std::to_string(c.finetune.epochs)},
      {"finetune.lr", fmt(c.finetune.learning_rate)},
      {"finetune.momentum", fmt(c.finetune.momentum)},
      {"finetune.weight_decay", fmt(c.finetune.weight_decay)},
      {"finetune.batch_size", std::to_string(c.finetune.batch_size)},
      {"eval.n_placements", std::to_string(c.eval.n_placements)},
      {"eval.placement_mode", to_string(c.eval.placement_mode)},
      {"defense.enabled", fmt(c.defense.enabled)},
      {"defense.percentile", fmt(c.defense.percentile)},
      {"defense.layer", c.defense.layer},
      {"baseline.badnets", fmt(c.badnets)},
      {"seeds.master", std::to_string(c.master_seed)},
      {"output_dir", c.output_dir.string()},
      {"exec.threads", std::to_string(c.threads)},
  };
}

void apply(ExperimentConfig& c, const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  if (key == "dataset.kind") c.dataset.kind = v;
  else if (key == "dataset.cifar_dir") c.dataset.cifar_dir = v;
  else if (key == "dataset.num_classes") c.dataset.num_classes = parse_int<int>(key, v);
  else if (key == "dataset.per_class") c.dataset.per_class = parse_int<int>(key, v);
  else if (key == "dataset.seed") c.dataset.seed = parse_int<std::uint64_t>(key, v);
  else if (key == "split.n_gen") c.splits.n_gen = parse_int<std::size_t>(key, v);
  else if (key == "split.n_finetune") c.splits.n_finetune = parse_int<std::size_t>(key, v);
  else if (key == "split.n_test") c.splits.n_test = parse_int<std::size_t>(key, v);
  else if (key == "model.conv_channels") c.arch.conv_channels = parse_channels(key, v);
  else if (key == "model.fc_width") c.arch.fc_width = parse_int<int>(key, v);
  else if (key == "pretrain.epochs") c.pretrain.epochs = parse_int<int>(key, v);
  else if (key == "pretrain.lr") c.pretrain.learning_rate = parse_double(key, v);
  else if (key == "pretrain.momentum") c.pretrain.momentum = parse_double(key, v);
  else if (key == "pretrain.weight_decay") c.pretrain.weight_decay = parse_double(key, v);
  else if (key == "pretrain.batch_size") c.pretrain.batch_size = parse_int<int>(key, v);
  else if (key == "pretrain.cache_dir") c.pretrain_cache = v;
  else if (key == "pair.source") c.pair.source_category = parse_int<int>(key, v);
  else if (key == "pair.target") c.pair.target_category = parse_int<int>(key, v);
  else if (key == "pair.trigger_id") c.pair.trigger_id = parse_int<int>(key, v);
  else if (key == "trigger.patch_size") c.patch_size = parse_int<int>(key, v);
  else if (key == "poison.epsilon") c.poison.epsilon = parse_double(key, v);
  else if (key == "poison.K") c.poison.batch_size = parse_int<int>(key, v);
  else if (key == "poison.iterations") c.poison.iterations = parse_int<int>(key, v);
  else if (key == "poison.lr0") c.poison.lr0 = parse_double(key, v);
  else if (key == "poison.decay") c.poison.decay = parse_double(key, v);
  else if (key == "poison.decay_every") c.poison.decay_every = parse_int<int>(key, v);
  else if (key == "poison.embedding_layer") c.poison.embedding_layer = std::string(nnet::layer_name(nnet::parse_layer(v)));
  else if (key == "poison.placement_mode") c.poison.placement_mode = parse_placement_mode(v);
  else if (key == "poison.n_generate") c.poison.n_generate = parse_int<int>(key, v);
  else if (key == "poison.n_select") c.poison.n_select = parse_int<int>(key, v);
  else if (key == "poison.step_mode") c.poison.step_mode = parse_step_mode(v);
  else if (key == "poison.assign_mode") c.poison.assign_mode = parse_assign_mode(v);
  else if (key == "poison.early_stop_loss") c.poison.early_stop_loss = parse_double(key, v);
  else if (key == "finetune.layers") c.finetune.trainable_layers = nnet::parse_layer_set(v);
  else if (key == "finetune.epochs") c.finetune.epochs = parse_int<int>(key, v);
  else if (key == "finetune.lr") c.finetune.learning_rate = parse_double(key, v);
  else if (key == "finetune.momentum") c.finetune.momentum = parse_double(key, v);
  else if (key == "finetune.weight_decay") c.finetune.weight_decay = parse_double(key, v);
  else if (key == "finetune.batch_size") c.finetune.batch_size = parse_int<int>(key, v);
  else if (key == "eval.n_placements") c.eval.n_placements = parse_int<int>(key, v);
  else if (key == "eval.placement_mode") c.eval.placement_mode = parse_placement_mode(v);
  else if (key == "defense.enabled") c.defense.enabled = parse_bool(key, v);
  else if (key == "defense.percentile") c.defense.percentile = parse_double(key, v);
  else if (key == "defense.layer") c.defense.layer = v.empty() ? v : std::string(nnet::layer_name(nnet::parse_layer(v)));
  else if (key == "baseline.badnets") c.badnets = parse_bool(key, v);
  else if (key == "seeds.master") c.master_seed = parse_int<std::uint64_t>(key, v);
  else if (key == "output_dir") c.output_dir = v;
  else if (key == "exec.threads") c.threads = parse_int<int>(key, v);
  else throw ValidationError("unknown config key '" + key + "'");
}

std::string serialize(const ExperimentConfig& c) {
  std::string out;
  std::string section;
  for (const auto& [k, v] : to_key_values(c)) {
    const auto dot = k.find('.');
    const std::string s = dot == std::string::npos ? "" : k.substr(0, dot);
    if (s != section && !out.empty()) out += '\n';
    section = s;
    out += k + "=" + v + "\n";
  }
  return out;
}

ExperimentConfig parse(const std::string& text, const ExperimentConfig& base) {
  ExperimentConfig c = base;
  std::set<std::string> seen;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError("config line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    if (!seen.insert(key).second) throw ValidationError("duplicate config key '" + key + "'");
    apply(c, key, line.substr(eq + 1));
  }
  return c;
}

ExperimentConfig load_config(const fs::path& path, const ExperimentConfig& base) {
  if (!fs::exists(path)) throw ValidationError("config file not found: " + path.string());
  return parse(io::read_text(path), base);
}

std::string env_name(const std::string& key) {
  std::string out = kEnvPrefix;
  for (std::size_t i = 0; i < key.size(); ++i) {
    if (key[i] == '.') out += "__";
    else out += static_cast<char>(std::toupper(static_cast<unsigned char>(key[i])));
  }
  return out;
}

void apply_env_overrides(ExperimentConfig& c, char** envp) {
  if (!envp) return;
  std::map<std::string, std::string> env;
  for (char** e = envp; *e; ++e) {
    const std::string s = *e;
    const auto eq = s.find('=');
    if (eq != std::string::npos) env[s.substr(0, eq)] = s.substr(eq + 1);
  }
  for (const auto& [key, value] : to_key_values(c))
    if (const auto it = env.find(env_name(key)); it != env.end()) apply(c, key, it->second);
}

StageSeeds stage_seeds(const ExperimentConfig& c) {
  const auto m = c.master_seed;
  return {derive_seed(m, "trigger"), derive_seed(m, "poison"), derive_seed(m, "finetune"),
          derive_seed(m, "eval"), derive_seed(m, "badnets"), derive_seed(c.dataset.seed, "pretrain")};
}

// ---------------------------------------------------------------- pipeline

namespace {

using Clock = std::chrono::steady_clock;

class OutputLock {
 public:
  explicit OutputLock(const fs::path& dir) : path_(dir / ".htb.lock") {
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f)
      throw Error("output directory " + dir.string() + " is locked by another run (remove " + path_.string() +
                  " if stale)");
    std::fprintf(f, "%ld\n", static_cast<long>(::getpid()));
    std::fclose(f);
  }
  ~OutputLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  fs::path path_;
};

struct Data {
  std::vector<data::DatasetSplit> splits;  // indexed by class
  std::vector<ImageTensor> pretrain_set;
  int num_classes = 0;
};

json dataset_json(const ExperimentConfig& c) {
  return {{"kind", c.dataset.kind},
          {"cifar_dir", c.dataset.kind == "cifar" ? c.dataset.cifar_dir.string() : ""},
          {"num_classes", c.dataset.kind == "cifar" ? 10 : c.dataset.num_classes},
          {"per_class", c.dataset.kind == "cifar" ? 0 : c.dataset.per_class},
          {"seed", c.dataset.seed},
          {"splits", {c.splits.n_gen, c.splits.n_finetune, c.splits.n_test}}};
}

Data load_data(const ExperimentConfig& c, PipelineCache* cache) {
  const std::string key = io::sha256_hex(dataset_json(c).dump());
  std::vector<ImageTensor> local;
  const std::vector<ImageTensor>* all = nullptr;
  if (cache && cache->datasets.count(key)) {
    all = &cache->datasets.at(key);
  } else {
    if (c.dataset.kind == "cifar") {
      std::set<int> cats;
      for (int i = 0; i < 10; ++i) cats.insert(i);
      local = data::load_cifar_directory(c.dataset.cifar_dir, cats);
    } else {
      local = data::generate_synthetic_dataset(c.dataset.num_classes, c.dataset.per_class, c.dataset.seed);
    }
    if (cache) {
      all = &(cache->datasets[key] = std::move(local));
    } else {
      all = &local;
    }
  }
  Data d;
  d.num_classes = c.dataset.kind == "cifar" ? 10 : c.dataset.num_classes;
  for (int cls = 0; cls < d.num_classes; ++cls) {
    const auto imgs = data::filter_by_label(*all, cls);
    d.splits.push_back(
        data::make_split(imgs, c.splits, derive_seed(c.dataset.seed, "split-" + std::to_string(cls)), cls));
    for (const auto& img : d.splits.back().rest) d.pretrain_set.push_back(img);
  }
  if (d.pretrain_set.empty()) throw ValidationError("no images left for pretraining after the splits");
  return d;
}

nnet::Architecture run_arch(const ExperimentConfig& c, const Data& d) {
  nnet::Architecture a = c.arch;
  a.num_classes = d.num_classes;
  return a;
}

std::string pretrain_key(const ExperimentConfig& c, const Data& d, const StageSeeds& s) {
  const json j = {{"dataset", dataset_json(c)},
                  {"arch", nnet::to_json(run_arch(c, d))},
                  {"epochs", c.pretrain.epochs},
                  {"lr", fmt(c.pretrain.learning_rate)},
                  {"momentum", fmt(c.pretrain.momentum)},
                  {"wd", fmt(c.pretrain.weight_decay)},
                  {"batch", c.pretrain.batch_size},
                  {"seed", s.pretrain}};
  return io::sha256_hex(j.dump());
}

nnet::ModelBundle pretrained_model(const ExperimentConfig& c, const Data& d, const StageSeeds& s,
                                   PipelineCache* cache, const std::string& key, json& info) {
  if (cache && cache->pretrained.count(key)) {
    info["source"] = "memory-cache";
    return cache->pretrained.at(key);
  }
  fs::path cached;
  if (!c.pretrain_cache.empty()) {
    fs::create_directories(c.pretrain_cache);
    cached = c.pretrain_cache / (key.substr(0, 16) + ".ckpt");
  }
  nnet::ModelBundle m;
  if (!cached.empty() && fs::exists(cached)) {
    m = nnet::load_checkpoint(cached);
    info["source"] = cached.string();
  } else {
    nnet::TrainConfig tc = c.pretrain;
    tc.seed = s.pretrain;
    const auto r = nnet::pretrain(nnet::build_model(run_arch(c, d), derive_seed(s.pretrain, "init")), d.pretrain_set, tc);
    m = r.model;
    info["source"] = "trained";
    info["train_accuracy"] = r.train_accuracy;
    if (!cached.empty()) nnet::save_checkpoint(m, cached);
  }
  m.embedding_layer = nnet::parse_layer(c.poison.embedding_layer);
  if (cache) cache->pretrained[key] = m;
  return m;
}

std::vector<ImageTensor> binary_finetune_set(const Data& d, const ExperimentConfig& c,
                                             std::span<const ImageTensor> poisons) {
  std::vector<ImageTensor> ft;
  for (auto img : d.splits[static_cast<std::size_t>(c.pair.source_category)].finetune) {
    img.label = 0;
    ft.push_back(std::move(img));
  }
  for (auto img : d.splits[static_cast<std::size_t>(c.pair.target_category)].finetune) {
    img.label = 1;
    ft.push_back(std::move(img));
  }
  for (auto img : poisons) {
    img.label = 1;
    ft.push_back(std::move(img));
  }
  return ft;
}

defense::SpectralReport defend_target(const nnet::ModelBundle& model, const Data& d, const ExperimentConfig& c,
                                      std::span<const ImageTensor> poisons, double percentile,
                                      const nnet::ExecPolicy& exec) {
  std::vector<ImageTensor> set = d.splits[static_cast<std::size_t>(c.pair.target_category)].finetune;
  std::vector<int> ids;
  for (const auto& p : poisons) {
    ids.push_back(static_cast<int>(set.size()));
    set.push_back(p);
  }
  const nnet::Layer layer = nnet::parse_layer(c.defense.layer.empty() ? c.poison.embedding_layer : c.defense.layer);
  return defense::run_defense(model, set, ids, percentile, layer, exec);
}

void write_loss_trace(const PoisonBatch& b, const fs::path& path) {
  std::ostringstream os;
  os.precision(10);
  os << "iteration,mean_loss,sum_loss,lr\n";
  for (std::size_t i = 0; i < b.loss_trace.size(); ++i)
    os << i << ',' << b.loss_trace[i] << ',' << b.loss_trace_sum[i] << ',' << b.lr_trace[i] << '\n';
  io::write_text(path, os.str());
}

json config_json(const ExperimentConfig& c) {
  json j = json::object();
  for (const auto& [k, v] : to_key_values(c)) j[k] = v;
  return j;
}

json versions_json() {
  return {{"htb", HTB_VERSION},
          {"poison_format", data::kPoisonFormatVersion},
          {"compiler", __VERSION__},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION)}};
}

json metrics_of(const eval::AttackReport& r) {
  return {{"clean_accuracy", r.clean_accuracy},
          {"patched_source_accuracy", r.patched_source_accuracy},
          {"attack_success_rate", r.attack_success_rate}};
}

class Manifest {
 public:
  Manifest(const fs::path& dir, const ExperimentConfig& c, const StageSeeds& s) : dir_(dir) {
    j_ = {{"status", "running"},
          {"config", config_json(c)},
          {"config_text", serialize(c)},
          {"seeds",
           {{"master", c.master_seed}, {"trigger", s.trigger}, {"poison", s.poison}, {"finetune", s.finetune},
            {"eval", s.eval}, {"badnets", s.badnets}, {"pretrain", s.pretrain}}},
          {"versions", versions_json()},
          {"artifacts", json::object()},
          {"timings", json::object()},
          {"metrics", json::object()}};
  }

  void artifact(const std::string& name, const fs::path& path) {
    j_["artifacts"][name] = {{"path", fs::relative(path, dir_).generic_string()}, {"sha256", io::sha256_file(path)}};
  }
  json& operator[](const char* k) { return j_[k]; }
  const json& get() const { return j_; }
  fs::path write() const {
    const fs::path p = dir_ / kManifestName;
    io::write_json(p, j_);
    return p;
  }

 private:
  fs::path dir_;
  json j_;
};

}  // namespace

RunResult run(const ExperimentConfig& config, PipelineCache* cache) {
  config.validate();
  const ExperimentConfig& c = config;
  const StageSeeds seeds = stage_seeds(c);
  const fs::path out = c.output_dir;
  fs::create_directories(out);
  OutputLock lock(out);
  const nnet::ExecPolicy exec{c.threads, 64};

  Manifest manifest(out, c, seeds);
  RunResult res;
  std::string stage = "data";
  auto t_stage = Clock::now();
  auto done = [&](const std::string& next) {
    manifest["timings"][stage] = std::chrono::duration<double>(Clock::now() - t_stage).count();
    stage = next;
    t_stage = Clock::now();
  };
  auto fail = [&](const std::exception& e) {
    manifest["status"] = "failed";
    manifest["failed_stage"] = stage;
    manifest["error"] = e.what();
    try {
      res.manifest_path = manifest.write();
    } catch (...) {
    }
  };

  try {
    const Data d = load_data(c, cache);
    done("pretrain");

    const std::string pkey = pretrain_key(c, d, seeds);
    json pinfo = {{"key", pkey}};
    const nnet::ModelBundle base = pretrained_model(c, d, seeds, cache, pkey, pinfo);
    std::vector<ImageTensor> all_test;
    for (const auto& s : d.splits) all_test.insert(all_test.end(), s.test.begin(), s.test.end());
    pinfo["test_accuracy"] = nnet::accuracy(base, all_test, exec);
    manifest["pretrain"] = pinfo;
    nnet::save_checkpoint(base, out / "pretrained.ckpt");
    manifest.artifact("pretrained_checkpoint", out / "pretrained.ckpt");
    done("trigger");

    const auto trig = trigger::generate_trigger(c.patch_size, seeds.trigger, c.pair.trigger_id,
                                                c.arch.input_channels);
    trigger::export_trigger(trig, out / "trigger");
    manifest.artifact("trigger_png", out / "trigger.png");
    manifest.artifact("trigger_json", out / "trigger.json");
    done("poison");

    const auto& src = d.splits[static_cast<std::size_t>(c.pair.source_category)];
    const auto& tgt = d.splits[static_cast<std::size_t>(c.pair.target_category)];
    PoisonConfig pc = c.poison;
    pc.seed = seeds.poison;
    if (pc.n_select > 0) {
      PoisonConfig key_cfg = pc;
      key_cfg.n_select = 0;
      ExperimentConfig key_holder;
      key_holder.poison = key_cfg;
      json poison_kv = json::object();
      for (const auto& [k, v] : to_key_values(key_holder))
        if (k.rfind("poison.", 0) == 0) poison_kv[k] = v;
      const json pool_key_json = {{"pretrain", pkey},
                                  {"trigger", {c.patch_size, seeds.trigger, c.pair.trigger_id}},
                                  {"pair", {c.pair.source_category, c.pair.target_category}},
                                  {"poison", poison_kv}};
      const std::string pool_key = io::sha256_hex(pool_key_json.dump() + std::to_string(pc.seed));
      PoisonBatch pool;
      if (cache && cache->pools.count(pool_key)) {
        pool = cache->pools.at(pool_key);
      } else {
        pool = poison::generate_poisons(base, src.poison_gen, tgt.poison_gen, trig, pc, c.pair.source_category,
                                        c.pair.target_category);
        if (cache) cache->pools[pool_key] = pool;
      }
      res.poisons = poison::select_lowest_loss(pool, static_cast<std::size_t>(pc.n_select));
      res.poisons.config.n_select = pc.n_select;
      data::save_poison_batch(res.poisons, out / "poisons");
      manifest.artifact("poisons_blob", data::poison_blob_path(out / "poisons"));
      manifest.artifact("poisons_manifest", data::poison_manifest_path(out / "poisons"));
      write_loss_trace(res.poisons, out / "loss_trace.csv");
      manifest.artifact("loss_trace", out / "loss_trace.csv");
      const double dev = poison::max_linf_deviation(res.poisons.poisons, res.poisons.anchors);
      manifest["poison"] = {{"n", res.poisons.size()},
                            {"max_linf_deviation", dev},
                            {"initial_mean_loss", res.poisons.loss_trace.empty() ? 0.0 : res.poisons.loss_trace.front()},
                            {"final_mean_loss", res.poisons.loss_trace.empty() ? 0.0 : res.poisons.loss_trace.back()}};
    }
    done("finetune");

    nnet::FinetuneConfig fc = c.finetune;
    fc.seed = seeds.finetune;
    const auto control = nnet::finetune(base, binary_finetune_set(d, c, {}), fc).model;
    const auto poisoned = nnet::finetune(base, binary_finetune_set(d, c, res.poisons.poisons), fc).model;
    nnet::save_checkpoint(control, out / "control.ckpt");
    nnet::save_checkpoint(poisoned, out / "poisoned.ckpt");
    manifest.artifact("control_checkpoint", out / "control.ckpt");
    manifest.artifact("poisoned_checkpoint", out / "poisoned.ckpt");
    done("evaluate");

    eval::EvalOptions eo = c.eval;
    eo.seed = seeds.eval;
    res.control = eval::evaluate_binary(control, src.test, tgt.test, trig, eo, exec);
    res.poisoned = eval::evaluate_binary(poisoned, src.test, tgt.test, trig, eo, exec);
    {
      std::vector<ImageTensor> s = src.test;
      for (auto& img : s) img.label = 0;
      res.clean_model_source_accuracy = nnet::accuracy(control, s, exec);
    }
    io::write_json(out / "report_poisoned.json", eval::to_json(res.poisoned));
    io::write_json(out / "report_control.json", eval::to_json(res.control));
    manifest.artifact("report_poisoned", out / "report_poisoned.json");
    manifest.artifact("report_control", out / "report_control.json");
    manifest["metrics"]["poisoned"] = metrics_of(res.poisoned);
    manifest["metrics"]["control"] = metrics_of(res.control);
    manifest["metrics"]["control"]["clean_source_accuracy"] = res.clean_model_source_accuracy;

    std::vector<ImageTensor> bn_poisons;
    std::optional<nnet::ModelBundle> bn_model;
    if (c.badnets) {
      done("badnets");
      Rng rng(seeds.badnets);
      bn_poisons = poison::generate_badnets_poisons(src.poison_gen, trig, static_cast<std::size_t>(c.poison.n_select),
                                                    c.eval.placement_mode, 1, rng);
      bn_model = nnet::finetune(base, binary_finetune_set(d, c, bn_poisons), fc).model;
      nnet::save_checkpoint(*bn_model, out / "badnets.ckpt");
      manifest.artifact("badnets_checkpoint", out / "badnets.ckpt");
      auto pair = eval::compare_badnets(poisoned, *bn_model, src.test, tgt.test, trig, eo, exec);
      res.badnets = std::move(pair.second);
      io::write_json(out / "report_badnets.json", eval::to_json(*res.badnets));
      manifest.artifact("report_badnets", out / "report_badnets.json");
      manifest["metrics"]["badnets"] = metrics_of(*res.badnets);
    }

    if (c.defense.enabled) {
      done("defense");
      res.defense = defend_target(poisoned, d, c, res.poisons.poisons, c.defense.percentile, exec);
      io::write_json(out / "defense.json", defense::to_json(*res.defense));
      defense::write_scores_csv(*res.defense, out / "defense_scores.csv");
      manifest.artifact("defense_report", out / "defense.json");
      manifest.artifact("defense_scores", out / "defense_scores.csv");
      manifest["metrics"]["defense"] = {{"n_poison_flagged", res.defense->n_poison_flagged},
                                        {"n_clean_flagged", res.defense->n_clean_flagged},
                                        {"poison_flag_rate", defense::poison_flag_rate(*res.defense)}};
      if (bn_model) {
        res.badnets_defense = defend_target(*bn_model, d, c, bn_poisons, c.defense.percentile, exec);
        io::write_json(out / "defense_badnets.json", defense::to_json(*res.badnets_defense));
        manifest.artifact("defense_badnets_report", out / "defense_badnets.json");
        manifest["metrics"]["badnets_defense"] = {
            {"n_poison_flagged", res.badnets_defense->n_poison_flagged},
            {"n_clean_flagged", res.badnets_defense->n_clean_flagged},
            {"poison_flag_rate", defense::poison_flag_rate(*res.badnets_defense)}};
      }
    }
    done("complete");
    manifest["status"] = "complete";
    res.manifest_path = manifest.write();
    res.manifest = manifest.get();
  } catch (const ValidationError& e) {
    fail(e);
    throw ValidationError("stage '" + stage + "': " + e.what());
  } catch (const std::exception& e) {
    fail(e);
    throw Error("stage '" + stage + "': " + e.what());
  }
  return res;
}

void verify_manifest(const fs::path& manifest_path) {
  if (!fs::exists(manifest_path)) throw ManifestError("manifest not found: " + manifest_path.string());
  json j;
  try {
    j = io::read_json(manifest_path);
  } catch (const std::exception& e) {
    throw ManifestError(std::string("unreadable manifest: ") + e.what());
  }
  const fs::path dir = manifest_path.parent_path();
  if (!j.contains("artifacts")) throw ManifestError("manifest has no artifact table");
  for (const auto& [name, a] : j["artifacts"].items()) {
    const fs::path p = dir / a.at("path").get<std::string>();
    if (!fs::exists(p)) throw ManifestError("artifact '" + name + "' is missing: " + p.string());
    if (io::sha256_file(p) != a.at("sha256").get<std::string>())
      throw ManifestError("artifact '" + name + "' does not match its recorded hash");
  }
}

// ------------------------------------------------------------------- sweep

SweepAxis parse_axis(const std::string& s) {
  if (s == "epsilon") return SweepAxis::epsilon;
  if (s == "patch_size") return SweepAxis::patch_size;
  if (s == "n_poison") return SweepAxis::n_poison;
  if (s == "layers") return SweepAxis::layers;
  throw ValidationError("unknown sweep axis '" + s + "' (epsilon, patch_size, n_poison, layers)");
}

std::string to_string(SweepAxis a) {
  switch (a) {
    case SweepAxis::epsilon: return "epsilon";
    case SweepAxis::patch_size: return "patch_size";
    case SweepAxis::n_poison: return "n_poison";
    case SweepAxis::layers: return "layers";
  }
  return "?";
}

void apply_axis(ExperimentConfig& c, SweepAxis axis, const std::string& value) {
  switch (axis) {
    case SweepAxis::epsilon: apply(c, "poison.epsilon", value); break;
    case SweepAxis::patch_size: apply(c, "trigger.patch_size", value); break;
    case SweepAxis::n_poison:
      apply(c, "poison.n_select", value);
      c.poison.n_generate = std::max(c.poison.n_generate, c.poison.n_select);
      break;
    case SweepAxis::layers: apply(c, "finetune.layers", value); break;
  }
}

namespace {

std::string dir_safe(std::string s) {
  for (char& ch : s)
    if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '.' && ch != '-') ch = '_';
  return s;
}

}  // namespace

std::vector<SweepRecord> sweep(const ExperimentConfig& config, SweepAxis axis, const std::vector<std::string>& values,
                               PipelineCache* cache) {
  config.validate();
  if (values.empty()) throw ValidationError("sweep needs at least one value");
  // Every value must at least parse before any run starts.
  for (const auto& v : values) {
    ExperimentConfig probe = config;
    apply_axis(probe, axis, v);
  }
  PipelineCache local;
  if (!cache) cache = &local;
  fs::create_directories(config.output_dir);
  std::vector<SweepRecord> out;
  for (const auto& v : values) {
    SweepRecord rec;
    rec.value = v;
    ExperimentConfig c = config;
    c.output_dir = config.output_dir / (to_string(axis) + "_" + dir_safe(v));
    try {
      apply_axis(c, axis, v);
      const RunResult r = run(c, cache);
      rec.ok = true;
      rec.clean_accuracy = r.poisoned.clean_accuracy;
      rec.patched_source_accuracy = r.poisoned.patched_source_accuracy;
      rec.attack_success_rate = r.poisoned.attack_success_rate;
      rec.manifest_path = r.manifest_path;
    } catch (const std::exception& e) {
      rec.error = e.what();
    }
    out.push_back(std::move(rec));
  }
  std::ostringstream csv;
  csv.precision(10);
  csv << "value,clean_acc,patched_acc,attack_success,status\n";
  json runs = json::array();
  for (const auto& r : out) {
    csv << r.value << ',' << r.clean_accuracy << ',' << r.patched_source_accuracy << ',' << r.attack_success_rate
        << ',' << (r.ok ? "ok" : "failed") << '\n';
    runs.push_back({{"value", r.value},
                    {"ok", r.ok},
                    {"error", r.error},
                    {"clean_accuracy", r.clean_accuracy},
                    {"patched_source_accuracy", r.patched_source_accuracy},
                    {"attack_success_rate", r.attack_success_rate},
                    {"manifest", r.ok ? fs::relative(r.manifest_path, config.output_dir).generic_string() : ""}});
  }
  io::write_text(config.output_dir / "sweep.csv", csv.str());
  io::write_json(config.output_dir / "sweep.json",
                 {{"kind", "sweep"}, {"axis", to_string(axis)}, {"config_text", serialize(config)}, {"runs", runs}});
  return out;
}

RunResult baseline_compare(const ExperimentConfig& config, PipelineCache* cache) {
  ExperimentConfig c = config;
  c.badnets = true;
  RunResult r = run(c, cache);
  json paired = {{"ours", eval::to_json(r.poisoned, false)},
                 {"badnets", eval::to_json(*r.badnets, false)},
                 {"control", eval::to_json(r.control, false)},
                 {"n_poison", c.poison.n_select},
                 {"shared_placements", r.poisoned.per_placement.size()}};
  if (r.defense && r.badnets_defense)
    paired["defense"] = {{"ours_poison_flag_rate", defense::poison_flag_rate(*r.defense)},
                         {"badnets_poison_flag_rate", defense::poison_flag_rate(*r.badnets_defense)}};
  io::write_json(c.output_dir / "baseline_compare.json", paired);
  return r;
}

// --------------------------------------------------------------- plot data

PlotKind parse_plot_kind(const std::string& s) {
  if (s == "projection2d") return PlotKind::projection2d;
  if (s == "loss_trace") return PlotKind::loss_trace;
  if (s == "sweep_curve") return PlotKind::sweep_curve;
  throw ValidationError("unknown plot kind '" + s + "' (projection2d, loss_trace, sweep_curve)");
}

namespace {

json load_manifest_json(const fs::path& p) {
  if (!fs::exists(p)) throw ManifestError("manifest not found: " + p.string());
  return io::read_json(p);
}

fs::path artifact_path(const json& m, const fs::path& dir, const std::string& name) {
  if (!m.contains("artifacts") || !m["artifacts"].contains(name))
    throw ManifestError("manifest has no '" + name + "' artifact");
  const fs::path p = dir / m["artifacts"][name].at("path").get<std::string>();
  if (!fs::exists(p)) throw ManifestError("artifact '" + name + "' is missing: " + p.string());
  return p;
}

ExperimentConfig manifest_config(const json& m) {
  if (!m.contains("config_text")) throw ManifestError("manifest has no config snapshot");
  return parse(m["config_text"].get<std::string>());
}

}  // namespace

fs::path plotdata(const fs::path& manifest_path, PlotKind kind, const fs::path& out_path) {
  const fs::path dir = manifest_path.parent_path();
  if (kind == PlotKind::sweep_curve) {
    const json s = load_manifest_json(manifest_path);
    if (s.value("kind", "") != "sweep") throw ManifestError("sweep_curve needs a sweep.json manifest");
    std::ostringstream os;
    os.precision(10);
    os << "axis,value,clean_acc,patched_acc,attack_success,status\n";
    for (const auto& r : s.at("runs"))
      os << s.at("axis").get<std::string>() << ',' << r.at("value").get<std::string>() << ','
         << r.at("clean_accuracy").get<double>() << ',' << r.at("patched_source_accuracy").get<double>() << ','
         << r.at("attack_success_rate").get<double>() << ',' << (r.at("ok").get<bool>() ? "ok" : "failed") << '\n';
    const fs::path p = out_path.empty() ? dir / "sweep_curve.csv" : out_path;
    io::write_text(p, os.str());
    return p;
  }

  const json m = load_manifest_json(manifest_path);
  if (kind == PlotKind::loss_trace) {
    const fs::path blob = artifact_path(m, dir, "poisons_manifest");
    const fs::path stem = blob.parent_path() / "poisons";
    const PoisonBatch b = data::load_poison_batch(stem);
    const fs::path p = out_path.empty() ? dir / "plot_loss_trace.csv" : out_path;
    write_loss_trace(b, p);
    return p;
  }

  // projection2d: fc1 features of the four groups under the clean-control
  // model (before) and the poisoned model (after).
  const ExperimentConfig c = manifest_config(m);
  const auto control = nnet::load_checkpoint(artifact_path(m, dir, "control_checkpoint"));
  const auto poisoned = nnet::load_checkpoint(artifact_path(m, dir, "poisoned_checkpoint"));
  artifact_path(m, dir, "trigger_json");
  const Data d = load_data(c, nullptr);
  const StageSeeds seeds = stage_seeds(c);
  const auto trig = trigger::generate_trigger(c.patch_size, seeds.trigger, c.pair.trigger_id, c.arch.input_channels);
  std::vector<ImageTensor> poisons;
  if (m["artifacts"].contains("poisons_manifest"))
    poisons = data::load_poison_batch(artifact_path(m, dir, "poisons_manifest").parent_path() / "poisons").poisons;
  const auto& src = d.splits[static_cast<std::size_t>(c.pair.source_category)];
  const auto& tgt = d.splits[static_cast<std::size_t>(c.pair.target_category)];
  Rng rng(seeds.eval);
  std::vector<ImageTensor> patched;
  for (const auto& img : src.test) {
    const auto place = c.eval.placement_mode == PlacementMode::corner
                           ? trigger::corner_placement(dims_of(img), trig.patch_size())
                           : trigger::random_placement(dims_of(img), trig.patch_size(), rng);
    patched.push_back(trigger::apply_trigger(img, trig, place));
  }
  std::string csv;
  bool header = true;
  for (const auto& [phase, model] : {std::pair{"before", &control}, std::pair{"after", &poisoned}}) {
    std::map<eval::Group, Eigen::MatrixXd> groups;
    auto feats = [&](std::span<const ImageTensor> imgs) {
      return nnet::features(*model, imgs, nnet::Layer::fc1).cast<double>().eval();
    };
    groups[eval::Group::clean_target] = feats(tgt.test);
    groups[eval::Group::clean_source] = feats(src.test);
    groups[eval::Group::patched_source] = feats(patched);
    groups[eval::Group::poisoned_target] =
        poisons.empty() ? Eigen::MatrixXd(0, model->arch.fc_width) : feats(poisons);
    const auto [w, bias] = eval::binary_classifier_direction(*model);
    const auto proj = eval::project_2d(groups, w, bias);
    csv += eval::projection_csv(proj, phase, header);
    header = false;
  }
  const fs::path p = out_path.empty() ? dir / "projection2d.csv" : out_path;
  io::write_text(p, csv);
  return p;
}

json defend(const fs::path& manifest_path, std::optional<double> percentile) {
  const fs::path dir = manifest_path.parent_path();
  const json m = load_manifest_json(manifest_path);
  const ExperimentConfig c = manifest_config(m);
  const double pct = percentile.value_or(c.defense.percentile);
  defense::flag_count(0, pct);
  const auto poisoned = nnet::load_checkpoint(artifact_path(m, dir, "poisoned_checkpoint"));
  std::vector<ImageTensor> poisons;
  if (m["artifacts"].contains("poisons_manifest"))
    poisons = data::load_poison_batch(artifact_path(m, dir, "poisons_manifest").parent_path() / "poisons").poisons;
  const Data d = load_data(c, nullptr);
  const nnet::ExecPolicy exec{c.threads, 64};
  const auto ours = defend_target(poisoned, d, c, poisons, pct, exec);
  json out = {{"percentile", pct}, {"ours", defense::to_json(ours)}};
  if (m["artifacts"].contains("badnets_checkpoint")) {
    const auto bn_model = nnet::load_checkpoint(artifact_path(m, dir, "badnets_checkpoint"));
    const auto& src = d.splits[static_cast<std::size_t>(c.pair.source_category)];
    const auto trig = trigger::generate_trigger(c.patch_size, stage_seeds(c).trigger,
                                                c.pair.trigger_id, c.arch.input_channels);
    Rng rng(stage_seeds(c).badnets);
    const auto bn = poison::generate_badnets_poisons(src.poison_gen, trig, poisons.size(), c.eval.placement_mode, 1, rng);
    const auto theirs = defend_target(bn_model, d, c, bn, pct, exec);
    out["badnets"] = defense::to_json(theirs);
    out["ours_poison_flag_rate"] = defense::poison_flag_rate(ours);
    out["badnets_poison_flag_rate"] = defense::poison_flag_rate(theirs);
  }
  std::ostringstream name;
  name << "defend_p" << fmt(pct) << ".json";
  io::write_json(dir / name.str(), out);
  return out;
}

}  // namespace htb::experiment
