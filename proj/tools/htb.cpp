// htb: command-line driver for hidden-trigger backdoor experiments.
//
//   htb run --config exp.cfg [--seed N] [--out DIR] [--serial]
//   htb sweep --config exp.cfg --axis epsilon --values 8 16 32
//   htb baseline-compare --config exp.cfg
//   htb plotdata --manifest DIR/manifest.json --kind projection2d
//   htb defend --manifest DIR/manifest.json [--percentile 85]
//   htb config [--profile desk|cifar]
//
// Exit codes: 0 success, 2 validation or usage error, 1 runtime error.

#include <iostream>
#include <thread>

#include "CLI11.hpp"
#include "htb/error.hpp"
#include "htb/experiment.hpp"
#include "htb/io.hpp"

extern char** environ;

namespace {

using namespace htb;
namespace ex = htb::experiment;

struct Common {
  std::string config;
  std::string profile = "desk";
  std::optional<std::uint64_t> seed;
  std::string out;
  bool serial = false;
  std::optional<int> threads;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "flat key=value config file");
  cmd->add_option("--profile", c.profile, "base defaults before the config file")
      ->check(CLI::IsMember({"desk", "cifar"}));
  cmd->add_option("--seed", c.seed, "master seed (overrides seeds.master)");
  cmd->add_option("--out", c.out, "output directory (overrides output_dir)");
  cmd->add_flag("--serial", c.serial, "single-threaded inference");
  cmd->add_option("--threads", c.threads, "inference threads")->check(CLI::PositiveNumber);
}

// Precedence: profile < config file < HTB_* environment < flags.
ex::ExperimentConfig resolve(const Common& c, bool validate = true) {
  ex::ExperimentConfig cfg = c.profile == "cifar" ? ex::cifar_protocol() : ex::desk_profile();
  if (!c.config.empty()) cfg = ex::load_config(c.config, cfg);
  ex::apply_env_overrides(cfg, environ);
  if (c.seed) cfg.master_seed = *c.seed;
  if (!c.out.empty()) cfg.output_dir = c.out;
  if (c.threads) cfg.threads = *c.threads;
  if (c.serial) cfg.threads = 1;
  if (validate) cfg.validate();
  return cfg;
}

void print_report(const char* name, const eval::AttackReport& r) {
  std::cout << name << ": clean " << r.clean_accuracy << "  patched-source " << r.patched_source_accuracy
            << "  attack-success " << r.attack_success_rate << "\n";
}

void summarize(const ex::RunResult& r) {
  print_report("poisoned", r.poisoned);
  print_report("control ", r.control);
  if (r.badnets) print_report("badnets ", *r.badnets);
  if (r.defense)
    std::cout << "defense: " << r.defense->n_poison_flagged << " of " << r.defense->poison_ids.size()
              << " poisons flagged (" << r.defense->flagged.size() << " flagged total)\n";
  if (r.badnets_defense)
    std::cout << "defense (badnets): " << r.badnets_defense->n_poison_flagged << " of "
              << r.badnets_defense->poison_ids.size() << " poisons flagged\n";
  std::cout << "manifest: " << r.manifest_path.string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hidden-trigger backdoor poisoning toolkit"};
  app.require_subcommand(1);

  Common run_opts, sweep_opts, base_opts, cfg_opts;
  auto* run_cmd = app.add_subcommand("run", "trigger -> poisons -> finetune -> evaluate -> defend");
  add_common(run_cmd, run_opts);

  auto* sweep_cmd = app.add_subcommand("sweep", "one run per value of an ablation axis");
  add_common(sweep_cmd, sweep_opts);
  std::string axis;
  std::vector<std::string> values;
  sweep_cmd->add_option("--axis", axis, "epsilon | patch_size | n_poison | layers")->required();
  sweep_cmd->add_option("--values", values, "values for the axis (layers: comma lists, e.g. fc2 fc1,fc2)")
      ->required();

  auto* base_cmd = app.add_subcommand("baseline-compare", "ours vs BadNets at matched poison count");
  add_common(base_cmd, base_opts);

  auto* plot_cmd = app.add_subcommand("plotdata", "emit CSV for plotting");
  std::string manifest, kind, plot_out;
  plot_cmd->add_option("--manifest", manifest, "run manifest (sweep.json for sweep_curve)")->required();
  plot_cmd->add_option("--kind", kind, "projection2d | loss_trace | sweep_curve")->required();
  plot_cmd->add_option("--out", plot_out, "CSV path");

  auto* defend_cmd = app.add_subcommand("defend", "spectral-signature defense from a run manifest");
  std::string defend_manifest;
  std::optional<double> percentile;
  defend_cmd->add_option("--manifest", defend_manifest, "run manifest")->required();
  defend_cmd->add_option("--percentile", percentile, "flag threshold percentile");

  auto* config_cmd = app.add_subcommand("config", "print the resolved configuration");
  add_common(config_cmd, cfg_opts);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*run_cmd) {
      summarize(ex::run(resolve(run_opts)));
    } else if (*sweep_cmd) {
      const auto a = ex::parse_axis(axis);
      const auto recs = ex::sweep(resolve(sweep_opts), a, values);
      for (const auto& r : recs)
        std::cout << axis << "=" << r.value << ": "
                  << (r.ok ? "clean " + std::to_string(r.clean_accuracy) + "  patched-source " +
                                 std::to_string(r.patched_source_accuracy)
                           : "FAILED " + r.error)
                  << "\n";
    } else if (*base_cmd) {
      summarize(ex::baseline_compare(resolve(base_opts)));
    } else if (*plot_cmd) {
      std::cout << ex::plotdata(manifest, ex::parse_plot_kind(kind), plot_out).string() << "\n";
    } else if (*defend_cmd) {
      std::cout << ex::defend(defend_manifest, percentile).dump(2) << "\n";
    } else if (*config_cmd) {
      std::cout << ex::serialize(resolve(cfg_opts, false));
    }
  } catch (const ValidationError& e) {
    std::cerr << "htb: invalid input: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "htb: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
