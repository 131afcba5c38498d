#include <cstdint>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "rowfault/harness.hpp"

using namespace rowfault;

int main(int argc, char** argv) {
  CLI::App app{"rowfault-lab: simulated page steering, rowhammer templating and T-table fault attacks"};
  std::string scenario, config_path, out_dir;
  std::uint64_t seed = 0;
  unsigned jobs = 0;
  app.add_option("scenario", scenario,
                 "tables|drpfa|pfa|ecc_attack|ecc_stats|binpart|steer|template|e2e")
      ->required();
  app.add_option("--config", config_path, "JSON experiment config")->required()->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "64-bit run seed")->required();
  app.add_option("--out", out_dir, "output directory")->required();
  app.add_option("--jobs", jobs, "worker threads for DRPFA scoring")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);

  harness::ExperimentConfig cfg;
  try {
    std::ifstream in(config_path);
    const auto j = nlohmann::json::parse(in);
    cfg = harness::parse_config(j);
    const auto s = harness::parse_scenario(scenario);
    if (j.contains("scenario") && cfg.scenario != s) {
      throw harness::ConfigError("config file is for scenario '" +
                                 harness::scenario_name(cfg.scenario) + "'");
    }
    cfg.scenario = s;
    cfg.seed = seed;
    if (jobs) cfg.jobs = jobs;
    cfg.validate();
  } catch (const std::exception& e) {
    std::cerr << "rowfault-lab: invalid config: " << e.what() << '\n';
    return 2;
  }

  try {
    const auto rep = harness::run(cfg, out_dir);
    std::cout << rep.scenario << ' ' << (rep.ok ? "ok" : "failed at " + rep.failed_stage)
              << " wall_time_s=" << rep.wall_time_s << '\n'
              << rep.metrics.dump(2) << '\n';
    if (!rep.ok) {
      std::cerr << "rowfault-lab: stage '" << rep.failed_stage << "' failed\n";
      return 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "rowfault-lab: " << harness::scenario_name(cfg.scenario) << ": " << e.what()
              << '\n';
    return 1;
  }
  return 0;
}
