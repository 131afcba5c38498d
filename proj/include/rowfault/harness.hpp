#pragma once

// Experiment orchestration: JSON configuration, per-scenario runners, the
// end-to-end pipeline and the run report.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rowfault/aes_ttable.hpp"
#include "rowfault/dram_model.hpp"
#include "rowfault/ecc_channel.hpp"
#include "rowfault/key_recovery.hpp"
#include "rowfault/mem_subsys.hpp"

namespace rowfault::harness {

enum class Scenario { Tables, Drpfa, Pfa, EccAttack, EccStats, Binpart, Steer, Template, E2e };

Scenario parse_scenario(const std::string& name);
std::string scenario_name(Scenario s);

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// A planted vulnerable cell, addressed by page index within the attacker's
// pool and byte offset within that page.
struct PlantSpec {
  std::size_t pool_page = 0;
  std::uint64_t offset = 0;
  int bit = 0;
  std::uint64_t threshold = 1000000;
};

struct ExperimentConfig {
  Scenario scenario = Scenario::Tables;
  std::uint64_t seed = 0;
  unsigned jobs = 1;

  // cipher and key recovery
  std::optional<aes::Block> key;  // derived from the seed when absent
  aes::TableStyle style = aes::TableStyle::SharedTables;
  std::optional<aes::PersistentFault> fault;
  std::size_t corpus_size = 20000;
  std::size_t candidates = 4096;
  std::size_t step = 500;
  std::vector<int> diagonals = {0};
  recovery::SeiAggregation aggregation = recovery::SeiAggregation::Max;

  // ecc
  ecc::EccConfig ecc;
  ecc::TGeomParams tgeom;
  std::size_t trials = 1;
  std::size_t n_trials = 500;

  // dram
  dram::DramGeometry geometry;
  dram::TimingModel timing;
  std::optional<double> error_rate;  // per-sample misclassification
  std::size_t pages = 1024;
  int passes = 2;
  int samples_per_pair = 3;
  dram::VulnerabilityOptions vulnerability;
  std::vector<PlantSpec> plants;
  std::uint64_t budget_per_bin = 1000000000;
  std::uint64_t activations_per_attempt = 2000000;

  // allocator
  mem::AllocatorConfig allocator{10, 4, 1, {}};
  std::size_t noise_allocs = 0;
  std::size_t steer_pages = 32;

  void validate() const;
};

// Keys not listed in the schema are rejected. `scenario` and `seed` in the
// file are optional; the command line wins when both are given.
ExperimentConfig parse_config(const nlohmann::json& j);
nlohmann::ordered_json to_json(const ExperimentConfig& cfg);

struct RunReport {
  std::string scenario;
  nlohmann::ordered_json config;
  double wall_time_s = 0;  // not written to report.json
  nlohmann::ordered_json metrics;
  std::vector<std::string> artifacts;
  bool ok = true;
  std::string failed_stage;
};

// Writes artifacts into `out_dir` (created when missing) and report.json.
RunReport run(const ExperimentConfig& cfg, const std::filesystem::path& out_dir);

RunReport e2e_pipeline(const ExperimentConfig& cfg, const std::filesystem::path& out_dir);

nlohmann::ordered_json report_json(const RunReport& r);

// Independent 64-bit stream for stage `stream` of a run.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

// Byte offset of a T-table bit inside a page holding Te0..Te3 back to back,
// words stored little-endian.
struct TablePageLocation {
  int table_id = 0;
  aes::Byte entry = 0;
  aes::Word mask = 0;
};
TablePageLocation table_location(std::uint64_t page_offset, int bit);
std::uint64_t table_page_offset(int table_id, aes::Byte entry, aes::Word mask, int* bit);

}  // namespace rowfault::harness
