#include "rowfault/harness.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

namespace rowfault::harness {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

const std::pair<const char*, Scenario> kScenarios[] = {
    {"tables", Scenario::Tables},       {"drpfa", Scenario::Drpfa},
    {"pfa", Scenario::Pfa},             {"ecc_attack", Scenario::EccAttack},
    {"ecc_stats", Scenario::EccStats},  {"binpart", Scenario::Binpart},
    {"steer", Scenario::Steer},         {"template", Scenario::Template},
    {"e2e", Scenario::E2e},
};

constexpr mem::Pid kAttacker = 1;
constexpr mem::Pid kVictim = 2;
constexpr std::uint64_t kVictimTag = 0x7ab1e5;

// Seed streams.
enum : std::uint64_t {
  kKeyStream = 1,
  kCorpusStream,
  kStatsStream,
  kTimerStream,
  kVulnStream,
  kTemplateStream,
  kSteerStream,
  kQuietStream,
  kCandidateStream = 16,
  kTrialStream = 1024,
};

void check_keys(const json& j, std::initializer_list<const char*> allowed,
                const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return k == a; })) {
      throw ConfigError(where + ": unknown key '" + k + "'");
    }
  }
}

template <class T>
void get_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

std::uint64_t parse_u64(const json& v) {
  if (v.is_string()) return std::stoull(v.get<std::string>(), nullptr, 0);
  return v.get<std::uint64_t>();
}

aes::Word parse_word(const json& v) {
  if (v.is_string()) return static_cast<aes::Word>(std::stoul(v.get<std::string>(), nullptr, 16));
  return v.get<aes::Word>();
}

aes::Block seeded_block(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  aes::Block b{};
  for (int w = 0; w < 2; ++w) {
    const std::uint64_t r = rng();
    for (int i = 0; i < 8; ++i) b[8 * w + i] = static_cast<aes::Byte>(r >> (8 * i));
  }
  return b;
}

aes::Block key_for(const ExperimentConfig& cfg) {
  return cfg.key ? *cfg.key : seeded_block(derive_seed(cfg.seed, kKeyStream));
}

std::string hex(const aes::Block& b) { return aes::to_hex(b); }

std::string byte_hex(aes::Byte b) {
  static const char* digits = "0123456789abcdef";
  return {digits[b >> 4], digits[b & 15]};
}

ojson fault_json(const aes::PersistentFault& f) {
  ojson j;
  j["table"] = f.table_id;
  j["entry"] = f.entry_index;
  j["mask"] = aes::word_hex(f.xor_mask);
  j["last_round_table"] = f.last_round_table;
  return j;
}

class Artifacts {
 public:
  Artifacts(const fs::path& dir, RunReport& report) : dir_(dir), report_(report) {
    fs::create_directories(dir_);
  }
  std::ofstream open(const std::string& name) {
    std::ofstream out(dir_ / name, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + (dir_ / name).string());
    report_.artifacts.push_back(name);
    return out;
  }

 private:
  fs::path dir_;
  RunReport& report_;
};

dram::TimingModel effective_timing(const ExperimentConfig& cfg) {
  dram::TimingModel t = cfg.timing;
  if (cfg.error_rate) t.noise_std = dram::noise_std_for_error_rate(t, *cfg.error_rate);
  return t;
}

std::vector<dram::Bin> partition(const ExperimentConfig& cfg,
                                 const std::vector<dram::Frame>& pool, ojson& metrics) {
  const auto timing = effective_timing(cfg);
  dram::PageTimer timer(cfg.geometry, timing, derive_seed(cfg.seed, kTimerStream),
                        cfg.samples_per_pair);
  const auto bins = dram::bin_partition(
      pool, [&](dram::Frame a, dram::Frame b) { return timer(a, b); },
      {cfg.timing.threshold, cfg.passes});
  const auto q = dram::evaluate_bins(bins, cfg.geometry);
  metrics["noise_std"] = timing.noise_std;
  metrics["bins"] = bins.size();
  metrics["exact_bank_partition"] = q.exact;
  metrics["misplaced_pages"] = q.misplaced;
  metrics["misplaced_rate"] = q.misplaced_rate();
  const auto min_mm = *std::min_element(q.mismatches.begin(), q.mismatches.end());
  metrics["last_bin_mismatches"] = q.mismatches.back();
  metrics["min_bin_mismatches"] = min_mm;
  metrics["last_bin_fewest_mismatches"] = q.mismatches.back() == min_mm;
  metrics["pair_measurements"] = timer.measurements();
  return bins;
}

dram::VulnerabilityMap build_map(const ExperimentConfig& cfg,
                                 const std::vector<dram::Frame>& pool) {
  auto map = dram::VulnerabilityMap::generate(
      cfg.geometry, derive_seed(cfg.seed, kVulnStream), cfg.vulnerability);
  for (const auto& p : cfg.plants) {
    if (p.pool_page >= pool.size()) throw ConfigError("plant: pool_page outside the pool");
    const auto loc = dram::map_address(cfg.geometry, pool[p.pool_page] * dram::kPageSize + p.offset);
    map.plant(loc.bank, loc.row, {loc.column, p.bit, p.threshold});
  }
  return map;
}

void write_map_csv(std::ostream& out, const dram::VulnerabilityMap& map) {
  out << "bank,row,offset,bit,threshold\n";
  for (const auto& [key, cells] : map.cells()) {
    for (const auto& c : cells) {
      out << key.first << ',' << key.second << ',' << c.offset << ',' << c.bit << ','
          << c.threshold << '\n';
    }
  }
}

ojson hit_json(const dram::TemplateHit& h) {
  ojson j;
  j["page"] = h.page;
  j["page_offset"] = h.page_offset;
  j["bit"] = h.flip.bit;
  j["bank"] = h.flip.bank;
  j["row"] = h.flip.row;
  j["bin"] = h.bin;
  j["aggressor_pages"] = {h.aggressor_a, h.aggressor_b};
  return j;
}

// Runs DRPFA on each configured diagonal. Returns true when every winner is
// the true chunk; fills `k10` with the winners.
bool run_drpfa(const ExperimentConfig& cfg, const recovery::CiphertextCorpus& corpus,
               const aes::Block& key, Artifacts& art, ojson& out, aes::Block& k10) {
  const auto true_k10 = aes::expand_key(key).round_key(10);
  const recovery::DrpfaOptions opts{9, cfg.jobs, cfg.aggregation};
  bool all = true;
  out["diagonals"] = ojson::array();
  for (int d : cfg.diagonals) {
    const auto truth = recovery::chunk_of(true_k10, d);
    const auto cands = recovery::CandidateSet::sampled(
        truth, cfg.candidates, derive_seed(cfg.seed, kCandidateStream + d));
    const auto rep = recovery::drpfa_convergence(corpus, cands, cfg.step, opts);
    const std::string suffix = "_d" + std::to_string(d) + ".csv";
    {
      auto f = art.open("convergence" + suffix);
      recovery::write_convergence_csv(f, rep);
    }
    {
      auto f = art.open("scores" + suffix);
      recovery::write_score_dump(f, rep);
    }
    const auto sep = recovery::first_separation(rep);
    ojson dj;
    dj["diagonal"] = d;
    dj["winner"] = aes::word_hex(rep.winner.value());
    dj["truth"] = aes::word_hex(truth.value());
    dj["correct"] = rep.winner == truth;
    dj["winner_sei"] = rep.winner_sei;
    dj["first_separation"] = sep ? ojson(*sep) : ojson(nullptr);
    out["diagonals"].push_back(dj);
    all = all && rep.winner == truth;
    const auto pos = recovery::diagonal_positions(d);
    for (int r = 0; r < 4; ++r) k10[pos[r]] = rep.winner.bytes[r];
  }
  out["all_chunks_correct"] = all;
  std::set<int> ds(cfg.diagonals.begin(), cfg.diagonals.end());
  if (ds.size() == 4) {
    const auto master = aes::recover_master_key(k10);
    out["recovered_key"] = hex(master);
    out["key_correct"] = master == key;
  }
  return all;
}

ojson pfa_json(const recovery::PfaResult& r, const aes::Block& k10) {
  ojson j;
  j["served_positions"] = r.served_positions;
  j["recovered"] = r.recovered();
  bool correct = true;
  ojson bytes = ojson::array();
  for (int pos : r.served_positions) {
    ojson b;
    b["position"] = pos;
    b["key_byte"] = r.key_bytes[pos] ? ojson(byte_hex(*r.key_bytes[pos])) : ojson(nullptr);
    b["truth"] = byte_hex(k10[pos]);
    b["confidence"] = r.confidence[pos];
    if (r.key_bytes[pos] && *r.key_bytes[pos] != k10[pos]) correct = false;
    bytes.push_back(b);
  }
  j["bytes"] = bytes;
  j["recovered_bytes_correct"] = correct;
  return j;
}

aes::Word entry_value(const aes::TTableSet& t, const aes::PersistentFault& f) {
  return t.table(f.table_id, f.last_round_table)[f.entry_index];
}

void scenario_tables(const ExperimentConfig& cfg, Artifacts& art, RunReport& rep) {
  const auto tables = aes::derive_tables(cfg.style);
  const auto shown = cfg.fault ? aes::inject_fault(tables, *cfg.fault) : tables;
  {
    auto out = art.open("tables.csv");
    out << "set,table,entry,word\n";
    for (int last = 0; last < 2; ++last) {
      if (last && !shown.last_round) break;
      for (int t = 0; t < 4; ++t) {
        for (int x = 0; x < 256; ++x) {
          out << (last ? "last" : "te") << ',' << t << ',' << x << ','
              << aes::word_hex(shown.table(t, last)[x]) << '\n';
        }
      }
    }
  }
  const auto key = key_for(cfg);
  const auto rk = aes::expand_key(key);
  std::vector<aes::TestVector> vectors;
  for (std::uint64_t i = 0; i < 16; ++i) {
    const auto pt = seeded_block(derive_seed(cfg.seed, kTrialStream + i));
    vectors.push_back({key, pt, aes::encrypt_block(pt, rk, tables)});
  }
  {
    auto out = art.open("vectors.csv");
    aes::write_test_vectors(out, vectors);
  }
  rep.metrics["key"] = hex(key);
  if (cfg.fault) {
    const auto before = entry_value(tables, *cfg.fault);
    const auto after = entry_value(shown, *cfg.fault);
    rep.metrics["fault"] = fault_json(*cfg.fault);
    rep.metrics["before"] = aes::word_hex(before);
    rep.metrics["after"] = aes::word_hex(after);
    rep.metrics["flipped_bits"] = std::popcount(before ^ after);
  }
}

void scenario_drpfa(const ExperimentConfig& cfg, Artifacts& art, RunReport& rep) {
  if (!cfg.fault) throw ConfigError("drpfa: a fault is required");
  const auto key = key_for(cfg);
  const auto tables = aes::inject_fault(aes::derive_tables(cfg.style), *cfg.fault);
  const auto corpus = recovery::generate_corpus(key, tables, cfg.corpus_size,
                                                derive_seed(cfg.seed, kCorpusStream), cfg.fault);
  rep.metrics["key"] = hex(key);
  rep.metrics["fault"] = fault_json(*cfg.fault);
  aes::Block k10{};
  run_drpfa(cfg, corpus, key, art, rep.metrics, k10);
}

void scenario_pfa(const ExperimentConfig& cfg, Artifacts& art, RunReport& rep) {
  if (!cfg.fault) throw ConfigError("pfa: a fault is required");
  const auto key = key_for(cfg);
  const auto tables = aes::derive_tables(cfg.style);
  const auto faulty = aes::inject_fault(tables, *cfg.fault);
  const auto corpus = recovery::generate_corpus(key, faulty, cfg.corpus_size,
                                                derive_seed(cfg.seed, kCorpusStream), cfg.fault);
  const auto r = recovery::pfa_last_round(corpus, cfg.style, *cfg.fault,
                                          entry_value(tables, *cfg.fault),
                                          entry_value(faulty, *cfg.fault));
  const auto k10 = aes::expand_key(key).round_key(10);
  rep.metrics["key"] = hex(key);
  rep.metrics["fault"] = fault_json(*cfg.fault);
  rep.metrics["pfa"] = pfa_json(r, k10);
  auto out = art.open("pfa.csv");
  out << "position,key_byte,truth,confidence\n";
  for (int pos : r.served_positions) {
    out << pos << ',' << (r.key_bytes[pos] ? byte_hex(*r.key_bytes[pos]) : "") << ','
        << byte_hex(k10[pos]) << ',' << r.confidence[pos] << '\n';
  }
}

void scenario_ecc_attack(const ExperimentConfig& cfg, Artifacts& art, RunReport& rep) {
  std::size_t successes = 0;
  std::uint64_t restarts = 0, encryptions = 0;
  std::vector<ecc::ScanRecord> log;
  for (std::size_t t = 0; t < cfg.trials; ++t) {
    std::mt19937_64 rng(derive_seed(cfg.seed, kTrialStream + t));
    const aes::Block key = cfg.key ? *cfg.key : seeded_block(rng());
    std::array<aes::Byte, 4> schedule{};
    std::array<aes::Word, 4> masks{};
    for (int i = 0; i < 4; ++i) {
      schedule[i] = static_cast<aes::Byte>(rng());
      masks[i] = aes::Word{1} << (rng() % 32);
    }
    ecc::EccOracle oracle(key, cfg.ecc);
    const auto r = ecc::recover_first_round_key(oracle, schedule, rng,
                                                t < 10 ? &log : nullptr, masks);
    if (r.key == key) ++successes;
    for (auto n : r.restarts) restarts += n;
    encryptions += r.encryptions;
  }
  {
    auto out = art.open("campaign.jsonl");
    ecc::write_campaign_log(out, log);
  }
  rep.metrics["trials"] = cfg.trials;
  rep.metrics["successes"] = successes;
  rep.metrics["byte_scans"] = 16 * cfg.trials;
  rep.metrics["restart_mean"] =
      static_cast<double>(restarts) / static_cast<double>(16 * cfg.trials);
  rep.metrics["encryptions"] = encryptions;
}

void scenario_ecc_stats(const ExperimentConfig& cfg, Artifacts& art, RunReport& rep) {
  const auto stats =
      ecc::restart_statistics(cfg.n_trials, derive_seed(cfg.seed, kStatsStream), cfg.tgeom, cfg.ecc);
  {
    auto out = art.open("restarts.csv");
    ecc::write_restart_csv(out, stats);
  }
  const auto chain = ecc::analytic_probs();
  rep.metrics["n_trials"] = cfg.n_trials;
  rep.metrics["restart_mean"] = stats.empirical_mean;
  rep.metrics["restart_std"] = stats.empirical_std;
  rep.metrics["tgeom_mean"] = stats.tgeom_mean;
  rep.metrics["p_none"] = chain.p_none;
  rep.metrics["p_fault"] = chain.p_fault;
  rep.metrics["expected_faulty_per_scan"] = chain.expected_faulty_per_scan;
  rep.metrics["p_success"] = chain.p_success;
  rep.metrics["quiet_fraction"] =
      ecc::quiet_fraction(cfg.n_trials, derive_seed(cfg.seed, kQuietStream), cfg.ecc);
}

std::vector<dram::Frame> first_frames(std::size_t n) {
  std::vector<dram::Frame> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

void scenario_binpart(const ExperimentConfig& cfg, Artifacts& art, RunReport& rep) {
  const auto pool = first_frames(cfg.pages);
  const auto bins = partition(cfg, pool, rep.metrics);
  auto out = art.open("bins.csv");
  dram::write_bins_csv(out, bins, cfg.geometry);
}

void scenario_steer(const ExperimentConfig& cfg, Artifacts& art, RunReport& rep) {
  mem::Allocator alloc(cfg.allocator);
  std::vector<mem::Frame> owned;
  for (std::size_t i = 0; i < cfg.steer_pages; ++i) {
    const auto f = alloc.alloc({kAttacker, 1, 0, {}});
    owned.push_back(f.front());
  }
  std::mt19937_64 rng(derive_seed(cfg.seed, kSteerStream));
  const auto target = owned[rng() % owned.size()];
  const auto r = mem::steer_scenario(alloc, kAttacker, kVictim, target,
                                     {0, cfg.noise_allocs, 999, kVictimTag});
  alloc.check_invariants();
  {
    auto out = art.open("allocator.txt");
    alloc.dump(out);
  }
  rep.metrics["target"] = target;
  rep.metrics["victim_frame"] = r.victim_frames.front();
  rep.metrics["noise_frames"] = r.noise_frames;
  rep.metrics["success"] = r.success;
}

void scenario_template(const ExperimentConfig& cfg, Artifacts& art, RunReport& rep) {
  const auto pool = first_frames(cfg.pages);
  ojson part;
  const auto bins = partition(cfg, pool, part);
  rep.metrics["partition"] = part;
  const auto map = build_map(cfg, pool);
  {
    auto out = art.open("vulnerability_map.csv");
    write_map_csv(out, map);
  }
  const auto r = dram::template_bins(
      bins, map, cfg.geometry,
      {cfg.budget_per_bin, cfg.activations_per_attempt, derive_seed(cfg.seed, kTemplateStream)});
  rep.metrics["vulnerable_cells"] = map.size();
  rep.metrics["visit_order"] = r.visit_order;
  rep.metrics["attempts"] = r.attempts;
  rep.metrics["hit"] = r.hit ? hit_json(*r.hit) : ojson(nullptr);
}

using Runner = void (*)(const ExperimentConfig&, Artifacts&, RunReport&);

Runner runner_for(Scenario s) {
  switch (s) {
    case Scenario::Tables: return scenario_tables;
    case Scenario::Drpfa: return scenario_drpfa;
    case Scenario::Pfa: return scenario_pfa;
    case Scenario::EccAttack: return scenario_ecc_attack;
    case Scenario::EccStats: return scenario_ecc_stats;
    case Scenario::Binpart: return scenario_binpart;
    case Scenario::Steer: return scenario_steer;
    case Scenario::Template: return scenario_template;
    case Scenario::E2e: return nullptr;
  }
  return nullptr;
}

void write_report(const fs::path& dir, const RunReport& rep) {
  std::ofstream out(dir / "report.json", std::ios::binary);
  if (!out) throw std::runtime_error("cannot write report.json");
  out << report_json(rep).dump(2) << '\n';
}

}  // namespace

Scenario parse_scenario(const std::string& name) {
  for (const auto& [n, s] : kScenarios) {
    if (name == n) return s;
  }
  throw ConfigError("unknown scenario '" + name + "'");
}

std::string scenario_name(Scenario s) {
  for (const auto& [n, v] : kScenarios) {
    if (v == s) return n;
  }
  return "?";
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + (stream + 1) * 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

TablePageLocation table_location(std::uint64_t page_offset, int bit) {
  if (page_offset >= 4 * 256 * 4 || bit < 0 || bit > 7) {
    throw std::out_of_range("table_location: offset outside the T-table page");
  }
  TablePageLocation loc;
  loc.table_id = static_cast<int>(page_offset / 1024);
  loc.entry = static_cast<aes::Byte>((page_offset % 1024) / 4);
  loc.mask = aes::Word{1} << (8 * (page_offset % 4) + bit);
  return loc;
}

std::uint64_t table_page_offset(int table_id, aes::Byte entry, aes::Word mask, int* bit) {
  if (table_id < 0 || table_id > 3 || std::popcount(mask) != 1) {
    throw std::invalid_argument("table_page_offset: need a table id and a single-bit mask");
  }
  const int pos = std::countr_zero(mask);
  if (bit) *bit = pos % 8;
  return static_cast<std::uint64_t>(table_id) * 1024 + entry * 4u + pos / 8;
}

void ExperimentConfig::validate() const {
  if (jobs < 1) throw ConfigError("jobs must be >= 1");
  if (corpus_size < 1) throw ConfigError("corpus_size must be >= 1");
  if (candidates < 1) throw ConfigError("candidates must be >= 1");
  if (step < 1 || step > corpus_size) throw ConfigError("step must be in 1..corpus_size");
  if (diagonals.empty()) throw ConfigError("diagonals must not be empty");
  std::set<int> ds;
  for (int d : diagonals) {
    if (d < 0 || d > 3 || !ds.insert(d).second) {
      throw ConfigError("diagonals must be distinct values in 0..3");
    }
  }
  if (trials < 1 || n_trials < 1) throw ConfigError("trials and n_trials must be >= 1");
  ecc.validate();
  tgeom.validate();
  geometry.validate();
  timing.validate();
  if (error_rate) effective_timing(*this);
  if (pages < 1 || pages > geometry.total_frames()) {
    throw ConfigError("pages must be in 1..frames of the geometry");
  }
  if (passes < 1) throw ConfigError("passes must be >= 1");
  if (samples_per_pair < 1 || samples_per_pair % 2 == 0) {
    throw ConfigError("samples_per_pair must be odd");
  }
  if (activations_per_attempt == 0) throw ConfigError("activations_per_attempt must be > 0");
  for (const auto& p : plants) {
    if (p.pool_page >= pages || p.offset >= dram::kPageSize || p.bit < 0 || p.bit > 7 ||
        p.threshold == 0) {
      throw ConfigError("plant outside the pool or with an invalid cell");
    }
  }
  allocator.validate();
  if (steer_pages < 1) throw ConfigError("steer_pages must be >= 1");
  if (fault) aes::validate(*fault, aes::derive_tables(style));
  if ((scenario == Scenario::Drpfa || scenario == Scenario::Pfa) && !fault) {
    throw ConfigError(scenario_name(scenario) + ": a fault is required");
  }
  if (scenario == Scenario::E2e) {
    if (style != aes::TableStyle::SharedTables) {
      throw ConfigError("e2e: the victim uses shared T-tables");
    }
    const std::size_t frames =
        allocator.max_order_blocks << static_cast<std::size_t>(allocator.max_order);
    if (pages > (std::size_t{1} << allocator.max_order) || pages >= frames) {
      throw ConfigError("e2e: pool must fit one max-order block with frames to spare");
    }
    if (frames > geometry.total_frames()) {
      throw ConfigError("e2e: allocator manages more frames than the geometry holds");
    }
  }
}

ExperimentConfig parse_config(const json& j) {
  check_keys(j,
             {"scenario", "seed", "jobs", "key", "style", "fault", "corpus_size", "candidates",
              "step", "diagonals", "aggregation", "ecc", "tgeom", "trials", "n_trials",
              "geometry", "timing", "error_rate", "pages", "passes", "samples_per_pair",
              "vulnerability", "plants", "budget_per_bin", "activations_per_attempt",
              "allocator", "noise_allocs", "steer_pages"},
             "config");
  ExperimentConfig c;
  try {
    if (j.contains("scenario")) c.scenario = parse_scenario(j.at("scenario").get<std::string>());
    if (j.contains("seed")) c.seed = parse_u64(j.at("seed"));
    get_if(j, "jobs", c.jobs);
    if (j.contains("key") && !j.at("key").is_null()) c.key = aes::parse_block(j.at("key").get<std::string>());
    if (j.contains("style")) {
      const auto s = j.at("style").get<std::string>();
      if (s == "shared") {
        c.style = aes::TableStyle::SharedTables;
      } else if (s == "separate") {
        c.style = aes::TableStyle::SeparateLastRound;
      } else {
        throw ConfigError("style must be 'shared' or 'separate'");
      }
    }
    if (j.contains("fault") && !j.at("fault").is_null()) {
      const auto& f = j.at("fault");
      check_keys(f, {"table", "entry", "mask", "last_round_table"}, "fault");
      aes::PersistentFault pf;
      pf.table_id = f.at("table").get<int>();
      const int entry = f.at("entry").get<int>();
      if (entry < 0 || entry > 255) throw ConfigError("fault: entry must be 0..255");
      pf.entry_index = static_cast<aes::Byte>(entry);
      pf.xor_mask = parse_word(f.at("mask"));
      get_if(f, "last_round_table", pf.last_round_table);
      c.fault = pf;
    }
    get_if(j, "corpus_size", c.corpus_size);
    get_if(j, "candidates", c.candidates);
    get_if(j, "step", c.step);
    get_if(j, "diagonals", c.diagonals);
    if (j.contains("aggregation")) {
      const auto a = j.at("aggregation").get<std::string>();
      if (a == "max") {
        c.aggregation = recovery::SeiAggregation::Max;
      } else if (a == "sum") {
        c.aggregation = recovery::SeiAggregation::Sum;
      } else {
        throw ConfigError("aggregation must be 'max' or 'sum'");
      }
    }
    if (j.contains("ecc")) {
      const auto& e = j.at("ecc");
      check_keys(e, {"base_access_cycles", "correction_overhead_cycles",
                     "correction_clears_fault", "observability"}, "ecc");
      get_if(e, "base_access_cycles", c.ecc.base_access_cycles);
      get_if(e, "correction_overhead_cycles", c.ecc.correction_overhead_cycles);
      get_if(e, "correction_clears_fault", c.ecc.correction_clears_fault);
      if (e.contains("observability")) {
        const auto o = e.at("observability").get<std::string>();
        if (o == "exact") {
          c.ecc.observability = ecc::RoundObservability::Exact;
        } else if (o == "none") {
          c.ecc.observability = ecc::RoundObservability::None;
        } else {
          throw ConfigError("ecc.observability must be 'exact' or 'none'");
        }
      }
    }
    if (j.contains("tgeom")) {
      check_keys(j.at("tgeom"), {"p", "d"}, "tgeom");
      get_if(j.at("tgeom"), "p", c.tgeom.p);
      get_if(j.at("tgeom"), "d", c.tgeom.d);
    }
    get_if(j, "trials", c.trials);
    get_if(j, "n_trials", c.n_trials);
    if (j.contains("geometry")) {
      std::istringstream in(j.at("geometry").dump());
      c.geometry = dram::read_geometry(in);
    }
    if (j.contains("timing")) {
      const auto& t = j.at("timing");
      check_keys(t, {"hit_cycles", "miss_cycles", "conflict_cycles", "noise_std", "threshold"},
                 "timing");
      get_if(t, "hit_cycles", c.timing.hit_cycles);
      get_if(t, "miss_cycles", c.timing.miss_cycles);
      get_if(t, "conflict_cycles", c.timing.conflict_cycles);
      get_if(t, "noise_std", c.timing.noise_std);
      get_if(t, "threshold", c.timing.threshold);
    }
    if (j.contains("error_rate") && !j.at("error_rate").is_null()) c.error_rate = j.at("error_rate").get<double>();
    get_if(j, "pages", c.pages);
    get_if(j, "passes", c.passes);
    get_if(j, "samples_per_pair", c.samples_per_pair);
    if (j.contains("vulnerability")) {
      const auto& v = j.at("vulnerability");
      check_keys(v, {"cells_per_row", "min_threshold", "max_threshold"}, "vulnerability");
      get_if(v, "cells_per_row", c.vulnerability.cells_per_row);
      if (v.contains("min_threshold")) c.vulnerability.min_threshold = parse_u64(v.at("min_threshold"));
      if (v.contains("max_threshold")) c.vulnerability.max_threshold = parse_u64(v.at("max_threshold"));
    }
    if (j.contains("plants")) {
      for (const auto& p : j.at("plants")) {
        check_keys(p, {"pool_page", "offset", "bit", "threshold"}, "plant");
        PlantSpec s;
        s.pool_page = p.at("pool_page").get<std::size_t>();
        s.offset = p.at("offset").get<std::uint64_t>();
        s.bit = p.at("bit").get<int>();
        if (p.contains("threshold")) s.threshold = parse_u64(p.at("threshold"));
        c.plants.push_back(s);
      }
    }
    if (j.contains("budget_per_bin")) c.budget_per_bin = parse_u64(j.at("budget_per_bin"));
    if (j.contains("activations_per_attempt")) {
      c.activations_per_attempt = parse_u64(j.at("activations_per_attempt"));
    }
    if (j.contains("allocator")) {
      const auto& a = j.at("allocator");
      check_keys(a, {"max_order", "max_order_blocks", "n_cpus", "low", "high", "refill_batch",
                     "release_batch"}, "allocator");
      get_if(a, "max_order", c.allocator.max_order);
      get_if(a, "max_order_blocks", c.allocator.max_order_blocks);
      get_if(a, "n_cpus", c.allocator.n_cpus);
      get_if(a, "low", c.allocator.pfc.low);
      get_if(a, "high", c.allocator.pfc.high);
      get_if(a, "refill_batch", c.allocator.pfc.refill_batch);
      get_if(a, "release_batch", c.allocator.pfc.release_batch);
    }
    get_if(j, "noise_allocs", c.noise_allocs);
    get_if(j, "steer_pages", c.steer_pages);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const std::logic_error& e) {
    if (dynamic_cast<const ConfigError*>(&e)) throw;
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

ojson to_json(const ExperimentConfig& c) {
  ojson j;
  j["scenario"] = scenario_name(c.scenario);
  j["seed"] = c.seed;
  j["key"] = c.key ? ojson(hex(*c.key)) : ojson(nullptr);
  j["style"] = c.style == aes::TableStyle::SharedTables ? "shared" : "separate";
  j["fault"] = c.fault ? fault_json(*c.fault) : ojson(nullptr);
  j["corpus_size"] = c.corpus_size;
  j["candidates"] = c.candidates;
  j["step"] = c.step;
  j["diagonals"] = c.diagonals;
  j["aggregation"] = c.aggregation == recovery::SeiAggregation::Max ? "max" : "sum";
  j["ecc"] = {{"base_access_cycles", c.ecc.base_access_cycles},
              {"correction_overhead_cycles", c.ecc.correction_overhead_cycles},
              {"correction_clears_fault", c.ecc.correction_clears_fault},
              {"observability",
               c.ecc.observability == ecc::RoundObservability::Exact ? "exact" : "none"}};
  j["tgeom"] = {{"p", c.tgeom.p}, {"d", c.tgeom.d}};
  j["trials"] = c.trials;
  j["n_trials"] = c.n_trials;
  j["geometry"] = {{"n_banks", c.geometry.n_banks},
                   {"bank_fn", c.geometry.bank_fn},
                   {"column_bits", c.geometry.column_bits},
                   {"row_lo", c.geometry.row_lo},
                   {"row_bits", c.geometry.row_bits}};
  j["timing"] = {{"hit_cycles", c.timing.hit_cycles},
                 {"miss_cycles", c.timing.miss_cycles},
                 {"conflict_cycles", c.timing.conflict_cycles},
                 {"noise_std", c.timing.noise_std},
                 {"threshold", c.timing.threshold}};
  j["error_rate"] = c.error_rate ? ojson(*c.error_rate) : ojson(nullptr);
  j["pages"] = c.pages;
  j["passes"] = c.passes;
  j["samples_per_pair"] = c.samples_per_pair;
  j["vulnerability"] = {{"cells_per_row", c.vulnerability.cells_per_row},
                        {"min_threshold", c.vulnerability.min_threshold},
                        {"max_threshold", c.vulnerability.max_threshold}};
  j["plants"] = ojson::array();
  for (const auto& p : c.plants) {
    j["plants"].push_back({{"pool_page", p.pool_page},
                           {"offset", p.offset},
                           {"bit", p.bit},
                           {"threshold", p.threshold}});
  }
  j["budget_per_bin"] = c.budget_per_bin;
  j["activations_per_attempt"] = c.activations_per_attempt;
  j["allocator"] = {{"max_order", c.allocator.max_order},
                    {"max_order_blocks", c.allocator.max_order_blocks},
                    {"n_cpus", c.allocator.n_cpus},
                    {"low", c.allocator.pfc.low},
                    {"high", c.allocator.pfc.high},
                    {"refill_batch", c.allocator.pfc.refill_batch},
                    {"release_batch", c.allocator.pfc.release_batch}};
  j["noise_allocs"] = c.noise_allocs;
  j["steer_pages"] = c.steer_pages;
  return j;
}

ojson report_json(const RunReport& r) {
  ojson j;
  j["scenario"] = r.scenario;
  j["ok"] = r.ok;
  j["failed_stage"] = r.failed_stage.empty() ? ojson(nullptr) : ojson(r.failed_stage);
  j["config"] = r.config;
  j["metrics"] = r.metrics;
  j["artifacts"] = r.artifacts;
  return j;
}

RunReport e2e_pipeline(const ExperimentConfig& cfg, const fs::path& out_dir) {
  RunReport rep;
  rep.scenario = "e2e";
  rep.config = to_json(cfg);
  rep.metrics["stages"] = ojson::array();
  Artifacts art(out_dir, rep);
  auto stage = [&](const std::string& name, bool ok, ojson detail) {
    detail["stage"] = name;
    detail["ok"] = ok;
    rep.metrics["stages"].push_back(detail);
    if (!ok && rep.failed_stage.empty()) {
      rep.ok = false;
      rep.failed_stage = name;
    }
    return ok;
  };

  // Attacker grabs one contiguous block as its page pool.
  mem::Allocator alloc(cfg.allocator);
  auto pool = alloc.alloc({kAttacker, cfg.pages, 0, {}});
  pool.resize(cfg.pages);
  {
    ojson d;
    d["first_frame"] = pool.front();
    d["pages"] = pool.size();
    stage("allocate_pool", true, d);
  }

  ojson part;
  const auto bins = partition(cfg, pool, part);
  {
    auto out = art.open("bins.csv");
    dram::write_bins_csv(out, bins, cfg.geometry);
  }
  stage("bin_partition", true, part);

  const auto map = build_map(cfg, pool);
  {
    auto out = art.open("vulnerability_map.csv");
    write_map_csv(out, map);
  }
  const auto tr = dram::template_bins(
      bins, map, cfg.geometry,
      {cfg.budget_per_bin, cfg.activations_per_attempt, derive_seed(cfg.seed, kTemplateStream)});
  {
    ojson d;
    d["vulnerable_cells"] = map.size();
    d["visit_order"] = tr.visit_order;
    d["attempts"] = tr.attempts;
    d["hit"] = tr.hit ? hit_json(*tr.hit) : ojson(nullptr);
    if (!tr.hit) d["reason"] = "template stage produced none";
    if (!stage("template", tr.hit.has_value(), d)) return rep;
  }
  const auto& hit = *tr.hit;

  const auto steer = mem::steer_scenario(alloc, kAttacker, kVictim, hit.page,
                                         {0, cfg.noise_allocs, 999, kVictimTag});
  alloc.check_invariants();
  {
    ojson d;
    d["target"] = hit.page;
    d["victim_frame"] = steer.victim_frames.front();
    d["noise_frames"] = steer.noise_frames;
    if (!stage("steer", steer.success, d)) return rep;
  }
  const dram::Frame victim_page = steer.victim_frames.front();

  // The victim's page now holds Te0..Te3; hammering the same aggressors
  // flips the templated cell again.
  const auto clean = aes::derive_tables(aes::TableStyle::SharedTables);
  const auto la = dram::map_address(cfg.geometry, hit.aggressor_a * dram::kPageSize);
  const auto lb = dram::map_address(cfg.geometry, hit.aggressor_b * dram::kPageSize);
  std::optional<aes::PersistentFault> fault;
  {
    ojson d;
    d["flips"] = ojson::array();
    for (const auto& f : dram::hammer(map, cfg.geometry, la.bank, la.row, lb.row, hit.activations)) {
      const auto addr = dram::flip_address(cfg.geometry, f);
      if (addr / dram::kPageSize != victim_page) continue;
      const auto loc = table_location(addr % dram::kPageSize, f.bit);
      const aes::PersistentFault pf{loc.table_id, loc.entry, loc.mask, false};
      d["flips"].push_back({{"page_offset", addr % dram::kPageSize}, {"bit", f.bit}});
      if (!fault) {
        fault = pf;
        d["fault"] = fault_json(pf);
        d["before"] = aes::word_hex(entry_value(clean, pf));
        d["after"] = aes::word_hex(entry_value(clean, pf) ^ pf.xor_mask);
      }
    }
    if (!stage("rehammer", fault.has_value(), d)) return rep;
  }
  const auto faulty = aes::inject_fault(clean, *fault);

  const auto key = key_for(cfg);
  const auto corpus = recovery::generate_corpus(key, faulty, cfg.corpus_size,
                                                derive_seed(cfg.seed, kCorpusStream), fault);
  {
    ojson d;
    d["ciphertexts"] = corpus.size();
    d["key"] = hex(key);
    stage("corpus", true, d);
  }

  // Last-round PFA is reported but never aborts the pipeline.
  const auto k10 = aes::expand_key(key).round_key(10);
  {
    ojson d;
    bool ok = false;
    try {
      const auto r = recovery::pfa_last_round(corpus, aes::TableStyle::SharedTables, *fault,
                                              entry_value(clean, *fault),
                                              entry_value(faulty, *fault));
      d = pfa_json(r, k10);
      ok = r.recovered() && d["recovered_bytes_correct"].get<bool>();
    } catch (const std::exception& e) {
      d["error"] = e.what();
    }
    d["stage"] = "pfa";
    d["ok"] = ok;
    rep.metrics["stages"].push_back(d);
    rep.metrics["pfa_recovered"] = ok;
  }

  ojson d;
  aes::Block k10_found{};
  const bool drpfa_ok = run_drpfa(cfg, corpus, key, art, d, k10_found);
  rep.metrics["drpfa_recovered"] = drpfa_ok;
  if (!stage("drpfa", drpfa_ok, d)) return rep;
  if (d.contains("key_correct")) {
    ojson m;
    m["recovered_key"] = d["recovered_key"];
    stage("master_key", d["key_correct"].get<bool>(), m);
  }
  return rep;
}

RunReport run(const ExperimentConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  RunReport rep;
  if (cfg.scenario == Scenario::E2e) {
    rep = e2e_pipeline(cfg, out_dir);
  } else {
    rep.scenario = scenario_name(cfg.scenario);
    rep.config = to_json(cfg);
    Artifacts art(out_dir, rep);
    runner_for(cfg.scenario)(cfg, art, rep);
  }
  rep.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_report(out_dir, rep);
  return rep;
}

}  // namespace rowfault::harness
