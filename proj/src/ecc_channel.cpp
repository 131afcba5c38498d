#include "rowfault/ecc_channel.hpp"

#include <cmath>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>

namespace rowfault::ecc {

namespace {

const aes::TTableSet& pristine_tables() {
  static const aes::TTableSet tables =
      aes::derive_tables(aes::TableStyle::SharedTables);
  return tables;
}

Block random_block(std::mt19937_64& rng) {
  Block b;
  for (int w = 0; w < 2; ++w) {
    const std::uint64_t r = rng();
    for (int i = 0; i < 8; ++i) b[8 * w + i] = static_cast<Byte>(r >> (8 * i));
  }
  return b;
}

}  // namespace

void EccConfig::validate() const {
  if (base_access_cycles == 0 || correction_overhead_cycles == 0) {
    throw std::invalid_argument("ecc: cycle counts must be positive");
  }
  if (correction_overhead_cycles < 100 * base_access_cycles) {
    throw std::invalid_argument(
        "ecc: correction overhead must be at least 100x the access cost");
  }
  // A clean encryption must stay below the correction threshold.
  if (correction_overhead_cycles <=
      aes::kAccessesPerEncryption * base_access_cycles) {
    throw std::invalid_argument(
        "ecc: correction overhead must exceed a full clean encryption");
  }
}

ObservedEncryption observe_encrypt(const Block& plaintext,
                                   const aes::RoundKeys& keys,
                                   const FaultState& state,
                                   const EccConfig& cfg) {
  ObservedEncryption out;
  out.next_state = state;
  out.observation.total_cycles =
      aes::kAccessesPerEncryption * cfg.base_access_cycles;
  if (!state.active) return out;

  const aes::PersistentFault& f = *state.active;
  const auto enc = aes::encrypt(plaintext, keys, pristine_tables());
  for (const auto& access : enc.trace) {
    if (access.table_id == f.table_id && access.index == f.entry_index) {
      out.observation.total_cycles += cfg.correction_overhead_cycles;
      if (cfg.observability == RoundObservability::Exact) {
        out.observation.correction_round = access.round;
      }
      if (cfg.correction_clears_fault) out.next_state.active.reset();
      break;
    }
  }
  return out;
}

EccOracle::EccOracle(const Block& key, EccConfig cfg)
    : keys_(aes::expand_key(key)), cfg_(cfg) {
  cfg_.validate();
}

void EccOracle::place_fault(const aes::PersistentFault& fault) {
  if (fault.last_round_table) {
    throw std::invalid_argument("ecc: the victim uses shared T-tables");
  }
  aes::validate(fault, pristine_tables());
  placed_ = fault;
  state_.active = fault;
  ++hammers_;
}

void EccOracle::rehammer() {
  if (!placed_) throw std::logic_error("ecc: no fault location to re-hammer");
  if (!state_.active) {
    state_.active = placed_;
    ++hammers_;
  }
}

void EccOracle::clear() { state_.active.reset(); }

EncryptionObservation EccOracle::observe(const Block& plaintext) {
  auto r = observe_encrypt(plaintext, keys_, state_, cfg_);
  state_ = r.next_state;
  ++encryptions_;
  return r.observation;
}

ProbabilityChain analytic_probs() {
  ProbabilityChain c;
  // One entry out of 256, 40 reads of the faulted table per encryption.
  c.p_none = std::pow(255.0 / 256.0, 4 * aes::kRounds);
  c.p_fault = 1.0 - c.p_none;
  c.expected_faulty_per_scan = 256.0 * c.p_fault;
  c.p_success = 1.0 / c.expected_faulty_per_scan;
  return c;
}

void TGeomParams::validate() const {
  if (!(p > 0.0 && p < 1.0)) {
    throw std::invalid_argument("tgeom: p must lie in (0, 1)");
  }
  if (d < 2) throw std::invalid_argument("tgeom: d must be at least 2");
}

double tgeom_pdf(long h, const TGeomParams& params) {
  params.validate();
  if (h < 1 || h > params.d - 1) return 0.0;
  const double q = 1.0 - params.p;
  return params.p * std::pow(q, static_cast<double>(h - 1)) /
         (1.0 - std::pow(q, static_cast<double>(params.d - 1)));
}

double tgeom_mean(const TGeomParams& params) {
  params.validate();
  double mean = 0;
  for (long h = 1; h <= params.d - 1; ++h) {
    mean += static_cast<double>(h) * tgeom_pdf(h, params);
  }
  return mean;
}

Block find_quiet_plaintext(EccOracle& oracle, std::mt19937_64& rng,
                           int retry_budget) {
  for (int attempt = 0; attempt < retry_budget; ++attempt) {
    const Block pt = random_block(rng);
    const auto obs = oracle.observe(pt);
    if (!obs.corrected(oracle.config())) return pt;
    oracle.rehammer();
  }
  throw std::runtime_error("find_quiet_plaintext: retry budget of " +
                           std::to_string(retry_budget) + " exhausted");
}

double quiet_fraction(std::size_t n_trials, std::uint64_t seed,
                      const EccConfig& cfg) {
  if (n_trials == 0) throw std::invalid_argument("quiet_fraction: n_trials must be >= 1");
  std::mt19937_64 rng(seed);
  std::size_t quiet = 0;
  for (std::size_t i = 0; i < n_trials; ++i) {
    const Block key = random_block(rng);
    const int table = static_cast<int>(rng() % 4);
    const Byte entry = static_cast<Byte>(rng());
    const aes::Word mask = aes::Word{1} << (rng() % 32);
    EccOracle oracle(key, cfg);
    oracle.place_fault({table, entry, mask, false});
    if (!oracle.observe(random_block(rng)).corrected(cfg)) ++quiet;
  }
  return static_cast<double>(quiet) / static_cast<double>(n_trials);
}

ScanResult scan_byte(EccOracle& oracle, const Block& base_plaintext,
                     int position, const KnownFault& fault,
                     std::vector<ScanRecord>* log, int trial) {
  if (position < 0 || position > 15 || position % 4 != fault.table_id) {
    throw std::invalid_argument(
        "scan_byte: position " + std::to_string(position) +
        " is not on row " + std::to_string(fault.table_id) +
        " of the state");
  }
  if (!oracle.fault_active()) oracle.rehammer();

  ScanResult result;
  Block pt = base_plaintext;
  for (int v = 0; v < 256; ++v) {
    pt[position] = static_cast<Byte>(v);
    const auto obs = oracle.observe(pt);
    ++result.encryptions_used;

    ScanRecord rec{trial, static_cast<Byte>(v), obs.correction_round, false};
    const bool corrected = obs.corrected(oracle.config());
    if (corrected && !obs.correction_round) {
      throw std::runtime_error(
          "scan_byte: a correction fired but its round is not observable");
    }
    if (corrected && *obs.correction_round == 1) {
      if (log) log->push_back(rec);
      result.winning_plaintext_value = static_cast<Byte>(v);
      result.recovered_key_byte = static_cast<Byte>(v ^ fault.entry_index);
      return result;
    }
    if (corrected) {
      ++result.restarts;
      rec.restarted = true;
      oracle.rehammer();
    }
    if (log) log->push_back(rec);
  }
  throw std::runtime_error(
      "scan_byte: no round-1 correction over all 256 values (model violation)");
}

FirstRoundKeyResult recover_first_round_key(
    EccOracle& oracle, const std::array<Byte, 4>& schedule,
    std::mt19937_64& rng, std::vector<ScanRecord>* log,
    const std::array<aes::Word, 4>& masks) {
  FirstRoundKeyResult out;
  const auto start = oracle.encryptions();
  int trial = 0;
  for (int table = 0; table < 4; ++table) {
    oracle.place_fault({table, schedule[table], masks[table], false});
    const Block base = find_quiet_plaintext(oracle, rng);
    for (int col = 0; col < 4; ++col) {
      const int pos = 4 * col + table;
      const auto r = scan_byte(oracle, base, pos, {table, schedule[table]}, log,
                               trial++);
      out.key[pos] = r.recovered_key_byte;
      out.restarts[pos] = r.restarts;
    }
  }
  out.encryptions = oracle.encryptions() - start;
  return out;
}

RestartStatistics restart_statistics(std::size_t n_trials, std::uint64_t seed,
                                     const TGeomParams& params,
                                     const EccConfig& cfg) {
  if (n_trials == 0) {
    throw std::invalid_argument("restart_statistics: n_trials must be >= 1");
  }
  params.validate();
  RestartStatistics stats;
  stats.n_trials = n_trials;
  stats.tgeom_mean = tgeom_mean(params);

  std::mt19937_64 master(seed);
  std::vector<double> samples;
  samples.reserve(n_trials);
  for (std::size_t i = 0; i < n_trials; ++i) {
    std::mt19937_64 rng(master());
    const Block key = random_block(rng);
    const int table = static_cast<int>(rng() % 4);
    const Byte entry = static_cast<Byte>(rng());
    const int col = static_cast<int>(rng() % 4);
    const aes::Word mask = aes::Word{1} << (rng() % 32);

    EccOracle oracle(key, cfg);
    oracle.place_fault({table, entry, mask, false});
    const Block base = find_quiet_plaintext(oracle, rng);
    const auto r = scan_byte(oracle, base, 4 * col + table, {table, entry});
    ++stats.histogram[r.restarts];
    samples.push_back(r.restarts);
  }

  double sum = 0;
  for (double s : samples) sum += s;
  stats.empirical_mean = sum / static_cast<double>(n_trials);
  if (n_trials > 1) {
    double ss = 0;
    for (double s : samples) ss += (s - stats.empirical_mean) * (s - stats.empirical_mean);
    stats.empirical_std = std::sqrt(ss / static_cast<double>(n_trials - 1));
  }

  long max_bin = params.d - 1;
  if (!stats.histogram.empty()) {
    max_bin = std::max(max_bin, stats.histogram.rbegin()->first);
  }
  for (long h = 0; h <= max_bin; ++h) {
    const auto it = stats.histogram.find(h);
    const double count = it == stats.histogram.end() ? 0.0 : static_cast<double>(it->second);
    stats.bins.push_back({h, count / static_cast<double>(n_trials), tgeom_pdf(h, params)});
  }
  return stats;
}

void write_restart_csv(std::ostream& out, const RestartStatistics& stats) {
  out << "restarts,empirical_freq,tgeom_pdf\n";
  out << std::setprecision(17);
  for (const auto& b : stats.bins) {
    out << b.restarts << ',' << b.empirical_freq << ',' << b.tgeom_pdf << '\n';
  }
}

std::map<long, std::uint64_t> read_restart_csv(std::istream& in,
                                               std::size_t n_trials) {
  std::map<long, std::uint64_t> hist;
  std::string line;
  if (!std::getline(in, line) || line != "restarts,empirical_freq,tgeom_pdf") {
    throw std::invalid_argument("restart csv: missing header");
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string h, f, g;
    if (!std::getline(fields, h, ',') || !std::getline(fields, f, ',') ||
        !std::getline(fields, g)) {
      throw std::invalid_argument("restart csv: malformed row '" + line + "'");
    }
    const auto count = static_cast<std::uint64_t>(
        std::llround(std::stod(f) * static_cast<double>(n_trials)));
    if (count) hist[std::stol(h)] = count;
  }
  return hist;
}

void write_campaign_log(std::ostream& out, const std::vector<ScanRecord>& log) {
  for (const auto& r : log) {
    out << "{\"trial\":" << r.trial
        << ",\"scanned_value\":" << static_cast<int>(r.scanned_value)
        << ",\"correction_round\":";
    if (r.correction_round) {
      out << *r.correction_round;
    } else {
      out << "null";
    }
    out << ",\"restarted\":" << (r.restarted ? "true" : "false") << "}\n";
  }
}

}  // namespace rowfault::ecc
