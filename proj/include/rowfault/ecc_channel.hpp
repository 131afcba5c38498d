#pragma once

// ECC-protected T-table memory with a correction-latency side channel.
//
// A corrected read costs hundreds of thousands of cycles, which an attacker
// can time (and, with a cache probe, attribute to a round). The corrected
// value is what the cipher consumes, and the scrub clears the fault, so the
// attacker has to re-hammer after every correction. Attacker-facing code sees
// only EncryptionObservation: no ciphertext, no byte position.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <random>
#include <vector>

#include "rowfault/aes_ttable.hpp"

namespace rowfault::ecc {

using aes::Block;
using aes::Byte;

enum class RoundObservability { Exact, None };

struct EccConfig {
  std::uint64_t base_access_cycles = 100;
  std::uint64_t correction_overhead_cycles = 200000;
  bool correction_clears_fault = true;
  RoundObservability observability = RoundObservability::Exact;

  void validate() const;
};

struct EncryptionObservation {
  std::optional<int> correction_round;  // withheld under RoundObservability::None
  std::uint64_t total_cycles = 0;

  bool corrected(const EccConfig& cfg) const {
    return total_cycles >= cfg.correction_overhead_cycles;
  }
};

struct FaultState {
  std::optional<aes::PersistentFault> active;
};

struct ObservedEncryption {
  EncryptionObservation observation;
  FaultState next_state;
};

// Simulator-side primitive. The cipher always consumes corrected data, so the
// pristine shared tables drive the computation; the first lookup of the faulty
// entry triggers the correction.
ObservedEncryption observe_encrypt(const Block& plaintext,
                                   const aes::RoundKeys& keys,
                                   const FaultState& state,
                                   const EccConfig& cfg);

// Stateful victim: a fixed secret key, shared T-tables in ECC memory and the
// attacker's hammering primitive.
class EccOracle {
 public:
  EccOracle(const Block& key, EccConfig cfg = {});

  // Places (or moves) the reproducible flip and injects it.
  void place_fault(const aes::PersistentFault& fault);
  // Re-injects the placed flip; the attacker's restart.
  void rehammer();
  // Scrubs the fault without an access (test setup).
  void clear();

  bool fault_active() const { return state_.active.has_value(); }
  const EccConfig& config() const { return cfg_; }

  EncryptionObservation observe(const Block& plaintext);

  std::uint64_t encryptions() const { return encryptions_; }
  std::uint64_t hammer_sessions() const { return hammers_; }

 private:
  aes::RoundKeys keys_;
  EccConfig cfg_;
  std::optional<aes::PersistentFault> placed_;
  FaultState state_;
  std::uint64_t encryptions_ = 0;
  std::uint64_t hammers_ = 0;
};

struct ProbabilityChain {
  double p_none = 0;
  double p_fault = 0;
  double expected_faulty_per_scan = 0;
  double p_success = 0;
};

// (255/256)^40 and the values derived from it for one byte scan.
ProbabilityChain analytic_probs();

struct TGeomParams {
  double p = 0.026;
  int d = 40;

  void validate() const;
};

double tgeom_pdf(long h, const TGeomParams& params);
// Direct summation over the support {1, ..., d-1}.
double tgeom_mean(const TGeomParams& params);

// Finds a plaintext with no correction in any round, re-hammering after every
// probe that consumes the fault.
Block find_quiet_plaintext(EccOracle& oracle, std::mt19937_64& rng,
                           int retry_budget = 1000);

// Fraction of single encryptions (random key, single-bit fault and
// plaintext per trial) that never touch the faulty entry.
double quiet_fraction(std::size_t n_trials, std::uint64_t seed,
                      const EccConfig& cfg = {});

struct ScanRecord {
  int trial = 0;
  Byte scanned_value = 0;
  std::optional<int> correction_round;
  bool restarted = false;
};

struct ScanResult {
  Byte recovered_key_byte = 0;
  Byte winning_plaintext_value = 0;
  std::uint32_t restarts = 0;
  std::uint32_t encryptions_used = 0;
};

struct KnownFault {
  int table_id = 0;
  Byte entry_index = 0;
};

// Sweeps plaintext byte `position` (which must sit on row `fault.table_id`)
// from 0 to 255 until the correction lands in round 1.
ScanResult scan_byte(EccOracle& oracle, const Block& base_plaintext,
                     int position, const KnownFault& fault,
                     std::vector<ScanRecord>* log = nullptr, int trial = 0);

struct FirstRoundKeyResult {
  Block key{};
  std::array<std::uint32_t, 16> restarts{};
  std::uint64_t encryptions = 0;
};

// One flip per table T0..T3 (entry indices from `schedule`, masks from
// `masks`), four scans per table.
FirstRoundKeyResult recover_first_round_key(
    EccOracle& oracle, const std::array<Byte, 4>& schedule,
    std::mt19937_64& rng, std::vector<ScanRecord>* log = nullptr,
    const std::array<aes::Word, 4>& masks = {0x01000000u, 0x00010000u,
                                             0x00000100u, 0x00000001u});

struct RestartBin {
  long restarts = 0;
  double empirical_freq = 0;
  double tgeom_pdf = 0;
};

struct RestartStatistics {
  std::size_t n_trials = 0;
  double empirical_mean = 0;
  double empirical_std = 0;
  std::map<long, std::uint64_t> histogram;
  double tgeom_mean = 0;
  std::vector<RestartBin> bins;  // 0 .. max(observed, d - 1)
};

// Independent single-byte campaigns (random key, table, entry and row
// position per trial).
RestartStatistics restart_statistics(std::size_t n_trials, std::uint64_t seed,
                                     const TGeomParams& params = {},
                                     const EccConfig& cfg = {});

void write_restart_csv(std::ostream& out, const RestartStatistics& stats);
std::map<long, std::uint64_t> read_restart_csv(std::istream& in,
                                               std::size_t n_trials);

// One JSON object per line.
void write_campaign_log(std::ostream& out, const std::vector<ScanRecord>& log);

}  // namespace rowfault::ecc
