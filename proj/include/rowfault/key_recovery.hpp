#pragma once

// Statistical key recovery from persistent-fault ciphertext campaigns:
// the SEI distinguisher, the deep-round attack that partially decrypts to the
// round-9 S-box output, and the classic last-round empty-bin attack.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "rowfault/aes_ttable.hpp"

namespace rowfault::recovery {

using aes::Block;
using aes::Byte;
using aes::Column;

using Histogram = std::array<std::uint64_t, 256>;

struct CiphertextCorpus {
  std::vector<Block> ciphertexts;
  std::vector<Block> plaintexts;  // optional, empty or parallel to ciphertexts
  std::optional<aes::PersistentFault> fault;
  std::optional<Block> true_key;  // test mode only

  std::size_t size() const { return ciphertexts.size(); }
};

// Encrypts `count` uniformly random plaintexts under `tables`.
CiphertextCorpus generate_corpus(const Block& key, const aes::TTableSet& tables,
                                 std::size_t count, std::uint64_t seed,
                                 std::optional<aes::PersistentFault> fault = {},
                                 bool keep_plaintexts = false);

// A guess for the four round-10 key bytes that inverse ShiftRows gathers into
// one column. `bytes[r]` is the key byte at the ciphertext position of row r.
struct ChunkGuess {
  int diagonal = 0;
  std::array<Byte, 4> bytes{};

  std::uint32_t value() const;
  static ChunkGuess from_value(int diagonal, std::uint32_t value);

  bool operator==(const ChunkGuess&) const = default;
};

// Ciphertext positions of diagonal `d`, indexed by row.
std::array<int, 4> diagonal_positions(int diagonal);

// The true chunk on diagonal `d` of a round-10 key.
ChunkGuess chunk_of(const Block& k10, int diagonal);

// Squared Euclidean imbalance of a byte histogram against uniform.
double sei(const Histogram& histogram);

Column partial_decrypt(const Block& ciphertext, const ChunkGuess& guess);

// Candidate guesses on one diagonal: either an explicit list or the
// inclusive value range [first, last] (the full mode is [0, 2^32 - 1]).
class CandidateSet {
 public:
  static CandidateSet explicit_values(int diagonal,
                                      std::vector<std::uint32_t> values);
  static CandidateSet range(int diagonal, std::uint32_t first,
                            std::uint32_t last);
  static CandidateSet full(int diagonal);
  // `truth` plus `wrong_count` distinct uniformly drawn wrong guesses.
  static CandidateSet sampled(const ChunkGuess& truth, std::size_t wrong_count,
                              std::uint64_t seed);

  int diagonal() const { return diagonal_; }
  std::uint64_t size() const;
  std::uint32_t at(std::uint64_t i) const;
  bool is_explicit() const { return !is_range_; }

 private:
  int diagonal_ = 0;
  bool is_range_ = false;
  std::vector<std::uint32_t> values_;
  std::uint32_t first_ = 0;
  std::uint32_t last_ = 0;
};

struct ConvergencePoint {
  std::size_t prefix_size = 0;
  double sei_correct = 0;
  double sei_wrong_max = 0;
};

struct GuessScore {
  std::uint32_t guess = 0;
  double sei = 0;
};

struct SEIReport {
  int diagonal = 0;
  // Every candidate's score, in candidate order. Left empty for candidate
  // sets larger than kMaxStoredScores; the winner is still exact.
  std::vector<GuessScore> scores;
  ChunkGuess winner;
  double winner_sei = 0;
  std::vector<ConvergencePoint> series;
};

inline constexpr std::uint64_t kMaxStoredScores = 1u << 22;

// How the four per-byte SEI values of a reconstructed column combine into
// one score.
enum class SeiAggregation { Sum, Max };

struct DrpfaOptions {
  int target_round = 9;
  unsigned jobs = 1;
  SeiAggregation aggregation = SeiAggregation::Max;
};

// Ranks candidates by the SEI of their partial decryptions (per-byte SEI
// combined per `aggregation`; a single-entry fault biases only one byte, so
// the max is the default).
// Ties go to the smallest guess value.
SEIReport drpfa(const CiphertextCorpus& corpus, const CandidateSet& candidates,
                const DrpfaOptions& options = {});

// Scores every prefix of `step`, 2*step, ... (the corpus size is always the
// last prefix) and records the correct guess against the best wrong guess.
// `correct` defaults to the chunk derived from corpus.true_key.
SEIReport drpfa_convergence(const CiphertextCorpus& corpus,
                            const CandidateSet& candidates, std::size_t step,
                            const DrpfaOptions& options = {},
                            std::optional<std::uint32_t> correct = {});

// First prefix size whose correct SEI strictly exceeds every wrong SEI.
std::optional<std::size_t> first_separation(const SEIReport& report);

void write_convergence_csv(std::ostream& out, const SEIReport& report);
void write_score_dump(std::ostream& out, const SEIReport& report);

struct PfaOptions {
  std::size_t min_corpus = 2000;
};

struct PfaResult {
  std::array<std::optional<Byte>, 16> key_bytes{};  // round-10 key
  std::array<double, 16> confidence{};
  std::vector<int> served_positions;

  // True when every served position yielded a key byte.
  bool recovered() const;
};

// Last-round persistent fault analysis: a faulted table entry makes one
// output byte value impossible at every ciphertext position the table feeds
// in round 10. Positions not fed by the faulted table stay empty.
PfaResult pfa_last_round(const CiphertextCorpus& corpus, aes::TableStyle style,
                         const aes::PersistentFault& fault,
                         aes::Word original_value, aes::Word faulty_value,
                         const PfaOptions& options = {});

}  // namespace rowfault::recovery
