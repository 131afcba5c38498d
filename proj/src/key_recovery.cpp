#include "rowfault/key_recovery.hpp"

#include <algorithm>
#include <iomanip>
#include <limits>
#include <ostream>
#include <random>
#include <stdexcept>
#include <thread>
#include <unordered_set>

namespace rowfault::recovery {

namespace {

constexpr Byte kInvMix[4][4] = {{0x0e, 0x0b, 0x0d, 0x09},
                                {0x09, 0x0e, 0x0b, 0x0d},
                                {0x0d, 0x09, 0x0e, 0x0b},
                                {0x0b, 0x0d, 0x09, 0x0e}};

// column_lut[r][v]: inverse MixColumns image of a column whose only nonzero
// byte is InvS[v] at row r, packed with row 0 in the top byte.
struct InverseRoundLut {
  std::array<std::array<std::uint32_t, 256>, 4> column_lut{};

  InverseRoundLut() {
    const auto& inv = aes::inv_sbox();
    for (int r = 0; r < 4; ++r) {
      for (int v = 0; v < 256; ++v) {
        const Byte x = inv[v];
        column_lut[r][v] = aes::make_word(
            aes::gf_mul(kInvMix[0][r], x), aes::gf_mul(kInvMix[1][r], x),
            aes::gf_mul(kInvMix[2][r], x), aes::gf_mul(kInvMix[3][r], x));
      }
    }
  }
};

const InverseRoundLut& inverse_round_lut() {
  static const InverseRoundLut lut;
  return lut;
}

void check_diagonal(int diagonal) {
  if (diagonal < 0 || diagonal > 3) {
    throw std::invalid_argument("diagonal must be 0..3");
  }
}

// Diagonal bytes of every ciphertext, gathered once so that scoring touches a
// dense array.
std::vector<std::array<Byte, 4>> gather_diagonal(const CiphertextCorpus& corpus,
                                                 int diagonal) {
  const auto pos = diagonal_positions(diagonal);
  std::vector<std::array<Byte, 4>> out(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const Block& c = corpus.ciphertexts[i];
    out[i] = {c[pos[0]], c[pos[1]], c[pos[2]], c[pos[3]]};
  }
  return out;
}

double column_sei(const std::array<Histogram, 4>& hists,
                  SeiAggregation aggregation) {
  const double s0 = sei(hists[0]), s1 = sei(hists[1]), s2 = sei(hists[2]),
               s3 = sei(hists[3]);
  if (aggregation == SeiAggregation::Max) return std::max({s0, s1, s2, s3});
  return s0 + s1 + s2 + s3;
}

// Scores one guess on every checkpoint prefix.
void score_guess(const std::vector<std::array<Byte, 4>>& diag,
                 std::uint32_t guess, std::span<const std::size_t> checkpoints,
                 SeiAggregation aggregation, std::span<double> out) {
  const auto& lut = inverse_round_lut().column_lut;
  const Byte g0 = static_cast<Byte>(guess >> 24);
  const Byte g1 = static_cast<Byte>(guess >> 16);
  const Byte g2 = static_cast<Byte>(guess >> 8);
  const Byte g3 = static_cast<Byte>(guess);
  std::array<Histogram, 4> hists{};
  std::size_t next = 0;
  for (std::size_t k = 0; k < checkpoints.size(); ++k) {
    const std::size_t end = checkpoints[k];
    for (; next < end; ++next) {
      const auto& d = diag[next];
      const std::uint32_t col = lut[0][d[0] ^ g0] ^ lut[1][d[1] ^ g1] ^
                                lut[2][d[2] ^ g2] ^ lut[3][d[3] ^ g3];
      ++hists[0][col >> 24];
      ++hists[1][(col >> 16) & 0xff];
      ++hists[2][(col >> 8) & 0xff];
      ++hists[3][col & 0xff];
    }
    out[k] = column_sei(hists, aggregation);
  }
}

bool better(double sei_a, std::uint32_t a, double sei_b, std::uint32_t b) {
  return sei_a > sei_b || (sei_a == sei_b && a < b);
}

struct WorkerResult {
  std::uint32_t best_guess = 0;
  double best_sei = -1;
  bool has_best = false;
  std::vector<double> wrong_max;  // per checkpoint
  std::vector<double> correct;    // per checkpoint, filled by the owner
  bool saw_correct = false;
};

SEIReport run_drpfa(const CiphertextCorpus& corpus,
                    const CandidateSet& candidates,
                    const std::vector<std::size_t>& checkpoints,
                    const DrpfaOptions& options,
                    std::optional<std::uint32_t> correct) {
  if (corpus.size() == 0) {
    throw std::invalid_argument("drpfa: empty ciphertext corpus");
  }
  if (candidates.size() == 0) {
    throw std::invalid_argument("drpfa: empty candidate set");
  }
  if (options.target_round != 9) {
    throw std::invalid_argument("drpfa: only target round 9 is supported");
  }

  const auto diag = gather_diagonal(corpus, candidates.diagonal());
  const std::uint64_t n = candidates.size();
  const bool store = n <= kMaxStoredScores;
  const std::size_t n_checks = checkpoints.size();

  SEIReport report;
  report.diagonal = candidates.diagonal();
  if (store) report.scores.resize(n);

  const unsigned jobs = std::max(1u, options.jobs);
  const std::uint64_t per_job = (n + jobs - 1) / jobs;
  std::vector<WorkerResult> results(jobs);

  auto work = [&](unsigned job) {
    WorkerResult& res = results[job];
    res.wrong_max.assign(n_checks, -std::numeric_limits<double>::infinity());
    res.correct.assign(n_checks, 0.0);
    std::vector<double> series(n_checks);
    const std::uint64_t begin = job * per_job;
    const std::uint64_t end = std::min(n, begin + per_job);
    for (std::uint64_t i = begin; i < end; ++i) {
      const std::uint32_t g = candidates.at(i);
      score_guess(diag, g, checkpoints, options.aggregation, series);
      const double final_sei = series.back();
      if (store) report.scores[i] = {g, final_sei};
      if (!res.has_best || better(final_sei, g, res.best_sei, res.best_guess)) {
        res.best_guess = g;
        res.best_sei = final_sei;
        res.has_best = true;
      }
      if (correct && g == *correct) {
        res.correct = series;
        res.saw_correct = true;
      } else {
        for (std::size_t k = 0; k < n_checks; ++k) {
          res.wrong_max[k] = std::max(res.wrong_max[k], series[k]);
        }
      }
    }
  };

  if (jobs == 1) {
    work(0);
  } else {
    std::vector<std::thread> threads;
    threads.reserve(jobs);
    for (unsigned j = 0; j < jobs; ++j) threads.emplace_back(work, j);
    for (auto& t : threads) t.join();
  }

  bool have = false;
  std::uint32_t best = 0;
  double best_sei = 0;
  std::vector<double> wrong_max(n_checks,
                                -std::numeric_limits<double>::infinity());
  std::vector<double> correct_series;
  for (const auto& r : results) {
    if (r.has_best && (!have || better(r.best_sei, r.best_guess, best_sei, best))) {
      best = r.best_guess;
      best_sei = r.best_sei;
      have = true;
    }
    for (std::size_t k = 0; k < n_checks; ++k) {
      wrong_max[k] = std::max(wrong_max[k], r.wrong_max[k]);
    }
    if (r.saw_correct) correct_series = r.correct;
  }

  report.winner = ChunkGuess::from_value(candidates.diagonal(), best);
  report.winner_sei = best_sei;
  if (correct) {
    if (correct_series.empty()) {
      throw std::invalid_argument(
          "drpfa: correct guess is not in the candidate set");
    }
    for (std::size_t k = 0; k < n_checks; ++k) {
      report.series.push_back({checkpoints[k], correct_series[k], wrong_max[k]});
    }
  }
  return report;
}

}  // namespace

CiphertextCorpus generate_corpus(const Block& key, const aes::TTableSet& tables,
                                 std::size_t count, std::uint64_t seed,
                                 std::optional<aes::PersistentFault> fault,
                                 bool keep_plaintexts) {
  CiphertextCorpus corpus;
  corpus.fault = fault;
  corpus.true_key = key;
  corpus.ciphertexts.reserve(count);
  if (keep_plaintexts) corpus.plaintexts.reserve(count);
  const auto rk = aes::expand_key(key);
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    Block pt;
    for (int w = 0; w < 2; ++w) {
      const std::uint64_t r = rng();
      for (int b = 0; b < 8; ++b) pt[8 * w + b] = static_cast<Byte>(r >> (8 * b));
    }
    corpus.ciphertexts.push_back(aes::encrypt_block(pt, rk, tables));
    if (keep_plaintexts) corpus.plaintexts.push_back(pt);
  }
  return corpus;
}

std::uint32_t ChunkGuess::value() const {
  return aes::make_word(bytes[0], bytes[1], bytes[2], bytes[3]);
}

ChunkGuess ChunkGuess::from_value(int diagonal, std::uint32_t value) {
  check_diagonal(diagonal);
  return {diagonal,
          {aes::word_byte(value, 0), aes::word_byte(value, 1),
           aes::word_byte(value, 2), aes::word_byte(value, 3)}};
}

std::array<int, 4> diagonal_positions(int diagonal) {
  check_diagonal(diagonal);
  // Row r of column `diagonal` before the final ShiftRows sits at column
  // (diagonal - r) mod 4 of the ciphertext.
  std::array<int, 4> pos{};
  for (int r = 0; r < 4; ++r) pos[r] = 4 * ((diagonal - r) & 3) + r;
  return pos;
}

ChunkGuess chunk_of(const Block& k10, int diagonal) {
  const auto pos = diagonal_positions(diagonal);
  return {diagonal, {k10[pos[0]], k10[pos[1]], k10[pos[2]], k10[pos[3]]}};
}

double sei(const Histogram& histogram) {
  std::uint64_t total = 0;
  for (auto c : histogram) total += c;
  if (total == 0) {
    throw std::invalid_argument("sei: histogram is empty");
  }
  const double n = static_cast<double>(total);
  double acc = 0;
  for (auto c : histogram) {
    const double d = static_cast<double>(c) / n - 1.0 / 256.0;
    acc += d * d;
  }
  return acc;
}

Column partial_decrypt(const Block& ciphertext, const ChunkGuess& guess) {
  const auto pos = diagonal_positions(guess.diagonal);
  const auto& lut = inverse_round_lut().column_lut;
  std::uint32_t col = 0;
  for (int r = 0; r < 4; ++r) {
    col ^= lut[r][ciphertext[pos[r]] ^ guess.bytes[r]];
  }
  return {aes::word_byte(col, 0), aes::word_byte(col, 1),
          aes::word_byte(col, 2), aes::word_byte(col, 3)};
}

CandidateSet CandidateSet::explicit_values(int diagonal,
                                           std::vector<std::uint32_t> values) {
  check_diagonal(diagonal);
  CandidateSet s;
  s.diagonal_ = diagonal;
  s.values_ = std::move(values);
  return s;
}

CandidateSet CandidateSet::range(int diagonal, std::uint32_t first,
                                 std::uint32_t last) {
  check_diagonal(diagonal);
  if (last < first) throw std::invalid_argument("candidate range is empty");
  CandidateSet s;
  s.diagonal_ = diagonal;
  s.is_range_ = true;
  s.first_ = first;
  s.last_ = last;
  return s;
}

CandidateSet CandidateSet::full(int diagonal) {
  return range(diagonal, 0, std::numeric_limits<std::uint32_t>::max());
}

CandidateSet CandidateSet::sampled(const ChunkGuess& truth,
                                   std::size_t wrong_count,
                                   std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::uint32_t> values;
  values.reserve(wrong_count + 1);
  values.push_back(truth.value());
  std::unordered_set<std::uint32_t> seen{truth.value()};
  while (values.size() < wrong_count + 1) {
    const auto v = static_cast<std::uint32_t>(rng());
    if (seen.insert(v).second) values.push_back(v);
  }
  return explicit_values(truth.diagonal, std::move(values));
}

std::uint64_t CandidateSet::size() const {
  return is_range_ ? std::uint64_t{last_} - first_ + 1 : values_.size();
}

std::uint32_t CandidateSet::at(std::uint64_t i) const {
  return is_range_ ? static_cast<std::uint32_t>(first_ + i) : values_[i];
}

SEIReport drpfa(const CiphertextCorpus& corpus, const CandidateSet& candidates,
                const DrpfaOptions& options) {
  return run_drpfa(corpus, candidates, {corpus.size()}, options, std::nullopt);
}

SEIReport drpfa_convergence(const CiphertextCorpus& corpus,
                            const CandidateSet& candidates, std::size_t step,
                            const DrpfaOptions& options,
                            std::optional<std::uint32_t> correct) {
  if (corpus.size() == 0) {
    throw std::invalid_argument("drpfa: empty ciphertext corpus");
  }
  if (step == 0 || step > corpus.size()) {
    throw std::invalid_argument("drpfa_convergence: step must be in 1..corpus size");
  }
  if (!correct) {
    if (!corpus.true_key) {
      throw std::invalid_argument(
          "drpfa_convergence: needs the correct guess or a corpus true key");
    }
    const auto k10 = aes::expand_key(*corpus.true_key).round_key(10);
    correct = chunk_of(k10, candidates.diagonal()).value();
  }
  std::vector<std::size_t> checkpoints;
  for (std::size_t p = step; p < corpus.size(); p += step) checkpoints.push_back(p);
  checkpoints.push_back(corpus.size());
  return run_drpfa(corpus, candidates, checkpoints, options, correct);
}

std::optional<std::size_t> first_separation(const SEIReport& report) {
  for (const auto& p : report.series) {
    if (p.sei_correct > p.sei_wrong_max) return p.prefix_size;
  }
  return std::nullopt;
}

void write_convergence_csv(std::ostream& out, const SEIReport& report) {
  out << "prefix_size,sei_correct,sei_wrong_max\n";
  out << std::setprecision(17);
  for (const auto& p : report.series) {
    out << p.prefix_size << ',' << p.sei_correct << ',' << p.sei_wrong_max
        << '\n';
  }
}

void write_score_dump(std::ostream& out, const SEIReport& report) {
  out << std::setprecision(17);
  for (const auto& s : report.scores) {
    out << aes::word_hex(s.guess) << ',' << report.diagonal << ',' << s.sei
        << '\n';
  }
}

bool PfaResult::recovered() const {
  if (served_positions.empty()) return false;
  return std::all_of(served_positions.begin(), served_positions.end(),
                     [&](int p) { return key_bytes[p].has_value(); });
}

PfaResult pfa_last_round(const CiphertextCorpus& corpus, aes::TableStyle style,
                         const aes::PersistentFault& fault,
                         aes::Word original_value, aes::Word faulty_value,
                         const PfaOptions& options) {
  if (corpus.size() == 0) {
    throw std::invalid_argument("pfa: empty ciphertext corpus");
  }
  if (corpus.size() < options.min_corpus) {
    throw std::invalid_argument("pfa: corpus of " +
                                std::to_string(corpus.size()) +
                                " ciphertexts is below the floor of " +
                                std::to_string(options.min_corpus));
  }
  if ((original_value ^ faulty_value) == 0) {
    throw std::invalid_argument("pfa: original and faulty values are equal");
  }
  if (fault.last_round_table != (style == aes::TableStyle::SeparateLastRound)) {
    throw std::invalid_argument(
        "pfa: fault must target a table that round 10 reads");
  }

  PfaResult result;
  int row = -1;
  for (int r = 0; r < 4; ++r) {
    if (aes::last_round_table_for_row(style, r) == fault.table_id) row = r;
  }
  const Byte sbox_out = aes::word_byte(original_value, row);
  const double expected = static_cast<double>(corpus.size()) / 256.0;

  for (int c = 0; c < 4; ++c) {
    const int pos = 4 * c + row;
    result.served_positions.push_back(pos);
    Histogram h{};
    for (const auto& ct : corpus.ciphertexts) ++h[ct[pos]];

    int empty_value = -1;
    int empty_bins = 0;
    std::uint64_t smallest = std::numeric_limits<std::uint64_t>::max();
    std::uint64_t second = smallest;
    for (int v = 0; v < 256; ++v) {
      if (h[v] == 0) {
        ++empty_bins;
        empty_value = v;
      }
      if (h[v] < smallest) {
        second = smallest;
        smallest = h[v];
      } else if (h[v] < second) {
        second = h[v];
      }
    }
    result.confidence[pos] =
        std::min(1.0, static_cast<double>(second - smallest) / expected);
    if (empty_bins == 1) {
      result.key_bytes[pos] = static_cast<Byte>(empty_value ^ sbox_out);
    }
  }
  return result;
}

}  // namespace rowfault::recovery
