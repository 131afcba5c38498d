#pragma once

// DRAM address mapping, row-conflict timing, bin partitioning on that timing
// channel, and a seeded Rowhammer vulnerability model with a templating loop.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <utility>
#include <vector>

namespace rowfault::dram {

using Address = std::uint64_t;
using Frame = std::uint64_t;

inline constexpr std::uint64_t kPageSize = 4096;

// Column = address bits [0, column_bits). Row = bits [row_lo, row_lo +
// row_bits). Bank bit i = XOR of the address bits in bank_fn[i]. Each bank
// function must own exactly one of the bits between the column and row
// slices, which makes the mapping a bijection.
struct DramGeometry {
  int n_banks = 16;
  std::vector<std::vector<int>> bank_fn = {{12, 16}, {13, 17}, {14, 18}, {15, 19}};
  int column_bits = 12;
  int row_lo = 16;
  int row_bits = 14;

  void validate() const;
  std::uint64_t rows_per_bank() const { return std::uint64_t{1} << row_bits; }
  std::uint64_t columns_per_row() const { return std::uint64_t{1} << column_bits; }
  std::uint64_t address_space() const {
    return std::uint64_t{1} << (row_lo + row_bits);
  }
  std::uint64_t total_frames() const { return address_space() / kPageSize; }

  bool operator==(const DramGeometry&) const = default;
};

DramGeometry read_geometry(std::istream& in);
void write_geometry(std::ostream& out, const DramGeometry& g);

struct DramLocation {
  int bank = 0;
  std::uint64_t row = 0;
  std::uint64_t column = 0;

  bool operator==(const DramLocation&) const = default;
};

// Throws std::out_of_range outside the simulated address space.
DramLocation map_address(const DramGeometry& g, Address addr);
Address compose_address(const DramGeometry& g, const DramLocation& loc);

inline int bank_of_frame(const DramGeometry& g, Frame f) {
  return map_address(g, f * kPageSize).bank;
}

struct TimingModel {
  std::uint32_t hit_cycles = 50;
  std::uint32_t miss_cycles = 150;
  std::uint32_t conflict_cycles = 400;
  double noise_std = 0;
  double threshold = 275;

  void validate() const;
};

// Per-sample noise that makes a single comparison against `threshold`
// misclassify with probability `rate` (on the tighter side).
double noise_std_for_error_rate(const TimingModel& t, double rate);

double paired_access_latency(const DramGeometry& g, const TimingModel& t,
                             Address a1, Address a2, std::mt19937_64& rng);

// Two-class split of latency samples (Otsu); returns the midpoint between the
// classes. Throws if fewer than two distinct values are present.
double calibrate_threshold(std::span<const double> samples);

// Pair timing between two page frames as seen by the attacker.
using LatencyOracle = std::function<double(Frame, Frame)>;

// Median of `samples_per_pair` paired accesses at the two frames' base
// addresses.
class PageTimer {
 public:
  PageTimer(DramGeometry g, TimingModel t, std::uint64_t seed,
            int samples_per_pair = 3);
  double operator()(Frame a, Frame b);
  std::uint64_t measurements() const { return measurements_; }

 private:
  DramGeometry geometry_;
  TimingModel timing_;
  std::mt19937_64 rng_;
  int samples_;
  std::uint64_t measurements_ = 0;
};

struct Bin {
  std::vector<Frame> members;
  Frame representative = 0;
};

struct BinPartitionOptions {
  double threshold = 275;
  int passes = 2;
};

// Pass 1 places each page into the first bin whose representative conflicts
// with it, or opens a new bin. Later passes re-time every non-representative
// page against all representatives: it stays if its own representative
// conflicts, otherwise moves to the first conflicting bin.
std::vector<Bin> bin_partition(std::span<const Frame> pages,
                               const LatencyOracle& oracle,
                               const BinPartitionOptions& options = {});

struct BinQuality {
  std::size_t pages = 0;
  std::size_t misplaced = 0;  // outside the bin holding most of its bank
  std::vector<std::size_t> mismatches;  // per bin, members not of its majority bank
  bool exact = false;  // bins equal the bank partition
  double misplaced_rate() const {
    return pages ? static_cast<double>(misplaced) / static_cast<double>(pages) : 0;
  }
};

BinQuality evaluate_bins(const std::vector<Bin>& bins, const DramGeometry& g);

// `page,bin,true_bank`, sorted by page.
void write_bins_csv(std::ostream& out, const std::vector<Bin>& bins,
                    const DramGeometry& g);

struct VulnerableCell {
  std::uint64_t offset = 0;  // byte within the row
  int bit = 0;
  std::uint64_t threshold = 0;  // activations per aggressor

  bool operator==(const VulnerableCell&) const = default;
};

struct VulnerabilityOptions {
  double cells_per_row = 1.0 / 16384;
  std::uint64_t min_threshold = 500000;
  std::uint64_t max_threshold = 1500000;
};

class VulnerabilityMap {
 public:
  using RowKey = std::pair<int, std::uint64_t>;  // bank, row

  VulnerabilityMap() = default;
  static VulnerabilityMap generate(const DramGeometry& g, std::uint64_t seed,
                                   const VulnerabilityOptions& options = {});

  void plant(int bank, std::uint64_t row, const VulnerableCell& cell);
  const std::map<RowKey, std::vector<VulnerableCell>>& cells() const { return cells_; }
  std::size_t size() const;
  bool empty() const { return cells_.empty(); }

  bool operator==(const VulnerabilityMap&) const = default;

 private:
  std::map<RowKey, std::vector<VulnerableCell>> cells_;
};

struct Flip {
  int bank = 0;
  std::uint64_t row = 0;
  std::uint64_t offset = 0;
  int bit = 0;

  bool operator==(const Flip&) const = default;
  auto operator<=>(const Flip&) const = default;
};

// Double-sided style: rows next to either aggressor (excluding the aggressors)
// lose every cell whose threshold is at most `activations`. Sorted, no
// duplicates.
std::vector<Flip> hammer(const VulnerabilityMap& map, const DramGeometry& g,
                         int bank, std::uint64_t row_a, std::uint64_t row_b,
                         std::uint64_t activations);

Address flip_address(const DramGeometry& g, const Flip& f);

struct TemplateOptions {
  std::uint64_t budget_per_bin = 1000000000;
  std::uint64_t activations_per_attempt = 2000000;
  std::uint64_t seed = 0;
};

struct TemplateHit {
  Frame page = 0;
  std::uint64_t page_offset = 0;
  Flip flip;
  std::size_t bin = 0;
  Frame aggressor_a = 0;
  Frame aggressor_b = 0;
  std::uint64_t activations = 0;
};

struct TemplateResult {
  std::optional<TemplateHit> hit;
  std::vector<std::size_t> visit_order;
  std::uint64_t attempts = 0;
};

// Starting from the last bin, hammers random page pairs of one bin until a
// flip lands in one of the partitioned (attacker-owned) pages or the bin's
// budget runs out, then moves to the preceding bin.
TemplateResult template_bins(const std::vector<Bin>& bins,
                             const VulnerabilityMap& map, const DramGeometry& g,
                             const TemplateOptions& options = {});

}  // namespace rowfault::dram
