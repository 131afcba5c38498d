#include "rowfault/dram_model.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_set>

#include <json.hpp>

namespace rowfault::dram {

namespace {

std::uint64_t below(std::mt19937_64& rng, std::uint64_t n) { return rng() % n; }

int parity(std::uint64_t x) { return __builtin_parityll(x); }

std::uint64_t mask_of(const std::vector<int>& bits) {
  std::uint64_t m = 0;
  for (int b : bits) m |= std::uint64_t{1} << b;
  return m;
}

}  // namespace

void DramGeometry::validate() const {
  auto fail = [](const std::string& what) {
    throw std::invalid_argument("geometry: " + what);
  };
  if (column_bits < 1 || row_bits < 1) fail("column_bits and row_bits must be >= 1");
  if (row_lo < column_bits) fail("row slice overlaps the column slice");
  if (row_lo + row_bits > 40) fail("address space above 2^40 is not supported");
  if (address_space() < kPageSize) fail("address space smaller than a page");
  if (bank_fn.size() > 8) fail("at most 8 bank functions");
  if (n_banks != (1 << bank_fn.size())) {
    fail("n_banks must equal 2^|bank_fn| (" + std::to_string(1 << bank_fn.size()) + ")");
  }
  if (static_cast<std::size_t>(row_lo - column_bits) != bank_fn.size()) {
    fail("need exactly one bank function per bit between column and row slices");
  }
  std::set<int> gap_seen;
  for (const auto& fn : bank_fn) {
    if (fn.empty()) fail("empty bank function");
    std::set<int> bits(fn.begin(), fn.end());
    if (bits.size() != fn.size()) fail("repeated bit in a bank function");
    int gaps = 0;
    for (int b : fn) {
      if (b < 0 || b >= row_lo + row_bits) {
        fail("bank function bit " + std::to_string(b) + " outside the address");
      }
      if (b >= column_bits && b < row_lo) {
        ++gaps;
        if (!gap_seen.insert(b).second) fail("bank functions share a free bit");
      }
    }
    if (gaps != 1) fail("each bank function must use exactly one free bit");
  }
}

DramGeometry read_geometry(std::istream& in) {
  const auto j = nlohmann::json::parse(in);
  if (!j.is_object()) throw std::invalid_argument("geometry: expected an object");
  DramGeometry g;
  for (const auto& [key, value] : j.items()) {
    if (key == "n_banks") {
      g.n_banks = value.get<int>();
    } else if (key == "bank_fn") {
      g.bank_fn = value.get<std::vector<std::vector<int>>>();
    } else if (key == "row_bits") {
      g.row_bits = value.get<int>();
    } else if (key == "row_lo") {
      g.row_lo = value.get<int>();
    } else if (key == "column_bits") {
      g.column_bits = value.get<int>();
    } else {
      throw std::invalid_argument("geometry: unknown key '" + key + "'");
    }
  }
  g.validate();
  return g;
}

void write_geometry(std::ostream& out, const DramGeometry& g) {
  nlohmann::ordered_json j;
  j["n_banks"] = g.n_banks;
  j["bank_fn"] = g.bank_fn;
  j["column_bits"] = g.column_bits;
  j["row_lo"] = g.row_lo;
  j["row_bits"] = g.row_bits;
  out << j.dump(2) << '\n';
}

DramLocation map_address(const DramGeometry& g, Address addr) {
  if (addr >= g.address_space()) {
    throw std::out_of_range("map_address: address " + std::to_string(addr) +
                            " outside the simulated range");
  }
  DramLocation loc;
  loc.column = addr & (g.columns_per_row() - 1);
  loc.row = (addr >> g.row_lo) & (g.rows_per_bank() - 1);
  for (std::size_t i = 0; i < g.bank_fn.size(); ++i) {
    loc.bank |= parity(addr & mask_of(g.bank_fn[i])) << i;
  }
  return loc;
}

Address compose_address(const DramGeometry& g, const DramLocation& loc) {
  if (loc.bank < 0 || loc.bank >= g.n_banks || loc.row >= g.rows_per_bank() ||
      loc.column >= g.columns_per_row()) {
    throw std::out_of_range("compose_address: location outside the geometry");
  }
  Address addr = loc.column | (loc.row << g.row_lo);
  for (std::size_t i = 0; i < g.bank_fn.size(); ++i) {
    int gap = -1;
    for (int b : g.bank_fn[i]) {
      if (b >= g.column_bits && b < g.row_lo) gap = b;
    }
    const int want = (loc.bank >> i) & 1;
    if (parity(addr & mask_of(g.bank_fn[i])) != want) addr |= Address{1} << gap;
  }
  return addr;
}

void TimingModel::validate() const {
  if (hit_cycles == 0) throw std::invalid_argument("timing: cycles must be positive");
  if (!(conflict_cycles > miss_cycles && miss_cycles >= hit_cycles)) {
    throw std::invalid_argument("timing: need conflict > miss >= hit");
  }
  if (!(noise_std >= 0)) throw std::invalid_argument("timing: noise_std must be >= 0");
  if (noise_std == 0 && !(threshold > miss_cycles && threshold < conflict_cycles)) {
    throw std::invalid_argument("timing: threshold must lie between miss and conflict");
  }
}

double noise_std_for_error_rate(const TimingModel& t, double rate) {
  if (!(rate > 0 && rate < 0.5)) {
    throw std::invalid_argument("noise_std_for_error_rate: rate must be in (0, 0.5)");
  }
  const double margin =
      std::min(t.threshold - t.miss_cycles, t.conflict_cycles - t.threshold);
  if (!(margin > 0)) {
    throw std::invalid_argument("noise_std_for_error_rate: threshold outside the gap");
  }
  double lo = 0, hi = 40;
  for (int i = 0; i < 200; ++i) {
    const double z = 0.5 * (lo + hi);
    if (0.5 * std::erfc(z / std::sqrt(2.0)) > rate) {
      lo = z;
    } else {
      hi = z;
    }
  }
  return margin / (0.5 * (lo + hi));
}

double paired_access_latency(const DramGeometry& g, const TimingModel& t,
                             Address a1, Address a2, std::mt19937_64& rng) {
  const auto l1 = map_address(g, a1);
  const auto l2 = map_address(g, a2);
  const bool conflict = l1.bank == l2.bank && l1.row != l2.row;
  double cycles = conflict ? t.conflict_cycles : t.miss_cycles;
  if (t.noise_std > 0) cycles += std::normal_distribution<double>(0, t.noise_std)(rng);
  return cycles;
}

double calibrate_threshold(std::span<const double> samples) {
  std::vector<double> s(samples.begin(), samples.end());
  std::sort(s.begin(), s.end());
  if (s.size() < 2 || s.front() == s.back()) {
    throw std::invalid_argument("calibrate_threshold: need two distinct latencies");
  }
  const double n = static_cast<double>(s.size());
  double total = 0;
  for (double x : s) total += x;
  double left = 0, best = -1, threshold = 0;
  for (std::size_t k = 1; k < s.size(); ++k) {
    left += s[k - 1];
    if (s[k - 1] == s[k]) continue;
    const double w0 = static_cast<double>(k) / n;
    const double m0 = left / static_cast<double>(k);
    const double m1 = (total - left) / (n - static_cast<double>(k));
    const double between = w0 * (1 - w0) * (m0 - m1) * (m0 - m1);
    if (between > best) {
      best = between;
      threshold = 0.5 * (s[k - 1] + s[k]);
    }
  }
  return threshold;
}

PageTimer::PageTimer(DramGeometry g, TimingModel t, std::uint64_t seed,
                     int samples_per_pair)
    : geometry_(std::move(g)), timing_(t), rng_(seed), samples_(samples_per_pair) {
  geometry_.validate();
  timing_.validate();
  if (samples_ < 1 || samples_ % 2 == 0) {
    throw std::invalid_argument("PageTimer: samples per pair must be odd and >= 1");
  }
}

double PageTimer::operator()(Frame a, Frame b) {
  std::vector<double> v(samples_);
  for (auto& x : v) {
    x = paired_access_latency(geometry_, timing_, a * kPageSize, b * kPageSize, rng_);
  }
  measurements_ += samples_;
  std::nth_element(v.begin(), v.begin() + samples_ / 2, v.end());
  return v[samples_ / 2];
}

std::vector<Bin> bin_partition(std::span<const Frame> pages,
                               const LatencyOracle& oracle,
                               const BinPartitionOptions& options) {
  if (pages.empty()) throw std::invalid_argument("bin_partition: no pages");
  if (options.passes < 1) throw std::invalid_argument("bin_partition: passes must be >= 1");

  std::vector<Frame> reps;
  std::vector<std::size_t> where(pages.size());
  std::vector<char> is_rep(pages.size(), 0);
  auto conflicts = [&](Frame a, Frame b) { return oracle(a, b) > options.threshold; };

  for (std::size_t i = 0; i < pages.size(); ++i) {
    std::size_t b = 0;
    while (b < reps.size() && !conflicts(pages[i], reps[b])) ++b;
    if (b == reps.size()) {
      reps.push_back(pages[i]);
      is_rep[i] = 1;
    }
    where[i] = b;
  }

  for (int pass = 1; pass < options.passes; ++pass) {
    for (std::size_t i = 0; i < pages.size(); ++i) {
      if (is_rep[i]) continue;
      const std::size_t own = where[i];
      if (conflicts(pages[i], reps[own])) continue;
      for (std::size_t b = 0; b < reps.size(); ++b) {
        if (b != own && conflicts(pages[i], reps[b])) {
          where[i] = b;
          break;
        }
      }
    }
  }

  std::vector<Bin> bins(reps.size());
  for (std::size_t b = 0; b < reps.size(); ++b) bins[b].representative = reps[b];
  for (std::size_t i = 0; i < pages.size(); ++i) bins[where[i]].members.push_back(pages[i]);
  return bins;
}

BinQuality evaluate_bins(const std::vector<Bin>& bins, const DramGeometry& g) {
  BinQuality q;
  std::map<int, std::map<std::size_t, std::size_t>> per_bank;  // bank -> bin -> count
  q.mismatches.resize(bins.size());
  for (std::size_t b = 0; b < bins.size(); ++b) {
    std::map<int, std::size_t> banks;
    for (Frame f : bins[b].members) {
      const int bank = bank_of_frame(g, f);
      ++banks[bank];
      ++per_bank[bank][b];
      ++q.pages;
    }
    std::size_t majority = 0;
    for (const auto& [bank, n] : banks) majority = std::max(majority, n);
    q.mismatches[b] = bins[b].members.size() - majority;
  }
  bool exact = true;
  for (const auto& [bank, counts] : per_bank) {
    std::size_t home_count = 0, total = 0;
    for (const auto& [bin, n] : counts) {
      home_count = std::max(home_count, n);
      total += n;
    }
    q.misplaced += total - home_count;
    if (counts.size() != 1) exact = false;
  }
  for (std::size_t m : q.mismatches) {
    if (m) exact = false;
  }
  q.exact = exact;
  return q;
}

void write_bins_csv(std::ostream& out, const std::vector<Bin>& bins,
                    const DramGeometry& g) {
  std::vector<std::pair<Frame, std::size_t>> rows;
  for (std::size_t b = 0; b < bins.size(); ++b) {
    for (Frame f : bins[b].members) rows.emplace_back(f, b);
  }
  std::sort(rows.begin(), rows.end());
  out << "page,bin,true_bank\n";
  for (const auto& [page, bin] : rows) {
    out << page << ',' << bin << ',' << bank_of_frame(g, page) << '\n';
  }
}

VulnerabilityMap VulnerabilityMap::generate(const DramGeometry& g, std::uint64_t seed,
                                            const VulnerabilityOptions& options) {
  g.validate();
  if (!(options.cells_per_row >= 0) || options.min_threshold == 0 ||
      options.min_threshold > options.max_threshold) {
    throw std::invalid_argument("vulnerability map: invalid options");
  }
  VulnerabilityMap map;
  const double rows = static_cast<double>(g.n_banks) * static_cast<double>(g.rows_per_bank());
  const auto count = static_cast<std::uint64_t>(std::llround(rows * options.cells_per_row));
  std::mt19937_64 rng(seed);
  const std::uint64_t span = options.max_threshold - options.min_threshold + 1;
  for (std::uint64_t i = 0; i < count; ++i) {
    const int bank = static_cast<int>(below(rng, g.n_banks));
    const std::uint64_t row = below(rng, g.rows_per_bank());
    VulnerableCell cell;
    cell.offset = below(rng, g.columns_per_row());
    cell.bit = static_cast<int>(below(rng, 8));
    cell.threshold = options.min_threshold + below(rng, span);
    map.plant(bank, row, cell);
  }
  return map;
}

void VulnerabilityMap::plant(int bank, std::uint64_t row, const VulnerableCell& cell) {
  if (bank < 0 || cell.bit < 0 || cell.bit > 7 || cell.threshold == 0) {
    throw std::invalid_argument("vulnerability map: invalid cell");
  }
  auto& v = cells_[{bank, row}];
  v.push_back(cell);
  std::sort(v.begin(), v.end(), [](const VulnerableCell& a, const VulnerableCell& b) {
    return std::tie(a.offset, a.bit, a.threshold) < std::tie(b.offset, b.bit, b.threshold);
  });
}

std::size_t VulnerabilityMap::size() const {
  std::size_t n = 0;
  for (const auto& [key, v] : cells_) n += v.size();
  return n;
}

std::vector<Flip> hammer(const VulnerabilityMap& map, const DramGeometry& g,
                         int bank, std::uint64_t row_a, std::uint64_t row_b,
                         std::uint64_t activations) {
  if (bank < 0 || bank >= g.n_banks || row_a >= g.rows_per_bank() ||
      row_b >= g.rows_per_bank()) {
    throw std::out_of_range("hammer: aggressor outside the geometry");
  }
  if (row_a == row_b) throw std::invalid_argument("hammer: aggressors must be distinct rows");
  std::set<std::uint64_t> victims;
  for (std::uint64_t r : {row_a, row_b}) {
    if (r > 0) victims.insert(r - 1);
    if (r + 1 < g.rows_per_bank()) victims.insert(r + 1);
  }
  victims.erase(row_a);
  victims.erase(row_b);

  std::set<Flip> flips;
  for (std::uint64_t r : victims) {
    const auto it = map.cells().find({bank, r});
    if (it == map.cells().end()) continue;
    for (const auto& cell : it->second) {
      if (cell.threshold <= activations) flips.insert({bank, r, cell.offset, cell.bit});
    }
  }
  return {flips.begin(), flips.end()};
}

Address flip_address(const DramGeometry& g, const Flip& f) {
  return compose_address(g, {f.bank, f.row, f.offset});
}

TemplateResult template_bins(const std::vector<Bin>& bins,
                             const VulnerabilityMap& map, const DramGeometry& g,
                             const TemplateOptions& options) {
  if (options.activations_per_attempt == 0) {
    throw std::invalid_argument("template_bins: activations_per_attempt must be > 0");
  }
  std::unordered_set<Frame> owned;
  for (const auto& b : bins) owned.insert(b.members.begin(), b.members.end());

  TemplateResult result;
  std::mt19937_64 rng(options.seed);
  const std::uint64_t attempts_per_bin =
      options.budget_per_bin / options.activations_per_attempt;
  for (std::size_t k = bins.size(); k-- > 0;) {
    result.visit_order.push_back(k);
    const auto& members = bins[k].members;
    if (members.size() < 2) continue;
    for (std::uint64_t t = 0; t < attempts_per_bin; ++t) {
      ++result.attempts;
      const Frame a = members[below(rng, members.size())];
      Frame b = members[below(rng, members.size() - 1)];
      if (b == a) b = members.back();
      const auto la = map_address(g, a * kPageSize);
      const auto lb = map_address(g, b * kPageSize);
      // Pages misbinned into another bank produce no row conflicts.
      if (la.bank != lb.bank || la.row == lb.row) continue;
      for (const auto& flip :
           hammer(map, g, la.bank, la.row, lb.row, options.activations_per_attempt)) {
        const Address addr = flip_address(g, flip);
        const Frame page = addr / kPageSize;
        if (!owned.count(page)) continue;
        result.hit = TemplateHit{page, addr % kPageSize, flip, k, a, b,
                                 options.activations_per_attempt};
        return result;
      }
    }
  }
  return result;
}

}  // namespace rowfault::dram
