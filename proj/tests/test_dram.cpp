#include <doctest.h>

#include <algorithm>
#include <random>
#include <set>
#include <sstream>

#include "rowfault/dram_model.hpp"

using namespace rowfault::dram;

namespace {

std::vector<Frame> random_pages(const DramGeometry& g, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::set<Frame> s;
  while (s.size() < n) s.insert(rng() % g.total_frames());
  std::vector<Frame> v(s.begin(), s.end());
  std::shuffle(v.begin(), v.end(), rng);
  return v;
}

Frame frame_at(const DramGeometry& g, int bank, std::uint64_t row) {
  return compose_address(g, {bank, row, 0}) / kPageSize;
}

}  // namespace

TEST_CASE("address mapping examples") {
  const DramGeometry g;
  g.validate();
  CHECK(g.total_frames() == (1u << 18));
  CHECK(map_address(g, 0) == DramLocation{0, 0, 0});
  CHECK(map_address(g, 4095) == DramLocation{0, 0, 4095});
  CHECK(map_address(g, Address{1} << 12) == DramLocation{1, 0, 0});
  CHECK(map_address(g, Address{1} << 16) == DramLocation{1, 1, 0});
  CHECK(map_address(g, (Address{1} << 16) | (Address{1} << 12)) == DramLocation{0, 1, 0});

  // bits 20..29 feed no bank function: same bank, different row
  for (int bit = 20; bit < 30; ++bit) {
    const Address a = 0x12345678ull & (g.address_space() - 1);
    const Address b = a ^ (Address{1} << bit);
    const auto la = map_address(g, a), lb = map_address(g, b);
    CHECK(la.bank == lb.bank);
    CHECK(la.row != lb.row);
    CHECK(la.column == lb.column);
  }
  CHECK_THROWS_AS(map_address(g, g.address_space()), std::out_of_range);
  CHECK_THROWS_AS(compose_address(g, {16, 0, 0}), std::out_of_range);
  CHECK_THROWS_AS(compose_address(g, {0, g.rows_per_bank(), 0}), std::out_of_range);
}

TEST_CASE("address mapping is a bijection with uniform banks") {
  const DramGeometry g;
  std::vector<std::size_t> per_bank(16);
  std::set<std::pair<int, std::uint64_t>> rows;
  for (Frame f = 0; f < g.total_frames(); ++f) {
    const auto loc = map_address(g, f * kPageSize);
    ++per_bank[loc.bank];
    rows.insert({loc.bank, loc.row});
    REQUIRE(compose_address(g, loc) == f * kPageSize);
  }
  for (auto n : per_bank) CHECK(n == g.total_frames() / 16);
  CHECK(rows.size() == g.total_frames());  // one page per (bank, row)

  std::mt19937_64 rng(1);
  std::vector<std::size_t> hist(16);
  for (int i = 0; i < (1 << 20); ++i) {
    const Address a = rng() % g.address_space();
    const auto loc = map_address(g, a);
    ++hist[loc.bank];
    if (i % 64 == 0) REQUIRE(compose_address(g, loc) == a);
  }
  for (auto n : hist) CHECK(static_cast<double>(n) == doctest::Approx(65536.0).epsilon(0.02));
}

TEST_CASE("geometry validation and JSON") {
  DramGeometry g;
  std::ostringstream out;
  write_geometry(out, g);
  std::istringstream in(out.str());
  CHECK(read_geometry(in) == g);

  std::istringstream unknown(R"({"n_banks": 16, "ranks": 2})");
  CHECK_THROWS_AS(read_geometry(unknown), std::invalid_argument);
  std::istringstream not_object("[1, 2]");
  CHECK_THROWS_AS(read_geometry(not_object), std::invalid_argument);

  auto bad = g;
  bad.n_banks = 8;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = g;
  bad.bank_fn[0] = {16, 17};  // no free bit
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = g;
  bad.bank_fn[1] = {12, 17};  // free bit shared with function 0
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = g;
  bad.bank_fn[0] = {12, 13, 16};  // two free bits
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = g;
  bad.bank_fn[0] = {12, 40};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = g;
  bad.row_lo = 10;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  // a two-bank geometry with a single free bit is fine
  DramGeometry small{2, {{12, 13}}, 12, 13, 10};
  CHECK_NOTHROW(small.validate());
  for (Frame f = 0; f < small.total_frames(); ++f) {
    const auto loc = map_address(small, f * kPageSize);
    CHECK(compose_address(small, loc) == f * kPageSize);
  }
}

TEST_CASE("paired access latencies") {
  const DramGeometry g;
  const TimingModel t;
  std::mt19937_64 rng(0);
  const Address a = 0;
  const Address conflict = Address{1} << 20;        // same bank, other row
  const Address other_bank = Address{1} << 12;      // same row bits, other bank
  const Address same_row = 64;                      // same bank and row
  CHECK(paired_access_latency(g, t, a, conflict, rng) == 400);
  CHECK(paired_access_latency(g, t, a, other_bank, rng) == 150);
  CHECK(paired_access_latency(g, t, a, same_row, rng) == 150);

  TimingModel bad = t;
  bad.threshold = 100;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = t;
  bad.conflict_cycles = 120;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("noise level for a target error rate") {
  const TimingModel t;
  const double s = noise_std_for_error_rate(t, 0.02);
  CHECK(s == doctest::Approx(60.864).epsilon(1e-3));
  TimingModel noisy = t;
  noisy.noise_std = s;
  std::mt19937_64 rng(3);
  const DramGeometry g;
  int wrong = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    wrong += paired_access_latency(g, noisy, 0, Address{1} << 20, rng) <= t.threshold;
  }
  CHECK(static_cast<double>(wrong) / n == doctest::Approx(0.02).epsilon(0.05));
  CHECK_THROWS_AS(noise_std_for_error_rate(t, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(noise_std_for_error_rate(t, 0.5), std::invalid_argument);
}

TEST_CASE("threshold calibration") {
  std::vector<double> s;
  for (int i = 0; i < 100; ++i) s.push_back(150);
  for (int i = 0; i < 7; ++i) s.push_back(400);
  CHECK(calibrate_threshold(s) == doctest::Approx(275));

  std::mt19937_64 rng(8);
  std::normal_distribution<double> lo(150, 15), hi(400, 15);
  std::vector<double> noisy;
  for (int i = 0; i < 3000; ++i) noisy.push_back(i % 16 ? lo(rng) : hi(rng));
  const double th = calibrate_threshold(noisy);
  CHECK(th > 200);
  CHECK(th < 350);

  const std::vector<double> flat{150, 150};
  CHECK_THROWS_AS(calibrate_threshold(flat), std::invalid_argument);
  CHECK_THROWS_AS(calibrate_threshold(std::vector<double>{}), std::invalid_argument);
}

TEST_CASE("page timer") {
  const DramGeometry g;
  PageTimer timer(g, TimingModel{}, 1);
  const Frame a = 0, b = frame_at(g, 0, 33), c = frame_at(g, 5, 0);
  CHECK(timer(a, b) == 400);
  CHECK(timer(a, c) == 150);
  CHECK(timer.measurements() == 6);
  CHECK_THROWS_AS(PageTimer(g, TimingModel{}, 1, 2), std::invalid_argument);
  CHECK_THROWS_AS(PageTimer(g, TimingModel{}, 1, 0), std::invalid_argument);

  // noiseless decisions are exactly the row-conflict relation
  std::mt19937_64 rng(5);
  for (int i = 0; i < 5000; ++i) {
    const Frame x = rng() % g.total_frames(), y = rng() % g.total_frames();
    const auto lx = map_address(g, x * kPageSize), ly = map_address(g, y * kPageSize);
    const bool truth = lx.bank == ly.bank && lx.row != ly.row;
    CHECK((timer(x, y) > 275) == truth);
  }
}

TEST_CASE("noiseless bin partition equals the bank partition") {
  const DramGeometry g;
  const auto pages = random_pages(g, 1024, 2);
  PageTimer timer(g, TimingModel{}, 3, 1);
  const auto bins = bin_partition(pages, std::ref(timer));
  CHECK(bins.size() == 16);
  const auto q = evaluate_bins(bins, g);
  CHECK(q.exact);
  CHECK(q.misplaced == 0);
  CHECK(q.pages == 1024);
  std::set<int> banks;
  std::size_t total = 0;
  for (const auto& b : bins) {
    const int bank = bank_of_frame(g, b.representative);
    banks.insert(bank);
    CHECK(std::find(b.members.begin(), b.members.end(), b.representative) != b.members.end());
    for (Frame f : b.members) CHECK(bank_of_frame(g, f) == bank);
    total += b.members.size();
  }
  CHECK(banks.size() == 16);
  CHECK(total == 1024);

  // extra passes change nothing without noise
  PageTimer t2(g, TimingModel{}, 3, 1);
  const auto bins3 = bin_partition(pages, std::ref(t2), {275, 3});
  REQUIRE(bins3.size() == bins.size());
  for (std::size_t i = 0; i < bins.size(); ++i) CHECK(bins3[i].members == bins[i].members);

  std::ostringstream csv;
  write_bins_csv(csv, bins, g);
  const auto text = csv.str();
  CHECK(text.rfind("page,bin,true_bank\n", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 1025);
}

TEST_CASE("bin partition edge cases") {
  const DramGeometry g;
  PageTimer timer(g, TimingModel{}, 3);
  const std::vector<Frame> single{77};
  const auto bins = bin_partition(single, std::ref(timer));
  REQUIRE(bins.size() == 1);
  CHECK(bins[0].representative == 77);
  CHECK(bins[0].members == single);
  CHECK(evaluate_bins(bins, g).exact);
  CHECK_THROWS_AS(bin_partition(std::vector<Frame>{}, std::ref(timer)), std::invalid_argument);
  CHECK_THROWS_AS(bin_partition(single, std::ref(timer), {275, 0}), std::invalid_argument);

  // a scripted oracle: everything conflicts with everything
  int calls = 0;
  const auto all = [&](Frame, Frame) {
    ++calls;
    return 400.0;
  };
  const std::vector<Frame> three{1, 2, 3};
  const auto one_bin = bin_partition(three, all, {275, 1});
  CHECK(one_bin.size() == 1);
  CHECK(calls == 2);
}

TEST_CASE("bin partition under 2% per-sample noise") {
  const DramGeometry g;
  TimingModel t;
  t.noise_std = noise_std_for_error_rate(t, 0.02);
  double worst = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto pages = random_pages(g, 1024, 100 + seed);
    PageTimer timer(g, t, seed);
    const auto bins = bin_partition(pages, std::ref(timer));
    const auto q = evaluate_bins(bins, g);
    CHECK(bins.size() >= 16);
    CHECK(bins.size() <= 24);
    worst = std::max(worst, q.misplaced_rate());
  }
  CHECK(worst < 0.01);
}

TEST_CASE("hammering flips cells next to the aggressors") {
  const DramGeometry g;
  VulnerabilityMap map;
  map.plant(3, 100, {7, 2, 1000000});
  map.plant(3, 100, {9, 5, 600000});
  map.plant(3, 104, {1, 0, 400000});
  CHECK(map.size() == 3);
  CHECK_THROWS_AS(map.plant(3, 5, {0, 8, 10}), std::invalid_argument);
  CHECK_THROWS_AS(map.plant(3, 5, {0, 1, 0}), std::invalid_argument);

  CHECK(hammer(map, g, 3, 99, 101, 1000000) == std::vector<Flip>{{3, 100, 7, 2}, {3, 100, 9, 5}});
  CHECK(hammer(map, g, 3, 99, 101, 999999) == std::vector<Flip>{{3, 100, 9, 5}});
  CHECK(hammer(map, g, 3, 99, 101, 599999).empty());
  CHECK(hammer(map, g, 4, 99, 101, 2000000).empty());
  // an aggressor row is not its own victim
  CHECK(hammer(map, g, 3, 100, 103, 2000000) == std::vector<Flip>{{3, 104, 1, 0}});
  CHECK(hammer(map, g, 3, 101, 5000, 2000000).size() == 2);
  CHECK_THROWS_AS(hammer(map, g, 3, 7, 7, 1), std::invalid_argument);
  CHECK_THROWS_AS(hammer(map, g, 16, 7, 8, 1), std::out_of_range);
  CHECK_THROWS_AS(hammer(map, g, 3, 7, g.rows_per_bank(), 1), std::out_of_range);
  CHECK(hammer(map, g, 3, 0, g.rows_per_bank() - 1, 2000000).empty());

  const Address addr = flip_address(g, {3, 100, 7, 2});
  CHECK(map_address(g, addr) == DramLocation{3, 100, 7});
}

TEST_CASE("more activations never flip fewer cells") {
  const DramGeometry g;
  VulnerabilityOptions opt;
  opt.cells_per_row = 0.5;
  const auto map = VulnerabilityMap::generate(g, 4, opt);
  CHECK(map == VulnerabilityMap::generate(g, 4, opt));
  CHECK(static_cast<double>(map.size()) == doctest::Approx(0.5 * 16 * 16384).epsilon(1e-3));
  for (const auto& [key, cells] : map.cells()) {
    for (const auto& c : cells) {
      CHECK(c.threshold >= opt.min_threshold);
      CHECK(c.threshold <= opt.max_threshold);
      CHECK(c.offset < g.columns_per_row());
    }
  }
  std::mt19937_64 rng(6);
  for (int i = 0; i < 2000; ++i) {
    const int bank = static_cast<int>(rng() % 16);
    const std::uint64_t ra = rng() % g.rows_per_bank();
    std::uint64_t rb = rng() % g.rows_per_bank();
    if (rb == ra) continue;
    const std::uint64_t lo = 400000 + rng() % 1200000, hi = lo + rng() % 500000;
    const auto a = hammer(map, g, bank, ra, rb, lo);
    const auto b = hammer(map, g, bank, ra, rb, hi);
    CHECK(std::includes(b.begin(), b.end(), a.begin(), a.end()));
  }
  VulnerabilityOptions bad;
  bad.min_threshold = 10;
  bad.max_threshold = 5;
  CHECK_THROWS_AS(VulnerabilityMap::generate(g, 1, bad), std::invalid_argument);
  CHECK(VulnerabilityMap::generate(g, 1).size() == 16);
}

TEST_CASE("templating walks bins from the last one and finds planted flips") {
  const DramGeometry g;
  auto pages = random_pages(g, 1024, 21);
  PageTimer t0(g, TimingModel{}, 1, 1);
  const auto first = bin_partition(pages, std::ref(t0));
  REQUIRE(first.size() == 16);

  // neighbouring-row victim page for a member of the given bin
  auto add_victim = [&](std::size_t bin, VulnerabilityMap& map, std::uint64_t offset) {
    const Frame a = first[bin].members.front();
    const auto loc = map_address(g, a * kPageSize);
    const std::uint64_t vrow = loc.row + 1 < g.rows_per_bank() ? loc.row + 1 : loc.row - 1;
    const Frame v = frame_at(g, loc.bank, vrow);
    if (std::find(pages.begin(), pages.end(), v) == pages.end()) pages.push_back(v);
    map.plant(loc.bank, vrow, {offset, 4, 1000000});
    return v;
  };

  SUBCASE("flip in the last bin") {
    VulnerabilityMap map;
    const Frame v = add_victim(15, map, 123);
    PageTimer t1(g, TimingModel{}, 1, 1);
    const auto bins = bin_partition(pages, std::ref(t1));
    const auto r = template_bins(bins, map, g, {1000000000, 2000000, 9});
    REQUIRE(r.hit.has_value());
    CHECK(r.hit->bin == 15);
    CHECK(r.hit->page == v);
    CHECK(r.hit->page_offset == 123);
    CHECK(r.hit->flip.bit == 4);
    CHECK(r.visit_order == std::vector<std::size_t>{15});
    CHECK(r.attempts <= 500);
    CHECK(r.hit->activations == 2000000);
    CHECK(bank_of_frame(g, r.hit->aggressor_a) == bank_of_frame(g, v));
  }
  SUBCASE("flip only in bin 0") {
    VulnerabilityMap map;
    add_victim(0, map, 5);
    PageTimer t1(g, TimingModel{}, 1, 1);
    const auto bins = bin_partition(pages, std::ref(t1));
    const auto r = template_bins(bins, map, g, {1000000000, 2000000, 9});
    REQUIRE(r.hit.has_value());
    CHECK(r.hit->bin == 0);
    std::vector<std::size_t> want;
    for (std::size_t k = 16; k-- > 0;) want.push_back(k);
    CHECK(r.visit_order == want);
    CHECK(r.attempts > 15 * 500);
  }
  SUBCASE("flips outside the attacker's pages do not count") {
    VulnerabilityMap map;
    const auto loc = map_address(g, first[15].members.front() * kPageSize);
    const std::uint64_t vrow = loc.row > 0 ? loc.row - 1 : loc.row + 1;
    REQUIRE(std::find(pages.begin(), pages.end(), frame_at(g, loc.bank, vrow)) == pages.end());
    map.plant(loc.bank, vrow, {0, 0, 1000});
    const auto r = template_bins(first, map, g, {1000000000, 2000000, 9});
    CHECK_FALSE(r.hit.has_value());
  }
  SUBCASE("empty map: every bin visited with its full budget") {
    const auto r = template_bins(first, VulnerabilityMap{}, g, {1000000000, 2000000, 9});
    CHECK_FALSE(r.hit.has_value());
    CHECK(r.visit_order.size() == 16);
    CHECK(r.visit_order.front() == 15);
    CHECK(r.visit_order.back() == 0);
    CHECK(r.attempts == 16 * 500);
  }
  CHECK_THROWS_AS(template_bins(first, VulnerabilityMap{}, g, {1000, 0, 1}), std::invalid_argument);
}
