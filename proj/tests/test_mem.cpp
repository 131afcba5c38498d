#include <doctest.h>

#include <map>
#include <random>
#include <sstream>

#include "rowfault/mem_subsys.hpp"

using namespace rowfault::mem;

namespace {

Frame one(Allocator& a, Pid pid, int cpu = 0) { return a.alloc({pid, 1, cpu, {}}).front(); }

void free_one(Allocator& a, Pid pid, Frame f, int cpu = 0) {
  const Frame fs[] = {f};
  a.free(pid, cpu, fs);
}

}  // namespace

TEST_CASE("configuration validation") {
  CHECK_NOTHROW(AllocatorConfig{}.validate());
  CHECK_THROWS_AS((AllocatorConfig{-1, 1, 1, {}}.validate()), std::invalid_argument);
  CHECK_THROWS_AS((AllocatorConfig{21, 1, 1, {}}.validate()), std::invalid_argument);
  CHECK_THROWS_AS((AllocatorConfig{10, 0, 1, {}}.validate()), std::invalid_argument);
  CHECK_THROWS_AS((AllocatorConfig{10, 1, 0, {}}.validate()), std::invalid_argument);
  CHECK_THROWS_AS((AllocatorConfig{10, 1, 1, {8, 8, 16, 16}}.validate()), std::invalid_argument);
  CHECK_THROWS_AS((AllocatorConfig{10, 1, 1, {8, 64, 0, 16}}.validate()), std::invalid_argument);
  CHECK_THROWS_AS((AllocatorConfig{10, 1, 1, {8, 64, 16, 65}}.validate()), std::invalid_argument);
  CHECK_THROWS_AS(Allocator(AllocatorConfig{10, 1, 0, {}}), std::invalid_argument);
}

TEST_CASE("fresh allocator and first single-page allocation") {
  Allocator a;
  CHECK(a.total_frames() == 1024);
  CHECK(a.free_list(10) == std::set<Frame>{0});
  CHECK(a.pfc_frames() == 0);
  a.check_invariants();

  const Frame f = one(a, 7);
  CHECK(f == 0);
  // below low: refill to low + refill_batch, one handed out
  CHECK(a.pfc(0).size() == 23);
  CHECK(a.pfc(0).front() == 1);
  CHECK(a.owner(f).kind == OwnerKind::Process);
  CHECK(a.owner(f).pid == 7);
  CHECK(a.owner(5).kind == OwnerKind::Pfc);
  CHECK(a.owner(5).cpu == 0);
  CHECK(a.owner(500).kind == OwnerKind::Buddy);
  CHECK(a.allocated_frames() == 1);
  CHECK(a.buddy_free_frames() == 1000);
  a.check_invariants();
}

TEST_CASE("single pages are reused last in, first out") {
  Allocator a;
  const Frame x = one(a, 1);
  const Frame y = one(a, 1);
  free_one(a, 1, x);
  free_one(a, 1, y);
  CHECK(a.pfc(0).front() == y);
  CHECK(one(a, 2) == y);
  CHECK(one(a, 2) == x);
  CHECK(a.owner(x).pid == 2);
  a.check_invariants();
}

TEST_CASE("multi-page requests split a block and coalesce on free") {
  Allocator a;
  const auto two = a.alloc({3, 2, 0, {}});
  CHECK(two == std::vector<Frame>{0, 1});
  for (int k = 1; k < 10; ++k) CHECK(a.free_list(k) == std::set<Frame>{Frame{1} << k});
  CHECK(a.free_list(10).empty());

  const auto three = a.alloc({3, 3, 0, {}});
  CHECK(three == std::vector<Frame>{4, 5, 6, 7});
  a.check_invariants();

  a.free(3, 0, three);
  a.free(3, 0, two);
  CHECK(a.free_list(10) == std::set<Frame>{0});
  for (int k = 0; k < 10; ++k) CHECK(a.free_list(k).empty());
  CHECK(a == Allocator());

  CHECK_THROWS_AS(a.alloc({3, 1025, 0, {}}), OutOfMemory);
  CHECK_THROWS_AS(a.alloc({3, 0, 0, {}}), std::invalid_argument);
  CHECK_THROWS_AS(a.alloc({-4, 1, 0, {}}), std::invalid_argument);
  CHECK_THROWS_AS(a.alloc({3, 1, 1, {}}), std::invalid_argument);
  const auto all = a.alloc({3, 1024, 0, {}});
  CHECK(all.size() == 1024);
  CHECK_THROWS_AS(a.alloc({3, 2, 0, {}}), OutOfMemory);
  CHECK_THROWS_AS(a.alloc({3, 1, 0, {}}), OutOfMemory);
}

TEST_CASE("cache above the high watermark releases a batch") {
  Allocator a;
  const auto& w = a.config().pfc;
  std::vector<Frame> held;
  for (std::size_t i = 0; i < w.high + 1; ++i) held.push_back(one(a, 1));
  a.drain_pfc(0);
  CHECK(a.pfc(0).empty());
  for (std::size_t i = 0; i < w.high; ++i) free_one(a, 1, held[i]);
  CHECK(a.pfc(0).size() == w.high);
  free_one(a, 1, held[w.high]);
  CHECK(a.pfc(0).size() == w.high + 1 - w.release_batch);
  CHECK(a.pfc(0).front() == held[w.high]);
  // the coldest frames went back to the buddy lists
  for (std::size_t i = 0; i < w.release_batch; ++i) CHECK(a.owner(held[i]).kind == OwnerKind::Buddy);
  a.check_invariants();
}

TEST_CASE("invalid frees") {
  Allocator a;
  const Frame f = one(a, 1);
  free_one(a, 1, f);
  CHECK_THROWS_AS(free_one(a, 1, f), InvalidFree);
  const Frame g = one(a, 1);
  CHECK_THROWS_AS(free_one(a, 2, g), InvalidFree);
  CHECK_THROWS_AS(free_one(a, 1, 5000), InvalidFree);
  const Frame dup[] = {g, g};
  CHECK_THROWS_AS(a.free(1, 0, dup), InvalidFree);
  CHECK(a.owner(g).pid == 1);
  CHECK_THROWS_AS(a.owner(5000), std::out_of_range);
  a.check_invariants();
}

TEST_CASE("payload tags follow the frame and are cleared on free") {
  Allocator a;
  const auto fs = a.alloc({1, 1, 0, 0xabcdu});
  CHECK(a.payload(fs[0]) == 0xabcdu);
  free_one(a, 1, fs[0]);
  CHECK_FALSE(a.payload(fs[0]).has_value());
}

TEST_CASE("page steering through the frame cache") {
  Allocator a;
  std::vector<Frame> pool;
  for (int i = 0; i < 32; ++i) pool.push_back(one(a, 10));
  const Frame target = pool[17];

  SUBCASE("no noise: the victim gets the released frame") {
    const auto r = steer_scenario(a, 10, 20, target, {0, 0, 999, 0x5eedu});
    CHECK(r.success);
    CHECK(r.victim_frames == std::vector<Frame>{target});
    CHECK(a.owner(target).pid == 20);
    CHECK(a.payload(target) == 0x5eedu);
  }
  SUBCASE("k noise allocations in between: the first one takes the frame") {
    for (std::size_t k = 1; k <= 3; ++k) {
      Allocator b = a;
      const auto r = steer_scenario(b, 10, 20, pool[k], {0, k, 999, {}});
      CHECK_FALSE(r.success);
      CHECK(r.noise_frames.size() == k);
      CHECK(r.noise_frames.front() == pool[k]);
    }
  }
  SUBCASE("attacker must own the target") {
    CHECK_THROWS_AS(steer_scenario(a, 11, 20, target), std::invalid_argument);
    CHECK_THROWS_AS(steer_scenario(a, 10, 20, 900), std::invalid_argument);
  }
  a.check_invariants();
}

TEST_CASE("frames cached on one cpu are not served to another") {
  Allocator a(AllocatorConfig{10, 1, 2, {}});
  const Frame f = one(a, 1, 0);
  free_one(a, 1, f, 0);
  CHECK(one(a, 2, 1) != f);
  CHECK(one(a, 2, 0) == f);
  a.check_invariants();
}

TEST_CASE("random operation sequences keep every invariant and free back to the start") {
  const AllocatorConfig cfg{8, 4, 3, {4, 24, 8, 8}};
  Allocator a(cfg);
  Allocator twin(cfg);
  std::mt19937_64 rng(99);
  struct Held {
    Pid pid;
    std::vector<Frame> frames;
  };
  std::vector<Held> held;
  std::size_t ooms = 0;

  for (int op = 0; op < 100000; ++op) {
    const int cpu = static_cast<int>(rng() % 3);
    const bool do_alloc = held.empty() || rng() % 100 < 52;
    if (do_alloc) {
      const Pid pid = static_cast<Pid>(rng() % 5);
      const std::size_t n = rng() % 4 == 0 ? 2 + rng() % 15 : 1;
      try {
        auto got = a.alloc({pid, n, cpu, {}});
        CHECK(twin.alloc({pid, n, cpu, {}}) == got);
        CHECK(got.size() >= n);
        held.push_back({pid, std::move(got)});
      } catch (const OutOfMemory&) {
        CHECK_THROWS_AS(twin.alloc({pid, n, cpu, {}}), OutOfMemory);
        ++ooms;
      }
    } else {
      const std::size_t i = rng() % held.size();
      Held h = std::move(held[i]);
      held[i] = std::move(held.back());
      held.pop_back();
      if (h.frames.size() > 1 && rng() % 2) {
        // give back one frame at a time
        for (Frame f : h.frames) {
          free_one(a, h.pid, f, cpu);
          free_one(twin, h.pid, f, cpu);
        }
      } else {
        a.free(h.pid, cpu, h.frames);
        twin.free(h.pid, cpu, h.frames);
      }
    }
    if (op % 97 == 0) REQUIRE_NOTHROW(a.check_invariants());
  }
  a.check_invariants();
  CHECK(a == twin);
  CHECK(ooms > 0);

  for (auto& h : held) a.free(h.pid, 0, h.frames);
  for (int cpu = 0; cpu < cfg.n_cpus; ++cpu) a.drain_pfc(cpu);
  a.check_invariants();
  CHECK(a == Allocator(cfg));
  CHECK(a.free_list(8).size() == 4);
}

TEST_CASE("scripts and dumps") {
  Allocator a;
  std::istringstream script(
      "# steer by hand\n"
      "alloc,1,0,1\n"
      "alloc,1,0,1\n"
      "\n"
      "free,1,0,0\n"
      "alloc,2,0,1\n"
      "alloc,3,0,4\n"
      "free,3,0,24 25 26 27\n"
      "drain,0,0,-\n");
  const auto steps = run_script(a, script);
  REQUIRE(steps.size() == 7);
  CHECK(steps[0].frames == std::vector<Frame>{0});
  CHECK(steps[1].frames == std::vector<Frame>{1});
  CHECK(steps[3].frames == std::vector<Frame>{0});
  CHECK(steps[4].frames == std::vector<Frame>{24, 25, 26, 27});
  CHECK(a.pfc(0).empty());
  a.check_invariants();

  std::ostringstream out;
  a.dump(out);
  const auto text = out.str();
  CHECK(text.find("free_lists:\n") == 0);
  CHECK(text.find("  0-0 pid 2\n") != std::string::npos);
  CHECK(text.find("  1-1 pid 1\n") != std::string::npos);
  CHECK(text.find("  2-1023 buddy\n") != std::string::npos);
  CHECK(text.find("  cpu 0:\n") != std::string::npos);

  std::istringstream bad("alloc,1,0\n");
  CHECK_THROWS_AS(run_script(a, bad), std::invalid_argument);
  std::istringstream unknown("steal,1,0,1\n");
  CHECK_THROWS_AS(run_script(a, unknown), std::invalid_argument);
}
