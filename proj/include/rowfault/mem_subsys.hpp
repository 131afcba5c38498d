#pragma once

// Buddy allocator with a per-CPU page frame cache (PFC), modelled as a
// deterministic state machine. Frames freed one at a time land on the hot end
// of the freeing CPU's cache and are the first handed out to the next
// single-page request on that CPU, whichever process issues it.

#include <cstdint>
#include <deque>
#include <iosfwd>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rowfault::mem {

using Frame = std::uint64_t;
using Pid = std::int32_t;

class OutOfMemory : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidFree : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct Watermarks {
  std::size_t low = 8;
  std::size_t high = 64;
  std::size_t refill_batch = 16;
  std::size_t release_batch = 16;

  bool operator==(const Watermarks&) const = default;
};

struct AllocatorConfig {
  int max_order = 10;
  std::size_t max_order_blocks = 1;  // total frames = blocks << max_order
  int n_cpus = 1;
  Watermarks pfc;

  void validate() const;

  bool operator==(const AllocatorConfig&) const = default;
};

struct AllocRequest {
  Pid pid = 0;
  std::size_t n_pages = 1;
  int cpu = 0;
  std::optional<std::uint64_t> payload;  // tag stored on every returned frame
};

enum class OwnerKind { Buddy, Pfc, Process };

struct Owner {
  OwnerKind kind = OwnerKind::Buddy;
  Pid pid = -1;  // valid for Process
  int cpu = -1;  // valid for Pfc
};

class Allocator {
 public:
  explicit Allocator(AllocatorConfig cfg = {});

  // Single pages come from the CPU's cache (refilled from the buddy lists
  // when it drops below the low watermark). Larger requests take a whole
  // 2^order block from the buddy lists, order = ceil(log2(n_pages)), and
  // return every frame of it.
  std::vector<Frame> alloc(const AllocRequest& req);

  // One frame goes to the CPU's cache hot end; a cache above the high
  // watermark then releases `release_batch` cold frames to the buddy lists.
  // Several frames go straight to the buddy lists with coalescing.
  void free(Pid pid, int cpu, std::span<const Frame> frames);

  // Returns every cached frame of `cpu` to the buddy lists.
  void drain_pfc(int cpu);

  const AllocatorConfig& config() const { return cfg_; }
  std::size_t total_frames() const { return owners_.size(); }
  const std::set<Frame>& free_list(int order) const { return free_lists_.at(order); }
  // Front is the hot end.
  const std::deque<Frame>& pfc(int cpu) const { return pfcs_.at(cpu); }
  Owner owner(Frame f) const;
  std::optional<std::uint64_t> payload(Frame f) const;

  std::size_t allocated_frames() const;
  std::size_t buddy_free_frames() const;
  std::size_t pfc_frames() const;

  // Alignment, buddy exclusivity, conservation, ownership consistency and
  // watermark bounds. Throws std::logic_error naming the first violation.
  void check_invariants() const;

  // Free lists per order, cache contents hot to cold, ownership runs.
  void dump(std::ostream& out) const;

  bool operator==(const Allocator&) const = default;

 private:
  static constexpr Pid kBuddy = -1;
  static constexpr Pid kCached = -2;

  void check_cpu(int cpu) const;
  std::optional<Frame> buddy_take(int order);
  void buddy_release(Frame start, int order);
  void refill(int cpu);

  AllocatorConfig cfg_;
  std::vector<std::set<Frame>> free_lists_;
  std::vector<std::deque<Frame>> pfcs_;
  std::vector<Pid> owners_;
  std::vector<std::int8_t> pfc_cpu_;
  std::vector<std::optional<std::uint64_t>> payloads_;
};

struct SteerResult {
  bool success = false;
  std::vector<Frame> victim_frames;
  std::vector<Frame> noise_frames;
};

struct SteerOptions {
  int cpu = 0;
  std::size_t noise_allocs = 0;  // single-page requests between free and victim
  Pid noise_pid = 999;
  std::optional<std::uint64_t> victim_payload;
};

// The attacker releases `target`, optional noise allocations interleave, then
// the victim asks for one page on the same CPU.
SteerResult steer_scenario(Allocator& state, Pid attacker, Pid victim,
                           Frame target, const SteerOptions& options = {});

struct ScriptStep {
  std::string op;
  Pid pid = 0;
  int cpu = 0;
  std::vector<Frame> frames;  // frames returned by alloc
};

// Line-oriented `op,pid,cpu,arg` records: `alloc,<pid>,<cpu>,<n_pages>`,
// `free,<pid>,<cpu>,<frame> [frame ...]`, `drain,<pid>,<cpu>,-`. Blank lines
// and lines starting with '#' are skipped.
std::vector<ScriptStep> run_script(Allocator& state, std::istream& script);

}  // namespace rowfault::mem
