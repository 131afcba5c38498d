#include "rowfault/mem_subsys.hpp"

#include <algorithm>
#include <istream>
#include <ostream>
#include <sstream>
#include <unordered_set>

namespace rowfault::mem {

namespace {

int ceil_log2(std::size_t n) {
  int order = 0;
  while ((std::size_t{1} << order) < n) ++order;
  return order;
}

}  // namespace

void AllocatorConfig::validate() const {
  if (max_order < 0 || max_order > 20) {
    throw std::invalid_argument("allocator: max_order must be 0..20");
  }
  if (max_order_blocks == 0) {
    throw std::invalid_argument("allocator: need at least one max-order block");
  }
  if (n_cpus < 1 || n_cpus > 64) {
    throw std::invalid_argument("allocator: n_cpus must be 1..64");
  }
  if (pfc.low >= pfc.high) {
    throw std::invalid_argument("allocator: low watermark must be below high");
  }
  if (pfc.refill_batch == 0 || pfc.release_batch == 0 ||
      pfc.release_batch > pfc.high) {
    throw std::invalid_argument("allocator: invalid PFC batch sizes");
  }
}

Allocator::Allocator(AllocatorConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t block = std::size_t{1} << cfg_.max_order;
  const std::size_t total = cfg_.max_order_blocks * block;
  free_lists_.resize(cfg_.max_order + 1);
  pfcs_.resize(cfg_.n_cpus);
  owners_.assign(total, kBuddy);
  pfc_cpu_.assign(total, -1);
  payloads_.assign(total, std::nullopt);
  for (std::size_t b = 0; b < cfg_.max_order_blocks; ++b) {
    free_lists_[cfg_.max_order].insert(b * block);
  }
}

void Allocator::check_cpu(int cpu) const {
  if (cpu < 0 || cpu >= cfg_.n_cpus) {
    throw std::invalid_argument("allocator: no such cpu " + std::to_string(cpu));
  }
}

std::optional<Frame> Allocator::buddy_take(int order) {
  int from = order;
  while (from <= cfg_.max_order && free_lists_[from].empty()) ++from;
  if (from > cfg_.max_order) return std::nullopt;
  const Frame start = *free_lists_[from].begin();
  free_lists_[from].erase(free_lists_[from].begin());
  // Split down, keeping the lower half and listing the upper half.
  while (from > order) {
    --from;
    free_lists_[from].insert(start + (Frame{1} << from));
  }
  return start;
}

void Allocator::buddy_release(Frame start, int order) {
  for (Frame f = start; f < start + (Frame{1} << order); ++f) {
    owners_[f] = kBuddy;
    pfc_cpu_[f] = -1;
    payloads_[f].reset();
  }
  while (order < cfg_.max_order) {
    const Frame buddy = start ^ (Frame{1} << order);
    auto it = free_lists_[order].find(buddy);
    if (it == free_lists_[order].end()) break;
    free_lists_[order].erase(it);
    start = std::min(start, buddy);
    ++order;
  }
  free_lists_[order].insert(start);
}

void Allocator::refill(int cpu) {
  auto& cache = pfcs_[cpu];
  const std::size_t target =
      std::min(cfg_.pfc.low + cfg_.pfc.refill_batch, cfg_.pfc.high);
  while (cache.size() < target) {
    const auto f = buddy_take(0);
    if (!f) break;
    owners_[*f] = kCached;
    pfc_cpu_[*f] = static_cast<std::int8_t>(cpu);
    cache.push_back(*f);
  }
}

std::vector<Frame> Allocator::alloc(const AllocRequest& req) {
  check_cpu(req.cpu);
  if (req.n_pages == 0) {
    throw std::invalid_argument("allocator: request for zero pages");
  }
  if (req.pid < 0) throw std::invalid_argument("allocator: pid must be >= 0");

  std::vector<Frame> out;
  if (req.n_pages == 1) {
    auto& cache = pfcs_[req.cpu];
    if (cache.size() < cfg_.pfc.low) refill(req.cpu);
    if (cache.empty()) throw OutOfMemory("allocator: out of memory (1 page)");
    out.push_back(cache.front());
    cache.pop_front();
  } else {
    const int order = ceil_log2(req.n_pages);
    if (order > cfg_.max_order) {
      throw OutOfMemory("allocator: request exceeds the largest block");
    }
    const auto start = buddy_take(order);
    if (!start) {
      throw OutOfMemory("allocator: out of memory (order " +
                        std::to_string(order) + ")");
    }
    for (Frame f = *start; f < *start + (Frame{1} << order); ++f) out.push_back(f);
  }
  for (Frame f : out) {
    owners_[f] = req.pid;
    pfc_cpu_[f] = -1;
    payloads_[f] = req.payload;
  }
  return out;
}

void Allocator::free(Pid pid, int cpu, std::span<const Frame> frames) {
  check_cpu(cpu);
  if (frames.empty()) return;
  std::unordered_set<Frame> seen;
  for (Frame f : frames) {
    if (f >= owners_.size() || owners_[f] != pid || !seen.insert(f).second) {
      throw InvalidFree("allocator: frame " + std::to_string(f) +
                        " is not owned by pid " + std::to_string(pid));
    }
  }

  if (frames.size() == 1) {
    const Frame f = frames.front();
    auto& cache = pfcs_[cpu];
    owners_[f] = kCached;
    pfc_cpu_[f] = static_cast<std::int8_t>(cpu);
    payloads_[f].reset();
    cache.push_front(f);
    if (cache.size() > cfg_.pfc.high) {
      for (std::size_t i = 0; i < cfg_.pfc.release_batch && !cache.empty(); ++i) {
        const Frame cold = cache.back();
        cache.pop_back();
        buddy_release(cold, 0);
      }
    }
    return;
  }
  for (Frame f : frames) buddy_release(f, 0);
}

void Allocator::drain_pfc(int cpu) {
  check_cpu(cpu);
  auto& cache = pfcs_[cpu];
  while (!cache.empty()) {
    const Frame f = cache.back();
    cache.pop_back();
    buddy_release(f, 0);
  }
}

Owner Allocator::owner(Frame f) const {
  if (f >= owners_.size()) throw std::out_of_range("allocator: no such frame");
  const Pid p = owners_[f];
  if (p == kBuddy) return {OwnerKind::Buddy, -1, -1};
  if (p == kCached) return {OwnerKind::Pfc, -1, pfc_cpu_[f]};
  return {OwnerKind::Process, p, -1};
}

std::optional<std::uint64_t> Allocator::payload(Frame f) const {
  if (f >= owners_.size()) throw std::out_of_range("allocator: no such frame");
  return payloads_[f];
}

std::size_t Allocator::allocated_frames() const {
  return static_cast<std::size_t>(
      std::count_if(owners_.begin(), owners_.end(), [](Pid p) { return p >= 0; }));
}

std::size_t Allocator::buddy_free_frames() const {
  std::size_t n = 0;
  for (int k = 0; k <= cfg_.max_order; ++k) n += free_lists_[k].size() << k;
  return n;
}

std::size_t Allocator::pfc_frames() const {
  std::size_t n = 0;
  for (const auto& c : pfcs_) n += c.size();
  return n;
}

void Allocator::check_invariants() const {
  auto fail = [](const std::string& what) {
    throw std::logic_error("allocator invariant: " + what);
  };
  std::vector<char> covered(owners_.size(), 0);
  for (int k = 0; k <= cfg_.max_order; ++k) {
    const Frame size = Frame{1} << k;
    for (Frame start : free_lists_[k]) {
      if (start % size != 0) {
        fail("order-" + std::to_string(k) + " block " + std::to_string(start) +
             " misaligned");
      }
      if (start + size > owners_.size()) fail("free block out of range");
      if (k < cfg_.max_order && free_lists_[k].count(start ^ size)) {
        fail("buddies " + std::to_string(start) + "/" +
             std::to_string(start ^ size) + " both free at order " +
             std::to_string(k));
      }
      for (Frame f = start; f < start + size; ++f) {
        if (covered[f]++) fail("frame " + std::to_string(f) + " listed twice");
        if (owners_[f] != kBuddy) {
          fail("frame " + std::to_string(f) + " in a free list is owned");
        }
      }
    }
  }
  for (int cpu = 0; cpu < cfg_.n_cpus; ++cpu) {
    const auto& cache = pfcs_[cpu];
    if (cache.size() > cfg_.pfc.high) fail("cache above high watermark");
    for (Frame f : cache) {
      if (covered[f]++) fail("cached frame " + std::to_string(f) + " duplicated");
      if (owners_[f] != kCached || pfc_cpu_[f] != cpu) {
        fail("cached frame " + std::to_string(f) + " has inconsistent owner");
      }
    }
  }
  for (std::size_t f = 0; f < owners_.size(); ++f) {
    if (owners_[f] >= 0 && covered[f]) fail("allocated frame also free");
    if (owners_[f] < 0 && !covered[f]) {
      fail("free frame " + std::to_string(f) + " unreachable");
    }
  }
  if (allocated_frames() + buddy_free_frames() + pfc_frames() != total_frames()) {
    fail("frame conservation");
  }
}

void Allocator::dump(std::ostream& out) const {
  out << "free_lists:\n";
  for (int k = 0; k <= cfg_.max_order; ++k) {
    out << "  order " << k << ':';
    for (Frame f : free_lists_[k]) out << ' ' << f;
    out << '\n';
  }
  out << "pfc:\n";
  for (int cpu = 0; cpu < cfg_.n_cpus; ++cpu) {
    out << "  cpu " << cpu << ':';
    for (Frame f : pfcs_[cpu]) out << ' ' << f;
    out << '\n';
  }
  out << "owners:\n";
  auto label = [&](std::size_t f) {
    const Pid p = owners_[f];
    if (p == kBuddy) return std::string("buddy");
    if (p == kCached) return "pfc" + std::to_string(pfc_cpu_[f]);
    return "pid " + std::to_string(p);
  };
  std::size_t run_start = 0;
  for (std::size_t f = 1; f <= owners_.size(); ++f) {
    if (f == owners_.size() || label(f) != label(run_start)) {
      out << "  " << run_start << '-' << (f - 1) << ' ' << label(run_start) << '\n';
      run_start = f;
    }
  }
}

SteerResult steer_scenario(Allocator& state, Pid attacker, Pid victim,
                           Frame target, const SteerOptions& options) {
  const Owner o = state.owner(target);
  if (o.kind != OwnerKind::Process || o.pid != attacker) {
    throw std::invalid_argument("steer: attacker does not own the target frame");
  }
  SteerResult r;
  const Frame release[] = {target};
  state.free(attacker, options.cpu, release);
  for (std::size_t i = 0; i < options.noise_allocs; ++i) {
    const auto got = state.alloc({options.noise_pid, 1, options.cpu, {}});
    r.noise_frames.insert(r.noise_frames.end(), got.begin(), got.end());
  }
  r.victim_frames = state.alloc({victim, 1, options.cpu, options.victim_payload});
  r.success = r.victim_frames.front() == target;
  return r;
}

std::vector<ScriptStep> run_script(Allocator& state, std::istream& script) {
  std::vector<ScriptStep> steps;
  std::string line;
  int line_no = 0;
  while (std::getline(script, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream fields(line);
    std::string op, pid, cpu, arg;
    if (!std::getline(fields, op, ',') || !std::getline(fields, pid, ',') ||
        !std::getline(fields, cpu, ',') || !std::getline(fields, arg)) {
      throw std::invalid_argument("script line " + std::to_string(line_no) +
                                  ": expected op,pid,cpu,arg");
    }
    ScriptStep step{op, static_cast<Pid>(std::stol(pid)), std::stoi(cpu), {}};
    if (op == "alloc") {
      step.frames = state.alloc({step.pid, std::stoul(arg), step.cpu, {}});
    } else if (op == "free") {
      std::istringstream list(arg);
      std::vector<Frame> frames;
      Frame f;
      while (list >> f) frames.push_back(f);
      state.free(step.pid, step.cpu, frames);
    } else if (op == "drain") {
      state.drain_pfc(step.cpu);
    } else {
      throw std::invalid_argument("script line " + std::to_string(line_no) +
                                  ": unknown op '" + op + "'");
    }
    steps.push_back(std::move(step));
  }
  return steps;
}

}  // namespace rowfault::mem
