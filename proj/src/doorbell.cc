#include "poolcomm/doorbell.h"

#include <atomic>
#include <cstdlib>
#include <string>
#include <thread>

#if defined(__x86_64__) || defined(__i386__)
#include <immintrin.h>
#endif

namespace poolcomm {

namespace {

static_assert(std::atomic_ref<std::uint64_t>::is_always_lock_free,
              "doorbells need lock-free 64-bit atomics to work across processes");

inline void cpu_relax() {
#if defined(__x86_64__) || defined(__i386__)
  _mm_pause();
#endif
}

}  // namespace

std::uint64_t doorbell_index(std::uint32_t device_index, std::uint64_t device_block_id,
                             std::uint64_t blocks_per_device) {
  if (device_block_id >= blocks_per_device) {
    throw GeometryError("doorbell region exhausted: block " + std::to_string(device_block_id) +
                        " >= " + std::to_string(blocks_per_device) + " blocks per device");
  }
  return static_cast<std::uint64_t>(device_index) * blocks_per_device + device_block_id;
}

SpinPolicy default_spin_policy() {
  SpinPolicy p;
  if (const char* env = std::getenv("POOLCOMM_DOORBELL_TIMEOUT_MS")) {
    char* end = nullptr;
    const long long ms = std::strtoll(env, &end, 10);
    if (end != env && ms > 0) p.timeout = std::chrono::milliseconds(ms);
  }
  return p;
}

void Doorbell::ring(std::uint64_t epoch) const {
  std::atomic_ref<std::uint64_t>(*word_).store(encode_doorbell(DoorbellState::Ready, epoch),
                                                std::memory_order_release);
}

std::uint64_t Doorbell::raw() const {
  return std::atomic_ref<std::uint64_t>(*word_).load(std::memory_order_acquire);
}

DoorbellState Doorbell::state(std::uint64_t epoch) const { return decode_state(raw(), epoch); }

void Doorbell::wait(std::uint64_t epoch, const SpinPolicy& policy) const {
  for (int i = 0; i < policy.tight_probes; ++i) {
    if (state(epoch) == DoorbellState::Ready) return;
    cpu_relax();
  }
  const auto deadline = std::chrono::steady_clock::now() + policy.timeout;
  auto backoff = policy.initial_backoff;
  for (;;) {
    if (state(epoch) == DoorbellState::Ready) return;
    std::this_thread::sleep_for(backoff);
    if (backoff < policy.max_backoff) backoff = std::min(backoff * 2, policy.max_backoff);
    if (std::chrono::steady_clock::now() >= deadline) {
      if (state(epoch) == DoorbellState::Ready) return;
      throw DoorbellTimeout(index_, device_, block_);
    }
  }
}

DoorbellRegion::DoorbellRegion(std::span<std::byte> region, std::uint32_t num_devices)
    : base_(region.data()),
      lines_(region.size() / kDoorbellSlotBytes),
      num_devices_(num_devices),
      blocks_per_device_(blocks_per_device(region.size(), num_devices)) {
  if (reinterpret_cast<std::uintptr_t>(base_) % kDoorbellSlotBytes != 0) {
    throw PoolError("doorbell region is not cache-line aligned");
  }
  if (blocks_per_device_ == 0) {
    throw PoolError("doorbell region of " + std::to_string(region.size()) +
                    " bytes is too small for " + std::to_string(num_devices) + " devices");
  }
}

std::uint64_t DoorbellRegion::blocks_per_device(std::uint64_t region_bytes,
                                                std::uint32_t num_devices) {
  const std::uint64_t lines = region_bytes / kDoorbellSlotBytes;
  if (lines <= kHeaderLines || num_devices == 0) return 0;
  return (lines - kHeaderLines) / num_devices;
}

std::uint64_t* DoorbellRegion::line(std::uint64_t i) const {
  return reinterpret_cast<std::uint64_t*>(base_ + i * kDoorbellSlotBytes);
}

Doorbell DoorbellRegion::chunk(std::uint64_t index) const {
  if (index >= blocks_per_device_ * num_devices_) {
    throw GeometryError("doorbell index " + std::to_string(index) + " outside region");
  }
  return Doorbell(line(kHeaderLines + index), index,
                  static_cast<std::uint32_t>(index / blocks_per_device_),
                  index % blocks_per_device_);
}

Doorbell DoorbellRegion::barrier(int rank) const {
  if (rank < 0 || rank >= kMaxRanks) throw RequestError("rank exceeds kMaxRanks");
  // Barrier slots are reported as device 0, block = rank.
  return Doorbell(line(kMaxRanks + rank), kMaxRanks + rank, 0, rank);
}

std::uint64_t DoorbellRegion::published_epoch(int rank) const {
  return std::atomic_ref<std::uint64_t>(*line(rank)).load(std::memory_order_acquire);
}

void DoorbellRegion::publish_epoch(int rank, std::uint64_t epoch) {
  std::atomic_ref<std::uint64_t>(*line(rank)).store(epoch, std::memory_order_release);
}

std::uint64_t DoorbellRegion::reset_epoch(int rank, int nranks, std::uint64_t current) {
  if (nranks > kMaxRanks) throw RequestError("nranks exceeds kMaxRanks");
  const std::uint64_t mine = published_epoch(rank);
  if (mine != current) {
    throw EpochMismatch("rank " + std::to_string(rank) + " expected epoch " +
                        std::to_string(current) + " but the pool holds " + std::to_string(mine));
  }
  for (int r = 0; r < nranks; ++r) {
    if (r == rank) continue;
    const std::uint64_t theirs = published_epoch(r);
    if (theirs != current && theirs != current + 1) {
      throw EpochMismatch("rank " + std::to_string(r) + " is at epoch " +
                          std::to_string(theirs) + " while rank " + std::to_string(rank) +
                          " leaves epoch " + std::to_string(current));
    }
  }
  publish_epoch(rank, current + 1);
  return current + 1;
}

}  // namespace poolcomm
