#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <span>

#include "poolcomm/types.h"

namespace poolcomm {

enum class DoorbellState : std::uint64_t { Stale = 0, Ready = 1 };

// One doorbell per cache line.
inline constexpr std::size_t kDoorbellSlotBytes = 64;
// Upper bound on communicator size; fixes the doorbell-region header size.
inline constexpr int kMaxRanks = 32;

/// Doorbell word layout: bit 0 is the state, the remaining bits carry the
/// epoch of the last ring. A doorbell is READY for epoch e when the state bit
/// is set and the stored epoch is >= e, so advancing the epoch makes every
/// slot STALE without touching it.
constexpr std::uint64_t encode_doorbell(DoorbellState s, std::uint64_t epoch) {
  return (epoch << 1) | static_cast<std::uint64_t>(s);
}
constexpr DoorbellState decode_state(std::uint64_t word, std::uint64_t epoch) {
  return ((word & 1u) != 0 && (word >> 1) >= epoch) ? DoorbellState::Ready
                                                     : DoorbellState::Stale;
}

/// Dense, computed doorbell slot for a (device, block) pair. Throws
/// GeometryError when block >= blocks_per_device.
std::uint64_t doorbell_index(std::uint32_t device_index, std::uint64_t device_block_id,
                             std::uint64_t blocks_per_device);

/// Probe policy for wait(): `tight_probes` back-to-back loads, then sleeps
/// that double from `initial_backoff` up to `max_backoff`, checking the
/// deadline after every sleep.
struct SpinPolicy {
  int tight_probes = 64;
  std::chrono::nanoseconds initial_backoff{100};
  std::chrono::nanoseconds max_backoff{10'000};
  std::chrono::nanoseconds timeout{std::chrono::seconds(5)};
};

// Reads POOLCOMM_DOORBELL_TIMEOUT_MS when set; 5 s otherwise.
SpinPolicy default_spin_policy();

/// A view of one doorbell word in the pool. Cheap to copy.
class Doorbell {
 public:
  Doorbell(std::uint64_t* word, std::uint64_t index, std::uint32_t device,
           std::uint64_t block)
      : word_(word), index_(index), device_(device), block_(block) {}

  // Publishes READY for `epoch`. Every store the caller made before ring()
  // is visible to a rank whose wait() for the same epoch has returned.
  void ring(std::uint64_t epoch) const;

  // Single fresh observation.
  DoorbellState state(std::uint64_t epoch) const;
  std::uint64_t raw() const;

  // Blocks until READY for `epoch`; throws DoorbellTimeout.
  void wait(std::uint64_t epoch, const SpinPolicy& policy) const;

  std::uint64_t index() const { return index_; }

 private:
  std::uint64_t* word_;
  std::uint64_t index_;
  std::uint32_t device_;
  std::uint64_t block_;
};

/// Layout of the pool's doorbell region (pool offset 0):
///   line [0, kMaxRanks)              per-rank published epoch
///   line [kMaxRanks, 2 * kMaxRanks)  per-rank completion-barrier doorbell
///   line [2 * kMaxRanks, ...)        chunk doorbells, indexed by doorbell_index()
class DoorbellRegion {
 public:
  static constexpr std::uint64_t kHeaderLines = 2 * kMaxRanks;

  DoorbellRegion(std::span<std::byte> region, std::uint32_t num_devices);

  // Number of chunk doorbells per device that fit in the region.
  static std::uint64_t blocks_per_device(std::uint64_t region_bytes, std::uint32_t num_devices);
  std::uint64_t blocks_per_device() const { return blocks_per_device_; }

  Doorbell chunk(std::uint64_t index) const;
  Doorbell barrier(int rank) const;

  std::uint64_t published_epoch(int rank) const;
  void publish_epoch(int rank, std::uint64_t epoch);

  /// Moves `rank` from epoch `current` to `current + 1`. Requires a completed
  /// collective barrier for `current`, which bounds every other rank to
  /// {current, current + 1}; anything else throws EpochMismatch.
  std::uint64_t reset_epoch(int rank, int nranks, std::uint64_t current);

 private:
  std::uint64_t* line(std::uint64_t i) const;

  std::byte* base_;
  std::uint64_t lines_;
  std::uint32_t num_devices_;
  std::uint64_t blocks_per_device_;
};

}  // namespace poolcomm
