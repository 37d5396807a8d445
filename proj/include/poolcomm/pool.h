#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "poolcomm/types.h"

namespace poolcomm {

enum class Backend {
  SharedArena,  // anonymous mapping shared by threads of one process
  FileMapped,   // MAP_SHARED file mapping, ranks may be separate processes
  Recording,    // no data storage; logs accesses for the emulator
};

std::string_view to_string(Backend b);
Backend parse_backend(std::string_view name);

enum class Direction { Write, Read };

/// Geometry of a sequentially stacked pool. Device d owns the window
/// [d * stride, d * stride + device_capacity). The doorbell region occupies
/// [0, doorbell_region_size) of device 0; every data address is offset by
/// doorbell_region_size, so data never lands in it on any device.
struct PoolConfig {
  std::uint32_t num_devices = 1;
  std::uint64_t device_capacity = 0;
  std::uint64_t device_stride = 0;  // 0 means device_capacity
  std::uint64_t doorbell_region_size = 0;
  Backend backend = Backend::SharedArena;
  std::string file_path;  // FileMapped only

  std::uint64_t stride() const {
    return device_stride == 0 ? device_capacity : device_stride;
  }
  // (num_devices - 1) * stride + device_capacity; num_devices * capacity
  // under pure sequential stacking. Throws PoolError on overflow.
  std::uint64_t total_size() const;
  void validate() const;
};

/// One logged pool access (Recording backend).
struct AccessRecord {
  std::uint64_t seq = 0;
  int rank = -1;
  std::uint32_t device = 0;
  std::uint64_t addr = 0;
  std::uint64_t len = 0;
  Direction dir = Direction::Write;
  std::int64_t issue_ns = 0;
};

/// Shared view of a mapped pool. Copies refer to the same region; the
/// mapping is released with the last copy.
class PoolHandle {
 public:
  PoolHandle() = default;

  const PoolConfig& config() const;
  std::uint64_t size() const;
  bool valid() const { return region_ != nullptr; }

  std::uint32_t address_to_device(std::uint64_t addr) const;

  // The range [addr, addr + len) must lie inside one device window.
  void write(std::uint64_t addr, std::span<const std::byte> data, int issuer = -1);
  void read(std::uint64_t addr, std::span<std::byte> out, int issuer = -1) const;
  std::vector<std::byte> read(std::uint64_t addr, std::uint64_t len) const;

  // Raw bytes of the doorbell region, [0, doorbell_region_size). Real memory
  // on every backend, including Recording.
  std::span<std::byte> doorbell_region() const;

  std::vector<AccessRecord> access_log() const;
  void clear_access_log();

 private:
  struct Region;
  friend PoolHandle map_pool(const PoolConfig& config);

  void check_range(std::uint64_t addr, std::uint64_t len) const;

  std::shared_ptr<Region> region_;
};

/// Creates or attaches a pool. SharedArena and Recording always create a
/// fresh zeroed region. FileMapped creates `file_path` (zero-filled) when it
/// does not exist and otherwise attaches to it; the file must already have
/// the pool size.
PoolHandle map_pool(const PoolConfig& config);

}  // namespace poolcomm
