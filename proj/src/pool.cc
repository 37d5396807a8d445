#include "poolcomm/pool.h"

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cctype>
#include <cerrno>
#include <chrono>
#include <cstring>
#include <limits>
#include <mutex>

namespace poolcomm {

namespace {

std::string errno_message(const std::string& what) {
  return what + ": " + std::strerror(errno);
}

std::int64_t now_ns() {
  return std::chrono::duration_cast<std::chrono::nanoseconds>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

}  // namespace

std::string_view to_string(Backend b) {
  switch (b) {
    case Backend::SharedArena: return "sharedarena";
    case Backend::FileMapped: return "filemapped";
    case Backend::Recording: return "recording";
  }
  return "?";
}

Backend parse_backend(std::string_view name) {
  for (Backend b : {Backend::SharedArena, Backend::FileMapped, Backend::Recording}) {
    std::string lowered(name);
    for (auto& c : lowered) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (to_string(b) == lowered) return b;
  }
  throw PoolError("unknown backend '" + std::string(name) + "'");
}

std::uint64_t PoolConfig::total_size() const {
  const std::uint64_t s = stride();
  if (num_devices == 0) return 0;
  const std::uint64_t n = num_devices - 1;
  if (n != 0 && s > (std::numeric_limits<std::uint64_t>::max() - device_capacity) / n) {
    throw PoolError("pool size overflows 64-bit address space");
  }
  return n * s + device_capacity;
}

void PoolConfig::validate() const {
  if (num_devices < 1) throw PoolError("num_devices must be >= 1");
  if (device_capacity == 0) throw PoolError("device_capacity must be > 0");
  if (stride() < device_capacity) {
    throw PoolError("device_stride must not be smaller than device_capacity");
  }
  if (doorbell_region_size >= device_capacity) {
    throw PoolError("doorbell region must be smaller than one device");
  }
  if (backend == Backend::FileMapped && file_path.empty()) {
    throw PoolError("FileMapped backend needs a file path");
  }
  (void)total_size();
}

struct PoolHandle::Region {
  PoolConfig config;
  std::uint64_t size = 0;
  std::byte* base = nullptr;  // whole pool; nullptr for Recording
  std::size_t mapped_bytes = 0;
  std::byte* doorbells = nullptr;  // Recording only
  std::size_t doorbell_bytes = 0;

  mutable std::mutex log_mu;
  mutable std::vector<AccessRecord> log;
  mutable std::uint64_t next_seq = 0;

  Region() = default;
  Region(const Region&) = delete;
  Region& operator=(const Region&) = delete;

  ~Region() {
    if (base != nullptr) munmap(base, mapped_bytes);
    if (doorbells != nullptr) munmap(doorbells, doorbell_bytes);
  }

  void record(std::uint64_t addr, std::uint64_t len, Direction dir, int rank) const {
    std::lock_guard<std::mutex> lock(log_mu);
    log.push_back(AccessRecord{next_seq++, rank,
                               static_cast<std::uint32_t>(addr / config.stride()), addr, len,
                               dir, now_ns()});
  }
};

const PoolConfig& PoolHandle::config() const { return region_->config; }

std::uint64_t PoolHandle::size() const { return region_->size; }

std::uint32_t PoolHandle::address_to_device(std::uint64_t addr) const {
  if (addr >= region_->size) {
    throw PoolError("address " + std::to_string(addr) + " outside pool of " +
                    std::to_string(region_->size) + " bytes");
  }
  return static_cast<std::uint32_t>(addr / region_->config.stride());
}

void PoolHandle::check_range(std::uint64_t addr, std::uint64_t len) const {
  const std::uint32_t dev = address_to_device(addr);
  const std::uint64_t window_end =
      static_cast<std::uint64_t>(dev) * region_->config.stride() + region_->config.device_capacity;
  if (addr >= window_end) {
    throw PoolError("address " + std::to_string(addr) + " falls in the gap after device " +
                    std::to_string(dev));
  }
  if (len > window_end - addr) {
    throw PoolError("access [" + std::to_string(addr) + ", +" + std::to_string(len) +
                    ") straddles the boundary of device " + std::to_string(dev));
  }
}

void PoolHandle::write(std::uint64_t addr, std::span<const std::byte> data, int issuer) {
  check_range(addr, data.size());
  if (region_->config.backend == Backend::Recording) {
    region_->record(addr, data.size(), Direction::Write, issuer);
    return;
  }
  if (!data.empty()) std::memcpy(region_->base + addr, data.data(), data.size());
}

void PoolHandle::read(std::uint64_t addr, std::span<std::byte> out, int issuer) const {
  check_range(addr, out.size());
  if (region_->config.backend == Backend::Recording) {
    region_->record(addr, out.size(), Direction::Read, issuer);
    std::memset(out.data(), 0, out.size());
    return;
  }
  if (!out.empty()) std::memcpy(out.data(), region_->base + addr, out.size());
}

std::vector<std::byte> PoolHandle::read(std::uint64_t addr, std::uint64_t len) const {
  std::vector<std::byte> out(len);
  read(addr, out);
  return out;
}

std::span<std::byte> PoolHandle::doorbell_region() const {
  const std::size_t n = region_->config.doorbell_region_size;
  if (region_->config.backend == Backend::Recording) return {region_->doorbells, n};
  return {region_->base, n};
}

std::vector<AccessRecord> PoolHandle::access_log() const {
  std::lock_guard<std::mutex> lock(region_->log_mu);
  return region_->log;
}

void PoolHandle::clear_access_log() {
  std::lock_guard<std::mutex> lock(region_->log_mu);
  region_->log.clear();
  region_->next_seq = 0;
}

PoolHandle map_pool(const PoolConfig& config) {
  config.validate();
  auto region = std::make_shared<PoolHandle::Region>();
  region->config = config;
  region->size = config.total_size();
  if (region->size > static_cast<std::uint64_t>(std::numeric_limits<std::size_t>::max())) {
    throw PoolError("pool size does not fit the address space");
  }

  switch (config.backend) {
    case Backend::Recording: {
      if (config.doorbell_region_size > 0) {
        void* p = mmap(nullptr, config.doorbell_region_size, PROT_READ | PROT_WRITE,
                       MAP_PRIVATE | MAP_ANONYMOUS, -1, 0);
        if (p == MAP_FAILED) throw PoolError(errno_message("mmap doorbell region"));
        region->doorbells = static_cast<std::byte*>(p);
        region->doorbell_bytes = config.doorbell_region_size;
      }
      break;
    }
    case Backend::SharedArena: {
      void* p = mmap(nullptr, region->size, PROT_READ | PROT_WRITE,
                     MAP_PRIVATE | MAP_ANONYMOUS | MAP_NORESERVE, -1, 0);
      if (p == MAP_FAILED) throw PoolError(errno_message("mmap shared arena"));
      region->base = static_cast<std::byte*>(p);
      region->mapped_bytes = region->size;
      break;
    }
    case Backend::FileMapped: {
      const off_t want = static_cast<off_t>(region->size);
      int fd = open(config.file_path.c_str(), O_RDWR | O_CREAT | O_EXCL, 0600);
      if (fd >= 0) {
        if (ftruncate(fd, want) != 0) {
          const std::string msg = errno_message("ftruncate " + config.file_path);
          close(fd);
          throw PoolError(msg);
        }
      } else if (errno == EEXIST) {
        fd = open(config.file_path.c_str(), O_RDWR);
        if (fd < 0) throw PoolError(errno_message("open " + config.file_path));
        struct stat st {};
        if (fstat(fd, &st) != 0 || st.st_size != want) {
          close(fd);
          throw PoolError("pool file " + config.file_path + " has the wrong size");
        }
      } else {
        throw PoolError(errno_message("create " + config.file_path));
      }
      void* p = mmap(nullptr, region->size, PROT_READ | PROT_WRITE, MAP_SHARED, fd, 0);
      close(fd);
      if (p == MAP_FAILED) throw PoolError(errno_message("mmap " + config.file_path));
      region->base = static_cast<std::byte*>(p);
      region->mapped_bytes = region->size;
      break;
    }
  }

  PoolHandle handle;
  handle.region_ = std::move(region);
  return handle;
}

}  // namespace poolcomm
