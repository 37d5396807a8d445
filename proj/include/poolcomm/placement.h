#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "poolcomm/pool.h"
#include "poolcomm/types.h"

namespace poolcomm {

// Round-robin over every device (rooted collectives) or over a rank-exclusive
// device range (all-to-all style collectives).
enum class Scheme { OneToN, NToN };

// All: interleaved and chunked. Aggregate: interleaved, one chunk per
// segment, no publish/retrieve overlap within a rank. Naive: sequential
// allocation, one chunk, no overlap.
enum class PlacementMode { All, Aggregate, Naive };

enum class PlanDirection { Publish, Retrieve };

std::string_view to_string(PlacementMode m);
PlacementMode parse_placement(std::string_view name);

Scheme scheme_for(CollectiveKind kind);

// --- Placement formulas -----------------------------------------------------

/// data_id mod nd.
std::uint32_t device_index_1toN(std::uint64_t data_id, std::uint32_t nd);

/// floor(data_id / nd): the block slot of a chunk inside its device.
std::uint64_t device_block_id(std::uint64_t data_id, std::uint32_t nd);

/// db_offset + block_id * block_size + device_index * device_stride.
/// When `device_capacity` is non-zero, throws GeometryError if a block of
/// `block_size` bytes at that address does not fit inside the device window.
std::uint64_t device_location(std::uint64_t db_offset, std::uint64_t device_block_id,
                              std::uint64_t block_size, std::uint32_t device_index,
                              std::uint64_t device_stride, std::uint64_t device_capacity = 0);

/// nd / total_ranks; GeometryError unless nd >= total_ranks and divisible.
std::uint32_t devices_per_rank(std::uint32_t nd, int total_ranks);

/// rank_id * device_per_rank + data_id mod device_per_rank.
std::uint32_t device_index_NtoN(int rank_id, std::uint64_t data_id, std::uint32_t nd,
                                int total_ranks);

/// (rank_id + 1 + step) mod total_ranks: the target of a rank's step-th
/// outgoing segment.
int write_order(int rank_id, int total_ranks, int step);

/// ceil(segment_bytes / chunk_count) rounded up to 64 bytes.
std::uint64_t block_size_for(std::uint64_t segment_bytes, int chunk_count);

// --- Plans -----------------------------------------------------------------

struct PlanEntry {
  std::uint64_t chunk_id = 0;  // data_id fed to the placement formulas
  int segment = 0;             // segment index inside the producer's send buffer
  int chunk = 0;               // chunk index inside the segment
  int producer = 0;
  int consumer = -1;           // reading rank; -1 on publish entries
  std::uint64_t pool_address = 0;
  std::uint64_t length = 0;
  std::uint32_t device_index = 0;
  std::uint64_t block_id = 0;
  std::uint64_t doorbell_index = 0;
  PlanDirection direction = PlanDirection::Publish;
  // Logical time slot. Publish: position in the producer's write queue.
  // Retrieve: position in the consumer's read queue plus one.
  int step = 0;
  // Publish: offset into the producer's send buffer. Retrieve: offset into
  // the consumer's recv buffer.
  std::uint64_t buffer_offset = 0;
  bool reduce = false;
};

struct PlacementPlan {
  std::vector<PlanEntry> entries;
};

struct PlanPair {
  PlacementPlan publish;
  PlacementPlan retrieve;
  std::uint64_t block_size = 0;
};

struct PlanOptions {
  PlacementMode mode = PlacementMode::All;
};

/// Chunks per segment actually used: 1 for Aggregate/Naive, otherwise
/// ceil(segment_bytes / block_size) (never more than chunk_count).
int effective_chunks(const CollectiveRequest& req, const PlanOptions& opts = {});

/// Bytes in one segment (the unit a producer hands to one consumer set).
std::uint64_t segment_bytes(const CollectiveRequest& req);

/// Plans for `req.rank`. A pure function of its inputs: every rank computes
/// every other rank's placement locally.
PlanPair build_plan(const CollectiveRequest& req, const PoolConfig& cfg,
                    const PlanOptions& opts = {});

/// Plans for every rank, indexed by rank.
std::vector<PlanPair> build_all_plans(const CollectiveRequest& req, const PoolConfig& cfg,
                                      const PlanOptions& opts = {});

/// One JSON object per line, publish entries first.
std::string plan_to_json_lines(const PlanPair& plan, int rank);

}  // namespace poolcomm
