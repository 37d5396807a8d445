#include "poolcomm/placement.h"

#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <set>
#include <tuple>

#include "poolcomm/doorbell.h"

namespace poolcomm {
namespace {

constexpr std::uint64_t kMiB = 1ull << 20;
constexpr std::uint64_t kGiB = 1ull << 30;

PoolConfig geometry(std::uint32_t nd, std::uint64_t cap = 64 * kMiB,
                    std::uint64_t db = 256 * 1024) {
  PoolConfig cfg;
  cfg.num_devices = nd;
  cfg.device_capacity = cap;
  cfg.doorbell_region_size = db;
  cfg.backend = Backend::Recording;
  return cfg;
}

CollectiveRequest request(CollectiveKind kind, int nranks, std::uint64_t count, int chunks,
                          int root = 0) {
  CollectiveRequest req;
  req.kind = kind;
  req.nranks = nranks;
  req.count = count;
  req.chunk_count = chunks;
  req.root = root;
  return req;
}

TEST(PlacementFormulaTest, OneToNDeviceIndex) {
  EXPECT_EQ(device_index_1toN(0, 6), 0u);
  EXPECT_EQ(device_index_1toN(7, 6), 1u);
  EXPECT_EQ(device_index_1toN(5, 6), 5u);
}

TEST(PlacementFormulaTest, DeviceBlockId) {
  EXPECT_EQ(device_block_id(7, 6), 1u);
  EXPECT_EQ(device_block_id(5, 6), 0u);
  EXPECT_EQ(device_block_id(12, 6), 2u);
}

TEST(PlacementFormulaTest, DeviceLocation) {
  EXPECT_EQ(device_location(4096, 0, kMiB, 0, 128 * kMiB), 4096u);
  EXPECT_EQ(device_location(4096, 1, kMiB, 2, 128 * kMiB), 269488128u);
  EXPECT_EQ(device_location(0, 0, 64, 5, 128 * kGiB), 5u * 137438953472u);
  EXPECT_THROW(device_location(4096, 128, kMiB, 0, 128 * kMiB, 128 * kMiB), GeometryError);
}

TEST(PlacementFormulaTest, NToNDeviceIndex) {
  for (std::uint64_t id = 0; id < 16; ++id) {
    EXPECT_EQ(device_index_NtoN(3, id, 8, 4), id % 2 == 0 ? 6u : 7u);
    EXPECT_EQ(device_index_NtoN(2, id, 4, 4), 2u);
  }
  EXPECT_THROW(device_index_NtoN(0, 0, 6, 4), GeometryError);
  EXPECT_THROW(devices_per_rank(3, 4), GeometryError);
}

TEST(PlacementFormulaTest, WriteOrder) {
  EXPECT_EQ(write_order(0, 4, 0), 1);
  EXPECT_EQ(write_order(3, 4, 0), 0);
  std::vector<int> got;
  for (int s = 0; s < 4; ++s) got.push_back(write_order(1, 4, s));
  EXPECT_EQ(got, (std::vector<int>{2, 3, 0, 1}));
}

TEST(PlacementFormulaTest, WriteOrderIsAPermutationAtEveryStep) {
  for (int n = 1; n <= 12; ++n) {
    for (int s = 0; s < n; ++s) {
      std::set<int> targets;
      for (int r = 0; r < n; ++r) targets.insert(write_order(r, n, s));
      EXPECT_EQ(targets.size(), static_cast<std::size_t>(n));
    }
  }
}

TEST(PlacementFormulaTest, RoundRobinCoverage) {
  for (std::uint32_t nd = 1; nd <= 8; ++nd) {
    for (std::uint64_t start = 0; start < 20; ++start) {
      for (std::uint64_t k = nd; k <= 3 * nd + 2; ++k) {
        std::vector<std::uint64_t> hits(nd, 0);
        for (std::uint64_t id = start; id < start + k; ++id) ++hits[device_index_1toN(id, nd)];
        for (auto h : hits) ASSERT_GE(h, k / nd);
      }
    }
  }
}

TEST(PlacementFormulaTest, BlockSizeRoundsTo64) {
  EXPECT_EQ(block_size_for(1024, 1), 1024u);
  EXPECT_EQ(block_size_for(1000, 3), 384u);
  EXPECT_EQ(block_size_for(4, 8), 64u);
}

// Checks shared by every geometry: addresses land where the formulas say,
// publishes never overlap, retrieves read exactly what was published.
void check_plan_consistency(const CollectiveRequest& req, const PoolConfig& cfg,
                            const PlanOptions& opts = {}) {
  SCOPED_TRACE(std::string(to_string(req.kind)) + " P=" + std::to_string(req.nranks) +
               " ND=" + std::to_string(cfg.num_devices) +
               " C=" + std::to_string(req.chunk_count) + " mode=" +
               std::string(to_string(opts.mode)));
  const auto plans = build_all_plans(req, cfg, opts);
  PoolHandle pool = map_pool(cfg);
  const std::uint64_t bpd = DoorbellRegion::blocks_per_device(cfg.doorbell_region_size,
                                                              cfg.num_devices);

  std::vector<std::pair<std::uint64_t, std::uint64_t>> ranges;
  std::set<std::uint64_t> doorbells;
  std::map<std::tuple<int, int, int>, const PlanEntry*> published;
  for (int r = 0; r < req.nranks; ++r) {
    std::uint64_t sent = 0;
    for (const PlanEntry& e : plans[r].publish.entries) {
      ASSERT_EQ(e.producer, r);
      ASSERT_GE(e.pool_address, cfg.doorbell_region_size);
      ASSERT_EQ(pool.address_to_device(e.pool_address), e.device_index);
      const std::uint64_t window = e.device_index * cfg.stride() + cfg.device_capacity;
      ASSERT_LE(e.pool_address + e.length, window);
      ASSERT_LT(e.doorbell_index, bpd * cfg.num_devices);
      ASSERT_EQ(e.doorbell_index, doorbell_index(e.device_index, e.block_id, bpd));
      ASSERT_TRUE(doorbells.insert(e.doorbell_index).second) << "doorbell reused";
      ranges.emplace_back(e.pool_address, e.pool_address + e.length);
      published[{r, e.segment, e.chunk}] = &e;
      sent += e.length;
    }
    // Publish bytes match the rank's outgoing obligation.
    const CollectiveRequest mine = req.for_rank(r);
    std::uint64_t want = 0;
    if (req.nranks == 1) {
      want = segment_bytes(req);
    } else {
      switch (req.kind) {
        case CollectiveKind::AllReduce:
        case CollectiveKind::AllGather:
          want = mine.send_bytes();
          break;
        case CollectiveKind::Broadcast:
          want = r == req.root ? mine.send_bytes() : 0;
          break;
        case CollectiveKind::Reduce:
        case CollectiveKind::Gather:
          want = r == req.root ? 0 : mine.send_bytes();
          break;
        case CollectiveKind::Scatter:
          want = r == req.root ? mine.send_bytes() - segment_bytes(req) : 0;
          break;
        case CollectiveKind::ReduceScatter:
        case CollectiveKind::AllToAll:
          want = mine.send_bytes() - segment_bytes(req);
          break;
      }
    }
    ASSERT_EQ(sent, want) << "rank " << r;
  }
  std::sort(ranges.begin(), ranges.end());
  for (std::size_t i = 1; i < ranges.size(); ++i) {
    ASSERT_LE(ranges[i - 1].second, ranges[i].first) << "publish ranges overlap";
  }

  for (int r = 0; r < req.nranks; ++r) {
    for (const PlanEntry& e : plans[r].retrieve.entries) {
      ASSERT_EQ(e.consumer, r);
      auto it = published.find({e.producer, e.segment, e.chunk});
      ASSERT_NE(it, published.end());
      EXPECT_EQ(it->second->pool_address, e.pool_address);
      EXPECT_EQ(it->second->length, e.length);
      EXPECT_EQ(it->second->doorbell_index, e.doorbell_index);
      EXPECT_LE(e.buffer_offset + e.length, std::max<std::uint64_t>(req.for_rank(r).recv_bytes(),
                                                                    segment_bytes(req)));
    }
  }
}

TEST(BuildPlanTest, ConsistentAcrossKindsAndGeometries) {
  int checked = 0;
  for (CollectiveKind kind : kAllKinds) {
    for (int p : {1, 2, 3, 4, 6, 8}) {
      for (std::uint32_t nd : {1u, 4u, 6u, 8u}) {
        for (int c : {1, 3, 4, 8}) {
          for (std::uint64_t count : {24ull, 1000ull, 4096ull}) {
            if ((kind == CollectiveKind::ReduceScatter || kind == CollectiveKind::AllToAll) &&
                count % p != 0) {
              continue;
            }
            for (PlacementMode mode :
                 {PlacementMode::All, PlacementMode::Aggregate, PlacementMode::Naive}) {
              check_plan_consistency(request(kind, p, count, c, p - 1), geometry(nd), {mode});
              ++checked;
              if (HasFatalFailure()) return;
            }
          }
        }
      }
    }
  }
  EXPECT_GT(checked, 6000);
}

TEST(BuildPlanTest, NToNPublishesStayOnOwnDevices) {
  const PoolConfig cfg = geometry(8);
  for (CollectiveKind kind : kAllKinds) {
    if (scheme_for(kind) != Scheme::NToN) continue;
    for (int c : {1, 2, 4, 8, 16}) {
      const auto plans = build_all_plans(request(kind, 4, 4096, c), cfg);
      std::vector<std::set<std::uint32_t>> devices(4);
      for (int r = 0; r < 4; ++r) {
        for (const auto& e : plans[r].publish.entries) {
          devices[r].insert(e.device_index);
          EXPECT_GE(e.pool_address, cfg.doorbell_region_size);
        }
        for (std::uint32_t d : devices[r]) {
          EXPECT_TRUE(d == 2u * r || d == 2u * r + 1) << "rank " << r << " device " << d;
        }
      }
      for (int a = 0; a < 4; ++a) {
        for (int b = a + 1; b < 4; ++b) {
          for (std::uint32_t d : devices[a]) EXPECT_EQ(devices[b].count(d), 0u);
        }
      }
    }
  }
}

TEST(BuildPlanTest, ReduceScatterHasNoDeviceStepConflict) {
  const PoolConfig cfg = geometry(8);
  const auto plans = build_all_plans(request(CollectiveKind::ReduceScatter, 4, 4096, 1), cfg);
  // (device, step) -> ranks publishing / retrieving there.
  std::map<std::pair<std::uint32_t, int>, std::set<int>> pubs;
  std::map<std::pair<std::uint32_t, int>, std::set<int>> gets;
  for (int r = 0; r < 4; ++r) {
    for (const auto& e : plans[r].publish.entries) pubs[{e.device_index, e.step}].insert(r);
    for (const auto& e : plans[r].retrieve.entries) gets[{e.device_index, e.step}].insert(r);
  }
  for (const auto& [key, writers] : pubs) {
    auto it = gets.find(key);
    if (it == gets.end()) continue;
    for (int w : writers) {
      for (int g : it->second) {
        EXPECT_EQ(w, g) << "device " << key.first << " step " << key.second;
      }
    }
  }
}

TEST(BuildPlanTest, BroadcastRotatesReaderStart) {
  const PoolConfig cfg = geometry(6);
  const auto plans = build_all_plans(request(CollectiveKind::Broadcast, 3, 6 * 256, 6), cfg);
  ASSERT_EQ(plans[0].publish.entries.size(), 6u);
  for (int i = 0; i < 6; ++i) {
    EXPECT_EQ(plans[0].publish.entries[i].chunk, i);
    EXPECT_EQ(plans[0].publish.entries[i].device_index, static_cast<std::uint32_t>(i));
  }
  EXPECT_TRUE(plans[0].retrieve.entries.empty());
  for (int r = 1; r < 3; ++r) {
    const auto& reads = plans[r].retrieve.entries;
    ASSERT_EQ(reads.size(), 6u);
    for (int j = 0; j < 6; ++j) {
      EXPECT_EQ(reads[j].chunk, (r - 1 + j) % 6);
      EXPECT_EQ(reads[j].device_index, static_cast<std::uint32_t>((r - 1 + j) % 6));
    }
  }
}

TEST(BuildPlanTest, SelfCommunicatorRoundTripsOneSegment) {
  const auto plan = build_plan(request(CollectiveKind::AllGather, 1, 100, 1), geometry(4));
  ASSERT_EQ(plan.publish.entries.size(), 1u);
  ASSERT_EQ(plan.retrieve.entries.size(), 1u);
  EXPECT_EQ(plan.publish.entries[0].pool_address, plan.retrieve.entries[0].pool_address);
}

TEST(BuildPlanTest, UnevenChunksCarryRemainderInLastChunk) {
  const auto plan = build_plan(request(CollectiveKind::Broadcast, 2, 1000, 3), geometry(4));
  ASSERT_EQ(plan.publish.entries.size(), 3u);
  EXPECT_EQ(plan.block_size, 1344u);
  EXPECT_EQ(plan.publish.entries[0].length, 1344u);
  EXPECT_EQ(plan.publish.entries[2].length, 4000u - 2 * 1344u);
}

TEST(BuildPlanTest, TinySegmentsCollapseChunks) {
  CollectiveRequest req = request(CollectiveKind::AllGather, 2, 4, 8);
  EXPECT_EQ(effective_chunks(req), 1);
  EXPECT_EQ(effective_chunks(request(CollectiveKind::AllGather, 2, 4096, 8), {PlacementMode::Naive}), 1);
  EXPECT_EQ(effective_chunks(request(CollectiveKind::AllGather, 2, 4096, 8)), 8);
}

TEST(BuildPlanTest, IsDeterministic) {
  const PoolConfig cfg = geometry(6);
  const auto req = request(CollectiveKind::AllToAll, 3, 3000, 4).for_rank(1);
  EXPECT_EQ(plan_to_json_lines(build_plan(req, cfg), 1), plan_to_json_lines(build_plan(req, cfg), 1));
}

TEST(BuildPlanTest, CapacityExceeded) {
  const PoolConfig cfg = geometry(2, 1 * kMiB, 64 * 1024);
  EXPECT_THROW(build_plan(request(CollectiveKind::AllGather, 2, 1 << 20, 1), cfg), GeometryError);
  EXPECT_THROW(build_plan(request(CollectiveKind::AllGather, 2, 1 << 20, 1), cfg,
                          {PlacementMode::Naive}),
               GeometryError);
}

TEST(BuildPlanTest, DoorbellRegionTooSmall) {
  const PoolConfig cfg = geometry(4, 64 * kMiB, 64 * 64);
  EXPECT_THROW(build_plan(request(CollectiveKind::AllGather, 2, 64, 1), cfg), GeometryError);
}

TEST(BuildPlanTest, JsonLinesHaveOneObjectPerEntry) {
  const auto plan = build_plan(request(CollectiveKind::AllReduce, 3, 3000, 2), geometry(6));
  const std::string text = plan_to_json_lines(plan, 0);
  const auto lines = std::count(text.begin(), text.end(), '\n');
  EXPECT_EQ(static_cast<std::size_t>(lines),
            plan.publish.entries.size() + plan.retrieve.entries.size());
  EXPECT_NE(text.find("\"direction\":\"publish\""), std::string::npos);
}

TEST(PlacementModeTest, Parse) {
  EXPECT_EQ(parse_placement("ALL"), PlacementMode::All);
  EXPECT_EQ(parse_placement("naive"), PlacementMode::Naive);
  EXPECT_THROW(parse_placement("striped"), RequestError);
}

}  // namespace
}  // namespace poolcomm
