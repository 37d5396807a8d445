#include "poolcomm/placement.h"

#include <algorithm>
#include <cctype>
#include <map>
#include <sstream>
#include <tuple>

#include <json.hpp>

#include "poolcomm/doorbell.h"

namespace poolcomm {

namespace {

constexpr std::uint64_t kBlockAlign = 64;

std::uint64_t round_up(std::uint64_t v, std::uint64_t a) { return (v + a - 1) / a * a; }

int mod(int a, int n) { return ((a % n) + n) % n; }

bool multi_segment(CollectiveKind k) {
  return k == CollectiveKind::ReduceScatter || k == CollectiveKind::AllToAll ||
         k == CollectiveKind::Scatter;
}

// Segments `producer` publishes, in publish order.
std::vector<int> published_segments(const CollectiveRequest& req, int producer) {
  const int p = req.nranks;
  if (p == 1) return {0};
  switch (req.kind) {
    case CollectiveKind::AllReduce:
    case CollectiveKind::AllGather:
      return {0};
    case CollectiveKind::Broadcast:
      return producer == req.root ? std::vector<int>{0} : std::vector<int>{};
    case CollectiveKind::Reduce:
    case CollectiveKind::Gather:
      return producer != req.root ? std::vector<int>{0} : std::vector<int>{};
    case CollectiveKind::Scatter:
      if (producer != req.root) return {};
      [[fallthrough]];
    case CollectiveKind::ReduceScatter:
    case CollectiveKind::AllToAll: {
      std::vector<int> out;
      for (int s = 0; s < p - 1; ++s) out.push_back(write_order(producer, p, s));
      return out;
    }
  }
  return {};
}

struct Slot {
  int segment;
  int chunk;
};

std::vector<Slot> publish_order(const CollectiveRequest& req, int producer, int chunks) {
  const std::vector<int> segs = published_segments(req, producer);
  std::vector<Slot> out;
  if (req.kind == CollectiveKind::Scatter) {
    for (int s : segs)
      for (int c = 0; c < chunks; ++c) out.push_back({s, c});
  } else {
    for (int c = 0; c < chunks; ++c)
      for (int s : segs) out.push_back({s, c});
  }
  return out;
}

struct Read {
  int producer;
  int segment;
  int chunk;
  std::uint64_t dst_offset;
  bool reduce;
};

std::vector<Read> retrieve_order(const CollectiveRequest& req, int consumer, int chunks,
                                 std::uint64_t seg_bytes, std::uint64_t block) {
  const int p = req.nranks;
  const int t = consumer;
  std::vector<Read> out;
  const bool reduce = is_reduction(req.kind);
  switch (req.kind) {
    case CollectiveKind::AllReduce:
    case CollectiveKind::AllGather: {
      for (int c = 0; c < chunks; ++c) {
        for (int q = 1; q <= std::max(p - 1, 1); ++q) {
          const int src = p == 1 ? t : (t + q) % p;
          const std::uint64_t base =
              req.kind == CollectiveKind::AllGather ? static_cast<std::uint64_t>(src) * seg_bytes : 0;
          out.push_back({src, 0, c, base + c * block, reduce});
        }
      }
      break;
    }
    case CollectiveKind::ReduceScatter:
    case CollectiveKind::AllToAll: {
      for (int c = 0; c < chunks; ++c) {
        for (int q = 1; q <= std::max(p - 1, 1); ++q) {
          const int src = p == 1 ? t : mod(t - q, p);
          const int seg = p == 1 ? 0 : t;
          const std::uint64_t base =
              req.kind == CollectiveKind::AllToAll ? static_cast<std::uint64_t>(src) * seg_bytes : 0;
          out.push_back({src, seg, c, base + c * block, reduce});
        }
      }
      break;
    }
    case CollectiveKind::Broadcast: {
      if (p > 1 && t == req.root) break;
      // Readers start at staggered chunks so they sweep different devices.
      const int start = p == 1 ? 0 : mod(t - req.root - 1, p) % (p - 1) % chunks;
      for (int j = 0; j < chunks; ++j) {
        const int c = (start + j) % chunks;
        out.push_back({req.root, 0, c, c * block, false});
      }
      break;
    }
    case CollectiveKind::Scatter: {
      if (p > 1 && t == req.root) break;
      const int seg = p == 1 ? 0 : t;
      for (int c = 0; c < chunks; ++c) out.push_back({req.root, seg, c, c * block, false});
      break;
    }
    case CollectiveKind::Gather:
    case CollectiveKind::Reduce: {
      if (t != req.root) break;
      for (int c = 0; c < chunks; ++c) {
        for (int k = 0; k < std::max(p - 1, 1); ++k) {
          const int src = p == 1 ? t : (req.root + 1 + k) % p;
          const std::uint64_t base =
              req.kind == CollectiveKind::Gather ? static_cast<std::uint64_t>(src) * seg_bytes : 0;
          out.push_back({src, 0, c, base + c * block, reduce});
        }
      }
      break;
    }
  }
  return out;
}

// data_id of a published chunk. `position` is the slot's index in the
// producer's publish order.
std::uint64_t data_id_for(const CollectiveRequest& req, int producer, const Slot& slot,
                          std::size_t position) {
  const int p = req.nranks;
  switch (req.kind) {
    case CollectiveKind::AllReduce:
    case CollectiveKind::AllGather:
    case CollectiveKind::Broadcast:
      return static_cast<std::uint64_t>(slot.chunk);
    case CollectiveKind::ReduceScatter:
    case CollectiveKind::AllToAll:
      // Segment index in the send buffer is the target rank.
      return static_cast<std::uint64_t>(slot.chunk) * p + slot.segment;
    case CollectiveKind::Scatter:
      return position;
    case CollectiveKind::Gather:
    case CollectiveKind::Reduce: {
      const int producers = std::max(p - 1, 1);
      const int k = p == 1 ? 0 : mod(producer - req.root - 1, p);
      return static_cast<std::uint64_t>(slot.chunk) * producers + k;
    }
  }
  return 0;
}

struct Layout {
  std::vector<std::vector<PlanEntry>> publish;  // by producer, in execution order
  std::map<std::tuple<int, int, int>, std::size_t> index;  // (producer, seg, chunk) -> position
  std::uint64_t block = 0;
  int chunks = 0;
  std::uint64_t seg_bytes = 0;
};

Layout layout_publishes(const CollectiveRequest& req, const PoolConfig& cfg,
                        const PlanOptions& opts) {
  Layout lay;
  lay.seg_bytes = segment_bytes(req);
  lay.chunks = effective_chunks(req, opts);
  lay.block = block_size_for(lay.seg_bytes, lay.chunks);
  lay.publish.resize(req.nranks);

  const std::uint32_t nd = cfg.num_devices;
  const std::uint64_t stride = cfg.stride();
  const std::uint64_t db = cfg.doorbell_region_size;
  const std::uint64_t bpd = DoorbellRegion::blocks_per_device(db, nd);
  if (bpd == 0) throw GeometryError("doorbell region too small for any chunk doorbell");

  const Scheme scheme = scheme_for(req.kind);
  bool exclusive = scheme == Scheme::NToN;
  if (exclusive && (nd < static_cast<std::uint32_t>(req.nranks) || nd % req.nranks != 0)) {
    exclusive = false;  // degenerate geometry: per-rank rotated round-robin
  }
  const bool counter_blocks =
      opts.mode == PlacementMode::Naive || (scheme == Scheme::NToN && !exclusive);

  std::vector<std::uint64_t> next_block(nd, 0);
  std::uint32_t naive_dev = 0;
  std::uint64_t naive_off = db;

  for (int prod = 0; prod < req.nranks; ++prod) {
    const std::vector<Slot> order = publish_order(req, prod, lay.chunks);
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
      const Slot& slot = order[pos];
      PlanEntry e;
      e.segment = slot.segment;
      e.chunk = slot.chunk;
      e.producer = prod;
      e.direction = PlanDirection::Publish;
      e.step = static_cast<int>(pos);
      e.length = std::min<std::uint64_t>(lay.block, lay.seg_bytes - slot.chunk * lay.block);
      e.buffer_offset = (multi_segment(req.kind) && req.nranks > 1
                             ? static_cast<std::uint64_t>(slot.segment) * lay.seg_bytes
                             : 0) +
                        slot.chunk * lay.block;
      e.chunk_id = data_id_for(req, prod, slot, pos);

      if (opts.mode == PlacementMode::Naive) {
        const std::uint64_t need = round_up(e.length, kBlockAlign);
        while (naive_off + need > cfg.device_capacity) {
          if (++naive_dev >= nd) throw GeometryError("pool capacity exceeded (naive placement)");
          naive_off = db;
        }
        e.device_index = naive_dev;
        e.block_id = next_block[naive_dev]++;
        e.pool_address = naive_dev * stride + naive_off;
        naive_off += need;
      } else {
        if (scheme == Scheme::OneToN) {
          e.device_index = device_index_1toN(e.chunk_id, nd);
        } else if (exclusive) {
          e.device_index = device_index_NtoN(prod, e.chunk_id, nd, req.nranks);
        } else {
          e.device_index = static_cast<std::uint32_t>((e.chunk_id + prod) % nd);
        }
        if (counter_blocks) {
          e.block_id = next_block[e.device_index]++;
        } else if (exclusive) {
          e.block_id = e.chunk_id / devices_per_rank(nd, req.nranks);
        } else {
          e.block_id = device_block_id(e.chunk_id, nd);
        }
        e.pool_address = device_location(db, e.block_id, lay.block, e.device_index, stride);
        if (e.pool_address - e.device_index * stride + e.length > cfg.device_capacity) {
          throw GeometryError("pool capacity exceeded: device " + std::to_string(e.device_index) +
                              " block " + std::to_string(e.block_id));
        }
      }
      e.doorbell_index = doorbell_index(e.device_index, e.block_id, bpd);
      lay.index[{prod, slot.segment, slot.chunk}] = lay.publish[prod].size();
      lay.publish[prod].push_back(e);
    }
  }
  return lay;
}

PlacementPlan retrieve_plan(const CollectiveRequest& req, const Layout& lay, int consumer) {
  PlacementPlan plan;
  const std::vector<Read> reads =
      retrieve_order(req, consumer, lay.chunks, lay.seg_bytes, lay.block);
  for (std::size_t i = 0; i < reads.size(); ++i) {
    const Read& r = reads[i];
    const auto it = lay.index.find({r.producer, r.segment, r.chunk});
    if (it == lay.index.end()) {
      throw GeometryError("internal: retrieve without a matching publish");
    }
    PlanEntry e = lay.publish[r.producer][it->second];
    e.direction = PlanDirection::Retrieve;
    e.consumer = consumer;
    e.step = static_cast<int>(i) + 1;
    e.buffer_offset = r.dst_offset;
    e.reduce = r.reduce;
    plan.entries.push_back(e);
  }
  return plan;
}

}  // namespace

std::string_view to_string(PlacementMode m) {
  switch (m) {
    case PlacementMode::All: return "all";
    case PlacementMode::Aggregate: return "aggregate";
    case PlacementMode::Naive: return "naive";
  }
  return "?";
}

PlacementMode parse_placement(std::string_view name) {
  std::string n(name);
  for (auto& c : n) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  for (PlacementMode m : {PlacementMode::All, PlacementMode::Aggregate, PlacementMode::Naive}) {
    if (to_string(m) == n) return m;
  }
  throw RequestError("unknown placement mode '" + std::string(name) + "'");
}

Scheme scheme_for(CollectiveKind kind) {
  switch (kind) {
    case CollectiveKind::AllReduce:
    case CollectiveKind::AllGather:
    case CollectiveKind::ReduceScatter:
    case CollectiveKind::AllToAll:
      return Scheme::NToN;
    default:
      return Scheme::OneToN;
  }
}

std::uint32_t device_index_1toN(std::uint64_t data_id, std::uint32_t nd) {
  return static_cast<std::uint32_t>(data_id % nd);
}

std::uint64_t device_block_id(std::uint64_t data_id, std::uint32_t nd) { return data_id / nd; }

std::uint64_t device_location(std::uint64_t db_offset, std::uint64_t device_block_id,
                              std::uint64_t block_size, std::uint32_t device_index,
                              std::uint64_t device_stride, std::uint64_t device_capacity) {
  const std::uint64_t in_device = db_offset + device_block_id * block_size;
  if (device_capacity != 0 && in_device + block_size > device_capacity) {
    throw GeometryError("block " + std::to_string(device_block_id) + " of " +
                        std::to_string(block_size) + " bytes exceeds device " +
                        std::to_string(device_index) + " window");
  }
  return in_device + static_cast<std::uint64_t>(device_index) * device_stride;
}

std::uint32_t devices_per_rank(std::uint32_t nd, int total_ranks) {
  if (total_ranks < 1 || nd < static_cast<std::uint32_t>(total_ranks) ||
      nd % static_cast<std::uint32_t>(total_ranks) != 0) {
    throw GeometryError("degenerate geometry: " + std::to_string(nd) + " devices cannot be split "
                        "evenly over " + std::to_string(total_ranks) + " ranks");
  }
  return nd / static_cast<std::uint32_t>(total_ranks);
}

std::uint32_t device_index_NtoN(int rank_id, std::uint64_t data_id, std::uint32_t nd,
                                int total_ranks) {
  const std::uint32_t per_rank = devices_per_rank(nd, total_ranks);
  return static_cast<std::uint32_t>(rank_id) * per_rank +
         static_cast<std::uint32_t>(data_id % per_rank);
}

int write_order(int rank_id, int total_ranks, int step) {
  return (rank_id + 1 + step) % total_ranks;
}

std::uint64_t block_size_for(std::uint64_t segment_bytes, int chunk_count) {
  const auto c = static_cast<std::uint64_t>(std::max(chunk_count, 1));
  return round_up(std::max<std::uint64_t>((segment_bytes + c - 1) / c, 1), kBlockAlign);
}

std::uint64_t segment_bytes(const CollectiveRequest& req) {
  std::uint64_t n = req.count;
  if (req.kind == CollectiveKind::ReduceScatter || req.kind == CollectiveKind::AllToAll) {
    n /= static_cast<std::uint64_t>(req.nranks);
  }
  return n * element_size(req.elem);
}

int effective_chunks(const CollectiveRequest& req, const PlanOptions& opts) {
  if (opts.mode != PlacementMode::All) return 1;
  const std::uint64_t seg = segment_bytes(req);
  const std::uint64_t block = block_size_for(seg, req.chunk_count);
  return static_cast<int>((seg + block - 1) / block);
}

PlanPair build_plan(const CollectiveRequest& req, const PoolConfig& cfg,
                    const PlanOptions& opts) {
  req.validate();
  const Layout lay = layout_publishes(req, cfg, opts);
  PlanPair out;
  out.block_size = lay.block;
  out.publish.entries = lay.publish[req.rank];
  out.retrieve = retrieve_plan(req, lay, req.rank);
  return out;
}

std::vector<PlanPair> build_all_plans(const CollectiveRequest& req, const PoolConfig& cfg,
                                      const PlanOptions& opts) {
  req.validate();
  const Layout lay = layout_publishes(req, cfg, opts);
  std::vector<PlanPair> out(req.nranks);
  for (int r = 0; r < req.nranks; ++r) {
    out[r].block_size = lay.block;
    out[r].publish.entries = lay.publish[r];
    out[r].retrieve = retrieve_plan(req, lay, r);
  }
  return out;
}

std::string plan_to_json_lines(const PlanPair& plan, int rank) {
  std::ostringstream os;
  auto emit = [&](const PlanEntry& e) {
    nlohmann::json j = {
        {"rank", rank},
        {"direction", e.direction == PlanDirection::Publish ? "publish" : "retrieve"},
        {"step", e.step},
        {"chunk_id", e.chunk_id},
        {"segment", e.segment},
        {"chunk", e.chunk},
        {"producer", e.producer},
        {"consumer", e.consumer},
        {"pool_address", e.pool_address},
        {"length", e.length},
        {"device", e.device_index},
        {"block", e.block_id},
        {"doorbell", e.doorbell_index},
        {"buffer_offset", e.buffer_offset},
        {"reduce", e.reduce},
    };
    os << j.dump() << '\n';
  };
  for (const auto& e : plan.publish.entries) emit(e);
  for (const auto& e : plan.retrieve.entries) emit(e);
  return os.str();
}

}  // namespace poolcomm
