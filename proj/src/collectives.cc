#include "poolcomm/collectives.h"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <exception>
#include <limits>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace poolcomm {

namespace {

std::int64_t now_ns() {
  return std::chrono::duration_cast<std::chrono::nanoseconds>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

template <typename T>
void fold(T* acc, const T* src, std::size_t n, ReduceOp op) {
  switch (op) {
    case ReduceOp::Sum:
      if constexpr (std::is_integral_v<T>) {
        using U = std::make_unsigned_t<T>;
        for (std::size_t i = 0; i < n; ++i) {
          acc[i] = static_cast<T>(static_cast<U>(acc[i]) + static_cast<U>(src[i]));
        }
      } else {
        for (std::size_t i = 0; i < n; ++i) acc[i] = acc[i] + src[i];
      }
      break;
    case ReduceOp::Max:
      for (std::size_t i = 0; i < n; ++i) acc[i] = std::max(acc[i], src[i]);
      break;
    case ReduceOp::Min:
      for (std::size_t i = 0; i < n; ++i) acc[i] = std::min(acc[i], src[i]);
      break;
  }
}

template <typename T>
void fold_bytes(std::span<std::byte> acc, std::span<const std::byte> src, ReduceOp op) {
  // Buffers are not guaranteed to be aligned for T.
  const std::size_t n = acc.size() / sizeof(T);
  constexpr std::size_t kBatch = 1024;
  T a[kBatch];
  T b[kBatch];
  for (std::size_t i = 0; i < n; i += kBatch) {
    const std::size_t m = std::min(kBatch, n - i);
    std::memcpy(a, acc.data() + i * sizeof(T), m * sizeof(T));
    std::memcpy(b, src.data() + i * sizeof(T), m * sizeof(T));
    fold(a, b, m, op);
    std::memcpy(acc.data() + i * sizeof(T), a, m * sizeof(T));
  }
}

bool overlaps(std::span<const std::byte> a, std::span<const std::byte> b) {
  if (a.empty() || b.empty()) return false;
  const auto* a0 = a.data();
  const auto* b0 = b.data();
  return a0 < b0 + b.size() && b0 < a0 + a.size();
}

void copy_bytes(std::span<std::byte> dst, std::uint64_t dst_off, std::span<const std::byte> src,
                std::uint64_t src_off, std::uint64_t n) {
  if (n != 0) std::memcpy(dst.data() + dst_off, src.data() + src_off, n);
}

template <typename T>
std::uint64_t ulp_distance(T a, T b) {
  using I = std::conditional_t<sizeof(T) == 4, std::int32_t, std::int64_t>;
  if (std::isnan(a) || std::isnan(b)) return std::isnan(a) && std::isnan(b) ? 0 : ~0ull;
  auto key = [](T v) {
    I i = std::bit_cast<I>(v);
    return i < 0 ? std::numeric_limits<I>::min() - i : i;
  };
  const I ka = key(a);
  const I kb = key(b);
  return ka > kb ? static_cast<std::uint64_t>(ka) - static_cast<std::uint64_t>(kb)
                 : static_cast<std::uint64_t>(kb) - static_cast<std::uint64_t>(ka);
}

template <typename T>
bool compare_typed(std::span<const std::byte> got, std::span<const std::byte> want, int max_ulps,
                   std::uint64_t& first_bad) {
  const std::size_t n = want.size() / sizeof(T);
  for (std::size_t i = 0; i < n; ++i) {
    T g;
    T w;
    std::memcpy(&g, got.data() + i * sizeof(T), sizeof(T));
    std::memcpy(&w, want.data() + i * sizeof(T), sizeof(T));
    bool same;
    if constexpr (std::is_floating_point_v<T>) {
      same = std::memcmp(&g, &w, sizeof(T)) == 0 ||
             ulp_distance(g, w) <= static_cast<std::uint64_t>(max_ulps);
    } else {
      same = g == w;
    }
    if (!same) {
      first_bad = i;
      return false;
    }
  }
  return true;
}

}  // namespace

std::string_view to_string(TraceOp op) {
  switch (op) {
    case TraceOp::Write: return "write";
    case TraceOp::Ring: return "ring";
    case TraceOp::WaitBegin: return "wait_begin";
    case TraceOp::WaitEnd: return "wait_end";
    case TraceOp::Read: return "read";
    case TraceOp::Reduce: return "reduce";
    case TraceOp::BarrierEnd: return "barrier_end";
  }
  return "?";
}

void reduce_into(std::span<std::byte> acc, std::span<const std::byte> src, ElemType elem,
                 ReduceOp op) {
  switch (elem) {
    case ElemType::I32: fold_bytes<std::int32_t>(acc, src, op); break;
    case ElemType::I64: fold_bytes<std::int64_t>(acc, src, op); break;
    case ElemType::F32: fold_bytes<float>(acc, src, op); break;
    case ElemType::F64: fold_bytes<double>(acc, src, op); break;
  }
}

Communicator::Communicator(PoolHandle pool, int rank, int nranks, CommOptions opts)
    : pool_(std::move(pool)),
      doorbells_(pool_.doorbell_region(), pool_.config().num_devices),
      rank_(rank),
      nranks_(nranks),
      opts_(std::move(opts)) {
  if (nranks < 1 || nranks > kMaxRanks) {
    throw RequestError("nranks must be in [1, " + std::to_string(kMaxRanks) + "]");
  }
  if (rank < 0 || rank >= nranks) throw RequestError("rank out of range");
  // Continue from whatever epoch this rank last published on this pool.
  epoch_ = std::max<std::uint64_t>(1, doorbells_.published_epoch(rank_));
  doorbells_.publish_epoch(rank_, epoch_);
}

void Communicator::record(TraceOp op, const PlanEntry* e, std::uint64_t doorbell) {
  if (!opts_.trace) return;
  TraceEvent ev;
  ev.rank = rank_;
  ev.op = op;
  ev.epoch = epoch_;
  ev.t_ns = now_ns();
  ev.doorbell = doorbell;
  if (e != nullptr) {
    ev.doorbell = e->doorbell_index;
    ev.producer = e->producer;
    ev.segment = e->segment;
    ev.chunk = e->chunk;
  }
  std::lock_guard<std::mutex> lock(trace_mu_);
  trace_.push_back(ev);
}

void Communicator::publish_all(const PlanPair& plan, std::span<const std::byte> send) {
  for (const PlanEntry& e : plan.publish.entries) {
    record(TraceOp::Write, &e);
    pool_.write(e.pool_address, send.subspan(e.buffer_offset, e.length), rank_);
    record(TraceOp::Ring, &e);
    doorbells_.chunk(e.doorbell_index).ring(epoch_);
  }
}

void Communicator::local_copies(const CollectiveRequest& req, std::span<const std::byte> send,
                                std::span<std::byte> recv) {
  if (nranks_ == 1) return;  // everything goes through the pool
  const std::uint64_t seg = segment_bytes(req);
  const std::uint64_t me = static_cast<std::uint64_t>(rank_);
  switch (req.kind) {
    case CollectiveKind::Broadcast:
      if (rank_ == req.root) copy_bytes(recv, 0, send, 0, seg);
      break;
    case CollectiveKind::AllGather:
      copy_bytes(recv, me * seg, send, 0, seg);
      break;
    case CollectiveKind::Gather:
      if (rank_ == req.root) copy_bytes(recv, me * seg, send, 0, seg);
      break;
    case CollectiveKind::Scatter:
      if (rank_ == req.root) copy_bytes(recv, 0, send, me * seg, seg);
      break;
    case CollectiveKind::AllToAll:
      copy_bytes(recv, me * seg, send, me * seg, seg);
      break;
    default:
      break;  // reductions fold the local contribution while retrieving
  }
}

void Communicator::retrieve_all(const CollectiveRequest& req, const PlanPair& plan,
                                std::span<const std::byte> send, std::span<std::byte> recv) {
  const auto& entries = plan.retrieve.entries;
  const std::size_t esz = element_size(req.elem);
  std::vector<std::byte> staging;

  std::size_t i = 0;
  while (i < entries.size()) {
    const PlanEntry& first = entries[i];
    if (!first.reduce) {
      record(TraceOp::WaitBegin, &first);
      doorbells_.chunk(first.doorbell_index).wait(epoch_, opts_.spin);
      record(TraceOp::WaitEnd, &first);
      pool_.read(first.pool_address, recv.subspan(first.buffer_offset, first.length), rank_);
      record(TraceOp::Read, &first);
      ++i;
      continue;
    }

    // A reduction group: consecutive entries landing on the same recv range,
    // one per remote producer. Stage them all, then fold in rank order.
    std::size_t j = i;
    while (j < entries.size() && entries[j].reduce &&
           entries[j].buffer_offset == first.buffer_offset) {
      ++j;
    }
    const std::uint64_t len = first.length;
    staging.resize((j - i) * len);
    std::vector<std::pair<int, std::span<const std::byte>>> parts;
    for (std::size_t k = i; k < j; ++k) {
      const PlanEntry& e = entries[k];
      std::span<std::byte> slot(staging.data() + (k - i) * len, len);
      record(TraceOp::WaitBegin, &e);
      doorbells_.chunk(e.doorbell_index).wait(epoch_, opts_.spin);
      record(TraceOp::WaitEnd, &e);
      pool_.read(e.pool_address, slot, rank_);
      record(TraceOp::Read, &e);
      parts.emplace_back(e.producer, slot);
    }
    const bool have_self = std::any_of(parts.begin(), parts.end(),
                                       [&](const auto& p) { return p.first == rank_; });
    if (!have_self) {
      std::uint64_t own = first.buffer_offset;
      if (req.kind == CollectiveKind::ReduceScatter) own += rank_ * segment_bytes(req);
      parts.emplace_back(rank_, send.subspan(own, len));
    }
    std::sort(parts.begin(), parts.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    std::span<std::byte> acc = recv.subspan(first.buffer_offset, len);
    std::memcpy(acc.data(), parts.front().second.data(), len);
    for (std::size_t k = 1; k < parts.size(); ++k) {
      reduce_into(acc, parts[k].second, req.elem, req.op);
    }
    (void)esz;
    record(TraceOp::Reduce, &first);
    i = j;
  }
}

void Communicator::run(const CollectiveRequest& req, std::span<const std::byte> send,
                       std::span<std::byte> recv) {
  req.validate();
  if (req.rank != rank_ || req.nranks != nranks_) {
    throw RequestError("request rank/nranks do not match the communicator");
  }
  const std::uint64_t want_send = req.send_bytes();
  const std::uint64_t want_recv = req.recv_bytes();
  if (want_send != 0 && send.size() != want_send) {
    throw RequestError("send buffer holds " + std::to_string(send.size()) + " bytes, expected " +
                       std::to_string(want_send));
  }
  if (want_recv != 0 && recv.size() != want_recv) {
    throw RequestError("recv buffer holds " + std::to_string(recv.size()) + " bytes, expected " +
                       std::to_string(want_recv));
  }
  if (overlaps(send, recv)) throw RequestError("in-place collectives are not supported");

  const PlanPair plan = build_plan(req, pool_.config(), opts_.plan);

  std::exception_ptr write_error;
  std::thread writer;
  if (!plan.publish.entries.empty()) {
    writer = std::thread([&] {
      try {
        publish_all(plan, send);
      } catch (...) {
        write_error = std::current_exception();
      }
    });
  }
  // Without overlap the read queue starts only after this rank's writes.
  if (opts_.plan.mode != PlacementMode::All && writer.joinable()) writer.join();

  std::exception_ptr read_error;
  try {
    local_copies(req, send, recv);
    retrieve_all(req, plan, send, recv);
  } catch (...) {
    read_error = std::current_exception();
  }
  if (writer.joinable()) writer.join();
  if (write_error) std::rethrow_exception(write_error);
  if (read_error) std::rethrow_exception(read_error);

  barrier();
}

void Communicator::barrier() {
  doorbells_.barrier(rank_).ring(epoch_);
  for (int r = 0; r < nranks_; ++r) {
    if (r != rank_) doorbells_.barrier(r).wait(epoch_, opts_.spin);
  }
  record(TraceOp::BarrierEnd, nullptr);
  epoch_ = doorbells_.reset_epoch(rank_, nranks_, epoch_);
}

std::vector<TraceEvent> Communicator::trace() const {
  std::lock_guard<std::mutex> lock(trace_mu_);
  return trace_;
}

void Communicator::clear_trace() {
  std::lock_guard<std::mutex> lock(trace_mu_);
  trace_.clear();
}

std::string Communicator::trace_json_lines() const {
  std::ostringstream os;
  for (const TraceEvent& ev : trace()) {
    nlohmann::json j = {{"rank", ev.rank},         {"op", to_string(ev.op)},
                        {"doorbell", ev.doorbell}, {"producer", ev.producer},
                        {"segment", ev.segment},   {"chunk", ev.chunk},
                        {"epoch", ev.epoch},       {"t_ns", ev.t_ns}};
    os << j.dump() << '\n';
  }
  return os.str();
}

std::vector<std::byte> expected_recv(const CollectiveRequest& req,
                                     std::span<const std::vector<std::byte>> sends) {
  const std::size_t esz = element_size(req.elem);
  const std::uint64_t n = req.count;
  const int p = req.nranks;
  const std::uint64_t part = (req.kind == CollectiveKind::ReduceScatter ||
                              req.kind == CollectiveKind::AllToAll)
                                 ? n / p
                                 : n;
  std::vector<std::byte> out(req.recv_bytes());
  auto elems = [&](int r, std::uint64_t first, std::uint64_t count) {
    return std::span<const std::byte>(sends[r].data() + first * esz, count * esz);
  };
  auto fold_all = [&](std::uint64_t first, std::uint64_t count) {
    std::span<std::byte> acc(out.data(), count * esz);
    std::memcpy(acc.data(), elems(0, first, count).data(), acc.size());
    for (int r = 1; r < p; ++r) reduce_into(acc, elems(r, first, count), req.elem, req.op);
  };

  switch (req.kind) {
    case CollectiveKind::AllReduce:
      fold_all(0, n);
      break;
    case CollectiveKind::Reduce:
      if (req.rank == req.root) fold_all(0, n);
      break;
    case CollectiveKind::ReduceScatter:
      fold_all(static_cast<std::uint64_t>(req.rank) * part, part);
      break;
    case CollectiveKind::Broadcast:
      std::memcpy(out.data(), elems(req.root, 0, n).data(), n * esz);
      break;
    case CollectiveKind::AllGather:
      for (int r = 0; r < p; ++r) std::memcpy(out.data() + r * n * esz, elems(r, 0, n).data(), n * esz);
      break;
    case CollectiveKind::Gather:
      if (req.rank == req.root) {
        for (int r = 0; r < p; ++r)
          std::memcpy(out.data() + r * n * esz, elems(r, 0, n).data(), n * esz);
      }
      break;
    case CollectiveKind::Scatter:
      std::memcpy(out.data(), elems(req.root, req.rank * n, n).data(), n * esz);
      break;
    case CollectiveKind::AllToAll:
      for (int r = 0; r < p; ++r) {
        std::memcpy(out.data() + r * part * esz, elems(r, req.rank * part, part).data(),
                    part * esz);
      }
      break;
  }
  return out;
}

VerifyResult verify_rank(const CollectiveRequest& req,
                         std::span<const std::vector<std::byte>> sends,
                         std::span<const std::byte> recv, int max_ulps) {
  VerifyResult res;
  res.rank = req.rank;
  const std::vector<std::byte> want = expected_recv(req, sends);
  if (recv.size() < want.size()) {
    res.ok = false;
    res.message = "recv buffer too small";
    return res;
  }
  std::uint64_t bad = 0;
  bool ok = true;
  switch (req.elem) {
    case ElemType::I32: ok = compare_typed<std::int32_t>(recv, want, max_ulps, bad); break;
    case ElemType::I64: ok = compare_typed<std::int64_t>(recv, want, max_ulps, bad); break;
    case ElemType::F32: ok = compare_typed<float>(recv, want, max_ulps, bad); break;
    case ElemType::F64: ok = compare_typed<double>(recv, want, max_ulps, bad); break;
  }
  if (!ok) {
    res.ok = false;
    res.index = bad;
    res.message = std::string(to_string(req.kind)) + ": rank " + std::to_string(req.rank) +
                  " mismatch at element " + std::to_string(bad);
  }
  return res;
}

VerifyResult verify(const CollectiveRequest& req, std::span<const RankBuffers> bufs,
                    int max_ulps) {
  if (bufs.size() != static_cast<std::size_t>(req.nranks)) {
    return VerifyResult{false, -1, 0, "expected one buffer set per rank"};
  }
  std::vector<std::vector<std::byte>> sends;
  sends.reserve(bufs.size());
  for (int r = 0; r < req.nranks; ++r) {
    std::vector<std::byte> s = bufs[r].send;
    // Ranks that contribute nothing may hold empty send buffers.
    s.resize(std::max<std::uint64_t>(s.size(), req.for_rank(r).send_bytes()));
    sends.push_back(std::move(s));
  }
  // Rooted kinds read only the root's buffer; pad so the oracle can index it.
  for (auto& s : sends) {
    s.resize(std::max<std::uint64_t>(s.size(), req.for_rank(req.root).send_bytes()));
  }
  for (int r = 0; r < req.nranks; ++r) {
    VerifyResult one = verify_rank(req.for_rank(r), sends, bufs[r].recv, max_ulps);
    if (!one.ok) return one;
  }
  return {};
}

}  // namespace poolcomm
