#pragma once

#include <cstddef>
#include <cstdint>
#include <mutex>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "poolcomm/doorbell.h"
#include "poolcomm/placement.h"
#include "poolcomm/pool.h"
#include "poolcomm/types.h"

namespace poolcomm {

template <typename T>
constexpr ElemType elem_type_of() {
  if constexpr (std::is_same_v<T, std::int32_t>) {
    return ElemType::I32;
  } else if constexpr (std::is_same_v<T, std::int64_t>) {
    return ElemType::I64;
  } else if constexpr (std::is_same_v<T, float>) {
    return ElemType::F32;
  } else {
    static_assert(std::is_same_v<T, double>, "unsupported element type");
    return ElemType::F64;
  }
}

struct RankBuffers {
  std::vector<std::byte> send;
  std::vector<std::byte> recv;
};

enum class TraceOp { Write, Ring, WaitBegin, WaitEnd, Read, Reduce, BarrierEnd };
std::string_view to_string(TraceOp op);

struct TraceEvent {
  int rank = 0;
  TraceOp op = TraceOp::Write;
  std::uint64_t doorbell = 0;
  int producer = -1;
  int segment = -1;
  int chunk = -1;
  std::uint64_t epoch = 0;
  std::int64_t t_ns = 0;
};

struct CommOptions {
  SpinPolicy spin = default_spin_policy();
  PlanOptions plan;
  bool trace = false;
};

/// One rank's endpoint on a shared pool. Every cross-rank byte goes through
/// the pool and is ordered by chunk doorbells; each call ends with a
/// completion barrier and an epoch advance, so consecutive calls reuse the
/// same pool addresses and doorbell slots.
///
/// Each call runs two queues: publishes on a write thread, retrieves (and
/// reductions) on the calling thread. Not reentrant.
class Communicator {
 public:
  Communicator(PoolHandle pool, int rank, int nranks, CommOptions opts = {});

  int rank() const { return rank_; }
  int nranks() const { return nranks_; }
  std::uint64_t epoch() const { return epoch_; }
  const PoolHandle& pool() const { return pool_; }

  /// Runs one collective. `req.rank` and `req.nranks` must match this
  /// communicator. Buffer byte sizes must equal req.send_bytes() and
  /// req.recv_bytes() wherever those are non-zero; send and recv must not
  /// overlap. Floating-point reductions fold contributions in ascending rank
  /// order.
  void run(const CollectiveRequest& req, std::span<const std::byte> send,
           std::span<std::byte> recv);

  /// Completion barrier across all ranks, then epoch advance.
  void barrier();

  template <typename T>
  void all_reduce(std::span<const T> send, std::span<T> recv, ReduceOp op, int chunks = 1) {
    typed(CollectiveKind::AllReduce, send, recv, send.size(), 0, op, chunks);
  }
  template <typename T>
  void broadcast(std::span<const T> send, std::span<T> recv, int root, int chunks = 1) {
    typed(CollectiveKind::Broadcast, send, recv, recv.size(), root, ReduceOp::Sum, chunks);
  }
  template <typename T>
  void reduce(std::span<const T> send, std::span<T> recv, ReduceOp op, int root, int chunks = 1) {
    typed(CollectiveKind::Reduce, send, recv, send.size(), root, op, chunks);
  }
  template <typename T>
  void all_gather(std::span<const T> send, std::span<T> recv, int chunks = 1) {
    typed(CollectiveKind::AllGather, send, recv, send.size(), 0, ReduceOp::Sum, chunks);
  }
  template <typename T>
  void reduce_scatter(std::span<const T> send, std::span<T> recv, ReduceOp op, int chunks = 1) {
    typed(CollectiveKind::ReduceScatter, send, recv, send.size(), 0, op, chunks);
  }
  template <typename T>
  void gather(std::span<const T> send, std::span<T> recv, int root, int chunks = 1) {
    typed(CollectiveKind::Gather, send, recv, send.size(), root, ReduceOp::Sum, chunks);
  }
  template <typename T>
  void scatter(std::span<const T> send, std::span<T> recv, int root, int chunks = 1) {
    typed(CollectiveKind::Scatter, send, recv, recv.size(), root, ReduceOp::Sum, chunks);
  }
  template <typename T>
  void all_to_all(std::span<const T> send, std::span<T> recv, int chunks = 1) {
    typed(CollectiveKind::AllToAll, send, recv, send.size(), 0, ReduceOp::Sum, chunks);
  }

  std::vector<TraceEvent> trace() const;
  void clear_trace();
  std::string trace_json_lines() const;

 private:
  template <typename T>
  void typed(CollectiveKind kind, std::span<const T> send, std::span<T> recv,
             std::uint64_t count, int root, ReduceOp op, int chunks) {
    CollectiveRequest req;
    req.kind = kind;
    req.rank = rank_;
    req.nranks = nranks_;
    req.root = root;
    req.count = count;
    req.elem = elem_type_of<T>();
    req.op = op;
    req.chunk_count = chunks;
    run(req, std::as_bytes(send), std::as_writable_bytes(recv));
  }

  void publish_all(const PlanPair& plan, std::span<const std::byte> send);
  void retrieve_all(const CollectiveRequest& req, const PlanPair& plan,
                    std::span<const std::byte> send, std::span<std::byte> recv);
  void local_copies(const CollectiveRequest& req, std::span<const std::byte> send,
                    std::span<std::byte> recv);
  void record(TraceOp op, const PlanEntry* e, std::uint64_t doorbell = 0);

  PoolHandle pool_;
  DoorbellRegion doorbells_;
  int rank_;
  int nranks_;
  CommOptions opts_;
  std::uint64_t epoch_ = 1;

  mutable std::mutex trace_mu_;
  std::vector<TraceEvent> trace_;
};

/// Elementwise fold of `src` into `acc`. Integer sums wrap.
void reduce_into(std::span<std::byte> acc, std::span<const std::byte> src, ElemType elem,
                 ReduceOp op);

/// Direct-definition result for `req.rank`, computed from every rank's send
/// buffer with no pool and no chunking. Reductions fold in ascending rank
/// order.
std::vector<std::byte> expected_recv(const CollectiveRequest& req,
                                     std::span<const std::vector<std::byte>> sends);

struct VerifyResult {
  bool ok = true;
  int rank = -1;
  std::uint64_t index = 0;  // first mismatching element
  std::string message;
};

/// Checks one rank's recv buffer against expected_recv(). Integers must match
/// exactly; floats within `max_ulps`.
VerifyResult verify_rank(const CollectiveRequest& req,
                         std::span<const std::vector<std::byte>> sends,
                         std::span<const std::byte> recv, int max_ulps = 0);

/// Checks every rank. `bufs` is indexed by rank; `req.rank` is ignored.
VerifyResult verify(const CollectiveRequest& req, std::span<const RankBuffers> bufs,
                    int max_ulps = 0);

}  // namespace poolcomm
