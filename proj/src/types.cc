#include "poolcomm/types.h"

#include <algorithm>
#include <cctype>
#include <string>

namespace poolcomm {

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  return out;
}

std::string doorbell_timeout_message(std::uint64_t index, std::uint32_t device,
                                     std::uint64_t block) {
  return "doorbell wait timed out (index " + std::to_string(index) + ", device " +
         std::to_string(device) + ", block " + std::to_string(block) + ")";
}

}  // namespace

DoorbellTimeout::DoorbellTimeout(std::uint64_t index, std::uint32_t device,
                                 std::uint64_t block)
    : Error(doorbell_timeout_message(index, device, block)),
      index_(index),
      device_(device),
      block_(block) {}

std::size_t element_size(ElemType t) {
  switch (t) {
    case ElemType::I32:
    case ElemType::F32:
      return 4;
    case ElemType::I64:
    case ElemType::F64:
      return 8;
  }
  return 0;
}

bool is_reduction(CollectiveKind k) {
  return k == CollectiveKind::AllReduce || k == CollectiveKind::Reduce ||
         k == CollectiveKind::ReduceScatter;
}

bool is_rooted(CollectiveKind k) {
  return k == CollectiveKind::Broadcast || k == CollectiveKind::Reduce ||
         k == CollectiveKind::Gather || k == CollectiveKind::Scatter;
}

std::string_view to_string(CollectiveKind k) {
  switch (k) {
    case CollectiveKind::AllReduce: return "allreduce";
    case CollectiveKind::Broadcast: return "broadcast";
    case CollectiveKind::Reduce: return "reduce";
    case CollectiveKind::AllGather: return "allgather";
    case CollectiveKind::ReduceScatter: return "reducescatter";
    case CollectiveKind::Gather: return "gather";
    case CollectiveKind::Scatter: return "scatter";
    case CollectiveKind::AllToAll: return "alltoall";
  }
  return "?";
}

std::string_view to_string(ElemType t) {
  switch (t) {
    case ElemType::I32: return "i32";
    case ElemType::I64: return "i64";
    case ElemType::F32: return "f32";
    case ElemType::F64: return "f64";
  }
  return "?";
}

std::string_view to_string(ReduceOp op) {
  switch (op) {
    case ReduceOp::Sum: return "sum";
    case ReduceOp::Max: return "max";
    case ReduceOp::Min: return "min";
  }
  return "?";
}

CollectiveKind parse_kind(std::string_view name) {
  const std::string n = lower(name);
  for (CollectiveKind k : kAllKinds) {
    if (to_string(k) == n) return k;
  }
  throw RequestError("unknown collective kind '" + std::string(name) + "'");
}

ElemType parse_elem(std::string_view name) {
  const std::string n = lower(name);
  for (ElemType t : {ElemType::I32, ElemType::I64, ElemType::F32, ElemType::F64}) {
    if (to_string(t) == n) return t;
  }
  throw RequestError("unknown element type '" + std::string(name) + "'");
}

ReduceOp parse_op(std::string_view name) {
  const std::string n = lower(name);
  for (ReduceOp op : {ReduceOp::Sum, ReduceOp::Max, ReduceOp::Min}) {
    if (to_string(op) == n) return op;
  }
  throw RequestError("unknown reduction op '" + std::string(name) + "'");
}

void CollectiveRequest::validate() const {
  if (nranks < 1) throw RequestError("nranks must be >= 1");
  if (rank < 0 || rank >= nranks) throw RequestError("rank out of range");
  if (root < 0 || root >= nranks) throw RequestError("root out of range");
  if (count == 0) throw RequestError("count must be >= 1");
  if (chunk_count < 1) throw RequestError("chunk_count must be >= 1");
  if ((kind == CollectiveKind::ReduceScatter || kind == CollectiveKind::AllToAll) &&
      count % static_cast<std::uint64_t>(nranks) != 0) {
    throw RequestError(std::string(to_string(kind)) + ": count " + std::to_string(count) +
                       " not divisible by nranks " + std::to_string(nranks));
  }
}

CollectiveRequest CollectiveRequest::for_rank(int r) const {
  CollectiveRequest out = *this;
  out.rank = r;
  return out;
}

std::uint64_t CollectiveRequest::send_count() const {
  const auto p = static_cast<std::uint64_t>(nranks);
  switch (kind) {
    case CollectiveKind::Broadcast:
      return rank == root ? count : 0;
    case CollectiveKind::Scatter:
      return rank == root ? count * p : 0;
    default:
      return count;
  }
}

std::uint64_t CollectiveRequest::recv_count() const {
  const auto p = static_cast<std::uint64_t>(nranks);
  switch (kind) {
    case CollectiveKind::Reduce:
      return rank == root ? count : 0;
    case CollectiveKind::AllGather:
      return count * p;
    case CollectiveKind::ReduceScatter:
      return count / p;
    case CollectiveKind::Gather:
      return rank == root ? count * p : 0;
    default:
      return count;
  }
}

}  // namespace poolcomm
