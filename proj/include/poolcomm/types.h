#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace poolcomm {

// Errors. Everything thrown by the library derives from Error.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class PoolError : public Error {
 public:
  using Error::Error;
};

class GeometryError : public Error {
 public:
  using Error::Error;
};

class RequestError : public Error {
 public:
  using Error::Error;
};

class EpochMismatch : public Error {
 public:
  using Error::Error;
};

class DoorbellTimeout : public Error {
 public:
  DoorbellTimeout(std::uint64_t index, std::uint32_t device, std::uint64_t block);

  std::uint64_t index() const { return index_; }
  std::uint32_t device() const { return device_; }
  std::uint64_t block() const { return block_; }

 private:
  std::uint64_t index_;
  std::uint32_t device_;
  std::uint64_t block_;
};

class SimError : public Error {
 public:
  using Error::Error;
};

enum class CollectiveKind {
  AllReduce,
  Broadcast,
  Reduce,
  AllGather,
  ReduceScatter,
  Gather,
  Scatter,
  AllToAll,
};

inline constexpr CollectiveKind kAllKinds[] = {
    CollectiveKind::AllReduce,     CollectiveKind::Broadcast,
    CollectiveKind::Reduce,        CollectiveKind::AllGather,
    CollectiveKind::ReduceScatter, CollectiveKind::Gather,
    CollectiveKind::Scatter,       CollectiveKind::AllToAll,
};

enum class ElemType { I32, I64, F32, F64 };
enum class ReduceOp { Sum, Max, Min };

std::size_t element_size(ElemType t);
bool is_reduction(CollectiveKind k);
bool is_rooted(CollectiveKind k);

std::string_view to_string(CollectiveKind k);
std::string_view to_string(ElemType t);
std::string_view to_string(ReduceOp op);

// Case-insensitive; throws RequestError on unknown names.
CollectiveKind parse_kind(std::string_view name);
ElemType parse_elem(std::string_view name);
ReduceOp parse_op(std::string_view name);

/// One collective call as seen by one rank. `count` is N in the usual
/// per-primitive size conventions (AllGather receives count * nranks, etc).
struct CollectiveRequest {
  CollectiveKind kind = CollectiveKind::AllReduce;
  int rank = 0;
  int nranks = 1;
  int root = 0;
  std::uint64_t count = 0;
  ElemType elem = ElemType::I32;
  ReduceOp op = ReduceOp::Sum;
  int chunk_count = 1;

  // Throws RequestError when the request is malformed.
  void validate() const;

  // Same request, other rank.
  CollectiveRequest for_rank(int r) const;

  std::uint64_t send_count() const;
  std::uint64_t recv_count() const;
  std::uint64_t send_bytes() const { return send_count() * element_size(elem); }
  std::uint64_t recv_bytes() const { return recv_count() * element_size(elem); }
};

}  // namespace poolcomm
