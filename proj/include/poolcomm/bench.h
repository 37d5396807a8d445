#pragma once

#include <chrono>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "poolcomm/collectives.h"
#include "poolcomm/emulator.h"
#include "poolcomm/placement.h"
#include "poolcomm/pool.h"
#include "poolcomm/types.h"

namespace poolcomm {

class BenchError : public Error {
 public:
  using Error::Error;
};

enum class BenchBackend {
  SharedArena,  // one process, one thread per rank
  FileMapped,   // one forked process per rank sharing a mapped file
  Emulator,     // timing model only, no data
};

std::string_view to_string(BenchBackend b);
BenchBackend parse_bench_backend(std::string_view name);

struct BenchConfig {
  std::vector<CollectiveKind> kinds{CollectiveKind::AllReduce};
  // Per-rank message size N * element size. When `sizes` is non-empty it
  // replaces the min/max/step sweep.
  std::uint64_t min_bytes = 1ull << 20;
  std::uint64_t max_bytes = 1ull << 20;
  double step_factor = 2;
  std::vector<std::uint64_t> sizes;
  int nranks = 2;
  std::uint32_t num_devices = 6;
  int chunk_count = 1;
  BenchBackend backend = BenchBackend::SharedArena;
  PlacementMode placement = PlacementMode::All;
  ElemType elem = ElemType::I32;
  ReduceOp op = ReduceOp::Sum;
  int root = 0;
  int iters = 5;
  int warmup = 1;
  std::uint64_t seed = 1;
  std::string output;
  // FileMapped pool file; a temporary file is used and removed when empty.
  std::string pool_file;
  // 0 sizes the pool from the largest plan of the sweep.
  std::uint64_t device_capacity = 0;
  std::uint64_t doorbell_region_size = 1ull << 20;
  std::chrono::milliseconds timeout{5000};
  BandwidthModel model = BandwidthModel::defaults();
  // When set, every plan of the sweep is appended here as JSON lines.
  std::string dump_plan;

  // Throws BenchError.
  void validate() const;
  std::vector<std::uint64_t> message_sizes() const;
};

struct BenchRow {
  CollectiveKind kind = CollectiveKind::AllReduce;
  std::string backend;
  PlacementMode placement = PlacementMode::All;
  int nranks = 0;
  std::uint32_t num_devices = 0;
  std::uint64_t msg_bytes = 0;
  int chunks = 0;
  int iters = 0;
  double median_s = 0;
  double p95_s = 0;
  std::string verified;  // "yes", or "n/a" for the emulator
};

struct BenchReport {
  std::vector<BenchRow> rows;       // only points that passed verification
  std::vector<std::string> failures;
  bool ok() const { return failures.empty(); }
};

/// Request for one sweep point: count = msg_bytes / element size, rounded
/// down to a multiple of nranks where the primitive needs it (at least one
/// element per rank).
CollectiveRequest bench_request(const BenchConfig& cfg, CollectiveKind kind,
                                std::uint64_t msg_bytes);

/// Deterministic payload for (seed, rank): element i depends only on
/// (seed, rank, i). Float values are small dyadic numbers so sums stay
/// exact.
void fill_payload(std::span<std::byte> out, ElemType elem, std::uint64_t seed, int rank);

/// Runs every (kind, size) point: warmup calls, then timed calls, with
/// verify() against the oracle on the final call. Failing points are
/// reported in `failures` and produce no row.
BenchReport run_sweep(const BenchConfig& cfg);

/// Nearest-rank percentile of the samples, q in (0, 1].
double percentile(std::vector<double> samples, double q);
double median(std::vector<double> samples);

/// Header: kind,backend,placement,nranks,nd,msg_bytes,chunks,iters,median_s,p95_s,verified
std::string bench_csv(const std::vector<BenchRow>& rows);
std::vector<BenchRow> parse_bench_csv(const std::string& text);
/// Human-readable table with algorithm bandwidth per row.
std::string bench_summary(const std::vector<BenchRow>& rows);

struct CompareRow {
  CollectiveKind kind = CollectiveKind::AllReduce;
  int nranks = 0;
  std::uint64_t msg_bytes = 0;
  double a_median_s = 0;
  double b_median_s = 0;
  double speedup = 0;  // b / a: above 1 means `a` is faster
};

/// Pairs rows on (kind, nranks, msg_bytes). Throws BenchError when either
/// report has a row the other lacks.
std::vector<CompareRow> compare(const std::vector<BenchRow>& a, const std::vector<BenchRow>& b);
std::string compare_table(const std::vector<CompareRow>& rows);

}  // namespace poolcomm
