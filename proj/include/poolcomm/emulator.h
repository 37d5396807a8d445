#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "poolcomm/placement.h"
#include "poolcomm/pool.h"
#include "poolcomm/types.h"

namespace poolcomm {

/// Device bandwidth as a function of transfer size, plus fixed costs.
struct BandwidthModel {
  // (transfer bytes, bytes/s), ascending in size. Between points the
  // bandwidth is interpolated linearly in log(size); outside the table it is
  // clamped to the nearest point. Every value is capped at `peak`.
  std::vector<std::pair<std::uint64_t, double>> curve;
  double peak = 20e9;
  double device_latency = 658e-9;  // seconds added before every transfer
  // Per-rank, per-direction host link cap shared by that rank's concurrent
  // transfers in one direction; 0 means `peak`.
  double rank_bandwidth = 0;
  // Seconds per byte of reduction work after each reducing retrieve.
  double compute_per_byte = 0;

  static BandwidthModel defaults();

  double bandwidth(std::uint64_t bytes) const;
  double rank_cap() const { return rank_bandwidth > 0 ? rank_bandwidth : peak; }
  // Throws SimError on empty/zero/decreasing curves.
  void validate() const;
};

struct SimTransfer {
  int rank = 0;
  Direction dir = Direction::Write;
  std::uint32_t device = 0;
  std::uint64_t bytes = 0;
  // Transfers that must finish (including their compute_after) first.
  std::vector<std::size_t> deps;
  // Busy time on the issuing rank after the transfer lands (reductions).
  double compute_after = 0;
  // Free-form labels carried into the report.
  std::int64_t doorbell = -1;
  int chunk = -1;
};

enum class SimEventKind { Start, End };

struct SimEvent {
  double t = 0;
  SimEventKind kind = SimEventKind::Start;
  std::size_t transfer = 0;
  int rank = 0;
  std::uint32_t device = 0;
  Direction dir = Direction::Write;
  // Active transfers on the device right after the event.
  int active_on_device = 0;
};

struct SimReport {
  std::vector<double> rank_completion;
  double latency = 0;  // max over ranks
  std::vector<double> start;   // per transfer, first byte moves
  std::vector<double> finish;  // per transfer, last byte lands
  std::vector<std::uint64_t> device_bytes;
  std::vector<double> device_integrated_bytes;  // integral of rates
  std::vector<double> device_busy;
  std::vector<double> device_utilization;  // busy / latency
  std::vector<SimEvent> events;
};

/// Event-driven processor-sharing simulation. A transfer becomes eligible
/// when its dependencies complete, starts device_latency later, and then
/// moves at min(bandwidth(bytes) / k_device, rank_cap / k_rank_direction),
/// where the k's count concurrently active transfers; rates are recomputed at
/// every start and end. Throws SimError on cyclic dependencies or an invalid
/// model.
SimReport simulate_transfers(const std::vector<SimTransfer>& transfers,
                             const BandwidthModel& model, std::uint32_t num_devices);

/// Transfers for one collective: every rank's write queue and read queue run
/// in plan order, each retrieve waits for the publish it reads, and without
/// overlap (Aggregate, Naive) a rank's reads start after its own writes.
std::vector<SimTransfer> transfers_from_plans(const std::vector<PlanPair>& plans,
                                              const BandwidthModel& model,
                                              PlacementMode mode = PlacementMode::All);

SimReport simulate(const CollectiveRequest& req, const PoolConfig& cfg,
                   const BandwidthModel& model, const PlanOptions& opts = {});

/// Transfers from a Recording-backend access log. Per rank, writes and reads
/// each form a queue in log order; a read waits for the latest earlier write
/// covering its first byte.
std::vector<SimTransfer> transfers_from_log(const std::vector<AccessRecord>& log,
                                            const PoolConfig& cfg, bool overlap = true);

// --- Scenarios ----------------------------------------------------------------

struct Scenario {
  std::string name;
  CollectiveKind kind = CollectiveKind::AllReduce;
  std::vector<int> nranks;
  std::vector<std::uint64_t> msg_bytes;  // per-rank N * element size
  std::vector<int> chunks;
  int baseline_ranks = 3;
  int root = 0;
  PlacementMode placement = PlacementMode::All;
  std::uint32_t num_devices = 6;
  std::uint64_t device_capacity = 128ull << 30;
  std::uint64_t doorbell_region_size = 1ull << 20;
  BandwidthModel model = BandwidthModel::defaults();
};

/// Parses a scenario JSON document. Unknown keys are rejected.
Scenario parse_scenario(const std::string& json_text);
Scenario load_scenario(const std::string& path);

struct ScenarioRow {
  CollectiveKind kind = CollectiveKind::AllReduce;
  int nranks = 0;
  std::uint64_t msg_bytes = 0;
  int chunks = 0;
  double latency_s = 0;
  double ratio_vs_3 = 0;  // latency / baseline latency at the same size and chunks
};

/// Simulates every (nranks, msg, chunks) point of the scenario.
std::vector<ScenarioRow> run_scenario(const Scenario& s);

/// Scaling sweep: nranks {3, 6, 12} over the given sizes on `nd` devices.
std::vector<ScenarioRow> scale_scenario(CollectiveKind kind, const std::vector<std::uint64_t>& msgs,
                                        const BandwidthModel& model, int chunks = 8,
                                        std::uint32_t nd = 6);

/// Latency against chunk count for AllGather at fixed nranks.
std::vector<ScenarioRow> chunk_sensitivity(const std::vector<std::uint64_t>& msgs,
                                           const std::vector<int>& chunk_counts,
                                           const BandwidthModel& model, int nranks = 3,
                                           std::uint32_t nd = 6);

/// Header: kind,nranks,msg_bytes,chunks,latency_s,ratio_vs_3
std::string scenario_csv(const std::vector<ScenarioRow>& rows);

}  // namespace poolcomm
