#include "poolcomm/emulator.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <queue>
#include <sstream>

#include <json.hpp>

namespace poolcomm {

namespace {

// Remaining bytes below this count as done; guards float drift.
constexpr double kByteEpsilon = 1e-6;

}  // namespace

BandwidthModel BandwidthModel::defaults() {
  BandwidthModel m;
  m.curve = {
      {4ull << 10, 1.5e9},
      {64ull << 10, 8e9},
      {256ull << 10, 14e9},
      {1ull << 20, 20e9},
  };
  return m;
}

double BandwidthModel::bandwidth(std::uint64_t bytes) const {
  if (curve.empty()) return peak;
  double bw;
  if (bytes <= curve.front().first) {
    bw = curve.front().second;
  } else if (bytes >= curve.back().first) {
    bw = curve.back().second;
  } else {
    auto hi = std::upper_bound(curve.begin(), curve.end(), bytes,
                               [](std::uint64_t b, const auto& p) { return b < p.first; });
    auto lo = hi - 1;
    const double x = std::log(static_cast<double>(bytes));
    const double x0 = std::log(static_cast<double>(lo->first));
    const double x1 = std::log(static_cast<double>(hi->first));
    const double f = (x - x0) / (x1 - x0);
    bw = lo->second + f * (hi->second - lo->second);
  }
  return std::min(bw, peak);
}

void BandwidthModel::validate() const {
  if (!(peak > 0)) throw SimError("bandwidth model has zero peak bandwidth");
  if (rank_bandwidth < 0) throw SimError("negative rank bandwidth");
  if (device_latency < 0 || compute_per_byte < 0) throw SimError("negative time constant");
  for (std::size_t i = 0; i < curve.size(); ++i) {
    if (!(curve[i].second > 0)) throw SimError("bandwidth curve has a non-positive point");
    if (i > 0 && (curve[i].first <= curve[i - 1].first || curve[i].second < curve[i - 1].second)) {
      throw SimError("bandwidth curve must be strictly ascending in size and non-decreasing");
    }
  }
}

SimReport simulate_transfers(const std::vector<SimTransfer>& transfers,
                             const BandwidthModel& model, std::uint32_t num_devices) {
  model.validate();
  const std::size_t n = transfers.size();
  int max_rank = -1;
  std::vector<std::vector<std::size_t>> dependents(n);
  std::vector<std::size_t> waiting(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const SimTransfer& t = transfers[i];
    if (t.device >= num_devices) throw SimError("transfer on unknown device");
    if (t.rank < 0) throw SimError("transfer without a rank");
    max_rank = std::max(max_rank, t.rank);
    for (std::size_t d : t.deps) {
      if (d >= n) throw SimError("dependency on unknown transfer");
      dependents[d].push_back(i);
    }
    waiting[i] = t.deps.size();
  }

  // Kahn's algorithm up front so cycles fail fast instead of stalling.
  {
    std::vector<std::size_t> indeg = waiting;
    std::vector<std::size_t> stack;
    for (std::size_t i = 0; i < n; ++i)
      if (indeg[i] == 0) stack.push_back(i);
    std::size_t seen = 0;
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      ++seen;
      for (std::size_t j : dependents[i])
        if (--indeg[j] == 0) stack.push_back(j);
    }
    if (seen != n) throw SimError("cyclic transfer dependencies");
  }

  SimReport rep;
  const int nranks = max_rank + 1;
  rep.rank_completion.assign(nranks, 0.0);
  rep.start.assign(n, 0.0);
  rep.finish.assign(n, 0.0);
  rep.device_bytes.assign(num_devices, 0);
  rep.device_integrated_bytes.assign(num_devices, 0.0);
  rep.device_busy.assign(num_devices, 0.0);
  rep.device_utilization.assign(num_devices, 0.0);

  std::vector<double> eligible(n, 0.0);
  std::vector<double> remaining(n, 0.0);
  std::vector<double> device_bw(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    remaining[i] = static_cast<double>(transfers[i].bytes);
    device_bw[i] = model.bandwidth(transfers[i].bytes);
    rep.device_bytes[transfers[i].device] += transfers[i].bytes;
  }

  using Pending = std::pair<double, std::size_t>;
  std::priority_queue<Pending, std::vector<Pending>, std::greater<>> pending;
  auto release = [&](std::size_t i) {
    pending.emplace(eligible[i] + model.device_latency, i);
  };
  for (std::size_t i = 0; i < n; ++i)
    if (waiting[i] == 0) release(i);

  std::vector<std::size_t> active;
  std::vector<int> dev_active(num_devices, 0);
  std::vector<int> rank_dir_active(static_cast<std::size_t>(nranks) * 2, 0);
  auto rank_dir = [&](std::size_t i) {
    return static_cast<std::size_t>(transfers[i].rank) * 2 +
           (transfers[i].dir == Direction::Read ? 1 : 0);
  };
  std::vector<double> rate(n, 0.0);
  const double rank_cap = model.rank_cap();

  double now = 0;
  std::size_t done = 0;
  auto emit = [&](SimEventKind kind, std::size_t i) {
    rep.events.push_back(SimEvent{now, kind, i, transfers[i].rank, transfers[i].device,
                                  transfers[i].dir, dev_active[transfers[i].device]});
  };
  auto complete = [&](std::size_t i) {
    rep.finish[i] = now;
    ++done;
    const double ready = now + transfers[i].compute_after;
    double& rc = rep.rank_completion[transfers[i].rank];
    rc = std::max(rc, ready);
    for (std::size_t j : dependents[i]) {
      eligible[j] = std::max(eligible[j], ready);
      if (--waiting[j] == 0) release(j);
    }
  };

  while (done < n) {
    // Start everything due now. Zero-byte transfers complete on the spot.
    while (!pending.empty() && pending.top().first <= now) {
      const std::size_t i = pending.top().second;
      pending.pop();
      rep.start[i] = now;
      if (transfers[i].bytes == 0) {
        emit(SimEventKind::Start, i);
        complete(i);
        emit(SimEventKind::End, i);
        continue;
      }
      active.push_back(i);
      ++dev_active[transfers[i].device];
      ++rank_dir_active[rank_dir(i)];
      emit(SimEventKind::Start, i);
    }
    if (done == n) break;

    if (active.empty()) {
      if (pending.empty()) throw SimError("simulation stalled with unfinished transfers");
      now = pending.top().first;
      continue;
    }

    double next = std::numeric_limits<double>::infinity();
    for (std::size_t i : active) {
      rate[i] = std::min(device_bw[i] / dev_active[transfers[i].device],
                         rank_cap / rank_dir_active[rank_dir(i)]);
      next = std::min(next, now + remaining[i] / rate[i]);
    }
    if (!pending.empty()) next = std::min(next, pending.top().first);

    const double dt = next - now;
    std::vector<bool> busy(num_devices, false);
    for (std::size_t i : active) {
      const double moved = std::min(remaining[i], rate[i] * dt);
      remaining[i] -= moved;
      rep.device_integrated_bytes[transfers[i].device] += moved;
      busy[transfers[i].device] = true;
    }
    for (std::uint32_t d = 0; d < num_devices; ++d)
      if (busy[d]) rep.device_busy[d] += dt;
    now = next;

    std::vector<std::size_t> still;
    std::vector<std::size_t> finished;
    for (std::size_t i : active) {
      if (remaining[i] <= kByteEpsilon + 1e-12 * static_cast<double>(transfers[i].bytes)) {
        finished.push_back(i);
      } else {
        still.push_back(i);
      }
    }
    active.swap(still);
    for (std::size_t i : finished) {
      rep.device_integrated_bytes[transfers[i].device] += remaining[i];
      remaining[i] = 0;
      --dev_active[transfers[i].device];
      --rank_dir_active[rank_dir(i)];
    }
    for (std::size_t i : finished) {
      complete(i);
      emit(SimEventKind::End, i);
    }
  }

  rep.latency = 0;
  for (double c : rep.rank_completion) rep.latency = std::max(rep.latency, c);
  for (std::uint32_t d = 0; d < num_devices; ++d) {
    rep.device_utilization[d] = rep.latency > 0 ? rep.device_busy[d] / rep.latency : 0.0;
  }
  return rep;
}

std::vector<SimTransfer> transfers_from_plans(const std::vector<PlanPair>& plans,
                                              const BandwidthModel& model, PlacementMode mode) {
  std::vector<SimTransfer> out;
  // doorbell -> publishing transfer
  std::map<std::uint64_t, std::size_t> publisher;
  std::vector<std::size_t> last_write(plans.size(), SIZE_MAX);
  for (std::size_t r = 0; r < plans.size(); ++r) {
    std::size_t prev = SIZE_MAX;
    for (const PlanEntry& e : plans[r].publish.entries) {
      SimTransfer t;
      t.rank = static_cast<int>(r);
      t.dir = Direction::Write;
      t.device = e.device_index;
      t.bytes = e.length;
      t.doorbell = static_cast<std::int64_t>(e.doorbell_index);
      t.chunk = e.chunk;
      if (prev != SIZE_MAX) t.deps.push_back(prev);
      prev = out.size();
      publisher[e.doorbell_index] = out.size();
      out.push_back(std::move(t));
    }
    last_write[r] = prev;
  }
  for (std::size_t r = 0; r < plans.size(); ++r) {
    std::size_t prev = SIZE_MAX;
    if (mode != PlacementMode::All) prev = last_write[r];
    for (const PlanEntry& e : plans[r].retrieve.entries) {
      SimTransfer t;
      t.rank = static_cast<int>(r);
      t.dir = Direction::Read;
      t.device = e.device_index;
      t.bytes = e.length;
      t.doorbell = static_cast<std::int64_t>(e.doorbell_index);
      t.chunk = e.chunk;
      if (prev != SIZE_MAX) t.deps.push_back(prev);
      auto it = publisher.find(e.doorbell_index);
      if (it == publisher.end()) throw SimError("retrieve without a matching publish");
      t.deps.push_back(it->second);
      if (e.reduce) t.compute_after = model.compute_per_byte * static_cast<double>(e.length);
      prev = out.size();
      out.push_back(std::move(t));
    }
  }
  return out;
}

SimReport simulate(const CollectiveRequest& req, const PoolConfig& cfg,
                   const BandwidthModel& model, const PlanOptions& opts) {
  const auto plans = build_all_plans(req, cfg, opts);
  return simulate_transfers(transfers_from_plans(plans, model, opts.mode), model,
                            cfg.num_devices);
}

std::vector<SimTransfer> transfers_from_log(const std::vector<AccessRecord>& log,
                                            const PoolConfig& cfg, bool overlap) {
  std::vector<AccessRecord> sorted = log;
  std::sort(sorted.begin(), sorted.end(),
            [](const AccessRecord& a, const AccessRecord& b) { return a.seq < b.seq; });
  std::vector<SimTransfer> out;
  std::map<int, std::size_t> last_write;
  std::map<int, std::size_t> last_read;
  // Write ranges seen so far: start address -> (end, transfer).
  std::map<std::uint64_t, std::pair<std::uint64_t, std::size_t>> written;
  for (const AccessRecord& a : sorted) {
    if (a.rank < 0) throw SimError("access log entry without an issuing rank");
    SimTransfer t;
    t.rank = a.rank;
    t.dir = a.dir;
    t.device = static_cast<std::uint32_t>(a.addr / cfg.stride());
    t.bytes = a.len;
    const std::size_t id = out.size();
    if (a.dir == Direction::Write) {
      if (auto it = last_write.find(a.rank); it != last_write.end()) t.deps.push_back(it->second);
      last_write[a.rank] = id;
      written[a.addr] = {a.addr + a.len, id};
    } else {
      if (auto it = last_read.find(a.rank); it != last_read.end()) {
        t.deps.push_back(it->second);
      } else if (!overlap) {
        if (auto w = last_write.find(a.rank); w != last_write.end()) t.deps.push_back(w->second);
      }
      last_read[a.rank] = id;
      auto it = written.upper_bound(a.addr);
      if (it != written.begin()) {
        --it;
        if (a.addr < it->second.first) t.deps.push_back(it->second.second);
      }
    }
    out.push_back(std::move(t));
  }
  return out;
}

// --- Scenarios ----------------------------------------------------------------

namespace {

CollectiveRequest scenario_request(CollectiveKind kind, int nranks, std::uint64_t msg_bytes,
                                   int chunks, int root) {
  CollectiveRequest req;
  req.kind = kind;
  req.nranks = nranks;
  req.root = root % nranks;
  req.elem = ElemType::I32;
  req.chunk_count = chunks;
  std::uint64_t count = msg_bytes / element_size(req.elem);
  if (kind == CollectiveKind::ReduceScatter || kind == CollectiveKind::AllToAll) {
    count -= count % static_cast<std::uint64_t>(nranks);
  }
  req.count = std::max<std::uint64_t>(count, 1);
  return req;
}

PoolConfig scenario_pool(const Scenario& s) {
  PoolConfig cfg;
  cfg.num_devices = s.num_devices;
  cfg.device_capacity = s.device_capacity;
  cfg.doorbell_region_size = s.doorbell_region_size;
  cfg.backend = Backend::Recording;
  return cfg;
}

template <typename T>
T take(const nlohmann::json& j, const char* key, T fallback) {
  return j.contains(key) ? j.at(key).get<T>() : fallback;
}

}  // namespace

Scenario parse_scenario(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw SimError(std::string("scenario is not valid JSON: ") + e.what());
  }
  static const char* kKeys[] = {"name",       "kind",        "nranks",         "msg_bytes",
                                "chunks",     "baseline_ranks", "root",        "placement",
                                "nd",         "device_capacity", "doorbell_region_size",
                                "bandwidth"};
  static const char* kModelKeys[] = {"curve", "peak", "device_latency", "rank_bandwidth",
                                     "compute_per_byte"};
  auto check_keys = [](const nlohmann::json& obj, auto& allowed, const char* where) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
      if (std::find_if(std::begin(allowed), std::end(allowed),
                       [&](const char* k) { return it.key() == k; }) == std::end(allowed)) {
        throw SimError(std::string("unknown ") + where + " key '" + it.key() + "'");
      }
    }
  };
  try {
    check_keys(j, kKeys, "scenario");
    Scenario s;
    s.name = take<std::string>(j, "name", "");
    s.kind = parse_kind(j.at("kind").get<std::string>());
    s.nranks = j.at("nranks").get<std::vector<int>>();
    s.msg_bytes = j.at("msg_bytes").get<std::vector<std::uint64_t>>();
    s.chunks = take<std::vector<int>>(j, "chunks", {8});
    s.baseline_ranks = take<int>(j, "baseline_ranks", 3);
    s.root = take<int>(j, "root", 0);
    s.placement = parse_placement(take<std::string>(j, "placement", "all"));
    s.num_devices = take<std::uint32_t>(j, "nd", 6);
    s.device_capacity = take<std::uint64_t>(j, "device_capacity", s.device_capacity);
    s.doorbell_region_size = take<std::uint64_t>(j, "doorbell_region_size", s.doorbell_region_size);
    if (j.contains("bandwidth")) {
      const auto& b = j.at("bandwidth");
      check_keys(b, kModelKeys, "bandwidth");
      BandwidthModel m = BandwidthModel::defaults();
      if (b.contains("curve")) {
        m.curve.clear();
        for (const auto& p : b.at("curve")) {
          m.curve.emplace_back(p.at(0).get<std::uint64_t>(), p.at(1).get<double>());
        }
      }
      m.peak = take<double>(b, "peak", m.peak);
      m.device_latency = take<double>(b, "device_latency", m.device_latency);
      m.rank_bandwidth = take<double>(b, "rank_bandwidth", m.rank_bandwidth);
      m.compute_per_byte = take<double>(b, "compute_per_byte", m.compute_per_byte);
      s.model = m;
    }
    s.model.validate();
    if (s.nranks.empty() || s.msg_bytes.empty() || s.chunks.empty()) {
      throw SimError("scenario needs nranks, msg_bytes and chunks");
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw SimError(std::string("malformed scenario: ") + e.what());
  } catch (const RequestError& e) {
    throw SimError(std::string("malformed scenario: ") + e.what());
  }
}

Scenario load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SimError("cannot open scenario file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_scenario(ss.str());
}

std::vector<ScenarioRow> run_scenario(const Scenario& s) {
  const PoolConfig cfg = scenario_pool(s);
  std::vector<ScenarioRow> rows;
  for (std::uint64_t msg : s.msg_bytes) {
    for (int c : s.chunks) {
      double baseline = 0;
      std::vector<ScenarioRow> group;
      for (int p : s.nranks) {
        const CollectiveRequest req = scenario_request(s.kind, p, msg, c, s.root);
        const SimReport rep = simulate(req, cfg, s.model, PlanOptions{s.placement});
        ScenarioRow row{s.kind, p, msg, c, rep.latency, 0};
        if (p == s.baseline_ranks) baseline = rep.latency;
        group.push_back(row);
      }
      for (auto& row : group) {
        row.ratio_vs_3 = baseline > 0 ? row.latency_s / baseline : 0;
        rows.push_back(row);
      }
    }
  }
  return rows;
}

std::vector<ScenarioRow> scale_scenario(CollectiveKind kind, const std::vector<std::uint64_t>& msgs,
                                        const BandwidthModel& model, int chunks,
                                        std::uint32_t nd) {
  Scenario s;
  s.kind = kind;
  s.nranks = {3, 6, 12};
  s.msg_bytes = msgs;
  s.chunks = {chunks};
  s.num_devices = nd;
  s.model = model;
  return run_scenario(s);
}

std::vector<ScenarioRow> chunk_sensitivity(const std::vector<std::uint64_t>& msgs,
                                           const std::vector<int>& chunk_counts,
                                           const BandwidthModel& model, int nranks,
                                           std::uint32_t nd) {
  Scenario s;
  s.kind = CollectiveKind::AllGather;
  s.nranks = {nranks};
  s.baseline_ranks = nranks;
  s.msg_bytes = msgs;
  s.chunks = chunk_counts;
  s.num_devices = nd;
  s.model = model;
  return run_scenario(s);
}

std::string scenario_csv(const std::vector<ScenarioRow>& rows) {
  std::ostringstream os;
  os << "kind,nranks,msg_bytes,chunks,latency_s,ratio_vs_3\n";
  os << std::setprecision(9);
  for (const auto& r : rows) {
    os << to_string(r.kind) << ',' << r.nranks << ',' << r.msg_bytes << ',' << r.chunks << ','
       << r.latency_s << ',' << r.ratio_vs_3 << '\n';
  }
  return os.str();
}

}  // namespace poolcomm
