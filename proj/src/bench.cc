#include "poolcomm/bench.h"

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <thread>
#include <tuple>

#include <json.hpp>

namespace poolcomm {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

template <typename T>
void fill_as(std::span<std::byte> out, std::uint64_t base) {
  const std::size_t n = out.size() / sizeof(T);
  T batch[1024];
  for (std::size_t i = 0; i < n; i += 1024) {
    const std::size_t m = std::min<std::size_t>(1024, n - i);
    for (std::size_t k = 0; k < m; ++k) {
      const std::uint64_t h = splitmix64(base + i + k);
      if constexpr (std::is_floating_point_v<T>) {
        batch[k] = static_cast<T>(static_cast<std::int64_t>(h % 4096) - 2048) / T{16};
      } else {
        batch[k] = static_cast<T>(h);
      }
    }
    std::memcpy(out.data() + i * sizeof(T), batch, m * sizeof(T));
  }
}

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

// Every rank's send buffer, each at least as long as the root's so the
// oracle can index any of them.
std::vector<std::vector<std::byte>> make_sends(const CollectiveRequest& req, std::uint64_t seed) {
  std::uint64_t len = 0;
  for (int r = 0; r < req.nranks; ++r) len = std::max(len, req.for_rank(r).send_bytes());
  std::vector<std::vector<std::byte>> sends(req.nranks);
  for (int r = 0; r < req.nranks; ++r) {
    sends[r].resize(len);
    fill_payload(sends[r], req.elem, seed, r);
  }
  return sends;
}

// Runs warmup + timed calls for one rank. `recv` holds the final call's
// result; it is poisoned first so stale bytes cannot pass verification.
std::vector<double> rank_loop(const PoolHandle& pool, const BenchConfig& cfg,
                              const CollectiveRequest& req, std::span<const std::byte> send,
                              std::vector<std::byte>& recv) {
  CommOptions opts;
  opts.spin.timeout = cfg.timeout;
  opts.plan.mode = cfg.placement;
  Communicator comm(pool, req.rank, req.nranks, opts);
  recv.assign(req.recv_bytes(), std::byte{0});
  std::vector<double> durations;
  const int total = cfg.warmup + cfg.iters;
  for (int i = 0; i < total; ++i) {
    if (i == total - 1) std::fill(recv.begin(), recv.end(), std::byte{0xCD});
    const auto t0 = std::chrono::steady_clock::now();
    comm.run(req, send.subspan(0, req.send_bytes()), recv);
    const auto t1 = std::chrono::steady_clock::now();
    if (i >= cfg.warmup) durations.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  return durations;
}

struct PointResult {
  bool ok = true;
  std::string message;
  std::vector<double> durations;  // per timed call, max over ranks
};

void merge_durations(PointResult& res, const std::vector<double>& mine) {
  if (res.durations.size() < mine.size()) res.durations.resize(mine.size(), 0.0);
  for (std::size_t i = 0; i < mine.size(); ++i) {
    res.durations[i] = std::max(res.durations[i], mine[i]);
  }
}

PointResult run_point_threads(const PoolHandle& pool, const BenchConfig& cfg,
                              const CollectiveRequest& req) {
  const auto sends = make_sends(req, cfg.seed);
  std::vector<std::vector<std::byte>> recvs(req.nranks);
  std::vector<std::vector<double>> durations(req.nranks);
  std::vector<std::string> errors(req.nranks);
  std::vector<std::thread> threads;
  for (int r = 0; r < req.nranks; ++r) {
    threads.emplace_back([&, r] {
      try {
        durations[r] = rank_loop(pool, cfg, req.for_rank(r), sends[r], recvs[r]);
      } catch (const std::exception& e) {
        errors[r] = e.what();
      }
    });
  }
  for (auto& t : threads) t.join();
  PointResult res;
  for (int r = 0; r < req.nranks; ++r) {
    if (!errors[r].empty()) {
      res.ok = false;
      res.message = "rank " + std::to_string(r) + ": " + errors[r];
      return res;
    }
  }
  for (int r = 0; r < req.nranks; ++r) {
    const VerifyResult v = verify_rank(req.for_rank(r), sends, recvs[r]);
    if (!v.ok) {
      res.ok = false;
      res.message = "rank " + std::to_string(r) + ": " + v.message;
      return res;
    }
    merge_durations(res, durations[r]);
  }
  return res;
}

void write_all(int fd, const std::string& data) {
  std::size_t off = 0;
  while (off < data.size()) {
    const ssize_t n = ::write(fd, data.data() + off, data.size() - off);
    if (n <= 0) return;
    off += static_cast<std::size_t>(n);
  }
}

std::string read_all(int fd) {
  std::string out;
  char buf[4096];
  for (;;) {
    const ssize_t n = ::read(fd, buf, sizeof buf);
    if (n <= 0) break;
    out.append(buf, static_cast<std::size_t>(n));
  }
  return out;
}

PointResult run_point_processes(const PoolConfig& pc, const BenchConfig& cfg,
                                 const CollectiveRequest& req) {
  std::vector<pid_t> pids;
  std::vector<int> fds;
  std::fflush(nullptr);
  for (int r = 0; r < req.nranks; ++r) {
    int p[2];
    if (::pipe(p) != 0) throw BenchError("pipe failed");
    const pid_t pid = ::fork();
    if (pid < 0) throw BenchError("fork failed");
    if (pid == 0) {
      ::close(p[0]);
      nlohmann::json out;
      try {
        PoolHandle pool = map_pool(pc);
        const CollectiveRequest mine = req.for_rank(r);
        const auto sends = make_sends(req, cfg.seed);
        std::vector<std::byte> recv;
        out["durations"] = rank_loop(pool, cfg, mine, sends[r], recv);
        const VerifyResult v = verify_rank(mine, sends, recv);
        out["ok"] = v.ok;
        out["message"] = v.message;
      } catch (const std::exception& e) {
        out["ok"] = false;
        out["message"] = e.what();
      }
      write_all(p[1], out.dump());
      ::close(p[1]);
      ::_exit(0);
    }
    ::close(p[1]);
    pids.push_back(pid);
    fds.push_back(p[0]);
  }
  PointResult res;
  for (int r = 0; r < req.nranks; ++r) {
    const std::string text = read_all(fds[r]);
    ::close(fds[r]);
    int status = 0;
    ::waitpid(pids[r], &status, 0);
    const std::string who = "rank " + std::to_string(r) + ": ";
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0 || text.empty()) {
      if (res.ok) res.message = who + "process exited abnormally";
      res.ok = false;
      continue;
    }
    const auto j = nlohmann::json::parse(text);
    if (!j.at("ok").get<bool>()) {
      if (res.ok) res.message = who + j.at("message").get<std::string>();
      res.ok = false;
      continue;
    }
    merge_durations(res, j.at("durations").get<std::vector<double>>());
  }
  return res;
}

std::string unique_pool_path() {
  static int counter = 0;
  return (std::filesystem::temp_directory_path() /
          ("poolbench-" + std::to_string(::getpid()) + "-" + std::to_string(counter++) + ".pool"))
      .string();
}

PoolConfig sweep_pool(const BenchConfig& cfg) {
  PoolConfig pc;
  pc.num_devices = cfg.num_devices;
  pc.doorbell_region_size = cfg.doorbell_region_size;
  pc.device_capacity = cfg.device_capacity;
  if (pc.device_capacity == 0) {
    PoolConfig probe = pc;
    probe.backend = Backend::Recording;
    probe.device_capacity = 1ull << 44;
    std::uint64_t need = pc.doorbell_region_size + 4096;
    for (CollectiveKind kind : cfg.kinds) {
      for (std::uint64_t msg : cfg.message_sizes()) {
        const auto plans = build_all_plans(bench_request(cfg, kind, msg), probe, {cfg.placement});
        for (const auto& plan : plans) {
          for (const auto& e : plan.publish.entries) {
            need = std::max(need, e.pool_address - e.device_index * probe.stride() + e.length);
          }
        }
      }
    }
    pc.device_capacity = (need + 4095) / 4096 * 4096;
  }
  switch (cfg.backend) {
    case BenchBackend::SharedArena:
      pc.backend = Backend::SharedArena;
      break;
    case BenchBackend::FileMapped:
      pc.backend = Backend::FileMapped;
      pc.file_path = cfg.pool_file.empty() ? unique_pool_path() : cfg.pool_file;
      break;
    case BenchBackend::Emulator:
      pc.backend = Backend::Recording;
      break;
  }
  pc.validate();
  return pc;
}

void reset_doorbells(const PoolHandle& pool) {
  auto region = pool.doorbell_region();
  std::memset(region.data(), 0, region.size());
}

}  // namespace

std::string_view to_string(BenchBackend b) {
  switch (b) {
    case BenchBackend::SharedArena:
      return "sharedarena";
    case BenchBackend::FileMapped:
      return "filemapped";
    case BenchBackend::Emulator:
      return "emulator";
  }
  return "?";
}

BenchBackend parse_bench_backend(std::string_view name) {
  const std::string n = lower(name);
  if (n == "sharedarena" || n == "shared" || n == "arena") return BenchBackend::SharedArena;
  if (n == "filemapped" || n == "file") return BenchBackend::FileMapped;
  if (n == "emulator" || n == "emu" || n == "sim") return BenchBackend::Emulator;
  throw BenchError("unknown backend '" + std::string(name) + "'");
}

void BenchConfig::validate() const {
  if (kinds.empty()) throw BenchError("no collective kinds selected");
  if (sizes.empty()) {
    if (min_bytes == 0) throw BenchError("minimum message size must be positive");
    if (min_bytes > max_bytes) throw BenchError("minimum message size exceeds maximum");
    if (!(step_factor > 1)) throw BenchError("step factor must be greater than 1");
  } else if (std::find(sizes.begin(), sizes.end(), 0) != sizes.end()) {
    throw BenchError("message sizes must be positive");
  }
  if (nranks < 1 || nranks > kMaxRanks) {
    throw BenchError("nranks must be in [1, " + std::to_string(kMaxRanks) + "]");
  }
  if (num_devices < 1) throw BenchError("need at least one device");
  if (chunk_count < 1) throw BenchError("chunk count must be at least 1");
  if (iters < 1) throw BenchError("iters must be at least 1");
  if (warmup < 1) throw BenchError("warmup must be at least 1");
  if (root < 0 || root >= nranks) throw BenchError("root out of range");
  if (timeout.count() <= 0) throw BenchError("timeout must be positive");
  model.validate();
}

std::vector<std::uint64_t> BenchConfig::message_sizes() const {
  if (!sizes.empty()) return sizes;
  std::vector<std::uint64_t> out;
  for (double s = static_cast<double>(min_bytes); s <= static_cast<double>(max_bytes) * (1 + 1e-12);
       s *= step_factor) {
    const auto b = static_cast<std::uint64_t>(std::llround(s));
    if (out.empty() || out.back() != b) out.push_back(b);
  }
  return out;
}

CollectiveRequest bench_request(const BenchConfig& cfg, CollectiveKind kind,
                                std::uint64_t msg_bytes) {
  CollectiveRequest req;
  req.kind = kind;
  req.nranks = cfg.nranks;
  req.root = cfg.root;
  req.elem = cfg.elem;
  req.op = cfg.op;
  req.chunk_count = cfg.chunk_count;
  const auto p = static_cast<std::uint64_t>(cfg.nranks);
  std::uint64_t count = msg_bytes / element_size(cfg.elem);
  if (kind == CollectiveKind::ReduceScatter || kind == CollectiveKind::AllToAll) {
    count = std::max(count - count % p, p);
  }
  req.count = std::max<std::uint64_t>(count, 1);
  return req;
}

void fill_payload(std::span<std::byte> out, ElemType elem, std::uint64_t seed, int rank) {
  const std::uint64_t base =
      splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(rank) + 1)) << 20;
  switch (elem) {
    case ElemType::I32:
      fill_as<std::int32_t>(out, base);
      break;
    case ElemType::I64:
      fill_as<std::int64_t>(out, base);
      break;
    case ElemType::F32:
      fill_as<float>(out, base);
      break;
    case ElemType::F64:
      fill_as<double>(out, base);
      break;
  }
}

double percentile(std::vector<double> samples, double q) {
  if (samples.empty()) return 0;
  std::sort(samples.begin(), samples.end());
  const auto n = samples.size();
  auto idx = static_cast<std::size_t>(std::ceil(q * static_cast<double>(n)));
  idx = std::clamp<std::size_t>(idx, 1, n) - 1;
  return samples[idx];
}

double median(std::vector<double> samples) {
  if (samples.empty()) return 0;
  std::sort(samples.begin(), samples.end());
  const auto n = samples.size();
  return n % 2 == 1 ? samples[n / 2] : 0.5 * (samples[n / 2 - 1] + samples[n / 2]);
}

BenchReport run_sweep(const BenchConfig& cfg) {
  cfg.validate();
  const PoolConfig pc = sweep_pool(cfg);
  std::ofstream dump;
  if (!cfg.dump_plan.empty()) {
    dump.open(cfg.dump_plan, std::ios::app);
    if (!dump) throw BenchError("cannot open plan dump file " + cfg.dump_plan);
  }

  PoolHandle pool;
  const bool temp_file = cfg.backend == BenchBackend::FileMapped && cfg.pool_file.empty();
  if (cfg.backend != BenchBackend::Emulator) {
    pool = map_pool(pc);
    reset_doorbells(pool);
  }

  BenchReport report;
  try {
    for (CollectiveKind kind : cfg.kinds) {
      for (std::uint64_t msg : cfg.message_sizes()) {
        const CollectiveRequest req = bench_request(cfg, kind, msg);
        if (dump.is_open()) {
          const auto plans = build_all_plans(req, pc, {cfg.placement});
          for (int r = 0; r < req.nranks; ++r) dump << plan_to_json_lines(plans[r], r);
        }
        BenchRow row;
        row.kind = kind;
        row.backend = std::string(to_string(cfg.backend));
        row.placement = cfg.placement;
        row.nranks = cfg.nranks;
        row.num_devices = cfg.num_devices;
        row.msg_bytes = msg;
        row.chunks = cfg.chunk_count;

        if (cfg.backend == BenchBackend::Emulator) {
          const SimReport sim = simulate(req, pc, cfg.model, {cfg.placement});
          row.iters = 1;
          row.median_s = row.p95_s = sim.latency;
          row.verified = "n/a";
          report.rows.push_back(row);
          continue;
        }

        PointResult res = cfg.backend == BenchBackend::SharedArena
                              ? run_point_threads(pool, cfg, req)
                              : run_point_processes(pc, cfg, req);
        if (!res.ok) {
          report.failures.push_back(std::string(to_string(kind)) + " " + std::to_string(msg) +
                                    " bytes: " + res.message);
          // Ranks may have stopped at different epochs; start the next point clean.
          reset_doorbells(pool);
          continue;
        }
        row.iters = cfg.iters;
        row.median_s = median(res.durations);
        row.p95_s = percentile(res.durations, 0.95);
        row.verified = "yes";
        report.rows.push_back(row);
      }
    }
  } catch (...) {
    if (temp_file) std::filesystem::remove(pc.file_path);
    throw;
  }
  if (temp_file) std::filesystem::remove(pc.file_path);
  return report;
}

std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::ostringstream os;
  os << "kind,backend,placement,nranks,nd,msg_bytes,chunks,iters,median_s,p95_s,verified\n";
  os << std::setprecision(9);
  for (const auto& r : rows) {
    os << to_string(r.kind) << ',' << r.backend << ',' << to_string(r.placement) << ','
       << r.nranks << ',' << r.num_devices << ',' << r.msg_bytes << ',' << r.chunks << ','
       << r.iters << ',' << r.median_s << ',' << r.p95_s << ',' << r.verified << '\n';
  }
  return os.str();
}

std::vector<BenchRow> parse_bench_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) ||
      line != "kind,backend,placement,nranks,nd,msg_bytes,chunks,iters,median_s,p95_s,verified") {
    throw BenchError("not a bench CSV report");
  }
  std::vector<BenchRow> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (f.size() != 11) throw BenchError("bad CSV row at line " + std::to_string(lineno));
    try {
      BenchRow r;
      r.kind = parse_kind(f[0]);
      r.backend = f[1];
      r.placement = parse_placement(f[2]);
      r.nranks = std::stoi(f[3]);
      r.num_devices = static_cast<std::uint32_t>(std::stoul(f[4]));
      r.msg_bytes = std::stoull(f[5]);
      r.chunks = std::stoi(f[6]);
      r.iters = std::stoi(f[7]);
      r.median_s = std::stod(f[8]);
      r.p95_s = std::stod(f[9]);
      r.verified = f[10];
      rows.push_back(r);
    } catch (const std::exception& e) {
      throw BenchError("bad CSV row at line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return rows;
}

std::string bench_summary(const std::vector<BenchRow>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(14) << "kind" << std::right << std::setw(14) << "bytes"
     << std::setw(7) << "ranks" << std::setw(7) << "chunks" << std::setw(14) << "median(us)"
     << std::setw(14) << "p95(us)" << std::setw(12) << "algbw(GB/s)" << std::setw(10)
     << "verified" << '\n';
  os << std::fixed;
  for (const auto& r : rows) {
    const double bw = r.median_s > 0 ? static_cast<double>(r.msg_bytes) / r.median_s / 1e9 : 0;
    os << std::left << std::setw(14) << to_string(r.kind) << std::right << std::setw(14)
       << r.msg_bytes << std::setw(7) << r.nranks << std::setw(7) << r.chunks
       << std::setprecision(1) << std::setw(14) << r.median_s * 1e6 << std::setw(14)
       << r.p95_s * 1e6 << std::setprecision(3) << std::setw(12) << bw << std::setw(10)
       << r.verified << '\n';
  }
  return os.str();
}

std::vector<CompareRow> compare(const std::vector<BenchRow>& a, const std::vector<BenchRow>& b) {
  using Key = std::tuple<CollectiveKind, int, std::uint64_t>;
  std::map<Key, const BenchRow*> in_b;
  for (const auto& r : b) in_b[{r.kind, r.nranks, r.msg_bytes}] = &r;
  std::vector<CompareRow> out;
  for (const auto& r : a) {
    auto it = in_b.find({r.kind, r.nranks, r.msg_bytes});
    if (it == in_b.end()) {
      throw BenchError("row " + std::string(to_string(r.kind)) + "/" + std::to_string(r.nranks) +
                       "/" + std::to_string(r.msg_bytes) + " missing from second report");
    }
    CompareRow c{r.kind, r.nranks, r.msg_bytes, r.median_s, it->second->median_s, 0};
    c.speedup = r.median_s > 0 ? it->second->median_s / r.median_s : 0;
    out.push_back(c);
    in_b.erase(it);
  }
  if (!in_b.empty()) {
    const BenchRow& r = *in_b.begin()->second;
    throw BenchError("row " + std::string(to_string(r.kind)) + "/" + std::to_string(r.nranks) +
                     "/" + std::to_string(r.msg_bytes) + " missing from first report");
  }
  return out;
}

std::string compare_table(const std::vector<CompareRow>& rows) {
  std::ostringstream os;
  os << "kind,nranks,msg_bytes,a_median_s,b_median_s,speedup\n" << std::setprecision(9);
  for (const auto& r : rows) {
    os << to_string(r.kind) << ',' << r.nranks << ',' << r.msg_bytes << ',' << r.a_median_s
       << ',' << r.b_median_s << ',' << r.speedup << '\n';
  }
  return os.str();
}

}  // namespace poolcomm
