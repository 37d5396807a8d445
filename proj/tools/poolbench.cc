#include <CLI11.hpp>

#include <cctype>
#include <fstream>
#include <iostream>
#include <sstream>

#include "poolcomm/bench.h"
#include "poolcomm/emulator.h"

namespace {

using poolcomm::BenchError;

// "512", "4K", "1M", "2G": binary multiples.
std::uint64_t parse_bytes(const std::string& text) {
  std::size_t pos = 0;
  const unsigned long long base = std::stoull(text, &pos);
  std::uint64_t mult = 1;
  if (pos < text.size()) {
    switch (std::toupper(static_cast<unsigned char>(text[pos]))) {
      case 'K':
        mult = 1ull << 10;
        break;
      case 'M':
        mult = 1ull << 20;
        break;
      case 'G':
        mult = 1ull << 30;
        break;
      default:
        throw BenchError("bad size '" + text + "'");
    }
    ++pos;
    if (pos < text.size() && std::toupper(static_cast<unsigned char>(text[pos])) == 'B') ++pos;
    if (pos != text.size()) throw BenchError("bad size '" + text + "'");
  }
  return base * mult;
}

std::vector<poolcomm::CollectiveKind> parse_kinds(const std::string& text) {
  if (text == "all") return {std::begin(poolcomm::kAllKinds), std::end(poolcomm::kAllKinds)};
  std::vector<poolcomm::CollectiveKind> out;
  std::istringstream in(text);
  for (std::string k; std::getline(in, k, ',');) out.push_back(poolcomm::parse_kind(k));
  return out;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw BenchError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void emit(const std::string& out_path, const std::string& text) {
  if (out_path.empty() || out_path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(out_path);
  if (!out) throw BenchError("cannot write " + out_path);
  out << text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Collective benchmark over a shared memory pool"};
  app.require_subcommand(0, 1);

  std::string kind = "allreduce";
  std::string minbytes = "1M";
  std::string maxbytes = "1M";
  double stepfactor = 2;
  int nranks = 2;
  std::uint32_t nd = 6;
  int chunks = 1;
  std::string backend = "sharedarena";
  int iters = 5;
  int warmup = 1;
  std::uint64_t seed = 1;
  std::string out;
  std::string placement = "all";
  std::string scenario;
  std::string dtype = "i32";
  std::string op = "sum";
  int root = 0;
  long timeout_ms = 5000;
  std::string pool_file;
  std::string dump_plan;

  app.add_option("--kind", kind, "Primitive(s): comma list or 'all'");
  app.add_option("--minbytes", minbytes, "Smallest per-rank message size (K/M/G suffixes)");
  app.add_option("--maxbytes", maxbytes, "Largest per-rank message size");
  app.add_option("--stepfactor", stepfactor, "Size multiplier between sweep points");
  app.add_option("--nranks", nranks, "Number of ranks");
  app.add_option("--nd", nd, "Number of pool devices");
  app.add_option("--chunks", chunks, "Chunks per segment");
  app.add_option("--backend", backend, "sharedarena | filemapped | emulator");
  app.add_option("--iters", iters, "Timed iterations per point");
  app.add_option("--warmup", warmup, "Untimed warmup iterations per point");
  app.add_option("--seed", seed, "Payload seed");
  app.add_option("--out", out, "CSV output path (default stdout)");
  app.add_option("--placement", placement, "all | aggregate | naive");
  app.add_option("--scenario", scenario, "Emulator scenario JSON; replaces the sweep");
  app.add_option("--dtype", dtype, "i32 | i64 | f32 | f64");
  app.add_option("--op", op, "sum | max | min");
  app.add_option("--root", root, "Root rank for rooted primitives");
  app.add_option("--timeout-ms", timeout_ms, "Doorbell wait timeout");
  app.add_option("--pool-file", pool_file, "Pool file for the filemapped backend");
  app.add_option("--dump-plan", dump_plan, "Append every plan as JSON lines to this file");

  auto* cmp = app.add_subcommand("compare", "Per-row speedup of report B over report A");
  std::string report_a;
  std::string report_b;
  cmp->add_option("a", report_a, "First CSV report")->required();
  cmp->add_option("b", report_b, "Second CSV report")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (cmp->parsed()) {
      const auto a = poolcomm::parse_bench_csv(slurp(report_a));
      const auto b = poolcomm::parse_bench_csv(slurp(report_b));
      emit(out, poolcomm::compare_table(poolcomm::compare(a, b)));
      return 0;
    }

    if (!scenario.empty()) {
      const auto rows = poolcomm::run_scenario(poolcomm::load_scenario(scenario));
      emit(out, poolcomm::scenario_csv(rows));
      return 0;
    }

    poolcomm::BenchConfig cfg;
    cfg.kinds = parse_kinds(kind);
    cfg.min_bytes = parse_bytes(minbytes);
    cfg.max_bytes = parse_bytes(maxbytes);
    cfg.step_factor = stepfactor;
    cfg.nranks = nranks;
    cfg.num_devices = nd;
    cfg.chunk_count = chunks;
    cfg.backend = poolcomm::parse_bench_backend(backend);
    cfg.iters = iters;
    cfg.warmup = warmup;
    cfg.seed = seed;
    cfg.output = out;
    cfg.placement = poolcomm::parse_placement(placement);
    cfg.elem = poolcomm::parse_elem(dtype);
    cfg.op = poolcomm::parse_op(op);
    cfg.root = root;
    cfg.timeout = std::chrono::milliseconds(timeout_ms);
    cfg.pool_file = pool_file;
    cfg.dump_plan = dump_plan;

    const poolcomm::BenchReport report = poolcomm::run_sweep(cfg);
    emit(out, poolcomm::bench_csv(report.rows));
    if (!out.empty() && out != "-") std::cout << poolcomm::bench_summary(report.rows);
    for (const auto& f : report.failures) std::cerr << "FAILED " << f << '\n';
    return report.ok() ? 0 : 1;
  } catch (const std::exception& e) {
    std::cerr << "poolbench: " << e.what() << '\n';
    return 2;
  }
}
