#include "poolcomm/collectives.h"

#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>
#include <map>
#include <numeric>
#include <random>

#include "rank_threads.h"

namespace poolcomm {
namespace {

using testing::run_ranks;

constexpr std::uint64_t kMiB = 1ull << 20;

PoolHandle arena(std::uint32_t nd = 6, std::uint64_t cap = 16 * kMiB) {
  PoolConfig cfg;
  cfg.num_devices = nd;
  cfg.device_capacity = cap;
  cfg.doorbell_region_size = 256 * 1024;
  return map_pool(cfg);
}

CommOptions options(bool trace = false, PlacementMode mode = PlacementMode::All) {
  CommOptions o;
  o.spin.timeout = std::chrono::seconds(20);
  o.trace = trace;
  o.plan.mode = mode;
  return o;
}

template <typename T>
std::vector<std::byte> bytes_of(const std::vector<T>& v) {
  std::vector<std::byte> out(v.size() * sizeof(T));
  std::memcpy(out.data(), v.data(), out.size());
  return out;
}

template <typename T>
std::vector<T> values_of(const std::vector<std::byte>& b) {
  std::vector<T> out(b.size() / sizeof(T));
  std::memcpy(out.data(), b.data(), b.size());
  return out;
}

std::vector<std::byte> random_bytes(std::mt19937_64& rng, std::uint64_t n, ElemType elem) {
  std::vector<std::byte> out(n);
  const std::size_t esz = element_size(elem);
  for (std::uint64_t i = 0; i < n / esz; ++i) {
    if (elem == ElemType::F32) {
      const float f = std::uniform_real_distribution<float>(-100, 100)(rng);
      std::memcpy(out.data() + i * esz, &f, esz);
    } else if (elem == ElemType::F64) {
      const double d = std::uniform_real_distribution<double>(-100, 100)(rng);
      std::memcpy(out.data() + i * esz, &d, esz);
    } else {
      const std::uint64_t v = rng();
      std::memcpy(out.data() + i * esz, &v, esz);
    }
  }
  return out;
}

// Runs req on every rank with the given send buffers; returns recv buffers.
std::vector<RankBuffers> run_all(const CollectiveRequest& req, PoolHandle pool,
                                 const std::vector<std::vector<std::byte>>& sends,
                                 CommOptions opts = options(),
                                 std::vector<std::vector<TraceEvent>>* traces = nullptr) {
  std::vector<RankBuffers> bufs(req.nranks);
  for (int r = 0; r < req.nranks; ++r) {
    bufs[r].send = sends[r];
    bufs[r].recv.assign(req.for_rank(r).recv_bytes(), std::byte{0xEE});
  }
  if (traces != nullptr) traces->assign(req.nranks, {});
  run_ranks(req.nranks, [&](int r) {
    Communicator comm(pool, r, req.nranks, opts);
    comm.run(req.for_rank(r), bufs[r].send, bufs[r].recv);
    if (traces != nullptr) (*traces)[r] = comm.trace();
  });
  return bufs;
}

std::vector<std::vector<std::byte>> random_sends(const CollectiveRequest& req, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::vector<std::byte>> sends(req.nranks);
  for (int r = 0; r < req.nranks; ++r) {
    sends[r] = random_bytes(rng, req.for_rank(r).send_bytes(), req.elem);
  }
  return sends;
}

CollectiveRequest request(CollectiveKind kind, int nranks, std::uint64_t count, int chunks = 1,
                          int root = 0, ElemType elem = ElemType::I32, ReduceOp op = ReduceOp::Sum) {
  CollectiveRequest req;
  req.kind = kind;
  req.nranks = nranks;
  req.count = count;
  req.chunk_count = chunks;
  req.root = root;
  req.elem = elem;
  req.op = op;
  return req;
}

// --- Oracle self-checks -----------------------------------------------------

TEST(OracleTest, ReduceScatterBruteForce) {
  // Independent check of expected_recv: full elementwise sum, then slice.
  const int p = 4;
  const std::uint64_t n = 8;
  std::vector<std::vector<std::byte>> sends;
  for (int r = 0; r < p; ++r) sends.push_back(bytes_of(std::vector<std::int32_t>(n, r)));
  for (int k = 0; k < p; ++k) {
    auto want = request(CollectiveKind::ReduceScatter, p, n).for_rank(k);
    EXPECT_EQ(values_of<std::int32_t>(expected_recv(want, sends)),
              (std::vector<std::int32_t>{6, 6}));
  }
}

TEST(OracleTest, IntegerSumWraps) {
  std::vector<std::byte> acc = bytes_of(std::vector<std::int32_t>{INT32_MAX});
  reduce_into(acc, bytes_of(std::vector<std::int32_t>{1}), ElemType::I32, ReduceOp::Sum);
  EXPECT_EQ(values_of<std::int32_t>(acc)[0], INT32_MIN);
}

TEST(OracleTest, MaxMin) {
  std::vector<std::byte> acc = bytes_of(std::vector<double>{1.0, 5.0});
  reduce_into(acc, bytes_of(std::vector<double>{3.0, 2.0}), ElemType::F64, ReduceOp::Max);
  EXPECT_EQ(values_of<double>(acc), (std::vector<double>{3.0, 5.0}));
  reduce_into(acc, bytes_of(std::vector<double>{0.5, 9.0}), ElemType::F64, ReduceOp::Min);
  EXPECT_EQ(values_of<double>(acc), (std::vector<double>{0.5, 5.0}));
}

TEST(OracleTest, VerifyReportsFirstMismatch) {
  auto req = request(CollectiveKind::AllGather, 2, 3);
  std::vector<RankBuffers> bufs(2);
  bufs[0].send = bytes_of(std::vector<std::int32_t>{1, 2, 3});
  bufs[1].send = bytes_of(std::vector<std::int32_t>{4, 5, 6});
  bufs[0].recv = bytes_of(std::vector<std::int32_t>{1, 2, 3, 4, 5, 6});
  bufs[1].recv = bytes_of(std::vector<std::int32_t>{1, 2, 3, 4, 0, 6});
  const VerifyResult res = verify(req, bufs);
  EXPECT_FALSE(res.ok);
  EXPECT_EQ(res.rank, 1);
  EXPECT_EQ(res.index, 4u);
}

TEST(OracleTest, FloatToleranceInUlps) {
  auto req = request(CollectiveKind::Broadcast, 1, 1, 1, 0, ElemType::F32);
  std::vector<std::vector<std::byte>> sends = {bytes_of(std::vector<float>{1.0f})};
  const float near = std::nextafter(std::nextafter(1.0f, 2.0f), 2.0f);
  auto recv = bytes_of(std::vector<float>{near});
  EXPECT_FALSE(verify_rank(req, sends, recv, 0).ok);
  EXPECT_FALSE(verify_rank(req, sends, recv, 1).ok);
  EXPECT_TRUE(verify_rank(req, sends, recv, 4).ok);
}

// --- Worked examples ---------------------------------------------------------

TEST(CollectivesTest, BroadcastThreeRanks) {
  auto req = request(CollectiveKind::Broadcast, 3, 6);
  std::vector<std::vector<std::byte>> sends(3);
  sends[0] = bytes_of(std::vector<std::int32_t>{1, 2, 3, 4, 5, 6});
  auto bufs = run_all(req, arena(), sends);
  for (int r = 0; r < 3; ++r) {
    EXPECT_EQ(values_of<std::int32_t>(bufs[r].recv), (std::vector<std::int32_t>{1, 2, 3, 4, 5, 6}));
  }
}

TEST(CollectivesTest, AllReduceFourRanks) {
  auto req = request(CollectiveKind::AllReduce, 4, 2);
  std::vector<std::vector<std::byte>> sends;
  for (int r = 0; r < 4; ++r) sends.push_back(bytes_of(std::vector<std::int32_t>{r + 1, r + 1}));
  auto bufs = run_all(req, arena(), sends);
  for (int r = 0; r < 4; ++r) {
    EXPECT_EQ(values_of<std::int32_t>(bufs[r].recv), (std::vector<std::int32_t>{10, 10}));
  }
}

TEST(CollectivesTest, ReduceScatterFourRanks) {
  auto req = request(CollectiveKind::ReduceScatter, 4, 8);
  std::vector<std::vector<std::byte>> sends;
  for (int r = 0; r < 4; ++r) sends.push_back(bytes_of(std::vector<std::int32_t>(8, r)));
  auto bufs = run_all(req, arena(8), sends);
  for (int r = 0; r < 4; ++r) {
    EXPECT_EQ(values_of<std::int32_t>(bufs[r].recv), (std::vector<std::int32_t>{6, 6}));
  }
}

TEST(CollectivesTest, AllToAllTaggedPermutation) {
  const int p = 4;
  const std::uint64_t per = 3;
  auto req = request(CollectiveKind::AllToAll, p, per * p);
  std::vector<std::vector<std::byte>> sends;
  for (int r = 0; r < p; ++r) {
    std::vector<std::int32_t> v;
    for (int t = 0; t < p; ++t)
      for (std::uint64_t i = 0; i < per; ++i) v.push_back(r * 100 + t * 10 + static_cast<int>(i));
    sends.push_back(bytes_of(v));
  }
  auto bufs = run_all(req, arena(8), sends, options(), nullptr);
  for (int t = 0; t < p; ++t) {
    std::vector<std::int32_t> want;
    for (int r = 0; r < p; ++r)
      for (std::uint64_t i = 0; i < per; ++i) want.push_back(r * 100 + t * 10 + static_cast<int>(i));
    EXPECT_EQ(values_of<std::int32_t>(bufs[t].recv), want);
  }
}

// --- Oracle equivalence matrix ---------------------------------------------

struct MatrixCase {
  CollectiveKind kind;
  int nranks;
  std::uint64_t count;
  int chunks;
};

std::string case_name(const MatrixCase& c) {
  return std::string(to_string(c.kind)) + "/P" + std::to_string(c.nranks) + "/N" +
         std::to_string(c.count) + "/C" + std::to_string(c.chunks);
}

TEST(CollectivesMatrixTest, MatchesOracle) {
  std::uint64_t seed = 1;
  for (CollectiveKind kind : kAllKinds) {
    for (int p : {2, 3, 4, 6, 8}) {
      for (std::uint64_t count : {1ull, 7ull, 64ull, 4096ull, 100000ull}) {
        std::uint64_t n = count;
        if (kind == CollectiveKind::ReduceScatter || kind == CollectiveKind::AllToAll) {
          n = std::max<std::uint64_t>(count / p, 1) * p;
        }
        for (int c : {1, 2, 4, 8}) {
          const MatrixCase mc{kind, p, n, c};
          SCOPED_TRACE(case_name(mc));
          auto req = request(kind, p, n, c, p > 2 ? 1 : 0);
          auto sends = random_sends(req, seed++);
          auto bufs = run_all(req, arena(8, 32 * kMiB), sends);
          const VerifyResult res = verify(req, bufs);
          ASSERT_TRUE(res.ok) << res.message;
        }
      }
    }
  }
}

TEST(CollectivesMatrixTest, MillionElementSample) {
  for (CollectiveKind kind : {CollectiveKind::AllReduce, CollectiveKind::AllToAll,
                              CollectiveKind::Gather}) {
    auto req = request(kind, 4, 1000000, 8, 2);
    auto sends = random_sends(req, 99);
    auto bufs = run_all(req, arena(8, 64 * kMiB), sends);
    const VerifyResult res = verify(req, bufs);
    EXPECT_TRUE(res.ok) << res.message;
  }
}

TEST(CollectivesTest, ChunkCountDoesNotChangeResults) {
  for (CollectiveKind kind : kAllKinds) {
    auto base = request(kind, 3, 3 * 1111, 1, 1);
    auto sends = random_sends(base, 7);
    std::vector<std::vector<std::byte>> first;
    for (int c : {1, 2, 3, 5, 8, 16}) {
      auto req = base;
      req.chunk_count = c;
      auto bufs = run_all(req, arena(), sends);
      std::vector<std::vector<std::byte>> recvs;
      for (auto& b : bufs) recvs.push_back(b.recv);
      if (first.empty()) {
        first = recvs;
      } else {
        EXPECT_EQ(recvs, first) << to_string(kind) << " C=" << c;
      }
    }
  }
}

TEST(CollectivesTest, RootInvariance) {
  for (CollectiveKind kind : kAllKinds) {
    if (!is_rooted(kind)) continue;
    for (int root = 0; root < 4; ++root) {
      auto req = request(kind, 4, 777, 4, root);
      auto sends = random_sends(req, 11 + root);
      auto bufs = run_all(req, arena(), sends);
      const VerifyResult res = verify(req, bufs);
      EXPECT_TRUE(res.ok) << to_string(kind) << " root " << root << ": " << res.message;
    }
  }
}

TEST(CollectivesTest, FloatReductionsAreDeterministicAndExact) {
  for (ElemType elem : {ElemType::F32, ElemType::F64}) {
    for (CollectiveKind kind : {CollectiveKind::AllReduce, CollectiveKind::ReduceScatter,
                                CollectiveKind::Reduce}) {
      auto req = request(kind, 6, 6 * 500, 4, 3, elem);
      auto sends = random_sends(req, 5);
      auto a = run_all(req, arena(), sends);
      auto b = run_all(req, arena(), sends);
      for (int r = 0; r < 6; ++r) EXPECT_EQ(a[r].recv, b[r].recv);
      // The documented order is the oracle's order, so results are exact.
      const VerifyResult res = verify(req, a, 0);
      EXPECT_TRUE(res.ok) << res.message;
    }
  }
}

TEST(CollectivesTest, MaxAndMinReductions) {
  for (ReduceOp op : {ReduceOp::Max, ReduceOp::Min}) {
    for (ElemType elem : {ElemType::I32, ElemType::I64, ElemType::F64}) {
      auto req = request(CollectiveKind::AllReduce, 3, 300, 2, 0, elem, op);
      auto sends = random_sends(req, 3);
      auto bufs = run_all(req, arena(), sends);
      const VerifyResult res = verify(req, bufs);
      EXPECT_TRUE(res.ok) << res.message;
    }
  }
}

TEST(CollectivesTest, SelfCommunicatorIsIdentity) {
  for (CollectiveKind kind : kAllKinds) {
    auto req = request(kind, 1, 123, 4);
    auto sends = random_sends(req, 17);
    auto bufs = run_all(req, arena(), sends);
    EXPECT_EQ(bufs[0].recv, sends[0]) << to_string(kind);
  }
}

TEST(CollectivesTest, AllPlacementModesAgree) {
  for (CollectiveKind kind : kAllKinds) {
    for (PlacementMode mode : {PlacementMode::Aggregate, PlacementMode::Naive}) {
      auto req = request(kind, 4, 4 * 300, 4, 1);
      auto sends = random_sends(req, 23);
      auto bufs = run_all(req, arena(), sends, options(false, mode));
      const VerifyResult res = verify(req, bufs);
      EXPECT_TRUE(res.ok) << to_string(kind) << "/" << to_string(mode) << ": " << res.message;
    }
  }
}

TEST(CollectivesTest, DegenerateGeometryStillCorrect) {
  for (CollectiveKind kind : {CollectiveKind::AllReduce, CollectiveKind::AllToAll}) {
    auto req = request(kind, 4, 4 * 100, 4);
    auto sends = random_sends(req, 29);
    auto bufs = run_all(req, arena(6), sends);
    EXPECT_TRUE(verify(req, bufs).ok);
  }
}

TEST(CollectivesTest, RepeatedCallsReuseThePool) {
  PoolHandle pool = arena();
  const int p = 3;
  const int iterations = 25;
  std::vector<int> failures(p, 0);
  run_ranks(p, [&](int r) {
    Communicator comm(pool, r, p, options());
    for (int it = 0; it < iterations; ++it) {
      std::vector<std::int64_t> send(50, r + it * 10);
      std::vector<std::int64_t> recv(50);
      comm.all_reduce<std::int64_t>(send, recv, ReduceOp::Sum, 1 + it % 4);
      const std::int64_t want = 0 + 1 + 2 + 3 * it * 10;
      if (std::any_of(recv.begin(), recv.end(), [&](auto v) { return v != want; })) ++failures[r];
      std::vector<std::int32_t> g_send(10, r * 1000 + it);
      std::vector<std::int32_t> g_recv(30);
      comm.all_gather<std::int32_t>(g_send, g_recv, 2);
      for (int q = 0; q < p; ++q) {
        if (g_recv[q * 10] != q * 1000 + it) ++failures[r];
      }
    }
    EXPECT_EQ(comm.epoch(), 1u + 2 * iterations);
  });
  for (int f : failures) EXPECT_EQ(f, 0);
}

TEST(CollectivesTest, TypedHelpers) {
  PoolHandle pool = arena();
  run_ranks(2, [&](int r) {
    Communicator comm(pool, r, 2, options());
    std::vector<float> send(4, r == 0 ? 1.5f : 2.5f);
    std::vector<float> recv(4);
    comm.broadcast<float>(send, recv, 1);
    EXPECT_EQ(recv[0], 2.5f);
    std::vector<float> scatter_send(r == 0 ? 8 : 0);
    std::iota(scatter_send.begin(), scatter_send.end(), 0.0f);
    comm.scatter<float>(scatter_send, recv, 0);
    EXPECT_EQ(recv[0], r * 4.0f);
    std::vector<double> gather_recv(r == 1 ? 8 : 0);
    std::vector<double> gather_send(4, r + 0.25);
    comm.gather<double>(gather_send, gather_recv, 1);
    if (r == 1) EXPECT_EQ(gather_recv[4], 1.25);
    std::vector<std::int32_t> red_send(4, 5);
    std::vector<std::int32_t> red_recv(r == 0 ? 4 : 0);
    comm.reduce<std::int32_t>(red_send, red_recv, ReduceOp::Sum, 0);
    if (r == 0) EXPECT_EQ(red_recv[3], 10);
    std::vector<std::int32_t> rs_recv(2);
    comm.reduce_scatter<std::int32_t>(red_send, rs_recv, ReduceOp::Max);
    EXPECT_EQ(rs_recv[1], 5);
    std::vector<std::int32_t> a2a_send = {r, r, r + 10, r + 10};
    std::vector<std::int32_t> a2a_recv(4);
    comm.all_to_all<std::int32_t>(a2a_send, a2a_recv);
    EXPECT_EQ(a2a_recv, (std::vector<std::int32_t>{r * 10, r * 10, 1 + r * 10, 1 + r * 10}));
  });
}

// --- Request validation -----------------------------------------------------

TEST(CollectivesTest, RejectsBadBuffers) {
  PoolHandle pool = arena();
  Communicator comm(pool, 0, 1, options());
  auto req = request(CollectiveKind::AllGather, 1, 8);
  std::vector<std::byte> send(32);
  std::vector<std::byte> recv(16);
  EXPECT_THROW(comm.run(req, send, recv), RequestError);
  std::vector<std::byte> both(64);
  EXPECT_THROW(comm.run(req, std::span(both).first(32), std::span(both).subspan(16, 32)),
               RequestError);
  auto rs = request(CollectiveKind::ReduceScatter, 1, 8);
  rs.nranks = 3;
  EXPECT_THROW(rs.validate(), RequestError);
  auto other = request(CollectiveKind::AllGather, 2, 8);
  std::vector<std::byte> r2(64);
  EXPECT_THROW(comm.run(other, send, r2), RequestError);
}

TEST(CollectivesTest, MissingPeerTimesOut) {
  PoolHandle pool = arena();
  CommOptions opts = options();
  opts.spin.timeout = std::chrono::milliseconds(100);
  Communicator comm(pool, 0, 2, opts);
  std::vector<std::int32_t> send(16, 1);
  std::vector<std::int32_t> recv(16);
  EXPECT_THROW(comm.all_reduce<std::int32_t>(send, recv, ReduceOp::Sum), DoorbellTimeout);
}

// --- Trace properties ---------------------------------------------------------

TEST(CollectivesTraceTest, RingPrecedesMatchingWaitReturn) {
  for (CollectiveKind kind : kAllKinds) {
    auto req = request(kind, 4, 4 * 2048, 4, 2);
    auto sends = random_sends(req, 31);
    std::vector<std::vector<TraceEvent>> traces;
    run_all(req, arena(8), sends, options(true), &traces);

    std::map<std::uint64_t, TraceEvent> rings;
    for (const auto& t : traces) {
      for (const auto& ev : t) {
        if (ev.op != TraceOp::Ring) continue;
        ASSERT_TRUE(rings.emplace(ev.doorbell, ev).second) << "doorbell rung twice";
      }
    }
    const auto plans = build_all_plans(req, arena(8).config());
    std::size_t waits = 0;
    for (int r = 0; r < 4; ++r) {
      // Owner-exclusive ring: the ringing rank is the plan's producer.
      for (const auto& e : plans[r].publish.entries) {
        auto it = rings.find(e.doorbell_index);
        ASSERT_NE(it, rings.end());
        EXPECT_EQ(it->second.rank, e.producer);
      }
      for (const auto& ev : traces[r]) {
        if (ev.op != TraceOp::WaitEnd) continue;
        ++waits;
        auto it = rings.find(ev.doorbell);
        ASSERT_NE(it, rings.end());
        EXPECT_LT(it->second.t_ns, ev.t_ns) << to_string(kind);
      }
    }
    std::size_t planned = 0;
    for (const auto& p : plans) planned += p.retrieve.entries.size();
    EXPECT_EQ(waits, planned);
  }
}

TEST(CollectivesTraceTest, JsonLines) {
  PoolHandle pool = arena();
  Communicator comm(pool, 0, 1, options(true));
  std::vector<std::int32_t> send(8, 1);
  std::vector<std::int32_t> recv(8);
  comm.all_gather<std::int32_t>(send, recv);
  const std::string text = comm.trace_json_lines();
  EXPECT_NE(text.find("\"op\":\"ring\""), std::string::npos);
  EXPECT_NE(text.find("\"op\":\"barrier_end\""), std::string::npos);
  comm.clear_trace();
  EXPECT_TRUE(comm.trace().empty());
}

}  // namespace
}  // namespace poolcomm
