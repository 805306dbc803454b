#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <thread>

#include "equivalence.hpp"
#include "slimsplit/codec.hpp"
#include "slimsplit/runtime.hpp"

using namespace slimsplit;
using slimsplit::testing::small_device_table;

namespace {

std::shared_ptr<const SplitModel> shared_model() {
  static const auto model = std::make_shared<const SplitModel>(ModelConfig{4, 5, 4});
  return model;
}

constexpr Index kImage = 32;
constexpr Index kNumel = 6 * 8 * 8;
// RESULT frame with four class probabilities.
constexpr std::size_t kResultBytes = kHeaderSize + 26 + 4 * 4;

std::map<ConfigPoint, double> decode_map(const PerfTable& t) {
  std::map<ConfigPoint, double> out;
  for (const PerfRow& r : t.rows()) out[r.cfg] = r.decode_ms;
  return out;
}

struct SimOutcome {
  LoopResult loop;
  std::vector<SimulatedLink::Delivery> uplink;
};

SimOutcome simulate(const PerfTable& table, ChannelModel up, ChannelModel down, double deadline_ms,
                    std::size_t frames, double penalty_ms = 0.0) {
  const auto model = shared_model();
  auto clock = std::make_shared<VirtualClock>();
  SimulatedLink link(std::move(up), std::move(down), clock);
  ServerPipeline pipeline(model, ServerOptions{ComputeMode::full, decode_map(table)});
  ServerConnection server(link.b(), pipeline, Timebase::simulated(clock));
  Session session(link.a(), Role::edge, 4);
  ControllerConfig cc;
  cc.deadline_ms = deadline_ms;
  cc.alpha = 0.5;
  cc.switch_penalty_ms = penalty_ms;
  cc.header_bytes = kHeaderSize;
  cc.result_bytes = kResultBytes;
  Controller controller(table, cc);
  EdgeContext ctx{session, model->encoder(), Timebase::simulated(clock),
                  [](std::uint32_t k) { return generate_sample(9, Split::validation, k, kImage).image; },
                  [&] { server.step(); }};
  server.start();
  await_perf_report(ctx, controller);
  SimOutcome out{control_loop(ctx, controller, frames), {}};
  out.uplink = link.uplink_log();
  return out;
}

std::string decision_log(const LoopResult& r) {
  std::ostringstream os;
  for (const FrameRecord& f : r.records) os << to_jsonl(f.decision) << '\n';
  return os.str();
}

// Edge-side harness over a simulated link where the test drives the server.
struct Manual {
  std::shared_ptr<VirtualClock> clock = std::make_shared<VirtualClock>();
  SimulatedLink link{ChannelModel::constant(1e6, 1.0), ChannelModel::constant(1e6, 1.0), clock};
  ServerPipeline pipeline;
  ServerConnection server;
  Session edge{link.a(), Role::edge};

  explicit Manual(std::shared_ptr<const SplitModel> model, ServerOptions opts = {})
      : pipeline(std::move(model), std::move(opts)), server(link.b(), pipeline, Timebase::simulated(clock)) {
    server.start();
    auto f = edge.receive();
    EXPECT_TRUE(f && f->header.type == MsgType::perf_report);
  }
};

}  // namespace

TEST(EdgePipeline, PayloadFollowsSizeLaw) {
  const auto model = shared_model();
  const Tensor x = generate_sample(1, Split::validation, 0, 64).image;
  const EdgeFrame one = edge_pipeline(model->encoder(), x, {1, 1});
  EXPECT_EQ(one.payload.size(), 192u);
  EXPECT_EQ(one.header.payload_len, 192u);
  EXPECT_EQ(one.header.channels, 6);
  EXPECT_EQ(one.header.height, 16);
  EXPECT_EQ(one.header.width, 16);
  EXPECT_GT(one.header.sigma, 0.0f);
  for (int s = 1; s <= 4; ++s) {
    const EdgeFrame f = edge_pipeline(model->encoder(), x, {s, 4});
    EXPECT_EQ(f.payload.size(), 768u);
    EXPECT_EQ(f.header.s, s);
  }
}

TEST(ServerPipeline, MatchesReferenceInference) {
  const auto model = shared_model();
  const ServerPipeline pipeline(model, ServerOptions{});
  for (int k = 0; k < 4; ++k) {
    const Tensor x = generate_sample(2, Split::validation, k, kImage).image;
    const ConfigPoint cfg{1 + k, 4 - k};
    const EdgeFrame ef = edge_pipeline(model->encoder(), x, cfg);
    const auto got = pipeline.infer(Frame{ef.header, ef.payload});
    ASSERT_EQ(got.size(), 4u);
    EXPECT_NEAR(std::accumulate(got.begin(), got.end(), 0.0), 1.0, 1e-5);
    EXPECT_EQ(got, reference_inference(*model, x, cfg));
    EXPECT_EQ(pipeline.infer(Frame{ef.header, ef.payload}), got);
  }
}

TEST(ServerPipeline, CodecOnlySummarizesBottleneck) {
  const auto model = shared_model();
  const ServerPipeline pipeline(model, ServerOptions{ComputeMode::codec_only, {}});
  const Tensor x = generate_sample(2, Split::validation, 0, kImage).image;
  const EdgeFrame ef = edge_pipeline(model->encoder(), x, {2, 3});
  const auto v = pipeline.infer(Frame{ef.header, ef.payload});
  ASSERT_EQ(v.size(), 4u);
  EXPECT_LE(v[2], v[0]);
  EXPECT_LE(v[0], v[3]);
  EXPECT_GT(v[1], 0.0f);
}

TEST(ServerPipeline, RejectsFramesTheModelCannotDecode) {
  const auto small = std::make_shared<const SplitModel>(ModelConfig{2, 3, 4});
  const ServerPipeline pipeline(small, ServerOptions{});
  const Tensor x = generate_sample(2, Split::validation, 0, kImage).image;
  EdgeFrame ef = edge_pipeline(shared_model()->encoder(), x, {4, 2});
  EXPECT_THROW(pipeline.infer(Frame{ef.header, ef.payload}), ModelError);
  ef.header.s = 1;
  ef.header.type = MsgType::result;
  EXPECT_THROW(pipeline.infer(Frame{ef.header, ef.payload}), ModelError);
  EXPECT_THROW(ServerPipeline(nullptr, ServerOptions{}), std::invalid_argument);
}

TEST(ServerPipeline, PerfEntriesFollowDecodeMap) {
  const ServerPipeline pipeline(shared_model(), ServerOptions{ComputeMode::full, decode_map(small_device_table(kNumel, 20, 7.5))});
  const auto entries = pipeline.perf_entries();
  ASSERT_EQ(entries.size(), 16u);
  for (const PerfEntry& e : entries) EXPECT_EQ(e.decoder_time_us, 7500u);
  EXPECT_EQ(pipeline.modeled_decode_ms({3, 2}), 7.5);
  EXPECT_EQ(ServerPipeline(shared_model(), {}).modeled_decode_ms({1, 1}), std::nullopt);
}

TEST(ServerConnection, AnswersWithDecoderTime) {
  Manual m(shared_model(), ServerOptions{ComputeMode::full, {{{2, 2}, 12.0}}});
  const Tensor x = generate_sample(4, Split::validation, 0, kImage).image;
  const EdgeFrame ef = edge_pipeline(shared_model()->encoder(), x, {2, 2});
  m.edge.send(ef.header, ef.payload);
  ASSERT_TRUE(m.server.step());
  auto f = m.edge.receive();
  ASSERT_TRUE(f);
  EXPECT_EQ(static_cast<ResultStatus>(f->header.b), ResultStatus::ok);
  const ResultMessage r = decode_result(f->payload);
  EXPECT_EQ(r.decoder_time_us, 12000u);
  EXPECT_EQ(r.t_decode_done_us - r.t_server_recv_us, 12000u);
  EXPECT_EQ(r.result, reference_inference(*shared_model(), x, {2, 2}));
  EXPECT_EQ(m.server.frames_served(), 1u);
}

TEST(ServerConnection, MeasuredDecoderTimeIsPositive) {
  Manual m(shared_model());
  const EdgeFrame ef = edge_pipeline(shared_model()->encoder(), generate_sample(4, Split::validation, 1, kImage).image, {1, 1});
  m.edge.send(ef.header, ef.payload);
  ASSERT_TRUE(m.server.step());
  EXPECT_GT(decode_result(m.edge.receive()->payload).decoder_time_us, 0u);
}

TEST(ServerConnection, ModelErrorKeepsSessionOpen) {
  Manual m(std::make_shared<const SplitModel>(ModelConfig{2, 3, 4}));
  const Tensor x = generate_sample(4, Split::validation, 0, kImage).image;
  const EdgeFrame bad = edge_pipeline(shared_model()->encoder(), x, {4, 1});
  m.edge.send(bad.header, bad.payload);
  ASSERT_TRUE(m.server.step());
  auto f = m.edge.receive();
  ASSERT_TRUE(f);
  EXPECT_EQ(static_cast<ResultStatus>(f->header.b), ResultStatus::model_error);
  EXPECT_TRUE(decode_result(f->payload).result.empty());

  const EdgeFrame good = edge_pipeline(shared_model()->encoder(), x, {1, 1});
  m.edge.send(good.header, good.payload);
  ASSERT_TRUE(m.server.step());
  EXPECT_EQ(static_cast<ResultStatus>(m.edge.receive()->header.b), ResultStatus::ok);
}

TEST(ServerConnection, MalformedStreamIsReportedThenDropped) {
  Manual m(shared_model());
  std::vector<std::uint8_t> junk(kHeaderSize, 0x5A);
  m.link.a().write_all(junk);
  EXPECT_FALSE(m.server.step());
  auto f = m.edge.receive();
  ASSERT_TRUE(f);
  EXPECT_EQ(f->header.type, MsgType::result);
  EXPECT_EQ(static_cast<ResultStatus>(f->header.b), ResultStatus::malformed_frame);
  EXPECT_EQ(decode_result(f->payload).seq, 0u);
}

TEST(ServerConnection, EmptyPerfReportIsARequest) {
  Manual m(shared_model(), ServerOptions{ComputeMode::full, {{{1, 1}, 3.0}}});
  m.edge.send_perf_report({});
  ASSERT_TRUE(m.server.step());
  auto f = m.edge.receive();
  ASSERT_TRUE(f);
  ASSERT_EQ(f->header.type, MsgType::perf_report);
  EXPECT_EQ(decode_perf_report(f->payload), (std::vector<PerfEntry>{{1, 1, 3000}}));
}

TEST(Timebase, ChargeUsesModelOnVirtualClock) {
  auto clock = std::make_shared<VirtualClock>();
  Timebase sim = Timebase::simulated(clock);
  EXPECT_EQ(sim.charge(999, 2.5), 2500);
  EXPECT_EQ(clock->now(), 2500);
  EXPECT_EQ(sim.now(), 2500);
  Timebase wall = Timebase::wall();
  EXPECT_EQ(wall.charge(777, 2.5), 777);
  EXPECT_FALSE(wall.is_simulated());
  EXPECT_THROW(Timebase::simulated(nullptr), std::invalid_argument);
}

TEST(ControlLoop, PerfReportUpdatesDecodeTimes) {
  const PerfTable table = small_device_table(kNumel, 20, 10);
  const auto model = shared_model();
  auto clock = std::make_shared<VirtualClock>();
  SimulatedLink link(ChannelModel::constant(1e5, 1), ChannelModel::constant(1e5, 1), clock);
  ServerPipeline pipeline(model, ServerOptions{ComputeMode::full, {{{1, 1}, 7.0}}});
  ServerConnection server(link.b(), pipeline, Timebase::simulated(clock));
  Session session(link.a(), Role::edge, 4);
  Controller controller(table, ControllerConfig{});
  EdgeContext ctx{session, model->encoder(), Timebase::simulated(clock), {}, {}};
  server.start();
  await_perf_report(ctx, controller);
  EXPECT_EQ(controller.table().at({1, 1}).decode_ms, 7.0);
  EXPECT_EQ(controller.table().at({1, 2}).decode_ms, 10.0);
}

// Every record's RTT equals encode + decode + both transfers computed from
// the channel parameters directly.
TEST(ControlLoop, RttAccountingIdentity) {
  const double rate = 4000.0, delay = 5.0;
  const PerfTable table = small_device_table(kNumel);
  const SimOutcome out = simulate(table, ChannelModel::constant(rate, delay), ChannelModel::constant(rate, delay),
                                  std::numeric_limits<double>::infinity(), 12);
  ASSERT_FALSE(out.loop.error);
  ASSERT_EQ(out.loop.records.size(), 12u);
  for (const FrameRecord& r : out.loop.records) {
    const PerfRow& row = table.at(r.breakdown.cfg);
    const double up = delay + 1000.0 * static_cast<double>(kHeaderSize + row.payload_bytes) / rate;
    const double down = delay + 1000.0 * static_cast<double>(kResultBytes) / rate;
    EXPECT_NEAR(r.breakdown.total_ms, row.encode_ms + row.decode_ms + up + down, 1.0);
    EXPECT_NEAR(r.breakdown.uplink_ms, up, 1.0);
    EXPECT_NEAR(r.breakdown.downlink_ms, down, 1.0);
    EXPECT_NEAR(r.breakdown.component_sum(), r.breakdown.total_ms, 1.0);
    EXPECT_EQ(r.status, ResultStatus::ok);
    EXPECT_EQ(r.result.size(), 4u);
  }
}

TEST(ControlLoop, UnboundedDeadlinePicksLargestConfig) {
  const SimOutcome out = simulate(small_device_table(kNumel), ChannelModel::constant(4000, 5),
                                  ChannelModel::constant(4000, 5), std::numeric_limits<double>::infinity(), 5);
  for (const FrameRecord& r : out.loop.records) EXPECT_EQ(r.decision.cfg, (ConfigPoint{4, 4}));
}

TEST(ControlLoop, ConstantChannelDoesNotOscillate) {
  const SimOutcome out = simulate(small_device_table(kNumel), ChannelModel::constant(1600, 5),
                                  ChannelModel::constant(1600, 5), 200.0, 50);
  ASSERT_EQ(out.loop.records.size(), 50u);
  const ConfigPoint settled = out.loop.records[3].decision.cfg;
  for (std::size_t k = 3; k < 50; ++k) {
    EXPECT_EQ(out.loop.records[k].decision.cfg, settled) << "frame " << k;
    EXPECT_FALSE(out.loop.records[k].breakdown.missed()) << "frame " << k;
  }
}

// (4,4) fits 200 ms at 4 kB/s; at 1.6 kB/s only (3,1) and below do.
TEST(ControlLoop, RateStepTriggersSwitchWithinThreeFrames) {
  const std::vector<RateBreakpoint> trace = {{0, 4000}, {3000, 1600}};
  const SimOutcome out = simulate(small_device_table(kNumel), ChannelModel::trace(trace, 5),
                                  ChannelModel::trace(trace, 5), 200.0, 40);
  ASSERT_FALSE(out.loop.error);
  const auto& rec = out.loop.records;
  std::size_t step = 0;
  while (step < out.uplink.size() && out.uplink[step].send_start < 3000000) ++step;
  ASSERT_GT(step, 4u);
  ASSERT_LT(step + 10, rec.size());
  EXPECT_EQ(rec[step - 1].decision.cfg, (ConfigPoint{4, 4}));
  std::size_t switched = step;
  while (switched < rec.size() && rec[switched].decision.cfg == rec[step - 1].decision.cfg) ++switched;
  EXPECT_LE(switched - step, 3u);
  EXPECT_EQ(rec.back().decision.cfg, (ConfigPoint{3, 1}));
  // At alpha 0.5 the rate estimate halves its error every frame, so a few
  // frames right after the step may still miss.
  for (std::size_t k = switched + 6; k < rec.size(); ++k) EXPECT_FALSE(rec[k].breakdown.missed()) << "frame " << k;
}

TEST(ControlLoop, DecisionLogIsReproducible) {
  const std::vector<RateBreakpoint> trace = {{0, 4000}, {2000, 2500}, {4000, 1600}};
  auto run = [&] {
    return decision_log(simulate(small_device_table(kNumel), ChannelModel::trace(trace, 5),
                                 ChannelModel::trace(trace, 5), 200.0, 30, 10.0)
                            .loop);
  };
  const std::string a = run();
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, run());
}

TEST(ControlLoop, LostSessionEndsWithError) {
  const auto model = shared_model();
  auto clock = std::make_shared<VirtualClock>();
  SimulatedLink link(ChannelModel::constant(1e5, 1), ChannelModel::constant(1e5, 1), clock);
  Session session(link.a(), Role::edge, 4);
  Controller controller(small_device_table(kNumel), ControllerConfig{});
  EdgeContext ctx{session, model->encoder(), Timebase::simulated(clock),
                  [](std::uint32_t k) { return generate_sample(1, Split::validation, k, kImage).image; },
                  [&] { link.b().close(); }};
  const LoopResult r = control_loop(ctx, controller, 3);
  EXPECT_TRUE(r.records.empty());
  ASSERT_TRUE(r.error);
}

TEST(Experiments, StaticGridIsMonotone) {
  StaticGridConfig c;
  c.model = shared_model();
  c.table = small_device_table(kNumel);
  c.frames_per_config = 2;
  c.rate_Bps = 4000;
  c.delay_ms = 5;
  const auto rows = run_static_grid(c);
  ASSERT_EQ(rows.size(), 16u);
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_LE(rows[i - 1].rtt_ms, rows[i].rtt_ms);
  std::map<ConfigPoint, double> rtt;
  for (const GridRow& r : rows) {
    rtt[r.cfg] = r.rtt_ms;
    EXPECT_EQ(r.frames, 2);
  }
  for (int s = 1; s <= 4; ++s) {
    for (int b = 1; b <= 4; ++b) {
      if (b > 1) {
        EXPECT_GT(rtt.at({s, b}), rtt.at({s, b - 1}));
      }
      if (s > 1) {
        EXPECT_GT(rtt.at({s, b}), rtt.at({s - 1, b}));
      }
    }
  }
}

TEST(Experiments, ReferenceTableMatchesDeviceProfile) {
  const PerfTable t = reference_device_table();
  ASSERT_EQ(t.rows().size(), 16u);
  EXPECT_EQ(t.at({1, 1}).payload_bytes, 6912u);
  EXPECT_EQ(t.at({4, 4}).payload_bytes, 27648u);
  EXPECT_NEAR(t.at({4, 1}).encode_ms, 6.0 + 4 * 74.17, 1e-12);
  EXPECT_EQ(t.at({1, 3}).metric, 32.0);
  EXPECT_EQ(ideal_link_reference().size(), 16u);
}

TEST(Experiments, DynamicWalkTradesQualityForRate) {
  DynamicConfig c;
  c.model = shared_model();
  c.image_size = kImage;
  c.frames = 80;
  c.walk = default_walk(3000.0);
  const LoopResult r = run_dynamic(c);
  ASSERT_FALSE(r.error);
  ASSERT_EQ(r.records.size(), 80u);
  EXPECT_GT(r.records[5].breakdown.metric, r.records.back().breakdown.metric);
  EXPECT_EQ(r.records.back().result.size(), 4u);  // codec_only summary
}

TEST(Experiments, DynamicRejectsTableLargerThanModel) {
  DynamicConfig c;
  c.model = std::make_shared<const SplitModel>(ModelConfig{2, 1, 4});
  EXPECT_THROW(run_dynamic(c), std::invalid_argument);
}

TEST(Equivalence, PipeTransportMatchesInProcess) {
  auto [edge, server] = make_pipe_pair(7);
  const auto rep = slimsplit::testing::networked_equivalence(shared_model(), *edge, *server, 2, kImage, 11);
  EXPECT_EQ(rep.frames, 32u);
  EXPECT_LE(rep.max_abs_diff, 1e-9);
}

TEST(Equivalence, TcpLoopbackMatchesInProcess) {
  TcpListener listener(0);
  std::unique_ptr<Transport> server;
  std::thread acceptor([&] { server = listener.accept(); });
  auto edge = tcp_connect("127.0.0.1", listener.port());
  acceptor.join();
  const auto rep = slimsplit::testing::networked_equivalence(shared_model(), *edge, *server, 1, kImage, 12);
  EXPECT_EQ(rep.frames, 16u);
  EXPECT_LE(rep.max_abs_diff, 1e-9);
}

TEST(Serve, ConcurrentSessionsAreIsolated) {
  const auto model = shared_model();
  const ServerPipeline pipeline(model, ServerOptions{});
  TcpListener listener(0);
  std::thread server([&] { serve(listener, pipeline, 2); });
  std::vector<std::vector<float>> got(2);
  std::vector<std::thread> clients;
  for (int c = 0; c < 2; ++c) {
    clients.emplace_back([&, c] {
      auto t = tcp_connect("127.0.0.1", listener.port());
      Session s(*t, Role::edge, 4);
      s.receive();  // PERF_REPORT
      const Tensor x = generate_sample(20, Split::validation, c, kImage).image;
      const EdgeFrame ef = edge_pipeline(model->encoder(), x, {c + 1, c + 2});
      s.send(ef.header, ef.payload);
      got[static_cast<std::size_t>(c)] = decode_result(s.receive()->payload).result;
      t->close();
    });
  }
  for (auto& t : clients) t.join();
  server.join();
  for (int c = 0; c < 2; ++c) {
    const Tensor x = generate_sample(20, Split::validation, c, kImage).image;
    EXPECT_EQ(got[static_cast<std::size_t>(c)], reference_inference(*model, x, {c + 1, c + 2}));
  }
}
