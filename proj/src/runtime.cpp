#include "slimsplit/runtime.hpp"

#include <algorithm>
#include <iostream>
#include <thread>

#include "slimsplit/codec.hpp"

namespace slimsplit {

// --- Timebase ----------------------------------------------------------------

Timebase Timebase::wall() {
  Timebase t;
  t.epoch_ = std::chrono::steady_clock::now();
  return t;
}

Timebase Timebase::simulated(std::shared_ptr<VirtualClock> clock) {
  if (!clock) throw std::invalid_argument("simulated timebase needs a clock");
  Timebase t;
  t.clock_ = std::move(clock);
  return t;
}

Micros Timebase::now() const {
  if (clock_) return clock_->now();
  return std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::steady_clock::now() - epoch_)
      .count();
}

Micros Timebase::charge(Micros measured, double modeled_ms) {
  if (!clock_) return measured;
  const Micros d = ms_to_us(modeled_ms);
  clock_->advance_by(d);
  return d;
}

// --- edge half ---------------------------------------------------------------

EdgeFrame pack_frame(const Tensor& z, int size, int bits) {
  require_rank3(z, "pack_frame");
  for (Index d : z.shape()) {
    if (d > 0xFFFF) throw CodecError("pack_frame: dimension " + std::to_string(d) + " exceeds u16");
  }
  const SymbolTensor zq = quantize(z, bits);
  EdgeFrame f;
  f.header.type = MsgType::data;
  f.header.s = static_cast<std::uint8_t>(size);
  f.header.b = static_cast<std::uint8_t>(bits);
  f.header.channels = static_cast<std::uint16_t>(z.channels());
  f.header.height = static_cast<std::uint16_t>(z.height());
  f.header.width = static_cast<std::uint16_t>(z.width());
  f.header.sigma = static_cast<float>(*zq.params.sigma);
  f.payload = pack_symbols(zq);
  f.header.payload_len = static_cast<std::uint32_t>(f.payload.size());
  return f;
}

EdgeFrame edge_pipeline(const EnsembleEncoder& encoder, const Tensor& x, ConfigPoint cfg) {
  return pack_frame(ensemble_forward(encoder, x, cfg.s), cfg.s, cfg.b);
}

// --- server half ---------------------------------------------------------------

const char* to_string(ComputeMode m) {
  return m == ComputeMode::full ? "full" : "codec_only";
}

namespace {

Tensor dequantize_frame(const Frame& frame) {
  const FrameHeader& h = frame.header;
  SymbolTensor zq = unpack_symbols(frame.payload, Shape{h.channels, h.height, h.width}, h.b);
  zq.params.sigma = static_cast<double>(h.sigma);
  zq.params.mode = SigmaMode::side_info;
  return dequantize<double>(zq);
}

std::vector<float> classify(const SplitModel& model, const Tensor& z) {
  const FeatureMaps maps = student_decode(model.reconstructor(), model.head(), z);
  const Eigen::VectorXd p = model.classifier().probabilities(maps);
  std::vector<float> out(static_cast<std::size_t>(p.size()));
  for (Eigen::Index i = 0; i < p.size(); ++i) out[static_cast<std::size_t>(i)] = static_cast<float>(p[i]);
  return out;
}

std::vector<float> summarize(const Tensor& z) {
  return {static_cast<float>(z.data().mean()), static_cast<float>(compute_sigma(z)),
          static_cast<float>(z.data().minCoeff()), static_cast<float>(z.data().maxCoeff())};
}

}  // namespace

ServerPipeline::ServerPipeline(std::shared_ptr<const SplitModel> model, ServerOptions options)
    : model_(std::move(model)), options_(std::move(options)) {
  if (!model_) throw std::invalid_argument("server pipeline needs a model");
}

std::vector<float> ServerPipeline::infer(const Frame& frame) const {
  const FrameHeader& h = frame.header;
  if (h.type != MsgType::data) throw ModelError("only DATA frames carry a bottleneck");
  if (h.s < 1 || h.s > model_->encoder().max_size()) {
    throw ModelError("size s=" + std::to_string(h.s) + " exceeds this model's N=" +
                     std::to_string(model_->encoder().max_size()));
  }
  Tensor z;
  try {
    z = dequantize_frame(frame);
  } catch (const std::exception& e) {
    throw ModelError(std::string("dequantize: ") + e.what());
  }
  if (options_.mode == ComputeMode::codec_only) return summarize(z);
  if (z.channels() != model_->reconstructor().in_channels()) {
    throw ModelError("bottleneck has " + std::to_string(z.channels()) + " channels, reconstructor expects " +
                     std::to_string(model_->reconstructor().in_channels()));
  }
  try {
    return classify(*model_, z);
  } catch (const std::exception& e) {
    throw ModelError(std::string("decode: ") + e.what());
  }
}

std::optional<double> ServerPipeline::modeled_decode_ms(ConfigPoint c) const {
  auto it = options_.decode_ms.find(c);
  if (it == options_.decode_ms.end()) return std::nullopt;
  return it->second;
}

std::vector<PerfEntry> ServerPipeline::perf_entries() const {
  std::vector<PerfEntry> out;
  for (const auto& [c, ms] : options_.decode_ms) {
    out.push_back({static_cast<std::uint8_t>(c.s), static_cast<std::uint8_t>(c.b),
                   static_cast<std::uint32_t>(ms_to_us(ms))});
  }
  return out;
}

std::map<ConfigPoint, double> measure_decode_ms(const SplitModel& model, Index z_height, Index z_width,
                                                int reps) {
  Rng rng(0xDEC0DE);
  Tensor z({model.reconstructor().in_channels(), z_height, z_width});
  for (Index i = 0; i < z.size(); ++i) z[i] = rng.normal();
  std::map<ConfigPoint, double> out;
  for (int b = 1; b <= 4; ++b) {
    EdgeFrame ef = pack_frame(z, 1, b);
    const Frame f{ef.header, ef.payload};
    Micros best = std::numeric_limits<Micros>::max();
    for (int r = 0; r < std::max(1, reps); ++r) {
      best = std::min(best, time_call([&] { classify(model, dequantize_frame(f)); }));
    }
    for (int s = 1; s <= model.encoder().max_size(); ++s) out[{s, b}] = us_to_ms(best);
  }
  return out;
}

std::vector<float> reference_inference(const SplitModel& model, const Tensor& x, ConfigPoint cfg) {
  const Tensor z = ensemble_forward(model.encoder(), x, cfg.s);
  return classify(model, quantize_roundtrip(z, cfg.b));
}

// --- server connection -----------------------------------------------------------

ServerConnection::ServerConnection(Transport& transport, const ServerPipeline& pipeline, Timebase time)
    : session_(transport, Role::server, pipeline.model().encoder().max_size()),
      pipeline_(pipeline),
      time_(std::move(time)) {}

void ServerConnection::start() {
  const auto entries = pipeline_.perf_entries();
  session_.send_perf_report(entries);
}

bool ServerConnection::step() {
  std::optional<Frame> f;
  try {
    f = session_.receive();
  } catch (const SessionError& e) {
    // The byte stream cannot be resynchronized; report and hang up.
    ResultMessage r;
    r.seq = session_.last_received_seq() ? *session_.last_received_seq() + 1 : 0;
    r.t_server_recv_us = r.t_decode_done_us = static_cast<std::uint64_t>(time_.now());
    try {
      session_.send_result(r, ResultStatus::malformed_frame);
    } catch (const std::exception&) {
    }
    session_.close();
    return false;
  }
  if (!f) return false;
  if (f->header.type == MsgType::perf_report) {
    if (f->payload.empty()) start();
    return true;
  }
  ResultMessage r;
  r.seq = f->header.seq;
  r.t_server_recv_us = static_cast<std::uint64_t>(time_.now());
  const ConfigPoint cfg{f->header.s, f->header.b};
  std::vector<float> result;
  Micros measured = 0;
  try {
    measured = time_call([&] { result = pipeline_.infer(*f); });
  } catch (const ModelError&) {
    r.t_decode_done_us = static_cast<std::uint64_t>(time_.now());
    session_.send_result(r, ResultStatus::model_error);
    return true;
  }
  const double modeled = pipeline_.modeled_decode_ms(cfg).value_or(us_to_ms(measured));
  const Micros spent = time_.charge(measured, modeled);
  r.decoder_time_us = static_cast<std::uint32_t>(std::max<Micros>(spent, 1));
  r.t_decode_done_us = static_cast<std::uint64_t>(time_.now());
  r.result = std::move(result);
  session_.send_result(r);
  ++served_;
  return true;
}

void ServerConnection::run() {
  start();
  while (step()) {
  }
}

void serve(TcpListener& listener, const ServerPipeline& pipeline, std::optional<std::size_t> max_sessions,
           const std::function<bool()>& stop) {
  std::vector<std::thread> workers;
  std::size_t accepted = 0;
  while ((!max_sessions || accepted < *max_sessions) && !(stop && stop())) {
    std::unique_ptr<Transport> conn;
    try {
      conn = listener.accept();
    } catch (const TransportError& e) {
      if (stop && stop()) break;
      throw;
    }
    ++accepted;
    workers.emplace_back([&pipeline, t = std::move(conn)]() mutable {
      try {
        ServerConnection c(*t, pipeline, Timebase::wall());
        c.run();
      } catch (const std::exception& e) {
        std::cerr << "session ended: " << e.what() << '\n';
      }
      t->close();
    });
  }
  for (std::thread& w : workers) w.join();
}

// --- edge control loop -------------------------------------------------------------

std::string breakdown_csv_header() {
  return "seq,s,b,metric,encode_ms,quantize_pack_ms,uplink_ms,decode_ms,downlink_ms,total_ms,deadline_ms,"
         "missed";
}

std::string to_csv(const RttBreakdown& r) {
  char buf[320];
  std::snprintf(buf, sizeof buf, "%u,%d,%d,%.6g,%.3f,%.3f,%.3f,%.3f,%.3f,%.3f,%.3f,%d", r.seq, r.cfg.s,
                r.cfg.b, r.metric, r.encode_ms, r.quantize_pack_ms, r.uplink_ms, r.decode_ms, r.downlink_ms,
                r.total_ms, r.deadline_ms, r.missed() ? 1 : 0);
  return buf;
}

namespace {

void apply_perf_report(Controller& controller, const Frame& f) {
  for (const PerfEntry& e : decode_perf_report(f.payload)) {
    const ConfigPoint c{e.s, e.b};
    if (controller.table().contains(c)) controller.table().set_decode_ms(c, e.decoder_time_us / 1000.0);
  }
}

// A blocking send shorter than this reveals nothing about the link rate.
constexpr double kMinBlockingSendMs = 0.05;

}  // namespace

void await_perf_report(EdgeContext& ctx, Controller& controller) {
  for (;;) {
    std::optional<Frame> f = ctx.session.receive();
    if (!f) throw SessionError("session: closed before PERF_REPORT", ctx.session.last_received_seq());
    if (f->header.type == MsgType::perf_report) {
      apply_perf_report(controller, *f);
      return;
    }
  }
}

LoopResult control_loop(EdgeContext& ctx, Controller& controller, std::size_t frames,
                        const std::function<void(const FrameRecord&)>& sink) {
  LoopResult out;
  const ControllerConfig& cc = controller.config();
  std::uint32_t seq = 0;
  for (std::size_t k = 0; k < frames; ++k, ++seq) {
    try {
      FrameRecord rec;
      rec.decision = controller.decide(seq);
      const ConfigPoint cfg = rec.decision.cfg;
      const PerfRow& row = controller.table().at(cfg);

      const Micros t_capture = ctx.time.now();
      const Tensor x = ctx.frames(seq);
      Tensor z;
      const Micros enc_us =
          ctx.time.charge(time_call([&] { z = ensemble_forward(ctx.encoder, x, cfg.s); }), row.encode_ms);
      EdgeFrame ef;
      // Quantize/pack cost is part of encode_ms in the table.
      const Micros qp_us = ctx.time.charge(time_call([&] { ef = pack_frame(z, cfg.s, cfg.b); }), 0.0);
      ef.header.t_capture_us = static_cast<std::uint64_t>(t_capture);
      ef.header.t_encode_done_us = static_cast<std::uint64_t>(ctx.time.now());

      const Micros t_send0 = ctx.time.now();
      const std::uint32_t sent = ctx.session.send(ef.header, ef.payload);
      const Micros t_send1 = ctx.time.now();
      if (sent != seq) throw SessionError("session: DATA seq out of step", ctx.session.last_received_seq());
      if (ctx.pump) ctx.pump();

      std::optional<ResultMessage> result;
      while (!result) {
        std::optional<Frame> f = ctx.session.receive();
        if (!f) throw SessionError("session: server closed awaiting RESULT", ctx.session.last_received_seq());
        if (f->header.type == MsgType::perf_report) {
          apply_perf_report(controller, *f);
          continue;
        }
        ResultMessage m = decode_result(f->payload);
        rec.status = static_cast<ResultStatus>(f->header.b);
        if (m.seq != seq) {
          throw SessionError("session: RESULT for seq " + std::to_string(m.seq) + " while awaiting " +
                                 std::to_string(seq),
                             ctx.session.last_received_seq());
        }
        result = std::move(m);
      }
      const Micros t_result = ctx.time.now();

      rec.t_capture = t_capture;
      RttBreakdown& br = rec.breakdown;
      br.seq = seq;
      br.cfg = cfg;
      br.metric = row.metric;
      br.deadline_ms = cc.deadline_ms;
      br.encode_ms = us_to_ms(enc_us);
      br.quantize_pack_ms = us_to_ms(qp_us);
      br.decode_ms = result->decoder_time_us / 1000.0;
      br.total_ms = us_to_ms(t_result - t_capture);
      const double network_ms = br.total_ms - br.encode_ms - br.quantize_pack_ms - br.decode_ms;

      const double up_bytes = static_cast<double>(kHeaderSize + ef.payload.size());
      const double send_ms = us_to_ms(t_send1 - t_send0);
      ChannelObservation obs;
      if (send_ms > kMinBlockingSendMs) {
        const double result_ser = static_cast<double>(cc.result_bytes) * send_ms / up_bytes;
        obs = {up_bytes, send_ms, std::max(0.0, (network_ms - send_ms - result_ser) / 2.0)};
      } else {
        obs = {up_bytes + static_cast<double>(cc.result_bytes), std::max(network_ms, 1e-3), 0.0};
      }

      if (ctx.time.is_simulated()) {
        // One virtual clock on both sides: the server's stamps split the
        // network time exactly.
        br.uplink_ms = us_to_ms(static_cast<Micros>(result->t_server_recv_us) -
                                static_cast<Micros>(ef.header.t_encode_done_us));
      } else {
        br.uplink_ms = std::min(network_ms, send_ms + obs.delay_ms);
      }
      br.downlink_ms = network_ms - br.uplink_ms;

      controller.observe(obs);
      rec.decision.measured_rtt_ms = br.total_ms;
      rec.result = std::move(result->result);
      if (sink) sink(rec);
      out.records.push_back(std::move(rec));
    } catch (const SessionError& e) {
      out.error = e.what();
      break;
    } catch (const TransportError& e) {
      out.error = e.what();
      break;
    }
  }
  return out;
}

}  // namespace slimsplit
