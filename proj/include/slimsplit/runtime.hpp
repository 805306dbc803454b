#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "slimsplit/controller.hpp"
#include "slimsplit/model.hpp"
#include "slimsplit/netsim.hpp"
#include "slimsplit/protocol.hpp"
#include "slimsplit/training.hpp"

namespace slimsplit {

/// The decoder side could not process a well-formed frame.
class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/**
 * Source of pipeline timestamps. On the wall clock, compute intervals are
 * whatever they measured. On a virtual clock they take their modeled
 * duration and the clock advances by it, so runs are reproducible.
 */
class Timebase {
 public:
  static Timebase wall();
  static Timebase simulated(std::shared_ptr<VirtualClock> clock);

  bool is_simulated() const { return clock_ != nullptr; }
  Micros now() const;
  /// Charges one compute interval and returns its duration.
  Micros charge(Micros measured, double modeled_ms);

 private:
  std::shared_ptr<VirtualClock> clock_;
  std::chrono::steady_clock::time_point epoch_;
};

/// Runs `fn` and returns its wall duration.
template <class Fn>
Micros time_call(Fn&& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  fn();
  return std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::steady_clock::now() - t0)
      .count();
}

// ---------------------------------------------------------------------------
// The two halves of the split pipeline.

struct EdgeFrame {
  FrameHeader header;  // DATA; seq and timestamps are filled in by the caller
  std::vector<std::uint8_t> payload;
};

/// Q, then packing: z at b bits as a DATA frame body.
EdgeFrame pack_frame(const Tensor& z, int size, int bits);

/// f then Q: encode x at size s and quantize to b bits.
EdgeFrame edge_pipeline(const EnsembleEncoder& encoder, const Tensor& x, ConfigPoint cfg);

/// What the server computes after dequantizing.
enum class ComputeMode {
  full,       // reconstructor, student head and classifier: class probabilities
  codec_only  // dequantize only; returns mean, sigma, min, max of z~
};

const char* to_string(ComputeMode m);

struct ServerOptions {
  ComputeMode mode = ComputeMode::full;
  /// Decoder time per config. Required for codec_only on a virtual clock;
  /// otherwise measured times are reported when absent.
  std::map<ConfigPoint, double> decode_ms;
};

/// Q^-1 then g: frame in, result values out. Read-only and shareable.
class ServerPipeline {
 public:
  ServerPipeline(std::shared_ptr<const SplitModel> model, ServerOptions options);

  /// Throws ModelError when the frame cannot be decoded by this model.
  std::vector<float> infer(const Frame& frame) const;

  const ServerOptions& options() const { return options_; }
  const SplitModel& model() const { return *model_; }
  std::optional<double> modeled_decode_ms(ConfigPoint c) const;
  /// Decoder time per config for PERF_REPORT, in configuration order.
  std::vector<PerfEntry> perf_entries() const;

 private:
  std::shared_ptr<const SplitModel> model_;
  ServerOptions options_;
};

/// Measures the full decode path per b on a synthetic z of the given spatial
/// size (best of `reps`). Decoder work does not depend on s, so every s of a
/// given b reports the same time.
std::map<ConfigPoint, double> measure_decode_ms(const SplitModel& model, Index z_height,
                                                Index z_width, int reps);

/// g o Q^-1 o Q o f in one process, sigma rounded as the wire rounds it. The
/// networked pipeline must agree with this bit for bit.
std::vector<float> reference_inference(const SplitModel& model, const Tensor& x, ConfigPoint cfg);

/// One accepted connection on the server. Sends PERF_REPORT on start and
/// answers each DATA frame with a RESULT.
class ServerConnection {
 public:
  ServerConnection(Transport& transport, const ServerPipeline& pipeline, Timebase time);

  void start();
  /// Handles one incoming frame. False once the peer has closed, or after a
  /// malformed stream was answered and the connection dropped.
  bool step();
  void run();

  std::size_t frames_served() const { return served_; }

 private:
  Session session_;
  const ServerPipeline& pipeline_;
  Timebase time_;
  std::size_t served_ = 0;
};

/// Accepts connections until `stop` is set or `max_sessions` were served,
/// each on its own thread.
void serve(TcpListener& listener, const ServerPipeline& pipeline,
           std::optional<std::size_t> max_sessions = std::nullopt,
           const std::function<bool()>& stop = {});

// ---------------------------------------------------------------------------
// Edge control loop.

/// Per-frame round trip decomposition.
struct RttBreakdown {
  std::uint32_t seq = 0;
  ConfigPoint cfg;
  double metric = 0.0;
  double encode_ms = 0.0;
  double quantize_pack_ms = 0.0;
  double uplink_ms = 0.0;
  double decode_ms = 0.0;
  double downlink_ms = 0.0;
  double total_ms = 0.0;
  double deadline_ms = 0.0;

  bool missed() const { return total_ms > deadline_ms; }
  double component_sum() const { return encode_ms + quantize_pack_ms + uplink_ms + decode_ms + downlink_ms; }
};

std::string breakdown_csv_header();
std::string to_csv(const RttBreakdown& r);

struct FrameRecord {
  Decision decision;
  RttBreakdown breakdown;
  std::vector<float> result;
  ResultStatus status = ResultStatus::ok;
  Micros t_capture = 0;  // edge timebase
};

struct EdgeContext {
  Session& session;
  const EnsembleEncoder& encoder;
  Timebase time;
  std::function<Tensor(std::uint32_t)> frames;
  /// Gives a same-thread peer a chance to run after each send; empty when
  /// the server runs elsewhere.
  std::function<void()> pump;
};

struct LoopResult {
  std::vector<FrameRecord> records;
  std::optional<std::string> error;  // set when the session was lost
};

/// Waits for the server's PERF_REPORT and copies its decoder times into the
/// controller's table.
void await_perf_report(EdgeContext& ctx, Controller& controller);

/// select_config, send DATA, await RESULT, update the estimate; `frames`
/// times. Each record goes to `sink` as soon as it completes.
LoopResult control_loop(EdgeContext& ctx, Controller& controller, std::size_t frames,
                        const std::function<void(const FrameRecord&)>& sink = {});

// ---------------------------------------------------------------------------
// Experiment harness.

/// Reference device: encode 6 ms + 74.17 ms per member (one ms per million
/// MACs of a 384x384 member), decode 40 ms, 6x96x96 bottleneck, and the
/// published mAP@50:95 of each mode as the metric.
PerfTable reference_device_table();

/// Published mean RTT (ms) and mAP of each mode under ideal link conditions.
struct ReferenceRow {
  ConfigPoint cfg;
  double rtt_ms;
  double map;
};
const std::vector<ReferenceRow>& ideal_link_reference();

struct StaticGridConfig {
  std::shared_ptr<const SplitModel> model;
  PerfTable table;  // encode/decode times and metric per config
  Index image_size = 32;
  int frames_per_config = 30;
  double rate_Bps = 100000.0;
  double delay_ms = 20.0;
  std::uint64_t seed = 1;
};

struct GridRow {
  ConfigPoint cfg;
  double rtt_ms = 0.0;
  double metric = 0.0;
  std::size_t payload_bytes = 0;
  int frames = 0;
};

/// Mean simulated RTT of every config on a constant link, sorted by RTT.
std::vector<GridRow> run_static_grid(const StaticGridConfig& config);
void write_grid_csv(const std::filesystem::path& path, const std::vector<GridRow>& rows);

struct DynamicConfig {
  std::shared_ptr<const SplitModel> model;
  PerfTable table = reference_device_table();
  std::vector<DistancePoint> walk = default_walk(15000.0);
  DistanceRateMap rate_map;
  Index image_size = 384;
  std::size_t frames = 200;
  double delay_ms = 20.0;
  double deadline_ms = 400.0;
  double alpha = 0.5;
  /// Damps one-frame detours when a frame straddles a rate step.
  double switch_penalty_ms = 10.0;
  double jitter_pct = 0.0;
  ComputeMode server_mode = ComputeMode::codec_only;
  std::uint64_t seed = 1;
};

/// Walk replay on a virtual clock; one record per frame.
LoopResult run_dynamic(const DynamicConfig& config);
void write_decisions_jsonl(const std::filesystem::path& path, const std::vector<FrameRecord>& records);
void write_breakdown_csv(const std::filesystem::path& path, const std::vector<FrameRecord>& records);

/// Rows: single encoder, then ensemble s = 1..4. Columns: {fp, 4, 3, 2, 1}
/// bits with regularization, then the same without.
struct AblationGrid {
  std::uint64_t seed = 0;
  std::array<std::array<double, 10>, 5> metric{};
  std::array<std::array<double, 10>, 5> accuracy{};
  double seconds = 0.0;
};

inline constexpr std::array<const char*, 5> kAblationRows = {"single", "ensemble_s1", "ensemble_s2",
                                                             "ensemble_s3", "ensemble_s4"};
inline constexpr std::array<Precision, 5> kAblationPrecisions = {std::nullopt, 4, 3, 2, 1};

struct AblationConfig {
  TrainConfig base;  // seed and regularize are overridden per arm
  Index eval_samples = 100;
};

/// Trains the four arms (ensemble / single x regularized / not) for one seed.
/// Metric is the negated validation distillation MSE.
AblationGrid run_ablation_seed(const AblationConfig& config, std::uint64_t seed,
                               const std::function<void(const std::string&)>& log = {});
void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationGrid>& grids);

struct BenchConfig {
  Index image_size = 32;
  int reps = 5;
  /// Validation samples scored for the metric column; 0 leaves it at 0.
  Index eval_samples = 0;
  std::uint64_t data_seed = 1;
};

/// Measured PerfTable: member encode times accumulate over s (so encode time
/// grows with s by construction), quantize and pack time is folded into
/// encode_ms, decode time is measured per b, metric is -MSE.
PerfTable bench_perf_table(const SplitModel& model, std::span<const ConfigPoint> configs,
                           const BenchConfig& config);

}  // namespace slimsplit
