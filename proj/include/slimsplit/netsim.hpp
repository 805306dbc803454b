#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <memory>
#include <optional>
#include <vector>

#include "slimsplit/rng.hpp"
#include "slimsplit/transport.hpp"

namespace slimsplit {

/// Microseconds on the simulation's virtual timeline.
using Micros = std::int64_t;

inline Micros ms_to_us(double ms) { return static_cast<Micros>(std::llround(ms * 1000.0)); }
inline double us_to_ms(Micros us) { return static_cast<double>(us) / 1000.0; }

struct RateBreakpoint {
  double t_ms = 0.0;
  double rate_Bps = 0.0;
};

enum class ChannelMode { constant, trace };

/**
 * Rate/latency process of one link direction. In trace mode the rate is a
 * step function over breakpoints (held before the first and after the last),
 * and a transfer spanning a breakpoint is integrated piecewise.
 */
class ChannelModel {
 public:
  ChannelModel() = default;
  static ChannelModel constant(double rate_Bps, double delay_ms, double jitter_pct = 0.0,
                               std::uint64_t seed = 0);
  static ChannelModel trace(std::vector<RateBreakpoint> breakpoints, double delay_ms,
                            double jitter_pct = 0.0, std::uint64_t seed = 0);

  ChannelMode mode() const { return mode_; }
  double delay_ms() const { return delay_ms_; }
  double jitter_pct() const { return jitter_pct_; }
  const std::vector<RateBreakpoint>& breakpoints() const { return trace_; }

  double rate_at(double t_ms) const;
  /// Time to push `bytes` onto the link starting at t_start, without delay or jitter.
  double serialization_ms(std::size_t bytes, double t_start_ms) const;
  /// Bytes the link can carry over [t1, t2]: the integral of the rate.
  double bytes_between(double t1_ms, double t2_ms) const;

  struct Transfer {
    double serialization_ms;
    double delay_ms;
    double total_ms() const { return serialization_ms + delay_ms; }
  };
  /// serialization + delay, with seeded multiplicative jitter on the
  /// serialization part when enabled (advances the jitter stream).
  Transfer transfer(std::size_t bytes, double t_now_ms);
  double transfer_time_ms(std::size_t bytes, double t_now_ms) { return transfer(bytes, t_now_ms).total_ms(); }

 private:
  void validate() const;

  ChannelMode mode_ = ChannelMode::constant;
  double rate_Bps_ = 1.0;
  double delay_ms_ = 0.0;
  std::vector<RateBreakpoint> trace_;
  double jitter_pct_ = 0.0;
  Rng jitter_rng_;
};

/// Distance to rate anchors, linearly interpolated and clamped at the ends.
struct DistanceRateMap {
  std::vector<std::pair<double, double>> anchors = {
      {1.0, 200000.0}, {3.0, 150000.0}, {5.0, 100000.0}, {7.0, 90000.0}, {9.0, 80000.0}};

  double rate_for(double distance_m) const;
};

struct DistancePoint {
  double t_ms = 0.0;
  double distance_m = 0.0;
};

/// Each schedule entry holds its distance until the next entry.
ChannelModel walk_profile(const std::vector<DistancePoint>& schedule, double delay_ms,
                          const DistanceRateMap& map = {}, double jitter_pct = 0.0,
                          std::uint64_t seed = 0);

/// 1, 3, 5, 7, 9 m, each held for `dwell_ms`.
std::vector<DistancePoint> default_walk(double dwell_ms);

std::vector<RateBreakpoint> load_trace_csv(const std::filesystem::path& path);
void save_trace_csv(const std::filesystem::path& path, const std::vector<RateBreakpoint>& trace);
std::vector<DistancePoint> load_walk_csv(const std::filesystem::path& path);
void save_walk_csv(const std::filesystem::path& path, const std::vector<DistancePoint>& walk);

/// Shared timeline of a single-threaded simulation.
class VirtualClock {
 public:
  Micros now() const { return now_; }
  void advance_to(Micros t) {
    if (t > now_) now_ = t;
  }
  void advance_by(Micros d) { now_ += d; }

 private:
  Micros now_ = 0;
};

/**
 * Point-to-point link on a virtual clock. Each write is serialized after any
 * earlier write in the same direction finishes; the writer's clock advances
 * by the serialization time (a blocking send) and the bytes become readable
 * after the propagation delay. Reading advances the clock to the arrival of
 * the data it returns. Reading with nothing in flight would block forever,
 * so it throws.
 */
class SimulatedLink {
 public:
  struct Delivery {
    Micros send_start, send_done, arrival;
    std::size_t bytes;
  };

  SimulatedLink(ChannelModel uplink, ChannelModel downlink, std::shared_ptr<VirtualClock> clock);
  ~SimulatedLink();

  /// Endpoint A writes on the uplink; endpoint B on the downlink.
  Transport& a();
  Transport& b();
  VirtualClock& clock() { return *clock_; }

  /// Delivery schedule so far, per direction.
  const std::vector<Delivery>& uplink_log() const;
  const std::vector<Delivery>& downlink_log() const;

 private:
  struct Direction;
  class Endpoint;
  std::shared_ptr<VirtualClock> clock_;
  std::shared_ptr<Direction> up_, down_;
  std::unique_ptr<Endpoint> a_, b_;
};

}  // namespace slimsplit
