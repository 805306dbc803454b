#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace slimsplit {

/// One (ensemble size, bits) mode of operation.
struct ConfigPoint {
  int s = 1;
  int b = 1;
  auto operator<=>(const ConfigPoint&) const = default;
};

std::string to_string(ConfigPoint c);

/// All N x bits configurations, ordered by s then b.
std::vector<ConfigPoint> config_space(int max_size, int max_bits = 4);

struct PerfRow {
  ConfigPoint cfg;
  double encode_ms = 0.0;
  double decode_ms = 0.0;
  std::size_t payload_bytes = 0;
  double metric = 0.0;
};

class PerfTableError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Per-config knowledge base: local encode time, server decode time, payload
/// size and the task metric.
class PerfTable {
 public:
  void set(const PerfRow& row);
  const PerfRow& at(ConfigPoint c) const;
  bool contains(ConfigPoint c) const { return rows_.count(c) != 0; }
  bool empty() const { return rows_.empty(); }
  std::size_t size() const { return rows_.size(); }
  std::vector<PerfRow> rows() const;
  std::vector<ConfigPoint> configs() const;

  void set_decode_ms(ConfigPoint c, double ms);
  void set_metric(ConfigPoint c, double metric);

  /// Payload depends on b only; metric finite; encode time grows with s
  /// (each step may dip by at most `tolerance` relative).
  void validate(double tolerance = 0.10) const;

  static PerfTable load_csv(const std::filesystem::path& path);
  void save_csv(const std::filesystem::path& path) const;

 private:
  std::map<ConfigPoint, PerfRow> rows_;
};

struct ChannelEstimate {
  double rate_Bps = 0.0;
  double delay_ms = 0.0;
  double alpha = 0.2;
  bool initialized = false;
};

/// What one round trip reveals about the link: bytes pushed in the measured
/// serialization interval, and the one-way latency left over.
struct ChannelObservation {
  double bytes = 0.0;
  double serialization_ms = 0.0;
  double delay_ms = 0.0;
};

/// EWMA update; the first observation initializes the estimate directly.
ChannelEstimate update_estimate(ChannelEstimate est, const ChannelObservation& obs);

/// enc + payload/rate + delay + dec + result/rate + delay, in ms. Header
/// bytes are counted with the payload.
double predict_rtt(ConfigPoint c, const PerfTable& table, const ChannelEstimate& est,
                   std::size_t result_bytes, std::size_t header_bytes = 0);

struct SelectionRule {
  double deadline_ms = 400.0;
  double margin = 1.0;           // feasible iff margin * rtt <= deadline
  double switch_penalty_ms = 0.0;
  std::optional<ConfigPoint> current;
};

/// Max metric among feasible configs; ties by smaller RTT, then s, then b.
/// With nothing feasible, the minimum-RTT config.
ConfigPoint select_config(const PerfTable& table, const std::function<double(ConfigPoint)>& rtt,
                          const SelectionRule& rule);
ConfigPoint select_config(const PerfTable& table, const ChannelEstimate& est, double deadline_ms,
                          std::size_t result_bytes, std::size_t header_bytes = 0);

struct ControllerConfig {
  double deadline_ms = 400.0;
  double alpha = 0.2;
  double margin = 1.0;
  double switch_penalty_ms = 0.0;
  std::size_t result_bytes = 0;  // whole RESULT frame
  std::size_t header_bytes = 0;  // DATA header on top of the payload
  double prior_rate_Bps = 80000.0;
  double prior_delay_ms = 20.0;
};

struct Decision {
  std::uint32_t seq = 0;
  ConfigPoint cfg;
  double predicted_rtt_ms = 0.0;
  double measured_rtt_ms = std::numeric_limits<double>::quiet_NaN();
  double rate_est_Bps = 0.0;
  double deadline_ms = 0.0;
};

std::string to_jsonl(const Decision& d);

/// Per-frame choice plus feedback. Until the first observation the estimate
/// is the configured prior.
class Controller {
 public:
  Controller(PerfTable table, ControllerConfig config);

  Decision decide(std::uint32_t seq);
  void observe(const ChannelObservation& obs);

  const PerfTable& table() const { return table_; }
  PerfTable& table() { return table_; }
  const ChannelEstimate& estimate() const { return est_; }
  const ControllerConfig& config() const { return config_; }
  std::optional<ConfigPoint> current() const { return current_; }

 private:
  ChannelEstimate effective() const;

  PerfTable table_;
  ControllerConfig config_;
  ChannelEstimate est_;
  std::optional<ConfigPoint> current_;
};

}  // namespace slimsplit
