#include "slimsplit/netsim.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>

#include "slimsplit/model.hpp"

namespace slimsplit {

// --- ChannelModel ------------------------------------------------------------

ChannelModel ChannelModel::constant(double rate_Bps, double delay_ms, double jitter_pct,
                                    std::uint64_t seed) {
  ChannelModel c;
  c.mode_ = ChannelMode::constant;
  c.rate_Bps_ = rate_Bps;
  c.delay_ms_ = delay_ms;
  c.jitter_pct_ = jitter_pct;
  c.jitter_rng_ = Rng(seed, {fnv1a64("jitter")});
  c.validate();
  return c;
}

ChannelModel ChannelModel::trace(std::vector<RateBreakpoint> breakpoints, double delay_ms,
                                 double jitter_pct, std::uint64_t seed) {
  ChannelModel c;
  c.mode_ = ChannelMode::trace;
  c.trace_ = std::move(breakpoints);
  c.delay_ms_ = delay_ms;
  c.jitter_pct_ = jitter_pct;
  c.jitter_rng_ = Rng(seed, {fnv1a64("jitter")});
  c.validate();
  return c;
}

void ChannelModel::validate() const {
  if (!(delay_ms_ >= 0.0)) throw std::invalid_argument("channel delay must be non-negative");
  if (!(jitter_pct_ >= 0.0 && jitter_pct_ < 100.0)) {
    throw std::invalid_argument("channel jitter must be in [0, 100) percent");
  }
  if (mode_ == ChannelMode::constant) {
    if (!(rate_Bps_ > 0.0)) throw std::invalid_argument("channel rate must be positive");
    return;
  }
  if (trace_.empty()) throw std::invalid_argument("channel trace is empty");
  for (std::size_t i = 0; i < trace_.size(); ++i) {
    if (!(trace_[i].rate_Bps > 0.0)) {
      throw std::invalid_argument("channel trace rate must be positive at t=" +
                                  std::to_string(trace_[i].t_ms) + " ms");
    }
    if (i && !(trace_[i].t_ms > trace_[i - 1].t_ms)) {
      throw std::invalid_argument("channel trace timestamps must be strictly increasing");
    }
  }
}

double ChannelModel::rate_at(double t_ms) const {
  if (mode_ == ChannelMode::constant) return rate_Bps_;
  auto it = std::upper_bound(trace_.begin(), trace_.end(), t_ms,
                             [](double t, const RateBreakpoint& b) { return t < b.t_ms; });
  if (it == trace_.begin()) return trace_.front().rate_Bps;
  return std::prev(it)->rate_Bps;
}

double ChannelModel::serialization_ms(std::size_t bytes, double t_start_ms) const {
  if (mode_ == ChannelMode::constant) return static_cast<double>(bytes) * 1000.0 / rate_Bps_;
  double remaining = static_cast<double>(bytes);
  double t = t_start_ms;
  auto next = std::upper_bound(trace_.begin(), trace_.end(), t,
                               [](double v, const RateBreakpoint& b) { return v < b.t_ms; });
  while (remaining > 0.0) {
    const double rate = rate_at(t);
    if (next == trace_.end()) {
      t += remaining * 1000.0 / rate;
      break;
    }
    const double capacity = (next->t_ms - t) * rate / 1000.0;
    if (capacity >= remaining) {
      t += remaining * 1000.0 / rate;
      break;
    }
    remaining -= capacity;
    t = next->t_ms;
    ++next;
  }
  return t - t_start_ms;
}

double ChannelModel::bytes_between(double t1_ms, double t2_ms) const {
  if (t2_ms <= t1_ms) return 0.0;
  if (mode_ == ChannelMode::constant) return (t2_ms - t1_ms) * rate_Bps_ / 1000.0;
  double total = 0.0;
  double t = t1_ms;
  auto next = std::upper_bound(trace_.begin(), trace_.end(), t,
                               [](double v, const RateBreakpoint& b) { return v < b.t_ms; });
  while (t < t2_ms) {
    const double end = next == trace_.end() ? t2_ms : std::min(t2_ms, next->t_ms);
    total += (end - t) * rate_at(t) / 1000.0;
    t = end;
    if (next != trace_.end()) ++next;
  }
  return total;
}

ChannelModel::Transfer ChannelModel::transfer(std::size_t bytes, double t_now_ms) {
  double ser = serialization_ms(bytes, t_now_ms);
  if (jitter_pct_ > 0.0) ser *= 1.0 + jitter_rng_.uniform(-jitter_pct_, jitter_pct_) / 100.0;
  return {ser, delay_ms_};
}

// --- walk profiles -----------------------------------------------------------

double DistanceRateMap::rate_for(double d) const {
  if (d < 0.0) throw std::invalid_argument("distance must be non-negative, got " + std::to_string(d));
  if (anchors.empty()) throw std::invalid_argument("distance map has no anchors");
  if (d <= anchors.front().first) return anchors.front().second;
  for (std::size_t i = 1; i < anchors.size(); ++i) {
    const auto [d0, r0] = anchors[i - 1];
    const auto [d1, r1] = anchors[i];
    if (d <= d1) return r0 + (r1 - r0) * (d - d0) / (d1 - d0);
  }
  return anchors.back().second;
}

ChannelModel walk_profile(const std::vector<DistancePoint>& schedule, double delay_ms,
                          const DistanceRateMap& map, double jitter_pct, std::uint64_t seed) {
  if (schedule.empty()) throw std::invalid_argument("walk schedule is empty");
  std::vector<RateBreakpoint> trace;
  for (const DistancePoint& p : schedule) trace.push_back({p.t_ms, map.rate_for(p.distance_m)});
  return ChannelModel::trace(std::move(trace), delay_ms, jitter_pct, seed);
}

std::vector<DistancePoint> default_walk(double dwell_ms) {
  std::vector<DistancePoint> w;
  for (int i = 0; i < 5; ++i) w.push_back({i * dwell_ms, 1.0 + 2.0 * i});
  return w;
}

// --- CSV ---------------------------------------------------------------------

namespace {

std::vector<std::pair<double, double>> read_pairs(const std::filesystem::path& path,
                                                  const std::string& header) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path.string() + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != header) {
    throw std::runtime_error(path.string() + ": expected header '" + header + "', got '" + line + "'");
  }
  std::vector<std::pair<double, double>> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.find(',');
    try {
      if (comma == std::string::npos) throw std::invalid_argument("missing comma");
      std::size_t used = 0;
      const double a = std::stod(line.substr(0, comma), &used);
      const double b = std::stod(line.substr(comma + 1), &used);
      rows.emplace_back(a, b);
    } catch (const std::exception&) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": malformed row '" + line + "'");
    }
  }
  return rows;
}

void write_pairs(const std::filesystem::path& path, const std::string& header,
                 const std::vector<std::pair<double, double>>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << header << '\n';
  for (auto [a, b] : rows) out << a << ',' << b << '\n';
}

}  // namespace

std::vector<RateBreakpoint> load_trace_csv(const std::filesystem::path& path) {
  std::vector<RateBreakpoint> t;
  for (auto [a, b] : read_pairs(path, "t_ms,rate_Bps")) t.push_back({a, b});
  return t;
}

void save_trace_csv(const std::filesystem::path& path, const std::vector<RateBreakpoint>& trace) {
  std::vector<std::pair<double, double>> rows;
  for (const auto& b : trace) rows.emplace_back(b.t_ms, b.rate_Bps);
  write_pairs(path, "t_ms,rate_Bps", rows);
}

std::vector<DistancePoint> load_walk_csv(const std::filesystem::path& path) {
  std::vector<DistancePoint> w;
  for (auto [a, b] : read_pairs(path, "t_ms,distance_m")) w.push_back({a, b});
  return w;
}

void save_walk_csv(const std::filesystem::path& path, const std::vector<DistancePoint>& walk) {
  std::vector<std::pair<double, double>> rows;
  for (const auto& p : walk) rows.emplace_back(p.t_ms, p.distance_m);
  write_pairs(path, "t_ms,distance_m", rows);
}

// --- SimulatedLink -----------------------------------------------------------

struct SimulatedLink::Direction {
  ChannelModel channel;
  Micros busy_until = 0;
  struct Packet {
    Micros arrival;
    std::vector<std::uint8_t> bytes;
    std::size_t offset = 0;
  };
  std::deque<Packet> in_flight;
  std::vector<Delivery> log;
  bool closed = false;
};

class SimulatedLink::Endpoint final : public Transport {
 public:
  Endpoint(std::shared_ptr<VirtualClock> clock, std::shared_ptr<Direction> out,
           std::shared_ptr<Direction> in)
      : clock_(std::move(clock)), out_(std::move(out)), in_(std::move(in)) {}

  void write_all(std::span<const std::uint8_t> bytes) override {
    if (out_->closed) throw TransportError("simulated link: write on closed stream");
    const Micros start = std::max(clock_->now(), out_->busy_until);
    const auto tr = out_->channel.transfer(bytes.size(), us_to_ms(start));
    const Micros done = start + ms_to_us(tr.serialization_ms);
    const Micros arrival = done + ms_to_us(tr.delay_ms);
    out_->busy_until = done;
    out_->in_flight.push_back({arrival, std::vector<std::uint8_t>(bytes.begin(), bytes.end())});
    out_->log.push_back({start, done, arrival, bytes.size()});
    clock_->advance_to(done);
  }

  std::size_t read_some(std::span<std::uint8_t> out) override {
    if (in_->in_flight.empty()) {
      if (in_->closed) return 0;
      throw TransportError("simulated link: read with no data in flight would block forever");
    }
    auto& p = in_->in_flight.front();
    clock_->advance_to(p.arrival);
    const std::size_t n = std::min(out.size(), p.bytes.size() - p.offset);
    std::copy_n(p.bytes.begin() + static_cast<std::ptrdiff_t>(p.offset), n, out.begin());
    p.offset += n;
    if (p.offset == p.bytes.size()) in_->in_flight.pop_front();
    return n;
  }

  void close() override {
    out_->closed = true;
    in_->closed = true;
  }

 private:
  std::shared_ptr<VirtualClock> clock_;
  std::shared_ptr<Direction> out_, in_;
};

SimulatedLink::SimulatedLink(ChannelModel uplink, ChannelModel downlink,
                             std::shared_ptr<VirtualClock> clock)
    : clock_(std::move(clock)), up_(std::make_shared<Direction>()), down_(std::make_shared<Direction>()) {
  if (!clock_) clock_ = std::make_shared<VirtualClock>();
  up_->channel = std::move(uplink);
  down_->channel = std::move(downlink);
  a_ = std::make_unique<Endpoint>(clock_, up_, down_);
  b_ = std::make_unique<Endpoint>(clock_, down_, up_);
}

SimulatedLink::~SimulatedLink() = default;

Transport& SimulatedLink::a() { return *a_; }
Transport& SimulatedLink::b() { return *b_; }

const std::vector<SimulatedLink::Delivery>& SimulatedLink::uplink_log() const { return up_->log; }
const std::vector<SimulatedLink::Delivery>& SimulatedLink::downlink_log() const { return down_->log; }

}  // namespace slimsplit
