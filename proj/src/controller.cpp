#include "slimsplit/controller.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace slimsplit {

std::string to_string(ConfigPoint c) {
  return "(s=" + std::to_string(c.s) + ", b=" + std::to_string(c.b) + ")";
}

std::vector<ConfigPoint> config_space(int max_size, int max_bits) {
  std::vector<ConfigPoint> out;
  for (int s = 1; s <= max_size; ++s) {
    for (int b = 1; b <= max_bits; ++b) out.push_back({s, b});
  }
  return out;
}

// --- PerfTable -----------------------------------------------------------------

void PerfTable::set(const PerfRow& row) { rows_[row.cfg] = row; }

const PerfRow& PerfTable::at(ConfigPoint c) const {
  auto it = rows_.find(c);
  if (it == rows_.end()) throw PerfTableError("perf table has no entry for " + to_string(c));
  return it->second;
}

std::vector<PerfRow> PerfTable::rows() const {
  std::vector<PerfRow> out;
  for (const auto& [c, r] : rows_) out.push_back(r);
  return out;
}

std::vector<ConfigPoint> PerfTable::configs() const {
  std::vector<ConfigPoint> out;
  for (const auto& [c, r] : rows_) out.push_back(c);
  return out;
}

void PerfTable::set_decode_ms(ConfigPoint c, double ms) {
  auto it = rows_.find(c);
  if (it == rows_.end()) throw PerfTableError("perf table has no entry for " + to_string(c));
  it->second.decode_ms = ms;
}

void PerfTable::set_metric(ConfigPoint c, double metric) {
  auto it = rows_.find(c);
  if (it == rows_.end()) throw PerfTableError("perf table has no entry for " + to_string(c));
  it->second.metric = metric;
}

void PerfTable::validate(double tolerance) const {
  std::map<int, std::size_t> payload_by_bits;
  for (const auto& [c, r] : rows_) {
    if (!std::isfinite(r.metric)) throw PerfTableError("non-finite metric for " + to_string(c));
    if (!(r.encode_ms >= 0.0) || !(r.decode_ms >= 0.0)) {
      throw PerfTableError("negative or non-finite timing for " + to_string(c));
    }
    auto [it, fresh] = payload_by_bits.emplace(c.b, r.payload_bytes);
    if (!fresh && it->second != r.payload_bytes) {
      throw PerfTableError("payload for b=" + std::to_string(c.b) + " differs across sizes");
    }
    const ConfigPoint prev{c.s - 1, c.b};
    if (contains(prev) && r.encode_ms < at(prev).encode_ms * (1.0 - tolerance)) {
      throw PerfTableError("encode time drops from " + to_string(prev) + " to " + to_string(c));
    }
  }
}

PerfTable PerfTable::load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw PerfTableError("cannot open perf table " + path.string());
  std::string line;
  std::getline(in, line);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "s,b,encode_ms,decode_ms,payload_bytes,metric") {
    throw PerfTableError(path.string() + ": unexpected header '" + line + "'");
  }
  PerfTable t;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream row(line);
    PerfRow r;
    char c1, c2, c3, c4, c5;
    if (!(row >> r.cfg.s >> c1 >> r.cfg.b >> c2 >> r.encode_ms >> c3 >> r.decode_ms >> c4 >>
          r.payload_bytes >> c5 >> r.metric) ||
        c1 != ',' || c2 != ',' || c3 != ',' || c4 != ',' || c5 != ',') {
      throw PerfTableError(path.string() + ":" + std::to_string(lineno) + ": malformed row");
    }
    if (t.contains(r.cfg)) throw PerfTableError(path.string() + ": duplicate row " + to_string(r.cfg));
    t.set(r);
  }
  return t;
}

void PerfTable::save_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw PerfTableError("cannot write " + path.string());
  out.precision(10);
  out << "s,b,encode_ms,decode_ms,payload_bytes,metric\n";
  for (const auto& [c, r] : rows_) {
    out << c.s << ',' << c.b << ',' << r.encode_ms << ',' << r.decode_ms << ',' << r.payload_bytes
        << ',' << r.metric << '\n';
  }
}

// --- estimation and selection ----------------------------------------------------

ChannelEstimate update_estimate(ChannelEstimate est, const ChannelObservation& obs) {
  if (!(obs.serialization_ms > 0.0)) return est;  // nothing measurable about the rate
  const double rate = obs.bytes * 1000.0 / obs.serialization_ms;
  const double delay = std::max(0.0, obs.delay_ms);
  if (!est.initialized) {
    est.rate_Bps = rate;
    est.delay_ms = delay;
    est.initialized = true;
    return est;
  }
  est.rate_Bps = est.alpha * rate + (1.0 - est.alpha) * est.rate_Bps;
  est.delay_ms = est.alpha * delay + (1.0 - est.alpha) * est.delay_ms;
  return est;
}

double predict_rtt(ConfigPoint c, const PerfTable& table, const ChannelEstimate& est,
                   std::size_t result_bytes, std::size_t header_bytes) {
  const PerfRow& r = table.at(c);
  const double per_byte_ms = std::isinf(est.rate_Bps) ? 0.0 : 1000.0 / est.rate_Bps;
  const double up = static_cast<double>(r.payload_bytes + header_bytes) * per_byte_ms;
  const double down = static_cast<double>(result_bytes) * per_byte_ms;
  return r.encode_ms + up + est.delay_ms + r.decode_ms + down + est.delay_ms;
}

ConfigPoint select_config(const PerfTable& table, const std::function<double(ConfigPoint)>& rtt,
                          const SelectionRule& rule) {
  if (table.empty()) throw PerfTableError("select_config: empty perf table");
  std::optional<ConfigPoint> best, fastest;
  double best_metric = 0, best_rtt = 0, fastest_rtt = 0;
  for (const PerfRow& r : table.rows()) {
    double t = rtt(r.cfg);
    if (rule.current && r.cfg != *rule.current) t += rule.switch_penalty_ms;
    // rows() is ordered by (s, b), so strict comparisons keep the smaller
    // s and b on exact ties.
    if (!fastest || t < fastest_rtt) {
      fastest = r.cfg;
      fastest_rtt = t;
    }
    if (rule.margin * t > rule.deadline_ms) continue;
    if (!best || r.metric > best_metric || (r.metric == best_metric && t < best_rtt)) {
      best = r.cfg;
      best_metric = r.metric;
      best_rtt = t;
    }
  }
  return best ? *best : *fastest;
}

ConfigPoint select_config(const PerfTable& table, const ChannelEstimate& est, double deadline_ms,
                          std::size_t result_bytes, std::size_t header_bytes) {
  SelectionRule rule;
  rule.deadline_ms = deadline_ms;
  return select_config(
      table, [&](ConfigPoint c) { return predict_rtt(c, table, est, result_bytes, header_bytes); }, rule);
}

std::string to_jsonl(const Decision& d) {
  nlohmann::ordered_json j;
  j["seq"] = d.seq;
  j["s"] = d.cfg.s;
  j["b"] = d.cfg.b;
  j["predicted_rtt_ms"] = d.predicted_rtt_ms;
  if (std::isnan(d.measured_rtt_ms)) {
    j["measured_rtt_ms"] = nullptr;
  } else {
    j["measured_rtt_ms"] = d.measured_rtt_ms;
  }
  j["rate_est_Bps"] = d.rate_est_Bps;
  j["deadline_ms"] = d.deadline_ms;
  return j.dump();
}

// --- Controller --------------------------------------------------------------------

Controller::Controller(PerfTable table, ControllerConfig config)
    : table_(std::move(table)), config_(config) {
  if (table_.empty()) throw PerfTableError("controller needs a populated perf table");
  if (!(config_.alpha > 0.0 && config_.alpha <= 1.0)) {
    throw std::invalid_argument("EWMA alpha must be in (0, 1]");
  }
  if (!(config_.prior_rate_Bps > 0.0)) throw std::invalid_argument("prior rate must be positive");
  est_.alpha = config_.alpha;
}

ChannelEstimate Controller::effective() const {
  if (est_.initialized) return est_;
  ChannelEstimate prior = est_;
  prior.rate_Bps = config_.prior_rate_Bps;
  prior.delay_ms = config_.prior_delay_ms;
  return prior;
}

Decision Controller::decide(std::uint32_t seq) {
  const ChannelEstimate est = effective();
  auto rtt = [&](ConfigPoint c) {
    return predict_rtt(c, table_, est, config_.result_bytes, config_.header_bytes);
  };
  SelectionRule rule{config_.deadline_ms, config_.margin, config_.switch_penalty_ms, current_};
  Decision d;
  d.seq = seq;
  d.cfg = select_config(table_, rtt, rule);
  d.predicted_rtt_ms = rtt(d.cfg);
  d.rate_est_Bps = est.rate_Bps;
  d.deadline_ms = config_.deadline_ms;
  current_ = d.cfg;
  return d;
}

void Controller::observe(const ChannelObservation& obs) { est_ = update_estimate(est_, obs); }

}  // namespace slimsplit
