#include "slimsplit/protocol.hpp"

#include <algorithm>
#include <cstring>

#include "slimsplit/bytes.hpp"
#include "slimsplit/codec.hpp"

namespace slimsplit {

const char* to_string(MsgType t) {
  switch (t) {
    case MsgType::data: return "DATA";
    case MsgType::result: return "RESULT";
    case MsgType::perf_report: return "PERF_REPORT";
  }
  return "?";
}

const char* to_string(ProtocolErrorKind k) {
  switch (k) {
    case ProtocolErrorKind::bad_magic: return "bad magic";
    case ProtocolErrorKind::unsupported_version: return "unsupported version";
    case ProtocolErrorKind::truncated: return "truncated stream";
    case ProtocolErrorKind::invariant_violation: return "invariant violation";
  }
  return "?";
}

namespace {

[[noreturn]] void violation(const std::string& what) {
  throw ProtocolError(ProtocolErrorKind::invariant_violation, what);
}

[[noreturn]] void truncated(std::size_t have, std::size_t need) {
  throw ProtocolError(ProtocolErrorKind::truncated,
                      "have " + std::to_string(have) + " bytes, need " + std::to_string(need));
}

/// Checks whatever prefix of magic/version/type is present.
void check_prefix(std::span<const std::uint8_t> bytes) {
  const std::size_t n = std::min<std::size_t>(bytes.size(), 4);
  if (!std::equal(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(n), kFrameMagic.begin())) {
    throw ProtocolError(ProtocolErrorKind::bad_magic, "frame does not start with SPLC");
  }
  if (bytes.size() > 4 && bytes[4] != kProtocolVersion) {
    throw ProtocolError(ProtocolErrorKind::unsupported_version,
                        "version " + std::to_string(bytes[4]) + ", this build speaks " +
                            std::to_string(kProtocolVersion));
  }
  if (bytes.size() > 5 && bytes[5] > static_cast<std::uint8_t>(MsgType::perf_report)) {
    violation("unknown msg_type " + std::to_string(bytes[5]));
  }
}

}  // namespace

void validate_header(const FrameHeader& h, int max_size) {
  if (h.payload_len > kMaxPayload) violation("payload_len " + std::to_string(h.payload_len) + " exceeds limit");
  if (h.type != MsgType::data) return;
  if (h.s < 1 || h.s > max_size) {
    violation("ensemble size s=" + std::to_string(h.s) + " outside [1, " + std::to_string(max_size) + "]");
  }
  if (h.b < 1 || h.b > 8) violation("bits b=" + std::to_string(h.b) + " outside [1, 8]");
  if (!(h.sigma >= 0.0f) || !std::isfinite(h.sigma)) violation("sigma must be finite and non-negative");
  const std::size_t expect = payload_bytes(static_cast<Index>(h.numel()), h.b);
  if (h.payload_len != expect) {
    violation("DATA payload_len " + std::to_string(h.payload_len) + " but " + std::to_string(h.channels) +
              "x" + std::to_string(h.height) + "x" + std::to_string(h.width) + " at " + std::to_string(h.b) +
              " bits needs " + std::to_string(expect));
  }
}

std::vector<std::uint8_t> encode_header(const FrameHeader& h) {
  ByteWriter w;
  w.raw(kFrameMagic.data(), kFrameMagic.size());
  w.u8(kProtocolVersion);
  w.u8(static_cast<std::uint8_t>(h.type));
  w.u32(h.seq);
  w.u8(h.s);
  w.u8(h.b);
  w.u16(h.channels);
  w.u16(h.height);
  w.u16(h.width);
  w.f32(h.sigma);
  w.u64(h.t_capture_us);
  w.u64(h.t_encode_done_us);
  w.u32(h.payload_len);
  return w.take();
}

std::vector<std::uint8_t> encode_frame(const FrameHeader& h, std::span<const std::uint8_t> payload) {
  validate_header(h);
  if (payload.size() != h.payload_len) {
    violation("payload has " + std::to_string(payload.size()) + " bytes, header says " +
              std::to_string(h.payload_len));
  }
  std::vector<std::uint8_t> out = encode_header(h);
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

FrameHeader decode_header(std::span<const std::uint8_t> bytes) {
  check_prefix(bytes);
  if (bytes.size() < kHeaderSize) truncated(bytes.size(), kHeaderSize);
  ByteReader r(bytes.first(kHeaderSize));
  r.take(5);
  FrameHeader h;
  h.type = static_cast<MsgType>(r.u8());
  h.seq = r.u32();
  h.s = r.u8();
  h.b = r.u8();
  h.channels = r.u16();
  h.height = r.u16();
  h.width = r.u16();
  h.sigma = r.f32();
  h.t_capture_us = r.u64();
  h.t_encode_done_us = r.u64();
  h.payload_len = r.u32();
  validate_header(h);
  return h;
}

Frame decode_frame(std::span<const std::uint8_t> bytes) {
  Frame f;
  f.header = decode_header(bytes);
  const std::size_t total = kHeaderSize + f.header.payload_len;
  if (bytes.size() < total) truncated(bytes.size(), total);
  if (bytes.size() > total) {
    violation(std::to_string(bytes.size() - total) + " trailing bytes after frame");
  }
  f.payload.assign(bytes.begin() + kHeaderSize, bytes.end());
  return f;
}

void FrameDecoder::feed(std::span<const std::uint8_t> bytes) {
  if (offset_ > 0 && offset_ == buffer_.size()) {
    buffer_.clear();
    offset_ = 0;
  }
  buffer_.insert(buffer_.end(), bytes.begin(), bytes.end());
}

std::optional<Frame> FrameDecoder::next() {
  const std::span<const std::uint8_t> avail(buffer_.data() + offset_, buffer_.size() - offset_);
  if (avail.empty()) return std::nullopt;
  check_prefix(avail);
  if (avail.size() < kHeaderSize) return std::nullopt;
  const FrameHeader h = decode_header(avail);
  const std::size_t total = kHeaderSize + h.payload_len;
  if (avail.size() < total) return std::nullopt;
  Frame f{h, std::vector<std::uint8_t>(avail.begin() + kHeaderSize, avail.begin() + static_cast<std::ptrdiff_t>(total))};
  offset_ += total;
  if (offset_ > (1u << 20) && offset_ * 2 > buffer_.size()) {
    buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(offset_));
    offset_ = 0;
  }
  return f;
}

// --- bodies -------------------------------------------------------------------

std::vector<std::uint8_t> encode_result(const ResultMessage& r) {
  if (r.result.size() > 0xFFFF) violation("result vector too long");
  ByteWriter w;
  w.u32(r.seq);
  w.u64(r.t_server_recv_us);
  w.u64(r.t_decode_done_us);
  w.u32(r.decoder_time_us);
  w.u16(static_cast<std::uint16_t>(r.result.size()));
  for (float v : r.result) w.f32(v);
  return w.take();
}

ResultMessage decode_result(std::span<const std::uint8_t> body) {
  constexpr std::size_t fixed = 4 + 8 + 8 + 4 + 2;
  if (body.size() < fixed) violation("RESULT body of " + std::to_string(body.size()) + " bytes is too short");
  ByteReader r(body);
  ResultMessage m;
  m.seq = r.u32();
  m.t_server_recv_us = r.u64();
  m.t_decode_done_us = r.u64();
  m.decoder_time_us = r.u32();
  const std::uint16_t n = r.u16();
  if (r.remaining() != 4u * n) {
    violation("RESULT declares " + std::to_string(n) + " values but carries " +
              std::to_string(r.remaining()) + " bytes");
  }
  m.result.resize(n);
  for (float& v : m.result) v = r.f32();
  return m;
}

std::vector<std::uint8_t> encode_perf_report(std::span<const PerfEntry> entries) {
  ByteWriter w;
  for (const PerfEntry& e : entries) {
    w.u8(e.s);
    w.u8(e.b);
    w.u32(e.decoder_time_us);
  }
  return w.take();
}

std::vector<PerfEntry> decode_perf_report(std::span<const std::uint8_t> body) {
  if (body.size() % 6 != 0) violation("PERF_REPORT body is not a whole number of entries");
  ByteReader r(body);
  std::vector<PerfEntry> out(body.size() / 6);
  for (PerfEntry& e : out) {
    e.s = r.u8();
    e.b = r.u8();
    e.decoder_time_us = r.u32();
  }
  return out;
}

// --- Session ------------------------------------------------------------------

Session::Session(Transport& transport, Role role, int max_size)
    : transport_(transport), role_(role), max_size_(max_size) {}

bool Session::may_send(MsgType t) const {
  if (t == MsgType::perf_report) return true;
  return role_ == Role::edge ? t == MsgType::data : t == MsgType::result;
}

std::uint32_t Session::send(FrameHeader header, std::span<const std::uint8_t> payload) {
  if (!may_send(header.type)) {
    violation(std::string(role_ == Role::edge ? "edge" : "server") + " may not send " + to_string(header.type));
  }
  std::lock_guard lock(send_mu_);
  header.seq = next_tx_;
  validate_header(header, max_size_);
  const auto bytes = encode_frame(header, payload);
  transport_.write_all(bytes);
  return next_tx_++;
}

std::uint32_t Session::send_result(const ResultMessage& r, ResultStatus status) {
  const auto body = encode_result(r);
  FrameHeader h;
  h.type = MsgType::result;
  h.b = static_cast<std::uint8_t>(status);
  h.payload_len = static_cast<std::uint32_t>(body.size());
  return send(h, body);
}

std::uint32_t Session::send_perf_report(std::span<const PerfEntry> entries) {
  const auto body = encode_perf_report(entries);
  FrameHeader h;
  h.type = MsgType::perf_report;
  h.payload_len = static_cast<std::uint32_t>(body.size());
  return send(h, body);
}

std::optional<Frame> Session::receive() {
  std::array<std::uint8_t, 65536> buf;
  for (;;) {
    std::optional<Frame> f;
    try {
      f = decoder_.next();
    } catch (const ProtocolError& e) {
      throw SessionError(std::string("session: ") + e.what(), last_rx_);
    }
    if (f) {
      const MsgType t = f->header.type;
      const bool expected = role_ == Role::edge ? t != MsgType::data : t != MsgType::result;
      if (!expected) throw SessionError(std::string("session: unexpected ") + to_string(t), last_rx_);
      if (last_rx_ && f->header.seq <= *last_rx_) {
        throw SessionError("session: seq " + std::to_string(f->header.seq) + " does not increase", last_rx_);
      }
      last_rx_ = f->header.seq;
      return f;
    }
    std::size_t n = 0;
    try {
      n = transport_.read_some(buf);
    } catch (const TransportError& e) {
      throw SessionError(std::string("session: ") + e.what(), last_rx_);
    }
    if (n == 0) {
      if (decoder_.buffered() == 0) return std::nullopt;
      throw SessionError("session: transport closed mid-frame with " + std::to_string(decoder_.buffered()) +
                             " bytes pending",
                         last_rx_);
    }
    decoder_.feed(std::span(buf).first(n));
  }
}

}  // namespace slimsplit
