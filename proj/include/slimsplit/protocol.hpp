#pragma once

#include <array>
#include <cstdint>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "slimsplit/transport.hpp"

namespace slimsplit {

inline constexpr std::array<std::uint8_t, 4> kFrameMagic = {'S', 'P', 'L', 'C'};
inline constexpr std::uint8_t kProtocolVersion = 1;
inline constexpr std::size_t kHeaderSize = 42;
/// Upper bound on any payload; larger lengths are rejected as corrupt.
inline constexpr std::uint32_t kMaxPayload = 64u << 20;

enum class MsgType : std::uint8_t { data = 0, result = 1, perf_report = 2 };

const char* to_string(MsgType t);

/// Status codes carried in the `b` field of RESULT headers (s is 0 there).
enum class ResultStatus : std::uint8_t { ok = 0, malformed_frame = 1, model_error = 2 };

/**
 * Fixed 42-byte little-endian header:
 *
 *   off  size  field
 *     0     4  magic "SPLC"
 *     4     1  version (1)
 *     5     1  msg_type
 *     6     4  seq
 *    10     1  s
 *    11     1  b
 *    12     6  C, H, W (u16 each)
 *    18     4  sigma (IEEE-754 binary32)
 *    22     8  t_capture_us
 *    30     8  t_encode_done_us
 *    38     4  payload_len
 */
struct FrameHeader {
  MsgType type = MsgType::data;
  std::uint32_t seq = 0;
  std::uint8_t s = 0;
  std::uint8_t b = 0;
  std::uint16_t channels = 0, height = 0, width = 0;
  float sigma = 0.0f;
  std::uint64_t t_capture_us = 0;
  std::uint64_t t_encode_done_us = 0;
  std::uint32_t payload_len = 0;

  std::size_t numel() const { return std::size_t{channels} * height * width; }
  bool operator==(const FrameHeader&) const = default;
};

struct Frame {
  FrameHeader header;
  std::vector<std::uint8_t> payload;
  bool operator==(const Frame&) const = default;
};

enum class ProtocolErrorKind { bad_magic, unsupported_version, truncated, invariant_violation };

const char* to_string(ProtocolErrorKind k);

class ProtocolError : public std::runtime_error {
 public:
  ProtocolError(ProtocolErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}
  ProtocolErrorKind kind() const { return kind_; }
  /// Truncation is the only recoverable kind: more bytes may complete the frame.
  bool resumable() const { return kind_ == ProtocolErrorKind::truncated; }

 private:
  ProtocolErrorKind kind_;
};

/// Throws ProtocolError(invariant_violation) if the header breaks a rule for
/// its message type. `max_size` bounds s for DATA frames.
void validate_header(const FrameHeader& h, int max_size = 255);

std::vector<std::uint8_t> encode_header(const FrameHeader& h);
/// Validates, then writes header and payload.
std::vector<std::uint8_t> encode_frame(const FrameHeader& h, std::span<const std::uint8_t> payload);
/// Parses the first 42 bytes; magic, version and type are checked first.
FrameHeader decode_header(std::span<const std::uint8_t> bytes);
/// Decodes exactly one frame occupying all of `bytes`.
Frame decode_frame(std::span<const std::uint8_t> bytes);

/// Reassembles frames from arbitrarily fragmented input.
class FrameDecoder {
 public:
  void feed(std::span<const std::uint8_t> bytes);
  /// Next complete frame, or nullopt if more bytes are needed. Errors other
  /// than truncation are thrown as soon as they are detectable.
  std::optional<Frame> next();
  std::size_t buffered() const { return buffer_.size() - offset_; }

 private:
  std::vector<std::uint8_t> buffer_;
  std::size_t offset_ = 0;
};

// ---------------------------------------------------------------------------
// Message bodies.

struct ResultMessage {
  std::uint32_t seq = 0;  // echoes the DATA frame
  std::uint64_t t_server_recv_us = 0;
  std::uint64_t t_decode_done_us = 0;
  std::uint32_t decoder_time_us = 0;
  std::vector<float> result;
  bool operator==(const ResultMessage&) const = default;
};

std::vector<std::uint8_t> encode_result(const ResultMessage& r);
ResultMessage decode_result(std::span<const std::uint8_t> body);

struct PerfEntry {
  std::uint8_t s = 0, b = 0;
  std::uint32_t decoder_time_us = 0;
  bool operator==(const PerfEntry&) const = default;
};

/// Six bytes per entry. An empty PERF_REPORT sent by the edge is a request.
std::vector<std::uint8_t> encode_perf_report(std::span<const PerfEntry> entries);
std::vector<PerfEntry> decode_perf_report(std::span<const std::uint8_t> body);

// ---------------------------------------------------------------------------

enum class Role { edge, server };

class SessionError : public std::runtime_error {
 public:
  SessionError(const std::string& what, std::optional<std::uint32_t> last_seq)
      : std::runtime_error(what + (last_seq ? " (last complete seq " + std::to_string(*last_seq) + ")"
                                            : " (no complete frame received)")),
        last_seq_(last_seq) {}
  std::optional<std::uint32_t> last_complete_seq() const { return last_seq_; }

 private:
  std::optional<std::uint32_t> last_seq_;
};

/**
 * Framed message exchange over a Transport. The session stamps outgoing
 * frames with a per-direction sequence number and enforces that incoming
 * numbers strictly increase. The send half and the receive half may run on
 * different threads.
 */
class Session {
 public:
  Session(Transport& transport, Role role, int max_size = 255);

  /// Sets header.seq and sends; returns the seq used.
  std::uint32_t send(FrameHeader header, std::span<const std::uint8_t> payload);
  std::uint32_t send_result(const ResultMessage& r, ResultStatus status = ResultStatus::ok);
  std::uint32_t send_perf_report(std::span<const PerfEntry> entries);

  /// Next whole frame; nullopt when the peer closed cleanly between frames.
  std::optional<Frame> receive();

  std::optional<std::uint32_t> last_received_seq() const { return last_rx_; }
  Role role() const { return role_; }
  void close() { transport_.close(); }

 private:
  bool may_send(MsgType t) const;

  Transport& transport_;
  Role role_;
  int max_size_;
  std::mutex send_mu_;
  std::uint32_t next_tx_ = 0;
  std::optional<std::uint32_t> last_rx_;
  FrameDecoder decoder_;
};

}  // namespace slimsplit
