#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>

namespace slimsplit {

class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An ordered, reliable byte stream.
class Transport {
 public:
  virtual ~Transport() = default;
  /// Blocks until every byte is accepted. Throws TransportError when closed.
  virtual void write_all(std::span<const std::uint8_t> bytes) = 0;
  /// Blocks until at least one byte is available; 0 means the peer closed.
  virtual std::size_t read_some(std::span<std::uint8_t> out) = 0;
  virtual void close() = 0;
};

using TransportPair = std::pair<std::unique_ptr<Transport>, std::unique_ptr<Transport>>;

/// Connected in-memory endpoints. Reads return at most `max_chunk` bytes, so
/// a chunk of 1 exercises byte-by-byte reassembly. Safe for one reader and one
/// writer thread per direction.
TransportPair make_pipe_pair(std::size_t max_chunk = 65536);

/// TCP over POSIX sockets.
std::unique_ptr<Transport> tcp_connect(const std::string& host, std::uint16_t port);

class TcpListener {
 public:
  /// Port 0 picks a free port.
  explicit TcpListener(std::uint16_t port, const std::string& host = "127.0.0.1");
  ~TcpListener();
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;

  std::uint16_t port() const { return port_; }
  std::unique_ptr<Transport> accept();
  void close();

 private:
  int fd_ = -1;
  std::uint16_t port_ = 0;
};

}  // namespace slimsplit
