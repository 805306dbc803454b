#include <gtest/gtest.h>

#include <bit>
#include <thread>

#include "slimsplit/protocol.hpp"
#include "support.hpp"

using namespace slimsplit;
using slimsplit::testing::fixture;
using slimsplit::testing::read_bytes;

namespace {

FrameHeader golden_header() {
  FrameHeader h;
  h.type = MsgType::data;
  h.seq = 7;
  h.s = 2;
  h.b = 2;
  h.channels = 6;
  h.height = 16;
  h.width = 16;
  h.sigma = 1.0f;
  h.payload_len = 384;
  return h;
}

std::vector<std::uint8_t> golden_payload() {
  std::vector<std::uint8_t> p(384);
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = static_cast<std::uint8_t>((i * 37 + 11) % 256);
  return p;
}

FrameHeader random_data_header(Rng& rng) {
  FrameHeader h;
  h.seq = static_cast<std::uint32_t>(rng.next());
  h.s = static_cast<std::uint8_t>(rng.uniform_int(1, 4));
  h.b = static_cast<std::uint8_t>(rng.uniform_int(1, 8));
  h.channels = static_cast<std::uint16_t>(rng.uniform_int(1, 8));
  h.height = static_cast<std::uint16_t>(rng.uniform_int(1, 20));
  h.width = static_cast<std::uint16_t>(rng.uniform_int(1, 20));
  h.sigma = static_cast<float>(rng.uniform(0.0, 4.0));
  h.t_capture_us = rng.next();
  h.t_encode_done_us = rng.next();
  h.payload_len = static_cast<std::uint32_t>((h.numel() * h.b + 7) / 8);
  return h;
}

std::vector<std::uint8_t> random_bytes(std::size_t n, Rng& rng) {
  std::vector<std::uint8_t> out(n);
  for (auto& b : out) b = static_cast<std::uint8_t>(rng.next());
  return out;
}

ProtocolErrorKind kind_of(std::span<const std::uint8_t> bytes) {
  try {
    decode_frame(bytes);
  } catch (const ProtocolError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "frame decoded";
  return ProtocolErrorKind::invariant_violation;
}

}  // namespace

TEST(Golden, HeaderBytes) {
  const auto bytes = encode_header(golden_header());
  ASSERT_EQ(bytes.size(), kHeaderSize);
  const std::vector<std::uint8_t> prefix = {0x53, 0x50, 0x4C, 0x43, 0x01, 0x00, 0x07, 0x00, 0x00, 0x00, 0x02,
                                            0x02, 0x06, 0x00, 0x10, 0x00, 0x10, 0x00, 0x00, 0x00, 0x80, 0x3F};
  EXPECT_EQ(std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 22), prefix);
  EXPECT_EQ(bytes[38], 0x80);
  EXPECT_EQ(bytes[39], 0x01);
}

TEST(Golden, DataFrameFixture) {
  const auto bytes = read_bytes(fixture("data_frame.bin"));
  ASSERT_EQ(bytes.size(), 426u);
  EXPECT_EQ(encode_frame(golden_header(), golden_payload()), bytes);
  const Frame f = decode_frame(bytes);
  EXPECT_EQ(f.header, golden_header());
  EXPECT_EQ(f.payload, golden_payload());
}

TEST(Golden, OneBitFrameFixture) {
  const Frame f = decode_frame(read_bytes(fixture("data_frame_b1.bin")));
  EXPECT_EQ(f.header.seq, 0x01020304u);
  EXPECT_EQ(f.header.s, 4);
  EXPECT_EQ(f.header.b, 1);
  EXPECT_EQ(f.header.channels, 6);
  EXPECT_EQ(f.header.height, 8);
  EXPECT_EQ(f.header.width, 8);
  EXPECT_EQ(f.header.sigma, 0.8164966f);
  EXPECT_EQ(f.header.t_capture_us, 123456789u);
  EXPECT_EQ(f.header.t_encode_done_us, 123470000u);
  ASSERT_EQ(f.payload.size(), 48u);
  for (std::size_t i = 0; i < 48; ++i) EXPECT_EQ(f.payload[i], 255 - i);
}

TEST(Golden, ResultFrameFixture) {
  const Frame f = decode_frame(read_bytes(fixture("result_frame.bin")));
  EXPECT_EQ(f.header.type, MsgType::result);
  EXPECT_EQ(f.header.seq, 3u);
  EXPECT_EQ(f.header.b, static_cast<std::uint8_t>(ResultStatus::ok));
  const ResultMessage r = decode_result(f.payload);
  EXPECT_EQ(r.seq, 7u);
  EXPECT_EQ(r.t_server_recv_us, 1500u);
  EXPECT_EQ(r.t_decode_done_us, 41500u);
  EXPECT_EQ(r.decoder_time_us, 40000u);
  EXPECT_EQ(r.result, (std::vector<float>{0.125f, 0.25f, 0.5f, 0.125f}));
}

TEST(Golden, PerfReportFixture) {
  const Frame f = decode_frame(read_bytes(fixture("perf_report_frame.bin")));
  EXPECT_EQ(f.header.type, MsgType::perf_report);
  const auto entries = decode_perf_report(f.payload);
  ASSERT_EQ(entries.size(), 16u);
  std::size_t i = 0;
  for (int s = 1; s <= 4; ++s)
    for (int b = 1; b <= 4; ++b, ++i) {
      EXPECT_EQ(entries[i].s, s);
      EXPECT_EQ(entries[i].b, b);
      EXPECT_EQ(entries[i].decoder_time_us, 40000u + 1000u * s + b);
    }
}

TEST(Frame, RandomRoundTrip) {
  Rng rng(41);
  for (int i = 0; i < 500; ++i) {
    const FrameHeader h = random_data_header(rng);
    const auto payload = random_bytes(h.payload_len, rng);
    const auto bytes = encode_frame(h, payload);
    ASSERT_EQ(bytes.size(), kHeaderSize + h.payload_len);
    const Frame f = decode_frame(bytes);
    EXPECT_EQ(f.header, h);
    EXPECT_EQ(f.payload, payload);
  }
}

TEST(Frame, BodiesRoundTrip) {
  const ResultMessage r{9, 100, 2500, 2400, {1.0f, -0.5f, 3.25f}};
  EXPECT_EQ(decode_result(encode_result(r)), r);
  EXPECT_EQ(encode_result(r).size(), 26u + 12u);
  const std::vector<PerfEntry> p = {{1, 1, 5}, {4, 4, 0xFFFFFFFF}};
  EXPECT_EQ(decode_perf_report(encode_perf_report(p)), p);
  EXPECT_TRUE(decode_perf_report({}).empty());
}

TEST(Frame, PayloadLawIsEnforcedBeforeWriting) {
  FrameHeader h = golden_header();
  h.payload_len = 383;
  EXPECT_THROW(encode_frame(h, std::vector<std::uint8_t>(383)), ProtocolError);
  EXPECT_THROW(encode_frame(golden_header(), std::vector<std::uint8_t>(10)), ProtocolError);
  h = golden_header();
  h.b = 9;
  EXPECT_THROW(validate_header(h), ProtocolError);
  h = golden_header();
  h.s = 5;
  EXPECT_THROW(validate_header(h, 4), ProtocolError);
  h.s = 0;
  EXPECT_THROW(validate_header(h), ProtocolError);
}

TEST(Frame, ErrorKinds) {
  auto bytes = read_bytes(fixture("data_frame.bin"));
  auto bad = bytes;
  std::copy_n("XXXX", 4, bad.begin());
  EXPECT_EQ(kind_of(bad), ProtocolErrorKind::bad_magic);
  bad = bytes;
  bad[4] = 2;
  EXPECT_EQ(kind_of(bad), ProtocolErrorKind::unsupported_version);
  EXPECT_EQ(kind_of(std::span(bytes).first(10)), ProtocolErrorKind::truncated);
  EXPECT_EQ(kind_of(std::span(bytes).first(200)), ProtocolErrorKind::truncated);
  bad = bytes;
  bad[38] = 0x81;  // payload_len 385 with dims that need 384
  EXPECT_EQ(kind_of(bad), ProtocolErrorKind::invariant_violation);
  bad = bytes;
  bad[5] = 7;
  EXPECT_EQ(kind_of(bad), ProtocolErrorKind::invariant_violation);
  bad = bytes;
  bad.push_back(0);
  EXPECT_EQ(kind_of(bad), ProtocolErrorKind::invariant_violation);

  try {
    decode_frame(std::span(bytes).first(10));
  } catch (const ProtocolError& e) {
    EXPECT_TRUE(e.resumable());
  }
}

TEST(Decoder, TruncationAsksForMoreBytes) {
  const auto bytes = read_bytes(fixture("data_frame.bin"));
  FrameDecoder d;
  d.feed(std::span(bytes).first(10));
  EXPECT_FALSE(d.next());
  d.feed(std::span(bytes).subspan(10, 100));
  EXPECT_FALSE(d.next());
  d.feed(std::span(bytes).subspan(110));
  const auto f = d.next();
  ASSERT_TRUE(f);
  EXPECT_EQ(f->header, golden_header());
  EXPECT_EQ(d.buffered(), 0u);
}

TEST(Decoder, BadMagicIsReportedEarly) {
  FrameDecoder d;
  const std::uint8_t junk[] = {'S', 'P', 'X'};
  d.feed(junk);
  EXPECT_THROW(d.next(), ProtocolError);
}

TEST(Decoder, ByteByByteStream) {
  Rng rng(42);
  std::vector<Frame> sent;
  std::vector<std::uint8_t> stream;
  for (int i = 0; i < 20; ++i) {
    const FrameHeader h = random_data_header(rng);
    sent.push_back({h, random_bytes(h.payload_len, rng)});
    const auto bytes = encode_frame(h, sent.back().payload);
    stream.insert(stream.end(), bytes.begin(), bytes.end());
  }
  FrameDecoder d;
  std::vector<Frame> got;
  for (std::uint8_t b : stream) {
    d.feed(std::span(&b, 1));
    while (auto f = d.next()) got.push_back(*f);
  }
  EXPECT_EQ(got, sent);
}

TEST(Session, SingleByteTransportChunks) {
  auto [edge_t, server_t] = make_pipe_pair(1);
  Session edge(*edge_t, Role::edge, 4), server(*server_t, Role::server, 4);
  FrameHeader h = golden_header();
  h.seq = 0;
  edge.send(h, golden_payload());
  const auto f = server.receive();
  ASSERT_TRUE(f);
  EXPECT_EQ(f->header, h);
  EXPECT_EQ(f->payload, golden_payload());
}

TEST(Session, HundredFramesInOrder) {
  auto [edge_t, server_t] = make_pipe_pair(7);
  Rng rng(43);
  std::vector<Frame> sent;
  for (int i = 0; i < 100; ++i) {
    FrameHeader h = random_data_header(rng);
    h.seq = static_cast<std::uint32_t>(i);
    sent.push_back({h, random_bytes(h.payload_len, rng)});
  }
  std::thread writer([&, t = edge_t.get()] {
    Session edge(*t, Role::edge, 4);
    for (const Frame& f : sent) EXPECT_EQ(edge.send(f.header, f.payload), f.header.seq);
    edge.close();
  });
  Session server(*server_t, Role::server, 4);
  std::vector<Frame> got;
  while (auto f = server.receive()) got.push_back(*f);
  writer.join();
  EXPECT_EQ(got, sent);
  EXPECT_EQ(server.last_received_seq(), 99u);
}

TEST(Session, ResultAndPerfReportAreDemultiplexed) {
  auto [edge_t, server_t] = make_pipe_pair();
  Session edge(*edge_t, Role::edge), server(*server_t, Role::server);
  const std::vector<PerfEntry> perf = {{1, 1, 10}, {1, 2, 20}};
  server.send_perf_report(perf);
  server.send_result({0, 1, 2, 1, {0.5f}});
  server.send_perf_report(perf);
  server.send_result({1, 3, 4, 1, {}}, ResultStatus::model_error);
  std::vector<MsgType> types;
  for (int i = 0; i < 4; ++i) {
    const auto f = edge.receive();
    ASSERT_TRUE(f);
    types.push_back(f->header.type);
    if (f->header.type == MsgType::perf_report) {
      EXPECT_EQ(decode_perf_report(f->payload), perf);
    }
    if (i == 3) {
      EXPECT_EQ(f->header.b, static_cast<std::uint8_t>(ResultStatus::model_error));
    }
  }
  EXPECT_EQ(types, (std::vector<MsgType>{MsgType::perf_report, MsgType::result, MsgType::perf_report,
                                         MsgType::result}));
}

TEST(Session, RolesRestrictMessageTypes) {
  auto [edge_t, server_t] = make_pipe_pair();
  Session edge(*edge_t, Role::edge), server(*server_t, Role::server);
  EXPECT_THROW(edge.send_result({}), ProtocolError);
  EXPECT_THROW(server.send(golden_header(), golden_payload()), ProtocolError);
  EXPECT_NO_THROW(edge.send_perf_report({}));
}

TEST(Session, SequenceMustIncrease) {
  auto [edge_t, server_t] = make_pipe_pair();
  Session server(*server_t, Role::server);
  FrameHeader h = golden_header();
  h.seq = 5;
  edge_t->write_all(encode_frame(h, golden_payload()));
  edge_t->write_all(encode_frame(h, golden_payload()));
  ASSERT_TRUE(server.receive());
  try {
    server.receive();
    FAIL() << "expected SessionError";
  } catch (const SessionError& e) {
    EXPECT_EQ(e.last_complete_seq(), 5u);
  }
}

TEST(Session, CloseMidFrameReportsLastSeq) {
  auto [edge_t, server_t] = make_pipe_pair();
  Session edge(*edge_t, Role::edge), server(*server_t, Role::server);
  edge.send(golden_header(), golden_payload());
  const auto partial = encode_frame(golden_header(), golden_payload());
  edge_t->write_all(std::span(partial).first(50));
  edge.close();
  ASSERT_TRUE(server.receive());
  try {
    server.receive();
    FAIL() << "expected SessionError";
  } catch (const SessionError& e) {
    EXPECT_EQ(e.last_complete_seq(), 0u);
  }
}

TEST(Session, CleanCloseBetweenFrames) {
  auto [edge_t, server_t] = make_pipe_pair();
  Session server(*server_t, Role::server);
  edge_t->close();
  EXPECT_FALSE(server.receive());
}

TEST(Tcp, LoopbackCarriesFrames) {
  TcpListener listener(0);
  std::thread client([port = listener.port()] {
    auto t = tcp_connect("127.0.0.1", port);
    Session edge(*t, Role::edge);
    edge.send(golden_header(), golden_payload());
    const auto f = edge.receive();
    ASSERT_TRUE(f);
    EXPECT_EQ(decode_result(f->payload).seq, 0u);
  });
  auto conn = listener.accept();
  Session server(*conn, Role::server);
  const auto f = server.receive();
  ASSERT_TRUE(f);
  EXPECT_EQ(f->payload, golden_payload());
  server.send_result({f->header.seq, 0, 0, 0, {}});
  client.join();
}
