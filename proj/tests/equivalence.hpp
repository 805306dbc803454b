#pragma once

// Networked edge and server versus the in-process pipeline, shared by the
// runtime suite and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <thread>

#include "slimsplit/codec.hpp"
#include "slimsplit/dataset.hpp"
#include "slimsplit/runtime.hpp"
#include "slimsplit/transport.hpp"

namespace slimsplit::testing {

struct EquivalenceReport {
  std::size_t frames = 0;
  double max_abs_diff = 0.0;
};

/// Sends `frames_per_config` DATA frames for every (s, b) over `edge` while a
/// server thread answers from `server`, and compares each RESULT with
/// reference_inference on the same input.
inline EquivalenceReport networked_equivalence(std::shared_ptr<const SplitModel> model, Transport& edge,
                                               Transport& server, int frames_per_config, Index image_size,
                                               std::uint64_t seed) {
  ServerPipeline pipeline(model, ServerOptions{});
  std::exception_ptr server_error;
  std::thread worker([&] {
    try {
      ServerConnection c(server, pipeline, Timebase::wall());
      c.run();
    } catch (...) {
      server_error = std::current_exception();
    }
    server.close();
  });

  EquivalenceReport rep;
  std::exception_ptr edge_error;
  try {
    Session session(edge, Role::edge, model->encoder().max_size());
    for (;;) {
      auto f = session.receive();
      if (!f) throw std::runtime_error("server closed before PERF_REPORT");
      if (f->header.type == MsgType::perf_report) break;
    }
    std::uint32_t k = 0;
    for (int s = 1; s <= model->encoder().max_size(); ++s) {
      for (int b = 1; b <= 4; ++b) {
        for (int i = 0; i < frames_per_config; ++i, ++k) {
          const Tensor x = generate_sample(seed, Split::validation, k, image_size).image;
          const EdgeFrame ef = edge_pipeline(model->encoder(), x, {s, b});
          const std::uint32_t seq = session.send(ef.header, ef.payload);
          auto f = session.receive();
          if (!f || f->header.type != MsgType::result) throw std::runtime_error("no RESULT");
          if (static_cast<ResultStatus>(f->header.b) != ResultStatus::ok) throw std::runtime_error("RESULT not ok");
          const ResultMessage m = decode_result(f->payload);
          if (m.seq != seq) throw std::runtime_error("RESULT seq mismatch");
          const auto want = reference_inference(*model, x, {s, b});
          if (want.size() != m.result.size()) throw std::runtime_error("RESULT length mismatch");
          for (std::size_t j = 0; j < want.size(); ++j) {
            rep.max_abs_diff = std::max(rep.max_abs_diff, std::abs(double{want[j]} - double{m.result[j]}));
          }
          ++rep.frames;
        }
      }
    }
  } catch (...) {
    edge_error = std::current_exception();
  }
  edge.close();
  worker.join();
  if (edge_error) std::rethrow_exception(edge_error);
  if (server_error) std::rethrow_exception(server_error);
  return rep;
}

/// Synthetic device profile for small images: every row's payload matches
/// what a 6-channel bottleneck of `numel` symbols really puts on the wire.
inline PerfTable small_device_table(Index numel, double encode_per_member_ms = 20.0, double decode_ms = 10.0) {
  PerfTable t;
  for (int s = 1; s <= 4; ++s) {
    for (int b = 1; b <= 4; ++b) {
      t.set({{s, b}, encode_per_member_ms * s, decode_ms, payload_bytes(numel, b), 10.0 * s + b});
    }
  }
  return t;
}

}  // namespace slimsplit::testing
