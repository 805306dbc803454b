#include <algorithm>
#include <chrono>
#include <fstream>

#include "slimsplit/codec.hpp"
#include "slimsplit/dataset.hpp"
#include "slimsplit/runtime.hpp"
#include "slimsplit/training.hpp"

namespace slimsplit {

namespace {

constexpr Index kReferenceBottleneck[3] = {6, 96, 96};

std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

std::size_t result_frame_bytes(std::size_t values) {
  return kHeaderSize + encode_result(ResultMessage{0, 0, 0, 0, std::vector<float>(values)}).size();
}

std::map<ConfigPoint, double> decode_column(const PerfTable& t) {
  std::map<ConfigPoint, double> out;
  for (const PerfRow& r : t.rows()) out[r.cfg] = r.decode_ms;
  return out;
}

}  // namespace

const std::vector<ReferenceRow>& ideal_link_reference() {
  static const std::vector<ReferenceRow> rows = {
      {{1, 1}, 211.2, 14.5}, {{1, 2}, 253.8, 27.7}, {{2, 1}, 289.9, 16.5}, {{1, 3}, 294.7, 32.0},
      {{1, 4}, 330.8, 34.3}, {{2, 2}, 331.4, 29.4}, {{3, 1}, 361.7, 16.4}, {{2, 3}, 369.4, 34.1},
      {{3, 2}, 399.8, 29.4}, {{2, 4}, 410.7, 36.1}, {{4, 1}, 438.2, 16.6}, {{3, 3}, 439.3, 34.2},
      {{4, 2}, 476.8, 29.7}, {{3, 4}, 482.6, 36.4}, {{4, 3}, 515.3, 34.6}, {{4, 4}, 553.8, 36.8},
  };
  return rows;
}

PerfTable reference_device_table() {
  const Index numel = kReferenceBottleneck[0] * kReferenceBottleneck[1] * kReferenceBottleneck[2];
  PerfTable t;
  for (const ReferenceRow& r : ideal_link_reference()) {
    t.set({r.cfg, 6.0 + 74.17 * r.cfg.s, 40.0, payload_bytes(numel, r.cfg.b), r.map});
  }
  return t;
}

// --- static grid ---------------------------------------------------------------

std::vector<GridRow> run_static_grid(const StaticGridConfig& config) {
  if (!config.model) throw std::invalid_argument("static grid needs a model");
  if (config.frames_per_config < 1) throw std::invalid_argument("static grid needs at least one frame");
  const auto model = config.model;
  std::vector<GridRow> rows;
  for (const PerfRow& row : config.table.rows()) {
    auto clock = std::make_shared<VirtualClock>();
    SimulatedLink link(ChannelModel::constant(config.rate_Bps, config.delay_ms),
                       ChannelModel::constant(config.rate_Bps, config.delay_ms), clock);
    ServerPipeline pipeline(model, ServerOptions{ComputeMode::full, decode_column(config.table)});
    ServerConnection server(link.b(), pipeline, Timebase::simulated(clock));
    Session session(link.a(), Role::edge, model->encoder().max_size());

    PerfTable single;
    single.set(row);
    ControllerConfig cc;
    cc.deadline_ms = std::numeric_limits<double>::infinity();
    cc.header_bytes = kHeaderSize;
    cc.result_bytes = result_frame_bytes(static_cast<std::size_t>(model->classifier().num_classes()));
    Controller controller(single, cc);

    EdgeContext ctx{session, model->encoder(), Timebase::simulated(clock),
                    [&](std::uint32_t k) {
                      return generate_sample(config.seed, Split::validation, k, config.image_size).image;
                    },
                    [&] { server.step(); }};
    server.start();
    await_perf_report(ctx, controller);
    const LoopResult res = control_loop(ctx, controller, static_cast<std::size_t>(config.frames_per_config));
    if (res.error) throw std::runtime_error("static grid " + to_string(row.cfg) + ": " + *res.error);

    GridRow g;
    g.cfg = row.cfg;
    g.metric = row.metric;
    g.payload_bytes = row.payload_bytes;
    g.frames = static_cast<int>(res.records.size());
    for (const FrameRecord& r : res.records) g.rtt_ms += r.breakdown.total_ms;
    g.rtt_ms /= g.frames;
    rows.push_back(g);
  }
  std::stable_sort(rows.begin(), rows.end(), [](const GridRow& a, const GridRow& b) { return a.rtt_ms < b.rtt_ms; });
  return rows;
}

void write_grid_csv(const std::filesystem::path& path, const std::vector<GridRow>& rows) {
  std::ofstream out = open_output(path);
  out << "rtt_ms,metric,s,b,payload_bytes,frames\n";
  char buf[160];
  for (const GridRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%.3f,%.6g,%d,%d,%zu,%d\n", r.rtt_ms, r.metric, r.cfg.s, r.cfg.b,
                  r.payload_bytes, r.frames);
    out << buf;
  }
}

// --- dynamic walk ----------------------------------------------------------------

LoopResult run_dynamic(const DynamicConfig& config) {
  const auto model = config.model ? config.model : std::make_shared<const SplitModel>(ModelConfig{});
  for (const ConfigPoint& c : config.table.configs()) {
    if (c.s > model->encoder().max_size()) {
      throw std::invalid_argument("perf table has " + to_string(c) + " but the model has N=" +
                                  std::to_string(model->encoder().max_size()));
    }
  }
  auto clock = std::make_shared<VirtualClock>();
  SimulatedLink link(
      walk_profile(config.walk, config.delay_ms, config.rate_map, config.jitter_pct, config.seed),
      walk_profile(config.walk, config.delay_ms, config.rate_map, config.jitter_pct, config.seed + 1), clock);
  ServerPipeline pipeline(model, ServerOptions{config.server_mode, decode_column(config.table)});
  ServerConnection server(link.b(), pipeline, Timebase::simulated(clock));
  Session session(link.a(), Role::edge, model->encoder().max_size());

  ControllerConfig cc;
  cc.deadline_ms = config.deadline_ms;
  cc.alpha = config.alpha;
  cc.switch_penalty_ms = config.switch_penalty_ms;
  cc.header_bytes = kHeaderSize;
  const std::size_t values = config.server_mode == ComputeMode::full
                                 ? static_cast<std::size_t>(model->classifier().num_classes())
                                 : 4;
  cc.result_bytes = result_frame_bytes(values);
  Controller controller(config.table, cc);

  EdgeContext ctx{session, model->encoder(), Timebase::simulated(clock),
                  [&](std::uint32_t k) {
                    return generate_sample(config.seed, Split::validation, k, config.image_size).image;
                  },
                  [&] { server.step(); }};
  server.start();
  await_perf_report(ctx, controller);
  return control_loop(ctx, controller, config.frames);
}

void write_decisions_jsonl(const std::filesystem::path& path, const std::vector<FrameRecord>& records) {
  std::ofstream out = open_output(path);
  for (const FrameRecord& r : records) out << to_jsonl(r.decision) << '\n';
}

void write_breakdown_csv(const std::filesystem::path& path, const std::vector<FrameRecord>& records) {
  std::ofstream out = open_output(path);
  out << breakdown_csv_header() << '\n';
  for (const FrameRecord& r : records) out << to_csv(r.breakdown) << '\n';
}

// --- ablation ----------------------------------------------------------------------

AblationGrid run_ablation_seed(const AblationConfig& config, std::uint64_t seed,
                               const std::function<void(const std::string&)>& log) {
  const auto t0 = std::chrono::steady_clock::now();
  AblationGrid grid;
  grid.seed = seed;
  const ToyDataset data(seed, config.base.image_size, config.base.train_samples,
                        config.base.validation_samples);
  for (const bool ensemble : {true, false}) {
    for (const bool regularize : {true, false}) {
      TrainConfig c = config.base;
      c.seed = seed;
      c.regularize = regularize;
      c.max_size = ensemble ? config.base.max_size : 1;
      c.sizes_per_step = ensemble ? config.base.sizes_per_step : 2;
      SplitModel model(ModelConfig{c.max_size, seed, ToyDataset::kNumClasses});
      Trainer trainer(model, c);
      trainer.fit(data);
      std::vector<int> sizes;
      for (int s = 1; s <= c.max_size; ++s) sizes.push_back(s);
      const auto g = evaluate_grid(model, data, sizes, kAblationPrecisions, config.eval_samples);
      const std::size_t col0 = regularize ? 0 : 5;
      for (std::size_t i = 0; i < sizes.size(); ++i) {
        const std::size_t row = ensemble ? i + 1 : 0;
        for (std::size_t j = 0; j < kAblationPrecisions.size(); ++j) {
          grid.metric[row][col0 + j] = -g[i][j].mse;
          grid.accuracy[row][col0 + j] = g[i][j].accuracy;
        }
      }
      if (log) {
        log("seed " + std::to_string(seed) + (ensemble ? " ensemble" : " single") +
            (regularize ? " regularized" : " unregularized") + ": fp metric " + std::to_string(-g[0][0].mse));
      }
    }
  }
  grid.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return grid;
}

void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationGrid>& grids) {
  std::ofstream out = open_output(path);
  out << "seed,row,fp_reg,b4_reg,b3_reg,b2_reg,b1_reg,fp_noreg,b4_noreg,b3_noreg,b2_noreg,b1_noreg\n";
  char buf[32];
  for (const AblationGrid& g : grids) {
    for (std::size_t r = 0; r < kAblationRows.size(); ++r) {
      out << g.seed << ',' << kAblationRows[r];
      for (double v : g.metric[r]) {
        std::snprintf(buf, sizeof buf, ",%.6f", v);
        out << buf;
      }
      out << '\n';
    }
  }
}

// --- bench -------------------------------------------------------------------------

PerfTable bench_perf_table(const SplitModel& model, std::span<const ConfigPoint> configs,
                           const BenchConfig& config) {
  const int reps = std::max(1, config.reps);
  const int n = model.encoder().max_size();
  const Tensor x = generate_sample(config.data_seed, Split::validation, 0, config.image_size).image;

  auto best_of = [&](auto&& fn) {
    Micros best = std::numeric_limits<Micros>::max();
    for (int r = 0; r < reps; ++r) best = std::min(best, time_call(fn));
    return us_to_ms(best);
  };

  // Members run one after another, so encode time at s is the running sum.
  std::vector<Tensor> outs(static_cast<std::size_t>(n));
  std::vector<double> encode(static_cast<std::size_t>(n + 1), 0.0);
  EagerExec<double> ex;
  for (int i = 0; i < n; ++i) {
    const double t = best_of([&] { outs[static_cast<std::size_t>(i)] = model.encoder().member(i)(x); });
    encode[static_cast<std::size_t>(i + 1)] = encode[static_cast<std::size_t>(i)] + t;
  }
  std::vector<double> combine(static_cast<std::size_t>(n + 1), 0.0);
  for (int s = 2; s <= n; ++s) {
    combine[static_cast<std::size_t>(s)] =
        best_of([&] { model.encoder().combine<EagerExec<double>>(ex, outs, s); });
  }
  const Tensor z = model.encoder().combine<EagerExec<double>>(ex, outs, n);
  std::map<int, double> pack;
  for (int b = 1; b <= 4; ++b) pack[b] = best_of([&] { pack_frame(z, n, b); });

  const auto decode = measure_decode_ms(model, z.height(), z.width(), reps);

  std::map<ConfigPoint, double> metric;
  if (config.eval_samples > 0) {
    const ToyDataset data(config.data_seed, config.image_size, 0, config.eval_samples);
    std::vector<int> sizes;
    for (int s = 1; s <= n; ++s) sizes.push_back(s);
    const std::vector<Precision> precisions = {1, 2, 3, 4};
    const auto g = evaluate_grid(model, data, sizes, precisions, config.eval_samples);
    for (int s = 1; s <= n; ++s) {
      for (int b = 1; b <= 4; ++b) {
        metric[{s, b}] = -g[static_cast<std::size_t>(s - 1)][static_cast<std::size_t>(b - 1)].mse;
      }
    }
  }

  PerfTable t;
  for (const ConfigPoint& c : configs) {
    if (c.s < 1 || c.s > n || c.b < 1 || c.b > 4) throw PerfTableError("bench: config " + to_string(c) + " out of range");
    PerfRow r;
    r.cfg = c;
    r.encode_ms = encode[static_cast<std::size_t>(c.s)] + combine[static_cast<std::size_t>(c.s)] + pack[c.b];
    r.decode_ms = decode.at({1, c.b});
    r.payload_bytes = payload_bytes(z.size(), c.b);
    auto m = metric.find(c);
    r.metric = m == metric.end() ? 0.0 : m->second;
    t.set(r);
  }
  return t;
}

}  // namespace slimsplit
