// Command-line front end: training, evaluation, live edge/server and simulation.

#include <algorithm>
#include <atomic>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "slimsplit/checkpoint.hpp"
#include "slimsplit/codec.hpp"
#include "slimsplit/controller.hpp"
#include "slimsplit/dataset.hpp"
#include "slimsplit/netsim.hpp"
#include "slimsplit/protocol.hpp"
#include "slimsplit/runtime.hpp"
#include "slimsplit/training.hpp"

namespace fs = std::filesystem;
using namespace slimsplit;

namespace {

enum ExitCode { kOk = 0, kUsage = 2, kConfig = 3, kProtocol = 4, kModel = 5 };

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void add_train_options(CLI::App* app, TrainConfig& c) {
  app->add_option("--seed", c.seed, "RNG seed for init, data and sampling")->capture_default_str();
  app->add_option("--epochs", c.epochs, "Passes over the train split")->capture_default_str();
  app->add_option("--lr", c.learning_rate, "Initial Adam learning rate")->capture_default_str();
  app->add_option("--lr-halving-period", c.lr_halving_period, "Epochs between learning-rate halvings")
      ->capture_default_str();
  app->add_option("--batch-size", c.batch_size, "Samples per optimizer step")->capture_default_str();
  app->add_option("--sizes-per-step", c.sizes_per_step, "Ensemble sizes sampled per step (S >= 2)")
      ->capture_default_str();
  app->add_option("--max-size", c.max_size, "Ensemble members N")->capture_default_str();
  app->add_flag("--regularize,!--no-regularize", c.regularize, "Uniform-noise bottleneck during training")
      ->capture_default_str();
  app->add_flag("--straight-through", c.straight_through,
                "Without regularization, train through hard quantization");
  app->add_option("--straight-through-bits", c.straight_through_bits, "Bits for --straight-through")
      ->capture_default_str();
  app->add_option("--train-samples", c.train_samples, "Procedural train split size")->capture_default_str();
  app->add_option("--validation-samples", c.validation_samples, "Procedural validation split size")
      ->capture_default_str();
  app->add_option("--image-size", c.image_size, "Square input side in pixels")->capture_default_str();
  app->add_option("--classifier-iterations", c.classifier_iterations, "Gradient steps for the task head")
      ->capture_default_str();
  app->add_option("--classifier-lr", c.classifier_learning_rate, "Task head learning rate")
      ->capture_default_str();
}

std::shared_ptr<const SplitModel> load_model(const std::string& path, int max_size, std::uint64_t seed) {
  if (path.empty()) return std::make_shared<const SplitModel>(ModelConfig{max_size, seed, ToyDataset::kNumClasses});
  return std::make_shared<const SplitModel>(load_checkpoint(path));
}

std::vector<ConfigPoint> parse_configs(const std::string& spec, int max_size) {
  if (spec == "all") return config_space(max_size);
  std::vector<ConfigPoint> out;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    ConfigPoint c;
    char colon = 0;
    std::istringstream is(item);
    if (!(is >> c.s >> colon >> c.b) || colon != ':' || c.s < 1 || c.s > max_size || c.b < 1 || c.b > 4) {
      throw ConfigError("bad config '" + item + "': expected s:b with 1<=s<=" + std::to_string(max_size) +
                        " and 1<=b<=4");
    }
    out.push_back(c);
  }
  if (out.empty()) throw ConfigError("no configs given");
  return out;
}

PerfTable table_or_bench(const std::string& path, const SplitModel& model, Index image_size) {
  if (!path.empty()) return PerfTable::load_csv(path);
  std::cerr << "no --perf-table given; benchmarking this machine\n";
  const auto configs = config_space(model.encoder().max_size());
  return bench_perf_table(model, configs, BenchConfig{image_size, 3, 0, 1});
}

std::function<Tensor(std::uint32_t)> frame_source(const std::string& dir, std::uint64_t seed, Index size) {
  if (dir.empty()) {
    return [seed, size](std::uint32_t k) { return generate_sample(seed, Split::validation, k, size).image; };
  }
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".rimg") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ConfigError("no .rimg files in " + dir);
  return [files](std::uint32_t k) { return read_raw_image(files[k % files.size()]); };
}

struct Outputs {
  std::string decisions;
  std::string breakdown;
};

void write_outputs(const Outputs& o, const std::vector<FrameRecord>& records) {
  if (!o.decisions.empty()) write_decisions_jsonl(o.decisions, records);
  if (!o.breakdown.empty()) write_breakdown_csv(o.breakdown, records);
}

void print_summary(const std::vector<FrameRecord>& records, double deadline_ms) {
  std::size_t missed = 0;
  double total = 0;
  for (const auto& r : records) {
    total += r.breakdown.total_ms;
    if (r.breakdown.total_ms > deadline_ms) ++missed;
  }
  std::cout << records.size() << " frames, mean RTT "
            << (records.empty() ? 0.0 : total / static_cast<double>(records.size())) << " ms, " << missed
            << " past the " << deadline_ms << " ms deadline\n";
}

std::atomic<bool> g_stop{false};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adaptive split computing with slimmable ensemble encoders"};
  app.require_subcommand(1);

  // train
  TrainConfig train_cfg;
  std::string train_out, train_log;
  auto* train = app.add_subcommand("train", "Train encoder ensemble and decoder by distillation");
  add_train_options(train, train_cfg);
  train->add_option("--out", train_out, "Checkpoint path")->required();
  train->add_option("--log", train_log, "Per-step JSONL log");

  // eval-grid
  TrainConfig abl_cfg;
  abl_cfg.image_size = 32;
  abl_cfg.epochs = 1;
  abl_cfg.train_samples = 2720;
  abl_cfg.batch_size = 8;
  abl_cfg.lr_halving_period = kNoHalving;
  std::string eval_ckpt, eval_out;
  Index eval_samples = 100, eval_image = 32;
  std::uint64_t eval_data_seed = 1;
  bool ablation = false;
  std::vector<std::uint64_t> abl_seeds = {1, 2, 3};
  auto* eval = app.add_subcommand("eval-grid", "Metric grid over sizes x precisions, or the training ablation");
  eval->add_option("--checkpoint", eval_ckpt, "Trained checkpoint to score");
  eval->add_option("--samples", eval_samples, "Validation samples")->capture_default_str();
  eval->add_option("--eval-image-size", eval_image, "Validation image side")->capture_default_str();
  eval->add_option("--data-seed", eval_data_seed, "Validation data seed")->capture_default_str();
  eval->add_flag("--ablation", ablation, "Train all four arms from scratch per seed (5x10 grid)");
  eval->add_option("--seeds", abl_seeds, "Ablation seeds")->capture_default_str();
  add_train_options(eval, abl_cfg);
  eval->add_option("--out", eval_out, "CSV output")->required();

  // serve
  std::string serve_ckpt, serve_host = "127.0.0.1", serve_mode = "full", serve_table;
  std::uint16_t serve_port = 5577;
  Index serve_image = 64;
  std::size_t serve_max = 0;
  auto* serve_cmd = app.add_subcommand("serve", "Decode DATA frames from edge clients over TCP");
  serve_cmd->add_option("--checkpoint", serve_ckpt, "Model checkpoint (seeded init when absent)");
  serve_cmd->add_option("--host", serve_host, "Listen address")->capture_default_str();
  serve_cmd->add_option("--port", serve_port, "Listen port (0 picks one)")->capture_default_str();
  serve_cmd->add_option("--mode", serve_mode, "full or codec_only")
      ->check(CLI::IsMember({"full", "codec_only"}))
      ->capture_default_str();
  serve_cmd->add_option("--perf-table", serve_table, "Advertise decode times from this table");
  serve_cmd->add_option("--image-size", serve_image, "Input side used to calibrate decode times")
      ->capture_default_str();
  serve_cmd->add_option("--max-sessions", serve_max, "Exit after this many sessions (0: run forever)");

  // edge
  std::string edge_ckpt, edge_host = "127.0.0.1", edge_table, edge_input;
  std::uint16_t edge_port = 5577;
  ControllerConfig edge_cc;
  std::size_t edge_frames = 100;
  Index edge_image = 64;
  std::uint64_t edge_seed = 1;
  Outputs edge_out;
  auto* edge = app.add_subcommand("edge", "Run the adaptive edge loop against a server");
  edge->add_option("--checkpoint", edge_ckpt, "Model checkpoint (seeded init when absent)");
  edge->add_option("--host", edge_host, "Server address")->capture_default_str();
  edge->add_option("--port", edge_port, "Server port")->capture_default_str();
  edge->add_option("--perf-table", edge_table, "Encode times and metrics (benchmarked when absent)");
  edge->add_option("--input-dir", edge_input, "Directory of .rimg frames (procedural when absent)");
  edge->add_option("--image-size", edge_image, "Procedural frame side")->capture_default_str();
  edge->add_option("--seed", edge_seed, "Procedural frame seed")->capture_default_str();
  edge->add_option("--frames", edge_frames, "Frames to send")->capture_default_str();
  edge->add_option("--deadline-ms", edge_cc.deadline_ms, "RTT deadline")->capture_default_str();
  edge->add_option("--alpha", edge_cc.alpha, "EWMA smoothing")->capture_default_str();
  edge->add_option("--margin", edge_cc.margin, "Feasible iff margin*rtt <= deadline")->capture_default_str();
  edge->add_option("--switch-penalty-ms", edge_cc.switch_penalty_ms, "Hysteresis on config changes")
      ->capture_default_str();
  edge->add_option("--decisions", edge_out.decisions, "Decision JSONL");
  edge->add_option("--breakdown", edge_out.breakdown, "RTT breakdown CSV");

  // simulate
  std::string sim_mode = "dynamic", sim_ckpt, sim_table, sim_walk, sim_server = "codec_only", sim_grid_out;
  DynamicConfig dyn;
  double sim_dwell_ms = 15000.0, sim_rate = 100000.0;
  int sim_frames_per_config = 30;
  Outputs sim_out;
  auto* sim = app.add_subcommand("simulate", "Loopback edge and server over a simulated link");
  sim->add_option("--mode", sim_mode, "dynamic (walk replay) or static (per-config grid)")
      ->check(CLI::IsMember({"dynamic", "static"}))
      ->capture_default_str();
  sim->add_option("--checkpoint", sim_ckpt, "Model checkpoint (seeded init when absent)");
  sim->add_option("--perf-table", sim_table,
                  "Perf table (dynamic: reference device table; static: benchmarked when absent)");
  sim->add_option("--walk", sim_walk, "Distance schedule CSV (t_ms,distance_m)");
  sim->add_option("--dwell-ms", sim_dwell_ms, "Dwell per distance of the default walk")->capture_default_str();
  sim->add_option("--frames", dyn.frames, "Frames in the walk")->capture_default_str();
  sim->add_option("--deadline-ms", dyn.deadline_ms, "RTT deadline")->capture_default_str();
  sim->add_option("--alpha", dyn.alpha, "EWMA smoothing")->capture_default_str();
  sim->add_option("--switch-penalty-ms", dyn.switch_penalty_ms, "Hysteresis on config changes")
      ->capture_default_str();
  sim->add_option("--delay-ms", dyn.delay_ms, "One-way propagation delay")->capture_default_str();
  sim->add_option("--jitter-pct", dyn.jitter_pct, "Serialization jitter, percent")->capture_default_str();
  sim->add_option("--image-size", dyn.image_size, "Input side")->capture_default_str();
  sim->add_option("--server-mode", sim_server, "full or codec_only")
      ->check(CLI::IsMember({"full", "codec_only"}))
      ->capture_default_str();
  sim->add_option("--seed", dyn.seed, "Frame and jitter seed")->capture_default_str();
  sim->add_option("--rate-Bps", sim_rate, "Static mode link rate")->capture_default_str();
  sim->add_option("--frames-per-config", sim_frames_per_config, "Static mode frames per config")
      ->capture_default_str();
  sim->add_option("--grid-out", sim_grid_out, "Static mode grid CSV");
  sim->add_option("--decisions", sim_out.decisions, "Decision JSONL");
  sim->add_option("--breakdown", sim_out.breakdown, "RTT breakdown CSV");

  // bench
  std::string bench_ckpt, bench_configs = "all", bench_out;
  BenchConfig bench_cfg;
  auto* bench = app.add_subcommand("bench", "Time encode/decode per config into a PerfTable CSV");
  bench->add_option("--checkpoint", bench_ckpt, "Model checkpoint (seeded init when absent)");
  bench->add_option("--configs", bench_configs, "'all' or a list like 1:1,2:4")->capture_default_str();
  bench->add_option("--image-size", bench_cfg.image_size, "Input side")->capture_default_str();
  bench->add_option("--reps", bench_cfg.reps, "Best-of repetitions")->capture_default_str();
  bench->add_option("--eval-samples", bench_cfg.eval_samples, "Validation samples for the metric column")
      ->capture_default_str();
  bench->add_option("--out", bench_out, "PerfTable CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*train) {
      train_cfg.validate();
      SplitModel model(ModelConfig{train_cfg.max_size, train_cfg.seed, ToyDataset::kNumClasses});
      const ToyDataset data(train_cfg.seed, train_cfg.image_size, train_cfg.train_samples,
                            train_cfg.validation_samples);
      std::ofstream log;
      if (!train_log.empty()) {
        log.open(train_log, std::ios::trunc);
        if (!log) throw ConfigError("cannot write " + train_log);
      }
      Trainer trainer(model, train_cfg);
      trainer.fit(data, [&](const StepRecord& r) {
        if (log) log << to_jsonl(r) << '\n';
      });
      save_checkpoint(train_out, model);
      const EvalResult e = evaluate(model, data, train_cfg.max_size, std::nullopt, train_cfg.validation_samples);
      std::cout << trainer.steps() << " steps; validation mse " << e.mse << ", accuracy " << e.accuracy << '\n';
    } else if (*eval) {
      if (ablation) {
        abl_cfg.validate();
        std::vector<AblationGrid> grids;
        for (std::uint64_t s : abl_seeds) {
          grids.push_back(run_ablation_seed(AblationConfig{abl_cfg, eval_samples}, s,
                                            [](const std::string& m) { std::cerr << m << '\n'; }));
          write_ablation_csv(eval_out, grids);
        }
      } else {
        if (eval_ckpt.empty()) throw ConfigError("eval-grid needs --checkpoint or --ablation");
        const SplitModel model = load_checkpoint(eval_ckpt);
        const ToyDataset data(eval_data_seed, eval_image, 0, eval_samples);
        std::vector<int> sizes;
        for (int s = 1; s <= model.encoder().max_size(); ++s) sizes.push_back(s);
        const auto g = evaluate_grid(model, data, sizes, kAblationPrecisions, eval_samples);
        std::ofstream out(eval_out, std::ios::trunc);
        if (!out) throw ConfigError("cannot write " + eval_out);
        out << "s,bits,mse,accuracy\n";
        for (std::size_t i = 0; i < sizes.size(); ++i) {
          for (std::size_t j = 0; j < kAblationPrecisions.size(); ++j) {
            const Precision p = kAblationPrecisions[j];
            out << sizes[i] << ',' << (p ? std::to_string(*p) : "fp") << ',' << g[i][j].mse << ','
                << g[i][j].accuracy << '\n';
          }
        }
      }
    } else if (*serve_cmd) {
      const auto model = load_model(serve_ckpt, 4, 1);
      ServerOptions opts;
      opts.mode = serve_mode == "full" ? ComputeMode::full : ComputeMode::codec_only;
      if (!serve_table.empty()) {
        for (const PerfRow& r : PerfTable::load_csv(serve_table).rows()) opts.decode_ms[r.cfg] = r.decode_ms;
      } else {
        opts.decode_ms = measure_decode_ms(*model, serve_image / 4, serve_image / 4, 3);
      }
      ServerPipeline pipeline(model, opts);
      TcpListener listener(serve_port, serve_host);
      std::cout << "listening on " << serve_host << ':' << listener.port() << std::endl;
      std::signal(SIGINT, [](int) { g_stop = true; });
      serve(listener, pipeline, serve_max ? std::optional<std::size_t>(serve_max) : std::nullopt,
            [] { return g_stop.load(); });
    } else if (*edge) {
      const auto model = load_model(edge_ckpt, 4, 1);
      PerfTable table = table_or_bench(edge_table, *model, edge_image);
      auto transport = tcp_connect(edge_host, edge_port);
      Session session(*transport, Role::edge, model->encoder().max_size());
      edge_cc.header_bytes = kHeaderSize;
      edge_cc.result_bytes = kHeaderSize + 26 + 4 * static_cast<std::size_t>(model->classifier().num_classes());
      Controller controller(table, edge_cc);
      EdgeContext ctx{session, model->encoder(), Timebase::wall(), frame_source(edge_input, edge_seed, edge_image),
                      {}};
      await_perf_report(ctx, controller);
      const LoopResult res = control_loop(ctx, controller, edge_frames);
      session.close();
      write_outputs(edge_out, res.records);
      print_summary(res.records, edge_cc.deadline_ms);
      if (res.error) throw SessionError(*res.error, std::nullopt);
    } else if (*sim) {
      const auto model = load_model(sim_ckpt, 4, 1);
      if (sim_mode == "static") {
        StaticGridConfig sg;
        sg.model = model;
        sg.table = table_or_bench(sim_table, *model, 32);
        sg.image_size = 32;
        sg.frames_per_config = sim_frames_per_config;
        sg.rate_Bps = sim_rate;
        sg.delay_ms = dyn.delay_ms;
        sg.seed = dyn.seed;
        const auto rows = run_static_grid(sg);
        if (!sim_grid_out.empty()) write_grid_csv(sim_grid_out, rows);
        for (const GridRow& r : rows) std::cout << to_string(r.cfg) << "  " << r.rtt_ms << " ms\n";
      } else {
        dyn.model = model;
        if (!sim_table.empty()) dyn.table = PerfTable::load_csv(sim_table);
        dyn.walk = sim_walk.empty() ? default_walk(sim_dwell_ms) : load_walk_csv(sim_walk);
        dyn.server_mode = sim_server == "full" ? ComputeMode::full : ComputeMode::codec_only;
        const LoopResult res = run_dynamic(dyn);
        write_outputs(sim_out, res.records);
        print_summary(res.records, dyn.deadline_ms);
        if (res.error) throw SessionError(*res.error, std::nullopt);
      }
    } else if (*bench) {
      const auto model = load_model(bench_ckpt, 4, 1);
      const auto configs = parse_configs(bench_configs, model->encoder().max_size());
      const PerfTable t = bench_perf_table(*model, configs, bench_cfg);
      t.save_csv(bench_out);
      std::cout << "wrote " << t.size() << " rows to " << bench_out << '\n';
    }
  } catch (const ProtocolError& e) {
    std::cerr << "protocol error: " << e.what() << '\n';
    return kProtocol;
  } catch (const SessionError& e) {
    std::cerr << "protocol error: " << e.what() << '\n';
    return kProtocol;
  } catch (const TransportError& e) {
    std::cerr << "protocol error: " << e.what() << '\n';
    return kProtocol;
  } catch (const ModelError& e) {
    std::cerr << "model error: " << e.what() << '\n';
    return kModel;
  } catch (const ShapeError& e) {
    std::cerr << "model error: " << e.what() << '\n';
    return kModel;
  } catch (const CodecError& e) {
    std::cerr << "model error: " << e.what() << '\n';
    return kModel;
  } catch (const InvalidSpecError& e) {
    std::cerr << "model error: " << e.what() << '\n';
    return kModel;
  } catch (const TrainingError& e) {
    std::cerr << "model error: " << e.what() << '\n';
    return kModel;
  } catch (const std::exception& e) {
    // Checkpoint, perf table, trace files and option values.
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  }
  return kOk;
}
