#include "slimsplit/training.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "slimsplit/codec.hpp"

namespace slimsplit {

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
  if (sizes_per_step < 2) fail("sizes per step (S) must be at least 2 for the sandwich rule");
  if (max_size < 1 || max_size > 255) fail("max ensemble size (N) must be in [1, 255]");
  if (epochs < 0) fail("epochs must be non-negative");
  if (!(learning_rate >= 0.0)) fail("learning rate must be non-negative");
  if (lr_halving_period < 1) fail("lr halving period must be positive");
  if (batch_size < 1) fail("batch size must be positive");
  if (train_samples < 1 || validation_samples < 1) fail("sample counts must be positive");
  if (image_size < 8) fail("image size must be at least 8");
  if (straight_through_bits < 1 || straight_through_bits > 8) fail("straight-through bits must be in [1, 8]");
}

std::vector<int> sample_sizes(int max_size, int sizes_per_step, Rng& rng) {
  if (sizes_per_step < 2) {
    throw std::invalid_argument("sample_sizes: S must be at least 2, got " + std::to_string(sizes_per_step));
  }
  if (max_size < 1) throw std::invalid_argument("sample_sizes: N must be positive");
  std::vector<int> sizes{1, max_size};
  for (int i = 2; i < sizes_per_step; ++i) sizes.push_back(static_cast<int>(rng.uniform_int(1, max_size)));
  return sizes;
}

Tensor regularize_noise(const Tensor& z, int size, Rng& rng) {
  if (size < 1) throw std::invalid_argument("regularize_noise: size must be positive");
  const double a = noise_bound(size);
  Tensor out = z;
  for (Index i = 0; i < out.size(); ++i) {
    // uniform() is [0, 1); reject the single closed endpoint.
    double u = rng.uniform(-a, a);
    while (u == -a) u = rng.uniform(-a, a);
    out[i] += u;
  }
  return out;
}

double mse_loss(std::span<const Tensor> r, std::span<const Tensor> r_prime) {
  if (r.size() != r_prime.size()) throw ShapeError("mse_loss: point count mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    require_same_shape(r[i].shape(), r_prime[i].shape(), "mse_loss");
    total += (r[i].data() - r_prime[i].data()).squaredNorm() / static_cast<double>(r[i].size());
  }
  return total;
}

Var mse_loss(Graph& g, std::span<const Var> r, std::span<const Tensor> r_prime) {
  if (r.size() != r_prime.size() || r.empty()) throw ShapeError("mse_loss: point count mismatch");
  std::vector<Var> terms;
  for (std::size_t i = 0; i < r.size(); ++i) terms.push_back(g.mse(r[i], r_prime[i]));
  return g.sum(terms);
}

void adam_update(std::span<Parameter* const> params, AdamState& state, double learning_rate,
                 const AdamConfig& cfg) {
  if (state.m.empty()) {
    for (const Parameter* p : params) {
      state.m.push_back(Tensor::zeros(p->value.shape()));
      state.v.push_back(Tensor::zeros(p->value.shape()));
    }
  }
  if (state.m.size() != params.size()) throw std::logic_error("adam_update: parameter set changed");
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    if (!p.trainable) continue;
    if (p.grad.shape() != p.value.shape()) p.zero_grad();
    auto g = p.grad.data().array();
    auto m = state.m[i].data().array();
    auto v = state.v[i].data().array();
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.square();
    p.value.data().array() -= learning_rate * (m / c1) / ((v / c2).sqrt() + cfg.eps);
  }
}

double lr_schedule(int epoch, const TrainConfig& config) {
  if (epoch < 0) throw std::invalid_argument("lr_schedule: negative epoch");
  if (config.lr_halving_period == kNoHalving) return config.learning_rate;
  return config.learning_rate * std::ldexp(1.0, -(epoch / config.lr_halving_period));
}

std::string to_jsonl(const StepRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["epoch"] = r.epoch;
  j["lr"] = r.learning_rate;
  j["sampled_sizes"] = r.sizes;
  j["loss"] = r.loss;
  return j.dump();
}

Trainer::Trainer(SplitModel& model, const TrainConfig& config)
    : model_(model), config_(config), size_rng_(config.seed, {fnv1a64("sizes")}) {
  config_.validate();
  if (model.encoder().max_size() != config_.max_size) {
    throw std::invalid_argument("trainer: model has " + std::to_string(model.encoder().max_size()) +
                                " members, config asks for N=" + std::to_string(config_.max_size));
  }
}

StepRecord Trainer::train_step(std::span<const Sample> batch, int epoch) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  StepRecord rec;
  rec.step = step_;
  rec.epoch = epoch;
  rec.learning_rate = lr_schedule(epoch, config_);
  rec.sizes = sample_sizes(config_.max_size, config_.sizes_per_step, size_rng_);

  // Noise draws are independent per sampled size; without noise, repeated
  // sizes give identical terms and are evaluated once with a multiplicity.
  std::vector<std::pair<int, int>> terms;
  const TrainBottleneck mode = config_.bottleneck();
  if (mode == TrainBottleneck::noise) {
    for (int s : rec.sizes) terms.emplace_back(s, 1);
  } else {
    std::map<int, int> counts;
    for (int s : rec.sizes) ++counts[s];
    for (auto [s, c] : counts) terms.emplace_back(s, c);
  }
  const int needed = *std::max_element(rec.sizes.begin(), rec.sizes.end());

  auto params = model_.trainable_parameters();
  for (Parameter* p : params) p->zero_grad();
  Rng noise_rng(config_.seed, {fnv1a64("noise"), static_cast<std::uint64_t>(step_)});
  const double inv_batch = 1.0 / static_cast<double>(batch.size());

  double total = 0.0;
  for (const Sample& sample : batch) {
    const FeatureMaps target = model_.teacher().forward(sample.image);
    Graph g;
    GraphExec ex{g};
    const Var x = g.input(sample.image);
    const auto outs = model_.encoder().member_outputs(ex, x, needed);
    std::vector<Var> losses;
    for (auto [size, count] : terms) {
      Var z = model_.encoder().combine<GraphExec>(ex, outs, size);
      if (mode == TrainBottleneck::noise) {
        z = g.add_constant(z, regularize_noise(Tensor::zeros(z.shape()), size, noise_rng));
      } else if (mode == TrainBottleneck::straight_through) {
        const Tensor& zv = z.value();
        const Tensor q = quantize_roundtrip(zv, config_.straight_through_bits);
        z = g.add_constant(z, Tensor(zv.shape(), q.data() - zv.data()));
      }
      const auto r = model_.decode(ex, z);
      const Var l = mse_loss(g, r, target);
      if (!std::isfinite(l.value()[0])) {
        throw TrainingError("non-finite loss at ensemble size " + std::to_string(size) + " (step " +
                            std::to_string(step_) + ")");
      }
      losses.push_back(g.scale(l, count * inv_batch));
    }
    const Var loss = g.sum(losses);
    total += loss.value()[0];
    g.backward(loss);
  }
  adam_update(params, adam_, rec.learning_rate);
  rec.loss = total;
  ++step_;
  return rec;
}

void Trainer::fit(const ToyDataset& data, const std::function<void(const StepRecord&)>& on_step) {
  const Index n = data.size(Split::train);
  std::vector<Index> order(static_cast<std::size_t>(n));
  for (int epoch = 0; epoch < config_.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), Index{0});
    Rng shuffle(config_.seed, {fnv1a64("shuffle"), static_cast<std::uint64_t>(epoch)});
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
    }
    std::vector<Sample> batch;
    for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(config_.batch_size)) {
      batch.clear();
      const std::size_t end = std::min(order.size(), i + static_cast<std::size_t>(config_.batch_size));
      for (std::size_t k = i; k < end; ++k) batch.push_back(data.train(order[k]));
      const StepRecord rec = train_step(batch, epoch);
      if (on_step) on_step(rec);
    }
  }
  fit_classifier(model_, data, config_.classifier_iterations, config_.classifier_learning_rate);
}

void fit_classifier(SplitModel& model, const ToyDataset& data, int iterations,
                    double learning_rate) {
  std::vector<Eigen::VectorXd> features;
  std::vector<int> labels;
  for (Index i = 0; i < data.size(Split::train); ++i) {
    const Sample s = data.train(i);
    features.push_back(Classifier::pooled_features(model.teacher().forward(s.image)));
    labels.push_back(s.label);
  }
  model.classifier().fit(features, labels, iterations, learning_rate);
}

Tensor bottleneck(const SplitModel& model, std::span<const Tensor> member_outputs, int size,
                  Precision bits) {
  EagerExec<double> ex;
  Tensor z = model.encoder().combine<EagerExec<double>>(ex, member_outputs, size);
  if (bits) z = quantize_roundtrip(z, *bits);
  return z;
}

std::vector<std::vector<EvalResult>> evaluate_grid(const SplitModel& model, const ToyDataset& data,
                                                   std::span<const int> sizes,
                                                   std::span<const Precision> precisions,
                                                   Index count) {
  count = std::min(count, data.size(Split::validation));
  std::vector<std::vector<EvalResult>> grid(sizes.size(), std::vector<EvalResult>(precisions.size()));
  if (sizes.empty()) return grid;
  const int needed = *std::max_element(sizes.begin(), sizes.end());
  EagerExec<double> ex;
  for (Index i = 0; i < count; ++i) {
    const Sample s = data.validation(i);
    const FeatureMaps target = model.teacher().forward(s.image);
    const auto outs = model.encoder().member_outputs(ex, s.image, needed);
    for (std::size_t a = 0; a < sizes.size(); ++a) {
      for (std::size_t b = 0; b < precisions.size(); ++b) {
        const Tensor z = bottleneck(model, outs, sizes[a], precisions[b]);
        const FeatureMaps r = student_decode(model.reconstructor(), model.head(), z);
        EvalResult& e = grid[a][b];
        e.mse += mse_loss(r, target);
        Eigen::Index predicted = 0;
        model.classifier().probabilities(r).maxCoeff(&predicted);
        e.accuracy += predicted == s.label ? 1.0 : 0.0;
        ++e.samples;
      }
    }
  }
  for (auto& row : grid) {
    for (EvalResult& e : row) {
      if (e.samples) {
        e.mse /= static_cast<double>(e.samples);
        e.accuracy /= static_cast<double>(e.samples);
      }
    }
  }
  return grid;
}

EvalResult evaluate(const SplitModel& model, const ToyDataset& data, int size, Precision bits,
                    Index count) {
  const int sizes[] = {size};
  const Precision precisions[] = {bits};
  return evaluate_grid(model, data, sizes, precisions, count)[0][0];
}

}  // namespace slimsplit
