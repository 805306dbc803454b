#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "slimsplit/autograd.hpp"
#include "slimsplit/dataset.hpp"
#include "slimsplit/model.hpp"
#include "slimsplit/rng.hpp"

namespace slimsplit {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Period value meaning "never halve".
inline constexpr int kNoHalving = std::numeric_limits<int>::max();

/// What sits between encoder and decoder while training.
enum class TrainBottleneck {
  noise,           // z + U(-2^-s, 2^-s)
  identity,        // unquantized z
  straight_through // hard quantization forward, identity gradient
};

struct TrainConfig {
  int sizes_per_step = 4;  // S
  int max_size = 4;        // N
  int epochs = 5;
  double learning_rate = 0.002;
  int lr_halving_period = 5;  // epochs
  int batch_size = 16;
  std::uint64_t seed = 1;
  bool regularize = true;
  /// Only consulted when regularize is false.
  bool straight_through = false;
  int straight_through_bits = 2;
  Index train_samples = 2000;
  Index validation_samples = 200;
  Index image_size = 64;
  int classifier_iterations = 500;
  double classifier_learning_rate = 0.5;

  TrainBottleneck bottleneck() const {
    if (regularize) return TrainBottleneck::noise;
    return straight_through ? TrainBottleneck::straight_through : TrainBottleneck::identity;
  }
  void validate() const;
};

/// Sandwich rule: {1, N} followed by S - 2 uniform draws from [1, N].
std::vector<int> sample_sizes(int max_size, int sizes_per_step, Rng& rng);

inline double noise_bound(int size) { return std::ldexp(1.0, -size); }

/// z + U(-2^-s, 2^-s) elementwise.
Tensor regularize_noise(const Tensor& z, int size, Rng& rng);

/// Sum over distillation points of the per-point mean squared error.
double mse_loss(std::span<const Tensor> r, std::span<const Tensor> r_prime);
Var mse_loss(Graph& g, std::span<const Var> r, std::span<const Tensor> r_prime);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<Tensor> m, v;
  long step = 0;
};

/// One bias-corrected Adam step over the trainable parameters using their
/// accumulated gradients. Frozen parameters are left untouched.
void adam_update(std::span<Parameter* const> params, AdamState& state, double learning_rate,
                 const AdamConfig& cfg = {});

/// lr0 * 0.5^floor(epoch / period)
double lr_schedule(int epoch, const TrainConfig& config);

struct StepRecord {
  long step = 0;
  int epoch = 0;
  double learning_rate = 0.0;
  std::vector<int> sizes;
  double loss = 0.0;
};

std::string to_jsonl(const StepRecord& r);

/// Owns the optimizer state and the step sequence of Algorithm-style
/// ensemble slimmable training. Single-threaded and deterministic.
class Trainer {
 public:
  Trainer(SplitModel& model, const TrainConfig& config);

  /// Accumulates the batch-mean loss over the sampled sizes, backpropagates
  /// and applies one Adam step. Throws TrainingError on a non-finite loss.
  StepRecord train_step(std::span<const Sample> batch, int epoch);

  /// Full run over the dataset's train split, then fits the classifier.
  void fit(const ToyDataset& data, const std::function<void(const StepRecord&)>& on_step = {});

  const TrainConfig& config() const { return config_; }
  long steps() const { return step_; }

 private:
  SplitModel& model_;
  TrainConfig config_;
  AdamState adam_;
  Rng size_rng_;
  long step_ = 0;
};

/// Fits the classifier on teacher features of the train split.
void fit_classifier(SplitModel& model, const ToyDataset& data, int iterations,
                    double learning_rate);

// ---------------------------------------------------------------------------
// Evaluation.

/// Evaluation precision: nullopt is the unquantized (floating point) column.
using Precision = std::optional<int>;

struct EvalResult {
  double mse = 0.0;       // mean distillation loss
  double accuracy = 0.0;  // classifier accuracy on decoded features
  Index samples = 0;
};

/// z at size s, optionally passed through quantize/dequantize at `bits`.
Tensor bottleneck(const SplitModel& model, std::span<const Tensor> member_outputs, int size,
                  Precision bits);

/// Metrics over the first `count` validation samples for every requested
/// (size, precision) pair; result[i][j] is sizes[i] x precisions[j].
std::vector<std::vector<EvalResult>> evaluate_grid(const SplitModel& model, const ToyDataset& data,
                                                   std::span<const int> sizes,
                                                   std::span<const Precision> precisions,
                                                   Index count);

EvalResult evaluate(const SplitModel& model, const ToyDataset& data, int size, Precision bits,
                    Index count);

}  // namespace slimsplit
