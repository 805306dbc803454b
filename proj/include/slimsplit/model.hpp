#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "slimsplit/autograd.hpp"
#include "slimsplit/ops.hpp"
#include "slimsplit/rng.hpp"

namespace slimsplit {

inline constexpr double kInstanceNormEps = 1e-5;

enum class BlockOperator { conv2d, fused_mbconv, fused_mbconv_t };

const char* to_string(BlockOperator op);

/// One stage row of an architecture table.
struct BlockSpec {
  BlockOperator op = BlockOperator::conv2d;
  Index channels = 1;
  Index stride = 1;
  Index kernel = 3;
  bool skip = false;
  Index expansion = 1;
};

class InvalidSpecError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/**
 * Six-stage edge encoder, 3 input channels, total stride 4, 6 output channels.
 *
 * The source architecture marks the channel-changing SR1 stage and the
 * stride-2 SR6 stage with a residual; a residual is only defined when the
 * block preserves shape, so those two skips are resolved to false here.
 */
std::vector<BlockSpec> encoder_spec();

/// Five-stage reconstructor: 6 -> 48 -> ... -> 24 channels, one 2x upscale.
std::vector<BlockSpec> reconstructor_spec();

/// Throws InvalidSpecError for malformed rows or an illegal residual.
void validate_spec(std::span<const BlockSpec> spec, Index in_channels);

// ---------------------------------------------------------------------------
// Execution policies. Every network forward is written once against an Exec:
// EagerExec evaluates tensors directly (double or float), GraphExec records
// onto a reverse-mode Graph for training.

template <typename Scalar>
struct EagerExec {
  using Value = BasicTensor<Scalar>;

  static BasicTensor<Scalar> weights_of(const Parameter& p) {
    if constexpr (std::is_same_v<Scalar, double>) {
      return p.value;
    } else {
      return p.value.template cast<Scalar>();
    }
  }

  Value conv2d(const Value& x, const Parameter& w, const Parameter* b, const ConvGeometry& g) {
    if constexpr (std::is_same_v<Scalar, double>) {
      return slimsplit::conv2d(x, w.value, b ? &b->value : nullptr, g);
    } else {
      const Value wv = weights_of(w);
      const Value bv = b ? weights_of(*b) : Value();
      return slimsplit::conv2d(x, wv, b ? &bv : nullptr, g);
    }
  }
  Value transpose_conv2d(const Value& x, const Parameter& w, const Parameter* b,
                         const ConvGeometry& g) {
    if constexpr (std::is_same_v<Scalar, double>) {
      return slimsplit::transpose_conv2d(x, w.value, b ? &b->value : nullptr, g);
    } else {
      const Value wv = weights_of(w);
      const Value bv = b ? weights_of(*b) : Value();
      return slimsplit::transpose_conv2d(x, wv, b ? &bv : nullptr, g);
    }
  }
  Value instance_norm(const Value& x) { return slimsplit::instance_norm(x, kInstanceNormEps); }
  Value silu(const Value& x) { return slimsplit::silu(x); }
  Value add(const Value& a, const Value& b) {
    require_same_shape(a.shape(), b.shape(), "add");
    return Value(a.shape(), a.data() + b.data());
  }
  Value weighted_sum(std::span<const Value> terms, std::span<const double> weights) {
    Value out(terms.front().shape());
    for (std::size_t i = 0; i < terms.size(); ++i) {
      require_same_shape(out.shape(), terms[i].shape(), "weighted_sum");
      out.data() += static_cast<Scalar>(weights[i]) * terms[i].data();
    }
    return out;
  }
};

struct GraphExec {
  using Value = Var;
  Graph& graph;

  Var conv2d(Var x, const Parameter& w, const Parameter* b, const ConvGeometry& g) {
    return graph.conv2d(x, graph.parameter(w), b ? std::optional<Var>(graph.parameter(*b)) : std::nullopt,
                        g);
  }
  Var transpose_conv2d(Var x, const Parameter& w, const Parameter* b, const ConvGeometry& g) {
    return graph.transpose_conv2d(x, graph.parameter(w),
                                  b ? std::optional<Var>(graph.parameter(*b)) : std::nullopt, g);
  }
  Var instance_norm(Var x) { return graph.instance_norm(x, kInstanceNormEps); }
  Var silu(Var x) { return graph.silu(x); }
  Var add(Var a, Var b) { return graph.add(a, b); }
  Var weighted_sum(std::span<const Var> terms, std::span<const double> weights) {
    return graph.weighted_sum(terms, weights);
  }
};

// ---------------------------------------------------------------------------

/// A Conv2D, Fused-MBConv or Fused-MBConvT stage.
///
/// Conv2D:        conv KxK/S -> instance norm -> SiLU
/// Fused-MBConv:  conv KxK/S to expansion*C -> SiLU -> conv 1x1 to C -> instance norm (+ x)
/// Fused-MBConvT: as Fused-MBConv with a transposed KxK/S expand conv (2x upscale at S=2)
class Block {
 public:
  Block(const BlockSpec& spec, Index in_channels, Rng& rng, const std::string& prefix);

  template <class Exec>
  typename Exec::Value forward(Exec& ex, const typename Exec::Value& x) const {
    const ConvGeometry expand = expand_geometry();
    typename Exec::Value h;
    switch (spec_.op) {
      case BlockOperator::conv2d:
        h = ex.conv2d(x, expand_w_, &expand_b_, expand);
        return ex.silu(ex.instance_norm(h));
      case BlockOperator::fused_mbconv:
        h = ex.silu(ex.conv2d(x, expand_w_, &expand_b_, expand));
        break;
      case BlockOperator::fused_mbconv_t:
        h = ex.silu(ex.transpose_conv2d(x, expand_w_, &expand_b_, expand));
        break;
    }
    h = ex.instance_norm(ex.conv2d(h, project_w_, &project_b_, ConvGeometry{1, 1, 0, 0}));
    if (spec_.skip) h = ex.add(h, x);
    return h;
  }

  const BlockSpec& spec() const { return spec_; }
  Index in_channels() const { return in_channels_; }
  Shape output_shape(const Shape& input) const;
  std::uint64_t macs(const Shape& input) const;

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;

 private:
  ConvGeometry expand_geometry() const;

  BlockSpec spec_;
  Index in_channels_;
  Index hidden_channels_;
  Parameter expand_w_, expand_b_, project_w_, project_b_;
};

/// Sequential stack of blocks.
class Network {
 public:
  Network() = default;
  Network(std::span<const BlockSpec> spec, Index in_channels, std::uint64_t seed,
          const std::string& prefix);

  template <class Exec>
  typename Exec::Value forward(Exec& ex, typename Exec::Value x) const {
    for (const Block& b : blocks_) x = b.forward(ex, x);
    return x;
  }

  template <typename Scalar>
  BasicTensor<Scalar> operator()(const BasicTensor<Scalar>& x) const {
    EagerExec<Scalar> ex;
    check_input(x.shape());
    return forward(ex, x);
  }

  Index in_channels() const { return in_channels_; }
  Index out_channels() const;
  Shape output_shape(const Shape& input) const;
  std::uint64_t macs(const Shape& input) const;
  std::size_t parameter_count() const;
  void check_input(const Shape& input) const;

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  const std::vector<Block>& blocks() const { return blocks_; }

 private:
  std::vector<Block> blocks_;
  Index in_channels_ = 0;
};

Network build_encoder(std::span<const BlockSpec> spec, std::uint64_t seed,
                      const std::string& prefix = "encoder");
Network build_reconstructor(std::span<const BlockSpec> spec, std::uint64_t seed,
                            const std::string& prefix = "reconstructor");

/// Aggregation weight of the i-th member (0-based): 2^-i.
inline double member_weight(int i) { return std::ldexp(1.0, -i); }

/// N identical-architecture encoders; size s sums the first s outputs with
/// weights 1, 1/2, 1/4, ...
class EnsembleEncoder {
 public:
  EnsembleEncoder() = default;
  EnsembleEncoder(std::span<const BlockSpec> spec, int max_size, std::uint64_t seed);

  int max_size() const { return static_cast<int>(members_.size()); }
  const Network& member(int i) const { return members_.at(static_cast<std::size_t>(i)); }
  Network& member(int i) { return members_.at(static_cast<std::size_t>(i)); }
  std::vector<double> weights(int size) const;

  void check_size(int size) const;

  /// Outputs of the first `count` members.
  template <class Exec>
  std::vector<typename Exec::Value> member_outputs(Exec& ex, const typename Exec::Value& x,
                                                   int count) const {
    check_size(count);
    std::vector<typename Exec::Value> outs;
    outs.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) outs.push_back(members_[static_cast<std::size_t>(i)].forward(ex, x));
    return outs;
  }

  /// Aggregate of precomputed member outputs at the given size.
  template <class Exec>
  typename Exec::Value combine(Exec& ex, std::span<const typename Exec::Value> outputs,
                               int size) const {
    check_size(size);
    if (outputs.size() < static_cast<std::size_t>(size)) {
      throw std::invalid_argument("ensemble combine: fewer member outputs than size");
    }
    const auto w = weights(size);
    return ex.weighted_sum(outputs.first(static_cast<std::size_t>(size)), w);
  }

  template <class Exec>
  typename Exec::Value forward(Exec& ex, const typename Exec::Value& x, int size) const {
    const auto outs = member_outputs(ex, x, size);
    return combine<Exec>(ex, outs, size);
  }

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;

 private:
  std::vector<Network> members_;
};

/// f_s(x) evaluated eagerly.
template <typename Scalar>
BasicTensor<Scalar> ensemble_forward(const EnsembleEncoder& enc, const BasicTensor<Scalar>& x,
                                     int size) {
  enc.check_size(size);
  enc.member(0).check_input(x.shape());
  EagerExec<Scalar> ex;
  return enc.forward(ex, x, size);
}

using FeatureMaps = std::array<Tensor, 3>;

/**
 * Frozen random-weight CNN standing in for the detector backbone. Yields
 * feature maps at strides 8, 16 and 32 with `width` channels each.
 * Layer scales are calibrated once at construction on a seeded probe so every
 * pre-activation starts near unit variance.
 */
class Teacher {
 public:
  static constexpr Index kWidth = 32;

  Teacher() = default;
  explicit Teacher(std::uint64_t seed, Index width = kWidth);

  FeatureMaps forward(const Tensor& x) const;
  std::array<Shape, 3> output_shapes(const Shape& input) const;
  Index width() const { return width_; }
  std::uint64_t seed() const { return seed_; }

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;

 private:
  struct Layer {
    Parameter w, b;
    Index stride;
  };
  std::vector<Layer> layers_;
  Index width_ = kWidth;
  std::uint64_t seed_ = 0;
};

inline FeatureMaps teacher_forward(const Teacher& t, const Tensor& x) { return t.forward(x); }

/// Trainable decoder tail mapping reconstructor features (stride 2) to three
/// maps at strides 8/16/32 that match the teacher.
class StudentHead {
 public:
  StudentHead() = default;
  StudentHead(Index in_channels, Index width, std::uint64_t seed);

  template <class Exec>
  std::array<typename Exec::Value, 3> forward(Exec& ex, const typename Exec::Value& x) const {
    const ConvGeometry down{3, 2, 1, 0};
    const ConvGeometry point{1, 1, 0, 0};
    auto h = ex.silu(ex.conv2d(x, stem_w_, &stem_b_, down));
    std::array<typename Exec::Value, 3> out;
    for (std::size_t i = 0; i < 3; ++i) {
      h = ex.silu(ex.conv2d(h, down_w_[i], &down_b_[i], down));
      out[i] = ex.conv2d(h, out_w_[i], &out_b_[i], point);
    }
    return out;
  }

  std::uint64_t macs(const Shape& input) const;
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;

 private:
  Parameter stem_w_, stem_b_;
  std::array<Parameter, 3> down_w_, down_b_, out_w_, out_b_;
};

/// Softmax regression over globally pooled feature maps (the desk-scale task).
class Classifier {
 public:
  Classifier() = default;
  Classifier(Index feature_channels, Index num_classes);

  static Eigen::VectorXd pooled_features(const FeatureMaps& maps);

  Eigen::VectorXd probabilities(const FeatureMaps& maps) const;
  Eigen::VectorXd probabilities_from_features(const Eigen::VectorXd& features) const;
  Index num_classes() const { return weights_.value.dim(0); }
  Index feature_size() const { return weights_.value.dim(1); }

  /// Full-batch gradient descent on cross-entropy; features are standardized
  /// with statistics of the training set.
  void fit(const std::vector<Eigen::VectorXd>& features, const std::vector<int>& labels,
           int iterations, double learning_rate);

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;

 private:
  Parameter feature_mean_, feature_scale_, weights_, bias_;
};

struct ModelConfig {
  int ensemble_size = 4;
  std::uint64_t seed = 1;
  Index num_classes = 4;
};

/// Everything on both sides of the split plus the distillation target.
class SplitModel {
 public:
  SplitModel() = default;
  explicit SplitModel(const ModelConfig& config);
  SplitModel(const SplitModel&) = default;
  SplitModel& operator=(const SplitModel&) = default;

  const ModelConfig& config() const { return config_; }
  EnsembleEncoder& encoder() { return encoder_; }
  const EnsembleEncoder& encoder() const { return encoder_; }
  Network& reconstructor() { return reconstructor_; }
  const Network& reconstructor() const { return reconstructor_; }
  StudentHead& head() { return head_; }
  const StudentHead& head() const { return head_; }
  Teacher& teacher() { return teacher_; }
  const Teacher& teacher() const { return teacher_; }
  Classifier& classifier() { return classifier_; }
  const Classifier& classifier() const { return classifier_; }

  /// Reconstructor followed by the student head.
  template <class Exec>
  std::array<typename Exec::Value, 3> decode(Exec& ex, const typename Exec::Value& z) const {
    return head_.forward(ex, reconstructor_.forward(ex, z));
  }

  /// Encoder members, reconstructor and head.
  std::vector<Parameter*> trainable_parameters();
  std::vector<const Parameter*> trainable_parameters() const;
  /// Every named tensor, frozen ones included (checkpoint contents).
  std::vector<Parameter*> all_parameters();
  std::vector<const Parameter*> all_parameters() const;

  /// Digest of the architecture (block tables, head, teacher layout).
  std::uint64_t spec_digest() const;

 private:
  ModelConfig config_;
  EnsembleEncoder encoder_;
  Network reconstructor_;
  StudentHead head_;
  Teacher teacher_;
  Classifier classifier_;
};

/// r = g_t(z~) evaluated eagerly.
template <typename Scalar>
std::array<BasicTensor<Scalar>, 3> student_decode(const Network& reconstructor,
                                                  const StudentHead& head,
                                                  const BasicTensor<Scalar>& z) {
  reconstructor.check_input(z.shape());
  EagerExec<Scalar> ex;
  return head.forward(ex, reconstructor.forward(ex, z));
}

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL);

}  // namespace slimsplit
