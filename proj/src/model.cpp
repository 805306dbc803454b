#include "slimsplit/model.hpp"

#include <algorithm>
#include <sstream>

namespace slimsplit {

const char* to_string(BlockOperator op) {
  switch (op) {
    case BlockOperator::conv2d: return "Conv2D";
    case BlockOperator::fused_mbconv: return "Fused-MBConv";
    case BlockOperator::fused_mbconv_t: return "Fused-MBConvT";
  }
  return "?";
}

std::vector<BlockSpec> encoder_spec() {
  using enum BlockOperator;
  return {
      {conv2d, 6, 2, 3, false, 1},
      {fused_mbconv, 4, 1, 3, false, 1},  // 6 -> 4 channels: no residual
      {fused_mbconv, 4, 1, 3, true, 1},
      {fused_mbconv, 6, 2, 3, false, 6},  // stride 2: no residual
      {fused_mbconv, 6, 1, 3, true, 6},
      {fused_mbconv, 6, 1, 3, false, 6},
  };
}

std::vector<BlockSpec> reconstructor_spec() {
  using enum BlockOperator;
  return {
      {fused_mbconv, 48, 1, 1, false, 6},
      {fused_mbconv, 48, 1, 3, true, 6},
      {fused_mbconv_t, 48, 2, 3, false, 6},
      {fused_mbconv, 48, 1, 3, true, 6},
      {fused_mbconv, 24, 1, 3, false, 6},
  };
}

void validate_spec(std::span<const BlockSpec> spec, Index in_channels) {
  if (spec.empty()) throw InvalidSpecError("architecture spec is empty");
  Index c = in_channels;
  for (std::size_t i = 0; i < spec.size(); ++i) {
    const BlockSpec& b = spec[i];
    const std::string where = "stage " + std::to_string(i + 1) + " (" + to_string(b.op) + ")";
    if (b.channels < 1 || b.stride < 1 || b.kernel < 1 || b.expansion < 1) {
      throw InvalidSpecError(where + ": channels, stride, kernel and expansion must be positive");
    }
    if (b.kernel % 2 == 0) throw InvalidSpecError(where + ": kernel must be odd");
    if (b.op == BlockOperator::conv2d && b.skip) {
      throw InvalidSpecError(where + ": plain convolution stages carry no residual");
    }
    if (b.skip && (b.stride != 1 || b.channels != c)) {
      throw InvalidSpecError(where + ": residual requires stride 1 and " + std::to_string(c) +
                             " -> " + std::to_string(b.channels) + " matching channels");
    }
    c = b.channels;
  }
}

// --- Block -------------------------------------------------------------------

namespace {

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
  return t;
}

}  // namespace

Block::Block(const BlockSpec& spec, Index in_channels, Rng& rng, const std::string& prefix)
    : spec_(spec), in_channels_(in_channels) {
  const Index k = spec.kernel;
  // U(-1/sqrt(fan_in), 1/sqrt(fan_in)). Larger He-style bounds destabilize
  // distillation from the first steps.
  hidden_channels_ = spec.op == BlockOperator::conv2d ? spec.channels : spec.expansion * spec.channels;
  const double expand_bound = 1.0 / std::sqrt(static_cast<double>(in_channels * k * k));
  if (spec.op == BlockOperator::fused_mbconv_t) {
    expand_w_ = Parameter(prefix + ".expand.w",
                          uniform_tensor({in_channels, hidden_channels_, k, k}, expand_bound, rng));
  } else {
    expand_w_ = Parameter(prefix + ".expand.w",
                          uniform_tensor({hidden_channels_, in_channels, k, k}, expand_bound, rng));
  }
  expand_b_ = Parameter(prefix + ".expand.b", Tensor::zeros({hidden_channels_}));
  if (spec.op != BlockOperator::conv2d) {
    const double project_bound = 1.0 / std::sqrt(static_cast<double>(hidden_channels_));
    project_w_ = Parameter(prefix + ".project.w",
                           uniform_tensor({spec.channels, hidden_channels_, 1, 1}, project_bound, rng));
    project_b_ = Parameter(prefix + ".project.b", Tensor::zeros({spec.channels}));
  }
}

ConvGeometry Block::expand_geometry() const {
  ConvGeometry g{spec_.kernel, spec_.stride, spec_.kernel / 2, 0};
  if (spec_.op == BlockOperator::fused_mbconv_t) g.output_padding = spec_.stride - 1;
  return g;
}

Shape Block::output_shape(const Shape& input) const {
  const ConvGeometry g = expand_geometry();
  if (spec_.op == BlockOperator::fused_mbconv_t) {
    return {spec_.channels, transpose_conv_output_size(input[1], g),
            transpose_conv_output_size(input[2], g)};
  }
  return {spec_.channels, conv_output_size(input[1], g), conv_output_size(input[2], g)};
}

std::uint64_t Block::macs(const Shape& input) const {
  const Shape out = output_shape(input);
  const Index k2 = spec_.kernel * spec_.kernel;
  const Index out_pixels = out[1] * out[2];
  Index expand = 0;
  if (spec_.op == BlockOperator::fused_mbconv_t) {
    expand = in_channels_ * hidden_channels_ * k2 * input[1] * input[2];
  } else {
    expand = hidden_channels_ * in_channels_ * k2 * out_pixels;
  }
  const Index project = spec_.op == BlockOperator::conv2d ? 0 : spec_.channels * hidden_channels_ * out_pixels;
  return static_cast<std::uint64_t>(expand + project);
}

std::vector<Parameter*> Block::parameters() {
  if (spec_.op == BlockOperator::conv2d) return {&expand_w_, &expand_b_};
  return {&expand_w_, &expand_b_, &project_w_, &project_b_};
}

std::vector<const Parameter*> Block::parameters() const {
  if (spec_.op == BlockOperator::conv2d) return {&expand_w_, &expand_b_};
  return {&expand_w_, &expand_b_, &project_w_, &project_b_};
}

// --- Network -----------------------------------------------------------------

Network::Network(std::span<const BlockSpec> spec, Index in_channels, std::uint64_t seed,
                 const std::string& prefix)
    : in_channels_(in_channels) {
  validate_spec(spec, in_channels);
  Rng rng(seed, {fnv1a64(prefix)});
  Index c = in_channels;
  for (std::size_t i = 0; i < spec.size(); ++i) {
    blocks_.emplace_back(spec[i], c, rng, prefix + ".b" + std::to_string(i + 1));
    c = spec[i].channels;
  }
}

Index Network::out_channels() const { return blocks_.back().spec().channels; }

void Network::check_input(const Shape& input) const {
  if (input.size() != 3 || input[0] != in_channels_) {
    throw ShapeError("network expects (" + std::to_string(in_channels_) + ",H,W) input, got " +
                     to_string(input));
  }
}

Shape Network::output_shape(const Shape& input) const {
  check_input(input);
  Shape s = input;
  for (const Block& b : blocks_) s = b.output_shape(s);
  return s;
}

std::uint64_t Network::macs(const Shape& input) const {
  check_input(input);
  std::uint64_t total = 0;
  Shape s = input;
  for (const Block& b : blocks_) {
    total += b.macs(s);
    s = b.output_shape(s);
  }
  return total;
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const Parameter* p : parameters()) n += static_cast<std::size_t>(p->value.size());
  return n;
}

std::vector<Parameter*> Network::parameters() {
  std::vector<Parameter*> out;
  for (Block& b : blocks_) {
    auto ps = b.parameters();
    out.insert(out.end(), ps.begin(), ps.end());
  }
  return out;
}

std::vector<const Parameter*> Network::parameters() const {
  std::vector<const Parameter*> out;
  for (const Block& b : blocks_) {
    auto ps = b.parameters();
    out.insert(out.end(), ps.begin(), ps.end());
  }
  return out;
}

Network build_encoder(std::span<const BlockSpec> spec, std::uint64_t seed,
                      const std::string& prefix) {
  return Network(spec, 3, seed, prefix);
}

Network build_reconstructor(std::span<const BlockSpec> spec, std::uint64_t seed,
                            const std::string& prefix) {
  return Network(spec, 6, seed, prefix);
}

// --- EnsembleEncoder ---------------------------------------------------------

EnsembleEncoder::EnsembleEncoder(std::span<const BlockSpec> spec, int max_size,
                                 std::uint64_t seed) {
  if (max_size < 1) throw std::invalid_argument("ensemble needs at least one member");
  for (int i = 0; i < max_size; ++i) {
    members_.push_back(build_encoder(spec, seed, "encoder.m" + std::to_string(i)));
  }
}

void EnsembleEncoder::check_size(int size) const {
  if (size < 1 || size > max_size()) {
    throw std::out_of_range("ensemble size " + std::to_string(size) + " outside [1, " +
                            std::to_string(max_size()) + "]");
  }
}

std::vector<double> EnsembleEncoder::weights(int size) const {
  check_size(size);
  std::vector<double> w(static_cast<std::size_t>(size));
  for (int i = 0; i < size; ++i) w[static_cast<std::size_t>(i)] = member_weight(i);
  return w;
}

std::vector<Parameter*> EnsembleEncoder::parameters() {
  std::vector<Parameter*> out;
  for (Network& m : members_) {
    auto ps = m.parameters();
    out.insert(out.end(), ps.begin(), ps.end());
  }
  return out;
}

std::vector<const Parameter*> EnsembleEncoder::parameters() const {
  std::vector<const Parameter*> out;
  for (const Network& m : members_) {
    auto ps = m.parameters();
    out.insert(out.end(), ps.begin(), ps.end());
  }
  return out;
}

// --- Teacher -----------------------------------------------------------------

Teacher::Teacher(std::uint64_t seed, Index width) : width_(width), seed_(seed) {
  struct Row {
    Index in, out, stride;
  };
  const std::vector<Row> rows = {
      {3, 16, 2}, {16, width, 2}, {width, width, 2}, {width, width, 1}, {width, width, 2},
      {width, width, 2},
  };
  Rng rng(seed, {fnv1a64("teacher")});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Row& r = rows[i];
    const double bound = std::sqrt(3.0 / static_cast<double>(r.in * 9));
    Layer layer{Parameter("teacher.l" + std::to_string(i) + ".w",
                          uniform_tensor({r.out, r.in, 3, 3}, bound, rng), false),
                Parameter("teacher.l" + std::to_string(i) + ".b", Tensor::zeros({r.out}), false),
                r.stride};
    layers_.push_back(std::move(layer));
  }
  // Scale each layer so its pre-activation has zero mean and unit variance on
  // a seeded probe image.
  Rng probe_rng(seed, {fnv1a64("teacher.probe")});
  Tensor h({3, 64, 64});
  for (Index i = 0; i < h.size(); ++i) h[i] = probe_rng.uniform(-1.0, 1.0);
  for (Layer& l : layers_) {
    Tensor pre = conv2d(h, l.w.value, nullptr, ConvGeometry{3, l.stride, 1, 0});
    const double mean = pre.data().mean();
    const double sd = std::sqrt((pre.data().array() - mean).square().mean());
    const double scale = sd > 0 ? 1.0 / sd : 1.0;
    l.w.value.data() *= scale;
    l.b.value.data().setConstant(-mean * scale);
    h = silu(conv2d(h, l.w.value, &l.b.value, ConvGeometry{3, l.stride, 1, 0}));
  }
}

FeatureMaps Teacher::forward(const Tensor& x) const {
  if (x.rank() != 3 || x.channels() != 3) {
    throw ShapeError("teacher expects (3,H,W) input, got " + to_string(x.shape()));
  }
  FeatureMaps out;
  Tensor h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const Layer& l = layers_[i];
    h = silu(conv2d(h, l.w.value, &l.b.value, ConvGeometry{3, l.stride, 1, 0}));
    if (i >= 3) out[i - 3] = h;
  }
  return out;
}

std::array<Shape, 3> Teacher::output_shapes(const Shape& input) const {
  std::array<Shape, 3> out;
  Index h = input.at(1), w = input.at(2);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const ConvGeometry g{3, layers_[i].stride, 1, 0};
    h = conv_output_size(h, g);
    w = conv_output_size(w, g);
    if (i >= 3) out[i - 3] = {width_, h, w};
  }
  return out;
}

std::vector<Parameter*> Teacher::parameters() {
  std::vector<Parameter*> out;
  for (Layer& l : layers_) {
    out.push_back(&l.w);
    out.push_back(&l.b);
  }
  return out;
}

std::vector<const Parameter*> Teacher::parameters() const {
  std::vector<const Parameter*> out;
  for (const Layer& l : layers_) {
    out.push_back(&l.w);
    out.push_back(&l.b);
  }
  return out;
}

// --- StudentHead -------------------------------------------------------------

StudentHead::StudentHead(Index in_channels, Index width, std::uint64_t seed) {
  Rng rng(seed, {fnv1a64("head")});
  const double stem_bound = 1.0 / std::sqrt(static_cast<double>(in_channels * 9));
  stem_w_ = Parameter("head.stem.w", uniform_tensor({width, in_channels, 3, 3}, stem_bound, rng));
  stem_b_ = Parameter("head.stem.b", Tensor::zeros({width}));
  const double down_bound = 1.0 / std::sqrt(static_cast<double>(width * 9));
  const double out_bound = 1.0 / std::sqrt(static_cast<double>(width));
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string p = "head.p" + std::to_string(i + 3);
    down_w_[i] = Parameter(p + ".down.w", uniform_tensor({width, width, 3, 3}, down_bound, rng));
    down_b_[i] = Parameter(p + ".down.b", Tensor::zeros({width}));
    out_w_[i] = Parameter(p + ".out.w", uniform_tensor({width, width, 1, 1}, out_bound, rng));
    out_b_[i] = Parameter(p + ".out.b", Tensor::zeros({width}));
  }
}

std::uint64_t StudentHead::macs(const Shape& input) const {
  const ConvGeometry down{3, 2, 1, 0};
  const Index width = stem_w_.value.dim(0);
  Index h = conv_output_size(input.at(1), down), w = conv_output_size(input.at(2), down);
  std::uint64_t total = static_cast<std::uint64_t>(width * input.at(0) * 9 * h * w);
  for (int i = 0; i < 3; ++i) {
    h = conv_output_size(h, down);
    w = conv_output_size(w, down);
    total += static_cast<std::uint64_t>(width * width * 9 * h * w + width * width * h * w);
  }
  return total;
}

std::vector<Parameter*> StudentHead::parameters() {
  std::vector<Parameter*> out{&stem_w_, &stem_b_};
  for (std::size_t i = 0; i < 3; ++i) {
    out.insert(out.end(), {&down_w_[i], &down_b_[i], &out_w_[i], &out_b_[i]});
  }
  return out;
}

std::vector<const Parameter*> StudentHead::parameters() const {
  std::vector<const Parameter*> out{&stem_w_, &stem_b_};
  for (std::size_t i = 0; i < 3; ++i) {
    out.insert(out.end(), {&down_w_[i], &down_b_[i], &out_w_[i], &out_b_[i]});
  }
  return out;
}

// --- Classifier --------------------------------------------------------------

Classifier::Classifier(Index feature_channels, Index num_classes)
    : feature_mean_("classifier.mean", Tensor::zeros({feature_channels}), false),
      feature_scale_("classifier.scale", Tensor::constant({feature_channels}, 1.0), false),
      weights_("classifier.w", Tensor::zeros({num_classes, feature_channels}), false),
      bias_("classifier.b", Tensor::zeros({num_classes}), false) {}

Eigen::VectorXd Classifier::pooled_features(const FeatureMaps& maps) {
  Index total = 0;
  for (const Tensor& m : maps) total += m.channels();
  Eigen::VectorXd f(total);
  Index at = 0;
  for (const Tensor& m : maps) {
    f.segment(at, m.channels()) = m.matrix().rowwise().mean();
    at += m.channels();
  }
  return f;
}

Eigen::VectorXd Classifier::probabilities_from_features(const Eigen::VectorXd& features) const {
  if (features.size() != feature_size()) {
    throw ShapeError("classifier expects " + std::to_string(feature_size()) + " features, got " +
                     std::to_string(features.size()));
  }
  const Eigen::VectorXd x =
      ((features - feature_mean_.value.data()).array() * feature_scale_.value.data().array()).matrix();
  const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> w(
      weights_.value.data().data(), num_classes(), feature_size());
  Eigen::VectorXd logits = w * x + bias_.value.data();
  logits.array() -= logits.maxCoeff();
  Eigen::VectorXd p = logits.array().exp();
  return p / p.sum();
}

Eigen::VectorXd Classifier::probabilities(const FeatureMaps& maps) const {
  return probabilities_from_features(pooled_features(maps));
}

void Classifier::fit(const std::vector<Eigen::VectorXd>& features, const std::vector<int>& labels,
                     int iterations, double learning_rate) {
  if (features.empty() || features.size() != labels.size()) {
    throw std::invalid_argument("classifier fit: need one label per feature vector");
  }
  const Index d = feature_size();
  const Index k = num_classes();
  const auto n = static_cast<Index>(features.size());
  Eigen::MatrixXd X(d, n);
  for (Index i = 0; i < n; ++i) X.col(i) = features[static_cast<std::size_t>(i)];
  const Eigen::VectorXd mean = X.rowwise().mean();
  const Eigen::VectorXd sd =
      ((X.colwise() - mean).array().square().rowwise().mean()).sqrt().matrix();
  Eigen::VectorXd inv = sd.unaryExpr([](double s) { return s > 1e-12 ? 1.0 / s : 1.0; });
  feature_mean_.value.data() = mean;
  feature_scale_.value.data() = inv;
  X = ((X.colwise() - mean).array().colwise() * inv.array()).matrix();

  Eigen::MatrixXd W = Eigen::MatrixXd::Zero(k, d);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(k);
  Eigen::MatrixXd Y = Eigen::MatrixXd::Zero(k, n);
  for (Index i = 0; i < n; ++i) Y(labels[static_cast<std::size_t>(i)], i) = 1.0;
  const double weight_decay = 1e-3;
  for (int it = 0; it < iterations; ++it) {
    Eigen::MatrixXd logits = (W * X).colwise() + b;
    for (Index i = 0; i < n; ++i) {
      logits.col(i).array() -= logits.col(i).maxCoeff();
      logits.col(i) = logits.col(i).array().exp();
      logits.col(i) /= logits.col(i).sum();
    }
    const Eigen::MatrixXd err = (logits - Y) / static_cast<double>(n);
    W -= learning_rate * (err * X.transpose() + weight_decay * W);
    b -= learning_rate * err.rowwise().sum();
  }
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      weights_.value.data().data(), k, d) = W;
  bias_.value.data() = b;
}

std::vector<Parameter*> Classifier::parameters() {
  return {&feature_mean_, &feature_scale_, &weights_, &bias_};
}

std::vector<const Parameter*> Classifier::parameters() const {
  return {&feature_mean_, &feature_scale_, &weights_, &bias_};
}

// --- SplitModel --------------------------------------------------------------

SplitModel::SplitModel(const ModelConfig& config)
    : config_(config),
      encoder_(encoder_spec(), config.ensemble_size, config.seed),
      reconstructor_(build_reconstructor(reconstructor_spec(), config.seed)),
      head_(reconstructor_.out_channels(), Teacher::kWidth, config.seed),
      teacher_(config.seed),
      classifier_(3 * Teacher::kWidth, config.num_classes) {}

std::vector<Parameter*> SplitModel::trainable_parameters() {
  std::vector<Parameter*> out = encoder_.parameters();
  for (Parameter* p : reconstructor_.parameters()) out.push_back(p);
  for (Parameter* p : head_.parameters()) out.push_back(p);
  return out;
}

std::vector<const Parameter*> SplitModel::trainable_parameters() const {
  std::vector<const Parameter*> out = encoder_.parameters();
  for (const Parameter* p : reconstructor_.parameters()) out.push_back(p);
  for (const Parameter* p : head_.parameters()) out.push_back(p);
  return out;
}

std::vector<Parameter*> SplitModel::all_parameters() {
  std::vector<Parameter*> out = trainable_parameters();
  for (Parameter* p : teacher_.parameters()) out.push_back(p);
  for (Parameter* p : classifier_.parameters()) out.push_back(p);
  return out;
}

std::vector<const Parameter*> SplitModel::all_parameters() const {
  std::vector<const Parameter*> out = trainable_parameters();
  for (const Parameter* p : teacher_.parameters()) out.push_back(p);
  for (const Parameter* p : classifier_.parameters()) out.push_back(p);
  return out;
}

std::uint64_t SplitModel::spec_digest() const {
  std::ostringstream os;
  auto rows = [&os](const char* tag, const std::vector<BlockSpec>& spec) {
    os << tag << ':';
    for (const BlockSpec& b : spec) {
      os << to_string(b.op) << ',' << b.channels << ',' << b.stride << ',' << b.kernel << ','
         << b.skip << ',' << b.expansion << ';';
    }
  };
  rows("encoder", encoder_spec());
  rows("reconstructor", reconstructor_spec());
  os << "head:" << Teacher::kWidth << ";teacher:" << teacher_.width()
     << ";classes:" << config_.num_classes;
  return fnv1a64(os.str());
}

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace slimsplit
