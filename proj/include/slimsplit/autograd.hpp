#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "slimsplit/ops.hpp"

namespace slimsplit {

/// A named trainable (or frozen) tensor with its accumulated gradient.
struct Parameter {
  std::string name;
  Tensor value;
  // Gradient accumulator; written by Graph::backward through const handles.
  mutable Tensor grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor v, bool train = true)
      : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros(value.shape())),
        trainable(train) {}

  void zero_grad() const { grad = Tensor::zeros(value.shape()); }
};

class Graph;

/// Handle to a value recorded on a Graph.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const { return id_; }
  const Graph* graph() const { return graph_; }

 private:
  friend class Graph;
  Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

/**
 * Reverse-mode tape over the handful of ops the encoder/decoder blocks use.
 *
 * Values are recorded in execution order; backward() walks the tape once in
 * reverse. A Parameter is recorded as a single leaf no matter how many times
 * it is used, and its gradient is added to Parameter::grad when backward
 * finishes (frozen parameters never receive gradient). A Graph is single-owner.
 */
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var input(Tensor value, bool requires_grad = false);
  Var parameter(const Parameter& p);

  Var conv2d(Var x, Var weights, std::optional<Var> bias, const ConvGeometry& g);
  Var transpose_conv2d(Var x, Var weights, std::optional<Var> bias, const ConvGeometry& g);
  Var instance_norm(Var x, double eps = 1e-5);
  Var silu(Var x);
  Var add(Var a, Var b);
  Var scale(Var a, double factor);
  /// a + offset; offset is a constant (noise, straight-through residual).
  Var add_constant(Var a, const Tensor& offset);
  /// Sum_i weights[i] * terms[i].
  Var weighted_sum(std::span<const Var> terms, std::span<const double> weights);
  /// ||a - target||^2 / numel, as a rank-1 single-element tensor.
  Var mse(Var a, const Tensor& target);
  Var mean(Var a);
  Var sum(std::span<const Var> scalars);

  void backward(Var output, const Tensor& output_gradient);
  /// Seeds a unit gradient; output must hold a single element.
  void backward(Var scalar_output);

  /// Gradient of the last backward pass with respect to v.
  Tensor grad(Var v) const;

  const Tensor& value(Var v) const;
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    const Parameter* param = nullptr;
    std::function<void(Graph&, Node&)> backward;
  };

  std::size_t check(Var v, const char* what) const;
  Var push(Tensor value, bool requires_grad, std::function<void(Graph&, Node&)> backward);
  void accumulate(std::size_t id, const Tensor& g);
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> parameter_ids_;
  bool backward_done_ = false;
};

}  // namespace slimsplit
