#include "slimsplit/autograd.hpp"

#include <stdexcept>

namespace slimsplit {

const Tensor& Var::value() const {
  if (!graph_) throw std::invalid_argument("Var: not attached to a graph");
  return graph_->value(*this);
}

std::size_t Graph::check(Var v, const char* what) const {
  if (v.graph_ != this || v.id_ >= nodes_.size()) {
    throw std::invalid_argument(std::string(what) + ": tensor is not in the recorded graph");
  }
  return v.id_;
}

const Tensor& Graph::value(Var v) const { return nodes_[check(v, "value")].value; }

Var Graph::push(Tensor value, bool requires_grad, std::function<void(Graph&, Node&)> backward) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  if (requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

void Graph::accumulate(std::size_t id, const Tensor& g) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (n.grad.empty()) {
    n.grad = g;
  } else {
    n.grad.data() += g.data();
  }
}

Var Graph::input(Tensor value, bool requires_grad) {
  return push(std::move(value), requires_grad, [](Graph&, Node&) {});
}

Var Graph::parameter(const Parameter& p) {
  if (auto it = parameter_ids_.find(&p); it != parameter_ids_.end()) return Var(this, it->second);
  Var v = push(p.value, p.trainable, [](Graph&, Node&) {});
  nodes_[v.id_].param = &p;
  parameter_ids_.emplace(&p, v.id_);
  return v;
}

Var Graph::conv2d(Var x, Var weights, std::optional<Var> bias, const ConvGeometry& g) {
  const std::size_t xi = check(x, "conv2d");
  const std::size_t wi = check(weights, "conv2d");
  const std::optional<std::size_t> bi =
      bias ? std::optional<std::size_t>(check(*bias, "conv2d")) : std::nullopt;
  Tensor out = slimsplit::conv2d(nodes_[xi].value, nodes_[wi].value,
                                 bi ? &nodes_[*bi].value : nullptr, g);
  const bool rg = requires_grad(xi) || requires_grad(wi) || (bi && requires_grad(*bi));
  return push(std::move(out), rg, [xi, wi, bi, g](Graph& G, Node& self) {
    const Tensor& x_val = G.nodes_[xi].value;
    const Tensor& w_val = G.nodes_[wi].value;
    if (G.requires_grad(xi)) {
      G.accumulate(xi, detail::conv2d_grad_input(self.grad, w_val, x_val.shape(), g));
    }
    if (G.requires_grad(wi)) {
      G.accumulate(wi, detail::conv2d_grad_weight(self.grad, x_val, g, w_val.shape()));
    }
    if (bi && G.requires_grad(*bi)) {
      G.accumulate(*bi, Tensor(G.nodes_[*bi].value.shape(), self.grad.matrix().rowwise().sum()));
    }
  });
}

Var Graph::transpose_conv2d(Var x, Var weights, std::optional<Var> bias, const ConvGeometry& g) {
  const std::size_t xi = check(x, "transpose_conv2d");
  const std::size_t wi = check(weights, "transpose_conv2d");
  const std::optional<std::size_t> bi =
      bias ? std::optional<std::size_t>(check(*bias, "transpose_conv2d")) : std::nullopt;
  Tensor out = slimsplit::transpose_conv2d(nodes_[xi].value, nodes_[wi].value,
                                           bi ? &nodes_[*bi].value : nullptr, g);
  const bool rg = requires_grad(xi) || requires_grad(wi) || (bi && requires_grad(*bi));
  return push(std::move(out), rg, [xi, wi, bi, g](Graph& G, Node& self) {
    const Tensor& x_val = G.nodes_[xi].value;
    const Tensor& w_val = G.nodes_[wi].value;
    ConvGeometry forward = g;
    forward.output_padding = 0;
    if (G.requires_grad(xi)) {
      // The adjoint of a transposed convolution is the plain convolution.
      const std::uint64_t before = mac_counter();
      G.accumulate(xi, slimsplit::conv2d(self.grad, w_val, nullptr, forward));
      mac_counter() = before;
    }
    if (G.requires_grad(wi)) {
      G.accumulate(wi, detail::conv2d_grad_weight(x_val, self.grad, forward, w_val.shape()));
    }
    if (bi && G.requires_grad(*bi)) {
      G.accumulate(*bi, Tensor(G.nodes_[*bi].value.shape(), self.grad.matrix().rowwise().sum()));
    }
  });
}

Var Graph::instance_norm(Var x, double eps) {
  const std::size_t xi = check(x, "instance_norm");
  Tensor out = slimsplit::instance_norm(nodes_[xi].value, eps);
  return push(std::move(out), requires_grad(xi), [xi, eps](Graph& G, Node& self) {
    G.accumulate(xi, detail::instance_norm_grad(G.nodes_[xi].value, self.grad, eps));
  });
}

Var Graph::silu(Var x) {
  const std::size_t xi = check(x, "silu");
  Tensor out = slimsplit::silu(nodes_[xi].value);
  return push(std::move(out), requires_grad(xi), [xi](Graph& G, Node& self) {
    G.accumulate(xi, detail::silu_grad(G.nodes_[xi].value, self.grad));
  });
}

Var Graph::add(Var a, Var b) {
  const std::size_t ai = check(a, "add");
  const std::size_t bi = check(b, "add");
  require_same_shape(nodes_[ai].value.shape(), nodes_[bi].value.shape(), "add");
  Tensor out(nodes_[ai].value.shape(), nodes_[ai].value.data() + nodes_[bi].value.data());
  return push(std::move(out), requires_grad(ai) || requires_grad(bi),
              [ai, bi](Graph& G, Node& self) {
                G.accumulate(ai, self.grad);
                G.accumulate(bi, self.grad);
              });
}

Var Graph::scale(Var a, double factor) {
  const std::size_t ai = check(a, "scale");
  Tensor out(nodes_[ai].value.shape(), nodes_[ai].value.data() * factor);
  return push(std::move(out), requires_grad(ai), [ai, factor](Graph& G, Node& self) {
    G.accumulate(ai, Tensor(self.grad.shape(), self.grad.data() * factor));
  });
}

Var Graph::add_constant(Var a, const Tensor& offset) {
  const std::size_t ai = check(a, "add_constant");
  require_same_shape(nodes_[ai].value.shape(), offset.shape(), "add_constant");
  Tensor out(offset.shape(), nodes_[ai].value.data() + offset.data());
  return push(std::move(out), requires_grad(ai),
              [ai](Graph& G, Node& self) { G.accumulate(ai, self.grad); });
}

Var Graph::weighted_sum(std::span<const Var> terms, std::span<const double> weights) {
  if (terms.empty() || terms.size() != weights.size()) {
    throw std::invalid_argument("weighted_sum: need one weight per term");
  }
  std::vector<std::size_t> ids;
  ids.reserve(terms.size());
  bool rg = false;
  for (Var t : terms) {
    ids.push_back(check(t, "weighted_sum"));
    rg = rg || requires_grad(ids.back());
  }
  const Shape& shape = nodes_[ids[0]].value.shape();
  Tensor out(shape);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require_same_shape(shape, nodes_[ids[i]].value.shape(), "weighted_sum");
    out.data() += weights[i] * nodes_[ids[i]].value.data();
  }
  std::vector<double> w(weights.begin(), weights.end());
  return push(std::move(out), rg, [ids, w](Graph& G, Node& self) {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (G.requires_grad(ids[i])) {
        G.accumulate(ids[i], Tensor(self.grad.shape(), self.grad.data() * w[i]));
      }
    }
  });
}

Var Graph::mse(Var a, const Tensor& target) {
  const std::size_t ai = check(a, "mse");
  require_same_shape(nodes_[ai].value.shape(), target.shape(), "mse");
  const auto n = static_cast<double>(target.size());
  Tensor diff(target.shape(), nodes_[ai].value.data() - target.data());
  Tensor out({1}, {diff.data().squaredNorm() / n});
  return push(std::move(out), requires_grad(ai),
              [ai, n, diff = std::move(diff)](Graph& G, Node& self) {
                G.accumulate(ai, Tensor(diff.shape(), diff.data() * (2.0 * self.grad[0] / n)));
              });
}

Var Graph::mean(Var a) {
  const std::size_t ai = check(a, "mean");
  const Tensor& v = nodes_[ai].value;
  const auto n = static_cast<double>(v.size());
  Tensor out({1}, {v.data().sum() / n});
  return push(std::move(out), requires_grad(ai), [ai, n](Graph& G, Node& self) {
    G.accumulate(ai, Tensor::constant(G.nodes_[ai].value.shape(), self.grad[0] / n));
  });
}

Var Graph::sum(std::span<const Var> scalars) {
  std::vector<std::size_t> ids;
  double total = 0.0;
  bool rg = false;
  for (Var s : scalars) {
    ids.push_back(check(s, "sum"));
    if (nodes_[ids.back()].value.size() != 1) throw ShapeError("sum: expects scalar terms");
    total += nodes_[ids.back()].value[0];
    rg = rg || requires_grad(ids.back());
  }
  return push(Tensor({1}, {total}), rg, [ids](Graph& G, Node& self) {
    for (std::size_t id : ids) G.accumulate(id, self.grad);
  });
}

void Graph::backward(Var output, const Tensor& output_gradient) {
  const std::size_t oi = check(output, "backward");
  if (backward_done_) throw std::logic_error("backward: graph already consumed");
  require_same_shape(nodes_[oi].value.shape(), output_gradient.shape(), "backward");
  accumulate(oi, output_gradient);
  for (std::size_t i = oi + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, n);
  }
  for (Node& n : nodes_) {
    if (n.param && n.param->trainable && !n.grad.empty()) {
      if (n.param->grad.shape() != n.param->value.shape()) n.param->zero_grad();
      n.param->grad.data() += n.grad.data();
    }
  }
  backward_done_ = true;
}

void Graph::backward(Var scalar_output) {
  const std::size_t oi = check(scalar_output, "backward");
  if (nodes_[oi].value.size() != 1) {
    throw ShapeError("backward: implicit unit gradient needs a scalar output, got " +
                     to_string(nodes_[oi].value.shape()));
  }
  backward(scalar_output, Tensor::constant(nodes_[oi].value.shape(), 1.0));
}

Tensor Graph::grad(Var v) const {
  const std::size_t id = check(v, "grad");
  const Node& n = nodes_[id];
  if (!n.requires_grad) {
    throw std::invalid_argument("grad: tensor does not require gradient");
  }
  if (n.grad.empty()) {
    // Recorded but not on a path to the output.
    return Tensor::zeros(n.value.shape());
  }
  return n.grad;
}

}  // namespace slimsplit
