#pragma once

// Shared oracles for the unit suites and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <span>
#include <vector>

#include "slimsplit/autograd.hpp"
#include "slimsplit/rng.hpp"

namespace slimsplit::testing {

inline std::filesystem::path fixture(const std::string& name) {
  return std::filesystem::path(SLIMSPLIT_FIXTURES) / name;
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = scale * rng.uniform(-1.0, 1.0);
  return t;
}

inline constexpr double kGradientFloor = 1e-4;

using GraphFn = std::function<Var(Graph&, std::span<const Var>)>;

/// <out, r> for a fixed projection r, evaluated on a fresh graph.
inline double projected(const GraphFn& fn, const std::vector<Tensor>& inputs, const Tensor& r) {
  Graph g;
  std::vector<Var> vars;
  for (const Tensor& t : inputs) vars.push_back(g.input(t, true));
  return fn(g, vars).value().data().dot(r.data());
}

/**
 * ||analytic - numeric|| / max(||analytic||, ||numeric||) over every input,
 * where the numeric gradient of <fn(inputs), r> is a central difference.
 * Returns the worst input's error. Norms below kGradientFloor count as the
 * floor, so a gradient that is exactly zero (a bias ahead of a norm) is not
 * judged against rounding noise in the difference quotient.
 */
inline double gradient_error(const GraphFn& fn, std::vector<Tensor> inputs, std::uint64_t seed,
                             double h = 1e-6) {
  Rng rng(seed, {0x6AD});
  Graph g;
  std::vector<Var> vars;
  for (const Tensor& t : inputs) vars.push_back(g.input(t, true));
  const Var out = fn(g, vars);
  const Tensor r = random_tensor(out.shape(), rng);
  g.backward(out, r);

  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor analytic = g.grad(vars[i]);
    Tensor numeric(inputs[i].shape());
    for (Index j = 0; j < inputs[i].size(); ++j) {
      const double keep = inputs[i][j];
      inputs[i][j] = keep + h;
      const double up = projected(fn, inputs, r);
      inputs[i][j] = keep - h;
      const double down = projected(fn, inputs, r);
      inputs[i][j] = keep;
      numeric[j] = (up - down) / (2.0 * h);
    }
    const double scale = std::max({analytic.data().norm(), numeric.data().norm(), kGradientFloor});
    worst = std::max(worst, (analytic.data() - numeric.data()).norm() / scale);
  }
  return worst;
}

/// As gradient_error, for Parameter leaves: compares Parameter::grad after
/// one backward pass with central differences on Parameter::value.
inline double parameter_gradient_error(const std::function<Var(Graph&)>& fn,
                                       std::span<Parameter* const> params, std::uint64_t seed,
                                       double h = 1e-6) {
  Rng rng(seed, {0x9A7});
  for (Parameter* p : params) p->zero_grad();
  Tensor r;
  {
    Graph g;
    const Var out = fn(g);
    r = random_tensor(out.shape(), rng);
    g.backward(out, r);
  }
  auto eval = [&] {
    Graph g;
    return fn(g).value().data().dot(r.data());
  };
  double worst = 0.0;
  for (Parameter* p : params) {
    Tensor numeric(p->value.shape());
    for (Index j = 0; j < p->value.size(); ++j) {
      const double keep = p->value[j];
      p->value[j] = keep + h;
      const double up = eval();
      p->value[j] = keep - h;
      const double down = eval();
      p->value[j] = keep;
      numeric[j] = (up - down) / (2.0 * h);
    }
    const double scale = std::max({p->grad.data().norm(), numeric.data().norm(), kGradientFloor});
    worst = std::max(worst, (p->grad.data() - numeric.data()).norm() / scale);
  }
  return worst;
}

}  // namespace slimsplit::testing
