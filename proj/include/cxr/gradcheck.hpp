#pragma once

// Central finite-difference audit of Tape::backward().

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cxr/autograd.hpp"
#include "cxr/rng.hpp"

namespace cxr {

struct GradCheckReport {
  double max_rel_error = 0.0;
  // One entry per checked tensor:
  // ||analytic - numeric|| / max(||analytic||, ||numeric||, floor).
  std::vector<double> per_param_errors;
  std::vector<std::string> names;
};

namespace detail {

inline double relative_error(const std::vector<double>& a, const std::vector<double>& b,
                             double floor = 0.0) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::max({std::sqrt(na), std::sqrt(nb), floor, 1e-30});
  return std::sqrt(diff) / denom;
}

/// Fixed random projection turning any output into a scalar loss.
template <typename T>
Tensor<T> probe_weights(const Shape& shape, std::uint64_t seed) {
  if (shape_size(shape) == 1) return Tensor<T>(shape, T{1});
  Rng rng(seed);
  Tensor<T> w(shape);
  for (auto& v : w.data()) v = static_cast<T>(rng.uniform(-1.0, 1.0));
  return w;
}

template <typename T>
double project(const Tensor<T>& y, const Tensor<T>& w) {
  double acc = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) acc += static_cast<double>(y[i]) * w[i];
  return acc;
}

}  // namespace detail

/// Checks gradients with respect to free input tensors. `build` records a
/// forward pass from the given leaves and returns its output; the output is
/// reduced to a scalar with a fixed random projection (identity for scalars).
template <typename T>
GradCheckReport check_gradients(
    std::vector<Tensor<T>> inputs,
    const std::function<Var(Tape<T>&, const std::vector<Var>&)>& build, double step = 1e-3,
    std::uint64_t probe_seed = 7) {
  Tensor<T> probe;
  std::vector<std::vector<double>> analytic;
  {
    Tape<T> tape;
    std::vector<Var> leaves;
    for (auto& x : inputs) leaves.push_back(tape.input(x, true));
    Var out = build(tape, leaves);
    probe = detail::probe_weights<T>(tape.value(out).shape(), probe_seed);
    tape.backward(out, probe);
    for (Var v : leaves) {
      auto g = tape.grad(v);
      analytic.emplace_back(g.data().begin(), g.data().end());
    }
  }
  auto evaluate = [&](const std::vector<Tensor<T>>& xs) {
    Tape<T> tape;
    std::vector<Var> leaves;
    for (const auto& x : xs) leaves.push_back(tape.input(x, true));
    return detail::project(tape.value(build(tape, leaves)), probe);
  };
  GradCheckReport report;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    std::vector<double> numeric(inputs[k].size());
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const T orig = inputs[k][i];
      const T hi = static_cast<T>(orig + step);
      const T lo = static_cast<T>(orig - step);
      inputs[k][i] = hi;
      const double up = evaluate(inputs);
      inputs[k][i] = lo;
      const double down = evaluate(inputs);
      inputs[k][i] = orig;
      // divide by the representable step, not the requested one
      numeric[i] = (up - down) / (static_cast<double>(hi) - static_cast<double>(lo));
    }
    const double err = detail::relative_error(analytic[k], numeric);
    report.per_param_errors.push_back(err);
    report.names.push_back("input" + std::to_string(k));
    report.max_rel_error = std::max(report.max_rel_error, err);
  }
  return report;
}

/// Same audit over the learnable entries of a parameter store. `build`
/// records a forward pass reading parameters through Tape::param().
/// `floor` bounds the error denominator from below so that tensors whose exact
/// gradient is zero (a bias feeding a train-mode batch norm) are compared in
/// absolute terms.
template <typename T>
GradCheckReport check_param_gradients(ParamStore<T>& store,
                                      const std::function<Var(Tape<T>&)>& build,
                                      double step = 1e-3, std::uint64_t probe_seed = 7,
                                      double floor = 0.0) {
  store.zero_grad();
  Tensor<T> probe;
  {
    Tape<T> tape;
    Var out = build(tape);
    probe = detail::probe_weights<T>(tape.value(out).shape(), probe_seed);
    tape.backward(out, probe);
  }
  auto evaluate = [&] {
    Tape<T> tape;
    return detail::project(tape.value(build(tape)), probe);
  };
  GradCheckReport report;
  for (const auto& name : store.names()) {
    auto& p = store.at(name);
    if (!p.learns()) continue;
    std::vector<double> analytic(p.grad.data().begin(), p.grad.data().end());
    std::vector<double> numeric(p.value.size());
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const T orig = p.value[i];
      const T hi = static_cast<T>(orig + step);
      const T lo = static_cast<T>(orig - step);
      p.value[i] = hi;
      const double up = evaluate();
      p.value[i] = lo;
      const double down = evaluate();
      p.value[i] = orig;
      // divide by the representable step, not the requested one
      numeric[i] = (up - down) / (static_cast<double>(hi) - static_cast<double>(lo));
    }
    const double err = detail::relative_error(analytic, numeric, floor);
    report.per_param_errors.push_back(err);
    report.names.push_back(name);
    report.max_rel_error = std::max(report.max_rel_error, err);
  }
  return report;
}

}  // namespace cxr
