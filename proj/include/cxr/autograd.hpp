#pragma once

// Tape-based reverse-mode differentiation over the kernels in ops.hpp.
//
// A Tape records every value produced during one forward pass together with a
// closure that maps the value's gradient onto its parents' gradients. Leaves
// bound to a Parameter push their gradient into Parameter::grad when
// backward() finishes; frozen parameters are recorded as constants.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cxr/ops.hpp"
#include "cxr/tensor.hpp"

namespace cxr {

template <typename T>
struct Parameter {
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;
  // Running statistics are stored like weights but never receive gradients.
  bool differentiable = true;

  bool learns() const noexcept { return trainable && differentiable; }
};

/// Name of the layer owning a tensor entry: everything before the last '.'.
inline std::string layer_of(const std::string& entry) {
  const auto dot = entry.rfind('.');
  return dot == std::string::npos ? entry : entry.substr(0, dot);
}

/// Named parameters kept in insertion order. References stay valid for the
/// lifetime of the store.
template <typename T>
class ParamStore {
 public:
  Parameter<T>& add(const std::string& name, Tensor<T> value, bool differentiable = true) {
    if (params_.count(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
    Tensor<T> grad = Tensor<T>::zeros_like(value);
    auto [it, _] = params_.emplace(name, Parameter<T>{std::move(value), std::move(grad), true,
                                                      differentiable});
    order_.push_back(name);
    return it->second;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  Parameter<T>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("no parameter '" + name + "'");
    return it->second;
  }
  const Parameter<T>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("no parameter '" + name + "'");
    return it->second;
  }

  const std::vector<std::string>& names() const noexcept { return order_; }
  std::size_t size() const noexcept { return order_.size(); }

  /// Distinct layer names in first-appearance order.
  std::vector<std::string> layers() const {
    std::vector<std::string> out;
    for (const auto& n : order_) {
      auto l = layer_of(n);
      if (out.empty() || out.back() != l) out.push_back(std::move(l));
    }
    return out;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, p] : params_) p.grad.fill(T{0});
  }

  /// Sets the trainable flag on every entry of a layer.
  void set_layer_trainable(const std::string& layer, bool trainable) {
    bool found = false;
    for (auto& [name, p] : params_) {
      if (layer_of(name) == layer) {
        p.trainable = trainable;
        found = true;
      }
    }
    if (!found) throw std::out_of_range("no layer '" + layer + "'");
  }

  bool layer_trainable(const std::string& layer) const {
    for (const auto& [name, p] : params_) {
      if (layer_of(name) == layer) return p.trainable;
    }
    throw std::out_of_range("no layer '" + layer + "'");
  }

  void set_all_trainable(bool trainable) {
    for (auto& [_, p] : params_) p.trainable = trainable;
  }

  /// Values and flags equal; gradients are ignored.
  bool same_values(const ParamStore& other) const {
    if (order_ != other.order_) return false;
    for (const auto& n : order_) {
      const auto& a = at(n);
      const auto& b = other.at(n);
      if (a.value != b.value || a.trainable != b.trainable) return false;
    }
    return true;
  }

 private:
  std::map<std::string, Parameter<T>> params_;
  std::vector<std::string> order_;
};

struct Var {
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::size_t id = kNone;
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(const Tensor<T>& grad_out, Tape& tape)>;

  Tape() = default;
  /// With grad_enabled == false nothing is tracked; used for inference.
  explicit Tape(bool grad_enabled) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const noexcept { return grad_enabled_; }

  Var constant(Tensor<T> value) { return push(std::move(value), false, {}, nullptr); }

  /// Leaf whose gradient is kept on the tape (read it back with grad()).
  Var input(Tensor<T> value, bool requires_grad = true) {
    return push(std::move(value), requires_grad && grad_enabled_, {}, nullptr);
  }

  /// Leaf bound to a parameter. Frozen or non-differentiable parameters are
  /// recorded without gradient tracking.
  Var param(Parameter<T>& p) {
    const bool track = p.learns() && grad_enabled_;
    Var v = push(p.value, track, {}, nullptr);
    if (track) nodes_[v.id].param = &p;
    return v;
  }

  Var record(Tensor<T> value, std::vector<Var> parents, BackwardFn fn) {
    bool needs = false;
    for (Var p : parents) needs = needs || requires_grad(p);
    return push(std::move(value), needs, std::move(parents), needs ? std::move(fn) : nullptr);
  }

  const Tensor<T>& value(Var v) const { return node(v).value; }

  /// Gradient accumulated on a node by the last backward(); zeros if none reached it.
  Tensor<T> grad(Var v) const {
    const auto& n = node(v);
    return n.grad.empty() ? Tensor<T>::zeros_like(n.value) : n.grad;
  }

  bool requires_grad(Var v) const { return node(v).requires_grad; }

  void accumulate(Var v, const Tensor<T>& g) {
    auto& n = nodes_.at(v.id);
    if (!n.requires_grad) return;
    if (g.shape() != n.value.shape()) {
      throw ShapeError("gradient shape " + shape_str(g.shape()) + " != value shape " +
                       shape_str(n.value.shape()));
    }
    if (n.grad.empty()) {
      n.grad = g;
    } else {
      for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
    }
  }

  /// Runs reverse accumulation from root. Parameter gradients are added to
  /// Parameter::grad, so call ParamStore::zero_grad() between steps.
  void backward(Var root, const Tensor<T>& seed) {
    if (root.id >= nodes_.size() || !nodes_[root.id].backward) {
      throw std::logic_error("backward() called without a recorded forward pass");
    }
    if (seed.shape() != nodes_[root.id].value.shape()) {
      throw ShapeError("backward seed shape " + shape_str(seed.shape()) + " != root shape " +
                       shape_str(nodes_[root.id].value.shape()));
    }
    for (auto& n : nodes_) n.grad = Tensor<T>();
    accumulate(root, seed);
    for (std::size_t i = root.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (n.grad.empty() || !n.requires_grad) continue;
      if (n.backward) {
        // Closures only touch parents, which sit earlier on the tape.
        n.backward(n.grad, *this);
      }
      if (n.param) {
        for (std::size_t k = 0; k < n.grad.size(); ++k) n.param->grad[k] += n.grad[k];
      }
    }
  }

  void backward(Var root) {
    backward(root, Tensor<T>(nodes_.at(root.id).value.shape(), T{1}));
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::vector<Var> parents;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
  };

  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw std::logic_error("variable not recorded on this tape");
    return nodes_[v.id];
  }

  Var push(Tensor<T> value, bool requires_grad, std::vector<Var> parents, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, std::move(parents), std::move(fn),
                          nullptr});
    return Var{nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
};

/// Differentiable wrappers. Each computes the forward kernel and records the
/// matching backward kernel.
namespace ag {

template <typename T>
Var conv2d(Tape<T>& tape, Var x, Var w, std::optional<Var> bias, std::size_t stride,
           Padding padding) {
  const Tensor<T>* b = bias ? &tape.value(*bias) : nullptr;
  auto out = ops::conv2d_forward(tape.value(x), tape.value(w), b, stride, padding);
  std::vector<Var> parents{x, w};
  if (bias) parents.push_back(*bias);
  return tape.record(std::move(out), parents,
                     [x, w, bias, stride, padding](const Tensor<T>& g, Tape<T>& t) {
                       auto gr = ops::conv2d_backward(t.value(x), t.value(w), g, stride, padding);
                       t.accumulate(x, gr.input);
                       t.accumulate(w, gr.weights);
                       if (bias) t.accumulate(*bias, gr.bias);
                     });
}

template <typename T>
Var depthwise_conv2d(Tape<T>& tape, Var x, Var w, std::size_t stride, Padding padding) {
  auto out = ops::depthwise_conv2d_forward(tape.value(x), tape.value(w), stride, padding);
  return tape.record(std::move(out), {x, w},
                     [x, w, stride, padding](const Tensor<T>& g, Tape<T>& t) {
                       auto gr = ops::depthwise_conv2d_backward(t.value(x), t.value(w), g, stride,
                                                                padding);
                       t.accumulate(x, gr.input);
                       t.accumulate(w, gr.weights);
                     });
}

/// Dense layer. Weights may also be stored as a (1, 1, in, out) pointwise kernel.
template <typename T>
Var dense(Tape<T>& tape, Var x, Var w, std::optional<Var> bias) {
  const Tensor<T>& wv = tape.value(w);
  const Shape wshape = wv.shape();
  const Tensor<T> w2 = wv.rank() == 2 ? wv : wv.reshaped({wv.dim(wv.rank() - 2), wv.shape().back()});
  const Tensor<T>* b = bias ? &tape.value(*bias) : nullptr;
  auto out = ops::dense_forward(tape.value(x), w2, b);
  std::vector<Var> parents{x, w};
  if (bias) parents.push_back(*bias);
  return tape.record(std::move(out), parents,
                     [x, w, bias, wshape, w2](const Tensor<T>& g, Tape<T>& t) {
                       auto gr = ops::dense_backward(t.value(x), w2, g);
                       t.accumulate(x, gr.input);
                       t.accumulate(w, gr.weights.reshaped(wshape));
                       if (bias) t.accumulate(*bias, gr.bias);
                     });
}

/// Batch normalization. In train mode batch statistics are used and, when
/// running statistics are given, blended into them.
template <typename T>
Var batch_norm(Tape<T>& tape, Var x, Var scale, Var shift, Parameter<T>* running_mean,
               Parameter<T>* running_var, Mode mode, double epsilon = kBnEpsilon,
               double momentum = kBnMomentum) {
  ops::BnForward<T> fwd;
  if (mode == Mode::Train) {
    fwd = ops::batch_norm_train_forward(tape.value(x), tape.value(scale), tape.value(shift),
                                        epsilon);
    if (running_mean && running_var) {
      BnStats<T> s{std::move(running_mean->value), std::move(running_var->value), {}, {}};
      ops::update_running_stats(s, fwd, momentum);
      running_mean->value = std::move(s.mean);
      running_var->value = std::move(s.variance);
    }
  } else {
    if (!running_mean || !running_var) {
      throw std::invalid_argument("inference batch norm needs stored statistics");
    }
    fwd = ops::batch_norm_infer_forward(tape.value(x), running_mean->value, running_var->value,
                                        tape.value(scale), tape.value(shift), epsilon);
  }
  Tensor<T> out = fwd.out;
  fwd.out = Tensor<T>();
  return tape.record(std::move(out), {x, scale, shift},
                     [x, scale, shift, mode, fwd = std::move(fwd)](const Tensor<T>& g, Tape<T>& t) {
                       auto gr = ops::batch_norm_backward(g, fwd, t.value(scale), mode);
                       t.accumulate(x, gr.input);
                       t.accumulate(scale, gr.scale);
                       t.accumulate(shift, gr.shift);
                     });
}

template <typename T>
Var swish(Tape<T>& tape, Var x) {
  return tape.record(ops::swish(tape.value(x)), {x}, [x](const Tensor<T>& g, Tape<T>& t) {
    t.accumulate(x, ops::swish_backward(t.value(x), g));
  });
}

template <typename T>
Var sigmoid(Tape<T>& tape, Var x) {
  auto y = ops::sigmoid(tape.value(x));
  return tape.record(y, {x}, [x, y](const Tensor<T>& g, Tape<T>& t) {
    t.accumulate(x, ops::sigmoid_backward(y, g));
  });
}

template <typename T>
Var relu(Tape<T>& tape, Var x) {
  return tape.record(ops::relu(tape.value(x)), {x}, [x](const Tensor<T>& g, Tape<T>& t) {
    t.accumulate(x, ops::relu_backward(t.value(x), g));
  });
}

template <typename T>
Var softmax(Tape<T>& tape, Var x) {
  auto y = ops::softmax(tape.value(x));
  return tape.record(y, {x}, [x, y](const Tensor<T>& g, Tape<T>& t) {
    const std::size_t c = y.shape().back();
    Tensor<T> dx = Tensor<T>::zeros_like(y);
    for (std::size_t r = 0; r < y.size() / c; ++r) {
      T dot{0};
      for (std::size_t k = 0; k < c; ++k) dot += g[r * c + k] * y[r * c + k];
      for (std::size_t k = 0; k < c; ++k) dx[r * c + k] = y[r * c + k] * (g[r * c + k] - dot);
    }
    t.accumulate(x, dx);
  });
}

/// Mean cross-entropy of softmax(logits) against class indices; a (1)-shaped loss.
template <typename T>
Var softmax_cross_entropy(Tape<T>& tape, Var logits, std::vector<std::size_t> labels) {
  auto probs = ops::softmax(tape.value(logits));
  const double loss = ops::cross_entropy(probs, std::span<const std::size_t>(labels));
  return tape.record(Tensor<T>({1}, {static_cast<T>(loss)}), {logits},
                     [logits, probs = std::move(probs), labels = std::move(labels)](
                         const Tensor<T>& g, Tape<T>& t) {
                       auto d = ops::softmax_cross_entropy_backward(
                           probs, std::span<const std::size_t>(labels));
                       for (auto& v : d.data()) v *= g[0];
                       t.accumulate(logits, d);
                     });
}

template <typename T>
Var dropout(Tape<T>& tape, Var x, double rate, Mode mode, std::uint64_t seed) {
  auto r = ops::dropout(tape.value(x), rate, mode, seed);
  if (r.mask.empty()) return x;
  return tape.record(std::move(r.out), {x}, [x, mask = std::move(r.mask)](const Tensor<T>& g,
                                                                          Tape<T>& t) {
    Tensor<T> dx = g;
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= mask[i];
    t.accumulate(x, dx);
  });
}

template <typename T>
Var global_avg_pool(Tape<T>& tape, Var x) {
  const Shape in_shape = tape.value(x).shape();
  return tape.record(ops::global_avg_pool(tape.value(x)), {x},
                     [x, in_shape](const Tensor<T>& g, Tape<T>& t) {
                       t.accumulate(x, ops::global_avg_pool_backward(in_shape, g));
                     });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  return tape.record(ops::residual_add(tape.value(a), tape.value(b)), {a, b},
                     [a, b](const Tensor<T>& g, Tape<T>& t) {
                       t.accumulate(a, g);
                       t.accumulate(b, g);
                     });
}

template <typename T>
Var channel_scale(Tape<T>& tape, Var x, Var gate) {
  return tape.record(ops::channel_scale(tape.value(x), tape.value(gate)), {x, gate},
                     [x, gate](const Tensor<T>& g, Tape<T>& t) {
                       auto [dx, dg] = ops::channel_scale_backward(t.value(x), t.value(gate), g);
                       t.accumulate(x, dx);
                       t.accumulate(gate, dg);
                     });
}

/// sum_i weights[i] * x[i]; a (1)-shaped scalar used as a probe loss.
template <typename T>
Var weighted_sum(Tape<T>& tape, Var x, const Tensor<T>& weights) {
  const auto& xv = tape.value(x);
  if (weights.size() != xv.size()) throw ShapeError("weighted_sum size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) acc += static_cast<double>(xv[i]) * weights[i];
  return tape.record(Tensor<T>({1}, {static_cast<T>(acc)}), {x},
                     [x, weights](const Tensor<T>& g, Tape<T>& t) {
                       Tensor<T> dx = weights.reshaped(t.value(x).shape());
                       for (auto& v : dx.data()) v *= g[0];
                       t.accumulate(x, dx);
                     });
}

template <typename T>
Var sum(Tape<T>& tape, Var x) {
  return weighted_sum(tape, x, Tensor<T>(tape.value(x).shape(), T{1}));
}

}  // namespace ag
}  // namespace cxr
