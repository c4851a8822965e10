#pragma once

// Adam, the reduce-on-plateau learning-rate rule, the training loop and
// evaluation into confusion matrices.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cxr/autograd.hpp"
#include "cxr/classify.hpp"
#include "cxr/data.hpp"
#include "cxr/errors.hpp"
#include "cxr/manifest.hpp"
#include "cxr/metrics.hpp"
#include "cxr/network.hpp"
#include "cxr/rng.hpp"

namespace cxr {

struct TrainConfig {
  double learning_rate = 1e-4;
  int patience = 2;
  double factor = 10.0;
  double min_delta = 1e-4;
  int epochs = 10;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  // re-estimate batch-norm statistics at the final weights after training
  bool recalibrate_bn = true;

  void validate() const {
    if (!(learning_rate > 0)) throw std::invalid_argument("learning rate must be > 0");
    if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
    if (patience < 1) throw std::invalid_argument("patience must be >= 1");
    if (!(factor > 1)) throw std::invalid_argument("factor must be > 1");
    if (min_delta < 0) throw std::invalid_argument("min_delta must be >= 0");
  }
};

// ------------------------------------------------------------------ Adam

template <typename T>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  std::map<std::string, Tensor<T>> m;
  std::map<std::string, Tensor<T>> v;
};

/// One bias-corrected Adam update of every learning parameter. Frozen and
/// non-differentiable entries get neither state nor update.
template <typename T>
void adam_step(ParamStore<T>& params, AdamState<T>& state, double lr) {
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (const auto& name : params.names()) {
    auto& p = params.at(name);
    if (!p.learns()) continue;
    if (p.grad.shape() != p.value.shape()) {
      throw ShapeError("gradient of '" + name + "' has shape " + shape_str(p.grad.shape()) +
                       ", parameter " + shape_str(p.value.shape()));
    }
    auto [mit, fresh] = state.m.try_emplace(name, Tensor<T>::zeros_like(p.value));
    auto vit = state.v.try_emplace(name, Tensor<T>::zeros_like(p.value)).first;
    if (!fresh && mit->second.shape() != p.value.shape()) {
      throw ShapeError("optimizer state of '" + name + "' does not match the parameter");
    }
    auto& m = mit->second;
    auto& v = vit->second;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = static_cast<double>(p.grad[i]);
      const double mi = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      const double vi = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      p.value[i] -= static_cast<T>(lr * (mi / c1) / (std::sqrt(vi / c2) + state.epsilon));
    }
  }
}

// ------------------------------------------------------------------ schedule

/// Divides the rate by `factor` once the monitored loss has failed to beat
/// its best by at least `min_delta` for `patience` consecutive epochs.
class PlateauSchedule {
 public:
  PlateauSchedule(double lr, int patience, double factor, double min_delta)
      : lr_(lr), patience_(patience), factor_(factor), min_delta_(min_delta) {}

  explicit PlateauSchedule(const TrainConfig& c)
      : PlateauSchedule(c.learning_rate, c.patience, c.factor, c.min_delta) {}

  double lr() const noexcept { return lr_; }

  /// Records an epoch's loss; the returned rate applies to the next epoch.
  double observe(double loss) {
    if (loss < best_ - min_delta_) {
      best_ = loss;
      bad_ = 0;
    } else if (++bad_ >= patience_) {
      lr_ /= factor_;
      bad_ = 0;
    }
    return lr_;
  }

 private:
  double lr_;
  int patience_;
  double factor_;
  double min_delta_;
  double best_ = std::numeric_limits<double>::infinity();
  int bad_ = 0;
};

/// Rate used in each epoch given the monitored losses.
inline std::vector<double> lr_trace(const std::vector<double>& losses, double lr, int patience,
                                    double factor, double min_delta = 1e-4) {
  PlateauSchedule s(lr, patience, factor, min_delta);
  std::vector<double> out;
  for (double l : losses) {
    out.push_back(s.lr());
    s.observe(l);
  }
  return out;
}

// ------------------------------------------------------------------ training

struct EpochRecord {
  int epoch = 0;
  double loss = 0;
  double lr = 0;
};

inline std::string trace_csv(const std::vector<EpochRecord>& trace) {
  std::ostringstream os;
  os << "epoch,loss,lr\n";
  char buf[96];
  for (const auto& r : trace) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g\n", r.epoch, r.loss, r.lr);
    os << buf;
  }
  return os.str();
}

/// Replaces every trainable batch-norm layer's running statistics with the
/// average of its batch statistics over one pass of `samples`. A short run's
/// moving averages still carry statistics of much earlier weights.
template <typename T>
void recalibrate_bn(Network<T>& net, const std::vector<Sample>& samples, std::size_t batch_size,
                    std::uint64_t seed = 0) {
  if (samples.empty() || batch_size == 0) throw std::invalid_argument("recalibration needs samples");
  const double saved = net.bn_momentum();
  std::size_t k = 0;
  for (std::size_t start = 0; start < samples.size(); start += batch_size, ++k) {
    std::vector<const Tensor<float>*> images;
    for (std::size_t i = start; i < std::min(samples.size(), start + batch_size); ++i) {
      images.push_back(&samples[i].image);
    }
    // cumulative mean: batch k enters with weight 1 / (k + 1)
    net.set_bn_momentum(static_cast<double>(k) / static_cast<double>(k + 1));
    Tape<T> tape(false);
    net.forward(tape, tape.constant(make_batch<T>(images)), Mode::Train, mix_seed(seed, k));
  }
  net.set_bn_momentum(saved);
}

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Mini-batch training for exactly config.epochs epochs on in-memory samples.
/// Returns the per-epoch mean loss and the rate each epoch used.
template <typename T>
std::vector<EpochRecord> train(Network<T>& net, const std::vector<Sample>& samples, Task task,
                               const TrainConfig& config, const EpochCallback& on_epoch = {}) {
  config.validate();
  if (samples.empty()) throw std::invalid_argument("cannot train on an empty sample set");
  if (static_cast<std::size_t>(net.num_classes()) != num_classes(task)) {
    throw ShapeError("network width " + std::to_string(net.num_classes()) + " does not match the task");
  }
  std::vector<std::size_t> labels;
  for (const auto& s : samples) labels.push_back(class_index(task, s.label));
  AdamState<T> adam;
  PlateauSchedule schedule(config);
  std::vector<EpochRecord> trace;
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::uint64_t step = 0;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    Rng rng(mix_seed(config.seed, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    const double lr = schedule.lr();
    double loss_sum = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<const Tensor<float>*> images;
      std::vector<std::size_t> y;
      for (std::size_t k = start; k < end; ++k) {
        images.push_back(&samples[order[k]].image);
        y.push_back(labels[order[k]]);
      }
      Tape<T> tape;
      net.params().zero_grad();
      auto out = net.forward(tape, tape.constant(make_batch<T>(images)), Mode::Train,
                             mix_seed(config.seed ^ 0x5eed, ++step));
      Var loss = ag::softmax_cross_entropy(tape, out.logits, y);
      const double value = static_cast<double>(tape.value(loss)[0]);
      if (!std::isfinite(value)) {
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch starting at " +
                            std::to_string(start) + " (lr " + std::to_string(lr) + ")");
      }
      if (tape.requires_grad(loss)) {
        tape.backward(loss);
        adam_step(net.params(), adam, lr);
      }
      loss_sum += value * static_cast<double>(end - start);
    }
    EpochRecord rec{epoch, loss_sum / static_cast<double>(samples.size()), lr};
    schedule.observe(rec.loss);
    trace.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  if (config.recalibrate_bn) recalibrate_bn(net, samples, config.batch_size, config.seed);
  return trace;
}

// ------------------------------------------------------------------ evaluation

inline std::vector<const Tensor<float>*> image_ptrs(const std::vector<Sample>& samples) {
  std::vector<const Tensor<float>*> out;
  for (const auto& s : samples) out.push_back(&s.image);
  return out;
}

inline const std::vector<std::string>& class_names() {
  static const std::vector<std::string> names{"Normal", "Pneumonia", "COVID19"};
  return names;
}

struct FlatEvaluation {
  ConfusionMatrix matrix{3};
  MetricsReport metrics;
  std::vector<Prediction> predictions;
};

template <Classifier C>
FlatEvaluation evaluate_flat(C& model, const std::vector<Sample>& samples) {
  FlatEvaluation ev;
  ev.predictions = predict_flat(model, image_ptrs(samples));
  for (std::size_t i = 0; i < samples.size(); ++i) {
    ev.matrix.add(static_cast<std::size_t>(samples[i].label),
                  static_cast<std::size_t>(ev.predictions[i].label));
  }
  ev.metrics = metrics(ev.matrix);
  return ev;
}

struct HierEvaluation {
  ConfusionMatrix matrix{3};       // final labels, 3 classes
  ConfusionMatrix stage1{2};       // root: Normal vs Pneumonia-like
  ConfusionMatrix stage2{2};       // leaf, on routed Pneumonia/COVID19 samples
  std::uint64_t normals_routed_to_leaf = 0;
  std::uint64_t leaf_invocations = 0;
  MetricsReport metrics;
  std::vector<Prediction> predictions;
};

template <Classifier R, Classifier L>
HierEvaluation evaluate_hier(R& root, L& leaf, const std::vector<Sample>& samples) {
  HierEvaluation ev;
  ev.predictions = predict_hier(root, leaf, image_ptrs(samples));
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Label truth = samples[i].label;
    const Prediction& p = ev.predictions[i];
    ev.matrix.add(static_cast<std::size_t>(truth), static_cast<std::size_t>(p.label));
    ev.stage1.add(class_index(Task::Root, truth), p.stages[0].index);
    if (p.stages.size() > 1) {
      ++ev.leaf_invocations;
      if (truth == Label::Normal) {
        ++ev.normals_routed_to_leaf;
      } else {
        ev.stage2.add(class_index(Task::Leaf, truth), p.stages[1].index);
      }
    }
  }
  ev.metrics = metrics(ev.matrix);
  return ev;
}

}  // namespace cxr
