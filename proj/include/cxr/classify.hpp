#pragma once

// Flat and local-per-node hierarchical prediction, and class activation maps.
//
// Classes are ordered (Normal, Pneumonia, COVID19). The hierarchical mode
// runs a root classifier (Normal vs Pneumonia-like) and, only when the root
// says Pneumonia, a leaf classifier (Pneumonia vs COVID19). Exact probability
// ties go to the lowest class index.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdio>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cxr/data.hpp"
#include "cxr/errors.hpp"
#include "cxr/image.hpp"
#include "cxr/manifest.hpp"
#include "cxr/network.hpp"
#include "cxr/ops.hpp"

namespace cxr {

/// Anything that maps a (b, res, res, 3) batch to (b, num_classes) logits.
template <typename C>
concept Classifier = requires(C& c, const Tensor<float>& batch) {
  { c.logits(batch) } -> std::same_as<Tensor<float>>;
  { c.resolution() } -> std::convertible_to<int>;
  { c.num_classes() } -> std::convertible_to<int>;
};

/// Inference-mode classifier over a Network of any precision.
template <typename T>
class NetworkClassifier {
 public:
  explicit NetworkClassifier(Network<T>& net) : net_(&net) {}

  Tensor<float> logits(const Tensor<float>& batch) {
    return net_->infer(batch.template cast<T>()).first.template cast<float>();
  }
  int resolution() const { return net_->resolution(); }
  int num_classes() const { return net_->num_classes(); }

 private:
  Network<T>* net_;
};

/// Classifier backed by a function; used for forced-output checks and audits.
class FunctionClassifier {
 public:
  FunctionClassifier(int resolution, int classes, std::function<Tensor<float>(const Tensor<float>&)> fn)
      : resolution_(resolution), classes_(classes), fn_(std::move(fn)) {}

  Tensor<float> logits(const Tensor<float>& batch) {
    ++calls_;
    return fn_(batch);
  }
  int resolution() const { return resolution_; }
  int num_classes() const { return classes_; }
  std::size_t calls() const { return calls_; }

 private:
  int resolution_;
  int classes_;
  std::function<Tensor<float>(const Tensor<float>&)> fn_;
  std::size_t calls_ = 0;
};

/// Output of one classifier in a prediction.
struct StageOutput {
  Task task = Task::Flat;
  std::vector<double> probs;
  std::size_t index = 0;
};

struct Prediction {
  Label label = Label::Normal;
  std::vector<StageOutput> stages;

  /// Probabilities of (Normal, Pneumonia, COVID19). For a hierarchical route
  /// that stopped at the root, only the Normal probability is known.
  std::array<std::optional<double>, 3> class_probs() const {
    std::array<std::optional<double>, 3> p;
    if (stages.empty()) return p;
    const auto& s0 = stages[0];
    if (s0.task == Task::Flat) {
      for (std::size_t i = 0; i < 3; ++i) p[i] = s0.probs[i];
      return p;
    }
    p[0] = s0.probs[0];
    if (stages.size() > 1) {
      p[1] = s0.probs[1] * stages[1].probs[0];
      p[2] = s0.probs[1] * stages[1].probs[1];
    }
    return p;
  }

  /// e.g. "root:Pneumonia>leaf:COVID19" or "flat:Normal".
  std::string trace() const {
    std::string out;
    for (const auto& s : stages) {
      if (!out.empty()) out += '>';
      out += (s.task == Task::Flat ? "flat:" : s.task == Task::Root ? "root:" : "leaf:") +
             to_string(label_of(s.task, s.index));
    }
    return out;
  }
};

/// Index of the largest value; the first one wins ties.
inline std::size_t argmax(const std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

namespace detail {

template <Classifier C>
void check_input(const C& model, const Tensor<float>& image) {
  const auto r = static_cast<std::size_t>(model.resolution());
  if (image.rank() != 3 || image.dim(0) != r || image.dim(1) != r || image.dim(2) != 3) {
    throw ShapeError("model expects a (" + std::to_string(r) + ", " + std::to_string(r) +
                     ", 3) image, got " + shape_str(image.shape()));
  }
}

/// Per-row softmax of a logits batch, in double.
inline std::vector<std::vector<double>> softmax_rows(const Tensor<float>& logits) {
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  const auto probs = ops::softmax(logits.cast<double>());
  std::vector<std::vector<double>> out(b, std::vector<double>(k));
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < k; ++j) out[i][j] = probs[i * k + j];
  }
  return out;
}

template <Classifier C>
std::vector<StageOutput> run_stage(C& model, Task task, const std::vector<const Tensor<float>*>& images) {
  if (static_cast<std::size_t>(model.num_classes()) != num_classes(task)) {
    throw ShapeError("classifier width does not match its task");
  }
  std::vector<StageOutput> out;
  constexpr std::size_t kChunk = 16;
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    std::vector<const Tensor<float>*> chunk(
        images.begin() + static_cast<std::ptrdiff_t>(start),
        images.begin() + static_cast<std::ptrdiff_t>(std::min(images.size(), start + kChunk)));
    for (auto* img : chunk) check_input(model, *img);
    for (auto& p : softmax_rows(model.logits(make_batch<float>(chunk)))) {
      const std::size_t idx = argmax(p);
      out.push_back({task, std::move(p), idx});
    }
  }
  return out;
}

}  // namespace detail

template <Classifier C>
std::vector<Prediction> predict_flat(C& model, const std::vector<const Tensor<float>*>& images) {
  std::vector<Prediction> out;
  if (images.empty()) return out;
  for (auto& s : detail::run_stage(model, Task::Flat, images)) {
    Prediction p;
    p.label = label_of(Task::Flat, s.index);
    p.stages.push_back(std::move(s));
    out.push_back(std::move(p));
  }
  return out;
}

template <Classifier C>
Prediction predict_flat(C& model, const Tensor<float>& image) {
  return predict_flat(model, std::vector<const Tensor<float>*>{&image}).front();
}

/// Root on every image, leaf only on the images the root calls Pneumonia.
template <Classifier R, Classifier L>
std::vector<Prediction> predict_hier(R& root, L& leaf, const std::vector<const Tensor<float>*>& images) {
  if (root.resolution() != leaf.resolution()) {
    throw ShapeError("root and leaf classifiers use different resolutions");
  }
  std::vector<Prediction> out(images.size());
  if (images.empty()) return out;
  std::vector<const Tensor<float>*> routed;
  std::vector<std::size_t> routed_idx;
  auto stage1 = detail::run_stage(root, Task::Root, images);
  for (std::size_t i = 0; i < images.size(); ++i) {
    out[i].label = label_of(Task::Root, stage1[i].index);
    if (out[i].label != Label::Normal) {
      routed.push_back(images[i]);
      routed_idx.push_back(i);
    }
    out[i].stages.push_back(std::move(stage1[i]));
  }
  if (!routed.empty()) {
    auto stage2 = detail::run_stage(leaf, Task::Leaf, routed);
    for (std::size_t j = 0; j < routed.size(); ++j) {
      auto& p = out[routed_idx[j]];
      p.label = label_of(Task::Leaf, stage2[j].index);
      p.stages.push_back(std::move(stage2[j]));
    }
  }
  return out;
}

template <Classifier R, Classifier L>
Prediction predict_hier(R& root, L& leaf, const Tensor<float>& image) {
  return predict_hier(root, leaf, std::vector<const Tensor<float>*>{&image}).front();
}

// ------------------------------------------------------------------ CSV

inline constexpr std::string_view kPredictionHeader =
    "path,mode,label,p_normal,p_pneumonia,p_covid,stage_trace";

/// Unknown probabilities (hierarchical routes stopped at the root) are empty.
inline std::string prediction_row(const std::string& path, const std::string& mode, const Prediction& p) {
  std::string row = path + "," + mode + "," + to_string(p.label);
  for (const auto& v : p.class_probs()) {
    row += ',';
    if (v) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.6f", *v);
      row += buf;
    }
  }
  return row + "," + p.trace();
}

// ------------------------------------------------------------------ activation maps

/// Heatmap sum_c weights[c] * features(y, x, c), bilinearly upsampled to
/// (out_h, out_w) and min-max normalized. A constant map becomes all zeros.
inline Tensor<float> class_activation_map(const Tensor<double>& features, const std::vector<double>& weights,
                                          std::size_t out_h, std::size_t out_w) {
  if (features.rank() != 3) throw ShapeError("features must be (h, w, c)");
  const std::size_t h = features.dim(0), w = features.dim(1), c = features.dim(2);
  if (weights.size() != c) throw ShapeError("one weight per feature channel required");
  if (out_h == 0 || out_w == 0) throw std::invalid_argument("output size must be positive");
  Tensor<float> cam({h, w, 1});
  for (std::size_t i = 0; i < h * w; ++i) {
    double s = 0;
    for (std::size_t k = 0; k < c; ++k) s += weights[k] * features[i * c + k];
    cam[i] = static_cast<float>(s);
  }
  Tensor<float> up({out_h, out_w});
  const double sy = static_cast<double>(h) / out_h, sx = static_cast<double>(w) / out_w;
  for (std::size_t y = 0; y < out_h; ++y) {
    for (std::size_t x = 0; x < out_w; ++x) {
      up[y * out_w + x] = detail::bilinear(cam, (y + 0.5) * sy - 0.5, (x + 0.5) * sx - 0.5, 0, nullptr);
    }
  }
  const auto [lo, hi] = std::minmax_element(up.data().begin(), up.data().end());
  const float min = *lo, range = *hi - *lo;
  for (auto& v : up.data()) v = range > 0 ? (v - min) / range : 0.0f;
  return up;
}

/// Effective per-channel weights from pooled features to one class logit:
/// the head's dense matrices composed with the batch-norm scales; shifts and
/// activations are left out.
template <typename T>
std::vector<double> head_linearization(const Network<T>& net, std::size_t target_class) {
  if (target_class >= static_cast<std::size_t>(net.num_classes())) {
    throw std::out_of_range("target class out of range");
  }
  const auto& p = net.params();
  const int base = head_stage_base(net.spec());
  auto bn_scale = [&](const std::string& layer) {
    const auto& g = p.at(layer + ".gamma").value;
    const auto& v = p.at(layer + ".var").value;
    std::vector<double> s(g.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
      s[i] = static_cast<double>(g[i]) / std::sqrt(static_cast<double>(v[i]) + kBnEpsilon);
    }
    return s;
  };
  // walk backwards: start from the target column of the last dense layer
  const auto& w13 = p.at(layer_name(base + 3, 0, "dense") + ".weight").value;
  std::vector<double> v(w13.dim(0));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = w13[i * w13.dim(1) + target_class];
  auto through = [&](int stage) {
    const auto s = bn_scale(layer_name(stage, 0, "bn"));
    for (std::size_t i = 0; i < v.size(); ++i) v[i] *= s[i];
    const auto& w = p.at(layer_name(stage, 0, "dense") + ".weight").value;
    std::vector<double> u(w.dim(0), 0.0);
    for (std::size_t i = 0; i < w.dim(0); ++i) {
      for (std::size_t j = 0; j < w.dim(1); ++j) u[i] += w[i * w.dim(1) + j] * v[j];
    }
    v = std::move(u);
  };
  through(base + 2);
  through(base + 1);
  const auto s = bn_scale(layer_name(base, 0, "bn"));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] *= s[i];
  return v;
}

/// Class activation map of one (res, res, 3) image at input resolution.
template <typename T>
Tensor<float> activation_map(Network<T>& net, const Tensor<float>& image, std::size_t target_class) {
  NetworkClassifier<T> c(net);
  detail::check_input(c, image);
  const auto r = static_cast<std::size_t>(net.resolution());
  const auto features = net.infer(image.reshaped({1, r, r, 3}).template cast<T>()).second;
  if (features.rank() != 4) throw ShapeError("network has no spatial features before pooling");
  const auto f = features.reshaped({features.dim(1), features.dim(2), features.dim(3)}).template cast<double>();
  return class_activation_map(f, head_linearization(net, target_class), r, r);
}

}  // namespace cxr
