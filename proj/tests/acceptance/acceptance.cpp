// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cstring>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>

#include "../oracle/footprint.hpp"
#include "cxr/cxr.hpp"

using namespace cxr;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

template <typename T>
Tensor<T> rand_tensor(const Shape& shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor<T> t(shape);
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

// ---------------------------------------------------------------- 1

void footprints(Outcome& o) {
  const std::uint64_t reference[] = {5330564, 7856232, 9177562, 12320528, 19466816, 30562520};
  const double memory_mb[] = {21, 31, 36, 48, 76, 118};
  double worst_param = 0, worst_mem = 0;
  for (std::size_t i = 0; i < kAllVariants.size(); ++i) {
    const auto spec = build_arch(kAllVariants[i], 1000);
    const auto r = cost_report(spec, Top::ImageNet);
    const auto ref = oracle::footprint(spec, true);
    o.require(r.param_count == ref.params && r.mac_count == ref.macs, to_string(kAllVariants[i]) + " oracle");
    const double rel = std::abs(static_cast<double>(r.param_count) - reference[i]) / reference[i];
    const double mem = std::abs(r.memory_mib() - memory_mb[i]);
    worst_param = std::max(worst_param, rel);
    worst_mem = std::max(worst_mem, mem);
    o.require(rel <= 0.002, to_string(kAllVariants[i]) + " params " + std::to_string(r.param_count));
    o.require(mem <= 3.0, to_string(kAllVariants[i]) + " memory " + std::to_string(r.memory_mib()));
  }
  o.detail << "max param deviation " << std::setprecision(3) << worst_param * 100 << "%, max memory deviation "
           << worst_mem << " MiB";
}

// ---------------------------------------------------------------- 2

void metric_oracle(Outcome& o) {
  const std::uint64_t cells[3][3] = {{100, 0, 0}, {13, 87, 0}, {0, 1, 30}};
  // 231 records; each image carries its intended prediction in pixel (0, 0)
  struct Record {
    std::size_t truth, pred;
  };
  std::vector<Record> records;
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t p = 0; p < 3; ++p)
      for (std::uint64_t k = 0; k < cells[t][p]; ++k) records.push_back({t, p});
  std::shuffle(records.begin(), records.end(), std::mt19937_64(5));
  std::vector<Sample> samples;
  for (const auto& r : records) {
    Tensor<float> img({4, 4, 3}, 0.0f);
    img[r.pred] = 1.0f;
    samples.push_back({std::move(img), kAllLabels[r.truth], ""});
  }
  FunctionClassifier model(4, 3, [](const Tensor<float>& batch) {
    const std::size_t per = batch.size() / batch.dim(0);
    Tensor<float> out({batch.dim(0), 3});
    for (std::size_t i = 0; i < batch.dim(0); ++i)
      for (std::size_t k = 0; k < 3; ++k) out[i * 3 + k] = batch[i * per + k];
    return out;
  });
  const auto ev = evaluate_flat(model, samples);
  const std::string line = render(ev.metrics);
  o.require(line == "Acc 93.9%  Se_C 96.8%  +P_C 100.0%", "rendered '" + line + "'");
  o.require(ev.matrix == ConfusionMatrix::from_rows({{100, 0, 0}, {13, 87, 0}, {0, 1, 30}}), "matrix");
  // recount straight from the records
  std::size_t correct = 0, covid = 0, covid_hit = 0, called_covid = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const std::size_t pred = static_cast<std::size_t>(ev.predictions[i].label);
    o.require(pred == records[i].pred, "prediction " + std::to_string(i));
    correct += records[i].truth == pred;
    covid += records[i].truth == 2;
    covid_hit += records[i].truth == 2 && pred == 2;
    called_covid += pred == 2;
  }
  const double acc = static_cast<double>(correct) / records.size();
  const double se = static_cast<double>(covid_hit) / covid;
  const double ppv = static_cast<double>(covid_hit) / called_covid;
  o.require(acc == *ev.metrics.accuracy && se == *ev.metrics.covid_sensitivity &&
                ppv == *ev.metrics.covid_positive_prediction,
            "recount");
  o.detail << line << " over " << records.size() << " records";
}

// ---------------------------------------------------------------- 3

Manifest synthetic_entries(Label l, Source s, std::size_t n) {
  Manifest m;
  for (std::size_t i = 0; i < n; ++i) m.push_back({to_string(l) + "/" + std::to_string(i) + ".png", l, s, Partition::Train, ""});
  return m;
}

void dataset_configs(Outcome& o) {
  Manifest train = synthetic_entries(Label::Normal, Source::RSNA, 7966);
  for (const auto& part : {synthetic_entries(Label::Pneumonia, Source::RSNA, 5421),
                           synthetic_entries(Label::COVID19, Source::COVIDCollection, 152)}) {
    train.insert(train.end(), part.begin(), part.end());
  }
  const AugSpec aug;
  const auto raw = count_classes(apply_config(train, {DatasetMode::Raw}, aug, 1)).str();
  const auto plus = count_classes(apply_config(train, {DatasetMode::RawPlusAug}, aug, 1)).str();
  const auto bal = count_classes(apply_config(train, {DatasetMode::Balanced}, aug, 1)).str();
  const auto root = count_classes(hierarchical_relabel(train, HierLevel::Root));
  o.require(raw == "7966,5421,152", "raw " + raw);
  o.require(plus == "4000,4000,1152", "raw+aug " + plus);
  o.require(bal == "1000,1000,1000", "balanced " + bal);
  o.require(root.normal == 7966 && root.pneumonia == 5573 && root.covid == 0, "root " + root.str());
  o.detail << "raw " << raw << "; raw+aug " << plus << "; balanced " << bal << "; root " << root.normal << ","
           << root.pneumonia;
}

// ---------------------------------------------------------------- 4

template <typename T>
double op_checks(Outcome& o) {
  using Build = std::function<Var(Tape<T>&, const std::vector<Var>&)>;
  struct Case {
    std::string name;
    std::vector<Tensor<T>> inputs;
    Build build;
  };
  std::vector<Case> cases;
  cases.push_back({"conv2d",
                   {rand_tensor<T>({1, 5, 5, 2}, 1), rand_tensor<T>({3, 3, 2, 3}, 2), rand_tensor<T>({3}, 3)},
                   [](Tape<T>& t, const std::vector<Var>& v) {
                     return ag::conv2d(t, v[0], v[1], v[2], 2, Padding::Same);
                   }});
  cases.push_back({"depthwise_conv2d",
                   {rand_tensor<T>({1, 6, 6, 2}, 4), rand_tensor<T>({5, 5, 2, 1}, 5)},
                   [](Tape<T>& t, const std::vector<Var>& v) {
                     return ag::depthwise_conv2d(t, v[0], v[1], 1, Padding::Same);
                   }});
  cases.push_back({"dense",
                   {rand_tensor<T>({3, 6}, 6), rand_tensor<T>({6, 4}, 7), rand_tensor<T>({4}, 8)},
                   [](Tape<T>& t, const std::vector<Var>& v) { return ag::dense(t, v[0], v[1], v[2]); }});
  cases.push_back({"batch_norm(train)",
                   {rand_tensor<T>({4, 3, 3, 2}, 9), rand_tensor<T>({2}, 10, 0.5, 1.5), rand_tensor<T>({2}, 11)},
                   [](Tape<T>& t, const std::vector<Var>& v) {
                     return ag::batch_norm(t, v[0], v[1], v[2], static_cast<Parameter<T>*>(nullptr),
                                           static_cast<Parameter<T>*>(nullptr), Mode::Train);
                   }});
  cases.push_back({"swish",
                   {rand_tensor<T>({50}, 12, -4, 4)},
                   [](Tape<T>& t, const std::vector<Var>& v) { return ag::swish(t, v[0]); }});
  cases.push_back({"softmax+cross-entropy",
                   {rand_tensor<T>({4, 3}, 13, -2, 2)},
                   [](Tape<T>& t, const std::vector<Var>& v) {
                     return ag::softmax_cross_entropy(t, v[0], {0, 2, 1, 2});
                   }});
  const double tol = sizeof(T) == 4 ? 1e-3 : 1e-6;
  double worst = 0;
  for (auto& c : cases) {
    std::size_t n = 0;
    for (const auto& x : c.inputs) n += x.size();
    o.require(n <= 200, c.name + " has " + std::to_string(n) + " values");
    const double e = check_gradients<T>(c.inputs, c.build).max_rel_error;
    o.require(e < tol, c.name + (sizeof(T) == 4 ? " float " : " double ") + std::to_string(e));
    worst = std::max(worst, e);
  }
  return worst;
}

void gradients(Outcome& o) {
  const double f = op_checks<float>(o);
  const double d = op_checks<double>(o);
  o.detail << std::scientific << std::setprecision(2) << "max rel error float " << f << ", double " << d;
}

// ---------------------------------------------------------------- 5

void toy_training(Outcome& o) {
  const auto spec = build_reduced_arch(8, 64, 3);
  Network<float> net(spec, 42);
  const auto samples = synthetic_dataset(100, 64, 7);
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.batch_size = 8;
  cfg.seed = 42;
  const auto trace = train(net, samples, Task::Flat, cfg);
  NetworkClassifier<float> model(net);
  const auto acc = *evaluate_flat(model, samples).metrics.accuracy;
  const bool decreasing = trace[1].loss < trace[0].loss && trace[2].loss < trace[1].loss;
  o.require(samples.size() == 300, "dataset size");
  o.require(acc >= 0.95, "training accuracy " + std::to_string(acc));
  o.require(decreasing, "first three losses not strictly decreasing");
  o.detail << std::fixed << std::setprecision(4) << "losses " << trace[0].loss << " > " << trace[1].loss << " > "
           << trace[2].loss << ", final " << trace.back().loss << ", train accuracy " << std::setprecision(1)
           << acc * 100 << "%";
}

// ---------------------------------------------------------------- 6

void hierarchy(Outcome& o) {
  const auto dir = fs::temp_directory_path() / "cxr_acceptance_sources";
  fs::remove_all(dir);
  const auto targets = PartitionTargets::scaled(0.1);
  ClassCounts need;
  for (Label l : kAllLabels) need[l] = targets.train[l] + targets.test[l];
  const auto src = write_synthetic_sources(dir, need, 48, 11);
  const auto split = build_covidx(src.rsna, src.covid, 3, targets);
  const auto test = load_samples(split.test, 32);

  // root A: a random network; root B: splits on mean intensity at the median
  Network<float> root_net(build_reduced_arch(8, 32, 2), 5), leaf_net(build_reduced_arch(8, 32, 2), 6);
  auto mean_of = [](const Tensor<float>& img, std::size_t off, std::size_t per) {
    double m = 0;
    for (std::size_t k = 0; k < per; ++k) m += img[off + k];
    return m / per;
  };
  std::vector<double> means;
  for (const auto& s : test) means.push_back(mean_of(s.image, 0, s.image.size()));
  auto sorted = means;
  std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2, sorted.end());
  const double median = sorted[sorted.size() / 2];
  FunctionClassifier net_root(32, 2, [&](const Tensor<float>& b) { return root_net.infer(b).first; });
  FunctionClassifier mean_root(32, 2, [&](const Tensor<float>& b) {
    const std::size_t per = b.size() / b.dim(0);
    Tensor<float> out({b.dim(0), 2});
    for (std::size_t i = 0; i < b.dim(0); ++i) out[2 * i + 1] = static_cast<float>(mean_of(b, i * per, per) - median);
    return out;
  });

  std::size_t routed_total = 0, audited = 0;
  for (FunctionClassifier* root : {&net_root, &mean_root}) {
    std::size_t violations = 0, seen = 0;
    FunctionClassifier leaf(32, 2, [&](const Tensor<float>& b) {
      // every image handed to the leaf must be one the root called Pneumonia
      const std::size_t per = b.size() / b.dim(0);
      for (std::size_t i = 0; i < b.dim(0); ++i) {
        Tensor<float> one({1, 32, 32, 3});
        std::copy_n(b.data().begin() + static_cast<std::ptrdiff_t>(i * per), per, one.data().begin());
        const auto logits = root->logits(one);
        violations += !(logits[1] > logits[0]);
        ++seen;
      }
      return leaf_net.infer(b).first;
    });
    const auto ev = evaluate_hier(*root, leaf, test);
    o.require(ev.stage1 == ev.matrix.merged({0, 1, 1}, 2), "stage-1 matrix differs from merged final matrix");
    o.require(violations == 0, std::to_string(violations) + " root-Normal images reached the leaf");
    std::size_t two_stage = 0;
    for (const auto& p : ev.predictions) {
      two_stage += p.stages.size() == 2;
      if (p.stages.size() == 1) o.require(p.label == Label::Normal, "single-stage non-Normal");
    }
    o.require(seen == two_stage && ev.leaf_invocations == two_stage, "leaf call count");
    routed_total += two_stage;
    audited += ev.predictions.size();
  }
  o.require(routed_total > 0, "no image reached the leaf");
  fs::remove_all(dir);
  o.detail << audited << " routed predictions audited over " << test.size() << " test images, " << routed_total
           << " two-stage";
}

// ---------------------------------------------------------------- 7

void schedule(Outcome& o) {
  const auto t = lr_trace({1.0, 0.9, 0.9, 0.9, 0.85, 0.85, 0.85}, 1e-4, 2, 10);
  const std::vector<double> want{1e-4, 1e-4, 1e-4, 1e-4, 1e-5, 1e-5, 1e-5};
  o.require(t.size() == want.size(), "trace length");
  for (std::size_t i = 0; i < std::min(t.size(), want.size()); ++i) {
    o.require(std::abs(t[i] - want[i]) <= 1e-12 * want[i], "epoch " + std::to_string(i + 1));
  }
  o.detail << "trace";
  for (double v : t) o.detail << " " << v;
}

// ---------------------------------------------------------------- 8

ArchSpec random_arch(std::mt19937_64& g) {
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(g); };
  auto spec = build_arch(kAllVariants[pick(0, 5)], pick(2, 1000), pick(0, 1) == 1);
  spec.input_resolution = pick(1, 600);
  int res = spec.input_resolution;
  for (std::size_t i = 0; i < spec.stages.size(); ++i) {
    auto& s = spec.stages[i];
    s.out_channels = pick(1, 2048);
    s.stride = pick(1, 2);
    if (s.op == StageOp::MBConv) {
      s.expansion = pick(0, 1) ? 6 : 1;
      s.kernel = pick(0, 1) ? 5 : 3;
      s.repeats = pick(1, 9);
    }
    s.resolution = res;
    res = (res + s.stride - 1) / s.stride;
  }
  return spec;
}

WeightFile random_weights(std::mt19937_64& g) {
  std::uniform_int_distribution<int> count(0, 8), rank(0, 4), dim(0, 5), byte(0, 255);
  std::vector<WeightEntry> entries;
  const int n = count(g);
  for (int i = 0; i < n; ++i) {
    WeightEntry e;
    e.name = "layer" + std::to_string(i) + ".w" + std::string(static_cast<std::size_t>(count(g)), 'x');
    const int r = rank(g);
    std::size_t size = 1;
    for (int d = 0; d < r; ++d) {
      e.dims.push_back(static_cast<std::uint32_t>(dim(g)));
      size *= e.dims.back();
    }
    // arbitrary bit patterns, NaN payloads and subnormals included
    for (std::size_t k = 0; k < size; ++k) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits = (bits << 8) | static_cast<std::uint32_t>(byte(g));
      float v;
      std::memcpy(&v, &bits, 4);
      e.values.push_back(v);
    }
    entries.push_back(std::move(e));
  }
  return WeightFile(std::move(entries));
}

bool same_bits(const WeightFile& a, const WeightFile& b) {
  if (a.entries().size() != b.entries().size()) return false;
  for (std::size_t i = 0; i < a.entries().size(); ++i) {
    const auto &x = a.entries()[i], &y = b.entries()[i];
    if (x.name != y.name || x.dims != y.dims || x.values.size() != y.values.size()) return false;
    if (!x.values.empty() && std::memcmp(x.values.data(), y.values.data(), x.values.size() * 4) != 0) return false;
  }
  return true;
}

void round_trips(Outcome& o) {
  std::mt19937_64 g(2024);
  int arch_ok = 0, weights_ok = 0, store_ok = 0;
  const auto dir = fs::temp_directory_path() / "cxr_acceptance_weights";
  fs::create_directories(dir);
  for (int i = 0; i < 100; ++i) {
    try {
      const auto spec = random_arch(g);
      const auto text = serialize(spec);
      arch_ok += parse_arch(text) == spec && serialize(parse_arch(text)) == text;
    } catch (const std::exception& e) {
      o.require(false, std::string("arch ") + e.what());
    }
    try {
      const auto w = random_weights(g);
      const auto path = dir / ("w" + std::to_string(i) + ".bin");
      w.write(path);
      const auto back = WeightFile::read(path);
      weights_ok += same_bits(back, w) && back.to_bytes() == w.to_bytes() &&
                    same_bits(WeightFile::from_bytes(w.to_bytes()), w);
    } catch (const std::exception& e) {
      o.require(false, std::string("weights ") + e.what());
    }
  }
  // save/load through a parameter store of a real network
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto spec = build_reduced_arch(8, 16, 3, seed % 2 == 0);
    const auto store = init_params<float>(spec, seed);
    const auto file = save(store);
    store_ok += same_bits(save(load<float>(WeightFile::from_bytes(file.to_bytes()), spec)), file);
  }
  fs::remove_all(dir);
  o.require(arch_ok == 100, std::to_string(arch_ok) + "/100 arch");
  o.require(weights_ok == 100, std::to_string(weights_ok) + "/100 weights");
  o.require(store_ok == 5, std::to_string(store_ok) + "/5 stores");
  o.detail << arch_ok << "/100 arch specs, " << weights_ok << "/100 weight files, " << store_ok
           << "/5 parameter stores bit-exact";
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    void (*run)(Outcome&);
  };
  const Criterion criteria[] = {
      {"footprint reproduction", footprints},   {"metric oracle", metric_oracle},
      {"dataset configurations", dataset_configs}, {"gradient fidelity", gradients},
      {"toy training", toy_training},           {"hierarchical decomposition", hierarchy},
      {"schedule reproduction", schedule},      {"format round-trips", round_trips},
  };
  int failed = 0, index = 0;
  for (const auto& c : criteria) {
    Outcome o;
    const auto start = std::chrono::steady_clock::now();
    try {
      c.run(o);
    } catch (const std::exception& e) {
      o.require(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << ++index << ". " << c.name << ": " << o.detail.str() << " ("
              << std::fixed << std::setprecision(2) << secs << " s)" << std::endl;
  }
  std::cout << (failed ? std::to_string(failed) + " criteria failed" : "all criteria passed") << std::endl;
  return failed ? 1 : 0;
}
