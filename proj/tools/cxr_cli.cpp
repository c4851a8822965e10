// cxr: command-line front end. Every run writes into its own directory
// (config snapshot, log, artifacts). Exit codes: 0 ok, 1 runtime error, 2 usage.

#include <CLI11.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "cxr/cxr.hpp"

using namespace cxr;
namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ------------------------------------------------------------------ run dir

class Run {
 public:
  void open(fs::path dir) {
    dir_ = std::move(dir);
    fs::create_directories(dir_);
    log_.open(dir_ / "log.txt");
  }
  const fs::path& dir() const { return dir_; }
  fs::path file(const std::string& name) const { return dir_ / name; }

  /// Writes a line to stdout and to the run log.
  void say(const std::string& line) {
    std::cout << line << '\n';
    log_ << line << '\n';
  }
  void write(const std::string& name, const std::string& text) const {
    std::ofstream os(file(name), std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + file(name).string());
    os << text;
  }

 private:
  fs::path dir_;
  std::ofstream log_;
};

fs::path default_run_dir(const std::string& command) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  localtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y%m%d-%H%M%S") << "-" << command;
  fs::path base = fs::path("runs") / os.str(), dir = base;
  for (int i = 2; fs::exists(dir); ++i) dir = base.string() + "-" + std::to_string(i);
  return dir;
}

std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

Manifest read_manifest_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read manifest " + path.string());
  return read_manifest(is);
}

void write_manifest_file(const Run& run, const std::string& name, const Manifest& m) {
  run.write(name, manifest_csv(m));
}

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? sep : "") + parts[i];
  return out;
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

// ------------------------------------------------------------------ config file

/// Plain `key = value` lines; '#' starts a comment. Keys are long option names.
std::vector<std::pair<std::string, std::string>> read_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot read config file " + path.string());
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  int n = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  };
  while (std::getline(is, line)) {
    ++n;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError(path.string() + ":" + std::to_string(n) + ": expected key = value");
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

/// Turns config entries into arguments placed ahead of the user's own, so
/// that flags on the command line take precedence.
std::vector<std::string> merge_config(CLI::App& app, const std::vector<std::string>& args) {
  std::string config;
  std::size_t sub_pos = args.size();
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) config = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) config = args[i].substr(9);
    if (sub_pos == args.size() && app.get_subcommand_no_throw(args[i])) sub_pos = i;
  }
  if (config.empty() || sub_pos == args.size()) return args;
  CLI::App* sub = app.get_subcommand(args[sub_pos]);
  std::vector<std::string> global, local;
  for (const auto& [key, value] : read_config(config)) {
    if (key == "config" || key == "out") continue;
    auto* opt = sub->get_option_no_throw("--" + key);
    auto& dst = opt ? local : global;
    if (!opt) opt = app.get_option_no_throw("--" + key);
    if (!opt) throw UsageError("config key '" + key + "' is not an option of '" + sub->get_name() + "'");
    if (opt->get_type_size() == 0) {
      if (value == "true" || value == "1") dst.push_back("--" + key);
    } else {
      dst.push_back("--" + key);
      dst.push_back(value);
    }
  }
  std::vector<std::string> out(global);
  out.insert(out.end(), args.begin(), args.begin() + static_cast<std::ptrdiff_t>(sub_pos) + 1);
  out.insert(out.end(), local.begin(), local.end());
  out.insert(out.end(), args.begin() + static_cast<std::ptrdiff_t>(sub_pos) + 1, args.end());
  return out;
}

/// Effective settings as `key = value`, reusable as --config.
std::string snapshot(const CLI::App& app, const CLI::App& sub) {
  std::ostringstream os;
  os << "# cxr " << sub.get_name() << "\n";
  for (const CLI::App* a : {&app, &sub}) {
    for (const auto* opt : a->get_options()) {
      const std::string name = opt->get_single_name();
      if (name.empty() || name == "help" || name == "config" || name == "out") continue;
      if (opt->get_type_size() == 0) {
        os << name << " = " << (opt->count() ? "true" : "false") << "\n";
      } else if (opt->count()) {
        for (const auto& v : opt->reduced_results()) os << name << " = " << v << "\n";
      } else if (!opt->get_default_str().empty()) {
        os << name << " = " << opt->get_default_str() << "\n";
      }
    }
  }
  return os.str();
}

// ------------------------------------------------------------------ models

Variant variant_arg(const std::string& s) {
  try {
    std::string up = s;
    for (auto& c : up) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return parse_variant(up);
  } catch (const std::exception&) {
    throw UsageError("unknown variant '" + s + "' (expected b0..b5)");
  }
}

struct Model {
  ArchSpec spec;
  std::unique_ptr<Network<float>> net;
};

Model load_model(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("model directory " + dir.string() + " does not exist");
  Model m;
  m.spec = parse_arch(read_text(dir / "arch.txt"));
  m.net = std::make_unique<Network<float>>(m.spec, load<float>(WeightFile::read(dir / "weights.bin"), m.spec));
  return m;
}

Tensor<float> load_image(const fs::path& path, int resolution) {
  return resize(normalize(read_image(path)), resolution).pixels;
}

std::string cost_csv(const CostReport& c) {
  return "params,macs,memory_bytes\n" + std::to_string(c.param_count) + "," + std::to_string(c.mac_count) + "," +
         std::to_string(c.memory_bytes) + "\n";
}

CostReport parse_cost_csv(const std::string& text) {
  std::istringstream is(text);
  std::string header, row;
  std::getline(is, header);
  std::getline(is, row);
  CostReport c;
  char comma1 = 0, comma2 = 0;
  std::istringstream rs(row);
  if (header != "params,macs,memory_bytes" || !(rs >> c.param_count >> comma1 >> c.mac_count >> comma2 >> c.memory_bytes)) {
    throw FormatError("malformed cost file");
  }
  return c;
}

ConfusionMatrix parse_confusion_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  std::getline(is, line);
  std::vector<std::vector<std::uint64_t>> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::getline(ls, cell, ',');
    std::vector<std::uint64_t> row;
    while (std::getline(ls, cell, ',')) row.push_back(std::stoull(cell));
    rows.push_back(row);
  }
  return ConfusionMatrix::from_rows(rows);
}

// ------------------------------------------------------------------ commands

struct Globals {
  std::uint64_t seed = 42;
  std::string out;
};

struct ArchArgs {
  std::string variant = "b0";
  int classes = 3;
  bool imagenet_top = false;
  bool no_se = false;
};

int cmd_arch(Run& run, const ArchArgs& a) {
  const Variant v = variant_arg(a.variant);
  // the stock top classifies the 1000 ImageNet classes
  const int classes = a.imagenet_top ? 1000 : a.classes;
  const auto spec = build_arch(v, classes, !a.no_se);
  const auto cost = cost_report(spec, a.imagenet_top ? Top::ImageNet : Top::ProposedHead);
  run.say("variant " + to_string(v));
  run.say("resolution " + std::to_string(spec.input_resolution));
  run.say("top " + std::string(a.imagenet_top ? "imagenet" : "proposed") + " classes " + std::to_string(classes));
  run.say("params " + std::to_string(cost.param_count));
  run.say("macs " + std::to_string(cost.mac_count));
  run.say("memory_mib " + fixed(cost.memory_mib(), 2));
  run.write("arch.txt", serialize(spec));
  run.write("cost.csv", cost_csv(cost));
  std::string table = "layer,kind,params,macs\n";
  for (const auto& l : layer_costs(spec, a.imagenet_top ? Top::ImageNet : Top::ProposedHead)) {
    table += l.name + "," + l.kind + "," + std::to_string(l.params) + "," + std::to_string(l.macs) + "\n";
  }
  run.write("layers.csv", table);
  return 0;
}

struct DatasetArgs {
  std::string rsna, covid;
  bool synthetic = false;
  double scale = 1.0;
  std::string sources;
  int image_size = 64;
  std::string mode = "raw";
  std::size_t per_class = 1000;
  std::size_t covid_aug = 1000;
  std::size_t cap = 4000;
  std::string hier = "none";
};

int cmd_dataset(Run& run, const DatasetArgs& a, std::uint64_t seed) {
  const DatasetMode mode = [&] {
    try {
      return parse_dataset_mode(a.mode);
    } catch (const std::exception&) {
      throw UsageError("unknown dataset mode '" + a.mode + "'");
    }
  }();
  const auto targets = PartitionTargets::scaled(a.scale);
  Manifest rsna, covid;
  if (a.synthetic) {
    if (!a.rsna.empty() || !a.covid.empty()) throw UsageError("--synthetic excludes --rsna/--covid");
    ClassCounts need;
    for (Label l : kAllLabels) need[l] = targets.train[l] + targets.test[l];
    const fs::path dir = a.sources.empty() ? run.file("sources") : fs::path(a.sources);
    auto src = write_synthetic_sources(dir, need, a.image_size, seed);
    rsna = std::move(src.rsna);
    covid = std::move(src.covid);
    write_manifest_file(run, "rsna.csv", rsna);
    write_manifest_file(run, "covid.csv", covid);
    run.say("synthetic sources " + dir.string() + " " + count_classes(rsna).str() + " + " + count_classes(covid).str());
  } else {
    if (a.rsna.empty() || a.covid.empty()) throw UsageError("dataset needs --rsna and --covid, or --synthetic");
    rsna = read_manifest_file(a.rsna);
    covid = read_manifest_file(a.covid);
  }
  const auto split = build_covidx(rsna, covid, seed, targets);
  DatasetConfig cfg{mode, a.covid_aug, a.cap, a.per_class};
  auto train = apply_config(split.train, cfg, AugSpec{}, seed);
  auto test = split.test;
  if (a.hier != "none") {
    const HierLevel level = a.hier == "root" ? HierLevel::Root : HierLevel::Leaf;
    train = hierarchical_relabel(train, level);
    test = hierarchical_relabel(test, level);
  }
  write_manifest_file(run, "train.csv", train);
  write_manifest_file(run, "test.csv", test);
  const std::string summary = "split train " + count_classes(split.train).str() + "\nsplit test " +
                              count_classes(split.test).str() + "\n" + to_string(mode) + " train " +
                              count_classes(train).str() + "\n";
  run.write("counts.txt", "# counts are Normal,Pneumonia,COVID19\n" + summary);
  std::istringstream lines(summary);
  for (std::string l; std::getline(lines, l);) run.say(l);
  return 0;
}

struct TrainArgs {
  std::string train;
  std::size_t synthetic_per_class = 0;
  std::string task = "flat";
  std::string variant = "b0";
  int stem = 0;
  int res = 0;
  bool no_se = false;
  int epochs = 10;
  std::size_t batch = 8;
  double lr = 1e-4;
  int patience = 2;
  double factor = 10;
  double min_delta = 1e-4;
  std::string init_weights;
  bool freeze_backbone = false;
};

Task task_arg(const std::string& s) {
  if (s == "flat") return Task::Flat;
  if (s == "root") return Task::Root;
  if (s == "leaf") return Task::Leaf;
  throw UsageError("unknown task '" + s + "'");
}

int cmd_train(Run& run, const TrainArgs& a, std::uint64_t seed) {
  const Task task = task_arg(a.task);
  const Variant v = variant_arg(a.variant);
  const int nc = static_cast<int>(num_classes(task));
  const int res = a.res > 0 ? a.res : input_resolution(v);
  ArchSpec spec = a.stem > 0 ? build_reduced_arch(a.stem, res, nc, !a.no_se) : build_arch(v, nc, !a.no_se);
  if (a.stem == 0 && a.res > 0) spec = build_scaled_arch(v, {variant_params(v).width, variant_params(v).depth, res, std::nullopt}, nc, !a.no_se);

  std::vector<Sample> samples;
  if (a.synthetic_per_class > 0) {
    if (!a.train.empty()) throw UsageError("--synthetic-per-class excludes --train");
    samples = synthetic_dataset(a.synthetic_per_class, res, seed);
  } else {
    if (a.train.empty()) throw UsageError("train needs --train or --synthetic-per-class");
    samples = load_samples(read_manifest_file(a.train), res);
  }
  if (task == Task::Leaf) std::erase_if(samples, [](const Sample& s) { return s.label == Label::Normal; });

  auto store = init_params<float>(spec, seed);
  WeightFile source;
  if (!a.init_weights.empty()) {
    source = WeightFile::read(a.init_weights);
    auto plan = backbone_transfer_plan(source, spec);
    if (a.freeze_backbone) {
      for (const auto& [_, dst] : plan.name_map) plan.trainable_mask[dst] = false;
    }
    store = apply_transfer(plan, std::move(store));
    run.say("transferred " + std::to_string(plan.name_map.size()) + " layers from " + a.init_weights);
  }
  Network<float> net(spec, std::move(store));
  TrainConfig cfg;
  cfg.learning_rate = a.lr;
  cfg.patience = a.patience;
  cfg.factor = a.factor;
  cfg.min_delta = a.min_delta;
  cfg.epochs = a.epochs;
  cfg.batch_size = a.batch;
  cfg.seed = seed;
  cfg.validate();
  run.say("training " + to_string(spec.variant) + " res " + std::to_string(res) + " task " + a.task + " on " +
          std::to_string(samples.size()) + " images");
  const auto trace = train(net, samples, task, cfg, [&](const EpochRecord& r) {
    std::ostringstream os;
    os << "epoch " << r.epoch << " loss " << std::fixed << std::setprecision(6) << r.loss << " lr "
       << std::defaultfloat << r.lr;
    run.say(os.str());
  });
  std::size_t correct = 0;
  const auto all = image_ptrs(samples);
  for (std::size_t start = 0; start < all.size(); start += 32) {
    const std::vector<const Tensor<float>*> chunk(all.begin() + static_cast<std::ptrdiff_t>(start),
                                                  all.begin() + static_cast<std::ptrdiff_t>(std::min(all.size(), start + 32)));
    const auto logits = net.infer(make_batch<float>(chunk)).first;
    const std::size_t k = logits.dim(1);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      std::vector<double> row(logits.data().begin() + static_cast<std::ptrdiff_t>(i * k),
                              logits.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * k));
      correct += argmax(row) == class_index(task, samples[start + i].label);
    }
  }
  run.say("train accuracy " + fixed(100.0 * correct / samples.size(), 1) + "%");
  run.write("trace.csv", trace_csv(trace));
  run.write("arch.txt", serialize(spec));
  save(net.params()).write(run.file("weights.bin"));
  run.say("model " + run.dir().string());
  return 0;
}

struct ModelArgs {
  std::string mode = "flat";
  std::string model, root, leaf;
};

struct EvalArgs {
  ModelArgs m;
  std::string test;
  std::size_t synthetic_per_class = 0;
};

void check_model_args(const ModelArgs& m) {
  if (m.mode == "flat") {
    if (m.model.empty()) throw UsageError("flat mode needs --model");
  } else if (m.mode == "hier") {
    if (m.root.empty() || m.leaf.empty()) throw UsageError("hier mode needs --root and --leaf");
  } else {
    throw UsageError("unknown mode '" + m.mode + "'");
  }
}

int cmd_eval(Run& run, const EvalArgs& a, std::uint64_t seed) {
  check_model_args(a.m);
  const auto names = class_names();
  auto samples_at = [&](int res) {
    if (a.synthetic_per_class > 0) return synthetic_dataset(a.synthetic_per_class, res, seed);
    if (a.test.empty()) throw UsageError("eval needs --test or --synthetic-per-class");
    return load_samples(read_manifest_file(a.test), res);
  };
  std::string predictions(kPredictionHeader);
  predictions += "\n";
  auto emit_predictions = [&](const std::vector<Sample>& samples, const std::vector<Prediction>& preds) {
    for (std::size_t i = 0; i < samples.size(); ++i) predictions += prediction_row(samples[i].path, a.m.mode, preds[i]) + "\n";
  };
  ConfusionMatrix final_matrix(3);
  CostReport cost;
  if (a.m.mode == "flat") {
    auto m = load_model(a.m.model);
    NetworkClassifier<float> c(*m.net);
    const auto samples = samples_at(m.spec.input_resolution);
    const auto ev = evaluate_flat(c, samples);
    final_matrix = ev.matrix;
    cost = cost_report(m.spec);
    emit_predictions(samples, ev.predictions);
  } else {
    auto root = load_model(a.m.root), leaf = load_model(a.m.leaf);
    NetworkClassifier<float> rc(*root.net), lc(*leaf.net);
    const auto samples = samples_at(root.spec.input_resolution);
    const auto ev = evaluate_hier(rc, lc, samples);
    final_matrix = ev.matrix;
    const auto rcost = cost_report(root.spec), lcost = cost_report(leaf.spec);
    cost = {rcost.param_count + lcost.param_count, rcost.mac_count + lcost.mac_count,
            rcost.memory_bytes + lcost.memory_bytes, rcost.elementwise_ops + lcost.elementwise_ops};
    const std::vector<std::string> s1{"Normal", "Pneumonia+COVID19"}, s2{"Pneumonia", "COVID19"};
    run.say("stage 1 (root) confusion matrix");
    run.say(ev.stage1.text(s1));
    run.say("stage 2 (leaf) confusion matrix");
    run.say(ev.stage2.text(s2));
    run.say("leaf invocations " + std::to_string(ev.leaf_invocations) + ", Normal images routed to leaf " +
            std::to_string(ev.normals_routed_to_leaf));
    run.write("stage1.csv", ev.stage1.csv(s1));
    run.write("stage2.csv", ev.stage2.csv(s2));
    emit_predictions(samples, ev.predictions);
  }
  const auto report = metrics(final_matrix);
  run.say("final confusion matrix");
  run.say(final_matrix.text(names));
  run.say(render(report));
  run.write("confusion.csv", final_matrix.csv(names));
  run.write("metrics.txt", render(report) + "\n");
  run.write("cost.csv", cost_csv(cost));
  run.write("predictions.csv", predictions);
  return 0;
}

struct InferArgs {
  ModelArgs m;
  std::string image;
};

int cmd_infer(Run& run, const InferArgs& a) {
  check_model_args(a.m);
  Prediction p;
  if (a.m.mode == "flat") {
    auto m = load_model(a.m.model);
    NetworkClassifier<float> c(*m.net);
    p = predict_flat(c, load_image(a.image, m.spec.input_resolution));
  } else {
    auto root = load_model(a.m.root), leaf = load_model(a.m.leaf);
    NetworkClassifier<float> rc(*root.net), lc(*leaf.net);
    p = predict_hier(rc, lc, load_image(a.image, root.spec.input_resolution));
  }
  run.say("label " + to_string(p.label));
  std::vector<std::string> parts;
  const auto probs = p.class_probs();
  for (std::size_t k = 0; k < 3; ++k) {
    parts.push_back(class_names()[k] + "=" + (probs[k] ? fixed(*probs[k], 6) : std::string("-")));
  }
  run.say("probabilities " + join(parts, " "));
  run.say("trace " + p.trace());
  run.write("prediction.csv", std::string(kPredictionHeader) + "\n" + prediction_row(a.image, a.m.mode, p) + "\n");
  return 0;
}

struct MapArgs {
  std::string model, image, cls;
};

int cmd_map(Run& run, const MapArgs& a) {
  auto m = load_model(a.model);
  const auto img = load_image(a.image, m.spec.input_resolution);
  NetworkClassifier<float> c(*m.net);
  const auto p = predict_flat(c, img);
  std::size_t k = p.stages[0].index;
  if (!a.cls.empty()) {
    const auto& names = class_names();
    auto it = std::find(names.begin(), names.end(), a.cls);
    if (it != names.end() && static_cast<int>(it - names.begin()) < m.net->num_classes()) {
      k = static_cast<std::size_t>(it - names.begin());
    } else if (!a.cls.empty() && std::all_of(a.cls.begin(), a.cls.end(), ::isdigit) &&
               std::stoi(a.cls) < m.net->num_classes()) {
      k = static_cast<std::size_t>(std::stoi(a.cls));
    } else {
      throw UsageError("unknown class '" + a.cls + "'");
    }
  }
  const auto map = activation_map(*m.net, img, k);
  RawImage out{static_cast<int>(map.dim(1)), static_cast<int>(map.dim(0)), 1, 8, {}};
  for (float v : map.data()) out.samples.push_back(static_cast<std::uint16_t>(std::lround(v * 255.0f)));
  write_png(run.file("map.png"), out);
  run.say("predicted " + to_string(p.label));
  run.say("map for class index " + std::to_string(k) + " written to " + run.file("map.png").string());
  return 0;
}

int cmd_compare(Run& run, const std::vector<std::string>& entries) {
  std::vector<ComparisonRow> rows;
  for (const auto& e : entries) {
    const auto eq = e.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--run expects NAME=DIR, got '" + e + "'");
    const fs::path dir = e.substr(eq + 1);
    const auto cm = parse_confusion_csv(read_text(dir / "confusion.csv"));
    rows.push_back({e.substr(0, eq), metrics(cm), parse_cost_csv(read_text(dir / "cost.csv"))});
  }
  const auto table = compare_report(rows);
  run.say(table.text);
  run.write("comparison.csv", table.csv);
  return 0;
}

void add_model_options(CLI::App* sub, ModelArgs& m) {
  sub->add_option("--mode", m.mode, "flat or hier")->check(CLI::IsMember({"flat", "hier"}));
  sub->add_option("--model", m.model, "model directory (flat)");
  sub->add_option("--root", m.root, "root model directory (hier)");
  sub->add_option("--leaf", m.leaf, "leaf model directory (hier)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Chest X-ray classification toolkit"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast)->always_capture_default();
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  std::string config;
  app.add_option("--seed", g.seed, "random seed");
  app.add_option("--config", config, "key = value settings file; flags override it");
  app.add_option("--out", g.out, "output directory (default runs/<timestamp>-<command>)");

  ArchArgs arch;
  auto* c_arch = app.add_subcommand("arch", "print architecture and cost");
  c_arch->add_option("--variant", arch.variant, "b0..b5");
  c_arch->add_option("--classes", arch.classes, "output classes of the proposed head")->check(CLI::Range(2, 100000));
  c_arch->add_flag("--imagenet-top", arch.imagenet_top, "cost the stock 1000-class top instead");
  c_arch->add_flag("--no-se", arch.no_se, "omit squeeze-and-excitation");

  DatasetArgs ds;
  auto* c_ds = app.add_subcommand("dataset", "build train/test manifests");
  c_ds->add_option("--rsna", ds.rsna, "Normal/Pneumonia source manifest")->check(CLI::ExistingFile);
  c_ds->add_option("--covid", ds.covid, "COVID19 source manifest")->check(CLI::ExistingFile);
  c_ds->add_flag("--synthetic", ds.synthetic, "generate synthetic sources instead");
  c_ds->add_option("--scale", ds.scale, "partition sizes as a fraction of full size")
      ->check(CLI::Range(1e-6, 1.0));
  c_ds->add_option("--sources", ds.sources, "directory for generated synthetic sources");
  c_ds->add_option("--image-size", ds.image_size, "synthetic image size")->check(CLI::Range(4, 4096));
  c_ds->add_option("--mode", ds.mode, "raw, raw+aug or balanced");
  c_ds->add_option("--per-class", ds.per_class, "balanced images per class");
  c_ds->add_option("--covid-aug", ds.covid_aug, "augmented COVID19 copies in raw+aug");
  c_ds->add_option("--cap", ds.cap, "majority cap in raw+aug");
  c_ds->add_option("--hier", ds.hier, "none, root or leaf relabelling")->check(CLI::IsMember({"none", "root", "leaf"}));

  TrainArgs tr;
  auto* c_tr = app.add_subcommand("train", "train a classifier");
  c_tr->add_option("--train", tr.train, "training manifest")->check(CLI::ExistingFile);
  c_tr->add_option("--synthetic-per-class", tr.synthetic_per_class, "train on generated images instead");
  c_tr->add_option("--task", tr.task, "flat, root or leaf")->check(CLI::IsMember({"flat", "root", "leaf"}));
  c_tr->add_option("--variant", tr.variant, "b0..b5");
  c_tr->add_option("--stem", tr.stem, "width-reduced network with this many stem channels");
  c_tr->add_option("--res", tr.res, "input resolution (default: the variant's)");
  c_tr->add_flag("--no-se", tr.no_se, "omit squeeze-and-excitation");
  c_tr->add_option("--epochs", tr.epochs, "epochs");
  c_tr->add_option("--batch", tr.batch, "batch size");
  c_tr->add_option("--lr", tr.lr, "initial learning rate");
  c_tr->add_option("--patience", tr.patience, "stagnant epochs before a drop");
  c_tr->add_option("--factor", tr.factor, "learning-rate drop factor");
  c_tr->add_option("--min-delta", tr.min_delta, "smallest loss decrease that counts");
  c_tr->add_option("--init-weights", tr.init_weights, "weight file to copy the backbone from")->check(CLI::ExistingFile);
  c_tr->add_flag("--freeze-backbone", tr.freeze_backbone, "keep transferred layers fixed");

  EvalArgs ev;
  auto* c_ev = app.add_subcommand("eval", "evaluate on a test manifest");
  add_model_options(c_ev, ev.m);
  c_ev->add_option("--test", ev.test, "test manifest")->check(CLI::ExistingFile);
  c_ev->add_option("--synthetic-per-class", ev.synthetic_per_class, "evaluate on generated images instead");

  InferArgs inf;
  auto* c_inf = app.add_subcommand("infer", "classify one image");
  add_model_options(c_inf, inf.m);
  c_inf->add_option("--image", inf.image, "PNG or JPEG")->required()->check(CLI::ExistingFile);

  MapArgs map;
  auto* c_map = app.add_subcommand("map", "class activation map of one image");
  c_map->add_option("--model", map.model, "model directory")->required();
  c_map->add_option("--image", map.image, "PNG or JPEG")->required()->check(CLI::ExistingFile);
  c_map->add_option("--class", map.cls, "class name or index (default: predicted)");

  std::vector<std::string> compare_runs;
  auto* c_cmp = app.add_subcommand("compare", "tabulate evaluation runs");
  c_cmp->add_option("--run", compare_runs, "NAME=DIR of an eval run")
      ->required()
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);

  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    auto merged = merge_config(app, args);
    std::reverse(merged.begin(), merged.end());
    app.parse(merged);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  }

  CLI::App* sub = app.get_subcommands().front();
  Run run;
  try {
    // reject bad variant names before creating any output
    if (sub == c_arch) variant_arg(arch.variant);
    if (sub == c_tr) variant_arg(tr.variant);
    run.open(g.out.empty() ? default_run_dir(sub->get_name()) : fs::path(g.out));
    run.write("config.txt", snapshot(app, *sub));
    if (sub == c_arch) return cmd_arch(run, arch);
    if (sub == c_ds) return cmd_dataset(run, ds, g.seed);
    if (sub == c_tr) return cmd_train(run, tr, g.seed);
    if (sub == c_ev) return cmd_eval(run, ev, g.seed);
    if (sub == c_inf) return cmd_infer(run, inf);
    if (sub == c_map) return cmd_map(run, map);
    return cmd_compare(run, compare_runs);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
