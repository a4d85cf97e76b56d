#include "revcal/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <type_traits>

#include "revcal/data.hpp"
#include "revcal/error.hpp"
#include "revcal/hashing.hpp"
#include "revcal/model.hpp"
#include "revcal/perturbation.hpp"
#include "revcal/quantizer.hpp"
#include "revcal/training.hpp"
#include "revcal/transforms.hpp"
#include "svg.hpp"

namespace revcal {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<std::string>& subcommand_names() {
  static const std::vector<std::string> names{"train-main", "train-calibrater", "eval",      "quantize",
                                              "attack",     "transfer",         "synthetic", "visualize-delta"};
  return names;
}

json parse_config(const std::string& text, const std::string& origin) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    std::string what = e.what();
    if (auto pos = what.find("syntax error"); pos != std::string::npos) what = what.substr(pos);
    fail(origin + ":" + std::to_string(line) + ":" + std::to_string(col) + ": " + what);
  }
}

namespace {

// Reads one config object, records every value it hands out (defaults
// included) into the resolved tree and rejects keys nobody asked for.
class Cfg {
 public:
  Cfg(json in, json* out, std::string path) : in_(std::move(in)), out_(out), path_(std::move(path)) {
    if (in_.is_null()) in_ = json::object();
    if (!in_.is_object()) fail("config field '" + path_ + "' must be an object");
    *out_ = json::object();
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  bool has(const std::string& key) const { return in_.contains(key) && !in_.at(key).is_null(); }

  template <class T>
  T get(const std::string& key, const T& def) {
    used_.insert(key);
    T v = has(key) ? convert<T>(in_.at(key), field(key)) : def;
    (*out_)[key] = v;
    return v;
  }

  template <class T>
  T require(const std::string& key) {
    used_.insert(key);
    if (!has(key)) fail("config field '" + field(key) + "' is required");
    T v = convert<T>(in_.at(key), field(key));
    (*out_)[key] = v;
    return v;
  }

  std::optional<std::string> optional_string(const std::string& key) {
    used_.insert(key);
    if (!has(key)) {
      (*out_)[key] = nullptr;
      return std::nullopt;
    }
    auto v = convert<std::string>(in_.at(key), field(key));
    (*out_)[key] = v;
    return v;
  }

  json raw(const std::string& key, const json& def) {
    used_.insert(key);
    json v = has(key) ? in_.at(key) : def;
    (*out_)[key] = v;
    return v;
  }

  // Fields computed from the data. Accepted on input (a replayed manifest
  // carries them) only when they agree with the computed value.
  void derived(const std::string& key, const json& v) {
    used_.insert(key);
    if (has(key) && in_.at(key) != v)
      fail("config field '" + field(key) + "' is derived from the data as " + v.dump() + ", got " + in_.at(key).dump());
    (*out_)[key] = v;
  }

  // Replaces the recorded value, for fields whose resolved form differs from the input.
  void record(const std::string& key, const json& v) { (*out_)[key] = v; }

  Cfg child(const std::string& key) {
    used_.insert(key);
    json v = in_.contains(key) ? in_.at(key) : json::object();
    (*out_)[key] = json::object();
    return Cfg(v, &(*out_)[key], field(key));
  }

  void finish() const {
    for (const auto& [k, v] : in_.items())
      if (!used_.count(k)) fail("unknown config field '" + field(k) + "'");
  }

 private:
  template <class T>
  static T convert(const json& j, const std::string& f) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!j.is_boolean()) fail("config field '" + f + "': expected true or false");
      return j.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!j.is_string()) fail("config field '" + f + "': expected a string");
      return j.get<std::string>();
    } else if constexpr (std::is_same_v<T, double>) {
      if (!j.is_number()) fail("config field '" + f + "': expected a number");
      return j.get<double>();
    } else if constexpr (std::is_same_v<T, int>) {
      if (!j.is_number_integer()) fail("config field '" + f + "': expected an integer");
      return j.get<int>();
    } else if constexpr (std::is_unsigned_v<T>) {
      if (!j.is_number_unsigned() && !(j.is_number_integer() && j.get<long long>() >= 0))
        fail("config field '" + f + "': expected a non-negative integer");
      return j.get<T>();
    } else {
      if (!j.is_array()) fail("config field '" + f + "': expected a list");
      T out;
      for (std::size_t i = 0; i < j.size(); ++i)
        out.push_back(convert<typename T::value_type>(j[i], f + "[" + std::to_string(i) + "]"));
      return out;
    }
  }

  json in_;
  json* out_;
  std::string path_;
  std::set<std::string> used_;
};

using Clock = std::chrono::steady_clock;

struct Run {
  std::string subcommand;
  fs::path out;
  json seeds = json::object();
  json inputs = json::object();
  json datasets = json::object();
  json results = json::object();
  std::vector<std::string> artifacts;
  std::size_t threads = 1;

  void input(const fs::path& p) {
    if (!fs::exists(p)) fail_io("input file not found: " + p.string());
    inputs[p.string()] = file_sha256(p);
  }
  fs::path artifact(const std::string& rel) {
    if (std::find(artifacts.begin(), artifacts.end(), rel) == artifacts.end()) artifacts.push_back(rel);
    return out / rel;
  }
  void dataset(const std::string& role, const Dataset& d) {
    datasets[role] = {{"id", d.id}, {"size", d.size()}, {"hash", d.size() ? d.content_hash() : std::string()}};
  }
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) fail_io("cannot write " + path.string());
  f << text;
  if (!f) fail_io("short write to " + path.string());
}

std::string fmt(double v, const char* spec = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

// CSV files start with a schema comment and a column line. Appending to a
// file whose header differs is refused before anything is written.
void write_csv(const fs::path& path, const std::string& schema, const std::string& columns,
               const std::vector<std::string>& rows, bool append) {
  const std::string header = "# " + schema + "\n" + columns + "\n";
  std::string body;
  for (const auto& r : rows) body += r + "\n";
  if (append && fs::exists(path)) {
    std::ifstream in(path);
    std::string l1, l2;
    std::getline(in, l1);
    std::getline(in, l2);
    if (l1 + "\n" + l2 + "\n" != header)
      fail_io(path.string() + ": header mismatch (expected '" + schema + "'), refusing to append");
    std::ofstream f(path, std::ios::app | std::ios::binary);
    if (!f) fail_io("cannot append to " + path.string());
    f << body;
    return;
  }
  write_text(path, header + body);
}

// ---- config pieces -------------------------------------------------------

Dataset load_data(Cfg c, Run& run, const std::string& role, std::size_t default_n, std::uint64_t default_seed) {
  const auto kind = c.get<std::string>("kind", "digits");
  Dataset d;
  if (kind == "digits") {
    const auto n = c.get<std::size_t>("n", default_n);
    const auto seed = c.get<std::uint64_t>("seed", default_seed);
    const auto size = c.get<std::size_t>("size", 28);
    if (n == 0) {
      d.id = "digits-empty";
    } else {
      d = gen_digits(n, seed, size);
      d.id = "digits-n" + std::to_string(n) + "-s" + std::to_string(seed);
    }
  } else if (kind == "idx") {
    const fs::path images = c.require<std::string>("images"), labels = c.require<std::string>("labels");
    const auto classes = c.get<std::size_t>("num_classes", 10);
    const auto limit = c.get<std::size_t>("limit", 0);
    run.input(images);
    run.input(labels);
    d = load_idx(images, labels, classes);
    if (limit && limit < d.size()) d = d.head(limit);
  } else if (kind == "dataset") {
    const fs::path path = c.require<std::string>("path");
    const auto limit = c.get<std::size_t>("limit", 0);
    run.input(path);
    d = load_dataset(path);
    if (limit && limit < d.size()) d = d.head(limit);
  } else if (kind == "circles") {
    const auto n = c.get<std::size_t>("n", default_n);
    const auto r_in = c.get<double>("r_inner", 1.0), r_out = c.get<double>("r_outer", 1.5);
    const auto noise = c.get<double>("noise_sd", 0.1);
    const auto seed = c.get<std::uint64_t>("seed", default_seed);
    d = gen_circles(n, r_in, r_out, noise, seed);
  } else {
    fail("config field '" + c.field("kind") + "': unknown dataset kind '" + kind +
         "' (expected digits, idx, dataset or circles)");
  }
  c.finish();
  run.dataset(role, d);
  return d;
}

Scenario scenario_field(Cfg& c, const std::string& key, const std::string& def) {
  const json raw = c.raw(key, def);
  Scenario s = scenario_from_json(raw);
  c.record(key, to_json(s));
  return s;
}

LrSchedule schedule_field(Cfg& c, const LrSchedule& def) {
  json d = json::array();
  for (const auto& [t, r] : def.steps) d.push_back(json::array({t, r}));
  const json raw = c.raw("lr_schedule", d);
  LrSchedule s;
  if (raw.is_number()) {
    s = LrSchedule::constant(raw.get<double>());
  } else {
    if (!raw.is_array()) fail("config field '" + c.field("lr_schedule") + "': expected a list of [epoch, rate] pairs");
    for (const auto& e : raw) {
      if (!e.is_array() || e.size() != 2 || !e[0].is_number_integer() || e[0].get<long long>() < 0 || !e[1].is_number())
        fail("config field '" + c.field("lr_schedule") + "': every entry must be [epoch, rate]");
      s.steps.emplace_back(e[0].get<std::size_t>(), e[1].get<double>());
    }
  }
  s.validate();
  json resolved = json::array();
  for (const auto& [t, r] : s.steps) resolved.push_back(json::array({t, r}));
  c.record("lr_schedule", resolved);
  return s;
}

TrainConfig train_field(Cfg c, std::size_t epochs, std::size_t batch, const LrSchedule& lr, std::uint64_t seed) {
  TrainConfig t;
  t.epochs = c.get<std::size_t>("epochs", epochs);
  t.batch_size = c.get<std::size_t>("batch_size", batch);
  t.lr_schedule = schedule_field(c, lr);
  t.seed = c.get<std::uint64_t>("seed", seed);
  c.finish();
  t.validate();
  return t;
}

Activation parse_activation(const std::string& s, const std::string& f) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  fail("config field '" + f + "': unknown activation '" + s + "' (expected relu or tanh)");
}

ArchSpec classifier_arch(Cfg c, const Shape& input, std::size_t classes, std::uint64_t seed,
                         const std::string& vector_family = "mlp") {
  ArchSpec s;
  const bool image = input.size() == 3;
  s.family = parse_family(c.get<std::string>("family", image ? "convnet" : vector_family));
  if (s.family == Family::calibrater) fail("config field '" + c.field("family") + "': a classifier family is required");
  std::vector<std::size_t> hidden;
  if (s.family == Family::convnet) hidden = {6, 16, 64};
  if (s.family == Family::mlp) hidden = {32, 32};
  s.hidden = c.get<std::vector<std::size_t>>("hidden", hidden);
  s.activation = parse_activation(c.get<std::string>("activation", "relu"), c.field("activation"));
  s.seed = c.get<std::uint64_t>("seed", seed);
  s.input_shape = input;
  s.num_classes = classes;
  c.derived("input_shape", input);
  c.derived("num_classes", classes);
  c.finish();
  validate(s);
  return s;
}

ArchSpec calibrater_arch(Cfg c, const Shape& input, MergeMode head, std::size_t main_params, std::uint64_t seed,
                         json& sizing, double default_epsilon = 1.0) {
  ArchSpec s;
  s.family = Family::calibrater;
  s.input_shape = input;
  s.head = head;
  s.seed = c.get<std::uint64_t>("seed", seed);
  s.head_init_scale = c.get<double>("head_init_scale", 0.1);
  s.epsilon = c.get<double>("epsilon", default_epsilon);
  if (input.size() == 3) {
    s.down_layers = c.get<std::size_t>("down_layers", 3);
    s.up_layers = c.get<std::size_t>("up_layers", 3);
    const auto size = c.get<std::string>("size", "auto");
    if (size == "auto") {
      const double fraction = c.get<double>("fraction", 0.1);
      const auto max_blocks = c.get<std::size_t>("max_blocks", 4);
      const auto max_channels = c.get<std::size_t>("max_channels", 32);
      const CalibraterSize cs = size_calibrater(s, main_params, fraction, max_blocks, max_channels);
      s.res_blocks = cs.res_blocks;
      s.channels = cs.channels;
      sizing = {{"res_blocks", cs.res_blocks}, {"channels", cs.channels}, {"param_count", cs.param_count},
                {"budget", fraction * static_cast<double>(main_params)}};
    } else if (size == "manual") {
      s.channels = c.get<std::size_t>("channels", 8);
      s.res_blocks = c.get<std::size_t>("res_blocks", 1);
    } else {
      fail("config field '" + c.field("size") + "': expected auto or manual");
    }
  } else {
    s.hidden = c.get<std::vector<std::size_t>>("hidden", {16, 16});
    s.activation = parse_activation(c.get<std::string>("activation", "tanh"), c.field("activation"));
  }
  c.derived("input_shape", input);
  c.finish();
  validate(s);
  return s;
}

CalibraterLoss loss_field(Cfg& c) {
  const auto name = c.get<std::string>("loss", "one_minus_prob");
  if (name == "one_minus_prob") return CalibraterLoss::one_minus_prob;
  if (name == "cross_entropy") return CalibraterLoss::cross_entropy;
  fail("config field '" + c.field("loss") + "': expected one_minus_prob or cross_entropy");
}

InputRange range_field(Cfg& c, const Shape& input) {
  const bool clamp = c.get<bool>("clamp", input.size() == 3);
  return clamp ? InputRange{} : InputRange::unbounded();
}

Model load_input_model(Run& run, const std::string& path) {
  run.input(path);
  return load_model(path);
}

std::string model_bits(const Model& m) { return m.quantization ? std::to_string(m.quantization->bits) : "float"; }

double accuracy_of(const Model& main, const Dataset& d, const Scenario& s, std::uint64_t seed, const Model* g,
                   MergeMode mode, InputRange range, std::size_t threads) {
  return evaluate(main, d, s, seed, g, mode, range, threads).accuracy;
}

// ---- subcommands ---------------------------------------------------------

void cmd_train_main(Cfg& root, Run& run, std::uint64_t seed) {
  const auto name = root.get<std::string>("name", "main");
  Dataset data = load_data(root.child("data"), run, "train", 2000, 1);
  Dataset test = load_data(root.child("test_data"), run, "test", 2000, 2);
  if (data.size() == 0) fail("train-main: empty training set");
  const Scenario scenario = scenario_field(root, "scenario", "A");
  const Scenario eval_scenario = scenario_field(root, "eval_scenario", "identity");
  const auto eval_seed = root.get<std::uint64_t>("eval_seed", seed + 2);
  ArchSpec arch = classifier_arch(root.child("arch"), data.feature_shape(), data.num_classes(), seed);
  TrainConfig tc = train_field(root.child("train"), 5, 32, LrSchedule::constant(2e-3), seed + 1);
  tc.threads = run.threads;
  run.seeds = {{"seed", seed}, {"init", arch.seed}, {"train", tc.seed}, {"eval", eval_seed}};

  root.finish();
  Model model = build_model(arch);
  model.set_name(name);
  const std::string init_hash = param_hash(model);
  const Dataset* eval_data = test.size() ? &test : nullptr;
  TrainingLog log = train_classifier(model, data, scenario, tc, EvalSpec{eval_data, eval_scenario, eval_seed});

  save_model(model, run.artifact(name + ".rvm"));
  log.write_csv(run.artifact(name + ".train_log.csv"));
  run.results["param_count"] = count_params(model);
  run.results["init_param_hash"] = init_hash;
  run.results["param_hash"] = param_hash(model);
  if (eval_data) {
    run.results["test_accuracy"] =
        accuracy_of(model, test, eval_scenario, eval_seed, nullptr, MergeMode::multiplicative, {}, run.threads);
  }
  if (!log.epochs.empty()) run.results["final_loss"] = log.epochs.back().mean_loss;
}

void cmd_train_calibrater(Cfg& root, Run& run, std::uint64_t seed) {
  const auto main_path = root.require<std::string>("main");
  const auto name = root.get<std::string>("name", "calibrater");
  Model main = load_input_model(run, main_path);
  main.freeze();
  const std::string before = param_hash(main);

  Dataset data = load_data(root.child("data"), run, "train", 2000, 1);
  Dataset test = load_data(root.child("test_data"), run, "test", 2000, 2);
  const Scenario scenario = scenario_field(root, "scenario", "B2");
  const MergeMode mode = parse_merge_mode(root.get<std::string>("merge_mode", "multiplicative"));
  const CalibraterLoss loss = loss_field(root);
  const InputRange range = range_field(root, main.spec().input_shape);
  const auto eval_seed = root.get<std::uint64_t>("eval_seed", seed + 2);
  json sizing = json::object();
  ArchSpec arch = calibrater_arch(root.child("arch"), main.spec().input_shape, mode, count_params(main), seed, sizing);
  TrainConfig tc = train_field(root.child("train"), 40, 64, LrSchedule::scaled(40), seed + 1);
  tc.merge_mode = mode;
  tc.loss = loss;
  tc.input_range = range;
  tc.threads = run.threads;
  run.seeds = {{"seed", seed}, {"init", arch.seed}, {"train", tc.seed}, {"eval", eval_seed}};

  root.finish();
  Model g = build_model(arch);
  g.set_name(name);
  const Dataset* eval_data = test.size() ? &test : nullptr;
  TrainingLog log = train_calibrater(main, g, data, scenario, tc, EvalSpec{eval_data, scenario, eval_seed});
  const std::string after = param_hash(main);
  if (after != before) fail("train-calibrater: main model parameters changed");

  save_model(g, run.artifact(name + ".rvm"));
  log.write_csv(run.artifact(name + ".train_log.csv"));
  run.results["main_hash_before"] = before;
  run.results["main_hash_after"] = after;
  run.results["main_param_count"] = count_params(main);
  run.results["param_count"] = count_params(g);
  run.results["param_hash"] = param_hash(g);
  if (!sizing.empty()) run.results["sizing"] = sizing;
  if (eval_data) {
    const double base = accuracy_of(main, test, scenario, eval_seed, nullptr, mode, range, run.threads);
    const double cal = accuracy_of(main, test, scenario, eval_seed, &g, mode, range, run.threads);
    run.results["baseline_accuracy"] = base;
    run.results["calibrated_accuracy"] = cal;
    run.results["delta"] = cal - base;
  }
}

void cmd_eval(Cfg& root, Run& run, std::uint64_t seed) {
  const json models_raw = root.raw("models", json::array());
  if (!models_raw.is_array() || models_raw.empty()) fail("config field 'models': expected a non-empty list of paths");
  const auto cal_path = root.optional_string("calibrater");
  const MergeMode mode = parse_merge_mode(root.get<std::string>("merge_mode", "multiplicative"));
  const json scen_raw = root.raw("scenarios", json::array({"identity", "B2"}));
  if (!scen_raw.is_array() || scen_raw.empty()) fail("config field 'scenarios': expected a non-empty list");
  Dataset test = load_data(root.child("test_data"), run, "test", 2000, 2);
  const auto results = root.get<std::string>("results", "results.csv");
  const auto append = root.get<bool>("append", true);
  const auto eval_seed = root.get<std::uint64_t>("eval_seed", seed + 2);
  run.seeds = {{"seed", seed}, {"eval", eval_seed}};

  root.finish();
  std::vector<Model> models;
  for (const auto& m : models_raw) {
    if (!m.is_string()) fail("config field 'models': entries must be paths");
    models.push_back(load_input_model(run, m.get<std::string>()));
  }
  std::optional<Model> cal;
  if (cal_path) cal = load_input_model(run, *cal_path);
  std::vector<Scenario> scenarios;
  json resolved = json::array();
  for (const auto& s : scen_raw) {
    scenarios.push_back(scenario_from_json(s));
    resolved.push_back(to_json(scenarios.back()));
  }
  root.record("scenarios", resolved);

  std::vector<std::string> rows;
  json table = json::array();
  for (const Model& m : models) {
    const InputRange range = m.spec().input_shape.size() == 3 ? InputRange{} : InputRange::unbounded();
    for (const Scenario& s : scenarios) {
      std::vector<const Model*> variants{nullptr};
      if (cal) variants.push_back(&*cal);
      for (const Model* g : variants) {
        const EvalReport r = evaluate(m, test, s, eval_seed, g, mode, range, run.threads);
        const std::string gname = g ? g->name() : "none";
        rows.push_back(m.name() + "," + model_bits(m) + "," + s.id + "," + gname + "," + fmt(r.accuracy) + "," +
                       std::to_string(r.sample_count));
        table.push_back({{"model", m.name()}, {"bits", model_bits(m)}, {"scenario", s.id}, {"calibrater", gname},
                         {"accuracy", r.accuracy}, {"correct", r.correct}, {"n", r.sample_count},
                         {"per_class_accuracy", r.per_class_accuracy}});
      }
    }
  }
  const fs::path rpath = fs::path(results).is_absolute() ? fs::path(results) : run.artifact(results);
  write_csv(rpath, "revcal-eval schema=1", "model,bits,scenario,calibrater,accuracy,n", rows, append);
  run.results["rows"] = table;
}

void cmd_quantize(Cfg& root, Run& run, std::uint64_t seed) {
  const auto path = root.require<std::string>("model");
  Model m = load_input_model(run, path);
  QuantConfig q;
  q.bits = root.get<int>("bits", 2);
  q.method = parse_quant_method(root.get<std::string>("method", "codebook_kmeans"));
  root.record("method", to_string(q.method));
  q.kmeans_iters = root.get<std::size_t>("kmeans_iters", 25);
  q.seed = root.get<std::uint64_t>("quant_seed", seed);
  const auto name = root.get<std::string>("name", m.name() + "-" + std::to_string(q.bits) + "bit");
  const bool with_test = root.has("test_data");
  Dataset test;
  if (with_test) test = load_data(root.child("test_data"), run, "test", 2000, 2);
  else root.raw("test_data", nullptr);
  const auto eval_seed = root.get<std::uint64_t>("eval_seed", seed + 2);
  run.seeds = {{"seed", seed}, {"quant", q.seed}, {"eval", eval_seed}};

  root.finish();
  Model out = quantize_model(m, q);
  out.set_name(name);
  save_model(out, run.artifact(name + ".rvm"));
  json layers = json::object();
  std::size_t max_distinct = 0;
  for (const auto& p : out.params()) {
    if (!out.quantization->codebooks.count(p.name)) continue;
    const std::size_t d = distinct_values(p.tensor);
    layers[p.name] = d;
    max_distinct = std::max(max_distinct, d);
  }
  run.results["distinct_values"] = layers;
  run.results["max_distinct"] = max_distinct;
  run.results["level_limit"] = std::size_t{1} << q.bits;
  run.results["param_hash"] = param_hash(out);
  if (with_test && m.spec().is_classifier()) {
    const Scenario id = named_scenario("identity");
    run.results["float_accuracy"] = accuracy_of(m, test, id, eval_seed, nullptr, MergeMode::multiplicative, {}, run.threads);
    run.results["quantized_accuracy"] =
        accuracy_of(out, test, id, eval_seed, nullptr, MergeMode::multiplicative, {}, run.threads);
  }
}

void cmd_attack(Cfg& root, Run& run, std::uint64_t seed) {
  const auto path = root.optional_string("model");
  Dataset test = load_data(root.child("test_data"), run, "test", 1000, 2);
  if (test.size() == 0) fail("attack: empty test set");
  Cfg arch_cfg = root.child("random_arch");
  Model model;
  if (path) {
    arch_cfg.finish();
    model = load_input_model(run, *path);
  } else {
    model = build_model(classifier_arch(arch_cfg, test.feature_shape(), test.num_classes(), seed));
    model.set_name("random-" + to_string(model.spec().family));
  }
  model.freeze();
  AttackConfig a;
  const auto dir = root.get<std::string>("direction", "reverse");
  if (dir != "reverse" && dir != "adversarial") fail("config field 'direction': expected reverse or adversarial");
  a.direction = dir == "reverse" ? AttackDirection::reverse : AttackDirection::adversarial;
  a.merge_mode = parse_merge_mode(root.get<std::string>("merge_mode", "additive"));
  a.bound = root.get<double>("bound", 0.3);
  a.iterations = root.get<std::size_t>("iterations", 50);
  a.step_size = root.get<double>("step_size", a.iterations ? 2.0 * a.bound / static_cast<double>(a.iterations) : 0.0);
  a.input_range = range_field(root, model.spec().input_shape);
  // Optional standardisation of the inputs by the test set's own mean and
  // deviation; the clamp range and the bound then live in standardised units.
  const auto normalize = root.get<bool>("normalize", false);
  if (normalize) {
    double mean = 0.0, sq = 0.0;
    for (double v : test.inputs.data) mean += v;
    mean /= static_cast<double>(test.inputs.data.size());
    for (double v : test.inputs.data) sq += (v - mean) * (v - mean);
    const double sd = std::sqrt(sq / static_cast<double>(test.inputs.data.size()));
    if (!(sd > 0.0)) fail("attack: cannot normalize constant inputs");
    for (double& v : test.inputs.data) v = (v - mean) / sd;
    if (std::isfinite(a.input_range.lo)) a.input_range.lo = (a.input_range.lo - mean) / sd;
    if (std::isfinite(a.input_range.hi)) a.input_range.hi = (a.input_range.hi - mean) / sd;
    run.results["normalize_mean"] = mean;
    run.results["normalize_std"] = sd;
  }
  const auto batch = root.get<std::size_t>("batch_size", 100);
  if (batch == 0) fail("config field 'batch_size' must be positive");
  validate(a);
  run.seeds = {{"seed", seed}};

  root.finish();
  const auto truth = test.class_indices();
  std::size_t pre = 0, post = 0;
  for (std::size_t start = 0; start < test.size(); start += batch) {
    const std::size_t stop = std::min(test.size(), start + batch);
    const Tensor x = test.inputs.slice_rows(start, stop), y = test.labels.slice_rows(start, stop);
    const AttackResult r = iterative_attack(model, x, y, a);
    const auto c0 = classify(model, x), c1 = classify(model, r.perturbed);
    for (std::size_t i = 0; i < c0.size(); ++i) {
      pre += c0[i] == truth[start + i];
      post += c1[i] == truth[start + i];
    }
  }
  const double n = static_cast<double>(test.size());
  const std::vector<std::string> rows{model.name() + "," + dir + "," + to_string(a.merge_mode) + "," + fmt(a.bound) +
                                      "," + std::to_string(a.iterations) + "," + fmt(a.step_size) + "," +
                                      fmt(pre / n) + "," + fmt(post / n) + "," + std::to_string(test.size())};
  write_csv(run.artifact("attack.csv"), "revcal-attack schema=1",
            "model,direction,merge_mode,bound,iterations,step_size,pre_accuracy,post_accuracy,n", rows, false);
  run.results["pre_accuracy"] = pre / n;
  run.results["post_accuracy"] = post / n;
  run.results["param_hash"] = param_hash(model);
}

void cmd_transfer(Cfg& root, Run& run, std::uint64_t seed) {
  const json mains_raw = root.raw("mains", json::array());
  const json cals_raw = root.raw("calibraters", json::array());
  if (!mains_raw.is_array() || mains_raw.empty()) fail("config field 'mains': expected a non-empty list of paths");
  if (!cals_raw.is_array()) fail("config field 'calibraters': expected a list");
  Dataset test = load_data(root.child("test_data"), run, "test", 2000, 2);
  const Scenario scenario = scenario_field(root, "scenario", "B2");
  const MergeMode mode = parse_merge_mode(root.get<std::string>("merge_mode", "multiplicative"));
  const auto eval_seed = root.get<std::uint64_t>("eval_seed", seed + 2);
  run.seeds = {{"seed", seed}, {"eval", eval_seed}};

  root.finish();
  std::vector<Model> mains;
  for (const auto& m : mains_raw) {
    if (!m.is_string()) fail("config field 'mains': entries must be paths");
    mains.push_back(load_input_model(run, m.get<std::string>()));
  }
  std::vector<Model> cal_models;
  std::vector<std::size_t> against;
  for (const auto& c : cals_raw) {
    if (!c.is_object() || !c.contains("path") || !c.contains("trained_against") || !c["path"].is_string() ||
        !c["trained_against"].is_number_integer() || c["trained_against"].get<long long>() < 0)
      fail("config field 'calibraters': entries must be {\"path\": ..., \"trained_against\": <main index>}");
    cal_models.push_back(load_input_model(run, c["path"].get<std::string>()));
    against.push_back(c["trained_against"].get<std::size_t>());
  }
  std::vector<const Model*> main_ptrs;
  for (const auto& m : mains) main_ptrs.push_back(&m);
  std::vector<TrainedCalibrater> cals;
  for (std::size_t i = 0; i < cal_models.size(); ++i) cals.push_back({&cal_models[i], against[i]});
  const InputRange range = mains.front().spec().input_shape.size() == 3 ? InputRange{} : InputRange::unbounded();
  const TransferMatrix tm = transfer_matrix(main_ptrs, cals, test, scenario, eval_seed, mode, range, run.threads);

  std::vector<std::string> rows;
  json cells = json::array();
  for (const auto& c : tm.cells) {
    const std::string mname = mains[c.main_index].name();
    const std::string calname = cal_models[c.calibrater].name();
    rows.push_back(mname + "," + calname + "," + fmt(tm.baselines[c.main_index].accuracy) + "," +
                   fmt(c.report.accuracy) + "," + fmt(c.delta, "%+.6f"));
    cells.push_back({{"main", mname}, {"calibrater", calname}, {"trained_against", c.calibrater_index},
                     {"baseline", tm.baselines[c.main_index].accuracy}, {"accuracy", c.report.accuracy},
                     {"delta", c.delta}});
  }
  rows.push_back("mean,,,," + fmt(tm.mean_delta(), "%+.6f"));
  write_csv(run.artifact("transfer.csv"), "revcal-transfer schema=1", "main,calibrater,baseline,accuracy,delta", rows,
            false);
  run.results["cells"] = cells;
  run.results["mean_delta"] = tm.mean_delta();
}

// ---- synthetic 2-D experiments -------------------------------------------

std::vector<svg::Point> points_of(const Tensor& x, const std::vector<std::size_t>& cls) {
  std::vector<svg::Point> out;
  for (std::size_t i = 0; i < cls.size(); ++i) out.push_back({x.data[2 * i], x.data[2 * i + 1], cls[i]});
  return out;
}

std::vector<std::size_t> boundary(const Model& m, const svg::Bounds& b) {
  const auto centres = svg::grid_centres(b);
  Tensor g({centres.size(), 2});
  for (std::size_t i = 0; i < centres.size(); ++i) {
    g.data[2 * i] = centres[i].first;
    g.data[2 * i + 1] = centres[i].second;
  }
  return classify(m, g);
}

double accuracy_on(const Model& m, const Tensor& x, const std::vector<std::size_t>& truth) {
  const auto c = classify(m, x);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < c.size(); ++i) hit += c[i] == truth[i];
  return static_cast<double>(hit) / static_cast<double>(c.size());
}

svg::Bounds union_bounds(std::initializer_list<svg::Bounds> bs) {
  svg::Bounds u = *bs.begin();
  for (const auto& b : bs) {
    u.x0 = std::min(u.x0, b.x0);
    u.x1 = std::max(u.x1, b.x1);
    u.y0 = std::min(u.y0, b.y0);
    u.y1 = std::max(u.y1, b.y1);
  }
  return u;
}

void synthetic_circles(Cfg& root, Run& run, std::uint64_t seed) {
  Cfg dc = root.child("data");
  const auto n = dc.get<std::size_t>("n", 400);
  const auto r_in = dc.get<double>("r_inner", 1.0), r_out = dc.get<double>("r_outer", 1.5);
  const auto noise = dc.get<double>("noise_sd", 0.1);
  const auto dseed = dc.get<std::uint64_t>("seed", seed + 3);
  dc.finish();
  Dataset data = gen_circles(n, r_in, r_out, noise, dseed);
  run.dataset("circles", data);

  ArchSpec lin = classifier_arch(root.child("classifier"), {2}, 2, seed, "linear");
  TrainConfig tc = train_field(root.child("classifier_train"), 60, 32, LrSchedule::constant(0.05), seed + 1);
  json sizing;
  ArchSpec ga = calibrater_arch(root.child("calibrater"), {2}, MergeMode::additive, 0, seed + 4, sizing, 3.0);
  TrainConfig gc = train_field(root.child("calibrater_train"), 1000, 32, LrSchedule::constant(0.01), seed + 5);
  gc.merge_mode = MergeMode::additive;
  gc.input_range = InputRange::unbounded();
  gc.loss = loss_field(root);
  run.seeds = {{"seed", seed}, {"data", dseed}, {"classifier_init", lin.seed}, {"classifier_train", tc.seed},
               {"calibrater_init", ga.seed}, {"calibrater_train", gc.seed}};

  root.finish();
  const Scenario id = named_scenario("identity");
  Model f = build_model(lin);
  f.set_name("linear");
  train_classifier(f, data, id, tc);
  f.freeze();
  Model g = build_model(ga);
  g.set_name("calibrater");
  TrainingLog log = train_calibrater(f, g, data, id, gc);

  const auto truth = data.class_indices();
  const Tensor& x = data.inputs;
  const Tensor delta = g.infer(x);
  const Tensor calibrated = merge(x, delta, MergeMode::additive, InputRange::unbounded());
  Tensor reversed(x.shape, x.data);
  for (std::size_t i = 0; i < reversed.data.size(); ++i) reversed.data[i] -= delta.data[i];

  const double raw_acc = accuracy_on(f, x, truth), cal_acc = accuracy_on(f, calibrated, truth),
               rev_acc = accuracy_on(f, reversed, truth);
  const auto p_raw = points_of(x, truth), p_cal = points_of(calibrated, truth), p_rev = points_of(reversed, truth);
  const svg::Bounds b = union_bounds({svg::fit(p_raw), svg::fit(p_cal), svg::fit(p_rev)});
  const auto grid = boundary(f, b);
  write_text(run.artifact("circles_raw.svg"), svg::plot("raw data, accuracy " + fmt(raw_acc, "%.3f"), b, p_raw, grid));
  write_text(run.artifact("circles_calibrated.svg"),
             svg::plot("calibrated, accuracy " + fmt(cal_acc, "%.3f"), b, p_cal, grid));
  write_text(run.artifact("circles_reversed.svg"),
             svg::plot("calibrater reversed, accuracy " + fmt(rev_acc, "%.3f"), b, p_rev, grid));
  write_csv(run.artifact("circles.csv"), "revcal-synthetic schema=1", "panel,accuracy,n",
            {"raw," + fmt(raw_acc) + "," + std::to_string(n), "calibrated," + fmt(cal_acc) + "," + std::to_string(n),
             "reversed," + fmt(rev_acc) + "," + std::to_string(n)},
            false);
  log.write_csv(run.artifact("circles_calibrater_log.csv"));
  save_model(f, run.artifact("circles_linear.rvm"));
  save_model(g, run.artifact("circles_calibrater.rvm"));
  run.results = {{"raw_accuracy", raw_acc}, {"calibrated_accuracy", cal_acc}, {"reversed_accuracy", rev_acc},
                 {"points", n}};
}

void synthetic_ellipses(Cfg& root, Run& run, std::uint64_t seed) {
  Cfg dc = root.child("data");
  const auto n = dc.get<std::size_t>("n", 1000);
  const auto dseed = dc.get<std::uint64_t>("seed", seed + 3);
  EllipsePair geo = default_ellipses();
  auto ellipse_field = [&](const std::string& key, Ellipse& e) {
    Cfg ec = dc.child(key);
    e.cx = ec.get<double>("cx", e.cx);
    e.cy = ec.get<double>("cy", e.cy);
    e.a = ec.get<double>("a", e.a);
    e.b = ec.get<double>("b", e.b);
    e.angle_deg = ec.get<double>("angle_deg", e.angle_deg);
    ec.finish();
  };
  ellipse_field("first", geo.first);
  ellipse_field("second", geo.second);
  geo.shell = dc.get<double>("shell", geo.shell);
  dc.finish();
  EllipseSplit split = gen_ellipses(n, geo, dseed);
  run.dataset("non_overlap", split.non_overlap);
  run.dataset("overlap", split.overlap);

  ArchSpec ma = classifier_arch(root.child("classifier"), {2}, 2, seed);
  TrainConfig tc = train_field(root.child("classifier_train"), 300, 32, LrSchedule::constant(0.01), seed + 1);
  json sizing;
  const MergeMode mode = parse_merge_mode(root.get<std::string>("merge_mode", "multiplicative"));
  ArchSpec ga = calibrater_arch(root.child("calibrater"), {2}, mode, 0, seed + 4, sizing);
  TrainConfig gc = train_field(root.child("calibrater_train"), 300, 32, LrSchedule::constant(0.01), seed + 5);
  gc.merge_mode = mode;
  gc.input_range = InputRange::unbounded();
  gc.loss = loss_field(root);
  run.seeds = {{"seed", seed}, {"data", dseed}, {"classifier_init", ma.seed}, {"classifier_train", tc.seed},
               {"calibrater_init", ga.seed}, {"calibrater_train", gc.seed}};

  root.finish();
  const Scenario id = named_scenario("identity");
  Model f = build_model(ma);
  f.set_name("mlp");
  train_classifier(f, split.non_overlap, id, tc);
  f.freeze();

  // Finetune analog: the same architecture and seed trained on all the data.
  Tensor all_x({split.overlap.size() + split.non_overlap.size(), 2});
  std::copy(split.non_overlap.inputs.data.begin(), split.non_overlap.inputs.data.end(), all_x.data.begin());
  std::copy(split.overlap.inputs.data.begin(), split.overlap.inputs.data.end(),
            all_x.data.begin() + static_cast<std::ptrdiff_t>(split.non_overlap.inputs.data.size()));
  auto all_cls = split.non_overlap.class_indices();
  const auto ov_cls = split.overlap.class_indices();
  all_cls.insert(all_cls.end(), ov_cls.begin(), ov_cls.end());
  const Dataset all = make_dataset("ellipses-all", all_x, all_cls, 2);
  Model full = build_model(ma);
  full.set_name("mlp-full");
  train_classifier(full, all, id, tc);
  full.freeze();

  Model g = build_model(ga);
  g.set_name("calibrater");
  TrainingLog log = train_calibrater(f, g, split.overlap, id, gc);
  const Tensor calibrated = calibrate(g, split.overlap.inputs, mode, InputRange::unbounded());

  const auto non_cls = split.non_overlap.class_indices();
  const double train_acc = accuracy_on(f, split.non_overlap.inputs, non_cls);
  const double base_acc = accuracy_on(f, split.overlap.inputs, ov_cls);
  const double full_acc = accuracy_on(full, split.overlap.inputs, ov_cls);
  const double full_all_acc = accuracy_on(full, all.inputs, all_cls);
  const double cal_acc = accuracy_on(f, calibrated, ov_cls);

  const auto p_non = points_of(split.non_overlap.inputs, non_cls), p_ov = points_of(split.overlap.inputs, ov_cls),
             p_all = points_of(all.inputs, all_cls), p_cal = points_of(calibrated, ov_cls);
  const svg::Bounds b = union_bounds({svg::fit(p_all), svg::fit(p_cal)});
  const auto grid_f = boundary(f, b), grid_full = boundary(full, b);
  std::vector<std::size_t> regions;
  for (const auto& [x, y] : svg::grid_centres(b)) {
    const bool in1 = geo.first.contains(x, y), in2 = geo.second.contains(x, y);
    regions.push_back(in1 && in2 ? 2 : in1 ? 0 : in2 ? 1 : svg::kNoCell);
  }
  write_text(run.artifact("ellipses_a_main.svg"),
             svg::plot("main model on its training data, accuracy " + fmt(train_acc, "%.3f"), b, p_non, grid_f));
  write_text(run.artifact("ellipses_b_full.svg"),
             svg::plot("trained on all data, overlap accuracy " + fmt(full_acc, "%.3f"), b, p_all, grid_full));
  write_text(run.artifact("ellipses_c_regions.svg"), svg::plot("all data and the overlap region", b, p_all, regions));
  write_text(run.artifact("ellipses_d_calibrated.svg"),
             svg::plot("calibrated overlap data, accuracy " + fmt(cal_acc, "%.3f") + " (was " + fmt(base_acc, "%.3f") + ")",
                       b, p_cal, grid_f));
  const std::string no = std::to_string(split.overlap.size()), nn = std::to_string(split.non_overlap.size());
  write_csv(run.artifact("ellipses.csv"), "revcal-synthetic schema=1", "panel,accuracy,n",
            {"main_on_non_overlap," + fmt(train_acc) + "," + nn, "main_on_overlap," + fmt(base_acc) + "," + no,
             "full_data_on_overlap," + fmt(full_acc) + "," + no,
             "full_data_on_all," + fmt(full_all_acc) + "," + std::to_string(all.size()),
             "calibrated_overlap," + fmt(cal_acc) + "," + no},
            false);
  log.write_csv(run.artifact("ellipses_calibrater_log.csv"));
  save_model(f, run.artifact("ellipses_mlp.rvm"));
  save_model(g, run.artifact("ellipses_calibrater.rvm"));
  run.results = {{"train_accuracy", train_acc},         {"overlap_baseline_accuracy", base_acc},
                 {"finetune_overlap_accuracy", full_acc}, {"finetune_all_accuracy", full_all_acc},
                 {"calibrated_accuracy", cal_acc},      {"overlap_points", split.overlap.size()},
                 {"non_overlap_points", split.non_overlap.size()}};
}

void cmd_synthetic(Cfg& root, Run& run, std::uint64_t seed) {
  const auto which = root.require<std::string>("which");
  if (which == "circles_symmetry") return synthetic_circles(root, run, seed);
  if (which == "ellipses_unseen") return synthetic_ellipses(root, run, seed);
  fail("config field 'which': expected circles_symmetry or ellipses_unseen, got '" + which + "'");
}

Model calibrater_or_identity(Run& run, const std::string& spec, MergeMode mode, const Shape& input) {
  if (spec != "identity") {
    Model g = load_input_model(run, spec);
    if (g.spec().head != mode)
      fail("visualize-delta: '" + spec + "' has a " + to_string(g.spec().head) + " head, expected " + to_string(mode));
    return g;
  }
  ArchSpec a;
  a.family = Family::calibrater;
  a.input_shape = input;
  a.head = mode;
  if (input.size() != 3) a.hidden = {16, 16};
  Model g = build_model(a);
  make_identity(g);
  g.set_name("identity-" + to_string(mode));
  return g;
}

void cmd_visualize_delta(Cfg& root, Run& run, std::uint64_t seed) {
  const auto add = root.get<std::string>("additive", "identity");
  const auto mul = root.get<std::string>("multiplicative", "identity");
  Dataset data = load_data(root.child("data"), run, "samples", 8, 2);
  const Scenario scenario = scenario_field(root, "scenario", "identity");
  const auto samples = root.get<std::size_t>("samples", 4);
  const auto scale = root.get<double>("scale", 0.0);
  run.seeds = {{"seed", seed}};
  if (samples == 0) fail("config field 'samples' must be positive");
  if (samples > data.size())
    fail("visualize-delta: " + std::to_string(samples) + " samples requested but the data has " +
         std::to_string(data.size()));
  if (data.feature_shape().size() != 3) fail("visualize-delta: image data required");

  root.finish();
  const Model ga = calibrater_or_identity(run, add, MergeMode::additive, data.feature_shape());
  const Model gm = calibrater_or_identity(run, mul, MergeMode::multiplicative, data.feature_shape());
  const Tensor x = apply_scenario(scenario, data.inputs.slice_rows(0, samples), seed);
  const Tensor da = ga.infer(x), dm = gm.infer(x);
  json files = json::array();
  for (std::size_t i = 0; i < samples; ++i) {
    const std::string ia = "sample" + std::to_string(i) + "_additive.pgm";
    const std::string im = "sample" + std::to_string(i) + "_multiplicative.pgm";
    visualize_perturbation(da.slice_rows(i, i + 1), MergeMode::additive, run.artifact(ia), scale);
    visualize_perturbation(dm.slice_rows(i, i + 1), MergeMode::multiplicative, run.artifact(im), scale);
    files.push_back(ia);
    files.push_back(im);
  }
  run.results["files"] = files;
}

}  // namespace

json run_subcommand(const std::string& name, const json& config_in, const json& overrides) {
  const auto& names = subcommand_names();
  if (std::find(names.begin(), names.end(), name) == names.end()) fail("unknown subcommand '" + name + "'");
  if (!config_in.is_object()) fail("config must be a JSON object");
  json config = config_in;
  if (config.value("kind", "") == "revcal-manifest") {
    if (config.value("subcommand", "") != name)
      fail("manifest was written by '" + config.value("subcommand", "") + "', not '" + name + "'");
    config = config.at("config");
  }
  if (!overrides.is_object()) fail("overrides must be a JSON object");
  for (const auto& [k, v] : overrides.items()) config[k] = v;

  const auto start = Clock::now();
  json resolved;
  Cfg root(config, &resolved, "");
  Run run;
  run.subcommand = name;
  run.out = root.get<std::string>("out", "runs/" + name);
  const auto seed = root.get<std::uint64_t>("seed", 0);
  run.threads = root.get<std::size_t>("threads", 1);
  if (run.threads == 0) fail("config field 'threads' must be positive");
  fs::create_directories(run.out);

  if (name == "train-main") cmd_train_main(root, run, seed);
  else if (name == "train-calibrater") cmd_train_calibrater(root, run, seed);
  else if (name == "eval") cmd_eval(root, run, seed);
  else if (name == "quantize") cmd_quantize(root, run, seed);
  else if (name == "attack") cmd_attack(root, run, seed);
  else if (name == "transfer") cmd_transfer(root, run, seed);
  else if (name == "synthetic") cmd_synthetic(root, run, seed);
  else cmd_visualize_delta(root, run, seed);
  root.finish();

  json outputs = json::object();
  for (const auto& a : run.artifacts) outputs[a] = file_sha256(run.out / a);
  json manifest = {{"kind", "revcal-manifest"},
                   {"tool", "revcal"},
                   {"version", kToolVersion},
                   {"subcommand", name},
                   {"config", resolved},
                   {"seeds", run.seeds},
                   {"datasets", run.datasets},
                   {"inputs", run.inputs},
                   {"outputs", outputs},
                   {"results", run.results},
                   {"duration_seconds", std::chrono::duration<double>(Clock::now() - start).count()}};
  write_text(run.out / "manifest.json", manifest.dump(2) + "\n");
  return manifest;
}

}  // namespace revcal
