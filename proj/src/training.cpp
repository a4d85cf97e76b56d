#include "revcal/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <thread>

#include "revcal/error.hpp"

namespace revcal {

double LrSchedule::rate_at(std::size_t epoch) const {
  validate();
  double rate = steps.front().second;
  for (const auto& [threshold, r] : steps)
    if (threshold <= epoch) rate = r;
  return rate;
}

void LrSchedule::validate() const {
  if (steps.empty()) fail("lr schedule: at least one (epoch, rate) entry is required");
  for (std::size_t i = 0; i < steps.size(); ++i) {
    if (!(steps[i].second > 0.0)) fail("lr schedule: rates must be positive");
    if (i > 0 && steps[i].first <= steps[i - 1].first) fail("lr schedule: thresholds must be strictly increasing");
  }
}

LrSchedule LrSchedule::calibrater_default() { return LrSchedule{{{0, 2e-4}, {50, 1e-4}, {100, 5e-5}, {150, 2e-5}}}; }

LrSchedule LrSchedule::scaled(std::size_t epochs, const LrSchedule& base, std::size_t base_epochs) {
  LrSchedule out;
  for (const auto& [threshold, rate] : base.steps) {
    const std::size_t t = threshold * epochs / base_epochs;
    if (!out.steps.empty() && t <= out.steps.back().first) continue;
    out.steps.emplace_back(t, rate);
  }
  return out;
}

void TrainConfig::validate() const {
  if (batch_size == 0) fail("train: batch_size must be positive");
  if (threads == 0) fail("train: threads must be positive");
  lr_schedule.validate();
}

void TrainingLog::write_csv(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) fail_io("cannot write " + path.string());
  out.precision(17);
  out << "epoch,mean_loss,lr,eval_accuracy\n";
  for (const auto& e : epochs) {
    out << e.epoch << ',' << e.mean_loss << ',' << e.lr << ',';
    if (!std::isnan(e.eval_accuracy)) out << e.eval_accuracy;
    out << '\n';
  }
}

namespace {

void check_one_hot(const Tensor& y, std::size_t classes, const std::string& who) {
  if (y.rank() != 2 || y.shape[1] != classes)
    fail(who + ": labels " + shape_str(y.shape) + " do not match " + std::to_string(classes) + " classes");
  for (std::size_t i = 0; i < y.shape[0]; ++i) {
    double mx = -1.0, sum = 0.0;
    for (std::size_t k = 0; k < classes; ++k) {
      mx = std::max(mx, y.data[i * classes + k]);
      sum += y.data[i * classes + k];
    }
    if (std::abs(mx - 1.0) > 1e-9 || std::abs(sum - 1.0) > 1e-9)
      fail(who + ": label row " + std::to_string(i) + " is not one-hot");
  }
}

void check_trainable(const Dataset& data, const TrainConfig& cfg, const std::string& who) {
  cfg.validate();
  if (data.size() == 0) fail(who + ": empty dataset");
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(mix_seed(seed, 0x5EED0000ULL + epoch));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

double eval_if_requested(const Model& main, const EvalSpec& eval, const Model* calibrater, const TrainConfig& cfg) {
  if (!eval.data) return std::nan("");
  return evaluate(main, *eval.data, eval.scenario, eval.seed, calibrater, cfg.merge_mode, cfg.input_range, cfg.threads)
      .accuracy;
}

// Shared epoch loop: `step` builds the loss for one batch and returns its value.
template <class Step, class AfterEpoch>
TrainingLog run_epochs(const Dataset& data, const Scenario& scenario, const TrainConfig& cfg, ParamSet params,
                       Step&& step, AfterEpoch&& after_epoch) {
  TrainingLog log;
  AdamState state(cfg.lr_schedule.rate_at(0));
  const std::size_t n = data.size();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    state.learning_rate = cfg.lr_schedule.rate_at(epoch);
    const Tensor inputs = apply_scenario(scenario, data.inputs, cfg.seed + epoch);
    const auto order = epoch_order(n, cfg.seed, epoch);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t stop = std::min(n, start + cfg.batch_size);
      const std::span<const std::size_t> rows(order.data() + start, stop - start);
      const Tensor x = inputs.gather_rows(rows);
      const Tensor y = data.labels.gather_rows(rows);
      const double loss = step(x, y);
      if (!std::isfinite(loss)) fail_numeric("training: non-finite loss at epoch " + std::to_string(epoch));
      loss_sum += loss * static_cast<double>(stop - start);
      adam_step(params, state);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.mean_loss = loss_sum / static_cast<double>(n);
    rec.lr = state.learning_rate;
    rec.eval_accuracy = after_epoch();
    log.epochs.push_back(rec);
  }
  return log;
}

}  // namespace

NodeId cross_entropy(Graph& g, NodeId logits, const Tensor& y) {
  const double n = static_cast<double>(y.shape.at(0));
  const NodeId picked = g.sum(g.mul(g.log_softmax(logits, 1), g.constant(Tensor(y.shape, y.data))));
  return g.affine(picked, -1.0 / n, 0.0);
}

TrainingLog train_classifier(Model& model, const Dataset& data, const Scenario& scenario, const TrainConfig& cfg,
                             const EvalSpec& eval) {
  check_trainable(data, cfg, "train_classifier");
  if (!model.spec().is_classifier()) fail("train_classifier: model is not a classifier");
  if (model.frozen()) fail("train_classifier: model '" + model.name() + "' is frozen");
  if (data.num_classes() != model.spec().num_classes) fail("train_classifier: class count mismatch");
  return run_epochs(
      data, scenario, cfg, model.parameter_set(),
      [&](const Tensor& x, const Tensor& y) {
        Graph g;
        const NodeId loss = cross_entropy(g, model.forward(g, g.constant(Tensor(x.shape, x.data))), y);
        g.backward(loss);
        return g.value(loss).item();
      },
      [&] { return eval_if_requested(model, eval, nullptr, cfg); });
}

NodeId calibrater_loss(Graph& graph, Model& main, Model& g, const Tensor& x, const Tensor& y, MergeMode mode,
                       CalibraterLoss loss, InputRange range) {
  if (!main.frozen()) fail("calibrater_loss: main model '" + main.name() + "' must be frozen");
  if (!main.spec().is_classifier()) fail("calibrater_loss: main model must be a classifier");
  if (g.spec().family != Family::calibrater) fail("calibrater_loss: '" + g.name() + "' is not a calibrater");
  if (g.spec().head != mode)
    fail("calibrater_loss: calibrater head is " + to_string(g.spec().head) + " but merge mode is " + to_string(mode));
  check_one_hot(y, main.spec().num_classes, "calibrater_loss");
  if (y.shape[0] != x.shape.at(0)) fail("calibrater_loss: batch size mismatch between inputs and labels");

  const NodeId xin = graph.constant(Tensor(x.shape, x.data));
  const NodeId delta = g.forward(graph, xin);
  const NodeId logits = main.forward(graph, merge(graph, xin, delta, mode, range));
  if (loss == CalibraterLoss::cross_entropy) return cross_entropy(graph, logits, y);
  const double n = static_cast<double>(y.shape[0]);
  const NodeId picked = graph.sum(graph.mul(graph.softmax(logits, 1), graph.constant(Tensor(y.shape, y.data))));
  return graph.affine(picked, -1.0 / n, 1.0);
}

TrainingLog train_calibrater(Model& main, Model& g, const Dataset& data, const Scenario& scenario,
                             const TrainConfig& cfg, const EvalSpec& eval) {
  if (!main.frozen()) fail("train_calibrater: main model '" + main.name() + "' must be frozen first");
  check_trainable(data, cfg, "train_calibrater");
  if (g.frozen()) fail("train_calibrater: calibrater is frozen");
  const std::string main_hash = param_hash(main);
  auto log = run_epochs(
      data, scenario, cfg, g.parameter_set(),
      [&](const Tensor& x, const Tensor& y) {
        Graph graph;
        const NodeId loss = calibrater_loss(graph, main, g, x, y, cfg.merge_mode, cfg.loss, cfg.input_range);
        graph.backward(loss);
        return graph.value(loss).item();
      },
      [&] {
        if (param_hash(main) != main_hash) fail("train_calibrater: frozen main model changed during training");
        return eval_if_requested(main, eval, &g, cfg);
      });
  return log;
}

Tensor calibrate(const Model& g, const Tensor& x, MergeMode mode, InputRange range) {
  if (g.spec().family != Family::calibrater) fail("calibrate: '" + g.name() + "' is not a calibrater");
  if (g.spec().head != mode)
    fail("calibrate: calibrater head is " + to_string(g.spec().head) + " but merge mode is " + to_string(mode));
  return merge(x, g.infer(x), mode, range);
}

EvalReport evaluate(const Model& main, const Dataset& data, const Scenario& scenario, std::uint64_t seed,
                    const Model* calibrater, MergeMode mode, InputRange range, std::size_t threads) {
  if (!main.spec().is_classifier()) fail("evaluate: main model is not a classifier");
  if (data.size() == 0) fail("evaluate: empty dataset");
  const std::size_t classes = main.spec().num_classes;
  if (data.num_classes() != classes)
    fail("evaluate: dataset has " + std::to_string(data.num_classes()) + " classes but model '" + main.name() +
         "' has " + std::to_string(classes));
  if (calibrater && calibrater->spec().input_shape != main.spec().input_shape)
    fail("evaluate: calibrater input shape does not match the main model");
  if (threads == 0) fail("evaluate: threads must be positive");

  const auto truth = data.class_indices();
  const std::size_t n = data.size();
  std::vector<std::size_t> predicted(n);
  constexpr std::size_t kBatch = 256;

  auto run_range = [&](std::size_t begin, std::size_t end) {
    for (std::size_t start = begin; start < end; start += kBatch) {
      const std::size_t stop = std::min(end, start + kBatch);
      Tensor x = apply_scenario(scenario, data.inputs.slice_rows(start, stop), seed, start);
      if (calibrater) x = calibrate(*calibrater, x, mode, range);
      const auto cls = classify(main, x);
      std::copy(cls.begin(), cls.end(), predicted.begin() + static_cast<std::ptrdiff_t>(start));
    }
  };

  const std::size_t shards = std::min(threads, (n + kBatch - 1) / kBatch);
  if (shards <= 1) {
    run_range(0, n);
  } else {
    std::vector<std::jthread> workers;
    std::vector<std::exception_ptr> errors(shards);
    const std::size_t per = ((n + shards - 1) / shards + kBatch - 1) / kBatch * kBatch;
    for (std::size_t s = 0; s < shards; ++s) {
      const std::size_t b = std::min(n, s * per), e = std::min(n, (s + 1) * per);
      workers.emplace_back([&, s, b, e] {
        try {
          run_range(b, e);
        } catch (...) {
          errors[s] = std::current_exception();
        }
      });
    }
    workers.clear();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  EvalReport r;
  r.dataset_id = data.id;
  r.scenario_id = scenario.id;
  r.model_id = main.name();
  if (calibrater) r.calibrater_id = calibrater->name();
  r.sample_count = n;
  std::vector<std::size_t> hits(classes, 0), totals(classes, 0);
  for (std::size_t i = 0; i < n; ++i) {
    ++totals[truth[i]];
    if (predicted[i] == truth[i]) {
      ++hits[truth[i]];
      ++r.correct;
    }
  }
  r.accuracy = static_cast<double>(r.correct) / static_cast<double>(n);
  for (std::size_t k = 0; k < classes; ++k)
    r.per_class_accuracy.push_back(totals[k] ? static_cast<double>(hits[k]) / static_cast<double>(totals[k]) : 0.0);
  return r;
}

double TransferMatrix::mean_delta() const {
  if (cells.empty()) return 0.0;
  double s = 0.0;
  for (const auto& c : cells) s += c.delta;
  return s / static_cast<double>(cells.size());
}

TransferMatrix transfer_matrix(const std::vector<const Model*>& mains, const std::vector<TrainedCalibrater>& cals,
                               const Dataset& data, const Scenario& scenario, std::uint64_t seed, MergeMode mode,
                               InputRange range, std::size_t threads) {
  if (mains.empty()) fail("transfer_matrix: no main models");
  const Shape& shape = mains.front()->spec().input_shape;
  for (const Model* m : mains)
    if (m->spec().input_shape != shape) fail("transfer_matrix: main models disagree on input shape");
  for (const auto& c : cals) {
    if (c.model->spec().input_shape != shape) fail("transfer_matrix: calibrater input shape does not match the mains");
    if (c.trained_against >= mains.size()) fail("transfer_matrix: calibrater refers to an unknown main model");
  }
  TransferMatrix tm;
  for (const Model* m : mains) tm.baselines.push_back(evaluate(*m, data, scenario, seed, nullptr, mode, range, threads));
  for (std::size_t i = 0; i < mains.size(); ++i)
    for (std::size_t k = 0; k < cals.size(); ++k) {
      const auto& c = cals[k];
      if (c.trained_against == i) continue;
      TransferCell cell;
      cell.main_index = i;
      cell.calibrater = k;
      cell.calibrater_index = c.trained_against;
      cell.report = evaluate(*mains[i], data, scenario, seed, c.model, mode, range, threads);
      cell.delta = cell.report.accuracy - tm.baselines[i].accuracy;
      tm.cells.push_back(std::move(cell));
    }
  return tm;
}

}  // namespace revcal
