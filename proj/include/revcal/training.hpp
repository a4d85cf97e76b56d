#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "revcal/data.hpp"
#include "revcal/model.hpp"
#include "revcal/perturbation.hpp"
#include "revcal/transforms.hpp"

namespace revcal {

// Piecewise-constant learning rate: the rate at epoch e is the one attached to
// the greatest threshold <= e.
struct LrSchedule {
  std::vector<std::pair<std::size_t, double>> steps;

  double rate_at(std::size_t epoch) const;
  void validate() const;

  // 0.0002 / 0.0001 / 0.00005 / 0.00002 switching at epochs 50, 100, 150.
  static LrSchedule calibrater_default();
  // Same rates with thresholds scaled from a 200-epoch run to `epochs`.
  static LrSchedule scaled(std::size_t epochs, const LrSchedule& base = calibrater_default(), std::size_t base_epochs = 200);
  static LrSchedule constant(double rate) { return LrSchedule{{{0, rate}}}; }
};

enum class CalibraterLoss { one_minus_prob, cross_entropy };

struct TrainConfig {
  std::size_t epochs = 40;
  std::size_t batch_size = 64;
  LrSchedule lr_schedule = LrSchedule::scaled(40);
  std::uint64_t seed = 0;
  MergeMode merge_mode = MergeMode::multiplicative;
  CalibraterLoss loss = CalibraterLoss::one_minus_prob;
  InputRange input_range{};
  std::size_t threads = 1;

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double lr = 0.0;
  double eval_accuracy = std::nan("");
};

struct TrainingLog {
  std::vector<EpochRecord> epochs;
  void write_csv(const std::filesystem::path& path) const;
};

// Held-out evaluation run after every epoch.
struct EvalSpec {
  const Dataset* data = nullptr;
  Scenario scenario{"identity", {}};
  std::uint64_t seed = 0;
};

// Softmax cross-entropy averaged over the batch.
NodeId cross_entropy(Graph& g, NodeId logits, const Tensor& y_onehot);

// Trains a classifier on `data` pushed through `scenario` (resampled each
// epoch with seed + epoch) by minimising the mean cross-entropy.
TrainingLog train_classifier(Model& model, const Dataset& data, const Scenario& scenario, const TrainConfig& cfg,
                             const EvalSpec& eval = {});

// Mean over the batch of 1 - softmax(main(merge(x, g(x))))[true class], or the
// cross-entropy variant. Differentiable with respect to g only.
NodeId calibrater_loss(Graph& graph, Model& main, Model& g, const Tensor& x, const Tensor& y_onehot, MergeMode mode,
                       CalibraterLoss loss = CalibraterLoss::one_minus_prob, InputRange range = {});

// Algorithm: main stays frozen, g is updated by Adam on batches of
// `data` transformed by `scenario`. Throws if main is not frozen or changes.
TrainingLog train_calibrater(Model& main, Model& g, const Dataset& data, const Scenario& scenario,
                             const TrainConfig& cfg, const EvalSpec& eval = {});

struct EvalReport {
  std::string dataset_id;
  std::string scenario_id;
  std::string model_id;
  std::optional<std::string> calibrater_id;
  double accuracy = 0.0;
  std::vector<double> per_class_accuracy;
  std::size_t correct = 0;
  std::size_t sample_count = 0;
};

// Applies the scenario (seeded per example), optionally routes each input
// through merge(x, g(x)), classifies and counts. `threads` shards the work.
EvalReport evaluate(const Model& main, const Dataset& data, const Scenario& scenario, std::uint64_t seed,
                    const Model* calibrater = nullptr, MergeMode mode = MergeMode::multiplicative,
                    InputRange range = {}, std::size_t threads = 1);

// Calibrated inputs merge(x, g(x)) for a batch.
Tensor calibrate(const Model& g, const Tensor& x, MergeMode mode, InputRange range = {});

struct TransferCell {
  std::size_t main_index = 0;
  std::size_t calibrater_index = 0;  // index of the main the calibrater was trained against
  std::size_t calibrater = 0;        // position in the calibrater list
  EvalReport report;
  double delta = 0.0;  // accuracy minus the main's no-calibrater baseline
};

struct TransferMatrix {
  std::vector<EvalReport> baselines;  // one per main
  std::vector<TransferCell> cells;    // off-diagonal only
  double mean_delta() const;
};

struct TrainedCalibrater {
  const Model* model;
  std::size_t trained_against;
};

TransferMatrix transfer_matrix(const std::vector<const Model*>& mains, const std::vector<TrainedCalibrater>& calibraters,
                               const Dataset& data, const Scenario& scenario, std::uint64_t seed, MergeMode mode,
                               InputRange range = {}, std::size_t threads = 1);

}  // namespace revcal
