#include <cmath>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "doctest.h"
#include "revcal/data.hpp"
#include "revcal/error.hpp"
#include "revcal/gradcheck.hpp"
#include "revcal/training.hpp"
#include "support.hpp"

using namespace revcal;
using revcal::testing::random_tensor;
using revcal::testing::temp_dir;

namespace {

const Scenario kIdentity{"identity", {}};

ArchSpec linear2() {
  ArchSpec s;
  s.family = Family::linear;
  s.input_shape = {2};
  s.num_classes = 2;
  return s;
}

ArchSpec vector_calibrater(MergeMode head = MergeMode::additive) {
  ArchSpec s;
  s.family = Family::calibrater;
  s.input_shape = {2};
  s.hidden = {8, 8};
  s.activation = Activation::tanh;
  s.head = head;
  s.head_init_scale = 1.0;
  return s;
}

ArchSpec lenet(std::uint64_t seed) {
  ArchSpec s;
  s.family = Family::convnet;
  s.input_shape = {1, 28, 28};
  s.num_classes = 10;
  s.hidden = {6, 16, 64};
  s.seed = seed;
  return s;
}

ArchSpec image_calibrater(std::uint64_t seed) {
  ArchSpec s;
  s.family = Family::calibrater;
  s.input_shape = {1, 28, 28};
  s.channels = 4;
  s.res_blocks = 1;
  s.seed = seed;
  return s;
}

// Constant-logit classifier: zero weights, the given biases.
Model constant_main(std::vector<double> bias) {
  ArchSpec s = linear2();
  s.num_classes = bias.size();
  Model m = build_model(s);
  for (auto& p : m.params()) {
    for (double& v : p.tensor.data) v = 0.0;
    if (p.name.ends_with(".bias")) p.tensor.data = bias;
  }
  freeze(m);
  return m;
}

double loss_value(Model& main, Model& g, const Tensor& x, const Tensor& y, MergeMode mode,
                  CalibraterLoss loss = CalibraterLoss::one_minus_prob) {
  Graph graph;
  return graph.value(calibrater_loss(graph, main, g, x, y, mode, loss, InputRange::unbounded())).item();
}

Model trained_linear(const Dataset& d) {
  Model m = build_model(linear2(), 1);
  TrainConfig tc;
  tc.epochs = 20;
  tc.batch_size = 16;
  tc.lr_schedule = LrSchedule::constant(0.05);
  train_classifier(m, d, kIdentity, tc);
  freeze(m);
  return m;
}

// Small digit main shared by the evaluation tests.
const Model& digit_main() {
  static const Model m = [] {
    Model net = build_model(lenet(2));
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 32;
    tc.lr_schedule = LrSchedule::constant(2e-3);
    train_classifier(net, gen_digits(400, 8), kIdentity, tc);
    freeze(net);
    return net;
  }();
  return m;
}

}  // namespace

TEST_CASE("lr schedule picks the greatest threshold not above the epoch") {
  const LrSchedule s = LrSchedule::calibrater_default();
  CHECK(s.rate_at(0) == 2e-4);
  CHECK(s.rate_at(49) == 2e-4);
  CHECK(s.rate_at(50) == 1e-4);
  CHECK(s.rate_at(149) == 5e-5);
  CHECK(s.rate_at(1000) == 2e-5);
  const LrSchedule d = LrSchedule::scaled(40);
  REQUIRE(d.steps.size() == 4);
  CHECK(d.steps[1].first == 10);
  CHECK(d.steps[2].first == 20);
  CHECK(d.steps[3].first == 30);
}

TEST_CASE("lr schedule validation") {
  CHECK_THROWS_AS(LrSchedule{}.validate(), Error);
  CHECK_THROWS_AS((LrSchedule{{{0, 1e-3}, {0, 1e-4}}}.validate()), Error);
  CHECK_THROWS_AS((LrSchedule{{{0, 0.0}}}.validate()), Error);
  CHECK_NOTHROW(LrSchedule::scaled(40).validate());
}

TEST_CASE("uniform main gives loss 1 - 1/C exactly") {
  for (std::size_t c : {2u, 5u}) {
    Model main = constant_main(std::vector<double>(c, 0.0));
    ArchSpec gs = vector_calibrater();
    Model g = build_model(gs, 3);
    std::mt19937_64 rng(c);
    const Tensor x = random_tensor({6, 2}, rng);
    std::vector<std::size_t> cls(6);
    for (std::size_t i = 0; i < 6; ++i) cls[i] = i % c;
    CHECK(loss_value(main, g, x, one_hot(cls, c), MergeMode::additive) == 1.0 - 1.0 / static_cast<double>(c));
  }
}

TEST_CASE("perfect main gives zero loss") {
  Model main = constant_main({1000.0, 0.0});
  Model g = build_model(vector_calibrater(), 3);
  const Tensor y = one_hot(std::vector<std::size_t>{0, 0, 0}, 2);
  CHECK(loss_value(main, g, Tensor({3, 2}, 0.3), y, MergeMode::additive) == 0.0);
}

TEST_CASE("calibrater loss lies in [0,1]") {
  const Dataset d = gen_circles(40, 1.0, 1.5, 0.1, 2);
  Model main = build_model(linear2(), 5);
  freeze(main);
  for (std::uint64_t s = 0; s < 10; ++s) {
    Model g = build_model(vector_calibrater(), s);
    const double l = loss_value(main, g, d.inputs, d.labels, MergeMode::additive);
    CHECK(l >= 0.0);
    CHECK(l <= 1.0);
  }
}

TEST_CASE("calibrater loss gradient matches finite differences") {
  const Dataset d = gen_circles(8, 1.0, 1.5, 0.1, 3);
  Model main = build_model(linear2(), 5);
  freeze(main);
  for (auto mode : {MergeMode::additive, MergeMode::multiplicative}) {
    for (auto kind : {CalibraterLoss::one_minus_prob, CalibraterLoss::cross_entropy}) {
      Model g = build_model(vector_calibrater(mode), 7);
      const auto report = grad_check_params(
          [&](Graph& graph) {
            return calibrater_loss(graph, main, g, d.inputs, d.labels, mode, kind, InputRange::unbounded());
          },
          g.parameter_set(), 1e-5, 1e-4);
      INFO("max rel err " << report.max_rel_error);
      CHECK(report.passed);
    }
  }
}

TEST_CASE("calibrater loss leaves the main without gradients") {
  const Dataset d = gen_circles(8, 1.0, 1.5, 0.1, 3);
  Model main = build_model(linear2(), 5);
  freeze(main);
  Model g = build_model(vector_calibrater(), 7);
  Graph graph;
  graph.backward(calibrater_loss(graph, main, g, d.inputs, d.labels, MergeMode::additive));
  for (const auto& p : main.params()) CHECK_FALSE(p.tensor.grad.has_value());
  bool any = false;
  for (const auto& p : g.params()) any = any || p.tensor.grad.has_value();
  CHECK(any);
}

TEST_CASE("calibrater loss preconditions") {
  const Dataset d = gen_circles(8, 1.0, 1.5, 0.1, 3);
  Model main = build_model(linear2(), 5);
  Model g = build_model(vector_calibrater(), 7);
  Graph graph;
  CHECK_THROWS_AS(calibrater_loss(graph, main, g, d.inputs, d.labels, MergeMode::additive), Error);
  freeze(main);
  Tensor soft = d.labels;
  soft.data[0] = 0.5;
  soft.data[1] = 0.5;
  CHECK_THROWS_AS(calibrater_loss(graph, main, g, d.inputs, soft, MergeMode::additive), Error);
  CHECK_THROWS_AS(calibrater_loss(graph, main, g, d.inputs, d.labels.slice_rows(0, 4), MergeMode::additive), Error);
  CHECK_THROWS_AS(calibrater_loss(graph, main, g, d.inputs, d.labels, MergeMode::multiplicative), Error);
  Model other = build_model(linear2(), 6);
  CHECK_THROWS_AS(calibrater_loss(graph, main, other, d.inputs, d.labels, MergeMode::additive), Error);
}

TEST_CASE("train_calibrater contract on circles") {
  const Dataset d = gen_circles(200, 1.0, 1.5, 0.1, 9);
  Model main = trained_linear(d);
  const std::string main_hash = param_hash(main);
  TrainConfig cfg;
  cfg.epochs = 60;
  cfg.batch_size = 32;
  cfg.lr_schedule = LrSchedule{{{0, 0.01}, {30, 0.005}}};
  cfg.merge_mode = MergeMode::additive;
  cfg.input_range = InputRange::unbounded();
  cfg.seed = 5;
  ArchSpec gs = vector_calibrater();
  gs.epsilon = 3.0;
  Model g1 = build_model(gs, 4);
  const TrainingLog log = train_calibrater(main, g1, d, kIdentity, cfg, EvalSpec{&d, kIdentity, 0});
  CHECK(param_hash(main) == main_hash);
  REQUIRE(log.epochs.size() == 60);
  for (const auto& e : log.epochs) CHECK(e.lr == cfg.lr_schedule.rate_at(e.epoch));
  CHECK_FALSE(std::isnan(log.epochs.back().eval_accuracy));

  std::size_t windows = 0, down = 0;
  for (std::size_t e = 0; e + 10 < log.epochs.size(); ++e, ++windows)
    down += log.epochs[e + 10].mean_loss <= log.epochs[e].mean_loss;
  CHECK(down >= 0.8 * windows);

  Model g2 = build_model(gs, 4);
  train_calibrater(main, g2, d, kIdentity, cfg);
  CHECK(param_hash(g1) == param_hash(g2));
}

TEST_CASE("train_calibrater preconditions and zero epochs") {
  const Dataset d = gen_circles(20, 1.0, 1.5, 0.1, 9);
  Model main = build_model(linear2(), 1);
  Model g = build_model(vector_calibrater(), 2);
  TrainConfig cfg;
  cfg.merge_mode = MergeMode::additive;
  CHECK_THROWS_AS(train_calibrater(main, g, d, kIdentity, cfg), Error);
  freeze(main);
  Dataset empty = d.head(0);
  CHECK_THROWS_AS(train_calibrater(main, g, empty, kIdentity, cfg), Error);
  cfg.epochs = 0;
  const std::string h = param_hash(g);
  CHECK(train_calibrater(main, g, d, kIdentity, cfg).epochs.empty());
  CHECK(param_hash(g) == h);
}

TEST_CASE("train_classifier refuses frozen models and mismatched classes") {
  const Dataset d = gen_circles(20, 1.0, 1.5, 0.1, 9);
  Model m = build_model(linear2(), 1);
  freeze(m);
  CHECK_THROWS_AS(train_classifier(m, d, kIdentity, TrainConfig{}), Error);
  ArchSpec three = linear2();
  three.num_classes = 3;
  Model t = build_model(three, 1);
  CHECK_THROWS_AS(train_classifier(t, d, kIdentity, TrainConfig{}), Error);
}

TEST_CASE("non-finite loss is a numeric error") {
  Dataset d = gen_circles(20, 1.0, 1.5, 0.1, 9);
  d.inputs.data[0] = 1e300;
  Model m = build_model(linear2(), 1);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.lr_schedule = LrSchedule::constant(1e10);
  try {
    train_classifier(m, d, kIdentity, cfg);
    FAIL("diverging run accepted");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::numeric);
  }
}

TEST_CASE("evaluate reports consistent counts") {
  const Dataset d = gen_digits(120, 40);
  const Model& m = digit_main();
  const EvalReport r = evaluate(m, d, kIdentity, 0);
  CHECK(r.sample_count == 120);
  CHECK(r.accuracy == static_cast<double>(r.correct) / 120.0);
  const auto pred = classify(m, d.inputs);
  const auto truth = d.class_indices();
  std::size_t hit = 0;
  for (std::size_t i = 0; i < 120; ++i) hit += pred[i] == truth[i];
  CHECK(r.correct == hit);
  REQUIRE(r.per_class_accuracy.size() == 10);
  double mean = 0.0;
  for (double a : r.per_class_accuracy) mean += a / 10.0;
  CHECK(mean == doctest::Approx(r.accuracy));  // balanced classes
}

TEST_CASE("sharded evaluation matches the single-threaded path") {
  const Dataset d = gen_digits(300, 41);
  const Scenario b2 = named_scenario("B2");
  const EvalReport one = evaluate(digit_main(), d, b2, 7, nullptr, MergeMode::multiplicative, {}, 1);
  const EvalReport many = evaluate(digit_main(), d, b2, 7, nullptr, MergeMode::multiplicative, {}, 3);
  CHECK(one.correct == many.correct);
  CHECK(one.per_class_accuracy == many.per_class_accuracy);
}

TEST_CASE("identity calibrater reproduces the baseline exactly") {
  const Dataset d = gen_digits(200, 42);
  const Scenario b2 = named_scenario("B2");
  Model g = build_model(image_calibrater(3));
  make_identity(g);
  const EvalReport base = evaluate(digit_main(), d, b2, 9);
  const EvalReport with = evaluate(digit_main(), d, b2, 9, &g, MergeMode::multiplicative);
  CHECK(with.correct == base.correct);
  CHECK(with.calibrater_id.has_value());
  CHECK_FALSE(base.calibrater_id.has_value());
}

TEST_CASE("untrained calibrater stays within 2 points of the baseline") {
  const Dataset d = gen_digits(300, 43);
  const Model g = build_model(image_calibrater(4));
  const EvalReport base = evaluate(digit_main(), d, kIdentity, 0);
  const EvalReport with = evaluate(digit_main(), d, kIdentity, 0, &g, MergeMode::multiplicative);
  CHECK(std::abs(with.accuracy - base.accuracy) <= 0.02);
}

TEST_CASE("evaluate rejects class-count mismatches and empty data") {
  const Dataset d = gen_circles(20, 1.0, 1.5, 0.1, 1);
  ArchSpec three = linear2();
  three.num_classes = 3;
  CHECK_THROWS_AS(evaluate(build_model(three), d, kIdentity, 0), Error);
  CHECK_THROWS_AS(evaluate(build_model(linear2()), d.head(0), kIdentity, 0), Error);
}

TEST_CASE("transfer matrix shape and bookkeeping") {
  const Dataset d = gen_circles(60, 1.0, 1.5, 0.1, 1);
  const Model m0 = build_model(linear2(), 1), m1 = build_model(linear2(), 2), m2 = build_model(linear2(), 3);
  const Model g0 = build_model(vector_calibrater(), 4), g1 = build_model(vector_calibrater(), 5),
              g2 = build_model(vector_calibrater(), 6);
  const TransferMatrix one = transfer_matrix({&m0}, {{&g0, 0}}, d, kIdentity, 0, MergeMode::additive);
  CHECK(one.cells.empty());
  CHECK(one.baselines.size() == 1);

  const TransferMatrix full = transfer_matrix({&m0, &m1, &m2}, {{&g0, 0}, {&g1, 1}, {&g2, 2}}, d, kIdentity, 0,
                                              MergeMode::additive, InputRange::unbounded());
  REQUIRE(full.cells.size() == 6);
  double sum = 0.0;
  for (const auto& c : full.cells) {
    CHECK(c.main_index != c.calibrater_index);
    CHECK(c.delta == c.report.accuracy - full.baselines[c.main_index].accuracy);
    sum += c.delta;
  }
  CHECK(full.mean_delta() == doctest::Approx(sum / 6.0));
}

TEST_CASE("transfer matrix rejects mismatched input shapes") {
  const Dataset d = gen_circles(20, 1.0, 1.5, 0.1, 1);
  const Model m = build_model(linear2(), 1);
  const Model img = build_model(image_calibrater(1));
  CHECK_THROWS_AS(transfer_matrix({&m}, {{&img, 0}}, d, kIdentity, 0, MergeMode::multiplicative), Error);
  const Model g = build_model(vector_calibrater(), 1);
  CHECK_THROWS_AS(transfer_matrix({&m}, {{&g, 3}}, d, kIdentity, 0, MergeMode::additive), Error);
}

TEST_CASE("cross-architecture transfer runs") {
  const Dataset d = gen_digits(60, 50);
  ArchSpec mlp;
  mlp.family = Family::mlp;
  mlp.input_shape = {1, 28, 28};
  mlp.num_classes = 10;
  mlp.hidden = {16};
  const Model a = build_model(mlp, 1);
  const Model g = build_model(image_calibrater(2));
  const TransferMatrix t = transfer_matrix({&a, &digit_main()}, {{&g, 0}}, d, kIdentity, 0, MergeMode::multiplicative);
  CHECK(t.cells.size() == 1);
  CHECK(t.cells[0].main_index == 1);
}

TEST_CASE("training log csv columns") {
  const auto dir = temp_dir("trainlog");
  TrainingLog log;
  log.epochs.push_back({0, 0.5, 1e-3, 0.25});
  log.epochs.push_back({1, 0.4, 1e-3, std::nan("")});
  log.write_csv(dir / "log.csv");
  std::ifstream in(dir / "log.csv");
  std::string header, a, b;
  std::getline(in, header);
  std::getline(in, a);
  std::getline(in, b);
  CHECK(header == "epoch,mean_loss,lr,eval_accuracy");
  CHECK(a.rfind("0,", 0) == 0);
  CHECK(b.back() == ',');
}
