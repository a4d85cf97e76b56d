#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "revcal/data.hpp"
#include "revcal/error.hpp"
#include "revcal/quantizer.hpp"
#include "revcal/training.hpp"
#include "support.hpp"

using namespace revcal;
using revcal::testing::random_tensor;

namespace {

QuantConfig cfg(int bits, QuantMethod m = QuantMethod::codebook_kmeans) {
  QuantConfig c;
  c.bits = bits;
  c.method = m;
  return c;
}

ArchSpec lenet() {
  ArchSpec s;
  s.family = Family::convnet;
  s.input_shape = {1, 28, 28};
  s.num_classes = 10;
  s.hidden = {6, 16, 64};
  return s;
}

const Model& trained() {
  static const Model m = [] {
    Model net = build_model(lenet(), 1);
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 32;
    tc.lr_schedule = LrSchedule::constant(2e-3);
    train_classifier(net, gen_digits(500, 60), Scenario{"identity", {}}, tc);
    freeze(net);
    return net;
  }();
  return m;
}

}  // namespace

TEST_CASE("config validation and method names") {
  CHECK_THROWS_AS(cfg(0).validate(), Error);
  CHECK_THROWS_AS(cfg(17).validate(), Error);
  CHECK_NOTHROW(cfg(1).validate());
  QuantConfig c = cfg(4);
  c.kmeans_iters = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  CHECK(parse_quant_method(to_string(QuantMethod::uniform_affine)) == QuantMethod::uniform_affine);
  CHECK_THROWS_AS(parse_quant_method("lloyd-max"), Error);
}

TEST_CASE("distinct values never exceed 2^bits") {
  std::mt19937_64 rng(1);
  const Tensor w = random_tensor({40, 30}, rng);
  for (int bits = 1; bits <= 6; ++bits)
    for (auto m : {QuantMethod::codebook_kmeans, QuantMethod::uniform_affine}) {
      const auto q = quantize_layer(w, cfg(bits, m));
      CHECK(distinct_values(q.values) <= (std::size_t{1} << bits));
      CHECK(q.codebook.size() <= (std::size_t{1} << bits));
      CHECK(std::is_sorted(q.codebook.begin(), q.codebook.end()));
      CHECK(q.values.shape == w.shape);
    }
}

TEST_CASE("outputs stay finite and inside the original range") {
  std::mt19937_64 rng(2);
  const Tensor w = random_tensor({500}, rng, -3.0, 2.0);
  const auto [lo, hi] = std::minmax_element(w.data.begin(), w.data.end());
  for (auto m : {QuantMethod::codebook_kmeans, QuantMethod::uniform_affine}) {
    const auto q = quantize_layer(w, cfg(3, m));
    for (double v : q.values.data) {
      CHECK(std::isfinite(v));
      CHECK(v >= *lo);
      CHECK(v <= *hi);
    }
  }
}

TEST_CASE("weights already on k values are a codebook fixed point") {
  std::mt19937_64 rng(3);
  const std::vector<double> levels{-0.7, -0.1, 0.2, 0.9};
  Tensor w({200});
  std::uniform_int_distribution<int> pick(0, 3);
  for (double& v : w.data) v = levels[pick(rng)];
  const auto q = quantize_layer(w, cfg(2));
  CHECK(identical(q.values, w));
  CHECK(q.codebook == levels);
}

TEST_CASE("all-equal weights give a single centroid") {
  const auto q = quantize_layer(Tensor({10}, 0.25), cfg(2));
  CHECK(q.codebook == std::vector<double>{0.25});
  for (double v : q.values.data) CHECK(v == 0.25);
}

TEST_CASE("empty tensors are rejected") {
  CHECK_THROWS_AS(quantize_layer(Tensor({0}), cfg(2)), Error);
}

TEST_CASE("uniform 8-bit snap error is at most half a step") {
  std::mt19937_64 rng(4);
  Tensor w = random_tensor({5000}, rng);
  w.data[0] = -1.0;
  w.data[1] = 1.0;
  const auto q = quantize_layer(w, cfg(8, QuantMethod::uniform_affine));
  const double half_step = (2.0 / 255.0) / 2.0;
  double worst = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) worst = std::max(worst, std::abs(q.values.data[i] - w.data[i]));
  CHECK(worst <= half_step + 1e-15);
  CHECK(q.codebook.size() == 256);
}

TEST_CASE("k-means codebook is at a Lloyd fixed point") {
  std::mt19937_64 rng(5);
  const Tensor w = random_tensor({1000}, rng);
  QuantConfig c = cfg(2);
  c.kmeans_iters = 200;
  const auto q = quantize_layer(w, c);
  // each centroid is the mean of the weights assigned to it
  for (std::size_t k = 0; k < q.codebook.size(); ++k) {
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < w.size(); ++i)
      if (q.values.data[i] == q.codebook[k]) {
        s += w.data[i];
        ++n;
      }
    REQUIRE(n > 0);
    CHECK(q.codebook[k] == doctest::Approx(s / n).epsilon(1e-9));
  }
}

TEST_CASE("quantize_model touches weights only and freezes a copy") {
  Model m = build_model(lenet(), 2);
  const std::string before = param_hash(m);
  const Model q = quantize_model(m, cfg(2));
  CHECK(param_hash(m) == before);
  CHECK_FALSE(m.frozen());
  CHECK(q.frozen());
  REQUIRE(q.quantization.has_value());
  CHECK(q.quantization->bits == 2);
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    const auto& p = m.params()[i];
    const auto& qp = q.params()[i];
    if (p.name.ends_with(".bias")) {
      CHECK(identical(p.tensor, qp.tensor));
    } else {
      CHECK(distinct_values(qp.tensor) <= 4);
      CHECK(q.quantization->codebooks.count(p.name) == 1);
    }
  }
}

TEST_CASE("quantize_model is deterministic and idempotent for uniform") {
  const Model m = build_model(lenet(), 3);
  CHECK(param_hash(quantize_model(m, cfg(3))) == param_hash(quantize_model(m, cfg(3))));
  const QuantConfig u = cfg(8, QuantMethod::uniform_affine);
  const Model once = quantize_model(m, u);
  const Model twice = quantize_model(once, u);
  for (std::size_t i = 0; i < once.params().size(); ++i) CHECK(identical(once.params()[i].tensor, twice.params()[i].tensor));
}

TEST_CASE("16-bit codebook is within 1 point of float, 2-bit is not better") {
  const Dataset test = gen_digits(500, 61);
  const Scenario id{"identity", {}};
  const double f = evaluate(trained(), test, id, 0).accuracy;
  const double q16 = evaluate(quantize_model(trained(), cfg(16)), test, id, 0).accuracy;
  const double q2 = evaluate(quantize_model(trained(), cfg(2)), test, id, 0).accuracy;
  CHECK(std::abs(f - q16) <= 0.01);
  CHECK(q2 < f);
}
