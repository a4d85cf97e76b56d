#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <vector>

#include "doctest.h"
#include "revcal/data.hpp"
#include "revcal/error.hpp"
#include "revcal/model.hpp"
#include "support.hpp"

using namespace revcal;
using revcal::testing::random_tensor;
using revcal::testing::temp_dir;

namespace {

ArchSpec linear_spec() {
  ArchSpec s;
  s.family = Family::linear;
  s.input_shape = {2};
  s.num_classes = 2;
  return s;
}

ArchSpec convnet_spec(std::uint64_t seed = 1) {
  ArchSpec s;
  s.family = Family::convnet;
  s.input_shape = {1, 28, 28};
  s.num_classes = 10;
  s.hidden = {6, 16, 64};
  s.seed = seed;
  return s;
}

ArchSpec calibrater_spec(Shape input = {1, 16, 16}) {
  ArchSpec s;
  s.family = Family::calibrater;
  s.input_shape = std::move(input);
  s.channels = 4;
  s.res_blocks = 2;
  s.seed = 9;
  return s;
}

bool same_params(const Model& a, const Model& b) {
  if (a.params().size() != b.params().size()) return false;
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    if (a.params()[i].name != b.params()[i].name) return false;
    if (!identical(a.params()[i].tensor, b.params()[i].tensor)) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("linear 2->2 has 2*2+2 parameters") {
  CHECK(count_params(build_model(linear_spec())) == 6);
}

TEST_CASE("empty model has no parameters") {
  CHECK(count_params(Model{}) == 0);
}

TEST_CASE("calibrater output shape equals its input shape") {
  std::mt19937_64 rng(1);
  for (const Shape& in : {Shape{1, 16, 16}, Shape{3, 16, 16}, Shape{1, 28, 28}}) {
    const Model g = build_model(calibrater_spec(in));
    const Tensor x = random_tensor([&] {
      Shape s{2};
      s.insert(s.end(), in.begin(), in.end());
      return s;
    }(), rng, 0.0, 1.0);
    const Tensor d = g.infer(x);
    CHECK(d.shape == x.shape);
    CHECK(g.output_shape() == in);
  }
}

TEST_CASE("vector calibrater keeps the feature shape") {
  ArchSpec s;
  s.family = Family::calibrater;
  s.input_shape = {2};
  s.hidden = {8, 8};
  s.activation = Activation::tanh;
  s.head = MergeMode::additive;
  const Model g = build_model(s);
  std::mt19937_64 rng(2);
  CHECK(g.infer(random_tensor({5, 2}, rng)).shape == Shape{5, 2});
}

TEST_CASE("same spec and seed give bit-identical parameters") {
  CHECK(same_params(build_model(convnet_spec(), 5), build_model(convnet_spec(), 5)));
  CHECK_FALSE(same_params(build_model(convnet_spec(), 5), build_model(convnet_spec(), 6)));
}

TEST_CASE("init stays inside the fan-in bound") {
  const Model m = build_model(linear_spec(), 3);
  const double bound = 1.0 / std::sqrt(2.0);
  for (const auto& p : m.params())
    for (double v : p.tensor.data) CHECK(std::abs(v) <= bound);
}

TEST_CASE("argmax ties go to the lowest index") {
  CHECK(argmax_rows(Tensor({1, 2}, {0.1, 0.9})) == std::vector<std::size_t>{1});
  CHECK(argmax_rows(Tensor({1, 2}, {0.5, 0.5})) == std::vector<std::size_t>{0});
  CHECK(argmax_rows(Tensor({2, 3}, {2, 2, 2, -1, 4, 4})) == std::vector<std::size_t>{0, 1});
}

TEST_CASE("classify rejects calibraters and wrong input shapes") {
  const Model m = build_model(linear_spec());
  CHECK_THROWS_AS(classify(m, Tensor({3, 3})), Error);
  CHECK_THROWS_AS(classify(build_model(calibrater_spec()), Tensor({1, 1, 16, 16})), Error);
}

TEST_CASE("forward keeps the batch dimension") {
  Model m = build_model(convnet_spec());
  for (std::size_t n : {1u, 3u, 7u}) {
    Graph g;
    const NodeId x = g.constant(Tensor({n, 1, 28, 28}, 0.5));
    const NodeId y = m.forward(g, x);
    CHECK(g.shape(y) == Shape{n, 10});
  }
}

TEST_CASE("untrained seeded convnet is near chance on balanced digits") {
  const Dataset d = gen_digits(500, 77);
  const auto pred = classify(build_model(convnet_spec(), 1), d.inputs);
  const auto truth = d.class_indices();
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == truth[i];
  const double acc = static_cast<double>(hit) / pred.size();
  CHECK(acc >= 0.05);
  CHECK(acc <= 0.15);
}

TEST_CASE("invalid specs are rejected") {
  ArchSpec s = linear_spec();
  s.num_classes = 1;
  CHECK_THROWS_AS(build_model(s), Error);

  ArchSpec c = calibrater_spec();
  c.up_layers = 2;
  CHECK_THROWS_AS(build_model(c), Error);

  ArchSpec small = convnet_spec();
  small.input_shape = {1, 4, 4};
  CHECK_THROWS_AS(build_model(small), Error);

  ArchSpec add = calibrater_spec();
  add.head = MergeMode::additive;
  add.epsilon = 0.0;
  CHECK_THROWS_AS(build_model(add), Error);
}

TEST_CASE("arch spec json round trip") {
  const ArchSpec s = calibrater_spec();
  CHECK(to_json(arch_from_json(to_json(s))) == to_json(s));
  CHECK_THROWS_AS(arch_from_json(nlohmann::json::array()), Error);
}

TEST_CASE("multiplicative head stays inside (0,2) and the additive head inside (-eps,eps)") {
  std::mt19937_64 rng(11);
  ArchSpec s = calibrater_spec();
  s.head_init_scale = 5.0;
  const Model g = build_model(s, 4);
  const Tensor x = random_tensor({4, 1, 16, 16}, rng, -50.0, 50.0);
  const Tensor d = g.infer(x);
  for (double v : d.data) {
    CHECK(v > 0.0);
    CHECK(v < 2.0);
  }
  s.head = MergeMode::additive;
  s.epsilon = 0.3;
  const Tensor a = build_model(s, 4).infer(x);
  for (double v : a.data) CHECK(std::abs(v) < 0.3);
}

TEST_CASE("make_identity gives exact identity perturbations") {
  std::mt19937_64 rng(12);
  const Tensor x = random_tensor({3, 1, 16, 16}, rng, 0.0, 1.0);
  Model g = build_model(calibrater_spec(), 2);
  make_identity(g);
  for (double v : g.infer(x).data) CHECK(v == 1.0);
  ArchSpec s = calibrater_spec();
  s.head = MergeMode::additive;
  Model a = build_model(s, 2);
  make_identity(a);
  for (double v : a.infer(x).data) CHECK(v == 0.0);
  Model m = build_model(linear_spec());
  CHECK_THROWS_AS(make_identity(m), Error);
}

TEST_CASE("size_calibrater picks the largest candidate under a tenth") {
  const std::size_t main_params = count_params(build_model(convnet_spec()));
  ArchSpec base = calibrater_spec({1, 28, 28});
  const CalibraterSize got = size_calibrater(base, main_params, 0.1, 4, 32);
  std::size_t best = 0;
  for (std::size_t b = 0; b <= 4; ++b)
    for (std::size_t c = 1; c <= 32; ++c) {
      base.res_blocks = b;
      base.channels = c;
      const std::size_t n = calibrater_param_count(base);
      if (n <= main_params / 10 && n > best) best = n;
    }
  CHECK(got.param_count == best);
  base.res_blocks = got.res_blocks;
  base.channels = got.channels;
  CHECK(count_params(build_model(base)) == got.param_count);
  CHECK(got.param_count <= main_params / 10);
  CHECK_THROWS_AS(size_calibrater(base, 10), Error);
}

TEST_CASE("residual block parameter count") {
  // two 3x3 convs c->c with biases
  CHECK(residual_block_params(4) == 2 * (4 * 4 * 9 + 4));
}

TEST_CASE("freeze keeps forward outputs and is idempotent") {
  std::mt19937_64 rng(13);
  Model m = build_model(convnet_spec());
  const Tensor x = random_tensor({2, 1, 28, 28}, rng, 0.0, 1.0);
  const Tensor before = m.infer(x);
  freeze(m);
  CHECK(m.frozen());
  for (const auto& p : m.params()) CHECK_FALSE(p.tensor.requires_grad);
  CHECK(identical(m.infer(x), before));
  const std::string h = param_hash(m);
  freeze(m);
  CHECK(m.frozen());
  CHECK(param_hash(m) == h);
}

TEST_CASE("save/load round trip is bit-identical") {
  const auto dir = temp_dir("model_io");
  std::mt19937_64 rng(14);
  Model m = build_model(convnet_spec(), 3);
  m.set_name("probe");
  freeze(m);
  save_model(m, dir / "m.rvm");
  const Model back = load_model(dir / "m.rvm");
  CHECK(back.name() == "probe");
  CHECK(back.frozen());
  CHECK(same_params(m, back));
  CHECK(to_json(back.spec()) == to_json(m.spec()));
  const Tensor probe = random_tensor({8, 1, 28, 28}, rng, 0.0, 1.0);
  CHECK(classify(back, probe) == classify(m, probe));
  CHECK(serialize_model(back) == serialize_model(m));
}

TEST_CASE("corrupt model files are io errors") {
  const auto dir = temp_dir("model_corrupt");
  const Model m = build_model(linear_spec(), 3);
  auto bytes = serialize_model(m);

  auto expect_io = [](const std::vector<std::byte>& b) {
    try {
      deserialize_model(b);
      FAIL("accepted a corrupt container");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::io);
    }
  };
  auto bad_magic = bytes;
  bad_magic[0] = std::byte{'X'};
  expect_io(bad_magic);

  auto tampered = bytes;
  tampered[tampered.size() - 10] ^= std::byte{0x40};
  expect_io(tampered);

  expect_io(std::vector<std::byte>(bytes.begin(), bytes.begin() + bytes.size() / 2));
  expect_io({});

  CHECK_THROWS_AS(load_model(dir / "missing.rvm"), Error);
}

TEST_CASE("quantization record survives save/load") {
  const auto dir = temp_dir("model_quant");
  Model m = build_model(linear_spec(), 3);
  m.quantization = QuantRecord{2, "codebook_kmeans", {{"fc.weight", {-0.5, 0.25}}}};
  save_model(m, dir / "q.rvm");
  const Model back = load_model(dir / "q.rvm");
  REQUIRE(back.quantization.has_value());
  CHECK(back.quantization->bits == 2);
  CHECK(back.quantization->method == "codebook_kmeans");
  CHECK(back.quantization->codebooks.at("fc.weight") == std::vector<double>{-0.5, 0.25});
}
