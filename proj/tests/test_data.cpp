#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <vector>

#include "doctest.h"
#include "revcal/data.hpp"
#include "revcal/error.hpp"
#include "revcal/transforms.hpp"
#include "support.hpp"

using namespace revcal;
using revcal::testing::random_tensor;
using revcal::testing::temp_dir;

namespace {

std::vector<std::size_t> class_counts(const Dataset& d) {
  std::vector<std::size_t> counts(d.num_classes(), 0);
  for (auto c : d.class_indices()) ++counts[c];
  return counts;
}

void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<std::uint8_t> be(std::uint32_t v) {
  return {static_cast<std::uint8_t>(v >> 24), static_cast<std::uint8_t>(v >> 16), static_cast<std::uint8_t>(v >> 8),
          static_cast<std::uint8_t>(v)};
}

// Two 2x2 images and labels, raw IDX bytes.
void write_tiny_idx(const std::filesystem::path& img, const std::filesystem::path& lab, std::uint8_t second_label) {
  std::vector<std::uint8_t> i;
  for (auto v : {0x00000803u, 2u, 2u, 2u}) {
    const auto b = be(v);
    i.insert(i.end(), b.begin(), b.end());
  }
  for (std::uint8_t v : {0, 255, 51, 102, 0, 0, 0, 255}) i.push_back(v);
  std::vector<std::uint8_t> l;
  for (auto v : {0x00000801u, 2u}) {
    const auto b = be(v);
    l.insert(l.end(), b.begin(), b.end());
  }
  l.push_back(3);
  l.push_back(second_label);
  write_bytes(img, i);
  write_bytes(lab, l);
}

}  // namespace

TEST_CASE("circles without noise sit exactly on their radii") {
  const Dataset d = gen_circles(200, 1.0, 3.0, 0.0, 5);
  const auto cls = d.class_indices();
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double r = std::hypot(d.inputs.data[2 * i], d.inputs.data[2 * i + 1]);
    CHECK(r == doctest::Approx(cls[i] == 0 ? 1.0 : 3.0).epsilon(1e-12));
  }
  CHECK(class_counts(d) == std::vector<std::size_t>{100, 100});
}

TEST_CASE("circles are seed-deterministic and validate their arguments") {
  CHECK(gen_circles(100, 1, 2, 0.1, 3).content_hash() == gen_circles(100, 1, 2, 0.1, 3).content_hash());
  CHECK(gen_circles(100, 1, 2, 0.1, 3).content_hash() != gen_circles(100, 1, 2, 0.1, 4).content_hash());
  CHECK_THROWS_AS(gen_circles(100, 2, 1, 0.1, 3), Error);
  CHECK_THROWS_AS(gen_circles(100, 0, 1, 0.1, 3), Error);
  CHECK_THROWS_AS(gen_circles(101, 1, 2, 0.1, 3), Error);
}

TEST_CASE("no line separates concentric circles beyond 65%") {
  const Dataset d = gen_circles(400, 1.0, 1.5, 0.1, 7);
  const auto cls = d.class_indices();
  double best = 0.0;
  for (int a = 0; a < 180; ++a) {
    const double th = a * M_PI / 180.0;
    const double nx = std::cos(th), ny = std::sin(th);
    for (double off = -2.5; off <= 2.5; off += 0.05) {
      std::size_t hit = 0;
      for (std::size_t i = 0; i < d.size(); ++i) {
        const bool side = nx * d.inputs.data[2 * i] + ny * d.inputs.data[2 * i + 1] > off;
        hit += side == (cls[i] == 1);
      }
      best = std::max({best, hit / 400.0, 1.0 - hit / 400.0});
    }
  }
  CHECK(best <= 0.65);
}

TEST_CASE("ellipse split is an exact partition") {
  const EllipsePair geo = default_ellipses();
  const auto split = gen_ellipses(1000, geo, 3);
  CHECK(split.overlap.size() + split.non_overlap.size() == 1000);
  auto check_part = [&](const Dataset& d, bool inside_other) {
    const auto cls = d.class_indices();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double x = d.inputs.data[2 * i], y = d.inputs.data[2 * i + 1];
      const Ellipse& own = cls[i] == 0 ? geo.first : geo.second;
      const Ellipse& other = cls[i] == 0 ? geo.second : geo.first;
      CHECK(own.contains(x, y));
      CHECK(other.contains(x, y) == inside_other);
    }
  };
  check_part(split.overlap, true);
  check_part(split.non_overlap, false);
  const auto a = class_counts(split.overlap), b = class_counts(split.non_overlap);
  const long c0 = static_cast<long>(a[0] + b[0]), c1 = static_cast<long>(a[1] + b[1]);
  CHECK(std::abs(c0 - c1) <= 1);
}

TEST_CASE("degenerate ellipses are rejected") {
  EllipsePair geo = default_ellipses();
  geo.first.b = 0.0;
  CHECK_THROWS_AS(gen_ellipses(100, geo, 1), Error);
  EllipsePair apart{Ellipse{-5, 0, 1, 1, 0}, Ellipse{5, 0, 1, 1, 0}, 1.0};
  CHECK_THROWS_AS(gen_ellipses(100, apart, 1), Error);
}

TEST_CASE("dataset invariants") {
  CHECK_THROWS_AS(validate(Dataset{"x", Tensor({2, 2}), Tensor({2, 2}, {1, 0, 0.5, 0.5})}), Error);
  CHECK_THROWS_AS(validate(Dataset{"x", Tensor({3, 2}), Tensor({2, 2}, {1, 0, 0, 1})}), Error);
  CHECK_THROWS_AS(one_hot(std::vector<std::size_t>{0, 4}, 3), Error);
  const Tensor oh = one_hot(std::vector<std::size_t>{2, 0}, 3);
  CHECK(oh.data == std::vector<double>{0, 0, 1, 1, 0, 0});
}

TEST_CASE("procedural digits are balanced, in range and deterministic") {
  const Dataset d = gen_digits(200, 4);
  CHECK(d.inputs.shape == Shape{200, 1, 28, 28});
  CHECK(class_counts(d) == std::vector<std::size_t>(10, 20));
  for (double v : d.inputs.data) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  CHECK(d.content_hash() == gen_digits(200, 4).content_hash());
}

TEST_CASE("idx ingestion scales to [0,1] and one-hot labels") {
  const auto dir = temp_dir("idx");
  write_tiny_idx(dir / "i", dir / "l", 7);
  const Dataset d = load_idx(dir / "i", dir / "l");
  CHECK(d.inputs.shape == Shape{2, 1, 2, 2});
  CHECK(d.inputs.data[1] == 1.0);
  CHECK(d.inputs.data[2] == doctest::Approx(0.2));
  CHECK(d.class_indices() == std::vector<std::size_t>{3, 7});
}

TEST_CASE("idx format errors") {
  const auto dir = temp_dir("idx_bad");
  write_tiny_idx(dir / "i", dir / "l", 10);
  CHECK_THROWS_AS(load_idx(dir / "i", dir / "l"), Error);

  write_tiny_idx(dir / "i", dir / "l", 1);
  write_bytes(dir / "bad", {0, 0, 8, 2, 0, 0, 0, 2});
  try {
    load_idx(dir / "bad", dir / "l");
    FAIL("bad magic accepted");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::io);
  }
  std::ifstream in(dir / "i", std::ios::binary);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), {});
  bytes.resize(bytes.size() - 3);
  write_bytes(dir / "short", bytes);
  CHECK_THROWS_AS(load_idx(dir / "short", dir / "l"), Error);
}

TEST_CASE("idx and dataset container round trips keep the hash") {
  const auto dir = temp_dir("idx_rt");
  write_idx(gen_digits(50, 2), dir / "a.idx", dir / "a.lab");
  const Dataset once = load_idx(dir / "a.idx", dir / "a.lab");
  write_idx(once, dir / "b.idx", dir / "b.lab");
  CHECK(load_idx(dir / "b.idx", dir / "b.lab").content_hash() == once.content_hash());

  save_dataset(once, dir / "d.rvds");
  const Dataset back = load_dataset(dir / "d.rvds");
  CHECK(back.content_hash() == once.content_hash());
  CHECK(back.id == once.id);

  std::ifstream in(dir / "d.rvds", std::ios::binary);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), {});
  bytes[bytes.size() / 2] ^= 0x10;
  write_bytes(dir / "t.rvds", bytes);
  CHECK_THROWS_AS(load_dataset(dir / "t.rvds"), Error);
}

TEST_CASE("rotation by zero degrees is the identity") {
  std::mt19937_64 rng(1);
  const Tensor x = random_tensor({1, 12, 12}, rng, 0.0, 1.0);
  const Tensor y = apply_transform(x, TransformKind::rotation, {0.0, {}});
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(x.data[i] - y.data[i]) < 1e-9);
}

TEST_CASE("rotation by 90 degrees moves pixels a quarter turn") {
  Tensor x({1, 5, 5}, 0.0);
  x.data[0 * 5 + 2] = 1.0;  // top centre
  const Tensor y = apply_transform(x, TransformKind::rotation, {90.0, {}});
  double total = 0.0;
  for (double v : y.data) total += v;
  CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
  // lands on the middle row, either left or right edge depending on orientation
  CHECK(std::max(y.data[2 * 5 + 0], y.data[2 * 5 + 4]) == doctest::Approx(1.0));
}

TEST_CASE("flip is an involution") {
  std::mt19937_64 rng(2);
  const Tensor x = random_tensor({3, 7, 6}, rng, 0.0, 1.0);
  const Tensor once = apply_transform(x, TransformKind::hflip, {});
  CHECK_FALSE(identical(once, x));
  CHECK(once.data[5] == x.data[0]);
  CHECK(identical(apply_transform(once, TransformKind::hflip, {}), x));
}

TEST_CASE("brightness multiplies and clamps") {
  const Tensor x({1, 2, 2}, 0.6);
  for (double v : apply_transform(x, TransformKind::brightness, {2.0, {}}).data) CHECK(v == 1.0);
  for (double v : apply_transform(x, TransformKind::brightness, {0.5, {}}).data) CHECK(v == doctest::Approx(0.3));
}

TEST_CASE("contrast blends toward the image mean") {
  const Tensor x({1, 1, 4}, {0.1, 0.2, 0.3, 0.6});
  const double mean = 0.3;
  const Tensor y = apply_transform(x, TransformKind::contrast, {0.5, {}});
  for (std::size_t i = 0; i < 4; ++i) CHECK(y.data[i] == doctest::Approx(mean + 0.5 * (x.data[i] - mean)));
  for (double v : apply_transform(x, TransformKind::contrast, {0.0, {}}).data) CHECK(v == doctest::Approx(mean));
}

TEST_CASE("saturation is a no-op on grayscale and blends toward gray on colour") {
  std::mt19937_64 rng(3);
  const Tensor g = random_tensor({1, 4, 4}, rng, 0.0, 1.0);
  CHECK(identical(apply_transform(g, TransformKind::saturation, {2.5, {}}), g));
  const Tensor c = random_tensor({3, 2, 2}, rng, 0.0, 1.0);
  const Tensor y = apply_transform(c, TransformKind::saturation, {0.0, {}});
  for (std::size_t p = 0; p < 4; ++p) {
    const double gray = 0.299 * c.data[p] + 0.587 * c.data[4 + p] + 0.114 * c.data[8 + p];
    for (std::size_t ch = 0; ch < 3; ++ch) CHECK(y.data[ch * 4 + p] == doctest::Approx(gray));
  }
}

TEST_CASE("full-frame crop is the identity") {
  std::mt19937_64 rng(4);
  const Tensor x = random_tensor({1, 9, 9}, rng, 0.0, 1.0);
  const Tensor y = apply_transform(x, TransformKind::crop_resize, {0.0, CropRect{0, 0, 9, 9}});
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(x.data[i] - y.data[i]) < 1e-9);
  CHECK_THROWS_AS(apply_transform(x, TransformKind::crop_resize, {0.0, CropRect{0, 0, 0, 9}}), Error);
}

TEST_CASE("unknown transform kinds are rejected") {
  CHECK_THROWS_AS(parse_transform_kind("hue"), Error);
  CHECK(parse_transform_kind("rotation") == TransformKind::rotation);
  CHECK_THROWS_AS(named_scenario("B3"), Error);
}

TEST_CASE("named scenarios carry the stated ranges") {
  const Scenario b1 = named_scenario("B1");
  REQUIRE(b1.transforms.size() == 4);
  CHECK(b1.transforms[0].kind == TransformKind::rotation);
  CHECK(b1.transforms[0].lo == -15.0);
  CHECK(b1.transforms[0].hi == 15.0);
  for (std::size_t i = 1; i < 4; ++i) {
    CHECK(b1.transforms[i].lo == doctest::Approx(0.2));
    CHECK(b1.transforms[i].hi == doctest::Approx(1.8));
  }
  const Scenario b2 = named_scenario("B2");
  CHECK(b2.transforms[0].hi == 20.0);
  CHECK(b2.transforms[1].kind == TransformKind::brightness);
  CHECK(b2.transforms[2].kind == TransformKind::contrast);
  CHECK(b2.transforms[3].kind == TransformKind::saturation);
  CHECK(b2.transforms[1].lo == 0.0);
  CHECK(b2.transforms[1].hi == 3.0);
  const Scenario a = named_scenario("A");
  CHECK(a.transforms[0].kind == TransformKind::crop_resize);
  CHECK(a.transforms[1].kind == TransformKind::hflip);
  CHECK(named_scenario("identity").transforms.empty());
}

TEST_CASE("scenario json round trip") {
  const Scenario b2 = named_scenario("B2");
  const Scenario back = scenario_from_json(to_json(b2));
  CHECK(to_json(back) == to_json(b2));
  CHECK(to_json(scenario_from_json(nlohmann::json{{"name", "B1"}})) == to_json(named_scenario("B1")));
}

TEST_CASE("identity scenario leaves a batch unchanged") {
  const Dataset d = gen_digits(10, 1);
  CHECK(identical(apply_scenario(named_scenario("identity"), d.inputs, 5), d.inputs));
}

TEST_CASE("scenario outputs stay in [0,1] with the same shape") {
  const Dataset d = gen_digits(40, 2);
  for (const char* id : {"A", "B1", "B2"}) {
    const Tensor y = apply_scenario(named_scenario(id), d.inputs, 11);
    CHECK(y.shape == d.inputs.shape);
    for (double v : y.data) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("scenario sampling is reproducible and shard independent") {
  const Dataset d = gen_digits(20, 3);
  const Scenario b2 = named_scenario("B2");
  const Tensor whole = apply_scenario(b2, d.inputs, 42);
  CHECK(identical(whole, apply_scenario(b2, d.inputs, 42)));
  CHECK_FALSE(identical(whole, apply_scenario(b2, d.inputs, 43)));
  const Tensor lo = apply_scenario(b2, d.inputs.slice_rows(0, 7), 42, 0);
  const Tensor hi = apply_scenario(b2, d.inputs.slice_rows(7, 20), 42, 7);
  CHECK(identical(lo, whole.slice_rows(0, 7)));
  CHECK(identical(hi, whole.slice_rows(7, 20)));

  std::mt19937_64 r1(9), r2(9);
  const Tensor img = d.inputs.slice_rows(0, 1);
  const Tensor one(Shape{1, 28, 28}, img.data);
  CHECK(identical(scenario_sample(b2, one, r1), scenario_sample(b2, one, r2)));
}

TEST_CASE("jitter convention") {
  const TransformRange r = jitter(TransformKind::brightness, 0.8);
  CHECK(r.lo == doctest::Approx(0.2));
  CHECK(r.hi == doctest::Approx(1.8));
  CHECK(jitter(TransformKind::contrast, 2.0).lo == 0.0);
}
