#include "revcal/transforms.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "revcal/error.hpp"

namespace revcal {

std::string to_string(TransformKind k) {
  switch (k) {
    case TransformKind::rotation: return "rotation";
    case TransformKind::brightness: return "brightness";
    case TransformKind::contrast: return "contrast";
    case TransformKind::saturation: return "saturation";
    case TransformKind::crop_resize: return "crop_resize";
    case TransformKind::hflip: return "hflip";
  }
  return "unknown";
}

TransformKind parse_transform_kind(const std::string& s) {
  for (auto k : {TransformKind::rotation, TransformKind::brightness, TransformKind::contrast, TransformKind::saturation,
                 TransformKind::crop_resize, TransformKind::hflip})
    if (to_string(k) == s) return k;
  fail("unknown transform kind '" + s + "'");
}

namespace {

struct ImageDims {
  std::size_t c, h, w;
};

ImageDims dims_of(const Tensor& image) {
  if (image.rank() != 3) fail("transform: expected an image [C,H,W], got " + shape_str(image.shape));
  return {image.shape[0], image.shape[1], image.shape[2]};
}

// Bilinear lookup; out-of-range neighbours read as `fill`.
double sample_zero(const double* plane, std::size_t h, std::size_t w, double y, double x) {
  const double fy = std::floor(y), fx = std::floor(x);
  const long y0 = static_cast<long>(fy), x0 = static_cast<long>(fx);
  const double wy = y - fy, wx = x - fx;
  auto at = [&](long r, long c) {
    if (r < 0 || c < 0 || r >= static_cast<long>(h) || c >= static_cast<long>(w)) return 0.0;
    return plane[static_cast<std::size_t>(r) * w + static_cast<std::size_t>(c)];
  };
  double v = 0.0;
  if ((1 - wy) * (1 - wx) != 0.0) v += (1 - wy) * (1 - wx) * at(y0, x0);
  if ((1 - wy) * wx != 0.0) v += (1 - wy) * wx * at(y0, x0 + 1);
  if (wy * (1 - wx) != 0.0) v += wy * (1 - wx) * at(y0 + 1, x0);
  if (wy * wx != 0.0) v += wy * wx * at(y0 + 1, x0 + 1);
  return v;
}

// Bilinear lookup with coordinates clamped to the image (edge replicate).
double sample_edge(const double* plane, std::size_t h, std::size_t w, double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const std::size_t y0 = static_cast<std::size_t>(y), x0 = static_cast<std::size_t>(x);
  const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double wy = y - static_cast<double>(y0), wx = x - static_cast<double>(x0);
  return (1 - wy) * ((1 - wx) * plane[y0 * w + x0] + wx * plane[y0 * w + x1]) +
         wy * ((1 - wx) * plane[y1 * w + x0] + wx * plane[y1 * w + x1]);
}

void clamp_unit(Tensor& t) {
  for (double& v : t.data) v = std::clamp(v, 0.0, 1.0);
}

}  // namespace

Tensor apply_transform(const Tensor& image, TransformKind kind, const TransformParam& param) {
  const auto [C, H, W] = dims_of(image);
  Tensor out(image.shape, image.data);
  switch (kind) {
    case TransformKind::rotation: {
      const double t = param.value * std::numbers::pi / 180.0;
      const double ct = std::cos(t), st = std::sin(t);
      const double cy = (static_cast<double>(H) - 1) / 2, cx = (static_cast<double>(W) - 1) / 2;
      for (std::size_t c = 0; c < C; ++c) {
        const double* src = image.data.data() + c * H * W;
        double* dst = out.data.data() + c * H * W;
        for (std::size_t r = 0; r < H; ++r)
          for (std::size_t k = 0; k < W; ++k) {
            const double dy = static_cast<double>(r) - cy, dx = static_cast<double>(k) - cx;
            // inverse rotation of the output grid
            const double sx = ct * dx + st * dy + cx;
            const double sy = -st * dx + ct * dy + cy;
            dst[r * W + k] = sample_zero(src, H, W, sy, sx);
          }
      }
      break;
    }
    case TransformKind::brightness:
      if (!(param.value >= 0.0)) fail("brightness: factor must be >= 0");
      for (double& v : out.data) v *= param.value;
      break;
    case TransformKind::contrast: {
      if (!(param.value >= 0.0)) fail("contrast: factor must be >= 0");
      double mean = 0.0;
      for (double v : image.data) mean += v;
      mean /= static_cast<double>(image.size());
      for (double& v : out.data) v = mean + param.value * (v - mean);
      break;
    }
    case TransformKind::saturation: {
      if (!(param.value >= 0.0)) fail("saturation: factor must be >= 0");
      if (C < 3) break;
      const std::size_t P = H * W;
      for (std::size_t p = 0; p < P; ++p) {
        const double gray = 0.299 * image.data[p] + 0.587 * image.data[P + p] + 0.114 * image.data[2 * P + p];
        for (std::size_t c = 0; c < C; ++c) {
          double& v = out.data[c * P + p];
          v = gray + param.value * (v - gray);
        }
      }
      break;
    }
    case TransformKind::crop_resize: {
      const CropRect& rc = param.crop;
      if (!(rc.height > 0 && rc.width > 0)) fail("crop_resize: crop must have positive size");
      for (std::size_t c = 0; c < C; ++c) {
        const double* src = image.data.data() + c * H * W;
        double* dst = out.data.data() + c * H * W;
        for (std::size_t r = 0; r < H; ++r)
          for (std::size_t k = 0; k < W; ++k) {
            const double sy = rc.top + (static_cast<double>(r) + 0.5) * rc.height / static_cast<double>(H) - 0.5;
            const double sx = rc.left + (static_cast<double>(k) + 0.5) * rc.width / static_cast<double>(W) - 0.5;
            dst[r * W + k] = sample_edge(src, H, W, sy, sx);
          }
      }
      break;
    }
    case TransformKind::hflip:
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t r = 0; r < H; ++r) {
          double* row = out.data.data() + (c * H + r) * W;
          std::reverse(row, row + W);
        }
      break;
  }
  clamp_unit(out);
  return out;
}

TransformRange jitter(TransformKind kind, double strength) {
  if (!(strength >= 0.0)) fail("jitter strength must be >= 0");
  return {kind, std::max(0.0, 1.0 - strength), 1.0 + strength};
}

Scenario named_scenario(const std::string& id) {
  auto b_scenario = [](const std::string& name, double degrees, double strength) {
    return Scenario{name,
                    {{TransformKind::rotation, -degrees, degrees},
                     jitter(TransformKind::brightness, strength),
                     jitter(TransformKind::contrast, strength),
                     jitter(TransformKind::saturation, strength)}};
  };
  if (id == "identity") return Scenario{"identity", {}};
  if (id == "A") return Scenario{"A", {{TransformKind::crop_resize, 0.7, 1.0}, {TransformKind::hflip, 0.5, 0.5}}};
  if (id == "B1") return b_scenario("B1", 15.0, 0.8);
  if (id == "B2") return b_scenario("B2", 20.0, 2.0);
  fail("unknown scenario '" + id + "' (expected identity, A, B1, B2 or a custom definition)");
}

Scenario scenario_from_json(const nlohmann::json& j) {
  if (j.is_string()) return named_scenario(j.get<std::string>());
  if (!j.is_object()) fail("scenario: expected a name or an object");
  if (j.contains("name")) return named_scenario(j["name"].get<std::string>());
  Scenario s;
  s.id = j.value("id", std::string("custom"));
  for (const auto& t : j.at("transforms")) {
    TransformRange r{parse_transform_kind(t.at("kind").get<std::string>()), t.value("lo", 0.0), t.value("hi", 0.0)};
    if (r.kind != TransformKind::hflip && r.lo > r.hi) fail("scenario: transform range lo > hi");
    if (r.kind == TransformKind::crop_resize && !(r.lo > 0.0 && r.hi <= 1.0)) fail("scenario: crop area must lie in (0,1]");
    if (r.kind == TransformKind::hflip && !(r.lo >= 0.0 && r.lo <= 1.0)) fail("scenario: flip probability must lie in [0,1]");
    if ((r.kind == TransformKind::brightness || r.kind == TransformKind::contrast ||
         r.kind == TransformKind::saturation) && r.lo < 0.0)
      fail("scenario: jitter factors must be >= 0");
    s.transforms.push_back(r);
  }
  return s;
}

nlohmann::json to_json(const Scenario& s) {
  nlohmann::json ts = nlohmann::json::array();
  for (const auto& t : s.transforms) ts.push_back({{"kind", to_string(t.kind)}, {"lo", t.lo}, {"hi", t.hi}});
  return {{"id", s.id}, {"transforms", ts}};
}

Tensor scenario_sample(const Scenario& scenario, const Tensor& image, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor x(image.shape, image.data);
  for (const auto& t : scenario.transforms) {
    TransformParam p;
    switch (t.kind) {
      case TransformKind::hflip:
        if (u(rng) >= t.lo) continue;
        break;
      case TransformKind::crop_resize: {
        const auto [C, H, W] = dims_of(x);
        (void)C;
        const double area = t.lo + (t.hi - t.lo) * u(rng);
        const double log_ratio = std::log(3.0 / 4.0) + (std::log(4.0 / 3.0) - std::log(3.0 / 4.0)) * u(rng);
        const double ratio = std::exp(log_ratio);
        const double full = static_cast<double>(H * W) * area;
        p.crop.width = std::min(static_cast<double>(W), std::sqrt(full * ratio));
        p.crop.height = std::min(static_cast<double>(H), std::sqrt(full / ratio));
        p.crop.top = (static_cast<double>(H) - p.crop.height) * u(rng);
        p.crop.left = (static_cast<double>(W) - p.crop.width) * u(rng);
        break;
      }
      default:
        p.value = t.lo + (t.hi - t.lo) * u(rng);
        break;
    }
    x = apply_transform(x, t.kind, p);
  }
  return x;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finaliser over the combined words
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Tensor apply_scenario(const Scenario& scenario, const Tensor& batch, std::uint64_t seed, std::size_t first_index) {
  if (scenario.transforms.empty()) return Tensor(batch.shape, batch.data);
  if (batch.rank() != 4) fail("apply_scenario: expected [N,C,H,W], got " + shape_str(batch.shape));
  Tensor out(batch.shape);
  const std::size_t n = batch.shape[0], stride = batch.size() / n;
  const Shape image_shape(batch.shape.begin() + 1, batch.shape.end());
  for (std::size_t i = 0; i < n; ++i) {
    std::mt19937_64 rng(mix_seed(seed, first_index + i));
    const Tensor img(image_shape, std::vector<double>(batch.data.begin() + static_cast<std::ptrdiff_t>(i * stride),
                                                      batch.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * stride)));
    const Tensor t = scenario_sample(scenario, img, rng);
    std::copy(t.data.begin(), t.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(i * stride));
  }
  return out;
}

}  // namespace revcal
