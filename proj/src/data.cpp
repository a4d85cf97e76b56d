#include "revcal/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "binio.hpp"
#include "revcal/error.hpp"
#include "revcal/hashing.hpp"

namespace revcal {

std::vector<std::size_t> Dataset::class_indices() const {
  std::vector<std::size_t> out(size());
  const std::size_t c = num_classes();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double* row = labels.data.data() + i * c;
    out[i] = static_cast<std::size_t>(std::max_element(row, row + c) - row);
  }
  return out;
}

std::string Dataset::content_hash() const {
  Hasher h;
  for (const Tensor* t : {&inputs, &labels}) {
    h.update(std::uint64_t{t->rank()});
    for (auto d : t->shape) h.update(std::uint64_t{d});
    h.update(std::span<const double>(t->data));
  }
  return h.hex();
}

Dataset Dataset::subset(std::span<const std::size_t> rows, std::string new_id) const {
  return Dataset{std::move(new_id), inputs.gather_rows(rows), labels.gather_rows(rows)};
}

Dataset Dataset::head(std::size_t n) const {
  n = std::min(n, size());
  if (n == 0) return Dataset{id + ":head0", Tensor{}, Tensor{}};
  return Dataset{id + ":head" + std::to_string(n), inputs.slice_rows(0, n), labels.slice_rows(0, n)};
}

void validate(const Dataset& d) {
  if (d.inputs.rank() < 2 || d.labels.rank() != 2) fail("dataset '" + d.id + "': inputs must be batched, labels [N,C]");
  if (d.inputs.shape[0] != d.labels.shape[0])
    fail("dataset '" + d.id + "': " + std::to_string(d.inputs.shape[0]) + " inputs but " +
         std::to_string(d.labels.shape[0]) + " labels");
  const std::size_t c = d.labels.shape[1];
  for (std::size_t i = 0; i < d.labels.shape[0]; ++i) {
    std::size_t ones = 0;
    for (std::size_t k = 0; k < c; ++k) {
      const double v = d.labels.data[i * c + k];
      if (v == 1.0) ++ones;
      else if (v != 0.0) fail("dataset '" + d.id + "': label row " + std::to_string(i) + " is not one-hot");
    }
    if (ones != 1) fail("dataset '" + d.id + "': label row " + std::to_string(i) + " is not one-hot");
  }
}

Tensor one_hot(std::span<const std::size_t> classes, std::size_t num_classes) {
  if (classes.empty()) fail("one_hot: no labels");
  Tensor t(Shape{classes.size(), num_classes});
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (classes[i] >= num_classes)
      fail("label " + std::to_string(classes[i]) + " out of range for " + std::to_string(num_classes) + " classes");
    t.data[i * num_classes + classes[i]] = 1.0;
  }
  return t;
}

Dataset make_dataset(std::string id, Tensor inputs, std::span<const std::size_t> classes, std::size_t num_classes) {
  Dataset d{std::move(id), std::move(inputs), one_hot(classes, num_classes)};
  validate(d);
  return d;
}

Dataset gen_circles(std::size_t n, double r_inner, double r_outer, double noise_sd, std::uint64_t seed) {
  if (!(r_inner > 0.0 && r_inner < r_outer)) fail("gen_circles: need 0 < r_inner < r_outer");
  if (n < 2 || n % 2 != 0) fail("gen_circles: n must be even and positive");
  if (!(noise_sd >= 0.0)) fail("gen_circles: noise_sd must be >= 0");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  std::normal_distribution<double> noise(0.0, 1.0);
  Tensor x(Shape{n, 2});
  std::vector<std::size_t> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t cls = i % 2;
    const double r = cls == 0 ? r_inner : r_outer;
    const double t = angle(rng);
    double px = r * std::cos(t), py = r * std::sin(t);
    if (noise_sd > 0.0) {
      px += noise_sd * noise(rng);
      py += noise_sd * noise(rng);
    }
    x.data[2 * i] = px;
    x.data[2 * i + 1] = py;
    y[i] = cls;
  }
  return make_dataset("circles", std::move(x), y, 2);
}

bool Ellipse::contains(double x, double y) const {
  const double t = angle_deg * std::numbers::pi / 180.0;
  const double dx = x - cx, dy = y - cy;
  const double u = std::cos(t) * dx + std::sin(t) * dy;
  const double v = -std::sin(t) * dx + std::cos(t) * dy;
  return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
}

EllipsePair default_ellipses() {
  return {Ellipse{1.5, 0.0, 1.0, 0.7, 0.0}, Ellipse{2.5, 0.0, 1.0, 0.7, 0.0}, 0.25};
}

EllipseSplit gen_ellipses(std::size_t n, const EllipsePair& geo, std::uint64_t seed) {
  if (n < 2 || n % 2 != 0) fail("gen_ellipses: n must be even and positive");
  for (const Ellipse* e : {&geo.first, &geo.second})
    if (!(e->a > 0.0 && e->b > 0.0) || !std::isfinite(e->cx) || !std::isfinite(e->cy))
      fail("gen_ellipses: degenerate ellipse (semi-axes must be positive)");
  if (!(geo.shell > 0.0 && geo.shell <= 1.0)) fail("gen_ellipses: shell must be in (0, 1]");
  const double inner = (1.0 - geo.shell) * (1.0 - geo.shell);

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  auto sample = [&](const Ellipse& e) {
    const double t = e.angle_deg * std::numbers::pi / 180.0;
    for (;;) {
      const double p = u(rng), q = u(rng);
      const double r2 = p * p + q * q;
      if (r2 > 1.0 || r2 < inner) continue;
      const double du = p * e.a, dv = q * e.b;
      return std::pair{e.cx + std::cos(t) * du - std::sin(t) * dv, e.cy + std::sin(t) * du + std::cos(t) * dv};
    }
  };

  std::vector<double> ov_x, non_x;
  std::vector<std::size_t> ov_y, non_y;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t cls = i % 2;
    const Ellipse& own = cls == 0 ? geo.first : geo.second;
    const Ellipse& other = cls == 0 ? geo.second : geo.first;
    const auto [px, py] = sample(own);
    auto& xs = other.contains(px, py) ? ov_x : non_x;
    auto& ys = other.contains(px, py) ? ov_y : non_y;
    xs.push_back(px);
    xs.push_back(py);
    ys.push_back(cls);
  }
  if (ov_y.empty()) fail("gen_ellipses: the ellipses do not overlap");
  if (non_y.empty()) fail("gen_ellipses: no points outside the overlap");
  EllipseSplit out;
  out.overlap = make_dataset("ellipses:overlap", Tensor(Shape{ov_y.size(), 2}, std::move(ov_x)), ov_y, 2);
  out.non_overlap = make_dataset("ellipses:non_overlap", Tensor(Shape{non_y.size(), 2}, std::move(non_x)), non_y, 2);
  return out;
}

namespace {

std::uint32_t be32(std::span<const std::byte> b, std::size_t at) {
  return (static_cast<std::uint32_t>(b[at]) << 24) | (static_cast<std::uint32_t>(b[at + 1]) << 16) |
         (static_cast<std::uint32_t>(b[at + 2]) << 8) | static_cast<std::uint32_t>(b[at + 3]);
}

void put_be32(std::vector<std::byte>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::byte>((v >> s) & 0xFF));
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, std::size_t num_classes) {
  const auto img = binio::read_file(images);
  const auto lab = binio::read_file(labels);
  if (img.size() < 16 || be32(img, 0) != 0x00000803) fail_io(images.string() + ": not an IDX image file (bad magic)");
  if (lab.size() < 8 || be32(lab, 0) != 0x00000801) fail_io(labels.string() + ": not an IDX label file (bad magic)");
  const std::size_t n = be32(img, 4), rows = be32(img, 8), cols = be32(img, 12);
  const std::size_t nl = be32(lab, 4);
  if (n == 0 || rows == 0 || cols == 0) fail_io(images.string() + ": empty IDX image file");
  if (img.size() < 16 + n * rows * cols) fail_io(images.string() + ": truncated IDX image data");
  if (lab.size() < 8 + nl) fail_io(labels.string() + ": truncated IDX label data");
  if (n != nl) fail_io("IDX image/label count mismatch: " + std::to_string(n) + " vs " + std::to_string(nl));

  Tensor x(Shape{n, 1, rows, cols});
  for (std::size_t i = 0; i < x.size(); ++i) x.data[i] = static_cast<double>(img[16 + i]) / 255.0;
  std::vector<std::size_t> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = static_cast<std::size_t>(lab[8 + i]);
    if (y[i] >= num_classes)
      fail_io(labels.string() + ": label " + std::to_string(y[i]) + " at index " + std::to_string(i) +
              " exceeds class count " + std::to_string(num_classes));
  }
  Dataset d{images.stem().string(), std::move(x), one_hot(y, num_classes)};
  return d;
}

void write_idx(const Dataset& d, const std::filesystem::path& images, const std::filesystem::path& labels) {
  if (d.inputs.rank() != 4 || d.inputs.shape[1] != 1) fail("write_idx: need [N,1,H,W] grayscale inputs");
  std::vector<std::byte> img, lab;
  put_be32(img, 0x00000803);
  put_be32(img, static_cast<std::uint32_t>(d.size()));
  put_be32(img, static_cast<std::uint32_t>(d.inputs.shape[2]));
  put_be32(img, static_cast<std::uint32_t>(d.inputs.shape[3]));
  for (double v : d.inputs.data) img.push_back(static_cast<std::byte>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  put_be32(lab, 0x00000801);
  put_be32(lab, static_cast<std::uint32_t>(d.size()));
  for (auto c : d.class_indices()) {
    if (c > 255) fail("write_idx: label exceeds u8");
    lab.push_back(static_cast<std::byte>(c));
  }
  binio::write_file(images, img);
  binio::write_file(labels, lab);
}

namespace {

constexpr char kDatasetMagic[4] = {'R', 'V', 'D', 'S'};
constexpr std::uint16_t kDatasetVersion = 1;

void put_tensor(binio::Writer& w, const Tensor& t) {
  w.u8(static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.shape) w.u32(static_cast<std::uint32_t>(d));
  w.f64s(t.data);
}

Tensor get_tensor(binio::Reader& r, const std::string& what) {
  const auto rank = r.u8();
  Shape s;
  for (unsigned i = 0; i < rank; ++i) s.push_back(r.u32());
  if (numel(s) * 8 > r.remaining()) fail_io(what + ": truncated file");
  Tensor t(s);
  r.f64s(t.data);
  return t;
}

}  // namespace

void save_dataset(const Dataset& d, const std::filesystem::path& path) {
  binio::Writer w;
  w.raw(std::string_view(kDatasetMagic, 4));
  w.u16(kDatasetVersion);
  w.str(d.id);
  w.str(d.content_hash());
  put_tensor(w, d.inputs);
  put_tensor(w, d.labels);
  const auto& b = w.bytes();
  w.u32(crc32(std::span<const std::byte>(b).subspan(4)));
  binio::write_file(path, w.bytes());
}

Dataset load_dataset(const std::filesystem::path& path) {
  const auto bytes = binio::read_file(path);
  const std::string what = path.string();
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kDatasetMagic, 4) != 0) fail_io(what + ": bad magic (not a dataset file)");
  if (bytes.size() < 14) fail_io(what + ": truncated file");
  const auto body = std::span<const std::byte>(bytes).subspan(4, bytes.size() - 8);
  binio::Reader tail(std::span<const std::byte>(bytes).subspan(bytes.size() - 4), what);
  if (crc32(body) != tail.u32()) fail_io(what + ": checksum mismatch");
  binio::Reader r(body, what);
  if (r.u16() != kDatasetVersion) fail_io(what + ": unsupported dataset version");
  Dataset d;
  d.id = r.str();
  const std::string stored_hash = r.str();
  d.inputs = get_tensor(r, what);
  d.labels = get_tensor(r, what);
  if (d.content_hash() != stored_hash) fail_io(what + ": content hash mismatch");
  validate(d);
  return d;
}

// ---------------------------------------------------------------------------
// Procedural digits

namespace {

struct Point {
  double x, y;
};
using Stroke = std::vector<Point>;

// Arc around (cx, cy) with y pointing down; angles in degrees, counter-clockwise
// as seen on screen.
Stroke arc(double cx, double cy, double rx, double ry, double from_deg, double to_deg, int segments = 14) {
  Stroke s;
  for (int i = 0; i <= segments; ++i) {
    const double t = (from_deg + (to_deg - from_deg) * i / segments) * std::numbers::pi / 180.0;
    s.push_back({cx + rx * std::cos(t), cy - ry * std::sin(t)});
  }
  return s;
}

std::vector<Stroke> glyph(std::size_t digit) {
  switch (digit) {
    case 0: return {arc(0.5, 0.5, 0.19, 0.3, 0, 360, 24)};
    case 1: return {{{0.42, 0.3}, {0.52, 0.2}, {0.52, 0.8}}};
    case 2: {
      Stroke s = arc(0.5, 0.36, 0.18, 0.16, 160, -35);
      s.push_back({0.3, 0.8});
      s.push_back({0.72, 0.8});
      return {s};
    }
    case 3: return {arc(0.49, 0.35, 0.16, 0.15, 150, -90), arc(0.49, 0.65, 0.18, 0.15, 90, -150)};
    case 4: return {{{0.62, 0.8}, {0.62, 0.2}, {0.28, 0.6}, {0.76, 0.6}}};
    case 5: {
      Stroke top{{0.7, 0.2}, {0.36, 0.2}, {0.34, 0.46}};
      return {top, arc(0.5, 0.62, 0.18, 0.17, 125, -150)};
    }
    case 6: {
      Stroke tail{{0.66, 0.2}, {0.47, 0.33}, {0.36, 0.5}, {0.34, 0.64}};
      return {tail, arc(0.5, 0.65, 0.16, 0.15, 0, 360, 20)};
    }
    case 7: return {{{0.28, 0.2}, {0.72, 0.2}, {0.44, 0.8}}};
    case 8: return {arc(0.5, 0.34, 0.14, 0.14, 0, 360, 18), arc(0.5, 0.66, 0.17, 0.16, 0, 360, 20)};
    case 9: {
      Stroke tail{{0.66, 0.38}, {0.64, 0.6}, {0.58, 0.8}};
      return {arc(0.5, 0.36, 0.16, 0.15, 0, 360, 20), tail};
    }
  }
  fail("glyph: digit out of range");
}

double segment_distance(Point p, Point a, Point b) {
  const double vx = b.x - a.x, vy = b.y - a.y;
  const double wx = p.x - a.x, wy = p.y - a.y;
  const double len2 = vx * vx + vy * vy;
  const double t = len2 > 0.0 ? std::clamp((wx * vx + wy * vy) / len2, 0.0, 1.0) : 0.0;
  const double dx = wx - t * vx, dy = wy - t * vy;
  return std::sqrt(dx * dx + dy * dy);
}

}  // namespace

Dataset gen_digits(std::size_t n, std::uint64_t seed, std::size_t size) {
  if (n == 0) fail("gen_digits: n must be positive");
  if (size < 8) fail("gen_digits: image size must be at least 8");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> jitter(0.0, 0.015);
  auto range = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };

  Tensor x(Shape{n, 1, size, size});
  std::vector<std::size_t> y(n);
  const double px = 1.0 / static_cast<double>(size);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t digit = i % 10;
    y[i] = digit;
    const double scale = range(0.85, 1.1);
    const double aspect = range(0.85, 1.15);
    const double shear = range(-0.2, 0.2);
    const double rot = range(-8.0, 8.0) * std::numbers::pi / 180.0;
    const double tx = range(-0.05, 0.05), ty = range(-0.05, 0.05);
    const double half_width = range(0.04, 0.075);
    const double peak = range(0.8, 1.0);

    auto strokes = glyph(digit);
    for (auto& s : strokes)
      for (auto& p : s) {
        // Local jitter, then shear / scale / rotate about the glyph centre.
        double qx = p.x + jitter(rng) - 0.5, qy = p.y + jitter(rng) - 0.5;
        qx = (qx + shear * qy) * scale * aspect;
        qy = qy * scale;
        p = {0.5 + tx + std::cos(rot) * qx - std::sin(rot) * qy, 0.5 + ty + std::sin(rot) * qx + std::cos(rot) * qy};
      }

    double* img = x.data.data() + i * size * size;
    for (std::size_t r = 0; r < size; ++r)
      for (std::size_t c = 0; c < size; ++c) {
        const Point p{(static_cast<double>(c) + 0.5) * px, (static_cast<double>(r) + 0.5) * px};
        double d = 1e9;
        for (const auto& s : strokes)
          for (std::size_t k = 0; k + 1 < s.size(); ++k) d = std::min(d, segment_distance(p, s[k], s[k + 1]));
        // One-pixel soft edge around the stroke.
        img[r * size + c] = peak * std::clamp((half_width - d) / px + 0.5, 0.0, 1.0);
      }
  }
  return make_dataset("digits", std::move(x), y, 10);
}

}  // namespace revcal
