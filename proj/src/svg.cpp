#include "svg.hpp"

#include <algorithm>
#include <array>
#include <limits>
#include <sstream>

namespace revcal::svg {

namespace {

constexpr double kSize = 400.0;
constexpr std::array<const char*, 4> kPoint{"#1f5fa8", "#c8362b", "#2e8b3a", "#8a4fb5"};
constexpr std::array<const char*, 4> kCell{"#cfdcf0", "#f3d0cc", "#d3ebd5", "#e4d6ef"};

const char* colour(const auto& table, std::size_t cls) { return table[cls % table.size()]; }

std::string esc(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out += c;
  }
  return out;
}

}  // namespace

std::vector<std::pair<double, double>> grid_centres(const Bounds& b) {
  std::vector<std::pair<double, double>> out;
  out.reserve(kGrid * kGrid);
  const double dx = (b.x1 - b.x0) / kGrid, dy = (b.y1 - b.y0) / kGrid;
  for (std::size_t r = 0; r < kGrid; ++r)
    for (std::size_t c = 0; c < kGrid; ++c)
      out.emplace_back(b.x0 + (static_cast<double>(c) + 0.5) * dx, b.y1 - (static_cast<double>(r) + 0.5) * dy);
  return out;
}

Bounds fit(const std::vector<Point>& points, double margin) {
  Bounds b{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity(),
           std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  for (const auto& p : points) {
    b.x0 = std::min(b.x0, p.x);
    b.x1 = std::max(b.x1, p.x);
    b.y0 = std::min(b.y0, p.y);
    b.y1 = std::max(b.y1, p.y);
  }
  if (points.empty()) return Bounds{};
  const double half = 0.5 * std::max(b.x1 - b.x0, b.y1 - b.y0) * (1.0 + 2.0 * margin) + 1e-9;
  const double cx = 0.5 * (b.x0 + b.x1), cy = 0.5 * (b.y0 + b.y1);
  return Bounds{cx - half, cx + half, cy - half, cy + half};
}

std::string plot(const std::string& title, const Bounds& b, const std::vector<Point>& points,
                 const std::vector<std::size_t>& grid) {
  std::ostringstream s;
  s.precision(6);
  const double top = 24.0;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kSize << "\" height=\"" << kSize + top
    << "\" viewBox=\"0 0 " << kSize << ' ' << kSize + top << "\">\n";
  s << "<text x=\"" << kSize / 2 << "\" y=\"16\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">"
    << esc(title) << "</text>\n";
  s << "<g transform=\"translate(0," << top << ")\">\n";
  s << "<rect x=\"0\" y=\"0\" width=\"" << kSize << "\" height=\"" << kSize << "\" fill=\"#ffffff\"/>\n";
  if (grid.size() == kGrid * kGrid) {
    const double cell = kSize / kGrid;
    s << "<g shape-rendering=\"crispEdges\">\n";
    for (std::size_t r = 0; r < kGrid; ++r) {
      std::size_t c = 0;
      while (c < kGrid) {
        const std::size_t cls = grid[r * kGrid + c];
        std::size_t end = c + 1;
        while (end < kGrid && grid[r * kGrid + end] == cls) ++end;
        if (cls == kNoCell) {
          c = end;
          continue;
        }
        s << "<rect x=\"" << static_cast<double>(c) * cell << "\" y=\"" << static_cast<double>(r) * cell
          << "\" width=\"" << static_cast<double>(end - c) * cell << "\" height=\"" << cell << "\" fill=\""
          << colour(kCell, cls) << "\"/>\n";
        c = end;
      }
    }
    s << "</g>\n";
  }
  const double sx = kSize / (b.x1 - b.x0), sy = kSize / (b.y1 - b.y0);
  for (const auto& p : points)
    s << "<circle cx=\"" << (p.x - b.x0) * sx << "\" cy=\"" << (b.y1 - p.y) * sy << "\" r=\"2.2\" fill=\""
      << colour(kPoint, p.cls) << "\"/>\n";
  s << "</g>\n</svg>\n";
  return s.str();
}

}  // namespace revcal::svg
