#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace revcal::svg {

struct Bounds {
  double x0 = -1, x1 = 1, y0 = -1, y1 = 1;
};

struct Point {
  double x = 0, y = 0;
  std::size_t cls = 0;
};

inline constexpr std::size_t kGrid = 200;
inline constexpr std::size_t kNoCell = static_cast<std::size_t>(-1);  // grid value left blank

// Cell centres of the kGrid x kGrid raster, row-major from the top row.
std::vector<std::pair<double, double>> grid_centres(const Bounds& b);

// Scatter plot with one <circle> per point. `grid` (empty or kGrid*kGrid
// class ids in grid_centres order) is drawn underneath as colored cells,
// merged into runs along each row.
std::string plot(const std::string& title, const Bounds& b, const std::vector<Point>& points,
                 const std::vector<std::size_t>& grid = {});

Bounds fit(const std::vector<Point>& points, double margin = 0.1);

}  // namespace revcal::svg
