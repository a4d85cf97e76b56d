#pragma once

#include <functional>

#include "revcal/graph.hpp"
#include "revcal/optim.hpp"

namespace revcal {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  bool passed = false;
};

// Compares analytic gradients with central differences (f(x+h) - f(x-h)) / 2h.
// The error per coordinate is |a - n| / max(|a|, |n|, 1e-6), which degrades to
// an absolute error when both gradients are ~0.
GradCheckReport grad_check(const std::function<NodeId(Graph&, NodeId)>& f, const Tensor& point, double h,
                           double tol);

// Same check against every entry of caller-owned parameters. `f` must register
// the parameters itself (Graph::leaf) each time it is called.
GradCheckReport grad_check_params(const std::function<NodeId(Graph&)>& f, const ParamSet& params, double h,
                                  double tol);

}  // namespace revcal
