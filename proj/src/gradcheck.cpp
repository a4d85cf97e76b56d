#include "revcal/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "revcal/error.hpp"

namespace revcal {

namespace {

double evaluate(const std::function<NodeId(Graph&)>& f) {
  Graph g;
  const NodeId out = f(g);
  const Tensor& v = g.value(out);
  if (v.size() != 1 || v.rank() > 1) fail("grad_check: function output must be scalar, got " + shape_str(v.shape));
  return v.data[0];
}

}  // namespace

GradCheckReport grad_check_params(const std::function<NodeId(Graph&)>& f, const ParamSet& params, double h,
                                  double tol) {
  if (!(h > 0.0)) fail("grad_check: step h must be positive");
  std::vector<bool> saved_flags;
  for (const auto& p : params) {
    saved_flags.push_back(p.tensor->requires_grad);
    p.tensor->requires_grad = true;
    p.tensor->grad.reset();
  }
  {
    Graph g;
    const NodeId out = f(g);
    const Tensor& v = g.value(out);
    if (v.size() != 1 || v.rank() > 1) fail("grad_check: function output must be scalar, got " + shape_str(v.shape));
    g.backward(out);
  }

  GradCheckReport report;
  std::size_t flat = 0;
  for (const auto& p : params) {
    Tensor& t = *p.tensor;
    const std::vector<double> analytic = t.grad ? *t.grad : std::vector<double>(t.size(), 0.0);
    for (std::size_t i = 0; i < t.size(); ++i, ++flat) {
      const double x0 = t.data[i];
      t.data[i] = x0 + h;
      const double fp = evaluate(f);
      t.data[i] = x0 - h;
      const double fm = evaluate(f);
      t.data[i] = x0;
      const double numeric = (fp - fm) / (2.0 * h);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-6});
      const double err = std::abs(analytic[i] - numeric) / denom;
      if (err > report.max_rel_error || report.checked == 0) {
        report.max_rel_error = std::max(report.max_rel_error, err);
        if (err >= report.max_rel_error) report.worst_index = flat;
      }
      ++report.checked;
    }
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    params[k].tensor->requires_grad = saved_flags[k];
    params[k].tensor->grad.reset();
  }
  report.passed = report.max_rel_error < tol;
  return report;
}

GradCheckReport grad_check(const std::function<NodeId(Graph&, NodeId)>& f, const Tensor& point, double h,
                           double tol) {
  Tensor x(point.shape, point.data);
  x.requires_grad = true;
  return grad_check_params([&](Graph& g) { return f(g, g.leaf(x)); }, ParamSet{{"point", &x}}, h, tol);
}

}  // namespace revcal
