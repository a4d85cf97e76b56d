#include "revcal/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "kernels.hpp"
#include "revcal/error.hpp"

namespace revcal {

namespace {

std::string mismatch(OpKind kind, const Shape& a, const Shape& b) {
  return std::string(op_name(kind)) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b);
}

bool is_scalar_like(const Tensor& t) { return t.size() == 1 && t.rank() <= 1; }

enum class Broadcast { same, scalar_rhs, scalar_lhs, bias };

Broadcast broadcast_rule(OpKind kind, const Tensor& a, const Tensor& b, bool allow_bias) {
  if (a.shape == b.shape) return Broadcast::same;
  if (is_scalar_like(b)) return Broadcast::scalar_rhs;
  if (is_scalar_like(a)) return Broadcast::scalar_lhs;
  if (allow_bias && b.rank() == 1 && a.rank() >= 2 && a.shape[1] == b.shape[0]) return Broadcast::bias;
  fail(mismatch(kind, a.shape, b.shape));
}

struct BiasLayout {
  std::size_t outer, channels, inner;
};

BiasLayout bias_layout(const Shape& s) {
  std::size_t inner = 1;
  for (std::size_t i = 2; i < s.size(); ++i) inner *= s[i];
  return {s[0], s[1], inner};
}

}  // namespace

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::constant: return "constant";
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "elementwise_mul";
    case OpKind::affine: return "affine";
    case OpKind::relu: return "relu";
    case OpKind::tanh: return "tanh";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::exp: return "exp";
    case OpKind::softmax: return "softmax";
    case OpKind::log_softmax: return "log_softmax";
    case OpKind::reshape: return "reshape";
    case OpKind::sum: return "sum";
    case OpKind::sum_axis: return "sum_axis";
    case OpKind::mean: return "mean";
    case OpKind::conv2d: return "conv2d";
    case OpKind::conv_transpose2d: return "transposed_conv2d";
    case OpKind::max_pool2d: return "max_pool2d";
    case OpKind::clamp: return "clamp";
  }
  return "unknown";
}

const Graph::Node& Graph::node(NodeId id) const {
  if (id >= nodes_.size())
    fail("node " + std::to_string(id) + " is not part of this graph (size " + std::to_string(nodes_.size()) + ")");
  return nodes_[id];
}

const Tensor& Graph::value(NodeId id) const { return node(id).value; }
OpKind Graph::kind(NodeId id) const { return node(id).kind; }
bool Graph::requires_grad(NodeId id) const { return node(id).needs_grad; }

std::vector<double>* Graph::grad_buffer(NodeId id) {
  Node& n = nodes_[id];
  if (!n.needs_grad) return nullptr;
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return &n.grad;
}

NodeId Graph::push(OpKind kind, std::vector<NodeId> inputs, Tensor value, BackwardFn backward) {
  if (!value.all_finite()) fail_numeric(std::string(op_name(kind)) + ": produced non-finite values");
  Node n{kind, std::move(inputs), std::move(value), {}, false, nullptr, std::move(backward)};
  for (NodeId in : n.inputs) n.needs_grad = n.needs_grad || nodes_[in].needs_grad;
  nodes_.push_back(std::move(n));
  return nodes_.size() - 1;
}

NodeId Graph::constant(Tensor value) {
  if (!value.all_finite()) fail_numeric("constant: non-finite input");
  value.requires_grad = false;
  value.grad.reset();
  nodes_.push_back(Node{OpKind::constant, {}, std::move(value), {}, false, nullptr, {}});
  return nodes_.size() - 1;
}

NodeId Graph::leaf(Tensor& source) {
  if (!source.all_finite()) fail_numeric("leaf: non-finite input of shape " + shape_str(source.shape));
  Tensor copy(source.shape, source.data);
  nodes_.push_back(Node{OpKind::leaf, {}, std::move(copy), {}, source.requires_grad, &source, {}});
  return nodes_.size() - 1;
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (A.rank() != 2 || B.rank() != 2 || A.shape[1] != B.shape[0]) fail(mismatch(OpKind::matmul, A.shape, B.shape));
  const std::size_t M = A.shape[0], K = A.shape[1], N = B.shape[1];
  Tensor out(Shape{M, N});
  kernels::gemm_nn(M, N, K, A.data.data(), B.data.data(), out.data.data(), false);
  return push(OpKind::matmul, {a, b}, std::move(out), [a, b, M, N, K](Graph& g, NodeId self) {
    const auto& dy = g.out_grad(self);
    if (auto* da = g.grad_buffer(a)) kernels::gemm_nt(M, K, N, dy.data(), g.value(b).data.data(), da->data(), true);
    if (auto* db = g.grad_buffer(b)) kernels::gemm_tn(K, N, M, g.value(a).data.data(), dy.data(), db->data(), true);
  });
}

NodeId Graph::add(NodeId a, NodeId b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  const Broadcast rule = broadcast_rule(OpKind::add, A, B, true);
  if (rule == Broadcast::scalar_lhs) return add(b, a);
  Tensor out(A.shape, A.data);
  if (rule == Broadcast::same) {
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += B.data[i];
  } else if (rule == Broadcast::scalar_rhs) {
    for (double& v : out.data) v += B.data[0];
  } else {
    const auto L = bias_layout(A.shape);
    for (std::size_t o = 0; o < L.outer; ++o)
      for (std::size_t c = 0; c < L.channels; ++c) {
        double* p = out.data.data() + (o * L.channels + c) * L.inner;
        for (std::size_t i = 0; i < L.inner; ++i) p[i] += B.data[c];
      }
  }
  return push(OpKind::add, {a, b}, std::move(out), [a, b, rule](Graph& g, NodeId self) {
    const auto& dy = g.out_grad(self);
    if (auto* da = g.grad_buffer(a))
      for (std::size_t i = 0; i < dy.size(); ++i) (*da)[i] += dy[i];
    if (auto* db = g.grad_buffer(b)) {
      if (rule == Broadcast::same) {
        for (std::size_t i = 0; i < dy.size(); ++i) (*db)[i] += dy[i];
      } else if (rule == Broadcast::scalar_rhs) {
        double s = 0.0;
        for (double v : dy) s += v;
        (*db)[0] += s;
      } else {
        const auto L = bias_layout(g.value(a).shape);
        for (std::size_t o = 0; o < L.outer; ++o)
          for (std::size_t c = 0; c < L.channels; ++c) {
            const double* p = dy.data() + (o * L.channels + c) * L.inner;
            double s = 0.0;
            for (std::size_t i = 0; i < L.inner; ++i) s += p[i];
            (*db)[c] += s;
          }
      }
    }
  });
}

NodeId Graph::sub(NodeId a, NodeId b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  const Broadcast rule = broadcast_rule(OpKind::sub, A, B, false);
  Shape shape = rule == Broadcast::scalar_lhs ? B.shape : A.shape;
  Tensor out(shape);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = rule == Broadcast::scalar_lhs ? A.data[0] : A.data[i];
    const double y = rule == Broadcast::scalar_rhs ? B.data[0] : B.data[i];
    out.data[i] = x - y;
  }
  return push(OpKind::sub, {a, b}, std::move(out), [a, b, rule](Graph& g, NodeId self) {
    const auto& dy = g.out_grad(self);
    for (int side = 0; side < 2; ++side) {
      auto* d = g.grad_buffer(side == 0 ? a : b);
      if (!d) continue;
      const double sign = side == 0 ? 1.0 : -1.0;
      const bool reduce = (side == 0 && rule == Broadcast::scalar_lhs) || (side == 1 && rule == Broadcast::scalar_rhs);
      if (reduce) {
        double s = 0.0;
        for (double v : dy) s += v;
        (*d)[0] += sign * s;
      } else {
        for (std::size_t i = 0; i < dy.size(); ++i) (*d)[i] += sign * dy[i];
      }
    }
  });
}

NodeId Graph::mul(NodeId a, NodeId b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  const Broadcast rule = broadcast_rule(OpKind::mul, A, B, false);
  if (rule == Broadcast::scalar_lhs) return mul(b, a);
  Tensor out(A.shape, A.data);
  if (rule == Broadcast::same) {
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= B.data[i];
  } else {
    for (double& v : out.data) v *= B.data[0];
  }
  return push(OpKind::mul, {a, b}, std::move(out), [a, b, rule](Graph& g, NodeId self) {
    const auto& dy = g.out_grad(self);
    const auto& av = g.value(a).data;
    const auto& bv = g.value(b).data;
    if (auto* da = g.grad_buffer(a)) {
      for (std::size_t i = 0; i < dy.size(); ++i) (*da)[i] += dy[i] * (rule == Broadcast::same ? bv[i] : bv[0]);
    }
    if (auto* db = g.grad_buffer(b)) {
      if (rule == Broadcast::same) {
        for (std::size_t i = 0; i < dy.size(); ++i) (*db)[i] += dy[i] * av[i];
      } else {
        double s = 0.0;
        for (std::size_t i = 0; i < dy.size(); ++i) s += dy[i] * av[i];
        (*db)[0] += s;
      }
    }
  });
}

NodeId Graph::affine(NodeId a, double scale, double shift) {
  const Tensor& A = value(a);
  Tensor out(A.shape, A.data);
  for (double& v : out.data) v = scale * v + shift;
  return push(OpKind::affine, {a}, std::move(out), [a, scale](Graph& g, NodeId self) {
    const auto& dy = g.out_grad(self);
    if (auto* da = g.grad_buffer(a))
      for (std::size_t i = 0; i < dy.size(); ++i) (*da)[i] += scale * dy[i];
  });
}

NodeId Graph::unary(OpKind kind, NodeId a, double (*f)(double), double (*df)(double x, double y)) {
  const Tensor& A = value(a);
  Tensor out(A.shape, A.data);
  for (double& v : out.data) v = f(v);
  return push(kind, {a}, std::move(out), [a, df](Graph& g, NodeId self) {
    const auto& dy = g.out_grad(self);
    const auto& x = g.value(a).data;
    const auto& y = g.value(self).data;
    if (auto* da = g.grad_buffer(a))
      for (std::size_t i = 0; i < dy.size(); ++i) (*da)[i] += dy[i] * df(x[i], y[i]);
  });
}

NodeId Graph::relu(NodeId a) {
  return unary(
      OpKind::relu, a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

NodeId Graph::tanh(NodeId a) {
  return unary(
      OpKind::tanh, a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

NodeId Graph::sigmoid(NodeId a) {
  return unary(
      OpKind::sigmoid, a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

NodeId Graph::exp(NodeId a) {
  return unary(
      OpKind::exp, a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

NodeId Graph::softmax_like(OpKind kind, NodeId a, std::size_t axis) {
  const Tensor& A = value(a);
  if (axis >= A.rank())
    fail(std::string(op_name(kind)) + ": axis " + std::to_string(axis) + " out of range for " + shape_str(A.shape));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= A.shape[i];
  for (std::size_t i = axis + 1; i < A.rank(); ++i) inner *= A.shape[i];
  const std::size_t len = A.shape[axis];
  const bool log_form = kind == OpKind::log_softmax;

  Tensor out(A.shape);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, A.data[base + k * inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < len; ++k) z += std::exp(A.data[base + k * inner] - mx);
      const double logz = std::log(z);
      for (std::size_t k = 0; k < len; ++k) {
        const double shifted = A.data[base + k * inner] - mx;
        out.data[base + k * inner] = log_form ? shifted - logz : std::exp(shifted) / z;
      }
    }

  return push(kind, {a}, std::move(out), [a, outer, inner, len, log_form](Graph& g, NodeId self) {
    auto* da = g.grad_buffer(a);
    if (!da) return;
    const auto& dy = g.out_grad(self);
    const auto& y = g.value(self).data;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double s = 0.0;
        for (std::size_t k = 0; k < len; ++k) {
          const std::size_t i = base + k * inner;
          s += log_form ? dy[i] : dy[i] * y[i];
        }
        for (std::size_t k = 0; k < len; ++k) {
          const std::size_t i = base + k * inner;
          (*da)[i] += log_form ? dy[i] - std::exp(y[i]) * s : y[i] * (dy[i] - s);
        }
      }
  });
}

NodeId Graph::softmax(NodeId a, std::size_t axis) { return softmax_like(OpKind::softmax, a, axis); }
NodeId Graph::log_softmax(NodeId a, std::size_t axis) { return softmax_like(OpKind::log_softmax, a, axis); }

NodeId Graph::reshape(NodeId a, Shape shape) {
  const Tensor& A = value(a);
  if (numel(shape) != A.size()) fail(mismatch(OpKind::reshape, A.shape, shape));
  Tensor out(std::move(shape), A.data);
  return push(OpKind::reshape, {a}, std::move(out), [a](Graph& g, NodeId self) {
    const auto& dy = g.out_grad(self);
    if (auto* da = g.grad_buffer(a))
      for (std::size_t i = 0; i < dy.size(); ++i) (*da)[i] += dy[i];
  });
}

NodeId Graph::sum(NodeId a) {
  const Tensor& A = value(a);
  double s = 0.0;
  for (double v : A.data) s += v;
  return push(OpKind::sum, {a}, Tensor::scalar(s), [a](Graph& g, NodeId self) {
    const double d = g.out_grad(self)[0];
    if (auto* da = g.grad_buffer(a))
      for (double& v : *da) v += d;
  });
}

NodeId Graph::mean(NodeId a) {
  const Tensor& A = value(a);
  double s = 0.0;
  for (double v : A.data) s += v;
  const double n = static_cast<double>(A.size());
  return push(OpKind::mean, {a}, Tensor::scalar(s / n), [a, n](Graph& g, NodeId self) {
    const double d = g.out_grad(self)[0] / n;
    if (auto* da = g.grad_buffer(a))
      for (double& v : *da) v += d;
  });
}

NodeId Graph::sum(NodeId a, std::size_t axis) {
  const Tensor& A = value(a);
  if (axis >= A.rank()) fail("sum_axis: axis " + std::to_string(axis) + " out of range for " + shape_str(A.shape));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= A.shape[i];
  for (std::size_t i = axis + 1; i < A.rank(); ++i) inner *= A.shape[i];
  const std::size_t len = A.shape[axis];
  Shape shape = A.shape;
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor out(shape);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < len; ++k)
      for (std::size_t in = 0; in < inner; ++in) out.data[o * inner + in] += A.data[(o * len + k) * inner + in];
  return push(OpKind::sum_axis, {a}, std::move(out), [a, outer, inner, len](Graph& g, NodeId self) {
    const auto& dy = g.out_grad(self);
    if (auto* da = g.grad_buffer(a))
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k = 0; k < len; ++k)
          for (std::size_t in = 0; in < inner; ++in) (*da)[(o * len + k) * inner + in] += dy[o * inner + in];
  });
}

NodeId Graph::conv2d(NodeId x, NodeId w, std::size_t stride, std::size_t padding) {
  const Tensor& X = value(x);
  const Tensor& W = value(w);
  if (X.rank() != 4 || W.rank() != 4 || X.shape[1] != W.shape[1]) fail(mismatch(OpKind::conv2d, X.shape, W.shape));
  if (stride == 0) fail("conv2d: stride must be positive");
  const std::size_t N = X.shape[0], C = X.shape[1], H = X.shape[2], Wd = X.shape[3];
  const std::size_t O = W.shape[0], kh = W.shape[2], kw = W.shape[3];
  if (H + 2 * padding < kh || Wd + 2 * padding < kw) fail(mismatch(OpKind::conv2d, X.shape, W.shape));
  const kernels::ConvGeometry geo{C, H, Wd, kh, kw, stride, padding, (H + 2 * padding - kh) / stride + 1,
                                  (Wd + 2 * padding - kw) / stride + 1};
  const std::size_t P = geo.out_h * geo.out_w, CK = C * kh * kw;

  Tensor out(Shape{N, O, geo.out_h, geo.out_w});
  std::vector<double> col(CK * P);
  for (std::size_t n = 0; n < N; ++n) {
    kernels::im2col(geo, X.data.data() + n * C * H * Wd, col.data());
    kernels::gemm_nn(O, P, CK, W.data.data(), col.data(), out.data.data() + n * O * P, false);
  }

  return push(OpKind::conv2d, {x, w}, std::move(out), [x, w, geo, N, O, P, CK](Graph& g, NodeId self) {
    const auto& dy = g.out_grad(self);
    auto* dx = g.grad_buffer(x);
    auto* dw = g.grad_buffer(w);
    const std::size_t img = geo.channels * geo.height * geo.width;
    std::vector<double> col(CK * P);
    for (std::size_t n = 0; n < N; ++n) {
      const double* dyn = dy.data() + n * O * P;
      if (dw) {
        kernels::im2col(geo, g.value(x).data.data() + n * img, col.data());
        kernels::gemm_nt(O, CK, P, dyn, col.data(), dw->data(), true);
      }
      if (dx) {
        kernels::gemm_tn(CK, P, O, g.value(w).data.data(), dyn, col.data(), false);
        kernels::col2im(geo, col.data(), dx->data() + n * img);
      }
    }
  });
}

NodeId Graph::conv_transpose2d(NodeId x, NodeId w, std::size_t stride, std::size_t padding,
                               std::size_t output_padding) {
  const Tensor& X = value(x);
  const Tensor& W = value(w);
  if (X.rank() != 4 || W.rank() != 4 || X.shape[1] != W.shape[0])
    fail(mismatch(OpKind::conv_transpose2d, X.shape, W.shape));
  if (stride == 0 || output_padding >= stride)
    fail("transposed_conv2d: need stride > 0 and output_padding < stride");
  const std::size_t N = X.shape[0], Cin = X.shape[1], H = X.shape[2], Wd = X.shape[3];
  const std::size_t O = W.shape[1], kh = W.shape[2], kw = W.shape[3];
  const long oh = static_cast<long>((H - 1) * stride + kh + output_padding) - 2 * static_cast<long>(padding);
  const long ow = static_cast<long>((Wd - 1) * stride + kw + output_padding) - 2 * static_cast<long>(padding);
  if (oh <= 0 || ow <= 0) fail(mismatch(OpKind::conv_transpose2d, X.shape, W.shape));
  // The output image plays the role of the conv input; x lives on the column side.
  const kernels::ConvGeometry geo{O, static_cast<std::size_t>(oh), static_cast<std::size_t>(ow), kh, kw, stride,
                                  padding, H, Wd};
  const std::size_t P = H * Wd, OK = O * kh * kw, img = O * geo.height * geo.width;

  Tensor out(Shape{N, O, geo.height, geo.width});
  std::vector<double> col(OK * P);
  for (std::size_t n = 0; n < N; ++n) {
    kernels::gemm_tn(OK, P, Cin, W.data.data(), X.data.data() + n * Cin * P, col.data(), false);
    kernels::col2im(geo, col.data(), out.data.data() + n * img);
  }

  return push(OpKind::conv_transpose2d, {x, w}, std::move(out),
              [x, w, geo, N, Cin, P, OK, img](Graph& g, NodeId self) {
                const auto& dy = g.out_grad(self);
                auto* dx = g.grad_buffer(x);
                auto* dw = g.grad_buffer(w);
                std::vector<double> col(OK * P);
                for (std::size_t n = 0; n < N; ++n) {
                  kernels::im2col(geo, dy.data() + n * img, col.data());
                  if (dx) kernels::gemm_nn(Cin, P, OK, g.value(w).data.data(), col.data(), dx->data() + n * Cin * P, true);
                  if (dw) kernels::gemm_nt(Cin, OK, P, g.value(x).data.data() + n * Cin * P, col.data(), dw->data(), true);
                }
              });
}

NodeId Graph::max_pool2d(NodeId x, std::size_t kernel, std::size_t stride) {
  const Tensor& X = value(x);
  if (X.rank() != 4 || kernel == 0 || stride == 0 || X.shape[2] < kernel || X.shape[3] < kernel)
    fail("max_pool2d: cannot pool " + shape_str(X.shape) + " with kernel " + std::to_string(kernel));
  const std::size_t planes = X.shape[0] * X.shape[1], H = X.shape[2], W = X.shape[3];
  const std::size_t OH = (H - kernel) / stride + 1, OW = (W - kernel) / stride + 1;
  Tensor out(Shape{X.shape[0], X.shape[1], OH, OW});
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t oy = 0; oy < OH; ++oy)
      for (std::size_t ox = 0; ox < OW; ++ox) {
        std::size_t best = p * H * W + oy * stride * W + ox * stride;
        for (std::size_t ky = 0; ky < kernel; ++ky)
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const std::size_t i = p * H * W + (oy * stride + ky) * W + ox * stride + kx;
            if (X.data[i] > X.data[best]) best = i;
          }
        const std::size_t o = (p * OH + oy) * OW + ox;
        out.data[o] = X.data[best];
        argmax[o] = best;
      }
  return push(OpKind::max_pool2d, {x}, std::move(out), [x, argmax = std::move(argmax)](Graph& g, NodeId self) {
    const auto& dy = g.out_grad(self);
    if (auto* dx = g.grad_buffer(x))
      for (std::size_t o = 0; o < dy.size(); ++o) (*dx)[argmax[o]] += dy[o];
  });
}

NodeId Graph::clamp(NodeId a, double lo, double hi) {
  if (!(lo < hi)) fail("clamp: need lo < hi");
  const Tensor& A = value(a);
  Tensor out(A.shape, A.data);
  for (double& v : out.data) v = std::clamp(v, lo, hi);
  return push(OpKind::clamp, {a}, std::move(out), [a, lo, hi](Graph& g, NodeId self) {
    const auto& dy = g.out_grad(self);
    const auto& x = g.value(a).data;
    if (auto* da = g.grad_buffer(a))
      for (std::size_t i = 0; i < dy.size(); ++i)
        if (x[i] >= lo && x[i] <= hi) (*da)[i] += dy[i];
  });
}

void Graph::backward(NodeId loss) {
  const Node& root = node(loss);
  if (root.value.size() != 1 || root.value.rank() > 1)
    fail("backward: loss must be a scalar, got shape " + shape_str(root.value.shape));
  for (Node& n : nodes_) n.grad.clear();
  if (!root.needs_grad) return;
  grad_buffer(loss)->at(0) = 1.0;
  for (NodeId id = loss + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.needs_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, id);
  }
  for (Node& n : nodes_) {
    if (n.kind != OpKind::leaf || !n.source || !n.source->requires_grad) continue;
    Tensor& src = *n.source;
    if (!src.grad || src.grad->size() != src.size()) src.grad.emplace(src.size(), 0.0);
    if (n.grad.empty()) continue;
    for (std::size_t i = 0; i < n.grad.size(); ++i) (*src.grad)[i] += n.grad[i];
    for (double v : *src.grad)
      if (!std::isfinite(v)) fail_numeric("backward: non-finite gradient");
  }
}

}  // namespace revcal
