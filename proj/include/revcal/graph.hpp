#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string_view>
#include <vector>

#include "revcal/tensor.hpp"

namespace revcal {

using NodeId = std::size_t;

enum class OpKind {
  constant,
  leaf,
  matmul,
  add,
  sub,
  mul,
  affine,
  relu,
  tanh,
  sigmoid,
  exp,
  softmax,
  log_softmax,
  reshape,
  sum,
  sum_axis,
  mean,
  conv2d,
  conv_transpose2d,
  max_pool2d,
  clamp,
};

std::string_view op_name(OpKind kind);

// Reverse-mode tape. Nodes are appended in evaluation order, so insertion order
// is a topological order. A graph is built for one forward/backward pair and
// then discarded.
//
// Leaves registered with leaf() refer back to caller-owned tensors: after
// backward(), every such tensor with requires_grad set has its grad populated.
// Leaves without requires_grad (frozen parameters) still pass gradients through
// to the rest of the graph but never receive a grad slot themselves.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  NodeId constant(Tensor value);
  NodeId leaf(Tensor& source);

  const Tensor& value(NodeId id) const;
  const Shape& shape(NodeId id) const { return value(id).shape; }
  OpKind kind(NodeId id) const;
  std::size_t size() const noexcept { return nodes_.size(); }
  bool requires_grad(NodeId id) const;

  // a[M,K] x b[K,N]
  NodeId matmul(NodeId a, NodeId b);
  // Same shape, scalar-with-tensor, or bias-add: 1-D b with b.size == a.shape[1]
  // broadcast over every other axis of a.
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  // Same shape or scalar-with-tensor.
  NodeId mul(NodeId a, NodeId b);
  // scale * a + shift
  NodeId affine(NodeId a, double scale, double shift);
  NodeId relu(NodeId a);
  NodeId tanh(NodeId a);
  NodeId sigmoid(NodeId a);
  NodeId exp(NodeId a);
  NodeId softmax(NodeId a, std::size_t axis);
  NodeId log_softmax(NodeId a, std::size_t axis);
  NodeId reshape(NodeId a, Shape shape);
  NodeId sum(NodeId a);
  NodeId sum(NodeId a, std::size_t axis);
  NodeId mean(NodeId a);
  // x[N,C,H,W], w[O,C,kh,kw] -> [N,O,(H+2p-kh)/s+1,(W+2p-kw)/s+1]
  NodeId conv2d(NodeId x, NodeId w, std::size_t stride, std::size_t padding);
  // x[N,C,H,W], w[C,O,kh,kw] -> [N,O,(H-1)s-2p+kh+op,(W-1)s-2p+kw+op]; op < s
  NodeId conv_transpose2d(NodeId x, NodeId w, std::size_t stride, std::size_t padding,
                          std::size_t output_padding);
  NodeId max_pool2d(NodeId x, std::size_t kernel, std::size_t stride);
  // Gradient passes where lo <= a <= hi.
  NodeId clamp(NodeId a, double lo, double hi);

  void backward(NodeId loss);

 private:
  using BackwardFn = std::function<void(Graph&, NodeId)>;

  struct Node {
    OpKind kind;
    std::vector<NodeId> inputs;
    Tensor value;
    std::vector<double> grad;
    bool needs_grad = false;
    Tensor* source = nullptr;
    BackwardFn backward;
  };

  NodeId push(OpKind kind, std::vector<NodeId> inputs, Tensor value, BackwardFn backward);
  const Node& node(NodeId id) const;
  // Lazily allocated gradient buffer of a node; empty span if the node needs none.
  std::vector<double>* grad_buffer(NodeId id);
  const std::vector<double>& out_grad(NodeId id) const { return nodes_[id].grad; }

  NodeId unary(OpKind kind, NodeId a, double (*f)(double), double (*df)(double x, double y));
  NodeId softmax_like(OpKind kind, NodeId a, std::size_t axis);

  std::vector<Node> nodes_;
};

}  // namespace revcal
