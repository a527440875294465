// SPDX-License-Identifier: Apache-2.0
#pragma once

// Reverse-mode automatic differentiation over 2-D values.
//
// A Graph is built op by op (shapes are validated at build time), then
// evaluated with named inputs, then differentiated from a scalar node.
// Every value is a matrix; scalars are 1x1 and bias vectors 1xn.
// Slice, reshape and detach are views: they alias the storage of their source
// so a slice of a Parameter reads the parameter's own buffer.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "instatune/kernels.hpp"
#include "instatune/tensor.hpp"

namespace instatune {

/// Trainable leaf storage. `grad` has the shape of `value` once a backward
/// pass has touched it; backward accumulates, callers zero it.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  void zero_grad();
};

enum class NodeId : std::uint32_t {};

struct Range {
  std::size_t begin = 0;
  std::size_t count = 0;
};

enum class Op : std::uint8_t {
  input,
  constant,
  parameter,
  matmul,
  add,
  sub,
  mul,
  scale,
  softmax,
  log_softmax,
  gelu,
  layernorm,
  slice,
  reshape,
  mean_rows,
  sum,
  concat_rows,
  concat_cols,
  gather_rows,
  pick,
  detach,
};

std::string_view op_name(Op op);

/// tanh-approximated GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
double gelu_value(double x);
double gelu_derivative(double x);

inline constexpr double kLayerNormEps = 1e-5;

class Graph {
 public:
  using Inputs = std::map<std::string, Tensor>;
  using Outputs = std::map<std::string, Tensor>;
  using Trans = kernels::Trans;

  NodeId input(std::string name, std::size_t rows, std::size_t cols);
  NodeId constant(Tensor value);
  /// Leaf bound to external storage. Binding the same Parameter twice returns
  /// the same node.
  NodeId parameter(Parameter& p);
  /// Read-only leaf: the value is aliased but backward never writes to `p`.
  NodeId frozen(const Parameter& p);

  NodeId matmul(NodeId a, NodeId b, Trans ta = Trans::no, Trans tb = Trans::no);
  /// Elementwise a + b. `b` may have fewer rows than `a` if it divides them;
  /// it is then tiled down the rows (1xn bias broadcast is the common case).
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double factor);
  NodeId softmax(NodeId a);
  NodeId log_softmax(NodeId a);
  NodeId gelu(NodeId a);
  /// Row-wise normalization with 1xcols gain and bias.
  NodeId layernorm(NodeId x, NodeId gain, NodeId bias);
  NodeId slice(NodeId a, Range rows, Range cols);
  NodeId reshape(NodeId a, std::size_t rows, std::size_t cols);
  NodeId mean_rows(NodeId a);
  NodeId sum(NodeId a);
  NodeId concat_rows(std::span<const NodeId> parts);
  NodeId concat_cols(std::span<const NodeId> parts);
  NodeId gather_rows(NodeId table, std::vector<std::size_t> ids);
  /// out[r] = a[r, cols[r]], shape rows x 1.
  NodeId pick(NodeId a, std::vector<std::size_t> cols);
  /// Forward identity, no gradient flows back.
  NodeId detach(NodeId a);

  void mark_output(std::string name, NodeId id);

  /// Runs every node in build order. Throws StructuralError for missing or
  /// mis-shaped inputs and NumericError when a node produces NaN/Inf.
  Outputs evaluate(const Inputs& inputs = {});

  /// Reverse sweep from a 1x1 node. Parameter gradients are accumulated into
  /// Parameter::grad; per-node gradients are readable through grad().
  void backward(NodeId output);

  Tensor value(NodeId id) const;
  double scalar(NodeId id) const;
  Tensor grad(NodeId id) const;

  std::size_t rows(NodeId id) const { return node(id).rows; }
  std::size_t cols(NodeId id) const { return node(id).cols; }
  Op op(NodeId id) const { return node(id).op; }
  std::size_t size() const { return nodes_.size(); }
  bool evaluated() const { return evaluated_; }

  /// Parameters bound as leaves, in binding order.
  std::vector<Parameter*> parameters() const;

 private:
  static constexpr std::uint32_t kNone = ~std::uint32_t{0};

  struct Node {
    Op op = Op::constant;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint32_t> in;
    std::string label;

    // Storage: owned nodes use `value`; views alias `root` at `offset` with
    // leading dimension `ld`.
    std::vector<double> value;
    std::uint32_t root = kNone;
    std::size_t offset = 0;
    std::size_t ld = 0;
    std::size_t view_row = 0;  // slice origin inside the direct source
    std::size_t view_col = 0;

    const Parameter* param = nullptr;
    bool trainable = false;
    double factor = 0.0;
    Trans ta = Trans::no;
    Trans tb = Trans::no;
    std::vector<std::size_t> index;
    std::vector<double> cache;
    std::vector<double> grad;
  };

  const Node& node(NodeId id) const;
  Node& node(NodeId id);
  static Node blank(Op op, std::size_t rows, std::size_t cols);
  NodeId push(Node n);
  NodeId make_view(Op op, NodeId src, std::size_t rows, std::size_t cols,
                   std::size_t row0, std::size_t col0);
  std::string describe(std::uint32_t index) const;
  [[noreturn]] void fail(std::string_view op, const std::string& what) const;

  kernels::ConstMat cref(std::uint32_t index) const;
  kernels::Mat mref(std::uint32_t index);
  kernels::Mat gref(std::uint32_t index);

  void compute(std::uint32_t index);
  void propagate(std::uint32_t index);

  std::vector<Node> nodes_;
  std::map<std::string, NodeId> outputs_;
  std::unordered_map<const Parameter*, NodeId> bound_;
  std::unordered_map<const Parameter*, NodeId> frozen_;
  bool evaluated_ = false;
};

}  // namespace instatune
