// SPDX-License-Identifier: Apache-2.0
#include "instatune/graph.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace instatune {

using kernels::ConstMat;
using kernels::Mat;

void Parameter::zero_grad() {
  if (grad.shape() != value.shape())
    grad = Tensor(value.shape());
  else
    grad.fill(0.0);
}

std::string_view op_name(Op op) {
  switch (op) {
    case Op::input: return "input";
    case Op::constant: return "constant";
    case Op::parameter: return "parameter";
    case Op::matmul: return "matmul";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::scale: return "scale";
    case Op::softmax: return "softmax";
    case Op::log_softmax: return "log_softmax";
    case Op::gelu: return "gelu";
    case Op::layernorm: return "layernorm";
    case Op::slice: return "slice";
    case Op::reshape: return "reshape";
    case Op::mean_rows: return "mean_rows";
    case Op::sum: return "sum";
    case Op::concat_rows: return "concat_rows";
    case Op::concat_cols: return "concat_cols";
    case Op::gather_rows: return "gather_rows";
    case Op::pick: return "pick";
    case Op::detach: return "detach";
  }
  return "unknown";
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;
}  // namespace

double gelu_value(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

double gelu_derivative(double x) {
  double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
  return 0.5 * (1.0 + t) +
         0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

// ---------------------------------------------------------------------------
// Construction

const Graph::Node& Graph::node(NodeId id) const {
  auto i = static_cast<std::size_t>(id);
  if (i >= nodes_.size())
    throw StructuralError("node id " + std::to_string(i) + " out of range");
  return nodes_[i];
}

Graph::Node& Graph::node(NodeId id) {
  return const_cast<Node&>(std::as_const(*this).node(id));
}

std::string Graph::describe(std::uint32_t index) const {
  const auto& n = nodes_[index];
  std::string s = "node " + std::to_string(index) + " (" +
                  std::string(op_name(n.op));
  if (!n.label.empty()) s += " '" + n.label + "'";
  return s + ")";
}

void Graph::fail(std::string_view op, const std::string& what) const {
  throw StructuralError("node " + std::to_string(nodes_.size()) + " (" +
                        std::string(op) + "): " + what);
}

Graph::Node Graph::blank(Op op, std::size_t rows, std::size_t cols) {
  Node n;
  n.op = op;
  n.rows = rows;
  n.cols = cols;
  return n;
}

NodeId Graph::push(Node n) {
  if (n.rows == 0 || n.cols == 0) fail(op_name(n.op), "empty result shape");
  if (n.root == kNone && n.op != Op::parameter) n.ld = n.cols;
  nodes_.push_back(std::move(n));
  evaluated_ = false;
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Graph::input(std::string name, std::size_t rows, std::size_t cols) {
  Node n = blank(Op::input, rows, cols);
  n.label = std::move(name);
  return push(std::move(n));
}

NodeId Graph::constant(Tensor value) {
  if (value.rank() > 2) fail("constant", "rank > 2 not supported");
  Node n = blank(Op::constant, value.rows(), value.cols());
  n.value = value.values();
  return push(std::move(n));
}

NodeId Graph::parameter(Parameter& p) {
  if (auto it = bound_.find(&p); it != bound_.end()) return it->second;
  if (p.value.rank() > 2 || p.value.size() == 0)
    fail("parameter", "'" + p.name + "' must be a non-empty matrix");
  Node n = blank(Op::parameter, p.value.rows(), p.value.cols());
  n.label = p.name;
  n.param = &p;
  n.trainable = true;
  n.ld = n.cols;
  auto id = push(std::move(n));
  bound_.emplace(&p, id);
  return id;
}

NodeId Graph::frozen(const Parameter& p) {
  if (auto it = frozen_.find(&p); it != frozen_.end()) return it->second;
  if (p.value.rank() > 2 || p.value.size() == 0)
    fail("parameter", "'" + p.name + "' must be a non-empty matrix");
  Node n = blank(Op::parameter, p.value.rows(), p.value.cols());
  n.label = p.name;
  n.param = &p;
  n.ld = n.cols;
  auto id = push(std::move(n));
  frozen_.emplace(&p, id);
  return id;
}

NodeId Graph::matmul(NodeId a, NodeId b, Trans ta, Trans tb) {
  const auto& na = node(a);
  const auto& nb = node(b);
  std::size_t m = ta == Trans::no ? na.rows : na.cols;
  std::size_t k = ta == Trans::no ? na.cols : na.rows;
  std::size_t kb = tb == Trans::no ? nb.rows : nb.cols;
  std::size_t n = tb == Trans::no ? nb.cols : nb.rows;
  if (k != kb)
    fail("matmul", "inner extents differ (" + std::to_string(k) + " vs " +
                       std::to_string(kb) + ")");
  Node out = blank(Op::matmul, m, n);
  out.in = {static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)};
  out.ta = ta;
  out.tb = tb;
  return push(std::move(out));
}

namespace {
bool tiles(std::size_t big_rows, std::size_t small_rows) {
  return small_rows > 0 && big_rows % small_rows == 0;
}
}  // namespace

NodeId Graph::add(NodeId a, NodeId b) {
  const auto& na = node(a);
  const auto& nb = node(b);
  if (na.cols != nb.cols || !tiles(na.rows, nb.rows))
    fail("add", "cannot broadcast " + std::to_string(nb.rows) + "x" +
                    std::to_string(nb.cols) + " onto " +
                    std::to_string(na.rows) + "x" + std::to_string(na.cols));
  Node out = blank(Op::add, na.rows, na.cols);
  out.in = {static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)};
  return push(std::move(out));
}

NodeId Graph::sub(NodeId a, NodeId b) {
  const auto& na = node(a);
  const auto& nb = node(b);
  if (na.cols != nb.cols || !tiles(na.rows, nb.rows))
    fail("sub", "incompatible operand shapes");
  Node out = blank(Op::sub, na.rows, na.cols);
  out.in = {static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)};
  return push(std::move(out));
}

NodeId Graph::mul(NodeId a, NodeId b) {
  const auto& na = node(a);
  const auto& nb = node(b);
  if (na.rows != nb.rows || na.cols != nb.cols)
    fail("mul", "operands must have equal shapes");
  Node out = blank(Op::mul, na.rows, na.cols);
  out.in = {static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)};
  return push(std::move(out));
}

NodeId Graph::scale(NodeId a, double factor) {
  const auto& na = node(a);
  Node out = blank(Op::scale, na.rows, na.cols);
  out.in = {static_cast<std::uint32_t>(a)};
  out.factor = factor;
  return push(std::move(out));
}

NodeId Graph::softmax(NodeId a) {
  const auto& na = node(a);
  Node out = blank(Op::softmax, na.rows, na.cols);
  out.in = {static_cast<std::uint32_t>(a)};
  return push(std::move(out));
}

NodeId Graph::log_softmax(NodeId a) {
  const auto& na = node(a);
  Node out = blank(Op::log_softmax, na.rows, na.cols);
  out.in = {static_cast<std::uint32_t>(a)};
  return push(std::move(out));
}

NodeId Graph::gelu(NodeId a) {
  const auto& na = node(a);
  Node out = blank(Op::gelu, na.rows, na.cols);
  out.in = {static_cast<std::uint32_t>(a)};
  return push(std::move(out));
}

NodeId Graph::layernorm(NodeId x, NodeId gain, NodeId bias) {
  const auto& nx = node(x);
  const auto& ng = node(gain);
  const auto& nb = node(bias);
  if (ng.rows != 1 || nb.rows != 1 || ng.cols != nx.cols || nb.cols != nx.cols)
    fail("layernorm", "gain and bias must be 1x" + std::to_string(nx.cols));
  Node out = blank(Op::layernorm, nx.rows, nx.cols);
  out.in = {static_cast<std::uint32_t>(x), static_cast<std::uint32_t>(gain),
            static_cast<std::uint32_t>(bias)};
  return push(std::move(out));
}

NodeId Graph::make_view(Op op, NodeId src, std::size_t rows, std::size_t cols,
                        std::size_t row0, std::size_t col0) {
  auto s = static_cast<std::uint32_t>(src);
  const auto& ns = node(src);
  bool owned = ns.root == kNone;
  Node out = blank(op, rows, cols);
  out.in = {s};
  out.root = owned ? s : ns.root;
  std::size_t src_ld = ns.ld;
  std::size_t src_offset = owned ? 0 : ns.offset;
  out.offset = src_offset + row0 * src_ld + col0;
  out.ld = src_ld;
  out.view_row = row0;
  out.view_col = col0;
  return push(std::move(out));
}

NodeId Graph::slice(NodeId a, Range r, Range c) {
  const auto& na = node(a);
  if (r.count == 0 || c.count == 0 || r.begin + r.count > na.rows ||
      c.begin + c.count > na.cols)
    fail("slice", "window exceeds source " + std::to_string(na.rows) + "x" +
                      std::to_string(na.cols));
  return make_view(Op::slice, a, r.count, c.count, r.begin, c.begin);
}

NodeId Graph::reshape(NodeId a, std::size_t rows, std::size_t cols) {
  const auto& na = node(a);
  if (rows * cols != na.rows * na.cols)
    fail("reshape", "element count changes");
  if (na.ld != na.cols && na.rows > 1)
    fail("reshape", "source view is not contiguous");
  auto id = make_view(Op::reshape, a, rows, cols, 0, 0);
  nodes_.back().ld = cols;
  return id;
}

NodeId Graph::detach(NodeId a) {
  const auto& na = node(a);
  return make_view(Op::detach, a, na.rows, na.cols, 0, 0);
}

NodeId Graph::mean_rows(NodeId a) {
  const auto& na = node(a);
  Node out = blank(Op::mean_rows, 1, na.cols);
  out.in = {static_cast<std::uint32_t>(a)};
  return push(std::move(out));
}

NodeId Graph::sum(NodeId a) {
  Node out = blank(Op::sum, 1, 1);
  out.in = {static_cast<std::uint32_t>(a)};
  node(a);
  return push(std::move(out));
}

NodeId Graph::concat_rows(std::span<const NodeId> parts) {
  if (parts.empty()) fail("concat_rows", "no inputs");
  Node out = blank(Op::concat_rows, 0, node(parts[0]).cols);
  for (auto p : parts) {
    const auto& np = node(p);
    if (np.cols != out.cols) fail("concat_rows", "column counts differ");
    out.rows += np.rows;
    out.in.push_back(static_cast<std::uint32_t>(p));
  }
  return push(std::move(out));
}

NodeId Graph::concat_cols(std::span<const NodeId> parts) {
  if (parts.empty()) fail("concat_cols", "no inputs");
  Node out = blank(Op::concat_cols, node(parts[0]).rows, 0);
  for (auto p : parts) {
    const auto& np = node(p);
    if (np.rows != out.rows) fail("concat_cols", "row counts differ");
    out.cols += np.cols;
    out.in.push_back(static_cast<std::uint32_t>(p));
  }
  return push(std::move(out));
}

NodeId Graph::gather_rows(NodeId table, std::vector<std::size_t> ids) {
  const auto& nt = node(table);
  for (auto id : ids)
    if (id >= nt.rows)
      fail("gather_rows", "row id " + std::to_string(id) + " >= " +
                              std::to_string(nt.rows));
  Node out = blank(Op::gather_rows, ids.size(), nt.cols);
  out.in = {static_cast<std::uint32_t>(table)};
  out.index = std::move(ids);
  return push(std::move(out));
}

NodeId Graph::pick(NodeId a, std::vector<std::size_t> cols) {
  const auto& na = node(a);
  if (cols.size() != na.rows) fail("pick", "need one column index per row");
  for (auto c : cols)
    if (c >= na.cols)
      fail("pick", "column " + std::to_string(c) + " >= " +
                       std::to_string(na.cols));
  Node out = blank(Op::pick, na.rows, 1);
  out.in = {static_cast<std::uint32_t>(a)};
  out.index = std::move(cols);
  return push(std::move(out));
}

void Graph::mark_output(std::string name, NodeId id) {
  node(id);
  outputs_[std::move(name)] = id;
}

std::vector<Parameter*> Graph::parameters() const {
  std::vector<Parameter*> out;
  for (const auto& n : nodes_)
    if (n.op == Op::parameter && n.trainable)
      out.push_back(const_cast<Parameter*>(n.param));
  return out;
}

// ---------------------------------------------------------------------------
// Storage access

ConstMat Graph::cref(std::uint32_t index) const {
  const auto& n = nodes_[index];
  if (n.root == kNone) {
    const double* base = n.param ? n.param->value.data().data() : n.value.data();
    return {base, n.rows, n.cols, n.ld};
  }
  const auto& r = nodes_[n.root];
  const double* base = r.param ? r.param->value.data().data() : r.value.data();
  return {base + n.offset, n.rows, n.cols, n.ld};
}

Mat Graph::mref(std::uint32_t index) {
  auto& n = nodes_[index];
  return {n.value.data(), n.rows, n.cols, n.cols};
}

Mat Graph::gref(std::uint32_t index) {
  auto& n = nodes_[index];
  if (n.grad.empty()) n.grad.assign(n.rows * n.cols, 0.0);
  return {n.grad.data(), n.rows, n.cols, n.cols};
}

// ---------------------------------------------------------------------------
// Forward

Graph::Outputs Graph::evaluate(const Inputs& inputs) {
  for (std::uint32_t i = 0; i < nodes_.size(); ++i) {
    auto& n = nodes_[i];
    if (n.op == Op::input) {
      auto it = inputs.find(n.label);
      if (it == inputs.end())
        throw StructuralError(describe(i) + ": input not provided");
      const Tensor& t = it->second;
      if (t.rank() > 2 || t.rows() != n.rows || t.cols() != n.cols)
        throw StructuralError(describe(i) + ": expected " +
                              std::to_string(n.rows) + "x" +
                              std::to_string(n.cols) + ", got " +
                              shape_string(t.shape()));
      n.value = t.values();
    }
    if (n.op == Op::parameter &&
        (n.param->value.rank() > 2 || n.param->value.rows() != n.rows ||
         n.param->value.cols() != n.cols))
      throw StructuralError(describe(i) + ": parameter storage changed shape");
    compute(i);
    if (n.root == kNone && n.op != Op::parameter) {
      for (double v : n.value)
        if (!std::isfinite(v))
          throw NumericError(describe(i) + ": non-finite value");
    }
  }
  evaluated_ = true;
  Outputs out;
  for (const auto& [name, id] : outputs_) out.emplace(name, value(id));
  return out;
}

void Graph::compute(std::uint32_t i) {
  auto& n = nodes_[i];
  switch (n.op) {
    case Op::input:
    case Op::constant:
    case Op::parameter:
    case Op::slice:
    case Op::reshape:
    case Op::detach:
      return;
    default:
      break;
  }
  n.value.assign(n.rows * n.cols, 0.0);
  Mat y = mref(i);
  switch (n.op) {
    case Op::matmul:
      kernels::gemm(cref(n.in[0]), n.ta, cref(n.in[1]), n.tb, y, false);
      break;
    case Op::add:
    case Op::sub: {
      ConstMat a = cref(n.in[0]);
      ConstMat b = cref(n.in[1]);
      double sign = n.op == Op::add ? 1.0 : -1.0;
      for (std::size_t r = 0; r < n.rows; ++r)
        for (std::size_t c = 0; c < n.cols; ++c)
          y(r, c) = a(r, c) + sign * b(r % b.rows, c);
      break;
    }
    case Op::mul: {
      ConstMat a = cref(n.in[0]);
      ConstMat b = cref(n.in[1]);
      for (std::size_t r = 0; r < n.rows; ++r)
        for (std::size_t c = 0; c < n.cols; ++c) y(r, c) = a(r, c) * b(r, c);
      break;
    }
    case Op::scale: {
      ConstMat a = cref(n.in[0]);
      for (std::size_t r = 0; r < n.rows; ++r)
        for (std::size_t c = 0; c < n.cols; ++c) y(r, c) = n.factor * a(r, c);
      break;
    }
    case Op::softmax:
      kernels::softmax_rows(cref(n.in[0]), y);
      break;
    case Op::log_softmax: {
      ConstMat a = cref(n.in[0]);
      for (std::size_t r = 0; r < n.rows; ++r) {
        double mx = a(r, 0);
        for (std::size_t c = 1; c < n.cols; ++c) mx = std::max(mx, a(r, c));
        double total = 0.0;
        for (std::size_t c = 0; c < n.cols; ++c) total += std::exp(a(r, c) - mx);
        double lse = mx + std::log(total);
        for (std::size_t c = 0; c < n.cols; ++c) y(r, c) = a(r, c) - lse;
      }
      break;
    }
    case Op::gelu: {
      ConstMat a = cref(n.in[0]);
      for (std::size_t r = 0; r < n.rows; ++r)
        for (std::size_t c = 0; c < n.cols; ++c) y(r, c) = gelu_value(a(r, c));
      break;
    }
    case Op::layernorm: {
      ConstMat x = cref(n.in[0]);
      ConstMat g = cref(n.in[1]);
      ConstMat b = cref(n.in[2]);
      n.cache.assign(2 * n.rows, 0.0);
      const double width = static_cast<double>(n.cols);
      for (std::size_t r = 0; r < n.rows; ++r) {
        double mean = 0.0;
        for (std::size_t c = 0; c < n.cols; ++c) mean += x(r, c);
        mean /= width;
        double var = 0.0;
        for (std::size_t c = 0; c < n.cols; ++c) {
          double d = x(r, c) - mean;
          var += d * d;
        }
        var /= width;
        double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
        n.cache[2 * r] = mean;
        n.cache[2 * r + 1] = rstd;
        for (std::size_t c = 0; c < n.cols; ++c)
          y(r, c) = (x(r, c) - mean) * rstd * g(0, c) + b(0, c);
      }
      break;
    }
    case Op::mean_rows: {
      ConstMat a = cref(n.in[0]);
      for (std::size_t r = 0; r < a.rows; ++r)
        for (std::size_t c = 0; c < n.cols; ++c) y(0, c) += a(r, c);
      for (std::size_t c = 0; c < n.cols; ++c)
        y(0, c) /= static_cast<double>(a.rows);
      break;
    }
    case Op::sum: {
      ConstMat a = cref(n.in[0]);
      double total = 0.0;
      for (std::size_t r = 0; r < a.rows; ++r)
        for (std::size_t c = 0; c < a.cols; ++c) total += a(r, c);
      y(0, 0) = total;
      break;
    }
    case Op::concat_rows: {
      std::size_t row = 0;
      for (auto src : n.in) {
        ConstMat a = cref(src);
        for (std::size_t r = 0; r < a.rows; ++r, ++row)
          for (std::size_t c = 0; c < a.cols; ++c) y(row, c) = a(r, c);
      }
      break;
    }
    case Op::concat_cols: {
      std::size_t col = 0;
      for (auto src : n.in) {
        ConstMat a = cref(src);
        for (std::size_t r = 0; r < a.rows; ++r)
          for (std::size_t c = 0; c < a.cols; ++c) y(r, col + c) = a(r, c);
        col += a.cols;
      }
      break;
    }
    case Op::gather_rows: {
      ConstMat t = cref(n.in[0]);
      for (std::size_t r = 0; r < n.rows; ++r)
        for (std::size_t c = 0; c < n.cols; ++c) y(r, c) = t(n.index[r], c);
      break;
    }
    case Op::pick: {
      ConstMat a = cref(n.in[0]);
      for (std::size_t r = 0; r < n.rows; ++r) y(r, 0) = a(r, n.index[r]);
      break;
    }
    default:
      break;
  }
}

// ---------------------------------------------------------------------------
// Backward

void Graph::backward(NodeId output) {
  if (!evaluated_)
    throw StructuralError("backward called before evaluate");
  auto out = static_cast<std::uint32_t>(output);
  const auto& no = node(output);
  if (no.rows != 1 || no.cols != 1)
    throw StructuralError(describe(out) + ": backward needs a scalar output, got " +
                          std::to_string(no.rows) + "x" + std::to_string(no.cols));
  for (auto& n : nodes_) n.grad.clear();
  gref(out)(0, 0) = 1.0;
  for (std::uint32_t i = out + 1; i-- > 0;) {
    if (nodes_[i].grad.empty()) continue;
    propagate(i);
  }
}

void Graph::propagate(std::uint32_t i) {
  // Input gradient buffers may reallocate other nodes' vectors only through
  // gref on distinct nodes, so `n` stays valid.
  auto& n = nodes_[i];
  ConstMat dy{n.grad.data(), n.rows, n.cols, n.cols};
  switch (n.op) {
    case Op::input:
    case Op::constant:
    case Op::detach:
      return;
    case Op::parameter: {
      if (!n.trainable) return;
      // Trainable leaves were bound through a non-const reference.
      auto* p = const_cast<Parameter*>(n.param);
      if (p->grad.shape() != p->value.shape()) p->grad = Tensor(p->value.shape());
      auto g = p->grad.data();
      for (std::size_t k = 0; k < n.grad.size(); ++k) g[k] += n.grad[k];
      return;
    }
    case Op::matmul: {
      using kernels::Trans;
      auto flip = [](Trans t) { return t == Trans::no ? Trans::yes : Trans::no; };
      ConstMat a = cref(n.in[0]);
      ConstMat b = cref(n.in[1]);
      Mat da = gref(n.in[0]);
      if (n.ta == Trans::no)
        kernels::gemm(dy, Trans::no, b, flip(n.tb), da, true);
      else
        kernels::gemm(b, n.tb, dy, Trans::yes, da, true);
      Mat db = gref(n.in[1]);
      if (n.tb == Trans::no)
        kernels::gemm(a, flip(n.ta), dy, Trans::no, db, true);
      else
        kernels::gemm(dy, Trans::yes, a, n.ta, db, true);
      return;
    }
    case Op::add:
    case Op::sub: {
      Mat da = gref(n.in[0]);
      Mat db = gref(n.in[1]);
      double sign = n.op == Op::add ? 1.0 : -1.0;
      for (std::size_t r = 0; r < n.rows; ++r)
        for (std::size_t c = 0; c < n.cols; ++c) {
          da(r, c) += dy(r, c);
          db(r % db.rows, c) += sign * dy(r, c);
        }
      return;
    }
    case Op::mul: {
      ConstMat a = cref(n.in[0]);
      ConstMat b = cref(n.in[1]);
      Mat da = gref(n.in[0]);
      Mat db = gref(n.in[1]);
      for (std::size_t r = 0; r < n.rows; ++r)
        for (std::size_t c = 0; c < n.cols; ++c) {
          da(r, c) += dy(r, c) * b(r, c);
          db(r, c) += dy(r, c) * a(r, c);
        }
      return;
    }
    case Op::scale: {
      Mat da = gref(n.in[0]);
      for (std::size_t r = 0; r < n.rows; ++r)
        for (std::size_t c = 0; c < n.cols; ++c) da(r, c) += n.factor * dy(r, c);
      return;
    }
    case Op::softmax: {
      ConstMat y = cref(i);
      Mat da = gref(n.in[0]);
      for (std::size_t r = 0; r < n.rows; ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < n.cols; ++c) dot += dy(r, c) * y(r, c);
        for (std::size_t c = 0; c < n.cols; ++c)
          da(r, c) += y(r, c) * (dy(r, c) - dot);
      }
      return;
    }
    case Op::log_softmax: {
      ConstMat y = cref(i);
      Mat da = gref(n.in[0]);
      for (std::size_t r = 0; r < n.rows; ++r) {
        double total = 0.0;
        for (std::size_t c = 0; c < n.cols; ++c) total += dy(r, c);
        for (std::size_t c = 0; c < n.cols; ++c)
          da(r, c) += dy(r, c) - std::exp(y(r, c)) * total;
      }
      return;
    }
    case Op::gelu: {
      ConstMat a = cref(n.in[0]);
      Mat da = gref(n.in[0]);
      for (std::size_t r = 0; r < n.rows; ++r)
        for (std::size_t c = 0; c < n.cols; ++c)
          da(r, c) += dy(r, c) * gelu_derivative(a(r, c));
      return;
    }
    case Op::layernorm: {
      ConstMat x = cref(n.in[0]);
      ConstMat g = cref(n.in[1]);
      Mat dx = gref(n.in[0]);
      Mat dg = gref(n.in[1]);
      Mat db = gref(n.in[2]);
      const double width = static_cast<double>(n.cols);
      std::vector<double> xhat(n.cols), dxhat(n.cols);
      for (std::size_t r = 0; r < n.rows; ++r) {
        double mean = n.cache[2 * r];
        double rstd = n.cache[2 * r + 1];
        double sum_d = 0.0, sum_dx = 0.0;
        for (std::size_t c = 0; c < n.cols; ++c) {
          xhat[c] = (x(r, c) - mean) * rstd;
          dxhat[c] = dy(r, c) * g(0, c);
          dg(0, c) += dy(r, c) * xhat[c];
          db(0, c) += dy(r, c);
          sum_d += dxhat[c];
          sum_dx += dxhat[c] * xhat[c];
        }
        for (std::size_t c = 0; c < n.cols; ++c)
          dx(r, c) += rstd * (dxhat[c] - sum_d / width - xhat[c] * sum_dx / width);
      }
      return;
    }
    case Op::slice: {
      Mat da = gref(n.in[0]);
      for (std::size_t r = 0; r < n.rows; ++r)
        for (std::size_t c = 0; c < n.cols; ++c)
          da(n.view_row + r, n.view_col + c) += dy(r, c);
      return;
    }
    case Op::reshape: {
      gref(n.in[0]);
      auto& g = nodes_[n.in[0]].grad;
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
      return;
    }
    case Op::mean_rows: {
      Mat da = gref(n.in[0]);
      const double inv = 1.0 / static_cast<double>(da.rows);
      for (std::size_t r = 0; r < da.rows; ++r)
        for (std::size_t c = 0; c < n.cols; ++c) da(r, c) += dy(0, c) * inv;
      return;
    }
    case Op::sum: {
      Mat da = gref(n.in[0]);
      for (std::size_t r = 0; r < da.rows; ++r)
        for (std::size_t c = 0; c < da.cols; ++c) da(r, c) += dy(0, 0);
      return;
    }
    case Op::concat_rows: {
      std::size_t row = 0;
      for (auto src : n.in) {
        Mat da = gref(src);
        for (std::size_t r = 0; r < da.rows; ++r, ++row)
          for (std::size_t c = 0; c < da.cols; ++c) da(r, c) += dy(row, c);
      }
      return;
    }
    case Op::concat_cols: {
      std::size_t col = 0;
      for (auto src : n.in) {
        Mat da = gref(src);
        for (std::size_t r = 0; r < da.rows; ++r)
          for (std::size_t c = 0; c < da.cols; ++c) da(r, c) += dy(r, col + c);
        col += da.cols;
      }
      return;
    }
    case Op::gather_rows: {
      Mat dt = gref(n.in[0]);
      for (std::size_t r = 0; r < n.rows; ++r)
        for (std::size_t c = 0; c < n.cols; ++c) dt(n.index[r], c) += dy(r, c);
      return;
    }
    case Op::pick: {
      Mat da = gref(n.in[0]);
      for (std::size_t r = 0; r < n.rows; ++r) da(r, n.index[r]) += dy(r, 0);
      return;
    }
  }
}

// ---------------------------------------------------------------------------
// Readback

Tensor Graph::value(NodeId id) const {
  if (!evaluated_) throw StructuralError("graph has not been evaluated");
  auto i = static_cast<std::uint32_t>(id);
  node(id);
  ConstMat v = cref(i);
  Tensor out({v.rows, v.cols});
  for (std::size_t r = 0; r < v.rows; ++r)
    for (std::size_t c = 0; c < v.cols; ++c) out.at(r, c) = v(r, c);
  return out;
}

double Graph::scalar(NodeId id) const {
  const auto& n = node(id);
  if (n.rows != 1 || n.cols != 1)
    throw StructuralError(describe(static_cast<std::uint32_t>(id)) +
                          ": not a scalar");
  return value(id)[0];
}

Tensor Graph::grad(NodeId id) const {
  const auto& n = node(id);
  Tensor out({n.rows, n.cols});
  if (!n.grad.empty()) std::copy(n.grad.begin(), n.grad.end(), out.data().begin());
  return out;
}

}  // namespace instatune
