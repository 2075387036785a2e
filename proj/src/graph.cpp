#include "crest/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>

namespace crest::grad {

namespace {

bool all_finite(const std::vector<float>& v) {
  for (float x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

constexpr float kLayerNormEps = 1e-5f;

// Row-wise ops treat a 1-d tensor as a single row.
std::pair<int, int> row_col(const Tensor& t) {
  if (t.shape.size() == 1) return {1, static_cast<int>(t.numel())};
  return {t.rows(), t.cols()};
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kConstant: return "constant";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kMatMul: return "matmul";
    case Op::kTranspose: return "transpose";
    case Op::kConcatRows: return "concat-rows";
    case Op::kGatherRows: return "gather-rows";
    case Op::kTanh: return "tanh";
    case Op::kRelu: return "relu";
    case Op::kSigmoid: return "sigmoid";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kRowSoftmax: return "row-softmax";
    case Op::kCrossEntropyLogits: return "cross-entropy-logits";
    case Op::kLayerNorm: return "layer-norm";
    case Op::kScaleRows: return "scale-rows";
    case Op::kCustom: return "custom";
  }
  return "?";
}

void Graph::check_input(int id, const char* what) const {
  if (id < 0 || id >= static_cast<int>(nodes_.size())) {
    throw ShapeError(std::string("invalid ") + what + " node id " + std::to_string(id));
  }
}

void Graph::shape_fail(int node_id, Op op, const std::string& detail) const {
  throw ShapeError("node " + std::to_string(node_id) + " (" + op_name(op) + "): " + detail);
}

int Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  forwarded_ = false;
  return static_cast<int>(nodes_.size()) - 1;
}

int Graph::leaf(TensorPtr t) {
  Node n;
  n.op = Op::kLeaf;
  n.leaf = std::move(t);
  n.value = *n.leaf;
  return push(std::move(n));
}

int Graph::constant(Tensor t) {
  Node n;
  n.op = Op::kConstant;
  n.value = std::move(t);
  return push(std::move(n));
}

int Graph::add(int a, int b) {
  check_input(a, "add lhs");
  check_input(b, "add rhs");
  Node n;
  n.op = Op::kAdd;
  n.inputs = {a, b};
  if (!nodes_[a].value.same_shape(nodes_[b].value)) {
    shape_fail(static_cast<int>(nodes_.size()), Op::kAdd,
               "operand shapes differ: " + nodes_[a].value.shape_str() + " vs " +
                   nodes_[b].value.shape_str());
  }
  n.value = Tensor(nodes_[a].value.shape);
  return push(std::move(n));
}

int Graph::sub(int a, int b) {
  check_input(a, "sub lhs");
  check_input(b, "sub rhs");
  Node n;
  n.op = Op::kSub;
  n.inputs = {a, b};
  if (!nodes_[a].value.same_shape(nodes_[b].value)) {
    shape_fail(static_cast<int>(nodes_.size()), Op::kSub,
               "operand shapes differ: " + nodes_[a].value.shape_str() + " vs " +
                   nodes_[b].value.shape_str());
  }
  n.value = Tensor(nodes_[a].value.shape);
  return push(std::move(n));
}

int Graph::mul(int a, int b) {
  check_input(a, "mul lhs");
  check_input(b, "mul rhs");
  Node n;
  n.op = Op::kMul;
  n.inputs = {a, b};
  if (!nodes_[a].value.same_shape(nodes_[b].value)) {
    shape_fail(static_cast<int>(nodes_.size()), Op::kMul,
               "operand shapes differ: " + nodes_[a].value.shape_str() + " vs " +
                   nodes_[b].value.shape_str());
  }
  n.value = Tensor(nodes_[a].value.shape);
  return push(std::move(n));
}

int Graph::matmul(int a, int b) {
  check_input(a, "matmul lhs");
  check_input(b, "matmul rhs");
  const Tensor& A = nodes_[a].value;
  const Tensor& B = nodes_[b].value;
  if (A.shape.size() != 2 || B.shape.size() != 2) {
    shape_fail(static_cast<int>(nodes_.size()), Op::kMatMul,
               "operands must be 2-d, got " + A.shape_str() + " and " + B.shape_str());
  }
  if (A.shape[1] != B.shape[0]) {
    shape_fail(static_cast<int>(nodes_.size()), Op::kMatMul,
               "inner dimensions differ: lhs " + A.shape_str() + ", rhs " + B.shape_str());
  }
  Node n;
  n.op = Op::kMatMul;
  n.inputs = {a, b};
  n.value = Tensor({A.shape[0], B.shape[1]});
  return push(std::move(n));
}

int Graph::transpose(int a) {
  check_input(a, "transpose input");
  const Tensor& A = nodes_[a].value;
  if (A.shape.size() != 2) {
    shape_fail(static_cast<int>(nodes_.size()), Op::kTranspose,
               "operand must be 2-d, got " + A.shape_str());
  }
  Node n;
  n.op = Op::kTranspose;
  n.inputs = {a};
  n.value = Tensor({A.shape[1], A.shape[0]});
  return push(std::move(n));
}

int Graph::concat_rows(int a, int b) {
  check_input(a, "concat lhs");
  check_input(b, "concat rhs");
  const Tensor& A = nodes_[a].value;
  const Tensor& B = nodes_[b].value;
  if (A.shape.size() != 2 || B.shape.size() != 2 || A.shape[1] != B.shape[1]) {
    shape_fail(static_cast<int>(nodes_.size()), Op::kConcatRows,
               "column counts differ: " + A.shape_str() + " vs " + B.shape_str());
  }
  Node n;
  n.op = Op::kConcatRows;
  n.inputs = {a, b};
  n.value = Tensor({A.shape[0] + B.shape[0], A.shape[1]});
  return push(std::move(n));
}

int Graph::gather_rows(int table, std::vector<int> row_indices) {
  check_input(table, "gather table");
  const Tensor& T = nodes_[table].value;
  if (T.shape.size() != 2) {
    shape_fail(static_cast<int>(nodes_.size()), Op::kGatherRows,
               "table must be 2-d, got " + T.shape_str());
  }
  for (int r : row_indices) {
    if (r < 0 || r >= T.shape[0]) {
      shape_fail(static_cast<int>(nodes_.size()), Op::kGatherRows,
                 "row index " + std::to_string(r) + " outside table " + T.shape_str());
    }
  }
  Node n;
  n.op = Op::kGatherRows;
  n.inputs = {table};
  n.indices = std::move(row_indices);
  n.value = Tensor({static_cast<int>(n.indices.size()), T.shape[1]});
  return push(std::move(n));
}

#define CREST_UNARY_BUILDER(fn, opk)                  \
  int Graph::fn(int a) {                              \
    check_input(a, op_name(opk));                     \
    Node n;                                           \
    n.op = opk;                                       \
    n.inputs = {a};                                   \
    n.value = Tensor(nodes_[a].value.shape);          \
    return push(std::move(n));                        \
  }

CREST_UNARY_BUILDER(tanh, Op::kTanh)
CREST_UNARY_BUILDER(relu, Op::kRelu)
CREST_UNARY_BUILDER(sigmoid, Op::kSigmoid)
CREST_UNARY_BUILDER(exp, Op::kExp)
CREST_UNARY_BUILDER(log, Op::kLog)
#undef CREST_UNARY_BUILDER

int Graph::sum(int a) {
  check_input(a, "sum input");
  Node n;
  n.op = Op::kSum;
  n.inputs = {a};
  n.value = Tensor({1});
  return push(std::move(n));
}

int Graph::mean(int a) {
  check_input(a, "mean input");
  Node n;
  n.op = Op::kMean;
  n.inputs = {a};
  n.value = Tensor({1});
  return push(std::move(n));
}

int Graph::row_softmax(int a) {
  check_input(a, "softmax input");
  const Tensor& A = nodes_[a].value;
  if (A.shape.size() > 2) {
    shape_fail(static_cast<int>(nodes_.size()), Op::kRowSoftmax,
               "operand must be 1-d or 2-d, got " + A.shape_str());
  }
  Node n;
  n.op = Op::kRowSoftmax;
  n.inputs = {a};
  n.value = Tensor(A.shape);
  return push(std::move(n));
}

int Graph::cross_entropy_logits(int logits, std::vector<int> targets) {
  check_input(logits, "cross-entropy logits");
  const Tensor& L = nodes_[logits].value;
  if (L.shape.size() != 2) {
    shape_fail(static_cast<int>(nodes_.size()), Op::kCrossEntropyLogits,
               "logits must be 2-d, got " + L.shape_str());
  }
  if (static_cast<int>(targets.size()) != L.shape[0]) {
    shape_fail(static_cast<int>(nodes_.size()), Op::kCrossEntropyLogits,
               "got " + std::to_string(targets.size()) + " targets for logits " + L.shape_str());
  }
  for (int t : targets) {
    if (t < 0 || t >= L.shape[1]) {
      shape_fail(static_cast<int>(nodes_.size()), Op::kCrossEntropyLogits,
                 "target class " + std::to_string(t) + " outside logits " + L.shape_str());
    }
  }
  Node n;
  n.op = Op::kCrossEntropyLogits;
  n.inputs = {logits};
  n.indices = std::move(targets);
  n.value = Tensor({1});
  return push(std::move(n));
}

int Graph::layer_norm(int a, int gain, int bias) {
  check_input(a, "layer-norm input");
  check_input(gain, "layer-norm gain");
  check_input(bias, "layer-norm bias");
  const Tensor& A = nodes_[a].value;
  const int d = row_col(A).second;
  if (nodes_[gain].value.numel() != static_cast<std::size_t>(d) ||
      nodes_[bias].value.numel() != static_cast<std::size_t>(d)) {
    shape_fail(static_cast<int>(nodes_.size()), Op::kLayerNorm,
               "gain/bias must have " + std::to_string(d) + " entries for input " + A.shape_str());
  }
  Node n;
  n.op = Op::kLayerNorm;
  n.inputs = {a, gain, bias};
  n.value = Tensor(A.shape);
  return push(std::move(n));
}

int Graph::scale_rows(int a, int v) {
  check_input(a, "scale-rows input");
  check_input(v, "scale-rows vector");
  const Tensor& A = nodes_[a].value;
  if (nodes_[v].value.numel() != static_cast<std::size_t>(A.rows())) {
    shape_fail(static_cast<int>(nodes_.size()), Op::kScaleRows,
               "vector of " + std::to_string(nodes_[v].value.numel()) +
                   " entries cannot scale rows of " + A.shape_str());
  }
  Node n;
  n.op = Op::kScaleRows;
  n.inputs = {a, v};
  n.value = Tensor(A.shape);
  return push(std::move(n));
}

int Graph::custom(std::shared_ptr<CustomOp> op, std::vector<int> inputs) {
  for (int id : inputs) check_input(id, op->name());
  std::vector<const Tensor*> ins;
  ins.reserve(inputs.size());
  for (int id : inputs) ins.push_back(&nodes_[id].value);
  Node n;
  n.op = Op::kCustom;
  n.inputs = std::move(inputs);
  n.custom = std::move(op);
  n.value = n.custom->forward(ins);
  return push(std::move(n));
}

int Graph::scale(int a, float c) {
  check_input(a, "scale input");
  return mul(a, constant(Tensor(nodes_[a].value.shape, c)));
}

int Graph::add_row_broadcast(int a, int bias) {
  check_input(a, "bias input");
  check_input(bias, "bias vector");
  const Tensor& A = nodes_[a].value;
  const Tensor& B = nodes_[bias].value;
  if (A.shape.size() != 2 || B.shape.size() != 2 || B.shape[0] != 1 || B.shape[1] != A.shape[1]) {
    shape_fail(static_cast<int>(nodes_.size()), Op::kAdd,
               "row-broadcast bias needs (1x" + std::to_string(A.cols()) + "), got " + B.shape_str());
  }
  const int ones = constant(Tensor({A.shape[0], 1}, 1.0f));
  return add(a, matmul(ones, bias));
}

void Graph::mark_output(const std::string& name, int id) {
  check_input(id, "output");
  outputs_.emplace_back(name, id);
}

void Graph::forward() {
  for (int i = 0; i < static_cast<int>(nodes_.size()); ++i) forward_node(i);
  forwarded_ = true;
}

void Graph::forward_node(int id) {
  Node& n = nodes_[id];
  auto in = [&](int k) -> const Tensor& { return nodes_[n.inputs[k]].value; };
  switch (n.op) {
    case Op::kLeaf:
      n.value = *n.leaf;
      break;
    case Op::kConstant:
      break;
    case Op::kAdd:
      for (std::size_t i = 0; i < n.value.numel(); ++i) n.value.data[i] = in(0).data[i] + in(1).data[i];
      break;
    case Op::kSub:
      for (std::size_t i = 0; i < n.value.numel(); ++i) n.value.data[i] = in(0).data[i] - in(1).data[i];
      break;
    case Op::kMul:
      for (std::size_t i = 0; i < n.value.numel(); ++i) n.value.data[i] = in(0).data[i] * in(1).data[i];
      break;
    case Op::kMatMul: {
      const Tensor& A = in(0);
      const Tensor& B = in(1);
      const int r = A.shape[0], k = A.shape[1], c = B.shape[1];
      // row-accumulating order keeps both operands contiguous in the inner loop
      for (int i = 0; i < r; ++i) {
        float* out = n.value.data.data() + static_cast<std::size_t>(i) * c;
        std::fill(out, out + c, 0.0f);
        for (int t = 0; t < k; ++t) {
          const float a = A.data[static_cast<std::size_t>(i) * k + t];
          const float* brow = B.data.data() + static_cast<std::size_t>(t) * c;
          for (int j = 0; j < c; ++j) out[j] += a * brow[j];
        }
      }
      break;
    }
    case Op::kTranspose: {
      const Tensor& A = in(0);
      const int r = A.shape[0], c = A.shape[1];
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) n.value.data[j * r + i] = A.data[i * c + j];
      break;
    }
    case Op::kConcatRows: {
      const Tensor& A = in(0);
      const Tensor& B = in(1);
      std::copy(A.data.begin(), A.data.end(), n.value.data.begin());
      std::copy(B.data.begin(), B.data.end(), n.value.data.begin() + A.data.size());
      break;
    }
    case Op::kGatherRows: {
      const Tensor& T = in(0);
      const int d = T.shape[1];
      for (std::size_t i = 0; i < n.indices.size(); ++i) {
        std::copy(T.data.begin() + n.indices[i] * d, T.data.begin() + (n.indices[i] + 1) * d,
                  n.value.data.begin() + i * d);
      }
      break;
    }
    case Op::kTanh:
      for (std::size_t i = 0; i < n.value.numel(); ++i) n.value.data[i] = std::tanh(in(0).data[i]);
      break;
    case Op::kRelu:
      for (std::size_t i = 0; i < n.value.numel(); ++i) n.value.data[i] = std::max(0.0f, in(0).data[i]);
      break;
    case Op::kSigmoid:
      for (std::size_t i = 0; i < n.value.numel(); ++i)
        n.value.data[i] = 1.0f / (1.0f + std::exp(-in(0).data[i]));
      break;
    case Op::kExp:
      for (std::size_t i = 0; i < n.value.numel(); ++i) n.value.data[i] = std::exp(in(0).data[i]);
      break;
    case Op::kLog: {
      const Tensor& A = in(0);
      for (std::size_t i = 0; i < A.numel(); ++i) {
        if (!std::isfinite(A.data[i]) || A.data[i] <= 0.0f) {
          throw NumericError("node " + std::to_string(id) + " (log): input " +
                             std::to_string(A.data[i]) + " outside domain");
        }
        n.value.data[i] = std::log(A.data[i]);
      }
      break;
    }
    case Op::kSum: {
      float acc = 0.0f;
      for (float x : in(0).data) acc += x;
      n.value.data[0] = acc;
      break;
    }
    case Op::kMean: {
      float acc = 0.0f;
      for (float x : in(0).data) acc += x;
      n.value.data[0] = acc / static_cast<float>(in(0).numel());
      break;
    }
    case Op::kRowSoftmax: {
      const Tensor& A = in(0);
      if (!all_finite(A.data)) {
        throw NumericError("node " + std::to_string(id) + " (row-softmax): non-finite input");
      }
      const auto [r, c] = row_col(A);
      for (int i = 0; i < r; ++i) {
        float mx = A.data[i * c];
        for (int j = 1; j < c; ++j) mx = std::max(mx, A.data[i * c + j]);
        float z = 0.0f;
        for (int j = 0; j < c; ++j) {
          const float e = std::exp(A.data[i * c + j] - mx);
          n.value.data[i * c + j] = e;
          z += e;
        }
        for (int j = 0; j < c; ++j) n.value.data[i * c + j] /= z;
      }
      break;
    }
    case Op::kCrossEntropyLogits: {
      const Tensor& L = in(0);
      if (!all_finite(L.data)) {
        throw NumericError("node " + std::to_string(id) + " (cross-entropy-logits): non-finite input");
      }
      const int r = L.shape[0], c = L.shape[1];
      n.cache.assign(L.numel(), 0.0f);  // softmax probabilities
      float loss = 0.0f;
      for (int i = 0; i < r; ++i) {
        float mx = L.data[i * c];
        for (int j = 1; j < c; ++j) mx = std::max(mx, L.data[i * c + j]);
        float z = 0.0f;
        for (int j = 0; j < c; ++j) z += std::exp(L.data[i * c + j] - mx);
        const float logz = std::log(z) + mx;
        for (int j = 0; j < c; ++j) n.cache[i * c + j] = std::exp(L.data[i * c + j] - logz);
        loss += logz - L.data[i * c + n.indices[i]];
      }
      n.value.data[0] = loss / static_cast<float>(r);
      break;
    }
    case Op::kLayerNorm: {
      const Tensor& A = in(0);
      const Tensor& G = in(1);
      const Tensor& B = in(2);
      const auto [r, c] = row_col(A);
      n.cache.assign(A.numel() + r, 0.0f);  // normalized values, then inv-std per row
      for (int i = 0; i < r; ++i) {
        float m = 0.0f;
        for (int j = 0; j < c; ++j) m += A.data[i * c + j];
        m /= static_cast<float>(c);
        float var = 0.0f;
        for (int j = 0; j < c; ++j) {
          const float d = A.data[i * c + j] - m;
          var += d * d;
        }
        var /= static_cast<float>(c);
        const float inv = 1.0f / std::sqrt(var + kLayerNormEps);
        n.cache[A.numel() + i] = inv;
        for (int j = 0; j < c; ++j) {
          const float xn = (A.data[i * c + j] - m) * inv;
          n.cache[i * c + j] = xn;
          n.value.data[i * c + j] = xn * G.data[j] + B.data[j];
        }
      }
      break;
    }
    case Op::kScaleRows: {
      const Tensor& A = in(0);
      const Tensor& V = in(1);
      const int c = A.cols();
      for (int i = 0; i < A.rows(); ++i)
        for (int j = 0; j < c; ++j) n.value.data[i * c + j] = A.data[i * c + j] * V.data[i];
      break;
    }
    case Op::kCustom: {
      std::vector<const Tensor*> ins;
      ins.reserve(n.inputs.size());
      for (int k : n.inputs) ins.push_back(&nodes_[k].value);
      n.value = n.custom->forward(ins);
      break;
    }
  }
}

void Graph::backward(int loss_node) {
  check_input(loss_node, "loss");
  if (!forwarded_) forward();
  if (nodes_[loss_node].value.numel() != 1) {
    throw ShapeError("backward requires a scalar loss, node " + std::to_string(loss_node) +
                     " has shape " + nodes_[loss_node].value.shape_str());
  }
  for (auto& n : nodes_) n.grad.assign(n.value.numel(), 0.0f);
  nodes_[loss_node].grad[0] = 1.0f;
  for (int id = loss_node; id >= 0; --id) backward_node(id);
  for (auto& n : nodes_) {
    if (n.op == Op::kLeaf && n.leaf->requires_grad) {
      n.leaf->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) n.leaf->grad[i] += n.grad[i];
    }
  }
}

void Graph::backward_node(int id) {
  Node& n = nodes_[id];
  bool any = false;
  for (float g : n.grad) {
    if (g != 0.0f) {
      any = true;
      break;
    }
  }
  if (!any) return;
  auto in_val = [&](int k) -> const Tensor& { return nodes_[n.inputs[k]].value; };
  auto in_grad = [&](int k) -> std::vector<float>& { return nodes_[n.inputs[k]].grad; };
  switch (n.op) {
    case Op::kLeaf:
    case Op::kConstant:
      break;
    case Op::kAdd:
      for (std::size_t i = 0; i < n.grad.size(); ++i) {
        in_grad(0)[i] += n.grad[i];
        in_grad(1)[i] += n.grad[i];
      }
      break;
    case Op::kSub:
      for (std::size_t i = 0; i < n.grad.size(); ++i) {
        in_grad(0)[i] += n.grad[i];
        in_grad(1)[i] -= n.grad[i];
      }
      break;
    case Op::kMul:
      for (std::size_t i = 0; i < n.grad.size(); ++i) {
        in_grad(0)[i] += n.grad[i] * in_val(1).data[i];
        in_grad(1)[i] += n.grad[i] * in_val(0).data[i];
      }
      break;
    case Op::kMatMul: {
      const Tensor& A = in_val(0);
      const Tensor& B = in_val(1);
      const int r = A.shape[0], k = A.shape[1], c = B.shape[1];
      for (int i = 0; i < r; ++i)
        for (int t = 0; t < k; ++t) {
          const float* grow = n.grad.data() + static_cast<std::size_t>(i) * c;
          const float* brow = B.data.data() + static_cast<std::size_t>(t) * c;
          float acc = 0.0f;
          for (int j = 0; j < c; ++j) acc += grow[j] * brow[j];
          in_grad(0)[static_cast<std::size_t>(i) * k + t] += acc;
        }
      for (int i = 0; i < r; ++i)
        for (int t = 0; t < k; ++t) {
          const float a = A.data[static_cast<std::size_t>(i) * k + t];
          const float* grow = n.grad.data() + static_cast<std::size_t>(i) * c;
          float* out = in_grad(1).data() + static_cast<std::size_t>(t) * c;
          for (int j = 0; j < c; ++j) out[j] += a * grow[j];
        }
      break;
    }
    case Op::kTranspose: {
      const int r = in_val(0).shape[0], c = in_val(0).shape[1];
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) in_grad(0)[i * c + j] += n.grad[j * r + i];
      break;
    }
    case Op::kConcatRows: {
      const std::size_t na = in_val(0).numel();
      for (std::size_t i = 0; i < na; ++i) in_grad(0)[i] += n.grad[i];
      for (std::size_t i = 0; i < in_val(1).numel(); ++i) in_grad(1)[i] += n.grad[na + i];
      break;
    }
    case Op::kGatherRows: {
      const int d = in_val(0).shape[1];
      for (std::size_t i = 0; i < n.indices.size(); ++i)
        for (int j = 0; j < d; ++j) in_grad(0)[n.indices[i] * d + j] += n.grad[i * d + j];
      break;
    }
    case Op::kTanh:
      for (std::size_t i = 0; i < n.grad.size(); ++i)
        in_grad(0)[i] += n.grad[i] * (1.0f - n.value.data[i] * n.value.data[i]);
      break;
    case Op::kRelu:
      for (std::size_t i = 0; i < n.grad.size(); ++i)
        in_grad(0)[i] += in_val(0).data[i] > 0.0f ? n.grad[i] : 0.0f;
      break;
    case Op::kSigmoid:
      for (std::size_t i = 0; i < n.grad.size(); ++i)
        in_grad(0)[i] += n.grad[i] * n.value.data[i] * (1.0f - n.value.data[i]);
      break;
    case Op::kExp:
      for (std::size_t i = 0; i < n.grad.size(); ++i) in_grad(0)[i] += n.grad[i] * n.value.data[i];
      break;
    case Op::kLog:
      for (std::size_t i = 0; i < n.grad.size(); ++i) in_grad(0)[i] += n.grad[i] / in_val(0).data[i];
      break;
    case Op::kSum:
      for (std::size_t i = 0; i < in_val(0).numel(); ++i) in_grad(0)[i] += n.grad[0];
      break;
    case Op::kMean: {
      const float s = n.grad[0] / static_cast<float>(in_val(0).numel());
      for (std::size_t i = 0; i < in_val(0).numel(); ++i) in_grad(0)[i] += s;
      break;
    }
    case Op::kRowSoftmax: {
      const auto [r, c] = row_col(n.value);
      for (int i = 0; i < r; ++i) {
        float dot = 0.0f;
        for (int j = 0; j < c; ++j) dot += n.grad[i * c + j] * n.value.data[i * c + j];
        for (int j = 0; j < c; ++j)
          in_grad(0)[i * c + j] += n.value.data[i * c + j] * (n.grad[i * c + j] - dot);
      }
      break;
    }
    case Op::kCrossEntropyLogits: {
      const int r = in_val(0).shape[0], c = in_val(0).shape[1];
      const float s = n.grad[0] / static_cast<float>(r);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) {
          const float onehot = j == n.indices[i] ? 1.0f : 0.0f;
          in_grad(0)[i * c + j] += s * (n.cache[i * c + j] - onehot);
        }
      break;
    }
    case Op::kLayerNorm: {
      const Tensor& A = in_val(0);
      const Tensor& G = in_val(1);
      const auto [r, c] = row_col(A);
      for (int i = 0; i < r; ++i) {
        const float inv = n.cache[A.numel() + i];
        float mean_h = 0.0f, mean_hx = 0.0f;
        for (int j = 0; j < c; ++j) {
          const float h = n.grad[i * c + j] * G.data[j];
          mean_h += h;
          mean_hx += h * n.cache[i * c + j];
        }
        mean_h /= static_cast<float>(c);
        mean_hx /= static_cast<float>(c);
        for (int j = 0; j < c; ++j) {
          const float h = n.grad[i * c + j] * G.data[j];
          in_grad(0)[i * c + j] += inv * (h - mean_h - n.cache[i * c + j] * mean_hx);
          in_grad(1)[j] += n.grad[i * c + j] * n.cache[i * c + j];
          in_grad(2)[j] += n.grad[i * c + j];
        }
      }
      break;
    }
    case Op::kScaleRows: {
      const Tensor& A = in_val(0);
      const Tensor& V = in_val(1);
      const int c = A.cols();
      for (int i = 0; i < A.rows(); ++i) {
        float acc = 0.0f;
        for (int j = 0; j < c; ++j) {
          in_grad(0)[i * c + j] += n.grad[i * c + j] * V.data[i];
          acc += n.grad[i * c + j] * A.data[i * c + j];
        }
        in_grad(1)[i] += acc;
      }
      break;
    }
    case Op::kCustom: {
      std::vector<const Tensor*> ins;
      ins.reserve(n.inputs.size());
      for (int k : n.inputs) ins.push_back(&nodes_[k].value);
      auto grads = n.custom->backward(ins, n.value, n.grad);
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        for (std::size_t i = 0; i < grads[k].size(); ++i) in_grad(static_cast<int>(k))[i] += grads[k][i];
      }
      break;
    }
  }
}

}  // namespace crest::grad
