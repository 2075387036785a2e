#pragma once

#include <memory>
#include <string>
#include <vector>

#include "crest/tensor.hpp"

namespace crest::grad {

enum class Op {
  kLeaf,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kMatMul,
  kTranspose,
  kConcatRows,
  kGatherRows,
  kTanh,
  kRelu,
  kSigmoid,
  kExp,
  kLog,
  kSum,
  kMean,
  kRowSoftmax,
  kCrossEntropyLogits,
  kLayerNorm,
  kScaleRows,
  kCustom,
};

const char* op_name(Op op);

// Extension point for differentiable operations that are not graph primitives
// (the structured SparseMAP layer plugs in through this). One instance per
// node; forward may cache whatever backward needs.
class CustomOp {
 public:
  virtual ~CustomOp() = default;
  virtual const char* name() const = 0;
  virtual Tensor forward(const std::vector<const Tensor*>& inputs) = 0;
  // Returns one gradient buffer per input, each matching that input's numel.
  virtual std::vector<std::vector<float>> backward(const std::vector<const Tensor*>& inputs,
                                                   const Tensor& output,
                                                   const std::vector<float>& out_grad) = 0;
};

struct Node {
  Op op;
  std::vector<int> inputs;
  Tensor value;
  std::vector<float> grad;
  TensorPtr leaf;               // kLeaf only
  std::vector<int> indices;     // kGatherRows rows / kCrossEntropyLogits targets
  std::shared_ptr<CustomOp> custom;
  std::vector<float> cache;     // op-specific forward intermediates
};

// Reverse-mode tape over float32 tensors. Nodes are appended in topological
// order; forward() fills values, backward() accumulates gradients into every
// reachable leaf whose tensor has requires_grad set.
class Graph {
 public:
  int leaf(TensorPtr t);
  int constant(Tensor t);

  int add(int a, int b);
  int sub(int a, int b);
  int mul(int a, int b);
  int matmul(int a, int b);
  int transpose(int a);
  int concat_rows(int a, int b);
  int gather_rows(int table, std::vector<int> row_indices);
  int tanh(int a);
  int relu(int a);
  int sigmoid(int a);
  int exp(int a);
  int log(int a);
  int sum(int a);
  int mean(int a);
  int row_softmax(int a);
  int cross_entropy_logits(int logits, std::vector<int> targets);
  int layer_norm(int a, int gain, int bias);
  int scale_rows(int a, int v);
  int custom(std::shared_ptr<CustomOp> op, std::vector<int> inputs);

  // Elementwise scale by a constant; sugar over mul with a filled constant.
  int scale(int a, float c);
  // a (n x k) + bias (1 x k) broadcast over rows via a ones-matmul.
  int add_row_broadcast(int a, int bias);

  void mark_output(const std::string& name, int id);
  const std::vector<std::pair<std::string, int>>& outputs() const { return outputs_; }

  void forward();
  void backward(int loss_node);

  const Tensor& value(int id) const { return nodes_[id].value; }
  const std::vector<float>& grad(int id) const { return nodes_[id].grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  int push(Node n);
  void check_input(int id, const char* what) const;
  [[noreturn]] void shape_fail(int node_id, Op op, const std::string& detail) const;
  void forward_node(int id);
  void backward_node(int id);

  std::vector<Node> nodes_;
  std::vector<std::pair<std::string, int>> outputs_;
  bool forwarded_{false};
};

}  // namespace crest::grad
