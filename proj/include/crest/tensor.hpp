#pragma once

#include <cstddef>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "crest/random.hpp"

namespace crest::grad {

// Dense row-major float32 array. grad is allocated lazily and, when present,
// always matches data in size.
struct Tensor {
  std::vector<int> shape;
  std::vector<float> data;
  bool requires_grad{false};
  std::vector<float> grad;  // empty until ensure_grad() is called

  Tensor() = default;
  Tensor(std::vector<int> shape_in, float fill = 0.0f);
  Tensor(std::vector<int> shape_in, std::vector<float> data_in);

  static Tensor scalar(float v);
  static Tensor randn(std::vector<int> shape_in, Rng& rng, float stddev);

  std::size_t numel() const { return data.size(); }
  int rows() const { return shape.empty() ? 1 : shape[0]; }
  int cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  float& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols() + c]; }
  float at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols() + c]; }

  void ensure_grad();
  void zero_grad();

  bool same_shape(const Tensor& other) const { return shape == other.shape; }
  std::string shape_str() const;
};

using TensorPtr = std::shared_ptr<Tensor>;

std::size_t shape_numel(const std::vector<int>& shape);

// Named parameter collection; the unit shared by optimizers and checkpoints.
struct ParamSet {
  std::vector<std::pair<std::string, TensorPtr>> items;

  TensorPtr add(const std::string& name, Tensor t);
  TensorPtr find(const std::string& name) const;
  void zero_grads();
  std::size_t total_numel() const;
};

struct AdamWConfig {
  float lr{1e-4f};
  float weight_decay{1e-6f};
  float beta1{0.9f};
  float beta2{0.999f};
  float eps{1e-8f};
};

// Decoupled weight decay Adam. Moment buffers are keyed by parameter order,
// so the ParamSet layout must not change between steps.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  void step(ParamSet& params);
  long step_count() const { return step_count_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  AdamWConfig cfg_;
  long step_count_{0};
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
};

// Thrown on incompatible operand shapes; message names the offending node.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Thrown when log/softmax receive non-finite input.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace crest::grad
