#include "crest/tensor.hpp"

#include <cmath>
#include <sstream>

namespace crest::grad {

std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

Tensor::Tensor(std::vector<int> shape_in, float fill)
    : shape(std::move(shape_in)), data(shape_numel(shape), fill) {}

Tensor::Tensor(std::vector<int> shape_in, std::vector<float> data_in)
    : shape(std::move(shape_in)), data(std::move(data_in)) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str());
  }
}

Tensor Tensor::scalar(float v) { return Tensor({1}, std::vector<float>{v}); }

Tensor Tensor::randn(std::vector<int> shape_in, Rng& rng, float stddev) {
  Tensor t(std::move(shape_in));
  for (auto& x : t.data) x = static_cast<float>(rng.gaussian()) * stddev;
  return t;
}

void Tensor::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
}

void Tensor::zero_grad() {
  if (!grad.empty()) grad.assign(data.size(), 0.0f);
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

TensorPtr ParamSet::add(const std::string& name, Tensor t) {
  t.requires_grad = true;
  auto p = std::make_shared<Tensor>(std::move(t));
  items.emplace_back(name, p);
  return p;
}

TensorPtr ParamSet::find(const std::string& name) const {
  for (const auto& [n, p] : items) {
    if (n == name) return p;
  }
  return nullptr;
}

void ParamSet::zero_grads() {
  for (auto& [n, p] : items) p->zero_grad();
}

std::size_t ParamSet::total_numel() const {
  std::size_t n = 0;
  for (const auto& [name, p] : items) n += p->numel();
  return n;
}

void AdamW::step(ParamSet& params) {
  if (m_.empty()) {
    m_.resize(params.items.size());
    v_.resize(params.items.size());
    for (std::size_t i = 0; i < params.items.size(); ++i) {
      m_[i].assign(params.items[i].second->numel(), 0.0f);
      v_[i].assign(params.items[i].second->numel(), 0.0f);
    }
  }
  if (m_.size() != params.items.size()) {
    throw ShapeError("optimizer state holds " + std::to_string(m_.size()) +
                     " parameters but set has " + std::to_string(params.items.size()));
  }
  ++step_count_;
  const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(step_count_));
  for (std::size_t i = 0; i < params.items.size(); ++i) {
    Tensor& p = *params.items[i].second;
    if (p.grad.empty()) continue;
    if (m_[i].size() != p.numel()) {
      throw ShapeError("optimizer state shape mismatch for parameter " + params.items[i].first);
    }
    for (std::size_t j = 0; j < p.numel(); ++j) {
      const float g = p.grad[j];
      m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0f - cfg_.beta1) * g;
      v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0f - cfg_.beta2) * g * g;
      const float mhat = static_cast<float>(m_[i][j] / bc1);
      const float vhat = static_cast<float>(v_[i][j] / bc2);
      p.data[j] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p.data[j]);
    }
  }
}

}  // namespace crest::grad
