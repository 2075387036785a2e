#pragma once

#include <vector>

#include "crest/graph.hpp"

namespace crest::sparsemap {

// Mask polytope controls: at most k of n positions selected, with an optional
// penalty per 0/1 transition inside the sequence (0 disables it).
struct BudgetFactor {
  int n{0};
  int k{0};
  double transition_penalty{0.0};
};

struct SparseMapSolution {
  std::vector<double> marginals;               // length n, in [0,1]
  std::vector<std::vector<int>> active_vertices;  // 0/1 configurations
  std::vector<double> coefficients;            // convex weights over active_vertices
  bool converged{false};
  int iterations{0};
};

// Number of internal 0/1 transitions in a configuration.
int transition_count(const std::vector<int>& z);

// Highest-scoring budget-feasible configuration. With no transition penalty,
// the positive-score positions among the top-k (score ties go to the lower
// index). With a penalty, a DP over (position, used count, state); among
// optima the lexicographically largest is returned, which again puts ties at
// the lower index.
std::vector<int> map_oracle(const std::vector<double>& scores, const BudgetFactor& factor);

// Active-set solver for max θ·μ − ½‖μ‖² over the convex hull of feasible
// configurations (the transition penalty enters linearly through the vertex
// scores). Each iteration calls map_oracle once.
SparseMapSolution sparsemap(const std::vector<double>& scores, const BudgetFactor& factor,
                            int max_iter = 100, double tol = 1e-6);

// Gradient of upstream·μ with respect to the scores, by implicit
// differentiation of the active-set quadratic program. A solution supported
// on a single vertex is locally constant, so its gradient is zero.
std::vector<double> sparsemap_backward(const SparseMapSolution& solution,
                                       const std::vector<double>& upstream);

// Positions of the k largest marginals as a 0/1 vector; ties go to the lower
// index and zero marginals are never selected, so the result can have fewer
// than k ones.
std::vector<int> topk_binarize(const std::vector<double>& mu, int k);

// Graph node wrapping the solver: scores in, marginals out, same shape.
// Unlike sparsemap_backward, a non-converged forward yields zero gradients
// instead of an error so a training step degrades rather than aborts.
class SparseMapOp : public grad::CustomOp {
 public:
  explicit SparseMapOp(BudgetFactor factor, int max_iter = 100, double tol = 1e-6)
      : factor_(factor), max_iter_(max_iter), tol_(tol) {}

  const char* name() const override { return "sparsemap"; }
  grad::Tensor forward(const std::vector<const grad::Tensor*>& inputs) override;
  std::vector<std::vector<float>> backward(const std::vector<const grad::Tensor*>& inputs,
                                           const grad::Tensor& output,
                                           const std::vector<float>& out_grad) override;

  const SparseMapSolution& solution() const { return sol_; }

 private:
  BudgetFactor factor_;
  int max_iter_;
  double tol_;
  SparseMapSolution sol_;
};

}  // namespace crest::sparsemap
