#include "crest/sparsemap.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

#include "crest/random.hpp"

namespace crest::sparsemap {

namespace {

void check_factor(const std::vector<double>& scores, const BudgetFactor& f) {
  if (f.n != static_cast<int>(scores.size())) {
    throw std::invalid_argument("factor expects " + std::to_string(f.n) + " scores, got " +
                                std::to_string(scores.size()));
  }
  if (f.k < 1 || f.k > f.n) {
    throw std::invalid_argument("budget k=" + std::to_string(f.k) + " outside [1, " +
                                std::to_string(f.n) + "]");
  }
  if (f.transition_penalty < 0.0) {
    throw std::invalid_argument("transition penalty must be nonnegative");
  }
  for (double s : scores) {
    if (!std::isfinite(s)) throw grad::NumericError("non-finite score passed to map oracle");
  }
}

double dot(const std::vector<double>& a, const std::vector<int>& z) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * z[i];
  return acc;
}

// Solves [[G + ridge*I, 1], [1^T, 0]] [x; nu] = [b; s] by Gaussian elimination
// with partial pivoting. Returns false when a pivot collapses.
bool solve_kkt(std::vector<double> G, int m, const std::vector<double>& b, double s, double ridge,
               std::vector<double>& x) {
  const int dim = m + 1;
  std::vector<double> A(static_cast<std::size_t>(dim) * dim, 0.0);
  std::vector<double> rhs(dim, 0.0);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < m; ++j) A[i * dim + j] = G[i * m + j];
    A[i * dim + i] += ridge;
    A[i * dim + m] = 1.0;
    A[m * dim + i] = 1.0;
    rhs[i] = b[i];
  }
  rhs[m] = s;
  std::vector<int> perm(dim);
  std::iota(perm.begin(), perm.end(), 0);
  for (int col = 0; col < dim; ++col) {
    int piv = col;
    for (int r = col + 1; r < dim; ++r) {
      if (std::fabs(A[perm[r] * dim + col]) > std::fabs(A[perm[piv] * dim + col])) piv = r;
    }
    std::swap(perm[col], perm[piv]);
    const double p = A[perm[col] * dim + col];
    if (std::fabs(p) < 1e-12) return false;
    for (int r = col + 1; r < dim; ++r) {
      const double f = A[perm[r] * dim + col] / p;
      if (f == 0.0) continue;
      for (int c = col; c < dim; ++c) A[perm[r] * dim + c] -= f * A[perm[col] * dim + c];
      rhs[perm[r]] -= f * rhs[perm[col]];
    }
  }
  std::vector<double> sol(dim, 0.0);
  for (int row = dim - 1; row >= 0; --row) {
    double acc = rhs[perm[row]];
    for (int c = row + 1; c < dim; ++c) acc -= A[perm[row] * dim + c] * sol[c];
    sol[row] = acc / A[perm[row] * dim + row];
  }
  x.assign(sol.begin(), sol.begin() + m);
  return true;
}

std::vector<double> gram(const std::vector<std::vector<int>>& verts) {
  const int m = static_cast<int>(verts.size());
  std::vector<double> G(static_cast<std::size_t>(m) * m, 0.0);
  for (int i = 0; i < m; ++i) {
    for (int j = i; j < m; ++j) {
      double acc = 0.0;
      for (std::size_t t = 0; t < verts[i].size(); ++t) {
        acc += static_cast<double>(verts[i][t]) * verts[j][t];
      }
      G[i * m + j] = acc;
      G[j * m + i] = acc;
    }
  }
  return G;
}

}  // namespace

int transition_count(const std::vector<int>& z) {
  int t = 0;
  for (std::size_t i = 1; i < z.size(); ++i) t += std::abs(z[i] - z[i - 1]);
  return t;
}

std::vector<int> map_oracle(const std::vector<double>& scores, const BudgetFactor& factor) {
  check_factor(scores, factor);
  const int n = factor.n;
  std::vector<int> z(n, 0);
  if (factor.transition_penalty == 0.0) {
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return scores[a] > scores[b]; });
    int taken = 0;
    for (int idx : order) {
      if (taken >= factor.k) break;
      if (scores[idx] <= 0.0) break;
      z[idx] = 1;
      ++taken;
    }
    return z;
  }

  // suf[i][u][s]: best value of positions i..n-1 given u already used and the
  // previous position in state s (s = 2 marks "no previous position").
  const double c = factor.transition_penalty;
  const double neg = -std::numeric_limits<double>::infinity();
  const int k = factor.k;
  auto at = [&](std::vector<double>& t, int i, int u, int s) -> double& {
    return t[(static_cast<std::size_t>(i) * (k + 1) + u) * 2 + s];
  };
  std::vector<double> suf(static_cast<std::size_t>(n + 1) * (k + 1) * 2, neg);
  for (int u = 0; u <= k; ++u) {
    at(suf, n, u, 0) = 0.0;
    at(suf, n, u, 1) = 0.0;
  }
  for (int i = n - 1; i >= 0; --i) {
    for (int u = 0; u <= k; ++u) {
      for (int s = 0; s < 2; ++s) {
        double best = at(suf, i + 1, u, 0) - (s != 0 ? c : 0.0);
        if (u < k) {
          const double take = scores[i] + at(suf, i + 1, u + 1, 1) - (s != 1 ? c : 0.0);
          if (take > best) best = take;
        }
        at(suf, i, u, s) = best;
      }
    }
  }
  // Reconstruct greedily; at ties take the position, which yields the
  // lexicographically largest optimum.
  int used = 0;
  int prev = 2;
  for (int i = 0; i < n; ++i) {
    const double skip = at(suf, i + 1, used, 0) - (prev != 2 && prev != 0 ? c : 0.0);
    double take = neg;
    if (used < k) {
      take = scores[i] + at(suf, i + 1, used + 1, 1) - (prev != 2 && prev != 1 ? c : 0.0);
    }
    if (take >= skip) {
      z[i] = 1;
      ++used;
      prev = 1;
    } else {
      prev = 0;
    }
  }
  return z;
}

SparseMapSolution sparsemap(const std::vector<double>& scores, const BudgetFactor& factor,
                            int max_iter, double tol) {
  if (max_iter < 1) throw std::invalid_argument("max_iter must be at least 1");
  if (!(tol > 0.0)) throw std::invalid_argument("tol must be positive");
  check_factor(scores, factor);
  const int n = factor.n;
  const double c = factor.transition_penalty;

  SparseMapSolution sol;
  sol.active_vertices.push_back(map_oracle(scores, factor));
  sol.coefficients.push_back(1.0);
  std::vector<double> vert_lin = {dot(scores, sol.active_vertices[0]) -
                                  c * transition_count(sol.active_vertices[0])};

  std::vector<double> mu(n, 0.0);
  auto recompute_mu = [&]() {
    std::fill(mu.begin(), mu.end(), 0.0);
    for (std::size_t s = 0; s < sol.active_vertices.size(); ++s) {
      for (int i = 0; i < n; ++i) mu[i] += sol.coefficients[s] * sol.active_vertices[s][i];
    }
  };
  recompute_mu();

  for (int it = 1; it <= max_iter; ++it) {
    sol.iterations = it;
    std::vector<double> g(n);
    for (int i = 0; i < n; ++i) g[i] = scores[i] - mu[i];
    const std::vector<int> znew = map_oracle(g, factor);
    double lin_mu = 0.0;
    for (std::size_t s = 0; s < sol.active_vertices.size(); ++s) {
      lin_mu += sol.coefficients[s] *
                (dot(g, sol.active_vertices[s]) - c * transition_count(sol.active_vertices[s]));
    }
    const double gap = dot(g, znew) - c * transition_count(znew) - lin_mu;
    if (gap <= tol) {
      sol.converged = true;
      break;
    }
    bool seen = false;
    for (const auto& v : sol.active_vertices) {
      if (v == znew) {
        seen = true;
        break;
      }
    }
    if (seen) {
      sol.converged = true;
      break;
    }
    sol.active_vertices.push_back(znew);
    sol.coefficients.push_back(0.0);
    vert_lin.push_back(dot(scores, znew) - c * transition_count(znew));

    // Restricted problem over the current vertex set, with away steps that
    // drop vertices whose weight hits zero.
    for (;;) {
      const int m = static_cast<int>(sol.active_vertices.size());
      std::vector<double> alpha_aff;
      if (!solve_kkt(gram(sol.active_vertices), m, vert_lin, 1.0, 1e-10, alpha_aff)) {
        break;  // keep current weights; the outer loop re-evaluates the gap
      }
      double lo = 0.0;
      for (double a : alpha_aff) lo = std::min(lo, a);
      if (lo >= -1e-9) {
        for (int s = 0; s < m; ++s) sol.coefficients[s] = std::max(alpha_aff[s], 0.0);
        break;
      }
      double gamma = 1.0;
      for (int s = 0; s < m; ++s) {
        if (alpha_aff[s] < 0.0) {
          const double denom = sol.coefficients[s] - alpha_aff[s];
          if (denom > 1e-18) gamma = std::min(gamma, sol.coefficients[s] / denom);
        }
      }
      for (int s = 0; s < m; ++s) {
        sol.coefficients[s] += gamma * (alpha_aff[s] - sol.coefficients[s]);
      }
      for (int s = m - 1; s >= 0; --s) {
        if (sol.coefficients[s] <= 1e-12) {
          sol.active_vertices.erase(sol.active_vertices.begin() + s);
          sol.coefficients.erase(sol.coefficients.begin() + s);
          vert_lin.erase(vert_lin.begin() + s);
        }
      }
    }
    double total = std::accumulate(sol.coefficients.begin(), sol.coefficients.end(), 0.0);
    if (total > 0.0) {
      for (double& a : sol.coefficients) a /= total;
    }
    recompute_mu();
  }
  for (int s = static_cast<int>(sol.coefficients.size()) - 1; s >= 0; --s) {
    if (sol.coefficients[s] <= 1e-12 && sol.coefficients.size() > 1) {
      sol.active_vertices.erase(sol.active_vertices.begin() + s);
      sol.coefficients.erase(sol.coefficients.begin() + s);
    }
  }
  recompute_mu();

  // At a degenerate optimum the support found above can span only part of the
  // optimal face, which would skew the implicit derivative. Probe the MAP
  // oracle around the converged gradient direction and append any further
  // face vertices with weight zero; they change nothing about μ but let the
  // backward pass see the face's full affine hull.
  double gmax = 0.0;
  for (int i = 0; i < n; ++i) gmax = std::max(gmax, std::fabs(scores[i] - mu[i]));
  if (sol.converged && gmax > 1e-7) {
    std::vector<double> g(n);
    for (int i = 0; i < n; ++i) g[i] = scores[i] - mu[i];
    const std::vector<int> base = map_oracle(g, factor);
    const double best = dot(g, base) - c * transition_count(base);
    auto consider = [&](const std::vector<int>& v) {
      if (dot(g, v) - c * transition_count(v) < best - 1e-9) return;
      for (const auto& have : sol.active_vertices) {
        if (have == v) return;
      }
      sol.active_vertices.push_back(v);
      sol.coefficients.push_back(0.0);
    };
    consider(base);
    std::vector<double> gp(n);
    for (int axis = 0; axis < 2 * n; ++axis) {
      gp = g;
      gp[axis / 2] += axis % 2 == 0 ? 1e-6 : -1e-6;
      consider(map_oracle(gp, factor));
    }
    Rng probe(0x9e3779b97f4a7c15ull);
    for (int t = 0; t < 16; ++t) {
      for (int i = 0; i < n; ++i) gp[i] = g[i] + 1e-6 * probe.gaussian();
      consider(map_oracle(gp, factor));
    }
  }
  sol.marginals = mu;
  return sol;
}

std::vector<double> sparsemap_backward(const SparseMapSolution& solution,
                                       const std::vector<double>& upstream) {
  if (!solution.converged) {
    throw std::invalid_argument("backward requires a converged solution");
  }
  const int n = static_cast<int>(solution.marginals.size());
  if (static_cast<int>(upstream.size()) != n) {
    throw std::invalid_argument("upstream length " + std::to_string(upstream.size()) +
                                " does not match marginals length " + std::to_string(n));
  }
  std::vector<double> grad(n, 0.0);
  if (solution.active_vertices.size() < 2) return grad;

  // Keep an affinely independent subset, highest weight first; dropped
  // vertices do not change the face the solution lives on.
  std::vector<int> order(solution.active_vertices.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return solution.coefficients[a] > solution.coefficients[b];
  });
  std::vector<std::vector<int>> kept;
  std::vector<std::vector<double>> basis;  // orthogonalized differences to kept[0]
  for (int idx : order) {
    const std::vector<int>& v = solution.active_vertices[idx];
    if (kept.empty()) {
      kept.push_back(v);
      continue;
    }
    std::vector<double> r(n);
    for (int i = 0; i < n; ++i) r[i] = static_cast<double>(v[i]) - kept[0][i];
    for (const auto& b : basis) {
      double proj = 0.0;
      for (int i = 0; i < n; ++i) proj += r[i] * b[i];
      for (int i = 0; i < n; ++i) r[i] -= proj * b[i];
    }
    double norm = 0.0;
    for (double x : r) norm += x * x;
    norm = std::sqrt(norm);
    if (norm > 1e-7) {
      for (double& x : r) x /= norm;
      basis.push_back(std::move(r));
      kept.push_back(v);
    }
  }
  if (kept.size() < 2) return grad;

  const int m = static_cast<int>(kept.size());
  std::vector<double> rhs(m, 0.0);
  for (int s = 0; s < m; ++s) rhs[s] = dot(upstream, kept[s]);
  std::vector<double> a;
  if (!solve_kkt(gram(kept), m, rhs, 0.0, 0.0, a) &&
      !solve_kkt(gram(kept), m, rhs, 0.0, 1e-10, a)) {
    return grad;
  }
  for (int s = 0; s < m; ++s) {
    for (int i = 0; i < n; ++i) grad[i] += a[s] * kept[s][i];
  }
  return grad;
}

std::vector<int> topk_binarize(const std::vector<double>& mu, int k) {
  const int n = static_cast<int>(mu.size());
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return mu[a] > mu[b]; });
  std::vector<int> z(n, 0);
  int taken = 0;
  for (int idx : order) {
    if (taken >= k) break;
    if (mu[idx] <= 0.0) break;
    z[idx] = 1;
    ++taken;
  }
  return z;
}

grad::Tensor SparseMapOp::forward(const std::vector<const grad::Tensor*>& inputs) {
  if (inputs.size() != 1) throw std::invalid_argument("sparsemap node takes one input");
  const grad::Tensor& scores = *inputs[0];
  if (static_cast<int>(scores.numel()) != factor_.n) {
    throw grad::ShapeError("sparsemap node expects " + std::to_string(factor_.n) +
                           " scores, got " + scores.shape_str());
  }
  std::vector<double> s(scores.data.begin(), scores.data.end());
  sol_ = sparsemap(s, factor_, max_iter_, tol_);
  grad::Tensor out(scores.shape);
  for (int i = 0; i < factor_.n; ++i) out.data[i] = static_cast<float>(sol_.marginals[i]);
  return out;
}

std::vector<std::vector<float>> SparseMapOp::backward(
    const std::vector<const grad::Tensor*>& inputs, const grad::Tensor&,
    const std::vector<float>& out_grad) {
  std::vector<float> gx(inputs[0]->numel(), 0.0f);
  if (sol_.converged) {
    std::vector<double> up(out_grad.begin(), out_grad.end());
    const std::vector<double> g = sparsemap_backward(sol_, up);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = static_cast<float>(g[i]);
  }
  return {std::move(gx)};
}

}  // namespace crest::sparsemap
