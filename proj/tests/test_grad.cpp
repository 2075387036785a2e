#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "crest/graph.hpp"
#include "crest/random.hpp"
#include "crest/tensor.hpp"
#include "doctest.h"

using crest::Rng;
using crest::grad::AdamW;
using crest::grad::AdamWConfig;
using crest::grad::Graph;
using crest::grad::NumericError;
using crest::grad::ParamSet;
using crest::grad::ShapeError;
using crest::grad::Tensor;
using crest::grad::TensorPtr;

namespace {

TensorPtr make_leaf(std::vector<int> shape, Rng& rng, float stddev = 0.5f) {
  auto t = std::make_shared<Tensor>(Tensor::randn(std::move(shape), rng, stddev));
  t->requires_grad = true;
  return t;
}

// Central-difference check against the analytic gradient, sampled at the
// coordinates with the largest analytic gradients (float32 forward noise
// swamps the quotient where the true gradient is tiny).
void check_against_fd(Graph& g, int loss, const std::vector<TensorPtr>& leaves,
                      int max_coords = 64, double h = 1e-3) {
  for (const auto& t : leaves) t->zero_grad();
  g.forward();
  g.backward(loss);
  struct Coord {
    int leaf;
    int idx;
    double analytic;
  };
  std::vector<Coord> coords;
  for (int l = 0; l < static_cast<int>(leaves.size()); ++l) {
    for (int i = 0; i < static_cast<int>(leaves[l]->numel()); ++i) {
      coords.push_back({l, i, static_cast<double>(leaves[l]->grad[i])});
    }
  }
  std::sort(coords.begin(), coords.end(),
            [](const Coord& a, const Coord& b) { return std::fabs(a.analytic) > std::fabs(b.analytic); });
  if (static_cast<int>(coords.size()) > max_coords) coords.resize(max_coords);
  int checked = 0;
  for (const Coord& c : coords) {
    if (std::fabs(c.analytic) <= 1e-6) continue;
    float& slot = leaves[c.leaf]->data[c.idx];
    const float orig = slot;
    slot = orig + static_cast<float>(h);
    g.forward();
    const double lp = g.value(loss).data[0];
    slot = orig - static_cast<float>(h);
    g.forward();
    const double lm = g.value(loss).data[0];
    slot = orig;
    const double fd = (lp - lm) / (2.0 * h);
    // The losses are float32, so the difference quotient carries an
    // irreducible rounding term of a few ulp of the loss divided by h; the
    // 1e-3 relative bound applies above that floor.
    const double noise =
        2.0 * 1.19209290e-7 * std::max({1.0, std::fabs(lp), std::fabs(lm)}) / h;
    const double tol = 1e-3 * std::max({1e-6, std::fabs(c.analytic), std::fabs(fd)}) + noise;
    INFO("leaf ", c.leaf, " coord ", c.idx, " analytic ", c.analytic, " fd ", fd);
    CHECK(std::fabs(c.analytic - fd) < tol);
    ++checked;
  }
  CHECK(checked > 0);
  g.forward();  // leave values consistent with unperturbed leaves
}

}  // namespace

TEST_CASE("matmul by identity returns the operand") {
  Rng rng(7);
  Graph g;
  auto a = make_leaf({2, 2}, rng, 1.0f);
  const int id2 = g.constant(Tensor({2, 2}, {1.0f, 0.0f, 0.0f, 1.0f}));
  const int out = g.matmul(id2, g.leaf(a));
  g.forward();
  for (int i = 0; i < 4; ++i) CHECK(g.value(out).data[i] == doctest::Approx(a->data[i]));
}

TEST_CASE("row softmax of a constant row is uniform") {
  Graph g;
  const int out = g.row_softmax(g.constant(Tensor({2}, {0.0f, 0.0f})));
  g.forward();
  CHECK(g.value(out).data[0] == doctest::Approx(0.5));
  CHECK(g.value(out).data[1] == doctest::Approx(0.5));
}

TEST_CASE("sum of squares value and gradient at (1,2)") {
  Graph g;
  auto x = std::make_shared<Tensor>(std::vector<int>{2}, std::vector<float>{1.0f, 2.0f});
  x->requires_grad = true;
  const int xl = g.leaf(x);
  const int loss = g.sum(g.mul(xl, xl));
  g.forward();
  CHECK(g.value(loss).data[0] == doctest::Approx(5.0));
  g.backward(loss);
  CHECK(x->grad[0] == doctest::Approx(2.0));
  CHECK(x->grad[1] == doctest::Approx(4.0));
}

TEST_CASE("gradient of a constant-only loss is zero") {
  Graph g;
  auto x = std::make_shared<Tensor>(std::vector<int>{3}, std::vector<float>{1.0f, 2.0f, 3.0f});
  x->requires_grad = true;
  g.leaf(x);  // present in the graph but not on the loss path
  const int loss = g.sum(g.constant(Tensor({2}, {3.0f, 4.0f})));
  g.forward();
  g.backward(loss);
  REQUIRE(x->grad.size() == 3);
  for (float v : x->grad) CHECK(v == 0.0f);
}

TEST_CASE("finite differences per primitive") {
  Rng rng(11);

  SUBCASE("add sub mul") {
    Graph g;
    auto a = make_leaf({3, 4}, rng);
    auto b = make_leaf({3, 4}, rng);
    const int al = g.leaf(a), bl = g.leaf(b);
    const int loss = g.sum(g.mul(g.add(al, bl), g.sub(al, bl)));
    check_against_fd(g, loss, {a, b});
  }
  SUBCASE("matmul transpose") {
    Graph g;
    auto a = make_leaf({3, 4}, rng);
    auto b = make_leaf({3, 5}, rng);
    const int loss = g.sum(g.matmul(g.transpose(g.leaf(a)), g.leaf(b)));
    check_against_fd(g, loss, {a, b});
  }
  SUBCASE("concat rows") {
    Graph g;
    auto a = make_leaf({2, 3}, rng);
    auto b = make_leaf({4, 3}, rng);
    const int cat = g.concat_rows(g.leaf(a), g.leaf(b));
    const int loss = g.sum(g.mul(cat, g.constant(Tensor::randn({6, 3}, rng, 1.0f))));
    check_against_fd(g, loss, {a, b});
  }
  SUBCASE("gather rows") {
    Graph g;
    auto table = make_leaf({5, 3}, rng);
    const int rows = g.gather_rows(g.leaf(table), {4, 0, 2, 0});
    const int loss = g.sum(g.mul(rows, g.constant(Tensor::randn({4, 3}, rng, 1.0f))));
    check_against_fd(g, loss, {table});
  }
  SUBCASE("tanh") {
    Graph g;
    auto a = make_leaf({2, 5}, rng);
    const int loss = g.sum(g.tanh(g.leaf(a)));
    check_against_fd(g, loss, {a});
  }
  SUBCASE("relu away from the kink") {
    Graph g;
    auto a = std::make_shared<Tensor>(std::vector<int>{6},
                                      std::vector<float>{-1.5f, -0.4f, 0.3f, 0.9f, 2.0f, -2.2f});
    a->requires_grad = true;
    const int loss = g.sum(g.mul(g.relu(g.leaf(a)), g.constant(Tensor::randn({6}, rng, 1.0f))));
    check_against_fd(g, loss, {a});
  }
  SUBCASE("sigmoid") {
    Graph g;
    auto a = make_leaf({3, 3}, rng);
    const int loss = g.sum(g.sigmoid(g.leaf(a)));
    check_against_fd(g, loss, {a});
  }
  SUBCASE("exp") {
    Graph g;
    auto a = make_leaf({2, 4}, rng, 0.3f);
    const int loss = g.mean(g.exp(g.leaf(a)));
    check_against_fd(g, loss, {a});
  }
  SUBCASE("log on positive inputs") {
    Graph g;
    auto a = std::make_shared<Tensor>(std::vector<int>{5},
                                      std::vector<float>{0.5f, 1.0f, 1.5f, 2.0f, 2.5f});
    a->requires_grad = true;
    const int loss = g.sum(g.log(g.leaf(a)));
    check_against_fd(g, loss, {a});
  }
  SUBCASE("mean") {
    Graph g;
    auto a = make_leaf({4, 4}, rng);
    const int loss = g.mean(g.mul(g.leaf(a), g.leaf(a)));
    check_against_fd(g, loss, {a});
  }
  SUBCASE("row softmax") {
    Graph g;
    auto a = make_leaf({3, 4}, rng, 1.0f);
    const int sm = g.row_softmax(g.leaf(a));
    const int loss = g.sum(g.mul(sm, g.constant(Tensor::randn({3, 4}, rng, 1.0f))));
    check_against_fd(g, loss, {a});
  }
  SUBCASE("cross entropy with logits") {
    Graph g;
    auto logits = make_leaf({4, 3}, rng, 1.0f);
    const int loss = g.cross_entropy_logits(g.leaf(logits), {0, 2, 1, 2});
    check_against_fd(g, loss, {logits});
  }
  SUBCASE("layer norm") {
    Graph g;
    auto a = make_leaf({3, 5}, rng, 1.0f);
    auto gain = make_leaf({1, 5}, rng, 0.5f);
    auto bias = make_leaf({1, 5}, rng, 0.5f);
    const int ln = g.layer_norm(g.leaf(a), g.leaf(gain), g.leaf(bias));
    const int loss = g.sum(g.mul(ln, g.constant(Tensor::randn({3, 5}, rng, 1.0f))));
    check_against_fd(g, loss, {a, gain, bias});
  }
  SUBCASE("scale rows") {
    Graph g;
    auto a = make_leaf({4, 3}, rng);
    auto v = make_leaf({4}, rng);
    const int loss = g.sum(g.scale_rows(g.leaf(a), g.leaf(v)));
    check_against_fd(g, loss, {a, v});
  }
  SUBCASE("row broadcast bias") {
    Graph g;
    auto a = make_leaf({4, 3}, rng);
    auto bias = make_leaf({1, 3}, rng);
    const int out = g.add_row_broadcast(g.leaf(a), g.leaf(bias));
    const int loss = g.sum(g.mul(out, g.constant(Tensor::randn({4, 3}, rng, 1.0f))));
    check_against_fd(g, loss, {a, bias});
  }
}

TEST_CASE("finite differences on random composite graphs") {
  SUBCASE("three layer tanh net with cross entropy") {
    Rng rng(101);
    Graph g;
    auto x = make_leaf({4, 6}, rng);
    auto w1 = make_leaf({6, 8}, rng);
    auto b1 = make_leaf({1, 8}, rng, 0.1f);
    auto w2 = make_leaf({8, 8}, rng, 0.35f);
    auto b2 = make_leaf({1, 8}, rng, 0.1f);
    auto w3 = make_leaf({8, 3}, rng, 0.35f);
    int h = g.tanh(g.add_row_broadcast(g.matmul(g.leaf(x), g.leaf(w1)), g.leaf(b1)));
    h = g.tanh(g.add_row_broadcast(g.matmul(h, g.leaf(w2)), g.leaf(b2)));
    const int loss = g.cross_entropy_logits(g.matmul(h, g.leaf(w3)), {2, 0, 1, 1});
    check_against_fd(g, loss, {x, w1, b1, w2, b2, w3});
  }
  SUBCASE("layer norm with sigmoid and row scaling") {
    Rng rng(102);
    Graph g;
    auto x = make_leaf({3, 5}, rng, 1.0f);
    auto gain = make_leaf({1, 5}, rng, 0.5f);
    auto bias = make_leaf({1, 5}, rng, 0.5f);
    auto v = make_leaf({3}, rng);
    const int ln = g.layer_norm(g.leaf(x), g.leaf(gain), g.leaf(bias));
    const int loss = g.mean(g.scale_rows(g.sigmoid(ln), g.leaf(v)));
    check_against_fd(g, loss, {x, gain, bias, v});
  }
  SUBCASE("embedding lookup through softmax log likelihood") {
    Rng rng(103);
    Graph g;
    auto table = make_leaf({7, 4}, rng);
    auto u = make_leaf({4, 3}, rng);
    const int emb = g.gather_rows(g.leaf(table), {1, 4, 2, 6, 1});
    const int probs = g.row_softmax(g.matmul(g.tanh(emb), g.leaf(u)));
    Tensor pick({5, 3}, 0.0f);
    pick.at(0, 2) = 1.0f;
    pick.at(1, 0) = 1.0f;
    pick.at(2, 1) = 1.0f;
    pick.at(3, 0) = 1.0f;
    pick.at(4, 2) = 1.0f;
    const int loss = g.scale(g.sum(g.mul(g.log(probs), g.constant(pick))), -0.2f);
    check_against_fd(g, loss, {table, u});
  }
  SUBCASE("concat transpose exp chain") {
    Rng rng(104);
    Graph g;
    auto a = make_leaf({3, 4}, rng, 0.4f);
    auto b = make_leaf({2, 4}, rng, 0.4f);
    auto v = make_leaf({5, 2}, rng, 0.3f);
    const int cat = g.concat_rows(g.leaf(a), g.leaf(b));
    const int loss = g.mean(g.exp(g.scale(g.matmul(g.transpose(cat), g.leaf(v)), 0.5f)));
    check_against_fd(g, loss, {a, b, v});
  }
  SUBCASE("mixed elementwise chain reusing an input") {
    Rng rng(105);
    Graph g;
    auto x = make_leaf({4, 4}, rng);
    auto y = make_leaf({4, 4}, rng);
    auto bias = make_leaf({1, 4}, rng);
    const int xl = g.leaf(x), yl = g.leaf(y);
    const int mixed = g.add_row_broadcast(g.mul(g.sub(g.sigmoid(xl), g.tanh(yl)), xl), g.leaf(bias));
    const int loss = g.mean(g.mul(mixed, mixed));
    check_against_fd(g, loss, {x, y, bias});
  }
}

TEST_CASE("forward is pure") {
  Rng rng(42);
  Graph g;
  auto x = make_leaf({3, 4}, rng);
  auto w = make_leaf({4, 4}, rng);
  auto gain = make_leaf({1, 4}, rng);
  auto bias = make_leaf({1, 4}, rng);
  const int ln = g.layer_norm(g.matmul(g.leaf(x), g.leaf(w)), g.leaf(gain), g.leaf(bias));
  const int out = g.row_softmax(g.tanh(ln));
  const int loss = g.mean(out);
  g.forward();
  std::vector<float> first = g.value(out).data;
  const float loss1 = g.value(loss).data[0];
  g.forward();
  CHECK(std::memcmp(first.data(), g.value(out).data.data(), first.size() * sizeof(float)) == 0);
  CHECK(g.value(loss).data[0] == loss1);
}

TEST_CASE("row softmax rows are nonnegative and normalized") {
  Rng rng(13);
  Graph g;
  const int out = g.row_softmax(g.constant(Tensor::randn({6, 5}, rng, 3.0f)));
  g.forward();
  const Tensor& y = g.value(out);
  for (int i = 0; i < 6; ++i) {
    double row = 0.0;
    for (int j = 0; j < 5; ++j) {
      CHECK(y.at(i, j) >= 0.0f);
      row += y.at(i, j);
    }
    CHECK(row == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("adamw") {
  SUBCASE("zero gradient and zero weight decay leave parameters unchanged") {
    ParamSet ps;
    auto p = ps.add("w", Tensor({3}, {0.5f, -1.0f, 2.0f}));
    p->requires_grad = true;
    p->ensure_grad();
    AdamWConfig cfg;
    cfg.weight_decay = 0.0f;
    AdamW opt(cfg);
    opt.step(ps);
    CHECK(p->data[0] == 0.5f);
    CHECK(p->data[1] == -1.0f);
    CHECK(p->data[2] == 2.0f);
  }
  SUBCASE("default hyperparameters") {
    AdamWConfig cfg;
    CHECK(cfg.lr == 1e-4f);
    CHECK(cfg.weight_decay == 1e-6f);
    CHECK(cfg.beta1 == 0.9f);
    CHECK(cfg.beta2 == 0.999f);
    CHECK(cfg.eps == 1e-8f);
  }
  SUBCASE("single scalar step matches the update rule") {
    ParamSet ps;
    auto p = ps.add("w", Tensor::scalar(1.0f));
    p->requires_grad = true;
    p->ensure_grad();
    p->grad[0] = 0.5f;
    AdamW opt;
    opt.step(ps);
    const double g = 0.5, lr = 1e-4, wd = 1e-6, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double m = (1.0 - b1) * g;
    const double v = (1.0 - b2) * g * g;
    const double mhat = m / (1.0 - b1);
    const double vhat = v / (1.0 - b2);
    const double expect = 1.0 - lr * (mhat / (std::sqrt(vhat) + eps) + wd * 1.0);
    CHECK(std::fabs(p->data[0] - expect) < 1e-7);
    CHECK(opt.step_count() == 1);
  }
}

TEST_CASE("shape mismatch names the offending node") {
  Graph g;
  const int a = g.constant(Tensor({2, 3}, 1.0f));
  const int b = g.constant(Tensor({3, 3}, 1.0f));
  try {
    g.add(a, b);
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("node 2") != std::string::npos);
    CHECK(msg.find("add") != std::string::npos);
    CHECK(msg.find("(2x3)") != std::string::npos);
    CHECK(msg.find("(3x3)") != std::string::npos);
  }
}

TEST_CASE("backward rejects a non-scalar loss") {
  Graph g;
  const int a = g.constant(Tensor({2, 2}, 1.0f));
  const int out = g.tanh(a);
  g.forward();
  CHECK_THROWS_AS(g.backward(out), ShapeError);
}

TEST_CASE("numeric domain errors") {
  SUBCASE("softmax rejects non-finite input") {
    Graph g;
    auto x = std::make_shared<Tensor>(std::vector<int>{2},
                                      std::vector<float>{std::nanf(""), 0.0f});
    const int out = g.row_softmax(g.leaf(x));
    (void)out;
    CHECK_THROWS_AS(g.forward(), NumericError);
  }
  SUBCASE("log rejects nonpositive input") {
    Graph g;
    g.log(g.constant(Tensor({2}, {1.0f, -0.5f})));
    CHECK_THROWS_AS(g.forward(), NumericError);
  }
}
