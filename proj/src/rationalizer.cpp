#include "crest/rationalizer.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <stdexcept>

#include "crest/checkpoint.hpp"
#include "crest/tokenizer.hpp"

namespace crest {

using grad::Graph;
using grad::Tensor;
using sparsemap::BudgetFactor;
using sparsemap::SparseMapOp;

int budget_k(double budget, int n) {
  // the epsilon keeps ceil(0.3 * 10) from landing on 4
  int k = static_cast<int>(std::ceil(budget * n - 1e-9));
  return std::clamp(k, 1, n);
}

RationaleOutput explain_scores(const std::vector<double>& scores, int k,
                               double transition_penalty) {
  const int n = static_cast<int>(scores.size());
  RationaleOutput out;
  out.solution = sparsemap::sparsemap(scores, BudgetFactor{n, k, transition_penalty});
  out.mu = out.solution.marginals;
  out.z = sparsemap::topk_binarize(out.mu, k);
  return out;
}

Rationalizer::Rationalizer(RationalizerConfig cfg) : cfg_(cfg) { init_params(nullptr); }

Rationalizer::Rationalizer(RationalizerConfig cfg, Rng& rng) : cfg_(cfg) {
  if (cfg_.vocab_size <= 0) throw std::invalid_argument("vocab_size must be positive");
  if (cfg_.n_classes < 2) throw std::invalid_argument("need at least two classes");
  if (cfg_.d <= 0 || cfg_.max_len <= 0) throw std::invalid_argument("d and max_len must be positive");
  if (cfg_.budget <= 0.0 || cfg_.budget > 1.0) throw std::invalid_argument("budget must be in (0, 1]");
  init_params(&rng);
}

void Rationalizer::init_params(Rng* rng) {
  const int d = cfg_.d;
  const int h = 2 * d;
  const float s_d = 1.0f / std::sqrt(static_cast<float>(d));
  const float s_h = 1.0f / std::sqrt(static_cast<float>(h));
  auto mat = [&](std::vector<int> shape, float stddev) {
    return rng ? Tensor::randn(shape, *rng, stddev) : Tensor(shape);
  };
  emb_ = params_.add("emb", mat({cfg_.vocab_size, d}, 0.1f));
  pos_ = params_.add("pos", mat({cfg_.max_len, d}, 0.1f));
  ln1_gain_ = params_.add("ln1_gain", Tensor({d}, 1.0f));
  ln1_bias_ = params_.add("ln1_bias", Tensor({d}));
  wq_ = params_.add("wq", mat({d, d}, s_d));
  wk_ = params_.add("wk", mat({d, d}, s_d));
  wv_ = params_.add("wv", mat({d, d}, s_d));
  wo_ = params_.add("wo", mat({d, d}, s_d));
  ln2_gain_ = params_.add("ln2_gain", Tensor({d}, 1.0f));
  ln2_bias_ = params_.add("ln2_bias", Tensor({d}));
  ff1_w_ = params_.add("ff1_w", mat({d, h}, s_d));
  ff1_b_ = params_.add("ff1_b", Tensor({1, h}));
  ff2_w_ = params_.add("ff2_w", mat({h, d}, s_h));
  ff2_b_ = params_.add("ff2_b", Tensor({1, d}));
  scorer_w_ = params_.add("scorer_w", mat({d, 1}, s_d));
  scorer_b_ = params_.add("scorer_b", Tensor({1, 1}));
  pool_ = params_.add("pool", mat({d, 1}, s_d));
  // zero classifier: the initial prediction is uniform over classes
  cls_w_ = params_.add("cls_w", Tensor({d, cfg_.n_classes}));
  cls_b_ = params_.add("cls_b", Tensor({1, cfg_.n_classes}));
}

void Rationalizer::check_tokens(const std::vector<int>& tokens) const {
  if (tokens.empty()) throw std::invalid_argument("empty token sequence");
  if (static_cast<int>(tokens.size()) > cfg_.max_len) {
    throw std::invalid_argument("sequence of " + std::to_string(tokens.size()) +
                                " tokens exceeds max_len " + std::to_string(cfg_.max_len));
  }
  for (int t : tokens) {
    if (t < 0 || t >= cfg_.vocab_size) {
      throw std::invalid_argument("token id " + std::to_string(t) +
                                  " outside vocabulary of size " + std::to_string(cfg_.vocab_size));
    }
  }
}

int Rationalizer::build_embed(Graph& g, const std::vector<int>& tokens) const {
  const int n = static_cast<int>(tokens.size());
  std::vector<int> positions(n);
  std::iota(positions.begin(), positions.end(), 0);
  const int tok = g.gather_rows(g.leaf(emb_), tokens);
  const int pp = g.gather_rows(g.leaf(pos_), positions);
  return g.add(tok, pp);
}

int Rationalizer::build_encoder(Graph& g, int X) const {
  const int u = g.layer_norm(X, g.leaf(ln1_gain_), g.leaf(ln1_bias_));
  const int q = g.matmul(u, g.leaf(wq_));
  const int k = g.matmul(u, g.leaf(wk_));
  const int v = g.matmul(u, g.leaf(wv_));
  const int att = g.row_softmax(g.scale(g.matmul(q, g.transpose(k)),
                                        1.0f / std::sqrt(static_cast<float>(cfg_.d))));
  const int a = g.add(X, g.matmul(g.matmul(att, v), g.leaf(wo_)));
  const int w = g.layer_norm(a, g.leaf(ln2_gain_), g.leaf(ln2_bias_));
  const int f1 = g.tanh(g.add_row_broadcast(g.matmul(w, g.leaf(ff1_w_)), g.leaf(ff1_b_)));
  const int f2 = g.add_row_broadcast(g.matmul(f1, g.leaf(ff2_w_)), g.leaf(ff2_b_));
  return g.add(a, f2);
}

int Rationalizer::build_scores(Graph& g, int H) const {
  return g.add_row_broadcast(g.matmul(H, g.leaf(scorer_w_)), g.leaf(scorer_b_));
}

int Rationalizer::build_mask(Graph& g, int scores, int n, double budget,
                             std::shared_ptr<SparseMapOp>* op_out) const {
  auto op = std::make_shared<SparseMapOp>(
      BudgetFactor{n, budget_k(budget, n), cfg_.transition_penalty});
  if (op_out != nullptr) *op_out = op;
  return g.custom(op, {scores});
}

int Rationalizer::build_classifier(Graph& g, int masked) const {
  const int att = g.row_softmax(g.transpose(g.matmul(masked, g.leaf(pool_))));
  const int pooled = g.matmul(att, masked);
  return g.add_row_broadcast(g.matmul(pooled, g.leaf(cls_w_)), g.leaf(cls_b_));
}

Tensor Rationalizer::encode(const std::vector<int>& tokens) const {
  check_tokens(tokens);
  Graph g;
  const int H = build_encoder(g, build_embed(g, tokens));
  g.forward();
  return g.value(H);
}

RationaleOutput Rationalizer::explain(const Tensor& H, std::optional<double> budget_override,
                                      int freeze_prefix) const {
  if (H.cols() != cfg_.d) {
    throw std::invalid_argument("encoded states have " + std::to_string(H.cols()) +
                                " columns, model dimension is " + std::to_string(cfg_.d));
  }
  const int n = H.rows();
  const double budget = budget_override.value_or(cfg_.budget);
  if (budget <= 0.0 || budget > 1.0) throw std::invalid_argument("budget must be in (0, 1]");
  std::vector<double> scores(n);
  for (int i = 0; i < n; ++i) {
    float acc = scorer_b_->data[0];
    for (int j = 0; j < cfg_.d; ++j) acc += H.at(i, j) * scorer_w_->data[j];
    scores[i] = i < freeze_prefix ? -1e9 : acc;
  }
  return explain_scores(scores, budget_k(budget, n), cfg_.transition_penalty);
}

std::vector<float> Rationalizer::predict(const std::vector<int>& tokens,
                                         const std::vector<double>& mu) const {
  check_tokens(tokens);
  if (mu.size() != tokens.size()) {
    throw std::invalid_argument("mask of length " + std::to_string(mu.size()) +
                                " does not match " + std::to_string(tokens.size()) + " tokens");
  }
  Graph g;
  const int E = build_embed(g, tokens);
  Tensor mv({static_cast<int>(mu.size())});
  for (std::size_t i = 0; i < mu.size(); ++i) mv.data[i] = static_cast<float>(mu[i]);
  const int masked = g.scale_rows(E, g.constant(std::move(mv)));
  const int probs = g.row_softmax(build_classifier(g, masked));
  g.forward();
  return g.value(probs).data;
}

int Rationalizer::premise_end(const std::vector<int>& tokens, int sep_id) {
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] == sep_id) return static_cast<int>(i) + 1;
  }
  return 0;
}

RationaleOutput Rationalizer::rationalize(const std::vector<int>& tokens,
                                          std::optional<double> budget_override,
                                          bool freeze_premise) const {
  check_tokens(tokens);
  const int freeze = freeze_premise ? premise_end(tokens, Vocab::kSep) : 0;
  RationaleOutput out = explain(encode(tokens), budget_override, freeze);
  out.probs = predict(tokens, out.mu);
  return out;
}

double Rationalizer::run_example(const std::vector<int>& tokens, int label, float scale) {
  check_tokens(tokens);
  if (label < 0 || label >= cfg_.n_classes) {
    throw std::invalid_argument("class index " + std::to_string(label) + " out of range");
  }
  Graph g;
  const int E = build_embed(g, tokens);
  const int scores = build_scores(g, build_encoder(g, E));
  const int mu = build_mask(g, scores, static_cast<int>(tokens.size()), cfg_.budget);
  const int logits = build_classifier(g, g.scale_rows(E, mu));
  const int loss = g.cross_entropy_logits(logits, {label});
  const int scaled = g.scale(loss, scale);
  g.forward();
  g.backward(scaled);
  return g.value(loss).data[0];
}

double Rationalizer::train_step(const std::vector<std::pair<std::vector<int>, int>>& batch,
                                grad::AdamW& opt) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  params_.zero_grads();
  const float inv = 1.0f / static_cast<float>(batch.size());
  double total = 0.0;
  for (const auto& [tokens, label] : batch) total += run_example(tokens, label, inv);
  opt.step(params_);
  return total / static_cast<double>(batch.size());
}

double Rationalizer::example_loss_and_grad(const std::vector<int>& tokens, int label) {
  params_.zero_grads();
  return run_example(tokens, label, 1.0f);
}

std::vector<int> Rationalizer::gradient_masker(const std::vector<int>& tokens,
                                               double top_fraction) const {
  check_tokens(tokens);
  if (top_fraction <= 0.0 || top_fraction > 1.0) {
    throw std::invalid_argument("top_fraction must be in (0, 1]");
  }
  const int n = static_cast<int>(tokens.size());
  // attribution target is the model's own prediction, differentiated through
  // the whole pipeline: encoder, mask inference, and classifier
  auto build = [&](Graph& g, int* E_out) {
    const int E = build_embed(g, tokens);
    *E_out = E;
    const int scores = build_scores(g, build_encoder(g, E));
    const int mu = build_mask(g, scores, n, cfg_.budget);
    return build_classifier(g, g.scale_rows(E, mu));
  };
  Graph g;
  int E = 0;
  const int logits = build(g, &E);
  g.forward();
  const Tensor& lv = g.value(logits);
  const int guess = static_cast<int>(std::max_element(lv.data.begin(), lv.data.end()) -
                                     lv.data.begin());
  Graph g2;
  int E2 = 0;
  const int loss = g2.cross_entropy_logits(build(g2, &E2), {guess});
  g2.forward();
  g2.backward(loss);
  const std::vector<float>& eg = g2.grad(E2);
  std::vector<double> l1(n, 0.0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < cfg_.d; ++j) l1[i] += std::fabs(eg[static_cast<std::size_t>(i) * cfg_.d + j]);
  }
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return l1[a] > l1[b]; });
  std::vector<int> z(n, 0);
  const int k = budget_k(top_fraction, n);
  for (int i = 0; i < k; ++i) z[order[i]] = 1;
  return z;
}

void Rationalizer::save(const std::string& path, std::uint64_t vocab_hash) const {
  Checkpoint ckpt;
  ckpt.vocab_hash = vocab_hash;
  ckpt.set_number("vocab_size", cfg_.vocab_size);
  ckpt.set_number("n_classes", cfg_.n_classes);
  ckpt.set_number("d", cfg_.d);
  ckpt.set_number("max_len", cfg_.max_len);
  ckpt.set_number("budget", cfg_.budget);
  ckpt.set_number("transition_penalty", cfg_.transition_penalty);
  ckpt.set_string("model", "rationalizer");
  for (const auto& [name, p] : params_.items) ckpt.tensors.emplace_back(name, *p);
  save_checkpoint(ckpt, path);
}

Rationalizer Rationalizer::load(const std::string& path, std::uint64_t vocab_hash) {
  const Checkpoint ckpt = load_checkpoint(path, vocab_hash);
  if (ckpt.str("model") != "rationalizer") {
    throw std::runtime_error(path + ": checkpoint holds a " + ckpt.str("model") +
                             " model, expected rationalizer");
  }
  RationalizerConfig cfg;
  cfg.vocab_size = static_cast<int>(ckpt.number("vocab_size"));
  cfg.n_classes = static_cast<int>(ckpt.number("n_classes"));
  cfg.d = static_cast<int>(ckpt.number("d"));
  cfg.max_len = static_cast<int>(ckpt.number("max_len"));
  cfg.budget = ckpt.number("budget");
  cfg.transition_penalty = ckpt.number("transition_penalty");
  Rationalizer model(cfg);
  if (ckpt.tensors.size() != model.params_.items.size()) {
    throw std::runtime_error(path + ": checkpoint holds " + std::to_string(ckpt.tensors.size()) +
                             " tensors, model has " + std::to_string(model.params_.items.size()));
  }
  for (std::size_t i = 0; i < ckpt.tensors.size(); ++i) {
    auto& [name, p] = model.params_.items[i];
    const auto& [ck_name, ck_t] = ckpt.tensors[i];
    if (ck_name != name || ck_t.shape != p->shape) {
      throw std::runtime_error(path + ": tensor " + ck_name + " does not match model slot " + name);
    }
    p->data = ck_t.data;
  }
  return model;
}

}  // namespace crest
