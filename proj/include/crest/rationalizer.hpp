#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "crest/graph.hpp"
#include "crest/random.hpp"
#include "crest/sparsemap.hpp"

namespace crest {

struct RationalizerConfig {
  int vocab_size{0};
  int n_classes{2};
  int d{64};
  int max_len{128};
  double budget{0.3};
  double transition_penalty{1e-4};
};

struct RationaleOutput {
  std::vector<double> mu;    // relaxed mask, in [0,1] per position
  std::vector<int> z;        // binarized rationale, at most ceil(budget*n) ones
  std::vector<float> probs;  // class probabilities (empty when only explaining)
  sparsemap::SparseMapSolution solution;
};

// ceil(budget * n) guarded against float drift, clamped to [1, n]
int budget_k(double budget, int n);

// Mask polytope inference on raw position scores; the piece shared by the
// model and by maskers that bring their own scores.
RationaleOutput explain_scores(const std::vector<double>& scores, int k,
                               double transition_penalty);

// Select-then-classify model: a small contextual encoder scores positions,
// the budget polytope turns scores into a sparse mask, and the classifier
// sees token embeddings scaled by that mask. Everything trains end to end
// with gradients passing through the mask inference.
class Rationalizer {
 public:
  Rationalizer(RationalizerConfig cfg, Rng& rng);

  const RationalizerConfig& config() const { return cfg_; }
  grad::ParamSet& params() { return params_; }
  const grad::ParamSet& params() const { return params_; }

  // contextual states, one row per token
  grad::Tensor encode(const std::vector<int>& tokens) const;

  // mask inference on encoded states; positions below freeze_prefix are
  // barred from selection
  RationaleOutput explain(const grad::Tensor& H, std::optional<double> budget_override = {},
                          int freeze_prefix = 0) const;

  // class probabilities for tokens under a given mask; exactly invariant to
  // token identity wherever the mask is zero, and a zero mask yields the
  // classifier head's prior
  std::vector<float> predict(const std::vector<int>& tokens, const std::vector<double>& mu) const;

  // encode + explain + predict; freeze_premise bars everything up to and
  // including the first separator token
  RationaleOutput rationalize(const std::vector<int>& tokens,
                              std::optional<double> budget_override = {},
                              bool freeze_premise = false) const;

  // one optimizer update on mean cross-entropy over (tokens, class) pairs
  double train_step(const std::vector<std::pair<std::vector<int>, int>>& batch, grad::AdamW& opt);

  // full-pipeline loss on one example with gradients accumulated into the
  // parameter buffers (zeroed first); for gradient checks and diagnostics
  double example_loss_and_grad(const std::vector<int>& tokens, int label);

  // graph pieces, exposed so composite trainers can wire several flows over
  // one set of parameters: embed -> encoder -> scores -> mask -> classifier
  int build_embed(grad::Graph& g, const std::vector<int>& tokens) const;
  int build_encoder(grad::Graph& g, int X) const;
  int build_scores(grad::Graph& g, int H) const;
  int build_mask(grad::Graph& g, int scores, int n, double budget,
                 std::shared_ptr<sparsemap::SparseMapOp>* op_out = nullptr) const;
  int build_classifier(grad::Graph& g, int masked) const;

  // positions with the largest l1 gradient of the model's own loss with
  // respect to their embedding; marks ceil(top_fraction * n) of them
  std::vector<int> gradient_masker(const std::vector<int>& tokens, double top_fraction) const;

  void save(const std::string& path, std::uint64_t vocab_hash) const;
  static Rationalizer load(const std::string& path, std::uint64_t vocab_hash);

  // index of the first position allowed to be selected when the premise
  // segment is frozen: one past the first separator, 0 if there is none
  static int premise_end(const std::vector<int>& tokens, int sep_id);

 private:
  explicit Rationalizer(RationalizerConfig cfg);

  void init_params(Rng* rng);
  void check_tokens(const std::vector<int>& tokens) const;
  double run_example(const std::vector<int>& tokens, int label, float scale);

  RationalizerConfig cfg_;
  grad::ParamSet params_;
  grad::TensorPtr emb_, pos_;
  grad::TensorPtr ln1_gain_, ln1_bias_, wq_, wk_, wv_, wo_;
  grad::TensorPtr ln2_gain_, ln2_bias_, ff1_w_, ff1_b_, ff2_w_, ff2_b_;
  grad::TensorPtr scorer_w_, scorer_b_;
  grad::TensorPtr pool_, cls_w_, cls_b_;
};

}  // namespace crest
