#pragma once

#include <string>
#include <vector>

#include "crest/corpus.hpp"
#include "crest/rationalizer.hpp"

namespace crest {

struct AgreementConfig {
  double alpha{0.01};    // counterfactual-loss weight
  double lambda{0.001};  // rationale-agreement weight
};

// Unit-cost token alignment of x to x_edit; positions of x_edit arriving as
// insertions or substitutions are marked 1, matches 0. Deletions occupy no
// position in x_edit. Backtrace ties prefer match, then substitute, then
// insert, then delete.
std::vector<int> derive_counterfactual_rationale(const std::vector<int>& x,
                                                 const std::vector<int>& x_edit);

// Counterfactual-flow budget: the factual budget scaled by the ratio of
// target mask sizes, kept inside (0, 1].
double adjusted_budget(double budget, const std::vector<int>& z_star,
                       const std::vector<int>& cf_z_star);

// Squared distance of each flow's relaxed mask from its binary target.
double agreement_loss(const std::vector<double>& mu, const std::vector<int>& z_star,
                      const std::vector<double>& cf_mu, const std::vector<int>& cf_z_star);

double total_loss(double ce_factual, double ce_counterfactual, double omega,
                  const AgreementConfig& cfg);

// Intersection over union of mask supports; 1 when both are empty.
double mask_iou(const std::vector<int>& a, const std::vector<int>& b);

// A counterfactual pair lowered to token ids and class indices, with the
// generation-stage masks as fixed regularization targets.
struct PairedExample {
  std::vector<int> tokens;
  int label{0};
  std::vector<int> z_star;
  std::vector<int> cf_tokens;
  int cf_label{0};
  std::vector<int> cf_z_star;
};

// Lower a stored pair; an absent counterfactual mask is derived by
// alignment. Mask lengths must match their token sequences.
PairedExample to_paired_example(const CounterfactualPair& pair, const Vocab& vocab,
                                const std::vector<std::string>& classes);

struct AgreementEpochStats {
  int epoch{0};
  double loss_factual{0.0};
  double loss_counterfactual{0.0};
  double omega{0.0};
  double acc_factual{0.0};
  double acc_counterfactual{0.0};
  int skipped{0};  // pairs with an empty factual target mask
};

// One pass over the pairs in fixed batch order. Each example runs both
// flows through the shared parameters in a single graph; the optimizer
// steps once per batch on the batch-mean total loss. With alpha and lambda
// both zero this routes through the plain factual trainer, so the training
// trace is identical to it.
AgreementEpochStats train_agreement_epoch(Rationalizer& model,
                                          const std::vector<PairedExample>& pairs,
                                          const AgreementConfig& cfg, grad::AdamW& opt,
                                          int batch_size, int epoch_index);

// CSV rows: epoch, L_f, L_c, omega, factual accuracy, counterfactual accuracy.
void write_agreement_csv(const std::vector<AgreementEpochStats>& stats, const std::string& path);

}  // namespace crest
