#include "crest/agreement.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace crest {

using grad::Graph;
using grad::Tensor;

std::vector<int> derive_counterfactual_rationale(const std::vector<int>& x,
                                                 const std::vector<int>& x_edit) {
  const int n = static_cast<int>(x.size());
  const int m = static_cast<int>(x_edit.size());
  std::vector<std::vector<int>> d(n + 1, std::vector<int>(m + 1));
  for (int i = 0; i <= n; ++i) d[i][0] = i;
  for (int j = 0; j <= m; ++j) d[0][j] = j;
  for (int i = 1; i <= n; ++i) {
    for (int j = 1; j <= m; ++j) {
      d[i][j] = std::min({d[i - 1][j - 1] + (x[i - 1] == x_edit[j - 1] ? 0 : 1), d[i][j - 1] + 1,
                          d[i - 1][j] + 1});
    }
  }
  std::vector<int> z(m, 0);
  int i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && x[i - 1] == x_edit[j - 1] && d[i][j] == d[i - 1][j - 1]) {
      --i, --j;  // match
    } else if (i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + 1) {
      z[--j] = 1;  // substitute
      --i;
    } else if (j > 0 && d[i][j] == d[i][j - 1] + 1) {
      z[--j] = 1;  // insert
    } else {
      --i;  // delete
    }
  }
  return z;
}

double adjusted_budget(double budget, const std::vector<int>& z_star,
                       const std::vector<int>& cf_z_star) {
  const auto ones = [](const std::vector<int>& z) {
    return static_cast<int>(std::count(z.begin(), z.end(), 1));
  };
  const int factual = ones(z_star);
  if (factual == 0) throw std::invalid_argument("factual target mask is empty");
  const double scaled = budget * ones(cf_z_star) / factual;
  return std::clamp(scaled, 1e-6, 1.0);
}

namespace {

double squared_gap(const std::vector<double>& mu, const std::vector<int>& target) {
  if (mu.size() != target.size()) {
    throw std::invalid_argument("mask of length " + std::to_string(mu.size()) +
                                " against target of length " + std::to_string(target.size()));
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    const double gap = mu[i] - target[i];
    sum += gap * gap;
  }
  return sum;
}

}  // namespace

double agreement_loss(const std::vector<double>& mu, const std::vector<int>& z_star,
                      const std::vector<double>& cf_mu, const std::vector<int>& cf_z_star) {
  return squared_gap(mu, z_star) + squared_gap(cf_mu, cf_z_star);
}

double total_loss(double ce_factual, double ce_counterfactual, double omega,
                  const AgreementConfig& cfg) {
  if (cfg.alpha < 0.0 || cfg.lambda < 0.0) {
    throw std::invalid_argument("loss weights must be non-negative");
  }
  return ce_factual + cfg.alpha * ce_counterfactual + cfg.lambda * omega;
}

double mask_iou(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("mask lengths differ");
  int inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += (a[i] == 1 && b[i] == 1) ? 1 : 0;
    uni += (a[i] == 1 || b[i] == 1) ? 1 : 0;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / uni;
}

PairedExample to_paired_example(const CounterfactualPair& pair, const Vocab& vocab,
                                const std::vector<std::string>& classes) {
  const auto class_index = [&](const std::string& name) {
    const auto it = std::find(classes.begin(), classes.end(), name);
    if (it == classes.end()) {
      throw std::invalid_argument("pair " + std::to_string(pair.id) + ": unknown class " + name);
    }
    return static_cast<int>(it - classes.begin());
  };
  PairedExample out;
  out.tokens = vocab.encode(pair.text);
  out.cf_tokens = vocab.encode(pair.counterfactual);
  out.label = class_index(pair.label);
  out.cf_label = class_index(pair.counterfactual_label);
  out.z_star = pair.rationale_mask;
  out.cf_z_star = pair.counterfactual_mask.empty()
                      ? derive_counterfactual_rationale(out.tokens, out.cf_tokens)
                      : pair.counterfactual_mask;
  if (out.z_star.size() != out.tokens.size() || out.cf_z_star.size() != out.cf_tokens.size()) {
    throw std::invalid_argument("pair " + std::to_string(pair.id) +
                                ": mask length does not match its text");
  }
  return out;
}

namespace {

int constant_mask(Graph& g, const std::vector<int>& target) {
  Tensor t({static_cast<int>(target.size()), 1});
  for (std::size_t i = 0; i < target.size(); ++i) t.data[i] = static_cast<float>(target[i]);
  return g.constant(std::move(t));
}

int argmax_row(const Tensor& t) {
  int best = 0;
  for (int j = 1; j < static_cast<int>(t.numel()); ++j) {
    if (t.data[j] > t.data[best]) best = j;
  }
  return best;
}

}  // namespace

AgreementEpochStats train_agreement_epoch(Rationalizer& model,
                                          const std::vector<PairedExample>& pairs,
                                          const AgreementConfig& cfg, grad::AdamW& opt,
                                          int batch_size, int epoch_index) {
  if (pairs.empty()) throw std::invalid_argument("no pairs to train on");
  if (batch_size < 1) throw std::invalid_argument("batch size must be positive");
  if (cfg.alpha < 0.0 || cfg.lambda < 0.0) {
    throw std::invalid_argument("loss weights must be non-negative");
  }
  const bool plain = cfg.alpha == 0.0 && cfg.lambda == 0.0;

  AgreementEpochStats stats;
  stats.epoch = epoch_index;
  int used = 0, hits_f = 0, hits_c = 0;

  std::vector<const PairedExample*> batch;
  batch.reserve(batch_size);
  std::size_t next = 0;
  while (next < pairs.size()) {
    batch.clear();
    while (next < pairs.size() && static_cast<int>(batch.size()) < batch_size) {
      const PairedExample& p = pairs[next++];
      if (std::count(p.z_star.begin(), p.z_star.end(), 1) == 0) {
        ++stats.skipped;
        continue;
      }
      batch.push_back(&p);
    }
    if (batch.empty()) continue;

    if (plain) {
      // exact reduction: the factual halves go through the standard trainer
      std::vector<std::pair<std::vector<int>, int>> factual;
      factual.reserve(batch.size());
      for (const PairedExample* p : batch) factual.emplace_back(p->tokens, p->label);
      const double mean_loss = model.train_step(factual, opt);
      stats.loss_factual += mean_loss * static_cast<double>(batch.size());
      for (const PairedExample* p : batch) {
        const RationaleOutput out = model.rationalize(p->tokens);
        const auto best = std::max_element(out.probs.begin(), out.probs.end());
        hits_f += static_cast<int>(best - out.probs.begin()) == p->label ? 1 : 0;
        ++used;
      }
      continue;
    }

    model.params().zero_grads();
    const float inv = 1.0f / static_cast<float>(batch.size());
    for (const PairedExample* p : batch) {
      const double cf_budget = adjusted_budget(model.config().budget, p->z_star, p->cf_z_star);
      Graph g;
      const int E = model.build_embed(g, p->tokens);
      const int scores = model.build_scores(g, model.build_encoder(g, E));
      const int mu = model.build_mask(g, scores, static_cast<int>(p->tokens.size()),
                                      model.config().budget);
      const int logits = model.build_classifier(g, g.scale_rows(E, mu));
      const int ce_f = g.cross_entropy_logits(logits, {p->label});

      const int cf_E = model.build_embed(g, p->cf_tokens);
      const int cf_scores = model.build_scores(g, model.build_encoder(g, cf_E));
      const int cf_mu = model.build_mask(g, cf_scores, static_cast<int>(p->cf_tokens.size()),
                                         cf_budget);
      const int cf_logits = model.build_classifier(g, g.scale_rows(cf_E, cf_mu));
      const int ce_c = g.cross_entropy_logits(cf_logits, {p->cf_label});

      const int gap_f = g.sub(mu, constant_mask(g, p->z_star));
      const int gap_c = g.sub(cf_mu, constant_mask(g, p->cf_z_star));
      const int omega = g.add(g.sum(g.mul(gap_f, gap_f)), g.sum(g.mul(gap_c, gap_c)));

      const int total = g.add(g.add(ce_f, g.scale(ce_c, static_cast<float>(cfg.alpha))),
                              g.scale(omega, static_cast<float>(cfg.lambda)));
      g.forward();
      g.backward(g.scale(total, inv));

      stats.loss_factual += g.value(ce_f).data[0];
      stats.loss_counterfactual += g.value(ce_c).data[0];
      stats.omega += g.value(omega).data[0];
      hits_f += argmax_row(g.value(logits)) == p->label ? 1 : 0;
      hits_c += argmax_row(g.value(cf_logits)) == p->cf_label ? 1 : 0;
      ++used;
    }
    opt.step(model.params());
  }

  if (used > 0) {
    stats.loss_factual /= used;
    stats.loss_counterfactual /= used;
    stats.omega /= used;
    stats.acc_factual = static_cast<double>(hits_f) / used;
    stats.acc_counterfactual = static_cast<double>(hits_c) / used;
  }
  return stats;
}

void write_agreement_csv(const std::vector<AgreementEpochStats>& stats, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "epoch,loss_factual,loss_counterfactual,omega,acc_factual,acc_counterfactual\n";
  for (const auto& s : stats) {
    out << s.epoch << ',' << s.loss_factual << ',' << s.loss_counterfactual << ',' << s.omega
        << ',' << s.acc_factual << ',' << s.acc_counterfactual << '\n';
  }
}

}  // namespace crest
