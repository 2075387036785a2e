#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "crest/corpus.hpp"

namespace crest {

// Interpolated bigram language model with add-k smoothing. With no counts
// every conditional is uniform, so an untrained model scores perplexity V.
class NgramLM {
 public:
  explicit NgramLM(int vocab_size, double add_k = 0.1, double bigram_weight = 0.7);

  void fit(const std::vector<std::vector<int>>& texts);

  // natural-log probability of token given the previous one (-1 for start)
  double log_prob(int token, int prev) const;
  double perplexity(const std::vector<int>& tokens) const;

  int vocab_size() const { return vocab_size_; }

 private:
  int vocab_size_;
  double add_k_;
  double bigram_weight_;
  std::vector<double> unigram_;
  double total_{0.0};
  std::unordered_map<std::int64_t, double> bigram_;
  std::vector<double> context_total_;
};

// Mean perplexity over texts; empty texts are skipped and counted.
double fluency_ppl(const std::vector<std::vector<int>>& texts, const NgramLM& lm,
                   int* skipped = nullptr);

// BLEU with uniform weights over 1..4-grams (shorter candidates use the
// orders they have), epsilon-smoothed zero counts, and a brevity penalty
// against the closest reference length (ties broken toward the shorter).
double bleu(const std::vector<int>& candidate, const std::vector<std::vector<int>>& references);

// Mean BLEU of each text against all the others. Lower means more diverse.
double self_bleu(const std::vector<std::vector<int>>& texts);

int levenshtein(const std::vector<int>& a, const std::vector<int>& b);

// Token edit distance divided by the longer length; 0 when both are empty.
double closeness(const std::vector<int>& x, const std::vector<int>& x_edit);

// ROC AUC of scores ranking gold tokens above the rest, ties at half
// credit. A single-class mask has no ranking to measure.
std::optional<double> plausibility_auc(const std::vector<double>& scores,
                                       const std::vector<int>& gold_mask);

// Word-level scores for sub-word pieces: each word takes the mean of its
// pieces. word_of_piece maps each piece to a word index.
std::vector<double> pool_piece_scores(const std::vector<double>& piece_scores,
                                      const std::vector<int>& word_of_piece);

// Fraction of pairs whose counterfactual the classifier assigns the
// intended label.
double validity(const std::vector<CounterfactualPair>& pairs,
                const std::function<std::string(const std::string&)>& classify);

// Multinomial logistic regression over bag-of-token counts, deterministic
// full-batch fit from zero weights. Standing in for a reader who only sees
// the selected tokens.
class LinearStudent {
 public:
  LinearStudent(int vocab_size, int n_classes);

  void fit(const std::vector<std::vector<int>>& selected_tokens, const std::vector<int>& labels,
           int epochs = 300, double lr = 0.5);
  int predict(const std::vector<int>& selected_tokens) const;  // bias vote when empty

 private:
  int vocab_size_;
  int n_classes_;
  std::vector<double> w_;
  std::vector<double> b_;
};

// Fraction of examples where the student recovers the classifier's label
// from the selected tokens alone.
double forward_simulability(const LinearStudent& student,
                            const std::vector<std::vector<int>>& eval_selected,
                            const std::vector<int>& classifier_labels);

struct CfSimResult {
  double rate{0.0};
  int evaluated{0};
  int failed{0};  // generation failures, excluded from the rate
};

// Fraction of examples where editing the rationale flips the classifier.
CfSimResult counterfactual_simulability(
    const std::vector<std::vector<int>>& inputs, const std::vector<std::vector<int>>& rationales,
    const std::function<int(const std::vector<int>&)>& classify,
    const std::function<std::optional<std::vector<int>>(const std::vector<int>&,
                                                        const std::vector<int>&)>& edit);

// Inverted normalized mean absolute difference between two raters on a
// 1..scale_max scale: 1 is perfect agreement, 0 maximal disagreement.
double mad_agreement(const std::vector<double>& ratings_a, const std::vector<double>& ratings_b,
                     double scale_max);

struct ReportRow {
  std::string name;
  double validity{0.0};
  double fluency{0.0};
  double diversity{0.0};
  double closeness{0.0};
  double mean_tokens{0.0};
  int count{0};
};

void write_report_csv(const std::vector<ReportRow>& rows, const std::string& path);

// val., div., clo. are printed x100; fl. and #tks as-is
void write_report_markdown(const std::vector<ReportRow>& rows, const std::string& path);

}  // namespace crest
