#include "crest/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace crest {

namespace {
constexpr double kBleuEps = 1e-9;
}

NgramLM::NgramLM(int vocab_size, double add_k, double bigram_weight)
    : vocab_size_(vocab_size), add_k_(add_k), bigram_weight_(bigram_weight) {
  if (vocab_size <= 0) throw std::invalid_argument("vocab size must be positive");
  if (add_k <= 0.0) throw std::invalid_argument("add-k constant must be positive");
  if (bigram_weight < 0.0 || bigram_weight > 1.0) {
    throw std::invalid_argument("bigram weight must lie in [0, 1]");
  }
  unigram_.assign(vocab_size_, 0.0);
  context_total_.assign(vocab_size_ + 1, 0.0);
}

void NgramLM::fit(const std::vector<std::vector<int>>& texts) {
  for (const auto& text : texts) {
    int prev = -1;
    for (int t : text) {
      if (t < 0 || t >= vocab_size_) throw std::invalid_argument("token outside LM vocabulary");
      unigram_[t] += 1.0;
      total_ += 1.0;
      bigram_[static_cast<std::int64_t>(prev + 1) * vocab_size_ + t] += 1.0;
      context_total_[prev + 1] += 1.0;
      prev = t;
    }
  }
}

double NgramLM::log_prob(int token, int prev) const {
  if (token < 0 || token >= vocab_size_) throw std::invalid_argument("token outside LM vocabulary");
  if (prev < -1 || prev >= vocab_size_) throw std::invalid_argument("context outside LM vocabulary");
  const double v = static_cast<double>(vocab_size_);
  const auto it = bigram_.find(static_cast<std::int64_t>(prev + 1) * vocab_size_ + token);
  const double bi_num = (it == bigram_.end() ? 0.0 : it->second) + add_k_;
  const double bi = bi_num / (context_total_[prev + 1] + add_k_ * v);
  const double uni = (unigram_[token] + add_k_) / (total_ + add_k_ * v);
  return std::log(bigram_weight_ * bi + (1.0 - bigram_weight_) * uni);
}

double NgramLM::perplexity(const std::vector<int>& tokens) const {
  if (tokens.empty()) throw std::invalid_argument("cannot score an empty text");
  double lp = 0.0;
  int prev = -1;
  for (int t : tokens) {
    lp += log_prob(t, prev);
    prev = t;
  }
  return std::exp(-lp / static_cast<double>(tokens.size()));
}

double fluency_ppl(const std::vector<std::vector<int>>& texts, const NgramLM& lm, int* skipped) {
  if (skipped != nullptr) *skipped = 0;
  double sum = 0.0;
  int used = 0;
  for (const auto& text : texts) {
    if (text.empty()) {
      if (skipped != nullptr) ++*skipped;
      continue;
    }
    sum += lm.perplexity(text);
    ++used;
  }
  if (used == 0) throw std::invalid_argument("no non-empty texts to score");
  return sum / static_cast<double>(used);
}

namespace {

std::map<std::vector<int>, int> ngram_counts(const std::vector<int>& text, int n) {
  std::map<std::vector<int>, int> counts;
  for (int i = 0; i + n <= static_cast<int>(text.size()); ++i) {
    counts[std::vector<int>(text.begin() + i, text.begin() + i + n)] += 1;
  }
  return counts;
}

}  // namespace

double bleu(const std::vector<int>& candidate, const std::vector<std::vector<int>>& references) {
  if (references.empty()) throw std::invalid_argument("BLEU needs at least one reference");
  if (candidate.empty()) return 0.0;

  const int c = static_cast<int>(candidate.size());
  int r = static_cast<int>(references[0].size());
  for (const auto& ref : references) {
    const int len = static_cast<int>(ref.size());
    const int cur = std::abs(len - c), best = std::abs(r - c);
    if (cur < best || (cur == best && len < r)) r = len;
  }
  const double bp = c >= r ? 1.0 : std::exp(1.0 - static_cast<double>(r) / c);

  const int orders = std::min(4, c);
  double log_sum = 0.0;
  for (int n = 1; n <= orders; ++n) {
    const auto cand = ngram_counts(candidate, n);
    std::map<std::vector<int>, int> best_ref;
    for (const auto& ref : references) {
      for (const auto& [gram, count] : ngram_counts(ref, n)) {
        best_ref[gram] = std::max(best_ref[gram], count);
      }
    }
    double clipped = 0.0, total = 0.0;
    for (const auto& [gram, count] : cand) {
      total += count;
      const auto it = best_ref.find(gram);
      if (it != best_ref.end()) clipped += std::min(count, it->second);
    }
    log_sum += std::log(std::max(clipped, kBleuEps) / total);
  }
  return bp * std::exp(log_sum / orders);
}

double self_bleu(const std::vector<std::vector<int>>& texts) {
  if (texts.size() < 2) throw std::invalid_argument("self-BLEU needs at least two texts");
  double sum = 0.0;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    std::vector<std::vector<int>> refs;
    refs.reserve(texts.size() - 1);
    for (std::size_t j = 0; j < texts.size(); ++j) {
      if (j != i) refs.push_back(texts[j]);
    }
    sum += bleu(texts[i], refs);
  }
  return sum / static_cast<double>(texts.size());
}

int levenshtein(const std::vector<int>& a, const std::vector<int>& b) {
  const int n = static_cast<int>(a.size()), m = static_cast<int>(b.size());
  std::vector<int> prev(m + 1), cur(m + 1);
  std::iota(prev.begin(), prev.end(), 0);
  for (int i = 1; i <= n; ++i) {
    cur[0] = i;
    for (int j = 1; j <= m; ++j) {
      const int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

double closeness(const std::vector<int>& x, const std::vector<int>& x_edit) {
  if (x.empty() && x_edit.empty()) return 0.0;
  const double denom = static_cast<double>(std::max(x.size(), x_edit.size()));
  return static_cast<double>(levenshtein(x, x_edit)) / denom;
}

std::optional<double> plausibility_auc(const std::vector<double>& scores,
                                       const std::vector<int>& gold_mask) {
  if (scores.size() != gold_mask.size()) {
    throw std::invalid_argument("scores and gold mask lengths differ");
  }
  for (int g : gold_mask) {
    if (g != 0 && g != 1) throw std::invalid_argument("gold mask entries must be 0 or 1");
  }
  const int n = static_cast<int>(scores.size());
  const int pos = static_cast<int>(std::count(gold_mask.begin(), gold_mask.end(), 1));
  const int neg = n - pos;
  if (pos == 0 || neg == 0) return std::nullopt;

  // Mann-Whitney with midranks for ties
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0.0;
  int i = 0;
  while (i < n) {
    int j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (int k = i; k < j; ++k) {
      if (gold_mask[order[k]] == 1) rank_sum_pos += midrank;
    }
    i = j;
  }
  const double u = rank_sum_pos - 0.5 * pos * (pos + 1);
  return u / (static_cast<double>(pos) * neg);
}

std::vector<double> pool_piece_scores(const std::vector<double>& piece_scores,
                                      const std::vector<int>& word_of_piece) {
  if (piece_scores.size() != word_of_piece.size()) {
    throw std::invalid_argument("piece scores and word map lengths differ");
  }
  int n_words = 0;
  for (int w : word_of_piece) {
    if (w < 0) throw std::invalid_argument("negative word index");
    n_words = std::max(n_words, w + 1);
  }
  std::vector<double> sum(n_words, 0.0), count(n_words, 0.0);
  for (std::size_t i = 0; i < piece_scores.size(); ++i) {
    sum[word_of_piece[i]] += piece_scores[i];
    count[word_of_piece[i]] += 1.0;
  }
  for (int w = 0; w < n_words; ++w) {
    if (count[w] > 0.0) sum[w] /= count[w];
  }
  return sum;
}

double validity(const std::vector<CounterfactualPair>& pairs,
                const std::function<std::string(const std::string&)>& classify) {
  if (pairs.empty()) throw std::invalid_argument("no pairs to score");
  int hits = 0;
  for (const auto& p : pairs) {
    if (classify(p.counterfactual) == p.counterfactual_label) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(pairs.size());
}

LinearStudent::LinearStudent(int vocab_size, int n_classes)
    : vocab_size_(vocab_size), n_classes_(n_classes) {
  if (vocab_size <= 0 || n_classes < 2) throw std::invalid_argument("bad student dimensions");
  w_.assign(static_cast<std::size_t>(n_classes_) * vocab_size_, 0.0);
  b_.assign(n_classes_, 0.0);
}

void LinearStudent::fit(const std::vector<std::vector<int>>& selected_tokens,
                        const std::vector<int>& labels, int epochs, double lr) {
  if (selected_tokens.size() != labels.size()) {
    throw std::invalid_argument("feature and label counts differ");
  }
  if (selected_tokens.empty()) throw std::invalid_argument("no training examples");
  const int n = static_cast<int>(selected_tokens.size());
  for (int y : labels) {
    if (y < 0 || y >= n_classes_) throw std::invalid_argument("label outside class range");
  }
  std::vector<double> gw(w_.size()), gb(b_.size());
  std::vector<double> logits(n_classes_), probs(n_classes_);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::fill(gw.begin(), gw.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (int e = 0; e < n; ++e) {
      for (int c = 0; c < n_classes_; ++c) logits[c] = b_[c];
      for (int t : selected_tokens[e]) {
        if (t < 0 || t >= vocab_size_) throw std::invalid_argument("token outside vocabulary");
        for (int c = 0; c < n_classes_; ++c) {
          logits[c] += w_[static_cast<std::size_t>(c) * vocab_size_ + t];
        }
      }
      const double mx = *std::max_element(logits.begin(), logits.end());
      double z = 0.0;
      for (int c = 0; c < n_classes_; ++c) z += (probs[c] = std::exp(logits[c] - mx));
      for (int c = 0; c < n_classes_; ++c) {
        const double g = probs[c] / z - (c == labels[e] ? 1.0 : 0.0);
        gb[c] += g;
        for (int t : selected_tokens[e]) gw[static_cast<std::size_t>(c) * vocab_size_ + t] += g;
      }
    }
    const double scale = lr / n;
    for (std::size_t i = 0; i < w_.size(); ++i) w_[i] -= scale * gw[i];
    for (int c = 0; c < n_classes_; ++c) b_[c] -= scale * gb[c];
  }
}

int LinearStudent::predict(const std::vector<int>& selected_tokens) const {
  std::vector<double> logits(b_.begin(), b_.end());
  for (int t : selected_tokens) {
    if (t < 0 || t >= vocab_size_) throw std::invalid_argument("token outside vocabulary");
    for (int c = 0; c < n_classes_; ++c) {
      logits[c] += w_[static_cast<std::size_t>(c) * vocab_size_ + t];
    }
  }
  return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

double forward_simulability(const LinearStudent& student,
                            const std::vector<std::vector<int>>& eval_selected,
                            const std::vector<int>& classifier_labels) {
  if (eval_selected.size() != classifier_labels.size()) {
    throw std::invalid_argument("feature and label counts differ");
  }
  if (eval_selected.empty()) throw std::invalid_argument("no examples to evaluate");
  int hits = 0;
  for (std::size_t i = 0; i < eval_selected.size(); ++i) {
    if (student.predict(eval_selected[i]) == classifier_labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(eval_selected.size());
}

CfSimResult counterfactual_simulability(
    const std::vector<std::vector<int>>& inputs, const std::vector<std::vector<int>>& rationales,
    const std::function<int(const std::vector<int>&)>& classify,
    const std::function<std::optional<std::vector<int>>(const std::vector<int>&,
                                                        const std::vector<int>&)>& edit) {
  if (inputs.size() != rationales.size()) {
    throw std::invalid_argument("inputs and rationales differ in count");
  }
  CfSimResult out;
  int flips = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto edited = edit(inputs[i], rationales[i]);
    if (!edited.has_value()) {
      ++out.failed;
      continue;
    }
    ++out.evaluated;
    if (classify(*edited) != classify(inputs[i])) ++flips;
  }
  if (out.evaluated > 0) out.rate = static_cast<double>(flips) / out.evaluated;
  return out;
}

double mad_agreement(const std::vector<double>& ratings_a, const std::vector<double>& ratings_b,
                     double scale_max) {
  if (ratings_a.size() != ratings_b.size()) throw std::invalid_argument("rating lists differ");
  if (ratings_a.empty()) throw std::invalid_argument("no ratings");
  if (scale_max <= 1.0) throw std::invalid_argument("scale must extend beyond 1");
  double sum = 0.0;
  for (std::size_t i = 0; i < ratings_a.size(); ++i) sum += std::abs(ratings_a[i] - ratings_b[i]);
  return 1.0 - sum / static_cast<double>(ratings_a.size()) / (scale_max - 1.0);
}

namespace {

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  return out;
}

std::string fixed(double v, int places) {
  std::ostringstream ss;
  ss.setf(std::ios::fixed);
  ss.precision(places);
  ss << v;
  return ss.str();
}

}  // namespace

void write_report_csv(const std::vector<ReportRow>& rows, const std::string& path) {
  auto out = open_out(path);
  out << "name,validity,fluency,diversity,closeness,mean_tokens,count\n";
  for (const auto& r : rows) {
    out << r.name << ',' << fixed(r.validity, 6) << ',' << fixed(r.fluency, 6) << ','
        << fixed(r.diversity, 6) << ',' << fixed(r.closeness, 6) << ','
        << fixed(r.mean_tokens, 6) << ',' << r.count << '\n';
  }
}

void write_report_markdown(const std::vector<ReportRow>& rows, const std::string& path) {
  auto out = open_out(path);
  out << "| system | val. | fl. | div. | clo. | #tks | n |\n";
  out << "|---|---|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    out << "| " << r.name << " | " << fixed(100.0 * r.validity, 2) << " | " << fixed(r.fluency, 2)
        << " | " << fixed(100.0 * r.diversity, 2) << " | " << fixed(100.0 * r.closeness, 2)
        << " | " << fixed(r.mean_tokens, 1) << " | " << r.count << " |\n";
  }
}

}  // namespace crest
