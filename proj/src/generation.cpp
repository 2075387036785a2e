#include "crest/generation.hpp"

#include <algorithm>
#include <stdexcept>

#include "crest/agreement.hpp"

namespace crest {

int label_flip(int y_f, int n_classes, const std::vector<float>& probs) {
  if (y_f < 0 || y_f >= n_classes) throw std::invalid_argument("class index out of range");
  if (n_classes == 2) return 1 - y_f;
  if (n_classes != 3) throw std::invalid_argument("label flip covers binary and NLI tasks only");
  if (y_f == 0) return 2;
  if (y_f == 2) return 0;
  // neutral start: the best-scored class that is not the start itself
  if (probs.size() != 3) {
    throw std::invalid_argument("a neutral start needs class probabilities to flip");
  }
  int best = -1;
  for (int c = 0; c < 3; ++c) {
    if (c == y_f) continue;
    if (best < 0 || probs[c] > probs[best]) best = c;
  }
  return best;
}

namespace {

int class_index(const std::string& name, const std::vector<std::string>& classes) {
  const auto it = std::find(classes.begin(), classes.end(), name);
  if (it == classes.end()) throw std::invalid_argument("unknown class " + name);
  return static_cast<int>(it - classes.begin());
}

int argmax(const std::vector<float>& v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

std::optional<CounterfactualPair> generate_counterfactual(const Example& example,
                                                          const Vocab& vocab,
                                                          const std::vector<std::string>& classes,
                                                          const Rationalizer& masker,
                                                          const Editor& editor,
                                                          const GenerationOptions& opts,
                                                          std::string* why) {
  const auto skip = [&](const std::string& reason) {
    if (why != nullptr) *why = "example " + std::to_string(example.id) + ": " + reason;
    return std::nullopt;
  };
  const std::vector<int> tokens = vocab.encode(example.text);
  if (tokens.empty()) return skip("empty text");

  const RationaleOutput rationale = masker.rationalize(tokens, opts.budget, opts.freeze_premise);

  int y_f;
  int y_c;
  if (example.label.empty()) {
    y_f = argmax(rationale.probs);
    y_c = label_flip(y_f, static_cast<int>(classes.size()), rationale.probs);
  } else {
    y_f = class_index(example.label, classes);
    if (classes.size() == 3 && y_f == 1) return skip("neutral start");
    y_c = label_flip(y_f, static_cast<int>(classes.size()));
  }

  MaskedInput masked;
  try {
    masked = apply_sentinels(tokens, rationale.z, vocab);
  } catch (const std::invalid_argument&) {
    return skip("empty rationale");
  }
  const InfillResult edited = editor.generate(masked, vocab.label_id(classes[y_c]), opts.beam);

  CounterfactualPair pair;
  pair.id = example.id;
  pair.text = vocab.decode(tokens);
  pair.label = classes[y_f];
  pair.counterfactual = vocab.decode(edited.tokens);
  pair.counterfactual_label = classes[y_c];
  pair.rationale_mask = rationale.z;
  pair.counterfactual_mask = derive_counterfactual_rationale(tokens, edited.tokens);
  pair.flagged = edited.flagged;
  return pair;
}

std::vector<CounterfactualPair> generate_pairs(const std::vector<Example>& examples,
                                               const Vocab& vocab,
                                               const std::vector<std::string>& classes,
                                               const Rationalizer& masker, const Editor& editor,
                                               const GenerationOptions& opts,
                                               GenerationStats* stats,
                                               std::vector<std::string>* log) {
  GenerationStats local;
  std::vector<CounterfactualPair> pairs;
  pairs.reserve(examples.size());
  for (const Example& ex : examples) {
    ++local.attempted;
    std::string why;
    auto pair = generate_counterfactual(ex, vocab, classes, masker, editor, opts, &why);
    if (!pair.has_value()) {
      ++local.skipped;
      if (log != nullptr) log->push_back(why);
      continue;
    }
    ++local.generated;
    if (pair->flagged) ++local.flagged;
    pairs.push_back(std::move(*pair));
  }
  if (stats != nullptr) *stats = local;
  return pairs;
}

std::pair<std::vector<CounterfactualPair>, std::vector<CounterfactualPair>> validity_filter(
    const std::vector<CounterfactualPair>& pairs, const Rationalizer& predictor,
    const Vocab& vocab, const std::vector<std::string>& classes) {
  std::pair<std::vector<CounterfactualPair>, std::vector<CounterfactualPair>> out;
  for (const CounterfactualPair& pair : pairs) {
    const auto probs = predictor.rationalize(vocab.encode(pair.counterfactual)).probs;
    const bool keep = classes[argmax(probs)] == pair.counterfactual_label;
    CounterfactualPair copy = pair;
    copy.valid = keep;
    (keep ? out.first : out.second).push_back(std::move(copy));
  }
  return out;
}

std::vector<EditExample> build_edit_examples(const std::vector<Example>& examples,
                                             const Vocab& vocab,
                                             const std::vector<std::string>& classes,
                                             const Rationalizer& masker,
                                             const GenerationOptions& opts, int* skipped) {
  if (skipped != nullptr) *skipped = 0;
  std::vector<EditExample> out;
  out.reserve(examples.size());
  for (const Example& ex : examples) {
    EditExample edit;
    edit.tokens = vocab.encode(ex.text);
    if (edit.tokens.empty()) {
      if (skipped != nullptr) ++*skipped;
      continue;
    }
    edit.z = masker.rationalize(edit.tokens, opts.budget, opts.freeze_premise).z;
    if (std::count(edit.z.begin(), edit.z.end(), 1) == 0) {
      if (skipped != nullptr) ++*skipped;
      continue;
    }
    (void)class_index(ex.label, classes);
    edit.label_id = vocab.label_id(ex.label);
    out.push_back(std::move(edit));
  }
  return out;
}

std::vector<SweepRow> budget_sweep(const std::vector<Example>& examples,
                                   const std::vector<double>& budgets,
                                   const std::function<const Rationalizer&(double)>& masker_for,
                                   const Editor& editor, const Vocab& vocab,
                                   const std::vector<std::string>& classes,
                                   const std::function<std::string(const std::string&)>& classify,
                                   const NgramLM& lm, const GenerationOptions& opts) {
  std::vector<SweepRow> rows;
  for (const double budget : budgets) {
    const Rationalizer& masker = masker_for(budget);
    GenerationOptions at_budget = opts;
    at_budget.budget = {};
    const auto pairs =
        generate_pairs(examples, vocab, classes, masker, editor, at_budget, nullptr, nullptr);
    SweepRow row;
    row.budget = budget;
    if (!pairs.empty()) {
      row.validity = validity(pairs, classify);
      std::vector<std::vector<int>> texts;
      double close = 0.0;
      for (const auto& p : pairs) {
        texts.push_back(vocab.encode(p.counterfactual));
        close += closeness(vocab.encode(p.text), texts.back());
      }
      row.fluency = fluency_ppl(texts, lm);
      row.closeness = close / static_cast<double>(pairs.size());
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace crest
