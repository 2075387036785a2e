#pragma once

#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "crest/corpus.hpp"
#include "crest/editor.hpp"
#include "crest/metrics.hpp"
#include "crest/rationalizer.hpp"

namespace crest {

// Target class for a counterfactual. Binary tasks flip; three-class NLI
// swaps entailment and contradiction (class order as in nli_classes()),
// and a neutral start falls back to the most probable class that is not
// the start, which needs probabilities.
int label_flip(int y_f, int n_classes, const std::vector<float>& probs = {});

struct GenerationOptions {
  BeamConfig beam;
  std::optional<double> budget;  // masker budget override
  bool freeze_premise{false};    // NLI: the premise segment stays intact
};

struct GenerationStats {
  int attempted{0};
  int generated{0};
  int skipped{0};  // neutral starts and empty rationales
  int flagged{0};  // decodes that needed salvage
};

// Mask, flip, infill. Returns nothing when the example is skipped (neutral
// NLI start, empty rationale); the reason lands in *why. An unlabeled
// example takes the masker's prediction as its factual label.
std::optional<CounterfactualPair> generate_counterfactual(const Example& example,
                                                          const Vocab& vocab,
                                                          const std::vector<std::string>& classes,
                                                          const Rationalizer& masker,
                                                          const Editor& editor,
                                                          const GenerationOptions& opts,
                                                          std::string* why = nullptr);

std::vector<CounterfactualPair> generate_pairs(const std::vector<Example>& examples,
                                               const Vocab& vocab,
                                               const std::vector<std::string>& classes,
                                               const Rationalizer& masker, const Editor& editor,
                                               const GenerationOptions& opts,
                                               GenerationStats* stats = nullptr,
                                               std::vector<std::string>* log = nullptr);

// Split pairs by whether the predictor assigns the counterfactual its
// intended label; every pair lands in exactly one half with valid set.
std::pair<std::vector<CounterfactualPair>, std::vector<CounterfactualPair>> validity_filter(
    const std::vector<CounterfactualPair>& pairs, const Rationalizer& predictor,
    const Vocab& vocab, const std::vector<std::string>& classes);

// Span-infilling curriculum for the editor: the masker's rationale marks
// the spans, the example's own label conditions the reconstruction.
std::vector<EditExample> build_edit_examples(const std::vector<Example>& examples,
                                             const Vocab& vocab,
                                             const std::vector<std::string>& classes,
                                             const Rationalizer& masker,
                                             const GenerationOptions& opts,
                                             int* skipped = nullptr);

struct SweepRow {
  double budget{0.0};
  double validity{0.0};
  double fluency{0.0};
  double closeness{0.0};
};

// One generation run per budget with that budget's masker; validity under
// the supplied classifier, fluency under the supplied language model.
std::vector<SweepRow> budget_sweep(const std::vector<Example>& examples,
                                   const std::vector<double>& budgets,
                                   const std::function<const Rationalizer&(double)>& masker_for,
                                   const Editor& editor, const Vocab& vocab,
                                   const std::vector<std::string>& classes,
                                   const std::function<std::string(const std::string&)>& classify,
                                   const NgramLM& lm, const GenerationOptions& opts);

}  // namespace crest
