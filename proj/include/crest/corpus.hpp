#pragma once

#include <optional>
#include <string>
#include <vector>

#include "crest/random.hpp"
#include "crest/tokenizer.hpp"

namespace crest {

struct Example {
  long id{0};
  std::string text;
  std::string label;
  std::vector<int> rationale;  // 0/1 over word_tokenize(text); empty when absent
  std::string split;           // train / dev / test
};

struct CounterfactualPair {
  long id{0};
  std::string text;
  std::string label;
  std::string counterfactual;
  std::string counterfactual_label;
  std::vector<int> rationale_mask;
  std::vector<int> counterfactual_mask;
  std::optional<bool> valid;
  bool flagged{false};  // decoder salvage or other degraded path
};

// Class name orderings shared by models, oracles, and the CLI.
const std::vector<std::string>& sentiment_classes();  // negative, positive
const std::vector<std::string>& nli_classes();        // entailment, neutral, contradiction

// Templated single-sentence reviews. Each carries 1 to 3 polarity tokens from
// disjoint lexica; the label is the majority polarity and the gold rationale
// marks every polarity token. distractor_rate controls how often a minority
// polarity token is mixed in.
std::vector<Example> gen_sentiment_corpus(std::uint64_t seed, int size, int min_len, int max_len,
                                          double distractor_rate);

// Premise/hypothesis pairs over entity-attribute facts, concatenated with
// <sep>. The gold rationale marks the decisive hypothesis attribute.
std::vector<Example> gen_nli_corpus(std::uint64_t seed, int size);

// Oracle classifiers that defined the corpora; used as ground truth in tests
// and metric runs.
std::string sentiment_oracle(const std::string& text);
std::string nli_oracle(const std::string& text);

// In-place train/dev/test assignment over the given order.
void assign_splits(std::vector<Example>& examples, double train_frac, double dev_frac);

std::vector<Example> filter_split(const std::vector<Example>& examples, const std::string& split);

Vocab build_vocab(const std::vector<Example>& examples, const std::vector<std::string>& labels);

std::vector<Example> read_examples_jsonl(const std::string& path);
void write_examples_jsonl(const std::vector<Example>& examples, const std::string& path);

std::vector<CounterfactualPair> read_pairs_jsonl(const std::string& path);
void write_pairs_jsonl(const std::vector<CounterfactualPair>& pairs, const std::string& path);

}  // namespace crest
