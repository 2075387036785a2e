#include "crest/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>

#include "json.hpp"

namespace crest {

namespace {

using nlohmann::json;

const std::vector<std::string> kPositive = {
    "great", "wonderful", "excellent", "delightful", "superb",
    "charming", "moving", "brilliant", "enjoyable", "fantastic"};

const std::vector<std::string> kNegative = {
    "terrible", "awful", "boring", "dreadful", "clumsy",
    "tedious", "poor", "disappointing", "bland", "painful"};

const std::vector<std::string> kFiller = {
    "the", "movie", "film", "plot", "acting", "scene", "story", "director",
    "was", "with", "and", "a", "an", "of", "script", "soundtrack", "camera",
    "dialogue", "ending", "beginning", "cast", "character", "set", "pace",
    "tone", "it", "felt", "seemed", "looked", "overall"};

const std::vector<std::string> kEntities = {
    "man", "woman", "child", "dog", "cat", "bird", "runner", "teacher", "farmer", "artist"};

const std::vector<std::pair<std::string, std::string>> kAntonyms = {
    {"tall", "short"}, {"happy", "sad"},   {"young", "old"},  {"fast", "slow"},
    {"loud", "quiet"}, {"strong", "weak"}, {"big", "small"},  {"warm", "cold"}};

const std::vector<std::string> kAdverbs = {"very", "quite", "really", "rather"};

bool in_lexicon(const std::vector<std::string>& lex, const std::string& w) {
  return std::find(lex.begin(), lex.end(), w) != lex.end();
}

std::string antonym_of(const std::string& w) {
  for (const auto& [a, b] : kAntonyms) {
    if (w == a) return b;
    if (w == b) return a;
  }
  return {};
}

std::string join(const std::vector<std::string>& tokens) {
  std::string out;
  for (const auto& t : tokens) {
    if (!out.empty()) out.push_back(' ');
    out += t;
  }
  return out;
}

[[noreturn]] void line_error(const std::string& path, std::size_t line, const std::string& what) {
  throw std::runtime_error(path + ":" + std::to_string(line) + ": " + what);
}

json parse_line(const std::string& path, std::size_t line_no, const std::string& line) {
  json j = json::parse(line, nullptr, false);
  if (j.is_discarded() || !j.is_object()) line_error(path, line_no, "malformed JSON object");
  return j;
}

void require_fields(const json& j, const std::string& path, std::size_t line_no,
                    const std::vector<std::string>& fields) {
  for (const auto& f : fields) {
    if (!j.contains(f)) line_error(path, line_no, "missing field '" + f + "'");
  }
}

std::vector<int> mask_field(const json& j, const char* key) {
  std::vector<int> mask;
  for (const auto& v : j.at(key)) mask.push_back(v.get<int>() != 0 ? 1 : 0);
  return mask;
}

}  // namespace

const std::vector<std::string>& sentiment_classes() {
  static const std::vector<std::string> classes = {"negative", "positive"};
  return classes;
}

const std::vector<std::string>& nli_classes() {
  static const std::vector<std::string> classes = {"entailment", "neutral", "contradiction"};
  return classes;
}

std::vector<Example> gen_sentiment_corpus(std::uint64_t seed, int size, int min_len, int max_len,
                                          double distractor_rate) {
  if (size < 1) throw std::invalid_argument("corpus size must be at least 1");
  if (min_len < 4 || max_len < min_len) throw std::invalid_argument("bad length range");
  Rng rng(seed);
  std::vector<std::string> labels;
  labels.reserve(size);
  for (int i = 0; i < size; ++i) labels.push_back(i < size / 2 ? "positive" : "negative");
  rng.shuffle(labels);

  std::vector<Example> out;
  out.reserve(size);
  for (int i = 0; i < size; ++i) {
    const std::string& label = labels[i];
    const bool positive = label == "positive";
    const int n = rng.uniform_int(min_len, max_len);
    int polarity = 1 + rng.uniform_int(0, 2);
    const bool distract = polarity == 3 && rng.bernoulli(distractor_rate);

    std::vector<int> slots(n);
    for (int p = 0; p < n; ++p) slots[p] = p;
    rng.shuffle(slots);
    std::vector<int> chosen(slots.begin(), slots.begin() + polarity);
    std::sort(chosen.begin(), chosen.end());

    std::vector<std::string> tokens(n);
    std::vector<int> rationale(n, 0);
    for (int p = 0; p < n; ++p) tokens[p] = kFiller[rng.uniform_int(0, kFiller.size() - 1)];
    for (int c = 0; c < polarity; ++c) {
      const bool flip = distract && c == polarity - 1;
      const auto& lex = (positive != flip) ? kPositive : kNegative;
      tokens[chosen[c]] = lex[rng.uniform_int(0, static_cast<int>(lex.size()) - 1)];
      rationale[chosen[c]] = 1;
    }
    Example e;
    e.id = i;
    e.text = join(tokens);
    e.label = label;
    e.rationale = std::move(rationale);
    e.split = "train";
    out.push_back(std::move(e));
  }
  return out;
}

std::string sentiment_oracle(const std::string& text) {
  int pos = 0, neg = 0;
  for (const auto& w : word_tokenize(text)) {
    if (in_lexicon(kPositive, w)) ++pos;
    if (in_lexicon(kNegative, w)) ++neg;
  }
  return pos >= neg ? "positive" : "negative";
}

std::vector<Example> gen_nli_corpus(std::uint64_t seed, int size) {
  if (size < 1) throw std::invalid_argument("corpus size must be at least 1");
  Rng rng(seed);
  const std::vector<std::string>& classes = nli_classes();
  std::vector<std::string> labels;
  labels.reserve(size);
  for (int i = 0; i < size; ++i) labels.push_back(classes[i % 3]);
  rng.shuffle(labels);

  std::vector<Example> out;
  out.reserve(size);
  for (int i = 0; i < size; ++i) {
    const std::string& label = labels[i];
    const std::string& entity = kEntities[rng.uniform_int(0, kEntities.size() - 1)];
    const int pair_idx = rng.uniform_int(0, static_cast<int>(kAntonyms.size()) - 1);
    const bool side = rng.bernoulli(0.5);
    const std::string premise_attr =
        side ? kAntonyms[pair_idx].second : kAntonyms[pair_idx].first;

    std::string hyp_attr;
    if (label == "entailment") {
      hyp_attr = premise_attr;
    } else if (label == "contradiction") {
      hyp_attr = antonym_of(premise_attr);
    } else {
      int other = rng.uniform_int(0, static_cast<int>(kAntonyms.size()) - 2);
      if (other >= pair_idx) ++other;
      hyp_attr = rng.bernoulli(0.5) ? kAntonyms[other].first : kAntonyms[other].second;
    }

    std::vector<std::string> tokens = {"the", entity, "is", premise_attr, "<sep>",
                                       "the", entity, "is"};
    if (rng.bernoulli(0.3)) tokens.push_back(kAdverbs[rng.uniform_int(0, kAdverbs.size() - 1)]);
    tokens.push_back(hyp_attr);

    Example e;
    e.id = i;
    e.text = join(tokens);
    e.label = label;
    e.rationale.assign(tokens.size(), 0);
    e.rationale.back() = 1;
    e.split = "train";
    out.push_back(std::move(e));
  }
  return out;
}

std::string nli_oracle(const std::string& text) {
  const auto tokens = word_tokenize(text);
  int sep = -1;
  for (int i = 0; i < static_cast<int>(tokens.size()); ++i) {
    if (tokens[i] == "<sep>") {
      sep = i;
      break;
    }
  }
  if (sep <= 0 || sep + 1 >= static_cast<int>(tokens.size())) return "neutral";
  const std::string& premise_attr = tokens[sep - 1];
  const std::string& hyp_attr = tokens.back();
  if (hyp_attr == premise_attr) return "entailment";
  if (antonym_of(premise_attr) == hyp_attr) return "contradiction";
  return "neutral";
}

void assign_splits(std::vector<Example>& examples, double train_frac, double dev_frac) {
  const std::size_t n = examples.size();
  const auto train_end = static_cast<std::size_t>(std::llround(train_frac * n));
  const auto dev_end = train_end + static_cast<std::size_t>(std::llround(dev_frac * n));
  for (std::size_t i = 0; i < n; ++i) {
    examples[i].split = i < train_end ? "train" : (i < dev_end ? "dev" : "test");
  }
}

std::vector<Example> filter_split(const std::vector<Example>& examples, const std::string& split) {
  std::vector<Example> out;
  for (const auto& e : examples) {
    if (e.split == split) out.push_back(e);
  }
  return out;
}

Vocab build_vocab(const std::vector<Example>& examples, const std::vector<std::string>& labels) {
  Vocab v;
  v.add_labels(labels);
  v.add_sentinels();
  std::set<std::string> words;
  for (const auto& e : examples) {
    for (const auto& w : word_tokenize(e.text)) words.insert(w);
  }
  for (const auto& w : words) v.add(w);
  return v;
}

std::vector<Example> read_examples_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<Example> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const json j = parse_line(path, line_no, line);
    require_fields(j, path, line_no, {"id", "text", "label", "split"});
    Example e;
    e.id = j.at("id").get<long>();
    e.text = j.at("text").get<std::string>();
    e.label = j.at("label").get<std::string>();
    e.split = j.at("split").get<std::string>();
    if (j.contains("rationale") && !j.at("rationale").empty()) {
      e.rationale = mask_field(j, "rationale");
      const std::size_t n_tokens = word_tokenize(e.text).size();
      if (e.rationale.size() != n_tokens) {
        line_error(path, line_no, "rationale length " + std::to_string(e.rationale.size()) +
                                      " does not match " + std::to_string(n_tokens) + " tokens");
      }
      if (std::find(e.rationale.begin(), e.rationale.end(), 1) == e.rationale.end()) {
        line_error(path, line_no, "rationale has no selected token");
      }
    }
    out.push_back(std::move(e));
  }
  return out;
}

void write_examples_jsonl(const std::vector<Example>& examples, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& e : examples) {
    json j;
    j["id"] = e.id;
    j["text"] = e.text;
    j["label"] = e.label;
    if (!e.rationale.empty()) j["rationale"] = e.rationale;
    j["split"] = e.split;
    out << j.dump() << '\n';
  }
}

std::vector<CounterfactualPair> read_pairs_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<CounterfactualPair> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const json j = parse_line(path, line_no, line);
    require_fields(j, path, line_no,
                   {"id", "text", "label", "counterfactual", "counterfactual_label",
                    "rationale_mask", "counterfactual_mask"});
    CounterfactualPair p;
    p.id = j.at("id").get<long>();
    p.text = j.at("text").get<std::string>();
    p.label = j.at("label").get<std::string>();
    p.counterfactual = j.at("counterfactual").get<std::string>();
    p.counterfactual_label = j.at("counterfactual_label").get<std::string>();
    p.rationale_mask = mask_field(j, "rationale_mask");
    p.counterfactual_mask = mask_field(j, "counterfactual_mask");
    if (j.contains("valid") && !j.at("valid").is_null()) p.valid = j.at("valid").get<bool>();
    if (j.contains("flagged")) p.flagged = j.at("flagged").get<bool>();
    if (p.label == p.counterfactual_label) {
      line_error(path, line_no, "counterfactual label equals the factual label");
    }
    out.push_back(std::move(p));
  }
  return out;
}

void write_pairs_jsonl(const std::vector<CounterfactualPair>& pairs, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& p : pairs) {
    json j;
    j["id"] = p.id;
    j["text"] = p.text;
    j["label"] = p.label;
    j["counterfactual"] = p.counterfactual;
    j["counterfactual_label"] = p.counterfactual_label;
    j["rationale_mask"] = p.rationale_mask;
    j["counterfactual_mask"] = p.counterfactual_mask;
    if (p.valid.has_value()) j["valid"] = *p.valid;
    if (p.flagged) j["flagged"] = true;
    out << j.dump() << '\n';
  }
}

}  // namespace crest
