// crest: batch driver for the counterfactual rationalization pipeline.
//
//   gen-data         synthesize a labeled corpus with splits
//   train-masker     fit the select-then-classify model
//   train-editor     fit the span infiller on masker spans
//   generate         mask, flip the label, infill counterfactuals
//   filter           keep pairs the predictor labels as intended
//   augment          append counterfactuals to the corpus as train rows
//   train-agreement  dual-flow training tied to the stored masks
//   eval-metrics     pair metrics, optionally aggregated across seeds
//   simulate         student-based simulability of the rationales
//   sweep-budget     generation quality as the budget varies
//
// A flat key=value config file fills options first; command-line flags
// win. Every artifact records the producing subcommand, seed, and config
// hash: inline for reports, in a .meta.json sidecar otherwise.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "crest/agreement.hpp"
#include "crest/corpus.hpp"
#include "crest/editor.hpp"
#include "crest/generation.hpp"
#include "crest/metrics.hpp"
#include "crest/random.hpp"
#include "crest/rationalizer.hpp"

namespace {

using namespace crest;

struct RunConfig {
  std::uint64_t seed{42};
  // corpus
  std::string task{"sentiment"};
  int size{2500};
  int min_words{6};
  int max_words{12};
  double distractor_rate{0.1};
  double train_frac{0.8};
  double dev_frac{0.1};
  // model
  int d{64};
  int max_len{48};
  double budget{0.3};
  bool budget_set{false};  // an explicit budget overrides a checkpoint's own
  double transition_penalty{1e-4};
  // training
  double lr{3e-3};
  double weight_decay{1e-6};
  int batch_size{32};
  int epochs{8};
  int patience{5};
  // decoding
  int beam_size{15};
  bool no_repeat_bigram{true};
  // agreement
  double alpha{0.01};
  double lambda{0.001};
  // execution
  int threads{1};
  bool freeze_premise{false};
  std::string split{"test"};
  std::string name{"crest"};
  std::string seeds;                   // comma list for eval-metrics
  std::string budgets{"0.1,0.3,0.5"};  // comma list for sweep-budget
  // artifacts
  std::string data;
  std::string pairs;
  std::string masker;
  std::string editor;
  std::string out;
  std::string report;
  std::string dropped;
};

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(std::numeric_limits<double>::max_digits10);
  s << v;
  return s.str();
}

// $VAR or ${VAR} at the front of a path expands from the environment
std::string expand_root(const std::string& value) {
  if (value.empty() || value[0] != '$') return value;
  std::size_t end;
  std::string var;
  if (value.size() > 1 && value[1] == '{') {
    end = value.find('}');
    if (end == std::string::npos) throw std::invalid_argument("unclosed ${ in path: " + value);
    var = value.substr(2, end - 2);
    ++end;
  } else {
    end = value.find('/');
    if (end == std::string::npos) end = value.size();
    var = value.substr(1, end - 1);
  }
  const char* got = std::getenv(var.c_str());
  if (got == nullptr) throw std::invalid_argument("undefined environment variable in path: " + var);
  return got + value.substr(end);
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

double parse_double(const std::string& key, const std::string& raw) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(raw, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != raw.size() || raw.empty()) {
    throw std::invalid_argument("bad number for " + key + ": '" + raw + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& raw) {
  if (raw == "true" || raw == "1") return true;
  if (raw == "false" || raw == "0") return false;
  throw std::invalid_argument("bad boolean for " + key + ": '" + raw + "' (true or false)");
}

Field int_field(const std::string& key, int RunConfig::*p) {
  return {key, [p](const RunConfig& c) { return std::to_string(c.*p); },
          [p, key](RunConfig& c, const std::string& raw) {
            c.*p = static_cast<int>(parse_double(key, raw));
          }};
}

Field dbl_field(const std::string& key, double RunConfig::*p) {
  return {key, [p](const RunConfig& c) { return fmt(c.*p); },
          [p, key](RunConfig& c, const std::string& raw) { c.*p = parse_double(key, raw); }};
}

Field bool_field(const std::string& key, bool RunConfig::*p) {
  return {key, [p](const RunConfig& c) { return c.*p ? "true" : "false"; },
          [p, key](RunConfig& c, const std::string& raw) { c.*p = parse_bool(key, raw); }};
}

Field str_field(const std::string& key, std::string RunConfig::*p) {
  return {key, [p](const RunConfig& c) { return c.*p; },
          [p](RunConfig& c, const std::string& raw) { c.*p = raw; }};
}

Field path_field(const std::string& key, std::string RunConfig::*p) {
  return {key, [p](const RunConfig& c) { return c.*p; },
          [p](RunConfig& c, const std::string& raw) { c.*p = expand_root(raw); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> all = [] {
    std::vector<Field> f;
    f.push_back({"seed", [](const RunConfig& c) { return std::to_string(c.seed); },
                 [](RunConfig& c, const std::string& raw) {
                   c.seed = static_cast<std::uint64_t>(parse_double("seed", raw));
                 }});
    f.push_back(str_field("task", &RunConfig::task));
    f.push_back(int_field("size", &RunConfig::size));
    f.push_back(int_field("min_words", &RunConfig::min_words));
    f.push_back(int_field("max_words", &RunConfig::max_words));
    f.push_back(dbl_field("distractor_rate", &RunConfig::distractor_rate));
    f.push_back(dbl_field("train_frac", &RunConfig::train_frac));
    f.push_back(dbl_field("dev_frac", &RunConfig::dev_frac));
    f.push_back(int_field("d", &RunConfig::d));
    f.push_back(int_field("max_len", &RunConfig::max_len));
    f.push_back({"budget", [](const RunConfig& c) { return fmt(c.budget); },
                 [](RunConfig& c, const std::string& raw) {
                   c.budget = parse_double("budget", raw);
                   c.budget_set = true;
                 }});
    f.push_back(dbl_field("transition_penalty", &RunConfig::transition_penalty));
    f.push_back(dbl_field("lr", &RunConfig::lr));
    f.push_back(dbl_field("weight_decay", &RunConfig::weight_decay));
    f.push_back(int_field("batch_size", &RunConfig::batch_size));
    f.push_back(int_field("epochs", &RunConfig::epochs));
    f.push_back(int_field("patience", &RunConfig::patience));
    f.push_back(int_field("beam_size", &RunConfig::beam_size));
    f.push_back(bool_field("no_repeat_bigram", &RunConfig::no_repeat_bigram));
    f.push_back(dbl_field("alpha", &RunConfig::alpha));
    f.push_back(dbl_field("lambda", &RunConfig::lambda));
    f.push_back(int_field("threads", &RunConfig::threads));
    f.push_back(bool_field("freeze_premise", &RunConfig::freeze_premise));
    f.push_back(str_field("split", &RunConfig::split));
    f.push_back(str_field("name", &RunConfig::name));
    f.push_back(str_field("seeds", &RunConfig::seeds));
    f.push_back(str_field("budgets", &RunConfig::budgets));
    f.push_back(path_field("data", &RunConfig::data));
    f.push_back(path_field("pairs", &RunConfig::pairs));
    f.push_back(path_field("masker", &RunConfig::masker));
    f.push_back(path_field("editor", &RunConfig::editor));
    f.push_back(path_field("out", &RunConfig::out));
    f.push_back(path_field("report", &RunConfig::report));
    f.push_back(path_field("dropped", &RunConfig::dropped));
    return f;
  }();
  return all;
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

void apply_config_file(const std::string& path, RunConfig& cfg) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config file: " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument(path + ":" + std::to_string(lineno) + ": expected key=value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto it = std::find_if(fields().begin(), fields().end(),
                                 [&](const Field& f) { return f.key == key; });
    if (it == fields().end()) {
      throw std::invalid_argument(path + ":" + std::to_string(lineno) + ": unknown key '" + key +
                                  "'");
    }
    it->set(cfg, value);
  }
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// hash of the effective configuration after file and flag overrides
std::string config_hash(const RunConfig& cfg) {
  std::vector<std::string> lines;
  lines.reserve(fields().size());
  for (const auto& f : fields()) lines.push_back(f.key + "=" + f.get(cfg));
  std::sort(lines.begin(), lines.end());
  std::string all;
  for (const auto& l : lines) {
    all += l;
    all += '\n';
  }
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << fnv1a(all);
  return s.str();
}

void write_meta(const std::string& artifact, const std::string& sub, const RunConfig& cfg) {
  nlohmann::json j;
  j["artifact"] = artifact;
  j["subcommand"] = sub;
  j["seed"] = cfg.seed;
  j["config"] = config_hash(cfg);
  std::ofstream out(artifact + ".meta.json");
  if (!out) throw std::runtime_error("cannot write " + artifact + ".meta.json");
  out << j.dump(2) << "\n";
}

std::string meta_line(const std::string& sub, const RunConfig& cfg) {
  return "# crest " + sub + " seed=" + std::to_string(cfg.seed) + " config=" + config_hash(cfg);
}

void prepend_line(const std::string& path, const std::string& line) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::stringstream rest;
  rest << in.rdbuf();
  in.close();
  std::ofstream out(path);
  out << line << "\n" << rest.str();
}

void require_file(const std::string& path, const std::string& flag, const std::string& what,
                  const std::string& producer) {
  if (path.empty()) {
    throw std::invalid_argument("--" + flag + " is required (" + what + ")");
  }
  std::ifstream probe(path);
  if (!probe) {
    throw std::runtime_error("missing " + what + ": " + path + " (produce it with `crest " +
                             producer + "`)");
  }
}

void require_out(const RunConfig& cfg) {
  if (cfg.out.empty()) throw std::invalid_argument("--out is required");
}

const std::vector<std::string>& classes_for(const std::string& task) {
  if (task == "sentiment") return sentiment_classes();
  if (task == "nli") return nli_classes();
  throw std::invalid_argument("unknown task: " + task + " (sentiment or nli)");
}

std::function<std::string(const std::string&)> oracle_for(const std::string& task) {
  if (task == "nli") return [](const std::string& t) { return nli_oracle(t); };
  return [](const std::string& t) { return sentiment_oracle(t); };
}

std::vector<Example> load_examples(const RunConfig& cfg) {
  require_file(cfg.data, "data", "data file", "gen-data");
  return read_examples_jsonl(cfg.data);
}

int class_index(const std::string& label, const std::vector<std::string>& classes) {
  const auto it = std::find(classes.begin(), classes.end(), label);
  if (it == classes.end()) throw std::invalid_argument("unknown label: " + label);
  return static_cast<int>(it - classes.begin());
}

std::vector<std::pair<std::vector<int>, int>> encode_labeled(const std::vector<Example>& split,
                                                             const Vocab& vocab,
                                                             const std::vector<std::string>& cls) {
  std::vector<std::pair<std::vector<int>, int>> out;
  out.reserve(split.size());
  for (const auto& ex : split) {
    out.emplace_back(vocab.encode(ex.text), class_index(ex.label, cls));
  }
  return out;
}

RationalizerConfig masker_config(const RunConfig& cfg, const Vocab& vocab, int n_classes) {
  RationalizerConfig m;
  m.vocab_size = vocab.size();
  m.n_classes = n_classes;
  m.d = cfg.d;
  m.max_len = cfg.max_len;
  m.budget = cfg.budget;
  m.transition_penalty = cfg.transition_penalty;
  return m;
}

Rationalizer load_masker(const RunConfig& cfg, const Vocab& vocab) {
  require_file(cfg.masker, "masker", "masker checkpoint", "train-masker");
  return Rationalizer::load(cfg.masker, vocab.hash());
}

Editor load_editor(const RunConfig& cfg, const Vocab& vocab) {
  require_file(cfg.editor, "editor", "editor checkpoint", "train-editor");
  return Editor::load(cfg.editor, vocab);
}

GenerationOptions generation_options(const RunConfig& cfg) {
  GenerationOptions opts;
  opts.beam.size = cfg.beam_size;
  opts.beam.no_repeat_bigram = cfg.no_repeat_bigram;
  if (cfg.budget_set) opts.budget = cfg.budget;
  opts.freeze_premise = cfg.freeze_premise;
  return opts;
}

std::vector<double> parse_list(const std::string& raw, const std::string& key) {
  std::vector<double> out;
  std::stringstream s(raw);
  std::string item;
  while (std::getline(s, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    out.push_back(parse_double(key, item));
  }
  if (out.empty()) throw std::invalid_argument("empty list for " + key);
  return out;
}

// one pass over the batches in file order; returns example-mean loss
double train_masker_epoch(Rationalizer& model,
                          const std::vector<std::pair<std::vector<int>, int>>& data,
                          int batch_size, grad::AdamW& opt) {
  double total = 0.0;
  for (std::size_t at = 0; at < data.size(); at += batch_size) {
    const std::size_t hi = std::min(data.size(), at + batch_size);
    const std::vector<std::pair<std::vector<int>, int>> batch(data.begin() + at,
                                                              data.begin() + hi);
    total += model.train_step(batch, opt) * static_cast<double>(batch.size());
  }
  return total / static_cast<double>(data.size());
}

double dev_accuracy(const Rationalizer& model,
                    const std::vector<std::pair<std::vector<int>, int>>& dev) {
  int hit = 0;
  for (const auto& [tokens, label] : dev) {
    const auto probs = model.rationalize(tokens).probs;
    const int got = static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
    hit += got == label;
  }
  return static_cast<double>(hit) / static_cast<double>(dev.size());
}

// teacher-forced mean per-token loss without touching the parameters
double editor_eval_loss(const Editor& model, const Vocab& vocab,
                        const std::vector<EditExample>& edits) {
  double total = 0.0;
  long count = 0;
  for (const auto& e : edits) {
    const MaskedInput masked = apply_sentinels(e.tokens, e.z, vocab);
    std::vector<int> source;
    source.push_back(e.label_id);
    source.insert(source.end(), masked.source.begin(), masked.source.end());
    std::vector<int> prefix;
    for (int t : masked.target) {
      total -= model.next_token_logprobs(source, prefix)[t];
      prefix.push_back(t);
      ++count;
    }
  }
  return count > 0 ? total / static_cast<double>(count) : 0.0;
}

int run_gen_data(const RunConfig& cfg) {
  require_out(cfg);
  classes_for(cfg.task);
  if (cfg.size < 1) throw std::invalid_argument("size must be positive");
  std::vector<Example> corpus;
  if (cfg.task == "nli") {
    corpus = gen_nli_corpus(cfg.seed, cfg.size);
  } else {
    corpus = gen_sentiment_corpus(cfg.seed, cfg.size, cfg.min_words, cfg.max_words,
                                  cfg.distractor_rate);
  }
  assign_splits(corpus, cfg.train_frac, cfg.dev_frac);
  write_examples_jsonl(corpus, cfg.out);
  write_meta(cfg.out, "gen-data", cfg);
  std::map<std::string, int> by_split;
  for (const auto& ex : corpus) ++by_split[ex.split];
  std::cout << "wrote " << corpus.size() << " " << cfg.task << " examples to " << cfg.out;
  for (const auto& [split, n] : by_split) std::cout << " " << split << "=" << n;
  std::cout << "\n";
  return 0;
}

int run_train_masker(const RunConfig& cfg) {
  require_out(cfg);
  const auto data = load_examples(cfg);
  const auto& classes = classes_for(cfg.task);
  const Vocab vocab = build_vocab(data, classes);
  const auto train = encode_labeled(filter_split(data, "train"), vocab, classes);
  const auto dev = encode_labeled(filter_split(data, "dev"), vocab, classes);
  if (train.empty()) throw std::runtime_error("no train examples in " + cfg.data);

  Rng rng(cfg.seed);
  Rationalizer model(masker_config(cfg, vocab, static_cast<int>(classes.size())), rng);
  grad::AdamW opt({static_cast<float>(cfg.lr), static_cast<float>(cfg.weight_decay)});

  std::vector<std::string> rows;
  double best = -std::numeric_limits<double>::infinity();
  int since = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double loss = train_masker_epoch(model, train, cfg.batch_size, opt);
    std::string row = std::to_string(epoch) + "," + fmt(loss) + ",";
    double score = -loss;
    std::cout << "epoch " << epoch << " loss " << loss;
    if (!dev.empty()) {
      const double acc = dev_accuracy(model, dev);
      row += fmt(acc);
      score = acc;
      std::cout << " dev_acc " << acc;
    }
    std::cout << "\n";
    rows.push_back(row);
    if (score > best) {
      best = score;
      since = 0;
      model.save(cfg.out, vocab.hash());
    } else if (++since >= cfg.patience) {
      std::cout << "early stop after epoch " << epoch << "\n";
      break;
    }
  }
  write_meta(cfg.out, "train-masker", cfg);
  if (!cfg.report.empty()) {
    std::ofstream csv(cfg.report);
    if (!csv) throw std::runtime_error("cannot write " + cfg.report);
    csv << meta_line("train-masker", cfg) << "\nepoch,loss,dev_acc\n";
    for (const auto& r : rows) csv << r << "\n";
  }
  std::cout << "saved masker to " << cfg.out << "\n";
  return 0;
}

int run_train_editor(const RunConfig& cfg) {
  require_out(cfg);
  const auto data = load_examples(cfg);
  const auto& classes = classes_for(cfg.task);
  const Vocab vocab = build_vocab(data, classes);
  const Rationalizer masker = load_masker(cfg, vocab);
  const auto opts = generation_options(cfg);

  int skipped = 0;
  const auto edits =
      build_edit_examples(filter_split(data, "train"), vocab, classes, masker, opts, &skipped);
  if (edits.empty()) throw std::runtime_error("no usable train examples in " + cfg.data);
  auto dev_edits =
      build_edit_examples(filter_split(data, "dev"), vocab, classes, masker, opts, nullptr);
  if (dev_edits.size() > 64) dev_edits.resize(64);  // eval cost cap
  if (skipped > 0) std::cout << "skipped " << skipped << " train examples\n";

  Rng rng(cfg.seed);
  Editor model({cfg.d, cfg.max_len}, vocab, rng);
  grad::AdamW opt({static_cast<float>(cfg.lr), static_cast<float>(cfg.weight_decay)});

  std::vector<std::string> rows;
  double best = -std::numeric_limits<double>::infinity();
  int since = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double total = 0.0;
    for (std::size_t at = 0; at < edits.size(); at += cfg.batch_size) {
      const std::size_t hi = std::min(edits.size(), at + cfg.batch_size);
      const std::vector<EditExample> batch(edits.begin() + at, edits.begin() + hi);
      total += model.train_batch(batch, opt) * static_cast<double>(batch.size());
    }
    const double loss = total / static_cast<double>(edits.size());
    std::string row = std::to_string(epoch) + "," + fmt(loss) + ",";
    double score = -loss;
    std::cout << "epoch " << epoch << " loss " << loss;
    if (!dev_edits.empty()) {
      const double dev_loss = editor_eval_loss(model, vocab, dev_edits);
      row += fmt(dev_loss);
      score = -dev_loss;
      std::cout << " dev_loss " << dev_loss;
    }
    std::cout << "\n";
    rows.push_back(row);
    if (score > best) {
      best = score;
      since = 0;
      model.save(cfg.out);
    } else if (++since >= cfg.patience) {
      std::cout << "early stop after epoch " << epoch << "\n";
      break;
    }
  }
  write_meta(cfg.out, "train-editor", cfg);
  if (!cfg.report.empty()) {
    std::ofstream csv(cfg.report);
    if (!csv) throw std::runtime_error("cannot write " + cfg.report);
    csv << meta_line("train-editor", cfg) << "\nepoch,loss,dev_loss\n";
    for (const auto& r : rows) csv << r << "\n";
  }
  std::cout << "saved editor to " << cfg.out << "\n";
  return 0;
}

// index-sharded workers with an in-order merge; one thread falls back to
// the plain sequential path
std::vector<CounterfactualPair> generate_across_threads(
    const std::vector<Example>& examples, const Vocab& vocab,
    const std::vector<std::string>& classes, const Rationalizer& masker, const Editor& editor,
    const GenerationOptions& opts, int threads, GenerationStats* stats,
    std::vector<std::string>* log) {
  const int n = static_cast<int>(examples.size());
  const int workers = std::max(1, std::min(threads, n));
  if (workers <= 1) return generate_pairs(examples, vocab, classes, masker, editor, opts, stats, log);

  std::vector<std::optional<CounterfactualPair>> slots(n);
  std::vector<std::string> whys(n);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (int i = w; i < n; i += workers) {
        slots[i] = generate_counterfactual(examples[i], vocab, classes, masker, editor, opts,
                                           &whys[i]);
      }
    });
  }
  for (auto& t : pool) t.join();

  std::vector<CounterfactualPair> pairs;
  for (int i = 0; i < n; ++i) {
    if (stats != nullptr) ++stats->attempted;
    if (slots[i].has_value()) {
      if (stats != nullptr) {
        ++stats->generated;
        stats->flagged += slots[i]->flagged;
      }
      pairs.push_back(std::move(*slots[i]));
    } else {
      if (stats != nullptr) ++stats->skipped;
      if (log != nullptr) log->push_back(whys[i]);
    }
  }
  return pairs;
}

int run_generate(const RunConfig& cfg) {
  require_out(cfg);
  const auto data = load_examples(cfg);
  const auto& classes = classes_for(cfg.task);
  const Vocab vocab = build_vocab(data, classes);
  const Rationalizer masker = load_masker(cfg, vocab);
  const Editor editor = load_editor(cfg, vocab);
  const auto examples = filter_split(data, cfg.split);
  if (examples.empty()) throw std::runtime_error("no examples in split: " + cfg.split);

  GenerationStats stats;
  std::vector<std::string> log;
  const auto pairs = generate_across_threads(examples, vocab, classes, masker, editor,
                                             generation_options(cfg), cfg.threads, &stats, &log);
  write_pairs_jsonl(pairs, cfg.out);
  write_meta(cfg.out, "generate", cfg);
  for (const auto& line : log) std::cout << "skip " << line << "\n";
  std::cout << "generated " << stats.generated << "/" << stats.attempted << " pairs ("
            << stats.skipped << " skipped, " << stats.flagged << " flagged) to " << cfg.out
            << "\n";
  return 0;
}

int run_filter(const RunConfig& cfg) {
  require_out(cfg);
  const auto data = load_examples(cfg);
  const auto& classes = classes_for(cfg.task);
  const Vocab vocab = build_vocab(data, classes);
  const Rationalizer predictor = load_masker(cfg, vocab);
  require_file(cfg.pairs, "pairs", "pairs file", "generate");
  const auto pairs = read_pairs_jsonl(cfg.pairs);

  const auto [kept, rejected] = validity_filter(pairs, predictor, vocab, classes);
  write_pairs_jsonl(kept, cfg.out);
  write_meta(cfg.out, "filter", cfg);
  if (!cfg.dropped.empty()) {
    write_pairs_jsonl(rejected, cfg.dropped);
    write_meta(cfg.dropped, "filter", cfg);
  }
  std::cout << "kept " << kept.size() << "/" << pairs.size() << " pairs to " << cfg.out << "\n";
  return 0;
}

int run_augment(const RunConfig& cfg) {
  require_out(cfg);
  auto data = load_examples(cfg);
  require_file(cfg.pairs, "pairs", "pairs file", "generate");
  const auto pairs = read_pairs_jsonl(cfg.pairs);

  long next_id = 0;
  for (const auto& ex : data) next_id = std::max(next_id, ex.id + 1);
  for (const auto& p : pairs) {
    Example ex;
    ex.id = next_id++;
    ex.text = p.counterfactual;
    ex.label = p.counterfactual_label;
    // an all-zero edit mask carries no rationale worth keeping
    if (std::count(p.counterfactual_mask.begin(), p.counterfactual_mask.end(), 1) > 0) {
      ex.rationale = p.counterfactual_mask;
    }
    ex.split = "train";
    data.push_back(std::move(ex));
  }
  write_examples_jsonl(data, cfg.out);
  write_meta(cfg.out, "augment", cfg);
  std::cout << "wrote " << data.size() << " examples (" << pairs.size() << " counterfactual) to "
            << cfg.out << "\n";
  return 0;
}

int run_train_agreement(const RunConfig& cfg) {
  require_out(cfg);
  const auto data = load_examples(cfg);
  const auto& classes = classes_for(cfg.task);
  const Vocab vocab = build_vocab(data, classes);
  require_file(cfg.pairs, "pairs", "pairs file", "generate");
  const auto raw = read_pairs_jsonl(cfg.pairs);

  std::vector<PairedExample> paired;
  int bad = 0;
  for (const auto& p : raw) {
    try {
      paired.push_back(to_paired_example(p, vocab, classes));
    } catch (const std::invalid_argument& e) {
      ++bad;
      std::cout << "drop pair " << p.id << ": " << e.what() << "\n";
    }
  }
  if (paired.empty()) throw std::runtime_error("no usable pairs in " + cfg.pairs);
  if (bad > 0) std::cout << "dropped " << bad << " pairs\n";

  Rng rng(cfg.seed);
  Rationalizer model(masker_config(cfg, vocab, static_cast<int>(classes.size())), rng);
  grad::AdamW opt({static_cast<float>(cfg.lr), static_cast<float>(cfg.weight_decay)});
  const AgreementConfig acfg{cfg.alpha, cfg.lambda};

  std::vector<AgreementEpochStats> rows;
  double best = std::numeric_limits<double>::infinity();
  int since = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto s = train_agreement_epoch(model, paired, acfg, opt, cfg.batch_size, epoch);
    rows.push_back(s);
    const double objective = total_loss(s.loss_factual, s.loss_counterfactual, s.omega, acfg);
    std::cout << "epoch " << epoch << " loss_f " << s.loss_factual << " loss_c "
              << s.loss_counterfactual << " omega " << s.omega << " acc_f " << s.acc_factual
              << "\n";
    if (objective < best) {
      best = objective;
      since = 0;
      model.save(cfg.out, vocab.hash());
    } else if (++since >= cfg.patience) {
      std::cout << "early stop after epoch " << epoch << "\n";
      break;
    }
  }
  write_meta(cfg.out, "train-agreement", cfg);
  if (!cfg.report.empty()) {
    write_agreement_csv(rows, cfg.report);
    prepend_line(cfg.report, meta_line("train-agreement", cfg));
  }
  std::cout << "saved model to " << cfg.out << "\n";
  return 0;
}

ReportRow make_report_row(const std::string& name, const std::vector<CounterfactualPair>& pairs,
                          const Vocab& vocab,
                          const std::function<std::string(const std::string&)>& judge,
                          const NgramLM& lm) {
  if (pairs.empty()) throw std::runtime_error("no pairs to evaluate");
  ReportRow row;
  row.name = name;
  row.count = static_cast<int>(pairs.size());
  row.validity = validity(pairs, judge);
  std::vector<std::vector<int>> edited;
  double close = 0.0, tokens = 0.0;
  for (const auto& p : pairs) {
    const auto x = vocab.encode(p.text);
    const auto xe = vocab.encode(p.counterfactual);
    edited.push_back(xe);
    close += closeness(x, xe);
    tokens += std::count(p.rationale_mask.begin(), p.rationale_mask.end(), 1);
  }
  row.fluency = fluency_ppl(edited, lm);
  row.diversity = self_bleu(edited);
  row.closeness = close / static_cast<double>(pairs.size());
  row.mean_tokens = tokens / static_cast<double>(pairs.size());
  return row;
}

std::string substitute_seed(const std::string& path, std::uint64_t seed) {
  std::string out = path;
  const std::string key = "{seed}";
  std::size_t at;
  while ((at = out.find(key)) != std::string::npos) {
    out.replace(at, key.size(), std::to_string(seed));
  }
  return out;
}

int run_eval_metrics(const RunConfig& cfg) {
  require_out(cfg);
  const auto data = load_examples(cfg);
  const auto& classes = classes_for(cfg.task);
  const Vocab vocab = build_vocab(data, classes);
  const auto judge = oracle_for(cfg.task);

  NgramLM lm(vocab.size());
  {
    std::vector<std::vector<int>> texts;
    for (const auto& ex : filter_split(data, "train")) texts.push_back(vocab.encode(ex.text));
    lm.fit(texts);
  }

  std::vector<std::uint64_t> seeds;
  if (cfg.seeds.empty()) {
    seeds.push_back(cfg.seed);
  } else {
    for (double v : parse_list(cfg.seeds, "seeds")) {
      seeds.push_back(static_cast<std::uint64_t>(v));
    }
  }
  if (cfg.pairs.empty()) throw std::invalid_argument("--pairs is required (pairs file)");

  std::vector<ReportRow> per_seed;
  for (const auto s : seeds) {
    const std::string path = substitute_seed(cfg.pairs, s);
    std::ifstream probe(path);
    if (!probe) {
      throw std::runtime_error("missing pairs file: " + path + " (produce it with `crest generate`)");
    }
    per_seed.push_back(make_report_row(cfg.name, read_pairs_jsonl(path), vocab, judge, lm));
  }

  const auto stat = [&](const std::function<double(const ReportRow&)>& pick) {
    double mean = 0.0;
    for (const auto& r : per_seed) mean += pick(r);
    mean /= static_cast<double>(per_seed.size());
    double var = 0.0;
    for (const auto& r : per_seed) var += (pick(r) - mean) * (pick(r) - mean);
    const double std_dev =
        per_seed.size() > 1 ? std::sqrt(var / static_cast<double>(per_seed.size() - 1)) : 0.0;
    return std::make_pair(mean, std_dev);
  };
  const std::vector<std::pair<std::string, std::function<double(const ReportRow&)>>> metrics = {
      {"validity", [](const ReportRow& r) { return r.validity; }},
      {"fluency", [](const ReportRow& r) { return r.fluency; }},
      {"diversity", [](const ReportRow& r) { return r.diversity; }},
      {"closeness", [](const ReportRow& r) { return r.closeness; }},
      {"mean_tokens", [](const ReportRow& r) { return r.mean_tokens; }},
      {"count", [](const ReportRow& r) { return r.count; }},
  };

  std::ofstream csv(cfg.out);
  if (!csv) throw std::runtime_error("cannot write " + cfg.out);
  csv << meta_line("eval-metrics", cfg) << "\nsystem,metric,mean,std\n";
  for (const auto& [label, pick] : metrics) {
    const auto [mean, std_dev] = stat(pick);
    csv << cfg.name << "," << label << "," << fmt(mean) << "," << fmt(std_dev) << "\n";
    std::cout << label << " " << mean << " +- " << std_dev << "\n";
  }
  csv.close();

  if (!cfg.report.empty()) {
    std::ofstream md(cfg.report);
    if (!md) throw std::runtime_error("cannot write " + cfg.report);
    md << "| system | metric | mean | std |\n|---|---|---|---|\n";
    for (const auto& [label, pick] : metrics) {
      const auto [mean, std_dev] = stat(pick);
      md << "| " << cfg.name << " | " << label << " | " << mean << " | " << std_dev << " |\n";
    }
    md << "\n" << meta_line("eval-metrics", cfg) << "\n";
  }
  return 0;
}

int run_simulate(const RunConfig& cfg) {
  require_out(cfg);
  const auto data = load_examples(cfg);
  const auto& classes = classes_for(cfg.task);
  const Vocab vocab = build_vocab(data, classes);
  const Rationalizer masker = load_masker(cfg, vocab);
  const std::optional<double> budget =
      cfg.budget_set ? std::optional<double>(cfg.budget) : std::nullopt;

  const auto explain = [&](const std::vector<Example>& split) {
    std::vector<std::vector<int>> tokens, selected, rationales;
    std::vector<int> predicted;
    for (const auto& ex : split) {
      auto toks = vocab.encode(ex.text);
      const auto r = masker.rationalize(toks, budget, cfg.freeze_premise);
      std::vector<int> sel;
      for (std::size_t i = 0; i < toks.size(); ++i) {
        if (r.z[i] == 1) sel.push_back(toks[i]);
      }
      predicted.push_back(
          static_cast<int>(std::max_element(r.probs.begin(), r.probs.end()) - r.probs.begin()));
      tokens.push_back(std::move(toks));
      selected.push_back(std::move(sel));
      rationales.push_back(r.z);
    }
    return std::make_tuple(tokens, selected, rationales, predicted);
  };

  const auto train = filter_split(data, "train");
  const auto test = filter_split(data, cfg.split);
  if (train.empty() || test.empty()) throw std::runtime_error("need train and eval examples");
  const auto [train_toks, train_sel, train_z, train_pred] = explain(train);
  const auto [test_toks, test_sel, test_z, test_pred] = explain(test);

  LinearStudent student(vocab.size(), static_cast<int>(classes.size()));
  student.fit(train_sel, train_pred);
  const double fsim = forward_simulability(student, test_sel, test_pred);
  std::cout << "forward_simulability " << fsim << "\n";

  std::vector<std::string> rows = {"forward_simulability," + fmt(fsim)};
  if (!cfg.editor.empty()) {
    const Editor editor = load_editor(cfg, vocab);
    const auto classify = [&](const std::vector<int>& toks) {
      const auto probs = masker.rationalize(toks, budget, cfg.freeze_premise).probs;
      return static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
    };
    const auto edit = [&](const std::vector<int>& toks,
                          const std::vector<int>& z) -> std::optional<std::vector<int>> {
      MaskedInput masked;
      try {
        masked = apply_sentinels(toks, z, vocab);
      } catch (const std::invalid_argument&) {
        return std::nullopt;
      }
      const auto r = masker.rationalize(toks, budget, cfg.freeze_premise);
      const int y_f =
          static_cast<int>(std::max_element(r.probs.begin(), r.probs.end()) - r.probs.begin());
      const int y_c = label_flip(y_f, static_cast<int>(classes.size()), r.probs);
      BeamConfig beam;
      beam.size = cfg.beam_size;
      beam.no_repeat_bigram = cfg.no_repeat_bigram;
      return editor.generate(masked, vocab.label_id(classes[y_c]), beam).tokens;
    };
    const auto cf = counterfactual_simulability(test_toks, test_z, classify, edit);
    std::cout << "counterfactual_simulability " << cf.rate << " (evaluated " << cf.evaluated
              << ", failed " << cf.failed << ")\n";
    rows.push_back("counterfactual_simulability," + fmt(cf.rate));
    rows.push_back("cf_evaluated," + std::to_string(cf.evaluated));
    rows.push_back("cf_failed," + std::to_string(cf.failed));
  }

  std::ofstream csv(cfg.out);
  if (!csv) throw std::runtime_error("cannot write " + cfg.out);
  csv << meta_line("simulate", cfg) << "\nmetric,value\n";
  for (const auto& r : rows) csv << r << "\n";
  return 0;
}

int run_sweep_budget(const RunConfig& cfg) {
  require_out(cfg);
  const auto data = load_examples(cfg);
  const auto& classes = classes_for(cfg.task);
  const Vocab vocab = build_vocab(data, classes);
  const Editor editor = load_editor(cfg, vocab);
  const auto budgets = parse_list(cfg.budgets, "budgets");
  const auto train = encode_labeled(filter_split(data, "train"), vocab, classes);
  const auto test = filter_split(data, cfg.split);
  if (train.empty() || test.empty()) throw std::runtime_error("need train and eval examples");

  NgramLM lm(vocab.size());
  {
    std::vector<std::vector<int>> texts;
    for (const auto& [toks, label] : train) texts.push_back(toks);
    lm.fit(texts);
  }

  // a fresh masker per budget from the same seed, so the budget is the
  // only thing that moves
  std::vector<Rationalizer> maskers;
  maskers.reserve(budgets.size());
  for (const double b : budgets) {
    RationalizerConfig mc = masker_config(cfg, vocab, static_cast<int>(classes.size()));
    mc.budget = b;
    Rng rng(cfg.seed);
    Rationalizer model(mc, rng);
    grad::AdamW opt({static_cast<float>(cfg.lr), static_cast<float>(cfg.weight_decay)});
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
      const double loss = train_masker_epoch(model, train, cfg.batch_size, opt);
      std::cout << "budget " << b << " epoch " << epoch << " loss " << loss << "\n";
    }
    maskers.push_back(std::move(model));
  }
  const auto masker_for = [&](double b) -> const Rationalizer& {
    for (std::size_t i = 0; i < budgets.size(); ++i) {
      if (budgets[i] == b) return maskers[i];
    }
    throw std::logic_error("unknown budget");
  };

  GenerationOptions opts = generation_options(cfg);
  opts.budget = {};  // each masker runs at its own budget
  const auto rows =
      budget_sweep(test, budgets, masker_for, editor, vocab, classes, oracle_for(cfg.task), lm, opts);

  std::ofstream csv(cfg.out);
  if (!csv) throw std::runtime_error("cannot write " + cfg.out);
  csv << meta_line("sweep-budget", cfg) << "\nbudget,validity,fluency,closeness\n";
  for (const auto& r : rows) {
    csv << fmt(r.budget) << "," << fmt(r.validity) << "," << fmt(r.fluency) << ","
        << fmt(r.closeness) << "\n";
    std::cout << "budget " << r.budget << " validity " << r.validity << " fluency " << r.fluency
              << " closeness " << r.closeness << "\n";
  }
  csv.close();
  if (!cfg.report.empty()) {
    std::ofstream md(cfg.report);
    if (!md) throw std::runtime_error("cannot write " + cfg.report);
    md << "| budget | validity | fluency | closeness |\n|---|---|---|---|\n";
    for (const auto& r : rows) {
      md << "| " << r.budget << " | " << r.validity << " | " << r.fluency << " | " << r.closeness
         << " |\n";
    }
    md << "\n" << meta_line("sweep-budget", cfg) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  RunConfig cfg;
  // the config file loads before flag parsing, so flags win
  std::string config_path;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--config" && i + 1 < argc) {
      config_path = argv[i + 1];
    } else if (arg.rfind("--config=", 0) == 0) {
      config_path = arg.substr(9);
    }
  }
  try {
    if (!config_path.empty()) apply_config_file(config_path, cfg);
  } catch (const std::exception& e) {
    std::cerr << "crest: " << e.what() << "\n";
    return 1;
  }

  CLI::App app{"budget-constrained rationales and counterfactual generation"};
  app.require_subcommand(1);

  const std::vector<std::pair<std::string, std::string>> subs = {
      {"gen-data", "synthesize a labeled corpus with splits"},
      {"train-masker", "fit the select-then-classify model"},
      {"train-editor", "fit the span infiller on masker spans"},
      {"generate", "mask, flip the label, infill counterfactuals"},
      {"filter", "keep pairs the predictor labels as intended"},
      {"augment", "append counterfactuals to the corpus as train rows"},
      {"train-agreement", "dual-flow training tied to the stored masks"},
      {"eval-metrics", "pair metrics, optionally aggregated across seeds"},
      {"simulate", "student-based simulability of the rationales"},
      {"sweep-budget", "generation quality as the budget varies"},
  };
  std::string config_sink;
  std::vector<CLI::Option*> budget_opts;
  for (const auto& [name, what] : subs) {
    auto* s = app.add_subcommand(name, what);
    s->add_option("--config", config_sink, "flat key=value config file; flags win");
    s->add_option("--seed", cfg.seed, "rng seed, recorded in every artifact");
    s->add_option("--task", cfg.task, "sentiment or nli");
    s->add_option("--size", cfg.size, "corpus size for gen-data");
    s->add_option("--min-words", cfg.min_words, "shortest sentiment text");
    s->add_option("--max-words", cfg.max_words, "longest sentiment text");
    s->add_option("--distractor-rate", cfg.distractor_rate, "off-label token rate");
    s->add_option("--train-frac", cfg.train_frac, "train split fraction");
    s->add_option("--dev-frac", cfg.dev_frac, "dev split fraction");
    s->add_option("--d", cfg.d, "model width");
    s->add_option("--max-len", cfg.max_len, "longest supported sequence");
    budget_opts.push_back(
        s->add_option("--budget", cfg.budget, "selection budget as a fraction of length"));
    s->add_option("--transition-penalty", cfg.transition_penalty, "mask contiguity penalty");
    s->add_option("--lr", cfg.lr, "learning rate");
    s->add_option("--weight-decay", cfg.weight_decay, "decoupled weight decay");
    s->add_option("--batch-size", cfg.batch_size, "examples per optimizer step");
    s->add_option("--epochs", cfg.epochs, "training epoch cap");
    s->add_option("--patience", cfg.patience, "epochs without improvement before stopping");
    s->add_option("--beam-size", cfg.beam_size, "beam width for infilling");
    s->add_option("--no-repeat-bigram", cfg.no_repeat_bigram, "ban repeated bigrams in decoding");
    s->add_option("--alpha", cfg.alpha, "counterfactual-loss weight");
    s->add_option("--lambda", cfg.lambda, "rationale-agreement weight");
    s->add_option("--threads", cfg.threads, "worker threads for generate");
    s->add_option("--freeze-premise", cfg.freeze_premise, "bar the premise from selection");
    s->add_option("--split", cfg.split, "which split generate and eval read");
    s->add_option("--name", cfg.name, "system name in reports");
    s->add_option("--seeds", cfg.seeds, "comma list; {seed} in --pairs picks the file");
    s->add_option("--budgets", cfg.budgets, "comma list for sweep-budget");
    s->add_option("--data", cfg.data, "examples jsonl");
    s->add_option("--pairs", cfg.pairs, "counterfactual pairs jsonl");
    s->add_option("--masker", cfg.masker, "masker checkpoint");
    s->add_option("--editor", cfg.editor, "editor checkpoint");
    s->add_option("--out", cfg.out, "primary output artifact");
    s->add_option("--report", cfg.report, "training or report file");
    s->add_option("--dropped", cfg.dropped, "where filter writes rejects");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  for (const auto* opt : budget_opts) {
    if (opt->count() > 0) cfg.budget_set = true;
  }

  const std::string sub = app.get_subcommands().front()->get_name();
  try {
    if (sub == "gen-data") return run_gen_data(cfg);
    if (sub == "train-masker") return run_train_masker(cfg);
    if (sub == "train-editor") return run_train_editor(cfg);
    if (sub == "generate") return run_generate(cfg);
    if (sub == "filter") return run_filter(cfg);
    if (sub == "augment") return run_augment(cfg);
    if (sub == "train-agreement") return run_train_agreement(cfg);
    if (sub == "eval-metrics") return run_eval_metrics(cfg);
    if (sub == "simulate") return run_simulate(cfg);
    if (sub == "sweep-budget") return run_sweep_budget(cfg);
    throw std::logic_error("unhandled subcommand: " + sub);
  } catch (const std::exception& e) {
    std::cerr << "crest " << sub << ": error: " << e.what() << "\n";
    return 1;
  }
}
