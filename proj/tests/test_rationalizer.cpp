#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "crest/corpus.hpp"
#include "crest/rationalizer.hpp"
#include "crest/tokenizer.hpp"
#include "doctest.h"

using namespace crest;

namespace {

RationalizerConfig small_config(int vocab = 80, int n_classes = 2) {
  RationalizerConfig cfg;
  cfg.vocab_size = vocab;
  cfg.n_classes = n_classes;
  return cfg;
}

std::vector<int> random_tokens(Rng& rng, int n, int vocab) {
  std::vector<int> t(n);
  for (int i = 0; i < n; ++i) t[i] = rng.uniform_int(4, vocab - 1);
  return t;
}

int label_index(const std::string& label) {
  const auto classes = sentiment_classes();
  return static_cast<int>(std::find(classes.begin(), classes.end(), label) - classes.begin());
}

std::vector<std::pair<std::vector<int>, int>> encode_batch(const std::vector<Example>& examples,
                                                           const Vocab& vocab) {
  std::vector<std::pair<std::vector<int>, int>> batch;
  for (const auto& e : examples) batch.emplace_back(vocab.encode(e.text), label_index(e.label));
  return batch;
}

}  // namespace

TEST_CASE("budget to selection count") {
  CHECK(budget_k(0.3, 10) == 3);
  CHECK(budget_k(0.1, 10) == 1);
  CHECK(budget_k(1.0, 7) == 7);
  CHECK(budget_k(0.25, 8) == 2);
  CHECK(budget_k(0.01, 5) == 1);
  CHECK(budget_k(0.34, 3) == 2);
  CHECK(budget_k(0.5, 4) == 2);
}

TEST_CASE("encoder shape determinism and position sensitivity") {
  Rng rng(1);
  Rationalizer model(small_config(), rng);
  const auto h1 = model.encode({7});
  CHECK(h1.shape == std::vector<int>{1, 64});

  const std::vector<int> tokens = {5, 6, 7, 8, 9};
  const auto a = model.encode(tokens);
  const auto b = model.encode(tokens);
  CHECK(a.data == b.data);

  const std::vector<int> rotated = {6, 7, 8, 9, 5};
  const auto c = model.encode(rotated);
  CHECK(a.data != c.data);

  CHECK_THROWS_AS(model.encode({500}), std::invalid_argument);
  CHECK_THROWS_AS(model.encode({}), std::invalid_argument);
}

TEST_CASE("mask inference respects the budget") {
  Rng rng(2);
  Rationalizer model(small_config(), rng);
  const auto tokens = random_tokens(rng, 10, 80);
  const auto H = model.encode(tokens);

  const auto def = model.explain(H);
  int ones = 0;
  for (int zi : def.z) ones += zi;
  CHECK(ones <= 3);  // ceil(0.3 * 10)

  const auto full = model.explain(H, 1.0);
  CHECK(full.solution.converged);
  CHECK(full.z.size() == 10);

  CHECK_THROWS_AS(model.explain(H, 1.5), std::invalid_argument);
}

TEST_CASE("uniform scores split the budget evenly") {
  const auto out = explain_scores({1.0, 1.0, 1.0, 1.0}, 2, 0.0);
  REQUIRE(out.mu.size() == 4);
  for (double m : out.mu) CHECK(m == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(out.z == std::vector<int>{1, 1, 0, 0});
}

TEST_CASE("prediction under masks") {
  Rng rng(3);
  Rationalizer model(small_config(), rng);
  auto bias = model.params().find("cls_b");
  bias->data = {0.3f, -0.2f};

  // a zero mask exposes only the classifier prior, whatever the tokens
  const auto p1 = model.predict({10, 11, 12, 13, 14}, std::vector<double>(5, 0.0));
  const auto p2 = model.predict({20, 21, 22}, std::vector<double>(3, 0.0));
  CHECK(p1 == p2);
  const double z = std::exp(0.3) + std::exp(-0.2);
  CHECK(p1[0] == doctest::Approx(std::exp(0.3) / z).epsilon(1e-6));
  CHECK(p1[1] == doctest::Approx(std::exp(-0.2) / z).epsilon(1e-6));

  double sum = 0.0;
  for (float p : model.predict({10, 11, 12}, {1.0, 1.0, 1.0})) sum += p;
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));

  CHECK_THROWS_AS(model.predict({10, 11}, {1.0}), std::invalid_argument);
}

TEST_CASE("prediction ignores token identity at masked positions") {
  Rng rng(4);
  Rationalizer model(small_config(), rng);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = rng.uniform_int(3, 12);
    auto tokens = random_tokens(rng, n, 80);
    std::vector<double> mu(n);
    int zero_at = rng.uniform_int(0, n - 1);
    for (int i = 0; i < n; ++i) mu[i] = i == zero_at ? 0.0 : rng.uniform();
    const auto before = model.predict(tokens, mu);
    auto swapped = tokens;
    swapped[zero_at] = tokens[zero_at] == 4 ? 5 : 4;
    const auto after = model.predict(swapped, mu);
    CHECK(before == after);  // exact logit equality, not approximate
  }
}

TEST_CASE("fresh model starts at uniform loss") {
  Rng rng(5);
  Rationalizer model(small_config(80, 3), rng);
  grad::AdamW opt(grad::AdamWConfig{0.0f, 0.0f, 0.9f, 0.999f, 1e-8f});
  const double loss = model.train_step({{random_tokens(rng, 8, 80), 1}}, opt);
  CHECK(loss == doctest::Approx(std::log(3.0)).epsilon(1e-5));
}

TEST_CASE("zero learning rate leaves parameters untouched") {
  Rng rng(6);
  Rationalizer model(small_config(), rng);
  std::vector<std::vector<float>> before;
  for (const auto& [name, p] : model.params().items) before.push_back(p->data);
  grad::AdamW opt(grad::AdamWConfig{0.0f, 0.1f, 0.9f, 0.999f, 1e-8f});
  model.train_step({{random_tokens(rng, 6, 80), 0}}, opt);
  std::size_t i = 0;
  for (const auto& [name, p] : model.params().items) CHECK(p->data == before[i++]);
}

TEST_CASE("loss falls on a separable batch and training is deterministic") {
  const auto corpus = gen_sentiment_corpus(31, 32, 6, 10, 0.0);
  const Vocab vocab = build_vocab(corpus, sentiment_classes());
  const auto batch = encode_batch(corpus, vocab);

  auto run = [&](std::vector<double>* trace) {
    Rng rng(7);
    RationalizerConfig cfg = small_config(static_cast<int>(vocab.size()));
    Rationalizer model(cfg, rng);
    grad::AdamW opt(grad::AdamWConfig{3e-3f, 1e-6f, 0.9f, 0.999f, 1e-8f});
    for (int step = 0; step < 50; ++step) trace->push_back(model.train_step(batch, opt));
  };
  std::vector<double> first, second;
  run(&first);
  run(&second);
  CHECK(first == second);
  CHECK(first.front() == doctest::Approx(std::log(2.0)).epsilon(1e-4));
  CHECK(first.back() < first.front() - 0.05);
}

TEST_CASE("budget holds across random inputs and budgets") {
  Rng rng(8);
  Rationalizer model(small_config(), rng);
  const double budgets[] = {0.1, 0.2, 0.3, 0.4, 0.5};
  for (int trial = 0; trial < 40; ++trial) {
    const auto tokens = random_tokens(rng, rng.uniform_int(1, 30), 80);
    for (double b : budgets) {
      const auto out = model.rationalize(tokens, b);
      const int limit = budget_k(b, static_cast<int>(tokens.size()));
      int ones = 0;
      for (int zi : out.z) ones += zi;
      CHECK(ones <= limit);
      for (double m : out.mu) {
        CHECK(m >= -1e-9);
        CHECK(m <= 1.0 + 1e-9);
      }
      double sum = 0.0;
      for (float p : out.probs) sum += p;
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("premise freeze keeps selection in the hypothesis") {
  Rng rng(9);
  Rationalizer model(small_config(), rng);
  const std::vector<int> tokens = {10, 11, 12, Vocab::kSep, 20, 21, 22, 23};
  CHECK(Rationalizer::premise_end(tokens, Vocab::kSep) == 4);
  const auto out = model.rationalize(tokens, 0.5, true);
  for (int i = 0; i < 4; ++i) {
    CHECK(out.mu[i] == 0.0);
    CHECK(out.z[i] == 0);
  }
  int ones = 0;
  for (int zi : out.z) ones += zi;
  CHECK(ones >= 1);
}

TEST_CASE("end-to-end gradients match finite differences") {
  Rng rng(10);
  Rationalizer model(small_config(), rng);
  // the classifier head starts at zero, which blocks every upstream
  // gradient; give it life before probing
  for (const char* name : {"cls_w", "cls_b"}) {
    auto p = model.params().find(name);
    for (float& x : p->data) x = static_cast<float>(rng.gaussian() * 0.3);
  }
  const auto tokens = random_tokens(rng, 9, 80);
  const int label = 1;

  auto loss_at = [&]() { return model.example_loss_and_grad(tokens, label); };

  struct Probe {
    const char* name;
    int count;  // -1 checks every entry
  };
  const Probe probes[] = {{"scorer_w", -1}, {"scorer_b", -1}, {"wq", 24}, {"pool", 16}};
  const double h = 3e-3;
  int checked = 0, failed = 0;
  for (const auto& probe : probes) {
    auto p = model.params().find(probe.name);
    REQUIRE(p != nullptr);
    loss_at();
    const std::vector<float> analytic = p->grad;
    const int limit = probe.count < 0 ? static_cast<int>(p->numel()) : probe.count;
    for (int j = 0; j < limit; ++j) {
      const float orig = p->data[j];
      p->data[j] = orig + static_cast<float>(h);
      const double lp = loss_at();
      p->data[j] = orig - static_cast<float>(h);
      const double lm = loss_at();
      p->data[j] = orig;
      const double fd = (lp - lm) / (2.0 * h);
      const double a = analytic[j];
      if (std::max(std::fabs(a), std::fabs(fd)) < 5e-4) continue;  // below float32 resolution
      ++checked;
      const double tol = 1e-2 * std::max(std::fabs(a), std::fabs(fd)) + 1e-4;
      if (std::fabs(a - fd) > tol) {
        ++failed;
        MESSAGE(probe.name, "[", j, "]: analytic ", a, " vs fd ", fd);
      }
    }
  }
  loss_at();
  CHECK(checked >= 40);
  // the mask inference is piecewise linear; a probe that straddles a tie is
  // allowed to miss, anything systematic is not
  CHECK(failed * 20 <= checked);
}

TEST_CASE("trained model recovers content rationales and masker attribution") {
  auto corpus = gen_sentiment_corpus(123, 2500, 6, 12, 0.1);
  assign_splits(corpus, 0.8, 0.1);
  const auto train = filter_split(corpus, "train");
  const auto test = filter_split(corpus, "test");
  const Vocab vocab = build_vocab(corpus, sentiment_classes());
  const auto tr = encode_batch(train, vocab);
  const auto te = encode_batch(test, vocab);

  Rng rng(11);
  Rationalizer model(small_config(static_cast<int>(vocab.size())), rng);
  grad::AdamW opt(grad::AdamWConfig{3e-3f, 1e-6f, 0.9f, 0.999f, 1e-8f});
  std::vector<std::pair<std::vector<int>, int>> minibatch;
  for (int epoch = 0; epoch < 6; ++epoch) {
    for (std::size_t s = 0; s + 32 <= tr.size(); s += 32) {
      minibatch.assign(tr.begin() + s, tr.begin() + s + 32);
      model.train_step(minibatch, opt);
    }
  }

  int correct = 0;
  double wins = 0.0, pairs = 0.0;
  for (std::size_t t = 0; t < te.size(); ++t) {
    const auto out = model.rationalize(te[t].first);
    const int pred = static_cast<int>(
        std::max_element(out.probs.begin(), out.probs.end()) - out.probs.begin());
    correct += pred == te[t].second;
    const auto& gold = test[t].rationale;
    for (std::size_t i = 0; i < gold.size(); ++i) {
      if (!gold[i]) continue;
      for (std::size_t j = 0; j < gold.size(); ++j) {
        if (gold[j]) continue;
        pairs += 1.0;
        wins += out.mu[i] > out.mu[j] ? 1.0 : out.mu[i] == out.mu[j] ? 0.5 : 0.0;
      }
    }
  }
  CHECK(correct >= static_cast<int>(0.95 * te.size()));
  CHECK(wins / pairs >= 0.8);

  const auto all = model.gradient_masker(te[0].first, 1.0);
  CHECK(std::count(all.begin(), all.end(), 1) == static_cast<long>(all.size()));

  // examples carrying a single polarity token: the masker should find it
  int candidates = 0, hits = 0;
  for (const auto& e : test) {
    int marked = 0, where = -1;
    for (std::size_t i = 0; i < e.rationale.size(); ++i) {
      if (e.rationale[i]) {
        ++marked;
        where = static_cast<int>(i);
      }
    }
    const auto tokens = vocab.encode(e.text);
    if (marked != 1 || tokens.size() > 10) continue;
    const auto z = model.gradient_masker(tokens, 0.1);
    CHECK(std::count(z.begin(), z.end(), 1) == 1);  // ceil(0.1 * n) for n <= 10
    ++candidates;
    hits += z[where];
  }
  REQUIRE(candidates >= 20);
  CHECK(hits * 4 >= candidates * 3);
}

TEST_CASE("checkpoint round trip preserves the model") {
  Rng rng(12);
  Rationalizer model(small_config(), rng);
  const std::string path = "/tmp/crest_test_rationalizer.ckpt";
  model.save(path, 12345u);
  const auto loaded = Rationalizer::load(path, 12345u);
  CHECK(loaded.config().d == 64);
  CHECK(loaded.config().budget == 0.3);
  REQUIRE(loaded.params().items.size() == model.params().items.size());
  for (std::size_t i = 0; i < model.params().items.size(); ++i) {
    CHECK(loaded.params().items[i].second->data == model.params().items[i].second->data);
  }
  Rng trng(13);
  const auto tokens = random_tokens(trng, 8, 80);
  const auto a = model.rationalize(tokens);
  const auto b = loaded.rationalize(tokens);
  CHECK(a.probs == b.probs);
  CHECK(a.z == b.z);
  CHECK_THROWS_AS(Rationalizer::load(path, 999u), std::runtime_error);
  std::remove(path.c_str());
}
