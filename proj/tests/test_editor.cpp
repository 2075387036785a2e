#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "crest/corpus.hpp"
#include "crest/editor.hpp"
#include "crest/rationalizer.hpp"
#include "doctest.h"

using namespace crest;

namespace {

std::string temp_path(const std::string& name) { return "/tmp/crest_test_" + name; }

// four reserved ids, then words starting at 4, two labels, four sentinels
Vocab toy_vocab() {
  Vocab v;
  for (const char* w : {"a", "b", "c", "d", "e", "f", "g", "h"}) v.add(w);
  v.add_labels(sentiment_classes());
  v.add_sentinels(8);
  return v;
}

std::vector<int> word_ids(const Vocab& v, const std::string& text) { return v.encode(text); }

}  // namespace

TEST_CASE("apply_sentinels collapses mask runs") {
  const Vocab v = toy_vocab();
  const std::vector<int> tokens = word_ids(v, "a b c d e");
  const int s0 = v.sentinel_id(0), s1 = v.sentinel_id(1);

  SUBCASE("interior and trailing spans") {
    const MaskedInput m = apply_sentinels(tokens, {0, 1, 1, 0, 1}, v);
    CHECK(m.source == std::vector<int>{v.id("a"), s0, v.id("d"), s1});
    CHECK(m.target == std::vector<int>{s0, v.id("b"), v.id("c"), s1, v.id("e"), Vocab::kEos});
  }
  SUBCASE("everything masked") {
    const MaskedInput m = apply_sentinels(tokens, {1, 1, 1, 1, 1}, v);
    CHECK(m.source == std::vector<int>{s0});
    std::vector<int> want = {s0};
    want.insert(want.end(), tokens.begin(), tokens.end());
    want.push_back(Vocab::kEos);
    CHECK(m.target == want);
  }
  SUBCASE("rejects bad masks") {
    CHECK_THROWS_AS(apply_sentinels(tokens, {0, 1, 1}, v), std::invalid_argument);
    CHECK_THROWS_AS(apply_sentinels(tokens, {0, 1, 2, 0, 0}, v), std::invalid_argument);
    CHECK_THROWS_AS(apply_sentinels(tokens, {0, 0, 0, 0, 0}, v), std::invalid_argument);
  }
}

TEST_CASE("masking then substituting the target restores the tokens") {
  const Vocab v = toy_vocab();
  Rng rng(7);
  int checked = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = rng.uniform_int(1, 12);
    std::vector<int> tokens(n), z(n);
    bool any = false;
    for (int i = 0; i < n; ++i) {
      tokens[i] = rng.uniform_int(4, 11);
      z[i] = rng.uniform() < 0.4 ? 1 : 0;
      any |= z[i] == 1;
    }
    if (!any) continue;
    const MaskedInput m = apply_sentinels(tokens, z, v);
    const InfillResult r = substitute_spans(m.source, m.target, v);
    CHECK(r.tokens == tokens);
    CHECK_FALSE(r.flagged);
    ++checked;
  }
  CHECK(checked > 800);
}

TEST_CASE("substitute_spans salvages malformed generations") {
  const Vocab v = toy_vocab();
  const int s0 = v.sentinel_id(0), s1 = v.sentinel_id(1);
  const std::vector<int> source = {v.id("a"), s0, v.id("b")};

  SUBCASE("wrong sentinel id still fills by position") {
    const InfillResult r = substitute_spans(source, {s1, v.id("c"), Vocab::kEos}, v);
    CHECK(r.tokens == std::vector<int>{v.id("a"), v.id("c"), v.id("b")});
    CHECK(r.flagged);
  }
  SUBCASE("missing chunk leaves the slot empty") {
    const std::vector<int> two = {v.id("a"), s0, v.id("b"), s1};
    const InfillResult r = substitute_spans(two, {s0, v.id("c"), Vocab::kEos}, v);
    CHECK(r.tokens == std::vector<int>{v.id("a"), v.id("c"), v.id("b")});
    CHECK(r.flagged);
  }
  SUBCASE("tokens before the first sentinel are junk") {
    const InfillResult r = substitute_spans(source, {v.id("c"), s0, v.id("d"), Vocab::kEos}, v);
    CHECK(r.tokens == std::vector<int>{v.id("a"), v.id("d"), v.id("b")});
    CHECK(r.flagged);
  }
  SUBCASE("truncation without EOS is flagged") {
    const InfillResult r = substitute_spans(source, {s0, v.id("c")}, v);
    CHECK(r.tokens == std::vector<int>{v.id("a"), v.id("c"), v.id("b")});
    CHECK(r.flagged);
  }
  SUBCASE("stray label tokens inside a span are dropped") {
    const int lab = v.label_id("positive");
    const InfillResult r = substitute_spans(source, {s0, lab, v.id("c"), Vocab::kEos}, v);
    CHECK(r.tokens == std::vector<int>{v.id("a"), v.id("c"), v.id("b")});
    CHECK_FALSE(r.flagged);
  }
  SUBCASE("adjacent separators collapse") {
    const std::vector<int> src = {v.id("a"), s0, Vocab::kSep, v.id("b")};
    const InfillResult r = substitute_spans(src, {s0, Vocab::kSep, Vocab::kEos}, v);
    CHECK(r.tokens == std::vector<int>{v.id("a"), Vocab::kSep, v.id("b")});
    CHECK_FALSE(r.flagged);
  }
}

TEST_CASE("fresh editor starts at the uniform-prediction loss") {
  const Vocab v = toy_vocab();
  Rng rng(3);
  Editor ed({32, 32}, v, rng);
  grad::AdamW opt({0.0f, 0.0f});
  EditExample ex{word_ids(v, "a b c d"), {0, 1, 0, 1}, v.label_id("negative")};
  const double loss = ed.train_batch({ex}, opt);
  CHECK(loss == doctest::Approx(std::log(static_cast<double>(v.size()))).epsilon(1e-4));
}

TEST_CASE("editor learns label-conditioned spans") {
  const Vocab v = toy_vocab();
  Rng rng(11);
  Editor ed({32, 32}, v, rng);
  grad::AdamW opt({1e-2f, 0.0f});

  // the masked token is c under one label and d under the other
  const EditExample neg{word_ids(v, "a c b"), {0, 1, 0}, v.label_id("negative")};
  const EditExample pos{word_ids(v, "a d b"), {0, 1, 0}, v.label_id("positive")};
  const std::vector<EditExample> batch = {neg, pos};

  const double first = ed.train_batch(batch, opt);
  double last = first;
  for (int step = 0; step < 250; ++step) last = ed.train_batch(batch, opt);
  CHECK(first == doctest::Approx(std::log(static_cast<double>(v.size()))).epsilon(1e-4));
  CHECK(last < first / 3.0);

  // the label token feeds the encoder, so its embedding row trains
  const auto& items = ed.params().items;
  const auto emb = std::find_if(items.begin(), items.end(),
                                [](const auto& it) { return it.first == "emb"; });
  REQUIRE(emb != items.end());
  float label_grad = 0.0f;
  const int d = ed.config().d;
  for (int j = 0; j < d; ++j)
    label_grad += std::abs(emb->second->grad[static_cast<std::size_t>(neg.label_id) * d + j]);
  CHECK(label_grad > 0.0f);

  // generation follows the conditioning label
  const MaskedInput masked = apply_sentinels(neg.tokens, neg.z, v);
  const InfillResult as_neg = ed.generate(masked, neg.label_id, {});
  const InfillResult as_pos = ed.generate(masked, pos.label_id, {});
  CHECK(as_neg.tokens == neg.tokens);
  CHECK(as_pos.tokens == pos.tokens);
  CHECK_FALSE(as_neg.flagged);
  CHECK_FALSE(as_pos.flagged);
}

TEST_CASE("beam of one matches a greedy reference decode") {
  const Vocab v = toy_vocab();
  Rng rng(23);
  Editor ed({32, 32}, v, rng);
  const int label = v.label_id("positive");
  const int kSteps = 6;

  for (int trial = 0; trial < 5; ++trial) {
    std::vector<int> tokens(6), z = {0, 1, 0, 0, 1, 0};
    for (auto& t : tokens) t = rng.uniform_int(4, 11);
    const MaskedInput masked = apply_sentinels(tokens, z, v);

    std::vector<int> expected;
    for (int t : masked.source)
      if (v.is_sentinel(t)) expected.push_back(t);
    std::vector<int> caps(expected.size(), 4 + 2);  // every span here is one token
    std::vector<int> src = {label};
    src.insert(src.end(), masked.source.begin(), masked.source.end());

    // greedy reference under the same structural forcing rules
    std::vector<int> seq;
    int sentinels = 0, span_tokens = 0;
    const int m = static_cast<int>(expected.size());
    while (true) {
      const auto lps = ed.next_token_logprobs(src, seq);
      int forced = -1;
      if (static_cast<int>(seq.size()) >= kSteps) {
        forced = Vocab::kEos;
      } else {
        const int slot = std::min(sentinels, m);
        const int cap = slot == 0 ? 4 : caps[slot - 1];
        if (span_tokens >= cap) forced = sentinels < m ? expected[sentinels] : Vocab::kEos;
      }
      int pick = forced;
      if (pick < 0) {
        double best = -1e300;
        for (int t = 0; t < v.size(); ++t) {
          if (t == Vocab::kPad) continue;
          if (lps[t] > best) {
            best = lps[t];
            pick = t;
          }
        }
      }
      seq.push_back(pick);
      if (pick == Vocab::kEos) break;
      if (v.is_sentinel(pick)) {
        ++sentinels;
        span_tokens = 0;
      } else {
        ++span_tokens;
      }
    }
    const InfillResult want = substitute_spans(masked.source, seq, v);

    BeamConfig beam;
    beam.size = 1;
    beam.no_repeat_bigram = false;
    beam.max_steps = kSteps;
    const InfillResult got = ed.generate(masked, label, beam);
    CHECK(got.tokens == want.tokens);
    CHECK(got.flagged == want.flagged);
  }
}

TEST_CASE("wide beam finds the best short sequence exhaustively") {
  const Vocab v = toy_vocab();
  Rng rng(31);
  Editor ed({24, 32}, v, rng);
  const int label = v.label_id("negative");
  const std::vector<int> tokens = word_ids(v, "a b c");
  const MaskedInput masked = apply_sentinels(tokens, {0, 1, 0}, v);
  std::vector<int> src = {label};
  src.insert(src.end(), masked.source.begin(), masked.source.end());

  // enumerate every sequence the two-step decode can produce: EOS may come
  // early, and the step limit forces it with its true log-probability
  double best_score = -1e300;
  std::vector<int> best_seq;
  const auto lp0 = ed.next_token_logprobs(src, {});
  auto consider = [&](const std::vector<int>& seq, double lp) {
    const double score = lp / static_cast<double>(seq.size());
    if (score > best_score) {
      best_score = score;
      best_seq = seq;
    }
  };
  consider({Vocab::kEos}, lp0[Vocab::kEos]);
  for (int t1 = 0; t1 < v.size(); ++t1) {
    if (t1 == Vocab::kPad || t1 == Vocab::kEos) continue;
    const auto lp1 = ed.next_token_logprobs(src, {t1});
    consider({t1, Vocab::kEos}, lp0[t1] + lp1[Vocab::kEos]);
    for (int t2 = 0; t2 < v.size(); ++t2) {
      if (t2 == Vocab::kPad || t2 == Vocab::kEos) continue;
      const auto lp2 = ed.next_token_logprobs(src, {t1, t2});
      consider({t1, t2, Vocab::kEos}, lp0[t1] + lp1[t2] + lp2[Vocab::kEos]);
    }
  }

  BeamConfig beam;
  beam.size = 400;  // wider than the whole candidate tree, so nothing is pruned
  beam.no_repeat_bigram = false;
  beam.max_steps = 2;
  const InfillResult got = ed.generate(masked, label, beam);
  const InfillResult want = substitute_spans(masked.source, best_seq, v);
  CHECK(got.tokens == want.tokens);
  CHECK(got.flagged == want.flagged);
}

TEST_CASE("generation preserves the unmasked scaffold") {
  const Vocab v = toy_vocab();
  Rng rng(41);
  Editor ed({32, 32}, v, rng);
  const int label = v.label_id("positive");
  BeamConfig beam;
  beam.size = 3;

  for (int trial = 0; trial < 10; ++trial) {
    const int n = rng.uniform_int(4, 9);
    std::vector<int> tokens(n), z(n, 0);
    for (auto& t : tokens) t = rng.uniform_int(4, 11);
    z[rng.uniform_int(0, n - 1)] = 1;
    z[rng.uniform_int(0, n - 1)] = 1;
    const MaskedInput masked = apply_sentinels(tokens, z, v);
    const InfillResult out = ed.generate(masked, label, beam);

    // unmasked tokens appear in order, and no structural token leaks out
    std::size_t at = 0;
    for (int t : masked.source) {
      if (v.is_sentinel(t)) continue;
      while (at < out.tokens.size() && out.tokens[at] != t) ++at;
      REQUIRE(at < out.tokens.size());
      ++at;
    }
    for (int t : out.tokens) {
      CHECK_FALSE(v.is_sentinel(t));
      CHECK_FALSE(v.is_label(t));
      CHECK(t != Vocab::kPad);
      CHECK(t != Vocab::kEos);
    }
  }
}

TEST_CASE("editor without sentinels returns the source untouched") {
  const Vocab v = toy_vocab();
  Rng rng(5);
  Editor ed({16, 32}, v, rng);
  MaskedInput masked;
  masked.source = word_ids(v, "a b c");
  const InfillResult out = ed.generate(masked, v.label_id("negative"), {});
  CHECK(out.tokens == masked.source);
  CHECK_FALSE(out.flagged);
}

TEST_CASE("editor checkpoints restore byte-identical behavior") {
  const Vocab v = toy_vocab();
  Rng rng(13);
  Editor ed({32, 48}, v, rng);
  const std::string path = temp_path("editor.ckpt");
  ed.save(path);

  const Editor back = Editor::load(path, v);
  CHECK(back.config().d == 32);
  CHECK(back.config().max_len == 48);
  const std::vector<int> src = {v.label_id("positive"), v.id("a"), v.sentinel_id(0), v.id("b")};
  const auto lp_a = ed.next_token_logprobs(src, {v.sentinel_id(0)});
  const auto lp_b = back.next_token_logprobs(src, {v.sentinel_id(0)});
  CHECK(lp_a == lp_b);

  SUBCASE("a different vocabulary is rejected") {
    Vocab other = toy_vocab();
    other.add("zzz");
    CHECK_THROWS(Editor::load(path, other));
  }
  SUBCASE("a rationalizer checkpoint is rejected") {
    RationalizerConfig cfg;
    cfg.vocab_size = v.size();
    cfg.n_classes = 2;
    cfg.d = 8;
    Rng r2(1);
    Rationalizer rat(cfg, r2);
    const std::string other = temp_path("not_editor.ckpt");
    rat.save(other, v.hash());
    CHECK_THROWS_WITH(Editor::load(other, v), doctest::Contains("rationalizer"));
  }
}
