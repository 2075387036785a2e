#include "crest/editor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "crest/checkpoint.hpp"

namespace crest {

using grad::Graph;
using grad::Tensor;

MaskedInput apply_sentinels(const std::vector<int>& tokens, const std::vector<int>& z,
                            const Vocab& vocab) {
  if (tokens.size() != z.size()) {
    throw std::invalid_argument("mask of length " + std::to_string(z.size()) +
                                " does not match " + std::to_string(tokens.size()) + " tokens");
  }
  for (int zi : z) {
    if (zi != 0 && zi != 1) throw std::invalid_argument("mask entries must be 0 or 1");
  }
  if (std::count(z.begin(), z.end(), 1) == 0) throw std::invalid_argument("nothing to edit");

  MaskedInput out;
  int next_sentinel = 0;
  for (std::size_t i = 0; i < tokens.size();) {
    if (z[i] == 0) {
      out.source.push_back(tokens[i]);
      ++i;
      continue;
    }
    const int sid = vocab.sentinel_id(next_sentinel++);
    out.source.push_back(sid);
    out.target.push_back(sid);
    while (i < tokens.size() && z[i] == 1) out.target.push_back(tokens[i++]);
  }
  out.target.push_back(Vocab::kEos);
  return out;
}

InfillResult substitute_spans(const std::vector<int>& source, const std::vector<int>& generated,
                              const Vocab& vocab) {
  std::vector<int> expected;
  for (int t : source) {
    if (vocab.is_sentinel(t)) expected.push_back(t);
  }

  // split the generation into sentinel-delimited chunks, stopping at EOS
  std::vector<int> emitted;
  std::vector<std::vector<int>> chunks;
  bool junk_prefix = false, saw_eos = false;
  for (int t : generated) {
    if (t == Vocab::kEos) {
      saw_eos = true;
      break;
    }
    if (vocab.is_sentinel(t)) {
      emitted.push_back(t);
      chunks.emplace_back();
    } else if (chunks.empty()) {
      junk_prefix = true;
    } else {
      chunks.back().push_back(t);
    }
  }

  InfillResult out;
  out.flagged = emitted != expected || junk_prefix || !saw_eos;

  // chunk i fills slot i whatever sentinel the decoder actually named
  std::size_t slot = 0;
  for (int t : source) {
    if (!vocab.is_sentinel(t)) {
      out.tokens.push_back(t);
      continue;
    }
    if (slot < chunks.size()) {
      for (int s : chunks[slot]) {
        if (vocab.is_special(s) && s != Vocab::kSep && s != Vocab::kUnk) continue;
        out.tokens.push_back(s);
      }
    }
    ++slot;
  }

  // collapse adjacent repeats of special symbols
  std::vector<int> trimmed;
  for (int t : out.tokens) {
    if (!trimmed.empty() && t == trimmed.back() && vocab.is_special(t)) continue;
    trimmed.push_back(t);
  }
  out.tokens = std::move(trimmed);
  return out;
}

Editor::Editor(EditorConfig cfg, const Vocab& vocab) : cfg_(cfg), vocab_(vocab) {
  init_params(nullptr);
}

Editor::Editor(EditorConfig cfg, const Vocab& vocab, Rng& rng) : cfg_(cfg), vocab_(vocab) {
  if (cfg_.d <= 0 || cfg_.max_len <= 0) throw std::invalid_argument("d and max_len must be positive");
  if (vocab_.sentinel_count() == 0) throw std::invalid_argument("vocabulary has no sentinels");
  if (vocab_.label_names().empty()) throw std::invalid_argument("vocabulary has no label tokens");
  init_params(&rng);
}

void Editor::init_params(Rng* rng) {
  const int d = cfg_.d;
  const int h = 2 * d;
  const int v = vocab_.size();
  const float s_d = 1.0f / std::sqrt(static_cast<float>(d));
  const float s_h = 1.0f / std::sqrt(static_cast<float>(h));
  auto mat = [&](std::vector<int> shape, float stddev) {
    return rng ? Tensor::randn(shape, *rng, stddev) : Tensor(shape);
  };
  emb_ = params_.add("emb", mat({v, d}, 0.1f));
  pos_enc_ = params_.add("pos_enc", mat({cfg_.max_len, d}, 0.1f));
  pos_dec_ = params_.add("pos_dec", mat({cfg_.max_len, d}, 0.1f));
  e_ln1_g_ = params_.add("e_ln1_gain", Tensor({d}, 1.0f));
  e_ln1_b_ = params_.add("e_ln1_bias", Tensor({d}));
  e_wq_ = params_.add("e_wq", mat({d, d}, s_d));
  e_wk_ = params_.add("e_wk", mat({d, d}, s_d));
  e_wv_ = params_.add("e_wv", mat({d, d}, s_d));
  e_wo_ = params_.add("e_wo", mat({d, d}, s_d));
  e_ln2_g_ = params_.add("e_ln2_gain", Tensor({d}, 1.0f));
  e_ln2_b_ = params_.add("e_ln2_bias", Tensor({d}));
  e_ff1_w_ = params_.add("e_ff1_w", mat({d, h}, s_d));
  e_ff1_b_ = params_.add("e_ff1_b", Tensor({1, h}));
  e_ff2_w_ = params_.add("e_ff2_w", mat({h, d}, s_h));
  e_ff2_b_ = params_.add("e_ff2_b", Tensor({1, d}));
  d_ln1_g_ = params_.add("d_ln1_gain", Tensor({d}, 1.0f));
  d_ln1_b_ = params_.add("d_ln1_bias", Tensor({d}));
  d_wq_ = params_.add("d_wq", mat({d, d}, s_d));
  d_wk_ = params_.add("d_wk", mat({d, d}, s_d));
  d_wv_ = params_.add("d_wv", mat({d, d}, s_d));
  d_wo_ = params_.add("d_wo", mat({d, d}, s_d));
  d_ln2_g_ = params_.add("d_ln2_gain", Tensor({d}, 1.0f));
  d_ln2_b_ = params_.add("d_ln2_bias", Tensor({d}));
  c_wq_ = params_.add("c_wq", mat({d, d}, s_d));
  c_wk_ = params_.add("c_wk", mat({d, d}, s_d));
  c_wv_ = params_.add("c_wv", mat({d, d}, s_d));
  c_wo_ = params_.add("c_wo", mat({d, d}, s_d));
  d_ln3_g_ = params_.add("d_ln3_gain", Tensor({d}, 1.0f));
  d_ln3_b_ = params_.add("d_ln3_bias", Tensor({d}));
  d_ff1_w_ = params_.add("d_ff1_w", mat({d, h}, s_d));
  d_ff1_b_ = params_.add("d_ff1_b", Tensor({1, h}));
  d_ff2_w_ = params_.add("d_ff2_w", mat({h, d}, s_h));
  d_ff2_b_ = params_.add("d_ff2_b", Tensor({1, d}));
  // zero output projection: the initial per-token loss is ln(vocab size)
  out_w_ = params_.add("out_w", Tensor({d, v}));
  out_b_ = params_.add("out_b", Tensor({1, v}));
}

void Editor::check_sequence(const std::vector<int>& tokens, const char* what) const {
  if (tokens.empty()) throw std::invalid_argument(std::string("empty ") + what);
  if (static_cast<int>(tokens.size()) > cfg_.max_len) {
    throw std::invalid_argument(std::string(what) + " of " + std::to_string(tokens.size()) +
                                " tokens exceeds max_len " + std::to_string(cfg_.max_len));
  }
  for (int t : tokens) {
    if (t < 0 || t >= vocab_.size()) {
      throw std::invalid_argument("token id " + std::to_string(t) + " outside vocabulary in " +
                                  what);
    }
  }
}

namespace {

int position_rows(Graph& g, grad::TensorPtr table, std::size_t count) {
  std::vector<int> pos(count);
  std::iota(pos.begin(), pos.end(), 0);
  return g.gather_rows(g.leaf(std::move(table)), pos);
}

}  // namespace

int Editor::build_encoder(Graph& g, const std::vector<int>& source) const {
  const int X = g.add(g.gather_rows(g.leaf(emb_), source), position_rows(g, pos_enc_, source.size()));
  const int u = g.layer_norm(X, g.leaf(e_ln1_g_), g.leaf(e_ln1_b_));
  const int q = g.matmul(u, g.leaf(e_wq_));
  const int k = g.matmul(u, g.leaf(e_wk_));
  const int v = g.matmul(u, g.leaf(e_wv_));
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(cfg_.d));
  const int att = g.row_softmax(g.scale(g.matmul(q, g.transpose(k)), inv_sqrt));
  const int a = g.add(X, g.matmul(g.matmul(att, v), g.leaf(e_wo_)));
  const int w = g.layer_norm(a, g.leaf(e_ln2_g_), g.leaf(e_ln2_b_));
  const int f1 = g.tanh(g.add_row_broadcast(g.matmul(w, g.leaf(e_ff1_w_)), g.leaf(e_ff1_b_)));
  const int f2 = g.add_row_broadcast(g.matmul(f1, g.leaf(e_ff2_w_)), g.leaf(e_ff2_b_));
  return g.add(a, f2);
}

int Editor::build_decoder(Graph& g, int enc, const std::vector<int>& dec_in) const {
  const int m = static_cast<int>(dec_in.size());
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(cfg_.d));
  const int X = g.add(g.gather_rows(g.leaf(emb_), dec_in), position_rows(g, pos_dec_, dec_in.size()));

  Tensor causal({m, m});
  for (int i = 0; i < m; ++i)
    for (int j = i + 1; j < m; ++j) causal.at(i, j) = -1e9f;
  const int u = g.layer_norm(X, g.leaf(d_ln1_g_), g.leaf(d_ln1_b_));
  const int q = g.matmul(u, g.leaf(d_wq_));
  const int k = g.matmul(u, g.leaf(d_wk_));
  const int v = g.matmul(u, g.leaf(d_wv_));
  const int scores = g.add(g.scale(g.matmul(q, g.transpose(k)), inv_sqrt),
                           g.constant(std::move(causal)));
  const int a = g.add(X, g.matmul(g.matmul(g.row_softmax(scores), v), g.leaf(d_wo_)));

  const int u2 = g.layer_norm(a, g.leaf(d_ln2_g_), g.leaf(d_ln2_b_));
  const int qc = g.matmul(u2, g.leaf(c_wq_));
  const int kc = g.matmul(enc, g.leaf(c_wk_));
  const int vc = g.matmul(enc, g.leaf(c_wv_));
  const int cross = g.row_softmax(g.scale(g.matmul(qc, g.transpose(kc)), inv_sqrt));
  const int b = g.add(a, g.matmul(g.matmul(cross, vc), g.leaf(c_wo_)));

  const int u3 = g.layer_norm(b, g.leaf(d_ln3_g_), g.leaf(d_ln3_b_));
  const int f1 = g.tanh(g.add_row_broadcast(g.matmul(u3, g.leaf(d_ff1_w_)), g.leaf(d_ff1_b_)));
  const int f2 = g.add_row_broadcast(g.matmul(f1, g.leaf(d_ff2_w_)), g.leaf(d_ff2_b_));
  return g.add(b, f2);
}

double Editor::train_batch(const std::vector<EditExample>& batch, grad::AdamW& opt) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  params_.zero_grads();
  const float inv = 1.0f / static_cast<float>(batch.size());
  double total = 0.0;
  for (const auto& ex : batch) {
    if (!vocab_.is_label(ex.label_id)) {
      throw std::invalid_argument("label id " + std::to_string(ex.label_id) +
                                  " is not a label token");
    }
    const MaskedInput masked = apply_sentinels(ex.tokens, ex.z, vocab_);
    std::vector<int> src = {ex.label_id};
    src.insert(src.end(), masked.source.begin(), masked.source.end());
    check_sequence(src, "source");
    check_sequence(masked.target, "target");
    std::vector<int> dec_in = {Vocab::kPad};
    dec_in.insert(dec_in.end(), masked.target.begin(), masked.target.end() - 1);

    Graph g;
    const int enc = build_encoder(g, src);
    const int dec = build_decoder(g, enc, dec_in);
    const int logits = g.add_row_broadcast(g.matmul(dec, g.leaf(out_w_)), g.leaf(out_b_));
    const int loss = g.cross_entropy_logits(logits, masked.target);
    const int scaled = g.scale(loss, inv);
    g.forward();
    g.backward(scaled);
    total += g.value(loss).data[0];
  }
  opt.step(params_);
  return total / static_cast<double>(batch.size());
}

double Editor::train_step(const EditExample& example, grad::AdamW& opt) {
  return train_batch({example}, opt);
}

std::vector<double> Editor::step_logprobs(const Tensor& enc,
                                          const std::vector<int>& prefix) const {
  std::vector<int> dec_in = {Vocab::kPad};
  dec_in.insert(dec_in.end(), prefix.begin(), prefix.end());
  Graph g;
  const int dec = build_decoder(g, g.constant(enc), dec_in);
  const int logits = g.add_row_broadcast(g.matmul(dec, g.leaf(out_w_)), g.leaf(out_b_));
  g.forward();
  const Tensor& lv = g.value(logits);
  const int last = lv.rows() - 1;
  const int v = lv.cols();
  double mx = -1e300;
  for (int j = 0; j < v; ++j) mx = std::max(mx, static_cast<double>(lv.at(last, j)));
  double z = 0.0;
  for (int j = 0; j < v; ++j) z += std::exp(static_cast<double>(lv.at(last, j)) - mx);
  const double log_z = mx + std::log(z);
  std::vector<double> out(v);
  for (int j = 0; j < v; ++j) out[j] = static_cast<double>(lv.at(last, j)) - log_z;
  return out;
}

std::vector<double> Editor::next_token_logprobs(const std::vector<int>& source,
                                                const std::vector<int>& prefix) const {
  check_sequence(source, "source");
  Graph g;
  const int enc = build_encoder(g, source);
  g.forward();
  return step_logprobs(g.value(enc), prefix);
}

InfillResult Editor::generate(const MaskedInput& masked, int label_id,
                              const BeamConfig& beam) const {
  if (beam.size < 1) throw std::invalid_argument("beam size must be at least 1");
  if (!vocab_.is_label(label_id)) {
    throw std::invalid_argument("label id " + std::to_string(label_id) + " is not a label token");
  }
  std::vector<int> expected;
  for (int t : masked.source) {
    if (vocab_.is_sentinel(t)) expected.push_back(t);
  }
  if (expected.empty()) return {masked.source, false};

  // per-span generation caps: twice the original span length plus four
  std::vector<int> caps(expected.size(), 4);
  {
    int slot = -1;
    for (int t : masked.target) {
      if (t == Vocab::kEos) break;
      if (vocab_.is_sentinel(t)) {
        ++slot;
        continue;
      }
      if (slot >= 0 && slot < static_cast<int>(caps.size())) caps[slot] += 2;
    }
  }

  std::vector<int> src = {label_id};
  src.insert(src.end(), masked.source.begin(), masked.source.end());
  check_sequence(src, "source");
  Tensor enc;
  {
    Graph g;
    const int e = build_encoder(g, src);
    g.forward();
    enc = g.value(e);
  }

  int max_steps = 4 + static_cast<int>(expected.size()) + 1;
  for (int c : caps) max_steps += c;
  max_steps = std::min(max_steps, cfg_.max_len - 2);
  if (beam.max_steps > 0) max_steps = std::min(max_steps, beam.max_steps);

  struct Hyp {
    std::vector<int> seq;
    double lp{0.0};
    int sentinels{0};
    int span_tokens{0};
  };
  std::vector<Hyp> live(1);
  std::vector<Hyp> done;
  const int m = static_cast<int>(expected.size());

  while (!live.empty()) {
    std::vector<Hyp> candidates;
    for (const Hyp& h : live) {
      const auto lps = step_logprobs(enc, h.seq);
      // structural forcing: a span at its cap moves on to the next
      // delimiter, and the step limit closes the sequence
      int forced = -1;
      if (static_cast<int>(h.seq.size()) >= max_steps) {
        forced = Vocab::kEos;
      } else {
        const int slot = std::min(h.sentinels, m);
        const int cap = slot == 0 ? 4 : caps[slot - 1];
        if (h.span_tokens >= cap) forced = h.sentinels < m ? expected[h.sentinels] : Vocab::kEos;
      }
      std::vector<int> banned;
      if (beam.no_repeat_bigram && !h.seq.empty()) {
        for (std::size_t i = 0; i + 1 < h.seq.size(); ++i) {
          if (h.seq[i] == h.seq.back()) banned.push_back(h.seq[i + 1]);
        }
      }
      for (int t = 0; t < vocab_.size(); ++t) {
        if (forced >= 0 && t != forced) continue;
        if (t == Vocab::kPad) continue;
        if (forced < 0 && std::find(banned.begin(), banned.end(), t) != banned.end()) continue;
        Hyp next = h;
        next.seq.push_back(t);
        next.lp += lps[t];
        if (vocab_.is_sentinel(t)) {
          ++next.sentinels;
          next.span_tokens = 0;
        } else if (t != Vocab::kEos) {
          ++next.span_tokens;
        }
        candidates.push_back(std::move(next));
      }
    }
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Hyp& a, const Hyp& b) { return a.lp > b.lp; });
    if (static_cast<int>(candidates.size()) > beam.size) candidates.resize(beam.size);
    live.clear();
    for (Hyp& c : candidates) {
      if (c.seq.back() == Vocab::kEos) {
        done.push_back(std::move(c));
      } else {
        live.push_back(std::move(c));
      }
    }
  }

  // highest length-normalized log-probability among completed hypotheses
  const Hyp* best = nullptr;
  double best_score = -1e300;
  for (const Hyp& h : done) {
    const double score = h.lp / static_cast<double>(h.seq.size());
    if (best == nullptr || score > best_score) {
      best = &h;
      best_score = score;
    }
  }
  if (best == nullptr) return {masked.source, true};
  return substitute_spans(masked.source, best->seq, vocab_);
}

void Editor::save(const std::string& path) const {
  Checkpoint ckpt;
  ckpt.vocab_hash = vocab_.hash();
  ckpt.set_number("d", cfg_.d);
  ckpt.set_number("max_len", cfg_.max_len);
  ckpt.set_string("model", "editor");
  for (const auto& [name, p] : params_.items) ckpt.tensors.emplace_back(name, *p);
  save_checkpoint(ckpt, path);
}

Editor Editor::load(const std::string& path, const Vocab& vocab) {
  const Checkpoint ckpt = load_checkpoint(path, vocab.hash());
  if (ckpt.str("model") != "editor") {
    throw std::runtime_error(path + ": checkpoint holds a " + ckpt.str("model") +
                             " model, expected editor");
  }
  EditorConfig cfg;
  cfg.d = static_cast<int>(ckpt.number("d"));
  cfg.max_len = static_cast<int>(ckpt.number("max_len"));
  Editor model(cfg, vocab);
  if (ckpt.tensors.size() != model.params_.items.size()) {
    throw std::runtime_error(path + ": checkpoint holds " + std::to_string(ckpt.tensors.size()) +
                             " tensors, model has " + std::to_string(model.params_.items.size()));
  }
  for (std::size_t i = 0; i < ckpt.tensors.size(); ++i) {
    auto& [name, p] = model.params_.items[i];
    const auto& [ck_name, ck_t] = ckpt.tensors[i];
    if (ck_name != name || ck_t.shape != p->shape) {
      throw std::runtime_error(path + ": tensor " + ck_name + " does not match model slot " + name);
    }
    p->data = ck_t.data;
  }
  return model;
}

}  // namespace crest
