#pragma once

#include <string>
#include <utility>
#include <vector>

#include "crest/graph.hpp"
#include "crest/random.hpp"
#include "crest/tokenizer.hpp"

namespace crest {

// Source with each masked span collapsed to one sentinel, and the
// sentinel-delimited original spans as the reconstruction target.
struct MaskedInput {
  std::vector<int> source;
  std::vector<int> target;  // SENT_i span_i ... EOS
};

struct InfillResult {
  std::vector<int> tokens;
  bool flagged{false};  // generation needed salvage to line up with the source
};

struct BeamConfig {
  int size{15};
  bool no_repeat_bigram{true};
  int max_steps{0};  // 0: derived from the span length caps
};

struct EditorConfig {
  int d{64};
  int max_len{128};
};

struct EditExample {
  std::vector<int> tokens;
  std::vector<int> z;
  int label_id{-1};
};

// Collapse maximal runs of z=1 into numbered sentinels.
MaskedInput apply_sentinels(const std::vector<int>& tokens, const std::vector<int>& z,
                            const Vocab& vocab);

// Substitute generated spans back into the sentinel slots of source. A
// generation whose sentinel sequence does not match the source is salvaged
// by positional alignment (i-th emitted chunk fills the i-th slot) and
// flagged. Stray special tokens inside spans are dropped and adjacent
// repeats of special symbols collapse to one.
InfillResult substitute_spans(const std::vector<int>& source, const std::vector<int>& generated,
                              const Vocab& vocab);

// Span infiller conditioned on a label token: one-block encoder, one-block
// causal decoder with cross-attention, trained teacher-forced to rebuild
// the masked spans. Generation runs beam search under a target label with
// a no-repeat-bigram constraint, per-span length caps (twice the original
// span plus four), and length-normalized scoring.
class Editor {
 public:
  Editor(EditorConfig cfg, const Vocab& vocab, Rng& rng);

  const EditorConfig& config() const { return cfg_; }
  const Vocab& vocab() const { return vocab_; }
  grad::ParamSet& params() { return params_; }
  const grad::ParamSet& params() const { return params_; }

  // one optimizer update on the mean per-token reconstruction loss
  double train_batch(const std::vector<EditExample>& batch, grad::AdamW& opt);
  double train_step(const EditExample& example, grad::AdamW& opt);

  // log-probabilities of the next target token given a source (label
  // already prepended) and the decoded prefix
  std::vector<double> next_token_logprobs(const std::vector<int>& source,
                                          const std::vector<int>& prefix) const;

  InfillResult generate(const MaskedInput& masked, int label_id, const BeamConfig& beam) const;

  void save(const std::string& path) const;
  static Editor load(const std::string& path, const Vocab& vocab);

 private:
  explicit Editor(EditorConfig cfg, const Vocab& vocab);

  void init_params(Rng* rng);
  void check_sequence(const std::vector<int>& tokens, const char* what) const;
  int build_encoder(grad::Graph& g, const std::vector<int>& source) const;
  int build_decoder(grad::Graph& g, int enc, const std::vector<int>& dec_in) const;
  std::vector<double> step_logprobs(const grad::Tensor& enc,
                                    const std::vector<int>& prefix) const;

  EditorConfig cfg_;
  Vocab vocab_;
  grad::ParamSet params_;
  grad::TensorPtr emb_, pos_enc_, pos_dec_;
  grad::TensorPtr e_ln1_g_, e_ln1_b_, e_wq_, e_wk_, e_wv_, e_wo_;
  grad::TensorPtr e_ln2_g_, e_ln2_b_, e_ff1_w_, e_ff1_b_, e_ff2_w_, e_ff2_b_;
  grad::TensorPtr d_ln1_g_, d_ln1_b_, d_wq_, d_wk_, d_wv_, d_wo_;
  grad::TensorPtr d_ln2_g_, d_ln2_b_, c_wq_, c_wk_, c_wv_, c_wo_;
  grad::TensorPtr d_ln3_g_, d_ln3_b_, d_ff1_w_, d_ff1_b_, d_ff2_w_, d_ff2_b_;
  grad::TensorPtr out_w_, out_b_;
};

}  // namespace crest
