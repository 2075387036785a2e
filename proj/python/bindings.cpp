#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "crest/agreement.hpp"
#include "crest/corpus.hpp"
#include "crest/editor.hpp"
#include "crest/generation.hpp"
#include "crest/metrics.hpp"
#include "crest/random.hpp"
#include "crest/rationalizer.hpp"
#include "crest/sparsemap.hpp"
#include "crest/tensor.hpp"
#include "crest/tokenizer.hpp"

namespace py = pybind11;
using namespace crest;

PYBIND11_MODULE(_core, m) {
  m.doc() = "budget-constrained rationales, counterfactual editing, and their metrics";

  // tokenizer / corpus
  py::class_<Vocab>(m, "Vocab")
      .def(py::init<>())
      .def("add", &Vocab::add)
      .def("id", &Vocab::id)
      .def("contains", &Vocab::contains)
      .def("token", &Vocab::token)
      .def("size", &Vocab::size)
      .def("add_labels", &Vocab::add_labels)
      .def("label_id", &Vocab::label_id)
      .def("label_names", &Vocab::label_names)
      .def("add_sentinels", &Vocab::add_sentinels, py::arg("count") = 100)
      .def("sentinel_id", &Vocab::sentinel_id)
      .def("is_sentinel", &Vocab::is_sentinel)
      .def("is_special", &Vocab::is_special)
      .def("encode", &Vocab::encode)
      .def("decode", &Vocab::decode)
      .def("hash", &Vocab::hash)
      .def_readonly_static("PAD", &Vocab::kPad)
      .def_readonly_static("UNK", &Vocab::kUnk)
      .def_readonly_static("EOS", &Vocab::kEos)
      .def_readonly_static("SEP", &Vocab::kSep);
  m.def("word_tokenize", &word_tokenize);

  py::class_<Example>(m, "Example")
      .def(py::init<>())
      .def_readwrite("id", &Example::id)
      .def_readwrite("text", &Example::text)
      .def_readwrite("label", &Example::label)
      .def_readwrite("rationale", &Example::rationale)
      .def_readwrite("split", &Example::split);

  py::class_<CounterfactualPair>(m, "CounterfactualPair")
      .def(py::init<>())
      .def_readwrite("id", &CounterfactualPair::id)
      .def_readwrite("text", &CounterfactualPair::text)
      .def_readwrite("label", &CounterfactualPair::label)
      .def_readwrite("counterfactual", &CounterfactualPair::counterfactual)
      .def_readwrite("counterfactual_label", &CounterfactualPair::counterfactual_label)
      .def_readwrite("rationale_mask", &CounterfactualPair::rationale_mask)
      .def_readwrite("counterfactual_mask", &CounterfactualPair::counterfactual_mask)
      .def_readwrite("valid", &CounterfactualPair::valid)
      .def_readwrite("flagged", &CounterfactualPair::flagged);

  m.def("sentiment_classes", &sentiment_classes);
  m.def("nli_classes", &nli_classes);
  m.def("gen_sentiment_corpus", &gen_sentiment_corpus, py::arg("seed"), py::arg("size"),
        py::arg("min_len"), py::arg("max_len"), py::arg("distractor_rate"));
  m.def("gen_nli_corpus", &gen_nli_corpus, py::arg("seed"), py::arg("size"));
  m.def("sentiment_oracle", &sentiment_oracle);
  m.def("nli_oracle", &nli_oracle);
  m.def(
      "assign_splits",
      [](std::vector<Example> examples, double train_frac, double dev_frac) {
        assign_splits(examples, train_frac, dev_frac);
        return examples;
      },
      py::arg("examples"), py::arg("train_frac"), py::arg("dev_frac"),
      "returns the examples with splits assigned");
  m.def("filter_split", &filter_split);
  m.def("build_vocab", &build_vocab);
  m.def("read_examples_jsonl", &read_examples_jsonl);
  m.def("write_examples_jsonl", &write_examples_jsonl);
  m.def("read_pairs_jsonl", &read_pairs_jsonl);
  m.def("write_pairs_jsonl", &write_pairs_jsonl);

  // randomness and optimization
  py::class_<Rng>(m, "Rng")
      .def(py::init<std::uint64_t>(), py::arg("seed"))
      .def("uniform", py::overload_cast<>(&Rng::uniform))
      .def("uniform_int", &Rng::uniform_int)
      .def("gaussian", &Rng::gaussian)
      .def("bernoulli", &Rng::bernoulli);

  py::class_<grad::AdamWConfig>(m, "AdamWConfig")
      .def(py::init([](float lr, float weight_decay, float beta1, float beta2, float eps) {
             return grad::AdamWConfig{lr, weight_decay, beta1, beta2, eps};
           }),
           py::arg("lr") = 1e-4f, py::arg("weight_decay") = 1e-6f, py::arg("beta1") = 0.9f,
           py::arg("beta2") = 0.999f, py::arg("eps") = 1e-8f)
      .def_readwrite("lr", &grad::AdamWConfig::lr)
      .def_readwrite("weight_decay", &grad::AdamWConfig::weight_decay)
      .def_readwrite("beta1", &grad::AdamWConfig::beta1)
      .def_readwrite("beta2", &grad::AdamWConfig::beta2)
      .def_readwrite("eps", &grad::AdamWConfig::eps);

  py::class_<grad::AdamW>(m, "AdamW")
      .def(py::init<grad::AdamWConfig>(), py::arg("config") = grad::AdamWConfig{})
      .def("step_count", &grad::AdamW::step_count);

  // mask polytope inference
  py::class_<sparsemap::BudgetFactor>(m, "BudgetFactor")
      .def(py::init([](int n, int k, double transition_penalty) {
             return sparsemap::BudgetFactor{n, k, transition_penalty};
           }),
           py::arg("n"), py::arg("k"), py::arg("transition_penalty") = 0.0)
      .def_readwrite("n", &sparsemap::BudgetFactor::n)
      .def_readwrite("k", &sparsemap::BudgetFactor::k)
      .def_readwrite("transition_penalty", &sparsemap::BudgetFactor::transition_penalty);

  py::class_<sparsemap::SparseMapSolution>(m, "SparseMapSolution")
      .def_readonly("marginals", &sparsemap::SparseMapSolution::marginals)
      .def_readonly("active_vertices", &sparsemap::SparseMapSolution::active_vertices)
      .def_readonly("coefficients", &sparsemap::SparseMapSolution::coefficients)
      .def_readonly("converged", &sparsemap::SparseMapSolution::converged)
      .def_readonly("iterations", &sparsemap::SparseMapSolution::iterations);

  m.def("transition_count", &sparsemap::transition_count);
  m.def("map_oracle", &sparsemap::map_oracle);
  m.def("sparsemap", &sparsemap::sparsemap, py::arg("scores"), py::arg("factor"),
        py::arg("max_iter") = 100, py::arg("tol") = 1e-6,
        py::call_guard<py::gil_scoped_release>());
  m.def("topk_binarize", &sparsemap::topk_binarize);
  m.def("budget_k", &budget_k);

  // rationalizer
  py::class_<RationalizerConfig>(m, "RationalizerConfig")
      .def(py::init([](int vocab_size, int n_classes, int d, int max_len, double budget,
                       double transition_penalty) {
             return RationalizerConfig{vocab_size, n_classes, d, max_len, budget,
                                       transition_penalty};
           }),
           py::arg("vocab_size"), py::arg("n_classes") = 2, py::arg("d") = 64,
           py::arg("max_len") = 128, py::arg("budget") = 0.3,
           py::arg("transition_penalty") = 1e-4)
      .def_readwrite("vocab_size", &RationalizerConfig::vocab_size)
      .def_readwrite("n_classes", &RationalizerConfig::n_classes)
      .def_readwrite("d", &RationalizerConfig::d)
      .def_readwrite("max_len", &RationalizerConfig::max_len)
      .def_readwrite("budget", &RationalizerConfig::budget)
      .def_readwrite("transition_penalty", &RationalizerConfig::transition_penalty);

  py::class_<RationaleOutput>(m, "RationaleOutput")
      .def_readonly("mu", &RationaleOutput::mu)
      .def_readonly("z", &RationaleOutput::z)
      .def_readonly("probs", &RationaleOutput::probs)
      .def_readonly("solution", &RationaleOutput::solution);

  m.def("explain_scores", &explain_scores, py::arg("scores"), py::arg("k"),
        py::arg("transition_penalty"));

  py::class_<Rationalizer>(m, "Rationalizer")
      .def(py::init([](const RationalizerConfig& cfg, Rng& rng) {
             return new Rationalizer(cfg, rng);
           }),
           py::arg("config"), py::arg("rng"))
      .def("config", &Rationalizer::config)
      .def("rationalize", &Rationalizer::rationalize, py::arg("tokens"),
           py::arg("budget_override") = py::none(), py::arg("freeze_premise") = false)
      .def("predict", &Rationalizer::predict)
      .def("train_step", &Rationalizer::train_step, py::arg("batch"), py::arg("opt"),
           py::call_guard<py::gil_scoped_release>())
      .def("example_loss_and_grad", &Rationalizer::example_loss_and_grad)
      .def("gradient_masker", &Rationalizer::gradient_masker)
      .def("save", &Rationalizer::save, py::arg("path"), py::arg("vocab_hash"))
      .def_static("load",
                  [](const std::string& path, std::uint64_t vocab_hash) {
                    return Rationalizer::load(path, vocab_hash);
                  })
      .def_static("premise_end", &Rationalizer::premise_end);

  // editor
  py::class_<EditorConfig>(m, "EditorConfig")
      .def(py::init([](int d, int max_len) { return EditorConfig{d, max_len}; }),
           py::arg("d") = 64, py::arg("max_len") = 128)
      .def_readwrite("d", &EditorConfig::d)
      .def_readwrite("max_len", &EditorConfig::max_len);

  py::class_<BeamConfig>(m, "BeamConfig")
      .def(py::init([](int size, bool no_repeat_bigram, int max_steps) {
             return BeamConfig{size, no_repeat_bigram, max_steps};
           }),
           py::arg("size") = 15, py::arg("no_repeat_bigram") = true, py::arg("max_steps") = 0)
      .def_readwrite("size", &BeamConfig::size)
      .def_readwrite("no_repeat_bigram", &BeamConfig::no_repeat_bigram)
      .def_readwrite("max_steps", &BeamConfig::max_steps);

  py::class_<MaskedInput>(m, "MaskedInput")
      .def_readonly("source", &MaskedInput::source)
      .def_readonly("target", &MaskedInput::target);

  py::class_<InfillResult>(m, "InfillResult")
      .def_readonly("tokens", &InfillResult::tokens)
      .def_readonly("flagged", &InfillResult::flagged);

  py::class_<EditExample>(m, "EditExample")
      .def(py::init<>())
      .def_readwrite("tokens", &EditExample::tokens)
      .def_readwrite("z", &EditExample::z)
      .def_readwrite("label_id", &EditExample::label_id);

  m.def("apply_sentinels", &apply_sentinels);
  m.def("substitute_spans", &substitute_spans);

  py::class_<Editor>(m, "Editor")
      .def(py::init([](const EditorConfig& cfg, const Vocab& vocab, Rng& rng) {
             return new Editor(cfg, vocab, rng);
           }),
           py::arg("config"), py::arg("vocab"), py::arg("rng"))
      .def("config", &Editor::config)
      .def("train_batch", &Editor::train_batch, py::arg("batch"), py::arg("opt"),
           py::call_guard<py::gil_scoped_release>())
      .def("train_step", &Editor::train_step, py::arg("example"), py::arg("opt"),
           py::call_guard<py::gil_scoped_release>())
      .def("next_token_logprobs", &Editor::next_token_logprobs)
      .def("generate", &Editor::generate, py::arg("masked"), py::arg("label_id"),
           py::arg("beam") = BeamConfig{}, py::call_guard<py::gil_scoped_release>())
      .def("save", &Editor::save)
      .def_static("load", [](const std::string& path, const Vocab& vocab) {
        return Editor::load(path, vocab);
      });

  // counterfactual generation
  m.def("label_flip", &label_flip, py::arg("y_f"), py::arg("n_classes"),
        py::arg("probs") = std::vector<float>{});

  py::class_<GenerationOptions>(m, "GenerationOptions")
      .def(py::init([](BeamConfig beam, std::optional<double> budget, bool freeze_premise) {
             GenerationOptions opts;
             opts.beam = beam;
             opts.budget = budget;
             opts.freeze_premise = freeze_premise;
             return opts;
           }),
           py::arg("beam") = BeamConfig{}, py::arg("budget") = py::none(),
           py::arg("freeze_premise") = false)
      .def_readwrite("beam", &GenerationOptions::beam)
      .def_readwrite("budget", &GenerationOptions::budget)
      .def_readwrite("freeze_premise", &GenerationOptions::freeze_premise);

  py::class_<GenerationStats>(m, "GenerationStats")
      .def_readonly("attempted", &GenerationStats::attempted)
      .def_readonly("generated", &GenerationStats::generated)
      .def_readonly("skipped", &GenerationStats::skipped)
      .def_readonly("flagged", &GenerationStats::flagged);

  m.def(
      "generate_counterfactual",
      [](const Example& example, const Vocab& vocab, const std::vector<std::string>& classes,
         const Rationalizer& masker, const Editor& editor, const GenerationOptions& opts) {
        std::string why;
        auto pair = generate_counterfactual(example, vocab, classes, masker, editor, opts, &why);
        return py::make_tuple(pair, why);
      },
      py::arg("example"), py::arg("vocab"), py::arg("classes"), py::arg("masker"),
      py::arg("editor"), py::arg("opts"), "returns (pair or None, reason when skipped)");
  m.def(
      "generate_pairs",
      [](const std::vector<Example>& examples, const Vocab& vocab,
         const std::vector<std::string>& classes, const Rationalizer& masker,
         const Editor& editor, const GenerationOptions& opts) {
        GenerationStats stats;
        std::vector<std::string> log;
        auto pairs = generate_pairs(examples, vocab, classes, masker, editor, opts, &stats, &log);
        return py::make_tuple(pairs, stats, log);
      },
      py::arg("examples"), py::arg("vocab"), py::arg("classes"), py::arg("masker"),
      py::arg("editor"), py::arg("opts"), "returns (pairs, stats, skip log)");
  m.def("validity_filter", &validity_filter, py::arg("pairs"), py::arg("predictor"),
        py::arg("vocab"), py::arg("classes"), py::call_guard<py::gil_scoped_release>());
  m.def(
      "build_edit_examples",
      [](const std::vector<Example>& examples, const Vocab& vocab,
         const std::vector<std::string>& classes, const Rationalizer& masker,
         const GenerationOptions& opts) {
        int skipped = 0;
        auto out = build_edit_examples(examples, vocab, classes, masker, opts, &skipped);
        return py::make_tuple(out, skipped);
      },
      py::arg("examples"), py::arg("vocab"), py::arg("classes"), py::arg("masker"),
      py::arg("opts"), "returns (edit examples, skipped count)");

  // agreement training
  py::class_<AgreementConfig>(m, "AgreementConfig")
      .def(py::init([](double alpha, double lambda) { return AgreementConfig{alpha, lambda}; }),
           py::arg("alpha") = 0.01, py::arg("lambda_") = 0.001)
      .def_readwrite("alpha", &AgreementConfig::alpha)
      .def_readwrite("lambda_", &AgreementConfig::lambda);

  py::class_<PairedExample>(m, "PairedExample")
      .def(py::init<>())
      .def_readwrite("tokens", &PairedExample::tokens)
      .def_readwrite("label", &PairedExample::label)
      .def_readwrite("z_star", &PairedExample::z_star)
      .def_readwrite("cf_tokens", &PairedExample::cf_tokens)
      .def_readwrite("cf_label", &PairedExample::cf_label)
      .def_readwrite("cf_z_star", &PairedExample::cf_z_star);

  py::class_<AgreementEpochStats>(m, "AgreementEpochStats")
      .def_readonly("epoch", &AgreementEpochStats::epoch)
      .def_readonly("loss_factual", &AgreementEpochStats::loss_factual)
      .def_readonly("loss_counterfactual", &AgreementEpochStats::loss_counterfactual)
      .def_readonly("omega", &AgreementEpochStats::omega)
      .def_readonly("acc_factual", &AgreementEpochStats::acc_factual)
      .def_readonly("acc_counterfactual", &AgreementEpochStats::acc_counterfactual)
      .def_readonly("skipped", &AgreementEpochStats::skipped);

  m.def("derive_counterfactual_rationale", &derive_counterfactual_rationale);
  m.def("adjusted_budget", &adjusted_budget);
  m.def("agreement_loss", &agreement_loss);
  m.def("total_loss", &total_loss);
  m.def("mask_iou", &mask_iou);
  m.def("to_paired_example", &to_paired_example);
  m.def("train_agreement_epoch", &train_agreement_epoch, py::arg("model"), py::arg("pairs"),
        py::arg("config"), py::arg("opt"), py::arg("batch_size"), py::arg("epoch_index"),
        py::call_guard<py::gil_scoped_release>());
  m.def("write_agreement_csv", &write_agreement_csv);

  // metrics
  py::class_<NgramLM>(m, "NgramLM")
      .def(py::init<int, double, double>(), py::arg("vocab_size"), py::arg("add_k") = 0.1,
           py::arg("bigram_weight") = 0.7)
      .def("fit", &NgramLM::fit)
      .def("log_prob", &NgramLM::log_prob)
      .def("perplexity", &NgramLM::perplexity)
      .def("vocab_size", &NgramLM::vocab_size);

  m.def(
      "fluency_ppl",
      [](const std::vector<std::vector<int>>& texts, const NgramLM& lm) {
        int skipped = 0;
        const double mean = fluency_ppl(texts, lm, &skipped);
        return py::make_tuple(mean, skipped);
      },
      py::arg("texts"), py::arg("lm"), "returns (mean perplexity, skipped count)");
  m.def("bleu", &bleu);
  m.def("self_bleu", &self_bleu);
  m.def("levenshtein", &levenshtein);
  m.def("closeness", &closeness);
  m.def("plausibility_auc", &plausibility_auc);
  m.def("pool_piece_scores", &pool_piece_scores);
  m.def("validity", &validity);
  m.def("mad_agreement", &mad_agreement);

  py::class_<LinearStudent>(m, "LinearStudent")
      .def(py::init<int, int>(), py::arg("vocab_size"), py::arg("n_classes"))
      .def("fit", &LinearStudent::fit, py::arg("selected_tokens"), py::arg("labels"),
           py::arg("epochs") = 300, py::arg("lr") = 0.5,
           py::call_guard<py::gil_scoped_release>())
      .def("predict", &LinearStudent::predict);
  m.def("forward_simulability", &forward_simulability);

  py::class_<CfSimResult>(m, "CfSimResult")
      .def_readonly("rate", &CfSimResult::rate)
      .def_readonly("evaluated", &CfSimResult::evaluated)
      .def_readonly("failed", &CfSimResult::failed);
  m.def("counterfactual_simulability", &counterfactual_simulability);

  py::class_<ReportRow>(m, "ReportRow")
      .def(py::init<>())
      .def_readwrite("name", &ReportRow::name)
      .def_readwrite("validity", &ReportRow::validity)
      .def_readwrite("fluency", &ReportRow::fluency)
      .def_readwrite("diversity", &ReportRow::diversity)
      .def_readwrite("closeness", &ReportRow::closeness)
      .def_readwrite("mean_tokens", &ReportRow::mean_tokens)
      .def_readwrite("count", &ReportRow::count);
  m.def("write_report_csv", &write_report_csv);
  m.def("write_report_markdown", &write_report_markdown);
}
