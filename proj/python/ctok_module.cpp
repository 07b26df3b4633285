#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "ctok/clustering.hpp"
#include "ctok/corpus.hpp"
#include "ctok/costs.hpp"
#include "ctok/embedding.hpp"
#include "ctok/feedback.hpp"
#include "ctok/objectives.hpp"
#include "ctok/synthetic.hpp"
#include "ctok/trainer.hpp"

namespace py = pybind11;
using namespace ctok;

namespace {

CorruptionConfig corruption_config(const std::string& kind, double selection_rate, double gamma,
                                   bool mlm_bert_split) {
  CorruptionConfig cfg;
  cfg.kind = objective_from_name(kind);
  cfg.selection_rate = selection_rate;
  cfg.gamma = gamma;
  cfg.mlm_bert_split = mlm_bert_split;
  return cfg;
}

py::dict report_to_dict(const CostReport& r) {
  py::dict d;
  d["params_total"] = r.params_total;
  d["params_head"] = r.params_head;
  d["head_fraction"] = r.head_fraction;
  d["flops_per_step_forward"] = r.flops_per_step_forward;
  d["flops_per_step_train"] = r.flops_per_step_train;
  d["flops_total"] = r.flops_total;
  d["head_flops_share"] = r.head_flops_share;
  return d;
}

}  // namespace

PYBIND11_MODULE(_ctok, m) {
  m.doc() = "token-corruption pre-training toolkit";

  py::class_<Vocabulary>(m, "Vocabulary")
      .def_property_readonly("tokens", [](const Vocabulary& v) { return v.tokens; })
      .def_property_readonly("size", &Vocabulary::size)
      .def("lookup", [](const Vocabulary& v, const std::string& tok) { return v.lookup(tok); })
      .def("save", &Vocabulary::save)
      .def_static("load", &Vocabulary::load);

  py::class_<TokenSequence>(m, "TokenSequence")
      .def_property_readonly("ids", [](const TokenSequence& s) { return s.ids; })
      .def_property_readonly("attention_len", [](const TokenSequence& s) { return s.attention_len; });

  py::class_<EmbeddingTable>(m, "EmbeddingTable")
      .def_property_readonly("dim", [](const EmbeddingTable& t) { return t.dim; })
      .def_property_readonly("rows", [](const EmbeddingTable& t) { return t.vectors.rows; })
      .def("vector",
           [](const EmbeddingTable& t, int32_t id) {
             if (id < 0 || id >= t.vectors.rows) throw py::index_error();
             return std::vector<float>(t.vectors.row(id), t.vectors.row(id) + t.dim);
           })
      .def("save", &EmbeddingTable::save)
      .def_static("load", &EmbeddingTable::load);

  py::class_<Clustering>(m, "Clustering")
      .def_property_readonly("n", [](const Clustering& c) { return c.n; })
      .def_property_readonly("assignment", [](const Clustering& c) { return c.assignment; })
      .def_property_readonly("members", [](const Clustering& c) { return c.members; })
      .def("save", &Clustering::save)
      .def_static("load", &Clustering::load);

  py::class_<FeedbackMatrix>(m, "FeedbackMatrix")
      .def(py::init<int32_t>())
      .def_property_readonly("n", [](const FeedbackMatrix& f) { return f.n; })
      .def("at", [](const FeedbackMatrix& f, int32_t a, int32_t b) { return f.at(a, b); })
      .def("update",
           [](FeedbackMatrix& f, const std::vector<std::tuple<int32_t, int32_t, bool>>& events) {
             std::vector<FeedbackEvent> evs;
             evs.reserve(events.size());
             for (const auto& [a, b, detected] : events) evs.push_back({a, b, detected});
             update(f, evs);
           })
      .def("save", &FeedbackMatrix::save)
      .def_static("load", &FeedbackMatrix::load);

  py::class_<CorruptedExample>(m, "CorruptedExample")
      .def_property_readonly("input_ids", [](const CorruptedExample& e) { return e.input_ids; })
      .def_property_readonly("token_labels",
                             [](const CorruptedExample& e) { return e.token_labels; })
      .def_property_readonly("binary_labels",
                             [](const CorruptedExample& e) { return e.binary_labels; })
      .def_property_readonly("events", [](const CorruptedExample& e) {
        std::vector<std::tuple<int32_t, int32_t, int32_t>> out;
        for (const auto& ev : e.events)
          out.emplace_back(ev.src_cluster, ev.dst_cluster, ev.position);
        return out;
      });

  m.attr("PAD") = kPadId;
  m.attr("UNK") = kUnkId;
  m.attr("CLS") = kClsId;
  m.attr("SEP") = kSepId;
  m.attr("MASK") = kMaskId;
  m.attr("IGNORE") = kIgnoreLabel;

  m.def("build_vocab", &build_vocab, py::arg("texts"), py::arg("max_size"),
        py::arg("min_freq") = 1);
  m.def("encode", &encode, py::arg("vocab"), py::arg("text"), py::arg("max_len"));
  m.def("decode", &decode, py::arg("vocab"), py::arg("sequence"));

  m.def(
      "train_word2vec",
      [](const std::vector<TokenSequence>& corpus, const Vocabulary& vocab, int dim, int window,
         int epochs, double lr, int negatives, uint64_t seed) {
        Word2VecConfig cfg;
        cfg.dim = dim;
        cfg.window = window;
        cfg.epochs = epochs;
        cfg.lr = lr;
        cfg.negatives = negatives;
        cfg.seed = seed;
        return train_word2vec(corpus, vocab, cfg);
      },
      py::arg("corpus"), py::arg("vocab"), py::arg("dim") = 300, py::arg("window") = 2,
      py::arg("epochs") = 5, py::arg("lr") = 0.025, py::arg("negatives") = 5,
      py::arg("seed") = 1);
  m.def("cosine", &cosine, py::arg("table"), py::arg("i"), py::arg("j"));

  m.def(
      "kmeans",
      [](const EmbeddingTable& table, const Vocabulary& vocab, int n, int restarts,
         uint64_t seed) {
        KmeansConfig cfg;
        cfg.n = n;
        cfg.restarts = restarts;
        cfg.seed = seed;
        auto res = kmeans(table, vocab, cfg);
        return py::make_tuple(res.clustering, res.inertia, res.restart_inertias);
      },
      py::arg("table"), py::arg("vocab"), py::arg("n") = 100, py::arg("restarts") = 20,
      py::arg("seed") = 1);

  m.def(
      "transition_probs",
      [](const FeedbackMatrix& f, int32_t a, double gamma, const std::string& orientation) {
        return transition_probs(f, a, gamma,
                                orientation == "direct" ? HardnessOrientation::kDirect
                                                        : HardnessOrientation::kComplement);
      },
      py::arg("feedback"), py::arg("cluster"), py::arg("gamma") = 2.0,
      py::arg("orientation") = "complement");

  m.def(
      "sample_replacement",
      [](const FeedbackMatrix& f, const Clustering& cl, int32_t token, double gamma,
         uint64_t seed) {
        Rng rng(seed);
        const Replacement r = sample_replacement(f, cl, token, gamma, rng);
        return py::make_tuple(r.token, r.src_cluster, r.dst_cluster);
      },
      py::arg("feedback"), py::arg("clustering"), py::arg("token"), py::arg("gamma") = 2.0,
      py::arg("seed") = 1);

  m.def(
      "corrupt",
      [](const TokenSequence& seq, const Vocabulary& vocab, const std::string& kind,
         uint64_t seed, double selection_rate, double gamma, bool mlm_bert_split,
         const Clustering* clustering, const FeedbackMatrix* feedback) {
        const CorruptionConfig cfg =
            corruption_config(kind, selection_rate, gamma, mlm_bert_split);
        Rng rng(seed);
        return corrupt(seq, vocab, clustering, feedback, cfg, rng);
      },
      py::arg("sequence"), py::arg("vocab"), py::arg("kind"), py::arg("seed") = 1,
      py::arg("selection_rate") = 0.15, py::arg("gamma") = 2.0,
      py::arg("mlm_bert_split") = false, py::arg("clustering") = nullptr,
      py::arg("feedback") = nullptr);

  m.def("triangular_lr", &triangular_lr, py::arg("step"), py::arg("warmup"), py::arg("total"),
        py::arg("peak"));

  m.def(
      "head_cost",
      [](const std::string& objective, int64_t bs, int64_t seq_len, int64_t hidden,
         int64_t vocab) {
        const HeadCost hc = head_cost(cost_objective_from_name(objective), bs, seq_len, hidden,
                                      vocab);
        py::dict d;
        d["params"] = hc.params;
        d["flops_per_step"] = hc.flops_per_step;
        return d;
      },
      py::arg("objective"), py::arg("batch_size"), py::arg("seq_len"), py::arg("hidden"),
      py::arg("vocab"));

  m.def(
      "model_cost",
      [](const std::string& objective, int layers, int hidden, int heads, int ffn, int vocab,
         int max_len, int64_t bs, int64_t steps) {
        ModelConfig cfg;
        cfg.layers = layers;
        cfg.hidden = hidden;
        cfg.heads = heads;
        cfg.ffn = ffn;
        cfg.vocab = vocab;
        cfg.max_len = max_len;
        return report_to_dict(model_cost(cfg, cost_objective_from_name(objective), bs, steps));
      },
      py::arg("objective"), py::arg("layers"), py::arg("hidden"), py::arg("heads"),
      py::arg("ffn"), py::arg("vocab"), py::arg("max_len"), py::arg("batch_size"),
      py::arg("steps"));

  m.def(
      "generate_synthetic_corpus",
      [](int sentences, int topics, int tokens_per_topic, int min_len, int max_len,
         double topic_purity, uint64_t seed) {
        SyntheticSpec spec;
        spec.sentences = sentences;
        spec.topics = topics;
        spec.tokens_per_topic = tokens_per_topic;
        spec.min_len = min_len;
        spec.max_len = max_len;
        spec.topic_purity = topic_purity;
        spec.seed = seed;
        return generate_synthetic_corpus(spec);
      },
      py::arg("sentences") = 2000, py::arg("topics") = 12, py::arg("tokens_per_topic") = 50,
      py::arg("min_len") = 16, py::arg("max_len") = 32, py::arg("topic_purity") = 0.9,
      py::arg("seed") = 1);

  m.def(
      "pretrain",
      [](const std::vector<TokenSequence>& corpus, const Vocabulary& vocab,
         const std::string& objective, int64_t steps, int batch_size, double peak_lr,
         int64_t warmup_steps, int layers, int hidden, int heads, int ffn, int max_len,
         uint64_t seed, const Clustering* clustering) {
        TrainConfig cfg;
        cfg.objective.kind = objective_from_name(objective);
        cfg.model.layers = layers;
        cfg.model.hidden = hidden;
        cfg.model.heads = heads;
        cfg.model.ffn = ffn;
        cfg.model.vocab = vocab.size();
        cfg.model.max_len = max_len;
        cfg.steps = steps;
        cfg.batch_size = batch_size;
        cfg.peak_lr = peak_lr;
        cfg.warmup_steps = warmup_steps;
        cfg.eval_every = steps;
        cfg.seed = seed;
        const PretrainResult res = pretrain(corpus, vocab, clustering, nullptr, cfg);
        py::dict d;
        d["initial_heldout_loss"] = res.initial_heldout_loss;
        d["final_heldout_loss"] = res.final_heldout_loss;
        const MetricsRecord& last = res.metrics.back();
        d["detection_f1"] = last.detection_f1;
        d["masked_token_accuracy"] = last.masked_token_accuracy;
        d["tokens_seen"] = last.tokens_seen;
        return d;
      },
      py::arg("corpus"), py::arg("vocab"), py::arg("objective"), py::arg("steps") = 200,
      py::arg("batch_size") = 8, py::arg("peak_lr") = 1e-3, py::arg("warmup_steps") = 20,
      py::arg("layers") = 1, py::arg("hidden") = 16, py::arg("heads") = 2, py::arg("ffn") = 32,
      py::arg("max_len") = 24, py::arg("seed") = 1, py::arg("clustering") = nullptr);
}
