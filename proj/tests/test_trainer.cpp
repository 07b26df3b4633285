#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "ctok/synthetic.hpp"
#include "ctok/trainer.hpp"

using namespace ctok;

namespace {

struct PipelineFixture {
  Vocabulary vocab;
  std::vector<TokenSequence> corpus;
  Clustering clustering;

  explicit PipelineFixture(int max_len = 18) {
    SyntheticSpec spec;
    spec.sentences = 240;
    spec.topics = 4;
    spec.tokens_per_topic = 12;
    spec.min_len = 6;
    spec.max_len = 14;
    spec.seed = 77;
    const auto lines = generate_synthetic_corpus(spec);
    vocab = build_vocab(lines, 128, 1);
    for (const auto& line : lines) corpus.push_back(encode(vocab, line, max_len));

    Word2VecConfig w2v;
    w2v.dim = 16;
    w2v.epochs = 2;
    w2v.seed = 3;
    const EmbeddingTable table = train_word2vec(corpus, vocab, w2v);
    KmeansConfig km;
    km.n = 4;
    km.restarts = 4;
    km.seed = 5;
    clustering = kmeans(table, vocab, km).clustering;
  }

  TrainConfig config(ObjectiveKind kind, int64_t steps) const {
    TrainConfig cfg;
    cfg.objective.kind = kind;
    cfg.model.layers = 1;
    cfg.model.hidden = 16;
    cfg.model.heads = 2;
    cfg.model.ffn = 32;
    cfg.model.vocab = vocab.size();
    cfg.model.max_len = 18;
    cfg.steps = steps;
    cfg.batch_size = 8;
    cfg.peak_lr = 2e-3;
    cfg.warmup_steps = 10;
    cfg.eval_every = 50;
    cfg.seed = 9;
    return cfg;
  }
};

}  // namespace

TEST_CASE("triangular_lr warms up linearly and decays to zero") {
  CHECK(triangular_lr(0, 100, 1000, 1e-4) == 0.0);
  CHECK(triangular_lr(50, 100, 1000, 1e-4) == doctest::Approx(5e-5));
  CHECK(triangular_lr(100, 100, 1000, 1e-4) == doctest::Approx(1e-4));
  CHECK(triangular_lr(550, 100, 1000, 1e-4) == doctest::Approx(5e-5));
  CHECK(triangular_lr(1000, 100, 1000, 1e-4) == 0.0);
  CHECK_THROWS_AS(triangular_lr(5, 10, 10, 1e-4), std::invalid_argument);
}

TEST_CASE("precision, recall and f1 come out of the confusion counts") {
  const DetectionMetrics m = prf_from_counts(3, 1, 1);
  CHECK(m.precision == doctest::Approx(0.75));
  CHECK(m.recall == doctest::Approx(0.75));
  CHECK(m.f1 == doctest::Approx(0.75));

  const DetectionMetrics perfect = prf_from_counts(10, 0, 0);
  CHECK(perfect.f1 == doctest::Approx(1.0));

  const DetectionMetrics never = prf_from_counts(0, 0, 10);  // always predicts original
  CHECK(never.recall == 0.0);
  CHECK(never.f1 == 0.0);
}

TEST_CASE("evaluate_detection counts over real positions and needs positives") {
  const PipelineFixture fx;
  ModelConfig mcfg;
  mcfg.layers = 1;
  mcfg.hidden = 16;
  mcfg.heads = 2;
  mcfg.ffn = 32;
  mcfg.vocab = fx.vocab.size();
  mcfg.max_len = 18;
  auto params = init_params<float>(mcfg, HeadKind::kBinary, 2);

  CorruptionConfig cc;
  cc.kind = ObjectiveKind::kRts;
  std::vector<CorruptedExample> examples;
  std::vector<int32_t> attn;
  Rng rng(4);
  int64_t positives = 0, real = 0;
  for (int i = 0; i < 10; ++i) {
    examples.push_back(corrupt_rts(fx.corpus[i], fx.vocab, cc, rng));
    attn.push_back(fx.corpus[i].attention_len);
    for (int32_t l : examples.back().binary_labels) {
      positives += l == 1 ? 1 : 0;
      real += l != kIgnoreLabel ? 1 : 0;
    }
  }

  // saturate the head bias: always predict "replaced"
  params.b_head[1] = 50.0f;
  const DetectionMetrics all_pos = evaluate_detection(params, examples, attn);
  CHECK(all_pos.recall == doctest::Approx(1.0));
  CHECK(all_pos.precision ==
        doctest::Approx(static_cast<double>(positives) / static_cast<double>(real)));

  params.b_head[1] = -50.0f;  // always predict "original"
  const DetectionMetrics all_neg = evaluate_detection(params, examples, attn);
  CHECK(all_neg.recall == 0.0);
  CHECK(all_neg.f1 == 0.0);

  // an eval set with no replaced positions is rejected
  std::vector<CorruptedExample> clean = examples;
  for (auto& ex : clean)
    for (auto& l : ex.binary_labels)
      if (l == 1) l = 0;
  CHECK_THROWS_WITH_AS(evaluate_detection(params, clean, attn), "no positive labels in eval set",
                       std::runtime_error);
}

TEST_CASE("evaluate_token_accuracy scores argmax hits over supervised positions") {
  const PipelineFixture fx;
  ModelConfig mcfg;
  mcfg.layers = 1;
  mcfg.hidden = 16;
  mcfg.heads = 2;
  mcfg.ffn = 32;
  mcfg.vocab = fx.vocab.size();
  mcfg.max_len = 18;
  auto params = init_params<float>(mcfg, HeadKind::kToken, 2);

  CorruptionConfig cc;
  cc.kind = ObjectiveKind::kMlm;
  std::vector<CorruptedExample> examples;
  std::vector<int32_t> attn;
  Rng rng(4);
  for (int i = 0; i < 8; ++i) {
    examples.push_back(corrupt_mlm(fx.corpus[i], fx.vocab, cc, rng));
    attn.push_back(fx.corpus[i].attention_len);
  }

  // force argmax to a fixed class: accuracy equals that label's frequency
  const int32_t forced = 7;
  params.w_head.zero();
  for (auto& b : params.b_head) b = 0.0f;
  params.b_head[forced] = 50.0f;
  int64_t supervised = 0, hits = 0;
  for (const auto& ex : examples)
    for (int32_t l : ex.token_labels)
      if (l != kIgnoreLabel) {
        ++supervised;
        hits += l == forced ? 1 : 0;
      }
  CHECK(evaluate_token_accuracy(params, examples, attn) ==
        doctest::Approx(static_cast<double>(hits) / static_cast<double>(supervised)));

  std::vector<CorruptedExample> unsupervised = examples;
  for (auto& ex : unsupervised)
    for (auto& l : ex.token_labels) l = kIgnoreLabel;
  CHECK_THROWS_WITH_AS(evaluate_token_accuracy(params, unsupervised, attn),
                       "no supervised positions", std::runtime_error);
}

TEST_CASE("pretrain reduces held-out loss and logs a faithful lr trace") {
  const PipelineFixture fx;
  TrainConfig cfg = fx.config(ObjectiveKind::kMlm, 150);
  const PretrainResult result = pretrain(fx.corpus, fx.vocab, nullptr, nullptr, cfg);
  CHECK(result.final_heldout_loss < result.initial_heldout_loss);
  REQUIRE(!result.metrics.empty());
  CHECK(result.metrics.front().step == 0);
  CHECK(result.metrics.back().step == 150);
  int64_t prev = -1;
  for (const auto& rec : result.metrics) {
    CHECK(rec.step > prev);
    prev = rec.step;
    CHECK(rec.lr ==
          doctest::Approx(triangular_lr(rec.step, cfg.warmup_steps, cfg.steps, cfg.peak_lr)));
    CHECK(std::isfinite(rec.loss));
  }
}

TEST_CASE("crts pretraining accumulates feedback consistent with its events") {
  const PipelineFixture fx;
  TrainConfig cfg = fx.config(ObjectiveKind::kCrts, 60);
  cfg.eval_every = 30;
  const PretrainResult result = pretrain(fx.corpus, fx.vocab, &fx.clustering, nullptr, cfg);

  CHECK(result.replacement_events > 0);
  int64_t abs_sum = 0, nonzero = 0;
  for (int64_t c : result.feedback.counts) {
    abs_sum += std::abs(c);
    nonzero += c != 0 ? 1 : 0;
  }
  CHECK(nonzero > 0);
  // each event moves exactly one cell by one
  CHECK(abs_sum <= result.replacement_events);
  CHECK((result.replacement_events - abs_sum) % 2 == 0);

  // detection metrics live in the records
  for (const auto& rec : result.metrics) {
    CHECK(rec.detection_f1 >= 0.0);
    CHECK(rec.detection_f1 <= 1.0);
  }
}

TEST_CASE("pretraining is deterministic and resumable bit for bit") {
  const PipelineFixture fx;
  const auto dir = std::filesystem::temp_directory_path() / "ctok_trainer_test";
  std::filesystem::create_directories(dir);

  TrainConfig cfg = fx.config(ObjectiveKind::kCrts, 60);
  cfg.eval_every = 20;
  cfg.checkpoint_every = 40;
  cfg.seed = 7;

  TrainConfig full = cfg;
  full.checkpoint_path = (dir / "full.ck").string();
  pretrain(fx.corpus, fx.vocab, &fx.clustering, nullptr, full);

  TrainConfig halted = cfg;
  halted.checkpoint_path = (dir / "resumed.ck").string();
  halted.halt_after_step = 40;
  pretrain(fx.corpus, fx.vocab, &fx.clustering, nullptr, halted);
  TrainConfig resumed = cfg;
  resumed.checkpoint_path = halted.checkpoint_path;
  pretrain(fx.corpus, fx.vocab, &fx.clustering, nullptr, resumed, halted.checkpoint_path);

  auto slurp = [](const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    return std::string((std::istreambuf_iterator<char>(in)), {});
  };
  CHECK(slurp(full.checkpoint_path) == slurp(resumed.checkpoint_path));
  CHECK(slurp(full.checkpoint_path + ".feedback") ==
        slurp(resumed.checkpoint_path + ".feedback"));
}

TEST_CASE("metrics stream is newline-delimited json with the expected fields") {
  const PipelineFixture fx;
  const auto path =
      (std::filesystem::temp_directory_path() / "ctok_trainer_metrics.jsonl").string();
  TrainConfig cfg = fx.config(ObjectiveKind::kRts, 40);
  cfg.eval_every = 20;
  cfg.metrics_path = path;
  pretrain(fx.corpus, fx.vocab, nullptr, nullptr, cfg);

  std::ifstream in(path);
  std::string line;
  int records = 0;
  while (std::getline(in, line)) {
    ++records;
    CHECK(line.find("\"step\":") != std::string::npos);
    CHECK(line.find("\"lr\":") != std::string::npos);
    CHECK(line.find("\"loss\":") != std::string::npos);
    CHECK(line.find("\"detection_f1\":") != std::string::npos);
    CHECK(line.find("\"tokens_seen\":") != std::string::npos);
    CHECK(line.find("\"wall_ms\":") != std::string::npos);
    CHECK(line.find("masked_token_accuracy") == std::string::npos);
  }
  CHECK(records >= 3);  // step 0, 20, 40
}

TEST_CASE("pretrain validates its preconditions") {
  const PipelineFixture fx;
  TrainConfig cfg = fx.config(ObjectiveKind::kCrts, 10);
  CHECK_THROWS_AS(pretrain(fx.corpus, fx.vocab, nullptr, nullptr, cfg), std::invalid_argument);

  TrainConfig bad_warmup = fx.config(ObjectiveKind::kMlm, 10);
  bad_warmup.warmup_steps = 20;
  CHECK_THROWS_AS(pretrain(fx.corpus, fx.vocab, nullptr, nullptr, bad_warmup),
                  std::invalid_argument);
}
