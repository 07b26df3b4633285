#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ctok/clustering.hpp"
#include "ctok/corpus.hpp"
#include "ctok/feedback.hpp"
#include "ctok/model.hpp"
#include "ctok/objectives.hpp"

namespace ctok {

struct TrainConfig {
  CorruptionConfig objective;
  ModelConfig model;
  int64_t steps = 2000;
  int batch_size = 32;
  double peak_lr = 1e-4;
  int64_t warmup_steps = 100;
  double weight_decay = 0.01;
  uint64_t seed = 1;
  int64_t eval_every = 100;
  int64_t feedback_update_every = 1;  // C-RTS
  int workers = 1;
  int64_t checkpoint_every = 0;       // 0: only the final checkpoint
  int64_t halt_after_step = 0;        // graceful interrupt after this step (0: run to the end)
  std::string checkpoint_path;        // empty: keep everything in memory
  std::string metrics_path;           // empty: no metrics file
};

struct MetricsRecord {
  int64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double detection_precision = 0.0;   // RTS / C-RTS
  double detection_recall = 0.0;
  double detection_f1 = 0.0;
  double masked_token_accuracy = 0.0; // MLM / SLM
  int64_t tokens_seen = 0;
  double wall_ms = 0.0;

  std::string to_json(ObjectiveKind kind) const;
};

// Linear warmup to `peak` over `warmup` steps, then linear decay to zero at
// `total`.
double triangular_lr(int64_t step, int64_t warmup, int64_t total, double peak);

struct DetectionMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

DetectionMetrics prf_from_counts(int64_t tp, int64_t fp, int64_t fn);

struct PretrainResult {
  EncoderParams<float> params;
  std::vector<MetricsRecord> metrics;
  FeedbackMatrix feedback;            // n == 0 unless C-RTS
  int64_t replacement_events = 0;     // C-RTS feedback events recorded
  double initial_heldout_loss = 0.0;
  double final_heldout_loss = 0.0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  explicit TrainingDiverged(const std::string& what) : std::runtime_error(what) {}
};

// The pre-training loop. Every 50th sequence (by index) is held out for
// evaluation; the rest feed uniformly sampled batches. clustering/f0 are
// required for C-RTS and ignored otherwise. `resume_from` restores parameters,
// optimizer state, step counter and (C-RTS) the feedback sidecar, continuing
// bitwise-identically to an uninterrupted single-worker run.
PretrainResult pretrain(const std::vector<TokenSequence>& corpus, const Vocabulary& vocab,
                        const Clustering* clustering, const FeedbackMatrix* f0,
                        const TrainConfig& cfg, const std::string& resume_from = "");

// Detection quality of a binary-head model over pre-corrupted examples
// ("replaced" is the positive class; [CLS]/[SEP]/[PAD] are excluded by their
// IGNORE labels).
DetectionMetrics evaluate_detection(const EncoderParams<float>& params,
                                    const std::vector<CorruptedExample>& examples,
                                    const std::vector<int32_t>& attn_lens, int workers = 1);

double evaluate_token_accuracy(const EncoderParams<float>& params,
                               const std::vector<CorruptedExample>& examples,
                               const std::vector<int32_t>& attn_lens, int workers = 1);

// Deterministic held-out shard: sequence indices divisible by 50.
std::vector<int32_t> heldout_indices(size_t corpus_size);

// Rng stream used to corrupt the held-out shard; shared by pretrain's
// evaluator and the standalone eval command so their metrics agree.
Rng heldout_eval_rng(uint64_t seed);

}  // namespace ctok
