#include "ctok/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace ctok {

namespace {

constexpr uint64_t kEvalStream = 0x65764c;
constexpr uint64_t kBatchStream = 1;
constexpr uint64_t kCorruptStream = 2;
constexpr uint64_t kDropoutStream = 3;

struct PackedBatch {
  std::vector<int32_t> ids;
  std::vector<int32_t> attn;
  std::vector<int32_t> labels;
  std::vector<CorruptionEvent> events;  // positions are batch-flattened
  int batch = 0;
};

PackedBatch pack(const std::vector<const TokenSequence*>& seqs,
                 const std::vector<CorruptedExample>& examples, bool token_head, int max_len) {
  PackedBatch out;
  out.batch = static_cast<int>(seqs.size());
  out.ids.reserve(static_cast<size_t>(out.batch) * max_len);
  out.labels.reserve(static_cast<size_t>(out.batch) * max_len);
  for (int b = 0; b < out.batch; ++b) {
    const auto& ex = examples[b];
    out.ids.insert(out.ids.end(), ex.input_ids.begin(), ex.input_ids.end());
    const auto& labels = token_head ? ex.token_labels : ex.binary_labels;
    out.labels.insert(out.labels.end(), labels.begin(), labels.end());
    out.attn.push_back(seqs[b]->attention_len);
    for (const auto& ev : ex.events)
      out.events.push_back({ev.src_cluster, ev.dst_cluster,
                            static_cast<int32_t>(b * max_len + ev.position)});
  }
  return out;
}

double heldout_loss_and_metrics(const EncoderParams<float>& params,
                                const std::vector<const TokenSequence*>& heldout,
                                const Vocabulary& vocab, const Clustering* clustering,
                                const FeedbackMatrix* f, const TrainConfig& cfg,
                                MetricsRecord* record) {
  const bool token_head = objective_uses_token_head(cfg.objective.kind);
  const int max_len = cfg.model.max_len;
  Rng eval_rng = heldout_eval_rng(cfg.seed);

  double loss_sum = 0.0;
  int64_t supervised = 0;
  int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  int64_t correct = 0;

  size_t cursor = 0;
  size_t seq_index = 0;
  while (cursor < heldout.size()) {
    const size_t take = std::min<size_t>(cfg.batch_size, heldout.size() - cursor);
    std::vector<const TokenSequence*> seqs(heldout.begin() + cursor,
                                           heldout.begin() + cursor + take);
    std::vector<CorruptedExample> corrupted;
    corrupted.reserve(take);
    for (const auto* seq : seqs) {
      Rng rng = eval_rng.derive(seq_index++);
      corrupted.push_back(corrupt(*seq, vocab, clustering, f, cfg.objective, rng));
    }
    PackedBatch batch = pack(seqs, corrupted, token_head, max_len);
    Mat<float> logits = forward(params, std::span<const int32_t>(batch.ids),
                                std::span<const int32_t>(batch.attn), batch.batch,
                                /*train_mode=*/false, /*dropout_seed=*/0, cfg.workers);
    LossResult<float> loss =
        token_head ? loss_token(logits, std::span<const int32_t>(batch.labels))
                   : loss_binary(logits, std::span<const int32_t>(batch.labels));
    loss_sum += loss.loss * static_cast<double>(loss.supervised);
    supervised += loss.supervised;
    const int classes = logits.cols;
    for (size_t r = 0; r < batch.labels.size(); ++r) {
      const int32_t label = batch.labels[r];
      if (label == kIgnoreLabel) continue;
      const float* row = logits.row(static_cast<int>(r));
      int argmax = 0;
      for (int c = 1; c < classes; ++c)
        if (row[c] > row[argmax]) argmax = c;
      if (token_head) {
        correct += argmax == label ? 1 : 0;
      } else {
        tp += (label == 1 && argmax == 1) ? 1 : 0;
        fp += (label == 0 && argmax == 1) ? 1 : 0;
        fn += (label == 1 && argmax == 0) ? 1 : 0;
        tn += (label == 0 && argmax == 0) ? 1 : 0;
      }
    }
    cursor += take;
  }

  const double mean_loss = supervised > 0 ? loss_sum / static_cast<double>(supervised) : 0.0;
  if (record) {
    record->loss = mean_loss;
    if (token_head) {
      record->masked_token_accuracy =
          supervised > 0 ? static_cast<double>(correct) / static_cast<double>(supervised) : 0.0;
    } else {
      const DetectionMetrics m = prf_from_counts(tp, fp, fn);
      record->detection_precision = m.precision;
      record->detection_recall = m.recall;
      record->detection_f1 = m.f1;
    }
  }
  return mean_loss;
}

std::string json_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

}  // namespace

std::string MetricsRecord::to_json(ObjectiveKind kind) const {
  std::string out = "{";
  out += "\"step\":" + std::to_string(step);
  out += ",\"lr\":" + json_number(lr);
  out += ",\"loss\":" + json_number(loss);
  if (objective_uses_token_head(kind)) {
    out += ",\"masked_token_accuracy\":" + json_number(masked_token_accuracy);
  } else {
    out += ",\"detection_precision\":" + json_number(detection_precision);
    out += ",\"detection_recall\":" + json_number(detection_recall);
    out += ",\"detection_f1\":" + json_number(detection_f1);
  }
  out += ",\"tokens_seen\":" + std::to_string(tokens_seen);
  out += ",\"wall_ms\":" + json_number(wall_ms);
  out += "}";
  return out;
}

double triangular_lr(int64_t step, int64_t warmup, int64_t total, double peak) {
  if (warmup >= total) throw std::invalid_argument("warmup must be below total steps");
  if (step < 0 || step > total) throw std::invalid_argument("step outside schedule");
  if (step < warmup) return peak * (static_cast<double>(step) / static_cast<double>(warmup));
  return peak * (static_cast<double>(total - step) / static_cast<double>(total - warmup));
}

DetectionMetrics prf_from_counts(int64_t tp, int64_t fp, int64_t fn) {
  DetectionMetrics m;
  m.precision = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  m.recall = tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  m.f1 = m.precision + m.recall > 0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
                                    : 0.0;
  return m;
}

std::vector<int32_t> heldout_indices(size_t corpus_size) {
  std::vector<int32_t> out;
  for (size_t i = 0; i < corpus_size; i += 50) out.push_back(static_cast<int32_t>(i));
  return out;
}

Rng heldout_eval_rng(uint64_t seed) { return Rng(seed).derive(kEvalStream); }

PretrainResult pretrain(const std::vector<TokenSequence>& corpus, const Vocabulary& vocab,
                        const Clustering* clustering, const FeedbackMatrix* f0,
                        const TrainConfig& cfg, const std::string& resume_from) {
  const bool is_crts = cfg.objective.kind == ObjectiveKind::kCrts;
  if (is_crts && (!clustering || clustering->n < 1))
    throw std::invalid_argument("crts pre-training requires a clustering");
  if (corpus.empty()) throw std::invalid_argument("corpus is empty");
  if (cfg.batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (cfg.warmup_steps > cfg.steps) throw std::invalid_argument("warmup exceeds total steps");
  if (cfg.feedback_update_every < 1)
    throw std::invalid_argument("feedback_update_every must be >= 1");
  // checkpoints must land on feedback boundaries or resumed runs would lose
  // buffered events
  if (is_crts && cfg.feedback_update_every > 1) {
    if (cfg.checkpoint_every > 0 && cfg.checkpoint_every % cfg.feedback_update_every != 0)
      throw std::invalid_argument("checkpoint_every must be a multiple of feedback_update_every");
    if (cfg.halt_after_step > 0 && cfg.halt_after_step % cfg.feedback_update_every != 0)
      throw std::invalid_argument("halt_after_step must be a multiple of feedback_update_every");
  }
  cfg.model.validate();

  const bool token_head = objective_uses_token_head(cfg.objective.kind);
  const int max_len = cfg.model.max_len;
  for (const auto& seq : corpus)
    if (static_cast<int>(seq.ids.size()) != max_len)
      throw std::invalid_argument("sequence length does not match model max_len");

  // 2% held-out split by sequence index
  std::vector<const TokenSequence*> heldout;
  std::vector<const TokenSequence*> train;
  {
    const auto held = heldout_indices(corpus.size());
    size_t h = 0;
    for (size_t i = 0; i < corpus.size(); ++i) {
      if (h < held.size() && static_cast<size_t>(held[h]) == i) {
        heldout.push_back(&corpus[i]);
        ++h;
      } else {
        train.push_back(&corpus[i]);
      }
    }
  }
  if (train.empty()) throw std::invalid_argument("corpus too small to train on");

  PretrainResult result;
  result.feedback = is_crts ? (f0 ? *f0 : FeedbackMatrix(clustering->n)) : FeedbackMatrix();
  if (is_crts && result.feedback.n != clustering->n)
    throw std::invalid_argument("feedback matrix does not match clustering");

  AdamState<float> adam;
  int64_t start_step = 0;
  int64_t tokens_seen = 0;
  if (!resume_from.empty()) {
    Checkpoint ck = load_checkpoint(resume_from);
    if (ck.params.cfg.vocab != cfg.model.vocab || ck.params.cfg.hidden != cfg.model.hidden ||
        ck.params.cfg.layers != cfg.model.layers || ck.params.cfg.max_len != cfg.model.max_len)
      throw std::invalid_argument("checkpoint does not match the configured model");
    result.params = std::move(ck.params);
    if (!ck.has_adam) throw std::invalid_argument("checkpoint has no optimizer state; cannot resume");
    adam = std::move(ck.adam);
    start_step = std::stoll(ck.extra.at("step"));
    tokens_seen = std::stoll(ck.extra.at("tokens_seen"));
    if (is_crts) result.feedback = FeedbackMatrix::load(resume_from + ".feedback");
  } else {
    result.params = init_params<float>(cfg.model, token_head ? HeadKind::kToken : HeadKind::kBinary,
                                       Rng(cfg.seed).derive(7).next_u64());
    adam.m = zeros_like(result.params);
    adam.v = zeros_like(result.params);
  }

  AdamConfig adam_cfg;
  adam_cfg.weight_decay = cfg.weight_decay;

  std::ofstream metrics_out;
  if (!cfg.metrics_path.empty()) {
    metrics_out.open(cfg.metrics_path, start_step > 0 ? std::ios::app : std::ios::trunc);
    if (!metrics_out) throw std::runtime_error("cannot write metrics: " + cfg.metrics_path);
  }
  const auto t0 = std::chrono::steady_clock::now();
  auto wall_ms = [&]() {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
        .count();
  };

  auto emit_eval = [&](int64_t step, double lr) {
    MetricsRecord rec;
    rec.step = step;
    rec.lr = lr;
    rec.tokens_seen = tokens_seen;
    const double loss =
        heldout_loss_and_metrics(result.params, heldout, vocab, clustering,
                                 is_crts ? &result.feedback : nullptr, cfg, &rec);
    rec.wall_ms = wall_ms();
    result.metrics.push_back(rec);
    if (metrics_out) metrics_out << rec.to_json(cfg.objective.kind) << '\n' << std::flush;
    return loss;
  };

  if (start_step == 0) result.initial_heldout_loss = emit_eval(0, 0.0);

  std::vector<FeedbackEvent> pending_events;
  std::vector<const TokenSequence*> batch_seqs(cfg.batch_size);
  std::vector<CorruptedExample> batch_examples(cfg.batch_size);

  auto save_state = [&](int64_t step) {
    if (cfg.checkpoint_path.empty()) return;
    std::map<std::string, std::string> extra;
    extra["step"] = std::to_string(step);
    extra["tokens_seen"] = std::to_string(tokens_seen);
    extra["objective"] = objective_name(cfg.objective.kind);
    save_checkpoint(cfg.checkpoint_path, result.params, extra, &adam);
    if (is_crts) result.feedback.save(cfg.checkpoint_path + ".feedback");
  };

  for (int64_t step = start_step + 1; step <= cfg.steps; ++step) {
    Rng step_rng = Rng(cfg.seed).derive(static_cast<uint64_t>(step));
    Rng batch_rng = step_rng.derive(kBatchStream);
    Rng corrupt_rng = step_rng.derive(kCorruptStream);

    for (int b = 0; b < cfg.batch_size; ++b) {
      batch_seqs[b] = train[batch_rng.below(train.size())];
      Rng rng = corrupt_rng.derive(b);
      batch_examples[b] = corrupt(*batch_seqs[b], vocab, clustering,
                                  is_crts ? &result.feedback : nullptr, cfg.objective, rng);
      tokens_seen += batch_seqs[b]->attention_len;
    }
    PackedBatch batch = pack(batch_seqs, batch_examples, token_head, max_len);

    EncoderParams<float> grads = zeros_like(result.params);
    Mat<float> logits;
    const StepResult<float> sr = forward_backward(
        result.params, std::span<const int32_t>(batch.ids), std::span<const int32_t>(batch.attn),
        std::span<const int32_t>(batch.labels), batch.batch, /*train_mode=*/true,
        step_rng.derive(kDropoutStream).next_u64(), grads, cfg.workers,
        is_crts ? &logits : nullptr);
    if (!std::isfinite(sr.loss)) {
      // keep the state of the last finite step on disk before aborting
      if (!cfg.checkpoint_path.empty()) save_state(step - 1);
      throw TrainingDiverged("non-finite loss at step " + std::to_string(step));
    }

    const double lr = triangular_lr(step, cfg.warmup_steps, cfg.steps, cfg.peak_lr);
    adam_step(result.params, grads, adam, step, lr, adam_cfg);

    if (is_crts) {
      for (const auto& ev : batch.events) {
        const float* row = logits.row(ev.position);
        pending_events.push_back({ev.src_cluster, ev.dst_cluster, row[1] > row[0]});
      }
      result.replacement_events += static_cast<int64_t>(batch.events.size());
      if (step % cfg.feedback_update_every == 0 || step == cfg.steps) {
        update(result.feedback, pending_events);
        pending_events.clear();
      }
    }

    if (cfg.eval_every > 0 && step % cfg.eval_every == 0 && step != cfg.steps)
      emit_eval(step, lr);
    if (step == cfg.steps) result.final_heldout_loss = emit_eval(step, lr);

    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.steps)
      save_state(step);
    if (cfg.halt_after_step > 0 && step == cfg.halt_after_step && step != cfg.steps) {
      if (cfg.checkpoint_every <= 0 || step % cfg.checkpoint_every != 0) save_state(step);
      return result;
    }
  }
  save_state(cfg.steps);
  return result;
}

DetectionMetrics evaluate_detection(const EncoderParams<float>& params,
                                    const std::vector<CorruptedExample>& examples,
                                    const std::vector<int32_t>& attn_lens, int workers) {
  if (params.head != HeadKind::kBinary)
    throw std::invalid_argument("detection metrics require a binary-head model");
  const int max_len = params.cfg.max_len;
  int64_t tp = 0, fp = 0, fn = 0;
  int64_t positives = 0;
  std::vector<int32_t> ids;
  std::vector<int32_t> attn(attn_lens.begin(), attn_lens.end());
  for (const auto& ex : examples) ids.insert(ids.end(), ex.input_ids.begin(), ex.input_ids.end());
  Mat<float> logits = forward(params, std::span<const int32_t>(ids),
                              std::span<const int32_t>(attn),
                              static_cast<int>(examples.size()), false, 0, workers);
  for (size_t e = 0; e < examples.size(); ++e) {
    const auto& labels = examples[e].binary_labels;
    for (int t = 0; t < max_len; ++t) {
      const int32_t label = labels[t];
      if (label == kIgnoreLabel) continue;
      const float* row = logits.row(static_cast<int>(e) * max_len + t);
      const int pred = row[1] > row[0] ? 1 : 0;
      positives += label;
      tp += (label == 1 && pred == 1) ? 1 : 0;
      fp += (label == 0 && pred == 1) ? 1 : 0;
      fn += (label == 1 && pred == 0) ? 1 : 0;
    }
  }
  if (positives == 0) throw std::runtime_error("no positive labels in eval set");
  return prf_from_counts(tp, fp, fn);
}

double evaluate_token_accuracy(const EncoderParams<float>& params,
                               const std::vector<CorruptedExample>& examples,
                               const std::vector<int32_t>& attn_lens, int workers) {
  if (params.head != HeadKind::kToken)
    throw std::invalid_argument("token accuracy requires a token-head model");
  const int max_len = params.cfg.max_len;
  std::vector<int32_t> ids;
  std::vector<int32_t> attn(attn_lens.begin(), attn_lens.end());
  for (const auto& ex : examples) ids.insert(ids.end(), ex.input_ids.begin(), ex.input_ids.end());
  Mat<float> logits = forward(params, std::span<const int32_t>(ids),
                              std::span<const int32_t>(attn),
                              static_cast<int>(examples.size()), false, 0, workers);
  int64_t supervised = 0, correct = 0;
  for (size_t e = 0; e < examples.size(); ++e) {
    const auto& labels = examples[e].token_labels;
    for (int t = 0; t < max_len; ++t) {
      const int32_t label = labels[t];
      if (label == kIgnoreLabel) continue;
      const float* row = logits.row(static_cast<int>(e) * max_len + t);
      int argmax = 0;
      for (int c = 1; c < logits.cols; ++c)
        if (row[c] > row[argmax]) argmax = c;
      ++supervised;
      correct += argmax == label ? 1 : 0;
    }
  }
  if (supervised == 0) throw std::runtime_error("no supervised positions");
  return static_cast<double>(correct) / static_cast<double>(supervised);
}

}  // namespace ctok
