#pragma once

#include <cstdint>
#include <vector>

#include "ctok/corpus.hpp"
#include "ctok/feedback.hpp"

namespace ctok {

enum class ObjectiveKind { kMlm, kRts, kCrts, kSlm };

const char* objective_name(ObjectiveKind kind);
ObjectiveKind objective_from_name(const std::string& name);

// Objectives with a vocabulary-sized prediction head (MLM/SLM) vs the binary
// replaced/original head (RTS/C-RTS).
bool objective_uses_token_head(ObjectiveKind kind);

constexpr int32_t kIgnoreLabel = -1;

struct CorruptionConfig {
  ObjectiveKind kind = ObjectiveKind::kMlm;
  double selection_rate = 0.15;
  double gamma = 2.0;  // C-RTS only
  bool mlm_bert_split = false;
  HardnessOrientation orientation = HardnessOrientation::kComplement;
};

struct CorruptionEvent {
  int32_t src_cluster = 0;
  int32_t dst_cluster = 0;
  int32_t position = 0;
};

/// One corrupted training example. token_labels carries the original ids at
/// selected positions for MLM/SLM; binary_labels carries 0/1 per real token
/// for RTS/C-RTS; the unused field stays empty.
struct CorruptedExample {
  std::vector<int32_t> input_ids;
  std::vector<int32_t> token_labels;
  std::vector<int32_t> binary_labels;
  std::vector<CorruptionEvent> events;  // C-RTS bookkeeping for feedback updates
};

// Exactly max(1, round(rate * eligible)) distinct positions, uniformly without
// replacement. Positions holding reserved tokens ([CLS]/[SEP]/[PAD] and any
// mid-sequence special) are never eligible.
std::vector<int32_t> select_positions(const TokenSequence& seq, double rate, Rng& rng);

CorruptedExample corrupt_mlm(const TokenSequence& seq, const Vocabulary& vocab,
                             const CorruptionConfig& cfg, Rng& rng);
CorruptedExample corrupt_rts(const TokenSequence& seq, const Vocabulary& vocab,
                             const CorruptionConfig& cfg, Rng& rng);
CorruptedExample corrupt_crts(const TokenSequence& seq, const Clustering& clustering,
                              const FeedbackMatrix& f, const CorruptionConfig& cfg, Rng& rng);
CorruptedExample corrupt_slm(const TokenSequence& seq, const Vocabulary& vocab,
                             const CorruptionConfig& cfg, Rng& rng);

// Dispatch on cfg.kind; clustering/f may be null except for C-RTS.
CorruptedExample corrupt(const TokenSequence& seq, const Vocabulary& vocab,
                         const Clustering* clustering, const FeedbackMatrix* f,
                         const CorruptionConfig& cfg, Rng& rng);

}  // namespace ctok
