#include "ctok/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ctok {

namespace {

// Uniform regular token != original. Regular ids are contiguous [5, |V|).
int32_t random_regular_excluding(int32_t vocab_size, int32_t original, Rng& rng) {
  const int64_t regular = vocab_size - kNumSpecials;
  if (regular < 2) throw std::runtime_error("vocabulary too small for replacement sampling");
  int64_t pick = static_cast<int64_t>(rng.below(static_cast<uint64_t>(regular - 1)));
  if (pick >= original - kNumSpecials) ++pick;
  return static_cast<int32_t>(kNumSpecials + pick);
}

std::vector<int32_t> eligible_positions(const TokenSequence& seq) {
  std::vector<int32_t> eligible;
  eligible.reserve(seq.attention_len);
  for (int32_t i = 0; i < seq.attention_len; ++i)
    if (!is_special_id(seq.ids[i])) eligible.push_back(i);
  return eligible;
}

CorruptedExample base_example(const TokenSequence& seq, bool token_head) {
  CorruptedExample ex;
  ex.input_ids = seq.ids;
  if (token_head) {
    ex.token_labels.assign(seq.ids.size(), kIgnoreLabel);
  } else {
    ex.binary_labels.assign(seq.ids.size(), kIgnoreLabel);
    for (int32_t i = 0; i < seq.attention_len; ++i) {
      const int32_t id = seq.ids[i];
      if (id != kClsId && id != kSepId && id != kPadId) ex.binary_labels[i] = 0;
    }
  }
  return ex;
}

}  // namespace

const char* objective_name(ObjectiveKind kind) {
  switch (kind) {
    case ObjectiveKind::kMlm: return "mlm";
    case ObjectiveKind::kRts: return "rts";
    case ObjectiveKind::kCrts: return "crts";
    case ObjectiveKind::kSlm: return "slm";
  }
  return "?";
}

ObjectiveKind objective_from_name(const std::string& name) {
  if (name == "mlm") return ObjectiveKind::kMlm;
  if (name == "rts") return ObjectiveKind::kRts;
  if (name == "crts") return ObjectiveKind::kCrts;
  if (name == "slm") return ObjectiveKind::kSlm;
  throw std::invalid_argument("unknown objective: " + name);
}

bool objective_uses_token_head(ObjectiveKind kind) {
  return kind == ObjectiveKind::kMlm || kind == ObjectiveKind::kSlm;
}

std::vector<int32_t> select_positions(const TokenSequence& seq, double rate, Rng& rng) {
  if (rate <= 0.0 || rate >= 1.0) throw std::invalid_argument("selection rate must be in (0, 1)");
  std::vector<int32_t> eligible = eligible_positions(seq);
  if (eligible.empty()) throw std::runtime_error("nothing to corrupt");
  const auto want = std::max<int64_t>(
      1, std::llround(rate * static_cast<double>(eligible.size())));
  const auto count = std::min<int64_t>(want, static_cast<int64_t>(eligible.size()));
  // partial Fisher-Yates
  for (int64_t i = 0; i < count; ++i) {
    const auto j = i + static_cast<int64_t>(rng.below(eligible.size() - i));
    std::swap(eligible[i], eligible[j]);
  }
  eligible.resize(count);
  std::sort(eligible.begin(), eligible.end());
  return eligible;
}

CorruptedExample corrupt_mlm(const TokenSequence& seq, const Vocabulary& vocab,
                             const CorruptionConfig& cfg, Rng& rng) {
  CorruptedExample ex = base_example(seq, /*token_head=*/true);
  for (const int32_t pos : select_positions(seq, cfg.selection_rate, rng)) {
    const int32_t original = seq.ids[pos];
    ex.token_labels[pos] = original;
    if (!cfg.mlm_bert_split) {
      ex.input_ids[pos] = kMaskId;
      continue;
    }
    const double u = rng.next_double();
    if (u < 0.8) {
      ex.input_ids[pos] = kMaskId;
    } else if (u < 0.9) {
      ex.input_ids[pos] = random_regular_excluding(vocab.size(), original, rng);
    }  // else: keep the original token, still supervised
  }
  return ex;
}

CorruptedExample corrupt_rts(const TokenSequence& seq, const Vocabulary& vocab,
                             const CorruptionConfig& cfg, Rng& rng) {
  CorruptedExample ex = base_example(seq, /*token_head=*/false);
  for (const int32_t pos : select_positions(seq, cfg.selection_rate, rng)) {
    ex.input_ids[pos] = random_regular_excluding(vocab.size(), seq.ids[pos], rng);
    ex.binary_labels[pos] = 1;
  }
  return ex;
}

CorruptedExample corrupt_crts(const TokenSequence& seq, const Clustering& clustering,
                              const FeedbackMatrix& f, const CorruptionConfig& cfg, Rng& rng) {
  CorruptedExample ex = base_example(seq, /*token_head=*/false);
  for (const int32_t pos : select_positions(seq, cfg.selection_rate, rng)) {
    const Replacement rep =
        sample_replacement(f, clustering, seq.ids[pos], cfg.gamma, rng, cfg.orientation);
    ex.input_ids[pos] = rep.token;
    ex.binary_labels[pos] = 1;
    ex.events.push_back({rep.src_cluster, rep.dst_cluster, pos});
  }
  return ex;
}

CorruptedExample corrupt_slm(const TokenSequence& seq, const Vocabulary& vocab,
                             const CorruptionConfig& cfg, Rng& rng) {
  // same corruption as RTS, labeled like MLM
  CorruptedExample ex = base_example(seq, /*token_head=*/true);
  for (const int32_t pos : select_positions(seq, cfg.selection_rate, rng)) {
    const int32_t original = seq.ids[pos];
    ex.token_labels[pos] = original;
    ex.input_ids[pos] = random_regular_excluding(vocab.size(), original, rng);
  }
  return ex;
}

CorruptedExample corrupt(const TokenSequence& seq, const Vocabulary& vocab,
                         const Clustering* clustering, const FeedbackMatrix* f,
                         const CorruptionConfig& cfg, Rng& rng) {
  switch (cfg.kind) {
    case ObjectiveKind::kMlm: return corrupt_mlm(seq, vocab, cfg, rng);
    case ObjectiveKind::kRts: return corrupt_rts(seq, vocab, cfg, rng);
    case ObjectiveKind::kSlm: return corrupt_slm(seq, vocab, cfg, rng);
    case ObjectiveKind::kCrts:
      if (!clustering || !f) throw std::invalid_argument("crts requires clustering and feedback");
      return corrupt_crts(seq, *clustering, *f, cfg, rng);
  }
  throw std::logic_error("unreachable");
}

}  // namespace ctok
