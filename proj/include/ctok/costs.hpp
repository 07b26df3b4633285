#pragma once

#include <cstdint>
#include <string>

#include "ctok/model.hpp"
#include "ctok/objectives.hpp"

namespace ctok {

// Token Detection appears only here: its discriminator is out of scope, but
// the generator-sized LM head is part of the head-cost comparison.
enum class CostObjective { kMlm, kRts, kCrts, kSlm, kTd };

CostObjective cost_objective_from_name(const std::string& name);
CostObjective to_cost_objective(ObjectiveKind kind);
bool cost_uses_token_head(CostObjective obj);

struct HeadCost {
  int64_t params = 0;
  double flops_per_step = 0.0;  // forward, full sequence length
};

// Head-only comparison: H x |V| (+bias) for vocabulary heads, H x 2 (+bias)
// for binary heads; 2*bs*L*H*classes multiply-accumulate FLOPs per step.
HeadCost head_cost(CostObjective obj, int64_t bs, int64_t seq_len, int64_t hidden,
                   int64_t vocab);

struct CostReport {
  int64_t params_total = 0;
  int64_t params_head = 0;
  double head_fraction = 0.0;
  double flops_per_step_forward = 0.0;
  double flops_per_step_train = 0.0;
  double flops_total = 0.0;
  double head_flops_share = 0.0;

  std::string to_json() const;  // canonical field order
};

// Counting conventions: one multiply-accumulate is 2 FLOPs; embedding lookups
// are gathers (0 FLOPs) while position adds, layer norms, activations, biases,
// softmaxes and dropout count small per-element constants; the vocabulary head
// is evaluated only at the corrupted positions (lm_head_position_fraction of
// the sequence), the binary head everywhere; training costs 3x a forward pass.
struct CostConfig {
  double lm_head_position_fraction = 0.15;
  double train_multiplier = 3.0;
};

CostReport model_cost(const ModelConfig& cfg, CostObjective obj, int64_t bs, int64_t steps,
                      const CostConfig& cc = {});

// One-time C-RTS preprocessing (word embeddings + clustering) is excluded
// from per-step FLOPS and reported as this fixed line item instead.
const char* crts_preprocessing_note();

}  // namespace ctok
