#include "ctok/costs.hpp"

#include <cstdio>
#include <stdexcept>

namespace ctok {

namespace {

constexpr double kLayerNormFlops = 5.0;
constexpr double kSoftmaxFlops = 5.0;
constexpr double kActivationFlops = 8.0;
constexpr double kDropoutFlops = 4.0;

std::string fmt_double(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace

CostObjective cost_objective_from_name(const std::string& name) {
  if (name == "mlm") return CostObjective::kMlm;
  if (name == "rts") return CostObjective::kRts;
  if (name == "crts") return CostObjective::kCrts;
  if (name == "slm") return CostObjective::kSlm;
  if (name == "td") return CostObjective::kTd;
  throw std::invalid_argument("unknown cost objective: " + name);
}

CostObjective to_cost_objective(ObjectiveKind kind) {
  switch (kind) {
    case ObjectiveKind::kMlm: return CostObjective::kMlm;
    case ObjectiveKind::kRts: return CostObjective::kRts;
    case ObjectiveKind::kCrts: return CostObjective::kCrts;
    case ObjectiveKind::kSlm: return CostObjective::kSlm;
  }
  throw std::logic_error("unreachable");
}

bool cost_uses_token_head(CostObjective obj) {
  return obj == CostObjective::kMlm || obj == CostObjective::kSlm || obj == CostObjective::kTd;
}

HeadCost head_cost(CostObjective obj, int64_t bs, int64_t seq_len, int64_t hidden,
                   int64_t vocab) {
  if (bs < 1 || seq_len < 1 || hidden < 1 || vocab < 2)
    throw std::invalid_argument("head_cost dimensions must be positive");
  const int64_t classes = cost_uses_token_head(obj) ? vocab : 2;
  HeadCost hc;
  hc.params = hidden * classes + classes;
  hc.flops_per_step = 2.0 * static_cast<double>(bs) * static_cast<double>(seq_len) *
                      static_cast<double>(hidden) * static_cast<double>(classes);
  return hc;
}

CostReport model_cost(const ModelConfig& cfg, CostObjective obj, int64_t bs, int64_t steps,
                      const CostConfig& cc) {
  cfg.validate();
  if (bs < 1 || steps < 1) throw std::invalid_argument("bs and steps must be positive");
  if (obj == CostObjective::kTd)
    throw std::invalid_argument("TD is modeled by head_cost only");

  const double H = cfg.hidden, L = cfg.max_len, F = cfg.ffn, V = cfg.vocab;
  const double heads = cfg.heads;
  const bool token_head = cost_uses_token_head(obj);
  const double classes = token_head ? V : 2.0;
  const double head_positions = token_head ? cc.lm_head_position_fraction * L : L;

  CostReport r;

  // parameters
  const int64_t h = cfg.hidden, f = cfg.ffn;
  const int64_t per_layer = 4 * (h * h + h)        // attention projections
                            + 4 * h                // two layer norms
                            + h * f + f            // ffn in
                            + f * h + h;           // ffn out
  r.params_head = h * static_cast<int64_t>(classes) + static_cast<int64_t>(classes);
  r.params_total = static_cast<int64_t>(cfg.vocab) * h   // token embeddings
                   + static_cast<int64_t>(cfg.max_len) * h
                   + static_cast<int64_t>(cfg.layers) * per_layer
                   + 2 * h                               // final layer norm
                   + r.params_head;
  r.head_fraction = static_cast<double>(r.params_head) / static_cast<double>(r.params_total);

  // forward FLOPs for one sequence
  const double embed = L * H                    // token + position add
                       + kDropoutFlops * L * H;
  double layer = 0.0;
  layer += kLayerNormFlops * L * H;             // ln1
  layer += 6.0 * L * H * H + 3.0 * L * H;       // qkv projections + biases
  layer += 2.0 * L * L * H;                     // attention scores
  layer += (kSoftmaxFlops + kDropoutFlops + 1.0) * L * L * heads;  // softmax, dropout, scale
  layer += 2.0 * L * L * H;                     // probability-weighted values
  layer += 2.0 * L * H * H + L * H;             // output projection + bias
  layer += (kDropoutFlops + 1.0) * L * H;       // dropout + residual
  layer += kLayerNormFlops * L * H;             // ln2
  layer += 2.0 * L * H * F + L * F;             // ffn in + bias
  layer += kActivationFlops * L * F;
  layer += 2.0 * L * F * H + L * H;             // ffn out + bias
  layer += (kDropoutFlops + 1.0) * L * H;       // dropout + residual
  const double final_ln = kLayerNormFlops * L * H;
  const double head = head_positions * (2.0 * H * classes + classes + kSoftmaxFlops * classes);

  const double seq_forward = embed + cfg.layers * layer + final_ln + head;
  r.flops_per_step_forward = static_cast<double>(bs) * seq_forward;
  r.flops_per_step_train = cc.train_multiplier * r.flops_per_step_forward;
  r.flops_total = r.flops_per_step_train * static_cast<double>(steps);
  r.head_flops_share = head / seq_forward;
  return r;
}

std::string CostReport::to_json() const {
  std::string out = "{";
  out += "\"params_total\":" + std::to_string(params_total);
  out += ",\"params_head\":" + std::to_string(params_head);
  out += ",\"head_fraction\":" + fmt_double(head_fraction);
  out += ",\"flops_per_step_forward\":" + fmt_double(flops_per_step_forward);
  out += ",\"flops_per_step_train\":" + fmt_double(flops_per_step_train);
  out += ",\"flops_total\":" + fmt_double(flops_total);
  out += ",\"head_flops_share\":" + fmt_double(head_flops_share);
  out += "}";
  return out;
}

const char* crts_preprocessing_note() {
  return "note: token clustering preprocessing (word2vec + k-means) runs once before "
         "training and is excluded from per-step FLOPS";
}

}  // namespace ctok
