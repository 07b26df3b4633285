#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ctok/mat.hpp"
#include "ctok/rng.hpp"

namespace ctok {

struct ModelConfig {
  int layers = 2;
  int hidden = 64;
  int heads = 4;
  int ffn = 256;
  int vocab = 2000;
  int max_len = 64;
  double dropout = 0.1;

  void validate() const;
  int head_dim() const { return hidden / heads; }
};

enum class HeadKind { kToken, kBinary };

template <typename T>
struct LayerParams {
  Mat<T> wq, wk, wv, wo;               // H x H
  std::vector<T> bq, bk, bv, bo;       // H
  std::vector<T> ln1_g, ln1_b, ln2_g, ln2_b;
  Mat<T> w1;                           // H x F
  std::vector<T> b1;                   // F
  Mat<T> w2;                           // F x H
  std::vector<T> b2;                   // H
};

/// Pre-norm encoder parameters plus one classification head: H x |V| for
/// token prediction or H x 2 for replaced/original detection.
template <typename T>
struct EncoderParams {
  ModelConfig cfg;
  HeadKind head = HeadKind::kToken;
  Mat<T> tok_emb;                      // V x H
  Mat<T> pos_emb;                      // L x H
  std::vector<LayerParams<T>> layers;
  std::vector<T> lnf_g, lnf_b;
  Mat<T> w_head;                       // H x classes
  std::vector<T> b_head;

  int num_classes() const { return head == HeadKind::kToken ? cfg.vocab : 2; }
  int64_t num_params() const;
};

// Applies fn(name, data, length, decayed) to every parameter tensor in a fixed
// order. `decayed` marks weight matrices (weight decay applies); biases and
// layer-norm parameters are not decayed.
template <typename T, typename Fn>
void visit_params(EncoderParams<T>& p, Fn&& fn) {
  auto mat = [&](const std::string& name, Mat<T>& m, bool decay) {
    fn(name, m.v.data(), m.size(), decay);
  };
  auto vec = [&](const std::string& name, std::vector<T>& v) {
    fn(name, v.data(), v.size(), false);
  };
  mat("tok_emb", p.tok_emb, true);
  mat("pos_emb", p.pos_emb, true);
  for (size_t l = 0; l < p.layers.size(); ++l) {
    const std::string base = "layer" + std::to_string(l) + ".";
    LayerParams<T>& lp = p.layers[l];
    vec(base + "ln1_g", lp.ln1_g);
    vec(base + "ln1_b", lp.ln1_b);
    mat(base + "wq", lp.wq, true);
    vec(base + "bq", lp.bq);
    mat(base + "wk", lp.wk, true);
    vec(base + "bk", lp.bk);
    mat(base + "wv", lp.wv, true);
    vec(base + "bv", lp.bv);
    mat(base + "wo", lp.wo, true);
    vec(base + "bo", lp.bo);
    vec(base + "ln2_g", lp.ln2_g);
    vec(base + "ln2_b", lp.ln2_b);
    mat(base + "w1", lp.w1, true);
    vec(base + "b1", lp.b1);
    mat(base + "w2", lp.w2, true);
    vec(base + "b2", lp.b2);
  }
  vec("lnf_g", p.lnf_g);
  vec("lnf_b", p.lnf_b);
  mat("w_head", p.w_head, true);
  vec("b_head", p.b_head);
}

// Truncated-normal(0.02) weights, zero biases, unit layer-norm gains.
template <typename T>
EncoderParams<T> init_params(const ModelConfig& cfg, HeadKind head, uint64_t seed);

// Same shapes as init_params, all zeros (gradient / optimizer-state buffers).
template <typename T>
EncoderParams<T> zeros_like(const EncoderParams<T>& p);

// Per-(query, head) attention probability sums over non-masked keys,
// collected when non-null (single worker only).
struct AttentionProbe {
  std::vector<double> row_sums;
};

// Batch forward pass. ids/attn_lens hold `batch` rows of cfg.max_len ids and
// one attention length per row. Returns (batch * max_len) x classes logits.
// Dropout fires only in train mode, seeded per sequence from dropout_seed so
// results do not depend on the worker count.
template <typename T>
Mat<T> forward(const EncoderParams<T>& p, std::span<const int32_t> ids,
               std::span<const int32_t> attn_lens, int batch, bool train_mode,
               uint64_t dropout_seed, int workers = 1, AttentionProbe* probe = nullptr);

template <typename T>
struct LossResult {
  double loss = 0.0;
  Mat<T> dlogits;
  int64_t supervised = 0;
};

// Mean cross-entropy over rows whose label is not kIgnoreLabel, with the exact
// gradient w.r.t. logits.
template <typename T>
LossResult<T> loss_token(const Mat<T>& logits, std::span<const int32_t> labels);
template <typename T>
LossResult<T> loss_binary(const Mat<T>& logits, std::span<const int32_t> labels);

template <typename T>
struct StepResult {
  double loss = 0.0;
  int64_t supervised = 0;
};

// Fused forward + loss + reverse pass; gradients accumulate into `grads`
// (zeroed first). Labels are token ids or binary classes depending on the
// head, kIgnoreLabel elsewhere. Pass `logits_out` to keep the batch logits.
template <typename T>
StepResult<T> forward_backward(const EncoderParams<T>& p, std::span<const int32_t> ids,
                               std::span<const int32_t> attn_lens,
                               std::span<const int32_t> labels, int batch, bool train_mode,
                               uint64_t dropout_seed, EncoderParams<T>& grads, int workers = 1,
                               Mat<T>* logits_out = nullptr);

// Convenience single-call gradient computation (no dropout).
template <typename T>
EncoderParams<T> backward(const EncoderParams<T>& p, std::span<const int32_t> ids,
                          std::span<const int32_t> attn_lens, std::span<const int32_t> labels,
                          int batch);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

template <typename T>
struct AdamState {
  EncoderParams<T> m, v;
};

// Bias-corrected Adam with decoupled weight decay on weight matrices only.
template <typename T>
void adam_step(EncoderParams<T>& params, const EncoderParams<T>& grads, AdamState<T>& state,
               int64_t step, double lr, const AdamConfig& cfg);

// Single-file checkpoint: canonical key=value config text plus named tensor
// records (f32, little-endian). Round-trips bit-exactly.
void save_checkpoint(const std::string& path, const EncoderParams<float>& params,
                     const std::map<std::string, std::string>& extra,
                     const AdamState<float>* adam = nullptr);

struct Checkpoint {
  EncoderParams<float> params;
  AdamState<float> adam;
  bool has_adam = false;
  std::map<std::string, std::string> extra;
};

Checkpoint load_checkpoint(const std::string& path);

}  // namespace ctok
