#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "ctok/model.hpp"
#include "ctok/objectives.hpp"
#include "gradcheck.hpp"

using namespace ctok;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.hidden = 8;
  cfg.heads = 2;
  cfg.ffn = 16;
  cfg.vocab = 11;
  cfg.max_len = 6;
  cfg.dropout = 0.1;
  return cfg;
}

struct TinyBatch {
  std::vector<int32_t> ids;
  std::vector<int32_t> attn;
  std::vector<int32_t> token_labels;
  std::vector<int32_t> binary_labels;
  int batch = 2;
};

TinyBatch tiny_batch(const ModelConfig& cfg) {
  TinyBatch b;
  const int L = cfg.max_len;
  Rng rng(14);
  b.ids.resize(2 * L, kPadId);
  b.attn = {static_cast<int32_t>(L), static_cast<int32_t>(L - 2)};
  b.token_labels.assign(2 * L, kIgnoreLabel);
  b.binary_labels.assign(2 * L, kIgnoreLabel);
  for (int s = 0; s < 2; ++s) {
    for (int t = 0; t < b.attn[s]; ++t)
      b.ids[s * L + t] = static_cast<int32_t>(rng.below(cfg.vocab));
    for (int t = 1; t + 1 < b.attn[s]; ++t) {
      b.binary_labels[s * L + t] = static_cast<int32_t>(rng.below(2));
      if (t % 2 == 1) b.token_labels[s * L + t] = static_cast<int32_t>(rng.below(cfg.vocab));
    }
  }
  return b;
}

}  // namespace

TEST_CASE("init_params is deterministic and shapes follow the head kind") {
  const ModelConfig cfg = tiny_config();
  const auto a = init_params<float>(cfg, HeadKind::kToken, 77);
  auto b = init_params<float>(cfg, HeadKind::kToken, 77);
  bool equal = a.tok_emb.v == b.tok_emb.v && a.w_head.v == b.w_head.v;
  for (size_t l = 0; l < a.layers.size(); ++l) equal &= a.layers[l].w1.v == b.layers[l].w1.v;
  CHECK(equal);

  CHECK(a.w_head.rows == cfg.hidden);
  CHECK(a.w_head.cols == cfg.vocab);
  const auto bin = init_params<float>(cfg, HeadKind::kBinary, 77);
  CHECK(bin.w_head.rows == cfg.hidden);
  CHECK(bin.w_head.cols == 2);
  CHECK(bin.b_head.size() == 2);

  for (float g : a.layers[0].ln1_g) CHECK(g == 1.0f);
  for (float v : a.layers[0].bq) CHECK(v == 0.0f);
  // truncated normal: nothing beyond two sigma
  for (float v : a.tok_emb.v) CHECK(std::abs(v) <= 0.04f + 1e-7f);
}

TEST_CASE("forward produces per-position logits and masks padding") {
  ModelConfig cfg = tiny_config();
  cfg.max_len = 4;
  const auto p = init_params<float>(cfg, HeadKind::kToken, 3);
  std::vector<int32_t> ids = {kClsId, 5, 6, kSepId};
  std::vector<int32_t> attn = {4};
  const Mat<float> logits = forward(p, std::span<const int32_t>(ids),
                                    std::span<const int32_t>(attn), 1, false, 0);
  CHECK(logits.rows == 4);
  CHECK(logits.cols == cfg.vocab);

  // shorter attention with different pad content gives identical real logits
  std::vector<int32_t> short_ids = {kClsId, 5, kSepId, 9};
  std::vector<int32_t> short_ids2 = {kClsId, 5, kSepId, 2};
  std::vector<int32_t> attn3 = {3};
  const Mat<float> la = forward(p, std::span<const int32_t>(short_ids),
                                std::span<const int32_t>(attn3), 1, false, 0);
  const Mat<float> lb = forward(p, std::span<const int32_t>(short_ids2),
                                std::span<const int32_t>(attn3), 1, false, 0);
  for (int t = 0; t < 3; ++t)
    for (int c = 0; c < cfg.vocab; ++c) CHECK(la(t, c) == lb(t, c));
}

TEST_CASE("forward without training mode is deterministic; dropout only in training") {
  const ModelConfig cfg = tiny_config();
  const auto p = init_params<float>(cfg, HeadKind::kBinary, 5);
  const TinyBatch b = tiny_batch(cfg);
  const auto eval1 = forward(p, std::span<const int32_t>(b.ids),
                             std::span<const int32_t>(b.attn), b.batch, false, 1);
  const auto eval2 = forward(p, std::span<const int32_t>(b.ids),
                             std::span<const int32_t>(b.attn), b.batch, false, 2);
  CHECK(eval1.v == eval2.v);  // seed is irrelevant without dropout

  const auto train1 = forward(p, std::span<const int32_t>(b.ids),
                              std::span<const int32_t>(b.attn), b.batch, true, 1);
  const auto train1b = forward(p, std::span<const int32_t>(b.ids),
                               std::span<const int32_t>(b.attn), b.batch, true, 1);
  const auto train2 = forward(p, std::span<const int32_t>(b.ids),
                              std::span<const int32_t>(b.attn), b.batch, true, 2);
  CHECK(train1.v == train1b.v);
  CHECK(train1.v != train2.v);
  CHECK(train1.v != eval1.v);
}

TEST_CASE("attention rows are a probability distribution over visible keys") {
  const ModelConfig cfg = tiny_config();
  const auto p = init_params<float>(cfg, HeadKind::kToken, 8);
  const TinyBatch b = tiny_batch(cfg);
  AttentionProbe probe;
  forward(p, std::span<const int32_t>(b.ids), std::span<const int32_t>(b.attn), b.batch, false,
          0, 1, &probe);
  REQUIRE(probe.row_sums.size() ==
          static_cast<size_t>(b.batch) * cfg.layers * cfg.heads * cfg.max_len);
  for (double s : probe.row_sums) CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("loss_token matches closed forms") {
  Mat<double> logits(2, 7);  // uniform rows
  std::vector<int32_t> labels = {3, kIgnoreLabel};
  const auto res = loss_token(logits, std::span<const int32_t>(labels));
  CHECK(res.loss == doctest::Approx(std::log(7.0)).epsilon(1e-12));
  CHECK(res.supervised == 1);

  Mat<double> hot(1, 7);
  for (int c = 0; c < 7; ++c) hot(0, c) = c == 2 ? 50.0 : -50.0;
  std::vector<int32_t> hot_label = {2};
  CHECK(loss_token(hot, std::span<const int32_t>(hot_label)).loss ==
        doctest::Approx(0.0).epsilon(1e-12));

  std::vector<int32_t> ignored = {kIgnoreLabel, kIgnoreLabel};
  CHECK_THROWS_WITH_AS(loss_token(logits, std::span<const int32_t>(ignored)),
                       "no supervised positions", std::runtime_error);
}

TEST_CASE("loss_binary matches ln 2 on uniform logits and rejects empty supervision") {
  Mat<double> logits(3, 2);
  std::vector<int32_t> labels = {1, 0, kIgnoreLabel};
  const auto res = loss_binary(logits, std::span<const int32_t>(labels));
  CHECK(res.loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  std::vector<int32_t> ignored = {kIgnoreLabel, kIgnoreLabel, kIgnoreLabel};
  CHECK_THROWS_AS(loss_binary(logits, std::span<const int32_t>(ignored)), std::runtime_error);
}

TEST_CASE("loss gradients match finite differences at 64-bit") {
  Rng rng(6);
  for (const int classes : {7, 2}) {
    Mat<double> logits(5, classes);
    for (auto& v : logits.v) v = rng.normal();
    std::vector<int32_t> labels(5, kIgnoreLabel);
    labels[1] = 1;
    labels[3] = classes - 1;
    labels[4] = 0;
    const auto res = classes == 2 ? loss_binary(logits, std::span<const int32_t>(labels))
                                  : loss_token(logits, std::span<const int32_t>(labels));
    const double h = 1e-6;
    double max_err = 0;
    for (size_t i = 0; i < logits.size(); ++i) {
      const double saved = logits.v[i];
      logits.v[i] = saved + h;
      const double up = classes == 2 ? loss_binary(logits, std::span<const int32_t>(labels)).loss
                                     : loss_token(logits, std::span<const int32_t>(labels)).loss;
      logits.v[i] = saved - h;
      const double down = classes == 2
                              ? loss_binary(logits, std::span<const int32_t>(labels)).loss
                              : loss_token(logits, std::span<const int32_t>(labels)).loss;
      logits.v[i] = saved;
      max_err = std::max(max_err,
                         testing::rel_err((up - down) / (2 * h), res.dlogits.v[i]));
    }
    CHECK(max_err < 1e-6);
  }
}

TEST_CASE("backward matches finite differences on a subsample of every tensor") {
  ModelConfig cfg = tiny_config();
  cfg.layers = 1;  // the full model is exercised by the acceptance suite
  const TinyBatch b = tiny_batch(cfg);
  for (const HeadKind head : {HeadKind::kToken, HeadKind::kBinary}) {
    auto params = init_params<double>(cfg, head, 99);
    const auto& labels = head == HeadKind::kToken ? b.token_labels : b.binary_labels;
    const auto report =
        testing::gradcheck(params, std::span<const int32_t>(b.ids),
                           std::span<const int32_t>(b.attn),
                           std::span<const int32_t>(labels), b.batch, /*stride=*/7);
    INFO("worst tensor: ", report.worst_tensor);
    CHECK(report.max_rel_err < 1e-4);
  }
}

TEST_CASE("backward is near zero at a saturated perfect prediction") {
  ModelConfig cfg = tiny_config();
  cfg.dropout = 0.0;
  auto p = init_params<double>(cfg, HeadKind::kBinary, 12);
  const TinyBatch b = tiny_batch(cfg);
  // pin one supervised position, saturate the head bias toward its label
  std::vector<int32_t> labels(b.binary_labels.size(), kIgnoreLabel);
  labels[2] = 1;
  p.b_head[1] = 60.0;
  p.b_head[0] = -60.0;
  const auto grads = backward(p, std::span<const int32_t>(b.ids),
                              std::span<const int32_t>(b.attn),
                              std::span<const int32_t>(labels), b.batch);
  double norm = 0;
  visit_params(const_cast<EncoderParams<double>&>(grads),
               [&](const std::string&, double* data, size_t n, bool) {
                 for (size_t i = 0; i < n; ++i) norm += data[i] * data[i];
               });
  CHECK(std::sqrt(norm) < 1e-12);
}

TEST_CASE("binary-head parameters contain no vocabulary head") {
  const auto p = init_params<float>(tiny_config(), HeadKind::kBinary, 1);
  CHECK(p.w_head.cols == 2);  // the H x |V| head simply does not exist
  CHECK(p.num_params() <
        init_params<float>(tiny_config(), HeadKind::kToken, 1).num_params());
}

TEST_CASE("adam_step follows the scalar recurrence") {
  ModelConfig cfg = tiny_config();
  auto p = init_params<float>(cfg, HeadKind::kBinary, 4);
  auto grads = zeros_like(p);
  AdamState<float> state{zeros_like(p), zeros_like(p)};
  AdamConfig adam;
  adam.weight_decay = 0.0;

  // p = 1, g = 1 everywhere: after one step with lr 0.1 every value is
  // 1 - 0.1 * 1/(1 + eps) (bias-corrected first moment and variance are 1)
  visit_params(p, [](const std::string&, float* d, size_t n, bool) {
    for (size_t i = 0; i < n; ++i) d[i] = 1.0f;
  });
  visit_params(grads, [](const std::string&, float* d, size_t n, bool) {
    for (size_t i = 0; i < n; ++i) d[i] = 1.0f;
  });
  adam_step(p, grads, state, 1, 0.1, adam);
  const double expect = 1.0 - 0.1 / (1.0 + adam.eps);
  visit_params(p, [&](const std::string&, float* d, size_t n, bool) {
    for (size_t i = 0; i < n; ++i) CHECK(d[i] == doctest::Approx(expect).epsilon(1e-6));
  });

  // zero gradient and zero decay leave parameters untouched
  auto q = init_params<float>(cfg, HeadKind::kBinary, 4);
  const auto q_before = q;
  auto zero_grads = zeros_like(q);
  AdamState<float> state2{zeros_like(q), zeros_like(q)};
  adam_step(q, zero_grads, state2, 1, 0.1, adam);
  CHECK(q.tok_emb.v == q_before.tok_emb.v);
  CHECK(q.w_head.v == q_before.w_head.v);

  AdamConfig defaults;
  CHECK(defaults.beta1 == 0.9);
  CHECK(defaults.beta2 == 0.999);
  CHECK(defaults.eps == 1e-8);
  CHECK(defaults.weight_decay == 0.01);
}

TEST_CASE("weight decay applies to weight matrices but not biases or layer norms") {
  ModelConfig cfg = tiny_config();
  auto p = init_params<float>(cfg, HeadKind::kBinary, 4);
  visit_params(p, [](const std::string&, float* d, size_t n, bool) {
    for (size_t i = 0; i < n; ++i) d[i] = 2.0f;
  });
  auto grads = zeros_like(p);
  AdamState<float> state{zeros_like(p), zeros_like(p)};
  AdamConfig adam;  // decay 0.01
  adam_step(p, grads, state, 1, 0.5, adam);
  // decayed: 2 - 0.5 * 0.01 * 2 = 1.99; undecayed: unchanged
  CHECK(p.w_head(0, 0) == doctest::Approx(1.99));
  CHECK(p.layers[0].wq(0, 0) == doctest::Approx(1.99));
  CHECK(p.b_head[0] == 2.0f);
  CHECK(p.layers[0].ln1_g[0] == 2.0f);
}

TEST_CASE("adam_step rejects non-finite gradients") {
  auto p = init_params<float>(tiny_config(), HeadKind::kBinary, 4);
  auto grads = zeros_like(p);
  grads.w_head(0, 0) = std::numeric_limits<float>::quiet_NaN();
  AdamState<float> state{zeros_like(p), zeros_like(p)};
  CHECK_THROWS_WITH_AS(adam_step(p, grads, state, 1, 0.1, AdamConfig{}), "non-finite gradient",
                       std::runtime_error);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  const ModelConfig cfg = tiny_config();
  auto p = init_params<float>(cfg, HeadKind::kBinary, 21);
  AdamState<float> adam{zeros_like(p), zeros_like(p)};
  adam.m.w_head(0, 1) = 0.5f;
  adam.v.w_head(0, 1) = 0.25f;

  const auto dir = std::filesystem::temp_directory_path();
  const auto path_a = (dir / "ctok_ck_a.bin").string();
  const auto path_b = (dir / "ctok_ck_b.bin").string();
  save_checkpoint(path_a, p, {{"step", "42"}, {"tokens_seen", "1000"}}, &adam);

  const Checkpoint ck = load_checkpoint(path_a);
  CHECK(ck.extra.at("step") == "42");
  CHECK(ck.has_adam);
  CHECK(ck.params.head == HeadKind::kBinary);
  CHECK(ck.params.cfg.hidden == cfg.hidden);
  CHECK(ck.params.tok_emb.v == p.tok_emb.v);
  CHECK(ck.adam.v.w_head(0, 1) == 0.25f);

  save_checkpoint(path_b, ck.params, ck.extra, &ck.adam);
  std::ifstream fa(path_a, std::ios::binary), fb(path_b, std::ios::binary);
  const std::string bytes_a((std::istreambuf_iterator<char>(fa)), {});
  const std::string bytes_b((std::istreambuf_iterator<char>(fb)), {});
  CHECK(bytes_a == bytes_b);
  CHECK(!bytes_a.empty());
}
