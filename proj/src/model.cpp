#include "ctok/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "ctok/objectives.hpp"

namespace ctok {

namespace {

constexpr double kLnEps = 1e-5;

template <typename T>
struct TensorRef {
  std::string name;
  T* data;
  size_t n;
  bool decay;
};

template <typename T>
std::vector<TensorRef<T>> collect(EncoderParams<T>& p) {
  std::vector<TensorRef<T>> out;
  visit_params(p, [&](const std::string& name, T* data, size_t n, bool decay) {
    out.push_back({name, data, n, decay});
  });
  return out;
}

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2.0)));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2.0)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(1.0 / std::sqrt(2.0 * std::numbers::pi));
  return cdf + x * pdf;
}

// Normalized values and inverse stddev are cached for the backward pass.
template <typename T>
void layer_norm_forward(const Mat<T>& x, const std::vector<T>& gain, const std::vector<T>& bias,
                        Mat<T>& x_hat, std::vector<T>& inv_std, Mat<T>& out) {
  const int rows = x.rows, h = x.cols;
  for (int t = 0; t < rows; ++t) {
    const T* xt = x.row(t);
    T mean = 0;
    for (int d = 0; d < h; ++d) mean += xt[d];
    mean /= T(h);
    T var = 0;
    for (int d = 0; d < h; ++d) {
      const T c = xt[d] - mean;
      var += c * c;
    }
    var /= T(h);
    const T is = T(1) / std::sqrt(var + T(kLnEps));
    inv_std[t] = is;
    T* xh = x_hat.row(t);
    T* ot = out.row(t);
    for (int d = 0; d < h; ++d) {
      xh[d] = (xt[d] - mean) * is;
      ot[d] = gain[d] * xh[d] + bias[d];
    }
  }
}

template <typename T>
void layer_norm_backward(const Mat<T>& d_out, const Mat<T>& x_hat, const std::vector<T>& inv_std,
                         const std::vector<T>& gain, std::vector<T>& d_gain,
                         std::vector<T>& d_bias, Mat<T>& d_x, bool accumulate_dx) {
  const int rows = d_out.rows, h = d_out.cols;
  for (int t = 0; t < rows; ++t) {
    const T* dy = d_out.row(t);
    const T* xh = x_hat.row(t);
    T m1 = 0, m2 = 0;
    for (int d = 0; d < h; ++d) {
      const T dxh = dy[d] * gain[d];
      m1 += dxh;
      m2 += dxh * xh[d];
      d_gain[d] += dy[d] * xh[d];
      d_bias[d] += dy[d];
    }
    m1 /= T(h);
    m2 /= T(h);
    T* dx = d_x.row(t);
    const T is = inv_std[t];
    for (int d = 0; d < h; ++d) {
      const T dxh = dy[d] * gain[d];
      const T v = is * (dxh - m1 - xh[d] * m2);
      dx[d] = accumulate_dx ? dx[d] + v : v;
    }
  }
}

template <typename T>
void add_bias(Mat<T>& m, const std::vector<T>& bias) {
  for (int t = 0; t < m.rows; ++t) {
    T* row = m.row(t);
    for (int d = 0; d < m.cols; ++d) row[d] += bias[d];
  }
}

template <typename T>
void bias_grad(const Mat<T>& d, std::vector<T>& db) {
  for (int t = 0; t < d.rows; ++t) {
    const T* row = d.row(t);
    for (int c = 0; c < d.cols; ++c) db[c] += row[c];
  }
}

// Multiplier mask: 0 with probability p, otherwise 1/(1-p).
template <typename T>
void draw_dropout(std::vector<T>& mask, size_t n, double p, Rng& rng) {
  mask.resize(n);
  const T keep = T(1.0 / (1.0 - p));
  for (size_t i = 0; i < n; ++i) mask[i] = rng.next_double() < p ? T(0) : keep;
}

template <typename T>
void apply_mask(T* data, const std::vector<T>& mask) {
  for (size_t i = 0; i < mask.size(); ++i) data[i] *= mask[i];
}

template <typename T>
struct LayerTrace {
  Mat<T> ln1_hat, ln2_hat;
  std::vector<T> ln1_inv, ln2_inv;
  Mat<T> a;        // post-LN1 input to attention
  Mat<T> q, k, v;
  Mat<T> probs;    // (heads*L) x L, pre-dropout
  Mat<T> ctx;
  Mat<T> x_mid;    // residual stream after attention
  Mat<T> f;        // post-LN2 input to ffn
  Mat<T> ffn_pre;  // L x F
  Mat<T> ffn_act;  // L x F
  Mat<T> x_out;
  std::vector<T> attn_mask, out_mask, ffn_mask;  // dropout multipliers (train only)
};

template <typename T>
struct SeqTrace {
  Mat<T> x0;
  std::vector<T> emb_mask;
  std::vector<LayerTrace<T>> layers;
  Mat<T> lnf_hat;
  std::vector<T> lnf_inv;
  Mat<T> xf;

  void ensure(const ModelConfig& cfg) {
    const int l = cfg.max_len, h = cfg.hidden, f = cfg.ffn;
    if (x0.rows == l && !layers.empty()) return;
    x0 = Mat<T>(l, h);
    layers.resize(cfg.layers);
    for (auto& lt : layers) {
      lt.ln1_hat = Mat<T>(l, h);
      lt.ln2_hat = Mat<T>(l, h);
      lt.ln1_inv.resize(l);
      lt.ln2_inv.resize(l);
      lt.a = Mat<T>(l, h);
      lt.q = Mat<T>(l, h);
      lt.k = Mat<T>(l, h);
      lt.v = Mat<T>(l, h);
      lt.probs = Mat<T>(cfg.heads * l, l);
      lt.ctx = Mat<T>(l, h);
      lt.x_mid = Mat<T>(l, h);
      lt.f = Mat<T>(l, h);
      lt.ffn_pre = Mat<T>(l, f);
      lt.ffn_act = Mat<T>(l, f);
      lt.x_out = Mat<T>(l, h);
    }
    lnf_hat = Mat<T>(l, h);
    lnf_inv.resize(l);
    xf = Mat<T>(l, h);
  }
};

// Forward for one sequence; logits written to `logits` (L x classes rows).
template <typename T>
void run_seq(const EncoderParams<T>& p, const int32_t* ids, int32_t attn_len, bool train,
             Rng rng, SeqTrace<T>& tr, T* logits, AttentionProbe* probe) {
  const ModelConfig& cfg = p.cfg;
  const int L = cfg.max_len, H = cfg.hidden, heads = cfg.heads, dh = cfg.head_dim();
  const int classes = p.num_classes();
  const T scale = T(1) / std::sqrt(T(dh));
  const bool drop = train && cfg.dropout > 0.0;
  tr.ensure(cfg);

  for (int t = 0; t < L; ++t) {
    const int32_t id = ids[t];
    if (id < 0 || id >= cfg.vocab) throw std::out_of_range("token id outside model vocabulary");
    const T* te = p.tok_emb.row(id);
    const T* pe = p.pos_emb.row(t);
    T* x = tr.x0.row(t);
    for (int d = 0; d < H; ++d) x[d] = te[d] + pe[d];
  }
  if (drop) {
    draw_dropout(tr.emb_mask, tr.x0.size(), cfg.dropout, rng);
    apply_mask(tr.x0.v.data(), tr.emb_mask);
  } else {
    tr.emb_mask.clear();
  }

  const Mat<T>* x_in = &tr.x0;
  for (int l = 0; l < cfg.layers; ++l) {
    LayerTrace<T>& lt = tr.layers[l];
    const LayerParams<T>& lp = p.layers[l];

    layer_norm_forward(*x_in, lp.ln1_g, lp.ln1_b, lt.ln1_hat, lt.ln1_inv, lt.a);
    for (int t = 0; t < L; ++t) {
      const T* a = lt.a.row(t);
      T* q = lt.q.row(t);
      T* k = lt.k.row(t);
      T* v = lt.v.row(t);
      std::memcpy(q, lp.bq.data(), sizeof(T) * H);
      std::memcpy(k, lp.bk.data(), sizeof(T) * H);
      std::memcpy(v, lp.bv.data(), sizeof(T) * H);
      for (int d = 0; d < H; ++d) {
        const T ad = a[d];
        axpy(ad, lp.wq.row(d), q, H);
        axpy(ad, lp.wk.row(d), k, H);
        axpy(ad, lp.wv.row(d), v, H);
      }
    }

    if (drop) draw_dropout(lt.attn_mask, lt.probs.size(), cfg.dropout, rng);
    else lt.attn_mask.clear();

    lt.ctx.zero();
    for (int h = 0; h < heads; ++h) {
      const int off = h * dh;
      for (int t = 0; t < L; ++t) {
        T* prow = lt.probs.row(h * L + t);
        const T* qt = lt.q.row(t) + off;
        T best = -std::numeric_limits<T>::infinity();
        for (int u = 0; u < attn_len; ++u) {
          prow[u] = dot(qt, lt.k.row(u) + off, dh) * scale;
          best = std::max(best, prow[u]);
        }
        T total = 0;
        for (int u = 0; u < attn_len; ++u) {
          prow[u] = std::exp(prow[u] - best);
          total += prow[u];
        }
        const T inv = T(1) / total;
        for (int u = 0; u < attn_len; ++u) prow[u] *= inv;
        for (int u = attn_len; u < L; ++u) prow[u] = 0;
        if (probe) {
          double s = 0;
          for (int u = 0; u < attn_len; ++u) s += static_cast<double>(prow[u]);
          probe->row_sums.push_back(s);
        }
        T* ct = lt.ctx.row(t) + off;
        const T* mask = drop ? lt.attn_mask.data() + static_cast<size_t>(h * L + t) * L : nullptr;
        for (int u = 0; u < attn_len; ++u) {
          const T w = mask ? prow[u] * mask[u] : prow[u];
          if (w != T(0)) axpy(w, lt.v.row(u) + off, ct, dh);
        }
      }
    }

    // output projection + residual
    gemm(lt.ctx.v.data(), lp.wo.v.data(), lt.x_mid.v.data(), L, H, H, false);
    add_bias(lt.x_mid, lp.bo);
    if (drop) {
      draw_dropout(lt.out_mask, lt.x_mid.size(), cfg.dropout, rng);
      apply_mask(lt.x_mid.v.data(), lt.out_mask);
    } else {
      lt.out_mask.clear();
    }
    for (size_t i = 0; i < lt.x_mid.size(); ++i) lt.x_mid.v[i] += x_in->v[i];

    layer_norm_forward(lt.x_mid, lp.ln2_g, lp.ln2_b, lt.ln2_hat, lt.ln2_inv, lt.f);
    gemm(lt.f.v.data(), lp.w1.v.data(), lt.ffn_pre.v.data(), L, H, cfg.ffn, false);
    add_bias(lt.ffn_pre, lp.b1);
    for (size_t i = 0; i < lt.ffn_pre.size(); ++i) lt.ffn_act.v[i] = gelu(lt.ffn_pre.v[i]);
    gemm(lt.ffn_act.v.data(), lp.w2.v.data(), lt.x_out.v.data(), L, cfg.ffn, H, false);
    add_bias(lt.x_out, lp.b2);
    if (drop) {
      draw_dropout(lt.ffn_mask, lt.x_out.size(), cfg.dropout, rng);
      apply_mask(lt.x_out.v.data(), lt.ffn_mask);
    } else {
      lt.ffn_mask.clear();
    }
    for (size_t i = 0; i < lt.x_out.size(); ++i) lt.x_out.v[i] += lt.x_mid.v[i];

    x_in = &lt.x_out;
  }

  layer_norm_forward(*x_in, p.lnf_g, p.lnf_b, tr.lnf_hat, tr.lnf_inv, tr.xf);
  gemm(tr.xf.v.data(), p.w_head.v.data(), logits, L, H, classes, false);
  for (int t = 0; t < L; ++t) {
    T* row = logits + static_cast<size_t>(t) * classes;
    for (int c = 0; c < classes; ++c) row[c] += p.b_head[c];
  }
}

// Reverse pass for one sequence; parameter gradients accumulate into `g`.
template <typename T>
void backward_seq(const EncoderParams<T>& p, const int32_t* ids, int32_t attn_len,
                  const SeqTrace<T>& tr, const T* dlogits, EncoderParams<T>& g) {
  const ModelConfig& cfg = p.cfg;
  const int L = cfg.max_len, H = cfg.hidden, heads = cfg.heads, dh = cfg.head_dim();
  const int classes = p.num_classes();
  const T scale = T(1) / std::sqrt(T(dh));

  Mat<T> d_x(L, H);  // gradient on the residual stream
  // head
  gemm_at_b(tr.xf.v.data(), dlogits, g.w_head.v.data(), L, H, classes, true);
  for (int t = 0; t < L; ++t) {
    const T* row = dlogits + static_cast<size_t>(t) * classes;
    for (int c = 0; c < classes; ++c) g.b_head[c] += row[c];
  }
  gemm_a_bt(dlogits, p.w_head.v.data(), d_x.v.data(), L, classes, H, false);

  // final layer norm (d_x currently holds d_xf; rewrite in place)
  {
    Mat<T> d_in(L, H);
    layer_norm_backward(d_x, tr.lnf_hat, tr.lnf_inv, p.lnf_g, g.lnf_g, g.lnf_b, d_in, false);
    d_x = std::move(d_in);
  }

  Mat<T> d_branch(L, H);
  Mat<T> d_ffn_act(L, cfg.ffn);
  Mat<T> d_ffn_pre(L, cfg.ffn);
  Mat<T> d_ctx(L, H);
  Mat<T> d_q(L, H), d_k(L, H), d_v(L, H);
  std::vector<T> dp(L);

  for (int l = cfg.layers - 1; l >= 0; --l) {
    const LayerTrace<T>& lt = tr.layers[l];
    const LayerParams<T>& lp = p.layers[l];
    LayerParams<T>& gl = g.layers[l];

    // ffn block: x_out = x_mid + dropout(W2 gelu(W1 f + b1) + b2)
    d_branch = d_x;  // gradient into the ffn output (pre-residual)
    if (!lt.ffn_mask.empty()) apply_mask(d_branch.v.data(), lt.ffn_mask);
    gemm_at_b(lt.ffn_act.v.data(), d_branch.v.data(), gl.w2.v.data(), L, cfg.ffn, H, true);
    bias_grad(d_branch, gl.b2);
    gemm_a_bt(d_branch.v.data(), lp.w2.v.data(), d_ffn_act.v.data(), L, H, cfg.ffn, false);
    for (size_t i = 0; i < d_ffn_pre.size(); ++i)
      d_ffn_pre.v[i] = d_ffn_act.v[i] * gelu_grad(lt.ffn_pre.v[i]);
    gemm_at_b(lt.f.v.data(), d_ffn_pre.v.data(), gl.w1.v.data(), L, H, cfg.ffn, true);
    bias_grad(d_ffn_pre, gl.b1);
    Mat<T> d_f(L, H);
    gemm_a_bt(d_ffn_pre.v.data(), lp.w1.v.data(), d_f.v.data(), L, cfg.ffn, H, false);
    // d_x still carries the residual path into x_mid; LN2 adds its share
    layer_norm_backward(d_f, lt.ln2_hat, lt.ln2_inv, lp.ln2_g, gl.ln2_g, gl.ln2_b, d_x, true);

    // attention block: x_mid = x_in + dropout(Wo ctx + bo)
    d_branch = d_x;
    if (!lt.out_mask.empty()) apply_mask(d_branch.v.data(), lt.out_mask);
    gemm_at_b(lt.ctx.v.data(), d_branch.v.data(), gl.wo.v.data(), L, H, H, true);
    bias_grad(d_branch, gl.bo);
    gemm_a_bt(d_branch.v.data(), lp.wo.v.data(), d_ctx.v.data(), L, H, H, false);

    d_q.zero();
    d_k.zero();
    d_v.zero();
    for (int h = 0; h < heads; ++h) {
      const int off = h * dh;
      for (int t = 0; t < L; ++t) {
        const T* prow = lt.probs.row(h * L + t);
        const T* mask =
            lt.attn_mask.empty() ? nullptr : lt.attn_mask.data() + static_cast<size_t>(h * L + t) * L;
        const T* dct = d_ctx.row(t) + off;
        // dv and d(dropped probs)
        T dot_pd = 0;
        for (int u = 0; u < attn_len; ++u) {
          const T w = mask ? prow[u] * mask[u] : prow[u];
          if (w != T(0)) axpy(w, dct, d_v.row(u) + off, dh);
          T dpu = dot(dct, lt.v.row(u) + off, dh);
          if (mask) dpu *= mask[u];
          dp[u] = dpu;
          dot_pd += dpu * prow[u];
        }
        // softmax backward, then scores -> q, k
        const T* qt = tr.layers[l].q.row(t) + off;
        T* dqt = d_q.row(t) + off;
        for (int u = 0; u < attn_len; ++u) {
          const T ds = prow[u] * (dp[u] - dot_pd) * scale;
          if (ds == T(0)) continue;
          axpy(ds, lt.k.row(u) + off, dqt, dh);
          axpy(ds, qt, d_k.row(u) + off, dh);
        }
      }
    }

    // back through the q/k/v projections into LN1
    Mat<T> d_a(L, H);
    gemm_at_b(lt.a.v.data(), d_q.v.data(), gl.wq.v.data(), L, H, H, true);
    bias_grad(d_q, gl.bq);
    gemm_a_bt(d_q.v.data(), lp.wq.v.data(), d_a.v.data(), L, H, H, false);
    gemm_at_b(lt.a.v.data(), d_k.v.data(), gl.wk.v.data(), L, H, H, true);
    bias_grad(d_k, gl.bk);
    gemm_a_bt(d_k.v.data(), lp.wk.v.data(), d_a.v.data(), L, H, H, true);
    gemm_at_b(lt.a.v.data(), d_v.v.data(), gl.wv.v.data(), L, H, H, true);
    bias_grad(d_v, gl.bv);
    gemm_a_bt(d_v.v.data(), lp.wv.v.data(), d_a.v.data(), L, H, H, true);
    layer_norm_backward(d_a, lt.ln1_hat, lt.ln1_inv, lp.ln1_g, gl.ln1_g, gl.ln1_b, d_x, true);
  }

  if (!tr.emb_mask.empty()) apply_mask(d_x.v.data(), tr.emb_mask);
  for (int t = 0; t < L; ++t) {
    const T* dx = d_x.row(t);
    axpy(T(1), dx, g.tok_emb.row(ids[t]), H);
    axpy(T(1), dx, g.pos_emb.row(t), H);
  }
}

template <typename T>
LossResult<T> cross_entropy(const Mat<T>& logits, std::span<const int32_t> labels) {
  if (static_cast<size_t>(logits.rows) != labels.size())
    throw std::invalid_argument("labels do not match logits rows");
  LossResult<T> res;
  res.dlogits = Mat<T>(logits.rows, logits.cols);
  const int classes = logits.cols;
  double total = 0;
  int64_t supervised = 0;
  for (int t = 0; t < logits.rows; ++t) {
    const int32_t label = labels[t];
    if (label == kIgnoreLabel) continue;
    if (label < 0 || label >= classes) throw std::out_of_range("label outside class range");
    ++supervised;
  }
  if (supervised == 0) throw std::runtime_error("no supervised positions");
  const T inv = T(1.0 / static_cast<double>(supervised));
  for (int t = 0; t < logits.rows; ++t) {
    const int32_t label = labels[t];
    if (label == kIgnoreLabel) continue;
    const T* row = logits.row(t);
    T best = row[0];
    for (int c = 1; c < classes; ++c) best = std::max(best, row[c]);
    T z = 0;
    for (int c = 0; c < classes; ++c) z += std::exp(row[c] - best);
    total += static_cast<double>(std::log(z) - (row[label] - best));
    T* drow = res.dlogits.row(t);
    const T invz = T(1) / z;
    for (int c = 0; c < classes; ++c) drow[c] = std::exp(row[c] - best) * invz * inv;
    drow[label] -= inv;
  }
  res.loss = total / static_cast<double>(supervised);
  res.supervised = supervised;
  return res;
}

}  // namespace

void ModelConfig::validate() const {
  if (layers < 1 || hidden < 1 || heads < 1 || ffn < 1 || vocab < 1 || max_len < 1)
    throw std::invalid_argument("model dimensions must be positive");
  if (hidden % heads != 0) throw std::invalid_argument("hidden size must be divisible by heads");
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("dropout must be in [0, 1)");
}

template <typename T>
int64_t EncoderParams<T>::num_params() const {
  int64_t n = 0;
  visit_params(const_cast<EncoderParams<T>&>(*this),
               [&](const std::string&, T*, size_t len, bool) { n += static_cast<int64_t>(len); });
  return n;
}

template <typename T>
EncoderParams<T> zeros_like(const EncoderParams<T>& p) {
  EncoderParams<T> z;
  z.cfg = p.cfg;
  z.head = p.head;
  z.tok_emb = Mat<T>(p.tok_emb.rows, p.tok_emb.cols);
  z.pos_emb = Mat<T>(p.pos_emb.rows, p.pos_emb.cols);
  z.layers.resize(p.layers.size());
  for (size_t l = 0; l < p.layers.size(); ++l) {
    const auto& src = p.layers[l];
    auto& dst = z.layers[l];
    dst.wq = Mat<T>(src.wq.rows, src.wq.cols);
    dst.wk = Mat<T>(src.wk.rows, src.wk.cols);
    dst.wv = Mat<T>(src.wv.rows, src.wv.cols);
    dst.wo = Mat<T>(src.wo.rows, src.wo.cols);
    dst.bq.assign(src.bq.size(), T(0));
    dst.bk.assign(src.bk.size(), T(0));
    dst.bv.assign(src.bv.size(), T(0));
    dst.bo.assign(src.bo.size(), T(0));
    dst.ln1_g.assign(src.ln1_g.size(), T(0));
    dst.ln1_b.assign(src.ln1_b.size(), T(0));
    dst.ln2_g.assign(src.ln2_g.size(), T(0));
    dst.ln2_b.assign(src.ln2_b.size(), T(0));
    dst.w1 = Mat<T>(src.w1.rows, src.w1.cols);
    dst.b1.assign(src.b1.size(), T(0));
    dst.w2 = Mat<T>(src.w2.rows, src.w2.cols);
    dst.b2.assign(src.b2.size(), T(0));
  }
  z.lnf_g.assign(p.lnf_g.size(), T(0));
  z.lnf_b.assign(p.lnf_b.size(), T(0));
  z.w_head = Mat<T>(p.w_head.rows, p.w_head.cols);
  z.b_head.assign(p.b_head.size(), T(0));
  return z;
}

template <typename T>
EncoderParams<T> init_params(const ModelConfig& cfg, HeadKind head, uint64_t seed) {
  cfg.validate();
  EncoderParams<T> p;
  p.cfg = cfg;
  p.head = head;
  const int h = cfg.hidden;
  Rng rng(seed);
  auto fill_normal = [&](Mat<T>& m, int rows, int cols) {
    m = Mat<T>(rows, cols);
    for (auto& x : m.v) x = T(rng.truncated_normal(0.02));
  };
  fill_normal(p.tok_emb, cfg.vocab, h);
  fill_normal(p.pos_emb, cfg.max_len, h);
  p.layers.resize(cfg.layers);
  for (auto& lp : p.layers) {
    lp.ln1_g.assign(h, T(1));
    lp.ln1_b.assign(h, T(0));
    fill_normal(lp.wq, h, h);
    lp.bq.assign(h, T(0));
    fill_normal(lp.wk, h, h);
    lp.bk.assign(h, T(0));
    fill_normal(lp.wv, h, h);
    lp.bv.assign(h, T(0));
    fill_normal(lp.wo, h, h);
    lp.bo.assign(h, T(0));
    lp.ln2_g.assign(h, T(1));
    lp.ln2_b.assign(h, T(0));
    fill_normal(lp.w1, h, cfg.ffn);
    lp.b1.assign(cfg.ffn, T(0));
    fill_normal(lp.w2, cfg.ffn, h);
    lp.b2.assign(h, T(0));
  }
  p.lnf_g.assign(h, T(1));
  p.lnf_b.assign(h, T(0));
  const int classes = head == HeadKind::kToken ? cfg.vocab : 2;
  fill_normal(p.w_head, h, classes);
  p.b_head.assign(classes, T(0));
  return p;
}

template <typename T>
Mat<T> forward(const EncoderParams<T>& p, std::span<const int32_t> ids,
               std::span<const int32_t> attn_lens, int batch, bool train_mode,
               uint64_t dropout_seed, int workers, AttentionProbe* probe) {
  const int L = p.cfg.max_len;
  const int classes = p.num_classes();
  if (ids.size() != static_cast<size_t>(batch) * L)
    throw std::invalid_argument("ids size does not match batch x max_len");
  if (attn_lens.size() != static_cast<size_t>(batch))
    throw std::invalid_argument("attention lengths do not match batch");
  if (probe && workers > 1) throw std::invalid_argument("attention probe requires one worker");

  Mat<T> logits(batch * L, classes);
  Rng base(dropout_seed);
  parallel_chunks(batch, workers, [&](int, int lo, int hi) {
    SeqTrace<T> trace;
    for (int b = lo; b < hi; ++b) {
      run_seq(p, ids.data() + static_cast<size_t>(b) * L, attn_lens[b], train_mode,
              base.derive(b), trace, logits.row(b * L), probe);
    }
  });
  return logits;
}

template <typename T>
LossResult<T> loss_token(const Mat<T>& logits, std::span<const int32_t> labels) {
  return cross_entropy(logits, labels);
}

template <typename T>
LossResult<T> loss_binary(const Mat<T>& logits, std::span<const int32_t> labels) {
  if (logits.cols != 2) throw std::invalid_argument("binary loss expects two classes");
  return cross_entropy(logits, labels);
}

template <typename T>
StepResult<T> forward_backward(const EncoderParams<T>& p, std::span<const int32_t> ids,
                               std::span<const int32_t> attn_lens,
                               std::span<const int32_t> labels, int batch, bool train_mode,
                               uint64_t dropout_seed, EncoderParams<T>& grads, int workers,
                               Mat<T>* logits_out) {
  const int L = p.cfg.max_len;
  const int classes = p.num_classes();
  if (labels.size() != static_cast<size_t>(batch) * L)
    throw std::invalid_argument("labels size does not match batch x max_len");

  Mat<T> logits(batch * L, classes);
  std::vector<SeqTrace<T>> traces(batch);
  Rng base(dropout_seed);
  parallel_chunks(batch, workers, [&](int, int lo, int hi) {
    for (int b = lo; b < hi; ++b)
      run_seq(p, ids.data() + static_cast<size_t>(b) * L, attn_lens[b], train_mode,
              base.derive(b), traces[b], logits.row(b * L), nullptr);
  });

  LossResult<T> loss = cross_entropy(logits, labels);

  if (workers <= 1) {
    for (int b = 0; b < batch; ++b)
      backward_seq(p, ids.data() + static_cast<size_t>(b) * L, attn_lens[b], traces[b],
                   loss.dlogits.row(b * L), grads);
  } else {
    std::vector<EncoderParams<T>> partial;
    const int used = std::min(workers, batch);
    partial.reserve(used);
    for (int t = 0; t < used; ++t) partial.push_back(zeros_like(p));
    parallel_chunks(batch, workers, [&](int t, int lo, int hi) {
      for (int b = lo; b < hi; ++b)
        backward_seq(p, ids.data() + static_cast<size_t>(b) * L, attn_lens[b], traces[b],
                     loss.dlogits.row(b * L), partial[t]);
    });
    // fixed-order reduction keeps results reproducible for a given worker count
    auto dst = collect(grads);
    for (int t = 0; t < used; ++t) {
      auto src = collect(partial[t]);
      for (size_t i = 0; i < dst.size(); ++i)
        for (size_t j = 0; j < dst[i].n; ++j) dst[i].data[j] += src[i].data[j];
    }
  }

  if (logits_out) *logits_out = std::move(logits);
  return {loss.loss, loss.supervised};
}

template <typename T>
EncoderParams<T> backward(const EncoderParams<T>& p, std::span<const int32_t> ids,
                          std::span<const int32_t> attn_lens, std::span<const int32_t> labels,
                          int batch) {
  EncoderParams<T> grads = zeros_like(p);
  const StepResult<T> res = forward_backward(p, ids, attn_lens, labels, batch, false, 0, grads, 1,
                                             static_cast<Mat<T>*>(nullptr));
  if (!std::isfinite(res.loss)) throw std::runtime_error("diverged");
  return grads;
}

template <typename T>
void adam_step(EncoderParams<T>& params, const EncoderParams<T>& grads, AdamState<T>& state,
               int64_t step, double lr, const AdamConfig& cfg) {
  if (step < 1) throw std::invalid_argument("adam step must be >= 1");
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  auto pr = collect(params);
  auto gr = collect(const_cast<EncoderParams<T>&>(grads));
  auto mr = collect(state.m);
  auto vr = collect(state.v);
  for (size_t i = 0; i < pr.size(); ++i) {
    T* w = pr[i].data;
    const T* g = gr[i].data;
    T* m = mr[i].data;
    T* v = vr[i].data;
    const bool decay = pr[i].decay && cfg.weight_decay > 0.0;
    for (size_t j = 0; j < pr[i].n; ++j) {
      const double gj = static_cast<double>(g[j]);
      if (!std::isfinite(gj)) throw std::runtime_error("non-finite gradient");
      const double mj = cfg.beta1 * static_cast<double>(m[j]) + (1.0 - cfg.beta1) * gj;
      const double vj = cfg.beta2 * static_cast<double>(v[j]) + (1.0 - cfg.beta2) * gj * gj;
      m[j] = T(mj);
      v[j] = T(vj);
      double upd = (mj / bc1) / (std::sqrt(vj / bc2) + cfg.eps);
      if (decay) upd += cfg.weight_decay * static_cast<double>(w[j]);
      w[j] = T(static_cast<double>(w[j]) - lr * upd);
    }
  }
}

namespace {

void write_u32(std::ofstream& out, uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
void write_u16(std::ofstream& out, uint16_t v) { out.write(reinterpret_cast<const char*>(&v), 2); }

uint32_t read_u32(std::ifstream& in) {
  uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
uint16_t read_u16(std::ifstream& in) {
  uint16_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 2);
  return v;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct NamedTensor {
  std::string name;
  std::vector<uint32_t> dims;
  const float* data;
  size_t n;
};

void append_tensors(EncoderParams<float>& p, const std::string& prefix,
                    std::vector<NamedTensor>& out) {
  visit_params(p, [&](const std::string& name, float* data, size_t n, bool) {
    NamedTensor t;
    t.name = prefix + name;
    t.data = data;
    t.n = n;
    out.push_back(std::move(t));
  });
}

}  // namespace

void save_checkpoint(const std::string& path, const EncoderParams<float>& params,
                     const std::map<std::string, std::string>& extra,
                     const AdamState<float>* adam) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);

  std::map<std::string, std::string> config = extra;
  config["layers"] = std::to_string(params.cfg.layers);
  config["hidden"] = std::to_string(params.cfg.hidden);
  config["heads"] = std::to_string(params.cfg.heads);
  config["ffn"] = std::to_string(params.cfg.ffn);
  config["vocab"] = std::to_string(params.cfg.vocab);
  config["max_len"] = std::to_string(params.cfg.max_len);
  config["dropout"] = format_double(params.cfg.dropout);
  config["head"] = params.head == HeadKind::kToken ? "token" : "binary";
  std::string text;
  for (const auto& [k, v] : config) text += k + "=" + v + "\n";

  out.write("CTOK", 4);
  write_u32(out, 1);
  write_u32(out, static_cast<uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));

  std::vector<NamedTensor> tensors;
  auto& mut = const_cast<EncoderParams<float>&>(params);
  append_tensors(mut, "", tensors);
  if (adam) {
    append_tensors(const_cast<EncoderParams<float>&>(adam->m), "adam_m.", tensors);
    append_tensors(const_cast<EncoderParams<float>&>(adam->v), "adam_v.", tensors);
  }
  write_u32(out, static_cast<uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    write_u16(out, static_cast<uint16_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    out.put(static_cast<char>(1));
    write_u32(out, static_cast<uint32_t>(t.n));
    out.write(reinterpret_cast<const char*>(t.data),
              static_cast<std::streamsize>(t.n * sizeof(float)));
  }
  if (!out) throw std::runtime_error("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "CTOK", 4) != 0)
    throw std::runtime_error("not a checkpoint file: " + path);
  if (read_u32(in) != 1) throw std::runtime_error("unsupported checkpoint version: " + path);
  const uint32_t text_len = read_u32(in);
  std::string text(text_len, '\0');
  in.read(text.data(), text_len);

  std::map<std::string, std::string> config;
  size_t pos = 0;
  while (pos < text.size()) {
    const size_t eol = text.find('\n', pos);
    const std::string line = text.substr(pos, eol - pos);
    pos = eol == std::string::npos ? text.size() : eol + 1;
    const size_t eq = line.find('=');
    if (eq != std::string::npos) config[line.substr(0, eq)] = line.substr(eq + 1);
  }

  ModelConfig cfg;
  cfg.layers = std::stoi(config.at("layers"));
  cfg.hidden = std::stoi(config.at("hidden"));
  cfg.heads = std::stoi(config.at("heads"));
  cfg.ffn = std::stoi(config.at("ffn"));
  cfg.vocab = std::stoi(config.at("vocab"));
  cfg.max_len = std::stoi(config.at("max_len"));
  cfg.dropout = std::stod(config.at("dropout"));
  const HeadKind head = config.at("head") == "token" ? HeadKind::kToken : HeadKind::kBinary;
  for (const char* key : {"layers", "hidden", "heads", "ffn", "vocab", "max_len", "dropout", "head"})
    config.erase(key);

  Checkpoint ck;
  ck.params = init_params<float>(cfg, head, 0);
  ck.adam.m = zeros_like(ck.params);
  ck.adam.v = zeros_like(ck.params);
  ck.extra = std::move(config);

  std::map<std::string, std::pair<float*, size_t>> slots;
  visit_params(ck.params, [&](const std::string& name, float* data, size_t n, bool) {
    slots[name] = {data, n};
  });
  visit_params(ck.adam.m, [&](const std::string& name, float* data, size_t n, bool) {
    slots["adam_m." + name] = {data, n};
  });
  visit_params(ck.adam.v, [&](const std::string& name, float* data, size_t n, bool) {
    slots["adam_v." + name] = {data, n};
  });

  const uint32_t count = read_u32(in);
  for (uint32_t i = 0; i < count; ++i) {
    const uint16_t name_len = read_u16(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    in.get();  // ndim marker, reserved
    const uint32_t n = read_u32(in);
    auto it = slots.find(name);
    if (it == slots.end() || it->second.second != n)
      throw std::runtime_error("checkpoint tensor mismatch: " + name);
    in.read(reinterpret_cast<char*>(it->second.first),
            static_cast<std::streamsize>(n * sizeof(float)));
    if (name.rfind("adam_m.", 0) == 0) ck.has_adam = true;
  }
  if (!in) throw std::runtime_error("checkpoint truncated: " + path);
  return ck;
}

template struct EncoderParams<float>;
template struct EncoderParams<double>;
template EncoderParams<float> zeros_like(const EncoderParams<float>&);
template EncoderParams<double> zeros_like(const EncoderParams<double>&);
template EncoderParams<float> init_params<float>(const ModelConfig&, HeadKind, uint64_t);
template EncoderParams<double> init_params<double>(const ModelConfig&, HeadKind, uint64_t);
template Mat<float> forward(const EncoderParams<float>&, std::span<const int32_t>,
                            std::span<const int32_t>, int, bool, uint64_t, int, AttentionProbe*);
template Mat<double> forward(const EncoderParams<double>&, std::span<const int32_t>,
                             std::span<const int32_t>, int, bool, uint64_t, int, AttentionProbe*);
template LossResult<float> loss_token(const Mat<float>&, std::span<const int32_t>);
template LossResult<double> loss_token(const Mat<double>&, std::span<const int32_t>);
template LossResult<float> loss_binary(const Mat<float>&, std::span<const int32_t>);
template LossResult<double> loss_binary(const Mat<double>&, std::span<const int32_t>);
template StepResult<float> forward_backward(const EncoderParams<float>&, std::span<const int32_t>,
                                            std::span<const int32_t>, std::span<const int32_t>,
                                            int, bool, uint64_t, EncoderParams<float>&, int,
                                            Mat<float>*);
template StepResult<double> forward_backward(const EncoderParams<double>&,
                                             std::span<const int32_t>, std::span<const int32_t>,
                                             std::span<const int32_t>, int, bool, uint64_t,
                                             EncoderParams<double>&, int, Mat<double>*);
template EncoderParams<float> backward(const EncoderParams<float>&, std::span<const int32_t>,
                                       std::span<const int32_t>, std::span<const int32_t>, int);
template EncoderParams<double> backward(const EncoderParams<double>&, std::span<const int32_t>,
                                        std::span<const int32_t>, std::span<const int32_t>, int);
template void adam_step(EncoderParams<float>&, const EncoderParams<float>&, AdamState<float>&,
                        int64_t, double, const AdamConfig&);
template void adam_step(EncoderParams<double>&, const EncoderParams<double>&, AdamState<double>&,
                        int64_t, double, const AdamConfig&);

}  // namespace ctok
