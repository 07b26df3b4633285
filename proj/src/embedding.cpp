#include "ctok/embedding.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "ctok/rng.hpp"

namespace ctok {

namespace {

// Walker alias sampler for the unigram^0.75 negative distribution.
struct AliasTable {
  std::vector<double> prob;
  std::vector<int32_t> alias;

  explicit AliasTable(const std::vector<double>& weights) {
    const int n = static_cast<int>(weights.size());
    prob.assign(n, 0.0);
    alias.assign(n, 0);
    double total = 0;
    for (double w : weights) total += w;
    std::vector<double> scaled(n);
    std::vector<int32_t> small, large;
    for (int i = 0; i < n; ++i) {
      scaled[i] = weights[i] * n / total;
      (scaled[i] < 1.0 ? small : large).push_back(i);
    }
    while (!small.empty() && !large.empty()) {
      const int32_t s = small.back(); small.pop_back();
      const int32_t l = large.back(); large.pop_back();
      prob[s] = scaled[s];
      alias[s] = l;
      scaled[l] = (scaled[l] + scaled[s]) - 1.0;
      (scaled[l] < 1.0 ? small : large).push_back(l);
    }
    for (int32_t s : small) prob[s] = 1.0;
    for (int32_t l : large) prob[l] = 1.0;
  }

  int32_t sample(Rng& rng) const {
    const auto i = static_cast<int32_t>(rng.below(prob.size()));
    return rng.next_double() < prob[i] ? i : alias[i];
  }
};

inline float sigmoidf(float x) { return 1.0f / (1.0f + std::exp(-x)); }

}  // namespace

EmbeddingTable train_word2vec(const std::vector<TokenSequence>& corpus, const Vocabulary& vocab,
                              const Word2VecConfig& cfg, std::vector<double>* epoch_losses) {
  if (cfg.window < 1) throw std::invalid_argument("window must be >= 1");
  if (cfg.dim < 2) throw std::invalid_argument("dim must be >= 2");
  if (corpus.empty()) throw std::runtime_error("corpus too small for window");
  if (vocab.num_regular() < 1) throw std::runtime_error("vocabulary has no regular tokens");

  const int32_t v_size = vocab.size();
  const int dim = cfg.dim;

  // Sentences reduced to their regular-token streams; window slides over these.
  std::vector<std::vector<int32_t>> sentences;
  sentences.reserve(corpus.size());
  std::vector<int64_t> freq(v_size, 0);
  int64_t pair_capable = 0;
  for (const auto& seq : corpus) {
    std::vector<int32_t> s;
    for (int32_t i = 0; i < seq.attention_len; ++i) {
      const int32_t id = seq.ids[i];
      if (!is_special_id(id)) {
        s.push_back(id);
        ++freq[id];
      }
    }
    if (s.size() >= 2) ++pair_capable;
    if (!s.empty()) sentences.push_back(std::move(s));
  }
  if (pair_capable == 0) throw std::runtime_error("corpus too small for window");

  std::vector<double> noise(v_size, 0.0);
  for (int32_t id = kNumSpecials; id < v_size; ++id)
    noise[id] = std::pow(static_cast<double>(freq[id]), 0.75);
  AliasTable negatives(noise);

  EmbeddingTable table;
  table.dim = dim;
  table.vectors = Mat<float>(v_size, dim);
  Rng init_rng = Rng(cfg.seed).derive(0);
  // context vectors start at zero, as in the reference implementations
  Mat<float> ctx(v_size, dim);
  for (int32_t id = 0; id < v_size; ++id) {
    float* row = table.vectors.row(id);
    for (int d = 0; d < dim; ++d) row[d] = (init_rng.next_float() - 0.5f) / dim;
  }
  if (cfg.epochs == 0) return table;

  int64_t total_tokens = 0;
  for (const auto& s : sentences) total_tokens += static_cast<int64_t>(s.size());
  const int64_t train_budget = total_tokens * cfg.epochs;
  std::atomic<int64_t> processed{0};

  auto train_sentence = [&](const std::vector<int32_t>& s, Rng& rng, double& loss_sum,
                            int64_t& loss_terms, std::vector<float>& grad_center) {
    const int n = static_cast<int>(s.size());
    for (int i = 0; i < n; ++i) {
      const int64_t done = processed.fetch_add(1, std::memory_order_relaxed);
      const double frac = static_cast<double>(done) / static_cast<double>(train_budget);
      const float alpha = static_cast<float>(cfg.lr * std::max(1.0 - frac, 1e-4));
      const int32_t center = s[i];
      for (int off = -cfg.window; off <= cfg.window; ++off) {
        if (off == 0) continue;
        const int j = i + off;
        if (j < 0 || j >= n) continue;
        const int32_t context = s[j];
        float* v_in = table.vectors.row(center);
        std::memset(grad_center.data(), 0, sizeof(float) * dim);
        for (int k = 0; k <= cfg.negatives; ++k) {
          int32_t target;
          float label;
          if (k == 0) {
            target = context;
            label = 1.0f;
          } else {
            target = negatives.sample(rng);
            if (target == context) continue;
            label = 0.0f;
          }
          float* v_out = ctx.row(target);
          const float score = sigmoidf(dot(v_in, v_out, dim));
          const float g = alpha * (label - score);
          loss_sum += -std::log(std::max(label > 0.5f ? score : 1.0f - score, 1e-7f));
          ++loss_terms;
          for (int d = 0; d < dim; ++d) {
            grad_center[d] += g * v_out[d];
            v_out[d] += g * v_in[d];
          }
        }
        for (int d = 0; d < dim; ++d) v_in[d] += grad_center[d];
      }
    }
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double loss_sum = 0.0;
    int64_t loss_terms = 0;
    if (cfg.workers <= 1) {
      Rng rng = Rng(cfg.seed).derive(1000 + epoch);
      std::vector<float> scratch(dim);
      for (const auto& s : sentences) train_sentence(s, rng, loss_sum, loss_terms, scratch);
    } else {
      std::vector<double> sums(cfg.workers, 0.0);
      std::vector<int64_t> terms(cfg.workers, 0);
      std::vector<std::vector<float>> scratch(cfg.workers, std::vector<float>(dim));
      parallel_chunks(static_cast<int>(sentences.size()), cfg.workers,
                      [&](int t, int lo, int hi) {
                        Rng rng = Rng(cfg.seed).derive(1000 + epoch).derive(t);
                        // hogwild: rows are updated unsynchronized
                        for (int s = lo; s < hi; ++s)
                          train_sentence(sentences[s], rng, sums[t], terms[t], scratch[t]);
                      });
      for (int t = 0; t < cfg.workers; ++t) {
        loss_sum += sums[t];
        loss_terms += terms[t];
      }
    }
    if (epoch_losses)
      epoch_losses->push_back(loss_terms > 0 ? loss_sum / static_cast<double>(loss_terms) : 0.0);
  }
  return table;
}

double cosine(const EmbeddingTable& table, int32_t i, int32_t j) {
  if (i < 0 || j < 0 || i >= table.vectors.rows || j >= table.vectors.rows)
    throw std::out_of_range("token id outside embedding table");
  const float* a = table.vectors.row(i);
  const float* b = table.vectors.row(j);
  double ab = 0, aa = 0, bb = 0;
  for (int d = 0; d < table.dim; ++d) {
    ab += static_cast<double>(a[d]) * b[d];
    aa += static_cast<double>(a[d]) * a[d];
    bb += static_cast<double>(b[d]) * b[d];
  }
  if (aa == 0.0 || bb == 0.0) throw std::runtime_error("degenerate embedding");
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

void EmbeddingTable::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write embeddings: " + path);
  const uint32_t v = static_cast<uint32_t>(vectors.rows);
  const uint32_t d = static_cast<uint32_t>(dim);
  out.write(reinterpret_cast<const char*>(&v), 4);
  out.write(reinterpret_cast<const char*>(&d), 4);
  out.write(reinterpret_cast<const char*>(vectors.v.data()),
            static_cast<std::streamsize>(vectors.size() * sizeof(float)));
}

EmbeddingTable EmbeddingTable::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open embeddings: " + path);
  uint32_t v = 0, d = 0;
  in.read(reinterpret_cast<char*>(&v), 4);
  in.read(reinterpret_cast<char*>(&d), 4);
  if (!in) throw std::runtime_error("embeddings file truncated: " + path);
  EmbeddingTable table;
  table.dim = static_cast<int32_t>(d);
  table.vectors = Mat<float>(static_cast<int>(v), static_cast<int>(d));
  in.read(reinterpret_cast<char*>(table.vectors.v.data()),
          static_cast<std::streamsize>(table.vectors.size() * sizeof(float)));
  if (!in) throw std::runtime_error("embeddings file truncated: " + path);
  return table;
}

}  // namespace ctok
