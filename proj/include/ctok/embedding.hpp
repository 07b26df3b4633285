#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ctok/corpus.hpp"
#include "ctok/mat.hpp"

namespace ctok {

/// One row per vocabulary id, reserved tokens included (their rows keep the
/// seeded initialization and are excluded from training and clustering).
struct EmbeddingTable {
  int32_t dim = 0;
  Mat<float> vectors;  // |V| x dim

  void save(const std::string& path) const;
  static EmbeddingTable load(const std::string& path);
};

struct Word2VecConfig {
  int window = 2;
  int dim = 300;
  int epochs = 5;
  double lr = 0.025;     // linearly decayed over all epochs
  int negatives = 5;
  uint64_t seed = 1;
  int workers = 1;       // >1 is hogwild; determinism only holds at 1
};

// Skip-gram with negative sampling over the non-special token stream.
// Negative draws follow the unigram distribution raised to 0.75.
EmbeddingTable train_word2vec(const std::vector<TokenSequence>& corpus, const Vocabulary& vocab,
                              const Word2VecConfig& cfg,
                              std::vector<double>* epoch_losses = nullptr);

double cosine(const EmbeddingTable& table, int32_t i, int32_t j);

}  // namespace ctok
