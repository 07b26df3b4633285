#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ctok/corpus.hpp"
#include "ctok/embedding.hpp"

namespace ctok {

/// Partition of the regular vocabulary; reserved tokens carry assignment -1
/// and never appear in a members list.
struct Clustering {
  int32_t n = 0;
  std::vector<int32_t> assignment;             // per token id, -1 for specials
  Mat<float> centroids;                        // n x dim (empty after load())
  std::vector<std::vector<int32_t>> members;   // cluster id -> regular token ids

  void save(const std::string& path) const;
  static Clustering load(const std::string& path);
};

struct KmeansConfig {
  int n = 100;
  int restarts = 20;
  int max_iter = 300;
  double tol = 1e-4;  // relative inertia change
  uint64_t seed = 1;
  int workers = 1;
};

struct KmeansResult {
  Clustering clustering;
  double inertia = 0.0;
  std::vector<double> restart_inertias;              // final inertia per restart
  std::vector<std::vector<double>> restart_traces;   // per-iteration inertia per restart
};

// Lloyd's algorithm from kmeans++ seeds, `restarts` independent runs, keeping
// the run with minimum inertia (ties broken by restart index). A cluster that
// empties during iteration is repaired by pulling in the point farthest from
// its current centroid.
KmeansResult kmeans(const EmbeddingTable& table, const Vocabulary& vocab,
                    const KmeansConfig& cfg);

// Sum of squared L2 distances from each regular token to its assigned centroid.
double inertia(const EmbeddingTable& table, const Clustering& clustering);

// Rebuilds centroids from the table (used after load(), which only persists
// assignments).
void recompute_centroids(const EmbeddingTable& table, Clustering& clustering);

}  // namespace ctok
