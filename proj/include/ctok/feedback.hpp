#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ctok/clustering.hpp"
#include "ctok/rng.hpp"

namespace ctok {

/// n x n tally of discriminator outcomes per (source cluster, target cluster)
/// replacement direction: +1 when the replacement was detected, -1 when it
/// slipped through.
struct FeedbackMatrix {
  int32_t n = 0;
  std::vector<int64_t> counts;  // row-major

  FeedbackMatrix() = default;
  explicit FeedbackMatrix(int32_t clusters)
      : n(clusters), counts(static_cast<size_t>(clusters) * clusters, 0) {}

  int64_t& at(int32_t a, int32_t b) { return counts[static_cast<size_t>(a) * n + b]; }
  int64_t at(int32_t a, int32_t b) const { return counts[static_cast<size_t>(a) * n + b]; }

  void save(const std::string& path) const;
  static FeedbackMatrix load(const std::string& path);
};

struct FeedbackEvent {
  int32_t src_cluster = 0;
  int32_t dst_cluster = 0;
  bool detected = false;
};

// Order-independent batch update: +1 per detected event, -1 otherwise.
void update(FeedbackMatrix& f, std::span<const FeedbackEvent> events);

// Whether the sampler favors cluster pairs the discriminator fails on
// (complement of the normalized row) or succeeds on (the row directly).
enum class HardnessOrientation { kComplement, kDirect };

// Min-max normalizes row `a`, flips it per the orientation, then applies
// exp(gamma * x) / sum. A constant row yields the exact uniform vector.
std::vector<double> transition_probs(const FeedbackMatrix& f, int32_t a, double gamma = 2.0,
                                     HardnessOrientation orientation = HardnessOrientation::kComplement);

struct Replacement {
  int32_t token = 0;
  int32_t src_cluster = 0;
  int32_t dst_cluster = 0;
};

// Draws a target cluster from transition_probs, then a member uniformly.
// Draws equal to `w` are rejected up to 8 times before falling back to a
// uniform regular token != w. dst_cluster always names the cluster of the
// returned token.
Replacement sample_replacement(const FeedbackMatrix& f, const Clustering& clustering, int32_t w,
                               double gamma, Rng& rng,
                               HardnessOrientation orientation = HardnessOrientation::kComplement);

}  // namespace ctok
