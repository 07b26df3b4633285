#include "ctok/feedback.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace ctok {

void update(FeedbackMatrix& f, std::span<const FeedbackEvent> events) {
  for (const auto& e : events) {
    if (e.src_cluster < 0 || e.src_cluster >= f.n || e.dst_cluster < 0 || e.dst_cluster >= f.n)
      throw std::out_of_range("feedback event cluster id out of range");
    f.at(e.src_cluster, e.dst_cluster) += e.detected ? 1 : -1;
  }
}

std::vector<double> transition_probs(const FeedbackMatrix& f, int32_t a, double gamma,
                                     HardnessOrientation orientation) {
  if (a < 0 || a >= f.n) throw std::out_of_range("source cluster id out of range");
  if (gamma <= 0) throw std::invalid_argument("gamma must be positive");
  const int n = f.n;
  const int64_t* row = f.counts.data() + static_cast<size_t>(a) * n;

  const auto [lo_it, hi_it] = std::minmax_element(row, row + n);
  if (*lo_it == *hi_it) return std::vector<double>(n, 1.0 / n);

  const double lo = static_cast<double>(*lo_it);
  const double span = static_cast<double>(*hi_it) - lo;
  std::vector<double> p(n);
  double peak = -1.0;
  for (int b = 0; b < n; ++b) {
    double m = (static_cast<double>(row[b]) - lo) / span;
    if (orientation == HardnessOrientation::kComplement) m = 1.0 - m;
    p[b] = gamma * m;
    peak = std::max(peak, p[b]);
  }
  double total = 0;
  for (int b = 0; b < n; ++b) {
    p[b] = std::exp(p[b] - peak);
    total += p[b];
  }
  for (int b = 0; b < n; ++b) p[b] /= total;
  return p;
}

Replacement sample_replacement(const FeedbackMatrix& f, const Clustering& clustering, int32_t w,
                               double gamma, Rng& rng, HardnessOrientation orientation) {
  if (w < 0 || w >= static_cast<int32_t>(clustering.assignment.size()))
    throw std::out_of_range("token id out of range");
  const int32_t a = clustering.assignment[w];
  if (a < 0) throw std::invalid_argument("token has no cluster assignment");
  if (clustering.n != f.n) throw std::invalid_argument("feedback matrix does not match clustering");

  const std::vector<double> p = transition_probs(f, a, gamma, orientation);
  const double u = rng.next_double();
  int32_t b = f.n - 1;
  double cum = 0;
  for (int32_t c = 0; c < f.n; ++c) {
    cum += p[c];
    if (u < cum) {
      b = c;
      break;
    }
  }

  const auto& members = clustering.members[b];
  for (int attempt = 0; attempt < 8; ++attempt) {
    const int32_t candidate = members[rng.below(members.size())];
    if (candidate != w) return {candidate, a, clustering.assignment[candidate]};
  }

  // every draw hit w itself (e.g. a singleton cluster): any regular token != w
  int64_t regular = 0;
  for (const auto& cluster : clustering.members) regular += static_cast<int64_t>(cluster.size());
  if (regular < 2) throw std::runtime_error("no replacement candidates besides the token itself");
  int64_t pick = static_cast<int64_t>(rng.below(static_cast<uint64_t>(regular - 1)));
  const int32_t token = static_cast<int32_t>(kNumSpecials + (pick >= w - kNumSpecials ? pick + 1 : pick));
  return {token, a, clustering.assignment[token]};
}

void FeedbackMatrix::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write feedback matrix: " + path);
  const uint32_t dim = static_cast<uint32_t>(n);
  out.write(reinterpret_cast<const char*>(&dim), 4);
  out.write(reinterpret_cast<const char*>(counts.data()),
            static_cast<std::streamsize>(counts.size() * sizeof(int64_t)));
}

FeedbackMatrix FeedbackMatrix::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open feedback matrix: " + path);
  uint32_t dim = 0;
  in.read(reinterpret_cast<char*>(&dim), 4);
  if (!in || dim == 0) throw std::runtime_error("feedback matrix file malformed: " + path);
  FeedbackMatrix f(static_cast<int32_t>(dim));
  in.read(reinterpret_cast<char*>(f.counts.data()),
          static_cast<std::streamsize>(f.counts.size() * sizeof(int64_t)));
  if (!in) throw std::runtime_error("feedback matrix file truncated: " + path);
  return f;
}

}  // namespace ctok
