#include "ctok/synthetic.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "ctok/rng.hpp"

namespace ctok {

std::vector<std::string> generate_synthetic_corpus(const SyntheticSpec& spec) {
  if (spec.sentences < 1 || spec.topics < 1 || spec.tokens_per_topic < 2)
    throw std::invalid_argument("synthetic corpus spec is degenerate");
  if (spec.min_len < 2 || spec.max_len < spec.min_len)
    throw std::invalid_argument("synthetic sentence lengths are inconsistent");

  // Zipf CDF over within-topic ranks.
  std::vector<double> cdf(spec.tokens_per_topic);
  double total = 0;
  for (int r = 0; r < spec.tokens_per_topic; ++r) {
    total += 1.0 / std::pow(static_cast<double>(r + 1), spec.zipf_exponent);
    cdf[r] = total;
  }
  for (auto& c : cdf) c /= total;

  Rng rng(spec.seed);
  auto zipf_rank = [&]() {
    const double u = rng.next_double();
    int lo = 0, hi = spec.tokens_per_topic - 1;
    while (lo < hi) {
      const int mid = (lo + hi) / 2;
      if (cdf[mid] < u) lo = mid + 1;
      else hi = mid;
    }
    return lo;
  };

  char buf[32];
  auto token = [&](int topic, int rank) {
    std::snprintf(buf, sizeof(buf), "t%02d_%03d", topic, rank);
    return std::string(buf);
  };

  std::vector<std::string> lines;
  lines.reserve(spec.sentences);
  std::string line;
  for (int s = 0; s < spec.sentences; ++s) {
    const int topic = static_cast<int>(rng.below(spec.topics));
    const int len = spec.min_len + static_cast<int>(rng.below(spec.max_len - spec.min_len + 1));
    line.clear();
    for (int i = 0; i < len; ++i) {
      int t = topic;
      if (spec.topics > 1 && rng.next_double() >= spec.topic_purity)
        t = static_cast<int>(rng.below(spec.topics));
      if (!line.empty()) line += ' ';
      line += token(t, zipf_rank());
    }
    lines.push_back(line);
  }
  return lines;
}

void write_corpus(const std::vector<std::string>& lines, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write corpus: " + path);
  for (const auto& line : lines) out << line << '\n';
}

}  // namespace ctok
