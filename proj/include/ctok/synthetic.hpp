#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ctok {

/// Zipf-distributed tokens with planted co-occurrence structure: the lexicon
/// is split into topic groups, each sentence draws one topic, and most of its
/// tokens come from that topic's group. Word embeddings trained on such text
/// cluster by topic, which gives the cluster-aware sampler something real to
/// exploit.
struct SyntheticSpec {
  int sentences = 2000;
  int topics = 12;
  int tokens_per_topic = 50;
  int min_len = 16;
  int max_len = 32;
  double zipf_exponent = 1.05;
  double topic_purity = 0.9;  // probability a token comes from the sentence topic
  uint64_t seed = 1;
};

std::vector<std::string> generate_synthetic_corpus(const SyntheticSpec& spec);

void write_corpus(const std::vector<std::string>& lines, const std::string& path);

}  // namespace ctok
