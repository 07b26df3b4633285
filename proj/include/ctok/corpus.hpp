#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace ctok {

constexpr int32_t kPadId = 0;
constexpr int32_t kUnkId = 1;
constexpr int32_t kClsId = 2;
constexpr int32_t kSepId = 3;
constexpr int32_t kMaskId = 4;
constexpr int32_t kNumSpecials = 5;

inline bool is_special_id(int32_t id) { return id >= 0 && id < kNumSpecials; }

/// Frequency-ranked vocabulary. Ids are dense; the five reserved tokens
/// always occupy ids 0..4.
struct Vocabulary {
  std::vector<std::string> tokens;
  std::unordered_map<std::string, int32_t> ids;

  int32_t size() const { return static_cast<int32_t>(tokens.size()); }
  int32_t num_regular() const { return size() - kNumSpecials; }

  // UNK for out-of-vocabulary strings.
  int32_t lookup(std::string_view tok) const {
    auto it = ids.find(std::string(tok));
    return it == ids.end() ? kUnkId : it->second;
  }

  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);
};

/// Fixed-length encoded example: ids[0..attention_len) are real tokens
/// ([CLS] ... [SEP]), the tail is [PAD].
struct TokenSequence {
  std::vector<int32_t> ids;
  int32_t attention_len = 0;
};

struct IngestStats {
  uint64_t lines = 0;
  uint64_t blank = 0;
  uint64_t invalid_utf8 = 0;
};

// Lowercased whitespace tokenization.
std::vector<std::string> tokenize(std::string_view text);

bool valid_utf8(std::string_view s);

Vocabulary build_vocab(const std::vector<std::string>& texts, int max_size, int min_freq);
Vocabulary build_vocab_from_files(const std::vector<std::string>& paths, int max_size,
                                  int min_freq, IngestStats* stats = nullptr);

TokenSequence encode(const Vocabulary& vocab, std::string_view text, int max_len);

// Reconstructs the token strings of the encoded payload ([CLS]/[SEP]/[PAD]
// stripped, [UNK] kept as its literal).
std::vector<std::string> decode(const Vocabulary& vocab, const TokenSequence& seq);

// Streams one TokenSequence per non-blank line, in file order. Lines that are
// not valid UTF-8 are skipped and counted.
void ingest_corpus_stream(const std::vector<std::string>& paths, const Vocabulary& vocab,
                          int max_len, const std::function<void(TokenSequence&&)>& sink,
                          IngestStats* stats = nullptr);

std::vector<TokenSequence> ingest_corpus(const std::vector<std::string>& paths,
                                         const Vocabulary& vocab, int max_len,
                                         IngestStats* stats = nullptr);

}  // namespace ctok
