#include "ctok/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

namespace ctok {

namespace {

const char* kSpecialNames[kNumSpecials] = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};

void for_each_line(const std::string& path, IngestStats* stats,
                   const std::function<void(const std::string&)>& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open corpus file: " + path);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (stats) ++stats->lines;
    if (!valid_utf8(line)) {
      if (stats) ++stats->invalid_utf8;
      continue;
    }
    fn(line);
  }
}

struct Counter {
  std::unordered_map<std::string, int64_t> freq;
  std::vector<std::string> order;  // first-occurrence order

  void add(const std::string& tok) {
    auto [it, fresh] = freq.try_emplace(tok, 0);
    if (fresh) order.push_back(tok);
    ++it->second;
  }

  Vocabulary finish(int max_size, int min_freq) const {
    std::vector<std::pair<std::string, int64_t>> ranked;
    ranked.reserve(order.size());
    std::unordered_map<std::string, size_t> first_seen;
    first_seen.reserve(order.size());
    for (size_t i = 0; i < order.size(); ++i) first_seen[order[i]] = i;
    for (const auto& tok : order) {
      const int64_t f = freq.at(tok);
      if (f >= min_freq) ranked.emplace_back(tok, f);
    }
    std::stable_sort(ranked.begin(), ranked.end(), [&](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return first_seen.at(a.first) < first_seen.at(b.first);
    });

    Vocabulary vocab;
    for (const char* name : kSpecialNames) vocab.tokens.emplace_back(name);
    const size_t budget = static_cast<size_t>(max_size) - kNumSpecials;
    for (const auto& [tok, f] : ranked) {
      if (vocab.tokens.size() - kNumSpecials >= budget) break;
      vocab.tokens.push_back(tok);
    }
    for (size_t i = 0; i < vocab.tokens.size(); ++i)
      vocab.ids.emplace(vocab.tokens[i], static_cast<int32_t>(i));
    return vocab;
  }
};

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) {
        out.push_back(std::move(cur));
        cur.clear();
      }
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

bool valid_utf8(std::string_view s) {
  size_t i = 0;
  const auto n = s.size();
  while (i < n) {
    const auto b0 = static_cast<unsigned char>(s[i]);
    size_t len;
    uint32_t cp;
    if (b0 < 0x80) {
      ++i;
      continue;
    } else if ((b0 & 0xe0) == 0xc0) {
      len = 2;
      cp = b0 & 0x1f;
    } else if ((b0 & 0xf0) == 0xe0) {
      len = 3;
      cp = b0 & 0x0f;
    } else if ((b0 & 0xf8) == 0xf0) {
      len = 4;
      cp = b0 & 0x07;
    } else {
      return false;
    }
    if (i + len > n) return false;
    for (size_t k = 1; k < len; ++k) {
      const auto bk = static_cast<unsigned char>(s[i + k]);
      if ((bk & 0xc0) != 0x80) return false;
      cp = (cp << 6) | (bk & 0x3f);
    }
    if (len == 2 && cp < 0x80) return false;  // overlong
    if (len == 3 && cp < 0x800) return false;
    if (len == 4 && cp < 0x10000) return false;
    if (cp > 0x10ffff || (cp >= 0xd800 && cp <= 0xdfff)) return false;
    i += len;
  }
  return true;
}

Vocabulary build_vocab(const std::vector<std::string>& texts, int max_size, int min_freq) {
  if (max_size <= kNumSpecials) throw std::invalid_argument("max_size must exceed 5");
  if (min_freq < 1) throw std::invalid_argument("min_freq must be >= 1");
  if (texts.empty()) throw std::runtime_error("empty corpus");
  Counter counter;
  for (const auto& text : texts)
    for (auto& tok : tokenize(text)) counter.add(tok);
  return counter.finish(max_size, min_freq);
}

Vocabulary build_vocab_from_files(const std::vector<std::string>& paths, int max_size,
                                  int min_freq, IngestStats* stats) {
  if (max_size <= kNumSpecials) throw std::invalid_argument("max_size must exceed 5");
  if (min_freq < 1) throw std::invalid_argument("min_freq must be >= 1");
  Counter counter;
  uint64_t seen = 0;
  for (const auto& path : paths) {
    for_each_line(path, stats, [&](const std::string& line) {
      ++seen;
      for (auto& tok : tokenize(line)) counter.add(tok);
    });
  }
  if (seen == 0) throw std::runtime_error("empty corpus");
  return counter.finish(max_size, min_freq);
}

TokenSequence encode(const Vocabulary& vocab, std::string_view text, int max_len) {
  if (max_len < 3) throw std::invalid_argument("max_len must be >= 3");
  TokenSequence seq;
  seq.ids.reserve(max_len);
  seq.ids.push_back(kClsId);
  for (const auto& tok : tokenize(text)) {
    if (static_cast<int>(seq.ids.size()) >= max_len - 1) break;
    seq.ids.push_back(vocab.lookup(tok));
  }
  seq.ids.push_back(kSepId);
  seq.attention_len = static_cast<int32_t>(seq.ids.size());
  seq.ids.resize(max_len, kPadId);
  return seq;
}

std::vector<std::string> decode(const Vocabulary& vocab, const TokenSequence& seq) {
  std::vector<std::string> out;
  for (int32_t i = 0; i < seq.attention_len; ++i) {
    const int32_t id = seq.ids[i];
    if (id == kClsId || id == kSepId || id == kPadId) continue;
    out.push_back(vocab.tokens.at(id));
  }
  return out;
}

void ingest_corpus_stream(const std::vector<std::string>& paths, const Vocabulary& vocab,
                          int max_len, const std::function<void(TokenSequence&&)>& sink,
                          IngestStats* stats) {
  for (const auto& path : paths) {
    for_each_line(path, stats, [&](const std::string& line) {
      if (tokenize(line).empty()) {
        if (stats) ++stats->blank;
        return;
      }
      sink(encode(vocab, line, max_len));
    });
  }
}

std::vector<TokenSequence> ingest_corpus(const std::vector<std::string>& paths,
                                         const Vocabulary& vocab, int max_len,
                                         IngestStats* stats) {
  std::vector<TokenSequence> out;
  ingest_corpus_stream(paths, vocab, max_len,
                       [&](TokenSequence&& seq) { out.push_back(std::move(seq)); }, stats);
  return out;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write vocabulary: " + path);
  for (const auto& tok : tokens) out << tok << '\n';
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open vocabulary: " + path);
  Vocabulary vocab;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    vocab.tokens.push_back(line);
  }
  if (vocab.size() < kNumSpecials) throw std::runtime_error("vocabulary file truncated: " + path);
  for (int i = 0; i < kNumSpecials; ++i)
    if (vocab.tokens[i] != kSpecialNames[i])
      throw std::runtime_error("vocabulary is missing reserved tokens: " + path);
  for (size_t i = 0; i < vocab.tokens.size(); ++i)
    vocab.ids.emplace(vocab.tokens[i], static_cast<int32_t>(i));
  return vocab;
}

}  // namespace ctok
