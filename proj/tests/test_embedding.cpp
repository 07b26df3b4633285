#include <doctest.h>

#include <fstream>
#include <cmath>

#include <cstring>
#include <filesystem>

#include "ctok/embedding.hpp"

using namespace ctok;

namespace {

// tokens "aa"/"bb" always co-occur; "cc"/"dd" live in disjoint contexts
struct CoocFixture {
  Vocabulary vocab;
  std::vector<TokenSequence> corpus;

  CoocFixture() {
    std::vector<std::string> texts;
    for (int i = 0; i < 60; ++i) {
      texts.push_back("aa bb aa bb");
      texts.push_back("cc dd cc dd");
    }
    vocab = build_vocab(texts, 16, 1);
    for (const auto& t : texts) corpus.push_back(encode(vocab, t, 8));
  }
};

}  // namespace

TEST_CASE("word2vec pulls co-occurring tokens together") {
  CoocFixture fx;
  Word2VecConfig cfg;
  cfg.dim = 16;
  cfg.epochs = 8;
  cfg.seed = 5;
  const EmbeddingTable table = train_word2vec(fx.corpus, fx.vocab, cfg);
  const int32_t aa = fx.vocab.lookup("aa"), bb = fx.vocab.lookup("bb");
  const int32_t cc = fx.vocab.lookup("cc");
  CHECK(cosine(table, aa, bb) > cosine(table, aa, cc));
}

TEST_CASE("word2vec default dimensionality is 300") {
  CoocFixture fx;
  Word2VecConfig cfg;
  cfg.epochs = 1;
  const EmbeddingTable table = train_word2vec(fx.corpus, fx.vocab, cfg);
  CHECK(table.dim == 300);
  CHECK(table.vectors.cols == 300);
  CHECK(table.vectors.rows == fx.vocab.size());
  for (float v : table.vectors.v) CHECK(std::isfinite(v));
}

TEST_CASE("word2vec with zero epochs returns the seeded initialization") {
  CoocFixture fx;
  Word2VecConfig cfg;
  cfg.dim = 12;
  cfg.seed = 11;
  cfg.epochs = 0;
  const EmbeddingTable init = train_word2vec(fx.corpus, fx.vocab, cfg);
  cfg.epochs = 3;
  const EmbeddingTable trained = train_word2vec(fx.corpus, fx.vocab, cfg);

  // reserved rows never train, so they still equal the initialization
  for (int id = 0; id < kNumSpecials; ++id)
    for (int d = 0; d < cfg.dim; ++d) CHECK(trained.vectors(id, d) == init.vectors(id, d));
  // regular rows moved
  bool moved = false;
  for (int d = 0; d < cfg.dim; ++d)
    moved |= trained.vectors(kNumSpecials, d) != init.vectors(kNumSpecials, d);
  CHECK(moved);
}

TEST_CASE("word2vec epoch loss is non-increasing early in training") {
  CoocFixture fx;
  Word2VecConfig cfg;
  cfg.dim = 16;
  cfg.epochs = 3;
  cfg.seed = 2;
  std::vector<double> losses;
  train_word2vec(fx.corpus, fx.vocab, cfg, &losses);
  REQUIRE(losses.size() == 3);
  CHECK(losses[1] <= losses[0]);
  CHECK(losses[2] <= losses[1]);
}

TEST_CASE("word2vec is deterministic with one worker") {
  CoocFixture fx;
  Word2VecConfig cfg;
  cfg.dim = 8;
  cfg.epochs = 2;
  cfg.seed = 42;
  const EmbeddingTable a = train_word2vec(fx.corpus, fx.vocab, cfg);
  const EmbeddingTable b = train_word2vec(fx.corpus, fx.vocab, cfg);
  CHECK(a.vectors.v == b.vectors.v);
}

TEST_CASE("word2vec rejects a corpus with no context pairs") {
  Vocabulary vocab = build_vocab({"a b"}, 10, 1);
  std::vector<TokenSequence> singles = {encode(vocab, "a", 8), encode(vocab, "b", 8)};
  Word2VecConfig cfg;
  CHECK_THROWS_WITH_AS(train_word2vec(singles, vocab, cfg), "corpus too small for window",
                       std::runtime_error);
}

TEST_CASE("cosine handles identity, orthogonality, opposition and degenerate rows") {
  EmbeddingTable table;
  table.dim = 3;
  table.vectors = Mat<float>(4, 3);
  table.vectors(0, 0) = 2.0f;                       // e_x
  table.vectors(1, 1) = 5.0f;                       // e_y
  table.vectors(2, 0) = -2.0f;                      // -e_x
  CHECK(cosine(table, 0, 0) == doctest::Approx(1.0));
  CHECK(cosine(table, 0, 1) == doctest::Approx(0.0));
  CHECK(cosine(table, 0, 2) == doctest::Approx(-1.0));
  CHECK_THROWS_WITH_AS(cosine(table, 0, 3), "degenerate embedding", std::runtime_error);
}

TEST_CASE("embedding table binary format round-trips") {
  EmbeddingTable table;
  table.dim = 2;
  table.vectors = Mat<float>(6, 2);
  for (size_t i = 0; i < table.vectors.size(); ++i)
    table.vectors.v[i] = static_cast<float>(i) * 0.25f - 0.6f;

  const auto path =
      (std::filesystem::temp_directory_path() / "ctok_embed_test.bin").string();
  table.save(path);
  const EmbeddingTable loaded = EmbeddingTable::load(path);
  CHECK(loaded.dim == 2);
  CHECK(loaded.vectors.rows == 6);
  CHECK(loaded.vectors.v == table.vectors.v);

  // header is |V| then dim, little-endian u32
  std::ifstream in(path, std::ios::binary);
  uint32_t v = 0, d = 0;
  in.read(reinterpret_cast<char*>(&v), 4);
  in.read(reinterpret_cast<char*>(&d), 4);
  CHECK(v == 6);
  CHECK(d == 2);
}
