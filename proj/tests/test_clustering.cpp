#include <doctest.h>
#include <fstream>

#include <filesystem>
#include <set>

#include "ctok/clustering.hpp"
#include "ctok/rng.hpp"

using namespace ctok;

namespace {

Vocabulary vocab_with(int regular) {
  std::string text;
  for (int i = 0; i < regular; ++i) text += "w" + std::to_string(i) + " ";
  return build_vocab({text}, regular + kNumSpecials, 1);
}

EmbeddingTable table_for(const Vocabulary& vocab, int dim) {
  EmbeddingTable t;
  t.dim = dim;
  t.vectors = Mat<float>(vocab.size(), dim);
  return t;
}

// brute-force inertia oracle, independent of the clustering module
double inertia_oracle(const EmbeddingTable& table, const Clustering& cl) {
  double total = 0;
  for (size_t id = kNumSpecials; id < cl.assignment.size(); ++id) {
    const int c = cl.assignment[id];
    for (int d = 0; d < table.dim; ++d) {
      const double diff = table.vectors(static_cast<int>(id), d) - cl.centroids(c, d);
      total += diff * diff;
    }
  }
  return total;
}

void check_clustering_invariants(const Clustering& cl, const EmbeddingTable& table) {
  std::set<int32_t> seen;
  for (int c = 0; c < cl.n; ++c) {
    CHECK(!cl.members[c].empty());
    for (int32_t id : cl.members[c]) {
      CHECK(cl.assignment[id] == c);
      CHECK(!is_special_id(id));
      CHECK(seen.insert(id).second);
    }
  }
  CHECK(seen.size() == cl.assignment.size() - kNumSpecials);
  // nearest-centroid property, ties to the lower cluster id
  for (size_t id = kNumSpecials; id < cl.assignment.size(); ++id) {
    double best = std::numeric_limits<double>::infinity();
    int best_c = -1;
    for (int c = 0; c < cl.n; ++c) {
      double d2 = 0;
      for (int d = 0; d < table.dim; ++d) {
        const double diff = table.vectors(static_cast<int>(id), d) - cl.centroids(c, d);
        d2 += diff * diff;
      }
      if (d2 < best) {
        best = d2;
        best_c = c;
      }
    }
    double assigned = 0;
    for (int d = 0; d < table.dim; ++d) {
      const double diff =
          table.vectors(static_cast<int>(id), d) - cl.centroids(cl.assignment[id], d);
      assigned += diff * diff;
    }
    CHECK(assigned == doctest::Approx(best).epsilon(1e-9));
  }
}

}  // namespace

TEST_CASE("kmeans separates two well-split groups exactly") {
  const Vocabulary vocab = vocab_with(8);
  EmbeddingTable table = table_for(vocab, 2);
  // group A around (0, 0), group B around (100, 100)
  for (int i = 0; i < 4; ++i) {
    table.vectors(kNumSpecials + i, 0) = static_cast<float>(i % 2);
    table.vectors(kNumSpecials + i, 1) = static_cast<float>(i / 2);
    table.vectors(kNumSpecials + 4 + i, 0) = 100.0f + static_cast<float>(i % 2);
    table.vectors(kNumSpecials + 4 + i, 1) = 100.0f + static_cast<float>(i / 2);
  }
  KmeansConfig cfg;
  cfg.n = 2;
  cfg.restarts = 5;
  cfg.seed = 3;
  const KmeansResult res = kmeans(table, vocab, cfg);
  const auto& cl = res.clustering;
  const int32_t first = cl.assignment[kNumSpecials];
  for (int i = 0; i < 4; ++i) {
    CHECK(cl.assignment[kNumSpecials + i] == first);
    CHECK(cl.assignment[kNumSpecials + 4 + i] == 1 - first);
  }
  // within-group scatter: 4 unit-square corners around centroid (0.5, 0.5)
  // contribute 4 * (0.25 + 0.25) per group
  CHECK(res.inertia == doctest::Approx(4.0).epsilon(1e-6));
  check_clustering_invariants(cl, table);
}

TEST_CASE("kmeans with one cluster per token reaches zero inertia") {
  const Vocabulary vocab = vocab_with(6);
  EmbeddingTable table = table_for(vocab, 3);
  Rng rng(7);
  for (int i = kNumSpecials; i < vocab.size(); ++i)
    for (int d = 0; d < 3; ++d) table.vectors(i, d) = static_cast<float>(rng.next_double() * 10);
  KmeansConfig cfg;
  cfg.n = 6;
  cfg.restarts = 3;
  const KmeansResult res = kmeans(table, vocab, cfg);
  CHECK(res.inertia == doctest::Approx(0.0));
  for (const auto& members : res.clustering.members) CHECK(members.size() == 1);
}

TEST_CASE("kmeans returns the minimum-inertia restart") {
  const Vocabulary vocab = vocab_with(50);
  EmbeddingTable table = table_for(vocab, 4);
  Rng rng(11);
  for (int i = kNumSpecials; i < vocab.size(); ++i)
    for (int d = 0; d < 4; ++d)
      table.vectors(i, d) = static_cast<float>(rng.normal() * 2.0 + (i % 5) * 6.0);
  KmeansConfig cfg;
  cfg.n = 5;
  cfg.restarts = 20;
  cfg.seed = 123;
  const KmeansResult res = kmeans(table, vocab, cfg);
  REQUIRE(res.restart_inertias.size() == 20);
  for (double in : res.restart_inertias) CHECK(res.inertia <= in + 1e-9);
  CHECK(res.inertia == doctest::Approx(*std::min_element(res.restart_inertias.begin(),
                                                         res.restart_inertias.end())));
  for (const auto& trace : res.restart_traces)
    for (size_t i = 1; i < trace.size(); ++i) CHECK(trace[i] <= trace[i - 1] + 1e-9);
  check_clustering_invariants(res.clustering, table);
  CHECK(inertia(table, res.clustering) == doctest::Approx(res.inertia).epsilon(1e-9));
}

TEST_CASE("inertia matches hand values and the brute-force oracle") {
  const Vocabulary vocab = vocab_with(2);
  EmbeddingTable table = table_for(vocab, 1);
  table.vectors(kNumSpecials, 0) = 0.0f;
  table.vectors(kNumSpecials + 1, 0) = 2.0f;

  Clustering cl;
  cl.n = 1;
  cl.assignment.assign(vocab.size(), -1);
  cl.assignment[kNumSpecials] = 0;
  cl.assignment[kNumSpecials + 1] = 0;
  cl.members = {{kNumSpecials, kNumSpecials + 1}};
  cl.centroids = Mat<float>(1, 1);
  cl.centroids(0, 0) = 1.0f;
  CHECK(inertia(table, cl) == doctest::Approx(2.0));  // 1 + 1

  cl.centroids(0, 0) = 0.0f;
  table.vectors(kNumSpecials + 1, 0) = 0.0f;
  CHECK(inertia(table, cl) == doctest::Approx(0.0));

  // random instance vs oracle
  const Vocabulary vocab2 = vocab_with(30);
  EmbeddingTable table2 = table_for(vocab2, 5);
  Rng rng(17);
  for (int i = kNumSpecials; i < vocab2.size(); ++i)
    for (int d = 0; d < 5; ++d) table2.vectors(i, d) = static_cast<float>(rng.normal());
  KmeansConfig cfg;
  cfg.n = 4;
  cfg.restarts = 4;
  const KmeansResult res = kmeans(table2, vocab2, cfg);
  CHECK(inertia(table2, res.clustering) == doctest::Approx(inertia_oracle(table2, res.clustering)));
}

TEST_CASE("kmeans rejects more clusters than tokens") {
  const Vocabulary vocab = vocab_with(3);
  EmbeddingTable table = table_for(vocab, 2);
  KmeansConfig cfg;
  cfg.n = 4;
  CHECK_THROWS_WITH_AS(kmeans(table, vocab, cfg), "more clusters than tokens",
                       std::runtime_error);
}

TEST_CASE("inertia rejects a dimension mismatch") {
  const Vocabulary vocab = vocab_with(2);
  EmbeddingTable table = table_for(vocab, 3);
  Clustering cl;
  cl.n = 1;
  cl.assignment.assign(vocab.size(), -1);
  cl.centroids = Mat<float>(1, 2);
  CHECK_THROWS_AS(inertia(table, cl), std::invalid_argument);
}

TEST_CASE("clustering file stores one line per token id with -1 for reserved ids") {
  const Vocabulary vocab = vocab_with(6);
  EmbeddingTable table = table_for(vocab, 2);
  Rng rng(5);
  for (int i = kNumSpecials; i < vocab.size(); ++i)
    for (int d = 0; d < 2; ++d) table.vectors(i, d) = static_cast<float>(rng.normal());
  KmeansConfig cfg;
  cfg.n = 2;
  cfg.restarts = 2;
  const KmeansResult res = kmeans(table, vocab, cfg);

  const auto path = (std::filesystem::temp_directory_path() / "ctok_cluster_test.txt").string();
  res.clustering.save(path);
  const Clustering loaded = Clustering::load(path);
  CHECK(loaded.n == res.clustering.n);
  CHECK(loaded.assignment == res.clustering.assignment);
  CHECK(loaded.members == res.clustering.members);

  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "-1");
}

TEST_CASE("clustering load rejects files with empty clusters") {
  const auto path =
      (std::filesystem::temp_directory_path() / "ctok_cluster_gap.txt").string();
  std::ofstream out(path);
  // cluster 1 has no members even though ids reach 2
  out << "-1\n-1\n-1\n-1\n-1\n0\n2\n2\n";
  out.close();
  CHECK_THROWS_AS(Clustering::load(path), std::runtime_error);
}
