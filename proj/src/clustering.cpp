#include "ctok/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "ctok/rng.hpp"

namespace ctok {

namespace {

double sq_dist(const float* a, const float* b, int dim) {
  double acc = 0;
  for (int d = 0; d < dim; ++d) {
    const double diff = static_cast<double>(a[d]) - static_cast<double>(b[d]);
    acc += diff * diff;
  }
  return acc;
}

struct LloydRun {
  std::vector<int32_t> assign;  // per point
  Mat<float> centroids;
  double inertia = 0.0;
  std::vector<double> trace;
};

// points: row-major point matrix (one row per regular token).
LloydRun lloyd(const Mat<float>& points, int n, int max_iter, double tol, Rng rng) {
  const int m = points.rows, dim = points.cols;
  LloydRun run;
  run.centroids = Mat<float>(n, dim);
  run.assign.assign(m, -1);

  // kmeans++ seeding
  std::vector<double> d2(m, std::numeric_limits<double>::infinity());
  {
    const int first = static_cast<int>(rng.below(m));
    std::copy_n(points.row(first), dim, run.centroids.row(0));
    for (int c = 1; c < n; ++c) {
      double total = 0;
      for (int i = 0; i < m; ++i) {
        d2[i] = std::min(d2[i], sq_dist(points.row(i), run.centroids.row(c - 1), dim));
        total += d2[i];
      }
      int chosen = m - 1;
      if (total > 0) {
        const double target = rng.next_double() * total;
        double cum = 0;
        for (int i = 0; i < m; ++i) {
          cum += d2[i];
          if (cum >= target) {
            chosen = i;
            break;
          }
        }
      } else {
        chosen = static_cast<int>(rng.below(m));  // all points coincide
      }
      std::copy_n(points.row(chosen), dim, run.centroids.row(c));
    }
  }

  std::vector<int32_t> prev_assign;
  std::vector<int> counts(n, 0);
  double prev_inertia = std::numeric_limits<double>::infinity();
  std::vector<double> point_dist(m, 0.0);

  auto assign_nearest = [&]() {
    std::fill(counts.begin(), counts.end(), 0);
    for (int i = 0; i < m; ++i) {
      double best = std::numeric_limits<double>::infinity();
      int32_t best_c = 0;
      for (int c = 0; c < n; ++c) {
        const double d = sq_dist(points.row(i), run.centroids.row(c), dim);
        if (d < best) {
          best = d;
          best_c = c;  // strict < keeps ties on the lower cluster id
        }
      }
      run.assign[i] = best_c;
      point_dist[i] = best;
      ++counts[best_c];
    }
  };

  auto repair_empty = [&]() {
    bool repaired = false;
    for (int c = 0; c < n; ++c) {
      if (counts[c] > 0) continue;
      int far = -1;
      double far_d = -1.0;
      for (int i = 0; i < m; ++i) {
        if (counts[run.assign[i]] <= 1) continue;  // do not empty another cluster
        if (point_dist[i] > far_d) {
          far_d = point_dist[i];
          far = i;
        }
      }
      if (far < 0) continue;
      --counts[run.assign[far]];
      run.assign[far] = c;
      ++counts[c];
      point_dist[far] = 0.0;  // becomes its own centroid after recentering
      repaired = true;
    }
    return repaired;
  };

  auto recenter = [&]() {
    run.centroids.zero();
    for (int i = 0; i < m; ++i)
      axpy(1.0f, points.row(i), run.centroids.row(run.assign[i]), dim);
    for (int c = 0; c < n; ++c) {
      float* row = run.centroids.row(c);
      const float inv = 1.0f / static_cast<float>(counts[c]);
      for (int d = 0; d < dim; ++d) row[d] *= inv;
    }
  };

  auto current_inertia = [&]() {
    double total = 0;
    for (int i = 0; i < m; ++i)
      total += sq_dist(points.row(i), run.centroids.row(run.assign[i]), dim);
    return total;
  };

  for (int iter = 0; iter < max_iter; ++iter) {
    assign_nearest();
    const bool repaired = repair_empty();
    if (!repaired && iter > 0 && run.assign == prev_assign) {
      // converged: recentering would not move anything
      run.inertia = prev_inertia;
      return run;
    }
    prev_assign = run.assign;
    recenter();
    const double in = current_inertia();
    run.trace.push_back(in);
    const bool settled = !repaired && prev_inertia < std::numeric_limits<double>::infinity() &&
                         std::abs(prev_inertia - in) <= tol * std::max(prev_inertia, 1e-300);
    prev_inertia = in;
    if (settled) break;
  }

  // Final assignment pass restores the nearest-centroid property after the
  // last recentering. If it empties a cluster, repair and keep the result.
  assign_nearest();
  if (repair_empty()) {
    recenter();
    assign_nearest();
    repair_empty();
  }
  run.inertia = current_inertia();
  return run;
}

}  // namespace

KmeansResult kmeans(const EmbeddingTable& table, const Vocabulary& vocab,
                    const KmeansConfig& cfg) {
  const int m = vocab.num_regular();
  if (cfg.n > m) throw std::runtime_error("more clusters than tokens");
  if (cfg.n < 1 || cfg.restarts < 1) throw std::invalid_argument("n and restarts must be >= 1");
  if (table.vectors.rows != vocab.size())
    throw std::invalid_argument("embedding table does not match vocabulary");

  const int dim = table.dim;
  Mat<float> points(m, dim);
  for (int i = 0; i < m; ++i)
    std::copy_n(table.vectors.row(kNumSpecials + i), dim, points.row(i));

  std::vector<LloydRun> runs(cfg.restarts);
  Rng base(cfg.seed);
  parallel_chunks(cfg.restarts, cfg.workers, [&](int, int lo, int hi) {
    for (int r = lo; r < hi; ++r)
      runs[r] = lloyd(points, cfg.n, cfg.max_iter, cfg.tol, base.derive(r));
  });

  int best = 0;
  for (int r = 1; r < cfg.restarts; ++r)
    if (runs[r].inertia < runs[best].inertia) best = r;

  KmeansResult result;
  result.inertia = runs[best].inertia;
  for (auto& run : runs) {
    result.restart_inertias.push_back(run.inertia);
    result.restart_traces.push_back(std::move(run.trace));
  }

  Clustering& cl = result.clustering;
  cl.n = cfg.n;
  cl.centroids = std::move(runs[best].centroids);
  cl.assignment.assign(vocab.size(), -1);
  cl.members.assign(cfg.n, {});
  for (int i = 0; i < m; ++i) {
    const int32_t token = kNumSpecials + i;
    const int32_t c = runs[best].assign[i];
    cl.assignment[token] = c;
    cl.members[c].push_back(token);
  }
  return result;
}

double inertia(const EmbeddingTable& table, const Clustering& clustering) {
  if (clustering.centroids.cols != table.dim)
    throw std::invalid_argument("centroid dimension does not match embedding table");
  if (static_cast<int>(clustering.assignment.size()) != table.vectors.rows)
    throw std::invalid_argument("assignment length does not match embedding table");
  double total = 0;
  for (size_t id = 0; id < clustering.assignment.size(); ++id) {
    const int32_t c = clustering.assignment[id];
    if (c < 0) continue;
    total += sq_dist(table.vectors.row(static_cast<int>(id)), clustering.centroids.row(c),
                     table.dim);
  }
  return total;
}

void recompute_centroids(const EmbeddingTable& table, Clustering& clustering) {
  clustering.centroids = Mat<float>(clustering.n, table.dim);
  for (int c = 0; c < clustering.n; ++c) {
    float* row = clustering.centroids.row(c);
    for (int32_t token : clustering.members[c]) axpy(1.0f, table.vectors.row(token), row, table.dim);
    if (!clustering.members[c].empty()) {
      const float inv = 1.0f / static_cast<float>(clustering.members[c].size());
      for (int d = 0; d < table.dim; ++d) row[d] *= inv;
    }
  }
}

void Clustering::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write clustering: " + path);
  for (const int32_t c : assignment) out << c << '\n';
}

Clustering Clustering::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open clustering: " + path);
  Clustering cl;
  std::string line;
  int32_t max_cluster = -1;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const int32_t c = static_cast<int32_t>(std::stol(line));
    cl.assignment.push_back(c);
    max_cluster = std::max(max_cluster, c);
  }
  if (cl.assignment.size() < static_cast<size_t>(kNumSpecials) || max_cluster < 0)
    throw std::runtime_error("clustering file is empty or malformed: " + path);
  cl.n = max_cluster + 1;
  cl.members.assign(cl.n, {});
  for (size_t id = 0; id < cl.assignment.size(); ++id) {
    const int32_t c = cl.assignment[id];
    if (static_cast<int32_t>(id) < kNumSpecials) {
      if (c != -1) throw std::runtime_error("clustering assigns a reserved token: " + path);
      continue;
    }
    if (c < 0) throw std::runtime_error("regular token without cluster: " + path);
    cl.members[c].push_back(static_cast<int32_t>(id));
  }
  for (const auto& members : cl.members)
    if (members.empty()) throw std::runtime_error("clustering has an empty cluster: " + path);
  return cl;
}

}  // namespace ctok
