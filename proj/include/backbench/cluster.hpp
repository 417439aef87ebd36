#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace backbench::cluster {

// Dense row-major N x D matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(data).subspan(r * cols, cols);
  }

  static Matrix from_rows(const std::vector<std::vector<double>>& rows);
};

double euclidean(std::span<const double> a, std::span<const double> b);

// PCA reducer. `projection` is D x target_dim with orthonormal columns,
// ordered by decreasing eigenvalue; each column's largest-magnitude entry
// is positive.
struct Reducer {
  std::size_t target_dim = 10;
  std::vector<double> mean;
  Matrix projection;
  std::vector<double> explained_variance_ratio;  // per kept component

  Matrix transform(const Matrix& x) const;
  double total_explained_variance() const;
};

struct PcaResult {
  Reducer reducer;
  Matrix reduced;
};

// Throws ConfigError when target_dim exceeds min(N, D) or N < 2.
PcaResult pca_fit_transform(const Matrix& x, std::size_t target_dim);

struct HdbscanConfig {
  std::size_t min_cluster_size = 10;
  // 0 means "same as min_cluster_size".
  std::size_t min_samples = 0;

  std::size_t effective_min_samples() const {
    return min_samples == 0 ? min_cluster_size : min_samples;
  }
  void validate() const;
};

// Distance to the k-th nearest neighbor, self excluded (brute force).
// Throws ConfigError when N <= k.
std::vector<double> core_distances(const Matrix& y, std::size_t min_samples);

struct Edge {
  std::size_t a = 0;  // a < b
  std::size_t b = 0;
  double weight = 0.0;
};

// Prim's MST over mutual reachability distances max(core_a, core_b, d(a,b)).
// Ties are broken by the lexicographic (min index, max index) edge order.
// Edges are returned sorted by (weight, a, b).
std::vector<Edge> mutual_reachability_mst(const Matrix& y, std::span<const double> core);

double total_weight(std::span<const Edge> edges);

// One row of the condensed tree: `child` is a point (< N) or a cluster
// node (>= N); lambda = 1 / distance at which it left `parent`.
struct CondensedEdge {
  std::size_t parent = 0;
  std::size_t child = 0;
  double lambda = 0.0;
  std::size_t child_size = 0;
};

struct ClusterAssignment {
  static constexpr int kNoise = -1;

  std::vector<int> labels;
  int num_clusters = 0;
  std::vector<double> stability;          // per output cluster
  std::vector<std::size_t> cluster_sizes; // per output cluster
  std::vector<CondensedEdge> condensed_tree;
  bool degenerate = false;  // all points identical

  std::size_t noise_count() const;
};

ClusterAssignment hdbscan(const Matrix& y, const HdbscanConfig& config);

// id, y1..yk, cluster
void write_embeddings_csv(const std::filesystem::path& path, std::span<const std::int64_t> ids,
                          const Matrix& y, std::span<const int> labels);

}  // namespace backbench::cluster
