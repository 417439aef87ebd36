#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "backbench/cluster.hpp"
#include "backbench/error.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace backbench;
using cluster::Matrix;

namespace {

oracle::Dense to_dense(const Matrix& m) {
  oracle::Dense d(m.rows);
  for (std::size_t r = 0; r < m.rows; ++r) d[r].assign(m.row(r).begin(), m.row(r).end());
  return d;
}

Matrix random_points(std::mt19937_64& gen, std::size_t n, std::size_t dim) {
  std::uniform_real_distribution<double> u(0.0, 10.0);
  Matrix m(n, dim);
  for (auto& v : m.data) v = u(gen);
  return m;
}

Matrix two_blobs(std::uint64_t seed, std::vector<int>* truth = nullptr) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> noise(0.0, 0.05);
  std::vector<std::vector<double>> rows;
  for (int blob = 0; blob < 2; ++blob)
    for (int i = 0; i < 50; ++i) {
      rows.push_back({blob * 10.0 + noise(gen), noise(gen)});
      if (truth) truth->push_back(blob);
    }
  return Matrix::from_rows(rows);
}

Matrix permute_rows(const Matrix& m, const std::vector<std::size_t>& perm) {
  Matrix out(m.rows, m.cols);
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t c = 0; c < m.cols; ++c) out(i, c) = m(perm[i], c);
  return out;
}

// Rank-2 data embedded in 50 dimensions plus tiny isotropic noise.
Matrix rank_two_fixture() {
  std::mt19937_64 gen(42);
  std::normal_distribution<double> g(0.0, 1.0), tiny(0.0, 1e-9);
  std::vector<std::vector<double>> basis(2, std::vector<double>(50));
  for (auto& b : basis)
    for (auto& v : b) v = g(gen);
  Matrix m(200, 50);
  for (std::size_t r = 0; r < 200; ++r) {
    const double a = 3.0 * g(gen), b = g(gen);
    for (std::size_t c = 0; c < 50; ++c) m(r, c) = a * basis[0][c] + b * basis[1][c] + tiny(gen);
  }
  return m;
}

}  // namespace

TEST_CASE("core distances on a line") {
  const auto y = Matrix::from_rows({{0.0}, {1.0}, {3.0}});
  CHECK(cluster::core_distances(y, 1) == std::vector<double>{1.0, 1.0, 2.0});
  CHECK(cluster::core_distances(y, 2) == std::vector<double>{3.0, 2.0, 3.0});
  CHECK_THROWS_AS(cluster::core_distances(y, 3), ConfigError);
}

TEST_CASE("duplicated points have zero core distance") {
  const auto y = Matrix::from_rows({{1.0, 1.0}, {1.0, 1.0}, {5.0, 5.0}});
  const auto core = cluster::core_distances(y, 1);
  CHECK(core[0] == 0.0);
  CHECK(core[1] == 0.0);
}

TEST_CASE("core distances agree with a sorting oracle and permute with the input") {
  std::mt19937_64 gen(9);
  for (int trial = 0; trial < 20; ++trial) {
    const auto y = random_points(gen, 30, 3);
    const std::size_t k = 1 + static_cast<std::size_t>(trial % 5);
    const auto core = cluster::core_distances(y, k);
    const auto want = oracle::core_distances(to_dense(y), k);
    for (std::size_t i = 0; i < core.size(); ++i) CHECK(core[i] == doctest::Approx(want[i]).epsilon(1e-14));

    std::vector<std::size_t> perm(y.rows);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), gen);
    const auto permuted = cluster::core_distances(permute_rows(y, perm), k);
    for (std::size_t i = 0; i < perm.size(); ++i) CHECK(permuted[i] == core[perm[i]]);
  }
}

TEST_CASE("mutual reachability MST is minimal") {
  std::mt19937_64 gen(2024);
  std::uniform_int_distribution<std::size_t> size(2, 8), dim(1, 4);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = size(gen);
    const auto y = random_points(gen, n, dim(gen));
    const std::size_t k = n > 2 ? 1 + trial % std::min<std::size_t>(3, n - 1) : 1;
    const auto core = cluster::core_distances(y, k);
    const auto mst = cluster::mutual_reachability_mst(y, core);
    REQUIRE(mst.size() == n - 1);

    const auto pts = to_dense(y);
    oracle::Dense w(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        w[i][j] = std::max({core[i], core[j], oracle::dist(pts[i], pts[j])});
    CHECK(cluster::total_weight(mst) == doctest::Approx(oracle::brute_force_mst_weight(w)).epsilon(1e-12));

    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), gen);
    const auto py = permute_rows(y, perm);
    const auto pmst = cluster::mutual_reachability_mst(py, cluster::core_distances(py, k));
    CHECK(cluster::total_weight(pmst) == doctest::Approx(cluster::total_weight(mst)).epsilon(1e-12));
  }
}

TEST_CASE("two points give one mutual reachability edge") {
  const auto y = Matrix::from_rows({{0.0, 0.0}, {3.0, 4.0}});
  const std::vector<double> core{7.0, 1.0};
  const auto mst = cluster::mutual_reachability_mst(y, core);
  REQUIRE(mst.size() == 1);
  CHECK(mst[0].a == 0);
  CHECK(mst[0].b == 1);
  CHECK(mst[0].weight == 7.0);
}

TEST_CASE("two well separated blobs") {
  std::vector<int> truth;
  const auto y = two_blobs(17, &truth);
  const auto res = cluster::hdbscan(y, cluster::HdbscanConfig{10, 0});
  CHECK(res.num_clusters == 2);
  CHECK(res.noise_count() == 0);

  const auto oracle_labels = oracle::single_linkage_components(to_dense(y), 5.0);
  CHECK(oracle::same_partition(oracle_labels, truth));
  std::size_t mislabeled = 0;
  for (std::size_t i = 0; i < truth.size(); ++i)
    for (std::size_t j = 0; j < truth.size(); ++j)
      if ((res.labels[i] == res.labels[j]) != (truth[i] == truth[j])) ++mislabeled;
  CHECK(mislabeled == 0);
  for (auto s : res.cluster_sizes) CHECK(s >= 10);
}

TEST_CASE("too few points are all noise") {
  const auto y = Matrix::from_rows({{0.0}, {0.1}, {0.2}, {5.0}, {5.1}});
  const auto res = cluster::hdbscan(y, cluster::HdbscanConfig{10, 0});
  CHECK(res.num_clusters == 0);
  CHECK(res.noise_count() == 5);
}

TEST_CASE("identical points form one degenerate cluster") {
  Matrix y(30, 2);
  std::fill(y.data.begin(), y.data.end(), 1.5);
  const auto res = cluster::hdbscan(y, cluster::HdbscanConfig{10, 0});
  CHECK(res.degenerate);
  CHECK(res.num_clusters == 1);
  CHECK(res.noise_count() == 0);
}

TEST_CASE("shuffling rows shuffles labels") {
  const auto y = two_blobs(3);
  const auto base = cluster::hdbscan(y, cluster::HdbscanConfig{10, 2});
  std::mt19937_64 gen(77);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<std::size_t> perm(y.rows);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), gen);
    const auto res = cluster::hdbscan(permute_rows(y, perm), cluster::HdbscanConfig{10, 2});
    std::vector<int> expected;
    for (auto p : perm) expected.push_back(base.labels[p]);
    CHECK(oracle::same_partition(res.labels, expected));
    CHECK(res.num_clusters == base.num_clusters);
  }
}

TEST_CASE("hdbscan config checks") {
  CHECK_THROWS_AS(cluster::HdbscanConfig({1, 0}).validate(), ConfigError);
  CHECK(cluster::HdbscanConfig{10, 0}.effective_min_samples() == 10);
  CHECK(cluster::HdbscanConfig{10, 3}.effective_min_samples() == 3);
}

TEST_CASE("PCA of rank-two data") {
  const auto x = rank_two_fixture();
  const auto res = cluster::pca_fit_transform(x, 2);
  CHECK(res.reducer.total_explained_variance() >= 0.9999);

  const auto& p = res.reducer.projection;
  for (std::size_t a = 0; a < 2; ++a)
    for (std::size_t b = 0; b < 2; ++b) {
      double dot = 0.0;
      for (std::size_t r = 0; r < p.rows; ++r) dot += p(r, a) * p(r, b);
      CHECK(std::abs(dot - (a == b ? 1.0 : 0.0)) <= 1e-8);
    }

  // Full spectrum from the Jacobi oracle.
  oracle::Dense v;
  const auto evals = oracle::jacobi_eigen(oracle::covariance(to_dense(x)), &v);
  double total = 0.0;
  for (double e : evals) total += std::max(e, 0.0);
  for (std::size_t k = 0; k < 2; ++k) {
    CHECK(res.reducer.explained_variance_ratio[k] == doctest::Approx(evals[k] / total).epsilon(1e-9));
    double dot = 0.0;
    for (std::size_t r = 0; r < p.rows; ++r) dot += p(r, k) * v[r][k];
    CHECK(std::abs(dot) == doctest::Approx(1.0).epsilon(1e-8));
  }
  CHECK((evals[0] + evals[1]) / total >= 0.9999);

  for (std::size_t c = 0; c < 2; ++c) {
    double mean = 0.0;
    for (std::size_t r = 0; r < res.reduced.rows; ++r) mean += res.reduced(r, c);
    CHECK(std::abs(mean / static_cast<double>(res.reduced.rows)) <= 1e-9);
  }
}

TEST_CASE("PCA of points on a line is an isometry") {
  std::vector<std::vector<double>> rows;
  const std::vector<double> dir{1.0, -2.0, 0.5}, origin{3.0, 1.0, -4.0};
  for (double t : {-2.0, -0.5, 0.0, 0.3, 1.7, 4.0})
    rows.push_back({origin[0] + t * dir[0], origin[1] + t * dir[1], origin[2] + t * dir[2]});
  const auto x = Matrix::from_rows(rows);
  const auto y = cluster::pca_fit_transform(x, 1).reduced;
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < x.rows; ++j)
      CHECK(std::abs(cluster::euclidean(y.row(i), y.row(j)) - cluster::euclidean(x.row(i), x.row(j))) <= 1e-8);
}

TEST_CASE("PCA sign convention and argument checks") {
  const auto x = rank_two_fixture();
  const auto res = cluster::pca_fit_transform(x, 3);
  for (std::size_t k = 0; k < 3; ++k) {
    double best = 0.0;
    for (std::size_t r = 0; r < res.reducer.projection.rows; ++r) {
      const double v = res.reducer.projection(r, k);
      if (std::abs(v) > std::abs(best)) best = v;
    }
    CHECK(best > 0.0);
  }
  CHECK_THROWS_AS(cluster::pca_fit_transform(x, 51), ConfigError);
  CHECK_THROWS_AS(cluster::pca_fit_transform(Matrix::from_rows({{1.0, 2.0}}), 1), ConfigError);
}

TEST_CASE("embedding dump writes one row per point") {
  auto dir = fixture::temp_dir("cluster-dump");
  const auto y = Matrix::from_rows({{0.5, 1.0}, {2.0, -1.0}});
  const std::vector<std::int64_t> ids{4, 9};
  const std::vector<int> labels{0, -1};
  cluster::write_embeddings_csv(dir / "e.csv", ids, y, labels);
  const auto content = fixture::slurp(dir / "e.csv");
  CHECK(std::count(content.begin(), content.end(), '\n') == 3);
  CHECK(content.rfind("id,", 0) == 0);
}
