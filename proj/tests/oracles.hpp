#pragma once

// Independent reference implementations used only by the tests. None of
// these share code with the library.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <vector>

namespace oracle {

using Dense = std::vector<std::vector<double>>;

// Cyclic Jacobi rotations; returns eigenvalues of a symmetric matrix in
// decreasing order and the matching eigenvectors as columns of `vectors`.
inline std::vector<double> jacobi_eigen(Dense a, Dense* vectors = nullptr) {
  const std::size_t n = a.size();
  Dense v(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) v[i][i] = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a[p][q]) < 1e-300) continue;
        const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k][p], vkq = v[k][q];
          v[k][p] = c * vkp - s * vkq;
          v[k][q] = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto x, auto y) { return a[x][x] > a[y][y]; });
  std::vector<double> values;
  for (auto i : order) values.push_back(a[i][i]);
  if (vectors) {
    vectors->assign(n, std::vector<double>(n, 0.0));
    for (std::size_t c = 0; c < n; ++c)
      for (std::size_t r = 0; r < n; ++r) (*vectors)[r][c] = v[r][order[c]];
  }
  return values;
}

// Sample covariance (divisor n - 1) of row-major points.
inline Dense covariance(const Dense& x) {
  const std::size_t n = x.size(), d = x[0].size();
  std::vector<double> mean(d, 0.0);
  for (const auto& r : x)
    for (std::size_t j = 0; j < d; ++j) mean[j] += r[j] / n;
  Dense c(d, std::vector<double>(d, 0.0));
  for (const auto& r : x)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) c[i][j] += (r[i] - mean[i]) * (r[j] - mean[j]);
  for (auto& row : c)
    for (auto& e : row) e /= static_cast<double>(n - 1);
  return c;
}

inline double dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

// k-th smallest distance to another point, by full sort.
inline std::vector<double> core_distances(const Dense& x, std::size_t k) {
  std::vector<double> core;
  for (std::size_t i = 0; i < x.size(); ++i) {
    std::vector<double> d;
    for (std::size_t j = 0; j < x.size(); ++j)
      if (j != i) d.push_back(dist(x[i], x[j]));
    std::sort(d.begin(), d.end());
    core.push_back(d[k - 1]);
  }
  return core;
}

// Minimum spanning tree weight by decoding every Pruefer sequence, so every
// labeled tree on n vertices is visited exactly once.
inline double brute_force_mst_weight(const Dense& w) {
  const std::size_t n = w.size();
  if (n < 2) return 0.0;
  if (n == 2) return w[0][1];
  std::vector<std::size_t> seq(n - 2, 0);
  double best = std::numeric_limits<double>::infinity();
  while (true) {
    std::vector<std::size_t> degree(n, 1);
    for (auto s : seq) ++degree[s];
    double total = 0.0;
    for (auto s : seq) {
      std::size_t leaf = 0;
      while (degree[leaf] != 1) ++leaf;
      total += w[leaf][s];
      --degree[leaf];
      --degree[s];
    }
    std::size_t u = n, v = n;
    for (std::size_t i = 0; i < n; ++i)
      if (degree[i] == 1) (u == n ? u : v) = i;
    total += w[u][v];
    best = std::min(best, total);
    std::size_t pos = 0;
    while (pos < seq.size() && ++seq[pos] == n) seq[pos++] = 0;
    if (pos == seq.size()) break;
  }
  return best;
}

// Connected components of the graph joining points closer than `cut`.
inline std::vector<int> single_linkage_components(const Dense& x, double cut) {
  const std::size_t n = x.size();
  std::vector<int> comp(n, -1);
  int next = 0;
  for (std::size_t s = 0; s < n; ++s) {
    if (comp[s] >= 0) continue;
    std::vector<std::size_t> stack{s};
    comp[s] = next;
    while (!stack.empty()) {
      const auto i = stack.back();
      stack.pop_back();
      for (std::size_t j = 0; j < n; ++j)
        if (comp[j] < 0 && dist(x[i], x[j]) < cut) {
          comp[j] = next;
          stack.push_back(j);
        }
    }
    ++next;
  }
  return comp;
}

// True when two labelings induce the same partition.
inline bool same_partition(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a.size(); ++j)
      if ((a[i] == a[j]) != (b[i] == b[j])) return false;
  return true;
}

}  // namespace oracle
