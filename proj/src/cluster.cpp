#include "backbench/cluster.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <tuple>

#include <Eigen/Dense>

#include "backbench/error.hpp"

namespace backbench::cluster {

Matrix Matrix::from_rows(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) return {};
  Matrix m(rows.size(), rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != m.cols) throw ConfigError("ragged matrix rows");
    std::copy(rows[r].begin(), rows[r].end(), m.data.begin() + static_cast<std::ptrdiff_t>(r * m.cols));
  }
  return m;
}

double euclidean(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// PCA

Matrix Reducer::transform(const Matrix& x) const {
  if (x.cols != mean.size()) throw ConfigError("reducer input dimension mismatch");
  Matrix y(x.rows, target_dim);
  std::vector<double> centered(x.cols);
  for (std::size_t r = 0; r < x.rows; ++r) {
    for (std::size_t c = 0; c < x.cols; ++c) centered[c] = x(r, c) - mean[c];
    for (std::size_t k = 0; k < target_dim; ++k) {
      double acc = 0.0;
      for (std::size_t c = 0; c < x.cols; ++c) acc += centered[c] * projection(c, k);
      y(r, k) = acc;
    }
  }
  return y;
}

double Reducer::total_explained_variance() const {
  double s = 0.0;
  for (double v : explained_variance_ratio) s += v;
  return s;
}

PcaResult pca_fit_transform(const Matrix& x, std::size_t target_dim) {
  if (x.rows < 2) throw ConfigError("PCA needs at least 2 points");
  const std::size_t achievable = std::min(x.rows, x.cols);
  if (target_dim == 0 || target_dim > achievable) {
    throw ConfigError("PCA target_dim " + std::to_string(target_dim) +
                      " not achievable; at most " + std::to_string(achievable) +
                      " components for " + std::to_string(x.rows) + "x" +
                      std::to_string(x.cols) + " input");
  }
  const auto n = static_cast<Eigen::Index>(x.rows);
  const auto d = static_cast<Eigen::Index>(x.cols);
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> xm(
      x.data.data(), n, d);
  const Eigen::RowVectorXd mu = xm.colwise().mean();
  const Eigen::MatrixXd centered = xm.rowwise() - mu;
  const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n - 1);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw Error("covariance eigendecomposition failed");
  const Eigen::VectorXd& evals = solver.eigenvalues();  // ascending
  const Eigen::MatrixXd& evecs = solver.eigenvectors();

  double total = 0.0;
  for (Eigen::Index i = 0; i < d; ++i) total += std::max(evals(i), 0.0);

  PcaResult out;
  Reducer& red = out.reducer;
  red.target_dim = target_dim;
  red.mean.assign(mu.data(), mu.data() + d);
  red.projection = Matrix(x.cols, target_dim);
  for (std::size_t k = 0; k < target_dim; ++k) {
    const Eigen::Index src = d - 1 - static_cast<Eigen::Index>(k);
    Eigen::VectorXd v = evecs.col(src);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    for (Eigen::Index c = 0; c < d; ++c) red.projection(static_cast<std::size_t>(c), k) = v(c);
    red.explained_variance_ratio.push_back(total > 0.0 ? std::max(evals(src), 0.0) / total : 0.0);
  }
  out.reduced = red.transform(x);
  return out;
}

// ---------------------------------------------------------------------------
// HDBSCAN

void HdbscanConfig::validate() const {
  if (min_cluster_size < 2) throw ConfigError("min_cluster_size must be >= 2");
  if (effective_min_samples() < 1) throw ConfigError("min_samples must be >= 1");
}

std::vector<double> core_distances(const Matrix& y, std::size_t min_samples) {
  if (min_samples < 1) throw ConfigError("min_samples must be >= 1");
  if (y.rows <= min_samples) {
    throw ConfigError("core distances need more than min_samples (" +
                      std::to_string(min_samples) + ") points, got " + std::to_string(y.rows));
  }
  std::vector<double> core(y.rows);
  std::vector<double> dist;
  dist.reserve(y.rows - 1);
  for (std::size_t i = 0; i < y.rows; ++i) {
    dist.clear();
    for (std::size_t j = 0; j < y.rows; ++j) {
      if (j != i) dist.push_back(euclidean(y.row(i), y.row(j)));
    }
    auto kth = dist.begin() + static_cast<std::ptrdiff_t>(min_samples - 1);
    std::nth_element(dist.begin(), kth, dist.end());
    core[i] = *kth;
  }
  return core;
}

std::vector<Edge> mutual_reachability_mst(const Matrix& y, std::span<const double> core) {
  const std::size_t n = y.rows;
  if (core.size() != n) throw ConfigError("core distance count does not match points");
  std::vector<Edge> edges;
  if (n < 2) return edges;

  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<char> in_tree(n, 0);
  std::vector<double> key(n, kInf);
  std::vector<std::size_t> from(n, 0);
  const auto edge_less = [](double w1, std::size_t u1, std::size_t v1, double w2, std::size_t u2,
                            std::size_t v2) {
    return std::make_tuple(w1, std::min(u1, v1), std::max(u1, v1)) <
           std::make_tuple(w2, std::min(u2, v2), std::max(u2, v2));
  };

  std::size_t current = 0;
  in_tree[0] = 1;
  for (std::size_t added = 1; added < n; ++added) {
    for (std::size_t u = 0; u < n; ++u) {
      if (in_tree[u]) continue;
      const double w = std::max({core[current], core[u], euclidean(y.row(current), y.row(u))});
      if (key[u] == kInf || edge_less(w, current, u, key[u], from[u], u)) {
        key[u] = w;
        from[u] = current;
      }
    }
    std::size_t best = n;
    for (std::size_t u = 0; u < n; ++u) {
      if (in_tree[u]) continue;
      if (best == n || edge_less(key[u], from[u], u, key[best], from[best], best)) best = u;
    }
    in_tree[best] = 1;
    edges.push_back({std::min(best, from[best]), std::max(best, from[best]), key[best]});
    current = best;
  }
  std::sort(edges.begin(), edges.end(), [](const Edge& l, const Edge& r) {
    return std::tie(l.weight, l.a, l.b) < std::tie(r.weight, r.a, r.b);
  });
  return edges;
}

double total_weight(std::span<const Edge> edges) {
  double s = 0.0;
  for (const auto& e : edges) s += e.weight;
  return s;
}

std::size_t ClusterAssignment::noise_count() const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), kNoise));
}

namespace {

struct LinkageNode {
  std::size_t left = 0, right = 0;
  double distance = 0.0;
  std::size_t size = 1;
};

// Agglomerative single-linkage tree from sorted MST edges. Leaves are
// 0..n-1; merge i creates node n+i.
std::vector<LinkageNode> single_linkage(const std::vector<Edge>& mst, std::size_t n) {
  std::vector<LinkageNode> nodes(2 * n - 1);
  std::vector<std::size_t> parent(2 * n - 1);
  for (std::size_t i = 0; i < parent.size(); ++i) parent[i] = i;
  const auto find = [&](std::size_t x) {
    while (parent[x] != x) {
      parent[x] = parent[parent[x]];
      x = parent[x];
    }
    return x;
  };
  for (std::size_t i = 0; i < mst.size(); ++i) {
    const std::size_t ra = find(mst[i].a), rb = find(mst[i].b);
    const std::size_t node = n + i;
    nodes[node] = {ra, rb, mst[i].weight, nodes[ra].size + nodes[rb].size};
    parent[ra] = node;
    parent[rb] = node;
  }
  return nodes;
}

void collect_leaves(const std::vector<LinkageNode>& nodes, std::size_t n, std::size_t root,
                    std::vector<std::size_t>& out) {
  std::vector<std::size_t> stack{root};
  while (!stack.empty()) {
    const std::size_t x = stack.back();
    stack.pop_back();
    if (x < n) {
      out.push_back(x);
    } else {
      stack.push_back(nodes[x].right);
      stack.push_back(nodes[x].left);
    }
  }
}

}  // namespace

ClusterAssignment hdbscan(const Matrix& y, const HdbscanConfig& config) {
  config.validate();
  const std::size_t n = y.rows;
  const std::size_t mcs = config.min_cluster_size;
  ClusterAssignment out;
  out.labels.assign(n, ClusterAssignment::kNoise);

  // The root is never selected, so a cluster needs a split into two parts
  // of at least min_cluster_size each.
  if (n < 2 * mcs) return out;

  const std::size_t k = std::min(config.effective_min_samples(), n - 1);
  const auto core = core_distances(y, k);
  const auto mst = mutual_reachability_mst(y, core);

  const double max_w = mst.back().weight;
  if (max_w == 0.0) {
    out.degenerate = true;
    std::fill(out.labels.begin(), out.labels.end(), 0);
    out.num_clusters = 1;
    out.stability = {0.0};
    out.cluster_sizes = {n};
    return out;
  }
  double min_pos = max_w;
  for (const auto& e : mst) {
    if (e.weight > 0.0) min_pos = std::min(min_pos, e.weight);
  }
  // Zero-distance merges are the densest; give them a finite lambda above
  // every positive-distance merge.
  const double zero_lambda = 2.0 / min_pos;
  const auto lambda_of = [&](double d) { return d > 0.0 ? 1.0 / d : zero_lambda; };

  const auto nodes = single_linkage(mst, n);
  const std::size_t root = 2 * n - 2;

  // Condense: walk top-down, following a cluster through splits that shed
  // fewer than min_cluster_size points.
  std::vector<CondensedEdge>& tree = out.condensed_tree;
  std::vector<std::size_t> relabel(2 * n - 1, 0);
  relabel[root] = n;
  std::size_t next_label = n + 1;
  std::vector<std::size_t> queue{root};
  std::vector<std::size_t> leaves;
  for (std::size_t qi = 0; qi < queue.size(); ++qi) {
    const std::size_t node = queue[qi];
    const auto& nd = nodes[node];
    const double lambda = lambda_of(nd.distance);
    const std::size_t parent_label = relabel[node];
    const std::size_t lsize = nodes[nd.left].size, rsize = nodes[nd.right].size;

    const auto shed = [&](std::size_t child) {
      leaves.clear();
      collect_leaves(nodes, n, child, leaves);
      for (auto p : leaves) tree.push_back({parent_label, p, lambda, 1});
    };

    if (lsize >= mcs && rsize >= mcs) {
      for (std::size_t child : {nd.left, nd.right}) {
        relabel[child] = next_label++;
        tree.push_back({parent_label, relabel[child], lambda, nodes[child].size});
        queue.push_back(child);
      }
    } else if (lsize < mcs && rsize < mcs) {
      shed(nd.left);
      shed(nd.right);
    } else {
      const std::size_t big = lsize >= mcs ? nd.left : nd.right;
      const std::size_t small = lsize >= mcs ? nd.right : nd.left;
      shed(small);
      relabel[big] = parent_label;
      if (big >= n) {
        queue.push_back(big);
      } else {
        tree.push_back({parent_label, big, lambda, 1});
      }
    }
  }

  const std::size_t num_nodes = next_label - n;  // cluster labels n..next_label-1
  std::vector<double> birth(num_nodes, 0.0), stability(num_nodes, 0.0);
  std::vector<std::vector<std::size_t>> children(num_nodes);
  std::vector<std::size_t> parent_of(num_nodes, 0);
  std::vector<std::size_t> point_parent(n, 0);
  for (const auto& e : tree) {
    if (e.child >= n) {
      birth[e.child - n] = e.lambda;
      children[e.parent - n].push_back(e.child - n);
      parent_of[e.child - n] = e.parent - n;
    } else {
      point_parent[e.child] = e.parent - n;
    }
  }
  for (const auto& e : tree) {
    stability[e.parent - n] += (e.lambda - birth[e.parent - n]) * static_cast<double>(e.child_size);
  }

  // Excess-of-mass selection, children before parents; the root is excluded.
  std::vector<char> selected(num_nodes, 1);
  selected[0] = 0;
  std::vector<double> best = stability;
  for (std::size_t c = num_nodes; c-- > 1;) {
    double subtree = 0.0;
    for (auto ch : children[c]) subtree += best[ch];
    if (!children[c].empty() && subtree > best[c]) {
      selected[c] = 0;
      best[c] = subtree;
    } else {
      std::vector<std::size_t> stack(children[c].begin(), children[c].end());
      while (!stack.empty()) {
        const auto x = stack.back();
        stack.pop_back();
        selected[x] = 0;
        stack.insert(stack.end(), children[x].begin(), children[x].end());
      }
    }
  }

  std::vector<int> out_id(num_nodes, ClusterAssignment::kNoise);
  for (std::size_t c = 1; c < num_nodes; ++c) {
    if (!selected[c]) continue;
    out_id[c] = out.num_clusters++;
    out.stability.push_back(stability[c]);
  }
  out.cluster_sizes.assign(static_cast<std::size_t>(out.num_clusters), 0);
  for (std::size_t p = 0; p < n; ++p) {
    std::size_t c = point_parent[p];
    while (c != 0 && !selected[c]) c = parent_of[c];
    if (c != 0) {
      out.labels[p] = out_id[c];
      ++out.cluster_sizes[static_cast<std::size_t>(out_id[c])];
    }
  }
  return out;
}

void write_embeddings_csv(const std::filesystem::path& path, std::span<const std::int64_t> ids,
                          const Matrix& y, std::span<const int> labels) {
  if (ids.size() != y.rows || labels.size() != y.rows) {
    throw ConfigError("embedding dump: ids, rows and labels must align");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << "id";
  for (std::size_t k = 0; k < y.cols; ++k) out << ",y" << k + 1;
  out << ",cluster\n";
  char buf[32];
  for (std::size_t r = 0; r < y.rows; ++r) {
    out << ids[r];
    for (std::size_t k = 0; k < y.cols; ++k) {
      std::snprintf(buf, sizeof buf, "%.17g", y(r, k));
      out << ',' << buf;
    }
    out << ',' << labels[r] << '\n';
  }
}

}  // namespace backbench::cluster
