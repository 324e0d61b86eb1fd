#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "csv.hpp"
#include "error.hpp"
#include "special.hpp"

namespace carcopula {

/// Undirected, connected region adjacency with binary weights.
///
/// Regions are 0-based internally; files and user-facing labels are 1-based.
struct ArealGraph {
  int n = 0;
  std::vector<std::pair<int, int>> edges;  // i < j, sorted, unique
  Eigen::MatrixXd W;                       // symmetric 0/1, zero diagonal
  Eigen::VectorXd degrees;                 // m_i = row sums of W
  std::vector<std::vector<int>> neighbors;

  [[nodiscard]] Eigen::MatrixXd M() const { return degrees.asDiagonal(); }

  /// M - rho W.
  [[nodiscard]] Eigen::MatrixXd car_matrix(double rho) const {
    Eigen::MatrixXd K = -rho * W;
    K.diagonal() = degrees;
    return K;
  }
};

namespace detail {

inline bool is_connected(int n, const std::vector<std::vector<int>>& nbrs, int* unreached) {
  std::vector<char> seen(static_cast<std::size_t>(n), 0);
  std::vector<int> stack{0};
  seen[0] = 1;
  while (!stack.empty()) {
    int v = stack.back();
    stack.pop_back();
    for (int w : nbrs[static_cast<std::size_t>(v)]) {
      if (!seen[static_cast<std::size_t>(w)]) {
        seen[static_cast<std::size_t>(w)] = 1;
        stack.push_back(w);
      }
    }
  }
  for (int v = 0; v < n; ++v) {
    if (!seen[static_cast<std::size_t>(v)]) {
      *unreached = v;
      return false;
    }
  }
  return true;
}

}  // namespace detail

/// Builds the graph from 1-based undirected edge records.
///
/// Duplicates and reversed duplicates collapse to one edge. Throws InputError
/// on out-of-range indices, self-loops, an empty edge set or a disconnected
/// graph (the ICAR rank n-1 property needs a single component).
inline ArealGraph load_adjacency(std::span<const std::pair<int, int>> records, int n) {
  if (n < 2) throw InputError("adjacency needs at least 2 regions, got " + std::to_string(n));
  if (records.empty()) throw InputError("adjacency has no edges");

  std::set<std::pair<int, int>> unique;
  for (auto [i, j] : records) {
    if (i < 1 || i > n || j < 1 || j > n)
      throw InputError("edge (" + std::to_string(i) + "," + std::to_string(j) + ") outside regions 1.." +
                       std::to_string(n));
    if (i == j) throw InputError("self-loop at region " + std::to_string(i));
    unique.emplace(std::min(i, j) - 1, std::max(i, j) - 1);
  }

  ArealGraph g;
  g.n = n;
  g.edges.assign(unique.begin(), unique.end());
  g.W = Eigen::MatrixXd::Zero(n, n);
  g.neighbors.assign(static_cast<std::size_t>(n), {});
  for (auto [i, j] : g.edges) {
    g.W(i, j) = g.W(j, i) = 1.0;
    g.neighbors[static_cast<std::size_t>(i)].push_back(j);
    g.neighbors[static_cast<std::size_t>(j)].push_back(i);
  }
  for (auto& nb : g.neighbors) std::sort(nb.begin(), nb.end());
  g.degrees = g.W.rowwise().sum();

  int unreached = -1;
  if (!detail::is_connected(n, g.neighbors, &unreached))
    throw InputError("adjacency graph is disconnected: region " + std::to_string(unreached + 1) +
                     " is not reachable from region 1");
  return g;
}

inline ArealGraph load_adjacency(const std::vector<std::pair<int, int>>& records, int n) {
  return load_adjacency(std::span<const std::pair<int, int>>(records), n);
}

/// Reads an `i,j` CSV (header required, 1-based). When n <= 0 the region
/// count is the largest index seen.
inline ArealGraph read_adjacency_csv(const std::string& path, int n = 0) {
  auto rows = csv::read_file(path);
  if (rows.empty()) throw InputError("adjacency file '" + path + "' is empty");
  const auto& header = rows.front();
  if (header.size() < 2 || csv::trim(header[0]) != "i" || csv::trim(header[1]) != "j")
    throw InputError("adjacency file '" + path + "' must start with header 'i,j'");
  std::vector<std::pair<int, int>> records;
  int max_index = 0;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    if (rows[r].size() < 2) throw InputError("adjacency row " + std::to_string(r + 1) + " has fewer than 2 fields");
    int i = static_cast<int>(csv::parse_long(rows[r][0], "adjacency column i"));
    int j = static_cast<int>(csv::parse_long(rows[r][1], "adjacency column j"));
    max_index = std::max({max_index, i, j});
    records.emplace_back(i, j);
  }
  return load_adjacency(records, n > 0 ? n : max_index);
}

struct MoranResult {
  double I = 0.0;
  double expected = 0.0;  // -1/(N-1)
  double variance = 0.0;  // normality-assumption variance
  double z_score = 0.0;
  double p_value = 1.0;  // two-sided
};

/// Global Moran's I with the normal-approximation test.
///
/// Var(I) uses the moments under normality:
///   E[I^2] = (N^2 S1 - N S2 + 3 S0^2) / (S0^2 (N^2 - 1)),
/// with S0 = sum w_ij, S1 = 1/2 sum (w_ij + w_ji)^2, S2 = sum_i (w_i. + w_.i)^2.
inline MoranResult moran_i(std::span<const double> values, const ArealGraph& graph) {
  const int n = graph.n;
  if (static_cast<int>(values.size()) != n)
    throw InputError("moran_i: " + std::to_string(values.size()) + " values for " + std::to_string(n) + " regions");

  Eigen::Map<const Eigen::VectorXd> y(values.data(), n);
  const double mean = y.mean();
  const Eigen::VectorXd dev = y.array() - mean;
  const double ss = dev.squaredNorm();
  const double scale = y.cwiseAbs().maxCoeff();
  if (!(ss > 1e-24 * n * std::max(scale * scale, 1e-300)))
    throw InputError("moran_i: values have zero variance");

  const double s0 = graph.W.sum();
  const double cross = dev.dot(graph.W * dev);

  MoranResult r;
  const double N = n;
  r.I = (N / s0) * cross / ss;
  r.expected = -1.0 / (N - 1.0);
  const double s1 = 0.5 * (graph.W + graph.W.transpose()).array().square().sum();
  const double s2 = (graph.W.rowwise().sum() + graph.W.colwise().sum().transpose()).array().square().sum();
  const double second_moment = (N * N * s1 - N * s2 + 3.0 * s0 * s0) / (s0 * s0 * (N * N - 1.0));
  r.variance = second_moment - r.expected * r.expected;
  r.z_score = (r.I - r.expected) / std::sqrt(r.variance);
  r.p_value = 2.0 * special::normal_cdf(-std::abs(r.z_score));
  return r;
}

/// Moran's I for every complete column (year) of an n x T matrix. Columns
/// containing NaN are skipped.
struct YearlyMoran {
  std::vector<int> years;  // 0-based column indices that were evaluated
  std::vector<MoranResult> per_year;
  double mean_I = 0.0;
  double mean_z = 0.0;
  double combined_z = 0.0;  // sum z_t / sqrt(T), years treated as independent
  double combined_p = 1.0;  // two-sided
};

inline YearlyMoran yearly_moran(const Eigen::MatrixXd& values, const ArealGraph& graph) {
  YearlyMoran out;
  std::vector<double> column(static_cast<std::size_t>(values.rows()));
  for (Eigen::Index t = 0; t < values.cols(); ++t) {
    bool complete = true;
    for (Eigen::Index i = 0; i < values.rows(); ++i) {
      column[static_cast<std::size_t>(i)] = values(i, t);
      if (std::isnan(values(i, t))) complete = false;
    }
    if (!complete) continue;
    out.years.push_back(static_cast<int>(t));
    out.per_year.push_back(moran_i(column, graph));
  }
  if (out.per_year.empty()) throw InputError("yearly_moran: no complete year");
  const double T = static_cast<double>(out.per_year.size());
  double sum_i = 0.0, sum_z = 0.0;
  for (const auto& r : out.per_year) {
    sum_i += r.I;
    sum_z += r.z_score;
  }
  out.mean_I = sum_i / T;
  out.mean_z = sum_z / T;
  out.combined_z = sum_z / std::sqrt(T);
  out.combined_p = 2.0 * special::normal_cdf(-std::abs(out.combined_z));
  return out;
}

}  // namespace carcopula
