#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "s3o/geom.hpp"
#include "s3o/skinning.hpp"

namespace s3o {

inline constexpr double kDefaultLambda = 0.1;
inline constexpr double kDefaultEntropyFloor = 1e-3;

// Sum_b w log2 w + lambda, with 0 log 0 = 0.
inline double entropy(std::span<const double> w, double lambda = kDefaultLambda) {
  double sum = 0.0, h = 0.0;
  for (double x : w) {
    require(x >= 0.0 && std::isfinite(x), ErrorCode::NotNormalized, "entropy: negative or non-finite weight");
    sum += x;
    if (x > 0.0) h += x * std::log2(x);
  }
  require(std::abs(sum - 1.0) <= 1e-6, ErrorCode::NotNormalized, "entropy: weights do not sum to 1");
  return h + lambda;
}

inline double entropy(const std::vector<double>& w, double lambda = kDefaultLambda) {
  return entropy(std::span<const double>(w), lambda);
}

struct RigidityCoefficients {
  std::vector<Edge> edges;    // i < j
  std::vector<double> values;  // one per edge
  double lambda = kDefaultLambda;

  double at(int i, int j) const {
    Edge key{std::min(i, j), std::max(i, j)};
    auto it = std::lower_bound(edges.begin(), edges.end(), key);
    if (it == edges.end() || *it != key) return 0.0;
    return values[it - edges.begin()];
  }
};

// Pairwise (cascade) summation; fixed order, so results are reproducible.
inline double pairwise_sum(const double* x, std::size_t n) {
  if (n <= 8) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += x[i];
    return s;
  }
  std::size_t h = n / 2;
  return pairwise_sum(x, h) + pairwise_sum(x + h, n - h);
}

inline double pairwise_sum(const std::vector<double>& x) { return pairwise_sum(x.data(), x.size()); }

// R_ij = 1 / (E_i E_j) with |E| floored at eps (sign kept). With
// clamp_positive the magnitude is stored, so the loss weight is never negative.
inline RigidityCoefficients rigidity_coefficients(const SkinningWeights& w, std::vector<Edge> edges,
                                                  double lambda = kDefaultLambda, double eps = kDefaultEntropyFloor,
                                                  bool clamp_positive = true) {
  require(lambda > 0.0, ErrorCode::InvalidArgument, "lambda must be > 0");
  for (auto& e : edges) {
    require(e.first != e.second && e.first >= 0 && e.second >= 0 && e.first < w.rows() && e.second < w.rows(),
            ErrorCode::InvalidArgument, "edge index out of range");
    if (e.first > e.second) std::swap(e.first, e.second);
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());

  std::vector<double> e_hat(w.rows());
  std::vector<double> row(w.cols());
  for (Eigen::Index n = 0; n < w.rows(); ++n) {
    for (Eigen::Index b = 0; b < w.cols(); ++b) row[b] = w(n, b);
    double e = entropy(row, lambda);
    e_hat[n] = (e < 0 ? -1.0 : 1.0) * std::max(std::abs(e), eps);
  }
  RigidityCoefficients r;
  r.lambda = lambda;
  r.edges = std::move(edges);
  r.values.reserve(r.edges.size());
  for (const auto& [i, j] : r.edges) {
    double v = 1.0 / (e_hat[i] * e_hat[j]);
    r.values.push_back(clamp_positive ? std::abs(v) : v);
  }
  return r;
}

namespace detail {
inline void check_same_topology(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
  require(a.size() == b.size(), ErrorCode::TopologyMismatch, "meshes have different vertex counts");
}
}  // namespace detail

inline double dr_loss(const std::vector<Vec3>& xt, const std::vector<Vec3>& xt1, const RigidityCoefficients& r) {
  detail::check_same_topology(xt, xt1);
  std::vector<double> terms(r.edges.size());
  for (std::size_t k = 0; k < r.edges.size(); ++k) {
    auto [i, j] = r.edges[k];
    require(i < static_cast<int>(xt.size()) && j < static_cast<int>(xt.size()), ErrorCode::TopologyMismatch,
            "rigidity edge outside the mesh");
    terms[k] = std::abs(r.values[k]) * std::abs((xt[i] - xt[j]).norm() - (xt1[i] - xt1[j]).norm());
  }
  return pairwise_sum(terms);
}

inline double dr_loss(const Mesh& mt, const Mesh& mt1, const RigidityCoefficients& r) {
  require(mt.same_topology(mt1), ErrorCode::TopologyMismatch, "meshes differ in topology");
  return dr_loss(mt.vertices, mt1.vertices, r);
}

// Gradient of dr_loss with respect to both vertex sets (subgradient 0 at kinks).
struct DrGradient {
  std::vector<Vec3> d_xt;
  std::vector<Vec3> d_xt1;
};

inline DrGradient dr_loss_gradient(const std::vector<Vec3>& xt, const std::vector<Vec3>& xt1,
                                   const RigidityCoefficients& r) {
  detail::check_same_topology(xt, xt1);
  DrGradient g{std::vector<Vec3>(xt.size(), Vec3::Zero()), std::vector<Vec3>(xt.size(), Vec3::Zero())};
  for (std::size_t k = 0; k < r.edges.size(); ++k) {
    auto [i, j] = r.edges[k];
    Vec3 a = xt[i] - xt[j], b = xt1[i] - xt1[j];
    double la = a.norm(), lb = b.norm();
    double diff = la - lb;
    if (diff == 0.0) continue;
    double s = std::abs(r.values[k]) * (diff > 0 ? 1.0 : -1.0);
    if (la > 0) {
      g.d_xt[i] += s * a / la;
      g.d_xt[j] -= s * a / la;
    }
    if (lb > 0) {
      g.d_xt1[i] -= s * b / lb;
      g.d_xt1[j] += s * b / lb;
    }
  }
  return g;
}

inline RigidityCoefficients unit_coefficients(std::vector<Edge> edges) {
  for (auto& e : edges)
    if (e.first > e.second) std::swap(e.first, e.second);
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  RigidityCoefficients r;
  r.values.assign(edges.size(), 1.0);
  r.edges = std::move(edges);
  return r;
}

inline double arap_loss(const std::vector<Vec3>& xt, const std::vector<Vec3>& xt1, const std::vector<Edge>& edges) {
  return dr_loss(xt, xt1, unit_coefficients(edges));
}

inline double arap_loss(const Mesh& mt, const Mesh& mt1, const std::vector<Edge>& edges) {
  require(mt.same_topology(mt1), ErrorCode::TopologyMismatch, "meshes differ in topology");
  return arap_loss(mt.vertices, mt1.vertices, edges);
}

}  // namespace s3o
