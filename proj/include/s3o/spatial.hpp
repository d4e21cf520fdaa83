#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <limits>
#include <numeric>
#include <vector>

namespace s3o {

// Static k-d tree over D-dimensional points for exact nearest-neighbor queries.
template <int D>
class KdTree {
 public:
  using Point = Eigen::Matrix<double, D, 1>;

  KdTree() = default;
  explicit KdTree(std::vector<Point> pts) : pts_(std::move(pts)) {
    idx_.resize(pts_.size());
    std::iota(idx_.begin(), idx_.end(), 0);
    nodes_.reserve(pts_.size());
    if (!pts_.empty()) root_ = build(0, static_cast<int>(idx_.size()), 0);
  }

  bool empty() const { return pts_.empty(); }
  std::size_t size() const { return pts_.size(); }
  const Point& point(int i) const { return pts_[i]; }

  // Index of the nearest point (lowest index among exact ties) and its squared distance.
  std::pair<int, double> nearest(const Point& q) const {
    int best = -1;
    double best_d2 = std::numeric_limits<double>::infinity();
    if (root_ >= 0) search(root_, q, best, best_d2);
    return {best, best_d2};
  }

 private:
  struct Node {
    int point;  // index into pts_
    int axis;
    int left = -1;
    int right = -1;
  };

  int build(int lo, int hi, int depth) {
    if (lo >= hi) return -1;
    // Split on the axis of largest spread.
    Point mn = pts_[idx_[lo]], mx = mn;
    for (int k = lo; k < hi; ++k) {
      mn = mn.cwiseMin(pts_[idx_[k]]);
      mx = mx.cwiseMax(pts_[idx_[k]]);
    }
    int axis = 0;
    (mx - mn).maxCoeff(&axis);
    int mid = (lo + hi) / 2;
    std::nth_element(idx_.begin() + lo, idx_.begin() + mid, idx_.begin() + hi, [&](int a, int b) {
      if (pts_[a][axis] != pts_[b][axis]) return pts_[a][axis] < pts_[b][axis];
      return a < b;
    });
    int id = static_cast<int>(nodes_.size());
    nodes_.push_back({idx_[mid], axis});
    int l = build(lo, mid, depth + 1);
    int r = build(mid + 1, hi, depth + 1);
    nodes_[id].left = l;
    nodes_[id].right = r;
    return id;
  }

  void search(int n, const Point& q, int& best, double& best_d2) const {
    const Node& node = nodes_[n];
    const double d2 = (pts_[node.point] - q).squaredNorm();
    if (d2 < best_d2 || (d2 == best_d2 && node.point < best)) {
      best = node.point;
      best_d2 = d2;
    }
    const double diff = q[node.axis] - pts_[node.point][node.axis];
    int first = diff < 0 ? node.left : node.right;
    int second = diff < 0 ? node.right : node.left;
    if (first >= 0) search(first, q, best, best_d2);
    if (second >= 0 && diff * diff <= best_d2) search(second, q, best, best_d2);
  }

  std::vector<Point> pts_;
  std::vector<int> idx_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

}  // namespace s3o
