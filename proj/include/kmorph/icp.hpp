#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <algorithm>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "kmorph/kinematics.hpp"
#include "kmorph/render.hpp"

namespace kmorph {

// Static kd-tree over a fixed point set. Exact nearest neighbour, ties by
// lowest point index (matches a first-wins brute-force scan).
class KdTree {
 public:
  explicit KdTree(std::vector<Eigen::Vector3d> points) : pts_(std::move(points)) {
    if (pts_.empty()) throw std::invalid_argument("KdTree: empty point set");
    idx_.resize(pts_.size());
    std::iota(idx_.begin(), idx_.end(), 0);
    nodes_.reserve(pts_.size());
    root_ = build(0, int(pts_.size()), 0);
  }

  struct Hit {
    int index = -1;
    double dist2 = std::numeric_limits<double>::infinity();
  };

  Hit nearest(const Eigen::Vector3d& q) const {
    Hit best;
    search(root_, q, best);
    return best;
  }

  const std::vector<Eigen::Vector3d>& points() const { return pts_; }

 private:
  struct Node {
    int point = -1;
    int axis = 0;
    int left = -1, right = -1;
  };

  int build(int lo, int hi, int depth) {
    if (lo >= hi) return -1;
    int axis = depth % 3;
    int mid = (lo + hi) / 2;
    std::nth_element(idx_.begin() + lo, idx_.begin() + mid, idx_.begin() + hi,
                     [&](int a, int b) {
                       double va = pts_[a][axis], vb = pts_[b][axis];
                       return va < vb || (va == vb && a < b);
                     });
    int id = int(nodes_.size());
    nodes_.push_back({idx_[mid], axis, -1, -1});
    nodes_[id].left = build(lo, mid, depth + 1);
    int right = build(mid + 1, hi, depth + 1);
    nodes_[id].right = right;
    return id;
  }

  void search(int node, const Eigen::Vector3d& q, Hit& best) const {
    if (node < 0) return;
    const Node& nd = nodes_[node];
    double d2 = (pts_[nd.point] - q).squaredNorm();
    if (d2 < best.dist2 || (d2 == best.dist2 && nd.point < best.index)) {
      best.dist2 = d2;
      best.index = nd.point;
    }
    double delta = q[nd.axis] - pts_[nd.point][nd.axis];
    int first = delta < 0 ? nd.left : nd.right;
    int second = delta < 0 ? nd.right : nd.left;
    search(first, q, best);
    if (delta * delta <= best.dist2)  // equal distance still matters for tie-break
      search(second, q, best);
  }

  std::vector<Eigen::Vector3d> pts_;
  std::vector<int> idx_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

struct Correspondences {
  std::vector<std::pair<int, int>> pairs;  // (source index, target index)
  double mean_sq_dist = 0.0;
};

inline std::vector<Eigen::Vector3d> valid_points(const PointCloud& cloud) {
  std::vector<Eigen::Vector3d> pts;
  pts.reserve(cloud.valid_count());
  for (Eigen::Index i = 0; i < cloud.points.cols(); ++i)
    if (cloud.valid[i]) pts.push_back(cloud.points.col(i));
  return pts;
}

inline Correspondences nearest_neighbors(const std::vector<Eigen::Vector3d>& source,
                                         const KdTree& target) {
  if (source.empty()) throw std::invalid_argument("nearest_neighbors: empty source cloud");
  Correspondences c;
  c.pairs.reserve(source.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < source.size(); ++i) {
    auto hit = target.nearest(source[i]);
    c.pairs.emplace_back(int(i), hit.index);
    acc += hit.dist2;
  }
  c.mean_sq_dist = acc / double(source.size());
  return c;
}

inline Correspondences nearest_neighbors(const PointCloud& source, const PointCloud& target) {
  auto tgt = valid_points(target);
  if (tgt.empty()) throw std::invalid_argument("nearest_neighbors: empty target cloud");
  KdTree tree(std::move(tgt));
  return nearest_neighbors(valid_points(source), tree);
}

// Least-squares rotation + translation via cross-covariance SVD with
// reflection correction. Degenerate configurations return identity.
inline Affine3 rigid_fit(const std::vector<Eigen::Vector3d>& source,
                         const std::vector<Eigen::Vector3d>& target, bool* degenerate = nullptr) {
  if (degenerate) *degenerate = false;
  if (source.size() != target.size() || source.size() < 3)
    throw std::invalid_argument("rigid_fit: need >= 3 matched pairs");
  Eigen::Vector3d mu_s = Eigen::Vector3d::Zero(), mu_t = Eigen::Vector3d::Zero();
  for (std::size_t i = 0; i < source.size(); ++i) {
    mu_s += source[i];
    mu_t += target[i];
  }
  mu_s /= double(source.size());
  mu_t /= double(source.size());
  Eigen::Matrix3d H = Eigen::Matrix3d::Zero();
  for (std::size_t i = 0; i < source.size(); ++i)
    H += (source[i] - mu_s) * (target[i] - mu_t).transpose();
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(H, Eigen::ComputeFullU | Eigen::ComputeFullV);
  if (svd.rank() < 2) {
    if (degenerate) *degenerate = true;
    return Affine3::identity();
  }
  Eigen::Matrix3d R = svd.matrixV() * svd.matrixU().transpose();
  if (R.determinant() < 0) {
    Eigen::Matrix3d V = svd.matrixV();
    V.col(2) *= -1.0;
    R = V * svd.matrixU().transpose();
  }
  Affine3 t;
  t.linear = R;
  t.translation = mu_t - R * mu_s;
  return t;
}

struct IcpResult {
  Affine3 transform;  // maps source onto target
  int iterations_used = 0;
  double mean_sq_dist = 0.0;
  bool converged = false;
  bool degenerate = false;
  std::vector<double> residual_history;  // mean squared distance per iteration
};

inline IcpResult icp(const std::vector<Eigen::Vector3d>& source,
                     const std::vector<Eigen::Vector3d>& target, int max_iter = 100,
                     double tol = 1e-9) {
  if (source.size() < 3 || target.size() < 3)
    throw std::invalid_argument("icp: need at least 3 points per cloud");
  KdTree tree(target);
  IcpResult result;
  std::vector<Eigen::Vector3d> current = source;
  double prev = std::numeric_limits<double>::infinity();
  for (int it = 0; it < max_iter; ++it) {
    auto corr = nearest_neighbors(current, tree);
    std::vector<Eigen::Vector3d> matched(current.size());
    for (const auto& [si, ti] : corr.pairs) matched[si] = tree.points()[ti];
    bool degenerate = false;
    Affine3 step = rigid_fit(current, matched, &degenerate);
    if (degenerate) {
      result.degenerate = true;
      break;
    }
    for (auto& p : current) p = step.apply(p);
    result.transform = compose(step, result.transform);
    // residual after applying the step, against the same correspondences
    double msd = 0.0;
    for (const auto& [si, ti] : corr.pairs)
      msd += (current[si] - tree.points()[ti]).squaredNorm();
    msd /= double(corr.pairs.size());
    result.residual_history.push_back(msd);
    result.mean_sq_dist = msd;
    result.iterations_used = it + 1;
    if (msd < tol || prev - msd < tol) {
      result.converged = true;
      break;
    }
    prev = msd;
  }
  return result;
}

inline IcpResult icp(const PointCloud& source, const PointCloud& target, int max_iter = 100,
                     double tol = 1e-9) {
  return icp(valid_points(source), valid_points(target), max_iter, tol);
}

}  // namespace kmorph
