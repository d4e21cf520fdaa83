#pragma once

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <vector>

#include "s3o/geom.hpp"
#include "s3o/skeleton.hpp"

namespace s3o {

// N x B, rows are probability distributions over bones.
using SkinningWeights = Eigen::MatrixXd;

struct FrameParams {
  SE3 root;
  std::vector<SE3> bones;
  Camera camera;
};

inline FrameParams identity_params(int bone_count, const Camera& cam = {}) {
  return {SE3::identity(), std::vector<SE3>(bone_count), cam};
}

inline bool is_row_stochastic(const SkinningWeights& w, double tol = 1e-6) {
  if ((w.array() < 0).any() || !w.allFinite()) return false;
  for (Eigen::Index n = 0; n < w.rows(); ++n)
    if (std::abs(w.row(n).sum() - 1.0) > tol) return false;
  return true;
}

// Gaussian mixture responsibilities, evaluated in log space so far-away
// vertices still get a well-defined distribution.
inline SkinningWeights skinning_weights(const std::vector<Vec3>& vertices, const Skeleton& skeleton) {
  const int nb = skeleton.bone_count();
  require(nb >= 1, ErrorCode::InvalidSkeleton, "skinning needs at least one bone");
  const int n = static_cast<int>(vertices.size());
  SkinningWeights w(n, nb);
  std::vector<double> logp(nb);
  for (int i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int b = 0; b < nb; ++b) {
      Vec3 d = vertices[i] - skeleton.bones[b].center;
      logp[b] = -0.5 * d.dot(skeleton.bones[b].precision * d);
      mx = std::max(mx, logp[b]);
    }
    double sum = 0.0;
    for (int b = 0; b < nb; ++b) sum += (w(i, b) = std::exp(logp[b] - mx));
    w.row(i) /= sum;
  }
  return w;
}

inline SkinningWeights skinning_weights(const Mesh& mesh, const Skeleton& skeleton) {
  return skinning_weights(mesh.vertices, skeleton);
}

// Per-vertex blended affine map A = sum_b W(n,b) [R_b | t_b].
struct BlendedAffine {
  Mat3 linear;
  Vec3 offset;
};

// Rows sum to one, so accumulate the deviation from identity; an all-identity
// pose then reproduces its input bit for bit.
inline BlendedAffine blend_at(const SkinningWeights& w, int n, const FrameParams& fp) {
  BlendedAffine a{Mat3::Zero(), Vec3::Zero()};
  for (int b = 0; b < static_cast<int>(fp.bones.size()); ++b) {
    const double wb = w(n, b);
    if (wb == 0.0) continue;
    a.linear += wb * (fp.bones[b].rotation - Mat3::Identity());
    a.offset += wb * fp.bones[b].translation;
  }
  a.linear += Mat3::Identity();
  return a;
}

namespace detail {
inline void check_dims(std::size_t n, const SkinningWeights& w, const FrameParams& fp) {
  require(static_cast<Eigen::Index>(n) == w.rows(), ErrorCode::DimensionMismatch, "weight rows differ from vertex count");
  require(static_cast<Eigen::Index>(fp.bones.size()) == w.cols(), ErrorCode::DimensionMismatch,
          "weight columns differ from bone transform count");
}
}  // namespace detail

inline std::vector<Vec3> forward_skin(const std::vector<Vec3>& x, const SkinningWeights& w, const FrameParams& fp) {
  detail::check_dims(x.size(), w, fp);
  std::vector<Vec3> out(x.size());
  for (int n = 0; n < static_cast<int>(x.size()); ++n) {
    auto a = blend_at(w, n, fp);
    out[n] = fp.root.apply(a.linear * x[n] + a.offset);
  }
  return out;
}

inline Mesh forward_skin(const Mesh& mesh, const SkinningWeights& w, const FrameParams& fp) {
  Mesh out = mesh;
  out.vertices = forward_skin(mesh.vertices, w, fp);
  return out;
}

inline std::vector<Vec3> backward_skin(const std::vector<Vec3>& xt, const SkinningWeights& w, const FrameParams& fp) {
  detail::check_dims(xt.size(), w, fp);
  std::vector<Vec3> out(xt.size());
  for (int n = 0; n < static_cast<int>(xt.size()); ++n) {
    auto a = blend_at(w, n, fp);
    const Mat3 l = fp.root.rotation * a.linear;
    const Vec3 t = fp.root.rotation * a.offset + fp.root.translation;
    require(std::abs(l.determinant()) >= 1e-12, ErrorCode::SingularBlend,
            "blended transform of vertex " + std::to_string(n) + " is singular");
    out[n] = l.partialPivLu().solve(xt[n] - t);
  }
  return out;
}

inline Mesh backward_skin(const Mesh& mesh_t, const SkinningWeights& w, const FrameParams& fp) {
  Mesh out = mesh_t;
  out.vertices = backward_skin(mesh_t.vertices, w, fp);
  return out;
}

// Dense text dump: one row per vertex.
inline void write_weights(const std::string& path, const SkinningWeights& w) {
  std::ofstream os(path);
  require(static_cast<bool>(os), ErrorCode::Io, "cannot write " + path);
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (Eigen::Index n = 0; n < w.rows(); ++n) {
    for (Eigen::Index b = 0; b < w.cols(); ++b) os << (b ? " " : "") << w(n, b);
    os << '\n';
  }
}

}  // namespace s3o
