#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <tuple>
#include <vector>

#include "s3o/bone_motion.hpp"
#include "s3o/skeleton.hpp"
#include "s3o/skinning.hpp"

namespace s3o {

struct PartAssignment {
  std::vector<int> label;               // per vertex
  std::vector<std::vector<int>> parts;  // per bone
};

// Argmax of each weight row; ties go to the lowest bone index.
inline PartAssignment assign_parts(const SkinningWeights& w) {
  PartAssignment a;
  a.label.resize(w.rows());
  a.parts.resize(w.cols());
  for (Eigen::Index n = 0; n < w.rows(); ++n) {
    Eigen::Index best = 0;
    for (Eigen::Index b = 1; b < w.cols(); ++b)
      if (w(n, b) > w(n, best)) best = b;
    a.label[n] = static_cast<int>(best);
    a.parts[best].push_back(static_cast<int>(n));
  }
  return a;
}

inline Vec3 part_centroid(const std::vector<Vec3>& x, const std::vector<int>& idx) {
  Vec3 c = Vec3::Zero();
  for (int i : idx) c += x[i];
  return idx.empty() ? c : Vec3(c / double(idx.size()));
}

// Largest distance between two vertices of the part.
inline double part_extent(const std::vector<Vec3>& x, const std::vector<int>& idx) {
  double best = 0.0;
  for (std::size_t a = 0; a < idx.size(); ++a)
    for (std::size_t b = a + 1; b < idx.size(); ++b) best = std::max(best, (x[idx[a]] - x[idx[b]]).squaredNorm());
  return std::sqrt(best);
}

inline std::vector<double> part_extents(const std::vector<Vec3>& x, const SkinningWeights& w) {
  auto a = assign_parts(w);
  std::vector<double> out;
  for (const auto& p : a.parts) out.push_back(part_extent(x, p));
  return out;
}

// Bones touching exactly one joint.
inline std::vector<char> endpoint_bones(const Skeleton& s) {
  std::vector<int> deg(s.bone_count(), 0);
  for (const auto& j : s.joints) {
    ++deg[j.i];
    ++deg[j.j];
  }
  std::vector<char> out(s.bone_count());
  for (int b = 0; b < s.bone_count(); ++b) out[b] = deg[b] == 1;
  return out;
}

// Move each bone center to the centroid of its part.
inline Skeleton bone_shift(const Skeleton& s, const std::vector<Vec3>& x, const SkinningWeights& w) {
  require(w.cols() == s.bone_count() && w.rows() == static_cast<Eigen::Index>(x.size()), ErrorCode::DimensionMismatch,
          "bone_shift: weight matrix shape");
  Skeleton out = s;
  auto a = assign_parts(w);
  for (int b = 0; b < s.bone_count(); ++b) {
    if (a.parts[b].empty()) {
      warn("bone " + std::to_string(b) + " has no assigned vertices; center kept");
      continue;
    }
    out.bones[b].center = part_centroid(x, a.parts[b]);
  }
  return out;
}

// Precision of a bone shrunk by `factor` along unit direction d.
inline Mat3 shrink_along(const Mat3& q, const Vec3& d, double factor) {
  return q + (factor * factor - 1.0) * d.dot(q * d) * d * d.transpose();
}

struct GrowResult {
  Skeleton skeleton;
  std::vector<double> init_extents;
  int grown = 0;
};

// Endpoint parts that stretched beyond twice their initial extent are cut into
// k equal-count sections along the growth direction.
inline GrowResult grow_skeleton(const Skeleton& s, const std::vector<Vec3>& x, const SkinningWeights& w,
                                const std::vector<double>& init_extents, int k = 2) {
  require(k >= 2, ErrorCode::InvalidArgument, "grow_skeleton: k must be >= 2");
  require(static_cast<int>(init_extents.size()) == s.bone_count(), ErrorCode::DimensionMismatch,
          "grow_skeleton: one initial extent per bone expected");
  GrowResult r{s, init_extents, 0};
  auto a = assign_parts(w);
  auto ends = endpoint_bones(s);
  for (int b = 0; b < s.bone_count(); ++b) {
    if (!ends[b]) continue;
    const auto& part = a.parts[b];
    if (static_cast<int>(part.size()) < k) continue;
    double ext = part_extent(x, part);
    if (!(ext > 2.0 * init_extents[b])) continue;
    const Joint& jt = s.joints[s.joints_of(b)[0]];
    Vec3 dir = s.bones[b].center - jt.position;
    if (dir.norm() < 1e-12) {
      warn("grow_skeleton: bone " + std::to_string(b) + " center coincides with its joint; skipped");
      continue;
    }
    dir.normalize();
    std::vector<std::pair<double, int>> proj;
    for (int i : part) proj.emplace_back((x[i] - jt.position).dot(dir), i);
    std::sort(proj.begin(), proj.end());
    const int n = static_cast<int>(proj.size());
    std::vector<int> start(k + 1);
    for (int q = 0; q <= k; ++q) start[q] = static_cast<int>((static_cast<long>(n) * q) / k);
    std::vector<Vec3> centers(k);
    std::vector<double> extents(k);
    for (int q = 0; q < k; ++q) {
      std::vector<int> sec;
      for (int m = start[q]; m < start[q + 1]; ++m) sec.push_back(proj[m].second);
      centers[q] = part_centroid(x, sec);
      extents[q] = part_extent(x, sec);
    }
    Bone base = s.bones[b];
    base.precision = shrink_along(base.precision, dir, k);
    base.length = s.bones[b].length / k;
    int prev = b;
    for (int q = 0; q < k; ++q) {
      Bone nb = base;
      nb.center = centers[q];
      int idx = b;
      if (q == 0) {
        r.skeleton.bones[b] = nb;
        r.init_extents[b] = extents[q];
      } else {
        r.skeleton.bones.push_back(nb);
        r.init_extents.push_back(extents[q]);
        idx = r.skeleton.bone_count() - 1;
        double sb = 0.5 * (proj[start[q] - 1].first + proj[start[q]].first);
        Vec3 mid = 0.5 * (centers[q - 1] + centers[q]);
        Vec3 pos = jt.position + sb * dir + (mid - jt.position - (mid - jt.position).dot(dir) * dir);
        r.skeleton.joints.push_back({prev, idx, pos});
      }
      prev = idx;
    }
    ++r.grown;
  }
  validate_skeleton(r.skeleton);
  return r;
}

// Every bone is cut in two along its longest principal axis; the second half
// is appended at index B + b and the halves are joined at the old center.
inline Skeleton upsample_skeleton(const Skeleton& s) {
  validate_skeleton(s);
  const int nb = s.bone_count();
  Skeleton out;
  out.bones.resize(2 * nb);
  std::vector<Vec3> axis(nb);
  for (int b = 0; b < nb; ++b) {
    const Bone& bone = s.bones[b];
    Eigen::SelfAdjointEigenSolver<Mat3> es(bone.precision);
    const double lmin = es.eigenvalues()[0];
    Vec3 a = es.eigenvectors().col(0);
    Eigen::Index big;
    a.cwiseAbs().maxCoeff(&big);
    if (a[big] < 0) a = -a;
    axis[b] = a;
    const double r = 1.0 / std::sqrt(lmin);
    Bone half = bone;
    half.precision = bone.precision + 3.0 * lmin * a * a.transpose();
    half.length = 0.5 * bone.length;
    half.center = bone.center - 0.5 * r * a;
    out.bones[b] = half;
    half.center = bone.center + 0.5 * r * a;
    out.bones[nb + b] = half;
  }
  auto nearer = [&](int b, const Vec3& p) {
    double d0 = (p - out.bones[b].center).norm(), d1 = (p - out.bones[nb + b].center).norm();
    return d1 < d0 ? nb + b : b;
  };
  for (const auto& j : s.joints) {
    int i = nearer(j.i, j.position), k = nearer(j.j, j.position);
    out.joints.push_back({std::min(i, k), std::max(i, k), j.position});
  }
  for (int b = 0; b < nb; ++b) out.joints.push_back({b, nb + b, s.bones[b].center});
  validate_skeleton(out);
  return out;
}

// Mass-weighted softmax pair (w', w'') computed without overflow.
inline std::pair<double, double> softmax2(double a, double b) {
  double m = std::max(a, b);
  double ea = std::exp(a - m), eb = std::exp(b - m);
  return {ea / (ea + eb), eb / (ea + eb)};
}

inline constexpr double kMinFlowNorm = 1e-6;

// Minimum over frames of the cosine between the two bones' flows, skipping
// frames where either bone is unsupported. Two bones that both stand still
// move alike (1); one standing still while the other moves does not (0).
// nullopt when no frame qualifies.
inline std::optional<double> motion_similarity(const std::vector<BoneFlow>& flows, int a, int b,
                                               double min_norm = kMinFlowNorm) {
  std::optional<double> s;
  for (const auto& f : flows) {
    if (!f.supported[a] || !f.supported[b]) continue;
    const bool still_a = f.flow[a].norm() < min_norm, still_b = f.flow[b].norm() < min_norm;
    double c = still_a && still_b ? 1.0 : still_a || still_b ? 0.0 : cosine_similarity(f.flow[a], f.flow[b]);
    s = s ? std::min(*s, c) : c;
  }
  return s;
}

struct MergeResult {
  Skeleton skeleton;
  std::vector<int> bone_map;  // old bone index -> new index
  int merges = 0;
};

namespace detail {

// Far end of bone b as seen from joint `shared`.
inline Vec3 outer_extremity(const Skeleton& s, int b, int shared) {
  const Vec3& p = s.joints[shared].position;
  Vec3 best = p;
  double best_d = -1.0;
  for (int k : s.joints_of(b)) {
    if (k == shared) continue;
    double d = (s.joints[k].position - p).norm();
    if (d > best_d) {
      best_d = d;
      best = s.joints[k].position;
    }
  }
  if (best_d >= 0) return best;
  Vec3 dir = s.bones[b].center - p;
  if (dir.norm() < 1e-12) dir = bone_axis(s.bones[b]);
  return p + s.bones[b].length * dir.normalized();
}

// Remove bones flagged in `drop` (after redirecting them through `target`),
// and renumber everything.
inline MergeResult compact(Skeleton s, const std::vector<int>& target, const std::vector<int>& drop_joint) {
  const int nb = s.bone_count();
  MergeResult r;
  r.bone_map.assign(nb, -1);
  int next = 0;
  for (int b = 0; b < nb; ++b)
    if (target[b] == b) r.bone_map[b] = next++;
  for (int b = 0; b < nb; ++b) r.bone_map[b] = r.bone_map[target[b]];
  for (int b = 0; b < nb; ++b)
    if (target[b] == b) r.skeleton.bones.push_back(s.bones[b]);
  for (int k = 0; k < s.joint_count(); ++k) {
    if (drop_joint[k]) continue;
    Joint j = s.joints[k];
    int a = r.bone_map[j.i], c = r.bone_map[j.j];
    r.skeleton.joints.push_back({std::min(a, c), std::max(a, c), j.position});
  }
  return r;
}

}  // namespace detail

// Fuse joint-adjacent bones that moved together in every frame (similarity > t_o).
// Pairs are taken greedily by descending similarity and every bone is fused at
// most once per call; the fused bone keeps the lower index.
inline MergeResult merge_bones(const Skeleton& s, const std::vector<BoneFlow>& flows, double t_o,
                               const SkinningWeights& w) {
  validate_skeleton(s);
  require(w.cols() == s.bone_count(), ErrorCode::DimensionMismatch, "merge_bones: weight columns");
  for (const auto& f : flows)
    require(f.bone_count() == s.bone_count(), ErrorCode::DimensionMismatch, "merge_bones: bone flow size");
  std::vector<std::tuple<double, int>> cand;  // -score, joint
  for (int k = 0; k < s.joint_count(); ++k) {
    auto sim = motion_similarity(flows, s.joints[k].i, s.joints[k].j);
    if (sim && *sim > t_o) cand.emplace_back(-*sim, k);
  }
  std::sort(cand.begin(), cand.end());
  Skeleton work = s;
  std::vector<int> target(s.bone_count());
  std::iota(target.begin(), target.end(), 0);
  std::vector<char> used(s.bone_count(), 0);
  std::vector<int> drop(s.joint_count(), 0);
  int merges = 0;
  for (auto [neg, k] : cand) {
    int a = s.joints[k].i, b = s.joints[k].j;
    if (used[a] || used[b]) continue;
    used[a] = used[b] = 1;
    int keep = std::min(a, b), gone = std::max(a, b);
    auto [wa, wb] = softmax2(w.col(keep).sum(), w.col(gone).sum());
    Bone fused;
    fused.center = wa * s.bones[keep].center + wb * s.bones[gone].center;
    fused.precision = wa * s.bones[keep].precision + wb * s.bones[gone].precision;
    fused.length = (detail::outer_extremity(s, keep, k) - detail::outer_extremity(s, gone, k)).norm();
    fused.length = std::max(fused.length, 1e-9);
    work.bones[keep] = fused;
    target[gone] = keep;
    drop[k] = 1;
    ++merges;
  }
  auto r = detail::compact(work, target, drop);
  r.merges = merges;
  validate_skeleton(r.skeleton);
  return r;
}

struct SplitResult {
  Skeleton skeleton;
  int splits = 0;
  std::vector<int> boundary_bones;  // length varied but fewer than two joints
};

// The two joints of bone b that are farthest apart; nullopt with fewer than two.
inline std::optional<std::pair<int, int>> flanking_joints(const Skeleton& s, int b) {
  auto js = s.joints_of(b);
  if (js.size() < 2) return std::nullopt;
  std::pair<int, int> best{js[0], js[1]};
  double bd = -1.0;
  for (std::size_t x = 0; x < js.size(); ++x)
    for (std::size_t y = x + 1; y < js.size(); ++y) {
      double d = (s.joints[js[x]].position - s.joints[js[y]].position).norm();
      if (d > bd) {
        bd = d;
        best = {js[x], js[y]};
      }
    }
  return best;
}

// Bones whose per-frame length range exceeds t_d of their rest length gain a
// joint halfway between their two flanking joints.
inline SplitResult split_joints(const Skeleton& s, const std::vector<std::vector<double>>& frame_lengths, double t_d) {
  validate_skeleton(s);
  for (const auto& f : frame_lengths)
    require(static_cast<int>(f.size()) == s.bone_count(), ErrorCode::DimensionMismatch, "split_joints: lengths per frame");
  SplitResult r{s, 0, {}};
  const int nb = s.bone_count();
  for (int b = 0; b < nb; ++b) {
    if (frame_lengths.empty()) break;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& f : frame_lengths) {
      lo = std::min(lo, f[b]);
      hi = std::max(hi, f[b]);
    }
    if (!((hi - lo) / s.bones[b].length > t_d)) continue;
    auto fl = flanking_joints(s, b);
    if (!fl) {
      warn("split_joints: bone " + std::to_string(b) + " has fewer than two joints; skipped");
      r.boundary_bones.push_back(b);
      continue;
    }
    const Vec3 p = s.joints[fl->first].position, q = s.joints[fl->second].position;
    const Vec3 mid = 0.5 * (p + q);
    Vec3 d = q - p;
    d = d.norm() > 1e-12 ? Vec3(d.normalized()) : bone_axis(s.bones[b]);
    Bone half = s.bones[b];
    half.precision = shrink_along(half.precision, d, 2.0);
    Bone a = half, c = half;
    a.center = 0.5 * (p + mid);
    a.length = std::max((mid - p).norm(), 1e-9);
    c.center = 0.5 * (q + mid);
    c.length = std::max((q - mid).norm(), 1e-9);
    r.skeleton.bones[b] = a;
    r.skeleton.bones.push_back(c);
    const int nbi = r.skeleton.bone_count() - 1;
    for (int k : s.joints_of(b)) {
      Joint& j = r.skeleton.joints[k];
      bool to_new = k == fl->second ||
                    (k != fl->first && (j.position - c.center).norm() < (j.position - a.center).norm());
      if (!to_new) continue;
      if (j.i == b) j.i = nbi;
      else j.j = nbi;
      if (j.i > j.j) std::swap(j.i, j.j);
    }
    r.skeleton.joints.push_back({b, nbi, mid});
    ++r.splits;
  }
  validate_skeleton(r.skeleton);
  return r;
}

struct JointUpdate {
  Skeleton skeleton;
  std::vector<char> fallback;  // per joint: no vertex met the threshold
};

inline constexpr double kDefaultJointThreshold = 0.4;

// Joint position = mean of the vertices weighted at least t_r to both bones.
inline JointUpdate joint_positions(const Skeleton& s, const std::vector<Vec3>& x, const SkinningWeights& w,
                                   double t_r = kDefaultJointThreshold) {
  require(t_r > 0.0 && t_r <= 0.5, ErrorCode::InvalidArgument, "joint_positions: t_r must lie in (0, 0.5]");
  require(w.cols() == s.bone_count() && w.rows() == static_cast<Eigen::Index>(x.size()), ErrorCode::DimensionMismatch,
          "joint_positions: weight matrix shape");
  JointUpdate r{s, std::vector<char>(s.joint_count(), 0)};
  for (int k = 0; k < s.joint_count(); ++k) {
    const int i = s.joints[k].i, j = s.joints[k].j;
    Vec3 sum = Vec3::Zero();
    int count = 0;
    for (Eigen::Index n = 0; n < w.rows(); ++n)
      if (w(n, i) >= t_r && w(n, j) >= t_r) {
        sum += x[n];
        ++count;
      }
    if (count > 0) {
      r.skeleton.joints[k].position = sum / double(count);
    } else {
      r.skeleton.joints[k].position = 0.5 * (s.bones[i].center + s.bones[j].center);
      r.fallback[k] = 1;
    }
  }
  return r;
}

// Interior bones: distance between their flanking joints. Endpoint bones: the
// farthest assigned vertex along the direction away from the joint. Bones
// without joints: extent of the part along its principal axis.
inline std::vector<double> bone_lengths(const Skeleton& s, const std::vector<Vec3>& x, const SkinningWeights& w) {
  auto a = assign_parts(w);
  std::vector<double> out(s.bone_count());
  for (int b = 0; b < s.bone_count(); ++b) {
    double len = s.bones[b].length;
    const auto js = s.joints_of(b);
    const auto& part = a.parts[b];
    if (js.size() >= 2) {
      auto fl = *flanking_joints(s, b);
      len = (s.joints[fl.first].position - s.joints[fl.second].position).norm();
    } else if (js.size() == 1) {
      const Vec3& p = s.joints[js[0]].position;
      Vec3 dir = s.bones[b].center - p;
      if (dir.norm() < 1e-12) dir = bone_axis(s.bones[b]);
      dir.normalize();
      double far = -std::numeric_limits<double>::infinity();
      for (int i : part) far = std::max(far, (x[i] - p).dot(dir));
      if (std::isfinite(far) && far > 0) len = far;
    } else if (part.size() >= 2) {
      Vec3 c = part_centroid(x, part);
      Mat3 cov = Mat3::Zero();
      for (int i : part) cov += (x[i] - c) * (x[i] - c).transpose();
      Eigen::SelfAdjointEigenSolver<Mat3> es(cov);
      Vec3 ax = es.eigenvectors().col(2);
      double lo = std::numeric_limits<double>::infinity(), hi = -lo;
      for (int i : part) {
        double t = (x[i] - c).dot(ax);
        lo = std::min(lo, t);
        hi = std::max(hi, t);
      }
      if (hi > lo) len = hi - lo;
    }
    out[b] = std::max(len, 1e-9);
  }
  return out;
}

inline Skeleton with_lengths(Skeleton s, const std::vector<double>& lengths) {
  for (int b = 0; b < s.bone_count(); ++b) s.bones[b].length = lengths[b];
  return s;
}

// Skeleton carried into a frame: centers follow their bone, joints the mean
// of their two bones, precisions rotate with the bone.
inline Skeleton posed_skeleton(const Skeleton& s, const FrameParams& fp) {
  Skeleton out = s;
  for (int b = 0; b < s.bone_count(); ++b) {
    SE3 t = fp.root * fp.bones[b];
    out.bones[b].center = t.apply(s.bones[b].center);
    out.bones[b].precision = t.rotation * s.bones[b].precision * t.rotation.transpose();
  }
  for (auto& j : out.joints) {
    Vec3 p = 0.5 * (fp.bones[j.i].apply(j.position) + fp.bones[j.j].apply(j.position));
    j.position = fp.root.apply(p);
  }
  return out;
}

inline std::vector<double> frame_bone_lengths(const Skeleton& s, const std::vector<Vec3>& canonical,
                                              const SkinningWeights& w, const FrameParams& fp) {
  return bone_lengths(posed_skeleton(s, fp), forward_skin(canonical, w, fp), w);
}

// Structural comparison used for convergence: same bone count and joint pairs.
inline bool same_structure(const Skeleton& a, const Skeleton& b) {
  if (a.bone_count() != b.bone_count() || a.joint_count() != b.joint_count()) return false;
  for (int k = 0; k < a.joint_count(); ++k)
    if (a.joints[k].i != b.joints[k].i || a.joints[k].j != b.joints[k].j) return false;
  return true;
}

}  // namespace s3o
