#pragma once

#include <charconv>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "s3o/geom.hpp"

namespace s3o {

struct Bone {
  Vec3 center = Vec3::Zero();
  Mat3 precision = Mat3::Identity();  // symmetric positive definite
  double length = 1.0;
};

struct Joint {
  int i = 0;
  int j = 1;
  Vec3 position = Vec3::Zero();
};

struct Skeleton {
  std::vector<Bone> bones;
  std::vector<Joint> joints;

  int bone_count() const { return static_cast<int>(bones.size()); }
  int joint_count() const { return static_cast<int>(joints.size()); }

  std::vector<std::vector<int>> bone_adjacency() const {
    std::vector<std::vector<int>> adj(bones.size());
    for (const auto& j : joints) {
      adj[j.i].push_back(j.j);
      adj[j.j].push_back(j.i);
    }
    return adj;
  }

  // Joint indices touching bone b.
  std::vector<int> joints_of(int b) const {
    std::vector<int> out;
    for (int k = 0; k < joint_count(); ++k)
      if (joints[k].i == b || joints[k].j == b) out.push_back(k);
    return out;
  }

  int find_joint(int a, int b) const {
    for (int k = 0; k < joint_count(); ++k)
      if ((joints[k].i == a && joints[k].j == b) || (joints[k].i == b && joints[k].j == a)) return k;
    return -1;
  }

  bool operator==(const Skeleton& o) const {
    if (bones.size() != o.bones.size() || joints.size() != o.joints.size()) return false;
    for (std::size_t b = 0; b < bones.size(); ++b)
      if (bones[b].center != o.bones[b].center || bones[b].precision != o.bones[b].precision ||
          bones[b].length != o.bones[b].length)
        return false;
    for (std::size_t k = 0; k < joints.size(); ++k)
      if (joints[k].i != o.joints[k].i || joints[k].j != o.joints[k].j || joints[k].position != o.joints[k].position)
        return false;
    return true;
  }
};

inline bool is_positive_definite(const Mat3& q) {
  if (!q.allFinite() || (q - q.transpose()).cwiseAbs().maxCoeff() > 1e-9 * std::max(1.0, q.cwiseAbs().maxCoeff()))
    return false;
  Eigen::SelfAdjointEigenSolver<Mat3> es(0.5 * (q + q.transpose()));
  return es.eigenvalues().minCoeff() > 0.0;
}

// Empty string when valid, otherwise a description of the first violation.
inline std::string skeleton_violation(const Skeleton& s) {
  const int nb = s.bone_count();
  if (nb < 1) return "skeleton has no bones";
  for (int b = 0; b < nb; ++b) {
    const auto& bone = s.bones[b];
    if (!bone.center.allFinite()) return "bone " + std::to_string(b) + " center not finite";
    if (!is_positive_definite(bone.precision)) return "bone " + std::to_string(b) + " precision not symmetric PD";
    if (!(bone.length > 0.0) || !std::isfinite(bone.length)) return "bone " + std::to_string(b) + " length not positive";
  }
  if (s.joint_count() != nb - 1) return "joint count must be bone count - 1 for a tree";
  std::vector<int> parent(nb);
  for (int b = 0; b < nb; ++b) parent[b] = b;
  auto find = [&](int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (const auto& j : s.joints) {
    if (j.i < 0 || j.j < 0 || j.i >= nb || j.j >= nb || j.i == j.j) return "joint bone indices invalid";
    if (!j.position.allFinite()) return "joint position not finite";
    int a = find(j.i), b = find(j.j);
    if (a == b) return "bone graph has a cycle";
    parent[a] = b;
  }
  return {};
}

inline void validate_skeleton(const Skeleton& s) {
  auto why = skeleton_violation(s);
  require(why.empty(), ErrorCode::InvalidSkeleton, why);
}

// Bone axis: eigenvector of the smallest precision eigenvalue (the longest radius).
inline Vec3 bone_axis(const Bone& b) {
  Eigen::SelfAdjointEigenSolver<Mat3> es(b.precision);
  return es.eigenvectors().col(0);
}

// ---------------------------------------------------------------------------
// Text format:
//   skel B J
//   cx cy cz q00 q01 q02 q10 q11 q12 q20 q21 q22 length     (B lines)
//   i j x y z                                               (J lines)
// Numbers are written in shortest round-trip form, so read(write(s)) == s.

namespace detail {
inline void put_double(std::ostream& os, double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  os.write(buf, res.ptr - buf);
}

inline double parse_double(const std::string& tok, int line_no) {
  double v = 0.0;
  auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  require(res.ec == std::errc() && res.ptr == tok.data() + tok.size(), ErrorCode::Parse,
          "line " + std::to_string(line_no) + ": bad number '" + tok + "'");
  return v;
}

inline std::vector<std::string> tokens(const std::string& line) {
  std::istringstream ls(line);
  std::vector<std::string> out;
  std::string t;
  while (ls >> t) out.push_back(t);
  return out;
}
}  // namespace detail

inline void write_skel(std::ostream& os, const Skeleton& s) {
  os << "skel " << s.bone_count() << ' ' << s.joint_count() << '\n';
  for (const auto& b : s.bones) {
    for (int k = 0; k < 3; ++k) {
      detail::put_double(os, b.center[k]);
      os << ' ';
    }
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) {
        detail::put_double(os, b.precision(r, c));
        os << ' ';
      }
    detail::put_double(os, b.length);
    os << '\n';
  }
  for (const auto& j : s.joints) {
    os << j.i << ' ' << j.j;
    for (int k = 0; k < 3; ++k) {
      os << ' ';
      detail::put_double(os, j.position[k]);
    }
    os << '\n';
  }
}

inline void write_skel(const std::string& path, const Skeleton& s) {
  std::ofstream os(path);
  require(static_cast<bool>(os), ErrorCode::Io, "cannot write " + path);
  write_skel(os, s);
}

inline Skeleton read_skel(std::istream& is) {
  Skeleton s;
  std::string line;
  int line_no = 0;
  auto next_line = [&]() {
    while (std::getline(is, line)) {
      ++line_no;
      auto t = detail::tokens(line);
      if (!t.empty() && t[0][0] != '#') return t;
    }
    fail(ErrorCode::Parse, "skel: unexpected end of file");
  };
  auto head = next_line();
  require(head.size() == 3 && head[0] == "skel", ErrorCode::Parse, "skel: header must be 'skel B J'");
  int nb = 0, nj = 0;
  try {
    nb = std::stoi(head[1]);
    nj = std::stoi(head[2]);
  } catch (const std::exception&) {
    fail(ErrorCode::Parse, "skel: bad header counts");
  }
  require(nb >= 0 && nj >= 0, ErrorCode::Parse, "skel: negative counts");
  for (int b = 0; b < nb; ++b) {
    auto t = next_line();
    require(t.size() == 13, ErrorCode::Parse, "skel line " + std::to_string(line_no) + ": expected 13 numbers");
    Bone bone;
    for (int k = 0; k < 3; ++k) bone.center[k] = detail::parse_double(t[k], line_no);
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) bone.precision(r, c) = detail::parse_double(t[3 + 3 * r + c], line_no);
    bone.length = detail::parse_double(t[12], line_no);
    s.bones.push_back(bone);
  }
  for (int k = 0; k < nj; ++k) {
    auto t = next_line();
    require(t.size() == 5, ErrorCode::Parse, "skel line " + std::to_string(line_no) + ": expected 'i j x y z'");
    Joint j;
    try {
      j.i = std::stoi(t[0]);
      j.j = std::stoi(t[1]);
    } catch (const std::exception&) {
      fail(ErrorCode::Parse, "skel line " + std::to_string(line_no) + ": bad bone index");
    }
    for (int c = 0; c < 3; ++c) j.position[c] = detail::parse_double(t[2 + c], line_no);
    s.joints.push_back(j);
  }
  return s;
}

inline Skeleton read_skel(const std::string& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), ErrorCode::Io, "cannot read " + path);
  return read_skel(is);
}

}  // namespace s3o
