#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "s3o/error.hpp"

namespace s3o {

using Vec3 = Eigen::Vector3d;
using Vec2 = Eigen::Vector2d;
using Mat3 = Eigen::Matrix3d;

// Image coordinates: u rightward, v downward, origin at the top-left corner of
// the image. Pixel (i, j) covers [i, i+1) x [j, j+1) and its center is at
// (i + 0.5, j + 0.5).
struct Pixel {
  double u = 0.0;
  double v = 0.0;
};

inline Mat3 rotation_from_axis_angle(const Vec3& w) {
  const double theta = w.norm();
  if (theta < 1e-300) return Mat3::Identity();
  return Eigen::AngleAxisd(theta, w / theta).toRotationMatrix();
}

inline Vec3 axis_angle_from_rotation(const Mat3& r) {
  Eigen::AngleAxisd aa(r);
  return aa.axis() * aa.angle();
}

// Nearest rotation in the Frobenius sense (polar decomposition via SVD).
inline Mat3 reorthonormalize(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 u = svd.matrixU();
  const Mat3& v = svd.matrixV();
  if ((u * v.transpose()).determinant() < 0.0) u.col(2) *= -1.0;
  return u * v.transpose();
}

struct SE3 {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static SE3 identity() { return {}; }
  static SE3 from_translation(const Vec3& t) { return {Mat3::Identity(), t}; }
  static SE3 from_rotation(const Mat3& r) { return {r, Vec3::Zero()}; }
  // Rotation by axis-angle w about the point `pivot`.
  static SE3 rotation_about(const Vec3& w, const Vec3& pivot) {
    Mat3 r = rotation_from_axis_angle(w);
    return {r, pivot - r * pivot};
  }

  Vec3 apply(const Vec3& x) const { return rotation * x + translation; }

  SE3 inverse() const {
    Mat3 rt = rotation.transpose();
    return {rt, -(rt * translation)};
  }

  SE3 operator*(const SE3& o) const {
    return {rotation * o.rotation, rotation * o.translation + translation};
  }

  // Left-multiplied increment: exp(w) applied after this transform.
  SE3 perturbed(const Vec3& w, const Vec3& dt) const {
    return {rotation_from_axis_angle(w) * rotation, translation + dt};
  }

  SE3 reorthonormalized() const { return {reorthonormalize(rotation), translation}; }

  bool is_valid(double tol = 1e-9) const {
    if (!rotation.allFinite() || !translation.allFinite()) return false;
    const double ortho = (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff();
    return ortho < tol && std::abs(rotation.determinant() - 1.0) < tol;
  }
};

inline Vec3 se3_apply(const SE3& t, const Vec3& x) { return t.apply(x); }
inline SE3 se3_inverse(const SE3& t) { return t.inverse(); }

struct Camera {
  SE3 extrinsic;  // world -> camera
  double focal = 1.0;
  Pixel principal;
  int width = 1;
  int height = 1;

  bool is_valid() const {
    return focal > 0.0 && std::isfinite(focal) && width > 0 && height > 0 && principal.u >= 0.0 &&
           principal.u <= width && principal.v >= 0.0 && principal.v <= height &&
           extrinsic.is_valid(1e-6);
  }

  void validate() const {
    require(is_valid(), ErrorCode::InvalidArgument, "camera: focal must be > 0 and principal point inside image");
  }
};

struct Projection {
  Pixel pixel;
  double depth = 0.0;
};

inline constexpr double kDepthEpsilon = 1e-9;

// Pinhole projection of a camera-space point; nullopt when not in front.
inline std::optional<Projection> project_camera_space(const Camera& cam, const Vec3& xc) {
  if (!(xc.z() > kDepthEpsilon)) return std::nullopt;
  return Projection{{cam.focal * xc.x() / xc.z() + cam.principal.u, cam.focal * xc.y() / xc.z() + cam.principal.v},
                    xc.z()};
}

inline std::optional<Projection> try_project(const Camera& cam, const Vec3& x) {
  return project_camera_space(cam, cam.extrinsic.apply(x));
}

inline Projection project(const Camera& cam, const Vec3& x) {
  auto p = try_project(cam, x);
  if (!p) fail(ErrorCode::BehindCamera, "point is not in front of the camera");
  return *p;
}

using Face = std::array<int, 3>;

struct Mesh {
  std::vector<Vec3> vertices;
  std::vector<Face> faces;
  std::optional<std::vector<Vec3>> colors;

  std::size_t size() const { return vertices.size(); }

  void validate() const {
    const int n = static_cast<int>(vertices.size());
    for (const auto& v : vertices)
      require(v.allFinite(), ErrorCode::InvalidMesh, "non-finite vertex coordinate");
    for (const auto& f : faces) {
      for (int idx : f)
        require(idx >= 0 && idx < n, ErrorCode::InvalidMesh, "face index out of range");
      require(f[0] != f[1] && f[1] != f[2] && f[0] != f[2], ErrorCode::InvalidMesh, "degenerate face");
    }
    if (colors)
      require(colors->size() == vertices.size(), ErrorCode::InvalidMesh, "color count differs from vertex count");
  }

  bool same_topology(const Mesh& other) const {
    return vertices.size() == other.vertices.size() && faces == other.faces;
  }
};

using Edge = std::pair<int, int>;

// Unique undirected edges, sorted, with first < second.
inline std::vector<Edge> mesh_edges(const Mesh& mesh) {
  std::vector<Edge> edges;
  edges.reserve(mesh.faces.size() * 3);
  for (const auto& f : mesh.faces) {
    for (int k = 0; k < 3; ++k) {
      int a = f[k], b = f[(k + 1) % 3];
      edges.emplace_back(std::min(a, b), std::max(a, b));
    }
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  return edges;
}

inline std::vector<std::vector<int>> vertex_neighbors(const Mesh& mesh) {
  std::vector<std::vector<int>> nbrs(mesh.vertices.size());
  for (const auto& [a, b] : mesh_edges(mesh)) {
    nbrs[a].push_back(b);
    nbrs[b].push_back(a);
  }
  return nbrs;
}

// True when every edge is shared by exactly two faces with opposite orientation.
inline bool is_closed_oriented_manifold(const Mesh& mesh) {
  std::map<Edge, int> directed;
  for (const auto& f : mesh.faces)
    for (int k = 0; k < 3; ++k) ++directed[{f[k], f[(k + 1) % 3]}];
  for (const auto& [e, count] : directed) {
    if (count != 1) return false;
    auto it = directed.find({e.second, e.first});
    if (it == directed.end() || it->second != 1) return false;
  }
  return true;
}

inline long euler_characteristic(const Mesh& mesh) {
  std::vector<char> used(mesh.vertices.size(), 0);
  for (const auto& f : mesh.faces)
    for (int i : f) used[i] = 1;
  long v = std::count(used.begin(), used.end(), 1);
  return v - static_cast<long>(mesh_edges(mesh).size()) + static_cast<long>(mesh.faces.size());
}

// Connected components over face adjacency (vertices without faces are ignored).
inline int mesh_component_count(const Mesh& mesh) {
  const int n = static_cast<int>(mesh.vertices.size());
  std::vector<int> parent(n);
  for (int i = 0; i < n; ++i) parent[i] = i;
  auto find = [&](int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  std::vector<char> used(n, 0);
  for (const auto& f : mesh.faces) {
    for (int i : f) used[i] = 1;
    parent[find(f[1])] = find(f[0]);
    parent[find(f[2])] = find(f[0]);
  }
  int count = 0;
  for (int i = 0; i < n; ++i)
    if (used[i] && find(i) == i) ++count;
  return count;
}

inline Vec3 centroid(const std::vector<Vec3>& pts) {
  Vec3 c = Vec3::Zero();
  if (pts.empty()) return c;
  for (const auto& p : pts) c += p;
  return c / static_cast<double>(pts.size());
}

inline double bbox_diagonal(const std::vector<Vec3>& pts) {
  if (pts.empty()) return 0.0;
  Vec3 lo = pts.front(), hi = pts.front();
  for (const auto& p : pts) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  return (hi - lo).norm();
}

// ---------------------------------------------------------------------------
// OBJ I/O: `v x y z [r g b]` and `f a b c` (1-based, `a/b/c` tokens accepted).

inline void write_obj(std::ostream& os, const Mesh& mesh) {
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    const auto& v = mesh.vertices[i];
    os << "v " << v.x() << ' ' << v.y() << ' ' << v.z();
    if (mesh.colors) {
      const auto& c = (*mesh.colors)[i];
      os << ' ' << c.x() << ' ' << c.y() << ' ' << c.z();
    }
    os << '\n';
  }
  for (const auto& f : mesh.faces) os << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
}

inline void write_obj(const std::string& path, const Mesh& mesh) {
  std::ofstream os(path);
  require(static_cast<bool>(os), ErrorCode::Io, "cannot write " + path);
  write_obj(os, mesh);
}

inline Mesh read_obj(std::istream& is) {
  Mesh mesh;
  std::vector<Vec3> colors;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag) || tag[0] == '#') continue;
    if (tag == "v") {
      std::vector<double> vals;
      double x;
      while (ls >> x) vals.push_back(x);
      require(vals.size() == 3 || vals.size() == 6, ErrorCode::Parse,
              "obj line " + std::to_string(line_no) + ": expected 3 or 6 values");
      mesh.vertices.emplace_back(vals[0], vals[1], vals[2]);
      if (vals.size() == 6) colors.emplace_back(vals[3], vals[4], vals[5]);
    } else if (tag == "f") {
      std::vector<int> idx;
      std::string tok;
      while (ls >> tok) {
        int i = 0;
        try {
          i = std::stoi(tok.substr(0, tok.find('/')));
        } catch (const std::exception&) {
          fail(ErrorCode::Parse, "obj line " + std::to_string(line_no) + ": bad face index");
        }
        if (i < 0) i = static_cast<int>(mesh.vertices.size()) + i + 1;
        idx.push_back(i - 1);
      }
      require(idx.size() >= 3, ErrorCode::Parse, "obj line " + std::to_string(line_no) + ": face needs 3 indices");
      for (std::size_t k = 1; k + 1 < idx.size(); ++k) mesh.faces.push_back({idx[0], idx[k], idx[k + 1]});
    }
  }
  if (!colors.empty()) {
    require(colors.size() == mesh.vertices.size(), ErrorCode::Parse, "obj: colors given for only some vertices");
    mesh.colors = std::move(colors);
  }
  mesh.validate();
  return mesh;
}

inline Mesh read_obj(const std::string& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), ErrorCode::Io, "cannot read " + path);
  return read_obj(is);
}

}  // namespace s3o
