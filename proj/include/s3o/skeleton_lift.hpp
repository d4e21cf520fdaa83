#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "s3o/geom.hpp"
#include "s3o/image.hpp"
#include "s3o/silhouette_skeleton.hpp"
#include "s3o/skeleton.hpp"

namespace s3o {

struct PartEllipsoid {
  Vec3 center = Vec3::Zero();
  Mat3 axes = Mat3::Identity();  // columns are the principal directions; column 0 is the major axis
  Vec3 radii = Vec3::Ones();
  int part_id = 0;

  Mat3 precision() const { return axes * radii.cwiseInverse().cwiseAbs2().asDiagonal() * axes.transpose(); }
  Vec3 tip(double sign) const { return center + sign * radii[0] * axes.col(0); }
  double mean_transverse_radius() const { return 0.5 * (radii[1] + radii[2]); }
};

struct PartDescriptor {
  int part_id = 0;
  std::vector<double> feature;
  double bone_length = 0.0;
  double mean_radius = 0.0;
};

inline PartEllipsoid ellipsoid_from_bone(const Bone& b, int id = 0) {
  Eigen::SelfAdjointEigenSolver<Mat3> es(b.precision);
  PartEllipsoid e;
  e.center = b.center;
  e.part_id = id;
  // Ascending eigenvalues give descending radii.
  e.axes = es.eigenvectors();
  if (e.axes.determinant() < 0) e.axes.col(2) *= -1.0;
  for (int k = 0; k < 3; ++k) e.radii[k] = 1.0 / std::sqrt(es.eigenvalues()[k]);
  return e;
}

inline std::vector<PartEllipsoid> ellipsoids_from_skeleton(const Skeleton& s) {
  std::vector<PartEllipsoid> out;
  for (int b = 0; b < s.bone_count(); ++b) out.push_back(ellipsoid_from_bone(s.bones[b], b));
  return out;
}

// Position along a pixel trace at arc length `s` from its start.
inline Vec2 trace_point_at(const std::vector<std::pair<int, int>>& t, double s) {
  auto c = [&](std::size_t i) { return Vec2(t[i].first + 0.5, t[i].second + 0.5); };
  if (t.size() == 1) return c(0);
  double acc = 0.0;
  for (std::size_t i = 1; i < t.size(); ++i) {
    double step = (c(i) - c(i - 1)).norm();
    if (acc + step >= s) {
      double f = step > 0 ? (s - acc) / step : 0.0;
      return c(i - 1) + f * (c(i) - c(i - 1));
    }
    acc += step;
  }
  return c(t.size() - 1);
}

// One ellipsoid per graph edge, in pixel units on the z = 0 plane.
inline std::vector<PartEllipsoid> fit_part_ellipsoids(const SkeletonGraph2D& graph, const BinaryMask& mask,
                                                      double min_radius = 0.5) {
  require(!graph.edges.empty(), ErrorCode::EmptyGraph, "skeleton graph has no edges");
  const Grid<double> dist = distance_to_background(mask);
  const std::vector<int> degree = graph.degrees();
  std::vector<PartEllipsoid> out;
  for (int e = 0; e < static_cast<int>(graph.edges.size()); ++e) {
    const auto& edge = graph.edges[e];
    const auto& t = edge.trace;
    Vec2 start(t.front().first + 0.5, t.front().second + 0.5), end(t.back().first + 0.5, t.back().second + 0.5);
    Vec2 dir = end - start;
    const Vec2 dir_open = dir;
    if (dir.norm() < 1e-9) {
      // closed trace: use the principal direction of its pixels
      Vec2 m = Vec2::Zero();
      for (auto [x, y] : t) m += Vec2(x + 0.5, y + 0.5);
      m /= double(t.size());
      Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();
      for (auto [x, y] : t) {
        Vec2 d = Vec2(x + 0.5, y + 0.5) - m;
        cov += d * d.transpose();
      }
      Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(cov);
      dir = es.eigenvectors().col(1);
    }
    dir.normalize();
    double thick = 0.0;
    for (auto [x, y] : t) thick += mask.contains(x, y) ? dist(x, y) : 0.0;
    thick /= double(t.size());

    // Thinning stops about one radius short of a free end; grow leaf ends
    // back out to the boundary.
    auto tip = [&](int node, std::pair<int, int> px) {
      if (degree[node] != 1 || dir_open.norm() < 1e-9) return 0.0;
      return mask.contains(px.first, px.second) ? dist(px.first, px.second) : 0.0;
    };
    const double ext_a = tip(edge.a, t.front()), ext_b = tip(edge.b, t.back());
    const double span = edge.arc_length + ext_a + ext_b;

    PartEllipsoid pe;
    pe.part_id = e;
    Vec2 c = trace_point_at(t, 0.5 * edge.arc_length) + 0.5 * (ext_b - ext_a) * dir;
    pe.center = Vec3(c.x(), c.y(), 0.0);
    pe.axes.col(0) = Vec3(dir.x(), dir.y(), 0.0);
    pe.axes.col(1) = Vec3(-dir.y(), dir.x(), 0.0);
    pe.axes.col(2) = Vec3(0.0, 0.0, 1.0);
    pe.radii = Vec3(std::max(0.5 * span, min_radius), std::max(thick, min_radius),
                    std::max(thick, min_radius));
    out.push_back(pe);
  }
  return out;
}

inline std::vector<PartDescriptor> describe_parts(const std::vector<PartEllipsoid>& parts,
                                                  const SkeletonGraph2D& graph) {
  std::vector<PartDescriptor> out;
  for (const auto& p : parts)
    out.push_back({p.part_id, {}, graph.edges.at(p.part_id).arc_length, p.mean_transverse_radius()});
  return out;
}

// Descriptor table, one part per line: `part_id bone_length mean_radius f0 f1 ...`
// (whitespace or comma separated, '#' starts a comment line).
inline std::vector<PartDescriptor> read_descriptors(const std::string& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), ErrorCode::Io, "cannot read " + path);
  std::vector<PartDescriptor> out;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    std::replace(line.begin(), line.end(), ',', ' ');
    auto t = detail::tokens(line);
    if (t.empty() || t[0][0] == '#') continue;
    require(t.size() >= 3, ErrorCode::Parse, path + ":" + std::to_string(line_no) + ": need id, length, radius");
    PartDescriptor d;
    try {
      d.part_id = std::stoi(t[0]);
    } catch (const std::exception&) {
      fail(ErrorCode::Parse, path + ":" + std::to_string(line_no) + ": bad part id");
    }
    d.bone_length = detail::parse_double(t[1], line_no);
    d.mean_radius = detail::parse_double(t[2], line_no);
    for (std::size_t k = 3; k < t.size(); ++k) d.feature.push_back(detail::parse_double(t[k], line_no));
    out.push_back(std::move(d));
  }
  return out;
}

namespace detail {
inline double rel_diff(double a, double b) {
  double m = std::max(std::abs(a), std::abs(b));
  return m > 0 ? std::abs(a - b) / m : 0.0;
}
}  // namespace detail

struct PartPair {
  int first = 0;
  int second = 0;
  bool operator==(const PartPair&) const = default;
};

// Disjoint pairs of parts that look alike and attach to the skeleton in the
// same way. Parts on a common node are preferred over parts on neighbouring
// nodes; within a tier pairs are taken greedily by ascending score.
inline std::vector<PartPair> match_symmetric_parts(const std::vector<PartDescriptor>& descriptors,
                                                   const SkeletonGraph2D& graph, double tol = 0.15) {
  const int n = static_cast<int>(descriptors.size());
  const auto deg = graph.degrees();
  auto edge_of = [&](int d) -> const SkeletonEdge* {
    int id = descriptors[d].part_id;
    return id >= 0 && id < static_cast<int>(graph.edges.size()) ? &graph.edges[id] : nullptr;
  };
  auto is_leaf = [&](const SkeletonEdge& e) { return deg[e.a] == 1 || deg[e.b] == 1; };
  auto attach = [&](const SkeletonEdge& e) {
    std::vector<int> out;
    if (deg[e.a] != 1) out.push_back(e.a);
    if (deg[e.b] != 1) out.push_back(e.b);
    return out;
  };
  auto joined = [&](int u, int v, const SkeletonEdge* skip1, const SkeletonEdge* skip2) {
    for (const auto& e : graph.edges)
      if (&e != skip1 && &e != skip2 && ((e.a == u && e.b == v) || (e.a == v && e.b == u))) return true;
    return false;
  };

  std::vector<std::tuple<int, double, int, int>> candidates;  // tier, score, i, j
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const auto &di = descriptors[i], &dj = descriptors[j];
      double fd = 0.0;
      if (!di.feature.empty() && di.feature.size() == dj.feature.size()) {
        Eigen::Map<const Eigen::VectorXd> fi(di.feature.data(), di.feature.size());
        Eigen::Map<const Eigen::VectorXd> fj(dj.feature.data(), dj.feature.size());
        double m = std::max(fi.norm(), fj.norm());
        fd = m > 0 ? (fi - fj).norm() / m : 0.0;
      }
      double ld = detail::rel_diff(di.bone_length, dj.bone_length);
      double rd = detail::rel_diff(di.mean_radius, dj.mean_radius);
      if (!(fd < tol && ld < tol && rd < tol)) continue;
      const SkeletonEdge* ei = edge_of(i);
      const SkeletonEdge* ej = edge_of(j);
      if (!ei || !ej || is_leaf(*ei) != is_leaf(*ej)) continue;
      int tier = -1;
      for (int u : {ei->a, ei->b})
        for (int v : {ej->a, ej->b})
          if (u == v) tier = 0;
      if (tier < 0)
        for (int u : attach(*ei))
          for (int v : attach(*ej))
            if (joined(u, v, ei, ej)) tier = 1;
      if (tier < 0) continue;
      candidates.emplace_back(tier, fd + ld + rd, i, j);
    }
  std::sort(candidates.begin(), candidates.end());
  std::vector<char> used(n, 0);
  std::vector<PartPair> out;
  for (auto [tier, score, i, j] : candidates) {
    if (used[i] || used[j]) continue;
    used[i] = used[j] = 1;
    out.push_back({descriptors[i].part_id, descriptors[j].part_id});
  }
  return out;
}

// Ellipsoids moved off the image plane: paired parts are averaged and placed
// at z = +s and z = -s, everything else stays at z = 0.
inline std::vector<PartEllipsoid> lift_parts(const std::vector<PartEllipsoid>& parts,
                                             const std::vector<PartPair>& pairs, double separation = -1.0) {
  const int n = static_cast<int>(parts.size());
  std::vector<int> seen(n, 0);
  for (const auto& p : pairs) {
    require(p.first >= 0 && p.first < n && p.second >= 0 && p.second < n && p.first != p.second,
            ErrorCode::InvalidPairs, "pair refers to an unknown part");
    require(++seen[p.first] == 1 && ++seen[p.second] == 1, ErrorCode::InvalidPairs, "a part appears in two pairs");
  }
  std::vector<PartEllipsoid> out = parts;
  for (auto& e : out) e.center.z() = 0.0;
  for (const auto& p : pairs) {
    const auto &a = parts[p.first], &b = parts[p.second];
    Vec3 da = a.axes.col(0), db = b.axes.col(0);
    if (da.dot(db) < 0) db = -db;
    Vec3 major = (da + db).normalized();
    Vec3 up(0, 0, 1);
    Vec3 side = up.cross(major);
    if (side.norm() < 1e-9) side = Vec3(1, 0, 0).cross(major);
    side.normalize();
    Mat3 axes;
    axes.col(0) = major;
    axes.col(1) = side;
    axes.col(2) = major.cross(side);
    Vec3 radii = 0.5 * (a.radii + b.radii);
    double s = separation > 0 ? separation : 0.5 * (a.mean_transverse_radius() + b.mean_transverse_radius());
    Vec3 c = 0.5 * (a.center + b.center);
    for (int k = 0; k < 2; ++k) {
      PartEllipsoid& e = out[k == 0 ? p.first : p.second];
      e.axes = axes;
      e.radii = radii;
      e.center = Vec3(c.x(), c.y(), k == 0 ? s : -s);
    }
  }
  return out;
}

// Bones from the lifted ellipsoids; joints wherever parts meet at a graph node.
inline Skeleton lift_to_3d(const SkeletonGraph2D& graph, const std::vector<PartEllipsoid>& parts,
                           const std::vector<PartPair>& pairs, double separation = -1.0) {
  require(!parts.empty(), ErrorCode::EmptyGraph, "no parts to lift");
  require(parts.size() == graph.edges.size(), ErrorCode::DimensionMismatch, "one ellipsoid per graph edge expected");
  auto lifted = lift_parts(parts, pairs, separation);
  const int n = static_cast<int>(lifted.size());

  Skeleton s;
  std::vector<double> length(n);
  for (int e = 0; e < n; ++e) length[e] = graph.edges[e].arc_length;
  for (const auto& p : pairs) length[p.first] = length[p.second] = 0.5 * (length[p.first] + length[p.second]);
  for (int e = 0; e < n; ++e) s.bones.push_back({lifted[e].center, lifted[e].precision(), std::max(length[e], 1e-6)});

  const auto deg = graph.degrees();
  auto is_leaf = [&](int e) { return deg[graph.edges[e].a] == 1 || deg[graph.edges[e].b] == 1; };
  std::vector<int> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  std::function<int(int)> find = [&](int x) { return parent[x] == x ? x : parent[x] = find(parent[x]); };

  for (int node = 0; node < static_cast<int>(graph.nodes.size()); ++node) {
    auto inc = graph.incident_edges(node);
    if (inc.size() < 2) continue;
    int hub = *std::min_element(inc.begin(), inc.end(), [&](int a, int b) {
      return std::make_tuple(is_leaf(a), -graph.edges[a].arc_length, a) <
             std::make_tuple(is_leaf(b), -graph.edges[b].arc_length, b);
    });
    const Vec3 np(graph.nodes[node].position.u, graph.nodes[node].position.v, 0.0);
    auto nearest_tip = [&](int e) {
      Vec3 t0 = lifted[e].tip(1.0), t1 = lifted[e].tip(-1.0);
      Vec3 d0 = t0 - np, d1 = t1 - np;
      d0.z() = d1.z() = 0.0;  // the node lies on the image plane
      return d0.norm() <= d1.norm() ? t0 : t1;
    };
    for (int e : inc) {
      if (e == hub || find(e) == find(hub)) continue;
      parent[find(e)] = find(hub);
      s.joints.push_back({std::min(hub, e), std::max(hub, e), 0.5 * (nearest_tip(hub) + nearest_tip(e))});
    }
  }
  validate_skeleton(s);
  return s;
}

// ---------------------------------------------------------------------------
// Coarse mesh

inline Mesh icosphere(int level) {
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  Mesh m;
  m.vertices = {{-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
                {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
  for (auto& v : m.vertices) v.normalize();
  m.faces = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
             {11, 10, 2}, {10, 7, 6}, {7, 1, 8},  {3, 9, 4},  {3, 4, 2},   {3, 2, 6}, {3, 6, 8},
             {3, 8, 9},  {4, 9, 5},  {2, 4, 11},  {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};
  for (int l = 0; l < level; ++l) {
    std::map<std::pair<int, int>, int> mid;
    auto midpoint = [&](int a, int b) {
      auto key = std::minmax(a, b);
      auto it = mid.find(key);
      if (it != mid.end()) return it->second;
      m.vertices.push_back((m.vertices[a] + m.vertices[b]).normalized());
      int id = static_cast<int>(m.vertices.size()) - 1;
      mid.emplace(key, id);
      return id;
    };
    std::vector<Face> next;
    next.reserve(m.faces.size() * 4);
    for (const auto& f : m.faces) {
      int a = midpoint(f[0], f[1]), b = midpoint(f[1], f[2]), c = midpoint(f[2], f[0]);
      next.push_back({f[0], a, c});
      next.push_back({f[1], b, a});
      next.push_back({f[2], c, b});
      next.push_back({a, b, c});
    }
    m.faces = std::move(next);
  }
  return m;
}

struct Capsule {
  Vec3 a;
  Vec3 b;
  double radius;
};

// Signed implicit function of a union of ellipsoids and capsules: negative
// inside, zero on the surface (each primitive normalized by its own size).
struct PrimitiveUnion {
  std::vector<PartEllipsoid> ellipsoids;
  std::vector<Capsule> capsules;

  double value(const Vec3& x) const {
    double f = std::numeric_limits<double>::infinity();
    for (const auto& e : ellipsoids) {
      Vec3 l = e.axes.transpose() * (x - e.center);
      f = std::min(f, l.cwiseQuotient(e.radii).norm() - 1.0);
    }
    for (const auto& c : capsules) {
      Vec3 ab = c.b - c.a;
      double t = ab.squaredNorm() > 0 ? std::clamp((x - c.a).dot(ab) / ab.squaredNorm(), 0.0, 1.0) : 0.0;
      f = std::min(f, (x - (c.a + t * ab)).norm() / c.radius - 1.0);
    }
    return f;
  }

  void bounds(Vec3& lo, Vec3& hi) const {
    lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    hi = -lo;
    for (const auto& e : ellipsoids) {
      // axis-aligned half extents of a rotated ellipsoid
      Vec3 ext;
      for (int k = 0; k < 3; ++k) ext[k] = (e.axes.row(k).transpose().cwiseProduct(e.radii)).norm();
      lo = lo.cwiseMin(e.center - ext);
      hi = hi.cwiseMax(e.center + ext);
    }
    for (const auto& c : capsules) {
      lo = lo.cwiseMin(c.a.cwiseMin(c.b) - Vec3::Constant(c.radius));
      hi = hi.cwiseMax(c.a.cwiseMax(c.b) + Vec3::Constant(c.radius));
    }
  }

  double min_feature_size() const {
    double m = std::numeric_limits<double>::infinity();
    for (const auto& e : ellipsoids) m = std::min(m, e.radii.minCoeff());
    for (const auto& c : capsules) m = std::min(m, c.radius);
    return m;
  }
};

struct CoarseMeshOptions {
  int sphere_level = 4;       // single-ellipsoid case
  int grid_resolution = 40;   // cells along the longest bounding-box side
  int max_grid_resolution = 96;
  std::function<void(Mesh&)> resample;  // post-processing hook; unset means no-op
};

struct CoarseMeshReport {
  int components_before_bridging = 1;
  int bridges = 0;
};

namespace detail {

struct GridSampler {
  Vec3 origin;
  double h;
  int nx, ny, nz;
  std::vector<double> values;

  int index(int i, int j, int k) const { return (k * (ny + 1) + j) * (nx + 1) + i; }
  Vec3 pos(int i, int j, int k) const { return origin + h * Vec3(i, j, k); }
};

inline GridSampler sample_union(const PrimitiveUnion& u, const CoarseMeshOptions& opt) {
  Vec3 lo, hi;
  u.bounds(lo, hi);
  double extent = (hi - lo).maxCoeff();
  double h = extent / opt.grid_resolution;
  h = std::min(h, u.min_feature_size() / 1.5);
  h = std::max(h, extent / opt.max_grid_resolution);
  GridSampler g;
  g.h = h;
  g.origin = lo - Vec3::Constant(2 * h);
  Vec3 span = hi - lo + Vec3::Constant(4 * h);
  g.nx = static_cast<int>(std::ceil(span.x() / h));
  g.ny = static_cast<int>(std::ceil(span.y() / h));
  g.nz = static_cast<int>(std::ceil(span.z() / h));
  g.values.resize(static_cast<std::size_t>(g.nx + 1) * (g.ny + 1) * (g.nz + 1));
  for (int k = 0; k <= g.nz; ++k)
    for (int j = 0; j <= g.ny; ++j)
      for (int i = 0; i <= g.nx; ++i) {
        double v = u.value(g.pos(i, j, k));
        if (v == 0.0) v = 1e-12;  // keep the surface off grid points
        g.values[g.index(i, j, k)] = v;
      }
  return g;
}

// Inside grid points grouped into 6-connected components; returns the label per point (-1 outside).
inline std::vector<int> inside_components(const GridSampler& g, int& count) {
  std::vector<int> label(g.values.size(), -1);
  count = 0;
  std::vector<int> stack;
  for (int k = 0; k <= g.nz; ++k)
    for (int j = 0; j <= g.ny; ++j)
      for (int i = 0; i <= g.nx; ++i) {
        int id = g.index(i, j, k);
        if (g.values[id] >= 0 || label[id] >= 0) continue;
        label[id] = count;
        stack.push_back(id);
        while (!stack.empty()) {
          int c = stack.back();
          stack.pop_back();
          int ci = c % (g.nx + 1), cj = (c / (g.nx + 1)) % (g.ny + 1), ck = c / ((g.nx + 1) * (g.ny + 1));
          const int d[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
          for (const auto& o : d) {
            int a = ci + o[0], b = cj + o[1], cc = ck + o[2];
            if (a < 0 || b < 0 || cc < 0 || a > g.nx || b > g.ny || cc > g.nz) continue;
            int n = g.index(a, b, cc);
            if (g.values[n] < 0 && label[n] < 0) {
              label[n] = count;
              stack.push_back(n);
            }
          }
        }
        ++count;
      }
  return label;
}

// Marching tetrahedra over a Kuhn subdivision of every grid cell. The six
// tetrahedra share the cell diagonal 0-7, so neighbouring cells agree on their
// shared faces and the extracted surface is closed.
inline Mesh marching_tetrahedra(const PrimitiveUnion& u, const GridSampler& g) {
  Mesh mesh;
  std::unordered_map<long long, int> edge_vertex;
  const long long total = static_cast<long long>(g.values.size());
  auto vertex_on = [&](int a, int b) {
    long long key = a < b ? a * total + b : b * total + a;
    auto it = edge_vertex.find(key);
    if (it != edge_vertex.end()) return it->second;
    auto coords = [&](int id) {
      return g.pos(id % (g.nx + 1), (id / (g.nx + 1)) % (g.ny + 1), id / ((g.nx + 1) * (g.ny + 1)));
    };
    Vec3 pin = coords(a), pout = coords(b);
    if (g.values[a] >= 0) std::swap(pin, pout);
    for (int it2 = 0; it2 < 40; ++it2) {
      Vec3 m = 0.5 * (pin + pout);
      (u.value(m) < 0 ? pin : pout) = m;
    }
    mesh.vertices.push_back(0.5 * (pin + pout));
    int id = static_cast<int>(mesh.vertices.size()) - 1;
    edge_vertex.emplace(key, id);
    return id;
  };
  static const int cube[8][3] = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {1, 1, 0},
                                 {0, 0, 1}, {1, 0, 1}, {0, 1, 1}, {1, 1, 1}};
  static const int tets[6][4] = {{0, 1, 3, 7}, {0, 3, 2, 7}, {0, 2, 6, 7}, {0, 6, 4, 7}, {0, 4, 5, 7}, {0, 5, 1, 7}};
  auto emit = [&](int a, int b, int c, const Vec3& inside_to_outside) {
    if (a == b || b == c || a == c) return;
    Vec3 n = (mesh.vertices[b] - mesh.vertices[a]).cross(mesh.vertices[c] - mesh.vertices[a]);
    if (n.dot(inside_to_outside) < 0) std::swap(b, c);
    mesh.faces.push_back({a, b, c});
  };
  for (int k = 0; k < g.nz; ++k)
    for (int j = 0; j < g.ny; ++j)
      for (int i = 0; i < g.nx; ++i) {
        int corner[8];
        for (int c = 0; c < 8; ++c) corner[c] = g.index(i + cube[c][0], j + cube[c][1], k + cube[c][2]);
        for (const auto& t : tets) {
          int ids[4] = {corner[t[0]], corner[t[1]], corner[t[2]], corner[t[3]]};
          std::vector<int> in, out;
          for (int id : ids) (g.values[id] < 0 ? in : out).push_back(id);
          if (in.empty() || out.empty()) continue;
          auto p = [&](int id) {
            return g.pos(id % (g.nx + 1), (id / (g.nx + 1)) % (g.ny + 1), id / ((g.nx + 1) * (g.ny + 1)));
          };
          Vec3 cin = Vec3::Zero(), cout = Vec3::Zero();
          for (int id : in) cin += p(id);
          for (int id : out) cout += p(id);
          Vec3 dir = cout / double(out.size()) - cin / double(in.size());
          if (in.size() == 1 || out.size() == 1) {
            bool single_in = in.size() == 1;
            int s = single_in ? in[0] : out[0];
            const auto& others = single_in ? out : in;
            int v0 = vertex_on(s, others[0]), v1 = vertex_on(s, others[1]), v2 = vertex_on(s, others[2]);
            emit(v0, v1, v2, dir);
          } else {
            int a = vertex_on(in[0], out[0]), b = vertex_on(in[0], out[1]);
            int c = vertex_on(in[1], out[1]), d = vertex_on(in[1], out[0]);
            emit(a, b, c, dir);
            emit(a, c, d, dir);
          }
        }
      }
  return mesh;
}

}  // namespace detail

// Closed triangle surface of the union of the given ellipsoids. A single
// ellipsoid is a mapped icosphere; several are meshed through their implicit
// union. Pieces that do not touch are joined by capsules along `links`
// (or along a spanning tree of nearest centers when no link connects them).
inline Mesh coarse_mesh_from_ellipsoids(const std::vector<PartEllipsoid>& ellipsoids,
                                        const std::vector<std::pair<int, int>>& links = {},
                                        const CoarseMeshOptions& opt = {}, CoarseMeshReport* report = nullptr) {
  require(!ellipsoids.empty(), ErrorCode::InvalidArgument, "coarse mesh needs at least one ellipsoid");
  for (const auto& e : ellipsoids)
    require((e.radii.array() > 0).all() && e.center.allFinite(), ErrorCode::InvalidArgument, "ellipsoid radii must be > 0");
  CoarseMeshReport rep;
  Mesh mesh;
  if (ellipsoids.size() == 1) {
    const auto& e = ellipsoids[0];
    mesh = icosphere(opt.sphere_level);
    for (auto& v : mesh.vertices) v = e.center + e.axes * v.cwiseProduct(e.radii);
  } else {
    PrimitiveUnion u;
    u.ellipsoids = ellipsoids;
    auto g = detail::sample_union(u, opt);
    int count = 0;
    auto label = detail::inside_components(g, count);
    rep.components_before_bridging = count;
    if (count > 1) {
      auto comp_of = [&](int e) {
        const Vec3 rel = (ellipsoids[e].center - g.origin) / g.h;
        int i = std::clamp(static_cast<int>(std::lround(rel.x())), 0, g.nx);
        int j = std::clamp(static_cast<int>(std::lround(rel.y())), 0, g.ny);
        int k = std::clamp(static_cast<int>(std::lround(rel.z())), 0, g.nz);
        return label[g.index(i, j, k)];
      };
      const int n = static_cast<int>(ellipsoids.size());
      std::vector<int> parent(n);
      std::iota(parent.begin(), parent.end(), 0);
      std::function<int(int)> find = [&](int x) { return parent[x] == x ? x : parent[x] = find(parent[x]); };
      for (int a = 0; a < n; ++a)
        for (int b = a + 1; b < n; ++b)
          if (comp_of(a) >= 0 && comp_of(a) == comp_of(b)) parent[find(a)] = find(b);
      auto bridge = [&](int a, int b) {
        if (find(a) == find(b)) return;
        parent[find(a)] = find(b);
        double r = 0.5 * std::min(ellipsoids[a].radii.tail<2>().minCoeff(), ellipsoids[b].radii.tail<2>().minCoeff());
        u.capsules.push_back({ellipsoids[a].center, ellipsoids[b].center, r});
        ++rep.bridges;
      };
      for (auto [a, b] : links)
        if (a >= 0 && b >= 0 && a < n && b < n) bridge(a, b);
      // Anything still apart: connect nearest centers, Kruskal style.
      std::vector<std::tuple<double, int, int>> pairs;
      for (int a = 0; a < n; ++a)
        for (int b = a + 1; b < n; ++b) pairs.emplace_back((ellipsoids[a].center - ellipsoids[b].center).norm(), a, b);
      std::sort(pairs.begin(), pairs.end());
      for (auto [d, a, b] : pairs) bridge(a, b);
      g = detail::sample_union(u, opt);
    }
    mesh = detail::marching_tetrahedra(u, g);
  }
  if (opt.resample) opt.resample(mesh);
  mesh.validate();
  if (report) *report = rep;
  return mesh;
}

}  // namespace s3o
