#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <optional>
#include <vector>

#include "s3o/geom.hpp"
#include "s3o/image.hpp"

namespace s3o {

struct RasterOutput {
  BinaryMask silhouette;
  Grid<double> depth;                  // camera-space z, +inf on background
  Grid<int> face;                      // -1 on background
  Grid<std::array<double, 3>> bary;    // perspective-correct barycentrics

  bool covered(int x, int y) const { return face.contains(x, y) && face(x, y) >= 0; }
};

namespace detail {

struct ScreenVertex {
  double u, v, z;
  bool ok;
};

inline std::vector<ScreenVertex> to_screen(const std::vector<Vec3>& vertices, const Camera& cam) {
  std::vector<ScreenVertex> out(vertices.size());
  for (std::size_t i = 0; i < vertices.size(); ++i) {
    auto p = try_project(cam, vertices[i]);
    out[i] = p ? ScreenVertex{p->pixel.u, p->pixel.v, p->depth, true} : ScreenVertex{0, 0, 0, false};
  }
  return out;
}

inline double edge_fn(double ax, double ay, double bx, double by, double px, double py) {
  return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
}

// Top-left rule for the winding where the edge function is positive inside
// (image v axis pointing down).
inline bool top_left(double ax, double ay, double bx, double by) {
  double dx = bx - ax, dy = by - ay;
  return (dy == 0.0 && dx > 0.0) || dy < 0.0;
}

}  // namespace detail

// Z-buffer rasterization with pixel-center sampling. Triangles with any
// vertex at or behind the camera plane are skipped; at equal depth the lower
// face index keeps the pixel.
inline RasterOutput rasterize(const std::vector<Vec3>& vertices, const std::vector<Face>& faces, const Camera& cam) {
  cam.validate();
  const int w = cam.width, h = cam.height;
  RasterOutput r{BinaryMask(w, h, 0), Grid<double>(w, h, std::numeric_limits<double>::infinity()), Grid<int>(w, h, -1),
                 Grid<std::array<double, 3>>(w, h, {0.0, 0.0, 0.0})};
  const auto sv = detail::to_screen(vertices, cam);
  for (int fi = 0; fi < static_cast<int>(faces.size()); ++fi) {
    std::array<int, 3> idx = faces[fi];
    if (!sv[idx[0]].ok || !sv[idx[1]].ok || !sv[idx[2]].ok) continue;
    std::array<int, 3> order = {0, 1, 2};
    auto P = [&](int k) { return sv[idx[order[k]]]; };
    double area = detail::edge_fn(P(0).u, P(0).v, P(1).u, P(1).v, P(2).u, P(2).v);
    if (area == 0.0 || !std::isfinite(area)) continue;
    if (area < 0) {
      std::swap(order[1], order[2]);
      area = -area;
    }
    const auto a = P(0), b = P(1), c = P(2);
    int x0 = std::max(0, static_cast<int>(std::floor(std::min({a.u, b.u, c.u}) - 0.5)));
    int x1 = std::min(w - 1, static_cast<int>(std::ceil(std::max({a.u, b.u, c.u}) - 0.5)));
    int y0 = std::max(0, static_cast<int>(std::floor(std::min({a.v, b.v, c.v}) - 0.5)));
    int y1 = std::min(h - 1, static_cast<int>(std::ceil(std::max({a.v, b.v, c.v}) - 0.5)));
    const bool tl0 = detail::top_left(b.u, b.v, c.u, c.v);
    const bool tl1 = detail::top_left(c.u, c.v, a.u, a.v);
    const bool tl2 = detail::top_left(a.u, a.v, b.u, b.v);
    for (int y = y0; y <= y1; ++y) {
      const double py = y + 0.5;
      for (int x = x0; x <= x1; ++x) {
        const double px = x + 0.5;
        double e0 = detail::edge_fn(b.u, b.v, c.u, c.v, px, py);
        double e1 = detail::edge_fn(c.u, c.v, a.u, a.v, px, py);
        double e2 = detail::edge_fn(a.u, a.v, b.u, b.v, px, py);
        if (e0 < 0 || e1 < 0 || e2 < 0) continue;
        if ((e0 == 0 && !tl0) || (e1 == 0 && !tl1) || (e2 == 0 && !tl2)) continue;
        double l0 = e0 / area, l1 = e1 / area, l2 = e2 / area;
        double q0 = l0 / a.z, q1 = l1 / b.z, q2 = l2 / c.z;
        double qs = q0 + q1 + q2;
        double z = 1.0 / qs;
        double cur = r.depth(x, y);
        bool take = z < cur - kDepthEpsilon || (std::abs(z - cur) <= kDepthEpsilon && fi < r.face(x, y));
        if (!take) continue;
        r.depth(x, y) = z;
        r.face(x, y) = fi;
        std::array<double, 3> bc{};
        bc[order[0]] = q0 / qs;
        bc[order[1]] = q1 / qs;
        bc[order[2]] = q2 / qs;
        r.bary(x, y) = bc;
        r.silhouette(x, y) = 1;
      }
    }
  }
  return r;
}

inline RasterOutput rasterize(const Mesh& mesh, const Camera& cam) { return rasterize(mesh.vertices, mesh.faces, cam); }

// Per-vertex colors interpolated over the raster; black background.
inline RgbImage render_colors(const RasterOutput& r, const std::vector<Face>& faces, const std::vector<Vec3>& colors) {
  RgbImage img(r.face.width, r.face.height, {0.f, 0.f, 0.f});
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      int f = r.face(x, y);
      if (f < 0) continue;
      Vec3 c = Vec3::Zero();
      for (int k = 0; k < 3; ++k) c += r.bary(x, y)[k] * colors[faces[f][k]];
      img(x, y) = {float(c.x()), float(c.y()), float(c.z())};
    }
  return img;
}

// One mask per part; a pixel belongs to the part of the face corner with the
// largest barycentric weight.
inline std::vector<BinaryMask> render_part_masks(const RasterOutput& r, const std::vector<Face>& faces,
                                                 const std::vector<int>& vertex_part, int parts) {
  std::vector<BinaryMask> out(parts, BinaryMask(r.face.width, r.face.height, 0));
  for (int y = 0; y < r.face.height; ++y)
    for (int x = 0; x < r.face.width; ++x) {
      int f = r.face(x, y);
      if (f < 0) continue;
      const auto& b = r.bary(x, y);
      int k = static_cast<int>(std::max_element(b.begin(), b.end()) - b.begin());
      int p = vertex_part[faces[f][k]];
      if (p >= 0 && p < parts) out[p](x, y) = 1;
    }
  return out;
}

// ---------------------------------------------------------------------------
// Flow

inline constexpr float kInvalidFlow = 1e10f;

struct FlowField {
  int width = 0;
  int height = 0;
  std::vector<float> data;  // interleaved (du, dv), row major

  FlowField() = default;
  FlowField(int w, int h, float fill = kInvalidFlow)
      : width(w), height(h), data(static_cast<std::size_t>(w) * h * 2, fill) {}

  static bool valid_value(float x) { return std::isfinite(x) && std::abs(x) < 1e9f; }
  bool valid(int x, int y) const {
    std::size_t i = (static_cast<std::size_t>(y) * width + x) * 2;
    return valid_value(data[i]) && valid_value(data[i + 1]);
  }
  float du(int x, int y) const { return data[(static_cast<std::size_t>(y) * width + x) * 2]; }
  float dv(int x, int y) const { return data[(static_cast<std::size_t>(y) * width + x) * 2 + 1]; }
  void set(int x, int y, double du, double dv) {
    std::size_t i = (static_cast<std::size_t>(y) * width + x) * 2;
    data[i] = static_cast<float>(du);
    data[i + 1] = static_cast<float>(dv);
  }
  void invalidate(int x, int y) { set(x, y, kInvalidFlow, kInvalidFlow); }
  int valid_count() const {
    int c = 0;
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) c += valid(x, y);
    return c;
  }
  bool same_shape(const FlowField& o) const { return width == o.width && height == o.height; }
};

// Flow from frame t to t+1: each covered pixel's surface point is followed to
// its position on mesh_t1 and both positions are projected.
inline FlowField render_flow(const std::vector<Vec3>& xt, const std::vector<Vec3>& xt1, const std::vector<Face>& faces,
                             const Camera& cam_t, const Camera& cam_t1, const RasterOutput* raster_t = nullptr) {
  require(xt.size() == xt1.size(), ErrorCode::TopologyMismatch, "render_flow: vertex counts differ");
  std::optional<RasterOutput> own;
  if (!raster_t) {
    own = rasterize(xt, faces, cam_t);
    raster_t = &*own;
  }
  FlowField flow(cam_t.width, cam_t.height);
  for (int y = 0; y < flow.height; ++y)
    for (int x = 0; x < flow.width; ++x) {
      int f = raster_t->face(x, y);
      if (f < 0) continue;
      const auto& b = raster_t->bary(x, y);
      Vec3 p0 = Vec3::Zero(), p1 = Vec3::Zero();
      for (int k = 0; k < 3; ++k) {
        p0 += b[k] * xt[faces[f][k]];
        p1 += b[k] * xt1[faces[f][k]];
      }
      auto s = try_project(cam_t, p0);
      auto d = try_project(cam_t1, p1);
      if (!s || !d) continue;
      flow.set(x, y, d->pixel.u - s->pixel.u, d->pixel.v - s->pixel.v);
    }
  return flow;
}

inline FlowField render_flow(const Mesh& mt, const Mesh& mt1, const Camera& cam_t, const Camera& cam_t1) {
  require(mt.same_topology(mt1), ErrorCode::TopologyMismatch, "render_flow: meshes differ in topology");
  return render_flow(mt.vertices, mt1.vertices, mt.faces, cam_t, cam_t1);
}

// ---------------------------------------------------------------------------
// Visibility

namespace detail {

// Depth of the face plane along the ray through (u, v); nullopt when (u, v)
// falls outside the projected triangle.
inline std::optional<double> face_depth_at(const std::vector<Vec3>& xc, const Face& f, const Camera& cam, double u,
                                           double v) {
  const Vec3 &A = xc[f[0]], &B = xc[f[1]], &C = xc[f[2]];
  if (A.z() <= kDepthEpsilon || B.z() <= kDepthEpsilon || C.z() <= kDepthEpsilon) return std::nullopt;
  auto proj = [&](const Vec3& p) {
    return Vec2(cam.focal * p.x() / p.z() + cam.principal.u, cam.focal * p.y() / p.z() + cam.principal.v);
  };
  Vec2 a = proj(A), b = proj(B), c = proj(C);
  double area = edge_fn(a.x(), a.y(), b.x(), b.y(), c.x(), c.y());
  if (area == 0.0) return std::nullopt;
  double l0 = edge_fn(b.x(), b.y(), c.x(), c.y(), u, v) / area;
  double l1 = edge_fn(c.x(), c.y(), a.x(), a.y(), u, v) / area;
  double l2 = 1.0 - l0 - l1;
  const double tol = -1e-9;
  if (l0 < tol || l1 < tol || l2 < tol) return std::nullopt;
  Vec3 n = (B - A).cross(C - A);
  Vec3 d((u - cam.principal.u) / cam.focal, (v - cam.principal.v) / cam.focal, 1.0);
  double nd = n.dot(d);
  if (std::abs(nd) < 1e-300) return std::nullopt;
  return n.dot(A) / nd;
}

}  // namespace detail

// A vertex is visible when its depth does not exceed the nearest surface
// along its own viewing ray by more than delta (1e-3 of the mesh size when
// delta <= 0). Only faces seen in the surrounding 3x3 pixels are tested, so a
// visible vertex always has silhouette within one pixel unless no fragment
// exists there at all.
inline std::vector<char> vertex_visibility(const std::vector<Vec3>& vertices, const std::vector<Face>& faces,
                                           const Camera& cam, const RasterOutput* raster = nullptr,
                                           double delta = -1.0) {
  std::optional<RasterOutput> own;
  if (!raster) {
    own = rasterize(vertices, faces, cam);
    raster = &*own;
  }
  if (delta <= 0) delta = 1e-3 * bbox_diagonal(vertices);
  std::vector<Vec3> xc(vertices.size());
  for (std::size_t i = 0; i < vertices.size(); ++i) xc[i] = cam.extrinsic.apply(vertices[i]);
  std::vector<char> vis(vertices.size(), 0);
  std::vector<int> cand;
  for (std::size_t i = 0; i < vertices.size(); ++i) {
    auto p = project_camera_space(cam, xc[i]);
    if (!p) continue;
    const double u = p->pixel.u, v = p->pixel.v;
    if (!(u >= 0 && v >= 0 && u < cam.width && v < cam.height)) continue;
    const int px = static_cast<int>(u), py = static_cast<int>(v);
    cand.clear();
    double nearest_fragment = std::numeric_limits<double>::infinity();
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx)
        if (raster->covered(px + dx, py + dy)) {
          cand.push_back(raster->face(px + dx, py + dy));
          nearest_fragment = std::min(nearest_fragment, raster->depth(px + dx, py + dy));
        }
    // a sliver corner may cover no pixel center nearby; nothing rasterized can hide it then
    if (cand.empty()) {
      vis[i] = 1;
      continue;
    }
    std::sort(cand.begin(), cand.end());
    cand.erase(std::unique(cand.begin(), cand.end()), cand.end());
    double surface = std::numeric_limits<double>::infinity();
    for (int f : cand)
      if (auto d = detail::face_depth_at(xc, faces[f], cam, u, v)) surface = std::min(surface, *d);
    if (!std::isfinite(surface)) surface = raster->covered(px, py) ? raster->depth(px, py) : nearest_fragment;
    vis[i] = p->depth <= surface + delta;
  }
  return vis;
}

inline std::vector<char> vertex_visibility(const Mesh& mesh, const Camera& cam) {
  return vertex_visibility(mesh.vertices, mesh.faces, cam);
}

// ---------------------------------------------------------------------------
// Middlebury .flo: "PIEH", int32 width, int32 height, float32 (du, dv) pairs,
// all little endian.

namespace detail {
template <typename T>
void put_le(std::ostream& os, T v) {
  std::uint32_t bits;
  static_assert(sizeof(T) == 4);
  std::memcpy(&bits, &v, 4);
  unsigned char b[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                        static_cast<unsigned char>(bits >> 16), static_cast<unsigned char>(bits >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

template <typename T>
T get_le(const unsigned char* b) {
  std::uint32_t bits = std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
                       (std::uint32_t(b[3]) << 24);
  T v;
  std::memcpy(&v, &bits, 4);
  return v;
}
}  // namespace detail

inline void write_flo(const std::string& path, const FlowField& f) {
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), ErrorCode::Io, "cannot write " + path);
  os.write("PIEH", 4);
  detail::put_le<std::int32_t>(os, f.width);
  detail::put_le<std::int32_t>(os, f.height);
  for (float x : f.data) detail::put_le<float>(os, x);
  require(static_cast<bool>(os), ErrorCode::Io, "write failed for " + path);
}

inline FlowField read_flo(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorCode::Io, "cannot read " + path);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  require(buf.size() >= 12 && std::memcmp(buf.data(), "PIEH", 4) == 0, ErrorCode::Parse, path + ": not a .flo file");
  int w = detail::get_le<std::int32_t>(buf.data() + 4), h = detail::get_le<std::int32_t>(buf.data() + 8);
  require(w > 0 && h > 0 && w < (1 << 16) && h < (1 << 16), ErrorCode::Parse, path + ": bad dimensions");
  require(buf.size() == 12 + static_cast<std::size_t>(w) * h * 8, ErrorCode::Parse, path + ": truncated or oversized");
  FlowField f(w, h);
  for (std::size_t i = 0; i < f.data.size(); ++i) f.data[i] = detail::get_le<float>(buf.data() + 12 + 4 * i);
  return f;
}

}  // namespace s3o
