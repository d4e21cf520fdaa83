#pragma once

#include <cmath>
#include <vector>

#include "s3o/geom.hpp"
#include "s3o/renderer.hpp"
#include "s3o/skinning.hpp"

namespace s3o {

struct SurfaceFlow {
  std::vector<Vec2> flow;       // per vertex, zero when unsupported
  std::vector<char> supported;  // projected inside the image onto valid flow
};

// Bilinear sample of the flow at every projected vertex, using only the valid
// pixels among the four neighbours (weights renormalized).
inline SurfaceFlow surface_flow(const FlowField& flow, const std::vector<Vec3>& vertices, const Camera& cam) {
  require(flow.width == cam.width && flow.height == cam.height, ErrorCode::DimensionMismatch,
          "flow size differs from the camera image size");
  SurfaceFlow out{std::vector<Vec2>(vertices.size(), Vec2::Zero()), std::vector<char>(vertices.size(), 0)};
  for (std::size_t i = 0; i < vertices.size(); ++i) {
    auto p = try_project(cam, vertices[i]);
    if (!p) continue;
    const double u = p->pixel.u, v = p->pixel.v;
    if (!(u >= 0 && v >= 0 && u < cam.width && v < cam.height)) continue;
    const double x = u - 0.5, y = v - 0.5;
    const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
    const double fx = x - x0, fy = y - y0;
    Vec2 acc = Vec2::Zero();
    double wsum = 0.0;
    for (int dy = 0; dy <= 1; ++dy)
      for (int dx = 0; dx <= 1; ++dx) {
        const int px = x0 + dx, py = y0 + dy;
        const double w = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy);
        if (w == 0.0 || px < 0 || py < 0 || px >= flow.width || py >= flow.height || !flow.valid(px, py)) continue;
        acc += w * Vec2(flow.du(px, py), flow.dv(px, py));
        wsum += w;
      }
    if (wsum <= 0.0) continue;
    out.flow[i] = acc / wsum;
    out.supported[i] = 1;
  }
  return out;
}

struct BoneFlow {
  std::vector<Vec2> flow;
  std::vector<double> mass;     // sum_n W(n,b) over visible, sampled vertices
  std::vector<char> supported;

  int bone_count() const { return static_cast<int>(flow.size()); }
};

inline constexpr double kUnsupportedMassFraction = 1e-6;

// Per-bone sum of W-weighted visible surface flow; divided by the support
// mass unless `raw` is set. Bones with negligible mass are unsupported.
inline BoneFlow bone_flow(const SurfaceFlow& sf, const SkinningWeights& w, const std::vector<char>& visible,
                          bool raw = false) {
  require(static_cast<Eigen::Index>(sf.flow.size()) == w.rows() && visible.size() == sf.flow.size(),
          ErrorCode::DimensionMismatch, "bone_flow: vertex counts differ");
  const int nb = static_cast<int>(w.cols());
  BoneFlow out{std::vector<Vec2>(nb, Vec2::Zero()), std::vector<double>(nb, 0.0), std::vector<char>(nb, 0)};
  double total = 0.0;
  for (Eigen::Index n = 0; n < w.rows(); ++n) {
    if (!visible[n] || !sf.supported[n]) continue;
    for (int b = 0; b < nb; ++b) {
      const double wb = w(n, b);
      out.flow[b] += wb * sf.flow[n];
      out.mass[b] += wb;
    }
    total += 1.0;
  }
  for (int b = 0; b < nb; ++b) {
    out.supported[b] = total > 0 && out.mass[b] > kUnsupportedMassFraction * total;
    if (raw) continue;
    if (out.supported[b]) out.flow[b] /= out.mass[b];
    else out.flow[b].setZero();
  }
  return out;
}

inline double cosine_similarity(const Vec2& a, const Vec2& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

}  // namespace s3o
