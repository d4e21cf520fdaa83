#pragma once

#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "s3o/geom.hpp"
#include "s3o/image.hpp"
#include "s3o/renderer.hpp"
#include "s3o/rigidity.hpp"
#include "s3o/spatial.hpp"

namespace s3o {

// Normalized losses by default; `unnormalized` returns plain sums.
struct LossOptions {
  bool unnormalized = false;
};

inline double silhouette_loss(const BinaryMask& rendered, const BinaryMask& observed, const LossOptions& o = {}) {
  require(rendered.same_shape(observed), ErrorCode::DimensionMismatch, "silhouette_loss: mask sizes differ");
  std::size_t diff = 0;
  for (std::size_t i = 0; i < rendered.data.size(); ++i) diff += (rendered.data[i] != 0) != (observed.data[i] != 0);
  if (o.unnormalized) return double(diff);
  return rendered.data.empty() ? 0.0 : double(diff) / double(rendered.data.size());
}

inline double flow_loss(const FlowField& rendered, const FlowField& observed, double sigma, const LossOptions& o = {}) {
  require(rendered.same_shape(observed), ErrorCode::DimensionMismatch, "flow_loss: flow sizes differ");
  require(sigma >= 0.0, ErrorCode::InvalidArgument, "flow_loss: sigma must be >= 0");
  std::vector<double> terms;
  for (int y = 0; y < rendered.height; ++y)
    for (int x = 0; x < rendered.width; ++x) {
      if (!rendered.valid(x, y) || !observed.valid(x, y)) continue;
      double du = double(rendered.du(x, y)) - observed.du(x, y), dv = double(rendered.dv(x, y)) - observed.dv(x, y);
      terms.push_back(du * du + dv * dv);
    }
  if (terms.empty()) {
    warn("flow_loss: no pixel is valid in both flows");
    return 0.0;
  }
  double s = pairwise_sum(terms);
  return sigma * (o.unnormalized ? s : s / double(terms.size()));
}

// Mean absolute per-channel difference over foreground pixels.
inline double texture_loss(const RgbImage& rendered, const RgbImage& observed, const BinaryMask& foreground,
                           const LossOptions& o = {}) {
  require(rendered.same_shape(observed) && foreground.width == rendered.width && foreground.height == rendered.height,
          ErrorCode::DimensionMismatch, "texture_loss: image sizes differ");
  std::vector<double> terms;
  for (std::size_t i = 0; i < rendered.data.size(); ++i) {
    if (!foreground.data[i]) continue;
    for (int c = 0; c < 3; ++c) terms.push_back(std::abs(double(rendered.data[i][c]) - observed.data[i][c]));
  }
  if (terms.empty()) {
    warn("texture_loss: empty foreground");
    return 0.0;
  }
  double s = pairwise_sum(terms);
  return o.unnormalized ? s : s / double(terms.size());
}

inline double part_silhouette_loss(const std::vector<BinaryMask>& rendered, const std::vector<BinaryMask>& observed,
                                   const LossOptions& o = {}) {
  require(rendered.size() == observed.size(), ErrorCode::PartCountMismatch, "part_silhouette_loss: part counts differ");
  double s = 0.0;
  for (std::size_t p = 0; p < rendered.size(); ++p) s += silhouette_loss(rendered[p], observed[p], o);
  return s;
}

struct SymmetryPlane {
  Vec3 normal = Vec3(0, 0, 1);  // unit
  double offset = 0.0;          // plane: normal . x = offset

  Vec3 reflect(const Vec3& x) const { return x - 2.0 * (normal.dot(x) - offset) * normal; }
};

// Sum over all vertices of the squared distance from the reflected vertex to
// its nearest vertex, divided by the vertex count.
inline double symmetry_loss(const std::vector<Vec3>& x, const SymmetryPlane& plane = {}, const LossOptions& o = {}) {
  if (x.empty()) return 0.0;
  KdTree<3> tree(x);
  std::vector<double> terms(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) terms[i] = tree.nearest(plane.reflect(x[i])).second;
  double s = pairwise_sum(terms);
  return o.unnormalized ? s : s / double(x.size());
}

// Mean over non-isolated vertices of |x_i - mean of its 1-ring|^2.
inline double laplacian_loss(const Mesh& mesh, const LossOptions& o = {}) {
  auto nbrs = vertex_neighbors(mesh);
  std::vector<double> terms;
  int isolated = 0;
  for (std::size_t i = 0; i < nbrs.size(); ++i) {
    if (nbrs[i].empty()) {
      ++isolated;
      continue;
    }
    Vec3 m = Vec3::Zero();
    for (int j : nbrs[i]) m += mesh.vertices[j];
    m /= double(nbrs[i].size());
    terms.push_back((mesh.vertices[i] - m).squaredNorm());
  }
  if (isolated) warn("laplacian_loss: " + std::to_string(isolated) + " isolated vertices excluded");
  if (terms.empty()) return 0.0;
  double s = pairwise_sum(terms);
  return o.unnormalized ? s : s / double(terms.size());
}

// ---------------------------------------------------------------------------

enum class LossTerm {
  Silhouette,
  Flow,
  Texture,
  PartSilhouette,
  Symmetry,
  Laplacian,
  DynamicRigidity,
  Perceptual,
  FeatureConsistency,
};

inline constexpr std::array<LossTerm, 9> kAllLossTerms = {
    LossTerm::Silhouette, LossTerm::Flow,           LossTerm::Texture,
    LossTerm::PartSilhouette, LossTerm::Symmetry,   LossTerm::Laplacian,
    LossTerm::DynamicRigidity, LossTerm::Perceptual, LossTerm::FeatureConsistency};

inline const char* loss_name(LossTerm t) {
  switch (t) {
    case LossTerm::Silhouette: return "silhouette";
    case LossTerm::Flow: return "flow";
    case LossTerm::Texture: return "texture";
    case LossTerm::PartSilhouette: return "part_silhouette";
    case LossTerm::Symmetry: return "symmetry";
    case LossTerm::Laplacian: return "laplacian";
    case LossTerm::DynamicRigidity: return "dynamic_rigidity";
    case LossTerm::Perceptual: return "perceptual";
    case LossTerm::FeatureConsistency: return "feature_consistency";
  }
  return "?";
}

struct LossWeights {
  std::map<LossTerm, double> weight = {
      {LossTerm::Silhouette, 1.0},      {LossTerm::Flow, 1.0},      {LossTerm::Texture, 0.0},
      {LossTerm::PartSilhouette, 1.0},  {LossTerm::Symmetry, 0.1},  {LossTerm::Laplacian, 0.1},
      {LossTerm::DynamicRigidity, 0.1}, {LossTerm::Perceptual, 0.0}, {LossTerm::FeatureConsistency, 0.0}};
  double sigma = 1.0;  // flow confidence

  double operator[](LossTerm t) const {
    auto it = weight.find(t);
    return it == weight.end() ? 0.0 : it->second;
  }
  void validate() const {
    for (auto [t, w] : weight)
      require(w >= 0.0 && std::isfinite(w), ErrorCode::InvalidArgument, std::string("negative weight for ") + loss_name(t));
    require(sigma >= 0.0, ErrorCode::InvalidArgument, "sigma must be >= 0");
  }
};

// Raw (unweighted) values; terms left unset contribute nothing. Perceptual and
// feature-consistency values come from outside when available.
using LossTerms = std::map<LossTerm, double>;

struct LossBreakdown {
  std::map<LossTerm, double> contribution;  // weight * value
  double total = 0.0;
};

enum class Phase { Coarse = 1, Joint = 2 };

// In the second phase the part-level (feature-derived) terms are dropped.
inline LossBreakdown total_loss(const LossTerms& terms, const LossWeights& w, Phase phase = Phase::Coarse) {
  w.validate();
  LossBreakdown out;
  for (LossTerm t : kAllLossTerms) {
    auto it = terms.find(t);
    double v = it == terms.end() ? 0.0 : it->second;
    double c = w[t] * v;
    if (phase == Phase::Joint && (t == LossTerm::PartSilhouette || t == LossTerm::FeatureConsistency)) c = 0.0;
    out.contribution[t] = c;
    out.total += c;
  }
  return out;
}

// Appends `iteration,<term>...,total` rows; writes the header on creation.
class LossLog {
 public:
  explicit LossLog(const std::string& path) : os_(path) {
    require(static_cast<bool>(os_), ErrorCode::Io, "cannot write " + path);
    os_ << std::setprecision(std::numeric_limits<double>::max_digits10);
    os_ << "iteration,phase";
    for (LossTerm t : kAllLossTerms) os_ << ',' << loss_name(t);
    os_ << ",total\n";
  }

  void append(long iteration, Phase phase, const LossBreakdown& b) {
    os_ << iteration << ',' << static_cast<int>(phase);
    for (LossTerm t : kAllLossTerms) {
      auto it = b.contribution.find(t);
      os_ << ',' << (it == b.contribution.end() ? 0.0 : it->second);
    }
    os_ << ',' << b.total << '\n';
    os_.flush();
  }

 private:
  std::ofstream os_;
};

}  // namespace s3o
