#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "s3o/bone_motion.hpp"
#include "s3o/error.hpp"
#include "s3o/geom.hpp"
#include "s3o/image.hpp"
#include "s3o/losses.hpp"
#include "s3o/parallel.hpp"
#include "s3o/renderer.hpp"
#include "s3o/rigidity.hpp"
#include "s3o/silhouette_skeleton.hpp"
#include "s3o/skeleton.hpp"
#include "s3o/skeleton_lift.hpp"
#include "s3o/skeleton_refine.hpp"
#include "s3o/skinning.hpp"
#include "s3o/spatial.hpp"
#include "s3o/synth.hpp"

namespace s3o {

struct ScheduleConfig {
  int epochs = 10;
  int upsample_epoch = -1;  // -1 means epochs / 2
  int iterations = 4;       // pose iterations per frame in one E-step
  int warmup_iterations = 8;
  int hypotheses = 16;
  double hypothesis_fraction = 0.25;  // share of the warm-up spent on each camera hypothesis
  double t_o = 0.95;
  double t_d = 0.2;
  double t_r = kDefaultJointThreshold;
  LossWeights weights;
  double rotation_step = 1e-2;     // radians
  double translation_step = 1e-2;  // fraction of the model bbox diagonal
  int patience = 2;
  int upsample_min_bones = 4;
  int shift_iterations = 10;  // bone_shift / reweighting rounds per M-step
  int shape_iterations = 2;
  int coarse_shape_iterations = 8;
  double shape_step = 0.5;
  double pose_prior = 0.3;
  double depth_prior = 0.3;  // out-of-image-plane displacement from the rest pose, per pixel
  int boundary_samples = 160;
  double depth = 10.0;  // object distance when the observations carry no camera
  int sphere_level = 4;
  int grid_resolution = 40;
  std::uint64_t seed = 0;
  std::function<void(Mesh&)> resample;  // even resampling of the canonical mesh; unset = no-op

  int e1() const { return upsample_epoch >= 0 ? upsample_epoch : epochs / 2; }

  void validate() const {
    require(epochs >= 0, ErrorCode::InvalidArgument, "epochs must be >= 0");
    require(epochs == 0 || (e1() > 0 && e1() < epochs) || epochs == 1, ErrorCode::InvalidArgument,
            "upsample epoch must satisfy 0 < e1 < E");
    require(hypotheses >= 1, ErrorCode::InvalidArgument, "hypotheses must be >= 1");
    require(iterations >= 0 && warmup_iterations >= 0, ErrorCode::InvalidArgument, "iterations must be >= 0");
    require(hypothesis_fraction >= 0 && hypothesis_fraction <= 1, ErrorCode::InvalidArgument,
            "hypothesis_fraction must lie in [0, 1]");
    require(t_o >= -1 && t_o <= 1, ErrorCode::InvalidArgument, "t_o must lie in [-1, 1]");
    require(t_d > 0, ErrorCode::InvalidArgument, "t_d must be > 0");
    require(t_r > 0 && t_r <= 0.5, ErrorCode::InvalidArgument, "t_r must lie in (0, 0.5]");
    require(rotation_step > 0 && translation_step > 0 && shape_step >= 0, ErrorCode::InvalidArgument,
            "step sizes must be positive");
    require(patience >= 1 && upsample_min_bones >= 1 && shift_iterations >= 1, ErrorCode::InvalidArgument, "patience and bone floor must be >= 1");
    require(depth > 0 && sphere_level >= 0 && grid_resolution >= 4 && boundary_samples >= 1,
            ErrorCode::InvalidArgument, "invalid mesh or camera setting");
    weights.validate();
  }
};

// ---------------------------------------------------------------------------
// Config file: one `key = value` per line, `#` comments.

inline std::string weight_key(LossTerm t) { return std::string("w_") + loss_name(t); }

inline void set_config_value(ScheduleConfig& c, const std::string& key, const std::string& value) {
  auto num = [&] {
    try {
      std::size_t used = 0;
      double v = std::stod(value, &used);
      if (used != value.size()) throw std::invalid_argument(value);
      return v;
    } catch (const std::exception&) {
      fail(ErrorCode::Parse, "config: bad number for " + key + ": '" + value + "'");
    }
  };
  auto integer = [&] {
    double v = num();
    require(v == std::floor(v), ErrorCode::Parse, "config: " + key + " must be an integer");
    return static_cast<int>(v);
  };
  if (key == "epochs") c.epochs = integer();
  else if (key == "upsample_epoch") c.upsample_epoch = integer();
  else if (key == "iterations") c.iterations = integer();
  else if (key == "warmup_iterations") c.warmup_iterations = integer();
  else if (key == "hypotheses") c.hypotheses = integer();
  else if (key == "hypothesis_fraction") c.hypothesis_fraction = num();
  else if (key == "t_o") c.t_o = num();
  else if (key == "t_d") c.t_d = num();
  else if (key == "t_r") c.t_r = num();
  else if (key == "sigma") c.weights.sigma = num();
  else if (key == "rotation_step") c.rotation_step = num();
  else if (key == "translation_step") c.translation_step = num();
  else if (key == "patience") c.patience = integer();
  else if (key == "upsample_min_bones") c.upsample_min_bones = integer();
  else if (key == "shift_iterations") c.shift_iterations = integer();
  else if (key == "shape_iterations") c.shape_iterations = integer();
  else if (key == "coarse_shape_iterations") c.coarse_shape_iterations = integer();
  else if (key == "shape_step") c.shape_step = num();
  else if (key == "pose_prior") c.pose_prior = num();
  else if (key == "depth_prior") c.depth_prior = num();
  else if (key == "boundary_samples") c.boundary_samples = integer();
  else if (key == "depth") c.depth = num();
  else if (key == "sphere_level") c.sphere_level = integer();
  else if (key == "grid_resolution") c.grid_resolution = integer();
  else if (key == "seed") c.seed = static_cast<std::uint64_t>(integer());
  else {
    for (LossTerm t : kAllLossTerms)
      if (key == weight_key(t)) {
        c.weights.weight[t] = num();
        return;
      }
    fail(ErrorCode::Parse, "config: unknown key '" + key + "'");
  }
}

inline std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline void apply_config_text(ScheduleConfig& c, std::istream& is) {
  std::string line;
  int n = 0;
  while (std::getline(is, line)) {
    ++n;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    auto eq = line.find('=');
    require(eq != std::string::npos, ErrorCode::Parse, "config line " + std::to_string(n) + ": expected key = value");
    set_config_value(c, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

inline ScheduleConfig read_config(const std::string& path, ScheduleConfig base = {}) {
  std::ifstream is(path);
  require(static_cast<bool>(is), ErrorCode::Io, "cannot read config " + path);
  apply_config_text(base, is);
  return base;
}

inline void write_config(std::ostream& os, const ScheduleConfig& c) {
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  os << "epochs = " << c.epochs << "\nupsample_epoch = " << c.e1() << "\niterations = " << c.iterations
     << "\nwarmup_iterations = " << c.warmup_iterations << "\nhypotheses = " << c.hypotheses
     << "\nhypothesis_fraction = " << c.hypothesis_fraction << "\nt_o = " << c.t_o << "\nt_d = " << c.t_d
     << "\nt_r = " << c.t_r << "\nsigma = " << c.weights.sigma << "\nrotation_step = " << c.rotation_step
     << "\ntranslation_step = " << c.translation_step << "\npatience = " << c.patience
     << "\nupsample_min_bones = " << c.upsample_min_bones << "\nshift_iterations = " << c.shift_iterations << "\nshape_iterations = " << c.shape_iterations
     << "\ncoarse_shape_iterations = " << c.coarse_shape_iterations << "\nshape_step = " << c.shape_step
     << "\npose_prior = " << c.pose_prior << "\ndepth_prior = " << c.depth_prior << "\nboundary_samples = " << c.boundary_samples << "\ndepth = " << c.depth
     << "\nsphere_level = " << c.sphere_level << "\ngrid_resolution = " << c.grid_resolution << "\nseed = " << c.seed
     << '\n';
  for (LossTerm t : kAllLossTerms) os << weight_key(t) << " = " << c.weights[t] << '\n';
}

// ---------------------------------------------------------------------------
// Observations

struct Observations {
  std::vector<BinaryMask> masks;
  std::vector<FlowField> flows;  // flows[f] maps frame f to f + 1; empty when not available
  std::vector<Camera> cameras;   // optional; only intrinsics and object distance are used
  std::vector<PartDescriptor> descriptors;

  int frame_count() const { return static_cast<int>(masks.size()); }
  bool has_flow() const { return !flows.empty(); }
};

inline Observations load_observations(const std::string& dir) {
  namespace fs = std::filesystem;
  require(fs::is_directory(dir), ErrorCode::Io, "not a directory: " + dir);
  Observations obs;
  for (int f = 0;; ++f) {
    std::string pgm = dir + "/" + frame_name("mask", f, "pgm"), png = dir + "/" + frame_name("mask", f, "png");
    if (fs::exists(pgm)) obs.masks.push_back(read_pgm(pgm));
    else if (fs::exists(png)) obs.masks.push_back(read_png_mask(png));
    else break;
  }
  require(!obs.masks.empty(), ErrorCode::EmptyMask, "no mask_0000 in " + dir);
  for (const auto& m : obs.masks)
    require(m.same_shape(obs.masks.front()), ErrorCode::DimensionMismatch, "mask sizes differ across frames");
  bool all_flow = obs.frame_count() > 1;
  for (int f = 0; f + 1 < obs.frame_count() && all_flow; ++f) all_flow = fs::exists(dir + "/" + frame_name("flow", f, "flo"));
  if (all_flow)
    for (int f = 0; f + 1 < obs.frame_count(); ++f) {
      obs.flows.push_back(read_flo(dir + "/" + frame_name("flow", f, "flo")));
      require(obs.flows.back().width == obs.masks[0].width && obs.flows.back().height == obs.masks[0].height,
              ErrorCode::DimensionMismatch, "flow size differs from mask size");
    }
  if (fs::exists(dir + "/camera.csv")) {
    obs.cameras = read_cameras(dir + "/camera.csv");
    require(static_cast<int>(obs.cameras.size()) == obs.frame_count(), ErrorCode::DimensionMismatch,
            "camera.csv must have one row per mask");
  }
  if (fs::exists(dir + "/descriptors.txt")) obs.descriptors = read_descriptors(dir + "/descriptors.txt");
  return obs;
}

// ---------------------------------------------------------------------------
// Model state

struct ModelState {
  Mesh mesh;  // canonical
  Skeleton skeleton;
  SkinningWeights weights;
  std::vector<FrameParams> frames;
  Phase phase = Phase::Coarse;
  int epoch = 0;
  std::vector<double> init_extents;
  std::uint64_t seed = 0;
  int canonical_frame = 0;
  int hypothesis = 0;
  double scale = 1.0;  // bbox diagonal of the coarse model, for step sizes

  std::vector<Vec3> posed(int f) const { return forward_skin(mesh.vertices, weights, frames[f]); }

  void validate(int frame_count) const {
    mesh.validate();
    validate_skeleton(skeleton);
    require(weights.rows() == static_cast<Eigen::Index>(mesh.vertices.size()) && weights.cols() == skeleton.bone_count(),
            ErrorCode::DimensionMismatch, "skinning weights shape");
    require(static_cast<int>(frames.size()) == frame_count, ErrorCode::DimensionMismatch, "one FrameParams per frame");
    for (const auto& f : frames)
      require(static_cast<int>(f.bones.size()) == skeleton.bone_count(), ErrorCode::DimensionMismatch,
              "bone transform count");
  }
};

namespace detail {

struct FrameData {
  Grid<double> outside;        // distance from each pixel to the observed silhouette
  std::vector<Vec2> boundary;  // evenly strided boundary pixel centers
  double fg_pixels = 0;
};

inline FrameData frame_data(const BinaryMask& m, int samples) {
  FrameData d;
  d.outside = distance_to_foreground(m);
  auto b = boundary_pixels(m);
  const std::size_t stride = std::max<std::size_t>(1, (b.size() + samples - 1) / samples);
  for (std::size_t i = 0; i < b.size(); i += stride) d.boundary.push_back({b[i].first + 0.5, b[i].second + 0.5});
  d.fg_pixels = double(count_foreground(m));
  return d;
}

// Observed flow at (u, v), or nullopt where no neighbouring pixel is valid.
inline std::optional<Vec2> sample_flow(const FlowField& flow, double u, double v) {
  if (!(u >= 0 && v >= 0 && u < flow.width && v < flow.height)) return std::nullopt;
  const double x = u - 0.5, y = v - 0.5;
  const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
  const double fx = x - x0, fy = y - y0;
  Vec2 acc = Vec2::Zero();
  double ws = 0;
  for (int dy = 0; dy <= 1; ++dy)
    for (int dx = 0; dx <= 1; ++dx) {
      const int px = x0 + dx, py = y0 + dy;
      const double w = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy);
      if (w == 0.0 || px < 0 || py < 0 || px >= flow.width || py >= flow.height || !flow.valid(px, py)) continue;
      acc += w * Vec2(flow.du(px, py), flow.dv(px, py));
      ws += w;
    }
  if (ws <= 0) return std::nullopt;
  return acc / ws;
}

constexpr double kBehindPenalty = 1e3;

// Smooth surrogate of the reconstruction loss used for training. Residuals are
// in pixels; every block is normalized by its own count.
class Problem {
 public:
  Problem(const Observations& obs, const ScheduleConfig& cfg) : obs_(obs), cfg_(cfg) {
    data_.resize(obs.frame_count());
    parallel_for(obs.frame_count(), [&](int f) { data_[f] = frame_data(obs.masks[f], cfg.boundary_samples); });
  }

  // Rebuilds everything derived from the canonical model and the per-frame snapshot.
  void prepare(const ModelState& s) {
    faces_ = &s.mesh.faces;
    edges_ = mesh_edges(s.mesh);
    auto rc = rigidity_coefficients(s.weights, edges_);
    const double cap = 1.0 / (rc.lambda * rc.lambda);
    rigid_.resize(rc.values.size());
    for (std::size_t e = 0; e < rc.values.size(); ++e) rigid_[e] = std::min(rc.values[e], cap);
    edges_ = rc.edges;
    const int nf = static_cast<int>(s.frames.size());
    posed_.assign(nf, {});
    visible_.assign(nf, {});
    parallel_for(nf, [&](int f) {
      posed_[f] = s.posed(f);
      visible_[f] = vertex_visibility(posed_[f], s.mesh.faces, s.frames[f].camera);
    });
    px_per_unit_ = s.frames.empty() ? 1.0 : s.frames[0].camera.focal / std::max(1e-9, camera_depth(s));
    rest_depth_.clear();
    if (!s.frames.empty())
      for (const auto& v : s.mesh.vertices) rest_depth_.push_back(s.frames[0].camera.extrinsic.apply(v).z());
  }

  static double camera_depth(const ModelState& s) { return s.frames[0].camera.extrinsic.translation.norm(); }

  void set_posed(int f, std::vector<Vec3> x) { posed_[f] = std::move(x); }
  const std::vector<Vec3>& posed(int f) const { return posed_[f]; }

  struct Neighbors {
    bool prev = true;
    bool next = true;
  };

  // All residual blocks that involve frame f, with its neighbours held at the snapshot.
  Eigen::VectorXd frame_residuals(int f, const std::vector<Vec3>& x, const FrameParams& fp, const ModelState& s,
                                  Neighbors nb, bool with_prior = true) const {
    std::vector<double> r;
    silhouette_block(f, x, fp.camera, r);
    const int nf = static_cast<int>(posed_.size());
    if (nb.prev && f > 0) {
      flow_block(f - 1, posed_[f - 1], s.frames[f - 1].camera, x, fp.camera, r);
      rigidity_block(posed_[f - 1], x, r);
    }
    if (nb.next && f + 1 < nf) {
      flow_block(f, x, fp.camera, posed_[f + 1], s.frames[f + 1].camera, r);
      rigidity_block(x, posed_[f + 1], r);
    }
    depth_block(x, fp.camera, r);
    if (with_prior) prior_block(fp, s.scale, r);
    return Eigen::Map<Eigen::VectorXd>(r.data(), r.size());
  }

  // Global training objective for the snapshot plus the given poses.
  double objective(const ModelState& s) const {
    const int nf = static_cast<int>(s.frames.size());
    std::vector<double> parts(nf, 0.0);
    parallel_for(nf, [&](int f) {
      std::vector<double> r;
      silhouette_block(f, posed_[f], s.frames[f].camera, r);
      if (f + 1 < nf) {
        flow_block(f, posed_[f], s.frames[f].camera, posed_[f + 1], s.frames[f + 1].camera, r);
        rigidity_block(posed_[f], posed_[f + 1], r);
      }
      depth_block(posed_[f], s.frames[f].camera, r);
      prior_block(s.frames[f], s.scale, r);
      double c = 0;
      for (double v : r) c += v * v;
      parts[f] = c;
    });
    return pairwise_sum(parts);
  }

  const FrameData& data(int f) const { return data_[f]; }
  const std::vector<char>& visible(int f) const { return visible_[f]; }

  void silhouette_block(int f, const std::vector<Vec3>& x, const Camera& cam, std::vector<double>& r) const {
    const FrameData& d = data_[f];
    const double w = cfg_.weights[LossTerm::Silhouette];
    if (w <= 0) return;
    const double wi = std::sqrt(w / double(x.size()));
    std::vector<Vec2> proj(x.size());
    for (std::size_t n = 0; n < x.size(); ++n) {
      auto p = try_project(cam, x[n]);
      if (!p) {
        r.push_back(wi * kBehindPenalty);
        proj[n] = Vec2(-1e6, -1e6);
        continue;
      }
      proj[n] = Vec2(p->pixel.u, p->pixel.v);
      double out = sample_bilinear(d.outside, p->pixel.u, p->pixel.v);
      // beyond the image border the clamped field underestimates; add the overshoot
      double ou = std::max({0.0, -p->pixel.u, p->pixel.u - cam.width});
      double ov = std::max({0.0, -p->pixel.v, p->pixel.v - cam.height});
      r.push_back(wi * (out + ou + ov));
    }
    if (d.boundary.empty()) return;
    KdTree<2> tree(proj);
    const double wc = std::sqrt(w / double(d.boundary.size()));
    for (const auto& b : d.boundary) r.push_back(wc * std::sqrt(tree.nearest(b).second));
  }

  void flow_block(int a, const std::vector<Vec3>& xa, const Camera& ca, const std::vector<Vec3>& xb,
                  const Camera& cb, std::vector<double>& r) const {
    if (obs_.flows.empty()) return;
    const double w = cfg_.weights[LossTerm::Flow] * cfg_.weights.sigma;
    if (w <= 0) return;
    const auto& vis = visible_[a];
    std::size_t count = 0;
    for (char v : vis) count += v != 0;
    if (count == 0) return;
    const double wi = std::sqrt(w / double(count));
    for (std::size_t n = 0; n < xa.size(); ++n) {
      if (!vis[n]) continue;
      auto pa = try_project(ca, xa[n]);
      auto pb = try_project(cb, xb[n]);
      std::optional<Vec2> o;
      if (pa && pb) o = sample_flow(obs_.flows[a], pa->pixel.u, pa->pixel.v);
      if (!o) {
        r.push_back(0.0);
        r.push_back(0.0);
        continue;
      }
      r.push_back(wi * (pb->pixel.u - pa->pixel.u - (*o)[0]));
      r.push_back(wi * (pb->pixel.v - pa->pixel.v - (*o)[1]));
    }
  }

  void rigidity_block(const std::vector<Vec3>& xa, const std::vector<Vec3>& xb, std::vector<double>& r) const {
    const double w = cfg_.weights[LossTerm::DynamicRigidity];
    if (w <= 0 || edges_.empty()) return;
    const double base = w / double(edges_.size());
    for (std::size_t e = 0; e < edges_.size(); ++e) {
      auto [i, j] = edges_[e];
      double la = (xa[i] - xa[j]).norm(), lb = (xb[i] - xb[j]).norm();
      r.push_back(std::sqrt(base * rigid_[e]) * px_per_unit_ * (la - lb));
    }
  }

  void depth_block(const std::vector<Vec3>& x, const Camera& cam, std::vector<double>& r) const {
    const double w = cfg_.depth_prior;
    if (w <= 0 || rest_depth_.size() != x.size()) return;
    const double k = w * px_per_unit_ / std::sqrt(double(x.size()));
    for (std::size_t n = 0; n < x.size(); ++n) r.push_back(k * (cam.extrinsic.apply(x[n]).z() - rest_depth_[n]));
  }

  void prior_block(const FrameParams& fp, double scale, std::vector<double>& r) const {
    const double w = cfg_.pose_prior;
    if (w <= 0) return;
    // the canonical model was built in place, so the root is pulled to identity as well
    std::vector<const SE3*> all{&fp.root};
    for (const auto& b : fp.bones) all.push_back(&b);
    for (const SE3* t : all) {
      const SE3& b = *t;
      Vec3 aa = axis_angle_from_rotation(b.rotation);
      for (int k = 0; k < 3; ++k) r.push_back(w * aa[k]);
      for (int k = 0; k < 3; ++k) r.push_back(w * b.translation[k] / scale);
    }
  }

 private:
  const Observations& obs_;
  const ScheduleConfig& cfg_;
  std::vector<FrameData> data_;
  const std::vector<Face>* faces_ = nullptr;
  std::vector<Edge> edges_;
  std::vector<double> rigid_;
  std::vector<double> rest_depth_;
  std::vector<std::vector<Vec3>> posed_;
  std::vector<std::vector<char>> visible_;
  double px_per_unit_ = 1.0;
};

// Perturbation of one frame: root then bones, each as (rotation about the
// part's current center, translation) in scaled units.
inline FrameParams apply_delta(const FrameParams& base, const Eigen::VectorXd& d, const std::vector<Vec3>& pivots,
                               double rot_step, double trans_step, int first_bone = 0) {
  FrameParams out = base;
  auto upd = [&](SE3& t, int at, const Vec3& pivot) {
    Vec3 w(d[at], d[at + 1], d[at + 2]), dt(d[at + 3], d[at + 4], d[at + 5]);
    w *= rot_step;
    dt *= trans_step;
    t = SE3::from_translation(dt) * SE3::rotation_about(w, pivot) * t;
  };
  int at = 0;
  if (first_bone == 0) {
    upd(out.root, 0, pivots[0]);
    at = 6;
  }
  for (std::size_t b = 0; b < base.bones.size() && at + 6 <= d.size(); ++b, at += 6) upd(out.bones[b], at, pivots[b + 1]);
  return out;
}

// Rotation pivots: the posed model centroid for the root (in the root's input
// frame), and each bone's rest center carried by its current transform.
inline std::vector<Vec3> frame_pivots(const ModelState& s, const FrameParams& fp, const std::vector<Vec3>& posed) {
  std::vector<Vec3> p;
  p.push_back(fp.root.inverse().apply(centroid(posed)));
  for (int b = 0; b < s.skeleton.bone_count(); ++b) p.push_back(fp.bones[b].apply(s.skeleton.bones[b].center));
  return p;
}

struct PoseOptions {
  int iterations = 4;
  bool root_only = false;
  bool translation_only = false;
  Problem::Neighbors neighbors;
};

// Levenberg-Marquardt on one frame with central-difference Jacobians.
// Returns the number of accepted steps.
inline int refine_frame(const Problem& pb, const ModelState& s, int f, FrameParams& fp, const ScheduleConfig& cfg,
                        const PoseOptions& po) {
  const int dim = po.root_only ? 6 : 6 * (s.skeleton.bone_count() + 1);
  const double rot = cfg.rotation_step, tr = cfg.translation_step * s.scale;
  double mu = 1e-3;
  int accepted = 0;
  auto eval = [&](const FrameParams& p) {
    auto x = forward_skin(s.mesh.vertices, s.weights, p);
    return pb.frame_residuals(f, x, p, s, po.neighbors);
  };
  for (int it = 0; it < po.iterations; ++it) {
    auto x0 = forward_skin(s.mesh.vertices, s.weights, fp);
    auto pivots = frame_pivots(s, fp, x0);
    Eigen::VectorXd r0 = pb.frame_residuals(f, x0, fp, s, po.neighbors);
    const double c0 = r0.squaredNorm();
    if (c0 == 0.0) break;
    Eigen::MatrixXd jac(r0.size(), dim);
    const double h = 0.1;
    for (int k = 0; k < dim; ++k) {
      Eigen::VectorXd d = Eigen::VectorXd::Zero(dim);
      if (po.translation_only && k % 6 < 3) {
        jac.col(k).setZero();
        continue;
      }
      d[k] = h;
      Eigen::VectorXd rp = eval(apply_delta(fp, d, pivots, rot, tr));
      d[k] = -h;
      Eigen::VectorXd rm = eval(apply_delta(fp, d, pivots, rot, tr));
      jac.col(k) = (rp - rm) / (2 * h);
    }
    Eigen::MatrixXd a = jac.transpose() * jac;
    Eigen::VectorXd g = jac.transpose() * r0;
    bool ok = false;
    for (int attempt = 0; attempt < 4 && !ok; ++attempt) {
      Eigen::MatrixXd lhs = a;
      for (int k = 0; k < dim; ++k) lhs(k, k) += mu * (a(k, k) + 1e-9) + 1e-12;
      Eigen::VectorXd step = lhs.ldlt().solve(-g);
      if (!step.allFinite()) break;
      double alpha = 1.0;
      for (int half = 0; half <= 10; ++half, alpha *= 0.5) {
        FrameParams cand = apply_delta(fp, alpha * step, pivots, rot, tr);
        if (eval(cand).squaredNorm() < c0) {
          fp = cand;
          ok = true;
          break;
        }
      }
      if (ok) mu = std::max(mu / 3.0, 1e-9);
      else mu *= 10.0;
    }
    if (!ok) break;
    ++accepted;
  }
  for (auto& b : fp.bones) b = b.reorthonormalized();
  fp.root = fp.root.reorthonormalized();
  return accepted;
}

// Per-vertex image-space pulls towards the observed silhouette, carried back
// to canonical space. `part_outside` (optional) replaces the whole-mask field
// with one field per part for vertices assigned to that part.
inline std::vector<Vec3> shape_pull(const ModelState& s, const Problem& pb, int f, const std::vector<Vec3>& posed,
                                    const std::vector<Grid<double>>* part_outside = nullptr,
                                    const std::vector<int>* vertex_part = nullptr) {
  const Camera& cam = s.frames[f].camera;
  const FrameData& d = pb.data(f);
  const std::size_t n = posed.size();
  std::vector<Vec2> move(n, Vec2::Zero());
  std::vector<double> hits(n, 0.0);
  std::vector<Vec2> proj(n);
  std::vector<double> depth(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    auto p = try_project(cam, posed[i]);
    if (!p) {
      proj[i] = Vec2(-1e6, -1e6);
      continue;
    }
    proj[i] = Vec2(p->pixel.u, p->pixel.v);
    depth[i] = p->depth;
    const Grid<double>* field = &d.outside;
    if (part_outside && vertex_part && (*vertex_part)[i] >= 0 && (*vertex_part)[i] < int(part_outside->size()))
      field = &(*part_outside)[(*vertex_part)[i]];
    const double u = proj[i][0], v = proj[i][1];
    const double o = sample_bilinear(*field, u, v);
    if (o <= 0.25) continue;
    Vec2 g((sample_bilinear(*field, u + 0.5, v) - sample_bilinear(*field, u - 0.5, v)),
           (sample_bilinear(*field, u, v + 0.5) - sample_bilinear(*field, u, v - 0.5)));
    if (g.norm() < 1e-9) continue;
    move[i] += -o * g.normalized();
    hits[i] += 1;
  }
  if (!d.boundary.empty()) {
    KdTree<2> tree(proj);
    for (const auto& b : d.boundary) {
      auto [k, d2] = tree.nearest(b);
      if (d2 <= 1.0) continue;
      move[k] += b - proj[k];
      hits[k] += 1;
    }
  }
  std::vector<Vec3> out(n, Vec3::Zero());
  const FrameParams& fp = s.frames[f];
  const Mat3 rc_t = cam.extrinsic.rotation.transpose();
  for (std::size_t i = 0; i < n; ++i) {
    if (hits[i] == 0 || depth[i] <= 0) continue;
    Vec2 m = move[i] / hits[i];
    Vec3 dc(m[0] * depth[i] / cam.focal, m[1] * depth[i] / cam.focal, 0.0);
    Vec3 dw = rc_t * dc;
    auto a = blend_at(s.weights, static_cast<int>(i), fp);
    Mat3 l = fp.root.rotation * a.linear;
    if (std::abs(l.determinant()) < 1e-12) continue;
    out[i] = l.partialPivLu().solve(dw);
  }
  return out;
}

inline void smooth_vertices(Mesh& m, const std::vector<std::vector<int>>& nbrs, double amount) {
  if (amount <= 0) return;
  std::vector<Vec3> next = m.vertices;
  for (std::size_t i = 0; i < nbrs.size(); ++i) {
    if (nbrs[i].empty()) continue;
    Vec3 c = Vec3::Zero();
    for (int j : nbrs[i]) c += m.vertices[j];
    c /= double(nbrs[i].size());
    next[i] += amount * (c - m.vertices[i]);
  }
  m.vertices = std::move(next);
}

inline void symmetrize_vertices(Mesh& m, const SymmetryPlane& plane, double amount) {
  if (amount <= 0 || m.vertices.empty()) return;
  KdTree<3> tree(m.vertices);
  std::vector<Vec3> next = m.vertices;
  for (std::size_t i = 0; i < m.vertices.size(); ++i) {
    auto [k, d2] = tree.nearest(plane.reflect(m.vertices[i]));
    next[i] += amount * 0.5 * (plane.reflect(m.vertices[k]) - m.vertices[i]);
  }
  m.vertices = std::move(next);
}

// Regularizers of the canonical shape in the same pixel units as the training objective.
inline double shape_regularizer(const ModelState& s, const ScheduleConfig& cfg, double px_per_unit) {
  double r = 0;
  LossOptions quiet;
  const double k = px_per_unit * px_per_unit;
  if (cfg.weights[LossTerm::Laplacian] > 0) {
    const int v = log_verbosity();
    log_verbosity() = 0;
    r += cfg.weights[LossTerm::Laplacian] * k * laplacian_loss(s.mesh, quiet);
    log_verbosity() = v;
  }
  if (cfg.weights[LossTerm::Symmetry] > 0) r += cfg.weights[LossTerm::Symmetry] * k * symmetry_loss(s.mesh.vertices);
  return r;
}

// One block of canonical vertex updates from frames `fs`, accepted only when
// the training objective does not increase (step halved up to 10 times).
inline bool refine_shape(ModelState& s, Problem& pb, const ScheduleConfig& cfg, const std::vector<int>& fs,
                         const std::vector<Grid<double>>* part_outside = nullptr) {
  if (cfg.shape_step <= 0 || fs.empty()) return false;
  const double ppu = s.frames[0].camera.focal / std::max(1e-9, Problem::camera_depth(s));
  auto total = [&](const ModelState& m) {
    for (int f : fs) pb.set_posed(f, m.posed(f));
    double c = 0;
    for (int f : fs) {
      std::vector<double> r;
      pb.silhouette_block(f, pb.posed(f), m.frames[f].camera, r);
      for (double v : r) c += v * v;
    }
    if (fs.size() > 1) c = pb.objective(m);
    return c + shape_regularizer(m, cfg, ppu);
  };
  std::vector<int> vertex_part;
  if (part_outside) vertex_part = assign_parts(s.weights).label;
  std::vector<std::vector<Vec3>> pulls(fs.size());
  parallel_for(static_cast<int>(fs.size()), [&](int k) {
    pulls[k] = shape_pull(s, pb, fs[k], s.posed(fs[k]), part_outside, part_outside ? &vertex_part : nullptr);
  });
  std::vector<Vec3> avg(s.mesh.vertices.size(), Vec3::Zero());
  for (const auto& p : pulls)
    for (std::size_t i = 0; i < p.size(); ++i) avg[i] += p[i];
  for (auto& v : avg) v /= double(fs.size());
  const auto nbrs = vertex_neighbors(s.mesh);
  const double c0 = total(s);
  double alpha = cfg.shape_step;
  for (int half = 0; half <= 10; ++half, alpha *= 0.5) {
    ModelState cand = s;
    for (std::size_t i = 0; i < avg.size(); ++i) cand.mesh.vertices[i] += alpha * avg[i];
    smooth_vertices(cand.mesh, nbrs, std::min(0.5, cfg.weights[LossTerm::Laplacian] * 2.0));
    symmetrize_vertices(cand.mesh, SymmetryPlane{}, std::min(0.5, cfg.weights[LossTerm::Symmetry] * 2.0));
    if (total(cand) < c0) {
      s.mesh = std::move(cand.mesh);
      if (cfg.resample) cfg.resample(s.mesh);
      return true;
    }
  }
  total(s);  // restore the snapshot
  return false;
}

// Frame indices ordered by distance from `c` (ties: earlier frame first).
inline std::vector<int> outward_order(int c, int nf) {
  std::vector<int> out{c};
  for (int d = 1; d < nf; ++d) {
    if (c - d >= 0) out.push_back(c - d);
    if (c + d < nf) out.push_back(c + d);
  }
  return out;
}

// Similarity map from canonical-frame pixel space (z in pixels) to the model world.
struct PixelToWorld {
  double s = 1.0;
  Vec3 origin = Vec3::Zero();  // pixel-space point mapped to the world origin
  Vec3 apply(const Vec3& p) const { return s * (p - origin); }
};

inline Skeleton to_world(Skeleton k, const PixelToWorld& t) {
  for (auto& b : k.bones) {
    b.center = t.apply(b.center);
    b.precision /= t.s * t.s;
    b.length *= t.s;
  }
  for (auto& j : k.joints) j.position = t.apply(j.position);
  return k;
}

inline std::vector<PartEllipsoid> to_world(std::vector<PartEllipsoid> es, const PixelToWorld& t) {
  for (auto& e : es) {
    e.center = t.apply(e.center);
    e.radii *= t.s;
  }
  return es;
}

// Observed part masks: silhouette pixels given to the nearest part trace.
inline std::vector<BinaryMask> observed_part_masks(const BinaryMask& m, const SkeletonGraph2D& g) {
  std::vector<Vec2> pts;
  std::vector<int> owner;
  for (int e = 0; e < static_cast<int>(g.edges.size()); ++e)
    for (auto [x, y] : g.edges[e].trace) {
      pts.push_back({x + 0.5, y + 0.5});
      owner.push_back(e);
    }
  std::vector<BinaryMask> out(g.edges.size(), BinaryMask(m.width, m.height, 0));
  if (pts.empty()) return out;
  KdTree<2> tree(pts);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      if (m(x, y)) out[owner[tree.nearest(Vec2(x + 0.5, y + 0.5)).first]](x, y) = 1;
  return out;
}

inline std::vector<FrameParams> remap_frames(const std::vector<FrameParams>& frames, const std::vector<int>& source) {
  std::vector<FrameParams> out = frames;
  for (auto& f : out) {
    std::vector<SE3> bones;
    for (int src : source) bones.push_back(f.bones[src]);
    f.bones = std::move(bones);
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Coarse phase

inline Camera intrinsics_for(const Observations& obs, int f) {
  Camera c;
  const auto& m = obs.masks[f];
  c.width = m.width;
  c.height = m.height;
  if (!obs.cameras.empty()) {
    c.focal = obs.cameras[f].focal;
    c.principal = obs.cameras[f].principal;
  } else {
    c.focal = std::max(m.width, m.height);
    c.principal = {m.width / 2.0, m.height / 2.0};
  }
  return c;
}

struct CoarseReport {
  int canonical_frame = 0;
  std::vector<double> hypothesis_loss;
  int parts = 0;
  int pairs = 0;
};

inline ModelState coarse_phase(const Observations& obs, const ScheduleConfig& cfg, CoarseReport* report = nullptr) {
  cfg.validate();
  require(obs.frame_count() >= 2, ErrorCode::InvalidArgument, "coarse phase needs at least two frames");
  const int nf = obs.frame_count();
  std::vector<BinaryMask> clean(nf);
  std::vector<SkeletonGraph2D> graphs(nf);
  parallel_for(nf, [&](int f) {
    require(count_foreground(obs.masks[f]) > 0, ErrorCode::EmptyMask, "frame " + std::to_string(f) + " has an empty mask");
    clean[f] = largest_component(fill_holes(obs.masks[f]));
    graphs[f] = build_skeleton_graph(thin_silhouette(clean[f]), default_prune_length(clean[f]));
  });
  const int c = canonical_frame(graphs);
  const auto& graph = graphs[c];
  auto parts = fit_part_ellipsoids(graph, clean[c]);
  auto descs = obs.descriptors.size() == parts.size() ? obs.descriptors : describe_parts(parts, graph);
  auto pairs = match_symmetric_parts(descs, graph);
  auto lifted = lift_parts(parts, pairs);
  Skeleton skel_px = lift_to_3d(graph, parts, pairs);

  Camera base = intrinsics_for(obs, c);
  double depth = cfg.depth;
  if (!obs.cameras.empty() && obs.cameras[c].extrinsic.translation.z() > 0) depth = obs.cameras[c].extrinsic.translation.z();
  // world origin at the silhouette centroid on the image plane at `depth`
  Vec2 mc = Vec2::Zero();
  double cnt = 0;
  for (int y = 0; y < clean[c].height; ++y)
    for (int x = 0; x < clean[c].width; ++x)
      if (clean[c](x, y)) {
        mc += Vec2(x + 0.5, y + 0.5);
        cnt += 1;
      }
  mc /= cnt;
  detail::PixelToWorld t{depth / base.focal, Vec3(mc[0], mc[1], 0.0)};
  const Vec3 offset((mc[0] - base.principal.u) * t.s, (mc[1] - base.principal.v) * t.s, depth);

  ModelState s;
  s.seed = cfg.seed;
  s.canonical_frame = c;
  s.skeleton = to_world(skel_px, t);
  auto ell = to_world(lifted, t);
  std::vector<std::pair<int, int>> links;
  for (const auto& j : s.skeleton.joints) links.emplace_back(j.i, j.j);
  CoarseMeshOptions mo;
  mo.sphere_level = cfg.sphere_level;
  mo.grid_resolution = cfg.grid_resolution;
  mo.max_grid_resolution = std::max(cfg.grid_resolution, mo.max_grid_resolution);
  mo.resample = cfg.resample;
  s.mesh = coarse_mesh_from_ellipsoids(ell, links, mo);
  s.weights = skinning_weights(s.mesh, s.skeleton);
  s.scale = bbox_diagonal(s.mesh.vertices);
  s.init_extents = part_extents(s.mesh.vertices, s.weights);

  // camera hypotheses orbit the object about the image vertical
  const int k_count = cfg.hypotheses;
  std::vector<Camera> cams(k_count, base);
  for (int k = 0; k < k_count; ++k) {
    cams[k].extrinsic.rotation = rotation_from_axis_angle(Vec3(0, 2.0 * M_PI * k / k_count, 0));
    cams[k].extrinsic.translation = offset;
  }
  auto with_camera = [&](const Camera& cam) {
    std::vector<FrameParams> fr;
    for (int f = 0; f < nf; ++f) {
      Camera cf = cam;
      Camera in = intrinsics_for(obs, f);
      cf.focal = in.focal;
      cf.principal = in.principal;
      fr.push_back(identity_params(s.skeleton.bone_count(), cf));
    }
    return fr;
  };
  s.frames = with_camera(cams[0]);
  detail::Problem pb(obs, cfg);
  std::vector<double> hyp_loss(k_count, 0.0);
  int best = 0;
  if (k_count > 1) {
    const int iters = static_cast<int>(std::lround(cfg.hypothesis_fraction * cfg.warmup_iterations));
    for (int k = 0; k < k_count; ++k) {
      ModelState h = s;
      h.frames = with_camera(cams[k]);
      pb.prepare(h);
      detail::PoseOptions po;
      po.iterations = iters;
      po.root_only = true;
      po.translation_only = true;
      po.neighbors = {false, false};
      detail::refine_frame(pb, h, c, h.frames[c], cfg, po);
      auto r = rasterize(h.posed(c), h.mesh.faces, h.frames[c].camera);
      hyp_loss[k] = silhouette_loss(r.silhouette, clean[c]);
      if (hyp_loss[k] < hyp_loss[best]) best = k;
    }
  }
  s.hypothesis = best;
  s.frames = with_camera(cams[best]);

  // canonical-frame shape refinement with per-part fields
  auto part_masks = detail::observed_part_masks(clean[c], graph);
  std::vector<Grid<double>> part_out;
  for (const auto& pm : part_masks) part_out.push_back(distance_to_foreground(pm));
  pb.prepare(s);
  for (int it = 0; it < cfg.coarse_shape_iterations; ++it)
    if (!detail::refine_shape(s, pb, cfg, {c}, part_out.size() == size_t(s.skeleton.bone_count()) ? &part_out : nullptr))
      break;
  s.weights = skinning_weights(s.mesh, s.skeleton);
  s.init_extents = part_extents(s.mesh.vertices, s.weights);
  if (report) *report = {c, hyp_loss, static_cast<int>(parts.size()), static_cast<int>(pairs.size())};
  s.validate(nf);
  return s;
}

// ---------------------------------------------------------------------------
// E-step, warm-up, M-step

// Motion-only fit, frames solved outward from the canonical frame, each
// starting from its already solved neighbour.
inline void warm_up(ModelState& s, const Observations& obs, const ScheduleConfig& cfg) {
  detail::Problem pb(obs, cfg);
  pb.prepare(s);
  const int nf = static_cast<int>(s.frames.size());
  const int c = s.canonical_frame;
  for (int f : detail::outward_order(c, nf)) {
    detail::PoseOptions po;
    po.iterations = cfg.warmup_iterations;
    if (f < c) {
      s.frames[f].root = s.frames[f + 1].root;
      s.frames[f].bones = s.frames[f + 1].bones;
      po.neighbors = {false, true};
    } else if (f > c) {
      s.frames[f].root = s.frames[f - 1].root;
      s.frames[f].bones = s.frames[f - 1].bones;
      po.neighbors = {true, false};
    } else {
      po.neighbors = {false, false};
    }
    detail::refine_frame(pb, s, f, s.frames[f], cfg, po);
    pb.set_posed(f, s.posed(f));
  }
}

namespace detail {

// True when the model renders every observed silhouette exactly and its flow
// agrees with the observed flow; the E-step has nothing left to explain then.
inline bool reproduces_observations(const ModelState& s, const Observations& obs) {
  const int nf = obs.frame_count();
  if (static_cast<int>(s.frames.size()) != nf) return false;
  std::vector<char> ok(nf, 0);
  parallel_for(nf, [&](int f) {
    auto x = s.posed(f);
    auto r = rasterize(x, s.mesh.faces, s.frames[f].camera);
    if (!r.silhouette.same_shape(obs.masks[f]) || r.silhouette.data != obs.masks[f].data) return;
    if (obs.has_flow() && f + 1 < nf) {
      auto fl = render_flow(x, s.posed(f + 1), s.mesh.faces, s.frames[f].camera, s.frames[f + 1].camera, &r);
      if (!fl.same_shape(obs.flows[f]) || flow_loss(fl, obs.flows[f], 1.0) > 1e-12) return;
    }
    ok[f] = 1;
  });
  return std::all_of(ok.begin(), ok.end(), [](char c) { return c != 0; });
}

}  // namespace detail

struct EStepReport {
  double before = 0.0;
  double after = 0.0;
  int halvings = 0;
  bool shape_updated = false;
};

// Pose updates for all frames from one snapshot (frame-parallel), then the
// canonical shape update. The block is accepted only if the training
// objective does not increase; otherwise the pose deltas are halved.
inline EStepReport e_step(ModelState& s, const Observations& obs, const ScheduleConfig& cfg, int steps,
                          bool update_shape = true) {
  EStepReport rep;
  if (steps <= 0) return rep;
  detail::Problem pb(obs, cfg);
  pb.prepare(s);
  rep.before = pb.objective(s);
  rep.after = rep.before;
  if (detail::reproduces_observations(s, obs)) return rep;
  const int nf = static_cast<int>(s.frames.size());
  std::vector<FrameParams> proposed = s.frames;
  parallel_for(nf, [&](int f) {
    detail::PoseOptions po;
    po.iterations = steps;
    detail::refine_frame(pb, s, f, proposed[f], cfg, po);
  });
  const std::vector<FrameParams> old = s.frames;
  double accepted_cost = rep.before;
  bool ok = false;
  for (int half = 0; half <= 10 && !ok; ++half) {
    const double a = std::ldexp(1.0, -half);
    ModelState cand = s;
    for (int f = 0; f < nf; ++f) {
      // interpolate every transform towards the proposal
      auto mix = [&](const SE3& p, const SE3& q) {
        SE3 d = q * p.inverse();
        return SE3{rotation_from_axis_angle(a * axis_angle_from_rotation(d.rotation)), a * d.translation} * p;
      };
      FrameParams& fp = cand.frames[f];
      fp.root = mix(old[f].root, proposed[f].root).reorthonormalized();
      for (std::size_t b = 0; b < fp.bones.size(); ++b)
        fp.bones[b] = mix(old[f].bones[b], proposed[f].bones[b]).reorthonormalized();
    }
    for (int f = 0; f < nf; ++f) pb.set_posed(f, cand.posed(f));
    double c = pb.objective(cand);
    if (c <= rep.before) {
      s.frames = cand.frames;
      accepted_cost = c;
      ok = true;
      rep.halvings = half;
    }
  }
  if (!ok) {
    warn("e_step: no pose update decreased the training objective; poses kept");
    for (int f = 0; f < nf; ++f) pb.set_posed(f, s.posed(f));
    rep.halvings = 11;
  }
  rep.after = accepted_cost;
  if (update_shape) {
    std::vector<int> all(nf);
    std::iota(all.begin(), all.end(), 0);
    for (int it = 0; it < cfg.shape_iterations; ++it)
      if (detail::refine_shape(s, pb, cfg, all)) rep.shape_updated = true;
      else break;
    rep.after = pb.objective(s);
  }
  return rep;
}

// Per-frame bone flows of the current model against the observed flow.
inline std::vector<BoneFlow> observed_bone_flows(const ModelState& s, const Observations& obs) {
  const int np = obs.has_flow() ? obs.frame_count() - 1 : 0;
  std::vector<BoneFlow> out(np);
  parallel_for(np, [&](int f) {
    auto x = s.posed(f);
    auto vis = vertex_visibility(x, s.mesh.faces, s.frames[f].camera);
    out[f] = bone_flow(surface_flow(obs.flows[f], x, s.frames[f].camera), s.weights, vis);
  });
  return out;
}

struct MStepReport {
  int grown = 0;
  int merges = 0;
  int splits = 0;
  std::vector<int> boundary_bones;
  int joint_fallbacks = 0;
  bool structure_changed = false;
};

// Full skeleton refinement from the current shape and motion. Frame cameras
// are never touched; bone transforms follow the bone they came from.
inline MStepReport m_step(ModelState& s, const Observations& obs, const ScheduleConfig& cfg, bool constraints = true) {
  MStepReport rep;
  const Skeleton before = s.skeleton;
  const auto& x = s.mesh.vertices;
  // centers and weights are alternated until the partition settles
  for (int it = 0; it < cfg.shift_iterations; ++it) {
    Skeleton moved = bone_shift(s.skeleton, x, s.weights);
    double step = 0;
    for (int b = 0; b < moved.bone_count(); ++b)
      step = std::max(step, (moved.bones[b].center - s.skeleton.bones[b].center).norm());
    s.skeleton = moved;
    s.weights = skinning_weights(s.mesh, s.skeleton);
    if (step < 1e-4 * s.scale) break;
  }
  const int nb0 = s.skeleton.bone_count();
  auto g = grow_skeleton(s.skeleton, x, s.weights, s.init_extents);
  rep.grown = g.grown;
  {
    std::vector<int> src(g.skeleton.bone_count());
    std::iota(src.begin(), src.begin() + nb0, 0);
    // appended sections inherit the transform of the bone they grew from
    for (std::size_t k = s.skeleton.joints.size(); k < g.skeleton.joints.size(); ++k)
      src[g.skeleton.joints[k].j] = src[g.skeleton.joints[k].i];
    s.frames = detail::remap_frames(s.frames, src);
  }
  s.skeleton = g.skeleton;
  s.init_extents = g.init_extents;
  s.weights = skinning_weights(s.mesh, s.skeleton);
  if (constraints) {
    auto flows = observed_bone_flows(s, obs);
    auto m = merge_bones(s.skeleton, flows, cfg.t_o, s.weights);
    rep.merges = m.merges;
    if (m.merges > 0) {
      std::vector<int> src(m.skeleton.bone_count(), -1);
      std::vector<double> ext(m.skeleton.bone_count(), 0.0);
      for (int b = 0; b < s.skeleton.bone_count(); ++b) {
        int nbi = m.bone_map[b];
        if (src[nbi] < 0) src[nbi] = b;
        ext[nbi] = std::max(ext[nbi], s.init_extents[b]);
      }
      s.frames = detail::remap_frames(s.frames, src);
      s.skeleton = m.skeleton;
      s.init_extents = ext;
      s.weights = skinning_weights(s.mesh, s.skeleton);
    }
    std::vector<std::vector<double>> lengths(s.frames.size());
    parallel_for(static_cast<int>(s.frames.size()),
                 [&](int f) { lengths[f] = frame_bone_lengths(s.skeleton, x, s.weights, s.frames[f]); });
    auto sp = split_joints(s.skeleton, lengths, cfg.t_d);
    rep.splits = sp.splits;
    rep.boundary_bones = sp.boundary_bones;
    if (sp.splits > 0) {
      std::vector<int> src(sp.skeleton.bone_count());
      std::iota(src.begin(), src.begin() + s.skeleton.bone_count(), 0);
      int at = s.skeleton.bone_count();
      for (std::size_t k = s.skeleton.joints.size(); k < sp.skeleton.joints.size(); ++k) src[at++] = sp.skeleton.joints[k].i;
      s.frames = detail::remap_frames(s.frames, src);
      s.skeleton = sp.skeleton;
      s.weights = skinning_weights(s.mesh, s.skeleton);
      s.init_extents = part_extents(x, s.weights);
    }
  }
  auto jp = joint_positions(s.skeleton, x, s.weights, cfg.t_r);
  for (char fb : jp.fallback) rep.joint_fallbacks += fb != 0;
  s.skeleton = with_lengths(jp.skeleton, bone_lengths(jp.skeleton, x, s.weights));
  s.weights = skinning_weights(s.mesh, s.skeleton);
  validate_skeleton(s.skeleton);
  rep.structure_changed = !same_structure(before, s.skeleton);
  return rep;
}

// Upsample until at least `min_bones` bones; transforms are inherited.
inline void upsample_state(ModelState& s, int min_bones) {
  do {
    const int nb = s.skeleton.bone_count();
    s.skeleton = upsample_skeleton(s.skeleton);
    std::vector<int> src(2 * nb);
    for (int b = 0; b < 2 * nb; ++b) src[b] = b % nb;
    s.frames = detail::remap_frames(s.frames, src);
  } while (s.skeleton.bone_count() < min_bones);
  s.weights = skinning_weights(s.mesh, s.skeleton);
  s.init_extents = part_extents(s.mesh.vertices, s.weights);
}

// ---------------------------------------------------------------------------
// Reported losses

inline LossTerms evaluate_losses(const ModelState& s, const Observations& obs, const ScheduleConfig& cfg) {
  LossTerms t;
  const int nf = static_cast<int>(s.frames.size());
  std::vector<std::vector<Vec3>> x(nf);
  std::vector<RasterOutput> ras(nf);
  parallel_for(nf, [&](int f) {
    x[f] = s.posed(f);
    ras[f] = rasterize(x[f], s.mesh.faces, s.frames[f].camera);
  });
  std::vector<double> sil(nf), flow(std::max(0, nf - 1), 0.0), dr(std::max(0, nf - 1), 0.0);
  auto rc = rigidity_coefficients(s.weights, mesh_edges(s.mesh));
  const int v = log_verbosity();
  log_verbosity() = 0;
  parallel_for(nf, [&](int f) {
    sil[f] = silhouette_loss(ras[f].silhouette, obs.masks[f]);
    if (f + 1 < nf) {
      dr[f] = dr_loss(x[f], x[f + 1], rc);
      if (obs.has_flow()) {
        auto fl = render_flow(x[f], x[f + 1], s.mesh.faces, s.frames[f].camera, s.frames[f + 1].camera, &ras[f]);
        flow[f] = flow_loss(fl, obs.flows[f], cfg.weights.sigma) / std::max(cfg.weights.sigma, 1e-300);
      }
    }
  });
  t[LossTerm::Silhouette] = pairwise_sum(sil) / nf;
  t[LossTerm::Flow] = flow.empty() ? 0.0 : cfg.weights.sigma * pairwise_sum(flow) / double(flow.size());
  t[LossTerm::DynamicRigidity] = pairwise_sum(dr);
  t[LossTerm::Symmetry] = symmetry_loss(s.mesh.vertices);
  t[LossTerm::Laplacian] = laplacian_loss(s.mesh);
  log_verbosity() = v;
  return t;
}

// ---------------------------------------------------------------------------
// Bundle

inline void write_params(const std::string& path, const std::vector<FrameParams>& frames) {
  std::ofstream os(path);
  require(static_cast<bool>(os), ErrorCode::Io, "cannot write " + path);
  const int nb = frames.empty() ? 0 : static_cast<int>(frames[0].bones.size());
  os << "# per frame: root (3 axis-angle, 3 translation), then per bone the same, then camera "
        "(focal cx cy width height, 3 axis-angle, 3 translation)\n";
  os << "frame,bones";
  auto head = [&](const std::string& p) {
    for (const char* k : {"wx", "wy", "wz", "tx", "ty", "tz"}) os << ',' << p << '_' << k;
  };
  head("root");
  for (int b = 0; b < nb; ++b) head("bone" + std::to_string(b));
  os << ",focal,cx,cy,width,height";
  head("cam");
  os << '\n';
  auto put = [&](const SE3& t) {
    Vec3 w = axis_angle_from_rotation(t.rotation);
    for (int k = 0; k < 3; ++k) {
      os << ',';
      detail::put_double(os, w[k]);
    }
    for (int k = 0; k < 3; ++k) {
      os << ',';
      detail::put_double(os, t.translation[k]);
    }
  };
  for (std::size_t f = 0; f < frames.size(); ++f) {
    const auto& fp = frames[f];
    os << f << ',' << fp.bones.size();
    put(fp.root);
    for (const auto& b : fp.bones) put(b);
    for (double v : {fp.camera.focal, fp.camera.principal.u, fp.camera.principal.v}) {
      os << ',';
      detail::put_double(os, v);
    }
    os << ',' << fp.camera.width << ',' << fp.camera.height;
    put(fp.camera.extrinsic);
    os << '\n';
  }
}

inline std::vector<FrameParams> read_params(const std::string& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), ErrorCode::Io, "cannot read " + path);
  std::vector<FrameParams> out;
  std::string line;
  int n = 0;
  auto se3 = [](const std::vector<double>& v, std::size_t at) {
    return SE3{rotation_from_axis_angle(Vec3(v[at], v[at + 1], v[at + 2])), Vec3(v[at + 3], v[at + 4], v[at + 5])};
  };
  while (std::getline(is, line)) {
    ++n;
    if (line.empty() || line[0] == '#' || line.rfind("frame", 0) == 0) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::vector<double> v;
    for (const auto& tok : detail::tokens(line)) v.push_back(detail::parse_double(tok, n));
    require(v.size() >= 2, ErrorCode::Parse, path + ": short row");
    const int nb = static_cast<int>(v[1]);
    require(nb >= 0 && v.size() == std::size_t(2 + 6 * (nb + 1) + 5 + 6), ErrorCode::Parse,
            path + ":" + std::to_string(n) + ": wrong field count");
    FrameParams fp;
    fp.root = se3(v, 2);
    for (int b = 0; b < nb; ++b) fp.bones.push_back(se3(v, 8 + 6 * b));
    std::size_t at = 8 + 6 * nb;
    fp.camera.focal = v[at];
    fp.camera.principal = {v[at + 1], v[at + 2]};
    fp.camera.width = static_cast<int>(v[at + 3]);
    fp.camera.height = static_cast<int>(v[at + 4]);
    fp.camera.extrinsic = se3(v, at + 5);
    out.push_back(fp);
  }
  return out;
}

// Bundle: canonical.obj, mesh_####.obj (posed), skeleton_final.skel,
// params.csv, config.txt (loss_log.csv is written while running).
inline void write_bundle(const std::string& dir, const ModelState& s, const ScheduleConfig& cfg) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(!ec && std::filesystem::is_directory(dir), ErrorCode::Io, "cannot create " + dir);
  write_obj(dir + "/canonical.obj", s.mesh);
  for (int f = 0; f < static_cast<int>(s.frames.size()); ++f) {
    Mesh m = s.mesh;
    m.vertices = s.posed(f);
    write_obj(dir + "/" + frame_name("mesh", f, "obj"), m);
  }
  write_skel(dir + "/skeleton_final.skel", s.skeleton);
  write_params(dir + "/params.csv", s.frames);
  std::ofstream os(dir + "/config.txt");
  require(static_cast<bool>(os), ErrorCode::Io, "cannot write config.txt");
  write_config(os, cfg);
}

// Model reloaded from a bundle; weights are recomputed from the skeleton.
inline ModelState read_bundle(const std::string& dir) {
  ModelState s;
  s.mesh = read_obj(dir + "/canonical.obj");
  s.skeleton = read_skel(dir + "/skeleton_final.skel");
  s.frames = read_params(dir + "/params.csv");
  s.weights = skinning_weights(s.mesh, s.skeleton);
  s.scale = bbox_diagonal(s.mesh.vertices);
  s.validate(static_cast<int>(s.frames.size()));
  return s;
}

// ---------------------------------------------------------------------------

struct RunReport {
  CoarseReport coarse;
  std::vector<std::string> events;  // one line per epoch
  int epochs_run = 0;
  bool early_stop = false;
};

inline ModelState run_s3o(const Observations& obs, const ScheduleConfig& cfg, const std::string& out_dir = "",
                          RunReport* report = nullptr) {
  cfg.validate();
  RunReport rep;
  std::optional<LossLog> log;
  if (!out_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    require(!ec, ErrorCode::Io, "cannot create " + out_dir);
    log.emplace(out_dir + "/loss_log.csv");
  }
  auto record = [&](ModelState& s, long it) {
    if (!log) return;
    log->append(it, s.phase, total_loss(evaluate_losses(s, obs, cfg), cfg.weights, s.phase));
  };
  ModelState s = coarse_phase(obs, cfg, &rep.coarse);
  info("coarse: canonical frame " + std::to_string(s.canonical_frame) + ", " +
       std::to_string(s.skeleton.bone_count()) + " bones, hypothesis " + std::to_string(s.hypothesis));
  record(s, 0);
  if (cfg.epochs > 0) {
    warm_up(s, obs, cfg);
    const int e1 = cfg.e1();
    int unchanged = 0;
    for (int e = 1; e <= cfg.epochs; ++e) {
      s.epoch = e;
      std::ostringstream ev;
      ev << "epoch " << e << ": ";
      if (e < e1) {
        auto er = e_step(s, obs, cfg, cfg.iterations);
        m_step(s, obs, cfg, false);
        ev << "adapt, objective " << er.before << " -> " << er.after;
      } else if (e == e1) {
        s.phase = Phase::Joint;
        upsample_state(s, cfg.upsample_min_bones);
        auto er = e_step(s, obs, cfg, cfg.iterations);
        ev << "upsample to " << s.skeleton.bone_count() << " bones, objective " << er.before << " -> " << er.after;
      } else {
        auto er = e_step(s, obs, cfg, cfg.iterations);
        auto mr = m_step(s, obs, cfg, true);
        ev << "objective " << er.before << " -> " << er.after << ", merges " << mr.merges << ", splits " << mr.splits
           << ", bones " << s.skeleton.bone_count();
        unchanged = mr.structure_changed ? 0 : unchanged + 1;
      }
      info(ev.str());
      rep.events.push_back(ev.str());
      rep.epochs_run = e;
      record(s, e);
      if (e > e1 && unchanged >= cfg.patience) {
        rep.early_stop = e < cfg.epochs;
        break;
      }
    }
  }
  s.validate(obs.frame_count());
  if (!out_dir.empty()) write_bundle(out_dir, s, cfg);
  if (report) *report = rep;
  return s;
}

}  // namespace s3o
