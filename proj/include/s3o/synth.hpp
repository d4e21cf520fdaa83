#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "s3o/geom.hpp"
#include "s3o/image.hpp"
#include "s3o/renderer.hpp"
#include "s3o/skeleton.hpp"
#include "s3o/skeleton_lift.hpp"
#include "s3o/skinning.hpp"

namespace s3o {

struct SynthScene {
  std::string name;
  Mesh mesh;                 // rest pose
  Skeleton skeleton;         // ground truth, rest pose
  SkinningWeights weights;   // ground truth
  std::vector<FrameParams> frames;
  std::vector<PartDescriptor> descriptors;
  std::uint64_t seed = 0;

  int frame_count() const { return static_cast<int>(frames.size()); }
  std::vector<Vec3> posed(int f) const { return forward_skin(mesh.vertices, weights, frames[f]); }
  std::vector<Vec3> posed_joints(int f) const {
    std::vector<Vec3> out;
    for (const auto& j : skeleton.joints) {
      // joints sit on the rigid transform of either bone; use the mean
      const auto& fp = frames[f];
      out.push_back(fp.root.apply(0.5 * (fp.bones[j.i].apply(j.position) + fp.bones[j.j].apply(j.position))));
    }
    return out;
  }
};

// Closed tube around the polyline axis [a, b] with hemispherical caps.
inline Mesh capsule_mesh(const Vec3& a, const Vec3& b, double radius, int segments, int cap_rings, double spacing) {
  Vec3 axis = b - a;
  const double len = axis.norm();
  axis /= len;
  Vec3 u = std::abs(axis.x()) < 0.9 ? Vec3::UnitX().cross(axis) : Vec3::UnitY().cross(axis);
  u.normalize();
  Vec3 v = axis.cross(u);
  Mesh m;
  std::vector<std::vector<int>> rings;
  auto add_ring = [&](const Vec3& c, double r) {
    std::vector<int> ring;
    for (int s = 0; s < segments; ++s) {
      double phi = 2.0 * M_PI * s / segments;
      m.vertices.push_back(c + r * (std::cos(phi) * u + std::sin(phi) * v));
      ring.push_back(static_cast<int>(m.vertices.size()) - 1);
    }
    rings.push_back(ring);
  };
  m.vertices.push_back(a - radius * axis);
  const int south = 0;
  for (int k = 1; k <= cap_rings; ++k) {
    double t = (M_PI / 2) * (1.0 - double(k) / cap_rings);
    add_ring(a - radius * std::sin(t) * axis, radius * std::cos(t));
  }
  const int body = std::max(1, static_cast<int>(std::ceil(len / spacing)));
  for (int k = 1; k < body; ++k) add_ring(a + (len * k / body) * axis, radius);
  for (int k = 0; k < cap_rings; ++k) {
    double t = (M_PI / 2) * (double(k) / cap_rings);
    add_ring(b + radius * std::sin(t) * axis, radius * std::cos(t));
  }
  m.vertices.push_back(b + radius * axis);
  const int north = static_cast<int>(m.vertices.size()) - 1;
  // orientation: outward normals given (u, v, axis) right-handed
  for (int s = 0; s < segments; ++s) m.faces.push_back({south, rings[0][(s + 1) % segments], rings[0][s]});
  for (std::size_t r = 0; r + 1 < rings.size(); ++r)
    for (int s = 0; s < segments; ++s) {
      int a0 = rings[r][s], a1 = rings[r][(s + 1) % segments];
      int b0 = rings[r + 1][s], b1 = rings[r + 1][(s + 1) % segments];
      m.faces.push_back({a0, a1, b1});
      m.faces.push_back({a0, b1, b0});
    }
  for (int s = 0; s < segments; ++s) m.faces.push_back({north, rings.back()[s], rings.back()[(s + 1) % segments]});
  return m;
}

inline double point_segment_distance(const Vec3& p, const Vec3& a, const Vec3& b) {
  Vec3 ab = b - a;
  double t = ab.squaredNorm() > 0 ? std::clamp((p - a).dot(ab) / ab.squaredNorm(), 0.0, 1.0) : 0.0;
  return (p - (a + t * ab)).norm();
}

// Soft nearest-segment weights: exp(-(d_b - d_min)^2 / (2 s^2)), rows normalized.
inline SkinningWeights segment_weights(const std::vector<Vec3>& x, const std::vector<std::pair<Vec3, Vec3>>& segs,
                                       double falloff) {
  SkinningWeights w(x.size(), segs.size());
  for (std::size_t n = 0; n < x.size(); ++n) {
    std::vector<double> d(segs.size());
    double dmin = std::numeric_limits<double>::infinity();
    for (std::size_t b = 0; b < segs.size(); ++b) {
      d[b] = point_segment_distance(x[n], segs[b].first, segs[b].second);
      dmin = std::min(dmin, d[b]);
    }
    double sum = 0.0;
    for (std::size_t b = 0; b < segs.size(); ++b) {
      double e = (d[b] - dmin) / falloff;
      sum += (w(n, b) = std::exp(-0.5 * e * e));
    }
    w.row(n) /= sum;
  }
  return w;
}

inline Bone capsule_bone(const Vec3& a, const Vec3& b, double radius) {
  Vec3 axis = (b - a).normalized();
  double half = 0.5 * (b - a).norm() + radius;
  Mat3 q = (1.0 / (radius * radius)) * Mat3::Identity() + (1.0 / (half * half) - 1.0 / (radius * radius)) * axis * axis.transpose();
  return {0.5 * (a + b), q, (b - a).norm()};
}

struct CameraSetup {
  int width = 160;
  int height = 120;
  double focal = 200.0;
  double distance = 6.0;
};

// `elevation` > 0 lifts the camera above the target (toward -y) and tilts it down.
inline Camera look_camera(const CameraSetup& cs, double azimuth = 0.0, const Vec3& target = Vec3::Zero(),
                          double elevation = 0.0) {
  Camera c;
  c.focal = cs.focal;
  c.width = cs.width;
  c.height = cs.height;
  c.principal = {cs.width / 2.0, cs.height / 2.0};
  // world y points down like the image; the camera orbits about that axis
  Mat3 r = rotation_from_axis_angle(Vec3(elevation, 0, 0)) * rotation_from_axis_angle(Vec3(0, azimuth, 0));
  c.extrinsic.rotation = r;
  c.extrinsic.translation = Vec3(0, 0, cs.distance) - r * target;
  return c;
}

struct ChainMotion {
  int frames = 30;
  double amplitude_deg = 30.0;  // hinge amplitude (>= 20 keeps every hinge visibly bending)
  double cycles = 1.0;          // oscillations over the sequence
  std::vector<double> phases;   // per joint, radians; default alternates 0, pi, 0, ...
  double bob = 0.8;             // vertical root motion relative to the hinge-induced speed
  double bob_phase = 0.0;
  CameraSetup camera;
};

// Capsule chain along x, centered at the origin, bending about z (the viewing
// axis) at every joint while the middle of the chain bobs vertically.
inline SynthScene make_chain(int num_bones, double segment_length = 1.0, double radius = 0.15,
                             const ChainMotion& motion = {}, std::uint64_t seed = 0) {
  require(num_bones >= 1, ErrorCode::InvalidArgument, "make_chain: num_bones must be >= 1");
  SynthScene s;
  s.name = "chain";
  s.seed = seed;
  const double total = num_bones * segment_length;
  const Vec3 a(-total / 2, 0, 0), b(total / 2, 0, 0);
  s.mesh = capsule_mesh(a, b, radius, 24, 6, 2.0 * M_PI * radius / 24.0);
  std::vector<std::pair<Vec3, Vec3>> segs;
  for (int k = 0; k < num_bones; ++k) {
    Vec3 p(-total / 2 + k * segment_length, 0, 0), q(-total / 2 + (k + 1) * segment_length, 0, 0);
    segs.emplace_back(p, q);
    s.skeleton.bones.push_back(capsule_bone(p, q, radius));
  }
  for (int k = 0; k + 1 < num_bones; ++k) s.skeleton.joints.push_back({k, k + 1, segs[k].second});
  s.weights = segment_weights(s.mesh.vertices, segs, 0.05 * segment_length);

  // The bone nearest the middle is the kinematic base; hinges open outward from it.
  const int base = (num_bones - 1) / 2;
  const double amp = motion.amplitude_deg * M_PI / 180.0;
  const double omega = 2.0 * M_PI * motion.cycles / std::max(1, motion.frames);
  const double bob_amp = motion.bob * amp * segment_length;
  for (int f = 0; f < motion.frames; ++f) {
    FrameParams fp = identity_params(num_bones, look_camera(motion.camera));
    std::vector<double> theta(std::max(0, num_bones - 1));
    for (int j = 0; j + 1 < num_bones; ++j) {
      double ph = j < static_cast<int>(motion.phases.size()) ? motion.phases[j] : (j % 2 ? M_PI : 0.0);
      theta[j] = amp * std::sin(omega * f + ph);
    }
    for (int k = base - 1; k >= 0; --k) {
      SE3 hinge = SE3::rotation_about(Vec3(0, 0, theta[k]), segs[k].second);
      fp.bones[k] = fp.bones[k + 1] * hinge;
    }
    for (int k = base + 1; k < num_bones; ++k) {
      SE3 hinge = SE3::rotation_about(Vec3(0, 0, theta[k - 1]), segs[k].first);
      fp.bones[k] = fp.bones[k - 1] * hinge;
    }
    fp.root = SE3::from_translation(Vec3(0, bob_amp * std::sin(omega * f + motion.bob_phase), 0));
    s.frames.push_back(fp);
  }
  return s;
}

struct QuadrupedConfig {
  double torso_length = 1.2;
  double torso_radius = 0.16;
  double leg_length = 0.55;
  double leg_radius = 0.06;
  double leg_spread = 0.11;  // half distance between left and right legs
  double neck_length = 0.35;
  double head_length = 0.3;
  double tail_length = 0.45;
  int frames = 24;
  double azimuth_step_deg = 12.0;
  int side_view_frame = 12;
  // seen slightly from above, the depth spread of the body shows up as height
  // once the camera leaves the side view, which sharpens the side-view peak
  double elevation_deg = 15.0;
  CameraSetup camera{320, 240, 300.0, 6.0};
};

// Torso along x (head at +x), legs hanging toward +y (down in the image),
// left/right leg pairs mirrored across z = 0. Frames orbit the camera.
inline SynthScene make_quadruped(const QuadrupedConfig& cfg = {}, std::uint64_t seed = 0) {
  SynthScene s;
  s.name = "quadruped";
  s.seed = seed;
  const double hx = cfg.torso_length / 2;
  std::vector<Capsule> caps;
  std::vector<std::pair<Vec3, Vec3>> segs;
  auto add = [&](Vec3 a, Vec3 b, double r) {
    caps.push_back({a, b, r});
    segs.emplace_back(a, b);
    s.skeleton.bones.push_back(capsule_bone(a, b, r));
  };
  add(Vec3(-hx, 0, 0), Vec3(hx, 0, 0), cfg.torso_radius);  // 0 torso
  const double lx = hx - 0.12;
  const Vec3 hips[4] = {{lx, 0.05, cfg.leg_spread}, {lx, 0.05, -cfg.leg_spread},
                        {-lx, 0.05, cfg.leg_spread}, {-lx, 0.05, -cfg.leg_spread}};
  for (const auto& h : hips) add(h, h + Vec3(0, cfg.leg_length, 0), cfg.leg_radius);  // 1..4 legs
  const Vec3 neck_a(hx, 0, 0), neck_b = neck_a + cfg.neck_length * Vec3(0.6, -0.8, 0);
  add(neck_a, neck_b, 0.07);                                                   // 5 neck
  add(neck_b, neck_b + Vec3(cfg.head_length, 0.05, 0), 0.09);                  // 6 head
  add(Vec3(-hx, 0, 0), Vec3(-hx, 0, 0) + cfg.tail_length * Vec3(-0.8, -0.6, 0), 0.04);  // 7 tail
  for (int l = 1; l <= 4; ++l) s.skeleton.joints.push_back({0, l, hips[l - 1]});
  s.skeleton.joints.push_back({0, 5, neck_a});
  s.skeleton.joints.push_back({5, 6, neck_b});
  s.skeleton.joints.push_back({0, 7, Vec3(-hx, 0, 0)});

  PrimitiveUnion u;
  u.capsules = caps;
  CoarseMeshOptions opt;
  opt.grid_resolution = 60;
  opt.max_grid_resolution = 120;
  auto g = detail::sample_union(u, opt);
  s.mesh = detail::marching_tetrahedra(u, g);
  s.weights = segment_weights(s.mesh.vertices, segs, 0.03);

  for (int b = 0; b < s.skeleton.bone_count(); ++b) {
    const auto& c = caps[b];
    // per-part descriptor: mean-feature stand-in shared by mirrored legs
    std::vector<double> feat = {c.radius, (c.b - c.a).norm(), std::abs(c.b.y() - c.a.y())};
    s.descriptors.push_back({b, feat, (c.b - c.a).norm(), c.radius});
  }
  // orbit about the middle of the bounding box so head and tail sit at equal
  // distances from the axis and the widest view is the perpendicular one
  Vec3 lo = s.mesh.vertices.front(), hi = lo;
  for (const auto& v : s.mesh.vertices) {
    lo = lo.cwiseMin(v);
    hi = hi.cwiseMax(v);
  }
  const Vec3 target(0.5 * (lo.x() + hi.x()), 0.5 * (lo.y() + hi.y()), 0.0);
  for (int f = 0; f < cfg.frames; ++f) {
    double az = (f - cfg.side_view_frame) * cfg.azimuth_step_deg * M_PI / 180.0;
    s.frames.push_back(identity_params(s.skeleton.bone_count(), look_camera(cfg.camera, az, target, cfg.elevation_deg * M_PI / 180.0)));
  }
  return s;
}

// 2D part graph of a scene's skeleton seen from `cam`: one edge per bone
// between the nodes at its two ends. A joint attaches to the nearer end of
// each of its bones, so mirrored limbs hanging off one body end share a node
// the way they do in a side-view silhouette.
inline SkeletonGraph2D projected_part_graph(const Skeleton& s, const Camera& cam) {
  const int nb = s.bone_count();
  std::vector<Vec3> end_pos(2 * nb);
  for (int b = 0; b < nb; ++b) {
    Vec3 axis = bone_axis(s.bones[b]);
    end_pos[2 * b] = s.bones[b].center - 0.5 * s.bones[b].length * axis;
    end_pos[2 * b + 1] = s.bones[b].center + 0.5 * s.bones[b].length * axis;
  }
  auto nearer_end = [&](int b, const Vec3& p) {
    return (end_pos[2 * b] - p).norm() <= (end_pos[2 * b + 1] - p).norm() ? 2 * b : 2 * b + 1;
  };
  std::vector<int> parent(2 * nb);
  std::iota(parent.begin(), parent.end(), 0);
  std::function<int(int)> find = [&](int x) { return parent[x] == x ? x : parent[x] = find(parent[x]); };
  std::vector<char> attached(2 * nb, 0);
  for (const auto& j : s.joints) {
    int a = nearer_end(j.i, j.position), c = nearer_end(j.j, j.position);
    attached[a] = attached[c] = 1;
    parent[find(a)] = find(c);
  }
  SkeletonGraph2D g;
  std::vector<int> node_of_root(2 * nb, -1);
  for (int slot = 0; slot < 2 * nb; ++slot) {
    int r = find(slot);
    if (node_of_root[r] >= 0) continue;
    Vec3 mean = Vec3::Zero();
    int count = 0;
    for (int t = 0; t < 2 * nb; ++t)
      if (find(t) == r) {
        mean += end_pos[t];
        ++count;
      }
    g.nodes.push_back({project(cam, mean / count).pixel, NodeKind::Endpoint});
    node_of_root[r] = static_cast<int>(g.nodes.size()) - 1;
  }
  for (int b = 0; b < nb; ++b) {
    int na = node_of_root[find(2 * b)], nc = node_of_root[find(2 * b + 1)];
    if (na == nc) continue;
    Pixel pa = g.nodes[na].position, pc = g.nodes[nc].position;
    const double len = std::hypot(pc.u - pa.u, pc.v - pa.v);
    SkeletonEdge e{na, nc, {}, len};
    const int steps = std::max(1, static_cast<int>(std::ceil(len)));
    for (int k = 0; k <= steps; ++k) {
      double t = double(k) / steps;
      std::pair<int, int> px{static_cast<int>(std::floor(pa.u + t * (pc.u - pa.u))),
                             static_cast<int>(std::floor(pa.v + t * (pc.v - pa.v)))};
      if (e.trace.empty() || e.trace.back() != px) e.trace.push_back(px);
    }
    g.edges.push_back(std::move(e));
  }
  auto deg = g.degrees();
  for (std::size_t n = 0; n < g.nodes.size(); ++n) g.nodes[n].kind = deg[n] >= 3 ? NodeKind::Junction : NodeKind::Endpoint;
  return g;
}

// ---------------------------------------------------------------------------
// Dataset output

struct RenderOptions {
  double flip_noise = 0.0;  // probability of flipping a mask pixel
  int erode = 0;            // mask erosion radius in pixels (4-neighbourhood steps)
};

inline BinaryMask erode_mask(const BinaryMask& m, int steps) {
  BinaryMask cur = m;
  for (int s = 0; s < steps; ++s) {
    BinaryMask next = cur;
    for (int y = 0; y < cur.height; ++y)
      for (int x = 0; x < cur.width; ++x)
        if (cur(x, y) && (!fg(cur, x + 1, y) || !fg(cur, x - 1, y) || !fg(cur, x, y + 1) || !fg(cur, x, y - 1)))
          next(x, y) = 0;
    cur = next;
  }
  return cur;
}

inline std::string frame_name(const std::string& prefix, int f, const std::string& ext) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%04d.%s", prefix.c_str(), f, ext.c_str());
  return buf;
}

// camera.csv: frame,focal,cx,cy,width,height,r00,r01,r02,r10,r11,r12,r20,r21,r22,tx,ty,tz
inline void write_cameras(const std::string& path, const std::vector<Camera>& cams) {
  std::ofstream os(path);
  require(static_cast<bool>(os), ErrorCode::Io, "cannot write " + path);
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  os << "frame,focal,cx,cy,width,height,r00,r01,r02,r10,r11,r12,r20,r21,r22,tx,ty,tz\n";
  for (std::size_t f = 0; f < cams.size(); ++f) {
    const auto& c = cams[f];
    os << f << ',' << c.focal << ',' << c.principal.u << ',' << c.principal.v << ',' << c.width << ',' << c.height;
    for (int r = 0; r < 3; ++r)
      for (int k = 0; k < 3; ++k) os << ',' << c.extrinsic.rotation(r, k);
    for (int k = 0; k < 3; ++k) os << ',' << c.extrinsic.translation[k];
    os << '\n';
  }
}

inline std::vector<Camera> read_cameras(const std::string& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), ErrorCode::Io, "cannot read " + path);
  std::vector<Camera> out;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line.rfind("frame", 0) == 0 || line[0] == '#') continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    auto t = detail::tokens(line);
    require(t.size() == 18, ErrorCode::Parse, path + ":" + std::to_string(line_no) + ": expected 18 fields");
    std::vector<double> v;
    for (const auto& s : t) v.push_back(detail::parse_double(s, line_no));
    Camera c;
    c.focal = v[1];
    c.principal = {v[2], v[3]};
    c.width = static_cast<int>(v[4]);
    c.height = static_cast<int>(v[5]);
    for (int r = 0; r < 3; ++r)
      for (int k = 0; k < 3; ++k) c.extrinsic.rotation(r, k) = v[6 + 3 * r + k];
    for (int k = 0; k < 3; ++k) c.extrinsic.translation[k] = v[15 + k];
    require(c.is_valid(), ErrorCode::Parse, path + ":" + std::to_string(line_no) + ": invalid camera");
    out.push_back(c);
  }
  return out;
}

struct DatasetSummary {
  int masks = 0;
  int flows = 0;
};

// Writes mask_####.pgm, flow_####.flo (frame f to f+1), camera.csv,
// keypoints.csv, gt_skeleton.skel and manifest.txt.
inline DatasetSummary render_dataset(const SynthScene& scene, const std::string& out_dir,
                                     const RenderOptions& opt = {}) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  require(!ec && fs::is_directory(out_dir), ErrorCode::Io, "cannot create " + out_dir);
  const int nf = scene.frame_count();
  std::mt19937_64 rng(scene.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  DatasetSummary sum;
  std::vector<Camera> cams;
  std::vector<std::vector<Vec3>> posed(nf);
  for (int f = 0; f < nf; ++f) posed[f] = scene.posed(f);
  std::ofstream kp(out_dir + "/keypoints.csv");
  require(static_cast<bool>(kp), ErrorCode::Io, "cannot write keypoints.csv");
  kp << std::setprecision(std::numeric_limits<double>::max_digits10) << "frame,joint,u,v\n";
  for (int f = 0; f < nf; ++f) {
    const Camera& cam = scene.frames[f].camera;
    cams.push_back(cam);
    RasterOutput r = rasterize(posed[f], scene.mesh.faces, cam);
    BinaryMask mask = opt.erode > 0 ? erode_mask(r.silhouette, opt.erode) : r.silhouette;
    if (opt.flip_noise > 0)
      for (auto& p : mask.data)
        if (unit(rng) < opt.flip_noise) p = p ? 0 : 1;
    write_pgm(out_dir + "/" + frame_name("mask", f, "pgm"), mask);
    ++sum.masks;
    if (f + 1 < nf) {
      FlowField flow = render_flow(posed[f], posed[f + 1], scene.mesh.faces, cam, scene.frames[f + 1].camera, &r);
      write_flo(out_dir + "/" + frame_name("flow", f, "flo"), flow);
      ++sum.flows;
    }
    auto joints = scene.posed_joints(f);
    for (std::size_t k = 0; k < joints.size(); ++k) {
      auto p = try_project(cam, joints[k]);
      if (p) kp << f << ',' << k << ',' << p->pixel.u << ',' << p->pixel.v << '\n';
    }
  }
  write_cameras(out_dir + "/camera.csv", cams);
  write_skel(out_dir + "/gt_skeleton.skel", scene.skeleton);
  std::ofstream man(out_dir + "/manifest.txt");
  require(static_cast<bool>(man), ErrorCode::Io, "cannot write manifest.txt");
  man << "scene = " << scene.name << "\nframes = " << nf << "\nwidth = " << cams.front().width
      << "\nheight = " << cams.front().height << "\nseed = " << scene.seed << "\nflip_noise = " << opt.flip_noise
      << "\nerode = " << opt.erode << "\nvertices = " << scene.mesh.vertices.size() << '\n';
  return sum;
}

}  // namespace s3o
