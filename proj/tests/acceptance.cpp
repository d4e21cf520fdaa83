// Acceptance run: one PASS/FAIL line per criterion. Exit status is the number
// of failed criteria.
#include <sys/wait.h>

#include <chrono>
#include <cstring>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include "s3o/optimizer.hpp"
#include "test_support.hpp"

using namespace s3o;
namespace fs = std::filesystem;
using testing_support::temp_dir;

namespace {

struct Result {
  std::vector<std::string> failures;
  std::vector<std::string> notes;

  void check(bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  }
  void note(const std::string& s) { notes.push_back(s); }
};

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(4) << v;
  return os.str();
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

int run_cli(const std::string& args) {
  std::string cmd = std::string(S3O_CLI_PATH) + " " + args + " 2>/dev/null";
  int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

ModelState gt_state(const SynthScene& sc) {
  ModelState s;
  s.mesh = sc.mesh;
  s.skeleton = sc.skeleton;
  s.weights = sc.weights;
  s.frames = sc.frames;
  s.scale = bbox_diagonal(sc.mesh.vertices);
  s.init_extents = part_extents(sc.mesh.vertices, sc.weights);
  return s;
}

SynthScene arm_scene() {
  ChainMotion mo;
  mo.bob_phase = M_PI / 2;
  return make_chain(2, 1.0, 0.15, mo);
}

// ---------------------------------------------------------------------------

void skinning_algebra(Result& r) {
  std::mt19937 rng(1);
  std::normal_distribution<double> g(0, 1);
  auto random_se3 = [&](double a) {
    return SE3{rotation_from_axis_angle(a * Vec3(g(rng), g(rng), g(rng))), Vec3(g(rng), g(rng), g(rng))};
  };
  SynthScene chain = make_chain(3);
  auto same = forward_skin(chain.mesh.vertices, chain.weights, identity_params(3));
  bool exact = true;
  for (std::size_t i = 0; i < same.size(); ++i) exact &= same[i] == chain.mesh.vertices[i];
  r.check(exact, "identity pose does not reproduce the rest mesh exactly");

  double worst = 0;
  for (int trial = 0; trial < 10; ++trial) {
    FrameParams fp = identity_params(3);
    fp.root = random_se3(1.0);
    for (auto& b : fp.bones) b = random_se3(0.5);
    auto back = backward_skin(forward_skin(chain.mesh.vertices, chain.weights, fp), chain.weights, fp);
    for (std::size_t i = 0; i < back.size(); ++i) worst = std::max(worst, (back[i] - chain.mesh.vertices[i]).norm());
  }
  r.check(worst < 1e-6, "round trip error " + fmt(worst));
  r.note("round trip " + fmt(worst));

  SkinningWeights w(1, 2);
  w << 0.5, 0.5;
  FrameParams fp = identity_params(2);
  fp.bones[0].rotation = rotation_from_axis_angle(Vec3(M_PI, 0, 0));
  fp.bones[1].rotation = rotation_from_axis_angle(Vec3(0, M_PI, 0));
  bool raised = false;
  try {
    backward_skin(std::vector<Vec3>{Vec3(1, 2, 3)}, w, fp);
  } catch (const Error& e) {
    raised = e.code() == ErrorCode::SingularBlend;
  }
  r.check(raised, "SingularBlend not raised for the 180/180 blend");
}

void rigidity_math(Result& r) {
  auto near = [](double a, double b, double tol) { return std::abs(a - b) <= tol; };
  r.check(near(entropy({1, 0, 0, 0}), 0.1, 1e-15), "one-hot entropy");
  r.check(near(entropy({0.25, 0.25, 0.25, 0.25}), -1.9, 1e-12), "uniform-4 entropy");
  SkinningWeights w(2, 4);
  w << 1, 0, 0, 0, 1, 0, 0, 0;
  r.check(near(rigidity_coefficients(w, {{0, 1}}).at(0, 1), 100.0, 1e-9), "one-hot R != 100");
  SkinningWeights u = SkinningWeights::Constant(2, 4, 0.25);
  r.check(near(rigidity_coefficients(u, {{0, 1}}).at(0, 1), 1 / (1.9 * 1.9), 1e-12), "uniform-4 R");

  Mesh m = icosphere(2);
  const int n = static_cast<int>(m.vertices.size());
  auto edges = mesh_edges(m);
  std::mt19937 rng(5);
  std::uniform_real_distribution<double> uni(0, 1), d(-0.1, 0.1);
  std::normal_distribution<double> g(0, 1);
  SkinningWeights rw(n, 3);
  for (int i = 0; i < n; ++i) {
    Vec3 v(uni(rng), uni(rng), uni(rng));
    rw.row(i) = v.transpose() / v.sum();
  }
  auto coeff = rigidity_coefficients(rw, edges);
  SE3 t{rotation_from_axis_angle(Vec3(0.3, -1.1, 0.7)), Vec3(1, 2, 3)};
  std::vector<Vec3> rigid;
  for (const auto& v : m.vertices) rigid.push_back(t.apply(v));
  const double dr = dr_loss(m.vertices, rigid, coeff);
  r.check(dr < 1e-9, "dr_loss on rigid motion " + fmt(dr));

  int checked = 0;
  double worst = 0;
  for (int trial = 0; checked < 100 && trial < 1000; ++trial) {
    std::vector<Vec3> a = m.vertices, b = m.vertices;
    for (auto& v : a) v += Vec3(d(rng), d(rng), d(rng));
    for (auto& v : b) v += Vec3(d(rng), d(rng), d(rng));
    bool smooth = true;
    for (auto [i, j] : edges) smooth &= std::abs((a[i] - a[j]).norm() - (b[i] - b[j]).norm()) > 1e-4;
    if (!smooth) continue;
    auto grad = dr_loss_gradient(a, b, coeff);
    std::vector<Vec3> da(n), db(n);
    double analytic = 0;
    for (int i = 0; i < n; ++i) {
      da[i] = Vec3(g(rng), g(rng), g(rng));
      db[i] = Vec3(g(rng), g(rng), g(rng));
      analytic += grad.d_xt[i].dot(da[i]) + grad.d_xt1[i].dot(db[i]);
    }
    auto shifted = [&](double s) {
      std::vector<Vec3> pa = a, pb = b;
      for (int i = 0; i < n; ++i) {
        pa[i] += s * da[i];
        pb[i] += s * db[i];
      }
      return dr_loss(pa, pb, coeff);
    };
    const double h = 1e-6, numeric = (shifted(h) - shifted(-h)) / (2 * h);
    worst = std::max(worst, std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric)));
    ++checked;
  }
  r.check(checked == 100, "only " + std::to_string(checked) + " smooth perturbations");
  r.check(worst < 1e-4, "gradient relative error " + fmt(worst));
  r.note("gradient rel err " + fmt(worst) + " over " + std::to_string(checked));
}

void skeletonization(Result& r) {
  using namespace testing_support;
  BinaryMask plus = plus_mask(81, 4, 5);
  auto g = build_skeleton_graph(thin_silhouette(plus), default_prune_length(plus));
  int ends = 0, juncs = 0;
  for (const auto& node : g.nodes) {
    ends += node.kind == NodeKind::Endpoint;
    juncs += node.kind == NodeKind::Junction;
  }
  r.check(ends == 4 && juncs == 1, "plus sign gave " + std::to_string(juncs) + " junctions, " + std::to_string(ends) + " endpoints");

  std::mt19937 rng(99);
  ThinOptions opts;
  opts.fill_holes = false;
  opts.largest_component = false;
  int bad_idem = 0, bad_subset = 0, bad_count = 0;
  for (int k = 0; k < 50; ++k) {
    BinaryMask m = random_blobs(rng, 64, 64, 5);
    Grid<int> labels;
    int nc = label_components(m, &labels);
    BinaryMask all(m.width, m.height, 0);
    for (int c = 1; c <= nc; ++c) {
      BinaryMask part(m.width, m.height, 0);
      for (std::size_t i = 0; i < m.data.size(); ++i) part.data[i] = labels.data[i] == c;
      BinaryMask s = thin_silhouette(part, opts);
      bad_idem += !(thin_silhouette(s, opts) == s);
      for (std::size_t i = 0; i < s.data.size(); ++i) all.data[i] |= s.data[i];
    }
    for (std::size_t i = 0; i < m.data.size(); ++i)
      if (all.data[i] && !m.data[i]) {
        ++bad_subset;
        break;
      }
    bad_count += count_components_bfs(all) != count_components_bfs(m) || nc != count_components_bfs(m);
  }
  r.check(bad_idem == 0, std::to_string(bad_idem) + " thinnings not idempotent");
  r.check(bad_subset == 0, std::to_string(bad_subset) + " skeletons leave the silhouette");
  r.check(bad_count == 0, std::to_string(bad_count) + " of 50 blobs changed component count");
}

void bone_motion_oracle(Result& r) {
  // bone 0 moves right, bone 1 moves down: orthogonal image motions
  SynthScene s = make_chain(2);
  Camera cam = look_camera(CameraSetup{});
  FrameParams a = identity_params(2, cam), b = a;
  b.bones[0].translation = Vec3(0.05, 0, 0);
  b.bones[1].translation = Vec3(0, 0.05, 0);
  auto x0 = forward_skin(s.mesh.vertices, s.weights, a), x1 = forward_skin(s.mesh.vertices, s.weights, b);
  auto raster = rasterize(x0, s.mesh.faces, cam);
  auto vis = vertex_visibility(x0, s.mesh.faces, cam, &raster);
  auto bf = bone_flow(surface_flow(render_flow(x0, x1, s.mesh.faces, cam, cam, &raster), x0, cam), s.weights, vis);
  // ground truth: projected displacement of each bone's center
  for (int k = 0; k < 2; ++k) {
    Vec3 c = s.skeleton.bones[k].center;
    Pixel p0 = project(cam, a.bones[k].apply(c)).pixel, p1 = project(cam, b.bones[k].apply(c)).pixel;
    Vec2 want(p1.u - p0.u, p1.v - p0.v);
    double cs = bf.supported[k] ? cosine_similarity(bf.flow[k], want) : -1;
    r.check(cs > 0.99, "bone " + std::to_string(k) + " cosine " + fmt(cs));
    r.note("cos" + std::to_string(k) + " " + fmt(cs));
  }
  // a small part straight behind a large one is fully occluded
  const Vec3 eye = cam.extrinsic.inverse().translation, ahead = -eye.normalized();
  Mesh front = capsule_mesh(Vec3(-0.6, 0, 0), Vec3(0.6, 0, 0), 0.4, 24, 6, 0.1);
  Mesh back = capsule_mesh(Vec3(-0.3, 0, 0) + 1.5 * ahead, Vec3(0.3, 0, 0) + 1.5 * ahead, 0.1, 16, 4, 0.05);
  Mesh both = front;
  const int nf = static_cast<int>(front.vertices.size());
  for (const auto& v : back.vertices) both.vertices.push_back(v);
  for (auto f : back.faces) both.faces.push_back({f[0] + nf, f[1] + nf, f[2] + nf});
  SkinningWeights hard = SkinningWeights::Zero(both.vertices.size(), 2);
  for (int i = 0; i < static_cast<int>(both.vertices.size()); ++i) hard(i, i < nf ? 0 : 1) = 1;
  FrameParams o0 = identity_params(2, cam), o1 = o0;
  o1.bones[0].translation = Vec3(0.02, 0, 0);
  o1.bones[1].translation = Vec3(0, 0.02, 0);
  auto y0 = forward_skin(both.vertices, hard, o0), y1 = forward_skin(both.vertices, hard, o1);
  auto ro = rasterize(y0, both.faces, cam);
  auto vo = vertex_visibility(y0, both.faces, cam, &ro);
  auto ho = bone_flow(surface_flow(render_flow(y0, y1, both.faces, cam, cam, &ro), y0, cam), hard, vo);
  r.check(!ho.supported[1], "occluded part not flagged unsupported");
  r.check(ho.supported[0] && cosine_similarity(ho.flow[0], Vec2(1, 0)) > 0.99, "occluding part flow");
}

void merge_split(Result& r) {
  const ScheduleConfig cfg;
  auto arm = arm_scene();
  auto dir = temp_dir("acc_arm");
  render_dataset(arm, dir);
  auto obs = load_observations(dir);

  // the hinge: never merged at any threshold of the sweep
  auto hinge_flows = observed_bone_flows(gt_state(arm), obs);
  auto sim = motion_similarity(hinge_flows, 0, 1);
  for (double t : {0.99, 0.95, 0.90}) {
    auto m = merge_bones(arm.skeleton, hinge_flows, t, arm.weights);
    r.check(m.merges == 0, "30 degree hinge merged at t_o = " + fmt(t));
  }
  r.note("hinge S " + fmt(sim.value_or(std::nan(""))));

  // bones 0 and 1 share one rigid transform and swing together about the hinge to bone 2
  ChainMotion still;
  still.bob = 0;
  SynthScene rigid = make_chain(3, 1.0, 0.15, still);
  for (int f = 0; f < rigid.frame_count(); ++f) {
    const double th = (30.0 * M_PI / 180.0) * std::sin(2 * M_PI * f / rigid.frame_count());
    SE3 swing = SE3::rotation_about(Vec3(0, 0, th), rigid.skeleton.joints[1].position);
    rigid.frames[f].root = SE3();
    rigid.frames[f].bones = {swing, swing, SE3()};
  }
  auto rdir = temp_dir("acc_rigid_pair");
  render_dataset(rigid, rdir);
  auto robs = load_observations(rdir);
  auto rflows = observed_bone_flows(gt_state(rigid), robs);
  auto m = merge_bones(rigid.skeleton, rflows, 0.95, rigid.weights);
  r.check(m.merges == 1 && m.bone_map[0] == m.bone_map[1] && m.bone_map[1] != m.bone_map[2],
          "co-moving pair not merged alone at 0.95 (" + std::to_string(m.merges) + " merges)");
  for (double t : {0.99, 0.95, 0.90}) {
    auto mt = merge_bones(rigid.skeleton, rflows, t, rigid.weights);
    r.check(mt.bone_map[1] != mt.bone_map[2], "hinge of the rigid-pair scene merged at t_o = " + fmt(t));
  }
  ModelState settled = gt_state(rigid);
  for (int round = 0; round < 4; ++round)
    if (!m_step(settled, robs, cfg, true).structure_changed) break;
  // reported only: repeated M-steps are not part of this criterion
  r.note("repeated M-steps settle at " + std::to_string(settled.skeleton.bone_count()) + " bones");
  r.note("rigid pair S " + fmt(motion_similarity(rflows, 0, 1).value_or(std::nan(""))) + ", its hinge S " +
         fmt(motion_similarity(rflows, 1, 2).value_or(std::nan(""))));

  // length-oscillating middle bone splits, rigid bones under 5% noise do not
  SynthScene chain = make_chain(3);
  std::vector<std::vector<double>> lens;
  for (int f = 0; f < 30; ++f) {
    FrameParams fp = chain.frames[f];
    const double st = 0.3 * std::sin(2 * M_PI * f / 30.0);
    // stretch the middle by +-30% while keeping the outer bones rigid
    fp.bones[0] = SE3::from_translation(Vec3(-st / 2, 0, 0)) * fp.bones[0];
    fp.bones[2] = SE3::from_translation(Vec3(st / 2, 0, 0)) * fp.bones[2];
    lens.push_back(frame_bone_lengths(chain.skeleton, chain.mesh.vertices, chain.weights, fp));
  }
  auto sp = split_joints(chain.skeleton, lens, 0.2);
  r.check(sp.splits == 1 && sp.skeleton.bone_count() == 4, "oscillating bone gave " + std::to_string(sp.splits) + " splits");
  std::mt19937 rng(11);
  std::uniform_real_distribution<double> noise(-0.05, 0.05);
  int noisy_splits = 0;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::vector<double>> nl;
    for (int f = 0; f < 30; ++f) {
      auto l = frame_bone_lengths(chain.skeleton, chain.mesh.vertices, chain.weights, chain.frames[f]);
      for (auto& x : l) x *= 1 + noise(rng);
      nl.push_back(l);
    }
    noisy_splits += split_joints(chain.skeleton, nl, 0.2).splits;
  }
  r.check(noisy_splits == 0, std::to_string(noisy_splits) + " splits of rigid bones under 5% noise");

  // threshold sweep through the full pipeline
  ChainMotion mo;
  mo.frames = 8;
  auto sweep_dir = temp_dir("acc_sweep");
  render_dataset(make_chain(3, 1.0, 0.15, mo), sweep_dir);
  auto sweep_obs = load_observations(sweep_dir);
  ScheduleConfig small;
  small.epochs = 4;
  small.iterations = 2;
  small.warmup_iterations = 4;
  small.hypotheses = 4;
  small.coarse_shape_iterations = 2;
  small.sphere_level = 3;
  small.grid_resolution = 24;
  std::vector<int> counts;
  for (double t : {0.99, 0.95, 0.90}) {
    small.t_o = t;
    counts.push_back(run_s3o(sweep_obs, small).skeleton.bone_count());
  }
  r.check(counts[0] >= counts[1] && counts[1] >= counts[2], "bone counts not monotone over the sweep");
  r.note("sweep bones " + std::to_string(counts[0]) + "/" + std::to_string(counts[1]) + "/" + std::to_string(counts[2]));
}

void joint_recovery(Result& r) {
  auto arm = arm_scene();
  const double arm_length = 2.0;
  auto w = skinning_weights(arm.mesh.vertices, arm.skeleton);
  double worst = 0;
  int fallbacks = 0;
  for (int f = 0; f < arm.frame_count(); ++f) {
    // the joint estimate from posed vertices against the posed ground-truth hinge
    auto posed = forward_skin(arm.mesh.vertices, w, arm.frames[f]);
    auto jp = joint_positions(arm.skeleton, posed, w, 0.4);
    fallbacks += jp.fallback[0];
    worst = std::max(worst, (jp.skeleton.joints[0].position - arm.posed_joints(f)[0]).norm());
  }
  r.check(fallbacks == 0, std::to_string(fallbacks) + " frames fell back to the midpoint");
  r.check(worst < 0.05 * arm_length, "hinge error " + fmt(worst / arm_length) + " of arm length");
  r.note("hinge err/len " + fmt(worst / arm_length));
}

void end_to_end(Result& r) {
  auto root = temp_dir("acc_fit");
  r.check(run_cli("synth chain " + root + "/obs") == 0, "synth failed");
  auto t0 = std::chrono::steady_clock::now();
  int code_a = run_cli("fit " + root + "/obs " + root + "/a");
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  int code_b = run_cli("fit " + root + "/obs " + root + "/b");
  r.check(code_a == 0 && code_b == 0, "fit exit codes " + std::to_string(code_a) + "/" + std::to_string(code_b));
  if (code_a != 0) return;
  r.check(secs < 600, "fit took " + fmt(secs) + " s");
  r.check(slurp(root + "/a/skeleton_final.skel") == slurp(root + "/b/skeleton_final.skel"), ".skel differs across runs");

  SynthScene scene = make_chain(3);
  ModelState s = read_bundle(root + "/a");
  r.check(s.skeleton.bone_count() == 3, "final bone count " + std::to_string(s.skeleton.bone_count()));
  // compared in camera coordinates, where both the fit and the ground truth live
  const double diag = bbox_diagonal(scene.mesh.vertices);
  double joint_err = 0, root_err = 0;
  for (int f = 0; f < scene.frame_count(); ++f) {
    auto ps = posed_skeleton(s.skeleton, s.frames[f]);
    const auto& gcam = scene.frames[f].camera.extrinsic;
    const auto& ecam = s.frames[f].camera.extrinsic;
    for (const auto& g : scene.posed_joints(f)) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& j : ps.joints) best = std::min(best, (ecam.apply(j.position) - gcam.apply(g)).norm());
      joint_err = std::max(joint_err, best);
    }
    root_err = std::max(root_err, (ecam.apply(centroid(s.posed(f))) - gcam.apply(centroid(scene.posed(f)))).norm());
  }
  r.check(joint_err < 0.05 * diag, "joint error " + fmt(joint_err / diag) + " of bbox diagonal");
  r.check(root_err < 0.02 * diag, "root translation error " + fmt(root_err / diag) + " of bbox diagonal");
  r.note(std::to_string(scene.mesh.vertices.size()) + " vertices, fit " + fmt(secs) + " s, joint err/diag " +
         fmt(joint_err / diag) + ", root err/diag " + fmt(root_err / diag));
}

void canonical_selection(Result& r) {
  SynthScene q = make_quadruped();
  QuadrupedConfig qc;
  for (double scale : {1.0, 0.5, 2.0}) {
    std::vector<SkeletonGraph2D> graphs(q.frame_count());
    parallel_for(q.frame_count(), [&](int f) {
      // rescaling re-renders each frame with focal length and image size scaled
      Camera c = q.frames[f].camera;
      c.focal *= scale;
      c.width = static_cast<int>(c.width * scale);
      c.height = static_cast<int>(c.height * scale);
      c.principal = {c.principal.u * scale, c.principal.v * scale};
      BinaryMask m = largest_component(fill_holes(rasterize(q.posed(f), q.mesh.faces, c).silhouette));
      graphs[f] = build_skeleton_graph(thin_silhouette(m), default_prune_length(m));
    });
    int c = canonical_frame(graphs);
    r.check(c == qc.side_view_frame, "scale " + fmt(scale) + " selected frame " + std::to_string(c));
  }
}

void format_fidelity(Result& r) {
  auto dir = temp_dir("acc_formats");
  std::mt19937 rng(4);
  std::normal_distribution<float> g(0, 10);
  FlowField flow(37, 23);
  for (int y = 0; y < 23; ++y)
    for (int x = 0; x < 37; ++x)
      if ((x + y) % 7) flow.set(x, y, g(rng), g(rng));
  write_flo(dir + "/a.flo", flow);
  auto back = read_flo(dir + "/a.flo");
  r.check(back.width == flow.width && back.height == flow.height &&
              std::memcmp(back.data.data(), flow.data.data(), flow.data.size() * sizeof(float)) == 0,
          ".flo round trip not bit exact");
  write_flo(dir + "/b.flo", back);
  r.check(slurp(dir + "/a.flo") == slurp(dir + "/b.flo"), ".flo rewrite differs");

  Skeleton s = make_quadruped().skeleton;
  std::normal_distribution<double> gd(0, 1);
  for (auto& b : s.bones) {
    b.center += 1e-3 * Vec3(gd(rng), gd(rng), gd(rng));
    b.length = std::abs(gd(rng)) + 0.1;
  }
  write_skel(dir + "/a.skel", s);
  Skeleton sb = read_skel(dir + "/a.skel");
  bool same = sb == s;
  for (int b = 0; b < s.bone_count() && same; ++b)
    same = sb.bones[b].center == s.bones[b].center && sb.bones[b].precision == s.bones[b].precision &&
           sb.bones[b].length == s.bones[b].length;
  write_skel(dir + "/b.skel", sb);
  r.check(same && slurp(dir + "/a.skel") == slurp(dir + "/b.skel"), ".skel round trip not bit exact");

  Mesh m = make_chain(3).mesh;
  for (auto& v : m.vertices) v += 1e-7 * Vec3(gd(rng), gd(rng), gd(rng));
  write_obj(dir + "/a.obj", m);
  Mesh mb = read_obj(dir + "/a.obj");
  bool obj_ok = mb.vertices.size() == m.vertices.size() && mb.faces == m.faces;
  for (std::size_t i = 0; i < m.vertices.size() && obj_ok; ++i) obj_ok = mb.vertices[i] == m.vertices[i];
  r.check(obj_ok, "OBJ round trip changed coordinates");
}

void loss_suite(Result& r) {
  std::mt19937 rng(7);
  std::bernoulli_distribution coin(0.4);
  BinaryMask a(40, 30);
  for (auto& v : a.data) v = coin(rng);
  BinaryMask b = a;
  b.data[17] = !b.data[17];
  r.check(silhouette_loss(a, a) == 0 && silhouette_loss(a, b) > 0, "silhouette zero-iff-match");

  FlowField fa(20, 10, 0.0f), fb = fa;
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 20; ++x) fa.set(x, y, 0.1 * x, -0.2 * y);
  fb = fa;
  fb.set(3, 4, 5, 5);
  r.check(flow_loss(fa, fa, 1.0) == 0 && flow_loss(fa, fb, 1.0) > 0, "flow zero-iff-match");

  RgbImage ta(10, 10, {0.1f, 0.2f, 0.3f}), tb = ta;
  tb(4, 4)[0] = 0.9f;
  BinaryMask fg(10, 10, 1);
  r.check(texture_loss(ta, ta, fg) == 0 && texture_loss(ta, tb, fg) > 0, "texture zero-iff-match");

  std::vector<BinaryMask> parts = {a, b}, other = {a, a};
  r.check(part_silhouette_loss(parts, parts) == 0 && part_silhouette_loss(parts, other) > 0, "part silhouette zero-iff-match");

  std::vector<Vec3> sym;
  std::normal_distribution<double> g(0, 1);
  for (int i = 0; i < 50; ++i) {
    Vec3 v(g(rng), g(rng), std::abs(g(rng)) + 0.1);
    sym.push_back(v);
    sym.emplace_back(v.x(), v.y(), -v.z());
  }
  auto asym = sym;
  asym[0].z() += 0.5;
  r.check(symmetry_loss(sym) < 1e-12 && symmetry_loss(asym) > 0, "symmetry zero-iff-mirrored");

  Mesh grid;
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 6; ++x) grid.vertices.emplace_back(x, y, 0);
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 5; ++x) {
      int k = y * 6 + x;
      grid.faces.push_back({k, k + 1, k + 7});
      grid.faces.push_back({k, k + 7, k + 6});
    }
  Mesh bumped = grid;
  bumped.vertices[14].z() = 0.2;
  r.check(laplacian_loss(bumped) > laplacian_loss(grid), "laplacian does not grow with a bump");

  Mesh sphere = icosphere(1);
  auto edges = mesh_edges(sphere);
  auto moved = sphere.vertices;
  moved[3] *= 1.1;
  r.check(arap_loss(sphere.vertices, sphere.vertices, edges) == 0 && arap_loss(sphere.vertices, moved, edges) > 0,
          "ARAP zero-iff-isometric");

  LossTerms terms;
  LossWeights w;
  std::uniform_real_distribution<double> u(0.1, 3.0);
  for (auto t : kAllLossTerms) {
    terms[t] = u(rng);
    w.weight[t] = u(rng);
  }
  const double base = total_loss(terms, w).total;
  double worst = 0;
  for (int k = 0; k < 100; ++k) {
    double c = u(rng);
    LossWeights s = w;
    for (auto& [t, v] : s.weight) v *= c;
    worst = std::max(worst, std::abs(total_loss(terms, s).total - c * base) / (c * base));
    // one weight at a time: the total moves by exactly that term's change
    LossTerm t = kAllLossTerms[k % kAllLossTerms.size()];
    LossWeights one = w;
    one.weight[t] *= c;
    worst = std::max(worst, std::abs(total_loss(terms, one).total - (base + (c - 1) * w[t] * terms[t])) / base);
  }
  r.check(worst < 1e-12, "total_loss not linear, rel err " + fmt(worst));
  auto p2 = total_loss(terms, w, Phase::Joint);
  r.check(p2.contribution[LossTerm::PartSilhouette] == 0 && total_loss(terms, w).contribution[LossTerm::PartSilhouette] > 0,
          "phase two does not zero the part silhouette term");
}

}  // namespace

int main(int argc, char** argv) {
  log_verbosity() = 0;
  struct Criterion {
    int id;
    const char* name;
    double limit_s;  // 0 = no runtime limit
    std::function<void(Result&)> run;
  };
  const std::vector<Criterion> all = {
      {1, "blend skinning algebra", 1, skinning_algebra},
      {2, "rigidity math", 10, rigidity_math},
      {3, "2D skeletonization", 30, skeletonization},
      {4, "bone motion oracle", 30, bone_motion_oracle},
      {5, "merge/split correctness", 120, merge_split},
      {6, "joint recovery", 60, joint_recovery},
      {7, "end-to-end fit", 0, end_to_end},  // the fit itself is timed against 10 min inside
      {8, "canonical frame selection", 60, canonical_selection},
      {9, "format fidelity", 0, format_fidelity},
      {10, "loss suite", 30, loss_suite},
  };
  int failed = 0;
  // optional arguments pick criteria by number
  std::set<int> only;
  for (int k = 1; k < argc; ++k) only.insert(std::atoi(argv[k]));
  for (const auto& c : all) {
    if (!only.empty() && !only.count(c.id)) continue;
    Result r;
    auto t0 = std::chrono::steady_clock::now();
    try {
      c.run(r);
    } catch (const std::exception& e) {
      r.check(false, std::string("exception: ") + e.what());
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.limit_s > 0) r.check(secs < c.limit_s, "runtime " + fmt(secs) + " s over " + fmt(c.limit_s) + " s");
    const bool ok = r.failures.empty();
    failed += !ok;
    std::cout << "criterion " << c.id << " (" << c.name << "): " << (ok ? "PASS" : "FAIL") << "  [" << fmt(secs) << " s]";
    for (const auto& n : r.notes) std::cout << "; " << n;
    for (const auto& f : r.failures) std::cout << "; FAILED: " << f;
    std::cout << std::endl;
  }
  std::cout << (failed ? std::to_string(failed) + " criteria failed" : std::string("all criteria passed")) << std::endl;
  return failed;
}
