#include <gtest/gtest.h>

#include <random>

#include "s3o/bone_motion.hpp"
#include "s3o/synth.hpp"

using namespace s3o;

namespace {

Camera axis_camera(int w, int h, double f) {
  Camera c;
  c.width = w;
  c.height = h;
  c.focal = f;
  c.principal = {w / 2.0, h / 2.0};
  return c;
}

// Points at depth z that project uniformly over the image interior.
std::vector<Vec3> in_image_points(std::mt19937& rng, const Camera& cam, int n, double z, double margin = 1.0) {
  std::uniform_real_distribution<double> u(margin, cam.width - margin), v(margin, cam.height - margin);
  std::vector<Vec3> out;
  for (int i = 0; i < n; ++i)
    out.emplace_back((u(rng) - cam.principal.u) * z / cam.focal, (v(rng) - cam.principal.v) * z / cam.focal, z);
  return out;
}

SurfaceFlow constant_surface(int n, const Vec2& f) {
  return {std::vector<Vec2>(n, f), std::vector<char>(n, 1)};
}

}  // namespace

TEST(SurfaceFlow, ConstantField) {
  std::mt19937 rng(1);
  Camera cam = axis_camera(64, 48, 60);
  FlowField flow(64, 48);
  for (int y = 0; y < 48; ++y)
    for (int x = 0; x < 64; ++x) flow.set(x, y, 2, -1);
  auto pts = in_image_points(rng, cam, 200, 3.0, 0.0);
  auto sf = surface_flow(flow, pts, cam);
  for (int i = 0; i < 200; ++i) {
    ASSERT_TRUE(sf.supported[i]);
    EXPECT_NEAR(sf.flow[i].x(), 2.0, 1e-12);
    EXPECT_NEAR(sf.flow[i].y(), -1.0, 1e-12);
  }
}

TEST(SurfaceFlow, PixelCenterIsExact) {
  Camera cam = axis_camera(64, 64, 64);
  FlowField flow(64, 64);
  std::mt19937 rng(2);
  std::uniform_real_distribution<float> g(-3, 3);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) flow.set(x, y, g(rng), g(rng));
  // (10.5, 20.5) at depth 4 is exactly representable through the projection
  Vec3 p((10.5 - 32) * 4 / 64, (20.5 - 32) * 4 / 64, 4);
  auto sf = surface_flow(flow, {p}, cam);
  EXPECT_EQ(sf.flow[0].x(), flow.du(10, 20));
  EXPECT_EQ(sf.flow[0].y(), flow.dv(10, 20));
}

TEST(SurfaceFlow, LinearRampIsExact) {
  Camera cam = axis_camera(64, 48, 50);
  FlowField flow(64, 48);
  for (int y = 0; y < 48; ++y)
    for (int x = 0; x < 64; ++x) flow.set(x, y, (x + 0.5) / 10.0, (y + 0.5) / 20.0);
  std::mt19937 rng(3);
  // stay between the first and last pixel centers so all four taps exist
  auto pts = in_image_points(rng, cam, 300, 2.0, 0.5);
  auto sf = surface_flow(flow, pts, cam);
  for (int i = 0; i < 300; ++i) {
    auto p = project(cam, pts[i]);
    EXPECT_NEAR(sf.flow[i].x(), p.pixel.u / 10.0, 1e-6);
    EXPECT_NEAR(sf.flow[i].y(), p.pixel.v / 20.0, 1e-6);
  }
}

TEST(SurfaceFlow, UnsupportedVertices) {
  Camera cam = axis_camera(32, 32, 40);
  FlowField flow(32, 32);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 16; ++x) flow.set(x, y, 1, 1);
  std::vector<Vec3> pts = {Vec3(100, 0, 5), Vec3(0, 0, -5), Vec3((24.5 - 16) * 5 / 40, 0, 5), Vec3(-1, 0, 5)};
  auto sf = surface_flow(flow, pts, cam);
  EXPECT_EQ(sf.supported, (std::vector<char>{0, 0, 0, 1}));
  for (int i = 0; i < 3; ++i) EXPECT_EQ(sf.flow[i], Vec2::Zero());
}

TEST(SurfaceFlow, DimensionMismatch) {
  try {
    surface_flow(FlowField(10, 10), {Vec3(0, 0, 1)}, axis_camera(12, 10, 10));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DimensionMismatch);
  }
}

TEST(BoneFlow, SingleBoneConstant) {
  auto bf = bone_flow(constant_surface(50, Vec2(0.5, -2)), SkinningWeights::Ones(50, 1), std::vector<char>(50, 1));
  ASSERT_TRUE(bf.supported[0]);
  EXPECT_NEAR(bf.flow[0].x(), 0.5, 1e-12);
  EXPECT_NEAR(bf.flow[0].y(), -2.0, 1e-12);
  EXPECT_NEAR(bf.mass[0], 50.0, 1e-12);
}

TEST(BoneFlow, HiddenBoneUnsupported) {
  SkinningWeights w = SkinningWeights::Zero(4, 2);
  w.col(0).setOnes();
  w(2, 0) = w(3, 0) = 0;
  w(2, 1) = w(3, 1) = 1;
  std::vector<char> vis = {1, 1, 0, 0};
  auto bf = bone_flow(constant_surface(4, Vec2(1, 1)), w, vis);
  EXPECT_TRUE(bf.supported[0]);
  EXPECT_FALSE(bf.supported[1]);
  EXPECT_EQ(bf.flow[1], Vec2::Zero());
  EXPECT_EQ(bf.mass[1], 0.0);
}

TEST(BoneFlow, RawSumMatchesTripleLoop) {
  std::mt19937 rng(4);
  std::uniform_real_distribution<double> u(0, 1), f(-4, 4);
  const int n = 300, nb = 5;
  SkinningWeights w(n, nb);
  SurfaceFlow sf{std::vector<Vec2>(n), std::vector<char>(n, 1)};
  std::vector<char> vis(n);
  for (int i = 0; i < n; ++i) {
    double s = 0;
    for (int b = 0; b < nb; ++b) s += (w(i, b) = u(rng));
    w.row(i) /= s;
    sf.flow[i] = Vec2(f(rng), f(rng));
    vis[i] = u(rng) < 0.7;
  }
  auto bf = bone_flow(sf, w, vis, true);
  for (int b = 0; b < nb; ++b) {
    Vec2 want = Vec2::Zero();
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < 2; ++k) want[k] += w(i, b) * sf.flow[i][k] * (vis[i] ? 1.0 : 0.0);
    EXPECT_NEAR(bf.flow[b].x(), want.x(), 1e-9);
    EXPECT_NEAR(bf.flow[b].y(), want.y(), 1e-9);
  }
  // normalization changes magnitudes only
  auto nf = bone_flow(sf, w, vis);
  for (int b = 0; b < nb; ++b) EXPECT_NEAR(cosine_similarity(nf.flow[b], bf.flow[b]), 1.0, 1e-12);
}

TEST(BoneFlow, DirectionIsScaleInvariant) {
  std::mt19937 rng(5);
  std::uniform_real_distribution<double> u(0, 1), f(-4, 4);
  const int n = 100;
  SkinningWeights w(n, 3);
  SurfaceFlow sf{std::vector<Vec2>(n), std::vector<char>(n, 1)};
  for (int i = 0; i < n; ++i) {
    Vec3 r(u(rng), u(rng), u(rng));
    w.row(i) = r.transpose() / r.sum();
    sf.flow[i] = Vec2(f(rng), f(rng));
  }
  std::vector<char> vis(n, 1);
  auto a = bone_flow(sf, w, vis);
  for (double c : {1e-3, 0.7, 13.0, 1e4}) {
    SurfaceFlow scaled = sf;
    for (auto& v : scaled.flow) v *= c;
    auto b = bone_flow(scaled, w, vis);
    for (int k = 0; k < 3; ++k) EXPECT_NEAR((a.flow[k].normalized() - b.flow[k].normalized()).norm(), 0.0, 1e-12);
  }
}

TEST(BoneFlow, HidingAVertexLeavesUnrelatedBones) {
  SkinningWeights w(4, 3);
  w << 1, 0, 0, 0.5, 0.5, 0, 0, 0, 1, 0, 0.2, 0.8;
  SurfaceFlow sf{{Vec2(1, 0), Vec2(0, 1), Vec2(2, 2), Vec2(-1, 3)}, std::vector<char>(4, 1)};
  auto all = bone_flow(sf, w, {1, 1, 1, 1});
  auto hidden = bone_flow(sf, w, {1, 1, 1, 0});  // vertex 3 has no weight on bone 0
  EXPECT_EQ(all.flow[0], hidden.flow[0]);
  EXPECT_EQ(all.mass[0], hidden.mass[0]);
  EXPECT_NE(all.flow[2], hidden.flow[2]);
}

TEST(BoneFlow, TwoPartsMovingApart) {
  // a two-bone chain viewed head on: bone 0 slides right, bone 1 slides down
  SynthScene s = make_chain(2);
  Camera cam = look_camera(CameraSetup{});
  FrameParams a = identity_params(2, cam), b = a;
  b.bones[0].translation = Vec3(0.05, 0, 0);
  b.bones[1].translation = Vec3(0, 0.05, 0);
  auto x0 = forward_skin(s.mesh.vertices, s.weights, a);
  auto x1 = forward_skin(s.mesh.vertices, s.weights, b);
  auto r = rasterize(x0, s.mesh.faces, cam);
  FlowField flow = render_flow(x0, x1, s.mesh.faces, cam, cam, &r);
  auto vis = vertex_visibility(x0, s.mesh.faces, cam, &r);
  auto bf = bone_flow(surface_flow(flow, x0, cam), s.weights, vis);
  EXPECT_GT(cosine_similarity(bf.flow[0], Vec2(1, 0)), 0.99);
  EXPECT_GT(cosine_similarity(bf.flow[1], Vec2(0, 1)), 0.99);
}
