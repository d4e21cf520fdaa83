#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "s3o/silhouette_skeleton.hpp"
#include "s3o/synth.hpp"
#include "test_support.hpp"

using namespace s3o;
using testing_support::temp_dir;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void expect_rows_normalized(const SkinningWeights& w) {
  for (Eigen::Index n = 0; n < w.rows(); ++n) {
    EXPECT_NEAR(w.row(n).sum(), 1.0, 1e-12);
    EXPECT_GE(w.row(n).minCoeff(), 0.0);
  }
}

}  // namespace

TEST(Chain, StructureAndWeights) {
  for (int n : {1, 2, 3, 5}) {
    auto sc = make_chain(n);
    EXPECT_EQ(sc.skeleton.bone_count(), n);
    EXPECT_EQ(sc.skeleton.joint_count(), n - 1);
    EXPECT_EQ(sc.frame_count(), 30);
    EXPECT_EQ(sc.weights.cols(), n);
    EXPECT_NO_THROW(sc.mesh.validate());
    expect_rows_normalized(sc.weights);
    for (const auto& fp : sc.frames) EXPECT_EQ(static_cast<int>(fp.bones.size()), n);
  }
  EXPECT_THROW(make_chain(0), Error);
}

TEST(Chain, HingesPreserveJoints) {
  auto sc = make_chain(3);
  for (int f = 0; f < sc.frame_count(); ++f)
    for (const auto& j : sc.skeleton.joints) {
      const auto& fp = sc.frames[f];
      EXPECT_LT((fp.bones[j.i].apply(j.position) - fp.bones[j.j].apply(j.position)).norm(), 1e-12);
    }
}

TEST(Chain, BasePartDoesNotRotate) {
  auto sc = make_chain(3);
  for (const auto& fp : sc.frames) EXPECT_LT((fp.bones[1].rotation - Mat3::Identity()).norm(), 1e-15);
}

TEST(Quadruped, Structure) {
  auto sc = make_quadruped();
  EXPECT_EQ(sc.skeleton.bone_count(), 8);
  EXPECT_EQ(sc.skeleton.joint_count(), 7);
  EXPECT_EQ(sc.frame_count(), 24);
  EXPECT_NO_THROW(sc.mesh.validate());
  expect_rows_normalized(sc.weights);
  ASSERT_EQ(sc.descriptors.size(), 8u);
  // mirrored legs share a descriptor
  EXPECT_EQ(sc.descriptors[1].feature, sc.descriptors[2].feature);
  EXPECT_EQ(sc.descriptors[3].feature, sc.descriptors[4].feature);
  EXPECT_NE(sc.descriptors[0].feature, sc.descriptors[1].feature);
}

TEST(Quadruped, SideViewHasLargestExtentRatio) {
  auto sc = make_quadruped();
  std::vector<SkeletonGraph2D> graphs;
  for (const auto& fp : sc.frames) graphs.push_back(projected_part_graph(sc.skeleton, fp.camera));
  EXPECT_EQ(canonical_frame(graphs), 12);
}

TEST(Quadruped, SideViewWinsFromRenderedSilhouettes) {
  auto sc = make_quadruped();
  std::vector<SkeletonGraph2D> graphs;
  for (int f = 0; f < sc.frame_count(); ++f) {
    auto m = rasterize(sc.posed(f), sc.mesh.faces, sc.frames[f].camera).silhouette;
    graphs.push_back(build_skeleton_graph(thin_silhouette(m), default_prune_length(m)));
  }
  EXPECT_EQ(canonical_frame(graphs), 12);
}

TEST(Quadruped, MirroredLegsProjectTogetherInSideView) {
  auto sc = make_quadruped();
  const auto& cam = sc.frames[12].camera;
  auto px = [&](int b) { return project(cam, sc.skeleton.bones[b].center).pixel; };
  auto dist = [&](int a, int b) { return std::hypot(px(a).u - px(b).u, px(a).v - px(b).v); };
  // the elevation leaves a few pixels between left and right; front to back is far larger
  EXPECT_LT(dist(1, 2), 0.1 * dist(1, 3));
  EXPECT_LT(dist(3, 4), 0.1 * dist(1, 3));
}

TEST(Dataset, FilesAndCounts) {
  ChainMotion mo;
  mo.frames = 6;
  auto sc = make_chain(3, 1.0, 0.15, mo);
  auto dir = temp_dir("synth_files");
  auto sum = render_dataset(sc, dir);
  EXPECT_EQ(sum.masks, 6);
  EXPECT_EQ(sum.flows, 5);
  for (int f = 0; f < 6; ++f) EXPECT_TRUE(std::filesystem::exists(dir + "/" + frame_name("mask", f, "pgm")));
  for (int f = 0; f < 5; ++f) EXPECT_TRUE(std::filesystem::exists(dir + "/" + frame_name("flow", f, "flo")));
  EXPECT_FALSE(std::filesystem::exists(dir + "/flow_0005.flo"));
  for (auto name : {"camera.csv", "keypoints.csv", "gt_skeleton.skel", "manifest.txt"})
    EXPECT_TRUE(std::filesystem::exists(dir + "/" + name)) << name;
  EXPECT_EQ(read_skel(dir + "/gt_skeleton.skel"), sc.skeleton);
  auto cams = read_cameras(dir + "/camera.csv");
  ASSERT_EQ(cams.size(), 6u);
  EXPECT_EQ(cams[3].extrinsic.rotation, sc.frames[3].camera.extrinsic.rotation);
  EXPECT_EQ(cams[3].extrinsic.translation, sc.frames[3].camera.extrinsic.translation);
}

TEST(Dataset, MasksRoundTripBitExact) {
  ChainMotion mo;
  mo.frames = 3;
  auto sc = make_chain(2, 1.0, 0.15, mo);
  auto dir = temp_dir("synth_masks");
  render_dataset(sc, dir);
  for (int f = 0; f < 3; ++f) {
    auto want = rasterize(sc.posed(f), sc.mesh.faces, sc.frames[f].camera).silhouette;
    EXPECT_EQ(read_pgm(dir + "/" + frame_name("mask", f, "pgm")), want);
  }
}

TEST(Dataset, StaticPoseGivesZeroFlow) {
  ChainMotion mo;
  mo.frames = 3;
  mo.amplitude_deg = 0;
  mo.bob = 0;
  auto sc = make_chain(3, 1.0, 0.15, mo);
  auto dir = temp_dir("synth_static");
  render_dataset(sc, dir);
  for (int f = 0; f < 2; ++f) {
    auto fl = read_flo(dir + "/" + frame_name("flow", f, "flo"));
    std::size_t zeros = 0;
    for (float x : fl.data) {
      ASSERT_TRUE(x == 0.0f || x == kInvalidFlow);
      zeros += x == 0.0f;
    }
    EXPECT_GT(zeros, 0u);
  }
}

TEST(Dataset, Reproducible) {
  ChainMotion mo;
  mo.frames = 4;
  auto sc = make_chain(3, 1.0, 0.15, mo, 5);
  auto a = temp_dir("synth_rep_a"), b = temp_dir("synth_rep_b");
  render_dataset(sc, a, {0.01, 1});
  render_dataset(make_chain(3, 1.0, 0.15, mo, 5), b, {0.01, 1});
  for (auto name : {"mask_0000.pgm", "mask_0003.pgm", "flow_0002.flo", "camera.csv", "keypoints.csv", "manifest.txt"})
    EXPECT_EQ(slurp(a + "/" + name), slurp(b + "/" + name)) << name;
}

TEST(Dataset, NoiseAndErosionDegradeMasks) {
  ChainMotion mo;
  mo.frames = 2;
  auto sc = make_chain(2, 1.0, 0.15, mo);
  auto clean = rasterize(sc.posed(0), sc.mesh.faces, sc.frames[0].camera).silhouette;
  auto dir = temp_dir("synth_noise");
  render_dataset(sc, dir, {0.0, 2});
  auto eroded = read_pgm(dir + "/mask_0000.pgm");
  EXPECT_LT(count_foreground(eroded), count_foreground(clean));
  for (std::size_t k = 0; k < clean.data.size(); ++k)
    ASSERT_TRUE(!eroded.data[k] || clean.data[k]);
  render_dataset(sc, dir, {0.05, 0});
  auto noisy = read_pgm(dir + "/mask_0000.pgm");
  std::size_t flipped = 0;
  for (std::size_t k = 0; k < clean.data.size(); ++k) flipped += noisy.data[k] != clean.data[k];
  const double rate = double(flipped) / clean.data.size();
  EXPECT_GT(rate, 0.04);
  EXPECT_LT(rate, 0.06);
}

TEST(Dataset, JointsProjectInsideSilhouette) {
  for (auto sc : {make_chain(3), make_quadruped()}) {
    for (int f = 0; f < sc.frame_count(); f += 5) {
      auto m = rasterize(sc.posed(f), sc.mesh.faces, sc.frames[f].camera).silhouette;
      for (const auto& j : sc.posed_joints(f)) {
        auto p = project(sc.frames[f].camera, j).pixel;
        bool near = false;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) near |= fg(m, int(std::floor(p.u)) + dx, int(std::floor(p.v)) + dy);
        EXPECT_TRUE(near) << sc.name << " frame " << f;
      }
    }
  }
}

TEST(Dataset, KeypointsMatchProjection) {
  ChainMotion mo;
  mo.frames = 2;
  auto sc = make_chain(3, 1.0, 0.15, mo);
  auto dir = temp_dir("synth_kp");
  render_dataset(sc, dir);
  std::ifstream is(dir + "/keypoints.csv");
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "frame,joint,u,v");
  int rows = 0;
  while (std::getline(is, line)) {
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ss(line);
    int f, k;
    double u, v;
    ss >> f >> k >> u >> v;
    auto p = project(sc.frames[f].camera, sc.posed_joints(f)[k]).pixel;
    EXPECT_DOUBLE_EQ(u, p.u);
    EXPECT_DOUBLE_EQ(v, p.v);
    ++rows;
  }
  EXPECT_EQ(rows, 4);
}
