#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "s3o/optimizer.hpp"
#include "s3o/parallel.hpp"
#include "s3o/synth.hpp"

namespace s3o {

enum ExitCode { kExitOk = 0, kExitUsage = 1, kExitData = 2 };

struct RunConfig {
  std::string command;
  std::string input;
  std::string output;
  std::string config_path;
  std::vector<std::string> overrides;  // key=value
  std::uint64_t seed = 0;
  int verbosity = 1;
  int threads = 0;
};

namespace cli {

inline BinaryMask clean_mask(const BinaryMask& m) {
  require(count_foreground(m) > 0, ErrorCode::EmptyMask, "mask has no foreground pixels");
  return largest_component(fill_holes(m));
}

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(!ec && std::filesystem::is_directory(dir), ErrorCode::Io, "cannot create " + dir);
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream os(path);
  require(static_cast<bool>(os), ErrorCode::Io, "cannot write " + path);
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  return os;
}

inline int run_skel2d(const std::string& mask_path, bool prune, std::optional<double> prune_length,
                      const std::string& out) {
  BinaryMask m = clean_mask(read_mask(mask_path));
  double len = 0.0;
  if (prune_length) len = *prune_length;
  else if (prune) len = default_prune_length(m);
  auto g = build_skeleton_graph(thin_silhouette(m), len);
  write_graph_json(out, g);
  return kExitOk;
}

inline int run_canonical(const std::string& dir, const std::string& out) {
  Observations obs = load_observations(dir);
  const int nf = obs.frame_count();
  std::vector<SkeletonGraph2D> graphs(nf);
  parallel_for(nf, [&](int f) {
    BinaryMask m = clean_mask(obs.masks[f]);
    graphs[f] = build_skeleton_graph(thin_silhouette(m), default_prune_length(m));
  });
  const int c = canonical_frame(graphs);
  auto os = open_out(out);
  os << "frame,ratio,selected\n";
  for (int f = 0; f < nf; ++f) {
    auto r = extent_ratio(graphs[f]);
    os << f << ',';
    if (r) os << *r;
    else os << "inf";
    os << ',' << (f == c ? 1 : 0) << '\n';
  }
  return kExitOk;
}

inline int run_lift(const std::string& dir, const std::string& descriptors, const std::string& out,
                    const ScheduleConfig& cfg) {
  Observations obs = load_observations(dir);
  if (!descriptors.empty()) obs.descriptors = read_descriptors(descriptors);
  CoarseReport rep;
  ModelState s = coarse_phase(obs, cfg, &rep);
  ensure_dir(out);
  write_skel(out + "/lifted.skel", s.skeleton);
  write_obj(out + "/coarse.obj", s.mesh);
  auto os = open_out(out + "/lift.txt");
  os << "canonical_frame = " << rep.canonical_frame << "\nparts = " << rep.parts << "\npairs = " << rep.pairs
     << "\nhypothesis = " << s.hypothesis << "\nbones = " << s.skeleton.bone_count()
     << "\nvertices = " << s.mesh.vertices.size() << '\n';
  return kExitOk;
}

struct SynthOptions {
  int bones = 3;
  int frames = -1;  // preset default
  double amplitude_deg = 30.0;
  double noise = 0.0;
  int erode = 0;
};

inline int run_synth(const std::string& preset, const std::string& out, const SynthOptions& o, std::uint64_t seed) {
  SynthScene scene;
  if (preset == "chain" || preset == "arm") {
    ChainMotion motion;
    if (o.frames > 0) motion.frames = o.frames;
    motion.amplitude_deg = o.amplitude_deg;
    // with two bones an in-phase bob moves both parts the same way as the hinge
    if (preset == "arm") motion.bob_phase = M_PI / 2;
    scene = make_chain(preset == "arm" ? 2 : o.bones, 1.0, 0.15, motion, seed);
  } else if (preset == "quadruped") {
    QuadrupedConfig q;
    if (o.frames > 0) {
      q.frames = o.frames;
      q.side_view_frame = o.frames / 2;
      q.azimuth_step_deg = 288.0 / o.frames;
    }
    scene = make_quadruped(q, seed);
  } else {
    fail(ErrorCode::InvalidArgument, "unknown preset '" + preset + "' (chain, arm, quadruped)");
  }
  render_dataset(scene, out, {o.noise, o.erode});
  return kExitOk;
}

inline ScheduleConfig fit_config(const RunConfig& rc, const std::map<std::string, std::string>& flags) {
  ScheduleConfig cfg;
  if (!rc.config_path.empty()) cfg = read_config(rc.config_path, cfg);
  for (const auto& kv : rc.overrides) {
    auto eq = kv.find('=');
    require(eq != std::string::npos, ErrorCode::InvalidArgument, "override must be key=value: " + kv);
    set_config_value(cfg, trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }
  for (const auto& [k, v] : flags) set_config_value(cfg, k, v);
  cfg.seed = rc.seed;
  cfg.validate();
  return cfg;
}

inline int run_fit(const std::string& dir, const std::string& out, const ScheduleConfig& cfg) {
  Observations obs = load_observations(dir);
  RunReport rep;
  ModelState s = run_s3o(obs, cfg, out, &rep);
  for (const auto& e : rep.events) info(e);
  info("fit: " + std::to_string(s.skeleton.bone_count()) + " bones after " + std::to_string(rep.epochs_run) + " epochs");
  return kExitOk;
}

// Re-renders a fitted bundle as an observation directory.
inline int run_render(const std::string& model, const std::string& out) {
  ModelState s = read_bundle(model);
  ensure_dir(out);
  const int nf = static_cast<int>(s.frames.size());
  std::vector<std::vector<Vec3>> posed(nf);
  std::vector<RasterOutput> raster(nf);
  parallel_for(nf, [&](int f) {
    posed[f] = s.posed(f);
    raster[f] = rasterize(posed[f], s.mesh.faces, s.frames[f].camera);
  });
  std::vector<Camera> cams;
  for (int f = 0; f < nf; ++f) {
    cams.push_back(s.frames[f].camera);
    write_pgm(out + "/" + frame_name("mask", f, "pgm"), raster[f].silhouette);
    if (f + 1 < nf)
      write_flo(out + "/" + frame_name("flow", f, "flo"),
                render_flow(posed[f], posed[f + 1], s.mesh.faces, s.frames[f].camera, s.frames[f + 1].camera, &raster[f]));
  }
  write_cameras(out + "/camera.csv", cams);
  return kExitOk;
}

// Posed skeletons, joint tracks and skinning weights of a fitted bundle.
inline int run_export(const std::string& state, const std::string& out) {
  ModelState s = read_bundle(state);
  ensure_dir(out);
  auto os = open_out(out + "/joints.csv");
  os << "frame,joint,x,y,z,u,v\n";
  for (int f = 0; f < static_cast<int>(s.frames.size()); ++f) {
    Skeleton k = posed_skeleton(s.skeleton, s.frames[f]);
    write_skel(out + "/" + frame_name("skeleton", f, "skel"), k);
    for (int j = 0; j < k.joint_count(); ++j) {
      const Vec3& p = k.joints[j].position;
      os << f << ',' << j << ',' << p.x() << ',' << p.y() << ',' << p.z();
      if (auto pr = try_project(s.frames[f].camera, p)) os << ',' << pr->pixel.u << ',' << pr->pixel.v << '\n';
      else os << ",nan,nan\n";
    }
  }
  write_weights(out + "/weights.txt", s.weights);
  return kExitOk;
}

}  // namespace cli

// Exit 0 on success, 1 on usage errors, 2 on data errors. Diagnostics go to
// stderr; results are written to files only.
inline int dispatch(int argc, const char* const* argv) {
  CLI::App app{"articulated shape and skeleton reconstruction from silhouettes and flow", "s3o"};
  app.require_subcommand(1);
  RunConfig rc;
  bool quiet = false;
  int verbose = 0;
  app.add_option("--threads", rc.threads, "worker threads (0 = hardware count)")->check(CLI::NonNegativeNumber);
  app.add_option("--seed", rc.seed, "random seed");
  app.add_flag("-v,--verbose", verbose, "print progress (repeat for more)");
  app.add_flag("-q,--quiet", quiet, "suppress warnings");

  bool prune = false;
  std::optional<double> prune_length;
  auto* skel2d = app.add_subcommand("skel2d", "2D skeleton graph of one mask");
  skel2d->add_option("mask", rc.input, "mask image (PGM or PNG)")->required();
  skel2d->add_flag("--prune", prune, "remove spurs shorter than 3% of the bbox diagonal");
  skel2d->add_option("--prune-length", prune_length, "spur length in pixels");
  skel2d->add_option("-o,--out", rc.output, "output JSON (default skeleton2d.json)");

  auto* canonical = app.add_subcommand("canonical", "select the canonical frame of a mask sequence");
  canonical->add_option("mask-dir", rc.input)->required();
  canonical->add_option("-o,--out", rc.output, "output CSV (default canonical.csv)");

  std::string descriptors;
  auto* lift = app.add_subcommand("lift", "initial 3D skeleton and coarse mesh from the canonical frame");
  lift->add_option("mask-dir", rc.input)->required();
  lift->add_option("--descriptors", descriptors, "per-part descriptor table");
  lift->add_option("-o,--out", rc.output, "output directory (default lift)");
  lift->add_option("--config", rc.config_path, "config file");

  std::string preset;
  cli::SynthOptions so;
  auto* synth = app.add_subcommand("synth", "render a synthetic dataset");
  synth->add_option("preset", preset, "chain, arm or quadruped")->required();
  synth->add_option("out", rc.output)->required();
  synth->add_option("--bones", so.bones, "chain bone count")->check(CLI::PositiveNumber);
  synth->add_option("--frames", so.frames, "frame count")->check(CLI::Range(2, 100000));
  synth->add_option("--amplitude", so.amplitude_deg, "hinge amplitude in degrees");
  synth->add_option("--noise", so.noise, "mask pixel flip probability")->check(CLI::Range(0.0, 1.0));
  synth->add_option("--erode", so.erode, "mask erosion in pixels")->check(CLI::NonNegativeNumber);

  std::map<std::string, std::string> flags;
  std::string t_o, t_d, t_r;
  auto* fit = app.add_subcommand("fit", "fit skeleton, shape and motion to an observation directory");
  fit->add_option("obs-dir", rc.input)->required();
  fit->add_option("out", rc.output)->required();
  fit->add_option("--config", rc.config_path, "config file (key = value)");
  fit->add_option("--t_o", t_o, "bone merge threshold (default 0.95)");
  fit->add_option("--t_d", t_d, "bone split threshold (default 0.2)");
  fit->add_option("--t_r", t_r, "joint weight threshold (default 0.4)");
  fit->add_option("--set", rc.overrides, "config override key=value (repeatable)");

  auto* render = app.add_subcommand("render", "re-render a fitted bundle as masks and flow");
  render->add_option("model", rc.input, "bundle directory")->required();
  render->add_option("out", rc.output)->required();

  auto* exp = app.add_subcommand("export", "posed skeletons and joint tracks of a fitted bundle");
  exp->add_option("state", rc.input, "bundle directory")->required();
  exp->add_option("out", rc.output)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e, std::cerr, std::cerr);
    std::cerr << "error: " << e.what() << '\n' << app.help();
    return kExitUsage;
  }

  rc.command = app.get_subcommands().front()->get_name();
  rc.verbosity = quiet ? 0 : 1 + verbose;
  log_verbosity() = rc.verbosity;
  set_thread_count(rc.threads);
  try {
    if (*skel2d) return cli::run_skel2d(rc.input, prune, prune_length, rc.output.empty() ? "skeleton2d.json" : rc.output);
    if (*canonical) return cli::run_canonical(rc.input, rc.output.empty() ? "canonical.csv" : rc.output);
    if (*lift) {
      ScheduleConfig cfg = rc.config_path.empty() ? ScheduleConfig{} : read_config(rc.config_path);
      cfg.seed = rc.seed;
      return cli::run_lift(rc.input, descriptors, rc.output.empty() ? "lift" : rc.output, cfg);
    }
    if (*synth) return cli::run_synth(preset, rc.output, so, rc.seed);
    if (*fit) {
      if (!t_o.empty()) flags["t_o"] = t_o;
      if (!t_d.empty()) flags["t_d"] = t_d;
      if (!t_r.empty()) flags["t_r"] = t_r;
      return cli::run_fit(rc.input, rc.output, cli::fit_config(rc, flags));
    }
    if (*render) return cli::run_render(rc.input, rc.output);
    if (*exp) return cli::run_export(rc.input, rc.output);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    if (!e.is_data_error()) {
      std::cerr << app.help();
      return kExitUsage;
    }
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  }
  std::cerr << app.help();
  return kExitUsage;
}

inline int dispatch(const std::vector<std::string>& args) {
  std::vector<const char*> argv{"s3o"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return dispatch(static_cast<int>(argv.size()), argv.data());
}

}  // namespace s3o
