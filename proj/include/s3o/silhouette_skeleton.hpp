#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "s3o/error.hpp"
#include "s3o/image.hpp"

namespace s3o {

struct ThinOptions {
  bool fill_holes = true;
  bool largest_component = false;
};

namespace detail {

// Neighbor order used by the thinning rules: P2..P9 = N, NE, E, SE, S, SW, W, NW.
inline std::array<int, 8> zs_neighbors(const BinaryMask& m, int x, int y) {
  return {fg(m, x, y - 1),     fg(m, x + 1, y - 1), fg(m, x + 1, y), fg(m, x + 1, y + 1),
          fg(m, x, y + 1),     fg(m, x - 1, y + 1), fg(m, x - 1, y), fg(m, x - 1, y - 1)};
}

inline int neighbor_count(const BinaryMask& m, int x, int y) {
  int n = 0;
  for (int k = 0; k < 8; ++k) n += fg(m, x + kDx8[k], y + kDy8[k]);
  return n;
}

// Yokoi connectivity number for 8-connected foreground; 1 means deleting the
// pixel changes neither foreground nor background topology.
inline bool is_simple(const BinaryMask& m, int x, int y) {
  // x1..x8 = E, NE, N, NW, W, SW, S, SE
  int b[9];
  for (int k = 0; k < 8; ++k) b[k] = 1 - fg(m, x + kDx8[k], y + kDy8[k]);
  b[8] = b[0];
  int c = 0;
  for (int k = 0; k < 8; k += 2) c += b[k] - b[k] * b[k + 1] * b[(k + 2) % 8];
  return c == 1;
}

inline bool sweep_simple_points(BinaryMask& m) {
  bool any = false;
  bool changed = true;
  while (changed) {
    changed = false;
    for (int y = 0; y < m.height; ++y)
      for (int x = 0; x < m.width; ++x)
        if (m(x, y) && neighbor_count(m, x, y) >= 2 && is_simple(m, x, y)) {
          m(x, y) = 0;
          changed = any = true;
        }
  }
  return any;
}

}  // namespace detail

// Iterative two-subiteration border thinning. Candidates found by the
// Zhang-Suen rules are removed one at a time and only while they remain
// simple, so the 8-connected topology of the input is preserved exactly.
inline BinaryMask thin_silhouette(const BinaryMask& mask, const ThinOptions& opts = {}) {
  require(count_foreground(mask) > 0, ErrorCode::EmptyMask, "silhouette has no foreground pixels");
  BinaryMask m = opts.fill_holes ? fill_holes(mask) : mask;
  if (label_components(m) > 1) {
    require(opts.largest_component, ErrorCode::MultipleComponents, "silhouette has more than one 8-connected component");
    m = largest_component(m);
  }

  std::vector<std::pair<int, int>> marked;
  bool changed = true;
  while (changed) {
    changed = false;
    for (int sub = 0; sub < 2; ++sub) {
      marked.clear();
      for (int y = 0; y < m.height; ++y) {
        for (int x = 0; x < m.width; ++x) {
          if (!m(x, y)) continue;
          auto p = detail::zs_neighbors(m, x, y);
          int b = std::accumulate(p.begin(), p.end(), 0);
          if (b < 2 || b > 6) continue;
          int a = 0;
          for (int k = 0; k < 8; ++k) a += (!p[k] && p[(k + 1) % 8]);
          if (a != 1) continue;
          // p[0]=N(P2) p[2]=E(P4) p[4]=S(P6) p[6]=W(P8)
          bool ok = sub == 0 ? (!(p[0] && p[2] && p[4]) && !(p[2] && p[4] && p[6]))
                             : (!(p[0] && p[2] && p[6]) && !(p[0] && p[4] && p[6]));
          if (ok) marked.emplace_back(x, y);
        }
      }
      for (auto [x, y] : marked) {
        if (detail::is_simple(m, x, y)) {
          m(x, y) = 0;
          changed = true;
        }
      }
    }
  }
  detail::sweep_simple_points(m);
  return m;
}

inline bool has_2x2_block(const BinaryMask& m) {
  for (int y = 0; y + 1 < m.height; ++y)
    for (int x = 0; x + 1 < m.width; ++x)
      if (m(x, y) && m(x + 1, y) && m(x, y + 1) && m(x + 1, y + 1)) return true;
  return false;
}

// ---------------------------------------------------------------------------

enum class NodeKind { Junction, Endpoint };

struct SkeletonNode {
  Pixel position;  // pixel center
  NodeKind kind = NodeKind::Endpoint;
};

struct SkeletonEdge {
  int a = 0;
  int b = 0;
  std::vector<std::pair<int, int>> trace;  // pixel path from node a to node b
  double arc_length = 0.0;
};

struct SkeletonGraph2D {
  std::vector<SkeletonNode> nodes;
  std::vector<SkeletonEdge> edges;

  std::vector<int> degrees() const {
    std::vector<int> d(nodes.size(), 0);
    for (const auto& e : edges) {
      ++d[e.a];
      ++d[e.b];
    }
    return d;
  }

  std::vector<int> incident_edges(int node) const {
    std::vector<int> out;
    for (int i = 0; i < static_cast<int>(edges.size()); ++i)
      if (edges[i].a == node || edges[i].b == node) out.push_back(i);
    return out;
  }

  bool empty() const { return nodes.empty(); }
};

inline Pixel pixel_center(int x, int y) { return {x + 0.5, y + 0.5}; }

inline double trace_length(const std::vector<std::pair<int, int>>& t) {
  double len = 0.0;
  for (std::size_t i = 1; i < t.size(); ++i) {
    int dx = std::abs(t[i].first - t[i - 1].first), dy = std::abs(t[i].second - t[i - 1].second);
    len += (dx && dy) ? std::sqrt(2.0) : 1.0;
  }
  return len;
}

namespace detail {

struct GraphBuilder {
  std::vector<SkeletonNode> nodes;
  std::vector<SkeletonEdge> edges;
  std::vector<char> alive_node;
  std::vector<char> alive_edge;

  int add_node(Pixel p, NodeKind k) {
    nodes.push_back({p, k});
    alive_node.push_back(1);
    return static_cast<int>(nodes.size()) - 1;
  }
  void add_edge(int a, int b, std::vector<std::pair<int, int>> trace) {
    double len = trace_length(trace);
    edges.push_back({a, b, std::move(trace), len});
    alive_edge.push_back(1);
  }
  std::vector<int> incident(int n) const {
    std::vector<int> out;
    for (int i = 0; i < static_cast<int>(edges.size()); ++i)
      if (alive_edge[i] && (edges[i].a == n || edges[i].b == n)) out.push_back(i);
    return out;
  }
  int degree(int n) const {
    int d = 0;
    for (int i = 0; i < static_cast<int>(edges.size()); ++i)
      if (alive_edge[i]) d += (edges[i].a == n) + (edges[i].b == n);
    return d;
  }
  // Trace oriented to start at node n.
  std::vector<std::pair<int, int>> oriented_from(int e, int n) const {
    auto t = edges[e].trace;
    if (edges[e].a != n) std::reverse(t.begin(), t.end());
    return t;
  }
  int other(int e, int n) const { return edges[e].a == n ? edges[e].b : edges[e].a; }

  // Dissolve a degree-2 non-endpoint node by joining its two edges.
  bool dissolve(int n) {
    auto inc = incident(n);
    if (inc.size() != 2) return false;
    int e1 = inc[0], e2 = inc[1];
    int a = other(e1, n), b = other(e2, n);
    if (a == n || b == n || a == b) return false;
    auto t1 = oriented_from(e1, a);
    auto t2 = oriented_from(e2, n);
    t1.insert(t1.end(), t2.begin() + 1, t2.end());
    alive_edge[e1] = alive_edge[e2] = 0;
    alive_node[n] = 0;
    add_edge(a, b, std::move(t1));
    return true;
  }

  void dissolve_connections() {
    bool changed = true;
    while (changed) {
      changed = false;
      for (int n = 0; n < static_cast<int>(nodes.size()); ++n)
        if (alive_node[n] && degree(n) == 2 && dissolve(n)) changed = true;
    }
  }

  void prune(double prune_len) {
    while (true) {
      int best = -1;
      int best_leaf = -1;
      for (int e = 0; e < static_cast<int>(edges.size()); ++e) {
        if (!alive_edge[e] || edges[e].arc_length >= prune_len) continue;
        int da = degree(edges[e].a), db = degree(edges[e].b);
        int leaf = -1;
        if (da == 1 && db >= 3) leaf = edges[e].a;
        else if (db == 1 && da >= 3) leaf = edges[e].b;
        if (leaf < 0) continue;
        if (best < 0 || edges[e].arc_length < edges[best].arc_length) {
          best = e;
          best_leaf = leaf;
        }
      }
      if (best < 0) break;
      int hub = other(best, best_leaf);
      alive_edge[best] = 0;
      alive_node[best_leaf] = 0;
      if (degree(hub) == 2) dissolve(hub);
    }
  }

  SkeletonGraph2D finish() const {
    SkeletonGraph2D g;
    std::vector<int> remap(nodes.size(), -1);
    for (int n = 0; n < static_cast<int>(nodes.size()); ++n) {
      if (!alive_node[n]) continue;
      remap[n] = static_cast<int>(g.nodes.size());
      g.nodes.push_back(nodes[n]);
    }
    for (int e = 0; e < static_cast<int>(edges.size()); ++e)
      if (alive_edge[e]) {
        SkeletonEdge ed = edges[e];
        ed.a = remap[ed.a];
        ed.b = remap[ed.b];
        g.edges.push_back(std::move(ed));
      }
    auto deg = g.degrees();
    for (std::size_t n = 0; n < g.nodes.size(); ++n)
      g.nodes[n].kind = deg[n] >= 3 ? NodeKind::Junction : (deg[n] <= 1 ? NodeKind::Endpoint : g.nodes[n].kind);
    return g;
  }
};

}  // namespace detail

inline double default_prune_length(const BinaryMask& silhouette) {
  int x0 = silhouette.width, y0 = silhouette.height, x1 = -1, y1 = -1;
  for (int y = 0; y < silhouette.height; ++y)
    for (int x = 0; x < silhouette.width; ++x)
      if (silhouette(x, y)) {
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
      }
  if (x1 < 0) return 0.0;
  return 0.03 * std::hypot(double(x1 - x0 + 1), double(y1 - y0 + 1));
}

// Graph of endpoints and junctions joined by the traced pixel paths between
// them; spurs shorter than prune_len hanging off junctions are removed.
inline SkeletonGraph2D build_skeleton_graph(const BinaryMask& skel_in, double prune_len) {
  require(count_foreground(skel_in) > 0, ErrorCode::EmptyMask, "skeleton has no foreground pixels");
  BinaryMask skel = skel_in;
  if (label_components(skel) > 1) {
    warn("skeleton has several components; keeping the largest");
    skel = largest_component(skel);
  }
  const int w = skel.width, h = skel.height;
  Grid<int> deg(w, h, 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (skel(x, y)) deg(x, y) = detail::neighbor_count(skel, x, y);

  // Cluster 8-adjacent node pixels (degree != 2).
  Grid<int> cluster(w, h, -1);
  detail::GraphBuilder gb;
  std::vector<std::vector<std::pair<int, int>>> members;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!skel(x, y) || deg(x, y) == 2 || cluster(x, y) >= 0) continue;
      int id = static_cast<int>(members.size());
      members.emplace_back();
      std::vector<std::pair<int, int>> stack{{x, y}};
      cluster(x, y) = id;
      while (!stack.empty()) {
        auto [cx, cy] = stack.back();
        stack.pop_back();
        members[id].emplace_back(cx, cy);
        for (int k = 0; k < 8; ++k) {
          int nx = cx + kDx8[k], ny = cy + kDy8[k];
          if (fg(skel, nx, ny) && deg(nx, ny) != 2 && cluster(nx, ny) < 0) {
            cluster(nx, ny) = id;
            stack.emplace_back(nx, ny);
          }
        }
      }
      std::sort(members[id].begin(), members[id].end(),
                [](auto a, auto b) { return std::tie(a.second, a.first) < std::tie(b.second, b.first); });
      double mx = 0, my = 0;
      for (auto [px, py] : members[id]) {
        mx += px;
        my += py;
      }
      mx /= members[id].size();
      my /= members[id].size();
      auto rep = *std::min_element(members[id].begin(), members[id].end(), [&](auto a, auto b) {
        return std::hypot(a.first - mx, a.second - my) < std::hypot(b.first - mx, b.second - my);
      });
      bool endpoint = members[id].size() == 1 && deg(x, y) <= 1;
      gb.add_node(pixel_center(rep.first, rep.second), endpoint ? NodeKind::Endpoint : NodeKind::Junction);
    }

  Grid<char> visited(w, h, 0);
  auto walk = [&](int sx, int sy, int start_node, int qx, int qy) {
    std::vector<std::pair<int, int>> trace{{sx, sy}, {qx, qy}};
    int px = sx, py = sy, cx = qx, cy = qy;
    visited(cx, cy) = 1;
    while (true) {
      if (cluster(cx, cy) >= 0) return std::make_pair(cluster(cx, cy), trace);
      int nx = -1, ny = -1;
      for (int k = 0; k < 8; ++k) {
        int tx = cx + kDx8[k], ty = cy + kDy8[k];
        if (!fg(skel, tx, ty) || (tx == px && ty == py)) continue;
        if (cluster(tx, ty) >= 0 && !(cluster(tx, ty) == start_node && trace.size() <= 2)) {
          nx = tx;
          ny = ty;
          break;
        }
        if (cluster(tx, ty) < 0 && !visited(tx, ty)) {
          nx = tx;
          ny = ty;
        }
      }
      if (nx < 0) return std::make_pair(-1, trace);
      px = cx;
      py = cy;
      cx = nx;
      cy = ny;
      if (cluster(cx, cy) < 0) visited(cx, cy) = 1;
      trace.emplace_back(cx, cy);
    }
  };

  auto add_loop = [&](int a, std::vector<std::pair<int, int>> trace) {
    // A closed path: split at its middle pixel so no self-loop is emitted.
    std::size_t mid = trace.size() / 2;
    int m = gb.add_node(pixel_center(trace[mid].first, trace[mid].second), NodeKind::Junction);
    gb.add_edge(a, m, {trace.begin(), trace.begin() + static_cast<std::ptrdiff_t>(mid) + 1});
    gb.add_edge(m, a, {trace.begin() + static_cast<std::ptrdiff_t>(mid), trace.end()});
  };

  for (int id = 0; id < static_cast<int>(members.size()); ++id)
    for (auto [sx, sy] : members[id])
      for (int k = 0; k < 8; ++k) {
        int qx = sx + kDx8[k], qy = sy + kDy8[k];
        if (!fg(skel, qx, qy) || cluster(qx, qy) >= 0 || visited(qx, qy)) continue;
        auto [end, trace] = walk(sx, sy, id, qx, qy);
        if (end < 0) continue;
        if (end == id) add_loop(id, std::move(trace));
        else gb.add_edge(id, end, std::move(trace));
      }

  // Pure cycles carry no node pixels at all.
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!skel(x, y) || visited(x, y) || cluster(x, y) >= 0) continue;
      std::vector<std::pair<int, int>> trace{{x, y}};
      visited(x, y) = 1;
      int px = -1, py = -1, cx = x, cy = y;
      while (true) {
        int nx = -1, ny = -1;
        for (int k = 0; k < 8; ++k) {
          int tx = cx + kDx8[k], ty = cy + kDy8[k];
          if (fg(skel, tx, ty) && !(tx == px && ty == py) && !visited(tx, ty)) {
            nx = tx;
            ny = ty;
            break;
          }
        }
        if (nx < 0) break;
        px = cx;
        py = cy;
        cx = nx;
        cy = ny;
        visited(cx, cy) = 1;
        trace.emplace_back(cx, cy);
      }
      trace.emplace_back(x, y);
      int a = gb.add_node(pixel_center(x, y), NodeKind::Junction);
      add_loop(a, std::move(trace));
    }

  gb.dissolve_connections();
  if (prune_len > 0.0) gb.prune(prune_len);
  return gb.finish();
}

// All pixel positions (nodes and traces) that make up the graph.
inline void graph_extent(const SkeletonGraph2D& g, double& min_u, double& max_u, double& min_v, double& max_v) {
  min_u = min_v = std::numeric_limits<double>::infinity();
  max_u = max_v = -std::numeric_limits<double>::infinity();
  auto take = [&](double u, double v) {
    min_u = std::min(min_u, u);
    max_u = std::max(max_u, u);
    min_v = std::min(min_v, v);
    max_v = std::max(max_v, v);
  };
  for (const auto& n : g.nodes) take(n.position.u, n.position.v);
  for (const auto& e : g.edges)
    for (auto [x, y] : e.trace) take(x + 0.5, y + 0.5);
}

// Horizontal-to-vertical extent ratio; nullopt when the vertical extent is zero.
inline std::optional<double> extent_ratio(const SkeletonGraph2D& g) {
  double u0, u1, v0, v1;
  graph_extent(g, u0, u1, v0, v1);
  if (!(v1 - v0 > 0.0)) return std::nullopt;
  return (u1 - u0) / (v1 - v0);
}

// Frame whose skeleton is widest relative to its height; ties go to the lowest index.
inline int canonical_frame(const std::vector<SkeletonGraph2D>& graphs) {
  require(!graphs.empty(), ErrorCode::InvalidArgument, "canonical_frame: no frames");
  int best = -1;
  double best_ratio = 0.0;
  for (int i = 0; i < static_cast<int>(graphs.size()); ++i) {
    require(!graphs[i].empty(), ErrorCode::EmptyGraph, "canonical_frame: frame " + std::to_string(i) + " has an empty skeleton");
    auto r = extent_ratio(graphs[i]);
    if (!r) continue;
    if (best < 0 || *r > best_ratio) {
      best = i;
      best_ratio = *r;
    }
  }
  require(best >= 0, ErrorCode::DegenerateExtent, "canonical_frame: vertical skeleton extent is zero in every frame");
  return best;
}

// ---------------------------------------------------------------------------
// JSON interchange:
// {"nodes":[{"u":..,"v":..,"kind":"junction"|"endpoint"}],
//  "edges":[{"a":0,"b":1,"arc_length":..,"trace":[[x,y],...]}]}

inline nlohmann::json to_json(const SkeletonGraph2D& g) {
  nlohmann::json j;
  j["nodes"] = nlohmann::json::array();
  for (const auto& n : g.nodes)
    j["nodes"].push_back(
        {{"u", n.position.u}, {"v", n.position.v}, {"kind", n.kind == NodeKind::Junction ? "junction" : "endpoint"}});
  j["edges"] = nlohmann::json::array();
  for (const auto& e : g.edges) {
    nlohmann::json t = nlohmann::json::array();
    for (auto [x, y] : e.trace) t.push_back({x, y});
    j["edges"].push_back({{"a", e.a}, {"b", e.b}, {"arc_length", e.arc_length}, {"trace", t}});
  }
  return j;
}

inline SkeletonGraph2D graph_from_json(const nlohmann::json& j) {
  SkeletonGraph2D g;
  try {
    for (const auto& n : j.at("nodes"))
      g.nodes.push_back({{n.at("u").get<double>(), n.at("v").get<double>()},
                         n.at("kind").get<std::string>() == "junction" ? NodeKind::Junction : NodeKind::Endpoint});
    for (const auto& e : j.at("edges")) {
      SkeletonEdge ed;
      ed.a = e.at("a").get<int>();
      ed.b = e.at("b").get<int>();
      ed.arc_length = e.at("arc_length").get<double>();
      for (const auto& p : e.at("trace")) ed.trace.emplace_back(p.at(0).get<int>(), p.at(1).get<int>());
      g.edges.push_back(std::move(ed));
    }
  } catch (const nlohmann::json::exception& ex) {
    fail(ErrorCode::Parse, std::string("skeleton graph json: ") + ex.what());
  }
  return g;
}

inline void write_graph_json(const std::string& path, const SkeletonGraph2D& g) {
  std::ofstream os(path);
  require(static_cast<bool>(os), ErrorCode::Io, "cannot write " + path);
  os << to_json(g).dump(1) << '\n';
}

}  // namespace s3o
