#pragma once

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "s3o/error.hpp"
#include "s3o/geom.hpp"

namespace s3o {

template <typename T>
struct Grid {
  int width = 0;
  int height = 0;
  std::vector<T> data;

  Grid() = default;
  Grid(int w, int h, T fill = T{}) : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill) {}

  bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }
  T& operator()(int x, int y) { return data[static_cast<std::size_t>(y) * width + x]; }
  const T& operator()(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }
  std::size_t size() const { return data.size(); }
  bool same_shape(const Grid& o) const { return width == o.width && height == o.height; }
  bool operator==(const Grid& o) const = default;
};

// Row-major foreground flags, 1 = foreground.
using BinaryMask = Grid<std::uint8_t>;
using RgbImage = Grid<std::array<float, 3>>;

inline std::size_t count_foreground(const BinaryMask& m) {
  return static_cast<std::size_t>(std::count_if(m.data.begin(), m.data.end(), [](std::uint8_t b) { return b != 0; }));
}

inline constexpr std::array<int, 8> kDx8 = {1, 1, 0, -1, -1, -1, 0, 1};
inline constexpr std::array<int, 8> kDy8 = {0, -1, -1, -1, 0, 1, 1, 1};

inline bool fg(const BinaryMask& m, int x, int y) { return m.contains(x, y) && m(x, y) != 0; }

// 8-connected foreground components; labels are 1-based in raster order of first pixel.
inline int label_components(const BinaryMask& m, Grid<int>* labels_out = nullptr) {
  Grid<int> labels(m.width, m.height, 0);
  int next = 0;
  std::vector<std::pair<int, int>> stack;
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) {
      if (!m(x, y) || labels(x, y)) continue;
      ++next;
      labels(x, y) = next;
      stack.assign(1, {x, y});
      while (!stack.empty()) {
        auto [cx, cy] = stack.back();
        stack.pop_back();
        for (int k = 0; k < 8; ++k) {
          int nx = cx + kDx8[k], ny = cy + kDy8[k];
          if (fg(m, nx, ny) && !labels(nx, ny)) {
            labels(nx, ny) = next;
            stack.emplace_back(nx, ny);
          }
        }
      }
    }
  }
  if (labels_out) *labels_out = std::move(labels);
  return next;
}

inline BinaryMask largest_component(const BinaryMask& m) {
  Grid<int> labels;
  int n = label_components(m, &labels);
  if (n <= 1) return m;
  std::vector<std::size_t> sizes(n + 1, 0);
  for (int l : labels.data) ++sizes[l];
  int best = 1;
  for (int l = 2; l <= n; ++l)
    if (sizes[l] > sizes[best]) best = l;
  BinaryMask out(m.width, m.height, 0);
  for (std::size_t i = 0; i < m.size(); ++i) out.data[i] = labels.data[i] == best ? 1 : 0;
  return out;
}

// Background not 4-connected to the image border becomes foreground.
inline BinaryMask fill_holes(const BinaryMask& m) {
  BinaryMask outside(m.width, m.height, 0);
  std::vector<std::pair<int, int>> stack;
  auto seed = [&](int x, int y) {
    if (!m(x, y) && !outside(x, y)) {
      outside(x, y) = 1;
      stack.emplace_back(x, y);
    }
  };
  for (int x = 0; x < m.width; ++x) {
    seed(x, 0);
    seed(x, m.height - 1);
  }
  for (int y = 0; y < m.height; ++y) {
    seed(0, y);
    seed(m.width - 1, y);
  }
  static constexpr int dx4[4] = {1, -1, 0, 0}, dy4[4] = {0, 0, 1, -1};
  while (!stack.empty()) {
    auto [x, y] = stack.back();
    stack.pop_back();
    for (int k = 0; k < 4; ++k) {
      int nx = x + dx4[k], ny = y + dy4[k];
      if (m.contains(nx, ny)) seed(nx, ny);
    }
  }
  BinaryMask out(m.width, m.height, 0);
  for (std::size_t i = 0; i < m.size(); ++i) out.data[i] = outside.data[i] ? 0 : 1;
  return out;
}

namespace detail {

// Squared-distance lower envelope (Felzenszwalb & Huttenlocher), in place on f.
inline void edt_1d(std::vector<double>& f, std::vector<double>& d, std::vector<int>& v, std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  constexpr double inf = std::numeric_limits<double>::infinity();
  d.assign(n, 0.0);
  v.assign(n, 0);
  z.assign(n + 1, 0.0);
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == inf) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -inf;
      z[1] = inf;
      continue;
    }
    auto intersect = [&](int a, int b) {
      return ((f[a] + double(a) * a) - (f[b] + double(b) * b)) / (2.0 * a - 2.0 * b);
    };
    double s = intersect(q, v[k]);
    while (s <= z[k]) {
      --k;
      s = intersect(q, v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  if (k < 0) {
    d.assign(n, inf);
  } else {
    int j = 0;
    for (int q = 0; q < n; ++q) {
      while (z[j + 1] < q) ++j;
      d[q] = (q - v[j]) * double(q - v[j]) + f[v[j]];
    }
  }
  f.swap(d);
}

inline Grid<double> squared_edt(const Grid<std::uint8_t>& seeds) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  Grid<double> g(seeds.width, seeds.height, inf);
  for (std::size_t i = 0; i < seeds.size(); ++i)
    if (seeds.data[i]) g.data[i] = 0.0;
  std::vector<double> f, d, z;
  std::vector<int> v;
  for (int x = 0; x < g.width; ++x) {
    f.resize(g.height);
    for (int y = 0; y < g.height; ++y) f[y] = g(x, y);
    edt_1d(f, d, v, z);
    for (int y = 0; y < g.height; ++y) g(x, y) = f[y];
  }
  for (int y = 0; y < g.height; ++y) {
    f.assign(g.data.begin() + static_cast<std::ptrdiff_t>(y) * g.width,
             g.data.begin() + static_cast<std::ptrdiff_t>(y + 1) * g.width);
    edt_1d(f, d, v, z);
    std::copy(f.begin(), f.end(), g.data.begin() + static_cast<std::ptrdiff_t>(y) * g.width);
  }
  return g;
}

}  // namespace detail

// Euclidean distance (pixel-center to pixel-center) to the nearest foreground
// pixel; 0 on foreground, +inf everywhere when the mask is empty.
inline Grid<double> distance_to_foreground(const BinaryMask& m) {
  Grid<double> g = detail::squared_edt(m);
  for (auto& x : g.data) x = std::sqrt(x);
  return g;
}

// Distance from each pixel to the nearest background pixel; pixels outside the
// image count as background.
inline Grid<double> distance_to_background(const BinaryMask& m) {
  BinaryMask bg(m.width + 2, m.height + 2, 1);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) bg(x + 1, y + 1) = m(x, y) ? 0 : 1;
  Grid<double> padded = detail::squared_edt(bg);
  Grid<double> out(m.width, m.height, 0.0);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) out(x, y) = std::sqrt(padded(x + 1, y + 1));
  return out;
}

// Bilinear sample of a per-pixel field at continuous image position (u, v),
// with pixel centers at integer + 0.5; clamps at the border.
inline double sample_bilinear(const Grid<double>& g, double u, double v) {
  double x = std::clamp(u - 0.5, 0.0, double(g.width - 1));
  double y = std::clamp(v - 0.5, 0.0, double(g.height - 1));
  int x0 = std::min(static_cast<int>(x), g.width - 1), y0 = std::min(static_cast<int>(y), g.height - 1);
  int x1 = std::min(x0 + 1, g.width - 1), y1 = std::min(y0 + 1, g.height - 1);
  double fx = x - x0, fy = y - y0;
  return (1 - fx) * (1 - fy) * g(x0, y0) + fx * (1 - fy) * g(x1, y0) + (1 - fx) * fy * g(x0, y1) +
         fx * fy * g(x1, y1);
}

// Foreground pixels with at least one 4-neighbor in the background (or on the image edge).
inline std::vector<std::pair<int, int>> boundary_pixels(const BinaryMask& m) {
  std::vector<std::pair<int, int>> out;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      if (!m(x, y)) continue;
      if (!fg(m, x + 1, y) || !fg(m, x - 1, y) || !fg(m, x, y + 1) || !fg(m, x, y - 1)) out.emplace_back(x, y);
    }
  return out;
}

// Nearest-neighbor rescale by an integer factor.
inline BinaryMask upscale(const BinaryMask& m, int factor) {
  BinaryMask out(m.width * factor, m.height * factor, 0);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x) out(x, y) = m(x / factor, y / factor);
  return out;
}

// ---------------------------------------------------------------------------
// Mask I/O. PGM: 0 = background, anything else foreground. PNG: gray >= 128.

namespace detail {
inline void skip_pnm_space(std::istream& is) {
  while (true) {
    int c = is.peek();
    if (c == '#') {
      std::string dummy;
      std::getline(is, dummy);
    } else if (std::isspace(c)) {
      is.get();
    } else {
      break;
    }
  }
}

inline int read_pnm_int(std::istream& is) {
  skip_pnm_space(is);
  int v = -1;
  is >> v;
  require(static_cast<bool>(is) && v >= 0, ErrorCode::Parse, "malformed PNM header");
  return v;
}
}  // namespace detail

inline BinaryMask read_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorCode::Io, "cannot read " + path);
  std::string magic(2, ' ');
  is.read(magic.data(), 2);
  require(magic == "P5" || magic == "P2", ErrorCode::Parse, path + ": not a PGM file");
  int w = detail::read_pnm_int(is), h = detail::read_pnm_int(is), maxval = detail::read_pnm_int(is);
  require(w > 0 && h > 0 && maxval > 0 && maxval < 65536, ErrorCode::Parse, path + ": bad PGM header");
  BinaryMask m(w, h, 0);
  if (magic == "P5") {
    is.get();
    const int bytes = maxval < 256 ? 1 : 2;
    std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * bytes);
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    require(static_cast<std::size_t>(is.gcount()) == buf.size(), ErrorCode::Parse, path + ": truncated PGM");
    for (std::size_t i = 0; i < m.size(); ++i)
      m.data[i] = bytes == 1 ? (buf[i] != 0) : ((buf[2 * i] | buf[2 * i + 1]) != 0);
  } else {
    for (std::size_t i = 0; i < m.size(); ++i) m.data[i] = detail::read_pnm_int(is) != 0;
  }
  return m;
}

inline void write_pgm(const std::string& path, const BinaryMask& m) {
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), ErrorCode::Io, "cannot write " + path);
  os << "P5\n" << m.width << ' ' << m.height << "\n255\n";
  std::vector<unsigned char> buf(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) buf[i] = m.data[i] ? 255 : 0;
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

inline BinaryMask read_png_mask(const std::string& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  require(png_image_begin_read_from_file(&image, path.c_str()) != 0, ErrorCode::Io, "cannot read PNG " + path);
  image.format = PNG_FORMAT_GRAY;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(image));
  if (png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr) == 0) {
    png_image_free(&image);
    fail(ErrorCode::Parse, "cannot decode PNG " + path);
  }
  BinaryMask m(static_cast<int>(image.width), static_cast<int>(image.height), 0);
  for (std::size_t i = 0; i < m.size(); ++i) m.data[i] = buf[i] >= 128;
  return m;
}

inline BinaryMask read_mask(const std::string& path) {
  auto ends_with = [&](const std::string& s) {
    return path.size() >= s.size() && std::equal(s.rbegin(), s.rend(), path.rbegin(),
                                                 [](char a, char b) { return std::tolower(a) == std::tolower(b); });
  };
  if (ends_with(".png")) return read_png_mask(path);
  return read_pgm(path);
}

inline RgbImage read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorCode::Io, "cannot read " + path);
  std::string magic(2, ' ');
  is.read(magic.data(), 2);
  require(magic == "P6", ErrorCode::Parse, path + ": not a binary PPM file");
  int w = detail::read_pnm_int(is), h = detail::read_pnm_int(is), maxval = detail::read_pnm_int(is);
  require(w > 0 && h > 0 && maxval > 0 && maxval < 256, ErrorCode::Parse, path + ": unsupported PPM header");
  is.get();
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * 3);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  require(static_cast<std::size_t>(is.gcount()) == buf.size(), ErrorCode::Parse, path + ": truncated PPM");
  RgbImage img(w, h);
  for (std::size_t i = 0; i < img.size(); ++i)
    for (int c = 0; c < 3; ++c) img.data[i][c] = static_cast<float>(buf[3 * i + c]) / static_cast<float>(maxval);
  return img;
}

inline void write_ppm(const std::string& path, const RgbImage& img) {
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), ErrorCode::Io, "cannot write " + path);
  os << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  std::vector<unsigned char> buf(img.size() * 3);
  for (std::size_t i = 0; i < img.size(); ++i)
    for (int c = 0; c < 3; ++c)
      buf[3 * i + c] = static_cast<unsigned char>(std::lround(std::clamp(img.data[i][c], 0.0f, 1.0f) * 255.0f));
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

}  // namespace s3o
