#include "mimicry/toy_data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "mimicry/error.hpp"
#include "mimicry/rng.hpp"

namespace mimicry::toy {

namespace {

using Rgb = std::array<double, 3>;

struct Palette {
  Rgb a;
  Rgb b;
};

Palette palette_for(const std::string& style) {
  if (style == "stripes") return {{0.10, 0.15, 0.45}, {0.95, 0.90, 0.70}};
  if (style == "dots") return {{0.80, 0.15, 0.10}, {0.95, 0.85, 0.30}};
  if (style == "waves") return {{0.10, 0.50, 0.50}, {0.90, 0.95, 0.95}};
  if (style == "rings") return {{0.45, 0.10, 0.55}, {0.70, 0.90, 0.50}};
  if (style == "plain") return {{0.50, 0.52, 0.48}, {0.66, 0.60, 0.55}};
  throw ArgumentError("unknown toy style: " + style);
}

double smoothstep(double e0, double e1, double x) {
  const double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

// Signed distance-ish field, negative inside the shape. Coordinates are
// relative to the shape centre, in pixels.
double shape_field(const std::string& shape, double dx, double dy, double r) {
  if (shape == "circle") return std::hypot(dx, dy) - r;
  if (shape == "square") return std::max(std::abs(dx), std::abs(dy)) - 0.85 * r;
  if (shape == "diamond") return (std::abs(dx) + std::abs(dy)) / std::numbers::sqrt2 - 0.8 * r;
  if (shape == "cross") {
    const double arm = 0.35 * r;
    const double h = std::max(std::abs(dx) - r, std::abs(dy) - arm);
    const double v = std::max(std::abs(dx) - arm, std::abs(dy) - r);
    return std::min(h, v);
  }
  if (shape == "triangle") {
    // Upward equilateral triangle.
    const double k = std::sqrt(3.0);
    const double e1 = dy - 0.5 * r;
    const double e2 = (-k * dx - dy) / 2.0 - 0.5 * r;
    const double e3 = (k * dx - dy) / 2.0 - 0.5 * r;
    return std::max({e1, e2, e3});
  }
  throw ArgumentError("unknown toy shape: " + shape);
}

}  // namespace

Image render(const std::string& style, const std::string& shape, int side, std::uint64_t seed) {
  if (side < 4) throw ArgumentError("toy images need side >= 4");
  const Palette pal = palette_for(style);
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double scale = side / 32.0;
  const double period = (8.0 + 4.0 * unit(rng)) * scale;
  const double phase = 2.0 * std::numbers::pi * unit(rng);
  const double angle = (unit(rng) - 0.5) * 0.6;
  const double ox = unit(rng) * side;
  const double oy = unit(rng) * side;
  const double jitter = (unit(rng) - 0.5) * 0.06;

  const double r = (0.22 + 0.1 * unit(rng)) * side;
  const double cx = side / 2.0 + (unit(rng) - 0.5) * 0.3 * side;
  const double cy = side / 2.0 + (unit(rng) - 0.5) * 0.3 * side;
  const double two_pi = 2.0 * std::numbers::pi;

  auto pattern = [&](double x, double y) {
    const double u = std::cos(angle) * x + std::sin(angle) * y;
    const double v = -std::sin(angle) * x + std::cos(angle) * y;
    if (style == "stripes") return 0.5 + 0.5 * std::sin(two_pi * u / period + phase);
    if (style == "dots") {
      const double gx = std::fmod(u + ox + 1e3 * period, period) - period / 2;
      const double gy = std::fmod(v + oy + 1e3 * period, period) - period / 2;
      return 1.0 - smoothstep(0.22 * period, 0.34 * period, std::hypot(gx, gy));
    }
    if (style == "waves") {
      return 0.5 + 0.5 * std::sin(two_pi * (v + 0.18 * period * std::sin(two_pi * u / (1.7 * period))) / period +
                                   phase);
    }
    if (style == "rings") return 0.5 + 0.5 * std::cos(two_pi * std::hypot(x - ox, y - oy) / period + phase);
    return 0.5 + 0.4 * std::sin(two_pi * v / (3.0 * side) + phase);  // plain: a soft gradient
  };

  Image img(side, side);
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      const double px = x + 0.5;
      const double py = y + 0.5;
      const double p = pattern(px, py);
      const double inside = 1.0 - smoothstep(-0.7, 0.7, shape_field(shape, px - cx, py - cy, r));
      const double w = inside * (1.0 - p) + (1.0 - inside) * p;
      for (int c = 0; c < 3; ++c) {
        const double v = (1.0 - w) * pal.a[c] + w * pal.b[c] + jitter;
        img.at(c, y, x) = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return img;
}

std::vector<CorpusItem> make_corpus(const std::vector<std::string>& styles, int per_style, int side,
                                    std::uint64_t seed) {
  std::vector<CorpusItem> out;
  out.reserve(styles.size() * per_style);
  for (const auto& style : styles) {
    for (int i = 0; i < per_style; ++i) {
      const std::string shape = kShapes[i % kShapes.size()];
      const std::uint64_t s = derive_seed(derive_seed(seed, style), static_cast<std::uint64_t>(i));
      out.push_back({render(style, shape, side, s), "a " + style + " " + shape, style});
    }
  }
  return out;
}

dataset::ArtistDataset make_artist(const std::string& artist_id, const std::string& style, int count, int side,
                                   std::uint64_t seed) {
  dataset::ArtistDataset ds;
  ds.artist_id = artist_id;
  ds.style_tag = style;
  for (int i = 0; i < count; ++i) {
    const std::string shape = kShapes[i % kShapes.size()];
    const std::uint64_t s = derive_seed(derive_seed(seed, "artist:" + artist_id), static_cast<std::uint64_t>(i));
    ds.images.push_back(render(style, shape, side, s));
    ds.captions.push_back("a " + shape);
  }
  return ds;
}

Image checker_target(int side) {
  Image img(side, side);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) img.at(c, y, x) = ((x + y) % 2 == 0) ? 1.0 : 0.0;
  return img;
}

StyleStats style_stats(const Image& image) {
  StyleStats s;
  const std::size_t n = static_cast<std::size_t>(image.height) * image.width;
  if (n == 0) throw ArgumentError("empty image");
  for (int c = 0; c < 3; ++c) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += image.data[c * n + i];
    s.mean[c] = acc / n;
  }
  for (int a = 0; a < 3; ++a) {
    for (int b = a; b < 3; ++b) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) acc += (image.data[a * n + i] - s.mean[a]) * (image.data[b * n + i] - s.mean[b]);
      s.cov[a * 3 + b] = s.cov[b * 3 + a] = acc / n;
    }
  }
  // replicate-padded 3x3 box residual
  const int h = image.height, w = image.width;
  double e = 0.0;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double b = 0.0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) b += image.at(c, std::clamp(y + dy, 0, h - 1), std::clamp(x + dx, 0, w - 1));
        const double r = image.at(c, y, x) - b / 9.0;
        e += r * r;
      }
  s.roughness = std::sqrt(e / (3.0 * n));
  return s;
}

StyleStats mean_stats(const std::vector<Image>& images) {
  if (images.empty()) throw ArgumentError("style corpus is empty");
  StyleStats m;
  for (const auto& img : images) {
    const StyleStats s = style_stats(img);
    for (int i = 0; i < 3; ++i) m.mean[i] += s.mean[i];
    for (int i = 0; i < 9; ++i) m.cov[i] += s.cov[i];
    m.roughness += s.roughness;
  }
  const double inv = 1.0 / images.size();
  for (double& v : m.mean) v *= inv;
  for (double& v : m.cov) v *= inv;
  m.roughness *= inv;
  return m;
}

double stats_distance(const StyleStats& a, const StyleStats& b) {
  double s = 0.0;
  for (int i = 0; i < 3; ++i) s += (a.mean[i] - b.mean[i]) * (a.mean[i] - b.mean[i]);
  for (int i = 0; i < 9; ++i) s += (a.cov[i] - b.cov[i]) * (a.cov[i] - b.cov[i]);
  const double r = kRoughnessWeight * (a.roughness - b.roughness);
  return std::sqrt(s + r * r);
}

double toy_style_distance(const Image& image, const std::vector<Image>& style_corpus) {
  return stats_distance(style_stats(image), mean_stats(style_corpus));
}

}  // namespace mimicry::toy
