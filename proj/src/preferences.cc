#include <algorithm>
#include <cmath>
#include <random>

#include "dymo/dataset.h"
#include "dymo/errors.h"

namespace dymo {

ProxyScore quality_proxy(const Tensor& image, const std::string& caption, const Grammar& grammar,
                         const QualityProxyConfig& config) {
  if (image.rank() != 3 || image.dim(0) != 3) throw InputError("quality_proxy: expected {3, H, W}");
  const int h = image.dim(1), w = image.dim(2);
  ProxyScore s;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double r = image.at(0, y, x), g = image.at(1, y, x), b = image.at(2, y, x);
      s.saturation += (std::max({r, g, b}) - std::min({r, g, b})) / 2.0;
    }
  }
  s.saturation /= h * w;
  double edges = 0.0;
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        if (x + 1 < w) edges += std::pow(image.at(c, y, x + 1) - image.at(c, y, x), 2);
        if (y + 1 < h) edges += std::pow(image.at(c, y + 1, x) - image.at(c, y, x), 2);
      }
    }
  }
  // Mean squared neighbour difference, scaled so a full-range step scores 1.
  s.sharpness = edges / (4.0 * 3.0 * (2.0 * h * w - h - w));
  s.consistency = detect_semantics(image, caption, grammar).pass_fraction();
  s.total = config.w_saturation * s.saturation + config.w_sharpness * s.sharpness + config.w_consistency * s.consistency;
  return s;
}

Tensor blur(const Tensor& image, int passes) {
  const int h = image.dim(1), w = image.dim(2);
  Tensor cur = image;
  for (int p = 0; p < passes; ++p) {
    Tensor next = Tensor::like(cur);
    for (int c = 0; c < image.dim(0); ++c) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          double sum = 0.0;
          int n = 0;
          for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
              const int yy = y + dy, xx = x + dx;
              if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
              sum += cur.at(c, yy, xx);
              ++n;
            }
          }
          next.at(c, y, x) = sum / n;
        }
      }
    }
    cur = std::move(next);
  }
  return cur;
}

Tensor desaturate(const Tensor& image, double amount) {
  const int h = image.dim(1), w = image.dim(2);
  Tensor out = image;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double gray = (image.at(0, y, x) + image.at(1, y, x) + image.at(2, y, x)) / 3.0;
      for (int c = 0; c < 3; ++c) out.at(c, y, x) = gray + (1.0 - amount) * (image.at(c, y, x) - gray);
    }
  }
  return out;
}

std::vector<PreferencePair> make_preference_pairs(const Dataset& dataset, uint64_t seed, const Grammar& grammar,
                                                  const QualityProxyConfig& config, int pairs_per_scene) {
  enum { kBlur, kDesaturate, kDrop, kRecolor, kReshape, kKinds };
  static const char* kNames[kKinds] = {"blur", "desaturate", "drop_shape", "recolor", "reshape"};
  std::mt19937_64 rng(seed);
  std::vector<PreferencePair> pairs;
  for (const ShapeScene& scene : dataset.scenes) {
    const int n = scene.image.dim(1);
    const double base = quality_proxy(scene.image, scene.caption, grammar, config).total;
    std::vector<int> kinds(kKinds);
    for (int k = 0; k < kKinds; ++k) kinds[static_cast<size_t>(k)] = k;
    std::shuffle(kinds.begin(), kinds.end(), rng);
    for (int i = 0; i < std::min(pairs_per_scene, static_cast<int>(kKinds)); ++i) {
      const int kind = kinds[static_cast<size_t>(i)];
      Tensor degraded;
      std::vector<ShapeSpec> shapes = scene.shapes;
      const size_t victim = rng() % shapes.size();
      switch (kind) {
        case kBlur:
          degraded = blur(scene.image, 1 + static_cast<int>(rng() % 2));
          break;
        case kDesaturate:
          degraded = desaturate(scene.image, std::uniform_real_distribution<double>(0.4, 0.9)(rng));
          break;
        case kDrop:
          shapes.erase(shapes.begin() + static_cast<long>(victim));
          degraded = render_scene(shapes, scene.caption, n).image;
          break;
        case kRecolor:
          shapes[victim].color = (shapes[victim].color + 1 + static_cast<int>(rng() % (kPaletteSize - 1))) % kPaletteSize;
          degraded = render_scene(shapes, scene.caption, n).image;
          break;
        case kReshape:
          shapes[victim].kind = (shapes[victim].kind + 1 + static_cast<int>(rng() % 2)) % 3;
          degraded = render_scene(shapes, scene.caption, n).image;
          break;
      }
      const double worse = quality_proxy(degraded, scene.caption, grammar, config).total;
      if (!(worse < base)) continue;
      pairs.push_back({scene.image, std::move(degraded), scene.caption, kNames[kind], base, worse});
    }
  }
  return pairs;
}

}  // namespace dymo
