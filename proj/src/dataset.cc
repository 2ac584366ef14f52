#include "dymo/dataset.h"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "dymo/errors.h"
#include "dymo/image_io.h"
#include "json.hpp"

namespace dymo {
namespace fs = std::filesystem;
namespace {

constexpr int kMaxCaptionTokens = 16;

std::mt19937_64 scene_rng(uint64_t seed, int index) {
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(index)};
  return std::mt19937_64(seq);
}

// Bounding boxes closer than `gap` free pixels (or intersecting).
bool too_close(const ShapeSpec& a, const ShapeSpec& b, int gap) {
  return a.x < b.x + b.size + gap && b.x < a.x + a.size + gap && a.y < b.y + b.size + gap &&
         b.y < a.y + a.size + gap;
}

int word_count(const std::string& s) {
  int n = 0;
  bool in = false;
  for (char c : s) {
    const bool sp = c == ' ';
    if (!sp && !in) ++n;
    in = !sp;
  }
  return n;
}

std::string scene_stem(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06d", i);
  return buf;
}

}  // namespace

std::array<double, 3> palette_rgb(int color) {
  static constexpr std::array<std::array<double, 3>, kPaletteSize> kPalette = {{
      {1, -1, -1},   // red
      {-1, 1, -1},   // green
      {-1, -1, 1},   // blue
      {1, 1, -1},    // yellow
      {-1, 1, 1},    // cyan
      {1, -1, 1},    // magenta
  }};
  if (color < 0 || color >= kPaletteSize) throw IndexError("palette color " + std::to_string(color));
  return kPalette[static_cast<size_t>(color)];
}

std::vector<uint8_t> rasterize(int kind, int x, int y, int w, int h, int n) {
  std::vector<uint8_t> mask(static_cast<size_t>(n) * static_cast<size_t>(n), 0);
  const double cx = x + w / 2.0, cy = y + h / 2.0;
  for (int py = std::max(0, y); py < std::min(n, y + h); ++py) {
    for (int px = std::max(0, x); px < std::min(n, x + w); ++px) {
      const double u = px + 0.5, v = py + 0.5;
      bool inside = false;
      switch (kind) {
        case kSquare:
          inside = true;
          break;
        case kCircle: {
          const double dx = (u - cx) / (w / 2.0), dy = (v - cy) / (h / 2.0);
          inside = dx * dx + dy * dy <= 1.0;
          break;
        }
        case kTriangle:
          inside = std::abs(u - cx) <= (w / 2.0) * (v - y) / h;
          break;
        default:
          throw IndexError("shape kind " + std::to_string(kind));
      }
      if (inside) mask[static_cast<size_t>(py * n + px)] = 1;
    }
  }
  return mask;
}

ShapeScene render_scene(std::vector<ShapeSpec> shapes, std::string caption, int image_size) {
  ShapeScene scene;
  scene.shapes = std::move(shapes);
  scene.caption = std::move(caption);
  scene.image = Tensor({3, image_size, image_size});
  const int n = image_size;
  for (const ShapeSpec& s : scene.shapes) {
    if (s.size < 3) throw InputError("shape size must be >= 3 px");
    std::vector<uint8_t> mask = rasterize(s.kind, s.x, s.y, s.size, s.size, n);
    const auto rgb = palette_rgb(s.color);
    for (int p = 0; p < n * n; ++p) {
      if (!mask[static_cast<size_t>(p)]) continue;
      for (int c = 0; c < 3; ++c) scene.image[static_cast<size_t>(c * n * n + p)] = rgb[static_cast<size_t>(c)];
    }
    scene.masks.push_back(std::move(mask));
  }
  for (size_t i = 0; i < scene.shapes.size(); ++i) {
    for (size_t j = i + 1; j < scene.shapes.size(); ++j) {
      if (too_close(scene.shapes[i], scene.shapes[j], 2)) scene.overlapping = true;
    }
  }
  return scene;
}

std::string make_caption(const std::vector<ShapeSpec>& shapes, const Grammar& grammar,
                         const std::vector<std::string>& connectors, const std::string& prefix) {
  if (connectors.size() + 1 < shapes.size()) throw InputError("make_caption: too few connectors");
  std::string out = prefix.empty() ? "" : prefix + " ";
  for (size_t i = 0; i < shapes.size(); ++i) {
    const ShapeSpec& s = shapes[i];
    if (i > 0) out += " " + connectors[i - 1] + " ";
    out += "a ";
    if (s.size_word != kNoSizeWord) out += grammar.sizes.at(static_cast<size_t>(s.size_word)) + " ";
    out += grammar.colors.at(static_cast<size_t>(s.color)) + " " + grammar.shapes.at(static_cast<size_t>(s.kind));
  }
  return out;
}

ShapeScene make_scene(uint64_t seed, int index, const Grammar& grammar, const DatasetConfig& cfg) {
  if (cfg.min_shapes < 1 || cfg.max_shapes < cfg.min_shapes) throw ConfigError("min_shapes/max_shapes");
  if (cfg.min_size < 3 || cfg.max_size < cfg.min_size || cfg.max_size + 3 > cfg.image_size) {
    throw ConfigError("min_size/max_size");
  }
  std::mt19937_64 rng = scene_rng(seed, index);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform_int = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };

  // Shape counts 1, 2, 3 with weights 0.3, 0.45, 0.25; other ranges uniform.
  int count;
  if (cfg.min_shapes == 1 && cfg.max_shapes == 3) {
    count = 1 + std::discrete_distribution<int>({0.3, 0.45, 0.25})(rng);
  } else {
    count = uniform_int(cfg.min_shapes, cfg.max_shapes);
  }
  const bool allow_overlap = unit(rng) < cfg.overlap_prob;

  std::vector<ShapeSpec> shapes;
  for (int k = 0; k < count; ++k) {
    ShapeSpec s;
    bool distinct = false;
    while (!distinct) {
      s.kind = uniform_int(0, static_cast<int>(grammar.shapes.size()) - 1);
      s.color = uniform_int(0, static_cast<int>(grammar.colors.size()) - 1);
      distinct = std::none_of(shapes.begin(), shapes.end(),
                              [&](const ShapeSpec& o) { return o.kind == s.kind && o.color == s.color; });
    }
    s.size_word = kNoSizeWord;
    if (unit(rng) < cfg.size_word_prob) s.size_word = uniform_int(kSmall, kLarge);
    if (s.size_word == kSmall) {
      s.size = uniform_int(std::max(3, cfg.min_size - 1), cfg.min_size + 1);
    } else if (s.size_word == kLarge) {
      s.size = uniform_int(cfg.max_size - 1, cfg.max_size + 1);
    } else {
      s.size = uniform_int(cfg.min_size, cfg.max_size);
    }
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      s.x = uniform_int(1, cfg.image_size - 1 - s.size);
      s.y = uniform_int(1, cfg.image_size - 1 - s.size);
      placed = allow_overlap || std::none_of(shapes.begin(), shapes.end(), [&](const ShapeSpec& o) {
                 return too_close(s, o, cfg.gap);
               });
    }
    if (!placed) break;
    shapes.push_back(s);
  }

  static const std::vector<std::string> kConnectors = {"and", "and", "next to", "near", "with"};
  static const std::vector<std::string> kPrefixes = {"a photo of", "a picture of", "an image of"};
  std::vector<std::string> connectors;
  for (size_t i = 1; i < shapes.size(); ++i) connectors.push_back(kConnectors[rng() % kConnectors.size()]);
  std::string prefix;
  if (unit(rng) < cfg.prefix_prob) prefix = kPrefixes[rng() % kPrefixes.size()];
  std::string caption = make_caption(shapes, grammar, connectors, prefix);
  if (word_count(caption) > kMaxCaptionTokens) caption = make_caption(shapes, grammar, connectors, "");
  return render_scene(std::move(shapes), std::move(caption), cfg.image_size);
}

Dataset make_dataset(int n, uint64_t seed, const Grammar& grammar, const DatasetConfig& config) {
  if (n < 1) throw ConfigError("dataset size n must be >= 1");
  Dataset d;
  d.grammar_version = grammar.version;
  d.seed = seed;
  d.config = config;
  d.scenes.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) d.scenes.push_back(make_scene(seed, i, grammar, config));
  return d;
}

void save_dataset(const Dataset& dataset, const std::string& dir) {
  const Grammar& g = Grammar::builtin();
  if (dataset.grammar_version != g.version) throw ConfigError("dataset grammar version does not match the built-in grammar");
  fs::create_directories(fs::path(dir) / "scenes");
  const DatasetConfig& c = dataset.config;
  nlohmann::ordered_json index;
  index["format"] = "dymo-shapes";
  index["format_version"] = Dataset::kFormatVersion;
  index["grammar_version"] = dataset.grammar_version;
  index["seed"] = dataset.seed;
  index["config"] = {{"image_size", c.image_size}, {"min_shapes", c.min_shapes}, {"max_shapes", c.max_shapes},
                     {"min_size", c.min_size},     {"max_size", c.max_size},     {"size_word_prob", c.size_word_prob},
                     {"prefix_prob", c.prefix_prob}, {"overlap_prob", c.overlap_prob}, {"gap", c.gap}};
  index["count"] = dataset.scenes.size();
  nlohmann::ordered_json scenes = nlohmann::ordered_json::array();
  for (size_t i = 0; i < dataset.scenes.size(); ++i) {
    const ShapeScene& s = dataset.scenes[i];
    const std::string stem = scene_stem(static_cast<int>(i));
    nlohmann::ordered_json shapes = nlohmann::ordered_json::array();
    for (const ShapeSpec& sp : s.shapes) {
      shapes.push_back({{"shape", g.shapes.at(static_cast<size_t>(sp.kind))},
                        {"color", g.colors.at(static_cast<size_t>(sp.color))},
                        {"x", sp.x},
                        {"y", sp.y},
                        {"size", sp.size},
                        {"size_word", sp.size_word == kNoSizeWord ? nlohmann::ordered_json(nullptr)
                                                                  : nlohmann::ordered_json(g.sizes.at(static_cast<size_t>(sp.size_word)))}});
    }
    scenes.push_back({{"id", i},
                      {"caption", s.caption},
                      {"image", "scenes/" + stem + ".png"},
                      {"mask", "scenes/" + stem + "_mask.png"},
                      {"overlapping", s.overlapping},
                      {"shapes", shapes}});

    write_png((fs::path(dir) / "scenes" / (stem + ".png")).string(), s.image, 16);
    const int n = s.image.dim(1);
    std::vector<uint8_t> bits(static_cast<size_t>(n * n), 0);
    for (size_t k = 0; k < s.masks.size(); ++k) {
      for (size_t p = 0; p < bits.size(); ++p) {
        if (s.masks[k][p]) bits[p] = static_cast<uint8_t>(bits[p] | (1u << k));
      }
    }
    write_png_gray((fs::path(dir) / "scenes" / (stem + "_mask.png")).string(), bits, n, n);
  }
  index["scenes"] = scenes;
  std::ofstream out(fs::path(dir) / "index.json", std::ios::binary);
  out << index.dump(2) << "\n";
  if (!out) throw std::runtime_error("cannot write " + dir + "/index.json");
}

Dataset load_dataset(const std::string& dir) {
  const fs::path index_path = fs::path(dir) / "index.json";
  std::ifstream in(index_path);
  if (!in) throw InputError("no dataset index at " + index_path.string());
  const Grammar& g = Grammar::builtin();
  try {
    const auto j = nlohmann::json::parse(in);
    if (j.at("format") != "dymo-shapes") throw FormatError("not a dymo-shapes dataset");
    if (j.at("format_version") != Dataset::kFormatVersion) throw FormatError("unsupported dataset format version");
    Dataset d;
    d.grammar_version = j.at("grammar_version");
    if (d.grammar_version != g.version) throw FormatError("dataset grammar version does not match the built-in grammar");
    d.seed = j.at("seed");
    const auto& c = j.at("config");
    d.config = {c.at("image_size"), c.at("min_shapes"), c.at("max_shapes"),  c.at("min_size"), c.at("max_size"),
                c.at("size_word_prob"), c.at("prefix_prob"), c.at("overlap_prob"), c.at("gap")};
    for (const auto& e : j.at("scenes")) {
      ShapeScene s;
      s.caption = e.at("caption");
      s.overlapping = e.at("overlapping");
      for (const auto& sp : e.at("shapes")) {
        ShapeSpec spec;
        spec.kind = g.shape_index(sp.at("shape").get<std::string>());
        spec.color = g.color_index(sp.at("color").get<std::string>());
        if (spec.kind < 0 || spec.color < 0) throw FormatError("unknown shape or color in index");
        spec.x = sp.at("x");
        spec.y = sp.at("y");
        spec.size = sp.at("size");
        spec.size_word = sp.at("size_word").is_null()
                             ? kNoSizeWord
                             : static_cast<int>(std::find(g.sizes.begin(), g.sizes.end(), sp.at("size_word").get<std::string>()) -
                                                g.sizes.begin());
        s.shapes.push_back(spec);
      }
      s.image = read_png((fs::path(dir) / e.at("image").get<std::string>()).string());
      int w = 0, h = 0;
      const std::vector<uint8_t> bits = read_png_gray((fs::path(dir) / e.at("mask").get<std::string>()).string(), &w, &h);
      for (size_t k = 0; k < s.shapes.size(); ++k) {
        std::vector<uint8_t> mask(bits.size());
        for (size_t p = 0; p < bits.size(); ++p) mask[p] = (bits[p] >> k) & 1u;
        s.masks.push_back(std::move(mask));
      }
      d.scenes.push_back(std::move(s));
    }
    if (d.scenes.size() != j.at("count").get<size_t>()) throw FormatError("scene count does not match index");
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("dataset index: ") + e.what());
  }
}

}  // namespace dymo
