#ifndef DYMO_DATASET_H_
#define DYMO_DATASET_H_

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dymo/grammar.h"
#include "dymo/tensor.h"

namespace dymo {

// Shape and color ids index Grammar::shapes and Grammar::colors.
enum ShapeKind { kCircle = 0, kSquare = 1, kTriangle = 2 };
enum SizeWord { kNoSizeWord = -1, kSmall = 0, kLarge = 1 };

struct ShapeSpec {
  int kind = kCircle;
  int color = 0;
  int x = 0, y = 0;  // top-left of the bounding box
  int size = 0;      // bounding box edge in pixels
  int size_word = kNoSizeWord;

  friend bool operator==(const ShapeSpec&, const ShapeSpec&) = default;
};

struct ShapeScene {
  std::vector<ShapeSpec> shapes;
  std::string caption;
  Tensor image;                               // {3, N, N} in [-1, 1]
  std::vector<std::vector<uint8_t>> masks;    // per shape, N*N, before occlusion
  bool overlapping = false;
};

struct DatasetConfig {
  int image_size = 32;
  int min_shapes = 1;
  int max_shapes = 3;
  int min_size = 8;
  int max_size = 13;
  double size_word_prob = 0.2;
  double prefix_prob = 0.1;
  double overlap_prob = 0.02;
  int gap = 2;  // minimum free pixels between bounding boxes of non-overlapping shapes
};

struct Dataset {
  static constexpr int kFormatVersion = 1;
  int grammar_version = 0;
  uint64_t seed = 0;
  DatasetConfig config;
  std::vector<ShapeScene> scenes;
};

// Palette color in RGB, entries in {-1, 1}. The background is 0.
std::array<double, 3> palette_rgb(int color);
inline constexpr int kPaletteSize = 6;

// Pixel mask of a shape fitted to a w x h box at (x, y) on an n x n canvas.
std::vector<uint8_t> rasterize(int kind, int x, int y, int w, int h, int n);

// Paints shapes in order onto a gray canvas and fills masks and the overlap flag.
ShapeScene render_scene(std::vector<ShapeSpec> shapes, std::string caption, int image_size);

std::string make_caption(const std::vector<ShapeSpec>& shapes, const Grammar& grammar,
                         const std::vector<std::string>& connectors, const std::string& prefix);

// Scene `index` of the dataset with this seed; independent of other scenes.
ShapeScene make_scene(uint64_t seed, int index, const Grammar& grammar, const DatasetConfig& config = {});
Dataset make_dataset(int n, uint64_t seed, const Grammar& grammar, const DatasetConfig& config = {});

// Container: <dir>/index.json plus <dir>/scenes/NNNNNN.png (16-bit RGB) and
// NNNNNN_mask.png (8-bit gray, bit i set where shape i covers the pixel).
void save_dataset(const Dataset& dataset, const std::string& dir);
Dataset load_dataset(const std::string& dir);

// --- Programmatic detector ------------------------------------------------

struct Detection {
  int kind = -1;
  int color = -1;
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // inclusive bounding box
  int area = 0;
  double iou = 0.0;  // IoU with the best template
};

struct DetectorConfig {
  int min_area = 10;
  double min_iou = 0.6;
};

// Connected same-color regions whose best template IoU passes min_iou.
std::vector<Detection> detect_shapes(const Tensor& image, const DetectorConfig& config = {});

struct ObjectReport {
  std::string shape;
  std::string color;  // empty when the caption gives none
  bool present = false;
  bool color_correct = false;
  double confidence = 0.0;
};

struct SemanticReport {
  std::vector<ObjectReport> objects;
  int detections = 0;

  bool all_correct() const;
  double pass_fraction() const;
};

// Checks every captioned shape for presence and color. Each detection can
// satisfy one captioned object; exact color matches are assigned first.
SemanticReport detect_semantics(const Tensor& image, const std::string& caption, const Grammar& grammar,
                                const DetectorConfig& config = {});

// --- Synthetic preferences --------------------------------------------------

struct QualityProxyConfig {
  double w_saturation = 1.0;
  double w_sharpness = 1.0;
  double w_consistency = 1.0;
};

struct ProxyScore {
  double saturation = 0.0;
  double sharpness = 0.0;
  double consistency = 0.0;
  double total = 0.0;
};

ProxyScore quality_proxy(const Tensor& image, const std::string& caption, const Grammar& grammar,
                         const QualityProxyConfig& config = {});

Tensor blur(const Tensor& image, int passes = 1);
Tensor desaturate(const Tensor& image, double amount);

struct PreferencePair {
  Tensor preferred;
  Tensor dispreferred;
  std::string prompt;
  std::string degradation;
  double proxy_preferred = 0.0;
  double proxy_dispreferred = 0.0;
};

// For each scene, pairs_per_scene (original, degraded) pairs using blur,
// desaturation, shape dropping, recoloring or reshaping one shape. Pairs
// whose proxy ordering does not hold are skipped.
std::vector<PreferencePair> make_preference_pairs(const Dataset& dataset, uint64_t seed, const Grammar& grammar,
                                                  const QualityProxyConfig& config = {}, int pairs_per_scene = 2);

}  // namespace dymo

#endif  // DYMO_DATASET_H_
