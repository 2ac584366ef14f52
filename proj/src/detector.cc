#include <algorithm>
#include <deque>

#include "dymo/dataset.h"
#include "dymo/errors.h"
#include "dymo/semantic_graph.h"

namespace dymo {
namespace {

// Nearest of {background, palette} per pixel; -1 is background.
std::vector<int> quantize(const Tensor& image) {
  const int h = image.dim(1), w = image.dim(2);
  std::vector<int> labels(static_cast<size_t>(h * w), -1);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double r = image.at(0, y, x), g = image.at(1, y, x), b = image.at(2, y, x);
      double best = r * r + g * g + b * b;
      for (int c = 0; c < kPaletteSize; ++c) {
        const auto p = palette_rgb(c);
        const double d = (r - p[0]) * (r - p[0]) + (g - p[1]) * (g - p[1]) + (b - p[2]) * (b - p[2]);
        if (d < best) {
          best = d;
          labels[static_cast<size_t>(y * w + x)] = c;
        }
      }
    }
  }
  return labels;
}

double template_iou(int kind, const std::vector<uint8_t>& local, int w, int h) {
  const int n = std::max(w, h);
  const std::vector<uint8_t> tmpl = rasterize(kind, 0, 0, w, h, n);
  int inter = 0, uni = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const bool a = local[static_cast<size_t>(y * w + x)] != 0;
      const bool b = tmpl[static_cast<size_t>(y * n + x)] != 0;
      inter += a && b;
      uni += a || b;
    }
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / uni;
}

}  // namespace

std::vector<Detection> detect_shapes(const Tensor& image, const DetectorConfig& config) {
  if (image.rank() != 3 || image.dim(0) != 3) throw InputError("detect_shapes: expected {3, H, W}, got " + image.shape_string());
  const int h = image.dim(1), w = image.dim(2);
  const std::vector<int> labels = quantize(image);
  std::vector<char> seen(labels.size(), 0);
  std::vector<Detection> out;
  std::vector<int> pixels;
  for (int start = 0; start < h * w; ++start) {
    const int color = labels[static_cast<size_t>(start)];
    if (color < 0 || seen[static_cast<size_t>(start)]) continue;
    pixels.clear();
    std::deque<int> queue{start};
    seen[static_cast<size_t>(start)] = 1;
    while (!queue.empty()) {
      const int p = queue.front();
      queue.pop_front();
      pixels.push_back(p);
      const int py = p / w, px = p % w;
      const int nbr[4][2] = {{py - 1, px}, {py + 1, px}, {py, px - 1}, {py, px + 1}};
      for (const auto& q : nbr) {
        if (q[0] < 0 || q[0] >= h || q[1] < 0 || q[1] >= w) continue;
        const int qi = q[0] * w + q[1];
        if (seen[static_cast<size_t>(qi)] || labels[static_cast<size_t>(qi)] != color) continue;
        seen[static_cast<size_t>(qi)] = 1;
        queue.push_back(qi);
      }
    }
    if (static_cast<int>(pixels.size()) < config.min_area) continue;
    Detection d;
    d.color = color;
    d.area = static_cast<int>(pixels.size());
    d.x0 = w, d.y0 = h, d.x1 = -1, d.y1 = -1;
    for (int p : pixels) {
      d.x0 = std::min(d.x0, p % w), d.x1 = std::max(d.x1, p % w);
      d.y0 = std::min(d.y0, p / w), d.y1 = std::max(d.y1, p / w);
    }
    const int bw = d.x1 - d.x0 + 1, bh = d.y1 - d.y0 + 1;
    std::vector<uint8_t> local(static_cast<size_t>(bw * bh), 0);
    for (int p : pixels) local[static_cast<size_t>((p / w - d.y0) * bw + (p % w - d.x0))] = 1;
    for (int kind : {kCircle, kSquare, kTriangle}) {
      const double iou = template_iou(kind, local, bw, bh);
      if (iou > d.iou) {
        d.iou = iou;
        d.kind = kind;
      }
    }
    if (d.iou >= config.min_iou) out.push_back(d);
  }
  return out;
}

bool SemanticReport::all_correct() const {
  return std::all_of(objects.begin(), objects.end(), [](const ObjectReport& o) { return o.present && o.color_correct; });
}

double SemanticReport::pass_fraction() const {
  if (objects.empty()) return 1.0;
  const auto ok = std::count_if(objects.begin(), objects.end(), [](const ObjectReport& o) { return o.present && o.color_correct; });
  return static_cast<double>(ok) / static_cast<double>(objects.size());
}

SemanticReport detect_semantics(const Tensor& image, const std::string& caption, const Grammar& grammar,
                                const DetectorConfig& config) {
  const std::vector<Detection> dets = detect_shapes(image, config);
  const SemanticGraph graph = extract_graph_rules(caption, grammar);
  SemanticReport report;
  report.detections = static_cast<int>(dets.size());
  std::vector<int> kinds, colors;
  for (const GraphEntity& e : graph.entities) {
    ObjectReport o;
    o.shape = e.node.text;
    int color = -1;
    for (const GraphNode& a : e.attributes) {
      if (grammar.is_color(a.text)) {
        o.color = a.text;
        color = grammar.color_index(a.text);
        break;
      }
    }
    report.objects.push_back(o);
    kinds.push_back(grammar.shape_index(o.shape));
    colors.push_back(color);
  }

  std::vector<char> used(dets.size(), 0);
  auto best_match = [&](int kind, int color) {
    int best = -1;
    for (size_t d = 0; d < dets.size(); ++d) {
      if (used[d] || dets[d].kind != kind || (color >= 0 && dets[d].color != color)) continue;
      if (best < 0 || dets[d].iou > dets[static_cast<size_t>(best)].iou) best = static_cast<int>(d);
    }
    return best;
  };
  for (size_t i = 0; i < report.objects.size(); ++i) {
    const int d = best_match(kinds[i], colors[i]);
    if (d < 0) continue;
    used[static_cast<size_t>(d)] = 1;
    report.objects[i].present = report.objects[i].color_correct = true;
    report.objects[i].confidence = dets[static_cast<size_t>(d)].iou;
  }
  for (size_t i = 0; i < report.objects.size(); ++i) {
    if (report.objects[i].present) continue;
    const int d = best_match(kinds[i], -1);
    if (d < 0) continue;
    used[static_cast<size_t>(d)] = 1;
    report.objects[i].present = true;
    report.objects[i].confidence = dets[static_cast<size_t>(d)].iou;
  }
  return report;
}

}  // namespace dymo
