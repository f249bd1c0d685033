#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <map>
#include <memory>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "trajtok/binary_io.hpp"
#include "trajtok/video_io.hpp"

namespace trajtok {

/// Panoptic label map: every pixel carries a segment id in {1..K}.
class LabelMap {
 public:
  LabelMap() = default;

  LabelMap(std::uint32_t width, std::uint32_t height, std::vector<std::uint32_t> labels)
      : width_(width), height_(height), labels_(std::move(labels)) {
    if (width == 0 || height == 0) throw std::invalid_argument("label map dimensions must be positive");
    if (labels_.size() != std::size_t{width} * height)
      throw std::invalid_argument("label buffer length must be width*height");
    label_count_ = labels_.empty() ? 0 : *std::max_element(labels_.begin(), labels_.end());
  }

  static LabelMap filled(std::uint32_t width, std::uint32_t height, std::uint32_t label = 1) {
    return LabelMap(width, height, std::vector<std::uint32_t>(std::size_t{width} * height, label));
  }

  std::uint32_t width() const { return width_; }
  std::uint32_t height() const { return height_; }
  std::size_t pixel_count() const { return labels_.size(); }
  /// Largest label present; equals K when the map is contiguous.
  std::uint32_t label_count() const { return label_count_; }

  std::uint32_t at(std::uint32_t x, std::uint32_t y) const { return labels_[std::size_t{y} * width_ + x]; }
  std::uint32_t operator[](std::size_t i) const { return labels_[i]; }
  std::span<const std::uint32_t> labels() const { return labels_; }

  /// Pixel count per label, indexed by label (entry 0 unused).
  std::vector<std::uint64_t> areas() const {
    std::vector<std::uint64_t> a(std::size_t{label_count_} + 1, 0);
    for (auto l : labels_) ++a[l];
    return a;
  }

  bool is_contiguous() const {
    const auto a = areas();
    if (label_count_ == 0 || a[0] != 0) return false;
    return std::all_of(a.begin() + 1, a.end(), [](std::uint64_t n) { return n > 0; });
  }

  void validate() const {
    if (!is_contiguous()) throw InvariantError("label map labels must be exactly {1..K}, each non-empty");
  }

  bool same_size(const LabelMap& o) const { return width_ == o.width_ && height_ == o.height_; }

  friend bool operator==(const LabelMap&, const LabelMap&) = default;

 private:
  std::uint32_t width_ = 0, height_ = 0, label_count_ = 0;
  std::vector<std::uint32_t> labels_;
};

/// Renumbers positive labels to {1..K} in increasing label order.
inline LabelMap relabel_contiguous(const LabelMap& map) {
  std::vector<std::uint32_t> values(map.labels().begin(), map.labels().end());
  std::sort(values.begin(), values.end());
  values.erase(std::unique(values.begin(), values.end()), values.end());
  if (!values.empty() && values.front() == 0) throw std::invalid_argument("labels must be positive");
  std::vector<std::uint32_t> out(map.pixel_count());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<std::uint32_t>(std::lower_bound(values.begin(), values.end(), map[i]) - values.begin()) + 1;
  return LabelMap(map.width(), map.height(), std::move(out));
}

/// Renumbers labels by raster order of each label's first pixel.
inline LabelMap relabel_raster_order(const LabelMap& map) {
  std::map<std::uint32_t, std::uint32_t> remap;
  std::vector<std::uint32_t> out(map.pixel_count());
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto [it, fresh] = remap.try_emplace(map[i], static_cast<std::uint32_t>(remap.size() + 1));
    out[i] = it->second;
  }
  return LabelMap(map.width(), map.height(), std::move(out));
}

// ---------------------------------------------------------------------------
// .lmap: "LMAP" | u32 w | u32 h | u32 K | w*h u32 labels

inline std::vector<std::uint8_t> encode_label_map(const LabelMap& map) {
  detail::ByteWriter w;
  w.magic("LMAP");
  w.u32(map.width());
  w.u32(map.height());
  w.u32(map.label_count());
  for (auto l : map.labels()) w.u32(l);
  return w.take();
}

inline LabelMap decode_label_map(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, "lmap");
  r.expect_magic("LMAP");
  const auto w = r.u32("width"), h = r.u32("height"), k = r.u32("label count");
  if (w == 0 || h == 0) throw FormatError("lmap: zero width or height", 4);
  std::vector<std::uint32_t> labels(std::size_t{w} * h);
  for (auto& l : labels) {
    l = r.u32("labels");
    if (l == 0 || l > k) r.fail("label " + std::to_string(l) + " outside [1, " + std::to_string(k) + "]");
  }
  LabelMap map(w, h, std::move(labels));
  if (map.label_count() != k || !map.is_contiguous()) r.fail("labels are not exactly {1..K}");
  return map;
}

inline LabelMap load_label_map(const std::string& path) { return decode_label_map(detail::read_file(path)); }

inline void write_label_map(const std::string& path, const LabelMap& map) {
  detail::write_file(path, encode_label_map(map));
}

// ---------------------------------------------------------------------------

enum class SegmenterBackend { BuiltinRegion, External };

struct SegmenterConfig {
  SegmenterBackend backend = SegmenterBackend::BuiltinRegion;
  std::uint32_t quantization_levels = 4;
  std::uint32_t min_area = 16;
  bool merge_small_regions = true;
  std::string external_dir;  // External: reads <dir>/frame_NNNNNN.lmap

  void validate() const {
    if (quantization_levels < 2) throw std::invalid_argument("quantization levels must be >= 2");
    if (min_area < 1) throw std::invalid_argument("minimum segment area must be >= 1");
  }
};

/// Per-pixel quantized colour id with `levels` bins per channel.
inline std::vector<std::uint32_t> quantize(const Frame& frame, std::uint32_t levels) {
  std::vector<std::uint32_t> q(frame.pixel_count());
  for (std::size_t i = 0; i < q.size(); ++i) {
    const auto c = frame.at(i);
    const std::uint32_t r = c.r * levels / 256, g = c.g * levels / 256, b = c.b * levels / 256;
    q[i] = (r * levels + g) * levels + b;
  }
  return q;
}

namespace detail {

/// 4-connected components of equal values; ids 0.. in raster order of first pixel.
inline std::vector<std::uint32_t> connected_components(std::span<const std::uint32_t> values, std::uint32_t width,
                                                       std::uint32_t height, std::uint32_t* count) {
  constexpr auto kUnset = ~std::uint32_t{0};
  std::vector<std::uint32_t> comp(values.size(), kUnset);
  std::vector<std::size_t> stack;
  std::uint32_t next = 0;
  for (std::size_t seed = 0; seed < values.size(); ++seed) {
    if (comp[seed] != kUnset) continue;
    comp[seed] = next;
    stack.push_back(seed);
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      const std::uint32_t x = static_cast<std::uint32_t>(i % width), y = static_cast<std::uint32_t>(i / width);
      auto visit = [&](std::size_t j) {
        if (comp[j] == kUnset && values[j] == values[i]) {
          comp[j] = next;
          stack.push_back(j);
        }
      };
      if (x > 0) visit(i - 1);
      if (x + 1 < width) visit(i + 1);
      if (y > 0) visit(i - width);
      if (y + 1 < height) visit(i + width);
    }
    ++next;
  }
  *count = next;
  return comp;
}

/// Counts 4-adjacent pixel edges between differently labelled regions.
inline std::vector<std::map<std::uint32_t, std::uint64_t>> region_adjacency(std::span<const std::uint32_t> comp,
                                                                             std::uint32_t width,
                                                                             std::uint32_t height,
                                                                             std::uint32_t count) {
  std::vector<std::map<std::uint32_t, std::uint64_t>> adj(count);
  for (std::uint32_t y = 0; y < height; ++y)
    for (std::uint32_t x = 0; x < width; ++x) {
      const std::size_t i = std::size_t{y} * width + x;
      auto edge = [&](std::size_t j) {
        if (comp[i] != comp[j]) {
          ++adj[comp[i]][comp[j]];
          ++adj[comp[j]][comp[i]];
        }
      };
      if (x + 1 < width) edge(i + 1);
      if (y + 1 < height) edge(i + width);
    }
  return adj;
}

/// Merges regions below `min_area` into the neighbour sharing the longest
/// boundary (ties to the smaller region id), smallest region id first.
inline void merge_small_regions(std::vector<std::uint32_t>& comp, std::uint32_t width, std::uint32_t height,
                                std::uint32_t count, std::uint64_t min_area) {
  auto adj = region_adjacency(comp, width, height, count);
  std::vector<std::uint64_t> area(count, 0);
  for (auto c : comp) ++area[c];
  std::vector<std::uint32_t> target(count);
  for (std::uint32_t i = 0; i < count; ++i) target[i] = i;

  std::set<std::uint32_t> pending;
  for (std::uint32_t i = 0; i < count; ++i)
    if (area[i] < min_area) pending.insert(i);

  while (!pending.empty()) {
    const std::uint32_t r = *pending.begin();
    pending.erase(pending.begin());
    if (area[r] == 0 || area[r] >= min_area || adj[r].empty()) continue;
    std::uint32_t best = 0;
    std::uint64_t best_edges = 0;
    for (const auto& [n, edges] : adj[r])
      if (edges > best_edges) {  // map order makes the first maximum the smallest id
        best = n;
        best_edges = edges;
      }
    for (const auto& [n, edges] : adj[r]) {
      adj[n].erase(r);
      if (n != best) {
        adj[best][n] += edges;
        adj[n][best] += edges;
      }
    }
    adj[r].clear();
    area[best] += area[r];
    area[r] = 0;
    target[r] = best;
    if (area[best] < min_area) pending.insert(best);
  }
  for (auto& c : comp) {
    while (target[c] != c) c = target[c];
  }
}

}  // namespace detail

/// Built-in panoptic segmenter: colour quantization, 4-connected components,
/// small-region merging, labels in raster order of first pixel.
inline LabelMap segment_frame(const Frame& frame, const SegmenterConfig& cfg = {}) {
  cfg.validate();
  const auto q = quantize(frame, cfg.quantization_levels);
  std::uint32_t count = 0;
  auto comp = detail::connected_components(q, frame.width(), frame.height(), &count);
  if (cfg.merge_small_regions && cfg.min_area > 1)
    detail::merge_small_regions(comp, frame.width(), frame.height(), count, cfg.min_area);
  for (auto& c : comp) ++c;
  return relabel_raster_order(LabelMap(frame.width(), frame.height(), std::move(comp)));
}

/// Produces the panoptic segmentation of one frame of a video.
class Segmenter {
 public:
  virtual ~Segmenter() = default;
  virtual LabelMap segment(const VideoClip& video, std::size_t t) const = 0;
};

class BuiltinSegmenter final : public Segmenter {
 public:
  explicit BuiltinSegmenter(SegmenterConfig cfg = {}) : cfg_(std::move(cfg)) { cfg_.validate(); }
  LabelMap segment(const VideoClip& video, std::size_t t) const override { return segment_frame(video.frame(t), cfg_); }

 private:
  SegmenterConfig cfg_;
};

inline std::string frame_file_name(std::size_t t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%06zu.lmap", t);
  return buf;
}

/// Reads precomputed label maps, e.g. from an external segmentation model.
class ExternalSegmenter final : public Segmenter {
 public:
  explicit ExternalSegmenter(std::string dir) : dir_(std::move(dir)) {}

  LabelMap segment(const VideoClip& video, std::size_t t) const override {
    auto map = load_label_map(dir_ + "/" + frame_file_name(t));
    if (map.width() != video.width() || map.height() != video.height())
      throw std::invalid_argument("external label map size does not match the video");
    map.validate();
    return map;
  }

 private:
  std::string dir_;
};

inline std::unique_ptr<Segmenter> make_segmenter(const SegmenterConfig& cfg) {
  if (cfg.backend == SegmenterBackend::External) return std::make_unique<ExternalSegmenter>(cfg.external_dir);
  return std::make_unique<BuiltinSegmenter>(cfg);
}

}  // namespace trajtok
