#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "trajtok/binary_io.hpp"
#include "trajtok/segmentation.hpp"
#include "trajtok/video_io.hpp"

namespace trajtok {

/// Normalized tight box; pixel (x, y) covers [x, x+1) x [y, y+1) before
/// division by (W, H), so the full frame is exactly (0, 0, 1, 1).
struct BBox {
  float x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  friend bool operator==(const BBox&, const BBox&) = default;
};

/// Run of set pixels in row-major index space. Runs never cross a row.
struct Run {
  std::uint32_t start = 0;
  std::uint32_t length = 0;
  friend bool operator==(const Run&, const Run&) = default;
};

/// Binary mask stored as sorted per-row runs.
class RleMask {
 public:
  RleMask() = default;
  explicit RleMask(std::vector<Run> runs) : runs_(std::move(runs)) {}

  static RleMask from_dense(std::span<const std::uint8_t> dense, std::uint32_t width) {
    std::vector<Run> runs;
    for (std::size_t i = 0; i < dense.size(); ++i) {
      if (!dense[i]) continue;
      const bool extend = !runs.empty() && runs.back().start + runs.back().length == i && i % width != 0;
      if (extend)
        ++runs.back().length;
      else
        runs.push_back({static_cast<std::uint32_t>(i), 1});
    }
    return RleMask(std::move(runs));
  }

  const std::vector<Run>& runs() const { return runs_; }
  bool empty() const { return runs_.empty(); }

  std::uint64_t area() const {
    std::uint64_t a = 0;
    for (const auto& r : runs_) a += r.length;
    return a;
  }

  std::vector<std::uint8_t> to_dense(std::size_t pixel_count) const {
    std::vector<std::uint8_t> d(pixel_count, 0);
    for (const auto& r : runs_) std::fill_n(d.begin() + r.start, r.length, std::uint8_t{1});
    return d;
  }

  template <class Fn>
  void for_each_pixel(Fn&& fn) const {
    for (const auto& r : runs_)
      for (std::uint32_t i = r.start; i < r.start + r.length; ++i) fn(i);
  }

  /// Runs are non-empty, ordered, disjoint, non-touching within a row, and
  /// inside a width x height frame.
  bool is_canonical(std::uint32_t width, std::uint32_t height) const {
    const std::uint64_t n = std::uint64_t{width} * height;
    for (std::size_t k = 0; k < runs_.size(); ++k) {
      const auto& r = runs_[k];
      if (r.length == 0 || std::uint64_t{r.start} + r.length > n) return false;
      if (r.start / width != (r.start + r.length - 1) / width) return false;
      if (k > 0) {
        const auto& p = runs_[k - 1];
        const std::uint64_t prev_end = std::uint64_t{p.start} + p.length;
        if (prev_end > r.start) return false;
        if (prev_end == r.start && r.start % width != 0) return false;
      }
    }
    return true;
  }

  friend bool operator==(const RleMask&, const RleMask&) = default;

 private:
  std::vector<Run> runs_;
};

/// Tight normalized box of a non-empty mask.
inline BBox tight_bbox(const RleMask& mask, std::uint32_t width, std::uint32_t height) {
  if (mask.empty()) throw std::invalid_argument("bounding box of an empty mask");
  std::uint32_t x0 = width, y0 = height, x1 = 0, y1 = 0;
  for (const auto& r : mask.runs()) {
    const std::uint32_t y = r.start / width, xa = r.start % width, xb = xa + r.length;
    x0 = std::min(x0, xa);
    x1 = std::max(x1, xb);
    y0 = std::min(y0, y);
    y1 = std::max(y1, y + 1);
  }
  auto norm = [](std::uint32_t v, std::uint32_t d) { return static_cast<float>(static_cast<double>(v) / d); };
  return {norm(x0, width), norm(y0, height), norm(x1, width), norm(y1, height)};
}

/// Per-label masks of a label map, indexed by label (entry 0 unused).
inline std::vector<RleMask> masks_from_label_map(const LabelMap& map) {
  std::vector<std::vector<Run>> runs(std::size_t{map.label_count()} + 1);
  const std::uint32_t w = map.width();
  for (std::size_t i = 0; i < map.pixel_count(); ++i) {
    auto& rs = runs[map[i]];
    if (!rs.empty() && rs.back().start + rs.back().length == i && i % w != 0)
      ++rs.back().length;
    else
      rs.push_back({static_cast<std::uint32_t>(i), 1});
  }
  std::vector<RleMask> out;
  out.reserve(runs.size());
  for (auto& r : runs) out.emplace_back(std::move(r));
  return out;
}

/// One object part over a contiguous frame span.
struct Trajectory {
  std::uint32_t id = 0;
  std::uint32_t span_start = 0;
  std::vector<RleMask> masks;  // one per span frame
  std::vector<BBox> boxes;     // tight box of each mask

  std::uint32_t span_length() const { return static_cast<std::uint32_t>(masks.size()); }
  std::uint32_t span_end() const { return span_start + span_length(); }
  bool active_at(std::size_t t) const { return t >= span_start && t < span_end(); }
  const RleMask& mask_at(std::size_t t) const { return masks.at(t - span_start); }
  const BBox& box_at(std::size_t t) const { return boxes.at(t - span_start); }

  friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

/// All trajectories of one video. Masks of the trajectories active at any
/// frame partition that frame.
struct TrajectorySet {
  std::uint32_t width = 0, height = 0, frame_count = 0;
  std::vector<Trajectory> trajectories;

  std::size_t size() const { return trajectories.size(); }
  std::size_t pixel_count() const { return std::size_t{width} * height; }

  friend bool operator==(const TrajectorySet&, const TrajectorySet&) = default;

  /// Throws InvariantError naming the offending trajectory id and frame.
  void validate() const {
    if (width == 0 || height == 0 || frame_count == 0) throw InvariantError("trajectory set has zero dimensions");
    std::unordered_set<std::uint32_t> ids;
    for (const auto& tr : trajectories) {
      const std::string where = "trajectory " + std::to_string(tr.id);
      if (!ids.insert(tr.id).second) throw InvariantError("duplicate " + where);
      if (tr.masks.empty()) throw InvariantError(where + " has an empty span");
      if (tr.masks.size() != tr.boxes.size()) throw InvariantError(where + " has mismatched mask and box counts");
      if (std::uint64_t{tr.span_start} + tr.masks.size() > frame_count)
        throw InvariantError(where + " extends past the last frame");
      for (std::size_t k = 0; k < tr.masks.size(); ++k) {
        const std::string at = where + " frame " + std::to_string(tr.span_start + k);
        if (tr.masks[k].empty()) throw InvariantError(at + ": empty mask");
        if (!tr.masks[k].is_canonical(width, height)) throw InvariantError(at + ": malformed runs");
        if (tight_bbox(tr.masks[k], width, height) != tr.boxes[k])
          throw InvariantError(at + ": box is not the tight box of its mask");
      }
    }
    std::vector<std::uint32_t> owner(pixel_count());
    for (std::uint32_t t = 0; t < frame_count; ++t) {
      std::fill(owner.begin(), owner.end(), 0);
      std::size_t covered = 0;
      for (std::size_t n = 0; n < trajectories.size(); ++n) {
        const auto& tr = trajectories[n];
        if (!tr.active_at(t)) continue;
        tr.mask_at(t).for_each_pixel([&](std::uint32_t i) {
          if (owner[i] != 0)
            throw InvariantError("panoptic violation at frame " + std::to_string(t) + ": trajectories " +
                                 std::to_string(trajectories[owner[i] - 1].id) + " and " + std::to_string(tr.id) +
                                 " overlap");
          owner[i] = static_cast<std::uint32_t>(n + 1);
          ++covered;
        });
      }
      if (covered != owner.size())
        throw InvariantError("panoptic violation at frame " + std::to_string(t) + ": " +
                             std::to_string(owner.size() - covered) + " pixels uncovered");
    }
  }

  /// Label map of frame t; label n+1 is trajectories[n].
  LabelMap label_map_at(std::size_t t) const {
    std::vector<std::uint32_t> labels(pixel_count(), 0);
    for (std::size_t n = 0; n < trajectories.size(); ++n)
      if (trajectories[n].active_at(t))
        trajectories[n].mask_at(t).for_each_pixel([&](std::uint32_t i) { labels[i] = static_cast<std::uint32_t>(n + 1); });
    return LabelMap(width, height, std::move(labels));
  }

  /// Trajectories active at frame t.
  std::size_t active_count(std::size_t t) const {
    return static_cast<std::size_t>(
        std::count_if(trajectories.begin(), trajectories.end(), [&](const Trajectory& tr) { return tr.active_at(t); }));
  }
};

inline Trajectory make_trajectory(std::uint32_t id, std::uint32_t span_start, std::vector<RleMask> masks,
                                  std::uint32_t width, std::uint32_t height) {
  Trajectory tr{id, span_start, std::move(masks), {}};
  for (const auto& m : tr.masks) tr.boxes.push_back(tight_bbox(m, width, height));
  return tr;
}

/// One length-one trajectory per segment of a single image.
inline TrajectorySet image_as_trajectory(const Frame& frame, const LabelMap& map) {
  if (frame.width() != map.width() || frame.height() != map.height())
    throw std::invalid_argument("label map does not match frame dimensions");
  map.validate();
  TrajectorySet set{frame.width(), frame.height(), 1, {}};
  auto masks = masks_from_label_map(map);
  for (std::uint32_t k = 1; k < masks.size(); ++k)
    set.trajectories.push_back(make_trajectory(k - 1, 0, {std::move(masks[k])}, map.width(), map.height()));
  return set;
}

/// Restricts a set to frames [start, start+length), re-basing frame indices.
inline TrajectorySet slice_trajectories(const TrajectorySet& set, std::uint32_t start, std::uint32_t length) {
  if (length == 0 || start + length > set.frame_count) throw std::invalid_argument("slice outside the video");
  TrajectorySet out{set.width, set.height, length, {}};
  for (const auto& tr : set.trajectories) {
    const std::uint32_t a = std::max(tr.span_start, start), b = std::min(tr.span_end(), start + length);
    if (a >= b) continue;
    Trajectory s{tr.id, a - start, {}, {}};
    for (std::uint32_t t = a; t < b; ++t) {
      s.masks.push_back(tr.mask_at(t));
      s.boxes.push_back(tr.box_at(t));
    }
    out.trajectories.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// .traj: "TRAJ" | u32 W | u32 H | u32 T | u32 N, then per trajectory
// u32 id | u32 span_start | u32 span_len, then per frame
// 4 x f32 box | u32 run_count | run_count x (u32 start, u32 len).

inline std::vector<std::uint8_t> encode_trajectories(const TrajectorySet& set) {
  detail::ByteWriter w;
  w.magic("TRAJ");
  w.u32(set.width);
  w.u32(set.height);
  w.u32(set.frame_count);
  w.u32(static_cast<std::uint32_t>(set.trajectories.size()));
  for (const auto& tr : set.trajectories) {
    w.u32(tr.id);
    w.u32(tr.span_start);
    w.u32(tr.span_length());
    for (std::size_t k = 0; k < tr.masks.size(); ++k) {
      const auto& b = tr.boxes[k];
      w.f32(b.x1);
      w.f32(b.y1);
      w.f32(b.x2);
      w.f32(b.y2);
      w.u32(static_cast<std::uint32_t>(tr.masks[k].runs().size()));
      for (const auto& r : tr.masks[k].runs()) {
        w.u32(r.start);
        w.u32(r.length);
      }
    }
  }
  return w.take();
}

inline TrajectorySet decode_trajectories(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, "traj");
  r.expect_magic("TRAJ");
  TrajectorySet set;
  set.width = r.u32("width");
  set.height = r.u32("height");
  set.frame_count = r.u32("frame count");
  const auto n = r.u32("trajectory count");
  const std::uint64_t pixels = std::uint64_t{set.width} * set.height;
  for (std::uint32_t k = 0; k < n; ++k) {
    Trajectory tr;
    tr.id = r.u32("trajectory id");
    tr.span_start = r.u32("span start");
    const auto len = r.u32("span length");
    if (std::uint64_t{tr.span_start} + len > set.frame_count)
      r.fail("trajectory " + std::to_string(tr.id) + " span exceeds frame count");
    for (std::uint32_t f = 0; f < len; ++f) {
      BBox b;
      b.x1 = r.f32("box");
      b.y1 = r.f32("box");
      b.x2 = r.f32("box");
      b.y2 = r.f32("box");
      const auto runs = r.u32("run count");
      if (runs > pixels) r.fail("run count exceeds pixel count");
      if (std::uint64_t{runs} * 8 > r.remaining())
        throw FormatError("traj: truncated mask payload of trajectory " + std::to_string(tr.id), r.offset());
      std::vector<Run> rs(runs);
      for (auto& run : rs) {
        run.start = r.u32("run start");
        run.length = r.u32("run length");
      }
      tr.masks.emplace_back(std::move(rs));
      tr.boxes.push_back(b);
    }
    set.trajectories.push_back(std::move(tr));
  }
  if (r.remaining() != 0) r.fail("trailing bytes");
  set.validate();
  return set;
}

inline void write_traj(const std::string& path, const TrajectorySet& set) {
  set.validate();
  detail::write_file(path, encode_trajectories(set));
}

inline TrajectorySet read_traj(const std::string& path) { return decode_trajectories(detail::read_file(path)); }

}  // namespace trajtok
