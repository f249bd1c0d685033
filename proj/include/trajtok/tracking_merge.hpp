#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <stdexcept>
#include <string>
#include <thread>
#include <tuple>
#include <utility>
#include <vector>

#include "trajtok/keyframe_detect.hpp"
#include "trajtok/segmentation.hpp"
#include "trajtok/trajectory_store.hpp"
#include "trajtok/video_io.hpp"

namespace trajtok {

enum class TrackerBackend { BuiltinFlow, External };

struct TrackerConfig {
  TrackerBackend backend = TrackerBackend::BuiltinFlow;
  std::size_t max_clip_length = 16;
  double merge_iou_threshold = 0.8;
  std::uint32_t search_radius = 4;
  std::uint32_t quantization_levels = 4;  // colour match used by the built-in tracker
  std::string external_dir;

  void validate() const {
    if (max_clip_length < 2) throw std::invalid_argument("max clip length must be >= 2");
    if (!(merge_iou_threshold > 0.0 && merge_iou_threshold <= 1.0))
      throw std::invalid_argument("merge IoU threshold must lie in (0, 1]");
    if (quantization_levels < 2) throw std::invalid_argument("tracker quantization levels must be >= 2");
  }
};

/// Label maps of one clip; label k denotes the same object on every frame.
struct ClipTrack {
  ClipRange range;
  std::vector<LabelMap> maps;  // maps[i] is frame range.start + i

  std::uint32_t label_count() const { return maps.front().label_count(); }
  friend bool operator==(const ClipTrack&, const ClipTrack&) = default;
};

/// Identity links between the last frame of clip i and the seed of clip i+1.
struct MergeDecision {
  std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs;  // (label in clip i, label in clip i+1)
  LabelMap propagated;                                           // clip i propagated onto the next clip's first frame
};

/// Bisects every clip longer than `max_clip_length` at its midpoint until all comply.
inline ClipPartition split_long_clips(const ClipPartition& partition, const TrackerConfig& cfg) {
  cfg.validate();
  std::vector<std::size_t> keys;
  auto split = [&](auto&& self, std::size_t s, std::size_t e) -> void {
    if (e - s > cfg.max_clip_length) {
      const std::size_t mid = s + (e - s) / 2;
      self(self, s, mid);
      self(self, mid, e);
    } else {
      keys.push_back(s);
    }
  };
  for (const auto& c : partition.clips()) split(split, c.start, c.end);
  return ClipPartition(std::move(keys), partition.frame_count());
}

namespace detail {

struct Shift {
  int dx = 0, dy = 0;
};

inline std::size_t wrap_index(std::size_t i, Shift d, std::uint32_t w, std::uint32_t h) {
  const std::int64_t x = static_cast<std::int64_t>(i % w) + d.dx, y = static_cast<std::int64_t>(i / w) + d.dy;
  const std::int64_t wx = (x % w + w) % w, wy = (y % h + h) % h;
  return static_cast<std::size_t>(wy * w + wx);
}

/// Assigns unlabelled (0) pixels. Same-colour 4-connected orphan groups go
/// to the adjacent label with the most colour-matching boundary edges, else
/// the most boundary edges overall; ties to the smaller label.
inline void repair_orphans(std::vector<std::uint32_t>& labels, std::span<const std::uint32_t> colour,
                           std::uint32_t w, std::uint32_t h) {
  while (true) {
    std::vector<std::uint32_t> keyed(labels.size());
    bool any = false;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      // Assigned pixels get a unique key so only orphans group together.
      keyed[i] = labels[i] == 0 ? colour[i] : ~std::uint32_t{0};
      any = any || labels[i] == 0;
    }
    if (!any) return;
    std::uint32_t count = 0;
    auto comp = connected_components(keyed, w, h, &count);
    struct Tally {
      std::map<std::uint32_t, std::uint64_t> matched, total;
    };
    std::vector<Tally> tally(count);
    for (std::uint32_t y = 0; y < h; ++y)
      for (std::uint32_t x = 0; x < w; ++x) {
        const std::size_t i = std::size_t{y} * w + x;
        if (labels[i] != 0) continue;
        auto edge = [&](std::size_t j) {
          if (labels[j] == 0) return;
          ++tally[comp[i]].total[labels[j]];
          if (colour[j] == colour[i]) ++tally[comp[i]].matched[labels[j]];
        };
        if (x > 0) edge(i - 1);
        if (x + 1 < w) edge(i + 1);
        if (y > 0) edge(i - w);
        if (y + 1 < h) edge(i + w);
      }
    std::vector<std::uint32_t> choice(count, 0);
    bool progressed = false;
    for (std::uint32_t c = 0; c < count; ++c) {
      const auto& src = tally[c].matched.empty() ? tally[c].total : tally[c].matched;
      std::uint64_t best = 0;
      for (const auto& [label, edges] : src)
        if (edges > best) {
          best = edges;
          choice[c] = label;
        }
      progressed = progressed || choice[c] != 0;
    }
    if (!progressed) throw std::logic_error("orphan repair cannot progress on a fully unlabelled frame");
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == 0) labels[i] = choice[comp[i]];
  }
}

}  // namespace detail

/// One step of the built-in tracker: moves every label of `prev_map` from
/// frame `prev` to frame `next` by its best integer translation (toroidal,
/// within the search radius), resolves conflicts, then repairs orphans so the
/// result stays panoptic with the same label set.
inline LabelMap propagate_step(const Frame& prev, const LabelMap& prev_map, const Frame& next,
                               const TrackerConfig& cfg) {
  if (!prev.same_size(next) || prev.width() != prev_map.width() || prev.height() != prev_map.height())
    throw std::invalid_argument("propagation inputs differ in size");
  const std::uint32_t w = prev.width(), h = prev.height();
  const auto qp = quantize(prev, cfg.quantization_levels), qn = quantize(next, cfg.quantization_levels);
  const std::uint32_t k_count = prev_map.label_count();

  std::vector<std::vector<std::uint32_t>> pixels(std::size_t{k_count} + 1);
  for (std::size_t i = 0; i < prev_map.pixel_count(); ++i) pixels[prev_map[i]].push_back(static_cast<std::uint32_t>(i));

  std::vector<detail::Shift> candidates;
  const int r = static_cast<int>(cfg.search_radius);
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx) candidates.push_back({dx, dy});
  // Preference among equal scores: smaller displacement, then raster order.
  std::stable_sort(candidates.begin(), candidates.end(), [](detail::Shift a, detail::Shift b) {
    return std::abs(a.dx) + std::abs(a.dy) < std::abs(b.dx) + std::abs(b.dy);
  });

  std::vector<detail::Shift> shift(std::size_t{k_count} + 1);
  std::vector<std::uint64_t> score(std::size_t{k_count} + 1, 0);
  for (std::uint32_t k = 1; k <= k_count; ++k) {
    bool first = true;
    for (const auto d : candidates) {
      std::uint64_t s = 0;
      for (auto p : pixels[k]) s += qn[detail::wrap_index(p, d, w, h)] == qp[p];
      if (first || s > score[k]) {
        score[k] = s;
        shift[k] = d;
        first = false;
      }
    }
  }

  // Claim priority: colour match, then label score, then smaller label.
  std::vector<std::uint32_t> labels(prev_map.pixel_count(), 0);
  std::vector<std::tuple<bool, std::uint64_t>> best(prev_map.pixel_count(), {false, 0});
  for (std::uint32_t k = 1; k <= k_count; ++k)
    for (auto p : pixels[k]) {
      const auto q = detail::wrap_index(p, shift[k], w, h);
      const std::tuple<bool, std::uint64_t> claim{qn[q] == qp[p], score[k]};
      if (labels[q] == 0 || claim > best[q]) {
        labels[q] = k;
        best[q] = claim;
      }
    }
  detail::repair_orphans(labels, qn, w, h);

  // Every label keeps at least one pixel: an emptied label takes the first
  // of its translated positions whose owner can spare it.
  std::vector<std::uint64_t> area(std::size_t{k_count} + 1, 0);
  for (auto l : labels) ++area[l];
  for (std::uint32_t k = 1; k <= k_count; ++k) {
    if (area[k] > 0) continue;
    std::vector<std::size_t> spots;
    for (auto p : pixels[k]) spots.push_back(detail::wrap_index(p, shift[k], w, h));
    std::sort(spots.begin(), spots.end());
    bool placed = false;
    for (auto q : spots)
      if (area[labels[q]] > 1) {
        --area[labels[q]];
        labels[q] = k;
        area[k] = 1;
        placed = true;
        break;
      }
    for (std::size_t q = 0; !placed && q < labels.size(); ++q)
      if (area[labels[q]] > 1) {
        --area[labels[q]];
        labels[q] = k;
        area[k] = 1;
        placed = true;
      }
  }
  return LabelMap(w, h, std::move(labels));
}

/// Propagates key-frame label maps through a clip.
class Tracker {
 public:
  virtual ~Tracker() = default;
  virtual ClipTrack track(const VideoClip& video, const LabelMap& seed, ClipRange range) const = 0;
  /// Label map of the clip propagated one frame past its end.
  virtual LabelMap propagate_past_end(const VideoClip& video, const ClipTrack& clip) const = 0;
};

namespace detail {

inline void check_track_inputs(const VideoClip& video, const LabelMap& seed, ClipRange range) {
  if (range.start >= range.end || range.end > video.frame_count()) throw std::out_of_range("clip range out of bounds");
  if (seed.width() != video.width() || seed.height() != video.height())
    throw std::invalid_argument("seed label map does not match the video dimensions");
}

}  // namespace detail

class BuiltinTracker final : public Tracker {
 public:
  explicit BuiltinTracker(TrackerConfig cfg = {}) : cfg_(std::move(cfg)) { cfg_.validate(); }

  ClipTrack track(const VideoClip& video, const LabelMap& seed, ClipRange range) const override {
    detail::check_track_inputs(video, seed, range);
    seed.validate();
    ClipTrack out{range, {seed}};
    for (std::size_t t = range.start + 1; t < range.end; ++t)
      out.maps.push_back(propagate_step(video.frame(t - 1), out.maps.back(), video.frame(t), cfg_));
    return out;
  }

  LabelMap propagate_past_end(const VideoClip& video, const ClipTrack& clip) const override {
    const std::size_t last = clip.range.end - 1;
    if (clip.range.end >= video.frame_count()) throw std::out_of_range("no frame after the clip");
    return propagate_step(video.frame(last), clip.maps.back(), video.frame(last + 1), cfg_);
  }

 private:
  TrackerConfig cfg_;
};

/// Reads propagated label maps written by an external tracker:
/// <dir>/clip_SSSSSS/frame_TTTTTT.lmap for t in (start, end]. Seeds are
/// written by write_tracker_requests as <dir>/clip_SSSSSS/seed.lmap.
class ExternalTracker final : public Tracker {
 public:
  explicit ExternalTracker(std::string dir) : dir_(std::move(dir)) {}

  static std::string clip_dir(const std::string& dir, std::size_t start) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "clip_%06zu", start);
    return dir + "/" + buf;
  }

  ClipTrack track(const VideoClip& video, const LabelMap& seed, ClipRange range) const override {
    detail::check_track_inputs(video, seed, range);
    ClipTrack out{range, {seed}};
    for (std::size_t t = range.start + 1; t < range.end; ++t) out.maps.push_back(load(video, seed, range.start, t));
    return out;
  }

  LabelMap propagate_past_end(const VideoClip& video, const ClipTrack& clip) const override {
    return load(video, clip.maps.front(), clip.range.start, clip.range.end);
  }

 private:
  LabelMap load(const VideoClip& video, const LabelMap& seed, std::size_t start, std::size_t t) const {
    const auto path = clip_dir(dir_, start) + "/" + frame_file_name(t);
    // External maps may drop labels (lost objects), so only the range is checked.
    const auto bytes = detail::read_file(path);
    detail::ByteReader r(bytes, "lmap");
    r.expect_magic("LMAP");
    const auto w = r.u32("width"), h = r.u32("height");
    r.u32("label count");
    if (w != video.width() || h != video.height()) throw std::invalid_argument(path + ": size mismatch");
    std::vector<std::uint32_t> labels(std::size_t{w} * h);
    for (auto& l : labels) {
      l = r.u32("labels");
      if (l == 0 || l > seed.label_count()) r.fail("label outside the seed's label set");
    }
    return LabelMap(w, h, std::move(labels));
  }

  std::string dir_;
};

inline void write_tracker_requests(const std::string& dir, const std::map<std::size_t, LabelMap>& seeds) {
  for (const auto& [start, seed] : seeds) {
    const auto d = ExternalTracker::clip_dir(dir, start);
    std::filesystem::create_directories(d);
    write_label_map(d + "/seed.lmap", seed);
  }
}

inline std::unique_ptr<Tracker> make_tracker(const TrackerConfig& cfg) {
  if (cfg.backend == TrackerBackend::External) return std::make_unique<ExternalTracker>(cfg.external_dir);
  return std::make_unique<BuiltinTracker>(cfg);
}

/// Runs `fn(i)` for i in [0, n) on up to `workers` threads.
template <class Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

/// Tracks every clip of `partition` concurrently. Output is ordered by clip
/// start and independent of the worker count.
inline std::vector<ClipTrack> track_clips_parallel(const VideoClip& video, const std::map<std::size_t, LabelMap>& seeds,
                                                   const ClipPartition& partition, const Tracker& tracker,
                                                   std::size_t workers) {
  if (workers == 0) throw std::invalid_argument("workers must be positive");
  const auto clips = partition.clips();
  for (const auto& c : clips)
    if (!seeds.contains(c.start)) throw std::invalid_argument("missing seed for clip starting at " + std::to_string(c.start));
  std::vector<ClipTrack> out(clips.size());
  parallel_for(clips.size(), workers, [&](std::size_t i) { out[i] = tracker.track(video, seeds.at(clips[i].start), clips[i]); });
  return out;
}

/// Greedy one-to-one matching of labels whose IoU strictly exceeds the
/// threshold, by descending IoU with earlier-label tie-break.
inline std::vector<std::pair<std::uint32_t, std::uint32_t>> match_by_iou(const LabelMap& a, const LabelMap& b,
                                                                        double threshold) {
  if (!a.same_size(b)) throw std::invalid_argument("label maps differ in size");
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::uint64_t> inter;
  for (std::size_t i = 0; i < a.pixel_count(); ++i) ++inter[{a[i], b[i]}];
  const auto area_a = a.areas(), area_b = b.areas();
  struct Candidate {
    double iou;
    std::uint32_t p, q;
  };
  std::vector<Candidate> cands;
  for (const auto& [pq, n] : inter) {
    const double iou = static_cast<double>(n) / static_cast<double>(area_a[pq.first] + area_b[pq.second] - n);
    if (iou > threshold) cands.push_back({iou, pq.first, pq.second});
  }
  std::sort(cands.begin(), cands.end(), [](const Candidate& x, const Candidate& y) {
    return std::tie(y.iou, x.p, x.q) < std::tie(x.iou, y.p, y.q);
  });
  std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs;
  std::vector<bool> used_a(area_a.size(), false), used_b(area_b.size(), false);
  for (const auto& c : cands) {
    if (used_a[c.p] || used_b[c.q]) continue;
    used_a[c.p] = used_b[c.q] = true;
    pairs.emplace_back(c.p, c.q);
  }
  std::sort(pairs.begin(), pairs.end());
  return pairs;
}

/// Links clip_a's objects to the seed of the clip starting at `next_start`
/// by propagating clip_a one frame forward and matching by IoU.
inline MergeDecision merge_consecutive(const ClipTrack& clip_a, std::size_t next_start, const LabelMap& next_seed,
                                       const VideoClip& video, const Tracker& tracker, const TrackerConfig& cfg) {
  if (clip_a.range.end != next_start) throw std::invalid_argument("clips are not adjacent");
  MergeDecision d;
  d.propagated = tracker.propagate_past_end(video, clip_a);
  d.pairs = match_by_iou(d.propagated, next_seed, cfg.merge_iou_threshold);
  return d;
}

namespace detail {

class DisjointSets {
 public:
  explicit DisjointSets(std::size_t n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), 0); }

  std::size_t find(std::size_t x) {
    while (parent_[x] != x) x = parent_[x] = parent_[parent_[x]];
    return x;
  }

  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent_[std::max(a, b)] = std::min(a, b);
  }

 private:
  std::vector<std::size_t> parent_;
};

}  // namespace detail

/// Links per-clip labels into trajectories. merges[i] connects clip i to clip
/// i+1. Ids follow first appearance (clip order, then label order). A label
/// whose mask vanishes ends its trajectory; reappearance starts a new one.
inline TrajectorySet assemble_trajectories(const std::vector<ClipTrack>& clips, const std::vector<MergeDecision>& merges) {
  if (clips.empty()) throw std::invalid_argument("no clips to assemble");
  if (merges.size() + 1 != clips.size()) throw std::invalid_argument("need exactly one merge decision per clip boundary");
  for (std::size_t i = 0; i + 1 < clips.size(); ++i)
    if (clips[i].range.end != clips[i + 1].range.start) throw std::invalid_argument("clips do not tile the video");
  if (clips.front().range.start != 0) throw std::invalid_argument("clips must start at frame 0");

  std::vector<std::size_t> offset(clips.size() + 1, 0);
  for (std::size_t i = 0; i < clips.size(); ++i) offset[i + 1] = offset[i] + clips[i].label_count() + 1;
  detail::DisjointSets sets(offset.back());
  for (std::size_t i = 0; i < merges.size(); ++i) {
    std::vector<bool> seen_a(clips[i].label_count() + 1, false), seen_b(clips[i + 1].label_count() + 1, false);
    for (auto [p, q] : merges[i].pairs) {
      if (p == 0 || q == 0 || p > clips[i].label_count() || q > clips[i + 1].label_count())
        throw std::invalid_argument("merge pair references an unknown label");
      if (seen_a[p] || seen_b[q]) throw std::invalid_argument("merge pairs are not injective");
      seen_a[p] = seen_b[q] = true;
      sets.unite(offset[i] + p, offset[i + 1] + q);
    }
  }

  const auto& first = clips.front().maps.front();
  const std::uint32_t w = first.width(), h = first.height();
  TrajectorySet set{w, h, static_cast<std::uint32_t>(clips.back().range.end), {}};

  struct Open {
    std::size_t set_index;
    std::uint32_t last_frame;
  };
  std::map<std::size_t, Open> open;  // root -> trajectory being extended
  std::uint32_t next_id = 0;
  for (std::size_t c = 0; c < clips.size(); ++c) {
    for (std::size_t f = 0; f < clips[c].maps.size(); ++f) {
      const auto t = static_cast<std::uint32_t>(clips[c].range.start + f);
      auto masks = masks_from_label_map(clips[c].maps[f]);
      for (std::uint32_t k = 1; k <= clips[c].label_count(); ++k) {
        if (k >= masks.size() || masks[k].empty()) continue;
        const std::size_t root = sets.find(offset[c] + k);
        auto it = open.find(root);
        if (it == open.end() || it->second.last_frame + 1 != t) {
          set.trajectories.push_back(Trajectory{next_id++, t, {}, {}});
          it = open.insert_or_assign(root, Open{set.trajectories.size() - 1, t}).first;
        }
        auto& tr = set.trajectories[it->second.set_index];
        tr.boxes.push_back(tight_bbox(masks[k], w, h));
        tr.masks.push_back(std::move(masks[k]));
        it->second.last_frame = t;
      }
    }
  }
  return set;
}

// ---------------------------------------------------------------------------

enum class AblationMode { Full, SegmentationOnly, TrackingOnly };

struct PipelineConfig {
  KeyframeConfig keyframes;
  SegmenterConfig segmenter;
  TrackerConfig tracker;
  std::size_t workers = 1;
  AblationMode mode = AblationMode::Full;
  std::uint32_t patch_size = 16;  // tracking-only seed tiles
};

/// Seed map tiling the frame into patch x patch squares, raster-ordered labels.
inline LabelMap patch_grid_labels(std::uint32_t width, std::uint32_t height, std::uint32_t patch) {
  if (patch == 0) throw std::invalid_argument("patch size must be positive");
  const std::uint32_t cols = (width + patch - 1) / patch;
  std::vector<std::uint32_t> labels(std::size_t{width} * height);
  for (std::uint32_t y = 0; y < height; ++y)
    for (std::uint32_t x = 0; x < width; ++x) labels[std::size_t{y} * width + x] = (y / patch) * cols + x / patch + 1;
  return LabelMap(width, height, std::move(labels));
}

/// Split-track-merge: key frames, midpoint splitting, per-clip seeding and
/// parallel tracking, then IoU merging across clip boundaries.
inline TrajectorySet generate_trajectories(const VideoClip& video, const Segmenter& segmenter, const Tracker& tracker,
                                           const PipelineConfig& cfg) {
  cfg.tracker.validate();
  if (cfg.mode == AblationMode::SegmentationOnly) {
    TrajectorySet set{video.width(), video.height(), static_cast<std::uint32_t>(video.frame_count()), {}};
    std::uint32_t id = 0;
    for (std::size_t t = 0; t < video.frame_count(); ++t) {
      auto masks = masks_from_label_map(segmenter.segment(video, t));
      for (std::uint32_t k = 1; k < masks.size(); ++k)
        set.trajectories.push_back(make_trajectory(id++, static_cast<std::uint32_t>(t), {std::move(masks[k])},
                                                   video.width(), video.height()));
    }
    return set;
  }

  const ClipPartition keys = cfg.mode == AblationMode::TrackingOnly ? ClipPartition({0}, video.frame_count())
                                                                   : detect_keyframes(video, cfg.keyframes);
  const ClipPartition partition = split_long_clips(keys, cfg.tracker);
  const auto clips = partition.clips();

  std::map<std::size_t, LabelMap> seeds;
  for (const auto& c : clips) seeds.emplace(c.start, LabelMap{});
  parallel_for(clips.size(), cfg.workers, [&](std::size_t i) {
    const auto start = clips[i].start;
    seeds.at(start) = cfg.mode == AblationMode::TrackingOnly
                          ? patch_grid_labels(video.width(), video.height(), cfg.patch_size)
                          : segmenter.segment(video, start);
  });

  const auto tracks = track_clips_parallel(video, seeds, partition, tracker, cfg.workers);
  std::vector<MergeDecision> merges(tracks.size() - 1);
  parallel_for(merges.size(), cfg.workers, [&](std::size_t i) {
    merges[i] = merge_consecutive(tracks[i], tracks[i + 1].range.start, seeds.at(tracks[i + 1].range.start), video,
                                  tracker, cfg.tracker);
  });
  return assemble_trajectories(tracks, merges);
}

inline TrajectorySet generate_trajectories(const VideoClip& video, const PipelineConfig& cfg = {}) {
  const auto segmenter = make_segmenter(cfg.segmenter);
  const auto tracker = make_tracker(cfg.tracker);
  return generate_trajectories(video, *segmenter, *tracker, cfg);
}

}  // namespace trajtok
