#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "trajtok/video_io.hpp"

namespace trajtok {

/// Thresholds of the three-detector shot-boundary ensemble.
struct KeyframeConfig {
  double hsv_threshold = 27.0;
  double luma_corr_threshold = 0.15;
  double rgb_threshold = 12.0;
  std::uint32_t luma_bins = 256;
  std::uint32_t min_votes = 2;

  void validate() const {
    if (min_votes < 1 || min_votes > 3) throw std::invalid_argument("min_votes must be 1, 2 or 3");
    if (luma_bins < 2) throw std::invalid_argument("luma_bins must be >= 2");
  }
};

/// Half-open frame range [start, end).
struct ClipRange {
  std::size_t start = 0;
  std::size_t end = 0;

  std::size_t length() const { return end - start; }
  friend bool operator==(const ClipRange&, const ClipRange&) = default;
};

/// Key frames (always starting with 0) and the clips they induce over [0, T).
class ClipPartition {
 public:
  ClipPartition(std::vector<std::size_t> keyframes, std::size_t frame_count)
      : keyframes_(std::move(keyframes)), frame_count_(frame_count) {
    if (keyframes_.empty() || keyframes_.front() != 0)
      throw std::invalid_argument("partition must start with key frame 0");
    for (std::size_t i = 1; i < keyframes_.size(); ++i)
      if (keyframes_[i] <= keyframes_[i - 1]) throw std::invalid_argument("key frames must be strictly increasing");
    if (keyframes_.back() >= frame_count_) throw std::invalid_argument("key frame beyond video end");
  }

  const std::vector<std::size_t>& keyframes() const { return keyframes_; }
  std::size_t frame_count() const { return frame_count_; }

  std::vector<ClipRange> clips() const {
    std::vector<ClipRange> out;
    for (std::size_t i = 0; i < keyframes_.size(); ++i)
      out.push_back({keyframes_[i], i + 1 < keyframes_.size() ? keyframes_[i + 1] : frame_count_});
    return out;
  }

  friend bool operator==(const ClipPartition&, const ClipPartition&) = default;

 private:
  std::vector<std::size_t> keyframes_;
  std::size_t frame_count_;
};

namespace detail {

inline void require_same_size(const Frame& a, const Frame& b) {
  if (!a.same_size(b)) throw std::invalid_argument("frame dimension mismatch");
}

struct Hsv {
  double h, s, v;  // all on a 0..255 scale; hue has period 256
};

inline Hsv to_hsv(Rgb c) {
  const double r = c.r, g = c.g, b = c.b;
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
  const double delta = mx - mn;
  double hue_deg = 0.0;
  if (delta > 0) {
    if (mx == r)
      hue_deg = 60.0 * (g - b) / delta;
    else if (mx == g)
      hue_deg = 120.0 + 60.0 * (b - r) / delta;
    else
      hue_deg = 240.0 + 60.0 * (r - g) / delta;
    if (hue_deg < 0) hue_deg += 360.0;
  }
  return {hue_deg * 256.0 / 360.0, mx > 0 ? 255.0 * delta / mx : 0.0, mx};
}

inline double luma(Rgb c) { return 0.299 * c.r + 0.587 * c.g + 0.114 * c.b; }

inline std::vector<double> luma_histogram(const Frame& f, std::uint32_t bins) {
  std::vector<double> h(bins, 0.0);
  for (std::size_t i = 0; i < f.pixel_count(); ++i) {
    // the epsilon keeps exact grays (0.299+0.587+0.114 rounds below 1) in their own bin
    auto bin = static_cast<std::size_t>(luma(f.at(i)) * bins / 256.0 + 1e-9);
    h[std::min<std::size_t>(bin, bins - 1)] += 1.0;
  }
  for (auto& v : h) v /= static_cast<double>(f.pixel_count());
  return h;
}

inline double mean_intensity(const Frame& f) {
  std::uint64_t sum = 0;
  for (auto b : f.bytes()) sum += b;
  return static_cast<double>(sum) / static_cast<double>(f.bytes().size());
}

}  // namespace detail

/// Mean absolute HSV difference over pixels and channels, hue on a
/// 256-periodic scale with wrap-around distance.
inline double hsv_score(const Frame& prev, const Frame& next) {
  detail::require_same_size(prev, next);
  double total = 0.0;
  for (std::size_t i = 0; i < prev.pixel_count(); ++i) {
    const auto a = detail::to_hsv(prev.at(i)), b = detail::to_hsv(next.at(i));
    const double dh = std::abs(a.h - b.h);
    total += std::min(dh, 256.0 - dh) + std::abs(a.s - b.s) + std::abs(a.v - b.v);
  }
  return total / (3.0 * static_cast<double>(prev.pixel_count()));
}

/// Pearson correlation of the normalized luma histograms. Zero-variance
/// histograms correlate as 1 when equal and 0 otherwise.
inline double luma_hist_corr(const Frame& prev, const Frame& next, std::uint32_t bins = 256) {
  detail::require_same_size(prev, next);
  if (bins < 2) throw std::invalid_argument("luma_bins must be >= 2");
  const auto a = detail::luma_histogram(prev, bins), b = detail::luma_histogram(next, bins);
  const double mean = 1.0 / bins;  // both histograms sum to one
  double cov = 0, va = 0, vb = 0;
  for (std::size_t i = 0; i < bins; ++i) {
    cov += (a[i] - mean) * (b[i] - mean);
    va += (a[i] - mean) * (a[i] - mean);
    vb += (b[i] - mean) * (b[i] - mean);
  }
  if (va == 0.0 || vb == 0.0) return a == b ? 1.0 : 0.0;
  return cov / std::sqrt(va * vb);
}

/// Absolute difference of the mean channel intensity.
inline double rgb_score(const Frame& prev, const Frame& next) {
  detail::require_same_size(prev, next);
  return std::abs(detail::mean_intensity(prev) - detail::mean_intensity(next));
}

struct DetectorVotes {
  double hsv = 0, luma_corr = 1, rgb = 0;

  int count(const KeyframeConfig& cfg) const {
    return int{hsv > cfg.hsv_threshold} + int{luma_corr < cfg.luma_corr_threshold} + int{rgb > cfg.rgb_threshold};
  }
};

inline DetectorVotes score_pair(const Frame& prev, const Frame& next, const KeyframeConfig& cfg) {
  return {hsv_score(prev, next), luma_hist_corr(prev, next, cfg.luma_bins), rgb_score(prev, next)};
}

/// Frame t >= 1 is a key frame when at least `min_votes` detectors fire on
/// the (t-1, t) pair; frame 0 always is.
inline ClipPartition detect_keyframes(const VideoClip& video, const KeyframeConfig& cfg = {}) {
  cfg.validate();
  std::vector<std::size_t> keys{0};
  for (std::size_t t = 1; t < video.frame_count(); ++t) {
    if (score_pair(video.frame(t - 1), video.frame(t), cfg).count(cfg) >= static_cast<int>(cfg.min_votes))
      keys.push_back(t);
  }
  return ClipPartition(std::move(keys), video.frame_count());
}

}  // namespace trajtok
