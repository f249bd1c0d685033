#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "trajtok/binary_io.hpp"

namespace trajtok {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

/// One RGB8 frame, row-major, interleaved channels.
class Frame {
 public:
  Frame() = default;

  Frame(std::uint32_t width, std::uint32_t height, Rgb fill = {})
      : width_(width), height_(height), pixels_(std::size_t{width} * height * 3) {
    if (width == 0 || height == 0) throw std::invalid_argument("frame dimensions must be positive");
    for (std::size_t i = 0; i < std::size_t{width} * height; ++i) set(i, fill);
  }

  Frame(std::uint32_t width, std::uint32_t height, std::vector<std::uint8_t> pixels)
      : width_(width), height_(height), pixels_(std::move(pixels)) {
    if (width == 0 || height == 0) throw std::invalid_argument("frame dimensions must be positive");
    if (pixels_.size() != std::size_t{width} * height * 3)
      throw std::invalid_argument("pixel buffer length must be width*height*3");
  }

  std::uint32_t width() const { return width_; }
  std::uint32_t height() const { return height_; }
  std::size_t pixel_count() const { return std::size_t{width_} * height_; }

  Rgb at(std::uint32_t x, std::uint32_t y) const { return at(std::size_t{y} * width_ + x); }
  Rgb at(std::size_t i) const { return {pixels_[3 * i], pixels_[3 * i + 1], pixels_[3 * i + 2]}; }

  void set(std::uint32_t x, std::uint32_t y, Rgb c) { set(std::size_t{y} * width_ + x, c); }
  void set(std::size_t i, Rgb c) {
    pixels_[3 * i] = c.r;
    pixels_[3 * i + 1] = c.g;
    pixels_[3 * i + 2] = c.b;
  }

  std::span<const std::uint8_t> bytes() const { return pixels_; }

  bool same_size(const Frame& o) const { return width_ == o.width_ && height_ == o.height_; }

  friend bool operator==(const Frame&, const Frame&) = default;

 private:
  std::uint32_t width_ = 0, height_ = 0;
  std::vector<std::uint8_t> pixels_;
};

/// Ordered frames sharing one resolution, with an integral frame rate.
class VideoClip {
 public:
  VideoClip(std::vector<Frame> frames, std::uint32_t fps) : frames_(std::move(frames)), fps_(fps) {
    if (frames_.empty()) throw std::invalid_argument("video must contain at least one frame");
    if (fps_ == 0) throw std::invalid_argument("fps must be positive");
    for (const auto& f : frames_)
      if (!f.same_size(frames_.front()))
        throw std::invalid_argument("all frames of a video must share width and height");
  }

  std::size_t frame_count() const { return frames_.size(); }
  std::uint32_t width() const { return frames_.front().width(); }
  std::uint32_t height() const { return frames_.front().height(); }
  std::uint32_t fps() const { return fps_; }

  const Frame& frame(std::size_t t) const { return frames_.at(t); }
  const std::vector<Frame>& frames() const { return frames_; }

  friend bool operator==(const VideoClip&, const VideoClip&) = default;

 private:
  std::vector<Frame> frames_;
  std::uint32_t fps_;
};

// ---------------------------------------------------------------------------
// .rvid container: "RVID" | u32 width | u32 height | u32 frame_count | u32 fps,
// then frame-major interleaved RGB bytes.

inline constexpr std::size_t kRvidHeaderBytes = 20;

inline std::vector<std::uint8_t> encode_raw_video(const VideoClip& video) {
  detail::ByteWriter w;
  w.magic("RVID");
  w.u32(video.width());
  w.u32(video.height());
  w.u32(static_cast<std::uint32_t>(video.frame_count()));
  w.u32(video.fps());
  for (const auto& f : video.frames()) w.raw(f.bytes());
  return w.take();
}

inline VideoClip decode_raw_video(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, "rvid");
  r.expect_magic("RVID");
  const auto width = r.u32("width");
  const auto height = r.u32("height");
  const std::size_t frames_offset = r.offset();
  const auto count = r.u32("frame_count");
  const auto fps = r.u32("fps");
  if (width == 0 || height == 0) throw FormatError("rvid: zero width or height", 4);
  if (count == 0) throw FormatError("rvid: zero frames", frames_offset);
  if (fps == 0) throw FormatError("rvid: zero fps", frames_offset + 4);
  const std::size_t frame_bytes = std::size_t{width} * height * 3;
  std::vector<Frame> frames;
  frames.reserve(count);
  for (std::uint32_t t = 0; t < count; ++t) {
    auto payload = r.raw(frame_bytes, "pixel payload of frame " + std::to_string(t));
    frames.emplace_back(width, height, std::vector<std::uint8_t>(payload.begin(), payload.end()));
  }
  if (r.remaining() != 0) r.fail("trailing bytes after declared frames");
  return VideoClip(std::move(frames), fps);
}

inline VideoClip load_raw_video(const std::string& path) {
  return decode_raw_video(detail::read_file(path));
}

inline void write_raw_video(const std::string& path, const VideoClip& video) {
  detail::write_file(path, encode_raw_video(video));
}

// ---------------------------------------------------------------------------
// Binary PPM (P6) frames, used for the image-directory loader and overlays.

inline void write_ppm(const std::string& path, const Frame& frame) {
  std::ostringstream header;
  header << "P6\n" << frame.width() << ' ' << frame.height() << "\n255\n";
  const auto h = header.str();
  std::vector<std::uint8_t> bytes(h.begin(), h.end());
  bytes.insert(bytes.end(), frame.bytes().begin(), frame.bytes().end());
  detail::write_file(path, bytes);
}

inline Frame read_ppm(const std::string& path) {
  const auto bytes = detail::read_file(path);
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) t.push_back(static_cast<char>(bytes[pos++]));
    return t;
  };
  if (token() != "P6") throw FormatError("ppm: only binary P6 is supported", 0);
  const auto w = static_cast<std::uint32_t>(std::stoul(token()));
  const auto h = static_cast<std::uint32_t>(std::stoul(token()));
  if (token() != "255") throw FormatError("ppm: only maxval 255 is supported", pos);
  ++pos;  // single whitespace before payload
  const std::size_t n = std::size_t{w} * h * 3;
  if (bytes.size() < pos + n) throw FormatError("ppm: truncated pixel payload", bytes.size());
  return Frame(w, h, std::vector<std::uint8_t>(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                               bytes.begin() + static_cast<std::ptrdiff_t>(pos + n)));
}

/// Loads every *.ppm in `dir` in lexicographic filename order.
inline VideoClip load_image_directory(const std::string& dir, std::uint32_t fps) {
  std::vector<std::filesystem::path> paths;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".ppm") paths.push_back(e.path());
  std::sort(paths.begin(), paths.end());
  std::vector<Frame> frames;
  for (const auto& p : paths) frames.push_back(read_ppm(p.string()));
  return VideoClip(std::move(frames), fps);
}

/// Contiguous window of `length` frames with a uniformly drawn start.
inline VideoClip sample_clip(const VideoClip& video, std::size_t length, std::uint64_t seed,
                             std::size_t* start_out = nullptr) {
  if (length == 0) throw std::invalid_argument("sample length must be positive");
  if (length >= video.frame_count()) {
    if (start_out) *start_out = 0;
    return video;
  }
  std::mt19937_64 rng(seed);
  const std::size_t start = rng() % (video.frame_count() - length + 1);
  if (start_out) *start_out = start;
  std::vector<Frame> frames(video.frames().begin() + static_cast<std::ptrdiff_t>(start),
                            video.frames().begin() + static_cast<std::ptrdiff_t>(start + length));
  return VideoClip(std::move(frames), video.fps());
}

// ---------------------------------------------------------------------------
// Synthetic scenes.

enum class SceneKind { StaticBlocks, MovingBlocks, HardCut, CameraPan };

inline std::string to_string(SceneKind k) {
  switch (k) {
    case SceneKind::StaticBlocks: return "static-blocks";
    case SceneKind::MovingBlocks: return "moving-blocks";
    case SceneKind::HardCut: return "hard-cut";
    case SceneKind::CameraPan: return "camera-pan";
  }
  return "unknown";
}

inline SceneKind parse_scene_kind(const std::string& s) {
  if (s == "static-blocks" || s == "static") return SceneKind::StaticBlocks;
  if (s == "moving-blocks" || s == "moving") return SceneKind::MovingBlocks;
  if (s == "hard-cut" || s == "cut") return SceneKind::HardCut;
  if (s == "camera-pan" || s == "pan") return SceneKind::CameraPan;
  throw std::invalid_argument("unsupported scene kind: " + s);
}

struct SyntheticSpec {
  SceneKind kind = SceneKind::StaticBlocks;
  std::uint32_t objects = 4;
  std::uint32_t frames = 16;
  std::uint32_t width = 64;
  std::uint32_t height = 64;
  std::uint64_t seed = 0;
  std::uint32_t fps = 4;
  std::uint32_t pan_speed = 2;  // camera-pan: pixels per frame, rightwards with wrap
  std::uint32_t cut_frame = 0;  // hard-cut: 0 selects frames / 2
  // When non-empty, overrides the seeded palette: [0] is the background.
  std::vector<Rgb> palette;
};

/// Axis-aligned block placed by the synthesizer (pixel units, half-open).
struct Block {
  std::uint32_t x = 0, y = 0, w = 0, h = 0;
};

namespace detail {

// Channel levels chosen so uniform quantizers nest on them: 2 and 3 levels
// both split {16, 80} from {176, 240}, and 4 or more keep all four apart.
inline constexpr std::array<std::uint8_t, 4> kLevels = {16, 80, 176, 240};

inline std::vector<Rgb> palette_from(std::span<const std::uint8_t> levels, std::size_t count,
                                     std::mt19937_64& rng) {
  std::vector<Rgb> all;
  for (auto r : levels)
    for (auto g : levels)
      for (auto b : levels) all.push_back({r, g, b});
  if (count > all.size()) throw std::invalid_argument("too many objects for the palette");
  for (std::size_t i = all.size() - 1; i > 0; --i) std::swap(all[i], all[rng() % (i + 1)]);
  all.resize(count);
  return all;
}

struct Layout {
  std::uint32_t grid = 1, cell_w = 0, cell_h = 0, margin = 2;
  std::vector<Block> blocks;
  std::vector<Block> cells;
};

inline Layout make_layout(const SyntheticSpec& spec, std::mt19937_64& rng) {
  Layout l;
  while (l.grid * l.grid < spec.objects) ++l.grid;
  l.cell_w = spec.width / l.grid;
  l.cell_h = spec.height / l.grid;
  const std::uint32_t min_side = 4;
  if (spec.objects > 0 && (l.cell_w < 2 * l.margin + min_side + 1 || l.cell_h < 2 * l.margin + min_side + 1))
    throw std::invalid_argument("resolution too small for the requested object count");
  for (std::uint32_t i = 0; i < spec.objects; ++i) {
    const std::uint32_t cx = (i % l.grid) * l.cell_w, cy = (i / l.grid) * l.cell_h;
    const std::uint32_t max_w = l.cell_w - 2 * l.margin - 1, max_h = l.cell_h - 2 * l.margin - 1;
    const std::uint32_t lo_w = std::max(min_side, max_w / 2), lo_h = std::max(min_side, max_h / 2);
    Block b;
    b.w = lo_w + static_cast<std::uint32_t>(rng() % (max_w - lo_w + 1));
    b.h = lo_h + static_cast<std::uint32_t>(rng() % (max_h - lo_h + 1));
    const std::uint32_t span_x = l.cell_w - 2 * l.margin - b.w, span_y = l.cell_h - 2 * l.margin - b.h;
    b.x = cx + l.margin + static_cast<std::uint32_t>(rng() % (span_x + 1));
    b.y = cy + l.margin + static_cast<std::uint32_t>(rng() % (span_y + 1));
    l.blocks.push_back(b);
    l.cells.push_back({cx, cy, l.cell_w, l.cell_h});
  }
  return l;
}

inline Frame render(const SyntheticSpec& spec, const std::vector<Block>& blocks, const std::vector<Rgb>& palette) {
  Frame f(spec.width, spec.height, palette[0]);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    for (std::uint32_t y = b.y; y < b.y + b.h; ++y)
      for (std::uint32_t x = b.x; x < b.x + b.w; ++x) f.set(x, y, palette[i + 1]);
  }
  return f;
}

inline Frame shift_horizontal(const Frame& src, std::int64_t dx) {
  Frame out(src.width(), src.height());
  const std::int64_t w = src.width();
  for (std::uint32_t y = 0; y < src.height(); ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const auto sx = static_cast<std::uint32_t>(((x - dx) % w + w) % w);
      out.set(static_cast<std::uint32_t>(x), y, src.at(sx, y));
    }
  return out;
}

}  // namespace detail

/// Builds a deterministic synthetic video. Identical specs give identical bytes.
inline VideoClip synthesize_video(const SyntheticSpec& spec) {
  if (spec.frames == 0 || spec.frames > 256) throw std::invalid_argument("frames must be in [1, 256]");
  if (spec.width == 0 || spec.height == 0 || spec.width > 256 || spec.height > 256)
    throw std::invalid_argument("resolution must be within 256x256");
  std::mt19937_64 rng(spec.seed);
  const std::size_t colours = spec.objects + 1;

  std::vector<Rgb> palette = spec.palette;
  std::vector<Rgb> palette_after;
  if (spec.kind == SceneKind::HardCut) {
    if (colours > 8) throw std::invalid_argument("hard-cut supports at most 7 objects");
    const std::array<std::uint8_t, 2> dark = {16, 80}, bright = {176, 240};
    if (palette.empty()) palette = detail::palette_from(dark, colours, rng);
    palette_after = detail::palette_from(bright, colours, rng);
  } else if (palette.empty()) {
    palette = detail::palette_from(detail::kLevels, colours, rng);
  }
  if (palette.size() < colours) throw std::invalid_argument("palette override too short");

  auto layout = detail::make_layout(spec, rng);
  std::vector<Frame> frames;
  frames.reserve(spec.frames);

  switch (spec.kind) {
    case SceneKind::StaticBlocks: {
      const Frame f = detail::render(spec, layout.blocks, palette);
      frames.assign(spec.frames, f);
      break;
    }
    case SceneKind::HardCut: {
      const std::uint32_t cut = spec.cut_frame == 0 ? spec.frames / 2 : spec.cut_frame;
      if (cut == 0 || cut >= spec.frames) throw std::invalid_argument("cut frame must lie in [1, frames)");
      const Frame before = detail::render(spec, layout.blocks, palette);
      const Frame after = detail::render(spec, layout.blocks, palette_after);
      for (std::uint32_t t = 0; t < spec.frames; ++t) frames.push_back(t < cut ? before : after);
      break;
    }
    case SceneKind::CameraPan: {
      const Frame base = detail::render(spec, layout.blocks, palette);
      for (std::uint32_t t = 0; t < spec.frames; ++t)
        frames.push_back(detail::shift_horizontal(base, static_cast<std::int64_t>(spec.pan_speed) * t));
      break;
    }
    case SceneKind::MovingBlocks: {
      struct Motion {
        int vx, vy;
      };
      std::vector<Motion> motion;
      for (std::size_t i = 0; i < layout.blocks.size(); ++i) {
        Motion m{0, 0};
        while (m.vx == 0 && m.vy == 0) {
          m.vx = static_cast<int>(rng() % 3) - 1;
          m.vy = static_cast<int>(rng() % 3) - 1;
        }
        motion.push_back(m);
      }
      auto blocks = layout.blocks;
      for (std::uint32_t t = 0; t < spec.frames; ++t) {
        frames.push_back(detail::render(spec, blocks, palette));
        for (std::size_t i = 0; i < blocks.size(); ++i) {
          const auto& c = layout.cells[i];
          auto step = [&](std::uint32_t& pos, int& v, std::uint32_t lo, std::uint32_t hi) {
            if (hi <= lo) {
              v = 0;
              return;
            }
            auto next = static_cast<std::int64_t>(pos) + v;
            if (next < lo || next > hi) {
              v = -v;
              next = static_cast<std::int64_t>(pos) + v;
            }
            pos = static_cast<std::uint32_t>(next);
          };
          step(blocks[i].x, motion[i].vx, c.x + layout.margin, c.x + c.w - layout.margin - 1 - blocks[i].w);
          step(blocks[i].y, motion[i].vy, c.y + layout.margin, c.y + c.h - layout.margin - 1 - blocks[i].h);
        }
      }
      break;
    }
  }
  return VideoClip(std::move(frames), spec.fps);
}

}  // namespace trajtok
