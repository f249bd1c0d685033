#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "trajtok/tracking_merge.hpp"
#include "trajtok/trajectory_encoder.hpp"
#include "trajtok/trajectory_store.hpp"
#include "trajtok/video_io.hpp"

namespace trajtok {

/// Space-time patch count (H/p)(W/p)(T/tubelet).
inline std::uint64_t patch_token_count(std::uint64_t frames, std::uint64_t height, std::uint64_t width,
                                       std::uint64_t patch, std::uint64_t tubelet = 1) {
  if (patch == 0 || tubelet == 0) throw std::invalid_argument("patch and tubelet must be positive");
  if (height % patch || width % patch) throw std::invalid_argument("frame size must be divisible by the patch size");
  if (frames % tubelet) throw std::invalid_argument("frame count must be divisible by the tubelet size");
  return (height / patch) * (width / patch) * (frames / tubelet);
}

inline constexpr const char* kTransformerFlopsFormula = "L*(4*N*d^2 + 2*N^2*d + 8*N*d^2)";

/// Transformer cost per forward pass: attention projections, attention
/// matrix, and a 4x feed-forward, counted as multiply-adds x 2 where it applies.
inline double transformer_flops(double tokens, double width, double depth) {
  if (tokens < 0 || width <= 0 || depth <= 0) throw std::invalid_argument("transformer_flops: bad arguments");
  const double n = tokens, d = width;
  return depth * (4 * n * d * d + 2 * n * n * d + 8 * n * d * d);
}

struct TransformerShape {
  double width = 1024;
  double depth = 24;
};

/// Trajectory encoder cost: backbone and projections once per frame, then
/// pooling, two resamplers and the token MLP per (trajectory, span frame).
inline double trajectory_tokenizer_flops(const EncoderConfig& cfg, std::size_t frames,
                                         const std::vector<std::size_t>& span_lengths) {
  const double S = double(cfg.input_side);
  const auto& w = cfg.stage_widths;
  double per_frame = 2.0 * (S / 2) * (S / 2) * double(w[0]) * 3 * 9;
  for (std::size_t s = 0; s < cfg.stages; ++s) {
    const double side = double(cfg.stage_side(s));
    const double in = double(s == 0 ? w[0] : w[s - 1]);
    per_frame += 2.0 * side * side * double(w[s]) * in * 9;
    per_frame += 2.0 * side * side * double(cfg.feature_dim) * double(w[s]);
  }
  const double g = double(cfg.grid_side()), d = double(cfg.feature_dim);
  per_frame += double(cfg.stages) * g * g * d * 8;  // bilinear taps + sum
  double total = per_frame * double(frames);
  const double hidden = double(cfg.ffn_multiplier) * d, dm = double(cfg.model_dim);
  for (std::size_t len : span_lengths) {
    const double L = double(len);
    double track = L * 2 * g * g * d;  // mask pooling
    const double layer = 2 * d * d + 2 * 2 * L * d * d + 2 * 2 * L * d + 2 * d * d + 2 * 2 * d * hidden;
    track += 2 * double(cfg.resampler_layers) * layer;
    track += 2 * d * dm + 2 * dm * dm;
    total += track;
  }
  return total;
}

/// Linear patch embedding cost for space-time patches.
inline double patch_tokenizer_flops(std::uint64_t tokens, std::uint64_t patch, std::uint64_t tubelet, double width) {
  return 2.0 * double(tokens) * double(patch * patch * tubelet * 3) * width;
}

enum class BenchMethod { Trajectory, Patch3d, SegmentationOnly, TrackingOnly };

inline std::string to_string(BenchMethod m) {
  switch (m) {
    case BenchMethod::Trajectory: return "trajectory";
    case BenchMethod::Patch3d: return "patch3d";
    case BenchMethod::SegmentationOnly: return "segmentation-only";
    case BenchMethod::TrackingOnly: return "tracking-only";
  }
  return "?";
}

inline BenchMethod parse_bench_method(const std::string& s) {
  for (auto m : {BenchMethod::Trajectory, BenchMethod::Patch3d, BenchMethod::SegmentationOnly, BenchMethod::TrackingOnly})
    if (to_string(m) == s) return m;
  throw std::invalid_argument("unknown method: " + s);
}

inline AblationMode parse_ablation_mode(const std::string& s) {
  if (s == "full") return AblationMode::Full;
  if (s == "segmentation-only") return AblationMode::SegmentationOnly;
  if (s == "tracking-only") return AblationMode::TrackingOnly;
  throw std::invalid_argument("unknown ablation mode: " + s);
}

/// Tokenizer front end under one ablation mode.
inline TrajectorySet run_ablation_tokenizer(const VideoClip& video, AblationMode mode, PipelineConfig cfg = {}) {
  cfg.mode = mode;
  return generate_trajectories(video, cfg);
}

struct TokenBudgetReport {
  BenchMethod method = BenchMethod::Trajectory;
  std::size_t frames = 0;
  std::uint64_t tokens = 0;
  double transformer_flops = 0;
  double tokenizer_flops = 0;
  double wall_ms = 0;
};

struct BenchConfig {
  std::uint32_t patch = 16;
  std::uint32_t tubelet = 1;
  TransformerShape transformer;
  EncoderConfig encoder;
  PipelineConfig pipeline;
};

inline TokenBudgetReport measure(const VideoClip& video, BenchMethod method, const BenchConfig& cfg) {
  TokenBudgetReport r;
  r.method = method;
  r.frames = video.frame_count();
  const auto t0 = std::chrono::steady_clock::now();
  if (method == BenchMethod::Patch3d) {
    r.tokens = patch_token_count(video.frame_count(), video.height(), video.width(), cfg.patch, cfg.tubelet);
    r.tokenizer_flops = patch_tokenizer_flops(r.tokens, cfg.patch, cfg.tubelet, cfg.transformer.width);
  } else {
    const auto mode = method == BenchMethod::Trajectory         ? AblationMode::Full
                      : method == BenchMethod::SegmentationOnly ? AblationMode::SegmentationOnly
                                                                : AblationMode::TrackingOnly;
    auto pipeline = cfg.pipeline;
    pipeline.patch_size = cfg.patch;
    const auto set = run_ablation_tokenizer(video, mode, pipeline);
    r.tokens = set.size();
    std::vector<std::size_t> spans;
    for (const auto& tr : set.trajectories) spans.push_back(tr.span_length());
    r.tokenizer_flops = trajectory_tokenizer_flops(cfg.encoder, video.frame_count(), spans);
  }
  r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  r.transformer_flops = transformer_flops(double(r.tokens), cfg.transformer.width, cfg.transformer.depth);
  return r;
}

/// One report per (method, T), methods sequential so timings do not overlap.
inline std::vector<TokenBudgetReport> bench_frames(SyntheticSpec family, const std::vector<std::uint32_t>& frame_counts,
                                                   const std::vector<BenchMethod>& methods, const BenchConfig& cfg = {}) {
  std::vector<TokenBudgetReport> out;
  for (auto t : frame_counts) {
    family.frames = t;
    const auto video = synthesize_video(family);
    for (auto m : methods) out.push_back(measure(video, m, cfg));
  }
  return out;
}

inline std::string bench_csv(const std::vector<TokenBudgetReport>& rows) {
  std::ostringstream out;
  out.precision(12);
  out << "method,T,tokens,transformer_flops,tokenizer_flops,wall_ms\n";
  for (const auto& r : rows)
    out << to_string(r.method) << ',' << r.frames << ',' << r.tokens << ',' << r.transformer_flops << ','
        << r.tokenizer_flops << ',' << r.wall_ms << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// Overlays

/// Stable colour for a trajectory id (splitmix64 finalizer, channels kept bright).
inline Rgb trajectory_colour(std::uint32_t id) {
  std::uint64_t z = std::uint64_t{id} + 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  z ^= z >> 31;
  auto ch = [&](int shift) { return static_cast<std::uint8_t>(64 + ((z >> shift) & 0xff) * 191 / 255); };
  return {ch(0), ch(8), ch(16)};
}

/// Frame t blended half-and-half with its trajectory colours; pixels whose
/// 4-neighbour belongs to another trajectory are painted solid.
inline Frame overlay_frame(const Frame& frame, const TrajectorySet& trajs, std::size_t t) {
  const auto map = trajs.label_map_at(t);
  if (map.width() != frame.width() || map.height() != frame.height())
    throw std::invalid_argument("overlay: trajectories do not match the frame size");
  Frame out = frame;
  const auto w = frame.width(), h = frame.height();
  for (std::uint32_t y = 0; y < h; ++y)
    for (std::uint32_t x = 0; x < w; ++x) {
      const auto label = map.at(x, y);
      if (label == 0) continue;
      const Rgb c = trajectory_colour(trajs.trajectories[label - 1].id);
      const bool edge = (x > 0 && map.at(x - 1, y) != label) || (x + 1 < w && map.at(x + 1, y) != label) ||
                        (y > 0 && map.at(x, y - 1) != label) || (y + 1 < h && map.at(x, y + 1) != label);
      const Rgb p = frame.at(x, y);
      out.set(x, y, edge ? c
                         : Rgb{static_cast<std::uint8_t>((p.r + c.r) / 2), static_cast<std::uint8_t>((p.g + c.g) / 2),
                               static_cast<std::uint8_t>((p.b + c.b) / 2)});
    }
  return out;
}

/// Writes frame_%06d.ppm overlays; returns the written paths.
inline std::vector<std::string> render_overlay(const VideoClip& video, const TrajectorySet& trajs, const std::string& dir) {
  if (trajs.frame_count != video.frame_count() || trajs.width != video.width() || trajs.height != video.height())
    throw std::invalid_argument("overlay: trajectories do not match the video");
  std::filesystem::create_directories(dir);
  std::vector<std::string> paths;
  for (std::size_t t = 0; t < video.frame_count(); ++t) {
    auto path = (std::filesystem::path(dir) / frame_file_name(t)).replace_extension(".ppm").string();
    write_ppm(path, overlay_frame(video.frame(t), trajs, t));
    paths.push_back(std::move(path));
  }
  return paths;
}

// ---------------------------------------------------------------------------

struct ParameterGroupSize {
  std::string group;
  std::size_t count = 0;
};

/// Encoder parameter counts by group, plus a "total" row.
inline std::vector<ParameterGroupSize> encoder_parameter_report(const EncoderConfig& cfg) {
  ad::ParameterSet<float> params;
  TrajectoryEncoder<float>::init_params(cfg, params, 0);
  std::vector<ParameterGroupSize> out;
  for (const char* g : {"backbone", "projections", "latent", "attention", "branch_mlp", "token_mlp"}) {
    std::size_t n = 0;
    for (const auto& name : encoder_parameter_group(params, g)) n += params[name].size();
    out.push_back({g, n});
  }
  out.push_back({"total", params.element_count()});
  return out;
}

}  // namespace trajtok
