#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "trajtok/autodiff.hpp"
#include "trajtok/trajectory_store.hpp"
#include "trajtok/tracking_merge.hpp"
#include "trajtok/video_io.hpp"

namespace trajtok {

/// Shapes of the trajectory encoder. Defaults give the full-size model:
/// 224 px input, 56x56x64 features, 8 heads, 1024-wide tokens.
struct EncoderConfig {
  std::size_t input_side = 224;
  std::vector<std::size_t> stage_widths = {64, 128, 256, 512};
  std::size_t stages = 4;
  std::size_t feature_dim = 64;
  std::size_t heads = 8;
  std::size_t resampler_layers = 1;
  std::size_t latent_queries = 1;
  std::size_t ffn_multiplier = 4;
  std::size_t model_dim = 1024;
  double pool_epsilon = 1e-6;
  std::size_t bands = 8;
  double rotary_base = 10000.0;
  ad::Activation backbone_activation = ad::Activation::Relu;
  ad::Activation mlp_activation = ad::Activation::Gelu;

  std::size_t grid_side() const { return input_side / 4; }
  std::size_t head_dim() const { return feature_dim / heads; }
  std::size_t stage_side(std::size_t s) const { return input_side >> (s + 2); }

  void validate() const {
    if (stages < 1 || stages > stage_widths.size()) throw std::invalid_argument("stage count must be in [1, widths]");
    if (input_side % (std::size_t{1} << (stages + 1)) != 0)
      throw std::invalid_argument("input side must be divisible by 2^(stages+1)");
    if (heads == 0 || feature_dim % heads != 0) throw std::invalid_argument("feature width must be divisible by heads");
    if (head_dim() % 2 != 0) throw std::invalid_argument("head width must be even for rotary embedding");
    if (4 * 2 * bands != feature_dim)
      throw std::invalid_argument("sinusoidal width 4 coords x 2 functions x bands must equal the feature width");
    if (latent_queries != 1) throw std::invalid_argument("the resampler emits one token: latent queries must be 1");
    if (resampler_layers < 1) throw std::invalid_argument("resampler needs at least one layer");
    if (!(pool_epsilon > 0)) throw std::invalid_argument("pooling epsilon must be positive");
  }

  /// Reduced shapes for tests and the toy trainer.
  static EncoderConfig small() {
    EncoderConfig c;
    c.input_side = 32;
    c.stage_widths = {8, 8, 16, 16};
    c.feature_dim = 16;
    c.heads = 2;
    c.bands = 2;
    c.model_dim = 32;
    c.ffn_multiplier = 2;
    return c;
  }
};

/// Feature map of one frame, laid out [dim, side, side].
template <class T>
struct FrameFeatureMap {
  std::size_t side = 0, dim = 0;
  std::vector<T> values;
};

// ---------------------------------------------------------------------------
// Parameter-free pieces

/// Grid cell (i, j) is set when the mask covers at least half of the cell's
/// area (mask against everything else, ties set), with area-weighted mapping
/// of pixels to cells. Objects smaller than that vanish from the grid.
inline std::vector<std::uint8_t> downsample_mask(std::span<const std::uint8_t> mask, std::uint32_t width,
                                                 std::uint32_t height, std::size_t grid) {
  if (mask.size() != std::size_t{width} * height) throw std::invalid_argument("mask size mismatch");
  // In units scaled by `grid`, pixel x spans [x*G, (x+1)*G) and cell i spans [i*W, (i+1)*W).
  auto overlaps = [grid](std::uint32_t extent) {
    std::vector<std::vector<std::pair<std::uint32_t, std::uint64_t>>> cells(grid);
    for (std::size_t i = 0; i < grid; ++i) {
      const std::uint64_t c0 = i * extent, c1 = (i + 1) * extent;
      for (std::uint32_t x = static_cast<std::uint32_t>(c0 / grid); x < extent && std::uint64_t{x} * grid < c1; ++x) {
        const std::uint64_t p0 = std::uint64_t{x} * grid, p1 = p0 + grid;
        const std::uint64_t ov = std::min(c1, p1) - std::max(c0, p0);
        if (std::min(c1, p1) > std::max(c0, p0)) cells[i].emplace_back(x, ov);
      }
    }
    return cells;
  };
  const auto ox = overlaps(width), oy = overlaps(height);
  const std::uint64_t cell_area = std::uint64_t{width} * height;
  std::vector<std::uint8_t> out(grid * grid, 0);
  for (std::size_t cy = 0; cy < grid; ++cy)
    for (std::size_t cx = 0; cx < grid; ++cx) {
      std::uint64_t in = 0;
      for (auto [y, wy] : oy[cy])
        for (auto [x, wx] : ox[cx])
          if (mask[std::size_t{y} * width + x]) in += wy * wx;
      out[cy * grid + cx] = 2 * in >= cell_area ? 1 : 0;
    }
  return out;
}

/// f = sum(M * F) / (sum(M) + eps) over the grid.
template <class T>
std::vector<T> mask_pool(const FrameFeatureMap<T>& features, std::span<const T> mask, T eps) {
  const std::size_t cells = features.side * features.side;
  if (mask.size() != cells) throw std::invalid_argument("mask does not match the feature grid");
  T area = 0;
  for (auto m : mask) area += m;
  const T denom = area + eps;
  std::vector<T> out(features.dim);
  for (std::size_t d = 0; d < features.dim; ++d) {
    T acc = 0;
    for (std::size_t i = 0; i < cells; ++i) acc += mask[i] * features.values[d * cells + i];
    out[d] = acc / denom;
  }
  return out;
}

/// [sin(2^j pi v), cos(2^j pi v)] for j < bands, for each of x1, y1, x2, y2.
template <class T>
std::vector<T> sinusoidal_encode(const BBox& box, std::size_t bands) {
  std::vector<T> out;
  out.reserve(8 * bands);
  for (float v : {box.x1, box.y1, box.x2, box.y2})
    for (std::size_t j = 0; j < bands; ++j) {
      const double arg = std::ldexp(std::numbers::pi * static_cast<double>(v), static_cast<int>(j));
      out.push_back(static_cast<T>(std::sin(arg)));
      out.push_back(static_cast<T>(std::cos(arg)));
    }
  return out;
}

/// Bilinear resize of a frame to side x side, channels-first, scaled to [0, 1].
template <class T>
std::vector<T> frame_to_input(const Frame& frame, std::size_t side) {
  const auto ty = ad::bilinear_taps(frame.height(), side), tx = ad::bilinear_taps(frame.width(), side);
  std::vector<T> out(3 * side * side);
  const auto bytes = frame.bytes();
  const std::size_t w = frame.width();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < side; ++y)
      for (std::size_t x = 0; x < side; ++x) {
        auto px = [&](std::size_t yy, std::size_t xx) { return static_cast<double>(bytes[(yy * w + xx) * 3 + c]); };
        const double fy = ty.frac[y], fx = tx.frac[x];
        const double v = (1 - fy) * ((1 - fx) * px(ty.lo[y], tx.lo[x]) + fx * px(ty.lo[y], tx.hi[x])) +
                         fy * ((1 - fx) * px(ty.hi[y], tx.lo[x]) + fx * px(ty.hi[y], tx.hi[x]));
        out[(c * side + y) * side + x] = static_cast<T>(v / 255.0);
      }
  return out;
}

/// Inputs of one video that do not depend on parameters.
template <class T>
struct PreparedVideo {
  struct Track {
    std::uint32_t id = 0;
    std::vector<std::size_t> frames;          // absolute frame indices
    std::vector<std::vector<T>> grid_masks;   // one G*G mask per frame
    std::vector<std::vector<T>> box_codes;    // one sinusoidal code per frame
  };
  std::size_t input_side = 0;
  std::vector<std::vector<T>> inputs;  // [3, S, S] per frame
  std::vector<Track> tracks;           // in trajectory order
};

template <class T>
PreparedVideo<T> prepare_video(const VideoClip& video, const TrajectorySet& trajs, const EncoderConfig& cfg) {
  cfg.validate();
  if (trajs.width != video.width() || trajs.height != video.height() || trajs.frame_count != video.frame_count())
    throw std::invalid_argument("trajectories do not match the video");
  PreparedVideo<T> p;
  p.input_side = cfg.input_side;
  for (const auto& f : video.frames()) p.inputs.push_back(frame_to_input<T>(f, cfg.input_side));
  for (const auto& tr : trajs.trajectories) {
    typename PreparedVideo<T>::Track track;
    track.id = tr.id;
    for (std::uint32_t t = tr.span_start; t < tr.span_end(); ++t) {
      track.frames.push_back(t);
      const auto grid = downsample_mask(tr.mask_at(t).to_dense(trajs.pixel_count()), trajs.width, trajs.height,
                                        cfg.grid_side());
      track.grid_masks.emplace_back(grid.begin(), grid.end());
      track.box_codes.push_back(sinusoidal_encode<T>(tr.box_at(t), cfg.bands));
    }
    p.tracks.push_back(std::move(track));
  }
  return p;
}

// ---------------------------------------------------------------------------

/// Two-branch trajectory encoder. Parameters live in an external
/// ParameterSet under `prefix`; this object only holds references.
template <class T>
class TrajectoryEncoder {
 public:
  using Var = ad::Var<T>;
  using Tape = ad::Tape<T>;

  TrajectoryEncoder(EncoderConfig cfg, ad::ParameterSet<T>& params, std::string prefix = "")
      : cfg_(std::move(cfg)), params_(&params), prefix_(std::move(prefix)) {
    cfg_.validate();
  }

  const EncoderConfig& config() const { return cfg_; }

  /// Registers freshly initialized parameters.
  static void init_params(const EncoderConfig& cfg, ad::ParameterSet<T>& params, std::uint64_t seed,
                          const std::string& prefix = "") {
    cfg.validate();
    std::mt19937_64 rng(seed);
    auto add_dense = [&](const std::string& name, std::size_t out, std::size_t in, double gain) {
      params.add(prefix + name + ".w", {out, in}, ad::normal_values<T>(out * in, T(gain / std::sqrt(double(in))), rng));
      params.add(prefix + name + ".b", {out}, std::vector<T>(out, T(0)));
    };
    auto add_conv = [&](const std::string& name, std::size_t out, std::size_t in, std::size_t k) {
      const double fan_in = double(in * k * k);
      params.add(prefix + name + ".w", {out, in, k, k},
                 ad::normal_values<T>(out * in * k * k, T(std::sqrt(2.0 / fan_in)), rng));
      params.add(prefix + name + ".b", {out}, std::vector<T>(out, T(0)));
    };
    const auto& w = cfg.stage_widths;
    add_conv("backbone.stem", w[0], 3, 3);
    for (std::size_t s = 0; s < cfg.stages; ++s)
      add_conv("backbone.stage" + std::to_string(s + 1), w[s], s == 0 ? w[0] : w[s - 1], 3);
    for (std::size_t s = 0; s < cfg.stages; ++s)
      add_conv("proj" + std::to_string(s + 1), cfg.feature_dim, w[s], 1);
    const std::size_t d = cfg.feature_dim, hidden = cfg.ffn_multiplier * d;
    for (const char* branch : {"app", "pos"}) {
      const std::string b = branch;
      params.add(prefix + b + ".latent", {1, d}, ad::normal_values<T>(d, T(0.5), rng));
      for (std::size_t l = 0; l < cfg.resampler_layers; ++l) {
        const std::string layer = b + ".layer" + std::to_string(l);
        for (const char* m : {".wq", ".wk", ".wv", ".wo"}) add_dense(layer + m, d, d, 1.0);
        add_dense(layer + ".ffn1", hidden, d, 1.0);
        add_dense(layer + ".ffn2", d, hidden, 1.0);
      }
    }
    add_dense("token.fc1", cfg.model_dim, d, 1.0);
    add_dense("token.fc2", cfg.model_dim, cfg.model_dim, 1.0);
  }

  /// Hierarchical features of one [3, S, S] input: per stage, a 1x1
  /// projection to the feature width, bilinear resize to the grid, summed.
  Var features(Tape& tape, const Var& input) const {
    const auto& x_shape = input.shape();
    if (x_shape.size() != 3 || x_shape[0] != 3 || x_shape[1] != cfg_.input_side || x_shape[2] != cfg_.input_side)
      throw std::invalid_argument("frame input must be [3, S, S]");
    Var x = conv(tape, "backbone.stem", input, 2, 1);
    std::vector<Var> maps;
    for (std::size_t s = 0; s < cfg_.stages; ++s) {
      x = conv(tape, "backbone.stage" + std::to_string(s + 1), x, 2, 1);
      const std::string proj = prefix_ + "proj" + std::to_string(s + 1);
      Var projected = ad::conv2d(x, tape.param(p(proj + ".w")), tape.param(p(proj + ".b")), 1, 0);
      maps.push_back(ad::resize_bilinear(projected, cfg_.grid_side()));
    }
    Var sum = maps.front();
    for (std::size_t s = 1; s < maps.size(); ++s) sum = ad::add(sum, maps[s]);
    return sum;
  }

  FrameFeatureMap<T> extract_features(const std::vector<T>& input) const {
    check_parameters();
    return features_unchecked(input);
  }

  /// Throws if any encoder parameter is NaN or infinite.
  void check_parameters() const {
    for (std::size_t i = 0; i < params_->size(); ++i) {
      const auto& param = params_->at(i);
      if (param.name.rfind(prefix_, 0) == 0) check_finite(param.value, param.name.c_str());
    }
  }

  FrameFeatureMap<T> features_unchecked(const std::vector<T>& input) const {
    Tape tape(false);
    const std::size_t s = cfg_.input_side;
    auto f = features(tape, tape.constant({3, s, s}, input));
    check_finite(f.value(), "feature map");
    return {cfg_.grid_side(), cfg_.feature_dim, f.value()};
  }

  /// One-query perceiver resampler over seq [L, d] with rotary positions
  /// (keys at their frame index, the latent query at index 0).
  Var resample(Tape& tape, const std::string& branch, const Var& seq, const std::vector<T>& positions) const {
    if (seq.rows() == 0) throw std::invalid_argument("resampler needs a non-empty sequence");
    const std::string& b = branch;
    Var h = tape.param(p(prefix_ + b + ".latent"));
    for (std::size_t l = 0; l < cfg_.resampler_layers; ++l) {
      const std::string layer = b + ".layer" + std::to_string(l);
      Var q = dense(tape, layer + ".wq", h);
      Var k = dense(tape, layer + ".wk", seq);
      Var v = dense(tape, layer + ".wv", seq);
      q = ad::rotary(q, std::vector<T>{T(0)}, cfg_.heads, T(cfg_.rotary_base));
      k = ad::rotary(k, positions, cfg_.heads, T(cfg_.rotary_base));
      Var attended = ad::attention(q, k, v, cfg_.heads);
      h = ad::add(h, dense(tape, layer + ".wo", attended));
      Var ffn = dense(tape, layer + ".ffn2", ad::activation(dense(tape, layer + ".ffn1", h), cfg_.mlp_activation));
      h = ad::add(h, ffn);
    }
    return h;
  }

  /// token = fc2(act(fc1(appearance + position)))
  Var assemble_token(Tape& tape, const Var& appearance, const Var& position) const {
    Var z = ad::add(appearance, position);
    return dense(tape, "token.fc2", ad::activation(dense(tape, "token.fc1", z), cfg_.mlp_activation));
  }

  /// Token of one trajectory from its per-frame appearance and box codes.
  Var encode_track(Tape& tape, const Var& appearance_seq, const Var& position_seq, const std::vector<T>& frames) const {
    return assemble_token(tape, resample(tape, "app", appearance_seq, frames), resample(tape, "pos", position_seq, frames));
  }

  /// All tokens of a prepared video as an [N, d_m] matrix, recorded on `tape`.
  /// Feature maps are computed once per frame and shared by all trajectories.
  Var encode(Tape& tape, const PreparedVideo<T>& video) const {
    if (video.tracks.empty()) throw std::invalid_argument("video has no trajectories");
    const std::size_t s = cfg_.input_side;
    std::vector<Var> fmaps;
    for (const auto& in : video.inputs) fmaps.push_back(features(tape, tape.constant({3, s, s}, in)));
    std::vector<Var> tokens;
    for (const auto& tr : video.tracks) {
      std::vector<Var> app, pos;
      std::vector<T> positions;
      for (std::size_t k = 0; k < tr.frames.size(); ++k) {
        app.push_back(ad::mask_pool(fmaps[tr.frames[k]], std::span<const T>(tr.grid_masks[k]), T(cfg_.pool_epsilon)));
        pos.push_back(tape.constant({1, cfg_.feature_dim}, tr.box_codes[k]));
        positions.push_back(T(tr.frames[k]));
      }
      tokens.push_back(encode_track(tape, ad::stack_rows(app), ad::stack_rows(pos), positions));
    }
    return ad::stack_rows(tokens);
  }

  /// Inference path: tokens in trajectory order. Frames and trajectories are
  /// spread over `workers` threads.
  std::vector<std::vector<T>> encode_video(const PreparedVideo<T>& video, std::size_t workers = 1) const {
    check_parameters();
    std::vector<FrameFeatureMap<T>> fmaps(video.inputs.size());
    parallel_for(video.inputs.size(), workers, [&](std::size_t t) { fmaps[t] = features_unchecked(video.inputs[t]); });
    std::vector<std::vector<T>> tokens(video.tracks.size());
    parallel_for(video.tracks.size(), workers, [&](std::size_t n) {
      const auto& tr = video.tracks[n];
      Tape tape(false);
      std::vector<T> app, pos, positions;
      for (std::size_t k = 0; k < tr.frames.size(); ++k) {
        const auto f = mask_pool(fmaps[tr.frames[k]], std::span<const T>(tr.grid_masks[k]), T(cfg_.pool_epsilon));
        app.insert(app.end(), f.begin(), f.end());
        pos.insert(pos.end(), tr.box_codes[k].begin(), tr.box_codes[k].end());
        positions.push_back(T(tr.frames[k]));
      }
      const std::size_t L = tr.frames.size(), d = cfg_.feature_dim;
      auto token = encode_track(tape, tape.constant({L, d}, std::move(app)), tape.constant({L, d}, std::move(pos)), positions);
      check_finite(token.value(), "token");
      tokens[n] = token.value();
    });
    return tokens;
  }

  std::vector<std::vector<T>> encode_video(const VideoClip& video, const TrajectorySet& trajs,
                                           std::size_t workers = 1) const {
    return encode_video(prepare_video<T>(video, trajs, cfg_), workers);
  }

 private:
  ad::Parameter<T>& p(const std::string& full_name) const {
    auto& param = (*params_)[full_name];
    return param;
  }

  Var dense(Tape& tape, const std::string& name, const Var& x) const {
    Var b = tape.param(p(prefix_ + name + ".b"));
    return ad::linear(x, tape.param(p(prefix_ + name + ".w")), &b);
  }

  Var conv(Tape& tape, const std::string& name, const Var& x, std::size_t stride, std::size_t pad) const {
    Var y = ad::conv2d(x, tape.param(p(prefix_ + name + ".w")), tape.param(p(prefix_ + name + ".b")), stride, pad);
    return ad::activation(y, cfg_.backbone_activation);
  }

  static void check_finite(const std::vector<T>& v, const char* what) {
    for (auto x : v)
      if (!std::isfinite(x)) throw std::runtime_error(std::string("non-finite value in ") + what);
  }

  EncoderConfig cfg_;
  ad::ParameterSet<T>* params_;
  std::string prefix_;
};

/// Parameter names of the encoder grouped the way gradient checks sample them.
template <class T>
std::vector<std::string> encoder_parameter_group(const ad::ParameterSet<T>& params, const std::string& group,
                                                        const std::string& prefix = "") {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& n = params.at(i).name;
    if (n.rfind(prefix, 0) != 0) continue;
    const std::string local = n.substr(prefix.size());
    const bool attention = local.find(".wq.") != std::string::npos || local.find(".wk.") != std::string::npos ||
                           local.find(".wv.") != std::string::npos || local.find(".wo.") != std::string::npos;
    bool hit = false;
    if (group == "backbone") hit = local.rfind("backbone.", 0) == 0;
    else if (group == "projections") hit = local.rfind("proj", 0) == 0;
    else if (group == "latent") hit = local.ends_with(".latent");
    else if (group == "attention") hit = attention;
    else if (group == "branch_mlp") hit = local.find(".ffn") != std::string::npos;
    else if (group == "token_mlp") hit = local.rfind("token.", 0) == 0;
    if (hit) names.push_back(n);
  }
  return names;
}

}  // namespace trajtok
