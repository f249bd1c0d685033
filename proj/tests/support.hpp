#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "trajtok/autodiff.hpp"
#include "trajtok/trajectory_store.hpp"
#include "trajtok/video_io.hpp"

namespace trajtok::testing {

inline VideoClip fixture(SceneKind kind, std::uint32_t frames, std::uint64_t seed = 7, std::uint32_t side = 64) {
  SyntheticSpec spec;
  spec.kind = kind;
  spec.frames = frames;
  spec.width = spec.height = side;
  spec.seed = seed;
  return synthesize_video(spec);
}

inline Frame random_frame(std::uint32_t w, std::uint32_t h, std::mt19937_64& rng) {
  std::vector<std::uint8_t> px(std::size_t{w} * h * 3);
  for (auto& p : px) p = static_cast<std::uint8_t>(rng() & 0xff);
  return Frame(w, h, std::move(px));
}

/// Fresh, empty scratch directory under the system temp dir.
inline std::string scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("trajtok_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

/// Random valid TrajectorySet: trajectory 0 spans the video, others get random
/// contiguous spans; every frame is split among its active trajectories.
inline TrajectorySet random_trajectory_set(std::mt19937_64& rng) {
  auto pick = [&](std::uint32_t lo, std::uint32_t hi) { return lo + static_cast<std::uint32_t>(rng() % (hi - lo + 1)); };
  TrajectorySet set{pick(1, 24), pick(1, 24), pick(1, 6), {}};
  const std::uint32_t pixels = set.width * set.height;
  const std::uint32_t count = pick(1, std::min<std::uint32_t>(8, pixels));
  std::vector<std::pair<std::uint32_t, std::uint32_t>> spans{{0, set.frame_count}};
  for (std::uint32_t k = 1; k < count; ++k) {
    const auto a = pick(0, set.frame_count - 1);
    spans.emplace_back(a, pick(a + 1, set.frame_count));
  }
  std::vector<std::uint32_t> ids(count);
  for (std::uint32_t k = 0; k < count; ++k) ids[k] = k * 1000 + pick(0, 999);
  std::shuffle(ids.begin(), ids.end(), rng);
  std::vector<std::vector<RleMask>> masks(count);
  for (std::uint32_t t = 0; t < set.frame_count; ++t) {
    std::vector<std::uint32_t> active;
    for (std::uint32_t k = 0; k < count; ++k)
      if (spans[k].first <= t && t < spans[k].second) active.push_back(k);
    std::vector<std::uint32_t> owner(pixels, count);
    std::vector<std::uint32_t> order(pixels);
    for (std::uint32_t i = 0; i < pixels; ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t a = 0; a < active.size(); ++a) owner[order[a]] = active[a];
    for (auto& o : owner)
      if (o == count) o = active[rng() % active.size()];
    for (auto k : active) {
      std::vector<std::uint8_t> dense(pixels);
      for (std::uint32_t i = 0; i < pixels; ++i) dense[i] = owner[i] == k;
      masks[k].push_back(RleMask::from_dense(dense, set.width));
    }
  }
  for (std::uint32_t k = 0; k < count; ++k)
    set.trajectories.push_back(make_trajectory(ids[k], spans[k].first, std::move(masks[k]), set.width, set.height));
  return set;
}

inline double relative_error(double a, double b) {
  const double scale = std::max({std::abs(a), std::abs(b), 1e-7});
  return std::abs(a - b) / scale;
}

struct GradCheckResult {
  std::size_t checked = 0;
  double worst = 0;
  std::string worst_at;
};

/// Central differences on `samples` random entries drawn from `names`.
/// `loss` must rebuild the forward pass from the current parameter values;
/// `analytic` must hold d(loss)/d(param) for the unperturbed values.
inline GradCheckResult check_gradients(ad::ParameterSet<double>& params, const std::vector<std::string>& names,
                                       const std::function<double()>& loss, std::size_t samples, std::uint64_t seed,
                                       double step = 1e-4) {
  std::vector<std::pair<std::string, std::size_t>> pool;
  for (const auto& n : names)
    for (std::size_t i = 0; i < params[n].size(); ++i) pool.emplace_back(n, i);
  std::mt19937_64 rng(seed);
  std::shuffle(pool.begin(), pool.end(), rng);
  if (pool.size() > samples) pool.resize(samples);
  GradCheckResult r;
  for (const auto& [name, i] : pool) {
    auto& p = params[name];
    const double analytic = p.grad[i];
    const double orig = p.value[i];
    p.value[i] = orig + step;
    const double up = loss();
    p.value[i] = orig - step;
    const double down = loss();
    p.value[i] = orig;
    const double numeric = (up - down) / (2 * step);
    const double err = relative_error(analytic, numeric);
    ++r.checked;
    if (err > r.worst) {
      r.worst = err;
      r.worst_at = name + "[" + std::to_string(i) + "] analytic " + std::to_string(analytic) + " numeric " +
                   std::to_string(numeric);
    }
  }
  return r;
}

}  // namespace trajtok::testing
