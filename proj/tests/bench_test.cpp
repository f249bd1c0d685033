#include <gtest/gtest.h>

#include <filesystem>
#include <set>
#include <sstream>

#include "support.hpp"
#include "trajtok/bench.hpp"

using namespace trajtok;
using trajtok::testing::fixture;

namespace {

SyntheticSpec family(SceneKind kind) {
  SyntheticSpec spec;
  spec.kind = kind;
  spec.seed = 7;
  return spec;
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    std::vector<std::string> cells;
    std::istringstream cs(line);
    for (std::string c; std::getline(cs, c, ',');) cells.push_back(c);
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST(PatchTokenCount, Arithmetic) {
  EXPECT_EQ(patch_token_count(60, 224, 224, 16, 2), 5880u);
  EXPECT_EQ(patch_token_count(60, 224, 224, 16, 1), 11760u);
  EXPECT_EQ(patch_token_count(16, 224, 224, 16, 1), 3136u);
  EXPECT_EQ(patch_token_count(2, 32, 32, 16, 2), 4u);
  EXPECT_EQ(patch_token_count(64, 224, 224, 16), 12544u);
}

TEST(PatchTokenCount, RejectsIndivisibleShapes) {
  EXPECT_THROW(patch_token_count(8, 30, 32, 16), std::invalid_argument);
  EXPECT_THROW(patch_token_count(8, 32, 30, 16), std::invalid_argument);
  EXPECT_THROW(patch_token_count(7, 32, 32, 16, 2), std::invalid_argument);
  EXPECT_THROW(patch_token_count(8, 32, 32, 0), std::invalid_argument);
}

TEST(TransformerFlops, UnitCase) {
  EXPECT_EQ(transformer_flops(1, 1, 1), 14.0);
  EXPECT_EQ(transformer_flops(2, 3, 5), 5 * (4 * 2 * 9 + 2 * 4 * 3 + 8 * 2 * 9));
  EXPECT_EQ(transformer_flops(0, 8, 2), 0.0);
  EXPECT_THROW(transformer_flops(1, 0, 1), std::invalid_argument);
}

TEST(TransformerFlops, SuperLinearOnceQuadraticTermMatters) {
  for (double d : {1.0, 16.0, 1024.0})
    for (double n = d; n <= 64 * d; n *= 2) EXPECT_GT(transformer_flops(2 * n, d, 3), 2 * transformer_flops(n, d, 3));
}

TEST(TransformerFlops, PatchVersusTrajectoryRatio) {
  const double patches = transformer_flops(3136, 1024, 24), trajectories = transformer_flops(5, 1024, 24);
  // linear terms give 3136/5; the quadratic term only widens the gap
  EXPECT_GT(patches / trajectories, 3136.0 / 5);
}

TEST(TokenizerFlops, TrajectoryCostGrowsWithFramesAndSpans) {
  const auto cfg = EncoderConfig::small();
  const double base = trajectory_tokenizer_flops(cfg, 8, {8, 8});
  EXPECT_GT(base, 0);
  EXPECT_GT(trajectory_tokenizer_flops(cfg, 16, {8, 8}), base);
  EXPECT_GT(trajectory_tokenizer_flops(cfg, 8, {8, 8, 8}), base);
  EXPECT_EQ(patch_tokenizer_flops(4, 16, 2, 1024), 2.0 * 4 * 16 * 16 * 2 * 3 * 1024);
}

TEST(BenchMethods, NamesRoundTrip) {
  for (auto m : {BenchMethod::Trajectory, BenchMethod::Patch3d, BenchMethod::SegmentationOnly, BenchMethod::TrackingOnly})
    EXPECT_EQ(parse_bench_method(to_string(m)), m);
  EXPECT_THROW(parse_bench_method("vit"), std::invalid_argument);
  EXPECT_EQ(parse_ablation_mode("tracking-only"), AblationMode::TrackingOnly);
  EXPECT_THROW(parse_ablation_mode("none"), std::invalid_argument);
}

TEST(Ablation, CountsOnStaticFixture) {
  const auto v = fixture(SceneKind::StaticBlocks, 16);
  EXPECT_EQ(run_ablation_tokenizer(v, AblationMode::SegmentationOnly).size(), 80u);
  EXPECT_EQ(run_ablation_tokenizer(v, AblationMode::TrackingOnly).size(), 16u);
  EXPECT_EQ(run_ablation_tokenizer(v, AblationMode::Full).size(), 5u);
  for (auto mode : {AblationMode::SegmentationOnly, AblationMode::TrackingOnly, AblationMode::Full})
    EXPECT_NO_THROW(run_ablation_tokenizer(v, mode).validate());
}

TEST(Ablation, TrackingOnlyIgnoresContent) {
  for (std::uint32_t objects : {1u, 3u, 6u}) {
    SyntheticSpec spec = family(SceneKind::StaticBlocks);
    spec.objects = objects;
    spec.frames = 4;
    EXPECT_EQ(run_ablation_tokenizer(synthesize_video(spec), AblationMode::TrackingOnly).size(), 16u);
  }
}

TEST(BenchFrames, StaticTrajectoryRowsFlatPatchRowsLinear) {
  const auto rows = bench_frames(family(SceneKind::StaticBlocks), {8, 16, 32, 64},
                                 {BenchMethod::Trajectory, BenchMethod::Patch3d});
  ASSERT_EQ(rows.size(), 8u);
  for (const auto& r : rows) {
    if (r.method == BenchMethod::Trajectory) {
      EXPECT_EQ(r.tokens, 5u) << r.frames;
    } else {
      EXPECT_EQ(r.tokens, 16u * r.frames);
    }
    EXPECT_EQ(r.transformer_flops, transformer_flops(double(r.tokens), 1024, 24));
    EXPECT_GT(r.tokenizer_flops, 0);
    EXPECT_GE(r.wall_ms, 0);
  }
}

TEST(BenchFrames, PanFixtureStaysFlat) {
  const auto rows = bench_frames(family(SceneKind::CameraPan), {8, 16, 32}, {BenchMethod::Trajectory, BenchMethod::Patch3d});
  for (const auto& r : rows) {
    if (r.method == BenchMethod::Trajectory) {
      EXPECT_EQ(r.tokens, 5u) << r.frames;
    } else {
      EXPECT_EQ(r.tokens, 16u * r.frames);
    }
  }
}

TEST(BenchFrames, TrajectoryNeverExceedsPatches) {
  for (auto kind : {SceneKind::StaticBlocks, SceneKind::MovingBlocks, SceneKind::CameraPan, SceneKind::HardCut}) {
    const auto rows = bench_frames(family(kind), {8, 16}, {BenchMethod::Trajectory, BenchMethod::Patch3d});
    for (std::size_t i = 0; i < rows.size(); i += 2) EXPECT_LE(rows[i].tokens, rows[i + 1].tokens) << to_string(kind);
  }
}

TEST(BenchCsv, HeaderAndRows) {
  const auto rows = bench_frames(family(SceneKind::StaticBlocks), {8, 16}, {BenchMethod::Trajectory, BenchMethod::Patch3d,
                                                                            BenchMethod::SegmentationOnly, BenchMethod::TrackingOnly});
  const auto table = parse_csv(bench_csv(rows));
  ASSERT_EQ(table.size(), 9u);
  EXPECT_EQ(table[0], (std::vector<std::string>{"method", "T", "tokens", "transformer_flops", "tokenizer_flops", "wall_ms"}));
  EXPECT_EQ(table[1][0], "trajectory");
  EXPECT_EQ(table[2][0], "patch3d");
  EXPECT_EQ(table[3][0], "segmentation-only");
  EXPECT_EQ(table[3][2], "40");
  EXPECT_EQ(table[4][0], "tracking-only");
  EXPECT_EQ(table[6][1], "16");
  EXPECT_EQ(table[6][2], "256");
  EXPECT_EQ(std::stod(table[6][3]), transformer_flops(256, 1024, 24));
}

TEST(Overlay, SingleTrajectoryTintsEveryPixel) {
  const Frame f(8, 6, std::vector<std::uint8_t>(8 * 6 * 3, 100));
  const VideoClip v({f, f, f}, 1);
  const auto trajs = generate_trajectories(v);
  ASSERT_EQ(trajs.size(), 1u);
  const Rgb c = trajectory_colour(trajs.trajectories[0].id);
  const Rgb expected{std::uint8_t((100 + c.r) / 2), std::uint8_t((100 + c.g) / 2), std::uint8_t((100 + c.b) / 2)};
  for (std::size_t t = 0; t < 3; ++t) {
    const auto o = overlay_frame(v.frame(t), trajs, t);
    for (std::uint32_t y = 0; y < 6; ++y)
      for (std::uint32_t x = 0; x < 8; ++x) EXPECT_EQ(o.at(x, y), expected);
  }
}

TEST(Overlay, TwoTrajectoriesGetDistinctStableTints) {
  std::vector<std::uint8_t> px(16 * 8 * 3, 40);
  for (std::uint32_t y = 0; y < 8; ++y)
    for (std::uint32_t x = 8; x < 16; ++x)
      for (int c = 0; c < 3; ++c) px[(y * 16 + x) * 3 + c] = 200;
  const Frame f(16, 8, px);
  const VideoClip v({f, f, f, f}, 1);
  const auto trajs = generate_trajectories(v);
  ASSERT_EQ(trajs.size(), 2u);
  EXPECT_NE(trajectory_colour(trajs.trajectories[0].id), trajectory_colour(trajs.trajectories[1].id));
  const auto first = overlay_frame(f, trajs, 0);
  for (std::size_t t = 1; t < 4; ++t) EXPECT_EQ(overlay_frame(f, trajs, t), first);
  // boundary columns are painted solid
  EXPECT_EQ(first.at(7, 3), trajectory_colour(trajs.trajectories[0].id));
  EXPECT_EQ(first.at(8, 3), trajectory_colour(trajs.trajectories[1].id));
}

TEST(Overlay, ColourContinuesAcrossClipBoundary) {
  const auto v = fixture(SceneKind::StaticBlocks, 8);
  PipelineConfig cfg;
  cfg.tracker.max_clip_length = 4;
  const auto trajs = generate_trajectories(v, cfg);
  ASSERT_EQ(trajs.size(), 5u);
  EXPECT_EQ(overlay_frame(v.frame(3), trajs, 3), overlay_frame(v.frame(4), trajs, 4));
}

TEST(Overlay, ColoursAreDeterministicAndSpread) {
  std::set<std::tuple<int, int, int>> seen;
  for (std::uint32_t id = 0; id < 64; ++id) {
    const Rgb c = trajectory_colour(id);
    EXPECT_EQ(c, trajectory_colour(id));
    EXPECT_GE(std::min({c.r, c.g, c.b}), 64);
    seen.insert({c.r, c.g, c.b});
  }
  EXPECT_EQ(seen.size(), 64u);
}

TEST(Overlay, WritesOneImagePerFrame) {
  const auto v = fixture(SceneKind::MovingBlocks, 3);
  const auto trajs = generate_trajectories(v);
  const auto dir = trajtok::testing::scratch_dir("overlay");
  const auto paths = render_overlay(v, trajs, dir);
  ASSERT_EQ(paths.size(), 3u);
  for (std::size_t t = 0; t < 3; ++t) {
    EXPECT_TRUE(std::filesystem::exists(paths[t]));
    EXPECT_EQ(read_ppm(paths[t]), overlay_frame(v.frame(t), trajs, t));
  }
  EXPECT_THROW(render_overlay(fixture(SceneKind::MovingBlocks, 4), trajs, dir), std::invalid_argument);
}

TEST(ParameterReport, GroupsSumToTotal) {
  for (const auto& cfg : {EncoderConfig{}, EncoderConfig::small()}) {
    const auto report = encoder_parameter_report(cfg);
    ASSERT_EQ(report.back().group, "total");
    std::size_t sum = 0;
    for (std::size_t i = 0; i + 1 < report.size(); ++i) sum += report[i].count;
    EXPECT_EQ(sum, report.back().count);
  }
  const auto full = encoder_parameter_report(EncoderConfig{});
  // token MLP: 64*1024 + 1024 + 1024*1024 + 1024
  EXPECT_EQ(full[5].group, "token_mlp");
  EXPECT_EQ(full[5].count, 1116160u);
  EXPECT_EQ(full[2].count, 128u);
}
