#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "support.hpp"
#include "trajtok/training.hpp"

using namespace trajtok;
using trajtok::testing::relative_error;

namespace {

std::vector<double> unit(std::vector<double> v) {
  double n = 0;
  for (double x : v) n += x * x;
  for (double& x : v) x /= std::sqrt(n);
  return v;
}

std::vector<std::vector<double>> random_units(std::size_t b, std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  std::vector<std::vector<double>> out(b, std::vector<double>(d));
  for (auto& v : out) {
    for (double& x : v) x = n(rng);
    v = unit(v);
  }
  return out;
}

// Tiny configuration shared by the slower tests.
TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.encoder = EncoderConfig::small();
  cfg.encoder.input_side = 16;
  cfg.encoder.stages = 2;
  cfg.encoder.model_dim = 16;
  cfg.transformer_heads = 2;
  return cfg;
}

std::vector<PairedSample> four_pairs() {
  auto pairs = synthetic_pairs(0, 32, 2);
  return {pairs[0], pairs[5], pairs[10], pairs[15]};
}

}  // namespace

TEST(ClipLoss, IdenticalEmbeddingsGiveLogB) {
  const auto e = unit({1, 2, 3});
  for (std::size_t b : {2u, 5u, 16u}) {
    const std::vector<std::vector<double>> v(b, e);
    EXPECT_NEAR(clip_loss(v, v, 0.07).loss, std::log(double(b)), 1e-12);
  }
}

TEST(ClipLoss, OrthonormalPairsAtLowTemperatureVanish) {
  const std::size_t b = 6;
  std::vector<std::vector<double>> v(b, std::vector<double>(b, 0.0));
  for (std::size_t i = 0; i < b; ++i) v[i][i] = 1;
  const auto r = clip_loss(v, v, 0.01);
  // each row: -log(e^100 / (e^100 + (B-1) e^0))
  const double expected = std::log1p((b - 1) * std::exp(-100.0));
  EXPECT_NEAR(r.loss, expected, 1e-15);
  EXPECT_LT(r.loss, 1e-3);
  EXPECT_EQ(r.v2t_accuracy, 1.0);
  EXPECT_EQ(r.t2v_accuracy, 1.0);
}

TEST(ClipLoss, TwoByTwoClosedForm) {
  const double a = 0.3;
  const std::vector<std::vector<double>> v = {{1, 0}, {0, 1}};
  const std::vector<std::vector<double>> t = {{std::cos(a), std::sin(a)}, {std::sin(2 * a), std::cos(2 * a)}};
  const double tau = 0.5;
  // sim = [[cos a, sin a], [sin 2a, cos 2a]]
  const double s00 = std::cos(a), s01 = std::sin(a), s10 = std::sin(2 * a), s11 = std::cos(2 * a);
  auto ce = [tau](double target, double other) { return -std::log(std::exp(target / tau) / (std::exp(target / tau) + std::exp(other / tau))); };
  const double rows = ce(s00, s01) + ce(s11, s10);
  const double cols = ce(s00, s10) + ce(s11, s01);
  EXPECT_NEAR(clip_loss(v, t, tau).loss, (rows + cols) / 4, 1e-12);
}

TEST(ClipLoss, SymmetricInVideoAndText) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    const auto v = random_units(5, 8, rng), t = random_units(5, 8, rng);
    EXPECT_NEAR(clip_loss(v, t, 0.1).loss, clip_loss(t, v, 0.1).loss, 1e-12);
  }
}

TEST(ClipLoss, TemperatureDoesNotChangeRetrieval) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const auto v = random_units(7, 4, rng), t = random_units(7, 4, rng);
    const auto a = clip_loss(v, t, 0.05), b = clip_loss(v, t, 0.9);
    EXPECT_NE(a.loss, b.loss);
    EXPECT_EQ(a.v2t_accuracy, b.v2t_accuracy);
    EXPECT_EQ(a.t2v_accuracy, b.t2v_accuracy);
  }
}

TEST(ClipLoss, RejectsBadInputs) {
  const std::vector<std::vector<double>> one = {{1, 0}};
  EXPECT_THROW(clip_loss(one, one, 0.1), std::invalid_argument);
  const std::vector<std::vector<double>> v = {{1, 0}, {0, 1}};
  const std::vector<std::vector<double>> off = {{1.001, 0}, {0, 1}};
  EXPECT_THROW(clip_loss(v, off, 0.1), std::invalid_argument);
  EXPECT_NO_THROW(clip_loss(v, std::vector<std::vector<double>>{{1.00005, 0}, {0, 1}}, 0.1));
  EXPECT_THROW(clip_loss(v, v, 0.0), std::invalid_argument);
  const std::vector<std::vector<double>> three = {{1, 0}, {0, 1}, {1, 0}};
  EXPECT_THROW(clip_loss(v, three, 0.1), std::invalid_argument);
}

TEST(ClipLoss, TapeVersionMatchesPlainAndDifferentiates) {
  std::mt19937_64 rng(3);
  const auto v = random_units(4, 3, rng), t = random_units(4, 3, rng);
  auto flat = [](const std::vector<std::vector<double>>& rows) {
    std::vector<double> out;
    for (const auto& r : rows) out.insert(out.end(), r.begin(), r.end());
    return out;
  };
  ad::ParameterSet<double> params;
  params.add("v", {4, 3}, flat(v));
  params.add("t", {4, 3}, flat(t));
  params.add("log_tau", {1}, {std::log(0.2)});
  auto loss = [&](bool record) {
    ad::Tape<double> tape(record);
    auto l = ad::clip_loss(tape.param(params["v"]), tape.param(params["t"]), tape.param(params["log_tau"]), 0.01, 1.0);
    if (record) tape.backward(l);
    return l.value()[0];
  };
  params.zero_grad();
  EXPECT_NEAR(loss(true), clip_loss(v, t, 0.2).loss, 1e-12);
  const auto r = trajtok::testing::check_gradients(params, {"v", "t", "log_tau"}, [&] { return loss(false); }, 25, 4, 1e-6);
  EXPECT_LE(r.worst, 1e-6) << r.worst_at;
}

TEST(ClipLoss, ClampedTemperatureHasNoGradient) {
  ad::ParameterSet<double> params;
  params.add("v", {2, 2}, {1, 0, 0, 1});
  params.add("log_tau", {1}, {std::log(5.0)});
  ad::Tape<double> tape;
  auto l = ad::clip_loss(tape.param(params["v"]), tape.param(params["v"]), tape.param(params["log_tau"]), 0.01, 1.0);
  tape.backward(l);
  EXPECT_EQ(params["log_tau"].grad[0], 0.0);
  EXPECT_NEAR(l.value()[0], clip_loss({{1, 0}, {0, 1}}, {{1, 0}, {0, 1}}, 1.0).loss, 1e-12);
}

TEST(RetrievalAccuracy, TiesGoToLowestIndex) {
  const std::vector<double> sim = {0.5, 0.5, 0.1, 0.2};
  const auto [v2t, t2v] = retrieval_accuracy(sim, 2);
  EXPECT_EQ(v2t, 1.0);  // row 0 ties, picks 0; row 1 picks 1
  EXPECT_EQ(t2v, 0.5);  // column 0 picks 0; column 1 picks 0
}

TEST(SyntheticPairs, CaptionsAndShapes) {
  const auto pairs = synthetic_pairs(0);
  ASSERT_EQ(pairs.size(), 16u);
  EXPECT_EQ(build_vocab(pairs), (std::vector<std::string>{"blue", "four", "green", "one", "red", "three", "two", "yellow"}));
  for (std::size_t i = 0; i < 16; ++i) {
    EXPECT_EQ(pairs[i].video.frame_count(), 4u);
    EXPECT_EQ(pairs[i].video.width(), 32u);
    EXPECT_EQ(pairs[i].trajectories.size(), i / 4 + 2) << pairs[i].caption[0] << " " << pairs[i].caption[1];
  }
}

TEST(SyntheticPairs, DirectoryRoundTrip) {
  const auto dir = trajtok::testing::scratch_dir("pairs");
  const auto pairs = synthetic_pairs(3, 32, 2);
  write_pairs(dir, pairs);
  const auto back = read_pairs(dir);
  ASSERT_EQ(back.size(), pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    EXPECT_EQ(back[i].video, pairs[i].video);
    EXPECT_EQ(back[i].caption, pairs[i].caption);
    EXPECT_EQ(encode_trajectories(back[i].trajectories), encode_trajectories(pairs[i].trajectories));
  }
}

TEST(ContrastiveModel, DegenerateInitStartsAtLogB) {
  const auto pairs = four_pairs();
  ContrastiveModel<double> model(tiny_config(), build_vocab(pairs));
  std::vector<PreparedVideo<double>> videos;
  std::vector<std::vector<std::size_t>> captions;
  for (const auto& s : pairs) {
    videos.push_back(prepare_video<double>(s.video, s.trajectories, model.config().encoder));
    captions.push_back(model.token_ids(s.caption));
  }
  ad::Tape<double> tape(false);
  LossReport r;
  model.loss(tape, videos, captions, &r);
  EXPECT_NEAR(r.loss, std::log(4.0), 1e-3);
  EXPECT_NEAR(model.temperature(), 0.07, 1e-12);
}

TEST(ContrastiveModel, RejectsUnknownWords) {
  ContrastiveModel<double> model(tiny_config(), {"a", "b"});
  EXPECT_EQ(model.token_ids({"b", "a", "b"}), (std::vector<std::size_t>{1, 0, 1}));
  EXPECT_THROW(model.token_ids({"c"}), std::invalid_argument);
  EXPECT_THROW(model.token_ids({}), std::invalid_argument);
}

TEST(ContrastiveModel, FullStackGradientCheck) {
  auto cfg = tiny_config();
  cfg.degenerate_init = false;
  cfg.initial_tau = 0.5;
  const auto pairs = four_pairs();
  ContrastiveModel<double> model(cfg, build_vocab(pairs));
  std::vector<PreparedVideo<double>> videos;
  std::vector<std::vector<std::size_t>> captions;
  for (const auto& s : pairs) {
    videos.push_back(prepare_video<double>(s.video, s.trajectories, cfg.encoder));
    captions.push_back(model.token_ids(s.caption));
  }
  auto loss = [&](bool record) {
    ad::Tape<double> tape(record);
    auto l = model.loss(tape, videos, captions);
    if (record) tape.backward(l);
    return l.value()[0];
  };
  auto& params = model.params();
  params.zero_grad();
  loss(true);
  std::vector<std::string> names;
  for (std::size_t i = 0; i < params.size(); ++i)
    if (!params.at(i).name.starts_with("enc.backbone.")) names.push_back(params.at(i).name);
  const auto r = trajtok::testing::check_gradients(params, names, [&] { return loss(false); }, 32, 5);
  EXPECT_EQ(r.checked, 32u);
  EXPECT_LE(r.worst, 1e-3) << r.worst_at;
}

TEST(TrainToy, RejectsSinglePair) {
  auto pairs = synthetic_pairs(0, 32, 2);
  pairs.erase(pairs.begin() + 1, pairs.end());
  ContrastiveModel<double> model(tiny_config(), build_vocab(pairs));
  EXPECT_THROW(train_toy(model, pairs), std::invalid_argument);
}

TEST(TrainToy, ZeroLearningRateKeepsLossConstant) {
  auto cfg = tiny_config();
  cfg.lr = 0;
  cfg.steps = 5;
  const auto pairs = four_pairs();
  ContrastiveModel<double> model(cfg, build_vocab(pairs));
  const auto r = train_toy(model, pairs);
  ASSERT_EQ(r.trace.size(), 5u);
  for (const auto& step : r.trace) EXPECT_EQ(step.loss, r.trace.front().loss);
  EXPECT_EQ(r.final_report.loss, r.trace.front().loss);
}

TEST(TrainToy, SgdAlsoLowersLoss) {
  auto cfg = tiny_config();
  cfg.optimizer = TrainConfig::Optimizer::Sgd;
  cfg.degenerate_init = false;
  cfg.lr = 0.05;
  cfg.steps = 20;
  const auto pairs = four_pairs();
  ContrastiveModel<double> model(cfg, build_vocab(pairs));
  const auto r = train_toy(model, pairs);
  EXPECT_LT(r.final_report.loss, r.trace.front().loss);
}

TEST(TrainToy, NonFiniteLossNamesTheStep) {
  const auto pairs = four_pairs();
  ContrastiveModel<double> model(tiny_config(), build_vocab(pairs));
  model.params()["text.embed"].value[0] = std::numeric_limits<double>::infinity();
  try {
    train_toy(model, pairs);
    FAIL() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    EXPECT_EQ(e.step(), 0u);
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos);
  }
}

TEST(TrainToy, SeededRunIsReproducibleAndLearns) {
  const auto pairs = synthetic_pairs(0);
  TrainConfig cfg;
  ContrastiveModel<double> a(cfg, build_vocab(pairs)), b(cfg, build_vocab(pairs));
  const auto ra = train_toy(a, pairs), rb = train_toy(b, pairs);
  ASSERT_EQ(ra.trace.size(), 200u);
  EXPECT_LE(std::abs(ra.final_report.loss - rb.final_report.loss), 1e-6);
  EXPECT_NEAR(ra.trace.front().loss, std::log(16.0), 1e-3);
  for (std::size_t i = 1; i < ra.trace.size(); ++i) EXPECT_LE(ra.trace[i].loss, 10 * ra.trace[i - 1].loss) << i;
  EXPECT_GE(ra.final_report.v2t_accuracy, 0.9);
  EXPECT_GE(ra.final_report.t2v_accuracy, 0.9);

  const auto csv = trace_csv(ra.trace);
  EXPECT_EQ(csv.rfind("step,loss,v2t_acc,t2v_acc\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 201);
}

TEST(TrainToy, CheckpointHoldsEncoderWeights) {
  const auto pairs = four_pairs();
  ContrastiveModel<double> model(tiny_config(), build_vocab(pairs));
  const auto path = trajtok::testing::scratch_dir("ckpt") + "/model.ckpt";
  model.save(path);
  const auto tensors = decode_checkpoint(detail::read_file(path));
  bool found = false;
  for (const auto& t : tensors)
    if (t.name == "enc.token.fc2.w") {
      found = true;
      EXPECT_EQ(t.shape, (std::vector<std::uint32_t>{16, 16}));
    }
  EXPECT_TRUE(found);
}
