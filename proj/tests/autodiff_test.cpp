#include <gtest/gtest.h>

#include <functional>
#include <random>

#include "support.hpp"
#include "trajtok/autodiff.hpp"

using namespace trajtok;
using namespace trajtok::ad;
using trajtok::testing::check_gradients;

namespace {

using Builder = std::function<Var<double>(Tape<double>&, ParameterSet<double>&)>;

/// Checks every entry of every parameter against central differences of a
/// random linear probe of the op output.
double worst_gradient_error(ParameterSet<double>& params, const Builder& build, std::uint64_t seed = 1) {
  std::vector<double> probe;
  auto loss = [&](bool backward) {
    Tape<double> tape;
    auto out = build(tape, params);
    if (probe.empty()) {
      std::mt19937_64 rng(seed + 100);
      probe = normal_values<double>(out.size(), 1.0, rng);
    }
    auto l = dot_constant(out, probe);
    if (backward) tape.backward(l);
    return l.value()[0];
  };
  params.zero_grad();
  loss(true);
  std::vector<std::string> names;
  for (std::size_t i = 0; i < params.size(); ++i) names.push_back(params.at(i).name);
  const auto r = check_gradients(params, names, [&] { return loss(false); }, 100000, seed, 1e-5);
  EXPECT_GT(r.checked, 0u);
  if (r.worst > 1e-6) ADD_FAILURE() << r.worst_at;
  return r.worst;
}

Parameter<double>& random_param(ParameterSet<double>& ps, const std::string& name, Shape shape, std::mt19937_64& rng,
                                double sd = 1.0) {
  const auto n = numel(shape);
  return ps.add(name, std::move(shape), normal_values<double>(n, sd, rng));
}

}  // namespace

TEST(Autodiff, AddScaleActivations) {
  std::mt19937_64 rng(1);
  ParameterSet<double> ps;
  random_param(ps, "a", {3, 4}, rng);
  random_param(ps, "b", {3, 4}, rng);
  for (auto act : {Activation::Identity, Activation::Gelu}) {
    worst_gradient_error(ps, [&](Tape<double>& t, ParameterSet<double>& p) {
      return activation(scale(add(t.param(p["a"]), t.param(p["b"])), 1.5), act);
    });
  }
}

TEST(Autodiff, ReluAwayFromKink) {
  ParameterSet<double> ps;
  ps.add("x", {1, 4}, {-1.0, -0.3, 0.4, 2.0});
  worst_gradient_error(ps, [](Tape<double>& t, ParameterSet<double>& p) { return activation(t.param(p["x"]), Activation::Relu); });
}

TEST(Autodiff, LinearWithBias) {
  std::mt19937_64 rng(2);
  ParameterSet<double> ps;
  random_param(ps, "x", {3, 5}, rng);
  random_param(ps, "w", {4, 5}, rng);
  random_param(ps, "b", {4}, rng);
  worst_gradient_error(ps, [](Tape<double>& t, ParameterSet<double>& p) {
    auto b = t.param(p["b"]);
    return linear(t.param(p["x"]), t.param(p["w"]), &b);
  });
}

TEST(Autodiff, LinearValueMatchesMatmul) {
  Tape<double> t(false);
  auto x = t.constant({1, 2}, {1, 2});
  auto w = t.constant({2, 2}, {3, 4, 5, 6});
  auto b = t.constant({2}, {0.5, -0.5});
  EXPECT_EQ(linear(x, w, &b).value(), (std::vector<double>{11.5, 16.5}));
}

TEST(Autodiff, LayerNorm) {
  std::mt19937_64 rng(3);
  ParameterSet<double> ps;
  random_param(ps, "x", {3, 6}, rng);
  random_param(ps, "g", {6}, rng);
  random_param(ps, "b", {6}, rng);
  worst_gradient_error(ps, [](Tape<double>& t, ParameterSet<double>& p) {
    return layer_norm(t.param(p["x"]), t.param(p["g"]), t.param(p["b"]));
  });
}

TEST(Autodiff, RowOpsAndNormalize) {
  std::mt19937_64 rng(4);
  ParameterSet<double> ps;
  random_param(ps, "a", {2, 4}, rng);
  random_param(ps, "b", {1, 4}, rng);
  random_param(ps, "e", {5, 4}, rng);
  worst_gradient_error(ps, [](Tape<double>& t, ParameterSet<double>& p) {
    auto a = t.param(p["a"]);
    auto b = t.param(p["b"]);
    auto cat = concat_rows(b, a);
    auto st = stack_rows<double>({row(cat, 2), mean_rows(a), mean_rows(embedding(t.param(p["e"]), {3, 0, 3}))});
    return l2_normalize_rows(st);
  });
}

TEST(Autodiff, NormalizeGivesUnitRows) {
  Tape<double> t(false);
  auto n = l2_normalize_rows(t.constant({2, 2}, {3, 4, 0, 2}));
  EXPECT_NEAR(n.value()[0], 0.6, 1e-12);
  EXPECT_NEAR(n.value()[3], 1.0, 1e-12);
}

TEST(Autodiff, Conv2dStridedAndPadded) {
  std::mt19937_64 rng(5);
  ParameterSet<double> ps;
  random_param(ps, "x", {2, 7, 7}, rng);
  random_param(ps, "w", {3, 2, 3, 3}, rng);
  random_param(ps, "b", {3}, rng);
  worst_gradient_error(ps, [](Tape<double>& t, ParameterSet<double>& p) {
    return conv2d(t.param(p["x"]), t.param(p["w"]), t.param(p["b"]), 2, 1);
  });
}

TEST(Autodiff, Conv2dMatchesDirectLoop) {
  std::mt19937_64 rng(6);
  const auto xv = normal_values<double>(2 * 5 * 5, 1.0, rng), wv = normal_values<double>(1 * 2 * 3 * 3, 1.0, rng);
  Tape<double> t(false);
  auto y = conv2d(t.constant({2, 5, 5}, xv), t.constant({1, 2, 3, 3}, wv), t.constant({1}, {0.25}), 2, 1);
  ASSERT_EQ(y.shape(), (Shape{1, 3, 3}));
  for (int oy = 0; oy < 3; ++oy)
    for (int ox = 0; ox < 3; ++ox) {
      double acc = 0.25;
      for (int c = 0; c < 2; ++c)
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const int iy = oy * 2 - 1 + ky, ix = ox * 2 - 1 + kx;
            if (iy < 0 || ix < 0 || iy >= 5 || ix >= 5) continue;
            acc += xv[(c * 5 + iy) * 5 + ix] * wv[(c * 3 + ky) * 3 + kx];
          }
      EXPECT_NEAR(y.value()[oy * 3 + ox], acc, 1e-12);
    }
}

TEST(Autodiff, ResizeBilinear) {
  std::mt19937_64 rng(7);
  ParameterSet<double> ps;
  random_param(ps, "x", {2, 3, 3}, rng);
  worst_gradient_error(ps, [](Tape<double>& t, ParameterSet<double>& p) { return resize_bilinear(t.param(p["x"]), 8); });
  worst_gradient_error(ps, [](Tape<double>& t, ParameterSet<double>& p) { return resize_bilinear(t.param(p["x"]), 2); });
}

TEST(Autodiff, ResizeKeepsConstantsAndIdentity) {
  Tape<double> t(false);
  auto c = resize_bilinear(t.constant({1, 2, 2}, {3, 3, 3, 3}), 7);
  for (auto v : c.value()) EXPECT_NEAR(v, 3.0, 1e-12);
  std::vector<double> x = {1, 2, 3, 4, 5, 6, 7, 8, 9};
  EXPECT_EQ(resize_bilinear(t.constant({1, 3, 3}, x), 3).value(), x);
}

TEST(Autodiff, MaskPool) {
  std::mt19937_64 rng(8);
  ParameterSet<double> ps;
  random_param(ps, "f", {3, 4, 4}, rng);
  std::vector<double> mask(16, 0.0);
  mask[1] = mask[5] = mask[6] = 1.0;
  worst_gradient_error(ps, [&](Tape<double>& t, ParameterSet<double>& p) {
    return mask_pool(t.param(p["f"]), std::span<const double>(mask), 1e-6);
  });
}

TEST(Autodiff, RotaryAndAttention) {
  std::mt19937_64 rng(9);
  ParameterSet<double> ps;
  random_param(ps, "q", {2, 8}, rng);
  random_param(ps, "k", {5, 8}, rng);
  random_param(ps, "v", {5, 8}, rng);
  worst_gradient_error(ps, [](Tape<double>& t, ParameterSet<double>& p) {
    auto q = rotary(t.param(p["q"]), std::vector<double>{0, 3}, 2);
    auto k = rotary(t.param(p["k"]), std::vector<double>{0, 1, 2, 7, 30}, 2);
    return attention(q, k, t.param(p["v"]), 2);
  });
}

TEST(Autodiff, RotaryPreservesNormAndIsIdentityAtZero) {
  std::mt19937_64 rng(10);
  const auto x = normal_values<double>(8, 1.0, rng);
  Tape<double> t(false);
  EXPECT_EQ(rotary(t.constant({1, 8}, x), std::vector<double>{0}, 2).value(), x);
  const auto r = rotary(t.constant({1, 8}, x), std::vector<double>{5}, 2).value();
  for (std::size_t i = 0; i < 8; i += 2)
    EXPECT_NEAR(r[i] * r[i] + r[i + 1] * r[i + 1], x[i] * x[i] + x[i + 1] * x[i + 1], 1e-12);
  // first pair of each head rotates by the position itself
  EXPECT_NEAR(r[0], x[0] * std::cos(5.0) - x[1] * std::sin(5.0), 1e-12);
}

TEST(Autodiff, AttentionWeightsSumToOne) {
  std::mt19937_64 rng(11);
  Tape<double> t(false);
  std::vector<double> w;
  auto q = t.constant({3, 4}, normal_values<double>(12, 1.0, rng));
  auto k = t.constant({6, 4}, normal_values<double>(24, 1.0, rng));
  auto v = t.constant({6, 4}, normal_values<double>(24, 1.0, rng));
  attention(q, k, v, 2, &w);
  ASSERT_EQ(w.size(), 2u * 3 * 6);
  for (std::size_t r = 0; r < 6; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < 6; ++j) s += w[r * 6 + j];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Autodiff, SharedSubexpressionsAccumulate) {
  ParameterSet<double> ps;
  ps.add("x", {1, 2}, {0.5, -1.5});
  worst_gradient_error(ps, [](Tape<double>& t, ParameterSet<double>& p) {
    auto x = t.param(p["x"]);
    auto y = activation(x, Activation::Gelu);
    return add(y, add(x, y));
  });
}

TEST(Autodiff, ParameterSetErrors) {
  ParameterSet<double> ps;
  ps.add("a", {2}, {1, 2});
  EXPECT_THROW(ps.add("a", {2}, {1, 2}), std::invalid_argument);
  EXPECT_THROW(ps.add("b", {3}, {1, 2}), std::invalid_argument);
  EXPECT_THROW(ps["zzz"], std::out_of_range);
  Tape<double> t(false);
  EXPECT_THROW(t.backward(t.constant({1}, {1.0})), std::logic_error);
}
