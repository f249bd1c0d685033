#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "trajtok/autodiff.hpp"
#include "trajtok/checkpoint.hpp"
#include "trajtok/tracking_merge.hpp"
#include "trajtok/trajectory_encoder.hpp"
#include "trajtok/video_io.hpp"

namespace trajtok {

struct LossReport {
  double loss = 0;
  double v2t_accuracy = 0;
  double t2v_accuracy = 0;
};

/// Fraction of rows (or columns) whose best match is the diagonal entry.
/// Ties resolve to the lowest index.
inline std::pair<double, double> retrieval_accuracy(const std::vector<double>& sim, std::size_t batch) {
  std::size_t v2t = 0, t2v = 0;
  for (std::size_t i = 0; i < batch; ++i) {
    std::size_t best_row = 0, best_col = 0;
    for (std::size_t j = 1; j < batch; ++j) {
      if (sim[i * batch + j] > sim[i * batch + best_row]) best_row = j;
      if (sim[j * batch + i] > sim[best_col * batch + i]) best_col = j;
    }
    v2t += best_row == i;
    t2v += best_col == i;
  }
  return {double(v2t) / double(batch), double(t2v) / double(batch)};
}

namespace detail {

/// Symmetric InfoNCE on a B x B similarity matrix; optionally writes dL/dsim.
inline double info_nce(const std::vector<double>& sim, std::size_t batch, double tau, std::vector<double>* dsim) {
  const double b = double(batch);
  double loss = 0;
  if (dsim) dsim->assign(batch * batch, 0.0);
  for (int axis = 0; axis < 2; ++axis)
    for (std::size_t i = 0; i < batch; ++i) {
      auto at = [&](std::size_t j) -> std::size_t { return axis == 0 ? i * batch + j : j * batch + i; };
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < batch; ++j) mx = std::max(mx, sim[at(j)] / tau);
      double z = 0;
      for (std::size_t j = 0; j < batch; ++j) z += std::exp(sim[at(j)] / tau - mx);
      loss += (mx + std::log(z) - sim[at(i)] / tau) / (2 * b);
      if (dsim)
        for (std::size_t j = 0; j < batch; ++j) {
          const double p = std::exp(sim[at(j)] / tau - mx) / z;
          (*dsim)[at(j)] += (p - (i == j ? 1.0 : 0.0)) / (2 * b * tau);
        }
    }
  return loss;
}

}  // namespace detail

/// Symmetric CLIP loss over unit-norm video and text embeddings (rows).
inline LossReport clip_loss(const std::vector<std::vector<double>>& video, const std::vector<std::vector<double>>& text,
                            double tau) {
  if (video.size() != text.size()) throw std::invalid_argument("video and text batches differ in size");
  if (video.size() < 2) throw std::invalid_argument("contrastive batch needs B >= 2");
  if (!(tau > 0)) throw std::invalid_argument("temperature must be positive");
  const std::size_t b = video.size();
  for (const auto* side : {&video, &text})
    for (const auto& e : *side) {
      double n = 0;
      for (double x : e) n += x * x;
      if (std::abs(std::sqrt(n) - 1.0) > 1e-4) throw std::invalid_argument("embeddings must be L2-normalized");
    }
  std::vector<double> sim(b * b);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j) {
      if (video[i].size() != text[j].size()) throw std::invalid_argument("embedding width mismatch");
      double s = 0;
      for (std::size_t k = 0; k < video[i].size(); ++k) s += video[i][k] * text[j][k];
      sim[i * b + j] = s;
    }
  const auto [v2t, t2v] = retrieval_accuracy(sim, b);
  return {detail::info_nce(sim, b, tau, nullptr), v2t, t2v};
}

namespace ad {

/// Differentiable CLIP loss. `log_tau` is a [1] tensor; tau = exp(log_tau)
/// clamped to [tau_min, tau_max] (no gradient when clamped).
template <class T>
Var<T> clip_loss(const Var<T>& video, const Var<T>& text, const Var<T>& log_tau, T tau_min, T tau_max,
                 LossReport* report = nullptr) {
  const std::size_t b = video.rows(), d = video.cols();
  if (text.rows() != b || text.cols() != d) throw std::invalid_argument("clip_loss: shape mismatch");
  if (b < 2) throw std::invalid_argument("contrastive batch needs B >= 2");
  const double raw = std::exp(double(log_tau.value()[0]));
  const double tau = std::clamp(raw, double(tau_min), double(tau_max));
  const bool clamped = raw != tau;
  std::vector<double> sim(b * b);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < d; ++k) s += double(video.value()[i * d + k]) * double(text.value()[j * d + k]);
      sim[i * b + j] = s;
    }
  std::vector<double> dsim;
  const double loss = trajtok::detail::info_nce(sim, b, tau, &dsim);
  if (report) {
    const auto [v2t, t2v] = retrieval_accuracy(sim, b);
    *report = {loss, v2t, t2v};
  }
  auto& tape = video.tape();
  auto res = tape.push({1}, {T(loss)});
  tape.on_backward(res, [video, text, log_tau, res, dsim = std::move(dsim), sim = std::move(sim), b, d, tau, clamped] {
    const double g = double(res.grad()[0]);
    auto& gv = video.grad();
    auto& gt = text.grad();
    double dtau = 0;
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < b; ++j) {
        const double ds = g * dsim[i * b + j];
        // d(loss)/d(tau) = -sum_ij dL/dlogit_ij * sim_ij / tau^2 = -sum dsim * sim / tau
        dtau -= ds * sim[i * b + j] / tau;
        for (std::size_t k = 0; k < d; ++k) {
          gv[i * d + k] += T(ds * double(text.value()[j * d + k]));
          gt[j * d + k] += T(ds * double(video.value()[i * d + k]));
        }
      }
    if (!clamped) log_tau.grad()[0] += T(dtau * tau);
  });
  return res;
}

}  // namespace ad

// ---------------------------------------------------------------------------

inline EncoderConfig toy_encoder_config() {
  auto c = EncoderConfig::small();
  c.model_dim = 64;
  return c;
}

struct TrainConfig {
  EncoderConfig encoder = toy_encoder_config();
  std::size_t transformer_blocks = 2;
  std::size_t transformer_heads = 4;
  double initial_tau = 0.07;
  double tau_min = 0.01, tau_max = 1.0;
  /// Scales the output projections of both towers so every embedding starts
  /// at (nearly) the same unit vector; the first loss is then ln B.
  bool degenerate_init = true;
  double degenerate_scale = 1e-6;
  enum class Optimizer { Sgd, Adam } optimizer = Optimizer::Adam;
  double lr = 1e-3;
  std::size_t steps = 200;
  std::uint64_t seed = 0;
};

/// Video/caption pair used by the toy trainer. Caption tokens index `vocab`.
struct PairedSample {
  VideoClip video;
  TrajectorySet trajectories;
  std::vector<std::string> caption;
};

/// 16 pairs separable by object count (1-4) and object colour (4 colours).
inline std::vector<PairedSample> synthetic_pairs(std::uint64_t seed = 0, std::uint32_t side = 32, std::uint32_t frames = 4) {
  const std::array<std::pair<const char*, Rgb>, 4> colours = {{{"red", {224, 32, 32}},
                                                              {"green", {32, 224, 32}},
                                                              {"blue", {32, 32, 224}},
                                                              {"yellow", {224, 224, 32}}}};
  const char* counts[] = {"one", "two", "three", "four"};
  std::vector<PairedSample> out;
  for (std::uint32_t n = 1; n <= 4; ++n)
    for (const auto& [name, rgb] : colours) {
      SyntheticSpec spec;
      spec.kind = SceneKind::MovingBlocks;
      spec.objects = n;
      spec.frames = frames;
      spec.width = spec.height = side;
      spec.seed = seed * 1000 + out.size();
      spec.palette = std::vector<Rgb>(n + 1, rgb);
      spec.palette[0] = {96, 96, 96};
      auto video = synthesize_video(spec);
      auto trajs = generate_trajectories(video);
      out.push_back({std::move(video), std::move(trajs), {counts[n - 1], name}});
    }
  return out;
}

/// Writes pairs as NAME.rvid + NAME.txt (space-separated caption).
inline void write_pairs(const std::string& dir, const std::vector<PairedSample>& pairs) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const std::string stem = dir + "/pair_" + std::to_string(100 + i).substr(1);
    write_raw_video(stem + ".rvid", pairs[i].video);
    std::ofstream txt(stem + ".txt");
    for (std::size_t k = 0; k < pairs[i].caption.size(); ++k) txt << (k ? " " : "") << pairs[i].caption[k];
    txt << "\n";
  }
}

/// Reads every NAME.rvid with a sibling NAME.txt, in filename order, and
/// generates trajectories with the default pipeline.
inline std::vector<PairedSample> read_pairs(const std::string& dir) {
  std::vector<std::filesystem::path> videos;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.path().extension() == ".rvid") videos.push_back(e.path());
  std::sort(videos.begin(), videos.end());
  std::vector<PairedSample> out;
  for (const auto& v : videos) {
    auto txt_path = v;
    txt_path.replace_extension(".txt");
    std::ifstream txt(txt_path);
    if (!txt) continue;
    std::vector<std::string> words;
    for (std::string w; txt >> w;) words.push_back(w);
    auto video = load_raw_video(v.string());
    auto trajs = generate_trajectories(video);
    out.push_back({std::move(video), std::move(trajs), std::move(words)});
  }
  return out;
}

/// Trajectory-token video tower (encoder + small transformer with a readout
/// token) and a bag-of-embeddings text tower, trained with a CLIP objective.
template <class T>
class ContrastiveModel {
 public:
  using Var = ad::Var<T>;
  using Tape = ad::Tape<T>;

  ContrastiveModel(TrainConfig cfg, std::vector<std::string> vocab)
      : cfg_(std::move(cfg)), vocab_(std::move(vocab)), encoder_(cfg_.encoder, params_, "enc.") {
    TrajectoryEncoder<T>::init_params(cfg_.encoder, params_, cfg_.seed, "enc.");
    std::mt19937_64 rng(cfg_.seed + 1);
    const std::size_t d = cfg_.encoder.model_dim;
    auto dense = [&](const std::string& name, std::size_t out, std::size_t in, double gain) {
      params_.add(name + ".w", {out, in}, ad::normal_values<T>(out * in, T(gain / std::sqrt(double(in))), rng));
      params_.add(name + ".b", {out}, std::vector<T>(out, T(0)));
    };
    auto norm = [&](const std::string& name) {
      params_.add(name + ".g", {d}, std::vector<T>(d, T(1)));
      params_.add(name + ".b", {d}, std::vector<T>(d, T(0)));
    };
    params_.add("tf.readout", {1, d}, ad::normal_values<T>(d, T(1), rng));
    for (std::size_t l = 0; l < cfg_.transformer_blocks; ++l) {
      const std::string b = "tf.block" + std::to_string(l);
      norm(b + ".ln1");
      for (const char* m : {".wq", ".wk", ".wv", ".wo"}) dense(b + m, d, d, 1.0);
      norm(b + ".ln2");
      dense(b + ".ffn1", 2 * d, d, 1.0);
      dense(b + ".ffn2", d, 2 * d, 1.0);
    }
    norm("tf.ln_f");
    dense("video.proj", d, d, 1.0);
    params_.add("text.embed", {vocab_.size(), d}, ad::normal_values<T>(vocab_.size() * d, T(1), rng));
    dense("text.proj", d, d, 1.0);
    params_.add("log_tau", {1}, {T(std::log(cfg_.initial_tau))});
    if (cfg_.degenerate_init) {
      // Shared bias direction, vanishing weights: all embeddings coincide.
      auto shared = ad::normal_values<T>(d, T(1), rng);
      for (const char* tower : {"video.proj", "text.proj"}) {
        for (auto& w : params_[std::string(tower) + ".w"].value) w *= T(cfg_.degenerate_scale);
        params_[std::string(tower) + ".b"].value = shared;
      }
    }
  }

  ad::ParameterSet<T>& params() { return params_; }
  const TrainConfig& config() const { return cfg_; }
  const std::vector<std::string>& vocab() const { return vocab_; }
  const TrajectoryEncoder<T>& encoder() const { return encoder_; }

  std::vector<std::size_t> token_ids(const std::vector<std::string>& caption) const {
    std::vector<std::size_t> ids;
    for (const auto& w : caption) {
      auto it = std::find(vocab_.begin(), vocab_.end(), w);
      if (it == vocab_.end()) throw std::invalid_argument("caption word not in vocabulary: " + w);
      ids.push_back(static_cast<std::size_t>(it - vocab_.begin()));
    }
    if (ids.empty()) throw std::invalid_argument("empty caption");
    return ids;
  }

  /// Unit-norm video embedding [1, d].
  Var embed_video(Tape& tape, const PreparedVideo<T>& video) const {
    Var x = ad::concat_rows(tape.param(p("tf.readout")), encoder_.encode(tape, video));
    for (std::size_t l = 0; l < cfg_.transformer_blocks; ++l) {
      const std::string b = "tf.block" + std::to_string(l);
      Var h = norm(tape, b + ".ln1", x);
      Var a = ad::attention(dense(tape, b + ".wq", h), dense(tape, b + ".wk", h), dense(tape, b + ".wv", h),
                            cfg_.transformer_heads);
      x = ad::add(x, dense(tape, b + ".wo", a));
      h = norm(tape, b + ".ln2", x);
      x = ad::add(x, dense(tape, b + ".ffn2", ad::activation(dense(tape, b + ".ffn1", h), cfg_.encoder.mlp_activation)));
    }
    Var readout = ad::row(norm(tape, "tf.ln_f", x), 0);
    return ad::l2_normalize_rows(dense(tape, "video.proj", readout));
  }

  /// Unit-norm text embedding [1, d].
  Var embed_text(Tape& tape, const std::vector<std::size_t>& ids) const {
    Var mean = ad::mean_rows(ad::embedding(tape.param(p("text.embed")), ids));
    return ad::l2_normalize_rows(dense(tape, "text.proj", mean));
  }

  /// Forward pass of the whole batch; returns the scalar loss node.
  Var loss(Tape& tape, const std::vector<PreparedVideo<T>>& videos, const std::vector<std::vector<std::size_t>>& captions,
           LossReport* report = nullptr) const {
    if (videos.size() != captions.size()) throw std::invalid_argument("batch is not index-aligned");
    if (videos.size() < 2) throw std::invalid_argument("contrastive batch needs B >= 2");
    std::vector<Var> v, t;
    for (const auto& video : videos) v.push_back(embed_video(tape, video));
    for (const auto& ids : captions) t.push_back(embed_text(tape, ids));
    return ad::clip_loss(ad::stack_rows(v), ad::stack_rows(t), tape.param(p("log_tau")), T(cfg_.tau_min),
                         T(cfg_.tau_max), report);
  }

  double temperature() const {
    return std::clamp(std::exp(double(params_["log_tau"].value[0])), cfg_.tau_min, cfg_.tau_max);
  }

  void save(const std::string& path) const {
    auto tensors = encoder_meta(cfg_.encoder, "enc.");
    tensors.push_back(meta_tensor("transformer_blocks", double(cfg_.transformer_blocks)));
    tensors.push_back(meta_tensor("transformer_heads", double(cfg_.transformer_heads)));
    auto body = tensors_from(params_);
    tensors.insert(tensors.end(), body.begin(), body.end());
    detail::write_file(path, encode_checkpoint(tensors));
  }

 private:
  ad::Parameter<T>& p(const std::string& name) const { return const_cast<ad::ParameterSet<T>&>(params_)[name]; }

  Var dense(Tape& tape, const std::string& name, const Var& x) const {
    Var b = tape.param(p(name + ".b"));
    return ad::linear(x, tape.param(p(name + ".w")), &b);
  }

  Var norm(Tape& tape, const std::string& name, const Var& x) const {
    return ad::layer_norm(x, tape.param(p(name + ".g")), tape.param(p(name + ".b")));
  }

  TrainConfig cfg_;
  std::vector<std::string> vocab_;
  ad::ParameterSet<T> params_;
  TrajectoryEncoder<T> encoder_;
};

/// Sorted vocabulary of every caption word.
inline std::vector<std::string> build_vocab(const std::vector<PairedSample>& pairs) {
  std::vector<std::string> v;
  for (const auto& s : pairs) v.insert(v.end(), s.caption.begin(), s.caption.end());
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, std::size_t step) : std::runtime_error(what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

struct TrainResult {
  std::vector<LossReport> trace;  // one entry per step, measured before the update
  LossReport final_report;        // after the last update
};

/// Full-batch contrastive training; deterministic for a given seed.
inline TrainResult train_toy(ContrastiveModel<double>& model, const std::vector<PairedSample>& pairs) {
  const auto& cfg = model.config();
  if (pairs.size() < 2) throw std::invalid_argument("contrastive batch needs B >= 2");
  std::vector<PreparedVideo<double>> videos;
  std::vector<std::vector<std::size_t>> captions;
  for (const auto& s : pairs) {
    videos.push_back(prepare_video<double>(s.video, s.trajectories, cfg.encoder));
    captions.push_back(model.token_ids(s.caption));
  }
  auto& params = model.params();
  std::vector<std::vector<double>> m1(params.size()), m2(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    m1[i].assign(params.at(i).size(), 0.0);
    m2[i].assign(params.at(i).size(), 0.0);
  }
  const double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;

  TrainResult result;
  for (std::size_t step = 0; step <= cfg.steps; ++step) {
    params.zero_grad();
    ad::Tape<double> tape;
    LossReport report;
    auto loss = model.loss(tape, videos, captions, &report);
    if (!std::isfinite(report.loss))
      throw TrainingDiverged("non-finite loss at step " + std::to_string(step), step);
    if (step == cfg.steps) {
      result.final_report = report;
      break;
    }
    result.trace.push_back(report);
    tape.backward(loss);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& prm = params.at(i);
      for (std::size_t k = 0; k < prm.size(); ++k) {
        const double g = prm.grad[k];
        if (!std::isfinite(g)) throw TrainingDiverged("non-finite gradient in " + prm.name + " at step " + std::to_string(step), step);
        if (cfg.optimizer == TrainConfig::Optimizer::Sgd) {
          prm.value[k] -= cfg.lr * g;
        } else {
          m1[i][k] = beta1 * m1[i][k] + (1 - beta1) * g;
          m2[i][k] = beta2 * m2[i][k] + (1 - beta2) * g * g;
          const double mhat = m1[i][k] / (1 - std::pow(beta1, double(step + 1)));
          const double vhat = m2[i][k] / (1 - std::pow(beta2, double(step + 1)));
          prm.value[k] -= cfg.lr * mhat / (std::sqrt(vhat) + adam_eps);
        }
      }
    }
  }
  return result;
}

inline std::string trace_csv(const std::vector<LossReport>& trace) {
  std::ostringstream out;
  out.precision(9);
  out << "step,loss,v2t_acc,t2v_acc\n";
  for (std::size_t i = 0; i < trace.size(); ++i)
    out << i << ',' << trace[i].loss << ',' << trace[i].v2t_accuracy << ',' << trace[i].t2v_accuracy << '\n';
  return out.str();
}

}  // namespace trajtok
