// trajtok: command-line front end for trajectory tokenization.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "trajtok/bench.hpp"
#include "trajtok/checkpoint.hpp"
#include "trajtok/keyframe_detect.hpp"
#include "trajtok/segmentation.hpp"
#include "trajtok/tracking_merge.hpp"
#include "trajtok/training.hpp"
#include "trajtok/trajectory_encoder.hpp"
#include "trajtok/trajectory_store.hpp"
#include "trajtok/video_io.hpp"

namespace {

using namespace trajtok;

template <class T>
std::vector<T> split_list(const std::string& s) {
  std::vector<T> out;
  std::stringstream in(s);
  for (std::string item; std::getline(in, item, ',');) {
    if (item.empty()) continue;
    if constexpr (std::is_same_v<T, std::string>) {
      out.push_back(item);
    } else {
      std::size_t used = 0;
      const auto v = std::stoull(item, &used);
      if (used != item.size()) throw std::invalid_argument("not an integer: " + item);
      out.push_back(static_cast<T>(v));
    }
  }
  return out;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << text;
}

struct PipelineFlags {
  std::size_t max_clip = 16;
  double iou = 0.8;
  std::size_t workers = 1;
  std::string seg_backend = "builtin", seg_dir;
  std::string track_backend = "builtin", track_dir;
  std::string mode = "full";
  std::uint32_t radius = 4;

  void attach(CLI::App* cmd) {
    cmd->add_option("--max-clip", max_clip, "Split clips longer than this")->capture_default_str();
    cmd->add_option("--iou", iou, "Merge when IoU exceeds this")->capture_default_str();
    cmd->add_option("--workers", workers, "Worker threads")->capture_default_str();
    cmd->add_option("--seg-backend", seg_backend, "builtin | external")->capture_default_str();
    cmd->add_option("--seg-dir", seg_dir, "Label maps for the external segmenter");
    cmd->add_option("--track-backend", track_backend, "builtin | external")->capture_default_str();
    cmd->add_option("--track-dir", track_dir, "Clip label maps for the external tracker");
    cmd->add_option("--mode", mode, "full | segmentation-only | tracking-only")->capture_default_str();
    cmd->add_option("--radius", radius, "Built-in tracker search radius")->capture_default_str();
  }

  PipelineConfig config() const {
    PipelineConfig c;
    c.tracker.max_clip_length = max_clip;
    c.tracker.merge_iou_threshold = iou;
    c.tracker.search_radius = radius;
    c.workers = workers;
    c.mode = parse_ablation_mode(mode);
    if (seg_backend == "external") {
      c.segmenter.backend = SegmenterBackend::External;
      c.segmenter.external_dir = seg_dir;
    } else if (seg_backend != "builtin") {
      throw std::invalid_argument("unknown segmenter backend: " + seg_backend);
    }
    if (track_backend == "external") {
      c.tracker.backend = TrackerBackend::External;
      c.tracker.external_dir = track_dir;
    } else if (track_backend != "builtin") {
      throw std::invalid_argument("unknown tracker backend: " + track_backend);
    }
    return c;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Grounded video tokenization: trajectories, tokens and token budgets"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Write a synthetic video (or the toy caption pairs)");
  std::string synth_kind = "static-blocks", synth_out, synth_pairs;
  SyntheticSpec spec;
  std::uint32_t synth_size = 64;
  synth->add_option("--kind", synth_kind, "static-blocks | moving-blocks | hard-cut | camera-pan")->capture_default_str();
  synth->add_option("--objects", spec.objects)->capture_default_str();
  synth->add_option("--frames", spec.frames)->capture_default_str();
  synth->add_option("--size", synth_size, "Square frame side")->capture_default_str();
  synth->add_option("--seed", spec.seed)->capture_default_str();
  synth->add_option("--fps", spec.fps)->capture_default_str();
  synth->add_option("--pan", spec.pan_speed, "camera-pan pixels per frame")->capture_default_str();
  synth->add_option("--cut", spec.cut_frame, "hard-cut frame (0 = middle)")->capture_default_str();
  synth->add_option("--out", synth_out, "Output .rvid");
  synth->add_option("--pairs", synth_pairs, "Write the 16 toy video/caption pairs to this directory instead");

  // keyframes
  auto* kf = app.add_subcommand("keyframes", "Detect key frames");
  std::string kf_video;
  KeyframeConfig kf_cfg;
  bool kf_json = false;
  kf->add_option("video", kf_video)->required();
  kf->add_option("--hsv", kf_cfg.hsv_threshold)->capture_default_str();
  kf->add_option("--luma", kf_cfg.luma_corr_threshold)->capture_default_str();
  kf->add_option("--rgb", kf_cfg.rgb_threshold)->capture_default_str();
  kf->add_option("--votes", kf_cfg.min_votes)->capture_default_str();
  kf->add_flag("--json", kf_json, "Emit keyframes and clips as JSON");

  // segment
  auto* seg = app.add_subcommand("segment", "Panoptically segment one frame");
  std::string seg_video, seg_out;
  std::size_t seg_frame = 0;
  SegmenterConfig seg_cfg;
  seg->add_option("video", seg_video)->required();
  seg->add_option("--frame", seg_frame)->capture_default_str();
  seg->add_option("--out", seg_out, "Output .lmap");
  seg->add_option("--levels", seg_cfg.quantization_levels)->capture_default_str();
  seg->add_option("--min-area", seg_cfg.min_area)->capture_default_str();

  // trajgen
  auto* tg = app.add_subcommand("trajgen", "Generate panoptic trajectories");
  std::string tg_video, tg_out;
  PipelineFlags tg_flags;
  tg->add_option("video", tg_video)->required();
  tg->add_option("--out", tg_out, "Output .traj")->required();
  tg_flags.attach(tg);

  // tokenize
  auto* tok = app.add_subcommand("tokenize", "Encode trajectories into tokens");
  std::string tok_video, tok_traj, tok_params, tok_out;
  std::size_t tok_workers = 1;
  tok->add_option("video", tok_video)->required();
  tok->add_option("traj", tok_traj)->required();
  tok->add_option("--params", tok_params, "Checkpoint")->required();
  tok->add_option("--out", tok_out, "Output tokens.f32")->required();
  tok->add_option("--workers", tok_workers)->capture_default_str();

  // init-params
  auto* ip = app.add_subcommand("init-params", "Write a freshly initialized encoder checkpoint");
  std::string ip_out, ip_preset = "small";
  std::uint64_t ip_seed = 0;
  std::size_t ip_model_dim = 0;
  ip->add_option("--out", ip_out)->required();
  ip->add_option("--preset", ip_preset, "small | full")->capture_default_str();
  ip->add_option("--seed", ip_seed)->capture_default_str();
  ip->add_option("--model-dim", ip_model_dim, "Override token width");

  // train-toy
  auto* tt = app.add_subcommand("train-toy", "Contrastive training on video/caption fixtures");
  std::string tt_fixtures, tt_out, tt_trace, tt_optimizer = "adam";
  TrainConfig tt_cfg;
  tt->add_option("--fixtures", tt_fixtures, "Directory of NAME.rvid + NAME.txt pairs")->required();
  tt->add_option("--steps", tt_cfg.steps)->capture_default_str();
  tt->add_option("--lr", tt_cfg.lr)->capture_default_str();
  tt->add_option("--seed", tt_cfg.seed)->capture_default_str();
  tt->add_option("--optimizer", tt_optimizer, "adam | sgd")->capture_default_str();
  tt->add_option("--out", tt_out, "Checkpoint");
  tt->add_option("--trace", tt_trace, "Loss trace CSV (default stdout)");

  // bench
  auto* bn = app.add_subcommand("bench", "Token counts and FLOPs across frame counts");
  std::string bn_fixture = "static-blocks", bn_frames = "8,16,32,64", bn_methods = "trajectory,patch3d", bn_out;
  std::uint32_t bn_size = 64, bn_objects = 4;
  std::uint64_t bn_seed = 7;
  BenchConfig bn_cfg;
  bn->add_option("--fixture", bn_fixture, "static | moving | hard-cut | pan, or a full scene kind")->capture_default_str();
  bn->add_option("--frames", bn_frames)->capture_default_str();
  bn->add_option("--methods", bn_methods, "trajectory,patch3d,segmentation-only,tracking-only")->capture_default_str();
  bn->add_option("--size", bn_size)->capture_default_str();
  bn->add_option("--objects", bn_objects)->capture_default_str();
  bn->add_option("--seed", bn_seed)->capture_default_str();
  bn->add_option("--patch", bn_cfg.patch)->capture_default_str();
  bn->add_option("--tubelet", bn_cfg.tubelet)->capture_default_str();
  bn->add_option("--out", bn_out, "CSV path (default stdout)");

  // overlay
  auto* ov = app.add_subcommand("overlay", "Render trajectory overlays as PPM frames");
  std::string ov_video, ov_traj, ov_out;
  ov->add_option("video", ov_video)->required();
  ov->add_option("traj", ov_traj)->required();
  ov->add_option("--out", ov_out)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      if (!synth_pairs.empty()) {
        write_pairs(synth_pairs, synthetic_pairs(spec.seed));
        return 0;
      }
      if (synth_out.empty()) throw std::invalid_argument("synth needs --out or --pairs");
      spec.kind = parse_scene_kind(synth_kind);
      spec.width = spec.height = synth_size;
      write_raw_video(synth_out, synthesize_video(spec));
    } else if (*kf) {
      kf_cfg.validate();
      const auto part = detect_keyframes(load_raw_video(kf_video), kf_cfg);
      if (kf_json) {
        nlohmann::json j;
        j["keyframes"] = part.keyframes();
        j["clips"] = nlohmann::json::array();
        for (const auto& c : part.clips()) j["clips"].push_back({c.start, c.end});
        std::cout << j.dump() << "\n";
      } else {
        for (auto k : part.keyframes()) std::cout << k << "\n";
      }
    } else if (*seg) {
      seg_cfg.validate();
      const auto video = load_raw_video(seg_video);
      if (seg_frame >= video.frame_count()) throw std::out_of_range("frame index past the end of the video");
      const auto map = segment_frame(video.frame(seg_frame), seg_cfg);
      if (!seg_out.empty()) write_label_map(seg_out, map);
      std::cout << "segments " << map.label_count() << "\n";
    } else if (*tg) {
      const auto set = generate_trajectories(load_raw_video(tg_video), tg_flags.config());
      write_traj(tg_out, set);
      std::cout << "trajectories " << set.size() << "\n";
    } else if (*tok) {
      ad::ParameterSet<float> params;
      const auto cfg = load_encoder_checkpoint(tok_params, params);
      const TrajectoryEncoder<float> encoder(cfg, params);
      const auto tokens = encoder.encode_video(load_raw_video(tok_video), read_traj(tok_traj), tok_workers);
      detail::write_file(tok_out, encode_tokens(tokens, cfg.model_dim));
      std::cout << "tokens " << tokens.size() << " x " << cfg.model_dim << "\n";
    } else if (*ip) {
      EncoderConfig cfg = ip_preset == "full" ? EncoderConfig{} : ip_preset == "small" ? EncoderConfig::small()
                                                                                        : throw std::invalid_argument("unknown preset: " + ip_preset);
      if (ip_model_dim) cfg.model_dim = ip_model_dim;
      ad::ParameterSet<float> params;
      TrajectoryEncoder<float>::init_params(cfg, params, ip_seed);
      save_encoder_checkpoint(ip_out, cfg, params);
      for (const auto& g : encoder_parameter_report(cfg)) std::cout << g.group << " " << g.count << "\n";
    } else if (*tt) {
      if (tt_optimizer == "sgd") tt_cfg.optimizer = TrainConfig::Optimizer::Sgd;
      else if (tt_optimizer != "adam") throw std::invalid_argument("unknown optimizer: " + tt_optimizer);
      const auto pairs = read_pairs(tt_fixtures);
      if (pairs.size() < 2)
        throw std::invalid_argument("need at least two pairs in " + tt_fixtures + " (try: trajtok synth --pairs DIR)");
      ContrastiveModel<double> model(tt_cfg, build_vocab(pairs));
      const auto result = train_toy(model, pairs);
      auto trace = result.trace;
      trace.push_back(result.final_report);
      if (tt_trace.empty()) std::cout << trace_csv(trace);
      else write_text(tt_trace, trace_csv(trace));
      if (!tt_out.empty()) model.save(tt_out);
      std::cerr << "final loss " << result.final_report.loss << " v2t " << result.final_report.v2t_accuracy << " t2v "
                << result.final_report.t2v_accuracy << "\n";
    } else if (*bn) {
      SyntheticSpec family;
      const std::map<std::string, std::string> alias = {
          {"static", "static-blocks"}, {"moving", "moving-blocks"}, {"pan", "camera-pan"}};
      family.kind = parse_scene_kind(alias.contains(bn_fixture) ? alias.at(bn_fixture) : bn_fixture);
      family.width = family.height = bn_size;
      family.objects = bn_objects;
      family.seed = bn_seed;
      std::vector<BenchMethod> methods;
      for (const auto& m : split_list<std::string>(bn_methods)) methods.push_back(parse_bench_method(m));
      const auto csv = bench_csv(bench_frames(family, split_list<std::uint32_t>(bn_frames), methods, bn_cfg));
      if (bn_out.empty()) std::cout << csv;
      else write_text(bn_out, csv);
    } else if (*ov) {
      const auto paths = render_overlay(load_raw_video(ov_video), read_traj(ov_traj), ov_out);
      std::cout << "frames " << paths.size() << "\n";
    }
  } catch (const TrainingDiverged& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
