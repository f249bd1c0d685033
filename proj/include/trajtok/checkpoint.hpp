#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "trajtok/autodiff.hpp"
#include "trajtok/binary_io.hpp"
#include "trajtok/trajectory_encoder.hpp"

namespace trajtok {

/// Named tensor as stored on disk.
struct NamedTensor {
  std::string name;
  std::vector<std::uint32_t> shape;
  std::vector<float> values;
};

// Checkpoint: "TTCK" | u32 tensor_count, then per tensor
// u32 name_len | name | u32 rank | rank x u32 dims | f32 values.

inline std::vector<std::uint8_t> encode_checkpoint(const std::vector<NamedTensor>& tensors) {
  detail::ByteWriter w;
  w.magic("TTCK");
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    w.u32(static_cast<std::uint32_t>(t.name.size()));
    w.raw({reinterpret_cast<const std::uint8_t*>(t.name.data()), t.name.size()});
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    std::size_t n = 1;
    for (auto d : t.shape) {
      w.u32(d);
      n *= d;
    }
    if (n != t.values.size()) throw std::invalid_argument("tensor " + t.name + " shape does not match its data");
    for (float v : t.values) w.f32(v);
  }
  return w.take();
}

inline std::vector<NamedTensor> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, "checkpoint");
  r.expect_magic("TTCK");
  const auto count = r.u32("tensor count");
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const auto len = r.u32("name length");
    const auto name = r.raw(len, "name");
    t.name.assign(name.begin(), name.end());
    const auto rank = r.u32("rank");
    if (rank > 8) r.fail("tensor " + t.name + " has implausible rank");
    std::uint64_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      t.shape.push_back(r.u32("dims"));
      n *= t.shape.back();
    }
    if (n * 4 > r.remaining()) throw FormatError("checkpoint: truncated tensor " + t.name, r.offset());
    t.values.resize(n);
    for (auto& v : t.values) v = r.f32("values");
    out.push_back(std::move(t));
  }
  if (r.remaining() != 0) r.fail("trailing bytes");
  return out;
}

template <class T>
std::vector<NamedTensor> tensors_from(const ad::ParameterSet<T>& params) {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params.at(i);
    NamedTensor t{p.name, {}, {}};
    for (auto d : p.shape) t.shape.push_back(static_cast<std::uint32_t>(d));
    for (auto v : p.value) t.values.push_back(static_cast<float>(v));
    out.push_back(std::move(t));
  }
  return out;
}

/// Adds every non-metadata tensor to `params`.
template <class T>
void load_into(const std::vector<NamedTensor>& tensors, ad::ParameterSet<T>& params) {
  for (const auto& t : tensors) {
    if (t.name.rfind("meta.", 0) == 0) continue;
    ad::Shape shape(t.shape.begin(), t.shape.end());
    params.add(t.name, std::move(shape), std::vector<T>(t.values.begin(), t.values.end()));
  }
}

inline NamedTensor meta_tensor(const std::string& key, double value) {
  return {"meta." + key, {1}, {static_cast<float>(value)}};
}

inline std::map<std::string, double> read_meta(const std::vector<NamedTensor>& tensors) {
  std::map<std::string, double> meta;
  for (const auto& t : tensors)
    if (t.name.rfind("meta.", 0) == 0 && t.values.size() == 1) meta[t.name.substr(5)] = t.values[0];
  return meta;
}

/// Encoder shape metadata, prefixed "meta.<prefix>".
inline std::vector<NamedTensor> encoder_meta(const EncoderConfig& cfg, const std::string& prefix = "") {
  std::vector<NamedTensor> m = {
      meta_tensor(prefix + "input_side", double(cfg.input_side)),
      meta_tensor(prefix + "stages", double(cfg.stages)),
      meta_tensor(prefix + "feature_dim", double(cfg.feature_dim)),
      meta_tensor(prefix + "heads", double(cfg.heads)),
      meta_tensor(prefix + "resampler_layers", double(cfg.resampler_layers)),
      meta_tensor(prefix + "ffn_multiplier", double(cfg.ffn_multiplier)),
      meta_tensor(prefix + "model_dim", double(cfg.model_dim)),
      meta_tensor(prefix + "pool_epsilon", cfg.pool_epsilon),
      meta_tensor(prefix + "bands", double(cfg.bands)),
      meta_tensor(prefix + "rotary_base", cfg.rotary_base),
      meta_tensor(prefix + "backbone_activation", double(static_cast<int>(cfg.backbone_activation))),
      meta_tensor(prefix + "mlp_activation", double(static_cast<int>(cfg.mlp_activation))),
  };
  for (std::size_t s = 0; s < cfg.stage_widths.size(); ++s)
    m.push_back(meta_tensor(prefix + "stage_width" + std::to_string(s), double(cfg.stage_widths[s])));
  return m;
}

inline EncoderConfig encoder_config_from_meta(const std::map<std::string, double>& meta, const std::string& prefix = "") {
  auto get = [&](const std::string& key) {
    auto it = meta.find(prefix + key);
    if (it == meta.end()) throw std::runtime_error("checkpoint lacks metadata " + prefix + key);
    return it->second;
  };
  EncoderConfig c;
  c.input_side = static_cast<std::size_t>(get("input_side"));
  c.stages = static_cast<std::size_t>(get("stages"));
  c.feature_dim = static_cast<std::size_t>(get("feature_dim"));
  c.heads = static_cast<std::size_t>(get("heads"));
  c.resampler_layers = static_cast<std::size_t>(get("resampler_layers"));
  c.ffn_multiplier = static_cast<std::size_t>(get("ffn_multiplier"));
  c.model_dim = static_cast<std::size_t>(get("model_dim"));
  c.pool_epsilon = get("pool_epsilon");
  c.bands = static_cast<std::size_t>(get("bands"));
  c.rotary_base = get("rotary_base");
  c.backbone_activation = static_cast<ad::Activation>(static_cast<int>(get("backbone_activation")));
  c.mlp_activation = static_cast<ad::Activation>(static_cast<int>(get("mlp_activation")));
  c.stage_widths.clear();
  for (std::size_t s = 0; meta.contains(prefix + "stage_width" + std::to_string(s)); ++s)
    c.stage_widths.push_back(static_cast<std::size_t>(get("stage_width" + std::to_string(s))));
  c.validate();
  return c;
}

template <class T>
void save_encoder_checkpoint(const std::string& path, const EncoderConfig& cfg, const ad::ParameterSet<T>& params) {
  auto tensors = encoder_meta(cfg);
  auto body = tensors_from(params);
  tensors.insert(tensors.end(), body.begin(), body.end());
  detail::write_file(path, encode_checkpoint(tensors));
}

/// Loads an encoder checkpoint. Tensors under "enc." (as written by the toy
/// trainer) are accepted and re-rooted.
template <class T>
EncoderConfig load_encoder_checkpoint(const std::string& path, ad::ParameterSet<T>& params) {
  const auto tensors = decode_checkpoint(detail::read_file(path));
  const auto meta = read_meta(tensors);
  const bool nested = meta.contains("enc.input_side");
  const std::string prefix = nested ? "enc." : "";
  const auto cfg = encoder_config_from_meta(meta, prefix);
  for (const auto& t : tensors) {
    if (t.name.rfind("meta.", 0) == 0 || t.name.rfind(prefix, 0) != 0) continue;
    params.add(t.name.substr(prefix.size()), ad::Shape(t.shape.begin(), t.shape.end()),
               std::vector<T>(t.values.begin(), t.values.end()));
  }
  return cfg;
}

// Tokens file: u32 N | u32 d_m | N*d_m f32.

template <class T>
std::vector<std::uint8_t> encode_tokens(const std::vector<std::vector<T>>& tokens, std::size_t model_dim) {
  detail::ByteWriter w;
  w.u32(static_cast<std::uint32_t>(tokens.size()));
  w.u32(static_cast<std::uint32_t>(model_dim));
  for (const auto& t : tokens) {
    if (t.size() != model_dim) throw std::invalid_argument("token width mismatch");
    for (auto v : t) w.f32(static_cast<float>(v));
  }
  return w.take();
}

inline std::vector<std::vector<float>> decode_tokens(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, "tokens");
  const auto n = r.u32("token count"), d = r.u32("token width");
  std::vector<std::vector<float>> out(n, std::vector<float>(d));
  for (auto& t : out)
    for (auto& v : t) v = r.f32("token values");
  if (r.remaining() != 0) r.fail("trailing bytes");
  return out;
}

}  // namespace trajtok
