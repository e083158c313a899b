#pragma once

// The composer (image -> reframing box) and the MPV-Net (image + reference box
// -> per-head boundary offsets).

#include "mpvcrop/autodiff.hpp"
#include "mpvcrop/geometry.hpp"
#include "mpvcrop/rng.hpp"

#include <json.hpp>

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace mpvcrop {

struct ModelConfig {
  std::size_t image_size = 32;
  std::array<std::size_t, 3> channels{8, 16, 16};
  std::size_t composer_hidden = 512;
  std::size_t mpv_hidden = 64;
  std::size_t roi_grid = 3;
  double offset_scale = 0.5;
  std::size_t heads = 5;
  /// "gap" (global average pool) or "flatten" before the composer head.
  std::string composer_pool = "flatten";

  /// Spatial extent after the three stride-2 convolutions.
  std::size_t feature_side() const {
    std::size_t s = image_size;
    for (int i = 0; i < 3; ++i) s = (s + 2 - 3) / 2 + 1;
    return s;
  }
  std::size_t composer_head_inputs() const {
    const std::size_t f = feature_side();
    return composer_pool == "flatten" ? channels[2] * f * f : channels[2];
  }
};

inline nlohmann::json model_config_json(const ModelConfig& m) {
  return {{"image_size", m.image_size},           {"channels", m.channels},
          {"composer_hidden", m.composer_hidden}, {"mpv_hidden", m.mpv_hidden},
          {"roi_grid", m.roi_grid},               {"offset_scale", m.offset_scale},
          {"heads", m.heads},                     {"composer_pool", m.composer_pool}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig m;
  m.image_size = j.at("image_size").get<std::size_t>();
  m.channels = j.at("channels").get<std::array<std::size_t, 3>>();
  m.composer_hidden = j.at("composer_hidden").get<std::size_t>();
  m.mpv_hidden = j.at("mpv_hidden").get<std::size_t>();
  m.roi_grid = j.at("roi_grid").get<std::size_t>();
  m.offset_scale = j.at("offset_scale").get<double>();
  m.heads = j.at("heads").get<std::size_t>();
  m.composer_pool = j.at("composer_pool").get<std::string>();
  return m;
}

namespace detail {

template <class T>
Tensor<T> uniform_tensor(Shape shape, double bound, Rng& rng) {
  auto t = Tensor<T>::zeros(std::move(shape), true);
  for (auto& v : t.value()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

} // namespace detail

/// Three 3x3 stride-2 convolutions with ReLU, 1 -> c0 -> c1 -> c2 channels.
template <class T>
struct ConvStack {
  std::array<Tensor<T>, 3> weight;
  std::array<Tensor<T>, 3> bias;

  static ConvStack init(const ModelConfig& cfg, Rng& rng) {
    ConvStack s;
    std::size_t in = 1;
    for (std::size_t l = 0; l < 3; ++l) {
      const std::size_t out = cfg.channels[l];
      s.weight[l] = detail::uniform_tensor<T>({out, in, 3, 3}, std::sqrt(6.0 / static_cast<double>(in * 9)), rng);
      s.bias[l] = Tensor<T>::zeros({out}, true);
      in = out;
    }
    return s;
  }

  Tensor<T> forward(const Tensor<T>& images) const {
    Tensor<T> h = images;
    for (std::size_t l = 0; l < 3; ++l) h = ad::relu(ad::conv2d(h, weight[l], bias[l], 2));
    return h;
  }

  template <class F>
  void for_each(F&& f) {
    for (std::size_t l = 0; l < 3; ++l) {
      f(weight[l]);
      f(bias[l]);
    }
  }

  std::vector<Tensor<T>> tensors() const { return {weight[0], bias[0], weight[1], bias[1], weight[2], bias[2]}; }

  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) const {
    for (std::size_t l = 0; l < 3; ++l) {
      out.push_back({prefix + ".conv" + std::to_string(l) + ".weight", weight[l]});
      out.push_back({prefix + ".conv" + std::to_string(l) + ".bias", bias[l]});
    }
  }
};

template <class T>
struct ComposerParams {
  using scalar_type = T;
  ModelConfig config;
  ConvStack<T> conv;
  Tensor<T> fc1_w, fc1_b, fc2_w, fc2_b;

  /// Visits tensors in the same order as named_parameters().
  template <class F>
  void for_each(F&& f) {
    conv.for_each(f);
    f(fc1_w);
    f(fc1_b);
    f(fc2_w);
    f(fc2_b);
  }

  std::vector<NamedTensor<T>> named_parameters() const {
    std::vector<NamedTensor<T>> out;
    conv.collect("composer", out);
    out.push_back({"composer.fc1.weight", fc1_w});
    out.push_back({"composer.fc1.bias", fc1_b});
    out.push_back({"composer.fc2.weight", fc2_w});
    out.push_back({"composer.fc2.bias", fc2_b});
    return out;
  }
};

template <class T>
struct MpvHead {
  Tensor<T> fc1_w, fc1_b, fc2_w, fc2_b;

  std::vector<Tensor<T>> tensors() const { return {fc1_w, fc1_b, fc2_w, fc2_b}; }
};

template <class T>
struct MpvParams {
  using scalar_type = T;
  ModelConfig config;
  ConvStack<T> encoder;
  std::vector<MpvHead<T>> heads;

  std::size_t num_heads() const { return heads.size(); }

  template <class F>
  void for_each(F&& f) {
    encoder.for_each(f);
    for (auto& h : heads) {
      f(h.fc1_w);
      f(h.fc1_b);
      f(h.fc2_w);
      f(h.fc2_b);
    }
  }

  std::vector<NamedTensor<T>> named_parameters() const {
    std::vector<NamedTensor<T>> out;
    encoder.collect("mpv.encoder", out);
    for (std::size_t j = 0; j < heads.size(); ++j) {
      const std::string p = "mpv.head" + std::to_string(j);
      out.push_back({p + ".fc1.weight", heads[j].fc1_w});
      out.push_back({p + ".fc1.bias", heads[j].fc1_b});
      out.push_back({p + ".fc2.weight", heads[j].fc2_w});
      out.push_back({p + ".fc2.bias", heads[j].fc2_b});
    }
    return out;
  }
};

template <class P>
auto parameters(const P& params) {
  using Named = typename decltype(params.named_parameters())::value_type;
  std::vector<decltype(Named::tensor)> out;
  for (auto& nt : params.named_parameters()) out.push_back(nt.tensor);
  return out;
}

/// Deep copy of a parameter set with independent storage.
template <class P>
P clone_params(const P& params, bool requires_grad) {
  P out = params;
  out.for_each([&](Tensor<typename P::scalar_type>& t) {
    t = t.clone();
    t.set_requires_grad(requires_grad);
  });
  return out;
}

template <class T>
ComposerParams<T> init_composer(std::uint64_t seed, const ModelConfig& cfg) {
  Rng rng(derive_seed(seed, Stream::init_composer));
  ComposerParams<T> p;
  p.config = cfg;
  p.conv = ConvStack<T>::init(cfg, rng);
  const std::size_t in = cfg.composer_head_inputs();
  p.fc1_w = detail::uniform_tensor<T>({cfg.composer_hidden, in}, std::sqrt(6.0 / static_cast<double>(in)), rng);
  p.fc1_b = Tensor<T>::zeros({cfg.composer_hidden}, true);
  p.fc2_w = detail::uniform_tensor<T>({4, cfg.composer_hidden}, std::sqrt(3.0 / static_cast<double>(cfg.composer_hidden)), rng);
  p.fc2_b = Tensor<T>::zeros({4}, true);
  return p;
}

template <class T>
MpvParams<T> init_mpv(std::uint64_t seed, const ModelConfig& cfg) {
  if (cfg.heads < 1) throw usage_error("init_mpv: number of heads must be at least 1");
  MpvParams<T> p;
  p.config = cfg;
  Rng enc_rng(derive_seed(seed, Stream::init_mpv_encoder));
  p.encoder = ConvStack<T>::init(cfg, enc_rng);
  const std::size_t in = cfg.channels[2] * cfg.roi_grid * cfg.roi_grid + 4;
  for (std::size_t j = 0; j < cfg.heads; ++j) {
    Rng rng(derive_seed(seed, Stream::init_mpv_head, {j}));
    MpvHead<T> h;
    h.fc1_w = detail::uniform_tensor<T>({cfg.mpv_hidden, in}, std::sqrt(6.0 / static_cast<double>(in)), rng);
    h.fc1_b = Tensor<T>::zeros({cfg.mpv_hidden}, true);
    h.fc2_w = detail::uniform_tensor<T>({4, cfg.mpv_hidden}, std::sqrt(3.0 / static_cast<double>(cfg.mpv_hidden)), rng);
    h.fc2_b = Tensor<T>::zeros({4}, true);
    p.heads.push_back(std::move(h));
  }
  return p;
}

template <class T>
void check_images(const Tensor<T>& images, const ModelConfig& cfg, const char* who) {
  if (images.rank() != 4 || images.dim(1) != 1 || images.dim(2) != cfg.image_size || images.dim(3) != cfg.image_size)
    throw usage_error(std::string(who) + ": expected images [N,1," + std::to_string(cfg.image_size) + "," +
                      std::to_string(cfg.image_size) + "], got " + shape_str(images.shape()));
}

/// Sigmoid outputs (cx, cy, w, h) per image, [N, 4].
template <class T>
Tensor<T> composer_center_size(const ComposerParams<T>& p, const Tensor<T>& images) {
  check_images(images, p.config, "composer_forward");
  auto feat = p.conv.forward(images);
  auto pooled = p.config.composer_pool == "flatten" ? ad::flatten(feat) : ad::global_avg_pool(feat);
  auto h = ad::relu(ad::linear(pooled, p.fc1_w, p.fc1_b));
  return ad::sigmoid(ad::linear(h, p.fc2_w, p.fc2_b));
}

/// Unrepaired corner coordinates [N, 4]; the quantity the composer losses act on.
template <class T>
Tensor<T> composer_forward_raw(const ComposerParams<T>& p, const Tensor<T>& images) {
  return ad::center_to_corners(composer_center_size(p, images));
}

template <class T>
std::vector<Box> decode_boxes(const Tensor<T>& center_size) {
  std::vector<Box> out;
  out.reserve(center_size.dim(0));
  auto v = center_size.value();
  for (std::size_t n = 0; n < center_size.dim(0); ++n)
    out.push_back(decode_and_repair(static_cast<double>(v[4 * n]), static_cast<double>(v[4 * n + 1]),
                                    static_cast<double>(v[4 * n + 2]), static_cast<double>(v[4 * n + 3])));
  return out;
}

/// Valid boxes predicted for a batch of images.
template <class T>
std::vector<Box> composer_forward(const ComposerParams<T>& p, const Tensor<T>& images) {
  return decode_boxes(composer_center_size(p, images));
}

template <class T>
Tensor<T> mpv_encode(const MpvParams<T>& p, const Tensor<T>& images) {
  check_images(images, p.config, "mpv_forward");
  return p.encoder.forward(images);
}

template <class T>
Tensor<T> boxes_tensor(std::span<const Box> boxes) {
  auto t = Tensor<T>::zeros({boxes.size(), 4});
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    t.value()[4 * i] = static_cast<T>(boxes[i].x1);
    t.value()[4 * i + 1] = static_cast<T>(boxes[i].y1);
    t.value()[4 * i + 2] = static_cast<T>(boxes[i].x2);
    t.value()[4 * i + 3] = static_cast<T>(boxes[i].y2);
  }
  return t;
}

/// Head `head` offsets [N, 4] (each in [-s, s]) for references refs[n] on features[n].
template <class T>
Tensor<T> mpv_head_offsets(const MpvParams<T>& p, const Tensor<T>& features, std::span<const Box> refs,
                           std::size_t head) {
  if (head >= p.heads.size())
    throw usage_error("mpv_forward: head index " + std::to_string(head) + " out of range [0," +
                      std::to_string(p.heads.size()) + ")");
  auto roi = ad::flatten(ad::bilinear_roi_sample(features, refs, p.config.roi_grid));
  auto x = ad::concat_cols(roi, boxes_tensor<T>(refs));
  const auto& h = p.heads[head];
  auto hidden = ad::relu(ad::linear(x, h.fc1_w, h.fc1_b));
  return ad::scale(ad::tanh(ad::linear(hidden, h.fc2_w, h.fc2_b)), static_cast<T>(p.config.offset_scale));
}

/// Reference corners plus head offsets, unrepaired [N, 4].
template <class T>
Tensor<T> rectified_raw(const MpvParams<T>& p, const Tensor<T>& features, std::span<const Box> refs, std::size_t head) {
  return ad::add(mpv_head_offsets(p, features, refs, head), boxes_tensor<T>(refs));
}

/// Single-image convenience: the four offsets for (image, ref, head).
template <class T>
std::array<double, 4> mpv_forward(const MpvParams<T>& p, const Tensor<T>& image, const Box& ref, std::size_t head) {
  auto feat = mpv_encode(p, image);
  if (feat.dim(0) != 1) throw usage_error("mpv_forward: expects a single image");
  auto off = mpv_head_offsets(p, feat, std::span<const Box>(&ref, 1), head);
  return {static_cast<double>(off.value()[0]), static_cast<double>(off.value()[1]), static_cast<double>(off.value()[2]),
          static_cast<double>(off.value()[3])};
}

inline Box apply_offsets(const Box& ref, const std::array<double, 4>& off) {
  return repair(Box{ref.x1 + off[0], ref.y1 + off[1], ref.x2 + off[2], ref.y2 + off[3]});
}

template <class T>
Box rectified_box(const MpvParams<T>& p, const Tensor<T>& image, const Box& ref, std::size_t head) {
  return apply_offsets(ref, mpv_forward(p, image, ref, head));
}

} // namespace mpvcrop
