#pragma once

// Full model assembly: patch projection, four block layers with space-to-depth
// transitions, the object-aware token in the final layer, and the two heads
// (arc-sigmoid label logits, object-count logits).

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mltr/attention.hpp"
#include "mltr/losses.hpp"
#include "mltr/tensor.hpp"

namespace mltr {

/// Architecture hyperparameters. Channels double and the grid halves between
/// layers, so layer i runs at (resolution/patch)/2^(i-1) with C*2^(i-1)
/// channels; the final grid must equal the window size so the last layer is a
/// single window that can host the object-aware token.
struct VariantSpec {
  std::string name;
  std::size_t resolution = 0;
  std::size_t patch = 0;
  std::size_t channels = 0;
  std::size_t window = 0;
  std::array<std::size_t, 4> blocks{1, 1, 1, 1};

  void validate() const {
    if (patch == 0 || resolution % patch != 0)
      throw ConfigError(strfmt("variant %s: patch %zu does not divide resolution %zu",
                               name.c_str(), patch, resolution));
    std::size_t grid = resolution / patch;
    if (grid % (8 * window) != 0)
      throw ConfigError(strfmt(
          "variant %s: grid %zu is not divisible by 8*w_s=%zu, layers cannot partition",
          name.c_str(), grid, 8 * window));
    if (grid != 8 * window)
      throw ConfigError(strfmt(
          "variant %s: final grid %zu exceeds one window of size %zu", name.c_str(),
          grid / 8, window));
    for (std::size_t b : blocks)
      if (b == 0) throw ConfigError("variant needs at least one block per layer");
  }

  std::size_t grid_at(std::size_t layer) const {  // layer in [0,4)
    return (resolution / patch) >> layer;
  }
  std::size_t channels_at(std::size_t layer) const { return channels << layer; }
  std::size_t feature_dim() const { return channels * 8; }
};

inline const std::vector<VariantSpec>& builtin_variants() {
  static const std::vector<VariantSpec> variants = {
      {"mltr-s", 224, 4, 96, 7, {1, 1, 3, 1}},
      {"mltr-m", 384, 4, 96, 12, {1, 1, 9, 1}},
      {"mltr-l", 384, 4, 128, 12, {1, 1, 9, 1}},
      {"tiny", 16, 1, 8, 2, {1, 1, 1, 1}},
      {"tiny32", 32, 2, 16, 2, {1, 1, 1, 1}},
  };
  return variants;
}

inline VariantSpec variant_by_name(const std::string& name) {
  for (const auto& v : builtin_variants())
    if (v.name == name) return v;
  std::string known;
  for (const auto& v : builtin_variants()) known += " " + v.name;
  throw ConfigError("unknown variant '" + name + "'; known:" + known);
}

/// Space-to-depth transition: 2x2 spatial blocks fold into 4C channels
/// (position-major: new channel = p*C + c, p = 2*dr + dc), then a learned
/// projection 4C -> 2C.
template <class S>
struct SpaceToDepthT {
  TensorT<S> w, b;

  void init(std::size_t c, Rng& rng) {
    w = randn<S>({4 * c, 2 * c}, rng, S(0.02));
    b = TensorT<S>({2 * c}, S(0));
    w.set_requires_grad(true);
    b.set_requires_grad(true);
  }

  void visit(const std::string& prefix, const ParamVisitor<S>& fn) {
    fn(prefix + ".w", w);
    fn(prefix + ".b", b);
  }

  TensorT<S> forward(const TensorT<S>& x) const {
    return add(matmul(space_to_depth_rearrange(x), w), b);
  }

  /// The pure rearrangement [B,h,w,C] -> [B,h/2,w/2,4C].
  static TensorT<S> space_to_depth_rearrange(const TensorT<S>& x) {
    if (x.ndim() != 4) throw ShapeError("space_to_depth expects [B,h,w,C]");
    std::size_t bsz = x.shape()[0], h = x.shape()[1], w = x.shape()[2], c = x.shape()[3];
    if (h % 2 != 0 || w % 2 != 0)
      throw ConfigError(strfmt("space_to_depth needs even extents, got %zux%zu", h, w));
    std::size_t oh = h / 2, ow = w / 2;
    std::vector<std::size_t> map(x.size());
    std::size_t at = 0;
    for (std::size_t bi = 0; bi < bsz; ++bi)
      for (std::size_t r = 0; r < oh; ++r)
        for (std::size_t q = 0; q < ow; ++q)
          for (std::size_t p = 0; p < 4; ++p) {
            std::size_t sr = 2 * r + p / 2, sq = 2 * q + p % 2;
            std::size_t src = ((bi * h + sr) * w + sq) * c;
            for (std::size_t ch = 0; ch < c; ++ch) map[at++] = src + ch;
          }
    return reindex(x, map, {bsz, oh, ow, 4 * c});
  }
};

/// Extracts non-overlapping PxP patches of a [B,3,H,W] image into tokens
/// [B, H/P, W/P, P*P*3] (token order: patch row, patch col, then RGB).
template <class S>
TensorT<S> extract_patches(const TensorT<S>& images, std::size_t patch) {
  if (images.ndim() != 4 || images.shape()[1] != 3)
    throw ShapeError(strfmt("expected [B,3,H,W] images, got %s",
                            shape_str(images.shape()).c_str()));
  std::size_t b = images.shape()[0], h = images.shape()[2], w = images.shape()[3];
  if (patch == 0 || h % patch != 0 || w % patch != 0)
    throw ConfigError(strfmt("patch size %zu does not divide image extents %zux%zu",
                             patch, h, w));
  std::size_t gh = h / patch, gw = w / patch, d = patch * patch * 3;
  std::vector<std::size_t> map(images.size());
  std::size_t at = 0;
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t r = 0; r < gh; ++r)
      for (std::size_t q = 0; q < gw; ++q)
        for (std::size_t pr = 0; pr < patch; ++pr)
          for (std::size_t pc = 0; pc < patch; ++pc)
            for (std::size_t ch = 0; ch < 3; ++ch)
              map[at++] = ((bi * 3 + ch) * h + r * patch + pr) * w + q * patch + pc;
  return reindex(images, map, {b, gh, gw, d});
}

template <class S>
struct ForwardResultT {
  TensorT<S> label_logits;   // [B, n], equals s * cos(theta) in [-s, s]
  TensorT<S> count_logits;   // [B, n+1]
  TensorT<S> feature_map;    // [B, h4, w4, 8C], final layer output (pre-norm)
};

template <class S>
struct MlTrModelT {
  VariantSpec spec;
  std::size_t n_classes = 0;
  S logit_scale = S(8);

  TensorT<S> patch_w, patch_b;                     // [P*P*3, C], [C]
  std::array<std::vector<MltrBlockT<S>>, 4> layers;
  std::array<SpaceToDepthT<S>, 3> transitions;
  TensorT<S> object_token;                         // [8C]
  LayerNormParamsT<S> final_norm;
  MlpT<S> label_head;                              // 8C -> 8C -> 8C
  TensorT<S> class_weights;                        // [8C, n], bias-free
  MlpT<S> count_head;                              // 8C -> 8C -> n+1

  void init(const VariantSpec& variant, std::size_t classes, std::uint64_t seed,
            S scale = S(8)) {
    variant.validate();
    if (classes == 0) throw ConfigError("model needs at least one class");
    spec = variant;
    n_classes = classes;
    logit_scale = scale;
    Rng rng(seed);

    std::size_t c = spec.channels, p = spec.patch;
    patch_w = randn<S>({p * p * 3, c}, rng, S(0.02));
    patch_b = TensorT<S>({c}, S(0));
    patch_w.set_requires_grad(true);
    patch_b.set_requires_grad(true);

    for (std::size_t l = 0; l < 4; ++l) {
      std::size_t lc = spec.channels_at(l);
      layers[l].resize(spec.blocks[l]);
      for (auto& block : layers[l]) block.init(lc, spec.window, rng);
      if (l < 3) transitions[l].init(lc, rng);
    }

    std::size_t d = spec.feature_dim();
    object_token = randn<S>({d}, rng, S(0.02));
    object_token.set_requires_grad(true);
    final_norm.init(d);
    label_head.init(d, d, d, rng);
    class_weights = randn<S>({d, n_classes}, rng, S(0.02));
    class_weights.set_requires_grad(true);
    count_head.init(d, d, n_classes + 1, rng);
  }

  void visit(const ParamVisitor<S>& fn) {
    fn("patch.w", patch_w);
    fn("patch.b", patch_b);
    for (std::size_t l = 0; l < 4; ++l) {
      for (std::size_t bi = 0; bi < layers[l].size(); ++bi)
        layers[l][bi].visit(strfmt("layer%zu.block%zu", l + 1, bi), fn);
      if (l < 3) transitions[l].visit(strfmt("transition%zu", l + 1), fn);
    }
    fn("object_token", object_token);
    final_norm.visit("final_norm", fn);
    label_head.visit("label_head", fn);
    fn("class_weights", class_weights);
    count_head.visit("count_head", fn);
  }

  std::size_t count_params() {
    std::size_t total = 0;
    visit([&](const std::string&, TensorT<S>& t) { total += t.size(); });
    return total;
  }

  void zero_grad() {
    visit([](const std::string&, TensorT<S>& t) { t.zero_grad(); });
  }

  TensorT<S> patch_project(const TensorT<S>& images) const {
    if (images.shape()[2] != spec.resolution || images.shape()[3] != spec.resolution)
      throw ConfigError(strfmt("variant %s expects %zux%zu input, got %zux%zu",
                               spec.name.c_str(), spec.resolution, spec.resolution,
                               images.shape()[2], images.shape()[3]));
    return add(matmul(extract_patches(images, spec.patch), patch_w), patch_b);
  }

  ForwardResultT<S> forward(const TensorT<S>& images) const {
    TensorT<S> x = patch_project(images);
    std::size_t b = images.shape()[0];
    TensorT<S> token;
    for (std::size_t l = 0; l < 4; ++l) {
      if (l == 3)
        token = expand_lead(reshape(object_token, {1, spec.feature_dim()}), b);
      for (const auto& block : layers[l])
        x = block.forward(x, l == 3 ? &token : nullptr);
      if (l < 3) x = transitions[l].forward(x);
    }

    std::size_t g4 = spec.grid_at(3), d = spec.feature_dim();
    TensorT<S> tokens = reshape(x, {b, g4 * g4, d});
    TensorT<S> pooled = mean(final_norm.forward(tokens), 1);  // [B, d]
    TensorT<S> features = label_head.forward(pooled);
    TensorT<S> cosines = cosine_scores(features, class_weights);

    ForwardResultT<S> out;
    out.label_logits = mul_scalar(cosines, logit_scale);
    out.count_logits = count_head.forward(final_norm.forward(reshape(token, {b, d})));
    out.feature_map = x;
    return out;
  }
};

using MlTrModel = MlTrModelT<real_t>;

}  // namespace mltr
