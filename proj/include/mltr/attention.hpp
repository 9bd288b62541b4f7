#pragma once

// Windowed attention building blocks: window partition/merge, cyclic shifts,
// in-window multi-head pixel attention with relative position bias and seam
// masking, and per-channel cross-window attention with projections shared
// across channels. Feature maps are carried channel-last as [B, h, w, C].

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mltr/tensor.hpp"

namespace mltr {

template <class S>
using ParamVisitor = std::function<void(const std::string&, TensorT<S>&)>;

/// Window geometry for an h x w grid cut into w_s x w_s windows.
struct WindowGrid {
  std::size_t h = 0, w = 0, ws = 0;
  std::size_t nw = 0;      // number of windows
  std::size_t tokens = 0;  // w_s^2

  WindowGrid(std::size_t h_, std::size_t w_, std::size_t ws_) : h(h_), w(w_), ws(ws_) {
    if (ws == 0 || h % ws != 0 || w % ws != 0)
      throw ConfigError(strfmt("window size %zu does not divide feature extents %zux%zu",
                               ws, h, w));
    nw = (h / ws) * (w / ws);
    tokens = ws * ws;
  }

  // Flat offset of pixel (r,q) inside [h,w,C] for window n, in-window token t.
  std::size_t pixel_of(std::size_t n, std::size_t t) const {
    std::size_t wcols = w / ws;
    std::size_t r = (n / wcols) * ws + t / ws;
    std::size_t q = (n % wcols) * ws + t % ws;
    return r * w + q;
  }
};

namespace detail {

template <class S>
inline void expect_map(const TensorT<S>& x) {
  if (x.ndim() != 4)
    throw ShapeError(strfmt("expected a [B,h,w,C] feature map, got %s",
                            shape_str(x.shape()).c_str()));
}

}  // namespace detail

/// [B,h,w,C] -> [B,n_w,w_s^2,C], window-major, row-major within each window.
template <class S>
TensorT<S> window_partition(const TensorT<S>& x, std::size_t ws) {
  detail::expect_map(x);
  std::size_t b = x.shape()[0], h = x.shape()[1], w = x.shape()[2], c = x.shape()[3];
  WindowGrid grid(h, w, ws);
  std::vector<std::size_t> map(x.size());
  std::size_t at = 0;
  for (std::size_t bi = 0; bi < b; ++bi) {
    std::size_t base = bi * h * w * c;
    for (std::size_t n = 0; n < grid.nw; ++n)
      for (std::size_t t = 0; t < grid.tokens; ++t) {
        std::size_t px = grid.pixel_of(n, t);
        for (std::size_t ch = 0; ch < c; ++ch) map[at++] = base + px * c + ch;
      }
  }
  return reindex(x, map, {b, grid.nw, grid.tokens, c});
}

/// Inverse of window_partition.
template <class S>
TensorT<S> window_merge(const TensorT<S>& windows, std::size_t h, std::size_t w) {
  if (windows.ndim() != 4)
    throw ShapeError("window_merge expects [B,n_w,w_s^2,C] windows");
  std::size_t b = windows.shape()[0], nw = windows.shape()[1], t = windows.shape()[2],
              c = windows.shape()[3];
  std::size_t ws_sq = t;
  std::size_t ws = 1;
  while (ws * ws < ws_sq) ++ws;
  if (ws * ws != ws_sq || nw != (h / ws) * (w / ws))
    throw ShapeError("window_merge extents are inconsistent with h,w");
  WindowGrid grid(h, w, ws);
  std::vector<std::size_t> map(windows.size());
  for (std::size_t bi = 0; bi < b; ++bi) {
    std::size_t base = bi * nw * t * c;
    for (std::size_t n = 0; n < nw; ++n)
      for (std::size_t tk = 0; tk < t; ++tk) {
        std::size_t px = grid.pixel_of(n, tk);
        for (std::size_t ch = 0; ch < c; ++ch)
          map[(bi * h * w + px) * c + ch] = base + (n * t + tk) * c + ch;
      }
  }
  return reindex(windows, map, {b, h, w, c});
}

/// Toroidal roll of the spatial axes by (offset, offset); negative rolls back.
template <class S>
TensorT<S> cyclic_shift(const TensorT<S>& x, long long offset) {
  detail::expect_map(x);
  std::size_t b = x.shape()[0], h = x.shape()[1], w = x.shape()[2], c = x.shape()[3];
  auto wrap = [](long long v, std::size_t n) {
    long long m = v % static_cast<long long>(n);
    return static_cast<std::size_t>(m < 0 ? m + static_cast<long long>(n) : m);
  };
  std::vector<std::size_t> map(x.size());
  std::size_t at = 0;
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t r = 0; r < h; ++r) {
      std::size_t sr = wrap(static_cast<long long>(r) - offset, h);
      for (std::size_t q = 0; q < w; ++q) {
        std::size_t sq = wrap(static_cast<long long>(q) - offset, w);
        std::size_t src = ((bi * h + sr) * w + sq) * c;
        for (std::size_t ch = 0; ch < c; ++ch) map[at++] = src + ch;
      }
    }
  return reindex(x, map, x.shape());
}

// ---------------------------------------------------------------------------
// Pixel attention.
// ---------------------------------------------------------------------------

inline std::size_t default_head_count(std::size_t channels) {
  // Head dimension 32 when the channel count allows it, otherwise one head.
  return (channels >= 32 && channels % 32 == 0) ? channels / 32 : 1;
}

template <class S>
struct PixelAttentionT {
  std::size_t channels = 0, window = 0, heads = 0;
  TensorT<S> wq, wk, wv, wo;  // [C, C], bias-free
  TensorT<S> rel_bias;        // [heads, (2 w_s - 1)^2]

  void init(std::size_t c, std::size_t ws, Rng& rng, std::size_t head_count = 0) {
    channels = c;
    window = ws;
    heads = head_count ? head_count : default_head_count(c);
    if (c % heads != 0)
      throw ConfigError(strfmt("head count %zu must divide channels %zu", heads, c));
    S sd = S(0.02);
    wq = randn<S>({c, c}, rng, sd);
    wk = randn<S>({c, c}, rng, sd);
    wv = randn<S>({c, c}, rng, sd);
    wo = randn<S>({c, c}, rng, sd);
    std::size_t span = 2 * ws - 1;
    rel_bias = randn<S>({heads, span * span}, rng, sd);
    for (auto* t : {&wq, &wk, &wv, &wo, &rel_bias}) t->set_requires_grad(true);
  }

  void visit(const std::string& prefix, const ParamVisitor<S>& fn) {
    fn(prefix + ".wq", wq);
    fn(prefix + ".wk", wk);
    fn(prefix + ".wv", wv);
    fn(prefix + ".wo", wo);
    fn(prefix + ".rel_bias", rel_bias);
  }

  // Flat (token_i, token_j) -> bias table index by in-window offset.
  std::vector<std::size_t> bias_index_map() const {
    std::size_t t = window * window, span = 2 * window - 1;
    std::vector<std::size_t> map(t * t);
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < t; ++j) {
        long long dr = static_cast<long long>(i / window) - static_cast<long long>(j / window);
        long long dq = static_cast<long long>(i % window) - static_cast<long long>(j % window);
        map[i * t + j] = static_cast<std::size_t>(dr + static_cast<long long>(window) - 1) * span +
                         static_cast<std::size_t>(dq + static_cast<long long>(window) - 1);
      }
    return map;
  }

  /// Bias logits [1,1,heads,T',T'] where T' = w_s^2 (+1 when an extra token is
  /// appended; the extra token's rows/columns carry zero bias).
  TensorT<S> bias_logits(bool extra_token) const {
    std::size_t t = window * window;
    TensorT<S> bias = gather_last(rel_bias, bias_index_map(), t * t);  // [H, T*T]
    bias = reshape(bias, {heads, t, t});
    if (extra_token) {
      TensorT<S> col({heads, t, 1}, S(0));
      bias = concat<S>({bias, col}, 2);
      TensorT<S> row({heads, 1, t + 1}, S(0));
      bias = concat<S>({bias, row}, 1);
      ++t;
    }
    return reshape(bias, {1, 1, heads, t, t});
  }
};

/// Multi-head scaled dot-product attention over each window's token list.
/// windows: [B, n_w, T', C]; bias: [1,1,H,T',T'] or undefined; mask:
/// [1,n_w,1,T',T'] or undefined. Exactly four projections and two attention
/// matmuls hit the multiply-add counter.
template <class S>
TensorT<S> pixel_attention_core(const TensorT<S>& windows, const PixelAttentionT<S>& p,
                                const TensorT<S>& bias, const TensorT<S>& mask) {
  std::size_t b = windows.shape()[0], nw = windows.shape()[1], t = windows.shape()[2],
              c = windows.shape()[3];
  if (c != p.channels)
    throw ConfigError(strfmt("pixel attention dimensioned for %zu channels, got %zu",
                             p.channels, c));
  std::size_t dh = c / p.heads;
  auto split_heads = [&](const TensorT<S>& m) {
    return transpose(reshape(m, {b, nw, t, p.heads, dh}), 2, 3);  // [B,nw,H,T,dh]
  };
  TensorT<S> q = split_heads(matmul(windows, p.wq));
  TensorT<S> k = split_heads(matmul(windows, p.wk));
  TensorT<S> v = split_heads(matmul(windows, p.wv));
  TensorT<S> scores = mul_scalar(matmul(q, transpose(k, 3, 4)),
                                 S(1) / std::sqrt(S(dh)));  // [B,nw,H,T,T]
  if (bias.defined()) scores = add(scores, bias);
  if (mask.defined()) scores = add(scores, mask);
  TensorT<S> attn = softmax(scores, 4);
  TensorT<S> ctx = matmul(attn, v);                          // [B,nw,H,T,dh]
  ctx = reshape(transpose(ctx, 2, 3), {b, nw, t, c});
  return matmul(ctx, p.wo);
}

/// Additive mask that blocks attention across the wrap-around seam after a
/// cyclic shift. Regions follow the usual three-band construction; tokens
/// attend only within their own region. Zero mask (undefined) when there is
/// nothing to block.
template <class S>
TensorT<S> shift_seam_mask(std::size_t h, std::size_t w, std::size_t ws,
                           std::size_t offset, bool extra_token = false) {
  if (offset == 0) return TensorT<S>();
  WindowGrid grid(h, w, ws);
  auto band = [&](std::size_t r, std::size_t n) {
    if (r < n - ws) return 0;
    if (r < n - offset) return 1;
    return 2;
  };
  std::vector<int> id(h * w);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t q = 0; q < w; ++q) id[r * w + q] = band(r, h) * 3 + band(q, w);

  std::size_t t = grid.tokens, tp = t + (extra_token ? 1 : 0);
  TensorT<S> mask({1, grid.nw, 1, tp, tp}, S(0));
  const S kBlocked = S(-1e9);
  bool any = false;
  for (std::size_t n = 0; n < grid.nw; ++n)
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < t; ++j)
        if (id[grid.pixel_of(n, i)] != id[grid.pixel_of(n, j)]) {
          mask.data()[((n * tp) + i) * tp + j] = kBlocked;
          any = true;
        }
  // Extra-token rows/columns stay unmasked: it may attend everywhere.
  return any ? mask : TensorT<S>();
}

// ---------------------------------------------------------------------------
// Cross-window attention.
// ---------------------------------------------------------------------------

template <class S>
struct CrossWindowAttentionT {
  std::size_t window = 0;     // w_s
  TensorT<S> uq, uk, uv, uo;  // [w_s^2, w_s^2], shared across channels

  void init(std::size_t ws, Rng& rng) {
    window = ws;
    std::size_t t = ws * ws;
    S sd = S(0.02);
    uq = randn<S>({t, t}, rng, sd);
    uk = randn<S>({t, t}, rng, sd);
    uv = randn<S>({t, t}, rng, sd);
    uo = randn<S>({t, t}, rng, sd);
    for (auto* p : {&uq, &uk, &uv, &uo}) p->set_requires_grad(true);
  }

  void visit(const std::string& prefix, const ParamVisitor<S>& fn) {
    fn(prefix + ".uq", uq);
    fn(prefix + ".uk", uk);
    fn(prefix + ".uv", uv);
    fn(prefix + ".uo", uo);
  }
};

/// Unfolds [B,h,w,C] so each window becomes a length-w_s^2 token per channel:
/// [B, C, n_w, w_s^2]. Pure permutation; exactly inverted by cwa_refold.
template <class S>
TensorT<S> cwa_unfold(const TensorT<S>& x, std::size_t ws) {
  detail::expect_map(x);
  std::size_t b = x.shape()[0], h = x.shape()[1], w = x.shape()[2], c = x.shape()[3];
  WindowGrid grid(h, w, ws);
  std::vector<std::size_t> map(x.size());
  std::size_t at = 0;
  for (std::size_t bi = 0; bi < b; ++bi) {
    std::size_t base = bi * h * w * c;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t n = 0; n < grid.nw; ++n)
        for (std::size_t tk = 0; tk < grid.tokens; ++tk)
          map[at++] = base + grid.pixel_of(n, tk) * c + ch;
  }
  return reindex(x, map, {b, c, grid.nw, grid.tokens});
}

template <class S>
TensorT<S> cwa_refold(const TensorT<S>& unfolded, std::size_t h, std::size_t w) {
  if (unfolded.ndim() != 4) throw ShapeError("cwa_refold expects [B,C,n_w,w_s^2]");
  std::size_t b = unfolded.shape()[0], c = unfolded.shape()[1], nw = unfolded.shape()[2],
              t = unfolded.shape()[3];
  std::size_t ws = 1;
  while (ws * ws < t) ++ws;
  if (ws * ws != t || nw != (h / ws) * (w / ws))
    throw ShapeError("cwa_refold extents are inconsistent with h,w");
  WindowGrid grid(h, w, ws);
  std::vector<std::size_t> map(unfolded.size());
  for (std::size_t bi = 0; bi < b; ++bi) {
    std::size_t base = bi * c * nw * t;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t n = 0; n < nw; ++n)
        for (std::size_t tk = 0; tk < t; ++tk)
          map[(bi * h * w + grid.pixel_of(n, tk)) * c + ch] =
              base + (ch * nw + n) * t + tk;
  }
  return reindex(unfolded, map, {b, h, w, c});
}

/// Single-head attention among the n_w window-tokens of each channel,
/// independently per channel, with channel-shared projections.
template <class S>
TensorT<S> cross_window_attention_core(const TensorT<S>& unfolded,
                                       const CrossWindowAttentionT<S>& p) {
  std::size_t t = unfolded.shape()[3];
  if (t != p.window * p.window)
    throw ConfigError(strfmt("cross-window attention dimensioned for w_s=%zu, got tokens %zu",
                             p.window, t));
  TensorT<S> q = matmul(unfolded, p.uq);  // [B,C,n_w,T]
  TensorT<S> k = matmul(unfolded, p.uk);
  TensorT<S> v = matmul(unfolded, p.uv);
  TensorT<S> scores = mul_scalar(matmul(q, transpose(k, 2, 3)), S(1) / std::sqrt(S(t)));
  TensorT<S> attn = softmax(scores, 3);  // [B,C,n_w,n_w]
  return matmul(matmul(attn, v), p.uo);
}

// ---------------------------------------------------------------------------
// Sub-blocks (pre-norm residual + MLP) and the full MlTr block.
// ---------------------------------------------------------------------------

template <class S>
struct LayerNormParamsT {
  TensorT<S> gamma, beta;

  void init(std::size_t c) {
    gamma = TensorT<S>({c}, S(1));
    beta = TensorT<S>({c}, S(0));
    gamma.set_requires_grad(true);
    beta.set_requires_grad(true);
  }

  void visit(const std::string& prefix, const ParamVisitor<S>& fn) {
    fn(prefix + ".gamma", gamma);
    fn(prefix + ".beta", beta);
  }

  TensorT<S> forward(const TensorT<S>& x, S eps = S(1e-5)) const {
    return layer_norm(x, gamma, beta, eps);
  }
};

template <class S>
struct MlpT {
  TensorT<S> w1, b1, w2, b2;

  void init(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng) {
    S sd = S(0.02);
    w1 = randn<S>({in, hidden}, rng, sd);
    b1 = TensorT<S>({hidden}, S(0));
    w2 = randn<S>({hidden, out}, rng, sd);
    b2 = TensorT<S>({out}, S(0));
    for (auto* p : {&w1, &b1, &w2, &b2}) p->set_requires_grad(true);
  }

  void visit(const std::string& prefix, const ParamVisitor<S>& fn) {
    fn(prefix + ".w1", w1);
    fn(prefix + ".b1", b1);
    fn(prefix + ".w2", w2);
    fn(prefix + ".b2", b2);
  }

  TensorT<S> forward(const TensorT<S>& x) const {
    return add(matmul(gelu(add(matmul(x, w1), b1)), w2), b2);
  }
};

/// One pixel-attention sub-block: x + PA(LN(x)), then x + MLP(LN(x)).
/// When `shifted`, the map is rolled by -floor(w_s/2) and seam attention is
/// masked; a single-window grid has nothing to shift and runs unshifted.
/// `extra_token`, when given as [B,1,C], joins every window-1 token list for
/// attention and is returned updated.
template <class S>
struct PaSubBlockT {
  std::size_t channels = 0, window = 0;
  bool shifted = false;
  LayerNormParamsT<S> ln_attn, ln_mlp;
  PixelAttentionT<S> attn;
  MlpT<S> mlp;

  void init(std::size_t c, std::size_t ws, bool shift, Rng& rng, std::size_t heads = 0) {
    channels = c;
    window = ws;
    shifted = shift;
    ln_attn.init(c);
    attn.init(c, ws, rng, heads);
    ln_mlp.init(c);
    mlp.init(c, 4 * c, c, rng);
  }

  void visit(const std::string& prefix, const ParamVisitor<S>& fn) {
    ln_attn.visit(prefix + ".ln_attn", fn);
    attn.visit(prefix + ".attn", fn);
    ln_mlp.visit(prefix + ".ln_mlp", fn);
    mlp.visit(prefix + ".mlp", fn);
  }

  TensorT<S> forward(const TensorT<S>& x, TensorT<S>* extra_token = nullptr) const {
    std::size_t b = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    WindowGrid grid(h, w, window);
    std::size_t offset = (shifted && grid.nw > 1) ? window / 2 : 0;

    TensorT<S> map = offset ? cyclic_shift(x, -static_cast<long long>(offset)) : x;
    TensorT<S> tokens = window_partition(map, window);  // [B,nw,T,C]
    bool with_token = extra_token != nullptr;
    if (with_token) {
      if (grid.nw != 1)
        throw ConfigError("extra token requires the grid to be a single window");
      tokens = concat<S>({tokens, reshape(*extra_token, {b, 1, 1, channels})}, 2);
    }
    TensorT<S> bias = attn.bias_logits(with_token);
    TensorT<S> mask = shift_seam_mask<S>(h, w, window, offset, with_token);

    TensorT<S> t1 = add(tokens, pixel_attention_core(ln_attn.forward(tokens), attn, bias, mask));
    TensorT<S> t2 = add(t1, mlp.forward(ln_mlp.forward(t1)));

    std::size_t t = grid.tokens;
    if (with_token) {
      *extra_token = reshape(slice(t2, 2, t, 1), {b, 1, channels});
      t2 = slice(t2, 2, 0, t);
    }
    TensorT<S> out = window_merge(t2, h, w);
    return offset ? cyclic_shift(out, static_cast<long long>(offset)) : out;
  }
};

/// One cross-window sub-block: x + CWA(LN(x)), then x + MLP(LN(x)).
/// The object-aware token, when present, bypasses this sub-block entirely.
template <class S>
struct CwaSubBlockT {
  std::size_t channels = 0, window = 0;
  LayerNormParamsT<S> ln_attn, ln_mlp;
  CrossWindowAttentionT<S> attn;
  MlpT<S> mlp;

  void init(std::size_t c, std::size_t ws, Rng& rng) {
    channels = c;
    window = ws;
    ln_attn.init(c);
    attn.init(ws, rng);
    ln_mlp.init(c);
    mlp.init(c, 4 * c, c, rng);
  }

  void visit(const std::string& prefix, const ParamVisitor<S>& fn) {
    ln_attn.visit(prefix + ".ln_attn", fn);
    attn.visit(prefix + ".attn", fn);
    ln_mlp.visit(prefix + ".ln_mlp", fn);
    mlp.visit(prefix + ".mlp", fn);
  }

  TensorT<S> forward(const TensorT<S>& x) const {
    std::size_t h = x.shape()[1], w = x.shape()[2];
    TensorT<S> unfolded = cwa_unfold(ln_attn.forward(x), window);
    TensorT<S> attended = cwa_refold(cross_window_attention_core(unfolded, attn), h, w);
    TensorT<S> t1 = add(x, attended);
    return add(t1, mlp.forward(ln_mlp.forward(t1)));
  }
};

/// The MlTr block: PA (regular), PA (shifted by floor(w_s/2)), then CWA.
template <class S>
struct MltrBlockT {
  PaSubBlockT<S> pa_regular, pa_shifted;
  CwaSubBlockT<S> cwa;

  void init(std::size_t c, std::size_t ws, Rng& rng, std::size_t heads = 0) {
    pa_regular.init(c, ws, false, rng, heads);
    pa_shifted.init(c, ws, true, rng, heads);
    cwa.init(c, ws, rng);
  }

  void visit(const std::string& prefix, const ParamVisitor<S>& fn) {
    pa_regular.visit(prefix + ".pa1", fn);
    pa_shifted.visit(prefix + ".pa2", fn);
    cwa.visit(prefix + ".cwa", fn);
  }

  TensorT<S> forward(const TensorT<S>& x, TensorT<S>* extra_token = nullptr) const {
    TensorT<S> y = pa_regular.forward(x, extra_token);
    y = pa_shifted.forward(y, extra_token);
    return cwa.forward(y);
  }
};

}  // namespace mltr
