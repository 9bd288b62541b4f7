#pragma once

// Analytical FLOP model for the three attention modes and the instrumented
// counter that must agree with it exactly. Counting convention: one
// multiply-add is one FLOP, and only the four projections plus the two
// attention matmuls count (softmax, scaling, LN, MLP and bias adds do not).

#include <string>

#include "mltr/attention.hpp"
#include "mltr/tensor.hpp"

namespace mltr {

enum class AttentionMode { kGlobal, kPixel, kCrossWindow };

inline std::string mode_name(AttentionMode m) {
  switch (m) {
    case AttentionMode::kGlobal: return "GA";
    case AttentionMode::kPixel: return "PA";
    case AttentionMode::kCrossWindow: return "CWA";
  }
  return "?";
}

inline AttentionMode mode_from_name(const std::string& s) {
  if (s == "GA" || s == "ga") return AttentionMode::kGlobal;
  if (s == "PA" || s == "pa") return AttentionMode::kPixel;
  if (s == "CWA" || s == "cwa") return AttentionMode::kCrossWindow;
  throw ConfigError("unknown attention mode '" + s + "' (GA, PA, CWA)");
}

struct CostReport {
  AttentionMode mode;
  long long flops = 0;
  std::string param_note;
  std::size_t h = 0, w = 0, c = 0, ws = 0;
};

/// Closed forms:
///   GA : 4 h w C^2 + 2 (h w)^2 C
///   PA : 4 h w C^2 + 2 w_s^2 h w C
///   CWA: 4 h w w_s^2 C + 2 (h w / w_s)^2 C
inline CostReport flops_analytical(AttentionMode mode, std::size_t h, std::size_t w,
                                   std::size_t c, std::size_t ws) {
  long long hw = static_cast<long long>(h) * w;
  long long cc = static_cast<long long>(c);
  CostReport rep{mode, 0, "", h, w, c, ws};
  switch (mode) {
    case AttentionMode::kGlobal:
      rep.flops = 4 * hw * cc * cc + 2 * hw * hw * cc;
      rep.param_note = "~ C^2";
      break;
    case AttentionMode::kPixel: {
      WindowGrid grid(h, w, ws);  // divisibility check
      long long t = static_cast<long long>(grid.tokens);
      rep.flops = 4 * hw * cc * cc + 2 * t * hw * cc;
      rep.param_note = "~ C^2";
      break;
    }
    case AttentionMode::kCrossWindow: {
      WindowGrid grid(h, w, ws);
      long long t = static_cast<long long>(grid.tokens);
      long long hw_over_ws = hw / static_cast<long long>(ws);
      rep.flops = 4 * hw * t * cc + 2 * hw_over_ws * hw_over_ws * cc;
      rep.param_note = "~ w_s^4";
      break;
    }
  }
  return rep;
}

/// Reference global-attention module. Used only to check the GA closed form;
/// it is not part of the model.
template <class S>
struct GlobalAttentionT {
  std::size_t channels = 0;
  TensorT<S> wq, wk, wv, wo;

  void init(std::size_t c, Rng& rng) {
    channels = c;
    S sd = S(0.02);
    wq = randn<S>({c, c}, rng, sd);
    wk = randn<S>({c, c}, rng, sd);
    wv = randn<S>({c, c}, rng, sd);
    wo = randn<S>({c, c}, rng, sd);
  }
};

/// Single-head attention over all hw tokens: tokens [B, N, C].
template <class S>
TensorT<S> global_attention_core(const TensorT<S>& tokens, const GlobalAttentionT<S>& p) {
  TensorT<S> q = matmul(tokens, p.wq);
  TensorT<S> k = matmul(tokens, p.wk);
  TensorT<S> v = matmul(tokens, p.wv);
  TensorT<S> scores =
      mul_scalar(matmul(q, transpose(k, 1, 2)), S(1) / std::sqrt(S(p.channels)));
  return matmul(matmul(softmax(scores, 2), v), p.wo);
}

/// Runs the matching attention core on random data with the multiply-add
/// counter enabled and returns the measured count.
template <class S = double>
long long flops_measured(AttentionMode mode, std::size_t h, std::size_t w, std::size_t c,
                         std::size_t ws, std::uint64_t seed = 1) {
  Rng rng(seed);
  switch (mode) {
    case AttentionMode::kGlobal: {
      GlobalAttentionT<S> p;
      p.init(c, rng);
      TensorT<S> tokens = rand_uniform<S>({1, h * w, c}, rng, S(-1), S(1));
      FlopScope scope;
      global_attention_core(tokens, p);
      return scope.count();
    }
    case AttentionMode::kPixel: {
      PixelAttentionT<S> p;
      p.init(c, ws, rng);
      TensorT<S> map = rand_uniform<S>({1, h, w, c}, rng, S(-1), S(1));
      TensorT<S> tokens = window_partition(map, ws);
      TensorT<S> bias = p.bias_logits(false);
      FlopScope scope;
      pixel_attention_core(tokens, p, bias, TensorT<S>());
      return scope.count();
    }
    case AttentionMode::kCrossWindow: {
      CrossWindowAttentionT<S> p;
      p.init(ws, rng);
      TensorT<S> map = rand_uniform<S>({1, h, w, c}, rng, S(-1), S(1));
      TensorT<S> unfolded = cwa_unfold(map, ws);
      FlopScope scope;
      cross_window_attention_core(unfolded, p);
      return scope.count();
    }
  }
  throw ConfigError("unknown attention mode");
}

}  // namespace mltr
