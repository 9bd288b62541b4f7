#pragma once

// Loss stack: cosine-similarity (arc sigmoid) classification probabilities,
// asymmetric multi-label loss with probability margin, baseline BCE, the
// object-count cross entropy, and their combination.

#include <cstdint>
#include <vector>

#include "mltr/tensor.hpp"

namespace mltr {

struct LossConfig {
  double scale = 8.0;        // s: logit scale
  double margin = 0.05;      // m: probability margin for easy negatives
  double gamma_pos = 0.0;    // focusing exponent on positives
  double gamma_neg = 4.0;    // focusing exponent on negatives
  bool paper_sign = false;   // sigmoid(-s cos) when true, as printed
};

/// Normalizes the last axis to unit L2 norm; zero rows are a domain error.
template <class S>
TensorT<S> l2_normalize_rows(const TensorT<S>& x) {
  TensorT<S> sq = sum(mul(x, x), x.ndim() - 1);
  for (S v : sq.data())
    if (v == S(0)) throw DomainError("cannot normalize a zero-norm vector");
  Shape keep = sq.shape();
  keep.push_back(1);
  return divide(x, reshape(sqrt(sq), keep));
}

/// cos(theta) between each feature row and each class-weight column, clamped
/// to [-1, 1]. features [B, d], class_weights [d, n] -> [B, n].
template <class S>
TensorT<S> cosine_scores(const TensorT<S>& features, const TensorT<S>& class_weights) {
  TensorT<S> f = l2_normalize_rows(features);
  TensorT<S> w = transpose(l2_normalize_rows(transpose(class_weights, 0, 1)), 0, 1);
  return clamp(matmul(f, w), S(-1), S(1));
}

/// Arc sigmoid probabilities: p = sigmoid(s cos theta) (conventional sign) or
/// sigmoid(-s cos theta) when paper_sign is set.
template <class S>
TensorT<S> arc_sigmoid(const TensorT<S>& features, const TensorT<S>& class_weights,
                       S scale, bool paper_sign = false) {
  TensorT<S> logits = mul_scalar(cosine_scores(features, class_weights), scale);
  return sigmoid(paper_sign ? neg(logits) : logits);
}

namespace detail {

template <class S>
inline std::size_t batch_rows(const TensorT<S>& p) {
  if (p.ndim() == 1) return 1;
  if (p.ndim() == 2) return p.shape()[0];
  throw ShapeError("loss expects probabilities of rank 1 or 2");
}

}  // namespace detail

/// Asymmetric loss, averaged over the batch. Per sample:
///   - sum_j y (1-p)^g+ log p  -  sum_j (1-y) pm^g- log(1 - pm),
/// with pm = max(p - m, 0) so negatives already below the margin contribute
/// exactly zero.
template <class S>
TensorT<S> asymmetric_loss(const TensorT<S>& p, const TensorT<S>& y,
                           const LossConfig& cfg) {
  std::size_t b = detail::batch_rows(p);
  TensorT<S> pos = mul(y, mul(pow_scalar(rsub_scalar(S(1), p), S(cfg.gamma_pos)), log(p)));
  TensorT<S> pm = relu(add_scalar(p, S(-cfg.margin)));
  TensorT<S> negpart = mul(rsub_scalar(S(1), y),
                           mul(pow_scalar(pm, S(cfg.gamma_neg)), log(rsub_scalar(S(1), pm))));
  return mul_scalar(sum(add(pos, negpart)), S(-1) / S(b));
}

/// Binary cross entropy summed over classes, averaged over the batch.
template <class S>
TensorT<S> bce_loss(const TensorT<S>& p, const TensorT<S>& y) {
  std::size_t b = detail::batch_rows(p);
  TensorT<S> terms = add(mul(y, log(p)), mul(rsub_scalar(S(1), y), log(rsub_scalar(S(1), p))));
  return mul_scalar(sum(terms), S(-1) / S(b));
}

/// Object-aware token loss: cross entropy of the softmaxed count logits at the
/// true distinct-class count z, averaged over the batch.
template <class S>
TensorT<S> object_token_loss(const TensorT<S>& count_logits,
                             const std::vector<std::size_t>& z) {
  TensorT<S> logits = count_logits.ndim() == 1
                          ? reshape(count_logits, {1, count_logits.size()})
                          : count_logits;
  for (std::size_t zi : z)
    if (zi >= logits.shape()[1])
      throw ContractError(strfmt("count %zu out of range [0,%zu]", zi,
                                 logits.shape()[1] - 1));
  TensorT<S> ls = log_softmax(logits, 1);
  return neg(mean(pick(ls, z)));
}

/// Distinct-class counts z_i = sum_j y_ij from a multi-hot target tensor.
template <class S>
std::vector<std::size_t> class_counts(const TensorT<S>& y) {
  std::size_t b = detail::batch_rows(y);
  std::size_t n = y.size() / b;
  std::vector<std::size_t> z(b, 0);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (y.data()[i * n + j] > S(0.5)) ++z[i];
  return z;
}

/// Combined training loss: mean_i (ASL_i + OTL_i). Label logits are the scaled
/// cosines produced by the model head.
template <class S>
TensorT<S> combined_loss(const TensorT<S>& label_logits, const TensorT<S>& count_logits,
                         const TensorT<S>& y, const LossConfig& cfg) {
  TensorT<S> p = sigmoid(cfg.paper_sign ? neg(label_logits) : label_logits);
  TensorT<S> asl = asymmetric_loss(p, y, cfg);
  TensorT<S> otl = object_token_loss(count_logits, class_counts(y));
  return add(asl, otl);
}

}  // namespace mltr
