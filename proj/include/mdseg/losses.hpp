#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "mdseg/mathutil.hpp"
#include "mdseg/tensor.hpp"

namespace mdseg {

/// One training batch as seen by the loss: logits and binary targets over the
/// global class axis, plus per-sample annotation indicators (row b is the
/// annotation mask vector of sample b's source dataset).
template <class S>
struct LossBatch {
  Tensor<S> logits;      // [B,C,X,Y,Z]
  Tensor<S> targets;     // [B,C,X,Y,Z], values in {0,1}
  Tensor<S> annotation;  // [B,C], values in {0,1}
};

struct LossOptions {
  /// Smoothing added to the dice denominator only; with it an empty-target,
  /// empty-prediction class contributes 0 instead of rewarding emptiness.
  bool dice_smooth = true;
  double dice_eps = 1e-5;
  /// Divide BCE by voxels-per-sample only (the literal 1/I reading) instead
  /// of voxels times the number of annotated samples for the class.
  bool bce_literal_norm = false;
};

template <class S>
struct LossValue {
  S total = S(0);
  std::vector<std::pair<S, S>> per_class;  // (bce_c, dice_term_c) with dice_term = -dice
  Tensor<S> voxel_gradient;                // dTotal/dlogits, exactly 0 where unannotated
};

namespace detail {
template <class S>
void check_batch_shapes(const Tensor<S>& big, const Tensor<S>& ann) {
  if (big.rank() != 5) throw std::invalid_argument("loss: expected rank-5 [B,C,X,Y,Z]");
  if (ann.rank() != 2 || ann.shape[0] != big.shape[0] || ann.shape[1] != big.shape[1])
    throw std::invalid_argument("loss: annotation mask must be [B,C]");
}
template <class S>
void check_binary(const Tensor<S>& t, const char* what) {
  for (S v : t.data)
    if (v != S(0) && v != S(1))
      throw std::invalid_argument(std::string(what) + " must be binary");
}
}  // namespace detail

/// Numerically stable masked BCE per class:
///   BCE_c = (1/I_c) * sum over annotated (b,i) of max(l,0) - l*y + log(1+exp(-|l|)).
/// I_c is voxels-per-sample times the number of annotated samples for c
/// (voxels only under bce_literal_norm). Returns the per-class values and the
/// gradient w.r.t. logits, exactly zero on unannotated (b,c) pairs.
template <class S>
std::pair<std::vector<S>, Tensor<S>> sigmoid_bce(const Tensor<S>& logits,
                                                 const Tensor<S>& targets,
                                                 const Tensor<S>& annotation,
                                                 const LossOptions& opts = {}) {
  detail::check_batch_shapes(logits, annotation);
  if (!logits.same_shape(targets)) throw std::invalid_argument("bce: shape mismatch");
  detail::check_binary(targets, "bce: targets");
  const int64_t B = logits.shape[0], C = logits.shape[1];
  const int64_t vox = logits.shape[2] * logits.shape[3] * logits.shape[4];

  std::vector<S> per_class(static_cast<size_t>(C), S(0));
  Tensor<S> grad(logits.shape);
  for (int64_t c = 0; c < C; ++c) {
    int64_t annotated = 0;
    for (int64_t b = 0; b < B; ++b)
      if (annotation[b * C + c] != S(0)) ++annotated;
    if (annotated == 0) continue;  // indicator removes the class entirely
    const double inv_I =
        1.0 / (static_cast<double>(vox) * (opts.bce_literal_norm ? 1.0 : annotated));
    double acc = 0.0;
    for (int64_t b = 0; b < B; ++b) {
      if (annotation[b * C + c] == S(0)) continue;
      const int64_t base = (b * C + c) * vox;
      for (int64_t i = 0; i < vox; ++i) {
        const double l = static_cast<double>(logits[base + i]);
        const double y = static_cast<double>(targets[base + i]);
        acc += std::max(l, 0.0) - l * y + std::log1p(std::exp(-std::abs(l)));
        const double sig = l >= 0 ? 1.0 / (1.0 + std::exp(-l))
                                  : std::exp(l) / (1.0 + std::exp(l));
        grad[base + i] = static_cast<S>((sig - y) * inv_I);
      }
    }
    per_class[static_cast<size_t>(c)] = static_cast<S>(acc * inv_I);
  }
  return {std::move(per_class), std::move(grad)};
}

/// Batch-pooled dice per class: intersection and denominator sums run jointly
/// over all annotated samples and voxels of the batch. Returns dice in [0,1]
/// and d(dice)/d(probabilities). Classes with both annotated target mass and
/// prediction mass below eps contribute exactly 0.
template <class S>
std::pair<std::vector<S>, Tensor<S>> batch_dice(const Tensor<S>& probabilities,
                                                const Tensor<S>& targets,
                                                const Tensor<S>& annotation,
                                                const LossOptions& opts = {}) {
  detail::check_batch_shapes(probabilities, annotation);
  if (!probabilities.same_shape(targets)) throw std::invalid_argument("dice: shape mismatch");
  detail::check_binary(targets, "dice: targets");
  for (S v : probabilities.data)
    if (v < S(-1e-6) || v > S(1) + S(1e-6))
      throw std::invalid_argument("dice: probability outside [0,1]");
  const int64_t B = probabilities.shape[0], C = probabilities.shape[1];
  const int64_t vox = probabilities.shape[2] * probabilities.shape[3] * probabilities.shape[4];

  std::vector<S> per_class(static_cast<size_t>(C), S(0));
  Tensor<S> grad(probabilities.shape);
  for (int64_t c = 0; c < C; ++c) {
    double inter = 0.0, pred_mass = 0.0, target_mass = 0.0;
    for (int64_t b = 0; b < B; ++b) {
      if (annotation[b * C + c] == S(0)) continue;
      const int64_t base = (b * C + c) * vox;
      for (int64_t i = 0; i < vox; ++i) {
        const double p = static_cast<double>(probabilities[base + i]);
        const double y = static_cast<double>(targets[base + i]);
        inter += p * y;
        pred_mass += p;
        target_mass += y;
      }
    }
    if (pred_mass < opts.dice_eps && target_mass < opts.dice_eps) continue;
    const double denom = pred_mass + target_mass + (opts.dice_smooth ? opts.dice_eps : 0.0);
    const double dice = 2.0 * inter / denom;
    per_class[static_cast<size_t>(c)] = static_cast<S>(dice);
    const double inv_d2 = 1.0 / (denom * denom);
    for (int64_t b = 0; b < B; ++b) {
      if (annotation[b * C + c] == S(0)) continue;
      const int64_t base = (b * C + c) * vox;
      for (int64_t i = 0; i < vox; ++i) {
        const double y = static_cast<double>(targets[base + i]);
        grad[base + i] = static_cast<S>((2.0 * y * denom - 2.0 * inter) * inv_d2);
      }
    }
  }
  return {std::move(per_class), std::move(grad)};
}

/// Dataset-and-class adaptive loss: per class, masked BCE minus batch-pooled
/// dice, summed (not averaged) over classes, so the signal per class does not
/// depend on how many other classes the batch carries.
template <class S>
LossValue<S> multidataset_loss(const LossBatch<S>& batch, const LossOptions& opts = {}) {
  detail::check_batch_shapes(batch.logits, batch.annotation);
  detail::check_binary(batch.annotation, "loss: annotation");
  const int64_t B = batch.logits.shape[0], C = batch.logits.shape[1];
  const int64_t vox = batch.logits.numel() / (B * C);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c) {
      if (batch.annotation[b * C + c] != S(0)) continue;
      const int64_t base = (b * C + c) * vox;
      for (int64_t i = 0; i < vox; ++i)
        if (batch.targets[base + i] != S(0))
          throw std::invalid_argument("loss: nonzero target on unannotated (sample, class)");
    }

  Tensor<S> probs = batch.logits;
  for (auto& v : probs.data) v = stable_sigmoid(v);

  auto [bce_c, bce_grad] = sigmoid_bce(batch.logits, batch.targets, batch.annotation, opts);
  auto [dice_c, dice_grad] = batch_dice(probs, batch.targets, batch.annotation, opts);

  LossValue<S> out;
  out.per_class.reserve(static_cast<size_t>(C));
  double total = 0.0;
  for (int64_t c = 0; c < C; ++c) {
    const S dice_term = -dice_c[static_cast<size_t>(c)];
    out.per_class.emplace_back(bce_c[static_cast<size_t>(c)], dice_term);
    total += static_cast<double>(bce_c[static_cast<size_t>(c)]) + static_cast<double>(dice_term);
  }
  out.total = static_cast<S>(total);

  out.voxel_gradient = std::move(bce_grad);
  for (int64_t j = 0; j < out.voxel_gradient.numel(); ++j) {
    const S p = probs[j];
    out.voxel_gradient[j] += -dice_grad[j] * p * (S(1) - p);
  }
  return out;
}

/// Softmax cross-entropy plus batch dice for the single-dataset baseline.
/// logits [B,C+1,X,Y,Z] with channel 0 = background; labelmap [B,X,Y,Z]
/// holding per-voxel class indices. Returns the loss and its logits gradient.
template <class S>
std::pair<S, Tensor<S>> baseline_softmax_ce_dice(const Tensor<S>& logits,
                                                 const std::vector<int32_t>& labelmap,
                                                 const LossOptions& opts = {}) {
  if (logits.rank() != 5) throw std::invalid_argument("baseline: expected [B,C+1,X,Y,Z]");
  const int64_t B = logits.shape[0], CH = logits.shape[1];
  const int64_t vox = logits.numel() / (B * CH);
  if (static_cast<int64_t>(labelmap.size()) != B * vox)
    throw std::invalid_argument("baseline: labelmap size mismatch");
  for (int32_t l : labelmap)
    if (l < 0 || l >= CH) throw std::invalid_argument("baseline: label index out of range");

  Tensor<S> probs(logits.shape);
  double ce = 0.0;
  for (int64_t b = 0; b < B; ++b)
    for (int64_t i = 0; i < vox; ++i) {
      double mx = -1e300;
      for (int64_t c = 0; c < CH; ++c)
        mx = std::max(mx, static_cast<double>(logits[(b * CH + c) * vox + i]));
      double denom = 0.0;
      for (int64_t c = 0; c < CH; ++c)
        denom += std::exp(static_cast<double>(logits[(b * CH + c) * vox + i]) - mx);
      const double log_denom = std::log(denom);
      for (int64_t c = 0; c < CH; ++c) {
        const double l = static_cast<double>(logits[(b * CH + c) * vox + i]);
        probs[(b * CH + c) * vox + i] = static_cast<S>(std::exp(l - mx - log_denom));
      }
      const int32_t y = labelmap[static_cast<size_t>(b * vox + i)];
      ce -= static_cast<double>(logits[(b * CH + y) * vox + i]) - mx - log_denom;
    }
  const double inv_n = 1.0 / static_cast<double>(B * vox);
  ce *= inv_n;

  // Batch-pooled dice over the foreground channels, averaged across them.
  const int64_t fg = CH - 1;
  std::vector<double> inter(static_cast<size_t>(fg), 0.0),
      pmass(static_cast<size_t>(fg), 0.0), tmass(static_cast<size_t>(fg), 0.0);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t i = 0; i < vox; ++i) {
      const int32_t y = labelmap[static_cast<size_t>(b * vox + i)];
      for (int64_t c = 1; c < CH; ++c) {
        const double p = static_cast<double>(probs[(b * CH + c) * vox + i]);
        inter[static_cast<size_t>(c - 1)] += p * (y == c ? 1.0 : 0.0);
        pmass[static_cast<size_t>(c - 1)] += p;
        if (y == c) tmass[static_cast<size_t>(c - 1)] += 1.0;
      }
    }
  double dice_loss = 0.0;
  std::vector<double> denom(static_cast<size_t>(fg), 0.0), dsc(static_cast<size_t>(fg), 0.0);
  for (int64_t c = 0; c < fg; ++c) {
    const auto ci = static_cast<size_t>(c);
    if (pmass[ci] < opts.dice_eps && tmass[ci] < opts.dice_eps) continue;
    denom[ci] = pmass[ci] + tmass[ci] + (opts.dice_smooth ? opts.dice_eps : 0.0);
    dsc[ci] = 2.0 * inter[ci] / denom[ci];
    dice_loss -= dsc[ci] / static_cast<double>(fg);
  }

  Tensor<S> grad(logits.shape);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t i = 0; i < vox; ++i) {
      const int32_t y = labelmap[static_cast<size_t>(b * vox + i)];
      // grad w.r.t. probabilities from the dice part
      double gp[64];  // CH is small in practice
      double dot = 0.0;
      for (int64_t c = 0; c < CH; ++c) {
        double g = 0.0;
        if (c >= 1 && denom[static_cast<size_t>(c - 1)] > 0.0) {
          const auto ci = static_cast<size_t>(c - 1);
          const double t = y == c ? 1.0 : 0.0;
          const double ddice = (2.0 * t * denom[ci] - 2.0 * inter[ci]) / (denom[ci] * denom[ci]);
          g = -ddice / static_cast<double>(fg);
        }
        gp[c] = g;
        dot += g * static_cast<double>(probs[(b * CH + c) * vox + i]);
      }
      for (int64_t c = 0; c < CH; ++c) {
        const double p = static_cast<double>(probs[(b * CH + c) * vox + i]);
        const double ce_g = (p - (y == c ? 1.0 : 0.0)) * inv_n;
        const double dice_g = p * (gp[c] - dot);
        grad[(b * CH + c) * vox + i] = static_cast<S>(ce_g + dice_g);
      }
    }
  return {static_cast<S>(ce + dice_loss), std::move(grad)};
}

}  // namespace mdseg
