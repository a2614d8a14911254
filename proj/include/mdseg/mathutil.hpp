#pragma once

#include <cmath>

namespace mdseg {

/// Overflow-free logistic function.
template <class S>
S stable_sigmoid(S x) {
  if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
  const S e = std::exp(x);
  return e / (S(1) + e);
}

}  // namespace mdseg
