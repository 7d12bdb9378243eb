#pragma once

#include "m3/tensor.hpp"

#include <cmath>
#include <random>

namespace m3 {

// He-uniform draw: U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
template <class S>
Tensor<S> he_uniform(Shape shape, Dim fan_in, std::mt19937_64& rng, bool requires_grad = true) {
  require(fan_in >= 1, "he_uniform: fan_in must be positive");
  const double limit = std::sqrt(6.0 / double(fan_in));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Array<S> v(shape_size(shape));
  for (Dim i = 0; i < v.size(); ++i) v[i] = S(dist(rng));
  return Tensor<S>::leaf(std::move(shape), std::move(v), requires_grad);
}

// Conv kernel {KH,KW,C,F}: fan_in = KH*KW*C.
template <class S>
Tensor<S> he_uniform_conv(Dim kh, Dim kw, Dim c, Dim f, std::mt19937_64& rng) {
  return he_uniform<S>({kh, kw, c, f}, kh * kw * c, rng);
}

// Dense weight {F,U}: fan_in = F.
template <class S>
Tensor<S> he_uniform_dense(Dim f, Dim u, std::mt19937_64& rng) {
  return he_uniform<S>({f, u}, f, rng);
}

template <class S>
Tensor<S> zeros(Shape shape, bool requires_grad = true) {
  return Tensor<S>::leaf(std::move(shape), requires_grad);
}

}  // namespace m3
