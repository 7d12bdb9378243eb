#pragma once

#include "m3/init.hpp"
#include "m3/ops.hpp"

// Single-head scaled dot-product attention, the distillation/fusion
// mechanism sitting between the conv backbones and the classification
// heads. Self-attention refines one modality's token grid (with a residual
// add and no positional encoding, so it is permutation-equivariant);
// cross-modality attention runs in both query directions and fuses the two
// mean-pooled streams through a dense projection.

namespace m3 {

// The backbone's last feature map flattened to n = h*w tokens of width d.
template <class S>
struct TokenGrid {
  Tensor<S> tokens;  // {n, d}
  Dim h = 0, w = 0;
};

template <class S>
TokenGrid<S> make_token_grid(const Tensor<S>& tokens, Dim h, Dim w) {
  require(tokens.ndim() == 2, "token_grid: tokens must be {n,d}, got " +
                                  shape_str(tokens.shape()));
  require(h * w == tokens.dim(0), "token_grid: spatial " + std::to_string(h) + "x" +
                                      std::to_string(w) + " does not flatten to " +
                                      std::to_string(tokens.dim(0)) + " tokens");
  return TokenGrid<S>{tokens, h, w};
}

template <class S>
struct SelfAttentionParams {
  Tensor<S> wq, wk, wv;  // each {d, d}; no projection biases

  static SelfAttentionParams init(Dim d, std::mt19937_64& rng) {
    return {he_uniform_dense<S>(d, d, rng), he_uniform_dense<S>(d, d, rng),
            he_uniform_dense<S>(d, d, rng)};
  }
  Dim d() const { return wq.dim(0); }
};

template <class S>
struct AttentionOutput {
  Tensor<S> distilled;  // {n, d}: attended values + residual input tokens
  Tensor<S> pooled;     // {d}: mean over tokens of distilled
  Tensor<S> weights;    // {n, n} row-stochastic
};

template <class S>
AttentionOutput<S> self_attention(const TokenGrid<S>& grid, const SelfAttentionParams<S>& p) {
  const Tensor<S>& x = grid.tokens;
  require(x.dim(1) == p.d(), "self_attention: token width " + std::to_string(x.dim(1)) +
                                 " does not match projection width " + std::to_string(p.d()));
  const Dim d = p.d();
  Tensor<S> q = matmul(x, p.wq);
  Tensor<S> k = matmul(x, p.wk);
  Tensor<S> v = matmul(x, p.wv);
  Tensor<S> scores = scale(matmul(q, k, false, true), S(1) / S(std::sqrt(double(d))));
  Tensor<S> w = softmax(scores, -1);
  Tensor<S> distilled = add(matmul(w, v), x);
  Tensor<S> pooled = mean(distilled, 0);
  return {distilled, pooled, w};
}

// One query direction of cross-modality attention.
template <class S>
struct CrossDirectionParams {
  Tensor<S> wq, wk, wv;  // each {d, d}

  static CrossDirectionParams init(Dim d, std::mt19937_64& rng) {
    return {he_uniform_dense<S>(d, d, rng), he_uniform_dense<S>(d, d, rng),
            he_uniform_dense<S>(d, d, rng)};
  }
};

template <class S>
struct CrossAttentionParams {
  CrossDirectionParams<S> dir_ab;  // queries from modality a, keys/values from b
  CrossDirectionParams<S> dir_ba;  // queries from modality b, keys/values from a
  Tensor<S> wf;                    // {2d, d_f} fusion projection
  Tensor<S> bf;                    // {d_f}

  static CrossAttentionParams init(Dim d, Dim d_f, std::mt19937_64& rng) {
    return {CrossDirectionParams<S>::init(d, rng), CrossDirectionParams<S>::init(d, rng),
            he_uniform_dense<S>(2 * d, d_f, rng), zeros<S>({d_f})};
  }
  Dim d() const { return dir_ab.wq.dim(0); }
  Dim d_f() const { return wf.dim(1); }
};

template <class S>
struct CrossAttentionOutput {
  Tensor<S> fused;       // {d_f}
  Tensor<S> pooled_ab;   // {d}: direction a->b, mean over a's query tokens
  Tensor<S> pooled_ba;   // {d}
  Tensor<S> weights_ab;  // {n_a, n_b} row-stochastic
  Tensor<S> weights_ba;  // {n_b, n_a}
};

namespace detail {

// Queries from `qs`, keys/values from `kv`; residual adds the query stream.
template <class S>
std::pair<Tensor<S>, Tensor<S>> cross_direction(const Tensor<S>& qs, const Tensor<S>& kv,
                                                const CrossDirectionParams<S>& p) {
  const Dim d = p.wq.dim(0);
  Tensor<S> q = matmul(qs, p.wq);
  Tensor<S> k = matmul(kv, p.wk);
  Tensor<S> v = matmul(kv, p.wv);
  Tensor<S> scores = scale(matmul(q, k, false, true), S(1) / S(std::sqrt(double(d))));
  Tensor<S> w = softmax(scores, -1);
  Tensor<S> out = add(matmul(w, v), qs);
  return {mean(out, 0), w};
}

}  // namespace detail

template <class S>
CrossAttentionOutput<S> cross_modality_attention(const AttentionOutput<S>& a,
                                                 const AttentionOutput<S>& b,
                                                 const CrossAttentionParams<S>& p) {
  require(a.distilled.dim(1) == p.d() && b.distilled.dim(1) == p.d(),
          "cross_modality_attention: token widths " + std::to_string(a.distilled.dim(1)) + "/" +
              std::to_string(b.distilled.dim(1)) + " do not match projection width " +
              std::to_string(p.d()));
  auto [pooled_ab, w_ab] = detail::cross_direction(a.distilled, b.distilled, p.dir_ab);
  auto [pooled_ba, w_ba] = detail::cross_direction(b.distilled, a.distilled, p.dir_ba);
  const Dim d = p.d();
  Tensor<S> cat = concat(std::vector<Tensor<S>>{reshape(pooled_ab, {Dim(1), d}),
                                                reshape(pooled_ba, {Dim(1), d})},
                         1);
  Tensor<S> fused = reshape(dense(cat, p.wf, p.bf), {p.d_f()});
  return {fused, pooled_ab, pooled_ba, w_ab, w_ba};
}

}  // namespace m3
