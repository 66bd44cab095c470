#pragma once

// Invariant multi-head attention over equivariant features.

#include "epio/feature.hpp"

#include <optional>
#include <vector>

namespace epio {

/// Sum over types and channels of q_l^T k_l for two single-token features.
template <typename Scalar>
Scalar invariant_inner_product(const EquiTensor<Scalar>& q, const EquiTensor<Scalar>& k);

/// Pairwise invariant inner products: (Nq x width) and (Nk x width) -> Nq x Nk.
template <typename Scalar>
ad::Var<Scalar> inner_product_matrix(const VarFeature<Scalar>& q, const VarFeature<Scalar>& k);

/// Channels [first, first + count) of every type (the same count for each).
template <typename Scalar>
VarFeature<Scalar> channel_slice(const VarFeature<Scalar>& f, const std::vector<int>& first, const std::vector<int>& count);

/// Core attention on already-projected features. Each C_l of q/k and of v is
/// split into `heads` equal chunks; per head the logits are the invariant
/// inner products divided by sqrt(d_h), d_h = sum_l (2l+1) C_l / heads over
/// the q/k layout. Softmax weights per head are appended to `weights` when given.
template <typename Scalar>
VarFeature<Scalar> multihead_attention(const VarFeature<Scalar>& q, const VarFeature<Scalar>& k,
                                       const VarFeature<Scalar>& v, int heads,
                                       std::vector<ad::Var<Scalar>>* weights = nullptr);

/// Projections around multihead_attention: q from the query stream, k and v
/// from the context, output projection back to `out`.
class EquiAttention {
 public:
  EquiAttention() = default;
  EquiAttention(std::string name, const FeatureLayout& query_in, const FeatureLayout& context_in,
                const FeatureLayout& qk, const FeatureLayout& value, const FeatureLayout& out, int heads);

  template <typename Scalar>
  void init(ad::ParamSet<Scalar>& params, std::mt19937_64& rng) const;
  template <typename Scalar>
  VarFeature<Scalar> operator()(const VarFeature<Scalar>& x, const VarFeature<Scalar>& context,
                                const ad::ParamSet<Scalar>& params,
                                std::vector<ad::Var<Scalar>>* weights = nullptr) const;

  int heads() const { return heads_; }
  const EquiLinearLayer& output() const { return o_; }

 private:
  EquiLinearLayer q_, k_, v_, o_;
  int heads_ = 1;
};

/// Pre-norm residual block: x + attn(LN(x), LN(ctx)), then x + MLP(LN(x)).
/// Without a context layout the block attends to itself.
class EquiTransformerBlock {
 public:
  EquiTransformerBlock() = default;
  EquiTransformerBlock(std::string name, const FeatureLayout& latent, std::optional<FeatureLayout> context, int heads);

  template <typename Scalar>
  void init(ad::ParamSet<Scalar>& params, std::mt19937_64& rng) const;
  template <typename Scalar>
  VarFeature<Scalar> operator()(const VarFeature<Scalar>& x, const VarFeature<Scalar>* context,
                                const ad::ParamSet<Scalar>& params,
                                std::vector<ad::Var<Scalar>>* weights = nullptr) const;

  const std::string& name() const { return name_; }

 private:
  std::string name_;
  bool cross_ = false;
  EquiNormLayer norm_x_, norm_ctx_, norm_mlp_;
  EquiAttention attn_;
  EquiMlpStack mlp_;
};

}  // namespace epio
