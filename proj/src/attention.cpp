#include "epio/attention.hpp"

#include <cmath>

namespace epio {

template <typename Scalar>
Scalar invariant_inner_product(const EquiTensor<Scalar>& q, const EquiTensor<Scalar>& k) {
  if (!(q.layout() == k.layout())) throw ShapeError("invariant_inner_product: layout mismatch");
  if (q.tokens() != 1 || k.tokens() != 1) throw ShapeError("invariant_inner_product: single tokens expected");
  Scalar s(0);
  for (std::size_t i = 0; i < q.parts().size(); ++i) s += q.part(i).cwiseProduct(k.part(i)).sum();
  return s;
}

template <typename Scalar>
ad::Var<Scalar> inner_product_matrix(const VarFeature<Scalar>& q, const VarFeature<Scalar>& k) {
  if (!(q.layout == k.layout)) throw ShapeError("inner_product_matrix: layout mismatch");
  return ad::matmul_nt(flatten(q), flatten(k));
}

template <typename Scalar>
VarFeature<Scalar> channel_slice(const VarFeature<Scalar>& f, const std::vector<int>& first,
                                 const std::vector<int>& count) {
  VarFeature<Scalar> out;
  std::vector<TypeSpec> types;
  for (std::size_t i = 0; i < f.parts.size(); ++i) {
    const int order = f.layout.types()[i].order;
    const int g = type_dim(order);
    out.parts.push_back(ad::slice_cols(f.parts[i], Eigen::Index(first[i]) * g, Eigen::Index(count[i]) * g));
    types.push_back({order, count[i]});
  }
  out.layout = FeatureLayout(types);
  return out;
}

namespace {

std::vector<int> head_chunks(const FeatureLayout& layout, int heads) {
  std::vector<int> chunk;
  for (const auto& t : layout.types()) {
    if (t.channels % heads != 0) {
      throw ShapeError("attention: channel count " + std::to_string(t.channels) + " of order " +
                       std::to_string(t.order) + " not divisible by " + std::to_string(heads) + " heads");
    }
    chunk.push_back(t.channels / heads);
  }
  return chunk;
}

}  // namespace

template <typename Scalar>
VarFeature<Scalar> multihead_attention(const VarFeature<Scalar>& q, const VarFeature<Scalar>& k,
                                       const VarFeature<Scalar>& v, int heads,
                                       std::vector<ad::Var<Scalar>>* weights) {
  if (heads <= 0) throw std::invalid_argument("attention: heads must be positive");
  if (k.parts.empty() || k.tokens() == 0) throw std::invalid_argument("attention: empty key set");
  if (!(q.layout == k.layout)) throw ShapeError("attention: query/key layouts differ");
  if (k.tokens() != v.tokens()) throw ShapeError("attention: key/value token counts differ");
  const std::vector<int> qk_chunk = head_chunks(q.layout, heads);
  const std::vector<int> v_chunk = head_chunks(v.layout, heads);
  const Scalar inv_scale = Scalar(1.0 / std::sqrt(double(q.layout.width()) / heads));

  std::vector<std::vector<ad::Var<Scalar>>> per_type(v.parts.size());
  for (int h = 0; h < heads; ++h) {
    std::vector<int> qk_first, v_first;
    for (int c : qk_chunk) qk_first.push_back(h * c);
    for (int c : v_chunk) v_first.push_back(h * c);
    const auto qh = channel_slice(q, qk_first, qk_chunk);
    const auto kh = channel_slice(k, qk_first, qk_chunk);
    const auto a = ad::softmax_rows(ad::scale(inner_product_matrix(qh, kh), inv_scale));
    if (weights) weights->push_back(a);
    const auto vh = channel_slice(v, v_first, v_chunk);
    for (std::size_t i = 0; i < vh.parts.size(); ++i) per_type[i].push_back(ad::matmul(a, vh.parts[i]));
  }
  VarFeature<Scalar> out;
  out.layout = v.layout;
  for (auto& parts : per_type) out.parts.push_back(parts.size() == 1 ? parts.front() : ad::concat_cols(parts));
  return out;
}

EquiAttention::EquiAttention(std::string name, const FeatureLayout& query_in, const FeatureLayout& context_in,
                             const FeatureLayout& qk, const FeatureLayout& value, const FeatureLayout& out,
                             int heads)
    : q_(name + ".q", query_in, qk, false),
      k_(name + ".k", context_in, qk, false),
      v_(name + ".v", context_in, value, false),
      o_(name + ".o", value, out, true),
      heads_(heads) {
  head_chunks(qk, heads);
  head_chunks(value, heads);
}

template <typename Scalar>
void EquiAttention::init(ad::ParamSet<Scalar>& params, std::mt19937_64& rng) const {
  q_.init(params, rng);
  k_.init(params, rng);
  v_.init(params, rng);
  o_.init(params, rng);
}

template <typename Scalar>
VarFeature<Scalar> EquiAttention::operator()(const VarFeature<Scalar>& x, const VarFeature<Scalar>& context,
                                             const ad::ParamSet<Scalar>& params,
                                             std::vector<ad::Var<Scalar>>* weights) const {
  const auto q = q_(x, params);
  const auto k = k_(context, params);
  const auto v = v_(context, params);
  return o_(multihead_attention(q, k, v, heads_, weights), params);
}

EquiTransformerBlock::EquiTransformerBlock(std::string name, const FeatureLayout& latent,
                                           std::optional<FeatureLayout> context, int heads)
    : name_(std::move(name)), cross_(context.has_value()) {
  const FeatureLayout ctx = context ? *context : latent;
  norm_x_ = EquiNormLayer(name_ + ".ln_x", latent);
  if (cross_) norm_ctx_ = EquiNormLayer(name_ + ".ln_ctx", ctx);
  norm_mlp_ = EquiNormLayer(name_ + ".ln_mlp", latent);
  attn_ = EquiAttention(name_ + ".attn", latent, ctx, latent, latent, latent, heads);
  mlp_ = EquiMlpStack(name_ + ".mlp", latent, {latent}, latent);
}

template <typename Scalar>
void EquiTransformerBlock::init(ad::ParamSet<Scalar>& params, std::mt19937_64& rng) const {
  norm_x_.init(params);
  if (cross_) norm_ctx_.init(params);
  norm_mlp_.init(params);
  attn_.init(params, rng);
  mlp_.init(params, rng);
}

template <typename Scalar>
VarFeature<Scalar> EquiTransformerBlock::operator()(const VarFeature<Scalar>& x, const VarFeature<Scalar>* context,
                                                    const ad::ParamSet<Scalar>& params,
                                                    std::vector<ad::Var<Scalar>>* weights) const {
  if (cross_ && !context) throw std::invalid_argument(name_ + ": cross-attention block needs a context");
  const auto xn = norm_x_(x, params);
  const auto cn = cross_ ? norm_ctx_(*context, params) : xn;
  auto h = add(x, attn_(xn, cn, params, weights));
  return add(h, mlp_(norm_mlp_(h, params), params));
}

#define EPIO_INSTANTIATE_ATTENTION(S)                                                                         \
  template S invariant_inner_product<S>(const EquiTensor<S>&, const EquiTensor<S>&);                          \
  template ad::Var<S> inner_product_matrix<S>(const VarFeature<S>&, const VarFeature<S>&);                    \
  template VarFeature<S> channel_slice<S>(const VarFeature<S>&, const std::vector<int>&,                      \
                                          const std::vector<int>&);                                           \
  template VarFeature<S> multihead_attention<S>(const VarFeature<S>&, const VarFeature<S>&,                   \
                                                const VarFeature<S>&, int, std::vector<ad::Var<S>>*);         \
  template void EquiAttention::init<S>(ad::ParamSet<S>&, std::mt19937_64&) const;                             \
  template VarFeature<S> EquiAttention::operator()<S>(const VarFeature<S>&, const VarFeature<S>&,             \
                                                      const ad::ParamSet<S>&, std::vector<ad::Var<S>>*)       \
      const;                                                                                                  \
  template void EquiTransformerBlock::init<S>(ad::ParamSet<S>&, std::mt19937_64&) const;                      \
  template VarFeature<S> EquiTransformerBlock::operator()<S>(const VarFeature<S>&, const VarFeature<S>*,      \
                                                             const ad::ParamSet<S>&,                          \
                                                             std::vector<ad::Var<S>>*) const;

EPIO_INSTANTIATE_ATTENTION(float)
EPIO_INSTANTIATE_ATTENTION(double)

}  // namespace epio
