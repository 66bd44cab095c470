#pragma once

// Equivariant feature algebra: sequences of tokens whose hidden state is a
// direct sum of type-l blocks, each (2l+1) x C_l, and the layers that act on
// them while commuting with rotations.
//
// Storage: the type-l part of N tokens is one N x ((2l+1) C_l) matrix. Row n
// is the column-major vectorization of token n's (2l+1) x C_l block, so the
// column index of entry (m, c) is c * (2l+1) + m.

#include "epio/autodiff.hpp"
#include "epio/harmonics.hpp"

#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace epio {

struct TypeSpec {
  int order = 0;
  int channels = 0;
  bool operator==(const TypeSpec&) const = default;
};

/// Ordered list of (order, channel count) pairs with strictly increasing orders.
class FeatureLayout {
 public:
  FeatureLayout() = default;
  explicit FeatureLayout(std::vector<TypeSpec> types);

  const std::vector<TypeSpec>& types() const { return types_; }
  std::size_t size() const { return types_.size(); }
  bool has(int order) const { return find(order) >= 0; }
  int find(int order) const;
  int channels(int order) const;
  std::vector<int> orders() const;
  /// Sum over types of (2l+1) C_l.
  int width() const;
  /// Sum over types of C_l.
  int total_channels() const;
  /// Same orders, restricted to l >= 1.
  FeatureLayout without_scalars() const;

  bool operator==(const FeatureLayout&) const = default;

 private:
  std::vector<TypeSpec> types_;
};

inline int type_dim(int order) { return 2 * order + 1; }

/// N tokens sharing one FeatureLayout; value semantics.
template <typename Scalar>
class EquiTensor {
 public:
  EquiTensor() = default;
  EquiTensor(FeatureLayout layout, std::vector<Matrix<Scalar>> blocks);

  static EquiTensor zeros(const FeatureLayout& layout, Eigen::Index tokens);
  static EquiTensor random(const FeatureLayout& layout, Eigen::Index tokens, std::mt19937_64& rng,
                           double stddev = 1.0);

  const FeatureLayout& layout() const { return layout_; }
  Eigen::Index tokens() const { return blocks_.empty() ? 0 : blocks_.front().rows(); }
  const Matrix<Scalar>& part(std::size_t type_index) const { return blocks_.at(type_index); }
  Matrix<Scalar>& part(std::size_t type_index) { return blocks_.at(type_index); }
  const std::vector<Matrix<Scalar>>& parts() const { return blocks_; }

  /// Token `token`'s type-`order` block as a (2l+1) x C_l matrix.
  Matrix<Scalar> block(Eigen::Index token, int order) const;
  void set_block(Eigen::Index token, int order, const Matrix<Scalar>& value);

  /// N x width, types concatenated in layout order.
  Matrix<Scalar> flatten() const;

  EquiTensor operator+(const EquiTensor& other) const;
  EquiTensor operator*(Scalar s) const;

 private:
  FeatureLayout layout_;
  std::vector<Matrix<Scalar>> blocks_;
};

/// max |a - b| over all entries, and the relative version max|a-b| / max(|b|, floor).
template <typename Scalar>
double max_abs_diff(const EquiTensor<Scalar>& a, const EquiTensor<Scalar>& b);
template <typename Scalar>
double rel_diff(const EquiTensor<Scalar>& a, const EquiTensor<Scalar>& b);

// ---------------------------------------------------------------------------
// Value-level parameters.

template <typename Scalar>
struct EquiLinearParams {
  FeatureLayout in, out;
  std::map<int, Matrix<Scalar>> weights;  // order -> C_in x C_out
  RowVector<Scalar> bias0;                // empty, or 1 x C_0^out

  static EquiLinearParams identity(const FeatureLayout& layout);
  static EquiLinearParams zeros(const FeatureLayout& in, const FeatureLayout& out);
  static EquiLinearParams random(const FeatureLayout& in, const FeatureLayout& out, std::mt19937_64& rng,
                                 bool with_bias = false);
};

template <typename Scalar>
struct LayerNormParams {
  RowVector<Scalar> gamma, beta;  // length C_0 + sum_{l>=1} C_l
  Scalar eps = Scalar(1e-6);

  static LayerNormParams identity(const FeatureLayout& layout);
  static LayerNormParams random(const FeatureLayout& layout, std::mt19937_64& rng);
};

template <typename Scalar>
struct EquiMlpLayer {
  EquiLinearParams<Scalar> linear;
  LayerNormParams<Scalar> norm;
  EquiLinearParams<Scalar> gate;  // maps linear.out onto itself
};

// ---------------------------------------------------------------------------
// Graph-level (differentiable) representation.

template <typename Scalar>
struct VarFeature {
  FeatureLayout layout;
  std::vector<ad::Var<Scalar>> parts;

  const ad::Var<Scalar>& part(int order) const;
  Eigen::Index tokens() const { return parts.front().rows(); }
  ad::Tape<Scalar>& tape() const { return *parts.front().tape(); }
};

template <typename Scalar>
VarFeature<Scalar> to_graph(ad::Tape<Scalar>& tape, const EquiTensor<Scalar>& x, bool requires_grad = false);
template <typename Scalar>
EquiTensor<Scalar> from_graph(const VarFeature<Scalar>& x);

template <typename Scalar>
struct LinearBinding {
  FeatureLayout in, out;
  std::map<int, ad::Var<Scalar>> weights;
  std::optional<ad::Var<Scalar>> bias0;
};

template <typename Scalar>
struct NormBinding {
  ad::Var<Scalar> gamma, beta;
  Scalar eps = Scalar(1e-6);
};

template <typename Scalar>
LinearBinding<Scalar> bind(ad::Tape<Scalar>& tape, const EquiLinearParams<Scalar>& p, bool requires_grad = false);
template <typename Scalar>
NormBinding<Scalar> bind(ad::Tape<Scalar>& tape, const LayerNormParams<Scalar>& p, bool requires_grad = false);

inline constexpr double kNonlinearSlope = 0.1;
inline constexpr double kDirectionEps = 1e-9;
inline constexpr double kNormEps = 1e-6;

template <typename Scalar>
VarFeature<Scalar> rotate_feature(const VarFeature<Scalar>& f, const std::map<int, ad::Var<Scalar>>& wigner);
template <typename Scalar>
VarFeature<Scalar> equi_linear(const VarFeature<Scalar>& f, const LinearBinding<Scalar>& p);
template <typename Scalar>
VarFeature<Scalar> equi_layer_norm(const VarFeature<Scalar>& f, const NormBinding<Scalar>& p);
template <typename Scalar>
VarFeature<Scalar> equi_nonlinear(const VarFeature<Scalar>& f, const LinearBinding<Scalar>& gate);
/// Per-type, per-channel inner products of two equal-layout features: N x sum C_l.
template <typename Scalar>
ad::Var<Scalar> channel_inner_products(const VarFeature<Scalar>& a, const VarFeature<Scalar>& b);
template <typename Scalar>
ad::Var<Scalar> invariant_layer(const VarFeature<Scalar>& f, const LinearBinding<Scalar>& pa,
                                const LinearBinding<Scalar>& pb);
template <typename Scalar>
VarFeature<Scalar> add(const VarFeature<Scalar>& a, const VarFeature<Scalar>& b);
/// Mean over tokens (keeps the layout, one token out).
template <typename Scalar>
VarFeature<Scalar> mean_tokens(const VarFeature<Scalar>& f);
/// Token rows flattened to N x width.
template <typename Scalar>
ad::Var<Scalar> flatten(const VarFeature<Scalar>& f);

// ---------------------------------------------------------------------------
// Value-level API.

template <typename Scalar>
EquiTensor<Scalar> rotate_feature(const EquiTensor<Scalar>& f, const Rotation& rot);
template <typename Scalar>
EquiTensor<Scalar> equi_linear(const EquiTensor<Scalar>& f, const EquiLinearParams<Scalar>& p);
template <typename Scalar>
EquiTensor<Scalar> equi_layer_norm(const EquiTensor<Scalar>& f, const LayerNormParams<Scalar>& p);
template <typename Scalar>
EquiTensor<Scalar> equi_nonlinear(const EquiTensor<Scalar>& f, const EquiLinearParams<Scalar>& gate);
template <typename Scalar>
Matrix<Scalar> invariant_layer(const EquiTensor<Scalar>& f, const EquiLinearParams<Scalar>& pa,
                               const EquiLinearParams<Scalar>& pb);
template <typename Scalar>
EquiTensor<Scalar> equi_mlp(const EquiTensor<Scalar>& f, const std::vector<EquiMlpLayer<Scalar>>& layers);

// ---------------------------------------------------------------------------
// Named-parameter layers used by the networks. Each owns a name prefix and
// knows how to initialize and bind its parameters in a ParamSet.

class EquiLinearLayer {
 public:
  EquiLinearLayer() = default;
  EquiLinearLayer(std::string name, FeatureLayout in, FeatureLayout out, bool bias);

  template <typename Scalar>
  void init(ad::ParamSet<Scalar>& params, std::mt19937_64& rng) const;
  template <typename Scalar>
  LinearBinding<Scalar> bind(ad::Tape<Scalar>& tape, const ad::ParamSet<Scalar>& params) const;
  template <typename Scalar>
  VarFeature<Scalar> operator()(const VarFeature<Scalar>& x, const ad::ParamSet<Scalar>& params) const {
    return equi_linear(x, bind(x.tape(), params));
  }

  const FeatureLayout& in() const { return in_; }
  const FeatureLayout& out() const { return out_; }
  const std::string& name() const { return name_; }

 private:
  std::string name_;
  FeatureLayout in_, out_;
  bool bias_ = false;
};

class EquiNormLayer {
 public:
  EquiNormLayer() = default;
  EquiNormLayer(std::string name, FeatureLayout layout);

  template <typename Scalar>
  void init(ad::ParamSet<Scalar>& params) const;
  template <typename Scalar>
  VarFeature<Scalar> operator()(const VarFeature<Scalar>& x, const ad::ParamSet<Scalar>& params) const;

 private:
  std::string name_;
  FeatureLayout layout_;
};

/// linear -> layer norm -> nonlinearity, repeated; optional output linear.
class EquiMlpStack {
 public:
  EquiMlpStack() = default;
  EquiMlpStack(std::string name, const FeatureLayout& in, const std::vector<FeatureLayout>& hidden,
               std::optional<FeatureLayout> out, bool normalize = true);

  template <typename Scalar>
  void init(ad::ParamSet<Scalar>& params, std::mt19937_64& rng) const;
  template <typename Scalar>
  VarFeature<Scalar> operator()(const VarFeature<Scalar>& x, const ad::ParamSet<Scalar>& params) const;

 private:
  struct Stage {
    EquiLinearLayer linear;
    EquiNormLayer norm;
    EquiLinearLayer gate;
  };
  std::vector<Stage> stages_;
  std::optional<EquiLinearLayer> out_;
  bool normalize_ = true;
};

/// Ordinary dense layer x W + b, used by the conventional parts of the networks.
class DenseLayer {
 public:
  DenseLayer() = default;
  DenseLayer(std::string name, int in, int out, bool bias = true);

  template <typename Scalar>
  void init(ad::ParamSet<Scalar>& params, std::mt19937_64& rng) const;
  template <typename Scalar>
  ad::Var<Scalar> operator()(const ad::Var<Scalar>& x, const ad::ParamSet<Scalar>& params) const;

  int in() const { return in_; }
  int out() const { return out_; }

 private:
  std::string name_;
  int in_ = 0, out_ = 0;
  bool bias_ = true;
};

class NormLayer {
 public:
  NormLayer() = default;
  NormLayer(std::string name, int width);

  template <typename Scalar>
  void init(ad::ParamSet<Scalar>& params) const;
  template <typename Scalar>
  ad::Var<Scalar> operator()(const ad::Var<Scalar>& x, const ad::ParamSet<Scalar>& params) const;

 private:
  std::string name_;
  int width_ = 0;
};

/// Differentiable D^l(M) for a 3x3 variable M.
template <typename Scalar>
ad::Var<Scalar> wigner_d_var(const ad::Var<Scalar>& m, int order);

}  // namespace epio
