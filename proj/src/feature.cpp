#include "epio/feature.hpp"

#include <algorithm>
#include <cmath>

namespace epio {

// ---------------------------------------------------------------------------
// FeatureLayout

FeatureLayout::FeatureLayout(std::vector<TypeSpec> types) : types_(std::move(types)) {
  for (std::size_t i = 0; i < types_.size(); ++i) {
    if (types_[i].order < 0 || types_[i].channels <= 0) {
      throw std::invalid_argument("FeatureLayout: orders must be >= 0 and channel counts positive");
    }
    if (i > 0 && types_[i].order <= types_[i - 1].order) {
      throw std::invalid_argument("FeatureLayout: orders must be strictly increasing");
    }
  }
}

int FeatureLayout::find(int order) const {
  for (std::size_t i = 0; i < types_.size(); ++i) {
    if (types_[i].order == order) return static_cast<int>(i);
  }
  return -1;
}

int FeatureLayout::channels(int order) const {
  const int i = find(order);
  return i < 0 ? 0 : types_[i].channels;
}

std::vector<int> FeatureLayout::orders() const {
  std::vector<int> out;
  for (const auto& t : types_) out.push_back(t.order);
  return out;
}

int FeatureLayout::width() const {
  int w = 0;
  for (const auto& t : types_) w += type_dim(t.order) * t.channels;
  return w;
}

int FeatureLayout::total_channels() const {
  int c = 0;
  for (const auto& t : types_) c += t.channels;
  return c;
}

FeatureLayout FeatureLayout::without_scalars() const {
  std::vector<TypeSpec> out;
  for (const auto& t : types_) {
    if (t.order > 0) out.push_back(t);
  }
  return FeatureLayout(std::move(out));
}

// ---------------------------------------------------------------------------
// EquiTensor

template <typename Scalar>
EquiTensor<Scalar>::EquiTensor(FeatureLayout layout, std::vector<Matrix<Scalar>> blocks)
    : layout_(std::move(layout)), blocks_(std::move(blocks)) {
  if (blocks_.size() != layout_.size()) throw ShapeError("EquiTensor: one block per type required");
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto& t = layout_.types()[i];
    if (blocks_[i].cols() != type_dim(t.order) * t.channels || blocks_[i].rows() != blocks_[0].rows()) {
      throw ShapeError("EquiTensor: block shape inconsistent with layout");
    }
  }
}

template <typename Scalar>
EquiTensor<Scalar> EquiTensor<Scalar>::zeros(const FeatureLayout& layout, Eigen::Index tokens) {
  std::vector<Matrix<Scalar>> blocks;
  for (const auto& t : layout.types()) blocks.push_back(Matrix<Scalar>::Zero(tokens, type_dim(t.order) * t.channels));
  return EquiTensor(layout, std::move(blocks));
}

template <typename Scalar>
EquiTensor<Scalar> EquiTensor<Scalar>::random(const FeatureLayout& layout, Eigen::Index tokens,
                                              std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> normal(0.0, stddev);
  EquiTensor out = zeros(layout, tokens);
  for (auto& b : out.blocks_) {
    for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = Scalar(normal(rng));
  }
  return out;
}

template <typename Scalar>
Matrix<Scalar> EquiTensor<Scalar>::block(Eigen::Index token, int order) const {
  const int i = layout_.find(order);
  if (i < 0) throw std::out_of_range("EquiTensor has no type " + std::to_string(order));
  const int g = type_dim(order);
  const int c = layout_.types()[i].channels;
  Matrix<Scalar> out(g, c);
  for (int ch = 0; ch < c; ++ch) {
    for (int m = 0; m < g; ++m) out(m, ch) = blocks_[i](token, ch * g + m);
  }
  return out;
}

template <typename Scalar>
void EquiTensor<Scalar>::set_block(Eigen::Index token, int order, const Matrix<Scalar>& value) {
  const int i = layout_.find(order);
  if (i < 0) throw std::out_of_range("EquiTensor has no type " + std::to_string(order));
  const int g = type_dim(order);
  const int c = layout_.types()[i].channels;
  if (value.rows() != g || value.cols() != c) throw ShapeError("set_block: wrong block shape");
  for (int ch = 0; ch < c; ++ch) {
    for (int m = 0; m < g; ++m) blocks_[i](token, ch * g + m) = value(m, ch);
  }
}

template <typename Scalar>
Matrix<Scalar> EquiTensor<Scalar>::flatten() const {
  Matrix<Scalar> out(tokens(), layout_.width());
  Eigen::Index off = 0;
  for (const auto& b : blocks_) {
    out.middleCols(off, b.cols()) = b;
    off += b.cols();
  }
  return out;
}

template <typename Scalar>
EquiTensor<Scalar> EquiTensor<Scalar>::operator+(const EquiTensor& other) const {
  if (!(layout_ == other.layout_) || tokens() != other.tokens()) throw ShapeError("EquiTensor +: layout mismatch");
  EquiTensor out = *this;
  for (std::size_t i = 0; i < blocks_.size(); ++i) out.blocks_[i] += other.blocks_[i];
  return out;
}

template <typename Scalar>
EquiTensor<Scalar> EquiTensor<Scalar>::operator*(Scalar s) const {
  EquiTensor out = *this;
  for (auto& b : out.blocks_) b *= s;
  return out;
}

template <typename Scalar>
double max_abs_diff(const EquiTensor<Scalar>& a, const EquiTensor<Scalar>& b) {
  if (!(a.layout() == b.layout()) || a.tokens() != b.tokens()) throw ShapeError("max_abs_diff: layout mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.parts().size(); ++i) {
    if (a.part(i).size() == 0) continue;
    m = std::max(m, double((a.part(i) - b.part(i)).cwiseAbs().maxCoeff()));
  }
  return m;
}

template <typename Scalar>
double rel_diff(const EquiTensor<Scalar>& a, const EquiTensor<Scalar>& b) {
  double scale = 0.0;
  for (const auto& p : b.parts()) {
    if (p.size() > 0) scale = std::max(scale, double(p.cwiseAbs().maxCoeff()));
  }
  return max_abs_diff(a, b) / std::max(scale, 1e-12);
}

// ---------------------------------------------------------------------------
// Value-level parameters

template <typename Scalar>
EquiLinearParams<Scalar> EquiLinearParams<Scalar>::identity(const FeatureLayout& layout) {
  EquiLinearParams p;
  p.in = p.out = layout;
  for (const auto& t : layout.types()) p.weights[t.order] = Matrix<Scalar>::Identity(t.channels, t.channels);
  return p;
}

template <typename Scalar>
EquiLinearParams<Scalar> EquiLinearParams<Scalar>::zeros(const FeatureLayout& in, const FeatureLayout& out) {
  EquiLinearParams p;
  p.in = in;
  p.out = out;
  for (const auto& t : out.types()) p.weights[t.order] = Matrix<Scalar>::Zero(in.channels(t.order), t.channels);
  return p;
}

template <typename Scalar>
EquiLinearParams<Scalar> EquiLinearParams<Scalar>::random(const FeatureLayout& in, const FeatureLayout& out,
                                                          std::mt19937_64& rng, bool with_bias) {
  EquiLinearParams p = zeros(in, out);
  for (auto& [order, w] : p.weights) {
    std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(double(w.rows())));
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = Scalar(normal(rng));
  }
  if (with_bias && out.has(0)) {
    std::normal_distribution<double> normal(0.0, 0.1);
    p.bias0.resize(out.channels(0));
    for (Eigen::Index i = 0; i < p.bias0.size(); ++i) p.bias0(i) = Scalar(normal(rng));
  }
  return p;
}

template <typename Scalar>
LayerNormParams<Scalar> LayerNormParams<Scalar>::identity(const FeatureLayout& layout) {
  LayerNormParams p;
  p.gamma = RowVector<Scalar>::Ones(layout.total_channels());
  p.beta = RowVector<Scalar>::Zero(layout.total_channels());
  return p;
}

template <typename Scalar>
LayerNormParams<Scalar> LayerNormParams<Scalar>::random(const FeatureLayout& layout, std::mt19937_64& rng) {
  LayerNormParams p = identity(layout);
  std::normal_distribution<double> normal(0.0, 0.2);
  for (Eigen::Index i = 0; i < p.gamma.size(); ++i) {
    p.gamma(i) += Scalar(normal(rng));
    p.beta(i) = Scalar(normal(rng));
  }
  return p;
}

// ---------------------------------------------------------------------------
// Graph-level ops

template <typename Scalar>
const ad::Var<Scalar>& VarFeature<Scalar>::part(int order) const {
  const int i = layout.find(order);
  if (i < 0) throw std::out_of_range("VarFeature has no type " + std::to_string(order));
  return parts[i];
}

template <typename Scalar>
VarFeature<Scalar> to_graph(ad::Tape<Scalar>& tape, const EquiTensor<Scalar>& x, bool requires_grad) {
  VarFeature<Scalar> out;
  out.layout = x.layout();
  for (const auto& p : x.parts()) out.parts.push_back(requires_grad ? tape.variable(p) : tape.constant(p));
  return out;
}

template <typename Scalar>
EquiTensor<Scalar> from_graph(const VarFeature<Scalar>& x) {
  std::vector<Matrix<Scalar>> blocks;
  for (const auto& p : x.parts) blocks.push_back(p.value());
  return EquiTensor<Scalar>(x.layout, std::move(blocks));
}

template <typename Scalar>
LinearBinding<Scalar> bind(ad::Tape<Scalar>& tape, const EquiLinearParams<Scalar>& p, bool requires_grad) {
  LinearBinding<Scalar> b;
  b.in = p.in;
  b.out = p.out;
  for (const auto& [order, w] : p.weights) b.weights[order] = requires_grad ? tape.variable(w) : tape.constant(w);
  if (p.bias0.size() > 0) b.bias0 = requires_grad ? tape.variable(p.bias0) : tape.constant(p.bias0);
  return b;
}

template <typename Scalar>
NormBinding<Scalar> bind(ad::Tape<Scalar>& tape, const LayerNormParams<Scalar>& p, bool requires_grad) {
  NormBinding<Scalar> b;
  b.gamma = requires_grad ? tape.variable(p.gamma) : tape.constant(p.gamma);
  b.beta = requires_grad ? tape.variable(p.beta) : tape.constant(p.beta);
  b.eps = p.eps;
  return b;
}

template <typename Scalar>
VarFeature<Scalar> rotate_feature(const VarFeature<Scalar>& f, const std::map<int, ad::Var<Scalar>>& wigner) {
  VarFeature<Scalar> out;
  out.layout = f.layout;
  for (std::size_t i = 0; i < f.parts.size(); ++i) {
    const int order = f.layout.types()[i].order;
    if (order == 0) {
      out.parts.push_back(f.parts[i]);
      continue;
    }
    auto it = wigner.find(order);
    if (it == wigner.end()) throw std::out_of_range("rotate_feature: missing Wigner block for order " + std::to_string(order));
    out.parts.push_back(ad::rotate_blocks(f.parts[i], it->second, type_dim(order)));
  }
  return out;
}

template <typename Scalar>
VarFeature<Scalar> equi_linear(const VarFeature<Scalar>& f, const LinearBinding<Scalar>& p) {
  if (!(f.layout == p.in)) throw ShapeError("equi_linear: input layout does not match parameters");
  VarFeature<Scalar> out;
  out.layout = p.out;
  for (const auto& t : p.out.types()) {
    auto w = p.weights.find(t.order);
    if (w == p.weights.end() || !f.layout.has(t.order)) {
      throw ShapeError("equi_linear: no weight or input for order " + std::to_string(t.order));
    }
    ad::Var<Scalar> y = ad::block_matmul(f.part(t.order), w->second, type_dim(t.order));
    if (t.order == 0 && p.bias0) y = ad::add_row(y, *p.bias0);
    out.parts.push_back(y);
  }
  return out;
}

namespace {

template <typename Scalar>
ad::Var<Scalar> channel_norms(const ad::Var<Scalar>& x, int group, double eps) {
  return ad::sqrt(ad::add_scalar(ad::group_sum_cols(ad::mul(x, x), group), Scalar(eps * eps)));
}

}  // namespace

template <typename Scalar>
VarFeature<Scalar> equi_layer_norm(const VarFeature<Scalar>& f, const NormBinding<Scalar>& p) {
  std::vector<ad::Var<Scalar>> columns;
  std::vector<ad::Var<Scalar>> norms(f.parts.size());
  for (std::size_t i = 0; i < f.parts.size(); ++i) {
    const int order = f.layout.types()[i].order;
    if (order == 0) {
      columns.push_back(f.parts[i]);
    } else {
      norms[i] = channel_norms(f.parts[i], type_dim(order), kNormEps);
      columns.push_back(norms[i]);
    }
  }
  ad::Var<Scalar> joined = columns.size() == 1 ? columns.front() : ad::concat_cols(columns);
  ad::Var<Scalar> normed = ad::layer_norm_rows(joined, p.gamma, p.beta, p.eps);
  VarFeature<Scalar> out;
  out.layout = f.layout;
  Eigen::Index off = 0;
  for (std::size_t i = 0; i < f.parts.size(); ++i) {
    const auto& t = f.layout.types()[i];
    ad::Var<Scalar> slice = ad::slice_cols(normed, off, t.channels);
    off += t.channels;
    if (t.order == 0) {
      out.parts.push_back(slice);
    } else {
      ad::Var<Scalar> factor = ad::div(slice, norms[i]);
      out.parts.push_back(ad::mul(ad::group_repeat_cols(factor, type_dim(t.order)), f.parts[i]));
    }
  }
  return out;
}

template <typename Scalar>
VarFeature<Scalar> equi_nonlinear(const VarFeature<Scalar>& f, const LinearBinding<Scalar>& gate) {
  const FeatureLayout vector_part = f.layout.without_scalars();
  VarFeature<Scalar> directions;
  if (vector_part.size() > 0) {
    VarFeature<Scalar> vf;
    vf.layout = vector_part;
    for (std::size_t i = 0; i < f.parts.size(); ++i) {
      if (f.layout.types()[i].order > 0) vf.parts.push_back(f.parts[i]);
    }
    directions = equi_linear(vf, gate);
  }
  const Scalar slope = Scalar(kNonlinearSlope);
  VarFeature<Scalar> out;
  out.layout = f.layout;
  for (std::size_t i = 0; i < f.parts.size(); ++i) {
    const int order = f.layout.types()[i].order;
    if (order == 0) {
      out.parts.push_back(ad::leaky_relu(f.parts[i], slope));
      continue;
    }
    const int g = type_dim(order);
    const ad::Var<Scalar>& h = f.parts[i];
    const ad::Var<Scalar>& hd = directions.part(order);
    ad::Var<Scalar> s = ad::group_sum_cols(ad::mul(h, hd), g);
    ad::Var<Scalar> nrm = channel_norms(hd, g, kDirectionEps);
    ad::Var<Scalar> coef = ad::div(ad::sub(ad::leaky_relu(s, slope), s), nrm);
    out.parts.push_back(ad::add(ad::mul(ad::group_repeat_cols(coef, g), hd), h));
  }
  return out;
}

template <typename Scalar>
ad::Var<Scalar> channel_inner_products(const VarFeature<Scalar>& a, const VarFeature<Scalar>& b) {
  if (!(a.layout == b.layout)) throw ShapeError("channel_inner_products: layout mismatch");
  std::vector<ad::Var<Scalar>> cols;
  for (std::size_t i = 0; i < a.parts.size(); ++i) {
    const int g = type_dim(a.layout.types()[i].order);
    cols.push_back(ad::group_sum_cols(ad::mul(a.parts[i], b.parts[i]), g));
  }
  return cols.size() == 1 ? cols.front() : ad::concat_cols(cols);
}

template <typename Scalar>
ad::Var<Scalar> invariant_layer(const VarFeature<Scalar>& f, const LinearBinding<Scalar>& pa,
                                const LinearBinding<Scalar>& pb) {
  if (!(pa.out == pb.out)) throw ShapeError("invariant_layer: both projections must share an output layout");
  return channel_inner_products(equi_linear(f, pa), equi_linear(f, pb));
}

template <typename Scalar>
VarFeature<Scalar> add(const VarFeature<Scalar>& a, const VarFeature<Scalar>& b) {
  if (!(a.layout == b.layout)) throw ShapeError("feature add: layout mismatch");
  VarFeature<Scalar> out;
  out.layout = a.layout;
  for (std::size_t i = 0; i < a.parts.size(); ++i) out.parts.push_back(ad::add(a.parts[i], b.parts[i]));
  return out;
}

template <typename Scalar>
VarFeature<Scalar> mean_tokens(const VarFeature<Scalar>& f) {
  VarFeature<Scalar> out;
  out.layout = f.layout;
  for (const auto& p : f.parts) out.parts.push_back(ad::mean_rows(p));
  return out;
}

template <typename Scalar>
ad::Var<Scalar> flatten(const VarFeature<Scalar>& f) {
  return f.parts.size() == 1 ? f.parts.front() : ad::concat_cols(f.parts);
}

template <typename Scalar>
ad::Var<Scalar> wigner_d_var(const ad::Var<Scalar>& m, int order) {
  auto& tape = *m.tape();
  if (m.rows() != 3 || m.cols() != 3) throw ShapeError("wigner_d_var needs a 3x3 input");
  if (order == 0) return tape.constant(Matrix<Scalar>::Identity(1, 1));
  const Matrix3d md = m.value().template cast<double>();
  Matrix<Scalar> d = wigner_d_raw(order, md).template cast<Scalar>();
  const int im = m.id();
  return tape.push(std::move(d), m.requires_grad(), [im, order](ad::Tape<Scalar>& tp, const Matrix<Scalar>& g) {
    const Matrix3d mv = tp.value(im).template cast<double>();
    const Matrix3d grad = wigner_d_raw_backward(order, mv, g.template cast<double>());
    tp.accumulate(im, grad.cast<Scalar>());
  });
}

// ---------------------------------------------------------------------------
// Value-level wrappers

template <typename Scalar>
EquiTensor<Scalar> rotate_feature(const EquiTensor<Scalar>& f, const Rotation& rot) {
  std::vector<Matrix<Scalar>> blocks;
  for (std::size_t i = 0; i < f.parts().size(); ++i) {
    const int order = f.layout().types()[i].order;
    if (order == 0) {
      blocks.push_back(f.part(i));
      continue;
    }
    const int g = type_dim(order);
    const Matrix<Scalar> dt = wigner_d(order, rot).transpose().template cast<Scalar>();
    Matrix<Scalar> out(f.part(i).rows(), f.part(i).cols());
    for (Eigen::Index c = 0; c < f.part(i).cols() / g; ++c) {
      out.middleCols(c * g, g).noalias() = f.part(i).middleCols(c * g, g) * dt;
    }
    blocks.push_back(std::move(out));
  }
  return EquiTensor<Scalar>(f.layout(), std::move(blocks));
}

template <typename Scalar>
EquiTensor<Scalar> equi_linear(const EquiTensor<Scalar>& f, const EquiLinearParams<Scalar>& p) {
  ad::Tape<Scalar> tape(false);
  return from_graph(equi_linear(to_graph(tape, f), bind(tape, p)));
}

template <typename Scalar>
EquiTensor<Scalar> equi_layer_norm(const EquiTensor<Scalar>& f, const LayerNormParams<Scalar>& p) {
  ad::Tape<Scalar> tape(false);
  return from_graph(equi_layer_norm(to_graph(tape, f), bind(tape, p)));
}

template <typename Scalar>
EquiTensor<Scalar> equi_nonlinear(const EquiTensor<Scalar>& f, const EquiLinearParams<Scalar>& gate) {
  ad::Tape<Scalar> tape(false);
  return from_graph(equi_nonlinear(to_graph(tape, f), bind(tape, gate)));
}

template <typename Scalar>
Matrix<Scalar> invariant_layer(const EquiTensor<Scalar>& f, const EquiLinearParams<Scalar>& pa,
                               const EquiLinearParams<Scalar>& pb) {
  ad::Tape<Scalar> tape(false);
  return invariant_layer(to_graph(tape, f), bind(tape, pa), bind(tape, pb)).value();
}

template <typename Scalar>
EquiTensor<Scalar> equi_mlp(const EquiTensor<Scalar>& f, const std::vector<EquiMlpLayer<Scalar>>& layers) {
  ad::Tape<Scalar> tape(false);
  VarFeature<Scalar> x = to_graph(tape, f);
  for (const auto& layer : layers) {
    x = equi_linear(x, bind(tape, layer.linear));
    x = equi_layer_norm(x, bind(tape, layer.norm));
    x = equi_nonlinear(x, bind(tape, layer.gate));
  }
  return from_graph(x);
}

// ---------------------------------------------------------------------------
// Named layers

EquiLinearLayer::EquiLinearLayer(std::string name, FeatureLayout in, FeatureLayout out, bool bias)
    : name_(std::move(name)), in_(std::move(in)), out_(std::move(out)), bias_(bias) {
  for (const auto& t : out_.types()) {
    if (!in_.has(t.order)) throw ShapeError("EquiLinearLayer " + name_ + ": output order missing from input");
  }
}

template <typename Scalar>
void EquiLinearLayer::init(ad::ParamSet<Scalar>& params, std::mt19937_64& rng) const {
  for (const auto& t : out_.types()) {
    const int c_in = in_.channels(t.order);
    std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(double(c_in)));
    Matrix<Scalar> w(c_in, t.channels);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = Scalar(normal(rng));
    params[name_ + ".w" + std::to_string(t.order)] = std::move(w);
  }
  if (bias_ && out_.has(0)) params[name_ + ".b"] = Matrix<Scalar>::Zero(1, out_.channels(0));
}

template <typename Scalar>
LinearBinding<Scalar> EquiLinearLayer::bind(ad::Tape<Scalar>& tape, const ad::ParamSet<Scalar>& params) const {
  LinearBinding<Scalar> b;
  b.in = in_;
  b.out = out_;
  for (const auto& t : out_.types()) b.weights[t.order] = tape.param(params, name_ + ".w" + std::to_string(t.order));
  if (bias_ && out_.has(0)) b.bias0 = tape.param(params, name_ + ".b");
  return b;
}

EquiNormLayer::EquiNormLayer(std::string name, FeatureLayout layout)
    : name_(std::move(name)), layout_(std::move(layout)) {}

template <typename Scalar>
void EquiNormLayer::init(ad::ParamSet<Scalar>& params) const {
  params[name_ + ".gamma"] = Matrix<Scalar>::Ones(1, layout_.total_channels());
  params[name_ + ".beta"] = Matrix<Scalar>::Zero(1, layout_.total_channels());
}

template <typename Scalar>
VarFeature<Scalar> EquiNormLayer::operator()(const VarFeature<Scalar>& x, const ad::ParamSet<Scalar>& params) const {
  NormBinding<Scalar> b;
  b.gamma = x.tape().param(params, name_ + ".gamma");
  b.beta = x.tape().param(params, name_ + ".beta");
  return equi_layer_norm(x, b);
}

EquiMlpStack::EquiMlpStack(std::string name, const FeatureLayout& in, const std::vector<FeatureLayout>& hidden,
                           std::optional<FeatureLayout> out, bool normalize)
    : normalize_(normalize) {
  FeatureLayout cur = in;
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    const std::string p = name + "." + std::to_string(i);
    Stage s;
    s.linear = EquiLinearLayer(p + ".lin", cur, hidden[i], true);
    s.norm = EquiNormLayer(p + ".ln", hidden[i]);
    const FeatureLayout vec = hidden[i].without_scalars();
    s.gate = EquiLinearLayer(p + ".gate", vec, vec, false);
    stages_.push_back(std::move(s));
    cur = hidden[i];
  }
  if (out) out_ = EquiLinearLayer(name + ".out", cur, *out, true);
}

template <typename Scalar>
void EquiMlpStack::init(ad::ParamSet<Scalar>& params, std::mt19937_64& rng) const {
  for (const auto& s : stages_) {
    s.linear.init(params, rng);
    if (normalize_) s.norm.init(params);
    s.gate.init(params, rng);
  }
  if (out_) out_->init(params, rng);
}

template <typename Scalar>
VarFeature<Scalar> EquiMlpStack::operator()(const VarFeature<Scalar>& x, const ad::ParamSet<Scalar>& params) const {
  VarFeature<Scalar> h = x;
  for (const auto& s : stages_) {
    h = s.linear(h, params);
    if (normalize_) h = s.norm(h, params);
    h = equi_nonlinear(h, s.gate.bind(h.tape(), params));
  }
  if (out_) h = (*out_)(h, params);
  return h;
}

DenseLayer::DenseLayer(std::string name, int in, int out, bool bias)
    : name_(std::move(name)), in_(in), out_(out), bias_(bias) {}

template <typename Scalar>
void DenseLayer::init(ad::ParamSet<Scalar>& params, std::mt19937_64& rng) const {
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(double(in_)));
  Matrix<Scalar> w(in_, out_);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = Scalar(normal(rng));
  params[name_ + ".w"] = std::move(w);
  if (bias_) params[name_ + ".b"] = Matrix<Scalar>::Zero(1, out_);
}

template <typename Scalar>
ad::Var<Scalar> DenseLayer::operator()(const ad::Var<Scalar>& x, const ad::ParamSet<Scalar>& params) const {
  auto& tape = *x.tape();
  ad::Var<Scalar> y = ad::matmul(x, tape.param(params, name_ + ".w"));
  if (bias_) y = ad::add_row(y, tape.param(params, name_ + ".b"));
  return y;
}

NormLayer::NormLayer(std::string name, int width) : name_(std::move(name)), width_(width) {}

template <typename Scalar>
void NormLayer::init(ad::ParamSet<Scalar>& params) const {
  params[name_ + ".gamma"] = Matrix<Scalar>::Ones(1, width_);
  params[name_ + ".beta"] = Matrix<Scalar>::Zero(1, width_);
}

template <typename Scalar>
ad::Var<Scalar> NormLayer::operator()(const ad::Var<Scalar>& x, const ad::ParamSet<Scalar>& params) const {
  auto& tape = *x.tape();
  return ad::layer_norm_rows(x, tape.param(params, name_ + ".gamma"), tape.param(params, name_ + ".beta"),
                             Scalar(kNormEps));
}

// ---------------------------------------------------------------------------
// Instantiations

#define EPIO_INSTANTIATE_FEATURE(S)                                                                           \
  template class EquiTensor<S>;                                                                               \
  template double max_abs_diff<S>(const EquiTensor<S>&, const EquiTensor<S>&);                                \
  template double rel_diff<S>(const EquiTensor<S>&, const EquiTensor<S>&);                                    \
  template struct EquiLinearParams<S>;                                                                        \
  template struct LayerNormParams<S>;                                                                         \
  template struct VarFeature<S>;                                                                              \
  template VarFeature<S> to_graph<S>(ad::Tape<S>&, const EquiTensor<S>&, bool);                               \
  template EquiTensor<S> from_graph<S>(const VarFeature<S>&);                                                 \
  template LinearBinding<S> bind<S>(ad::Tape<S>&, const EquiLinearParams<S>&, bool);                          \
  template NormBinding<S> bind<S>(ad::Tape<S>&, const LayerNormParams<S>&, bool);                             \
  template VarFeature<S> rotate_feature<S>(const VarFeature<S>&, const std::map<int, ad::Var<S>>&);           \
  template VarFeature<S> equi_linear<S>(const VarFeature<S>&, const LinearBinding<S>&);                       \
  template VarFeature<S> equi_layer_norm<S>(const VarFeature<S>&, const NormBinding<S>&);                     \
  template VarFeature<S> equi_nonlinear<S>(const VarFeature<S>&, const LinearBinding<S>&);                    \
  template ad::Var<S> channel_inner_products<S>(const VarFeature<S>&, const VarFeature<S>&);                  \
  template ad::Var<S> invariant_layer<S>(const VarFeature<S>&, const LinearBinding<S>&,                       \
                                         const LinearBinding<S>&);                                            \
  template VarFeature<S> add<S>(const VarFeature<S>&, const VarFeature<S>&);                                  \
  template VarFeature<S> mean_tokens<S>(const VarFeature<S>&);                                                \
  template ad::Var<S> flatten<S>(const VarFeature<S>&);                                                       \
  template ad::Var<S> wigner_d_var<S>(const ad::Var<S>&, int);                                                \
  template EquiTensor<S> rotate_feature<S>(const EquiTensor<S>&, const Rotation&);                            \
  template EquiTensor<S> equi_linear<S>(const EquiTensor<S>&, const EquiLinearParams<S>&);                    \
  template EquiTensor<S> equi_layer_norm<S>(const EquiTensor<S>&, const LayerNormParams<S>&);                 \
  template EquiTensor<S> equi_nonlinear<S>(const EquiTensor<S>&, const EquiLinearParams<S>&);                 \
  template Matrix<S> invariant_layer<S>(const EquiTensor<S>&, const EquiLinearParams<S>&,                     \
                                        const EquiLinearParams<S>&);                                          \
  template EquiTensor<S> equi_mlp<S>(const EquiTensor<S>&, const std::vector<EquiMlpLayer<S>>&);              \
  template void EquiLinearLayer::init<S>(ad::ParamSet<S>&, std::mt19937_64&) const;                           \
  template LinearBinding<S> EquiLinearLayer::bind<S>(ad::Tape<S>&, const ad::ParamSet<S>&) const;             \
  template void EquiNormLayer::init<S>(ad::ParamSet<S>&) const;                                               \
  template VarFeature<S> EquiNormLayer::operator()<S>(const VarFeature<S>&, const ad::ParamSet<S>&) const;    \
  template void EquiMlpStack::init<S>(ad::ParamSet<S>&, std::mt19937_64&) const;                              \
  template VarFeature<S> EquiMlpStack::operator()<S>(const VarFeature<S>&, const ad::ParamSet<S>&) const;     \
  template void DenseLayer::init<S>(ad::ParamSet<S>&, std::mt19937_64&) const;                                \
  template ad::Var<S> DenseLayer::operator()<S>(const ad::Var<S>&, const ad::ParamSet<S>&) const;             \
  template void NormLayer::init<S>(ad::ParamSet<S>&) const;                                                   \
  template ad::Var<S> NormLayer::operator()<S>(const ad::Var<S>&, const ad::ParamSet<S>&) const;

EPIO_INSTANTIATE_FEATURE(float)
EPIO_INSTANTIATE_FEATURE(double)

}  // namespace epio
