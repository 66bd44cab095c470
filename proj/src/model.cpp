#include "epio/model.hpp"

#include <cmath>
#include <cstdlib>
#include <numeric>

namespace epio {

namespace {

FeatureLayout scalar_layout(int width) { return FeatureLayout({{0, width}}); }

template <typename Scalar>
VarFeature<Scalar> scalar_feature(const ad::Var<Scalar>& x) {
  return VarFeature<Scalar>{scalar_layout(int(x.cols())), {x}};
}

template <typename Scalar>
ad::Var<Scalar> constant(ad::Tape<Scalar>& tape, const Matrix<double>& m) {
  return tape.constant(m.template cast<Scalar>());
}

// Rows (Y^l(p_0), ..., Y^l(p_{k-1})) for every point set: N x (2l+1) k.
Matrix<double> sph_channels(int l, const std::vector<Matrix<double>>& points) {
  const int g = type_dim(l);
  Matrix<double> out(points.front().rows(), g * Eigen::Index(points.size()));
  for (std::size_t c = 0; c < points.size(); ++c) out.middleCols(Eigen::Index(c) * g, g) = eval_sph_rows(l, points[c]);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void ModelConfig::validate() const {
  auto positive = [](int v, const char* what) {
    if (v <= 0) throw std::invalid_argument(std::string("ModelConfig: ") + what + " must be positive");
  };
  if (orders.empty()) throw std::invalid_argument("ModelConfig: order set is empty");
  if (orders.size() != latent_channels.size()) throw std::invalid_argument("ModelConfig: one channel count per order");
  for (std::size_t i = 0; i < orders.size(); ++i) {
    if (orders[i] < 1) throw std::invalid_argument("ModelConfig: orders must be >= 1");
    if (i > 0 && orders[i] <= orders[i - 1]) throw std::invalid_argument("ModelConfig: orders must ascend");
    positive(latent_channels[i], "latent channel count");
  }
  positive(patch_channels, "patch_channels");
  positive(latents, "latents");
  positive(latent_scalars, "latent_scalars");
  positive(cross_heads, "cross_heads");
  positive(heads, "heads");
  if (depth < 0) throw std::invalid_argument("ModelConfig: depth must be non-negative");
  positive(patch, "patch");
  positive(frequencies, "frequencies");
  positive(decoder_width, "decoder_width");
  positive(decoder_heads, "decoder_heads");
  positive(width, "width");
  positive(height, "height");
  if (width % patch != 0 || height % patch != 0) throw ShapeError("ModelConfig: image size not divisible by patch");
  if (decoder_width % decoder_heads != 0) throw ShapeError("ModelConfig: decoder width not divisible by heads");
  if (baseline_width < 0) throw std::invalid_argument("ModelConfig: baseline_width must be non-negative");
  if (decoder == DecoderKind::Equivariant && !geometric()) {
    throw std::invalid_argument("ModelConfig: the equivariant decoder needs the equivariant architecture with cameras");
  }
}

FeatureLayout ModelConfig::token_layout() const {
  if (arch == Architecture::Conventional) return scalar_layout(patch_channels + query_width());
  if (!use_cameras) return scalar_layout(patch_channels);
  std::vector<TypeSpec> types{{0, patch_channels}};
  for (int l : orders) types.push_back({l, 2});
  return FeatureLayout(types);
}

FeatureLayout ModelConfig::latent_layout() const {
  if (arch == Architecture::Conventional) return scalar_layout(baseline_width);
  if (!use_cameras) return scalar_layout(latent_scalars);
  std::vector<TypeSpec> types{{0, latent_scalars}};
  for (std::size_t i = 0; i < orders.size(); ++i) types.push_back({orders[i], latent_channels[i]});
  return FeatureLayout(types);
}

ModelConfig ModelConfig::full_scale() {
  ModelConfig c;
  c.orders = {1, 2, 4, 8};
  c.latent_channels = {64, 32, 8, 8};
  c.patch_channels = 960;
  c.latents = 1024;
  c.latent_scalars = 512;
  c.cross_heads = 1;
  c.heads = 8;
  c.depth = 8;
  c.frequencies = 15;
  c.decoder_width = 512;
  return c;
}

ModelInput apply_se3(const ModelInput& in, const Rotation& rot, const Vector3d& trans) {
  ModelInput out = in;
  out.cameras = apply_se3(in.cameras, rot, trans);
  out.query = apply_se3(in.query, rot, trans);
  return out;
}

Eigen::VectorXd fourier_pe(double x, int frequencies) {
  Eigen::VectorXd out(2 * frequencies + 1);
  out(0) = x;
  for (int k = 0; k < frequencies; ++k) {
    const double w = kPi * std::ldexp(1.0, k);
    out(1 + k) = std::sin(w * x);
    out(1 + frequencies + k) = std::cos(w * x);
  }
  return out;
}

template <typename Scalar>
ad::Var<Scalar> gram_schmidt(const ad::Var<Scalar>& a, const ad::Var<Scalar>& b) {
  auto& tape = *a.tape();
  const ad::Var<Scalar> one = tape.constant(Matrix<Scalar>::Ones(1, 1));
  const auto na = ad::sqrt(ad::sum(ad::mul(a, a)));
  if (!(double(na.value()(0, 0)) > kFrameEps)) throw DegenerateFrame("frame: first vector vanishes");
  const auto c1 = ad::mul_scalar(a, ad::div(one, na));
  const auto proj = ad::sum(ad::mul(b, c1));
  const auto rej = ad::sub(b, ad::mul_scalar(c1, proj));
  const auto nb = ad::sqrt(ad::sum(ad::mul(rej, rej)));
  if (!(double(nb.value()(0, 0)) > kFrameEps)) throw DegenerateFrame("frame: vectors are parallel");
  const auto c2 = ad::mul_scalar(rej, ad::div(one, nb));
  const auto c3 = ad::cross3(c1, c2);
  return ad::transpose(ad::concat_rows<Scalar>({c1, c2, c3}));
}

Eigen::VectorXd latent_to_sphere(const EquiTensor<double>& token, const SphereGrid& grid,
                                 const std::vector<int>& channels) {
  const auto& types = token.layout().types();
  if (token.tokens() != 1) throw ShapeError("latent_to_sphere expects a single token");
  if (channels.size() != types.size()) throw std::invalid_argument("latent_to_sphere: one channel per type");
  Eigen::VectorXd f = Eigen::VectorXd::Zero(Eigen::Index(grid.points.size()));
  for (std::size_t i = 0; i < types.size(); ++i) {
    if (channels[i] < 0 || channels[i] >= types[i].channels) {
      throw std::out_of_range("latent_to_sphere: channel index out of range");
    }
    const Eigen::VectorXd coeff = token.block(0, types[i].order).col(channels[i]);
    for (std::size_t k = 0; k < grid.points.size(); ++k) {
      f(Eigen::Index(k)) += coeff.dot(eval_sph(types[i].order, grid.points[k]));
    }
  }
  return f;
}

// ---------------------------------------------------------------------------
// Model

Model::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  if (cfg_.arch == Architecture::Conventional && cfg_.baseline_width == 0) {
    throw std::invalid_argument("conventional model needs a baseline width (see baseline_model)");
  }
  build();
}

void Model::build() {
  tokens_ = cfg_.token_layout();
  latent_ = cfg_.latent_layout();
  const int p = cfg_.patch;
  patch_ = DenseLayer("patch", 3 * p * p, cfg_.patch_channels);
  if (cfg_.geometric()) {
    std::vector<TypeSpec> in, out;
    for (std::size_t i = 0; i < cfg_.orders.size(); ++i) {
      in.push_back({cfg_.orders[i], 3});
      out.push_back({cfg_.orders[i], cfg_.latents * cfg_.latent_channels[i]});
    }
    geo_ = EquiLinearLayer("latent.geo", FeatureLayout(in), FeatureLayout(out), false);
    if (cfg_.decoder == DecoderKind::Canonical) {
      if (cfg_.orders.front() != 1) throw std::invalid_argument("canonical decoder needs type-1 latent features");
      const FeatureLayout vec({{1, cfg_.latent_channels.front()}});
      frame_mlp_ = EquiMlpStack("frame", vec, {vec}, FeatureLayout({{1, 2}}));
    }
  }
  blocks_.clear();
  blocks_.emplace_back("enc.cross", latent_, tokens_, cfg_.cross_heads);
  for (int k = 0; k < cfg_.depth; ++k) blocks_.emplace_back("enc.self" + std::to_string(k), latent_, std::nullopt, cfg_.heads);

  const int d = cfg_.decoder_width;
  const int lw = latent_.width();
  head1_ = DenseLayer("head.1", d, d);
  head2_ = DenseLayer("head.2", d, 1);
  if (cfg_.decoder == DecoderKind::Canonical) {
    dec_in_ = DenseLayer("dec.in", cfg_.query_width(), d);
    dec_ln_q_ = NormLayer("dec.ln_q", d);
    dec_ln_lat_ = NormLayer("dec.ln_lat", lw);
    dec_ln_mlp_ = NormLayer("dec.ln_mlp", d);
    dec_q_ = DenseLayer("dec.q", d, d, false);
    dec_k_ = DenseLayer("dec.k", lw, d, false);
    dec_v_ = DenseLayer("dec.v", lw, d, false);
    dec_o_ = DenseLayer("dec.o", d, d);
    dec_mlp1_ = DenseLayer("dec.mlp1", d, d);
    dec_mlp2_ = DenseLayer("dec.mlp2", d, d);
  } else {
    std::vector<TypeSpec> q;
    for (int l : cfg_.orders) q.push_back({l, 2});
    const FeatureLayout qk = latent_.without_scalars();
    edec_q_ = EquiLinearLayer("edec.q", FeatureLayout(q), qk, false);
    edec_k_ = EquiLinearLayer("edec.k", latent_, qk, false);
    edec_v_ = EquiLinearLayer("edec.v", latent_, latent_, false);
    edec_a_ = EquiLinearLayer("edec.a", latent_, latent_, false);
    edec_b_ = EquiLinearLayer("edec.b", latent_, latent_, false);
    head1_ = DenseLayer("head.1", latent_.total_channels(), d);
  }
}

template <typename Scalar>
ad::ParamSet<Scalar> Model::init(std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  ad::ParamSet<Scalar> params;
  patch_.init(params, rng);
  if (cfg_.geometric()) geo_.init(params, rng);
  {
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix<Scalar> r0(cfg_.latents, latent_.channels(0));
    for (Eigen::Index i = 0; i < r0.size(); ++i) r0.data()[i] = Scalar(normal(rng));
    params["latent.r0"] = std::move(r0);
  }
  for (const auto& b : blocks_) b.init(params, rng);
  if (cfg_.geometric() && cfg_.decoder == DecoderKind::Canonical) frame_mlp_.init(params, rng);
  if (cfg_.decoder == DecoderKind::Canonical) {
    dec_in_.init(params, rng);
    dec_ln_q_.init(params);
    dec_ln_lat_.init(params);
    dec_ln_mlp_.init(params);
    dec_q_.init(params, rng);
    dec_k_.init(params, rng);
    dec_v_.init(params, rng);
    dec_o_.init(params, rng);
    dec_mlp1_.init(params, rng);
    dec_mlp2_.init(params, rng);
  } else {
    edec_q_.init(params, rng);
    edec_k_.init(params, rng);
    edec_v_.init(params, rng);
    edec_a_.init(params, rng);
    edec_b_.init(params, rng);
  }
  head1_.init(params, rng);
  head2_.init(params, rng);
  return params;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, value] : init<float>(0)) n += std::size_t(value.size());
  return n;
}

std::vector<int> Model::all_pixels() const {
  std::vector<int> px(std::size_t(cfg_.width) * cfg_.height);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = int(i);
  return px;
}

Matrix<double> Model::patches(const Matrix<double>& image, int width, int height, int patch) {
  if (image.rows() != Eigen::Index(width) * height || image.cols() != 3) throw ShapeError("patches: image shape");
  if (width % patch != 0 || height % patch != 0) throw ShapeError("patches: size not divisible by patch");
  const int pw = width / patch, ph = height / patch;
  Matrix<double> out(pw * ph, 3 * patch * patch);
  for (int py = 0; py < ph; ++py) {
    for (int px = 0; px < pw; ++px) {
      for (int dy = 0; dy < patch; ++dy) {
        for (int dx = 0; dx < patch; ++dx) {
          const Eigen::Index src = Eigen::Index(py * patch + dy) * width + px * patch + dx;
          out.block(py * pw + px, (dy * patch + dx) * 3, 1, 3) = image.row(src);
        }
      }
    }
  }
  return out;
}

template <typename Scalar>
ad::Var<Scalar> Model::patch_embed(ad::Tape<Scalar>& tape, const ad::ParamSet<Scalar>& params,
                                   const Matrix<double>& image) const {
  return patch_(constant(tape, patches(image, cfg_.width, cfg_.height, cfg_.patch)), params);
}

template <typename Scalar>
VarFeature<Scalar> Model::input_tokens(ad::Tape<Scalar>& tape, const ad::ParamSet<Scalar>& params,
                                       const ModelInput& in) const {
  if (in.images.empty() || in.images.size() != in.cameras.size()) {
    throw std::invalid_argument("input_tokens: need one image per camera and at least one view");
  }
  const int p = cfg_.patch, pw = cfg_.width / p, ph = cfg_.height / p;
  std::vector<ad::Var<Scalar>> scalars;
  std::vector<Matrix<double>> dirs, offs;
  for (std::size_t v = 0; v < in.images.size(); ++v) {
    const Camera& cam = in.cameras.cameras[v];
    if (cam.width != cfg_.width || cam.height != cfg_.height) throw ShapeError("input_tokens: camera size differs from config");
    scalars.push_back(patch_embed(tape, params, in.images[v]));
    Matrix<double> d(pw * ph, 3), o(pw * ph, 3);
    const Vector3d off = normalized_offset(in.cameras, cam.t);
    for (int py = 0; py < ph; ++py) {
      for (int px = 0; px < pw; ++px) {
        d.row(py * pw + px) = cam.direction_at(px * p + 0.5 * p, py * p + 0.5 * p).transpose();
        o.row(py * pw + px) = off.transpose();
      }
    }
    dirs.push_back(std::move(d));
    offs.push_back(std::move(o));
  }
  auto stack = [](const std::vector<Matrix<double>>& parts) {
    Eigen::Index rows = 0;
    for (const auto& m : parts) rows += m.rows();
    Matrix<double> out(rows, parts.front().cols());
    rows = 0;
    for (const auto& m : parts) {
      out.middleRows(rows, m.rows()) = m;
      rows += m.rows();
    }
    return out;
  };
  const Matrix<double> d = stack(dirs), o = stack(offs);
  const auto feat = scalars.size() == 1 ? scalars.front() : ad::concat_rows(scalars);

  VarFeature<Scalar> out;
  out.layout = tokens_;
  if (cfg_.arch == Architecture::Conventional) {
    Matrix<double> rays(d.rows(), 6);
    rays << d, o;
    out.parts.push_back(ad::concat_cols<Scalar>({feat, ad::fourier_features(constant(tape, rays), cfg_.frequencies)}));
    return out;
  }
  out.parts.push_back(feat);
  if (!cfg_.use_cameras) return out;
  for (int l : cfg_.orders) out.parts.push_back(constant(tape, sph_channels(l, {d, o})));
  return out;
}

template <typename Scalar>
VarFeature<Scalar> Model::initial_latent(ad::Tape<Scalar>& tape, const ad::ParamSet<Scalar>& params,
                                         const CameraSet& cs) const {
  if (cs.size() == 0) throw std::invalid_argument("initial_latent: empty camera set");
  VarFeature<Scalar> out;
  out.layout = latent_;
  out.parts.push_back(tape.param(params, "latent.r0"));
  if (!cfg_.geometric()) return out;

  VarFeature<Scalar> avg;
  avg.layout = geo_.in();
  for (int l : cfg_.orders) {
    Matrix<double> acc = Matrix<double>::Zero(1, 3 * type_dim(l));
    for (const auto& cam : cs.cameras) {
      std::vector<Matrix<double>> cols;
      for (int j = 0; j < 3; ++j) cols.push_back(cam.r.matrix().col(j).transpose());
      acc += sph_channels(l, cols);
    }
    acc /= double(cs.size());
    avg.parts.push_back(constant(tape, acc));
  }
  const VarFeature<Scalar> g = geo_(avg, params);
  const Eigen::Index n = cfg_.latents;
  for (std::size_t i = 0; i < cfg_.orders.size(); ++i) {
    // 1 x (N_R C g) with channel j = token * C + c  ->  N_R x (C g)
    const Eigen::Index w = Eigen::Index(cfg_.latent_channels[i]) * type_dim(cfg_.orders[i]);
    std::vector<Eigen::Index> index(std::size_t(n * w));
    for (Eigen::Index col = 0; col < w; ++col) {
      for (Eigen::Index row = 0; row < n; ++row) index[std::size_t(col * n + row)] = row * w + col;
    }
    out.parts.push_back(ad::gather(g.parts[i], n, w, std::move(index)));
  }
  return out;
}

template <typename Scalar>
VarFeature<Scalar> Model::encode(const VarFeature<Scalar>& tokens, const VarFeature<Scalar>& latent,
                                 const ad::ParamSet<Scalar>& params) const {
  VarFeature<Scalar> x = blocks_.front()(latent, &tokens, params);
  for (std::size_t k = 1; k < blocks_.size(); ++k) x = blocks_[k](x, static_cast<const VarFeature<Scalar>*>(nullptr), params);
  return x;
}

template <typename Scalar>
ad::Var<Scalar> Model::extract_frame(const VarFeature<Scalar>& latent, const ad::ParamSet<Scalar>& params) const {
  if (!cfg_.geometric() || cfg_.decoder != DecoderKind::Canonical) {
    throw std::logic_error("extract_frame: model has no frame head");
  }
  const int c1 = cfg_.latent_channels.front();
  VarFeature<Scalar> vec;
  vec.layout = FeatureLayout({{1, c1}});
  vec.parts.push_back(latent.part(1));
  const VarFeature<Scalar> ab = frame_mlp_(mean_tokens(vec), params);
  // real-SPH component order is (y, z, x)
  const auto a = ad::gather(ab.parts.front(), 1, 3, {2, 0, 1});
  const auto b = ad::gather(ab.parts.front(), 1, 3, {5, 3, 4});
  return gram_schmidt(a, b);
}

template <typename Scalar>
ad::Var<Scalar> Model::invariantize(const VarFeature<Scalar>& latent, const ad::Var<Scalar>& frame) const {
  VarFeature<Scalar> out;
  out.layout = latent.layout;
  for (std::size_t i = 0; i < latent.parts.size(); ++i) {
    const int l = latent.layout.types()[i].order;
    if (l == 0) {
      out.parts.push_back(latent.parts[i]);
      continue;
    }
    const auto d = ad::transpose(wigner_d_var(frame, l));
    out.parts.push_back(ad::rotate_blocks(latent.parts[i], d, type_dim(l)));
  }
  return flatten(out);
}

template <typename Scalar>
ad::Var<Scalar> Model::query_encoding(ad::Tape<Scalar>& tape, const ad::Var<Scalar>& frame, const ModelInput& in,
                                      const std::vector<int>& pixels) const {
  const Camera& q = in.query;
  const Eigen::Index n = Eigen::Index(pixels.size());
  Matrix<double> dirs(n, 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int px = pixels[std::size_t(i)];
    if (px < 0 || px >= q.width * q.height) throw std::out_of_range("query pixel out of range");
    const int u = px % q.width, v = px / q.width;
    if (cfg_.use_cameras) {
      dirs.row(i) = q.pixel_direction(u, v).transpose();
    } else {
      dirs.row(i) << 2.0 * (u + 0.5) / q.width - 1.0, 2.0 * (v + 0.5) / q.height - 1.0, 0.0;
    }
  }
  ad::Var<Scalar> rays;
  if (cfg_.use_cameras) {
    const Vector3d off = normalized_offset(in.cameras, q.t);
    const auto d = ad::matmul(constant(tape, dirs), frame);
    const auto o = ad::repeat_rows(ad::matmul(constant(tape, Matrix<double>(off.transpose())), frame), n);
    rays = ad::concat_cols<Scalar>({d, o});
  } else {
    Matrix<double> r = Matrix<double>::Zero(n, 6);
    r.leftCols(3) = dirs;
    rays = constant(tape, r);
  }
  return ad::fourier_features(rays, cfg_.frequencies);
}

template <typename Scalar>
ad::Var<Scalar> Model::decode(const ad::Var<Scalar>& latent, const ad::Var<Scalar>& queries,
                              const ad::ParamSet<Scalar>& params) const {
  const Scalar slope = Scalar(kNonlinearSlope);
  const auto q0 = dec_in_(queries, params);
  const auto lat = dec_ln_lat_(latent, params);
  const auto q = dec_q_(dec_ln_q_(q0, params), params);
  const auto att = multihead_attention(scalar_feature(q), scalar_feature(dec_k_(lat, params)),
                                       scalar_feature(dec_v_(lat, params)), cfg_.decoder_heads);
  auto h = ad::add(q0, dec_o_(att.parts.front(), params));
  h = ad::add(h, dec_mlp2_(ad::leaky_relu(dec_mlp1_(dec_ln_mlp_(h, params), params), slope), params));
  return head2_(ad::leaky_relu(head1_(h, params), slope), params);
}

template <typename Scalar>
ad::Var<Scalar> Model::equivariant_decode(const VarFeature<Scalar>& latent, const ModelInput& in,
                                          const std::vector<int>& pixels, const ad::ParamSet<Scalar>& params) const {
  if (cfg_.decoder != DecoderKind::Equivariant) throw std::logic_error("equivariant_decode: wrong decoder kind");
  auto& tape = latent.tape();
  const Camera& q = in.query;
  const Eigen::Index n = Eigen::Index(pixels.size());
  Matrix<double> dirs(n, 3), offs(n, 3);
  const Vector3d off = normalized_offset(in.cameras, q.t);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int px = pixels[std::size_t(i)];
    if (px < 0 || px >= q.width * q.height) throw std::out_of_range("query pixel out of range");
    dirs.row(i) = q.pixel_direction(px % q.width, px / q.width).transpose();
    offs.row(i) = off.transpose();
  }
  VarFeature<Scalar> qf;
  qf.layout = edec_q_.in();
  for (int l : cfg_.orders) qf.parts.push_back(constant(tape, sph_channels(l, {dirs, offs})));
  const auto att = multihead_attention(edec_q_(qf, params), edec_k_(latent, params), edec_v_(latent, params),
                                       cfg_.decoder_heads);
  const auto inv = invariant_layer(att, edec_a_.bind(tape, params), edec_b_.bind(tape, params));
  const Scalar slope = Scalar(kNonlinearSlope);
  return head2_(ad::leaky_relu(head1_(inv, params), slope), params);
}

template <typename Scalar>
ForwardResult<Scalar> Model::forward(ad::Tape<Scalar>& tape, const ad::ParamSet<Scalar>& params,
                                     const ModelInput& in, const std::vector<int>& pixels_in) const {
  const std::vector<int> pixels = pixels_in.empty() ? all_pixels() : pixels_in;
  if (in.query.width != cfg_.width || in.query.height != cfg_.height) throw ShapeError("forward: query camera size");
  ForwardResult<Scalar> r;
  r.tokens = input_tokens(tape, params, in);
  r.latent_in = initial_latent(tape, params, in.cameras);
  r.latent = encode(r.tokens, r.latent_in, params);

  const ad::Var<Scalar> identity = tape.constant(Matrix<Scalar>::Identity(3, 3));
  if (cfg_.arch == Architecture::Conventional) {
    r.log_depth = decode(flatten(r.latent), query_encoding(tape, identity, in, pixels), params);
  } else if (cfg_.decoder == DecoderKind::Equivariant) {
    r.log_depth = equivariant_decode(r.latent, in, pixels, params);
  } else {
    ad::Var<Scalar> frame = identity;
    if (cfg_.use_cameras) {
      try {
        frame = extract_frame(r.latent, params);
      } catch (const DegenerateFrame&) {
        r.degenerate_frame = true;
      }
    }
    r.frame = frame;
    r.log_depth = decode(invariantize(r.latent, frame), query_encoding(tape, frame, in, pixels), params);
  }
  if (cfg_.use_cameras) r.log_depth = ad::add_scalar(r.log_depth, Scalar(std::log(in.cameras.scale)));
  return r;
}

template <typename Scalar>
Eigen::VectorXd Model::predict(const ad::ParamSet<Scalar>& params, const ModelInput& in,
                               const std::vector<int>& pixels, bool* degenerate) const {
  ad::Tape<Scalar> tape(false);
  const ForwardResult<Scalar> r = forward(tape, params, in, pixels);
  if (degenerate) *degenerate = r.degenerate_frame;
  return r.log_depth.value().col(0).template cast<double>().array().exp().matrix();
}

EquiTensor<double> encode_latent(const Model& model, const ad::ParamSet<float>& params, const ModelInput& in) {
  ad::ParamSet<double> wide;
  for (const auto& [name, p] : params) wide[name] = p.cast<double>();
  ad::Tape<double> tape(false);
  return from_graph(model.encode(model.input_tokens(tape, wide, in), model.initial_latent(tape, wide, in.cameras), wide));
}

EquiTensor<double> token_of(const EquiTensor<double>& f, Eigen::Index token) {
  if (token < 0 || token >= f.tokens()) throw std::out_of_range("token index out of range");
  std::vector<Matrix<double>> parts;
  for (const auto& p : f.parts()) parts.push_back(p.row(token));
  return EquiTensor<double>(f.layout(), std::move(parts));
}

Model baseline_model(ModelConfig cfg) {
  ModelConfig eq = cfg;
  eq.arch = Architecture::Equivariant;
  eq.decoder = DecoderKind::Canonical;
  eq.use_cameras = true;
  eq.baseline_width = 0;
  const double target = double(Model(eq).parameter_count());

  cfg.arch = Architecture::Conventional;
  cfg.decoder = DecoderKind::Canonical;
  if (cfg.baseline_width == 0) {
    // parameter count grows monotonically with the width; take the closest step
    const int step = std::lcm(cfg.heads, cfg.cross_heads);
    int best = step;
    double best_err = 1e300;
    for (int w = step; w <= 4096; w += step) {
      cfg.baseline_width = w;
      const double err = std::abs(double(Model(cfg).parameter_count()) - target);
      if (err < best_err) {
        best_err = err;
        best = w;
      } else {
        break;
      }
    }
    cfg.baseline_width = best;
  }
  Model m(cfg);
  const double count = double(m.parameter_count());
  if (std::abs(count - target) > 0.2 * target) {
    throw std::invalid_argument("baseline_model: parameter count " + std::to_string(std::size_t(count)) +
                                " not within 20% of " + std::to_string(std::size_t(target)));
  }
  return m;
}

#define EPIO_INSTANTIATE_MODEL(S)                                                                             \
  template ad::Var<S> gram_schmidt<S>(const ad::Var<S>&, const ad::Var<S>&);                                  \
  template ad::ParamSet<S> Model::init<S>(std::uint64_t) const;                                               \
  template ad::Var<S> Model::patch_embed<S>(ad::Tape<S>&, const ad::ParamSet<S>&, const Matrix<double>&)      \
      const;                                                                                                  \
  template VarFeature<S> Model::input_tokens<S>(ad::Tape<S>&, const ad::ParamSet<S>&, const ModelInput&)      \
      const;                                                                                                  \
  template VarFeature<S> Model::initial_latent<S>(ad::Tape<S>&, const ad::ParamSet<S>&, const CameraSet&)     \
      const;                                                                                                  \
  template VarFeature<S> Model::encode<S>(const VarFeature<S>&, const VarFeature<S>&, const ad::ParamSet<S>&) \
      const;                                                                                                  \
  template ad::Var<S> Model::extract_frame<S>(const VarFeature<S>&, const ad::ParamSet<S>&) const;            \
  template ad::Var<S> Model::invariantize<S>(const VarFeature<S>&, const ad::Var<S>&) const;                  \
  template ad::Var<S> Model::query_encoding<S>(ad::Tape<S>&, const ad::Var<S>&, const ModelInput&,            \
                                               const std::vector<int>&) const;                                \
  template ad::Var<S> Model::decode<S>(const ad::Var<S>&, const ad::Var<S>&, const ad::ParamSet<S>&) const;   \
  template ad::Var<S> Model::equivariant_decode<S>(const VarFeature<S>&, const ModelInput&,                   \
                                                   const std::vector<int>&, const ad::ParamSet<S>&) const;    \
  template ForwardResult<S> Model::forward<S>(ad::Tape<S>&, const ad::ParamSet<S>&, const ModelInput&,        \
                                              const std::vector<int>&) const;                                 \
  template Eigen::VectorXd Model::predict<S>(const ad::ParamSet<S>&, const ModelInput&,                       \
                                             const std::vector<int>&, bool*) const;

EPIO_INSTANTIATE_MODEL(float)
EPIO_INSTANTIATE_MODEL(double)

}  // namespace epio
