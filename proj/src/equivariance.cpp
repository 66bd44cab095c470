#include "epio/equivariance.hpp"

#include "epio/attention.hpp"
#include "epio/model.hpp"
#include "epio/scene.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <stdexcept>

namespace epio {

namespace {

template <typename S>
EquiTensor<S> cast_tensor(const EquiTensor<double>& f) {
  std::vector<Matrix<S>> parts;
  for (const auto& p : f.parts()) parts.push_back(p.template cast<S>());
  return EquiTensor<S>(f.layout(), parts);
}

template <typename S>
EquiLinearParams<S> cast_params(const EquiLinearParams<double>& p) {
  EquiLinearParams<S> q;
  q.in = p.in;
  q.out = p.out;
  for (const auto& [l, w] : p.weights) q.weights[l] = w.template cast<S>();
  q.bias0 = p.bias0.template cast<S>();
  return q;
}

template <typename S>
LayerNormParams<S> cast_norm(const LayerNormParams<double>& p) {
  LayerNormParams<S> q;
  q.gamma = p.gamma.template cast<S>();
  q.beta = p.beta.template cast<S>();
  return q;
}

class Suite {
 public:
  explicit Suite(const SuiteOptions& o) : opts_(o), rng_(o.seed) {
    if (o.lmax < 1) throw std::invalid_argument("equivariance suite: lmax must be >= 1");
    if (o.trials < 1) throw std::invalid_argument("equivariance suite: trials must be >= 1");
  }

  std::vector<CheckResult> run() {
    const bool f32 = opts_.float32;
    const int n = opts_.trials;
    const int model_trials = std::max(1, n / 5);
    timed("sph_defining_relation", 1e-9, [&] { return sph_relation(10 * n); });
    timed("wigner_orthogonality", 1e-10, [&] { return wigner_orthogonality(2 * n); });
    timed("wigner_homomorphism", 1e-9, [&] { return wigner_homomorphism(2 * n); });
    if (f32) {
      float_checks(n, model_trials);
    } else {
      layer_checks<double>(n, 1e-6, 1e-8, 1e-8);
      model_checks<double>(model_trials, 1e-6, 1e-5, 1e-5);
    }
    timed("fourier_shift", 1e-12, [&] { return fourier_shift(10 * n); });
    return results_;
  }

 private:
  void float_checks(int n, int model_trials) {
    layer_checks<float>(n, 1e-3, 1e-4, 1e-4);
    model_checks<float>(model_trials, 1e-3, 1e-3, 1e-3);
  }

  void timed(const std::string& name, double tol, const std::function<double()>& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    CheckResult r;
    r.name = name;
    r.tolerance = tol;
    r.error = fn();
    if (std::isnan(r.error)) r.error = std::numeric_limits<double>::infinity();
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    results_.push_back(r);
  }

  Eigen::MatrixXd wigner(int l, const Rotation& r) const {
    Eigen::MatrixXd d = wigner_d(l, r);
    if (l == opts_.corrupt_order) d(0, 0) += opts_.corrupt_size;
    return d;
  }

  template <typename S>
  EquiTensor<S> rotate(const EquiTensor<S>& f, const Rotation& r) const {
    std::vector<Matrix<S>> blocks;
    for (std::size_t i = 0; i < f.parts().size(); ++i) {
      const int l = f.layout().types()[i].order;
      if (l == 0) {
        blocks.push_back(f.part(i));
        continue;
      }
      const int g = type_dim(l);
      const Matrix<S> dt = wigner(l, r).transpose().template cast<S>();
      Matrix<S> out(f.part(i).rows(), f.part(i).cols());
      for (Eigen::Index c = 0; c < f.part(i).cols() / g; ++c) out.middleCols(c * g, g) = f.part(i).middleCols(c * g, g) * dt;
      blocks.push_back(std::move(out));
    }
    return EquiTensor<S>(f.layout(), std::move(blocks));
  }

  Vector3d unit_vector() {
    std::normal_distribution<double> n(0.0, 1.0);
    Vector3d v;
    do {
      v = Vector3d(n(rng_), n(rng_), n(rng_));
    } while (v.norm() < 1e-6);
    return v.normalized();
  }

  FeatureLayout random_layout(bool scalars) {
    std::uniform_int_distribution<int> ch(1, 3), coin(0, 1);
    std::vector<TypeSpec> types;
    if (scalars) types.push_back({0, ch(rng_)});
    for (int l = 1; l <= opts_.lmax; ++l) {
      if (coin(rng_) || l == opts_.lmax || l == 1) types.push_back({l, ch(rng_)});
    }
    return FeatureLayout(types);
  }

  FeatureLayout resize(const FeatureLayout& in) {
    std::uniform_int_distribution<int> ch(1, 3);
    std::vector<TypeSpec> types;
    for (const auto& t : in.types()) types.push_back({t.order, ch(rng_)});
    return FeatureLayout(types);
  }

  double sph_relation(int samples) {
    double worst = 0.0;
    for (int s = 0; s < samples; ++s) {
      const Rotation r = random_rotation(rng_);
      const Vector3d x = unit_vector();
      for (int l = 0; l <= opts_.lmax; ++l) {
        const Eigen::VectorXd lhs = eval_sph(l, r.matrix() * x);
        const Eigen::VectorXd rhs = wigner(l, r) * eval_sph(l, x);
        worst = std::max(worst, (lhs - rhs).cwiseAbs().maxCoeff());
      }
    }
    return worst;
  }

  double wigner_orthogonality(int samples) {
    double worst = 0.0;
    for (int s = 0; s < samples; ++s) {
      const Rotation r = random_rotation(rng_);
      for (int l = 0; l <= opts_.lmax; ++l) {
        const Eigen::MatrixXd d = wigner(l, r);
        const Eigen::MatrixXd e = d * d.transpose() - Eigen::MatrixXd::Identity(d.rows(), d.cols());
        worst = std::max(worst, e.cwiseAbs().rowwise().sum().maxCoeff());
      }
    }
    return worst;
  }

  double wigner_homomorphism(int samples) {
    double worst = 0.0;
    for (int s = 0; s < samples; ++s) {
      const Rotation a = random_rotation(rng_), b = random_rotation(rng_);
      for (int l = 0; l <= opts_.lmax; ++l) {
        worst = std::max(worst, (wigner(l, a * b) - wigner(l, a) * wigner(l, b)).cwiseAbs().maxCoeff());
      }
    }
    return worst;
  }

  template <typename S>
  void layer_checks(int n, double tol, double inv_tol, double weight_tol) {
    timed("equi_linear", tol, [&] {
      double worst = 0.0;
      for (int t = 0; t < n; ++t) {
        const FeatureLayout in = random_layout(true), out = resize(in);
        const auto f = cast_tensor<S>(EquiTensor<double>::random(in, 3, rng_));
        const auto p = cast_params<S>(EquiLinearParams<double>::random(in, out, rng_, true));
        const Rotation r = random_rotation(rng_);
        worst = std::max(worst, rel_diff(equi_linear(rotate(f, r), p), rotate(equi_linear(f, p), r)));
      }
      return worst;
    });
    timed("equi_layer_norm", tol, [&] {
      double worst = 0.0;
      for (int t = 0; t < n; ++t) {
        const FeatureLayout in = random_layout(true);
        const auto f = cast_tensor<S>(EquiTensor<double>::random(in, 3, rng_));
        const auto p = cast_norm<S>(LayerNormParams<double>::random(in, rng_));
        const Rotation r = random_rotation(rng_);
        worst = std::max(worst, rel_diff(equi_layer_norm(rotate(f, r), p), rotate(equi_layer_norm(f, p), r)));
      }
      return worst;
    });
    timed("equi_nonlinear", tol, [&] {
      double worst = 0.0;
      for (int t = 0; t < n; ++t) {
        const FeatureLayout in = random_layout(true), vec = in.without_scalars();
        const auto f = cast_tensor<S>(EquiTensor<double>::random(in, 3, rng_));
        const auto g = cast_params<S>(EquiLinearParams<double>::random(vec, vec, rng_));
        const Rotation r = random_rotation(rng_);
        worst = std::max(worst, rel_diff(equi_nonlinear(rotate(f, r), g), rotate(equi_nonlinear(f, g), r)));
      }
      return worst;
    });
    timed("invariant_layer", inv_tol, [&] {
      double worst = 0.0;
      for (int t = 0; t < n; ++t) {
        const FeatureLayout in = random_layout(true), out = resize(in);
        const auto f = cast_tensor<S>(EquiTensor<double>::random(in, 2, rng_));
        const auto pa = cast_params<S>(EquiLinearParams<double>::random(in, out, rng_));
        const auto pb = cast_params<S>(EquiLinearParams<double>::random(in, out, rng_));
        const Rotation r = random_rotation(rng_);
        const Matrix<S> a = invariant_layer(f, pa, pb), b = invariant_layer(rotate(f, r), pa, pb);
        worst = std::max(worst, double((a - b).cwiseAbs().maxCoeff()));
      }
      return worst;
    });

    // transformer blocks: cross-attention into a latent, then self-attention
    std::vector<TypeSpec> lat{{0, 4}}, ctx{{0, 3}};
    for (int l = 1; l <= std::min(opts_.lmax, 4); ++l) {
      lat.push_back({l, 2});
      ctx.push_back({l, 2});
    }
    if (opts_.lmax > 4) {
      lat.push_back({opts_.lmax, 2});
      ctx.push_back({opts_.lmax, 1});
    }
    const FeatureLayout latent(lat), context(ctx);
    const EquiTransformerBlock cross("c", latent, context, 2), self("s", latent, std::nullopt, 2);
    double worst_w = 0.0;
    timed("attention_block", tol, [&] {
      double worst = 0.0;
      for (int t = 0; t < n; ++t) {
        ad::ParamSet<S> params;
        cross.init(params, rng_);
        self.init(params, rng_);
        const auto x = cast_tensor<S>(EquiTensor<double>::random(latent, 3, rng_));
        const auto c = cast_tensor<S>(EquiTensor<double>::random(context, 4, rng_));
        const Rotation r = random_rotation(rng_);
        auto run = [&](const EquiTensor<S>& xx, const EquiTensor<S>& cc, std::vector<ad::Var<S>>* w) {
          ad::Tape<S> tape(false);
          const auto cg = to_graph(tape, cc);
          const auto h = cross(to_graph(tape, xx), &cg, params, w);
          const auto y = from_graph(self(h, static_cast<const VarFeature<S>*>(nullptr), params, w));
          std::vector<Matrix<S>> values;
          if (w) {
            for (const auto& v : *w) values.push_back(v.value());
          }
          return std::make_pair(y, values);
        };
        std::vector<ad::Var<S>> w0, w1;
        const auto [y0, a0] = run(x, c, &w0);
        const auto [y1, a1] = run(rotate(x, r), rotate(c, r), &w1);
        worst = std::max(worst, rel_diff(y1, rotate(y0, r)));
        for (std::size_t h = 0; h < a0.size(); ++h) {
          worst_w = std::max(worst_w, double((a0[h] - a1[h]).cwiseAbs().maxCoeff()));
        }
      }
      return worst;
    });
    timed("attention_weights", weight_tol, [&] { return worst_w; });
  }

  ModelInput scene_input(std::uint64_t seed) const {
    SceneSpec spec;
    spec.width = spec.height = 8;
    spec.min_valid_fraction = 0.0;
    const Scene scene = gen_scene(seed, spec);
    const StereoRig rig = gen_stereo_pair(scene, seed, spec);
    ModelInput in;
    in.cameras = rig.inputs;
    in.query = rig.query;
    for (const auto& c : rig.inputs.cameras) in.images.push_back(render(scene, c).rgb);
    return in;
  }

  ModelConfig model_config() const {
    ModelConfig c;
    c.orders = {1};
    if (opts_.lmax >= 2) c.orders.push_back(2);
    if (opts_.lmax >= 4) c.orders.push_back(opts_.lmax);
    c.latent_channels.assign(c.orders.size(), 2);
    c.latent_channels.front() = 4;
    c.patch_channels = 8;
    c.latents = 6;
    c.latent_scalars = 8;
    c.heads = 2;
    c.depth = 2;
    c.frequencies = 4;
    c.decoder_width = 16;
    c.width = c.height = 8;
    return c;
  }

  template <typename S>
  void model_checks(int n, double enc_tol, double e2e_tol, double frame_tol) {
    const Model model(model_config());
    const auto params = model.init<S>(opts_.seed + 1);
    std::normal_distribution<double> normal(0.0, 3.0);
    auto translation = [&] { return Vector3d(normal(rng_), normal(rng_), normal(rng_)); };
    auto encode = [&](const ModelInput& x) {
      ad::Tape<S> tape(false);
      return from_graph(model.encode(model.input_tokens(tape, params, x), model.initial_latent(tape, params, x.cameras),
                                     params));
    };
    auto frame = [&](const ModelInput& x) {
      ad::Tape<S> tape(false);
      const auto lat = model.encode(model.input_tokens(tape, params, x), model.initial_latent(tape, params, x.cameras),
                                    params);
      return Matrix<double>(model.extract_frame(lat, params).value().template cast<double>());
    };

    timed("encoder", enc_tol, [&] {
      double worst = 0.0;
      for (int t = 0; t < n; ++t) {
        const ModelInput in = scene_input(opts_.seed + 100 + std::uint64_t(t));
        const Rotation r = random_rotation(rng_);
        worst = std::max(worst, rel_diff(encode(apply_se3(in, r, translation())), rotate(encode(in), r)));
      }
      return worst;
    });
    timed("end_to_end", e2e_tol, [&] {
      const ModelInput in = scene_input(opts_.seed + 7);
      const Eigen::VectorXd base = model.predict(params, in);
      double worst = 0.0;
      for (int t = 0; t < n; ++t) {
        const Eigen::VectorXd moved = model.predict(params, apply_se3(in, random_rotation(rng_), translation()));
        worst = std::max(worst, (moved - base).cwiseAbs().maxCoeff() / base.cwiseAbs().maxCoeff());
      }
      return worst;
    });
    timed("frame", frame_tol, [&] {
      double worst = 0.0;
      for (int t = 0; t < n; ++t) {
        const ModelInput in = scene_input(opts_.seed + 200 + std::uint64_t(t));
        const Rotation r = random_rotation(rng_);
        worst = std::max(worst, (frame(apply_se3(in, r, translation())) - r.matrix() * frame(in)).norm());
      }
      return worst;
    });
  }

  double fourier_shift(int samples) {
    constexpr int kFreq = 8;
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    double worst = 0.0;
    for (int s = 0; s < samples; ++s) {
      const double x = u(rng_), t = u(rng_);
      const Eigen::VectorXd a = fourier_pe(x, kFreq), b = fourier_pe(x + t, kFreq);
      worst = std::max(worst, std::abs(b(0) - (a(0) + t)));
      for (int k = 0; k < kFreq; ++k) {
        const double w = kPi * std::ldexp(1.0, k);
        const double sn = a(1 + k), cs = a(1 + kFreq + k);
        worst = std::max(worst, std::abs(b(1 + k) - (std::cos(w * t) * sn + std::sin(w * t) * cs)));
        worst = std::max(worst, std::abs(b(1 + kFreq + k) - (-std::sin(w * t) * sn + std::cos(w * t) * cs)));
      }
    }
    return worst;
  }

  SuiteOptions opts_;
  std::mt19937_64 rng_;
  std::vector<CheckResult> results_;
};

}  // namespace

std::vector<CheckResult> run_equivariance_suite(const SuiteOptions& opts) { return Suite(opts).run(); }

}  // namespace epio
