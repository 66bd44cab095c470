#include "epio/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <random>
#include <thread>

namespace epio {

namespace {

std::mt19937_64 derived_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(a), std::uint32_t(a >> 32),
                    std::uint32_t(b), std::uint32_t(b >> 32)};
  return std::mt19937_64(seq);
}

/// Calls fn(i) for i < n on up to thread_count() threads, statically partitioned.
template <typename F>
void parallel_for(std::size_t n, F&& fn) {
  const std::size_t workers = std::min<std::size_t>(n, std::size_t(thread_count()));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t t = 0; t < workers; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += workers) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::vector<int> draw_queries(const std::vector<std::uint8_t>& valid, int count, std::mt19937_64& rng) {
  std::vector<int> pool;
  for (std::size_t i = 0; i < valid.size(); ++i) {
    if (valid[i]) pool.push_back(int(i));
  }
  if (int(pool.size()) <= count) return pool;
  // partial Fisher-Yates
  for (int i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(std::size_t(i), pool.size() - 1);
    std::swap(pool[std::size_t(i)], pool[pick(rng)]);
  }
  pool.resize(std::size_t(count));
  std::sort(pool.begin(), pool.end());
  return pool;
}

}  // namespace

Metrics compute_metrics(const Eigen::VectorXd& pred, const Eigen::VectorXd& gt, const std::vector<std::uint8_t>& valid) {
  MetricsAccumulator acc;
  acc.add(pred, gt, valid);
  return acc.result();
}

void MetricsAccumulator::add(const Eigen::VectorXd& pred, const Eigen::VectorXd& gt,
                             const std::vector<std::uint8_t>& valid) {
  if (pred.size() != gt.size() || std::size_t(gt.size()) != valid.size()) throw ShapeError("metrics: size mismatch");
  for (Eigen::Index i = 0; i < gt.size(); ++i) {
    if (!valid[std::size_t(i)]) continue;
    const double p = pred(i), g = gt(i);
    if (!(p > 0) || !(g > 0)) throw std::invalid_argument("metrics: depths must be positive on valid pixels");
    abs_rel_ += std::abs(p - g) / g;
    sq_ += (p - g) * (p - g);
    within_ += std::max(p / g, g / p) < 1.25 ? 1.0 : 0.0;
    ++count_;
  }
}

Metrics MetricsAccumulator::result() const {
  Metrics m;
  m.count = count_;
  if (count_ == 0) return m;
  const double n = double(count_);
  m.abs_rel = abs_rel_ / n;
  m.rmse = std::sqrt(sq_ / n);
  m.delta_125 = within_ / n;
  return m;
}

template <typename Scalar>
ad::Var<Scalar> l1_log_loss(const ad::Var<Scalar>& log_pred, const Eigen::VectorXd& gt, double weight) {
  return l1_log_loss(log_pred, gt, std::vector<std::uint8_t>(std::size_t(gt.size()), 1), weight);
}

template <typename Scalar>
ad::Var<Scalar> l1_log_loss(const ad::Var<Scalar>& log_pred, const Eigen::VectorXd& gt,
                            const std::vector<std::uint8_t>& valid, double weight) {
  if (log_pred.cols() != 1 || log_pred.rows() != gt.size() || valid.size() != std::size_t(gt.size())) {
    throw ShapeError("l1_log_loss: shape mismatch");
  }
  Matrix<Scalar> target = Matrix<Scalar>::Zero(gt.size(), 1), mask = Matrix<Scalar>::Zero(gt.size(), 1);
  double count = 0;
  for (Eigen::Index i = 0; i < gt.size(); ++i) {
    if (!valid[std::size_t(i)]) continue;
    if (!(gt(i) > 0)) throw std::invalid_argument("l1_log_loss: targets must be positive");
    target(i, 0) = Scalar(std::log(gt(i)));
    mask(i, 0) = Scalar(1);
    count += 1;
  }
  if (count == 0) throw std::invalid_argument("l1_log_loss: no valid targets");
  ad::Tape<Scalar>& tape = *log_pred.tape();
  auto err = ad::abs(ad::sub(log_pred, tape.constant(target)));
  if (count < double(gt.size())) err = ad::mul(err, tape.constant(mask));
  return ad::scale(ad::sum(err), Scalar(weight / count));
}

bool decay_exempt(const std::string& name) {
  auto ends_with = [&](const std::string& s) {
    return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
  };
  return ends_with(".b") || ends_with(".gamma") || ends_with(".beta") || name == "latent.r0";
}

template <typename Scalar>
void adamw_step(ad::ParamSet<Scalar>& params, const ad::ParamSet<Scalar>& grads, AdamState<Scalar>& state,
                const AdamWConfig& cfg) {
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, double(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, double(state.step));
  for (auto& [name, p] : params) {
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.size() == 0) {
      m = Matrix<Scalar>::Zero(p.rows(), p.cols());
      v = Matrix<Scalar>::Zero(p.rows(), p.cols());
    }
    auto it = grads.find(name);
    const bool has_grad = it != grads.end() && it->second.size() != 0;
    if (has_grad && (it->second.rows() != p.rows() || it->second.cols() != p.cols())) {
      throw ShapeError("adamw_step: gradient shape differs for " + name);
    }
    if (has_grad) {
      m = Scalar(cfg.beta1) * m + Scalar(1.0 - cfg.beta1) * it->second;
      v = Scalar(cfg.beta2) * v + Scalar(1.0 - cfg.beta2) * it->second.cwiseAbs2();
    } else {
      m *= Scalar(cfg.beta1);
      v *= Scalar(cfg.beta2);
    }
    if (cfg.weight_decay != 0.0 && !decay_exempt(name)) p *= Scalar(1.0 - cfg.lr * cfg.weight_decay);
    const auto mhat = m.array() / Scalar(c1);
    const auto vhat = v.array() / Scalar(c2);
    p.array() -= Scalar(cfg.lr) * mhat / (vhat.sqrt() + Scalar(cfg.eps));
  }
}

int thread_count() {
  if (const char* env = std::getenv("EPIO_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

Sample synthesize_sample(std::uint64_t seed, const SceneSpec& spec) {
  const Scene scene = gen_scene(seed, spec);
  const StereoRig rig = gen_stereo_pair(scene, seed, spec);
  Sample s;
  s.id = std::to_string(seed);
  s.input.cameras = rig.inputs;
  s.input.query = rig.query;
  for (const auto& c : rig.inputs.cameras) s.input.images.push_back(render(scene, c).rgb);
  const RenderedView q = render(scene, rig.query);
  s.depth = q.depth;
  s.valid = q.valid;
  return s;
}

TrainState initial_state(const Model& model, std::uint64_t seed) {
  TrainState s;
  s.params = model.init<float>(seed);
  return s;
}

void train(const Model& model, const std::vector<Sample>& data, const TrainConfig& cfg, TrainState& state,
           const TrainHooks& hooks) {
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  if (cfg.batch <= 0 || cfg.queries <= 0) throw std::invalid_argument("train: batch and queries must be positive");
  const std::size_t n = data.size();
  for (int epoch = state.epoch; epoch < cfg.epochs; ++epoch) {
    int halvings = 0;
    for (int e : cfg.lr_halve_at) halvings += epoch >= e ? 1 : 0;
    AdamWConfig opt;
    opt.lr = cfg.lr * std::ldexp(1.0, -halvings);
    opt.weight_decay = cfg.weight_decay;

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t(0));
    auto shuffle_rng = derived_rng(cfg.seed, std::uint64_t(epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0.0;
    long batches = 0;
    for (std::size_t start = 0; start < n; start += std::size_t(cfg.batch)) {
      const std::size_t count = std::min(n - start, std::size_t(cfg.batch));
      std::vector<ad::ParamSet<float>> grads(count);
      std::vector<double> losses(count, 0.0);
      std::vector<char> degenerate(count, 0), used(count, 0);
      parallel_for(count, [&](std::size_t j) {
        const Sample& s = data[order[start + j]];
        auto rng = derived_rng(cfg.seed, std::uint64_t(epoch), std::uint64_t(start + j) + 1);
        const std::vector<int> px = draw_queries(s.valid, cfg.queries, rng);
        if (px.empty()) return;
        Eigen::VectorXd gt(Eigen::Index(px.size()));
        for (std::size_t k = 0; k < px.size(); ++k) gt(Eigen::Index(k)) = s.depth(px[k]);
        ad::Tape<float> tape;
        const auto r = model.forward(tape, state.params, s.input, px);
        const auto loss = l1_log_loss(r.log_depth, gt);
        tape.backward(loss);
        tape.add_param_grads(grads[j]);
        losses[j] = double(loss.value()(0, 0));
        degenerate[j] = r.degenerate_frame;
        used[j] = 1;
      });
      // fixed-order reduction
      ad::ParamSet<float> total;
      double batch_loss = 0.0;
      int used_count = 0;
      for (std::size_t j = 0; j < count; ++j) {
        if (!used[j]) continue;
        ++used_count;
        batch_loss += losses[j];
        state.degenerate_frames += degenerate[j];
        for (auto& [name, g] : grads[j]) {
          auto& t = total[name];
          if (t.size() == 0) {
            t = g;
          } else {
            t += g;
          }
        }
      }
      if (used_count == 0) continue;
      batch_loss /= used_count;
      if (!std::isfinite(batch_loss)) {
        throw TrainingError("non-finite loss at step " + std::to_string(state.step));
      }
      for (auto& [name, g] : total) {
        g /= float(used_count);
        if (!g.allFinite()) {
          throw TrainingError("non-finite gradient for " + name + " at step " + std::to_string(state.step));
        }
      }
      adamw_step(state.params, total, state.opt, opt);
      ++state.step;
      loss_sum += batch_loss;
      ++batches;
      if (hooks.on_step) hooks.on_step(state.step, batch_loss);
      if (cfg.max_steps > 0 && state.step >= cfg.max_steps) return;
    }
    state.epoch = epoch + 1;
    if (hooks.on_epoch) {
      EpochLog log;
      log.epoch = state.epoch;
      log.step = state.step;
      log.loss = batches ? loss_sum / double(batches) : 0.0;
      log.lr = opt.lr;
      log.degenerate_frames = state.degenerate_frames;
      hooks.on_epoch(log, state);
    }
  }
}

EvalResult evaluate(const Model& model, const ad::ParamSet<float>& params, const std::vector<Sample>& data,
                    const EvalOptions& opts) {
  EvalResult result;
  result.predictions.resize(data.size());
  result.inputs.resize(data.size());
  std::vector<char> degenerate(data.size(), 0);
  for (std::size_t i = 0; i < data.size(); ++i) {
    result.inputs[i] = data[i].input;
    if (opts.rotate_frame) {
      auto rng = derived_rng(opts.seed, 0x7e57u, std::uint64_t(i));
      std::normal_distribution<double> normal(0.0, 5.0);
      const Rotation r = random_rotation(rng);
      const Vector3d t(normal(rng), normal(rng), normal(rng));
      result.inputs[i] = apply_se3(data[i].input, r, t);
    }
  }
  parallel_for(data.size(), [&](std::size_t i) {
    bool deg = false;
    result.predictions[i] = model.predict(params, result.inputs[i], {}, &deg);
    degenerate[i] = deg;
  });
  MetricsAccumulator acc;
  for (std::size_t i = 0; i < data.size(); ++i) {
    acc.add(result.predictions[i], data[i].depth, data[i].valid);
    result.degenerate_frames += degenerate[i];
  }
  result.metrics = acc.result();
  return result;
}

template ad::Var<float> l1_log_loss<float>(const ad::Var<float>&, const Eigen::VectorXd&, double);
template ad::Var<double> l1_log_loss<double>(const ad::Var<double>&, const Eigen::VectorXd&, double);
template ad::Var<float> l1_log_loss<float>(const ad::Var<float>&, const Eigen::VectorXd&,
                                           const std::vector<std::uint8_t>&, double);
template ad::Var<double> l1_log_loss<double>(const ad::Var<double>&, const Eigen::VectorXd&,
                                             const std::vector<std::uint8_t>&, double);
template void adamw_step<float>(ad::ParamSet<float>&, const ad::ParamSet<float>&, AdamState<float>&,
                                const AdamWConfig&);
template void adamw_step<double>(ad::ParamSet<double>&, const ad::ParamSet<double>&, AdamState<double>&,
                                 const AdamWConfig&);

}  // namespace epio
