#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "epio/io.hpp"
#include "epio/training.hpp"

#include <unistd.h>

#include <cmath>
#include <cstdlib>
#include <random>

using namespace epio;

namespace {

ModelConfig tiny_model() {
  ModelConfig c;
  c.latent_channels = {2, 2};
  c.patch_channels = 8;
  c.latents = 4;
  c.latent_scalars = 8;
  c.heads = 2;
  c.depth = 1;
  c.frequencies = 3;
  c.decoder_width = 16;
  c.width = c.height = 8;
  return c;
}

std::vector<Sample> tiny_data(int n) {
  SceneSpec spec;
  spec.width = spec.height = 8;
  std::vector<Sample> data;
  for (int i = 0; i < n; ++i) data.push_back(synthesize_sample(100 + std::uint64_t(i), spec));
  return data;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.epochs = 2;
  t.batch = 2;
  t.queries = 16;
  t.lr_halve_at = {1};
  t.seed = 9;
  return t;
}

bool same_params(const ad::ParamSet<float>& a, const ad::ParamSet<float>& b) {
  if (a.size() != b.size()) return false;
  for (const auto& [name, p] : a) {
    auto it = b.find(name);
    if (it == b.end() || it->second.rows() != p.rows() || it->second.cols() != p.cols()) return false;
    if (std::memcmp(p.data(), it->second.data(), sizeof(float) * std::size_t(p.size())) != 0) return false;
  }
  return true;
}

double loss_value(const Eigen::VectorXd& pred, const Eigen::VectorXd& gt, double weight = 1.0) {
  ad::Tape<double> tape;
  auto lp = tape.constant(pred.array().log().matrix());
  return l1_log_loss(lp, gt, weight).value()(0, 0);
}

struct ThreadEnv {
  explicit ThreadEnv(const char* v) { ::setenv("EPIO_THREADS", v, 1); }
  ~ThreadEnv() { ::unsetenv("EPIO_THREADS"); }
};

}  // namespace

TEST_CASE("metrics examples") {
  const Eigen::VectorXd gt = Eigen::VectorXd::LinSpaced(5, 1.0, 3.0);
  const std::vector<std::uint8_t> all(5, 1);
  Metrics m = compute_metrics(gt, gt, all);
  CHECK(m.abs_rel == 0.0);
  CHECK(m.rmse == 0.0);
  CHECK(m.delta_125 == 1.0);
  CHECK(m.count == 5);

  m = compute_metrics(2.0 * gt, gt, all);
  CHECK(m.abs_rel == doctest::Approx(1.0));
  CHECK(m.delta_125 == 0.0);
  CHECK(m.rmse == doctest::Approx(std::sqrt(gt.squaredNorm() / 5)));

  m = compute_metrics(1.2 * gt, gt, all);
  CHECK(m.delta_125 == 1.0);
  CHECK(m.abs_rel == doctest::Approx(0.2));
}

TEST_CASE("metrics respect the valid mask and flag empty sets") {
  Eigen::VectorXd gt(3), pred(3);
  gt << 1, 2, 0;
  pred << 1, 4, -1;
  const Metrics m = compute_metrics(pred, gt, {1, 0, 0});
  CHECK(m.count == 1);
  CHECK(m.abs_rel == 0.0);
  CHECK(compute_metrics(pred, gt, {0, 0, 0}).empty());
  CHECK(std::isnan(compute_metrics(pred, gt, {0, 0, 0}).abs_rel));
  CHECK_THROWS(compute_metrics(pred, gt, {0, 0, 1}));
  CHECK_THROWS(compute_metrics(pred, gt, {1, 1}));
}

TEST_CASE("pooled metrics weigh every pixel equally") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.5, 2.0);
  Eigen::VectorXd p(7), g(7);
  for (int i = 0; i < 7; ++i) {
    p(i) = u(rng);
    g(i) = u(rng);
  }
  MetricsAccumulator acc;
  acc.add(p.head(3), g.head(3), {1, 1, 1});
  acc.add(p.tail(4), g.tail(4), {1, 1, 1, 1});
  const Metrics pooled = acc.result(), whole = compute_metrics(p, g, std::vector<std::uint8_t>(7, 1));
  CHECK(pooled.abs_rel == doctest::Approx(whole.abs_rel).epsilon(1e-14));
  CHECK(pooled.rmse == doctest::Approx(whole.rmse).epsilon(1e-14));
  CHECK(pooled.delta_125 == whole.delta_125);
}

TEST_CASE("l1 log loss examples") {
  Eigen::VectorXd gt(4);
  gt << 0.5, 1, 2, 7;
  CHECK(loss_value(gt, gt) < 1e-15);
  CHECK(loss_value(std::exp(1.0) * gt, gt) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(loss_value(std::exp(1.0) * gt, gt, 0.2) == doctest::Approx(0.2).epsilon(1e-14));
  CHECK(loss_value(std::exp(-0.5) * gt, gt) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(loss_value(std::exp(1.0) * gt, gt, 0.2) == 0.2 * loss_value(std::exp(1.0) * gt, gt));
  Eigen::VectorXd bad = gt;
  bad(1) = 0;
  CHECK_THROWS(loss_value(gt, bad));
}

TEST_CASE("masked l1 log loss averages the valid rows only") {
  Eigen::VectorXd gt(3), pred(3);
  gt << 1, 0, 2;
  pred << std::exp(1.0), 5, 2;
  ad::Tape<double> tape;
  auto lp = tape.param("p", pred.array().log().matrix());
  auto loss = l1_log_loss(lp, gt, {1, 0, 1}, 1.0);
  CHECK(loss.value()(0, 0) == doctest::Approx(0.5).epsilon(1e-14));
  tape.backward(loss);
  ad::ParamSet<double> g;
  tape.add_param_grads(g);
  CHECK(g.at("p")(0, 0) == doctest::Approx(0.5));
  CHECK(g.at("p")(1, 0) == 0.0);
  CHECK_THROWS(l1_log_loss(lp, gt, {0, 0, 0}, 1.0));
}

TEST_CASE("decay exemptions") {
  CHECK(decay_exempt("enc.cross.b"));
  CHECK(decay_exempt("frame.0.ln.gamma"));
  CHECK(decay_exempt("dec.ln_lat.beta"));
  CHECK(decay_exempt("latent.r0"));
  CHECK_FALSE(decay_exempt("latent.geo.w1"));
  CHECK_FALSE(decay_exempt("head.1.w"));
  CHECK_FALSE(decay_exempt("patch.w"));
}

TEST_CASE("adamw: zero gradient and zero decay leaves parameters unchanged") {
  ad::ParamSet<double> p{{"a.w", Matrix<double>::Random(3, 2)}};
  const auto before = p;
  AdamState<double> st;
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  for (int i = 0; i < 3; ++i) adamw_step(p, {{"a.w", Matrix<double>::Zero(3, 2)}}, st, cfg);
  CHECK(p.at("a.w") == before.at("a.w"));
  adamw_step(p, {}, st, cfg);
  CHECK(p.at("a.w") == before.at("a.w"));
  CHECK(st.step == 4);
}

TEST_CASE("adamw: decay-only step shrinks weights by (1 - lr wd)") {
  ad::ParamSet<double> p{{"a.w", Matrix<double>::Constant(2, 2, 3.0)}, {"a.b", Matrix<double>::Constant(1, 2, 3.0)}};
  AdamState<double> st;
  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.01;
  adamw_step(p, {}, st, cfg);
  CHECK((p.at("a.w").array() == 3.0 * (1.0 - 0.1 * 0.01)).all());
  CHECK((p.at("a.b").array() == 3.0).all());
}

TEST_CASE("adamw: first step moves each coordinate by lr against the gradient sign") {
  // bias-corrected first step: m_hat / sqrt(v_hat) = g / |g|
  Matrix<double> w(1, 3), g(1, 3);
  w << 1, -2, 0.5;
  g << 4, -1e-3, 2;
  ad::ParamSet<double> p{{"x.w", w}};
  AdamState<double> st;
  AdamWConfig cfg;
  cfg.lr = 0.01;
  cfg.weight_decay = 0.0;
  adamw_step(p, {{"x.w", g}}, st, cfg);
  for (int i = 0; i < 3; ++i) {
    const double expect = w(0, i) - cfg.lr * g(0, i) / (std::abs(g(0, i)) + cfg.eps);
    CHECK(p.at("x.w")(0, i) == doctest::Approx(expect).epsilon(1e-14));
  }
}

TEST_CASE("adamw: one step from zero state reduces a convex quadratic") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::MatrixXd a(4, 4);
    for (int i = 0; i < 16; ++i) a.data()[i] = n(rng);
    const Eigen::MatrixXd h = a * a.transpose() + Eigen::MatrixXd::Identity(4, 4);
    Matrix<double> x(4, 1);
    for (int i = 0; i < 4; ++i) x(i, 0) = n(rng);
    auto f = [&](const Matrix<double>& v) { return 0.5 * (v.transpose() * h * v)(0, 0); };
    ad::ParamSet<double> p{{"q.w", x}};
    AdamState<double> st;
    AdamWConfig cfg;
    cfg.lr = 1e-3;
    adamw_step(p, {{"q.w", h * x}}, st, cfg);
    CHECK(f(p.at("q.w")) < f(x));
  }
}

TEST_CASE("adamw rejects misshaped gradients") {
  ad::ParamSet<float> p{{"a.w", Matrix<float>::Zero(2, 2)}};
  AdamState<float> st;
  CHECK_THROWS_AS(adamw_step(p, {{"a.w", Matrix<float>::Zero(2, 3)}}, st, AdamWConfig{}), ShapeError);
}

TEST_CASE("thread count honors EPIO_THREADS") {
  {
    ThreadEnv env("3");
    CHECK(thread_count() == 3);
  }
  CHECK(thread_count() >= 1);
}

TEST_CASE("training is deterministic and independent of the thread count") {
  const Model model(tiny_model());
  const auto data = tiny_data(5);
  TrainState a = initial_state(model, 2), b = initial_state(model, 2), c = initial_state(model, 2);
  train(model, data, tiny_train(), a);
  train(model, data, tiny_train(), b);
  {
    ThreadEnv env("1");
    train(model, data, tiny_train(), c);
  }
  CHECK(a.step == 6);
  CHECK(a.epoch == 2);
  CHECK(same_params(a.params, b.params));
  CHECK(same_params(a.params, c.params));
  CHECK_FALSE(same_params(a.params, initial_state(model, 2).params));

  TrainConfig other = tiny_train();
  other.seed = 10;
  TrainState d = initial_state(model, 2);
  train(model, data, other, d);
  CHECK_FALSE(same_params(a.params, d.params));
}

TEST_CASE("resuming from a checkpoint reproduces the uninterrupted run bit for bit") {
  const Model model(tiny_model());
  const auto data = tiny_data(5);
  TrainConfig cfg = tiny_train();
  cfg.epochs = 3;
  TrainState full = initial_state(model, 4);
  std::vector<double> full_losses;
  train(model, data, cfg, full, {nullptr, [&](long, double l) { full_losses.push_back(l); }});

  const auto dir = std::filesystem::temp_directory_path() / ("epio_resume_" + std::to_string(::getpid()));
  TrainState first = initial_state(model, 4);
  TrainConfig part = cfg;
  part.epochs = 1;
  std::vector<double> losses;
  TrainHooks hooks{nullptr, [&](long, double l) { losses.push_back(l); }};
  train(model, data, part, first, hooks);
  save_checkpoint(dir, Checkpoint{model.config(), cfg, first});
  Checkpoint loaded = load_checkpoint(dir);
  std::filesystem::remove_all(dir);
  train(model, data, loaded.train, loaded.state, hooks);

  CHECK(loaded.state.step == full.step);
  CHECK(losses == full_losses);
  CHECK(same_params(loaded.state.params, full.params));
  for (const auto& [name, m] : full.opt.m) {
    CHECK(loaded.state.opt.m.at(name) == m);
    CHECK(loaded.state.opt.v.at(name) == full.opt.v.at(name));
  }
}

TEST_CASE("epoch hook reports the learning-rate schedule") {
  const Model model(tiny_model());
  const auto data = tiny_data(2);
  TrainConfig cfg = tiny_train();
  cfg.epochs = 4;
  cfg.lr_halve_at = {1, 3};
  std::vector<double> lrs;
  TrainState st = initial_state(model, 1);
  train(model, data, cfg, st, {[&](const EpochLog& l, const TrainState&) { lrs.push_back(l.lr); }, nullptr});
  CHECK(lrs == std::vector<double>{1e-3, 5e-4, 5e-4, 2.5e-4});
}

TEST_CASE("max_steps stops early") {
  const Model model(tiny_model());
  const auto data = tiny_data(5);
  TrainConfig cfg = tiny_train();
  cfg.max_steps = 4;
  TrainState st = initial_state(model, 1);
  train(model, data, cfg, st);
  CHECK(st.step == 4);
}

TEST_CASE("non-finite loss aborts with the step index") {
  const Model model(tiny_model());
  auto data = tiny_data(2);
  TrainState st = initial_state(model, 1);
  st.params.at("head.2.w")(0, 0) = std::numeric_limits<float>::quiet_NaN();
  try {
    train(model, data, tiny_train(), st);
    FAIL("expected TrainingError");
  } catch (const TrainingError& e) {
    CHECK(std::string(e.what()).find("step 0") != std::string::npos);
  }
  CHECK_THROWS_AS(train(model, {}, tiny_train(), st), std::invalid_argument);
}

TEST_CASE("overfitting a single pair: moving-average loss keeps falling") {
  const Model model(tiny_model());
  const auto data = tiny_data(1);
  TrainConfig cfg;
  cfg.epochs = 400;
  cfg.batch = 1;
  cfg.queries = 64;
  cfg.lr = 3e-3;
  cfg.lr_halve_at = {150, 250, 325};
  cfg.seed = 1;
  std::vector<double> losses;
  TrainState st = initial_state(model, 1);
  train(model, data, cfg, st, {nullptr, [&](long, double l) { losses.push_back(l); }});
  REQUIRE(losses.size() == 400);
  std::vector<double> windows;
  for (std::size_t s = 200; s + 50 <= losses.size(); s += 50) {
    double sum = 0;
    for (std::size_t k = s; k < s + 50; ++k) sum += losses[k];
    windows.push_back(sum / 50);
  }
  for (std::size_t k = 1; k < windows.size(); ++k) CHECK(windows[k] <= windows[k - 1]);
  CHECK(windows.back() < 0.5 * losses.front());
}

TEST_CASE("evaluation: deterministic, and rigid motions leave the equivariant model unchanged") {
  const Model model(tiny_model());
  const auto data = tiny_data(3);
  const auto params = model.init<float>(3);
  const EvalResult plain = evaluate(model, params, data, {});
  const EvalResult moved = evaluate(model, params, data, {true, 5});
  const EvalResult again = evaluate(model, params, data, {true, 5});
  CHECK(moved.metrics.abs_rel == again.metrics.abs_rel);
  CHECK((moved.inputs[0].cameras.cameras[0].t - data[0].input.cameras.cameras[0].t).norm() > 1e-3);
  CHECK(std::abs(moved.metrics.abs_rel - plain.metrics.abs_rel) < 1e-3 * plain.metrics.abs_rel);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double scale = plain.predictions[i].cwiseAbs().maxCoeff();
    CHECK((moved.predictions[i] - plain.predictions[i]).cwiseAbs().maxCoeff() < 1e-3 * scale);
  }
}
