#pragma once

// Loss, metrics, AdamW and the deterministic training / evaluation loops.

#include "epio/model.hpp"
#include "epio/scene.hpp"

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace epio {

struct Metrics {
  double abs_rel = std::numeric_limits<double>::quiet_NaN();
  double rmse = std::numeric_limits<double>::quiet_NaN();
  double delta_125 = std::numeric_limits<double>::quiet_NaN();
  std::size_t count = 0;  // valid pixels
  bool empty() const { return count == 0; }
};

/// Pixel-pooled metrics over the valid entries; empty() when nothing is valid.
/// Throws when a valid prediction or ground truth is not positive.
Metrics compute_metrics(const Eigen::VectorXd& pred, const Eigen::VectorXd& gt, const std::vector<std::uint8_t>& valid);

/// Pools metrics over many images (every valid pixel weighs the same).
class MetricsAccumulator {
 public:
  void add(const Eigen::VectorXd& pred, const Eigen::VectorXd& gt, const std::vector<std::uint8_t>& valid);
  Metrics result() const;

 private:
  double abs_rel_ = 0, sq_ = 0, within_ = 0;
  std::size_t count_ = 0;
};

/// weight * mean |log_pred - log gt| over the rows of log_pred (Q x 1).
template <typename Scalar>
ad::Var<Scalar> l1_log_loss(const ad::Var<Scalar>& log_pred, const Eigen::VectorXd& gt, double weight = 1.0);

/// Same, restricted to the valid rows; gt may be anything on invalid rows.
template <typename Scalar>
ad::Var<Scalar> l1_log_loss(const ad::Var<Scalar>& log_pred, const Eigen::VectorXd& gt,
                            const std::vector<std::uint8_t>& valid, double weight = 1.0);

struct AdamWConfig {
  double lr = 2e-4;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 1e-4;
};

template <typename Scalar>
struct AdamState {
  ad::ParamSet<Scalar> m, v;
  long step = 0;
};

/// Biases, norm affines and the latent array take no weight decay.
bool decay_exempt(const std::string& name);

/// Decoupled-weight-decay Adam; parameters without a gradient see a zero one.
template <typename Scalar>
void adamw_step(ad::ParamSet<Scalar>& params, const ad::ParamSet<Scalar>& grads, AdamState<Scalar>& state,
                const AdamWConfig& cfg);

/// One training or test item: the stereo input plus ground truth for the query view.
struct Sample {
  std::string id;
  ModelInput input;
  Eigen::VectorXd depth;            // (W H), ray distance
  std::vector<std::uint8_t> valid;  // (W H)
};

/// Renders the stereo pair and query ground truth of scene `seed`.
Sample synthesize_sample(std::uint64_t seed, const SceneSpec& spec);

struct TrainConfig {
  int epochs = 30;
  int batch = 8;
  double lr = 1e-3;
  std::vector<int> lr_halve_at{12, 24};
  double weight_decay = 1e-4;
  int queries = 256;  // query pixels per sample and step, drawn from the valid ones
  std::uint64_t seed = 0;
  long max_steps = 0;  // stop early after this many steps (0 = no limit)
};

struct TrainState {
  ad::ParamSet<float> params;
  AdamState<float> opt;
  int epoch = 0;  // completed epochs
  long step = 0;
  long degenerate_frames = 0;
};

struct EpochLog {
  int epoch = 0;
  long step = 0;
  double loss = 0.0;
  double lr = 0.0;
  long degenerate_frames = 0;
};

struct TrainHooks {
  std::function<void(const EpochLog&, const TrainState&)> on_epoch;
  std::function<void(long step, double loss)> on_step;
};

struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Worker threads: EPIO_THREADS when set, else the hardware count.
int thread_count();

/// Runs epochs state.epoch .. cfg.epochs - 1. Every random choice derives from
/// (cfg.seed, epoch, position), so resuming from a saved state reproduces the
/// uninterrupted run exactly. Throws TrainingError on a non-finite loss or gradient.
void train(const Model& model, const std::vector<Sample>& data, const TrainConfig& cfg, TrainState& state,
           const TrainHooks& hooks = {});

TrainState initial_state(const Model& model, std::uint64_t seed);

struct EvalOptions {
  bool rotate_frame = false;
  std::uint64_t seed = 0;
};

struct EvalResult {
  Metrics metrics;
  long degenerate_frames = 0;
  std::vector<Eigen::VectorXd> predictions;  // per sample, all pixels
  std::vector<ModelInput> inputs;            // as evaluated (after the optional rigid motion)
};

/// With rotate_frame every sample's cameras first undergo a fresh random rigid motion.
EvalResult evaluate(const Model& model, const ad::ParamSet<float>& params, const std::vector<Sample>& data,
                    const EvalOptions& opts);

}  // namespace epio
