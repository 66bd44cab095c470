// epio command-line tool: dataset generation, equivariance checks, training,
// evaluation and latent visualization.

#include "epio/equivariance.hpp"
#include "epio/io.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>

using namespace epio;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

int cmd_gen(const std::string& spec_path, const std::string& out, int n, std::uint64_t seed) {
  const DatasetSpec spec = parse_dataset_spec(read_text(spec_path));
  generate_dataset(out, spec, n, seed);
  std::cout << "wrote " << n << " scenes to " << out << "\n";
  return 0;
}

int cmd_check(const SuiteOptions& opts) {
  bool ok = true;
  for (const auto& r : run_equivariance_suite(opts)) {
    std::printf("%-22s max error %.3e  tol %.0e  %s\n", r.name.c_str(), r.error, r.tolerance,
                r.passed() ? "ok" : "FAILED");
    ok = ok && r.passed();
  }
  std::printf(ok ? "all checks passed\n" : "equivariance check failed\n");
  return ok ? 0 : 1;
}

Model make_model(const ModelConfig& cfg, bool baseline) { return baseline ? baseline_model(cfg) : Model(cfg); }

int cmd_train(const std::string& config_path, const std::string& data_dir, const fs::path& out, bool baseline,
              bool resume) {
  RunConfig run = parse_run_config(read_text(config_path));
  const Dataset ds = load_dataset(data_dir);
  if (ds.train.empty()) throw ConfigError("dataset has no training scenes");
  if (ds.spec.scene.width != run.model.width || ds.spec.scene.height != run.model.height) {
    throw ConfigError("model image size differs from the dataset");
  }
  fs::create_directories(out);
  const fs::path ckpt_dir = out / "checkpoint";
  const fs::path log_path = out / "log.jsonl";

  Checkpoint ckpt;
  if (resume && fs::exists(ckpt_dir / "checkpoint.json")) {
    ckpt = load_checkpoint(ckpt_dir);
    std::cerr << "resuming at epoch " << ckpt.state.epoch << "\n";
  } else {
    const Model model = make_model(run.model, baseline);
    ckpt.model = model.config();
    ckpt.train = run.train;
    ckpt.state = initial_state(model, run.train.seed);
    std::ofstream(log_path, std::ios::trunc);
  }
  run.model = ckpt.model;
  write_text(out / "config.json", dump_run_config(run));
  const Model model(ckpt.model);
  std::cerr << "parameters: " << model.parameter_count() << ", training scenes: " << ds.train.size() << "\n";

  const auto t0 = std::chrono::steady_clock::now();
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochLog& log, const TrainState& state) {
    const json line = {{"epoch", log.epoch},
                       {"step", log.step},
                       {"loss", log.loss},
                       {"lr", log.lr},
                       {"degenerate_frames", log.degenerate_frames}};
    std::ofstream(log_path, std::ios::app) << line.dump() << "\n";
    Checkpoint c{ckpt.model, ckpt.train, state};
    save_checkpoint(ckpt_dir, c);
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cerr << "epoch " << log.epoch << " loss " << log.loss << " (" << sec << " s)\n";
  };
  train(model, ds.train, ckpt.train, ckpt.state, hooks);
  save_checkpoint(ckpt_dir, ckpt);
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir, bool rotate, std::uint64_t seed,
             const std::string& split, const std::string& report, const std::string& ply_dir) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const Dataset ds = load_dataset(data_dir);
  const Model model(ckpt.model);
  const std::vector<Sample>& data = split == "train" ? ds.train : ds.test;
  if (data.empty()) throw ConfigError("the " + split + " split is empty");
  const EvalResult r = evaluate(model, ckpt.state.params, data, {rotate, seed});
  const std::string metrics = metrics_json(r.metrics);
  std::cout << metrics << "\n";
  if (!report.empty()) {
    json doc = {{"checkpoint", ckpt_path},
                {"data", data_dir},
                {"split", split},
                {"rotate_frame", rotate},
                {"seed", seed},
                {"samples", data.size()},
                {"degenerate_frames", r.degenerate_frames},
                {"metrics", json::parse(metrics)}};
    json per = json::array();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const Metrics m = compute_metrics(r.predictions[i], data[i].depth, data[i].valid);
      per.push_back({{"id", data[i].id}, {"metrics", json::parse(metrics_json(m))}});
    }
    doc["per_sample"] = per;
    write_text(report, doc.dump(2) + "\n");
  }
  if (!ply_dir.empty()) {
    fs::create_directories(ply_dir);
    for (std::size_t i = 0; i < data.size(); ++i) {
      const Camera& q = r.inputs[i].query;
      const int n = q.width * q.height;
      Matrix<double> pts(n, 3), col(n, 3);
      for (int px = 0; px < n; ++px) {
        const Vector3d p = q.t + r.predictions[i](px) * q.pixel_direction(px % q.width, px / q.width);
        pts.row(px) = p.transpose();
        col.row(px) = r.inputs[i].images[0].row(px);
      }
      write_ply(fs::path(ply_dir) / (data[i].id + ".ply"), pts, col);
    }
  }
  return 0;
}

// Diverging blue-white-red map of v in [-1, 1].
Vector3d diverging(double v) {
  v = std::clamp(v, -1.0, 1.0);
  return v >= 0 ? Vector3d(1.0, 1.0 - v, 1.0 - v) : Vector3d(1.0 + v, 1.0 + v, 1.0);
}

int cmd_viz(const std::string& ckpt_path, const std::string& data_dir, int token, const std::string& out,
            int sample, int grid_n, long rotate_seed) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  if (!ckpt.model.geometric()) throw ConfigError("viz-latent needs an equivariant model with cameras");
  const Dataset ds = load_dataset(data_dir);
  const std::vector<Sample>& data = ds.test.empty() ? ds.train : ds.test;
  if (sample < 0 || std::size_t(sample) >= data.size()) throw ConfigError("sample index out of range");
  ModelInput in = data[std::size_t(sample)].input;
  if (rotate_seed >= 0) in = apply_se3(in, random_rotation(std::uint64_t(rotate_seed)), Vector3d::Zero());
  const Model model(ckpt.model);
  const EquiTensor<double> latent = encode_latent(model, ckpt.state.params, in);
  const EquiTensor<double> tok = token_of(latent, token);
  const SphereGrid grid = sphere_grid(grid_n);
  const Eigen::VectorXd f = latent_to_sphere(tok, grid, std::vector<int>(tok.layout().size(), 0));
  const double scale = f.cwiseAbs().maxCoeff();
  Matrix<double> pts(f.size(), 3), col(f.size(), 3);
  for (Eigen::Index k = 0; k < f.size(); ++k) {
    pts.row(k) = grid.points[std::size_t(k)].transpose();
    col.row(k) = diverging(scale > 0 ? f(k) / scale : 0.0).transpose();
  }
  write_ply(out, pts, col);
  std::cout << "wrote " << f.size() << " vertices to " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"epio: equivariant multi-view depth estimation"};
  app.require_subcommand(1);

  std::string spec, out, config, data, ckpt, report, ply, split = "test";
  int n = 1, lmax = 8, trials = 100, token = 0, sample = 0, grid = 1000, corrupt = -1;
  std::uint64_t seed = 0;
  long rotate_seed = -1;
  bool float32 = false, baseline = false, rotate = false, resume = false;

  auto* gen = app.add_subcommand("gen", "generate a synthetic stereo dataset");
  gen->add_option("--spec", spec, "dataset spec JSON (bare or inside a run config)")->required();
  gen->add_option("--out", out, "output directory")->required();
  gen->add_option("--n", n, "number of scenes")->required()->check(CLI::PositiveNumber);
  gen->add_option("--seed", seed, "random seed")->required();

  auto* check = app.add_subcommand("check-equivariance", "run the numerical equivariance suite");
  check->add_option("--lmax", lmax, "highest harmonic order")->check(CLI::Range(1, 16));
  check->add_option("--trials", trials, "random draws per check")->check(CLI::PositiveNumber);
  check->add_option("--seed", seed, "random seed");
  check->add_flag("--float32", float32, "run layers and models in float32");
  check->add_option("--corrupt-wigner", corrupt, "perturb the Wigner block of this order")->group("");

  auto* tr = app.add_subcommand("train", "train a model");
  tr->add_option("--config", config, "run configuration JSON")->required();
  tr->add_option("--data", data, "dataset directory")->required();
  tr->add_option("--out", out, "output directory")->required();
  tr->add_flag("--baseline", baseline, "train the conventional baseline instead");
  tr->add_flag("--resume", resume, "continue from <out>/checkpoint when present");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->add_option("--ckpt", ckpt, "checkpoint manifest or directory")->required();
  ev->add_option("--data", data, "dataset directory")->required();
  ev->add_flag("--rotate-frame", rotate, "apply a random rigid motion to every sample");
  ev->add_option("--seed", seed, "seed of the rigid motions");
  ev->add_option("--split", split, "train or test")->check(CLI::IsMember({"train", "test"}));
  ev->add_option("--report", report, "write a JSON report");
  ev->add_option("--ply", ply, "export predicted point clouds to this directory");

  auto* viz = app.add_subcommand("viz-latent", "export a latent token as a colored sphere");
  viz->add_option("--ckpt", ckpt, "checkpoint manifest or directory")->required();
  viz->add_option("--data", data, "dataset directory")->required();
  viz->add_option("--token", token, "latent token index")->required();
  viz->add_option("--out", out, "output PLY file")->required();
  viz->add_option("--sample", sample, "sample index in the test split");
  viz->add_option("--grid", grid, "sphere grid size")->check(CLI::PositiveNumber);
  viz->add_option("--rotate-seed", rotate_seed, "rotate the input scene by random_rotation(seed)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return cmd_gen(spec, out, n, seed);
    if (*check) {
      SuiteOptions o;
      o.lmax = lmax;
      o.trials = trials;
      o.seed = seed;
      o.float32 = float32;
      o.corrupt_order = corrupt;
      return cmd_check(o);
    }
    if (*tr) return cmd_train(config, data, out, baseline, resume);
    if (*ev) return cmd_eval(ckpt, data, rotate, seed, split, report, ply);
    if (*viz) return cmd_viz(ckpt, data, token, out, sample, grid, rotate_seed);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
