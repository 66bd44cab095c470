#pragma once

// File formats: float rasters, JSON configuration, generated datasets,
// checkpoints and ASCII PLY point clouds.
//
// Raster layout: "EPIO", then width, height, channels as little-endian u32,
// then width*height*channels little-endian float32, row-major, channels
// interleaved.

#include "epio/training.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace epio {

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct Raster {
  std::uint32_t width = 0, height = 0, channels = 0;
  std::vector<float> data;
};

std::string encode_raster(const Raster& r);
Raster decode_raster(const std::string& bytes);
void write_raster(const std::filesystem::path& path, const Raster& r);
Raster read_raster(const std::filesystem::path& path);

/// (W H) x C matrix <-> raster.
Raster to_raster(const Matrix<double>& pixels, int width, int height);
Matrix<double> from_raster(const Raster& r);

struct DatasetSpec {
  SceneSpec scene;
  double test_fraction = 0.1;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DatasetSpec data;
};

/// Parses a run configuration; every object rejects unknown keys and
/// missing keys keep their defaults.
RunConfig parse_run_config(const std::string& json_text);
std::string dump_run_config(const RunConfig& cfg);
/// Accepts either a bare dataset object or a run configuration with a "data" key.
DatasetSpec parse_dataset_spec(const std::string& json_text);
std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

/// Writes index.json, scenes/NNNN.json and scenes/NNNN/{view0,view1,query}_{rgb,depth}.epio.
void generate_dataset(const std::filesystem::path& dir, const DatasetSpec& spec, int count, std::uint64_t seed);
/// Seed of scene `index` in a dataset generated with `seed`.
std::uint64_t scene_seed(std::uint64_t seed, int index);

struct Dataset {
  DatasetSpec spec;
  std::vector<Sample> train, test;
};

Dataset load_dataset(const std::filesystem::path& dir);

struct Checkpoint {
  ModelConfig model;
  TrainConfig train;
  TrainState state;
};

/// checkpoint.json (manifest) plus parameters.bin and optimizer.bin in `dir`.
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
/// `path` is the manifest or its directory.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// ASCII PLY with per-vertex float position and uchar color (colors in [0, 1]).
void write_ply(const std::filesystem::path& path, const Matrix<double>& points, const Matrix<double>& colors);
std::string encode_ply(const Matrix<double>& points, const Matrix<double>& colors);

std::string metrics_json(const Metrics& m);

}  // namespace epio
