#pragma once

// Depth-from-stereo network: image patches and camera geometry are encoded
// into an equivariant latent array, a canonical frame is read off the latent,
// and depth is decoded from frame-relative (hence invariant) inputs.
//
// A conventional variant with Fourier encodings of world-frame rays shares
// the code path; it serves as the budget-matched comparison model.

#include "epio/attention.hpp"
#include "epio/geometry.hpp"

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace epio {

enum class Architecture { Equivariant, Conventional };
enum class DecoderKind { Canonical, Equivariant };

struct ModelConfig {
  Architecture arch = Architecture::Equivariant;
  DecoderKind decoder = DecoderKind::Canonical;
  /// When false, camera geometry is withheld from the network (ablation): the
  /// equivariant variant keeps only its type-0 channels and queries by pixel
  /// coordinates.
  bool use_cameras = true;

  std::vector<int> orders{1, 2};            // l >= 1, ascending
  std::vector<int> latent_channels{16, 8};  // C^l, one per order
  int patch_channels = 64;                  // C_0 of the input tokens
  int latents = 64;                         // N_R
  int latent_scalars = 64;                  // C_R
  int cross_heads = 1;
  int heads = 4;
  int depth = 4;  // self-attention blocks
  int patch = 4;
  int frequencies = 8;
  int decoder_width = 64;
  int decoder_heads = 1;
  int width = 32, height = 32;
  /// Conventional variant only: latent width, 0 picks one matching the
  /// equivariant model's parameter count.
  int baseline_width = 0;

  void validate() const;
  FeatureLayout token_layout() const;
  FeatureLayout latent_layout() const;
  int query_width() const { return 6 * (2 * frequencies + 1); }
  /// Equivariant architecture fed with camera geometry (has l >= 1 features).
  bool geometric() const { return arch == Architecture::Equivariant && use_cameras; }

  static ModelConfig full_scale();
};

struct DegenerateFrame : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr double kFrameEps = 1e-6;

/// Views plus the camera whose pixels are queried.
struct ModelInput {
  std::vector<Matrix<double>> images;  // per view, (W H) x 3, pixel (u, v) at row v W + u
  CameraSet cameras;
  Camera query;
};

ModelInput apply_se3(const ModelInput& in, const Rotation& rot, const Vector3d& trans);

/// (x, sin(2^k pi x), cos(2^k pi x)) for k < F.
Eigen::VectorXd fourier_pe(double x, int frequencies);

/// Rotation [c1 c2 c3] from two 1x3 rows by Gram-Schmidt. Throws
/// DegenerateFrame when |a| or the rejected part of b is below kFrameEps.
template <typename Scalar>
ad::Var<Scalar> gram_schmidt(const ad::Var<Scalar>& a, const ad::Var<Scalar>& b);

/// f(x) = sum_l F^l(:, c_l)^T Y^l(x) for one token, channel c_l per type.
Eigen::VectorXd latent_to_sphere(const EquiTensor<double>& token, const SphereGrid& grid,
                                 const std::vector<int>& channels);

template <typename Scalar>
struct ForwardResult {
  VarFeature<Scalar> tokens;
  VarFeature<Scalar> latent_in;
  VarFeature<Scalar> latent;
  std::optional<ad::Var<Scalar>> frame;
  bool degenerate_frame = false;
  ad::Var<Scalar> log_depth;  // Q x 1
};

class Model {
 public:
  explicit Model(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }

  template <typename Scalar>
  ad::ParamSet<Scalar> init(std::uint64_t seed) const;
  std::size_t parameter_count() const;

  /// Patches of one image: (H/p)(W/p) x 3p^2, patches row-major.
  static Matrix<double> patches(const Matrix<double>& image, int width, int height, int patch);

  template <typename Scalar>
  ad::Var<Scalar> patch_embed(ad::Tape<Scalar>& tape, const ad::ParamSet<Scalar>& params,
                              const Matrix<double>& image) const;
  template <typename Scalar>
  VarFeature<Scalar> input_tokens(ad::Tape<Scalar>& tape, const ad::ParamSet<Scalar>& params,
                                  const ModelInput& in) const;
  template <typename Scalar>
  VarFeature<Scalar> initial_latent(ad::Tape<Scalar>& tape, const ad::ParamSet<Scalar>& params,
                                    const CameraSet& cs) const;
  template <typename Scalar>
  VarFeature<Scalar> encode(const VarFeature<Scalar>& tokens, const VarFeature<Scalar>& latent,
                            const ad::ParamSet<Scalar>& params) const;
  /// 3x3 frame; throws DegenerateFrame.
  template <typename Scalar>
  ad::Var<Scalar> extract_frame(const VarFeature<Scalar>& latent, const ad::ParamSet<Scalar>& params) const;
  /// Applies D^l(frame)^T to every block and flattens: N_R x width.
  template <typename Scalar>
  ad::Var<Scalar> invariantize(const VarFeature<Scalar>& latent, const ad::Var<Scalar>& frame) const;
  /// Q x 6(2F+1) Fourier features of frame-relative query rays.
  template <typename Scalar>
  ad::Var<Scalar> query_encoding(ad::Tape<Scalar>& tape, const ad::Var<Scalar>& frame, const ModelInput& in,
                                 const std::vector<int>& pixels) const;
  /// Log-depth (before the camera-scale offset) for each query row.
  template <typename Scalar>
  ad::Var<Scalar> decode(const ad::Var<Scalar>& latent, const ad::Var<Scalar>& queries,
                         const ad::ParamSet<Scalar>& params) const;
  template <typename Scalar>
  ad::Var<Scalar> equivariant_decode(const VarFeature<Scalar>& latent, const ModelInput& in,
                                     const std::vector<int>& pixels, const ad::ParamSet<Scalar>& params) const;

  /// Full pipeline on the given query pixels (all when empty). A degenerate
  /// frame falls back to the identity and is flagged in the result.
  template <typename Scalar>
  ForwardResult<Scalar> forward(ad::Tape<Scalar>& tape, const ad::ParamSet<Scalar>& params, const ModelInput& in,
                                const std::vector<int>& pixels = {}) const;

  /// Depth per query pixel (all pixels when empty), evaluated without gradients.
  template <typename Scalar>
  Eigen::VectorXd predict(const ad::ParamSet<Scalar>& params, const ModelInput& in,
                          const std::vector<int>& pixels = {}, bool* degenerate = nullptr) const;

 private:
  void build();
  std::vector<int> all_pixels() const;

  ModelConfig cfg_;
  FeatureLayout tokens_, latent_;
  DenseLayer patch_;
  EquiLinearLayer geo_;
  std::vector<EquiTransformerBlock> blocks_;
  EquiMlpStack frame_mlp_;
  // canonical decoder
  DenseLayer dec_in_, dec_q_, dec_k_, dec_v_, dec_o_, dec_mlp1_, dec_mlp2_, head1_, head2_;
  NormLayer dec_ln_q_, dec_ln_lat_, dec_ln_mlp_;
  // equivariant decoder
  EquiLinearLayer edec_q_, edec_k_, edec_v_, edec_a_, edec_b_;
};

/// Encoded latent of `in`, evaluated in float64 with widened parameters.
EquiTensor<double> encode_latent(const Model& model, const ad::ParamSet<float>& params, const ModelInput& in);

/// Single-token slice of a feature tensor.
EquiTensor<double> token_of(const EquiTensor<double>& f, Eigen::Index token);

/// Conventional comparison model with its latent width chosen so that the
/// parameter count is within 20% of the equivariant model built from `cfg`.
Model baseline_model(ModelConfig cfg);

}  // namespace epio
