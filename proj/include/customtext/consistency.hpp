#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "customtext/checkpoint.hpp"
#include "customtext/corpus.hpp"
#include "customtext/diffusion.hpp"
#include "customtext/nn.hpp"

namespace customtext::consistency {

inline constexpr double kSigmaData = 0.5;

struct Geometry {
  int image_c = 3;
  int height = 64;
  int width = 64;
  int latent_c = 4;
  int factor = 4;  // image size / latent size
  int c1 = 32;     // full-resolution width
  int c2 = 64;     // half-resolution width
  int mask_dim = 8;

  int input_c() const { return image_c + latent_c + 1; }
  void validate() const;
  nlohmann::json to_json() const;
  static Geometry from_json(const nlohmann::json& doc);
};

// Noise levels t_1 < ... < t_N.
struct TimeGrid {
  std::vector<double> t;
  int size() const { return static_cast<int>(t.size()); }
  double at(int n) const { return t.at(n - 1); }  // 1-based like the levels
  double min() const { return t.front(); }
  double max() const { return t.back(); }
};

TimeGrid make_time_grid(int n = 18, double t_min = 0.002, double t_max = 80.0, double rho = 7.0);

// Boundary parameterisation relative to t_min: skip(t_min) = 1, out(t_min) = 0.
double c_skip(double t, double t_min);
double c_out(double t, double t_min);
double c_in(double t);

// f_theta: image-space decoder over [c_in z, upsampled l, log(t)/4].
template <typename T>
struct Backbone {
  Backbone(const Geometry& geo, std::uint64_t seed);

  Geometry geo;
  nn::Conv2d<T> in, down, mid, up, refine, out;
  nn::SiLU<T> a_in, a_down, a_mid, a_up, a_refine;

  nn::ParamList<T> params();
  std::string checksum() const;
};

template <typename T>
struct Taps {
  nn::Tensor<T> half;  // added after the half-resolution block
  nn::Tensor<T> full;  // added after the full-resolution merge
};

// C_phi: embeds the character mask, encodes it with the backbone input and
// injects features through zero-initialised 1x1 convolutions.
template <typename T>
struct Adapter {
  Adapter(const Geometry& geo, std::uint64_t seed);

  Geometry geo;
  nn::Embedding<T> embed;
  nn::Conv2d<T> enc_full, enc_half, zero_full, zero_half;
  nn::SiLU<T> a_full, a_half;

  nn::ParamList<T> params();
  std::string checksum() const;
};

// Pure forward passes. `adapter` may be null (backbone only).
template <typename T>
nn::Tensor<T> backbone_input(const Geometry& geo, const nn::Tensor<T>& z, const std::vector<double>& t,
                             const nn::Tensor<T>& l);
template <typename T>
nn::Tensor<T> control_forward(const Backbone<T>& backbone, const Adapter<T>* adapter, const nn::Tensor<T>& z,
                              const std::vector<double>& t, const nn::Tensor<T>& l, const nn::IndexMap& mask,
                              double t_min);

template <typename T>
struct Batch {
  nn::Tensor<T> x;     // clean images (n, 3, H, W) in [-1, 1]
  nn::Tensor<T> l;     // conditioning latents
  nn::IndexMap mask;   // character indices (n, H, W)
};

using LambdaFn = std::function<double(double)>;

// sum_i w_i * ||a_i - b_i||^2 / n over the batch.
template <typename T>
double consistency_distance(const nn::Tensor<T>& a, const nn::Tensor<T>& b, const std::vector<double>& weights);

// lambda(t_n) * ||D(x + t_{n+1} eps, t_{n+1}) - D^-(x + t_n eps, t_n)||^2 summed
// per sample and averaged over the batch. The target branch (D^-) always runs
// in inference mode on `target_*` and never receives gradients. With
// `accumulate`, gradients flow into whichever of the online backbone/adapter
// parameters are not frozen.
template <typename T>
double consistency_loss(Backbone<T>& online_backbone, Adapter<T>* online_adapter, const Backbone<T>& target_backbone,
                        const Adapter<T>* target_adapter, const Batch<T>& batch, const std::vector<int>& n,
                        const nn::Tensor<T>& eps, const TimeGrid& grid, const LambdaFn& lambda, bool accumulate);

// One-step (n_steps = 1) or multistep decoding from pure noise.
nn::Tensor<float> decode_consistent(const Backbone<float>& backbone, const Adapter<float>* adapter,
                                    const nn::Tensor<float>& l, const nn::IndexMap& mask, int n_steps,
                                    std::uint64_t seed, const TimeGrid& grid = make_time_grid());

ckpt::Checkpoint to_checkpoint(const Backbone<float>& backbone);
ckpt::Checkpoint to_checkpoint(const Adapter<float>& adapter);
Backbone<float> backbone_from_checkpoint(const ckpt::Checkpoint& ckpt);
Adapter<float> adapter_from_checkpoint(const ckpt::Checkpoint& ckpt);

// Training examples: images, their VAE latents and character maps.
struct Samples {
  std::vector<nn::Tensor<float>> images;
  std::vector<nn::Tensor<float>> latents;
  std::vector<nn::IndexMap> masks;  // (1, H, W) each
};
Samples make_samples(const diffusion::Vae& vae, const Corpus& corpus);

diffusion::TrainReport pretrain_backbone(Backbone<float>& backbone, const Samples& samples,
                                         const diffusion::TrainOptions& options,
                                         const TimeGrid& grid = make_time_grid());
// Backbone parameters are frozen for the duration and restored afterwards.
diffusion::TrainReport train_adapter(Backbone<float>& backbone, Adapter<float>& adapter, const Samples& samples,
                                     const diffusion::TrainOptions& options, const TimeGrid& grid = make_time_grid());

}  // namespace customtext::consistency
