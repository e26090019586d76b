#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "customtext/checkpoint.hpp"
#include "customtext/corpus.hpp"
#include "customtext/grid.hpp"
#include "customtext/masks.hpp"
#include "customtext/nn.hpp"

namespace customtext::diffusion {

inline constexpr int kImageSize = 64;
inline constexpr int kLatentChannels = 4;
inline constexpr int kLatentSize = 16;
inline constexpr int kLatentFactor = kImageSize / kLatentSize;
inline constexpr int kStyleTokens = 8;

using Latent = nn::Tensor<float>;
using WeightMap = Grid<float>;

// betas[t-1] is beta_t for t = 1..T; alpha_bar has T+1 entries with
// alpha_bar[0] = 1 so that t = 0 is the clean signal.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> betas;
  std::vector<double> alpha_bar;

  double beta(int t) const { return betas.at(t - 1); }
  double alpha(int t) const { return 1.0 - beta(t); }
  void validate() const;
  nlohmann::json to_json() const;
  static NoiseSchedule from_json(const nlohmann::json& doc);
};

// Linear betas over `train_steps`, respaced to `steps` by keeping every
// (train_steps/steps)-th cumulative product.
NoiseSchedule make_schedule(int steps = 50, int train_steps = 1000, double beta_start = 1e-4, double beta_end = 0.02);
NoiseSchedule schedule_from_betas(std::vector<double> betas);

// sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.
Latent forward_noise(const Latent& x0, int t, const Latent& eps, const NoiseSchedule& sched);

struct BlendParams {
  double lambda_max = 0.85;
  double gamma = 1.0;
  int feather_radius_px = 2;
  void validate() const;
};

// Feathered character support area-averaged to latent resolution.
Grid<double> weight_support(const masks::CharacterMask& mask, int feather_radius_px, int latent_h, int latent_w);
WeightMap weight_map(const masks::CharacterMask& mask, int t, const NoiseSchedule& sched, const BlendParams& params,
                     int latent_h = kLatentSize, int latent_w = kLatentSize);
// x * (1 - w) + q * w per element, w broadcast over channels.
Latent blend_latents(const Latent& x, const Latent& q, const WeightMap& w);

class Vae {
 public:
  explicit Vae(std::uint64_t seed = 0);

  // images: (n, 3, 64, 64) in [-1, 1] -> (n, 4, 16, 16) scaled posterior mean.
  Latent encode(const nn::Tensor<float>& images) const;
  nn::Tensor<float> decode(const Latent& z) const;

  float latent_scale() const { return latent_scale_; }
  void set_latent_scale(float s) { latent_scale_ = s; }

  // Fills gradients for one batch and returns (reconstruction, kl) terms.
  std::pair<double, double> accumulate_gradients(const nn::Tensor<float>& images, std::mt19937_64& rng,
                                                 double kl_weight);

  nn::ParamList<float> params();
  std::string checksum() const;
  ckpt::Checkpoint to_checkpoint() const;
  static Vae from_checkpoint(const ckpt::Checkpoint& ckpt);

 private:
  nn::Conv2d<float> e1_, e2_, e3_, e4_;
  nn::Conv2d<float> d1_, d2_, d3_, d4_, d5_, d6_;
  nn::SiLU<float> ea_[3], da_[5];
  float latent_scale_ = 1.0f;
};

int style_token(const std::string& prose);

struct DenoiserCond {
  nn::IndexMap chars;       // (n, 64, 64) character indices
  nn::Tensor<float> region; // (n, 1, 64, 64)
  std::vector<int> style;   // n style tokens
};

class Denoiser {
 public:
  Denoiser(const NoiseSchedule& sched, std::uint64_t seed, int width = 48);

  const NoiseSchedule& schedule() const { return sched_; }
  int width() const { return width_; }

  Latent predict(const Latent& x_t, const std::vector<int>& t, const DenoiserCond& cond) const;
  // Epsilon-prediction MSE; fills gradients and returns the loss.
  double accumulate_gradients(const Latent& x_t, const std::vector<int>& t, const DenoiserCond& cond,
                              const Latent& eps);

  nn::ParamList<float> params();
  std::string checksum() const;
  ckpt::Checkpoint to_checkpoint() const;
  static Denoiser from_checkpoint(const ckpt::Checkpoint& ckpt);

 private:
  nn::Tensor<float> input_planes(const Latent& x_t, const std::vector<int>& t, const DenoiserCond& cond,
                                 const nn::Tensor<float>& char_emb, const nn::Tensor<float>& style_emb) const;

  NoiseSchedule sched_;
  int width_;
  nn::Embedding<float> char_emb_, style_emb_;
  nn::Conv2d<float> c1_, c2_, c3_, c4_, c5_, c6_;
  nn::SiLU<float> a_[5];
};

DenoiserCond make_cond(const std::vector<const GrayImage*>& char_maps, const std::vector<const GrayImage*>& regions,
                       const std::vector<int>& styles);

struct CondLatentTrack {
  std::vector<Latent> latents;  // index t = 0..T
};

CondLatentTrack build_cond_latents(const masks::ConditionalMask& cond, const NoiseSchedule& sched, const Vae& vae,
                                   std::uint64_t seed);

struct Conditioning {
  masks::CharacterMask char_mask;
  masks::ConditionalMask cond_mask;
  masks::RegionMask region;
  std::string prose;
};

struct SampleOptions {
  const RgbImage* init_image = nullptr;  // in-painting source; pixels outside `region` are kept
  double cfg_scale = 1.0;
};

Latent sample(const Conditioning& cond, const NoiseSchedule& sched, const BlendParams& params, const Denoiser& model,
              const Vae& vae, std::uint64_t seed, const SampleOptions& options = {});
// Same loop with blending disabled and no conditional latents.
Latent sample_ddpm(const Conditioning& cond, const NoiseSchedule& sched, const Denoiser& model, const Vae& vae,
                   std::uint64_t seed, const SampleOptions& options = {});

struct TrainOptions {
  int steps = 1000;
  int batch = 8;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  std::function<void(int, double)> on_step;
};

struct TrainReport {
  std::vector<double> losses;
};

// Corpus images must be 64x64.
TrainReport train_vae(Vae& vae, const Corpus& corpus, const TrainOptions& options, double kl_weight = 1e-4);
// Sets the latent scale to 1/std of the posterior means over (a prefix of) the corpus.
void calibrate_latent_scale(Vae& vae, const Corpus& corpus, int max_items = 256);
TrainReport train_denoiser(Denoiser& model, const Vae& vae, const Corpus& corpus, const TrainOptions& options,
                           double cond_dropout = 0.1);

// Encodes every corpus image (batched), in corpus order.
std::vector<Latent> encode_corpus(const Vae& vae, const Corpus& corpus);

}  // namespace customtext::diffusion
