#include <cmath>

#include "customtext/diffusion.hpp"
#include "customtext/imagetensor.hpp"
#include "customtext/rng.hpp"

namespace customtext::diffusion {

namespace {

constexpr std::uint64_t kStreamSample = 0x73616d70;
constexpr std::uint64_t kStreamCond = 0x636f6e64;
constexpr std::uint64_t kStreamInit = 0x696e6974;

void check_bundle(const Conditioning& c, bool need_cond) {
  auto fits = [](int w, int h) { return w == kImageSize && h == kImageSize; };
  if (!fits(c.char_mask.width(), c.char_mask.height())) throw ContractError("character mask must be 64x64");
  if (!fits(c.region.width, c.region.height)) throw ContractError("region mask must match the character mask canvas");
  if (need_cond && !fits(c.cond_mask.rgb.width, c.cond_mask.rgb.height)) {
    throw ContractError("conditional mask must match the character mask canvas");
  }
}

// Latent cell is editable when any of its pixels lies in the region.
std::vector<std::uint8_t> latent_region(const masks::RegionMask& region) {
  std::vector<std::uint8_t> out(kLatentSize * kLatentSize, 0);
  for (int y = 0; y < region.height; ++y)
    for (int x = 0; x < region.width; ++x)
      if (region.at(x, y)) out[(y / kLatentFactor) * kLatentSize + x / kLatentFactor] = 1;
  return out;
}

void keep_outside(Latent& x, const Latent& known, const std::vector<std::uint8_t>& inside) {
  const std::size_t plane = x.plane();
  for (std::size_t base = 0; base < x.data.size(); base += plane)
    for (std::size_t k = 0; k < plane; ++k)
      if (!inside[k]) x.data[base + k] = known.data[base + k];
}

Latent run_sampler(const Conditioning& cond, const NoiseSchedule& sched, const BlendParams* params,
                   const Denoiser& model, const Vae& vae, std::uint64_t seed, const SampleOptions& options) {
  sched.validate();
  if (model.schedule().T != sched.T) throw ContractError("schedule length differs from the denoiser's");
  check_bundle(cond, params != nullptr);

  CondLatentTrack track;
  if (params) {
    params->validate();
    track = build_cond_latents(cond.cond_mask, sched, vae, seed);
  }

  Latent init_latent;
  std::vector<std::uint8_t> inside;
  auto init_rng = make_rng(seed, kStreamInit);
  if (options.init_image) {
    if (options.init_image->width != kImageSize || options.init_image->height != kImageSize) {
      throw ContractError("init image must be 64x64");
    }
    init_latent = vae.encode(nn::image_to_tensor(*options.init_image));
    inside = latent_region(cond.region);
  }

  const auto dcond = make_cond({&cond.char_mask.index_map}, {&cond.region}, {style_token(cond.prose)});
  DenoiserCond null_cond = dcond;
  std::fill(null_cond.chars.data.begin(), null_cond.chars.data.end(), 0);
  std::fill(null_cond.region.data.begin(), null_cond.region.data.end(), 0.0f);

  auto rng = make_rng(seed, kStreamSample);
  Latent x = normal_like<float>(1, kLatentChannels, kLatentSize, kLatentSize, rng);

  for (int t = sched.T; t >= 1; --t) {
    if (options.init_image) {
      auto e = normal_like<float>(1, kLatentChannels, kLatentSize, kLatentSize, init_rng);
      keep_outside(x, forward_noise(init_latent, t, e, sched), inside);
    }
    if (params) x = blend_latents(x, track.latents[t], weight_map(cond.char_mask, t, sched, *params));

    auto eps = model.predict(x, {t}, dcond);
    if (options.cfg_scale != 1.0) {
      const auto eps_u = model.predict(x, {t}, null_cond);
      for (std::size_t i = 0; i < eps.data.size(); ++i) {
        eps.data[i] = static_cast<float>(eps_u.data[i] + options.cfg_scale * (eps.data[i] - eps_u.data[i]));
      }
    }

    const double ab = sched.alpha_bar[t], ab_prev = sched.alpha_bar[t - 1];
    const double beta = sched.beta(t);
    const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
    const double c1 = std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab);
    const double sigma = std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab));
    Latent z;
    if (t > 1) z = normal_like<float>(1, kLatentChannels, kLatentSize, kLatentSize, rng);
    for (std::size_t i = 0; i < x.data.size(); ++i) {
      const double x0_hat = (x.data[i] - std::sqrt(1.0 - ab) * eps.data[i]) / std::sqrt(ab);
      double next = c0 * x0_hat + c1 * x.data[i];
      if (t > 1) next += sigma * z.data[i];
      x.data[i] = static_cast<float>(next);
    }
  }
  if (options.init_image) keep_outside(x, init_latent, inside);
  return x;
}

}  // namespace

CondLatentTrack build_cond_latents(const masks::ConditionalMask& cond, const NoiseSchedule& sched, const Vae& vae,
                                   std::uint64_t seed) {
  CondLatentTrack track;
  const auto clean = vae.encode(nn::image_to_tensor(cond.rgb));
  auto rng = make_rng(seed, kStreamCond);
  track.latents.reserve(sched.T + 1);
  track.latents.push_back(clean);
  for (int t = 1; t <= sched.T; ++t) {
    auto eps = normal_like<float>(clean.n, clean.c, clean.h, clean.w, rng);
    track.latents.push_back(forward_noise(clean, t, eps, sched));
  }
  return track;
}

Latent sample(const Conditioning& cond, const NoiseSchedule& sched, const BlendParams& params, const Denoiser& model,
              const Vae& vae, std::uint64_t seed, const SampleOptions& options) {
  return run_sampler(cond, sched, &params, model, vae, seed, options);
}

Latent sample_ddpm(const Conditioning& cond, const NoiseSchedule& sched, const Denoiser& model, const Vae& vae,
                   std::uint64_t seed, const SampleOptions& options) {
  return run_sampler(cond, sched, nullptr, model, vae, seed, options);
}

}  // namespace customtext::diffusion
