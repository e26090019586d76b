#include <cmath>
#include <numbers>

#include "customtext/diffusion.hpp"
#include "customtext/imagetensor.hpp"
#include "customtext/rng.hpp"

namespace customtext::diffusion {

namespace {

void require_corpus(const Corpus& corpus) {
  if (corpus.empty()) throw ContractError("training corpus is empty");
  for (const auto& item : corpus) {
    if (item.image.width != kImageSize || item.image.height != kImageSize) {
      throw ContractError("training images must be 64x64");
    }
  }
}

void require_options(const TrainOptions& o) {
  if (o.steps < 0 || o.batch <= 0 || !(o.lr > 0)) throw ContractError("invalid training options");
}

// Cosine decay from lr to lr/10.
double lr_at(const TrainOptions& o, int step) {
  if (o.steps <= 1) return o.lr;
  const double p = static_cast<double>(step) / (o.steps - 1);
  return o.lr * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * p)));
}

std::vector<int> draw_batch(std::size_t n, int batch, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<int> out(batch);
  for (auto& i : out) i = static_cast<int>(pick(rng));
  return out;
}

}  // namespace

TrainReport train_vae(Vae& vae, const Corpus& corpus, const TrainOptions& options, double kl_weight) {
  require_corpus(corpus);
  require_options(options);
  auto rng = make_rng(options.seed, 0x74766165);
  auto params = vae.params();
  nn::Adam<float> opt(params, options.lr);
  TrainReport report;
  for (int step = 0; step < options.steps; ++step) {
    std::vector<const RgbImage*> images;
    for (int i : draw_batch(corpus.size(), options.batch, rng)) images.push_back(&corpus[i].image);
    nn::zero_grads(params);
    auto [rec, kl] = vae.accumulate_gradients(nn::images_to_tensor(images), rng, kl_weight);
    opt.clip_grad_norm(1.0);
    opt.set_lr(lr_at(options, step));
    opt.step();
    const double loss = rec + kl_weight * kl;
    report.losses.push_back(loss);
    if (options.on_step) options.on_step(step, loss);
  }
  calibrate_latent_scale(vae, corpus);
  return report;
}

void calibrate_latent_scale(Vae& vae, const Corpus& corpus, int max_items) {
  require_corpus(corpus);
  vae.set_latent_scale(1.0f);
  double sum = 0, sq = 0;
  std::size_t count = 0;
  const int n = std::min<int>(max_items, static_cast<int>(corpus.size()));
  for (int start = 0; start < n; start += 32) {
    std::vector<const RgbImage*> images;
    for (int i = start; i < std::min(n, start + 32); ++i) images.push_back(&corpus[i].image);
    for (float v : vae.encode(nn::images_to_tensor(images)).data) {
      sum += v;
      sq += static_cast<double>(v) * v;
      ++count;
    }
  }
  const double mean = sum / count;
  const double sd = std::sqrt(std::max(1e-12, sq / count - mean * mean));
  vae.set_latent_scale(static_cast<float>(1.0 / sd));
}

std::vector<Latent> encode_corpus(const Vae& vae, const Corpus& corpus) {
  std::vector<Latent> out;
  out.reserve(corpus.size());
  for (std::size_t start = 0; start < corpus.size(); start += 32) {
    std::vector<const RgbImage*> images;
    for (std::size_t i = start; i < std::min(corpus.size(), start + 32); ++i) images.push_back(&corpus[i].image);
    const auto z = vae.encode(nn::images_to_tensor(images));
    for (int i = 0; i < z.n; ++i) {
      Latent one(1, z.c, z.h, z.w);
      std::copy(z.sample(i), z.sample(i) + z.sample_size(), one.data.begin());
      out.push_back(std::move(one));
    }
  }
  return out;
}

TrainReport train_denoiser(Denoiser& model, const Vae& vae, const Corpus& corpus, const TrainOptions& options,
                           double cond_dropout) {
  require_corpus(corpus);
  require_options(options);
  const auto latents = encode_corpus(vae, corpus);
  const auto& sched = model.schedule();
  auto rng = make_rng(options.seed, 0x7464656e);
  std::uniform_int_distribution<int> pick_t(1, sched.T);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  auto params = model.params();
  nn::Adam<float> opt(params, options.lr);
  const GrayImage blank(kImageSize, kImageSize, 0);
  TrainReport report;
  for (int step = 0; step < options.steps; ++step) {
    const auto idx = draw_batch(corpus.size(), options.batch, rng);
    Latent x0(options.batch, kLatentChannels, kLatentSize, kLatentSize);
    std::vector<int> ts;
    std::vector<const GrayImage*> chars, regions;
    std::vector<int> styles;
    for (int b = 0; b < options.batch; ++b) {
      const auto& item = corpus[idx[b]];
      std::copy(latents[idx[b]].data.begin(), latents[idx[b]].data.end(), x0.sample(b));
      ts.push_back(pick_t(rng));
      const bool drop = coin(rng) < cond_dropout;
      chars.push_back(drop ? &blank : &item.char_map);
      regions.push_back(drop ? &blank : &item.region);
      styles.push_back(style_token(item.prose));
    }
    auto eps = normal_like<float>(x0.n, x0.c, x0.h, x0.w, rng);
    Latent xt(x0.n, x0.c, x0.h, x0.w);
    for (int b = 0; b < options.batch; ++b) {
      const double a = std::sqrt(sched.alpha_bar[ts[b]]), s = std::sqrt(1.0 - sched.alpha_bar[ts[b]]);
      for (std::size_t k = 0; k < x0.sample_size(); ++k) {
        xt.sample(b)[k] = static_cast<float>(a * x0.sample(b)[k] + s * eps.sample(b)[k]);
      }
    }
    nn::zero_grads(params);
    const double loss = model.accumulate_gradients(xt, ts, make_cond(chars, regions, styles), eps);
    opt.clip_grad_norm(1.0);
    opt.set_lr(lr_at(options, step));
    opt.step();
    report.losses.push_back(loss);
    if (options.on_step) options.on_step(step, loss);
  }
  return report;
}

}  // namespace customtext::diffusion
