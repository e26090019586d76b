#include <cmath>

#include "customtext/diffusion.hpp"
#include "customtext/rng.hpp"

namespace customtext::diffusion {

namespace {

using nn::Conv2d;
using nn::Init;
using nn::Tensor;

void require_finite(const Tensor<float>& t, const char* what) {
  for (float v : t.data) {
    if (!std::isfinite(v)) throw ContractError(std::string(what) + " contains non-finite values");
  }
}

}  // namespace

Vae::Vae(std::uint64_t seed) {
  auto rng = make_rng(seed, 0x7661);
  e1_ = Conv2d<float>("vae.enc1", 3, 32, 3, 1, Init::Default, rng);
  e2_ = Conv2d<float>("vae.enc2", 32, 64, 3, 2, Init::Default, rng);
  e3_ = Conv2d<float>("vae.enc3", 64, 64, 3, 2, Init::Default, rng);
  e4_ = Conv2d<float>("vae.enc4", 64, 2 * kLatentChannels, 3, 1, Init::Default, rng);
  d1_ = Conv2d<float>("vae.dec1", kLatentChannels, 64, 3, 1, Init::Default, rng);
  d2_ = Conv2d<float>("vae.dec2", 64, 64, 3, 1, Init::Default, rng);
  d3_ = Conv2d<float>("vae.dec3", 64, 32, 3, 1, Init::Default, rng);
  d4_ = Conv2d<float>("vae.dec4", 32, 32, 3, 1, Init::Default, rng);
  d5_ = Conv2d<float>("vae.dec5", 32, 32, 3, 1, Init::Default, rng);
  d6_ = Conv2d<float>("vae.dec6", 32, 3, 3, 1, Init::Default, rng);
}

Latent Vae::encode(const Tensor<float>& images) const {
  if (images.c != 3 || images.h != kImageSize || images.w != kImageSize) {
    throw ContractError("vae_encode expects (n, 3, 64, 64)");
  }
  require_finite(images, "vae_encode input");
  using Act = nn::SiLU<float>;
  auto h = Act::apply(e1_.infer(images));
  h = Act::apply(e2_.infer(h));
  h = Act::apply(e3_.infer(h));
  auto mu = nn::slice_channels(e4_.infer(h), 0, kLatentChannels);
  for (auto& v : mu.data) v *= latent_scale_;
  return mu;
}

Tensor<float> Vae::decode(const Latent& z) const {
  if (z.c != kLatentChannels || z.h != kLatentSize || z.w != kLatentSize) {
    throw ContractError("vae_decode expects (n, 4, 16, 16)");
  }
  require_finite(z, "vae_decode input");
  using Act = nn::SiLU<float>;
  Tensor<float> u = z;
  for (auto& v : u.data) v /= latent_scale_;
  auto g = Act::apply(d1_.infer(u));
  g = Act::apply(d2_.infer(g));
  g = nn::upsample_nearest(g, 2);
  g = Act::apply(d3_.infer(g));
  g = Act::apply(d4_.infer(g));
  g = nn::upsample_nearest(g, 2);
  g = Act::apply(d5_.infer(g));
  return d6_.infer(g);
}

std::pair<double, double> Vae::accumulate_gradients(const Tensor<float>& x, std::mt19937_64& rng, double kl_weight) {
  auto h = ea_[0].forward(e1_.forward(x, true), true);
  h = ea_[1].forward(e2_.forward(h, true), true);
  h = ea_[2].forward(e3_.forward(h, true), true);
  auto stats = e4_.forward(h, true);
  auto mu = nn::slice_channels(stats, 0, kLatentChannels);
  auto logvar = nn::slice_channels(stats, kLatentChannels, kLatentChannels);
  auto eps = normal_like<float>(mu.n, mu.c, mu.h, mu.w, rng);
  Tensor<float> z(mu.n, mu.c, mu.h, mu.w);
  for (std::size_t i = 0; i < z.data.size(); ++i) z.data[i] = mu.data[i] + std::exp(0.5f * logvar.data[i]) * eps.data[i];

  auto g = da_[0].forward(d1_.forward(z, true), true);
  g = da_[1].forward(d2_.forward(g, true), true);
  g = nn::upsample_nearest(g, 2);
  g = da_[2].forward(d3_.forward(g, true), true);
  g = da_[3].forward(d4_.forward(g, true), true);
  g = nn::upsample_nearest(g, 2);
  g = da_[4].forward(d5_.forward(g, true), true);
  auto xr = d6_.forward(g, true);

  const double n_pix = static_cast<double>(x.size());
  const double n_lat = static_cast<double>(mu.size());
  double rec = 0;
  Tensor<float> dxr(xr.n, xr.c, xr.h, xr.w);
  for (std::size_t i = 0; i < xr.data.size(); ++i) {
    const double d = static_cast<double>(xr.data[i]) - x.data[i];
    rec += d * d;
    dxr.data[i] = static_cast<float>(2.0 * d / n_pix);
  }
  rec /= n_pix;

  auto dg = d6_.backward(dxr);
  dg = d5_.backward(da_[4].backward(dg));
  dg = nn::upsample_nearest_backward(dg, 2);
  dg = d4_.backward(da_[3].backward(dg));
  dg = d3_.backward(da_[2].backward(dg));
  dg = nn::upsample_nearest_backward(dg, 2);
  dg = d2_.backward(da_[1].backward(dg));
  auto dz = d1_.backward(da_[0].backward(dg));

  double kl = 0;
  Tensor<float> dstats(stats.n, stats.c, stats.h, stats.w);
  for (int i = 0; i < mu.n; ++i) {
    for (int c = 0; c < kLatentChannels; ++c) {
      for (int p = 0; p < static_cast<int>(mu.plane()); ++p) {
        const std::size_t k = (static_cast<std::size_t>(i) * kLatentChannels + c) * mu.plane() + p;
        const double m = mu.data[k], lv = logvar.data[k], e = std::exp(lv);
        kl += -0.5 * (1.0 + lv - m * m - e);
        const double sd = std::exp(0.5 * lv);
        const double dm = dz.data[k] + kl_weight * m / n_lat;
        const double dl = dz.data[k] * eps.data[k] * 0.5 * sd + kl_weight * 0.5 * (e - 1.0) / n_lat;
        dstats.data[(static_cast<std::size_t>(i) * stats.c + c) * mu.plane() + p] = static_cast<float>(dm);
        dstats.data[(static_cast<std::size_t>(i) * stats.c + kLatentChannels + c) * mu.plane() + p] =
            static_cast<float>(dl);
      }
    }
  }
  kl /= n_lat;

  auto dh = e4_.backward(dstats);
  dh = e3_.backward(ea_[2].backward(dh));
  dh = e2_.backward(ea_[1].backward(dh));
  e1_.backward(ea_[0].backward(dh), false);
  return {rec, kl};
}

nn::ParamList<float> Vae::params() {
  nn::ParamList<float> out;
  for (auto* c : {&e1_, &e2_, &e3_, &e4_, &d1_, &d2_, &d3_, &d4_, &d5_, &d6_}) c->collect(out);
  return out;
}

std::string Vae::checksum() const { return ckpt::param_checksum(const_cast<Vae*>(this)->params()); }

ckpt::Checkpoint Vae::to_checkpoint() const {
  ckpt::Checkpoint c;
  c.tag = "vae";
  c.meta = {{"image", {3, kImageSize, kImageSize}},
            {"latent", {kLatentChannels, kLatentSize, kLatentSize}},
            {"latent_scale", latent_scale_}};
  ckpt::put_params(c, const_cast<Vae*>(this)->params());
  return c;
}

Vae Vae::from_checkpoint(const ckpt::Checkpoint& c) {
  if (c.tag != "vae") throw FormatError("expected a 'vae' checkpoint, got '" + c.tag + "'");
  Vae vae(0);
  ckpt::take_params(c, vae.params());
  try {
    vae.latent_scale_ = c.meta.at("latent_scale").get<float>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("vae metadata: ") + e.what());
  }
  return vae;
}

}  // namespace customtext::diffusion
