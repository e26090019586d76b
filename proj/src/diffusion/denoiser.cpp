#include <cmath>
#include <numbers>

#include "customtext/diffusion.hpp"
#include "customtext/glyphcore.hpp"
#include "customtext/imagetensor.hpp"
#include "customtext/io.hpp"
#include "customtext/rng.hpp"

namespace customtext::diffusion {

namespace {

using nn::Conv2d;
using nn::Init;
using nn::Tensor;

constexpr int kCharDim = 8;
constexpr int kStyleDim = 4;
constexpr double kTimeFreqs[] = {0.5, 2.0, 8.0};
constexpr int kTimeDim = 6;
constexpr int kInputChannels = kLatentChannels + kCharDim + 1 + kTimeDim + kStyleDim;

nn::IndexMap style_map(const std::vector<int>& style) {
  nn::IndexMap m(static_cast<int>(style.size()), kLatentSize, kLatentSize);
  for (int i = 0; i < m.n; ++i) {
    std::fill(m.data.begin() + static_cast<std::size_t>(i) * kLatentSize * kLatentSize,
              m.data.begin() + static_cast<std::size_t>(i + 1) * kLatentSize * kLatentSize,
              static_cast<std::uint8_t>(style[i]));
  }
  return m;
}

}  // namespace

int style_token(const std::string& prose) { return static_cast<int>(io::fnv1a64(prose) % kStyleTokens); }

DenoiserCond make_cond(const std::vector<const GrayImage*>& char_maps, const std::vector<const GrayImage*>& regions,
                       const std::vector<int>& styles) {
  if (char_maps.size() != regions.size() || char_maps.size() != styles.size()) {
    throw ContractError("conditioning batch sizes disagree");
  }
  return {nn::index_maps(char_maps), nn::masks_to_tensor(regions), styles};
}

Denoiser::Denoiser(const NoiseSchedule& sched, std::uint64_t seed, int width) : sched_(sched), width_(width) {
  sched_.validate();
  auto rng = make_rng(seed, 0x646e);
  char_emb_ = nn::Embedding<float>("den.char_emb", glyph::kCharCount + 1, kCharDim, rng);
  style_emb_ = nn::Embedding<float>("den.style_emb", kStyleTokens, kStyleDim, rng);
  c1_ = Conv2d<float>("den.conv1", kInputChannels, width, 3, 1, Init::Default, rng);
  c2_ = Conv2d<float>("den.conv2", width, width, 3, 2, Init::Default, rng);
  c3_ = Conv2d<float>("den.conv3", width, width, 3, 1, Init::Default, rng);
  c4_ = Conv2d<float>("den.conv4", width, width, 3, 1, Init::Default, rng);
  c5_ = Conv2d<float>("den.conv5", width, width, 3, 1, Init::Default, rng);
  c6_ = Conv2d<float>("den.conv6", width, kLatentChannels, 3, 1, Init::Default, rng);
}

Tensor<float> Denoiser::input_planes(const Latent& x_t, const std::vector<int>& t, const DenoiserCond& cond,
                                     const Tensor<float>& char_emb, const Tensor<float>& style_emb) const {
  const int n = x_t.n;
  if (x_t.c != kLatentChannels || x_t.h != kLatentSize || x_t.w != kLatentSize) {
    throw ContractError("denoiser expects (n, 4, 16, 16) latents");
  }
  if (static_cast<int>(t.size()) != n || cond.chars.n != n || cond.region.n != n ||
      static_cast<int>(cond.style.size()) != n) {
    throw ContractError("denoiser batch sizes disagree");
  }
  if (cond.chars.h != kImageSize || cond.chars.w != kImageSize || cond.region.h != kImageSize ||
      cond.region.w != kImageSize) {
    throw ContractError("denoiser conditioning must be 64x64");
  }
  auto chars = nn::avg_pool(char_emb, kLatentFactor);
  auto region = nn::avg_pool(cond.region, kLatentFactor);
  Tensor<float> time(n, kTimeDim, kLatentSize, kLatentSize);
  for (int i = 0; i < n; ++i) {
    if (t[i] < 0 || t[i] > sched_.T) throw DomainError("timestep out of range");
    const double u = static_cast<double>(t[i]) / sched_.T;
    for (int k = 0; k < 3; ++k) {
      const auto s = static_cast<float>(std::sin(std::numbers::pi * kTimeFreqs[k] * u));
      const auto c = static_cast<float>(std::cos(std::numbers::pi * kTimeFreqs[k] * u));
      std::fill(time.sample(i) + (2 * k) * time.plane(), time.sample(i) + (2 * k + 1) * time.plane(), s);
      std::fill(time.sample(i) + (2 * k + 1) * time.plane(), time.sample(i) + (2 * k + 2) * time.plane(), c);
    }
  }
  return nn::concat_channels<float>({&x_t, &chars, &region, &time, &style_emb});
}

Latent Denoiser::predict(const Latent& x_t, const std::vector<int>& t, const DenoiserCond& cond) const {
  using Act = nn::SiLU<float>;
  auto in = input_planes(x_t, t, cond, char_emb_.infer(cond.chars), style_emb_.infer(style_map(cond.style)));
  auto h1 = Act::apply(c1_.infer(in));
  auto h2 = Act::apply(c2_.infer(h1));
  auto h3 = Act::apply(c3_.infer(h2));
  auto u = nn::add(nn::upsample_nearest(h3, 2), h1);
  auto h4 = Act::apply(c4_.infer(u));
  auto h5 = Act::apply(c5_.infer(h4));
  return c6_.infer(h5);
}

double Denoiser::accumulate_gradients(const Latent& x_t, const std::vector<int>& t, const DenoiserCond& cond,
                                      const Latent& eps) {
  auto smap = style_map(cond.style);
  auto in = input_planes(x_t, t, cond, char_emb_.forward(cond.chars, true), style_emb_.forward(smap, true));
  auto h1 = a_[0].forward(c1_.forward(in, true), true);
  auto h2 = a_[1].forward(c2_.forward(h1, true), true);
  auto h3 = a_[2].forward(c3_.forward(h2, true), true);
  auto u = nn::add(nn::upsample_nearest(h3, 2), h1);
  auto h4 = a_[3].forward(c4_.forward(u, true), true);
  auto h5 = a_[4].forward(c5_.forward(h4, true), true);
  auto out = c6_.forward(h5, true);
  nn::require_same_shape(out, eps, "denoiser target");

  const double n = static_cast<double>(out.size());
  double loss = 0;
  Tensor<float> dout(out.n, out.c, out.h, out.w);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    const double d = static_cast<double>(out.data[i]) - eps.data[i];
    loss += d * d;
    dout.data[i] = static_cast<float>(2.0 * d / n);
  }

  auto d5 = c6_.backward(dout);
  auto d4 = c5_.backward(a_[4].backward(d5));
  auto du = c4_.backward(a_[3].backward(d4));
  auto dh3 = nn::upsample_nearest_backward(du, 2);
  auto dh2 = c3_.backward(a_[2].backward(dh3));
  auto dh1 = du;
  nn::add_inplace(dh1, c2_.backward(a_[1].backward(dh2)));
  auto din = c1_.backward(a_[0].backward(dh1));
  char_emb_.backward(nn::avg_pool_backward(nn::slice_channels(din, kLatentChannels, kCharDim), kLatentFactor));
  style_emb_.backward(nn::slice_channels(din, kInputChannels - kStyleDim, kStyleDim));
  return loss / n;
}

nn::ParamList<float> Denoiser::params() {
  nn::ParamList<float> out;
  char_emb_.collect(out);
  style_emb_.collect(out);
  for (auto* c : {&c1_, &c2_, &c3_, &c4_, &c5_, &c6_}) c->collect(out);
  return out;
}

std::string Denoiser::checksum() const { return ckpt::param_checksum(const_cast<Denoiser*>(this)->params()); }

ckpt::Checkpoint Denoiser::to_checkpoint() const {
  ckpt::Checkpoint c;
  c.tag = "denoiser";
  c.meta = {{"schedule", sched_.to_json()},
            {"width", width_},
            {"latent", {kLatentChannels, kLatentSize, kLatentSize}},
            {"inputs", {{"latent", kLatentChannels}, {"char_embedding", kCharDim}, {"region", 1},
                        {"time", kTimeDim}, {"style", kStyleDim}}}};
  ckpt::put_params(c, const_cast<Denoiser*>(this)->params());
  return c;
}

Denoiser Denoiser::from_checkpoint(const ckpt::Checkpoint& c) {
  if (c.tag != "denoiser") throw FormatError("expected a 'denoiser' checkpoint, got '" + c.tag + "'");
  int width = 0;
  NoiseSchedule sched;
  try {
    sched = NoiseSchedule::from_json(c.meta.at("schedule"));
    width = c.meta.at("width").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("denoiser metadata: ") + e.what());
  }
  Denoiser d(sched, 0, width);
  ckpt::take_params(c, d.params());
  return d;
}

}  // namespace customtext::diffusion
