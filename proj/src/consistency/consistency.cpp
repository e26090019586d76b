#include "customtext/consistency.hpp"

#include <cmath>
#include <numbers>

#include "customtext/glyphcore.hpp"
#include "customtext/imagetensor.hpp"
#include "customtext/rng.hpp"

namespace customtext::consistency {

void Geometry::validate() const {
  if (image_c <= 0 || latent_c <= 0 || c1 <= 0 || c2 <= 0 || mask_dim <= 0 || factor <= 0) {
    throw ContractError("consistency geometry: channel counts must be positive");
  }
  if (height <= 0 || width <= 0 || height % 2 || width % 2 || height % factor || width % factor) {
    throw ContractError("consistency geometry: image size must be even and divisible by the latent factor");
  }
}

nlohmann::json Geometry::to_json() const {
  return {{"image_c", image_c}, {"height", height}, {"width", width}, {"latent_c", latent_c},
          {"factor", factor},   {"c1", c1},         {"c2", c2},       {"mask_dim", mask_dim}};
}

Geometry Geometry::from_json(const nlohmann::json& doc) {
  Geometry g;
  try {
    g.image_c = doc.at("image_c").get<int>();
    g.height = doc.at("height").get<int>();
    g.width = doc.at("width").get<int>();
    g.latent_c = doc.at("latent_c").get<int>();
    g.factor = doc.at("factor").get<int>();
    g.c1 = doc.at("c1").get<int>();
    g.c2 = doc.at("c2").get<int>();
    g.mask_dim = doc.at("mask_dim").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("consistency geometry: ") + e.what());
  }
  g.validate();
  return g;
}

TimeGrid make_time_grid(int n, double t_min, double t_max, double rho) {
  if (n < 2 || !(t_min > 0) || !(t_max > t_min) || !(rho > 0)) throw DomainError("invalid time grid parameters");
  TimeGrid grid;
  grid.t.resize(n);
  const double a = std::pow(t_min, 1.0 / rho), b = std::pow(t_max, 1.0 / rho);
  for (int i = 0; i < n; ++i) grid.t[i] = std::pow(a + static_cast<double>(i) / (n - 1) * (b - a), rho);
  grid.t.front() = t_min;
  grid.t.back() = t_max;
  return grid;
}

double c_skip(double t, double t_min) {
  const double s2 = kSigmaData * kSigmaData;
  return s2 / ((t - t_min) * (t - t_min) + s2);
}

double c_out(double t, double t_min) {
  return kSigmaData * (t - t_min) / std::sqrt(kSigmaData * kSigmaData + t * t);
}

double c_in(double t) { return 1.0 / std::sqrt(t * t + kSigmaData * kSigmaData); }

template <typename T>
Backbone<T>::Backbone(const Geometry& g, std::uint64_t seed) : geo(g) {
  geo.validate();
  auto rng = make_rng(seed, 0x636d6262);
  using nn::Init;
  in = nn::Conv2d<T>("cmb.in", geo.input_c(), geo.c1, 3, 1, Init::Default, rng);
  down = nn::Conv2d<T>("cmb.down", geo.c1, geo.c2, 3, 2, Init::Default, rng);
  mid = nn::Conv2d<T>("cmb.mid", geo.c2, geo.c2, 3, 1, Init::Default, rng);
  up = nn::Conv2d<T>("cmb.up", geo.c2, geo.c1, 3, 1, Init::Default, rng);
  refine = nn::Conv2d<T>("cmb.refine", geo.c1, geo.c1, 3, 1, Init::Default, rng);
  out = nn::Conv2d<T>("cmb.out", geo.c1, geo.image_c, 3, 1, Init::Default, rng);
}

template <typename T>
nn::ParamList<T> Backbone<T>::params() {
  nn::ParamList<T> p;
  for (auto* c : {&in, &down, &mid, &up, &refine, &out}) c->collect(p);
  return p;
}

template <typename T>
std::string Backbone<T>::checksum() const {
  return ckpt::param_checksum(const_cast<Backbone*>(this)->params());
}

template <typename T>
Adapter<T>::Adapter(const Geometry& g, std::uint64_t seed) : geo(g) {
  geo.validate();
  auto rng = make_rng(seed, 0x636d6164);
  using nn::Init;
  embed = nn::Embedding<T>("cma.embed", glyph::kCharCount + 1, geo.mask_dim, rng);
  enc_full = nn::Conv2d<T>("cma.enc_full", geo.input_c() + geo.mask_dim, geo.c1, 3, 1, Init::Default, rng);
  enc_half = nn::Conv2d<T>("cma.enc_half", geo.c1, geo.c2, 3, 2, Init::Default, rng);
  zero_full = nn::Conv2d<T>("cma.zero_full", geo.c1, geo.c1, 1, 1, Init::Zero, rng);
  zero_half = nn::Conv2d<T>("cma.zero_half", geo.c2, geo.c2, 1, 1, Init::Zero, rng);
}

template <typename T>
nn::ParamList<T> Adapter<T>::params() {
  nn::ParamList<T> p;
  embed.collect(p);
  for (auto* c : {&enc_full, &enc_half, &zero_full, &zero_half}) c->collect(p);
  return p;
}

template <typename T>
std::string Adapter<T>::checksum() const {
  return ckpt::param_checksum(const_cast<Adapter*>(this)->params());
}

namespace {

void require_times(const std::vector<double>& t, int n) {
  if (static_cast<int>(t.size()) != n) throw ContractError("one noise level per sample required");
  for (double v : t)
    if (!(v > 0) || !std::isfinite(v)) throw DomainError("noise levels must be positive and finite");
}

// Dispatches to a recording forward on mutable layers and to infer() on const ones.
template <typename Layer, typename X>
auto run(Layer& layer, const X& x, bool record) {
  if constexpr (std::is_const_v<Layer>) {
    return layer.infer(x);
  } else {
    return layer.forward(x, record);
  }
}

template <typename T, typename Act>
nn::Tensor<T> act(Act& a, const nn::Tensor<T>& x, bool record) {
  if constexpr (std::is_const_v<Act>) {
    return std::remove_const_t<Act>::apply(x);
  } else {
    return a.forward(x, record);
  }
}

// Feature-space pass of the backbone; B is Backbone<T> or const Backbone<T>.
template <typename T, typename B>
nn::Tensor<T> backbone_features(B& b, const nn::Tensor<T>& x_in, const Taps<T>* taps, bool record) {
  auto h1 = act<T>(b.a_in, run(b.in, x_in, record), record);
  auto h2 = act<T>(b.a_down, run(b.down, h1, record), record);
  auto h3 = act<T>(b.a_mid, run(b.mid, h2, record), record);
  if (taps) nn::add_inplace(h3, taps->half);
  auto h4 = act<T>(b.a_up, run(b.up, nn::upsample_nearest(h3, 2), record), record);
  nn::add_inplace(h4, h1);
  if (taps) nn::add_inplace(h4, taps->full);
  auto h5 = act<T>(b.a_refine, run(b.refine, h4, record), record);
  return run(b.out, h5, record);
}

template <typename T>
void backbone_backward(Backbone<T>& b, const nn::Tensor<T>& dF, Taps<T>* dtaps) {
  auto dh4 = b.refine.backward(b.a_refine.backward(b.out.backward(dF)));
  if (dtaps) dtaps->full = dh4;
  auto dh3 = nn::upsample_nearest_backward(b.up.backward(b.a_up.backward(dh4)), 2);
  if (dtaps) dtaps->half = dh3;
  // The stem only matters when its parameters are trainable.
  if (b.in.weight.frozen && b.down.weight.frozen) {
    b.mid.backward(b.a_mid.backward(dh3), false);
    return;
  }
  auto dh2 = b.mid.backward(b.a_mid.backward(dh3));
  auto dh1 = b.down.backward(b.a_down.backward(dh2));
  nn::add_inplace(dh1, dh4);
  b.in.backward(b.a_in.backward(dh1), false);
}

template <typename T, typename A>
Taps<T> adapter_features(A& a, const nn::Tensor<T>& x_in, const nn::IndexMap& mask, bool record) {
  const auto e = run(a.embed, mask, record);
  const auto g1 = act<T>(a.a_full, run(a.enc_full, nn::concat_channels<T>({&x_in, &e}), record), record);
  const auto g2 = act<T>(a.a_half, run(a.enc_half, g1, record), record);
  return {run(a.zero_half, g2, record), run(a.zero_full, g1, record)};
}

template <typename T>
void adapter_backward(Adapter<T>& a, const Taps<T>& dtaps) {
  auto dg2 = a.a_half.backward(a.zero_half.backward(dtaps.half));
  auto dg1 = a.zero_full.backward(dtaps.full);
  nn::add_inplace(dg1, a.enc_half.backward(dg2));
  const auto din = a.enc_full.backward(a.a_full.backward(dg1));
  a.embed.backward(nn::slice_channels(din, a.geo.input_c(), a.geo.mask_dim));
}

template <typename T>
void require_mask(const Geometry& g, const nn::IndexMap& mask, int n) {
  if (mask.n != n || mask.h != g.height || mask.w != g.width) throw ContractError("character mask shape mismatch");
}

// c_skip z + c_out F per sample.
template <typename T>
nn::Tensor<T> boundary_output(const nn::Tensor<T>& z, const nn::Tensor<T>& F, const std::vector<double>& t,
                              double t_min) {
  nn::require_same_shape(z, F, "consistency output");
  nn::Tensor<T> out(z.n, z.c, z.h, z.w);
  const std::size_t per = z.sample_size();
  for (int i = 0; i < z.n; ++i) {
    const double cs = c_skip(t[i], t_min), co = c_out(t[i], t_min);
    for (std::size_t k = 0; k < per; ++k) {
      const std::size_t j = per * i + k;
      out.data[j] = static_cast<T>(cs * static_cast<double>(z.data[j]) + co * static_cast<double>(F.data[j]));
    }
  }
  return out;
}

template <typename T>
nn::Tensor<T> shifted(const nn::Tensor<T>& x, const nn::Tensor<T>& eps, const std::vector<double>& t) {
  nn::Tensor<T> z(x.n, x.c, x.h, x.w);
  const std::size_t per = x.sample_size();
  for (int i = 0; i < x.n; ++i)
    for (std::size_t k = 0; k < per; ++k) {
      const std::size_t j = per * i + k;
      z.data[j] = static_cast<T>(static_cast<double>(x.data[j]) + t[i] * static_cast<double>(eps.data[j]));
    }
  return z;
}

}  // namespace

template <typename T>
nn::Tensor<T> backbone_input(const Geometry& g, const nn::Tensor<T>& z, const std::vector<double>& t,
                             const nn::Tensor<T>& l) {
  if (z.c != g.image_c || z.h != g.height || z.w != g.width) throw ContractError("noisy image shape mismatch");
  if (l.n != z.n || l.c != g.latent_c || l.h * g.factor != g.height || l.w * g.factor != g.width) {
    throw ContractError("conditioning latent shape mismatch");
  }
  require_times(t, z.n);
  nn::Tensor<T> scaled(z.n, z.c, z.h, z.w);
  nn::Tensor<T> level(z.n, 1, z.h, z.w);
  const std::size_t per = z.sample_size();
  for (int i = 0; i < z.n; ++i) {
    const double s = c_in(t[i]);
    for (std::size_t k = 0; k < per; ++k) scaled.data[per * i + k] = static_cast<T>(s * z.data[per * i + k]);
    std::fill(level.sample(i), level.sample(i) + level.sample_size(), static_cast<T>(std::log(t[i]) / 4.0));
  }
  const auto lu = nn::upsample_nearest(l, g.factor);
  return nn::concat_channels<T>({&scaled, &lu, &level});
}

template <typename T>
nn::Tensor<T> control_forward(const Backbone<T>& backbone, const Adapter<T>* adapter, const nn::Tensor<T>& z,
                              const std::vector<double>& t, const nn::Tensor<T>& l, const nn::IndexMap& mask,
                              double t_min) {
  const auto x_in = backbone_input(backbone.geo, z, t, l);
  nn::Tensor<T> F;
  if (adapter) {
    require_mask<T>(backbone.geo, mask, z.n);
    const auto taps = adapter_features<T>(*adapter, x_in, mask, false);
    F = backbone_features<T>(backbone, x_in, &taps, false);
  } else {
    F = backbone_features<T>(backbone, x_in, nullptr, false);
  }
  return boundary_output(z, F, t, t_min);
}

template <typename T>
double consistency_distance(const nn::Tensor<T>& a, const nn::Tensor<T>& b, const std::vector<double>& weights) {
  nn::require_same_shape(a, b, "consistency_distance");
  if (static_cast<int>(weights.size()) != a.n) throw ContractError("one weight per sample required");
  if (a.n == 0) return 0.0;
  double total = 0;
  const std::size_t per = a.sample_size();
  for (int i = 0; i < a.n; ++i) {
    double s = 0;
    for (std::size_t k = 0; k < per; ++k) {
      const double d = static_cast<double>(a.data[per * i + k]) - static_cast<double>(b.data[per * i + k]);
      s += d * d;
    }
    total += weights[i] * s;
  }
  return total / a.n;
}

template <typename T>
double consistency_loss(Backbone<T>& online_backbone, Adapter<T>* online_adapter, const Backbone<T>& target_backbone,
                        const Adapter<T>* target_adapter, const Batch<T>& batch, const std::vector<int>& n,
                        const nn::Tensor<T>& eps, const TimeGrid& grid, const LambdaFn& lambda, bool accumulate) {
  const int count = batch.x.n;
  if (static_cast<int>(n.size()) != count) throw ContractError("one grid index per sample required");
  for (int k : n)
    if (k < 1 || k >= grid.size()) throw DomainError("grid index n must satisfy 1 <= n < N");
  nn::require_same_shape(batch.x, eps, "consistency_loss noise");
  std::vector<double> t_lo(count), t_hi(count), w(count);
  for (int i = 0; i < count; ++i) {
    t_lo[i] = grid.at(n[i]);
    t_hi[i] = grid.at(n[i] + 1);
    w[i] = lambda ? lambda(t_lo[i]) : 1.0;
  }
  const double t_min = grid.min();

  const auto z_lo = shifted(batch.x, eps, t_lo);
  const auto target = control_forward(target_backbone, target_adapter, z_lo, t_lo, batch.l, batch.mask, t_min);

  const auto z_hi = shifted(batch.x, eps, t_hi);
  const auto x_in = backbone_input(online_backbone.geo, z_hi, t_hi, batch.l);
  Taps<T> taps;
  if (online_adapter) {
    require_mask<T>(online_backbone.geo, batch.mask, count);
    taps = adapter_features<T>(*online_adapter, x_in, batch.mask, accumulate);
  }
  const auto F = backbone_features<T>(online_backbone, x_in, online_adapter ? &taps : nullptr, accumulate);
  const auto online = boundary_output(z_hi, F, t_hi, t_min);
  const double loss = consistency_distance(online, target, w);
  if (!accumulate) return loss;

  nn::Tensor<T> dF(F.n, F.c, F.h, F.w);
  const std::size_t per = F.sample_size();
  for (int i = 0; i < count; ++i) {
    const double g = 2.0 * w[i] * c_out(t_hi[i], t_min) / count;
    for (std::size_t k = 0; k < per; ++k) {
      const std::size_t j = per * i + k;
      dF.data[j] = static_cast<T>(g * (static_cast<double>(online.data[j]) - static_cast<double>(target.data[j])));
    }
  }
  if (online_adapter) {
    Taps<T> dtaps;
    backbone_backward(online_backbone, dF, &dtaps);
    adapter_backward(*online_adapter, dtaps);
  } else {
    backbone_backward<T>(online_backbone, dF, nullptr);
  }
  return loss;
}

nn::Tensor<float> decode_consistent(const Backbone<float>& backbone, const Adapter<float>* adapter,
                                    const nn::Tensor<float>& l, const nn::IndexMap& mask, int n_steps,
                                    std::uint64_t seed, const TimeGrid& grid) {
  if (n_steps < 1) throw DomainError("decode_consistent needs at least one step");
  const auto& g = backbone.geo;
  auto rng = make_rng(seed, 0x636d6463);
  const int count = l.n;
  const int levels = grid.size();
  auto noise = [&] { return normal_like<float>(count, g.image_c, g.height, g.width, rng); };

  std::vector<double> t(count, grid.max());
  auto x = control_forward(backbone, adapter, shifted(nn::Tensor<float>(count, g.image_c, g.height, g.width), noise(), t),
                           t, l, mask, grid.min());
  for (int k = 1; k < n_steps; ++k) {
    const double pos = levels - static_cast<double>(k) * (levels - 1) / n_steps;
    const int idx = std::clamp(static_cast<int>(std::lround(pos)), 1, levels);
    const double level = grid.at(idx);
    const double spread = std::sqrt(std::max(0.0, level * level - grid.min() * grid.min()));
    std::fill(t.begin(), t.end(), spread);
    const auto z = shifted(x, noise(), t);
    std::fill(t.begin(), t.end(), level);
    x = control_forward(backbone, adapter, z, t, l, mask, grid.min());
  }
  return x;
}

ckpt::Checkpoint to_checkpoint(const Backbone<float>& backbone) {
  ckpt::Checkpoint c;
  c.tag = "cm_backbone";
  c.meta = {{"geometry", backbone.geo.to_json()}, {"sigma_data", kSigmaData}};
  ckpt::put_params(c, const_cast<Backbone<float>&>(backbone).params());
  return c;
}

ckpt::Checkpoint to_checkpoint(const Adapter<float>& adapter) {
  ckpt::Checkpoint c;
  c.tag = "cm_adapter";
  c.meta = {{"geometry", adapter.geo.to_json()}};
  ckpt::put_params(c, const_cast<Adapter<float>&>(adapter).params());
  return c;
}

namespace {

Geometry geometry_of(const ckpt::Checkpoint& c, const std::string& tag) {
  if (c.tag != tag) throw FormatError("expected a '" + tag + "' checkpoint, got '" + c.tag + "'");
  if (!c.meta.contains("geometry")) throw FormatError(tag + " metadata: missing geometry");
  return Geometry::from_json(c.meta["geometry"]);
}

}  // namespace

Backbone<float> backbone_from_checkpoint(const ckpt::Checkpoint& c) {
  Backbone<float> b(geometry_of(c, "cm_backbone"), 0);
  ckpt::take_params(c, b.params());
  return b;
}

Adapter<float> adapter_from_checkpoint(const ckpt::Checkpoint& c) {
  Adapter<float> a(geometry_of(c, "cm_adapter"), 0);
  ckpt::take_params(c, a.params());
  return a;
}

Samples make_samples(const diffusion::Vae& vae, const Corpus& corpus) {
  Samples s;
  s.latents = diffusion::encode_corpus(vae, corpus);
  for (const auto& item : corpus) {
    if (item.char_map.width != item.image.width || item.char_map.height != item.image.height) {
      throw ContractError("corpus character mask does not match its image");
    }
    s.images.push_back(nn::image_to_tensor(item.image));
    s.masks.push_back(nn::index_maps({&item.char_map}));
  }
  return s;
}

namespace {

// Restores frozen flags on scope exit.
class FreezeGuard {
 public:
  explicit FreezeGuard(nn::ParamList<float> params) : params_(std::move(params)) {
    for (auto* p : params_) saved_.push_back(p->frozen);
    nn::set_frozen(params_, true);
  }
  ~FreezeGuard() {
    for (std::size_t k = 0; k < params_.size(); ++k) params_[k]->frozen = saved_[k];
  }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  nn::ParamList<float> params_;
  std::vector<bool> saved_;
};

double lr_at(const diffusion::TrainOptions& o, int step) {
  if (o.steps <= 1) return o.lr;
  const double p = static_cast<double>(step) / (o.steps - 1);
  return o.lr * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * p)));
}

diffusion::TrainReport train_loop(Backbone<float>& backbone, Adapter<float>* adapter, const Samples& samples,
                                  const diffusion::TrainOptions& options, const TimeGrid& grid,
                                  std::uint64_t stream) {
  if (samples.images.empty()) throw ContractError("training corpus is empty");
  if (samples.latents.size() != samples.images.size() || samples.masks.size() != samples.images.size()) {
    throw ContractError("training samples are inconsistent");
  }
  if (options.steps < 0 || options.batch <= 0 || !(options.lr > 0)) throw ContractError("invalid training options");
  if (grid.size() < 2) throw DomainError("time grid needs at least two levels");
  const auto& g = backbone.geo;
  auto rng = make_rng(options.seed, stream);
  std::uniform_int_distribution<std::size_t> pick(0, samples.images.size() - 1);
  std::uniform_int_distribution<int> pick_n(1, grid.size() - 1);
  auto params = adapter ? adapter->params() : backbone.params();
  nn::Adam<float> opt(params, options.lr);
  diffusion::TrainReport report;
  for (int step = 0; step < options.steps; ++step) {
    Batch<float> batch{nn::Tensor<float>(options.batch, g.image_c, g.height, g.width),
                       nn::Tensor<float>(options.batch, g.latent_c, g.height / g.factor, g.width / g.factor),
                       nn::IndexMap(options.batch, g.height, g.width)};
    std::vector<int> n(options.batch);
    for (int b = 0; b < options.batch; ++b) {
      const auto k = pick(rng);
      const auto& img = samples.images[k];
      const auto& lat = samples.latents[k];
      const auto& m = samples.masks[k];
      if (img.n != 1 || img.c != g.image_c || img.h != g.height || img.w != g.width || lat.sample_size() != batch.l.sample_size() ||
          m.data.size() != static_cast<std::size_t>(g.height) * g.width) {
        throw ContractError("training sample does not match the decoder geometry");
      }
      std::copy(img.data.begin(), img.data.end(), batch.x.sample(b));
      std::copy(lat.data.begin(), lat.data.end(), batch.l.sample(b));
      std::copy(m.data.begin(), m.data.end(), batch.mask.data.begin() + static_cast<std::ptrdiff_t>(m.data.size()) * b);
      n[b] = pick_n(rng);
    }
    const auto eps = normal_like<float>(options.batch, g.image_c, g.height, g.width, rng);
    nn::zero_grads(params);
    opt.set_lr(lr_at(options, step));
    const double loss = consistency_loss(backbone, adapter, backbone, adapter, batch, n, eps, grid, nullptr, true);
    opt.step();
    report.losses.push_back(loss);
    if (options.on_step) options.on_step(step, loss);
  }
  return report;
}

}  // namespace

diffusion::TrainReport pretrain_backbone(Backbone<float>& backbone, const Samples& samples,
                                         const diffusion::TrainOptions& options, const TimeGrid& grid) {
  return train_loop(backbone, nullptr, samples, options, grid, 0x636d7062);
}

diffusion::TrainReport train_adapter(Backbone<float>& backbone, Adapter<float>& adapter, const Samples& samples,
                                     const diffusion::TrainOptions& options, const TimeGrid& grid) {
  FreezeGuard freeze(backbone.params());
  return train_loop(backbone, &adapter, samples, options, grid, 0x636d6174);
}

template struct Backbone<float>;
template struct Backbone<double>;
template struct Adapter<float>;
template struct Adapter<double>;
template nn::Tensor<float> backbone_input(const Geometry&, const nn::Tensor<float>&, const std::vector<double>&,
                                          const nn::Tensor<float>&);
template nn::Tensor<double> backbone_input(const Geometry&, const nn::Tensor<double>&, const std::vector<double>&,
                                           const nn::Tensor<double>&);
template nn::Tensor<float> control_forward(const Backbone<float>&, const Adapter<float>*, const nn::Tensor<float>&,
                                           const std::vector<double>&, const nn::Tensor<float>&, const nn::IndexMap&,
                                           double);
template nn::Tensor<double> control_forward(const Backbone<double>&, const Adapter<double>*, const nn::Tensor<double>&,
                                            const std::vector<double>&, const nn::Tensor<double>&,
                                            const nn::IndexMap&, double);
template double consistency_distance(const nn::Tensor<float>&, const nn::Tensor<float>&, const std::vector<double>&);
template double consistency_distance(const nn::Tensor<double>&, const nn::Tensor<double>&, const std::vector<double>&);
template double consistency_loss(Backbone<float>&, Adapter<float>*, const Backbone<float>&, const Adapter<float>*,
                                 const Batch<float>&, const std::vector<int>&, const nn::Tensor<float>&,
                                 const TimeGrid&, const LambdaFn&, bool);
template double consistency_loss(Backbone<double>&, Adapter<double>*, const Backbone<double>&, const Adapter<double>*,
                                 const Batch<double>&, const std::vector<int>&, const nn::Tensor<double>&,
                                 const TimeGrid&, const LambdaFn&, bool);

}  // namespace customtext::consistency
