#include <cmath>

#include "customtext/diffusion.hpp"

namespace customtext::diffusion {

void NoiseSchedule::validate() const {
  if (T <= 0) throw ContractError("schedule needs T >= 1");
  if (static_cast<int>(betas.size()) != T || static_cast<int>(alpha_bar.size()) != T + 1) {
    throw ContractError("schedule arrays do not match T");
  }
  if (alpha_bar[0] != 1.0) throw ContractError("alpha_bar[0] must be 1");
  for (int t = 1; t <= T; ++t) {
    if (!(betas[t - 1] > 0.0 && betas[t - 1] < 1.0)) throw ContractError("beta outside (0, 1)");
    if (t > 1 && betas[t - 1] < betas[t - 2]) throw ContractError("betas must be non-decreasing");
    if (!(alpha_bar[t] < alpha_bar[t - 1])) throw ContractError("alpha_bar must be strictly decreasing");
  }
  if (!(alpha_bar[T] > 0.0)) throw ContractError("alpha_bar[T] must be positive");
}

nlohmann::json NoiseSchedule::to_json() const { return {{"T", T}, {"betas", betas}}; }

NoiseSchedule NoiseSchedule::from_json(const nlohmann::json& doc) {
  try {
    auto sched = schedule_from_betas(doc.at("betas").get<std::vector<double>>());
    if (sched.T != doc.at("T").get<int>()) throw FormatError("schedule T disagrees with its betas");
    return sched;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("schedule document: ") + e.what());
  }
}

NoiseSchedule schedule_from_betas(std::vector<double> betas) {
  NoiseSchedule s;
  s.T = static_cast<int>(betas.size());
  s.betas = std::move(betas);
  s.alpha_bar.assign(s.T + 1, 1.0);
  for (int t = 1; t <= s.T; ++t) s.alpha_bar[t] = s.alpha_bar[t - 1] * (1.0 - s.betas[t - 1]);
  s.validate();
  return s;
}

NoiseSchedule make_schedule(int steps, int train_steps, double beta_start, double beta_end) {
  if (steps <= 0 || train_steps < steps || train_steps % steps != 0) {
    throw ContractError("train_steps must be a positive multiple of steps");
  }
  std::vector<double> cum(train_steps);
  double prod = 1.0;
  for (int i = 0; i < train_steps; ++i) {
    const double beta = train_steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / (train_steps - 1);
    prod *= 1.0 - beta;
    cum[i] = prod;
  }
  const int stride = train_steps / steps;
  std::vector<double> betas(steps);
  double prev = 1.0;
  for (int k = 1; k <= steps; ++k) {
    const double ab = cum[k * stride - 1];
    betas[k - 1] = 1.0 - ab / prev;
    prev = ab;
  }
  return schedule_from_betas(std::move(betas));
}

Latent forward_noise(const Latent& x0, int t, const Latent& eps, const NoiseSchedule& sched) {
  if (t < 0 || t > sched.T) {
    throw DomainError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(sched.T) + "]");
  }
  nn::require_same_shape(x0, eps, "forward_noise");
  const double a = std::sqrt(sched.alpha_bar[t]);
  const double b = std::sqrt(1.0 - sched.alpha_bar[t]);
  Latent out(x0.n, x0.c, x0.h, x0.w);
  for (std::size_t i = 0; i < x0.data.size(); ++i) {
    out.data[i] = static_cast<float>(a * x0.data[i] + b * eps.data[i]);
  }
  return out;
}

void BlendParams::validate() const {
  if (!(lambda_max >= 0.0 && lambda_max <= 1.0)) throw ContractError("lambda_max must lie in [0, 1]");
  if (!(gamma > 0.0)) throw ContractError("gamma must be positive");
  if (feather_radius_px < 0) throw ContractError("feather radius must be >= 0");
}

Grid<double> weight_support(const masks::CharacterMask& mask, int feather_radius_px, int latent_h, int latent_w) {
  if (latent_h <= 0 || latent_w <= 0 || mask.width() % latent_w || mask.height() % latent_h) {
    throw ContractError("character mask size is not a multiple of the latent size");
  }
  const auto feathered = masks::feather_region(mask, feather_radius_px);
  const int fx = mask.width() / latent_w, fy = mask.height() / latent_h;
  Grid<double> out(latent_w, latent_h, 0.0);
  for (int y = 0; y < latent_h; ++y) {
    for (int x = 0; x < latent_w; ++x) {
      double s = 0;
      for (int dy = 0; dy < fy; ++dy)
        for (int dx = 0; dx < fx; ++dx) s += feathered.at(x * fx + dx, y * fy + dy);
      out.at(x, y) = s / (fx * fy);
    }
  }
  return out;
}

namespace {

double time_factor(int t, const NoiseSchedule& sched, const BlendParams& params) {
  if (t < 0 || t > sched.T) {
    throw DomainError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(sched.T) + "]");
  }
  return params.lambda_max * std::pow(static_cast<double>(t) / sched.T, params.gamma);
}

WeightMap scale_support(const Grid<double>& support, double factor) {
  WeightMap w(support.width, support.height, 0.0f);
  for (std::size_t i = 0; i < support.data.size(); ++i) w.data[i] = static_cast<float>(factor * support.data[i]);
  return w;
}

}  // namespace

WeightMap weight_map(const masks::CharacterMask& mask, int t, const NoiseSchedule& sched, const BlendParams& params,
                     int latent_h, int latent_w) {
  params.validate();
  const double factor = time_factor(t, sched, params);
  return scale_support(weight_support(mask, params.feather_radius_px, latent_h, latent_w), factor);
}

Latent blend_latents(const Latent& x, const Latent& q, const WeightMap& w) {
  nn::require_same_shape(x, q, "blend_latents");
  if (w.width != x.w || w.height != x.h) throw ContractError("blend_latents: weight map does not match latent size");
  Latent out = x;
  const std::size_t plane = x.plane();
  for (std::size_t base = 0; base < x.data.size(); base += plane) {
    for (std::size_t k = 0; k < plane; ++k) {
      const float wk = w.data[k];
      if (wk == 0.0f) continue;
      if (wk == 1.0f) {
        out.data[base + k] = q.data[base + k];
        continue;
      }
      out.data[base + k] =
          static_cast<float>(static_cast<double>(x.data[base + k]) * (1.0 - wk) + static_cast<double>(q.data[base + k]) * wk);
    }
  }
  return out;
}

}  // namespace customtext::diffusion
