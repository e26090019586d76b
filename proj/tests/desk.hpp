#pragma once

// Desk training for the directional criteria: one VAE and one consistency
// backbone, then an enhancer and a control adapter per seed, scored on a
// held-out small-font split.

#include <algorithm>
#include <chrono>
#include <ostream>
#include <vector>

#include "customtext/consistency.hpp"
#include "customtext/enhance.hpp"
#include "customtext/evalkit.hpp"
#include "customtext/evaluate.hpp"

namespace desk {

using namespace customtext;

struct Plan {
  int train_items = 2000;
  int heldout_items = 100;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  int vae_steps = 1500;
  int enhancer_steps = 2000;
  int backbone_steps = 1200;
  int adapter_steps = 800;
  int batch = 8;
  double vae_lr = 2e-3;
  double enhancer_lr = 1e-3;
  double cm_lr = 1e-3;
  int cm_steps = 1;
  std::uint64_t decode_seed = 7;

  void scale(double s) {
    auto at_least_one = [s](int v) { return std::max(1, static_cast<int>(v * s)); };
    vae_steps = at_least_one(vae_steps);
    enhancer_steps = at_least_one(enhancer_steps);
    backbone_steps = at_least_one(backbone_steps);
    adapter_steps = at_least_one(adapter_steps);
  }
};

struct Results {
  std::vector<std::uint64_t> seeds;
  std::vector<double> vanilla_char_mse, enhanced_char_mse;
  std::vector<double> backbone_f1, adapter_f1;
  double ceiling_f1 = 0;  // template OCR on the clean held-out renders
  int train_items = 0, heldout_items = 0;
  double train_seconds = 0;
};

inline Results run(const Plan& plan, std::ostream& log) {
  using clk = std::chrono::steady_clock;
  double trained = 0;
  auto timed = [&](auto&& fn) {
    const auto t0 = clk::now();
    fn();
    trained += std::chrono::duration<double>(clk::now() - t0).count();
  };
  auto progress = [&](const char* what, int every) {
    return [&log, what, every](int step, double loss) {
      if (step % every == 0) log << "  " << what << " step " << step << " loss " << loss << std::endl;
    };
  };

  evalkit::DatasetConfig train_cfg;
  train_cfg.count = plan.train_items;
  const auto train = evalkit::generate_dataset(train_cfg, 1).items;
  evalkit::DatasetConfig held_cfg;
  held_cfg.count = plan.heldout_items;
  held_cfg.max_size = evalkit::kSmallFontMaxPx;
  const auto held = evalkit::generate_dataset(held_cfg, 2).items;

  Results r;
  r.seeds = plan.seeds;
  r.train_items = static_cast<int>(train.size());
  r.heldout_items = static_cast<int>(held.size());
  std::vector<RgbImage> clean;
  for (const auto& item : held) clean.push_back(item.image);
  r.ceiling_f1 = *gateway::evaluate(held, clean, "clean").row.f1;

  gateway::Models models;
  diffusion::Vae vae(1);
  log << "desk: vae" << std::endl;
  timed([&] {
    diffusion::TrainOptions o;
    o.steps = plan.vae_steps;
    o.batch = plan.batch;
    o.lr = plan.vae_lr;
    o.seed = 1;
    o.on_step = progress("vae", 250);
    diffusion::train_vae(vae, train, o);
    diffusion::calibrate_latent_scale(vae, train);
  });
  models.vae = std::make_shared<diffusion::Vae>(vae);
  const double vanilla = gateway::evaluate(held, gateway::reconstruct(held, models, gateway::DecoderKind::Vanilla),
                                           "vanilla").char_mse;

  consistency::Backbone<float> backbone(consistency::Geometry{}, 1);
  const auto samples = consistency::make_samples(vae, train);
  log << "desk: consistency backbone" << std::endl;
  timed([&] {
    diffusion::TrainOptions o;
    o.steps = plan.backbone_steps;
    o.batch = plan.batch;
    o.lr = plan.cm_lr;
    o.seed = 1;
    o.on_step = progress("backbone", 100);
    consistency::pretrain_backbone(backbone, samples, o);
  });
  models.cm_backbone = std::make_shared<consistency::Backbone<float>>(backbone);

  for (const auto seed : plan.seeds) {
    log << "desk: seed " << seed << std::endl;
    enhance::EnhancerParams<float> enhancer(seed);
    consistency::Adapter<float> adapter(backbone.geo, seed);
    timed([&] {
      diffusion::TrainOptions o;
      o.steps = plan.enhancer_steps;
      o.batch = plan.batch;
      o.lr = plan.enhancer_lr;
      o.seed = seed;
      o.on_step = progress("enhancer", 500);
      enhance::train_enhancer(enhancer, vae, train, o);
      o.steps = plan.adapter_steps;
      o.lr = plan.cm_lr;
      o.on_step = progress("adapter", 100);
      consistency::train_adapter(backbone, adapter, samples, o);
    });
    models.enhancer = std::make_shared<enhance::EnhancerParams<float>>(enhancer);
    models.cm_adapter = std::make_shared<consistency::Adapter<float>>(adapter);

    r.vanilla_char_mse.push_back(vanilla);
    r.enhanced_char_mse.push_back(
        gateway::evaluate(held, gateway::reconstruct(held, models, gateway::DecoderKind::Enhance), "enhance").char_mse);
    auto f1 = [&](const gateway::Models& m) {
      const auto out = gateway::reconstruct(held, m, gateway::DecoderKind::Consistency, plan.decode_seed + seed,
                                            plan.cm_steps);
      return *gateway::evaluate(held, out, "consistency").row.f1;
    };
    auto unguided = models;
    unguided.cm_adapter.reset();
    r.backbone_f1.push_back(f1(unguided));
    r.adapter_f1.push_back(f1(models));
    log << "desk: seed " << seed << " enhanced " << r.enhanced_char_mse.back() << " vanilla " << vanilla
        << " | f1 backbone " << r.backbone_f1.back() << " adapter " << r.adapter_f1.back() << std::endl;
  }
  r.train_seconds = trained;
  return r;
}

}  // namespace desk
