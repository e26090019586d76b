#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "customtext/corpus.hpp"
#include "customtext/evalkit.hpp"
#include "customtext/gateway.hpp"

namespace customtext::gateway {

// Round trip of every corpus image through the VAE encoder (posterior mean)
// and the chosen decoder. The consistency decoder is conditioned on the
// item's character map and draws its noise from (seed, item index).
std::vector<RgbImage> reconstruct(const Corpus& corpus, const Models& models, DecoderKind decoder,
                                  std::uint64_t seed = 0, int cm_steps = 1);

struct Evaluation {
  evalkit::MetricsRow row;
  double char_mse = 0;  // mean over images of the MSE restricted to character pixels
  int samples = 0;

  nlohmann::json to_json() const;
  static Evaluation from_json(const nlohmann::json& doc);
};

// Image metrics (unit range) and exact-word template OCR over the plan's
// word boxes, pooled over the corpus.
Evaluation evaluate(const Corpus& truth, const std::vector<RgbImage>& predicted, const std::string& method);

// Items whose text is at most evalkit::kSmallFontMaxPx tall.
Corpus small_split(const Corpus& corpus);

}  // namespace customtext::gateway
