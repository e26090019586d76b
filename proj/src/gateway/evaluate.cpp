#include "customtext/evaluate.hpp"

#include "customtext/imagetensor.hpp"

namespace customtext::gateway {

namespace {

constexpr std::uint64_t kReconstructStream = 0x72656373;

}  // namespace

std::vector<RgbImage> reconstruct(const Corpus& corpus, const Models& models, DecoderKind decoder, std::uint64_t seed,
                                  int cm_steps) {
  if (!models.vae) throw NotFoundError("no VAE loaded; run `ctext train-vae`");
  if (decoder == DecoderKind::Enhance && !models.enhancer) {
    throw NotFoundError("no enhancer loaded; run `ctext train-enhancer`");
  }
  if (decoder == DecoderKind::Consistency && !models.cm_backbone) {
    throw NotFoundError("no consistency backbone loaded; run `ctext pretrain-cm`");
  }
  std::vector<RgbImage> out;
  out.reserve(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& item = corpus[i];
    const auto z = models.vae->encode(nn::image_to_tensor(item.image));
    nn::Tensor<float> y;
    switch (decoder) {
      case DecoderKind::Vanilla:
        y = models.vae->decode(z);
        break;
      case DecoderKind::Enhance:
        y = enhance::enhance_decoded(models.vae->decode(z), *models.enhancer);
        break;
      case DecoderKind::Consistency:
        y = consistency::decode_consistent(*models.cm_backbone, models.cm_adapter.get(), z,
                                           nn::index_maps({&item.char_map}), cm_steps,
                                           seed ^ (kReconstructStream << 32) ^ i);
        break;
    }
    out.push_back(nn::tensor_to_image(y));
  }
  return out;
}

nlohmann::json Evaluation::to_json() const {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"method", row.method},   {"mse", opt(row.mse)},   {"psnr_db", opt(row.psnr_db)},
          {"ssim", opt(row.ssim)},  {"precision", opt(row.precision)}, {"recall", opt(row.recall)},
          {"f1", opt(row.f1)},      {"char_mse", char_mse},  {"samples", samples}};
}

Evaluation Evaluation::from_json(const nlohmann::json& doc) {
  Evaluation e;
  try {
    e.row.method = doc.at("method").get<std::string>();
    auto opt = [&](const char* key) -> std::optional<double> {
      if (!doc.contains(key) || doc.at(key).is_null()) return std::nullopt;
      return doc.at(key).get<double>();
    };
    e.row.mse = opt("mse");
    e.row.psnr_db = opt("psnr_db");
    e.row.ssim = opt("ssim");
    e.row.precision = opt("precision");
    e.row.recall = opt("recall");
    e.row.f1 = opt("f1");
    e.char_mse = doc.value("char_mse", 0.0);
    e.samples = doc.value("samples", 0);
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("bad metrics document: ") + ex.what());
  }
  return e;
}

Evaluation evaluate(const Corpus& truth, const std::vector<RgbImage>& predicted, const std::string& method) {
  if (truth.size() != predicted.size()) {
    throw ContractError("expected " + std::to_string(truth.size()) + " predictions, got " +
                        std::to_string(predicted.size()));
  }
  if (truth.empty()) throw ContractError("nothing to evaluate");
  double mse = 0, psnr = 0, ssim = 0, char_mse = 0;
  int finite_psnr = 0;
  std::vector<evalkit::MatchScore> scores;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto& item = truth[i];
    const auto& pred = predicted[i];
    if (pred.width != item.image.width || pred.height != item.image.height) {
      throw ContractError("prediction " + std::to_string(i) + " has the wrong size");
    }
    const auto a = evalkit::to_unit(pred), b = evalkit::to_unit(item.image);
    const double m = evalkit::mse(a, b);
    mse += m;
    if (m > 0) {
      psnr += evalkit::psnr(a, b);
      ++finite_psnr;
    }
    ssim += evalkit::ssim(a, b);
    char_mse += evalkit::masked_mse(a, b, item.char_map);
    scores.push_back(evalkit::ocr_exact_match(evalkit::ocr_texts(evalkit::template_ocr(pred, item.plan)),
                                              evalkit::plan_words(item.plan)));
  }
  const double n = static_cast<double>(truth.size());
  Evaluation e;
  e.samples = static_cast<int>(truth.size());
  e.row.method = method;
  e.row.mse = mse / n;
  // Identical images have unbounded PSNR; the mean is over the finite ones.
  e.row.psnr_db = finite_psnr ? psnr / finite_psnr : std::numeric_limits<double>::infinity();
  e.row.ssim = ssim / n;
  const auto pooled = evalkit::pool_matches(scores);
  e.row.precision = pooled.precision;
  e.row.recall = pooled.recall;
  e.row.f1 = pooled.f1;
  e.char_mse = char_mse / n;
  return e;
}

Corpus small_split(const Corpus& corpus) {
  Corpus out;
  for (const auto& item : corpus)
    if (item.small) out.push_back(item);
  return out;
}

}  // namespace customtext::gateway
