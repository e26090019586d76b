#include <cmath>

#include "customtext/evalkit.hpp"

namespace customtext::evalkit {

int otsu_threshold(const std::vector<std::uint8_t>& values) {
  if (values.empty()) return 0;
  std::array<double, 256> hist{};
  for (auto v : values) hist[v] += 1;
  const double total = static_cast<double>(values.size());
  double sum_all = 0;
  for (int i = 0; i < 256; ++i) sum_all += i * hist[i];
  double w0 = 0, sum0 = 0, best = -1;
  int threshold = values.front();
  for (int t = 0; t < 256; ++t) {
    w0 += hist[t];
    sum0 += t * hist[t];
    const double w1 = total - w0;
    if (w0 == 0) continue;
    if (w1 == 0) break;
    const double m0 = sum0 / w0, m1 = (sum_all - sum0) / w1;
    const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
    if (between > best) {
      best = between;
      threshold = t;
    }
  }
  return threshold;
}

namespace {

struct Template {
  char ch;
  std::vector<double> centred;  // zero mean, unit norm
};

std::vector<double> normalise(std::vector<double> v) {
  double mean = 0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double norm = 0;
  for (double& x : v) {
    x -= mean;
    norm += x * x;
  }
  norm = std::sqrt(norm);
  if (norm < 1e-12) return {};
  for (double& x : v) x /= norm;
  return v;
}

std::vector<Template> make_templates(const glyph::GlyphFont& font, int size_px, const std::string& alphabet) {
  std::vector<Template> out;
  for (char ch : alphabet) {
    const auto cov = glyph::glyph_coverage(font, static_cast<unsigned char>(ch), size_px);
    auto v = normalise(std::vector<double>(cov.data.begin(), cov.data.end()));
    if (!v.empty()) out.push_back({ch, std::move(v)});
  }
  return out;
}

std::uint8_t luminance(const Rgb8& p) { return static_cast<std::uint8_t>((299 * p[0] + 587 * p[1] + 114 * p[2]) / 1000); }

}  // namespace

std::vector<OcrWord> template_ocr(const RgbImage& image, const layout::LayoutPlan& plan,
                                  const glyph::FontRegistry& fonts, const OcrOptions& options) {
  std::string alphabet = options.alphabet;
  if (alphabet.empty())
    for (int cp = glyph::kFirstCodepoint + 1; cp <= glyph::kLastCodepoint; ++cp) alphabet.push_back(static_cast<char>(cp));

  std::map<std::pair<std::string, int>, std::vector<Template>> cache;
  std::vector<OcrWord> out;
  for (const auto& word : plan.words) {
    if (word.span_index < 0 || word.span_index >= static_cast<int>(plan.spans.size())) {
      throw ContractError("plan word refers to a missing span");
    }
    const auto& span = plan.spans[word.span_index];
    const auto& font = fonts.get(span.font);
    auto key = std::make_pair(span.font, span.size_px);
    auto it = cache.find(key);
    if (it == cache.end()) it = cache.emplace(key, make_templates(font, span.size_px, alphabet)).first;
    const auto& templates = it->second;
    const int tw = font.tile_width(span.size_px), th = span.size_px;

    OcrWord result;
    for (const auto& box : word.char_boxes) {
      std::vector<std::uint8_t> gray;
      gray.reserve(static_cast<std::size_t>(tw) * th);
      for (int y = 0; y < th; ++y)
        for (int x = 0; x < tw; ++x) {
          const int px = std::clamp(box.x + x, 0, image.width - 1), py = std::clamp(box.y + y, 0, image.height - 1);
          gray.push_back(luminance(image.at(px, py)));
        }
      const int thr = otsu_threshold(gray);
      std::vector<double> bin(gray.size());
      for (std::size_t i = 0; i < gray.size(); ++i) bin[i] = gray[i] > thr ? 1.0 : 0.0;
      const auto crop = normalise(std::move(bin));

      char best_ch = alphabet.front();
      double best = 0;
      if (!crop.empty()) {
        for (const auto& t : templates) {
          double dot = 0;
          for (std::size_t i = 0; i < crop.size(); ++i) dot += crop[i] * t.centred[i];
          const double score = std::min(1.0, std::abs(dot));
          if (score > best + 1e-12) {
            best = score;
            best_ch = t.ch;
          }
        }
      }
      result.text.push_back(best_ch);
      result.confidence.push_back(best);
      if (best < kLowConfidence) result.low_confidence = true;
    }
    out.push_back(std::move(result));
  }
  return out;
}

std::vector<std::string> ocr_texts(const std::vector<OcrWord>& words) {
  std::vector<std::string> out;
  for (const auto& w : words) out.push_back(w.text);
  return out;
}

std::vector<std::string> plan_words(const layout::LayoutPlan& plan) {
  std::vector<std::string> out;
  for (const auto& w : plan.words) out.push_back(w.text);
  return out;
}

}  // namespace customtext::evalkit
