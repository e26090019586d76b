#include <cmath>

#include "customtext/evalkit.hpp"

namespace customtext::evalkit {

Image to_unit(const RgbImage& image) {
  Image out(1, 3, image.height, image.width);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < 3; ++c) out(0, c, y, x) = image.at(x, y)[c] / 255.0;
  return out;
}

double mse(const Image& a, const Image& b) {
  nn::require_same_shape(a, b, "mse");
  if (a.empty()) throw ContractError("mse of empty images");
  double s = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    s += d * d;
  }
  return s / static_cast<double>(a.data.size());
}

double masked_mse(const Image& a, const Image& b, const GrayImage& mask) {
  nn::require_same_shape(a, b, "masked_mse");
  if (a.n != 1 || mask.width != a.w || mask.height != a.h) throw ContractError("masked_mse: mask does not match");
  double s = 0;
  std::size_t count = 0;
  for (int y = 0; y < a.h; ++y)
    for (int x = 0; x < a.w; ++x) {
      if (!mask.at(x, y)) continue;
      for (int c = 0; c < a.c; ++c) {
        const double d = a(0, c, y, x) - b(0, c, y, x);
        s += d * d;
        ++count;
      }
    }
  return count ? s / static_cast<double>(count) : 0.0;
}

double psnr(const Image& a, const Image& b, double peak) {
  if (!(peak > 0)) throw DomainError("psnr peak must be positive");
  const double m = mse(a, b);
  if (m == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / m);
}

double ssim(const Image& a, const Image& b, double peak) {
  nn::require_same_shape(a, b, "ssim");
  if (a.empty()) throw ContractError("ssim of empty images");
  const double c1 = (0.01 * peak) * (0.01 * peak), c2 = (0.03 * peak) * (0.03 * peak);
  // Images smaller than a window are treated as a single window.
  const int wh = std::min(kSsimWindow, a.h), ww = std::min(kSsimWindow, a.w);
  double total = 0;
  long windows = 0;
  for (int i = 0; i < a.n; ++i)
    for (int c = 0; c < a.c; ++c)
      for (int y0 = 0; y0 + wh <= a.h; y0 += kSsimStride)
        for (int x0 = 0; x0 + ww <= a.w; x0 += kSsimStride) {
          double ma = 0, mb = 0;
          for (int y = y0; y < y0 + wh; ++y)
            for (int x = x0; x < x0 + ww; ++x) {
              ma += a(i, c, y, x);
              mb += b(i, c, y, x);
            }
          const double n = static_cast<double>(wh) * ww;
          ma /= n;
          mb /= n;
          double va = 0, vb = 0, cov = 0;
          for (int y = y0; y < y0 + wh; ++y)
            for (int x = x0; x < x0 + ww; ++x) {
              const double da = a(i, c, y, x) - ma, db = b(i, c, y, x) - mb;
              va += da * da;
              vb += db * db;
              cov += da * db;
            }
          va /= n;
          vb /= n;
          cov /= n;
          total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
          ++windows;
        }
  return total / static_cast<double>(windows);
}

MatchScore ocr_exact_match(const std::vector<std::string>& predicted, const std::vector<std::string>& truth) {
  std::map<std::string, int> pool;
  for (const auto& w : truth) ++pool[w];
  MatchScore s;
  for (const auto& w : predicted) {
    auto it = pool.find(w);
    if (it != pool.end() && it->second > 0) {
      --it->second;
      ++s.matched;
    }
  }
  s.predicted = static_cast<int>(predicted.size());
  s.truth = static_cast<int>(truth.size());
  return pool_matches({s});
}

MatchScore pool_matches(const std::vector<MatchScore>& scores) {
  MatchScore s;
  for (const auto& x : scores) {
    s.matched += x.matched;
    s.predicted += x.predicted;
    s.truth += x.truth;
  }
  if (s.predicted == 0 && s.truth == 0) {
    s.precision = s.recall = s.f1 = 1.0;
    return s;
  }
  s.precision = s.predicted ? static_cast<double>(s.matched) / s.predicted : 0.0;
  s.recall = s.truth ? static_cast<double>(s.matched) / s.truth : 0.0;
  s.f1 = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

}  // namespace customtext::evalkit
