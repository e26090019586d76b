#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "customtext/corpus.hpp"
#include "customtext/glyphcore.hpp"
#include "customtext/grid.hpp"
#include "customtext/layout.hpp"
#include "customtext/nn.hpp"

namespace customtext::evalkit {

inline constexpr int kSmallFontMaxPx = 8;
inline constexpr int kSsimWindow = 8;
inline constexpr int kSsimStride = 4;

// Images as (1, c, h, w) tensors with values in [0, peak].
using Image = nn::Tensor<double>;

Image to_unit(const RgbImage& image);  // bytes / 255

double mse(const Image& a, const Image& b);
// Mean over pixels where mask != 0 (all channels); 0 when the mask is empty.
double masked_mse(const Image& a, const Image& b, const GrayImage& mask);
double psnr(const Image& a, const Image& b, double peak = 1.0);
double ssim(const Image& a, const Image& b, double peak = 1.0);

// ---------------------------------------------------------------------------
// Template OCR.
// ---------------------------------------------------------------------------

inline constexpr double kLowConfidence = 0.5;

struct OcrWord {
  std::string text;
  std::vector<double> confidence;  // |NCC| per character
  bool low_confidence = false;
};

struct OcrOptions {
  // Candidate characters; empty means every printable non-space character.
  std::string alphabet;
};

std::vector<OcrWord> template_ocr(const RgbImage& image, const layout::LayoutPlan& plan,
                                  const glyph::FontRegistry& fonts = glyph::FontRegistry::builtin(),
                                  const OcrOptions& options = {});

std::vector<std::string> ocr_texts(const std::vector<OcrWord>& words);

// Otsu threshold over 8-bit values; pixels > threshold are foreground.
int otsu_threshold(const std::vector<std::uint8_t>& values);

struct MatchScore {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  int matched = 0;
  int predicted = 0;
  int truth = 0;
};

MatchScore ocr_exact_match(const std::vector<std::string>& predicted, const std::vector<std::string>& truth);
// Pools counts over many images before computing the ratios.
MatchScore pool_matches(const std::vector<MatchScore>& scores);

// ---------------------------------------------------------------------------
// Synthetic dataset.
// ---------------------------------------------------------------------------

struct DatasetConfig {
  int count = 200;
  int min_size = 4;
  int max_size = 24;
  int canvas = 64;
  std::vector<std::string> fonts{"mono5x7", "mono8x12"};
  std::vector<std::string> backgrounds{"solid", "gradient", "noise"};
  int max_retries = 32;

  void validate() const;
  nlohmann::json to_json() const;
  static DatasetConfig from_json(const nlohmann::json& doc);
  std::string hash() const;  // sha256 of the canonical JSON
};

struct ManifestWord {
  std::string text;
  Box box;
};

struct ManifestEntry {
  std::string id;
  std::string prompt;
  int size_px = 0;
  std::string font;
  std::string background;
  bool small = false;
  std::vector<ManifestWord> words;
};

struct Dataset {
  DatasetConfig config;
  std::uint64_t seed = 0;
  std::vector<ManifestEntry> entries;
  Corpus items;
};

Dataset generate_dataset(const DatasetConfig& config, std::uint64_t seed);

// manifest.jsonl (a header line then one line per entry) plus one directory
// per entry holding image.png, char_map.png, cond.png, region.png and
// plan.json. Output bytes depend only on (config, seed).
void write_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);
inline Corpus load_corpus(const std::filesystem::path& dir) { return load_dataset(dir).items; }

std::vector<std::string> plan_words(const layout::LayoutPlan& plan);

// ---------------------------------------------------------------------------
// Reports.
// ---------------------------------------------------------------------------

struct MetricsRow {
  std::string method;
  std::optional<double> mse, psnr_db, ssim, precision, recall, f1;
};

struct ReportInput {
  std::string title;
  std::string dataset;
  int samples = 0;
  std::vector<MetricsRow> rows;
};

struct Report {
  std::string text;
  nlohmann::json document;
};

// Aligned table; the best value of every column is marked with '*'.
// Values are printed with at most four decimals and no trailing zeros.
Report make_report(const ReportInput& input);
std::string format_value(double v);

// Published reference rows (tables 1 to 3), used as report fixtures.
ReportInput reference_table(int table);

}  // namespace customtext::evalkit
