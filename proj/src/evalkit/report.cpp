#include <charconv>
#include <cmath>
#include <sstream>

#include "customtext/evalkit.hpp"

namespace customtext::evalkit {

namespace {

struct Column {
  const char* key;
  const char* label;
  bool lower_is_better;
  std::optional<double> MetricsRow::*field;
};

const std::vector<Column>& all_columns() {
  static const std::vector<Column> cols = {
      {"mse", "MSE", true, &MetricsRow::mse},
      {"psnr_db", "PSNR", false, &MetricsRow::psnr_db},
      {"ssim", "SSIM", false, &MetricsRow::ssim},
      {"precision", "Precision", false, &MetricsRow::precision},
      {"recall", "Recall", false, &MetricsRow::recall},
      {"f1", "F1", false, &MetricsRow::f1},
  };
  return cols;
}

void validate_row(const MetricsRow& r) {
  if (r.method.empty()) throw ContractError("report row without a method name");
  auto unit = [&](const std::optional<double>& v, const char* what) {
    if (v && !(*v >= 0.0 && *v <= 1.0)) throw ContractError(std::string(what) + " outside [0, 1] for " + r.method);
  };
  if (r.mse && !(*r.mse >= 0)) throw ContractError("negative mse for " + r.method);
  if (r.ssim && !(*r.ssim >= -1.0 && *r.ssim <= 1.0)) throw ContractError("ssim outside [-1, 1] for " + r.method);
  unit(r.precision, "precision");
  unit(r.recall, "recall");
  unit(r.f1, "f1");
}

std::string pad(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : s + std::string(width - s.size(), ' ');
}

}  // namespace

std::string format_value(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  double r = std::round(v * 1e4) / 1e4;
  if (r == 0) r = 0;  // drops the sign of -0
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, r);
  return std::string(buf, res.ptr);
}

Report make_report(const ReportInput& input) {
  for (const auto& r : input.rows) validate_row(r);
  std::vector<const Column*> cols;
  for (const auto& c : all_columns()) {
    for (const auto& r : input.rows)
      if (r.*(c.field)) {
        cols.push_back(&c);
        break;
      }
  }

  // Best value per column over the rounded values, so ties in print are ties in marking.
  std::vector<std::optional<double>> best(cols.size());
  for (std::size_t k = 0; k < cols.size(); ++k)
    for (const auto& r : input.rows) {
      const auto& v = r.*(cols[k]->field);
      if (!v) continue;
      const double x = std::stod(format_value(*v) == "inf" ? "1e308" : format_value(*v));
      if (!best[k] || (cols[k]->lower_is_better ? x < *best[k] : x > *best[k])) best[k] = x;
    }

  std::vector<std::vector<std::string>> cells;
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : input.rows) {
    std::vector<std::string> line{r.method};
    nlohmann::json row{{"method", r.method}};
    nlohmann::json marked = nlohmann::json::array();
    std::string summary;
    for (std::size_t k = 0; k < cols.size(); ++k) {
      const auto& v = r.*(cols[k]->field);
      std::string cell = "-";
      if (v) {
        cell = format_value(*v);
        row[cols[k]->key] = std::isfinite(*v) ? nlohmann::json(*v) : nlohmann::json(nullptr);
        row["cells"][cols[k]->key] = cell;
        const double x = std::stod(cell == "inf" ? "1e308" : cell);
        if (best[k] && x == *best[k]) {
          marked.push_back(cols[k]->key);
          line.push_back(cell + "*");
        } else {
          line.push_back(cell);
        }
      } else {
        line.push_back(cell);
      }
      summary += (k ? " / " : "") + cell;
    }
    row["summary"] = summary;
    row["best"] = marked;
    rows.push_back(row);
    cells.push_back(std::move(line));
  }

  std::vector<std::string> header{"Method"};
  for (const auto* c : cols) header.push_back(c->label);
  std::vector<std::size_t> width(header.size());
  for (std::size_t k = 0; k < header.size(); ++k) {
    width[k] = header[k].size();
    for (const auto& line : cells) width[k] = std::max(width[k], line[k].size());
  }
  std::ostringstream text;
  if (!input.title.empty()) text << input.title << "\n";
  text << "dataset: " << (input.dataset.empty() ? "-" : input.dataset) << "  samples: " << input.samples << "\n";
  auto emit = [&](const std::vector<std::string>& line) {
    for (std::size_t k = 0; k < line.size(); ++k) text << (k ? "  " : "") << pad(line[k], width[k]);
    text << "\n";
  };
  emit(header);
  std::size_t total = 0;
  for (auto w : width) total += w;
  text << std::string(total + 2 * (width.size() - 1), '-') << "\n";
  for (const auto& line : cells) emit(line);
  text << "* best in column";
  if (std::any_of(cols.begin(), cols.end(), [](const Column* c) { return std::string(c->key) == "ssim"; })) {
    text << "; SSIM over 8x8 windows, stride 4, C1=(0.01 peak)^2, C2=(0.03 peak)^2";
  }
  text << "\n";

  nlohmann::json columns = nlohmann::json::array();
  for (const auto* c : cols) columns.push_back({{"key", c->key}, {"label", c->label}, {"lower_is_better", c->lower_is_better}});
  Report rep;
  rep.text = text.str();
  rep.document = {{"title", input.title},
                  {"dataset", input.dataset},
                  {"samples", input.samples},
                  {"columns", columns},
                  {"rows", rows},
                  {"ssim", {{"window", kSsimWindow}, {"stride", kSsimStride}, {"k1", 0.01}, {"k2", 0.03}}}};
  return rep;
}

ReportInput reference_table(int table) {
  auto quality = [](const char* name, double m, double p, double s) {
    MetricsRow r;
    r.method = name;
    r.mse = m;
    r.psnr_db = p;
    r.ssim = s;
    return r;
  };
  auto ocr = [](const char* name, double p, double r, double f) {
    MetricsRow row;
    row.method = name;
    row.precision = p;
    row.recall = r;
    row.f1 = f;
    return row;
  };
  switch (table) {
    case 1:
      return {"Reconstruction quality (CTW-1500)", "CTW-1500", 0,
              {quality("Controlnet-canny", 0.033, 17.82, 0.656), quality("TextDiffuser", 0.031, 17.82, 0.6601),
               quality("VAE Decoder Enhance (ours)", 0.027, 18.17, 0.6874),
               quality("CustomText (ours)", 0.019, 21.33, 0.712)}};
    case 2:
      return {"OCR on reconstructed images (CTW-1500)", "CTW-1500", 0,
              {ocr("Controlnet-canny", 0.7355, 0.7581, 0.7466), ocr("TextDiffuser", 0.7355, 0.7581, 0.7466),
               ocr("VAE Decoder Enhance (ours)", 0.7355, 0.7581, 0.7466),
               ocr("CustomText (ours)", 0.748, 0.762, 0.7549)}};
    case 3:
      return {"OCR over text regions (SmallFontSize)", "SmallFontSize", 0,
              {ocr("StableDiffusion", 0.0936, 0.1174, 0.1041), ocr("Controlnet-canny", 0.6332, 0.6572, 0.645),
               ocr("TextDiffuser", 0.792, 0.7863, 0.7891), ocr("VAE Decoder Enhance (ours)", 0.7894, 0.7911, 0.7902),
               ocr("CustomText (ours)", 0.8131, 0.815, 0.814)}};
    default:
      throw DomainError("reference tables are numbered 1 to 3");
  }
}

}  // namespace customtext::evalkit
