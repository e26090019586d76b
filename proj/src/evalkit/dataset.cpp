#include <algorithm>
#include <fstream>
#include <sstream>
#include <thread>

#include "customtext/evalkit.hpp"
#include "customtext/io.hpp"
#include "customtext/masks.hpp"
#include "customtext/rng.hpp"

namespace customtext::evalkit {

namespace {

const std::vector<std::string>& vocabulary() {
  static const std::vector<std::string> words = {
      "A",     "GO",    "UP",    "ON",    "NO",    "OK",    "HI",    "IT",    "WE",    "TO",    "CAT",   "DOG",
      "SUN",   "BUS",   "ZOO",   "RUN",   "BIG",   "HOT",   "SKY",   "JOY",   "FIX",   "NEW",   "RED",   "BOX",
      "SALE",  "OPEN",  "SHOP",  "CAFE",  "STOP",  "PARK",  "FOOD",  "BOOK",  "MILK",  "JAZZ",  "WAVE",  "GIFT",
      "YARD",  "QUIZ",  "VIEW",  "HELLO", "PIZZA", "MUSIC", "OCEAN", "LUCKY", "TOWER", "GRAND", "PLANT", "QUEEN",
      "WORLD", "HOTEL", "BREAD", "SMILE", "EXTRA", "FRESH", "KNOWN", "PARTY", "ADOPT", "SPRING", "PLANET", "BAKERY",
      "GARDEN", "MARKET", "SUMMER", "WINTER", "COFFEE", "TICKET", "ROCKET", "JUNGLE", "VOYAGE", "FOREST", "24H",
      "100",   "2024",  "7UP",   "B4",    "X9"};
  return words;
}

const std::vector<std::string>& objects() {
  static const std::vector<std::string> o = {"a shop sign", "a poster",   "a street banner", "a book cover",
                                             "a mug",       "a t-shirt",  "a neon sign",     "a billboard",
                                             "a label",     "a postcard", "a flyer",         "a chalkboard"};
  return o;
}

int lum(const Rgb8& c) { return (299 * c[0] + 587 * c[1] + 114 * c[2]) / 1000; }

std::uint8_t clamp8(int v) { return static_cast<std::uint8_t>(std::clamp(v, 0, 255)); }

RgbImage make_background(const std::string& style, const Rgb8& base, int size, std::mt19937_64& rng) {
  RgbImage img(size, size, base);
  if (style == "gradient") {
    std::uniform_int_distribution<int> shift(-40, 40), dir(0, 1);
    const std::array<int, 3> delta{shift(rng), shift(rng), shift(rng)};
    const bool horizontal = dir(rng) == 0;
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double f = static_cast<double>(horizontal ? x : y) / (size - 1);
        for (int c = 0; c < 3; ++c) img.at(x, y)[c] = clamp8(base[c] + static_cast<int>(std::lround(f * delta[c])));
      }
  } else if (style == "noise") {
    std::uniform_int_distribution<int> noise(-20, 20);
    for (auto& p : img.data)
      for (int c = 0; c < 3; ++c) p[c] = clamp8(p[c] + noise(rng));
  } else if (style != "solid") {
    throw ContractError("unknown background style '" + style + "'");
  }
  return img;
}

Rgb8 random_color(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> c(0, 255);
  return {static_cast<std::uint8_t>(c(rng)), static_cast<std::uint8_t>(c(rng)), static_cast<std::uint8_t>(c(rng))};
}

std::string pick_text(int max_chars, std::mt19937_64& rng) {
  std::vector<const std::string*> fitting;
  for (const auto& w : vocabulary())
    if (static_cast<int>(w.size()) <= max_chars) fitting.push_back(&w);
  if (fitting.empty()) return {};
  std::uniform_int_distribution<std::size_t> pick(0, fitting.size() - 1);
  std::uniform_int_distribution<int> count(1, 3);
  const int n = count(rng);
  std::string text;
  int used = 0;
  for (int i = 0; i < n; ++i) {
    const auto& w = *fitting[pick(rng)];
    if (i > 0 && used + 1 + static_cast<int>(w.size()) > 2 * max_chars) break;
    if (i > 0) text += ' ';
    text += w;
    used += static_cast<int>(w.size()) + (i > 0 ? 1 : 0);
  }
  return text;
}

struct Generated {
  ManifestEntry entry;
  CorpusItem item;
};

Generated generate_entry(const DatasetConfig& cfg, std::uint64_t seed, int index) {
  auto rng = make_rng(seed, (0x64617461ULL << 32) | static_cast<std::uint32_t>(index));
  const auto& fonts = glyph::FontRegistry::builtin();
  std::uniform_int_distribution<int> size_d(cfg.min_size, cfg.max_size);
  std::uniform_int_distribution<std::size_t> font_d(0, cfg.fonts.size() - 1), bg_d(0, cfg.backgrounds.size() - 1),
      obj_d(0, objects().size() - 1);
  std::uniform_int_distribution<int> spans_d(1, 2);

  for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
    Generated g;
    const int size = size_d(rng);
    const auto& font_name = cfg.fonts[font_d(rng)];
    const auto& style = cfg.backgrounds[bg_d(rng)];
    const auto& font = fonts.get(font_name);
    const int max_chars = cfg.canvas / font.tile_width(size);
    const int spans = size <= 12 ? spans_d(rng) : 1;

    std::string prompt = objects()[obj_d(rng)] + " that says";
    std::vector<std::string> texts;
    for (int s = 0; s < spans; ++s) {
      const auto text = pick_text(max_chars, rng);
      if (text.empty()) break;
      prompt += (s == 0 ? " '" : " and '") + text + "'";
      texts.push_back(text);
    }
    Rgb8 bg = random_color(rng), fill = random_color(rng);
    for (int k = 0; k < 64 && std::abs(lum(bg) - lum(fill)) < 100; ++k) fill = random_color(rng);
    if (texts.empty() || std::abs(lum(bg) - lum(fill)) < 100) continue;

    CorpusItem& item = g.item;
    const auto spec = layout::parse_prompt(prompt, cfg.canvas, cfg.canvas);
    for (std::size_t s = 0; s < spec.spans.size(); ++s) {
      glyph::FontAttributes a;
      a.font = font_name;
      a.size_px = size;
      a.fill = fill;
      item.attrs.push_back(a);
    }
    try {
      item.plan = layout::allocate_boxes(spec, item.attrs, seed);
    } catch (const LayoutError&) {
      continue;
    }
    item.prompt = prompt;
    item.prose = spec.prose;
    item.char_map = masks::build_char_mask(item.plan, cfg.canvas, cfg.canvas).index_map;
    item.cond = masks::build_cond_mask(item.plan, item.attrs, cfg.canvas, cfg.canvas).rgb;
    item.image = make_background(style, bg, cfg.canvas, rng);
    masks::render_plan_onto(item.image, item.plan, item.attrs);
    item.region = masks::word_region(item.plan, 2);
    item.small = size <= kSmallFontMaxPx;

    auto& e = g.entry;
    char id[16];
    std::snprintf(id, sizeof id, "e%05d", index);
    e.id = id;
    e.prompt = prompt;
    e.size_px = size;
    e.font = font_name;
    e.background = style;
    e.small = item.small;
    for (const auto& w : item.plan.words) e.words.push_back({w.text, w.box});
    return g;
  }
  throw LayoutError("could not lay out a dataset entry after " + std::to_string(cfg.max_retries) + " retries", 0, 0);
}

nlohmann::json box_json(const Box& b) { return {b.x, b.y, b.w, b.h}; }

nlohmann::json entry_json(const ManifestEntry& e) {
  nlohmann::json words = nlohmann::json::array();
  for (const auto& w : e.words) words.push_back({{"text", w.text}, {"box", box_json(w.box)}});
  return {{"type", "entry"},
          {"id", e.id},
          {"prompt", e.prompt},
          {"size_px", e.size_px},
          {"font", e.font},
          {"background", e.background},
          {"tag", e.small ? "small" : "large"},
          {"files",
           {{"image", e.id + "/image.png"},
            {"char_map", e.id + "/char_map.png"},
            {"cond", e.id + "/cond.png"},
            {"region", e.id + "/region.png"},
            {"plan", e.id + "/plan.json"}}},
          {"words", words}};
}

}  // namespace

void DatasetConfig::validate() const {
  if (count < 0) throw ContractError("dataset count must be non-negative");
  if (min_size < glyph::kMinSizePx || max_size < min_size) throw ContractError("invalid dataset size range");
  if (canvas < 16) throw ContractError("dataset canvas too small");
  if (fonts.empty() || backgrounds.empty()) throw ContractError("dataset needs fonts and background styles");
  for (const auto& f : fonts) glyph::FontRegistry::builtin().get(f);
  for (const auto& b : backgrounds)
    if (b != "solid" && b != "gradient" && b != "noise") throw ContractError("unknown background style '" + b + "'");
  if (max_retries < 0) throw ContractError("max_retries must be non-negative");
}

nlohmann::json DatasetConfig::to_json() const {
  return {{"count", count},   {"min_size", min_size},       {"max_size", max_size},     {"canvas", canvas},
          {"fonts", fonts},   {"backgrounds", backgrounds}, {"max_retries", max_retries}};
}

DatasetConfig DatasetConfig::from_json(const nlohmann::json& doc) {
  DatasetConfig c;
  try {
    c.count = doc.value("count", c.count);
    c.min_size = doc.value("min_size", c.min_size);
    c.max_size = doc.value("max_size", c.max_size);
    c.canvas = doc.value("canvas", c.canvas);
    c.fonts = doc.value("fonts", c.fonts);
    c.backgrounds = doc.value("backgrounds", c.backgrounds);
    c.max_retries = doc.value("max_retries", c.max_retries);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("dataset config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string DatasetConfig::hash() const { return io::sha256_hex(to_json().dump()); }

Dataset generate_dataset(const DatasetConfig& config, std::uint64_t seed) {
  config.validate();
  Dataset ds;
  ds.config = config;
  ds.seed = seed;
  std::vector<Generated> out(config.count);
  const int workers = std::max(1, std::min<int>(8, static_cast<int>(std::thread::hardware_concurrency())));
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (int i = w; i < config.count; i += workers) out[i] = generate_entry(config, seed, i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  for (auto& g : out) {
    ds.entries.push_back(std::move(g.entry));
    ds.items.push_back(std::move(g.item));
  }
  return ds;
}

void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  if (ds.entries.size() != ds.items.size()) throw ContractError("dataset entries and items differ in count");
  std::filesystem::create_directories(dir);
  std::string manifest = nlohmann::json{{"type", "header"},
                                        {"format", 1},
                                        {"seed", ds.seed},
                                        {"config", ds.config.to_json()},
                                        {"config_hash", ds.config.hash()},
                                        {"count", ds.entries.size()}}
                             .dump() +
                         "\n";
  for (std::size_t i = 0; i < ds.entries.size(); ++i) {
    const auto& e = ds.entries[i];
    const auto& item = ds.items[i];
    const auto sub = dir / e.id;
    std::filesystem::create_directories(sub);
    io::write_png(sub / "image.png", item.image);
    io::write_png(sub / "char_map.png", item.char_map);
    io::write_png(sub / "cond.png", item.cond);
    io::write_png(sub / "region.png", item.region);
    nlohmann::json attrs = nlohmann::json::array();
    for (const auto& a : item.attrs) attrs.push_back(layout::to_json(a));
    io::write_text(sub / "plan.json", nlohmann::json{{"prompt", item.prompt},
                                                     {"prose", item.prose},
                                                     {"plan", layout::to_json(item.plan)},
                                                     {"attrs", attrs}}
                                              .dump(1) +
                                          "\n");
    manifest += entry_json(e).dump() + "\n";
  }
  io::write_text(dir / "manifest.jsonl", manifest);
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.jsonl";
  if (!std::filesystem::exists(path)) throw NotFoundError("no dataset manifest at " + path.string());
  std::istringstream lines(io::read_text(path));
  std::string line;
  Dataset ds;
  bool header = false;
  try {
    while (std::getline(lines, line)) {
      if (line.empty()) continue;
      const auto doc = nlohmann::json::parse(line);
      if (doc.at("type") == "header") {
        ds.seed = doc.at("seed").get<std::uint64_t>();
        ds.config = DatasetConfig::from_json(doc.at("config"));
        header = true;
        continue;
      }
      if (!header) throw FormatError("manifest entry before header");
      ManifestEntry e;
      e.id = doc.at("id").get<std::string>();
      e.prompt = doc.at("prompt").get<std::string>();
      e.size_px = doc.at("size_px").get<int>();
      e.font = doc.at("font").get<std::string>();
      e.background = doc.at("background").get<std::string>();
      e.small = doc.at("tag").get<std::string>() == "small";
      for (const auto& w : doc.at("words")) {
        const auto b = w.at("box");
        e.words.push_back({w.at("text").get<std::string>(), {b.at(0), b.at(1), b.at(2), b.at(3)}});
      }
      const auto& files = doc.at("files");
      auto file = [&](const char* key) {
        const auto p = dir / files.at(key).get<std::string>();
        if (!std::filesystem::exists(p)) throw NotFoundError("dataset file missing: " + p.string());
        return p;
      };
      CorpusItem item;
      item.image = io::read_png_rgb(file("image"));
      item.char_map = io::read_png_gray(file("char_map"));
      item.cond = io::read_png_rgb(file("cond"));
      item.region = io::read_png_gray(file("region"));
      const auto plan_doc = nlohmann::json::parse(io::read_text(file("plan")));
      item.prompt = plan_doc.at("prompt").get<std::string>();
      item.prose = plan_doc.at("prose").get<std::string>();
      item.plan = layout::plan_from_json(plan_doc.at("plan"));
      for (const auto& a : plan_doc.at("attrs")) item.attrs.push_back(layout::attrs_from_json(a));
      item.small = e.small;
      if (item.plan.words.size() != e.words.size()) throw FormatError("manifest words disagree with plan for " + e.id);
      for (std::size_t k = 0; k < e.words.size(); ++k) {
        if (item.plan.words[k].text != e.words[k].text || item.plan.words[k].box != e.words[k].box) {
          throw FormatError("manifest words disagree with plan for " + e.id);
        }
      }
      ds.entries.push_back(std::move(e));
      ds.items.push_back(std::move(item));
    }
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("dataset manifest: ") + ex.what());
  }
  if (!header) throw FormatError("dataset manifest has no header");
  return ds;
}

}  // namespace customtext::evalkit
