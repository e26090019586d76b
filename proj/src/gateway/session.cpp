#include <algorithm>

#include "customtext/gateway.hpp"
#include "customtext/imagetensor.hpp"
#include "customtext/io.hpp"

namespace customtext::gateway {

std::string to_string(DecoderKind k) {
  switch (k) {
    case DecoderKind::Vanilla:
      return "vanilla";
    case DecoderKind::Enhance:
      return "enhance";
    case DecoderKind::Consistency:
      return "consistency";
  }
  return "vanilla";
}

DecoderKind decoder_from_string(const std::string& s) {
  if (s == "vanilla") return DecoderKind::Vanilla;
  if (s == "enhance") return DecoderKind::Enhance;
  if (s == "consistency") return DecoderKind::Consistency;
  throw ContractError("unknown decoder '" + s + "' (expected vanilla, enhance or consistency)");
}

// ---------------------------------------------------------------------------
// Configuration and models.
// ---------------------------------------------------------------------------

void GatewayConfig::validate() const {
  if (canvas != diffusion::kImageSize) {
    throw ContractError("canvas must be " + std::to_string(diffusion::kImageSize) + " (the trained model size)");
  }
  if (steps < 1) throw ContractError("steps must be positive");
  blend.validate();
  if (!(cfg_scale >= 0)) throw ContractError("cfg_scale must be non-negative");
  if (cm_steps < 1 || cm_steps > 17) throw ContractError("cm_steps must be in [1, 17]");
  if (workers < 1) throw ContractError("workers must be positive");
  if (queue_capacity < 1) throw ContractError("queue_capacity must be positive");
}

nlohmann::json GatewayConfig::to_json() const {
  return {{"canvas", canvas},
          {"steps", steps},
          {"blend", {{"lambda_max", blend.lambda_max}, {"gamma", blend.gamma}, {"feather_radius_px", blend.feather_radius_px}}},
          {"cfg_scale", cfg_scale},
          {"cm_steps", cm_steps},
          {"models",
           {{"vae", models.vae.string()},
            {"denoiser", models.denoiser.string()},
            {"enhancer", models.enhancer.string()},
            {"cm_backbone", models.cm_backbone.string()},
            {"cm_adapter", models.cm_adapter.string()}}},
          {"workers", workers},
          {"queue_capacity", queue_capacity}};
}

GatewayConfig GatewayConfig::from_json(const nlohmann::json& doc, const std::filesystem::path& base) {
  GatewayConfig c;
  try {
    c.canvas = doc.value("canvas", c.canvas);
    c.steps = doc.value("steps", c.steps);
    if (doc.contains("blend")) {
      const auto& b = doc.at("blend");
      c.blend.lambda_max = b.value("lambda_max", c.blend.lambda_max);
      c.blend.gamma = b.value("gamma", c.blend.gamma);
      c.blend.feather_radius_px = b.value("feather_radius_px", c.blend.feather_radius_px);
    }
    c.cfg_scale = doc.value("cfg_scale", c.cfg_scale);
    c.cm_steps = doc.value("cm_steps", c.cm_steps);
    c.workers = doc.value("workers", c.workers);
    c.queue_capacity = doc.value("queue_capacity", c.queue_capacity);
    if (doc.contains("models")) {
      const auto& m = doc.at("models");
      auto path = [&](const char* key) -> std::filesystem::path {
        const std::string s = m.value(key, std::string());
        if (s.empty()) return {};
        std::filesystem::path p(s);
        return p.is_relative() && !base.empty() ? base / p : p;
      };
      c.models = {path("vae"), path("denoiser"), path("enhancer"), path("cm_backbone"), path("cm_adapter")};
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad gateway config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

ckpt::Checkpoint load_required(const std::filesystem::path& path, const std::string& tag, const std::string& role,
                               const std::string& command) {
  if (path.empty()) {
    throw NotFoundError("no " + role + " checkpoint configured; run `ctext " + command + "` and set models." + role);
  }
  if (!std::filesystem::exists(path)) {
    throw NotFoundError(role + " checkpoint " + path.string() + " not found; run `ctext " + command + "` first");
  }
  return ckpt::load(path, tag);
}

}  // namespace

Models load_models(const ModelPaths& paths) {
  Models m;
  m.vae = std::make_shared<diffusion::Vae>(
      diffusion::Vae::from_checkpoint(load_required(paths.vae, "vae", "vae", "train-vae")));
  m.denoiser = std::make_shared<diffusion::Denoiser>(
      diffusion::Denoiser::from_checkpoint(load_required(paths.denoiser, "denoiser", "denoiser", "train-denoiser")));
  if (!paths.enhancer.empty()) {
    m.enhancer = std::make_shared<enhance::EnhancerParams<float>>(
        enhance::from_checkpoint(load_required(paths.enhancer, "enhancer", "enhancer", "train-enhancer")));
  }
  if (!paths.cm_backbone.empty()) {
    m.cm_backbone = std::make_shared<consistency::Backbone<float>>(consistency::backbone_from_checkpoint(
        load_required(paths.cm_backbone, "cm_backbone", "cm_backbone", "pretrain-cm")));
  }
  if (!paths.cm_adapter.empty()) {
    m.cm_adapter = std::make_shared<consistency::Adapter<float>>(consistency::adapter_from_checkpoint(
        load_required(paths.cm_adapter, "cm_adapter", "cm_adapter", "train-adapter")));
  }
  fill_hashes(m);
  return m;
}

void fill_hashes(Models& m) {
  m.hashes.clear();
  if (m.vae) m.hashes["vae"] = m.vae->checksum();
  if (m.denoiser) m.hashes["denoiser"] = m.denoiser->checksum();
  if (m.enhancer) m.hashes["enhancer"] = m.enhancer->checksum();
  if (m.cm_backbone) m.hashes["cm_backbone"] = m.cm_backbone->checksum();
  if (m.cm_adapter) m.hashes["cm_adapter"] = m.cm_adapter->checksum();
}

// ---------------------------------------------------------------------------
// Sessions.
// ---------------------------------------------------------------------------

namespace {

std::string compose_prompt(const layout::PromptSpec& spec) {
  std::string out = spec.prose;
  for (std::size_t k = 0; k < spec.spans.size(); ++k) {
    const std::string tag = "<text" + std::to_string(k) + ">";
    const auto pos = out.find(tag);
    if (pos == std::string::npos) throw ContractError("prose lost the placeholder " + tag);
    out.replace(pos, tag.size(), "'" + spec.spans[k] + "'");
  }
  return out;
}

Rgb8 color_of(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw FormatError("colors are [r, g, b] arrays");
  Rgb8 c{};
  for (int i = 0; i < 3; ++i) {
    if (!j[i].is_number_integer() || j[i].get<int>() < 0 || j[i].get<int>() > 255) {
      throw FormatError("color components must be integers in [0, 255]");
    }
    c[i] = static_cast<std::uint8_t>(j[i].get<int>());
  }
  return c;
}

void check_plan(const layout::LayoutPlan& plan) {
  const auto violations = layout::validate_plan(plan);
  if (!violations.empty()) throw ContractError("layout plan is invalid: " + violations.front().message);
}

nlohmann::json snapshot_json(const Snapshot& s) {
  return {{"index", s.index},
          {"edits", s.edits},
          {"image", s.image},
          {"image_sha256", s.image_sha256},
          {"bundle", s.bundle},
          {"seed", s.seed},
          {"decoder", to_string(s.decoder)},
          {"init", s.init ? nlohmann::json(*s.init) : nlohmann::json(nullptr)},
          {"checkpoints", s.checkpoints}};
}

Snapshot snapshot_from(const nlohmann::json& j) {
  Snapshot s;
  s.index = j.at("index").get<int>();
  s.edits = j.at("edits");
  s.image = j.at("image").get<std::string>();
  s.image_sha256 = j.at("image_sha256").get<std::string>();
  s.bundle = j.at("bundle").get<std::string>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.decoder = decoder_from_string(j.at("decoder").get<std::string>());
  if (j.contains("init") && !j.at("init").is_null()) s.init = j.at("init").get<int>();
  s.checkpoints = j.at("checkpoints").get<std::map<std::string, std::string>>();
  return s;
}

}  // namespace

masks::RegionMask build_region(const nlohmann::json& spec, const layout::LayoutPlan& plan, int w, int h) {
  if (!spec.is_object() || !spec.contains("mode")) throw FormatError("region needs a mode");
  const std::string mode = spec.at("mode").is_string() ? spec.at("mode").get<std::string>() : "";
  if (mode == "full") return masks::full_region(w, h);
  if (mode == "words") {
    const auto& m = spec.value("margin", nlohmann::json(2));
    if (!m.is_number_integer() || m.get<int>() < 0) throw FormatError("region margin must be a non-negative integer");
    return masks::word_region(plan, m.get<int>());
  }
  if (mode == "boxes") {
    if (!spec.contains("boxes") || !spec.at("boxes").is_array()) throw FormatError("boxes mode needs a boxes array");
    masks::RegionMask r(w, h, 0);
    for (const auto& b : spec.at("boxes")) {
      if (!b.is_array() || b.size() != 4) throw FormatError("region boxes are [x, y, w, h]");
      for (const auto& v : b)
        if (!v.is_number_integer()) throw FormatError("region box entries must be integers");
      const int bx = b[0], by = b[1], bw = b[2], bh = b[3];
      if (bw < 0 || bh < 0) throw FormatError("region boxes need non-negative extent");
      for (int y = std::max(0, by); y < std::min(h, by + bh); ++y)
        for (int x = std::max(0, bx); x < std::min(w, bx + bw); ++x) r.at(x, y) = 1;
    }
    return r;
  }
  throw FormatError("region mode must be full, words or boxes");
}

nlohmann::json Session::to_json() const {
  nlohmann::json attrs_doc = nlohmann::json::array();
  for (const auto& a : attrs) attrs_doc.push_back(layout::to_json(a));
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& s : history) hist.push_back(snapshot_json(s));
  return {{"id", id},
          {"prompt", prompt},
          {"spec", {{"prose", spec.prose}, {"spans", spec.spans}, {"canvas_w", spec.canvas_w}, {"canvas_h", spec.canvas_h}}},
          {"attrs", attrs_doc},
          {"plan", layout::to_json(plan)},
          {"region", region_spec},
          {"seed", seed},
          {"decoder", to_string(decoder)},
          {"pending", pending},
          {"history", hist},
          {"version", version}};
}

Session Session::from_json(const nlohmann::json& doc) {
  Session s;
  try {
    s.id = doc.at("id").get<std::string>();
    s.prompt = doc.at("prompt").get<std::string>();
    const auto& sp = doc.at("spec");
    s.spec.prose = sp.at("prose").get<std::string>();
    s.spec.spans = sp.at("spans").get<std::vector<std::string>>();
    s.spec.canvas_w = sp.at("canvas_w").get<int>();
    s.spec.canvas_h = sp.at("canvas_h").get<int>();
    for (const auto& a : doc.at("attrs")) s.attrs.push_back(layout::attrs_from_json(a));
    s.plan = layout::plan_from_json(doc.at("plan"));
    s.region_spec = doc.at("region");
    s.seed = doc.at("seed").get<std::uint64_t>();
    s.decoder = decoder_from_string(doc.at("decoder").get<std::string>());
    s.pending = doc.at("pending");
    for (const auto& h : doc.at("history")) s.history.push_back(snapshot_from(h));
    s.version = doc.value("version", 0);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad session record: ") + e.what());
  }
  s.region = build_region(s.region_spec, s.plan, s.spec.canvas_w, s.spec.canvas_h);
  return s;
}

Session create_session(const std::string& id, const CreateRequest& request) {
  Session s;
  s.id = id;
  s.spec = layout::parse_prompt(request.prompt, request.canvas, request.canvas);
  if (s.spec.spans.empty()) throw ContractError("prompt has no quoted text span");
  s.attrs = request.attrs;
  if (s.attrs.empty()) s.attrs.assign(s.spec.spans.size(), glyph::FontAttributes{});
  if (s.attrs.size() != s.spec.spans.size()) {
    throw ContractError("expected " + std::to_string(s.spec.spans.size()) + " attribute sets, got " +
                        std::to_string(s.attrs.size()));
  }
  for (const auto& a : s.attrs) a.validate();
  s.prompt = compose_prompt(s.spec);
  s.seed = request.seed;
  s.decoder = request.decoder;
  s.plan = layout::allocate_boxes(s.spec, s.attrs, s.seed);
  check_plan(s.plan);
  s.region = build_region(s.region_spec, s.plan, s.spec.canvas_w, s.spec.canvas_h);
  return s;
}

void edit_span(Session& session, int span, const nlohmann::json& patch) {
  if (span < 0 || span >= static_cast<int>(session.spec.spans.size())) {
    throw NotFoundError("session " + session.id + " has no span " + std::to_string(span));
  }
  if (!patch.is_object() || patch.empty()) throw FormatError("span edits are non-empty JSON objects");
  for (const auto& [key, _] : patch.items()) {
    if (key != "text" && key != "font" && key != "size_px" && key != "fill" && key != "background") {
      throw FormatError("unknown span field '" + key + "'");
    }
  }

  Session s = session;
  auto& attr = s.attrs[span];
  const auto before = attr;
  try {
    if (patch.contains("font")) attr.font = patch.at("font").get<std::string>();
    if (patch.contains("size_px")) attr.size_px = patch.at("size_px").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad span edit: ") + e.what());
  }
  if (patch.contains("fill")) attr.fill = color_of(patch.at("fill"));
  if (patch.contains("background")) {
    const auto& b = patch.at("background");
    attr.background = b.is_null() ? std::nullopt : std::optional<Rgb8>(color_of(b));
  }
  attr.validate();
  if (!glyph::FontRegistry::builtin().has(attr.font)) throw NotFoundError("unknown font '" + attr.font + "'");

  std::optional<std::string> text;
  if (patch.contains("text")) {
    if (!patch.at("text").is_string()) throw FormatError("span text must be a string");
    text = patch.at("text").get<std::string>();
    if (text->empty()) throw ContractError("span text must not be empty");
    for (unsigned char c : *text)
      if (!glyph::is_printable(c) || c == '\'') throw ContractError("span text must be printable ASCII without quotes");
  }

  const bool relayout = attr.font != before.font || attr.size_px != before.size_px;
  if (text) s.spec.spans[span] = *text;
  if (relayout) {
    s.plan = layout::allocate_boxes(s.spec, s.attrs, s.seed);
  } else if (text && *text != session.spec.spans[span]) {
    s.plan = masks::apply_incremental_edit(s.plan, span, *text);
  }
  check_plan(s.plan);
  s.prompt = compose_prompt(s.spec);
  s.region = build_region(s.region_spec, s.plan, s.spec.canvas_w, s.spec.canvas_h);
  s.pending.push_back({{"kind", "span"}, {"span", span}, {"patch", patch}});
  session = std::move(s);
}

void edit_region(Session& session, const nlohmann::json& region_spec) {
  auto region = build_region(region_spec, session.plan, session.spec.canvas_w, session.spec.canvas_h);
  session.region_spec = region_spec;
  session.region = std::move(region);
  session.pending.push_back({{"kind", "region"}, {"region", region_spec}});
}

// ---------------------------------------------------------------------------
// Generation.
// ---------------------------------------------------------------------------

namespace {

template <typename F>
auto staged(const char* stage, F&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (Error& e) {
    if (e.stage().empty()) e.set_stage(stage);
    throw;
  } catch (const std::exception& e) {
    throw Error("internal", e.what(), stage);
  }
}

}  // namespace

std::vector<std::uint8_t> make_bundle(const Session& s) {
  const auto cm = masks::build_char_mask(s.plan, s.spec.canvas_w, s.spec.canvas_h);
  const auto cond = masks::build_cond_mask(s.plan, s.attrs, s.spec.canvas_w, s.spec.canvas_h);
  nlohmann::json attrs = nlohmann::json::array();
  for (const auto& a : s.attrs) attrs.push_back(layout::to_json(a));
  const nlohmann::json doc{{"prompt", s.prompt}, {"prose", s.spec.prose}, {"plan", layout::to_json(s.plan)},
                           {"attrs", attrs}};
  const std::string text = doc.dump(2) + "\n";
  return io::make_tar({{"char_map.png", io::encode_png(cm.index_map)},
                       {"cond.png", io::encode_png(cond.rgb)},
                       {"region.png", io::encode_png(s.region)},
                       {"plan.json", std::vector<std::uint8_t>(text.begin(), text.end())}});
}

GenerateResult generate_image(const Session& session, const Models& models, const GatewayConfig& config,
                              DecoderKind decoder, std::uint64_t seed, const RgbImage* init_image) {
  if (!models.vae || !models.denoiser) throw Error("not_found", "models are not loaded", "sample");
  const int w = session.spec.canvas_w, h = session.spec.canvas_h;

  staged("layout", [&] {
    if (w != config.canvas || h != config.canvas) {
      throw ContractError("session canvas " + std::to_string(w) + "x" + std::to_string(h) +
                          " does not match the model canvas " + std::to_string(config.canvas));
    }
    check_plan(session.plan);
    return 0;
  });

  diffusion::Conditioning cond = staged("masks", [&] {
    diffusion::Conditioning c;
    c.char_mask = masks::build_char_mask(session.plan, w, h);
    c.cond_mask = masks::build_cond_mask(session.plan, session.attrs, w, h);
    c.region = session.region;
    c.prose = session.spec.prose;
    return c;
  });

  const diffusion::Latent z = staged("sample", [&] {
    diffusion::SampleOptions opts;
    opts.cfg_scale = config.cfg_scale;
    opts.init_image = init_image;
    return diffusion::sample(cond, models.denoiser->schedule(), config.blend, *models.denoiser, *models.vae, seed, opts);
  });

  const nn::Tensor<float> decoded = staged("decode", [&] {
    switch (decoder) {
      case DecoderKind::Vanilla:
        return models.vae->decode(z);
      case DecoderKind::Enhance:
        if (!models.enhancer) throw NotFoundError("no enhancer loaded; run `ctext train-enhancer`");
        return enhance::enhance_decoded(models.vae->decode(z), *models.enhancer);
      case DecoderKind::Consistency: {
        if (!models.cm_backbone) throw NotFoundError("no consistency backbone loaded; run `ctext pretrain-cm`");
        const auto mask = nn::index_maps({&cond.char_mask.index_map});
        return consistency::decode_consistent(*models.cm_backbone, models.cm_adapter.get(), z, mask, config.cm_steps,
                                              seed);
      }
    }
    throw ContractError("unknown decoder");
  });

  return staged("encode", [&] {
    GenerateResult r;
    r.image = nn::tensor_to_image(decoded);
    r.png = io::encode_png(r.image);
    r.bundle = make_bundle(session);
    return r;
  });
}

}  // namespace customtext::gateway
