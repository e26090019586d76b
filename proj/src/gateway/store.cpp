#include <cstdio>
#include <fstream>
#include <regex>

#include "customtext/gateway.hpp"
#include "customtext/io.hpp"

namespace customtext::gateway {

namespace {

bool valid_id(const std::string& id) {
  static const std::regex re("s[0-9]{6}");
  return std::regex_match(id, re);
}

std::string format_id(char prefix, std::uint64_t n) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%c%06llu", prefix, static_cast<unsigned long long>(n));
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// SessionStore.
// ---------------------------------------------------------------------------

SessionStore::SessionStore(std::filesystem::path root) : root_(std::move(root)) {
  std::filesystem::create_directories(root_ / "sessions");
  for (const auto& entry : std::filesystem::directory_iterator(root_ / "sessions")) {
    const auto name = entry.path().filename().string();
    if (valid_id(name)) next_ = std::max(next_, std::stoi(name.substr(1)) + 1);
  }
}

std::filesystem::path SessionStore::dir(const std::string& id) const { return root_ / "sessions" / id; }

std::vector<std::string> SessionStore::list() const {
  std::vector<std::string> out;
  for (const auto& entry : std::filesystem::directory_iterator(root_ / "sessions")) {
    const auto name = entry.path().filename().string();
    if (valid_id(name) && std::filesystem::exists(entry.path() / "records.jsonl")) out.push_back(name);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::mutex& SessionStore::lock_for(const std::string& id) {
  std::lock_guard<std::mutex> g(mu_);
  auto& m = locks_[id];
  if (!m) m = std::make_unique<std::mutex>();
  return *m;
}

void SessionStore::append(const Session& s, const std::string& op) {
  const auto path = dir(s.id) / "records.jsonl";
  std::ofstream out(path, std::ios::app | std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string());
  out << nlohmann::json{{"op", op}, {"session", s.to_json()}}.dump() << "\n";
  out.flush();
  if (!out) throw IoError("cannot append to " + path.string());
}

Session SessionStore::create(const std::function<Session(const std::string&)>& make) {
  std::string id;
  {
    std::lock_guard<std::mutex> g(mu_);
    id = format_id('s', static_cast<std::uint64_t>(next_++));
  }
  Session s = make(id);
  s.id = id;
  s.version = 1;
  std::filesystem::create_directories(dir(id) / "images");
  std::filesystem::create_directories(dir(id) / "bundles");
  append(s, "create");
  std::lock_guard<std::mutex> g(mu_);
  cache_[id] = s;
  return s;
}

Session SessionStore::get(const std::string& id) const {
  {
    std::lock_guard<std::mutex> g(mu_);
    if (auto it = cache_.find(id); it != cache_.end()) return it->second;
  }
  if (!valid_id(id)) throw NotFoundError("no session '" + id + "'");
  const auto path = dir(id) / "records.jsonl";
  if (!std::filesystem::exists(path)) throw NotFoundError("no session '" + id + "'");
  std::ifstream in(path, std::ios::binary);
  std::string line, last;
  while (std::getline(in, line))
    if (!line.empty()) last = line;
  if (last.empty()) throw FormatError("session " + id + " has no records");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(last);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("session " + id + " has a corrupt record: " + e.what());
  }
  Session s = Session::from_json(doc.at("session"));
  std::lock_guard<std::mutex> g(mu_);
  cache_[id] = s;
  return s;
}

Session SessionStore::update(const std::string& id, const std::string& op, const std::function<void(Session&)>& fn) {
  get(id);  // existence check before creating a lock
  std::lock_guard<std::mutex> session_lock(lock_for(id));
  Session s = get(id);
  fn(s);
  s.version += 1;
  append(s, op);
  std::lock_guard<std::mutex> g(mu_);
  cache_[id] = s;
  return s;
}

// ---------------------------------------------------------------------------
// JobPool.
// ---------------------------------------------------------------------------

std::string to_string(JobState s) {
  switch (s) {
    case JobState::Queued:
      return "queued";
    case JobState::Running:
      return "running";
    case JobState::Done:
      return "done";
    case JobState::Failed:
      return "failed";
  }
  return "queued";
}

JobPool::JobPool(int workers, int capacity) : capacity_(capacity) {
  if (workers < 1 || capacity < 1) throw ContractError("job pool needs at least one worker and one queue slot");
  for (int i = 0; i < workers; ++i) threads_.emplace_back([this] { run(); });
}

JobPool::~JobPool() {
  {
    std::lock_guard<std::mutex> g(mu_);
    stopping_ = true;
  }
  cv_.notify_all();
  for (auto& t : threads_) t.join();
}

std::string JobPool::submit(std::function<nlohmann::json()> work) {
  std::lock_guard<std::mutex> g(mu_);
  if (static_cast<int>(queue_.size()) >= capacity_) throw Error("busy", "generation queue is full; retry later");
  const std::string id = format_id('j', next_++);
  jobs_[id] = JobStatus{id, JobState::Queued, nullptr, nullptr};
  queue_.emplace_back(id, std::move(work));
  cv_.notify_one();
  return id;
}

JobStatus JobPool::status(const std::string& id) const {
  std::lock_guard<std::mutex> g(mu_);
  auto it = jobs_.find(id);
  if (it == jobs_.end()) throw NotFoundError("no job '" + id + "'");
  return it->second;
}

JobStatus JobPool::wait(const std::string& id) const {
  std::unique_lock<std::mutex> g(mu_);
  auto it = jobs_.find(id);
  if (it == jobs_.end()) throw NotFoundError("no job '" + id + "'");
  done_cv_.wait(g, [&] { return it->second.state == JobState::Done || it->second.state == JobState::Failed; });
  return it->second;
}

void JobPool::run() {
  for (;;) {
    std::pair<std::string, std::function<nlohmann::json()>> job;
    {
      std::unique_lock<std::mutex> g(mu_);
      cv_.wait(g, [&] { return stopping_ || !queue_.empty(); });
      if (queue_.empty()) return;
      job = std::move(queue_.front());
      queue_.pop_front();
      jobs_[job.first].state = JobState::Running;
    }
    JobStatus result{job.first, JobState::Done, nullptr, nullptr};
    try {
      result.result = job.second();
    } catch (const std::exception& e) {
      result.state = JobState::Failed;
      result.error = error_json(e);
    }
    {
      std::lock_guard<std::mutex> g(mu_);
      jobs_[job.first] = std::move(result);
    }
    done_cv_.notify_all();
  }
}

nlohmann::json error_json(const std::exception& e) {
  if (const auto* err = dynamic_cast<const Error*>(&e)) {
    nlohmann::json j{{"stage", err->stage()}, {"code", err->code()}, {"message", err->what()}};
    if (const auto* le = dynamic_cast<const LayoutError*>(&e)) {
      j["required"] = le->required();
      j["available"] = le->available();
      j["delta"] = le->required() - le->available();
      if (le->span_index() >= 0) j["span"] = le->span_index();
    }
    return j;
  }
  return {{"stage", ""}, {"code", "internal"}, {"message", e.what()}};
}

// ---------------------------------------------------------------------------
// Service.
// ---------------------------------------------------------------------------

namespace {

std::vector<glyph::FontAttributes> attrs_of(const nlohmann::json& body) {
  std::vector<glyph::FontAttributes> out;
  if (!body.contains("attrs")) return out;
  if (!body.at("attrs").is_array()) throw FormatError("attrs must be an array");
  for (const auto& a : body.at("attrs")) out.push_back(layout::attrs_from_json(a));
  return out;
}

std::uint64_t seed_of(const nlohmann::json& j) {
  if (!j.is_number_unsigned() && !(j.is_number_integer() && j.get<std::int64_t>() >= 0)) {
    throw FormatError("seed must be a non-negative integer");
  }
  return j.get<std::uint64_t>();
}

struct GenerateBody {
  std::optional<DecoderKind> decoder;
  std::optional<std::uint64_t> seed;
  bool inpaint = false;
};

GenerateBody parse_generate(const nlohmann::json& body) {
  GenerateBody g;
  if (body.is_null()) return g;
  if (!body.is_object()) throw FormatError("generate body must be a JSON object");
  for (const auto& [key, _] : body.items())
    if (key != "decoder" && key != "seed" && key != "inpaint") throw FormatError("unknown generate field '" + key + "'");
  if (body.contains("decoder")) {
    if (!body.at("decoder").is_string()) throw FormatError("decoder must be a string");
    g.decoder = decoder_from_string(body.at("decoder").get<std::string>());
  }
  if (body.contains("seed")) g.seed = seed_of(body.at("seed"));
  if (body.contains("inpaint")) {
    if (!body.at("inpaint").is_boolean()) throw FormatError("inpaint must be a boolean");
    g.inpaint = body.at("inpaint").get<bool>();
  }
  return g;
}

std::map<std::string, std::string> used_checkpoints(const Models& m, DecoderKind d) {
  std::vector<std::string> roles{"vae", "denoiser"};
  if (d == DecoderKind::Enhance) roles.push_back("enhancer");
  if (d == DecoderKind::Consistency) {
    roles.push_back("cm_backbone");
    roles.push_back("cm_adapter");
  }
  std::map<std::string, std::string> out;
  for (const auto& r : roles)
    if (auto it = m.hashes.find(r); it != m.hashes.end()) out[r] = it->second;
  return out;
}

}  // namespace

Service::Service(GatewayConfig config, Models models, std::filesystem::path data_dir)
    : config_(std::move(config)),
      models_(std::move(models)),
      store_(std::move(data_dir)),
      jobs_(config_.workers, config_.queue_capacity) {
  config_.validate();
  if (models_.hashes.empty()) fill_hashes(models_);
}

Session Service::create(const nlohmann::json& body) {
  if (!body.is_object()) throw FormatError("session body must be a JSON object");
  for (const auto& [key, _] : body.items())
    if (key != "prompt" && key != "attrs" && key != "seed" && key != "decoder" && key != "region") {
      throw FormatError("unknown session field '" + key + "'");
    }
  CreateRequest req;
  if (!body.contains("prompt") || !body.at("prompt").is_string()) throw FormatError("prompt must be a string");
  req.prompt = body.at("prompt").get<std::string>();
  req.attrs = attrs_of(body);
  if (body.contains("seed")) req.seed = seed_of(body.at("seed"));
  if (body.contains("decoder")) {
    if (!body.at("decoder").is_string()) throw FormatError("decoder must be a string");
    req.decoder = decoder_from_string(body.at("decoder").get<std::string>());
  }
  req.canvas = config_.canvas;
  // Validate fully before an id is taken.
  Session probe = create_session("s000000", req);
  if (body.contains("region")) edit_region(probe, body.at("region"));
  probe.pending = nlohmann::json::array();
  return store_.create([&](const std::string& id) {
    Session s = probe;
    s.id = id;
    return s;
  });
}

Session Service::patch_span(const std::string& id, int span, const nlohmann::json& body) {
  return store_.update(id, "edit_span", [&](Session& s) { edit_span(s, span, body); });
}

Session Service::patch_region(const std::string& id, const nlohmann::json& body) {
  return store_.update(id, "edit_region", [&](Session& s) { edit_region(s, body); });
}

Snapshot Service::generate_now(const std::string& id, const nlohmann::json& body) {
  const auto g = parse_generate(body);
  const auto dir = store_.dir(id);
  const Session s = store_.update(id, "generate", [&](Session& s) {
    const DecoderKind decoder = g.decoder.value_or(s.decoder);
    const std::uint64_t seed = g.seed.value_or(s.seed);
    std::optional<RgbImage> init;
    if (g.inpaint) {
      if (s.history.empty()) throw Error("contract", "in-painting needs a previous image", "sample");
      init = io::read_png_rgb(dir / s.history.back().image);
    }
    auto r = generate_image(s, models_, config_, decoder, seed, init ? &*init : nullptr);
    Snapshot snap;
    snap.index = static_cast<int>(s.history.size());
    snap.edits = s.pending;
    snap.image = "images/" + std::to_string(snap.index) + ".png";
    snap.bundle = "bundles/" + std::to_string(snap.index) + ".tar";
    snap.image_sha256 = io::sha256_hex(r.png);
    snap.seed = seed;
    snap.decoder = decoder;
    if (init) snap.init = s.history.back().index;
    snap.checkpoints = used_checkpoints(models_, decoder);
    io::write_file(dir / snap.image, r.png);
    io::write_file(dir / snap.bundle, r.bundle);
    s.pending = nlohmann::json::array();
    s.history.push_back(std::move(snap));
  });
  return s.history.back();
}

std::string Service::generate(const std::string& id, const nlohmann::json& body) {
  store_.get(id);
  parse_generate(body);
  return jobs_.submit([this, id, body] {
    const auto snap = generate_now(id, body);
    return nlohmann::json{{"session", id},
                          {"index", snap.index},
                          {"image", "/sessions/" + id + "/image/" + std::to_string(snap.index)},
                          {"bundle", "/sessions/" + id + "/bundle/" + std::to_string(snap.index)},
                          {"image_sha256", snap.image_sha256},
                          {"seed", snap.seed},
                          {"decoder", to_string(snap.decoder)}};
  });
}

std::vector<std::uint8_t> Service::image(const std::string& id, int n) const {
  const auto s = store_.get(id);
  if (n < 0 || n >= static_cast<int>(s.history.size())) {
    throw NotFoundError("session " + id + " has no image " + std::to_string(n));
  }
  return io::read_file(store_.dir(id) / s.history[n].image);
}

std::vector<std::uint8_t> Service::bundle(const std::string& id, int n) const {
  const auto s = store_.get(id);
  if (n < 0 || n >= static_cast<int>(s.history.size())) {
    throw NotFoundError("session " + id + " has no bundle " + std::to_string(n));
  }
  return io::read_file(store_.dir(id) / s.history[n].bundle);
}

}  // namespace customtext::gateway
