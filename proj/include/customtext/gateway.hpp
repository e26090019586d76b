#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "customtext/consistency.hpp"
#include "customtext/diffusion.hpp"
#include "customtext/enhance.hpp"
#include "customtext/layout.hpp"
#include "customtext/masks.hpp"

namespace httplib {
class Server;
}

namespace customtext::gateway {

enum class DecoderKind { Vanilla, Enhance, Consistency };

std::string to_string(DecoderKind k);
DecoderKind decoder_from_string(const std::string& s);

// ---------------------------------------------------------------------------
// Configuration and models.
// ---------------------------------------------------------------------------

struct ModelPaths {
  std::filesystem::path vae, denoiser, enhancer, cm_backbone, cm_adapter;
};

struct GatewayConfig {
  int canvas = 64;
  int steps = 50;  // sampling steps T
  diffusion::BlendParams blend;
  double cfg_scale = 1.0;
  int cm_steps = 1;  // consistency decode steps
  ModelPaths models;
  int workers = 2;
  int queue_capacity = 16;

  void validate() const;
  nlohmann::json to_json() const;
  // Relative model paths resolve against `base`.
  static GatewayConfig from_json(const nlohmann::json& doc, const std::filesystem::path& base = {});
};

struct Models {
  std::shared_ptr<const diffusion::Vae> vae;
  std::shared_ptr<const diffusion::Denoiser> denoiser;
  std::shared_ptr<const enhance::EnhancerParams<float>> enhancer;
  std::shared_ptr<const consistency::Backbone<float>> cm_backbone;
  std::shared_ptr<const consistency::Adapter<float>> cm_adapter;
  // Content hashes of the checkpoints, keyed by role.
  std::map<std::string, std::string> hashes;
};

// Loads every configured checkpoint. The VAE and denoiser are required;
// missing files raise not_found errors naming the training subcommand.
Models load_models(const ModelPaths& paths);
// Checkpoint hash of an in-memory model set (for records when models were not loaded from disk).
void fill_hashes(Models& models);

// ---------------------------------------------------------------------------
// Sessions.
// ---------------------------------------------------------------------------

struct Snapshot {
  int index = 0;
  nlohmann::json edits = nlohmann::json::array();  // edits applied since the previous snapshot
  std::string image;                                // path relative to the session directory
  std::string image_sha256;
  std::string bundle;
  std::uint64_t seed = 0;
  DecoderKind decoder = DecoderKind::Vanilla;
  std::optional<int> init;  // snapshot whose image seeded in-painting
  std::map<std::string, std::string> checkpoints;
};

struct Session {
  std::string id;
  std::string prompt;
  layout::PromptSpec spec;
  std::vector<glyph::FontAttributes> attrs;
  layout::LayoutPlan plan;
  nlohmann::json region_spec = {{"mode", "words"}, {"margin", 2}};
  masks::RegionMask region;
  std::uint64_t seed = 0;
  DecoderKind decoder = DecoderKind::Vanilla;
  nlohmann::json pending = nlohmann::json::array();
  std::vector<Snapshot> history;
  int version = 0;  // number of committed records

  nlohmann::json to_json() const;
  static Session from_json(const nlohmann::json& doc);
};

struct CreateRequest {
  std::string prompt;
  std::vector<glyph::FontAttributes> attrs;  // one per span; empty means defaults
  std::uint64_t seed = 0;
  DecoderKind decoder = DecoderKind::Vanilla;
  int canvas = 64;
};

Session create_session(const std::string& id, const CreateRequest& request);

// Text and/or attribute change of span k. Attribute patch keys: font,
// size_px, fill, background (null clears it). Fill/background changes keep
// every box; text changes go through the incremental editor; font or size
// changes re-lay out the prompt. Throws without touching `session`.
void edit_span(Session& session, int span, const nlohmann::json& patch);
// {"mode": "full"} | {"mode": "words", "margin": m} | {"mode": "boxes", "boxes": [[x, y, w, h], ...]}
void edit_region(Session& session, const nlohmann::json& region_spec);

masks::RegionMask build_region(const nlohmann::json& region_spec, const layout::LayoutPlan& plan, int w, int h);

// ---------------------------------------------------------------------------
// Generation.
// ---------------------------------------------------------------------------

struct GenerateResult {
  RgbImage image;
  std::vector<std::uint8_t> png;
  std::vector<std::uint8_t> bundle;  // tar of char_map.png, cond.png, region.png, plan.json
};

// layout -> masks -> sample -> decode -> PNG. Pure given (session, seed,
// decoder, models, init image). With `init_image`, pixels outside the
// session region are kept. Errors carry the failing stage.
GenerateResult generate_image(const Session& session, const Models& models, const GatewayConfig& config,
                              DecoderKind decoder, std::uint64_t seed, const RgbImage* init_image = nullptr);

std::vector<std::uint8_t> make_bundle(const Session& session);

// ---------------------------------------------------------------------------
// Persistence: one append-only records.jsonl per session plus image and
// bundle files.
// ---------------------------------------------------------------------------

class SessionStore {
 public:
  explicit SessionStore(std::filesystem::path root);

  // `make` receives the fresh id.
  Session create(const std::function<Session(const std::string&)>& make);
  Session get(const std::string& id) const;
  // Runs `fn` on the current state under the session's lock and appends the
  // result when `fn` returns normally.
  Session update(const std::string& id, const std::string& op, const std::function<void(Session&)>& fn);
  std::filesystem::path dir(const std::string& id) const;
  std::vector<std::string> list() const;

 private:
  std::mutex& lock_for(const std::string& id);
  void append(const Session& s, const std::string& op);

  std::filesystem::path root_;
  mutable std::mutex mu_;
  std::map<std::string, std::unique_ptr<std::mutex>> locks_;
  mutable std::map<std::string, Session> cache_;
  int next_ = 1;
};

// ---------------------------------------------------------------------------
// Jobs.
// ---------------------------------------------------------------------------

enum class JobState { Queued, Running, Done, Failed };
std::string to_string(JobState s);

struct JobStatus {
  std::string id;
  JobState state = JobState::Queued;
  nlohmann::json result;
  nlohmann::json error;
};

class JobPool {
 public:
  JobPool(int workers, int capacity);
  ~JobPool();
  JobPool(const JobPool&) = delete;
  JobPool& operator=(const JobPool&) = delete;

  // Throws ContractError("busy") when the queue is full.
  std::string submit(std::function<nlohmann::json()> work);
  JobStatus status(const std::string& id) const;
  // Blocks until the job leaves the queued/running states.
  JobStatus wait(const std::string& id) const;

 private:
  void run();

  int capacity_;
  mutable std::mutex mu_;
  mutable std::condition_variable cv_, done_cv_;
  std::deque<std::pair<std::string, std::function<nlohmann::json()>>> queue_;
  std::map<std::string, JobStatus> jobs_;
  std::uint64_t next_ = 1;
  bool stopping_ = false;
  std::vector<std::thread> threads_;
};

// Error body {stage, code, message}.
nlohmann::json error_json(const std::exception& e);

// ---------------------------------------------------------------------------
// Service and HTTP surface.
// ---------------------------------------------------------------------------

class Service {
 public:
  Service(GatewayConfig config, Models models, std::filesystem::path data_dir);

  Session create(const nlohmann::json& body);
  Session get(const std::string& id) const { return store_.get(id); }
  Session patch_span(const std::string& id, int span, const nlohmann::json& body);
  Session patch_region(const std::string& id, const nlohmann::json& body);
  // Returns the job id; the job appends a snapshot when it finishes.
  std::string generate(const std::string& id, const nlohmann::json& body);
  // Synchronous variant used by the CLI and tests. Body keys: decoder, seed,
  // inpaint (keep the latest image outside the region).
  Snapshot generate_now(const std::string& id, const nlohmann::json& body);
  JobStatus job(const std::string& id) const { return jobs_.status(id); }
  JobStatus wait(const std::string& id) const { return jobs_.wait(id); }
  std::vector<std::uint8_t> image(const std::string& id, int n) const;
  std::vector<std::uint8_t> bundle(const std::string& id, int n) const;

  const GatewayConfig& config() const { return config_; }

 private:
  GatewayConfig config_;
  Models models_;
  SessionStore store_;
  JobPool jobs_;
};

void register_routes(httplib::Server& server, Service& service);

}  // namespace customtext::gateway
