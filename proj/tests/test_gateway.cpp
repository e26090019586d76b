#include <doctest.h>

#include <chrono>
#include <future>
#include <thread>

#include "customtext/gateway.hpp"

#include <httplib.h>

#include "customtext/io.hpp"
#include "test_support.hpp"

using namespace customtext;
using namespace customtext::gateway;
using testsupport::ScratchDir;

namespace {

Models fresh_models() {
  Models m;
  m.vae = std::make_shared<diffusion::Vae>(1);
  m.denoiser = std::make_shared<diffusion::Denoiser>(diffusion::make_schedule(4), 2, 16);
  m.enhancer = std::make_shared<enhance::EnhancerParams<float>>(3);
  consistency::Geometry geo;
  geo.c1 = 8;
  geo.c2 = 8;
  m.cm_backbone = std::make_shared<consistency::Backbone<float>>(geo, 4);
  m.cm_adapter = std::make_shared<consistency::Adapter<float>>(geo, 5);
  fill_hashes(m);
  return m;
}

GatewayConfig small_config() {
  GatewayConfig c;
  c.steps = 4;
  c.workers = 1;
  c.queue_capacity = 4;
  return c;
}

const nlohmann::json kHello = {{"prompt", "a poster that says 'HELLO'"}, {"seed", 11}};

std::vector<std::uint8_t> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

}  // namespace

TEST_CASE("same session and seed give byte-identical PNGs across services") {
  ScratchDir a("ctext_gw_det_a"), b("ctext_gw_det_b");
  const auto models = fresh_models();
  Service sa(small_config(), models, a.path), sb(small_config(), models, b.path);
  const auto ia = sa.create(kHello).id, ib = sb.create(kHello).id;
  const auto s1 = sa.generate_now(ia, nullptr);
  const auto s2 = sb.generate_now(ib, nullptr);
  const auto s3 = sa.generate_now(ia, nullptr);
  CHECK(s1.image_sha256 == s2.image_sha256);
  CHECK(s1.image_sha256 == s3.image_sha256);
  CHECK(sa.image(ia, 0) == sb.image(ib, 0));
  CHECK(io::sha256_hex(sa.image(ia, 1)) == s1.image_sha256);
  const auto other = sa.generate_now(ia, {{"seed", 12}});
  CHECK(other.image_sha256 != s1.image_sha256);
}

TEST_CASE("zero-init enhancer reproduces the vanilla PNG") {
  const auto models = fresh_models();
  const auto s = create_session("s000001", {"sign that says 'OPEN 24'", {}, 3});
  const auto v = generate_image(s, models, small_config(), DecoderKind::Vanilla, 3);
  const auto e = generate_image(s, models, small_config(), DecoderKind::Enhance, 3);
  CHECK(v.png == e.png);
}

TEST_CASE("zero-init adapter reproduces the backbone-only PNG") {
  auto models = fresh_models();
  const auto s = create_session("s000001", {"sign that says 'OPEN 24'", {}, 3});
  const auto with = generate_image(s, models, small_config(), DecoderKind::Consistency, 3);
  models.cm_adapter.reset();
  const auto without = generate_image(s, models, small_config(), DecoderKind::Consistency, 3);
  CHECK(with.png == without.png);
}

TEST_CASE("fill and background edits keep every box") {
  auto s = create_session("s000001", {"label that says 'BIG SALE' and 'NOW'", {}, 0});
  const auto before = s.plan;
  edit_span(s, 0, {{"fill", {200, 10, 10}}, {"background", {250, 250, 250}}});
  CHECK(s.plan == before);
  CHECK(s.attrs[0].fill == Rgb8{200, 10, 10});
  REQUIRE(s.attrs[0].background.has_value());
  edit_span(s, 0, {{"background", nullptr}});
  CHECK_FALSE(s.attrs[0].background.has_value());
  CHECK(s.plan == before);
  CHECK(s.pending.size() == 2);
}

TEST_CASE("font size edits re-lay out and stay valid") {
  auto s = create_session("s000001", {"label that says 'HI'", {}, 0});
  const auto before = s.plan;
  edit_span(s, 0, {{"size_px", 12}, {"font", "mono8x12"}});
  CHECK(s.plan.spans[0].size_px == 12);
  CHECK(s.plan.words[0].box != before.words[0].box);
  CHECK(layout::validate_plan(s.plan).empty());
}

TEST_CASE("space overwrite zeroes the character mask in the overwritten slot") {
  auto s = create_session("s000001", {"a poster that says 'HELLO'", {}, 0});
  const auto slot = s.plan.words[0].char_boxes[2];
  edit_span(s, 0, {{"text", "HE LO"}});
  CHECK(s.prompt == "a poster that says 'HE LO'");
  const auto m = masks::build_char_mask(s.plan, 64, 64);
  for (int y = slot.y; y < slot.bottom(); ++y)
    for (int x = slot.x; x < slot.right(); ++x) CHECK(m.index_map.at(x, y) == 0);
}

TEST_CASE("overflowing edit raises with the required delta and leaves the session untouched") {
  ScratchDir dir("ctext_gw_overflow");
  Service svc(small_config(), fresh_models(), dir.path);
  const auto id = svc.create(kHello).id;
  const auto before = svc.get(id).to_json().dump();
  try {
    svc.patch_span(id, 0, {{"text", "HELLO ABCDEFGHIJKLMNOPQRSTUVWXYZ"}});
    FAIL("expected an overflow");
  } catch (const LayoutError& e) {
    CHECK(e.required() > e.available());
    const auto j = error_json(e);
    CHECK(j.at("code") == "layout_overflow");
    CHECK(j.at("delta").get<int>() == e.required() - e.available());
  }
  CHECK(svc.get(id).to_json().dump() == before);
  CHECK(Service(small_config(), fresh_models(), dir.path).get(id).to_json().dump() == before);

  CHECK_THROWS_AS(svc.patch_span(id, 3, {{"text", "X"}}), NotFoundError);
  CHECK_THROWS_AS(svc.patch_span(id, 0, {{"colour", {1, 2, 3}}}), FormatError);
  CHECK_THROWS_AS(svc.patch_region(id, {{"mode", "lasso"}}), FormatError);
  CHECK(svc.get(id).to_json().dump() == before);
}

TEST_CASE("regions: full, word margins and painted boxes") {
  auto s = create_session("s000001", {"a poster that says 'HELLO'", {}, 0});
  edit_region(s, {{"mode", "full"}});
  CHECK(std::all_of(s.region.data.begin(), s.region.data.end(), [](auto v) { return v == 1; }));
  edit_region(s, {{"mode", "boxes"}, {"boxes", {{60, 60, 10, 10}, {0, 0, 2, 1}}}});
  int on = 0;
  for (auto v : s.region.data) on += v;
  CHECK(on == 16 + 2);
  edit_region(s, {{"mode", "words"}, {"margin", 0}});
  CHECK(s.region == masks::word_region(s.plan, 0));
}

TEST_CASE("sessions persist as append-only records and reload") {
  ScratchDir dir("ctext_gw_store");
  std::string id;
  nlohmann::json last;
  {
    Service svc(small_config(), fresh_models(), dir.path);
    id = svc.create(kHello).id;
    svc.patch_span(id, 0, {{"fill", {0, 0, 255}}});
    svc.generate_now(id, {{"decoder", "enhance"}});
    last = svc.get(id).to_json();
  }
  Service again(small_config(), fresh_models(), dir.path);
  CHECK(again.get(id).to_json() == last);
  CHECK(last.at("version") == 3);
  CHECK(last.at("pending").empty());
  const auto& snap = last.at("history").at(0);
  CHECK(snap.at("edits").size() == 1);
  CHECK(snap.at("decoder") == "enhance");
  CHECK(snap.at("checkpoints").contains("enhancer"));
  CHECK_FALSE(snap.at("checkpoints").contains("cm_backbone"));

  std::ifstream in(dir.path / "sessions" / id / "records.jsonl");
  std::string line;
  std::vector<std::string> ops;
  while (std::getline(in, line)) ops.push_back(nlohmann::json::parse(line).at("op"));
  CHECK(ops == std::vector<std::string>{"create", "edit_span", "generate"});
  CHECK(again.create(kHello).id != id);
}

TEST_CASE("missing models and checkpoints name the stage and the training command") {
  auto models = fresh_models();
  models.enhancer.reset();
  const auto s = create_session("s000001", {"a poster that says 'HELLO'", {}, 0});
  try {
    generate_image(s, models, small_config(), DecoderKind::Enhance, 0);
    FAIL("expected a missing enhancer");
  } catch (const Error& e) {
    CHECK(e.stage() == "decode");
    CHECK(e.code() == "not_found");
    CHECK(std::string(e.what()).find("train-enhancer") != std::string::npos);
  }
  ScratchDir dir("ctext_gw_models");
  ModelPaths paths;
  paths.vae = dir.path / "vae.ckpt";
  paths.denoiser = dir.path / "denoiser.ckpt";
  try {
    load_models(paths);
    FAIL("expected a missing vae");
  } catch (const NotFoundError& e) {
    CHECK(std::string(e.what()).find("train-vae") != std::string::npos);
  }
  ckpt::save(paths.vae, fresh_models().vae->to_checkpoint());
  try {
    load_models(paths);
    FAIL("expected a missing denoiser");
  } catch (const NotFoundError& e) {
    CHECK(std::string(e.what()).find("train-denoiser") != std::string::npos);
  }
}

TEST_CASE("config round trip resolves relative model paths") {
  const auto c = GatewayConfig::from_json({{"steps", 8}, {"cm_steps", 2}, {"models", {{"vae", "m/vae.ckpt"}}}}, "/data");
  CHECK(c.steps == 8);
  CHECK(c.cm_steps == 2);
  CHECK(c.models.vae == std::filesystem::path("/data/m/vae.ckpt"));
  CHECK(c.models.enhancer.empty());
  CHECK(GatewayConfig::from_json(c.to_json()).to_json() == c.to_json());
  CHECK_THROWS_AS(GatewayConfig::from_json({{"canvas", 128}}), ContractError);
  CHECK_THROWS_AS(GatewayConfig::from_json({{"steps", "many"}}), FormatError);
}

TEST_CASE("job pool reports busy when the queue is full") {
  JobPool pool(1, 1);
  std::promise<void> release;
  auto gate = release.get_future().share();
  const auto first = pool.submit([gate] {
    gate.wait();
    return nlohmann::json(1);
  });
  while (pool.status(first).state == JobState::Queued) std::this_thread::sleep_for(std::chrono::milliseconds(1));
  const auto second = pool.submit([] { return nlohmann::json(2); });
  try {
    pool.submit([] { return nlohmann::json(3); });
    FAIL("expected busy");
  } catch (const Error& e) {
    CHECK(e.code() == "busy");
  }
  release.set_value();
  CHECK(pool.wait(first).result == 1);
  CHECK(pool.wait(second).result == 2);
  const auto failing = pool.submit([]() -> nlohmann::json { throw DomainError("nope"); });
  const auto st = pool.wait(failing);
  CHECK(st.state == JobState::Failed);
  CHECK(st.error.at("code") == "domain");
}

TEST_CASE("HTTP loop: create, edit, generate, overwrite, regenerate") {
  ScratchDir dir("ctext_gw_http");
  const auto models = fresh_models();
  Service svc(small_config(), models, dir.path);
  httplib::Server server;
  register_routes(server, svc);
  const int port = server.bind_to_any_port("127.0.0.1");
  REQUIRE(port > 0);
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  httplib::Client cli("127.0.0.1", port);
  auto json_of = [](const httplib::Result& r) { return nlohmann::json::parse(r->body); };
  auto wait_job = [&](const std::string& job) {
    for (;;) {
      auto r = cli.Get("/jobs/" + job);
      REQUIRE(r);
      const auto j = json_of(r);
      if (j.at("state") == "done" || j.at("state") == "failed") return j;
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
  };

  auto r = cli.Post("/sessions", nlohmann::json{{"prompt", "a shop sign that says 'HELLO'"}, {"seed", 5}}.dump(),
                    "application/json");
  REQUIRE(r);
  REQUIRE(r->status == 201);
  const std::string id = json_of(r).at("id");

  r = cli.Patch("/sessions/" + id + "/spans/0", nlohmann::json{{"fill", {30, 60, 200}}}.dump(), "application/json");
  REQUIRE(r->status == 200);
  r = cli.Post("/sessions/" + id + "/generate", nlohmann::json{{"decoder", "vanilla"}}.dump(), "application/json");
  REQUIRE(r->status == 202);
  auto done = wait_job(json_of(r).at("job"));
  REQUIRE(done.at("state") == "done");

  const auto slot = svc.get(id).plan.words[0].char_boxes[2];
  r = cli.Patch("/sessions/" + id + "/spans/0", nlohmann::json{{"text", "HE LO"}}.dump(), "application/json");
  REQUIRE(r->status == 200);
  r = cli.Post("/sessions/" + id + "/generate", "", "application/json");
  done = wait_job(json_of(r).at("job"));
  REQUIRE(done.at("state") == "done");

  r = cli.Get("/sessions/" + id);
  const auto doc = json_of(r);
  REQUIRE(doc.at("history").size() == 2);
  CHECK(r->get_header_value("ETag") == std::to_string(doc.at("version").get<int>()));

  auto img = cli.Get("/sessions/" + id + "/image/1");
  REQUIRE(img->status == 200);
  CHECK(img->get_header_value("Content-Type") == "image/png");
  CHECK(io::sha256_hex(bytes_of(img->body)) == doc.at("history").at(1).at("image_sha256"));

  // Gateway-only oracle: the same edits replayed without HTTP.
  auto oracle = create_session("s999999", {"a shop sign that says 'HELLO'", {}, 5});
  edit_span(oracle, 0, {{"fill", {30, 60, 200}}});
  edit_span(oracle, 0, {{"text", "HE LO"}});
  auto bundle = cli.Get("/sessions/" + id + "/bundle/1");
  REQUIRE(bundle->status == 200);
  CHECK(io::sha256_hex(bytes_of(bundle->body)) == io::sha256_hex(make_bundle(oracle)));
  const auto entries = io::read_tar(bytes_of(bundle->body));
  REQUIRE(entries.size() == 4);
  CHECK(entries[0].name == "char_map.png");
  const auto cm = io::decode_png_gray(entries[0].bytes);
  for (int y = slot.y; y < slot.bottom(); ++y)
    for (int x = slot.x; x < slot.right(); ++x) CHECK(cm.at(x, y) == 0);

  r = cli.Patch("/sessions/" + id + "/spans/0", nlohmann::json{{"text", "HELLO ABCDEFGHIJKLMNOPQRSTUVWXYZ"}}.dump(),
                "application/json");
  CHECK(r->status == 422);
  CHECK(json_of(r).at("code") == "layout_overflow");
  CHECK(json_of(cli.Get("/sessions/" + id)) == doc);

  r = cli.Get("/sessions/s424242");
  CHECK(r->status == 404);
  CHECK(json_of(r).at("code") == "not_found");
  r = cli.Post("/sessions", "{not json", "application/json");
  CHECK(r->status == 400);
  CHECK(json_of(r).at("code") == "format");
  r = cli.Post("/sessions/" + id + "/generate", nlohmann::json{{"decoder", "magic"}}.dump(), "application/json");
  CHECK(r->status == 400);
  CHECK(cli.Get("/sessions/" + id + "/image/7")->status == 404);

  r = cli.Patch("/sessions/" + id + "/region", httplib::Headers{{"If-Match", "1"}},
                nlohmann::json{{"mode", "full"}}.dump(), "application/json");
  CHECK(r->status == 200);
  CHECK(r->has_header("Warning"));

  server.stop();
  th.join();
}
