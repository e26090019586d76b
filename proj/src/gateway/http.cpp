// Eigen first: <resolv.h>, pulled in by httplib, defines a _res macro.
#include "customtext/gateway.hpp"

#include <httplib.h>

namespace customtext::gateway {

namespace {

int status_for(const std::exception& e) {
  const auto* err = dynamic_cast<const Error*>(&e);
  if (!err) return 500;
  const auto& code = err->code();
  if (code == "not_found") return 404;
  if (code == "layout_overflow") return 422;
  if (code == "busy") return 503;
  if (code == "io" || code == "internal") return 500;
  return 400;
}

void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

nlohmann::json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return nullptr;
  try {
    return nlohmann::json::parse(req.body);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("request body is not JSON: ") + e.what());
  }
}

int parse_index(const std::string& s) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw NotFoundError("'" + s + "' is not an index");
}

template <typename F>
httplib::Server::Handler guarded(F fn) {
  return [fn](const httplib::Request& req, httplib::Response& res) {
    try {
      fn(req, res);
    } catch (const std::exception& e) {
      send_json(res, status_for(e), error_json(e));
    }
  };
}

// Last write wins; a stale If-Match only earns a warning header.
void version_check(const httplib::Request& req, httplib::Response& res, const Session& before) {
  if (!req.has_header("If-Match")) return;
  if (req.get_header_value("If-Match") != std::to_string(before.version)) {
    res.set_header("Warning", "299 - \"session changed since version " + req.get_header_value("If-Match") + "\"");
  }
}

void send_session(httplib::Response& res, int status, const Session& s) {
  res.set_header("ETag", std::to_string(s.version));
  send_json(res, status, s.to_json());
}

}  // namespace

void register_routes(httplib::Server& server, Service& service) {
  server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                              {"Access-Control-Allow-Headers", "Content-Type, If-Match"},
                              {"Access-Control-Allow-Methods", "GET, POST, PATCH, OPTIONS"},
                              {"Access-Control-Expose-Headers", "ETag, Warning"}});
  server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

  server.Get("/health", [&](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, {{"status", "ok"}, {"config", service.config().to_json()}});
  });

  server.Post("/sessions", guarded([&](const httplib::Request& req, httplib::Response& res) {
                const auto s = service.create(parse_body(req));
                res.set_header("Location", "/sessions/" + s.id);
                send_session(res, 201, s);
              }));

  server.Get(R"(/sessions/([^/]+))", guarded([&](const httplib::Request& req, httplib::Response& res) {
               send_session(res, 200, service.get(req.matches[1]));
             }));

  server.Patch(R"(/sessions/([^/]+)/spans/([^/]+))",
               guarded([&](const httplib::Request& req, httplib::Response& res) {
                 const std::string id = req.matches[1];
                 version_check(req, res, service.get(id));
                 send_session(res, 200, service.patch_span(id, parse_index(req.matches[2]), parse_body(req)));
               }));

  server.Patch(R"(/sessions/([^/]+)/region)", guarded([&](const httplib::Request& req, httplib::Response& res) {
                 const std::string id = req.matches[1];
                 version_check(req, res, service.get(id));
                 send_session(res, 200, service.patch_region(id, parse_body(req)));
               }));

  server.Post(R"(/sessions/([^/]+)/generate)", guarded([&](const httplib::Request& req, httplib::Response& res) {
                const std::string job = service.generate(req.matches[1], parse_body(req));
                res.set_header("Location", "/jobs/" + job);
                send_json(res, 202, {{"job", job}, {"status", "/jobs/" + job}});
              }));

  server.Get(R"(/jobs/([^/]+))", guarded([&](const httplib::Request& req, httplib::Response& res) {
               const auto st = service.job(req.matches[1]);
               send_json(res, 200, {{"job", st.id}, {"state", to_string(st.state)}, {"result", st.result}, {"error", st.error}});
             }));

  server.Get(R"(/sessions/([^/]+)/image/([^/]+))", guarded([&](const httplib::Request& req, httplib::Response& res) {
               const auto png = service.image(req.matches[1], parse_index(req.matches[2]));
               res.set_content(std::string(png.begin(), png.end()), "image/png");
             }));

  server.Get(R"(/sessions/([^/]+)/bundle/([^/]+))", guarded([&](const httplib::Request& req, httplib::Response& res) {
               const auto tar = service.bundle(req.matches[1], parse_index(req.matches[2]));
               res.set_content(std::string(tar.begin(), tar.end()), "application/x-tar");
             }));
}

}  // namespace customtext::gateway
