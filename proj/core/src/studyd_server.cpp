#include "mimicry/studyd_server.hpp"

#include <httplib.h>

#include <algorithm>

#include "mimicry/error.hpp"

namespace mimicry::studyd {

struct HttpServer::Impl {
  Service& service;
  std::filesystem::path run_dir;
  httplib::Server server;

  Impl(Service& s, std::filesystem::path dir) : service(s), run_dir(std::move(dir)) {}
};

namespace {

void send_json(httplib::Response& res, const nlohmann::json& body, int status = 200) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& kind, const std::string& message) {
  send_json(res, {{"error", kind}, {"message", message}}, status);
}

// Runs a handler and maps the library's exceptions to HTTP errors.
template <typename F>
void guarded(httplib::Response& res, F&& f) {
  try {
    f();
  } catch (const AuthError& e) {
    send_error(res, 401, "auth", e.what());
  } catch (const NotFoundError& e) {
    send_error(res, 404, "not_found", e.what());
  } catch (const SequenceError& e) {
    send_error(res, 409, "sequence", e.what());
  } catch (const ValidationError& e) {
    send_error(res, 422, "validation", e.what());
  } catch (const nlohmann::json::exception& e) {
    send_error(res, 400, "bad_request", e.what());
  } catch (const std::exception& e) {
    send_error(res, 500, "internal", e.what());
  }
}

nlohmann::json parse_body(const httplib::Request& req) {
  nlohmann::json j = nlohmann::json::parse(req.body);
  if (!j.is_object()) throw ValidationError("request body must be a JSON object");
  return j;
}

}  // namespace

HttpServer::HttpServer(Service& service, const std::filesystem::path& run_dir)
    : impl_(std::make_unique<Impl>(service, run_dir)) {
  auto& svr = impl_->server;
  Impl* self = impl_.get();

  svr.Get("/health", [](const httplib::Request&, httplib::Response& res) { send_json(res, {{"ok", true}}); });

  svr.Get("/plans", [self](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] { send_json(res, {{"plans", self->service.plan_ids()}}); });
  });

  svr.Post("/session", [self](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const auto j = parse_body(req);
      const auto& vp = j.at("viewport");
      const Session s = self->service.start_session(j.at("annotator_id").get<std::string>(),
                                                    {vp.at("width").get<int>(), vp.at("height").get<int>()},
                                                    j.value("plan_id", std::string()));
      send_json(res, {{"session",
                       {{"annotator_id", s.annotator_id},
                        {"plan_id", s.plan_id},
                        {"cursor", s.cursor},
                        {"training_passed", s.training_passed}}}});
    });
  });

  svr.Get("/task/next", [self](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      if (!req.has_param("annotator")) throw ValidationError("missing annotator parameter");
      send_json(res, self->service.next_task(req.get_param_value("annotator")));
    });
  });

  svr.Post("/answer", [self](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const auto j = parse_body(req);
      send_json(res, self->service.submit_answer(j.at("annotator_id").get<std::string>(),
                                                 j.at("pair_id").get<std::string>(), j.at("answers")));
    });
  });

  svr.Get("/export", [self](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      if (!req.has_param("plan")) throw ValidationError("missing plan parameter");
      std::string body;
      for (const auto& l : self->service.export_lines(req.get_param_value("plan"))) {
        body += l;
        body += '\n';
      }
      res.set_content(body, "application/x-ndjson");
    });
  });

  svr.Get(R"(/gallery/([A-Za-z0-9_.\-]+))", [self](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const std::string artist = req.matches[1];
      const auto dir = self->run_dir / "gallery" / artist;
      std::vector<std::string> images;
      std::error_code ec;
      if (std::filesystem::is_directory(dir, ec)) {
        for (const auto& e : std::filesystem::directory_iterator(dir)) {
          if (e.is_regular_file() && e.path().extension() == ".png") {
            images.push_back("/files/gallery/" + artist + "/" + e.path().filename().string());
          }
        }
      }
      std::sort(images.begin(), images.end());
      send_json(res, {{"artist", artist}, {"images", images}});
    });
  });

  // httplib rejects paths escaping the mount point.
  svr.set_mount_point("/files", run_dir.string());
  svr.set_file_extension_and_mimetype_mapping("png", "image/png");
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  const int bound = port == 0 ? impl_->server.bind_to_any_port(host) : (impl_->server.bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw IoError("cannot bind " + host + ":" + std::to_string(port));
  return bound;
}

void HttpServer::run() { impl_->server.listen_after_bind(); }

void HttpServer::stop() {
  if (impl_ && impl_->server.is_running()) impl_->server.stop();
}

bool HttpServer::running() const { return impl_->server.is_running(); }

}  // namespace mimicry::studyd
