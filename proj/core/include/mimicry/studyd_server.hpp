#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include "mimicry/studyd.hpp"

namespace mimicry::studyd {

/// HTTP+JSON front end of a Service.
///   POST /session        {annotator_id, viewport: {width, height}, plan_id?}
///   GET  /task/next      ?annotator=
///   POST /answer         {annotator_id, pair_id, answers: {<question>: left|right}}
///   GET  /export         ?plan=   (JSON lines)
///   GET  /gallery/<artist>
///   GET  /files/<ref>    read-only files of the run directory
/// Errors come back as {"error": <kind>, "message": ...} with 400/401/404/409/422.
class HttpServer {
 public:
  HttpServer(Service& service, const std::filesystem::path& run_dir);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// Binds without serving yet; port 0 picks a free port. Returns the port.
  int bind(const std::string& host, int port);
  /// Serves until stop(); call after bind().
  void run();
  void stop();
  bool running() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace mimicry::studyd
