#pragma once

#include "detlens/errors.hpp"
#include "detlens/pipeline.hpp"

#include <json.hpp>

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

namespace detlens {

enum class ApiCode { not_found, bad_request, conflict, run_in_progress, internal };

std::string to_string(ApiCode code);

struct ApiError : Error {
  ApiError(int status, ApiCode code, const std::string& message) : Error(message), status(status), code(code) {}
  int status;
  ApiCode code;
};

/// {"code": ..., "message": ...}
nlohmann::json api_error_json(ApiCode code, const std::string& message);

struct ServiceOptions {
  std::filesystem::path runs_root;
  /// Served at "/" when set.
  std::optional<std::filesystem::path> static_dir;
  /// Used by remediation child runs; defaults to make_detector.
  DetectorFactory detector_factory;
  std::size_t page_size{50};
};

/// Local HTTP view over a runs directory. Routes:
///   GET  /healthz
///   GET  /api/runs
///   GET  /api/runs/{id}
///   GET  /api/runs/{id}/stats
///   GET  /api/runs/{id}/images?category=&page=
///   GET  /api/runs/{id}/images/{img}/explanations
///   GET  /api/runs/{id}/files/explanations/...
///   GET  /api/runs/{id}/audit
///   GET  /api/runs/{id}/annotations,   POST /api/runs/{id}/annotations
///   GET  /api/runs/{id}/remediations,  POST /api/runs/{id}/remediations
///   GET  /api/compare?base=&target=
class Service {
 public:
  explicit Service(ServiceOptions options);
  ~Service();

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Binds without serving. Port 0 picks a free port. Returns the bound port.
  int bind(const std::string& host, int port);
  /// Serves until stop(); requires bind().
  void run();
  /// Blocks until run() is accepting connections.
  void wait_until_ready();
  void stop();
  /// Blocks until every remediation started so far has finished.
  void wait_for_remediations();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Splits "host:port"; a bare host gets the default port 7878.
std::pair<std::string, int> parse_bind_address(const std::string& address);

}  // namespace detlens
