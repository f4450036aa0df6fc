#pragma once

#include "detlens/dataset.hpp"
#include "detlens/geometry.hpp"
#include "detlens/image.hpp"

#include <json.hpp>

#include <filesystem>
#include <istream>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace detlens {

enum class DetectorKind { http, subprocess, mock };

enum class ImageTransport { automatic, path, png_b64 };

struct DetectorConfig {
  DetectorKind kind{DetectorKind::mock};
  std::string endpoint;               // http: base URL, e.g. http://127.0.0.1:9000
  std::vector<std::string> command;   // subprocess: argv
  double score_threshold{0.5};
  int request_parallelism{1};
  double timeout_seconds{30.0};
  int max_attempts{3};
  double backoff_seconds{0.05};
  ImageTransport transport{ImageTransport::automatic};
  // mock only
  std::optional<std::filesystem::path> mock_reference;
  double visibility_threshold{0.5};
};

/// Throws std::invalid_argument on out-of-range fields.
void validate(const DetectorConfig& config);
DetectorConfig detector_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const DetectorConfig& config);
DetectorConfig load_detector_config(const std::filesystem::path& path);

/// Black-box detector. Implementations must be safe to call concurrently
/// up to parallelism() callers.
class Detector {
 public:
  virtual ~Detector() = default;

  /// `source` names the file the pixels came from when they are unmodified,
  /// letting local backends read it directly.
  virtual std::vector<Detection> detect(const Image& image, std::string_view record_id,
                                        const std::filesystem::path* source = nullptr) = 0;

  virtual int parallelism() const { return 1; }
};

struct MockDetectorSpec {
  DatasetManifest reference;
  double visibility_threshold{0.5};
};

/// Simulated detector: every non-ignore reference box is emitted with
/// objectness = mean over its pixels of perturbed / max(1, original)
/// intensity, when that fraction reaches the visibility threshold.
std::vector<Detection> mock_detect(const MockDetectorSpec& spec, const Image& perturbed, const Image& original,
                                   std::string_view record_id);

class MockDetector final : public Detector {
 public:
  MockDetector(MockDetectorSpec spec, double score_threshold = 0.0, int parallelism = 1);
  ~MockDetector() override;

  std::vector<Detection> detect(const Image& image, std::string_view record_id,
                                const std::filesystem::path* source = nullptr) override;
  int parallelism() const override { return parallelism_; }

  const MockDetectorSpec& spec() const { return spec_; }

 private:
  struct Cache;
  MockDetectorSpec spec_;
  double score_threshold_;
  int parallelism_;
  std::unique_ptr<Cache> cache_;
};

struct Capabilities {
  int protocol{1};
  std::vector<std::string> accepts;

  bool accepts_path() const;
  bool accepts_png() const;
};

// Wire protocol (identical payloads over HTTP and subprocess stdio):
//   handshake: {"protocol": 1, "accepts": ["path", "png_b64"]}
//   request:   {"req_id", "image": {"path"} | {"png_b64"}, "score_threshold", "record_id"}
//   response:  {"req_id", "detections": [{"box", "objectness", "class_probs"?}]}
Capabilities parse_handshake(const nlohmann::json& j);
nlohmann::json handshake_json(const Capabilities& caps);

/// Validates a response and returns detections with objectness >= threshold.
/// Throws ProtocolError naming the offending field.
std::vector<Detection> parse_response(const nlohmann::json& j, std::string_view expected_req_id, double score_threshold);
nlohmann::json detections_to_json(const std::vector<Detection>& detections);
std::vector<Detection> detections_from_json(const nlohmann::json& j);

/// Backend side: decodes one request, runs `detector`, builds the response.
/// Failures are reported as {"req_id", "error"}.
nlohmann::json handle_request(Detector& detector, const nlohmann::json& request);

/// Backend side of the subprocess transport: prints the handshake and then
/// answers one request per input line until EOF.
void serve_line_protocol(Detector& detector, std::istream& in, std::ostream& out);

class SubprocessDetector final : public Detector {
 public:
  explicit SubprocessDetector(DetectorConfig config);
  ~SubprocessDetector() override;

  std::vector<Detection> detect(const Image& image, std::string_view record_id,
                                const std::filesystem::path* source = nullptr) override;
  int parallelism() const override;

  const Capabilities& capabilities() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

class HttpDetector final : public Detector {
 public:
  explicit HttpDetector(DetectorConfig config);
  ~HttpDetector() override;

  std::vector<Detection> detect(const Image& image, std::string_view record_id,
                                const std::filesystem::path* source = nullptr) override;
  int parallelism() const override;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Builds the configured adapter. A mock without its own reference manifest
/// uses `fallback_reference`.
std::unique_ptr<Detector> make_detector(const DetectorConfig& config, const DatasetManifest* fallback_reference = nullptr);

/// Runs `detector` over every record (unperturbed), in manifest order.
std::vector<std::vector<Detection>> predict(Detector& detector, const DatasetManifest& manifest);

/// predictions.jsonl: one {"schema_version", "id", "detections"} object per line.
void save_predictions(const std::filesystem::path& path, const DatasetManifest& manifest,
                      const std::vector<std::vector<Detection>>& predictions);
std::vector<std::pair<std::string, std::vector<Detection>>> load_predictions(const std::filesystem::path& path);

}  // namespace detlens
