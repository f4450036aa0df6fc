#include "detlens/detector.hpp"

#include "detlens/errors.hpp"
#include "detlens/parallel.hpp"

#include <httplib.h>

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <csignal>
#include <fstream>
#include <map>
#include <mutex>
#include <random>
#include <set>
#include <thread>
#include <unordered_map>

namespace fs = std::filesystem;
using nlohmann::json;

namespace detlens {

// ---------------------------------------------------------------- config

void validate(const DetectorConfig& c) {
  if (!(c.score_threshold >= 0.0 && c.score_threshold <= 1.0))
    throw std::invalid_argument("score_threshold must lie in [0,1]");
  if (c.request_parallelism < 1) throw std::invalid_argument("request_parallelism must be >= 1");
  if (!(c.timeout_seconds > 0.0)) throw std::invalid_argument("timeout must be positive");
  if (c.max_attempts < 1) throw std::invalid_argument("max_attempts must be >= 1");
  if (!(c.visibility_threshold > 0.0 && c.visibility_threshold <= 1.0))
    throw std::invalid_argument("visibility_threshold must lie in (0,1]");
  if (c.kind == DetectorKind::http && c.endpoint.empty()) throw std::invalid_argument("http detector needs an endpoint");
  if (c.kind == DetectorKind::subprocess && c.command.empty())
    throw std::invalid_argument("subprocess detector needs a command");
}

namespace {

DetectorKind parse_kind(const std::string& s) {
  if (s == "http") return DetectorKind::http;
  if (s == "subprocess") return DetectorKind::subprocess;
  if (s == "mock") return DetectorKind::mock;
  throw ParseError("unknown detector kind '" + s + "'");
}

std::string kind_name(DetectorKind k) {
  switch (k) {
    case DetectorKind::http: return "http";
    case DetectorKind::subprocess: return "subprocess";
    case DetectorKind::mock: return "mock";
  }
  return "mock";
}

ImageTransport parse_transport(const std::string& s) {
  if (s == "auto") return ImageTransport::automatic;
  if (s == "path") return ImageTransport::path;
  if (s == "png_b64") return ImageTransport::png_b64;
  throw ParseError("unknown image transport '" + s + "'");
}

std::string transport_name(ImageTransport t) {
  switch (t) {
    case ImageTransport::automatic: return "auto";
    case ImageTransport::path: return "path";
    case ImageTransport::png_b64: return "png_b64";
  }
  return "auto";
}

}  // namespace

DetectorConfig detector_config_from_json(const json& j) {
  DetectorConfig c;
  try {
    c.kind = parse_kind(j.value("kind", std::string("mock")));
    c.endpoint = j.value("endpoint", std::string());
    if (j.contains("command")) {
      if (j["command"].is_string()) {
        c.command = {"/bin/sh", "-c", j["command"].get<std::string>()};
      } else {
        c.command = j["command"].get<std::vector<std::string>>();
      }
    }
    c.score_threshold = j.value("score_threshold", c.score_threshold);
    c.request_parallelism = j.value("request_parallelism", c.request_parallelism);
    c.timeout_seconds = j.value("timeout", c.timeout_seconds);
    c.max_attempts = j.value("max_attempts", c.max_attempts);
    c.backoff_seconds = j.value("backoff", c.backoff_seconds);
    c.transport = parse_transport(j.value("image_transport", std::string("auto")));
    if (j.contains("mock")) {
      const auto& m = j["mock"];
      if (m.contains("reference_manifest")) c.mock_reference = m["reference_manifest"].get<std::string>();
      c.visibility_threshold = m.value("visibility_threshold", c.visibility_threshold);
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("detector config: ") + e.what());
  }
  try {
    validate(c);
  } catch (const std::invalid_argument& e) {
    throw ParseError(std::string("detector config: ") + e.what());
  }
  return c;
}

json to_json(const DetectorConfig& c) {
  json j = {{"kind", kind_name(c.kind)},
            {"score_threshold", c.score_threshold},
            {"request_parallelism", c.request_parallelism},
            {"timeout", c.timeout_seconds},
            {"max_attempts", c.max_attempts},
            {"backoff", c.backoff_seconds},
            {"image_transport", transport_name(c.transport)}};
  if (!c.endpoint.empty()) j["endpoint"] = c.endpoint;
  if (!c.command.empty()) j["command"] = c.command;
  if (c.kind == DetectorKind::mock) {
    json m = {{"visibility_threshold", c.visibility_threshold}};
    if (c.mock_reference) m["reference_manifest"] = c.mock_reference->string();
    j["mock"] = std::move(m);
  }
  return j;
}

DetectorConfig load_detector_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open detector config: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError("detector config " + path.string() + ": " + e.what());
  }
  DetectorConfig c = detector_config_from_json(j);
  if (c.mock_reference && c.mock_reference->is_relative())
    c.mock_reference = (fs::absolute(path).parent_path() / *c.mock_reference).lexically_normal();
  return c;
}

// ---------------------------------------------------------------- mock

namespace {

std::vector<Detection> mock_detect_intensity(const MockDetectorSpec& spec, const Grid<float>& perturbed,
                                             const Grid<float>& original, std::string_view record_id) {
  if (perturbed.rows() != original.rows() || perturbed.cols() != original.cols())
    throw std::invalid_argument("mock detector: perturbed and original images differ in size");
  const ImageRecord& record = spec.reference.at(record_id);
  const Grid<float> ratio = perturbed / original.max(1.0f);
  const long w = static_cast<long>(ratio.cols()), h = static_cast<long>(ratio.rows());
  std::vector<Detection> out;
  for (const auto& g : record.gt_boxes) {
    if (g.tag == BoxTag::ignore) continue;
    const long x0 = std::clamp<long>(static_cast<long>(std::floor(g.box.x1)), 0, w);
    const long x1 = std::clamp<long>(static_cast<long>(std::ceil(g.box.x2)), 0, w);
    const long y0 = std::clamp<long>(static_cast<long>(std::floor(g.box.y1)), 0, h);
    const long y1 = std::clamp<long>(static_cast<long>(std::ceil(g.box.y2)), 0, h);
    if (x1 <= x0 || y1 <= y0) continue;
    const double visible = static_cast<double>(ratio.block(y0, x0, y1 - y0, x1 - x0).template cast<double>().mean());
    if (visible >= spec.visibility_threshold) out.push_back({g.box, std::min(1.0, visible), std::nullopt});
  }
  return out;
}

}  // namespace

std::vector<Detection> mock_detect(const MockDetectorSpec& spec, const Image& perturbed, const Image& original,
                                   std::string_view record_id) {
  return mock_detect_intensity(spec, perturbed.intensity(), original.intensity(), record_id);
}

struct MockDetector::Cache {
  std::mutex mu;
  std::unordered_map<std::string, std::shared_ptr<const Grid<float>>> originals;
};

MockDetector::MockDetector(MockDetectorSpec spec, double score_threshold, int parallelism)
    : spec_(std::move(spec)), score_threshold_(score_threshold), parallelism_(parallelism), cache_(std::make_unique<Cache>()) {
  if (!(spec_.visibility_threshold > 0.0 && spec_.visibility_threshold <= 1.0))
    throw std::invalid_argument("visibility threshold must lie in (0,1]");
}

MockDetector::~MockDetector() = default;

std::vector<Detection> MockDetector::detect(const Image& image, std::string_view record_id, const fs::path*) {
  std::shared_ptr<const Grid<float>> original;
  {
    std::lock_guard lock(cache_->mu);
    auto it = cache_->originals.find(std::string(record_id));
    if (it != cache_->originals.end()) original = it->second;
  }
  if (!original) {
    const ImageRecord& record = spec_.reference.at(record_id);
    auto loaded = std::make_shared<const Grid<float>>(read_image(record.path).intensity());
    std::lock_guard lock(cache_->mu);
    original = cache_->originals.emplace(std::string(record_id), std::move(loaded)).first->second;
  }
  auto dets = mock_detect_intensity(spec_, image.intensity(), *original, record_id);
  std::erase_if(dets, [&](const Detection& d) { return d.objectness < score_threshold_; });
  return dets;
}

// ---------------------------------------------------------------- protocol

bool Capabilities::accepts_path() const { return std::find(accepts.begin(), accepts.end(), "path") != accepts.end(); }
bool Capabilities::accepts_png() const { return std::find(accepts.begin(), accepts.end(), "png_b64") != accepts.end(); }

Capabilities parse_handshake(const json& j) {
  if (!j.is_object()) throw ProtocolError("handshake is not a JSON object");
  Capabilities c;
  if (!j.contains("protocol") || !j["protocol"].is_number_integer()) throw ProtocolError("handshake field 'protocol' missing or not an integer");
  c.protocol = j["protocol"].get<int>();
  if (c.protocol != 1) throw ProtocolError("handshake field 'protocol': unsupported version " + std::to_string(c.protocol));
  if (!j.contains("accepts") || !j["accepts"].is_array()) throw ProtocolError("handshake field 'accepts' missing or not an array");
  for (const auto& a : j["accepts"]) {
    if (!a.is_string()) throw ProtocolError("handshake field 'accepts' must hold strings");
    c.accepts.push_back(a.get<std::string>());
  }
  if (!c.accepts_path() && !c.accepts_png()) throw ProtocolError("handshake field 'accepts' names no supported image transport");
  return c;
}

json handshake_json(const Capabilities& caps) { return {{"protocol", caps.protocol}, {"accepts", caps.accepts}}; }

json detections_to_json(const std::vector<Detection>& detections) {
  json arr = json::array();
  for (const auto& d : detections) {
    json o = {{"box", {d.box.x1, d.box.y1, d.box.x2, d.box.y2}}, {"objectness", d.objectness}};
    if (d.class_probs) o["class_probs"] = *d.class_probs;
    arr.push_back(std::move(o));
  }
  return arr;
}

namespace {

std::vector<Detection> parse_detection_list(const json& arr, const std::string& where) {
  if (!arr.is_array()) throw ProtocolError("field '" + where + "' is not an array");
  std::vector<Detection> out;
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const json& d = arr[i];
    const std::string at = where + "[" + std::to_string(i) + "]";
    if (!d.is_object()) throw ProtocolError("field '" + at + "' is not an object");
    Detection det;
    const auto box = d.find("box");
    if (box == d.end() || !box->is_array() || box->size() != 4)
      throw ProtocolError("field '" + at + ".box' must be an array of 4 numbers");
    for (const auto& v : *box)
      if (!v.is_number()) throw ProtocolError("field '" + at + ".box' must be an array of 4 numbers");
    det.box = {(*box)[0].get<double>(), (*box)[1].get<double>(), (*box)[2].get<double>(), (*box)[3].get<double>()};
    if (!det.box.is_valid()) throw ProtocolError("field '" + at + ".box' is not a valid box");
    const auto obj = d.find("objectness");
    if (obj == d.end() || !obj->is_number()) throw ProtocolError("field '" + at + ".objectness' missing or not a number");
    det.objectness = obj->get<double>();
    if (!(det.objectness >= 0.0 && det.objectness <= 1.0)) throw ProtocolError("field '" + at + ".objectness' outside [0,1]");
    if (const auto cp = d.find("class_probs"); cp != d.end() && !cp->is_null()) {
      if (!cp->is_array()) throw ProtocolError("field '" + at + ".class_probs' is not an array");
      std::vector<double> probs;
      for (const auto& p : *cp) {
        if (!p.is_number()) throw ProtocolError("field '" + at + ".class_probs' holds a non-number");
        const double v = p.get<double>();
        if (!(v >= 0.0 && v <= 1.0)) throw ProtocolError("field '" + at + ".class_probs' entry outside [0,1]");
        probs.push_back(v);
      }
      det.class_probs = std::move(probs);
    }
    out.push_back(std::move(det));
  }
  return out;
}

}  // namespace

std::vector<Detection> detections_from_json(const json& j) { return parse_detection_list(j, "detections"); }

std::vector<Detection> parse_response(const json& j, std::string_view expected_req_id, double score_threshold) {
  if (!j.is_object()) throw ProtocolError("response is not a JSON object");
  const auto id = j.find("req_id");
  if (id == j.end() || !id->is_string()) throw ProtocolError("field 'req_id' missing or not a string");
  if (id->get<std::string>() != expected_req_id)
    throw ProtocolError("field 'req_id' is '" + id->get<std::string>() + "', expected '" + std::string(expected_req_id) + "'");
  if (const auto err = j.find("error"); err != j.end()) throw ProtocolError("backend error: " + err->dump());
  const auto dets = j.find("detections");
  if (dets == j.end()) throw ProtocolError("field 'detections' missing");
  auto out = parse_detection_list(*dets, "detections");
  std::erase_if(out, [&](const Detection& d) { return d.objectness < score_threshold; });
  return out;
}

json handle_request(Detector& detector, const json& request) {
  json response = {{"req_id", request.is_object() ? request.value("req_id", std::string()) : std::string()}};
  try {
    if (!request.is_object()) throw ProtocolError("request is not a JSON object");
    const json& img = request.at("image");
    Image image;
    fs::path source;
    if (img.contains("path")) {
      source = img["path"].get<std::string>();
      image = read_image(source);
    } else if (img.contains("png_b64")) {
      image = decode_image(base64_decode(img["png_b64"].get<std::string>()));
    } else {
      throw ProtocolError("field 'image' carries neither 'path' nor 'png_b64'");
    }
    const double threshold = request.value("score_threshold", 0.0);
    const std::string record_id = request.value("record_id", std::string());
    auto dets = detector.detect(image, record_id, source.empty() ? nullptr : &source);
    std::erase_if(dets, [&](const Detection& d) { return d.objectness < threshold; });
    response["detections"] = detections_to_json(dets);
  } catch (const std::exception& e) {
    response["error"] = e.what();
  }
  return response;
}

void serve_line_protocol(Detector& detector, std::istream& in, std::ostream& out) {
  out << handshake_json({1, {"path", "png_b64"}}).dump() << '\n' << std::flush;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json request;
    try {
      request = json::parse(line);
    } catch (const json::exception& e) {
      out << json{{"req_id", ""}, {"error", std::string("invalid request: ") + e.what()}}.dump() << '\n' << std::flush;
      continue;
    }
    out << handle_request(detector, request).dump() << '\n' << std::flush;
  }
}

// ---------------------------------------------------------------- shared adapter plumbing

namespace {

std::string truncate(const std::string& s, std::size_t n = 200) { return s.size() <= n ? s : s.substr(0, n) + "..."; }

fs::path make_temp_dir() {
  std::random_device rd;
  for (int attempt = 0; attempt < 16; ++attempt) {
    const fs::path dir = fs::temp_directory_path() / ("detlens-" + std::to_string(::getpid()) + "-" + std::to_string(rd()));
    if (fs::create_directory(dir)) return dir;
  }
  throw Error("cannot create temporary directory");
}

// Temporary PNG written for a path-transport request; removed on scope exit.
class TempImage {
 public:
  TempImage() = default;
  TempImage(const fs::path& dir, const std::string& name, const Image& image) : path_(dir / (name + ".png")) {
    write_png(path_, image);
  }
  TempImage(const TempImage&) = delete;
  TempImage& operator=(const TempImage&) = delete;
  ~TempImage() {
    if (!path_.empty()) {
      std::error_code ec;
      fs::remove(path_, ec);
    }
  }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

template <typename Attempt>
std::vector<Detection> with_retries(const DetectorConfig& config, Attempt&& attempt) {
  for (int i = 1;; ++i) {
    try {
      return attempt();
    } catch (const TransportError&) {
      if (i >= config.max_attempts) throw;
      std::this_thread::sleep_for(std::chrono::duration<double>(config.backoff_seconds * std::pow(2.0, i - 1)));
    }
  }
}

bool use_path_transport(const DetectorConfig& config, const Capabilities& caps, bool backend_is_local) {
  switch (config.transport) {
    case ImageTransport::path:
      if (!caps.accepts_path()) throw ProtocolError("backend does not accept image paths");
      return true;
    case ImageTransport::png_b64:
      if (!caps.accepts_png()) throw ProtocolError("backend does not accept png_b64 images");
      return false;
    case ImageTransport::automatic:
      if (backend_is_local && caps.accepts_path()) return true;
      if (caps.accepts_png()) return false;
      if (caps.accepts_path()) return true;
      throw ProtocolError("backend accepts no known image transport");
  }
  return false;
}

}  // namespace

// ---------------------------------------------------------------- subprocess

struct SubprocessDetector::Impl {
  DetectorConfig config;
  pid_t pid{-1};
  int to_child{-1};
  int from_child{-1};
  Capabilities caps;
  fs::path temp_dir;

  std::mutex write_mu;
  std::mutex mu;
  std::condition_variable cv;
  std::set<std::string> pending;
  std::map<std::string, json> responses;
  std::optional<std::string> fatal;
  bool eof{false};
  std::thread reader;
  std::atomic<std::uint64_t> counter{0};
  std::string buffer;

  // Reads one line; returns false on EOF. Blocks up to timeout_ms when >= 0.
  bool read_line(std::string& line, int timeout_ms) {
    for (;;) {
      if (auto nl = buffer.find('\n'); nl != std::string::npos) {
        line = buffer.substr(0, nl);
        buffer.erase(0, nl + 1);
        return true;
      }
      if (timeout_ms >= 0) {
        pollfd pfd{from_child, POLLIN, 0};
        const int r = ::poll(&pfd, 1, timeout_ms);
        if (r == 0) throw TransportError("timed out waiting for detector backend");
        if (r < 0 && errno != EINTR) throw TransportError("poll failed on detector backend pipe");
      }
      char chunk[65536];
      const ssize_t n = ::read(from_child, chunk, sizeof chunk);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) {
        if (!buffer.empty()) {
          line = std::move(buffer);
          buffer.clear();
          return true;
        }
        return false;
      }
      buffer.append(chunk, static_cast<std::size_t>(n));
    }
  }

  void reader_loop() {
    std::string line;
    for (;;) {
      bool got = false;
      try {
        got = read_line(line, -1);
      } catch (...) {
        got = false;
      }
      if (!got) {
        std::lock_guard lock(mu);
        eof = true;
        cv.notify_all();
        return;
      }
      if (line.empty()) continue;
      json j;
      try {
        j = json::parse(line);
      } catch (const json::exception&) {
        std::lock_guard lock(mu);
        fatal = "detector backend emitted invalid JSON: " + truncate(line);
        cv.notify_all();
        continue;
      }
      std::lock_guard lock(mu);
      const std::string id = j.is_object() && j.contains("req_id") && j["req_id"].is_string() ? j["req_id"].get<std::string>() : "";
      if (pending.count(id)) {
        responses[id] = std::move(j);
        cv.notify_all();
      } else if (id.empty()) {
        fatal = "detector backend response lacks field 'req_id': " + truncate(line);
        cv.notify_all();
      }
      // Responses for abandoned (timed-out) requests are dropped.
    }
  }

  void write_line(const std::string& s) {
    std::lock_guard lock(write_mu);
    std::size_t off = 0;
    while (off < s.size()) {
      const ssize_t n = ::write(to_child, s.data() + off, s.size() - off);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) throw TransportError("detector backend closed its input");
      off += static_cast<std::size_t>(n);
    }
  }
};

SubprocessDetector::SubprocessDetector(DetectorConfig config) : impl_(std::make_unique<Impl>()) {
  validate(config);
  impl_->config = std::move(config);
  std::signal(SIGPIPE, SIG_IGN);

  int in_pipe[2], out_pipe[2];
  if (::pipe2(in_pipe, O_CLOEXEC) != 0) throw Error("pipe failed");
  if (::pipe2(out_pipe, O_CLOEXEC) != 0) {
    ::close(in_pipe[0]);
    ::close(in_pipe[1]);
    throw Error("pipe failed");
  }
  std::vector<char*> argv;
  for (auto& a : impl_->config.command) argv.push_back(a.data());
  argv.push_back(nullptr);

  const pid_t pid = ::fork();
  if (pid < 0) throw Error("fork failed");
  if (pid == 0) {
    ::setpgid(0, 0);
    ::dup2(in_pipe[0], STDIN_FILENO);
    ::dup2(out_pipe[1], STDOUT_FILENO);
    ::execvp(argv[0], argv.data());
    ::_exit(127);
  }
  ::setpgid(pid, pid);
  ::close(in_pipe[0]);
  ::close(out_pipe[1]);
  impl_->pid = pid;
  impl_->to_child = in_pipe[1];
  impl_->from_child = out_pipe[0];

  std::string line;
  try {
    const int timeout_ms = static_cast<int>(impl_->config.timeout_seconds * 1000.0);
    if (!impl_->read_line(line, timeout_ms)) throw TransportError("detector backend exited before its handshake");
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception&) {
      throw ProtocolError("detector backend handshake is not JSON: " + truncate(line));
    }
    impl_->caps = parse_handshake(j);
  } catch (...) {
    ::close(impl_->to_child);
    ::close(impl_->from_child);
    ::kill(-pid, SIGKILL);
    ::waitpid(pid, nullptr, 0);
    impl_->pid = -1;
    throw;
  }
  impl_->temp_dir = make_temp_dir();
  impl_->reader = std::thread([this] { impl_->reader_loop(); });
}

SubprocessDetector::~SubprocessDetector() {
  if (!impl_ || impl_->pid < 0) return;
  ::close(impl_->to_child);
  bool exited = false;
  for (int i = 0; i < 100 && !exited; ++i) {
    if (::waitpid(impl_->pid, nullptr, WNOHANG) == impl_->pid) exited = true;
    else std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  // Helpers the backend spawned may still hold its stdout open.
  ::kill(-impl_->pid, SIGKILL);
  if (!exited) ::waitpid(impl_->pid, nullptr, 0);
  if (impl_->reader.joinable()) impl_->reader.join();
  ::close(impl_->from_child);
  std::error_code ec;
  fs::remove_all(impl_->temp_dir, ec);
}

const Capabilities& SubprocessDetector::capabilities() const { return impl_->caps; }

int SubprocessDetector::parallelism() const { return impl_->config.request_parallelism; }

std::vector<Detection> SubprocessDetector::detect(const Image& image, std::string_view record_id, const fs::path* source) {
  Impl& s = *impl_;
  const bool by_path = use_path_transport(s.config, s.caps, true);
  return with_retries(s.config, [&]() -> std::vector<Detection> {
    const std::string req_id = "r" + std::to_string(s.counter.fetch_add(1));
    std::optional<TempImage> temp;
    json img;
    if (by_path) {
      if (source) {
        img = {{"path", source->string()}};
      } else {
        temp.emplace(s.temp_dir, req_id, image);
        img = {{"path", temp->path().string()}};
      }
    } else {
      img = {{"png_b64", base64_encode(encode_png(image))}};
    }
    const json request = {{"req_id", req_id},
                          {"image", std::move(img)},
                          {"score_threshold", s.config.score_threshold},
                          {"record_id", std::string(record_id)}};
    {
      std::lock_guard lock(s.mu);
      if (s.fatal) throw ProtocolError(*s.fatal);
      if (s.eof) throw TransportError("detector backend has exited");
      s.pending.insert(req_id);
    }
    try {
      s.write_line(request.dump() + "\n");
    } catch (...) {
      std::lock_guard lock(s.mu);
      s.pending.erase(req_id);
      throw;
    }
    std::unique_lock lock(s.mu);
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(s.config.timeout_seconds);
    s.cv.wait_until(lock, deadline, [&] { return s.responses.count(req_id) || s.fatal || s.eof; });
    s.pending.erase(req_id);
    if (auto it = s.responses.find(req_id); it != s.responses.end()) {
      json response = std::move(it->second);
      s.responses.erase(it);
      lock.unlock();
      return parse_response(response, req_id, s.config.score_threshold);
    }
    if (s.fatal) throw ProtocolError(*s.fatal);
    if (s.eof) throw TransportError("detector backend exited while request " + req_id + " was pending");
    throw TransportError("detector request " + req_id + " timed out");
  });
}

// ---------------------------------------------------------------- http

struct HttpDetector::Impl {
  DetectorConfig config;
  std::once_flag caps_once;
  std::optional<Capabilities> caps;
  std::exception_ptr caps_error;
  std::atomic<std::uint64_t> counter{0};
  fs::path temp_dir;
  bool local{false};

  std::unique_ptr<httplib::Client> client() const {
    auto c = std::make_unique<httplib::Client>(config.endpoint);
    const auto secs = static_cast<time_t>(config.timeout_seconds);
    const auto usecs = static_cast<time_t>((config.timeout_seconds - static_cast<double>(secs)) * 1e6);
    c->set_connection_timeout(secs, usecs);
    c->set_read_timeout(secs, usecs);
    c->set_write_timeout(secs, usecs);
    return c;
  }

  const Capabilities& capabilities() {
    std::call_once(caps_once, [&] {
      try {
        caps = with_retries_caps();
      } catch (...) {
        caps_error = std::current_exception();
      }
    });
    if (caps_error) std::rethrow_exception(caps_error);
    return *caps;
  }

  Capabilities with_retries_caps() {
    for (int i = 1;; ++i) {
      auto res = client()->Get("/capabilities");
      if (res) {
        if (res->status != 200) throw ProtocolError("GET /capabilities returned status " + std::to_string(res->status));
        json j;
        try {
          j = json::parse(res->body);
        } catch (const json::exception&) {
          throw ProtocolError("GET /capabilities returned invalid JSON: " + truncate(res->body));
        }
        return parse_handshake(j);
      }
      if (i >= config.max_attempts)
        throw TransportError("cannot reach detector at " + config.endpoint + ": " + httplib::to_string(res.error()));
      std::this_thread::sleep_for(std::chrono::duration<double>(config.backoff_seconds * std::pow(2.0, i - 1)));
    }
  }
};

HttpDetector::HttpDetector(DetectorConfig config) : impl_(std::make_unique<Impl>()) {
  validate(config);
  impl_->config = std::move(config);
  const std::string& e = impl_->config.endpoint;
  impl_->local = e.find("://localhost") != std::string::npos || e.find("://127.") != std::string::npos ||
                 e.find("://[::1]") != std::string::npos;
}

HttpDetector::~HttpDetector() {
  if (impl_ && !impl_->temp_dir.empty()) {
    std::error_code ec;
    fs::remove_all(impl_->temp_dir, ec);
  }
}

int HttpDetector::parallelism() const { return impl_->config.request_parallelism; }

std::vector<Detection> HttpDetector::detect(const Image& image, std::string_view record_id, const fs::path* source) {
  Impl& s = *impl_;
  const Capabilities& caps = s.capabilities();
  const bool by_path = use_path_transport(s.config, caps, s.local);
  static std::mutex temp_mu;
  if (by_path && !source) {
    std::lock_guard lock(temp_mu);
    if (s.temp_dir.empty()) s.temp_dir = make_temp_dir();
  }
  return with_retries(s.config, [&]() -> std::vector<Detection> {
    const std::string req_id = "h" + std::to_string(s.counter.fetch_add(1));
    std::optional<TempImage> temp;
    json img;
    if (by_path) {
      if (source) {
        img = {{"path", source->string()}};
      } else {
        temp.emplace(s.temp_dir, req_id, image);
        img = {{"path", temp->path().string()}};
      }
    } else {
      img = {{"png_b64", base64_encode(encode_png(image))}};
    }
    const json request = {{"req_id", req_id},
                          {"image", std::move(img)},
                          {"score_threshold", s.config.score_threshold},
                          {"record_id", std::string(record_id)}};
    auto res = s.client()->Post("/detect", request.dump(), "application/json");
    if (!res) throw TransportError("detector request failed: " + httplib::to_string(res.error()));
    if (res->status >= 500) throw TransportError("detector returned status " + std::to_string(res->status));
    if (res->status != 200) throw ProtocolError("detector returned status " + std::to_string(res->status) + ": " + truncate(res->body));
    json j;
    try {
      j = json::parse(res->body);
    } catch (const json::exception&) {
      throw ProtocolError("detector returned invalid JSON: " + truncate(res->body));
    }
    return parse_response(j, req_id, s.config.score_threshold);
  });
}

// ---------------------------------------------------------------- factory & batch prediction

std::unique_ptr<Detector> make_detector(const DetectorConfig& config, const DatasetManifest* fallback_reference) {
  validate(config);
  switch (config.kind) {
    case DetectorKind::http: return std::make_unique<HttpDetector>(config);
    case DetectorKind::subprocess: return std::make_unique<SubprocessDetector>(config);
    case DetectorKind::mock: {
      MockDetectorSpec spec;
      spec.visibility_threshold = config.visibility_threshold;
      if (config.mock_reference) {
        spec.reference = load_manifest(*config.mock_reference);
      } else if (fallback_reference) {
        spec.reference = *fallback_reference;
      } else {
        throw std::invalid_argument("mock detector needs a reference manifest");
      }
      return std::make_unique<MockDetector>(std::move(spec), config.score_threshold, config.request_parallelism);
    }
  }
  throw std::invalid_argument("unknown detector kind");
}

std::vector<std::vector<Detection>> predict(Detector& detector, const DatasetManifest& manifest) {
  std::vector<std::vector<Detection>> out(manifest.records.size());
  parallel_for(manifest.records.size(), detector.parallelism(), [&](std::size_t i) {
    const auto& r = manifest.records[i];
    const Image image = read_image(r.path);
    out[i] = detector.detect(image, r.id, &r.path);
  });
  return out;
}

void save_predictions(const fs::path& path, const DatasetManifest& manifest,
                      const std::vector<std::vector<Detection>>& predictions) {
  if (predictions.size() != manifest.records.size()) throw std::invalid_argument("one prediction list per record required");
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write predictions: " + path.string());
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    out << json{{"schema_version", 1}, {"id", manifest.records[i].id}, {"detections", detections_to_json(predictions[i])}}.dump()
        << '\n';
  }
}

std::vector<std::pair<std::string, std::vector<Detection>>> load_predictions(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open predictions: " + path.string());
  std::vector<std::pair<std::string, std::vector<Detection>>> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      out.emplace_back(j.at("id").get<std::string>(), detections_from_json(j.at("detections")));
    } catch (const std::exception& e) {
      throw ParseError("predictions line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace detlens
