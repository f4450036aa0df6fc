#include "detlens/service.hpp"

#include "detlens/dataset.hpp"

#include <httplib.h>

#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;
using nlohmann::json;

namespace detlens {

std::string to_string(ApiCode code) {
  switch (code) {
    case ApiCode::not_found: return "not_found";
    case ApiCode::bad_request: return "bad_request";
    case ApiCode::conflict: return "conflict";
    case ApiCode::run_in_progress: return "run_in_progress";
    case ApiCode::internal: return "internal";
  }
  return "internal";
}

json api_error_json(ApiCode code, const std::string& message) {
  return {{"code", to_string(code)}, {"message", message}};
}

std::pair<std::string, int> parse_bind_address(const std::string& address) {
  const auto colon = address.rfind(':');
  if (colon == std::string::npos) return {address, 7878};
  const std::string host = address.substr(0, colon);
  const std::string port = address.substr(colon + 1);
  try {
    std::size_t used = 0;
    const int p = std::stoi(port, &used);
    if (used != port.size() || p < 0 || p > 65535) throw std::out_of_range(port);
    return {host.empty() ? "127.0.0.1" : host, p};
  } catch (const std::exception&) {
    throw std::invalid_argument("invalid bind address '" + address + "'");
  }
}

namespace {

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ApiError(404, ApiCode::not_found, "missing artifact " + path.filename().string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json_file(const fs::path& path) { return json::parse(slurp(path)); }

void send_json(httplib::Response& res, const json& body, int status = 200) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

json parse_body(const httplib::Request& req) {
  try {
    json j = json::parse(req.body);
    if (!j.is_object()) throw ApiError(400, ApiCode::bad_request, "request body must be a JSON object");
    return j;
  } catch (const json::exception& e) {
    throw ApiError(400, ApiCode::bad_request, std::string("invalid JSON body: ") + e.what());
  }
}

json run_summary(const RunRecord& r) {
  json stages = json::object();
  for (Stage s : kStages) stages[to_string(s)] = r.done(s);
  json j = {{"run_id", r.run_id},
            {"created_at", r.created_at},
            {"status", to_string(r.status)},
            {"parent_run_id", r.parent_run_id ? json(*r.parent_run_id) : json(nullptr)},
            {"stages", std::move(stages)}};
  if (r.failed_stage) j["failed_stage"] = *r.failed_stage;
  if (r.remediation) j["remediation"] = *r.remediation;
  return j;
}

}  // namespace

struct Service::Impl {
  ServiceOptions options;
  httplib::Server server;
  bool bound{false};

  std::mutex mu;
  std::set<std::string> in_flight;  // parents with a running child
  std::vector<std::thread> workers;

  explicit Impl(ServiceOptions o) : options(std::move(o)) {
    if (!fs::is_directory(options.runs_root))
      throw Error("runs root '" + options.runs_root.string() + "' is not a directory");
    routes();
  }

  PipelineContext context() const { return {options.runs_root, options.detector_factory}; }

  RunRecord run(const std::string& id) const {
    try {
      return load_run(options.runs_root, id);
    } catch (const std::invalid_argument& e) {
      throw ApiError(404, ApiCode::not_found, e.what());
    }
  }

  // Artifacts of a stage that has not finished yet.
  [[noreturn]] static void not_ready(const RunRecord& r, Stage s) {
    if (r.status == RunStatus::running)
      throw ApiError(409, ApiCode::run_in_progress, "run '" + r.run_id + "' has not finished stage " + to_string(s));
    throw ApiError(404, ApiCode::not_found, "run '" + r.run_id + "' has no " + to_string(s) + " artifact");
  }

  json stage_json(const RunRecord& r, Stage s) const {
    if (!r.done(s)) not_ready(r, s);
    return read_json_file(run_dir(options.runs_root, r.run_id) / RunRecord::artifact(s));
  }

  template <typename F>
  httplib::Server::Handler wrap(F&& f) {
    return [this, f = std::forward<F>(f)](const httplib::Request& req, httplib::Response& res) {
      try {
        f(req, res);
      } catch (const ApiError& e) {
        send_json(res, api_error_json(e.code, e.what()), e.status);
      } catch (const NotFoundError& e) {
        send_json(res, api_error_json(ApiCode::not_found, e.what()), 404);
      } catch (const ConflictError& e) {
        send_json(res, api_error_json(ApiCode::conflict, e.what()), 409);
      } catch (const std::invalid_argument& e) {
        send_json(res, api_error_json(ApiCode::bad_request, e.what()), 400);
      } catch (const json::exception& e) {
        send_json(res, api_error_json(ApiCode::bad_request, e.what()), 400);
      } catch (const std::exception& e) {
        send_json(res, api_error_json(ApiCode::internal, e.what()), 500);
      }
    };
  }

  void routes() {
    server.Get("/healthz", wrap([](const httplib::Request&, httplib::Response& res) {
      send_json(res, {{"status", "ok"}});
    }));

    server.Get("/api/runs", wrap([this](const httplib::Request&, httplib::Response& res) {
      json runs = json::array();
      for (const auto& r : list_runs(options.runs_root)) runs.push_back(run_summary(r));
      send_json(res, {{"runs", std::move(runs)}});
    }));

    server.Get(R"(/api/runs/([^/]+))", wrap([this](const httplib::Request& req, httplib::Response& res) {
      const RunRecord r = run(req.matches[1]);
      send_json(res, read_json_file(run_dir(options.runs_root, r.run_id) / "run.json"));
    }));

    server.Get(R"(/api/runs/([^/]+)/stats)", wrap([this](const httplib::Request& req, httplib::Response& res) {
      const RunRecord r = run(req.matches[1]);
      json stats = stage_json(r, Stage::categorize).at("stats");
      stats["run_id"] = r.run_id;
      send_json(res, stats);
    }));

    server.Get(R"(/api/runs/([^/]+)/images)", wrap([this](const httplib::Request& req, httplib::Response& res) {
      const RunRecord r = run(req.matches[1]);
      std::optional<std::string> category;
      if (req.has_param("category") && !req.get_param_value("category").empty()) {
        category = to_string(parse_category(req.get_param_value("category")));
      }
      long page = 1;
      if (req.has_param("page")) {
        try {
          page = std::stol(req.get_param_value("page"));
        } catch (const std::exception&) {
          page = 0;
        }
        if (page < 1) throw ApiError(400, ApiCode::bad_request, "page must be a positive integer");
      }
      const json categories = stage_json(r, Stage::categorize);
      std::vector<json> matched;
      for (const auto& img : categories.at("images"))
        if (!category || img.at("category") == *category) matched.push_back(img);
      std::map<std::string, std::size_t> explained;
      for (const auto& e : r.explanations) ++explained[e.image_id];
      const std::size_t size = options.page_size;
      const std::size_t begin = std::min(matched.size(), static_cast<std::size_t>(page - 1) * size);
      const std::size_t end = std::min(matched.size(), begin + size);
      json images = json::array();
      for (std::size_t i = begin; i < end; ++i) {
        json img = matched[i];
        img["explanations"] = explained[img.at("id").get<std::string>()];
        images.push_back(std::move(img));
      }
      send_json(res, {{"run_id", r.run_id},
                      {"category", category ? json(*category) : json(nullptr)},
                      {"page", page},
                      {"page_size", size},
                      {"total", matched.size()},
                      {"images", std::move(images)}});
    }));

    server.Get(R"(/api/runs/([^/]+)/images/([^/]+)/explanations)",
               wrap([this](const httplib::Request& req, httplib::Response& res) {
                 const RunRecord r = run(req.matches[1]);
                 const std::string image_id = req.matches[2];
                 const fs::path dir = run_dir(options.runs_root, r.run_id);
                 if (!r.done(Stage::sample)) not_ready(r, Stage::sample);
                 const DatasetManifest m = load_manifest(dir / RunRecord::artifact(Stage::sample));
                 const ImageRecord& record = m.at(image_id);
                 json gt = json::array();
                 for (const auto& g : record.gt_boxes)
                   gt.push_back({{"box", {g.box.x1, g.box.y1, g.box.x2, g.box.y2}},
                                 {"tag", g.tag == BoxTag::person ? "person" : "ignore"}});
                 json preds = json::array();
                 if (r.done(Stage::predict)) {
                   for (const auto& [id, dets] : load_predictions(dir / RunRecord::artifact(Stage::predict)))
                     if (id == image_id) preds = detections_to_json(dets);
                 }
                 json expl = json::array();
                 const std::string base = "/api/runs/" + r.run_id + "/files/";
                 for (const auto& e : r.explanations) {
                   if (e.image_id != image_id) continue;
                   expl.push_back({{"target", e.target},
                                   {"overlay_url", base + e.overlay.generic_string()},
                                   {"raw_url", base + e.raw.generic_string()},
                                   {"sidecar", read_json_file(dir / e.sidecar)}});
                 }
                 send_json(res, {{"run_id", r.run_id},
                                 {"image_id", image_id},
                                 {"width", record.width},
                                 {"height", record.height},
                                 {"gt", std::move(gt)},
                                 {"predictions", std::move(preds)},
                                 {"explanations", std::move(expl)}});
               }));

    server.Get(R"(/api/runs/([^/]+)/files/(explanations/.+))",
               wrap([this](const httplib::Request& req, httplib::Response& res) {
                 const RunRecord r = run(req.matches[1]);
                 const fs::path raw = std::string(req.matches[2]);
                 for (const auto& part : raw)
                   if (part == "..") throw ApiError(400, ApiCode::bad_request, "path escapes the run directory");
                 const fs::path rel = raw.lexically_normal();
                 const fs::path path = run_dir(options.runs_root, r.run_id) / rel;
                 std::string type = "application/octet-stream";
                 if (rel.extension() == ".png") type = "image/png";
                 if (rel.extension() == ".json") type = "application/json";
                 res.set_content(slurp(path), type);
               }));

    server.Get(R"(/api/runs/([^/]+)/audit)", wrap([this](const httplib::Request& req, httplib::Response& res) {
      send_json(res, stage_json(run(req.matches[1]), Stage::audit));
    }));

    server.Get(R"(/api/runs/([^/]+)/annotations)", wrap([this](const httplib::Request& req, httplib::Response& res) {
      json out = json::array();
      for (const auto& a : load_annotations(options.runs_root, run(req.matches[1]).run_id)) out.push_back(to_json(a));
      send_json(res, {{"annotations", std::move(out)}});
    }));

    server.Post(R"(/api/runs/([^/]+)/annotations)", wrap([this](const httplib::Request& req, httplib::Response& res) {
      const RunRecord r = run(req.matches[1]);
      json body = parse_body(req);
      body["run_id"] = r.run_id;
      body.erase("timestamp");
      if (!body.contains("image_id") || !body["image_id"].is_string())
        throw ApiError(400, ApiCode::bad_request, "annotation needs an image_id");
      if (!body.contains("tag") || !body["tag"].is_string())
        throw ApiError(400, ApiCode::bad_request, "annotation needs a tag");
      if (body.contains("box_index") && !body["box_index"].is_null() && !body["box_index"].is_number_integer())
        throw ApiError(400, ApiCode::bad_request, "box_index must be an integer");
      const Annotation stored = append_annotation(options.runs_root, annotation_from_json(body));
      send_json(res, to_json(stored), 201);
    }));

    server.Get(R"(/api/runs/([^/]+)/remediations)", wrap([this](const httplib::Request& req, httplib::Response& res) {
      json out = json::array();
      for (const auto& p : load_remediations(options.runs_root, run(req.matches[1]).run_id)) out.push_back(to_json(p));
      send_json(res, {{"remediations", std::move(out)}});
    }));

    server.Post(R"(/api/runs/([^/]+)/remediations)", wrap([this](const httplib::Request& req, httplib::Response& res) {
      const RunRecord parent = run(req.matches[1]);
      json body = parse_body(req);
      body["run_id"] = parent.run_id;
      body["status"] = "proposed";
      body.erase("child_run_id");
      if (!body.contains("action") || !body["action"].is_string())
        throw ApiError(400, ApiCode::bad_request, "remediation needs an action");
      const RemediationPlan plan = remediation_plan_from_json(body);
      if (parent.status == RunStatus::running)
        throw ApiError(409, ApiCode::run_in_progress, "run '" + parent.run_id + "' is still running");
      if (parent.status != RunStatus::completed)
        throw ApiError(409, ApiCode::conflict, "run '" + parent.run_id + "' did not complete");

      const std::string child = new_run_id();
      {
        std::lock_guard lock(mu);
        if (!in_flight.insert(parent.run_id).second)
          throw ApiError(409, ApiCode::conflict, "run '" + parent.run_id + "' already has a remediation in progress");
        workers.emplace_back([this, plan, child] {
          try {
            apply_remediation(plan, context(), child);
          } catch (const std::exception&) {
            // The child's run.json (or its absence) carries the outcome.
          }
          std::lock_guard done(mu);
          in_flight.erase(plan.run_id);
        });
      }
      send_json(res, {{"child_run_id", child}, {"parent_run_id", parent.run_id}, {"status", "running"}}, 202);
    }));

    server.Get("/api/compare", wrap([this](const httplib::Request& req, httplib::Response& res) {
      if (!req.has_param("base") || !req.has_param("target"))
        throw ApiError(400, ApiCode::bad_request, "compare needs base and target");
      const RunRecord base = run(req.get_param_value("base"));
      const RunRecord target = run(req.get_param_value("target"));
      for (const RunRecord* r : {&base, &target})
        if (!r->done(Stage::categorize)) not_ready(*r, Stage::categorize);
      send_json(res, to_json(compare_runs(options.runs_root, base.run_id, target.run_id)));
    }));

    if (options.static_dir && !server.set_mount_point("/", options.static_dir->string()))
      throw Error("cannot serve static files from " + options.static_dir->string());
  }

  void join_workers() {
    std::vector<std::thread> pending;
    {
      std::lock_guard lock(mu);
      pending.swap(workers);
    }
    for (auto& t : pending) t.join();
  }
};

Service::Service(ServiceOptions options) : impl_(std::make_unique<Impl>(std::move(options))) {}

Service::~Service() {
  stop();
  wait_for_remediations();
}

int Service::bind(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = impl_->server.bind_to_any_port(host);
    if (bound < 0) throw Error("cannot bind " + host);
  } else if (!impl_->server.bind_to_port(host, port)) {
    throw Error("cannot bind " + host + ":" + std::to_string(port));
  }
  impl_->bound = true;
  return bound;
}

void Service::run() {
  if (!impl_->bound) throw Error("service is not bound");
  impl_->server.listen_after_bind();
}

void Service::wait_until_ready() { impl_->server.wait_until_ready(); }

void Service::stop() {
  if (impl_->server.is_running()) impl_->server.stop();
}

void Service::wait_for_remediations() { impl_->join_workers(); }

}  // namespace detlens
