#include "detlens/fixture.hpp"
#include "detlens/pipeline.hpp"
#include "detlens/service.hpp"

#include "support.hpp"

#include <doctest.h>
#include <httplib.h>

#include <chrono>
#include <fstream>
#include <thread>

using namespace detlens;
using detlens::testing::TempDir;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Served {
  TempDir dir;
  SyntheticFixture fixture = write_synthetic_fixture(dir / "data", 50, 7);
  fs::path runs = dir / "runs";
  std::unique_ptr<Service> service;
  std::thread thread;
  int port{0};

  Served() {
    fs::create_directories(runs);
    for (const char* id : {"base", "other"}) {
      RunConfig c;
      c.manifest = fixture.manifest;
      c.detector = load_detector_config(fixture.detector_config);
      c.seed = 11;
      c.mask_spec = {8, 0.5, 100, 11};
      c.run_id = id;
      REQUIRE(run_debug(c, {runs, {}}).status == RunStatus::completed);
    }
    ServiceOptions options;
    options.runs_root = runs;
    options.page_size = 2;
    fs::create_directories(dir / "ui");
    std::ofstream(dir / "ui" / "index.html") << "<html>ui</html>";
    options.static_dir = dir / "ui";
    service = std::make_unique<Service>(options);
    port = service->bind("127.0.0.1", 0);
    thread = std::thread([this] { service->run(); });
    service->wait_until_ready();
  }
  ~Served() {
    service->stop();
    thread.join();
    service.reset();
  }

  httplib::Client client() const { return httplib::Client("127.0.0.1", port); }

  json get(const std::string& path, int expect = 200) const {
    auto c = client();
    auto res = c.Get(path);
    REQUIRE(res);
    CHECK(res->status == expect);
    CHECK(res->get_header_value("Content-Type") == "application/json");
    return json::parse(res->body);
  }

  json post(const std::string& path, const json& body, int expect) const {
    auto c = client();
    auto res = c.Post(path, body.dump(), "application/json");
    REQUIRE(res);
    CHECK(res->status == expect);
    return json::parse(res->body);
  }

  json wait_for_run(const std::string& id) const {
    for (int i = 0; i < 600; ++i) {
      auto c = client();
      auto res = c.Get("/api/runs/" + id);
      if (res && res->status == 200) {
        const json j = json::parse(res->body);
        if (j["status"] != "running") return j;
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(50));
    }
    FAIL("run " << id << " never finished");
    return {};
  }
};

void check_error(const json& body, const std::string& code) {
  CHECK(body["code"] == code);
  CHECK(body["message"].is_string());
  CHECK(body.size() == 2);
}

}  // namespace

TEST_CASE("bind address parsing") {
  CHECK(parse_bind_address("127.0.0.1:7878") == std::pair<std::string, int>{"127.0.0.1", 7878});
  CHECK(parse_bind_address("localhost") == std::pair<std::string, int>{"localhost", 7878});
  CHECK(parse_bind_address(":9000").second == 9000);
  CHECK_THROWS_AS(parse_bind_address("host:port"), std::invalid_argument);
  CHECK_THROWS_AS(parse_bind_address("host:70000"), std::invalid_argument);
}

TEST_CASE("service requires an existing runs root") {
  ServiceOptions options;
  options.runs_root = "/nonexistent/detlens/runs";
  CHECK_THROWS_AS(Service{options}, Error);
}

TEST_CASE("read endpoints") {
  Served s;
  CHECK(s.get("/healthz")["status"] == "ok");

  const json runs = s.get("/api/runs");
  REQUIRE(runs["runs"].size() == 2);
  CHECK(runs["runs"][0]["run_id"] == "base");
  CHECK(runs["runs"][0]["status"] == "completed");

  const json run = s.get("/api/runs/base");
  CHECK(run["schema_version"] == 1);
  CHECK(run["stages"]["explain"] == true);
  CHECK(s.get("/api/runs/base") == run);

  const json stats = s.get("/api/runs/base/stats");
  CHECK(stats["total"] == 5);
  const json categories = json::parse(std::ifstream(s.runs / "base" / "categories.json"));
  CHECK(stats["counts"] == categories["stats"]["counts"]);
  CHECK(stats["percentages"] == categories["stats"]["percentages"]);

  const json audit = s.get("/api/runs/base/audit");
  CHECK(audit == json::parse(std::ifstream(s.runs / "base" / "audit.json")));

  check_error(s.get("/api/runs/nope", 404), "not_found");
  check_error(s.get("/api/runs/nope/stats", 404), "not_found");
}

TEST_CASE("image listing filters and pages") {
  Served s;
  const json all = s.get("/api/runs/base/images");
  CHECK(all["total"] == 5);
  CHECK(all["images"].size() == 2);
  const json page3 = s.get("/api/runs/base/images?page=3");
  CHECK(page3["images"].size() == 1);
  CHECK(s.get("/api/runs/base/images?page=4")["images"].empty());

  std::size_t seen = 0;
  for (const char* cat : {"UnderDetection", "OverDetection", "CorrectLocalization", "Mislocalization"}) {
    const json filtered = s.get(std::string("/api/runs/base/images?category=") + cat);
    seen += filtered["total"].get<std::size_t>();
    for (const auto& img : filtered["images"]) CHECK(img["category"] == cat);
  }
  CHECK(seen == 5);
  check_error(s.get("/api/runs/base/images?category=Sideways", 400), "bad_request");
  check_error(s.get("/api/runs/base/images?page=0", 400), "bad_request");
}

TEST_CASE("explanations and overlay files") {
  Served s;
  const RunRecord r = load_run(s.runs, "base");
  REQUIRE_FALSE(r.explanations.empty());
  const std::string image = r.explanations[0].image_id;
  const json e = s.get("/api/runs/base/images/" + image + "/explanations");
  CHECK(e["image_id"] == image);
  REQUIRE_FALSE(e["explanations"].empty());
  CHECK(e["gt"].is_array());
  CHECK(e["predictions"].is_array());
  const std::string url = e["explanations"][0]["overlay_url"];
  auto c = s.client();
  auto png = c.Get(url);
  REQUIRE(png);
  CHECK(png->status == 200);
  CHECK(png->get_header_value("Content-Type") == "image/png");
  CHECK(png->body.substr(1, 3) == "PNG");
  auto escape = c.Get("/api/runs/base/files/explanations/../run.json");
  REQUIRE(escape);
  CHECK(escape->status >= 400);
  check_error(s.get("/api/runs/base/images/ghost/explanations", 404), "not_found");

  auto ui = c.Get("/index.html");
  REQUIRE(ui);
  CHECK(ui->body == "<html>ui</html>");
}

TEST_CASE("annotations are visible right after they are posted") {
  Served s;
  const std::string image = s.get("/api/runs/base/images")["images"][0]["id"];
  const json stored = s.post("/api/runs/base/annotations",
                             {{"image_id", image}, {"box_index", 0}, {"tag", "label-error"}, {"note", "n"}, {"author", "r"}}, 201);
  CHECK(stored["tag"] == "label-error");
  CHECK_FALSE(stored["timestamp"].get<std::string>().empty());
  const json listed = s.get("/api/runs/base/annotations");
  REQUIRE(listed["annotations"].size() == 1);
  CHECK(listed["annotations"][0] == stored);

  check_error(s.post("/api/runs/base/annotations", {{"image_id", image}, {"tag", "vibes"}}, 400), "bad_request");
  check_error(s.post("/api/runs/base/annotations", {{"tag", "other"}}, 400), "bad_request");
  check_error(s.post("/api/runs/base/annotations", {{"image_id", "ghost"}, {"tag", "other"}}, 404), "not_found");
  auto c = s.client();
  auto res = c.Post("/api/runs/base/annotations", "{broken", "application/json");
  REQUIRE(res);
  CHECK(res->status == 400);
  CHECK(s.get("/api/runs/base/annotations")["annotations"].size() == 1);
}

TEST_CASE("remediation runs asynchronously, one child at a time") {
  Served s;
  const json accepted = s.post("/api/runs/base/remediations", {{"action", "relabel"}}, 202);
  const std::string child = accepted["child_run_id"];
  CHECK_FALSE(child.empty());
  // The first child is either still running (conflict) or done (a second child is accepted).
  auto c = s.client();
  auto second = c.Post("/api/runs/base/remediations", json{{"action", "relabel"}}.dump(), "application/json");
  REQUIRE(second);
  std::optional<std::string> second_child;
  if (second->status == 409) {
    check_error(json::parse(second->body), "conflict");
  } else {
    CHECK(second->status == 202);
    second_child = json::parse(second->body)["child_run_id"];
  }
  const json done = s.wait_for_run(child);
  CHECK(done["status"] == "completed");
  CHECK(done["parent_run_id"] == "base");
  CHECK(s.get("/api/runs/" + child + "/audit")["boxes_outside"] == 0);
  if (second_child) s.wait_for_run(*second_child);
  s.service->wait_for_remediations();

  const json runs = s.get("/api/runs");
  bool listed = false;
  for (const auto& r : runs["runs"]) listed = listed || r["run_id"] == child;
  CHECK(listed);
  const json log = s.get("/api/runs/base/remediations");
  CHECK(log["remediations"].size() >= 2);

  const json cmp = s.get("/api/compare?base=base&target=" + child);
  CHECK(cmp["schema_version"] == 1);
  CHECK(cmp["rows"].size() == 4);
  CHECK(cmp["transitions"].is_array());

  check_error(s.post("/api/runs/base/remediations", {{"action", "blur"}}, 400), "bad_request");
  check_error(s.post("/api/runs/ghost/remediations", {{"action", "relabel"}}, 404), "not_found");
  check_error(s.get("/api/compare?base=base", 400), "bad_request");
  check_error(s.get("/api/compare?base=base&target=ghost", 404), "not_found");
}

TEST_CASE("a concurrent remediation request on the same parent is refused") {
  Served s;
  // A slow child: many masks keep the first remediation in flight.
  json run = json::parse(std::ifstream(s.runs / "other" / "run.json"));
  run["config"]["mask_spec"]["num_masks"] = 20000;
  std::ofstream(s.runs / "other" / "run.json") << run.dump();
  const json first = s.post("/api/runs/other/remediations", {{"action", "relabel"}}, 202);
  check_error(s.post("/api/runs/other/remediations", {{"action", "relabel"}}, 409), "conflict");
  const json child = s.get("/api/runs/" + first["child_run_id"].get<std::string>());
  CHECK(child["status"] == "running");
  check_error(s.get("/api/runs/" + first["child_run_id"].get<std::string>() + "/stats", 409), "run_in_progress");
  s.service->wait_for_remediations();
  CHECK(s.wait_for_run(first["child_run_id"])["status"] == "completed");
  CHECK(s.post("/api/runs/other/remediations", {{"action", "relabel"}}, 202).contains("child_run_id"));
  s.service->wait_for_remediations();
}
