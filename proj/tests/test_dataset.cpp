#include "detlens/dataset.hpp"
#include "detlens/errors.hpp"

#include "support.hpp"

#include <doctest.h>

#include <fstream>
#include <set>

using namespace detlens;
using detlens::testing::TempDir;

namespace {

void write_file(const std::filesystem::path& p, const std::string& text) { std::ofstream(p) << text; }

std::string record_line(const std::string& id, int w = 100, int h = 100, const std::string& gt = "[]") {
  return R"({"id":")" + id + R"(","path":"images/)" + id + R"(.png","width":)" + std::to_string(w) +
         R"(,"height":)" + std::to_string(h) + R"(,"gt":)" + gt + "}\n";
}

DatasetManifest table_image() {
  const std::vector<BBox> boxes = {{-50, 35, 531, 131},   {-12, 87, 451, 1325}, {308, 292, 635, 1228},
                                   {499, 171, 988, 1201}, {618, 370, 1034, 1243}, {608, 61, 758, 444},
                                   {318, -14, 673, 745},  {303, -3, 444, 437}};
  ImageRecord r{"crowd", "crowd.jpg", 1280, 960, {}};
  for (const auto& b : boxes) r.gt_boxes.push_back({b, BoxTag::person});
  return {"crowd", {r}, ""};
}

DatasetManifest numbered(std::size_t n) {
  DatasetManifest m{"n", {}, ""};
  for (std::size_t i = 0; i < n; ++i) m.records.push_back({"img_" + std::to_string(i), "x.png", 10, 10, {}});
  return m;
}

std::vector<std::string> ids(const DatasetManifest& m) {
  std::vector<std::string> out;
  for (const auto& r : m.records) out.push_back(r.id);
  return out;
}

}  // namespace

TEST_CASE("load_manifest reads records and resolves relative paths") {
  TempDir dir;
  write_file(dir / "m.jsonl", record_line("a") + record_line("b", 64, 48, R"([{"box":[1,2,3,4],"tag":"person"},{"box":[0,0,5,5],"tag":"ignore"}])") + "\n" +
                                  record_line("c"));
  const auto m = load_manifest(dir / "m.jsonl");
  REQUIRE(m.records.size() == 3);
  CHECK(m.name == "m");
  CHECK(m.records[0].path == dir.path() / "images" / "a.png");
  const auto& b = m.at("b");
  CHECK(b.width == 64);
  REQUIRE(b.gt_boxes.size() == 2);
  CHECK(b.gt_boxes[0].box == BBox{1, 2, 3, 4});
  CHECK(b.gt_boxes[1].tag == BoxTag::ignore);
  CHECK(b.person_boxes().size() == 1);
  CHECK_THROWS_AS(m.at("zzz"), NotFoundError);
}

TEST_CASE("load_manifest names duplicate ids") {
  TempDir dir;
  write_file(dir / "m.jsonl", record_line("img_1") + record_line("img_7") + record_line("img_3") + record_line("img_4") +
                                  record_line("img_7"));
  try {
    load_manifest(dir / "m.jsonl");
    FAIL("expected an error");
  } catch (const ParseError& e) {
    const std::string what = e.what();
    CHECK(what.find("img_7") != std::string::npos);
    CHECK(what.find("line 5") != std::string::npos);
  }
}

TEST_CASE("load_manifest rejects empty files, bad lines and bad dimensions") {
  TempDir dir;
  write_file(dir / "empty.jsonl", "");
  CHECK_THROWS_WITH_AS(load_manifest(dir / "empty.jsonl"), doctest::Contains("empty manifest"), ParseError);
  write_file(dir / "bad.jsonl", record_line("a") + "{not json\n");
  CHECK_THROWS_WITH_AS(load_manifest(dir / "bad.jsonl"), doctest::Contains("line 2"), ParseError);
  write_file(dir / "dims.jsonl", record_line("a", 0, 10));
  CHECK_THROWS_AS(load_manifest(dir / "dims.jsonl"), ParseError);
  write_file(dir / "tag.jsonl", record_line("a", 10, 10, R"([{"box":[0,0,1,1],"tag":"car"}])"));
  CHECK_THROWS_AS(load_manifest(dir / "tag.jsonl"), ParseError);
  CHECK_THROWS_AS(load_manifest(dir / "missing.jsonl"), NotFoundError);
}

TEST_CASE("manifest round trip") {
  TempDir dir;
  const auto m = table_image();
  save_manifest(m, dir / "out.jsonl");
  const auto back = load_manifest(dir / "out.jsonl");
  REQUIRE(back.records.size() == 1);
  CHECK(back.records[0].gt_boxes == m.records[0].gt_boxes);
}

TEST_CASE("import_odgt converts fbox and ignore flags") {
  TempDir dir;
  std::filesystem::create_directories(dir / "img");
  write_png(dir / "img" / "273271,1a0d6000b9e1f5b7.png", Image(40, 30, 3, 10.0f));
  write_png(dir / "img" / "second.png", Image(20, 10, 1, 10.0f));
  write_file(dir / "a.odgt",
             R"({"ID":"273271,1a0d6000b9e1f5b7","gtboxes":[{"tag":"person","fbox":[10,20,30,40],"hbox":[1,1,2,2],"extra":{"box_id":0}},)"
             R"({"tag":"person","fbox":[0,0,5,5],"extra":{"ignore":1}},{"tag":"mask","fbox":[1,1,3,3]}]})"
             "\n"
             R"({"ID":"absent","gtboxes":[{"tag":"person","fbox":[1,1,2,2]}]})"
             "\n"
             R"({"ID":"second","gtboxes":[]})"
             "\n");
  const auto imported = import_odgt(dir / "a.odgt", dir / "img");
  CHECK(imported.skipped_missing_images == 1);
  REQUIRE(imported.manifest.records.size() == 2);
  const auto& r = imported.manifest.records[0];
  CHECK(r.width == 40);
  CHECK(r.height == 30);
  REQUIRE(r.gt_boxes.size() == 3);
  CHECK(r.gt_boxes[0].box == BBox{10, 20, 40, 60});
  CHECK(r.gt_boxes[0].tag == BoxTag::person);
  CHECK(r.gt_boxes[1].tag == BoxTag::ignore);
  CHECK(r.gt_boxes[2].tag == BoxTag::ignore);
  CHECK(imported.manifest.at("second").width == 20);

  write_file(dir / "bad.odgt", R"({"ID":"second","gtboxes":[]})" "\n{oops\n");
  CHECK_THROWS_WITH_AS(import_odgt(dir / "bad.odgt", dir / "img"), doctest::Contains("line 2"), ParseError);
}

TEST_CASE("sample_size policy") {
  CHECK(sample_size(15000) == 1000);
  CHECK(sample_size(5000) == 500);
  CHECK(sample_size(10000) == 1000);
  CHECK(sample_size(9) == 1);
  CHECK(sample_size(5) == 1);
  CHECK(sample_size(1) == 1);
  CHECK(sample_size(100) == 10);
  CHECK_THROWS_WITH_AS(sample_size(0), "empty dataset", std::invalid_argument);
}

TEST_CASE("sample is deterministic, ordered and without replacement") {
  const auto m = numbered(15000);
  const auto a = sample(m, 42), b = sample(m, 42);
  REQUIRE(a.records.size() == 1000);
  CHECK(ids(a) == ids(b));
  const auto drawn = ids(a);
  const std::set<std::string> unique(drawn.begin(), drawn.end());
  CHECK(unique.size() == 1000);
  std::size_t last = 0;
  for (const auto& r : a.records) {
    const std::size_t idx = std::stoul(r.id.substr(4));
    CHECK(idx >= last);
    last = idx;
  }
  CHECK(sample(numbered(8), 3).records.size() == 1);
  const auto big = numbered(10000);
  CHECK(ids(sample(big, 1)) != ids(sample(big, 2)));
}

TEST_CASE("audit reproduces the eight-box table") {
  const auto report = audit_out_of_bounds(table_image());
  CHECK(report.boxes_audited == 8);
  CHECK(report.boxes_outside == 7);
  std::set<std::size_t> flagged;
  for (const auto& e : report.entries) flagged.insert(e.box_index);
  CHECK(flagged.size() == 7);
  CHECK(flagged.count(5) == 0);
  CHECK(to_json(report)["schema_version"] == 1);
}

TEST_CASE("audit reports each violation kind and skips ignore boxes") {
  DatasetManifest m{"m", {{"a", "a.png", 100, 100, {{{-5, -5, 10, 10}, BoxTag::person}, {{-5, 0, 200, 10}, BoxTag::ignore}}}}, ""};
  auto report = audit_out_of_bounds(m);
  REQUIRE(report.entries.size() == 1);
  CHECK(report.entries[0].violation == Violation::negative_coord);
  CHECK(to_string(Violation::negative_coord) == "negative-coord");
  CHECK(report.boxes_audited == 1);

  m.records[0].gt_boxes = {{{90, 90, 120, 130}, BoxTag::person}};
  report = audit_out_of_bounds(m);
  REQUIRE(report.entries.size() == 2);
  CHECK(report.entries[0].violation == Violation::exceeds_width);
  CHECK(report.entries[1].violation == Violation::exceeds_height);
  CHECK(report.boxes_outside == 1);

  m.records[0].gt_boxes = {{{0, 0, 100, 100}, BoxTag::person}};
  CHECK(audit_out_of_bounds(m).boxes_outside == 0);
}

TEST_CASE("relabel clamps the table and is a fixed point afterwards") {
  const auto result = relabel(table_image());
  CHECK(result.summary.boxes_changed == 7);
  CHECK(result.summary.boxes_dropped == 0);
  CHECK(result.manifest.records[0].gt_boxes[1].box == BBox{0, 87, 451, 960});
  CHECK(result.manifest.records[0].gt_boxes[5].box == BBox{608, 61, 758, 444});
  CHECK(audit_out_of_bounds(result.manifest).boxes_outside == 0);
  const auto again = relabel(result.manifest);
  CHECK(again.summary.boxes_changed == 0);
  CHECK(again.manifest.records == result.manifest.records);
}

TEST_CASE("relabel drops fully outside boxes") {
  DatasetManifest m{"m", {{"a", "a.png", 100, 100, {{{-10, -10, -1, -1}, BoxTag::person}, {{1, 1, 5, 5}, BoxTag::person}}}}, ""};
  const auto result = relabel(m);
  CHECK(result.summary.boxes_dropped == 1);
  CHECK(result.summary.dropped_from == std::vector<std::string>{"a"});
  REQUIRE(result.manifest.records[0].gt_boxes.size() == 1);
  CHECK(result.manifest.records[0].gt_boxes[0].box == BBox{1, 1, 5, 5});
}

TEST_CASE("pad_pixels places the source on a filled canvas") {
  Image src(640, 480, 3, 50.0f);
  const Image out = pad_pixels(src, {100, 200, 200, 200});
  CHECK(out.width() == 1040);
  CHECK(out.height() == 780);
  CHECK(out.planes[0](0, 0) == kDefaultPadFill);
  CHECK(out.planes[2](100, 200) == 50.0f);
  CHECK(out.planes[1](579, 839) == 50.0f);
  CHECK(out.planes[1](580, 839) == kDefaultPadFill);
  const Image same = pad_pixels(src, {});
  CHECK((same.planes[0] == src.planes[0]).all());
  CHECK_THROWS_AS(pad_pixels(Image(), {1, 1, 1, 1}), std::invalid_argument);
  CHECK_THROWS_AS(pad_pixels(src, {-1, 0, 0, 0}), std::invalid_argument);
}

TEST_CASE("pad_image writes the padded file and translates boxes") {
  TempDir dir;
  write_png(dir / "p.png", Image(640, 480, 3, 90.0f));
  const ImageRecord r{"p", dir / "p.png", 640, 480, {{{10, 10, 20, 20}, BoxTag::person}}};
  const auto padded = pad_image(r, {100, 200, 200, 200});
  CHECK(padded.width == 1040);
  CHECK(padded.height == 780);
  CHECK(padded.gt_boxes[0].box == BBox{210, 110, 220, 120});
  const auto size = read_image_size(padded.path);
  CHECK(size.width == 1040);
  CHECK(size.height == 780);

  write_png(dir / "q.png", Image(100, 100, 1, 90.0f));
  const ImageRecord q{"q", dir / "q.png", 100, 100, {{{10, 10, 20, 20}, BoxTag::person}}};
  const auto top = pad_image(q, {10, 0, 0, 0});
  CHECK(top.width == 100);
  CHECK(top.height == 110);
  CHECK(top.gt_boxes[0].box == BBox{10, 20, 20, 30});
  const auto none = pad_image(q, {});
  CHECK(none.gt_boxes == q.gt_boxes);
  CHECK(none.width == 100);
}
