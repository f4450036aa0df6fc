#include "detlens/dataset.hpp"

#include "detlens/errors.hpp"
#include "detlens/random.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <unordered_set>

namespace fs = std::filesystem;
using nlohmann::json;

namespace detlens {

std::vector<BBox> ImageRecord::person_boxes() const {
  std::vector<BBox> out;
  out.reserve(gt_boxes.size());
  for (const auto& g : gt_boxes)
    if (g.tag == BoxTag::person) out.push_back(g.box);
  return out;
}

const ImageRecord* DatasetManifest::find(std::string_view id) const {
  auto it = std::find_if(records.begin(), records.end(), [&](const ImageRecord& r) { return r.id == id; });
  return it == records.end() ? nullptr : &*it;
}

const ImageRecord& DatasetManifest::at(std::string_view id) const {
  if (const auto* r = find(id)) return *r;
  throw NotFoundError("no image with id '" + std::string(id) + "' in manifest '" + name + "'");
}

void validate(const DatasetManifest& manifest) {
  if (manifest.name.empty()) throw ParseError("manifest name is empty");
  std::unordered_set<std::string> seen;
  for (const auto& r : manifest.records) {
    if (!seen.insert(r.id).second) throw ParseError("duplicate image id '" + r.id + "'");
    if (r.width <= 0 || r.height <= 0) throw ParseError("image '" + r.id + "' has non-positive dimensions");
    for (const auto& g : r.gt_boxes) validate(g.box);
  }
}

json record_to_json(const ImageRecord& record) {
  json gt = json::array();
  for (const auto& g : record.gt_boxes) {
    gt.push_back({{"box", {g.box.x1, g.box.y1, g.box.x2, g.box.y2}},
                  {"tag", g.tag == BoxTag::person ? "person" : "ignore"}});
  }
  return {{"id", record.id},
          {"path", record.path.string()},
          {"width", record.width},
          {"height", record.height},
          {"gt", std::move(gt)}};
}

namespace {

BBox box_from_json(const json& j) {
  if (!j.is_array() || j.size() != 4) throw ParseError("box must be an array of 4 numbers");
  for (const auto& v : j)
    if (!v.is_number()) throw ParseError("box must be an array of 4 numbers");
  BBox b{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
  try {
    validate(b);
  } catch (const std::invalid_argument& e) {
    throw ParseError(e.what());
  }
  return b;
}

}  // namespace

ImageRecord record_from_json(const json& j) {
  if (!j.is_object()) throw ParseError("record is not a JSON object");
  ImageRecord r;
  try {
    r.id = j.at("id").get<std::string>();
    r.path = j.at("path").get<std::string>();
    r.width = j.at("width").get<int>();
    r.height = j.at("height").get<int>();
    for (const auto& g : j.value("gt", json::array())) {
      GroundTruthBox box;
      box.box = box_from_json(g.at("box"));
      const std::string tag = g.value("tag", "person");
      if (tag == "person") {
        box.tag = BoxTag::person;
      } else if (tag == "ignore") {
        box.tag = BoxTag::ignore;
      } else {
        throw ParseError("unknown box tag '" + tag + "'");
      }
      r.gt_boxes.push_back(box);
    }
  } catch (const json::exception& e) {
    throw ParseError(e.what());
  }
  if (r.width <= 0 || r.height <= 0) throw ParseError("image '" + r.id + "' has non-positive dimensions");
  return r;
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open manifest: " + path.string());
  DatasetManifest m;
  m.name = path.stem().string();
  m.provenance = "loaded from " + path.string();
  const fs::path base = fs::absolute(path).parent_path();
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ImageRecord r;
    try {
      r = record_from_json(json::parse(line));
    } catch (const json::exception& e) {
      throw ParseError("manifest line " + std::to_string(line_no) + ": " + e.what());
    } catch (const ParseError& e) {
      throw ParseError("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!seen.insert(r.id).second)
      throw ParseError("manifest line " + std::to_string(line_no) + ": duplicate image id '" + r.id + "'");
    if (r.path.is_relative()) r.path = (base / r.path).lexically_normal();
    m.records.push_back(std::move(r));
  }
  if (m.records.empty()) throw ParseError("empty manifest: " + path.string());
  return m;
}

void save_manifest(const DatasetManifest& manifest, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write manifest: " + path.string());
  for (const auto& r : manifest.records) out << record_to_json(r).dump() << '\n';
}

OdgtImport import_odgt(const fs::path& odgt, const fs::path& image_root) {
  std::ifstream in(odgt);
  if (!in) throw NotFoundError("cannot open odgt file: " + odgt.string());
  OdgtImport result;
  result.manifest.name = odgt.stem().string();
  result.manifest.provenance = "imported from " + odgt.string() + " with images under " + image_root.string();
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ImageRecord r;
    try {
      const json j = json::parse(line);
      r.id = j.at("ID").get<std::string>();
      for (const auto& g : j.value("gtboxes", json::array())) {
        if (!g.contains("fbox")) continue;
        const auto& f = g.at("fbox");
        if (!f.is_array() || f.size() != 4) throw ParseError("fbox must have 4 numbers");
        GroundTruthBox box;
        box.box = from_xywh(f[0].get<double>(), f[1].get<double>(), f[2].get<double>(), f[3].get<double>());
        validate(box.box);
        const std::string tag = g.value("tag", "person");
        bool ignore = tag != "person";
        if (auto extra = g.find("extra"); extra != g.end() && extra->is_object()) {
          if (auto ig = extra->find("ignore"); ig != extra->end() && ig->is_number() && ig->get<int>() == 1) ignore = true;
        }
        box.tag = ignore ? BoxTag::ignore : BoxTag::person;
        r.gt_boxes.push_back(box);
      }
    } catch (const std::exception& e) {
      throw ParseError("odgt line " + std::to_string(line_no) + ": " + e.what());
    }
    fs::path image;
    for (const char* ext : {".jpg", ".jpeg", ".png"}) {
      const fs::path candidate = image_root / (r.id + ext);
      if (fs::exists(candidate)) {
        image = candidate;
        break;
      }
    }
    if (image.empty()) {
      ++result.skipped_missing_images;
      continue;
    }
    const ImageSize size = read_image_size(image);
    r.path = fs::absolute(image).lexically_normal();
    r.width = size.width;
    r.height = size.height;
    if (r.width <= 0 || r.height <= 0) throw ParseError("image " + image.string() + " has non-positive dimensions");
    if (!seen.insert(r.id).second)
      throw ParseError("odgt line " + std::to_string(line_no) + ": duplicate image id '" + r.id + "'");
    result.manifest.records.push_back(std::move(r));
  }
  return result;
}

std::size_t sample_size(std::size_t n_total) {
  if (n_total == 0) throw std::invalid_argument("empty dataset");
  return std::max<std::size_t>(1, std::min<std::size_t>(1000, n_total / 10));
}

DatasetManifest sample(const DatasetManifest& manifest, std::uint64_t seed) {
  const std::size_t n = manifest.records.size();
  const std::size_t k = sample_size(n);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.uniform_index(n - i)]);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());

  DatasetManifest out;
  out.name = manifest.name + "-sample";
  out.provenance = "sampled " + std::to_string(k) + " of " + std::to_string(n) + " records from '" + manifest.name +
                   "' with seed " + std::to_string(seed);
  out.records.reserve(k);
  for (std::size_t i : idx) out.records.push_back(manifest.records[i]);
  return out;
}

std::string to_string(Violation v) {
  switch (v) {
    case Violation::negative_coord: return "negative-coord";
    case Violation::exceeds_width: return "exceeds-width";
    case Violation::exceeds_height: return "exceeds-height";
  }
  return "unknown";
}

AuditReport audit_out_of_bounds(const DatasetManifest& manifest) {
  AuditReport report;
  for (const auto& r : manifest.records) {
    const double w = r.width, h = r.height;
    for (std::size_t i = 0; i < r.gt_boxes.size(); ++i) {
      const auto& g = r.gt_boxes[i];
      if (g.tag == BoxTag::ignore) continue;
      ++report.boxes_audited;
      const BBox& b = g.box;
      const std::size_t before = report.entries.size();
      if (b.x1 < 0 || b.y1 < 0) report.entries.push_back({r.id, i, Violation::negative_coord, b});
      if (b.x2 > w) report.entries.push_back({r.id, i, Violation::exceeds_width, b});
      if (b.y2 > h) report.entries.push_back({r.id, i, Violation::exceeds_height, b});
      if (report.entries.size() > before) ++report.boxes_outside;
    }
  }
  return report;
}

json to_json(const AuditReport& report) {
  json entries = json::array();
  for (const auto& e : report.entries) {
    entries.push_back({{"id", e.record_id},
                       {"box_index", e.box_index},
                       {"violation", to_string(e.violation)},
                       {"box", {e.box.x1, e.box.y1, e.box.x2, e.box.y2}}});
  }
  return {{"schema_version", 1},
          {"boxes_audited", report.boxes_audited},
          {"boxes_outside", report.boxes_outside},
          {"entries", std::move(entries)}};
}

RelabelResult relabel(const DatasetManifest& manifest) {
  RelabelResult result;
  result.manifest.name = manifest.name;
  result.manifest.provenance = manifest.provenance + "; relabeled (boxes clamped to image bounds)";
  result.manifest.records.reserve(manifest.records.size());
  for (const auto& r : manifest.records) {
    ImageRecord out = r;
    out.gt_boxes.clear();
    for (const auto& g : r.gt_boxes) {
      const auto clamped = clamp_box(g.box, static_cast<double>(r.width), static_cast<double>(r.height));
      if (clamped.degenerate) {
        ++result.summary.boxes_dropped;
        result.summary.dropped_from.push_back(r.id);
        continue;
      }
      if (clamped.box != g.box) ++result.summary.boxes_changed;
      out.gt_boxes.push_back({clamped.box, g.tag});
    }
    result.manifest.records.push_back(std::move(out));
  }
  return result;
}

Image pad_pixels(const Image& source, const Padding& pad, float fill) {
  if (source.empty()) throw std::invalid_argument("cannot pad a zero-size image");
  if (pad.top < 0 || pad.left < 0 || pad.right < 0 || pad.bottom < 0)
    throw std::invalid_argument("padding must be non-negative");
  const int w = source.width() + pad.left + pad.right;
  const int h = source.height() + pad.top + pad.bottom;
  Image out(w, h, source.channels(), fill);
  for (int c = 0; c < source.channels(); ++c)
    out.planes[c].block(pad.top, pad.left, source.height(), source.width()) = source.planes[c];
  return out;
}

ImageRecord pad_image(const ImageRecord& record, const Padding& pad, float fill) {
  if (record.width <= 0 || record.height <= 0) throw std::invalid_argument("cannot pad a zero-size image");
  const Image padded = pad_pixels(read_image(record.path), pad, fill);
  ImageRecord out = record;
  out.path = record.path.parent_path() / (record.path.stem().string() + "_padded.png");
  write_png(out.path, padded);
  out.width = padded.width();
  out.height = padded.height();
  for (auto& g : out.gt_boxes) g.box = g.box.translated(pad.left, pad.top);
  return out;
}

DatasetManifest pad_manifest(const DatasetManifest& manifest, const Padding& pad, float fill) {
  DatasetManifest out;
  out.name = manifest.name;
  out.provenance = manifest.provenance + "; padded (top " + std::to_string(pad.top) + ", left " +
                   std::to_string(pad.left) + ", right " + std::to_string(pad.right) + ", bottom " +
                   std::to_string(pad.bottom) + ")";
  out.records.reserve(manifest.records.size());
  for (const auto& r : manifest.records) out.records.push_back(pad_image(r, pad, fill));
  return out;
}

}  // namespace detlens
