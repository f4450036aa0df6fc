#pragma once

#include "detlens/geometry.hpp"
#include "detlens/image.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace detlens {

enum class BoxTag { person, ignore };

struct GroundTruthBox {
  BBox box;
  BoxTag tag{BoxTag::person};

  friend bool operator==(const GroundTruthBox&, const GroundTruthBox&) = default;
};

struct ImageRecord {
  std::string id;
  std::filesystem::path path;
  int width{0};
  int height{0};
  std::vector<GroundTruthBox> gt_boxes;

  /// Boxes that take part in counting and matching (tag != ignore).
  std::vector<BBox> person_boxes() const;

  friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

struct DatasetManifest {
  std::string name;
  std::vector<ImageRecord> records;
  std::string provenance;

  const ImageRecord* find(std::string_view id) const;
  const ImageRecord& at(std::string_view id) const;
};

/// Throws ParseError on empty name, duplicate ids or non-positive dimensions.
void validate(const DatasetManifest& manifest);

// Manifest JSONL: one record per line,
//   {"id", "path", "width", "height", "gt": [{"box": [x1,y1,x2,y2], "tag": "person"|"ignore"}]}
// Relative image paths resolve against the manifest's directory.
DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

nlohmann::json record_to_json(const ImageRecord& record);
ImageRecord record_from_json(const nlohmann::json& j);

struct OdgtImport {
  DatasetManifest manifest;
  std::size_t skipped_missing_images{0};
};

/// Imports CrowdHuman ODGT. Only full-body boxes (fbox) are kept; "mask"
/// tags and extra.ignore=1 map to BoxTag::ignore. Images are looked up as
/// <image_root>/<ID>.jpg (then .jpeg, .png).
OdgtImport import_odgt(const std::filesystem::path& odgt, const std::filesystem::path& image_root);

/// min(1000, floor(0.1 * n_total)), at least 1.
std::size_t sample_size(std::size_t n_total);

/// Deterministic draw without replacement; records keep manifest order.
DatasetManifest sample(const DatasetManifest& manifest, std::uint64_t seed);

enum class Violation { negative_coord, exceeds_width, exceeds_height };

std::string to_string(Violation v);

struct AuditEntry {
  std::string record_id;
  std::size_t box_index{0};
  Violation violation{Violation::negative_coord};
  BBox box;
};

struct AuditReport {
  std::vector<AuditEntry> entries;
  std::size_t boxes_audited{0};
  std::size_t boxes_outside{0};
};

/// Reports every (box, violation kind) pair over non-ignore boxes.
AuditReport audit_out_of_bounds(const DatasetManifest& manifest);

nlohmann::json to_json(const AuditReport& report);

struct RelabelSummary {
  std::size_t boxes_changed{0};
  std::size_t boxes_dropped{0};
  std::vector<std::string> dropped_from;  // record ids, one per dropped box
};

struct RelabelResult {
  DatasetManifest manifest;
  RelabelSummary summary;
};

/// Clamps every ground-truth box into its image. Boxes that collapse to zero area are dropped.
RelabelResult relabel(const DatasetManifest& manifest);

struct Padding {
  int top{0};
  int left{0};
  int right{0};
  int bottom{0};
};

inline constexpr float kDefaultPadFill = 128.0f;

/// Pure part of padding: new canvas with the source at (left, top).
Image pad_pixels(const Image& source, const Padding& pad, float fill = kDefaultPadFill);

/// Pads the record's image, writes it beside the original as <stem>_padded.png
/// and returns the record with translated boxes and the new size.
ImageRecord pad_image(const ImageRecord& record, const Padding& pad, float fill = kDefaultPadFill);

DatasetManifest pad_manifest(const DatasetManifest& manifest, const Padding& pad, float fill = kDefaultPadFill);

}  // namespace detlens
