#include "detlens/fixture.hpp"

#include "detlens/dataset.hpp"
#include "detlens/image.hpp"
#include "detlens/random.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace fs = std::filesystem;

namespace detlens {

namespace {

constexpr int kWidth = 96;
constexpr int kHeight = 72;

double draw(Rng& rng, double lo, double hi) { return lo + (hi - lo) * rng.uniform01(); }

BBox person(Rng& rng, double x_lo, double x_hi) {
  const double w = std::round(draw(rng, 14, 20));
  const double h = std::round(draw(rng, 30, 40));
  const double x = std::round(draw(rng, x_lo, x_hi - w));
  const double y = std::round(draw(rng, 4, kHeight - h - 4));
  return {x, y, x + w, y + h};
}

void paint(Image& img, const BBox& b, float value) {
  const auto c = clamp_box(b, double(img.width()), double(img.height()));
  if (c.degenerate) return;
  const int x0 = static_cast<int>(c.box.x1), y0 = static_cast<int>(c.box.y1);
  const int w = static_cast<int>(c.box.x2) - x0, h = static_cast<int>(c.box.y2) - y0;
  for (auto& plane : img.planes) plane.block(y0, x0, h, w) = value;
}

}  // namespace

SyntheticFixture write_synthetic_fixture(const fs::path& dir, std::size_t num_images, std::uint64_t seed) {
  fs::create_directories(dir / "images");
  Rng rng(seed);
  DatasetManifest truth{"synthetic", {}, "generated, seed " + std::to_string(seed)};
  DatasetManifest seen{"synthetic-reference", {}, truth.provenance};

  for (std::size_t i = 0; i < num_images; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "img_%03zu", i);
    ImageRecord gt{name, fs::path("images") / (std::string(name) + ".png"), kWidth, kHeight, {}};
    ImageRecord ref = gt;
    Image img(kWidth, kHeight, 3, 100.0f);
    for (auto& plane : img.planes)
      for (Eigen::Index k = 0; k < plane.size(); ++k) plane.data()[k] += static_cast<float>(draw(rng, -8, 8));

    const BBox left = person(rng, 4, 44);
    const BBox right = person(rng, 50, 92);
    switch (i % 5) {
      case 0:
        gt.gt_boxes = {{left, BoxTag::person}};
        if (i % 10 == 0) {
          gt.gt_boxes.push_back({right, BoxTag::person});
        } else {
          gt.gt_boxes.push_back({right, BoxTag::ignore});
        }
        ref.gt_boxes = gt.gt_boxes;
        break;
      case 1:
        gt.gt_boxes = {{left, BoxTag::person}, {right, BoxTag::person}};
        ref.gt_boxes = {{left, BoxTag::person}};
        break;
      case 2:
        gt.gt_boxes = {{left, BoxTag::person}};
        ref.gt_boxes = {{left, BoxTag::person}, {right, BoxTag::person}};
        break;
      case 3: {
        gt.gt_boxes = {{left, BoxTag::person}};
        ref.gt_boxes = {{left.translated(std::round(left.width() * 0.6), 0.0), BoxTag::person}};
        break;
      }
      default: {
        // A person cut by the frame: the annotation continues past the edge,
        // the detector only sees the visible part.
        BBox outside = left;
        if (i % 10 == 4) {
          outside = {-28.0, left.y1, 14.0, left.y2};
        } else {
          outside = {kWidth - 12.0, std::max(0.0, left.y1 - 10.0), kWidth + 22.0, kHeight + 14.0};
        }
        gt.gt_boxes = {{outside, BoxTag::person}};
        ref.gt_boxes = {{clamp_box(outside, double(kWidth), double(kHeight)).box, BoxTag::person}};
        break;
      }
    }
    for (const auto& b : ref.gt_boxes) paint(img, b.box, 200.0f);
    write_png(dir / gt.path, img);
    truth.records.push_back(std::move(gt));
    seen.records.push_back(std::move(ref));
  }

  SyntheticFixture out{dir / "manifest.jsonl", dir / "reference.jsonl", dir / "mock.json"};
  save_manifest(truth, out.manifest);
  save_manifest(seen, out.reference);
  const nlohmann::json config = {{"kind", "mock"},
                                 {"score_threshold", 0.5},
                                 {"mock", {{"reference_manifest", "reference.jsonl"}, {"visibility_threshold", 0.5}}}};
  std::ofstream(out.detector_config) << config.dump(2) << '\n';
  return out;
}

}  // namespace detlens
