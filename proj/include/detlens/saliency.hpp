#pragma once

#include "detlens/detector.hpp"
#include "detlens/geometry.hpp"
#include "detlens/image.hpp"
#include "detlens/random.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace detlens {

/// Random-mask configuration. Defaults: 5000 masks on a 16x16 grid, keep probability 0.5.
struct MaskSpec {
  int grid_size{16};
  double keep_probability{0.5};
  int num_masks{5000};
  std::uint64_t seed{0};
};

void validate(const MaskSpec& spec);
nlohmann::json to_json(const MaskSpec& spec);
MaskSpec mask_spec_from_json(const nlohmann::json& j);

/// Bilinearly upsamples a coarse grid of cell values to a w x h mask. Cells
/// are ceil(w/cols) x ceil(h/rows) pixels and the window is shifted by
/// (offset_x, offset_y) pixels into the upsampled canvas; edges clamp.
Grid<float> upsample_cells(const Grid<float>& cells, int width, int height, int offset_x, int offset_y);

/// Sequential mask source: each mask is an s x s Bernoulli(p) grid,
/// upsampled with a random sub-cell shift. Same (spec, size) -> same sequence.
class MaskGenerator {
 public:
  MaskGenerator(const MaskSpec& spec, int width, int height);

  Grid<float> next();

  int cell_width() const { return cell_w_; }
  int cell_height() const { return cell_h_; }

 private:
  MaskSpec spec_;
  int width_, height_, cell_w_, cell_h_;
  Rng rng_;
};

std::vector<Grid<float>> generate_masks(const MaskSpec& spec, int width, int height);

enum class FillMode { black, mean };

/// Per-pixel, per-channel blend towards the fill: m * I + (1 - m) * fill.
Image apply_mask(const Image& image, const Grid<float>& mask, FillMode fill = FillMode::black);

/// iou(boxes) * cosine(class_probs) * proposal objectness. The cosine term is
/// 1 when either side lacks class probabilities.
double detection_similarity(const Detection& target, const Detection& proposal);

/// Target used when explaining a ground-truth box.
Detection ground_truth_target(const BBox& box);

/// Maps to [0,1] by min-max; a constant grid maps to all zeros.
Grid<double> normalize_min_max(const Grid<double>& raw);

struct SaliencyMap {
  int width{0};
  int height{0};
  Grid<double> raw;
  Grid<double> normalized;
  Detection target;
  std::string label;
  MaskSpec spec;
  std::size_t skipped_samples{0};
  std::size_t used_samples{0};

  /// More than 1% of perturbation samples failed.
  bool skip_flagged() const;
};

struct ExplainOptions {
  FillMode fill{FillMode::black};
  /// Query the detector concurrently (up to its parallelism). Accumulation
  /// order stays fixed, so results match sequential mode.
  bool parallel{false};
  std::size_t batch_size{64};
};

/// Explains several targets of one image from a single set of masks.
std::vector<SaliencyMap> explain(const Image& image, std::span<const Detection> targets, Detector& detector,
                                 const MaskSpec& spec, std::string_view record_id, const ExplainOptions& options = {});

SaliencyMap explain(const Image& image, const Detection& target, Detector& detector, const MaskSpec& spec,
                    std::string_view record_id, const ExplainOptions& options = {});

/// Same as explain() but with caller-supplied masks.
std::vector<SaliencyMap> explain_with_masks(const Image& image, std::span<const Detection> targets, Detector& detector,
                                            std::span<const Grid<float>> masks, std::string_view record_id,
                                            const ExplainOptions& options = {});

/// Jet-style ramp: 0 -> dark blue, 1 -> dark red. Components in [0,1].
std::array<float, 3> jet_color(double value);

/// Heatmap blended over the image with the target box outlined; the
/// outline is part of the blended layer so alpha = 0 returns the source.
Image render_overlay(const Image& image, const SaliencyMap& map, double alpha = 0.5);

struct ExplanationFiles {
  std::filesystem::path overlay;
  std::filesystem::path raw;
  std::filesystem::path sidecar;
};

/// Writes <dir>/<stem>.png, <stem>.f32 (raw map, little-endian float32,
/// row-major) and <stem>.json.
ExplanationFiles save_explanation(const std::filesystem::path& dir, const std::string& stem, const Image& image,
                                  const SaliencyMap& map, double alpha = 0.5);

nlohmann::json sidecar_json(const SaliencyMap& map);

Grid<float> load_raw_map(const std::filesystem::path& path, int width, int height);

}  // namespace detlens
