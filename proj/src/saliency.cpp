#include "detlens/saliency.hpp"

#include "detlens/errors.hpp"
#include "detlens/parallel.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <optional>

namespace fs = std::filesystem;
using nlohmann::json;

namespace detlens {

void validate(const MaskSpec& spec) {
  if (spec.grid_size < 2) throw std::invalid_argument("mask grid size must be >= 2");
  if (!(spec.keep_probability > 0.0 && spec.keep_probability < 1.0))
    throw std::invalid_argument("mask keep probability must lie in (0,1)");
  if (spec.num_masks < 1) throw std::invalid_argument("number of masks must be >= 1");
}

json to_json(const MaskSpec& spec) {
  return {{"grid_size", spec.grid_size},
          {"keep_probability", spec.keep_probability},
          {"num_masks", spec.num_masks},
          {"seed", spec.seed}};
}

MaskSpec mask_spec_from_json(const json& j) {
  MaskSpec s;
  s.grid_size = j.value("grid_size", s.grid_size);
  s.keep_probability = j.value("keep_probability", s.keep_probability);
  s.num_masks = j.value("num_masks", s.num_masks);
  s.seed = j.value("seed", s.seed);
  validate(s);
  return s;
}

namespace {

struct Tap {
  Eigen::Index lo;
  Eigen::Index hi;
  float w;  // weight of hi
};

// Sample positions of `n` output pixels along one axis.
std::vector<Tap> axis_taps(int n, int cells, int cell_size, int offset) {
  std::vector<Tap> taps(static_cast<std::size_t>(n));
  const float max_index = static_cast<float>(cells - 1);
  for (int i = 0; i < n; ++i) {
    float g = (static_cast<float>(i + offset) + 0.5f) / static_cast<float>(cell_size) - 0.5f;
    g = std::clamp(g, 0.0f, max_index);
    const auto lo = static_cast<Eigen::Index>(std::floor(g));
    const Eigen::Index hi = std::min<Eigen::Index>(lo + 1, cells - 1);
    taps[static_cast<std::size_t>(i)] = {lo, hi, g - static_cast<float>(lo)};
  }
  return taps;
}

int ceil_div(int a, int b) { return (a + b - 1) / b; }

}  // namespace

Grid<float> upsample_cells(const Grid<float>& cells, int width, int height, int offset_x, int offset_y) {
  if (width <= 0 || height <= 0) throw std::invalid_argument("mask size must be positive");
  if (cells.size() == 0) throw std::invalid_argument("empty cell grid");
  const int rows = static_cast<int>(cells.rows()), cols = static_cast<int>(cells.cols());
  const auto xt = axis_taps(width, cols, ceil_div(width, cols), offset_x);
  const auto yt = axis_taps(height, rows, ceil_div(height, rows), offset_y);
  // Interpolate along x first (rows x width), then along y.
  Grid<float> horiz(rows, width);
  for (int r = 0; r < rows; ++r)
    for (int x = 0; x < width; ++x) {
      const Tap& t = xt[static_cast<std::size_t>(x)];
      horiz(r, x) = (1.0f - t.w) * cells(r, t.lo) + t.w * cells(r, t.hi);
    }
  Grid<float> out(height, width);
  for (int y = 0; y < height; ++y) {
    const Tap& t = yt[static_cast<std::size_t>(y)];
    out.row(y) = (1.0f - t.w) * horiz.row(t.lo) + t.w * horiz.row(t.hi);
  }
  return out;
}

MaskGenerator::MaskGenerator(const MaskSpec& spec, int width, int height)
    : spec_(spec), width_(width), height_(height), rng_(spec.seed) {
  validate(spec);
  if (width <= 0 || height <= 0) throw std::invalid_argument("mask size must be positive");
  cell_w_ = ceil_div(width, spec.grid_size);
  cell_h_ = ceil_div(height, spec.grid_size);
}

Grid<float> MaskGenerator::next() {
  const int s = spec_.grid_size;
  Grid<float> cells(s, s);
  for (int r = 0; r < s; ++r)
    for (int c = 0; c < s; ++c) cells(r, c) = rng_.bernoulli(spec_.keep_probability) ? 1.0f : 0.0f;
  const int dx = static_cast<int>(rng_.uniform_index(static_cast<std::uint64_t>(cell_w_)));
  const int dy = static_cast<int>(rng_.uniform_index(static_cast<std::uint64_t>(cell_h_)));
  return upsample_cells(cells, width_, height_, dx, dy);
}

std::vector<Grid<float>> generate_masks(const MaskSpec& spec, int width, int height) {
  MaskGenerator gen(spec, width, height);
  std::vector<Grid<float>> out;
  out.reserve(static_cast<std::size_t>(spec.num_masks));
  for (int i = 0; i < spec.num_masks; ++i) out.push_back(gen.next());
  return out;
}

Image apply_mask(const Image& image, const Grid<float>& mask, FillMode fill) {
  if (mask.rows() != image.height() || mask.cols() != image.width())
    throw std::invalid_argument("mask size " + std::to_string(mask.cols()) + "x" + std::to_string(mask.rows()) +
                                " does not match image " + std::to_string(image.width()) + "x" +
                                std::to_string(image.height()));
  Image out;
  out.planes.reserve(image.planes.size());
  for (const auto& plane : image.planes) {
    if (fill == FillMode::black) {
      out.planes.push_back(plane * mask);
    } else {
      const float mean = plane.mean();
      out.planes.push_back(plane * mask + (1.0f - mask) * mean);
    }
  }
  return out;
}

namespace {

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("class probability vectors differ in length");
  const Eigen::Map<const Eigen::VectorXd> va(a.data(), static_cast<Eigen::Index>(a.size()));
  const Eigen::Map<const Eigen::VectorXd> vb(b.data(), static_cast<Eigen::Index>(b.size()));
  const double denom = va.norm() * vb.norm();
  if (denom <= 0.0) return 0.0;
  return std::clamp(va.dot(vb) / denom, 0.0, 1.0);
}

}  // namespace

double detection_similarity(const Detection& target, const Detection& proposal) {
  const double overlap = iou(target.box, proposal.box);
  if (overlap <= 0.0) return 0.0;
  const double cls = (target.class_probs && proposal.class_probs) ? cosine(*target.class_probs, *proposal.class_probs) : 1.0;
  return overlap * cls * proposal.objectness;
}

Detection ground_truth_target(const BBox& box) { return {box, 1.0, std::nullopt}; }

Grid<double> normalize_min_max(const Grid<double>& raw) {
  if (raw.size() == 0) return raw;
  const double lo = raw.minCoeff(), hi = raw.maxCoeff();
  if (!(hi > lo)) return Grid<double>::Zero(raw.rows(), raw.cols());
  return ((raw - lo) / (hi - lo)).min(1.0).max(0.0);
}

bool SaliencyMap::skip_flagged() const {
  const std::size_t total = skipped_samples + used_samples;
  return total > 0 && static_cast<double>(skipped_samples) > 0.01 * static_cast<double>(total);
}

namespace {

// Produces masks in order, runs the detector over each batch and
// accumulates in mask order so results do not depend on scheduling.
template <typename MaskSource>
std::vector<SaliencyMap> accumulate(const Image& image, std::span<const Detection> targets, Detector& detector,
                                    std::size_t num_masks, MaskSource&& next_mask, std::string_view record_id,
                                    const ExplainOptions& options, const MaskSpec& spec) {
  if (image.empty()) throw std::invalid_argument("cannot explain an empty image");
  if (targets.empty()) throw std::invalid_argument("no targets to explain");
  const int w = image.width(), h = image.height();
  std::vector<Grid<double>> raw(targets.size(), Grid<double>::Zero(h, w));
  std::size_t skipped = 0, used = 0;

  const std::size_t batch = std::max<std::size_t>(1, options.batch_size);
  const int workers = options.parallel ? detector.parallelism() : 1;
  std::vector<Grid<float>> masks;
  std::vector<std::optional<std::vector<Detection>>> results;
  for (std::size_t start = 0; start < num_masks; start += batch) {
    const std::size_t n = std::min(batch, num_masks - start);
    masks.clear();
    for (std::size_t i = 0; i < n; ++i) masks.push_back(next_mask());
    results.assign(n, std::nullopt);
    parallel_for(n, workers, [&](std::size_t i) {
      const Image perturbed = apply_mask(image, masks[i], options.fill);
      try {
        results[i] = detector.detect(perturbed, record_id);
      } catch (const TransportError&) {
        results[i] = std::nullopt;
      }
    });
    for (std::size_t i = 0; i < n; ++i) {
      if (!results[i]) {
        ++skipped;
        continue;
      }
      ++used;
      const Grid<double> mask = masks[i].cast<double>();
      for (std::size_t t = 0; t < targets.size(); ++t) {
        double weight = 0.0;
        for (const auto& proposal : *results[i]) weight = std::max(weight, detection_similarity(targets[t], proposal));
        if (weight > 0.0) raw[t] += weight * mask;
      }
    }
  }
  if (used == 0) throw Error("all " + std::to_string(num_masks) + " perturbation samples failed");

  std::vector<SaliencyMap> out;
  out.reserve(targets.size());
  for (std::size_t t = 0; t < targets.size(); ++t) {
    SaliencyMap m;
    m.width = w;
    m.height = h;
    m.normalized = normalize_min_max(raw[t]);
    m.raw = std::move(raw[t]);
    m.target = targets[t];
    m.spec = spec;
    m.skipped_samples = skipped;
    m.used_samples = used;
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace

std::vector<SaliencyMap> explain(const Image& image, std::span<const Detection> targets, Detector& detector,
                                 const MaskSpec& spec, std::string_view record_id, const ExplainOptions& options) {
  validate(spec);
  MaskGenerator gen(spec, image.width(), image.height());
  return accumulate(image, targets, detector, static_cast<std::size_t>(spec.num_masks), [&] { return gen.next(); },
                    record_id, options, spec);
}

SaliencyMap explain(const Image& image, const Detection& target, Detector& detector, const MaskSpec& spec,
                    std::string_view record_id, const ExplainOptions& options) {
  return std::move(explain(image, std::span<const Detection>(&target, 1), detector, spec, record_id, options).front());
}

std::vector<SaliencyMap> explain_with_masks(const Image& image, std::span<const Detection> targets, Detector& detector,
                                            std::span<const Grid<float>> masks, std::string_view record_id,
                                            const ExplainOptions& options) {
  std::size_t next = 0;
  MaskSpec spec;
  spec.num_masks = static_cast<int>(masks.size());
  return accumulate(image, targets, detector, masks.size(), [&] { return masks[next++]; }, record_id, options, spec);
}

std::array<float, 3> jet_color(double value) {
  const double v = std::clamp(value, 0.0, 1.0);
  auto ramp = [](double x) { return static_cast<float>(std::clamp(1.5 - std::abs(x), 0.0, 1.0)); };
  return {ramp(4.0 * v - 3.0), ramp(4.0 * v - 2.0), ramp(4.0 * v - 1.0)};
}

Image render_overlay(const Image& image, const SaliencyMap& map, double alpha) {
  if (map.width != image.width() || map.height != image.height())
    throw std::invalid_argument("saliency map and image differ in size");
  const float a = static_cast<float>(std::clamp(alpha, 0.0, 1.0));
  const int w = image.width(), h = image.height();
  Image out(w, h, 3);
  for (int c = 0; c < 3; ++c) out.planes[static_cast<std::size_t>(c)] = image.planes[image.channels() == 3 ? c : 0];

  // Overlay layer: heat colours plus a white target outline.
  Image layer(w, h, 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const auto col = jet_color(map.normalized(y, x));
      for (int c = 0; c < 3; ++c) layer.planes[static_cast<std::size_t>(c)](y, x) = 255.0f * col[static_cast<std::size_t>(c)];
    }
  const auto clamp_x = [&](double v) { return std::clamp(static_cast<int>(std::lround(v)), 0, w - 1); };
  const auto clamp_y = [&](double v) { return std::clamp(static_cast<int>(std::lround(v)), 0, h - 1); };
  const int x0 = clamp_x(map.target.box.x1), x1 = clamp_x(map.target.box.x2 - 1);
  const int y0 = clamp_y(map.target.box.y1), y1 = clamp_y(map.target.box.y2 - 1);
  for (auto& plane : layer.planes) {
    plane.block(y0, x0, 1, x1 - x0 + 1).setConstant(255.0f);
    plane.block(y1, x0, 1, x1 - x0 + 1).setConstant(255.0f);
    plane.block(y0, x0, y1 - y0 + 1, 1).setConstant(255.0f);
    plane.block(y0, x1, y1 - y0 + 1, 1).setConstant(255.0f);
  }
  for (int c = 0; c < 3; ++c) {
    auto& p = out.planes[static_cast<std::size_t>(c)];
    p = (1.0f - a) * p + a * layer.planes[static_cast<std::size_t>(c)];
  }
  return out;
}

json sidecar_json(const SaliencyMap& map) {
  json target = {{"box", {map.target.box.x1, map.target.box.y1, map.target.box.x2, map.target.box.y2}},
                 {"objectness", map.target.objectness}};
  if (map.target.class_probs) target["class_probs"] = *map.target.class_probs;
  if (!map.label.empty()) target["label"] = map.label;
  return {{"schema_version", 1},
          {"width", map.width},
          {"height", map.height},
          {"spec", to_json(map.spec)},
          {"skipped_samples", map.skipped_samples},
          {"used_samples", map.used_samples},
          {"skip_flagged", map.skip_flagged()},
          {"raw_min", map.raw.size() ? map.raw.minCoeff() : 0.0},
          {"raw_max", map.raw.size() ? map.raw.maxCoeff() : 0.0},
          {"target", std::move(target)}};
}

namespace {

void write_f32_le(const fs::path& path, const Grid<double>& raw) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  std::vector<char> bytes(static_cast<std::size_t>(raw.size()) * 4);
  for (Eigen::Index i = 0; i < raw.size(); ++i) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(static_cast<float>(raw.data()[i]));
    for (int b = 0; b < 4; ++b) bytes[static_cast<std::size_t>(i) * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xFF);
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

}  // namespace

ExplanationFiles save_explanation(const fs::path& dir, const std::string& stem, const Image& image, const SaliencyMap& map,
                                  double alpha) {
  fs::create_directories(dir);
  ExplanationFiles files{dir / (stem + ".png"), dir / (stem + ".f32"), dir / (stem + ".json")};
  write_png(files.overlay, render_overlay(image, map, alpha));
  write_f32_le(files.raw, map.raw);
  write_text(files.sidecar, sidecar_json(map).dump(2) + "\n");
  return files;
}

Grid<float> load_raw_map(const fs::path& path, int width, int height) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open " + path.string());
  std::vector<unsigned char> bytes(static_cast<std::size_t>(width) * height * 4);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) throw ParseError("raw map is truncated: " + path.string());
  Grid<float> out(height, width);
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[static_cast<std::size_t>(i) * 4 + b]) << (8 * b);
    out.data()[i] = std::bit_cast<float>(bits);
  }
  return out;
}

}  // namespace detlens
