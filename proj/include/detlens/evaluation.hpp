#pragma once

#include "detlens/geometry.hpp"

#include <json.hpp>

#include <Eigen/Dense>

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace detlens {

enum class Category { UnderDetection, OverDetection, CorrectLocalization, Mislocalization };

inline constexpr std::array<Category, 4> kAllCategories = {
    Category::UnderDetection, Category::OverDetection, Category::CorrectLocalization, Category::Mislocalization};

inline constexpr double kLocalizationIou = 0.5;

std::string to_string(Category c);
/// Throws std::invalid_argument for unknown names.
Category parse_category(std::string_view name);

struct MatchedPair {
  std::size_t pred{0};
  std::size_t gt{0};
  double iou{0.0};
};

struct Matching {
  std::vector<MatchedPair> pairs;  // sorted by pred index
  std::vector<std::size_t> unmatched_preds;
  std::vector<std::size_t> unmatched_gts;

  double total_iou() const;
  /// 0 when there are no pairs.
  double mean_iou() const;
};

/// Pairwise IoU, rows = preds, cols = gts.
Eigen::MatrixXd iou_matrix(std::span<const BBox> preds, std::span<const BBox> gts);

/// Square-or-rectangular maximum-weight assignment (Hungarian / Kuhn-Munkres).
/// Returns, for every row, the assigned column or -1. Rows and columns are
/// scanned in index order, so ties resolve towards lower indices.
std::vector<int> max_weight_assignment(const Eigen::MatrixXd& weights);

/// One-to-one matching maximising total IoU; zero-IoU pairs are left unmatched.
Matching match_boxes(std::span<const BBox> preds, std::span<const BBox> gts);

/// Caller must already have removed ignore-tagged ground truth.
Category categorize(std::span<const Detection> preds, std::span<const BBox> gts);

struct ImageCategory {
  std::string id;
  Category category{Category::CorrectLocalization};
  Matching matching;
  std::size_t num_preds{0};
  std::size_t num_gts{0};

  /// Both lists empty: counted as correct, reported separately.
  bool vacuous() const { return num_preds == 0 && num_gts == 0; }
};

ImageCategory categorize_image(std::string id, std::span<const Detection> preds, std::span<const BBox> gts);

struct CategoryStats {
  std::array<std::size_t, 4> counts{};
  std::size_t total{0};
  std::array<double, 4> percentages{};

  std::size_t count(Category c) const { return counts[static_cast<std::size_t>(c)]; }
  double percentage(Category c) const { return percentages[static_cast<std::size_t>(c)]; }
};

/// Throws std::invalid_argument when `categories` is empty.
CategoryStats summarize(std::span<const Category> categories);
CategoryStats summarize(std::span<const ImageCategory> images);
CategoryStats stats_from_counts(const std::array<std::size_t, 4>& counts);

enum class Better { base, target, tie };

struct ComparisonRow {
  Category category{};
  std::size_t base{0};
  std::size_t target{0};
  long long delta{0};
  bool lower_is_better{true};
  Better better{Better::tie};
  /// True when the change moves in the preferred direction or is zero.
  bool improved_or_tied() const { return better != Better::base; }
};

struct ComparisonTable {
  std::array<ComparisonRow, 4> rows{};
  std::size_t total{0};
};

/// Throws std::invalid_argument when totals differ.
ComparisonTable compare_stats(const CategoryStats& base, const CategoryStats& target);

/// Aligned text table with arrow direction and '*' marking the better side.
std::string format_table(const ComparisonTable& table, std::string_view base_label = "base",
                         std::string_view target_label = "target");

nlohmann::json to_json(const Matching& m);
nlohmann::json to_json(const CategoryStats& s);
CategoryStats stats_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ComparisonTable& t);

/// categories.json: {"schema_version", "images": [...], "stats": {...}}
nlohmann::json categories_to_json(std::span<const ImageCategory> images);
std::vector<ImageCategory> categories_from_json(const nlohmann::json& j);

}  // namespace detlens
