#include "detlens/evaluation.hpp"

#include <algorithm>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

using nlohmann::json;

namespace detlens {

std::string to_string(Category c) {
  switch (c) {
    case Category::UnderDetection: return "UnderDetection";
    case Category::OverDetection: return "OverDetection";
    case Category::CorrectLocalization: return "CorrectLocalization";
    case Category::Mislocalization: return "Mislocalization";
  }
  return "Unknown";
}

Category parse_category(std::string_view name) {
  for (Category c : kAllCategories)
    if (to_string(c) == name) return c;
  throw std::invalid_argument("unknown category '" + std::string(name) + "'");
}

double Matching::total_iou() const {
  double s = 0.0;
  for (const auto& p : pairs) s += p.iou;
  return s;
}

double Matching::mean_iou() const { return pairs.empty() ? 0.0 : total_iou() / static_cast<double>(pairs.size()); }

Eigen::MatrixXd iou_matrix(std::span<const BBox> preds, std::span<const BBox> gts) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(preds.size()), static_cast<Eigen::Index>(gts.size()));
  for (std::size_t i = 0; i < preds.size(); ++i)
    for (std::size_t j = 0; j < gts.size(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = iou(preds[i], gts[j]);
  return m;
}

namespace {

// Minimum-cost assignment for rows <= cols, potentials formulation, O(rows^2 cols).
std::vector<int> min_cost_rows_le_cols(const Eigen::MatrixXd& cost) {
  const int n = static_cast<int>(cost.rows());
  const int m = static_cast<int>(cost.cols());
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> assignment(n, -1);
  for (int j = 1; j <= m; ++j)
    if (p[j] != 0) assignment[p[j] - 1] = j - 1;
  return assignment;
}

}  // namespace

std::vector<int> max_weight_assignment(const Eigen::MatrixXd& weights) {
  const auto rows = weights.rows(), cols = weights.cols();
  if (rows == 0 || cols == 0) return std::vector<int>(static_cast<std::size_t>(rows), -1);
  if (rows <= cols) return min_cost_rows_le_cols(-weights);
  const std::vector<int> by_col = min_cost_rows_le_cols(-weights.transpose());
  std::vector<int> assignment(static_cast<std::size_t>(rows), -1);
  for (std::size_t c = 0; c < by_col.size(); ++c)
    if (by_col[c] >= 0) assignment[static_cast<std::size_t>(by_col[c])] = static_cast<int>(c);
  return assignment;
}

Matching match_boxes(std::span<const BBox> preds, std::span<const BBox> gts) {
  const Eigen::MatrixXd w = iou_matrix(preds, gts);
  const std::vector<int> assignment = max_weight_assignment(w);
  Matching m;
  std::vector<char> gt_used(gts.size(), 0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const int j = assignment[i];
    if (j >= 0 && w(static_cast<Eigen::Index>(i), j) > 0.0) {
      m.pairs.push_back({i, static_cast<std::size_t>(j), w(static_cast<Eigen::Index>(i), j)});
      gt_used[static_cast<std::size_t>(j)] = 1;
    } else {
      m.unmatched_preds.push_back(i);
    }
  }
  for (std::size_t j = 0; j < gts.size(); ++j)
    if (!gt_used[j]) m.unmatched_gts.push_back(j);
  return m;
}

namespace {

Category classify(std::size_t num_preds, std::size_t num_gts, const Matching& m) {
  if (num_preds < num_gts) return Category::UnderDetection;
  if (num_preds > num_gts) return Category::OverDetection;
  if (m.pairs.size() != num_gts) return Category::Mislocalization;
  for (const auto& p : m.pairs)
    if (p.iou < kLocalizationIou) return Category::Mislocalization;
  return Category::CorrectLocalization;
}

std::vector<BBox> boxes_of(std::span<const Detection> preds) {
  std::vector<BBox> out;
  out.reserve(preds.size());
  for (const auto& d : preds) out.push_back(d.box);
  return out;
}

}  // namespace

ImageCategory categorize_image(std::string id, std::span<const Detection> preds, std::span<const BBox> gts) {
  ImageCategory out;
  out.id = std::move(id);
  out.num_preds = preds.size();
  out.num_gts = gts.size();
  const std::vector<BBox> pred_boxes = boxes_of(preds);
  out.matching = match_boxes(pred_boxes, gts);
  out.category = classify(out.num_preds, out.num_gts, out.matching);
  return out;
}

Category categorize(std::span<const Detection> preds, std::span<const BBox> gts) {
  return categorize_image({}, preds, gts).category;
}

CategoryStats stats_from_counts(const std::array<std::size_t, 4>& counts) {
  CategoryStats s;
  s.counts = counts;
  s.total = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
  if (s.total == 0) throw std::invalid_argument("cannot summarize an empty category list");
  for (std::size_t i = 0; i < 4; ++i) s.percentages[i] = 100.0 * static_cast<double>(counts[i]) / static_cast<double>(s.total);
  return s;
}

CategoryStats summarize(std::span<const Category> categories) {
  std::array<std::size_t, 4> counts{};
  for (Category c : categories) ++counts[static_cast<std::size_t>(c)];
  return stats_from_counts(counts);
}

CategoryStats summarize(std::span<const ImageCategory> images) {
  std::array<std::size_t, 4> counts{};
  for (const auto& img : images) ++counts[static_cast<std::size_t>(img.category)];
  return stats_from_counts(counts);
}

ComparisonTable compare_stats(const CategoryStats& base, const CategoryStats& target) {
  if (base.total != target.total)
    throw std::invalid_argument("cannot compare runs over different totals (" + std::to_string(base.total) + " vs " +
                                std::to_string(target.total) + ")");
  ComparisonTable t;
  t.total = base.total;
  for (std::size_t i = 0; i < 4; ++i) {
    auto& row = t.rows[i];
    row.category = kAllCategories[i];
    row.base = base.counts[i];
    row.target = target.counts[i];
    row.delta = static_cast<long long>(row.target) - static_cast<long long>(row.base);
    row.lower_is_better = row.category != Category::CorrectLocalization;
    if (row.delta == 0) {
      row.better = Better::tie;
    } else {
      const bool target_lower = row.delta < 0;
      row.better = (target_lower == row.lower_is_better) ? Better::target : Better::base;
    }
  }
  return t;
}

std::string format_table(const ComparisonTable& table, std::string_view base_label, std::string_view target_label) {
  std::ostringstream os;
  const int w0 = 30;
  const int w1 = std::max<int>(10, static_cast<int>(base_label.size()) + 2);
  const int w2 = std::max<int>(10, static_cast<int>(target_label.size()) + 2);
  os << std::left << std::setw(w0) << "Case" << std::right << std::setw(w1) << base_label << std::setw(w2)
     << target_label << std::setw(8) << "delta" << '\n';
  for (const auto& row : table.rows) {
    const std::string name = to_string(row.category) + (row.lower_is_better ? " (lower)" : " (higher)");
    auto mark = [&](std::size_t v, bool better) { return std::to_string(v) + (better ? "*" : " "); };
    std::string delta = (row.delta > 0 ? "+" : "") + std::to_string(row.delta);
    os << std::left << std::setw(w0) << name << std::right << std::setw(w1) << mark(row.base, row.better == Better::base)
       << std::setw(w2) << mark(row.target, row.better == Better::target) << std::setw(8) << delta << '\n';
  }
  os << "total images: " << table.total << "  (* = better)\n";
  return os.str();
}

json to_json(const Matching& m) {
  json pairs = json::array();
  for (const auto& p : m.pairs) pairs.push_back({{"pred", p.pred}, {"gt", p.gt}, {"iou", p.iou}});
  return {{"pairs", std::move(pairs)}, {"unmatched_preds", m.unmatched_preds}, {"unmatched_gts", m.unmatched_gts}};
}

json to_json(const CategoryStats& s) {
  json counts = json::object(), pct = json::object();
  for (std::size_t i = 0; i < 4; ++i) {
    counts[to_string(kAllCategories[i])] = s.counts[i];
    pct[to_string(kAllCategories[i])] = s.percentages[i];
  }
  return {{"total", s.total}, {"counts", std::move(counts)}, {"percentages", std::move(pct)}};
}

CategoryStats stats_from_json(const json& j) {
  std::array<std::size_t, 4> counts{};
  for (std::size_t i = 0; i < 4; ++i) counts[i] = j.at("counts").at(to_string(kAllCategories[i])).get<std::size_t>();
  return stats_from_counts(counts);
}

json to_json(const ComparisonTable& t) {
  json rows = json::array();
  for (const auto& r : t.rows) {
    rows.push_back({{"category", to_string(r.category)},
                    {"base", r.base},
                    {"target", r.target},
                    {"delta", r.delta},
                    {"direction", r.lower_is_better ? "lower" : "higher"},
                    {"better", r.better == Better::base ? "base" : r.better == Better::target ? "target" : "tie"}});
  }
  return {{"schema_version", 1}, {"total", t.total}, {"rows", std::move(rows)}};
}

json categories_to_json(std::span<const ImageCategory> images) {
  json arr = json::array();
  std::size_t vacuous = 0;
  for (const auto& img : images) {
    if (img.vacuous()) ++vacuous;
    arr.push_back({{"id", img.id},
                   {"category", to_string(img.category)},
                   {"num_preds", img.num_preds},
                   {"num_gts", img.num_gts},
                   {"vacuous", img.vacuous()},
                   {"matching", to_json(img.matching)}});
  }
  json stats = images.empty() ? json::object() : to_json(summarize(images));
  stats["vacuous_correct"] = vacuous;
  return {{"schema_version", 1}, {"images", std::move(arr)}, {"stats", std::move(stats)}};
}

std::vector<ImageCategory> categories_from_json(const json& j) {
  std::vector<ImageCategory> out;
  for (const auto& img : j.at("images")) {
    ImageCategory c;
    c.id = img.at("id").get<std::string>();
    c.category = parse_category(img.at("category").get<std::string>());
    c.num_preds = img.value("num_preds", std::size_t{0});
    c.num_gts = img.value("num_gts", std::size_t{0});
    const auto& m = img.at("matching");
    for (const auto& p : m.at("pairs"))
      c.matching.pairs.push_back({p.at("pred").get<std::size_t>(), p.at("gt").get<std::size_t>(), p.at("iou").get<double>()});
    c.matching.unmatched_preds = m.at("unmatched_preds").get<std::vector<std::size_t>>();
    c.matching.unmatched_gts = m.at("unmatched_gts").get<std::vector<std::size_t>>();
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace detlens
