#include "detlens/evaluation.hpp"

#include <doctest.h>

#include <algorithm>
#include <chrono>
#include <numeric>
#include <random>

using namespace detlens;

namespace {

// Exhaustive oracle: best total IoU over every injective assignment of the smaller side.
double brute_force_total(const std::vector<BBox>& preds, const std::vector<BBox>& gts) {
  const bool flip = preds.size() > gts.size();
  const auto& small = flip ? gts : preds;
  const auto& large = flip ? preds : gts;
  std::vector<int> perm(large.size());
  std::iota(perm.begin(), perm.end(), 0);
  double best = 0.0;
  do {
    double total = 0.0;
    for (std::size_t i = 0; i < small.size(); ++i) total += iou(small[i], large[static_cast<std::size_t>(perm[i])]);
    best = std::max(best, total);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

std::vector<BBox> random_boxes(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> pos(0, 60), size(2, 30);
  std::vector<BBox> out;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = pos(rng), y = pos(rng);
    out.push_back({x, y, x + size(rng), y + size(rng)});
  }
  return out;
}

std::vector<Detection> dets(const std::vector<BBox>& boxes) {
  std::vector<Detection> out;
  for (const auto& b : boxes) out.push_back({b, 1.0, std::nullopt});
  return out;
}

std::vector<Category> fixture(std::array<std::size_t, 4> counts) {
  std::vector<Category> out;
  for (std::size_t i = 0; i < 4; ++i) out.insert(out.end(), counts[i], kAllCategories[i]);
  return out;
}

}  // namespace

TEST_CASE("match_boxes examples") {
  const BBox a{0, 0, 10, 10}, b{20, 20, 40, 40};
  const std::vector<BBox> single{a};
  auto m = match_boxes(single, single);
  REQUIRE(m.pairs.size() == 1);
  CHECK(m.pairs[0].iou == 1.0);

  const std::vector<BBox> preds{a, b}, gts{b, a};
  m = match_boxes(preds, gts);
  REQUIRE(m.pairs.size() == 2);
  CHECK(m.pairs[0].pred == 0);
  CHECK(m.pairs[0].gt == 1);
  CHECK(m.pairs[1].pred == 1);
  CHECK(m.pairs[1].gt == 0);
  CHECK(m.total_iou() == 2.0);
}

TEST_CASE("zero-overlap pairs are left unmatched") {
  const std::vector<BBox> preds{{0, 0, 10, 10}}, gts{{50, 50, 60, 60}};
  const auto m = match_boxes(preds, gts);
  CHECK(m.pairs.empty());
  CHECK(m.unmatched_preds == std::vector<std::size_t>{0});
  CHECK(m.unmatched_gts == std::vector<std::size_t>{0});
  const std::vector<BBox> none;
  CHECK(match_boxes(none, gts).unmatched_gts.size() == 1);
  CHECK(match_boxes(preds, none).unmatched_preds.size() == 1);
}

TEST_CASE("assignment equals the brute-force optimum") {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> count(0, 6);
  for (int t = 0; t < 500; ++t) {
    const auto preds = random_boxes(rng, static_cast<std::size_t>(count(rng)));
    const auto gts = random_boxes(rng, static_cast<std::size_t>(count(rng)));
    const auto m = match_boxes(preds, gts);
    REQUIRE(std::abs(m.total_iou() - brute_force_total(preds, gts)) < 1e-9);
    REQUIRE(m.pairs.size() + m.unmatched_preds.size() == preds.size());
    REQUIRE(m.pairs.size() + m.unmatched_gts.size() == gts.size());
  }
}

TEST_CASE("matching is invariant to input order") {
  std::mt19937_64 rng(6);
  for (int t = 0; t < 200; ++t) {
    auto preds = random_boxes(rng, 5), gts = random_boxes(rng, 4);
    const double total = match_boxes(preds, gts).total_iou();
    std::shuffle(preds.begin(), preds.end(), rng);
    std::shuffle(gts.begin(), gts.end(), rng);
    REQUIRE(match_boxes(preds, gts).total_iou() == doctest::Approx(total).epsilon(1e-12));
  }
}

TEST_CASE("max_weight_assignment on rectangular matrices") {
  Eigen::MatrixXd w(2, 3);
  w << 0.1, 0.9, 0.0,
       0.8, 0.85, 0.2;
  CHECK(max_weight_assignment(w) == std::vector<int>{1, 0});
  const Eigen::MatrixXd t = w.transpose();
  CHECK(max_weight_assignment(t) == std::vector<int>{1, 0, -1});
  CHECK(max_weight_assignment(Eigen::MatrixXd(0, 3)).empty());
  CHECK(max_weight_assignment(Eigen::MatrixXd(2, 0)) == std::vector<int>{-1, -1});
}

TEST_CASE("categorize examples") {
  const std::vector<BBox> three{{0, 0, 10, 10}, {20, 0, 30, 10}, {40, 0, 50, 10}};
  CHECK(categorize(dets({three[0], three[1]}), three) == Category::UnderDetection);
  CHECK(categorize(dets(three), std::span(three).first(2)) == Category::OverDetection);
  CHECK(categorize(dets(three), three) == Category::CorrectLocalization);
  const std::vector<BBox> far{{20, 20, 30, 30}};
  CHECK(categorize(dets({{0, 0, 10, 10}}), far) == Category::Mislocalization);
  const std::vector<BBox> none;
  CHECK(categorize({}, none) == Category::CorrectLocalization);
  CHECK(categorize_image("e", {}, none).vacuous());
}

TEST_CASE("the localization threshold is inclusive") {
  const std::vector<BBox> gt{{0, 0, 10, 10}};
  // iou((0,0,10,10),(0,0,10,5)) = 50 / 100
  CHECK(categorize(dets({{0, 0, 10, 5}}), gt) == Category::CorrectLocalization);
  CHECK(categorize(dets({{0, 0, 10, 4.9}}), gt) == Category::Mislocalization);
}

TEST_CASE("categorize is invariant under joint translation and scaling") {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 300; ++t) {
    const auto preds = random_boxes(rng, 3), gts = random_boxes(rng, 3);
    const Category c = categorize(dets(preds), gts);
    std::vector<BBox> p2, g2;
    for (const auto& b : preds) p2.push_back(b.translated(11, 7).scaled(2));
    for (const auto& b : gts) g2.push_back(b.translated(11, 7).scaled(2));
    REQUIRE(categorize(dets(p2), g2) == c);
  }
}

TEST_CASE("summarize percentages") {
  const auto s = summarize(fixture({855, 17, 108, 20}));
  CHECK(s.total == 1000);
  CHECK(s.percentage(Category::UnderDetection) == 85.5);
  CHECK(s.percentage(Category::OverDetection) == 1.7);
  CHECK(s.percentage(Category::CorrectLocalization) == 10.8);
  CHECK(s.percentage(Category::Mislocalization) == 2.0);
  CHECK(summarize(std::vector<Category>{Category::CorrectLocalization}).percentage(Category::CorrectLocalization) == 100.0);
  const auto quarter = summarize(fixture({1, 1, 1, 1}));
  for (Category c : kAllCategories) CHECK(quarter.percentage(c) == 25.0);
  CHECK_THROWS_AS(summarize(std::vector<Category>{}), std::invalid_argument);
}

TEST_CASE("compare_stats deltas and directions") {
  const auto t = compare_stats(stats_from_counts({855, 17, 108, 20}), stats_from_counts({834, 13, 133, 20}));
  CHECK(t.rows[0].delta == -21);
  CHECK(t.rows[1].delta == -4);
  CHECK(t.rows[2].delta == 25);
  CHECK(t.rows[3].delta == 0);
  CHECK(t.rows[0].better == Better::target);
  CHECK(t.rows[2].better == Better::target);
  CHECK(t.rows[3].better == Better::tie);
  for (const auto& row : t.rows) CHECK(row.improved_or_tied());
  const std::string text = format_table(t, "before", "after");
  CHECK(text.find("-21") != std::string::npos);
  CHECK(text.find("+25") != std::string::npos);

  const auto same = compare_stats(stats_from_counts({1, 2, 3, 4}), stats_from_counts({1, 2, 3, 4}));
  for (const auto& row : same.rows) CHECK(row.better == Better::tie);

  const auto swap = compare_stats(stats_from_counts({10, 0, 0, 0}), stats_from_counts({0, 0, 10, 0}));
  CHECK(swap.rows[0].delta == -10);
  CHECK(swap.rows[2].delta == 10);

  const auto worse = compare_stats(stats_from_counts({0, 0, 10, 0}), stats_from_counts({10, 0, 0, 0}));
  CHECK(worse.rows[0].better == Better::base);
  CHECK_FALSE(worse.rows[0].improved_or_tied());

  CHECK_THROWS_AS(compare_stats(stats_from_counts({1, 0, 0, 0}), stats_from_counts({2, 0, 0, 0})),
                  std::invalid_argument);
}

TEST_CASE("category json round trip") {
  const std::vector<BBox> gts{{0, 0, 10, 10}, {20, 0, 30, 10}};
  std::vector<ImageCategory> images;
  images.push_back(categorize_image("a", dets({{0, 0, 10, 10}}), gts));
  images.push_back(categorize_image("b", dets(gts), gts));
  images.push_back(categorize_image("c", {}, std::span<const BBox>()));
  const auto j = categories_to_json(images);
  CHECK(j["schema_version"] == 1);
  CHECK(j["stats"]["vacuous_correct"] == 1);
  const auto back = categories_from_json(j);
  REQUIRE(back.size() == 3);
  CHECK(back[0].category == Category::UnderDetection);
  CHECK(back[1].matching.pairs.size() == 2);
  CHECK(back[2].vacuous());
  CHECK(stats_from_json(to_json(summarize(back))).counts == summarize(images).counts);
  CHECK(parse_category("OverDetection") == Category::OverDetection);
  CHECK_THROWS_AS(parse_category("Nope"), std::invalid_argument);
}
