#pragma once

#include "detlens/dataset.hpp"
#include "detlens/detector.hpp"
#include "detlens/evaluation.hpp"
#include "detlens/saliency.hpp"

#include <json.hpp>

#include <array>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace detlens {

// Run directory layout (runs/<run_id>/):
//   run.json, manifest.jsonl, predictions.jsonl, categories.json, audit.json,
//   explanations/<image_id>/<target>.{png,f32,json}, annotations.jsonl, remediations.jsonl

enum class Stage { sample, predict, categorize, audit, explain };

inline constexpr std::array<Stage, 5> kStages = {Stage::sample, Stage::predict, Stage::categorize, Stage::audit,
                                                 Stage::explain};

std::string to_string(Stage s);
Stage parse_stage(std::string_view name);

enum class RunStatus { running, completed, failed };

std::string to_string(RunStatus s);

struct RunConfig {
  std::filesystem::path manifest;
  DetectorConfig detector;
  std::uint64_t seed{0};
  /// Child runs reuse their parent's sample as-is.
  bool sample{true};
  MaskSpec mask_spec{};
  int explain_k{5};
  bool parallel_explain{false};
  std::optional<std::string> run_id;
  std::optional<std::string> parent_run_id;
};

nlohmann::json to_json(const RunConfig& config);
RunConfig run_config_from_json(const nlohmann::json& j);

struct ExplanationEntry {
  std::string image_id;
  std::string target;    // "pred_<i>" or "gt_<i>"
  std::string category;  // category of the image
  std::filesystem::path overlay;  // relative to the run directory
  std::filesystem::path raw;
  std::filesystem::path sidecar;
};

struct RunRecord {
  std::string run_id;
  std::string created_at;
  RunStatus status{RunStatus::running};
  std::optional<std::string> failed_stage;
  std::optional<std::string> error;
  std::optional<std::string> parent_run_id;
  std::optional<nlohmann::json> remediation;
  RunConfig config;
  std::array<bool, 5> stages{};
  std::vector<ExplanationEntry> explanations;

  bool done(Stage s) const { return stages[static_cast<std::size_t>(s)]; }
  /// Artifact path (relative to the run dir) for a single-file stage.
  static std::filesystem::path artifact(Stage s);
};

nlohmann::json to_json(const RunRecord& record);
RunRecord run_record_from_json(const nlohmann::json& j);

using DetectorFactory = std::function<std::unique_ptr<Detector>(const DetectorConfig&, const DatasetManifest& run_manifest)>;

struct PipelineContext {
  std::filesystem::path runs_root;
  /// Defaults to make_detector(config, &run_manifest).
  DetectorFactory detector_factory;
};

std::string new_run_id();
std::filesystem::path run_dir(const std::filesystem::path& runs_root, const std::string& run_id);

RunRecord load_run(const std::filesystem::path& runs_root, const std::string& run_id);
std::vector<RunRecord> list_runs(const std::filesystem::path& runs_root);

/// Executes sample -> predict -> categorize -> audit -> explain, persisting
/// each stage. Re-entering with an existing run_id resumes after the last
/// completed stage (using the stored configuration). Stage failures are
/// recorded in the returned record rather than thrown.
RunRecord run_debug(const RunConfig& config, const PipelineContext& context);

/// Images picked for explanation: per non-correct category, top-K by
/// |count error| descending, then mean matched IoU ascending, then id.
std::vector<const ImageCategory*> select_for_explanation(std::span<const ImageCategory> images, int k);

enum class RemediationAction { relabel, pad };

std::string to_string(RemediationAction a);
RemediationAction parse_remediation_action(std::string_view name);

struct RemediationPlan {
  std::string run_id;
  RemediationAction action{RemediationAction::relabel};
  Padding padding{};
  float pad_fill{kDefaultPadFill};
  std::string status{"proposed"};
  std::optional<std::string> child_run_id;
};

nlohmann::json to_json(const RemediationPlan& plan);
RemediationPlan remediation_plan_from_json(const nlohmann::json& j);

/// Builds the remediated manifest from the parent's sample, runs it as a
/// child of the parent and logs the plan in the parent's remediations.jsonl.
RunRecord apply_remediation(const RemediationPlan& plan, const PipelineContext& context,
                            std::optional<std::string> child_run_id = std::nullopt);

struct CategoryTransition {
  std::string image_id;
  Category from{};
  Category to{};
  std::vector<std::filesystem::path> base_explanations;
  std::vector<std::filesystem::path> target_explanations;
};

struct RunComparison {
  std::string base_run;
  std::string target_run;
  ComparisonTable table;
  std::vector<CategoryTransition> transitions;
};

/// Both runs must be complete and cover the same image ids.
RunComparison compare_runs(const std::filesystem::path& runs_root, const std::string& base, const std::string& target);
nlohmann::json to_json(const RunComparison& c);

struct VerifyReport {
  std::vector<std::string> problems;
  bool ok() const { return problems.empty(); }
};

/// Checks stage ordering, artifact presence for every set flag, and the parent chain.
VerifyReport verify_run(const std::filesystem::path& runs_root, const std::string& run_id);

enum class HypothesisTag { dataset_bias, label_error, occlusion, model_architecture, other };

std::string to_string(HypothesisTag t);
HypothesisTag parse_hypothesis_tag(std::string_view name);

struct Annotation {
  std::string run_id;
  std::string image_id;
  std::optional<int> box_index;
  HypothesisTag tag{HypothesisTag::other};
  std::string note;
  std::string author;
  std::string timestamp;
};

nlohmann::json to_json(const Annotation& a);
Annotation annotation_from_json(const nlohmann::json& j);

/// Appends to the run's annotations.jsonl after checking the run and image exist.
Annotation append_annotation(const std::filesystem::path& runs_root, Annotation annotation);
std::vector<Annotation> load_annotations(const std::filesystem::path& runs_root, const std::string& run_id);

std::vector<RemediationPlan> load_remediations(const std::filesystem::path& runs_root, const std::string& run_id);

std::string utc_timestamp();

}  // namespace detlens
