#include "detlens/pipeline.hpp"

#include "detlens/errors.hpp"
#include "detlens/random.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <random>
#include <set>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace detlens {

std::string to_string(Stage s) {
  switch (s) {
    case Stage::sample: return "sample";
    case Stage::predict: return "predict";
    case Stage::categorize: return "categorize";
    case Stage::audit: return "audit";
    case Stage::explain: return "explain";
  }
  return "unknown";
}

Stage parse_stage(std::string_view name) {
  for (Stage s : kStages)
    if (to_string(s) == name) return s;
  throw std::invalid_argument("unknown stage '" + std::string(name) + "'");
}

std::string to_string(RunStatus s) {
  switch (s) {
    case RunStatus::running: return "running";
    case RunStatus::completed: return "completed";
    case RunStatus::failed: return "failed";
  }
  return "unknown";
}

namespace {

RunStatus parse_status(const std::string& s) {
  if (s == "running") return RunStatus::running;
  if (s == "completed") return RunStatus::completed;
  if (s == "failed") return RunStatus::failed;
  throw ParseError("unknown run status '" + s + "'");
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

// Readers never observe a half-written artifact: write then rename.
void write_atomic(const fs::path& path, const std::string& content) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << content;
    if (!out) throw Error("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

void append_line(const fs::path& path, const std::string& line) {
  const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd < 0) throw Error("cannot open " + path.string() + " for append");
  const std::string data = line + "\n";
  std::size_t off = 0;
  while (off < data.size()) {
    const ssize_t n = ::write(fd, data.data() + off, data.size() - off);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) {
      ::close(fd);
      throw Error("short append to " + path.string());
    }
    off += static_cast<std::size_t>(n);
  }
  ::close(fd);
}

// One writer per run directory.
class RunLock {
 public:
  explicit RunLock(const fs::path& dir) {
    fd_ = ::open((dir / ".lock").c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (fd_ < 0) throw Error("cannot create lock file in " + dir.string());
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      throw ConflictError("run " + dir.filename().string() + " is already being written");
    }
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;
  ~RunLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }

 private:
  int fd_{-1};
};

std::string safe_name(const std::string& id) {
  std::string out = id;
  for (char& c : out)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.')) c = '_';
  if (out.empty() || out == "." || out == "..") out = "_" + out;
  return out;
}

std::mutex& log_mutex(const fs::path& path) {
  static std::mutex registry_mu;
  static std::map<std::string, std::unique_ptr<std::mutex>> registry;
  std::lock_guard lock(registry_mu);
  auto& m = registry[fs::absolute(path).lexically_normal().string()];
  if (!m) m = std::make_unique<std::mutex>();
  return *m;
}

}  // namespace

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::string new_run_id() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y%m%dT%H%M%S") << '-';
  std::random_device rd;
  os << std::hex << std::setw(6) << std::setfill('0') << (rd() & 0xFFFFFFu);
  return os.str();
}

fs::path run_dir(const fs::path& runs_root, const std::string& run_id) {
  if (run_id.empty() || run_id.find('/') != std::string::npos || run_id == "." || run_id == "..")
    throw std::invalid_argument("invalid run id '" + run_id + "'");
  return runs_root / run_id;
}

// ---------------------------------------------------------------- serialization

json to_json(const RunConfig& c) {
  json j = {{"manifest", c.manifest.string()},
            {"detector", to_json(c.detector)},
            {"seed", c.seed},
            {"sample", c.sample},
            {"mask_spec", to_json(c.mask_spec)},
            {"explain_k", c.explain_k},
            {"parallel_explain", c.parallel_explain}};
  return j;
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  c.manifest = j.at("manifest").get<std::string>();
  c.detector = detector_config_from_json(j.at("detector"));
  c.seed = j.value("seed", std::uint64_t{0});
  c.sample = j.value("sample", true);
  c.mask_spec = mask_spec_from_json(j.value("mask_spec", json::object()));
  c.explain_k = j.value("explain_k", 5);
  c.parallel_explain = j.value("parallel_explain", false);
  return c;
}

fs::path RunRecord::artifact(Stage s) {
  switch (s) {
    case Stage::sample: return "manifest.jsonl";
    case Stage::predict: return "predictions.jsonl";
    case Stage::categorize: return "categories.json";
    case Stage::audit: return "audit.json";
    case Stage::explain: return "explanations";
  }
  return {};
}

json to_json(const RunRecord& r) {
  json stages = json::object(), artifacts = json::object();
  for (Stage s : kStages) {
    stages[to_string(s)] = r.done(s);
    if (r.done(s) && s != Stage::explain) artifacts[to_string(s)] = RunRecord::artifact(s).string();
  }
  json expl = json::array();
  for (const auto& e : r.explanations) {
    expl.push_back({{"image_id", e.image_id},
                    {"target", e.target},
                    {"category", e.category},
                    {"overlay", e.overlay.string()},
                    {"raw", e.raw.string()},
                    {"sidecar", e.sidecar.string()}});
  }
  if (r.done(Stage::explain)) artifacts["explanations"] = std::move(expl);
  json j = {{"schema_version", 1},
            {"run_id", r.run_id},
            {"created_at", r.created_at},
            {"status", to_string(r.status)},
            {"config", to_json(r.config)},
            {"stages", std::move(stages)},
            {"artifacts", std::move(artifacts)},
            {"parent_run_id", r.parent_run_id ? json(*r.parent_run_id) : json(nullptr)}};
  if (r.failed_stage) j["failed_stage"] = *r.failed_stage;
  if (r.error) j["error"] = *r.error;
  if (r.remediation) j["remediation"] = *r.remediation;
  return j;
}

RunRecord run_record_from_json(const json& j) {
  RunRecord r;
  try {
    if (j.value("schema_version", 0) != 1) throw ParseError("run.json: unsupported schema_version");
    r.run_id = j.at("run_id").get<std::string>();
    r.created_at = j.value("created_at", std::string());
    r.status = parse_status(j.at("status").get<std::string>());
    r.config = run_config_from_json(j.at("config"));
    for (Stage s : kStages) r.stages[static_cast<std::size_t>(s)] = j.at("stages").value(to_string(s), false);
    if (j.contains("parent_run_id") && j["parent_run_id"].is_string()) r.parent_run_id = j["parent_run_id"].get<std::string>();
    if (j.contains("failed_stage")) r.failed_stage = j["failed_stage"].get<std::string>();
    if (j.contains("error")) r.error = j["error"].get<std::string>();
    if (j.contains("remediation")) r.remediation = j["remediation"];
    const json& artifacts = j.value("artifacts", json::object());
    if (artifacts.contains("explanations")) {
      for (const auto& e : artifacts["explanations"]) {
        r.explanations.push_back({e.at("image_id").get<std::string>(), e.at("target").get<std::string>(),
                                  e.value("category", std::string()), e.at("overlay").get<std::string>(),
                                  e.at("raw").get<std::string>(), e.at("sidecar").get<std::string>()});
      }
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("run.json: ") + e.what());
  }
  r.config.run_id = r.run_id;
  r.config.parent_run_id = r.parent_run_id;
  return r;
}

RunRecord load_run(const fs::path& runs_root, const std::string& run_id) {
  const fs::path path = run_dir(runs_root, run_id) / "run.json";
  if (!fs::exists(path)) throw NotFoundError("no run '" + run_id + "'");
  return run_record_from_json(read_json(path));
}

std::vector<RunRecord> list_runs(const fs::path& runs_root) {
  std::vector<RunRecord> out;
  if (!fs::exists(runs_root)) return out;
  for (const auto& entry : fs::directory_iterator(runs_root)) {
    if (!entry.is_directory() || !fs::exists(entry.path() / "run.json")) continue;
    try {
      out.push_back(run_record_from_json(read_json(entry.path() / "run.json")));
    } catch (const Error&) {
      // Unreadable run directories are reported by verify, not listed.
    }
  }
  std::sort(out.begin(), out.end(), [](const RunRecord& a, const RunRecord& b) { return a.run_id < b.run_id; });
  return out;
}

// ---------------------------------------------------------------- run_debug

std::vector<const ImageCategory*> select_for_explanation(std::span<const ImageCategory> images, int k) {
  std::vector<const ImageCategory*> out;
  for (Category c : {Category::UnderDetection, Category::OverDetection, Category::Mislocalization}) {
    std::vector<const ImageCategory*> bucket;
    for (const auto& img : images)
      if (img.category == c) bucket.push_back(&img);
    std::sort(bucket.begin(), bucket.end(), [](const ImageCategory* a, const ImageCategory* b) {
      const auto err = [](const ImageCategory* x) {
        return x->num_preds > x->num_gts ? x->num_preds - x->num_gts : x->num_gts - x->num_preds;
      };
      if (err(a) != err(b)) return err(a) > err(b);
      if (a->matching.mean_iou() != b->matching.mean_iou()) return a->matching.mean_iou() < b->matching.mean_iou();
      return a->id < b->id;
    });
    if (bucket.size() > static_cast<std::size_t>(std::max(0, k))) bucket.resize(static_cast<std::size_t>(std::max(0, k)));
    out.insert(out.end(), bucket.begin(), bucket.end());
  }
  return out;
}

namespace {

void save_record(const fs::path& dir, const RunRecord& record) { write_atomic(dir / "run.json", to_json(record).dump(2) + "\n"); }

std::unique_ptr<Detector> default_factory(const DetectorConfig& config, const DatasetManifest& manifest) {
  return make_detector(config, &manifest);
}

std::map<std::string, std::vector<Detection>> predictions_by_id(const fs::path& path) {
  std::map<std::string, std::vector<Detection>> out;
  for (auto& [id, dets] : load_predictions(path)) out[id] = std::move(dets);
  return out;
}

struct Target {
  std::string label;
  Detection detection;
};

std::vector<Target> explanation_targets(const ImageRecord& record, const std::vector<Detection>& preds) {
  std::vector<Target> out;
  const double w = record.width, h = record.height;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto c = clamp_box(preds[i].box, w, h);
    if (c.degenerate) continue;
    Detection d = preds[i];
    d.box = c.box;
    out.push_back({"pred_" + std::to_string(i), std::move(d)});
  }
  for (std::size_t i = 0; i < record.gt_boxes.size(); ++i) {
    if (record.gt_boxes[i].tag == BoxTag::ignore) continue;
    const auto c = clamp_box(record.gt_boxes[i].box, w, h);
    if (c.degenerate) continue;
    out.push_back({"gt_" + std::to_string(i), ground_truth_target(c.box)});
  }
  return out;
}

}  // namespace

RunRecord run_debug(const RunConfig& config, const PipelineContext& context) {
  const std::string id = config.run_id.value_or(new_run_id());
  const fs::path dir = run_dir(context.runs_root, id);
  fs::create_directories(dir);
  RunLock lock(dir);

  RunRecord record;
  if (fs::exists(dir / "run.json")) {
    record = run_record_from_json(read_json(dir / "run.json"));
  } else {
    record.run_id = id;
    record.created_at = utc_timestamp();
    record.config = config;
    record.config.run_id = id;
    record.parent_run_id = config.parent_run_id;
  }
  record.status = RunStatus::running;
  record.failed_stage.reset();
  record.error.reset();
  save_record(dir, record);

  const RunConfig& cfg = record.config;
  const DetectorFactory factory = context.detector_factory ? context.detector_factory : DetectorFactory(default_factory);
  std::optional<DatasetManifest> manifest;
  std::unique_ptr<Detector> detector;
  auto run_manifest = [&]() -> const DatasetManifest& {
    if (!manifest) manifest = load_manifest(dir / RunRecord::artifact(Stage::sample));
    return *manifest;
  };
  auto get_detector = [&]() -> Detector& {
    if (!detector) detector = factory(cfg.detector, run_manifest());
    return *detector;
  };

  Stage current = Stage::sample;
  try {
    current = Stage::sample;
    if (!record.done(Stage::sample)) {
      const DatasetManifest source = load_manifest(cfg.manifest);
      const DatasetManifest chosen = cfg.sample ? sample(source, cfg.seed) : source;
      std::ostringstream os;
      for (const auto& r : chosen.records) os << record_to_json(r).dump() << '\n';
      write_atomic(dir / RunRecord::artifact(Stage::sample), os.str());
      record.stages[static_cast<std::size_t>(Stage::sample)] = true;
      save_record(dir, record);
    }

    current = Stage::predict;
    if (!record.done(Stage::predict)) {
      const auto& m = run_manifest();
      const auto preds = predict(get_detector(), m);
      const fs::path tmp = dir / "predictions.jsonl.partial";
      save_predictions(tmp, m, preds);
      fs::rename(tmp, dir / RunRecord::artifact(Stage::predict));
      record.stages[static_cast<std::size_t>(Stage::predict)] = true;
      save_record(dir, record);
    }

    current = Stage::categorize;
    std::vector<ImageCategory> categories;
    if (!record.done(Stage::categorize)) {
      const auto& m = run_manifest();
      const auto preds = predictions_by_id(dir / RunRecord::artifact(Stage::predict));
      for (const auto& r : m.records) {
        auto it = preds.find(r.id);
        if (it == preds.end()) throw Error("predictions lack image '" + r.id + "'");
        const auto gts = r.person_boxes();
        categories.push_back(categorize_image(r.id, it->second, gts));
      }
      write_atomic(dir / RunRecord::artifact(Stage::categorize), categories_to_json(categories).dump(2) + "\n");
      record.stages[static_cast<std::size_t>(Stage::categorize)] = true;
      save_record(dir, record);
    } else {
      categories = categories_from_json(read_json(dir / RunRecord::artifact(Stage::categorize)));
    }

    current = Stage::audit;
    if (!record.done(Stage::audit)) {
      write_atomic(dir / RunRecord::artifact(Stage::audit), to_json(audit_out_of_bounds(run_manifest())).dump(2) + "\n");
      record.stages[static_cast<std::size_t>(Stage::audit)] = true;
      save_record(dir, record);
    }

    current = Stage::explain;
    if (!record.done(Stage::explain)) {
      const auto& m = run_manifest();
      const auto preds = predictions_by_id(dir / RunRecord::artifact(Stage::predict));
      const fs::path partial = dir / "explanations.partial";
      fs::remove_all(partial);
      fs::create_directories(partial);
      std::vector<ExplanationEntry> entries;
      ExplainOptions options;
      options.parallel = cfg.parallel_explain;
      for (const ImageCategory* img : select_for_explanation(categories, cfg.explain_k)) {
        const ImageRecord& r = m.at(img->id);
        const auto targets = explanation_targets(r, preds.at(r.id));
        if (targets.empty()) continue;
        std::vector<Detection> dets;
        for (const auto& t : targets) dets.push_back(t.detection);
        const Image image = read_image(r.path);
        auto maps = explain(image, dets, get_detector(), cfg.mask_spec, r.id, options);
        const std::string sub = safe_name(r.id);
        for (std::size_t t = 0; t < targets.size(); ++t) {
          maps[t].label = targets[t].label;
          save_explanation(partial / sub, targets[t].label, image, maps[t]);
          const fs::path rel = fs::path("explanations") / sub;
          entries.push_back({r.id, targets[t].label, to_string(img->category), rel / (targets[t].label + ".png"),
                             rel / (targets[t].label + ".f32"), rel / (targets[t].label + ".json")});
        }
      }
      fs::remove_all(dir / "explanations");
      fs::rename(partial, dir / "explanations");
      record.explanations = std::move(entries);
      record.stages[static_cast<std::size_t>(Stage::explain)] = true;
      save_record(dir, record);
    }
    record.status = RunStatus::completed;
  } catch (const std::exception& e) {
    record.status = RunStatus::failed;
    record.failed_stage = to_string(current);
    record.error = e.what();
  }
  save_record(dir, record);
  return record;
}

// ---------------------------------------------------------------- remediation

std::string to_string(RemediationAction a) { return a == RemediationAction::relabel ? "relabel" : "pad"; }

RemediationAction parse_remediation_action(std::string_view name) {
  if (name == "relabel") return RemediationAction::relabel;
  if (name == "pad") return RemediationAction::pad;
  throw std::invalid_argument("unknown remediation action '" + std::string(name) + "'");
}

json to_json(const RemediationPlan& p) {
  json params = json::object();
  if (p.action == RemediationAction::pad) {
    params = {{"top", p.padding.top},
              {"left", p.padding.left},
              {"right", p.padding.right},
              {"bottom", p.padding.bottom},
              {"fill", p.pad_fill}};
  }
  json j = {{"schema_version", 1}, {"run_id", p.run_id}, {"action", to_string(p.action)}, {"params", std::move(params)},
            {"status", p.status}};
  j["child_run_id"] = p.child_run_id ? json(*p.child_run_id) : json(nullptr);
  return j;
}

RemediationPlan remediation_plan_from_json(const json& j) {
  RemediationPlan p;
  p.run_id = j.value("run_id", std::string());
  p.action = parse_remediation_action(j.at("action").get<std::string>());
  const json params = j.value("params", json::object());
  if (p.action == RemediationAction::pad) {
    p.padding = {params.value("top", 0), params.value("left", 0), params.value("right", 0), params.value("bottom", 0)};
    if (p.padding.top < 0 || p.padding.left < 0 || p.padding.right < 0 || p.padding.bottom < 0)
      throw std::invalid_argument("padding must be non-negative");
    p.pad_fill = params.value("fill", kDefaultPadFill);
  }
  p.status = j.value("status", std::string("proposed"));
  if (j.contains("child_run_id") && j["child_run_id"].is_string()) p.child_run_id = j["child_run_id"].get<std::string>();
  return p;
}

RunRecord apply_remediation(const RemediationPlan& plan, const PipelineContext& context,
                            std::optional<std::string> child_run_id) {
  const RunRecord parent = load_run(context.runs_root, plan.run_id);
  if (parent.status != RunStatus::completed)
    throw ConflictError("run '" + plan.run_id + "' is not completed; remediation needs a completed run");
  const fs::path parent_dir = run_dir(context.runs_root, parent.run_id);
  const DatasetManifest base = load_manifest(parent_dir / RunRecord::artifact(Stage::sample));

  const std::string child_id = child_run_id.value_or(new_run_id());
  const fs::path child_dir = run_dir(context.runs_root, child_id);
  if (fs::exists(child_dir / "run.json")) throw ConflictError("run '" + child_id + "' already exists");
  fs::create_directories(child_dir);

  RunConfig cfg = parent.config;
  cfg.run_id = child_id;
  cfg.parent_run_id = parent.run_id;
  cfg.sample = false;

  DatasetManifest remediated;
  if (plan.action == RemediationAction::relabel) {
    remediated = relabel(base).manifest;
  } else {
    remediated = pad_manifest(base, plan.padding, plan.pad_fill);
    // A simulated detector must see the same padded pixels as the dataset.
    if (cfg.detector.kind == DetectorKind::mock && cfg.detector.mock_reference) {
      const DatasetManifest reference = load_manifest(*cfg.detector.mock_reference);
      DatasetManifest subset;
      subset.name = reference.name;
      for (const auto& r : base.records)
        if (const auto* ref = reference.find(r.id)) subset.records.push_back(*ref);
      const DatasetManifest padded_ref = pad_manifest(subset, plan.padding, plan.pad_fill);
      save_manifest(padded_ref, child_dir / "mock_reference.jsonl");
      cfg.detector.mock_reference = fs::absolute(child_dir / "mock_reference.jsonl");
    }
  }
  save_manifest(remediated, child_dir / "remediated_input.jsonl");
  cfg.manifest = fs::absolute(child_dir / "remediated_input.jsonl");

  RemediationPlan logged = plan;
  logged.child_run_id = child_id;
  logged.status = "proposed";
  const fs::path log = parent_dir / "remediations.jsonl";
  {
    std::lock_guard lock(log_mutex(log));
    append_line(log, to_json(logged).dump());
  }

  RunRecord seed_record;
  seed_record.run_id = child_id;
  seed_record.created_at = utc_timestamp();
  seed_record.config = cfg;
  seed_record.parent_run_id = parent.run_id;
  seed_record.remediation = to_json(logged);
  save_record(child_dir, seed_record);

  RunRecord child = run_debug(cfg, context);

  logged.status = child.status == RunStatus::completed ? "applied" : "failed";
  {
    std::lock_guard lock(log_mutex(log));
    append_line(log, to_json(logged).dump());
  }
  return child;
}

// ---------------------------------------------------------------- comparison

RunComparison compare_runs(const fs::path& runs_root, const std::string& base, const std::string& target) {
  const RunRecord a = load_run(runs_root, base);
  const RunRecord b = load_run(runs_root, target);
  for (const RunRecord* r : {&a, &b})
    if (!r->done(Stage::categorize)) throw ConflictError("run '" + r->run_id + "' has not been categorized");
  const auto ca = categories_from_json(read_json(run_dir(runs_root, base) / RunRecord::artifact(Stage::categorize)));
  const auto cb = categories_from_json(read_json(run_dir(runs_root, target) / RunRecord::artifact(Stage::categorize)));
  std::map<std::string, Category> by_id_b;
  for (const auto& c : cb) by_id_b[c.id] = c.category;
  std::set<std::string> ids_a;
  for (const auto& c : ca) ids_a.insert(c.id);
  std::set<std::string> ids_b;
  for (const auto& c : cb) ids_b.insert(c.id);
  if (ids_a != ids_b) throw std::invalid_argument("runs '" + base + "' and '" + target + "' cover different image sets");

  RunComparison out;
  out.base_run = base;
  out.target_run = target;
  out.table = compare_stats(summarize(ca), summarize(cb));
  auto paths_for = [&](const RunRecord& r, const std::string& image) {
    std::vector<fs::path> p;
    for (const auto& e : r.explanations)
      if (e.image_id == image) p.push_back(fs::path(r.run_id) / e.overlay);
    return p;
  };
  for (const auto& c : ca) {
    const Category to = by_id_b.at(c.id);
    if (to == c.category) continue;
    out.transitions.push_back({c.id, c.category, to, paths_for(a, c.id), paths_for(b, c.id)});
  }
  return out;
}

json to_json(const RunComparison& c) {
  json transitions = json::array();
  for (const auto& t : c.transitions) {
    json be = json::array(), te = json::array();
    for (const auto& p : t.base_explanations) be.push_back(p.string());
    for (const auto& p : t.target_explanations) te.push_back(p.string());
    transitions.push_back({{"id", t.image_id},
                           {"from", to_string(t.from)},
                           {"to", to_string(t.to)},
                           {"base_explanations", std::move(be)},
                           {"target_explanations", std::move(te)}});
  }
  json j = to_json(c.table);
  j["base_run"] = c.base_run;
  j["target_run"] = c.target_run;
  j["transitions"] = std::move(transitions);
  return j;
}

// ---------------------------------------------------------------- verify

VerifyReport verify_run(const fs::path& runs_root, const std::string& run_id) {
  VerifyReport report;
  RunRecord r;
  try {
    r = load_run(runs_root, run_id);
  } catch (const std::exception& e) {
    report.problems.push_back(e.what());
    return report;
  }
  const fs::path dir = run_dir(runs_root, run_id);
  if (r.run_id != run_id) report.problems.push_back("run.json names run '" + r.run_id + "'");

  bool previous = true;
  for (Stage s : kStages) {
    const bool flag = r.done(s);
    if (flag && !previous) report.problems.push_back("stage '" + to_string(s) + "' completed before an earlier stage");
    previous = flag;
    const bool exists = fs::exists(dir / RunRecord::artifact(s));
    if (flag && !exists) report.problems.push_back("stage '" + to_string(s) + "' is flagged but its artifact is missing");
    if (!flag && exists) report.problems.push_back("artifact of unflagged stage '" + to_string(s) + "' is present");
  }
  for (Stage s : {Stage::categorize, Stage::audit}) {
    if (!r.done(s)) continue;
    try {
      if (read_json(dir / RunRecord::artifact(s)).value("schema_version", 0) != 1)
        report.problems.push_back(RunRecord::artifact(s).string() + " lacks schema_version 1");
    } catch (const std::exception& e) {
      report.problems.push_back(e.what());
    }
  }
  for (const auto& e : r.explanations)
    for (const auto& p : {e.overlay, e.raw, e.sidecar})
      if (!fs::exists(dir / p)) report.problems.push_back("missing explanation artifact " + p.string());
  if (r.status == RunStatus::completed && !r.done(Stage::explain))
    report.problems.push_back("run is marked completed but not every stage is done");

  std::set<std::string> seen{r.run_id};
  std::optional<std::string> parent = r.parent_run_id;
  while (parent) {
    if (!seen.insert(*parent).second) {
      report.problems.push_back("parent chain has a cycle at '" + *parent + "'");
      break;
    }
    try {
      parent = load_run(runs_root, *parent).parent_run_id;
    } catch (const std::exception& e) {
      report.problems.push_back("parent run '" + *parent + "' unreadable: " + e.what());
      break;
    }
  }
  return report;
}

// ---------------------------------------------------------------- annotations

std::string to_string(HypothesisTag t) {
  switch (t) {
    case HypothesisTag::dataset_bias: return "dataset-bias";
    case HypothesisTag::label_error: return "label-error";
    case HypothesisTag::occlusion: return "occlusion";
    case HypothesisTag::model_architecture: return "model-architecture";
    case HypothesisTag::other: return "other";
  }
  return "other";
}

HypothesisTag parse_hypothesis_tag(std::string_view name) {
  for (HypothesisTag t : {HypothesisTag::dataset_bias, HypothesisTag::label_error, HypothesisTag::occlusion,
                          HypothesisTag::model_architecture, HypothesisTag::other})
    if (to_string(t) == name) return t;
  throw std::invalid_argument("unknown hypothesis tag '" + std::string(name) + "'");
}

json to_json(const Annotation& a) {
  return {{"schema_version", 1},
          {"run_id", a.run_id},
          {"image_id", a.image_id},
          {"box_index", a.box_index ? json(*a.box_index) : json(nullptr)},
          {"tag", to_string(a.tag)},
          {"note", a.note},
          {"author", a.author},
          {"timestamp", a.timestamp}};
}

Annotation annotation_from_json(const json& j) {
  Annotation a;
  a.run_id = j.value("run_id", std::string());
  a.image_id = j.at("image_id").get<std::string>();
  if (j.contains("box_index") && j["box_index"].is_number_integer()) a.box_index = j["box_index"].get<int>();
  a.tag = parse_hypothesis_tag(j.at("tag").get<std::string>());
  a.note = j.value("note", std::string());
  a.author = j.value("author", std::string());
  a.timestamp = j.value("timestamp", std::string());
  return a;
}

Annotation append_annotation(const fs::path& runs_root, Annotation a) {
  const RunRecord r = load_run(runs_root, a.run_id);
  const fs::path dir = run_dir(runs_root, a.run_id);
  if (!r.done(Stage::sample)) throw ConflictError("run '" + a.run_id + "' has no sampled images yet");
  const DatasetManifest m = load_manifest(dir / RunRecord::artifact(Stage::sample));
  const ImageRecord& img = m.at(a.image_id);
  if (a.box_index && (*a.box_index < 0 || static_cast<std::size_t>(*a.box_index) >= img.gt_boxes.size()))
    throw std::invalid_argument("box index out of range for image '" + a.image_id + "'");
  if (a.timestamp.empty()) a.timestamp = utc_timestamp();
  const fs::path log = dir / "annotations.jsonl";
  std::lock_guard lock(log_mutex(log));
  append_line(log, to_json(a).dump());
  return a;
}

namespace {

template <typename T, typename Parse>
std::vector<T> load_jsonl(const fs::path& path, Parse&& parse) {
  std::vector<T> out;
  if (!fs::exists(path)) return out;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(parse(json::parse(line)));
    } catch (const std::exception&) {
      // Tolerate a torn final line from an interrupted writer.
    }
  }
  return out;
}

}  // namespace

std::vector<Annotation> load_annotations(const fs::path& runs_root, const std::string& run_id) {
  load_run(runs_root, run_id);
  return load_jsonl<Annotation>(run_dir(runs_root, run_id) / "annotations.jsonl", annotation_from_json);
}

std::vector<RemediationPlan> load_remediations(const fs::path& runs_root, const std::string& run_id) {
  load_run(runs_root, run_id);
  return load_jsonl<RemediationPlan>(run_dir(runs_root, run_id) / "remediations.jsonl", remediation_plan_from_json);
}

}  // namespace detlens
