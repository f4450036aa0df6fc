#include "detlens/dataset.hpp"
#include "detlens/detector.hpp"
#include "detlens/evaluation.hpp"
#include "detlens/fixture.hpp"
#include "detlens/pipeline.hpp"
#include "detlens/saliency.hpp"
#include "detlens/service.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <thread>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace detlens;

namespace {

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

fs::path runs_root_or_env(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("DETLENS_RUNS_ROOT"); env && *env) return env;
  return "runs";
}

// Accepts a run id under `root` or a path to a run directory.
std::pair<fs::path, std::string> locate_run(const fs::path& root, const std::string& arg) {
  const fs::path p(arg);
  if (fs::exists(p / "run.json")) {
    const fs::path dir = fs::absolute(p).lexically_normal();
    const fs::path clean = dir.filename().empty() ? dir.parent_path() : dir;
    return {clean.parent_path(), clean.filename().string()};
  }
  return {root, arg};
}

struct MaskOptions {
  int grid{16};
  double keep{0.5};
  int masks{5000};
  std::optional<std::uint64_t> seed;
};

void add_mask_options(CLI::App* cmd, MaskOptions& o) {
  cmd->add_option("--grid", o.grid, "Mask grid size s")->check(CLI::PositiveNumber);
  cmd->add_option("--prob,--keep", o.keep, "Cell keep probability p")->check(CLI::Range(0.0, 1.0));
  cmd->add_option("--masks", o.masks, "Number of masks N")->check(CLI::PositiveNumber);
  cmd->add_option("--mask-seed", o.seed, "Mask seed (defaults to --seed)");
}

MaskSpec to_spec(const MaskOptions& o, std::uint64_t seed) { return {o.grid, o.keep, o.masks, o.seed.value_or(seed)}; }

void print_run(const RunRecord& r) {
  std::cout << "run " << r.run_id << ": " << to_string(r.status);
  if (r.failed_stage) std::cout << " at stage " << *r.failed_stage << " (" << r.error.value_or("") << ")";
  std::cout << '\n';
}

int serve(const fs::path& root, const std::string& bind, const std::string& static_dir) {
  ServiceOptions options;
  options.runs_root = root;
  if (!static_dir.empty()) options.static_dir = static_dir;
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  Service service(options);
  const auto [host, port] = parse_bind_address(bind);
  const int bound = service.bind(host, port);
  std::cout << "serving " << root.string() << " on http://" << host << ':' << bound << std::endl;
  std::thread server([&] { service.run(); });
  int sig = 0;
  sigwait(&signals, &sig);
  service.stop();
  server.join();
  service.wait_for_remediations();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"detlens: debug person detectors against their ground truth"};
  app.require_subcommand(1);
  std::signal(SIGPIPE, SIG_IGN);

  std::string odgt, images, manifest, out, detector_cfg, predictions, runs, run_id, base, target, image_id;
  std::uint64_t seed = 0;

  auto* imp = app.add_subcommand("import-odgt", "Convert CrowdHuman ODGT annotations into a manifest");
  imp->add_option("odgt", odgt, "ODGT file")->required();
  imp->add_option("--images", images, "Image directory")->required();
  imp->add_option("-o,--out", out, "Output manifest")->required();

  auto* smp = app.add_subcommand("sample", "Draw the review sample from a manifest");
  smp->add_option("manifest", manifest)->required();
  smp->add_option("--seed", seed);
  smp->add_option("-o,--out", out)->required();

  auto* aud = app.add_subcommand("audit", "Report ground-truth boxes that leave the image");
  aud->add_option("manifest", manifest)->required();
  aud->add_option("--json", out, "Write the report as JSON");

  auto* rel = app.add_subcommand("relabel", "Clamp ground-truth boxes into their images");
  rel->add_option("manifest", manifest)->required();
  rel->add_option("-o,--out", out)->required();

  Padding padding;
  float fill = kDefaultPadFill;
  auto add_padding = [&](CLI::App* cmd) {
    cmd->add_option("--top", padding.top)->check(CLI::NonNegativeNumber);
    cmd->add_option("--left", padding.left)->check(CLI::NonNegativeNumber);
    cmd->add_option("--right", padding.right)->check(CLI::NonNegativeNumber);
    cmd->add_option("--bottom", padding.bottom)->check(CLI::NonNegativeNumber);
    cmd->add_option("--fill", fill, "Border intensity");
  };
  auto* pad = app.add_subcommand("pad", "Pad images and translate their boxes");
  pad->add_option("manifest", manifest)->required();
  pad->add_option("-o,--out", out)->required();
  add_padding(pad);

  auto* pre = app.add_subcommand("predict", "Run a detector over a manifest");
  pre->add_option("manifest", manifest)->required();
  pre->add_option("--detector", detector_cfg, "Detector config JSON")->required();
  pre->add_option("-o,--out", out)->required();

  auto* cat = app.add_subcommand("categorize", "Assign each image a failure category");
  cat->add_option("manifest", manifest)->required();
  cat->add_option("predictions", predictions)->required();
  cat->add_option("-o,--out", out)->required();

  std::string cmp_json;
  auto* cmp = app.add_subcommand("compare", "Compare two runs or two categories.json files");
  cmp->add_option("base", base)->required();
  cmp->add_option("target", target)->required();
  cmp->add_option("--runs", runs, "Runs directory");
  cmp->add_option("--json", cmp_json, "Also write the comparison as JSON");

  MaskOptions mask;
  std::string target_spec = "0", fill_mode = "black";
  bool parallel = false;
  auto* exp = app.add_subcommand("explain", "Saliency map for one box of one image");
  exp->add_option("manifest", manifest)->required();
  exp->add_option("predictions", predictions)->required();
  exp->add_option("--image", image_id, "Image id")->required();
  exp->add_option("--box", target_spec, "Prediction index, or gt:<index> for a ground-truth box");
  exp->add_option("--detector", detector_cfg)->required();
  exp->add_option("--seed", seed);
  exp->add_option("--fill", fill_mode)->check(CLI::IsMember({"black", "mean"}));
  exp->add_flag("--parallel", parallel, "Query the detector concurrently");
  exp->add_option("-o,--out", out, "Output directory")->required();
  add_mask_options(exp, mask);

  int explain_k = 5;
  bool no_sample = false;
  auto* run = app.add_subcommand("run", "Full debugging run: sample, predict, categorize, audit, explain");
  run->add_option("--manifest", manifest)->required();
  run->add_option("--detector", detector_cfg)->required();
  run->add_option("--runs", runs);
  run->add_option("--seed", seed);
  run->add_option("--run-id", run_id, "Resume or name the run");
  run->add_option("--explain-k", explain_k, "Images explained per failure category")->check(CLI::NonNegativeNumber);
  run->add_flag("--no-sample", no_sample, "Use every image of the manifest");
  run->add_flag("--parallel", parallel);
  add_mask_options(run, mask);

  std::string action = "relabel";
  auto* rem = app.add_subcommand("remediate", "Apply a remediation and rerun as a child run");
  rem->add_option("run", run_id)->required();
  rem->add_option("--runs", runs);
  rem->add_option("--action", action)->check(CLI::IsMember({"relabel", "pad"}));
  add_padding(rem);

  auto* ver = app.add_subcommand("verify", "Check a run directory for consistency");
  ver->add_option("run", run_id, "Run id or run directory")->required();
  ver->add_option("--runs", runs);

  std::string bind = "127.0.0.1:7878", static_dir;
  auto* srv = app.add_subcommand("serve", "Serve runs over HTTP for review");
  srv->add_option("--runs", runs);
  srv->add_option("--bind", bind);
  srv->add_option("--static", static_dir, "UI bundle directory");

  std::size_t count = 50;
  auto* syn = app.add_subcommand("synth", "Write the synthetic fixture dataset");
  syn->add_option("dir", out)->required();
  syn->add_option("--count", count);
  syn->add_option("--seed", seed);

  double score_threshold = 0.0, visibility = 0.5;
  auto* mock = app.add_subcommand("mock-backend", "Simulated detector speaking the line protocol on stdio");
  mock->add_option("--reference", manifest, "Reference manifest")->required();
  mock->add_option("--visibility", visibility);
  mock->add_option("--score-threshold", score_threshold);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*imp) {
      const auto result = import_odgt(odgt, images);
      save_manifest(result.manifest, out);
      std::cout << result.manifest.records.size() << " records written, " << result.skipped_missing_images
                << " skipped for missing images\n";
    } else if (*smp) {
      const auto s = sample(load_manifest(manifest), seed);
      save_manifest(s, out);
      std::cout << s.records.size() << " records sampled\n";
    } else if (*aud) {
      const auto report = audit_out_of_bounds(load_manifest(manifest));
      for (const auto& e : report.entries)
        std::cout << e.record_id << " box " << e.box_index << ": " << to_string(e.violation) << " [" << e.box.x1 << ", "
                  << e.box.y1 << ", " << e.box.x2 << ", " << e.box.y2 << "]\n";
      std::cout << report.boxes_outside << " of " << report.boxes_audited << " boxes outside their image\n";
      if (!out.empty()) write_json(out, to_json(report));
    } else if (*rel) {
      const auto result = relabel(load_manifest(manifest));
      save_manifest(result.manifest, out);
      std::cout << result.summary.boxes_changed << " boxes clamped, " << result.summary.boxes_dropped << " dropped\n";
    } else if (*pad) {
      const auto padded = pad_manifest(load_manifest(manifest), padding, fill);
      save_manifest(padded, out);
      std::cout << padded.records.size() << " images padded\n";
    } else if (*pre) {
      const auto m = load_manifest(manifest);
      auto detector = make_detector(load_detector_config(detector_cfg), &m);
      save_predictions(out, m, predict(*detector, m));
    } else if (*cat) {
      const auto m = load_manifest(manifest);
      std::map<std::string, std::vector<Detection>> preds;
      for (auto& [id, dets] : load_predictions(predictions)) preds[id] = std::move(dets);
      std::vector<ImageCategory> images_out;
      for (const auto& r : m.records) {
        auto it = preds.find(r.id);
        if (it == preds.end()) throw Error("no predictions for image '" + r.id + "'");
        const auto gts = r.person_boxes();
        images_out.push_back(categorize_image(r.id, it->second, gts));
      }
      write_json(out, categories_to_json(images_out));
      const auto stats = summarize(images_out);
      for (Category c : kAllCategories) std::cout << to_string(c) << ": " << stats.count(c) << '\n';
    } else if (*cmp) {
      json j;
      if (fs::is_regular_file(base) && fs::is_regular_file(target)) {
        const auto table = compare_stats(summarize(categories_from_json(read_json(base))),
                                         summarize(categories_from_json(read_json(target))));
        std::cout << format_table(table, "base", "target");
        j = to_json(table);
      } else {
        const fs::path root = runs_root_or_env(runs);
        const auto c = compare_runs(root, base, target);
        std::cout << format_table(c.table, base, target);
        for (const auto& t : c.transitions)
          std::cout << t.image_id << ": " << to_string(t.from) << " -> " << to_string(t.to) << '\n';
        j = to_json(c);
      }
      std::cout << j.dump(2) << '\n';
      if (!cmp_json.empty()) write_json(cmp_json, j);
    } else if (*exp) {
      const auto m = load_manifest(manifest);
      const ImageRecord& r = m.at(image_id);
      const auto config = load_detector_config(detector_cfg);
      auto detector = make_detector(config, &m);
      const Image image = read_image(r.path);
      Detection tgt;
      std::string label;
      if (target_spec.rfind("gt:", 0) == 0) {
        const auto i = std::stoul(target_spec.substr(3));
        if (i >= r.gt_boxes.size()) throw std::invalid_argument("image has no ground-truth box " + target_spec.substr(3));
        tgt = ground_truth_target(r.gt_boxes[i].box);
        label = "gt_" + std::to_string(i);
      } else {
        const auto i = std::stoul(target_spec);
        std::vector<Detection> dets;
        for (auto& [id, d] : load_predictions(predictions))
          if (id == r.id) dets = std::move(d);
        if (i >= dets.size()) throw std::invalid_argument("image has no prediction " + target_spec);
        tgt = dets[i];
        label = "pred_" + std::to_string(i);
      }
      const auto c = clamp_box(tgt.box, double(r.width), double(r.height));
      if (c.degenerate) throw std::invalid_argument("target box lies outside the image");
      tgt.box = c.box;
      ExplainOptions options;
      options.parallel = parallel;
      options.fill = fill_mode == "mean" ? FillMode::mean : FillMode::black;
      auto map = explain(image, tgt, *detector, to_spec(mask, seed), r.id, options);
      map.label = label;
      const auto files = save_explanation(out, label, image, map);
      std::cout << files.overlay.string() << '\n';
      if (map.skip_flagged()) std::cerr << "warning: " << map.skipped_samples << " perturbation samples failed\n";
    } else if (*run) {
      RunConfig config;
      config.manifest = fs::absolute(manifest);
      config.detector = load_detector_config(detector_cfg);
      config.seed = seed;
      config.sample = !no_sample;
      config.mask_spec = to_spec(mask, seed);
      config.explain_k = explain_k;
      config.parallel_explain = parallel;
      if (!run_id.empty()) config.run_id = run_id;
      const auto record = run_debug(config, {runs_root_or_env(runs), {}});
      print_run(record);
      return record.status == RunStatus::completed ? 0 : 1;
    } else if (*rem) {
      const auto [root, id] = locate_run(runs_root_or_env(runs), run_id);
      RemediationPlan plan;
      plan.run_id = id;
      plan.action = parse_remediation_action(action);
      plan.padding = padding;
      plan.pad_fill = fill;
      const auto child = apply_remediation(plan, {root, {}});
      print_run(child);
      if (child.status != RunStatus::completed) return 1;
      std::cout << format_table(compare_runs(root, id, child.run_id).table, id, child.run_id);
    } else if (*ver) {
      const auto [root, id] = locate_run(runs_root_or_env(runs), run_id);
      const auto report = verify_run(root, id);
      for (const auto& p : report.problems) std::cout << "problem: " << p << '\n';
      std::cout << id << (report.ok() ? ": ok\n" : ": FAILED\n");
      return report.ok() ? 0 : 1;
    } else if (*srv) {
      return serve(runs_root_or_env(runs), bind, static_dir);
    } else if (*syn) {
      const auto f = write_synthetic_fixture(out, count, *syn->get_option("--seed") ? seed : 7);
      std::cout << f.manifest.string() << '\n' << f.detector_config.string() << '\n';
    } else if (*mock) {
      MockDetectorSpec spec{load_manifest(manifest), visibility};
      MockDetector detector(std::move(spec), score_threshold);
      std::ios::sync_with_stdio(false);
      serve_line_protocol(detector, std::cin, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
