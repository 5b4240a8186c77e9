// kmorph command-line frontend: dataset generation, network training,
// evaluation, and sample rendering.

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "kmorph/config.hpp"
#include "kmorph/eval.hpp"
#include "kmorph/pipeline.hpp"

namespace fs = std::filesystem;
using namespace kmorph;

namespace {

std::string resolve_out(const std::string& path) {
  const char* root = std::getenv("KMORPH_OUT_ROOT");
  if (root && *root && fs::path(path).is_relative()) return (fs::path(root) / path).string();
  return path;
}

KeyValueConfig merge_config(const std::string& config_path,
                            const std::vector<std::pair<std::string, std::string>>& overrides) {
  KeyValueConfig cfg;
  if (!config_path.empty()) cfg = KeyValueConfig::load_file(config_path);
  for (const auto& [k, v] : overrides) cfg.set(k, v);
  return cfg;
}

int cmd_generate(const std::string& config_path, const std::string& task, long n, long seed,
                 std::string out, bool force) {
  std::vector<std::pair<std::string, std::string>> overrides;
  if (!task.empty()) overrides.emplace_back("task", task);
  if (n >= 0) overrides.emplace_back("n_data", std::to_string(n));
  if (seed >= 0) overrides.emplace_back("seed", std::to_string(seed));
  KeyValueConfig cfg = merge_config(config_path, overrides);
  PipelineConfig pc = pipeline_config_from(cfg);

  out = resolve_out(out);
  if (fs::exists(out) && !force) {
    std::cerr << "error: " << out << " exists (use --force to overwrite)\n";
    return 2;
  }
  RunManifest manifest("generate", cfg, pc.seed);
  GenerateStats stats;
  Dataset ds = generate_dataset(pc, &stats);
  if (auto dir = fs::path(out).parent_path(); !dir.empty()) fs::create_directories(dir);
  save_dataset(ds, out);
  manifest.add_artifact("dataset", out);
  if (stats.resampled) manifest.note("resampled_degenerate = " + std::to_string(stats.resampled));
  if (stats.empty_renders)
    manifest.note("empty_renders = " + std::to_string(stats.empty_renders));
  manifest.write(out + ".manifest");

  std::size_t train_n = 0;
  for (const auto& r : ds.records) train_n += r.split == kSplitTrain;
  std::cout << "wrote " << ds.records.size() << " records (" << train_n << " train, "
            << ds.records.size() - train_n << " test) to " << out << "\n";
  std::cout << "task " << ds.task_name << ", net " << ds.net_width() << "x" << ds.net_height()
            << ", cloud " << ds.camera.width << "x" << ds.camera.height << "\n";
  for (const auto& e : ds.schema.entries())
    std::cout << "  " << e.name << " in [" << e.lower << ", " << e.upper << "] " << e.unit << "\n";
  std::cout << "digest " << std::hex << file_digest(out) << std::dec << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& dataset_path,
              const std::string& mode, std::string out, long seed) {
  if (mode != "kmn" && mode != "baseline") {
    std::cerr << "error: --mode must be kmn or baseline\n";
    return 2;
  }
  std::vector<std::pair<std::string, std::string>> overrides;
  if (seed >= 0) overrides.emplace_back("seed", std::to_string(seed));
  KeyValueConfig cfg = merge_config(config_path, overrides);

  Dataset ds = load_dataset(dataset_path);
  cfg.set("task", ds.task_name);
  PipelineConfig pc = pipeline_config_from(cfg);
  pc.task.schema = ds.schema;
  pc.camera = ds.camera;
  pc.downsample_factor = ds.downsample_factor;
  if (mode == "baseline") pc.outer_rounds_max = 0;

  out = resolve_out(out);
  if (auto dir = fs::path(out).parent_path(); !dir.empty()) fs::create_directories(dir);
  RunManifest manifest("train", cfg, pc.seed);
  manifest.add_artifact("dataset", dataset_path);

  std::ofstream loss_log(out + ".loss.csv");
  TrainLoopResult result = train_loop(pc, ds, &loss_log);
  save_weights(result.weights, out,
               "mode=" + mode + " task=" + ds.task_name + " dataset=" + dataset_path);
  manifest.add_artifact("weights", out);
  manifest.add_artifact("loss_log", out + ".loss.csv");

  std::cout << "mode " << mode << ", " << result.rounds.size() << " training round(s)\n";
  for (const auto& r : result.rounds)
    std::cout << "  round " << r.round << " n_pred=" << r.n_pred << " records=" << r.train_records
              << " train_loss=" << r.train_loss << " val_loss=" << r.val_loss
              << " aug_residual=" << r.mean_projection_residual << "\n";
  if (result.plateaued) std::cout << "stopped on validation-loss plateau\n";
  manifest.note("rounds = " + std::to_string(result.rounds.size()));
  manifest.write(out + ".manifest");
  return 0;
}

int cmd_eval(const std::string& dataset_path, const std::string& kmn_path,
             const std::string& baseline_path, bool with_icp, int n_pred, int curve_iters,
             std::string out_dir) {
  Dataset ds = load_dataset(dataset_path);
  out_dir = resolve_out(out_dir);
  fs::create_directories(out_dir);
  KeyValueConfig cfg;
  cfg.set("dataset", dataset_path);
  RunManifest manifest("eval", cfg, ds.seed);

  TaskDef task = make_task(ds.task_name);
  task.schema = ds.schema;
  if (with_icp && !icp_eligible(ds.schema)) {
    std::cerr << "error: --icp is only valid for rigid tasks (no config or scale "
                 "parameters); "
              << ds.task_name << " is ineligible\n";
    return 2;
  }

  std::vector<MethodReport> reports;
  NetworkWeights kmn, baseline;
  bool have_kmn = !kmn_path.empty(), have_baseline = !baseline_path.empty();
  auto check = [&](const NetworkWeights& w, const std::string& which) {
    if (w.spec.output_dim != ds.schema.n() + ds.schema.m() ||
        w.spec.input_width != ds.net_width() || w.spec.input_height != ds.net_height())
      throw std::runtime_error(which + " weights do not match the dataset schema/resolution");
  };
  if (have_kmn) {
    kmn = load_weights(kmn_path);
    check(kmn, "kmn");
    auto train_evals = evaluate_network(ds, kmn, n_pred, kSplitTrain);
    auto test_evals = evaluate_network(ds, kmn, n_pred, kSplitTest, true);
    reports.push_back({"kmn", mae_of(train_evals), mae_of(test_evals)});
    export_gallery(ds, std::move(test_evals), out_dir + "/gallery_kmn");
    manifest.add_artifact("gallery_kmn", out_dir + "/gallery_kmn");
  }
  if (have_baseline) {
    baseline = load_weights(baseline_path);
    check(baseline, "baseline");
    auto train_evals = evaluate_network(ds, baseline, 1, kSplitTrain);
    auto test_evals = evaluate_network(ds, baseline, 1, kSplitTest);
    reports.push_back({"baseline", mae_of(train_evals), mae_of(test_evals)});
  }
  if (with_icp) {
    auto train_evals = evaluate_icp(ds, task, kSplitTrain);
    auto test_evals = evaluate_icp(ds, task, kSplitTest);
    reports.push_back({"icp", mae_of(train_evals), mae_of(test_evals)});
  }
  if (reports.empty()) {
    std::cerr << "error: nothing to evaluate (give --weights, --baseline-weights or --icp)\n";
    return 2;
  }
  write_report_csv(reports, ds.schema, out_dir + "/report.csv");
  write_report_markdown(reports, ds.schema, out_dir + "/report.md");
  manifest.add_artifact("report_csv", out_dir + "/report.csv");
  manifest.add_artifact("report_md", out_dir + "/report.md");

  if (curve_iters > 0 && have_kmn) {
    auto kmn_curve = error_vs_iterations(ds, kmn, curve_iters);
    std::vector<IterationStats> base_curve;
    if (have_baseline) base_curve = error_vs_iterations(ds, baseline, curve_iters);
    write_iteration_csv(kmn_curve, base_curve, out_dir + "/error_vs_iterations.csv");
    manifest.add_artifact("iteration_curve", out_dir + "/error_vs_iterations.csv");
  }
  manifest.write(out_dir + "/manifest.txt");

  for (const auto& r : reports)
    std::cout << r.method << ": summed MAE train=" << r.train.summed
              << " test=" << r.test.summed << " (n=" << r.test.count << ")\n";
  return 0;
}

int cmd_render_samples(const std::string& config_path, const std::string& task, long seed,
                       int count, std::string out_dir) {
  std::vector<std::pair<std::string, std::string>> overrides;
  if (!task.empty()) overrides.emplace_back("task", task);
  if (seed >= 0) overrides.emplace_back("seed", std::to_string(seed));
  KeyValueConfig cfg = merge_config(config_path, overrides);
  PipelineConfig pc = pipeline_config_from(cfg);
  out_dir = resolve_out(out_dir);
  fs::create_directories(out_dir);
  RunManifest manifest("render-samples", cfg, pc.seed);

  for (int i = 0; i < count; ++i) {
    Rng rng(Rng::derive(pc.seed, std::uint64_t(i)));
    MorphParams params = sample_params(pc.task.schema, rng);
    KinematicModel model = instantiate(pc.task, params);
    RenderOut render = render_mesh(model, pc.camera);
    DepthImage net = downsample(render.depth, pc.downsample_factor);
    std::string stem = out_dir + "/sample" + std::to_string(i);
    write_pgm16(net, stem + ".pgm");
    std::ofstream label(stem + ".txt");
    int it = 0, ic = 0;
    for (const auto& e : pc.task.schema.entries())
      label << e.name << " = "
            << (e.kind == ParamKind::transform ? params.theta[it++] : params.gamma[ic++]) << "\n";
  }
  manifest.add_artifact("samples", out_dir);
  manifest.write(out_dir + "/manifest.txt");
  std::cout << "wrote " << count << " samples to " << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kinematic morphing toolkit"};
  app.require_subcommand(1);

  std::string config_path, task, out, dataset, mode = "kmn", weights, baseline_weights;
  long n = -1, seed = -1;
  int count = 8, n_pred = 5, curve = 0;
  bool force = false, with_icp = false;

  auto* gen = app.add_subcommand("generate", "sample parameters, render, write a dataset");
  gen->add_option("--config", config_path, "config file (key=value)");
  gen->add_option("--task", task, "task name: box_a, box_b, box_c, door");
  gen->add_option("--n", n, "number of records");
  gen->add_option("--seed", seed, "master seed");
  gen->add_option("--out", out, "output dataset path")->required();
  gen->add_flag("--force", force, "overwrite existing output");

  auto* train = app.add_subcommand("train", "train a network on a dataset");
  train->add_option("--config", config_path, "config file (key=value)");
  train->add_option("--dataset", dataset, "dataset file")->required();
  train->add_option("--mode", mode, "kmn (full loop) or baseline (initial data only)");
  train->add_option("--seed", seed, "master seed");
  train->add_option("--out", out, "output weights path")->required();

  auto* ev = app.add_subcommand("eval", "evaluate weights and/or ICP on a dataset");
  ev->add_option("--dataset", dataset, "dataset file")->required();
  ev->add_option("--weights", weights, "KMN weights (evaluated iteratively)");
  ev->add_option("--baseline-weights", baseline_weights, "baseline weights (single step)");
  ev->add_flag("--icp", with_icp, "add the ICP column (rigid tasks only)");
  ev->add_option("--n-pred", n_pred, "prediction steps for the KMN column");
  ev->add_option("--curve", curve, "also write error-vs-iterations up to this many steps");
  ev->add_option("--out-dir", out, "report directory")->required();

  auto* rs = app.add_subcommand("render-samples", "render labelled sample depth images");
  rs->add_option("--config", config_path, "config file (key=value)");
  rs->add_option("--task", task, "task name");
  rs->add_option("--seed", seed, "master seed");
  rs->add_option("--count", count, "number of samples");
  rs->add_option("--out-dir", out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cmd_generate(config_path, task, n, seed, out, force);
    if (train->parsed()) return cmd_train(config_path, dataset, mode, out, seed);
    if (ev->parsed())
      return cmd_eval(dataset, weights, baseline_weights, with_icp, n_pred, curve, out);
    if (rs->parsed()) return cmd_render_samples(config_path, task, seed, count, out);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
