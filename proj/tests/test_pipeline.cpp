#include <catch2/catch_amalgamated.hpp>

#include "kmorph/eval.hpp"
#include "kmorph/pipeline.hpp"

using namespace kmorph;

namespace {

PipelineConfig small_config(const std::string& task_name, int n_data = 24) {
  PipelineConfig cfg;
  cfg.task = make_task(task_name);
  cfg.camera = default_camera(task_name, 128, 96);
  cfg.downsample_factor = 2;  // 64x48 network input, the smallest that pools 5 times
  cfg.n_data = n_data;
  cfg.n_aug = 8;
  cfg.outer_rounds_max = 2;
  cfg.seed = 5;
  cfg.train.epochs = 2;
  cfg.train.batch_size = 8;
  cfg.channels = {2, 2, 2, 2, 2};
  return cfg;
}

// a predictor that always answers with the label of one fixed instance
Predictor oracle_for(const Eigen::VectorXd& label) {
  return [label](const DepthImage&) { return label; };
}

Eigen::VectorXd zero_output(int n) { return Eigen::VectorXd::Zero(n); }

}  // namespace

TEST_CASE("early_stop_check") {
  Eigen::VectorXd small(3), big(3), empty(0);
  small << 1e-4, -5e-4, 0.0;
  big << 1e-4, 2e-3, 0.0;
  CHECK(early_stop_check(small));
  CHECK_FALSE(early_stop_check(big));
  CHECK(early_stop_check(big, 0.01));
  CHECK(early_stop_check(empty));
}

TEST_CASE("generate_dataset") {
  auto cfg = small_config("box_a");

  SECTION("determinism via the file digest") {
    auto a = generate_dataset(cfg);
    auto b = generate_dataset(cfg);
    save_dataset(a, "gen_a.kmds");
    save_dataset(b, "gen_b.kmds");
    CHECK(file_digest("gen_a.kmds") == file_digest("gen_b.kmds"));
    cfg.seed = 6;
    save_dataset(generate_dataset(cfg), "gen_c.kmds");
    CHECK(file_digest("gen_a.kmds") != file_digest("gen_c.kmds"));
  }
  SECTION("labels stay inside the schema limits") {
    auto ds = generate_dataset(cfg);
    REQUIRE(int(ds.records.size()) == cfg.n_data);
    for (const auto& r : ds.records) {
      auto v = ds.label_vector(r);
      int k = 0;
      for (const auto& e : cfg.task.schema.entries()) {
        CHECK(v[k] >= e.lower - 1e-12);
        CHECK(v[k] <= e.upper + 1e-12);
        ++k;
      }
      CHECK(r.provenance == kProvenanceGenerated);
      CHECK(r.depth.width == ds.net_width());
      CHECK(r.cloud_depth.width == ds.camera.width);
    }
  }
  SECTION("both splits appear and are a pure function of seed and index") {
    auto ds = generate_dataset(cfg);
    int train = 0, test = 0;
    for (std::size_t i = 0; i < ds.records.size(); ++i) {
      (ds.records[i].split == kSplitTrain ? train : test)++;
      CHECK(ds.records[i].split == split_for_index(cfg.seed, i, cfg.split_fraction));
    }
    CHECK(train > 0);
    CHECK(test > 0);
  }
  SECTION("single record works") {
    cfg.n_data = 1;
    CHECK(generate_dataset(cfg).records.size() == 1);
  }
  SECTION("door generation resamples degenerate draws instead of failing") {
    auto door = small_config("door", 16);
    GenerateStats stats;
    auto ds = generate_dataset(door, &stats);
    CHECK(int(ds.records.size()) == 16);
    CHECK(stats.resampled >= 0);
  }
}

TEST_CASE("predict_iterative") {
  auto task = make_task("box_a");
  Camera cam = default_camera("box_a", 128, 96);
  Rng rng(9);
  auto params = sample_params(task.schema, rng);
  auto render = render_mesh(instantiate(task, params), cam);
  DepthImage net_depth = downsample(render.depth, 4);
  int out_dim = task.schema.n() + task.schema.m();

  SECTION("zero steps is a no-op") {
    auto r = predict_iterative(net_depth, render.cloud, Affine3::identity(),
                               oracle_for(zero_output(out_dim)), 0, cam, 4, task.schema);
    CHECK(r.steps_used == 0);
    CHECK_FALSE(r.gamma_valid);
    CHECK(r.depth.values == net_depth.values);
  }
  SECTION("zero predictor leaves the cumulative transform at theta_in") {
    Affine3 start = to_affine(params.theta, task.schema);
    auto r = predict_iterative(net_depth, render.cloud, start,
                               oracle_for(zero_output(out_dim)), 3, cam, 4, task.schema);
    CHECK(r.steps_used == 3);
    CHECK((r.theta.linear - start.linear).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((r.theta.translation - start.translation).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((r.cloud.points - render.cloud.points).cwiseAbs().maxCoeff() < 1e-15);
  }
  SECTION("a perfect one-step prediction lands on the prototype") {
    Eigen::VectorXd label(out_dim);
    label.head(task.schema.n()) = params.theta;
    auto r = predict_iterative(net_depth, render.cloud, Affine3::identity(), oracle_for(label),
                               1, cam, 4, task.schema);
    // one-sided: the cloud only sees visible faces, so measure cloud->surface
    KdTree proto_tree(surface_samples(prototype(task), 0.02));
    double worst = 0.0;
    for (const auto& p : valid_points(r.cloud))
      worst = std::max(worst, std::sqrt(proto_tree.nearest(p).dist2));
    CHECK(worst < 0.04);
    // estimate used at evaluation time: inverse of the cumulative transform
    auto est = extract_params(inverse(r.theta), task.schema);
    CHECK((est.theta - params.theta).cwiseAbs().maxCoeff() < 1e-9);
  }
  SECTION("starting from the label the cumulative transform returns to identity") {
    Eigen::VectorXd label(out_dim);
    label.head(task.schema.n()) = params.theta;
    Affine3 start = to_affine(params.theta, task.schema);
    auto r = predict_iterative(net_depth, render.cloud, start, oracle_for(label), 1, cam, 4,
                               task.schema);
    CHECK((r.theta.linear - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-9);
    CHECK(r.theta.translation.cwiseAbs().maxCoeff() < 1e-9);
  }
  SECTION("incremental application matches the composed transform") {
    // run two steps manually and compare the cloud against applying the
    // composed cumulative transform once
    Eigen::VectorXd step(out_dim);
    step << 0.05, -0.03;
    auto r = predict_iterative(net_depth, render.cloud, Affine3::identity(), oracle_for(step),
                               2, cam, 4, task.schema);
    auto direct = apply(r.theta, render.cloud);
    CHECK((direct.points - r.cloud.points).cwiseAbs().maxCoeff() < 1e-9);
  }
  SECTION("early stop fires on a small step") {
    auto r = predict_iterative(net_depth, render.cloud, Affine3::identity(),
                               oracle_for(zero_output(out_dim)), 5, cam, 4, task.schema, 1e-3);
    CHECK(r.steps_used == 1);
  }
  SECTION("scale predictions below -1 are clamped, not fatal") {
    auto box_c = make_task("box_c");
    auto pc = sample_params(box_c.schema, rng);
    auto rc = render_mesh(instantiate(box_c, pc), cam);
    Eigen::VectorXd bad = zero_output(box_c.schema.n());
    bad[3] = -2.0;  // length scale offset past the degenerate point
    auto r = predict_iterative(downsample(rc.depth, 4), rc.cloud, Affine3::identity(),
                               oracle_for(bad), 1, cam, 4, box_c.schema);
    CHECK(r.scale_clamps == 1);
    CHECK(r.theta.linear.allFinite());
  }
  SECTION("non-finite prediction raises") {
    Eigen::VectorXd nanout = zero_output(out_dim);
    nanout[0] = std::nan("");
    CHECK_THROWS_AS(predict_iterative(net_depth, render.cloud, Affine3::identity(),
                                      oracle_for(nanout), 1, cam, 4, task.schema),
                    std::runtime_error);
  }
}

TEST_CASE("augment") {
  auto cfg = small_config("box_a");
  auto ds = generate_dataset(cfg);
  NetworkWeights w = init_weights(cfg.network_spec(), 1);
  std::fill(w.params.begin(), w.params.end(), 0.0);  // predicts zero everywhere

  Rng rng(3);
  double residual = 0.0;
  auto extra = augment(ds, w, 8, 1, 1, rng, &residual);
  REQUIRE(extra.size() == 8);
  CHECK(residual < 1e-12);  // zero steps leave exact family members
  for (const auto& r : extra) {
    CHECK(r.provenance == 1);
    CHECK(r.split == kSplitTrain);
    CHECK(r.gamma.size() == 0);
  }
  // with a zero network the augmented observation equals a re-splat of the
  // source cloud and the label transform is unchanged; find the source by
  // matching the label
  for (const auto& r : extra) {
    bool found = false;
    for (const auto& s : ds.records) {
      if ((s.label_transform.translation - r.label_transform.translation).norm() < 1e-15 &&
          (s.label_transform.linear - r.label_transform.linear).norm() < 1e-15) {
        found = true;
        CHECK(s.split == kSplitTrain);
      }
    }
    CHECK(found);
  }
  CHECK_THROWS_AS(augment(Dataset{}, w, 4, 1, 1, rng), std::invalid_argument);
}

TEST_CASE("dataset file round trip") {
  auto cfg = small_config("door", 6);
  auto ds = generate_dataset(cfg);
  save_dataset(ds, "door_rt.kmds");
  auto r = load_dataset("door_rt.kmds");
  CHECK(r.task_name == ds.task_name);
  CHECK(r.schema.n() == ds.schema.n());
  CHECK(r.schema.m() == ds.schema.m());
  CHECK(r.camera.fx == ds.camera.fx);
  CHECK(r.seed == ds.seed);
  REQUIRE(r.records.size() == ds.records.size());
  for (std::size_t i = 0; i < r.records.size(); ++i) {
    const auto& a = ds.records[i];
    const auto& b = r.records[i];
    // grids are stored as f32
    for (std::size_t j = 0; j < a.depth.values.size(); ++j)
      CHECK(b.depth.values[j] == double(float(a.depth.values[j])));
    CHECK(b.label_transform.translation == a.label_transform.translation);
    CHECK(b.gamma == a.gamma);
    CHECK(b.provenance == a.provenance);
    CHECK(b.split == a.split);
  }
  // serialization is bit-stable
  save_dataset(r, "door_rt2.kmds");
  CHECK(file_digest("door_rt.kmds") == file_digest("door_rt2.kmds"));
  CHECK_THROWS_AS(load_dataset("missing.kmds"), std::runtime_error);
}

TEST_CASE("train_loop") {
  auto cfg = small_config("box_a", 20);

  SECTION("round schedule uses n_pred = 1, 2, ...") {
    cfg.outer_rounds_max = 2;
    cfg.stop_epsilon = 0.0;  // never plateau
    auto ds = generate_dataset(cfg);
    std::size_t base = ds.records.size();
    auto res = train_loop(cfg, ds);
    REQUIRE(res.rounds.size() == 3);
    CHECK(res.rounds[0].n_pred == 0);
    CHECK(res.rounds[1].n_pred == 1);
    CHECK(res.rounds[2].n_pred == 2);
    CHECK_FALSE(res.plateaued);
    CHECK(ds.records.size() == base + 2 * cfg.n_aug);
    CHECK(res.rounds[2].train_records > res.rounds[0].train_records);
    for (const auto& m : res.rounds) CHECK(std::isfinite(m.val_loss));
  }
  SECTION("outer_rounds_max = 0 runs exactly the initial training") {
    cfg.outer_rounds_max = 0;
    auto ds = generate_dataset(cfg);
    std::size_t base = ds.records.size();
    auto res = train_loop(cfg, ds);
    CHECK(res.rounds.size() == 1);
    CHECK(ds.records.size() == base);
  }
  SECTION("a huge plateau tolerance stops after the first augmented round") {
    cfg.outer_rounds_max = 3;
    cfg.stop_epsilon = 1e9;
    auto ds = generate_dataset(cfg);
    auto res = train_loop(cfg, ds);
    CHECK(res.rounds.size() == 2);
    CHECK(res.plateaued);
  }
  SECTION("deterministic for a fixed seed") {
    auto ds1 = generate_dataset(cfg);
    auto ds2 = generate_dataset(cfg);
    auto r1 = train_loop(cfg, ds1);
    auto r2 = train_loop(cfg, ds2);
    CHECK(r1.weights.params == r2.weights.params);
  }
}
