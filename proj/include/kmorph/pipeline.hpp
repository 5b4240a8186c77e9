#pragma once

#include <algorithm>
#include <cstring>
#include <fstream>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "kmorph/kinematics.hpp"
#include "kmorph/regressor.hpp"
#include "kmorph/render.hpp"
#include "kmorph/rng.hpp"
#include "kmorph/scene.hpp"

namespace kmorph {

inline constexpr std::uint8_t kProvenanceGenerated = 0;  // k > 0: augmented, round k
inline constexpr std::uint8_t kSplitTrain = 0;
inline constexpr std::uint8_t kSplitTest = 1;

struct DataRecord {
  DepthImage depth;        // network resolution, normalized
  DepthImage cloud_depth;  // cloud resolution, metric, for back-projection
  Affine3 label_transform; // cumulative; to_affine(theta) for generated records
  Eigen::VectorXd gamma;
  std::uint8_t provenance = kProvenanceGenerated;
  std::uint8_t split = kSplitTrain;
};

struct Dataset {
  std::string task_name;
  ParamSchema schema;
  Camera camera;           // cloud resolution
  int downsample_factor = 4;
  std::uint64_t seed = 0;
  std::vector<DataRecord> records;

  Camera net_camera() const { return camera.downscaled(downsample_factor); }
  int net_width() const { return camera.width / downsample_factor; }
  int net_height() const { return camera.height / downsample_factor; }

  // training label: extract_params projection of the transform, then gamma
  Eigen::VectorXd label_vector(const DataRecord& r, double* residual = nullptr) const {
    auto ex = extract_params(r.label_transform, schema);
    if (residual) *residual = ex.residual;
    Eigen::VectorXd v(schema.n() + schema.m());
    v.head(schema.n()) = ex.theta;
    v.tail(schema.m()) = r.gamma;
    return v;
  }
};

struct PipelineConfig {
  TaskDef task;
  Camera camera;                // cloud resolution
  int downsample_factor = 4;
  int n_data = 1000;
  int n_aug = 200;              // per augmentation round
  int outer_rounds_max = 4;
  double stop_epsilon = 0.01;   // relative validation-loss plateau
  double split_fraction = 0.8;
  double early_stop_tol = 1e-3; // predict_iterative step-size tolerance
  std::uint64_t seed = 1;
  TrainConfig train;
  std::array<int, 5> channels = {2, 4, 6, 8, 10};

  NetworkSpec network_spec() const {
    NetworkSpec s;
    s.input_width = camera.width / downsample_factor;
    s.input_height = camera.height / downsample_factor;
    s.channels = channels;
    s.output_dim = task.schema.n() + task.schema.m();
    return s;
  }
};

// Default task camera used by the CLI and shipped configs. Boxes are viewed
// from 2 m, the taller door from 3.2 m.
inline Camera default_camera(const std::string& task_name, int cloud_width = 256,
                             int cloud_height = 192) {
  double hfov = 60.0 * M_PI / 180.0;
  if (task_name == "door")
    return Camera::look_at(cloud_width, cloud_height, hfov, {0.0, -3.2, 1.3}, {0.0, 0.0, 1.0},
                           0.3, 6.0);
  return Camera::look_at(cloud_width, cloud_height, hfov, {0.0, -2.0, 0.9}, {0.0, 0.0, 0.15},
                         0.3, 4.0);
}

inline bool early_stop_check(const Eigen::VectorXd& theta_step, double tol = 1e-3) {
  return theta_step.size() == 0 || theta_step.cwiseAbs().maxCoeff() < tol;
}

struct PredictResult {
  DepthImage depth;   // network resolution
  PointCloud cloud;
  Affine3 theta;      // cumulative transform
  Eigen::VectorXd gamma;
  bool gamma_valid = false;
  int steps_used = 0;
  int scale_clamps = 0;
};

// any depth-image-to-(theta, gamma) predictor; normally the network
using Predictor = std::function<Eigen::VectorXd(const DepthImage&)>;

// Multi-step prediction: predict a step transform, move the cloud toward the
// prototype with its inverse, re-render, repeat. Only the last gamma
// prediction is kept. early_stop_tol = 0 runs exactly n_pred steps.
inline PredictResult predict_iterative(const DepthImage& d, const PointCloud& p,
                                       const Affine3& theta_in, const Predictor& predictor,
                                       int n_pred, const Camera& cloud_cam, int ds_factor,
                                       const ParamSchema& schema, double early_stop_tol = 0.0) {
  PredictResult r;
  r.depth = d;
  r.cloud = p;
  r.theta = theta_in;
  for (int step = 0; step < n_pred; ++step) {
    Eigen::VectorXd out = predictor(r.depth);
    if (!out.allFinite())
      throw std::runtime_error("predict_iterative: non-finite prediction at step " +
                               std::to_string(step + 1));
    Eigen::VectorXd theta_step = out.head(schema.n());
    r.gamma = out.tail(schema.m());
    r.gamma_valid = true;
    // keep predicted scale offsets in the representable range
    int k = 0;
    for (const auto& e : schema.entries()) {
      if (e.kind != ParamKind::transform) break;
      if (is_scale_param(e.name) && theta_step[k] < -0.9) {
        theta_step[k] = -0.9;
        ++r.scale_clamps;
      }
      ++k;
    }
    Affine3 undo = inverse(to_affine(theta_step, schema));
    r.cloud = apply(undo, r.cloud);
    r.depth = downsample(point_cloud_to_depth(r.cloud, cloud_cam), ds_factor);
    r.theta = compose(undo, r.theta);
    r.steps_used = step + 1;
    if (early_stop_tol > 0.0 && early_stop_check(theta_step, early_stop_tol)) break;
  }
  return r;
}

inline PredictResult predict_iterative(const DepthImage& d, const PointCloud& p,
                                       const Affine3& theta_in, const NetworkWeights& w,
                                       int n_pred, const Camera& cloud_cam, int ds_factor,
                                       const ParamSchema& schema, double early_stop_tol = 0.0) {
  return predict_iterative(
      d, p, theta_in, [&w](const DepthImage& img) { return forward(img, w); }, n_pred, cloud_cam,
      ds_factor, schema, early_stop_tol);
}

// 80/20 assignment from (seed, record index); stable across runs
inline std::uint8_t split_for_index(std::uint64_t seed, std::uint64_t index,
                                    double split_fraction = 0.8) {
  return Rng::derive(seed ^ 0x73b1e7u, index) % 10000 < std::uint64_t(split_fraction * 10000)
             ? kSplitTrain
             : kSplitTest;
}

struct GenerateStats {
  int resampled = 0;       // degenerate draws replaced
  int empty_renders = 0;   // model missed the frustum entirely (kept, logged)
};

inline Dataset generate_dataset(const PipelineConfig& config, GenerateStats* stats = nullptr) {
  Dataset ds;
  ds.task_name = config.task.task_name;
  ds.schema = config.task.schema;
  ds.camera = config.camera;
  ds.downsample_factor = config.downsample_factor;
  ds.seed = config.seed;
  ds.records.reserve(config.n_data);
  GenerateStats local;
  for (int i = 0; i < config.n_data; ++i) {
    DataRecord rec;
    for (int attempt = 0;; ++attempt) {
      if (attempt >= 100)
        throw std::runtime_error("generate_dataset: record " + std::to_string(i) +
                                 " kept degenerating");
      Rng rng(Rng::derive(config.seed, std::uint64_t(i) + std::uint64_t(attempt) * 0x10000000ULL));
      MorphParams params = sample_params(ds.schema, rng);
      try {
        KinematicModel model = instantiate(config.task, params);
        RenderOut render = render_mesh(model, config.camera);
        rec.depth = downsample(render.depth, config.downsample_factor);
        rec.cloud_depth = std::move(render.metric_depth);
        rec.label_transform = to_affine(params.theta, ds.schema);
        rec.gamma = params.gamma;
        if (rec.cloud_depth.occupied_count() == 0) ++local.empty_renders;
      } catch (const std::invalid_argument&) {
        ++local.resampled;
        continue;
      }
      break;
    }
    rec.provenance = kProvenanceGenerated;
    rec.split = split_for_index(config.seed, std::uint64_t(i), config.split_fraction);
    ds.records.push_back(std::move(rec));
  }
  if (stats) *stats = local;
  return ds;
}

// Self-augmentation: run the current network on training records and store
// the resulting near-prototype observations with their residual transform
// labels. Original gamma labels are kept.
inline std::vector<DataRecord> augment(const Dataset& ds, const NetworkWeights& w, int n_aug,
                                       int n_pred, std::uint8_t round, Rng& rng,
                                       double* mean_projection_residual = nullptr) {
  std::vector<std::size_t> train_idx;
  for (std::size_t i = 0; i < ds.records.size(); ++i)
    if (ds.records[i].split == kSplitTrain && ds.records[i].provenance == kProvenanceGenerated)
      train_idx.push_back(i);
  if (train_idx.empty()) throw std::invalid_argument("augment: no generated training records");
  n_aug = std::min<int>(n_aug, int(train_idx.size()));
  // uniform draw without replacement
  for (std::size_t i = 0; i < std::size_t(n_aug); ++i)
    std::swap(train_idx[i], train_idx[i + rng.index(train_idx.size() - i)]);
  train_idx.resize(n_aug);

  std::vector<DataRecord> out;
  out.reserve(n_aug);
  double residual_acc = 0.0;
  for (std::size_t i : train_idx) {
    const DataRecord& src = ds.records[i];
    PointCloud cloud = backproject(src.cloud_depth, ds.camera);
    PredictResult pr = predict_iterative(src.depth, cloud, src.label_transform, w, n_pred,
                                         ds.camera, ds.downsample_factor, ds.schema);
    DataRecord rec;
    rec.depth = std::move(pr.depth);
    rec.cloud_depth = point_cloud_to_depth_metric(pr.cloud, ds.camera);
    rec.label_transform = pr.theta;
    rec.gamma = src.gamma;
    rec.provenance = round;
    rec.split = kSplitTrain;
    residual_acc += extract_params(pr.theta, ds.schema).residual;
    out.push_back(std::move(rec));
  }
  if (mean_projection_residual) *mean_projection_residual = residual_acc / double(n_aug);
  return out;
}

struct RoundMetrics {
  int round = 0;       // 0 = initial training
  int n_pred = 0;      // augmentation depth used for this round's new data
  std::size_t train_records = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double mean_projection_residual = 0.0;
};

struct TrainLoopResult {
  NetworkWeights weights;
  std::vector<RoundMetrics> rounds;
  bool plateaued = false;
};

namespace detail {

inline std::vector<TrainSample> training_samples(const Dataset& ds) {
  std::vector<TrainSample> samples;
  for (const auto& r : ds.records)
    if (r.split == kSplitTrain) samples.push_back({&r.depth, ds.label_vector(r)});
  return samples;
}

}  // namespace detail

// Algorithm: generate (caller supplies the dataset) -> train -> repeat
// {augment with n_pred, retrain on everything accumulated, n_pred += 1}
// until validation-loss plateau or outer_rounds_max. outer_rounds_max = 0
// reduces to the Baseline variant. The dataset is extended in place.
inline TrainLoopResult train_loop(const PipelineConfig& config, Dataset& ds,
                                  std::ostream* loss_log = nullptr) {
  TrainLoopResult result;
  NetworkSpec spec = config.network_spec();
  result.weights = init_weights(spec, Rng::derive(config.seed, 0x1417));

  if (loss_log) *loss_log << "round,epoch,train_loss,val_loss\n";
  auto run_round = [&](int round, int n_pred, double residual) {
    RoundMetrics metrics;
    metrics.round = round;
    metrics.n_pred = n_pred;
    metrics.mean_projection_residual = residual;
    auto samples = detail::training_samples(ds);
    metrics.train_records = samples.size();
    TrainConfig tc = config.train;
    tc.seed = Rng::derive(config.seed, 0x7100 + std::uint64_t(round));
    double best_val = std::numeric_limits<double>::infinity();
    double last_train = 0.0;
    result.weights = train(samples, result.weights, tc,
                           [&](int epoch, double train_loss, double val_loss) {
                             best_val = std::min(best_val, val_loss);
                             last_train = train_loss;
                             if (loss_log)
                               *loss_log << round << "," << epoch << "," << train_loss << ","
                                         << val_loss << "\n";
                           });
    metrics.train_loss = last_train;
    metrics.val_loss = best_val;
    result.rounds.push_back(metrics);
  };

  run_round(0, 0, 0.0);
  int n_pred = 1;
  for (int round = 1; round <= config.outer_rounds_max; ++round) {
    Rng rng(Rng::derive(config.seed, 0xA46 + std::uint64_t(round)));
    double residual = 0.0;
    auto extra = augment(ds, result.weights, config.n_aug, n_pred, std::uint8_t(round), rng,
                         &residual);
    for (auto& r : extra) ds.records.push_back(std::move(r));
    run_round(round, n_pred, residual);
    ++n_pred;
    double prev = result.rounds[result.rounds.size() - 2].val_loss;
    double cur = result.rounds.back().val_loss;
    if (prev > 0.0 && std::abs(prev - cur) / prev < config.stop_epsilon) {
      result.plateaued = true;
      break;
    }
  }
  return result;
}

// ---- dataset file (versioned, little-endian) ----

namespace detail {

inline constexpr char kDatasetMagic[4] = {'K', 'M', 'D', 'S'};
inline constexpr std::uint32_t kDatasetVersion = 1;

inline void write_str(std::ostream& out, const std::string& s) {
  write_pod(out, std::uint32_t(s.size()));
  out.write(s.data(), s.size());
}

inline std::string read_str(std::istream& in) {
  std::uint32_t n = 0;
  read_pod(in, n);
  std::string s(n, '\0');
  in.read(s.data(), n);
  return s;
}

inline void write_grid_f32(std::ostream& out, const DepthImage& d) {
  for (double v : d.values) write_pod(out, float(v));
}

inline void read_grid_f32(std::istream& in, DepthImage& d, int w, int h) {
  d = DepthImage(w, h);
  for (double& v : d.values) {
    float f = 0;
    read_pod(in, f);
    v = f;
  }
}

}  // namespace detail

inline void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write dataset file " + path);
  using namespace detail;
  out.write(kDatasetMagic, 4);
  write_pod(out, kDatasetVersion);
  write_str(out, ds.task_name);
  write_pod(out, std::uint32_t(ds.schema.entries().size()));
  for (const auto& e : ds.schema.entries()) {
    write_str(out, e.name);
    write_pod(out, std::uint8_t(e.kind == ParamKind::config));
    write_pod(out, e.lower);
    write_pod(out, e.upper);
    write_str(out, e.unit);
  }
  write_pod(out, std::int32_t(ds.camera.width));
  write_pod(out, std::int32_t(ds.camera.height));
  write_pod(out, ds.camera.fx);
  write_pod(out, ds.camera.fy);
  write_pod(out, ds.camera.cx);
  write_pod(out, ds.camera.cy);
  for (int c = 0; c < 3; ++c)
    for (int r = 0; r < 3; ++r) write_pod(out, ds.camera.pose.linear(r, c));
  for (int r = 0; r < 3; ++r) write_pod(out, ds.camera.pose.translation(r));
  write_pod(out, ds.camera.near_m);
  write_pod(out, ds.camera.far_m);
  write_pod(out, ds.seed);
  write_pod(out, std::int32_t(ds.downsample_factor));
  write_pod(out, std::uint64_t(ds.records.size()));
  for (const auto& r : ds.records) {
    write_grid_f32(out, r.depth);
    write_grid_f32(out, r.cloud_depth);
    for (int c = 0; c < 3; ++c)
      for (int row = 0; row < 3; ++row) write_pod(out, r.label_transform.linear(row, c));
    for (int row = 0; row < 3; ++row) write_pod(out, r.label_transform.translation(row));
    for (Eigen::Index i = 0; i < r.gamma.size(); ++i) write_pod(out, r.gamma[i]);
    write_pod(out, r.provenance);
    write_pod(out, r.split);
  }
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open dataset file " + path);
  using namespace detail;
  char magic[4];
  in.read(magic, 4);
  std::uint32_t version = 0;
  read_pod(in, version);
  if (std::memcmp(magic, kDatasetMagic, 4) != 0 || version != kDatasetVersion)
    throw std::runtime_error("not a dataset file (or unsupported version): " + path);
  Dataset ds;
  ds.task_name = read_str(in);
  std::uint32_t n_entries = 0;
  read_pod(in, n_entries);
  std::vector<ParamEntry> entries(n_entries);
  for (auto& e : entries) {
    e.name = read_str(in);
    std::uint8_t kind = 0;
    read_pod(in, kind);
    e.kind = kind ? ParamKind::config : ParamKind::transform;
    read_pod(in, e.lower);
    read_pod(in, e.upper);
    e.unit = read_str(in);
  }
  ds.schema = ParamSchema(ds.task_name, std::move(entries));
  std::int32_t cw, chh;
  read_pod(in, cw);
  read_pod(in, chh);
  ds.camera.width = cw;
  ds.camera.height = chh;
  read_pod(in, ds.camera.fx);
  read_pod(in, ds.camera.fy);
  read_pod(in, ds.camera.cx);
  read_pod(in, ds.camera.cy);
  for (int c = 0; c < 3; ++c)
    for (int r = 0; r < 3; ++r) read_pod(in, ds.camera.pose.linear(r, c));
  for (int r = 0; r < 3; ++r) read_pod(in, ds.camera.pose.translation(r));
  read_pod(in, ds.camera.near_m);
  read_pod(in, ds.camera.far_m);
  read_pod(in, ds.seed);
  std::int32_t factor = 0;
  read_pod(in, factor);
  ds.downsample_factor = factor;
  std::uint64_t n_records = 0;
  read_pod(in, n_records);
  int nw = ds.net_width(), nh = ds.net_height();
  int m = ds.schema.m();
  ds.records.resize(n_records);
  for (auto& r : ds.records) {
    read_grid_f32(in, r.depth, nw, nh);
    read_grid_f32(in, r.cloud_depth, ds.camera.width, ds.camera.height);
    for (int c = 0; c < 3; ++c)
      for (int row = 0; row < 3; ++row) read_pod(in, r.label_transform.linear(row, c));
    for (int row = 0; row < 3; ++row) read_pod(in, r.label_transform.translation(row));
    r.gamma.resize(m);
    for (int i = 0; i < m; ++i) read_pod(in, r.gamma[i]);
    read_pod(in, r.provenance);
    read_pod(in, r.split);
  }
  if (!in) throw std::runtime_error("truncated dataset file " + path);
  return ds;
}

// FNV-1a over the file bytes; used for reproducibility assertions
inline std::uint64_t file_digest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i)
      h = (h ^ std::uint8_t(buf[i])) * 0x100000001b3ULL;
    if (!in) break;
  }
  return h;
}

}  // namespace kmorph
