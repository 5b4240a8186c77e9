#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <stdexcept>
#include <string>
#include <vector>

#include "kmorph/icp.hpp"
#include "kmorph/pipeline.hpp"

namespace kmorph {

struct MaeResult {
  Eigen::VectorXd per_param;
  double summed = 0.0;
  std::size_t count = 0;
};

inline MaeResult mae(const std::vector<Eigen::VectorXd>& predictions,
                     const std::vector<Eigen::VectorXd>& labels) {
  if (predictions.empty() || predictions.size() != labels.size())
    throw std::invalid_argument("mae: empty input or size mismatch");
  MaeResult r;
  r.per_param = Eigen::VectorXd::Zero(predictions[0].size());
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (predictions[i].size() != r.per_param.size() || labels[i].size() != r.per_param.size())
      throw std::invalid_argument("mae: dimension mismatch");
    r.per_param += (predictions[i] - labels[i]).cwiseAbs();
  }
  r.per_param /= double(predictions.size());
  r.summed = r.per_param.sum();
  r.count = predictions.size();
  return r;
}

// symmetric mean nearest-neighbour distance, meters
inline double chamfer(const std::vector<Eigen::Vector3d>& a,
                      const std::vector<Eigen::Vector3d>& b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("chamfer: empty point set");
  KdTree ta(a), tb(b);
  double ab = 0.0, ba = 0.0;
  for (const auto& p : a) ab += std::sqrt(tb.nearest(p).dist2);
  for (const auto& p : b) ba += std::sqrt(ta.nearest(p).dist2);
  return 0.5 * (ab / double(a.size()) + ba / double(b.size()));
}

struct RecordEval {
  std::size_t record = 0;
  Eigen::VectorXd prediction;  // theta (projected) then gamma
  Eigen::VectorXd label;
  double summed_abs_err = 0.0;
  DepthImage final_depth;  // only filled when keep_images
};

// Run the iterative predictor from an identity prior on every record of the
// given split. The parameter estimate is the inverse of the cumulative
// prototype-directed transform, projected back onto the schema.
inline std::vector<RecordEval> evaluate_network(const Dataset& ds, const NetworkWeights& w,
                                                int n_pred, std::uint8_t split,
                                                bool keep_images = false) {
  std::vector<RecordEval> evals;
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const DataRecord& rec = ds.records[i];
    if (rec.split != split || rec.provenance != kProvenanceGenerated) continue;
    PointCloud cloud = backproject(rec.cloud_depth, ds.camera);
    PredictResult pr = predict_iterative(rec.depth, cloud, Affine3::identity(), w, n_pred,
                                         ds.camera, ds.downsample_factor, ds.schema);
    RecordEval e;
    e.record = i;
    e.label = ds.label_vector(rec);
    e.prediction.resize(e.label.size());
    e.prediction.head(ds.schema.n()) = extract_params(inverse(pr.theta), ds.schema).theta;
    e.prediction.tail(ds.schema.m()) = pr.gamma;
    e.summed_abs_err = (e.prediction - e.label).cwiseAbs().sum();
    if (keep_images) e.final_depth = std::move(pr.depth);
    evals.push_back(std::move(e));
  }
  if (evals.empty()) throw std::invalid_argument("evaluate_network: split has no records");
  return evals;
}

inline bool icp_eligible(const ParamSchema& schema) {
  if (schema.m() != 0) return false;
  for (const auto& e : schema.entries())
    if (is_scale_param(e.name)) return false;
  return true;
}

// ICP baseline on a record: observed cloud (subsampled) against prototype
// surface samples. Only valid for rigid tasks (no gamma, no scale).
inline std::vector<RecordEval> evaluate_icp(const Dataset& ds, const TaskDef& task,
                                            std::uint8_t split, int max_iter = 100,
                                            int max_points = 500,
                                            double sample_spacing = 0.02) {
  if (!icp_eligible(ds.schema))
    throw std::invalid_argument("evaluate_icp: task has config or scale parameters; "
                                "ICP only fits a rigid transform");
  auto proto_samples = surface_samples(prototype(task), sample_spacing);
  std::vector<RecordEval> evals;
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const DataRecord& rec = ds.records[i];
    if (rec.split != split || rec.provenance != kProvenanceGenerated) continue;
    PointCloud cloud = backproject(rec.cloud_depth, ds.camera);
    auto pts = valid_points(cloud);
    if (pts.size() < 3) continue;
    if (int(pts.size()) > max_points) {
      std::vector<Eigen::Vector3d> sub;
      double stride = double(pts.size()) / max_points;
      for (int k = 0; k < max_points; ++k) sub.push_back(pts[std::size_t(k * stride)]);
      pts = std::move(sub);
    }
    IcpResult icp_result = icp(pts, proto_samples, max_iter);
    RecordEval e;
    e.record = i;
    e.label = ds.label_vector(rec);
    e.prediction = extract_params(inverse(icp_result.transform), ds.schema).theta;
    e.summed_abs_err = (e.prediction - e.label).cwiseAbs().sum();
    evals.push_back(std::move(e));
  }
  if (evals.empty()) throw std::invalid_argument("evaluate_icp: split has no usable records");
  return evals;
}

inline MaeResult mae_of(const std::vector<RecordEval>& evals) {
  std::vector<Eigen::VectorXd> preds, labels;
  preds.reserve(evals.size());
  for (const auto& e : evals) {
    preds.push_back(e.prediction);
    labels.push_back(e.label);
  }
  return mae(preds, labels);
}

struct IterationStats {
  int n_pred = 0;
  double mean = 0.0;
  double stddev = 0.0;
};

// Mean and standard deviation of the summed absolute parameter error on the
// test split as a function of the number of prediction steps.
inline std::vector<IterationStats> error_vs_iterations(const Dataset& ds,
                                                       const NetworkWeights& w, int max_iter) {
  std::vector<std::vector<double>> errors(max_iter);
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const DataRecord& rec = ds.records[i];
    if (rec.split != kSplitTest || rec.provenance != kProvenanceGenerated) continue;
    Eigen::VectorXd label = ds.label_vector(rec);
    DepthImage d = rec.depth;
    PointCloud p = backproject(rec.cloud_depth, ds.camera);
    Affine3 theta = Affine3::identity();
    for (int k = 0; k < max_iter; ++k) {
      PredictResult pr =
          predict_iterative(d, p, theta, w, 1, ds.camera, ds.downsample_factor, ds.schema);
      d = std::move(pr.depth);
      p = std::move(pr.cloud);
      theta = pr.theta;
      Eigen::VectorXd pred(label.size());
      pred.head(ds.schema.n()) = extract_params(inverse(theta), ds.schema).theta;
      pred.tail(ds.schema.m()) = pr.gamma;
      errors[k].push_back((pred - label).cwiseAbs().sum());
    }
  }
  std::vector<IterationStats> stats;
  for (int k = 0; k < max_iter; ++k) {
    if (errors[k].empty()) throw std::invalid_argument("error_vs_iterations: no test records");
    IterationStats s;
    s.n_pred = k + 1;
    double n = double(errors[k].size());
    for (double e : errors[k]) s.mean += e;
    s.mean /= n;
    for (double e : errors[k]) s.stddev += (e - s.mean) * (e - s.mean);
    s.stddev = std::sqrt(s.stddev / n);
    stats.push_back(s);
  }
  return stats;
}

// ---- report files ----

struct MethodReport {
  std::string method;  // "kmn", "baseline", "icp"
  MaeResult train, test;
};

inline void write_report_csv(const std::vector<MethodReport>& methods, const ParamSchema& schema,
                             const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "task,method,split,parameter,mae\n";
  out << std::setprecision(10);
  for (const auto& mr : methods)
    for (int split = 0; split < 2; ++split) {
      const MaeResult& r = split == 0 ? mr.train : mr.test;
      const char* sname = split == 0 ? "train" : "test";
      for (Eigen::Index i = 0; i < r.per_param.size(); ++i)
        out << schema.task_name() << "," << mr.method << "," << sname << ","
            << schema.entries()[i].name << "," << r.per_param[i] << "\n";
      out << schema.task_name() << "," << mr.method << "," << sname << ",summed," << r.summed
          << "\n";
    }
}

inline void write_report_markdown(const std::vector<MethodReport>& methods,
                                  const ParamSchema& schema, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "# " << schema.task_name() << " evaluation\n\n";
  out << std::setprecision(5) << std::fixed;
  out << "| parameter |";
  for (const auto& mr : methods) out << " " << mr.method << " (train) | " << mr.method << " (test) |";
  out << "\n|---|";
  for (std::size_t i = 0; i < methods.size(); ++i) out << "---|---|";
  out << "\n| summed |";
  for (const auto& mr : methods) out << " " << mr.train.summed << " | " << mr.test.summed << " |";
  out << "\n";
  for (std::size_t i = 0; i < schema.entries().size(); ++i) {
    out << "| " << schema.entries()[i].name << " |";
    for (const auto& mr : methods) {
      if (Eigen::Index(i) < mr.train.per_param.size())
        out << " " << mr.train.per_param[i] << " | " << mr.test.per_param[i] << " |";
      else
        out << " - | - |";
    }
    out << "\n";
  }
  out << "\nsample counts:";
  for (const auto& mr : methods)
    out << " " << mr.method << " train=" << mr.train.count << " test=" << mr.test.count;
  out << "\n";
}

// 3 best / 3 worst test predictions as input/result PGM pairs
inline void export_gallery(const Dataset& ds, std::vector<RecordEval> evals,
                           const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::sort(evals.begin(), evals.end(),
            [](const RecordEval& a, const RecordEval& b) { return a.summed_abs_err < b.summed_abs_err; });
  auto dump = [&](const RecordEval& e, const std::string& tag) {
    if (e.final_depth.width == 0) return;
    write_pgm16(ds.records[e.record].depth, dir + "/" + tag + "_input.pgm");
    write_pgm16(e.final_depth, dir + "/" + tag + "_result.pgm");
  };
  std::size_t n = evals.size();
  for (std::size_t i = 0; i < std::min<std::size_t>(3, n); ++i) {
    dump(evals[i], "best" + std::to_string(i));
    dump(evals[n - 1 - i], "worst" + std::to_string(i));
  }
}

inline void write_iteration_csv(const std::vector<IterationStats>& kmn,
                                const std::vector<IterationStats>& baseline,
                                const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "n_pred,kmn_mean,kmn_std,baseline_mean,baseline_std\n";
  out << std::setprecision(10);
  for (std::size_t i = 0; i < kmn.size(); ++i) {
    out << kmn[i].n_pred << "," << kmn[i].mean << "," << kmn[i].stddev;
    if (i < baseline.size())
      out << "," << baseline[i].mean << "," << baseline[i].stddev;
    else
      out << ",,";
    out << "\n";
  }
}

}  // namespace kmorph
