#pragma once

#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "kmorph/kinematics.hpp"
#include "kmorph/rng.hpp"

namespace kmorph {

struct Triangle {
  Eigen::Vector3d a, b, c;
  double area() const { return 0.5 * (b - a).cross(c - a).norm(); }
};

struct KinematicModel {
  std::string task_name;
  std::vector<Triangle> triangles;  // world frame, meters
};

struct TaskDef {
  std::string task_name;
  ParamSchema schema;
  std::map<std::string, double> prototype_dimensions;  // meters
};

namespace detail {

// axis-aligned box as 12 triangles, outward winding not required (no culling)
inline void append_box(std::vector<Triangle>& out, const Eigen::Vector3d& lo,
                       const Eigen::Vector3d& hi) {
  Eigen::Vector3d v[8];
  for (int i = 0; i < 8; ++i)
    v[i] = Eigen::Vector3d(i & 1 ? hi.x() : lo.x(), i & 2 ? hi.y() : lo.y(),
                           i & 4 ? hi.z() : lo.z());
  static const int faces[6][4] = {{0, 1, 3, 2}, {4, 5, 7, 6}, {0, 1, 5, 4},
                                  {2, 3, 7, 6}, {0, 2, 6, 4}, {1, 3, 7, 5}};
  for (const auto& f : faces) {
    out.push_back({v[f[0]], v[f[1]], v[f[2]]});
    out.push_back({v[f[0]], v[f[2]], v[f[3]]});
  }
}

inline std::vector<ParamEntry> box_a_entries() {
  return {{std::string(kParamXTranslation), ParamKind::transform, -0.4, 0.4, "m"},
          {std::string(kParamYTranslation), ParamKind::transform, -0.4, 0.4, "m"}};
}

}  // namespace detail

// Built-in task table. Limits follow the shipped schema files in configs/.
inline TaskDef make_task(const std::string& name) {
  using detail::box_a_entries;
  TaskDef t;
  t.task_name = name;
  if (name == "box_a" || name == "box_b" || name == "box_c") {
    t.prototype_dimensions = {{"box_width", 0.3}, {"box_depth", 0.3}, {"box_height", 0.3}};
    auto entries = box_a_entries();
    if (name != "box_a")
      entries.push_back({std::string(kParamZRotation), ParamKind::transform, -1.0, 1.0, "rad"});
    if (name == "box_c") {
      entries.push_back({std::string(kParamLengthScale), ParamKind::transform, -0.4, 0.4, "1"});
      entries.push_back({std::string(kParamHeightScale), ParamKind::transform, -0.5, 1.5, "1"});
    }
    t.schema = ParamSchema(name, std::move(entries));
  } else if (name == "door") {
    t.prototype_dimensions = {{"panel_width", 0.9},   {"panel_height", 2.0},
                              {"panel_thickness", 0.05}, {"handle_length", 0.15},
                              {"handle_section", 0.02},  {"handle_height", 1.0},
                              {"handle_inset", 0.08},    {"handle_standoff", 0.04}};
    std::vector<ParamEntry> entries = {
        {std::string(kParamXTranslation), ParamKind::transform, -0.8, 0.8, "m"},
        {std::string(kParamYTranslation), ParamKind::transform, -0.8, 0.8, "m"},
        {std::string(kParamZRotation), ParamKind::transform, -1.0, 1.0, "rad"},
        {"door_height", ParamKind::config, -0.4, 0.2, "m"},
        {"door_width", ParamKind::config, -0.2, 0.2, "m"},
        // degenerate as printed in the task table; widen via schema override
        {"handle_y", ParamKind::config, -0.0, 0.0, "m"},
        {"handle_z", ParamKind::config, -0.1, 0.1, "m"}};
    t.schema = ParamSchema(name, std::move(entries));
  } else {
    throw std::invalid_argument("unknown task '" + name + "'");
  }
  return t;
}

inline bool is_known_task(const std::string& name) {
  return name == "box_a" || name == "box_b" || name == "box_c" || name == "door";
}

// Build m(theta, gamma): prototype geometry reshaped by gamma, then T_theta.
inline KinematicModel instantiate(const TaskDef& task, const MorphParams& params) {
  if (params.theta.size() != task.schema.n() || params.gamma.size() != task.schema.m())
    throw std::invalid_argument("instantiate: parameter dimensions do not match schema");

  const auto& dim = task.prototype_dimensions;
  KinematicModel model;
  model.task_name = task.task_name;

  if (task.task_name == "door") {
    double dh = params.gamma[0], dw = params.gamma[1];
    double hy = params.gamma[2], hz = params.gamma[3];
    double width = dim.at("panel_width") + dw;
    double height = dim.at("panel_height") + dh;
    if (width <= 0.0 || height <= 0.0)
      throw std::invalid_argument("instantiate: door geometry degenerates (width/height <= 0)");
    double half_w = dim.at("panel_width") / 2.0;
    double thick = dim.at("panel_thickness");
    // hinge edge fixed at -half_w, width offset moves the free edge
    double free_edge = half_w + dw;
    detail::append_box(model.triangles, {-half_w, -thick / 2.0, 0.0},
                       {free_edge, thick / 2.0, height});
    // handle bar rides on the free edge, on the camera-facing side (-y)
    double hc_x = free_edge - dim.at("handle_inset") + hy;
    double hc_z = dim.at("handle_height") + hz;
    double hl = dim.at("handle_length") / 2.0;
    double hs = dim.at("handle_section") / 2.0;
    double standoff = dim.at("handle_standoff");
    detail::append_box(model.triangles, {hc_x - hl, -thick / 2.0 - standoff, hc_z - hs},
                       {hc_x + hl, -thick / 2.0, hc_z + hs});
  } else {
    double hw = dim.at("box_width") / 2.0, hd = dim.at("box_depth") / 2.0;
    detail::append_box(model.triangles, {-hw, -hd, 0.0}, {hw, hd, dim.at("box_height")});
  }

  Affine3 T = to_affine(params.theta, task.schema);
  for (auto& tri : model.triangles) {
    tri.a = T.apply(tri.a);
    tri.b = T.apply(tri.b);
    tri.c = T.apply(tri.c);
  }
  for (const auto& tri : model.triangles)
    if (!tri.a.allFinite() || !tri.b.allFinite() || !tri.c.allFinite() || tri.area() <= 1e-12)
      throw std::invalid_argument("instantiate: degenerate triangle in model geometry");
  return model;
}

inline MorphParams zero_params(const TaskDef& task) {
  return {Eigen::VectorXd::Zero(task.schema.n()), Eigen::VectorXd::Zero(task.schema.m())};
}

inline KinematicModel prototype(const TaskDef& task) { return instantiate(task, zero_params(task)); }

// Each component independently uniform in [lower, upper].
inline MorphParams sample_params(const ParamSchema& schema, Rng& rng) {
  MorphParams p{Eigen::VectorXd(schema.n()), Eigen::VectorXd(schema.m())};
  int it = 0, ic = 0;
  for (const auto& e : schema.entries()) {
    double v = e.lower == e.upper ? e.lower : rng.uniform(e.lower, e.upper);
    if (e.kind == ParamKind::transform)
      p.theta[it++] = v;
    else
      p.gamma[ic++] = v;
  }
  return p;
}

// Deterministic grid sampling of the model surface, approximately `spacing`
// meters between neighbouring samples.
inline std::vector<Eigen::Vector3d> surface_samples(const KinematicModel& model, double spacing) {
  std::vector<Eigen::Vector3d> pts;
  for (const auto& tri : model.triangles) {
    Eigen::Vector3d u = tri.b - tri.a, v = tri.c - tri.a;
    int nu = std::max(1, int(std::ceil(u.norm() / spacing)));
    int nv = std::max(1, int(std::ceil(v.norm() / spacing)));
    for (int i = 0; i <= nu; ++i)
      for (int j = 0; j <= nv; ++j) {
        double fu = double(i) / nu, fv = double(j) / nv;
        if (fu + fv > 1.0 + 1e-12) continue;
        pts.push_back(tri.a + fu * u + fv * v);
      }
  }
  return pts;
}

// ASCII OFF export for debugging in external viewers.
inline void write_mesh_off(const KinematicModel& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write mesh file " + path);
  out << "OFF\n" << model.triangles.size() * 3 << " " << model.triangles.size() << " 0\n";
  for (const auto& t : model.triangles)
    for (const auto* p : {&t.a, &t.b, &t.c})
      out << p->x() << " " << p->y() << " " << p->z() << "\n";
  for (std::size_t i = 0; i < model.triangles.size(); ++i)
    out << "3 " << 3 * i << " " << 3 * i + 1 << " " << 3 * i + 2 << "\n";
}

}  // namespace kmorph
