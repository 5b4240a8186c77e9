#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace kmorph {

enum class ParamKind { transform, config };

struct ParamEntry {
  std::string name;
  ParamKind kind = ParamKind::transform;
  double lower = 0.0;
  double upper = 0.0;
  std::string unit;  // "m", "rad", or "1" for dimensionless scale offsets
};

// Transform parameter names understood by to_affine/extract_params.
// Scale parameters are additive offsets s, applied as factor 1+s, so the
// prototype is always the zero vector.
inline constexpr std::string_view kParamXTranslation = "x_translation";
inline constexpr std::string_view kParamYTranslation = "y_translation";
inline constexpr std::string_view kParamZRotation = "z_rotation";
inline constexpr std::string_view kParamLengthScale = "length_scale";
inline constexpr std::string_view kParamHeightScale = "height_scale";

inline bool is_scale_param(std::string_view name) {
  return name == kParamLengthScale || name == kParamHeightScale;
}

class ParamSchema {
 public:
  ParamSchema() = default;

  ParamSchema(std::string task_name, std::vector<ParamEntry> entries)
      : task_name_(std::move(task_name)), entries_(std::move(entries)) {
    if (entries_.empty())
      throw std::invalid_argument("schema '" + task_name_ + "' has no parameters");
    bool seen_config = false;
    for (const auto& e : entries_) {
      if (e.lower > e.upper)
        throw std::invalid_argument("schema entry '" + e.name + "': lower > upper");
      if (e.kind == ParamKind::config)
        seen_config = true;
      else if (seen_config)
        throw std::invalid_argument("transform entries must precede config entries");
      for (const auto& o : entries_)
        if (&o != &e && o.name == e.name)
          throw std::invalid_argument("duplicate parameter name '" + e.name + "'");
    }
  }

  const std::string& task_name() const { return task_name_; }
  const std::vector<ParamEntry>& entries() const { return entries_; }

  int n() const {
    int k = 0;
    for (const auto& e : entries_) k += e.kind == ParamKind::transform;
    return k;
  }
  int m() const { return int(entries_.size()) - n(); }

  // index within the transform block, -1 if absent
  int transform_index(std::string_view name) const {
    int k = 0;
    for (const auto& e : entries_) {
      if (e.kind != ParamKind::transform) break;
      if (e.name == name) return k;
      ++k;
    }
    return -1;
  }

  bool has(std::string_view name) const {
    for (const auto& e : entries_)
      if (e.name == name) return true;
    return false;
  }

  // Plain-text schema file, one parameter per line:
  //   name kind lower upper unit
  // '#' starts a comment.
  static ParamSchema load(std::istream& in, const std::string& task_name) {
    std::vector<ParamEntry> entries;
    std::string line;
    while (std::getline(in, line)) {
      auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      std::istringstream ls(line);
      ParamEntry e;
      std::string kind;
      if (!(ls >> e.name >> kind >> e.lower >> e.upper >> e.unit)) continue;
      if (kind == "transform")
        e.kind = ParamKind::transform;
      else if (kind == "config")
        e.kind = ParamKind::config;
      else
        throw std::invalid_argument("unknown parameter kind '" + kind + "'");
      entries.push_back(std::move(e));
    }
    return ParamSchema(task_name, std::move(entries));
  }

  static ParamSchema load_file(const std::string& path, const std::string& task_name) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open schema file " + path);
    return load(in, task_name);
  }

 private:
  std::string task_name_;
  std::vector<ParamEntry> entries_;
};

struct MorphParams {
  Eigen::VectorXd theta;  // transform parameters, schema order
  Eigen::VectorXd gamma;  // config parameters, schema order
};

// 3x4 affine transform, carrier of T_theta and its compositions.
struct Affine3 {
  Eigen::Matrix3d linear = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static Affine3 identity() { return {}; }

  static Affine3 translate(double x, double y, double z) {
    Affine3 a;
    a.translation = Eigen::Vector3d(x, y, z);
    return a;
  }

  static Affine3 rot_z(double angle) {
    Affine3 a;
    a.linear = Eigen::AngleAxisd(angle, Eigen::Vector3d::UnitZ()).toRotationMatrix();
    return a;
  }

  static Affine3 scale(double sx, double sy, double sz) {
    Affine3 a;
    a.linear = Eigen::Vector3d(sx, sy, sz).asDiagonal();
    return a;
  }

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return linear * p + translation; }

  bool invertible() const { return std::abs(linear.determinant()) > 1e-12; }
};

inline Affine3 compose(const Affine3& a, const Affine3& b) {
  Affine3 c;
  c.linear = a.linear * b.linear;
  c.translation = a.linear * b.translation + a.translation;
  return c;
}

inline Affine3 inverse(const Affine3& a) {
  if (!a.invertible()) throw std::invalid_argument("Affine3: singular linear part");
  Affine3 inv;
  inv.linear = a.linear.inverse();
  inv.translation = -(inv.linear * a.translation);
  return inv;
}

// T_theta = Trans(tx, ty, 0) * Rot_z(alpha) * Scale(1+s_len, 1, 1+s_h),
// parameters absent from the schema act as identity.
inline Affine3 to_affine(const Eigen::VectorXd& theta, const ParamSchema& schema) {
  if (theta.size() != schema.n())
    throw std::invalid_argument("to_affine: theta has " + std::to_string(theta.size()) +
                                " entries, schema expects " + std::to_string(schema.n()));
  double tx = 0, ty = 0, alpha = 0, s_len = 0, s_h = 0;
  int k = 0;
  for (const auto& e : schema.entries()) {
    if (e.kind != ParamKind::transform) break;
    double v = theta[k++];
    if (e.name == kParamXTranslation)
      tx = v;
    else if (e.name == kParamYTranslation)
      ty = v;
    else if (e.name == kParamZRotation)
      alpha = v;
    else if (e.name == kParamLengthScale)
      s_len = v;
    else if (e.name == kParamHeightScale)
      s_h = v;
    else
      throw std::invalid_argument("unknown transform parameter '" + e.name + "'");
  }
  if (1.0 + s_len <= 0.0 || 1.0 + s_h <= 0.0)
    throw std::invalid_argument("to_affine: non-positive scale factor");
  return compose(Affine3::translate(tx, ty, 0.0),
                 compose(Affine3::rot_z(alpha), Affine3::scale(1.0 + s_len, 1.0, 1.0 + s_h)));
}

struct ExtractResult {
  Eigen::VectorXd theta;
  double residual = 0.0;  // Frobenius distance to the nearest family member
};

// Project an arbitrary affine transform back onto the parameter family of
// the given schema. Composed transforms may leave the family (e.g. rotation
// combined with anisotropic scale); the residual reports the gap.
inline ExtractResult extract_params(const Affine3& a, const ParamSchema& schema) {
  const Eigen::Matrix3d& M = a.linear;
  double alpha = std::atan2(-M(0, 1), M(1, 1));
  double s_len = M.col(0).norm() - 1.0;
  double s_h = M(2, 2) - 1.0;

  ExtractResult r;
  r.theta = Eigen::VectorXd::Zero(schema.n());
  int k = 0;
  for (const auto& e : schema.entries()) {
    if (e.kind != ParamKind::transform) break;
    double v = 0.0;
    if (e.name == kParamXTranslation)
      v = a.translation.x();
    else if (e.name == kParamYTranslation)
      v = a.translation.y();
    else if (e.name == kParamZRotation)
      v = alpha;
    else if (e.name == kParamLengthScale)
      v = s_len;
    else if (e.name == kParamHeightScale)
      v = s_h;
    r.theta[k++] = v;
  }

  Affine3 back = to_affine(r.theta, schema);
  double fro2 = (a.linear - back.linear).squaredNorm() +
                (a.translation - back.translation).squaredNorm();
  r.residual = std::sqrt(fro2);
  return r;
}

}  // namespace kmorph
