#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "kmorph/kinematics.hpp"
#include "kmorph/scene.hpp"

namespace kmorph {

// Pinhole camera, pose maps camera frame (x right, y down, z forward) to world.
struct Camera {
  int width = 0, height = 0;
  double fx = 0, fy = 0, cx = 0, cy = 0;
  Affine3 pose;
  double near_m = 0.3, far_m = 4.0;

  static Camera look_at(int width, int height, double hfov_rad, const Eigen::Vector3d& position,
                        const Eigen::Vector3d& target, double near_m, double far_m) {
    if (!(near_m > 0 && near_m < far_m)) throw std::invalid_argument("camera: need 0 < near < far");
    Camera c;
    c.width = width;
    c.height = height;
    c.fx = c.fy = (width / 2.0) / std::tan(hfov_rad / 2.0);
    c.cx = (width - 1) / 2.0;
    c.cy = (height - 1) / 2.0;
    c.near_m = near_m;
    c.far_m = far_m;
    Eigen::Vector3d fwd = (target - position).normalized();
    Eigen::Vector3d right = fwd.cross(Eigen::Vector3d::UnitZ()).normalized();
    Eigen::Vector3d down = fwd.cross(right);
    c.pose.linear.col(0) = right;
    c.pose.linear.col(1) = down;
    c.pose.linear.col(2) = fwd;
    c.pose.translation = position;
    return c;
  }

  // same view at a resolution divided by `factor`
  Camera downscaled(int factor) const {
    Camera c = *this;
    c.width = width / factor;
    c.height = height / factor;
    c.fx = fx / factor;
    c.fy = fy / factor;
    c.cx = (width / double(factor) - 1.0) / 2.0;
    c.cy = (height / double(factor) - 1.0) / 2.0;
    return c;
  }
};

// Row-major scalar grid. Carries normalized values in (0,1] with 0 =
// background, or metric depths in meters depending on context.
struct DepthImage {
  int width = 0, height = 0;
  std::vector<double> values;

  DepthImage() = default;
  DepthImage(int w, int h) : width(w), height(h), values(std::size_t(w) * h, 0.0) {}

  double& at(int x, int y) { return values[std::size_t(y) * width + x]; }
  double at(int x, int y) const { return values[std::size_t(y) * width + x]; }

  std::size_t occupied_count() const {
    std::size_t n = 0;
    for (double v : values) n += v > 0.0;
    return n;
  }
};

struct PointCloud {
  Eigen::Matrix3Xd points;      // world frame
  std::vector<std::uint8_t> valid;

  std::size_t valid_count() const {
    std::size_t n = 0;
    for (auto v : valid) n += v != 0;
    return n;
  }
};

inline PointCloud apply(const Affine3& a, const PointCloud& cloud) {
  PointCloud out;
  out.valid = cloud.valid;
  out.points = (a.linear * cloud.points).colwise() + a.translation;
  for (Eigen::Index i = 0; i < out.points.cols(); ++i)
    if (!cloud.valid[i]) out.points.col(i) = cloud.points.col(i);
  return out;
}

// normalized value floor; keeps object pixels distinct from background 0
inline constexpr double kDepthEpsilon = 1.0 / 65535.0;

inline double normalize_depth(double z, const Camera& cam) {
  double v = (cam.far_m - z) / (cam.far_m - cam.near_m);
  return std::clamp(v, kDepthEpsilon, 1.0);
}

inline double denormalize_depth(double v, const Camera& cam) {
  return cam.far_m - v * (cam.far_m - cam.near_m);
}

struct RenderOut {
  DepthImage depth;         // normalized
  DepthImage metric_depth;  // meters, 0 = background
  PointCloud cloud;         // backprojection of metric_depth
};

inline PointCloud backproject(const DepthImage& metric, const Camera& cam) {
  PointCloud cloud;
  cloud.points = Eigen::Matrix3Xd::Zero(3, std::size_t(metric.width) * metric.height);
  cloud.valid.assign(std::size_t(metric.width) * metric.height, 0);
  for (int y = 0; y < metric.height; ++y)
    for (int x = 0; x < metric.width; ++x) {
      double z = metric.at(x, y);
      std::size_t i = std::size_t(y) * metric.width + x;
      if (z <= 0.0) continue;
      Eigen::Vector3d p_cam((x - cam.cx) * z / cam.fx, (y - cam.cy) * z / cam.fy, z);
      cloud.points.col(i) = cam.pose.apply(p_cam);
      cloud.valid[i] = 1;
    }
  return cloud;
}

// z-buffer triangle rasterization with perspective-correct depth
inline RenderOut render_mesh(const KinematicModel& model, const Camera& cam) {
  RenderOut out;
  out.depth = DepthImage(cam.width, cam.height);
  out.metric_depth = DepthImage(cam.width, cam.height);
  std::vector<double> zbuf(std::size_t(cam.width) * cam.height,
                           std::numeric_limits<double>::infinity());
  Affine3 world_to_cam = inverse(cam.pose);

  for (const auto& tri : model.triangles) {
    Eigen::Vector3d pc[3] = {world_to_cam.apply(tri.a), world_to_cam.apply(tri.b),
                             world_to_cam.apply(tri.c)};
    // no near-plane clipping; scenes keep the model well inside the frustum
    if (pc[0].z() < 1e-6 || pc[1].z() < 1e-6 || pc[2].z() < 1e-6) continue;
    double sx[3], sy[3], iz[3];
    for (int i = 0; i < 3; ++i) {
      sx[i] = cam.fx * pc[i].x() / pc[i].z() + cam.cx;
      sy[i] = cam.fy * pc[i].y() / pc[i].z() + cam.cy;
      iz[i] = 1.0 / pc[i].z();
    }
    int x0 = std::max(0, int(std::floor(std::min({sx[0], sx[1], sx[2]}))));
    int x1 = std::min(cam.width - 1, int(std::ceil(std::max({sx[0], sx[1], sx[2]}))));
    int y0 = std::max(0, int(std::floor(std::min({sy[0], sy[1], sy[2]}))));
    int y1 = std::min(cam.height - 1, int(std::ceil(std::max({sy[0], sy[1], sy[2]}))));
    double denom = (sx[1] - sx[0]) * (sy[2] - sy[0]) - (sx[2] - sx[0]) * (sy[1] - sy[0]);
    if (std::abs(denom) < 1e-12) continue;  // edge-on triangle
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        double l1 = ((x - sx[0]) * (sy[2] - sy[0]) - (sx[2] - sx[0]) * (y - sy[0])) / denom;
        double l2 = ((sx[1] - sx[0]) * (y - sy[0]) - (x - sx[0]) * (sy[1] - sy[0])) / denom;
        double l0 = 1.0 - l1 - l2;
        if (l0 < 0 || l1 < 0 || l2 < 0) continue;
        double z = 1.0 / (l0 * iz[0] + l1 * iz[1] + l2 * iz[2]);
        if (z < cam.near_m || z > cam.far_m) continue;
        std::size_t i = std::size_t(y) * cam.width + x;
        if (z < zbuf[i]) zbuf[i] = z;
      }
  }

  for (std::size_t i = 0; i < zbuf.size(); ++i)
    if (std::isfinite(zbuf[i])) {
      out.metric_depth.values[i] = zbuf[i];
      out.depth.values[i] = normalize_depth(zbuf[i], cam);
    }
  out.cloud = backproject(out.metric_depth, cam);
  return out;
}

// Project valid points, splat to the nearest pixel, nearest depth wins.
// Ties within 1e-9 resolve to the lowest point index. Output in meters,
// 0 = background.
inline DepthImage point_cloud_to_depth_metric(const PointCloud& cloud, const Camera& cam) {
  DepthImage img(cam.width, cam.height);
  std::vector<double> zbuf(img.values.size(), std::numeric_limits<double>::infinity());
  Affine3 world_to_cam = inverse(cam.pose);
  for (Eigen::Index i = 0; i < cloud.points.cols(); ++i) {
    if (!cloud.valid[i]) continue;
    Eigen::Vector3d p = world_to_cam.apply(cloud.points.col(i));
    if (p.z() < 1e-6) continue;
    int x = int(std::lround(cam.fx * p.x() / p.z() + cam.cx));
    int y = int(std::lround(cam.fy * p.y() / p.z() + cam.cy));
    if (x < 0 || x >= cam.width || y < 0 || y >= cam.height) continue;
    double z = std::clamp(p.z(), cam.near_m, cam.far_m);
    std::size_t k = std::size_t(y) * cam.width + x;
    if (z < zbuf[k] - 1e-9) zbuf[k] = z;
  }
  for (std::size_t k = 0; k < zbuf.size(); ++k)
    if (std::isfinite(zbuf[k])) img.values[k] = zbuf[k];
  return img;
}

inline DepthImage point_cloud_to_depth(const PointCloud& cloud, const Camera& cam) {
  DepthImage img = point_cloud_to_depth_metric(cloud, cam);
  for (double& v : img.values)
    if (v > 0.0) v = normalize_depth(v, cam);
  return img;
}

// Nearest-sample downsampling: each output pixel takes the largest
// normalized (nearest) non-background value in its block, so background
// zeros never bleed into object depths.
inline DepthImage downsample(const DepthImage& d, int factor) {
  if (factor < 1 || d.width % factor != 0 || d.height % factor != 0)
    throw std::invalid_argument("downsample: factor must divide width and height");
  DepthImage out(d.width / factor, d.height / factor);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x) {
      double best = 0.0;
      for (int dy = 0; dy < factor; ++dy)
        for (int dx = 0; dx < factor; ++dx)
          best = std::max(best, d.at(x * factor + dx, y * factor + dy));
      out.at(x, y) = best;
    }
  return out;
}

// 16-bit binary PGM, value = round(65535 * normalized)
inline void write_pgm16(const DepthImage& d, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "P5\n" << d.width << " " << d.height << "\n65535\n";
  for (double v : d.values) {
    auto q = std::uint16_t(std::lround(std::clamp(v, 0.0, 1.0) * 65535.0));
    char bytes[2] = {char(q >> 8), char(q & 0xff)};  // PGM is big-endian
    out.write(bytes, 2);
  }
}

}  // namespace kmorph
