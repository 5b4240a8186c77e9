#include <catch2/catch_amalgamated.hpp>

#include "kmorph/eval.hpp"
#include "kmorph/scene.hpp"

using namespace kmorph;

namespace {

struct Aabb {
  Eigen::Vector3d lo, hi;
};

Aabb bounds(const KinematicModel& m) {
  Aabb b{Eigen::Vector3d::Constant(1e30), Eigen::Vector3d::Constant(-1e30)};
  for (const auto& t : m.triangles)
    for (const auto* p : {&t.a, &t.b, &t.c}) {
      b.lo = b.lo.cwiseMin(*p);
      b.hi = b.hi.cwiseMax(*p);
    }
  return b;
}

MorphParams params_of(const TaskDef& task, std::initializer_list<double> theta,
                      std::initializer_list<double> gamma = {}) {
  MorphParams p = zero_params(task);
  int i = 0;
  for (double v : theta) p.theta[i++] = v;
  i = 0;
  for (double v : gamma) p.gamma[i++] = v;
  return p;
}

}  // namespace

TEST_CASE("box prototype geometry") {
  auto task = make_task("box_a");
  auto proto = prototype(task);
  REQUIRE_FALSE(proto.triangles.empty());
  auto b = bounds(proto);
  CHECK(b.lo.isApprox(Eigen::Vector3d(-0.15, -0.15, 0.0), 1e-12));
  CHECK(b.hi.isApprox(Eigen::Vector3d(0.15, 0.15, 0.3), 1e-12));

  // prototype(task) = instantiate(task, 0), byte-identical
  auto inst = instantiate(task, zero_params(task));
  REQUIRE(inst.triangles.size() == proto.triangles.size());
  for (std::size_t i = 0; i < inst.triangles.size(); ++i) {
    CHECK(inst.triangles[i].a == proto.triangles[i].a);
    CHECK(inst.triangles[i].b == proto.triangles[i].b);
    CHECK(inst.triangles[i].c == proto.triangles[i].c);
  }
}

TEST_CASE("box translation shifts every vertex") {
  auto task = make_task("box_a");
  auto proto = prototype(task);
  auto moved = instantiate(task, params_of(task, {0.4, 0.4}));
  Eigen::Vector3d shift(0.4, 0.4, 0.0);
  for (std::size_t i = 0; i < proto.triangles.size(); ++i)
    CHECK((moved.triangles[i].a - proto.triangles[i].a - shift).norm() < 1e-12);
}

TEST_CASE("door configuration offsets") {
  auto task = make_task("door");
  auto model = instantiate(task, params_of(task, {0, 0, 0}, {-0.4, 0.2, 0.0, 0.1}));
  auto b = bounds(model);
  // panel height 2.0 - 0.4; hinge edge fixed, free edge moved out by 0.2
  CHECK(b.hi.z() == Catch::Approx(1.6).margin(1e-12));
  CHECK(b.lo.x() == Catch::Approx(-0.45).margin(1e-12));
  CHECK(b.hi.x() == Catch::Approx(0.45 + 0.2).margin(1e-12));

  // handle bar center raised to 1.1 m
  double handle_lo = 1e30, handle_hi = -1e30;
  for (const auto& t : model.triangles)
    for (const auto* p : {&t.a, &t.b, &t.c})
      if (p->y() < -0.026) {  // off the panel face
        handle_lo = std::min(handle_lo, p->z());
        handle_hi = std::max(handle_hi, p->z());
      }
  CHECK((handle_lo + handle_hi) / 2.0 == Catch::Approx(1.1).margin(1e-12));
}

TEST_CASE("door handle stays on the panel") {
  auto task = make_task("door");
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    auto p = sample_params(task.schema, rng);
    p.theta.setZero();  // the attachment property is about gamma
    auto model = instantiate(task, p);
    double panel_max_x = -1e30, handle_max_x = -1e30, handle_min_x = 1e30;
    for (const auto& t : model.triangles)
      for (const auto* v : {&t.a, &t.b, &t.c}) {
        if (v->y() < -0.026) {
          handle_max_x = std::max(handle_max_x, v->x());
          handle_min_x = std::min(handle_min_x, v->x());
        } else {
          panel_max_x = std::max(panel_max_x, v->x());
        }
      }
    CHECK(handle_max_x <= panel_max_x + 1e-12);
    CHECK(handle_min_x >= -0.45 - 1e-12);
  }
}

TEST_CASE("degenerate door geometry rejected") {
  auto task = make_task("door");
  auto p = zero_params(task);
  p.gamma[1] = -0.95;  // width offset past the panel width
  CHECK_THROWS_AS(instantiate(task, p), std::invalid_argument);
}

TEST_CASE("sample_params") {
  SECTION("degenerate range always returns the bound") {
    ParamSchema schema("t", {{"x_translation", ParamKind::transform, 0.0, 0.0, "m"}});
    Rng rng(1);
    for (int i = 0; i < 10; ++i) CHECK(sample_params(schema, rng).theta[0] == 0.0);
  }
  SECTION("same seed gives the same sequence") {
    auto schema = make_task("box_c").schema;
    Rng a(42), b(42);
    for (int i = 0; i < 50; ++i)
      CHECK(sample_params(schema, a).theta == sample_params(schema, b).theta);
  }
  SECTION("uniform moments") {
    auto schema = make_task("box_a").schema;
    Rng rng(3);
    const int n = 100000;
    Eigen::Vector2d sum = Eigen::Vector2d::Zero();
    double lo = 1e30, hi = -1e30;
    for (int i = 0; i < n; ++i) {
      auto p = sample_params(schema, rng);
      sum += p.theta;
      lo = std::min(lo, p.theta.minCoeff());
      hi = std::max(hi, p.theta.maxCoeff());
    }
    // mean within 3 sigma of the midpoint, range respected
    double sigma = (0.8 / std::sqrt(12.0)) / std::sqrt(double(n));
    CHECK(std::abs(sum[0] / n) < 3 * sigma);
    CHECK(std::abs(sum[1] / n) < 3 * sigma);
    CHECK(lo >= -0.4);
    CHECK(hi <= 0.4);
  }
}

TEST_CASE("morphing identity for box C") {
  auto task = make_task("box_c");
  Rng rng(11);
  const double spacing = 0.02;
  auto proto_pts = surface_samples(prototype(task), spacing);
  for (int i = 0; i < 10; ++i) {
    auto params = sample_params(task.schema, rng);
    auto inst = instantiate(task, params);
    auto pts = surface_samples(inst, spacing);
    Affine3 undo = inverse(to_affine(params.theta, task.schema));
    for (auto& p : pts) p = undo.apply(p);
    CHECK(chamfer(pts, proto_pts) < 2 * spacing);
  }
}

TEST_CASE("mesh export") {
  auto model = prototype(make_task("box_a"));
  write_mesh_off(model, "box_a.off");
  std::ifstream in("box_a.off");
  std::string header;
  in >> header;
  CHECK(header == "OFF");
}
