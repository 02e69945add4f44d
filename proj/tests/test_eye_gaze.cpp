#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "facecap/error.hpp"
#include "facecap/eye_gaze.hpp"
#include "facecap/synth.hpp"
#include "oracles.hpp"

using namespace facecap;
using test::naive_intersection_area;
using test::random_convex;

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

Projection camera() { return VirtualCamera::frontal(500.0, 0.0).projection(); }
EyeModel eye() { return make_eye_model(Vec3(30.0, 35.0, 70.0)); }

EyeRotation random_rotation(std::mt19937_64& rng, double limit = 0.6) {
  std::uniform_real_distribution<double> u(-limit, limit);
  return {u(rng), u(rng)};
}

}  // namespace

TEST_CASE("projection: principal point, depth law and backprojection") {
  Projection P = Projection::Zero();
  P.leftCols<3>() << 1, 0, 320, 0, 1, 240, 0, 0, 1;
  const Vec2 c = project(P, Vec3(0, 0, 1));
  CHECK(c.x() == 320.0);
  CHECK(c.y() == 240.0);
  const Vec2 near = project(P, Vec3(4, -2, 5)) - c;
  const Vec2 far = project(P, Vec3(4, -2, 10)) - c;
  CHECK((near - 2.0 * far).norm() < 1e-12);
  CHECK_THROWS_AS(project(P, Vec3(1, 1, 0)), Error);

  const Projection K = camera();
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 600.0);
  for (int i = 0; i < 20; ++i) {
    const Vec2 px(u(rng), u(rng));
    const Vec3 x = backproject(K, px, 300.0 + u(rng));
    CHECK((project(K, x) - px).norm() < 1e-9);
  }
}

TEST_CASE("polygon area, convexity and clipping basics") {
  const std::vector<Vec2> sq{{0, 0}, {1, 0}, {1, 1}, {0, 1}};
  std::vector<Vec2> rev(sq.rbegin(), sq.rend());
  CHECK(polygon_signed_area(sq) == doctest::Approx(1.0));
  CHECK(polygon_signed_area(rev) == doctest::Approx(-1.0));
  CHECK(is_convex_polygon(sq));
  CHECK(is_convex_polygon(rev));
  const std::vector<Vec2> dart{{0, 0}, {2, 1}, {0, 2}, {1, 1}};
  CHECK_FALSE(is_convex_polygon(dart));
  std::vector<Vec2> star;
  for (int i = 0; i < 5; ++i) star.emplace_back(std::cos(4.0 * std::numbers::pi * i / 5), std::sin(4.0 * std::numbers::pi * i / 5));
  CHECK_FALSE(is_convex_polygon(star));

  const std::vector<Vec2> shifted{{0.5, 0}, {1.5, 0}, {1.5, 1}, {0.5, 1}};
  CHECK(convex_intersection_area(sq, shifted) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(convex_intersection_area(rev, shifted) == doctest::Approx(0.5).epsilon(1e-12));
  const std::vector<Vec2> far{{5, 5}, {6, 5}, {6, 6}};
  CHECK(convex_intersection_area(sq, far) == 0.0);
  const std::vector<Vec2> inner{{0.25, 0.25}, {0.75, 0.25}, {0.75, 0.75}, {0.25, 0.75}};
  CHECK(convex_intersection_area(sq, inner) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("intersection area is symmetric and matches an independent construction") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int t = 0; t < 20; ++t) {
    const auto a = random_convex(rng, Vec2(u(rng), u(rng)), 2.0);
    const auto b = random_convex(rng, Vec2(u(rng), u(rng)), 2.0);
    REQUIRE(is_convex_polygon(a));
    REQUIRE(is_convex_polygon(b));
    const double ab = convex_intersection_area(a, b);
    const double ba = convex_intersection_area(b, a);
    CHECK(std::abs(ab - ba) <= 1e-12 * std::max(1.0, ab));
    CHECK(std::abs(ab - naive_intersection_area(a, b)) <= 1e-12 * std::max(1.0, ab));
  }
}

TEST_CASE("intersection area matches a Monte-Carlo estimate") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (int t = 0; t < 20;) {
    const auto a = random_convex(rng, Vec2(u(rng), u(rng)), 2.0);
    const auto b = random_convex(rng, Vec2(u(rng), u(rng)), 2.0);
    const double exact = convex_intersection_area(a, b);
    if (exact < 0.5) continue;  // thin overlaps need far more samples for 1%
    ++t;
    // The intersection lies inside both bounding boxes.
    Eigen::AlignedBox2d ba, bb;
    for (const auto& p : a) ba.extend(p);
    for (const auto& p : b) bb.extend(p);
    const Eigen::AlignedBox2d box = ba.intersection(bb);
    std::mt19937_64 mc(100 + static_cast<std::uint64_t>(t));
    std::uniform_real_distribution<double> ux(box.min().x(), box.max().x());
    std::uniform_real_distribution<double> uy(box.min().y(), box.max().y());
    const int N = 1000000;
    int hits = 0;
    for (int i = 0; i < N; ++i) {
      const Vec2 p(ux(mc), uy(mc));
      hits += point_in_convex_polygon(a, p) && point_in_convex_polygon(b, p) ? 1 : 0;
    }
    const double estimate = box.volume() * hits / N;
    CHECK(std::abs(estimate - exact) < 0.01 * exact);
  }
}

TEST_CASE("eye model and overlap ratio") {
  const EyeModel e = eye();
  CHECK(e.pupil_contour_rest.size() == 16);
  CHECK_NOTHROW(e.validate());
  EyeModel bad = e;
  bad.pupil_contour_rest[3] += Vec3(0, 0, 0.1);
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = e;
  bad.pupil_contour_rest.resize(7);
  CHECK_THROWS_AS(bad.validate(), Error);

  const Projection P = camera();
  const EyeRotation r{0.2, -0.1};
  const EyeObservation obs = synthesize_eye_observation(P, e, r);
  CHECK(overlap_ratio(P, e, r, obs) == doctest::Approx(1.0).epsilon(1e-12));
  EyeObservation gone = obs;
  for (auto& p : gone.pupil_polygon_2d) p += Vec2(100.0, 0.0);
  CHECK(overlap_ratio(P, e, r, gone) == 0.0);
  const double part = overlap_ratio(P, e, {0.25, -0.1}, obs);
  CHECK(part > 0.0);
  CHECK(part < 1.0);

  Projection flat = P;
  flat.row(1).setZero();
  CHECK_THROWS_AS(overlap_ratio(flat, e, r, obs), Error);
}

TEST_CASE("eye energy: zero at the truth and naive decomposition") {
  const Projection P = camera();
  const EyeModel e = eye();
  const EyeRotation truth{0.3, 0.15};
  const EyeObservation obs = synthesize_eye_observation(P, e, truth);
  GazeHistory hist{truth, truth};
  const EyeEnergy zero = eye_energy(P, e, truth, obs, hist);
  CHECK(zero.total < 1e-20);

  std::mt19937_64 rng(3);
  for (int t = 0; t < 10; ++t) {
    const EyeRotation r = random_rotation(rng, 0.4);
    const GazeHistory h{random_rotation(rng, 0.4), random_rotation(rng, 0.4)};
    const EyeEnergy en = eye_energy(P, e, r, obs, h, 1.0, 0.5);
    CHECK(std::abs(en.dis + 0.5 * en.smooth - en.total) <= 1e-12 * en.total);

    // Naive: rotation from angle-axis products, explicit homogeneous division.
    const Mat3 R = (Eigen::AngleAxisd(r.yaw, Vec3::UnitY()) * Eigen::AngleAxisd(r.pitch, Vec3::UnitX())).toRotationMatrix();
    const auto proj = [&](const Vec3& x) {
      const Eigen::Vector4d xh(x.x(), x.y(), x.z(), 1.0);
      const Vec3 h = P * xh;
      return Vec2(h.x() / h.z(), h.y() / h.z());
    };
    const Vec2 ic = proj(e.center + R * (e.iris_center_rest - e.center));
    const double iris = (ic - obs.iris_center_2d).squaredNorm();
    std::vector<Vec2> model;
    for (const auto& p : e.pupil_contour_rest) model.push_back(proj(e.center + R * (p - e.center)));
    const double ratio = naive_intersection_area(model, obs.pupil_polygon_2d) / polygon_area(model);
    const double dy = r.yaw - 2.0 * h.prev->yaw + h.prev2->yaw;
    const double dp = r.pitch - 2.0 * h.prev->pitch + h.prev2->pitch;
    const double total = iris + (1.0 - ratio) * (1.0 - ratio) + 0.5 * (dy * dy + dp * dp);
    CHECK(std::abs(en.iris - iris) <= 1e-12 * std::max(1.0, iris));
    CHECK(std::abs(en.total - total) <= 1e-12 * std::max(1.0, total));
  }
}

TEST_CASE("iris term gradient matches central differences") {
  const Projection P = camera();
  const EyeModel e = eye();
  std::mt19937_64 rng(5);
  for (int t = 0; t < 20; ++t) {
    const EyeObservation obs = synthesize_eye_observation(P, e, random_rotation(rng));
    const EyeRotation r = random_rotation(rng);
    const Vec2 g = iris_term_gradient(P, e, r, obs);
    const double h = 1e-6;
    const auto iris = [&](double y, double p) { return eye_energy(P, e, {y, p}, obs, {}).iris; };
    const double gy = (iris(r.yaw + h, r.pitch) - iris(r.yaw - h, r.pitch)) / (2.0 * h);
    const double gp = (iris(r.yaw, r.pitch + h) - iris(r.yaw, r.pitch - h)) / (2.0 * h);
    CHECK(std::abs(gy - g.x()) <= 1e-5 * std::max(1.0, std::abs(g.x())));
    CHECK(std::abs(gp - g.y()) <= 1e-5 * std::max(1.0, std::abs(g.y())));
  }
}

TEST_CASE("gaze recovery from noiseless observations") {
  const Projection P = camera();
  const EyeModel e = eye();
  std::mt19937_64 rng(9);
  for (int t = 0; t < 20; ++t) {
    const EyeRotation truth = random_rotation(rng, 0.8);
    const auto sol = solve_gaze(P, e, synthesize_eye_observation(P, e, truth), {});
    CAPTURE(t);
    CHECK(std::abs(sol.rotation.yaw - truth.yaw) < 0.2 * kDeg);
    CHECK(std::abs(sol.rotation.pitch - truth.pitch) < 0.2 * kDeg);
    CHECK(sol.energy.total <= sol.best_seed_energy);
  }
  const auto rest = solve_gaze(P, e, synthesize_eye_observation(P, e, {}), GazeHistory{EyeRotation{}, EyeRotation{}});
  CHECK(std::abs(rest.rotation.yaw) < 1e-4);
  CHECK(std::abs(rest.rotation.pitch) < 1e-4);
}

TEST_CASE("solver matches a fine grid search on noisy observations") {
  const Projection P = camera();
  const EyeModel e = eye();
  std::mt19937_64 rng(13);
  std::normal_distribution<double> noise(0.0, 0.7);
  for (int t = 0; t < 20; ++t) {
    EyeObservation obs = synthesize_eye_observation(P, e, random_rotation(rng, 0.7));
    obs.iris_center_2d += Vec2(noise(rng), noise(rng));
    for (auto& p : obs.pupil_polygon_2d) p += Vec2(0.3 * noise(rng), 0.3 * noise(rng));
    if (!is_convex_polygon(obs.pupil_polygon_2d)) continue;
    const GazeHistory hist{random_rotation(rng, 0.7), random_rotation(rng, 0.7)};
    const auto sol = solve_gaze(P, e, obs, hist);

    // 1 degree over the whole box, then 0.1 degree within 2 degrees of the best cell.
    const auto energy = [&](double y, double p) { return eye_energy(P, e, {y, p}, obs, hist).total; };
    double best = std::numeric_limits<double>::infinity();
    Vec2 arg = Vec2::Zero();
    for (double y = -kGazeLimit; y <= kGazeLimit; y += kDeg) {
      for (double p = -kGazeLimit; p <= kGazeLimit; p += kDeg) {
        const double v = energy(y, p);
        if (v < best) best = v, arg = Vec2(y, p);
      }
    }
    const Vec2 coarse = arg;
    for (int i = -20; i <= 20; ++i) {
      for (int j = -20; j <= 20; ++j) {
        const double y = std::clamp(coarse.x() + 0.1 * i * kDeg, -kGazeLimit, kGazeLimit);
        const double p = std::clamp(coarse.y() + 0.1 * j * kDeg, -kGazeLimit, kGazeLimit);
        const double v = energy(y, p);
        if (v < best) best = v, arg = Vec2(y, p);
      }
    }
    CAPTURE(t);
    CHECK(std::abs(sol.rotation.yaw - arg.x()) < 0.2 * kDeg);
    CHECK(std::abs(sol.rotation.pitch - arg.y()) < 0.2 * kDeg);
    CHECK(sol.energy.total <= best + 1e-9);
  }
}

TEST_CASE("solution energy is below every lattice seed") {
  const Projection P = camera();
  const EyeModel e = eye();
  const EyeObservation obs = synthesize_eye_observation(P, e, {0.33, -0.21});
  const GazeParams params;
  const auto sol = solve_gaze(P, e, obs, {}, params);
  for (int i = -10; i <= 10; ++i) {
    for (int j = -10; j <= 10; ++j) {
      CHECK(sol.energy.total <= eye_energy(P, e, {i * params.grid_step, j * params.grid_step}, obs, {}).total);
    }
  }
}

TEST_CASE("strong smoothing holds the history") {
  const Projection P = camera();
  const EyeModel e = eye();
  const EyeRotation held{-0.2, 0.1};
  GazeParams params;
  params.alpha_smooth = 1e6;
  const auto sol = solve_gaze(P, e, synthesize_eye_observation(P, e, {0.4, -0.3}), GazeHistory{held, held}, params);
  CHECK(std::abs(sol.rotation.yaw - held.yaw) < 1e-3);
  CHECK(std::abs(sol.rotation.pitch - held.pitch) < 1e-3);
}

TEST_CASE("one pixel of iris noise moves the solution by less than 5 degrees") {
  const Projection P = camera();
  const EyeModel e = eye();
  std::mt19937_64 rng(17);
  for (int t = 0; t < 5; ++t) {
    const EyeObservation obs = synthesize_eye_observation(P, e, random_rotation(rng, 0.5));
    const auto base = solve_gaze(P, e, obs, {});
    for (const Vec2 d : {Vec2(1, 0), Vec2(0, 1), Vec2(-1, 0), Vec2(0, -1)}) {
      EyeObservation moved = obs;
      moved.iris_center_2d += d;
      const auto sol = solve_gaze(P, e, moved, {});
      CHECK(std::abs(sol.rotation.yaw - base.rotation.yaw) < 5.0 * kDeg);
      CHECK(std::abs(sol.rotation.pitch - base.rotation.pitch) < 5.0 * kDeg);
    }
  }
}

TEST_CASE("gaze input errors") {
  const Projection P = camera();
  const EyeModel e = eye();
  EyeObservation obs = synthesize_eye_observation(P, e, {});
  EyeObservation bad = obs;
  bad.pupil_polygon_2d.resize(2);
  CHECK_THROWS_AS(solve_gaze(P, e, bad, {}), Error);
  bad = obs;
  std::swap(bad.pupil_polygon_2d[0], bad.pupil_polygon_2d[5]);
  CHECK_THROWS_AS(solve_gaze(P, e, bad, {}), Error);
  GazeHistory h;
  h.prev2 = EyeRotation{};
  CHECK_THROWS_AS(solve_gaze(P, e, obs, h), Error);
  // Camera looking away: every seed puts the eye behind it.
  Projection behind = P;
  behind.row(2) *= -1.0;
  CHECK_THROWS_AS(solve_gaze(behind, e, obs, {}), Error);
}

TEST_CASE("smoothing term needs both history frames") {
  const Projection P = camera();
  const EyeModel e = eye();
  const EyeObservation obs = synthesize_eye_observation(P, e, {});
  GazeHistory one;
  one.prev = EyeRotation{0.1, 0.1};
  CHECK(eye_energy(P, e, {0.2, 0.0}, obs, one).smooth == 0.0);
  const GazeParams p;
  CHECK(p.alpha_dis == 1.0);
  CHECK(p.alpha_smooth == 0.5);
}
