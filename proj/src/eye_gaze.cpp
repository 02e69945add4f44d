#include "facecap/eye_gaze.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include <Eigen/LU>

#include "facecap/error.hpp"

namespace facecap {

namespace {

double cross2(const Vec2& a, const Vec2& b) { return a.x() * b.y() - a.y() * b.x(); }

std::vector<Vec2> ccw(std::span<const Vec2> poly) {
  std::vector<Vec2> out(poly.begin(), poly.end());
  if (polygon_signed_area(out) < 0.0) std::reverse(out.begin(), out.end());
  return out;
}

// Eye points must be in front of the camera (w > 0).
Vec2 project_front(const Projection& P, const Vec3& x) {
  const Vec3 h = P.leftCols<3>() * x + P.col(3);
  if (!(h.z() > 1e-12)) throw Error("eye point is behind the camera");
  return Vec2(h.x() / h.z(), h.y() / h.z());
}

Mat3 rot_y(double a) {
  Mat3 R;
  R << std::cos(a), 0, std::sin(a), 0, 1, 0, -std::sin(a), 0, std::cos(a);
  return R;
}

Mat3 rot_x(double a) {
  Mat3 R;
  R << 1, 0, 0, 0, std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a);
  return R;
}

}  // namespace

Vec2 project(const Projection& P, const Vec3& x) {
  const Vec3 h = P.leftCols<3>() * x + P.col(3);
  if (!(std::abs(h.z()) >= 1e-12)) throw Error("project: point lies on the camera plane");
  return Vec2(h.x() / h.z(), h.y() / h.z());
}

Vec3 backproject(const Projection& P, const Vec2& u, double d) {
  const Eigen::PartialPivLU<Mat3> lu(P.leftCols<3>());
  if (std::abs(lu.determinant()) < 1e-12) throw Error("backproject: singular projection");
  return lu.solve(d * Vec3(u.x(), u.y(), 1.0) - P.col(3));
}

double polygon_signed_area(std::span<const Vec2> poly) {
  double a = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) a += cross2(poly[i], poly[(i + 1) % poly.size()]);
  return 0.5 * a;
}

double polygon_area(std::span<const Vec2> poly) { return std::abs(polygon_signed_area(poly)); }

bool is_convex_polygon(std::span<const Vec2> poly) {
  const std::size_t n = poly.size();
  if (n < 3) return false;
  int sign = 0;
  double turning = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 e0 = poly[(i + 1) % n] - poly[i];
    const Vec2 e1 = poly[(i + 2) % n] - poly[(i + 1) % n];
    if (e0.squaredNorm() == 0.0) return false;
    const double c = cross2(e0, e1);
    if (c != 0.0) {
      const int s = c > 0.0 ? 1 : -1;
      if (sign != 0 && s != sign) return false;
      sign = s;
    }
    turning += std::atan2(c, e0.dot(e1));
  }
  // A star polygon turns consistently but more than once.
  return sign != 0 && std::abs(std::abs(turning) - 2.0 * std::numbers::pi) < 1e-6;
}

bool point_in_convex_polygon(std::span<const Vec2> poly, const Vec2& p) {
  const double s = polygon_signed_area(poly) >= 0.0 ? 1.0 : -1.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    if (s * cross2(poly[(i + 1) % poly.size()] - poly[i], p - poly[i]) < 0.0) return false;
  }
  return true;
}

std::vector<Vec2> clip_convex_polygon(std::span<const Vec2> subject, std::span<const Vec2> clip) {
  const std::vector<Vec2> c = ccw(clip);
  std::vector<Vec2> out(subject.begin(), subject.end());
  for (std::size_t e = 0; e < c.size() && !out.empty(); ++e) {
    const Vec2 a = c[e];
    const Vec2 b = c[(e + 1) % c.size()];
    const Vec2 ab = b - a;
    const std::vector<Vec2> in = std::move(out);
    out.clear();
    for (std::size_t i = 0; i < in.size(); ++i) {
      const Vec2& p = in[i];
      const Vec2& q = in[(i + 1) % in.size()];
      const double sp = cross2(ab, p - a);
      const double sq = cross2(ab, q - a);
      if (sp >= 0.0) out.push_back(p);
      if ((sp >= 0.0) != (sq >= 0.0)) out.push_back(p + (sp / (sp - sq)) * (q - p));
    }
  }
  return out;
}

double convex_intersection_area(std::span<const Vec2> a, std::span<const Vec2> b) {
  const auto inter = clip_convex_polygon(a, b);
  return inter.size() < 3 ? 0.0 : polygon_area(inter);
}

void EyeModel::validate() const {
  if (!(radius > 0.0)) throw Error("EyeModel: radius must be positive");
  if (pupil_contour_rest.size() < 8) throw Error("EyeModel: pupil contour needs at least 8 points");
  const auto on_sphere = [&](const Vec3& p) { return std::abs((p - center).norm() - radius) <= 1e-6; };
  if (!on_sphere(iris_center_rest)) throw Error("EyeModel: iris centre is not on the eyeball");
  for (const auto& p : pupil_contour_rest) {
    if (!on_sphere(p)) throw Error("EyeModel: pupil contour point is not on the eyeball");
  }
}

EyeModel make_eye_model(const Vec3& center, double radius, double pupil_radius, std::size_t contour_points) {
  if (!(pupil_radius > 0.0 && pupil_radius < radius)) throw Error("make_eye_model: need 0 < pupil_radius < radius");
  EyeModel eye;
  eye.center = center;
  eye.radius = radius;
  eye.iris_center_rest = center + Vec3(0.0, 0.0, radius);
  const double phi = std::asin(pupil_radius / radius);
  for (std::size_t i = 0; i < contour_points; ++i) {
    const double t = 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(contour_points);
    const Vec3 d(std::sin(phi) * std::cos(t), std::sin(phi) * std::sin(t), std::cos(phi));
    eye.pupil_contour_rest.push_back(center + radius * d);
  }
  eye.validate();
  return eye;
}

Mat3 eye_rotation_matrix(const EyeRotation& r) { return rot_y(r.yaw) * rot_x(r.pitch); }

Vec3 rotate_about_eye(const EyeModel& eye, const EyeRotation& r, const Vec3& p) {
  return eye.center + eye_rotation_matrix(r) * (p - eye.center);
}

void EyeObservation::validate() const {
  if (!iris_center_2d.allFinite()) throw Error("EyeObservation: non-finite iris centre");
  if (pupil_polygon_2d.size() < 3) throw Error("EyeObservation: pupil polygon needs at least 3 vertices");
  for (const auto& p : pupil_polygon_2d) {
    if (!p.allFinite()) throw Error("EyeObservation: non-finite pupil vertex");
  }
  if (!is_convex_polygon(pupil_polygon_2d)) throw Error("EyeObservation: pupil polygon is not convex");
  if (polygon_area(pupil_polygon_2d) < 1e-9) throw Error("EyeObservation: degenerate pupil polygon");
}

std::vector<Vec2> project_pupil(const Projection& P, const EyeModel& eye, const EyeRotation& r) {
  const Mat3 R = eye_rotation_matrix(r);
  std::vector<Vec2> out;
  out.reserve(eye.pupil_contour_rest.size());
  for (const auto& p : eye.pupil_contour_rest) out.push_back(project_front(P, eye.center + R * (p - eye.center)));
  return out;
}

EyeObservation synthesize_eye_observation(const Projection& P, const EyeModel& eye, const EyeRotation& r) {
  EyeObservation obs;
  obs.iris_center_2d = project_front(P, rotate_about_eye(eye, r, eye.iris_center_rest));
  obs.pupil_polygon_2d = project_pupil(P, eye, r);
  return obs;
}

double overlap_ratio(const Projection& P, const EyeModel& eye, const EyeRotation& r, const EyeObservation& obs) {
  const std::vector<Vec2> model = ccw(project_pupil(P, eye, r));
  const double area = polygon_area(model);
  if (!(area >= 1e-9)) throw Error("overlap_ratio: projected pupil is degenerate");
  return std::min(1.0, convex_intersection_area(model, obs.pupil_polygon_2d) / area);
}

EyeEnergy eye_energy(const Projection& P, const EyeModel& eye, const EyeRotation& r, const EyeObservation& obs,
                     const GazeHistory& history, double alpha_dis, double alpha_smooth) {
  EyeEnergy e;
  e.iris = (project_front(P, rotate_about_eye(eye, r, eye.iris_center_rest)) - obs.iris_center_2d).squaredNorm();
  const double miss = 1.0 - overlap_ratio(P, eye, r, obs);
  e.overlap = miss * miss;
  e.dis = e.iris + alpha_dis * e.overlap;
  if (history.prev && history.prev2) {
    const double dy = r.yaw - 2.0 * history.prev->yaw + history.prev2->yaw;
    const double dp = r.pitch - 2.0 * history.prev->pitch + history.prev2->pitch;
    e.smooth = dy * dy + dp * dp;
  }
  e.total = e.dis + alpha_smooth * e.smooth;
  return e;
}

Vec2 iris_term_gradient(const Projection& P, const EyeModel& eye, const EyeRotation& r, const EyeObservation& obs) {
  const Vec3 q = eye.iris_center_rest - eye.center;
  const Vec3 x = eye.center + eye_rotation_matrix(r) * q;
  const Vec3 h = P.leftCols<3>() * x + P.col(3);
  const Vec2 res(h.x() / h.z() - obs.iris_center_2d.x(), h.y() / h.z() - obs.iris_center_2d.y());
  Eigen::Matrix<double, 2, 3> dpi;
  dpi << 1.0 / h.z(), 0.0, -h.x() / (h.z() * h.z()), 0.0, 1.0 / h.z(), -h.y() / (h.z() * h.z());
  Mat3 dRy;
  dRy << -std::sin(r.yaw), 0, std::cos(r.yaw), 0, 0, 0, -std::cos(r.yaw), 0, -std::sin(r.yaw);
  Mat3 dRx;
  dRx << 0, 0, 0, 0, -std::sin(r.pitch), -std::cos(r.pitch), 0, std::cos(r.pitch), -std::sin(r.pitch);
  const Eigen::Matrix<double, 2, 3> J = dpi * P.leftCols<3>();
  const Vec2 dyaw = J * (dRy * rot_x(r.pitch) * q);
  const Vec2 dpitch = J * (rot_y(r.yaw) * dRx * q);
  return Vec2(2.0 * res.dot(dyaw), 2.0 * res.dot(dpitch));
}

GazeSolution solve_gaze(const Projection& P, const EyeModel& eye, const EyeObservation& obs, const GazeHistory& history,
                        const GazeParams& params) {
  eye.validate();
  obs.validate();
  if (history.prev2 && !history.prev) throw Error("solve_gaze: history has t-2 without t-1");
  if (!(params.grid_step > 0.0) || !(params.tolerance > 0.0)) throw Error("solve_gaze: grid_step and tolerance must be positive");

  const auto f = [&](const Vec2& x) {
    if (std::abs(x.x()) > kGazeLimit || std::abs(x.y()) > kGazeLimit) return std::numeric_limits<double>::infinity();
    try {
      return eye_energy(P, eye, {x.x(), x.y()}, obs, history, params.alpha_dis, params.alpha_smooth).total;
    } catch (const Error&) {
      return std::numeric_limits<double>::infinity();
    }
  };

  Vec2 best = Vec2::Zero();
  double best_f = std::numeric_limits<double>::infinity();
  const int steps = static_cast<int>(std::floor(kGazeLimit / params.grid_step + 1e-9));
  for (int i = -steps; i <= steps; ++i) {
    for (int j = -steps; j <= steps; ++j) {
      const Vec2 x(i * params.grid_step, j * params.grid_step);
      const double v = f(x);
      if (v < best_f) best_f = v, best = x;
    }
  }
  if (!std::isfinite(best_f)) throw Error("solve_gaze: every seed projects behind the camera");

  GazeSolution sol;
  sol.best_seed_energy = best_f;
  // Nelder-Mead with the standard coefficients.
  std::array<Vec2, 3> s{best, best + Vec2(0.5 * params.grid_step, 0.0), best + Vec2(0.0, 0.5 * params.grid_step)};
  std::array<double, 3> fs{best_f, f(s[1]), f(s[2])};
  for (sol.iterations = 0; sol.iterations < params.max_iterations; ++sol.iterations) {
    std::array<int, 3> o{0, 1, 2};
    std::sort(o.begin(), o.end(), [&](int a, int b) { return fs[static_cast<std::size_t>(a)] < fs[static_cast<std::size_t>(b)]; });
    const std::array<Vec2, 3> ss{s[static_cast<std::size_t>(o[0])], s[static_cast<std::size_t>(o[1])], s[static_cast<std::size_t>(o[2])]};
    const std::array<double, 3> ff{fs[static_cast<std::size_t>(o[0])], fs[static_cast<std::size_t>(o[1])], fs[static_cast<std::size_t>(o[2])]};
    s = ss;
    fs = ff;
    const double size = std::max((s[1] - s[0]).norm(), (s[2] - s[0]).norm());
    if (size < params.tolerance) break;

    const Vec2 c = 0.5 * (s[0] + s[1]);
    const Vec2 xr = c + (c - s[2]);
    const double fr = f(xr);
    if (fr < fs[0]) {
      const Vec2 xe = c + 2.0 * (c - s[2]);
      const double fe = f(xe);
      if (fe < fr) {
        s[2] = xe, fs[2] = fe;
      } else {
        s[2] = xr, fs[2] = fr;
      }
    } else if (fr < fs[1]) {
      s[2] = xr, fs[2] = fr;
    } else {
      const bool outside = fr < fs[2];
      const Vec2 xc = outside ? c + 0.5 * (xr - c) : c + 0.5 * (s[2] - c);
      const double fc = f(xc);
      if (fc < (outside ? fr : fs[2])) {
        s[2] = xc, fs[2] = fc;
      } else {
        for (std::size_t k = 1; k < 3; ++k) {
          s[k] = s[0] + 0.5 * (s[k] - s[0]);
          fs[k] = f(s[k]);
        }
      }
    }
  }
  std::size_t arg = 0;
  for (std::size_t k = 1; k < 3; ++k) {
    if (fs[k] < fs[arg]) arg = k;
  }
  sol.rotation = {std::clamp(s[arg].x(), -kGazeLimit, kGazeLimit), std::clamp(s[arg].y(), -kGazeLimit, kGazeLimit)};
  sol.energy = eye_energy(P, eye, sol.rotation, obs, history, params.alpha_dis, params.alpha_smooth);
  return sol;
}

}  // namespace facecap
