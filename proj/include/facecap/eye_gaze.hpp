#pragma once

#include <cstddef>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "facecap/geometry.hpp"

namespace facecap {

using Projection = Eigen::Matrix<double, 3, 4>;

// Perspective division of P * [x; 1]. Throws when |w| < 1e-12.
Vec2 project(const Projection& P, const Vec3& x);
// Point with pixel `u` and homogeneous depth w = d (the camera z for P = K[R|t]).
Vec3 backproject(const Projection& P, const Vec2& u, double d);

// Polygons are vertex lists in order (either winding).
double polygon_signed_area(std::span<const Vec2> poly);
double polygon_area(std::span<const Vec2> poly);
bool is_convex_polygon(std::span<const Vec2> poly);
bool point_in_convex_polygon(std::span<const Vec2> poly, const Vec2& p);
// Sutherland-Hodgman: `subject` clipped against convex `clip`.
std::vector<Vec2> clip_convex_polygon(std::span<const Vec2> subject, std::span<const Vec2> clip);
double convex_intersection_area(std::span<const Vec2> a, std::span<const Vec2> b);

struct EyeModel {
  Vec3 center = Vec3::Zero();            // rotation pivot, mm
  Vec3 iris_center_rest = Vec3::Zero();  // on the eyeball surface
  std::vector<Vec3> pupil_contour_rest;  // ordered ring on the eyeball surface
  double radius = 12.0;

  void validate() const;
};

// Eye looking along +z at rest; pupil ring of M points at `pupil_radius`
// (mm, measured in the tangent plane of the iris centre).
EyeModel make_eye_model(const Vec3& center, double radius = 12.0, double pupil_radius = 3.0, std::size_t contour_points = 16);

struct EyeRotation {
  double yaw = 0.0;    // about +y
  double pitch = 0.0;  // about +x
};
inline constexpr double kGazeLimit = 0.9;  // rad, per axis

// Ry(yaw) * Rx(pitch).
Mat3 eye_rotation_matrix(const EyeRotation& r);
// center + R (p - center)
Vec3 rotate_about_eye(const EyeModel& eye, const EyeRotation& r, const Vec3& p);

struct EyeObservation {
  Vec2 iris_center_2d = Vec2::Zero();
  std::vector<Vec2> pupil_polygon_2d;

  // >= 3 vertices, finite, convex, non-degenerate.
  void validate() const;
};

// Noiseless observation of the eye at rotation `r`.
EyeObservation synthesize_eye_observation(const Projection& P, const EyeModel& eye, const EyeRotation& r);

std::vector<Vec2> project_pupil(const Projection& P, const EyeModel& eye, const EyeRotation& r);

// S_overlap / S_pupil with S_pupil the projected model pupil's area. Throws
// when that area is below 1e-9 px^2.
double overlap_ratio(const Projection& P, const EyeModel& eye, const EyeRotation& r, const EyeObservation& obs);

struct GazeHistory {
  std::optional<EyeRotation> prev;   // t-1
  std::optional<EyeRotation> prev2;  // t-2
};

struct EyeEnergy {
  double iris = 0.0;     // squared reprojection error, px^2
  double overlap = 0.0;  // (1 - S_overlap / S_pupil)^2
  double dis = 0.0;      // iris + alpha_dis * overlap
  double smooth = 0.0;   // squared second difference of (yaw, pitch); 0 without full history
  double total = 0.0;    // dis + alpha_smooth * smooth
};

EyeEnergy eye_energy(const Projection& P, const EyeModel& eye, const EyeRotation& r, const EyeObservation& obs,
                     const GazeHistory& history, double alpha_dis = 1.0, double alpha_smooth = 0.5);

// d iris / d (yaw, pitch).
Vec2 iris_term_gradient(const Projection& P, const EyeModel& eye, const EyeRotation& r, const EyeObservation& obs);

struct GazeParams {
  double alpha_dis = 1.0;
  double alpha_smooth = 0.5;
  double grid_step = 5.0 * std::numbers::pi / 180.0;  // seed lattice
  double tolerance = 1e-4;                           // simplex size, rad
  int max_iterations = 500;
};

struct GazeSolution {
  EyeRotation rotation;
  EyeEnergy energy;
  double best_seed_energy = 0.0;
  int iterations = 0;
};

// Lattice seed over the gimbal box, then Nelder-Mead refinement.
GazeSolution solve_gaze(const Projection& P, const EyeModel& eye, const EyeObservation& obs, const GazeHistory& history,
                        const GazeParams& params = {});

}  // namespace facecap
