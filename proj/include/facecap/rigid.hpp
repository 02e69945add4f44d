#pragma once

#include <span>

#include "facecap/geometry.hpp"

namespace facecap {

// Least-squares rigid transform T minimizing sum |T(source_i) - target_i|^2
// (Kabsch, with the reflection case corrected). Throws on fewer than three
// pairs or a collinear configuration.
RigidTransform rigid_align(std::span<const Vec3> source, std::span<const Vec3> target);

// Angle of the relative rotation R_a^T R_b, in radians.
double rotation_angle_between(const Mat3& a, const Mat3& b);

}  // namespace facecap
