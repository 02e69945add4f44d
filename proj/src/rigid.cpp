#include "facecap/rigid.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/SVD>

#include "facecap/error.hpp"

namespace facecap {

RigidTransform rigid_align(std::span<const Vec3> source, std::span<const Vec3> target) {
  if (source.size() != target.size()) throw Error("rigid_align: point counts differ");
  if (source.size() < 3) throw Error("rigid_align: need at least 3 point pairs");

  const double n = static_cast<double>(source.size());
  Vec3 cs = Vec3::Zero();
  Vec3 ct = Vec3::Zero();
  for (std::size_t i = 0; i < source.size(); ++i) {
    cs += source[i];
    ct += target[i];
  }
  cs /= n;
  ct /= n;

  Mat3 cov = Mat3::Zero();
  Mat3 scatter = Mat3::Zero();
  for (std::size_t i = 0; i < source.size(); ++i) {
    const Vec3 s = source[i] - cs;
    cov += (target[i] - ct) * s.transpose();
    scatter += s * s.transpose();
  }

  // Collinear (or coincident) sources leave the rotation about the line free.
  Eigen::JacobiSVD<Mat3> scatter_svd(scatter);
  const Vec3 sv = scatter_svd.singularValues();
  if (!(sv[0] > 0.0) || sv[1] <= 1e-12 * sv[0]) throw Error("rigid_align: source points are collinear");

  Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 csv = svd.singularValues();
  if (!(csv[0] > 0.0) || csv[1] <= 1e-12 * csv[0]) throw Error("rigid_align: rank-deficient cross-covariance");

  const Mat3& U = svd.matrixU();
  const Mat3& V = svd.matrixV();
  Mat3 D = Mat3::Identity();
  if ((U * V.transpose()).determinant() < 0.0) D(2, 2) = -1.0;

  RigidTransform T;
  T.rotation = U * D * V.transpose();
  T.translation = ct - T.rotation * cs;
  return T;
}

double rotation_angle_between(const Mat3& a, const Mat3& b) {
  const Mat3 rel = a.transpose() * b;
  const double c = std::clamp((rel.trace() - 1.0) / 2.0, -1.0, 1.0);
  // acos loses precision near zero; use the skew part there.
  const Vec3 skew(rel(2, 1) - rel(1, 2), rel(0, 2) - rel(2, 0), rel(1, 0) - rel(0, 1));
  return std::atan2(0.5 * skew.norm(), c);
}

}  // namespace facecap
