#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "facecap/geometry.hpp"
#include "facecap/rig.hpp"

namespace facecap {

// Procedural head family: an ellipsoidal template deformed by smooth
// low-frequency displacement fields along the template normals.
struct HeadTemplateConfig {
  Vec3 radii{75.0, 100.0, 90.0};  // mm; +z is the face direction, +y up
  int rings = 20;
  int segments = 26;
  double mode_scale = 6.0;  // standard deviation (mm) of the leading field
};

struct HeadFamily {
  TriMesh template_mesh;
  std::vector<Eigen::VectorXd> fields;        // one 3V displacement per mode
  std::vector<double> field_sigma;            // per-mode coefficient std-dev
  std::vector<Eigen::VectorXd> coefficients;  // one num_modes vector per head
  std::vector<TriMesh> heads;
};

// Throws if count < num_modes + 1.
HeadFamily make_head_family(std::uint64_t base_seed, std::size_t count, std::size_t num_modes,
                            const HeadTemplateConfig& config = {});

// template + sum_k coeffs[k] * fields[k]
TriMesh synthesize_head(const TriMesh& template_mesh, const std::vector<Eigen::VectorXd>& fields,
                        const Eigen::VectorXd& coeffs);

struct SynthHeadParams {
  std::uint64_t seed = 0;
  Eigen::VectorXd identity_coeffs;
  Eigen::VectorXd expression_coeffs;  // K entries in [0, 1]
  RigidTransform pose;
};

// Pinhole camera. `pose` maps camera coordinates (x right, y down, z forward)
// to world coordinates.
struct VirtualCamera {
  Mat3 intrinsics = Mat3::Identity();
  int width = 640;
  int height = 480;
  RigidTransform pose;
  double noise_sigma = 0.5;  // mm, along the viewing ray

  // 640x480 Kinect-class intrinsics, placed on +z looking toward the origin.
  static VirtualCamera frontal(double distance = 500.0, double noise_sigma = 0.5);

  Eigen::Matrix<double, 3, 4> projection() const;  // world -> pixels
  Vec3 center() const { return pose.translation; }
  void validate() const;
};

struct DepthScan {
  PointCloud cloud;
  std::vector<std::size_t> face_index;  // hit triangle per point
  std::vector<std::size_t> pixel_index;  // v * width + u per point
  std::vector<bool> boundary;            // a missing pixel lies within one pixel
  std::string warning;
};

// Points with a missing pixel within `band` pixels (Chebyshev distance);
// matches onto these are unreliable near silhouettes.
std::vector<bool> scan_boundary_mask(const DepthScan& scan, int width, int height, int band);

// One ray per pixel (pixel centres at integer coordinates), nearest hit only.
// Normals come from the hit triangle, oriented toward the camera.
DepthScan render_depth_scan(const TriMesh& mesh, const VirtualCamera& cam, std::uint64_t noise_seed = 0);

// Region layout shared by every synthetic rig; directions are measured on the
// head's bounding ellipsoid as (azimuth, elevation) in radians.
struct FaceRegion {
  std::string name;
  double azimuth;
  double elevation;
};
const std::vector<FaceRegion>& face_regions();
// Region id (index into face_regions()) of each ARKit shape name.
std::size_t region_of_shape(std::string_view name);

struct RigConfig {
  double region_radius = 0.32;     // rad, cut-off around each region centre
  double min_bump_radius = 0.10;   // rad
  double max_bump_radius = 0.20;   // rad
  double min_amplitude = 5.0;      // mm
  double max_amplitude = 9.0;      // mm
  std::size_t dense_count = 0;     // 0: every front-facing vertex
  double dense_min_facing = 0.2;   // cos of angle to +z on the ellipsoid
};

BlendshapeRig make_rig_from_head(const TriMesh& head, std::uint64_t seed, const RigConfig& config = {});

// (azimuth, elevation) of every vertex on the mesh's bounding ellipsoid.
std::vector<Vec2> ellipsoid_directions(const TriMesh& mesh);

// Cubic B-spline curves with control values in [0, 1]; frames x K.
Eigen::MatrixXd make_weight_curves(std::size_t frames, std::size_t shapes, std::uint64_t seed,
                                   double knot_spacing = 12.0, double active_fraction = 0.5);

}  // namespace facecap
