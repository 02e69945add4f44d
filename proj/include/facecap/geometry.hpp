#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace facecap {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Face = std::array<std::uint32_t, 3>;

// Indexed triangle mesh. Positions are in millimeters by convention.
// Normals are either empty or one unit vector per vertex.
struct TriMesh {
  std::vector<Vec3> vertices;
  std::vector<Face> faces;
  std::vector<Vec3> normals;

  std::size_t vertex_count() const { return vertices.size(); }
  std::size_t face_count() const { return faces.size(); }
  bool has_normals() const { return !normals.empty(); }

  // Throws if a face index is out of range or the normal count is wrong.
  void validate() const;
};

struct PointCloud {
  std::vector<Vec3> points;
  std::vector<Vec3> normals;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  bool has_normals() const { return !normals.empty(); }

  void validate() const;
};

// x -> rotation * x + translation
struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static RigidTransform identity() { return {}; }

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
  Vec3 apply_direction(const Vec3& d) const { return rotation * d; }
  RigidTransform inverse() const;
  RigidTransform compose(const RigidTransform& inner) const;  // this ∘ inner
  Eigen::Matrix4d matrix() const;

  // Orthonormality and det = +1 within tol.
  bool is_valid(double tol = 1e-9) const;

  static RigidTransform from_axis_angle(const Vec3& axis, double angle, const Vec3& translation);
};

PointCloud transform_cloud(const PointCloud& cloud, const RigidTransform& T);
TriMesh transform_mesh(const TriMesh& mesh, const RigidTransform& T);

// Area-weighted vertex normals. Vertices with no non-degenerate incident face
// receive (0,0,1); their indices are appended to `unsupported` when given.
TriMesh compute_vertex_normals(const TriMesh& mesh, std::vector<std::size_t>* unsupported = nullptr);

Vec3 face_normal(const TriMesh& mesh, std::size_t face);  // unit, or zero if degenerate
double face_area(const TriMesh& mesh, std::size_t face);

Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c);

// Brute-force distance from p to the surface of `mesh`.
double point_mesh_distance(const Vec3& p, const TriMesh& mesh);

// Stacks vertices as [x0 y0 z0 x1 ...].
Eigen::VectorXd stack_vertices(std::span<const Vec3> vertices);
std::vector<Vec3> unstack_vertices(const Eigen::VectorXd& stacked);

// Mesh construction helpers used by tests and the synthetic generator.
TriMesh make_icosphere(double radius, int subdivisions);
TriMesh make_unit_cube();
// Lat-long ellipsoid with `rings` latitude bands and `segments` longitudes;
// (rings - 1) * segments + 2 vertices, outward-oriented faces.
TriMesh make_ellipsoid(const Vec3& radii, int rings, int segments);
// Planar grid in the xy plane, (nx+1)*(ny+1) vertices, normal +z.
TriMesh make_grid(int nx, int ny, double spacing);

}  // namespace facecap
