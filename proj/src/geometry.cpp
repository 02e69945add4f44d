#include "facecap/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <string>

#include "facecap/error.hpp"

namespace facecap {

namespace {

void check_unit_normals(std::span<const Vec3> normals, const char* what) {
  for (std::size_t i = 0; i < normals.size(); ++i) {
    if (std::abs(normals[i].norm() - 1.0) > 1e-6) {
      throw Error(std::string(what) + ": normal " + std::to_string(i) + " is not unit length");
    }
  }
}

}  // namespace

void TriMesh::validate() const {
  const auto n = vertices.size();
  for (std::size_t f = 0; f < faces.size(); ++f) {
    for (auto idx : faces[f]) {
      if (idx >= n) {
        throw Error("TriMesh: face " + std::to_string(f) + " references vertex " +
                    std::to_string(idx) + " of " + std::to_string(n));
      }
    }
  }
  if (!normals.empty()) {
    if (normals.size() != n) throw Error("TriMesh: normal count does not match vertex count");
    check_unit_normals(normals, "TriMesh");
  }
}

void PointCloud::validate() const {
  if (points.empty()) throw Error("PointCloud: no points");
  if (!normals.empty()) {
    if (normals.size() != points.size()) throw Error("PointCloud: normal count does not match point count");
    check_unit_normals(normals, "PointCloud");
  }
}

RigidTransform RigidTransform::inverse() const {
  RigidTransform inv;
  inv.rotation = rotation.transpose();
  inv.translation = -(inv.rotation * translation);
  return inv;
}

RigidTransform RigidTransform::compose(const RigidTransform& inner) const {
  RigidTransform out;
  out.rotation = rotation * inner.rotation;
  out.translation = rotation * inner.translation + translation;
  return out;
}

Eigen::Matrix4d RigidTransform::matrix() const {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = rotation;
  m.topRightCorner<3, 1>() = translation;
  return m;
}

bool RigidTransform::is_valid(double tol) const {
  if (!rotation.allFinite() || !translation.allFinite()) return false;
  const double ortho = (rotation * rotation.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff();
  return ortho <= tol && std::abs(rotation.determinant() - 1.0) <= tol;
}

RigidTransform RigidTransform::from_axis_angle(const Vec3& axis, double angle, const Vec3& translation) {
  RigidTransform T;
  T.rotation = Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix();
  T.translation = translation;
  return T;
}

PointCloud transform_cloud(const PointCloud& cloud, const RigidTransform& T) {
  PointCloud out;
  out.points.reserve(cloud.points.size());
  for (const auto& p : cloud.points) out.points.push_back(T.apply(p));
  out.normals.reserve(cloud.normals.size());
  for (const auto& n : cloud.normals) out.normals.push_back(T.apply_direction(n));
  return out;
}

TriMesh transform_mesh(const TriMesh& mesh, const RigidTransform& T) {
  TriMesh out = mesh;
  for (auto& v : out.vertices) v = T.apply(v);
  for (auto& n : out.normals) n = T.apply_direction(n);
  return out;
}

Vec3 face_normal(const TriMesh& mesh, std::size_t f) {
  const auto& [a, b, c] = mesh.faces[f];
  const Vec3 cross = (mesh.vertices[b] - mesh.vertices[a]).cross(mesh.vertices[c] - mesh.vertices[a]);
  const double len = cross.norm();
  if (len <= std::numeric_limits<double>::min()) return Vec3::Zero();
  return cross / len;
}

double face_area(const TriMesh& mesh, std::size_t f) {
  const auto& [a, b, c] = mesh.faces[f];
  return 0.5 * (mesh.vertices[b] - mesh.vertices[a]).cross(mesh.vertices[c] - mesh.vertices[a]).norm();
}

TriMesh compute_vertex_normals(const TriMesh& mesh, std::vector<std::size_t>* unsupported) {
  if (mesh.faces.empty()) throw Error("compute_vertex_normals: mesh has no faces");
  mesh.validate();

  // The unnormalized cross product is twice the area times the unit normal, so
  // accumulating it directly gives the area weighting.
  std::vector<Vec3> accum(mesh.vertices.size(), Vec3::Zero());
  for (const auto& [a, b, c] : mesh.faces) {
    const Vec3 cross = (mesh.vertices[b] - mesh.vertices[a]).cross(mesh.vertices[c] - mesh.vertices[a]);
    accum[a] += cross;
    accum[b] += cross;
    accum[c] += cross;
  }

  // Scale-free threshold so normals are invariant when the mesh is scaled.
  double max_len = 0.0;
  for (const auto& n : accum) max_len = std::max(max_len, n.norm());

  TriMesh out = mesh;
  out.normals.resize(mesh.vertices.size());
  for (std::size_t i = 0; i < accum.size(); ++i) {
    const double len = accum[i].norm();
    if (len <= 1e-14 * max_len || len == 0.0) {
      out.normals[i] = Vec3::UnitZ();
      if (unsupported) unsupported->push_back(i);
    } else {
      out.normals[i] = accum[i] / len;
    }
  }
  return out;
}

Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  // Region classification from Ericson, Real-Time Collision Detection, 5.1.5.
  const Vec3 ab = b - a;
  const Vec3 ac = c - a;
  const Vec3 ap = p - a;
  const double d1 = ab.dot(ap);
  const double d2 = ac.dot(ap);
  if (d1 <= 0.0 && d2 <= 0.0) return a;

  const Vec3 bp = p - b;
  const double d3 = ab.dot(bp);
  const double d4 = ac.dot(bp);
  if (d3 >= 0.0 && d4 <= d3) return b;

  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) return a + ab * (d1 / (d1 - d3));

  const Vec3 cp = p - c;
  const double d5 = ab.dot(cp);
  const double d6 = ac.dot(cp);
  if (d6 >= 0.0 && d5 <= d6) return c;

  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) return a + ac * (d2 / (d2 - d6));

  const double va = d3 * d6 - d5 * d4;
  if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) {
    return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
  }

  const double denom = 1.0 / (va + vb + vc);
  return a + ab * (vb * denom) + ac * (vc * denom);
}

double point_mesh_distance(const Vec3& p, const TriMesh& mesh) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& [a, b, c] : mesh.faces) {
    const Vec3 q = closest_point_on_triangle(p, mesh.vertices[a], mesh.vertices[b], mesh.vertices[c]);
    best = std::min(best, (q - p).squaredNorm());
  }
  return std::sqrt(best);
}

Eigen::VectorXd stack_vertices(std::span<const Vec3> vertices) {
  Eigen::VectorXd out(3 * static_cast<Eigen::Index>(vertices.size()));
  for (std::size_t i = 0; i < vertices.size(); ++i) out.segment<3>(3 * static_cast<Eigen::Index>(i)) = vertices[i];
  return out;
}

std::vector<Vec3> unstack_vertices(const Eigen::VectorXd& stacked) {
  if (stacked.size() % 3 != 0) throw Error("unstack_vertices: length is not a multiple of 3");
  std::vector<Vec3> out(static_cast<std::size_t>(stacked.size() / 3));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = stacked.segment<3>(3 * static_cast<Eigen::Index>(i));
  return out;
}

TriMesh make_icosphere(double radius, int subdivisions) {
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  TriMesh mesh;
  mesh.vertices = {{-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
                   {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
  mesh.faces = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
                {11, 10, 2}, {10, 7, 6}, {7, 1, 8},  {3, 9, 4},  {3, 4, 2},   {3, 2, 6}, {3, 6, 8},
                {3, 8, 9},  {4, 9, 5},  {2, 4, 11}, {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};
  for (auto& v : mesh.vertices) v.normalize();

  for (int s = 0; s < subdivisions; ++s) {
    std::map<std::pair<std::uint32_t, std::uint32_t>, std::uint32_t> midpoint;
    auto mid = [&](std::uint32_t i, std::uint32_t j) {
      const auto key = std::minmax(i, j);
      auto it = midpoint.find(key);
      if (it != midpoint.end()) return it->second;
      const auto idx = static_cast<std::uint32_t>(mesh.vertices.size());
      mesh.vertices.push_back((mesh.vertices[i] + mesh.vertices[j]).normalized());
      midpoint.emplace(key, idx);
      return idx;
    };
    std::vector<Face> faces;
    faces.reserve(mesh.faces.size() * 4);
    for (const auto& [a, b, c] : mesh.faces) {
      const auto ab = mid(a, b);
      const auto bc = mid(b, c);
      const auto ca = mid(c, a);
      faces.push_back({a, ab, ca});
      faces.push_back({b, bc, ab});
      faces.push_back({c, ca, bc});
      faces.push_back({ab, bc, ca});
    }
    mesh.faces = std::move(faces);
  }
  for (auto& v : mesh.vertices) v *= radius;
  return mesh;
}

TriMesh make_unit_cube() {
  TriMesh mesh;
  for (int i = 0; i < 8; ++i) {
    mesh.vertices.emplace_back((i & 1) ? 0.5 : -0.5, (i & 2) ? 0.5 : -0.5, (i & 4) ? 0.5 : -0.5);
  }
  // Every face is split along the diagonal through its even-parity corners
  // (0, 3, 5, 6), so each corner gets the same area from each incident face.
  mesh.faces = {{0, 3, 1}, {0, 2, 3}, {4, 5, 6}, {5, 7, 6}, {0, 1, 5}, {0, 5, 4},
                {2, 6, 3}, {3, 6, 7}, {0, 4, 6}, {0, 6, 2}, {1, 3, 5}, {3, 7, 5}};
  return mesh;
}

TriMesh make_ellipsoid(const Vec3& radii, int rings, int segments) {
  if (rings < 2 || segments < 3) throw Error("make_ellipsoid: need rings >= 2 and segments >= 3");
  TriMesh mesh;
  // Poles along y (top of head = +y). Longitude phi measured from +z toward +x.
  mesh.vertices.emplace_back(0.0, radii.y(), 0.0);
  for (int r = 1; r < rings; ++r) {
    const double theta = std::numbers::pi * r / rings;
    for (int s = 0; s < segments; ++s) {
      const double phi = 2.0 * std::numbers::pi * s / segments;
      mesh.vertices.emplace_back(radii.x() * std::sin(theta) * std::sin(phi), radii.y() * std::cos(theta),
                                 radii.z() * std::sin(theta) * std::cos(phi));
    }
  }
  mesh.vertices.emplace_back(0.0, -radii.y(), 0.0);

  const auto ring_vertex = [segments](int r, int s) {
    return static_cast<std::uint32_t>(1 + (r - 1) * segments + ((s % segments + segments) % segments));
  };
  const auto bottom = static_cast<std::uint32_t>(mesh.vertices.size() - 1);
  for (int s = 0; s < segments; ++s) mesh.faces.push_back({0, ring_vertex(1, s), ring_vertex(1, s + 1)});
  for (int r = 1; r < rings - 1; ++r) {
    for (int s = 0; s < segments; ++s) {
      const auto a = ring_vertex(r, s);
      const auto b = ring_vertex(r, s + 1);
      const auto c = ring_vertex(r + 1, s);
      const auto d = ring_vertex(r + 1, s + 1);
      mesh.faces.push_back({a, c, b});
      mesh.faces.push_back({b, c, d});
    }
  }
  for (int s = 0; s < segments; ++s) {
    mesh.faces.push_back({bottom, ring_vertex(rings - 1, s + 1), ring_vertex(rings - 1, s)});
  }
  return mesh;
}

TriMesh make_grid(int nx, int ny, double spacing) {
  TriMesh mesh;
  for (int j = 0; j <= ny; ++j) {
    for (int i = 0; i <= nx; ++i) mesh.vertices.emplace_back(i * spacing, j * spacing, 0.0);
  }
  const auto id = [nx](int i, int j) { return static_cast<std::uint32_t>(j * (nx + 1) + i); };
  for (int j = 0; j < ny; ++j) {
    for (int i = 0; i < nx; ++i) {
      mesh.faces.push_back({id(i, j), id(i + 1, j), id(i + 1, j + 1)});
      mesh.faces.push_back({id(i, j), id(i + 1, j + 1), id(i, j + 1)});
    }
  }
  return mesh;
}

}  // namespace facecap
