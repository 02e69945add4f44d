#include "facecap/correspondence.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "facecap/error.hpp"

namespace facecap {

std::size_t CorrespondenceSet::valid_count() const {
  return static_cast<std::size_t>(
      std::count_if(matches.begin(), matches.end(), [](const Correspondence& c) { return c.valid; }));
}

CorrespondenceSet find_correspondences(const TriMesh& source, const PointCloud& target,
                                       const CorrespondenceGates& gates) {
  if (target.empty()) throw Error("find_correspondences: empty target cloud");
  const KdTree index(target.points);
  return find_correspondences(source, target, index, gates);
}

CorrespondenceSet find_correspondences(const TriMesh& source, const PointCloud& target, const KdTree& index,
                                       const CorrespondenceGates& gates) {
  std::vector<std::size_t> all(source.vertex_count());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return find_correspondences(source.vertices, source.normals, all, target, index, gates);
}

CorrespondenceSet find_correspondences(std::span<const Vec3> source_points, std::span<const Vec3> source_normals,
                                       std::span<const std::size_t> subset, const PointCloud& target,
                                       const KdTree& index, const CorrespondenceGates& gates) {
  if (target.empty() || index.empty()) throw Error("find_correspondences: empty target cloud");
  if (index.size() != target.size()) throw Error("find_correspondences: index does not match target");
  if (!source_normals.empty() && source_normals.size() != source_points.size()) {
    throw Error("find_correspondences: source normal count mismatch");
  }

  CorrespondenceSet out;
  out.normal_gate_applied = target.has_normals() && !source_normals.empty();
  const double max_d2 = gates.max_distance * gates.max_distance;
  const double min_cos = std::cos(gates.max_normal_angle);

  out.matches.resize(subset.size());
  for (std::size_t k = 0; k < subset.size(); ++k) {
    const std::size_t i = subset[k];
    if (i >= source_points.size()) throw Error("find_correspondences: source index out of range");
    const auto hit = index.nearest(source_points[i]);
    Correspondence& c = out.matches[k];
    c.source_index = i;
    c.target_index = hit.index;
    c.target_point = target.points[hit.index];
    c.distance = std::sqrt(hit.squared_distance);
    c.valid = hit.squared_distance <= max_d2;
    if (target.has_normals()) {
      c.target_normal = target.normals[hit.index];
      if (out.normal_gate_applied && c.valid) c.valid = source_normals[i].dot(c.target_normal) >= min_cos;
    }
  }
  return out;
}

}  // namespace facecap
