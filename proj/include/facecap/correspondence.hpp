#pragma once

#include <cstddef>
#include <numbers>
#include <vector>

#include "facecap/geometry.hpp"
#include "facecap/kdtree.hpp"

namespace facecap {

struct Correspondence {
  std::size_t source_index = 0;
  std::size_t target_index = 0;
  Vec3 target_point = Vec3::Zero();
  Vec3 target_normal = Vec3::Zero();  // zero when the target has no normals
  double distance = 0.0;
  bool valid = false;
};

struct CorrespondenceGates {
  double max_distance = 10.0;                          // mm
  double max_normal_angle = std::numbers::pi / 3.0;    // 60 degrees
};

struct CorrespondenceSet {
  std::vector<Correspondence> matches;
  // False when either side lacked normals and the angle gate was skipped.
  bool normal_gate_applied = false;

  std::size_t valid_count() const;
};

// Nearest target point for every source vertex. Throws on an empty target.
CorrespondenceSet find_correspondences(const TriMesh& source, const PointCloud& target,
                                       const CorrespondenceGates& gates = {});

// Same search against a prebuilt index over `target.points`.
CorrespondenceSet find_correspondences(const TriMesh& source, const PointCloud& target, const KdTree& index,
                                       const CorrespondenceGates& gates = {});

// Restrict the search to a subset of source vertices (matches keep the
// source_index of the vertex in `source_points`).
CorrespondenceSet find_correspondences(std::span<const Vec3> source_points, std::span<const Vec3> source_normals,
                                       std::span<const std::size_t> subset, const PointCloud& target,
                                       const KdTree& index, const CorrespondenceGates& gates = {});

}  // namespace facecap
