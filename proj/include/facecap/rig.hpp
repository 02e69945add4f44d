#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "facecap/geometry.hpp"

namespace facecap {

inline constexpr std::size_t kArkitShapeCount = 51;

// ARKit blendshape names, tongueOut excluded.
const std::array<std::string_view, kArkitShapeCount>& arkit_shape_names();

// Neutral mesh plus a 3V x K matrix of deltas (shape_k - neutral), each
// delta supported on the vertex set of exactly one face region.
struct BlendshapeRig {
  TriMesh neutral;
  Eigen::MatrixXd deltas;
  std::vector<std::string> names;
  std::vector<std::size_t> shape_region;              // shape -> region id
  std::vector<std::string> region_names;
  std::vector<std::vector<std::size_t>> region_vertices;  // sorted, pairwise disjoint

  // Vertex selections used by the per-frame solver.
  std::vector<std::size_t> dense_vertices;
  std::vector<std::size_t> landmark_vertices;
  // Landmarks outside every region support; expressions never move them, so
  // they drive the head pose estimate.
  std::vector<std::size_t> anchor_vertices;

  std::size_t vertex_count() const { return neutral.vertex_count(); }
  std::size_t shape_count() const { return names.size(); }
  std::size_t region_count() const { return region_names.size(); }

  // Throws Error on: dimension mismatch, duplicate names, overlapping regions,
  // a region without shapes, a delta with support outside its region, or
  // selection indices out of range.
  void validate() const;
};

// neutral + deltas * weights, topology copied from the neutral.
TriMesh evaluate_rig(const BlendshapeRig& rig, const Eigen::VectorXd& weights);

// Positions of a subset of vertices only.
std::vector<Vec3> evaluate_rig_vertices(const BlendshapeRig& rig, const Eigen::VectorXd& weights,
                                        std::span<const std::size_t> vertices);

// Directory layout: neutral.obj, <name>.obj per shape, regions.json.
void save_rig(const BlendshapeRig& rig, const std::filesystem::path& dir);
BlendshapeRig load_rig(const std::filesystem::path& dir);

}  // namespace facecap
