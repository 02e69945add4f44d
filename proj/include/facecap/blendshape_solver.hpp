#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include "facecap/correspondence.hpp"
#include "facecap/geometry.hpp"
#include "facecap/rig.hpp"

namespace facecap {

// Minimizes 1/2 x^T H x - c^T x subject to lo <= x <= hi (H symmetric positive
// definite) with a primal active-set method. `x0` is a warm start (clamped).
struct BoxQpResult {
  Eigen::VectorXd x;
  int iterations = 0;
  bool converged = false;
};
BoxQpResult solve_box_qp(const Eigen::MatrixXd& H, const Eigen::VectorXd& c, double lo, double hi,
                         const Eigen::VectorXd& x0, double kkt_tol = 1e-9);

struct LandmarkObservation {
  std::size_t vertex = 0;
  Vec3 point = Vec3::Zero();
};

struct FrameObservation {
  long frame_index = 0;
  PointCloud cloud;
  std::vector<LandmarkObservation> landmarks;
  RigidTransform head_pose;  // rig frame -> camera frame
};

struct FrameWeights {
  long frame_index = 0;
  Eigen::VectorXd weights;
};

// prev is frame t-1 and prev2 is frame t-2; missing entries drop the
// smoothing term for that frame.
struct SolverHistory {
  std::optional<FrameWeights> prev;
  std::optional<FrameWeights> prev2;
};

struct SolverParams {
  double alpha_marks = 0.5;
  double alpha_smooth = 0.2;
  double alpha_reg = 0.5;
  bool box_constraints = true;
  bool partition = true;  // false solves one joint QP over all K weights
  CorrespondenceGates gates;
  int correspondence_passes = 1;
  double kkt_tol = 1e-9;
};

struct FrameEnergies {
  double dense = 0.0;
  double marks = 0.0;
  double smooth = 0.0;
  double reg = 0.0;
  double total = 0.0;
};

struct FrameSolution {
  FrameWeights weights;
  FrameEnergies energies;
  std::vector<std::size_t> flagged_regions;  // solved without dense data
  // Dense targets in the rig frame; source_index is the rig vertex.
  std::vector<Correspondence> dense_matches;
  bool smoothing_applied = false;
};

// Row selectors over the stacked 3V vector, three rows per selected vertex.
// Throws unless landmarks are fewer than dense vertices.
struct SelectMatrices {
  Eigen::SparseMatrix<double> dense;
  Eigen::SparseMatrix<double> marks;
};
SelectMatrices build_select_matrices(const BlendshapeRig& rig, std::span<const std::size_t> dense_indices,
                                     std::span<const std::size_t> landmark_indices);

struct RegionPartition {
  std::size_t region = 0;
  std::vector<std::size_t> shapes;
  std::vector<std::size_t> vertices;
};
std::vector<RegionPartition> partition_regions(const BlendshapeRig& rig);

// Objective at `weights` for fixed dense targets (rig frame) and landmarks
// already in the rig frame. `history` is null when smoothing is off.
FrameEnergies evaluate_frame_energy(const BlendshapeRig& rig, const Eigen::VectorXd& weights,
                                    std::span<const Correspondence> dense_matches,
                                    std::span<const LandmarkObservation> landmarks_rig,
                                    const Eigen::VectorXd* prev, const Eigen::VectorXd* prev2,
                                    const SolverParams& params);

// Holds per-region precomputation for repeated per-frame solves.
class BlendshapeSolver {
public:
  BlendshapeSolver(BlendshapeRig rig, SolverParams params = {});

  FrameSolution solve(const FrameObservation& obs, const SolverHistory& history) const;

  const BlendshapeRig& rig() const { return rig_; }
  const SolverParams& params() const { return params_; }

private:
  struct Block {
    std::size_t region = 0;
    std::vector<std::size_t> shapes;
    std::vector<std::size_t> dense_slots;  // positions in rig.dense_vertices
    Eigen::MatrixXd B;                     // 3 rows per dense slot, one column per shape
    Eigen::MatrixXd BtB;
  };

  std::vector<Correspondence> match_dense(const PointCloud& cloud, const KdTree& index,
                                          const Eigen::VectorXd& estimate) const;

  BlendshapeRig rig_;
  SolverParams params_;
  std::vector<Block> blocks_;
  std::vector<long> vertex_block_;   // rig vertex -> block or -1
  std::vector<long> vertex_row_;     // rig vertex -> row offset inside its block B, or -1 if not dense
  std::vector<Vec3> neutral_normals_;
};

FrameSolution solve_frame(const BlendshapeRig& rig, const FrameObservation& obs, const SolverHistory& history,
                          const SolverParams& params = {});

// Frames must have strictly increasing indices; a gap drops the history
// that is no longer consecutive.
std::vector<FrameSolution> solve_sequence(const BlendshapeRig& rig, std::span<const FrameObservation> frames,
                                          const SolverParams& params = {});

}  // namespace facecap
