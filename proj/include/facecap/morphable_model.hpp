#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "facecap/correspondence.hpp"
#include "facecap/geometry.hpp"

namespace facecap {

// PCA shape model. Basis columns are orthonormal 3V-vectors; `eigenvalues`
// are covariance eigenvalues (descending), so the prior scale of mode i is
// sigma_i = sqrt(eigenvalues[i]).
struct MorphableModel {
  TriMesh mean_shape;
  Eigen::MatrixXd basis;
  Eigen::VectorXd eigenvalues;

  std::size_t mode_count() const { return static_cast<std::size_t>(basis.cols()); }
  std::size_t vertex_count() const { return mean_shape.vertex_count(); }
  Eigen::VectorXd sigma() const { return eigenvalues.cwiseSqrt(); }
  void validate() const;
};

// Throws on topology mismatch, fewer than num_modes + 1 heads, or
// num_modes above the rank of the centred data.
MorphableModel build_pca(std::span<const TriMesh> heads, std::size_t num_modes);

Eigen::VectorXd project(const MorphableModel& model, const TriMesh& head);
TriMesh reconstruct(const MorphableModel& model, const Eigen::VectorXd& coeffs);

// Per-term breakdown of the fitting objective for fixed correspondences:
//   plane = sum n_i^T (p_i - q_i')^2,   point = sum |p_i - q_i'|^2,
//   reg   = sum (w_j / sigma_j)^2,
//   total = plane + kPointWeight * point + alpha * reg.
struct Energy3dmm {
  double plane = 0.0;
  double point = 0.0;
  double reg = 0.0;
  double total = 0.0;
};

inline constexpr double kPointToPointWeight = 0.1;

Energy3dmm evaluate_3dmm_energy(const MorphableModel& model, const Eigen::VectorXd& coeffs,
                                std::span<const Correspondence> corr, double alpha);
Eigen::VectorXd gradient_3dmm_energy(const MorphableModel& model, const Eigen::VectorXd& coeffs,
                                     std::span<const Correspondence> corr, double alpha);

// Exact minimizer of the objective for fixed correspondences (normal
// equations, Cholesky). Invalid correspondences are ignored.
Eigen::VectorXd solve_3dmm_coefficients(const MorphableModel& model, std::span<const Correspondence> corr,
                                        double alpha);

struct FitParams {
  double alpha = 0.1;
  int iterations = 10;
  double convergence_tol = 1e-7;  // on |delta w|
  CorrespondenceGates gates;
  // Applied to the target before fitting (removes global pose).
  RigidTransform target_to_model;
  // Optional per-target-point flags; matches onto flagged points are dropped.
  std::vector<bool> excluded_targets;
};

struct FitResult {
  Eigen::VectorXd coeffs;
  int iterations = 0;
  bool converged = false;
  std::vector<Energy3dmm> energy_log;  // at each inner solution
  std::vector<std::size_t> valid_counts;
};

// Alternates template->scan correspondences and the exact inner solve.
// Target must carry normals.
FitResult fit_3dmm(const MorphableModel& model, const PointCloud& target, const FitParams& params = {});

// Model -> scan pose from designated landmark vertices.
RigidTransform prealign_to_landmarks(const MorphableModel& model, std::span<const std::size_t> landmark_vertices,
                                     std::span<const Vec3> landmark_points);

// Binary container: magic "F3MM", u32 version, u64 V, u64 m, then
// little-endian f64 mean (3V), basis (3V*m, column-major), eigenvalues (m),
// then u64 face count and u32 face indices.
void save_model(const MorphableModel& model, const std::filesystem::path& path);
MorphableModel load_model(const std::filesystem::path& path);

}  // namespace facecap
