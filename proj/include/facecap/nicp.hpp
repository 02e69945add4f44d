#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include "facecap/correspondence.hpp"
#include "facecap/geometry.hpp"

namespace facecap {

using Affine34 = Eigen::Matrix<double, 3, 4>;

// One 3x4 transform [A_i | t_i] per template vertex.
struct AffineField {
  std::vector<Affine34> transforms;

  static AffineField identity(std::size_t vertex_count);
  std::size_t size() const { return transforms.size(); }
  // Row-major per vertex: x[12 i + 4 r + c] = X_i(r, c).
  Eigen::VectorXd flatten() const;
  static AffineField unflatten(const Eigen::VectorXd& x);
  TriMesh apply(const TriMesh& tmpl) const;  // vertex i -> X_i [v_i; 1]
};

enum class EdgeWeighting { uniform, cotangent };

struct EdgeSet {
  std::vector<std::array<std::uint32_t, 2>> edges;  // i < j, sorted, unique
  std::vector<double> weights;
  std::size_t size() const { return edges.size(); }
};

// Throws when an edge borders more than two faces.
EdgeSet build_edge_set(const TriMesh& mesh, EdgeWeighting weighting = EdgeWeighting::uniform);

struct NicpParams {
  double alpha_arap = 20.0;
  double alpha_reg = 1.0;
  double gamma = 1.0;
  int outer_iters = 15;
  int gn_iters = 2;
  EdgeWeighting weighting = EdgeWeighting::uniform;
  CorrespondenceGates gates;
  // Penalize X X^T - I over the whole 3x4 transform instead of the 3x3 block.
  bool literal_reg = false;
  // Optional landmark term: alpha_landmark * sum |target_k - X_v [v; 1]|^2.
  double alpha_landmark = 0.0;
  std::vector<std::size_t> landmark_vertices;
  std::vector<Vec3> landmark_targets;
  // Absolute diagonal shift on J^T J. A relative shift would swamp the weak
  // orthogonality directions once alpha_arap is large.
  double damping = 1e-12;
  // Re-base each outer iteration on the current deformed mesh, so the
  // smoothness and rigidity terms act on the increment only.
  bool incremental = true;

  void validate() const;
};

struct NicpEnergy {
  double dis = 0.0;
  double arap = 0.0;
  double reg = 0.0;
  double landmark = 0.0;
  double total = 0.0;
};

NicpEnergy evaluate_nicp_energy(const AffineField& X, const TriMesh& tmpl, std::span<const Correspondence> corr,
                                const EdgeSet& edges, const NicpParams& params);

// Unweighted transform-difference rigidity, sum |(X_i - X_j) G|_F^2.
double evaluate_frobenius_rigidity(const AffineField& X, const EdgeSet& edges, double gamma);

// Stacked residuals with sqrt weights folded in, so total = |r|^2.
// Rows are grouped by class; `offsets` gives the start of dis, arap, reg,
// landmark blocks and the end.
struct NicpResiduals {
  Eigen::VectorXd r;
  Eigen::SparseMatrix<double> J;
  std::array<Eigen::Index, 5> offsets{};
};

NicpResiduals nicp_residuals(const AffineField& X, const TriMesh& tmpl, std::span<const Correspondence> corr,
                             const EdgeSet& edges, const NicpParams& params, bool with_jacobian = true);

struct NicpStepLog {
  std::vector<double> energies;  // initial, then after each accepted step
  int halvings = 0;
};

// Gauss-Newton on the full objective for fixed correspondences.
AffineField solve_nicp_step(const AffineField& X0, const TriMesh& tmpl, std::span<const Correspondence> corr,
                            const EdgeSet& edges, const NicpParams& params, NicpStepLog* log = nullptr);

struct NicpResult {
  TriMesh mesh;
  AffineField transforms;
  std::vector<NicpEnergy> energy_log;  // after each outer iteration
  std::vector<NicpStepLog> step_logs;
  std::vector<std::size_t> valid_counts;
  CorrespondenceSet last_correspondences;
};

NicpResult run_nicp(const TriMesh& tmpl, const PointCloud& target, const NicpParams& params = {});

}  // namespace facecap
