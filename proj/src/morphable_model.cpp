#include "facecap/morphable_model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "binary_io.hpp"
#include "facecap/error.hpp"
#include "facecap/rigid.hpp"

namespace facecap {

namespace {

constexpr std::uint32_t kModelVersion = 1;

Vec3 residual_at(const MorphableModel& model, const Eigen::VectorXd& coeffs, const Correspondence& c) {
  const auto row = 3 * static_cast<Eigen::Index>(c.source_index);
  const Vec3 q = model.mean_shape.vertices[c.source_index] + model.basis.middleRows<3>(row) * coeffs;
  return c.target_point - q;
}

void check_coeffs(const MorphableModel& model, const Eigen::VectorXd& coeffs) {
  if (static_cast<std::size_t>(coeffs.size()) != model.mode_count()) {
    throw Error("morphable model: expected " + std::to_string(model.mode_count()) + " coefficients, got " +
                std::to_string(coeffs.size()));
  }
}

}  // namespace

void MorphableModel::validate() const {
  mean_shape.validate();
  const auto V = static_cast<Eigen::Index>(mean_shape.vertex_count());
  if (basis.rows() != 3 * V) throw Error("MorphableModel: basis rows must be 3V");
  if (eigenvalues.size() != basis.cols()) throw Error("MorphableModel: eigenvalue count mismatch");
  for (Eigen::Index i = 0; i < eigenvalues.size(); ++i) {
    if (!(eigenvalues[i] > 0.0)) throw Error("MorphableModel: eigenvalues must be positive");
    if (i > 0 && eigenvalues[i] > eigenvalues[i - 1]) throw Error("MorphableModel: eigenvalues not descending");
  }
}

MorphableModel build_pca(std::span<const TriMesh> heads, std::size_t num_modes) {
  if (num_modes == 0) throw Error("build_pca: num_modes must be positive");
  if (heads.size() < num_modes + 1) {
    throw Error("build_pca: need at least num_modes + 1 = " + std::to_string(num_modes + 1) + " heads, got " +
                std::to_string(heads.size()));
  }
  const auto& faces = heads.front().faces;
  const std::size_t V = heads.front().vertex_count();
  for (const auto& h : heads) {
    if (h.vertex_count() != V || h.faces != faces) throw Error("build_pca: heads do not share topology");
  }

  const auto N = static_cast<Eigen::Index>(heads.size());
  Eigen::MatrixXd data(3 * static_cast<Eigen::Index>(V), N);
  for (Eigen::Index j = 0; j < N; ++j) data.col(j) = stack_vertices(heads[static_cast<std::size_t>(j)].vertices);
  const Eigen::VectorXd mean = data.rowwise().mean();
  data.colwise() -= mean;

  // Gram matrix trick: eigenvectors of D^T D (N x N) map to those of D D^T.
  const Eigen::MatrixXd gram = data.transpose() * data;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
  if (eig.info() != Eigen::Success) throw Error("build_pca: eigen-decomposition failed");
  const Eigen::VectorXd lambda = eig.eigenvalues().reverse();  // descending
  const Eigen::MatrixXd w = eig.eigenvectors().rowwise().reverse();

  // Relative to the largest mode and to the data magnitude, so rounding
  // residue from identical heads does not count as variation.
  const double floor = std::max(1e-12 * lambda[0], 1e-24 * static_cast<double>(N) * mean.squaredNorm());
  std::size_t rank = 0;
  for (Eigen::Index i = 0; i < lambda.size(); ++i) {
    if (lambda[i] > floor) ++rank;
  }
  if (rank == 0) throw Error("build_pca: heads are identical (rank 0)");
  if (num_modes > rank) {
    throw Error("build_pca: requested " + std::to_string(num_modes) + " modes but the data has rank " +
                std::to_string(rank));
  }

  MorphableModel model;
  model.mean_shape.faces = faces;
  model.mean_shape.vertices = unstack_vertices(mean);
  const auto m = static_cast<Eigen::Index>(num_modes);
  model.basis.resize(data.rows(), m);
  model.eigenvalues.resize(m);
  for (Eigen::Index j = 0; j < m; ++j) {
    model.basis.col(j) = data * w.col(j) / std::sqrt(lambda[j]);
    model.basis.col(j).normalize();
    model.eigenvalues[j] = lambda[j] / static_cast<double>(N - 1);
  }
  return model;
}

Eigen::VectorXd project(const MorphableModel& model, const TriMesh& head) {
  if (head.vertex_count() != model.vertex_count()) throw Error("project: vertex count mismatch");
  return model.basis.transpose() * (stack_vertices(head.vertices) - stack_vertices(model.mean_shape.vertices));
}

TriMesh reconstruct(const MorphableModel& model, const Eigen::VectorXd& coeffs) {
  check_coeffs(model, coeffs);
  TriMesh out;
  out.faces = model.mean_shape.faces;
  out.vertices = unstack_vertices(stack_vertices(model.mean_shape.vertices) + model.basis * coeffs);
  return out;
}

Energy3dmm evaluate_3dmm_energy(const MorphableModel& model, const Eigen::VectorXd& coeffs,
                                std::span<const Correspondence> corr, double alpha) {
  check_coeffs(model, coeffs);
  Energy3dmm e;
  for (const auto& c : corr) {
    if (!c.valid) continue;
    const Vec3 r = residual_at(model, coeffs, c);
    const double pn = c.target_normal.dot(r);
    e.plane += pn * pn;
    e.point += r.squaredNorm();
  }
  e.reg = (coeffs.array().square() / model.eigenvalues.array()).sum();
  e.total = e.plane + kPointToPointWeight * e.point + alpha * e.reg;
  return e;
}

Eigen::VectorXd gradient_3dmm_energy(const MorphableModel& model, const Eigen::VectorXd& coeffs,
                                     std::span<const Correspondence> corr, double alpha) {
  check_coeffs(model, coeffs);
  Eigen::VectorXd g = Eigen::VectorXd::Zero(coeffs.size());
  for (const auto& c : corr) {
    if (!c.valid) continue;
    const Vec3 r = residual_at(model, coeffs, c);
    const Vec3 weighted = c.target_normal * c.target_normal.dot(r) + kPointToPointWeight * r;
    g -= 2.0 * model.basis.middleRows<3>(3 * static_cast<Eigen::Index>(c.source_index)).transpose() * weighted;
  }
  g.array() += 2.0 * alpha * coeffs.array() / model.eigenvalues.array();
  return g;
}

Eigen::VectorXd solve_3dmm_coefficients(const MorphableModel& model, std::span<const Correspondence> corr,
                                        double alpha) {
  if (alpha < 0.0) throw Error("fit_3dmm: alpha must be non-negative");
  const auto m = static_cast<Eigen::Index>(model.mode_count());
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(m, m);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(m);
  std::size_t used = 0;
  for (const auto& c : corr) {
    if (!c.valid) continue;
    ++used;
    const auto U = model.basis.middleRows<3>(3 * static_cast<Eigen::Index>(c.source_index));
    const Mat3 W = c.target_normal * c.target_normal.transpose() + kPointToPointWeight * Mat3::Identity();
    const Eigen::MatrixXd WU = W * U;
    A.noalias() += U.transpose() * WU;
    b.noalias() += WU.transpose() * (c.target_point - model.mean_shape.vertices[c.source_index]);
  }
  if (used == 0) throw Error("fit_3dmm: no valid correspondences");
  A.diagonal().array() += alpha / model.eigenvalues.array();
  Eigen::LLT<Eigen::MatrixXd> llt(A);
  if (llt.info() != Eigen::Success) throw Error("fit_3dmm: singular normal equations");
  return llt.solve(b);
}

FitResult fit_3dmm(const MorphableModel& model, const PointCloud& target_in, const FitParams& params) {
  target_in.validate();
  if (!target_in.has_normals()) throw Error("fit_3dmm: target cloud needs normals");
  if (params.alpha < 0.0) throw Error("fit_3dmm: alpha must be non-negative");
  if (!params.excluded_targets.empty() && params.excluded_targets.size() != target_in.size()) {
    throw Error("fit_3dmm: excluded_targets must match the target size");
  }
  const PointCloud target = transform_cloud(target_in, params.target_to_model);
  const KdTree index(target.points);

  FitResult result;
  result.coeffs = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(model.mode_count()));
  for (int it = 0; it < params.iterations; ++it) {
    const TriMesh current = compute_vertex_normals(reconstruct(model, result.coeffs));
    auto corr = find_correspondences(current, target, index, params.gates);
    for (auto& c : corr.matches) {
      if (c.valid && !params.excluded_targets.empty() && params.excluded_targets[c.target_index]) c.valid = false;
    }
    if (corr.valid_count() == 0) throw Error("fit_3dmm: all correspondences invalid at iteration " + std::to_string(it));
    const Eigen::VectorXd next = solve_3dmm_coefficients(model, corr.matches, params.alpha);
    const double step = (next - result.coeffs).norm();
    result.coeffs = next;
    result.iterations = it + 1;
    result.energy_log.push_back(evaluate_3dmm_energy(model, next, corr.matches, params.alpha));
    result.valid_counts.push_back(corr.valid_count());
    if (step < params.convergence_tol) {
      result.converged = true;
      break;
    }
  }
  return result;
}

RigidTransform prealign_to_landmarks(const MorphableModel& model, std::span<const std::size_t> landmark_vertices,
                                     std::span<const Vec3> landmark_points) {
  std::vector<Vec3> src;
  src.reserve(landmark_vertices.size());
  for (auto v : landmark_vertices) {
    if (v >= model.vertex_count()) throw Error("prealign_to_landmarks: landmark vertex out of range");
    src.push_back(model.mean_shape.vertices[v]);
  }
  return rigid_align(src, landmark_points);
}

void save_model(const MorphableModel& model, const std::filesystem::path& path) {
  model.validate();
  detail::BinaryWriter w;
  w.bytes("F3MM");
  w.le(kModelVersion);
  w.le(static_cast<std::uint64_t>(model.vertex_count()));
  w.le(static_cast<std::uint64_t>(model.mode_count()));
  for (const auto& v : model.mean_shape.vertices) {
    for (int k = 0; k < 3; ++k) w.le(v[k]);
  }
  for (Eigen::Index i = 0; i < model.basis.size(); ++i) w.le(model.basis.data()[i]);
  for (Eigen::Index i = 0; i < model.eigenvalues.size(); ++i) w.le(model.eigenvalues[i]);
  w.le(static_cast<std::uint64_t>(model.mean_shape.face_count()));
  for (const auto& f : model.mean_shape.faces) {
    for (auto idx : f) w.le(idx);
  }
  w.save(path);
}

MorphableModel load_model(const std::filesystem::path& path) {
  detail::BinaryReader r(path);
  r.expect("F3MM");
  const auto version = r.le<std::uint32_t>();
  if (version != kModelVersion) throw Error(r.name() + ": unsupported model version " + std::to_string(version));
  const auto V = r.le<std::uint64_t>();
  const auto m = r.le<std::uint64_t>();
  r.need(8 * (3 * V + 3 * V * m + m));  // also rejects absurd sizes before allocating

  MorphableModel model;
  model.mean_shape.vertices.resize(V);
  for (auto& v : model.mean_shape.vertices) {
    for (int k = 0; k < 3; ++k) v[k] = r.le<double>();
  }
  model.basis.resize(static_cast<Eigen::Index>(3 * V), static_cast<Eigen::Index>(m));
  for (Eigen::Index i = 0; i < model.basis.size(); ++i) model.basis.data()[i] = r.le<double>();
  model.eigenvalues.resize(static_cast<Eigen::Index>(m));
  for (Eigen::Index i = 0; i < model.eigenvalues.size(); ++i) model.eigenvalues[i] = r.le<double>();
  const auto F = r.le<std::uint64_t>();
  r.need(12 * F);
  model.mean_shape.faces.resize(F);
  for (auto& f : model.mean_shape.faces) {
    for (auto& idx : f) idx = r.le<std::uint32_t>();
  }
  if (!r.at_end()) throw Error(r.name() + ": trailing bytes after model");
  model.validate();
  return model;
}

}  // namespace facecap
