#include "facecap/nicp.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

#include <Eigen/CholmodSupport>

#include "facecap/error.hpp"

namespace facecap {

namespace {

using Triplet = Eigen::Triplet<double>;

Eigen::Index var(std::size_t vertex, int row, int col) {
  return static_cast<Eigen::Index>(12 * vertex + 4 * static_cast<std::size_t>(row) + static_cast<std::size_t>(col));
}

Eigen::Vector4d homogeneous(const Vec3& v) { return Eigen::Vector4d(v.x(), v.y(), v.z(), 1.0); }

double cot_at(const Vec3& apex, const Vec3& a, const Vec3& b) {
  const Vec3 u = a - apex;
  const Vec3 w = b - apex;
  const double s = u.cross(w).norm();
  return s > 0.0 ? u.dot(w) / s : 1e300;
}

struct Scales {
  double dis = 1.0, arap = 1.0, reg = 1.0, landmark = 1.0;
};

NicpResiduals assemble(const AffineField& X, const TriMesh& tmpl, std::span<const Correspondence> corr,
                       const EdgeSet& edges, const NicpParams& params, const Scales& s, bool jac) {
  const std::size_t V = tmpl.vertex_count();
  if (X.size() != V) throw Error("nicp: transform count does not match the template");
  std::size_t valid = 0;
  for (const auto& c : corr) {
    if (!c.valid) continue;
    if (c.source_index >= V) throw Error("nicp: correspondence source index out of range");
    ++valid;
  }
  const std::size_t marks = params.alpha_landmark > 0.0 ? params.landmark_vertices.size() : 0;

  NicpResiduals out;
  out.offsets[0] = 0;
  out.offsets[1] = static_cast<Eigen::Index>(3 * valid);
  out.offsets[2] = out.offsets[1] + static_cast<Eigen::Index>(3 * edges.size());
  out.offsets[3] = out.offsets[2] + static_cast<Eigen::Index>(9 * V);
  out.offsets[4] = out.offsets[3] + static_cast<Eigen::Index>(3 * marks);
  out.r.resize(out.offsets[4]);
  std::vector<Triplet> trip;
  if (jac) trip.reserve(12 * valid + 24 * edges.size() + 9 * 8 * V + 12 * marks);

  Eigen::Index row = 0;
  const auto point_term = [&](std::size_t vi, const Vec3& target, double scale) {
    const Eigen::Vector4d vh = homogeneous(tmpl.vertices[vi]);
    const Vec3 pred = X.transforms[vi] * vh;
    for (int k = 0; k < 3; ++k, ++row) {
      out.r[row] = scale * (target[k] - pred[k]);
      if (jac) {
        for (int c = 0; c < 4; ++c) trip.emplace_back(row, var(vi, k, c), -scale * vh[c]);
      }
    }
  };

  for (const auto& c : corr) {
    if (c.valid) point_term(c.source_index, c.target_point, s.dis);
  }

  for (std::size_t e = 0; e < edges.size(); ++e) {
    const auto [i, j] = edges.edges[e];
    const double sw = s.arap * std::sqrt(edges.weights[e]);
    Eigen::Vector4d h;
    h.head<3>() = 0.5 * (tmpl.vertices[i] + tmpl.vertices[j]);
    h[3] = params.gamma;
    const Vec3 d = (X.transforms[i] - X.transforms[j]) * h;
    for (int k = 0; k < 3; ++k, ++row) {
      out.r[row] = sw * d[k];
      if (jac) {
        for (int c = 0; c < 4; ++c) {
          trip.emplace_back(row, var(i, k, c), sw * h[c]);
          trip.emplace_back(row, var(j, k, c), -sw * h[c]);
        }
      }
    }
  }

  const int ncol = params.literal_reg ? 4 : 3;
  for (std::size_t i = 0; i < V; ++i) {
    const Affine34& Xi = X.transforms[i];
    for (int a = 0; a < 3; ++a) {
      for (int b = 0; b < 3; ++b, ++row) {
        double g = a == b ? -1.0 : 0.0;
        for (int c = 0; c < ncol; ++c) g += Xi(a, c) * Xi(b, c);
        out.r[row] = s.reg * g;
        if (!jac) continue;
        for (int c = 0; c < ncol; ++c) {
          if (a == b) {
            trip.emplace_back(row, var(i, a, c), s.reg * 2.0 * Xi(a, c));
          } else {
            trip.emplace_back(row, var(i, a, c), s.reg * Xi(b, c));
            trip.emplace_back(row, var(i, b, c), s.reg * Xi(a, c));
          }
        }
      }
    }
  }

  for (std::size_t k = 0; k < marks; ++k) point_term(params.landmark_vertices[k], params.landmark_targets[k], s.landmark);

  if (jac) {
    out.J.resize(out.offsets[4], static_cast<Eigen::Index>(12 * V));
    out.J.setFromTriplets(trip.begin(), trip.end());
  }
  return out;
}

Scales weighted_scales(const NicpParams& p) {
  return {1.0, std::sqrt(p.alpha_arap), std::sqrt(p.alpha_reg), std::sqrt(p.alpha_landmark)};
}

double total_energy(const AffineField& X, const TriMesh& tmpl, std::span<const Correspondence> corr,
                    const EdgeSet& edges, const NicpParams& params) {
  return assemble(X, tmpl, corr, edges, params, weighted_scales(params), false).r.squaredNorm();
}

}  // namespace

AffineField AffineField::identity(std::size_t vertex_count) {
  AffineField f;
  f.transforms.assign(vertex_count, Affine34::Identity());
  return f;
}

Eigen::VectorXd AffineField::flatten() const {
  Eigen::VectorXd x(static_cast<Eigen::Index>(12 * transforms.size()));
  for (std::size_t i = 0; i < transforms.size(); ++i) {
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 4; ++c) x[var(i, r, c)] = transforms[i](r, c);
    }
  }
  return x;
}

AffineField AffineField::unflatten(const Eigen::VectorXd& x) {
  if (x.size() % 12 != 0) throw Error("AffineField: vector length must be a multiple of 12");
  AffineField f;
  f.transforms.resize(static_cast<std::size_t>(x.size() / 12));
  for (std::size_t i = 0; i < f.transforms.size(); ++i) {
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 4; ++c) f.transforms[i](r, c) = x[var(i, r, c)];
    }
  }
  return f;
}

TriMesh AffineField::apply(const TriMesh& tmpl) const {
  if (transforms.size() != tmpl.vertex_count()) throw Error("AffineField: size does not match the mesh");
  TriMesh out;
  out.faces = tmpl.faces;
  out.vertices.resize(tmpl.vertex_count());
  for (std::size_t i = 0; i < out.vertices.size(); ++i) out.vertices[i] = transforms[i] * homogeneous(tmpl.vertices[i]);
  return out;
}

EdgeSet build_edge_set(const TriMesh& mesh, EdgeWeighting weighting) {
  mesh.validate();
  // edge -> opposite vertices
  std::map<std::array<std::uint32_t, 2>, std::vector<std::uint32_t>> opposite;
  for (const auto& f : mesh.faces) {
    for (int k = 0; k < 3; ++k) {
      std::uint32_t a = f[k], b = f[(k + 1) % 3];
      if (a > b) std::swap(a, b);
      opposite[{a, b}].push_back(f[(k + 2) % 3]);
    }
  }
  EdgeSet set;
  set.edges.reserve(opposite.size());
  set.weights.reserve(opposite.size());
  for (const auto& [edge, opp] : opposite) {
    if (opp.size() > 2) {
      throw Error("build_edge_set: edge (" + std::to_string(edge[0]) + ", " + std::to_string(edge[1]) + ") borders " +
                  std::to_string(opp.size()) + " faces");
    }
    double w = 1.0;
    if (weighting == EdgeWeighting::cotangent) {
      double sum = 0.0;
      for (auto o : opp) sum += cot_at(mesh.vertices[o], mesh.vertices[edge[0]], mesh.vertices[edge[1]]);
      w = std::clamp(0.5 * sum, 1e-3, 1e3);
    }
    set.edges.push_back(edge);
    set.weights.push_back(w);
  }
  return set;
}

void NicpParams::validate() const {
  if (alpha_arap < 0.0 || alpha_reg < 0.0 || alpha_landmark < 0.0) throw Error("NicpParams: weights must be >= 0");
  if (!(gamma > 0.0)) throw Error("NicpParams: gamma must be positive");
  if (outer_iters < 0 || gn_iters < 0) throw Error("NicpParams: iteration counts must be >= 0");
  if (landmark_vertices.size() != landmark_targets.size()) throw Error("NicpParams: landmark vertex/target mismatch");
  if (damping < 0.0) throw Error("NicpParams: damping must be >= 0");
}

NicpEnergy evaluate_nicp_energy(const AffineField& X, const TriMesh& tmpl, std::span<const Correspondence> corr,
                                const EdgeSet& edges, const NicpParams& params) {
  NicpParams unit = params;
  if (unit.alpha_landmark <= 0.0) unit.landmark_vertices.clear();
  unit.alpha_landmark = 1.0;
  const NicpResiduals res = assemble(X, tmpl, corr, edges, unit, Scales{}, false);
  const auto block = [&](int k) { return res.r.segment(res.offsets[k], res.offsets[k + 1] - res.offsets[k]).squaredNorm(); };
  NicpEnergy e;
  e.dis = block(0);
  e.arap = block(1);
  e.reg = block(2);
  e.landmark = block(3);
  e.total = e.dis + params.alpha_arap * e.arap + params.alpha_reg * e.reg + params.alpha_landmark * e.landmark;
  return e;
}

double evaluate_frobenius_rigidity(const AffineField& X, const EdgeSet& edges, double gamma) {
  const Eigen::Vector4d g(1.0, 1.0, 1.0, gamma);
  double sum = 0.0;
  for (const auto& [i, j] : edges.edges) sum += ((X.transforms[i] - X.transforms[j]) * g.asDiagonal()).squaredNorm();
  return sum;
}

NicpResiduals nicp_residuals(const AffineField& X, const TriMesh& tmpl, std::span<const Correspondence> corr,
                             const EdgeSet& edges, const NicpParams& params, bool with_jacobian) {
  params.validate();
  return assemble(X, tmpl, corr, edges, params, weighted_scales(params), with_jacobian);
}

AffineField solve_nicp_step(const AffineField& X0, const TriMesh& tmpl, std::span<const Correspondence> corr,
                            const EdgeSet& edges, const NicpParams& params, NicpStepLog* log) {
  params.validate();
  if (std::none_of(corr.begin(), corr.end(), [](const Correspondence& c) { return c.valid; })) {
    throw Error("solve_nicp_step: no valid correspondences");
  }
  const Scales scales = weighted_scales(params);
  AffineField X = X0;
  Eigen::VectorXd x = X.flatten();
  double energy = total_energy(X, tmpl, corr, edges, params);
  if (log) log->energies.push_back(energy);

  Eigen::CholmodSupernodalLLT<Eigen::SparseMatrix<double>> solver;
  bool analyzed = false;
  for (int it = 0; it < params.gn_iters; ++it) {
    const NicpResiduals res = assemble(X, tmpl, corr, edges, params, scales, true);
    Eigen::SparseMatrix<double> H = res.J.transpose() * res.J;
    const Eigen::VectorXd g = res.J.transpose() * res.r;
    for (Eigen::Index k = 0; k < H.rows(); ++k) H.coeffRef(k, k) += params.damping;
    if (!analyzed) {
      solver.analyzePattern(H);
      analyzed = true;
    }
    solver.factorize(H);
    if (solver.info() != Eigen::Success) {
      throw Error("solve_nicp_step: normal equations are not positive definite");
    }
    const Eigen::VectorXd delta = solver.solve(-g);

    double t = 1.0;
    bool accepted = false;
    for (int h = 0; h <= 20; ++h, t *= 0.5) {
      const Eigen::VectorXd trial_x = x + t * delta;
      const AffineField trial = AffineField::unflatten(trial_x);
      const double trial_e = total_energy(trial, tmpl, corr, edges, params);
      if (trial_e < energy) {
        x = trial_x;
        X = trial;
        energy = trial_e;
        accepted = true;
        if (log) log->energies.push_back(energy);
        break;
      }
      if (log) ++log->halvings;
    }
    if (!accepted) break;  // no descent left along the Gauss-Newton direction
  }
  return X;
}

NicpResult run_nicp(const TriMesh& tmpl, const PointCloud& target, const NicpParams& params) {
  params.validate();
  tmpl.validate();
  target.validate();
  if (target.empty()) throw Error("run_nicp: empty target");
  const EdgeSet edges = build_edge_set(tmpl, params.weighting);
  const KdTree index(target.points);

  NicpResult result;
  result.transforms = AffineField::identity(tmpl.vertex_count());
  TriMesh base = tmpl;  // the mesh the current transforms are expressed against
  AffineField X = result.transforms;
  for (int outer = 0; outer < params.outer_iters; ++outer) {
    const TriMesh current = compute_vertex_normals(X.apply(base));
    result.last_correspondences = find_correspondences(current, target, index, params.gates);
    const auto& corr = result.last_correspondences.matches;
    result.valid_counts.push_back(result.last_correspondences.valid_count());
    if (result.valid_counts.back() == 0) throw Error("run_nicp: all correspondences invalid at iteration " + std::to_string(outer));
    NicpStepLog log;
    X = solve_nicp_step(X, base, corr, edges, params, &log);
    const bool stalled = log.energies.size() == 1;
    result.step_logs.push_back(std::move(log));
    result.energy_log.push_back(evaluate_nicp_energy(X, base, corr, edges, params));
    if (stalled) break;  // nothing moved, so the correspondences cannot change either
    if (params.incremental) {
      // Fold the increment into the accumulated transforms and re-base.
      for (std::size_t i = 0; i < X.size(); ++i) {
        Affine34& T = result.transforms.transforms[i];
        const Affine34& D = X.transforms[i];
        T = (Affine34() << D.leftCols<3>() * T.leftCols<3>(), D.leftCols<3>() * T.col(3) + D.col(3)).finished();
      }
      base = X.apply(base);
      X = AffineField::identity(tmpl.vertex_count());
    } else {
      result.transforms = X;
    }
  }
  result.mesh = result.transforms.apply(tmpl);
  return result;
}

}  // namespace facecap
