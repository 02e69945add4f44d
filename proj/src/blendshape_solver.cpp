#include "facecap/blendshape_solver.hpp"

#include <algorithm>
#include <set>
#include <string>

#include <Eigen/Cholesky>

#include "facecap/error.hpp"
#include "facecap/kdtree.hpp"

namespace facecap {

namespace {

std::vector<Eigen::Triplet<double>> selector_triplets(std::span<const std::size_t> indices, std::size_t V) {
  std::vector<Eigen::Triplet<double>> t;
  t.reserve(3 * indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= V) throw Error("build_select_matrices: vertex index out of range");
    for (int c = 0; c < 3; ++c) {
      t.emplace_back(static_cast<Eigen::Index>(3 * k + static_cast<std::size_t>(c)),
                     static_cast<Eigen::Index>(3 * indices[k] + static_cast<std::size_t>(c)), 1.0);
    }
  }
  return t;
}

void check_weights(const Eigen::VectorXd& w, std::size_t K, const char* what) {
  if (static_cast<std::size_t>(w.size()) != K) {
    throw Error(std::string(what) + ": expected " + std::to_string(K) + " weights, got " + std::to_string(w.size()));
  }
  if (!w.allFinite()) throw Error(std::string(what) + ": non-finite weights");
}

}  // namespace

SelectMatrices build_select_matrices(const BlendshapeRig& rig, std::span<const std::size_t> dense_indices,
                                     std::span<const std::size_t> landmark_indices) {
  if (landmark_indices.size() >= dense_indices.size()) {
    throw Error("build_select_matrices: the landmark selection must be smaller than the dense selection");
  }
  const std::size_t V = rig.vertex_count();
  SelectMatrices s;
  s.dense.resize(static_cast<Eigen::Index>(3 * dense_indices.size()), static_cast<Eigen::Index>(3 * V));
  s.marks.resize(static_cast<Eigen::Index>(3 * landmark_indices.size()), static_cast<Eigen::Index>(3 * V));
  const auto td = selector_triplets(dense_indices, V);
  const auto tm = selector_triplets(landmark_indices, V);
  s.dense.setFromTriplets(td.begin(), td.end());
  s.marks.setFromTriplets(tm.begin(), tm.end());
  return s;
}

std::vector<RegionPartition> partition_regions(const BlendshapeRig& rig) {
  rig.validate();
  std::vector<RegionPartition> parts(rig.region_count());
  for (std::size_t r = 0; r < parts.size(); ++r) {
    parts[r].region = r;
    parts[r].vertices = rig.region_vertices[r];
  }
  for (std::size_t k = 0; k < rig.shape_count(); ++k) parts[rig.shape_region[k]].shapes.push_back(k);
  return parts;
}

FrameEnergies evaluate_frame_energy(const BlendshapeRig& rig, const Eigen::VectorXd& weights,
                                    std::span<const Correspondence> dense_matches,
                                    std::span<const LandmarkObservation> landmarks_rig,
                                    const Eigen::VectorXd* prev, const Eigen::VectorXd* prev2,
                                    const SolverParams& params) {
  check_weights(weights, rig.shape_count(), "evaluate_frame_energy");
  const auto position = [&](std::size_t v) -> Vec3 {
    if (v >= rig.vertex_count()) throw Error("evaluate_frame_energy: vertex index out of range");
    return rig.neutral.vertices[v] + rig.deltas.middleRows<3>(3 * static_cast<Eigen::Index>(v)) * weights;
  };
  FrameEnergies e;
  for (const auto& c : dense_matches) {
    if (c.valid) e.dense += (position(c.source_index) - c.target_point).squaredNorm();
  }
  for (const auto& l : landmarks_rig) e.marks += (position(l.vertex) - l.point).squaredNorm();
  if (prev && prev2) e.smooth = (weights - 2.0 * *prev + *prev2).squaredNorm();
  e.reg = weights.squaredNorm();
  e.total = e.dense + params.alpha_marks * e.marks + params.alpha_smooth * e.smooth + params.alpha_reg * e.reg;
  return e;
}

BlendshapeSolver::BlendshapeSolver(BlendshapeRig rig, SolverParams params) : rig_(std::move(rig)), params_(params) {
  rig_.validate();
  if (params_.alpha_marks < 0.0 || params_.alpha_smooth < 0.0 || params_.alpha_reg < 0.0) {
    throw Error("SolverParams: weights must be >= 0");
  }
  if (params_.correspondence_passes < 1) throw Error("SolverParams: correspondence_passes must be >= 1");
  if (rig_.dense_vertices.empty()) throw Error("BlendshapeSolver: rig has no dense vertices");

  const std::size_t V = rig_.vertex_count();
  std::vector<long> region_of(V, -1);
  for (std::size_t r = 0; r < rig_.region_count(); ++r) {
    for (auto v : rig_.region_vertices[r]) region_of[v] = static_cast<long>(r);
  }

  const auto parts = partition_regions(rig_);
  if (params_.partition) {
    for (const auto& p : parts) blocks_.push_back(Block{p.region, p.shapes, {}, {}, {}});
  } else {
    Block all;
    for (std::size_t k = 0; k < rig_.shape_count(); ++k) all.shapes.push_back(k);
    blocks_.push_back(std::move(all));
  }

  vertex_block_.assign(V, -1);
  for (std::size_t v = 0; v < V; ++v) {
    if (region_of[v] >= 0) vertex_block_[v] = params_.partition ? region_of[v] : 0;
  }
  vertex_row_.assign(V, -1);
  for (std::size_t slot = 0; slot < rig_.dense_vertices.size(); ++slot) {
    const std::size_t v = rig_.dense_vertices[slot];
    if (vertex_block_[v] < 0) continue;
    Block& b = blocks_[static_cast<std::size_t>(vertex_block_[v])];
    vertex_row_[v] = static_cast<long>(3 * b.dense_slots.size());
    b.dense_slots.push_back(slot);
  }
  for (auto& b : blocks_) {
    const auto rows = static_cast<Eigen::Index>(3 * b.dense_slots.size());
    b.B.resize(rows, static_cast<Eigen::Index>(b.shapes.size()));
    for (std::size_t s = 0; s < b.dense_slots.size(); ++s) {
      const auto v = static_cast<Eigen::Index>(rig_.dense_vertices[b.dense_slots[s]]);
      for (std::size_t j = 0; j < b.shapes.size(); ++j) {
        b.B.block<3, 1>(3 * static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(j)) =
            rig_.deltas.block<3, 1>(3 * v, static_cast<Eigen::Index>(b.shapes[j]));
      }
    }
    b.BtB = b.B.transpose() * b.B;
  }
  neutral_normals_ = compute_vertex_normals(rig_.neutral).normals;
}

std::vector<Correspondence> BlendshapeSolver::match_dense(const PointCloud& cloud, const KdTree& index,
                                                          const Eigen::VectorXd& estimate) const {
  std::vector<Vec3> positions(rig_.vertex_count(), Vec3::Zero());
  for (auto v : rig_.dense_vertices) positions[v] = rig_.neutral.vertices[v];
  Eigen::VectorXd sub;
  for (const auto& b : blocks_) {
    sub.resize(static_cast<Eigen::Index>(b.shapes.size()));
    for (std::size_t j = 0; j < b.shapes.size(); ++j) sub[static_cast<Eigen::Index>(j)] = estimate[static_cast<Eigen::Index>(b.shapes[j])];
    if (sub.cwiseAbs().maxCoeff() == 0.0) continue;
    const Eigen::VectorXd moved = b.B * sub;
    for (std::size_t s = 0; s < b.dense_slots.size(); ++s) {
      positions[rig_.dense_vertices[b.dense_slots[s]]] += moved.segment<3>(3 * static_cast<Eigen::Index>(s));
    }
  }
  return find_correspondences(positions, neutral_normals_, rig_.dense_vertices, cloud, index, params_.gates).matches;
}

FrameSolution BlendshapeSolver::solve(const FrameObservation& obs, const SolverHistory& history) const {
  const std::size_t K = rig_.shape_count();
  obs.cloud.validate();
  if (obs.cloud.empty()) throw Error("solve_frame: frame " + std::to_string(obs.frame_index) + " has an empty cloud");
  if (history.prev2 && !history.prev) throw Error("solve_frame: history has t-2 without t-1");
  if (history.prev) {
    check_weights(history.prev->weights, K, "solve_frame history");
    if (history.prev->frame_index != obs.frame_index - 1) throw Error("solve_frame: history t-1 is not the previous frame");
  }
  if (history.prev2) {
    check_weights(history.prev2->weights, K, "solve_frame history");
    if (history.prev2->frame_index != obs.frame_index - 2) throw Error("solve_frame: history t-2 is not two frames back");
  }
  const bool smoothing = history.prev && history.prev2;
  const double a_smooth = smoothing ? params_.alpha_smooth : 0.0;

  // Move the observation into the rig frame instead of posing the rig.
  const RigidTransform to_rig = obs.head_pose.inverse();
  const PointCloud cloud = transform_cloud(obs.cloud, to_rig);
  std::vector<LandmarkObservation> marks = obs.landmarks;
  for (auto& l : marks) {
    if (l.vertex >= rig_.vertex_count()) throw Error("solve_frame: landmark vertex out of range");
    l.point = to_rig.apply(l.point);
  }
  const KdTree index(cloud.points);

  Eigen::VectorXd smooth_target = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(K));
  if (smoothing) smooth_target = 2.0 * history.prev->weights - history.prev2->weights;

  FrameSolution out;
  out.weights.frame_index = obs.frame_index;
  out.smoothing_applied = smoothing;
  Eigen::VectorXd w = history.prev ? history.prev->weights : Eigen::VectorXd::Zero(static_cast<Eigen::Index>(K));
  if (params_.box_constraints) w = w.cwiseMax(0.0).cwiseMin(1.0);

  for (int pass = 0; pass < params_.correspondence_passes; ++pass) {
    out.dense_matches = match_dense(cloud, index, w);
    out.flagged_regions.clear();
    Eigen::VectorXd next = w;
    for (const auto& b : blocks_) {
      const auto n = static_cast<Eigen::Index>(b.shapes.size());
      Eigen::MatrixXd H = b.BtB;
      Eigen::VectorXd c = Eigen::VectorXd::Zero(n);
      std::size_t valid = 0;
      for (std::size_t s = 0; s < b.dense_slots.size(); ++s) {
        const Correspondence& m = out.dense_matches[b.dense_slots[s]];
        const auto rows = b.B.middleRows<3>(3 * static_cast<Eigen::Index>(s));
        if (m.valid) {
          c.noalias() += rows.transpose() * (m.target_point - rig_.neutral.vertices[m.source_index]);
          ++valid;
        } else {
          H.noalias() -= rows.transpose() * rows;
        }
      }
      for (const auto& l : marks) {
        if (vertex_block_[l.vertex] < 0 || &blocks_[static_cast<std::size_t>(vertex_block_[l.vertex])] != &b) continue;
        Eigen::Matrix<double, 3, Eigen::Dynamic> rows(3, n);
        for (Eigen::Index j = 0; j < n; ++j) {
          rows.col(j) = rig_.deltas.block<3, 1>(3 * static_cast<Eigen::Index>(l.vertex), static_cast<Eigen::Index>(b.shapes[static_cast<std::size_t>(j)]));
        }
        H.noalias() += params_.alpha_marks * rows.transpose() * rows;
        c.noalias() += params_.alpha_marks * rows.transpose() * (l.point - rig_.neutral.vertices[l.vertex]);
      }
      H.diagonal().array() += params_.alpha_reg + a_smooth;
      Eigen::VectorXd x0(n);
      for (Eigen::Index j = 0; j < n; ++j) {
        const auto k = static_cast<Eigen::Index>(b.shapes[static_cast<std::size_t>(j)]);
        c[j] += a_smooth * smooth_target[k];
        x0[j] = w[k];
      }
      if (valid == 0) out.flagged_regions.push_back(b.region);

      Eigen::VectorXd x;
      if (params_.box_constraints) {
        x = solve_box_qp(H, c, 0.0, 1.0, x0, params_.kkt_tol).x;
      } else {
        Eigen::LLT<Eigen::MatrixXd> llt(H);
        if (llt.info() != Eigen::Success) throw Error("solve_frame: singular system (set alpha_reg > 0)");
        x = llt.solve(c);
      }
      for (Eigen::Index j = 0; j < n; ++j) next[static_cast<Eigen::Index>(b.shapes[static_cast<std::size_t>(j)])] = x[j];
    }
    w = next;
  }

  out.weights.weights = w;
  const Eigen::VectorXd* p1 = smoothing ? &history.prev->weights : nullptr;
  const Eigen::VectorXd* p2 = smoothing ? &history.prev2->weights : nullptr;
  SolverParams ep = params_;
  ep.alpha_smooth = a_smooth;
  out.energies = evaluate_frame_energy(rig_, w, out.dense_matches, marks, p1, p2, ep);
  return out;
}

FrameSolution solve_frame(const BlendshapeRig& rig, const FrameObservation& obs, const SolverHistory& history,
                          const SolverParams& params) {
  return BlendshapeSolver(rig, params).solve(obs, history);
}

std::vector<FrameSolution> solve_sequence(const BlendshapeRig& rig, std::span<const FrameObservation> frames,
                                          const SolverParams& params) {
  const BlendshapeSolver solver(rig, params);
  std::vector<FrameSolution> out;
  out.reserve(frames.size());
  SolverHistory hist;
  for (const auto& f : frames) {
    if (!out.empty() && f.frame_index <= out.back().weights.frame_index) {
      throw Error("solve_sequence: frame " + std::to_string(f.frame_index) + " is out of order");
    }
    if (hist.prev && hist.prev->frame_index != f.frame_index - 1) hist = {};
    if (hist.prev2 && hist.prev2->frame_index != f.frame_index - 2) hist.prev2.reset();
    out.push_back(solver.solve(f, hist));
    hist.prev2 = hist.prev;
    hist.prev = out.back().weights;
  }
  return out;
}

}  // namespace facecap
