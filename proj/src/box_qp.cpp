#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/Cholesky>

#include "facecap/blendshape_solver.hpp"
#include "facecap/error.hpp"

namespace facecap {

BoxQpResult solve_box_qp(const Eigen::MatrixXd& H, const Eigen::VectorXd& c, double lo, double hi,
                         const Eigen::VectorXd& x0, double kkt_tol) {
  const Eigen::Index n = c.size();
  if (H.rows() != n || H.cols() != n || x0.size() != n) throw Error("solve_box_qp: dimension mismatch");
  if (!(lo <= hi)) throw Error("solve_box_qp: empty box");

  // 0 free, -1 at lower bound, +1 at upper bound.
  std::vector<int> state(static_cast<std::size_t>(n), 0);
  BoxQpResult res;
  res.x = x0.cwiseMax(lo).cwiseMin(hi);
  const double tol = kkt_tol * std::max(1.0, H.diagonal().cwiseAbs().maxCoeff());
  const int max_iter = 10 * static_cast<int>(n) + 50;

  std::vector<Eigen::Index> free_idx;
  for (res.iterations = 0; res.iterations < max_iter; ++res.iterations) {
    free_idx.clear();
    for (Eigen::Index i = 0; i < n; ++i) {
      if (state[static_cast<std::size_t>(i)] == 0) free_idx.push_back(i);
    }
    const auto nf = static_cast<Eigen::Index>(free_idx.size());
    Eigen::VectorXd y(nf);
    if (nf > 0) {
      Eigen::MatrixXd Hff(nf, nf);
      Eigen::VectorXd rhs(nf);
      for (Eigen::Index a = 0; a < nf; ++a) {
        rhs[a] = c[free_idx[a]];
        for (Eigen::Index i = 0; i < n; ++i) {
          if (state[static_cast<std::size_t>(i)] != 0) rhs[a] -= H(free_idx[a], i) * res.x[i];
        }
        for (Eigen::Index b = 0; b < nf; ++b) Hff(a, b) = H(free_idx[a], free_idx[b]);
      }
      Eigen::LLT<Eigen::MatrixXd> llt(Hff);
      if (llt.info() != Eigen::Success) throw Error("solve_box_qp: Hessian is not positive definite");
      y = llt.solve(rhs);
    }

    // Largest feasible step from x toward the free-subspace minimizer.
    double step = 1.0;
    Eigen::Index blocking = -1;
    for (Eigen::Index a = 0; a < nf; ++a) {
      const double xi = res.x[free_idx[a]];
      const double d = y[a] - xi;
      if (y[a] < lo && d < 0.0) {
        const double s = (lo - xi) / d;
        if (s < step) step = s, blocking = a;
      } else if (y[a] > hi && d > 0.0) {
        const double s = (hi - xi) / d;
        if (s < step) step = s, blocking = a;
      }
    }
    for (Eigen::Index a = 0; a < nf; ++a) res.x[free_idx[a]] += step * (y[a] - res.x[free_idx[a]]);

    if (blocking >= 0) {
      // Pin every free variable that reached the bound it was heading past.
      for (Eigen::Index a = 0; a < nf; ++a) {
        const Eigen::Index i = free_idx[a];
        const bool hit_lo = y[a] < lo && (a == blocking || res.x[i] <= lo);
        const bool hit_hi = y[a] > hi && (a == blocking || res.x[i] >= hi);
        if (hit_lo) {
          res.x[i] = lo;
          state[static_cast<std::size_t>(i)] = -1;
        } else if (hit_hi) {
          res.x[i] = hi;
          state[static_cast<std::size_t>(i)] = 1;
        }
      }
      continue;
    }

    // Subspace optimum is feasible: check multipliers of the pinned variables.
    const Eigen::VectorXd g = H * res.x - c;
    Eigen::Index worst = -1;
    double worst_v = tol;
    for (Eigen::Index i = 0; i < n; ++i) {
      const int s = state[static_cast<std::size_t>(i)];
      const double v = s == -1 ? -g[i] : s == 1 ? g[i] : 0.0;
      if (v > worst_v) worst_v = v, worst = i;
    }
    if (worst < 0) {
      res.converged = true;
      return res;
    }
    state[static_cast<std::size_t>(worst)] = 0;
  }
  return res;
}

}  // namespace facecap
