// Acceptance runner: one line per criterion, nonzero exit on any failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numbers>
#include <random>
#include <sstream>
#include <string>

#include "facecap/blendshape_solver.hpp"
#include "facecap/eye_gaze.hpp"
#include "facecap/morphable_model.hpp"
#include "facecap/nicp.hpp"
#include "facecap/pipeline.hpp"
#include "facecap/rigid.hpp"
#include "facecap/synth.hpp"
#include "facecap/weights_filter.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace facecap;

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

struct Outcome {
  bool pass = true;
  std::string detail;
};

std::string fmt(const char* f, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, x);
  return buf;
}

// Relative error with a unit floor, as used for every tolerance below.
double rel(double approx, double exact) { return std::abs(approx - exact) / std::max(1.0, std::abs(exact)); }

const BlendshapeRig& head_rig() {
  static const BlendshapeRig rig = [] {
    const HeadFamily fam = make_head_family(5, 9, 8);
    return make_rig_from_head(fam.heads[0], 3);
  }();
  return rig;
}

// ---- criteria ----

Outcome default_weights() {
  const PipelineConfig c;
  Outcome o;
  const std::pair<double, double> pairs[] = {
      {c.alpha_3dmm, 0.1},   {c.alpha_narap, 20.0}, {c.alpha_nreg, 1.0},  {c.alpha_rmarks, 0.5},
      {c.alpha_rsmooth, 0.2}, {c.alpha_rreg, 0.5},   {c.alpha_edis, 1.0}, {c.alpha_esmooth, 0.5},
  };
  for (const auto& [got, want] : pairs) o.pass = o.pass && got == want;
  // The weights reach the stage parameter structs unchanged, and an empty
  // config file keeps them.
  const auto fit = c.fit_params();
  const auto nicp = c.nicp_params();
  const auto solver = c.solver_params();
  const auto gaze = c.gaze_params();
  o.pass = o.pass && fit.alpha == 0.1 && nicp.alpha_arap == 20.0 && nicp.alpha_reg == 1.0 && solver.alpha_marks == 0.5 &&
           solver.alpha_smooth == 0.2 && solver.alpha_reg == 0.5 && gaze.alpha_dis == 1.0 && gaze.alpha_smooth == 0.5;
  o.pass = o.pass && parse_config("") == c && parse_config(serialize_config(c)) == c;
  o.detail = "8 weights exact, propagated to stage params";
  return o;
}

Outcome identity_recovery() {
  const PipelineConfig cfg;
  const HeadFamily fam = make_head_family(21, 50, 8, {.rings = cfg.head_rings, .segments = cfg.head_segments});
  const MorphableModel m = build_pca(fam.heads, 8);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> mag(0.5, 1.5);
  double worst = 0.0;
  for (int trial = 0; trial < 3; ++trial) {
    Eigen::VectorXd z(8);
    if (trial == 0) {
      z << 1.0, -0.8, 0.9, -1.2, 0.7, 1.1, -0.9, 0.8;
    } else {
      for (auto& x : z) x = (rng() % 2 ? 1.0 : -1.0) * mag(rng);
    }
    const Eigen::VectorXd truth = z.cwiseProduct(m.sigma());
    const DepthScan scan = render_depth_scan(reconstruct(m, truth), VirtualCamera::frontal(cfg.camera_distance, 0.0));
    FitParams p = cfg.fit_params();
    p.excluded_targets = scan.boundary;
    const FitResult fit = fit_3dmm(m, scan.cloud, p);
    for (Eigen::Index i = 0; i < 8; ++i) worst = std::max(worst, std::abs(fit.coeffs[i] - truth[i]) / std::abs(truth[i]));
  }
  return {worst < 0.01, "m = 8, V = " + std::to_string(m.vertex_count()) + ", 3 heads, worst relative coefficient error " +
                            fmt("%.3g", worst) + " (limit 0.01)"};
}

Outcome gradients() {
  double w3 = 0.0, wn = 0.0, wf = 0.0, we = 0.0;

  // Morphable-model objective.
  {
    const HeadFamily fam = make_head_family(21, 50, 8);
    const MorphableModel m = build_pca(fam.heads, 8);
    std::mt19937_64 rng(8);
    std::normal_distribution<double> g(0.0, 3.0);
    for (std::uint64_t s = 0; s < 20; ++s) {
      const auto corr = test::random_3dmm_correspondences(m, s + 100, 150);
      Eigen::VectorXd w(8);
      for (auto& x : w) x = g(rng);
      const Eigen::VectorXd grad = gradient_3dmm_energy(m, w, corr, 0.1);
      for (Eigen::Index i = 0; i < 8; ++i) {
        const double h = 1e-4;
        Eigen::VectorXd wp = w, wm = w;
        wp[i] += h;
        wm[i] -= h;
        const double fd =
            (evaluate_3dmm_energy(m, wp, corr, 0.1).total - evaluate_3dmm_energy(m, wm, corr, 0.1).total) / (2 * h);
        w3 = std::max(w3, rel(fd, grad[i]));
      }
    }
  }

  // Registration residuals: data, rigidity, orthogonality and landmark rows.
  {
    const TriMesh mesh = make_icosphere(40.0, 1);
    const EdgeSet edges = build_edge_set(mesh, EdgeWeighting::cotangent);
    auto corr = test::exact_correspondences(test::smooth_bend(mesh, 3.0));
    for (std::size_t i = 0; i < corr.size(); i += 5) corr[i].valid = false;
    for (std::uint64_t s = 0; s < 20; ++s) {
      NicpParams p;
      p.literal_reg = s % 3 == 0;
      p.alpha_landmark = 2.0;
      p.landmark_vertices = {0, 5, 9, 20};
      p.landmark_targets = {Vec3(40, 1, 0), Vec3(0, 40, 2), Vec3(3, 0, -40), Vec3(10, 10, 10)};
      const AffineField X = test::random_field(mesh.vertex_count(), s + 50);
      const NicpResiduals res = nicp_residuals(X, mesh, corr, edges, p);
      const Eigen::MatrixXd J(res.J);
      const Eigen::VectorXd x = X.flatten();
      for (Eigen::Index k = 0; k < x.size(); ++k) {
        const double h = 1e-6;
        Eigen::VectorXd xp = x, xm = x;
        xp[k] += h;
        xm[k] -= h;
        const Eigen::VectorXd fd = (nicp_residuals(AffineField::unflatten(xp), mesh, corr, edges, p, false).r -
                                    nicp_residuals(AffineField::unflatten(xm), mesh, corr, edges, p, false).r) /
                                   (2 * h);
        for (Eigen::Index r = 0; r < fd.size(); ++r) wn = std::max(wn, rel(fd[r], J(r, k)));
      }
    }
  }

  // Filter network loss, two hidden layers.
  {
    for (std::uint64_t s = 0; s < 20; ++s) {
      FilterModel m = make_filter_model(3, 4, {7, 5}, s);
      std::mt19937_64 rng(s + 1);
      std::normal_distribution<double> g(0.0, 0.5);
      Eigen::VectorXd p0(static_cast<Eigen::Index>(m.parameter_count()));
      for (auto& x : p0) x = g(rng);
      m.set_parameters(p0);
      std::uniform_real_distribution<double> u(0.0, 1.0);
      std::vector<FilterSample> samples(8);
      for (auto& smp : samples) {
        smp.input.resize(16);
        for (auto& x : smp.input) x = u(rng);
        smp.raw = smp.input.tail(4);
        smp.target.resize(4);
        for (auto& x : smp.target) x = u(rng);
      }
      Eigen::VectorXd grad;
      filter_loss(m, samples, &grad);
      for (Eigen::Index i = 0; i < p0.size(); ++i) {
        FilterModel a = m, b = m;
        Eigen::VectorXd pa = p0, pb = p0;
        pa[i] += 1e-6;
        pb[i] -= 1e-6;
        a.set_parameters(pa);
        b.set_parameters(pb);
        wf = std::max(wf, rel((filter_loss(a, samples) - filter_loss(b, samples)) / 2e-6, grad[i]));
      }
    }
  }

  // Iris reprojection term.
  {
    const Projection P = VirtualCamera::frontal(500.0, 0.0).projection();
    const EyeModel e = make_eye_model(Vec3(30.0, 35.0, 70.0));
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(-0.6, 0.6);
    for (int t = 0; t < 20; ++t) {
      const EyeObservation obs = synthesize_eye_observation(P, e, {u(rng), u(rng)});
      const EyeRotation r{u(rng), u(rng)};
      const Vec2 g = iris_term_gradient(P, e, r, obs);
      const double h = 1e-6;
      const auto iris = [&](double y, double p) { return eye_energy(P, e, {y, p}, obs, {}).iris; };
      we = std::max(we, rel((iris(r.yaw + h, r.pitch) - iris(r.yaw - h, r.pitch)) / (2 * h), g.x()));
      we = std::max(we, rel((iris(r.yaw, r.pitch + h) - iris(r.yaw, r.pitch - h)) / (2 * h), g.y()));
    }
  }
  const double worst = std::max({w3, wn, wf, we});
  return {worst < 1e-5, "20 points each, worst relative error 3dmm " + fmt("%.2g", w3) + ", nicp " + fmt("%.2g", wn) +
                            ", filter " + fmt("%.2g", wf) + ", iris " + fmt("%.2g", we) + " (limit 1e-5)"};
}

Outcome nicp_bend() {
  const HeadFamily fam = make_head_family(3, 3, 2);
  const TriMesh& tmpl = fam.heads[0];
  const TriMesh bent = test::smooth_bend(tmpl, 1.5);
  const NicpResult res = run_nicp(tmpl, test::cloud_of(bent), PipelineConfig{}.nicp_params());
  double before = 0.0, err = 0.0;
  for (std::size_t i = 0; i < tmpl.vertex_count(); ++i) {
    before += (bent.vertices[i] - tmpl.vertices[i]).norm();
    err += (res.mesh.vertices[i] - bent.vertices[i]).norm();
  }
  before /= static_cast<double>(tmpl.vertex_count());
  err /= static_cast<double>(tmpl.vertex_count());
  bool monotone = true;
  std::size_t steps = 0;
  for (const auto& log : res.step_logs) {
    for (std::size_t k = 1; k < log.energies.size(); ++k, ++steps) monotone = monotone && log.energies[k] < log.energies[k - 1];
  }
  return {err < 0.1 && monotone, "V = " + std::to_string(tmpl.vertex_count()) + ", mean error " + fmt("%.3g", before) +
                                     " -> " + fmt("%.3g", err) + " mm (limit 0.1), " + std::to_string(steps) +
                                     " steps " + (monotone ? "strictly decreasing" : "NOT monotone")};
}

Outcome toy_grid() {
  double worst = 0.0;
  bool below = true;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const BlendshapeRig rig = test::toy_rig(seed);
    const Eigen::VectorXd truth = test::random_weights(2, seed + 50, -0.4, 1.4);
    const FrameObservation obs = test::perturbed_observation(rig, truth, 0.3, seed);
    const SolverParams p;
    const FrameSolution sol = solve_frame(rig, obs, {}, p);
    double best = std::numeric_limits<double>::infinity();
    Eigen::VectorXd arg(2), w(2);
    for (int i = 0; i <= 1000; ++i) {
      for (int j = 0; j <= 1000; ++j) {
        w << i * 1e-3, j * 1e-3;
        const double e = evaluate_frame_energy(rig, w, sol.dense_matches, obs.landmarks, nullptr, nullptr, p).total;
        if (e < best) best = e, arg = w;
      }
    }
    worst = std::max(worst, (sol.weights.weights - arg).cwiseAbs().maxCoeff());
    below = below && sol.energies.total <= best + 1e-12;
  }
  return {worst < 2e-3 && below,
          "20 instances, worst |w - grid| " + fmt("%.3g", worst) + " (limit 2e-3)" + (below ? "" : ", energy above grid")};
}

Outcome regional_joint() {
  double worst = 0.0;
  const auto compare = [&](const BlendshapeRig& rig, const FrameObservation& obs, const SolverHistory& hist) {
    SolverParams joint;
    joint.partition = false;
    const FrameSolution a = solve_frame(rig, obs, hist, {});
    const FrameSolution b = solve_frame(rig, obs, hist, joint);
    worst = std::max(worst, (a.weights.weights - b.weights.weights).cwiseAbs().maxCoeff());
  };
  for (std::uint64_t s = 0; s < 5; ++s) {
    const BlendshapeRig rig = test::grid_rig(4, 8 + s);
    const FrameObservation obs =
        test::perturbed_observation(rig, test::random_weights(rig.shape_count(), 3 + s, -0.3, 1.3), 0.2, 4 + s, 2);
    SolverHistory hist;
    hist.prev = FrameWeights{1, test::random_weights(rig.shape_count(), 5 + s)};
    hist.prev2 = FrameWeights{0, test::random_weights(rig.shape_count(), 6 + s)};
    compare(rig, obs, hist);
  }
  // The head rig: 9 regions with disjoint vertex support.
  const BlendshapeRig& rig = head_rig();
  for (std::uint64_t s = 0; s < 5; ++s) {
    const FrameObservation obs =
        test::perturbed_observation(rig, test::random_weights(rig.shape_count(), 60 + s, -0.2, 1.2), 0.3, 70 + s, 2);
    SolverHistory hist;
    hist.prev = FrameWeights{1, test::random_weights(rig.shape_count(), 80 + s)};
    hist.prev2 = FrameWeights{0, test::random_weights(rig.shape_count(), 90 + s)};
    compare(rig, obs, hist);
  }
  return {worst < 1e-9, "5 grid rigs + 5 head-rig frames, worst |regional - joint| " + fmt("%.3g", worst) + " (limit 1e-9)"};
}

Outcome smoothing() {
  const BlendshapeRig& rig = head_rig();
  const std::size_t T = 200;
  const Eigen::MatrixXd curves = make_weight_curves(T, rig.shape_count(), 4);
  std::vector<FrameObservation> frames;
  for (std::size_t t = 0; t < T; ++t) {
    frames.push_back(test::perturbed_observation(rig, curves.row(static_cast<Eigen::Index>(t)).transpose(), 1.0, 1000 + t,
                                                 static_cast<long>(t)));
  }
  const auto second_diff = [&](double alpha) {
    SolverParams p;
    p.alpha_smooth = alpha;
    const auto out = solve_sequence(rig, frames, p);
    double s = 0.0;
    for (std::size_t t = 2; t < out.size(); ++t) {
      s += (out[t].weights.weights - 2.0 * out[t - 1].weights.weights + out[t - 2].weights.weights).squaredNorm();
    }
    return s / static_cast<double>(out.size() - 2);
  };
  const double on = second_diff(0.2);
  const double off = second_diff(0.0);
  return {on < off, "200 frames, mean squared second difference " + fmt("%.4g", on) + " (0.2) vs " + fmt("%.4g", off) + " (0)"};
}

Outcome filter_training() {
  // One subject, independent motion and sensor noise per sequence.
  const int count = 20, held = 4;
  std::vector<TrainingSequence> seqs;
  for (int s = 0; s < count; ++s) {
    PipelineConfig c;
    c.synth_seed = 100;
    c.motion_seed = 5000 + s;
    c.frames = 200;
    c.head_rings = 40;
    c.head_segments = 53;
    c.dense_count = 0;
    c.cloud_source = "vertices";
    seqs.push_back(make_training_sequence(c));
  }
  std::vector<int> order(count);
  for (int i = 0; i < count; ++i) order[static_cast<std::size_t>(i)] = i;
  std::mt19937_64 split(5);
  std::shuffle(order.begin(), order.end(), split);

  const std::size_t n = 3;
  const auto K = static_cast<std::size_t>(seqs[0].raw.cols());
  std::vector<FilterSample> train;
  for (int i = 0; i < count - held; ++i) {
    const auto& s = seqs[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
    const auto part = make_filter_samples(s.raw, s.truth, n);
    train.insert(train.end(), part.begin(), part.end());
  }
  FilterTrainParams p;
  p.hidden = {64, 64};
  p.epochs = 30;
  p.seed = 1;
  const FilterTrainResult res = train_filter(train, n, K, p);

  double raw_mse = 0.0, filt_mse = 0.0;
  bool identity = true;
  FilterModel zero = make_filter_model(n, K, p.hidden, 7);
  zero.set_parameters(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(zero.parameter_count())));
  for (int i = count - held; i < count; ++i) {
    const auto& s = seqs[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
    const Eigen::Index rows = s.raw.rows() - static_cast<Eigen::Index>(n);
    const double cells = static_cast<double>(rows * s.raw.cols() * held);
    raw_mse += (s.raw - s.truth).bottomRows(rows).squaredNorm() / cells;
    filt_mse += (filter_sequence(res.model, s.raw) - s.truth).bottomRows(rows).squaredNorm() / cells;
    identity = identity && filter_sequence(zero, s.raw) == s.raw;
  }
  return {filt_mse < raw_mse && identity, std::to_string(count - held) + "/" + std::to_string(held) +
                                              " seeded split, held-out MSE " + fmt("%.4g", filt_mse) + " vs raw " +
                                              fmt("%.4g", raw_mse) + ", zero-parameter filter " +
                                              (identity ? "exact identity" : "NOT identity")};
}

Outcome gaze() {
  const PipelineConfig cfg;
  const EyeModel e = cfg.left_eye();
  const Projection K = cfg.camera().projection();
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  double worst = 0.0;
  for (int t = 0; t < 20; ++t) {
    RigidTransform pose = RigidTransform::from_axis_angle(Vec3(u(rng), u(rng), u(rng)).normalized(), 0.2 * std::abs(u(rng)),
                                                          20.0 * Vec3(u(rng), u(rng), u(rng)));
    const Projection P = K * pose.matrix();
    const EyeRotation truth{0.6 * u(rng), 0.6 * u(rng)};
    const auto sol = solve_gaze(P, e, synthesize_eye_observation(P, e, truth), {}, cfg.gaze_params());
    worst = std::max({worst, std::abs(sol.rotation.yaw - truth.yaw), std::abs(sol.rotation.pitch - truth.pitch)});
  }

  std::mt19937_64 prng(11);
  std::uniform_real_distribution<double> c(-0.5, 0.5);
  double mc_worst = 0.0;
  for (int t = 0; t < 20;) {
    const auto a = test::random_convex(prng, Vec2(c(prng), c(prng)), 2.0);
    const auto b = test::random_convex(prng, Vec2(c(prng), c(prng)), 2.0);
    const double exact = convex_intersection_area(a, b);
    if (exact < 0.5) continue;
    ++t;
    Eigen::AlignedBox2d ba, bb;
    for (const auto& p : a) ba.extend(p);
    for (const auto& p : b) bb.extend(p);
    const Eigen::AlignedBox2d box = ba.intersection(bb);
    std::mt19937_64 mc(100 + static_cast<std::uint64_t>(t));
    std::uniform_real_distribution<double> ux(box.min().x(), box.max().x());
    std::uniform_real_distribution<double> uy(box.min().y(), box.max().y());
    const int N = 1000000;
    int hits = 0;
    for (int i = 0; i < N; ++i) {
      const Vec2 p(ux(mc), uy(mc));
      hits += point_in_convex_polygon(a, p) && point_in_convex_polygon(b, p) ? 1 : 0;
    }
    mc_worst = std::max(mc_worst, std::abs(box.volume() * hits / N - exact) / exact);
  }
  return {worst < 0.2 * kDeg && mc_worst < 0.01, "20 head+eye poses, worst angle error " + fmt("%.3g", worst / kDeg) +
                                                     " deg (limit 0.2); 20 overlaps, worst MC deviation " +
                                                     fmt("%.3g", 100.0 * mc_worst) + "% (limit 1%)"};
}

Outcome realtime() {
  const PipelineConfig cfg;
  const SyntheticSubject subject = make_synthetic_subject(cfg);
  RealtimeLoop loop(cfg, subject.rig);
  std::size_t met = 0, failed = 0;
  std::vector<double> totals;
  for (std::size_t t = 0; t < static_cast<std::size_t>(cfg.frames); ++t) {
    const FrameResult r = loop.process(synthesize_frame(cfg, subject, t));
    totals.push_back(r.timings_ms.total);
    met += r.timings_ms.total < 1000.0 / 30.0 ? 1 : 0;
    failed += r.failed() ? 1 : 0;
  }
  const double frac = static_cast<double>(met) / static_cast<double>(totals.size());
  return {frac >= 0.95 && failed == 0,
          "K = " + std::to_string(subject.rig.shape_count()) + ", " + std::to_string(subject.rig.dense_vertices.size()) +
              " dense vertices, " + std::to_string(totals.size()) + " frames, " + fmt("%.1f", 100.0 * frac) +
              "% under 33.3 ms (p95 " + fmt("%.1f", percentile(totals, 95)) + " ms, max " +
              fmt("%.1f", *std::max_element(totals.begin(), totals.end())) + " ms), " + std::to_string(failed) + " failed"};
}

Outcome naive_oracles() {
  double w3 = 0.0, wn = 0.0, ws = 0.0, we = 0.0;
  {
    const HeadFamily fam = make_head_family(21, 50, 8);
    const MorphableModel m = build_pca(fam.heads, 8);
    for (std::uint64_t s = 0; s < 5; ++s) {
      const auto corr = test::random_3dmm_correspondences(m, s, 200);
      const Eigen::VectorXd w = Eigen::VectorXd::Random(8) * 5.0;
      const Energy3dmm e = evaluate_3dmm_energy(m, w, corr, 0.1);
      w3 = std::max(w3, test::max_abs_rel_diff(e.total, test::naive_3dmm_energy(m, w, corr, 0.1, 0.1)));
    }
  }
  {
    const HeadFamily fam = make_head_family(2, 3, 2, {.rings = 4, .segments = 6});
    const TriMesh& mesh = fam.heads[1];
    for (auto weighting : {EdgeWeighting::uniform, EdgeWeighting::cotangent}) {
      const EdgeSet edges = build_edge_set(mesh, weighting);
      for (std::uint64_t s = 0; s < 10; ++s) {
        const AffineField X = test::random_field(mesh.vertex_count(), s);
        auto corr = test::exact_correspondences(test::smooth_bend(mesh, 2.0));
        corr[3].valid = false;
        NicpParams p;
        p.gamma = 0.5 + 0.1 * static_cast<double>(s);
        p.alpha_landmark = 0.5;
        p.landmark_vertices = {1, 7, 12};
        p.landmark_targets = {Vec3(1, 2, 3), Vec3(-4, 5, 6), Vec3(0, 0, 90)};
        const NicpEnergy e = evaluate_nicp_energy(X, mesh, corr, edges, p);
        const auto t = test::naive_nicp_terms(X, mesh, corr, edges, p);
        const double total = t.dis + p.alpha_arap * t.arap + p.alpha_reg * t.reg + p.alpha_landmark * t.landmark;
        wn = std::max({wn, test::max_abs_rel_diff(e.dis, t.dis), test::max_abs_rel_diff(e.arap, t.arap),
                       test::max_abs_rel_diff(e.reg, t.reg), test::max_abs_rel_diff(e.total, total)});
      }
    }
  }
  {
    const BlendshapeRig& rig = head_rig();
    const SolverParams p;
    for (std::uint64_t s = 0; s < 5; ++s) {
      const FrameObservation obs = test::perturbed_observation(rig, test::random_weights(rig.shape_count(), 77 + s), 0.7, s, 2);
      SolverHistory hist;
      hist.prev = FrameWeights{1, test::random_weights(rig.shape_count(), 78 + s)};
      hist.prev2 = FrameWeights{0, test::random_weights(rig.shape_count(), 79 + s)};
      const FrameSolution sol = solve_frame(rig, obs, hist, p);
      const auto t = test::naive_frame_terms(rig, sol.weights.weights, sol.dense_matches, obs.landmarks, &*hist.prev,
                                             &*hist.prev2);
      const double total = t.dense + p.alpha_marks * t.marks + p.alpha_smooth * t.smooth + p.alpha_reg * t.reg;
      const auto& e = sol.energies;
      ws = std::max({ws, test::max_abs_rel_diff(e.dense, t.dense), test::max_abs_rel_diff(e.marks, t.marks),
                     test::max_abs_rel_diff(e.smooth, t.smooth), test::max_abs_rel_diff(e.reg, t.reg),
                     test::max_abs_rel_diff(e.total, total)});
    }
  }
  {
    const Projection P = VirtualCamera::frontal(500.0, 0.0).projection();
    const EyeModel e = make_eye_model(Vec3(30.0, 35.0, 70.0));
    const EyeObservation obs = synthesize_eye_observation(P, e, {0.3, 0.15});
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-0.4, 0.4);
    for (int t = 0; t < 10; ++t) {
      const EyeRotation r{u(rng), u(rng)};
      const GazeHistory h{EyeRotation{u(rng), u(rng)}, EyeRotation{u(rng), u(rng)}};
      const EyeEnergy en = eye_energy(P, e, r, obs, h, 1.0, 0.5);
      const auto n = test::naive_eye_terms(P, e, r, obs, h);
      we = std::max({we, test::max_abs_rel_diff(en.iris, n.iris), test::max_abs_rel_diff(en.overlap, n.overlap),
                     test::max_abs_rel_diff(en.smooth, n.smooth),
                     test::max_abs_rel_diff(en.total, n.iris + n.overlap + 0.5 * n.smooth)});
    }
  }
  const double worst = std::max({w3, wn, ws, we});
  return {worst < 1e-12, "worst relative difference 3dmm " + fmt("%.2g", w3) + ", nicp " + fmt("%.2g", wn) + ", solver " +
                             fmt("%.2g", ws) + ", eye " + fmt("%.2g", we) + " (limit 1e-12)"};
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    double limit_s;
    const char* name;
    std::function<Outcome()> run;
  };
  const Criterion criteria[] = {
      {1, 1, "default energy weights", default_weights},
      {2, 10, "morphable model recovery", identity_recovery},
      {3, 30, "analytic gradients vs central differences", gradients},
      {4, 60, "non-rigid registration of a bent head", nicp_bend},
      {5, 30, "K = 2 solve vs grid search", toy_grid},
      {6, 10, "regional vs joint solve", regional_joint},
      {7, 60, "temporal smoothing", smoothing},
      {8, 120, "trained filter on held-out sequences", filter_training},
      {9, 60, "gaze recovery and overlap area", gaze},
      {10, 60, "real-time loop budget", realtime},
      {11, 30, "naive energy oracles", naive_oracles},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool pass = o.pass && secs < c.limit_s;
    failures += pass ? 0 : 1;
    std::printf("criterion %2d: %s  %s: %s [%.2f s, limit %.0f s]\n", c.id, pass ? "PASS" : "FAIL", c.name,
                o.detail.c_str(), secs, c.limit_s);
    std::fflush(stdout);
  }
  std::printf("%d of 11 criteria passed\n", 11 - failures);
  return failures == 0 ? 0 : 1;
}
