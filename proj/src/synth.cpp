#include "facecap/synth.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "facecap/error.hpp"

namespace facecap {

namespace {

std::mt19937_64 seeded_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                    static_cast<std::uint32_t>(tag)};
  return std::mt19937_64(seq);
}

Vec3 direction_from_angles(double azimuth, double elevation) {
  return {std::cos(elevation) * std::sin(azimuth), std::sin(elevation), std::cos(elevation) * std::cos(azimuth)};
}

// Unit directions on the bounding ellipsoid (centre and half extents of the AABB).
std::vector<Vec3> ellipsoid_unit_dirs(const TriMesh& mesh) {
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  for (const auto& v : mesh.vertices) {
    lo = lo.cwiseMin(v);
    hi = hi.cwiseMax(v);
  }
  const Vec3 centre = 0.5 * (lo + hi);
  const Vec3 half = (0.5 * (hi - lo)).cwiseMax(Vec3::Constant(1e-12));
  std::vector<Vec3> out(mesh.vertices.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const Vec3 u = (mesh.vertices[i] - centre).cwiseQuotient(half);
    const double n = u.norm();
    out[i] = n > 0.0 ? Vec3(u / n) : Vec3(Vec3::UnitZ());
  }
  return out;
}

constexpr std::uint64_t kFieldTag = 1;
constexpr std::uint64_t kCoeffTag = 2;
constexpr std::uint64_t kNoiseTag = 3;
constexpr std::uint64_t kRigTag = 4;
constexpr std::uint64_t kCurveTag = 5;

}  // namespace

HeadFamily make_head_family(std::uint64_t base_seed, std::size_t count, std::size_t num_modes,
                            const HeadTemplateConfig& config) {
  if (num_modes == 0) throw Error("make_head_family: num_modes must be positive");
  if (count < num_modes + 1) {
    throw Error("make_head_family: need count >= num_modes + 1 (got count=" + std::to_string(count) +
                ", num_modes=" + std::to_string(num_modes) + ")");
  }

  HeadFamily family;
  family.template_mesh = make_ellipsoid(config.radii, config.rings, config.segments);
  const auto& verts = family.template_mesh.vertices;
  const std::size_t V = verts.size();

  // Analytic ellipsoid normals and unit parameter directions.
  std::vector<Vec3> normal(V), unit(V);
  const Vec3 inv_sq = config.radii.cwiseProduct(config.radii).cwiseInverse();
  for (std::size_t i = 0; i < V; ++i) {
    normal[i] = verts[i].cwiseProduct(inv_sq).normalized();
    unit[i] = verts[i].cwiseQuotient(config.radii).normalized();
  }
  family.template_mesh.normals = normal;

  for (std::size_t k = 0; k < num_modes; ++k) {
    auto rng = seeded_rng(base_seed, k, kFieldTag);
    std::normal_distribution<double> gauss;
    std::uniform_real_distribution<double> freq(1.0, 2.5);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    const Vec3 omega = Vec3(gauss(rng), gauss(rng), gauss(rng)).normalized() * freq(rng);
    const double phi = phase(rng);
    Eigen::VectorXd field(3 * static_cast<Eigen::Index>(V));
    for (std::size_t i = 0; i < V; ++i) {
      field.segment<3>(3 * static_cast<Eigen::Index>(i)) = std::cos(omega.dot(unit[i]) + phi) * normal[i];
    }
    family.fields.push_back(std::move(field));
    family.field_sigma.push_back(config.mode_scale / (1.0 + 0.35 * static_cast<double>(k)));
  }

  auto rng = seeded_rng(base_seed, 0, kCoeffTag);
  std::normal_distribution<double> gauss;
  for (std::size_t h = 0; h < count; ++h) {
    Eigen::VectorXd c(static_cast<Eigen::Index>(num_modes));
    for (std::size_t k = 0; k < num_modes; ++k) c[static_cast<Eigen::Index>(k)] = gauss(rng) * family.field_sigma[k];
    family.heads.push_back(synthesize_head(family.template_mesh, family.fields, c));
    family.coefficients.push_back(std::move(c));
  }
  return family;
}

TriMesh synthesize_head(const TriMesh& template_mesh, const std::vector<Eigen::VectorXd>& fields,
                        const Eigen::VectorXd& coeffs) {
  if (static_cast<std::size_t>(coeffs.size()) != fields.size()) throw Error("synthesize_head: coefficient count mismatch");
  TriMesh out;
  out.faces = template_mesh.faces;
  Eigen::VectorXd x = stack_vertices(template_mesh.vertices);
  for (std::size_t k = 0; k < fields.size(); ++k) {
    const double c = coeffs[static_cast<Eigen::Index>(k)];
    if (c != 0.0) x += c * fields[k];
  }
  out.vertices = unstack_vertices(x);
  return out;
}

VirtualCamera VirtualCamera::frontal(double distance, double noise_sigma) {
  VirtualCamera cam;
  cam.intrinsics << 525.0, 0.0, 319.5, 0.0, 525.0, 239.5, 0.0, 0.0, 1.0;
  cam.width = 640;
  cam.height = 480;
  cam.pose.rotation = Eigen::Vector3d(1.0, -1.0, -1.0).asDiagonal();
  cam.pose.translation = Vec3(0.0, 0.0, distance);
  cam.noise_sigma = noise_sigma;
  return cam;
}

Eigen::Matrix<double, 3, 4> VirtualCamera::projection() const {
  const RigidTransform world_to_cam = pose.inverse();
  Eigen::Matrix<double, 3, 4> ext;
  ext.leftCols<3>() = world_to_cam.rotation;
  ext.col(3) = world_to_cam.translation;
  return intrinsics * ext;
}

void VirtualCamera::validate() const {
  if (!(intrinsics(0, 0) > 0.0) || !(intrinsics(1, 1) > 0.0)) throw Error("VirtualCamera: focal lengths must be positive");
  if (width <= 0 || height <= 0) throw Error("VirtualCamera: resolution must be positive");
  const double cx = intrinsics(0, 2);
  const double cy = intrinsics(1, 2);
  if (cx < 0.0 || cx > width || cy < 0.0 || cy > height) throw Error("VirtualCamera: principal point outside image");
  if (!pose.is_valid(1e-9)) throw Error("VirtualCamera: pose is not a rigid transform");
  if (noise_sigma < 0.0) throw Error("VirtualCamera: negative noise sigma");
}

DepthScan render_depth_scan(const TriMesh& mesh, const VirtualCamera& cam, std::uint64_t noise_seed) {
  cam.validate();
  mesh.validate();
  const RigidTransform to_cam = cam.pose.inverse();
  std::vector<Vec3> cv(mesh.vertices.size());
  for (std::size_t i = 0; i < cv.size(); ++i) cv[i] = to_cam.apply(mesh.vertices[i]);

  const double fx = cam.intrinsics(0, 0), fy = cam.intrinsics(1, 1);
  const double cx = cam.intrinsics(0, 2), cy = cam.intrinsics(1, 2), skew = cam.intrinsics(0, 1);
  const Mat3 kinv = cam.intrinsics.inverse();
  const std::size_t npix = static_cast<std::size_t>(cam.width) * static_cast<std::size_t>(cam.height);
  std::vector<double> depth(npix, std::numeric_limits<double>::infinity());
  std::vector<std::size_t> hit_face(npix, std::numeric_limits<std::size_t>::max());
  constexpr double kNear = 1e-6;

  std::size_t in_front = 0;
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    const auto& [ia, ib, ic] = mesh.faces[f];
    const Vec3& a = cv[ia];
    const Vec3& b = cv[ib];
    const Vec3& c = cv[ic];
    if (a.z() <= kNear || b.z() <= kNear || c.z() <= kNear) continue;
    ++in_front;
    double umin = 1e300, umax = -1e300, vmin = 1e300, vmax = -1e300;
    for (const Vec3* p : {&a, &b, &c}) {
      const double u = (fx * p->x() + skew * p->y()) / p->z() + cx;
      const double v = fy * p->y() / p->z() + cy;
      umin = std::min(umin, u);
      umax = std::max(umax, u);
      vmin = std::min(vmin, v);
      vmax = std::max(vmax, v);
    }
    const int u0 = std::max(0, static_cast<int>(std::floor(umin)));
    const int u1 = std::min(cam.width - 1, static_cast<int>(std::ceil(umax)));
    const int v0 = std::max(0, static_cast<int>(std::floor(vmin)));
    const int v1 = std::min(cam.height - 1, static_cast<int>(std::ceil(vmax)));
    if (u0 > u1 || v0 > v1) continue;

    // Moller-Trumbore against rays from the camera centre.
    const Vec3 e1 = b - a;
    const Vec3 e2 = c - a;
    for (int v = v0; v <= v1; ++v) {
      for (int u = u0; u <= u1; ++u) {
        const Vec3 d = kinv * Vec3(u, v, 1.0);
        const Vec3 p = d.cross(e2);
        const double det = e1.dot(p);
        if (std::abs(det) < 1e-14) continue;
        const double inv = 1.0 / det;
        const Vec3 s = -a;
        const double bu = s.dot(p) * inv;
        if (bu < 0.0 || bu > 1.0) continue;
        const Vec3 q = s.cross(e1);
        const double bv = d.dot(q) * inv;
        if (bv < 0.0 || bu + bv > 1.0) continue;
        const double t = e2.dot(q) * inv;
        const std::size_t pix = static_cast<std::size_t>(v) * static_cast<std::size_t>(cam.width) + static_cast<std::size_t>(u);
        if (t > kNear && (t < depth[pix] || (t == depth[pix] && f < hit_face[pix]))) {
          depth[pix] = t;
          hit_face[pix] = f;
        }
      }
    }
  }

  DepthScan scan;
  if (in_front == 0) {
    scan.warning = "render_depth_scan: mesh is entirely behind the camera";
    return scan;
  }
  auto rng = seeded_rng(noise_seed, 0, kNoiseTag);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t pix = 0; pix < npix; ++pix) {
    if (hit_face[pix] == std::numeric_limits<std::size_t>::max()) continue;
    const double u = static_cast<double>(pix % static_cast<std::size_t>(cam.width));
    const double v = static_cast<double>(pix / static_cast<std::size_t>(cam.width));
    const Vec3 d = kinv * Vec3(u, v, 1.0);
    const double len = d.norm();
    const double range = depth[pix] * len + (cam.noise_sigma > 0.0 ? cam.noise_sigma * noise(rng) : 0.0);
    const Vec3 p_cam = d * (range / len);
    const Vec3 p_world = cam.pose.apply(p_cam);
    Vec3 n = face_normal(mesh, hit_face[pix]);
    if (n.dot(p_world - cam.center()) > 0.0) n = -n;
    scan.cloud.points.push_back(p_world);
    scan.cloud.normals.push_back(n);
    scan.face_index.push_back(hit_face[pix]);
    scan.pixel_index.push_back(pix);
  }
  if (scan.cloud.empty()) scan.warning = "render_depth_scan: no pixel hit the mesh";
  scan.boundary = scan_boundary_mask(scan, cam.width, cam.height, 1);
  return scan;
}

std::vector<bool> scan_boundary_mask(const DepthScan& scan, int width, int height, int band) {
  const std::size_t npix = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  std::vector<bool> hit(npix, false);
  for (auto pix : scan.pixel_index) {
    if (pix >= npix) throw Error("scan_boundary_mask: pixel index outside the image");
    hit[pix] = true;
  }
  std::vector<bool> out(scan.pixel_index.size(), false);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const int u = static_cast<int>(scan.pixel_index[i] % static_cast<std::size_t>(width));
    const int v = static_cast<int>(scan.pixel_index[i] / static_cast<std::size_t>(width));
    for (int dv = -band; dv <= band && !out[i]; ++dv) {
      for (int du = -band; du <= band; ++du) {
        const int uu = u + du, vv = v + dv;
        if (uu < 0 || vv < 0 || uu >= width || vv >= height ||
            !hit[static_cast<std::size_t>(vv) * static_cast<std::size_t>(width) + static_cast<std::size_t>(uu)]) {
          out[i] = true;
          break;
        }
      }
    }
  }
  return out;
}

const std::vector<FaceRegion>& face_regions() {
  static const std::vector<FaceRegion> regions{
      {"brow_left", 0.35, 0.45},  {"brow_right", -0.35, 0.45}, {"eye_left", 0.35, 0.22},
      {"eye_right", -0.35, 0.22}, {"nose", 0.0, 0.12},         {"mouth", 0.0, -0.30},
      {"jaw", 0.0, -0.62},        {"cheek_left", 0.62, -0.12}, {"cheek_right", -0.62, -0.12},
  };
  return regions;
}

std::size_t region_of_shape(std::string_view name) {
  const auto starts = [&](std::string_view p) { return name.substr(0, p.size()) == p; };
  const auto ends = [&](std::string_view s) { return name.size() >= s.size() && name.substr(name.size() - s.size()) == s; };
  const bool left = ends("Left");
  if (starts("eye")) return left ? 2 : 3;
  if (name == "browInnerUp") return 4;
  if (starts("brow")) return left ? 0 : 1;
  if (starts("nose")) return 4;
  if (starts("jaw")) return 6;
  if (name == "cheekPuff") return 5;
  if (starts("cheek")) return left ? 7 : 8;
  if (starts("mouth")) return 5;
  throw Error("region_of_shape: no region for '" + std::string(name) + "'");
}

std::vector<Vec2> ellipsoid_directions(const TriMesh& mesh) {
  const auto dirs = ellipsoid_unit_dirs(mesh);
  std::vector<Vec2> out(dirs.size());
  for (std::size_t i = 0; i < dirs.size(); ++i) {
    out[i] = Vec2(std::atan2(dirs[i].x(), dirs[i].z()), std::asin(std::clamp(dirs[i].y(), -1.0, 1.0)));
  }
  return out;
}

BlendshapeRig make_rig_from_head(const TriMesh& head, std::uint64_t seed, const RigConfig& config) {
  head.validate();
  const std::size_t V = head.vertex_count();
  const auto dirs = ellipsoid_unit_dirs(head);
  const auto& regions = face_regions();

  BlendshapeRig rig;
  rig.neutral.vertices = head.vertices;
  rig.neutral.faces = head.faces;
  for (const auto& r : regions) rig.region_names.push_back(r.name);
  rig.region_vertices.resize(regions.size());

  std::vector<Vec3> centres;
  for (const auto& r : regions) centres.push_back(direction_from_angles(r.azimuth, r.elevation));
  const double cut = std::cos(config.region_radius);
  std::vector<int> owner(V, -1);
  for (std::size_t v = 0; v < V; ++v) {
    double best = -2.0;
    int best_r = -1;
    for (std::size_t r = 0; r < centres.size(); ++r) {
      const double c = dirs[v].dot(centres[r]);
      if (c > best) {
        best = c;
        best_r = static_cast<int>(r);
      }
    }
    if (best >= cut) {
      owner[v] = best_r;
      rig.region_vertices[static_cast<std::size_t>(best_r)].push_back(v);
    }
  }
  for (std::size_t r = 0; r < regions.size(); ++r) {
    if (rig.region_vertices[r].empty()) throw Error("make_rig_from_head: region '" + regions[r].name + "' has no vertices; mesh too coarse");
  }

  const auto& names = arkit_shape_names();
  rig.deltas = Eigen::MatrixXd::Zero(3 * static_cast<Eigen::Index>(V), static_cast<Eigen::Index>(names.size()));
  auto rng = seeded_rng(seed, 0, kRigTag);
  std::uniform_real_distribution<double> unit01(0.0, 1.0);
  std::normal_distribution<double> gauss;
  // Bump centres per region by farthest-point sampling from a random start,
  // which keeps the shapes of a crowded region distinguishable.
  std::vector<std::vector<std::size_t>> centres_of(regions.size());
  std::vector<std::size_t> used(regions.size(), 0);
  for (std::size_t r = 0; r < regions.size(); ++r) {
    const auto& members = rig.region_vertices[r];
    std::size_t count = 0;
    for (const auto& n : names) count += region_of_shape(n) == r ? 1 : 0;
    std::vector<double> gap(members.size(), std::numeric_limits<double>::infinity());
    std::size_t pick = std::min(members.size() - 1, static_cast<std::size_t>(unit01(rng) * members.size()));
    for (std::size_t c = 0; c < count; ++c) {
      centres_of[r].push_back(members[pick]);
      for (std::size_t i = 0; i < members.size(); ++i) {
        gap[i] = std::min(gap[i], std::acos(std::clamp(dirs[members[i]].dot(dirs[members[pick]]), -1.0, 1.0)));
      }
      pick = static_cast<std::size_t>(std::max_element(gap.begin(), gap.end()) - gap.begin());
    }
  }
  for (std::size_t k = 0; k < names.size(); ++k) {
    const std::size_t r = region_of_shape(names[k]);
    rig.names.emplace_back(names[k]);
    rig.shape_region.push_back(r);
    const auto& members = rig.region_vertices[r];
    const std::size_t centre_vertex = centres_of[r][used[r]++];
    const double radius = config.min_bump_radius + (config.max_bump_radius - config.min_bump_radius) * unit01(rng);
    const double amplitude = config.min_amplitude + (config.max_amplitude - config.min_amplitude) * unit01(rng);
    const Vec3 direction = Vec3(gauss(rng), gauss(rng), gauss(rng)).normalized();
    for (auto v : members) {
      const double ang = std::acos(std::clamp(dirs[v].dot(dirs[centre_vertex]), -1.0, 1.0));
      if (ang >= radius) continue;
      const double s = 1.0 - (ang / radius) * (ang / radius);
      rig.deltas.block<3, 1>(3 * static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(k)) = amplitude * s * s * direction;
    }
  }

  // Dense selection: front-facing vertices, optionally the most frontal N.
  std::vector<std::size_t> front;
  for (std::size_t v = 0; v < V; ++v) {
    if (dirs[v].z() >= config.dense_min_facing) front.push_back(v);
  }
  if (config.dense_count > 0) {
    if (config.dense_count > front.size()) {
      std::vector<std::size_t> all(V);
      for (std::size_t v = 0; v < V; ++v) all[v] = v;
      front = all;
    }
    std::stable_sort(front.begin(), front.end(), [&](std::size_t a, std::size_t b) { return dirs[a].z() > dirs[b].z(); });
    front.resize(std::min(config.dense_count, front.size()));
    std::sort(front.begin(), front.end());
  }
  rig.dense_vertices = front;

  const auto nearest_vertex = [&](const Vec3& dir) {
    std::size_t best = 0;
    double best_dot = -2.0;
    for (std::size_t v = 0; v < V; ++v) {
      const double c = dirs[v].dot(dir);
      if (c > best_dot) {
        best_dot = c;
        best = v;
      }
    }
    return best;
  };
  std::vector<std::size_t> landmarks;
  for (std::size_t r = 0; r < regions.size(); ++r) {
    for (double off : {0.0, -0.1, 0.1}) {
      const auto v = nearest_vertex(direction_from_angles(regions[r].azimuth + off, regions[r].elevation));
      if (owner[v] == static_cast<int>(r)) landmarks.push_back(v);
    }
  }
  const std::vector<Vec2> anchor_dirs{{0.0, 0.80}, {0.4, 0.85}, {-0.4, 0.85}, {0.95, 0.30},
                                      {-0.95, 0.30}, {1.0, -0.25}, {-1.0, -0.25}};
  for (const auto& a : anchor_dirs) {
    const auto v = nearest_vertex(direction_from_angles(a.x(), a.y()));
    if (owner[v] < 0) {
      rig.anchor_vertices.push_back(v);
      landmarks.push_back(v);
    }
  }
  std::sort(landmarks.begin(), landmarks.end());
  landmarks.erase(std::unique(landmarks.begin(), landmarks.end()), landmarks.end());
  std::sort(rig.anchor_vertices.begin(), rig.anchor_vertices.end());
  rig.anchor_vertices.erase(std::unique(rig.anchor_vertices.begin(), rig.anchor_vertices.end()), rig.anchor_vertices.end());
  rig.landmark_vertices = std::move(landmarks);

  rig.validate();
  return rig;
}

Eigen::MatrixXd make_weight_curves(std::size_t frames, std::size_t shapes, std::uint64_t seed, double knot_spacing,
                                   double active_fraction) {
  if (knot_spacing <= 0.0) throw Error("make_weight_curves: knot spacing must be positive");
  Eigen::MatrixXd out(static_cast<Eigen::Index>(frames), static_cast<Eigen::Index>(shapes));
  const std::size_t knots = static_cast<std::size_t>(std::ceil(static_cast<double>(frames) / knot_spacing)) + 4;
  for (std::size_t k = 0; k < shapes; ++k) {
    auto rng = seeded_rng(seed, k, kCurveTag);
    std::uniform_real_distribution<double> unit01(0.0, 1.0);
    std::vector<double> ctrl(knots);
    for (auto& c : ctrl) c = unit01(rng) < active_fraction ? unit01(rng) : 0.0;
    for (std::size_t t = 0; t < frames; ++t) {
      const double x = static_cast<double>(t) / knot_spacing;
      const auto i = static_cast<std::size_t>(std::floor(x));
      const double s = x - static_cast<double>(i);
      // Uniform cubic B-spline basis; convex weights keep values in [0, 1].
      const double b0 = (1 - s) * (1 - s) * (1 - s) / 6.0;
      const double b1 = (3 * s * s * s - 6 * s * s + 4) / 6.0;
      const double b2 = (-3 * s * s * s + 3 * s * s + 3 * s + 1) / 6.0;
      const double b3 = s * s * s / 6.0;
      const double w = b0 * ctrl[i] + b1 * ctrl[i + 1] + b2 * ctrl[i + 2] + b3 * ctrl[i + 3];
      out(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(k)) = std::clamp(w, 0.0, 1.0);
    }
  }
  return out;
}

}  // namespace facecap
