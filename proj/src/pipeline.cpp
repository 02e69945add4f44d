#include "facecap/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <variant>

#include <json.hpp>

#include "facecap/error.hpp"
#include "facecap/mesh_io.hpp"
#include "facecap/rigid.hpp"

namespace facecap {

using nlohmann::json;

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

// ---- config fields ------------------------------------------------------

using C = PipelineConfig;
using FieldPtr = std::variant<double C::*, int C::*, bool C::*, std::string C::*, std::vector<double> C::*>;

struct FieldSpec {
  const char* section;
  const char* key;
  FieldPtr field;
};

const std::vector<FieldSpec>& config_fields() {
  static const std::vector<FieldSpec> fields{
      {"identity", "alpha_3dmm", &C::alpha_3dmm},
      {"identity", "fit_iterations", &C::fit_iterations},
      {"identity", "fit_tolerance", &C::fit_tolerance},
      {"identity", "alpha_narap", &C::alpha_narap},
      {"identity", "alpha_nreg", &C::alpha_nreg},
      {"identity", "nicp_gamma", &C::nicp_gamma},
      {"identity", "nicp_outer_iterations", &C::nicp_outer_iterations},
      {"identity", "nicp_gn_iterations", &C::nicp_gn_iterations},
      {"identity", "max_distance", &C::identity_max_distance},
      {"identity", "max_normal_angle_deg", &C::identity_max_normal_angle_deg},

      {"solver", "alpha_rmarks", &C::alpha_rmarks},
      {"solver", "alpha_rsmooth", &C::alpha_rsmooth},
      {"solver", "alpha_rreg", &C::alpha_rreg},
      {"solver", "correspondence_passes", &C::correspondence_passes},
      {"solver", "box_constraints", &C::box_constraints},
      {"solver", "partition", &C::partition},
      {"solver", "max_distance", &C::solver_max_distance},
      {"solver", "max_normal_angle_deg", &C::solver_max_normal_angle_deg},

      {"gaze", "enabled", &C::gaze_enabled},
      {"gaze", "alpha_edis", &C::alpha_edis},
      {"gaze", "alpha_esmooth", &C::alpha_esmooth},
      {"gaze", "grid_step_deg", &C::gaze_grid_step_deg},
      {"gaze", "tolerance", &C::gaze_tolerance},
      {"gaze", "max_iterations", &C::gaze_max_iterations},
      {"gaze", "left_eye_center", &C::left_eye_center},
      {"gaze", "right_eye_center", &C::right_eye_center},
      {"gaze", "eye_radius", &C::eye_radius},
      {"gaze", "pupil_radius", &C::pupil_radius},

      {"filter", "model", &C::filter_model},
      {"filter", "history", &C::filter_history},
      {"filter", "hidden", &C::filter_hidden},
      {"filter", "epochs", &C::filter_epochs},
      {"filter", "learning_rate", &C::filter_learning_rate},
      {"filter", "batch_size", &C::filter_batch_size},
      {"filter", "history_noise", &C::filter_history_noise},
      {"filter", "seed", &C::filter_seed},

      {"camera", "fx", &C::fx},
      {"camera", "fy", &C::fy},
      {"camera", "cx", &C::cx},
      {"camera", "cy", &C::cy},
      {"camera", "width", &C::width},
      {"camera", "height", &C::height},
      {"camera", "distance", &C::camera_distance},
      {"camera", "depth_noise", &C::depth_noise},

      {"synth", "seed", &C::synth_seed},
      {"synth", "motion_seed", &C::motion_seed},
      {"synth", "frames", &C::frames},
      {"synth", "head_rings", &C::head_rings},
      {"synth", "head_segments", &C::head_segments},
      {"synth", "identity_modes", &C::identity_modes},
      {"synth", "dense_count", &C::dense_count},
      {"synth", "cloud_source", &C::cloud_source},
      {"synth", "landmark_noise", &C::landmark_noise},
      {"synth", "eye_noise", &C::eye_noise},
      {"synth", "pose_rotation", &C::pose_rotation},
      {"synth", "pose_translation", &C::pose_translation},
      {"synth", "gaze_amplitude", &C::gaze_amplitude},
      {"synth", "knot_spacing", &C::knot_spacing},
      {"synth", "active_fraction", &C::active_fraction},

      {"realtime", "budget_ms", &C::budget_ms},
      {"realtime", "record_timings", &C::record_timings},
  };
  return fields;
}

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
  return std::string(s.substr(b, e - b));
}

// Drops a trailing # comment that is not inside a string.
std::string strip_comment(std::string_view line) {
  bool in_string = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (in_string && c == '\\') {
      ++i;
    } else if (c == '"') {
      in_string = !in_string;
    } else if (c == '#' && !in_string) {
      return std::string(line.substr(0, i));
    }
  }
  return std::string(line);
}

bool parse_number(std::string_view s, double& out) {
  if (s.empty()) return false;
  if (s.front() == '+') s.remove_prefix(1);
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size() && std::isfinite(out);
}

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + "\"";
}

struct ValueParser {
  const std::string& source;
  std::size_t line;

  [[noreturn]] void fail(const std::string& what) const { throw ParseError(source, line, what); }

  double number(std::string_view s) const {
    double v = 0.0;
    if (!parse_number(trim(s), v)) fail("expected a number, got '" + std::string(s) + "'");
    return v;
  }

  void assign(PipelineConfig& cfg, const FieldPtr& field, const std::string& text) const {
    std::visit(
        [&](auto ptr) {
          using T = std::remove_reference_t<decltype(cfg.*ptr)>;
          if constexpr (std::is_same_v<T, double>) {
            cfg.*ptr = number(text);
          } else if constexpr (std::is_same_v<T, int>) {
            const double v = number(text);
            if (v != std::floor(v) || std::abs(v) > std::numeric_limits<int>::max()) fail("expected an integer");
            cfg.*ptr = static_cast<int>(v);
          } else if constexpr (std::is_same_v<T, bool>) {
            if (text == "true") {
              cfg.*ptr = true;
            } else if (text == "false") {
              cfg.*ptr = false;
            } else {
              fail("expected true or false");
            }
          } else if constexpr (std::is_same_v<T, std::string>) {
            if (text.size() < 2 || text.front() != '"' || text.back() != '"') fail("expected a quoted string");
            std::string out;
            for (std::size_t i = 1; i + 1 < text.size(); ++i) {
              if (text[i] == '\\') {
                if (i + 2 >= text.size()) fail("dangling escape");
                out += text[++i];
              } else if (text[i] == '"') {
                fail("unescaped quote inside string");
              } else {
                out += text[i];
              }
            }
            cfg.*ptr = out;
          } else {
            if (text.size() < 2 || text.front() != '[' || text.back() != ']') fail("expected an array");
            std::vector<double> values;
            const std::string inner = trim(std::string_view(text).substr(1, text.size() - 2));
            if (!inner.empty()) {
              std::size_t start = 0;
              while (true) {
                const std::size_t comma = inner.find(',', start);
                values.push_back(number(std::string_view(inner).substr(start, comma - start)));
                if (comma == std::string::npos) break;
                start = comma + 1;
              }
            }
            cfg.*ptr = values;
          }
        },
        field);
  }
};

std::string format_value(const PipelineConfig& cfg, const FieldPtr& field) {
  return std::visit(
      [&](auto ptr) -> std::string {
        using T = std::remove_cvref_t<decltype(cfg.*ptr)>;
        if constexpr (std::is_same_v<T, double>) {
          return format_double(cfg.*ptr);
        } else if constexpr (std::is_same_v<T, int>) {
          return std::to_string(cfg.*ptr);
        } else if constexpr (std::is_same_v<T, bool>) {
          return cfg.*ptr ? "true" : "false";
        } else if constexpr (std::is_same_v<T, std::string>) {
          return quote(cfg.*ptr);
        } else {
          std::string out = "[";
          for (std::size_t i = 0; i < (cfg.*ptr).size(); ++i) {
            if (i > 0) out += ", ";
            out += format_double((cfg.*ptr)[i]);
          }
          return out + "]";
        }
      },
      field);
}

Vec3 vec3_of(const std::vector<double>& v, const char* name) {
  if (v.size() != 3) throw Error(std::string("PipelineConfig: ") + name + " needs 3 values");
  return Vec3(v[0], v[1], v[2]);
}

// ---- json helpers -------------------------------------------------------

json vec_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

Eigen::VectorXd vec_from_json(const json& a, const char* what) {
  if (!a.is_array()) throw Error(std::string(what) + " must be an array");
  Eigen::VectorXd v(static_cast<Eigen::Index>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!a[i].is_number()) throw Error(std::string(what) + " must hold numbers");
    v[static_cast<Eigen::Index>(i)] = a[i].get<double>();
  }
  return v;
}

json pose_json(const RigidTransform& T) {
  json rot = json::array();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) rot.push_back(T.rotation(r, c));
  return json{{"rotation", rot}, {"translation", {T.translation.x(), T.translation.y(), T.translation.z()}}};
}

RigidTransform pose_from_json(const json& j) {
  const Eigen::VectorXd r = vec_from_json(j.at("rotation"), "head_pose.rotation");
  const Eigen::VectorXd t = vec_from_json(j.at("translation"), "head_pose.translation");
  if (r.size() != 9 || t.size() != 3) throw Error("head_pose: expected 9 rotation and 3 translation values");
  RigidTransform T;
  for (int i = 0; i < 3; ++i)
    for (int c = 0; c < 3; ++c) T.rotation(i, c) = r[3 * i + c];
  T.translation = t;
  return T;
}

json eye_json(const EyeObservation& obs) {
  json pupil = json::array();
  for (const Vec2& p : obs.pupil_polygon_2d) pupil.push_back({p.x(), p.y()});
  return json{{"iris", {obs.iris_center_2d.x(), obs.iris_center_2d.y()}}, {"pupil", pupil}};
}

EyeObservation eye_from_json(const json& j) {
  EyeObservation obs;
  const Eigen::VectorXd iris = vec_from_json(j.at("iris"), "iris");
  if (iris.size() != 2) throw Error("iris: expected [u, v]");
  obs.iris_center_2d = iris;
  for (const json& p : j.at("pupil")) {
    const Eigen::VectorXd q = vec_from_json(p, "pupil");
    if (q.size() != 2) throw Error("pupil: expected [u, v] points");
    obs.pupil_polygon_2d.push_back(q);
  }
  return obs;
}

StageStatus status_from_name(const std::string& s) {
  if (s == "ok") return StageStatus::ok;
  if (s == "failed") return StageStatus::failed;
  if (s == "skipped") return StageStatus::skipped;
  throw Error("unknown stage status '" + s + "'");
}

double elapsed_ms(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

std::mt19937_64 frame_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                    static_cast<std::uint32_t>(tag)};
  return std::mt19937_64(seq);
}

}  // namespace

// ---- config -------------------------------------------------------------

void PipelineConfig::validate() const {
  const auto nonneg = [](double v, const char* name) {
    if (!std::isfinite(v) || v < 0.0) throw Error(std::string("PipelineConfig: ") + name + " must be finite and >= 0");
  };
  const auto positive = [](double v, const char* name) {
    if (!std::isfinite(v) || v <= 0.0) throw Error(std::string("PipelineConfig: ") + name + " must be > 0");
  };
  nonneg(alpha_3dmm, "alpha_3dmm");
  nonneg(alpha_narap, "alpha_narap");
  nonneg(alpha_nreg, "alpha_nreg");
  nonneg(alpha_rmarks, "alpha_rmarks");
  nonneg(alpha_rsmooth, "alpha_rsmooth");
  nonneg(alpha_rreg, "alpha_rreg");
  nonneg(alpha_edis, "alpha_edis");
  nonneg(alpha_esmooth, "alpha_esmooth");
  nonneg(fit_tolerance, "fit_tolerance");
  nonneg(nicp_gamma, "nicp_gamma");
  positive(identity_max_distance, "identity max_distance");
  positive(solver_max_distance, "solver max_distance");
  positive(identity_max_normal_angle_deg, "identity max_normal_angle_deg");
  positive(solver_max_normal_angle_deg, "solver max_normal_angle_deg");
  for (int v : {fit_iterations, nicp_outer_iterations, nicp_gn_iterations, correspondence_passes, gaze_max_iterations,
                filter_epochs, filter_batch_size, frames, width, height, identity_modes}) {
    if (v < 1) throw Error("PipelineConfig: iteration, size and count settings must be >= 1");
  }
  if (filter_history < 0) throw Error("PipelineConfig: filter history must be >= 0");
  if (dense_count < 0) throw Error("PipelineConfig: dense_count must be >= 0");
  if (head_rings < 3 || head_segments < 3) throw Error("PipelineConfig: head_rings and head_segments must be >= 3");
  positive(gaze_grid_step_deg, "grid_step_deg");
  positive(gaze_tolerance, "gaze tolerance");
  positive(eye_radius, "eye_radius");
  positive(pupil_radius, "pupil_radius");
  if (pupil_radius >= eye_radius) throw Error("PipelineConfig: pupil_radius must be below eye_radius");
  vec3_of(left_eye_center, "left_eye_center");
  vec3_of(right_eye_center, "right_eye_center");
  for (double h : filter_hidden) {
    if (h < 1.0 || h != std::floor(h)) throw Error("PipelineConfig: filter hidden sizes must be positive integers");
  }
  positive(filter_learning_rate, "filter learning_rate");
  nonneg(filter_history_noise, "filter history_noise");
  if (filter_seed < 0 || synth_seed < 0 || motion_seed < 0) throw Error("PipelineConfig: seeds must be >= 0");
  positive(fx, "fx");
  positive(fy, "fy");
  positive(camera_distance, "camera distance");
  nonneg(depth_noise, "depth_noise");
  if (cloud_source != "rendered" && cloud_source != "vertices") {
    throw Error("PipelineConfig: cloud_source must be \"rendered\" or \"vertices\"");
  }
  nonneg(landmark_noise, "landmark_noise");
  nonneg(eye_noise, "eye_noise");
  nonneg(pose_rotation, "pose_rotation");
  nonneg(pose_translation, "pose_translation");
  nonneg(gaze_amplitude, "gaze_amplitude");
  if (gaze_amplitude >= kGazeLimit) throw Error("PipelineConfig: gaze_amplitude must stay inside the gimbal box");
  positive(knot_spacing, "knot_spacing");
  if (!(active_fraction >= 0.0 && active_fraction <= 1.0)) throw Error("PipelineConfig: active_fraction must be in [0, 1]");
  positive(budget_ms, "budget_ms");
}

VirtualCamera PipelineConfig::camera() const {
  VirtualCamera cam = VirtualCamera::frontal(camera_distance, depth_noise);
  cam.intrinsics << fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
  cam.width = width;
  cam.height = height;
  return cam;
}

SolverParams PipelineConfig::solver_params() const {
  SolverParams p;
  p.alpha_marks = alpha_rmarks;
  p.alpha_smooth = alpha_rsmooth;
  p.alpha_reg = alpha_rreg;
  p.box_constraints = box_constraints;
  p.partition = partition;
  p.gates.max_distance = solver_max_distance;
  p.gates.max_normal_angle = solver_max_normal_angle_deg * kDeg;
  p.correspondence_passes = correspondence_passes;
  return p;
}

GazeParams PipelineConfig::gaze_params() const {
  GazeParams p;
  p.alpha_dis = alpha_edis;
  p.alpha_smooth = alpha_esmooth;
  p.grid_step = gaze_grid_step_deg * kDeg;
  p.tolerance = gaze_tolerance;
  p.max_iterations = gaze_max_iterations;
  return p;
}

FitParams PipelineConfig::fit_params() const {
  FitParams p;
  p.alpha = alpha_3dmm;
  p.iterations = fit_iterations;
  p.convergence_tol = fit_tolerance;
  p.gates.max_distance = identity_max_distance;
  p.gates.max_normal_angle = identity_max_normal_angle_deg * kDeg;
  return p;
}

NicpParams PipelineConfig::nicp_params() const {
  NicpParams p;
  p.alpha_arap = alpha_narap;
  p.alpha_reg = alpha_nreg;
  p.gamma = nicp_gamma;
  p.outer_iters = nicp_outer_iterations;
  p.gn_iters = nicp_gn_iterations;
  p.gates.max_distance = identity_max_distance;
  p.gates.max_normal_angle = identity_max_normal_angle_deg * kDeg;
  return p;
}

FilterTrainParams PipelineConfig::filter_train_params() const {
  FilterTrainParams p;
  p.hidden.clear();
  for (double h : filter_hidden) p.hidden.push_back(static_cast<std::size_t>(h));
  p.epochs = filter_epochs;
  p.learning_rate = filter_learning_rate;
  p.batch_size = static_cast<std::size_t>(filter_batch_size);
  p.history_noise = filter_history_noise;
  p.seed = static_cast<std::uint64_t>(filter_seed);
  return p;
}

EyeModel PipelineConfig::left_eye() const {
  return make_eye_model(vec3_of(left_eye_center, "left_eye_center"), eye_radius, pupil_radius);
}

EyeModel PipelineConfig::right_eye() const {
  return make_eye_model(vec3_of(right_eye_center, "right_eye_center"), eye_radius, pupil_radius);
}

PipelineConfig parse_config(std::string_view text, std::vector<std::string>* notes, const std::string& source_name) {
  PipelineConfig cfg;
  const PipelineConfig defaults;
  std::set<std::string> sections;
  for (const auto& f : config_fields()) sections.insert(f.section);
  std::set<std::string> seen;

  std::string section;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t nl = text.find('\n', pos);
    const std::string_view raw = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    const ValueParser vp{source_name, line_no};
    const std::string line = trim(strip_comment(raw));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') vp.fail("unterminated section header");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      if (!sections.count(section)) vp.fail("unknown section [" + section + "]");
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) vp.fail("expected key = value");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    if (section.empty()) vp.fail("key '" + key + "' outside a section");
    const auto it = std::find_if(config_fields().begin(), config_fields().end(),
                                 [&](const FieldSpec& f) { return f.section == section && f.key == key; });
    if (it == config_fields().end()) vp.fail("unknown key '" + key + "' in [" + section + "]");
    const std::string full = section + "." + key;
    if (!seen.insert(full).second) vp.fail("duplicate key '" + full + "'");
    vp.assign(cfg, it->field, value);
  }
  if (notes) {
    for (const auto& f : config_fields()) {
      const std::string full = std::string(f.section) + "." + f.key;
      if (!seen.count(full)) notes->push_back("missing " + full + ", using default " + format_value(defaults, f.field));
    }
  }
  cfg.validate();
  return cfg;
}

std::string serialize_config(const PipelineConfig& config) {
  std::string out;
  std::string section;
  for (const auto& f : config_fields()) {
    if (f.section != section) {
      if (!section.empty()) out += '\n';
      section = f.section;
      out += "[" + section + "]\n";
    }
    out += std::string(f.key) + " = " + format_value(config, f.field) + "\n";
  }
  return out;
}

PipelineConfig load_config(const std::filesystem::path& path, std::vector<std::string>* notes) {
  return parse_config(read_text_file(path), notes, path.string());
}

// ---- frame io -----------------------------------------------------------

std::string frame_input_to_json(const FrameInput& frame, const std::string& cloud_path) {
  json j;
  j["frame"] = frame.frame_index;
  j["cloud"] = cloud_path;
  json marks = json::array();
  for (const auto& l : frame.landmarks) marks.push_back({l.vertex, l.point.x(), l.point.y(), l.point.z()});
  j["landmarks"] = marks;
  json eyes = json::object();
  if (frame.eyes.left) eyes["left"] = eye_json(*frame.eyes.left);
  if (frame.eyes.right) eyes["right"] = eye_json(*frame.eyes.right);
  j["eyes"] = eyes;
  return j.dump();
}

FrameInput frame_input_from_json(std::string_view line, const std::filesystem::path& base_dir) {
  try {
    const json j = json::parse(line);
    FrameInput f;
    f.frame_index = j.at("frame").get<long>();
    if (j.contains("cloud")) {
      const std::filesystem::path p = j.at("cloud").get<std::string>();
      f.cloud = load_cloud(p.is_absolute() ? p : base_dir / p);
    }
    if (j.contains("landmarks")) {
      for (const json& l : j.at("landmarks")) {
        if (!l.is_array() || l.size() != 4 || !l[0].is_number_unsigned()) {
          throw Error("landmarks: expected [vertex, x, y, z]");
        }
        f.landmarks.push_back({l[0].get<std::size_t>(), Vec3(l[1].get<double>(), l[2].get<double>(), l[3].get<double>())});
      }
    }
    if (j.contains("eyes")) {
      const json& e = j.at("eyes");
      if (e.contains("left")) f.eyes.left = eye_from_json(e.at("left"));
      if (e.contains("right")) f.eyes.right = eye_from_json(e.at("right"));
    }
    return f;
  } catch (const json::exception& e) {
    throw Error(std::string("frame input: ") + e.what());
  }
}

std::string eye_observation_to_json(const EyeObservation& obs) { return eye_json(obs).dump(); }

EyeObservation eye_observation_from_json(std::string_view text) {
  try {
    return eye_from_json(json::parse(text));
  } catch (const json::exception& e) {
    throw Error(std::string("eye observation: ") + e.what());
  }
}

// ---- synthetic subject --------------------------------------------------

RigidTransform estimate_head_pose(const BlendshapeRig& rig, std::span<const LandmarkObservation> landmarks) {
  std::vector<Vec3> src, dst;
  for (const auto& l : landmarks) {
    if (l.vertex >= rig.vertex_count()) {
      throw Error("estimate_head_pose: landmark vertex " + std::to_string(l.vertex) + " out of range");
    }
    if (!l.point.allFinite()) throw Error("estimate_head_pose: non-finite landmark");
    if (std::binary_search(rig.anchor_vertices.begin(), rig.anchor_vertices.end(), l.vertex)) {
      src.push_back(rig.neutral.vertices[l.vertex]);
      dst.push_back(l.point);
    }
  }
  if (src.size() < 3) {
    throw Error("estimate_head_pose: need at least 3 anchor landmarks, got " + std::to_string(src.size()));
  }
  return rigid_align(src, dst);
}

namespace {

std::uint64_t motion_seed_of(const PipelineConfig& config) {
  return static_cast<std::uint64_t>(config.motion_seed > 0 ? config.motion_seed : config.synth_seed);
}

}  // namespace

SyntheticSubject make_synthetic_subject(const PipelineConfig& config) {
  config.validate();
  const auto seed = static_cast<std::uint64_t>(config.synth_seed);
  SyntheticSubject s;
  HeadTemplateConfig hc;
  hc.rings = config.head_rings;
  hc.segments = config.head_segments;
  const auto modes = static_cast<std::size_t>(config.identity_modes);
  s.family = make_head_family(seed, 2 * modes + 1, modes, hc);
  RigConfig rc;
  rc.dense_count = static_cast<std::size_t>(config.dense_count);
  s.rig = make_rig_from_head(s.family.heads[0], seed + 1, rc);
  const auto T = static_cast<std::size_t>(config.frames);
  const std::uint64_t motion = motion_seed_of(config);
  s.weights = make_weight_curves(T, s.rig.shape_count(), motion + 2, config.knot_spacing, config.active_fraction);

  // Slow sinusoids with random phases.
  std::mt19937_64 rng = frame_rng(motion, 0, 7);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::array<double, 10> ph{};
  for (double& p : ph) p = phase(rng);
  const double tau = 2.0 * std::numbers::pi;
  for (std::size_t t = 0; t < T; ++t) {
    const double x = static_cast<double>(t);
    const double a = config.pose_rotation;
    const Mat3 R = (Eigen::AngleAxisd(a * std::sin(tau * x / 131.0 + ph[0]), Vec3::UnitY()) *
                    Eigen::AngleAxisd(a * std::sin(tau * x / 97.0 + ph[1]), Vec3::UnitX()) *
                    Eigen::AngleAxisd(0.5 * a * std::sin(tau * x / 173.0 + ph[2]), Vec3::UnitZ()))
                       .toRotationMatrix();
    const double m = config.pose_translation;
    RigidTransform pose;
    pose.rotation = R;
    pose.translation = Vec3(m * std::sin(tau * x / 113.0 + ph[3]), m * std::sin(tau * x / 89.0 + ph[4]),
                            m * std::sin(tau * x / 151.0 + ph[5]));
    s.poses.push_back(pose);

    const double g = config.gaze_amplitude;
    const EyeRotation look{g * std::sin(tau * x / 53.0 + ph[6]), 0.6 * g * std::sin(tau * x / 71.0 + ph[7])};
    const double verge = 0.05 * std::sin(tau * x / 61.0 + ph[8]);
    s.left_gaze.push_back({look.yaw + verge, look.pitch});
    s.right_gaze.push_back({look.yaw - verge, look.pitch});
  }
  return s;
}

FrameInput synthesize_frame(const PipelineConfig& config, const SyntheticSubject& subject, std::size_t t) {
  if (t >= static_cast<std::size_t>(subject.weights.rows())) throw Error("synthesize_frame: frame out of range");
  const std::uint64_t seed = motion_seed_of(config);
  const BlendshapeRig& rig = subject.rig;
  const RigidTransform& pose = subject.poses[t];
  const Eigen::VectorXd w = subject.weights.row(static_cast<Eigen::Index>(t)).transpose();
  const TriMesh posed = compute_vertex_normals(transform_mesh(evaluate_rig(rig, w), pose));
  const VirtualCamera cam = config.camera();
  std::mt19937_64 rng = frame_rng(seed, t, 11);
  std::normal_distribution<double> gauss(0.0, 1.0);

  FrameInput f;
  f.frame_index = static_cast<long>(t);
  if (config.cloud_source == "rendered") {
    f.cloud = render_depth_scan(posed, cam, frame_rng(seed, t, 13)()).cloud;
  } else {
    for (std::size_t v : rig.dense_vertices) {
      const Vec3 dir = (posed.vertices[v] - cam.center()).normalized();
      f.cloud.points.push_back(posed.vertices[v] + config.depth_noise * gauss(rng) * dir);
      f.cloud.normals.push_back(posed.normals[v]);
    }
  }
  std::vector<std::size_t> marks = rig.landmark_vertices;
  marks.insert(marks.end(), rig.anchor_vertices.begin(), rig.anchor_vertices.end());
  std::sort(marks.begin(), marks.end());
  marks.erase(std::unique(marks.begin(), marks.end()), marks.end());
  for (std::size_t v : marks) {
    const Vec3 noise(gauss(rng), gauss(rng), gauss(rng));
    f.landmarks.push_back({v, posed.vertices[v] + config.landmark_noise * noise});
  }
  const Projection P = cam.projection() * pose.matrix();
  const auto observe = [&](const EyeModel& eye, const EyeRotation& r) {
    EyeObservation obs = synthesize_eye_observation(P, eye, r);
    obs.iris_center_2d += config.eye_noise * Vec2(gauss(rng), gauss(rng));
    return obs;
  };
  f.eyes.left = observe(config.left_eye(), subject.left_gaze[t]);
  f.eyes.right = observe(config.right_eye(), subject.right_gaze[t]);
  return f;
}

// ---- frame results ------------------------------------------------------

std::string_view stage_status_name(StageStatus s) {
  switch (s) {
    case StageStatus::ok: return "ok";
    case StageStatus::failed: return "failed";
    case StageStatus::skipped: return "skipped";
  }
  return "skipped";
}

std::string frame_result_to_json(const FrameResult& r, bool with_timings) {
  json j;
  j["frame"] = r.frame_index;
  j["stages"] = {{"pose", stage_status_name(r.pose_status)},
                 {"solve", stage_status_name(r.solve_status)},
                 {"filter", stage_status_name(r.filter_status)},
                 {"gaze", stage_status_name(r.gaze_status)}};
  j["failed_stage"] = r.failed() ? json(r.failed_stage) : json(nullptr);
  if (r.failed()) j["error"] = r.error;
  j["head_pose"] = pose_json(r.head_pose);
  j["weights"] = vec_json(r.raw.weights);
  j["filtered"] = vec_json(r.filtered.weights);
  j["energies"] = {{"dense", r.energies.dense},
                   {"marks", r.energies.marks},
                   {"smooth", r.energies.smooth},
                   {"reg", r.energies.reg},
                   {"total", r.energies.total}};
  const auto gaze = [](const std::optional<GazeResult>& g) {
    if (!g) return json(nullptr);
    return json{{"yaw_rad", g->rotation.yaw}, {"pitch_rad", g->rotation.pitch}, {"energy", g->energy}};
  };
  j["gaze"] = {{"left", gaze(r.left_gaze)}, {"right", gaze(r.right_gaze)}};
  if (with_timings) {
    j["timings_ms"] = {{"pose", r.timings_ms.pose},
                       {"solve", r.timings_ms.solve},
                       {"filter", r.timings_ms.filter},
                       {"gaze", r.timings_ms.gaze},
                       {"total", r.timings_ms.total}};
    j["met_budget"] = r.met_budget;
  }
  return j.dump();
}

FrameResult frame_result_from_json(std::string_view line) {
  try {
    const json j = json::parse(line);
    FrameResult r;
    r.frame_index = j.at("frame").get<long>();
    r.raw.frame_index = r.filtered.frame_index = r.frame_index;
    if (j.contains("stages")) {
      const json& s = j.at("stages");
      r.pose_status = status_from_name(s.at("pose").get<std::string>());
      r.solve_status = status_from_name(s.at("solve").get<std::string>());
      r.filter_status = status_from_name(s.at("filter").get<std::string>());
      r.gaze_status = status_from_name(s.at("gaze").get<std::string>());
    }
    if (j.contains("failed_stage") && !j.at("failed_stage").is_null()) r.failed_stage = j.at("failed_stage").get<std::string>();
    if (j.contains("error")) r.error = j.at("error").get<std::string>();
    if (j.contains("head_pose")) r.head_pose = pose_from_json(j.at("head_pose"));
    if (j.contains("weights")) r.raw.weights = vec_from_json(j.at("weights"), "weights");
    r.filtered.weights = j.contains("filtered") ? vec_from_json(j.at("filtered"), "filtered") : r.raw.weights;
    if (j.contains("energies")) {
      const json& e = j.at("energies");
      r.energies.dense = e.value("dense", 0.0);
      r.energies.marks = e.value("marks", 0.0);
      r.energies.smooth = e.value("smooth", 0.0);
      r.energies.reg = e.value("reg", 0.0);
      r.energies.total = e.value("total", 0.0);
    }
    if (j.contains("gaze")) {
      const auto gaze = [](const json& g) -> std::optional<GazeResult> {
        if (g.is_null()) return std::nullopt;
        return GazeResult{{g.at("yaw_rad").get<double>(), g.at("pitch_rad").get<double>()}, g.at("energy").get<double>()};
      };
      r.left_gaze = gaze(j.at("gaze").at("left"));
      r.right_gaze = gaze(j.at("gaze").at("right"));
    }
    if (j.contains("timings_ms")) {
      const json& t = j.at("timings_ms");
      r.timings_ms = {t.at("pose").get<double>(), t.at("solve").get<double>(), t.at("filter").get<double>(),
                      t.at("gaze").get<double>(), t.at("total").get<double>()};
    }
    r.met_budget = j.value("met_budget", false);
    return r;
  } catch (const json::exception& e) {
    throw Error(std::string("frame result: ") + e.what());
  }
}

// ---- realtime loop ------------------------------------------------------

RealtimeLoop::RealtimeLoop(const PipelineConfig& config, BlendshapeRig rig, std::optional<FilterModel> filter)
    : config_(config), solver_((config.validate(), std::move(rig)), config.solver_params()), filter_(std::move(filter)) {
  if (filter_) {
    filter_->validate();
    if (filter_->shape_count != solver_.rig().shape_count()) {
      throw Error("RealtimeLoop: filter has " + std::to_string(filter_->shape_count) + " weights, rig has " +
                  std::to_string(solver_.rig().shape_count()));
    }
  }
  if (solver_.rig().anchor_vertices.size() < 3) throw Error("RealtimeLoop: rig needs at least 3 anchor vertices");
  camera_ = config_.camera().projection();
  left_eye_ = config_.left_eye();
  right_eye_ = config_.right_eye();
}

void RealtimeLoop::reset_history() {
  solver_history_ = {};
  filter_history_.clear();
  left_history_ = {};
  right_history_ = {};
}

FrameResult RealtimeLoop::process(const FrameInput& frame) {
  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  const BlendshapeRig& rig = solver_.rig();
  const auto K = static_cast<Eigen::Index>(rig.shape_count());
  FrameResult r;
  r.frame_index = frame.frame_index;
  r.raw = {frame.frame_index, Eigen::VectorXd::Zero(K)};
  r.filtered = r.raw;
  const auto fail = [&](const char* stage, StageStatus& status, const std::exception& e) {
    status = StageStatus::failed;
    if (r.failed_stage.empty()) {
      r.failed_stage = stage;
      r.error = e.what();
    }
  };
  const auto finish = [&]() {
    r.timings_ms.total = elapsed_ms(start);
    r.met_budget = r.timings_ms.total < config_.budget_ms;
    return r;
  };

  if (last_frame_ && frame.frame_index <= *last_frame_) {
    r.failed_stage = "input";
    r.error = "frame " + std::to_string(frame.frame_index) + " does not follow frame " + std::to_string(*last_frame_);
    return finish();
  }
  if (last_frame_ && frame.frame_index != *last_frame_ + 1) reset_history();
  last_frame_ = frame.frame_index;

  auto t0 = clock::now();
  try {
    r.head_pose = estimate_head_pose(rig, frame.landmarks);
    r.pose_status = StageStatus::ok;
  } catch (const std::exception& e) {
    fail("pose", r.pose_status, e);
  }
  r.timings_ms.pose = elapsed_ms(t0);
  if (r.pose_status != StageStatus::ok) {
    reset_history();
    return finish();
  }

  t0 = clock::now();
  try {
    FrameObservation obs;
    obs.frame_index = frame.frame_index;
    obs.cloud = frame.cloud;
    obs.head_pose = r.head_pose;
    for (const auto& l : frame.landmarks) {
      if (!std::binary_search(rig.anchor_vertices.begin(), rig.anchor_vertices.end(), l.vertex)) {
        obs.landmarks.push_back(l);
      }
    }
    const FrameSolution sol = solver_.solve(obs, solver_history_);
    r.raw = sol.weights;
    r.energies = sol.energies;
    r.solve_status = StageStatus::ok;
    solver_history_.prev2 = solver_history_.prev;
    solver_history_.prev = sol.weights;
  } catch (const std::exception& e) {
    fail("solve", r.solve_status, e);
    solver_history_ = {};
    filter_history_.clear();
  }
  r.timings_ms.solve = elapsed_ms(t0);
  r.filtered = r.raw;

  t0 = clock::now();
  if (filter_ && r.solve_status == StageStatus::ok) {
    try {
      const std::size_t n = filter_->history_len;
      if (filter_history_.size() == n) r.filtered = filter_frame(*filter_, {filter_history_, r.raw});
      r.filtered.frame_index = frame.frame_index;
      if (n > 0) {
        filter_history_.push_back(r.filtered);
        if (filter_history_.size() > n) filter_history_.erase(filter_history_.begin());
      }
      r.filter_status = StageStatus::ok;
    } catch (const std::exception& e) {
      fail("filter", r.filter_status, e);
      r.filtered = r.raw;
      filter_history_.clear();
    }
  }
  r.timings_ms.filter = elapsed_ms(t0);

  t0 = clock::now();
  if (config_.gaze_enabled && (frame.eyes.left || frame.eyes.right)) {
    const Projection P = camera_ * r.head_pose.matrix();
    const GazeParams gp = config_.gaze_params();
    const auto solve_eye = [&](const std::optional<EyeObservation>& obs, const EyeModel& eye, GazeHistory& hist,
                               std::optional<GazeResult>& out) {
      if (!obs) {
        hist = {};
        return;
      }
      try {
        const GazeSolution g = solve_gaze(P, eye, *obs, hist, gp);
        out = GazeResult{g.rotation, g.energy.total};
        hist.prev2 = hist.prev;
        hist.prev = g.rotation;
      } catch (const std::exception& e) {
        fail("gaze", r.gaze_status, e);
        hist = {};
      }
    };
    r.gaze_status = StageStatus::ok;
    solve_eye(frame.eyes.left, left_eye_, left_history_, r.left_gaze);
    solve_eye(frame.eyes.right, right_eye_, right_history_, r.right_gaze);
  } else {
    left_history_ = {};
    right_history_ = {};
  }
  r.timings_ms.gaze = elapsed_ms(t0);
  return finish();
}

void run_realtime_loop(const PipelineConfig& config, const BlendshapeRig& rig,
                       const std::function<std::optional<FrameInput>()>& source,
                       const std::function<void(const FrameResult&)>& sink, std::optional<FilterModel> filter) {
  RealtimeLoop loop(config, rig, std::move(filter));
  while (auto frame = source()) sink(loop.process(*frame));
}

std::vector<FrameResult> run_realtime_loop(const PipelineConfig& config, const BlendshapeRig& rig,
                                           std::span<const FrameInput> frames, std::optional<FilterModel> filter) {
  RealtimeLoop loop(config, rig, std::move(filter));
  std::vector<FrameResult> out;
  out.reserve(frames.size());
  for (const auto& f : frames) out.push_back(loop.process(f));
  return out;
}

TrainingSequence make_training_sequence(const PipelineConfig& config) {
  PipelineConfig cfg = config;
  cfg.gaze_enabled = false;
  const SyntheticSubject subject = make_synthetic_subject(cfg);
  RealtimeLoop loop(cfg, subject.rig);
  TrainingSequence out{Eigen::MatrixXd(subject.weights.rows(), subject.weights.cols()), subject.weights};
  for (Eigen::Index t = 0; t < subject.weights.rows(); ++t) {
    const FrameResult r = loop.process(synthesize_frame(cfg, subject, static_cast<std::size_t>(t)));
    if (r.failed()) throw Error("make_training_sequence: frame " + std::to_string(t) + ": " + r.error);
    out.raw.row(t) = r.raw.weights.transpose();
  }
  return out;
}

// ---- identity -----------------------------------------------------------

IdentityResult build_identity_pipeline(const PipelineConfig& config, const MorphableModel& model,
                                       std::span<const PointCloud> scans) {
  config.validate();
  if (scans.empty()) throw Error("build_identity_pipeline: no scans");
  PointCloud merged;
  for (const auto& s : scans) {
    if (!s.has_normals()) throw Error("build_identity_pipeline: scans need normals");
    merged.points.insert(merged.points.end(), s.points.begin(), s.points.end());
    merged.normals.insert(merged.normals.end(), s.normals.begin(), s.normals.end());
  }
  IdentityResult out;
  try {
    out.fit = fit_3dmm(model, merged, config.fit_params());
  } catch (const std::exception& e) {
    throw Error(std::string("build_identity_pipeline: fit_3dmm stage: ") + e.what());
  }
  out.coeffs = out.fit.coeffs;
  out.fitted = reconstruct(model, out.coeffs);
  try {
    out.nicp = run_nicp(out.fitted, merged, config.nicp_params());
  } catch (const std::exception& e) {
    throw Error(std::string("build_identity_pipeline: run_nicp stage: ") + e.what());
  }
  out.registered = out.nicp.mesh;
  out.transforms = out.nicp.transforms;
  return out;
}

std::string fit_log_to_json(const FitResult& fit) {
  json its = json::array();
  for (const auto& e : fit.energy_log) {
    its.push_back({{"plane", e.plane}, {"point", e.point}, {"reg", e.reg}, {"total", e.total}});
  }
  return json{{"stage", "fit_3dmm"},
              {"converged", fit.converged},
              {"iterations", its},
              {"valid_counts", fit.valid_counts},
              {"coeffs", vec_json(fit.coeffs)}}
      .dump(1);
}

std::string nicp_log_to_json(const NicpResult& nicp) {
  json its = json::array();
  for (const auto& e : nicp.energy_log) {
    its.push_back({{"dis", e.dis}, {"arap", e.arap}, {"reg", e.reg}, {"landmark", e.landmark}, {"total", e.total}});
  }
  json steps = json::array();
  for (const auto& s : nicp.step_logs) steps.push_back({{"energies", s.energies}, {"halvings", s.halvings}});
  return json{{"stage", "nicp"}, {"iterations", its}, {"steps", steps}, {"valid_counts", nicp.valid_counts}}.dump(1);
}

void save_identity_result(const IdentityResult& result, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_mesh(result.fitted, dir / "fitted.obj");
  save_mesh(result.registered, dir / "registered.obj");
  write_text_file(dir / "coeffs.json", json{{"coeffs", vec_json(result.coeffs)}}.dump(1) + "\n");
  write_text_file(dir / "fit_log.json", fit_log_to_json(result.fit) + "\n");
  write_text_file(dir / "energy_log.json", nicp_log_to_json(result.nicp) + "\n");
}

// ---- report -------------------------------------------------------------

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw Error("percentile: no values");
  if (!(q >= 0.0 && q <= 100.0)) throw Error("percentile: q must be in [0, 100]");
  std::sort(values.begin(), values.end());
  const auto n = values.size();
  const auto rank = static_cast<std::size_t>(std::ceil(q / 100.0 * static_cast<double>(n)));
  return values[std::max<std::size_t>(rank, 1) - 1];
}

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string series_row(const std::string& section, const std::string& name, const std::vector<double>& v) {
  std::string row = section + "," + name + "," + std::to_string(v.size());
  if (v.empty()) return row + ",,,,,,,,\n";
  double sum = 0.0;
  for (double x : v) sum += x;
  row += "," + fmt(sum / static_cast<double>(v.size()));
  for (double q : {50.0, 90.0, 95.0, 99.0}) row += "," + fmt(percentile(v, q));
  row += "," + fmt(*std::max_element(v.begin(), v.end()));
  row += "," + fmt(v.front()) + "," + fmt(v.back()) + "\n";
  return row;
}

std::string count_row(const std::string& section, const std::string& name, std::size_t count, double value) {
  return section + "," + name + "," + std::to_string(count) + "," + fmt(value) + ",,,,,,,\n";
}

}  // namespace

std::string make_report(std::span<const std::filesystem::path> frame_logs,
                        std::span<const std::filesystem::path> energy_logs) {
  std::vector<FrameResult> frames;
  std::size_t with_timings = 0;
  for (const auto& path : frame_logs) {
    const std::string text = read_text_file(path);
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (trim(line).empty()) continue;
      try {
        frames.push_back(frame_result_from_json(line));
        if (json::parse(line).contains("timings_ms")) ++with_timings;
      } catch (const std::exception& e) {
        throw ParseError(path.string(), line_no, e.what());
      }
    }
  }
  std::string out = "section,name,count,mean,p50,p90,p95,p99,max,first,last\n";

  if (with_timings > 0) {
    std::map<std::string, std::vector<double>> lat;
    const std::vector<std::string> stages{"pose", "solve", "filter", "gaze", "total"};
    std::size_t met = 0;
    for (const auto& r : frames) {
      if (r.pose_status != StageStatus::skipped) lat["pose"].push_back(r.timings_ms.pose);
      if (r.solve_status != StageStatus::skipped) lat["solve"].push_back(r.timings_ms.solve);
      if (r.filter_status != StageStatus::skipped) lat["filter"].push_back(r.timings_ms.filter);
      if (r.gaze_status != StageStatus::skipped) lat["gaze"].push_back(r.timings_ms.gaze);
      lat["total"].push_back(r.timings_ms.total);
      if (r.met_budget) ++met;
    }
    for (const auto& s : stages) out += series_row("latency_ms", s, lat[s]);
    out += count_row("budget", "met_fraction", frames.size(),
                     frames.empty() ? 0.0 : static_cast<double>(met) / static_cast<double>(frames.size()));
  }

  std::vector<double> dense, marks, smooth, reg, total, left, right;
  for (const auto& r : frames) {
    if (r.solve_status == StageStatus::ok) {
      dense.push_back(r.energies.dense);
      marks.push_back(r.energies.marks);
      smooth.push_back(r.energies.smooth);
      reg.push_back(r.energies.reg);
      total.push_back(r.energies.total);
    }
    if (r.left_gaze) left.push_back(r.left_gaze->energy);
    if (r.right_gaze) right.push_back(r.right_gaze->energy);
  }
  out += series_row("energy", "dense", dense);
  out += series_row("energy", "marks", marks);
  out += series_row("energy", "smooth", smooth);
  out += series_row("energy", "reg", reg);
  out += series_row("energy", "total", total);
  out += series_row("energy", "gaze_left", left);
  out += series_row("energy", "gaze_right", right);

  std::map<std::string, std::size_t> failures{{"input", 0}, {"pose", 0}, {"solve", 0}, {"filter", 0}, {"gaze", 0}};
  for (const auto& r : frames) {
    if (r.failed()) ++failures[r.failed_stage];
  }
  for (const auto& [stage, n] : failures) {
    out += count_row("failures", stage, n,
                     frames.empty() ? 0.0 : static_cast<double>(n) / static_cast<double>(frames.size()));
  }

  for (const auto& path : energy_logs) {
    json j;
    try {
      j = json::parse(read_text_file(path));
      std::vector<double> totals;
      for (const json& it : j.at("iterations")) totals.push_back(it.at("total").get<double>());
      out += series_row("convergence", path.stem().string() + "." + j.at("stage").get<std::string>(), totals);
    } catch (const json::exception& e) {
      throw Error(path.string() + ": " + e.what());
    }
  }
  return out;
}

}  // namespace facecap
