#include "facecap/rig.hpp"

#include <algorithm>
#include <set>

#include <json.hpp>

#include "facecap/error.hpp"
#include "facecap/mesh_io.hpp"

namespace facecap {

const std::array<std::string_view, kArkitShapeCount>& arkit_shape_names() {
  static constexpr std::array<std::string_view, kArkitShapeCount> names{
      "eyeBlinkLeft",      "eyeLookDownLeft",    "eyeLookInLeft",      "eyeLookOutLeft",    "eyeLookUpLeft",
      "eyeSquintLeft",     "eyeWideLeft",        "eyeBlinkRight",      "eyeLookDownRight",  "eyeLookInRight",
      "eyeLookOutRight",   "eyeLookUpRight",     "eyeSquintRight",     "eyeWideRight",      "jawForward",
      "jawLeft",           "jawRight",           "jawOpen",            "mouthClose",        "mouthFunnel",
      "mouthPucker",       "mouthLeft",          "mouthRight",         "mouthSmileLeft",    "mouthSmileRight",
      "mouthFrownLeft",    "mouthFrownRight",    "mouthDimpleLeft",    "mouthDimpleRight",  "mouthStretchLeft",
      "mouthStretchRight", "mouthRollLower",     "mouthRollUpper",     "mouthShrugLower",   "mouthShrugUpper",
      "mouthPressLeft",    "mouthPressRight",    "mouthLowerDownLeft", "mouthLowerDownRight", "mouthUpperUpLeft",
      "mouthUpperUpRight", "browDownLeft",       "browDownRight",      "browInnerUp",       "browOuterUpLeft",
      "browOuterUpRight",  "cheekPuff",          "cheekSquintLeft",    "cheekSquintRight",  "noseSneerLeft",
      "noseSneerRight"};
  return names;
}

void BlendshapeRig::validate() const {
  neutral.validate();
  const std::size_t V = vertex_count();
  const std::size_t K = shape_count();
  if (static_cast<std::size_t>(deltas.rows()) != 3 * V || static_cast<std::size_t>(deltas.cols()) != K) {
    throw Error("BlendshapeRig: delta matrix must be 3V x K");
  }
  if (shape_region.size() != K) throw Error("BlendshapeRig: shape_region size mismatch");
  if (region_vertices.size() != region_names.size()) throw Error("BlendshapeRig: region table size mismatch");
  if (!deltas.allFinite()) throw Error("BlendshapeRig: non-finite delta");

  std::set<std::string> unique(names.begin(), names.end());
  if (unique.size() != names.size()) throw Error("BlendshapeRig: blendshape names are not unique");

  std::vector<int> owner(V, -1);
  for (std::size_t r = 0; r < region_vertices.size(); ++r) {
    for (auto v : region_vertices[r]) {
      if (v >= V) throw Error("BlendshapeRig: region vertex out of range");
      if (owner[v] >= 0) throw Error("BlendshapeRig: regions '" + region_names[static_cast<std::size_t>(owner[v])] +
                                     "' and '" + region_names[r] + "' overlap");
      owner[v] = static_cast<int>(r);
    }
  }

  std::vector<std::size_t> shapes_per_region(region_names.size(), 0);
  for (std::size_t k = 0; k < K; ++k) {
    const std::size_t r = shape_region[k];
    if (r >= region_names.size()) throw Error("BlendshapeRig: shape '" + names[k] + "' has no valid region");
    ++shapes_per_region[r];
    for (std::size_t v = 0; v < V; ++v) {
      if (owner[v] == static_cast<int>(r)) continue;
      if (deltas.block<3, 1>(3 * static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(k)).squaredNorm() != 0.0) {
        throw Error("BlendshapeRig: shape '" + names[k] + "' moves vertex " + std::to_string(v) +
                    " outside region '" + region_names[r] + "'");
      }
    }
  }
  for (std::size_t r = 0; r < shapes_per_region.size(); ++r) {
    if (shapes_per_region[r] == 0) throw Error("BlendshapeRig: region '" + region_names[r] + "' has no blendshapes");
  }

  for (const auto* sel : {&dense_vertices, &landmark_vertices, &anchor_vertices}) {
    for (auto v : *sel) {
      if (v >= V) throw Error("BlendshapeRig: selection index out of range");
    }
  }
  for (auto v : anchor_vertices) {
    if (owner[v] >= 0) throw Error("BlendshapeRig: anchor vertex lies inside a region");
  }
}

TriMesh evaluate_rig(const BlendshapeRig& rig, const Eigen::VectorXd& weights) {
  if (static_cast<std::size_t>(weights.size()) != rig.shape_count()) {
    throw Error("evaluate_rig: expected " + std::to_string(rig.shape_count()) + " weights, got " +
                std::to_string(weights.size()));
  }
  TriMesh out;
  out.faces = rig.neutral.faces;
  out.vertices = unstack_vertices(stack_vertices(rig.neutral.vertices) + rig.deltas * weights);
  return out;
}

std::vector<Vec3> evaluate_rig_vertices(const BlendshapeRig& rig, const Eigen::VectorXd& weights,
                                        std::span<const std::size_t> vertices) {
  if (static_cast<std::size_t>(weights.size()) != rig.shape_count()) throw Error("evaluate_rig_vertices: bad weights");
  std::vector<Vec3> out(vertices.size());
  for (std::size_t i = 0; i < vertices.size(); ++i) {
    const auto row = 3 * static_cast<Eigen::Index>(vertices[i]);
    out[i] = rig.neutral.vertices[vertices[i]] + rig.deltas.middleRows<3>(row) * weights;
  }
  return out;
}

void save_rig(const BlendshapeRig& rig, const std::filesystem::path& dir) {
  rig.validate();
  std::filesystem::create_directories(dir);
  TriMesh neutral = rig.neutral;
  neutral.normals.clear();
  save_mesh(neutral, dir / "neutral.obj");
  for (std::size_t k = 0; k < rig.shape_count(); ++k) {
    Eigen::VectorXd w = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(rig.shape_count()));
    w[static_cast<Eigen::Index>(k)] = 1.0;
    save_mesh(evaluate_rig(rig, w), dir / (rig.names[k] + ".obj"));
  }

  nlohmann::json doc;
  doc["regions"] = nlohmann::json::array();
  for (std::size_t r = 0; r < rig.region_count(); ++r) {
    doc["regions"].push_back({{"name", rig.region_names[r]}, {"vertices", rig.region_vertices[r]}});
  }
  doc["shapes"] = nlohmann::json::array();
  for (std::size_t k = 0; k < rig.shape_count(); ++k) {
    doc["shapes"].push_back({{"name", rig.names[k]}, {"region", rig.shape_region[k]}});
  }
  doc["dense_vertices"] = rig.dense_vertices;
  doc["landmark_vertices"] = rig.landmark_vertices;
  doc["anchor_vertices"] = rig.anchor_vertices;
  write_text_file(dir / "regions.json", doc.dump(1) + "\n");
}

BlendshapeRig load_rig(const std::filesystem::path& dir) {
  BlendshapeRig rig;
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(read_text_file(dir / "regions.json"));
    for (const auto& r : doc.at("regions")) {
      rig.region_names.push_back(r.at("name").get<std::string>());
      auto verts = r.at("vertices").get<std::vector<std::size_t>>();
      std::sort(verts.begin(), verts.end());
      rig.region_vertices.push_back(std::move(verts));
    }
    for (const auto& s : doc.at("shapes")) {
      rig.names.push_back(s.at("name").get<std::string>());
      rig.shape_region.push_back(s.at("region").get<std::size_t>());
    }
    rig.dense_vertices = doc.value("dense_vertices", std::vector<std::size_t>{});
    rig.landmark_vertices = doc.value("landmark_vertices", std::vector<std::size_t>{});
    rig.anchor_vertices = doc.value("anchor_vertices", std::vector<std::size_t>{});
  } catch (const nlohmann::json::exception& e) {
    throw Error("load_rig: " + (dir / "regions.json").string() + ": " + e.what());
  }

  rig.neutral = load_mesh(dir / "neutral.obj");
  rig.neutral.normals.clear();
  const auto V = static_cast<Eigen::Index>(rig.neutral.vertex_count());
  rig.deltas.resize(3 * V, static_cast<Eigen::Index>(rig.names.size()));
  const Eigen::VectorXd b0 = stack_vertices(rig.neutral.vertices);
  for (std::size_t k = 0; k < rig.names.size(); ++k) {
    const TriMesh shape = load_mesh(dir / (rig.names[k] + ".obj"));
    if (shape.faces != rig.neutral.faces) throw Error("load_rig: '" + rig.names[k] + "' topology differs from neutral");
    rig.deltas.col(static_cast<Eigen::Index>(k)) = stack_vertices(shape.vertices) - b0;
  }
  rig.validate();
  return rig;
}

}  // namespace facecap
