#include "facecap/mesh_io.hpp"

#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <vector>

#include "facecap/error.hpp"

namespace facecap {

namespace {

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    const std::size_t start = i;
    while (i < line.size() && line[i] != ' ' && line[i] != '\t' && line[i] != '\r') ++i;
    if (i > start) out.push_back(line.substr(start, i - start));
  }
  return out;
}

bool parse_number(std::string_view tok, double& out) {
  if (!tok.empty() && tok.front() == '+') tok.remove_prefix(1);
  const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), out);
  return res.ec == std::errc{} && res.ptr == tok.data() + tok.size();
}

bool parse_index(std::string_view tok, long long& out) {
  const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), out);
  return res.ec == std::errc{} && res.ptr == tok.data() + tok.size();
}

template <typename Fn>
void for_each_line(std::string_view text, Fn&& fn) {
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = text.find('\n', pos);
    const std::string_view line = text.substr(pos, end == std::string_view::npos ? text.size() - pos : end - pos);
    ++line_no;
    if (!fn(line, line_no)) return;
    if (end == std::string_view::npos) break;
    pos = end + 1;
  }
}

Vec3 parse_vec3(const std::vector<std::string_view>& tok, std::size_t first, const std::string& src,
                std::size_t line) {
  if (tok.size() < first + 3) throw ParseError(src, line, "expected three coordinates");
  Vec3 v;
  for (int k = 0; k < 3; ++k) {
    if (!parse_number(tok[first + k], v[k])) {
      throw ParseError(src, line, "invalid number '" + std::string(tok[first + k]) + "'");
    }
  }
  return v;
}

}  // namespace

std::string format_double(double value) {
  std::array<char, 32> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), value);
  return std::string(buf.data(), res.ptr);
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

TriMesh parse_obj(std::string_view text, const std::string& src) {
  TriMesh mesh;
  std::vector<Vec3> normals;
  for_each_line(text, [&](std::string_view line, std::size_t line_no) {
    const auto tok = split_ws(line);
    if (tok.empty() || tok[0].front() == '#') return true;
    if (tok[0] == "v") {
      mesh.vertices.push_back(parse_vec3(tok, 1, src, line_no));
    } else if (tok[0] == "vn") {
      normals.push_back(parse_vec3(tok, 1, src, line_no));
    } else if (tok[0] == "f") {
      if (tok.size() != 4) {
        throw ParseError(src, line_no, "face with " + std::to_string(tok.size() - 1) +
                                           " vertices; only triangles are supported");
      }
      Face face{};
      for (int k = 0; k < 3; ++k) {
        const std::string_view t = tok[1 + k];
        const std::string_view head = t.substr(0, t.find('/'));
        long long idx = 0;
        if (!parse_index(head, idx) || idx == 0) {
          throw ParseError(src, line_no, "invalid face index '" + std::string(t) + "'");
        }
        const long long nv = static_cast<long long>(mesh.vertices.size());
        const long long zero_based = idx > 0 ? idx - 1 : nv + idx;
        if (zero_based < 0 || zero_based >= nv) {
          throw ParseError(src, line_no, "face index " + std::to_string(idx) + " out of range");
        }
        face[k] = static_cast<std::uint32_t>(zero_based);
      }
      mesh.faces.push_back(face);
    }
    return true;
  });
  // Normals are kept only when they pair one-to-one with positions, which is
  // the layout save_mesh writes.
  if (!normals.empty() && normals.size() == mesh.vertices.size()) {
    for (auto& n : normals) {
      const double len = n.norm();
      if (len > 0.0 && std::abs(len - 1.0) > 1e-12) n /= len;
    }
    mesh.normals = std::move(normals);
  }
  mesh.validate();
  return mesh;
}

std::string format_obj(const TriMesh& mesh) {
  std::string out;
  out.reserve(mesh.vertices.size() * 64 + mesh.faces.size() * 24);
  for (const auto& v : mesh.vertices) {
    out += "v " + format_double(v.x()) + ' ' + format_double(v.y()) + ' ' + format_double(v.z()) + '\n';
  }
  for (const auto& n : mesh.normals) {
    out += "vn " + format_double(n.x()) + ' ' + format_double(n.y()) + ' ' + format_double(n.z()) + '\n';
  }
  const bool with_normals = mesh.has_normals();
  for (const auto& f : mesh.faces) {
    out += 'f';
    for (auto idx : f) {
      const auto s = std::to_string(idx + 1);
      out += ' ';
      out += s;
      if (with_normals) out += "//" + s;
    }
    out += '\n';
  }
  return out;
}

TriMesh load_mesh(const std::filesystem::path& path) { return parse_obj(read_text_file(path), path.string()); }

void save_mesh(const TriMesh& mesh, const std::filesystem::path& path) { write_text_file(path, format_obj(mesh)); }

PointCloud parse_ply(std::string_view text, const std::string& src) {
  struct Element {
    std::string name;
    std::size_t count = 0;
    std::vector<std::string> properties;
    bool has_list = false;
  };
  std::vector<Element> elements;
  bool header_done = false;
  bool saw_magic = false;
  std::size_t element_idx = 0;
  std::size_t row = 0;
  std::array<int, 6> slot{-1, -1, -1, -1, -1, -1};  // x y z nx ny nz positions
  PointCloud cloud;
  bool normals = false;

  auto start_element = [&]() {
    while (element_idx < elements.size() && elements[element_idx].count == 0) ++element_idx;
    row = 0;
    if (element_idx < elements.size() && elements[element_idx].name == "vertex") {
      const auto& props = elements[element_idx].properties;
      const std::array<const char*, 6> names{"x", "y", "z", "nx", "ny", "nz"};
      for (std::size_t k = 0; k < names.size(); ++k) {
        slot[k] = -1;
        for (std::size_t p = 0; p < props.size(); ++p) {
          if (props[p] == names[k]) slot[k] = static_cast<int>(p);
        }
      }
    }
  };

  for_each_line(text, [&](std::string_view line, std::size_t line_no) {
    const auto tok = split_ws(line);
    if (!header_done) {
      if (!saw_magic) {
        if (tok.size() != 1 || tok[0] != "ply") throw ParseError(src, line_no, "missing 'ply' magic");
        saw_magic = true;
        return true;
      }
      if (tok.empty()) return true;
      if (tok[0] == "format") {
        if (tok.size() < 2 || tok[1] != "ascii") throw ParseError(src, line_no, "only ascii PLY is supported");
      } else if (tok[0] == "element") {
        if (tok.size() != 3) throw ParseError(src, line_no, "malformed element record");
        Element e;
        e.name = std::string(tok[1]);
        double count = 0;
        if (!parse_number(tok[2], count) || count < 0) throw ParseError(src, line_no, "bad element count");
        e.count = static_cast<std::size_t>(count);
        elements.push_back(std::move(e));
      } else if (tok[0] == "property") {
        if (elements.empty()) throw ParseError(src, line_no, "property before element");
        if (tok.size() >= 2 && tok[1] == "list") {
          if (elements.back().name == "vertex") throw ParseError(src, line_no, "list property on vertex element");
          elements.back().has_list = true;
        } else {
          if (tok.size() != 3) throw ParseError(src, line_no, "malformed property record");
          elements.back().properties.emplace_back(tok[2]);
        }
      } else if (tok[0] == "end_header") {
        header_done = true;
        bool found = false;
        for (const auto& e : elements) found = found || e.name == "vertex";
        if (!found) throw ParseError(src, line_no, "no vertex element");
        element_idx = 0;
        start_element();
        if (element_idx < elements.size() && elements[element_idx].name == "vertex") {
          if (slot[0] < 0 || slot[1] < 0 || slot[2] < 0) throw ParseError(src, line_no, "vertex lacks x y z");
          normals = slot[3] >= 0 && slot[4] >= 0 && slot[5] >= 0;
        }
      }
      // comment / obj_info and anything unknown in the header is ignored
      return true;
    }

    if (element_idx >= elements.size()) {
      if (!tok.empty()) throw ParseError(src, line_no, "data after last element");
      return true;
    }
    if (tok.empty()) throw ParseError(src, line_no, "empty data row");
    const Element& e = elements[element_idx];
    if (e.name == "vertex") {
      if (tok.size() != e.properties.size()) {
        throw ParseError(src, line_no, "expected " + std::to_string(e.properties.size()) + " values, got " +
                                           std::to_string(tok.size()));
      }
      std::array<double, 6> val{};
      for (std::size_t k = 0; k < 6; ++k) {
        if (slot[k] < 0) continue;
        if (!parse_number(tok[static_cast<std::size_t>(slot[k])], val[k])) {
          throw ParseError(src, line_no, "invalid number '" + std::string(tok[static_cast<std::size_t>(slot[k])]) + "'");
        }
      }
      cloud.points.emplace_back(val[0], val[1], val[2]);
      if (normals) {
        Vec3 n(val[3], val[4], val[5]);
        const double len = n.norm();
        if (len > 0.0 && std::abs(len - 1.0) > 1e-12) n /= len;
        cloud.normals.push_back(n);
      }
    }
    if (++row == e.count) {
      ++element_idx;
      start_element();
      if (element_idx < elements.size() && elements[element_idx].name == "vertex") {
        normals = slot[3] >= 0 && slot[4] >= 0 && slot[5] >= 0;
      }
    }
    return true;
  });

  if (!header_done) throw ParseError(src, 1, "unterminated header");
  if (element_idx < elements.size()) throw ParseError(src, 1, "file truncated: missing element rows");
  return cloud;
}

std::string format_ply(const PointCloud& cloud) {
  std::string out = "ply\nformat ascii 1.0\nelement vertex " + std::to_string(cloud.points.size()) +
                    "\nproperty double x\nproperty double y\nproperty double z\n";
  const bool with_normals = cloud.has_normals();
  if (with_normals) out += "property double nx\nproperty double ny\nproperty double nz\n";
  out += "end_header\n";
  for (std::size_t i = 0; i < cloud.points.size(); ++i) {
    const auto& p = cloud.points[i];
    out += format_double(p.x()) + ' ' + format_double(p.y()) + ' ' + format_double(p.z());
    if (with_normals) {
      const auto& n = cloud.normals[i];
      out += ' ' + format_double(n.x()) + ' ' + format_double(n.y()) + ' ' + format_double(n.z());
    }
    out += '\n';
  }
  return out;
}

PointCloud load_cloud(const std::filesystem::path& path) { return parse_ply(read_text_file(path), path.string()); }

void save_cloud(const PointCloud& cloud, const std::filesystem::path& path) {
  write_text_file(path, format_ply(cloud));
}

}  // namespace facecap
