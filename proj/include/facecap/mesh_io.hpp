#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "facecap/geometry.hpp"

namespace facecap {

// Wavefront OBJ: `v`, `vn`, `f` records, 1-based indices. Faces must be
// triangles; `f a/b/c` forms are accepted and only the position index is read.
// Other record types are ignored on load.
TriMesh load_mesh(const std::filesystem::path& path);
void save_mesh(const TriMesh& mesh, const std::filesystem::path& path);
TriMesh parse_obj(std::string_view text, const std::string& source_name = "<obj>");
std::string format_obj(const TriMesh& mesh);

// ASCII PLY with a vertex element carrying x y z and optionally nx ny nz.
PointCloud load_cloud(const std::filesystem::path& path);
void save_cloud(const PointCloud& cloud, const std::filesystem::path& path);
PointCloud parse_ply(std::string_view text, const std::string& source_name = "<ply>");
std::string format_ply(const PointCloud& cloud);

// Shortest decimal form that parses back to the same double.
std::string format_double(double value);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view text);

}  // namespace facecap
