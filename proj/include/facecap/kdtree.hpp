#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "facecap/geometry.hpp"

namespace facecap {

// Static 3-d tree over a point set, built once per target cloud.
// Nearest-neighbour queries are exact; ties are broken toward the smaller
// original index so results match a brute-force scan bit for bit.
class KdTree {
public:
  struct Hit {
    std::size_t index = 0;
    double squared_distance = 0.0;
  };

  KdTree() = default;
  explicit KdTree(std::span<const Vec3> points, std::size_t leaf_size = 12);

  std::size_t size() const { return points_.size(); }
  bool empty() const { return points_.empty(); }

  // Throws Error on an empty tree.
  Hit nearest(const Vec3& query) const;

private:
  struct Node {
    double split = 0.0;
    std::uint32_t begin = 0;
    std::uint32_t end = 0;
    std::uint32_t left = 0;
    std::uint32_t right = 0;
    std::int8_t axis = -1;  // -1 marks a leaf
  };

  std::uint32_t build(std::uint32_t begin, std::uint32_t end);
  void search(std::uint32_t node, const Vec3& q, Hit& best) const;

  std::vector<Vec3> points_;           // reordered copy
  std::vector<std::uint32_t> index_;   // reordered position -> original index
  std::vector<Node> nodes_;
  std::size_t leaf_size_ = 12;
};

}  // namespace facecap
