#include "facecap/kdtree.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

#include "facecap/error.hpp"

namespace facecap {

KdTree::KdTree(std::span<const Vec3> points, std::size_t leaf_size)
    : leaf_size_(std::max<std::size_t>(leaf_size, 1)) {
  if (points.size() >= std::numeric_limits<std::uint32_t>::max()) throw Error("KdTree: too many points");
  points_.assign(points.begin(), points.end());
  index_.resize(points_.size());
  std::iota(index_.begin(), index_.end(), 0u);
  if (points_.empty()) return;
  nodes_.reserve(2 * points_.size() / leaf_size_ + 2);
  build(0, static_cast<std::uint32_t>(points_.size()));

  std::vector<Vec3> reordered(points_.size());
  for (std::size_t i = 0; i < index_.size(); ++i) reordered[i] = points[index_[i]];
  points_ = std::move(reordered);
}

std::uint32_t KdTree::build(std::uint32_t begin, std::uint32_t end) {
  const auto id = static_cast<std::uint32_t>(nodes_.size());
  nodes_.push_back({});
  nodes_[id].begin = begin;
  nodes_[id].end = end;
  if (end - begin <= leaf_size_) return id;

  // Split on the axis of largest extent, at the median.
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  for (std::uint32_t i = begin; i < end; ++i) {
    lo = lo.cwiseMin(points_[index_[i]]);
    hi = hi.cwiseMax(points_[index_[i]]);
  }
  int axis = 0;
  (hi - lo).maxCoeff(&axis);
  if (hi[axis] - lo[axis] <= 0.0) return id;  // all coincident: keep as leaf

  const std::uint32_t mid = begin + (end - begin) / 2;
  std::nth_element(index_.begin() + begin, index_.begin() + mid, index_.begin() + end,
                   [&](std::uint32_t a, std::uint32_t b) { return points_[a][axis] < points_[b][axis]; });
  const double split = points_[index_[mid]][axis];

  const auto left = build(begin, mid);
  const auto right = build(mid, end);
  nodes_[id].axis = static_cast<std::int8_t>(axis);
  nodes_[id].split = split;
  nodes_[id].left = left;
  nodes_[id].right = right;
  return id;
}

KdTree::Hit KdTree::nearest(const Vec3& query) const {
  if (points_.empty()) throw Error("KdTree: nearest() on empty tree");
  Hit best{std::numeric_limits<std::size_t>::max(), std::numeric_limits<double>::infinity()};
  search(0, query, best);
  return best;
}

void KdTree::search(std::uint32_t id, const Vec3& q, Hit& best) const {
  const Node& node = nodes_[id];
  if (node.axis < 0) {
    for (std::uint32_t i = node.begin; i < node.end; ++i) {
      const double d2 = (points_[i] - q).squaredNorm();
      const std::size_t orig = index_[i];
      if (d2 < best.squared_distance || (d2 == best.squared_distance && orig < best.index)) {
        best.squared_distance = d2;
        best.index = orig;
      }
    }
    return;
  }
  // Left holds coordinates <= split, right holds >= split.
  const double diff = q[node.axis] - node.split;
  const std::uint32_t near = diff < 0.0 ? node.left : node.right;
  const std::uint32_t far = diff < 0.0 ? node.right : node.left;
  search(near, q, best);
  // `<=` keeps equidistant candidates reachable for the index tie-break.
  if (diff * diff <= best.squared_distance) search(far, q, best);
}

}  // namespace facecap
