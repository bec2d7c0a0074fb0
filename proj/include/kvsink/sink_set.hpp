#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

namespace kvsink {

/// Sorted, unique token indices preserved at full precision.
struct SinkSet {
  std::vector<std::size_t> indices;
  std::size_t k_requested = 0;

  static SinkSet from_indices(std::vector<std::size_t> idx, std::size_t k_requested = 0) {
    std::sort(idx.begin(), idx.end());
    idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
    SinkSet s{std::move(idx), k_requested};
    if (s.k_requested < s.indices.size()) s.k_requested = s.indices.size();
    return s;
  }

  bool contains(std::size_t token) const {
    return std::binary_search(indices.begin(), indices.end(), token);
  }
  bool empty() const noexcept { return indices.empty(); }
  std::size_t size() const noexcept { return indices.size(); }

  /// Membership mask over `n` tokens; indices >= n are ignored.
  std::vector<bool> mask(std::size_t n) const {
    std::vector<bool> m(n, false);
    for (std::size_t i : indices)
      if (i < n) m[i] = true;
    return m;
  }

  friend bool operator==(const SinkSet& a, const SinkSet& b) { return a.indices == b.indices; }
};

}  // namespace kvsink
