#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <queue>
#include <unordered_map>
#include <utility>
#include <vector>

#include "pcf/tensor.hpp"

namespace pcf {

using Vec3 = std::array<double, 3>;

/// N positions in 3-space with an N x c feature matrix and optional labels.
struct PointCloud {
  std::vector<Vec3> positions;
  std::vector<double> features;  // row-major N x channels
  std::size_t channels = 0;
  std::vector<int> labels;  // empty or N entries

  PointCloud() = default;
  PointCloud(std::vector<Vec3> pos, std::vector<double> feats, std::size_t c,
             std::vector<int> lab = {})
      : positions(std::move(pos)), features(std::move(feats)), channels(c), labels(std::move(lab)) {
    validate();
  }

  /// Positions only, zero feature channels.
  static PointCloud from_positions(std::vector<Vec3> pos) {
    return PointCloud(std::move(pos), {}, 0);
  }

  std::size_t size() const { return positions.size(); }
  bool has_labels() const { return !labels.empty(); }

  std::span<const double> feature_row(std::size_t i) const {
    return {features.data() + i * channels, channels};
  }

  /// N x channels tensor of the features (no gradient).
  Tensor feature_tensor() const { return Tensor({size(), channels}, features); }

  void validate() const {
    if (positions.empty()) throw DegenerateInputError("point cloud has no points");
    for (std::size_t i = 0; i < positions.size(); ++i) {
      for (double v : positions[i]) {
        if (!std::isfinite(v)) {
          throw ParameterError(detail::concat("point cloud position ", i, " is not finite"));
        }
      }
    }
    if (features.size() != positions.size() * channels) {
      throw DimensionError(detail::concat("point cloud has ", positions.size(), " positions but ",
                                          features.size(), " feature values for ", channels,
                                          " channels"));
    }
    if (!labels.empty() && labels.size() != positions.size()) {
      throw DimensionError(detail::concat("point cloud has ", positions.size(), " positions but ",
                                          labels.size(), " labels"));
    }
  }

  bool operator==(const PointCloud&) const = default;
};

/// K source indices per query, sorted by distance, with the cached offsets
/// source.positions[idx] - query.positions[n].
struct Neighborhood {
  IndexTable indices;
  std::vector<double> rel_pos;  // N x K x 3

  std::size_t queries() const { return indices.rows; }
  std::size_t k() const { return indices.cols; }
};

/// Coarse-to-fine provenance produced by grid subsampling.
struct SubsampleMap {
  std::vector<std::vector<std::size_t>> parent;
  double cell_size = 0.0;
  Vec3 anchor{0.0, 0.0, 0.0};  // grid origin used for the cell indices
};

namespace detail {

inline double squared_distance(const Vec3& a, const Vec3& b) {
  const double dx = a[0] - b[0];
  const double dy = a[1] - b[1];
  const double dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

inline void check_knn_args(const PointCloud& source, std::size_t k) {
  if (k == 0) throw ParameterError("knn: k must be positive");
  if (k > source.size()) {
    throw CapacityError(concat("knn: k=", k, " exceeds source size ", source.size()));
  }
}

using Candidate = std::pair<double, std::size_t>;  // (squared distance, index)

inline Neighborhood finish_neighborhood(const PointCloud& source, const PointCloud& query,
                                        std::size_t k, IndexTable indices) {
  Neighborhood nbr{std::move(indices), std::vector<double>(query.size() * k * 3)};
  for (std::size_t n = 0; n < query.size(); ++n) {
    for (std::size_t j = 0; j < k; ++j) {
      const Vec3& s = source.positions[nbr.indices(n, j)];
      for (std::size_t a = 0; a < 3; ++a) {
        nbr.rel_pos[(n * k + j) * 3 + a] = s[a] - query.positions[n][a];
      }
    }
  }
  return nbr;
}

struct CellKey {
  std::int64_t x, y, z;
  bool operator==(const CellKey&) const = default;
};

struct CellKeyHash {
  std::size_t operator()(const CellKey& c) const {
    std::uint64_t h = static_cast<std::uint64_t>(c.x) * 0x9E3779B97F4A7C15ULL;
    h ^= static_cast<std::uint64_t>(c.y) * 0xC2B2AE3D27D4EB4FULL + (h << 6) + (h >> 2);
    h ^= static_cast<std::uint64_t>(c.z) * 0x165667B19E3779F9ULL + (h << 6) + (h >> 2);
    return static_cast<std::size_t>(h);
  }
};

}  // namespace detail

/// Exhaustive O(N*M) kNN. Ties in distance go to the lower source index.
inline Neighborhood brute_force_knn(const PointCloud& source, const PointCloud& query,
                                    std::size_t k) {
  detail::check_knn_args(source, k);
  IndexTable table(query.size(), k);
  std::vector<detail::Candidate> all(source.size());
  for (std::size_t n = 0; n < query.size(); ++n) {
    for (std::size_t i = 0; i < source.size(); ++i) {
      all[i] = {detail::squared_distance(source.positions[i], query.positions[n]), i};
    }
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end());
    for (std::size_t j = 0; j < k; ++j) table(n, j) = all[j].second;
  }
  return detail::finish_neighborhood(source, query, k, std::move(table));
}

/// kNN through a uniform spatial hash searched in expanding Chebyshev shells.
/// Produces exactly the brute-force answer, tie rule included.
inline Neighborhood knn(const PointCloud& source, const PointCloud& query, std::size_t k) {
  detail::check_knn_args(source, k);

  Vec3 lo = source.positions[0], hi = source.positions[0];
  for (const auto& p : source.positions) {
    for (std::size_t a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], p[a]);
      hi[a] = std::max(hi[a], p[a]);
    }
  }
  const double extent = std::max({hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]});
  if (!(extent > 0.0)) return brute_force_knn(source, query, k);

  // Start from a volumetric guess and refine until cells hold about 2k points,
  // which keeps surface-like clouds from crowding a handful of cells.
  double cell = extent / std::max(1.0, std::cbrt(static_cast<double>(source.size()) / (2.0 * k)));
  std::unordered_map<detail::CellKey, std::vector<std::size_t>, detail::CellKeyHash> grid;
  auto key_of = [&](const Vec3& p) {
    return detail::CellKey{static_cast<std::int64_t>(std::floor((p[0] - lo[0]) / cell)),
                           static_cast<std::int64_t>(std::floor((p[1] - lo[1]) / cell)),
                           static_cast<std::int64_t>(std::floor((p[2] - lo[2]) / cell))};
  };
  for (int attempt = 0; attempt < 8; ++attempt) {
    grid.clear();
    for (std::size_t i = 0; i < source.size(); ++i) grid[key_of(source.positions[i])].push_back(i);
    const double per_cell = static_cast<double>(source.size()) / static_cast<double>(grid.size());
    if (per_cell <= 4.0 * static_cast<double>(k)) break;
    cell *= 0.5;
  }
  const auto span_cells = static_cast<std::int64_t>(std::floor(extent / cell)) + 1;

  IndexTable table(query.size(), k);
  std::priority_queue<detail::Candidate> heap;  // max-heap on (distance, index)
  for (std::size_t n = 0; n < query.size(); ++n) {
    const Vec3& q = query.positions[n];
    const detail::CellKey c = key_of(q);
    heap = {};
    // Queries outside the source box need extra shells to reach it.
    std::int64_t outside = 0;
    for (std::int64_t v : {c.x, c.y, c.z}) {
      outside = std::max({outside, -v, v - span_cells});
    }
    for (std::int64_t r = 0;; ++r) {
      for (std::int64_t dx = -r; dx <= r; ++dx) {
        for (std::int64_t dy = -r; dy <= r; ++dy) {
          const bool edge_xy = std::abs(dx) == r || std::abs(dy) == r;
          for (std::int64_t dz = -r; dz <= r; dz += (edge_xy || r == 0) ? 1 : 2 * r) {
            auto it = grid.find({c.x + dx, c.y + dy, c.z + dz});
            if (it == grid.end()) continue;
            for (std::size_t i : it->second) {
              const detail::Candidate cand{detail::squared_distance(source.positions[i], q), i};
              if (heap.size() < k) {
                heap.push(cand);
              } else if (cand < heap.top()) {
                heap.pop();
                heap.push(cand);
              }
            }
          }
        }
      }
      // Anything outside shell r lies farther than r * cell from q.
      const double bound = static_cast<double>(r) * cell * (1.0 - 1e-9);
      if (heap.size() == k && heap.top().first < bound * bound) break;
      if (r > span_cells + outside) break;
    }
    for (std::size_t j = k; j-- > 0;) {
      table(n, j) = heap.top().second;
      heap.pop();
    }
  }
  return detail::finish_neighborhood(source, query, k, std::move(table));
}

/// Pools a cloud to one point per occupied cell of a grid with origin
/// `anchor`. Cells are emitted in lexicographic (x, y, z) order.
inline std::pair<PointCloud, SubsampleMap> grid_subsample(const PointCloud& cloud,
                                                          double cell_size, const Vec3& anchor) {
  if (!(cell_size > 0.0) || !std::isfinite(cell_size)) {
    throw ParameterError(detail::concat("grid_subsample: cell_size must be positive, got ",
                                        cell_size));
  }
  cloud.validate();
  const Vec3& lo = anchor;
  std::map<std::array<std::int64_t, 3>, std::vector<std::size_t>> cells;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    std::array<std::int64_t, 3> key{};
    for (std::size_t a = 0; a < 3; ++a) {
      key[a] = static_cast<std::int64_t>(std::floor((cloud.positions[i][a] - lo[a]) / cell_size));
    }
    cells[key].push_back(i);
  }

  const std::size_t c = cloud.channels;
  PointCloud out;
  out.channels = c;
  SubsampleMap map;
  map.cell_size = cell_size;
  map.anchor = anchor;
  int max_label = -1;
  for (int l : cloud.labels) max_label = std::max(max_label, l);
  std::vector<std::size_t> votes(static_cast<std::size_t>(max_label + 1));
  for (auto& [key, members] : cells) {
    const double count = static_cast<double>(members.size());
    Vec3 pos{0.0, 0.0, 0.0};
    std::vector<double> feat(c, 0.0);
    for (std::size_t i : members) {
      for (std::size_t a = 0; a < 3; ++a) pos[a] += cloud.positions[i][a];
      for (std::size_t ch = 0; ch < c; ++ch) feat[ch] += cloud.features[i * c + ch];
    }
    for (double& v : pos) v /= count;
    for (double& v : feat) v /= count;
    out.positions.push_back(pos);
    out.features.insert(out.features.end(), feat.begin(), feat.end());
    if (cloud.has_labels()) {
      std::fill(votes.begin(), votes.end(), 0);
      for (std::size_t i : members) ++votes[static_cast<std::size_t>(cloud.labels[i])];
      // max_element returns the first maximum, i.e. the smallest label id.
      out.labels.push_back(
          static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin()));
    }
    map.parent.push_back(std::move(members));
  }
  return {std::move(out), std::move(map)};
}

/// Grid anchored at the cloud's minimum corner, which makes the pooling
/// covariant under translation.
inline std::pair<PointCloud, SubsampleMap> grid_subsample(const PointCloud& cloud,
                                                          double cell_size) {
  cloud.validate();
  Vec3 lo = cloud.positions[0];
  for (const auto& p : cloud.positions) {
    for (std::size_t a = 0; a < 3; ++a) lo[a] = std::min(lo[a], p[a]);
  }
  return grid_subsample(cloud, cell_size, lo);
}

/// The cached offsets of a neighborhood as an N x K x 3 tensor.
inline Tensor relative_positions(const PointCloud& source, const PointCloud& query,
                                 const Neighborhood& nbr) {
  if (nbr.queries() != query.size()) {
    throw DimensionError(detail::concat("relative_positions: neighborhood has ", nbr.queries(),
                                        " rows but query cloud has ", query.size(), " points"));
  }
  for (std::size_t idx : nbr.indices.values) {
    if (idx >= source.size()) {
      throw IndexError(detail::concat("relative_positions: index ", idx, " outside source of ",
                                      source.size(), " points"));
    }
  }
  return Tensor({nbr.queries(), nbr.k(), 3}, nbr.rel_pos);
}

}  // namespace pcf
