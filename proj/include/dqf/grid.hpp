#pragma once

#include <Eigen/Dense>
#include <Eigen/SparseCore>
#include <array>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "dqf/cloud.hpp"
#include "dqf/core.hpp"

namespace dqf {

using Matrix = Eigen::MatrixXd;
using SparseMat = Eigen::SparseMatrix<double>;

// dims are (H, W, D) along (x, y, z); level factors divide all dims evenly
struct VoxelGridSpec {
  Eigen::Vector3d origin{-12.8, -12.8, -1.0};
  Eigen::Vector3d voxel_size{0.1, 0.1, 0.1};
  std::array<int, 3> dense_dims{256, 256, 48};
  std::vector<int> level_factors{8, 4, 2, 1};  // coarse to fine

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (voxel_size[a] <= 0) throw ValidationError("voxel_size must be positive");
      if (dense_dims[a] < 1) throw ValidationError("dense_dims must be >= 1");
      for (int f : level_factors)
        if (f < 1 || dense_dims[a] % f != 0)
          throw ValidationError("level factor " + std::to_string(f) +
                                " does not divide dense dim " + std::to_string(dense_dims[a]));
    }
  }
  int levels() const { return static_cast<int>(level_factors.size()); }
  std::array<int, 3> dims_at(int level) const {
    int f = level_factors.at(level);
    return {dense_dims[0] / f, dense_dims[1] / f, dense_dims[2] / f};
  }
  double range_xy() const { return 0.5 * dense_dims[0] * voxel_size[0]; }
};

struct SparseVoxelGrid {
  int level = 0;  // index into spec.level_factors
  VoxelGridSpec spec;
  std::vector<std::array<int, 3>> coords;  // unique, lexicographically sorted
  Matrix features;                         // N_v x C (may be empty)
  std::vector<int> point_to_voxel;         // -1 = out of range

  std::size_t n_voxels() const { return coords.size(); }
  std::array<int, 3> dims() const { return spec.dims_at(level); }
  double cell_size(int axis) const { return spec.voxel_size[axis] * spec.level_factors[level]; }

  Eigen::Vector3d center_of(std::size_t row) const {
    Eigen::Vector3d c;
    for (int a = 0; a < 3; ++a)
      c[a] = spec.origin[a] + (coords[row][a] + 0.5) * cell_size(a);
    return c;
  }
};

namespace detail {
inline std::uint64_t pack_coord(int h, int w, int d) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(h)) << 42) |
         (static_cast<std::uint64_t>(static_cast<std::uint32_t>(w) & 0x1fffff) << 21) |
         (static_cast<std::uint64_t>(static_cast<std::uint32_t>(d) & 0x1fffff));
}
}  // namespace detail

inline SparseVoxelGrid voxelize(const LabeledPointCloud& cloud, const VoxelGridSpec& spec,
                                int level) {
  spec.validate();
  if (level < 0 || level >= spec.levels()) throw ContractError("level out of range");
  SparseVoxelGrid grid;
  grid.level = level;
  grid.spec = spec;
  const auto dims = grid.dims();
  const std::size_t n = cloud.size();
  std::vector<std::array<int, 3>> idx(n);
  std::vector<bool> in_range(n);
  for (std::size_t i = 0; i < n; ++i) {
    bool ok = true;
    for (int a = 0; a < 3; ++a) {
      double v = (cloud.positions[i][a] - grid.spec.origin[a]) / grid.cell_size(a);
      int c = static_cast<int>(std::floor(v));
      idx[i][a] = c;
      ok = ok && c >= 0 && c < dims[a];
    }
    in_range[i] = ok;
  }
  std::vector<std::array<int, 3>> occupied;
  for (std::size_t i = 0; i < n; ++i)
    if (in_range[i]) occupied.push_back(idx[i]);
  std::sort(occupied.begin(), occupied.end());
  occupied.erase(std::unique(occupied.begin(), occupied.end()), occupied.end());
  grid.coords = std::move(occupied);
  std::unordered_map<std::uint64_t, int> lookup;
  lookup.reserve(grid.coords.size() * 2);
  for (std::size_t r = 0; r < grid.coords.size(); ++r)
    lookup[detail::pack_coord(grid.coords[r][0], grid.coords[r][1], grid.coords[r][2])] =
        static_cast<int>(r);
  grid.point_to_voxel.assign(n, -1);
  for (std::size_t i = 0; i < n; ++i)
    if (in_range[i])
      grid.point_to_voxel[i] = lookup.at(detail::pack_coord(idx[i][0], idx[i][1], idx[i][2]));
  return grid;
}

// rows: [x, y, z, intensity, offset to voxel center (3), range_norm]
inline Matrix point_representation(const LabeledPointCloud& cloud, const SparseVoxelGrid& grid,
                                   bool with_range_norm = true) {
  const std::size_t n = cloud.size();
  if (grid.point_to_voxel.size() != n)
    throw ContractError("point_representation: grid was not built from this cloud");
  Matrix rep = Matrix::Zero(n, 8);
  const double range = grid.spec.range_xy();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p = cloud.positions[i];
    rep(i, 0) = p[0];
    rep(i, 1) = p[1];
    rep(i, 2) = p[2];
    rep(i, 3) = cloud.intensity[i];
    int v = grid.point_to_voxel[i];
    if (v >= 0) {
      Eigen::Vector3d c = grid.center_of(v);
      rep(i, 4) = p[0] - c[0];
      rep(i, 5) = p[1] - c[1];
      rep(i, 6) = p[2] - c[2];
    }
    if (with_range_norm) rep(i, 7) = std::hypot(p[0], p[1]) / range;
  }
  return rep;
}

// componentwise max over member points of each voxel
inline Matrix pool_voxel_features(const Matrix& point_feats, const SparseVoxelGrid& grid) {
  if (static_cast<std::size_t>(point_feats.rows()) != grid.point_to_voxel.size())
    throw ContractError("pool_voxel_features: row count mismatch");
  Matrix out = Matrix::Constant(grid.n_voxels(), point_feats.cols(),
                                -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < grid.point_to_voxel.size(); ++i) {
    int v = grid.point_to_voxel[i];
    if (v < 0) continue;
    out.row(v) = out.row(v).cwiseMax(point_feats.row(i));
  }
  return out;
}

// k nearest voxel centers with inverse-distance weights; rows of the result
// are convex combinations of voxel rows. Returned as a sparse map so callers
// can reuse it as a fixed linear operator.
inline SparseMat v2p_weights(const SparseVoxelGrid& grid, const Matrix& query_points, int k,
                             double eps = 1e-8) {
  if (grid.n_voxels() == 0) throw ContractError("v2p on empty grid");
  if (k < 1) throw ContractError("v2p needs k >= 1");
  const std::size_t n_q = query_points.rows();
  const std::size_t n_v = grid.n_voxels();
  const int kk = static_cast<int>(std::min<std::size_t>(k, n_v));

  Matrix centers(n_v, 3);
  for (std::size_t r = 0; r < n_v; ++r) centers.row(r) = grid.center_of(r).transpose();

  // cell -> voxel row lookup for ring search
  std::unordered_map<std::uint64_t, int> lookup;
  lookup.reserve(n_v * 2);
  for (std::size_t r = 0; r < n_v; ++r)
    lookup[detail::pack_coord(grid.coords[r][0], grid.coords[r][1], grid.coords[r][2])] =
        static_cast<int>(r);
  const auto dims = grid.dims();
  const double min_cell = std::min({grid.cell_size(0), grid.cell_size(1), grid.cell_size(2)});
  const int max_ring = std::max({dims[0], dims[1], dims[2]});

  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(n_q * kk);
  std::vector<std::pair<double, int>> cand;  // (squared distance, voxel row)
  for (std::size_t q = 0; q < n_q; ++q) {
    const Eigen::Vector3d p = query_points.row(q).transpose();
    cand.clear();
    std::array<int, 3> base;
    bool inside = true;
    for (int a = 0; a < 3; ++a) {
      base[a] = static_cast<int>(std::floor((p[a] - grid.spec.origin[a]) / grid.cell_size(a)));
      inside = inside && base[a] >= 0 && base[a] < dims[a];
    }
    if (n_v <= 512 || !inside) {
      for (std::size_t r = 0; r < n_v; ++r)
        cand.emplace_back((centers.row(r).transpose() - p).squaredNorm(), static_cast<int>(r));
    } else {
      for (int ring = 0; ring <= max_ring; ++ring) {
        for (int dh = -ring; dh <= ring; ++dh)
          for (int dw = -ring; dw <= ring; ++dw)
            for (int dd = -ring; dd <= ring; ++dd) {
              if (std::max({std::abs(dh), std::abs(dw), std::abs(dd)}) != ring) continue;
              int h = base[0] + dh, w = base[1] + dw, d = base[2] + dd;
              if (h < 0 || h >= dims[0] || w < 0 || w >= dims[1] || d < 0 || d >= dims[2])
                continue;
              auto it = lookup.find(detail::pack_coord(h, w, d));
              if (it == lookup.end()) continue;
              cand.emplace_back((centers.row(it->second).transpose() - p).squaredNorm(),
                                it->second);
            }
        if (cand.size() >= static_cast<std::size_t>(kk)) {
          std::nth_element(cand.begin(), cand.begin() + (kk - 1), cand.end());
          double kth = std::sqrt(cand[kk - 1].first);
          // cells in ring r+1 are at least r*min_cell away from the query's cell center
          if (kth <= ring * min_cell) break;
        }
      }
    }
    std::sort(cand.begin(), cand.end());
    double wsum = 0;
    for (int j = 0; j < kk; ++j) wsum += 1.0 / (std::sqrt(cand[j].first) + eps);
    for (int j = 0; j < kk; ++j)
      trips.emplace_back(static_cast<int>(q), cand[j].second,
                         (1.0 / (std::sqrt(cand[j].first) + eps)) / wsum);
  }
  SparseMat W(n_q, n_v);
  W.setFromTriplets(trips.begin(), trips.end());
  return W;
}

inline Matrix v2p_interpolate(const SparseVoxelGrid& grid, const Matrix& query_points, int k,
                              double eps = 1e-8) {
  if (grid.features.size() == 0) throw ContractError("v2p on grid without features");
  return v2p_weights(grid, query_points, k, eps) * grid.features;
}

// BEV placement map: voxel row r of feature width C lands in
// out(d*C + c, h*W + w). Shared between the plain projection and the
// autodiff scatter in the model.
struct BevLayout {
  int channels;  // C * D
  int height, width;
  std::vector<std::pair<int, int>> slots;  // per voxel: (channel base d*C, pixel index)
};

inline BevLayout v2b_layout(const SparseVoxelGrid& grid, int feat_dim) {
  const auto dims = grid.dims();
  BevLayout lay;
  lay.height = dims[0];
  lay.width = dims[1];
  lay.channels = feat_dim * dims[2];
  lay.slots.reserve(grid.n_voxels());
  for (const auto& c : grid.coords)
    lay.slots.emplace_back(c[2] * feat_dim, c[0] * dims[1] + c[1]);
  return lay;
}

// dense (C*D) x (H*W) matrix, zero where no voxel
inline Matrix v2b_project(const SparseVoxelGrid& grid) {
  if (grid.features.size() == 0) throw ContractError("v2b on grid without features");
  const int C = static_cast<int>(grid.features.cols());
  BevLayout lay = v2b_layout(grid, C);
  Matrix out = Matrix::Zero(lay.channels, lay.height * lay.width);
  for (std::size_t r = 0; r < grid.n_voxels(); ++r)
    out.block(lay.slots[r].first, lay.slots[r].second, C, 1) = grid.features.row(r).transpose();
  return out;
}

}  // namespace dqf
