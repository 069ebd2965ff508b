#pragma once

#include <array>
#include <map>
#include <vector>

#include "dqf/autodiff.hpp"
#include "dqf/cloud.hpp"
#include "dqf/grid.hpp"
#include "dqf/nn.hpp"

namespace dqf {

struct GroupMap {
  std::vector<int> offsets;  // n_groups + 1
  std::vector<int> indices;
};

// Everything about a scene that depends only on point positions, not on
// weights. Built once per scene (per augmentation draw) and reused.
struct SceneGeometry {
  LabeledPointCloud cloud;
  VoxelGridSpec spec;
  Matrix rep;                                // N_p x 8 input representation
  std::array<SparseVoxelGrid, 4> grids;      // level 0 = 1/8 ... level 3 = full
  GroupMap point_pool;                       // full-level voxel <- member points
  std::array<GroupMap, 3> down;              // down[l]: level-l voxel <- level-(l+1) rows
  std::array<std::vector<int>, 4> parent;    // level l>=1: row -> parent row in level l-1
  std::array<GroupMap, 4> neighbors;         // 3^3 occupied neighborhood, self included
  std::array<SparseMat, 4> v2p;              // N_p x N_v interpolation weights
  std::array<BevLayout, 4> bev;              // for the encoder's embed dim
  std::array<std::vector<int>, 4> conv_idx;  // 3x3 source tables per level
  std::size_t n_points() const { return cloud.size(); }
};

inline SceneGeometry build_scene_geometry(const LabeledPointCloud& cloud,
                                          const VoxelGridSpec& spec, int embed_dim, int knn_k,
                                          bool with_range_norm) {
  SceneGeometry g;
  g.cloud = cloud;
  g.spec = spec;
  for (int l = 0; l < 4; ++l) g.grids[l] = voxelize(cloud, spec, l);
  if (g.grids[3].n_voxels() == 0)
    throw ValidationError("empty scene: no points fall inside the voxel grid");
  g.rep = point_representation(cloud, g.grids[3], with_range_norm);

  auto build_groups = [](int n_groups, const std::vector<std::pair<int, int>>& pairs) {
    // pairs of (group, element), grouped preserving element order
    GroupMap gm;
    std::vector<int> counts(n_groups, 0);
    for (auto& p : pairs) ++counts[p.first];
    gm.offsets.assign(n_groups + 1, 0);
    for (int i = 0; i < n_groups; ++i) gm.offsets[i + 1] = gm.offsets[i] + counts[i];
    gm.indices.resize(pairs.size());
    std::vector<int> cursor(gm.offsets.begin(), gm.offsets.end() - 1);
    for (auto& p : pairs) gm.indices[cursor[p.first]++] = p.second;
    return gm;
  };

  {
    std::vector<std::pair<int, int>> pairs;
    const auto& p2v = g.grids[3].point_to_voxel;
    for (std::size_t i = 0; i < p2v.size(); ++i)
      if (p2v[i] >= 0) pairs.emplace_back(p2v[i], static_cast<int>(i));
    g.point_pool = build_groups(static_cast<int>(g.grids[3].n_voxels()), pairs);
  }

  // coord -> row lookups per level
  std::array<std::map<std::array<int, 3>, int>, 4> lookup;
  for (int l = 0; l < 4; ++l)
    for (std::size_t r = 0; r < g.grids[l].n_voxels(); ++r)
      lookup[l][g.grids[l].coords[r]] = static_cast<int>(r);

  for (int l = 1; l < 4; ++l) {
    g.parent[l].resize(g.grids[l].n_voxels());
    std::vector<std::pair<int, int>> pairs;
    for (std::size_t r = 0; r < g.grids[l].n_voxels(); ++r) {
      const auto& c = g.grids[l].coords[r];
      std::array<int, 3> pc{c[0] / 2, c[1] / 2, c[2] / 2};
      int prow = lookup[l - 1].at(pc);  // parent must be occupied: same points
      g.parent[l][r] = prow;
      pairs.emplace_back(prow, static_cast<int>(r));
    }
    g.down[l - 1] = build_groups(static_cast<int>(g.grids[l - 1].n_voxels()), pairs);
  }

  for (int l = 0; l < 4; ++l) {
    std::vector<std::pair<int, int>> pairs;
    for (std::size_t r = 0; r < g.grids[l].n_voxels(); ++r) {
      const auto& c = g.grids[l].coords[r];
      for (int dh = -1; dh <= 1; ++dh)
        for (int dw = -1; dw <= 1; ++dw)
          for (int dd = -1; dd <= 1; ++dd) {
            auto it = lookup[l].find({c[0] + dh, c[1] + dw, c[2] + dd});
            if (it != lookup[l].end())
              pairs.emplace_back(static_cast<int>(r), it->second);
          }
    }
    g.neighbors[l] = build_groups(static_cast<int>(g.grids[l].n_voxels()), pairs);
  }

  Matrix qpts(cloud.size(), 3);
  for (std::size_t i = 0; i < cloud.size(); ++i)
    qpts.row(i) << cloud.positions[i][0], cloud.positions[i][1], cloud.positions[i][2];
  for (int l = 0; l < 4; ++l) {
    g.v2p[l] = v2p_weights(g.grids[l], qpts, knn_k);
    g.bev[l] = v2b_layout(g.grids[l], embed_dim);
    auto dims = g.grids[l].dims();
    g.conv_idx[l] = nn::conv3x3_indices(dims[0], dims[1]);
  }
  return g;
}

// Multi-scale sparse encoder: per-voxel MLPs with 3^3 neighborhood max
// aggregation in a U-shape over the four resolution levels.
class Encoder {
 public:
  Encoder() = default;
  Encoder(nn::ParamStore& p, int in_dim, int channels, int embed_dim, Rng& rng) {
    stem1_ = nn::Linear(p, "enc.stem1", in_dim, channels, rng);
    stem2_ = nn::Linear(p, "enc.stem2", channels, channels, rng);
    for (int l = 0; l < 4; ++l) {
      std::string pre = "enc.blk" + std::to_string(l);
      blk1_[l] = nn::Linear(p, pre + ".n1", channels, channels, rng);
      blk2_[l] = nn::Linear(p, pre + ".n2", channels, channels, rng);
      head_[l] = nn::Linear(p, "enc.head" + std::to_string(l), channels, embed_dim, rng);
      if (l > 0) up_[l] = nn::Linear(p, "enc.up" + std::to_string(l), channels, channels, rng);
    }
  }

  struct Output {
    std::array<ad::Var, 4> f_v;  // voxel features, N_v x C_e
    std::array<ad::Var, 4> f_p;  // point embeddings, N_p x C_e
  };

  Output operator()(const nn::ParamStore& p, ad::Tape& tape, const SceneGeometry& g) const {
    using namespace ad;
    Var rep = constant(tape, g.rep);
    Var pf = relu(stem1_(p, rep));
    pf = stem2_(p, pf);
    Var pooled = group_max(pf, g.point_pool.offsets, g.point_pool.indices);

    std::array<Var, 4> down_feats;  // raw features on the way down
    down_feats[3] = pooled;
    std::array<Var, 4> enc_feats;
    for (int l = 3; l >= 0; --l) {
      if (l < 3) down_feats[l] = group_max(enc_feats[l + 1], g.down[l].offsets, g.down[l].indices);
      Var agg = group_max(down_feats[l], g.neighbors[l].offsets, g.neighbors[l].indices);
      enc_feats[l] = add(down_feats[l], blk2_[l](p, relu(blk1_[l](p, agg))));
    }
    std::array<Var, 4> up_feats;
    up_feats[0] = enc_feats[0];
    for (int l = 1; l < 4; ++l)
      up_feats[l] = add(enc_feats[l], up_[l](p, gather_rows(up_feats[l - 1], g.parent[l])));

    Output out;
    for (int l = 0; l < 4; ++l) {
      out.f_v[l] = head_[l](p, up_feats[l]);
      out.f_p[l] = fixed_linear(g.v2p[l], out.f_v[l]);
    }
    return out;
  }

 private:
  nn::Linear stem1_, stem2_;
  std::array<nn::Linear, 4> blk1_, blk2_, head_, up_;
};

}  // namespace dqf
