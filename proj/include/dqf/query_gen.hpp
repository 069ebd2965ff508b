#pragma once

#include <array>
#include <cmath>
#include <map>
#include <vector>

#include "dqf/encoder.hpp"

namespace dqf {

struct QueryProposal {
  int cls = 0;           // global class id (thing proposals: thing class index)
  bool is_thing = true;
  int level = 0;
  int row = 0, col = 0;  // BEV cell at that level
  double x = 0, y = 0;   // metric position (things only)
  double score = 0;
  int flat_index = 0;    // row in the stacked proposal embedding matrix
};

struct QueryInfo {
  int cls = 0;  // thing class index for things, stuff class index for stuff
  bool is_thing = true;
  double x = 0, y = 0;
  double score = 0;
};

struct QuerySet {
  std::vector<QueryInfo> infos;   // things first, then stuff
  ad::Var embeddings;             // (N_t + N_s) x C_e
  int n_things = 0;
  int n_stuff = 0;
};

// 2D CNN head with channel and spatial gates producing F_i^bev.
// Convolutions carry no bias so an all-zero voxel grid maps to zero.
class BevHead {
 public:
  BevHead() = default;
  BevHead(nn::ParamStore& p, const std::string& prefix, int in_channels, int embed_dim,
          Rng& rng) {
    conv1_ = nn::Conv3x3(p, prefix + ".conv1", in_channels, embed_dim, rng, false);
    conv2_ = nn::Conv3x3(p, prefix + ".conv2", embed_dim, embed_dim, rng, false);
    int hidden = std::max(4, embed_dim / 4);
    cg1_ = nn::Linear(p, prefix + ".cg1", embed_dim, hidden, rng);
    cg2_ = nn::Linear(p, prefix + ".cg2", hidden, embed_dim, rng);
    sg_w_ = prefix + ".sg.w";
    sg_b_ = prefix + ".sg.b";
    p.create(sg_w_, 1, embed_dim, rng);
    p.create_const(sg_b_, 1, 1, 0.0);
  }

  // x: (in_channels x H*W); returns (C_e x H*W)
  ad::Var operator()(const nn::ParamStore& p, ad::Var x, const std::vector<int>& conv_idx) const {
    using namespace ad;
    Var h = relu(conv1_(p, x, conv_idx));
    h = conv2_(p, h, conv_idx);
    // channel gate: global average -> MLP -> sigmoid, applied per channel
    Var pooled = transpose(rowwise_mean(h));               // 1 x C_e
    Var gate_c = sigmoid(cg2_(p, relu(cg1_(p, pooled))));  // 1 x C_e
    h = mul_col_broadcast(h, transpose(gate_c));
    // spatial gate: 1x1 conv -> sigmoid, applied per pixel
    Var gate_s = sigmoid(add_col_broadcast(matmul(p[sg_w_], h), p[sg_b_]));  // 1 x HW
    return mul_row_broadcast(h, gate_s);
  }

 private:
  nn::Conv3x3 conv1_, conv2_;
  nn::Linear cg1_, cg2_;
  std::string sg_w_, sg_b_;
};

// object-center heatmap head, shared across levels
class CenterHead {
 public:
  CenterHead() = default;
  CenterHead(nn::ParamStore& p, int embed_dim, int n_things, Rng& rng) {
    conv1_ = nn::Conv3x3(p, "center.conv1", embed_dim, embed_dim, rng, true);
    conv2_ = nn::Conv3x3(p, "center.conv2", embed_dim, n_things, rng, true);
  }
  // returns probabilities (N_th x H*W)
  ad::Var operator()(const nn::ParamStore& p, ad::Var emb, const std::vector<int>& conv_idx) const {
    return ad::sigmoid(conv2_(p, ad::relu(conv1_(p, emb, conv_idx)), conv_idx));
  }

 private:
  nn::Conv3x3 conv1_, conv2_;
};

// class-fixed learnable queries attending over the BEV embedding
class StuffHead {
 public:
  StuffHead() = default;
  StuffHead(nn::ParamStore& p, int embed_dim, int n_stuff, Rng& rng)
      : embed_dim_(embed_dim), n_stuff_(n_stuff) {
    p.create("stuff.q_learn", n_stuff, embed_dim, rng);
    phi_q_ = nn::Linear(p, "stuff.phi_q", embed_dim, embed_dim, rng);
    phi_k_ = nn::Linear(p, "stuff.phi_k", embed_dim, embed_dim, rng);
    phi_v_ = nn::Linear(p, "stuff.phi_v", embed_dim, embed_dim, rng);
    p.create("stuff.phi_map.w", n_stuff, n_stuff, rng);
    p.create_const("stuff.phi_map.b", n_stuff, 1, 0.0);
    phi_query_ = nn::Linear(p, "stuff.phi_query", embed_dim, embed_dim, rng);
  }

  struct Output {
    ad::Var region_map;  // (N_st x H*W) in (0,1)
    ad::Var queries;     // N_st x C_e
  };

  // emb: (C_e x H*W)
  Output operator()(const nn::ParamStore& p, ad::Var emb) const {
    using namespace ad;
    Var pix = transpose(emb);                      // HW x C_e
    Var attn_logits = scale(matmul(phi_q_(p, p["stuff.q_learn"]), transpose(phi_k_(p, pix))),
                            1.0 / std::sqrt(static_cast<double>(embed_dim_)));  // N_st x HW
    Var region = sigmoid(add_col_broadcast(matmul(p["stuff.phi_map.w"], attn_logits),
                                           p["stuff.phi_map.b"]));
    Var attn = softmax_rows(attn_logits);
    Var queries = phi_query_(p, matmul(attn, phi_v_(p, pix)));
    return {region, queries};
  }

 private:
  int embed_dim_ = 0, n_stuff_ = 0;
  nn::Linear phi_q_, phi_k_, phi_v_, phi_query_;
};

// Peaks of the center heatmap, jointly ranked over (channel, row, col).
// heat: (N_th x H*W) probabilities as plain values.
inline std::vector<QueryProposal> select_thing_proposals(const Matrix& heat, int H, int W,
                                                         int level, double cell_x, double cell_y,
                                                         double origin_x, double origin_y,
                                                         int n_q, bool local_max = true) {
  if (n_q < 1) throw ContractError("select_thing_proposals: n_q must be >= 1");
  struct Peak {
    double score;
    int ch, row, col;
  };
  std::vector<Peak> peaks;
  for (int ch = 0; ch < heat.rows(); ++ch)
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c) {
        double v = heat(ch, r * W + c);
        if (local_max) {
          bool is_peak = true;
          for (int dr = -1; dr <= 1 && is_peak; ++dr)
            for (int dc = -1; dc <= 1 && is_peak; ++dc) {
              if (dr == 0 && dc == 0) continue;
              int rr = r + dr, cc = c + dc;
              if (rr < 0 || rr >= H || cc < 0 || cc >= W) continue;
              // strict inequality keeps plateau cells; ties resolved by rank order
              if (heat(ch, rr * W + cc) > v) is_peak = false;
            }
          if (!is_peak) continue;
        }
        peaks.push_back({v, ch, r, c});
      }
  std::sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) {
    if (a.score != b.score) return a.score > b.score;
    return std::tie(a.ch, a.row, a.col) < std::tie(b.ch, b.row, b.col);
  });
  if (static_cast<int>(peaks.size()) > n_q) peaks.resize(n_q);
  std::vector<QueryProposal> out;
  for (const auto& pk : peaks) {
    QueryProposal q;
    q.cls = pk.ch;
    q.is_thing = true;
    q.level = level;
    q.row = pk.row;
    q.col = pk.col;
    q.x = origin_x + (pk.row + 0.5) * cell_x;
    q.y = origin_y + (pk.col + 0.5) * cell_y;
    q.score = pk.score;
    out.push_back(q);
  }
  return out;
}

struct ThingFusionResult {
  std::vector<QueryInfo> infos;
  SparseMat averaging;  // N_t x n_proposals, rows sum to 1
};

// Greedy same-class fusion inside metric windows: proposals whose cosine
// similarity to the group seed reaches theta_th are averaged.
inline ThingFusionResult fuse_thing_proposals(const std::vector<QueryProposal>& proposals,
                                              const Matrix& embeddings, double theta_th,
                                              double window_m) {
  if (theta_th <= 0) throw ContractError("theta_th must be positive");
  if (window_m <= 0) throw ContractError("window_m must be positive");
  struct Key {
    int cls, wx, wy;
    bool operator<(const Key& o) const {
      return std::tie(cls, wx, wy) < std::tie(o.cls, o.wx, o.wy);
    }
  };
  std::map<Key, std::vector<int>> buckets;
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    const auto& p = proposals[i];
    buckets[{p.cls, static_cast<int>(std::floor(p.x / window_m)),
             static_cast<int>(std::floor(p.y / window_m))}].push_back(static_cast<int>(i));
  }
  auto cosine = [&](int a, int b) {
    double na = embeddings.row(a).norm(), nb = embeddings.row(b).norm();
    if (na == 0 || nb == 0) return 0.0;
    return embeddings.row(a).dot(embeddings.row(b)) / (na * nb);
  };
  ThingFusionResult res;
  std::vector<Eigen::Triplet<double>> trips;
  for (auto& [key, members] : buckets) {
    std::sort(members.begin(), members.end(), [&](int a, int b) {
      if (proposals[a].score != proposals[b].score)
        return proposals[a].score > proposals[b].score;
      return a < b;
    });
    std::vector<bool> used(members.size(), false);
    for (std::size_t i = 0; i < members.size(); ++i) {
      if (used[i]) continue;
      std::vector<int> group{members[i]};
      used[i] = true;
      for (std::size_t j = i + 1; j < members.size(); ++j) {
        if (used[j]) continue;
        bool merge;
        if (theta_th > 1.0) {
          merge = false;  // sentinel: fusion disabled
        } else if (theta_th == 1.0) {
          merge = embeddings.row(members[i]) == embeddings.row(members[j]);
        } else {
          merge = cosine(members[i], members[j]) >= theta_th;
        }
        if (merge) {
          group.push_back(members[j]);
          used[j] = true;
        }
      }
      QueryInfo info;
      info.cls = key.cls;
      info.is_thing = true;
      double wsum = 0;
      for (int m : group) wsum += proposals[m].score;
      for (int m : group) {
        double w = (wsum > 0) ? proposals[m].score / wsum : 1.0 / group.size();
        info.x += w * proposals[m].x;
        info.y += w * proposals[m].y;
        info.score = std::max(info.score, proposals[m].score);
        trips.emplace_back(static_cast<int>(res.infos.size()), proposals[m].flat_index,
                           1.0 / group.size());
      }
      res.infos.push_back(info);
    }
  }
  res.averaging.resize(static_cast<int>(res.infos.size()),
                       embeddings.rows() > 0 ? static_cast<int>(embeddings.rows()) : 0);
  res.averaging.setFromTriplets(trips.begin(), trips.end());
  return res;
}

struct StuffFusionResult {
  std::vector<int> existing_classes;  // stuff class indices, ascending
  SparseMat averaging;                // N_s x (levels * N_st)
};

// class c exists iff any level's region map reaches theta_st anywhere
inline StuffFusionResult fuse_stuff_proposals(const std::vector<Matrix>& region_maps,
                                              int n_stuff, double theta_st) {
  if (theta_st <= 0 || theta_st >= 1) throw ContractError("theta_st must be in (0,1)");
  const int n_levels = static_cast<int>(region_maps.size());
  StuffFusionResult res;
  std::vector<Eigen::Triplet<double>> trips;
  for (int c = 0; c < n_stuff; ++c) {
    double best = -1;
    for (const auto& m : region_maps) best = std::max(best, m.row(c).maxCoeff());
    if (best < theta_st) continue;
    for (int l = 0; l < n_levels; ++l)
      trips.emplace_back(static_cast<int>(res.existing_classes.size()), l * n_stuff + c,
                         1.0 / n_levels);
    res.existing_classes.push_back(c);
  }
  res.averaging.resize(static_cast<int>(res.existing_classes.size()), n_levels * n_stuff);
  res.averaging.setFromTriplets(trips.begin(), trips.end());
  return res;
}

}  // namespace dqf
