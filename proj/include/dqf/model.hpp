#pragma once

#include <array>
#include <string>
#include <vector>

#include "dqf/config.hpp"
#include "dqf/decoder.hpp"
#include "dqf/encoder.hpp"
#include "dqf/query_gen.hpp"

namespace dqf {

struct ModelOutput {
  Encoder::Output enc;
  std::array<ad::Var, 4> bev_embed;     // C_e x (H_l * W_l)
  std::array<ad::Var, 4> center;        // N_th x (H_l * W_l), probabilities
  std::array<ad::Var, 4> stuff_region;  // N_st x (H_l * W_l), probabilities
  std::array<ad::Var, 4> stuff_queries; // N_st x C_e
  std::vector<QueryProposal> proposals; // stacked order = rows of proposal embeddings
  QuerySet queries;
  ad::Var mask_embedding;  // N_p x C_e
  MaskDecoder::Output dec;
  ad::Var sem_logits;      // N_p x n_classes
};

// The whole network: sparse voxel encoder, per-level BEV heads producing
// thing/stuff queries, masked-attention decoder, per-point semantic head.
class Model {
 public:
  explicit Model(const RunConfig& cfg) : cfg_(cfg), tax_(cfg.taxonomy()) {
    Rng init = Rng(cfg.seed).stream("init");
    encoder_ = Encoder(params_, 8, cfg.base_channels, cfg.embed_dim, init);
    // BEV input channel count depends on the level's z resolution
    VoxelGridSpec spec = cfg.grid_spec();
    for (int l = 0; l < 4; ++l) {
      int depth = spec.dims_at(l)[2];
      bev_[l] = BevHead(params_, "bev" + std::to_string(l), cfg.embed_dim * depth,
                        cfg.embed_dim, init);
    }
    center_ = CenterHead(params_, cfg.embed_dim, tax_.n_things(), init);
    stuff_ = StuffHead(params_, cfg.embed_dim, tax_.n_stuff(), init);
    decoder_ = MaskDecoder(params_, cfg.decoder_blocks, cfg.embed_dim, cfg.ffn_hidden_mult,
                           cfg.attention_heads, init);
    sem1_ = nn::Linear(params_, "sem.l1", cfg.embed_dim, cfg.embed_dim, init);
    sem2_ = nn::Linear(params_, "sem.l2", cfg.embed_dim, tax_.n_classes(), init);
  }

  const nn::ParamStore& param_store() const { return params_; }
  nn::ParamStore& param_store() { return params_; }
  const RunConfig& config() const { return cfg_; }
  const LabelTaxonomy& taxonomy() const { return tax_; }

  struct Options {
    bool use_masking = true;
    // theta > 1 disables thing fusion entirely
    double theta_things_override = -1;
  };

  ModelOutput forward(ad::Tape& tape, const SceneGeometry& g) {
    return forward(tape, g, Options());
  }

  ModelOutput forward(ad::Tape& tape, const SceneGeometry& g, const Options& opt) {
    using namespace ad;
    params_.begin_forward(tape);
    const nn::ParamStore& p = params_;
    ModelOutput out;
    out.enc = encoder_(p, tape, g);

    // per-level BEV pipeline: scatter voxels to a dense plane, run the 2D head,
    // then the shared center / stuff heads
    std::vector<Matrix> region_values;
    for (int l = 0; l < 4; ++l) {
      BevLayout lay = g.bev[l];
      Var plane = scatter_bev(out.enc.f_v[l], lay);
      out.bev_embed[l] = bev_[l](p, plane, g.conv_idx[l]);
      out.center[l] = center_(p, out.bev_embed[l], g.conv_idx[l]);
      auto st = stuff_(p, out.bev_embed[l]);
      out.stuff_region[l] = st.region_map;
      out.stuff_queries[l] = st.queries;
      region_values.push_back(tape.val(st.region_map));
    }

    // thing proposals: per-level peaks ranked jointly, capped at n_queries
    std::vector<QueryProposal> all;
    for (int l = 0; l < 4; ++l) {
      auto dims = g.spec.dims_at(l);
      double cx = g.spec.voxel_size[0] * g.spec.level_factors[l];
      double cy = g.spec.voxel_size[1] * g.spec.level_factors[l];
      auto props = select_thing_proposals(tape.val(out.center[l]), dims[0], dims[1], l, cx, cy,
                                          g.spec.origin[0], g.spec.origin[1], cfg_.n_queries,
                                          cfg_.local_max_suppression);
      all.insert(all.end(), props.begin(), props.end());
    }
    std::sort(all.begin(), all.end(), [](const QueryProposal& a, const QueryProposal& b) {
      if (a.score != b.score) return a.score > b.score;
      return std::tie(a.level, a.cls, a.row, a.col) < std::tie(b.level, b.cls, b.row, b.col);
    });
    if (static_cast<int>(all.size()) > cfg_.n_queries) all.resize(cfg_.n_queries);

    // stack proposal embeddings level by level (stable within the ranking)
    Var prop_embeds = constant(tape, Matrix(0, cfg_.embed_dim));
    out.proposals.clear();
    for (int l = 0; l < 4; ++l) {
      std::vector<int> pix;
      auto dims = g.spec.dims_at(l);
      for (auto& q : all) {
        if (q.level != l) continue;
        QueryProposal s = q;
        s.flat_index = static_cast<int>(out.proposals.size());
        pix.push_back(q.row * dims[1] + q.col);
        out.proposals.push_back(s);
      }
      if (pix.empty()) continue;
      prop_embeds = concat_rows(prop_embeds, transpose(gather_cols(out.bev_embed[l], pix)));
    }

    double theta = opt.theta_things_override > 0 ? opt.theta_things_override : cfg_.theta_things;
    auto tf = fuse_thing_proposals(out.proposals, tape.val(prop_embeds), theta,
                                   cfg_.fusion_window_m);
    Var q_things = out.proposals.empty() ? constant(tape, Matrix(0, cfg_.embed_dim))
                                         : fixed_linear(tf.averaging, prop_embeds);

    auto sf = fuse_stuff_proposals(region_values, tax_.n_stuff(), cfg_.theta_stuff);
    Var stuff_stack = constant(tape, Matrix(0, cfg_.embed_dim));
    for (int l = 0; l < 4; ++l) stuff_stack = concat_rows(stuff_stack, out.stuff_queries[l]);
    Var q_stuff = sf.existing_classes.empty() ? constant(tape, Matrix(0, cfg_.embed_dim))
                                              : fixed_linear(sf.averaging, stuff_stack);

    out.queries.infos = tf.infos;
    for (int c : sf.existing_classes) {
      QueryInfo info;
      info.cls = c;
      info.is_thing = false;
      out.queries.infos.push_back(info);
    }
    out.queries.n_things = static_cast<int>(tf.infos.size());
    out.queries.n_stuff = static_cast<int>(sf.existing_classes.size());
    out.queries.embeddings = concat_rows(q_things, q_stuff);

    Matrix qpts(g.cloud.size(), 3);
    for (std::size_t i = 0; i < g.cloud.size(); ++i)
      qpts.row(i) << g.cloud.positions[i][0], g.cloud.positions[i][1], g.cloud.positions[i][2];
    out.mask_embedding = build_mask_embedding(out.enc.f_p[3],
                                              positional_encoding(qpts, cfg_.embed_dim, g.spec));
    out.dec = decoder_(p, out.queries.embeddings, out.enc.f_p, out.mask_embedding,
                       opt.use_masking);

    out.sem_logits = sem2_(p, relu(sem1_(p, out.enc.f_p[3])));
    return out;
  }

  const MaskDecoder& decoder() const { return decoder_; }

 private:
  RunConfig cfg_;
  LabelTaxonomy tax_;
  nn::ParamStore params_;
  Encoder encoder_;
  std::array<BevHead, 4> bev_;
  CenterHead center_;
  StuffHead stuff_;
  MaskDecoder decoder_;
  nn::Linear sem1_, sem2_;
};

}  // namespace dqf
