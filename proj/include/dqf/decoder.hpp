#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "dqf/encoder.hpp"
#include "dqf/query_gen.hpp"

namespace dqf {

// sin/cos pairs per axis at geometrically spaced frequencies, zero phase at
// the grid origin, padded with zeros up to embed_dim
inline Matrix positional_encoding(const Matrix& positions, int embed_dim,
                                  const VoxelGridSpec& spec) {
  const int n = static_cast<int>(positions.rows());
  const int n_freq = embed_dim / 6;
  if (n_freq < 1) throw ContractError("positional_encoding: embed_dim too small");
  Matrix out = Matrix::Zero(n, embed_dim);
  for (int a = 0; a < 3; ++a) {
    double extent = spec.dense_dims[a] * spec.voxel_size[a];
    for (int i = 0; i < n; ++i) {
      double t = (positions(i, a) - spec.origin[a]) / extent;
      for (int j = 0; j < n_freq; ++j) {
        double ang = t * 3.14159265358979323846 * std::pow(2.0, j);
        out(i, (a * n_freq + j) * 2) = std::sin(ang);
        out(i, (a * n_freq + j) * 2 + 1) = std::cos(ang);
      }
    }
  }
  return out;
}

// E = F_4^p + P_e
inline ad::Var build_mask_embedding(ad::Var f4p, const Matrix& pos_enc) {
  if (f4p.tape->val(f4p).rows() != pos_enc.rows() ||
      f4p.tape->val(f4p).cols() != pos_enc.cols())
    throw ContractError("mask embedding: shape mismatch between F_4^p and P_e");
  return ad::add_const(f4p, pos_enc);
}

// sigmoid(Q E^T)
inline ad::Var predict_masks(ad::Var queries, ad::Var mask_embedding) {
  return ad::sigmoid(ad::matmul(queries, ad::transpose(mask_embedding)));
}
inline ad::Var mask_logits(ad::Var queries, ad::Var mask_embedding) {
  return ad::matmul(queries, ad::transpose(mask_embedding));
}

namespace detail {

// multi-head attention; add_mask (rows x keys) is added to every head's logits
inline ad::Var attention(ad::Var q, ad::Var k, ad::Var v, int heads,
                         const Matrix* add_mask = nullptr) {
  using namespace ad;
  Tape& t = *q.tape;
  const int dim = static_cast<int>(t.val(q).cols());
  if (dim % heads != 0) throw ContractError("attention: heads must divide dim");
  const int dh = dim / heads;
  Var out;
  for (int h = 0; h < heads; ++h) {
    std::vector<int> cols(dh);
    for (int i = 0; i < dh; ++i) cols[i] = h * dh + i;
    Var qh = heads == 1 ? q : gather_cols(q, cols);
    Var kh = heads == 1 ? k : gather_cols(k, cols);
    Var vh = heads == 1 ? v : gather_cols(v, cols);
    Var logits = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
    Var attn = softmax_rows(logits, add_mask);
    Var oh = matmul(attn, vh);
    out = (h == 0) ? oh : concat_cols(out, oh);
  }
  return out;
}

}  // namespace detail

// one decoder block: masked cross-attention over point embeddings, then
// self-attention and FFN, layer norm after each residual
class DecoderBlock {
 public:
  DecoderBlock() = default;
  DecoderBlock(nn::ParamStore& p, const std::string& prefix, int embed_dim, int ffn_mult,
               int heads, Rng& rng)
      : heads_(heads) {
    cq_ = nn::Linear(p, prefix + ".cq", embed_dim, embed_dim, rng);
    ck_ = nn::Linear(p, prefix + ".ck", embed_dim, embed_dim, rng);
    cv_ = nn::Linear(p, prefix + ".cv", embed_dim, embed_dim, rng);
    ln1_ = nn::LayerNorm(p, prefix + ".ln1", embed_dim);
    sq_ = nn::Linear(p, prefix + ".sq", embed_dim, embed_dim, rng);
    sk_ = nn::Linear(p, prefix + ".sk", embed_dim, embed_dim, rng);
    sv_ = nn::Linear(p, prefix + ".sv", embed_dim, embed_dim, rng);
    ln2_ = nn::LayerNorm(p, prefix + ".ln2", embed_dim);
    ffn1_ = nn::Linear(p, prefix + ".ffn1", embed_dim, embed_dim * ffn_mult, rng);
    ffn2_ = nn::Linear(p, prefix + ".ffn2", embed_dim * ffn_mult, embed_dim, rng);
    ln3_ = nn::LayerNorm(p, prefix + ".ln3", embed_dim);
  }

  // prev_mask: soft mask values from the previous block ((N_t+N_s) x N_p),
  // gating only; pass nullptr to disable masking. attn_out optionally
  // receives the (single-head) cross-attention weights for inspection.
  ad::Var operator()(const nn::ParamStore& p, ad::Var queries, ad::Var point_embed,
                     const Matrix* prev_mask, ad::Var* attn_out = nullptr) const {
    using namespace ad;
    Tape& t = *queries.tape;
    const int n_q = static_cast<int>(t.val(queries).rows());
    const int n_p = static_cast<int>(t.val(point_embed).rows());

    Matrix add_mask;
    const Matrix* maskp = nullptr;
    if (prev_mask) {
      // additive gating: keys with prev mask below 0.5 get -1e9 on the logit;
      // rows whose active set would be empty stay unmasked
      add_mask = Matrix::Zero(n_q, n_p);
      for (int r = 0; r < n_q; ++r) {
        bool any_active = false;
        for (int c = 0; c < n_p; ++c) any_active = any_active || (*prev_mask)(r, c) >= 0.5;
        if (!any_active) continue;
        for (int c = 0; c < n_p; ++c)
          if ((*prev_mask)(r, c) < 0.5) add_mask(r, c) = -1e9;
      }
      maskp = &add_mask;
    }

    Var k = ck_(p, point_embed);
    Var v = cv_(p, point_embed);
    Var q = cq_(p, queries);
    Var cross;
    if (attn_out) {
      const int dim = static_cast<int>(t.val(q).cols());
      Var logits = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(dim)));
      Var attn = softmax_rows(logits, maskp);
      *attn_out = attn;
      cross = matmul(attn, v);
    } else {
      cross = dqf::detail::attention(q, k, v, heads_, maskp);
    }
    Var x = ln1_(p, add(cross, queries));
    Var self = dqf::detail::attention(sq_(p, x), sk_(p, x), sv_(p, x), heads_);
    x = ln2_(p, add(self, x));
    Var ffn = ffn2_(p, relu(ffn1_(p, x)));
    x = ln3_(p, add(ffn, x));
    if (!t.val(x).allFinite()) throw NumericError("decoder block produced non-finite values");
    return x;
  }

 private:
  int heads_ = 1;
  nn::Linear cq_, ck_, cv_, sq_, sk_, sv_, ffn1_, ffn2_;
  nn::LayerNorm ln1_, ln2_, ln3_;
};

// full decoder: N_l blocks over point embeddings at levels [1/8, 1/4, 1/2]
class MaskDecoder {
 public:
  MaskDecoder() = default;
  MaskDecoder(nn::ParamStore& p, int n_blocks, int embed_dim, int ffn_mult, int heads, Rng& rng)
      : n_blocks_(n_blocks) {
    for (int b = 0; b < n_blocks; ++b)
      blocks_.push_back(DecoderBlock(p, "dec.b" + std::to_string(b), embed_dim, ffn_mult, heads,
                                     rng));
  }

  struct Output {
    std::vector<ad::Var> block_logits;  // mask logits per block, (N_t+N_s) x N_p
    ad::Var final_queries;
  };

  // point_embeds: per-level F_i^p (level index 0 = 1/8); block b uses level b
  Output operator()(const nn::ParamStore& p, ad::Var queries,
                    const std::array<ad::Var, 4>& point_embeds, ad::Var mask_embedding,
                    bool use_masking = true) const {
    using namespace ad;
    Output out;
    Tape& t = *queries.tape;
    Var cur = queries;
    Matrix gate = t.val(sigmoid(mask_logits(cur, mask_embedding)));  // M_0 bootstrap
    for (int b = 0; b < n_blocks_; ++b) {
      cur = blocks_[b](p, cur, point_embeds[b], use_masking ? &gate : nullptr);
      Var logits = mask_logits(cur, mask_embedding);
      out.block_logits.push_back(logits);
      gate = t.val(logits).unaryExpr([](double z) { return 1.0 / (1.0 + std::exp(-z)); });
    }
    out.final_queries = cur;
    return out;
  }

  const DecoderBlock& block(int i) const { return blocks_.at(i); }
  int n_blocks() const { return n_blocks_; }

 private:
  int n_blocks_ = 0;
  std::vector<DecoderBlock> blocks_;
};

}  // namespace dqf
