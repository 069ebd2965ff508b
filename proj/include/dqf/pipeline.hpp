#pragma once

#include <string>
#include <vector>

#include "dqf/metrics.hpp"
#include "dqf/training.hpp"

namespace dqf {

struct InferenceResult {
  PanopticLabeling pred;
  std::array<Matrix, 4> center;  // heatmap values per level, for plots
};

// Full inference on one scene. block = -1 uses the last decoder block's
// masks; 0-based otherwise.
inline InferenceResult infer_scene(Model& model, const RunConfig& cfg,
                                   const LabelTaxonomy& tax, const LabeledPointCloud& cloud,
                                   int block = -1, const Model::Options& opt = {}) {
  const VoxelGridSpec spec = cfg.grid_spec();
  SceneGeometry g =
      build_scene_geometry(cloud, spec, cfg.embed_dim, cfg.knn_k, cfg.with_range_norm);
  ad::Tape tape;
  ModelOutput out = model.forward(tape, g, opt);
  const int n_blocks = static_cast<int>(out.dec.block_logits.size());
  if (block < 0) block = n_blocks - 1;
  if (block >= n_blocks)
    throw ValidationError("block index " + std::to_string(block) + " out of range (model has " +
                          std::to_string(n_blocks) + " blocks)");
  Matrix soft = tape.val(out.dec.block_logits[block])
                    .unaryExpr([](double z) { return 1.0 / (1.0 + std::exp(-z)); });
  FusedMasks fm = fuse_masks(soft, out.queries.infos, cfg.iou_thresh);
  InferenceResult res;
  res.pred = assemble(fm.soft, fm.infos, tape.val(out.sem_logits), tax);
  for (int l = 0; l < 4; ++l) res.center[l] = tape.val(out.center[l]);
  return res;
}

// Model built from a checkpoint's config snapshot (with optional overrides
// applied before construction).
inline RunConfig checkpoint_config(const nn::Checkpoint& ck,
                                   const std::vector<std::pair<std::string, std::string>>&
                                       overrides = {}) {
  RunConfig cfg = parse_config(ck.config_text);
  for (const auto& [k, v] : overrides) config_set(cfg, k, v);
  cfg.validate();
  return cfg;
}

// binary grayscale PGM (P5), values scaled from [0,1]
inline void write_pgm(const Matrix& img, int H, int W, const std::string& path) {
  if (img.size() != H * W) throw ContractError("write_pgm: size mismatch");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  f << "P5\n" << W << " " << H << "\n255\n";
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      double v = std::min(1.0, std::max(0.0, img(r * W + c)));
      f.put(static_cast<char>(std::lround(v * 255.0)));
    }
  if (!f) throw IoError("write failed: " + path);
}

}  // namespace dqf
