#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dqf/metrics.hpp"
#include "dqf/model.hpp"
#include "dqf/panoptic.hpp"

namespace dqf {

struct HeatmapTargets {
  std::array<Matrix, 4> things;  // N_th x (H_l * W_l)
  std::array<Matrix, 4> stuff;   // N_st x (H_l * W_l)
};

// Gaussian center splats per thing instance; overlaps keep the max, the
// center cell is exactly 1.
inline Matrix build_center_targets(const LabeledPointCloud& cloud, const VoxelGridSpec& spec,
                                   const LabelTaxonomy& tax, int level) {
  auto dims = spec.dims_at(level);
  const int H = dims[0], W = dims[1];
  const double cx = spec.voxel_size[0] * spec.level_factors[level];
  const double cy = spec.voxel_size[1] * spec.level_factors[level];
  Matrix y = Matrix::Zero(tax.n_things(), H * W);

  struct Inst {
    int cls = 0;
    double sx = 0, sy = 0, n = 0, radius = 0;
    std::vector<std::size_t> pts;
  };
  std::map<std::uint32_t, Inst> insts;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (cloud.instance[i] == 0) continue;
    Inst& in = insts[cloud.instance[i]];
    in.cls = cloud.semantic[i];
    in.sx += cloud.positions[i][0];
    in.sy += cloud.positions[i][1];
    in.n += 1;
    in.pts.push_back(i);
  }
  for (auto& [id, in] : insts) {
    const double mx = in.sx / in.n, my = in.sy / in.n;
    for (std::size_t i : in.pts)
      in.radius = std::max(in.radius,
                           std::hypot(cloud.positions[i][0] - mx, cloud.positions[i][1] - my));
    const int r0 = static_cast<int>(std::floor((mx - spec.origin[0]) / cx));
    const int c0 = static_cast<int>(std::floor((my - spec.origin[1]) / cy));
    if (r0 < 0 || r0 >= H || c0 < 0 || c0 >= W) continue;
    const double sigma = std::max(1.0, in.radius / cx / 3.0);
    const int reach = static_cast<int>(std::ceil(3.0 * sigma));
    for (int r = std::max(0, r0 - reach); r <= std::min(H - 1, r0 + reach); ++r)
      for (int c = std::max(0, c0 - reach); c <= std::min(W - 1, c0 + reach); ++c) {
        double d2 = static_cast<double>((r - r0) * (r - r0) + (c - c0) * (c - c0));
        double v = std::exp(-d2 / (2.0 * sigma * sigma));
        y(in.cls, r * W + c) = std::max(y(in.cls, r * W + c), v);
      }
    y(in.cls, r0 * W + c0) = 1.0;
  }
  return y;
}

// full-resolution one-hot stuff occupancy, area-averaged down to the level
inline Matrix build_stuff_targets(const LabeledPointCloud& cloud, const VoxelGridSpec& spec,
                                  const LabelTaxonomy& tax, int level) {
  const int Hf = spec.dense_dims[0], Wf = spec.dense_dims[1];
  Matrix full = Matrix::Zero(tax.n_stuff(), Hf * Wf);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    int cls = cloud.semantic[i];
    if (!tax.is_stuff(cls)) continue;
    int r = static_cast<int>(std::floor((cloud.positions[i][0] - spec.origin[0]) /
                                        spec.voxel_size[0]));
    int c = static_cast<int>(std::floor((cloud.positions[i][1] - spec.origin[1]) /
                                        spec.voxel_size[1]));
    if (r < 0 || r >= Hf || c < 0 || c >= Wf) continue;
    full(cls - tax.n_things(), r * Wf + c) = 1.0;
  }
  const int f = spec.level_factors[level];
  if (f == 1) return full;
  auto dims = spec.dims_at(level);
  const int H = dims[0], W = dims[1];
  Matrix y = Matrix::Zero(tax.n_stuff(), H * W);
  for (int ch = 0; ch < y.rows(); ++ch)
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c) {
        double s = 0;
        for (int dr = 0; dr < f; ++dr)
          for (int dc = 0; dc < f; ++dc) s += full(ch, (r * f + dr) * Wf + (c * f + dc));
        y(ch, r * W + c) = s / (f * f);
      }
  return y;
}

inline HeatmapTargets build_heatmap_targets(const LabeledPointCloud& cloud,
                                            const VoxelGridSpec& spec,
                                            const LabelTaxonomy& tax) {
  HeatmapTargets t;
  for (int l = 0; l < 4; ++l) {
    t.things[l] = build_center_targets(cloud, spec, tax, l);
    t.stuff[l] = build_stuff_targets(cloud, spec, tax, l);
  }
  return t;
}

// Eq-style heatmap loss: penalty-reduced focal, thing term / N_q, stuff term
// / (H_i W_i), summed over levels.
inline ad::Var heatmap_loss(const std::array<ad::Var, 4>& center,
                            const std::array<ad::Var, 4>& stuff_region,
                            const HeatmapTargets& tgt, int n_q) {
  using namespace ad;
  Var total;
  for (int l = 0; l < 4; ++l) {
    Var th = scale(focal_loss_sum(center[l], tgt.things[l]), 1.0 / n_q);
    Var st = scale(focal_loss_sum(stuff_region[l], tgt.stuff[l]),
                   1.0 / static_cast<double>(tgt.stuff[l].cols()));
    Var lvl = add(th, st);
    total = (l == 0) ? lvl : add(total, lvl);
  }
  return total;
}

struct MatchedMasks {
  std::vector<int> rows;               // query rows with a ground-truth match
  std::vector<Eigen::VectorXd> masks;  // parallel to rows; 0/1 over N_p
  std::vector<bool> thing_row;         // parallel to rows
};

// Things match the nearest same-class instance center within r_match
// (duplicates allowed); stuff matches its class's point set if nonempty.
inline MatchedMasks match_predictions(const std::vector<QueryInfo>& infos,
                                      const LabeledPointCloud& cloud, const LabelTaxonomy& tax,
                                      double r_match) {
  struct Center {
    int cls;
    double x, y;
    std::uint32_t id;
  };
  std::map<std::uint32_t, std::array<double, 4>> acc;  // id -> sx, sy, n, cls
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (cloud.instance[i] == 0) continue;
    auto& a = acc[cloud.instance[i]];
    a[0] += cloud.positions[i][0];
    a[1] += cloud.positions[i][1];
    a[2] += 1;
    a[3] = cloud.semantic[i];
  }
  std::vector<Center> centers;
  for (auto& [id, a] : acc)
    centers.push_back({static_cast<int>(a[3]), a[0] / a[2], a[1] / a[2], id});

  MatchedMasks mm;
  for (std::size_t q = 0; q < infos.size(); ++q) {
    const QueryInfo& info = infos[q];
    if (info.is_thing) {
      double best = r_match;
      std::uint32_t best_id = 0;
      for (const auto& c : centers) {
        if (c.cls != info.cls) continue;
        double d = std::hypot(c.x - info.x, c.y - info.y);
        if (d <= best) {
          best = d;
          best_id = c.id;
        }
      }
      if (best_id == 0) continue;
      Eigen::VectorXd y = Eigen::VectorXd::Zero(cloud.size());
      for (std::size_t i = 0; i < cloud.size(); ++i)
        if (cloud.instance[i] == best_id) y(i) = 1.0;
      mm.rows.push_back(static_cast<int>(q));
      mm.masks.push_back(std::move(y));
      mm.thing_row.push_back(true);
    } else {
      const int global = tax.n_things() + info.cls;
      Eigen::VectorXd y = Eigen::VectorXd::Zero(cloud.size());
      bool any = false;
      for (std::size_t i = 0; i < cloud.size(); ++i)
        if (cloud.semantic[i] == global) {
          y(i) = 1.0;
          any = true;
        }
      if (!any) continue;
      mm.rows.push_back(static_cast<int>(q));
      mm.masks.push_back(std::move(y));
      mm.thing_row.push_back(false);
    }
  }
  return mm;
}

// BCE + Dice over a seeded point sample, deep supervision over all blocks.
// Thing rows draw up to s_th points from the object first; everything is
// topped up to s_all distinct scene points. s_all >= N_p uses every point.
inline ad::Var mask_loss(ad::Tape& tape, const std::vector<ad::Var>& block_logits,
                         const MatchedMasks& mm, int s_th, int s_all, Rng rng) {
  using namespace ad;
  if (block_logits.empty()) throw ContractError("mask_loss: no decoder blocks");
  if (mm.rows.empty()) {
    std::cerr << "[warn] mask_loss: no matched queries, returning 0\n";
    return constant(tape, Matrix::Zero(1, 1));
  }
  const int n_p = static_cast<int>(mm.masks[0].size());

  // one sampled index set per matched row, shared across blocks
  std::vector<std::vector<int>> sel(mm.rows.size());
  for (std::size_t r = 0; r < mm.rows.size(); ++r) {
    if (s_all >= n_p) {
      sel[r].resize(n_p);
      for (int i = 0; i < n_p; ++i) sel[r][i] = i;
      continue;
    }
    std::vector<char> taken(n_p, 0);
    if (mm.thing_row[r]) {
      std::vector<int> obj;
      for (int i = 0; i < n_p; ++i)
        if (mm.masks[r](i) > 0.5) obj.push_back(i);
      for (auto k : rng.sample_without_replacement(obj.size(),
                                                   static_cast<std::size_t>(s_th))) {
        sel[r].push_back(obj[k]);
        taken[obj[k]] = 1;
      }
    }
    std::vector<int> rest;
    for (int i = 0; i < n_p; ++i)
      if (!taken[i]) rest.push_back(i);
    std::size_t need = static_cast<std::size_t>(s_all) - sel[r].size();
    for (auto k : rng.sample_without_replacement(rest.size(), need)) sel[r].push_back(rest[k]);
  }

  Var total;
  bool first = true;
  const double inv_rows = 1.0 / static_cast<double>(mm.rows.size());
  for (const Var& logits : block_logits) {
    for (std::size_t r = 0; r < mm.rows.size(); ++r) {
      std::vector<std::pair<int, int>> pos;
      Matrix y(1, sel[r].size());
      for (std::size_t i = 0; i < sel[r].size(); ++i) {
        pos.emplace_back(mm.rows[r], sel[r][i]);
        y(0, i) = mm.masks[r](sel[r][i]);
      }
      Var row = gather_entries(logits, std::move(pos));
      Var term = scale(add(bce_logits_mean(row, y), dice_loss_logits(row, y)), inv_rows);
      total = first ? term : add(total, term);
      first = false;
    }
  }
  return total;
}

inline ad::Var semantic_loss(ad::Var sem_logits, const LabeledPointCloud& cloud) {
  std::vector<int> labels(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) labels[i] = cloud.semantic[i];
  return ad::softmax_cross_entropy(sem_logits, labels);
}

struct SceneLosses {
  ad::Var hm, mask, sem, total;
};

inline SceneLosses compute_losses(ad::Tape& tape, const ModelOutput& out,
                                  const SceneGeometry& g, const HeatmapTargets& tgt,
                                  const RunConfig& cfg, const LabelTaxonomy& tax, Rng rng) {
  SceneLosses l;
  l.hm = heatmap_loss(out.center, out.stuff_region, tgt, cfg.n_queries);
  MatchedMasks mm = match_predictions(out.queries.infos, g.cloud, tax, cfg.r_match);
  l.mask = mask_loss(tape, out.dec.block_logits, mm, cfg.s_th, cfg.s_all, rng);
  l.sem = semantic_loss(out.sem_logits, g.cloud);
  l.total = ad::add(ad::add(l.hm, l.mask), l.sem);
  return l;
}

struct TrainResult {
  std::string checkpoint_path;  // last epoch
  std::string best_path;        // best train PQ
  std::string log_path;
  double final_loss = 0;
  double final_pq = 0;
  double best_pq = 0;
  int epochs_run = 0;
};

inline std::vector<LabeledPointCloud> load_dataset(const std::string& manifest_path,
                                                   const LabelTaxonomy& tax) {
  namespace fs = std::filesystem;
  auto entries = read_manifest(manifest_path);
  if (entries.empty()) throw ValidationError("manifest lists no scenes: " + manifest_path);
  std::vector<LabeledPointCloud> clouds(entries.size());
  fs::path base = fs::path(manifest_path).parent_path();
  parallel_for(entries.size(), [&](std::size_t i) {
    fs::path p = entries[i].path;
    if (!fs::exists(p)) p = base / fs::path(entries[i].path).filename();
    clouds[i] = read_cloud(p.string());
    if (clouds[i].n_things != tax.n_things() || clouds[i].n_stuff != tax.n_stuff())
      throw ValidationError("scene " + entries[i].path + ": taxonomy mismatch (file has " +
                            std::to_string(clouds[i].n_things) + "+" +
                            std::to_string(clouds[i].n_stuff) + " classes, config has " +
                            std::to_string(tax.n_things()) + "+" +
                            std::to_string(tax.n_stuff()) + ")");
  });
  return clouds;
}

inline TrainResult train(const RunConfig& cfg, const std::string& manifest_path,
                         const std::string& out_dir, const std::string& resume = "") {
  namespace fs = std::filesystem;
  cfg.validate();
  const LabelTaxonomy tax = cfg.taxonomy();
  const VoxelGridSpec spec = cfg.grid_spec();
  fs::create_directories(out_dir);

  auto clouds = load_dataset(manifest_path, tax);

  std::vector<SceneGeometry> geoms(clouds.size());
  std::vector<HeatmapTargets> targets(clouds.size());
  std::vector<char> usable(clouds.size(), 0);
  parallel_for(clouds.size(), [&](std::size_t i) {
    try {
      geoms[i] = build_scene_geometry(clouds[i], spec, cfg.embed_dim, cfg.knn_k,
                                      cfg.with_range_norm);
      targets[i] = build_heatmap_targets(clouds[i], spec, tax);
      usable[i] = 1;
    } catch (const ValidationError& e) {
      std::cerr << "[warn] skipping scene " << i << ": " << e.what() << "\n";
    }
  });
  if (std::count(usable.begin(), usable.end(), 1) == 0)
    throw ValidationError("no usable scenes in " + manifest_path);

  Model model(cfg);
  int start_epoch = 0;
  nn::AdamW opt;
  opt.lr = cfg.learning_rate;
  opt.weight_decay = cfg.weight_decay;
  if (!resume.empty()) {
    nn::Checkpoint ck = nn::load_checkpoint(resume);
    nn::restore_params(model.param_store(), ck);
    auto it = ck.blobs.find("__meta.epoch");
    if (it != ck.blobs.end()) start_epoch = static_cast<int>(it->second(0, 0));
    auto is = ck.blobs.find("__meta.step");
    if (is != ck.blobs.end()) opt.step_count = static_cast<std::int64_t>(is->second(0, 0));
  }

  TrainResult res;
  res.log_path = (fs::path(out_dir) / "train_log.jsonl").string();
  res.checkpoint_path = (fs::path(out_dir) / "last.dqck").string();
  res.best_path = (fs::path(out_dir) / "best.dqck").string();
  std::ofstream log(res.log_path, resume.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw IoError("cannot open log " + res.log_path);
  log.precision(17);

  const std::string cfg_text = dump_config(cfg);
  const int drop_at = (cfg.epochs * 3) / 4;
  res.best_pq = -1;
  const auto t0 = std::chrono::steady_clock::now();

  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    opt.lr = cfg.learning_rate * (epoch >= drop_at ? 0.1 : 1.0);
    double sum_hm = 0, sum_mask = 0, sum_sem = 0, sum_total = 0;
    int n_scenes = 0;
    std::vector<std::vector<ClassStats>> scene_stats;

    for (std::size_t s = 0; s < clouds.size(); ++s) {
      if (!usable[s]) continue;
      ad::Tape tape;
      ModelOutput out = model.forward(tape, geoms[s]);
      Rng srng = Rng(cfg.seed).stream("sampling").stream(
          static_cast<std::uint64_t>(epoch) * 100003ull + s);
      SceneLosses l = compute_losses(tape, out, geoms[s], targets[s], cfg, tax, srng);

      auto check = [&](ad::Var v, const char* name) {
        double x = tape.val(v)(0, 0);
        if (!std::isfinite(x)) throw NumericError(std::string("non-finite ") + name +
                                                  " loss at epoch " + std::to_string(epoch));
        return x;
      };
      sum_hm += check(l.hm, "heatmap");
      sum_mask += check(l.mask, "mask");
      sum_sem += check(l.sem, "semantic");
      sum_total += check(l.total, "total");
      ++n_scenes;

      tape.backward(l.total);
      model.param_store().collect_grads();
      opt.step(model.param_store());

      // training-pass panoptic quality from the final block (pre-step values)
      if (!out.dec.block_logits.empty()) {
        Matrix soft = tape.val(out.dec.block_logits.back())
                          .unaryExpr([](double z) { return 1.0 / (1.0 + std::exp(-z)); });
        FusedMasks fm = fuse_masks(soft, out.queries.infos, cfg.iou_thresh);
        PanopticLabeling pred =
            assemble(fm.soft, fm.infos, tape.val(out.sem_logits), tax);
        scene_stats.push_back(evaluate_counts(pred, geoms[s].cloud, tax));
      }
    }

    PanopticReport rep = evaluate_pooled(scene_stats, tax);
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    nlohmann::json line;
    line["epoch"] = epoch;
    line["L_hm"] = sum_hm / n_scenes;
    line["L_mask"] = sum_mask / n_scenes;
    line["L_sem"] = sum_sem / n_scenes;
    line["L"] = sum_total / n_scenes;
    line["lr"] = opt.lr;
    line["wall_time"] = wall;
    line["train_pq"] = rep.pq;
    log << line.dump() << "\n";
    log.flush();

    std::map<std::string, Matrix> meta;
    meta["__meta.epoch"] = Matrix::Constant(1, 1, epoch + 1);
    meta["__meta.step"] = Matrix::Constant(1, 1, static_cast<double>(opt.step_count));
    nn::save_checkpoint(res.checkpoint_path, cfg_text, model.param_store(), meta);
    if (rep.pq > res.best_pq) {
      res.best_pq = rep.pq;
      nn::save_checkpoint(res.best_path, cfg_text, model.param_store(), meta);
    }
    res.final_loss = sum_total / n_scenes;
    res.final_pq = rep.pq;
    res.epochs_run = epoch + 1;
  }
  return res;
}

}  // namespace dqf
