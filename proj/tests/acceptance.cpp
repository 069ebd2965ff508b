// Acceptance checks. Each criterion prints exactly one [PASS]/[FAIL] line;
// the exit code is nonzero if any criterion failed.
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "dqf/pipeline.hpp"
#include "dqf/scene_synth.hpp"
#include "test_util.hpp"

using namespace dqf;
using namespace dqf::ad;
namespace fs = std::filesystem;

namespace {

bool g_all_ok = true;

void report(int crit, bool ok, const std::string& detail) {
  std::printf("[%s] criterion %d: %s\n", ok ? "PASS" : "FAIL", crit, detail.c_str());
  std::fflush(stdout);
  g_all_ok = g_all_ok && ok;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------- criterion 1

RunConfig micro_config() {
  RunConfig cfg;
  cfg.range_xy = 3.2;
  cfg.voxel_xy = 0.8;  // 8 x 8
  cfg.voxel_z = 0.6;   // 8
  cfg.base_channels = 8;
  cfg.embed_dim = 12;
  cfg.n_queries = 4;
  cfg.s_th = 8;
  cfg.s_all = 64;  // >= N_p: the mask loss uses every point, no sampling
  cfg.validate();
  return cfg;
}

LabeledPointCloud micro_scene() {
  LabeledPointCloud c;
  c.n_things = 3;
  c.n_stuff = 3;
  auto add = [&](float x, float y, float z, std::uint16_t sem, std::uint32_t inst) {
    c.positions.push_back({x, y, z});
    c.intensity.push_back(0.4f);
    c.semantic.push_back(sem);
    c.instance.push_back(inst);
  };
  add(1.0f, 1.0f, 0.2f, 0, 1);
  add(1.2f, 1.0f, 0.3f, 0, 1);
  add(1.0f, 1.2f, 0.2f, 0, 1);
  add(1.1f, 1.1f, 0.5f, 0, 1);
  add(-1.5f, -1.5f, 0.4f, 1, 2);
  add(-1.3f, -1.5f, 0.5f, 1, 2);
  add(-1.5f, -1.3f, 0.6f, 1, 2);
  add(2.0f, -2.0f, 0.1f, 2, 3);
  add(2.2f, -2.0f, 0.2f, 2, 3);
  add(0.0f, 0.0f, 0.0f, 3, 0);
  add(0.8f, -0.8f, 0.0f, 3, 0);
  add(-0.8f, 0.8f, 0.0f, 3, 0);
  add(-2.0f, 2.0f, 1.5f, 4, 0);
  add(-2.2f, 2.0f, 1.6f, 4, 0);
  add(2.5f, 2.5f, 0.8f, 5, 0);
  add(2.4f, 2.6f, 0.9f, 5, 0);
  c.validate();
  return c;
}

void criterion1() {
  const auto t0 = std::chrono::steady_clock::now();
  RunConfig cfg = micro_config();
  const LabelTaxonomy tax = cfg.taxonomy();
  auto cloud = micro_scene();
  SceneGeometry g = build_scene_geometry(cloud, cfg.grid_spec(), cfg.embed_dim, cfg.knn_k,
                                         cfg.with_range_norm);
  HeatmapTargets tgt = build_heatmap_targets(cloud, cfg.grid_spec(), tax);
  Model model(cfg);

  // the loss is piecewise-smooth; this signature captures the discrete
  // decisions so perturbations that flip one can be skipped
  auto run = [&](int which, std::string* sig) -> double {
    Tape tape;
    ModelOutput out = model.forward(tape, g);
    SceneLosses l = compute_losses(tape, out, g, tgt, cfg, tax, Rng(99));
    if (sig) {
      std::ostringstream os;
      for (const auto& p : out.proposals)
        os << p.level << "," << p.cls << "," << p.row << "," << p.col << ";";
      os << "|" << out.queries.n_things << "," << out.queries.n_stuff << "|";
      MatchedMasks mm = match_predictions(out.queries.infos, cloud, tax, cfg.r_match);
      for (std::size_t r = 0; r < mm.rows.size(); ++r)
        os << mm.rows[r] << ":" << mm.masks[r].sum() << ";";
      // mask-gate pattern: block b+1 attends where sigmoid(logits_b) >= 0.5
      os << "|";
      for (const Var& bl : out.dec.block_logits) {
        const Matrix& m = tape.val(bl);
        for (int r = 0; r < m.rows(); ++r)
          for (int c = 0; c < m.cols(); ++c) os << (m(r, c) >= 0 ? '1' : '0');
      }
      *sig = os.str();
    }
    Var v = which == 0 ? l.hm : which == 1 ? l.mask : l.sem;
    return tape.val(v)(0, 0);
  };

  const char* loss_names[3] = {"heatmap", "mask", "semantic"};
  double worst = 0;
  int checked = 0, skipped = 0;
  std::string base_sig;
  run(0, &base_sig);
  Rng pick(4242);
  const double h = 1e-5;

  for (int which = 0; which < 3; ++which) {
    // analytic gradients for this loss
    Tape tape;
    ModelOutput out = model.forward(tape, g);
    SceneLosses l = compute_losses(tape, out, g, tgt, cfg, tax, Rng(99));
    tape.backward(which == 0 ? l.hm : which == 1 ? l.mask : l.sem);
    model.param_store().collect_grads();
    std::map<std::string, Matrix> grads;
    for (const auto& e : model.param_store().entries()) grads[e.name] = e.grad;

    for (auto& e : model.param_store().entries()) {
      for (int s = 0; s < 2; ++s) {
        int r = static_cast<int>(pick.below(static_cast<std::uint64_t>(e.value.rows())));
        int c = static_cast<int>(pick.below(static_cast<std::uint64_t>(e.value.cols())));
        double old = e.value(r, c);
        double an = grads[e.name](r, c);
        // fd_at: central difference, or nan if a discrete decision flipped
        auto fd_at = [&](double step) {
          std::string s1, s2;
          e.value(r, c) = old + step;
          double fp = run(which, &s1);
          e.value(r, c) = old - step;
          double fm = run(which, &s2);
          e.value(r, c) = old;
          if (s1 != base_sig || s2 != base_sig)
            return std::numeric_limits<double>::quiet_NaN();
          return (fp - fm) / (2 * step);
        };
        auto err_of = [&](double fd) {
          return std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-4});
        };
        double fd = fd_at(h);
        double err = std::isnan(fd) ? std::numeric_limits<double>::infinity() : err_of(fd);
        if (err > 1e-4) {
          // near a relu kink or unlucky truncation: retry with a smaller step
          double fd2 = fd_at(1.5e-6);
          if (!std::isnan(fd2)) err = std::min(err, err_of(fd2));
        }
        if (std::isinf(err)) {
          ++skipped;
          continue;
        }
        if (err > 1e-4)
          std::fprintf(stderr, "  grad mismatch: %s loss, %s(%d,%d) rel err %g\n",
                       loss_names[which], e.name.c_str(), r, c, err);
        worst = std::max(worst, err);
        ++checked;
      }
    }
  }
  double secs = seconds_since(t0);
  std::ostringstream os;
  os << "gradient check: worst rel err " << worst << " over " << checked
     << " sampled entries (" << skipped << " skipped at decision boundaries), " << secs << " s";
  report(1, worst < 1e-4 && checked > 300 && secs < 120.0, os.str());
}

// ---------------------------------------------------------------- criterion 2

void criterion2() {
  nn::ParamStore params;
  Rng init(9);
  const int C = 24;
  DecoderBlock blk(params, "b", C, 2, 1, init);
  Rng data(10);
  Matrix q = testutil::random_matrix(data, 6, C);
  Matrix pts = testutil::random_matrix(data, 19, C);

  Tape t1;
  params.begin_forward(t1);
  Matrix ones = Matrix::Ones(6, 19);
  Var attn;
  Var masked = blk(params, t1.leaf(q), t1.leaf(pts), &ones, &attn);
  double row_sum_err = 0;
  Matrix a = t1.val(attn);
  for (int r = 0; r < a.rows(); ++r) row_sum_err = std::max(row_sum_err, std::abs(a.row(r).sum() - 1.0));

  Tape t2;
  params.begin_forward(t2);
  Var plain = blk(params, t2.leaf(q), t2.leaf(pts), nullptr);
  double diff = (t1.val(masked) - t2.val(plain)).cwiseAbs().maxCoeff();

  std::ostringstream os;
  os << "masked attention: all-ones vs unmasked max diff " << diff << ", row-sum err "
     << row_sum_err;
  report(2, diff < 1e-6 && row_sum_err < 1e-6, os.str());
}

// ---------------------------------------------------------------- criterion 3

double oracle_pq(const PanopticLabeling& pred, const LabeledPointCloud& gt,
                 const LabelTaxonomy& tax) {
  using Key = std::pair<int, std::uint32_t>;
  auto segments = [&](const std::vector<std::uint16_t>& sem,
                      const std::vector<std::uint32_t>& inst) {
    std::map<Key, std::set<std::size_t>> seg;
    for (std::size_t i = 0; i < sem.size(); ++i)
      seg[{sem[i], tax.is_thing(sem[i]) ? inst[i] : 0u}].insert(i);
    return seg;
  };
  auto ps = segments(pred.semantic, pred.instance);
  auto gs = segments(gt.semantic, gt.instance);

  int n_present = 0;
  double total = 0;
  for (int c = 0; c < tax.n_classes(); ++c) {
    long tp = 0, fp = 0, fn = 0;
    double iou_sum = 0;
    std::set<Key> pm, gm;
    for (const auto& [pk, pset] : ps) {
      if (pk.first != c) continue;
      for (const auto& [gk, gset] : gs) {
        if (gk.first != c) continue;
        std::size_t inter = 0;
        for (auto i : pset) inter += gset.count(i);
        double iou = static_cast<double>(inter) / (pset.size() + gset.size() - inter);
        if (iou > 0.5) {
          ++tp;
          iou_sum += iou;
          pm.insert(pk);
          gm.insert(gk);
        }
      }
    }
    for (const auto& [pk, s] : ps)
      if (pk.first == c && !pm.count(pk)) ++fp;
    for (const auto& [gk, s] : gs)
      if (gk.first == c && !gm.count(gk)) ++fn;
    if (tp + fp + fn == 0) continue;
    ++n_present;
    double sq = tp > 0 ? iou_sum / tp : 0.0;
    double rq = static_cast<double>(tp) / (tp + 0.5 * fn + 0.5 * fp);
    total += sq * rq;
  }
  return n_present > 0 ? total / n_present : 0.0;
}

void criterion3() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(2718);
  int mismatches = 0;
  const std::vector<std::string> pool{"a", "b", "c", "d", "e"};
  for (int trial = 0; trial < 1000; ++trial) {
    int n_th = 1 + static_cast<int>(rng.below(3));
    int n_st = 1 + static_cast<int>(rng.below(2));
    LabelTaxonomy tax;
    tax.thing_classes.assign(pool.begin(), pool.begin() + n_th);
    tax.stuff_classes.assign(pool.begin() + 3, pool.begin() + 3 + n_st);
    int n_cls = n_th + n_st;
    int n_p = 5 + static_cast<int>(rng.below(196));
    int insts_per_cls = 1 + static_cast<int>(rng.below(5));  // <= 20 segments total

    LabeledPointCloud gt;
    gt.n_things = static_cast<std::uint16_t>(n_th);
    gt.n_stuff = static_cast<std::uint16_t>(n_st);
    PanopticLabeling pred;
    for (int i = 0; i < n_p; ++i) {
      int gc = static_cast<int>(rng.below(static_cast<std::uint64_t>(n_cls)));
      gt.semantic.push_back(static_cast<std::uint16_t>(gc));
      gt.instance.push_back(
          gc < n_th ? 1 + gc * 8 + static_cast<std::uint32_t>(rng.below(insts_per_cls)) : 0);
      int pc = static_cast<int>(rng.below(static_cast<std::uint64_t>(n_cls)));
      pred.semantic.push_back(static_cast<std::uint16_t>(pc));
      pred.instance.push_back(
          pc < n_th ? 1 + pc * 8 + static_cast<std::uint32_t>(rng.below(insts_per_cls)) : 0);
    }
    gt.positions.assign(n_p, {0.f, 0.f, 0.f});
    gt.intensity.assign(n_p, 0.f);

    PanopticReport rep = evaluate(pred, gt, tax);
    if (rep.pq != oracle_pq(pred, gt, tax)) ++mismatches;
  }
  double secs = seconds_since(t0);
  std::ostringstream os;
  os << "PQ oracle: " << mismatches << "/1000 mismatches, " << secs << " s";
  report(3, mismatches == 0 && secs < 60.0, os.str());
}

// ---------------------------------------------------------------- criterion 4

Matrix brute_v2p_weights(const SparseVoxelGrid& g, const Matrix& q, int k, double eps = 1e-8) {
  const int n_v = static_cast<int>(g.n_voxels());
  const int kk = std::min(k, n_v);
  Matrix centers(n_v, 3);
  for (int r = 0; r < n_v; ++r) centers.row(r) = g.center_of(r).transpose();
  Matrix w = Matrix::Zero(q.rows(), n_v);
  for (int i = 0; i < q.rows(); ++i) {
    const Eigen::Vector3d p = q.row(i).transpose();
    std::vector<std::pair<double, int>> d(n_v);
    for (int v = 0; v < n_v; ++v)
      d[v] = {(centers.row(v).transpose() - p).squaredNorm(), v};
    std::sort(d.begin(), d.end());
    double wsum = 0;
    for (int j = 0; j < kk; ++j) wsum += 1.0 / (std::sqrt(d[j].first) + eps);
    for (int j = 0; j < kk; ++j)
      w(i, d[j].second) = (1.0 / (std::sqrt(d[j].first) + eps)) / wsum;
  }
  return w;
}

void criterion4() {
  Rng rng(55);
  VoxelGridSpec spec;
  spec.origin = {-4, -4, -1};
  spec.voxel_size = {0.5, 0.5, 0.5};
  spec.dense_dims = {16, 16, 8};
  spec.level_factors = {8, 4, 2, 1};
  spec.validate();

  double worst = -1;
  for (int trial = 0; trial < 40; ++trial) {
    std::vector<std::array<float, 3>> pts;
    int n = 3 + static_cast<int>(rng.below(60));
    for (int i = 0; i < n; ++i)
      pts.push_back({static_cast<float>(rng.uniform(-3.9, 3.9)),
                     static_cast<float>(rng.uniform(-3.9, 3.9)),
                     static_cast<float>(rng.uniform(-0.9, 2.9))});
    LabeledPointCloud cloud;
    cloud.n_things = 1;
    cloud.n_stuff = 1;
    cloud.positions = pts;
    cloud.intensity.assign(pts.size(), 0.f);
    cloud.semantic.assign(pts.size(), 1);
    cloud.instance.assign(pts.size(), 0);
    int level = static_cast<int>(rng.below(4));
    auto g = voxelize(cloud, spec, level);
    if (g.n_voxels() == 0 || g.n_voxels() > 100) continue;
    Matrix q = testutil::random_matrix(rng, 20, 3, 5.0);
    Matrix got = Matrix(v2p_weights(g, q, 3));
    Matrix want = brute_v2p_weights(g, q, 3);
    worst = std::max(worst, (got - want).cwiseAbs().maxCoeff());
  }

  // translation invariance of voxel indices under whole-cell shifts
  std::vector<std::array<float, 3>> pts;
  for (int i = 0; i < 30; ++i)
    pts.push_back({static_cast<float>(rng.uniform(-2.0, 2.0)),
                   static_cast<float>(rng.uniform(-2.0, 2.0)),
                   static_cast<float>(rng.uniform(-0.5, 1.5))});
  LabeledPointCloud cloud;
  cloud.n_things = 1;
  cloud.n_stuff = 1;
  cloud.positions = pts;
  cloud.intensity.assign(pts.size(), 0.f);
  cloud.semantic.assign(pts.size(), 1);
  cloud.instance.assign(pts.size(), 0);
  auto base = voxelize(cloud, spec, 3);
  int bad_shifts = 0;
  for (int trial = 0; trial < 100; ++trial) {
    int sx = static_cast<int>(rng.below(5)) - 2;
    int sy = static_cast<int>(rng.below(5)) - 2;
    int sz = static_cast<int>(rng.below(3)) - 1;
    auto shifted = cloud;
    for (auto& p : shifted.positions) {
      p[0] += static_cast<float>(sx * spec.voxel_size[0]);
      p[1] += static_cast<float>(sy * spec.voxel_size[1]);
      p[2] += static_cast<float>(sz * spec.voxel_size[2]);
    }
    auto g = voxelize(shifted, spec, 3);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      if (base.point_to_voxel[i] < 0 || g.point_to_voxel[i] < 0) continue;
      auto a = base.coords[base.point_to_voxel[i]];
      auto b = g.coords[g.point_to_voxel[i]];
      if (b[0] - a[0] != sx || b[1] - a[1] != sy || b[2] - a[2] != sz) ++bad_shifts;
    }
  }

  std::ostringstream os;
  os << "v2p vs kNN oracle max |diff| " << worst << " (exact), " << bad_shifts
     << " translation violations";
  report(4, worst == 0.0 && bad_shifts == 0, os.str());
}

// ---------------------------------------------------------------- criterion 5

void criterion5() {
  Rng rng(808);
  // 10,000 proposals in crowded windows, aggressive threshold
  std::vector<QueryProposal> props(10000);
  Matrix emb(10000, 8);
  for (int i = 0; i < 10000; ++i) {
    props[i].cls = static_cast<int>(rng.below(5));
    props[i].x = rng.uniform(-3, 3);
    props[i].y = rng.uniform(-3, 3);
    props[i].score = rng.uniform();
    props[i].flat_index = i;
    if (i > 0 && rng.uniform() < 0.3) {
      emb.row(i) = emb.row(static_cast<int>(rng.below(static_cast<std::uint64_t>(i))));
    } else {
      for (int c = 0; c < 8; ++c) emb(i, c) = rng.uniform(-1, 1);
    }
  }
  auto check_no_cross = [&](const ThingFusionResult& res) {
    for (int col = 0; col < res.averaging.outerSize(); ++col)
      for (SparseMat::InnerIterator it(res.averaging, col); it; ++it)
        if (props[it.col()].cls != res.infos[it.row()].cls) return false;
    return true;
  };
  auto loose = fuse_thing_proposals(props, emb, 0.2, 1.0);
  bool no_cross = check_no_cross(loose);

  // theta = 1.0: merged members must be bitwise-identical embeddings
  auto strict = fuse_thing_proposals(props, emb, 1.0, 1.0);
  bool identical_only = true;
  {
    std::vector<std::vector<int>> members(strict.infos.size());
    for (int col = 0; col < strict.averaging.outerSize(); ++col)
      for (SparseMat::InnerIterator it(strict.averaging, col); it; ++it)
        members[it.row()].push_back(static_cast<int>(it.col()));
    for (const auto& grp : members)
      for (std::size_t j = 1; j < grp.size(); ++j)
        identical_only = identical_only && (emb.row(grp[0]) == emb.row(grp[j]));
  }

  // fuse_masks idempotence on random soft masks
  bool idempotent = true;
  for (int trial = 0; trial < 200; ++trial) {
    int n_q = 1 + static_cast<int>(rng.below(10));
    int n_p = 5 + static_cast<int>(rng.below(50));
    Matrix soft(n_q, n_p);
    std::vector<QueryInfo> infos(n_q);
    for (int q = 0; q < n_q; ++q) {
      infos[q].cls = static_cast<int>(rng.below(3));
      infos[q].is_thing = rng.uniform() < 0.8;
      for (int p = 0; p < n_p; ++p) soft(q, p) = rng.uniform();
    }
    FusedMasks once = fuse_masks(soft, infos, 0.5);
    FusedMasks twice = fuse_masks(once.soft, once.infos, 0.5);
    idempotent = idempotent && once.soft == twice.soft &&
                 once.infos.size() == twice.infos.size();
  }

  std::ostringstream os;
  os << "fusion: cross-class merges " << (no_cross ? "none" : "FOUND")
     << ", theta=1 identical-only " << (identical_only ? "yes" : "NO") << ", fuse_masks idempotent "
     << (idempotent ? "yes" : "NO");
  report(5, no_cross && identical_only && idempotent, os.str());
}

// ------------------------------------------------------- criteria 6, 7 and 8

RunConfig overfit_config() {
  RunConfig cfg;
  cfg.seed = 7;
  cfg.voxel_xy = 0.8;
  cfg.voxel_z = 0.6;  // 32 x 32 x 8 dense grid
  cfg.base_channels = 16;
  cfg.embed_dim = 32;
  cfg.n_queries = 20;
  cfg.decoder_blocks = 3;
  cfg.epochs = 200;
  cfg.learning_rate = 1e-3;
  cfg.weight_decay = 0.0;  // the point of this experiment is memorization
  cfg.validate();
  return cfg;
}

struct OverfitState {
  RunConfig cfg;
  std::string manifest;
  std::vector<LabeledPointCloud> clouds;
  Model* model = nullptr;
  bool trained = false;
  double pq = 0;
};

OverfitState g_overfit;

PanopticReport eval_scenes(Model& model, const RunConfig& cfg, const LabelTaxonomy& tax,
                           const std::vector<LabeledPointCloud>& clouds, int block,
                           const Model::Options& opt = {}) {
  std::vector<std::vector<ClassStats>> stats;
  for (const auto& c : clouds) {
    InferenceResult r = infer_scene(model, cfg, tax, c, block, opt);
    stats.push_back(evaluate_counts(r.pred, c, tax));
  }
  return evaluate_pooled(stats, tax);
}

void criterion6() {
  const auto t0 = std::chrono::steady_clock::now();
  RunConfig cfg = overfit_config();
  const LabelTaxonomy tax = cfg.taxonomy();
  auto tmp = fs::temp_directory_path();
  std::string data_dir = (tmp / "dqf_acc_overfit_data").string();
  fs::remove_all(data_dir);
  synthesize_dataset(cfg.recipe(), tax, 16, data_dir);
  std::string manifest = (fs::path(data_dir) / "manifest.json").string();

  std::string run_dir = (tmp / "dqf_acc_overfit_run").string();
  fs::remove_all(run_dir);
  TrainResult tr = train(cfg, manifest, run_dir);

  // evaluate from the final checkpoint, as the eval command would
  static Model model(cfg);
  nn::Checkpoint ck = nn::load_checkpoint(tr.checkpoint_path);
  nn::restore_params(model.param_store(), ck);
  g_overfit.cfg = cfg;
  g_overfit.manifest = manifest;
  g_overfit.clouds = load_dataset(manifest, tax);
  g_overfit.model = &model;

  PanopticReport rep = eval_scenes(model, cfg, tax, g_overfit.clouds, -1);
  double secs = seconds_since(t0);
  g_overfit.trained = true;
  g_overfit.pq = rep.pq;

  std::ostringstream os;
  os << "overfit 16 scenes / 200 epochs: PQ " << as_percent(rep.pq) << ", PQ-things "
     << as_percent(rep.pq_th) << ", PQ-stuff " << as_percent(rep.pq_st) << ", " << secs
     << " s";
  report(6, rep.pq >= 0.85 && rep.pq_th >= 0.75 && rep.pq_st >= 0.90 && secs <= 1200.0,
         os.str());
}

void criterion7() {
  if (!g_overfit.trained) {
    report(7, false, "ablations skipped: overfit model unavailable");
    return;
  }
  const LabelTaxonomy tax = g_overfit.cfg.taxonomy();
  PanopticReport b3 = eval_scenes(*g_overfit.model, g_overfit.cfg, tax, g_overfit.clouds, 2);
  PanopticReport b1 = eval_scenes(*g_overfit.model, g_overfit.cfg, tax, g_overfit.clouds, 0);
  Model::Options nofuse;
  nofuse.theta_things_override = 1.5;  // > 1 disables fusion
  PanopticReport nf =
      eval_scenes(*g_overfit.model, g_overfit.cfg, tax, g_overfit.clouds, 2, nofuse);

  std::ostringstream os;
  os << "ablations: PQ block3 " << as_percent(b3.pq) << " vs block1 " << as_percent(b1.pq)
     << "; fusion off " << as_percent(nf.pq) << " vs on " << as_percent(b3.pq);
  report(7, b3.pq >= b1.pq && nf.pq <= b3.pq + 0.02, os.str());
}

void criterion8() {
  RunConfig cfg = overfit_config();
  cfg.epochs = 6;
  const LabelTaxonomy tax = cfg.taxonomy();
  auto tmp = fs::temp_directory_path();
  std::string data_dir = (tmp / "dqf_acc_det_data").string();
  fs::remove_all(data_dir);
  synthesize_dataset(cfg.recipe(), tax, 4, data_dir);
  std::string manifest = (fs::path(data_dir) / "manifest.json").string();

  auto last_line = [](const std::string& path) {
    std::ifstream f(path);
    std::string line, last;
    while (std::getline(f, line))
      if (!line.empty()) last = line;
    return last;
  };
  auto strip_wall = [](const std::string& line) {
    auto j = nlohmann::json::parse(line);
    j.erase("wall_time");
    return j.dump();
  };

  std::string r1 = (tmp / "dqf_acc_det_run1").string();
  std::string r2 = (tmp / "dqf_acc_det_run2").string();
  fs::remove_all(r1);
  fs::remove_all(r2);
  TrainResult a = train(cfg, manifest, r1);
  TrainResult b = train(cfg, manifest, r2);
  bool same_log = strip_wall(last_line(a.log_path)) == strip_wall(last_line(b.log_path));

  auto eval_pq = [&](const std::string& ckpath) {
    Model model(cfg);
    nn::Checkpoint ck = nn::load_checkpoint(ckpath);
    nn::restore_params(model.param_store(), ck);
    auto clouds = load_dataset(manifest, tax);
    return eval_scenes(model, cfg, tax, clouds, -1).pq;
  };
  double pa = eval_pq(a.checkpoint_path);
  double pb = eval_pq(b.checkpoint_path);

  std::ostringstream os;
  os << "determinism: final log lines " << (same_log ? "identical" : "DIFFER") << ", eval PQ "
     << pa << " vs " << pb;
  report(8, same_log && pa == pb, os.str());
}

}  // namespace

int main() {
  // DQF_ACCEPT_ONLY=1,4,6 runs a subset (skipped criteria count as failed)
  const char* only = std::getenv("DQF_ACCEPT_ONLY");
  auto wanted = [&](int n) {
    if (!only) return true;
    std::string s = std::string(",") + only + ",";
    return s.find("," + std::to_string(n) + ",") != std::string::npos;
  };
  void (*criteria[8])() = {criterion1, criterion2, criterion3, criterion4,
                           criterion5, criterion6, criterion7, criterion8};
  for (int n = 1; n <= 8; ++n) {
    if (!wanted(n)) {
      g_all_ok = false;
      continue;
    }
    try {
      criteria[n - 1]();
    } catch (const std::exception& e) {
      report(n, false, std::string("exception: ") + e.what());
    }
  }
  return g_all_ok ? 0 : 1;
}
