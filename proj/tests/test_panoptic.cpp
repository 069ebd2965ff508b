#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <map>
#include <set>

#include "dqf/metrics.hpp"
#include "test_util.hpp"

using namespace dqf;
namespace fs = std::filesystem;

namespace {

LabelTaxonomy tiny_tax() { return LabelTaxonomy{{"car", "person"}, {"ground", "wall"}}; }

QueryInfo info(int cls, bool thing) {
  QueryInfo i;
  i.cls = cls;
  i.is_thing = thing;
  return i;
}

LabeledPointCloud label_cloud(const std::vector<std::uint16_t>& sem,
                              const std::vector<std::uint32_t>& inst, int n_th, int n_st) {
  LabeledPointCloud c;
  c.n_things = static_cast<std::uint16_t>(n_th);
  c.n_stuff = static_cast<std::uint16_t>(n_st);
  c.semantic = sem;
  c.instance = inst;
  c.positions.assign(sem.size(), {0.f, 0.f, 0.f});
  c.intensity.assign(sem.size(), 0.f);
  return c;
}

// independent PQ oracle: explicit segment sets, all-pairs IoU, per-class
// PQ = SQ * RQ, averaged over present classes
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

}  // namespace

TEST_CASE("fuse_masks: merging, class guard, idempotence") {
  std::vector<QueryInfo> infos{info(0, true), info(0, true), info(1, true), info(0, false)};
  Matrix soft(4, 6);
  soft.row(0) << 0.9, 0.8, 0.6, 0.1, 0.0, 0.0;   // thing 0
  soft.row(1) << 0.7, 0.9, 0.55, 0.2, 0.1, 0.0;  // same support -> merges into row 0
  soft.row(2) << 0.9, 0.9, 0.9, 0.0, 0.0, 0.0;   // same support, other class: kept
  soft.row(3) << 0.0, 0.0, 0.0, 0.9, 0.9, 0.9;   // stuff: never touched

  FusedMasks f = fuse_masks(soft, infos, 0.5);
  REQUIRE(f.infos.size() == 3);
  CHECK(f.infos[0].cls == 0);
  CHECK(f.infos[1].cls == 1);
  CHECK(!f.infos[2].is_thing);
  // merged row keeps the elementwise max
  CHECK(f.soft(0, 0) == 0.9);
  CHECK(f.soft(0, 1) == 0.9);
  CHECK(f.soft(0, 2) == 0.6);

  // disjoint same-class masks stay separate, original order preserved
  Matrix dis(2, 6);
  dis.row(0) << 0.9, 0.9, 0.0, 0.0, 0.0, 0.0;
  dis.row(1) << 0.0, 0.0, 0.0, 0.9, 0.9, 0.0;
  std::vector<QueryInfo> two{info(0, true), info(0, true)};
  FusedMasks d = fuse_masks(dis, two, 0.5);
  CHECK(d.soft == dis);

  // iou_thresh = 1 merges identical supports only
  Matrix near(2, 6);
  near.row(0) << 0.9, 0.9, 0.9, 0.0, 0.0, 0.0;
  near.row(1) << 0.9, 0.9, 0.0, 0.0, 0.0, 0.0;  // subset, IoU 2/3
  CHECK(fuse_masks(near, two, 1.0).infos.size() == 2);
  near.row(1) << 0.8, 0.8, 0.7, 0.0, 0.0, 0.0;  // same support
  CHECK(fuse_masks(near, two, 1.0).infos.size() == 1);

  CHECK_THROWS_AS(fuse_masks(soft, infos, 0.0), ContractError);
  CHECK_THROWS_AS(fuse_masks(soft, infos, 1.5), ContractError);
}

TEST_CASE("fuse_masks: property - a second pass is a no-op") {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    int n_q = 1 + static_cast<int>(rng.next_u64() % 8);
    int n_p = 5 + static_cast<int>(rng.next_u64() % 40);
    Matrix soft(n_q, n_p);
    std::vector<QueryInfo> infos;
    for (int q = 0; q < n_q; ++q) {
      infos.push_back(info(static_cast<int>(rng.next_u64() % 3), rng.uniform() < 0.8));
      for (int p = 0; p < n_p; ++p) soft(q, p) = rng.uniform();
    }
    FusedMasks once = fuse_masks(soft, infos, 0.5);
    FusedMasks twice = fuse_masks(once.soft, once.infos, 0.5);
    CHECK(twice.soft == once.soft);
    CHECK(twice.infos.size() == once.infos.size());
  }
}

TEST_CASE("assemble: argmax with floor, ties, fallback instances") {
  auto tax = tiny_tax();
  std::vector<QueryInfo> infos{info(0, true), info(0, false)};  // "car", "ground"
  Matrix soft(2, 5);
  soft.row(0) << 0.9, 0.6, 0.1, 0.4, 0.6;
  soft.row(1) << 0.2, 0.6, 0.8, 0.3, 0.6;  // point 1 and 4 tie -> query 0 wins
  Matrix sem = Matrix::Zero(5, 4);
  sem(3, 1) = 5.0;  // fallback point 3 -> thing class 1 ("person")

  PanopticLabeling out = assemble(soft, infos, sem, tax);
  CHECK(out.semantic == std::vector<std::uint16_t>{0, 0, 2, 1, 0});
  CHECK(out.instance[0] == out.instance[1]);
  CHECK(out.instance[0] == out.instance[4]);
  CHECK(out.instance[0] > 0);
  CHECK(out.instance[2] == 0);          // stuff
  CHECK(out.instance[3] > 0);           // thing fallback gets a fresh id
  CHECK(out.instance[3] != out.instance[0]);
  CHECK(out.winner_query[3] == -1);
  CHECK(out.winner_query[0] == 0);
  CHECK(out.winner_score[0] == 0.9);

  // two fallback points of the same thing class share one instance
  Matrix none = Matrix::Zero(0, 0);
  Matrix sem2 = Matrix::Zero(3, 4);
  sem2(0, 1) = sem2(2, 1) = 3.0;
  sem2(1, 2) = 3.0;
  PanopticLabeling fb = assemble(none, {}, sem2, tax);
  CHECK(fb.instance[0] == fb.instance[2]);
  CHECK(fb.instance[0] > 0);
  CHECK(fb.instance[1] == 0);  // stuff fallback
}

TEST_CASE("assemble: property - instance > 0 iff thing class, ids dense") {
  auto tax = tiny_tax();
  Rng rng(77);
  for (int trial = 0; trial < 50; ++trial) {
    int n_q = static_cast<int>(rng.next_u64() % 6);
    int n_p = 10 + static_cast<int>(rng.next_u64() % 60);
    Matrix soft(n_q, n_p);
    std::vector<QueryInfo> infos;
    for (int q = 0; q < n_q; ++q) {
      bool thing = rng.uniform() < 0.6;
      infos.push_back(info(static_cast<int>(rng.next_u64() % 2), thing));
      for (int p = 0; p < n_p; ++p) soft(q, p) = rng.uniform();
    }
    Matrix sem(n_p, 4);
    for (int p = 0; p < n_p; ++p)
      for (int c = 0; c < 4; ++c) sem(p, c) = rng.uniform(-1, 1);

    PanopticLabeling out = assemble(soft, infos, sem, tax);
    std::set<std::uint32_t> ids;
    for (int p = 0; p < n_p; ++p) {
      CHECK((out.instance[p] > 0) == tax.is_thing(out.semantic[p]));
      if (out.instance[p] > 0) ids.insert(out.instance[p]);
      // same winning query implies same instance id
      for (int q2 = 0; q2 < p; ++q2)
        if (out.winner_query[p] >= 0 && out.winner_query[p] == out.winner_query[q2])
          CHECK(out.instance[p] == out.instance[q2]);
    }
    if (!ids.empty()) CHECK(*ids.rbegin() == ids.size());  // dense from 1
  }
}

TEST_CASE("panoptic file round trip") {
  auto tax = tiny_tax();
  LabeledPointCloud cloud = label_cloud({0, 0, 2, 3}, {1, 1, 0, 0}, 2, 2);
  cloud.positions = {{0.f, 0.f, 0.f}, {1.f, 0.f, 0.f}, {0.f, 1.f, 0.f}, {2.f, 2.f, 1.f}};
  cloud.intensity = {0.1f, 0.2f, 0.3f, 0.4f};
  PanopticLabeling pred;
  pred.semantic = {0, 0, 2, 2};
  pred.instance = {1, 1, 0, 0};
  pred.winner_query = {0, 0, 1, -1};
  pred.winner_score = {0.9, 0.8, 0.7, 0.0};

  std::string path = (fs::temp_directory_path() / "dqf_test_pred.dqpr").string();
  write_panoptic(cloud, pred, path);
  PanopticFile f = read_panoptic(path);
  CHECK(f.cloud.semantic == cloud.semantic);
  CHECK(f.cloud.instance == cloud.instance);
  CHECK(f.pred.semantic == pred.semantic);
  CHECK(f.pred.instance == pred.instance);

  {
    std::ofstream bad(path, std::ios::binary);
    bad << "DQPC" << std::string(12, '\0');
  }
  CHECK_THROWS_AS(read_panoptic(path), FormatError);
}

TEST_CASE("metrics: hand values") {
  auto tax = tiny_tax();

  // perfect prediction
  LabeledPointCloud gt = label_cloud({0, 0, 0, 2, 2, 1}, {1, 1, 1, 0, 0, 2}, 2, 2);
  PanopticLabeling perfect;
  perfect.semantic = gt.semantic;
  perfect.instance = {7, 7, 7, 0, 0, 9};  // different ids, same partition
  PanopticReport rep = evaluate(perfect, gt, tax);
  CHECK(rep.pq == doctest::Approx(1.0));
  CHECK(rep.sq == doctest::Approx(1.0));
  CHECK(rep.rq == doctest::Approx(1.0));
  CHECK(rep.pq_th == doctest::Approx(1.0));
  CHECK(rep.pq_st == doctest::Approx(1.0));

  // one instance of 10 points, prediction covers 6 -> IoU 0.6 -> PQ 0.6
  std::vector<std::uint16_t> sem10(10, 0);
  std::vector<std::uint32_t> inst10(10, 1);
  LabeledPointCloud g2 = label_cloud(sem10, inst10, 2, 2);
  PanopticLabeling p2;
  p2.semantic = {0, 0, 0, 0, 0, 0, 1, 1, 1, 1};
  p2.instance = {1, 1, 1, 1, 1, 1, 2, 2, 2, 2};
  PanopticReport r2 = evaluate(p2, g2, tax);
  CHECK(r2.classes[0].pq == doctest::Approx(0.6));
  CHECK(r2.classes[0].sq == doctest::Approx(0.6));
  CHECK(r2.classes[0].rq == doctest::Approx(1.0));
  // the stray class-1 prediction is a lone FP: PQ 0, but present
  CHECK(r2.classes[1].pq == 0.0);
  CHECK(r2.classes[1].stats.fp == 1);

  // IoU 0.4 is below the gate: FP + FN, PQ 0
  PanopticLabeling p3;
  p3.semantic = std::vector<std::uint16_t>(10, 0);
  p3.instance = {1, 1, 1, 1, 2, 2, 2, 2, 2, 2};  // 4/10 and 6/10 overlap splits
  PanopticReport r3 = evaluate(p3, g2, tax);
  CHECK(r3.classes[0].stats.tp == 1);  // the 6-point piece has IoU 0.6
  CHECK(r3.classes[0].stats.fp == 1);  // the 4-point piece has IoU 0.4
  PanopticLabeling p4;
  p4.semantic = std::vector<std::uint16_t>(10, 0);
  p4.instance = {1, 1, 1, 1, 1, 2, 2, 2, 2, 2};  // both halves IoU 0.5, not > 0.5
  PanopticReport r4 = evaluate(p4, g2, tax);
  CHECK(r4.classes[0].stats.tp == 0);
  CHECK(r4.classes[0].pq == 0.0);

  // absent classes are excluded from the average
  CHECK(r4.pq == doctest::Approx(r4.classes[0].pq));
}

TEST_CASE("metrics: pooling adds counts before the ratio") {
  auto tax = tiny_tax();
  std::vector<ClassStats> a(4), b(4);
  a[0].tp = 1;
  a[0].iou_sum = 1.0;
  b[0].fn = 1;
  PanopticReport rep = evaluate_pooled({a, b}, tax);
  CHECK(rep.classes[0].rq == doctest::Approx(2.0 / 3));
  CHECK(rep.classes[0].sq == doctest::Approx(1.0));
  CHECK(rep.classes[0].pq == doctest::Approx(2.0 / 3));
}

TEST_CASE("metrics: properties on random labelings and oracle agreement") {
  auto tax = tiny_tax();
  Rng rng(123);
  for (int trial = 0; trial < 200; ++trial) {
    int n_p = 5 + static_cast<int>(rng.next_u64() % 196);
    std::vector<std::uint16_t> gsem(n_p), psem(n_p);
    std::vector<std::uint32_t> ginst(n_p), pinst(n_p);
    for (int i = 0; i < n_p; ++i) {
      int gc = static_cast<int>(rng.next_u64() % 4);
      gsem[i] = static_cast<std::uint16_t>(gc);
      ginst[i] = tax.is_thing(gc) ? 1 + gc * 5 + static_cast<std::uint32_t>(rng.next_u64() % 5)
                                  : 0;
      int pc = static_cast<int>(rng.next_u64() % 4);
      psem[i] = static_cast<std::uint16_t>(pc);
      pinst[i] = tax.is_thing(pc) ? 1 + pc * 5 + static_cast<std::uint32_t>(rng.next_u64() % 5)
                                  : 0;
    }
    LabeledPointCloud gt = label_cloud(gsem, ginst, 2, 2);
    PanopticLabeling pred;
    pred.semantic = psem;
    pred.instance = pinst;

    PanopticReport rep = evaluate(pred, gt, tax);
    CHECK(rep.pq == oracle_pq(pred, gt, tax));

    for (const auto& c : rep.classes) {
      CHECK(c.pq == doctest::Approx(c.sq * c.rq).epsilon(1e-12));
      CHECK(c.pq >= 0.0);
      CHECK(c.pq <= 1.0);
    }
    CHECK(rep.pq_dagger >= rep.pq - 1e-12);  // stuff SQ >= stuff PQ

    // permuting predicted instance ids changes nothing
    PanopticLabeling shuf = pred;
    for (auto& id : shuf.instance)
      if (id > 0) id += 1000;
    PanopticReport rep2 = evaluate(shuf, gt, tax);
    CHECK(rep2.pq == rep.pq);
    CHECK(rep2.rq == rep.rq);
  }
}
