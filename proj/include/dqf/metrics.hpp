#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dqf/panoptic.hpp"

namespace dqf {

struct ClassStats {
  long tp = 0, fp = 0, fn = 0;
  double iou_sum = 0.0;
  bool present() const { return tp + fp + fn > 0; }
  ClassStats& operator+=(const ClassStats& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    iou_sum += o.iou_sum;
    return *this;
  }
};

struct ClassReport {
  std::string name;
  bool is_thing = false;
  ClassStats stats;
  double pq = 0, sq = 0, rq = 0, mean_iou = 0;
};

struct PanopticReport {
  std::vector<ClassReport> classes;  // every taxonomy class, present or not
  double pq = 0, sq = 0, rq = 0, pq_dagger = 0;
  double pq_th = 0, sq_th = 0, rq_th = 0;
  double pq_st = 0, sq_st = 0, rq_st = 0;
};

// per-class TP/FP/FN and summed IoU; a pair is TP iff IoU > 0.5, which makes
// the matching unique without any assignment search
inline std::vector<ClassStats> evaluate_counts(const PanopticLabeling& pred,
                                               const LabeledPointCloud& gt,
                                               const LabelTaxonomy& tax) {
  const std::size_t n = gt.size();
  if (pred.size() != n) throw ContractError("evaluate: prediction/gt length mismatch");

  // segment key: (class, instance) for things, (class, 0) for stuff
  using Key = std::pair<int, std::uint32_t>;
  auto segment = [&](int cls, std::uint32_t inst) -> Key {
    return tax.is_thing(cls) ? Key{cls, inst} : Key{cls, 0};
  };
  std::map<Key, long> gt_size, pred_size;
  std::map<std::pair<Key, Key>, long> inter;
  for (std::size_t i = 0; i < n; ++i) {
    Key g = segment(gt.semantic[i], gt.instance[i]);
    Key p = segment(pred.semantic[i], pred.instance[i]);
    ++gt_size[g];
    ++pred_size[p];
    ++inter[{p, g}];
  }

  std::vector<ClassStats> out(tax.n_classes());
  std::map<Key, bool> gt_matched, pred_matched;
  for (const auto& [pair, ov] : inter) {
    const auto& [p, g] = pair;
    if (p.first != g.first) continue;
    double iou = static_cast<double>(ov) / (pred_size[p] + gt_size[g] - ov);
    if (iou > 0.5) {
      ++out[p.first].tp;
      out[p.first].iou_sum += iou;
      gt_matched[g] = true;
      pred_matched[p] = true;
    }
  }
  for (const auto& [g, sz] : gt_size)
    if (!gt_matched.count(g)) ++out[g.first].fn;
  for (const auto& [p, sz] : pred_size)
    if (!pred_matched.count(p)) ++out[p.first].fp;
  return out;
}

inline PanopticReport report_from_counts(const std::vector<ClassStats>& stats,
                                         const LabelTaxonomy& tax) {
  if (static_cast<int>(stats.size()) != tax.n_classes())
    throw ContractError("report_from_counts: stats size != class count");
  PanopticReport rep;
  double sum_pq = 0, sum_sq = 0, sum_rq = 0, sum_dag = 0;
  double th_pq = 0, th_sq = 0, th_rq = 0;
  double st_pq = 0, st_sq = 0, st_rq = 0;
  int n_present = 0, n_th = 0, n_st = 0;
  for (int c = 0; c < tax.n_classes(); ++c) {
    ClassReport cr;
    cr.name = tax.name(c);
    cr.is_thing = tax.is_thing(c);
    cr.stats = stats[c];
    if (stats[c].present()) {
      cr.sq = stats[c].tp > 0 ? stats[c].iou_sum / stats[c].tp : 0.0;
      cr.rq = static_cast<double>(stats[c].tp) /
              (stats[c].tp + 0.5 * stats[c].fn + 0.5 * stats[c].fp);
      cr.pq = cr.sq * cr.rq;
      cr.mean_iou = cr.sq;
      ++n_present;
      sum_pq += cr.pq;
      sum_sq += cr.sq;
      sum_rq += cr.rq;
      sum_dag += cr.is_thing ? cr.pq : cr.sq;  // stuff contributes SQ to PQ-dagger
      if (cr.is_thing) {
        ++n_th;
        th_pq += cr.pq;
        th_sq += cr.sq;
        th_rq += cr.rq;
      } else {
        ++n_st;
        st_pq += cr.pq;
        st_sq += cr.sq;
        st_rq += cr.rq;
      }
    }
    rep.classes.push_back(cr);
  }
  if (n_present > 0) {
    rep.pq = sum_pq / n_present;
    rep.sq = sum_sq / n_present;
    rep.rq = sum_rq / n_present;
    rep.pq_dagger = sum_dag / n_present;
  }
  if (n_th > 0) {
    rep.pq_th = th_pq / n_th;
    rep.sq_th = th_sq / n_th;
    rep.rq_th = th_rq / n_th;
  }
  if (n_st > 0) {
    rep.pq_st = st_pq / n_st;
    rep.sq_st = st_sq / n_st;
    rep.rq_st = st_rq / n_st;
  }
  return rep;
}

inline PanopticReport evaluate(const PanopticLabeling& pred, const LabeledPointCloud& gt,
                               const LabelTaxonomy& tax) {
  return report_from_counts(evaluate_counts(pred, gt, tax), tax);
}

// pooled aggregation: counts and IoU sums added over scenes, ratios last
inline PanopticReport evaluate_pooled(const std::vector<std::vector<ClassStats>>& per_scene,
                                      const LabelTaxonomy& tax) {
  std::vector<ClassStats> pooled(tax.n_classes());
  for (const auto& s : per_scene) {
    if (static_cast<int>(s.size()) != tax.n_classes())
      throw ContractError("evaluate_pooled: scene stats size mismatch");
    for (int c = 0; c < tax.n_classes(); ++c) pooled[c] += s[c];
  }
  return report_from_counts(pooled, tax);
}

inline double as_percent(double frac) { return std::round(frac * 1000.0) / 10.0; }

inline nlohmann::json report_to_json(const PanopticReport& rep) {
  nlohmann::json j;
  j["pq"] = as_percent(rep.pq);
  j["sq"] = as_percent(rep.sq);
  j["rq"] = as_percent(rep.rq);
  j["pq_dagger"] = as_percent(rep.pq_dagger);
  j["pq_things"] = as_percent(rep.pq_th);
  j["sq_things"] = as_percent(rep.sq_th);
  j["rq_things"] = as_percent(rep.rq_th);
  j["pq_stuff"] = as_percent(rep.pq_st);
  j["sq_stuff"] = as_percent(rep.sq_st);
  j["rq_stuff"] = as_percent(rep.rq_st);
  j["classes"] = nlohmann::json::array();
  for (const auto& c : rep.classes) {
    nlohmann::json cj;
    cj["name"] = c.name;
    cj["is_thing"] = c.is_thing;
    cj["pq"] = as_percent(c.pq);
    cj["sq"] = as_percent(c.sq);
    cj["rq"] = as_percent(c.rq);
    cj["mean_iou"] = as_percent(c.mean_iou);
    cj["tp"] = c.stats.tp;
    cj["fp"] = c.stats.fp;
    cj["fn"] = c.stats.fn;
    j["classes"].push_back(cj);
  }
  return j;
}

}  // namespace dqf
