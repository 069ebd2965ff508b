#pragma once

#include <cstring>
#include <map>
#include <vector>

#include "dqf/cloud.hpp"
#include "dqf/query_gen.hpp"

namespace dqf {

struct PanopticLabeling {
  std::vector<std::uint16_t> semantic;  // global class ids
  std::vector<std::uint32_t> instance;  // 0 for stuff, dense from 1 for things
  std::vector<int> winner_query;        // -1 where the semantic fallback won
  std::vector<double> winner_score;
  std::size_t size() const { return semantic.size(); }
};

struct FusedMasks {
  Matrix soft;                   // kept rows, original relative order
  std::vector<QueryInfo> infos;  // parallel to soft rows
};

namespace detail {

// one greedy merge pass; returns false when nothing was absorbed
inline bool fuse_masks_pass(const Matrix& soft, const std::vector<QueryInfo>& infos,
                            double iou_thresh, FusedMasks& out) {
  const int n = static_cast<int>(soft.rows());
  const int n_p = static_cast<int>(soft.cols());

  std::vector<std::vector<char>> support(n, std::vector<char>(n_p));
  std::vector<double> score(n, 0.0);
  for (int i = 0; i < n; ++i) {
    double s = 0;
    int cnt = 0;
    for (int j = 0; j < n_p; ++j) {
      support[i][j] = soft(i, j) >= 0.5;
      if (support[i][j]) {
        s += soft(i, j);
        ++cnt;
      }
    }
    score[i] = cnt > 0 ? s / cnt : 0.0;
  }

  std::vector<int> order;  // thing rows, highest score first
  for (int i = 0; i < n; ++i)
    if (infos[i].is_thing) order.push_back(i);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (score[a] != score[b]) return score[a] > score[b];
    return a < b;
  });

  Matrix merged = soft;
  std::vector<bool> dropped(n, false);
  std::vector<int> accepted;
  for (int i : order) {
    bool absorbed = false;
    for (int a : accepted) {
      if (infos[a].cls != infos[i].cls) continue;
      long inter = 0, uni = 0;
      for (int j = 0; j < n_p; ++j) {
        bool x = support[a][j], y = support[i][j];
        inter += x && y;
        uni += x || y;
      }
      if (uni == 0 || static_cast<double>(inter) / uni < iou_thresh) continue;
      for (int j = 0; j < n_p; ++j) {
        merged(a, j) = std::max(merged(a, j), merged(i, j));
        support[a][j] = support[a][j] || support[i][j];
      }
      dropped[i] = true;
      absorbed = true;
      break;
    }
    if (!absorbed) accepted.push_back(i);
  }

  out = FusedMasks{};
  std::vector<int> keep;
  for (int i = 0; i < n; ++i)
    if (!dropped[i]) keep.push_back(i);
  out.soft.resize(keep.size(), n_p);
  for (std::size_t r = 0; r < keep.size(); ++r) {
    out.soft.row(r) = merged.row(keep[r]);
    out.infos.push_back(infos[keep[r]]);
  }
  return static_cast<int>(keep.size()) < n;
}

}  // namespace detail

// Merge duplicate thing masks of the same class by IoU of the 0.5-binarized
// supports. Merging keeps the elementwise max of the soft masks (binarizes to
// exactly the union). A merge can enlarge a row enough to newly overlap
// another, so passes repeat until nothing changes; the result is a fixed
// point and fusing it again is a no-op.
inline FusedMasks fuse_masks(const Matrix& soft, const std::vector<QueryInfo>& infos,
                             double iou_thresh) {
  if (iou_thresh <= 0 || iou_thresh > 1) throw ContractError("iou_thresh must be in (0,1]");
  if (soft.rows() != static_cast<Eigen::Index>(infos.size()))
    throw ContractError("fuse_masks: mask/info count mismatch");
  FusedMasks out;
  out.soft = soft;
  out.infos = infos;
  FusedMasks next;
  while (detail::fuse_masks_pass(out.soft, out.infos, iou_thresh, next)) out = next;
  return next;
}

// Per-point argmax over soft masks with a 0.5 floor; losers fall back to the
// auxiliary semantic head. Fallback points of a thing class share one
// instance per class so instance > 0 stays equivalent to "thing".
inline PanopticLabeling assemble(const Matrix& soft, const std::vector<QueryInfo>& infos,
                                 const Matrix& sem_logits, const LabelTaxonomy& tax) {
  const int n_q = static_cast<int>(soft.rows());
  const std::size_t n_p = static_cast<std::size_t>(sem_logits.rows());
  if (n_q > 0 && static_cast<std::size_t>(soft.cols()) != n_p)
    throw ContractError("assemble: mask width != point count");
  if (n_q != static_cast<int>(infos.size()))
    throw ContractError("assemble: mask/info count mismatch");

  PanopticLabeling out;
  out.semantic.resize(n_p);
  out.instance.resize(n_p);
  out.winner_query.assign(n_p, -1);
  out.winner_score.assign(n_p, 0.0);

  std::vector<std::uint32_t> query_instance(n_q, 0);  // assigned lazily, dense from 1
  std::map<int, std::uint32_t> fallback_instance;     // thing class -> id
  std::uint32_t next_id = 1;

  for (std::size_t i = 0; i < n_p; ++i) {
    int best = -1;
    double best_v = -1;
    for (int q = 0; q < n_q; ++q)
      if (soft(q, i) > best_v) {  // strict: ties go to the lowest query index
        best_v = soft(q, i);
        best = q;
      }
    if (best >= 0 && best_v >= 0.5) {
      const QueryInfo& info = infos[best];
      out.winner_query[i] = best;
      out.winner_score[i] = best_v;
      if (info.is_thing) {
        if (query_instance[best] == 0) query_instance[best] = next_id++;
        out.semantic[i] = static_cast<std::uint16_t>(info.cls);
        out.instance[i] = query_instance[best];
      } else {
        out.semantic[i] = static_cast<std::uint16_t>(tax.n_things() + info.cls);
        out.instance[i] = 0;
      }
    } else {
      int cls = 0;
      sem_logits.row(i).maxCoeff(&cls);
      out.semantic[i] = static_cast<std::uint16_t>(cls);
      if (tax.is_thing(cls)) {
        auto it = fallback_instance.find(cls);
        if (it == fallback_instance.end())
          it = fallback_instance.emplace(cls, next_id++).first;
        out.instance[i] = it->second;
      } else {
        out.instance[i] = 0;
      }
    }
  }
  return out;
}

// DQPR v1: the DQPC layout followed by N_p u32 predicted instance ids and
// N_p u16 predicted semantic ids.
inline void write_panoptic(const LabeledPointCloud& cloud, const PanopticLabeling& pred,
                           const std::string& path) {
  if (pred.size() != cloud.size())
    throw ContractError("write_panoptic: prediction/cloud length mismatch");
  cloud.validate();
  detail::BinWriter w(path);
  w.bytes("DQPR", 4);
  w.pod<std::uint32_t>(1u);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(cloud.size()));
  w.pod<std::uint16_t>(cloud.n_things);
  w.pod<std::uint16_t>(cloud.n_stuff);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    w.pod<float>(cloud.positions[i][0]);
    w.pod<float>(cloud.positions[i][1]);
    w.pod<float>(cloud.positions[i][2]);
    w.pod<float>(cloud.intensity[i]);
    w.pod<std::uint16_t>(cloud.semantic[i]);
    w.pod<std::uint32_t>(cloud.instance[i]);
  }
  for (std::size_t i = 0; i < cloud.size(); ++i) w.pod<std::uint32_t>(pred.instance[i]);
  for (std::size_t i = 0; i < cloud.size(); ++i) w.pod<std::uint16_t>(pred.semantic[i]);
  w.close();
}

struct PanopticFile {
  LabeledPointCloud cloud;
  PanopticLabeling pred;
};

inline PanopticFile read_panoptic(const std::string& path) {
  detail::BinReader r(path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, "DQPR", 4) != 0)
    throw FormatError("bad magic in " + path + " at byte offset 0");
  const auto version = r.pod<std::uint32_t>();
  if (version != 1u)
    throw FormatError("unsupported DQPR version " + std::to_string(version) + " in " + path);
  const auto n = r.pod<std::uint32_t>();
  PanopticFile out;
  out.cloud.n_things = r.pod<std::uint16_t>();
  out.cloud.n_stuff = r.pod<std::uint16_t>();
  out.cloud.positions.resize(n);
  out.cloud.intensity.resize(n);
  out.cloud.semantic.resize(n);
  out.cloud.instance.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    out.cloud.positions[i][0] = r.pod<float>();
    out.cloud.positions[i][1] = r.pod<float>();
    out.cloud.positions[i][2] = r.pod<float>();
    out.cloud.intensity[i] = r.pod<float>();
    out.cloud.semantic[i] = r.pod<std::uint16_t>();
    out.cloud.instance[i] = r.pod<std::uint32_t>();
  }
  out.pred.instance.resize(n);
  out.pred.semantic.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) out.pred.instance[i] = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) out.pred.semantic[i] = r.pod<std::uint16_t>();
  out.cloud.validate();
  return out;
}

}  // namespace dqf
