#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dqf/cloud.hpp"
#include "dqf/core.hpp"
#include "dqf/grid.hpp"
#include "dqf/scene_synth.hpp"

namespace dqf {

// Flat key-value config (TOML-compatible subset: `key = value`, # comments,
// quoted strings). Every tunable lives here; unknown keys are rejected.
struct RunConfig {
  std::uint64_t seed = 7;

  std::string thing_classes = "car,person,pole";
  std::string stuff_classes = "ground,wall,vegetation";

  // grid
  double range_xy = 12.8;
  double z_min = -1.0;
  double z_max = 3.8;
  double voxel_xy = 0.1;
  double voxel_z = 0.1;

  // encoder
  int base_channels = 32;
  int embed_dim = 64;  // C_e
  bool with_range_norm = true;
  int knn_k = 3;

  // query generator
  int n_queries = 150;  // N_q
  double theta_things = 0.85;
  double theta_stuff = 0.5;
  double fusion_window_m = 1.0;
  bool local_max_suppression = true;

  // decoder
  int decoder_blocks = 3;  // N_l
  int attention_heads = 1;
  int ffn_hidden_mult = 4;

  // training
  int epochs = 200;
  double learning_rate = 1e-4;
  double weight_decay = 0.01;
  int s_th = 100;
  int s_all = 2000;
  double r_match = 1.0;
  bool aug_rotate = false;
  bool aug_scale = false;
  bool aug_flip = false;

  // inference
  double iou_thresh = 0.5;

  // synth recipe
  int n_things_min = 2;
  int n_things_max = 4;
  int points_per_thing_min = 150;
  int points_per_thing_max = 300;
  double stuff_density = 8.0;
  double dropout = 0.1;
  double noise_sigma = 0.02;

  LabelTaxonomy taxonomy() const {
    auto split = [](const std::string& s) {
      std::vector<std::string> out;
      std::stringstream ss(s);
      std::string item;
      while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
      return out;
    };
    LabelTaxonomy tax{split(thing_classes), split(stuff_classes)};
    tax.validate();
    return tax;
  }

  VoxelGridSpec grid_spec() const {
    VoxelGridSpec spec;
    spec.origin = {-range_xy, -range_xy, z_min};
    spec.voxel_size = {voxel_xy, voxel_xy, voxel_z};
    auto dim = [](double extent, double cell, const char* what) {
      double d = extent / cell;
      int di = static_cast<int>(std::lround(d));
      if (di < 8 || std::abs(d - di) > 1e-9 * std::max(1.0, d) || di % 8 != 0)
        throw ValidationError(std::string("grid ") + what +
                              " must be a multiple of 8 cells, got " + std::to_string(d));
      return di;
    };
    spec.dense_dims = {dim(2 * range_xy, voxel_xy, "x extent"),
                       dim(2 * range_xy, voxel_xy, "y extent"),
                       dim(z_max - z_min, voxel_z, "z extent")};
    spec.level_factors = {8, 4, 2, 1};
    spec.validate();
    return spec;
  }

  SceneRecipe recipe() const {
    SceneRecipe r;
    r.seed = seed;
    r.range_xy = range_xy;
    r.n_things_min = n_things_min;
    r.n_things_max = n_things_max;
    r.points_per_thing_min = points_per_thing_min;
    r.points_per_thing_max = points_per_thing_max;
    r.stuff_density = stuff_density;
    r.dropout = dropout;
    r.noise_sigma = noise_sigma;
    r.validate();
    return r;
  }

  void validate() const {
    taxonomy();
    grid_spec();
    recipe();
    if (embed_dim < 8) throw ValidationError("embed_dim must be >= 8");
    if (n_queries < 1) throw ValidationError("n_queries must be >= 1");
    if (theta_things <= 0) throw ValidationError("theta_things must be positive");
    if (theta_stuff <= 0 || theta_stuff >= 1)
      throw ValidationError("theta_stuff must be in (0,1)");
    if (fusion_window_m <= 0) throw ValidationError("fusion_window_m must be positive");
    if (decoder_blocks < 1 || decoder_blocks > 3)
      throw ValidationError("decoder_blocks must be in [1,3]");
    if (attention_heads < 1 || embed_dim % attention_heads != 0)
      throw ValidationError("attention_heads must divide embed_dim");
    if (epochs < 1) throw ValidationError("epochs must be >= 1");
    if (s_th > s_all) throw ValidationError("s_th must be <= s_all");
    if (s_th < 1 || s_all < 1) throw ValidationError("sampling rates must be positive");
    if (iou_thresh <= 0 || iou_thresh > 1) throw ValidationError("iou_thresh must be in (0,1]");
    if (r_match <= 0) throw ValidationError("r_match must be positive");
    if (knn_k < 1) throw ValidationError("knn_k must be >= 1");
  }
};

namespace detail {

template <typename F>
void config_fields(RunConfig& c, F&& f) {
  f("seed", c.seed);
  f("thing_classes", c.thing_classes);
  f("stuff_classes", c.stuff_classes);
  f("range_xy", c.range_xy);
  f("z_min", c.z_min);
  f("z_max", c.z_max);
  f("voxel_xy", c.voxel_xy);
  f("voxel_z", c.voxel_z);
  f("base_channels", c.base_channels);
  f("embed_dim", c.embed_dim);
  f("with_range_norm", c.with_range_norm);
  f("knn_k", c.knn_k);
  f("n_queries", c.n_queries);
  f("theta_things", c.theta_things);
  f("theta_stuff", c.theta_stuff);
  f("fusion_window_m", c.fusion_window_m);
  f("local_max_suppression", c.local_max_suppression);
  f("decoder_blocks", c.decoder_blocks);
  f("attention_heads", c.attention_heads);
  f("ffn_hidden_mult", c.ffn_hidden_mult);
  f("epochs", c.epochs);
  f("learning_rate", c.learning_rate);
  f("weight_decay", c.weight_decay);
  f("s_th", c.s_th);
  f("s_all", c.s_all);
  f("r_match", c.r_match);
  f("aug_rotate", c.aug_rotate);
  f("aug_scale", c.aug_scale);
  f("aug_flip", c.aug_flip);
  f("iou_thresh", c.iou_thresh);
  f("n_things_min", c.n_things_min);
  f("n_things_max", c.n_things_max);
  f("points_per_thing_min", c.points_per_thing_min);
  f("points_per_thing_max", c.points_per_thing_max);
  f("stuff_density", c.stuff_density);
  f("dropout", c.dropout);
  f("noise_sigma", c.noise_sigma);
}

inline void parse_into(const std::string& raw, std::string& out) {
  std::string v = raw;
  if (v.size() >= 2 && v.front() == '"' && v.back() == '"') v = v.substr(1, v.size() - 2);
  out = v;
}
inline void parse_into(const std::string& raw, bool& out) {
  if (raw == "true") out = true;
  else if (raw == "false") out = false;
  else throw ValidationError("expected true/false, got '" + raw + "'");
}
inline void parse_into(const std::string& raw, double& out) {
  std::size_t pos = 0;
  try {
    out = std::stod(raw, &pos);
  } catch (const std::exception&) {
    throw ValidationError("bad number: '" + raw + "'");
  }
  if (pos != raw.size()) throw ValidationError("bad number: '" + raw + "'");
}
inline void parse_into(const std::string& raw, int& out) {
  std::size_t pos = 0;
  try {
    out = std::stoi(raw, &pos);
  } catch (const std::exception&) {
    throw ValidationError("bad integer: '" + raw + "'");
  }
  if (pos != raw.size()) throw ValidationError("bad integer: '" + raw + "'");
}
inline void parse_into(const std::string& raw, std::uint64_t& out) {
  std::size_t pos = 0;
  try {
    out = std::stoull(raw, &pos);
  } catch (const std::exception&) {
    throw ValidationError("bad integer: '" + raw + "'");
  }
  if (pos != raw.size()) throw ValidationError("bad integer: '" + raw + "'");
}

inline std::string format_value(const std::string& v) { return "\"" + v + "\""; }
inline std::string format_value(bool v) { return v ? "true" : "false"; }
inline std::string format_value(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  std::string s = os.str();
  if (s.find('.') == std::string::npos && s.find('e') == std::string::npos &&
      s.find("inf") == std::string::npos && s.find("nan") == std::string::npos)
    s += ".0";
  return s;
}
inline std::string format_value(int v) { return std::to_string(v); }
inline std::string format_value(std::uint64_t v) { return std::to_string(v); }

}  // namespace detail

inline void config_set(RunConfig& cfg, const std::string& key, const std::string& raw) {
  bool found = false;
  detail::config_fields(cfg, [&](const char* name, auto& field) {
    if (key == name) {
      detail::parse_into(raw, field);
      found = true;
    }
  });
  if (!found) throw ValidationError("unknown config key: " + key);
}

inline std::string dump_config(const RunConfig& cfg) {
  std::ostringstream os;
  detail::config_fields(const_cast<RunConfig&>(cfg), [&](const char* name, auto& field) {
    os << name << " = " << detail::format_value(field) << "\n";
  });
  return os.str();
}

inline RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos && line.find('"') == std::string::npos)
      line = line.substr(0, hash);
    auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(" \t\r"));
      auto e = s.find_last_not_of(" \t\r");
      if (e != std::string::npos) s.erase(e + 1);
      return s;
    };
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError("config line " + std::to_string(lineno) + ": expected key = value");
    config_set(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

inline RunConfig load_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

}  // namespace dqf
