#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dqf/cloud.hpp"
#include "dqf/core.hpp"

namespace dqf {

// Thing archetypes: axis-aligned box (car-like), vertical cylinder (person-like),
// thin pole. Classes cycle through these so each class keeps one geometry.
enum class ThingShape { Box, Cylinder, Pole };

struct SceneRecipe {
  std::uint64_t seed = 0;
  double range_xy = 12.8;         // half-extent, meters
  int n_things_min = 2;           // per thing class
  int n_things_max = 4;
  int points_per_thing_min = 150;
  int points_per_thing_max = 300;
  double stuff_density = 8.0;     // ground points per m^2
  double dropout = 0.1;           // sensor dropout fraction
  double noise_sigma = 0.02;      // meters

  void validate() const {
    if (range_xy <= 0) throw ValidationError("recipe: range_xy must be > 0");
    if (stuff_density <= 0) throw ValidationError("recipe: stuff_density must be > 0");
    if (dropout < 0 || dropout >= 1) throw ValidationError("recipe: dropout must be in [0,1)");
    if (n_things_min < 0 || n_things_max < n_things_min)
      throw ValidationError("recipe: bad n_things range");
    if (points_per_thing_min < 10 || points_per_thing_max < points_per_thing_min)
      throw ValidationError("recipe: bad points_per_thing range");
    if (noise_sigma < 0) throw ValidationError("recipe: noise_sigma must be >= 0");
  }
};

namespace detail {

struct Footprint {  // BEV AABB
  double xmin, xmax, ymin, ymax;
  bool overlaps(const Footprint& o) const {
    return xmin < o.xmax && o.xmin < xmax && ymin < o.ymax && o.ymin < ymax;
  }
};

struct ThingDims {
  ThingShape shape;
  double lx, ly, lz;  // box extents, or (2r, 2r, h) for cylinder/pole
};

inline ThingDims thing_dims(int class_idx, Rng& rng) {
  switch (static_cast<ThingShape>(class_idx % 3)) {
    case ThingShape::Box:
      return {ThingShape::Box, rng.uniform(3.5, 4.5), rng.uniform(1.6, 2.0), rng.uniform(1.4, 1.8)};
    case ThingShape::Cylinder: {
      double r = rng.uniform(0.25, 0.4);
      return {ThingShape::Cylinder, 2 * r, 2 * r, rng.uniform(1.5, 1.9)};
    }
    default: {
      double r = rng.uniform(0.06, 0.12);
      return {ThingShape::Pole, 2 * r, 2 * r, rng.uniform(2.5, 3.5)};
    }
  }
}

// uniform sample on the visible surface of the shape, local frame centered at (0,0), z from 0
inline std::array<double, 3> sample_surface(const ThingDims& d, Rng& rng) {
  if (d.shape == ThingShape::Box) {
    // faces weighted by area: 4 sides + top
    double a_side_x = d.ly * d.lz, a_side_y = d.lx * d.lz, a_top = d.lx * d.ly;
    double total = 2 * a_side_x + 2 * a_side_y + a_top;
    double u = rng.uniform() * total;
    double hx = d.lx / 2, hy = d.ly / 2;
    if (u < 2 * a_side_x) {
      double sx = (u < a_side_x) ? -hx : hx;
      return {sx, rng.uniform(-hy, hy), rng.uniform(0.0, d.lz)};
    }
    u -= 2 * a_side_x;
    if (u < 2 * a_side_y) {
      double sy = (u < a_side_y) ? -hy : hy;
      return {rng.uniform(-hx, hx), sy, rng.uniform(0.0, d.lz)};
    }
    return {rng.uniform(-hx, hx), rng.uniform(-hy, hy), d.lz};
  }
  // cylinder / pole: lateral surface + cap
  double r = d.lx / 2;
  double a_side = 2 * 3.14159265358979 * r * d.lz, a_top = 3.14159265358979 * r * r;
  if (rng.uniform() * (a_side + a_top) < a_side) {
    double ang = rng.uniform(0.0, 2 * 3.14159265358979);
    return {r * std::cos(ang), r * std::sin(ang), rng.uniform(0.0, d.lz)};
  }
  double ang = rng.uniform(0.0, 2 * 3.14159265358979);
  double rr = r * std::sqrt(rng.uniform());
  return {rr * std::cos(ang), rr * std::sin(ang), d.lz};
}

}  // namespace detail

inline LabeledPointCloud synthesize_scene(const SceneRecipe& recipe,
                                          const LabelTaxonomy& taxonomy) {
  recipe.validate();
  taxonomy.validate();
  LabeledPointCloud cloud;
  cloud.n_things = static_cast<std::uint16_t>(taxonomy.n_things());
  cloud.n_stuff = static_cast<std::uint16_t>(taxonomy.n_stuff());
  const double R = recipe.range_xy;
  Rng root(recipe.seed);

  auto push = [&](double x, double y, double z, double inten, int cls, std::uint32_t inst) {
    cloud.positions.push_back({static_cast<float>(x), static_cast<float>(y), static_cast<float>(z)});
    cloud.intensity.push_back(static_cast<float>(std::clamp(inten, 0.0, 1.0)));
    cloud.semantic.push_back(static_cast<std::uint16_t>(cls));
    cloud.instance.push_back(inst);
  };

  // Thing placement first so footprints are known before stuff fill.
  Rng trng = root.stream("things");
  std::vector<detail::Footprint> footprints;
  std::uint32_t next_inst = 1;
  struct Placed {
    detail::ThingDims dims;
    double cx, cy, yaw;
    int cls;
    std::uint32_t inst;
    int n_points;
  };
  std::vector<Placed> placed;
  for (int cls = 0; cls < taxonomy.n_things(); ++cls) {
    int n = recipe.n_things_min +
            static_cast<int>(trng.below(recipe.n_things_max - recipe.n_things_min + 1));
    for (int i = 0; i < n; ++i) {
      detail::ThingDims dims = detail::thing_dims(cls, trng);
      const double margin = 0.5 * std::hypot(dims.lx, dims.ly) + 0.3;
      bool ok = false;
      for (int attempt = 0; attempt < 200 && !ok; ++attempt) {
        double cx = trng.uniform(-R + margin, R - margin);
        double cy = trng.uniform(-R + margin, R - margin);
        detail::Footprint fp{cx - margin, cx + margin, cy - margin, cy + margin};
        bool clash = false;
        for (const auto& other : footprints) clash = clash || fp.overlaps(other);
        if (clash) continue;
        footprints.push_back(fp);
        double yaw = trng.uniform(0.0, 2 * 3.14159265358979);
        int npts = recipe.points_per_thing_min +
                   static_cast<int>(trng.below(recipe.points_per_thing_max -
                                               recipe.points_per_thing_min + 1));
        placed.push_back({dims, cx, cy, yaw, cls, next_inst++, npts});
        ok = true;
      }
      if (!ok)
        throw ValidationError("scene too crowded: cannot place instance of thing class '" +
                              taxonomy.thing_classes[cls] + "'");
    }
  }

  for (const auto& p : placed) {
    Rng prng = root.stream("thing_points").stream(p.inst);
    const double c = std::cos(p.yaw), s = std::sin(p.yaw);
    std::size_t before = cloud.size();
    // top up until at least 10 points survive dropout
    while (cloud.size() - before < 10) {
      int want = std::max(p.n_points, 10);
      for (int i = 0; i < want && cloud.size() - before < static_cast<std::size_t>(want); ++i) {
        if (prng.bernoulli(recipe.dropout)) continue;
        auto q = detail::sample_surface(p.dims, prng);
        double x = p.cx + c * q[0] - s * q[1] + prng.normal() * recipe.noise_sigma;
        double y = p.cy + s * q[0] + c * q[1] + prng.normal() * recipe.noise_sigma;
        double z = q[2] + prng.normal() * recipe.noise_sigma;
        push(x, y, z, 0.55 + 0.1 * p.cls + prng.normal() * 0.03, p.cls, p.inst);
      }
    }
  }

  const int stuff_base = taxonomy.n_things();
  // ground plane, stuff class 0
  {
    Rng grng = root.stream("ground");
    double area = (2 * R) * (2 * R);
    auto n = static_cast<std::size_t>(area * recipe.stuff_density);
    for (std::size_t i = 0; i < n; ++i) {
      double x = grng.uniform(-R, R), y = grng.uniform(-R, R);
      if (grng.bernoulli(recipe.dropout)) continue;
      push(x, y, grng.normal() * recipe.noise_sigma, 0.2 + grng.normal() * 0.03, stuff_base, 0);
    }
  }
  // wall segments along the perimeter, stuff class 1 when present
  if (taxonomy.n_stuff() >= 2) {
    Rng wrng = root.stream("walls");
    int n_walls = 2 + static_cast<int>(wrng.below(3));
    for (int w = 0; w < n_walls; ++w) {
      int side = static_cast<int>(wrng.below(4));
      double len = wrng.uniform(4.0, 10.0);
      double start = wrng.uniform(-R, R - len);
      double height = wrng.uniform(1.8, 2.6);
      auto n = static_cast<std::size_t>(len * height * recipe.stuff_density);
      for (std::size_t i = 0; i < n; ++i) {
        if (wrng.bernoulli(recipe.dropout)) continue;
        double along = start + wrng.uniform(0.0, len);
        double z = wrng.uniform(0.0, height);
        double off = 0.4 + wrng.normal() * recipe.noise_sigma;
        double x, y;
        switch (side) {
          case 0: x = along; y = -R + off; break;
          case 1: x = along; y = R - off; break;
          case 2: x = -R + off; y = along; break;
          default: x = R - off; y = along; break;
        }
        x += wrng.normal() * recipe.noise_sigma;
        push(x, y, z, 0.35 + wrng.normal() * 0.03, stuff_base + 1, 0);
      }
    }
  }
  // vegetation blobs, stuff class 2 when present
  if (taxonomy.n_stuff() >= 3) {
    Rng vrng = root.stream("vegetation");
    int n_blobs = 3 + static_cast<int>(vrng.below(3));
    for (int b = 0; b < n_blobs; ++b) {
      double cx = vrng.uniform(-R + 2, R - 2), cy = vrng.uniform(-R + 2, R - 2);
      double rad = vrng.uniform(0.8, 2.0);
      // keep vegetation clear of thing footprints
      bool clash = false;
      for (const auto& fp : footprints)
        clash = clash || (cx + rad > fp.xmin && fp.xmin - rad < cx && cx - rad < fp.xmax &&
                          cy + rad > fp.ymin && cy - rad < fp.ymax);
      if (clash) continue;
      auto n = static_cast<std::size_t>(3.14159 * rad * rad * recipe.stuff_density * 2.0);
      for (std::size_t i = 0; i < n; ++i) {
        if (vrng.bernoulli(recipe.dropout)) continue;
        double ang = vrng.uniform(0.0, 2 * 3.14159265358979);
        double rr = rad * std::sqrt(vrng.uniform());
        double z = vrng.uniform(0.1, 1.2) + vrng.normal() * 0.05;
        push(cx + rr * std::cos(ang), cy + rr * std::sin(ang), z,
             0.45 + vrng.normal() * 0.05, stuff_base + 2, 0);
      }
    }
  }

  cloud.validate();
  return cloud;
}

struct ManifestEntry {
  std::string path;
  std::uint64_t seed;
  std::size_t n_points;
  std::size_t n_instances;
};

inline nlohmann::json manifest_to_json(const std::vector<ManifestEntry>& entries) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& e : entries)
    j.push_back({{"path", e.path}, {"seed", e.seed}, {"n_points", e.n_points},
                 {"n_instances", e.n_instances}});
  return j;
}

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open manifest: " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad manifest " + path + ": " + e.what());
  }
  std::vector<ManifestEntry> entries;
  for (const auto& item : j)
    entries.push_back({item.at("path").get<std::string>(), item.at("seed").get<std::uint64_t>(),
                       item.at("n_points").get<std::size_t>(),
                       item.at("n_instances").get<std::size_t>()});
  return entries;
}

// Writes count DQPC files plus manifest.json; scene i uses seed + i.
inline std::vector<ManifestEntry> synthesize_dataset(const SceneRecipe& recipe,
                                                     const LabelTaxonomy& taxonomy, int count,
                                                     const std::string& dir) {
  if (count < 1) throw ValidationError("dataset count must be >= 1");
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
  std::vector<ManifestEntry> entries(count);
  std::vector<std::string> scene_err(count);
  parallel_for(count, [&](std::size_t i) {
    SceneRecipe r = recipe;
    r.seed = recipe.seed + i;
    LabeledPointCloud cloud;
    try {
      cloud = synthesize_scene(r, taxonomy);
    } catch (const std::exception& e) {
      throw ValidationError("scene " + std::to_string(i) + ": " + e.what());
    }
    char name[32];
    std::snprintf(name, sizeof(name), "scene_%04zu.dqpc", i);
    std::string path = (fs::path(dir) / name).string();
    write_cloud(cloud, path);
    std::uint32_t max_inst = 0;
    for (auto id : cloud.instance) max_inst = std::max(max_inst, id);
    entries[i] = {path, r.seed, cloud.size(), max_inst};
  });
  std::ofstream mf((fs::path(dir) / "manifest.json").string());
  if (!mf) throw IoError("cannot write manifest in " + dir);
  mf << manifest_to_json(entries).dump(2) << "\n";
  return entries;
}

}  // namespace dqf
