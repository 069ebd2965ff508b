#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "dqf/core.hpp"

namespace dqf {

// Class ids are dense: things first, then stuff.
struct LabelTaxonomy {
  std::vector<std::string> thing_classes;
  std::vector<std::string> stuff_classes;

  int n_things() const { return static_cast<int>(thing_classes.size()); }
  int n_stuff() const { return static_cast<int>(stuff_classes.size()); }
  int n_classes() const { return n_things() + n_stuff(); }
  bool is_thing(int cls) const { return cls >= 0 && cls < n_things(); }
  bool is_stuff(int cls) const { return cls >= n_things() && cls < n_classes(); }

  const std::string& name(int cls) const {
    if (cls < 0 || cls >= n_classes()) throw ContractError("class id out of range");
    return is_thing(cls) ? thing_classes[cls] : stuff_classes[cls - n_things()];
  }

  void validate() const {
    if (thing_classes.empty()) throw ValidationError("taxonomy needs at least one thing class");
    if (stuff_classes.empty()) throw ValidationError("taxonomy needs at least one stuff class");
    std::vector<std::string> all = thing_classes;
    all.insert(all.end(), stuff_classes.begin(), stuff_classes.end());
    std::sort(all.begin(), all.end());
    if (std::adjacent_find(all.begin(), all.end()) != all.end())
      throw ValidationError("taxonomy class names must be unique");
  }
};

struct LabeledPointCloud {
  // parallel arrays, all length N_p
  std::vector<std::array<float, 3>> positions;  // meters
  std::vector<float> intensity;                 // [0,1]
  std::vector<std::uint16_t> semantic;          // class id
  std::vector<std::uint32_t> instance;          // 0 = no instance
  std::uint16_t n_things = 0;
  std::uint16_t n_stuff = 0;

  std::size_t size() const { return positions.size(); }

  void validate() const {
    const std::size_t n = positions.size();
    if (n == 0) throw ValidationError("cloud must contain at least one point");
    if (intensity.size() != n || semantic.size() != n || instance.size() != n)
      throw ValidationError("cloud arrays have mismatched lengths");
    std::vector<std::uint16_t> inst_class;  // instance id -> class, for consistency check
    for (std::size_t i = 0; i < n; ++i) {
      if (semantic[i] >= n_things + n_stuff)
        throw ValidationError("point " + std::to_string(i) + ": semantic class out of range");
      const bool thing = semantic[i] < n_things;
      if (instance[i] > 0 && !thing)
        throw ValidationError("point " + std::to_string(i) + ": instance id on a stuff point");
      if (instance[i] > 0) {
        if (inst_class.size() <= instance[i]) inst_class.resize(instance[i] + 1, 0xffff);
        if (inst_class[instance[i]] == 0xffff) {
          inst_class[instance[i]] = semantic[i];
        } else if (inst_class[instance[i]] != semantic[i]) {
          throw ValidationError("point " + std::to_string(i) +
                                ": instance id spans multiple semantic classes");
        }
      }
    }
  }
};

namespace detail {

class BinWriter {
 public:
  explicit BinWriter(const std::string& path) : path_(path), f_(std::fopen(path.c_str(), "wb")) {
    if (!f_) throw IoError("cannot open for writing: " + path);
  }
  ~BinWriter() {
    if (f_) std::fclose(f_);
  }
  BinWriter(const BinWriter&) = delete;
  BinWriter& operator=(const BinWriter&) = delete;

  void bytes(const void* p, std::size_t n) {
    if (std::fwrite(p, 1, n, f_) != n) throw IoError("write failed: " + path_);
  }
  template <typename T>
  void pod(T v) {
    // formats are little-endian; this targets little-endian hosts
    bytes(&v, sizeof(T));
  }
  void close() {
    if (f_ && std::fclose(f_) != 0) {
      f_ = nullptr;
      throw IoError("close failed: " + path_);
    }
    f_ = nullptr;
  }

 private:
  std::string path_;
  std::FILE* f_;
};

class BinReader {
 public:
  explicit BinReader(const std::string& path) : path_(path), f_(std::fopen(path.c_str(), "rb")) {
    if (!f_) throw IoError("cannot open for reading: " + path);
  }
  ~BinReader() {
    if (f_) std::fclose(f_);
  }
  BinReader(const BinReader&) = delete;
  BinReader& operator=(const BinReader&) = delete;

  void bytes(void* p, std::size_t n) {
    std::size_t got = std::fread(p, 1, n, f_);
    offset_ += got;
    if (got != n)
      throw FormatError("truncated file " + path_ + ": expected " + std::to_string(n) +
                        " bytes at offset " + std::to_string(offset_ - got) + ", got " +
                        std::to_string(got));
  }
  template <typename T>
  T pod() {
    T v;
    bytes(&v, sizeof(T));
    return v;
  }
  std::size_t offset() const { return offset_; }

 private:
  std::string path_;
  std::FILE* f_;
  std::size_t offset_ = 0;
};

}  // namespace detail

// DQPC v1: "DQPC", u32 version, u32 N_p, u16 N_th, u16 N_st,
// then N_p x (f32 x,y,z,intensity, u16 semantic, u32 instance).
inline void write_cloud(const LabeledPointCloud& cloud, const std::string& path) {
  cloud.validate();
  detail::BinWriter w(path);
  w.bytes("DQPC", 4);
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
  w.close();
}

inline LabeledPointCloud read_cloud(const std::string& path) {
  detail::BinReader r(path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, "DQPC", 4) != 0)
    throw FormatError("bad magic in " + path + " at byte offset 0");
  const auto version = r.pod<std::uint32_t>();
  if (version != 1u)
    throw FormatError("unsupported DQPC version " + std::to_string(version) + " in " + path);
  const auto n = r.pod<std::uint32_t>();
  LabeledPointCloud cloud;
  cloud.n_things = r.pod<std::uint16_t>();
  cloud.n_stuff = r.pod<std::uint16_t>();
  cloud.positions.resize(n);
  cloud.intensity.resize(n);
  cloud.semantic.resize(n);
  cloud.instance.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    cloud.positions[i][0] = r.pod<float>();
    cloud.positions[i][1] = r.pod<float>();
    cloud.positions[i][2] = r.pod<float>();
    cloud.intensity[i] = r.pod<float>();
    cloud.semantic[i] = r.pod<std::uint16_t>();
    cloud.instance[i] = r.pod<std::uint32_t>();
  }
  cloud.validate();
  return cloud;
}

}  // namespace dqf
