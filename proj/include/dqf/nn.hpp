#pragma once

#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "dqf/autodiff.hpp"
#include "dqf/cloud.hpp"
#include "dqf/core.hpp"

namespace dqf::nn {

using ad::Tape;
using ad::Var;

// Named learnable parameters. Creation order is fixed by the model wiring, so
// pushing them onto a fresh tape each forward pass is deterministic.
class ParamStore {
 public:
  Matrix& create(const std::string& name, int rows, int cols, Rng& rng, double init_scale = -1) {
    if (index_.count(name)) throw ContractError("duplicate parameter: " + name);
    Entry e;
    e.name = name;
    e.value = Matrix::Zero(rows, cols);
    if (init_scale != 0.0) {
      double s = (init_scale > 0) ? init_scale : 1.0 / std::sqrt(static_cast<double>(rows));
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) e.value(r, c) = rng.uniform(-s, s);
    }
    e.m = Matrix::Zero(rows, cols);
    e.v = Matrix::Zero(rows, cols);
    e.grad = Matrix::Zero(rows, cols);
    index_[name] = static_cast<int>(entries_.size());
    entries_.push_back(std::move(e));
    return entries_.back().value;
  }
  Matrix& create_const(const std::string& name, int rows, int cols, double fill) {
    Rng dummy(0);
    Matrix& m = create(name, rows, cols, dummy, 0.0);
    m.setConstant(fill);
    return m;
  }

  void begin_forward(Tape& tape) {
    tape_ = &tape;
    vars_.clear();
    for (auto& e : entries_) vars_.push_back(tape.leaf(e.value));
  }
  Var operator[](const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return vars_.at(it->second);
  }
  bool has(const std::string& name) const { return index_.count(name) != 0; }

  void collect_grads() {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      Matrix& g = tape_->grad(vars_[i]);
      entries_[i].grad = g;
      if (!g.allFinite()) throw NumericError("non-finite gradient in " + entries_[i].name);
    }
  }

  Matrix& value(const std::string& name) { return entries_[index_.at(name)].value; }
  const Matrix& grad_of(const std::string& name) const { return entries_[index_.at(name)].grad; }

  struct Entry {
    std::string name;
    Matrix value, m, v, grad;
  };
  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, int> index_;
  std::vector<Var> vars_;
  Tape* tape_ = nullptr;
};

// AdamW: decoupled weight decay, bias-corrected moments.
class AdamW {
 public:
  double lr = 1e-4;
  double beta1 = 0.9, beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::int64_t step_count = 0;

  void step(ParamStore& params) {
    ++step_count;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    for (auto& e : params.entries()) {
      e.m = beta1 * e.m + (1 - beta1) * e.grad;
      e.v = beta2 * e.v.array() + (1 - beta2) * e.grad.array().square();
      Matrix mhat = e.m / bc1;
      Matrix vhat = e.v / bc2;
      e.value -= lr * (mhat.array() / (vhat.array().sqrt() + eps) +
                       weight_decay * e.value.array()).matrix();
    }
  }
};

struct Linear {
  std::string w, b;  // parameter names; b empty = no bias
  Linear() = default;
  Linear(ParamStore& p, const std::string& prefix, int in, int out, Rng& rng, bool bias = true)
      : w(prefix + ".w"), b(bias ? prefix + ".b" : "") {
    p.create(w, in, out, rng);
    if (bias) p.create_const(b, 1, out, 0.0);
  }
  // x rows are samples
  Var operator()(const ParamStore& p, Var x) const {
    Var y = ad::matmul(x, p[w]);
    return b.empty() ? y : ad::add_row_broadcast(y, p[b]);
  }
};

struct LayerNorm {
  std::string gamma, beta;
  LayerNorm() = default;
  LayerNorm(ParamStore& p, const std::string& prefix, int dim) {
    gamma = prefix + ".gamma";
    beta = prefix + ".beta";
    p.create_const(gamma, 1, dim, 1.0);
    p.create_const(beta, 1, dim, 0.0);
  }
  Var operator()(const ParamStore& p, Var x) const {
    return ad::layernorm_rows(x, p[gamma], p[beta]);
  }
};

// source-pixel table for 3x3 convolution on an H x W map, row-major pixels
inline std::vector<int> conv3x3_indices(int H, int W) {
  std::vector<int> src(static_cast<std::size_t>(9) * H * W, -1);
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) {
      int tap = (dy + 1) * 3 + (dx + 1);
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) {
          int sh = h + dy, sw = w + dx;
          if (sh >= 0 && sh < H && sw >= 0 && sw < W)
            src[static_cast<std::size_t>(tap) * H * W + h * W + w] = sh * W + sw;
        }
    }
  return src;
}

// 3x3 conv on (C_in x H*W) maps; weight is (C_out x 9*C_in)
struct Conv3x3 {
  std::string w, b;
  Conv3x3() = default;
  Conv3x3(ParamStore& p, const std::string& prefix, int c_in, int c_out, Rng& rng,
          bool bias = false)
      : w(prefix + ".w"), b(bias ? prefix + ".b" : "") {
    Matrix& m = p.create(w, c_out, 9 * c_in, rng, 0.0);
    double s = 1.0 / std::sqrt(9.0 * c_in);
    for (int r = 0; r < m.rows(); ++r)
      for (int c = 0; c < m.cols(); ++c) m(r, c) = rng.uniform(-s, s);
    if (bias) p.create_const(b, c_out, 1, 0.0);
  }
  Var operator()(const ParamStore& p, Var x, const std::vector<int>& src) const {
    Var y = ad::matmul(p[w], ad::im2col3x3(x, src));
    return b.empty() ? y : ad::add_col_broadcast(y, p[b]);
  }
};

// ---- checkpoint format (DQCK v1) ----
// "DQCK", u32 version, u32 config text length, config text, then blobs until
// EOF: u32 name length, name, u32 rank, u32 dims[rank], f32 data (row-major).

inline void save_checkpoint(const std::string& path, const std::string& config_text,
                            const ParamStore& params,
                            const std::map<std::string, Matrix>& extra = {}) {
  detail::BinWriter w(path);
  w.bytes("DQCK", 4);
  w.pod<std::uint32_t>(1u);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(config_text.size()));
  w.bytes(config_text.data(), config_text.size());
  auto blob = [&](const std::string& name, const Matrix& m) {
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.pod<std::uint32_t>(2u);
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(m.rows()));
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(m.cols()));
    for (int r = 0; r < m.rows(); ++r)
      for (int c = 0; c < m.cols(); ++c) w.pod<float>(static_cast<float>(m(r, c)));
  };
  for (const auto& e : params.entries()) {
    blob(e.name, e.value);
    blob("__opt.m." + e.name, e.m);
    blob("__opt.v." + e.name, e.v);
  }
  for (const auto& [name, m] : extra) blob(name, m);
  w.close();
}

struct Checkpoint {
  std::string config_text;
  std::map<std::string, Matrix> blobs;
};

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream probe(path, std::ios::binary | std::ios::ate);
  if (!probe) throw IoError("cannot open checkpoint: " + path);
  const std::size_t file_size = static_cast<std::size_t>(probe.tellg());
  probe.close();
  detail::BinReader r(path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, "DQCK", 4) != 0) throw FormatError("bad checkpoint magic in " + path);
  const auto version = r.pod<std::uint32_t>();
  if (version != 1u)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  const auto cfg_len = r.pod<std::uint32_t>();
  ck.config_text.resize(cfg_len);
  if (cfg_len) r.bytes(ck.config_text.data(), cfg_len);
  while (r.offset() < file_size) {
    const auto name_len = r.pod<std::uint32_t>();
    std::string name(name_len, '\0');
    r.bytes(name.data(), name_len);
    const auto rank = r.pod<std::uint32_t>();
    if (rank != 2u) throw FormatError("checkpoint blob '" + name + "' has unsupported rank");
    const auto rows = r.pod<std::uint32_t>();
    const auto cols = r.pod<std::uint32_t>();
    Matrix m(rows, cols);
    for (std::uint32_t i = 0; i < rows; ++i)
      for (std::uint32_t j = 0; j < cols; ++j) m(i, j) = r.pod<float>();
    ck.blobs[name] = std::move(m);
  }
  return ck;
}

inline void restore_params(ParamStore& params, const Checkpoint& ck) {
  for (auto& e : params.entries()) {
    auto it = ck.blobs.find(e.name);
    if (it == ck.blobs.end()) throw FormatError("checkpoint missing parameter " + e.name);
    if (it->second.rows() != e.value.rows() || it->second.cols() != e.value.cols())
      throw FormatError("checkpoint shape mismatch for " + e.name);
    e.value = it->second;
    auto im = ck.blobs.find("__opt.m." + e.name);
    auto iv = ck.blobs.find("__opt.v." + e.name);
    if (im != ck.blobs.end()) e.m = im->second;
    if (iv != ck.blobs.end()) e.v = iv->second;
  }
}

}  // namespace dqf::nn
