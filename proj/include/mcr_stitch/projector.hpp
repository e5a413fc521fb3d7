#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mcr_stitch/binary_io.hpp"
#include "mcr_stitch/error.hpp"
#include "mcr_stitch/linalg.hpp"

namespace mcr {

enum class Mode { train, eval };

struct LinearParams {
  Matrix weight;  // out x in
  Vector bias;    // out

  std::size_t in_dim() const { return static_cast<std::size_t>(weight.cols()); }
  std::size_t out_dim() const { return static_cast<std::size_t>(weight.rows()); }
};

struct BatchNormParams {
  Vector gamma;
  Vector beta;
  Vector running_mean;
  Vector running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;
};

// Linear -> BatchNorm1D -> optional ReLU.
struct MlpBlock {
  LinearParams linear;
  BatchNormParams bn;
  bool activation = true;
};

struct MlpParams {
  std::vector<MlpBlock> blocks;
};

// Shape of a projector. The defaults reproduce the reference widths
// 512 -> [512 -> 1024 -> 512 -> 1024 -> 512] with a single linear f_l.
struct ProjectorArch {
  std::size_t leaf_dim = 512;
  std::size_t base_dim = 512;
  std::size_t hidden_dim = 1024;
  // Number of linear layers in f_l; layers beyond the first are separated by ReLU.
  std::size_t fl_depth = 1;
  // Number of two-layer MLP stages in f_m; 0 means a single Linear+BatchNorm block.
  std::size_t fm_stages = 2;
  // Whether the last f_m block ends with a ReLU.
  bool final_activation = false;
  double bn_momentum = 0.1;
  double bn_epsilon = 1e-5;

  // Scales the reference layout to an arbitrary embedding width (hidden = 2 * dim).
  static ProjectorArch for_dims(std::size_t leaf_dim, std::size_t base_dim) {
    ProjectorArch a;
    a.leaf_dim = leaf_dim;
    a.base_dim = base_dim;
    a.hidden_dim = 2 * std::max(leaf_dim, base_dim);
    return a;
  }

  std::size_t fm_linear_count() const { return fm_stages == 0 ? 1 : 2 * fm_stages; }

  // (in, out) of every f_m linear layer, in order.
  std::vector<std::pair<std::size_t, std::size_t>> fm_dim_chain() const {
    std::vector<std::pair<std::size_t, std::size_t>> chain;
    if (fm_stages == 0) {
      chain.emplace_back(leaf_dim, base_dim);
      return chain;
    }
    std::size_t in = leaf_dim;
    for (std::size_t s = 0; s < fm_stages; ++s) {
      chain.emplace_back(in, hidden_dim);
      chain.emplace_back(hidden_dim, base_dim);
      in = base_dim;
    }
    return chain;
  }

  void validate() const {
    if (leaf_dim < 1 || base_dim < 1 || hidden_dim < 1) throw ConfigError("projector dims must be >= 1");
    if (fl_depth < 1 || fl_depth > 5) throw ConfigError("fl_depth must be in [1, 5]");
    if (fm_stages > 5) throw ConfigError("fm_stages must be in [0, 5]");
    if (!(bn_epsilon > 0.0) || !(bn_momentum >= 0.0 && bn_momentum <= 1.0)) {
      throw ConfigError("invalid batchnorm constants");
    }
  }

  friend bool operator==(const ProjectorArch&, const ProjectorArch&) = default;
};

struct ProjectorParams {
  ProjectorArch arch;
  std::vector<LinearParams> f_l;
  MlpParams f_m;
  Mode mode = Mode::train;
};

inline ProjectorParams init_projector(const ProjectorArch& arch, std::uint64_t seed) {
  arch.validate();
  Rng rng(derive_seed(seed, 0x50524f4aULL));
  auto linear = [&](std::size_t in, std::size_t out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> u(-bound, bound);
    LinearParams p{Matrix(static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in)),
                   Vector::Zero(static_cast<Eigen::Index>(out))};
    for (Eigen::Index i = 0; i < p.weight.size(); ++i) p.weight.data()[i] = u(rng);
    return p;
  };

  ProjectorParams pp;
  pp.arch = arch;
  for (std::size_t i = 0; i < arch.fl_depth; ++i) pp.f_l.push_back(linear(arch.leaf_dim, arch.leaf_dim));
  const auto chain = arch.fm_dim_chain();
  for (std::size_t i = 0; i < chain.size(); ++i) {
    const auto n = static_cast<Eigen::Index>(chain[i].second);
    MlpBlock b;
    b.linear = linear(chain[i].first, chain[i].second);
    b.bn = BatchNormParams{Vector::Ones(n), Vector::Zero(n), Vector::Zero(n), Vector::Ones(n),
                           arch.bn_momentum, arch.bn_epsilon};
    b.activation = (i + 1 < chain.size()) || arch.final_activation;
    pp.f_m.blocks.push_back(std::move(b));
  }
  return pp;
}

inline Matrix forward_linear(const LinearParams& p, const Matrix& batch) {
  if (static_cast<std::size_t>(batch.cols()) != p.in_dim()) {
    throw ShapeError("linear expects width " + std::to_string(p.in_dim()) + ", got " +
                     std::to_string(batch.cols()));
  }
  Matrix out = batch * p.weight.transpose();
  out.rowwise() += p.bias.transpose();
  return out;
}

// Intermediates kept by a train-mode forward for the backward pass.
struct MlpTape {
  struct Block {
    Matrix input;
    Matrix xhat;
    Vector inv_std;
    Vector batch_mean;
    Vector batch_var;  // biased
    Matrix pre_activation;
  };
  std::vector<Block> blocks;
};

struct LinearStackTape {
  std::vector<Matrix> inputs;
  std::vector<Matrix> pre_activation;
};

// Applies f_l (one or more linear layers, ReLU in between).
inline Matrix forward_fl(const std::vector<LinearParams>& layers, const Matrix& batch,
                         LinearStackTape* tape = nullptr) {
  Matrix h = batch;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (tape) tape->inputs.push_back(h);
    h = forward_linear(layers[i], h);
    if (i + 1 < layers.size()) {
      if (tape) tape->pre_activation.push_back(h);
      h = h.cwiseMax(0.0);
    }
  }
  return h;
}

// Pure f_m forward. Train mode normalizes with batch statistics and records them in
// `tape`; it never touches running statistics (see update_running_stats).
inline Matrix forward_mlp_pure(const MlpParams& params, const Matrix& batch, Mode mode, MlpTape* tape = nullptr) {
  const Eigen::Index n = batch.rows();
  if (mode == Mode::train && n < 2) {
    throw ShapeError("train-mode batch normalization needs at least 2 samples, got " + std::to_string(n));
  }
  Matrix h = batch;
  for (const auto& block : params.blocks) {
    MlpTape::Block rec;
    if (tape) rec.input = h;
    Matrix z = forward_linear(block.linear, h);
    Matrix y(z.rows(), z.cols());
    if (mode == Mode::train) {
      Vector mean = z.colwise().mean().transpose();
      Matrix centered = z.rowwise() - mean.transpose();
      Vector var = centered.colwise().squaredNorm().transpose() / static_cast<double>(n);
      Vector inv_std = (var.array() + block.bn.epsilon).rsqrt().matrix();
      Matrix xhat = centered.array().rowwise() * inv_std.transpose().array();
      y = (xhat.array().rowwise() * block.bn.gamma.transpose().array()).rowwise() + block.bn.beta.transpose().array();
      if (tape) {
        rec.xhat = std::move(xhat);
        rec.inv_std = std::move(inv_std);
        rec.batch_mean = std::move(mean);
        rec.batch_var = std::move(var);
      }
    } else {
      Vector scale = block.bn.gamma.array() * (block.bn.running_var.array() + block.bn.epsilon).rsqrt();
      Matrix centered = z.rowwise() - block.bn.running_mean.transpose();
      y = (centered.array().rowwise() * scale.transpose().array()).rowwise() + block.bn.beta.transpose().array();
    }
    if (tape) rec.pre_activation = y;
    h = block.activation ? Matrix(y.cwiseMax(0.0)) : y;
    if (tape) tape->blocks.push_back(std::move(rec));
  }
  return h;
}

// running = (1 - momentum) * running + momentum * batch, using the unbiased batch variance.
inline void update_running_stats(MlpParams& params, const MlpTape& tape, Eigen::Index batch_rows) {
  const double unbias = static_cast<double>(batch_rows) / static_cast<double>(batch_rows - 1);
  for (std::size_t i = 0; i < params.blocks.size(); ++i) {
    auto& bn = params.blocks[i].bn;
    const auto& rec = tape.blocks[i];
    bn.running_mean = (1.0 - bn.momentum) * bn.running_mean + bn.momentum * rec.batch_mean;
    bn.running_var = (1.0 - bn.momentum) * bn.running_var + bn.momentum * unbias * rec.batch_var;
  }
}

inline Matrix forward_mlp(MlpParams& params, const Matrix& batch, Mode mode) {
  if (mode == Mode::eval) return forward_mlp_pure(params, batch, mode);
  MlpTape tape;
  Matrix out = forward_mlp_pure(params, batch, mode, &tape);
  update_running_stats(params, tape, batch.rows());
  return out;
}

inline Matrix forward_mlp(const MlpParams& params, const Matrix& batch) {
  return forward_mlp_pure(params, batch, Mode::eval);
}

// f_m(f_l(x)) for the non-overlap modality; unnormalized.
inline Matrix project_nonoverlap(ProjectorParams& pp, const Matrix& batch) {
  return forward_mlp(pp.f_m, forward_fl(pp.f_l, batch), pp.mode);
}

// f_m(x) for the overlap modality; unnormalized.
inline Matrix project_overlap(ProjectorParams& pp, const Matrix& batch) {
  return forward_mlp(pp.f_m, batch, pp.mode);
}

// Eval-mode projection followed by unit normalization; what inference uses.
inline Matrix embed_nonoverlap(const ProjectorParams& pp, const Matrix& batch) {
  Matrix out = forward_mlp_pure(pp.f_m, forward_fl(pp.f_l, batch), Mode::eval);
  normalize_rows_inplace(out);
  return out;
}

// A zero-valued copy with the same shapes; used as the gradient container.
inline ProjectorParams zeros_like(const ProjectorParams& pp) {
  ProjectorParams g = pp;
  for (auto& l : g.f_l) {
    l.weight.setZero();
    l.bias.setZero();
  }
  for (auto& b : g.f_m.blocks) {
    b.linear.weight.setZero();
    b.linear.bias.setZero();
    b.bn.gamma.setZero();
    b.bn.beta.setZero();
    b.bn.running_mean.setZero();
    b.bn.running_var.setZero();
  }
  return g;
}

// Visits every trainable tensor of `a` and the matching tensor of `b` in declaration
// order. `f(name, span_a, span_b, decays)`; biases and batchnorm affine terms do not decay.
template <class PA, class PB, class F>
void visit_parameter_pairs(PA& a, PB& b, F&& f) {
  auto span_of = [](auto& m) { return std::span(m.data(), static_cast<std::size_t>(m.size())); };
  for (std::size_t i = 0; i < a.f_l.size(); ++i) {
    const std::string p = "f_l." + std::to_string(i);
    f(p + ".weight", span_of(a.f_l[i].weight), span_of(b.f_l[i].weight), true);
    f(p + ".bias", span_of(a.f_l[i].bias), span_of(b.f_l[i].bias), false);
  }
  for (std::size_t i = 0; i < a.f_m.blocks.size(); ++i) {
    const std::string p = "f_m." + std::to_string(i);
    auto& ba = a.f_m.blocks[i];
    auto& bb = b.f_m.blocks[i];
    f(p + ".linear.weight", span_of(ba.linear.weight), span_of(bb.linear.weight), true);
    f(p + ".linear.bias", span_of(ba.linear.bias), span_of(bb.linear.bias), false);
    f(p + ".bn.gamma", span_of(ba.bn.gamma), span_of(bb.bn.gamma), false);
    f(p + ".bn.beta", span_of(ba.bn.beta), span_of(bb.bn.beta), false);
  }
}

template <class P, class F>
void visit_parameters(P& p, F&& f) {
  visit_parameter_pairs(p, p, [&](const std::string& name, auto s, auto, bool decays) { f(name, s, decays); });
}

// ---------------------------------------------------------------------------
// EXP1 checkpoints
//
// "EXP1" | u32 version=1 | descriptor | parameter blocks (f32 LE)
// descriptor: u32 leaf_dim, base_dim, hidden_dim, fl_depth, fm_stages | u8 final_activation |
//             f32 bn_momentum, bn_epsilon | u32 linear layer count | (u32 in, u32 out) per layer
// blocks: f_l layers (weight, bias), then f_m blocks (weight, bias, gamma, beta,
//         running_mean, running_var).

inline constexpr std::string_view kExpMagic = "EXP1";
inline constexpr std::size_t kMaxCheckpointDim = 1u << 16;

inline std::vector<std::pair<std::size_t, std::size_t>> linear_dim_chain(const ProjectorArch& a) {
  std::vector<std::pair<std::size_t, std::size_t>> chain(a.fl_depth, {a.leaf_dim, a.leaf_dim});
  for (const auto& d : a.fm_dim_chain()) chain.push_back(d);
  return chain;
}

inline std::map<std::string, std::string> describe(const ProjectorArch& a) {
  std::map<std::string, std::string> d;
  d["leaf_dim"] = std::to_string(a.leaf_dim);
  d["base_dim"] = std::to_string(a.base_dim);
  d["hidden_dim"] = std::to_string(a.hidden_dim);
  d["fl_depth"] = std::to_string(a.fl_depth);
  d["fm_stages"] = std::to_string(a.fm_stages);
  d["fm_linear_layers"] = std::to_string(a.fm_linear_count());
  d["final_activation"] = a.final_activation ? "true" : "false";
  std::ostringstream bn;
  bn << static_cast<float>(a.bn_momentum) << "/" << static_cast<float>(a.bn_epsilon);
  d["bn_momentum/epsilon"] = bn.str();
  return d;
}

// Human-readable list of differing descriptor fields; empty when compatible.
inline std::string descriptor_diff(const ProjectorArch& expected, const ProjectorArch& actual) {
  const auto e = describe(expected);
  const auto a = describe(actual);
  std::string out;
  for (const auto& [key, value] : e) {
    if (a.at(key) != value) out += "  " + key + ": expected " + value + ", checkpoint has " + a.at(key) + "\n";
  }
  return out;
}

namespace detail {

template <class M>
void write_block(std::ostream& os, const M& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) binary::write_f32(os, static_cast<float>(m.data()[i]));
}

template <class M>
void read_block(std::istream& is, M& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    const float v = binary::read_f32(is, "EXP1 parameter block");
    if (!std::isfinite(v)) throw FormatError("non-finite value in checkpoint");
    m.data()[i] = v;
  }
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const ProjectorParams& pp) {
  const auto& a = pp.arch;
  binary::write_magic(os, kExpMagic);
  binary::write_u32(os, 1);
  for (std::size_t v : {a.leaf_dim, a.base_dim, a.hidden_dim, a.fl_depth, a.fm_stages}) {
    binary::write_u32(os, static_cast<std::uint32_t>(v));
  }
  binary::write_u8(os, a.final_activation ? 1 : 0);
  binary::write_f32(os, static_cast<float>(a.bn_momentum));
  binary::write_f32(os, static_cast<float>(a.bn_epsilon));
  const auto chain = linear_dim_chain(a);
  binary::write_u32(os, static_cast<std::uint32_t>(chain.size()));
  for (const auto& [in, out] : chain) {
    binary::write_u32(os, static_cast<std::uint32_t>(in));
    binary::write_u32(os, static_cast<std::uint32_t>(out));
  }
  for (const auto& l : pp.f_l) {
    detail::write_block(os, l.weight);
    detail::write_block(os, l.bias);
  }
  for (const auto& b : pp.f_m.blocks) {
    detail::write_block(os, b.linear.weight);
    detail::write_block(os, b.linear.bias);
    detail::write_block(os, b.bn.gamma);
    detail::write_block(os, b.bn.beta);
    detail::write_block(os, b.bn.running_mean);
    detail::write_block(os, b.bn.running_var);
  }
}

inline ProjectorArch read_checkpoint_descriptor(std::istream& is) {
  binary::expect_magic(is, kExpMagic);
  const auto version = binary::read_u32(is, "EXP1 version");
  if (version != 1) throw FormatError("unsupported EXP1 version " + std::to_string(version));
  ProjectorArch a;
  a.leaf_dim = binary::read_u32(is, "EXP1 descriptor");
  a.base_dim = binary::read_u32(is, "EXP1 descriptor");
  a.hidden_dim = binary::read_u32(is, "EXP1 descriptor");
  a.fl_depth = binary::read_u32(is, "EXP1 descriptor");
  a.fm_stages = binary::read_u32(is, "EXP1 descriptor");
  a.final_activation = binary::read_u8(is, "EXP1 descriptor") != 0;
  a.bn_momentum = binary::read_f32(is, "EXP1 descriptor");
  a.bn_epsilon = binary::read_f32(is, "EXP1 descriptor");
  for (std::size_t d : {a.leaf_dim, a.base_dim, a.hidden_dim}) {
    if (d > kMaxCheckpointDim) throw FormatError("checkpoint dimension too large: " + std::to_string(d));
  }
  try {
    a.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("invalid checkpoint descriptor: ") + e.what());
  }
  const auto expected = linear_dim_chain(a);
  const std::size_t layers = binary::read_u32(is, "EXP1 layer count");
  std::vector<std::pair<std::size_t, std::size_t>> chain;
  for (std::size_t i = 0; i < layers && i < 64; ++i) {
    const std::size_t in = binary::read_u32(is, "EXP1 layer dims");
    const std::size_t out = binary::read_u32(is, "EXP1 layer dims");
    chain.emplace_back(in, out);
  }
  if (chain != expected) throw FormatError("checkpoint layer dims do not match its descriptor");
  return a;
}

inline void save_checkpoint(const ProjectorParams& pp, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open for writing: " + path.string());
  write_checkpoint(os, pp);
  if (!os) throw Error("write failed: " + path.string());
}

// Loaded projectors start in eval mode.
inline ProjectorParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("missing file: " + path.string());
  ProjectorParams pp = init_projector(read_checkpoint_descriptor(is), 0);
  for (auto& l : pp.f_l) {
    detail::read_block(is, l.weight);
    detail::read_block(is, l.bias);
  }
  for (auto& b : pp.f_m.blocks) {
    detail::read_block(is, b.linear.weight);
    detail::read_block(is, b.linear.bias);
    detail::read_block(is, b.bn.gamma);
    detail::read_block(is, b.bn.beta);
    detail::read_block(is, b.bn.running_mean);
    detail::read_block(is, b.bn.running_var);
    for (Eigen::Index i = 0; i < b.bn.running_var.size(); ++i) {
      if (!(b.bn.running_var(i) > 0.0)) throw FormatError("checkpoint running_var must be positive");
    }
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes in checkpoint");
  pp.mode = Mode::eval;
  return pp;
}

}  // namespace mcr
