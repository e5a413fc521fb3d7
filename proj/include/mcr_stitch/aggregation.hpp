#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mcr_stitch/binary_io.hpp"
#include "mcr_stitch/embedding_store.hpp"
#include "mcr_stitch/error.hpp"
#include "mcr_stitch/linalg.hpp"

namespace mcr {

struct AggregationConfig {
  double tau1 = 0.01;
  double noise_variance = 0.004;
  bool renormalize_after_aggregation = true;
  bool renormalize_after_noise = true;
  std::uint64_t seed = 0;
  // 0 keeps the full gallery; otherwise only the top_k weights survive and are renormalized.
  std::size_t top_k = 0;

  void validate() const {
    if (!(tau1 > 0.0)) throw ConfigError("tau1 must be positive");
    if (!(noise_variance >= 0.0)) throw ConfigError("noise_variance must be non-negative");
  }
};

// Which modality acted as the query when a quadruple was produced.
enum class Centricity : std::uint8_t { overlap = 0, leaf_nonoverlap = 1, base_nonoverlap = 2 };

inline std::string to_string(Centricity c) {
  switch (c) {
    case Centricity::overlap: return "overlap";
    case Centricity::leaf_nonoverlap: return "leaf";
    case Centricity::base_nonoverlap: return "base";
  }
  return "?";
}

// One semantically consistent tuple spanning both spaces. In the audio/text/image
// setting these are pseudo audio, leaf text, base text and pseudo image.
struct PseudoQuadruple {
  std::vector<double> leaf_nonoverlap;
  std::vector<double> leaf_overlap;
  std::vector<double> base_overlap;
  std::vector<double> base_nonoverlap;
  Centricity centricity = Centricity::overlap;
};

using QuadrupleList = std::vector<PseudoQuadruple>;

struct Aggregate {
  std::vector<double> vector;
  std::vector<double> weights;
};

namespace detail {

inline void check_simplex(std::span<const double> w) {
  double sum = 0.0;
  for (double x : w) {
    if (!(x >= 0.0)) throw Error("weights must be non-negative");
    sum += x;
  }
  if (std::abs(sum - 1.0) > 1e-6) throw Error("weights must sum to 1, got " + std::to_string(sum));
}

inline std::vector<double> unit(std::vector<double> v) {
  double sq = 0.0;
  for (double x : v) sq += x * x;
  const double n = std::sqrt(sq);
  if (n < kMinRowNorm) throw Error("cannot normalize a zero vector");
  for (double& x : v) x /= n;
  return v;
}

inline std::vector<double> row_vector(const EmbeddingMatrix& m, std::size_t i) {
  const auto r = m.row(i);
  return {r.begin(), r.end()};
}

}  // namespace detail

// softmax(query . gallery^T / tau1) . gallery, with max subtraction.
inline Aggregate softmax_weighted_aggregate(std::span<const double> query, const EmbeddingMatrix& gallery,
                                            double tau1, std::size_t top_k = 0) {
  if (gallery.rows() == 0) throw Error("empty gallery");
  if (query.size() != gallery.dim()) {
    throw ShapeError("dim mismatch: query " + std::to_string(query.size()) + " vs gallery " +
                     std::to_string(gallery.dim()));
  }
  if (!(tau1 > 0.0)) throw ConfigError("tau1 must be positive");

  const std::size_t n = gallery.rows();
  std::vector<double> logits(n);
  for (std::size_t j = 0; j < n; ++j) {
    const auto g = gallery.row(j);
    double dot = 0.0;
    for (std::size_t k = 0; k < g.size(); ++k) dot += query[k] * g[k];
    logits[j] = dot / tau1;
  }

  std::vector<bool> keep(n, true);
  if (top_k > 0 && top_k < n) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
    std::fill(keep.begin(), keep.end(), false);
    for (std::size_t r = 0; r < top_k; ++r) keep[order[r]] = true;
  }

  double max_logit = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j)
    if (keep[j]) max_logit = std::max(max_logit, logits[j]);

  Aggregate out;
  out.weights.assign(n, 0.0);
  double z = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    if (!keep[j]) continue;
    out.weights[j] = std::exp(logits[j] - max_logit);
    z += out.weights[j];
  }
  for (double& w : out.weights) w /= z;

  out.vector.assign(gallery.dim(), 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    if (out.weights[j] == 0.0) continue;
    const auto g = gallery.row(j);
    for (std::size_t k = 0; k < g.size(); ++k) out.vector[k] += out.weights[j] * g[k];
  }
  return out;
}

// Reuses weights computed in one space over the one-to-one matched rows of the other.
inline std::vector<double> transfer_weights_aggregate(std::span<const double> weights,
                                                      const EmbeddingMatrix& paired_gallery) {
  if (weights.size() != paired_gallery.rows()) {
    throw ShapeError("weights length " + std::to_string(weights.size()) + " != gallery rows " +
                     std::to_string(paired_gallery.rows()));
  }
  detail::check_simplex(weights);
  std::vector<double> out(paired_gallery.dim(), 0.0);
  for (std::size_t j = 0; j < weights.size(); ++j) {
    if (weights[j] == 0.0) continue;
    const auto g = paired_gallery.row(j);
    for (std::size_t k = 0; k < g.size(); ++k) out[k] += weights[j] * g[k];
  }
  return out;
}

// Overlap modality as the query: native overlap pair, aggregated non-overlap on each side.
inline QuadrupleList generate_overlap_centric(const EmbeddingMatrix& overlap_leaf,
                                              const EmbeddingMatrix& overlap_base,
                                              const EmbeddingMatrix& nonoverlap_leaf_gallery,
                                              const EmbeddingMatrix& nonoverlap_base_gallery,
                                              const AggregationConfig& cfg) {
  cfg.validate();
  if (overlap_leaf.rows() != overlap_base.rows()) {
    throw ShapeError("row-count mismatch between overlap matrices: " + std::to_string(overlap_leaf.rows()) +
                     " vs " + std::to_string(overlap_base.rows()));
  }
  QuadrupleList out;
  out.reserve(overlap_leaf.rows());
  for (std::size_t i = 0; i < overlap_leaf.rows(); ++i) {
    PseudoQuadruple q;
    q.leaf_overlap = detail::row_vector(overlap_leaf, i);
    q.base_overlap = detail::row_vector(overlap_base, i);
    q.leaf_nonoverlap = softmax_weighted_aggregate(q.leaf_overlap, nonoverlap_leaf_gallery, cfg.tau1, cfg.top_k).vector;
    q.base_nonoverlap = softmax_weighted_aggregate(q.base_overlap, nonoverlap_base_gallery, cfg.tau1, cfg.top_k).vector;
    if (cfg.renormalize_after_aggregation) {
      q.leaf_nonoverlap = detail::unit(std::move(q.leaf_nonoverlap));
      q.base_nonoverlap = detail::unit(std::move(q.base_nonoverlap));
    }
    q.centricity = Centricity::overlap;
    out.push_back(std::move(q));
  }
  return out;
}

// Which space the non-overlap queries live in.
enum class QuerySide { leaf, base };

// Non-overlap modality as the query. For QuerySide::leaf, `overlap_same` is the
// leaf-space overlap matrix, `overlap_other` the base-space one, and
// `nonoverlap_other_gallery` the base non-overlap gallery; QuerySide::base is the mirror.
inline QuadrupleList generate_nonoverlap_centric(const EmbeddingMatrix& queries,
                                                 const EmbeddingMatrix& overlap_same,
                                                 const EmbeddingMatrix& overlap_other,
                                                 const EmbeddingMatrix& nonoverlap_other_gallery,
                                                 const AggregationConfig& cfg, QuerySide side = QuerySide::leaf) {
  cfg.validate();
  if (overlap_same.rows() != overlap_other.rows()) {
    throw ShapeError("row-count mismatch between overlap matrices: " + std::to_string(overlap_same.rows()) +
                     " vs " + std::to_string(overlap_other.rows()));
  }
  QuadrupleList out;
  out.reserve(queries.rows());
  for (std::size_t i = 0; i < queries.rows(); ++i) {
    std::vector<double> query = detail::row_vector(queries, i);
    Aggregate same = softmax_weighted_aggregate(query, overlap_same, cfg.tau1, cfg.top_k);
    std::vector<double> other = transfer_weights_aggregate(same.weights, overlap_other);
    std::vector<double> same_vec = std::move(same.vector);
    if (cfg.renormalize_after_aggregation) {
      same_vec = detail::unit(std::move(same_vec));
      other = detail::unit(std::move(other));
    }
    std::vector<double> far = softmax_weighted_aggregate(other, nonoverlap_other_gallery, cfg.tau1, cfg.top_k).vector;
    if (cfg.renormalize_after_aggregation) far = detail::unit(std::move(far));

    PseudoQuadruple q;
    if (side == QuerySide::leaf) {
      q.leaf_nonoverlap = std::move(query);
      q.leaf_overlap = std::move(same_vec);
      q.base_overlap = std::move(other);
      q.base_nonoverlap = std::move(far);
      q.centricity = Centricity::leaf_nonoverlap;
    } else {
      q.base_nonoverlap = std::move(query);
      q.base_overlap = std::move(same_vec);
      q.leaf_overlap = std::move(other);
      q.leaf_nonoverlap = std::move(far);
      q.centricity = Centricity::base_nonoverlap;
    }
    out.push_back(std::move(q));
  }
  return out;
}

// Concatenates the centric lists in argument order, then applies a seeded shuffle.
inline QuadrupleList build_training_set(const std::vector<QuadrupleList>& lists, std::uint64_t seed) {
  QuadrupleList out;
  for (const auto& l : lists) out.insert(out.end(), l.begin(), l.end());
  if (out.empty()) throw Error("all quadruple lists are empty");
  Rng rng(derive_seed(seed, 0x5348554646ULL));
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

// Independent zero-mean Gaussian noise (std = sqrt(variance)) on every component of all four members.
inline QuadrupleList add_gaussian_noise(QuadrupleList quadruples, double variance, std::uint64_t seed,
                                        bool renormalize = true) {
  if (!(variance >= 0.0)) throw ConfigError("noise variance must be non-negative");
  if (variance == 0.0) return quadruples;
  Rng rng(derive_seed(seed, 0x4e4f495345ULL));
  std::normal_distribution<double> noise(0.0, std::sqrt(variance));
  for (auto& q : quadruples) {
    for (auto* v : {&q.leaf_nonoverlap, &q.leaf_overlap, &q.base_overlap, &q.base_nonoverlap}) {
      for (double& x : *v) x += noise(rng);
      if (renormalize) *v = detail::unit(std::move(*v));
    }
  }
  return quadruples;
}

// The four aligned matrices of a quadruple set, used for batching and serialization.
struct QuadrupleMatrices {
  Matrix leaf_nonoverlap;
  Matrix leaf_overlap;
  Matrix base_overlap;
  Matrix base_nonoverlap;
  std::vector<Centricity> centricity;

  std::size_t size() const { return centricity.size(); }
};

inline QuadrupleMatrices to_matrices(const QuadrupleList& quads) {
  if (quads.empty()) throw Error("empty quadruple set");
  const auto leaf_dim = static_cast<Eigen::Index>(quads.front().leaf_overlap.size());
  const auto base_dim = static_cast<Eigen::Index>(quads.front().base_overlap.size());
  const auto n = static_cast<Eigen::Index>(quads.size());
  QuadrupleMatrices m{Matrix(n, leaf_dim), Matrix(n, leaf_dim), Matrix(n, base_dim), Matrix(n, base_dim), {}};
  m.centricity.reserve(quads.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& q = quads[static_cast<std::size_t>(i)];
    if (static_cast<Eigen::Index>(q.leaf_nonoverlap.size()) != leaf_dim ||
        static_cast<Eigen::Index>(q.leaf_overlap.size()) != leaf_dim ||
        static_cast<Eigen::Index>(q.base_overlap.size()) != base_dim ||
        static_cast<Eigen::Index>(q.base_nonoverlap.size()) != base_dim) {
      throw ShapeError("inconsistent quadruple dims at index " + std::to_string(i));
    }
    m.leaf_nonoverlap.row(i) = Eigen::Map<const Eigen::RowVectorXd>(q.leaf_nonoverlap.data(), leaf_dim);
    m.leaf_overlap.row(i) = Eigen::Map<const Eigen::RowVectorXd>(q.leaf_overlap.data(), leaf_dim);
    m.base_overlap.row(i) = Eigen::Map<const Eigen::RowVectorXd>(q.base_overlap.data(), base_dim);
    m.base_nonoverlap.row(i) = Eigen::Map<const Eigen::RowVectorXd>(q.base_nonoverlap.data(), base_dim);
    m.centricity.push_back(q.centricity);
  }
  return m;
}

inline QuadrupleList from_matrices(const QuadrupleMatrices& m) {
  QuadrupleList out(m.size());
  auto row = [](const Matrix& x, Eigen::Index i) {
    return std::vector<double>(x.row(i).data(), x.row(i).data() + x.cols());
  };
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    out[i] = PseudoQuadruple{row(m.leaf_nonoverlap, r), row(m.leaf_overlap, r), row(m.base_overlap, r),
                             row(m.base_nonoverlap, r), m.centricity[i]};
  }
  return out;
}

// PQD1 layout: "PQD1" | u32 version=1 | u32 count | four EMB1 blocks (leaf_nonoverlap,
// leaf_overlap, base_overlap, base_nonoverlap) | count centricity bytes.
inline constexpr std::string_view kPqdMagic = "PQD1";

inline void save_quadruples(const QuadrupleList& quads, const std::filesystem::path& path) {
  const QuadrupleMatrices m = to_matrices(quads);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open for writing: " + path.string());
  binary::write_magic(os, kPqdMagic);
  binary::write_u32(os, 1);
  binary::write_u32(os, static_cast<std::uint32_t>(m.size()));
  for (const Matrix* block : {&m.leaf_nonoverlap, &m.leaf_overlap, &m.base_overlap, &m.base_nonoverlap}) {
    write_emb1(os, EmbeddingMatrix::from_matrix(*block, false));
  }
  for (Centricity c : m.centricity) binary::write_u8(os, static_cast<std::uint8_t>(c));
  if (!os) throw Error("write failed: " + path.string());
}

inline QuadrupleList load_quadruples(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("missing file: " + path.string());
  binary::expect_magic(is, kPqdMagic);
  const auto version = binary::read_u32(is, "PQD1 version");
  if (version != 1) throw FormatError("unsupported PQD1 version " + std::to_string(version));
  const std::size_t count = binary::read_u32(is, "PQD1 count");
  QuadrupleMatrices m;
  for (Matrix* block : {&m.leaf_nonoverlap, &m.leaf_overlap, &m.base_overlap, &m.base_nonoverlap}) {
    EmbeddingMatrix e = read_emb1(is, false, false);
    if (e.rows() != count) throw FormatError("PQD1 block row count disagrees with header");
    *block = e.to_matrix();
  }
  if (m.leaf_nonoverlap.cols() != m.leaf_overlap.cols() || m.base_overlap.cols() != m.base_nonoverlap.cols()) {
    throw FormatError("PQD1 block dims disagree");
  }
  m.centricity.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto c = binary::read_u8(is, "PQD1 centricity");
    if (c > 2) throw FormatError("invalid centricity code " + std::to_string(c));
    m.centricity.push_back(static_cast<Centricity>(c));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes in PQD1 file");
  return from_matrices(m);
}

}  // namespace mcr
